//! Double-DQN over two group environments with a shared Q-network,
//! per-group feature extractors, and distributional alignment of the
//! extractor outputs (MMD or a weight-clipped Wasserstein critic).
//!
//! Each iteration runs, in order: environment steps for both groups, model
//! updates, alignment updates. Alignment follows the block-coordinate rule:
//! only the extractor of the group with the higher recent return moves.

use std::collections::VecDeque;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::divergence::{mmd2_unbiased, mmd2_unbiased_with_grad, KernelSpec, SampleBatch};
use crate::envs::{EnvPair, EnvStep, Episode};
use crate::error::{Error, Result};
use crate::nn::{soft_update, Adam, AdamConfig, Mlp};

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub features: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub next_features: Vec<f64>,
    pub done: bool,
    pub next_valid: Vec<bool>,
}

impl From<EnvStep> for Transition {
    fn from(s: EnvStep) -> Self {
        Self {
            features: s.state_features,
            action: s.action,
            reward: s.reward,
            next_features: s.next_state_features,
            done: s.done,
            next_valid: s.next_valid,
        }
    }
}

/// Fixed-capacity ring buffer; the oldest record is overwritten first.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    data: Vec<Transition>,
    head: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidParameter("replay capacity must be positive".into()));
        }
        Ok(Self {
            capacity,
            data: Vec::new(),
            head: 0,
        })
    }

    pub fn push(&mut self, t: Transition) {
        if self.data.len() < self.capacity {
            self.data.push(t);
        } else {
            self.data[self.head] = t;
        }
        self.head = (self.head + 1) % self.capacity;
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn get(&self, i: usize) -> &Transition {
        &self.data[i]
    }

    /// Uniform draw of `min(k, len)` distinct records.
    pub fn sample<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Vec<&Transition> {
        let k = k.min(self.data.len());
        if k == 0 {
            return Vec::new();
        }
        index::sample(rng, self.data.len(), k).into_iter().map(|i| &self.data[i]).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AlignmentKind {
    /// No alignment machinery at all.
    None,
    Mmd {
        #[serde(default = "default_bandwidths")]
        bandwidths: Vec<f64>,
    },
    Wasserstein {
        #[serde(default = "default_critic_steps")]
        critic_steps: usize,
        #[serde(default = "default_clip")]
        clip: f64,
        #[serde(default = "default_critic_hidden")]
        critic_hidden: usize,
    },
}

fn default_bandwidths() -> Vec<f64> {
    KernelSpec::multiscale().bandwidths().to_vec()
}
fn default_critic_steps() -> usize {
    5
}
fn default_clip() -> f64 {
    0.1
}
fn default_critic_hidden() -> usize {
    64
}

impl Default for AlignmentKind {
    fn default() -> Self {
        AlignmentKind::Mmd {
            bandwidths: default_bandwidths(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    /// Environment steps per iteration for a group at full sampling rate.
    pub sample_batch: usize,
    /// Transitions per model update, split across groups in proportion to
    /// their buffer sizes.
    pub update_batch: usize,
    pub buffer_capacity: usize,
    pub hidden: Vec<usize>,
    /// Extractor hidden and output width; defaults to the state dimension.
    pub extractor_width: Option<usize>,
    pub updates_per_iteration: usize,
    /// Model updates : alignment updates. Alignment steps per iteration are
    /// `round(updates_per_iteration * ratio[1] / ratio[0])`.
    pub ratio: [u32; 2],
    pub alignment: AlignmentKind,
    /// States drawn from each buffer per alignment step.
    pub align_batch: usize,
    pub align_lr: f64,
    pub gamma: f64,
    pub tau: f64,
    pub lr: f64,
    pub q_weight_decay: f64,
    pub eps_start: f64,
    pub eps_end: f64,
    pub eps_decay_iterations: usize,
    pub eval_every: usize,
    pub eval_episodes: usize,
    /// Completed training episodes averaged for the block-coordinate rule.
    pub return_window: usize,
    /// Report gamma-discounted rather than plain episode sums.
    pub discounted_returns: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            iterations: 100,
            sample_batch: 64,
            update_batch: 256,
            buffer_capacity: 20_000,
            hidden: vec![64],
            extractor_width: None,
            updates_per_iteration: 10,
            ratio: [1, 1],
            alignment: AlignmentKind::default(),
            align_batch: 128,
            align_lr: 1e-3,
            gamma: 0.9,
            tau: 0.99,
            lr: 1e-3,
            q_weight_decay: 1e-6,
            eps_start: 1.0,
            eps_end: 0.1,
            eps_decay_iterations: 160,
            eval_every: 1,
            eval_episodes: 20,
            return_window: 20,
            discounted_returns: false,
        }
    }

    pub fn paper() -> Self {
        Self {
            iterations: 400,
            sample_batch: 1000,
            update_batch: 10_000,
            buffer_capacity: 200_000,
            hidden: vec![128],
            eval_every: 10,
            ..Self::desk()
        }
    }

    pub fn tiny() -> Self {
        Self {
            iterations: 20,
            sample_batch: 32,
            update_batch: 64,
            buffer_capacity: 2_000,
            hidden: vec![16],
            updates_per_iteration: 4,
            align_batch: 32,
            eval_episodes: 5,
            ..Self::desk()
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::Config(format!("unknown profile '{other}' (expected desk, paper or tiny)"))),
        }
    }

    pub fn alignment_steps(&self) -> usize {
        let [x, y] = self.ratio;
        if y == 0 || matches!(self.alignment, AlignmentKind::None) {
            return 0;
        }
        (self.updates_per_iteration as f64 * y as f64 / x as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.iterations == 0 || self.sample_batch == 0 || self.update_batch == 0 {
            return bad("iterations, sample_batch and update_batch must be positive".into());
        }
        if self.buffer_capacity == 0 || self.eval_every == 0 || self.eval_episodes == 0 || self.return_window == 0 {
            return bad("buffer_capacity, eval_every, eval_episodes and return_window must be positive".into());
        }
        if self.hidden.contains(&0) || self.extractor_width == Some(0) {
            return bad("layer widths must be positive".into());
        }
        if self.ratio[0] == 0 {
            return bad(format!("ratio {}:{} needs a positive model-update share", self.ratio[0], self.ratio[1]));
        }
        if self.align_batch < 2 {
            return bad("align_batch must be at least 2".into());
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return bad(format!("gamma = {} must lie in [0, 1)", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad(format!("tau = {} must lie in [0, 1]", self.tau));
        }
        for (name, v) in [("lr", self.lr), ("align_lr", self.align_lr)] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} = {v} must be positive"));
            }
        }
        if !(self.q_weight_decay.is_finite() && self.q_weight_decay >= 0.0) {
            return bad("q_weight_decay must be >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.eps_start) || !(0.0..=1.0).contains(&self.eps_end) {
            return bad("epsilon bounds must lie in [0, 1]".into());
        }
        match &self.alignment {
            AlignmentKind::Mmd { bandwidths } => {
                KernelSpec::new(bandwidths.clone()).map_err(|e| Error::Config(e.to_string()))?;
            }
            AlignmentKind::Wasserstein {
                critic_steps,
                clip,
                critic_hidden,
            } => {
                if *critic_steps == 0 || *critic_hidden == 0 || !(clip.is_finite() && *clip > 0.0) {
                    return bad("critic_steps, critic_hidden and clip must be positive".into());
                }
            }
            AlignmentKind::None => {}
        }
        Ok(())
    }

    /// Linear decay from `eps_start` to `eps_end` over `eps_decay_iterations`.
    pub fn epsilon(&self, iteration: usize) -> f64 {
        if self.eps_decay_iterations == 0 || iteration >= self.eps_decay_iterations {
            return self.eps_end;
        }
        let frac = iteration as f64 / self.eps_decay_iterations as f64;
        self.eps_start + (self.eps_end - self.eps_start) * frac
    }
}

/// Index of the largest entry among valid actions; ties go to the lowest index.
pub fn masked_argmax(q: &[f64], valid: &[bool]) -> Result<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in q.iter().enumerate() {
        if valid.get(i).copied().unwrap_or(false) && best.is_none_or(|b| *v > q[b]) {
            best = Some(i);
        }
    }
    best.ok_or(Error::NoValidActions)
}

/// Double-DQN target: the online network picks the next action, the target
/// network scores it. Terminal steps (or no valid next action) use `r`.
pub fn double_dqn_target(
    reward: f64,
    gamma: f64,
    done: bool,
    q_online_next: &[f64],
    q_target_next: &[f64],
    next_valid: &[bool],
) -> f64 {
    if done {
        return reward;
    }
    match masked_argmax(q_online_next, next_valid) {
        Ok(a) => reward + gamma * q_target_next[a],
        Err(_) => reward,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub return0: f64,
    pub return1: f64,
    pub overall_return: f64,
    pub gap: f64,
    pub alignment_loss: f64,
    pub epsilon: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub rows: Vec<LogRow>,
}

impl RunLog {
    /// Mean of `f` over the last `frac` of the rows (at least one row).
    pub fn tail_mean(&self, frac: f64, f: impl Fn(&LogRow) -> f64) -> f64 {
        if self.rows.is_empty() {
            return f64::NAN;
        }
        let k = ((self.rows.len() as f64 * frac).ceil() as usize).clamp(1, self.rows.len());
        self.rows[self.rows.len() - k..].iter().map(f).sum::<f64>() / k as f64
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.rows {
            out.serialize(r).map_err(|e| Error::Io(e.to_string()))?;
        }
        out.flush().map_err(|e| Error::Io(e.to_string()))?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub return0: f64,
    pub return1: f64,
    pub overall_return: f64,
    pub gap: f64,
    /// Standard errors of the per-group mean returns.
    pub stderr: [f64; 2],
    /// Extractor outputs of visited states, when requested.
    pub features: [Vec<Vec<f64>>; 2],
}

// RNG stream ids; each purpose draws from its own stream so that e.g.
// enabling alignment never perturbs acting or replay sampling.
const STREAM_Q_INIT: u64 = 0;
const STREAM_EXTRACTOR_INIT: u64 = 1;
const STREAM_CRITIC_INIT: u64 = 2;
const STREAM_ACT: u64 = 3;
const STREAM_REPLAY: u64 = 4;
const STREAM_ALIGN: u64 = 5;
const STREAM_DIAGNOSTIC: u64 = 6;

const TAG_TRAIN_EPISODE: u64 = 0x7261_696e;
const TAG_EVAL_EPISODE: u64 = 0x6576_616c;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Counter-based episode seed for `(run seed, purpose, group, counter)`.
pub fn episode_seed(seed: u64, tag: u64, group: usize, counter: u64) -> u64 {
    splitmix(splitmix(splitmix(seed ^ tag) ^ group as u64) ^ counter)
}

fn flatten(rows: &[&[f64]]) -> Vec<f64> {
    rows.iter().flat_map(|r| r.iter().copied()).collect()
}

pub struct AlignTrainer {
    config: TrainConfig,
    seed: u64,
    feature_dim: usize,
    num_actions: usize,
    q: Mlp,
    q_target: Mlp,
    extractors: [Mlp; 2],
    critic: Option<Mlp>,
    kernel: KernelSpec,
    q_opt: Adam,
    extractor_opt: [Adam; 2],
    align_opt: [Adam; 2],
    critic_opt: Option<Adam>,
    buffers: [ReplayBuffer; 2],
    recent: [VecDeque<f64>; 2],
    act_rng: ChaCha8Rng,
    replay_rng: ChaCha8Rng,
    align_rng: ChaCha8Rng,
    diag_rng: ChaCha8Rng,
    iteration: usize,
}

impl AlignTrainer {
    pub fn new(config: TrainConfig, feature_dim: usize, num_actions: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if feature_dim == 0 || num_actions == 0 {
            return Err(Error::InvalidParameter("feature_dim and num_actions must be positive".into()));
        }
        let width = config.extractor_width.unwrap_or(feature_dim);
        let mut ext_rng = stream(seed, STREAM_EXTRACTOR_INIT);
        let ext_sizes = [feature_dim, width, width];
        let extractors = [Mlp::new(&ext_sizes, &mut ext_rng)?, Mlp::new(&ext_sizes, &mut ext_rng)?];
        let mut q_sizes = vec![width];
        q_sizes.extend(&config.hidden);
        q_sizes.push(num_actions);
        let q = Mlp::new(&q_sizes, &mut stream(seed, STREAM_Q_INIT))?;
        let (critic, critic_opt) = match &config.alignment {
            AlignmentKind::Wasserstein { critic_hidden, clip, .. } => {
                let mut c = Mlp::new(&[width, *critic_hidden, 1], &mut stream(seed, STREAM_CRITIC_INIT))?;
                c.clip_weights(*clip)?;
                let opt = Adam::new(
                    c.num_params(),
                    AdamConfig {
                        lr: config.align_lr,
                        ..AdamConfig::default()
                    },
                );
                (Some(c), Some(opt))
            }
            _ => (None, None),
        };
        let kernel = match &config.alignment {
            AlignmentKind::Mmd { bandwidths } => KernelSpec::new(bandwidths.clone())?,
            _ => KernelSpec::multiscale(),
        };
        let q_cfg = AdamConfig {
            lr: config.lr,
            weight_decay: config.q_weight_decay,
            ..AdamConfig::default()
        };
        let e_cfg = AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        };
        let a_cfg = AdamConfig {
            lr: config.align_lr,
            ..AdamConfig::default()
        };
        let np = extractors[0].num_params();
        Ok(Self {
            seed,
            feature_dim,
            num_actions,
            q_target: q.clone(),
            q_opt: Adam::new(q.num_params(), q_cfg),
            q,
            extractors,
            critic,
            kernel,
            extractor_opt: [Adam::new(np, e_cfg), Adam::new(np, e_cfg)],
            align_opt: [Adam::new(np, a_cfg), Adam::new(np, a_cfg)],
            critic_opt,
            buffers: [
                ReplayBuffer::new(config.buffer_capacity)?,
                ReplayBuffer::new(config.buffer_capacity)?,
            ],
            recent: [VecDeque::new(), VecDeque::new()],
            act_rng: stream(seed, STREAM_ACT),
            replay_rng: stream(seed, STREAM_REPLAY),
            align_rng: stream(seed, STREAM_ALIGN),
            diag_rng: stream(seed, STREAM_DIAGNOSTIC),
            iteration: 0,
            config,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn q(&self) -> &Mlp {
        &self.q
    }

    pub fn q_mut(&mut self) -> &mut Mlp {
        &mut self.q
    }

    pub fn q_target(&self) -> &Mlp {
        &self.q_target
    }

    pub fn q_target_mut(&mut self) -> &mut Mlp {
        &mut self.q_target
    }

    pub fn extractor(&self, group: usize) -> &Mlp {
        &self.extractors[group]
    }

    pub fn extractor_mut(&mut self, group: usize) -> &mut Mlp {
        &mut self.extractors[group]
    }

    /// Replaces both extractors (and resets their optimizer state). Inputs
    /// must match the state dimension and outputs the Q-network input.
    pub fn set_extractors(&mut self, extractors: [Mlp; 2]) -> Result<()> {
        for e in &extractors {
            if e.input_dim() != self.feature_dim || e.output_dim() != self.q.input_dim() {
                return Err(Error::DimensionMismatch(format!(
                    "extractor {:?} does not map {} -> {}",
                    e.sizes(),
                    self.feature_dim,
                    self.q.input_dim()
                )));
            }
        }
        let np = [extractors[0].num_params(), extractors[1].num_params()];
        let e_cfg = self.extractor_opt[0].config;
        let a_cfg = self.align_opt[0].config;
        self.extractor_opt = np.map(|n| Adam::new(n, e_cfg));
        self.align_opt = np.map(|n| Adam::new(n, a_cfg));
        self.extractors = extractors;
        Ok(())
    }

    pub fn critic(&self) -> Option<&Mlp> {
        self.critic.as_ref()
    }

    pub fn critic_mut(&mut self) -> Option<&mut Mlp> {
        self.critic.as_mut()
    }

    pub fn buffer(&self, group: usize) -> &ReplayBuffer {
        &self.buffers[group]
    }

    pub fn buffer_mut(&mut self, group: usize) -> &mut ReplayBuffer {
        &mut self.buffers[group]
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Mean of the most recent completed training-episode returns (0 if none).
    pub fn recent_return(&self, group: usize) -> f64 {
        let r = &self.recent[group];
        if r.is_empty() {
            0.0
        } else {
            r.iter().sum::<f64>() / r.len() as f64
        }
    }

    pub fn record_episode_return(&mut self, group: usize, ret: f64) {
        let r = &mut self.recent[group];
        r.push_back(ret);
        while r.len() > self.config.return_window {
            r.pop_front();
        }
    }

    /// Group whose extractor an alignment step moves: the higher recent
    /// return (group 0 on ties).
    pub fn leader(&self) -> usize {
        if self.recent_return(1) > self.recent_return(0) {
            1
        } else {
            0
        }
    }

    fn check_features(&self, x: &[f64], rows: usize) -> Result<()> {
        if x.len() != rows * self.feature_dim {
            return Err(Error::DimensionMismatch(format!(
                "{} feature values for {rows} states of dimension {}",
                x.len(),
                self.feature_dim
            )));
        }
        Ok(())
    }

    /// Q-values of a batch of raw states seen through a group's extractor.
    pub fn q_values(&self, group: usize, features: &[f64], rows: usize) -> Result<Vec<f64>> {
        self.check_features(features, rows)?;
        let h = self.extractors[group].predict(features, rows)?;
        self.q.predict(&h, rows)
    }

    pub fn greedy_action(&self, group: usize, features: &[f64], valid: &[bool]) -> Result<usize> {
        masked_argmax(&self.q_values(group, features, 1)?, valid)
    }

    pub fn act_epsilon_greedy<R: Rng + ?Sized>(
        &self,
        features: &[f64],
        valid: &[bool],
        group: usize,
        iteration: usize,
        rng: &mut R,
    ) -> Result<usize> {
        let eps = self.config.epsilon(iteration);
        if rng.random::<f64>() < eps {
            let choices: Vec<usize> = (0..self.num_actions).filter(|a| valid.get(*a).copied().unwrap_or(false)).collect();
            if choices.is_empty() {
                return Err(Error::NoValidActions);
            }
            return Ok(choices[rng.random_range(0..choices.len())]);
        }
        self.greedy_action(group, features, valid)
    }

    /// One double-DQN step on both groups' batches, then a soft target update.
    /// Returns the mean squared TD error before the step.
    pub fn td_update(&mut self, batch0: &[&Transition], batch1: &[&Transition]) -> Result<f64> {
        let total = batch0.len() + batch1.len();
        if total == 0 {
            return Err(Error::EmptyBatch);
        }
        let gamma = self.config.gamma;
        let mut q_grad = vec![0.0; self.q.num_params()];
        let mut ext_grads: [Option<Vec<f64>>; 2] = [None, None];
        let mut loss = 0.0;
        for (g, batch) in [batch0, batch1].into_iter().enumerate() {
            if batch.is_empty() {
                continue;
            }
            let n = batch.len();
            let s: Vec<&[f64]> = batch.iter().map(|t| t.features.as_slice()).collect();
            let s_next: Vec<&[f64]> = batch.iter().map(|t| t.next_features.as_slice()).collect();
            let (s, s_next) = (flatten(&s), flatten(&s_next));
            self.check_features(&s, n)?;
            self.check_features(&s_next, n)?;
            let h_next = self.extractors[g].predict(&s_next, n)?;
            let q_online_next = self.q.predict(&h_next, n)?;
            let q_target_next = self.q_target.predict(&h_next, n)?;
            let (h, mut ext_tape) = self.extractors[g].forward(&s, n)?;
            let (qv, mut q_tape) = self.q.forward(&h, n)?;
            let k = self.num_actions;
            let mut dq = vec![0.0; n * k];
            for (i, t) in batch.iter().enumerate() {
                if t.action >= k {
                    return Err(Error::IndexOutOfRange { index: t.action, len: k });
                }
                let y = double_dqn_target(
                    t.reward,
                    gamma,
                    t.done,
                    &q_online_next[i * k..(i + 1) * k],
                    &q_target_next[i * k..(i + 1) * k],
                    &t.next_valid,
                );
                let err = qv[i * k + t.action] - y;
                loss += err * err;
                dq[i * k + t.action] = 2.0 * err / total as f64;
            }
            let (gq, dh) = self.q.backward(&mut q_tape, &dq)?;
            q_grad.iter_mut().zip(&gq).for_each(|(a, b)| *a += b);
            let (ge, _) = self.extractors[g].backward(&mut ext_tape, &dh)?;
            ext_grads[g] = Some(ge);
        }
        self.q_opt.step(self.q.params_mut(), &q_grad)?;
        for (g, grad) in ext_grads.iter().enumerate() {
            if let Some(grad) = grad {
                self.extractor_opt[g].step(self.extractors[g].params_mut(), grad)?;
            }
        }
        soft_update(self.q_target.params_mut(), self.q.params(), self.config.tau)?;
        Ok(loss / total as f64)
    }

    /// One alignment step with the leader chosen by recent returns.
    pub fn alignment_update(&mut self, states0: &[Vec<f64>], states1: &[Vec<f64>]) -> Result<f64> {
        let leader = self.leader();
        self.alignment_update_for(leader, states0, states1)
    }

    /// One alignment step that moves only `leader`'s extractor. Returns the
    /// alignment loss measured before the step.
    pub fn alignment_update_for(&mut self, leader: usize, states0: &[Vec<f64>], states1: &[Vec<f64>]) -> Result<f64> {
        if leader > 1 {
            return Err(Error::IndexOutOfRange { index: leader, len: 2 });
        }
        let min = if self.critic.is_some() { 1 } else { 2 };
        for s in [states0, states1] {
            if s.len() < min {
                return Err(Error::BatchTooSmall { need: min, got: s.len() });
            }
        }
        let rows: [&[Vec<f64>]; 2] = [states0, states1];
        let mut flat = Vec::with_capacity(2);
        for r in rows {
            let x: Vec<f64> = r.iter().flat_map(|v| v.iter().copied()).collect();
            self.check_features(&x, r.len())?;
            flat.push(x);
        }
        let width = self.extractors[0].output_dim();
        let (h_lead, mut tape) = self.extractors[leader].forward(&flat[leader], rows[leader].len())?;
        let h_other = self.extractors[1 - leader].predict(&flat[1 - leader], rows[1 - leader].len())?;
        let (h0, h1) = if leader == 0 { (&h_lead, &h_other) } else { (&h_other, &h_lead) };

        let (loss, dh) = match &self.config.alignment {
            AlignmentKind::Wasserstein { critic_steps, clip, .. } => {
                let (steps, clip) = (*critic_steps, *clip);
                let critic = self.critic.as_mut().expect("critic exists for the Wasserstein kind");
                let opt = self.critic_opt.as_mut().expect("critic optimizer exists");
                let (n0, n1) = (states0.len(), states1.len());
                for _ in 0..steps {
                    // ascend L = mean f(h0) - mean f(h1), i.e. descend on -L
                    let (_, mut t0) = critic.forward(h0, n0)?;
                    let (_, mut t1) = critic.forward(h1, n1)?;
                    let (g0, _) = critic.backward(&mut t0, &vec![-1.0 / n0 as f64; n0])?;
                    let (g1, _) = critic.backward(&mut t1, &vec![1.0 / n1 as f64; n1])?;
                    let g: Vec<f64> = g0.iter().zip(&g1).map(|(a, b)| a + b).collect();
                    opt.step(critic.params_mut(), &g)?;
                    critic.clip_weights(clip)?;
                }
                let (f_lead, mut t_lead) = critic.forward(&h_lead, rows[leader].len())?;
                let f_other = critic.predict(&h_other, rows[1 - leader].len())?;
                let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
                let (m0, m1) = if leader == 0 {
                    (mean(&f_lead), mean(&f_other))
                } else {
                    (mean(&f_other), mean(&f_lead))
                };
                let n = rows[leader].len();
                let sign = if leader == 0 { 1.0 } else { -1.0 };
                let (_, dh) = critic.backward(&mut t_lead, &vec![sign / n as f64; n])?;
                (m0 - m1, dh)
            }
            _ => {
                let b0 = SampleBatch::new(width, h0.clone())?;
                let b1 = SampleBatch::new(width, h1.clone())?;
                let (value, g0, g1) = mmd2_unbiased_with_grad(&b0, &b1, &self.kernel)?;
                (value, if leader == 0 { g0 } else { g1 })
            }
        };
        let (grad, _) = self.extractors[leader].backward(&mut tape, &dh)?;
        self.align_opt[leader].step(self.extractors[leader].params_mut(), &grad)?;
        Ok(loss)
    }

    /// MMD between the groups' extractor outputs on replay states, drawn
    /// from a dedicated RNG stream so it never perturbs training.
    pub fn diagnostic_mmd(&mut self) -> Result<f64> {
        if self.buffers.iter().any(|b| b.len() < 2) {
            return Ok(f64::NAN);
        }
        let k = self.config.align_batch;
        let mut hs = Vec::with_capacity(2);
        for g in 0..2 {
            let batch = self.buffers[g].sample(k, &mut self.diag_rng);
            let n = batch.len();
            let x = flatten(&batch.iter().map(|t| t.features.as_slice()).collect::<Vec<_>>());
            let h = self.extractors[g].predict(&x, n)?;
            hs.push(SampleBatch::new(self.extractors[g].output_dim(), h)?);
        }
        mmd2_unbiased(&hs[0], &hs[1], &self.kernel)
    }

    fn sample_update_batches(&mut self) -> [Vec<usize>; 2] {
        let (l0, l1) = (self.buffers[0].len(), self.buffers[1].len());
        let total = (l0 + l1).max(1);
        let want = self.config.update_batch;
        let mut k1 = ((want as f64 * l1 as f64 / total as f64).round() as usize).min(l1);
        if l1 > 0 {
            k1 = k1.max(1);
        }
        let k0 = want.saturating_sub(k1).min(l0);
        let draw = |len: usize, k: usize, rng: &mut ChaCha8Rng| -> Vec<usize> {
            if k == 0 {
                Vec::new()
            } else {
                index::sample(rng, len, k).into_vec()
            }
        };
        let i0 = draw(l0, k0, &mut self.replay_rng);
        let i1 = draw(l1, k1, &mut self.replay_rng);
        [i0, i1]
    }

    fn alignment_states(&mut self) -> [Vec<Vec<f64>>; 2] {
        let k = self.config.align_batch;
        let mut out: [Vec<Vec<f64>>; 2] = [Vec::new(), Vec::new()];
        for (g, slot) in out.iter_mut().enumerate() {
            *slot = self.buffers[g]
                .sample(k, &mut self.align_rng)
                .into_iter()
                .map(|t| t.features.clone())
                .collect();
        }
        out
    }

    /// Greedy rollouts of `episodes` per group, run in lockstep so each
    /// decision is one batched forward pass.
    pub fn evaluate(&self, env: &dyn EnvPair, episodes: usize, seed: u64, collect_features: bool) -> Result<Evaluation> {
        if env.feature_dim() != self.feature_dim || env.num_actions() != self.num_actions {
            return Err(Error::DimensionMismatch("environment does not match the trainer".into()));
        }
        let mut means = [0.0; 2];
        let mut stderr = [0.0; 2];
        let mut features: [Vec<Vec<f64>>; 2] = [Vec::new(), Vec::new()];
        for g in 0..2 {
            let mut eps: Vec<Box<dyn Episode + '_>> = (0..episodes)
                .map(|k| env.reset(g, episode_seed(seed, TAG_EVAL_EPISODE, g, k as u64)))
                .collect::<Result<_>>()?;
            let mut returns = vec![0.0; episodes];
            let mut t = 0;
            loop {
                let live: Vec<usize> = (0..episodes).filter(|i| !eps[*i].is_done()).collect();
                if live.is_empty() {
                    break;
                }
                let x = flatten(&live.iter().map(|i| eps[*i].features()).collect::<Vec<_>>());
                let h = self.extractors[g].predict(&x, live.len())?;
                let qv = self.q.predict(&h, live.len())?;
                if collect_features {
                    let w = self.extractors[g].output_dim();
                    features[g].extend(h.chunks(w).map(|c| c.to_vec()));
                }
                let k = self.num_actions;
                let discount = if self.config.discounted_returns {
                    self.config.gamma.powi(t)
                } else {
                    1.0
                };
                for (j, &i) in live.iter().enumerate() {
                    let a = masked_argmax(&qv[j * k..(j + 1) * k], eps[i].valid_actions())?;
                    returns[i] += discount * eps[i].step(a)?.reward;
                }
                t += 1;
            }
            let n = episodes as f64;
            let mean = returns.iter().sum::<f64>() / n;
            let var = if episodes > 1 {
                returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            means[g] = mean;
            stderr[g] = (var / n).sqrt();
        }
        let lambda = env.lambda();
        Ok(Evaluation {
            return0: means[0],
            return1: means[1],
            overall_return: lambda * means[0] + (1.0 - lambda) * means[1],
            gap: (means[0] - means[1]).abs(),
            stderr,
            features,
        })
    }

    /// Runs the configured number of iterations and returns the metric log.
    pub fn train(&mut self, env: &dyn EnvPair) -> Result<RunLog> {
        if env.feature_dim() != self.feature_dim || env.num_actions() != self.num_actions {
            return Err(Error::DimensionMismatch("environment does not match the trainer".into()));
        }
        let mut log = RunLog::default();
        let mut live: [Option<(Box<dyn Episode + '_>, f64, i32)>; 2] = [None, None];
        let mut counters = [0u64; 2];
        let steps_per_group = [0, 1].map(|g| {
            let rate = env.sampling_rate(g).clamp(0.0, 1.0);
            ((self.config.sample_batch as f64 * rate).ceil() as usize).max(1)
        });
        let align_steps = self.config.alignment_steps();
        let seed = self.seed;
        for _ in 0..self.config.iterations {
            let it = self.iteration;
            for g in 0..2 {
                for _ in 0..steps_per_group[g] {
                    if live[g].is_none() {
                        let s = episode_seed(seed, TAG_TRAIN_EPISODE, g, counters[g]);
                        counters[g] += 1;
                        live[g] = Some((env.reset(g, s)?, 0.0, 0));
                    }
                    let (ep, ret, t) = live[g].as_mut().expect("episode just started");
                    let a = {
                        let mut rng = std::mem::replace(&mut self.act_rng, ChaCha8Rng::seed_from_u64(0));
                        let out = self.act_epsilon_greedy(ep.features(), ep.valid_actions(), g, it, &mut rng);
                        self.act_rng = rng;
                        out?
                    };
                    let step = ep.step(a)?;
                    let discount = if self.config.discounted_returns {
                        self.config.gamma.powi(*t)
                    } else {
                        1.0
                    };
                    *ret += discount * step.reward;
                    *t += 1;
                    let done = step.done;
                    self.buffers[g].push(step.into());
                    if done {
                        let r = *ret;
                        live[g] = None;
                        self.record_episode_return(g, r);
                    }
                }
            }
            for _ in 0..self.config.updates_per_iteration {
                let [i0, i1] = self.sample_update_batches();
                let b0: Vec<Transition> = i0.iter().map(|i| self.buffers[0].get(*i).clone()).collect();
                let b1: Vec<Transition> = i1.iter().map(|i| self.buffers[1].get(*i).clone()).collect();
                let r0: Vec<&Transition> = b0.iter().collect();
                let r1: Vec<&Transition> = b1.iter().collect();
                self.td_update(&r0, &r1)?;
            }
            if self.buffers.iter().all(|b| b.len() >= 2) {
                for _ in 0..align_steps {
                    let [s0, s1] = self.alignment_states();
                    self.alignment_update(&s0, &s1)?;
                }
            }
            self.iteration += 1;
            if self.iteration.is_multiple_of(self.config.eval_every) || self.iteration == self.config.iterations {
                let ev = self.evaluate(env, self.config.eval_episodes, seed, false)?;
                let alignment_loss = self.diagnostic_mmd()?;
                log.rows.push(LogRow {
                    iteration: self.iteration,
                    return0: ev.return0,
                    return1: ev.return1,
                    overall_return: ev.overall_return,
                    gap: ev.gap,
                    alignment_loss,
                    epsilon: self.config.epsilon(it),
                    seed,
                });
            }
        }
        Ok(log)
    }
}

/// Trains one fresh trainer per seed, in parallel.
pub fn train_seeds(env: &dyn EnvPair, config: &TrainConfig, seeds: &[u64]) -> Result<Vec<RunLog>> {
    seeds
        .par_iter()
        .map(|&seed| {
            let mut tr = AlignTrainer::new(config.clone(), env.feature_dim(), env.num_actions(), seed)?;
            tr.train(env)
        })
        .collect()
}
