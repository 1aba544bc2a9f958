//! Two-group episodic environments.
//!
//! [`TabularEnvPair`] wraps a [`GroupPair`] with one-hot state features so
//! learned behaviour can be checked against the exact solvers.
//! [`RecSimPair`] is a synthetic recommender with a user-preference feedback
//! loop and a no-repeat constraint.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{GroupPair, Policy};

#[derive(Debug, Clone, PartialEq)]
pub struct EnvStep {
    pub state_features: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub next_state_features: Vec<f64>,
    pub done: bool,
    /// Actions still available in the next state.
    pub next_valid: Vec<bool>,
}

/// One running episode of one group.
pub trait Episode {
    fn features(&self) -> &[f64];
    fn valid_actions(&self) -> &[bool];
    fn step(&mut self, action: usize) -> Result<EnvStep>;
    fn is_done(&self) -> bool;
}

pub trait EnvPair: Send + Sync {
    fn feature_dim(&self) -> usize;
    fn num_actions(&self) -> usize;
    /// Agent decisions per episode.
    fn horizon(&self) -> usize;
    /// Population share of group 0.
    fn lambda(&self) -> f64;
    /// Relative sampling rate of each group (1.0 = full rate).
    fn sampling_rate(&self, group: usize) -> f64 {
        let _ = group;
        1.0
    }
    fn reset(&self, group: usize, seed: u64) -> Result<Box<dyn Episode + '_>>;
}

fn check_group(group: usize) -> Result<()> {
    if group > 1 {
        return Err(Error::IndexOutOfRange { index: group, len: 2 });
    }
    Ok(())
}

pub(crate) fn sample_categorical<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, v) in p.iter().enumerate() {
        acc += v;
        if u < acc {
            return i;
        }
    }
    // rounding slack: last index with positive mass
    p.iter().rposition(|v| *v > 0.0).unwrap_or(p.len() - 1)
}

#[derive(Debug, Clone)]
pub struct TabularEnvPair {
    pair: GroupPair,
    horizon: usize,
}

impl TabularEnvPair {
    pub fn new(pair: GroupPair, horizon: usize) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::InvalidParameter("horizon must be positive".into()));
        }
        Ok(Self { pair, horizon })
    }

    pub fn pair(&self) -> &GroupPair {
        &self.pair
    }

    pub fn one_hot(&self, s: usize) -> Vec<f64> {
        let mut f = vec![0.0; self.pair.num_states()];
        f[s] = 1.0;
        f
    }

    pub fn sample_initial<R: Rng + ?Sized>(&self, group: usize, rng: &mut R) -> usize {
        sample_categorical(self.pair.group(group).mu(), rng)
    }

    pub fn sample_next<R: Rng + ?Sized>(&self, group: usize, s: usize, a: usize, rng: &mut R) -> usize {
        sample_categorical(self.pair.group(group).transition_row(s, a), rng)
    }

    /// Estimates the discounted state visitation by restarts: each sample
    /// starts from the initial distribution and continues with probability
    /// gamma per step; the state where it stops is recorded.
    pub fn empirical_visitation(&self, pi: &Policy, group: usize, num_samples: usize, seed: u64) -> Result<Vec<f64>> {
        check_group(group)?;
        let mdp = self.pair.group(group);
        if pi.num_states() != mdp.num_states() || pi.num_actions() != mdp.num_actions() {
            return Err(Error::DimensionMismatch("policy shape differs from the MDP".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut counts = vec![0usize; mdp.num_states()];
        for _ in 0..num_samples {
            let mut s = self.sample_initial(group, &mut rng);
            while rng.random::<f64>() < mdp.gamma() {
                let a = sample_categorical(pi.row(s), &mut rng);
                s = self.sample_next(group, s, a, &mut rng);
            }
            counts[s] += 1;
        }
        Ok(counts.iter().map(|c| *c as f64 / num_samples.max(1) as f64).collect())
    }
}

pub struct TabularEpisode<'a> {
    env: &'a TabularEnvPair,
    group: usize,
    state: usize,
    t: usize,
    features: Vec<f64>,
    valid: Vec<bool>,
    rng: ChaCha8Rng,
}

impl TabularEpisode<'_> {
    pub fn state(&self) -> usize {
        self.state
    }
}

impl Episode for TabularEpisode<'_> {
    fn features(&self) -> &[f64] {
        &self.features
    }

    fn valid_actions(&self) -> &[bool] {
        &self.valid
    }

    fn is_done(&self) -> bool {
        self.t >= self.env.horizon
    }

    fn step(&mut self, action: usize) -> Result<EnvStep> {
        if self.is_done() {
            return Err(Error::EpisodeFinished);
        }
        let mdp = self.env.pair.group(self.group);
        if action >= mdp.num_actions() {
            return Err(Error::IndexOutOfRange {
                index: action,
                len: mdp.num_actions(),
            });
        }
        let reward = mdp.reward(self.state, action);
        let next = self.env.sample_next(self.group, self.state, action, &mut self.rng);
        let before = std::mem::replace(&mut self.features, self.env.one_hot(next));
        self.state = next;
        self.t += 1;
        Ok(EnvStep {
            state_features: before,
            action,
            reward,
            next_state_features: self.features.clone(),
            done: self.is_done(),
            next_valid: self.valid.clone(),
        })
    }
}

impl TabularEnvPair {
    pub fn reset_tabular(&self, group: usize, seed: u64) -> Result<TabularEpisode<'_>> {
        check_group(group)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let state = self.sample_initial(group, &mut rng);
        Ok(TabularEpisode {
            env: self,
            group,
            state,
            t: 0,
            features: self.one_hot(state),
            valid: vec![true; self.pair.num_actions()],
            rng,
        })
    }
}

impl EnvPair for TabularEnvPair {
    fn feature_dim(&self) -> usize {
        self.pair.num_states()
    }

    fn num_actions(&self) -> usize {
        self.pair.num_actions()
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn lambda(&self) -> f64 {
        self.pair.lambda
    }

    fn reset(&self, group: usize, seed: u64) -> Result<Box<dyn Episode + '_>> {
        Ok(Box::new(self.reset_tabular(group, seed)?))
    }
}

/// Synthetic recommender parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecSimConfig {
    pub num_items: usize,
    pub embed_dim: usize,
    /// Norms of the two groups' mean user latents. Directions are drawn
    /// from `item_seed` and made orthogonal.
    pub group_mean_norms: [f64; 2],
    /// Cosine of the angle between the two generated mean directions.
    pub group_mean_cosine: f64,
    /// Explicit group means; overrides `group_mean_norms` when present.
    pub group_means: Option<[Vec<f64>; 2]>,
    /// Per-coordinate standard deviation of user latents around the mean.
    pub latent_std: f64,
    pub reward_noise: f64,
    /// Preference drift rate: `u += drift * reward * item`.
    pub drift: f64,
    /// Rewards above `+threshold` count as positive, below `-threshold` as negative.
    pub reward_threshold: f64,
    /// Decay of the running average of recommended item embeddings.
    pub history_decay: f64,
    /// Episode length including the cold-start step.
    pub horizon: usize,
    /// Group 1 is sampled this many times less often than group 0.
    pub skew: f64,
    pub item_seed: u64,
}

impl Default for RecSimConfig {
    fn default() -> Self {
        Self {
            num_items: 100,
            embed_dim: 8,
            group_mean_norms: [0.9, 0.6],
            group_mean_cosine: 0.9,
            group_means: None,
            latent_std: 0.15,
            reward_noise: 0.1,
            drift: 0.05,
            reward_threshold: 0.1,
            history_decay: 0.7,
            horizon: 32,
            skew: 10.0,
            item_seed: 2021,
        }
    }
}

impl RecSimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.num_items < 2 {
            return bad(format!("num_items = {} (need >= 2)", self.num_items));
        }
        if self.embed_dim == 0 {
            return bad("embed_dim must be positive".into());
        }
        if self.horizon < 2 || self.horizon > self.num_items {
            return bad(format!(
                "horizon = {} must lie in [2, num_items = {}] because items never repeat",
                self.horizon, self.num_items
            ));
        }
        for (name, v) in [
            ("latent_std", self.latent_std),
            ("reward_noise", self.reward_noise),
            ("drift", self.drift),
            ("reward_threshold", self.reward_threshold),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} = {v} must be finite and >= 0"));
            }
        }
        if !(0.0..1.0).contains(&self.history_decay) {
            return bad(format!("history_decay = {} must lie in [0, 1)", self.history_decay));
        }
        if !(self.skew.is_finite() && self.skew >= 1.0) {
            return bad(format!("skew = {} must be >= 1", self.skew));
        }
        if let Some(means) = &self.group_means {
            if means.iter().any(|m| m.len() != self.embed_dim || m.iter().any(|v| !v.is_finite())) {
                return bad("group_means must be finite vectors of length embed_dim".into());
            }
        }
        if !(-1.0..=1.0).contains(&self.group_mean_cosine) {
            return bad(format!("group_mean_cosine = {} must lie in [-1, 1]", self.group_mean_cosine));
        }
        if self.group_mean_norms.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return bad("group_mean_norms must be finite and >= 0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RecSimPair {
    config: RecSimConfig,
    /// Unit-norm item embeddings, `num_items x embed_dim`.
    items: Vec<Vec<f64>>,
    means: [Vec<f64>; 2],
    popular: usize,
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl RecSimPair {
    pub fn new(config: RecSimConfig) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(config.item_seed);
        let items: Vec<Vec<f64>> = (0..config.num_items)
            .map(|_| {
                let mut e: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
                normalize(&mut e);
                e
            })
            .collect();
        let means = match &config.group_means {
            Some(m) => m.clone(),
            None => {
                let mut a: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
                let mut b: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
                normalize(&mut a);
                if d > 1 {
                    let proj = dot(&a, &b);
                    b.iter_mut().zip(&a).for_each(|(x, y)| *x -= proj * y);
                }
                normalize(&mut b);
                let cos = config.group_mean_cosine;
                let sin = (1.0 - cos * cos).max(0.0).sqrt();
                let b: Vec<f64> = a.iter().zip(&b).map(|(x, y)| cos * x + sin * y).collect();
                let [n0, n1] = config.group_mean_norms;
                [a.iter().map(|v| v * n0).collect(), b.iter().map(|v| v * n1).collect()]
            }
        };
        let lambda = Self::lambda_for(config.skew);
        let pooled: Vec<f64> = (0..d)
            .map(|k| lambda * means[0][k] + (1.0 - lambda) * means[1][k])
            .collect();
        let popular = (0..items.len())
            .max_by(|&i, &j| dot(&items[i], &pooled).total_cmp(&dot(&items[j], &pooled)))
            .expect("at least two items");
        Ok(Self {
            config,
            items,
            means,
            popular,
        })
    }

    /// Group-0 share implied by the sampling skew.
    fn lambda_for(skew: f64) -> f64 {
        skew / (skew + 1.0)
    }

    pub fn config(&self) -> &RecSimConfig {
        &self.config
    }

    pub fn item(&self, i: usize) -> &[f64] {
        &self.items[i]
    }

    pub fn group_mean(&self, group: usize) -> &[f64] {
        &self.means[group]
    }

    /// The item shown to every user at the cold-start step.
    pub fn popular_item(&self) -> usize {
        self.popular
    }

    /// Item with the largest mean affinity for a group's average user.
    pub fn best_item(&self, group: usize) -> usize {
        (0..self.items.len())
            .max_by(|&i, &j| dot(&self.items[i], &self.means[group]).total_cmp(&dot(&self.items[j], &self.means[group])))
            .expect("at least two items")
    }

    pub fn reset_recsim(&self, group: usize, seed: u64) -> Result<RecSimEpisode<'_>> {
        check_group(group)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = self.config.embed_dim;
        let latent: Vec<f64> = (0..d)
            .map(|k| {
                let z: f64 = StandardNormal.sample(&mut rng);
                self.means[group][k] + self.config.latent_std * z
            })
            .collect();
        let mut ep = RecSimEpisode {
            env: self,
            latent,
            rng,
            t: 0,
            history: vec![0.0; d],
            positives: 0,
            negatives: 0,
            last_reward: 0.0,
            valid: vec![true; self.items.len()],
            features: Vec::new(),
        };
        // cold start: the popular item is shown before the agent acts
        ep.apply(self.popular);
        Ok(ep)
    }
}

pub struct RecSimEpisode<'a> {
    env: &'a RecSimPair,
    latent: Vec<f64>,
    rng: ChaCha8Rng,
    /// Items shown so far, including the cold-start item.
    t: usize,
    history: Vec<f64>,
    positives: usize,
    negatives: usize,
    last_reward: f64,
    valid: Vec<bool>,
    features: Vec<f64>,
}

impl RecSimEpisode<'_> {
    pub fn user_latent(&self) -> &[f64] {
        &self.latent
    }

    fn apply(&mut self, item: usize) -> f64 {
        let c = &self.env.config;
        let e = &self.env.items[item];
        let noise: f64 = StandardNormal.sample(&mut self.rng);
        let reward = (dot(&self.latent, e) + c.reward_noise * noise).clamp(-1.0, 1.0);
        for (u, x) in self.latent.iter_mut().zip(e) {
            *u += c.drift * reward * x;
        }
        for (h, x) in self.history.iter_mut().zip(e) {
            *h = c.history_decay * *h + (1.0 - c.history_decay) * x;
        }
        if reward > c.reward_threshold {
            self.positives += 1;
        } else if reward < -c.reward_threshold {
            self.negatives += 1;
        }
        self.last_reward = reward;
        self.valid[item] = false;
        self.t += 1;
        self.refresh_features();
        reward
    }

    fn refresh_features(&mut self) {
        let h = self.env.config.horizon as f64;
        self.features.clear();
        self.features.extend_from_slice(&self.history);
        self.features.extend_from_slice(&[
            self.positives as f64 / h,
            self.negatives as f64 / h,
            self.last_reward,
            self.t as f64 / h,
        ]);
    }
}

impl Episode for RecSimEpisode<'_> {
    fn features(&self) -> &[f64] {
        &self.features
    }

    fn valid_actions(&self) -> &[bool] {
        &self.valid
    }

    fn is_done(&self) -> bool {
        self.t >= self.env.config.horizon
    }

    fn step(&mut self, action: usize) -> Result<EnvStep> {
        if self.is_done() {
            return Err(Error::EpisodeFinished);
        }
        if action >= self.valid.len() {
            return Err(Error::IndexOutOfRange {
                index: action,
                len: self.valid.len(),
            });
        }
        if !self.valid[action] {
            return Err(Error::RepeatedItem(action));
        }
        let before = self.features.clone();
        let reward = self.apply(action);
        Ok(EnvStep {
            state_features: before,
            action,
            reward,
            next_state_features: self.features.clone(),
            done: self.is_done(),
            next_valid: self.valid.clone(),
        })
    }
}

impl EnvPair for RecSimPair {
    fn feature_dim(&self) -> usize {
        self.config.embed_dim + 4
    }

    fn num_actions(&self) -> usize {
        self.config.num_items
    }

    fn horizon(&self) -> usize {
        self.config.horizon - 1
    }

    fn lambda(&self) -> f64 {
        Self::lambda_for(self.config.skew)
    }

    fn sampling_rate(&self, group: usize) -> f64 {
        if group == 1 {
            1.0 / self.config.skew
        } else {
            1.0
        }
    }

    fn reset(&self, group: usize, seed: u64) -> Result<Box<dyn Episode + '_>> {
        Ok(Box::new(self.reset_recsim(group, seed)?))
    }
}
