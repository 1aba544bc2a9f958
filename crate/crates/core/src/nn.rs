//! Small dense networks with hand-written reverse-mode gradients.
//!
//! Parameters live in one flat vector. For each layer `l` mapping `in -> out`
//! the block is the weight matrix (`out x in`, row-major) followed by the
//! `out` biases. Hidden layers use a rectifier; the output layer is linear.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

/// Intermediates of one batched forward pass; good for a single backward.
#[derive(Debug, Clone)]
pub struct Tape {
    batch: usize,
    /// `inputs[l]` is the batch fed into layer `l` (`batch x sizes[l]`).
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of each layer (`batch x sizes[l + 1]`).
    pre: Vec<Vec<f64>>,
    used: bool,
}

impl Tape {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn is_used(&self) -> bool {
        self.used
    }
}

impl Mlp {
    /// Uniform fan-in initialization `U(-1/sqrt(in), 1/sqrt(in))`.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(sizes)?;
        let mut off = 0;
        for w in sizes.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            for p in &mut net.params[off..off + w[0] * w[1] + w[1]] {
                *p = rng.random_range(-bound..bound);
            }
            off += w[0] * w[1] + w[1];
        }
        Ok(net)
    }

    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::InvalidParameter(format!("bad layer sizes {sizes:?}")));
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            params: vec![0.0; param_count(sizes)],
        })
    }

    pub fn from_params(sizes: &[usize], params: Vec<f64>) -> Result<Self> {
        let mut net = Self::zeros(sizes)?;
        if params.len() != net.params.len() {
            return Err(Error::ShapeMismatch {
                expected: net.params.len(),
                got: params.len(),
            });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("network parameters".into()));
        }
        net.params = params;
        Ok(net)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("at least two layers")
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn check_input(&self, x: &[f64], batch: usize) -> Result<()> {
        if x.len() != batch * self.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "input of length {} for batch {batch} x {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Runs `batch` rows through the network; returns outputs and no tape.
    pub fn predict(&self, x: &[f64], batch: usize) -> Result<Vec<f64>> {
        self.check_input(x, batch)?;
        let mut cur = x.to_vec();
        let last = self.sizes.len() - 2;
        let mut off = 0;
        for (l, w) in self.sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            cur = affine(&self.params[off..], &cur, batch, fan_in, fan_out);
            if l < last {
                cur.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            off += fan_in * fan_out + fan_out;
        }
        Ok(cur)
    }

    /// Forward pass recording what the backward pass needs.
    pub fn forward(&self, x: &[f64], batch: usize) -> Result<(Vec<f64>, Tape)> {
        self.check_input(x, batch)?;
        let layers = self.sizes.len() - 1;
        let mut inputs = Vec::with_capacity(layers);
        let mut pre = Vec::with_capacity(layers);
        let mut cur = x.to_vec();
        let mut off = 0;
        for (l, w) in self.sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let z = affine(&self.params[off..], &cur, batch, fan_in, fan_out);
            inputs.push(cur);
            cur = if l + 1 < layers {
                z.iter().map(|v| v.max(0.0)).collect()
            } else {
                z.clone()
            };
            pre.push(z);
            off += fan_in * fan_out + fan_out;
        }
        Ok((
            cur,
            Tape {
                batch,
                inputs,
                pre,
                used: false,
            },
        ))
    }

    /// Reverse pass for upstream gradient `dy` (`batch x output_dim`).
    /// Returns `(param_grads, input_grads)`; parameter gradients are summed
    /// over the batch.
    pub fn backward(&self, tape: &mut Tape, dy: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if tape.used {
            return Err(Error::TapeReused);
        }
        let batch = tape.batch;
        if dy.len() != batch * self.output_dim() {
            return Err(Error::ShapeMismatch {
                expected: batch * self.output_dim(),
                got: dy.len(),
            });
        }
        tape.used = true;
        let layers = self.sizes.len() - 1;
        let mut grads = vec![0.0; self.params.len()];
        let mut offsets = Vec::with_capacity(layers);
        let mut off = 0;
        for w in self.sizes.windows(2) {
            offsets.push(off);
            off += w[0] * w[1] + w[1];
        }
        let mut delta = dy.to_vec();
        for l in (0..layers).rev() {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            if l + 1 < layers {
                for (d, z) in delta.iter_mut().zip(&tape.pre[l]) {
                    if *z <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let off = offsets[l];
            let input = &tape.inputs[l];
            let (gw, gb) = grads[off..off + fan_in * fan_out + fan_out].split_at_mut(fan_in * fan_out);
            for b in 0..batch {
                let drow = &delta[b * fan_out..(b + 1) * fan_out];
                let xrow = &input[b * fan_in..(b + 1) * fan_in];
                for (o, d) in drow.iter().enumerate() {
                    if *d == 0.0 {
                        continue;
                    }
                    gb[o] += d;
                    for (g, x) in gw[o * fan_in..(o + 1) * fan_in].iter_mut().zip(xrow) {
                        *g += d * x;
                    }
                }
            }
            let weights = &self.params[off..off + fan_in * fan_out];
            let mut next = vec![0.0; batch * fan_in];
            for b in 0..batch {
                let drow = &delta[b * fan_out..(b + 1) * fan_out];
                let nrow = &mut next[b * fan_in..(b + 1) * fan_in];
                for (o, d) in drow.iter().enumerate() {
                    if *d == 0.0 {
                        continue;
                    }
                    for (n, w) in nrow.iter_mut().zip(&weights[o * fan_in..(o + 1) * fan_in]) {
                        *n += d * w;
                    }
                }
            }
            delta = next;
        }
        Ok((grads, delta))
    }

    /// Clamps every parameter into `[-c, c]`.
    pub fn clip_weights(&mut self, c: f64) -> Result<()> {
        if !(c.is_finite() && c > 0.0) {
            return Err(Error::InvalidParameter(format!("clip bound must be positive, got {c}")));
        }
        self.params.iter_mut().for_each(|p| *p = p.clamp(-c, c));
        Ok(())
    }

    /// Text checkpoint: a `rpy-mlp 1` magic line, a line with the layer sizes,
    /// then one parameter per line in shortest round-trip decimal form.
    pub fn to_checkpoint(&self) -> String {
        let mut out = String::from("rpy-mlp 1\n");
        let sizes: Vec<String> = self.sizes.iter().map(|s| s.to_string()).collect();
        out.push_str(&sizes.join(" "));
        out.push('\n');
        for p in &self.params {
            out.push_str(&p.to_string());
            out.push('\n');
        }
        out
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some("rpy-mlp 1") {
            return Err(Error::Parse("missing checkpoint header".into()));
        }
        let sizes = lines
            .next()
            .ok_or_else(|| Error::Parse("missing layer sizes".into()))?
            .split_whitespace()
            .map(|t| t.parse::<usize>().map_err(|e| Error::Parse(format!("layer size {t:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        let params = lines
            .filter(|l| !l.trim().is_empty())
            .map(|t| t.trim().parse::<f64>().map_err(|e| Error::Parse(format!("parameter {t:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        Self::from_params(&sizes, params)
    }
}

/// `y = W x + b` for each of `batch` rows.
fn affine(block: &[f64], x: &[f64], batch: usize, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let (w, rest) = block.split_at(fan_in * fan_out);
    let bias = &rest[..fan_out];
    let mut y = Vec::with_capacity(batch * fan_out);
    for b in 0..batch {
        let xrow = &x[b * fan_in..(b + 1) * fan_in];
        for o in 0..fan_out {
            let row = &w[o * fan_in..(o + 1) * fan_in];
            y.push(bias[o] + row.iter().zip(xrow).map(|(p, q)| p * q).sum::<f64>());
        }
    }
    y
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 coefficient added to the gradient before the moment updates.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(num_params: usize, config: AdamConfig) -> Self {
        Self {
            config,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One bias-corrected update. A non-finite gradient leaves both the
    /// parameters and the moments untouched.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::ShapeMismatch {
                expected: self.m.len(),
                got: if params.len() != self.m.len() { params.len() } else { grads.len() },
            });
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient entry {i}")));
        }
        let c = self.config;
        self.t += 1;
        let bc1 = 1.0 - c.beta1.powf(self.t as f64);
        let bc2 = 1.0 - c.beta2.powf(self.t as f64);
        for i in 0..params.len() {
            let g = grads[i] + c.weight_decay * params[i];
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= c.lr * mhat / (vhat.sqrt() + c.eps);
        }
        Ok(())
    }
}

/// `target <- tau * online + (1 - tau) * target`.
pub fn soft_update(target: &mut [f64], online: &[f64], tau: f64) -> Result<()> {
    if target.len() != online.len() {
        return Err(Error::ShapeMismatch {
            expected: target.len(),
            got: online.len(),
        });
    }
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::InvalidParameter(format!("tau must lie in [0, 1], got {tau}")));
    }
    if tau == 1.0 {
        target.copy_from_slice(online);
    } else if tau != 0.0 {
        for (t, o) in target.iter_mut().zip(online) {
            *t = tau * o + (1.0 - tau) * *t;
        }
    }
    Ok(())
}
