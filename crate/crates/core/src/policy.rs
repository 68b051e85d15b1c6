//! Recurrent policy network for the energy bandit.
//!
//! A byte window is encoded as one 8-wide binary row per byte (MSB first)
//! and fed through a single-layer LSTM. A fully connected softmax head maps
//! the final hidden state to a distribution over the energy multipliers.
//! Training is plain REINFORCE: the loss of one episode is
//! `-ln(p[action] + 1e-12) * reward`, minimized by SGD with
//! backpropagation through every timestep.
//!
//! All parameters live in one flat vector, laid out in the same order as the
//! model file:
//!
//! 1. input weights, `[4 * hidden][8]`, gate blocks in order i, f, g, o
//! 2. recurrent weights, `[4 * hidden][hidden]`, same gate order
//! 3. gate biases, `[4 * hidden]`
//! 4. head weights, `[hidden][actions]`
//! 5. head bias, `[actions]`

use std::fs;
use std::path::Path;

use rand::Rng;
use thiserror::Error;

pub const INPUT_SIZE: usize = 8;
pub const HIDDEN_SIZE: usize = 100;
pub const NUM_ACTIONS: usize = 5;
pub const DEFAULT_LEARNING_RATE: f64 = 0.001;

/// Gradients with a larger L2 norm are rescaled to this norm.
pub const GRAD_CLIP_NORM: f64 = 5.0;

const LOG_EPS: f64 = 1e-12;
const HEAD_INIT_RANGE: f64 = 0.05;
const FORGET_BIAS: f64 = 1.0;

const MAGIC: &[u8; 4] = b"BFZM";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("non-finite value in forward pass (after {update_count} updates)")]
    NonFiniteForward { update_count: u64 },
    #[error("non-finite gradient; update {update_count} skipped")]
    NonFiniteGradient { update_count: u64 },
    #[error("bad magic: not a model file")]
    BadMagic,
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("dimension mismatch for {field}: expected {expected}, found {found}")]
    DimMismatch { field: &'static str, expected: usize, found: usize },
    #[error("unexpected end of model file")]
    UnexpectedEnd,
    #[error("{0} trailing bytes after model data")]
    TrailingBytes(usize),
    #[error("model file contains non-finite parameters")]
    NonFiniteParameter,
    #[error("model I/O failed: {0}")]
    Io(#[from] std::io::Error),
}

/// A byte window as a `len × 8` binary matrix; row `i`, column `j` holds
/// bit `7 - j` of byte `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct StateMatrix {
    rows: Vec<[f64; INPUT_SIZE]>,
}

impl StateMatrix {
    pub fn encode(bytes: &[u8]) -> Self {
        let rows = bytes
            .iter()
            .map(|&b| std::array::from_fn(|j| ((b >> (7 - j)) & 1) as f64))
            .collect();
        Self { rows }
    }

    pub fn rows(&self) -> &[[f64; INPUT_SIZE]] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Shape of a model; only the hidden width varies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    pub hidden: usize,
}

impl ModelDims {
    pub const STANDARD: ModelDims = ModelDims { hidden: HIDDEN_SIZE };

    fn gates(&self) -> usize {
        4 * self.hidden
    }

    fn w_x(&self) -> usize {
        0
    }

    fn w_h(&self) -> usize {
        self.gates() * INPUT_SIZE
    }

    fn bias(&self) -> usize {
        self.w_h() + self.gates() * self.hidden
    }

    fn head_w(&self) -> usize {
        self.bias() + self.gates()
    }

    fn head_b(&self) -> usize {
        self.head_w() + self.hidden * NUM_ACTIONS
    }

    pub fn param_count(&self) -> usize {
        self.head_b() + NUM_ACTIONS
    }
}

/// Activations retained by [`PolicyModel::forward`] for backpropagation.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    hidden: usize,
    /// Per step: i, f, g, o, c, tanh(c), h, each `hidden` wide.
    steps: Vec<f64>,
    pub logits: [f64; NUM_ACTIONS],
    pub probs: [f64; NUM_ACTIONS],
}

impl ForwardCache {
    fn step(&self, t: usize) -> &[f64] {
        let w = 7 * self.hidden;
        &self.steps[t * w..(t + 1) * w]
    }

    fn part(&self, t: usize, k: usize) -> &[f64] {
        let h = self.hidden;
        &self.step(t)[k * h..(k + 1) * h]
    }

    /// Final hidden state; zeros for an empty input.
    pub fn final_hidden(&self) -> Vec<f64> {
        let n = self.steps.len() / (7 * self.hidden);
        if n == 0 {
            vec![0.0; self.hidden]
        } else {
            self.part(n - 1, 6).to_vec()
        }
    }
}

const GI: usize = 0;
const GF: usize = 1;
const GG: usize = 2;
const GO: usize = 3;
const C: usize = 4;
const TC: usize = 5;
const H: usize = 6;

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Dot product with four independent accumulators, so it vectorizes.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Numerically stable softmax (shifts by the max logit).
pub fn softmax(logits: &[f64; NUM_ACTIONS]) -> [f64; NUM_ACTIONS] {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: [f64; NUM_ACTIONS] = std::array::from_fn(|k| (logits[k] - max).exp());
    let sum: f64 = exps.iter().sum();
    std::array::from_fn(|k| exps[k] / sum)
}

/// Index of the largest probability; ties go to the lowest index.
pub fn argmax(probs: &[f64; NUM_ACTIONS]) -> usize {
    let mut best = 0;
    for k in 1..NUM_ACTIONS {
        if probs[k] > probs[best] {
            best = k;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyModel {
    dims: ModelDims,
    params: Vec<f64>,
    pub learning_rate: f64,
    update_count: u64,
    clipped_updates: u64,
}

impl PolicyModel {
    /// The standard 100-unit model, randomly initialized.
    pub fn init<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self::with_dims(ModelDims::STANDARD, rng)
    }

    /// Head weights uniform in ±0.05, LSTM weights uniform in ±1/sqrt(hidden),
    /// biases zero except the forget gate at 1.
    pub fn with_dims<R: Rng + ?Sized>(dims: ModelDims, rng: &mut R) -> Self {
        let mut params = vec![0.0; dims.param_count()];
        let r = 1.0 / (dims.hidden as f64).sqrt();
        for p in &mut params[dims.w_x()..dims.bias()] {
            *p = rng.gen_range(-r..=r);
        }
        let forget = dims.bias() + GF * dims.hidden;
        params[forget..forget + dims.hidden].fill(FORGET_BIAS);
        for p in &mut params[dims.head_w()..dims.head_b()] {
            *p = rng.gen_range(-HEAD_INIT_RANGE..=HEAD_INIT_RANGE);
        }
        Self::from_params(dims, params)
    }

    /// A model with every parameter zero.
    pub fn zeros(dims: ModelDims) -> Self {
        Self::from_params(dims, vec![0.0; dims.param_count()])
    }

    pub fn from_params(dims: ModelDims, params: Vec<f64>) -> Self {
        assert_eq!(params.len(), dims.param_count(), "parameter count does not match dims");
        Self { dims, params, learning_rate: DEFAULT_LEARNING_RATE, update_count: 0, clipped_updates: 0 }
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn update_count(&self) -> u64 {
        self.update_count
    }

    /// How many updates had their gradient norm clipped.
    pub fn clipped_updates(&self) -> u64 {
        self.clipped_updates
    }

    pub fn forget_bias(&self) -> &[f64] {
        let start = self.dims.bias() + GF * self.dims.hidden;
        &self.params[start..start + self.dims.hidden]
    }

    pub fn head_weights(&self) -> &[f64] {
        &self.params[self.dims.head_w()..self.dims.head_b()]
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    pub fn probabilities(&self, m: &StateMatrix) -> Result<[f64; NUM_ACTIONS], PolicyError> {
        self.forward(m).map(|c| c.probs)
    }

    pub fn forward(&self, m: &StateMatrix) -> Result<ForwardCache, PolicyError> {
        let d = self.dims;
        let hs = d.hidden;
        let p = &self.params;
        let w_x = &p[d.w_x()..d.w_h()];
        let w_h = &p[d.w_h()..d.bias()];
        let bias = &p[d.bias()..d.head_w()];

        let mut steps = Vec::with_capacity(m.len() * 7 * hs);
        let mut h_prev = vec![0.0; hs];
        let mut c_prev = vec![0.0; hs];
        let mut z = vec![0.0; 4 * hs];
        let mut step = vec![0.0; 7 * hs];
        for x in m.rows() {
            for r in 0..4 * hs {
                z[r] = bias[r]
                    + dot(&w_x[r * INPUT_SIZE..(r + 1) * INPUT_SIZE], x)
                    + dot(&w_h[r * hs..(r + 1) * hs], &h_prev);
            }
            for u in 0..hs {
                let i = sigmoid(z[GI * hs + u]);
                let f = sigmoid(z[GF * hs + u]);
                let g = z[GG * hs + u].tanh();
                let o = sigmoid(z[GO * hs + u]);
                let c = f * c_prev[u] + i * g;
                let tc = c.tanh();
                let h = o * tc;
                for (k, v) in [i, f, g, o, c, tc, h].into_iter().enumerate() {
                    step[k * hs + u] = v;
                }
                c_prev[u] = c;
                h_prev[u] = h;
            }
            steps.extend_from_slice(&step);
        }

        let head_w = &p[d.head_w()..d.head_b()];
        let head_b = &p[d.head_b()..];
        let logits: [f64; NUM_ACTIONS] = std::array::from_fn(|k| {
            head_b[k] + (0..hs).map(|j| h_prev[j] * head_w[j * NUM_ACTIONS + k]).sum::<f64>()
        });
        let probs = softmax(&logits);
        if !logits.iter().chain(&probs).all(|v| v.is_finite()) {
            return Err(PolicyError::NonFiniteForward { update_count: self.update_count });
        }
        Ok(ForwardCache { hidden: hs, steps, logits, probs })
    }

    /// Loss of one episode and its gradient with respect to every parameter.
    pub fn gradient(&self, m: &StateMatrix, action: usize, reward: f64) -> Result<(f64, Vec<f64>), PolicyError> {
        assert!(action < NUM_ACTIONS, "action index out of range");
        let cache = self.forward(m)?;
        Ok(self.backward(m, &cache, action, reward))
    }

    fn backward(&self, m: &StateMatrix, cache: &ForwardCache, action: usize, reward: f64) -> (f64, Vec<f64>) {
        let d = self.dims;
        let hs = d.hidden;
        let p = &self.params;
        let mut grad = vec![0.0; p.len()];

        let pa = cache.probs[action];
        let loss = -(pa + LOG_EPS).ln() * reward;
        // d/dlogit_k of -R ln(p_a + eps) = R p_a / (p_a + eps) * (p_k - [k == a])
        let scale = reward * pa / (pa + LOG_EPS);
        let dlogits: [f64; NUM_ACTIONS] =
            std::array::from_fn(|k| scale * (cache.probs[k] - if k == action { 1.0 } else { 0.0 }));

        let h_last = cache.final_hidden();
        let head_w = &p[d.head_w()..d.head_b()];
        let mut dh = vec![0.0; hs];
        for j in 0..hs {
            for k in 0..NUM_ACTIONS {
                grad[d.head_w() + j * NUM_ACTIONS + k] = h_last[j] * dlogits[k];
                dh[j] += head_w[j * NUM_ACTIONS + k] * dlogits[k];
            }
        }
        grad[d.head_b()..].copy_from_slice(&dlogits);

        let w_h = &p[d.w_h()..d.bias()];
        let mut dc = vec![0.0; hs];
        let mut dz = vec![0.0; 4 * hs];
        let zeros = vec![0.0; hs];
        for t in (0..m.len()).rev() {
            let (gi, gf, gg, go) = (cache.part(t, GI), cache.part(t, GF), cache.part(t, GG), cache.part(t, GO));
            let tc = cache.part(t, TC);
            let (c_prev, h_prev) = if t == 0 {
                (&zeros[..], &zeros[..])
            } else {
                (cache.part(t - 1, C), cache.part(t - 1, H))
            };
            for u in 0..hs {
                let dout = dh[u] * tc[u];
                dc[u] += dh[u] * go[u] * (1.0 - tc[u] * tc[u]);
                dz[GI * hs + u] = dc[u] * gg[u] * gi[u] * (1.0 - gi[u]);
                dz[GF * hs + u] = dc[u] * c_prev[u] * gf[u] * (1.0 - gf[u]);
                dz[GG * hs + u] = dc[u] * gi[u] * (1.0 - gg[u] * gg[u]);
                dz[GO * hs + u] = dout * go[u] * (1.0 - go[u]);
                dc[u] *= gf[u];
            }
            let x = &m.rows()[t];
            dh.fill(0.0);
            for (r, &dzr) in dz.iter().enumerate() {
                if dzr == 0.0 {
                    continue;
                }
                grad[d.bias() + r] += dzr;
                let gx = &mut grad[d.w_x() + r * INPUT_SIZE..d.w_x() + (r + 1) * INPUT_SIZE];
                for (g, xv) in gx.iter_mut().zip(x) {
                    *g += dzr * xv;
                }
                let gh = &mut grad[d.w_h() + r * hs..d.w_h() + (r + 1) * hs];
                for (g, hv) in gh.iter_mut().zip(h_prev) {
                    *g += dzr * hv;
                }
                for (acc, w) in dh.iter_mut().zip(&w_h[r * hs..(r + 1) * hs]) {
                    *acc += w * dzr;
                }
            }
        }
        (loss, grad)
    }

    /// One policy-gradient step on a single `(state, action, reward)`
    /// episode. Returns the loss before the step.
    ///
    /// A non-finite gradient leaves the parameters untouched and returns
    /// [`PolicyError::NonFiniteGradient`].
    pub fn update(&mut self, m: &StateMatrix, action: usize, reward: f64) -> Result<f64, PolicyError> {
        assert!(action < NUM_ACTIONS, "action index out of range");
        debug_assert!((0.0..=1.0).contains(&reward), "reward out of [0, 1]");
        if reward == 0.0 {
            self.update_count += 1;
            return Ok(0.0);
        }
        let (loss, mut grad) = self.gradient(m, action, reward)?;
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if !norm.is_finite() || !loss.is_finite() {
            log::warn!("skipping policy update {}: non-finite gradient", self.update_count);
            return Err(PolicyError::NonFiniteGradient { update_count: self.update_count });
        }
        if norm > GRAD_CLIP_NORM {
            let s = GRAD_CLIP_NORM / norm;
            grad.iter_mut().for_each(|g| *g *= s);
            self.clipped_updates += 1;
        }
        for (p, g) in self.params.iter_mut().zip(&grad) {
            *p -= self.learning_rate * g;
        }
        self.update_count += 1;
        Ok(loss)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + 8 * self.params.len() + 8);
        out.extend_from_slice(MAGIC);
        for v in [FORMAT_VERSION, INPUT_SIZE as u32, self.dims.hidden as u32, NUM_ACTIONS as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out.extend_from_slice(&self.update_count.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8], expected: ModelDims) -> Result<Self, PolicyError> {
        let mut r = Reader(bytes);
        if r.take(4)? != MAGIC {
            return Err(PolicyError::BadMagic);
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(PolicyError::UnsupportedVersion(version));
        }
        for (field, want) in [("input", INPUT_SIZE), ("hidden", expected.hidden), ("actions", NUM_ACTIONS)] {
            let found = r.u32()? as usize;
            if found != want {
                return Err(PolicyError::DimMismatch { field, expected: want, found });
            }
        }
        let mut params = Vec::with_capacity(expected.param_count());
        for _ in 0..expected.param_count() {
            params.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
        }
        let update_count = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
        if !r.0.is_empty() {
            return Err(PolicyError::TrailingBytes(r.0.len()));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(PolicyError::NonFiniteParameter);
        }
        let mut model = Self::from_params(expected, params);
        model.update_count = update_count;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), PolicyError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    /// Loads a standard-shape model.
    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        Self::from_bytes(&fs::read(path)?, ModelDims::STANDARD)
    }
}

struct Reader<'a>(&'a [u8]);

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], PolicyError> {
        if self.0.len() < n {
            return Err(PolicyError::UnexpectedEnd);
        }
        let (head, tail) = self.0.split_at(n);
        self.0 = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32, PolicyError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
