//! Classifiers with flat parameter vectors, per-sample loss/gradient, and
//! minibatch ERM training.
//!
//! Parameters are laid out layer by layer; each layer stores its weight
//! matrix (`out x in`, row-major) followed by its bias vector. The last
//! layer therefore always occupies the tail of `theta`.

use std::ops::Range;
use std::path::Path;

use base64::Engine;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Split};
use crate::error::{Error, Result};

pub const PROB_FLOOR: f64 = 1e-12;

/// Default MLP shape: three hidden ReLU layers of 50 units.
pub const DEFAULT_HIDDEN: [usize; 3] = [50, 50, 50];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    /// Binary logistic regression: one logit, `P(y=1|x) = sigmoid(w.x + b)`.
    Logistic { d: usize },
    /// Multiclass softmax regression.
    Linear { d: usize, classes: usize },
    /// Fully connected ReLU network with a softmax output.
    Mlp {
        d: usize,
        hidden: Vec<usize>,
        classes: usize,
    },
}

impl Architecture {
    pub fn input_dim(&self) -> usize {
        match self {
            Architecture::Logistic { d }
            | Architecture::Linear { d, .. }
            | Architecture::Mlp { d, .. } => *d,
        }
    }

    pub fn n_classes(&self) -> usize {
        match self {
            Architecture::Logistic { .. } => 2,
            Architecture::Linear { classes, .. } | Architecture::Mlp { classes, .. } => *classes,
        }
    }

    /// `(fan_in, fan_out)` per dense layer.
    pub fn layers(&self) -> Vec<(usize, usize)> {
        match self {
            Architecture::Logistic { d } => vec![(*d, 1)],
            Architecture::Linear { d, classes } => vec![(*d, *classes)],
            Architecture::Mlp { d, hidden, classes } => {
                let mut dims = vec![*d];
                dims.extend(hidden.iter().copied());
                dims.push(*classes);
                dims.windows(2).map(|w| (w[0], w[1])).collect()
            }
        }
    }

    pub fn n_params(&self) -> usize {
        self.layers().iter().map(|(i, o)| (i + 1) * o).sum()
    }

    /// Parameter range of the final dense layer.
    pub fn last_layer(&self) -> Range<usize> {
        let layers = self.layers();
        let (i, o) = *layers.last().expect("at least one layer");
        let total = self.n_params();
        total - (i + 1) * o..total
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidInput(format!("architecture: {msg}")));
        if self.input_dim() == 0 {
            return bad("input dimension must be positive");
        }
        if self.n_classes() < 2 {
            return bad("need at least two classes");
        }
        if let Architecture::Mlp { hidden, .. } = self {
            if hidden.iter().any(|h| *h == 0) {
                return bad("hidden layers must be nonempty");
            }
        }
        Ok(())
    }
}

/// Architecture family without data-dependent sizes, as written in configs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ArchSpec {
    Logistic,
    Linear,
    Mlp {
        #[serde(default = "default_hidden")]
        hidden: Vec<usize>,
    },
}

fn default_hidden() -> Vec<usize> {
    DEFAULT_HIDDEN.to_vec()
}

impl ArchSpec {
    pub fn resolve(&self, d: usize, classes: usize) -> Result<Architecture> {
        let arch = match self {
            ArchSpec::Logistic => {
                if classes != 2 {
                    return Err(Error::InvalidInput(format!(
                        "logistic architecture needs 2 classes, dataset has {classes}"
                    )));
                }
                Architecture::Logistic { d }
            }
            ArchSpec::Linear => Architecture::Linear { d, classes },
            ArchSpec::Mlp { hidden } => Architecture::Mlp {
                d,
                hidden: hidden.clone(),
                classes,
            },
        };
        arch.validate()?;
        Ok(arch)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    arch: Architecture,
    theta: Vec<f64>,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

fn clamped_nll(p: f64) -> f64 {
    -p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR).ln()
}

impl ModelParams {
    pub fn new(arch: Architecture, theta: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if theta.len() != arch.n_params() {
            return Err(Error::Dimension {
                expected: arch.n_params(),
                got: theta.len(),
            });
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("parameters must be finite".into()));
        }
        Ok(Self { arch, theta })
    }

    pub fn zeros(arch: Architecture) -> Result<Self> {
        let n = arch.n_params();
        Self::new(arch, vec![0.0; n])
    }

    /// Seeded initialization. Single-layer models start at zero; MLP layers
    /// draw weights and biases from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        if !matches!(arch, Architecture::Mlp { .. }) {
            return Self::zeros(arch);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut theta = Vec::with_capacity(arch.n_params());
        for (fan_in, fan_out) in arch.layers() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for _ in 0..(fan_in + 1) * fan_out {
                theta.push(rng.random_range(-bound..bound));
            }
        }
        Self::new(arch, theta)
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn into_theta(self) -> Vec<f64> {
        self.theta
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        let d = self.arch.input_dim();
        if x.len() != d {
            return Err(Error::Dimension {
                expected: d,
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Runs the dense stack, returning the output logits and the input of
    /// every layer (post-activation), starting with `x` itself.
    fn run(&self, x: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>) {
        let layers = self.arch.layers();
        let last = layers.len() - 1;
        let mut inputs: Vec<Vec<f64>> = Vec::with_capacity(layers.len());
        let mut a = x.to_vec();
        let mut offset = 0;
        for (l, &(fan_in, fan_out)) in layers.iter().enumerate() {
            let w = &self.theta[offset..offset + fan_in * fan_out];
            let b = &self.theta[offset + fan_in * fan_out..offset + (fan_in + 1) * fan_out];
            offset += (fan_in + 1) * fan_out;
            let mut z: Vec<f64> = (0..fan_out)
                .map(|o| {
                    let row = &w[o * fan_in..(o + 1) * fan_in];
                    row.iter().zip(&a).map(|(wi, ai)| wi * ai).sum::<f64>() + b[o]
                })
                .collect();
            if l < last {
                for v in z.iter_mut() {
                    *v = v.max(0.0);
                }
            }
            inputs.push(std::mem::replace(&mut a, z));
        }
        (a, inputs)
    }

    fn probs_from_logits(&self, mut logits: Vec<f64>) -> Vec<f64> {
        match self.arch {
            Architecture::Logistic { .. } => {
                let p1 = sigmoid(logits[0]);
                vec![1.0 - p1, p1]
            }
            _ => {
                softmax_in_place(&mut logits);
                logits
            }
        }
    }

    /// Class-probability vector for one input.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let (logits, _) = self.run(x);
        Ok(self.probs_from_logits(logits))
    }

    /// Argmax class; ties go to the lowest class id.
    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        let p = self.forward(x)?;
        Ok(argmax(&p))
    }

    /// Cross-entropy `-ln P(y)` with the probability clamped to
    /// `[1e-12, 1 - 1e-12]`.
    pub fn loss(&self, x: &[f64], y: usize) -> Result<f64> {
        let p = self.forward(x)?;
        let py = *p.get(y).ok_or_else(|| {
            Error::InvalidInput(format!("label {y} out of range for {} classes", p.len()))
        })?;
        Ok(clamped_nll(py))
    }

    /// Adds `scale * d loss / d theta` into `grad` and returns the loss.
    pub fn accumulate_grad(&self, x: &[f64], y: usize, scale: f64, grad: &mut [f64]) -> Result<f64> {
        self.check_input(x)?;
        if grad.len() != self.theta.len() {
            return Err(Error::Dimension {
                expected: self.theta.len(),
                got: grad.len(),
            });
        }
        let classes = self.arch.n_classes();
        if y >= classes {
            return Err(Error::InvalidInput(format!(
                "label {y} out of range for {classes} classes"
            )));
        }
        let (logits, inputs) = self.run(x);
        let probs = self.probs_from_logits(logits);
        let loss = clamped_nll(probs[y]);
        let mut delta: Vec<f64> = match self.arch {
            Architecture::Logistic { .. } => vec![probs[1] - y as f64],
            _ => probs
                .iter()
                .enumerate()
                .map(|(c, p)| if c == y { p - 1.0 } else { *p })
                .collect(),
        };

        let layers = self.arch.layers();
        let mut end = self.theta.len();
        for (l, &(fan_in, fan_out)) in layers.iter().enumerate().rev() {
            let start = end - (fan_in + 1) * fan_out;
            let w_range = start..start + fan_in * fan_out;
            let b_start = start + fan_in * fan_out;
            let a = &inputs[l];
            for o in 0..fan_out {
                let g = scale * delta[o];
                let row = &mut grad[w_range.start + o * fan_in..w_range.start + (o + 1) * fan_in];
                for (gi, ai) in row.iter_mut().zip(a) {
                    *gi += g * ai;
                }
                grad[b_start + o] += g;
            }
            if l > 0 {
                let w = &self.theta[w_range];
                let mut prev = vec![0.0; fan_in];
                for o in 0..fan_out {
                    let row = &w[o * fan_in..(o + 1) * fan_in];
                    for (p, wi) in prev.iter_mut().zip(row) {
                        *p += wi * delta[o];
                    }
                }
                for (p, ai) in prev.iter_mut().zip(a) {
                    if *ai <= 0.0 {
                        *p = 0.0;
                    }
                }
                delta = prev;
            }
            end = start;
        }
        Ok(loss)
    }

    /// Full per-sample gradient of the loss.
    pub fn sample_grad(&self, x: &[f64], y: usize) -> Result<Vec<f64>> {
        let mut g = vec![0.0; self.theta.len()];
        self.accumulate_grad(x, y, 1.0, &mut g)?;
        Ok(g)
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

pub fn per_sample_loss(params: &ModelParams, sample: &crate::dataset::Sample) -> Result<f64> {
    params.loss(&sample.x, sample.y)
}

pub fn mean_loss(params: &ModelParams, ds: &Dataset, indices: &[usize]) -> Result<f64> {
    if indices.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for &i in indices {
        let s = ds.sample(i);
        total += params.loss(&s.x, s.y)?;
    }
    Ok(total / indices.len() as f64)
}

pub fn accuracy(params: &ModelParams, ds: &Dataset, indices: &[usize]) -> Result<f64> {
    if indices.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for &i in indices {
        let s = ds.sample(i);
        if params.predict(&s.x)? == s.y {
            correct += 1;
        }
    }
    Ok(correct as f64 / indices.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Adaptive moments with beta1 = 0.9, beta2 = 0.999, eps = 1e-8.
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub optimizer: OptimizerKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 128,
            learning_rate: 1e-3,
            weight_decay: 0.0,
            seed: 0,
            optimizer: OptimizerKind::Adam,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidInput(
                "epochs and batch_size must be at least 1".into(),
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::InvalidInput("learning_rate must be nonnegative".into()));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::InvalidInput("weight_decay must be nonnegative".into()));
        }
        Ok(())
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Optimizer {
    fn new(kind: OptimizerKind, lr: f64, n: usize) -> Self {
        Self {
            kind,
            lr,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, theta: &mut [f64], grad: &[f64]) {
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in theta.iter_mut().zip(grad) {
                    *p -= self.lr * g;
                }
            }
            OptimizerKind::Adam => {
                self.t += 1;
                let bc1 = 1.0 - ADAM_BETA1.powi(self.t);
                let bc2 = 1.0 - ADAM_BETA2.powi(self.t);
                for (j, (p, g)) in theta.iter_mut().zip(grad).enumerate() {
                    self.m[j] = ADAM_BETA1 * self.m[j] + (1.0 - ADAM_BETA1) * g;
                    self.v[j] = ADAM_BETA2 * self.v[j] + (1.0 - ADAM_BETA2) * g * g;
                    let m_hat = self.m[j] / bc1;
                    let v_hat = self.v[j] / bc2;
                    *p -= self.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                }
            }
        }
    }
}

/// Decides how the per-slot gradient sums of one minibatch are combined.
///
/// Every training sample belongs to a slot (a group, or slot 0 for plain
/// ERM). For each batch the trainer reports per-slot sample counts and loss
/// sums; the objective returns one coefficient per slot, and the descent
/// direction is `sum_k coef_k * (sum of gradients in slot k)`.
pub(crate) trait BatchObjective {
    fn coefficients(&mut self, counts: &[usize], loss_sums: &[f64]) -> Vec<f64>;
}

struct MeanLoss;

impl BatchObjective for MeanLoss {
    fn coefficients(&mut self, counts: &[usize], _loss_sums: &[f64]) -> Vec<f64> {
        vec![1.0 / counts[0] as f64]
    }
}

/// Shared minibatch loop. `slot_of[k]` is the slot of sample `indices[k]`.
pub(crate) fn fit(
    init: ModelParams,
    ds: &Dataset,
    indices: &[usize],
    slot_of: &[usize],
    n_slots: usize,
    cfg: &TrainConfig,
    objective: &mut dyn BatchObjective,
) -> Result<ModelParams> {
    cfg.validate()?;
    if indices.is_empty() {
        return Err(Error::EmptyTrainSplit);
    }
    debug_assert_eq!(indices.len(), slot_of.len());
    if ds.dim() != init.arch.input_dim() {
        return Err(Error::Dimension {
            expected: init.arch.input_dim(),
            got: ds.dim(),
        });
    }
    let mut params = init;
    let p = params.theta.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..indices.len()).collect();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, p);
    let mut slot_grads = vec![0.0; n_slots * p];
    let mut direction = vec![0.0; p];
    let mut counts = vec![0usize; n_slots];
    let mut loss_sums = vec![0.0; n_slots];

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            slot_grads.iter_mut().for_each(|v| *v = 0.0);
            counts.iter_mut().for_each(|v| *v = 0);
            loss_sums.iter_mut().for_each(|v| *v = 0.0);
            for &pos in batch {
                let s = ds.sample(indices[pos]);
                let k = slot_of[pos];
                let buf = &mut slot_grads[k * p..(k + 1) * p];
                loss_sums[k] += params.accumulate_grad(&s.x, s.y, 1.0, buf)?;
                counts[k] += 1;
            }
            let coef = objective.coefficients(&counts, &loss_sums);
            direction.iter_mut().for_each(|v| *v = 0.0);
            for (k, c) in coef.iter().enumerate() {
                if counts[k] == 0 || *c == 0.0 {
                    continue;
                }
                let buf = &slot_grads[k * p..(k + 1) * p];
                for (dj, gj) in direction.iter_mut().zip(buf) {
                    *dj += c * gj;
                }
            }
            if cfg.weight_decay > 0.0 {
                for (dj, tj) in direction.iter_mut().zip(&params.theta) {
                    *dj += cfg.weight_decay * tj;
                }
            }
            opt.step(&mut params.theta, &direction);
        }
    }
    if params.theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(
            "training diverged: non-finite parameters".into(),
        ));
    }
    Ok(params)
}

/// Minibatch ERM on the train split from a seeded initialization.
pub fn train_erm(ds: &Dataset, arch: &Architecture, cfg: &TrainConfig) -> Result<ModelParams> {
    let init = ModelParams::init(arch.clone(), cfg.seed)?;
    train_erm_from(init, ds, &ds.indices(Split::Train), cfg)
}

/// Minibatch ERM over `indices` starting from `init`.
pub fn train_erm_from(
    init: ModelParams,
    ds: &Dataset,
    indices: &[usize],
    cfg: &TrainConfig,
) -> Result<ModelParams> {
    let slots = vec![0; indices.len()];
    fit(init, ds, indices, &slots, 1, cfg, &mut MeanLoss)
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointFile {
    arch: Architecture,
    n_params: usize,
    /// Little-endian IEEE-754 doubles, base64 encoded.
    theta: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    meta: Option<serde_json::Value>,
}

pub fn save_checkpoint(
    params: &ModelParams,
    path: impl AsRef<Path>,
    meta: Option<serde_json::Value>,
) -> Result<()> {
    let path = path.as_ref();
    let bytes: Vec<u8> = params.theta.iter().flat_map(|v| v.to_le_bytes()).collect();
    let file = CheckpointFile {
        arch: params.arch.clone(),
        n_params: params.theta.len(),
        theta: base64::engine::general_purpose::STANDARD.encode(bytes),
        meta,
    };
    let text = serde_json::to_string_pretty(&file)?;
    std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let file: CheckpointFile = serde_json::from_str(&text)?;
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(file.theta.as_bytes())
        .map_err(|e| Error::InvalidInput(format!("checkpoint payload: {e}")))?;
    if bytes.len() != file.n_params * 8 {
        return Err(Error::InvalidInput(format!(
            "checkpoint payload holds {} bytes, expected {}",
            bytes.len(),
            file.n_params * 8
        )));
    }
    let theta = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    ModelParams::new(file.arch, theta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, split, Sample, SplitRatios};
    use proptest::prelude::*;
    use rand::Rng;

    fn linear2(w: [f64; 2], b: f64) -> ModelParams {
        ModelParams::new(Architecture::Logistic { d: 2 }, vec![w[0], w[1], b]).unwrap()
    }

    #[test]
    fn forward_zero_is_uniform() {
        let m = ModelParams::zeros(Architecture::Linear { d: 3, classes: 2 }).unwrap();
        let p = m.forward(&[4.0, -1.0, 2.0]).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
        let m = ModelParams::zeros(Architecture::Logistic { d: 3 }).unwrap();
        assert_eq!(m.forward(&[4.0, -1.0, 2.0]).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn forward_examples() {
        let m = linear2([1.0, 0.0], 0.0);
        assert!((m.forward(&[0.0, 3.0]).unwrap()[1] - 0.5).abs() < 1e-15);
        let m = linear2([10.0, 0.0], 0.0);
        assert!((m.forward(&[10.0, 0.0]).unwrap()[1] - 1.0).abs() < 1e-9);
        assert!(m.forward(&[1.0]).is_err());
    }

    #[test]
    fn softmax_linear_matches_logit_difference() {
        // Two-class softmax with class-1 row w and class-0 row 0 is the logistic model.
        let m = ModelParams::new(
            Architecture::Linear { d: 2, classes: 2 },
            vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0],
        )
        .unwrap();
        let p = m.forward(&[0.0, 3.0]).unwrap();
        assert!((p[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn loss_examples() {
        let z = ModelParams::zeros(Architecture::Linear { d: 2, classes: 2 }).unwrap();
        assert!((z.loss(&[3.0, 1.0], 1).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        let m = linear2([1.0, 0.0], 0.0);
        // -ln sigmoid(1) = ln(1 + e^-1)
        let expected = (1.0 + (-1.0f64).exp()).ln();
        assert!((m.loss(&[1.0, 0.0], 1).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.313262).abs() < 1e-6);
        let sure = linear2([100.0, 0.0], 0.0);
        assert!(sure.loss(&[10.0, 0.0], 1).unwrap() < 1e-9);
        assert!(sure.loss(&[10.0, 0.0], 0).unwrap().is_finite());
    }

    fn random_params(arch: Architecture, rng: &mut ChaCha8Rng) -> ModelParams {
        let theta = (0..arch.n_params()).map(|_| rng.random_range(-1.0..1.0)).collect();
        ModelParams::new(arch, theta).unwrap()
    }

    fn fd_check(m: &ModelParams, x: &[f64], y: usize) {
        let g = m.sample_grad(x, y).unwrap();
        let h = 1e-5;
        for j in 0..g.len() {
            let mut plus = m.clone();
            plus.theta[j] += h;
            let mut minus = m.clone();
            minus.theta[j] -= h;
            let fd = (plus.loss(x, y).unwrap() - minus.loss(x, y).unwrap()) / (2.0 * h);
            let err = (fd - g[j]).abs() / g[j].abs().max(fd.abs()).max(1e-6);
            assert!(err <= 1e-4, "param {j}: analytic {} fd {fd}", g[j]);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let archs = [
            Architecture::Logistic { d: 3 },
            Architecture::Linear { d: 3, classes: 4 },
            Architecture::Mlp { d: 3, hidden: vec![5, 4], classes: 3 },
        ];
        for arch in archs {
            for _ in 0..5 {
                let m = random_params(arch.clone(), &mut rng);
                let x: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
                let y = rng.random_range(0..arch.n_classes());
                fd_check(&m, &x, y);
            }
        }
    }

    #[test]
    fn last_layer_is_tail() {
        let arch = Architecture::Mlp { d: 2, hidden: vec![3], classes: 2 };
        assert_eq!(arch.n_params(), 3 * 3 + 4 * 2);
        assert_eq!(arch.last_layer(), 9..17);
        assert_eq!(Architecture::Logistic { d: 2 }.last_layer(), 0..3);
    }

    proptest! {
        #[test]
        fn softmax_is_permutation_equivariant(
            logits in proptest::collection::vec(-20.0f64..20.0, 2..6),
            rot in 0usize..6,
        ) {
            let c = logits.len();
            let rot = rot % c;
            let mut a = logits.clone();
            softmax_in_place(&mut a);
            let mut permuted: Vec<f64> = (0..c).map(|i| logits[(i + rot) % c]).collect();
            softmax_in_place(&mut permuted);
            for i in 0..c {
                prop_assert!((permuted[i] - a[(i + rot) % c]).abs() < 1e-15);
            }
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_learning_rate_keeps_init() {
        let ds = split(generate_synthetic(0, false), SplitRatios::default(), 0).unwrap();
        let arch = Architecture::Mlp { d: 2, hidden: vec![4], classes: 2 };
        let cfg = TrainConfig { epochs: 1, learning_rate: 0.0, ..TrainConfig::default() };
        let trained = train_erm(&ds, &arch, &cfg).unwrap();
        assert_eq!(trained, ModelParams::init(arch, cfg.seed).unwrap());
    }

    #[test]
    fn training_is_deterministic() {
        let ds = split(generate_synthetic(0, false), SplitRatios::default(), 0).unwrap();
        let arch = Architecture::Mlp { d: 2, hidden: vec![8], classes: 2 };
        let cfg = TrainConfig { epochs: 3, seed: 4, ..TrainConfig::default() };
        assert_eq!(train_erm(&ds, &arch, &cfg).unwrap(), train_erm(&ds, &arch, &cfg).unwrap());
    }

    #[test]
    fn empty_train_split_errors() {
        let ds = split(generate_synthetic(0, false), SplitRatios::new(0.0, 0.5, 0.5), 0).unwrap();
        let err = train_erm(&ds, &Architecture::Logistic { d: 2 }, &TrainConfig::default());
        assert!(matches!(err, Err(Error::EmptyTrainSplit)));
    }

    #[test]
    fn full_batch_gd_decreases_loss_on_separable_pair() {
        let ds = Dataset::new(
            vec![
                Sample { x: vec![-1.0, 0.5], y: 0, group: None, outlier: None },
                Sample { x: vec![1.0, -0.5], y: 1, group: None, outlier: None },
            ],
            2,
        )
        .unwrap();
        let idx = ds.indices(Split::Train);
        for arch in [Architecture::Logistic { d: 2 }, Architecture::Linear { d: 2, classes: 2 }] {
            let mut m = ModelParams::zeros(arch).unwrap();
            let mut prev = mean_loss(&m, &ds, &idx).unwrap();
            let cfg = TrainConfig {
                epochs: 1,
                batch_size: 2,
                learning_rate: 1e-2,
                optimizer: OptimizerKind::Sgd,
                ..TrainConfig::default()
            };
            for _ in 0..200 {
                m = train_erm_from(m, &ds, &idx, &cfg).unwrap();
                let cur = mean_loss(&m, &ds, &idx).unwrap();
                assert!(cur < prev);
                prev = cur;
            }
        }
    }

    #[test]
    fn linear_erm_reaches_linear_ceiling() {
        let ds = split(generate_synthetic(0, false), SplitRatios::default(), 0).unwrap();
        let train = ds.indices(Split::Train);
        // Best accuracy of any half-plane rule, by exhaustive direction and
        // threshold search.
        let mut ceiling = 0usize;
        for step in 0..7200 {
            let a = step as f64 * std::f64::consts::PI / 3600.0;
            let mut proj: Vec<(f64, usize)> = train
                .iter()
                .map(|&i| {
                    let s = ds.sample(i);
                    (a.cos() * s.x[0] + a.sin() * s.x[1], s.y)
                })
                .collect();
            proj.sort_by(|p, q| p.0.total_cmp(&q.0));
            let mut correct = proj.iter().filter(|p| p.1 == 1).count();
            ceiling = ceiling.max(correct);
            for p in &proj {
                if p.1 == 1 {
                    correct -= 1;
                } else {
                    correct += 1;
                }
                ceiling = ceiling.max(correct);
            }
        }
        let ceiling = ceiling as f64 / train.len() as f64;
        assert!(ceiling < 0.85, "ceiling {ceiling}");

        let cfg = TrainConfig { epochs: 50, learning_rate: 1e-2, ..TrainConfig::default() };
        let arch = Architecture::Linear { d: 2, classes: 2 };
        let m = train_erm(&ds, &arch, &cfg).unwrap();
        let acc = accuracy(&m, &ds, &train).unwrap();
        assert!(acc <= ceiling + 1e-12 && acc >= ceiling - 0.03, "train accuracy {acc}, ceiling {ceiling}");
        let zero = ModelParams::zeros(arch).unwrap();
        assert!(mean_loss(&m, &ds, &train).unwrap() <= mean_loss(&zero, &ds, &train).unwrap());
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let m = ModelParams::init(Architecture::Mlp { d: 2, hidden: vec![3, 3], classes: 2 }, 11).unwrap();
        save_checkpoint(&m, &path, Some(serde_json::json!({"seed": 11}))).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), m);
    }
}
