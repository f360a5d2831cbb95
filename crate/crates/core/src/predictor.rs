//! Multi-task MLP `41 → 256 → 384 → 3` that maps a feature vector to
//! `(bgt₀, k, streaming logit)`, trained from scratch with Adam.
//!
//! Parameters live in `f64` during training and are rounded to `f32` at the
//! end so the in-memory model equals what the model file stores. Regression
//! targets are standardized on the training split; the scaling is folded
//! back into the output layer so the trained model emits raw units.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[allow(unused_imports)]
use num_traits::Float;

use crate::budget::HeadProperties;
use crate::error::{Error, Result};
use crate::features::{FeatureNorms, FeatureVector, FEATURE_DIM};

pub const HIDDEN: [usize; 2] = [256, 384];
pub const OUTPUTS: usize = 3;
/// Layer widths from input to output.
pub const LAYER_WIDTHS: [usize; 4] = [FEATURE_DIM, HIDDEN[0], HIDDEN[1], OUTPUTS];

/// Fully connected layer. `w[i * output + j]` connects input `i` to output `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub input: usize,
    pub output: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Dense {
    fn zeros(input: usize, output: usize) -> Self {
        Self {
            input,
            output,
            w: vec![0.0; input * output],
            b: vec![0.0; output],
        }
    }

    fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }

    fn forward_into(&self, x: &[f64], y: &mut [f64]) {
        y.copy_from_slice(&self.b);
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let row = &self.w[i * self.output..(i + 1) * self.output];
            for (yj, wj) in y.iter_mut().zip(row) {
                *yj += xi * wj;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Prediction {
    /// Clamped to `[0, 1]`.
    pub bgt0: f64,
    /// Raw slope; negative values are clamped later when budgets are formed.
    pub slope: f64,
    pub streaming_prob: f64,
}

impl Prediction {
    pub fn properties(&self) -> HeadProperties {
        HeadProperties {
            bgt0: self.bgt0,
            slope: self.slope.max(0.0),
            streaming: self.streaming_prob >= 0.5,
        }
    }
}

/// Anything that predicts head properties from raw features.
pub trait HeadPredictor {
    fn predict(&self, fv: &FeatureVector) -> Result<Prediction>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictorModel {
    pub layers: Vec<Dense>,
    pub norms: FeatureNorms,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

impl PredictorModel {
    /// All-zero parameters with identity normalization.
    pub fn zeros() -> Self {
        let layers = LAYER_WIDTHS
            .windows(2)
            .map(|w| Dense::zeros(w[0], w[1]))
            .collect();
        Self {
            layers,
            norms: FeatureNorms::identity(),
        }
    }

    /// He-normal hidden layers, a small output layer, zero biases.
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Self::zeros();
        let last = m.layers.len() - 1;
        for (li, layer) in m.layers.iter_mut().enumerate() {
            let scale = if li == last {
                (1.0 / layer.input as f64).sqrt() * 0.1
            } else {
                (2.0 / layer.input as f64).sqrt()
            };
            for w in &mut layer.w {
                let z: f64 = StandardNormal.sample(&mut rng);
                *w = z * scale;
            }
        }
        m
    }

    /// Builds a model from layer shapes and a flat parameter vector in
    /// [`flat_params`](Self::flat_params) order.
    pub fn from_parts(widths: &[usize], params: &[f64], norms: FeatureNorms) -> Result<Self> {
        if widths != LAYER_WIDTHS {
            return Err(Error::Shape {
                what: "layer widths",
                expected: LAYER_WIDTHS.len(),
                found: widths.len(),
            });
        }
        if norms.dim() != FEATURE_DIM {
            return Err(Error::BadNorms {
                expected: FEATURE_DIM,
                found: norms.dim(),
            });
        }
        let mut m = Self::zeros();
        m.norms = norms;
        m.set_flat_params(params)?;
        Ok(m)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::param_count).sum()
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w: Vec<usize> = self.layers.iter().map(|l| l.input).collect();
        w.push(self.layers.last().map_or(0, |l| l.output));
        w
    }

    /// Weights then biases, layer by layer.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.w);
            out.extend_from_slice(&l.b);
        }
        out
    }

    pub fn set_flat_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::Shape {
                what: "parameter count",
                expected: self.param_count(),
                found: params.len(),
            });
        }
        if !params.iter().all(|p| p.is_finite()) {
            return Err(Error::NonFinite);
        }
        let mut at = 0;
        for l in &mut self.layers {
            let nw = l.w.len();
            l.w.copy_from_slice(&params[at..at + nw]);
            at += nw;
            let nb = l.b.len();
            l.b.copy_from_slice(&params[at..at + nb]);
            at += nb;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.w.iter().chain(&l.b).all(|p| p.is_finite()))
    }

    /// Rounds every parameter to the nearest `f32`.
    pub fn round_to_f32(&mut self) {
        for l in &mut self.layers {
            for p in l.w.iter_mut().chain(l.b.iter_mut()) {
                *p = f64::from(*p as f32);
            }
        }
    }

    /// Raw network outputs `(bgt₀, k, logit)` for an already normalized input.
    pub fn forward_raw(&self, x: &[f64]) -> Result<[f64; OUTPUTS]> {
        if x.len() != FEATURE_DIM {
            return Err(Error::Shape {
                what: "feature vector",
                expected: FEATURE_DIM,
                found: x.len(),
            });
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite);
        }
        let mut scratch = Activations::new(self);
        self.forward_cached(x, &mut scratch);
        let out = scratch.acts.last().expect("output layer");
        Ok([out[0], out[1], out[2]])
    }

    /// Interface outputs for an already normalized input.
    pub fn forward(&self, x: &FeatureVector) -> Result<Prediction> {
        let [b, k, z] = self.forward_raw(&x.0)?;
        Ok(Prediction {
            bgt0: b.clamp(0.0, 1.0),
            slope: k,
            streaming_prob: sigmoid(z),
        })
    }

    fn forward_cached(&self, x: &[f64], a: &mut Activations) {
        a.acts[0].copy_from_slice(x);
        let last = self.layers.len() - 1;
        for (li, layer) in self.layers.iter().enumerate() {
            let (lo, hi) = a.acts.split_at_mut(li + 1);
            let y = &mut hi[0];
            layer.forward_into(&lo[li], y);
            if li != last {
                y.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
    }
}

impl HeadPredictor for PredictorModel {
    fn predict(&self, fv: &FeatureVector) -> Result<Prediction> {
        if !fv.all_finite() {
            return Err(Error::NonFinite);
        }
        self.forward(&self.norms.normalize(fv)?)
    }
}

/// Per-layer outputs of one forward pass (post-activation for hidden layers).
struct Activations {
    acts: Vec<Vec<f64>>,
}

impl Activations {
    fn new(m: &PredictorModel) -> Self {
        Self {
            acts: m.widths().into_iter().map(|w| vec![0.0; w]).collect(),
        }
    }
}

/// Ground-truth head properties of one row.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Labels {
    pub bgt0: f64,
    pub slope: f64,
    pub streaming: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledRow {
    pub sample: u32,
    pub layer: u32,
    pub head: u32,
    pub step: u32,
    pub features: FeatureVector,
    pub labels: Labels,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainConfig {
    /// Loss weights for `bgt₀`, `k` and the streaming term.
    pub loss_weights: [f64; 3],
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    /// Cosine decay ends at `lr * lr_final_fraction`.
    pub lr_final_fraction: f64,
    pub seed: u64,
    pub val_fraction: f64,
    /// Training loss is recorded every this many steps.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss_weights: [1.0, 1.0, 1.0],
            batch_size: 128,
            steps: 1500,
            lr: 1e-3,
            lr_final_fraction: 0.05,
            seed: 0,
            val_fraction: 0.2,
            log_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.loss_weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(Error::InvalidConfig("loss weights must be positive".into()));
        }
        if self.batch_size == 0 || self.log_every == 0 {
            return Err(Error::InvalidConfig("batch size and log interval must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(0.0..=1.0).contains(&self.lr_final_fraction) {
            return Err(Error::InvalidConfig("learning rate out of range".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::InvalidConfig("validation fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }

    fn lr_at(&self, step: usize) -> f64 {
        let t = if self.steps <= 1 { 1.0 } else { step as f64 / (self.steps - 1) as f64 };
        let lo = self.lr * self.lr_final_fraction;
        lo + 0.5 * (self.lr - lo) * (1.0 + (core::f64::consts::PI * t).cos())
    }
}

/// Row indices of a train/validation split that never shares a sample id.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

/// Shuffles distinct sample ids with `seed` and assigns the first
/// `ceil(fraction · n)` to validation (at least one when `fraction > 0` and
/// there are two or more samples).
pub fn split_by_sample(rows: &[LabeledRow], fraction: f64, seed: u64) -> Split {
    let mut ids: Vec<u32> = rows.iter().map(|r| r.sample).collect();
    ids.sort_unstable();
    ids.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_5B11);
    ids.shuffle(&mut rng);
    let mut n_val = (fraction * ids.len() as f64).ceil() as usize;
    if ids.len() < 2 {
        n_val = 0;
    } else {
        n_val = n_val.min(ids.len() - 1);
    }
    let mut val_ids = ids[..n_val].to_vec();
    val_ids.sort_unstable();
    let mut split = Split {
        train: Vec::new(),
        validation: Vec::new(),
    };
    for (i, r) in rows.iter().enumerate() {
        if val_ids.binary_search(&r.sample).is_ok() {
            split.validation.push(i);
        } else {
            split.train.push(i);
        }
    }
    split
}

/// One training example in network space.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub input: [f64; FEATURE_DIM],
    /// `(bgt₀, k, streaming ∈ {0, 1})`.
    pub target: [f64; OUTPUTS],
}

/// Mean multi-task loss over `batch` and its gradient in
/// [`PredictorModel::flat_params`] order.
pub fn loss_and_gradient(
    model: &PredictorModel,
    batch: &[&Example],
    weights: [f64; 3],
) -> (f64, Vec<f64>) {
    let mut grads: Vec<Dense> = model
        .layers
        .iter()
        .map(|l| Dense::zeros(l.input, l.output))
        .collect();
    let loss = accumulate(model, batch, weights, &mut grads);
    let mut flat = Vec::with_capacity(model.param_count());
    for g in &grads {
        flat.extend_from_slice(&g.w);
        flat.extend_from_slice(&g.b);
    }
    (loss, flat)
}

/// Mean loss without gradients.
pub fn loss(model: &PredictorModel, batch: &[&Example], weights: [f64; 3]) -> f64 {
    if batch.is_empty() {
        return 0.0;
    }
    let mut a = Activations::new(model);
    let mut total = 0.0;
    for ex in batch {
        model.forward_cached(&ex.input, &mut a);
        total += row_loss(a.acts.last().expect("output"), &ex.target, weights);
    }
    total / batch.len() as f64
}

fn row_loss(out: &[f64], t: &[f64; OUTPUTS], w: [f64; 3]) -> f64 {
    let d0 = out[0] - t[0];
    let d1 = out[1] - t[1];
    w[0] * d0 * d0 + w[1] * d1 * d1 + w[2] * (softplus(out[2]) - t[2] * out[2])
}

/// Adds the gradient of the mean loss into `grads`; returns the mean loss.
fn accumulate(model: &PredictorModel, batch: &[&Example], w: [f64; 3], grads: &mut [Dense]) -> f64 {
    if batch.is_empty() {
        return 0.0;
    }
    let inv_n = 1.0 / batch.len() as f64;
    let mut a = Activations::new(model);
    let mut deltas: Vec<Vec<f64>> = model.layers.iter().map(|l| vec![0.0; l.output]).collect();
    let mut total = 0.0;
    for ex in batch {
        model.forward_cached(&ex.input, &mut a);
        let out = a.acts.last().expect("output");
        total += row_loss(out, &ex.target, w);
        let last = deltas.len() - 1;
        deltas[last][0] = 2.0 * w[0] * (out[0] - ex.target[0]) * inv_n;
        deltas[last][1] = 2.0 * w[1] * (out[1] - ex.target[1]) * inv_n;
        deltas[last][2] = w[2] * (sigmoid(out[2]) - ex.target[2]) * inv_n;

        for li in (0..model.layers.len()).rev() {
            let layer = &model.layers[li];
            let x = &a.acts[li];
            let (lower, upper) = deltas.split_at_mut(li);
            let delta = &upper[0];
            let g = &mut grads[li];
            for (gb, d) in g.b.iter_mut().zip(delta) {
                *gb += d;
            }
            for (i, &xi) in x.iter().enumerate() {
                if xi == 0.0 {
                    continue;
                }
                let row = &mut g.w[i * layer.output..(i + 1) * layer.output];
                for (gw, d) in row.iter_mut().zip(delta) {
                    *gw += xi * d;
                }
            }
            if li > 0 {
                // Back through W and the ReLU of the layer below.
                let prev = &mut lower[li - 1];
                for (i, p) in prev.iter_mut().enumerate() {
                    if x[i] <= 0.0 {
                        *p = 0.0;
                        continue;
                    }
                    let row = &layer.w[i * layer.output..(i + 1) * layer.output];
                    *p = row.iter().zip(delta).map(|(wv, d)| wv * d).sum();
                }
            }
        }
    }
    total * inv_n
}

struct Adam {
    m: Vec<Dense>,
    v: Vec<Dense>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(model: &PredictorModel) -> Self {
        let z = || model.layers.iter().map(|l| Dense::zeros(l.input, l.output)).collect();
        Self { m: z(), v: z(), t: 0 }
    }

    fn step(&mut self, model: &mut PredictorModel, grads: &[Dense], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for (li, layer) in model.layers.iter_mut().enumerate() {
            let g = &grads[li];
            let m = &mut self.m[li];
            let v = &mut self.v[li];
            let pairs = layer
                .w
                .iter_mut()
                .zip(&g.w)
                .zip(m.w.iter_mut().zip(v.w.iter_mut()))
                .chain(layer.b.iter_mut().zip(&g.b).zip(m.b.iter_mut().zip(v.b.iter_mut())));
            for ((p, &gi), (mi, vi)) in pairs {
                *mi = Self::B1 * *mi + (1.0 - Self::B1) * gi;
                *vi = Self::B2 * *vi + (1.0 - Self::B2) * gi * gi;
                *p -= lr * (*mi / c1) / ((*vi / c2).sqrt() + Self::EPS);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainReport {
    /// `(step, mean batch loss)` in standardized target units.
    pub train_curve: Vec<(usize, f64)>,
    pub initial_val_loss: f64,
    pub final_val_loss: f64,
    pub train_rows: usize,
    pub val_rows: usize,
    pub train_samples: Vec<u32>,
    pub val_samples: Vec<u32>,
    /// Mean and std of the `(bgt₀, k)` targets on the training split.
    pub target_mean: [f64; 2],
    pub target_std: [f64; 2],
}

fn sample_ids(rows: &[LabeledRow], idx: &[usize]) -> Vec<u32> {
    let mut v: Vec<u32> = idx.iter().map(|&i| rows[i].sample).collect();
    v.sort_unstable();
    v.dedup();
    v
}

fn mean_std(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count().max(1) as f64;
    let m = xs.clone().sum::<f64>() / n;
    let v = xs.map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, v.sqrt())
}

/// Trains on the sample-disjoint training split of `rows`.
pub fn train(rows: &[LabeledRow], cfg: &TrainConfig) -> Result<(PredictorModel, TrainReport)> {
    cfg.validate()?;
    if rows.is_empty() {
        return Err(Error::NoData);
    }
    if rows.iter().any(|r| !r.features.all_finite()) {
        return Err(Error::NonFinite);
    }
    let split = split_by_sample(rows, cfg.val_fraction, cfg.seed);
    let norms = FeatureNorms::fit(split.train.iter().map(|&i| &rows[i].features))?;

    let (mb, sb) = mean_std(split.train.iter().map(|&i| rows[i].labels.bgt0));
    let (mk, sk) = mean_std(split.train.iter().map(|&i| rows[i].labels.slope));
    let tmean = [mb, mk];
    // Constant targets are only shifted.
    let tstd = [if sb > 1e-12 { sb } else { 1.0 }, if sk > 1e-12 { sk } else { 1.0 }];

    let to_example = |r: &LabeledRow| -> Result<Example> {
        Ok(Example {
            input: norms.normalize(&r.features)?.0,
            target: [
                (r.labels.bgt0 - tmean[0]) / tstd[0],
                (r.labels.slope - tmean[1]) / tstd[1],
                if r.labels.streaming { 1.0 } else { 0.0 },
            ],
        })
    };
    let train_ex: Vec<Example> = split.train.iter().map(|&i| to_example(&rows[i])).collect::<Result<_>>()?;
    let val_ex: Vec<Example> = split.validation.iter().map(|&i| to_example(&rows[i])).collect::<Result<_>>()?;
    let val_refs: Vec<&Example> = val_ex.iter().collect();

    let mut model = PredictorModel::init(cfg.seed);
    model.norms = norms;
    let eval_set: Vec<&Example> = if val_refs.is_empty() { train_ex.iter().collect() } else { val_refs };
    let initial_val_loss = loss(&model, &eval_set, cfg.loss_weights);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..train_ex.len()).collect();
    let mut cursor = order.len();
    let mut adam = Adam::new(&model);
    let mut grads: Vec<Dense> = model.layers.iter().map(|l| Dense::zeros(l.input, l.output)).collect();
    let mut curve = Vec::new();
    let mut window = 0.0;
    let mut window_n = 0usize;
    let mut batch: Vec<&Example> = Vec::with_capacity(cfg.batch_size);

    for step in 0..cfg.steps {
        batch.clear();
        while batch.len() < cfg.batch_size.min(train_ex.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&train_ex[order[cursor]]);
            cursor += 1;
        }
        for g in &mut grads {
            g.w.iter_mut().for_each(|x| *x = 0.0);
            g.b.iter_mut().for_each(|x| *x = 0.0);
        }
        let l = accumulate(&model, &batch, cfg.loss_weights, &mut grads);
        adam.step(&mut model, &grads, cfg.lr_at(step));
        window += l;
        window_n += 1;
        if (step + 1) % cfg.log_every == 0 || step + 1 == cfg.steps {
            curve.push((step + 1, window / window_n as f64));
            window = 0.0;
            window_n = 0;
        }
    }
    let final_val_loss = loss(&model, &eval_set, cfg.loss_weights);
    if !model.all_finite() {
        return Err(Error::NonFinite);
    }

    // Fold target standardization into the output layer.
    let out = model.layers.last_mut().expect("output layer");
    for j in 0..2 {
        for i in 0..out.input {
            out.w[i * out.output + j] *= tstd[j];
        }
        out.b[j] = out.b[j] * tstd[j] + tmean[j];
    }
    model.round_to_f32();

    let report = TrainReport {
        train_curve: curve,
        initial_val_loss,
        final_val_loss,
        train_rows: split.train.len(),
        val_rows: split.validation.len(),
        train_samples: sample_ids(rows, &split.train),
        val_samples: sample_ids(rows, &split.validation),
        target_mean: tmean,
        target_std: tstd,
    };
    Ok((model, report))
}

/// Predicts the training means regardless of input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanPredictor {
    pub bgt0: f64,
    pub slope: f64,
    pub streaming_rate: f64,
}

impl MeanPredictor {
    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a LabeledRow>) -> Result<Self> {
        let (mut n, mut b, mut k, mut s) = (0usize, 0.0, 0.0, 0.0);
        for r in rows {
            n += 1;
            b += r.labels.bgt0;
            k += r.labels.slope;
            s += if r.labels.streaming { 1.0 } else { 0.0 };
        }
        if n == 0 {
            return Err(Error::NoData);
        }
        let n = n as f64;
        Ok(Self {
            bgt0: b / n,
            slope: k / n,
            streaming_rate: s / n,
        })
    }
}

impl HeadPredictor for MeanPredictor {
    fn predict(&self, _fv: &FeatureVector) -> Result<Prediction> {
        Ok(Prediction {
            bgt0: self.bgt0.clamp(0.0, 1.0),
            slope: self.slope,
            streaming_prob: self.streaming_rate,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Metrics {
    pub rows: usize,
    pub mse_bgt0: f64,
    pub mse_k: f64,
    /// Fraction of rows whose thresholded (0.5) streaming call is right.
    pub s_accuracy: f64,
    /// Area under the ROC curve; 0.5 when only one class is present.
    pub s_auc: f64,
}

pub fn evaluate<P: HeadPredictor + ?Sized>(predictor: &P, rows: &[LabeledRow]) -> Result<Metrics> {
    if rows.is_empty() {
        return Err(Error::NoData);
    }
    let mut scored: Vec<(f64, bool)> = Vec::with_capacity(rows.len());
    let (mut eb, mut ek, mut correct) = (0.0, 0.0, 0usize);
    for r in rows {
        let p = predictor.predict(&r.features)?;
        eb += (p.bgt0 - r.labels.bgt0).powi(2);
        ek += (p.slope - r.labels.slope).powi(2);
        if (p.streaming_prob >= 0.5) == r.labels.streaming {
            correct += 1;
        }
        scored.push((p.streaming_prob, r.labels.streaming));
    }
    let n = rows.len() as f64;
    Ok(Metrics {
        rows: rows.len(),
        mse_bgt0: eb / n,
        mse_k: ek / n,
        s_accuracy: correct as f64 / n,
        s_auc: auc(&mut scored),
    })
}

/// Mann-Whitney AUC with average ranks for tied scores.
fn auc(scored: &mut [(f64, bool)]) -> f64 {
    let pos = scored.iter().filter(|s| s.1).count();
    let neg = scored.len() - pos;
    if pos == 0 || neg == 0 {
        return 0.5;
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < scored.len() {
        let mut j = i;
        while j + 1 < scored.len() && scored[j + 1].0 == scored[i].0 {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg_rank * scored[i..=j].iter().filter(|s| s.1).count() as f64;
        i = j + 1;
    }
    let p = pos as f64;
    (rank_sum - p * (p + 1.0) / 2.0) / (p * neg as f64)
}
