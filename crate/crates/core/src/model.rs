//! Per-voxel segmenter: fixed multi-scale features feeding a one-hidden-layer
//! tanh network, trained with Adam under any loss family.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Dims, Mask, Volume};
use crate::lesions::{label_components, lesion_table, Connectivity};
use crate::loss::{sigmoid, voxel_term, LossKind};
use crate::metrics::{self, DetectionConfig, OperatingReport};
use crate::par;
use crate::weighting::{weight_map, WeightMap, WeightScheme};

/// Features per voxel: intensity, box means at radii 1, 2 and 4, local
/// standard deviation at radius 2, gradient magnitude, and a constant 1.
pub const FEATURES: usize = 7;
pub const BIAS_FEATURE: usize = FEATURES - 1;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    dims: Dims,
    /// Voxel-major: feature `f` of voxel `i` lives at `i * FEATURES + f`.
    data: Vec<f64>,
}

impl FeatureStack {
    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn voxel(&self, i: usize) -> &[f64] {
        &self.data[i * FEATURES..(i + 1) * FEATURES]
    }

    pub fn len(&self) -> usize {
        self.dims.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Summed-volume table with one layer of zero padding on the low side.
struct IntegralVolume {
    dims: Dims,
    table: Vec<f64>,
}

impl IntegralVolume {
    fn new(dims: Dims, values: impl Fn(usize) -> f64) -> Self {
        let (px, py, pz) = (dims.nx + 1, dims.ny + 1, dims.nz + 1);
        let mut table = vec![0.0; px * py * pz];
        let at = |x: usize, y: usize, z: usize| x + px * (y + py * z);
        for z in 1..pz {
            for y in 1..py {
                for x in 1..px {
                    let v = values(dims.index_unchecked(x - 1, y - 1, z - 1));
                    table[at(x, y, z)] = v + table[at(x - 1, y, z)] + table[at(x, y - 1, z)]
                        + table[at(x, y, z - 1)]
                        - table[at(x - 1, y - 1, z)]
                        - table[at(x - 1, y, z - 1)]
                        - table[at(x, y - 1, z - 1)]
                        + table[at(x - 1, y - 1, z - 1)];
                }
            }
        }
        Self { dims, table }
    }

    /// Sum over the box of radius `r` centred on `(x, y, z)`, clipped to the grid.
    fn box_sum(&self, x: usize, y: usize, z: usize, r: usize) -> f64 {
        let (px, py) = (self.dims.nx + 1, self.dims.ny + 1);
        let at = |x: usize, y: usize, z: usize| self.table[x + px * (y + py * z)];
        let (x0, y0, z0) = (x.saturating_sub(r), y.saturating_sub(r), z.saturating_sub(r));
        let x1 = (x + r + 1).min(self.dims.nx);
        let y1 = (y + r + 1).min(self.dims.ny);
        let z1 = (z + r + 1).min(self.dims.nz);
        at(x1, y1, z1) - at(x0, y1, z1) - at(x1, y0, z1) - at(x1, y1, z0) + at(x0, y0, z1)
            + at(x0, y1, z0)
            + at(x1, y0, z0)
            - at(x0, y0, z0)
    }
}

/// Computes the feature stack; borders are zero padded.
pub fn extract_features(image: &Volume) -> FeatureStack {
    let dims = image.dims();
    let img = image.data();
    let sum = IntegralVolume::new(dims, |i| img[i] as f64);
    let sum_sq = IntegralVolume::new(dims, |i| {
        let v = img[i] as f64;
        v * v
    });
    let at = |x: isize, y: isize, z: isize| -> f64 {
        if x < 0 || y < 0 || z < 0 || x >= dims.nx as isize || y >= dims.ny as isize || z >= dims.nz as isize {
            0.0
        } else {
            img[dims.index_unchecked(x as usize, y as usize, z as usize)] as f64
        }
    };
    let box_volume = |r: usize| ((2 * r + 1) * (2 * r + 1) * (2 * r + 1)) as f64;
    let mut data = Vec::with_capacity(dims.len() * FEATURES);
    for i in 0..dims.len() {
        let (x, y, z) = dims.coords(i);
        let mean1 = sum.box_sum(x, y, z, 1) / box_volume(1);
        let mean2 = sum.box_sum(x, y, z, 2) / box_volume(2);
        let mean4 = sum.box_sum(x, y, z, 4) / box_volume(4);
        let sq2 = sum_sq.box_sum(x, y, z, 2) / box_volume(2);
        let sd2 = (sq2 - mean2 * mean2).max(0.0).sqrt();
        let (xi, yi, zi) = (x as isize, y as isize, z as isize);
        let gx = (at(xi + 1, yi, zi) - at(xi - 1, yi, zi)) / 2.0;
        let gy = (at(xi, yi + 1, zi) - at(xi, yi - 1, zi)) / 2.0;
        let gz = (at(xi, yi, zi + 1) - at(xi, yi, zi - 1)) / 2.0;
        let grad = (gx * gx + gy * gy + gz * gz).sqrt();
        data.extend_from_slice(&[img[i] as f64, mean1, mean2, mean4, sd2, grad, 1.0]);
    }
    FeatureStack { dims, data }
}

/// Per-feature affine standardisation fitted on a training split. The bias
/// feature is left untouched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl Standardizer {
    pub fn identity() -> Self {
        Self {
            mean: vec![0.0; FEATURES],
            sd: vec![1.0; FEATURES],
        }
    }

    pub fn fit(stacks: &[FeatureStack]) -> Self {
        let mut sum = [0.0f64; FEATURES];
        let mut sum_sq = [0.0f64; FEATURES];
        let mut n = 0usize;
        for s in stacks {
            for v in s.data.chunks_exact(FEATURES) {
                for f in 0..FEATURES {
                    sum[f] += v[f];
                    sum_sq[f] += v[f] * v[f];
                }
            }
            n += s.len();
        }
        let mut out = Self::identity();
        if n == 0 {
            return out;
        }
        for f in 0..BIAS_FEATURE {
            let mean = sum[f] / n as f64;
            let var = (sum_sq[f] / n as f64 - mean * mean).max(0.0);
            out.mean[f] = mean;
            out.sd[f] = if var > 1e-24 { var.sqrt() } else { 1.0 };
        }
        out
    }

    pub fn apply(&self, stack: &mut FeatureStack) {
        for v in stack.data.chunks_exact_mut(FEATURES) {
            for f in 0..BIAS_FEATURE {
                v[f] = (v[f] - self.mean[f]) / self.sd[f];
            }
        }
    }
}

/// Network parameters stored flat as `[W1 (F x H, row-major), b1, w2, b2]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    hidden: usize,
    flat: Vec<f64>,
}

impl MlpParams {
    pub fn zeros(hidden: usize) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::Config("hidden width must be at least 1".into()));
        }
        Ok(Self {
            hidden,
            flat: vec![0.0; Self::param_count(hidden)],
        })
    }

    pub fn param_count(hidden: usize) -> usize {
        FEATURES * hidden + 2 * hidden + 1
    }

    /// `W1`, `w2` uniform in `±1/sqrt(fan_in)`, biases zero.
    pub fn init(hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut p = Self::zeros(hidden)?;
        let a1 = 1.0 / (FEATURES as f64).sqrt();
        for w in p.w1_mut() {
            *w = rng.random_range(-a1..a1);
        }
        let a2 = 1.0 / (hidden as f64).sqrt();
        for w in p.w2_mut() {
            *w = rng.random_range(-a2..a2);
        }
        Ok(p)
    }

    pub fn from_parts(hidden: usize, w1: &[f64], b1: &[f64], w2: &[f64], b2: f64) -> Result<Self> {
        if hidden == 0 || w1.len() != FEATURES * hidden || b1.len() != hidden || w2.len() != hidden {
            return Err(Error::Config(format!(
                "parameter shapes do not match hidden width {hidden}"
            )));
        }
        let mut flat = Vec::with_capacity(Self::param_count(hidden));
        flat.extend_from_slice(w1);
        flat.extend_from_slice(b1);
        flat.extend_from_slice(w2);
        flat.push(b2);
        Ok(Self { hidden, flat })
    }

    pub fn from_flat(hidden: usize, flat: Vec<f64>) -> Result<Self> {
        if hidden == 0 || flat.len() != Self::param_count(hidden) {
            return Err(Error::Config(format!(
                "expected {} parameters for hidden width {hidden}, got {}",
                Self::param_count(hidden.max(1)),
                flat.len()
            )));
        }
        Ok(Self { hidden, flat })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn flat(&self) -> &[f64] {
        &self.flat
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.flat
    }

    pub fn w1(&self) -> &[f64] {
        &self.flat[..FEATURES * self.hidden]
    }

    fn w1_mut(&mut self) -> &mut [f64] {
        let h = self.hidden;
        &mut self.flat[..FEATURES * h]
    }

    pub fn b1(&self) -> &[f64] {
        let h = self.hidden;
        &self.flat[FEATURES * h..FEATURES * h + h]
    }

    pub fn w2(&self) -> &[f64] {
        let h = self.hidden;
        &self.flat[FEATURES * h + h..FEATURES * h + 2 * h]
    }

    fn w2_mut(&mut self) -> &mut [f64] {
        let h = self.hidden;
        &mut self.flat[FEATURES * h + h..FEATURES * h + 2 * h]
    }

    pub fn b2(&self) -> f64 {
        *self.flat.last().expect("non-empty parameters")
    }

    fn check_finite(&self) -> Result<()> {
        match self.flat.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(Error::NonFinite { index }),
            None => Ok(()),
        }
    }

    /// Logit of a single feature vector; `hidden_out` receives the activations.
    #[inline]
    fn logit_into(&self, x: &[f64], hidden_out: &mut [f64]) -> f64 {
        let h = self.hidden;
        let (w1, rest) = self.flat.split_at(FEATURES * h);
        let (b1, rest) = rest.split_at(h);
        let (w2, b2) = rest.split_at(h);
        hidden_out.copy_from_slice(b1);
        for (f, &xf) in x.iter().enumerate() {
            let row = &w1[f * h..(f + 1) * h];
            for (a, &w) in hidden_out.iter_mut().zip(row) {
                *a += xf * w;
            }
        }
        let mut z = b2[0];
        for (a, &w) in hidden_out.iter_mut().zip(w2) {
            *a = a.tanh();
            z += *a * w;
        }
        z
    }
}

/// Per-voxel logits in 64-bit precision.
pub fn forward_logits(params: &MlpParams, features: &FeatureStack) -> Result<Vec<f64>> {
    params.check_finite()?;
    let parts = par::map_chunks(features.len(), |r| {
        let mut hidden = vec![0.0; params.hidden];
        r.map(|i| params.logit_into(features.voxel(i), &mut hidden))
            .collect::<Vec<_>>()
    });
    Ok(parts.concat())
}

/// Logit volume (stored as f32).
pub fn forward(params: &MlpParams, features: &FeatureStack) -> Result<Volume> {
    let z = forward_logits(params, features)?;
    Volume::new(features.dims, z.into_iter().map(|v| v as f32).collect())
}

/// Foreground probability volume.
pub fn predict_proba(params: &MlpParams, features: &FeatureStack) -> Result<Volume> {
    let z = forward_logits(params, features)?;
    Volume::new(features.dims, z.into_iter().map(|v| sigmoid(v) as f32).collect())
}

/// One training example: features, target and optional voxel weights.
pub struct Example<'a> {
    pub features: &'a FeatureStack,
    pub target: &'a Mask,
    pub weights: Option<&'a WeightMap>,
}

/// Loss summed over the example's voxels and the matching parameter gradient
/// sum, both scaled by `scale`.
fn example_grad(params: &MlpParams, ex: &Example<'_>, kind: LossKind, scale: f64) -> (f64, Vec<f64>) {
    let h = params.hidden;
    let np = params.flat.len();
    let weights = ex.weights.map(|w| w.weights());
    let target = ex.target.data();
    let parts = par::map_chunks(ex.features.len(), |r| {
        let mut grad = vec![0.0; np];
        let mut hidden = vec![0.0; h];
        let mut loss = 0.0;
        for i in r {
            let x = ex.features.voxel(i);
            let z = params.logit_into(x, &mut hidden);
            let w = weights.map_or(1.0, |w| w[i] as f64);
            let (l, g) = voxel_term(kind, z, target[i], w);
            loss += l;
            let g = g * scale;
            let (gw1, rest) = grad.split_at_mut(FEATURES * h);
            let (gb1, rest) = rest.split_at_mut(h);
            let (gw2, gb2) = rest.split_at_mut(h);
            gb2[0] += g;
            let w2 = params.w2();
            for k in 0..h {
                let a = hidden[k];
                gw2[k] += g * a;
                let d = g * w2[k] * (1.0 - a * a);
                gb1[k] += d;
                hidden[k] = d;
            }
            for (f, &xf) in x.iter().enumerate() {
                let row = &mut gw1[f * h..(f + 1) * h];
                for (gw, &d) in row.iter_mut().zip(hidden.iter()) {
                    *gw += xf * d;
                }
            }
        }
        (loss * scale, grad)
    });
    let mut loss = 0.0;
    let mut grad = vec![0.0; np];
    for (l, g) in parts {
        loss += l;
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    (loss, grad)
}

/// Mean loss over every voxel of `batch` and its exact parameter gradient.
pub fn backward(params: &MlpParams, batch: &[Example<'_>], kind: LossKind) -> Result<(f64, Vec<f64>)> {
    params.check_finite()?;
    for ex in batch {
        ex.features.dims.ensure_same(&ex.target.dims())?;
        if let Some(w) = ex.weights {
            w.dims().ensure_same(&ex.target.dims())?;
        }
        if kind == LossKind::WeightedBce && ex.weights.is_none() {
            return Err(Error::Config("weighted_bce requires a weight map".into()));
        }
    }
    let n: usize = batch.iter().map(|ex| ex.features.len()).sum();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let scale = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; params.flat.len()];
    for ex in batch {
        let (l, g) = example_grad(params, ex, kind, scale);
        loss += l;
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(config: AdamConfig, n: usize) -> Self {
        Self {
            config,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        let c = self.config;
        self.t += 1;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * grad[i];
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub epochs: usize,
    /// Volumes per optimisation step.
    pub minibatch: usize,
    pub hidden: usize,
    pub seed: u64,
    pub loss: LossKind,
    pub scheme: WeightScheme,
    pub detection: DetectionConfig,
    pub taus: Vec<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            epochs: 30,
            minibatch: 2,
            hidden: 16,
            seed: 0,
            loss: LossKind::Bce,
            scheme: WeightScheme::Uniform,
            detection: DetectionConfig::default(),
            taus: metrics::default_tau_grid(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let a = &self.adam;
        if !(a.learning_rate >= 0.0 && a.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be >= 0, got {}", a.learning_rate)));
        }
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || a.epsilon <= 0.0 {
            return Err(Error::Config("invalid Adam hyperparameters".into()));
        }
        if self.epochs == 0 || self.minibatch == 0 || self.hidden == 0 {
            return Err(Error::Config("epochs, minibatch and hidden must be positive".into()));
        }
        if self.taus.is_empty() {
            return Err(Error::Config("threshold grid is empty".into()));
        }
        self.detection.validate()
    }

    pub fn loss_name(&self) -> String {
        match (self.loss, self.scheme) {
            (LossKind::Bce, _) => "bce".into(),
            (LossKind::Wbce { .. }, _) => "wbce".into(),
            (LossKind::Focal { .. }, _) => "focal".into(),
            (LossKind::WeightedBce, WeightScheme::Lsr(_)) => "lsr".into(),
            (LossKind::WeightedBce, WeightScheme::Inverse) => "iw".into(),
            (LossKind::WeightedBce, WeightScheme::Uniform) => "weighted_bce(uniform)".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_voxel_f1: f64,
    pub val_simultaneous_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub dims: Dims,
    pub params: MlpParams,
    pub standardizer: Standardizer,
    pub best_epoch: usize,
    pub val_report: Option<OperatingReport>,
    pub log: Vec<EpochLog>,
}

impl TrainedModel {
    pub fn features(&self, image: &Volume) -> FeatureStack {
        let mut s = extract_features(image);
        self.standardizer.apply(&mut s);
        s
    }

    pub fn predict(&self, image: &Volume) -> Result<Volume> {
        predict_proba(&self.params, &self.features(image))
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn write_log_csv<W: std::io::Write>(log: &[EpochLog], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "train_loss", "val_voxel_f1", "val_simultaneous_f1"])?;
    for e in log {
        w.write_record([
            e.epoch.to_string(),
            format!("{:.9}", e.train_loss),
            format!("{:.6}", e.val_voxel_f1),
            format!("{:.6}", e.val_simultaneous_f1),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// Voxel weight map of `truth` under `scheme`, lesions from 26-connectivity.
pub fn truth_weight_map(truth: &Mask, scheme: WeightScheme, connectivity: Connectivity) -> Result<WeightMap> {
    let labels = label_components(truth, connectivity);
    let table = lesion_table(&labels);
    weight_map(&labels, &table, scheme)
}

/// `#background / #foreground` over a set of masks.
pub fn class_frequency_pos_weight(masks: &[&Mask]) -> Result<f64> {
    let fg: usize = masks.iter().map(|m| m.foreground_count()).sum();
    let total: usize = masks.iter().map(|m| m.data().len()).sum();
    if fg == 0 {
        return Err(Error::Domain("no foreground voxels to derive pos_weight from".into()));
    }
    Ok((total - fg) as f64 / fg as f64)
}

/// Image/mask pair used for training or evaluation.
pub struct LabelledImage<'a> {
    pub image: &'a Volume,
    pub truth: &'a Mask,
}

/// Trains from seeded initialisation; returns the parameters of the epoch
/// with the best validation simultaneous F1 (earliest on ties).
pub fn train(train_set: &[LabelledImage<'_>], val_set: &[LabelledImage<'_>], config: &TrainConfig) -> Result<TrainedModel> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let dims = train_set[0].image.dims();
    for s in train_set.iter().chain(val_set) {
        s.image.dims().ensure_same(&s.truth.dims())?;
    }

    let mut train_features: Vec<FeatureStack> = par::map_slice(train_set, |s| extract_features(s.image));
    let standardizer = Standardizer::fit(&train_features);
    for f in &mut train_features {
        standardizer.apply(f);
    }
    let val_features: Vec<FeatureStack> = par::map_slice(val_set, |s| {
        let mut f = extract_features(s.image);
        standardizer.apply(&mut f);
        f
    });

    let weight_maps: Vec<Option<WeightMap>> = if config.loss == LossKind::WeightedBce {
        train_set
            .iter()
            .map(|s| truth_weight_map(s.truth, config.scheme, config.detection.connectivity).map(Some))
            .collect::<Result<_>>()?
    } else {
        train_set.iter().map(|_| None).collect()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = MlpParams::init(config.hidden, &mut rng)?;
    let mut adam = Adam::new(config.adam, params.flat.len());
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, MlpParams, OperatingReport)> = None;
    let mut step = 0usize;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.minibatch) {
            step += 1;
            let batch: Vec<Example<'_>> = chunk
                .iter()
                .map(|&k| Example {
                    features: &train_features[k],
                    target: train_set[k].truth,
                    weights: weight_maps[k].as_ref(),
                })
                .collect();
            let (loss, grad) = backward(&params, &batch, config.loss)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                let max_weight = chunk
                    .iter()
                    .filter_map(|&k| weight_maps[k].as_ref().map(|w| w.max_weight()))
                    .fold(1.0, f64::max);
                return Err(Error::NumericalAbort {
                    step,
                    loss: config.loss_name(),
                    max_weight,
                });
            }
            adam.step(&mut params.flat, &grad);
            loss_sum += loss;
            batches += 1;
        }

        let (val_voxel_f1, val_simultaneous_f1, report) = if val_set.is_empty() {
            (f64::NAN, f64::NAN, None)
        } else {
            let probs = val_features
                .iter()
                .map(|f| predict_proba(&params, f))
                .collect::<Result<Vec<_>>>()?;
            let truths: Vec<Mask> = val_set.iter().map(|s| s.truth.clone()).collect();
            let mut voxel = metrics::VoxelCounts::default();
            for (p, t) in probs.iter().zip(&truths) {
                voxel += metrics::voxel_counts(p, t, 0.5)?;
            }
            let rows = metrics::sweep_curves(&probs, &truths, &config.taus, &config.detection)?;
            let report = metrics::operating_report(&rows)?;
            (voxel.rates().f1, report.simultaneous_f1, Some(report))
        };
        log.push(EpochLog {
            epoch,
            train_loss: loss_sum / batches as f64,
            val_voxel_f1,
            val_simultaneous_f1,
        });
        let score = if val_simultaneous_f1.is_nan() { f64::NEG_INFINITY } else { val_simultaneous_f1 };
        let better = match &best {
            None => true,
            Some((s, ..)) => score > *s || (val_set.is_empty() && epoch == config.epochs),
        };
        if better {
            best = Some((score, epoch, params.clone(), report.unwrap_or(EMPTY_REPORT)));
        }
    }

    let (_, best_epoch, params, report) = best.expect("at least one epoch");
    Ok(TrainedModel {
        dims,
        params,
        standardizer,
        best_epoch,
        val_report: if val_set.is_empty() { None } else { Some(report) },
        log,
    })
}

const EMPTY_REPORT: OperatingReport = OperatingReport {
    tau_seg: 0.0,
    tau_det: 0.0,
    gap: 0.0,
    f1_seg: 0.0,
    f1_det: 0.0,
    simultaneous_f1: 0.0,
    tau_star: 0.0,
    voxel_f1_at_star: 0.0,
    det_f1_at_star: 0.0,
    det_small_f1_at_star: 0.0,
};
