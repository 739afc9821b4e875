//! Loss values and analytic logit gradients.
//!
//! All families are evaluated on logits through the signed margin
//! `s = z` (target 1) or `s = -z` (target 0). With `q = sigmoid(-s)` the
//! cross-entropy term is `softplus(-s)` and its derivative is `-q`; focal
//! loss multiplies the term by `q^gamma`. Values are averaged over every
//! voxel, so background contributions are identical across weight schemes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Mask, Volume};
use crate::par;
use crate::weighting::WeightMap;

pub const DEFAULT_EPSILON: f64 = 1e-7;
pub const DEFAULT_FOCAL_GAMMA: f64 = 2.0;

/// Loss family. `WeightedBce` takes its per-voxel weights from a [`WeightMap`]
/// supplied alongside the logits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum LossKind {
    Bce,
    Wbce { pos_weight: f64 },
    Focal { gamma: f64 },
    WeightedBce,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    /// Clamp for log arguments when probabilities are supplied directly.
    pub epsilon: f64,
}

impl LossSpec {
    pub fn new(kind: LossKind) -> Result<Self> {
        Self::with_epsilon(kind, DEFAULT_EPSILON)
    }

    pub fn with_epsilon(kind: LossKind, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon <= 1e-3) {
            return Err(Error::Config(format!("epsilon must lie in (0, 1e-3], got {epsilon}")));
        }
        match kind {
            LossKind::Wbce { pos_weight } if !(pos_weight.is_finite() && pos_weight > 0.0) => {
                return Err(Error::Config(format!("pos_weight must be > 0, got {pos_weight}")));
            }
            LossKind::Focal { gamma } if !(gamma.is_finite() && gamma >= 0.0) => {
                return Err(Error::Config(format!("gamma must be >= 0, got {gamma}")));
            }
            _ => {}
        }
        Ok(Self { kind, epsilon })
    }

    pub fn bce() -> Self {
        Self {
            kind: LossKind::Bce,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub value: f64,
    /// Derivative of `value` with respect to each logit.
    pub grad: Vec<f64>,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^t)` without overflow.
pub fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

/// Unnormalised loss term and its logit derivative for one voxel.
///
/// `weight` is only read by [`LossKind::WeightedBce`].
#[inline]
pub fn voxel_term(kind: LossKind, logit: f64, target: u8, weight: f64) -> (f64, f64) {
    let positive = target == 1;
    let s = if positive { logit } else { -logit };
    let q = sigmoid(-s);
    let ce = softplus(-s);
    let (value, ds) = match kind {
        LossKind::Bce => (ce, -q),
        LossKind::Wbce { pos_weight } => {
            let c = if positive { pos_weight } else { 1.0 };
            (c * ce, -c * q)
        }
        LossKind::WeightedBce => (weight * ce, -weight * q),
        LossKind::Focal { gamma } => {
            let m = q.powf(gamma);
            (m * ce, -m * (gamma * (1.0 - q) * ce + q))
        }
    };
    (value, if positive { ds } else { -ds })
}

fn check_inputs(logits: &[f64], target: &[u8], weights: Option<&[f32]>, kind: LossKind) -> Result<()> {
    if logits.len() != target.len() {
        return Err(Error::ShapeMismatch {
            expected: target.len(),
            found: logits.len(),
        });
    }
    if let Some(index) = logits.iter().position(|z| !z.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    match (kind, weights) {
        (LossKind::WeightedBce, None) => Err(Error::Config(
            "weighted_bce requires a weight map".into(),
        )),
        (_, Some(w)) if w.len() != target.len() => Err(Error::ShapeMismatch {
            expected: target.len(),
            found: w.len(),
        }),
        _ => Ok(()),
    }
}

/// Mean loss and per-logit gradient over a flat voxel array.
pub fn loss_value_grad_slice(
    logits: &[f64],
    target: &[u8],
    kind: LossKind,
    weights: Option<&[f32]>,
) -> Result<LossResult> {
    check_inputs(logits, target, weights, kind)?;
    let n = logits.len();
    let inv_n = 1.0 / n as f64;
    let parts = par::map_chunks(n, |r| {
        let mut sum = 0.0;
        let mut grad = Vec::with_capacity(r.len());
        for i in r {
            let w = weights.map_or(1.0, |w| w[i] as f64);
            let (v, g) = voxel_term(kind, logits[i], target[i], w);
            sum += v;
            grad.push(g * inv_n);
        }
        (sum, grad)
    });
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(n);
    for (s, g) in parts {
        total += s;
        grad.extend(g);
    }
    Ok(LossResult {
        value: total * inv_n,
        grad,
    })
}

/// Mean loss and gradient for a logit volume against a target mask.
pub fn loss_value_grad(
    logits: &Volume,
    target: &Mask,
    spec: &LossSpec,
    weights: Option<&WeightMap>,
) -> Result<LossResult> {
    logits.dims().ensure_same(&target.dims())?;
    if let Some(w) = weights {
        w.dims().ensure_same(&target.dims())?;
    }
    let z: Vec<f64> = logits.data().iter().map(|&v| v as f64).collect();
    loss_value_grad_slice(&z, target.data(), spec.kind, weights.map(|w| w.weights()))
}

/// Mean (weighted) cross entropy of probabilities clamped to `[eps, 1 - eps]`.
pub fn bce_from_probabilities(prob: &[f64], target: &[u8], weights: Option<&[f32]>, eps: f64) -> Result<f64> {
    if prob.len() != target.len() {
        return Err(Error::ShapeMismatch {
            expected: target.len(),
            found: prob.len(),
        });
    }
    let total: Vec<f64> = prob
        .iter()
        .zip(target)
        .enumerate()
        .map(|(i, (&p, &y))| {
            let p = p.clamp(eps, 1.0 - eps);
            let w = weights.map_or(1.0, |w| w[i] as f64);
            let ce = if y == 1 { -p.ln() } else { -(1.0 - p).ln() };
            w * ce
        })
        .collect();
    Ok(par::fixed_sum(&total) / prob.len().max(1) as f64)
}
