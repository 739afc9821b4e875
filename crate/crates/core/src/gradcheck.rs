//! Central-difference checks of the end-to-end parameter gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::experiment::LossConfig;
use crate::grid::{Dims, Mask, Volume};
use crate::lesions::Connectivity;
use crate::model::{backward, extract_features, truth_weight_map, Example, MlpParams, Standardizer};

pub const STEP: f64 = 1e-5;

/// Components smaller than this are compared on an absolute scale. Central
/// differences at `STEP` carry roundoff near `eps * loss / STEP`, about 1e-11
/// here, so a relative comparison of gradients far below the floor would
/// measure that noise rather than the analytic gradient.
pub const FLOOR: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub loss: String,
    pub seed: u64,
    pub parameters: usize,
    pub max_relative_error: f64,
    pub max_abs_gradient: f64,
}

/// Random 6x6x6 instance with a hidden width of 4.
pub struct Instance {
    pub image: Volume,
    pub truth: Mask,
    pub params: MlpParams,
}

pub fn random_instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = Dims::cube(6).expect("valid dims");
    let image: Vec<f32> = (0..dims.len())
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let mut truth = Mask::from_fn(dims, |_| rng.random_bool(0.2));
    if truth.foreground_count() == 0 {
        truth = Mask::from_fn(dims, |i| i == 0);
    }
    let hidden = 4;
    let flat = (0..MlpParams::param_count(hidden))
        .map(|_| rng.random_range(-0.8..0.8))
        .collect();
    Instance {
        image: Volume::new(dims, image).expect("finite image"),
        truth,
        params: MlpParams::from_flat(hidden, flat).expect("matching length"),
    }
}

/// Compares the analytic gradient of the mean loss with central differences
/// on every parameter of a random instance.
pub fn check(loss: &LossConfig, seed: u64) -> Result<GradCheckReport> {
    let inst = random_instance(seed);
    let mut features = extract_features(&inst.image);
    Standardizer::fit(std::slice::from_ref(&features)).apply(&mut features);
    let (kind, scheme) = loss.resolve(&[&inst.truth])?;
    let weights = match scheme {
        Some(s) => Some(truth_weight_map(&inst.truth, s, Connectivity::TwentySix)?),
        None => None,
    };
    let batch = [Example {
        features: &features,
        target: &inst.truth,
        weights: weights.as_ref(),
    }];
    let (_, grad) = backward(&inst.params, &batch, kind)?;
    let mut max_err = 0.0f64;
    let mut probe = inst.params.clone();
    for k in 0..grad.len() {
        let orig = probe.flat()[k];
        probe.flat_mut()[k] = orig + STEP;
        let (up, _) = backward(&probe, &batch, kind)?;
        probe.flat_mut()[k] = orig - STEP;
        let (down, _) = backward(&probe, &batch, kind)?;
        probe.flat_mut()[k] = orig;
        let numeric = (up - down) / (2.0 * STEP);
        max_err = max_err.max(relative_error(grad[k], numeric));
    }
    Ok(GradCheckReport {
        loss: loss.name().to_string(),
        seed,
        parameters: grad.len(),
        max_relative_error: max_err,
        max_abs_gradient: grad.iter().fold(0.0, |m, g| m.max(g.abs())),
    })
}
