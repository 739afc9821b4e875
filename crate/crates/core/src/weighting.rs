//! Per-voxel weight maps: lesion size reweighting, inverse weighting and uniform.
//!
//! Lesion size reweighting gives lesion `j` with `n = |L_j|` voxels the total
//! weight `W_j = n + alpha * exp(-(n - 1) / beta)`, spread evenly over its
//! voxels as `w_j = W_j / n`. Background voxels keep weight 1. With
//! `alpha <= beta` the lesion weight is non-decreasing in size while the
//! per-voxel weight stays within `[1, 1 + alpha / n]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Dims, Volume};
use crate::lesions::{LabelMap, LesionRecord};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightParams {
    alpha: f64,
    beta: f64,
}

impl WeightParams {
    /// Validated parameters: `0 <= alpha <= beta`, `beta > 0`.
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        let p = Self::unconstrained(alpha, beta)?;
        if alpha > beta {
            return Err(Error::Config(format!(
                "alpha ({alpha}) must not exceed beta ({beta})"
            )));
        }
        Ok(p)
    }

    /// Parameters without the `alpha <= beta` ordering constraint. Only the
    /// sign constraints are checked; lesion weights may then be non-monotone.
    pub fn unconstrained(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha.is_finite() && alpha >= 0.0) {
            return Err(Error::Config(format!("alpha must be a finite value >= 0, got {alpha}")));
        }
        if !(beta.is_finite() && beta > 0.0) {
            return Err(Error::Config(format!("beta must be a finite value > 0, got {beta}")));
        }
        Ok(Self { alpha, beta })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }
}

impl Default for WeightParams {
    fn default() -> Self {
        Self {
            alpha: 4.0,
            beta: 4.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "lowercase")]
pub enum WeightScheme {
    Uniform,
    Lsr(WeightParams),
    Inverse,
}

fn check_size(size: usize) -> Result<f64> {
    if size == 0 {
        return Err(Error::Domain("lesion size must be at least 1".into()));
    }
    Ok(size as f64)
}

pub fn lsr_voxel_weight(size: usize, params: WeightParams) -> Result<f64> {
    let n = check_size(size)?;
    Ok(1.0 + params.alpha / n * (-(n - 1.0) / params.beta).exp())
}

pub fn lsr_lesion_weight(size: usize, params: WeightParams) -> Result<f64> {
    let n = check_size(size)?;
    Ok(n + params.alpha * (-(n - 1.0) / params.beta).exp())
}

/// Voxel weight giving every lesion the same total weight `mean_size`.
pub fn inverse_voxel_weight(size: usize, mean_size: f64) -> Result<f64> {
    let n = check_size(size)?;
    if !(mean_size.is_finite() && mean_size > 0.0) {
        return Err(Error::Domain(format!("mean lesion size must be > 0, got {mean_size}")));
    }
    Ok(mean_size / n)
}

pub fn mean_lesion_size(table: &[LesionRecord]) -> Option<f64> {
    if table.is_empty() {
        return None;
    }
    Some(table.iter().map(|r| r.size as f64).sum::<f64>() / table.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightMap {
    weights: Volume,
    /// Set when an inverse map had no lesions to average over and fell back
    /// to uniform weights.
    pub uniform_fallback: bool,
}

impl WeightMap {
    pub fn uniform(dims: Dims) -> Self {
        Self {
            weights: Volume::filled(dims, 1.0),
            uniform_fallback: false,
        }
    }

    pub fn from_volume(weights: Volume) -> Result<Self> {
        if let Some(index) = weights.data().iter().position(|&w| w <= 0.0) {
            return Err(Error::Domain(format!("weight at index {index} is not positive")));
        }
        Ok(Self {
            weights,
            uniform_fallback: false,
        })
    }

    pub fn dims(&self) -> Dims {
        self.weights.dims()
    }

    pub fn weights(&self) -> &[f32] {
        self.weights.data()
    }

    pub fn as_volume(&self) -> &Volume {
        &self.weights
    }

    pub fn into_volume(self) -> Volume {
        self.weights
    }

    pub fn max_weight(&self) -> f64 {
        self.weights().iter().fold(0.0f64, |m, &w| m.max(w as f64))
    }

    pub fn min_weight(&self) -> f64 {
        self.weights().iter().fold(f64::INFINITY, |m, &w| m.min(w as f64))
    }
}

/// Per-lesion voxel weights under `scheme`, indexed by `id - 1`.
pub fn lesion_voxel_weights(table: &[LesionRecord], scheme: WeightScheme) -> Result<Vec<f64>> {
    match scheme {
        WeightScheme::Uniform => Ok(vec![1.0; table.len()]),
        WeightScheme::Lsr(p) => table.iter().map(|r| lsr_voxel_weight(r.size, p)).collect(),
        WeightScheme::Inverse => match mean_lesion_size(table) {
            Some(mean) => table
                .iter()
                .map(|r| inverse_voxel_weight(r.size, mean))
                .collect(),
            None => Ok(Vec::new()),
        },
    }
}

/// Builds the voxel weight map for `labels` under `scheme`.
pub fn weight_map(labels: &LabelMap, table: &[LesionRecord], scheme: WeightScheme) -> Result<WeightMap> {
    for (k, rec) in table.iter().enumerate() {
        if rec.id as usize != k + 1 {
            return Err(Error::Domain(format!(
                "lesion table out of order: entry {k} has id {}",
                rec.id
            )));
        }
    }
    let per_lesion = lesion_voxel_weights(table, scheme)?;
    let lookup: Vec<f32> = std::iter::once(1.0f32)
        .chain(per_lesion.iter().map(|&w| w as f32))
        .collect();
    let mut data = Vec::with_capacity(labels.labels().len());
    for &l in labels.labels() {
        let w = *lookup.get(l as usize).ok_or(Error::UnknownLabel { label: l })?;
        data.push(w);
    }
    Ok(WeightMap {
        weights: Volume::new(labels.dims(), data)?,
        uniform_fallback: matches!(scheme, WeightScheme::Inverse) && table.is_empty(),
    })
}
