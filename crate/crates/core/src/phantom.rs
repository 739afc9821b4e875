//! Seeded synthetic volumes with lesions of widely varying size.
//!
//! Lesions are grown by random frontier accretion from non-overlapping seed
//! points and kept at least one voxel apart, so connected-component labelling
//! of the truth mask recovers exactly the generated lesions. Small lesions
//! get attenuated contrast and boundary voxels get half contrast; without that
//! a per-voxel classifier finds small lesions as easily as large ones.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{self, Dims, Grid, Mask, Volume};
use crate::lesions::{label_components, lesion_table, Connectivity, LesionRecord};
use crate::par;

pub const MAX_PLACEMENT_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: Dims,
    /// Poisson mean of the lesion count.
    pub lesion_count_mean: f64,
    pub size_log_mean: f64,
    pub size_log_sd: f64,
    /// Target sizes are clamped to this many voxels.
    pub max_lesion_size: usize,
    pub contrast: f64,
    pub small_contrast_attenuation: f64,
    pub noise_sd: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: Dims {
                nx: 24,
                ny: 24,
                nz: 24,
            },
            lesion_count_mean: 10.0,
            size_log_mean: 14f64.ln(),
            size_log_sd: 1.3,
            max_lesion_size: 400,
            contrast: 2.0,
            small_contrast_attenuation: 0.92,
            noise_sd: 0.2,
            seed: 17,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.dims.min_extent() < 8 {
            return bad(format!("phantom dims {:?} must be at least 8 on every axis", self.dims.as_array()));
        }
        if !(self.lesion_count_mean.is_finite() && self.lesion_count_mean >= 0.0) {
            return bad(format!("lesion_count_mean must be >= 0, got {}", self.lesion_count_mean));
        }
        if !self.size_log_mean.is_finite() || !(self.size_log_sd.is_finite() && self.size_log_sd > 0.0) {
            return bad("lognormal size parameters must be finite with sd > 0".into());
        }
        if self.max_lesion_size == 0 {
            return bad("max_lesion_size must be at least 1".into());
        }
        if !(self.contrast.is_finite() && self.contrast > 0.0) {
            return bad(format!("contrast must be > 0, got {}", self.contrast));
        }
        if !(0.0..1.0).contains(&self.small_contrast_attenuation) {
            return bad(format!(
                "small_contrast_attenuation must lie in [0, 1), got {}",
                self.small_contrast_attenuation
            ));
        }
        if !(self.noise_sd.is_finite() && self.noise_sd > 0.0) {
            return bad(format!("noise_sd must be > 0, got {}", self.noise_sd));
        }
        Ok(())
    }

    /// Contrast of a lesion of `size` voxels before partial-volume halving.
    pub fn lesion_contrast(&self, size: usize) -> f64 {
        self.contrast
            * (1.0 - self.small_contrast_attenuation * (-((size as f64) - 1.0) / 8.0).exp())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: Self = serde_json::from_str(&text)?;
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomCase {
    pub image: Volume,
    pub truth: Mask,
    pub table: Vec<LesionRecord>,
    /// Noise-free mean intensity of each lesion, aligned with `table`.
    pub lesion_contrast: Vec<f64>,
}

const FREE: u8 = 0;
const LESION: u8 = 1;
const HALO: u8 = 2;

fn neighbours6(dims: Dims, i: usize, mut f: impl FnMut(usize)) {
    let (x, y, z) = dims.coords(i);
    if x > 0 {
        f(i - 1);
    }
    if x + 1 < dims.nx {
        f(i + 1);
    }
    if y > 0 {
        f(i - dims.nx);
    }
    if y + 1 < dims.ny {
        f(i + dims.nx);
    }
    if z > 0 {
        f(i - dims.nx * dims.ny);
    }
    if z + 1 < dims.nz {
        f(i + dims.nx * dims.ny);
    }
}

fn neighbours26(dims: Dims, i: usize, mut f: impl FnMut(usize)) {
    let (x, y, z) = dims.coords(i);
    for dz in -1i64..=1 {
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                if dx == 0 && dy == 0 && dz == 0 {
                    continue;
                }
                let (qx, qy, qz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                if qx < 0 || qy < 0 || qz < 0 {
                    continue;
                }
                let (qx, qy, qz) = (qx as usize, qy as usize, qz as usize);
                if qx < dims.nx && qy < dims.ny && qz < dims.nz {
                    f(dims.index_unchecked(qx, qy, qz));
                }
            }
        }
    }
}

/// Grows one lesion from `seed` inside free space. Returns the voxels, which
/// may fall short of `target` when the region is enclosed.
fn grow(dims: Dims, state: &[u8], seed: usize, target: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut in_lesion = std::collections::HashSet::new();
    let mut voxels = vec![seed];
    in_lesion.insert(seed);
    let mut frontier = Vec::new();
    neighbours6(dims, seed, |j| frontier.push(j));
    while voxels.len() < target && !frontier.is_empty() {
        let pick = rng.random_range(0..frontier.len());
        let v = frontier.swap_remove(pick);
        if state[v] != FREE || in_lesion.contains(&v) {
            continue;
        }
        in_lesion.insert(v);
        voxels.push(v);
        neighbours6(dims, v, |j| {
            if state[j] == FREE && !in_lesion.contains(&j) {
                frontier.push(j);
            }
        });
    }
    voxels.sort_unstable();
    voxels
}

/// Generates one phantom from `spec.seed`.
pub fn generate(spec: &PhantomSpec) -> Result<PhantomCase> {
    spec.validate()?;
    let dims = spec.dims;
    let n = dims.len();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let count = if spec.lesion_count_mean > 0.0 {
        let poisson = Poisson::new(spec.lesion_count_mean)
            .map_err(|e| Error::Config(format!("lesion count distribution: {e}")))?;
        poisson.sample(&mut rng) as usize
    } else {
        0
    };
    let sizes = LogNormal::new(spec.size_log_mean, spec.size_log_sd)
        .map_err(|e| Error::Config(format!("lesion size distribution: {e}")))?;

    let mut state = vec![FREE; n];
    let mut lesions: Vec<Vec<usize>> = Vec::with_capacity(count);
    for k in 0..count {
        let target = (sizes.sample(&mut rng).round() as usize).clamp(1, spec.max_lesion_size);
        let mut placed = None;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let seed = rng.random_range(0..n);
            if state[seed] != FREE {
                continue;
            }
            let voxels = grow(dims, &state, seed, target, &mut rng);
            if voxels.len() + 1 >= target {
                placed = Some(voxels);
                break;
            }
        }
        let voxels = placed.ok_or_else(|| {
            Error::Generation(format!(
                "could not place lesion {} of {count} (target {target} voxels) after \
                 {MAX_PLACEMENT_ATTEMPTS} attempts; use larger dims or fewer lesions",
                k + 1
            ))
        })?;
        for &v in &voxels {
            state[v] = LESION;
        }
        for &v in &voxels {
            neighbours26(dims, v, |j| {
                if state[j] == FREE {
                    state[j] = HALO;
                }
            });
        }
        lesions.push(voxels);
    }

    let noise = Normal::new(0.0, spec.noise_sd)
        .map_err(|e| Error::Config(format!("noise distribution: {e}")))?;
    let mut signal = vec![0.0f64; n];
    let mut owner = vec![usize::MAX; n];
    for (k, voxels) in lesions.iter().enumerate() {
        for &v in voxels {
            owner[v] = k;
        }
    }
    for (k, voxels) in lesions.iter().enumerate() {
        let c = spec.lesion_contrast(voxels.len());
        for &v in voxels {
            let mut interior = true;
            let (x, y, z) = dims.coords(v);
            if x == 0 || y == 0 || z == 0 || x + 1 == dims.nx || y + 1 == dims.ny || z + 1 == dims.nz {
                interior = false;
            }
            neighbours6(dims, v, |j| {
                if owner[j] != k {
                    interior = false;
                }
            });
            signal[v] = if interior { c } else { c / 2.0 };
        }
    }
    let image: Vec<f32> = signal
        .iter()
        .map(|&s| (s + noise.sample(&mut rng)) as f32)
        .collect();

    let truth = Mask::from_fn(dims, |i| state[i] == LESION);
    let table = lesion_table(&label_components(&truth, Connectivity::TwentySix));
    let lesion_contrast = table
        .iter()
        .map(|r| r.voxel_indices.iter().map(|&v| signal[v]).sum::<f64>() / r.size as f64)
        .collect();
    Ok(PhantomCase {
        image: Volume::new(dims, image)?,
        truth,
        table,
        lesion_contrast,
    })
}

/// SplitMix64 output for `x`.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn case_seed(seed: u64, k: usize) -> u64 {
    seed ^ splitmix64(k as u64)
}

/// `n_volumes` independent cases; case `k` is generated from `case_seed(seed, k)`.
pub fn generate_dataset(spec: &PhantomSpec, n_volumes: usize, seed: u64) -> Result<Vec<PhantomCase>> {
    if n_volumes == 0 {
        return Err(Error::Config("n_volumes must be at least 1".into()));
    }
    spec.validate()?;
    par::map_range(n_volumes, |k| {
        let mut s = spec.clone();
        s.seed = case_seed(seed, k);
        generate(&s)
    })
    .into_iter()
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: PhantomSpec,
    pub seed: u64,
    pub n: usize,
    pub case_seeds: Vec<u64>,
}

pub fn image_file_name(k: usize) -> String {
    format!("case_{k:04}_img.lvol")
}

pub fn mask_file_name(k: usize) -> String {
    format!("case_{k:04}_mask.lvol")
}

/// Writes images, masks and `manifest.json` into `dir`.
pub fn write_dataset(dir: impl AsRef<Path>, spec: &PhantomSpec, seed: u64, cases: &[PhantomCase]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (k, case) in cases.iter().enumerate() {
        grid::write_volume(dir.join(image_file_name(k)), &Grid::F32(case.image.clone()))?;
        grid::write_volume(dir.join(mask_file_name(k)), &Grid::U8(case.truth.clone()))?;
    }
    let manifest = Manifest {
        spec: spec.clone(),
        seed,
        n: cases.len(),
        case_seeds: (0..cases.len()).map(|k| case_seed(seed, k)).collect(),
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

/// A stored image/mask pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Volume,
    pub truth: Mask,
}

impl From<&PhantomCase> for Sample {
    fn from(c: &PhantomCase) -> Self {
        Sample {
            image: c.image.clone(),
            truth: c.truth.clone(),
        }
    }
}

/// Reads every case listed in `manifest.json` under `dir`.
pub fn read_dataset(dir: impl AsRef<Path>) -> Result<(Manifest, Vec<Sample>)> {
    let dir = dir.as_ref();
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let samples = (0..manifest.n)
        .map(|k| {
            let image = grid::read_f32(dir.join(image_file_name(k)))?;
            let truth = grid::read_mask(dir.join(mask_file_name(k)))?;
            image.dims().ensure_same(&truth.dims())?;
            Ok(Sample { image, truth })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, samples))
}
