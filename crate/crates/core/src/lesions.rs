//! Connected-component labelling of binary masks and lesion size tables.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Dims, Mask};

/// 3D neighbourhood used to decide whether two foreground voxels touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum Connectivity {
    /// Faces only.
    Six,
    /// Faces and edges.
    Eighteen,
    /// Faces, edges and corners.
    #[default]
    TwentySix,
}

impl Connectivity {
    pub fn from_count(n: u32) -> Result<Self> {
        match n {
            6 => Ok(Connectivity::Six),
            18 => Ok(Connectivity::Eighteen),
            26 => Ok(Connectivity::TwentySix),
            other => Err(Error::Config(format!(
                "connectivity must be 6, 18 or 26, got {other}"
            ))),
        }
    }

    fn max_manhattan(self) -> i32 {
        match self {
            Connectivity::Six => 1,
            Connectivity::Eighteen => 2,
            Connectivity::TwentySix => 3,
        }
    }

    /// All neighbour offsets of this neighbourhood.
    pub fn offsets(self) -> Vec<[i32; 3]> {
        let mut out = Vec::new();
        for dz in -1..=1i32 {
            for dy in -1..=1i32 {
                for dx in -1..=1i32 {
                    let m = dx.abs() + dy.abs() + dz.abs();
                    if m > 0 && m <= self.max_manhattan() {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }

    /// Offsets pointing to voxels visited earlier in x-fastest raster order.
    fn backward_offsets(self) -> Vec<[i32; 3]> {
        self.offsets()
            .into_iter()
            .filter(|&[dx, dy, dz]| dz < 0 || (dz == 0 && (dy < 0 || (dy == 0 && dx < 0))))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeBin {
    Tiny,
    Small,
    Medium,
    Large,
}

impl SizeBin {
    pub const DETECTION_BINS: [SizeBin; 3] = [SizeBin::Small, SizeBin::Medium, SizeBin::Large];

    /// Bin of a lesion with `size` voxels: tiny 1-2, small 3-10, medium 11-50, large 51+.
    pub fn of_size(size: usize) -> Self {
        match size {
            0..=2 => SizeBin::Tiny,
            3..=10 => SizeBin::Small,
            11..=50 => SizeBin::Medium,
            _ => SizeBin::Large,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SizeBin::Tiny => "tiny",
            SizeBin::Small => "small",
            SizeBin::Medium => "medium",
            SizeBin::Large => "large",
        }
    }
}

/// Component labels; 0 is background and lesions are numbered `1..=count`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    dims: Dims,
    labels: Vec<u32>,
    count: u32,
}

impl LabelMap {
    /// Builds a label map from raw labels, checking that they are contiguous.
    pub fn from_raw(dims: Dims, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != dims.len() {
            return Err(Error::ShapeMismatch {
                expected: dims.len(),
                found: labels.len(),
            });
        }
        let count = labels.iter().copied().max().unwrap_or(0);
        let mut present = vec![false; count as usize + 1];
        for &l in &labels {
            present[l as usize] = true;
        }
        if let Some(missing) = present.iter().skip(1).position(|&p| !p) {
            return Err(Error::Domain(format!(
                "labels are not contiguous: {} is missing",
                missing + 1
            )));
        }
        Ok(Self {
            dims,
            labels,
            count,
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn count(&self) -> usize {
        self.count as usize
    }

    pub fn to_mask(&self) -> Mask {
        Mask::from_fn(self.dims, |i| self.labels[i] > 0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LesionRecord {
    pub id: u32,
    pub size: usize,
    pub bin: SizeBin,
    pub voxel_indices: Vec<usize>,
}

struct DisjointSets {
    parent: Vec<u32>,
}

impl DisjointSets {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n as u32).collect(),
        }
    }

    fn find(&mut self, mut x: u32) -> u32 {
        let mut root = x;
        while self.parent[root as usize] != root {
            root = self.parent[root as usize];
        }
        while self.parent[x as usize] != root {
            let next = self.parent[x as usize];
            self.parent[x as usize] = root;
            x = next;
        }
        root
    }

    fn union(&mut self, a: u32, b: u32) {
        let ra = self.find(a);
        let rb = self.find(b);
        if ra != rb {
            // Smaller index becomes the root.
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi as usize] = lo;
        }
    }
}

/// Labels the connected foreground components of `mask`.
///
/// Labels are numbered in order of each component's lowest linear index.
pub fn label_components(mask: &Mask, connectivity: Connectivity) -> LabelMap {
    label_foreground(mask.dims(), mask.data(), |v| v == 1, connectivity)
}

/// Labels components of `{i : is_fg(values[i])}` without materialising a mask.
pub(crate) fn label_foreground<T: Copy>(
    dims: Dims,
    values: &[T],
    is_fg: impl Fn(T) -> bool,
    connectivity: Connectivity,
) -> LabelMap {
    let n = dims.len();
    let (nx, ny, nz) = (dims.nx as i64, dims.ny as i64, dims.nz as i64);
    let offsets = connectivity.backward_offsets();
    let mut sets = DisjointSets::new(n);
    let mut any = false;

    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = (x + nx * (y + ny * z)) as usize;
                if !is_fg(values[i]) {
                    continue;
                }
                any = true;
                for &[dx, dy, dz] in &offsets {
                    let (qx, qy, qz) = (x + dx as i64, y + dy as i64, z + dz as i64);
                    if qx < 0 || qy < 0 || qz < 0 || qx >= nx || qy >= ny || qz >= nz {
                        continue;
                    }
                    let j = (qx + nx * (qy + ny * qz)) as usize;
                    if is_fg(values[j]) {
                        sets.union(i as u32, j as u32);
                    }
                }
            }
        }
    }

    let mut labels = vec![0u32; n];
    let mut count = 0u32;
    if any {
        // Roots are the lowest index of each component, so the first time a
        // root is seen in raster order its component gets the next label.
        let mut root_label = vec![0u32; n];
        for i in 0..n {
            if !is_fg(values[i]) {
                continue;
            }
            let r = sets.find(i as u32) as usize;
            if root_label[r] == 0 {
                count += 1;
                root_label[r] = count;
            }
            labels[i] = root_label[r];
        }
    }
    LabelMap {
        dims,
        labels,
        count,
    }
}

/// One record per lesion, ordered by id.
pub fn lesion_table(labels: &LabelMap) -> Vec<LesionRecord> {
    let mut voxels: Vec<Vec<usize>> = vec![Vec::new(); labels.count()];
    for (i, &l) in labels.labels.iter().enumerate() {
        if l > 0 {
            voxels[l as usize - 1].push(i);
        }
    }
    voxels
        .into_iter()
        .enumerate()
        .map(|(k, voxel_indices)| LesionRecord {
            id: k as u32 + 1,
            size: voxel_indices.len(),
            bin: SizeBin::of_size(voxel_indices.len()),
            voxel_indices,
        })
        .collect()
}

/// Writes the table as CSV with columns `id,size,bin`.
pub fn write_table_csv<W: Write>(table: &[LesionRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["id", "size", "bin"])?;
    for rec in table {
        w.write_record([rec.id.to_string(), rec.size.to_string(), rec.bin.name().to_string()])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

pub fn save_table_csv(table: &[LesionRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_table_csv(table, file)
}
