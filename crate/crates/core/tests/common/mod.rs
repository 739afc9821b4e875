//! Brute-force reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::collections::VecDeque;

use lsr_core::grid::{Dims, Mask};
use lsr_core::metrics::DetectionConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_mask(dims: Dims, density: f64, rng: &mut ChaCha8Rng) -> Mask {
    Mask::from_fn(dims, |_| rng.random_bool(density))
}

fn neighbours(dims: Dims, i: usize, connectivity: u32) -> Vec<usize> {
    let (x, y, z) = dims.coords(i);
    let mut out = Vec::new();
    for dz in -1i64..=1 {
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let manhattan = dx.abs() + dy.abs() + dz.abs();
                let keep = match connectivity {
                    6 => manhattan == 1,
                    18 => manhattan == 1 || manhattan == 2,
                    _ => manhattan >= 1,
                };
                if !keep {
                    continue;
                }
                let (nx, ny, nz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                if nx < 0 || ny < 0 || nz < 0 || nx >= dims.nx as i64 || ny >= dims.ny as i64 || nz >= dims.nz as i64 {
                    continue;
                }
                out.push(dims.index_unchecked(nx as usize, ny as usize, nz as usize));
            }
        }
    }
    out
}

/// Breadth-first flood fill from each unvisited foreground voxel in index
/// order, so labels follow the lowest index of each component.
pub fn flood_fill(mask: &Mask, connectivity: u32) -> (Vec<u32>, usize) {
    let dims = mask.dims();
    let data = mask.data();
    let mut labels = vec![0u32; data.len()];
    let mut next = 0u32;
    for start in 0..data.len() {
        if data[start] == 0 || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        let mut queue = VecDeque::from([start]);
        while let Some(v) = queue.pop_front() {
            for n in neighbours(dims, v, connectivity) {
                if data[n] == 1 && labels[n] == 0 {
                    labels[n] = next;
                    queue.push_back(n);
                }
            }
        }
    }
    (labels, next as usize)
}

fn bin_index(size: usize) -> usize {
    match size {
        0..=10 => 0,
        11..=50 => 1,
        _ => 2,
    }
}

/// Per-bin `[detected, missed, false_positive]` for small, medium, large.
pub fn detection_oracle(pred: &Mask, truth: &Mask, cfg: &DetectionConfig, connectivity: u32) -> [[u64; 3]; 3] {
    let (pl, pn) = flood_fill(pred, connectivity);
    let (tl, tn) = flood_fill(truth, connectivity);
    let mut out = [[0u64; 3]; 3];
    let psize = |p: u32| pl.iter().filter(|&&l| l == p).count();
    let pon = |p: u32| pl.iter().zip(truth.data()).filter(|&(&l, &t)| l == p && t == 1).count();
    let bloated = |size: usize, on: usize| (size - on) as f64 > cfg.max_outside_fraction * size as f64;

    for t in 1..=tn as u32 {
        let voxels: Vec<usize> = (0..tl.len()).filter(|&i| tl[i] == t).collect();
        if voxels.len() < cfg.min_lesion_size {
            continue;
        }
        let covered = voxels.iter().filter(|&&i| pl[i] > 0).count();
        let mut comps: Vec<u32> = voxels.iter().map(|&i| pl[i]).filter(|&p| p > 0).collect();
        comps.sort();
        comps.dedup();
        let size: usize = comps.iter().map(|&p| psize(p)).sum();
        let on: usize = comps.iter().map(|&p| pon(p)).sum();
        let ok = covered as f64 >= cfg.min_overlap_fraction * voxels.len() as f64 && !(size > 0 && bloated(size, on));
        let b = bin_index(voxels.len());
        if ok {
            out[b][0] += 1;
        } else {
            out[b][1] += 1;
        }
    }
    for p in 1..=pn as u32 {
        let (size, on) = (psize(p), pon(p));
        if on == 0 || bloated(size, on) {
            out[bin_index(size)][2] += 1;
        }
    }
    out
}
