mod common;

use lsr_core::grid::{Dims, Mask, Volume};
use lsr_core::lesions::{Connectivity, SizeBin};
use lsr_core::metrics::*;
use rand::Rng;

/// Random probability map with blobs of raised values around random truth lesions.
fn random_case(seed: u64, dims: Dims) -> (Volume, Mask) {
    let mut rng = common::rng(seed);
    let truth = common::random_mask(dims, rng.random_range(0.05..0.3), &mut rng);
    let data: Vec<f32> = truth
        .data()
        .iter()
        .map(|&t| {
            let base: f64 = rng.random_range(0.0..0.7);
            (if t == 1 { 0.3 + base } else { base }) as f32
        })
        .collect();
    (Volume::new(dims, data).unwrap(), truth)
}

fn recount(probs: &[Volume], truths: &[Mask], tau: f64, cfg: &DetectionConfig, conn: u32) -> (VoxelCounts, [[u64; 3]; 3]) {
    let mut voxel = VoxelCounts::default();
    let mut det = [[0u64; 3]; 3];
    for (p, t) in probs.iter().zip(truths) {
        let pred = Mask::from_fn(p.dims(), |i| p.data()[i] as f64 >= tau);
        for (&a, &b) in pred.data().iter().zip(t.data()) {
            match (a, b) {
                (1, 1) => voxel.tp += 1,
                (1, 0) => voxel.fp += 1,
                (0, 1) => voxel.fn_ += 1,
                _ => voxel.tn += 1,
            }
        }
        let d = common::detection_oracle(&pred, t, cfg, conn);
        for b in 0..3 {
            for k in 0..3 {
                det[b][k] += d[b][k];
            }
        }
    }
    (voxel, det)
}

fn check_against_oracle(cfg: DetectionConfig, conn: u32, seeds: std::ops::Range<u64>) {
    let taus = [0.1, 0.35, 0.5, 0.65, 0.9];
    for seed in seeds {
        let dims = Dims::new(7, 6, 5).unwrap();
        let cases: Vec<(Volume, Mask)> = (0..3).map(|k| random_case(seed * 10 + k, dims)).collect();
        let probs: Vec<Volume> = cases.iter().map(|c| c.0.clone()).collect();
        let truths: Vec<Mask> = cases.iter().map(|c| c.1.clone()).collect();
        let rows = sweep_curves(&probs, &truths, &taus, &cfg).unwrap();
        for row in &rows {
            let (voxel, det) = recount(&probs, &truths, row.tau, &cfg, conn);
            assert_eq!(row.counts.voxel, voxel, "seed {seed} tau {}", row.tau);
            let d = &row.counts.detection;
            for (b, bin) in SizeBin::DETECTION_BINS.iter().enumerate() {
                let c = d.bin(*bin);
                assert_eq!([c.detected, c.missed, c.false_positive], det[b], "seed {seed} tau {} bin {b}", row.tau);
            }
        }
    }
}

#[test]
fn sweep_matches_recount_default_rule() {
    check_against_oracle(DetectionConfig::default(), 26, 0..25);
}

#[test]
fn sweep_matches_recount_plain_overlap_rule() {
    let cfg = DetectionConfig {
        max_outside_fraction: 1.0,
        connectivity: Connectivity::Six,
        min_overlap_fraction: 0.3,
        min_lesion_size: 1,
    };
    check_against_oracle(cfg, 6, 100..120);
}

#[test]
fn pooled_counts_are_additive() {
    let dims = Dims::cube(6).unwrap();
    let cases: Vec<(Volume, Mask)> = (0..4).map(|k| random_case(500 + k, dims)).collect();
    let taus = default_tau_grid();
    let cfg = DetectionConfig::default();
    let probs: Vec<Volume> = cases.iter().map(|c| c.0.clone()).collect();
    let truths: Vec<Mask> = cases.iter().map(|c| c.1.clone()).collect();
    let pooled = sweep_counts(&probs, &truths, &taus, &cfg).unwrap();
    let mut sum = vec![ThresholdCounts { tau: 0.0, voxel: Default::default(), detection: Default::default() }; taus.len()];
    for (p, t) in probs.iter().zip(&truths) {
        for (acc, c) in sum.iter_mut().zip(volume_counts(p, t, &taus, &cfg).unwrap()) {
            acc.tau = c.tau;
            acc.voxel += c.voxel;
            acc.detection += c.detection;
        }
    }
    assert_eq!(pooled, sum);
}

#[test]
fn identity_prediction_is_perfect() {
    let dims = Dims::cube(8).unwrap();
    let mut rng = common::rng(1);
    let truth = common::random_mask(dims, 0.15, &mut rng);
    let prob = Volume::new(dims, truth.data().iter().map(|&t| t as f32).collect()).unwrap();
    let rows = sweep_curves(&[prob], &[truth], &default_tau_grid(), &DetectionConfig::default()).unwrap();
    let r = operating_report(&rows).unwrap();
    assert_eq!(r.gap, 0.0);
    assert_eq!(r.simultaneous_f1, 1.0);
}

#[test]
fn simultaneous_f1_never_exceeds_individual_bests() {
    for seed in 0..30 {
        let (p, t) = random_case(seed, Dims::cube(6).unwrap());
        let rows = sweep_curves(&[p], &[t], &default_tau_grid(), &DetectionConfig::default()).unwrap();
        let r = operating_report(&rows).unwrap();
        assert!(r.simultaneous_f1 <= r.f1_seg.min(r.f1_det) + 1e-15);
        assert!((r.gap - (r.tau_det - r.tau_seg).abs()).abs() < 1e-15);
    }
}

#[test]
fn detection_is_invariant_to_relabelling() {
    use lsr_core::lesions::{label_components, LabelMap};
    let dims = Dims::cube(7).unwrap();
    let mut rng = common::rng(42);
    for _ in 0..20 {
        let truth = common::random_mask(dims, 0.2, &mut rng);
        let pred = common::random_mask(dims, 0.2, &mut rng);
        let cfg = DetectionConfig::default();
        let tl = label_components(&truth, cfg.connectivity);
        let pl = label_components(&pred, cfg.connectivity);
        let base = match_lesions(&pl, &tl, &cfg).unwrap();
        let permute = |l: &LabelMap| {
            let n = l.count() as u32;
            let map: Vec<u32> = (0..=n).map(|k| if k == 0 { 0 } else { n + 1 - k }).collect();
            LabelMap::from_raw(l.dims(), l.labels().iter().map(|&k| map[k as usize]).collect()).unwrap()
        };
        assert_eq!(match_lesions(&permute(&pl), &permute(&tl), &cfg).unwrap(), base);
    }
}
