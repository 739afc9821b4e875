use std::collections::HashSet;

use lsr_core::grid::Dims;
use lsr_core::lesions::{label_components, lesion_table, Connectivity, SizeBin};
use lsr_core::phantom::*;

#[test]
fn truth_labels_reproduce_the_generator_table() {
    let cases = generate_dataset(&PhantomSpec::default(), 40, 3).unwrap();
    for (k, c) in cases.iter().enumerate() {
        let table = lesion_table(&label_components(&c.truth, Connectivity::TwentySix));
        assert_eq!(table, c.table, "case {k}");
        assert_eq!(c.lesion_contrast.len(), c.table.len());
        assert!(c.image.data().iter().all(|v| v.is_finite()));
    }
}

#[test]
fn default_sizes_cover_every_bin() {
    let cases = generate_dataset(&PhantomSpec::default(), 200, 17).unwrap();
    let mut counts = [0usize; 4];
    for c in &cases {
        for r in &c.table {
            counts[r.bin as usize] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    for bin in SizeBin::DETECTION_BINS {
        let share = counts[bin as usize] as f64 / total as f64;
        assert!(share >= 0.15, "{} share {share:.3} of {total}", bin.name());
    }
}

#[test]
fn small_lesions_are_dimmer_than_large_ones() {
    let cases = generate_dataset(&PhantomSpec::default(), 60, 8).unwrap();
    let mut sums = [(0.0, 0usize); 4];
    for c in &cases {
        for (r, &contrast) in c.table.iter().zip(&c.lesion_contrast) {
            let s = &mut sums[r.bin as usize];
            s.0 += contrast;
            s.1 += 1;
        }
    }
    let mean = |b: SizeBin| sums[b as usize].0 / sums[b as usize].1 as f64;
    assert!(mean(SizeBin::Small) < mean(SizeBin::Medium));
    assert!(mean(SizeBin::Medium) < mean(SizeBin::Large));
}

#[test]
fn no_attenuation_keeps_interior_contrast_flat() {
    let spec = PhantomSpec { small_contrast_attenuation: 0.0, ..PhantomSpec::default() };
    for n in [1, 3, 10, 400] {
        assert_eq!(spec.lesion_contrast(n), spec.contrast);
    }
}

#[test]
fn derived_case_seeds_do_not_collide() {
    let spec = PhantomSpec {
        dims: Dims::cube(8).unwrap(),
        lesion_count_mean: 1.0,
        max_lesion_size: 20,
        ..PhantomSpec::default()
    };
    let cases = generate_dataset(&spec, 1000, 17).unwrap();
    let seeds: HashSet<u64> = (0..1000).map(|k| case_seed(17, k)).collect();
    assert_eq!(seeds.len(), 1000);
    let images: HashSet<Vec<u32>> = cases
        .iter()
        .map(|c| c.image.data().iter().map(|v| v.to_bits()).collect())
        .collect();
    assert_eq!(images.len(), 1000);
}

#[test]
fn datasets_are_reproducible_case_by_case() {
    let spec = PhantomSpec::default();
    let all = generate_dataset(&spec, 5, 99).unwrap();
    for (k, c) in all.iter().enumerate() {
        let single = generate(&PhantomSpec { seed: case_seed(99, k), ..spec.clone() }).unwrap();
        assert_eq!(&single, c);
    }
    assert_eq!(generate_dataset(&spec, 5, 99).unwrap(), all);
}

#[test]
fn shipped_config_is_the_default() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/default_phantom.json");
    assert_eq!(PhantomSpec::load(path).unwrap(), PhantomSpec::default());
}
