mod common;

use lsr_core::grid::Dims;
use lsr_core::lesions::{label_components, lesion_table, Connectivity, SizeBin};

#[test]
fn union_find_matches_flood_fill() {
    let dims = Dims::cube(8).unwrap();
    let mut rng = common::rng(11);
    for case in 0..240 {
        let density = [0.1, 0.25, 0.4, 0.6][case % 4];
        let mask = common::random_mask(dims, density, &mut rng);
        for (conn, n) in [(Connectivity::Six, 6), (Connectivity::Eighteen, 18), (Connectivity::TwentySix, 26)] {
            let ours = label_components(&mask, conn);
            let (oracle, count) = common::flood_fill(&mask, n);
            assert_eq!(ours.count(), count, "case {case} conn {n}");
            assert_eq!(ours.labels(), &oracle[..], "case {case} conn {n}");
        }
    }
}

#[test]
fn table_agrees_with_labels() {
    let dims = Dims::new(9, 7, 5).unwrap();
    let mut rng = common::rng(5);
    for _ in 0..50 {
        let mask = common::random_mask(dims, 0.3, &mut rng);
        let labels = label_components(&mask, Connectivity::TwentySix);
        let table = lesion_table(&labels);
        assert_eq!(table.len(), labels.count());
        assert_eq!(table.iter().map(|r| r.size).sum::<usize>(), mask.foreground_count());
        for r in &table {
            assert_eq!(r.bin, SizeBin::of_size(r.size));
            assert!(r.voxel_indices.iter().all(|&i| labels.labels()[i] == r.id));
            assert!(r.voxel_indices.windows(2).all(|w| w[0] < w[1]));
        }
        assert_eq!(labels.to_mask(), mask);
    }
}

#[test]
fn coarser_connectivity_never_merges_less() {
    let dims = Dims::cube(7).unwrap();
    let mut rng = common::rng(99);
    for _ in 0..50 {
        let mask = common::random_mask(dims, 0.3, &mut rng);
        let c6 = label_components(&mask, Connectivity::Six).count();
        let c18 = label_components(&mask, Connectivity::Eighteen).count();
        let c26 = label_components(&mask, Connectivity::TwentySix).count();
        assert!(c6 >= c18 && c18 >= c26);
    }
}
