use proptest::prelude::*;

use stabfi::fi::{Measure, StabilityMap};
use stabfi::harness::{
    attack_width, mask_pixels, nonzero_count, random_ranking, rank_units, sparsify,
    SparsifyStrategy,
};
use stabfi::zoo::{Checkpoint, TargetKind, Tensor};

fn checkpoint(values: &[f64]) -> Checkpoint {
    let mut c = Checkpoint::new();
    c.insert(
        "w",
        Tensor::new(vec![values.len()], values.to_vec()).unwrap(),
    );
    c
}

fn param_map(values: &[f64]) -> StabilityMap {
    let ids: Vec<usize> = (0..values.len()).collect();
    StabilityMap::new(Measure::Fi, TargetKind::Parameter, &ids, values).unwrap()
}

proptest! {
    #[test]
    fn ranking_matches_sort(values in prop::collection::vec(0u8..6, 1..80)) {
        let values: Vec<f64> = values.into_iter().map(f64::from).collect();
        let ranked = rank_units(&param_map(&values)).unwrap();
        let mut oracle: Vec<usize> = (0..values.len()).collect();
        // insertion sort, descending, stable on ids
        for i in 1..oracle.len() {
            let mut j = i;
            while j > 0 && values[oracle[j - 1]] < values[oracle[j]] {
                oracle.swap(j - 1, j);
                j -= 1;
            }
        }
        prop_assert_eq!(ranked.ids, oracle);
    }

    #[test]
    fn random_ranking_is_a_seeded_permutation(n in 1usize..100, seed: u64) {
        let ids: Vec<usize> = (0..n).collect();
        let r = random_ranking(&ids, seed);
        let mut sorted = r.ids.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, ids.clone());
        prop_assert_eq!(random_ranking(&ids, seed).ids, r.ids);
    }

    #[test]
    fn sparsify_zeroes_exactly_floor(
        values in prop::collection::vec(0.5f64..3.0, 1..200),
        fraction in 0.0f64..=1.0,
        seed: u64,
    ) {
        let c = checkpoint(&values);
        let expect = (fraction * values.len() as f64).floor() as usize;
        let m = param_map(&values);
        for (strategy, map) in [(SparsifyStrategy::FiHigh, Some(&m)), (SparsifyStrategy::Random, None)] {
            let out = sparsify(&c, fraction, strategy, map, seed).unwrap();
            prop_assert_eq!(values.len() - nonzero_count(&out), expect);
        }
    }
}

#[test]
fn fi_high_zeroes_the_top_of_the_map() {
    let c = checkpoint(&[1.0, 1.0, 1.0, 1.0, 1.0]);
    let m = param_map(&[0.1, 0.9, 0.5, 0.9, 0.0]);
    let out = sparsify(&c, 0.4, SparsifyStrategy::FiHigh, Some(&m), 0).unwrap();
    assert_eq!(out.flat(), vec![1.0, 0.0, 1.0, 0.0, 1.0]);
    assert!(sparsify(&c, 0.4, SparsifyStrategy::FiHigh, None, 0).is_err());
    assert!(sparsify(&c, 1.2, SparsifyStrategy::Random, None, 0).is_err());
}

#[test]
fn masking_sets_whole_pixels() {
    let image = vec![0.5; 12];
    let ranked = rank_units(
        &StabilityMap::new(
            Measure::Fi,
            TargetKind::Pixel,
            &[0, 1, 2, 3],
            &[0.1, 0.7, 0.2, 0.9],
        )
        .unwrap(),
    )
    .unwrap();
    let out = mask_pixels(&image, &ranked, 2, 0.0).unwrap();
    assert_eq!(
        out,
        vec![0.5, 0.5, 0.5, 0.0, 0.0, 0.0, 0.5, 0.5, 0.5, 0.0, 0.0, 0.0]
    );
    assert!(mask_pixels(&image, &ranked, 5, 0.0).is_err());
    assert!(mask_pixels(&image[..11], &ranked, 1, 0.0).is_err());
}

#[test]
fn attack_width_rounds_up_and_clamps() {
    assert_eq!(attack_width(0.001, 32), 1);
    assert_eq!(attack_width(0.001, 4096), 5);
    assert_eq!(attack_width(0.5, 5), 3);
    assert_eq!(attack_width(1.0, 8), 8);
}
