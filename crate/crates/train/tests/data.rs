use pachubert_train::data::{BatchSampler, SplitSpec};
use pachubert_train::{make_validation_split, select_subset, TrainError};
use proptest::prelude::*;

#[test]
fn quarter_of_84_songs_is_21() {
    let s = select_subset(84, 0.25, 7).unwrap();
    assert_eq!(s.len(), 21);
    assert!(s.windows(2).all(|w| w[0] < w[1]));
    assert!(*s.last().unwrap() < 84);
}

#[test]
fn hundred_songs_split_84_16() {
    let items: Vec<usize> = (0..100).collect();
    for spec in [SplitSpec::Counts { train: 84, valid: 16 }, SplitSpec::ValidFraction(0.16)] {
        let (tr, va) = make_validation_split(&items, spec, 3).unwrap();
        assert_eq!((tr.len(), va.len()), (84, 16));
        let mut all: Vec<usize> = tr.iter().chain(&va).copied().collect();
        all.sort_unstable();
        assert_eq!(all, items);
    }
}

#[test]
fn split_counts_must_cover_every_item() {
    let items: Vec<usize> = (0..10).collect();
    assert!(matches!(make_validation_split(&items, SplitSpec::Counts { train: 8, valid: 3 }, 0), Err(TrainError::Config(_))));
    assert!(matches!(make_validation_split(&items, SplitSpec::Counts { train: 5, valid: 3 }, 0), Err(TrainError::Config(_))));
    assert!(matches!(make_validation_split(&items, SplitSpec::ValidFraction(1.5), 0), Err(TrainError::Config(_))));
}

#[test]
fn bad_ratios_are_rejected() {
    for r in [0.0, -0.1, 1.01, f64::NAN] {
        assert!(select_subset(84, r, 0).is_err(), "{r}");
    }
}

#[test]
fn oversized_batches_are_rejected() {
    assert!(BatchSampler::new(3, 4, 0).is_err());
    assert!(BatchSampler::new(3, 0, 0).is_err());
}

proptest! {
    #[test]
    fn subsets_are_nested(n in 1usize..200, a in 0.01f64..1.0, b in 0.01f64..1.0, seed in any::<u64>()) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let small = select_subset(n, lo, seed).unwrap();
        let large = select_subset(n, hi, seed).unwrap();
        prop_assert!(small.iter().all(|i| large.binary_search(i).is_ok()));
        prop_assert_eq!(large.len(), ((hi * n as f64).round() as usize).clamp(1, n));
    }

    #[test]
    fn split_is_a_seeded_partition(n in 1usize..120, f in 0.0f64..=1.0, seed in any::<u64>()) {
        let items: Vec<usize> = (0..n).collect();
        let (tr, va) = make_validation_split(&items, SplitSpec::ValidFraction(f), seed).unwrap();
        prop_assert_eq!(va.len(), (f * n as f64).round() as usize);
        prop_assert!(tr.iter().all(|i| !va.contains(i)));
        prop_assert_eq!(tr.len() + va.len(), n);
        prop_assert_eq!(make_validation_split(&items, SplitSpec::ValidFraction(f), seed).unwrap(), (tr, va));
    }

    #[test]
    fn each_epoch_visits_every_full_batch_once(n in 1usize..40, batch in 1usize..8, seed in any::<u64>(), epoch in 0u64..5) {
        prop_assume!(batch <= n);
        let s = BatchSampler::new(n, batch, seed).unwrap();
        let per = (n / batch) as u64;
        let mut seen: Vec<usize> = (epoch * per..(epoch + 1) * per).flat_map(|k| s.batch(k)).collect();
        prop_assert_eq!(seen.len(), per as usize * batch);
        seen.sort_unstable();
        seen.dedup();
        prop_assert_eq!(seen.len(), per as usize * batch);
    }
}
