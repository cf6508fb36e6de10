//! Property-based invariants for the data pipeline and norm projections.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use translab::data::{glyphset_generate, label_smooth, mixup, SoftLabels};
use translab::model::NUM_CLASSES;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Generated glyph sets stay in [0, 1], are class-balanced, and are
    /// reproducible from the seed alone.
    #[test]
    fn glyphset_invariants(seed in any::<u64>()) {
        let (train, test) = glyphset_generate(seed, 100, 50).unwrap();
        let (train2, _) = glyphset_generate(seed, 100, 50).unwrap();
        prop_assert_eq!(train.images.data(), train2.images.data());
        for set in [&train, &test] {
            prop_assert!(set.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            let mut counts = [0usize; NUM_CLASSES];
            for &y in &set.labels {
                counts[y] += 1;
            }
            let want = set.len() / NUM_CLASSES;
            prop_assert!(counts.iter().all(|&c| c == want), "unbalanced: {:?}", counts);
        }
    }

    /// Smoothed labels form a probability simplex with the true class on top.
    #[test]
    fn label_smooth_simplex(p in 0.0f64..0.89, labels in prop::collection::vec(0usize..NUM_CLASSES, 1..32)) {
        let soft = label_smooth(&labels, p).unwrap();
        prop_assert!(soft.is_valid());
        let d = soft.probs.data();
        for (i, &y) in labels.iter().enumerate() {
            let row = &d[i * NUM_CLASSES..(i + 1) * NUM_CLASSES];
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| row[y] >= v - 1e-12));
        }
    }

    /// Mixup outputs are convex combinations: pixels stay within the convex
    /// hull of the batch and label rows stay on the simplex.
    #[test]
    fn mixup_convexity(seed in any::<u64>(), p in 0.0f64..=1.0) {
        let (train, _) = glyphset_generate(seed ^ 0xabcd, 100, 100).unwrap();
        let idx: Vec<usize> = (0..20).collect();
        let (x, y) = train.batch(&idx);
        let soft = SoftLabels::from_hard(&y);
        let lo = x.data().iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = x.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mx, ms) = mixup(&x, &soft, p, &mut rng).unwrap();
        prop_assert!(mx.data().iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
        prop_assert!(ms.is_valid());
    }
}
