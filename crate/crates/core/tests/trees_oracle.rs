mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dualstress_core::linalg::Matrix;
use dualstress_core::trees::{fit_gbrt, GbrtConfig, GradientBoostedEnsemble, Node};

/// Rows mixing continuous, integer-valued and binary features.
fn fixture(seed: u64, n: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let a: f64 = r.gen_range(-2.0..2.0);
        let b = f64::from(r.gen_range(0..7u8));
        let c = f64::from(u8::from(r.gen_bool(0.4)));
        let d: f64 = r.gen_range(0.0..1.0);
        let noise: f64 = r.gen_range(-0.3..0.3);
        y.push(a.sin() + 0.3 * b * c - d * d + noise);
        x.push(vec![a, b, c, d]);
    }
    (x, y)
}

fn single_tree(depth: usize, min_leaf: usize) -> GbrtConfig {
    GbrtConfig {
        n_trees: 1,
        max_depth: depth,
        learning_rate: 1.0,
        subsample: 1.0,
        min_leaf,
        seed: 0,
    }
}

#[test]
fn single_tree_matches_exhaustive_reference() {
    for seed in 0..25 {
        let n = 40 + (seed as usize * 13) % 160;
        let (x, y) = fixture(seed, n);
        let depth = 1 + seed as usize % 4;
        let min_leaf = 1 + seed as usize % 6;
        let model = fit_gbrt(&Matrix::from_rows(&x).unwrap(), &y, &single_tree(depth, min_leaf)).unwrap();
        let rows: Vec<usize> = (0..n).collect();
        let reference = common::reference_tree(&x, &y, &rows, depth, min_leaf);
        let (probe, _) = fixture(seed + 1000, 200);
        for xi in x.iter().chain(&probe) {
            let got = model.predict(xi).unwrap();
            let want = reference.predict(xi);
            assert!((got - want).abs() < 1e-9, "seed {seed}: {got} vs {want}");
        }
    }
}

#[test]
fn constant_target_gives_the_mean_everywhere() {
    let (x, _) = fixture(3, 50);
    let y = vec![0.25; 50];
    let model = fit_gbrt(&Matrix::from_rows(&x).unwrap(), &y, &GbrtConfig::default()).unwrap();
    assert!(model.trees.is_empty());
    for xi in &x {
        assert_eq!(model.predict(xi).unwrap(), 0.25);
    }
}

fn check_shape(model: &GradientBoostedEnsemble, depth: usize, min_leaf: usize) -> Result<(), TestCaseError> {
    for tree in &model.trees {
        prop_assert!(tree.depth() <= depth);
        for node in &tree.nodes {
            if let Node::Leaf { cover, .. } = node {
                prop_assert!(*cover >= min_leaf);
            }
        }
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn full_sample_boosting_never_raises_training_error(
        seed in any::<u64>(),
        lr in 0.01f64..=1.0,
        depth in 1usize..5,
        min_leaf in 1usize..8,
    ) {
        let (x, y) = fixture(seed, 120);
        let config = GbrtConfig { n_trees: 15, max_depth: depth, learning_rate: lr, subsample: 1.0, min_leaf, seed };
        let model = fit_gbrt(&Matrix::from_rows(&x).unwrap(), &y, &config).unwrap();
        for w in model.train_mse.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-12));
        }
        check_shape(&model, depth, min_leaf)?;
    }

    #[test]
    fn increasing_feature_transforms_leave_fits_unchanged(seed in any::<u64>(), depth in 1usize..5) {
        let (x, y) = fixture(seed, 100);
        let warped: Vec<Vec<f64>> = x
            .iter()
            .map(|r| vec![r[0].exp(), 3.0 * r[1] - 7.0, r[2], r[3].powi(3)])
            .collect();
        // Full sample: with bagging, midpoints between in-bag values can
        // order differently against out-of-bag rows after a warp.
        let config = GbrtConfig { n_trees: 10, max_depth: depth, subsample: 1.0, seed, ..GbrtConfig::default() };
        let a = fit_gbrt(&Matrix::from_rows(&x).unwrap(), &y, &config).unwrap();
        let b = fit_gbrt(&Matrix::from_rows(&warped).unwrap(), &y, &config).unwrap();
        for (u, v) in x.iter().zip(&warped) {
            prop_assert_eq!(a.predict(u).unwrap().to_bits(), b.predict(v).unwrap().to_bits());
        }
    }

    #[test]
    fn fits_are_reproducible_and_survive_serialization(seed in any::<u64>()) {
        let (x, y) = fixture(seed, 80);
        let m = Matrix::from_rows(&x).unwrap();
        let config = GbrtConfig { n_trees: 8, seed, ..GbrtConfig::default() };
        let a = fit_gbrt(&m, &y, &config).unwrap();
        let b = fit_gbrt(&m, &y, &config).unwrap();
        prop_assert_eq!(&a, &b);
        let restored = GradientBoostedEnsemble::from_json(&a.to_json().unwrap()).unwrap();
        for xi in &x {
            prop_assert_eq!(a.predict(xi).unwrap().to_bits(), restored.predict(xi).unwrap().to_bits());
        }
    }
}

#[test]
fn predictions_are_base_plus_shrunk_tree_sum() {
    let (x, y) = fixture(8, 150);
    let config = GbrtConfig { n_trees: 12, seed: 8, ..GbrtConfig::default() };
    let model = fit_gbrt(&Matrix::from_rows(&x).unwrap(), &y, &config).unwrap();
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    assert!((model.base - mean).abs() < 1e-12);
    for xi in &x {
        let manual = model.base + model.trees.iter().map(|t| config.learning_rate * t.predict(xi)).sum::<f64>();
        assert!((model.predict(xi).unwrap() - manual).abs() < 1e-12);
    }
}
