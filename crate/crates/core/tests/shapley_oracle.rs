mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dualstress_core::linalg::Matrix;
use dualstress_core::shapley::{tree_shap_values, Explainer};
use dualstress_core::trees::{fit_gbrt, GbrtConfig, GradientBoostedEnsemble, Node, RegressionTree};

/// `d` features; the last one is constant so no tree can split on it.
fn fixture(seed: u64, n: usize, d: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let mut row: Vec<f64> = (0..d - 1).map(|_| r.gen_range(-1.0..1.0)).collect();
        row[1] = row[1].round();
        row.push(3.0);
        let signal = row[0] * row[1] + row[2 % (d - 1)].powi(2) - 0.5 * row[(d - 2).max(1)];
        y.push(signal + r.gen_range(-0.2..0.2));
        x.push(row);
    }
    (x, y)
}

fn model(x: &[Vec<f64>], y: &[f64], seed: u64, depth: usize) -> GradientBoostedEnsemble {
    let config = GbrtConfig { n_trees: 25, max_depth: depth, learning_rate: 0.1, seed, ..GbrtConfig::default() };
    fit_gbrt(&Matrix::from_rows(x).unwrap(), y, &config).unwrap()
}

#[test]
fn ensemble_attributions_match_coalition_enumeration() {
    for seed in 0..6 {
        let d = 4 + seed as usize % 4;
        let (x, y) = fixture(seed, 160, d);
        let m = model(&x, &y, seed, 1 + seed as usize % 4);
        let background: Vec<Vec<f64>> = x[..24].to_vec();
        let bg = Matrix::from_rows(&background).unwrap();
        let explainer = Explainer::new(&m, &bg).unwrap();
        let f = |z: &[f64]| m.predict(z).unwrap();
        for xi in &x[100..130] {
            let got = explainer.explain(xi).unwrap();
            let want = common::brute_force_shapley(&f, xi, &background);
            for j in 0..d {
                assert!((got.values[j] - want[j]).abs() < 1e-10, "seed {seed} feature {j}: {} vs {}", got.values[j], want[j]);
            }
            assert!(got.local_accuracy_gap().abs() < 1e-10);
            assert_eq!(got.values[d - 1], 0.0);
        }
    }
}

#[test]
fn ensemble_values_are_the_shrunk_sum_of_tree_values() {
    let (x, y) = fixture(11, 200, 5);
    let m = model(&x, &y, 11, 3);
    let bg = Matrix::from_rows(&x[..32]).unwrap();
    let explainer = Explainer::new(&m, &bg).unwrap();
    for xi in &x[150..170] {
        let mut summed = vec![0.0; 5];
        for tree in &m.trees {
            for (s, v) in summed.iter_mut().zip(tree_shap_values(tree, xi, &bg).unwrap()) {
                *s += m.learning_rate * v;
            }
        }
        let got = explainer.explain(xi).unwrap();
        for (a, b) in got.values.iter().zip(&summed) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn feature_matching_every_background_row_gets_nothing() {
    let (x, y) = fixture(5, 200, 5);
    let m = model(&x, &y, 5, 3);
    let mut background: Vec<Vec<f64>> = x[..20].to_vec();
    let mut xi = x[150].clone();
    xi[0] = 0.37;
    for b in &mut background {
        b[0] = 0.37;
    }
    let bg = Matrix::from_rows(&background).unwrap();
    let got = Explainer::new(&m, &bg).unwrap().explain(&xi).unwrap();
    assert!(got.values[0].abs() < 1e-15, "{}", got.values[0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn single_trees_match_enumeration(seed in any::<u64>(), depth in 1usize..6, row in 0usize..60) {
        let (x, y) = fixture(seed, 120, 5);
        let config = GbrtConfig { n_trees: 1, max_depth: depth, learning_rate: 1.0, subsample: 1.0, min_leaf: 3, seed };
        let m = fit_gbrt(&Matrix::from_rows(&x).unwrap(), &y, &config).unwrap();
        let background: Vec<Vec<f64>> = x[60..76].to_vec();
        let bg = Matrix::from_rows(&background).unwrap();
        let tree = &m.trees[0];
        let f = |z: &[f64]| tree.predict(z);
        let got = tree_shap_values(tree, &x[row], &bg).unwrap();
        let want = common::brute_force_shapley(&f, &x[row], &background);
        for j in 0..5 {
            prop_assert!((got[j] - want[j]).abs() < 1e-10);
        }
    }

    #[test]
    fn symmetric_features_share_credit_equally(
        v in -2.0f64..2.0,
        other in -2.0f64..2.0,
        bg in proptest::collection::vec((-2.0f64..2.0, -2.0f64..2.0, -2.0f64..2.0), 1..12),
    ) {
        // f = 1{x0 > 0} + 1{x1 > 0}; feature 2 is never used.
        let leaf = |value: f64| Node::Leaf { value, cover: 1 };
        let split = |feature: usize, left: usize, right: usize| Node::Split { feature, threshold: 0.0, left, right, cover: 1 };
        let tree = RegressionTree {
            nodes: vec![split(0, 1, 2), split(1, 3, 4), split(1, 5, 6), leaf(0.0), leaf(1.0), leaf(1.0), leaf(2.0)],
        };
        // A background closed under swapping features 0 and 1.
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (a, b, c) in bg {
            rows.push(vec![a, b, c]);
            rows.push(vec![b, a, c]);
        }
        let background = Matrix::from_rows(&rows).unwrap();
        let phi = tree_shap_values(&tree, &[v, v, other], &background).unwrap();
        prop_assert!((phi[0] - phi[1]).abs() < 1e-12);
        prop_assert_eq!(phi[2], 0.0);
        let f = |z: &[f64]| tree.predict(z);
        let want = common::brute_force_shapley(&f, &[v, v, other], &rows);
        for j in 0..3 {
            prop_assert!((phi[j] - want[j]).abs() < 1e-12);
        }
    }
}
