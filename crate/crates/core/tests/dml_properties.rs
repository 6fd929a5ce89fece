mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use dualstress_core::dml::{
    assign_folds, dml_fit_with_folds, DmlConfig, MeanLearner, ModelFrame, NuisanceLearner,
};
use dualstress_core::linalg::Matrix;
use dualstress_core::trees::GbrtConfig;
use dualstress_core::Result;

/// Least squares on `[1, controls]`, fit with the test's own solver.
struct OlsLearner;

impl NuisanceLearner for OlsLearner {
    fn fit_predict(&self, x_train: &Matrix, y_train: &[f64], x_eval: &Matrix, _: u64) -> Result<Vec<f64>> {
        let with_one = |m: &Matrix, i: usize| -> Vec<f64> {
            let mut row = vec![1.0];
            row.extend_from_slice(m.row(i));
            row
        };
        let rows: Vec<Vec<f64>> = (0..x_train.rows()).map(|i| with_one(x_train, i)).collect();
        let beta = common::ols(&rows, y_train);
        Ok((0..x_eval.rows())
            .map(|i| with_one(x_eval, i).iter().zip(&beta).map(|(a, b)| a * b).sum())
            .collect())
    }
}

/// Partially linear design: y = tau T + gamma T X + g(W) + e, with T
/// depending on W. `linear` makes g and m linear in W.
fn frame(seed: u64, n: usize, tau: f64, gamma: f64, linear: bool) -> ModelFrame {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut controls = Vec::with_capacity(n * 3);
    let (mut y, mut t, mut x, mut tx) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for _ in 0..n {
        let w: [f64; 3] = [r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), f64::from(u8::from(r.gen_bool(0.5)))];
        let xi = 0.5 + 0.3 * w[2] + 0.2 * r.gen::<f64>();
        let m = if linear { 0.6 * w[0] - 0.4 * w[2] } else { (2.0 * w[0]).sin() - 0.4 * w[2] * w[1] };
        let g = if linear { w[0] + 0.5 * w[1] } else { w[0] * w[0] + (3.0 * w[1]).cos() };
        let e1: f64 = StandardNormal.sample(&mut r);
        let e2: f64 = StandardNormal.sample(&mut r);
        let ti = m + 0.5 * e1;
        y.push(tau * ti + gamma * ti * xi + g + 0.5 * e2);
        t.push(ti);
        x.push(xi);
        tx.push(ti * xi);
        controls.extend_from_slice(&w);
        controls.push(xi);
    }
    ModelFrame {
        row_ids: (0..n).collect(),
        y,
        treatment: t,
        moderator: x,
        interaction: tx,
        controls: Matrix::from_row_major(n, 4, controls).unwrap(),
        control_names: vec!["w0".into(), "w1".into(), "w2".into(), "x".into()],
    }
}

/// HC1 regression of `y` on `[1, a, b]`: coefficients and standard errors.
fn hc1_oracle(y: &[f64], a: &[f64], b: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = y.len();
    let rows: Vec<Vec<f64>> = (0..n).map(|i| vec![1.0, a[i], b[i]]).collect();
    let beta = common::ols(&rows, y);
    let mut xtx = vec![vec![0.0; 3]; 3];
    let mut meat = vec![vec![0.0; 3]; 3];
    for (row, &yi) in rows.iter().zip(y) {
        let e = yi - row.iter().zip(&beta).map(|(u, v)| u * v).sum::<f64>();
        for p in 0..3 {
            for q in 0..3 {
                xtx[p][q] += row[p] * row[q];
                meat[p][q] += e * e * row[p] * row[q];
            }
        }
    }
    let bread = common::invert(&xtx).unwrap();
    let scale = n as f64 / (n - 3) as f64;
    let se = (0..3)
        .map(|j| {
            let v: f64 = (0..3)
                .flat_map(|p| (0..3).map(move |q| (p, q)))
                .map(|(p, q)| bread[j][p] * meat[p][q] * bread[q][j])
                .sum();
            (v * scale).sqrt()
        })
        .collect();
    (beta, se)
}

fn oof_mean_residuals(target: &[f64], folds: &[usize]) -> Vec<f64> {
    (0..target.len())
        .map(|i| {
            let (s, c) = (0..target.len())
                .filter(|&j| folds[j] != folds[i])
                .fold((0.0, 0usize), |(s, c), j| (s + target[j], c + 1));
            target[i] - s / c as f64
        })
        .collect()
}

#[test]
fn mean_learner_estimate_matches_hand_computation() {
    let f = frame(4, 300, 0.2, 0.5, false);
    let config = DmlConfig { folds: 5, seed: 9, ..DmlConfig::default() };
    let folds = assign_folds(f.len(), 5, 9).unwrap();
    let (est, res) = dml_fit_with_folds(&f, &folds, &config, &MeanLearner).unwrap();
    let ry = oof_mean_residuals(&f.y, &folds);
    let rt = oof_mean_residuals(&f.treatment, &folds);
    let rtx = oof_mean_residuals(&f.interaction, &folds);
    for (a, b) in res.y.iter().zip(&ry) {
        assert!((a - b).abs() < 1e-12);
    }
    let (beta, se) = hc1_oracle(&ry, &rt, &rtx);
    assert!((est.tau.estimate - beta[1]).abs() < 1e-9);
    assert!((est.gamma.estimate - beta[2]).abs() < 1e-9);
    assert!((est.tau.std_error - se[1]).abs() < 1e-9 * se[1]);
    assert!((est.gamma.std_error - se[2]).abs() < 1e-9 * se[2]);
}

#[test]
fn linear_learner_recovers_linear_effects() {
    let f = frame(21, 4000, 0.3, 0.8, true);
    let config = DmlConfig { folds: 5, seed: 1, ..DmlConfig::default() };
    let folds = assign_folds(f.len(), 5, 1).unwrap();
    let (est, _) = dml_fit_with_folds(&f, &folds, &config, &OlsLearner).unwrap();
    assert!((est.tau.estimate - 0.3).abs() < 4.0 * est.tau.std_error, "{:?}", est.tau);
    assert!((est.gamma.estimate - 0.8).abs() < 4.0 * est.gamma.std_error, "{:?}", est.gamma);
}

#[test]
fn boosted_learner_recovers_nonlinear_effects() {
    let f = frame(33, 3000, 0.3, 0.8, false);
    let config = DmlConfig {
        folds: 5,
        seed: 2,
        learner: GbrtConfig { n_trees: 150, ..GbrtConfig::default() },
        ..DmlConfig::default()
    };
    let folds = assign_folds(f.len(), 5, 2).unwrap();
    let (est, _) = dml_fit_with_folds(&f, &folds, &config, &config.learner).unwrap();
    assert!((est.tau.estimate - 0.3).abs() < 4.0 * est.tau.std_error, "{:?}", est.tau);
    assert!((est.gamma.estimate - 0.8).abs() < 4.0 * est.gamma.std_error, "{:?}", est.gamma);
}

fn small_gbrt() -> DmlConfig {
    DmlConfig {
        folds: 3,
        seed: 5,
        learner: GbrtConfig { n_trees: 20, ..GbrtConfig::default() },
        ..DmlConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn scaling_the_outcome_scales_both_effects(seed in any::<u64>(), c in 0.01f64..100.0) {
        let f = frame(seed, 150, 0.2, 0.5, false);
        let mut scaled = f.clone();
        scaled.y.iter_mut().for_each(|v| *v *= c);
        let folds = assign_folds(f.len(), 3, seed).unwrap();
        let config = small_gbrt();
        for learner in [&MeanLearner as &dyn NuisanceLearner, &OlsLearner] {
            let (a, _) = dml_fit_with_folds(&f, &folds, &config, learner).unwrap();
            let (b, _) = dml_fit_with_folds(&scaled, &folds, &config, learner).unwrap();
            let tol = |v: f64| 1e-8 * (v.abs() * c).max(c);
            prop_assert!((b.tau.estimate - c * a.tau.estimate).abs() < tol(a.tau.estimate));
            prop_assert!((b.gamma.estimate - c * a.gamma.estimate).abs() < tol(a.gamma.estimate));
            prop_assert!((b.gamma.std_error - c * a.gamma.std_error).abs() < tol(a.gamma.std_error));
        }
    }

    // Tree split choices can flip on rounding-level gain ties, so the boosted
    // learner is checked with power-of-two factors, which scale exactly.
    #[test]
    fn power_of_two_outcome_scaling_is_exact_for_boosting(seed in any::<u64>(), k in -6i32..7) {
        let c = 2f64.powi(k);
        let f = frame(seed, 150, 0.2, 0.5, false);
        let mut scaled = f.clone();
        scaled.y.iter_mut().for_each(|v| *v *= c);
        let folds = assign_folds(f.len(), 3, seed).unwrap();
        let config = small_gbrt();
        let (a, _) = dml_fit_with_folds(&f, &folds, &config, &config.learner).unwrap();
        let (b, _) = dml_fit_with_folds(&scaled, &folds, &config, &config.learner).unwrap();
        prop_assert_eq!(b.tau.estimate, c * a.tau.estimate);
        prop_assert_eq!(b.gamma.estimate, c * a.gamma.estimate);
        prop_assert_eq!(b.gamma.std_error, c * a.gamma.std_error);
    }

    #[test]
    fn relabelling_folds_changes_nothing(seed in any::<u64>(), shift in 1usize..3) {
        let f = frame(seed, 120, 0.2, 0.5, false);
        let folds = assign_folds(f.len(), 3, seed).unwrap();
        let relabelled: Vec<usize> = folds.iter().map(|k| (k + shift) % 3).collect();
        let config = small_gbrt();
        let (a, ra) = dml_fit_with_folds(&f, &folds, &config, &config.learner).unwrap();
        let (b, rb) = dml_fit_with_folds(&f, &relabelled, &config, &config.learner).unwrap();
        prop_assert_eq!(a.tau, b.tau);
        prop_assert_eq!(a.gamma, b.gamma);
        prop_assert_eq!(ra.y, rb.y);
    }

    #[test]
    fn permuting_rows_with_their_folds_preserves_mean_learner_estimates(seed in any::<u64>(), shuffle in any::<u64>()) {
        let f = frame(seed, 100, 0.2, 0.5, false);
        let folds = assign_folds(f.len(), 4, seed).unwrap();
        let mut order: Vec<usize> = (0..f.len()).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut ChaCha8Rng::seed_from_u64(shuffle));
        let pick = |v: &[f64]| order.iter().map(|&i| v[i]).collect::<Vec<f64>>();
        let permuted = ModelFrame {
            row_ids: order.clone(),
            y: pick(&f.y),
            treatment: pick(&f.treatment),
            moderator: pick(&f.moderator),
            interaction: pick(&f.interaction),
            controls: f.controls.select_rows(&order),
            control_names: f.control_names.clone(),
        };
        let pfolds: Vec<usize> = order.iter().map(|&i| folds[i]).collect();
        let config = DmlConfig { folds: 4, ..DmlConfig::default() };
        let (a, _) = dml_fit_with_folds(&f, &folds, &config, &MeanLearner).unwrap();
        let (b, _) = dml_fit_with_folds(&permuted, &pfolds, &config, &MeanLearner).unwrap();
        prop_assert!((a.tau.estimate - b.tau.estimate).abs() < 1e-10 * a.tau.estimate.abs().max(1.0));
        prop_assert!((a.gamma.std_error - b.gamma.std_error).abs() < 1e-10 * a.gamma.std_error);
    }
}

