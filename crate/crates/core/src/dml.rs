//! Cross-fitted linear double machine learning for the strike main effect
//! and the strike x inflation interaction.
//!
//! Outcome, treatment and interaction are each residualized on the
//! controls with out-of-fold nuisance predictions; the residualized outcome
//! is then regressed on both residualized regressors jointly, with HC1
//! standard errors.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glm::control_value;
use crate::linalg::Matrix;
use crate::panel::PanelRow;
use crate::rng;
use crate::stats::{correlation, ols_hc1, Wald};
use crate::trees::{fit_gbrt, GbrtConfig};

/// Controls used for residualization. Inflation at entry is included:
/// it is a cohort-level confounder of the interaction.
pub const DML_CONTROLS: [&str; 10] = [
    "inflation_at_entry",
    "cum_gpa",
    "repeat_ratio",
    "credits_approved_cum",
    "semester_number",
    "calendar_year",
    "cohort_year",
    "gender_code",
    "work_status",
    "work_status_imputed",
];

pub const TAU_LABEL: &str = "Strikes (Lag 2)";
pub const GAMMA_LABEL: &str = "Interaction (Strikes x Inflation)";

/// Model rows: outcome, treatment, interaction and controls, restricted to
/// panel rows where every strike lag is present.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelFrame {
    pub row_ids: Vec<usize>,
    pub y: Vec<f64>,
    pub treatment: Vec<f64>,
    pub moderator: Vec<f64>,
    pub interaction: Vec<f64>,
    pub controls: Matrix,
    pub control_names: Vec<String>,
}

impl ModelFrame {
    pub fn from_panel(panel: &[PanelRow]) -> Result<Self> {
        let row_ids: Vec<usize> = (0..panel.len()).filter(|&i| panel[i].has_all_lags()).collect();
        if row_ids.is_empty() {
            return Err(Error::Schema("no panel rows with all strike lags present".into()));
        }
        let mut data = Vec::with_capacity(row_ids.len() * DML_CONTROLS.len());
        let mut y = Vec::with_capacity(row_ids.len());
        let mut treatment = Vec::with_capacity(row_ids.len());
        let mut moderator = Vec::with_capacity(row_ids.len());
        let mut interaction = Vec::with_capacity(row_ids.len());
        for &i in &row_ids {
            let r = &panel[i];
            y.push(r.dropout_next_sem as f64);
            treatment.push(r.strikes_lag2.expect("filtered"));
            moderator.push(r.inflation_at_entry);
            interaction.push(r.interaction_term.ok_or_else(|| {
                Error::Schema(format!("row {i}: interaction term missing"))
            })?);
            data.extend(DML_CONTROLS.iter().map(|c| control_value(r, c)));
        }
        let controls = Matrix::from_row_major(row_ids.len(), DML_CONTROLS.len(), data)?;
        Ok(Self {
            row_ids,
            y,
            treatment,
            moderator,
            interaction,
            controls,
            control_names: DML_CONTROLS.iter().map(|s| s.to_string()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Same frame with a different treatment; the interaction is rebuilt
    /// as treatment x moderator.
    pub fn with_treatment(&self, treatment: Vec<f64>) -> Result<Self> {
        if treatment.len() != self.len() {
            return Err(Error::Schema("replacement treatment has the wrong length".into()));
        }
        let interaction = treatment.iter().zip(&self.moderator).map(|(t, x)| t * x).collect();
        Ok(Self {
            treatment,
            interaction,
            ..self.clone()
        })
    }
}

/// Conditional-mean learner used for the nuisance functions.
pub trait NuisanceLearner: Send + Sync {
    fn fit_predict(&self, x_train: &Matrix, y_train: &[f64], x_eval: &Matrix, seed: u64)
        -> Result<Vec<f64>>;
}

impl NuisanceLearner for GbrtConfig {
    fn fit_predict(
        &self,
        x_train: &Matrix,
        y_train: &[f64],
        x_eval: &Matrix,
        seed: u64,
    ) -> Result<Vec<f64>> {
        let model = fit_gbrt(x_train, y_train, &self.with_seed(seed))?;
        model.predict_matrix(x_eval)
    }
}

/// Predicts the training mean; the simplest learner that fits constants.
#[derive(Debug, Clone, Copy, Default)]
pub struct MeanLearner;

impl NuisanceLearner for MeanLearner {
    fn fit_predict(&self, _: &Matrix, y_train: &[f64], x_eval: &Matrix, _: u64) -> Result<Vec<f64>> {
        let m = y_train.iter().sum::<f64>() / y_train.len() as f64;
        Ok(vec![m; x_eval.rows()])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum RobustSe {
    #[default]
    Hc1,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DmlConfig {
    pub folds: usize,
    pub seed: u64,
    pub learner: GbrtConfig,
    pub robust_se: RobustSe,
    pub confidence_level: f64,
}

impl Default for DmlConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            seed: 0,
            learner: GbrtConfig::default(),
            robust_se: RobustSe::Hc1,
            confidence_level: 0.95,
        }
    }
}

impl DmlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(Error::InvalidArgument("need at least 2 folds".into()));
        }
        if !(self.confidence_level > 0.0 && self.confidence_level < 1.0) {
            return Err(Error::InvalidArgument("confidence level must lie in (0, 1)".into()));
        }
        self.learner.validate()
    }
}

/// Random partition of `0..n` into `k` folds whose sizes differ by at most one.
pub fn assign_folds(n: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k == 0 || n < k {
        return Err(Error::InvalidArgument(format!("cannot split {n} rows into {k} folds")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut r = rng::stream(seed, &["dml", "folds"], 0);
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut r);
    let mut folds = vec![0; n];
    for (pos, &row) in order.iter().enumerate() {
        folds[row] = pos % k;
    }
    Ok(folds)
}

/// Fold members grouped in canonical order: folds are ranked by their
/// smallest row index, so relabeling a partition changes nothing downstream.
fn canonical_folds(folds: &[usize]) -> Vec<Vec<usize>> {
    let k = folds.iter().copied().max().map_or(0, |m| m + 1);
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &f) in folds.iter().enumerate() {
        groups[f].push(i);
    }
    groups.retain(|g| !g.is_empty());
    groups.sort_by_key(|g| g[0]);
    groups
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldDiagnostic {
    pub target: String,
    pub fold: usize,
    pub n_train: usize,
    pub n_eval: usize,
    pub out_of_fold_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Residualized {
    pub residuals: Vec<f64>,
    pub diagnostics: Vec<FoldDiagnostic>,
    pub warnings: Vec<String>,
}

/// Out-of-fold residuals of `target` given `controls`.
pub fn crossfit_residualize(
    controls: &Matrix,
    target: &[f64],
    folds: &[usize],
    learner: &dyn NuisanceLearner,
    seed: u64,
    target_name: &str,
) -> Result<Residualized> {
    let n = controls.rows();
    if target.len() != n || folds.len() != n {
        return Err(Error::Schema("target, folds and controls differ in length".into()));
    }
    let groups = canonical_folds(folds);
    if groups.len() < 2 {
        return Err(Error::InvalidArgument("cross-fitting needs at least 2 non-empty folds".into()));
    }

    let per_fold: Vec<Result<(Vec<f64>, FoldDiagnostic, Option<String>)>> = groups
        .par_iter()
        .enumerate()
        .map(|(f, eval)| {
            let mut in_eval = vec![false; n];
            eval.iter().for_each(|&i| in_eval[i] = true);
            let train: Vec<usize> = (0..n).filter(|&i| !in_eval[i]).collect();
            let y_train: Vec<f64> = train.iter().map(|&i| target[i]).collect();
            let x_train = controls.select_rows(&train);
            let x_eval = controls.select_rows(eval);
            let warning = y_train.iter().all(|v| *v == y_train[0]).then(|| {
                format!("{target_name}: target constant in training folds for fold {f}")
            });
            let fold_seed = rng::derive_seed(seed, &["dml", "nuisance", target_name], f as u64);
            let pred = learner.fit_predict(&x_train, &y_train, &x_eval, fold_seed)?;
            let res: Vec<f64> = eval.iter().zip(&pred).map(|(&i, p)| target[i] - p).collect();
            let mse = res.iter().map(|r| r * r).sum::<f64>() / res.len() as f64;
            let diag = FoldDiagnostic {
                target: target_name.to_string(),
                fold: f,
                n_train: train.len(),
                n_eval: eval.len(),
                out_of_fold_mse: mse,
            };
            Ok((res, diag, warning))
        })
        .collect();

    let mut residuals = vec![0.0; n];
    let mut diagnostics = Vec::with_capacity(groups.len());
    let mut warnings = Vec::new();
    for (eval, outcome) in groups.iter().zip(per_fold) {
        let (res, diag, warning) = outcome?;
        for (&i, r) in eval.iter().zip(res) {
            residuals[i] = r;
        }
        diagnostics.push(diag);
        warnings.extend(warning);
    }
    Ok(Residualized {
        residuals,
        diagnostics,
        warnings,
    })
}

/// Residuals of outcome, treatment and interaction with their folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualSet {
    pub y: Vec<f64>,
    pub treatment: Vec<f64>,
    pub interaction: Vec<f64>,
    pub folds: Vec<usize>,
    pub diagnostics: Vec<FoldDiagnostic>,
    pub warnings: Vec<String>,
}

impl ResidualSet {
    pub fn to_csv(&self, row_ids: &[usize]) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["row", "fold", "y_residual", "t_residual", "tx_residual"])?;
        for i in 0..self.y.len() {
            w.write_record([
                row_ids[i].to_string(),
                self.folds[i].to_string(),
                self.y[i].to_string(),
                self.treatment[i].to_string(),
                self.interaction[i].to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DmlEstimate {
    pub tau: Wald,
    pub gamma: Wald,
    /// Final-stage intercept; expected near zero.
    pub intercept: Wald,
    pub n: usize,
    pub folds: usize,
    pub seed: u64,
    pub confidence_level: f64,
    pub controls: Vec<String>,
    pub diagnostics: Vec<FoldDiagnostic>,
    pub warnings: Vec<String>,
}

/// Runs the estimator with the configured gradient-boosted learner.
pub fn dml_fit(frame: &ModelFrame, config: &DmlConfig) -> Result<(DmlEstimate, ResidualSet)> {
    dml_fit_with(frame, config, &config.learner)
}

pub fn dml_fit_with(
    frame: &ModelFrame,
    config: &DmlConfig,
    learner: &dyn NuisanceLearner,
) -> Result<(DmlEstimate, ResidualSet)> {
    config.validate()?;
    let folds = assign_folds(frame.len(), config.folds, config.seed)?;
    dml_fit_with_folds(frame, &folds, config, learner)
}

pub fn dml_fit_with_folds(
    frame: &ModelFrame,
    folds: &[usize],
    config: &DmlConfig,
    learner: &dyn NuisanceLearner,
) -> Result<(DmlEstimate, ResidualSet)> {
    let targets: [(&str, &[f64]); 3] = [
        ("y", &frame.y),
        ("treatment", &frame.treatment),
        ("interaction", &frame.interaction),
    ];
    let mut parts = targets
        .par_iter()
        .map(|(name, target)| {
            crossfit_residualize(&frame.controls, target, folds, learner, config.seed, name)
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter();
    let ry = parts.next().expect("three targets");
    let rt = parts.next().expect("three targets");
    let rtx = parts.next().expect("three targets");

    let corr = correlation(&rt.residuals, &rtx.residuals);
    if !(corr.abs() <= 0.999) {
        return Err(Error::CollinearResiduals { correlation: corr });
    }

    let n = frame.len();
    let ones = vec![1.0; n];
    let design = Matrix::from_columns(&[&ones, &rt.residuals, &rtx.residuals])?;
    let fit = ols_hc1(&design, &ry.residuals)?;
    let level = config.confidence_level;

    let mut diagnostics = ry.diagnostics;
    diagnostics.extend(rt.diagnostics);
    diagnostics.extend(rtx.diagnostics);
    let mut warnings = ry.warnings;
    warnings.extend(rt.warnings);
    warnings.extend(rtx.warnings);

    let estimate = DmlEstimate {
        tau: fit.wald(1, level),
        gamma: fit.wald(2, level),
        intercept: fit.wald(0, level),
        n,
        folds: config.folds,
        seed: config.seed,
        confidence_level: level,
        controls: frame.control_names.clone(),
        diagnostics: diagnostics.clone(),
        warnings: warnings.clone(),
    };
    let residuals = ResidualSet {
        y: ry.residuals,
        treatment: rt.residuals,
        interaction: rtx.residuals,
        folds: folds.to_vec(),
        diagnostics,
        warnings,
    };
    Ok((estimate, residuals))
}

/// OLS of the outcome on `[1, T, T*X]` with no controls; the confounded
/// baseline the orthogonalized estimator is compared against.
pub fn naive_ols(frame: &ModelFrame, level: f64) -> Result<(Wald, Wald)> {
    let ones = vec![1.0; frame.len()];
    let design = Matrix::from_columns(&[&ones, &frame.treatment, &frame.interaction])?;
    let fit = ols_hc1(&design, &frame.y)?;
    Ok((fit.wald(1, level), fit.wald(2, level)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn folds_are_balanced_and_reproducible() {
        let f = assign_folds(10, 5, 3).unwrap();
        let mut sizes = [0; 5];
        f.iter().for_each(|&k| sizes[k] += 1);
        assert_eq!(sizes, [2; 5]);
        assert_eq!(f, assign_folds(10, 5, 3).unwrap());

        let f = assign_folds(1343, 5, 42).unwrap();
        let mut sizes = [0; 5];
        f.iter().for_each(|&k| sizes[k] += 1);
        let mut sorted = sizes.to_vec();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![268, 268, 269, 269, 269]);
        assert!(assign_folds(3, 5, 0).is_err());
    }

    #[test]
    fn micro_fixture_residuals_are_out_of_fold_means() {
        let controls = Matrix::from_rows(&[vec![0.0], vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        let target = [1.0, 2.0, 4.0, 8.0];
        let folds = [0, 1, 0, 1];
        // Fold {0,2} is predicted by mean(2, 8) = 5; fold {1,3} by mean(1, 4) = 2.5.
        let expected = [1.0 - 5.0, 2.0 - 2.5, 4.0 - 5.0, 8.0 - 2.5];
        let gbrt = GbrtConfig {
            subsample: 1.0,
            ..GbrtConfig::default()
        };
        for learner in [&MeanLearner as &dyn NuisanceLearner, &gbrt] {
            let r = crossfit_residualize(&controls, &target, &folds, learner, 0, "t").unwrap();
            assert_eq!(r.residuals, expected);
        }
    }

    #[test]
    fn constant_training_target_warns() {
        let controls = Matrix::from_rows(&[vec![0.0], vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        let r = crossfit_residualize(&controls, &[1.0, 1.0, 1.0, 1.0], &[0, 1, 0, 1], &MeanLearner, 0, "t")
            .unwrap();
        assert_eq!(r.warnings.len(), 2);
        assert!(r.residuals.iter().all(|v| *v == 0.0));
    }

    fn toy_frame(n: usize, seed: u64) -> ModelFrame {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = Vec::new();
        let mut y = Vec::new();
        let mut t = Vec::new();
        let mut x = Vec::new();
        for _ in 0..n {
            let w0: f64 = rng.gen_range(0.0..1.0);
            let w1: f64 = rng.gen_range(0.0..1.0);
            let xi = if rng.gen::<bool>() { 0.1 } else { 0.5 };
            let ti = (0.3 * w0 + rng.gen_range(0.0..0.7)).min(1.0);
            let yi = 0.1 + 0.2 * w0 * w0 + 0.05 * ti + 0.3 * ti * xi + rng.gen_range(-0.1..0.1);
            w.push(vec![xi, w0, w1]);
            y.push(yi);
            t.push(ti);
            x.push(xi);
        }
        let interaction = t.iter().zip(&x).map(|(a, b)| a * b).collect();
        ModelFrame {
            row_ids: (0..n).collect(),
            y,
            treatment: t,
            moderator: x,
            interaction,
            controls: Matrix::from_rows(&w).unwrap(),
            control_names: vec!["x".into(), "w0".into(), "w1".into()],
        }
    }

    fn quick_config() -> DmlConfig {
        DmlConfig {
            learner: GbrtConfig {
                n_trees: 60,
                learning_rate: 0.1,
                ..GbrtConfig::default()
            },
            seed: 5,
            ..DmlConfig::default()
        }
    }

    #[test]
    fn fold_relabeling_is_bit_exact() {
        let frame = toy_frame(400, 1);
        let config = quick_config();
        let folds = assign_folds(frame.len(), 5, 9).unwrap();
        let relabeled: Vec<usize> = folds.iter().map(|f| (f + 3) % 5).collect();
        let (a, _) = dml_fit_with_folds(&frame, &folds, &config, &config.learner).unwrap();
        let (b, _) = dml_fit_with_folds(&frame, &relabeled, &config, &config.learner).unwrap();
        assert_eq!(a.tau, b.tau);
        assert_eq!(a.gamma, b.gamma);
    }

    #[test]
    fn outcome_shift_leaves_effects_unchanged() {
        let frame = toy_frame(400, 2);
        let config = quick_config();
        let (a, _) = dml_fit(&frame, &config).unwrap();
        let shifted = ModelFrame {
            y: frame.y.iter().map(|v| v + 3.0).collect(),
            ..frame.clone()
        };
        let (b, _) = dml_fit(&shifted, &config).unwrap();
        assert!((a.tau.estimate - b.tau.estimate).abs() < 1e-10);
        assert!((a.gamma.estimate - b.gamma.estimate).abs() < 1e-10);
    }

    #[test]
    fn deterministic_and_centered_residuals() {
        let frame = toy_frame(600, 3);
        let config = quick_config();
        let (a, ra) = dml_fit(&frame, &config).unwrap();
        let (b, _) = dml_fit(&frame, &config).unwrap();
        assert_eq!(a, b);
        for r in [&ra.y, &ra.treatment, &ra.interaction] {
            let n = r.len() as f64;
            let m = crate::stats::mean(r);
            let sd = crate::stats::sample_sd(r);
            assert!(m.abs() < 3.0 * sd / n.sqrt(), "mean {m} sd {sd}");
        }
    }

    #[test]
    fn collinear_residuals_are_rejected() {
        let mut frame = toy_frame(200, 4);
        // Constant moderator: the interaction is a multiple of the treatment.
        frame.moderator = vec![0.3; frame.len()];
        let frame = frame.with_treatment(frame.treatment.clone()).unwrap();
        let mut controls = Vec::new();
        for i in 0..frame.len() {
            controls.push(vec![frame.controls.get(i, 1), frame.controls.get(i, 2)]);
        }
        let frame = ModelFrame {
            controls: Matrix::from_rows(&controls).unwrap(),
            control_names: vec!["w0".into(), "w1".into()],
            ..frame
        };
        assert!(matches!(
            dml_fit_with(&frame, &quick_config(), &MeanLearner),
            Err(Error::CollinearResiduals { .. })
        ));
    }
}
