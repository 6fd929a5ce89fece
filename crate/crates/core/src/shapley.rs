//! Exact interventional Shapley values for boosted tree ensembles, plus the
//! independent predictive model they explain.
//!
//! For one instance `x` and one background row `b`, the value of a feature
//! coalition `S` is the prediction at the hybrid point taking `x` on `S` and
//! `b` elsewhere. Walking a tree, a split sends `x` and `b` either the same
//! way (the feature is irrelevant there) or different ways, in which case the
//! walk branches: one side commits the feature to `x`, the other to `b`. A
//! leaf reached with `a` features committed to `x` and `c` to `b` is the
//! indicator game over those `a + c` players, whose Shapley values are
//! closed-form. Averaging over the background gives the interventional
//! attribution.

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glm::control_value;
use crate::linalg::Matrix;
use crate::panel::PanelRow;
use crate::rng;
use crate::stats::rank_auc;
use crate::trees::{fit_gbrt, GbrtConfig, GradientBoostedEnsemble, Node, RegressionTree};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapAttribution {
    pub values: Vec<f64>,
    /// Mean prediction over the background rows.
    pub baseline: f64,
    pub prediction: f64,
}

impl ShapAttribution {
    /// `baseline + sum(values) - prediction`; zero up to rounding.
    pub fn local_accuracy_gap(&self) -> f64 {
        self.baseline + self.values.iter().sum::<f64>() - self.prediction
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Side {
    Free,
    Instance,
    Background,
}

/// Shapley weights of the indicator game, indexed by `(a, c)`.
struct Weights {
    factorial: Vec<f64>,
}

impl Weights {
    fn new(max_players: usize) -> Self {
        let mut factorial = vec![1.0; max_players + 1];
        for i in 1..=max_players {
            factorial[i] = factorial[i - 1] * i as f64;
        }
        Self { factorial }
    }

    /// Weight of a player committed to the instance side.
    fn positive(&self, a: usize, c: usize) -> f64 {
        self.factorial[a - 1] * self.factorial[c] / self.factorial[a + c]
    }

    /// Weight (negated) of a player committed to the background side.
    fn negative(&self, a: usize, c: usize) -> f64 {
        self.factorial[a] * self.factorial[c - 1] / self.factorial[a + c]
    }
}

struct Walk<'a> {
    nodes: &'a [Node],
    x: &'a [f64],
    b: &'a [f64],
    weights: &'a Weights,
    sides: Vec<Side>,
    instance_set: Vec<usize>,
    background_set: Vec<usize>,
}

impl Walk<'_> {
    fn visit(&mut self, idx: usize, scale: f64, out: &mut [f64]) {
        match &self.nodes[idx] {
            Node::Leaf { value, .. } => {
                let (a, c) = (self.instance_set.len(), self.background_set.len());
                let v = value * scale;
                if a > 0 {
                    let w = v * self.weights.positive(a, c);
                    for &j in &self.instance_set {
                        out[j] += w;
                    }
                }
                if c > 0 {
                    let w = v * self.weights.negative(a, c);
                    for &j in &self.background_set {
                        out[j] -= w;
                    }
                }
            }
            &Node::Split {
                feature,
                threshold,
                left,
                right,
                ..
            } => {
                let x_child = if self.x[feature] <= threshold { left } else { right };
                let b_child = if self.b[feature] <= threshold { left } else { right };
                if x_child == b_child {
                    return self.visit(x_child, scale, out);
                }
                match self.sides[feature] {
                    Side::Instance => self.visit(x_child, scale, out),
                    Side::Background => self.visit(b_child, scale, out),
                    Side::Free => {
                        self.sides[feature] = Side::Instance;
                        self.instance_set.push(feature);
                        self.visit(x_child, scale, out);
                        self.instance_set.pop();

                        self.sides[feature] = Side::Background;
                        self.background_set.push(feature);
                        self.visit(b_child, scale, out);
                        self.background_set.pop();
                        self.sides[feature] = Side::Free;
                    }
                }
            }
        }
    }
}

fn check_arity(n_features: usize, x: &[f64], background: &Matrix) -> Result<()> {
    if background.rows() == 0 {
        return Err(Error::InvalidArgument("background dataset is empty".into()));
    }
    if x.len() != n_features || background.cols() != n_features {
        return Err(Error::Schema(format!(
            "instance has {} features and background {}, model expects {n_features}",
            x.len(),
            background.cols()
        )));
    }
    Ok(())
}

fn accumulate_tree(
    tree: &RegressionTree,
    x: &[f64],
    background: &Matrix,
    weights: &Weights,
    scale: f64,
    out: &mut [f64],
) {
    let mut walk = Walk {
        nodes: &tree.nodes,
        x,
        b: x,
        weights,
        sides: vec![Side::Free; x.len()],
        instance_set: Vec::new(),
        background_set: Vec::new(),
    };
    for r in 0..background.rows() {
        walk.b = background.row(r);
        walk.visit(0, scale, out);
    }
}

/// Interventional Shapley values of a single tree (unscaled leaf values).
pub fn tree_shap_values(tree: &RegressionTree, x: &[f64], background: &Matrix) -> Result<Vec<f64>> {
    check_arity(x.len(), x, background)?;
    let weights = Weights::new(tree.depth().max(1));
    let mut out = vec![0.0; x.len()];
    accumulate_tree(tree, x, background, &weights, 1.0 / background.rows() as f64, &mut out);
    Ok(out)
}

/// Interventional Shapley values of the ensemble at `x` against `background`.
pub fn shap_values(
    ensemble: &GradientBoostedEnsemble,
    x: &[f64],
    background: &Matrix,
) -> Result<ShapAttribution> {
    let explainer = Explainer::new(ensemble, background)?;
    explainer.explain(x)
}

/// Reusable explainer that caches the background mean prediction.
pub struct Explainer<'a> {
    ensemble: &'a GradientBoostedEnsemble,
    background: &'a Matrix,
    baseline: f64,
    weights: Weights,
}

impl<'a> Explainer<'a> {
    pub fn new(ensemble: &'a GradientBoostedEnsemble, background: &'a Matrix) -> Result<Self> {
        check_arity(ensemble.n_features, &vec![0.0; ensemble.n_features], background)?;
        let preds = ensemble.predict_matrix(background)?;
        let baseline = preds.iter().sum::<f64>() / preds.len() as f64;
        let depth = ensemble.trees.iter().map(RegressionTree::depth).max().unwrap_or(1);
        Ok(Self {
            ensemble,
            background,
            baseline,
            weights: Weights::new(depth.max(1)),
        })
    }

    pub fn baseline(&self) -> f64 {
        self.baseline
    }

    pub fn explain(&self, x: &[f64]) -> Result<ShapAttribution> {
        check_arity(self.ensemble.n_features, x, self.background)?;
        let scale = self.ensemble.learning_rate / self.background.rows() as f64;
        let mut values = vec![0.0; x.len()];
        for tree in &self.ensemble.trees {
            accumulate_tree(tree, x, self.background, &self.weights, scale, &mut values);
        }
        Ok(ShapAttribution {
            values,
            baseline: self.baseline,
            prediction: self.ensemble.predict_unchecked(x),
        })
    }

    /// Attributions for every row of `data`, in row order.
    pub fn explain_all(&self, data: &Matrix) -> Result<Vec<ShapAttribution>> {
        (0..data.rows())
            .into_par_iter()
            .map(|i| self.explain(data.row(i)))
            .collect()
    }
}

/// Seeded subsample of at most `max_rows` rows, kept in original order.
pub fn sample_background(data: &Matrix, max_rows: usize, seed: u64) -> Matrix {
    if data.rows() <= max_rows {
        return data.clone();
    }
    let mut r = rng::stream(seed, &["shap", "background"], 0);
    let mut idx = sample(&mut r, data.rows(), max_rows).into_vec();
    idx.sort_unstable();
    data.select_rows(&idx)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureImportance {
    pub feature: String,
    pub index: usize,
    pub mean_abs_shap: f64,
}

/// Mean absolute attribution per feature, descending, ties by feature index.
pub fn importance_from_attributions(
    attributions: &[ShapAttribution],
    names: &[String],
) -> Vec<FeatureImportance> {
    let n = attributions.len().max(1) as f64;
    let mut table: Vec<FeatureImportance> = names
        .iter()
        .enumerate()
        .map(|(j, name)| FeatureImportance {
            feature: name.clone(),
            index: j,
            mean_abs_shap: attributions.iter().map(|a| a.values[j].abs()).sum::<f64>() / n,
        })
        .collect();
    table.sort_by(|a, b| {
        b.mean_abs_shap
            .total_cmp(&a.mean_abs_shap)
            .then(a.index.cmp(&b.index))
    });
    table
}

pub fn global_importance(
    ensemble: &GradientBoostedEnsemble,
    dataset: &Matrix,
    background: &Matrix,
    names: &[String],
) -> Result<Vec<FeatureImportance>> {
    if dataset.rows() == 0 {
        return Err(Error::InvalidArgument("importance needs a non-empty dataset".into()));
    }
    if names.len() != ensemble.n_features {
        return Err(Error::Schema("feature name count differs from model arity".into()));
    }
    let attributions = Explainer::new(ensemble, background)?.explain_all(dataset)?;
    Ok(importance_from_attributions(&attributions, names))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DependenceRow {
    pub feature_value: f64,
    pub shap_value: f64,
    pub color_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DependenceTable {
    pub feature: String,
    pub color_feature: String,
    pub rows: Vec<DependenceRow>,
}

impl DependenceTable {
    pub fn from_attributions(
        dataset: &Matrix,
        attributions: &[ShapAttribution],
        names: &[String],
        feature: usize,
        color_feature: usize,
    ) -> Result<Self> {
        if feature >= names.len() || color_feature >= names.len() {
            return Err(Error::InvalidArgument("dependence feature index out of range".into()));
        }
        let rows = attributions
            .iter()
            .enumerate()
            .map(|(i, a)| DependenceRow {
                feature_value: dataset.get(i, feature),
                shap_value: a.values[feature],
                color_value: dataset.get(i, color_feature),
            })
            .collect();
        Ok(Self {
            feature: names[feature].clone(),
            color_feature: names[color_feature].clone(),
            rows,
        })
    }

    /// Attributions of rows whose color value lies in the `[low_q, high_q]`
    /// quantile band of the color feature.
    fn band(&self, low_q: f64, high_q: f64) -> Vec<f64> {
        let mut colors: Vec<f64> = self.rows.iter().map(|r| r.color_value).collect();
        colors.sort_by(f64::total_cmp);
        let q = |p: f64| colors[((colors.len() - 1) as f64 * p).round() as usize];
        let (lo, hi) = (q(low_q), q(high_q));
        self.rows
            .iter()
            .filter(|r| r.color_value >= lo && r.color_value <= hi)
            .map(|r| r.shap_value)
            .collect()
    }

    /// Mean attribution within a quantile band of the color feature.
    pub fn mean_shap_in_color_band(&self, low_q: f64, high_q: f64) -> f64 {
        let band = self.band(low_q, high_q);
        band.iter().sum::<f64>() / band.len().max(1) as f64
    }

    /// Mean absolute attribution within a quantile band of the color feature.
    pub fn mean_abs_shap_in_color_band(&self, low_q: f64, high_q: f64) -> f64 {
        let band = self.band(low_q, high_q);
        band.iter().map(|v| v.abs()).sum::<f64>() / band.len().max(1) as f64
    }
}

pub fn dependence_data(
    ensemble: &GradientBoostedEnsemble,
    dataset: &Matrix,
    background: &Matrix,
    names: &[String],
    feature: usize,
    color_feature: usize,
) -> Result<DependenceTable> {
    let attributions = Explainer::new(ensemble, background)?.explain_all(dataset)?;
    DependenceTable::from_attributions(dataset, &attributions, names, feature, color_feature)
}

/// Default features of the predictive model: the three strike lags,
/// inflation at entry and the academic controls. The product column and
/// the calendar and cohort years are left out; see [`AVAILABLE_FEATURES`].
pub const PREDICTIVE_FEATURES: [&str; 10] = [
    "strikes_lag1",
    "strikes_lag2",
    "strikes_lag3",
    "inflation_at_entry",
    "cum_gpa",
    "repeat_ratio",
    "credits_approved_cum",
    "semester_number",
    "gender_code",
    "work_status",
];

/// Every panel column usable as a predictive feature.
pub const AVAILABLE_FEATURES: [&str; 14] = [
    "strikes_lag1",
    "strikes_lag2",
    "strikes_lag3",
    "inflation_at_entry",
    "interaction_term",
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

/// Value of a named predictive feature; `None` for a missing lag.
pub fn feature_value(row: &PanelRow, name: &str) -> Option<f64> {
    match name {
        "strikes_lag1" => row.strikes_lag1,
        "strikes_lag2" => row.strikes_lag2,
        "strikes_lag3" => row.strikes_lag3,
        "interaction_term" => row.interaction_term,
        other => Some(control_value(row, other)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictiveConfig {
    pub features: Vec<String>,
    pub test_fraction: f64,
    pub seed: u64,
    pub learner: GbrtConfig,
    pub background_size: usize,
}

impl Default for PredictiveConfig {
    fn default() -> Self {
        Self {
            features: PREDICTIVE_FEATURES.iter().map(|s| s.to_string()).collect(),
            test_fraction: 0.3,
            seed: 0,
            learner: GbrtConfig::default(),
            background_size: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratifiedSplit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Splits each class separately so both halves keep the outcome rate.
/// Indices come back sorted.
pub fn stratified_split(labels: &[bool], test_fraction: f64, seed: u64) -> Result<StratifiedSplit> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidArgument("test fraction must lie in (0, 1)".into()));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (class_index, class) in [false, true].into_iter().enumerate() {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        let mut r = rng::stream(seed, &["predictive", "split"], class_index as u64);
        members.shuffle(&mut r);
        let n_test = (members.len() as f64 * test_fraction).round() as usize;
        if n_test == 0 || n_test == members.len() {
            return Err(Error::DegenerateOutcome(format!(
                "class {} would be absent from one side of the split",
                u8::from(class)
            )));
        }
        test.extend_from_slice(&members[..n_test]);
        train.extend_from_slice(&members[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(StratifiedSplit { train, test })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub mean_predicted: Option<f64>,
    pub observed_rate: Option<f64>,
}

/// Ten equal-width bins over clamped predictions.
pub fn reliability_table(predictions: &[f64], labels: &[bool]) -> Vec<ReliabilityBin> {
    let mut sums = [(0usize, 0.0f64, 0usize); 10];
    for (p, &l) in predictions.iter().zip(labels) {
        let p = p.clamp(0.0, 1.0);
        let bin = ((p * 10.0).floor() as usize).min(9);
        sums[bin].0 += 1;
        sums[bin].1 += p;
        sums[bin].2 += usize::from(l);
    }
    sums.iter()
        .enumerate()
        .map(|(b, &(count, sum_p, ones))| ReliabilityBin {
            lower: b as f64 / 10.0,
            upper: (b + 1) as f64 / 10.0,
            count,
            mean_predicted: (count > 0).then(|| sum_p / count as f64),
            observed_rate: (count > 0).then(|| ones as f64 / count as f64),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucReport {
    pub auc: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub train_outcome_rate: f64,
    pub test_outcome_rate: f64,
    pub reliability: Vec<ReliabilityBin>,
}

#[derive(Debug, Clone)]
pub struct PredictiveModel {
    pub ensemble: GradientBoostedEnsemble,
    pub feature_names: Vec<String>,
    pub split: StratifiedSplit,
    pub report: AucReport,
    /// Feature matrix of the modeled rows; split indices refer to it.
    pub features: Matrix,
    pub labels: Vec<bool>,
    /// Panel index of each modeled row.
    pub row_ids: Vec<usize>,
}

impl PredictiveModel {
    pub fn train_matrix(&self) -> Matrix {
        self.features.select_rows(&self.split.train)
    }

    pub fn test_matrix(&self) -> Matrix {
        self.features.select_rows(&self.split.test)
    }
}

/// Feature matrix over panel rows where every requested feature is present.
pub fn predictive_matrix(
    panel: &[PanelRow],
    features: &[String],
) -> Result<(Matrix, Vec<bool>, Vec<usize>)> {
    for f in features {
        if !AVAILABLE_FEATURES.contains(&f.as_str()) {
            return Err(Error::InvalidArgument(format!("unknown feature `{f}`")));
        }
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut row_ids = Vec::new();
    for (i, r) in panel.iter().enumerate() {
        let values: Option<Vec<f64>> = features.iter().map(|f| feature_value(r, f)).collect();
        if let Some(v) = values {
            data.extend(v);
            labels.push(r.dropout_next_sem == 1);
            row_ids.push(i);
        }
    }
    let m = Matrix::from_row_major(row_ids.len(), features.len(), data)?;
    Ok((m, labels, row_ids))
}

pub fn fit_predictive_model(panel: &[PanelRow], config: &PredictiveConfig) -> Result<PredictiveModel> {
    let (features, labels, row_ids) = predictive_matrix(panel, &config.features)?;
    fit_predictive_matrix(features, labels, row_ids, config)
}

pub fn fit_predictive_matrix(
    features: Matrix,
    labels: Vec<bool>,
    row_ids: Vec<usize>,
    config: &PredictiveConfig,
) -> Result<PredictiveModel> {
    let split = stratified_split(&labels, config.test_fraction, config.seed)?;
    let train_x = features.select_rows(&split.train);
    let train_y: Vec<f64> = split.train.iter().map(|&i| f64::from(u8::from(labels[i]))).collect();
    let learner = config
        .learner
        .with_seed(rng::derive_seed(config.seed, &["predictive", "gbrt"], 0));
    let ensemble = fit_gbrt(&train_x, &train_y, &learner)?;

    let test_x = features.select_rows(&split.test);
    let test_labels: Vec<bool> = split.test.iter().map(|&i| labels[i]).collect();
    let scores = ensemble.predict_matrix(&test_x)?;
    let auc = rank_auc(&scores, &test_labels)?;
    let rate = |idx: &[usize]| idx.iter().filter(|&&i| labels[i]).count() as f64 / idx.len() as f64;
    let report = AucReport {
        auc,
        n_train: split.train.len(),
        n_test: split.test.len(),
        train_outcome_rate: rate(&split.train),
        test_outcome_rate: rate(&split.test),
        reliability: reliability_table(&scores, &test_labels),
    };
    Ok(PredictiveModel {
        ensemble,
        feature_names: config.features.clone(),
        split,
        report,
        features,
        labels,
        row_ids,
    })
}
