//! Command-line front end.
//!
//! Every command writes its artifacts plus a `manifest.json` into
//! `--out-dir`. The manifest records the resolved configuration, the input
//! digests and the output digests; `replay` reruns a manifest and checks
//! that every artifact is reproduced byte for byte. Exit codes: 0 success,
//! 1 usage error, 2 data error, 3 numerical failure.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use dualstress_core::dml::{dml_fit, naive_ols, DmlConfig, ModelFrame};
use dualstress_core::glm::{fit_lag_profile, IrlsOptions};
use dualstress_core::panel::{assemble_panel, validate_leakage, PanelRow, RawInputs};
use dualstress_core::robustness::{default_seeds, placebo_test, seed_sweep, PlaceboMode, PlaceboSpec};
use dualstress_core::shapley::{
    fit_predictive_model, importance_from_attributions, sample_background, DependenceTable,
    Explainer, PredictiveConfig, PREDICTIVE_FEATURES,
};
use dualstress_core::synth::{generate_panel, run_scenarios, DgpConfig, ScenarioGrid, PRESETS};
use dualstress_core::{io, report, rng, Error, ErrorKind, GbrtConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Parser, Debug)]
#[command(name = "dualstress", version, about = "Strike and inflation shocks on student dropout: panel assembly, lagged logits, double machine learning, placebo audits, Shapley attribution and synthetic data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Assemble the student-semester panel from enrollment, CPI and strike files.
    BuildPanel(BuildPanelArgs),
    /// Lagged logit models, one per strike lag (Lag / ATE / p-value table).
    FitLags(FitLagsArgs),
    /// Cross-fitted double machine learning for the strike effect and the interaction.
    FitDml(FitDmlArgs),
    /// Placebo test with a fake strike treatment.
    Placebo(PlaceboArgs),
    /// Re-estimate the model over a range of cross-fitting seeds.
    SeedSweep(SeedSweepArgs),
    /// Gradient-boosted dropout model with Shapley importance and dependence data.
    PredictShap(PredictShapArgs),
    /// Generate a synthetic panel with known structural parameters.
    Synth(SynthArgs),
    /// Scenario attrition curves and the amplification of combined shocks.
    Scenarios(ScenariosArgs),
    /// Rerun a manifest and verify that every artifact is reproduced.
    Replay(ReplayArgs),
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct Output {
    /// Directory receiving the artifacts.
    #[arg(long)]
    #[serde(skip)]
    pub out_dir: PathBuf,
    /// Worker threads (0 = all cores); outputs do not depend on it.
    #[arg(long, default_value_t = 0)]
    #[serde(skip)]
    pub threads: usize,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct LearnerArgs {
    /// Boosting rounds of the tree ensemble.
    #[arg(long, default_value_t = 200)]
    pub trees: usize,
    /// Maximum tree depth.
    #[arg(long, default_value_t = 3)]
    pub depth: usize,
    #[arg(long, default_value_t = 0.05)]
    pub learning_rate: f64,
    /// Row subsampling fraction per tree.
    #[arg(long, default_value_t = 0.8)]
    pub subsample: f64,
}

impl LearnerArgs {
    fn config(&self) -> GbrtConfig {
        GbrtConfig {
            n_trees: self.trees,
            max_depth: self.depth,
            learning_rate: self.learning_rate,
            subsample: self.subsample,
            ..GbrtConfig::default()
        }
    }
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct BuildPanelArgs {
    /// Enrollment CSV.
    #[arg(long)]
    pub enrollment: PathBuf,
    /// Monthly CPI CSV (year, month, variacion).
    #[arg(long)]
    pub cpi: PathBuf,
    /// Strike calendar CSV.
    #[arg(long)]
    pub strikes: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub output: Output,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct FitLagsArgs {
    /// Panel CSV written by build-panel or synth.
    #[arg(long)]
    pub panel: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub output: Output,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct FitDmlArgs {
    #[arg(long)]
    pub panel: PathBuf,
    /// Cross-fitting folds.
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[command(flatten)]
    #[serde(flatten)]
    pub learner: LearnerArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub output: Output,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct PlaceboArgs {
    #[arg(long)]
    pub panel: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// permute, permute-within-cohort or gaussian.
    #[arg(long, default_value = "permute")]
    pub placebo_mode: String,
    #[command(flatten)]
    #[serde(flatten)]
    pub learner: LearnerArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub output: Output,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct SeedSweepArgs {
    #[arg(long)]
    pub panel: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    /// First cross-fitting seed; the sweep uses seed, seed + 1, ...
    #[arg(long, default_value_t = 1000)]
    pub seed: u64,
    /// Number of seeds.
    #[arg(long, default_value_t = 30)]
    pub seeds: usize,
    #[command(flatten)]
    #[serde(flatten)]
    pub learner: LearnerArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub output: Output,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct PredictShapArgs {
    #[arg(long)]
    pub panel: PathBuf,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Background rows for the interventional Shapley values.
    #[arg(long, default_value_t = 256)]
    pub background: usize,
    /// Held-out rows explained (a seeded sample when the test set is larger).
    #[arg(long, default_value_t = 2000)]
    pub explain_rows: usize,
    /// Comma-separated model features.
    #[arg(long, default_value_t = PREDICTIVE_FEATURES.join(","))]
    pub features: String,
    #[command(flatten)]
    #[serde(flatten)]
    pub learner: LearnerArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub output: Output,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct SynthArgs {
    /// dual-stressor, paper-scale, lag-profile, null or scenario.
    #[arg(long, default_value = "dual-stressor")]
    pub preset: String,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[command(flatten)]
    #[serde(flatten)]
    pub output: Output,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct ScenariosArgs {
    #[arg(long, default_value = "scenario")]
    pub preset: String,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Override the preset's interaction strength.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Simulated students per scenario.
    #[arg(long, default_value_t = 50_000)]
    pub students: usize,
    /// Semester at which cumulative attrition is compared.
    #[arg(long, default_value_t = 6)]
    pub horizon: u32,
    #[command(flatten)]
    #[serde(flatten)]
    pub output: Output,
}

#[derive(Args, Debug, Clone)]
pub struct ReplayArgs {
    /// Manifest written by an earlier run.
    #[arg(long)]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

/// Everything needed to reproduce a run's artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: Option<u64>,
    /// Resolved flags, excluding the output directory and thread count.
    pub config: BTreeMap<String, Value>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Failure of a command, carrying its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e.kind() {
            ErrorKind::Usage => EXIT_USAGE,
            ErrorKind::Data => EXIT_DATA,
            ErrorKind::Numerical => EXIT_NUMERICAL,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type CmdResult<T> = std::result::Result<T, Failure>;

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message: message.into(),
    }
}

/// Artifacts of one command, written in name order.
#[derive(Default)]
struct Artifacts {
    files: BTreeMap<String, Vec<u8>>,
}

impl Artifacts {
    fn add(&mut self, name: &str, contents: impl Into<Vec<u8>>) {
        self.files.insert(name.to_string(), contents.into());
    }

    fn json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> CmdResult<()> {
        self.add(name, io::json_string(value)?);
        Ok(())
    }
}

struct Run {
    command: &'static str,
    seed: Option<u64>,
    config: Value,
    inputs: Vec<PathBuf>,
    output: Output,
}

fn read_panel(path: &Path) -> CmdResult<Vec<PanelRow>> {
    Ok(io::read_panel(path)?)
}

fn dml_config(folds: usize, seed: u64, learner: &LearnerArgs) -> DmlConfig {
    DmlConfig {
        folds,
        seed,
        learner: learner.config(),
        ..DmlConfig::default()
    }
}

fn build_panel(a: &BuildPanelArgs, out: &mut Artifacts) -> CmdResult<()> {
    let inputs = RawInputs {
        records: io::read_enrollment(&a.enrollment)?,
        cpi: io::read_cpi(&a.cpi)?,
        calendar: io::read_strikes(&a.strikes)?,
    };
    let (panel, assembly) = assemble_panel(&inputs)?;
    let violations = validate_leakage(&panel, &inputs);
    out.add("panel.csv", io::panel_csv(&panel)?);
    out.json(
        "report.json",
        &json!({ "assembly": assembly, "leakage_violations": violations }),
    )?;
    let mut text = report::table3_text(&assembly);
    text.push_str(&format!(
        "rows: {} input, {} retained, {} with all lags; leakage violations: {}\n",
        assembly.input_rows,
        assembly.retained_rows,
        assembly.rows_with_all_lags,
        violations.len()
    ));
    out.add("report.txt", text);
    Ok(())
}

fn fit_lags(a: &FitLagsArgs, out: &mut Artifacts) -> CmdResult<()> {
    let panel = read_panel(&a.panel)?;
    let table = fit_lag_profile(&panel, &[1, 2, 3], IrlsOptions::default());
    if table.rows.iter().all(|r| r.effect.is_none()) {
        let reason = table.rows.iter().filter_map(|r| r.error.clone()).collect::<Vec<_>>().join("; ");
        return Err(Failure {
            code: EXIT_NUMERICAL,
            message: format!("no lag model could be fitted: {reason}"),
        });
    }
    out.json("report.json", &table)?;
    out.add("report.txt", report::table1_text(&table));
    Ok(())
}

fn fit_dml(a: &FitDmlArgs, out: &mut Artifacts) -> CmdResult<()> {
    let panel = read_panel(&a.panel)?;
    let frame = ModelFrame::from_panel(&panel)?;
    let config = dml_config(a.folds, a.seed, &a.learner);
    let (estimate, residuals) = dml_fit(&frame, &config)?;
    let (naive_tau, naive_gamma) = naive_ols(&frame, config.confidence_level)?;
    out.add("residuals.csv", residuals.to_csv(&frame.row_ids)?);
    let diagnostics = io::csv_string(
        &["target", "fold", "n_train", "n_eval", "out_of_fold_mse"],
        estimate.diagnostics.iter().map(|d| {
            vec![
                d.target.clone(),
                d.fold.to_string(),
                d.n_train.to_string(),
                d.n_eval.to_string(),
                d.out_of_fold_mse.to_string(),
            ]
        }),
    )?;
    out.add("fold_diagnostics.csv", diagnostics);
    out.json(
        "report.json",
        &json!({
            "estimate": estimate,
            "naive_ols": { "tau": naive_tau, "gamma": naive_gamma },
        }),
    )?;
    let mut text = report::table4_text(&estimate);
    text.push_str(&format!(
        "naive OLS without controls: tau = {} (SE {}), gamma = {} (SE {})\n",
        report::fmt4(naive_tau.estimate),
        report::fmt4(naive_tau.std_error),
        report::fmt4(naive_gamma.estimate),
        report::fmt4(naive_gamma.std_error)
    ));
    out.add("report.txt", text);
    Ok(())
}

fn placebo(a: &PlaceboArgs, out: &mut Artifacts) -> CmdResult<()> {
    let mode: PlaceboMode = a.placebo_mode.parse()?;
    let panel = read_panel(&a.panel)?;
    let frame = ModelFrame::from_panel(&panel)?;
    let config = dml_config(a.folds, a.seed, &a.learner);
    let spec = PlaceboSpec::new(mode, rng::derive_seed(a.seed, &["placebo", "treatment"], 0));
    let table = placebo_test(&frame, &config, &spec)?;
    out.json("report.json", &table)?;
    out.add("report.txt", report::table5_text(&table));
    Ok(())
}

fn sweep(a: &SeedSweepArgs, out: &mut Artifacts) -> CmdResult<()> {
    if a.seeds == 0 {
        return Err(usage("--seeds must be positive"));
    }
    let panel = read_panel(&a.panel)?;
    let frame = ModelFrame::from_panel(&panel)?;
    let config = dml_config(a.folds, a.seed, &a.learner);
    let result = seed_sweep(&frame, &config, &default_seeds(a.seeds, a.seed))?;
    out.add("seed_sweep.csv", result.to_csv()?);
    out.json("report.json", &result)?;
    out.add("report.txt", report::sweep_text(&result));
    Ok(())
}

fn predict_shap(a: &PredictShapArgs, out: &mut Artifacts) -> CmdResult<()> {
    if a.background == 0 || a.explain_rows == 0 {
        return Err(usage("--background and --explain-rows must be positive"));
    }
    let panel = read_panel(&a.panel)?;
    let features: Vec<String> = a
        .features
        .split(',')
        .map(|f| f.trim().to_string())
        .filter(|f| !f.is_empty())
        .collect();
    let config = PredictiveConfig {
        features,
        seed: a.seed,
        learner: a.learner.config(),
        background_size: a.background,
        ..PredictiveConfig::default()
    };
    let model = fit_predictive_model(&panel, &config)?;
    let train = model.train_matrix();
    let background = sample_background(
        &train,
        a.background,
        rng::derive_seed(a.seed, &["predictive", "background"], 0),
    );
    let explained = sample_background(
        &model.test_matrix(),
        a.explain_rows,
        rng::derive_seed(a.seed, &["predictive", "explained"], 0),
    );
    let explainer = Explainer::new(&model.ensemble, &background)?;
    let attributions = explainer.explain_all(&explained)?;
    let worst_gap = attributions.iter().map(|s| s.local_accuracy_gap().abs()).fold(0.0, f64::max);
    let names = &model.feature_names;
    let importance = importance_from_attributions(&attributions, names);
    let index = |name: &str| names.iter().position(|n| n == name);
    let (feature, color) = match (index("strikes_lag2"), index("inflation_at_entry")) {
        (Some(f), Some(c)) => (f, c),
        _ => return Err(usage("the dependence view needs strikes_lag2 and inflation_at_entry")),
    };
    let dependence = DependenceTable::from_attributions(&explained, &attributions, names, feature, color)?;
    let quartiles = json!({
        "bottom_quartile_mean_shap": dependence.mean_shap_in_color_band(0.0, 0.25),
        "top_quartile_mean_shap": dependence.mean_shap_in_color_band(0.75, 1.0),
        "bottom_quartile_mean_abs_shap": dependence.mean_abs_shap_in_color_band(0.0, 0.25),
        "top_quartile_mean_abs_shap": dependence.mean_abs_shap_in_color_band(0.75, 1.0),
    });

    out.add(
        "importance.csv",
        io::csv_string(
            &["rank", "feature", "mean_abs_shap"],
            importance
                .iter()
                .enumerate()
                .map(|(r, f)| vec![(r + 1).to_string(), f.feature.clone(), f.mean_abs_shap.to_string()]),
        )?,
    );
    out.add(
        "dependence.csv",
        io::csv_string(
            &[dependence.feature.as_str(), "shap_value", dependence.color_feature.as_str()],
            dependence.rows.iter().map(|r| {
                vec![r.feature_value.to_string(), r.shap_value.to_string(), r.color_value.to_string()]
            }),
        )?,
    );
    out.add(
        "reliability.csv",
        io::csv_string(
            &["lower", "upper", "count", "mean_predicted", "observed_rate"],
            model.report.reliability.iter().map(|b| {
                vec![
                    b.lower.to_string(),
                    b.upper.to_string(),
                    b.count.to_string(),
                    b.mean_predicted.map(|v| v.to_string()).unwrap_or_default(),
                    b.observed_rate.map(|v| v.to_string()).unwrap_or_default(),
                ]
            }),
        )?,
    );
    out.json(
        "report.json",
        &json!({
            "model": model.report,
            "features": names,
            "explained_rows": explained.rows(),
            "background_rows": background.rows(),
            "baseline": explainer.baseline(),
            "max_local_accuracy_gap": worst_gap,
            "importance": importance,
            "dependence": {
                "feature": dependence.feature,
                "color_feature": dependence.color_feature,
                "by_color_quartile": quartiles,
            },
        }),
    )?;
    out.add("report.txt", report::importance_text(&importance, &model.report));
    Ok(())
}

fn synth(a: &SynthArgs, out: &mut Artifacts) -> CmdResult<()> {
    let config = DgpConfig::preset(&a.preset, a.seed)?;
    let data = generate_panel(&config)?;
    out.add("enrollment.csv", io::enrollment_csv(&data.inputs.records)?);
    out.add("cpi.csv", io::cpi_csv(&data.inputs.cpi)?);
    out.add("strikes.csv", io::strikes_csv(&data.inputs.calendar)?);
    out.add("panel.csv", io::panel_csv(&data.panel)?);
    out.add(
        "truth.csv",
        io::csv_string(
            &["student_id", "semester_number", "probability"],
            data.truth
                .rows
                .iter()
                .map(|r| vec![r.student_id.clone(), r.semester_number.to_string(), r.probability.to_string()]),
        )?,
    );
    let truth = &data.truth;
    out.json(
        "report.json",
        &json!({
            "preset": a.preset,
            "config": config,
            "truth": {
                "alpha": truth.alpha,
                "tau": truth.tau,
                "gamma": truth.gamma,
                "inflation_effect": truth.inflation_effect,
                "seed": truth.seed,
                "cohort_sizes": truth.cohort_sizes,
                "out_of_range_share": truth.out_of_range_share,
                "warnings": truth.warnings,
            },
            "assembly": data.report,
        }),
    )?;
    let mut text = format!(
        "Synthetic panel `{}` (seed {}): tau = {}, gamma = {}, {} students, {} panel rows\n\n",
        a.preset,
        a.seed,
        report::fmt4(truth.tau),
        report::fmt4(truth.gamma),
        config.n_students,
        data.panel.len()
    );
    text.push_str(&report::table3_text(&data.report));
    for w in &truth.warnings {
        text.push_str(&format!("warning: {w}\n"));
    }
    out.add("report.txt", text);
    Ok(())
}

fn scenarios(a: &ScenariosArgs, out: &mut Artifacts) -> CmdResult<()> {
    let mut config = DgpConfig::preset(&a.preset, a.seed)?;
    if let Some(g) = a.gamma {
        config.gamma = g;
    }
    let grid = ScenarioGrid {
        horizon: a.horizon,
        n_students: a.students,
        ..ScenarioGrid::default()
    };
    let result = run_scenarios(&grid, &config)?;
    let mut header = vec!["semester".to_string()];
    header.extend(result.curves.iter().map(|c| c.scenario.clone()));
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    out.add(
        "curves.csv",
        io::csv_string(
            &header_refs,
            (0..grid.horizon as usize).map(|h| {
                let mut row = vec![(h + 1).to_string()];
                row.extend(result.curves.iter().map(|c| c.cumulative_dropout[h].to_string()));
                row
            }),
        )?,
    );
    out.json(
        "report.json",
        &json!({ "preset": a.preset, "gamma": config.gamma, "tau": config.tau, "result": result }),
    )?;
    out.add("report.txt", report::amplification_text(&result.report));
    Ok(())
}

fn execute(command: &Command, out: &mut Artifacts) -> CmdResult<()> {
    match command {
        Command::BuildPanel(a) => build_panel(a, out),
        Command::FitLags(a) => fit_lags(a, out),
        Command::FitDml(a) => fit_dml(a, out),
        Command::Placebo(a) => placebo(a, out),
        Command::SeedSweep(a) => sweep(a, out),
        Command::PredictShap(a) => predict_shap(a, out),
        Command::Synth(a) => synth(a, out),
        Command::Scenarios(a) => scenarios(a, out),
        Command::Replay(_) => unreachable!("replay is dispatched separately"),
    }
}

fn describe(command: &Command) -> CmdResult<Run> {
    fn run<T: Serialize>(
        command: &'static str,
        args: &T,
        seed: Option<u64>,
        inputs: Vec<PathBuf>,
        output: &Output,
    ) -> CmdResult<Run> {
        let config = serde_json::to_value(args).map_err(|e| usage(e.to_string()))?;
        Ok(Run {
            command,
            seed,
            config,
            inputs,
            output: output.clone(),
        })
    }
    match command {
        Command::BuildPanel(a) => run(
            "build-panel",
            a,
            None,
            vec![a.enrollment.clone(), a.cpi.clone(), a.strikes.clone()],
            &a.output,
        ),
        Command::FitLags(a) => run("fit-lags", a, None, vec![a.panel.clone()], &a.output),
        Command::FitDml(a) => run("fit-dml", a, Some(a.seed), vec![a.panel.clone()], &a.output),
        Command::Placebo(a) => run("placebo", a, Some(a.seed), vec![a.panel.clone()], &a.output),
        Command::SeedSweep(a) => run("seed-sweep", a, Some(a.seed), vec![a.panel.clone()], &a.output),
        Command::PredictShap(a) => run("predict-shap", a, Some(a.seed), vec![a.panel.clone()], &a.output),
        Command::Synth(a) => run("synth", a, Some(a.seed), vec![], &a.output),
        Command::Scenarios(a) => run("scenarios", a, Some(a.seed), vec![], &a.output),
        Command::Replay(_) => unreachable!("replay is dispatched separately"),
    }
}

fn digest_file(path: &Path) -> CmdResult<FileDigest> {
    let bytes = std::fs::read(path).map_err(|e| {
        Failure::from(Error::Data {
            file: path.to_path_buf(),
            line: 0,
            column: String::new(),
            message: e.to_string(),
        })
    })?;
    Ok(FileDigest {
        path: path.display().to_string(),
        sha256: sha256_hex(&bytes),
    })
}

fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> CmdResult<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| usage(format!("cannot start {threads} worker threads: {e}")))?;
    Ok(pool.install(f))
}

/// Runs one non-replay command and writes its artifacts and manifest.
fn perform(command: &Command) -> CmdResult<RunManifest> {
    let run = describe(command)?;
    let inputs = run.inputs.iter().map(|p| digest_file(p)).collect::<CmdResult<Vec<_>>>()?;
    let mut artifacts = Artifacts::default();
    with_threads(run.output.threads, || execute(command, &mut artifacts))??;

    let config = match run.config {
        Value::Object(map) => map.into_iter().collect(),
        _ => BTreeMap::new(),
    };
    let mut manifest = RunManifest {
        tool: "dualstress".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: run.command.into(),
        seed: run.seed,
        config,
        inputs,
        outputs: Vec::new(),
    };
    for (name, bytes) in &artifacts.files {
        io::write_file(&run.output.out_dir.join(name), bytes)?;
        manifest.outputs.push(FileDigest {
            path: name.clone(),
            sha256: sha256_hex(bytes),
        });
    }
    io::write_file(&run.output.out_dir.join(MANIFEST_FILE), io::json_string(&manifest)?.as_bytes())?;
    Ok(manifest)
}

/// Command line equivalent to a manifest, writing into `out_dir`.
pub fn manifest_argv(manifest: &RunManifest, out_dir: &Path, threads: usize) -> Vec<OsString> {
    let mut argv: Vec<OsString> = vec!["dualstress".into(), manifest.command.clone().into()];
    for (key, value) in &manifest.config {
        let text = match value {
            Value::Null => continue,
            Value::String(s) => s.clone(),
            other => other.to_string(),
        };
        argv.push(format!("--{}", key.replace('_', "-")).into());
        argv.push(text.into());
    }
    argv.push("--out-dir".into());
    argv.push(out_dir.as_os_str().to_owned());
    argv.push("--threads".into());
    argv.push(threads.to_string().into());
    argv
}

fn replay(a: &ReplayArgs) -> CmdResult<()> {
    let text = std::fs::read_to_string(&a.manifest).map_err(|e| {
        Failure::from(Error::Data {
            file: a.manifest.clone(),
            line: 0,
            column: String::new(),
            message: e.to_string(),
        })
    })?;
    let recorded: RunManifest = serde_json::from_str(&text).map_err(|e| {
        Failure::from(Error::Data {
            file: a.manifest.clone(),
            line: e.line() as u64,
            column: String::new(),
            message: e.to_string(),
        })
    })?;
    for input in &recorded.inputs {
        let now = digest_file(Path::new(&input.path))?;
        if now.sha256 != input.sha256 {
            return Err(Failure {
                code: EXIT_DATA,
                message: format!("input {} changed since the manifest was written", input.path),
            });
        }
    }
    let argv = manifest_argv(&recorded, &a.output.out_dir, a.output.threads);
    let command = parse(&argv).map_err(|e| usage(format!("manifest does not form a valid command: {e}")))?;
    if matches!(command, Command::Replay(_)) {
        return Err(usage("a replay manifest cannot be replayed"));
    }
    let fresh = perform(&command)?;
    if fresh != recorded {
        let differing: Vec<String> = recorded
            .outputs
            .iter()
            .filter(|o| !fresh.outputs.contains(o))
            .map(|o| o.path.clone())
            .collect();
        return Err(Failure {
            code: EXIT_NUMERICAL,
            message: format!("replay differs from the manifest in: {}", differing.join(", ")),
        });
    }
    Ok(())
}

fn parse(argv: &[OsString]) -> Result<Command, clap::Error> {
    let matches = Cli::command().try_get_matches_from(argv)?;
    Ok(Cli::from_arg_matches(&matches)?.command)
}

/// Runs the tool on `argv` (including the program name) and returns the
/// process exit code. Messages go to stdout/stderr.
pub fn run(argv: Vec<OsString>) -> i32 {
    let command = match parse(&argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind as K;
            if matches!(e.kind(), K::DisplayHelp | K::DisplayVersion) {
                print!("{e}");
                return EXIT_OK;
            }
            eprintln!("{e}");
            eprintln!("{}", help_for(&argv));
            return EXIT_USAGE;
        }
    };
    let outcome = match &command {
        Command::Replay(a) => replay(a),
        other => perform(other).map(|_| ()),
    };
    match outcome {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

/// Help text of the named subcommand, or of the whole tool.
fn help_for(argv: &[OsString]) -> String {
    let mut root = Cli::command();
    root.build();
    let name = argv.get(1).and_then(|s| s.to_str()).unwrap_or("");
    match root.find_subcommand_mut(name) {
        Some(sub) => sub.render_help().to_string(),
        None => root.render_help().to_string(),
    }
}

/// Names accepted by `--preset`.
pub fn presets() -> &'static [&'static str] {
    &PRESETS
}
