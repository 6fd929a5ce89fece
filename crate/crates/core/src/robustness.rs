//! Placebo treatments and seed-sensitivity sweeps for the DML estimator.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::dml::{dml_fit, DmlConfig, DmlEstimate, ModelFrame};
use crate::error::{Error, Result};
use crate::rng;
use crate::stats::{mean, sample_sd, Wald};

pub const PLACEBO_LABEL: &str = "Placebo (Fake Strike)";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlaceboMode {
    /// Global permutation of the observed lag-2 intensities.
    Permute,
    /// Permutation within each entry cohort.
    PermuteWithinCohort,
    /// Independent standard normal draws.
    Gaussian,
}

impl std::str::FromStr for PlaceboMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "permute" => Ok(Self::Permute),
            "permute-within-cohort" => Ok(Self::PermuteWithinCohort),
            "gaussian" => Ok(Self::Gaussian),
            other => Err(Error::InvalidArgument(format!(
                "unknown placebo mode `{other}`; expected permute, permute-within-cohort or gaussian"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlaceboSpec {
    pub mode: PlaceboMode,
    pub seed: u64,
    /// Rebuild the interaction as fake treatment x real inflation.
    pub rebuild_interaction: bool,
}

impl PlaceboSpec {
    pub fn new(mode: PlaceboMode, seed: u64) -> Self {
        Self {
            mode,
            seed,
            rebuild_interaction: true,
        }
    }
}

/// The fake treatment column for `frame`.
pub fn fake_strike(frame: &ModelFrame, spec: &PlaceboSpec) -> Result<Vec<f64>> {
    let mut r = rng::stream(spec.seed, &["placebo", "treatment"], 0);
    match spec.mode {
        PlaceboMode::Permute => {
            let mut fake = frame.treatment.clone();
            fake.shuffle(&mut r);
            Ok(fake)
        }
        PlaceboMode::PermuteWithinCohort => {
            let col = frame
                .control_names
                .iter()
                .position(|c| c == "cohort_year")
                .ok_or_else(|| Error::Schema("within-cohort placebo needs cohort_year".into()))?;
            let mut groups: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
            for i in 0..frame.len() {
                groups.entry(frame.controls.get(i, col) as i64).or_default().push(i);
            }
            let mut fake = frame.treatment.clone();
            for members in groups.values() {
                let mut values: Vec<f64> = members.iter().map(|&i| frame.treatment[i]).collect();
                values.shuffle(&mut r);
                for (&i, v) in members.iter().zip(values) {
                    fake[i] = v;
                }
            }
            Ok(fake)
        }
        PlaceboMode::Gaussian => Ok((0..frame.len()).map(|_| StandardNormal.sample(&mut r)).collect()),
    }
}

/// Frame with the fake treatment substituted; every other column is kept.
pub fn make_placebo_treatment(frame: &ModelFrame, spec: &PlaceboSpec) -> Result<ModelFrame> {
    let fake = fake_strike(frame, spec)?;
    if spec.rebuild_interaction {
        frame.with_treatment(fake)
    } else {
        Ok(ModelFrame {
            treatment: fake,
            ..frame.clone()
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table5Row {
    pub specification: String,
    pub coefficient: f64,
    pub std_error: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub p_value: f64,
}

impl Table5Row {
    pub fn from_wald(specification: &str, w: &Wald) -> Self {
        Self {
            specification: specification.to_string(),
            coefficient: w.estimate,
            std_error: w.std_error,
            ci_low: w.ci_low,
            ci_high: w.ci_high,
            p_value: w.p_value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table5Report {
    pub spec: PlaceboSpec,
    pub rows: Vec<Table5Row>,
    /// Full estimate, including the placebo interaction.
    pub estimate: DmlEstimate,
}

pub fn placebo_test(frame: &ModelFrame, config: &DmlConfig, spec: &PlaceboSpec) -> Result<Table5Report> {
    let placebo = make_placebo_treatment(frame, spec)?;
    let (estimate, _) = dml_fit(&placebo, config)?;
    Ok(Table5Report {
        spec: *spec,
        rows: vec![Table5Row::from_wald(PLACEBO_LABEL, &estimate.tau)],
        estimate,
    })
}

/// Seeds `offset, offset + 1, ...`.
pub fn default_seeds(count: usize, offset: u64) -> Vec<u64> {
    (0..count as u64).map(|i| offset + i).collect()
}

pub const DEFAULT_SWEEP_SEEDS: usize = 30;
pub const DEFAULT_SWEEP_OFFSET: u64 = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub seed: u64,
    pub tau: Wald,
    pub gamma: Wald,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedFailure {
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParameterSummary {
    pub mean: f64,
    pub sd: f64,
    pub min: f64,
    pub max: f64,
    pub positive_fraction: f64,
    /// Share of seeds agreeing with the majority sign.
    pub sign_stability: f64,
    pub significant_fraction: f64,
}

impl ParameterSummary {
    pub fn from_walds<'a>(walds: impl Iterator<Item = &'a Wald>) -> Self {
        let walds: Vec<&Wald> = walds.collect();
        let est: Vec<f64> = walds.iter().map(|w| w.estimate).collect();
        let n = est.len().max(1) as f64;
        let positive = est.iter().filter(|v| **v > 0.0).count() as f64 / n;
        let negative = est.iter().filter(|v| **v < 0.0).count() as f64 / n;
        Self {
            mean: mean(&est),
            sd: sample_sd(&est),
            min: est.iter().copied().fold(f64::INFINITY, f64::min),
            max: est.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            positive_fraction: positive,
            sign_stability: positive.max(negative),
            significant_fraction: walds.iter().filter(|w| w.p_value < 0.05).count() as f64 / n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub tau: ParameterSummary,
    pub gamma: ParameterSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSweepResult {
    pub records: Vec<SeedRecord>,
    pub failures: Vec<SeedFailure>,
    pub summary: SweepSummary,
}

impl SeedSweepResult {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "seed",
            "tau",
            "tau_se",
            "tau_p",
            "gamma",
            "gamma_se",
            "gamma_p",
            "ci_low_gamma",
            "ci_high_gamma",
        ])?;
        for r in &self.records {
            w.write_record([
                r.seed.to_string(),
                r.tau.estimate.to_string(),
                r.tau.std_error.to_string(),
                r.tau.p_value.to_string(),
                r.gamma.estimate.to_string(),
                r.gamma.std_error.to_string(),
                r.gamma.p_value.to_string(),
                r.gamma.ci_low.to_string(),
                r.gamma.ci_high.to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// One DML fit per master seed; failed seeds are recorded and skipped.
pub fn seed_sweep(frame: &ModelFrame, config: &DmlConfig, seeds: &[u64]) -> Result<SeedSweepResult> {
    if seeds.len() < 2 {
        return Err(Error::InvalidArgument("a seed sweep needs at least 2 seeds".into()));
    }
    let mut sorted = seeds.to_vec();
    sorted.sort_unstable();
    let outcomes: Vec<(u64, Result<DmlEstimate>)> = sorted
        .par_iter()
        .map(|&seed| {
            let c = DmlConfig { seed, ..*config };
            (seed, dml_fit(frame, &c).map(|(e, _)| e))
        })
        .collect();
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (seed, outcome) in outcomes {
        match outcome {
            Ok(e) => records.push(SeedRecord {
                seed,
                tau: e.tau,
                gamma: e.gamma,
            }),
            Err(e) => failures.push(SeedFailure {
                seed,
                error: e.to_string(),
            }),
        }
    }
    let summary = SweepSummary {
        tau: ParameterSummary::from_walds(records.iter().map(|r| &r.tau)),
        gamma: ParameterSummary::from_walds(records.iter().map(|r| &r.gamma)),
    };
    Ok(SeedSweepResult {
        records,
        failures,
        summary,
    })
}
