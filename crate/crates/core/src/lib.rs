//! Causal toolkit for studying how academic staff strikes and inflation at
//! entry jointly drive next-semester student dropout.
//!
//! The crate is organised bottom-up:
//!
//! * [`panel`] ingests enrollment, CPI and strike data and assembles the
//!   leak-aware student-semester panel.
//! * [`glm`] fits lagged logit models by IRLS and reports average marginal
//!   effects.
//! * [`trees`] is the gradient-boosted regression tree learner used for
//!   nuisance functions and for the predictive model.
//! * [`dml`] is the cross-fitted linear double machine learning estimator.
//! * [`robustness`] runs placebo and seed-sensitivity audits.
//! * [`shapley`] computes exact interventional Shapley attributions.
//! * [`synth`] generates synthetic panels with known structural parameters.
//! * [`report`] renders the machine and text report formats.

pub mod dml;
pub mod error;
pub mod glm;
pub mod io;
pub mod linalg;
pub mod panel;
pub mod report;
pub mod rng;
pub mod robustness;
pub mod shapley;
pub mod stats;
pub mod synth;
pub mod trees;

pub use dml::{DmlConfig, DmlEstimate, ModelFrame, ResidualSet};
pub use error::{Error, ErrorKind, Result};
pub use glm::{DesignMatrix, LogitFit, MarginalEffect};
pub use panel::{
    AssemblyReport, CalendarSemester, CpiMonthlySeries, PanelRow, RawEnrollmentRecord, RawInputs,
    StrikeCalendar,
};
pub use robustness::{PlaceboMode, PlaceboSpec, SeedSweepResult};
pub use shapley::{DependenceTable, ShapAttribution};
pub use synth::{DgpConfig, GroundTruth, ScenarioGrid};
pub use trees::{GbrtConfig, GradientBoostedEnsemble, RegressionTree};
