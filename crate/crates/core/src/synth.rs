//! Synthetic student trajectories with known structural parameters.
//!
//! Each student enters in a cohort year (first or second half), takes four
//! courses per enrolled semester and accumulates grades, repeats and
//! credits. At the end of every enrolled semester the dropout probability is
//!
//! ```text
//! p = link(alpha + tau*T + gamma*T*X + beta*X + g(W))
//! ```
//!
//! where `T` is the strike intensity two semesters earlier and `X` the
//! cohort's inflation at entry. Dropout is drawn before the graduation
//! check, so the recorded outcome has conditional mean exactly `p`. Some
//! dropouts return after a gap, which keeps the calendar half of a row from
//! being a function of the controls. Controls never depend on strikes.
//!
//! Confounding enters through a calendar trend: strikes become more frequent
//! over time and `g(W)` carries a calendar-year term scaled by the
//! confounding strength.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{
    assemble_panel, AssemblyReport, CalendarSemester, CpiMonthlySeries, PanelRow,
    RawEnrollmentRecord, RawInputs, StrikeCalendar,
};
use crate::rng::{self, StreamRng};
use crate::stats::{correlation, mean};

/// Published cohort sizes and annual inflation at entry (percent).
pub const PUBLISHED_COHORTS: [(i32, usize, f64); 16] = [
    (2004, 51, 6.45),
    (2005, 60, 12.0),
    (2006, 97, 9.98),
    (2007, 92, 11.29),
    (2008, 77, 10.34),
    (2009, 74, 7.69),
    (2010, 86, 10.92),
    (2011, 68, 9.51),
    (2012, 114, 10.84),
    (2013, 112, 10.95),
    (2014, 87, 23.97),
    (2015, 92, 18.47),
    (2016, 87, 33.08),
    (2017, 83, 23.98),
    (2018, 92, 51.4),
    (2019, 73, 53.36),
];

const COURSES_PER_SEMESTER: usize = 4;
const CREDITS_TO_GRADUATE: f64 = 34.0;
const WORK_MISSING_PROB: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    /// Linear probability clipped to `[0.01, 0.99]`.
    LinearClipped,
    /// Logistic curve matched to the linear index in value and slope at
    /// `alpha`; effects are then only approximately `tau` and `gamma`.
    Logistic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CohortSpec {
    pub year: i32,
    pub size: usize,
    /// Annual inflation at entry as a proportion.
    pub inflation: f64,
}

/// Coefficients of the control function `g(W)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlEffects {
    /// Slope on `cum_gpa - 5.5` (enters with a negative sign).
    pub gpa: f64,
    /// Coefficient on the repeat ratio (squared when nonlinear).
    pub repeat: f64,
    /// Amplitude of the semester-number cycle (nonlinear only).
    pub cycle: f64,
    /// Per-year calendar trend around 2014, scaled by confounding strength.
    pub trend: f64,
}

impl ControlEffects {
    pub const ZERO: Self = Self {
        gpa: 0.0,
        repeat: 0.0,
        cycle: 0.0,
        trend: 0.0,
    };
}

impl Default for ControlEffects {
    fn default() -> Self {
        Self {
            gpa: 0.03,
            repeat: 0.12,
            cycle: 0.02,
            trend: 0.0075,
        }
    }
}

/// Random strike calendar: each semester strikes with a probability that
/// rises linearly over the covered years.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrikeProcess {
    pub first_year: i32,
    pub last_year: i32,
    pub prob_start: f64,
    pub prob_end: f64,
    pub intensity_low: f64,
    pub intensity_high: f64,
    /// Number of candidate calendars drawn; the one whose detrended
    /// intensity series has the smallest autocorrelation at lags 1 and 2 is
    /// kept. One candidate means a plain draw.
    pub candidates: usize,
}

impl Default for StrikeProcess {
    fn default() -> Self {
        Self {
            first_year: 2002,
            last_year: 2024,
            prob_start: 0.3,
            prob_end: 0.8,
            intensity_low: 0.1,
            intensity_high: 0.6,
            candidates: 1,
        }
    }
}

impl StrikeProcess {
    pub fn generate(&self, seed: u64) -> StrikeCalendar {
        let draw = |k: usize| self.draw(seed, k as u64);
        if self.candidates <= 1 {
            return draw(0);
        }
        (0..self.candidates)
            .map(|k| {
                let c = draw(k);
                (max_lag_autocorrelation(&c, self.first_year + 2), k, c)
            })
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
            .map(|(_, _, c)| c)
            .expect("at least one candidate")
    }

    fn draw(&self, seed: u64, candidate: u64) -> StrikeCalendar {
        let mut r = rng::stream(seed, &["synth", "calendar"], candidate);
        let mut calendar = StrikeCalendar::new();
        let span = (self.last_year - self.first_year).max(1) as f64;
        for year in self.first_year..=self.last_year {
            let frac = (year - self.first_year) as f64 / span;
            let prob = self.prob_start + (self.prob_end - self.prob_start) * frac;
            for half in 1..=2 {
                let strike = r.gen::<f64>() < prob;
                let level = r.gen_range(self.intensity_low..self.intensity_high);
                let intensity = if strike { level } else { 0.0 };
                calendar
                    .insert(CalendarSemester { year, half }, intensity)
                    .expect("generated intensities lie in [0, 1]");
            }
        }
        calendar
    }
}

/// Largest absolute autocorrelation at lags 1 and 2 of the linearly
/// detrended intensity series from `from_year` on.
pub fn max_lag_autocorrelation(calendar: &StrikeCalendar, from_year: i32) -> f64 {
    let series: Vec<f64> = calendar
        .iter()
        .filter(|(s, _)| s.year >= from_year)
        .map(|(_, v)| v)
        .collect();
    let n = series.len();
    if n < 4 {
        return 0.0;
    }
    let t: Vec<f64> = (0..n).map(|i| i as f64).collect();
    let (mt, ms) = (mean(&t), mean(&series));
    let stt: f64 = t.iter().map(|x| (x - mt).powi(2)).sum();
    let sts: f64 = t.iter().zip(&series).map(|(x, y)| (x - mt) * (y - ms)).sum();
    let slope = sts / stt;
    let resid: Vec<f64> = t
        .iter()
        .zip(&series)
        .map(|(x, y)| y - ms - slope * (x - mt))
        .collect();
    [1, 2]
        .iter()
        .map(|&k| correlation(&resid[k..], &resid[..n - k]).abs())
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CalendarSource {
    Generated(StrikeProcess),
    Fixed(StrikeCalendar),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpConfig {
    pub n_students: usize,
    pub cohorts: Vec<CohortSpec>,
    pub calendar: CalendarSource,
    pub alpha: f64,
    pub tau: f64,
    pub gamma: f64,
    /// Direct effect of inflation at entry.
    pub inflation_effect: f64,
    pub controls: ControlEffects,
    pub confounding: f64,
    pub nonlinear: bool,
    pub link: Link,
    /// Share of each cohort entering in the second half of the year.
    pub mid_year_entry_share: f64,
    /// Probability that a dropout returns after a gap.
    pub return_prob: f64,
    /// Last observed semester; records end one semester earlier so that
    /// `enrolled_next` is known.
    pub window_end: CalendarSemester,
    pub seed: u64,
}

/// Cohort sizes proportional to `weights` summing to `n` (largest remainder).
pub fn apportion(weights: &[usize], n: usize) -> Vec<usize> {
    let total: usize = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|&w| w as f64 * n as f64 / total as f64).collect();
    let mut sizes: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let short = n - sizes.iter().sum::<usize>();
    for &i in order.iter().take(short) {
        sizes[i] += 1;
    }
    sizes
}

/// The published cohort structure rescaled to `n_students`.
pub fn published_cohorts(n_students: usize) -> Vec<CohortSpec> {
    let weights: Vec<usize> = PUBLISHED_COHORTS.iter().map(|c| c.1).collect();
    apportion(&weights, n_students)
        .into_iter()
        .zip(PUBLISHED_COHORTS)
        .map(|(size, (year, _, pct))| CohortSpec {
            year,
            size,
            inflation: pct / 100.0,
        })
        .collect()
}

pub const PRESETS: [&str; 5] = ["dual-stressor", "paper-scale", "lag-profile", "null", "scenario"];

impl Default for DgpConfig {
    fn default() -> Self {
        let n = PUBLISHED_COHORTS.iter().map(|c| c.1).sum();
        Self {
            n_students: n,
            cohorts: published_cohorts(n),
            calendar: CalendarSource::Generated(StrikeProcess::default()),
            alpha: 0.1,
            tau: 0.0,
            gamma: 0.0,
            inflation_effect: 0.1,
            controls: ControlEffects::default(),
            confounding: 1.0,
            nonlinear: true,
            link: Link::LinearClipped,
            mid_year_entry_share: 0.5,
            return_prob: 0.3,
            window_end: CalendarSemester { year: 2024, half: 2 },
            seed: 0,
        }
    }
}

impl DgpConfig {
    /// Named configurations used by the command line and the acceptance
    /// suite.
    ///
    /// * `dual-stressor`: the published cohort structure at four times its
    ///   size with a strong strike x inflation interaction.
    /// * `paper-scale`: the same structure with `gamma = 0.06`.
    /// * `lag-profile`: 5000 students, an effect at lag 2 only, a logistic
    ///   link with linear controls (the lagged logit is then correctly
    ///   specified), and a calendar chosen among 256 draws for weak serial
    ///   correlation so that separate per-lag fits are not confounded by
    ///   the lag-2 effect.
    /// * `null`: no strike effects at all.
    /// * `scenario`: small additive effects used by the scenario engine.
    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        let base = Self {
            seed,
            ..Self::default()
        };
        let config = match name {
            "dual-stressor" => Self {
                n_students: 4 * base.n_students,
                cohorts: published_cohorts(4 * base.n_students),
                tau: 0.0,
                gamma: DUAL_STRESSOR_GAMMA,
                ..base
            },
            "paper-scale" => Self {
                tau: 0.0,
                gamma: 0.06,
                ..base
            },
            "lag-profile" => Self {
                calendar: CalendarSource::Generated(StrikeProcess {
                    candidates: 256,
                    ..StrikeProcess::default()
                }),
                n_students: 5000,
                cohorts: published_cohorts(5000),
                tau: LAG_PROFILE_TAU,
                gamma: 0.0,
                inflation_effect: 0.0,
                nonlinear: false,
                link: Link::Logistic,
                ..base
            },
            "null" => base,
            "scenario" => Self {
                tau: SCENARIO_TAU,
                gamma: SCENARIO_GAMMA,
                inflation_effect: SCENARIO_INFLATION_EFFECT,
                ..base
            },
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown preset `{other}`; expected one of {}",
                    PRESETS.join(", ")
                )))
            }
        };
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let total: usize = self.cohorts.iter().map(|c| c.size).sum();
        if total != self.n_students {
            return Err(Error::InvalidArgument(format!(
                "cohort sizes sum to {total}, expected {} students",
                self.n_students
            )));
        }
        if self.cohorts.iter().any(|c| !(c.inflation > -1.0)) {
            return Err(Error::InvalidArgument("inflation at entry must exceed -1".into()));
        }
        for (name, p) in [
            ("mid-year entry share", self.mid_year_entry_share),
            ("return probability", self.return_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidArgument(format!("{name} must lie in [0, 1]")));
            }
        }
        if self.link == Link::Logistic && !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidArgument("logistic link needs alpha in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn strike_calendar(&self) -> StrikeCalendar {
        match &self.calendar {
            CalendarSource::Generated(process) => process.generate(self.seed),
            CalendarSource::Fixed(calendar) => calendar.clone(),
        }
    }

    /// Linear index before the link.
    fn index(&self, t: f64, x: f64, w: &ControlState) -> f64 {
        let c = &self.controls;
        let trend = self.confounding * c.trend * (w.calendar_year - 2014) as f64;
        let g = if self.nonlinear {
            -c.gpa * (w.cum_gpa - 5.5)
                + c.repeat * w.repeat_ratio * w.repeat_ratio
                + c.cycle * (w.semester_number as f64).sin()
        } else {
            -c.gpa * (w.cum_gpa - 5.5) + c.repeat * w.repeat_ratio
        };
        self.alpha + self.tau * t + self.gamma * t * x + self.inflation_effect * x + g + trend
    }

    fn probability(&self, index: f64) -> f64 {
        match self.link {
            Link::LinearClipped => index.clamp(0.01, 0.99),
            Link::Logistic => {
                let a = self.alpha;
                let eta = (a / (1.0 - a)).ln() + (index - a) / (a * (1.0 - a));
                1.0 / (1.0 + (-eta).exp())
            }
        }
    }
}

/// Interaction strength of the `dual-stressor` preset.
pub const DUAL_STRESSOR_GAMMA: f64 = 0.8;
/// Lag-2 main effect of the `lag-profile` preset.
pub const LAG_PROFILE_TAU: f64 = 0.05;
pub const SCENARIO_TAU: f64 = 0.04;
pub const SCENARIO_INFLATION_EFFECT: f64 = 0.03;
/// Interaction calibrated so the scenario amplification is about 0.205.
pub const SCENARIO_GAMMA: f64 = 0.0533;

struct ControlState {
    cum_gpa: f64,
    repeat_ratio: f64,
    semester_number: u32,
    calendar_year: i32,
}

/// One simulated enrolled semester.
#[derive(Debug, Clone, PartialEq)]
struct SimSemester {
    position: CalendarSemester,
    semester_number: u32,
    dropout: bool,
    graduated: bool,
    cum_gpa: f64,
    repeat_ratio: f64,
    credits: f64,
    work_status: Option<u8>,
    index: f64,
    probability: f64,
}

struct StudentTraits {
    entry_half: u8,
    ability: f64,
    gender: u8,
    work_prob: f64,
}

fn draw_traits(r: &mut StreamRng, config: &DgpConfig, inflation: f64) -> StudentTraits {
    let entry_half = if r.gen::<f64>() < config.mid_year_entry_share { 2 } else { 1 };
    let ability: f64 = StandardNormal.sample(r);
    let gender = u8::from(r.gen::<f64>() < 0.3);
    let work_prob = (0.25 + 0.5 * inflation).clamp(0.0, 1.0);
    StudentTraits {
        entry_half,
        ability,
        gender,
        work_prob,
    }
}

/// Simulates one student from `entry` while the position is before `end`.
/// Every semester consumes the same number of draws so that scenarios
/// sharing a seed share their random numbers.
fn simulate_student(
    config: &DgpConfig,
    traits: &StudentTraits,
    inflation: f64,
    calendar: &StrikeCalendar,
    entry: CalendarSemester,
    end: CalendarSemester,
    r: &mut StreamRng,
) -> Vec<SimSemester> {
    let pass_prob = 1.0 / (1.0 + (-(0.9 + traits.ability)).exp());
    let mut out = Vec::new();
    let mut position = entry;
    let mut semester_number = 1;
    let (mut grade_sum, mut grades) = (0.0, 0usize);
    let (mut enrolments, mut repeats, mut backlog) = (0usize, 0usize, 0usize);
    let mut credits = 0.0;
    let mut works = r.gen::<f64>() < traits.work_prob;

    while position < end {
        for _ in 0..COURSES_PER_SEMESTER {
            let u_pass: f64 = r.gen();
            let z: f64 = StandardNormal.sample(r);
            let u_fail: f64 = r.gen();
            enrolments += 1;
            if backlog > 0 {
                backlog -= 1;
                repeats += 1;
            }
            if u_pass < pass_prob {
                grade_sum += (6.5 + 1.2 * traits.ability + z).clamp(4.0, 10.0);
                credits += 1.0;
            } else {
                grade_sum += 1.0 + 2.99 * u_fail;
                backlog += 1;
            }
            grades += 1;
        }
        if r.gen::<f64>() < 0.1 {
            works = r.gen::<f64>() < traits.work_prob;
        } else {
            let _: f64 = r.gen();
        }
        let work_status = (r.gen::<f64>() >= WORK_MISSING_PROB).then_some(u8::from(works));

        let cum_gpa = grade_sum / grades as f64;
        let repeat_ratio = repeats as f64 / enrolments as f64;
        let lag2 = position.back(2);
        let t = if lag2 >= entry {
            calendar.get(lag2).unwrap_or(0.0)
        } else {
            0.0
        };
        let state = ControlState {
            cum_gpa,
            repeat_ratio,
            semester_number,
            calendar_year: position.year,
        };
        let index = config.index(t, inflation, &state);
        let probability = config.probability(index);
        let dropout = r.gen::<f64>() < probability;
        let graduated = !dropout && credits >= CREDITS_TO_GRADUATE;
        let u_return: f64 = r.gen();
        let u_gap: f64 = r.gen();
        out.push(SimSemester {
            position,
            semester_number,
            dropout,
            graduated,
            cum_gpa,
            repeat_ratio,
            credits,
            work_status,
            index,
            probability,
        });
        if graduated {
            break;
        }
        if dropout {
            if u_return >= config.return_prob {
                break;
            }
            // Gap of one to four semesters before returning.
            let gap = 1 + (u_gap * 4.0).floor() as i64;
            position = CalendarSemester::from_index(position.index() + gap + 1);
        } else {
            position = position.next();
        }
        semester_number += 1;
    }
    out
}

/// Per-row structural truth, aligned with the assembled panel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueRow {
    pub student_id: String,
    pub semester_number: u32,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub alpha: f64,
    pub tau: f64,
    pub gamma: f64,
    pub inflation_effect: f64,
    pub seed: u64,
    pub cohort_sizes: Vec<(i32, usize)>,
    /// Share of rows whose linear index fell outside `[0, 1]`.
    pub out_of_range_share: f64,
    pub warnings: Vec<String>,
    pub rows: Vec<TrueRow>,
}

#[derive(Debug, Clone)]
pub struct SyntheticPanel {
    pub inputs: RawInputs,
    pub panel: Vec<PanelRow>,
    pub report: AssemblyReport,
    pub truth: GroundTruth,
}

pub fn student_id(index: usize) -> String {
    format!("S{index:06}")
}

fn cpi_for(cohorts: &[CohortSpec]) -> Result<CpiMonthlySeries> {
    let mut cpi = CpiMonthlySeries::new();
    for c in cohorts {
        let monthly = (1.0 + c.inflation).powf(1.0 / 12.0) - 1.0;
        cpi.insert_year(c.year, [monthly; 12])?;
    }
    Ok(cpi)
}

/// Simulates the configured population and assembles its panel.
pub fn generate_panel(config: &DgpConfig) -> Result<SyntheticPanel> {
    config.validate()?;
    let calendar = config.strike_calendar();
    let cpi = cpi_for(&config.cohorts)?;

    let mut assignments = Vec::with_capacity(config.n_students);
    for c in &config.cohorts {
        assignments.extend(std::iter::repeat(*c).take(c.size));
    }

    let students: Vec<(Vec<RawEnrollmentRecord>, Vec<TrueRow>, usize)> = assignments
        .par_iter()
        .enumerate()
        .map(|(i, cohort)| {
            let id = student_id(i);
            let mut r = rng::stream(config.seed, &["synth", "student"], i as u64);
            let traits = draw_traits(&mut r, config, cohort.inflation);
            let entry = CalendarSemester {
                year: cohort.year,
                half: traits.entry_half,
            };
            let sims = simulate_student(
                config,
                &traits,
                cohort.inflation,
                &calendar,
                entry,
                config.window_end,
                &mut r,
            );
            let mut records = Vec::with_capacity(sims.len());
            let mut truth = Vec::with_capacity(sims.len());
            let mut out_of_range = 0;
            for (k, s) in sims.iter().enumerate() {
                let enrolled_next = sims
                    .get(k + 1)
                    .is_some_and(|n| n.position == s.position.next());
                records.push(RawEnrollmentRecord {
                    student_id: id.clone(),
                    cohort_year: cohort.year,
                    semester_number: s.semester_number,
                    calendar_year: s.position.year,
                    semester_of_year: s.position.half,
                    enrolled_next: enrolled_next || (!s.dropout && !s.graduated),
                    graduated_by_next: s.graduated,
                    cum_gpa: s.cum_gpa,
                    repeat_ratio: s.repeat_ratio,
                    credits_approved_cum: s.credits,
                    gender_code: traits.gender,
                    work_status: s.work_status,
                });
                truth.push(TrueRow {
                    student_id: id.clone(),
                    semester_number: s.semester_number,
                    probability: s.probability,
                });
                out_of_range += usize::from(!(0.0..=1.0).contains(&s.index));
            }
            (records, truth, out_of_range)
        })
        .collect();

    let mut records = Vec::new();
    let mut rows = Vec::new();
    let mut out_of_range = 0;
    for (rec, truth, oor) in students {
        records.extend(rec);
        rows.extend(truth);
        out_of_range += oor;
    }
    let share = out_of_range as f64 / rows.len().max(1) as f64;
    let mut warnings = Vec::new();
    if share > 0.2 {
        warnings.push(format!(
            "{:.1}% of linear indices fell outside [0, 1] before clipping; the clipped model \
             no longer has tau and gamma as its exact effects",
            share * 100.0
        ));
    }

    let inputs = RawInputs {
        records,
        cpi,
        calendar,
    };
    let (panel, report) = assemble_panel(&inputs)?;
    let truth = GroundTruth {
        alpha: config.alpha,
        tau: config.tau,
        gamma: config.gamma,
        inflation_effect: config.inflation_effect,
        seed: config.seed,
        cohort_sizes: config.cohorts.iter().map(|c| (c.year, c.size)).collect(),
        out_of_range_share: share,
        warnings,
        rows,
    };
    Ok(SyntheticPanel {
        inputs,
        panel,
        report,
        truth,
    })
}

/// Overrides defining one stress scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub strike_intensity: f64,
    pub inflation: f64,
}

/// Baseline plus the two single-stressor scenarios and their union.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioGrid {
    pub baseline_strike: f64,
    pub baseline_inflation: f64,
    pub crisis_strike: f64,
    pub crisis_inflation: f64,
    /// Semester number at which cumulative attrition is compared.
    pub horizon: u32,
    pub n_students: usize,
}

impl Default for ScenarioGrid {
    fn default() -> Self {
        Self {
            baseline_strike: 0.0,
            baseline_inflation: 0.0,
            crisis_strike: 0.3,
            crisis_inflation: 0.5,
            horizon: 6,
            n_students: 50_000,
        }
    }
}

impl ScenarioGrid {
    pub fn scenarios(&self) -> [Scenario; 4] {
        let s = |name: &str, strike: f64, inflation: f64| Scenario {
            name: name.to_string(),
            strike_intensity: strike,
            inflation,
        };
        [
            s("baseline", self.baseline_strike, self.baseline_inflation),
            s("strikes-only", self.crisis_strike, self.baseline_inflation),
            s("inflation-only", self.baseline_strike, self.crisis_inflation),
            s("combined", self.crisis_strike, self.crisis_inflation),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttritionCurve {
    pub scenario: String,
    /// Share of students whose first dropout happened by semester `h`,
    /// for `h = 1..=horizon`.
    pub cumulative_dropout: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmplificationReport {
    pub horizon: u32,
    pub baseline: f64,
    pub strikes_only: f64,
    pub inflation_only: f64,
    pub combined: f64,
    /// `None` when the single-stressor effects sum to zero.
    pub amplification: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub grid: ScenarioGrid,
    pub curves: Vec<AttritionCurve>,
    pub report: AmplificationReport,
}

/// Cumulative first-dropout shares under one scenario. Every student enters
/// in the first half of 2012 and is followed for `horizon` semesters.
fn attrition_curve(config: &DgpConfig, scenario: &Scenario, horizon: u32, n: usize) -> Vec<f64> {
    let entry = CalendarSemester { year: 2012, half: 1 };
    let end = CalendarSemester::from_index(entry.index() + horizon as i64);
    let mut calendar = StrikeCalendar::new();
    let mut pos = entry.back(3);
    while pos < end {
        calendar
            .insert(pos, scenario.strike_intensity)
            .expect("scenario intensity validated");
        pos = pos.next();
    }
    let config = DgpConfig {
        return_prob: 0.0,
        mid_year_entry_share: 0.0,
        ..config.clone()
    };
    let first_dropout: Vec<Option<u32>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(config.seed, &["synth", "student"], i as u64);
            let traits = draw_traits(&mut r, &config, scenario.inflation);
            simulate_student(&config, &traits, scenario.inflation, &calendar, entry, end, &mut r)
                .iter()
                .find(|s| s.dropout)
                .map(|s| s.semester_number)
        })
        .collect();
    (1..=horizon)
        .map(|h| first_dropout.iter().filter(|d| d.is_some_and(|s| s <= h)).count() as f64 / n as f64)
        .collect()
}

/// Runs the four scenarios with common random numbers and reports the
/// amplification of the combined shock over the sum of single shocks.
pub fn run_scenarios(grid: &ScenarioGrid, config: &DgpConfig) -> Result<ScenarioResult> {
    config.validate()?;
    if grid.horizon == 0 || grid.n_students == 0 {
        return Err(Error::InvalidArgument("scenario horizon and size must be positive".into()));
    }
    for s in [grid.baseline_strike, grid.crisis_strike] {
        if !(0.0..=1.0).contains(&s) {
            return Err(Error::InvalidArgument("scenario strike intensity outside [0, 1]".into()));
        }
    }
    let curves: Vec<AttritionCurve> = grid
        .scenarios()
        .iter()
        .map(|s| AttritionCurve {
            scenario: s.name.clone(),
            cumulative_dropout: attrition_curve(config, s, grid.horizon, grid.n_students),
        })
        .collect();
    let at = |k: usize| curves[k].cumulative_dropout[grid.horizon as usize - 1];
    let (base, strikes, inflation, combined) = (at(0), at(1), at(2), at(3));
    let denominator = (strikes - base) + (inflation - base);
    let amplification =
        (denominator != 0.0).then(|| ((combined - base) - denominator) / denominator);
    Ok(ScenarioResult {
        grid: *grid,
        curves,
        report: AmplificationReport {
            horizon: grid.horizon,
            baseline: base,
            strikes_only: strikes,
            inflation_only: inflation,
            combined,
            amplification,
        },
    })
}

/// Bisection for the interaction strength giving `target` amplification.
pub fn calibrate_gamma(
    grid: &ScenarioGrid,
    config: &DgpConfig,
    target: f64,
    mut low: f64,
    mut high: f64,
    iterations: usize,
) -> Result<f64> {
    let amp = |gamma: f64| -> Result<f64> {
        let c = DgpConfig {
            gamma,
            ..config.clone()
        };
        run_scenarios(grid, &c)?
            .report
            .amplification
            .ok_or_else(|| Error::DegenerateOutcome("single-stressor effects sum to zero".into()))
    };
    if (amp(low)? - target) * (amp(high)? - target) > 0.0 {
        return Err(Error::InvalidArgument("calibration bracket does not straddle the target".into()));
    }
    for _ in 0..iterations {
        let mid = 0.5 * (low + high);
        if amp(mid)? < target {
            low = mid;
        } else {
            high = mid;
        }
    }
    Ok(0.5 * (low + high))
}
