//! Leak-aware student-semester panel construction.
//!
//! Raw enrollment records carry one row per enrolled student-semester.
//! Assembly attaches the cohort's compounded inflation at entry, the
//! strike intensities one to three calendar semesters back, and the
//! controls observed at the end of the semester. Every feature of a row
//! at semester `t` is computable from information available by the end of
//! `t`; only the outcome looks at `t + 1`.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A calendar semester: `half` is 1 or 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CalendarSemester {
    pub year: i32,
    pub half: u8,
}

impl CalendarSemester {
    pub fn new(year: i32, half: u8) -> Result<Self> {
        if half != 1 && half != 2 {
            return Err(Error::Domain(format!("semester_of_year must be 1 or 2, got {half}")));
        }
        Ok(Self { year, half })
    }

    /// Linear index: two semesters per calendar year.
    pub fn index(self) -> i64 {
        self.year as i64 * 2 + (self.half as i64 - 1)
    }

    pub fn from_index(index: i64) -> Self {
        Self {
            year: index.div_euclid(2) as i32,
            half: (index.rem_euclid(2) + 1) as u8,
        }
    }

    /// The semester `k` steps earlier, walking across year boundaries.
    pub fn back(self, k: u32) -> Self {
        Self::from_index(self.index() - k as i64)
    }

    pub fn next(self) -> Self {
        Self::from_index(self.index() + 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawEnrollmentRecord {
    pub student_id: String,
    pub cohort_year: i32,
    pub semester_number: u32,
    pub calendar_year: i32,
    pub semester_of_year: u8,
    pub enrolled_next: bool,
    pub graduated_by_next: bool,
    pub cum_gpa: f64,
    pub repeat_ratio: f64,
    pub credits_approved_cum: f64,
    pub gender_code: u8,
    pub work_status: Option<u8>,
}

impl RawEnrollmentRecord {
    pub fn position(&self) -> CalendarSemester {
        CalendarSemester {
            year: self.calendar_year,
            half: self.semester_of_year,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let who = || format!("student `{}` semester {}", self.student_id, self.semester_number);
        if self.semester_number < 1 {
            return Err(Error::Domain(format!("{}: semester_number must be >= 1", who())));
        }
        if self.cohort_year > self.calendar_year {
            return Err(Error::Domain(format!(
                "{}: cohort_year {} after calendar_year {}",
                who(),
                self.cohort_year,
                self.calendar_year
            )));
        }
        if self.semester_of_year != 1 && self.semester_of_year != 2 {
            return Err(Error::Domain(format!("{}: semester_of_year must be 1 or 2", who())));
        }
        if !(0.0..=1.0).contains(&self.repeat_ratio) {
            return Err(Error::Domain(format!("{}: repeat_ratio outside [0,1]", who())));
        }
        if !(self.credits_approved_cum >= 0.0) {
            return Err(Error::Domain(format!("{}: credits_approved_cum negative", who())));
        }
        if !self.cum_gpa.is_finite() {
            return Err(Error::Domain(format!("{}: cum_gpa not finite", who())));
        }
        if self.gender_code > 1 || self.work_status.is_some_and(|w| w > 1) {
            return Err(Error::Domain(format!("{}: binary code outside {{0,1}}", who())));
        }
        Ok(())
    }
}

/// Compounded annual rate from twelve proportional monthly changes.
///
/// The factors are combined in a canonical (sorted) order as a sum of
/// `ln(1 + x)` followed by `expm1`, which makes the result exactly
/// invariant to the month order and accurate for rates near zero.
pub fn compound_annual_inflation(monthly_changes: &[f64]) -> Result<f64> {
    if monthly_changes.len() != 12 {
        return Err(Error::Schema(format!(
            "expected 12 monthly CPI changes, got {}",
            monthly_changes.len()
        )));
    }
    if let Some(bad) = monthly_changes.iter().find(|v| !(**v > -1.0) || !v.is_finite()) {
        return Err(Error::Domain(format!("monthly CPI change {bad} must be > -1")));
    }
    let mut sorted = monthly_changes.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted.iter().map(|v| v.ln_1p()).sum::<f64>().exp_m1())
}

/// Monthly proportional CPI changes per calendar year.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CpiMonthlySeries {
    years: BTreeMap<i32, [f64; 12]>,
}

impl CpiMonthlySeries {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_year(&mut self, year: i32, months: [f64; 12]) -> Result<()> {
        compound_annual_inflation(&months)?;
        self.years.insert(year, months);
        Ok(())
    }

    /// Builds the series from `(year, month, change)` triples; every year
    /// must carry months 1..=12 exactly once.
    pub fn from_monthly(entries: &[(i32, u32, f64)]) -> Result<Self> {
        let mut staged: BTreeMap<i32, [Option<f64>; 12]> = BTreeMap::new();
        for &(year, month, change) in entries {
            if !(1..=12).contains(&month) {
                return Err(Error::Schema(format!("year {year}: month {month} outside 1..=12")));
            }
            let slot = &mut staged.entry(year).or_insert([None; 12])[month as usize - 1];
            if slot.is_some() {
                return Err(Error::Schema(format!("year {year}: month {month} given twice")));
            }
            *slot = Some(change);
        }
        let mut series = Self::new();
        for (year, months) in staged {
            let mut full = [0.0; 12];
            for (m, v) in months.iter().enumerate() {
                full[m] = v.ok_or_else(|| {
                    Error::Schema(format!("year {year}: month {} missing", m + 1))
                })?;
            }
            series.insert_year(year, full)?;
        }
        Ok(series)
    }

    pub fn years(&self) -> impl Iterator<Item = (i32, &[f64; 12])> {
        self.years.iter().map(|(y, m)| (*y, m))
    }

    pub fn annual_rate(&self, year: i32) -> Option<f64> {
        self.years
            .get(&year)
            .map(|m| compound_annual_inflation(m).expect("validated on insert"))
    }

    /// Series restricted to years up to and including `last_year`.
    pub fn truncated(&self, last_year: i32) -> Self {
        Self {
            years: self.years.range(..=last_year).map(|(y, m)| (*y, *m)).collect(),
        }
    }
}

/// Share of teaching days lost per calendar semester.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<CalendarEntry>", into = "Vec<CalendarEntry>")]
pub struct StrikeCalendar {
    entries: BTreeMap<CalendarSemester, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalendarEntry {
    pub calendar_year: i32,
    pub semester_of_year: u8,
    pub strike_intensity: f64,
}

impl From<Vec<CalendarEntry>> for StrikeCalendar {
    fn from(list: Vec<CalendarEntry>) -> Self {
        Self {
            entries: list
                .into_iter()
                .map(|e| {
                    (
                        CalendarSemester {
                            year: e.calendar_year,
                            half: e.semester_of_year,
                        },
                        e.strike_intensity,
                    )
                })
                .collect(),
        }
    }
}

impl From<StrikeCalendar> for Vec<CalendarEntry> {
    fn from(calendar: StrikeCalendar) -> Self {
        calendar
            .iter()
            .map(|(k, v)| CalendarEntry {
                calendar_year: k.year,
                semester_of_year: k.half,
                strike_intensity: v,
            })
            .collect()
    }
}

impl StrikeCalendar {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, semester: CalendarSemester, intensity: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&intensity) {
            return Err(Error::Domain(format!(
                "strike intensity {intensity} for {}-{} outside [0,1]",
                semester.year, semester.half
            )));
        }
        if self.entries.insert(semester, intensity).is_some() {
            return Err(Error::Schema(format!(
                "duplicate strike calendar entry {}-{}",
                semester.year, semester.half
            )));
        }
        Ok(())
    }

    pub fn get(&self, semester: CalendarSemester) -> Option<f64> {
        self.entries.get(&semester).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (CalendarSemester, f64)> + '_ {
        self.entries.iter().map(|(k, v)| (*k, *v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn truncated(&self, last: CalendarSemester) -> Self {
        Self {
            entries: self.entries.range(..=last).map(|(k, v)| (*k, *v)).collect(),
        }
    }
}

/// Strike intensity `k` semesters before `position`, or `None` when that
/// semester precedes the student's entry or is absent from the calendar.
pub fn build_lagged_strikes(
    position: CalendarSemester,
    entry: CalendarSemester,
    calendar: &StrikeCalendar,
    k: u32,
) -> Option<f64> {
    let target = position.back(k);
    if target < entry {
        return None;
    }
    calendar.get(target)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelRow {
    pub student_id: String,
    pub semester_number: u32,
    pub calendar_year: i32,
    pub semester_of_year: u8,
    pub cohort_year: i32,
    pub dropout_next_sem: u8,
    pub strikes_lag1: Option<f64>,
    pub strikes_lag2: Option<f64>,
    pub strikes_lag3: Option<f64>,
    pub inflation_at_entry: f64,
    pub interaction_term: Option<f64>,
    pub cum_gpa: f64,
    pub repeat_ratio: f64,
    pub credits_approved_cum: f64,
    pub gender_code: u8,
    pub work_status: u8,
    pub work_status_imputed: bool,
}

impl PanelRow {
    pub fn has_all_lags(&self) -> bool {
        self.strikes_lag1.is_some() && self.strikes_lag2.is_some() && self.strikes_lag3.is_some()
    }

    pub fn lag(&self, k: u32) -> Option<f64> {
        match k {
            1 => self.strikes_lag1,
            2 => self.strikes_lag2,
            3 => self.strikes_lag3,
            _ => None,
        }
    }

    pub fn position(&self) -> CalendarSemester {
        CalendarSemester {
            year: self.calendar_year,
            half: self.semester_of_year,
        }
    }
}

/// Sets `inflation_at_entry` (and the interaction) from the cohort year.
pub fn merge_inflation_at_entry(rows: &mut [PanelRow], cpi: &CpiMonthlySeries) -> Result<()> {
    let cohorts: BTreeSet<i32> = rows.iter().map(|r| r.cohort_year).collect();
    let missing: Vec<i32> = cohorts
        .iter()
        .copied()
        .filter(|y| cpi.annual_rate(*y).is_none())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingCpiYears(missing));
    }
    let rates: HashMap<i32, f64> = cohorts
        .iter()
        .map(|&y| (y, cpi.annual_rate(y).expect("checked above")))
        .collect();
    for row in rows.iter_mut() {
        row.inflation_at_entry = rates[&row.cohort_year];
        row.interaction_term = row.strikes_lag2.map(|t| t * row.inflation_at_entry);
    }
    Ok(())
}

/// Why a raw record did not become a panel row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionReason {
    /// The student already graduated before this semester.
    AfterGraduation,
    /// `graduated_by_next` and `enrolled_next` are both set, or
    /// `enrolled_next` is false although the next semester is recorded.
    InconsistentFlags,
    /// Calendar position does not advance with `semester_number`.
    NonMonotoneCalendar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSummary {
    pub cohort_year: i32,
    pub n_students: usize,
    pub inflation_at_entry: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssemblyReport {
    pub input_rows: usize,
    pub retained_rows: usize,
    pub rows_with_all_lags: usize,
    pub exclusions: BTreeMap<ExclusionReason, usize>,
    pub work_status_imputations: usize,
    pub cohorts: Vec<CohortSummary>,
    pub warnings: Vec<String>,
}

/// The three raw inputs of the panel.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawInputs {
    pub records: Vec<RawEnrollmentRecord>,
    pub cpi: CpiMonthlySeries,
    pub calendar: StrikeCalendar,
}

/// Modal observed `work_status` within each cohort, as of each calendar
/// semester. Only records at or before a position count toward the mode
/// at that position; ties resolve to 0.
struct WorkStatusModes {
    by_cohort: HashMap<i32, Vec<(CalendarSemester, usize, usize)>>,
}

impl WorkStatusModes {
    fn build<'a>(records: impl Iterator<Item = &'a RawEnrollmentRecord>) -> Self {
        let mut counts: BTreeMap<(i32, CalendarSemester), (usize, usize)> = BTreeMap::new();
        for r in records {
            if let Some(w) = r.work_status {
                let c = counts.entry((r.cohort_year, r.position())).or_default();
                if w == 0 {
                    c.0 += 1;
                } else {
                    c.1 += 1;
                }
            }
        }
        let mut by_cohort: HashMap<i32, Vec<(CalendarSemester, usize, usize)>> = HashMap::new();
        for ((cohort, pos), (zeros, ones)) in counts {
            let list = by_cohort.entry(cohort).or_default();
            let (z0, o0) = list.last().map_or((0, 0), |l| (l.1, l.2));
            list.push((pos, z0 + zeros, o0 + ones));
        }
        Self { by_cohort }
    }

    fn mode(&self, cohort: i32, at: CalendarSemester) -> u8 {
        let Some(list) = self.by_cohort.get(&cohort) else {
            return 0;
        };
        let idx = list.partition_point(|e| e.0 <= at);
        if idx == 0 {
            return 0;
        }
        let (_, zeros, ones) = list[idx - 1];
        u8::from(ones > zeros)
    }
}

/// Assembles the panel. Output rows are ordered by student id, then
/// semester number.
pub fn assemble_panel(inputs: &RawInputs) -> Result<(Vec<PanelRow>, AssemblyReport)> {
    let RawInputs {
        records,
        cpi,
        calendar,
    } = inputs;
    for r in records {
        r.validate()?;
    }

    let mut by_student: BTreeMap<&str, Vec<&RawEnrollmentRecord>> = BTreeMap::new();
    for r in records {
        by_student.entry(r.student_id.as_str()).or_default().push(r);
    }
    for list in by_student.values_mut() {
        list.sort_by_key(|r| r.semester_number);
        for pair in list.windows(2) {
            if pair[0].semester_number == pair[1].semester_number {
                return Err(Error::DuplicateRecord {
                    student_id: pair[0].student_id.clone(),
                    semester_number: pair[0].semester_number,
                });
            }
        }
    }

    let modes = WorkStatusModes::build(records.iter());
    let mut exclusions: BTreeMap<ExclusionReason, usize> = BTreeMap::new();
    let mut warnings = Vec::new();
    let mut rows = Vec::with_capacity(records.len());
    let mut imputations = 0;

    for (student, list) in &by_student {
        let entry = list[0].position();
        let mut graduated_at: Option<u32> = None;
        let mut last_position: Option<CalendarSemester> = None;
        for (i, r) in list.iter().enumerate() {
            let reason = if let Some(g) = graduated_at {
                warnings.push(format!(
                    "student `{student}` graduated after semester {g} but is enrolled at semester {}",
                    r.semester_number
                ));
                Some(ExclusionReason::AfterGraduation)
            } else if last_position.is_some_and(|p| r.position() <= p) {
                warnings.push(format!(
                    "student `{student}` semester {} does not advance the calendar",
                    r.semester_number
                ));
                Some(ExclusionReason::NonMonotoneCalendar)
            } else if r.graduated_by_next && r.enrolled_next {
                warnings.push(format!(
                    "student `{student}` semester {}: graduated and enrolled next",
                    r.semester_number
                ));
                Some(ExclusionReason::InconsistentFlags)
            } else if !r.enrolled_next
                && !r.graduated_by_next
                && list
                    .get(i + 1)
                    .is_some_and(|n| n.position() == r.position().next())
            {
                warnings.push(format!(
                    "student `{student}` semester {}: marked not enrolled next but next semester is recorded",
                    r.semester_number
                ));
                Some(ExclusionReason::InconsistentFlags)
            } else {
                None
            };
            if r.graduated_by_next && graduated_at.is_none() {
                graduated_at = Some(r.semester_number);
            }
            if let Some(reason) = reason {
                *exclusions.entry(reason).or_default() += 1;
                continue;
            }
            last_position = Some(r.position());
            let row = derive_row(r, entry, calendar, &modes);
            if row.work_status_imputed {
                imputations += 1;
            }
            rows.push(row);
        }
    }

    merge_inflation_at_entry(&mut rows, cpi)?;

    let mut cohort_students: BTreeMap<i32, BTreeSet<&str>> = BTreeMap::new();
    for row in &rows {
        cohort_students
            .entry(row.cohort_year)
            .or_default()
            .insert(row.student_id.as_str());
    }
    let cohorts = cohort_students
        .iter()
        .map(|(&cohort_year, students)| CohortSummary {
            cohort_year,
            n_students: students.len(),
            inflation_at_entry: cpi.annual_rate(cohort_year).expect("merged above"),
        })
        .collect();

    let report = AssemblyReport {
        input_rows: records.len(),
        retained_rows: rows.len(),
        rows_with_all_lags: rows.iter().filter(|r| r.has_all_lags()).count(),
        exclusions,
        work_status_imputations: imputations,
        cohorts,
        warnings,
    };
    Ok((rows, report))
}

fn derive_row(
    r: &RawEnrollmentRecord,
    entry: CalendarSemester,
    calendar: &StrikeCalendar,
    modes: &WorkStatusModes,
) -> PanelRow {
    let position = r.position();
    let lag = |k| build_lagged_strikes(position, entry, calendar, k);
    let (work_status, work_status_imputed) = match r.work_status {
        Some(w) => (w, false),
        None => (modes.mode(r.cohort_year, position), true),
    };
    PanelRow {
        student_id: r.student_id.clone(),
        semester_number: r.semester_number,
        calendar_year: r.calendar_year,
        semester_of_year: r.semester_of_year,
        cohort_year: r.cohort_year,
        dropout_next_sem: u8::from(!r.enrolled_next && !r.graduated_by_next),
        strikes_lag1: lag(1),
        strikes_lag2: lag(2),
        strikes_lag3: lag(3),
        inflation_at_entry: f64::NAN,
        interaction_term: None,
        cum_gpa: r.cum_gpa,
        repeat_ratio: r.repeat_ratio,
        credits_approved_cum: r.credits_approved_cum,
        gender_code: r.gender_code,
        work_status,
        work_status_imputed,
    }
}

/// A feature value that could not be reproduced from information
/// available by the end of its semester.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakageViolation {
    pub row: usize,
    pub student_id: String,
    pub semester_number: u32,
    pub column: String,
}

/// Recomputes every feature of every row from inputs truncated at the
/// row's own semester and reports mismatches.
///
/// The truncated view holds the student's records with
/// `semester_number <= t`, the cohort's records at calendar positions up to
/// the row's, the strike calendar up to the row's semester and CPI years up
/// to the row's calendar year. The outcome column is exempt: it is defined
/// on `t + 1`.
pub fn validate_leakage(panel: &[PanelRow], inputs: &RawInputs) -> Vec<LeakageViolation> {
    let mut by_student: HashMap<&str, Vec<&RawEnrollmentRecord>> = HashMap::new();
    for r in &inputs.records {
        by_student.entry(r.student_id.as_str()).or_default().push(r);
    }
    let mut by_cohort: HashMap<i32, Vec<&RawEnrollmentRecord>> = HashMap::new();
    for r in &inputs.records {
        by_cohort.entry(r.cohort_year).or_default().push(r);
    }
    for list in by_cohort.values_mut() {
        list.sort_by_key(|r| r.position());
    }

    let mut violations = Vec::new();
    for (i, row) in panel.iter().enumerate() {
        let mut flag = |column: &str| {
            violations.push(LeakageViolation {
                row: i,
                student_id: row.student_id.clone(),
                semester_number: row.semester_number,
                column: column.to_string(),
            })
        };
        let history: Vec<&RawEnrollmentRecord> = by_student
            .get(row.student_id.as_str())
            .map(|l| {
                l.iter()
                    .copied()
                    .filter(|r| r.semester_number <= row.semester_number)
                    .collect()
            })
            .unwrap_or_default();
        let Some(own) = history
            .iter()
            .find(|r| r.semester_number == row.semester_number)
        else {
            flag("semester_number");
            continue;
        };
        let position = own.position();
        if row.calendar_year != own.calendar_year {
            flag("calendar_year");
        }
        if row.semester_of_year != own.semester_of_year {
            flag("semester_of_year");
        }
        if row.cohort_year != own.cohort_year {
            flag("cohort_year");
        }
        if !same(row.cum_gpa, own.cum_gpa) {
            flag("cum_gpa");
        }
        if !same(row.repeat_ratio, own.repeat_ratio) {
            flag("repeat_ratio");
        }
        if !same(row.credits_approved_cum, own.credits_approved_cum) {
            flag("credits_approved_cum");
        }
        if row.gender_code != own.gender_code {
            flag("gender_code");
        }

        let cohort_past = by_cohort
            .get(&own.cohort_year)
            .map(|l| {
                let end = l.partition_point(|r| r.position() <= position);
                WorkStatusModes::build(l[..end].iter().copied())
            })
            .unwrap_or_else(|| WorkStatusModes::build(std::iter::empty()));
        let (work, imputed) = match own.work_status {
            Some(w) => (w, false),
            None => (cohort_past.mode(own.cohort_year, position), true),
        };
        if row.work_status != work {
            flag("work_status");
        }
        if row.work_status_imputed != imputed {
            flag("work_status_imputed");
        }

        let entry = history
            .iter()
            .min_by_key(|r| r.semester_number)
            .expect("own record")
            .position();
        let calendar = inputs.calendar.truncated(position);
        let lags = [row.strikes_lag1, row.strikes_lag2, row.strikes_lag3];
        for (k, value) in (1..=3).zip(lags) {
            let expected = build_lagged_strikes(position, entry, &calendar, k);
            if !same_opt(value, expected) {
                flag(&format!("strikes_lag{k}"));
            }
        }

        let rate = inputs
            .cpi
            .truncated(own.calendar_year)
            .annual_rate(own.cohort_year);
        match rate {
            Some(x) if same(row.inflation_at_entry, x) => {
                let expected = build_lagged_strikes(position, entry, &calendar, 2).map(|t| t * x);
                if !same_opt(row.interaction_term, expected) {
                    flag("interaction_term");
                }
            }
            _ => flag("inflation_at_entry"),
        }
    }
    violations
}

fn same(a: f64, b: f64) -> bool {
    a.to_bits() == b.to_bits()
}

fn same_opt(a: Option<f64>, b: Option<f64>) -> bool {
    match (a, b) {
        (Some(x), Some(y)) => same(x, y),
        (None, None) => true,
        _ => false,
    }
}
