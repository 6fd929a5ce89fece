//! CSV and JSON input/output.
//!
//! Readers check the header, parse every cell and report failures as
//! [`Error::Data`] with the file, the 1-based line and the column name.
//! An empty cell means "missing" where the field is optional. Floats are
//! written with Rust's shortest round-trip formatting, so a write followed
//! by a read reproduces every value bit for bit.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::panel::{CalendarSemester, CpiMonthlySeries, PanelRow, RawEnrollmentRecord, StrikeCalendar};

pub const ENROLLMENT_HEADER: [&str; 12] = [
    "student_id",
    "cohort_year",
    "semester_number",
    "calendar_year",
    "semester_of_year",
    "enrolled_next",
    "graduated_by_next",
    "cum_gpa",
    "repeat_ratio",
    "credits_approved_cum",
    "gender_code",
    "work_status",
];

pub const CPI_HEADER: [&str; 3] = ["year", "month", "variacion"];

pub const STRIKES_HEADER: [&str; 3] = ["calendar_year", "semester_of_year", "strike_intensity"];

pub const PANEL_HEADER: [&str; 17] = [
    "student_id",
    "semester_number",
    "calendar_year",
    "semester_of_year",
    "cohort_year",
    "dropout_next_sem",
    "strikes_lag1",
    "strikes_lag2",
    "strikes_lag3",
    "inflation_at_entry",
    "interaction_term",
    "cum_gpa",
    "repeat_ratio",
    "credits_approved_cum",
    "gender_code",
    "work_status",
    "work_status_imputed",
];

/// One data record with access to its cells by column name.
struct Cells<'a> {
    file: &'a Path,
    line: u64,
    columns: &'a [usize],
    names: &'a [&'a str],
    record: &'a csv::StringRecord,
}

impl Cells<'_> {
    fn error(&self, column: &str, message: impl Into<String>) -> Error {
        Error::Data {
            file: self.file.to_path_buf(),
            line: self.line,
            column: column.to_string(),
            message: message.into(),
        }
    }

    fn raw(&self, column: &str) -> &str {
        let slot = self.names.iter().position(|n| *n == column).expect("known column");
        self.record.get(self.columns[slot]).unwrap_or("").trim()
    }

    fn optional<T: FromStr>(&self, column: &str) -> Result<Option<T>> {
        let text = self.raw(column);
        if text.is_empty() {
            return Ok(None);
        }
        text.parse::<T>()
            .map(Some)
            .map_err(|_| self.error(column, format!("cannot parse `{text}`")))
    }

    fn required<T: FromStr>(&self, column: &str) -> Result<T> {
        self.optional(column)?
            .ok_or_else(|| self.error(column, "missing value"))
    }

    fn finite(&self, column: &str) -> Result<f64> {
        let v: f64 = self.required(column)?;
        if !v.is_finite() {
            return Err(self.error(column, format!("non-finite value {v}")));
        }
        Ok(v)
    }

    fn optional_finite(&self, column: &str) -> Result<Option<f64>> {
        match self.optional::<f64>(column)? {
            Some(v) if !v.is_finite() => Err(self.error(column, format!("non-finite value {v}"))),
            other => Ok(other),
        }
    }

    fn flag(&self, column: &str) -> Result<bool> {
        match self.raw(column).to_ascii_lowercase().as_str() {
            "1" | "true" => Ok(true),
            "0" | "false" => Ok(false),
            "" => Err(self.error(column, "missing value")),
            other => Err(self.error(column, format!("expected 0/1 or true/false, got `{other}`"))),
        }
    }

    fn binary(&self, column: &str) -> Result<Option<u8>> {
        match self.optional::<u8>(column)? {
            Some(v) if v > 1 => Err(self.error(column, format!("expected 0 or 1, got {v}"))),
            other => Ok(other),
        }
    }

    fn half(&self, column: &str) -> Result<u8> {
        let v: u8 = self.required(column)?;
        if v != 1 && v != 2 {
            return Err(self.error(column, format!("expected 1 or 2, got {v}")));
        }
        Ok(v)
    }
}

/// Reads every record of a CSV with the given required columns; extra
/// columns are ignored.
fn for_each_record<R: Read>(
    reader: R,
    file: &Path,
    names: &[&str],
    mut visit: impl FnMut(&Cells<'_>) -> Result<()>,
) -> Result<()> {
    let mut csv = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = csv.headers().map_err(|e| csv_error(file, e))?.clone();
    let mut columns = Vec::with_capacity(names.len());
    for name in names {
        let slot = header.iter().position(|h| h.trim() == *name).ok_or_else(|| Error::Data {
            file: file.to_path_buf(),
            line: 1,
            column: name.to_string(),
            message: "column missing from header".into(),
        })?;
        columns.push(slot);
    }
    let mut record = csv::StringRecord::new();
    loop {
        match csv.read_record(&mut record) {
            Ok(true) => {}
            Ok(false) => break,
            Err(e) => return Err(csv_error(file, e)),
        }
        let line = record.position().map_or(0, |p| p.line());
        visit(&Cells {
            file,
            line,
            columns: &columns,
            names,
            record: &record,
        })?;
    }
    Ok(())
}

fn csv_error(file: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    Error::Data {
        file: file.to_path_buf(),
        line,
        column: String::new(),
        message: e.to_string(),
    }
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::Data {
        file: path.to_path_buf(),
        line: 0,
        column: String::new(),
        message: e.to_string(),
    })
}

/// Parses enrollment records; `file` only labels error messages.
pub fn parse_enrollment<R: Read>(reader: R, file: &Path) -> Result<Vec<RawEnrollmentRecord>> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for_each_record(reader, file, &ENROLLMENT_HEADER, |c| {
        let student_id = c.raw("student_id").to_string();
        if student_id.is_empty() {
            return Err(c.error("student_id", "missing value"));
        }
        let record = RawEnrollmentRecord {
            cohort_year: c.required("cohort_year")?,
            semester_number: c.required("semester_number")?,
            calendar_year: c.required("calendar_year")?,
            semester_of_year: c.half("semester_of_year")?,
            enrolled_next: c.flag("enrolled_next")?,
            graduated_by_next: c.flag("graduated_by_next")?,
            cum_gpa: c.finite("cum_gpa")?,
            repeat_ratio: c.finite("repeat_ratio")?,
            credits_approved_cum: c.finite("credits_approved_cum")?,
            gender_code: c
                .binary("gender_code")?
                .ok_or_else(|| c.error("gender_code", "missing value"))?,
            work_status: c.binary("work_status")?,
            student_id,
        };
        if record.semester_number < 1 {
            return Err(c.error("semester_number", "must be >= 1"));
        }
        if !(0.0..=1.0).contains(&record.repeat_ratio) {
            return Err(c.error("repeat_ratio", "outside [0, 1]"));
        }
        if record.credits_approved_cum < 0.0 {
            return Err(c.error("credits_approved_cum", "negative"));
        }
        if record.cohort_year > record.calendar_year {
            return Err(c.error("cohort_year", "after calendar_year"));
        }
        if !seen.insert((record.student_id.clone(), record.semester_number)) {
            return Err(c.error("semester_number", "duplicate (student_id, semester_number)"));
        }
        out.push(record);
        Ok(())
    })?;
    Ok(out)
}

pub fn read_enrollment(path: &Path) -> Result<Vec<RawEnrollmentRecord>> {
    parse_enrollment(open(path)?, path)
}

/// Parses a monthly CPI file; every year needs months 1 to 12 once.
pub fn parse_cpi<R: Read>(reader: R, file: &Path) -> Result<CpiMonthlySeries> {
    let mut entries = Vec::new();
    let mut seen = BTreeSet::new();
    let mut first_line = std::collections::BTreeMap::new();
    for_each_record(reader, file, &CPI_HEADER, |c| {
        let year: i32 = c.required("year")?;
        let month: u32 = c.required("month")?;
        if !(1..=12).contains(&month) {
            return Err(c.error("month", format!("{month} outside 1..=12")));
        }
        let change = c.finite("variacion")?;
        if change <= -1.0 {
            return Err(c.error("variacion", format!("{change} is not above -1")));
        }
        if !seen.insert((year, month)) {
            return Err(c.error("month", format!("year {year} month {month} given twice")));
        }
        first_line.entry(year).or_insert(c.line);
        entries.push((year, month, change));
        Ok(())
    })?;
    for (&year, &line) in &first_line {
        let months = seen.range((year, 0)..=(year, 13)).count();
        if months != 12 {
            return Err(Error::Data {
                file: file.to_path_buf(),
                line,
                column: "month".into(),
                message: format!("year {year} has {months} of 12 months"),
            });
        }
    }
    CpiMonthlySeries::from_monthly(&entries)
}

pub fn read_cpi(path: &Path) -> Result<CpiMonthlySeries> {
    parse_cpi(open(path)?, path)
}

pub fn parse_strikes<R: Read>(reader: R, file: &Path) -> Result<StrikeCalendar> {
    let mut calendar = StrikeCalendar::new();
    for_each_record(reader, file, &STRIKES_HEADER, |c| {
        let year: i32 = c.required("calendar_year")?;
        let half = c.half("semester_of_year")?;
        let intensity = c.finite("strike_intensity")?;
        if !(0.0..=1.0).contains(&intensity) {
            return Err(c.error("strike_intensity", format!("{intensity} outside [0, 1]")));
        }
        let semester = CalendarSemester { year, half };
        if calendar.get(semester).is_some() {
            return Err(c.error("semester_of_year", format!("{year}-{half} given twice")));
        }
        calendar
            .insert(semester, intensity)
            .map_err(|e| c.error("strike_intensity", e.to_string()))
    })?;
    Ok(calendar)
}

pub fn read_strikes(path: &Path) -> Result<StrikeCalendar> {
    parse_strikes(open(path)?, path)
}

pub fn parse_panel<R: Read>(reader: R, file: &Path) -> Result<Vec<PanelRow>> {
    let mut rows = Vec::new();
    for_each_record(reader, file, &PANEL_HEADER, |c| {
        let student_id = c.raw("student_id").to_string();
        if student_id.is_empty() {
            return Err(c.error("student_id", "missing value"));
        }
        let dropout = c
            .binary("dropout_next_sem")?
            .ok_or_else(|| c.error("dropout_next_sem", "missing value"))?;
        rows.push(PanelRow {
            student_id,
            semester_number: c.required("semester_number")?,
            calendar_year: c.required("calendar_year")?,
            semester_of_year: c.half("semester_of_year")?,
            cohort_year: c.required("cohort_year")?,
            dropout_next_sem: dropout,
            strikes_lag1: c.optional_finite("strikes_lag1")?,
            strikes_lag2: c.optional_finite("strikes_lag2")?,
            strikes_lag3: c.optional_finite("strikes_lag3")?,
            inflation_at_entry: c.finite("inflation_at_entry")?,
            interaction_term: c.optional_finite("interaction_term")?,
            cum_gpa: c.finite("cum_gpa")?,
            repeat_ratio: c.finite("repeat_ratio")?,
            credits_approved_cum: c.finite("credits_approved_cum")?,
            gender_code: c
                .binary("gender_code")?
                .ok_or_else(|| c.error("gender_code", "missing value"))?,
            work_status: c
                .binary("work_status")?
                .ok_or_else(|| c.error("work_status", "missing value"))?,
            work_status_imputed: c.flag("work_status_imputed")?,
        });
        Ok(())
    })?;
    Ok(rows)
}

pub fn read_panel(path: &Path) -> Result<Vec<PanelRow>> {
    parse_panel(open(path)?, path)
}

fn num(v: f64) -> String {
    format!("{v}")
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

fn flag(v: bool) -> &'static str {
    if v {
        "1"
    } else {
        "0"
    }
}

/// Serializes string records; the first record is the header.
pub fn csv_string<I, R>(header: &[&str], records: I) -> Result<String>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator,
    R::Item: AsRef<[u8]>,
{
    let mut writer = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    writer.write_record(header)?;
    for record in records {
        writer.write_record(record)?;
    }
    let bytes = writer.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn enrollment_csv(records: &[RawEnrollmentRecord]) -> Result<String> {
    csv_string(
        &ENROLLMENT_HEADER,
        records.iter().map(|r| {
            vec![
                r.student_id.clone(),
                r.cohort_year.to_string(),
                r.semester_number.to_string(),
                r.calendar_year.to_string(),
                r.semester_of_year.to_string(),
                flag(r.enrolled_next).to_string(),
                flag(r.graduated_by_next).to_string(),
                num(r.cum_gpa),
                num(r.repeat_ratio),
                num(r.credits_approved_cum),
                r.gender_code.to_string(),
                r.work_status.map(|w| w.to_string()).unwrap_or_default(),
            ]
        }),
    )
}

pub fn cpi_csv(cpi: &CpiMonthlySeries) -> Result<String> {
    csv_string(
        &CPI_HEADER,
        cpi.years().flat_map(|(year, months)| {
            months
                .iter()
                .enumerate()
                .map(move |(m, v)| vec![year.to_string(), (m + 1).to_string(), num(*v)])
        }),
    )
}

pub fn strikes_csv(calendar: &StrikeCalendar) -> Result<String> {
    csv_string(
        &STRIKES_HEADER,
        calendar
            .iter()
            .map(|(s, v)| vec![s.year.to_string(), s.half.to_string(), num(v)]),
    )
}

pub fn panel_csv(rows: &[PanelRow]) -> Result<String> {
    csv_string(
        &PANEL_HEADER,
        rows.iter().map(|r| {
            vec![
                r.student_id.clone(),
                r.semester_number.to_string(),
                r.calendar_year.to_string(),
                r.semester_of_year.to_string(),
                r.cohort_year.to_string(),
                r.dropout_next_sem.to_string(),
                opt(r.strikes_lag1),
                opt(r.strikes_lag2),
                opt(r.strikes_lag3),
                num(r.inflation_at_entry),
                opt(r.interaction_term),
                num(r.cum_gpa),
                num(r.repeat_ratio),
                num(r.credits_approved_cum),
                r.gender_code.to_string(),
                r.work_status.to_string(),
                flag(r.work_status_imputed).to_string(),
            ]
        }),
    )
}

/// Pretty JSON with a trailing newline.
pub fn json_string<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    Ok(text)
}

/// Writes `contents` to `path`, creating parent directories.
pub fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(contents)?;
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn src() -> PathBuf {
        PathBuf::from("test.csv")
    }

    #[test]
    fn enrollment_error_names_line_and_column() {
        let text = "student_id,cohort_year,semester_number,calendar_year,semester_of_year,enrolled_next,graduated_by_next,cum_gpa,repeat_ratio,credits_approved_cum,gender_code,work_status\n\
                    S1,2010,1,2010,1,1,0,6.5,0.1,3,0,\n\
                    S1,2010,2,2010,3,1,0,6.5,0.1,3,0,1\n";
        match parse_enrollment(text.as_bytes(), &src()) {
            Err(Error::Data { line, column, .. }) => {
                assert_eq!(line, 3);
                assert_eq!(column, "semester_of_year");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_work_status_is_missing() {
        let text = "student_id,cohort_year,semester_number,calendar_year,semester_of_year,enrolled_next,graduated_by_next,cum_gpa,repeat_ratio,credits_approved_cum,gender_code,work_status\n\
                    S1,2010,1,2010,1,true,false,6.5,0.1,3,1,\n";
        let records = parse_enrollment(text.as_bytes(), &src()).unwrap();
        assert_eq!(records[0].work_status, None);
        assert!(records[0].enrolled_next);
    }

    #[test]
    fn missing_header_column_is_reported() {
        let text = "year,month\n2010,1\n";
        match parse_cpi(text.as_bytes(), &src()) {
            Err(Error::Data { line, column, .. }) => {
                assert_eq!(line, 1);
                assert_eq!(column, "variacion");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn incomplete_cpi_year_is_rejected() {
        let mut text = String::from("year,month,variacion\n");
        for m in 1..=11 {
            text.push_str(&format!("2010,{m},0.01\n"));
        }
        assert!(matches!(parse_cpi(text.as_bytes(), &src()), Err(Error::Data { .. })));
    }

    #[test]
    fn strikes_round_trip() {
        let mut calendar = StrikeCalendar::new();
        calendar.insert(CalendarSemester { year: 2010, half: 1 }, 0.1).unwrap();
        calendar.insert(CalendarSemester { year: 2010, half: 2 }, 1.0 / 3.0).unwrap();
        let text = strikes_csv(&calendar).unwrap();
        assert_eq!(parse_strikes(text.as_bytes(), &src()).unwrap(), calendar);
    }
}
