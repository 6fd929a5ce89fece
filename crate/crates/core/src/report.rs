//! Plain-text tables in the layout of the published tables.
//!
//! Columns are separated by at least two spaces; the first column is left
//! aligned and the others right aligned. Estimates and p-values carry four
//! decimals; non-finite values print as `NA`.

use crate::dml::{DmlEstimate, GAMMA_LABEL, TAU_LABEL};
use crate::glm::Table1Report;
use crate::panel::AssemblyReport;
use crate::robustness::{SeedSweepResult, Table5Report};
use crate::shapley::{AucReport, FeatureImportance};
use crate::synth::AmplificationReport;

pub const TABLE1_HEADER: [&str; 3] = ["Lag", "ATE", "p-value"];
pub const TABLE3_HEADER: [&str; 3] = ["Cohort year", "N students", "Annual inflation at entry (%)"];
pub const TABLE4_HEADER: [&str; 4] = ["Parameter", "Estimate", "Std. Error", "p-value"];
pub const TABLE5_HEADER: [&str; 6] = [
    "Specification",
    "Coefficient",
    "Std. Error",
    "CI Lower",
    "CI Upper",
    "p-value",
];

pub fn fmt4(v: f64) -> String {
    if v.is_finite() {
        let s = format!("{v:.4}");
        // Avoid a signed zero such as "-0.0000".
        if s.trim_start_matches('-').chars().all(|c| c == '0' || c == '.') {
            s.trim_start_matches('-').to_string()
        } else {
            s
        }
    } else {
        "NA".to_string()
    }
}

/// Renders a title, a header and rows as an aligned text table.
pub fn render_table(title: &str, header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: &[String]| -> String {
        let mut out = String::new();
        for (j, cell) in cells.iter().enumerate() {
            if j > 0 {
                out.push_str("  ");
            }
            let pad = widths[j].saturating_sub(cell.chars().count());
            if j == 0 {
                out.push_str(cell);
                out.push_str(&" ".repeat(pad));
            } else {
                out.push_str(&" ".repeat(pad));
                out.push_str(cell);
            }
        }
        out.trim_end().to_string()
    };
    let header: Vec<String> = header.iter().map(|h| h.to_string()).collect();
    let mut text = String::new();
    if !title.is_empty() {
        text.push_str(title);
        text.push('\n');
    }
    text.push_str(&line(&header));
    text.push('\n');
    let rule: usize = widths.iter().sum::<usize>() + 2 * widths.len().saturating_sub(1);
    text.push_str(&"-".repeat(rule));
    text.push('\n');
    for row in rows {
        text.push_str(&line(row));
        text.push('\n');
    }
    text
}

pub fn table1_text(report: &Table1Report) -> String {
    let rows: Vec<Vec<String>> = report
        .rows
        .iter()
        .map(|r| match &r.effect {
            Some(me) => vec![r.label.clone(), fmt4(me.estimate), fmt4(me.p_value)],
            None => vec![r.label.clone(), "NA".into(), "NA".into()],
        })
        .collect();
    let mut text = render_table(
        "Lagged strike effects on next-semester dropout (logit average marginal effects)",
        &TABLE1_HEADER,
        &rows,
    );
    for r in &report.rows {
        if let Some(e) = &r.error {
            text.push_str(&format!("note: {}: {e}\n", r.label));
        }
    }
    text
}

pub fn table3_text(report: &AssemblyReport) -> String {
    let rows: Vec<Vec<String>> = report
        .cohorts
        .iter()
        .map(|c| {
            vec![
                c.cohort_year.to_string(),
                c.n_students.to_string(),
                format!("{:.2}", c.inflation_at_entry * 100.0),
            ]
        })
        .collect();
    render_table("Annual inflation at entry by cohort", &TABLE3_HEADER, &rows)
}

pub fn table4_text(estimate: &DmlEstimate) -> String {
    let row = |label: &str, w: &crate::stats::Wald| {
        vec![label.to_string(), fmt4(w.estimate), fmt4(w.std_error), fmt4(w.p_value)]
    };
    let rows = vec![row(TAU_LABEL, &estimate.tau), row(GAMMA_LABEL, &estimate.gamma)];
    let mut text = render_table("Double machine learning estimates", &TABLE4_HEADER, &rows);
    text.push_str(&format!(
        "n = {}, folds = {}, seed = {}, HC1 standard errors\n",
        estimate.n, estimate.folds, estimate.seed
    ));
    for w in &estimate.warnings {
        text.push_str(&format!("warning: {w}\n"));
    }
    text
}

pub fn table5_text(report: &Table5Report) -> String {
    let rows: Vec<Vec<String>> = report
        .rows
        .iter()
        .map(|r| {
            vec![
                r.specification.clone(),
                fmt4(r.coefficient),
                fmt4(r.std_error),
                fmt4(r.ci_low),
                fmt4(r.ci_high),
                fmt4(r.p_value),
            ]
        })
        .collect();
    render_table("Placebo test", &TABLE5_HEADER, &rows)
}

pub fn sweep_text(result: &SeedSweepResult) -> String {
    let header = ["Parameter", "Mean", "SD", "Min", "Max", "Positive share", "Significant share"];
    let row = |label: &str, s: &crate::robustness::ParameterSummary| {
        vec![
            label.to_string(),
            fmt4(s.mean),
            fmt4(s.sd),
            fmt4(s.min),
            fmt4(s.max),
            fmt4(s.positive_fraction),
            fmt4(s.significant_fraction),
        ]
    };
    let rows = vec![
        row(TAU_LABEL, &result.summary.tau),
        row(GAMMA_LABEL, &result.summary.gamma),
    ];
    let mut text = render_table(
        &format!("Seed sensitivity over {} cross-fitting seeds", result.records.len()),
        &header,
        &rows,
    );
    for f in &result.failures {
        text.push_str(&format!("failed seed {}: {}\n", f.seed, f.error));
    }
    text
}

pub fn importance_text(importance: &[FeatureImportance], auc: &AucReport) -> String {
    let rows: Vec<Vec<String>> = importance
        .iter()
        .enumerate()
        .map(|(rank, f)| vec![(rank + 1).to_string(), f.feature.clone(), fmt4(f.mean_abs_shap)])
        .collect();
    let mut text = render_table(
        "Global Shapley importance (mean absolute attribution)",
        &["Rank", "Feature", "Mean |SHAP|"],
        &rows,
    );
    text.push_str(&format!(
        "held-out AUC = {} (n_train = {}, n_test = {})\n",
        fmt4(auc.auc),
        auc.n_train,
        auc.n_test
    ));
    text
}

pub fn amplification_text(report: &AmplificationReport) -> String {
    let rows = vec![
        vec!["Baseline".to_string(), fmt4(report.baseline)],
        vec!["Strikes only".to_string(), fmt4(report.strikes_only)],
        vec!["Inflation only".to_string(), fmt4(report.inflation_only)],
        vec!["Combined".to_string(), fmt4(report.combined)],
    ];
    let mut text = render_table(
        &format!("Cumulative dropout after {} semesters", report.horizon),
        &["Scenario", "Cumulative dropout"],
        &rows,
    );
    text.push_str(&format!(
        "amplification = {}\n",
        report.amplification.map_or_else(|| "NA".to_string(), fmt4)
    ));
    text
}
