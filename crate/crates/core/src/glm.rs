//! Logistic regression by iteratively reweighted least squares, average
//! marginal effects with delta-method inference, and the per-lag logit
//! profile.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{collinear_columns, least_squares, spd_inverse, Matrix};
use crate::panel::PanelRow;
use crate::stats::Wald;

/// Numeric design with named columns; the intercept column comes first.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub matrix: Matrix,
    pub names: Vec<String>,
    /// Index of the source panel row for each design row.
    pub row_ids: Vec<usize>,
}

impl DesignMatrix {
    pub fn new(matrix: Matrix, names: Vec<String>, row_ids: Vec<usize>) -> Result<Self> {
        if matrix.cols() != names.len() {
            return Err(Error::Schema(format!(
                "{} column names for {} columns",
                names.len(),
                matrix.cols()
            )));
        }
        if row_ids.len() != matrix.rows() {
            return Err(Error::Schema("row id count differs from row count".into()));
        }
        if matrix.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::Schema("design contains missing or non-finite values".into()));
        }
        Ok(Self {
            matrix,
            names,
            row_ids,
        })
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IrlsOptions {
    /// Convergence threshold on the relative deviance change
    /// `|dev_old - dev| / (|dev| + 0.1)`.
    pub tol: f64,
    pub max_iter: usize,
    pub divergence_bound: f64,
}

impl Default for IrlsOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 100,
            divergence_bound: 30.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitFit {
    pub names: Vec<String>,
    pub coefficients: Vec<f64>,
    /// Inverse observed information at the final coefficients.
    pub covariance: Vec<Vec<f64>>,
    pub deviance: f64,
    pub deviance_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub separation: bool,
}

impl LogitFit {
    pub fn std_error(&self, j: usize) -> f64 {
        self.covariance[j][j].max(0.0).sqrt()
    }
}

fn sigmoid(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn deviance(x: &DMatrix<f64>, y: &[f64], beta: &DVector<f64>) -> f64 {
    let eta = x * beta;
    2.0 * y
        .iter()
        .zip(eta.iter())
        .map(|(&yi, &e)| softplus(e) - yi * e)
        .sum::<f64>()
}

fn check_binary(y: &[f64]) -> Result<()> {
    if let Some(v) = y.iter().find(|v| **v != 0.0 && **v != 1.0) {
        return Err(Error::Schema(format!("outcome must be 0/1, found {v}")));
    }
    let ones = y.iter().filter(|v| **v == 1.0).count();
    if ones == 0 || ones == y.len() {
        return Err(Error::DegenerateOutcome(format!(
            "all {} outcomes equal {}; the likelihood has no finite maximum",
            y.len(),
            if ones == 0 { 0 } else { 1 }
        )));
    }
    Ok(())
}

/// Standardized copy of `m` and the matrix mapping standardized
/// coefficients back to the original columns. Non-constant columns are
/// scaled to unit variance, and centered when a constant (intercept) column
/// exists to absorb the shift.
fn standardize(m: &Matrix) -> (DMatrix<f64>, DMatrix<f64>) {
    let (n, p) = (m.rows(), m.cols());
    let mut center = vec![0.0; p];
    let mut scale = vec![1.0; p];
    let mut intercept = None;
    for j in 0..p {
        let col = m.column(j);
        let mean = col.iter().sum::<f64>() / n as f64;
        let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        if sd > 0.0 {
            center[j] = mean;
            scale[j] = sd;
        } else if intercept.is_none() && col[0] != 0.0 {
            intercept = Some(j);
        }
    }
    if intercept.is_none() {
        center.iter_mut().for_each(|c| *c = 0.0);
    }
    let mut x = m.to_dmatrix();
    for j in 0..p {
        for i in 0..n {
            x[(i, j)] = (x[(i, j)] - center[j]) / scale[j];
        }
    }
    let mut transform = DMatrix::<f64>::zeros(p, p);
    for j in 0..p {
        transform[(j, j)] = 1.0 / scale[j];
    }
    if let Some(k) = intercept {
        let v = m.get(0, k);
        for j in 0..p {
            if j != k {
                transform[(k, j)] = -center[j] / (scale[j] * v);
            }
        }
        transform[(k, k)] = 1.0;
    }
    (x, transform)
}

/// Relative deviance rise treated as floating-point noise.
const ROUNDING_RISE: f64 = 1e-12;

pub fn fit_logit(design: &DesignMatrix, y: &[f64], options: IrlsOptions) -> Result<LogitFit> {
    let n = design.matrix.rows();
    let p = design.matrix.cols();
    if y.len() != n {
        return Err(Error::Schema(format!("outcome has {} rows, design {n}", y.len())));
    }
    check_binary(y)?;
    if n <= p {
        return Err(Error::InvalidArgument(format!(
            "logit needs more rows ({n}) than columns ({p})"
        )));
    }
    let collinear = collinear_columns(&design.matrix, &design.names);
    if !collinear.is_empty() {
        return Err(Error::RankDeficient(collinear));
    }

    // Iterate on centered and scaled columns so that the divergence bound
    // refers to comparable coefficients; results are mapped back exactly.
    let (x, transform) = standardize(&design.matrix);
    let mut beta = DVector::<f64>::zeros(p);
    let mut dev = deviance(&x, y, &beta);
    let mut trace = vec![dev];
    let mut converged = false;
    let mut separation = false;
    let mut iterations = 0;

    while iterations < options.max_iter {
        iterations += 1;
        let eta = &x * &beta;
        let mut xw = x.clone();
        let mut zw = DVector::<f64>::zeros(n);
        for i in 0..n {
            let pi = sigmoid(eta[i]);
            let w = (pi * (1.0 - pi)).max(1e-300);
            let sw = w.sqrt();
            for j in 0..p {
                xw[(i, j)] *= sw;
            }
            zw[i] = sw * (eta[i] + (y[i] - pi) / w);
        }
        let Some(proposal) = least_squares(&xw, &zw) else {
            return Err(Error::NotConverged(
                "weighted least-squares step is singular".into(),
            ));
        };

        // Step halving keeps the deviance trace non-increasing.
        let mut step = &proposal - &beta;
        let mut candidate = &beta + &step;
        let mut new_dev = deviance(&x, y, &candidate);
        let scale = dev.abs() + 0.1;
        if new_dev > dev && (new_dev - dev) / scale < ROUNDING_RISE {
            // At the optimum the deviance only moves by rounding; the full
            // Newton step is the more accurate point.
            beta = candidate;
            dev = new_dev;
            converged = true;
            break;
        }
        let mut halvings = 0;
        while new_dev > dev && halvings < 30 {
            step *= 0.5;
            candidate = &beta + &step;
            new_dev = deviance(&x, y, &candidate);
            halvings += 1;
        }
        if new_dev > dev {
            // No descent along the Newton direction: a stationary point up
            // to rounding, or a genuine failure.
            converged = (new_dev - dev) / scale < options.tol;
            break;
        }
        let change = (dev - new_dev) / scale;
        beta = candidate;
        dev = new_dev;
        trace.push(dev);

        if beta.iter().any(|b| b.abs() > options.divergence_bound) && change > options.tol {
            separation = true;
            break;
        }
        if change < options.tol {
            converged = true;
            break;
        }
    }

    let eta = &x * &beta;
    let mut info = DMatrix::<f64>::zeros(p, p);
    for i in 0..n {
        let pi = sigmoid(eta[i]);
        let w = pi * (1.0 - pi);
        for a in 0..p {
            let xa = x[(i, a)] * w;
            for b in 0..p {
                info[(a, b)] += xa * x[(i, b)];
            }
        }
    }
    let beta = &transform * &beta;
    let covariance = match spd_inverse(&info) {
        Some(c) => {
            let c = &transform * c * transform.transpose();
            (0..p).map(|a| (0..p).map(|b| c[(a, b)]).collect()).collect()
        }
        None => vec![vec![f64::NAN; p]; p],
    };

    Ok(LogitFit {
        names: design.names.clone(),
        coefficients: beta.iter().copied().collect(),
        covariance,
        deviance: dev,
        deviance_trace: trace,
        iterations,
        converged: converged && !separation,
        separation,
    })
}

/// Fitted probabilities for every design row.
pub fn predict_probabilities(fit: &LogitFit, design: &DesignMatrix) -> Vec<f64> {
    (0..design.matrix.rows())
        .map(|i| {
            let eta: f64 = design
                .matrix
                .row(i)
                .iter()
                .zip(&fit.coefficients)
                .map(|(x, b)| x * b)
                .sum();
            sigmoid(eta)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalEffect {
    pub variable: String,
    pub estimate: f64,
    pub std_error: f64,
    pub z: f64,
    pub p_value: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Average over rows of the analytic derivative of the fitted probability
/// with respect to a continuous design column, with delta-method SE.
pub fn average_marginal_effect(
    fit: &LogitFit,
    design: &DesignMatrix,
    variable: &str,
) -> Result<MarginalEffect> {
    if !fit.converged {
        return Err(Error::NotConverged(format!(
            "refusing marginal effect of `{variable}`: fit stopped after {} iterations (separation: {})",
            fit.iterations, fit.separation
        )));
    }
    let v = design
        .column_index(variable)
        .ok_or_else(|| Error::InvalidArgument(format!("`{variable}` is not a design column")))?;
    let n = design.matrix.rows();
    let p = design.matrix.cols();
    let beta_v = fit.coefficients[v];
    let probs = predict_probabilities(fit, design);

    let mut ame = 0.0;
    let mut grad = vec![0.0; p];
    for (i, &pi) in probs.iter().enumerate() {
        let w = pi * (1.0 - pi);
        ame += beta_v * w;
        let dw = beta_v * w * (1.0 - 2.0 * pi);
        for (j, g) in grad.iter_mut().enumerate() {
            *g += dw * design.matrix.get(i, j);
        }
        grad[v] += w;
    }
    let nf = n as f64;
    ame /= nf;
    grad.iter_mut().for_each(|g| *g /= nf);

    let mut var = 0.0;
    for a in 0..p {
        for b in 0..p {
            var += grad[a] * fit.covariance[a][b] * grad[b];
        }
    }
    let wald = Wald::new(ame, var.max(0.0).sqrt(), 0.95);
    Ok(MarginalEffect {
        variable: variable.to_string(),
        estimate: ame,
        std_error: wald.std_error,
        z: wald.z,
        p_value: wald.p_value,
        ci_low: wald.ci_low,
        ci_high: wald.ci_high,
    })
}

/// Controls entering every lagged logit as linear main effects.
pub const LOGIT_CONTROLS: [&str; 8] = [
    "cum_gpa",
    "repeat_ratio",
    "credits_approved_cum",
    "semester_number",
    "calendar_year",
    "cohort_year",
    "gender_code",
    "work_status",
];

pub fn lag_label(k: u32) -> String {
    format!("MACRO_paros_lag_sem_{k}")
}

pub(crate) fn control_value(row: &PanelRow, name: &str) -> f64 {
    match name {
        "cum_gpa" => row.cum_gpa,
        "repeat_ratio" => row.repeat_ratio,
        "credits_approved_cum" => row.credits_approved_cum,
        "semester_number" => row.semester_number as f64,
        "calendar_year" => row.calendar_year as f64,
        "cohort_year" => row.cohort_year as f64,
        "gender_code" => row.gender_code as f64,
        "work_status" => row.work_status as f64,
        "work_status_imputed" => f64::from(u8::from(row.work_status_imputed)),
        "inflation_at_entry" => row.inflation_at_entry,
        _ => panic!("unknown control `{name}`"),
    }
}

/// Design `[1, lag_k, controls...]` over rows with all three lags present.
pub fn lag_design(panel: &[PanelRow], k: u32) -> Result<(DesignMatrix, Vec<f64>)> {
    let rows: Vec<usize> = (0..panel.len()).filter(|&i| panel[i].has_all_lags()).collect();
    let mut names = vec!["intercept".to_string(), lag_label(k)];
    names.extend(LOGIT_CONTROLS.iter().map(|s| s.to_string()));
    let mut data = Vec::with_capacity(rows.len() * names.len());
    for &i in &rows {
        let r = &panel[i];
        data.push(1.0);
        data.push(r.lag(k).expect("filtered"));
        data.extend(LOGIT_CONTROLS.iter().map(|c| control_value(r, c)));
    }
    let y = rows.iter().map(|&i| panel[i].dropout_next_sem as f64).collect();
    let matrix = Matrix::from_row_major(rows.len(), names.len(), data)?;
    Ok((DesignMatrix::new(matrix, names, rows)?, y))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LagEffectRow {
    pub lag: u32,
    pub label: String,
    pub n: usize,
    pub effect: Option<MarginalEffect>,
    pub error: Option<String>,
}

/// Per-lag logit effects (the `Lag / ATE / p-value` table). The ATE
/// column holds the average marginal effect; the interval is an extension
/// carried only in the machine-readable form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table1Report {
    pub rows: Vec<LagEffectRow>,
}

pub fn fit_lag_profile(panel: &[PanelRow], lags: &[u32], options: IrlsOptions) -> Table1Report {
    let rows = lags
        .iter()
        .map(|&k| {
            let label = lag_label(k);
            let attempt = lag_design(panel, k).and_then(|(design, y)| {
                let fit = fit_logit(&design, &y, options)?;
                let me = average_marginal_effect(&fit, &design, &label)?;
                Ok((design.matrix.rows(), me))
            });
            match attempt {
                Ok((n, me)) => LagEffectRow {
                    lag: k,
                    label,
                    n,
                    effect: Some(me),
                    error: None,
                },
                Err(e) => LagEffectRow {
                    lag: k,
                    label,
                    n: 0,
                    effect: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    Table1Report { rows }
}
