//! Inference helpers: normal-theory Wald tests, OLS with HC1 covariance,
//! rank AUC and a few summaries.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::linalg::{least_squares, spd_inverse, Matrix};

/// Two-sided p-value of a standard normal statistic.
pub fn two_sided_p(z: f64) -> f64 {
    if z.is_nan() {
        return f64::NAN;
    }
    erfc(z.abs() / std::f64::consts::SQRT_2).clamp(0.0, 1.0)
}

/// Upper critical value for a two-sided interval at `level`.
pub fn normal_critical(level: f64) -> f64 {
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    normal.inverse_cdf(0.5 + level / 2.0)
}

/// Point estimate with normal-theory inference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Wald {
    pub estimate: f64,
    pub std_error: f64,
    pub z: f64,
    pub p_value: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl Wald {
    pub fn new(estimate: f64, std_error: f64, level: f64) -> Self {
        let z = if std_error > 0.0 {
            estimate / std_error
        } else if estimate == 0.0 {
            0.0
        } else {
            f64::INFINITY.copysign(estimate)
        };
        let crit = normal_critical(level);
        Self {
            estimate,
            std_error,
            z,
            p_value: two_sided_p(z),
            ci_low: estimate - crit * std_error,
            ci_high: estimate + crit * std_error,
        }
    }

    pub fn covers(&self, value: f64) -> bool {
        self.ci_low <= value && value <= self.ci_high
    }
}

/// Ordinary least squares fit with heteroskedasticity-robust (HC1) covariance.
#[derive(Debug, Clone)]
pub struct OlsFit {
    pub coefficients: Vec<f64>,
    pub covariance: DMatrix<f64>,
    pub residuals: Vec<f64>,
}

impl OlsFit {
    pub fn std_error(&self, j: usize) -> f64 {
        self.covariance[(j, j)].max(0.0).sqrt()
    }

    pub fn wald(&self, j: usize, level: f64) -> Wald {
        Wald::new(self.coefficients[j], self.std_error(j), level)
    }
}

/// OLS of `y` on the columns of `x` (include an intercept column yourself).
pub fn ols_hc1(x: &Matrix, y: &[f64]) -> Result<OlsFit> {
    let n = x.rows();
    let k = x.cols();
    if y.len() != n {
        return Err(Error::Schema(format!("response has {} rows, design {n}", y.len())));
    }
    if n <= k {
        return Err(Error::InvalidArgument(format!(
            "OLS needs more rows ({n}) than columns ({k})"
        )));
    }
    let xm = x.to_dmatrix();
    let yv = DVector::from_column_slice(y);
    let beta = least_squares(&xm, &yv).ok_or_else(|| Error::RankDeficient(vec![]))?;
    let fitted = &xm * &beta;
    let residuals: Vec<f64> = (0..n).map(|i| y[i] - fitted[i]).collect();

    let xtx = xm.transpose() * &xm;
    let bread = spd_inverse(&xtx).ok_or_else(|| Error::RankDeficient(vec![]))?;
    let mut meat = DMatrix::<f64>::zeros(k, k);
    for (i, e) in residuals.iter().enumerate() {
        let row = x.row(i);
        let w = e * e;
        for a in 0..k {
            let ra = row[a] * w;
            for b in 0..k {
                meat[(a, b)] += ra * row[b];
            }
        }
    }
    let scale = n as f64 / (n - k) as f64;
    let covariance = &bread * meat * &bread * scale;
    Ok(OlsFit {
        coefficients: beta.iter().copied().collect(),
        covariance,
        residuals,
    })
}

/// Classical (homoskedastic) OLS covariance; used by the naive baselines.
pub fn ols_classical(x: &Matrix, y: &[f64]) -> Result<OlsFit> {
    let mut fit = ols_hc1(x, y)?;
    let n = x.rows();
    let k = x.cols();
    let sigma2 = fit.residuals.iter().map(|e| e * e).sum::<f64>() / (n - k) as f64;
    let xm = x.to_dmatrix();
    let bread = spd_inverse(&(xm.transpose() * &xm)).ok_or_else(|| Error::RankDeficient(vec![]))?;
    fit.covariance = bread * sigma2;
    Ok(fit)
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation (n - 1 denominator).
pub fn sample_sd(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return f64::NAN;
    }
    let m = mean(values);
    (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
}

pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let ma = mean(a);
    let mb = mean(b);
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}

/// Kolmogorov-Smirnov distance between the empirical distribution of
/// `values` and Uniform(0, 1).
pub fn ks_uniform_distance(values: &[f64]) -> f64 {
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    sorted
        .iter()
        .enumerate()
        .map(|(i, &u)| {
            let u = u.clamp(0.0, 1.0);
            let above = (i + 1) as f64 / n - u;
            let below = u - i as f64 / n;
            above.max(below)
        })
        .fold(0.0, f64::max)
}

/// Area under the ROC curve via the Mann-Whitney rank statistic with
/// average ranks for tied scores.
pub fn rank_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Schema("scores and labels differ in length".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::DegenerateOutcome("AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share their average.
        let avg = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum_pos += avg;
            }
        }
        i = j + 1;
    }
    let n_pos = n_pos as f64;
    Ok((rank_sum_pos - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg as f64))
}
