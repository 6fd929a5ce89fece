//! Independent reference implementations used as test oracles. Nothing
//! here calls into the crate's numerical code.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Solves `a x = b` by Gaussian elimination with partial pivoting.
pub fn solve(a: &[Vec<f64>], b: &[f64]) -> Option<Vec<f64>> {
    let n = b.len();
    let mut m: Vec<Vec<f64>> = a
        .iter()
        .zip(b)
        .map(|(row, &bi)| {
            let mut r = row.clone();
            r.push(bi);
            r
        })
        .collect();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))?;
        if m[pivot][col].abs() < 1e-300 {
            return None;
        }
        m.swap(col, pivot);
        for row in col + 1..n {
            let f = m[row][col] / m[col][col];
            for k in col..=n {
                m[row][k] -= f * m[col][k];
            }
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| m[row][k] * x[k]).sum();
        x[row] = (m[row][n] - s) / m[row][row];
    }
    Some(x)
}

pub fn invert(a: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let n = a.len();
    let mut cols = Vec::with_capacity(n);
    for j in 0..n {
        let e: Vec<f64> = (0..n).map(|i| f64::from(u8::from(i == j))).collect();
        cols.push(solve(a, &e)?);
    }
    Some((0..n).map(|i| (0..n).map(|j| cols[j][i]).collect()).collect())
}

fn sigmoid(eta: f64) -> f64 {
    1.0 / (1.0 + (-eta).exp())
}

fn log_likelihood(x: &[Vec<f64>], y: &[f64], beta: &[f64]) -> f64 {
    x.iter()
        .zip(y)
        .map(|(xi, &yi)| {
            let eta: f64 = xi.iter().zip(beta).map(|(a, b)| a * b).sum();
            // log(1 + e^eta) computed without overflow.
            let softplus = eta.max(0.0) + (-eta.abs()).exp().ln_1p();
            yi * eta - softplus
        })
        .sum()
}

/// Newton-Raphson for the logit MLE on the raw design, started at zero,
/// with step halving whenever the log-likelihood would fall. Returns
/// coefficients and the inverse observed information.
pub fn newton_logit(x: &[Vec<f64>], y: &[f64]) -> Option<(Vec<f64>, Vec<Vec<f64>>)> {
    let p = x[0].len();
    let mut beta = vec![0.0; p];
    let mut ll = log_likelihood(x, y, &beta);
    for _ in 0..500 {
        let mut grad = vec![0.0; p];
        let mut hess = vec![vec![0.0; p]; p];
        for (xi, &yi) in x.iter().zip(y) {
            let eta: f64 = xi.iter().zip(&beta).map(|(a, b)| a * b).sum();
            let mu = sigmoid(eta);
            let w = mu * (1.0 - mu);
            for a in 0..p {
                grad[a] += xi[a] * (yi - mu);
                for b in 0..p {
                    hess[a][b] += w * xi[a] * xi[b];
                }
            }
        }
        let mut step = solve(&hess, &grad)?;
        let mut candidate: Vec<f64> = beta.iter().zip(&step).map(|(b, s)| b + s).collect();
        let mut next = log_likelihood(x, y, &candidate);
        let mut halvings = 0;
        while next < ll - 1e-12 * ll.abs() && halvings < 60 {
            step.iter_mut().for_each(|s| *s *= 0.5);
            candidate = beta.iter().zip(&step).map(|(b, s)| b + s).collect();
            next = log_likelihood(x, y, &candidate);
            halvings += 1;
        }
        let size = step
            .iter()
            .zip(&candidate)
            .map(|(s, b)| s.abs() / b.abs().max(1.0))
            .fold(0.0, f64::max);
        beta = candidate;
        ll = next;
        if size < 1e-13 {
            let mut hess = vec![vec![0.0; p]; p];
            for xi in x {
                let eta: f64 = xi.iter().zip(&beta).map(|(a, b)| a * b).sum();
                let mu = sigmoid(eta);
                for a in 0..p {
                    for b in 0..p {
                        hess[a][b] += mu * (1.0 - mu) * xi[a] * xi[b];
                    }
                }
            }
            return Some((beta, invert(&hess)?));
        }
    }
    None
}

/// A logit fixture with `n` rows and `p` columns (intercept first); the
/// non-intercept columns get arbitrary offsets and scales.
pub fn logit_fixture(seed: u64, n: usize, p: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let offsets: Vec<f64> = (0..p).map(|_| r.gen_range(-50.0..50.0)).collect();
    let scales: Vec<f64> = (0..p).map(|_| 10f64.powf(r.gen_range(-2.0..2.0))).collect();
    let coefs: Vec<f64> = (0..p).map(|_| r.gen_range(-0.8..0.8)).collect();
    loop {
        let mut x = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        for _ in 0..n {
            let z: Vec<f64> = (0..p).map(|_| r.gen_range(-1.7..1.7)).collect();
            let mut row = vec![1.0];
            row.extend((1..p).map(|j| offsets[j] + scales[j] * z[j]));
            let eta: f64 = coefs[0] + (1..p).map(|j| coefs[j] * z[j]).sum::<f64>();
            y.push(f64::from(u8::from(r.gen::<f64>() < sigmoid(eta))));
            x.push(row);
        }
        let ones = y.iter().filter(|v| **v == 1.0).count();
        if ones >= 5 && n - ones >= 5 {
            return (x, y);
        }
    }
}

/// OLS coefficients by the normal equations.
pub fn ols(x: &[Vec<f64>], y: &[f64]) -> Vec<f64> {
    let p = x[0].len();
    let mut xtx = vec![vec![0.0; p]; p];
    let mut xty = vec![0.0; p];
    for (xi, &yi) in x.iter().zip(y) {
        for a in 0..p {
            xty[a] += xi[a] * yi;
            for b in 0..p {
                xtx[a][b] += xi[a] * xi[b];
            }
        }
    }
    solve(&xtx, &xty).expect("full rank design")
}

/// Interventional Shapley values by enumerating all 2^d coalitions:
/// v(S) = mean over background rows b of f(x_S, b_rest).
pub fn brute_force_shapley(f: &dyn Fn(&[f64]) -> f64, x: &[f64], background: &[Vec<f64>]) -> Vec<f64> {
    let d = x.len();
    let value = |mask: usize| -> f64 {
        let mut z = vec![0.0; d];
        let mut total = 0.0;
        for b in background {
            for j in 0..d {
                z[j] = if mask >> j & 1 == 1 { x[j] } else { b[j] };
            }
            total += f(&z);
        }
        total / background.len() as f64
    };
    let values: Vec<f64> = (0..1usize << d).map(value).collect();
    let mut fact = vec![1.0f64; d + 1];
    for k in 1..=d {
        fact[k] = fact[k - 1] * k as f64;
    }
    let mut phi = vec![0.0; d];
    for (i, out) in phi.iter_mut().enumerate() {
        for mask in 0..1usize << d {
            if mask >> i & 1 == 1 {
                continue;
            }
            let s = mask.count_ones() as usize;
            let weight = fact[s] * fact[d - s - 1] / fact[d];
            *out += weight * (values[mask | 1 << i] - values[mask]);
        }
    }
    phi
}

/// Reference regression tree: exhaustive search over midpoints of
/// consecutive distinct values, least squares gain, first maximum in
/// (feature, threshold) order, leaves hold the mean.
#[derive(Debug, Clone)]
pub enum RefTree {
    Leaf(f64),
    Split(usize, f64, Box<RefTree>, Box<RefTree>),
}

impl RefTree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        match self {
            RefTree::Leaf(v) => *v,
            RefTree::Split(f, t, l, r) => {
                if x[*f] <= *t {
                    l.predict(x)
                } else {
                    r.predict(x)
                }
            }
        }
    }
}

pub fn reference_tree(x: &[Vec<f64>], y: &[f64], rows: &[usize], depth: usize, min_leaf: usize) -> RefTree {
    let mean = rows.iter().map(|&i| y[i]).sum::<f64>() / rows.len() as f64;
    if depth == 0 || rows.len() < 2 * min_leaf {
        return RefTree::Leaf(mean);
    }
    let sse = |idx: &[usize]| -> f64 {
        let m = idx.iter().map(|&i| y[i]).sum::<f64>() / idx.len() as f64;
        idx.iter().map(|&i| (y[i] - m).powi(2)).sum()
    };
    let parent = sse(rows);
    let mut best: Option<(f64, usize, f64)> = None;
    for f in 0..x[0].len() {
        let mut values: Vec<f64> = rows.iter().map(|&i| x[i][f]).collect();
        values.sort_by(f64::total_cmp);
        values.dedup();
        for w in values.windows(2) {
            let t = w[0] + (w[1] - w[0]) * 0.5;
            let (l, r): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| x[i][f] <= t);
            if l.len() < min_leaf || r.len() < min_leaf {
                continue;
            }
            let gain = parent - sse(&l) - sse(&r);
            if best.map_or(true, |b| gain > b.0 * (1.0 + 1e-9) + 1e-12) {
                best = Some((gain, f, t));
            }
        }
    }
    match best {
        Some((gain, f, t)) if gain > 1e-9 * parent.max(1e-300) => {
            let (l, r): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| x[i][f] <= t);
            RefTree::Split(
                f,
                t,
                Box::new(reference_tree(x, y, &l, depth - 1, min_leaf)),
                Box::new(reference_tree(x, y, &r, depth - 1, min_leaf)),
            )
        }
        _ => RefTree::Leaf(mean),
    }
}
