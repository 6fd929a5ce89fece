//! Depth-limited gradient-boosted regression trees under squared loss.
//!
//! Split search is exhaustive over midpoints between consecutive distinct
//! feature values present in a node. Each feature is coded once by the rank
//! of its distinct values, so a node's candidate splits come from a
//! histogram over those codes (or from sorting the node's codes when the
//! node is small). Ties are broken by lowest feature index, then lowest
//! threshold.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng;

pub const FORMAT_VERSION: u32 = 1;

/// Relative gain below which a node is not split; guards against splitting
/// on rounding noise when residuals are constant.
const MIN_RELATIVE_GAIN: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GbrtConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub subsample: f64,
    pub min_leaf: usize,
    pub seed: u64,
}

impl Default for GbrtConfig {
    fn default() -> Self {
        Self {
            n_trees: 200,
            max_depth: 3,
            learning_rate: 0.05,
            subsample: 0.8,
            min_leaf: 5,
            seed: 0,
        }
    }
}

impl GbrtConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_depth == 0 {
            return Err(Error::InvalidArgument("tree depth must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument("learning rate must be positive".into()));
        }
        if !(self.subsample > 0.0 && self.subsample <= 1.0) {
            return Err(Error::InvalidArgument("subsample must lie in (0, 1]".into()));
        }
        if self.min_leaf == 0 {
            return Err(Error::InvalidArgument("minimum leaf size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
        cover: usize,
    },
    Leaf {
        value: f64,
        cover: usize,
    },
}

impl Node {
    pub fn cover(&self) -> usize {
        match self {
            Node::Split { cover, .. } | Node::Leaf { cover, .. } => *cover,
        }
    }
}

/// Binary regression tree; node 0 is the root. Rows with
/// `x[feature] <= threshold` go left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    pub nodes: Vec<Node>,
}

impl RegressionTree {
    #[inline]
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut idx = 0;
        loop {
            match &self.nodes[idx] {
                Node::Leaf { value, .. } => return *value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => idx = if x[*feature] <= *threshold { *left } else { *right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], i: usize) -> usize {
            match &nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, *left).max(walk(nodes, *right)),
            }
        }
        walk(&self.nodes, 0)
    }

    /// Features used by at least one split.
    pub fn split_features(&self) -> impl Iterator<Item = usize> + '_ {
        self.nodes.iter().filter_map(|n| match n {
            Node::Split { feature, .. } => Some(*feature),
            Node::Leaf { .. } => None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientBoostedEnsemble {
    pub format_version: u32,
    pub n_features: usize,
    pub base: f64,
    pub learning_rate: f64,
    pub trees: Vec<RegressionTree>,
    pub config: GbrtConfig,
    /// Training MSE after each boosting round (entry 0 is the base fit).
    pub train_mse: Vec<f64>,
}

impl GradientBoostedEnsemble {
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.n_features {
            return Err(Error::Schema(format!(
                "instance has {} features, model expects {}",
                x.len(),
                self.n_features
            )));
        }
        Ok(self.predict_unchecked(x))
    }

    #[inline]
    pub(crate) fn predict_unchecked(&self, x: &[f64]) -> f64 {
        let sum: f64 = self.trees.iter().map(|t| t.predict(x)).sum();
        self.base + self.learning_rate * sum
    }

    pub fn predict_matrix(&self, x: &Matrix) -> Result<Vec<f64>> {
        if x.cols() != self.n_features {
            return Err(Error::Schema(format!(
                "matrix has {} features, model expects {}",
                x.cols(),
                self.n_features
            )));
        }
        Ok((0..x.rows()).map(|i| self.predict_unchecked(x.row(i))).collect())
    }

    pub fn used_features(&self) -> Vec<bool> {
        let mut used = vec![false; self.n_features];
        for t in &self.trees {
            for f in t.split_features() {
                used[f] = true;
            }
        }
        used
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: Self = serde_json::from_str(text)?;
        if model.format_version != FORMAT_VERSION {
            return Err(Error::Schema(format!(
                "unsupported ensemble format version {}",
                model.format_version
            )));
        }
        Ok(model)
    }
}

/// Features recoded by the rank of their distinct values.
struct CodedFeatures {
    /// Column-major codes, `codes[f * n + i]`.
    codes: Vec<u32>,
    uniques: Vec<Vec<f64>>,
    n: usize,
}

impl CodedFeatures {
    fn new(x: &Matrix) -> Self {
        let n = x.rows();
        let p = x.cols();
        let mut codes = vec![0u32; n * p];
        let mut uniques = Vec::with_capacity(p);
        for f in 0..p {
            let col = x.column(f);
            let mut u = col.clone();
            u.sort_by(f64::total_cmp);
            u.dedup();
            for (i, v) in col.iter().enumerate() {
                codes[f * n + i] = u.partition_point(|w| w < v) as u32;
            }
            uniques.push(u);
        }
        Self { codes, uniques, n }
    }

    #[inline]
    fn code(&self, f: usize, i: usize) -> u32 {
        self.codes[f * self.n + i]
    }
}

#[derive(Clone, Copy)]
struct SplitCandidate {
    feature: usize,
    left_code: u32,
    threshold: f64,
    gain: f64,
}

struct Scratch {
    counts: Vec<u32>,
    sums: Vec<f64>,
    pairs: Vec<(u32, f64)>,
}

fn node_best_split(
    rows: &[u32],
    residuals: &[f64],
    features: &CodedFeatures,
    min_leaf: usize,
    scratch: &mut Scratch,
) -> Option<SplitCandidate> {
    let n_node = rows.len();
    if n_node < 2 * min_leaf {
        return None;
    }
    let mut total = 0.0;
    let mut total_sq = 0.0;
    for &i in rows {
        let r = residuals[i as usize];
        total += r;
        total_sq += r * r;
    }
    let parent = total * total / n_node as f64;
    let mut best: Option<SplitCandidate> = None;

    for (f, uniques) in features.uniques.iter().enumerate() {
        let n_bins = uniques.len();
        if n_bins < 2 {
            continue;
        }
        let mut consider = |lo_code: u32, hi_code: u32, n_left: usize, s_left: f64| {
            let n_right = n_node - n_left;
            if n_left < min_leaf || n_right < min_leaf {
                return;
            }
            let s_right = total - s_left;
            let gain =
                s_left * s_left / n_left as f64 + s_right * s_right / n_right as f64 - parent;
            if best.map_or(true, |b| gain > b.gain) {
                let lo = uniques[lo_code as usize];
                let hi = uniques[hi_code as usize];
                let mut threshold = lo + (hi - lo) * 0.5;
                if !(threshold < hi) {
                    threshold = lo;
                }
                best = Some(SplitCandidate {
                    feature: f,
                    left_code: lo_code,
                    threshold,
                    gain,
                });
            }
        };

        if n_node * 4 < n_bins {
            scratch.pairs.clear();
            scratch
                .pairs
                .extend(rows.iter().map(|&i| (features.code(f, i as usize), residuals[i as usize])));
            scratch.pairs.sort_unstable_by_key(|p| p.0);
            let mut n_left = 0usize;
            let mut s_left = 0.0;
            let mut k = 0;
            while k < scratch.pairs.len() {
                let code = scratch.pairs[k].0;
                if n_left > 0 {
                    let prev = scratch.pairs[k - 1].0;
                    consider(prev, code, n_left, s_left);
                }
                while k < scratch.pairs.len() && scratch.pairs[k].0 == code {
                    n_left += 1;
                    s_left += scratch.pairs[k].1;
                    k += 1;
                }
            }
        } else {
            let counts = &mut scratch.counts[..n_bins];
            let sums = &mut scratch.sums[..n_bins];
            counts.fill(0);
            sums.fill(0.0);
            for &i in rows {
                let c = features.code(f, i as usize) as usize;
                counts[c] += 1;
                sums[c] += residuals[i as usize];
            }
            let mut n_left = 0usize;
            let mut s_left = 0.0;
            let mut prev: Option<u32> = None;
            for code in 0..n_bins {
                let cnt = counts[code];
                if cnt == 0 {
                    continue;
                }
                if let Some(p) = prev {
                    consider(p, code as u32, n_left, s_left);
                }
                n_left += cnt as usize;
                s_left += sums[code];
                prev = Some(code as u32);
            }
        }
    }

    let sse = total_sq - parent;
    best.filter(|b| b.gain > MIN_RELATIVE_GAIN * total_sq && b.gain > 0.0 && sse > 0.0)
}

fn grow_tree(
    in_bag: Vec<u32>,
    residuals: &[f64],
    features: &CodedFeatures,
    config: &GbrtConfig,
    scratch: &mut Scratch,
) -> RegressionTree {
    let mut nodes: Vec<Node> = Vec::new();
    // (node slot, rows, depth)
    let mut frontier: Vec<(usize, Vec<u32>, usize)> = vec![(0, in_bag, 0)];
    nodes.push(Node::Leaf { value: 0.0, cover: 0 });
    while let Some((slot, rows, depth)) = frontier.pop() {
        let cover = rows.len();
        let split = if depth < config.max_depth {
            node_best_split(&rows, residuals, features, config.min_leaf, scratch)
        } else {
            None
        };
        match split {
            Some(s) => {
                let (left_rows, right_rows): (Vec<u32>, Vec<u32>) = rows
                    .iter()
                    .partition(|&&i| features.code(s.feature, i as usize) <= s.left_code);
                let left = nodes.len();
                let right = left + 1;
                nodes.push(Node::Leaf { value: 0.0, cover: 0 });
                nodes.push(Node::Leaf { value: 0.0, cover: 0 });
                nodes[slot] = Node::Split {
                    feature: s.feature,
                    threshold: s.threshold,
                    left,
                    right,
                    cover,
                };
                // Right first so the left subtree is expanded next.
                frontier.push((right, right_rows, depth + 1));
                frontier.push((left, left_rows, depth + 1));
            }
            None => {
                let sum: f64 = rows.iter().map(|&i| residuals[i as usize]).sum();
                let value = if cover > 0 { sum / cover as f64 } else { 0.0 };
                nodes[slot] = Node::Leaf { value, cover };
            }
        }
    }
    RegressionTree { nodes }
}

/// Fits a boosted squared-loss ensemble on row-major `x`.
pub fn fit_gbrt(x: &Matrix, y: &[f64], config: &GbrtConfig) -> Result<GradientBoostedEnsemble> {
    config.validate()?;
    let n = x.rows();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 rows, got {n}")));
    }
    if y.len() != n {
        return Err(Error::Schema(format!("target has {} rows, features {n}", y.len())));
    }
    if x.as_slice().iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Schema("training data contains missing or non-finite values".into()));
    }

    let base = y.iter().sum::<f64>() / n as f64;
    let mut prediction = vec![base; n];
    let mse = |pred: &[f64]| y.iter().zip(pred).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n as f64;
    let mut train_mse = vec![mse(&prediction)];
    let mut trees = Vec::new();

    let constant = y.iter().all(|v| *v == y[0]);
    if !constant {
        let features = CodedFeatures::new(x);
        let max_bins = features.uniques.iter().map(Vec::len).max().unwrap_or(0);
        let mut scratch = Scratch {
            counts: vec![0; max_bins],
            sums: vec![0.0; max_bins],
            pairs: Vec::new(),
        };
        let bag_size = ((config.subsample * n as f64).floor() as usize).clamp(1, n);
        let mut residuals = vec![0.0; n];
        for round in 0..config.n_trees {
            for i in 0..n {
                residuals[i] = y[i] - prediction[i];
            }
            let in_bag: Vec<u32> = if bag_size == n {
                (0..n as u32).collect()
            } else {
                let mut r = rng::stream(config.seed, &["gbrt", "subsample"], round as u64);
                let mut idx: Vec<u32> =
                    sample(&mut r, n, bag_size).into_iter().map(|i| i as u32).collect();
                idx.sort_unstable();
                idx
            };
            let tree = grow_tree(in_bag, &residuals, &features, config, &mut scratch);
            for (i, p) in prediction.iter_mut().enumerate() {
                *p += config.learning_rate * tree.predict(x.row(i));
            }
            train_mse.push(mse(&prediction));
            trees.push(tree);
        }
    }

    Ok(GradientBoostedEnsemble {
        format_version: FORMAT_VERSION,
        n_features: x.cols(),
        base,
        learning_rate: config.learning_rate,
        trees,
        config: *config,
        train_mse,
    })
}
