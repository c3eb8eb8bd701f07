//! Regression learners for conditional-mean fits: OLS, ridge, k-nearest
//! neighbours, CART regression trees and bagged trees.
//!
//! Every learner maps a covariate matrix and an outcome vector to an
//! immutable [`FittedModel`]. Fits are deterministic given the spec seed.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::Rng;
use thiserror::Error;

use crate::matrixkit::{pinv_dense, rank_dense, solve_spd, RealMatrix};
use crate::rng::{derive_seed, rng_from_seed, SimRng};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LearnerError {
    #[error("invalid learner input: {0}")]
    InvalidInput(String),
    #[error("invalid learner spec: {0}")]
    InvalidSpec(String),
    #[error("dimension mismatch: model trained on {expected} columns, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

pub type Result<T> = std::result::Result<T, LearnerError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LearnerKind {
    Ols,
    Ridge,
    Knn,
    Tree,
    BaggedTrees,
}

impl LearnerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            LearnerKind::Ols => "ols",
            LearnerKind::Ridge => "ridge",
            LearnerKind::Knn => "knn",
            LearnerKind::Tree => "tree",
            LearnerKind::BaggedTrees => "bagged-trees",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnerSpec {
    pub kind: LearnerKind,
    /// Ridge penalty on the centered design.
    pub ridge_penalty: f64,
    /// OLS: use a tiny ridge instead of the pseudoinverse when the Gram
    /// matrix is rank-deficient.
    pub ridge_fallback: bool,
    pub neighbors: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    pub n_trees: usize,
    pub bootstrap: bool,
    /// Share of features tried at each split; `None` tries all.
    pub feature_fraction: Option<f64>,
    pub seed: u64,
}

impl LearnerSpec {
    pub fn new(kind: LearnerKind) -> Self {
        Self {
            kind,
            ridge_penalty: 1.0,
            ridge_fallback: false,
            neighbors: 10,
            max_depth: 4,
            min_leaf: 20,
            n_trees: 50,
            bootstrap: true,
            feature_fraction: None,
            seed: 0,
        }
    }

    pub fn ols() -> Self {
        Self::new(LearnerKind::Ols)
    }

    pub fn ridge(penalty: f64) -> Self {
        Self {
            ridge_penalty: penalty,
            ..Self::new(LearnerKind::Ridge)
        }
    }

    pub fn knn(k: usize) -> Self {
        Self {
            neighbors: k,
            ..Self::new(LearnerKind::Knn)
        }
    }

    pub fn tree(max_depth: usize, min_leaf: usize) -> Self {
        Self {
            max_depth,
            min_leaf,
            ..Self::new(LearnerKind::Tree)
        }
    }

    pub fn bagged_trees(n_trees: usize, max_depth: usize, min_leaf: usize) -> Self {
        Self {
            n_trees,
            max_depth,
            min_leaf,
            ..Self::new(LearnerKind::BaggedTrees)
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(LearnerError::InvalidSpec(m.to_string()));
        if !(self.ridge_penalty.is_finite() && self.ridge_penalty >= 0.0) {
            return bad("ridge penalty must be finite and >= 0");
        }
        if self.neighbors == 0 {
            return bad("neighbor count must be >= 1");
        }
        if self.max_depth == 0 {
            return bad("max depth must be >= 1");
        }
        if self.min_leaf == 0 {
            return bad("min leaf size must be >= 1");
        }
        if self.n_trees == 0 {
            return bad("tree count must be >= 1");
        }
        if let Some(f) = self.feature_fraction {
            if !(f > 0.0 && f <= 1.0) {
                return bad("feature fraction must be in (0, 1]");
            }
        }
        Ok(())
    }

    /// Smallest training size for which a fit on `p` covariates is
    /// considered reliable; below it callers should pool.
    pub fn min_train_size(&self, p: usize) -> usize {
        match self.kind {
            LearnerKind::Ols => p + 2,
            LearnerKind::Ridge => 2,
            LearnerKind::Knn => self.neighbors,
            LearnerKind::Tree | LearnerKind::BaggedTrees => 2 * self.min_leaf,
        }
    }
}

impl fmt::Display for LearnerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            LearnerKind::Ols => write!(f, "ols"),
            LearnerKind::Ridge => write!(f, "ridge(penalty={})", self.ridge_penalty),
            LearnerKind::Knn => write!(f, "knn(k={})", self.neighbors),
            LearnerKind::Tree => write!(f, "tree(depth={},leaf={})", self.max_depth, self.min_leaf),
            LearnerKind::BaggedTrees => {
                write!(
                    f,
                    "bagged-trees(trees={},depth={},leaf={},bootstrap={}",
                    self.n_trees, self.max_depth, self.min_leaf, self.bootstrap
                )?;
                if let Some(m) = self.feature_fraction {
                    write!(f, ",mtry={m}")?;
                }
                write!(f, ",seed={})", self.seed)
            }
        }
    }
}

impl FromStr for LearnerSpec {
    type Err = LearnerError;

    /// Parses `name` or `name(key=value,...)`, e.g. `tree(depth=4,leaf=20)`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (name, args) = match s.find('(') {
            Some(open) => {
                if !s.ends_with(')') {
                    return Err(LearnerError::InvalidSpec(format!("unbalanced parentheses in '{s}'")));
                }
                (&s[..open], &s[open + 1..s.len() - 1])
            }
            None => (s, ""),
        };
        let mut spec = match name.trim().to_ascii_lowercase().as_str() {
            "ols" | "lin" | "linear" => LearnerSpec::ols(),
            "ridge" => LearnerSpec::new(LearnerKind::Ridge),
            "knn" => LearnerSpec::new(LearnerKind::Knn),
            "tree" | "cart" => LearnerSpec::new(LearnerKind::Tree),
            "bagged-trees" | "bagged" | "bag" => LearnerSpec::new(LearnerKind::BaggedTrees),
            "rf" => LearnerSpec {
                feature_fraction: Some(1.0 / 3.0),
                ..LearnerSpec::new(LearnerKind::BaggedTrees)
            },
            other => return Err(LearnerError::InvalidSpec(format!("unknown learner '{other}'"))),
        };
        for part in args.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| LearnerError::InvalidSpec(format!("expected key=value, got '{part}'")))?;
            let value = value.trim();
            let num = |v: &str| {
                v.parse::<f64>()
                    .map_err(|_| LearnerError::InvalidSpec(format!("bad number '{v}' for '{key}'")))
            };
            let count = |v: &str| {
                v.parse::<usize>()
                    .map_err(|_| LearnerError::InvalidSpec(format!("bad count '{v}' for '{key}'")))
            };
            match key.trim() {
                "penalty" | "lambda" => spec.ridge_penalty = num(value)?,
                "fallback" => spec.ridge_fallback = parse_bool(value)?,
                "k" => spec.neighbors = count(value)?,
                "depth" => spec.max_depth = count(value)?,
                "leaf" => spec.min_leaf = count(value)?,
                "trees" => spec.n_trees = count(value)?,
                "bootstrap" => spec.bootstrap = parse_bool(value)?,
                "mtry" => spec.feature_fraction = Some(num(value)?),
                "seed" => {
                    spec.seed = value
                        .parse()
                        .map_err(|_| LearnerError::InvalidSpec(format!("bad seed '{value}'")))?
                }
                other => {
                    return Err(LearnerError::InvalidSpec(format!("unknown learner parameter '{other}'")))
                }
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

fn parse_bool(v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" => Ok(true),
        "0" | "false" | "no" => Ok(false),
        _ => Err(LearnerError::InvalidSpec(format!("bad boolean '{v}'"))),
    }
}

#[derive(Debug, Clone)]
enum Node {
    Leaf(f64),
    Split {
        feature: usize,
        threshold: f64,
        left: Box<Node>,
        right: Box<Node>,
    },
}

impl Node {
    fn predict(&self, row: &[f64]) -> f64 {
        let mut node = self;
        loop {
            match node {
                Node::Leaf(v) => return *v,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    node = if row[*feature] <= *threshold { left } else { right };
                }
            }
        }
    }

    fn leaves(&self) -> usize {
        match self {
            Node::Leaf(_) => 1,
            Node::Split { left, right, .. } => left.leaves() + right.leaves(),
        }
    }
}

#[derive(Debug, Clone)]
enum Model {
    Linear { intercept: f64, coef: DVector<f64> },
    Knn { scale: Vec<f64>, x: Vec<Vec<f64>>, y: Vec<f64>, k: usize },
    Trees(Vec<Node>),
}

/// A fitted learner. Immutable; safe to share across threads.
#[derive(Debug, Clone)]
pub struct FittedModel {
    model: Model,
    dim: usize,
    n_train: usize,
}

impl FittedModel {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_train(&self) -> usize {
        self.n_train
    }

    /// Linear coefficients (intercept, slopes) for OLS and ridge fits.
    pub fn linear_coefficients(&self) -> Option<(f64, Vec<f64>)> {
        match &self.model {
            Model::Linear { intercept, coef } => Some((*intercept, coef.iter().copied().collect())),
            _ => None,
        }
    }

    /// Total leaf count across trees, for tree-based fits.
    pub fn leaf_count(&self) -> Option<usize> {
        match &self.model {
            Model::Trees(t) => Some(t.iter().map(Node::leaves).sum()),
            _ => None,
        }
    }

    pub fn predict(&self, x: &RealMatrix) -> Result<Vec<f64>> {
        predict(self, x)
    }
}

pub fn fit(spec: &LearnerSpec, x: &RealMatrix, y: &[f64]) -> Result<FittedModel> {
    spec.validate()?;
    fit_dense(spec, x.as_dmatrix(), y)
}

pub(crate) fn fit_dense(spec: &LearnerSpec, x: &DMatrix<f64>, y: &[f64]) -> Result<FittedModel> {
    let (n, p) = x.shape();
    if n == 0 {
        return Err(LearnerError::InvalidInput("zero training rows".into()));
    }
    if y.len() != n {
        return Err(LearnerError::InvalidInput(format!(
            "{} outcomes for {n} covariate rows",
            y.len()
        )));
    }
    if y.iter().any(|v| !v.is_finite()) || x.iter().any(|v| !v.is_finite()) {
        return Err(LearnerError::InvalidInput("non-finite training data".into()));
    }
    let model = match spec.kind {
        LearnerKind::Ols => fit_ols(x, y, spec.ridge_fallback),
        LearnerKind::Ridge => fit_ridge(x, y, spec.ridge_penalty),
        LearnerKind::Knn => fit_knn(x, y, spec.neighbors),
        LearnerKind::Tree => {
            let mut rng = rng_from_seed(tree_seed(spec.seed, 0));
            let rows: Vec<usize> = (0..n).collect();
            Model::Trees(vec![grow_tree(x, y, &rows, spec, &mut rng)])
        }
        LearnerKind::BaggedTrees => {
            let trees = (0..spec.n_trees)
                .map(|t| {
                    let mut rng = rng_from_seed(tree_seed(spec.seed, t as u64));
                    let rows: Vec<usize> = if spec.bootstrap {
                        let mut r: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
                        r.sort_unstable();
                        r
                    } else {
                        (0..n).collect()
                    };
                    grow_tree(x, y, &rows, spec, &mut rng)
                })
                .collect();
            Model::Trees(trees)
        }
    };
    Ok(FittedModel {
        model,
        dim: p,
        n_train: n,
    })
}

fn tree_seed(seed: u64, t: u64) -> u64 {
    derive_seed(seed, t)
}

pub fn predict(model: &FittedModel, x: &RealMatrix) -> Result<Vec<f64>> {
    predict_dense(model, x.as_dmatrix())
}

pub(crate) fn predict_dense(model: &FittedModel, x: &DMatrix<f64>) -> Result<Vec<f64>> {
    if x.ncols() != model.dim {
        return Err(LearnerError::DimensionMismatch {
            expected: model.dim,
            got: x.ncols(),
        });
    }
    let n = x.nrows();
    let out = match &model.model {
        Model::Linear { intercept, coef } => {
            if model.dim == 0 {
                vec![*intercept; n]
            } else {
                let fitted = x * coef;
                fitted.iter().map(|v| v + intercept).collect()
            }
        }
        Model::Knn { scale, x: train, y, k } => (0..n)
            .map(|i| {
                let row: Vec<f64> = (0..model.dim).map(|j| x[(i, j)]).collect();
                knn_predict(scale, train, y, *k, &row)
            })
            .collect(),
        Model::Trees(trees) => (0..n)
            .map(|i| {
                let row: Vec<f64> = (0..model.dim).map(|j| x[(i, j)]).collect();
                trees.iter().map(|t| t.predict(&row)).sum::<f64>() / trees.len() as f64
            })
            .collect(),
    };
    Ok(out)
}

fn center(x: &DMatrix<f64>, y: &[f64]) -> (DMatrix<f64>, DVector<f64>, DVector<f64>, f64) {
    let n = x.nrows() as f64;
    let x_mean = DVector::from_iterator(x.ncols(), x.column_iter().map(|c| c.sum() / n));
    let y_mean = y.iter().sum::<f64>() / n;
    let mut xc = x.clone();
    for (j, mut col) in xc.column_iter_mut().enumerate() {
        col.add_scalar_mut(-x_mean[j]);
    }
    let yc = DVector::from_iterator(y.len(), y.iter().map(|v| v - y_mean));
    (xc, yc, x_mean, y_mean)
}

fn linear_from(coef: DVector<f64>, x_mean: &DVector<f64>, y_mean: f64) -> Model {
    let intercept = y_mean - coef.dot(x_mean);
    Model::Linear { intercept, coef }
}

fn fit_ols(x: &DMatrix<f64>, y: &[f64], ridge_fallback: bool) -> Model {
    let (n, p) = x.shape();
    let (xc, yc, x_mean, y_mean) = center(x, y);
    if p == 0 {
        return Model::Linear {
            intercept: y_mean,
            coef: DVector::zeros(0),
        };
    }
    let gram = xc.transpose() * &xc;
    let deficient = n < p + 1 || rank_dense(&xc, 0.0) < p;
    if n < p + 1 || (deficient && ridge_fallback) {
        let penalty = 1e-8 * gram.trace() / p as f64;
        return ridge_solve(&xc, &yc, &x_mean, y_mean, penalty.max(f64::MIN_POSITIVE));
    }
    let coef = pinv_dense(&xc, 0.0) * &yc;
    linear_from(coef, &x_mean, y_mean)
}

fn fit_ridge(x: &DMatrix<f64>, y: &[f64], penalty: f64) -> Model {
    let (xc, yc, x_mean, y_mean) = center(x, y);
    if x.ncols() == 0 {
        return Model::Linear {
            intercept: y_mean,
            coef: DVector::zeros(0),
        };
    }
    ridge_solve(&xc, &yc, &x_mean, y_mean, penalty)
}

fn ridge_solve(xc: &DMatrix<f64>, yc: &DVector<f64>, x_mean: &DVector<f64>, y_mean: f64, penalty: f64) -> Model {
    let p = xc.ncols();
    let mut gram = xc.transpose() * xc;
    for j in 0..p {
        gram[(j, j)] += penalty;
    }
    let rhs = xc.transpose() * yc;
    let coef = solve_spd(&gram, &rhs);
    linear_from(coef, x_mean, y_mean)
}

fn fit_knn(x: &DMatrix<f64>, y: &[f64], k: usize) -> Model {
    let (n, p) = x.shape();
    // Distances use covariates scaled by their training standard deviation.
    let scale: Vec<f64> = (0..p)
        .map(|j| {
            let col = x.column(j);
            let m = col.sum() / n as f64;
            let v = col.iter().map(|c| (c - m).powi(2)).sum::<f64>() / n as f64;
            if v > 0.0 {
                1.0 / v.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let rows = (0..n)
        .map(|i| (0..p).map(|j| x[(i, j)] * scale[j]).collect())
        .collect();
    Model::Knn {
        scale,
        x: rows,
        y: y.to_vec(),
        k: k.min(n),
    }
}

fn knn_predict(scale: &[f64], train: &[Vec<f64>], y: &[f64], k: usize, row: &[f64]) -> f64 {
    let q: Vec<f64> = row.iter().zip(scale).map(|(v, s)| v * s).collect();
    let mut dist: Vec<(f64, usize)> = train
        .iter()
        .enumerate()
        .map(|(i, t)| (t.iter().zip(&q).map(|(a, b)| (a - b).powi(2)).sum::<f64>(), i))
        .collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < dist.len() {
        dist.select_nth_unstable_by(k - 1, cmp);
    }
    let mut nearest: Vec<usize> = dist[..k].iter().map(|d| d.1).collect();
    nearest.sort_unstable();
    nearest.iter().map(|&i| y[i]).sum::<f64>() / k as f64
}

fn grow_tree(x: &DMatrix<f64>, y: &[f64], rows: &[usize], spec: &LearnerSpec, rng: &mut SimRng) -> Node {
    grow(x, y, rows.to_vec(), spec, 0, rng)
}

fn mean_of(y: &[f64], rows: &[usize]) -> f64 {
    rows.iter().map(|&i| y[i]).sum::<f64>() / rows.len() as f64
}

fn grow(x: &DMatrix<f64>, y: &[f64], rows: Vec<usize>, spec: &LearnerSpec, depth: usize, rng: &mut SimRng) -> Node {
    let leaf = Node::Leaf(mean_of(y, &rows));
    let m = rows.len();
    if depth >= spec.max_depth || m < 2 * spec.min_leaf {
        return leaf;
    }
    let p = x.ncols();
    let features: Vec<usize> = match spec.feature_fraction {
        Some(frac) if p > 1 => {
            let take = ((frac * p as f64).ceil() as usize).clamp(1, p);
            let mut f = sample(rng, p, take).into_vec();
            f.sort_unstable();
            f
        }
        _ => (0..p).collect(),
    };
    let total: f64 = rows.iter().map(|&i| y[i]).sum();
    let base = total * total / m as f64;
    let mut best: Option<(f64, usize, f64)> = None;
    let mut order: Vec<(f64, f64)> = Vec::with_capacity(m);
    for &j in &features {
        order.clear();
        order.extend(rows.iter().map(|&i| (x[(i, j)], y[i])));
        order.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut left_sum = 0.0;
        for s in 0..m - 1 {
            left_sum += order[s].1;
            let nl = s + 1;
            if nl < spec.min_leaf || m - nl < spec.min_leaf || order[s].0 == order[s + 1].0 {
                continue;
            }
            let right_sum = total - left_sum;
            let gain = left_sum * left_sum / nl as f64 + right_sum * right_sum / (m - nl) as f64 - base;
            if gain > 1e-12 * (1.0 + base.abs()) && best.is_none_or(|(g, _, _)| gain > g) {
                best = Some((gain, j, 0.5 * (order[s].0 + order[s + 1].0)));
            }
        }
    }
    let Some((_, feature, threshold)) = best else {
        return leaf;
    };
    let (left, right): (Vec<usize>, Vec<usize>) = rows.into_iter().partition(|&i| x[(i, feature)] <= threshold);
    Node::Split {
        feature,
        threshold,
        left: Box::new(grow(x, y, left, spec, depth + 1, rng)),
        right: Box::new(grow(x, y, right, spec, depth + 1, rng)),
    }
}
