//! Information-proxy construction: within-stratum and cross-stratum learner
//! fits, raw and power-transformed covariates, external-data fits, column
//! stacking, and the cell-respecting split used for cross-fitting.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::learners::{fit_dense, predict_dense, LearnerSpec};
use crate::rng::{derive_seed, rng_from_seed};
pub use crate::trial::{StratumStats, Trial};

/// Where a proxy column came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ColumnSource {
    Raw,
    Power,
    Within,
    Cross,
    External,
    Custom,
}

/// An n×d matrix of proxy values with per-column labels and provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxyMatrix {
    values: DMatrix<f64>,
    labels: Vec<String>,
    sources: Vec<ColumnSource>,
    builder: String,
    warnings: Vec<String>,
}

impl ProxyMatrix {
    pub fn new(values: DMatrix<f64>, labels: Vec<String>, builder: impl Into<String>) -> Result<Self> {
        let d = values.ncols();
        Self::with_sources(values, labels, vec![ColumnSource::Custom; d], builder)
    }

    pub fn with_sources(
        values: DMatrix<f64>,
        labels: Vec<String>,
        sources: Vec<ColumnSource>,
        builder: impl Into<String>,
    ) -> Result<Self> {
        if values.ncols() == 0 || values.nrows() == 0 {
            return Err(Error::InvalidInput("proxy must have at least one row and column".into()));
        }
        if labels.len() != values.ncols() || sources.len() != values.ncols() {
            return Err(Error::InvalidInput("proxy label count does not match columns".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("proxy contains non-finite values".into()));
        }
        Ok(Self {
            values,
            labels,
            sources,
            builder: builder.into(),
            warnings: Vec::new(),
        })
    }

    /// Builds a proxy from column vectors with generated labels.
    pub fn from_columns(columns: &[Vec<f64>], builder: impl Into<String>) -> Result<Self> {
        let n = columns.first().map_or(0, Vec::len);
        if columns.iter().any(|c| c.len() != n) {
            return Err(Error::InvalidInput("ragged proxy columns".into()));
        }
        let values = DMatrix::from_fn(n, columns.len(), |i, j| columns[j][i]);
        let labels = (1..=columns.len()).map(|j| format!("xi{j}")).collect();
        Self::new(values, labels, builder)
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn d(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn sources(&self) -> &[ColumnSource] {
        &self.sources
    }

    pub fn builder(&self) -> &str {
        &self.builder
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.values.column(j).iter().copied().collect()
    }

    /// Rows restricted to `idx`, in order.
    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        if idx.is_empty() || idx.iter().any(|&i| i >= self.n()) {
            return Err(Error::InvalidInput("bad proxy subset".into()));
        }
        Ok(Self {
            values: self.values.select_rows(idx),
            labels: self.labels.clone(),
            sources: self.sources.clone(),
            builder: self.builder.clone(),
            warnings: self.warnings.clone(),
        })
    }

    /// Applies ξ ↦ Qξ + q row-wise (Q is d'×d, q has length d').
    pub fn affine(&self, q_mat: &DMatrix<f64>, shift: &[f64]) -> Result<Self> {
        if q_mat.ncols() != self.d() || shift.len() != q_mat.nrows() {
            return Err(Error::InvalidInput("affine map dimension mismatch".into()));
        }
        let mut values = &self.values * q_mat.transpose();
        for (j, mut col) in values.column_iter_mut().enumerate() {
            col.add_scalar_mut(shift[j]);
        }
        let d = values.ncols();
        Self::new(values, (1..=d).map(|j| format!("affine{j}")).collect(), "affine")
    }

    fn check_aligned(&self, trial: &Trial) -> Result<()> {
        if self.n() != trial.n() {
            return Err(Error::InvalidInput(format!(
                "proxy has {} rows but trial has {} units",
                self.n(),
                trial.n()
            )));
        }
        Ok(())
    }
}

pub(crate) fn ensure_aligned(proxy: &ProxyMatrix, trial: &Trial) -> Result<()> {
    proxy.check_aligned(trial)
}

fn check_compatible(train: &Trial, eval: &Trial) -> Result<()> {
    if train.k() != eval.k() || train.p() != eval.p() {
        return Err(Error::InvalidInput(format!(
            "training trial (K={}, p={}) and evaluation trial (K={}, p={}) differ",
            train.k(),
            train.p(),
            eval.k(),
            eval.p()
        )));
    }
    Ok(())
}

fn require_both_arms(trial: &Trial) -> Result<()> {
    trial.stratum_stats().map(|_| ())
}

/// Fits one learner per (stratum, arm) cell of `train`. Cells smaller than
/// the learner's minimum size use the pooled fit of that arm.
fn cell_fits(
    train: &Trial,
    spec: &LearnerSpec,
    warnings: &mut Vec<String>,
) -> Result<Vec<[crate::learners::FittedModel; 2]>> {
    require_both_arms(train)?;
    let p = train.p();
    let min = spec.min_train_size(p);
    let mut pooled: [Option<crate::learners::FittedModel>; 2] = [None, None];
    let mut out = Vec::with_capacity(train.k());
    for k in 0..train.k() {
        let mut pair = Vec::with_capacity(2);
        for arm in [1u8, 0u8] {
            let idx = train.cell(k, arm);
            let cell_spec = spec.with_seed(derive_seed(spec.seed, 2 * k as u64 + u64::from(arm)));
            let model = if idx.len() >= min {
                let y: Vec<f64> = idx.iter().map(|&i| train.y()[i]).collect();
                fit_dense(&cell_spec, &train.x().select_rows(&idx), &y)?
            } else {
                warnings.push(format!(
                    "stratum '{}' arm {arm}: {} units below learner minimum {min}; using pooled fit",
                    train.stratum_names()[k],
                    idx.len()
                ));
                let slot = &mut pooled[usize::from(arm)];
                if slot.is_none() {
                    let all: Vec<usize> = (0..train.n()).filter(|&i| train.a()[i] == arm).collect();
                    let y: Vec<f64> = all.iter().map(|&i| train.y()[i]).collect();
                    let pooled_spec = spec.with_seed(derive_seed(spec.seed, u64::MAX - u64::from(arm)));
                    *slot = Some(fit_dense(&pooled_spec, &train.x().select_rows(&all), &y)?);
                }
                slot.clone().expect("pooled fit present")
            };
            pair.push(model);
        }
        let h0 = pair.pop().expect("control fit");
        let h1 = pair.pop().expect("treated fit");
        out.push([h1, h0]);
    }
    Ok(out)
}

/// Two columns: the treated and control fits of each unit's own stratum,
/// each trained on that stratum-arm cell only.
pub fn within_stratum_proxy(trial: &Trial, spec: &LearnerSpec) -> Result<ProxyMatrix> {
    within_stratum_proxy_at(trial, trial, spec)
}

/// As [`within_stratum_proxy`], fitting on `train` and evaluating on `eval`.
pub fn within_stratum_proxy_at(train: &Trial, eval: &Trial, spec: &LearnerSpec) -> Result<ProxyMatrix> {
    check_compatible(train, eval)?;
    let mut warnings = Vec::new();
    let fits = cell_fits(train, spec, &mut warnings)?;
    let mut values = DMatrix::zeros(eval.n(), 2);
    for (k, members) in eval.stratum_members().iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        let xk = eval.x().select_rows(members);
        for (col, model) in fits[k].iter().enumerate() {
            let pred = predict_dense(model, &xk)?;
            for (&i, v) in members.iter().zip(pred) {
                values[(i, col)] = v;
            }
        }
    }
    let mut pm = ProxyMatrix::with_sources(
        values,
        vec![format!("within:{spec}:h1"), format!("within:{spec}:h0")],
        vec![ColumnSource::Within; 2],
        format!("within:{spec}"),
    )?;
    pm.warnings = warnings;
    Ok(pm)
}

/// 2K columns: every stratum's treated and control fits evaluated at every
/// unit, ordered (h1[1], h0[1], h1[2], h0[2], ...).
pub fn cross_stratum_proxy(trial: &Trial, spec: &LearnerSpec) -> Result<ProxyMatrix> {
    cross_stratum_proxy_at(trial, trial, spec)
}

pub fn cross_stratum_proxy_at(train: &Trial, eval: &Trial, spec: &LearnerSpec) -> Result<ProxyMatrix> {
    check_compatible(train, eval)?;
    let mut warnings = Vec::new();
    let fits = cell_fits(train, spec, &mut warnings)?;
    let k = train.k();
    let mut values = DMatrix::zeros(eval.n(), 2 * k);
    let mut labels = Vec::with_capacity(2 * k);
    for (s, pair) in fits.iter().enumerate() {
        for (a, model) in pair.iter().enumerate() {
            let pred = predict_dense(model, eval.x())?;
            values.set_column(2 * s + a, &nalgebra::DVector::from_vec(pred));
            let arm = if a == 0 { "h1" } else { "h0" };
            labels.push(format!("cross:{spec}:{arm}[{}]", train.stratum_names()[s]));
        }
    }
    let mut pm = ProxyMatrix::with_sources(
        values,
        labels,
        vec![ColumnSource::Cross; 2 * k],
        format!("cross:{spec}"),
    )?;
    pm.warnings = warnings;
    Ok(pm)
}

/// Column-wise concatenation preserving order, labels and provenance.
pub fn stack_proxies(parts: &[ProxyMatrix]) -> Result<ProxyMatrix> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidInput("nothing to stack".into()))?;
    if parts.len() == 1 {
        return Ok(first.clone());
    }
    let n = first.n();
    if let Some(bad) = parts.iter().find(|p| p.n() != n) {
        return Err(Error::InvalidInput(format!(
            "cannot stack proxies with {} and {} rows",
            n,
            bad.n()
        )));
    }
    let d: usize = parts.iter().map(ProxyMatrix::d).sum();
    let mut values = DMatrix::zeros(n, d);
    let mut labels = Vec::with_capacity(d);
    let mut sources = Vec::with_capacity(d);
    let mut warnings = Vec::new();
    let mut offset = 0;
    for part in parts {
        values.columns_mut(offset, part.d()).copy_from(&part.values);
        offset += part.d();
        labels.extend(part.labels.iter().cloned());
        sources.extend(part.sources.iter().cloned());
        warnings.extend(part.warnings.iter().cloned());
    }
    let builder = parts.iter().map(|p| p.builder.as_str()).collect::<Vec<_>>().join(" + ");
    let mut pm = ProxyMatrix::with_sources(values, labels, sources, builder)?;
    pm.warnings = warnings;
    Ok(pm)
}

/// Column `(x[index] + shift)^exponent`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerTransform {
    pub index: usize,
    pub exponent: f64,
    pub shift: f64,
}

/// Selected raw covariate columns followed by power-transformed columns.
pub fn raw_covariate_proxy(trial: &Trial, columns: &[usize], transforms: &[PowerTransform]) -> Result<ProxyMatrix> {
    let p = trial.p();
    let names = trial.covariate_names();
    let n = trial.n();
    let d = columns.len() + transforms.len();
    if d == 0 {
        return Err(Error::InvalidInput("no raw columns or transforms requested".into()));
    }
    let mut values = DMatrix::zeros(n, d);
    let mut labels = Vec::with_capacity(d);
    let mut sources = Vec::with_capacity(d);
    for (c, &j) in columns.iter().enumerate() {
        if j >= p {
            return Err(Error::InvalidInput(format!("covariate index {j} out of range (p = {p})")));
        }
        values.set_column(c, &trial.x().column(j));
        labels.push(format!("raw:{}", names[j]));
        sources.push(ColumnSource::Raw);
    }
    for (t, tr) in transforms.iter().enumerate() {
        if tr.index >= p {
            return Err(Error::InvalidInput(format!(
                "covariate index {} out of range (p = {p})",
                tr.index
            )));
        }
        let integral = tr.exponent.fract() == 0.0;
        for i in 0..n {
            let base = trial.x()[(i, tr.index)] + tr.shift;
            if !integral && base <= 0.0 {
                return Err(Error::InvalidInput(format!(
                    "non-positive base {base} at row {} for fractional exponent {}",
                    i + 1,
                    tr.exponent
                )));
            }
            let v = base.powf(tr.exponent);
            if !v.is_finite() {
                return Err(Error::InvalidInput(format!("power transform overflow at row {}", i + 1)));
            }
            values[(i, columns.len() + t)] = v;
        }
        labels.push(format!("pow:({}+{})^{}", names[tr.index], tr.shift, tr.exponent));
        sources.push(ColumnSource::Power);
    }
    ProxyMatrix::with_sources(values, labels, sources, "raw")
}

/// One column: a pooled, arm-agnostic fit on external data evaluated at
/// every trial unit. `columns` selects the trial covariates matching the
/// external design; `None` uses all of them.
pub fn external_proxy(
    trial: &Trial,
    external_x: &DMatrix<f64>,
    external_y: &[f64],
    spec: &LearnerSpec,
    columns: Option<&[usize]>,
) -> Result<ProxyMatrix> {
    if external_x.nrows() == 0 || external_y.is_empty() {
        return Err(Error::InvalidInput("external data is empty".into()));
    }
    let eval = match columns {
        Some(cols) => {
            if let Some(&bad) = cols.iter().find(|&&j| j >= trial.p()) {
                return Err(Error::InvalidInput(format!("covariate index {bad} out of range")));
            }
            trial.x().select_columns(cols)
        }
        None => trial.x().clone(),
    };
    if eval.ncols() != external_x.ncols() {
        return Err(Error::InvalidInput(format!(
            "external data has {} covariates, trial selection has {}",
            external_x.ncols(),
            eval.ncols()
        )));
    }
    let model = fit_dense(spec, external_x, external_y)?;
    let pred = predict_dense(&model, &eval)?;
    ProxyMatrix::with_sources(
        DMatrix::from_vec(trial.n(), 1, pred),
        vec![format!("external:{spec}")],
        vec![ColumnSource::External],
        format!("external:{spec}"),
    )
}

/// Fold ids in `0..folds`. Each (stratum, arm) cell is shuffled and dealt
/// round-robin from a random starting fold, so cell sizes per fold differ
/// by at most one.
pub fn cross_fit_split(trial: &Trial, folds: usize, seed: u64) -> Result<Vec<usize>> {
    if folds < 2 {
        return Err(Error::InvalidSpec("at least two folds required".into()));
    }
    let mut rng = rng_from_seed(seed);
    let mut fold = vec![usize::MAX; trial.n()];
    for k in 0..trial.k() {
        for arm in [0u8, 1u8] {
            let mut cell = trial.cell(k, arm);
            if cell.len() < folds {
                return Err(Error::DegenerateStratum {
                    stratum: trial.stratum_names()[k].clone(),
                    detail: format!("arm {arm} has {} units, fewer than {folds} folds", cell.len()),
                });
            }
            cell.shuffle(&mut rng);
            let start = rng.random_range(0..folds);
            for (j, &i) in cell.iter().enumerate() {
                fold[i] = (start + j) % folds;
            }
        }
    }
    Ok(fold)
}
