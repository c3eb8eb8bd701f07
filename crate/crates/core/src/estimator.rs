//! Point estimators: stratified difference in means, the calibration
//! estimator, its two-fold cross-fitted version, and an AIPW baseline.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::calibration::{build_constraints, calibrate, CalibrationResult, Discrepancy};
use crate::error::{Error, Result};
use crate::inference::{confidence_interval, variance_components, variance_components_sdim, VarianceComponents};
use crate::proxy::{cross_fit_split, ColumnSource, ProxyMatrix, Trial};

/// Solver diagnostics attached to a report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolverDiagnostics {
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
    pub all_weights_positive: bool,
    pub min_weight: f64,
}

impl SolverDiagnostics {
    fn none() -> Self {
        Self {
            iterations: 0,
            residual: 0.0,
            converged: true,
            all_weights_positive: true,
            min_weight: 1.0,
        }
    }

    fn from_result(r: &CalibrationResult) -> Self {
        Self {
            iterations: r.iterations,
            residual: r.constraint_residual,
            converged: r.converged,
            all_weights_positive: r.all_weights_positive(),
            min_weight: r.min_weight(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AteReport {
    pub method: String,
    pub tau_hat: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub var_h: f64,
    pub var_y: f64,
    pub var_explained: f64,
    pub n: usize,
    pub k: usize,
    pub d: usize,
    pub diagnostics: SolverDiagnostics,
    pub proxy_labels: Vec<String>,
    /// Per proxy column: whether it came from external data.
    pub external_columns: Vec<bool>,
    pub warnings: Vec<String>,
}

impl AteReport {
    pub fn covers(&self, tau: f64) -> bool {
        self.ci_low <= tau && tau <= self.ci_high
    }
}

/// Σ_k p[k] (Ȳ1[k] - Ȳ0[k]).
pub fn sdim(trial: &Trial) -> Result<f64> {
    let stats = trial.stratum_stats()?;
    Ok(stats.iter().map(|s| s.p * (s.ybar1 - s.ybar0)).sum())
}

/// Stratum-centered, inverse-share weighted outcome contrasts r_i.
pub fn residuals(trial: &Trial) -> Result<Vec<f64>> {
    let stats = trial.stratum_stats()?;
    Ok((0..trial.n())
        .map(|i| {
            let st = &stats[trial.strata()[i]];
            let y = trial.y()[i];
            if trial.a()[i] == 1 {
                (y - st.ybar1) / st.pi
            } else {
                -(y - st.ybar0) / (1.0 - st.pi)
            }
        })
        .collect())
}

fn report(
    method: &str,
    trial: &Trial,
    tau_hat: f64,
    vc: &VarianceComponents,
    level: f64,
    d: usize,
    diagnostics: SolverDiagnostics,
    proxy: Option<&ProxyMatrix>,
    warnings: Vec<String>,
) -> Result<AteReport> {
    let (ci_low, ci_high, se) = confidence_interval(tau_hat, vc, trial.n(), level)?;
    Ok(AteReport {
        method: method.to_string(),
        tau_hat,
        se,
        ci_low,
        ci_high,
        var_h: vc.var_h,
        var_y: vc.var_y,
        var_explained: vc.var_explained,
        n: trial.n(),
        k: trial.k(),
        d,
        diagnostics,
        proxy_labels: proxy.map_or_else(Vec::new, |p| p.labels().to_vec()),
        external_columns: proxy.map_or_else(Vec::new, |p| {
            p.sources().iter().map(|s| *s == ColumnSource::External).collect()
        }),
        warnings,
    })
}

/// τ̂_sdim with its df-adjusted standard error.
pub fn sdim_ate(trial: &Trial, level: f64) -> Result<AteReport> {
    let tau = sdim(trial)?;
    let vc = variance_components_sdim(trial)?;
    report("sdim", trial, tau, &vc, level, 0, SolverDiagnostics::none(), None, Vec::new())
}

/// Calibration estimate together with the solver result.
pub fn calibrate_ate_detailed(
    trial: &Trial,
    proxy: &ProxyMatrix,
    disc: Discrepancy,
    level: f64,
) -> Result<(AteReport, CalibrationResult)> {
    let cs = build_constraints(trial, proxy)?;
    let cal = calibrate(&cs, disc)?;
    let r = residuals(trial)?;
    // Σ r_i = 0, so this equals τ̂_sdim + (1/n) Σ ŵ_i r_i and is exact
    // when every weight is one.
    let correction = cal.weights.iter().zip(&r).map(|(w, ri)| (w - 1.0) * ri).sum::<f64>() / trial.n() as f64;
    let tau = sdim(trial)? + correction;
    let vc = variance_components(trial, proxy, &cs)?;
    let mut warnings = proxy.warnings().to_vec();
    warnings.extend(cs.warnings.iter().cloned());
    let rep = report(
        "cal",
        trial,
        tau,
        &vc,
        level,
        proxy.d(),
        SolverDiagnostics::from_result(&cal),
        Some(proxy),
        warnings,
    )?;
    Ok((rep, cal))
}

pub fn calibrate_ate(trial: &Trial, proxy: &ProxyMatrix, disc: Discrepancy, level: f64) -> Result<AteReport> {
    calibrate_ate_detailed(trial, proxy, disc, level).map(|(r, _)| r)
}

/// Two-fold cross-fitted calibration estimate. `proxy_builder(train, eval)`
/// must return a proxy for the units of `eval` using only `train`. Each
/// fold's estimate uses its own stratum shares, arm shares and arm means;
/// the variance is ¼(V₀/|I₀| + V₁/|I₁|).
pub fn cross_fit_ate<F>(trial: &Trial, proxy_builder: F, disc: Discrepancy, seed: u64, level: f64) -> Result<AteReport>
where
    F: Fn(&Trial, &Trial) -> Result<ProxyMatrix>,
{
    let folds = cross_fit_split(trial, 2, seed)?;
    let idx: [Vec<usize>; 2] = [0, 1].map(|f| (0..trial.n()).filter(|&i| folds[i] == f).collect());
    let parts = [trial.subset(&idx[0])?, trial.subset(&idx[1])?];
    let mut fold_reports = Vec::with_capacity(2);
    for f in 0..2 {
        let proxy = proxy_builder(&parts[1 - f], &parts[f])?;
        fold_reports.push(calibrate_ate(&parts[f], &proxy, disc, level)?);
    }
    let n = trial.n() as f64;
    let combine = |g: fn(&AteReport) -> f64| {
        0.25 * n * (g(&fold_reports[0]) / parts[0].n() as f64 + g(&fold_reports[1]) / parts[1].n() as f64)
    };
    let vc = VarianceComponents {
        var_h: combine(|r| r.var_h),
        var_y: combine(|r| r.var_y),
        var_explained: combine(|r| r.var_explained),
        ranks: Vec::new(),
        df_factors: Vec::new(),
    };
    let tau = 0.5 * (fold_reports[0].tau_hat + fold_reports[1].tau_hat);
    let diagnostics = SolverDiagnostics {
        iterations: fold_reports.iter().map(|r| r.diagnostics.iterations).max().unwrap_or(0),
        residual: fold_reports.iter().map(|r| r.diagnostics.residual).fold(0.0, f64::max),
        converged: fold_reports.iter().all(|r| r.diagnostics.converged),
        all_weights_positive: fold_reports.iter().all(|r| r.diagnostics.all_weights_positive),
        min_weight: fold_reports.iter().map(|r| r.diagnostics.min_weight).fold(f64::INFINITY, f64::min),
    };
    let warnings = fold_reports.iter().flat_map(|r| r.warnings.iter().cloned()).collect();
    let mut rep = report("cal-cf", trial, tau, &vc, level, fold_reports[0].d, diagnostics, None, warnings)?;
    rep.proxy_labels = fold_reports[0].proxy_labels.clone();
    rep.external_columns = fold_reports[0].external_columns.clone();
    Ok(rep)
}

/// Stratified AIPW with outcome fits `h1`, `h0`; its variance uses the
/// calibration components with proxy (h1, h0).
pub fn aipw_ate(trial: &Trial, h1: &[f64], h0: &[f64], level: f64) -> Result<AteReport> {
    let n = trial.n();
    if h1.len() != n || h0.len() != n {
        return Err(Error::InvalidInput("fitted values must have one entry per unit".into()));
    }
    if h1.iter().chain(h0).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite fitted values".into()));
    }
    let stats = trial.stratum_stats()?;
    let sum: f64 = (0..n)
        .map(|i| {
            let pi = stats[trial.strata()[i]].pi;
            let y = trial.y()[i];
            let aug = h1[i] - h0[i];
            if trial.a()[i] == 1 {
                (y - h1[i]) / pi + aug
            } else {
                -(y - h0[i]) / (1.0 - pi) + aug
            }
        })
        .sum();
    let tau = sum / n as f64;
    let values = DMatrix::from_fn(n, 2, |i, j| if j == 0 { h1[i] } else { h0[i] });
    let proxy = ProxyMatrix::new(values, vec!["h1".into(), "h0".into()], "aipw")?;
    let cs = build_constraints(trial, &proxy)?;
    let vc = variance_components(trial, &proxy, &cs)?;
    report("aipw", trial, tau, &vc, level, 2, SolverDiagnostics::none(), Some(&proxy), Vec::new())
}
