//! Degree-of-freedom adjusted variance components and normal confidence
//! intervals.
//!
//! Total variance is `var_h + var_y - var_explained`; the standard error of
//! an estimate from n units is `sqrt(total / n)`.

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::calibration::ConstraintSystem;
use crate::error::{Error, Result};
use crate::matrixkit::{pinv_dense, rank_dense};
use crate::proxy::{ensure_aligned, ProxyMatrix, StratumStats, Trial};

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceComponents {
    /// Between-stratum effect heterogeneity.
    pub var_h: f64,
    /// Within-stratum outcome variance term.
    pub var_y: f64,
    /// Reduction explained by the proxy.
    pub var_explained: f64,
    /// Rank estimate per stratum.
    pub ranks: Vec<usize>,
    /// n[k] / (n[k] - rank[k] - 1) per stratum.
    pub df_factors: Vec<f64>,
}

impl VarianceComponents {
    pub fn total(&self) -> f64 {
        self.var_h + self.var_y - self.var_explained
    }
}

fn df_factor(trial: &Trial, s: usize, n: usize, rank: usize) -> Result<f64> {
    if n <= rank + 1 {
        return Err(Error::InsufficientDf {
            stratum: trial.stratum_names()[s].clone(),
            n,
            rank,
        });
    }
    Ok(n as f64 / (n - rank - 1) as f64)
}

/// Outcome and heterogeneity terms for given per-stratum df factors.
fn outcome_terms(trial: &Trial, stats: &[StratumStats], df: &[f64]) -> (f64, f64) {
    let k = stats.len();
    let mut ss1 = vec![0.0; k];
    let mut ss0 = vec![0.0; k];
    let (mut sum1, mut sum0, mut n1, mut n0) = (0.0, 0.0, 0usize, 0usize);
    for i in 0..trial.n() {
        let s = trial.strata()[i];
        let y = trial.y()[i];
        if trial.a()[i] == 1 {
            ss1[s] += (y - stats[s].ybar1).powi(2);
            sum1 += y;
            n1 += 1;
        } else {
            ss0[s] += (y - stats[s].ybar0).powi(2);
            sum0 += y;
            n0 += 1;
        }
    }
    let overall = sum1 / n1 as f64 - sum0 / n0 as f64;
    let mut var_y = 0.0;
    let mut var_h = 0.0;
    for (s, st) in stats.iter().enumerate() {
        var_y += df[s]
            * (st.p / (1.0 - st.pi) * ss0[s] / st.n0 as f64 + st.p / st.pi * ss1[s] / st.n1 as f64);
        var_h += df[s] * st.p * (st.ybar1 - st.ybar0 - overall).powi(2);
    }
    (var_h, var_y)
}

/// Components for the stratified difference in means (no proxy, rank 0).
pub fn variance_components_sdim(trial: &Trial) -> Result<VarianceComponents> {
    let stats = trial.stratum_stats()?;
    let df = stats
        .iter()
        .enumerate()
        .map(|(s, st)| df_factor(trial, s, st.n, 0))
        .collect::<Result<Vec<_>>>()?;
    let (var_h, var_y) = outcome_terms(trial, &stats, &df);
    Ok(VarianceComponents {
        var_h,
        var_y,
        var_explained: 0.0,
        ranks: vec![0; stats.len()],
        df_factors: df,
    })
}

/// Components for a calibration estimate with proxy `proxy` and its
/// constraint system `cs`. The rank of Σ̂[k] and the quadratic form
/// Γ̂ᵀΣ̂⁺Γ̂ are computed from the square-root factor of Σ̂[k], i.e. the
/// stratum's constraint rows scaled by n^{-1/2}.
pub fn variance_components(trial: &Trial, proxy: &ProxyMatrix, cs: &ConstraintSystem) -> Result<VarianceComponents> {
    variance_components_with(trial, proxy, cs, None)
}

/// As [`variance_components`], optionally forcing every df factor to a
/// fixed value.
pub fn variance_components_with(
    trial: &Trial,
    proxy: &ProxyMatrix,
    cs: &ConstraintSystem,
    fixed_df: Option<f64>,
) -> Result<VarianceComponents> {
    ensure_aligned(proxy, trial)?;
    if cs.n() != trial.n() || cs.d() != proxy.d() || cs.k() != trial.k() {
        return Err(Error::InvalidInput("constraint system does not match trial and proxy".into()));
    }
    let stats = trial.stratum_stats()?;
    let (n, d, k) = (trial.n(), proxy.d(), trial.k());
    let scale = 1.0 / (n as f64).sqrt();
    let xi = proxy.values();
    let members = trial.stratum_members();
    let mut ranks = Vec::with_capacity(k);
    let mut forms = Vec::with_capacity(k);
    for (s, rows) in members.iter().enumerate() {
        let st = &stats[s];
        let factor = cs.own_blocks().select_rows(rows) * scale;
        let rank = rank_dense(&factor, 0.0).min(d);
        let mut gamma = DVector::<f64>::zeros(d);
        for &i in rows {
            let y = trial.y()[i];
            let c = if trial.a()[i] == 1 {
                (1.0 - st.pi) / st.pi * (y - st.ybar1)
            } else {
                st.pi / (1.0 - st.pi) * (y - st.ybar0)
            };
            for j in 0..d {
                gamma[j] += c * (xi[(i, j)] - cs.xi_bar[(s, j)]);
            }
        }
        gamma /= n as f64;
        let form = if rank == 0 {
            0.0
        } else {
            let pinv: DMatrix<f64> = pinv_dense(&factor, 0.0);
            (pinv.transpose() * gamma).norm_squared()
        };
        ranks.push(rank);
        forms.push(form);
    }
    let df = match fixed_df {
        Some(v) => vec![v; k],
        None => (0..k)
            .map(|s| df_factor(trial, s, stats[s].n, ranks[s]))
            .collect::<Result<Vec<_>>>()?,
    };
    let (var_h, var_y) = outcome_terms(trial, &stats, &df);
    let var_explained = forms.iter().zip(&df).map(|(f, w)| f * w).sum();
    Ok(VarianceComponents {
        var_h,
        var_y,
        var_explained,
        ranks,
        df_factors: df,
    })
}

/// Two-sided standard normal critical value z_{(1+level)/2}.
pub fn normal_critical_value(level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidSpec(format!("confidence level must be in (0,1), got {level}")));
    }
    let normal = Normal::standard();
    Ok(normal.inverse_cdf(0.5 * (1.0 + level)))
}

/// Returns `(low, high, se)`.
pub fn confidence_interval(tau_hat: f64, vc: &VarianceComponents, n: usize, level: f64) -> Result<(f64, f64, f64)> {
    let total = vc.total();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::NonPositiveVariance {
            var_h: vc.var_h,
            var_y: vc.var_y,
            var_explained: vc.var_explained,
        });
    }
    if n == 0 {
        return Err(Error::InvalidInput("n must be positive".into()));
    }
    let se = (total / n as f64).sqrt();
    let z = normal_critical_value(level)?;
    Ok((tau_hat - z * se, tau_hat + z * se, se))
}
