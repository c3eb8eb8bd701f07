//! Stratum-block balance constraints and the calibration weighting problem,
//! solved in closed form for the quadratic discrepancy and through the
//! concave dual for general discrepancies.
//!
//! Row `i` of the constraint matrix carries the block
//! `(A_i - π[k]) (ξ_i - ξ̄[k])` in the columns of its own stratum `k` and
//! zeros elsewhere. Because of that structure the Gram matrix is block
//! diagonal and the dual separates across strata; the solvers exploit this
//! but iterate on the full λ jointly.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrixkit::{pinv_dense, solve_spd};
use crate::proxy::{ensure_aligned, ProxyMatrix, Trial};

/// Dual transform ρ of a calibration discrepancy D.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Discrepancy {
    /// D(w) = (w - 1)^2 / 2, ρ(v) = -v^2/2 + v.
    Quadratic,
    /// D(w) = w log w - w, ρ(v) = -exp(-v).
    ExpTilting,
    /// D(w) = w - log w, ρ(v) = 1 + log(1 + v) on v > -1.
    EmpLikelihood,
}

impl Discrepancy {
    pub const ALL: [Discrepancy; 3] = [
        Discrepancy::Quadratic,
        Discrepancy::ExpTilting,
        Discrepancy::EmpLikelihood,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Discrepancy::Quadratic => "quadratic",
            Discrepancy::ExpTilting => "exp-tilting",
            Discrepancy::EmpLikelihood => "emp-likelihood",
        }
    }

    pub fn in_domain(&self, v: f64) -> bool {
        match self {
            Discrepancy::EmpLikelihood => v > -1.0 && v.is_finite(),
            _ => v.is_finite(),
        }
    }

    pub fn rho(&self, v: f64) -> f64 {
        match self {
            Discrepancy::Quadratic => -0.5 * v * v + v,
            Discrepancy::ExpTilting => -(-v).exp(),
            Discrepancy::EmpLikelihood => {
                if v > -1.0 {
                    1.0 + v.ln_1p()
                } else {
                    f64::NEG_INFINITY
                }
            }
        }
    }

    pub fn rho1(&self, v: f64) -> f64 {
        match self {
            Discrepancy::Quadratic => 1.0 - v,
            Discrepancy::ExpTilting => (-v).exp(),
            Discrepancy::EmpLikelihood => 1.0 / (1.0 + v),
        }
    }

    pub fn rho2(&self, v: f64) -> f64 {
        match self {
            Discrepancy::Quadratic => -1.0,
            Discrepancy::ExpTilting => -(-v).exp(),
            Discrepancy::EmpLikelihood => -1.0 / ((1.0 + v) * (1.0 + v)),
        }
    }
}

impl fmt::Display for Discrepancy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Discrepancy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "quadratic" | "chi2" | "ls" => Ok(Discrepancy::Quadratic),
            "exp-tilting" | "exponential-tilting" | "entropy" | "et" => Ok(Discrepancy::ExpTilting),
            "emp-likelihood" | "empirical-likelihood" | "el" => Ok(Discrepancy::EmpLikelihood),
            other => Err(Error::InvalidSpec(format!("unknown discrepancy '{other}'"))),
        }
    }
}

/// Block constraint matrix plus the stratum summaries it was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSystem {
    /// n × (K·d); block k occupies columns `k*d .. (k+1)*d`.
    pub xi_blocks: DMatrix<f64>,
    pub pi_nk: Vec<f64>,
    pub p_nk: Vec<f64>,
    /// K × d stratum means of the proxy.
    pub xi_bar: DMatrix<f64>,
    pub warnings: Vec<String>,
    strata: Vec<usize>,
    compact: DMatrix<f64>,
}

impl ConstraintSystem {
    pub fn n(&self) -> usize {
        self.compact.nrows()
    }

    pub fn k(&self) -> usize {
        self.pi_nk.len()
    }

    pub fn d(&self) -> usize {
        self.compact.ncols()
    }

    pub fn strata(&self) -> &[usize] {
        &self.strata
    }

    /// Row `i`'s own d-block, n × d.
    pub fn own_blocks(&self) -> &DMatrix<f64> {
        &self.compact
    }

    pub fn is_zero(&self) -> bool {
        self.compact.iter().all(|&v| v == 0.0)
    }

    /// λᵀΞ_i for every unit.
    pub fn linear_index(&self, lambda: &[f64]) -> Vec<f64> {
        let d = self.d();
        (0..self.n())
            .map(|i| {
                let off = self.strata[i] * d;
                (0..d).map(|j| lambda[off + j] * self.compact[(i, j)]).sum()
            })
            .collect()
    }

    /// (1/n) Σ_i w_i Ξ_i, length K·d.
    pub fn weighted_mean(&self, w: &[f64]) -> Vec<f64> {
        let d = self.d();
        let mut out = vec![0.0; self.k() * d];
        for i in 0..self.n() {
            let off = self.strata[i] * d;
            for j in 0..d {
                out[off + j] += w[i] * self.compact[(i, j)];
            }
        }
        let n = self.n() as f64;
        out.iter_mut().for_each(|v| *v /= n);
        out
    }

    pub fn residual(&self, w: &[f64]) -> f64 {
        max_abs(&self.weighted_mean(w))
    }

    fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.k()];
        for (i, &s) in self.strata.iter().enumerate() {
            out[s].push(i);
        }
        out
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

pub fn build_constraints(trial: &Trial, proxy: &ProxyMatrix) -> Result<ConstraintSystem> {
    ensure_aligned(proxy, trial)?;
    let stats = trial.stratum_stats()?;
    let (n, d, k) = (trial.n(), proxy.d(), trial.k());
    let xi = proxy.values();
    // Means are accumulated as deviations from each stratum's first unit,
    // so a column constant within a stratum centers to exact zeros.
    let members = trial.stratum_members();
    let mut xi_bar = DMatrix::zeros(k, d);
    for (s, rows) in members.iter().enumerate() {
        let first = rows[0];
        for j in 0..d {
            let base = xi[(first, j)];
            let dev: f64 = rows.iter().map(|&i| xi[(i, j)] - base).sum();
            xi_bar[(s, j)] = base + dev / stats[s].n as f64;
        }
    }
    let mut compact = DMatrix::zeros(n, d);
    let mut blocks = DMatrix::zeros(n, k * d);
    for i in 0..n {
        let s = trial.strata()[i];
        let c = f64::from(trial.a()[i]) - stats[s].pi;
        for j in 0..d {
            let v = c * (xi[(i, j)] - xi_bar[(s, j)]);
            compact[(i, j)] = v;
            blocks[(i, s * d + j)] = v;
        }
    }
    let warnings = stats
        .iter()
        .enumerate()
        .filter(|(_, st)| st.n < d + 2)
        .map(|(s, st)| {
            format!(
                "stratum '{}' has {} units, fewer than d + 2 = {}",
                trial.stratum_names()[s],
                st.n,
                d + 2
            )
        })
        .collect();
    Ok(ConstraintSystem {
        xi_blocks: blocks,
        pi_nk: stats.iter().map(|s| s.pi).collect(),
        p_nk: stats.iter().map(|s| s.p).collect(),
        xi_bar,
        warnings,
        strata: trial.strata().to_vec(),
        compact,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationResult {
    /// Length K·d, stratum-major.
    pub lambda: Vec<f64>,
    pub weights: Vec<f64>,
    /// Max-norm of (1/n) Σ ŵ_i Ξ_i.
    pub constraint_residual: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Dual objective (1/n) Σ ρ(λ̂ᵀΞ_i).
    pub objective: f64,
    /// Objective at λ = 0 and after every accepted step.
    pub objective_path: Vec<f64>,
    pub discrepancy: Discrepancy,
}

impl CalibrationResult {
    pub fn all_weights_positive(&self) -> bool {
        self.weights.iter().all(|&w| w > 0.0)
    }

    pub fn min_weight(&self) -> f64 {
        self.weights.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

fn dual_objective(disc: Discrepancy, v: &[f64]) -> f64 {
    v.iter().map(|&x| disc.rho(x)).sum::<f64>() / v.len() as f64
}

/// Minimum-norm closed form λ̂ = [(1/n)ΣΞΞᵀ]⁺ (1/n)ΣΞ, computed stratum by
/// stratum as the pseudoinverse of the block rows applied to the ones
/// vector (the same vector, without forming the Gram matrix).
pub fn solve_quadratic(cs: &ConstraintSystem) -> CalibrationResult {
    let d = cs.d();
    let mut lambda = vec![0.0; cs.k() * d];
    for (s, members) in cs.members().iter().enumerate() {
        let zk = cs.compact.select_rows(members);
        if zk.iter().all(|&v| v == 0.0) {
            continue;
        }
        let ones = DVector::from_element(members.len(), 1.0);
        let lk = pinv_dense(&zk, 0.0) * ones;
        lambda[s * d..(s + 1) * d].copy_from_slice(lk.as_slice());
    }
    let v = cs.linear_index(&lambda);
    let weights: Vec<f64> = v.iter().map(|x| 1.0 - x).collect();
    let objective = dual_objective(Discrepancy::Quadratic, &v);
    CalibrationResult {
        constraint_residual: cs.residual(&weights),
        lambda,
        weights,
        iterations: 0,
        converged: true,
        objective,
        objective_path: vec![0.5, objective],
        discrepancy: Discrepancy::Quadratic,
    }
}

/// Solver settings for [`solve_dual`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub armijo: f64,
    pub shrink: f64,
    pub hessian_ridge: f64,
    pub max_halvings: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 100,
            armijo: 1e-4,
            shrink: 0.5,
            hessian_ridge: 1e-10,
            max_halvings: 60,
        }
    }
}

/// Maximizes (1/n) Σ ρ(λᵀΞ_i) by damped Newton from λ = 0 and returns
/// ŵ_i = ρ'(λ̂ᵀΞ_i). Uses [`NewtonOptions::default`] with the given
/// tolerance and iteration cap.
pub fn solve_dual(cs: &ConstraintSystem, disc: Discrepancy, tol: f64, max_iter: usize) -> Result<CalibrationResult> {
    solve_dual_with(
        cs,
        disc,
        &NewtonOptions {
            tol,
            max_iter,
            ..NewtonOptions::default()
        },
    )
}

pub fn solve_dual_with(cs: &ConstraintSystem, disc: Discrepancy, opts: &NewtonOptions) -> Result<CalibrationResult> {
    if !(opts.tol > 0.0) {
        return Err(Error::InvalidSpec("tolerance must be positive".into()));
    }
    let (n, d, k) = (cs.n(), cs.d(), cs.k());
    let members = cs.members();
    let mut lambda = vec![0.0; k * d];
    let mut v = vec![0.0; n];
    let mut f = dual_objective(disc, &v);
    let mut path = vec![f];
    let gradient = |v: &[f64]| {
        let w: Vec<f64> = v.iter().map(|&x| disc.rho1(x)).collect();
        cs.weighted_mean(&w)
    };
    let mut g = gradient(&v);
    let mut iterations = 0;
    // One refinement step is taken after the gradient test first passes;
    // with the ridge-regularized Hessian it removes the O(ridge) offset.
    let mut refined = false;
    loop {
        let gnorm = max_abs(&g);
        if gnorm <= opts.tol {
            if refined || gnorm == 0.0 {
                break;
            }
            refined = true;
        } else if iterations >= opts.max_iter {
            return Err(Error::NonConvergence {
                iterations,
                residual: gnorm,
                lambda,
            });
        }
        // Newton direction, block by block: (-H_k + ridge I) δ_k = g_k.
        let mut delta = vec![0.0; k * d];
        for (s, rows) in members.iter().enumerate() {
            let mut h = DMatrix::<f64>::zeros(d, d);
            for &i in rows {
                let c = -disc.rho2(v[i]) / n as f64;
                let z = cs.compact.row(i);
                for a in 0..d {
                    for b in 0..=a {
                        h[(a, b)] += c * z[a] * z[b];
                    }
                }
            }
            for a in 0..d {
                for b in 0..a {
                    h[(b, a)] = h[(a, b)];
                }
                h[(a, a)] += opts.hessian_ridge;
            }
            let gk = DVector::from_column_slice(&g[s * d..(s + 1) * d]);
            let dk = solve_spd(&h, &gk);
            delta[s * d..(s + 1) * d].copy_from_slice(dk.as_slice());
        }
        let dv = cs.linear_index(&delta);
        let slope: f64 = g.iter().zip(&delta).map(|(a, b)| a * b).sum();
        let mut t: f64 = 1.0;
        if disc == Discrepancy::EmpLikelihood {
            let floor = 0.1 * v.iter().map(|x| 1.0 + x).fold(f64::INFINITY, f64::min);
            for i in 0..n {
                if dv[i] < 0.0 {
                    t = t.min((1.0 + v[i] - floor) / -dv[i]);
                }
            }
        }
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let trial: Vec<f64> = v.iter().zip(&dv).map(|(a, b)| a + t * b).collect();
            if trial.iter().all(|&x| disc.in_domain(x)) {
                let ft = dual_objective(disc, &trial);
                if ft.is_finite() && ft >= f + opts.armijo * t * slope {
                    accepted = Some((trial, ft));
                    break;
                }
                // Near the optimum the Armijo gain can fall below roundoff;
                // accept a step that is flat to machine precision and
                // shrinks the gradient.
                if ft.is_finite() && ft >= f - 1e-14 * (1.0 + f.abs()) {
                    let gt = gradient(&trial);
                    if max_abs(&gt) < max_abs(&g) {
                        accepted = Some((trial, ft.max(f)));
                        break;
                    }
                }
            }
            t *= opts.shrink;
        }
        let Some((new_v, new_f)) = accepted else {
            if max_abs(&g) <= opts.tol {
                break;
            }
            return Err(Error::InfeasibleDirection {
                iteration: iterations,
                lambda,
            });
        };
        for (l, dl) in lambda.iter_mut().zip(&delta) {
            *l += t * dl;
        }
        v = new_v;
        f = new_f;
        path.push(f);
        g = gradient(&v);
        iterations += 1;
    }
    let weights: Vec<f64> = v.iter().map(|&x| disc.rho1(x)).collect();
    Ok(CalibrationResult {
        constraint_residual: cs.residual(&weights),
        lambda,
        weights,
        iterations,
        converged: true,
        objective: f,
        objective_path: path,
        discrepancy: disc,
    })
}

/// Closed form for the quadratic discrepancy, dual Newton otherwise.
pub fn calibrate(cs: &ConstraintSystem, disc: Discrepancy) -> Result<CalibrationResult> {
    match disc {
        Discrepancy::Quadratic => Ok(solve_quadratic(cs)),
        _ => {
            let opts = NewtonOptions::default();
            solve_dual_with(cs, disc, &opts)
        }
    }
}

/// (ρ'(0), ρ''(0), ρ'''(0)) by central differences with step 1e-4: the
/// first two from ρ, the third from the analytic ρ''.
pub fn rho_table_check(disc: Discrepancy) -> (f64, f64, f64) {
    let h = 1e-4;
    let r1 = (disc.rho(h) - disc.rho(-h)) / (2.0 * h);
    let r2 = (disc.rho(h) - 2.0 * disc.rho(0.0) + disc.rho(-h)) / (h * h);
    let r3 = (disc.rho2(h) - disc.rho2(-h)) / (2.0 * h);
    (r1, r2, r3)
}

/// Reference values of (ρ'(0), ρ''(0), ρ'''(0)).
pub fn rho_table_reference(disc: Discrepancy) -> (f64, f64, f64) {
    match disc {
        Discrepancy::Quadratic => (1.0, -1.0, 0.0),
        Discrepancy::ExpTilting => (1.0, -1.0, 1.0),
        Discrepancy::EmpLikelihood => (1.0, -1.0, 2.0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_stratum_system(z: &[f64]) -> ConstraintSystem {
        let n = z.len();
        let compact = DMatrix::from_column_slice(n, 1, z);
        ConstraintSystem {
            xi_blocks: compact.clone(),
            pi_nk: vec![0.5],
            p_nk: vec![1.0],
            xi_bar: DMatrix::zeros(1, 1),
            warnings: Vec::new(),
            strata: vec![0; n],
            compact,
        }
    }

    #[test]
    fn scalar_closed_form() {
        let c = 0.7;
        let z = [c, c, c, -c, -c, 0.0];
        let cs = one_stratum_system(&z);
        let res = solve_quadratic(&cs);
        let mean: f64 = z.iter().sum::<f64>() / 6.0;
        let mean_sq: f64 = z.iter().map(|v| v * v).sum::<f64>() / 6.0;
        assert!((res.lambda[0] - mean / mean_sq).abs() < 1e-14);
        assert!(res.constraint_residual < 1e-15);
    }

    #[test]
    fn zero_system_gives_unit_weights() {
        let cs = one_stratum_system(&[0.0; 5]);
        assert!(solve_quadratic(&cs).weights.iter().all(|&w| w == 1.0));
        for disc in Discrepancy::ALL {
            let r = solve_dual(&cs, disc, 1e-8, 100).unwrap();
            assert_eq!(r.lambda, vec![0.0]);
            assert!(r.weights.iter().all(|&w| w == 1.0));
        }
    }

    #[test]
    fn dual_quadratic_matches_closed_form() {
        let z = [0.3, -0.2, 0.5, -0.4, 0.1, 0.25, -0.35, 0.05];
        let cs = one_stratum_system(&z);
        let a = solve_quadratic(&cs);
        let b = solve_dual(&cs, Discrepancy::Quadratic, 1e-8, 100).unwrap();
        assert!((a.lambda[0] - b.lambda[0]).abs() < 1e-12);
    }

    #[test]
    fn el_weights_positive() {
        let z = [0.3, -0.2, 0.5, -0.4, 0.1, 0.25, -0.35, 0.05, 0.6];
        let cs = one_stratum_system(&z);
        let r = solve_dual(&cs, Discrepancy::EmpLikelihood, 1e-10, 100).unwrap();
        assert!(r.all_weights_positive());
        assert!(r.constraint_residual <= 1e-10);
        assert!(r.objective_path.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn rho_triples() {
        for disc in Discrepancy::ALL {
            let (a, b, c) = rho_table_check(disc);
            let (ra, rb, rc) = rho_table_reference(disc);
            assert!((a - ra).abs() < 1e-4 && (b - rb).abs() < 1e-4 && (c - rc).abs() < 1e-4);
        }
    }

    #[test]
    fn discrepancy_parses() {
        assert_eq!("EL".parse::<Discrepancy>().unwrap(), Discrepancy::EmpLikelihood);
        assert!("hellinger".parse::<Discrepancy>().is_err());
    }
}
