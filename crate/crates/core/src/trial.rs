//! Unit-level trial data and per-stratum summaries.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// One experiment: outcomes, arms, stratum labels and covariates.
///
/// Stratum labels are stored as `0..K`, each with at least one unit. The
/// original tokens live in `stratum_names`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    y: Vec<f64>,
    a: Vec<u8>,
    strata: Vec<usize>,
    x: DMatrix<f64>,
    stratum_names: Vec<String>,
    covariate_names: Vec<String>,
}

/// Summary of one stratum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StratumStats {
    pub n: usize,
    pub n1: usize,
    pub n0: usize,
    /// Stratum share n[k]/n.
    pub p: f64,
    /// Treated share n1[k]/n[k].
    pub pi: f64,
    pub ybar1: f64,
    pub ybar0: f64,
}

impl Trial {
    /// Builds a trial with labels already in `0..K`. Every label in that
    /// range must occur.
    pub fn new(y: Vec<f64>, a: Vec<u8>, strata: Vec<usize>, x: DMatrix<f64>) -> Result<Self> {
        let k = strata.iter().max().map_or(0, |m| m + 1);
        let names = (1..=k).map(|s| s.to_string()).collect();
        let cov = (1..=x.ncols()).map(|j| format!("x{j}")).collect();
        Self::with_names(y, a, strata, x, names, cov)
    }

    pub fn with_names(
        y: Vec<f64>,
        a: Vec<u8>,
        strata: Vec<usize>,
        x: DMatrix<f64>,
        stratum_names: Vec<String>,
        covariate_names: Vec<String>,
    ) -> Result<Self> {
        let n = y.len();
        if n == 0 {
            return Err(Error::InvalidInput("trial has no units".into()));
        }
        if a.len() != n || strata.len() != n || x.nrows() != n {
            return Err(Error::InvalidInput(format!(
                "length mismatch: y {n}, a {}, strata {}, x rows {}",
                a.len(),
                strata.len(),
                x.nrows()
            )));
        }
        if a.iter().any(|&v| v > 1) {
            return Err(Error::InvalidInput("arm values must be 0 or 1".into()));
        }
        if y.iter().any(|v| !v.is_finite()) || x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite outcome or covariate".into()));
        }
        let k = stratum_names.len();
        let mut seen = vec![false; k];
        for &s in &strata {
            if s >= k {
                return Err(Error::InvalidInput(format!("stratum label {s} out of range 0..{k}")));
            }
            seen[s] = true;
        }
        if let Some(empty) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidInput(format!(
                "stratum '{}' has no units",
                stratum_names[empty]
            )));
        }
        if covariate_names.len() != x.ncols() {
            return Err(Error::InvalidInput("covariate name count mismatch".into()));
        }
        Ok(Self {
            y,
            a,
            strata,
            x,
            stratum_names,
            covariate_names,
        })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn k(&self) -> usize {
        self.stratum_names.len()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn a(&self) -> &[u8] {
        &self.a
    }

    pub fn strata(&self) -> &[usize] {
        &self.strata
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn stratum_names(&self) -> &[String] {
        &self.stratum_names
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    /// Returns a copy with outcomes replaced.
    pub fn with_outcomes(&self, y: Vec<f64>) -> Result<Self> {
        Self::with_names(
            y,
            self.a.clone(),
            self.strata.clone(),
            self.x.clone(),
            self.stratum_names.clone(),
            self.covariate_names.clone(),
        )
    }

    /// Returns a copy with outcomes and covariates replaced.
    pub fn with_data(&self, y: Vec<f64>, x: DMatrix<f64>, covariate_names: Vec<String>) -> Result<Self> {
        Self::with_names(
            y,
            self.a.clone(),
            self.strata.clone(),
            x,
            self.stratum_names.clone(),
            covariate_names,
        )
    }

    /// Units of each stratum, in index order.
    pub fn stratum_members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.k()];
        for (i, &s) in self.strata.iter().enumerate() {
            out[s].push(i);
        }
        out
    }

    /// Units of the (stratum, arm) cell.
    pub fn cell(&self, stratum: usize, arm: u8) -> Vec<usize> {
        (0..self.n())
            .filter(|&i| self.strata[i] == stratum && self.a[i] == arm)
            .collect()
    }

    /// Restricts to the given units. Labels are kept when every stratum
    /// survives; otherwise the surviving strata are renumbered in label
    /// order.
    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        if idx.iter().any(|&i| i >= self.n()) {
            return Err(Error::InvalidInput("subset index out of range".into()));
        }
        let mut present = vec![false; self.k()];
        for &i in idx {
            present[self.strata[i]] = true;
        }
        let mut remap = vec![usize::MAX; self.k()];
        let mut names = Vec::new();
        for (s, &keep) in present.iter().enumerate() {
            if keep {
                remap[s] = names.len();
                names.push(self.stratum_names[s].clone());
            }
        }
        let x = self.x.select_rows(idx);
        Self::with_names(
            idx.iter().map(|&i| self.y[i]).collect(),
            idx.iter().map(|&i| self.a[i]).collect(),
            idx.iter().map(|&i| remap[self.strata[i]]).collect(),
            x,
            names,
            self.covariate_names.clone(),
        )
    }

    /// Per-stratum counts, shares and arm means.
    pub fn stratum_stats(&self) -> Result<Vec<StratumStats>> {
        let k = self.k();
        let mut n1 = vec![0usize; k];
        let mut n0 = vec![0usize; k];
        let mut s1 = vec![0.0; k];
        let mut s0 = vec![0.0; k];
        for i in 0..self.n() {
            let s = self.strata[i];
            if self.a[i] == 1 {
                n1[s] += 1;
                s1[s] += self.y[i];
            } else {
                n0[s] += 1;
                s0[s] += self.y[i];
            }
        }
        let n = self.n() as f64;
        (0..k)
            .map(|s| {
                if n1[s] == 0 || n0[s] == 0 {
                    return Err(Error::DegenerateStratum {
                        stratum: self.stratum_names[s].clone(),
                        detail: format!("{} treated and {} control units", n1[s], n0[s]),
                    });
                }
                let nk = n1[s] + n0[s];
                Ok(StratumStats {
                    n: nk,
                    n1: n1[s],
                    n0: n0[s],
                    p: nk as f64 / n,
                    pi: n1[s] as f64 / nk as f64,
                    ybar1: s1[s] / n1[s] as f64,
                    ybar0: s0[s] / n0[s] as f64,
                })
            })
            .collect()
    }
}
