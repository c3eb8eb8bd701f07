//! Data-generating processes for the four simulation models and the
//! replication loop that summarizes bias, SD, SE and coverage.
//!
//! Replication `r` draws everything from seeds derived from
//! `(spec.seed, r)`, so summaries do not depend on thread count or
//! scheduling.

use std::fmt::Write as _;
use std::sync::OnceLock;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal, StudentT};
use rayon::prelude::*;

use crate::calibration::Discrepancy;
use crate::design::{assign_by_strata, DesignSpec};
use crate::error::{Error, Result};
use crate::estimator::{aipw_ate, calibrate_ate, cross_fit_ate, sdim_ate, AteReport};
use crate::learners::LearnerSpec;
use crate::proxy::{within_stratum_proxy, Trial};
use crate::recipe::{ExternalData, ProxyRecipe};
use crate::rng::{derive_seed, rng_from_seed, SimRng};

/// Draws used by the true-τ oracle.
pub const ORACLE_DRAWS: usize = 10_000_000;
/// Fixed oracle seed.
pub const ORACLE_SEED: u64 = 0x0C0F_FEE0_0D15_EA5E;

/// An auxiliary dataset generated alongside each replication, standing in
/// for historical or observational data.
#[derive(Debug, Clone, PartialEq)]
pub struct ExternalSim {
    pub n: usize,
    /// Added to X2 in the external covariates.
    pub shift: f64,
    /// Replace the external outcome by pure N(0,1) noise.
    pub unrelated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub model: u8,
    pub n: usize,
    pub p: usize,
    pub design: DesignSpec,
    pub seed: u64,
    /// Fix the Model 2/4 interaction covariates across replications.
    pub freeze_interactions: bool,
    pub external: Option<ExternalSim>,
}

impl ModelSpec {
    pub fn new(model: u8, n: usize, design: DesignSpec, seed: u64) -> Self {
        Self {
            model,
            n,
            p: 30,
            design,
            seed,
            freeze_interactions: false,
            external: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=4).contains(&self.model) {
            return Err(Error::InvalidSpec(format!("model must be 1..4, got {}", self.model)));
        }
        if self.p < 4 {
            return Err(Error::InvalidSpec(format!("p must be at least 4, got {}", self.p)));
        }
        if self.n < 50 {
            return Err(Error::InvalidSpec(format!("n must be at least 50, got {}", self.n)));
        }
        self.design.validate()?;
        Ok(())
    }
}

/// Conditional means (g0, g1) at covariates `x` (at least four entries,
/// `x[0]` is X1) and randomization variable `s` (1..4, 1..2 or ±1).
pub fn conditional_means(model: u8, x: &[f64], s: f64) -> (f64, f64) {
    let (x1, x2, x3, x4) = (x[0], x[1], x[2], x[3]);
    match model {
        1 => (
            1.0 + 75.0 * x1 + 35.0 * x2 + 125.0 * x3 + 80.0 * x4,
            4.0 + 100.0 * x1 + 80.0 * x2 + 60.0 * x3 + 40.0 * x4,
        ),
        2 => (
            -3.0 + 10.0 * (x1 + 1.0).ln() + 24.0 * x2 * x2 + 15.0 * x3.exp() + 20.0 / (x4 + 3.0),
            20.0 * (x1 + 2.0).exp() + 17.0 / (x1 + 1.0) + 10.0 * x2 * x2,
        ),
        3 => (
            5.0 + 42.0 * x1 * x2 / (x1 + x2 + 2.0) + 83.0 * x1 * x1 * (x2 + x3),
            2.0 + 30.0 * (x2 + x4) + 75.0 * x2 * x2 / (x1 + 2.0).exp(),
        ),
        4 => {
            let lin = (20.0 * x1 + 30.0 * x2) * s;
            let one = f64::from(u8::from(s == 1.0));
            let minus = f64::from(u8::from(s == -1.0));
            (
                5.0 + lin + 50.0 * (x1 + 1.0).ln() * one,
                5.0 + lin + 65.0 * x2.exp() * minus,
            )
        }
        _ => (f64::NAN, f64::NAN),
    }
}

/// E[g1 - g0] for Model 1 from the covariate moments.
pub fn model1_closed_form_tau() -> f64 {
    let (e1, e2, e3, e4) = (3.0 / 7.0, 0.0, 0.0, 0.6 * 3.0 + 0.4 * 5.0);
    3.0 + 25.0 * e1 + 45.0 * e2 - 65.0 * e3 - 40.0 * e4
}

fn strata_probs(model: u8) -> &'static [f64] {
    match model {
        1 | 2 => &[0.2, 0.3, 0.3, 0.2],
        3 => &[0.4, 0.6],
        _ => &[0.5, 0.5],
    }
}

fn stratum_value(model: u8, label: usize) -> f64 {
    if model == 4 {
        if label == 0 {
            1.0
        } else {
            -1.0
        }
    } else {
        (label + 1) as f64
    }
}

fn draw_label(probs: &[f64], rng: &mut SimRng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    probs.len() - 1
}

/// X1..X4 and the stratum label for one unit.
fn draw_base(model: u8, beta: &Beta<f64>, rng: &mut SimRng) -> ([f64; 4], usize) {
    let x1 = beta.sample(rng);
    let x2 = rng.random_range(-2.0..2.0);
    let (x3, x4) = if model == 3 {
        let z: f64 = rng.sample(StandardNormal);
        (z, rng.random_range(0.0..2.0))
    } else {
        let x3 = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let x4 = if rng.random::<f64>() < 0.6 { 3.0 } else { 5.0 };
        (x3, x4)
    };
    let label = draw_label(strata_probs(model), rng);
    ([x1, x2, x3, x4], label)
}

fn symmetric_sqrt(cov: DMatrix<f64>) -> DMatrix<f64> {
    let eig = cov.symmetric_eigen();
    let root = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose()
}

/// One replication's data with the potential outcomes kept.
#[derive(Debug, Clone)]
pub struct SimDraw {
    pub trial: Trial,
    pub y0: Vec<f64>,
    pub y1: Vec<f64>,
    pub g0: Vec<f64>,
    pub g1: Vec<f64>,
    pub true_tau: f64,
    pub external: Option<ExternalData>,
}

/// Per-spec sampler holding the covariance square root of X5..Xp.
#[derive(Debug, Clone)]
pub struct ModelSampler {
    spec: ModelSpec,
    root: DMatrix<f64>,
    beta: Beta<f64>,
}

impl ModelSampler {
    pub fn new(spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        let m = spec.p - 4;
        let cov = DMatrix::from_fn(m, m, |i, j| {
            if spec.model == 3 {
                0.5f64.powi((i as i32 - j as i32).abs())
            } else if i == j {
                1.0
            } else {
                0.2
            }
        });
        Ok(Self {
            spec: spec.clone(),
            root: symmetric_sqrt(cov),
            beta: Beta::new(3.0, 4.0).expect("valid beta parameters"),
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    /// Covariates (n × p, pre-interaction X1..X4 kept for g) and labels.
    fn covariates(&self, n: usize, shift: f64, rep_seed: u64, rng: &mut SimRng) -> (DMatrix<f64>, Vec<[f64; 4]>, Vec<usize>) {
        let (p, model) = (self.spec.p, self.spec.model);
        let m = p - 4;
        let mut x = DMatrix::zeros(n, p);
        let mut base = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        let mut z = nalgebra::DVector::zeros(m);
        for i in 0..n {
            let (mut b, label) = draw_base(model, &self.beta, rng);
            b[1] += shift;
            for j in 0..m {
                z[j] = rng.sample(StandardNormal);
            }
            let extra = &self.root * &z;
            for j in 0..4 {
                x[(i, j)] = b[j];
            }
            for j in 0..m {
                x[(i, 4 + j)] = extra[j];
            }
            base.push(b);
            labels.push(label);
        }
        if matches!(model, 2 | 4) {
            let sel_seed = if self.spec.freeze_interactions {
                derive_seed(self.spec.seed, u64::MAX)
            } else {
                derive_seed(rep_seed, 3)
            };
            let mut sel = rng_from_seed(sel_seed);
            let pool: Vec<usize> = (2..p).collect();
            let count = (p / 3).min(pool.len());
            let chosen = rand::seq::index::sample(&mut sel, pool.len(), count).into_vec();
            let mut chosen: Vec<(usize, usize)> = chosen
                .into_iter()
                .map(|c| (pool[c], if sel.random::<bool>() { 0 } else { 1 }))
                .collect();
            chosen.sort_unstable();
            for (col, by) in chosen {
                for i in 0..n {
                    x[(i, col)] *= base[i][by];
                }
            }
        }
        (x, base, labels)
    }

    pub fn draw(&self, rep: u64) -> Result<SimDraw> {
        let spec = &self.spec;
        let rep_seed = derive_seed(spec.seed, rep);
        let mut rng = rng_from_seed(derive_seed(rep_seed, 1));
        let n = spec.n;
        let (x, base, labels) = self.covariates(n, 0.0, rep_seed, &mut rng);
        let mut g0 = Vec::with_capacity(n);
        let mut g1 = Vec::with_capacity(n);
        let mut y0 = Vec::with_capacity(n);
        let mut y1 = Vec::with_capacity(n);
        let t2 = StudentT::new(2.0).expect("valid t parameter");
        for i in 0..n {
            let (m0, m1) = conditional_means(spec.model, &base[i], stratum_value(spec.model, labels[i]));
            let (e0, e1) = if spec.model == 3 {
                (t2.sample(&mut rng), 3.0 * t2.sample(&mut rng))
            } else {
                let a: f64 = rng.sample(StandardNormal);
                let b: f64 = rng.sample(StandardNormal);
                (a, 3.0 * b)
            };
            g0.push(m0);
            g1.push(m1);
            y0.push(m0 + e0);
            y1.push(m1 + e1);
        }
        // Compact labels in case a stratum is empty in this draw.
        let k_all = strata_probs(spec.model).len();
        let mut present = vec![false; k_all];
        labels.iter().for_each(|&l| present[l] = true);
        let mut remap = vec![usize::MAX; k_all];
        let mut names = Vec::new();
        for (l, &keep) in present.iter().enumerate() {
            if keep {
                remap[l] = names.len();
                names.push(format!("{}", stratum_value(spec.model, l)));
            }
        }
        let strata: Vec<usize> = labels.iter().map(|&l| remap[l]).collect();
        let assignment = assign_by_strata(&strata, &spec.design.with_seed(derive_seed(rep_seed, 2)))?;
        let y: Vec<f64> = (0..n)
            .map(|i| if assignment.arms[i] == 1 { y1[i] } else { y0[i] })
            .collect();
        let cov_names = (1..=spec.p).map(|j| format!("x{j}")).collect();
        let trial = Trial::with_names(y, assignment.arms, strata, x, names, cov_names)?;
        let external = match &spec.external {
            Some(ext) => Some(self.external(ext, rep_seed)?),
            None => None,
        };
        Ok(SimDraw {
            trial,
            y0,
            y1,
            g0,
            g1,
            true_tau: true_tau(spec.model),
            external,
        })
    }

    fn external(&self, ext: &ExternalSim, rep_seed: u64) -> Result<ExternalData> {
        let mut rng = rng_from_seed(derive_seed(rep_seed, 4));
        let (x, base, labels) = self.covariates(ext.n, ext.shift, rep_seed, &mut rng);
        let y = (0..ext.n)
            .map(|i| {
                if ext.unrelated {
                    return rng.sample(StandardNormal);
                }
                let s = stratum_value(self.spec.model, labels[i]);
                let (m0, m1) = conditional_means(self.spec.model, &base[i], s);
                let e: f64 = rng.sample(StandardNormal);
                if rng.random::<bool>() {
                    m1 + 3.0 * e
                } else {
                    m0 + e
                }
            })
            .collect();
        Ok(ExternalData {
            x,
            y,
            names: (1..=self.spec.p).map(|j| format!("x{j}")).collect(),
        })
    }
}

/// One replication's trial and the model's true τ.
pub fn generate(spec: &ModelSpec, rep: u64) -> Result<(Trial, f64)> {
    let d = ModelSampler::new(spec)?.draw(rep)?;
    Ok((d.trial, d.true_tau))
}

/// Monte Carlo mean of g1 - g0 and its standard error.
pub fn true_tau_oracle(model: u8, draws: usize, seed: u64) -> (f64, f64) {
    const CHUNK: usize = 1 << 18;
    let chunks = draws.div_ceil(CHUNK);
    let beta = Beta::new(3.0, 4.0).expect("valid beta parameters");
    let sums: Vec<(f64, f64)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = rng_from_seed(derive_seed(seed, c as u64));
            let len = CHUNK.min(draws - c * CHUNK);
            let (mut s, mut s2) = (0.0, 0.0);
            for _ in 0..len {
                let (x, label) = draw_base(model, &beta, &mut rng);
                let (g0, g1) = conditional_means(model, &x, stratum_value(model, label));
                let d = g1 - g0;
                s += d;
                s2 += d * d;
            }
            (s, s2)
        })
        .collect();
    let (s, s2) = sums.iter().fold((0.0, 0.0), |(a, b), (c, d)| (a + c, b + d));
    let n = draws as f64;
    let mean = s / n;
    let var = (s2 / n - mean * mean).max(0.0) * n / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Cached oracle value of τ for a model.
pub fn true_tau(model: u8) -> f64 {
    static CACHE: [OnceLock<f64>; 4] = [OnceLock::new(), OnceLock::new(), OnceLock::new(), OnceLock::new()];
    match model {
        1..=4 => *CACHE[usize::from(model - 1)].get_or_init(|| true_tau_oracle(model, ORACLE_DRAWS, ORACLE_SEED).0),
        _ => f64::NAN,
    }
}

/// An estimator that can be run inside the replication loop.
pub trait Estimator: Sync {
    fn name(&self) -> &str;
    fn estimate(&self, trial: &Trial, external: Option<&ExternalData>, seed: u64) -> Result<AteReport>;
}

#[derive(Debug, Clone, PartialEq)]
pub enum EstimatorKind {
    Sdim,
    /// AIPW with within-stratum fits of the given learner.
    Aipw(LearnerSpec),
    Cal { recipe: ProxyRecipe, disc: Discrepancy },
    CrossFit { recipe: ProxyRecipe, disc: Discrepancy },
}

#[derive(Debug, Clone, PartialEq)]
pub struct StandardEstimator {
    pub name: String,
    pub kind: EstimatorKind,
    pub level: f64,
}

impl StandardEstimator {
    pub fn new(name: impl Into<String>, kind: EstimatorKind) -> Self {
        Self {
            name: name.into(),
            kind,
            level: 0.95,
        }
    }

    pub fn sdim() -> Self {
        Self::new("sdim", EstimatorKind::Sdim)
    }

    pub fn aipw(name: impl Into<String>, learner: LearnerSpec) -> Self {
        Self::new(name, EstimatorKind::Aipw(learner))
    }

    pub fn cal(name: impl Into<String>, recipe: ProxyRecipe, disc: Discrepancy) -> Self {
        Self::new(name, EstimatorKind::Cal { recipe, disc })
    }

    pub fn cross_fit(name: impl Into<String>, recipe: ProxyRecipe, disc: Discrepancy) -> Self {
        Self::new(name, EstimatorKind::CrossFit { recipe, disc })
    }
}

impl Estimator for StandardEstimator {
    fn name(&self) -> &str {
        &self.name
    }

    fn estimate(&self, trial: &Trial, external: Option<&ExternalData>, seed: u64) -> Result<AteReport> {
        match &self.kind {
            EstimatorKind::Sdim => sdim_ate(trial, self.level),
            EstimatorKind::Aipw(learner) => {
                let fits = within_stratum_proxy(trial, &learner.with_seed(derive_seed(seed, learner.seed)))?;
                aipw_ate(trial, &fits.column(0), &fits.column(1), self.level)
            }
            EstimatorKind::Cal { recipe, disc } => {
                let proxy = recipe.build(trial, external, seed)?;
                calibrate_ate(trial, &proxy, *disc, self.level)
            }
            EstimatorKind::CrossFit { recipe, disc } => cross_fit_ate(
                trial,
                |train, eval| recipe.build_at(train, eval, external, derive_seed(seed, 1)),
                *disc,
                derive_seed(seed, 2),
                self.level,
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimRow {
    pub name: String,
    pub abs_bias: f64,
    pub empirical_sd: f64,
    pub mean_se: f64,
    pub coverage: f64,
    pub reps: usize,
    pub failures: usize,
    pub estimates: Vec<f64>,
    pub ses: Vec<f64>,
    pub first_error: Option<String>,
}

impl SimRow {
    /// Approximate Monte Carlo standard error of the empirical SD.
    pub fn sd_mc_se(&self) -> f64 {
        if self.reps < 2 {
            return f64::NAN;
        }
        self.empirical_sd / (2.0 * (self.reps as f64 - 1.0)).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimSummary {
    pub model: u8,
    pub n: usize,
    pub design: String,
    pub true_tau: f64,
    pub rows: Vec<SimRow>,
}

impl SimSummary {
    pub fn row(&self, name: &str) -> Option<&SimRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// CSV with columns estimator, bias, sd, se, cp, reps, failures.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["estimator", "bias", "sd", "se", "cp", "reps", "failures"])?;
        for r in &self.rows {
            w.write_record([
                r.name.clone(),
                r.abs_bias.to_string(),
                r.empirical_sd.to_string(),
                r.mean_se.to_string(),
                r.coverage.to_string(),
                r.reps.to_string(),
                r.failures.to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Io(e.to_string()))
    }

    /// Aligned text table.
    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(9).max(9);
        let mut s = String::new();
        let _ = writeln!(
            s,
            "Model {} | n = {} | design = {} | true tau = {:.4}",
            self.model, self.n, self.design, self.true_tau
        );
        let _ = writeln!(
            s,
            "{:<width$}  {:>9}  {:>9}  {:>9}  {:>6}  {:>5}  {:>8}",
            "estimator", "bias", "SD", "SE", "CP", "reps", "failures"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<width$}  {:>9.3}  {:>9.3}  {:>9.3}  {:>6.3}  {:>5}  {:>8}",
                r.name, r.abs_bias, r.empirical_sd, r.mean_se, r.coverage, r.reps, r.failures
            );
        }
        s
    }
}

type RepOutcome = std::result::Result<(f64, f64, bool), String>;

/// Runs `reps` replications of `spec` through every estimator.
pub fn run_study(spec: &ModelSpec, reps: usize, estimators: &[&dyn Estimator]) -> Result<SimSummary> {
    if reps < 2 {
        return Err(Error::InvalidSpec("at least two replications required".into()));
    }
    if estimators.is_empty() {
        return Err(Error::InvalidSpec("no estimators".into()));
    }
    let sampler = ModelSampler::new(spec)?;
    let tau = true_tau(spec.model);
    let outcomes: Vec<Vec<RepOutcome>> = (0..reps as u64)
        .into_par_iter()
        .map(|r| match sampler.draw(r) {
            Ok(draw) => estimators
                .iter()
                .enumerate()
                .map(|(e, est)| {
                    let seed = derive_seed(derive_seed(spec.seed, r), 100 + e as u64);
                    est.estimate(&draw.trial, draw.external.as_ref(), seed)
                        .map(|rep| (rep.tau_hat, rep.se, rep.covers(tau)))
                        .map_err(|err| err.to_string())
                })
                .collect(),
            Err(err) => vec![Err(err.to_string()); estimators.len()],
        })
        .collect();
    let rows = estimators
        .iter()
        .enumerate()
        .map(|(e, est)| {
            let mut estimates = Vec::new();
            let mut ses = Vec::new();
            let mut covered = 0usize;
            let mut failures = 0usize;
            let mut first_error = None;
            for rep in &outcomes {
                match &rep[e] {
                    Ok((t, se, c)) => {
                        estimates.push(*t);
                        ses.push(*se);
                        covered += usize::from(*c);
                    }
                    Err(msg) => {
                        failures += 1;
                        first_error.get_or_insert_with(|| msg.clone());
                    }
                }
            }
            let m = estimates.len();
            let (abs_bias, sd, mean_se, cp) = if m == 0 {
                (f64::NAN, f64::NAN, f64::NAN, f64::NAN)
            } else {
                let mean = estimates.iter().sum::<f64>() / m as f64;
                let sd = if m > 1 {
                    (estimates.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (m - 1) as f64).sqrt()
                } else {
                    f64::NAN
                };
                (
                    (mean - tau).abs(),
                    sd,
                    ses.iter().sum::<f64>() / m as f64,
                    covered as f64 / m as f64,
                )
            };
            SimRow {
                name: est.name().to_string(),
                abs_bias,
                empirical_sd: sd,
                mean_se,
                coverage: cp,
                reps: m,
                failures,
                estimates,
                ses,
                first_error,
            }
        })
        .collect();
    Ok(SimSummary {
        model: spec.model,
        n: spec.n,
        design: spec.design.scheme.to_string(),
        true_tau: tau,
        rows,
    })
}
