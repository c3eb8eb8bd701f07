//! Treatment-assignment generators: simple randomization, stratified block
//! randomization, and Pocock–Simon minimization.
//!
//! All generators are deterministic functions of their inputs and the seed
//! carried by [`DesignSpec`].

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::rng_from_seed;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DesignError {
    #[error("invalid design spec: {0}")]
    InvalidSpec(String),
    #[error("invalid design input: {0}")]
    InvalidInput(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    Simple,
    StratifiedBlock,
    Minimization,
}

impl Scheme {
    pub fn as_str(&self) -> &'static str {
        match self {
            Scheme::Simple => "simple",
            Scheme::StratifiedBlock => "stratified-block",
            Scheme::Minimization => "minimization",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scheme {
    type Err = DesignError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "simple" => Ok(Scheme::Simple),
            "stratified-block" | "block" | "stratified_block" => Ok(Scheme::StratifiedBlock),
            "minimization" | "pocock-simon" => Ok(Scheme::Minimization),
            other => Err(DesignError::InvalidSpec(format!("unknown scheme '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignSpec {
    pub scheme: Scheme,
    /// Target treated share π.
    pub target_share: f64,
    /// Block length for stratified block randomization.
    pub block_size: usize,
    /// Probability of choosing the imbalance-reducing arm under minimization.
    pub biased_coin: f64,
    /// Per-factor weights under minimization; empty means equal weights.
    pub factor_weights: Vec<f64>,
    pub seed: u64,
}

impl DesignSpec {
    pub fn new(scheme: Scheme, seed: u64) -> Self {
        Self {
            scheme,
            target_share: 0.5,
            block_size: 6,
            biased_coin: 0.75,
            factor_weights: Vec::new(),
            seed,
        }
    }

    pub fn simple(seed: u64) -> Self {
        Self::new(Scheme::Simple, seed)
    }

    pub fn stratified_block(seed: u64) -> Self {
        Self::new(Scheme::StratifiedBlock, seed)
    }

    pub fn minimization(seed: u64) -> Self {
        Self::new(Scheme::Minimization, seed)
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), DesignError> {
        if !(self.target_share > 0.0 && self.target_share < 1.0) {
            return Err(DesignError::InvalidSpec(format!(
                "target_share must be in (0,1), got {}",
                self.target_share
            )));
        }
        match self.scheme {
            Scheme::StratifiedBlock => {
                if self.block_size < 2 || !self.block_size.is_multiple_of(2) {
                    return Err(DesignError::InvalidSpec(format!(
                        "block_size must be an even number >= 2, got {}",
                        self.block_size
                    )));
                }
                self.treated_per_block()?;
            }
            Scheme::Minimization => {
                if !(self.biased_coin > 0.5 && self.biased_coin <= 1.0) {
                    return Err(DesignError::InvalidSpec(format!(
                        "biased_coin must be in (0.5, 1], got {}",
                        self.biased_coin
                    )));
                }
                if self.factor_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
                    return Err(DesignError::InvalidSpec(
                        "factor_weights must be non-negative".into(),
                    ));
                }
            }
            Scheme::Simple => {}
        }
        Ok(())
    }

    fn treated_per_block(&self) -> Result<usize, DesignError> {
        let t = self.block_size as f64 * self.target_share;
        if (t - t.round()).abs() > 1e-9 {
            return Err(DesignError::InvalidSpec(format!(
                "block_size * target_share = {t} is not an integer"
            )));
        }
        Ok(t.round() as usize)
    }
}

/// Treatment indicators, one per unit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    pub arms: Vec<u8>,
}

impl Assignment {
    pub fn len(&self) -> usize {
        self.arms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arms.is_empty()
    }

    pub fn treated(&self) -> usize {
        self.arms.iter().filter(|&&a| a == 1).count()
    }
}

/// Independent Bernoulli(π) assignments.
pub fn simple_randomize(n: usize, spec: &DesignSpec) -> Result<Assignment, DesignError> {
    spec.validate()?;
    if n == 0 {
        return Err(DesignError::InvalidInput("n must be at least 1".into()));
    }
    let mut rng = rng_from_seed(spec.seed);
    let arms = (0..n)
        .map(|_| u8::from(rng.random::<f64>() < spec.target_share))
        .collect();
    Ok(Assignment { arms })
}

/// Permuted blocks within each stratum. Units are taken in index order
/// within their stratum; a trailing partial block is the prefix of one more
/// shuffled full block, so per-stratum imbalance never exceeds half a block.
pub fn stratified_block(strata: &[usize], spec: &DesignSpec) -> Result<Assignment, DesignError> {
    spec.validate()?;
    let treated = spec.treated_per_block()?;
    if strata.is_empty() {
        return Err(DesignError::InvalidInput("empty stratum vector".into()));
    }
    let mut rng = rng_from_seed(spec.seed);
    let mut members: Vec<(usize, Vec<usize>)> = Vec::new();
    for (i, &s) in strata.iter().enumerate() {
        match members.iter_mut().find(|(label, _)| *label == s) {
            Some((_, v)) => v.push(i),
            None => members.push((s, vec![i])),
        }
    }
    let mut arms = vec![0u8; strata.len()];
    let b = spec.block_size;
    for (_, units) in &members {
        for chunk in units.chunks(b) {
            let mut block: Vec<u8> = (0..b).map(|j| u8::from(j < treated)).collect();
            block.shuffle(&mut rng);
            for (&unit, &arm) in chunk.iter().zip(&block) {
                arms[unit] = arm;
            }
        }
    }
    Ok(Assignment { arms })
}

/// Sequential Pocock–Simon minimization over `factor_levels` (one row per
/// unit, one column per factor). For each unit, the weighted sum over
/// factors of the margin imbalance `|n1 (1 - π) - n0 π|` is computed for
/// both candidate arms, counting the unit itself; the arm with the smaller
/// total is chosen with probability `biased_coin`. Exact ties use a fair
/// coin. With π = 1/2 the margin statistic is half the range `|n1 - n0|`.
pub fn minimization(
    factor_levels: &[Vec<usize>],
    spec: &DesignSpec,
) -> Result<Assignment, DesignError> {
    spec.validate()?;
    let n = factor_levels.len();
    if n == 0 {
        return Err(DesignError::InvalidInput("no units".into()));
    }
    let f = factor_levels[0].len();
    if f == 0 {
        return Err(DesignError::InvalidInput("at least one factor required".into()));
    }
    if factor_levels.iter().any(|r| r.len() != f) {
        return Err(DesignError::InvalidInput("ragged factor matrix".into()));
    }
    let weights: Vec<f64> = if spec.factor_weights.is_empty() {
        vec![1.0; f]
    } else if spec.factor_weights.len() == f {
        spec.factor_weights.clone()
    } else {
        return Err(DesignError::InvalidSpec(format!(
            "factor_weights has length {}, expected {f}",
            spec.factor_weights.len()
        )));
    };
    let levels_per_factor: Vec<usize> = (0..f)
        .map(|j| factor_levels.iter().map(|r| r[j]).max().unwrap_or(0) + 1)
        .collect();
    // counts[factor][level] = (n0, n1)
    let mut counts: Vec<Vec<[f64; 2]>> =
        levels_per_factor.iter().map(|&l| vec![[0.0, 0.0]; l]).collect();
    let pi = spec.target_share;
    let mut rng = rng_from_seed(spec.seed);
    let mut arms = Vec::with_capacity(n);
    for row in factor_levels {
        let mut score = [0.0f64; 2];
        for (arm, s) in score.iter_mut().enumerate() {
            for (j, &level) in row.iter().enumerate() {
                let [mut n0, mut n1] = counts[j][level];
                if arm == 1 {
                    n1 += 1.0;
                } else {
                    n0 += 1.0;
                }
                *s += weights[j] * (n1 * (1.0 - pi) - n0 * pi).abs();
            }
        }
        let u: f64 = rng.random();
        let arm = if (score[0] - score[1]).abs() <= 1e-12 * (1.0 + score[0].abs()) {
            u8::from(u < 0.5)
        } else {
            let preferred = u8::from(score[1] < score[0]);
            if u < spec.biased_coin {
                preferred
            } else {
                1 - preferred
            }
        };
        for (j, &level) in row.iter().enumerate() {
            counts[j][level][arm as usize] += 1.0;
        }
        arms.push(arm);
    }
    Ok(Assignment { arms })
}

/// Dispatches on the scheme, using the stratum label as the single
/// minimization factor.
pub fn assign_by_strata(strata: &[usize], spec: &DesignSpec) -> Result<Assignment, DesignError> {
    match spec.scheme {
        Scheme::Simple => simple_randomize(strata.len(), spec),
        Scheme::StratifiedBlock => stratified_block(strata, spec),
        Scheme::Minimization => {
            let levels: Vec<Vec<usize>> = strata.iter().map(|&s| vec![s]).collect();
            minimization(&levels, spec)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec_with_share(scheme: Scheme, pi: f64, seed: u64) -> DesignSpec {
        DesignSpec {
            target_share: pi,
            ..DesignSpec::new(scheme, seed)
        }
    }

    #[test]
    fn simple_is_reproducible() {
        let spec = DesignSpec::simple(11);
        let a = simple_randomize(10, &spec).unwrap();
        let b = simple_randomize(10, &spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 10);
    }

    #[test]
    fn simple_share_within_binomial_band() {
        // 3-sigma bands: 3*sqrt(pi(1-pi)/n).
        let a = simple_randomize(100_000, &spec_with_share(Scheme::Simple, 0.5, 3)).unwrap();
        assert!((a.treated() as f64 / 1e5 - 0.5).abs() <= 0.006);
        let a = simple_randomize(100_000, &spec_with_share(Scheme::Simple, 0.3, 4)).unwrap();
        assert!((a.treated() as f64 / 1e5 - 0.3).abs() <= 0.005);
    }

    #[test]
    fn block_full_and_partial() {
        let spec = DesignSpec::stratified_block(5);
        let a = stratified_block(&[0; 12], &spec).unwrap();
        assert_eq!(a.treated(), 6);
        for seed in 0..50 {
            let a = stratified_block(&[0; 7], &spec.with_seed(seed)).unwrap();
            assert!(matches!(a.treated(), 3 | 4));
        }
    }

    #[test]
    fn block_imbalance_bounded_per_stratum() {
        let sizes = [20usize, 30, 30, 20];
        let strata: Vec<usize> = sizes
            .iter()
            .enumerate()
            .flat_map(|(k, &s)| std::iter::repeat_n(k, s))
            .collect();
        for seed in 0..200 {
            let a = stratified_block(&strata, &DesignSpec::stratified_block(seed)).unwrap();
            for (k, &size) in sizes.iter().enumerate() {
                let n1 = strata
                    .iter()
                    .zip(&a.arms)
                    .filter(|(&s, &arm)| s == k && arm == 1)
                    .count() as f64;
                assert!((n1 - size as f64 / 2.0).abs() <= 3.0);
            }
        }
    }

    #[test]
    fn block_rejects_non_integer_treated_count() {
        let spec = DesignSpec {
            block_size: 4,
            target_share: 0.3,
            ..DesignSpec::stratified_block(0)
        };
        assert!(matches!(
            stratified_block(&[0, 0, 0], &spec),
            Err(DesignError::InvalidSpec(_))
        ));
        let odd = DesignSpec {
            block_size: 5,
            ..DesignSpec::stratified_block(0)
        };
        assert!(odd.validate().is_err());
    }

    #[test]
    fn minimization_first_unit_is_fair_coin() {
        let reps = 4000;
        let treated = (0..reps)
            .filter(|&s| minimization(&[vec![0]], &DesignSpec::minimization(s)).unwrap().arms[0] == 1)
            .count();
        let share = treated as f64 / reps as f64;
        // 4 sigma of a fair coin at 4000 draws ~ 0.032
        assert!((share - 0.5).abs() < 0.032, "share {share}");
    }

    #[test]
    fn minimization_second_unit_follows_biased_coin() {
        let mut first_treated = 0usize;
        let mut second_control = 0usize;
        for seed in 0..8000u64 {
            let a = minimization(&[vec![0], vec![0]], &DesignSpec::minimization(seed)).unwrap();
            if a.arms[0] == 1 {
                first_treated += 1;
                if a.arms[1] == 0 {
                    second_control += 1;
                }
            }
        }
        let p = second_control as f64 / first_treated as f64;
        // about 4000 conditioning draws: sd ~ 0.0068
        assert!((p - 0.75).abs() < 0.03, "conditional share {p}");
    }

    #[test]
    fn minimization_rejects_bad_coin() {
        let spec = DesignSpec {
            biased_coin: 0.5,
            ..DesignSpec::minimization(0)
        };
        assert!(minimization(&[vec![0]], &spec).is_err());
    }

    #[test]
    fn generators_are_deterministic() {
        let strata: Vec<usize> = (0..60).map(|i| i % 4).collect();
        for scheme in [Scheme::Simple, Scheme::StratifiedBlock, Scheme::Minimization] {
            let spec = DesignSpec::new(scheme, 99);
            assert_eq!(
                assign_by_strata(&strata, &spec).unwrap(),
                assign_by_strata(&strata, &spec).unwrap()
            );
        }
    }

    #[test]
    fn scheme_parses() {
        assert_eq!("stratified-block".parse::<Scheme>().unwrap(), Scheme::StratifiedBlock);
        assert_eq!("Minimization".parse::<Scheme>().unwrap(), Scheme::Minimization);
        assert!("adaptive".parse::<Scheme>().is_err());
    }
}
