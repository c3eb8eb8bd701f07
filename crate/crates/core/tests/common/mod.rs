//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use carcal::dataio::{write_trial, CsvSchema};
use carcal::design::{assign_by_strata, DesignSpec};
use carcal::proxy::{ProxyMatrix, Trial};
use carcal::rng::{rng_from_seed, SimRng};
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

/// A trial with `k` strata of random sizes, every (stratum, arm) cell
/// holding at least `min_cell` units, N(0,1) covariates and outcome
/// `y = x·β + noise`.
pub fn random_trial(rng: &mut SimRng, n: usize, k: usize, p: usize, min_cell: usize) -> Trial {
    assert!(n >= 2 * k * min_cell);
    let mut strata: Vec<usize> = (0..n).map(|i| i % k).collect();
    for s in strata.iter_mut().skip(2 * k * min_cell) {
        *s = rng.random_range(0..k);
    }
    strata.shuffle(rng);
    let mut seen = vec![0usize; k];
    let mut a = vec![0u8; n];
    for i in 0..n {
        let s = strata[i];
        a[i] = if seen[s] < min_cell {
            1
        } else if seen[s] < 2 * min_cell {
            0
        } else {
            u8::from(rng.random_bool(0.5))
        };
        seen[s] += 1;
    }
    let x = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
    let beta: Vec<f64> = (0..p).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let y = (0..n)
        .map(|i| {
            let lin: f64 = (0..p).map(|j| x[(i, j)] * beta[j]).sum();
            lin + f64::from(a[i]) + strata[i] as f64 * 0.3 + rng.sample::<f64, _>(StandardNormal)
        })
        .collect();
    Trial::new(y, a, strata, x).unwrap()
}

pub fn random_proxy(rng: &mut SimRng, n: usize, d: usize, scale: f64) -> ProxyMatrix {
    let cols: Vec<Vec<f64>> = (0..d)
        .map(|_| (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    ProxyMatrix::from_columns(&cols, "random").unwrap()
}

pub fn rng(seed: u64) -> SimRng {
    rng_from_seed(seed)
}

/// Rows in the synthetic twin before pruning.
pub const TWIN_ROWS: usize = 2159;
/// Strata in the synthetic twin before pruning.
pub const TWIN_STRATA: usize = 41;
/// Sizes of the strata below the pruning threshold of six.
pub const TWIN_SMALL_STRATA: [usize; 4] = [5, 5, 5, 4];

/// Stratum sizes of the twin: 37 strata of at least 20 units and four
/// strata below six, totalling [`TWIN_ROWS`].
pub fn twin_stratum_sizes() -> Vec<usize> {
    let large = TWIN_STRATA - TWIN_SMALL_STRATA.len();
    let target = TWIN_ROWS - TWIN_SMALL_STRATA.iter().sum::<usize>();
    let mut sizes: Vec<usize> = (0..large).map(|i| 20 + (i * 29) % 77).collect();
    let mut total: usize = sizes.iter().sum();
    let mut i = 0;
    while total != target {
        if total < target {
            sizes[i % large] += 1;
            total += 1;
        } else if sizes[i % large] > 20 {
            sizes[i % large] -= 1;
            total -= 1;
        }
        i += 1;
    }
    // Small strata are spread through the label order.
    for (j, &s) in TWIN_SMALL_STRATA.iter().enumerate() {
        sizes.insert(3 + 9 * j, s);
    }
    sizes
}

fn savings(rng: &mut SimRng, alpha: f64, x: f64) -> f64 {
    let e: f64 = Normal::new(0.0, 0.9).unwrap().sample(rng);
    ((0.8 + 0.6 * alpha + 0.8 * (x + 1.0).ln() + e).exp() - 1.0).max(0.0)
}

fn baseline(rng: &mut SimRng, location: f64, spread: f64) -> f64 {
    if rng.random_bool(0.25) {
        0.0
    } else {
        (location + spread * rng.sample::<f64, _>(StandardNormal)).exp()
    }
}

/// Writes a synthetic savings trial (`y,a,stratum,x`) and an external
/// sample (`y,x`) from a related population into `dir`.
pub fn write_twin(dir: &Path, seed: u64) -> (PathBuf, PathBuf) {
    let mut rng = rng_from_seed(seed);
    let sizes = twin_stratum_sizes();
    let mut strata: Vec<usize> = sizes.iter().enumerate().flat_map(|(s, &m)| std::iter::repeat_n(s, m)).collect();
    strata.shuffle(&mut rng);
    let alpha: Vec<f64> = (0..sizes.len()).map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal)).collect();
    let arms = assign_by_strata(&strata, &DesignSpec::stratified_block(seed ^ 0x5eed)).unwrap().arms;
    let n = strata.len();
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let al = alpha[strata[i]];
        let xi = baseline(&mut rng, 4.0 + 0.3 * al, 1.3);
        let y0 = savings(&mut rng, al, xi);
        let yi = if arms[i] == 1 { 1.25 * y0 + 20.0 * rng.random::<f64>() } else { y0 };
        x.push(xi);
        y.push(yi);
    }
    let names: Vec<String> = (0..sizes.len()).map(|s| format!("B{:02}", s + 1)).collect();
    let trial = Trial::with_names(y, arms, strata, DMatrix::from_vec(n, 1, x), names, vec!["x".into()]).unwrap();
    let data = dir.join("twin.csv");
    write_trial(&trial, &CsvSchema::new("y", "a", "stratum", &["x"]), &data).unwrap();

    let m = 2108;
    let mut w = csv::Writer::from_path(dir.join("external.csv")).unwrap();
    w.write_record(["y", "x"]).unwrap();
    for _ in 0..m {
        let al = 0.5 * rng.sample::<f64, _>(StandardNormal);
        let xi = baseline(&mut rng, 3.6 + 0.3 * al, 1.4);
        let yi = savings(&mut rng, al, xi);
        w.write_record([yi.to_string(), xi.to_string()]).unwrap();
    }
    w.flush().unwrap();
    (data, dir.join("external.csv"))
}
