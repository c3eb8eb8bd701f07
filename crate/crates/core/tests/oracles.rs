//! Worked examples checked against independent reference computations.

mod common;

use carcal::calibration::{build_constraints, calibrate, solve_dual, Discrepancy};
use carcal::dataio::{load_trial, write_trial, CsvSchema};
use carcal::design::{minimization, simple_randomize, DesignSpec};
use carcal::error::Error;
use carcal::estimator::{aipw_ate, calibrate_ate, cross_fit_ate, residuals, sdim, sdim_ate};
use carcal::inference::variance_components;
use carcal::learners::LearnerSpec;
use carcal::proxy::{
    cross_fit_split, cross_stratum_proxy, external_proxy, raw_covariate_proxy, within_stratum_proxy, ProxyMatrix,
    Trial,
};
use carcal::rng::SimRng;
use carcal::simharness::{
    model1_closed_form_tau, run_study, true_tau_oracle, Estimator, ModelSampler, ModelSpec, StandardEstimator,
};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use common::{random_proxy, random_trial, rng};

/// Least squares with intercept by the normal equations.
fn normal_equations(x: &DMatrix<f64>, y: &[f64]) -> DVector<f64> {
    let n = x.nrows();
    let design = DMatrix::from_fn(n, x.ncols() + 1, |i, j| if j == 0 { 1.0 } else { x[(i, j - 1)] });
    let xtx = design.transpose() * &design;
    let xty = design.transpose() * DVector::from_column_slice(y);
    xtx.cholesky().unwrap().solve(&xty)
}

fn eval_linear(beta: &DVector<f64>, x: &DMatrix<f64>, i: usize) -> f64 {
    beta[0] + (0..x.ncols()).map(|j| beta[j + 1] * x[(i, j)]).sum::<f64>()
}

#[test]
fn constraint_matrix_matches_naive_loop() {
    let mut g = rng(1);
    let t = random_trial(&mut g, 50, 3, 1, 3);
    let p = random_proxy(&mut g, 50, 2, 1.0);
    let cs = build_constraints(&t, &p).unwrap();
    let (n, k, d) = (50, 3, 2);
    for i in 0..n {
        for kk in 0..k {
            let members: Vec<usize> = (0..n).filter(|&u| t.strata()[u] == kk).collect();
            let treated = members.iter().filter(|&&u| t.a()[u] == 1).count() as f64;
            let pi = treated / members.len() as f64;
            for j in 0..d {
                let mut mean = 0.0;
                for &u in &members {
                    mean += p.values()[(u, j)];
                }
                mean /= members.len() as f64;
                let expected = if t.strata()[i] == kk {
                    (f64::from(t.a()[i]) - pi) * (p.values()[(i, j)] - mean)
                } else {
                    0.0
                };
                assert!((cs.xi_blocks[(i, kk * d + j)] - expected).abs() < 1e-14);
            }
        }
    }
}

#[test]
fn residuals_match_hand_formula() {
    let y = vec![4.0, 6.0, 1.0, 3.0, 10.0, 2.0, 2.0, 3.0];
    let a = vec![1, 1, 0, 0, 1, 0, 0, 0];
    let s = vec![0, 0, 0, 0, 1, 1, 1, 1];
    let t = Trial::new(y, a, s, DMatrix::zeros(8, 1)).unwrap();
    let r = residuals(&t).unwrap();
    // Stratum 1: π = 0.5, treated mean 5, control mean 2.
    // Stratum 2: π = 0.25, treated mean 10, control mean 7/3.
    let expected = [
        (4.0 - 5.0) / 0.5,
        (6.0 - 5.0) / 0.5,
        -(1.0 - 2.0) / 0.5,
        -(3.0 - 2.0) / 0.5,
        0.0,
        -(2.0 - 7.0 / 3.0) / 0.75,
        -(2.0 - 7.0 / 3.0) / 0.75,
        -(3.0 - 7.0 / 3.0) / 0.75,
    ];
    for (got, want) in r.iter().zip(expected) {
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
}

#[test]
fn zero_system_gives_zero_multiplier_for_every_discrepancy() {
    let mut g = rng(2);
    let t = random_trial(&mut g, 60, 3, 1, 3);
    let cols = vec![t.strata().iter().map(|&s| s as f64 - 1.0).collect::<Vec<_>>()];
    let cs = build_constraints(&t, &ProxyMatrix::from_columns(&cols, "c").unwrap()).unwrap();
    for disc in Discrepancy::ALL {
        let res = solve_dual(&cs, disc, 1e-10, 50).unwrap();
        assert!(res.lambda.iter().all(|&l| l == 0.0));
        assert!(res.weights.iter().all(|&w| w == 1.0));
    }
}

#[test]
fn empirical_likelihood_weights_on_feasible_instance() {
    let mut g = rng(3);
    let t = random_trial(&mut g, 300, 3, 1, 10);
    let p = random_proxy(&mut g, 300, 2, 1.0);
    let res = calibrate(&build_constraints(&t, &p).unwrap(), Discrepancy::EmpLikelihood).unwrap();
    assert!(res.converged && res.all_weights_positive());
    let mean = res.weights.iter().sum::<f64>() / 300.0;
    assert!((0.5..=2.0).contains(&mean), "mean weight {mean}");
}

#[test]
fn within_proxy_matches_independent_cell_fits() {
    let mut g = rng(4);
    let n = 240;
    let strata: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let a: Vec<u8> = (0..n).map(|i| ((i / 2) % 2) as u8).collect();
    let x = DMatrix::from_fn(n, 2, |_, _| g.sample::<f64, _>(StandardNormal));
    let y: Vec<f64> = (0..n)
        .map(|i| {
            let slope = if strata[i] == 0 { [1.0, -2.0] } else { [-3.0, 0.5] };
            slope[0] * x[(i, 0)] + slope[1] * x[(i, 1)] + f64::from(a[i]) * 2.0 + 0.3 * g.sample::<f64, _>(StandardNormal)
        })
        .collect();
    let t = Trial::new(y.clone(), a.clone(), strata.clone(), x.clone()).unwrap();
    let p = within_stratum_proxy(&t, &LearnerSpec::ols()).unwrap();
    let mut fits = Vec::new();
    for s in 0..2 {
        for arm in [1u8, 0] {
            let idx: Vec<usize> = (0..n).filter(|&i| strata[i] == s && a[i] == arm).collect();
            let xs = x.select_rows(&idx);
            let ys: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
            fits.push(normal_equations(&xs, &ys));
        }
    }
    for i in 0..n {
        let s = strata[i];
        assert!((p.values()[(i, 0)] - eval_linear(&fits[2 * s], &x, i)).abs() < 1e-8);
        assert!((p.values()[(i, 1)] - eval_linear(&fits[2 * s + 1], &x, i)).abs() < 1e-8);
    }
    assert!((fits[0][1] - fits[2][1]).abs() > 1.0);
}

#[test]
fn cross_proxy_homogeneous_model_tracks_pooled_fit() {
    let mut g = rng(5);
    let n = 5000;
    let k = 3;
    let strata: Vec<usize> = (0..n).map(|i| i % k).collect();
    let a: Vec<u8> = (0..n).map(|i| ((i / k) % 2) as u8).collect();
    let x = DMatrix::from_fn(n, 2, |_, _| g.sample::<f64, _>(StandardNormal));
    let y: Vec<f64> = (0..n)
        .map(|i| 1.0 + 2.0 * x[(i, 0)] - x[(i, 1)] + f64::from(a[i]) + g.sample::<f64, _>(StandardNormal))
        .collect();
    let t = Trial::new(y.clone(), a.clone(), strata, x.clone()).unwrap();
    let p = cross_stratum_proxy(&t, &LearnerSpec::ols()).unwrap();
    assert_eq!(p.d(), 2 * k);
    let treated: Vec<usize> = (0..n).filter(|&i| a[i] == 1).collect();
    let pooled = normal_equations(&x.select_rows(&treated), &treated.iter().map(|&i| y[i]).collect::<Vec<_>>());
    let mut max_pair = 0.0f64;
    let mut max_pooled = 0.0f64;
    for i in 0..n {
        for k1 in 0..k {
            max_pooled = max_pooled.max((p.values()[(i, 2 * k1)] - eval_linear(&pooled, &x, i)).abs());
            for k2 in 0..k1 {
                max_pair = max_pair.max((p.values()[(i, 2 * k1)] - p.values()[(i, 2 * k2)]).abs());
            }
        }
    }
    assert!(max_pair < 0.5 && max_pooled < 0.3, "pairwise {max_pair}, pooled {max_pooled}");
}

#[test]
fn self_borrowed_external_fit_is_pooled_ols() {
    let mut g = rng(6);
    let t = random_trial(&mut g, 120, 1, 3, 5);
    let p = external_proxy(&t, t.x(), t.y(), &LearnerSpec::ols(), None).unwrap();
    let beta = normal_equations(t.x(), t.y());
    for i in 0..t.n() {
        assert!((p.values()[(i, 0)] - eval_linear(&beta, t.x(), i)).abs() < 1e-8);
    }
}

#[test]
fn power_transform_column() {
    let mut g = rng(7);
    let t = random_trial(&mut g, 40, 2, 1, 3);
    let x: Vec<f64> = (0..40).map(|i| (i as f64) * 3.5).collect();
    let t = t.with_data(t.y().to_vec(), DMatrix::from_column_slice(40, 1, &x), vec!["x".into()]).unwrap();
    let tr = carcal::proxy::PowerTransform {
        index: 0,
        exponent: 0.481,
        shift: 1.0,
    };
    let p = raw_covariate_proxy(&t, &[0], &[tr]).unwrap();
    for i in 0..40 {
        assert_eq!(p.values()[(i, 0)], x[i]);
        assert!((p.values()[(i, 1)] - (x[i] + 1.0).powf(0.481)).abs() < 1e-12);
    }
}

#[test]
fn aipw_with_cell_means_is_sdim() {
    let mut g = rng(8);
    let t = random_trial(&mut g, 150, 4, 1, 4);
    let stats = t.stratum_stats().unwrap();
    let h1: Vec<f64> = t.strata().iter().map(|&s| stats[s].ybar1).collect();
    let h0: Vec<f64> = t.strata().iter().map(|&s| stats[s].ybar0).collect();
    let rep = aipw_ate(&t, &h1, &h0, 0.95).unwrap();
    assert!((rep.tau_hat - sdim(&t).unwrap()).abs() < 1e-10);
}

fn fold_trials(t: &Trial, seed: u64) -> [Trial; 2] {
    let folds = cross_fit_split(t, 2, seed).unwrap();
    [0, 1].map(|f| t.subset(&(0..t.n()).filter(|&i| folds[i] == f).collect::<Vec<_>>()).unwrap())
}

#[test]
fn cross_fit_with_raw_proxy_averages_fold_estimates() {
    let mut g = rng(9);
    let t = random_trial(&mut g, 200, 3, 2, 6);
    let raw = |_: &Trial, eval: &Trial| raw_covariate_proxy(eval, &[0, 1], &[]);
    let cf = cross_fit_ate(&t, raw, Discrepancy::Quadratic, 17, 0.95).unwrap();
    let parts = fold_trials(&t, 17);
    let each: Vec<f64> = parts
        .iter()
        .map(|f| calibrate_ate(f, &raw_covariate_proxy(f, &[0, 1], &[]).unwrap(), Discrepancy::Quadratic, 0.95).unwrap().tau_hat)
        .collect();
    assert!((cf.tau_hat - 0.5 * (each[0] + each[1])).abs() < 1e-12);

    let constant = |_: &Trial, eval: &Trial| ProxyMatrix::from_columns(&[vec![1.0; eval.n()]], "const");
    let cf0 = cross_fit_ate(&t, constant, Discrepancy::Quadratic, 17, 0.95).unwrap();
    let sdims: Vec<f64> = parts.iter().map(|f| sdim(f).unwrap()).collect();
    assert!((cf0.tau_hat - 0.5 * (sdims[0] + sdims[1])).abs() < 1e-12);
}

#[test]
fn explained_part_vanishes_with_cell_constant_outcomes() {
    let mut g = rng(10);
    let t = random_trial(&mut g, 120, 3, 2, 5);
    let y: Vec<f64> = (0..t.n()).map(|i| t.strata()[i] as f64 + 2.0 * f64::from(t.a()[i])).collect();
    let t = t.with_outcomes(y).unwrap();
    let p = random_proxy(&mut g, t.n(), 2, 1.0);
    let vc = variance_components(&t, &p, &build_constraints(&t, &p).unwrap()).unwrap();
    assert_eq!(vc.var_explained, 0.0);
}

#[test]
fn constant_proxy_interval_is_sdim_interval() {
    let mut g = rng(11);
    let t = random_trial(&mut g, 120, 3, 1, 5);
    let cols = vec![t.strata().iter().map(|&s| 2.0 * s as f64).collect::<Vec<_>>()];
    let a = calibrate_ate(&t, &ProxyMatrix::from_columns(&cols, "c").unwrap(), Discrepancy::Quadratic, 0.9).unwrap();
    let b = sdim_ate(&t, 0.9).unwrap();
    assert_eq!((a.tau_hat, a.se, a.ci_low, a.ci_high), (b.tau_hat, b.se, b.ci_low, b.ci_high));
}

#[test]
fn insufficient_df_names_stratum() {
    let y = vec![1.0, 2.0, 3.0, 4.0, 1.0, 2.0, 5.0, 1.0, 2.0, 3.0];
    let a = vec![1, 0, 1, 0, 1, 0, 1, 0, 1, 0];
    let s = vec![0, 0, 0, 0, 0, 0, 0, 1, 1, 1];
    let t = Trial::new(y, a, s, DMatrix::from_row_slice(
        10,
        2,
        &[0., 1., 2., 0., 1., 3., 4., 1., 0., 2., 3., 3., 1., 1., 0., 0., 1., 0., 0., 1.],
    )).unwrap();
    let p = raw_covariate_proxy(&t, &[0, 1], &[]).unwrap();
    let err = calibrate_ate(&t, &p, Discrepancy::Quadratic, 0.95).unwrap_err();
    assert!(matches!(err, Error::InsufficientDf { ref stratum, .. } if stratum == "2"), "{err}");
}

#[test]
fn oracle_is_self_consistent() {
    let (a, se_a) = true_tau_oracle(1, 10_000_000, 1);
    let (b, se_b) = true_tau_oracle(1, 10_000_000, 2);
    assert!((a - b).abs() <= 3.0 * (se_a * se_a + se_b * se_b).sqrt(), "{a} vs {b}");
    let exact = model1_closed_form_tau();
    assert!((a - exact).abs() <= 3.0 * se_a, "{a} vs closed form {exact}");
}

#[test]
fn model3_errors_are_heavy_tailed() {
    let spec = ModelSpec::new(3, 100_000, DesignSpec::simple(1), 3);
    let draw = ModelSampler::new(&spec).unwrap().draw(0).unwrap();
    let e: Vec<f64> = draw.y0.iter().zip(&draw.g0).map(|(y, g)| y - g).collect();
    let n = e.len() as f64;
    let mean = e.iter().sum::<f64>() / n;
    let m2 = e.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let m4 = e.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / n;
    let kurtosis = m4 / (m2 * m2);
    // Under normal errors the sample kurtosis is 3 with SD about sqrt(24/n).
    assert!(kurtosis > 3.0 + 3.0 * (24.0 / n).sqrt(), "kurtosis {kurtosis}");
}

#[test]
fn minimization_balances_margins_better_than_simple() {
    let n = 2000;
    let reps = 200;
    let probs = [0.2, 0.3, 0.3, 0.2];
    let mut g: SimRng = rng(12);
    let (mut min_total, mut simple_total) = (0.0, 0.0);
    for r in 0..reps {
        let levels: Vec<usize> = (0..n)
            .map(|_| {
                let u: f64 = g.random();
                let mut acc = 0.0;
                probs.iter().position(|p| {
                    acc += p;
                    u < acc
                })
                .unwrap_or(3)
            })
            .collect();
        let rows: Vec<Vec<usize>> = levels.iter().map(|&l| vec![l]).collect();
        let m = minimization(&rows, &DesignSpec::minimization(r)).unwrap().arms;
        let s = simple_randomize(n, &DesignSpec::simple(r)).unwrap().arms;
        for lvl in 0..4 {
            let imbalance = |arms: &[u8]| {
                let n1 = (0..n).filter(|&i| levels[i] == lvl && arms[i] == 1).count() as f64;
                let n0 = (0..n).filter(|&i| levels[i] == lvl && arms[i] == 0).count() as f64;
                (n1 - n0).abs()
            };
            min_total += imbalance(&m);
            simple_total += imbalance(&s);
        }
    }
    let (min_mean, simple_mean) = (min_total / (4.0 * reps as f64), simple_total / (4.0 * reps as f64));
    assert!(min_mean < simple_mean, "minimization {min_mean} vs simple {simple_mean}");
}

#[test]
fn study_is_identical_across_thread_counts() {
    let spec = ModelSpec::new(2, 300, DesignSpec::minimization(4), 4);
    let est = [
        StandardEstimator::sdim(),
        StandardEstimator::cal("cal", "within:tree+raw:x1".parse().unwrap(), Discrepancy::ExpTilting),
    ];
    let refs: Vec<&dyn Estimator> = est.iter().map(|e| e as &dyn Estimator).collect();
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| run_study(&spec, 6, &refs).unwrap())
    };
    let one = run(1);
    assert_eq!(one, run(8));
    assert_eq!(one, run(1));
}

#[test]
fn data_file_round_trip_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.csv");
    std::fs::write(&path, "y,a,s,x\n0.1,1,M,1e-300\n0.30000000000000004,0,F,-2.5\n7,1,F,3\n").unwrap();
    let schema = CsvSchema::new("y", "a", "s", &["x"]);
    let t = load_trial(&path, &schema).unwrap();
    assert_eq!(t.stratum_names(), &["M".to_string(), "F".to_string()]);
    let out = dir.path().join("u.csv");
    write_trial(&t, &schema, &out).unwrap();
    assert_eq!(load_trial(&out, &schema).unwrap(), t);

    std::fs::write(&path, "y,a,s,x\n1,1,M,x\n").unwrap();
    let err = load_trial(&path, &schema).unwrap_err();
    assert!(matches!(err, Error::Parse { row: 1, ref column, .. } if column == "x"));
    std::fs::write(&path, "").unwrap();
    assert!(load_trial(&path, &schema).is_err());
    assert!(load_trial(dir.path().join("missing.csv"), &schema).is_err());
}
