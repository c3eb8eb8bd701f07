//! Command-line front end: `simulate`, `estimate` and `rho-check`.
//!
//! Settings resolve as built-in defaults, then an optional `--config` file
//! of `key = value` lines, then explicit flags. Every output file starts
//! with the resolved settings as `# config: key = value` lines, so an
//! output file is itself a valid config file.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::calibration::{rho_table_check, rho_table_reference, Discrepancy};
use crate::dataio::{load_external, load_trial, prune_strata, winsorize_trial, CsvSchema};
use crate::design::{DesignSpec, Scheme};
use crate::estimator::{calibrate_ate, cross_fit_ate, sdim_ate, AteReport};
use crate::learners::LearnerSpec;
use crate::recipe::ProxyRecipe;
use crate::simharness::{run_study, Estimator, ExternalSim, ModelSpec, StandardEstimator};

/// Tolerance used by `rho-check`.
pub const RHO_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "carcal", version, about = "Calibration estimators for covariate-adaptive randomized trials")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Monte Carlo study of one simulation model.
    Simulate(SimulateArgs),
    /// Estimate the ATE from a trial CSV.
    Estimate(EstimateArgs),
    /// Check the discrepancy functions' derivatives at zero.
    RhoCheck(RhoCheckArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// File of `key = value` lines; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub n: Option<String>,
    #[arg(long)]
    pub p: Option<String>,
    #[arg(long)]
    pub reps: Option<String>,
    /// simple, stratified-block or minimization.
    #[arg(long)]
    pub design: Option<String>,
    #[arg(long)]
    pub block: Option<String>,
    #[arg(long)]
    pub pi: Option<String>,
    #[arg(long = "biased-coin")]
    pub biased_coin: Option<String>,
    /// Proxy recipe for the calibration estimators.
    #[arg(long)]
    pub proxy: Option<String>,
    #[arg(long)]
    pub discrepancy: Option<String>,
    /// Comma list drawn from sdim, aipw, cal, cal-cf.
    #[arg(long)]
    pub estimators: Option<String>,
    #[arg(long = "aipw-learner")]
    pub aipw_learner: Option<String>,
    #[arg(long)]
    pub level: Option<String>,
    /// Size of the external sample generated per replication (0 = none).
    #[arg(long = "external-n")]
    pub external_n: Option<String>,
    #[arg(long = "external-shift")]
    pub external_shift: Option<String>,
    #[arg(long = "freeze-interactions", num_args = 0..=1, default_missing_value = "true")]
    pub freeze_interactions: Option<String>,
    #[arg(long)]
    pub seed: Option<String>,
    #[arg(long)]
    pub out: Option<String>,
    /// Worker threads (0 = all cores). Does not affect results.
    #[arg(long, env = "CARCAL_THREADS")]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<String>,
    #[arg(long)]
    pub outcome: Option<String>,
    #[arg(long)]
    pub arm: Option<String>,
    #[arg(long)]
    pub stratum: Option<String>,
    /// Comma list; defaults to every other column.
    #[arg(long)]
    pub covariates: Option<String>,
    /// Upper percentile in (0,1] applied to the outcome and the
    /// `winsorize-cols` covariates.
    #[arg(long)]
    pub winsorize: Option<String>,
    /// Comma list; defaults to every covariate.
    #[arg(long = "winsorize-cols")]
    pub winsorize_cols: Option<String>,
    /// Drop strata with fewer units than this.
    #[arg(long)]
    pub prune: Option<String>,
    #[arg(long)]
    pub proxy: Option<String>,
    /// External CSV for `external` proxy terms.
    #[arg(long)]
    pub external: Option<String>,
    #[arg(long = "external-outcome")]
    pub external_outcome: Option<String>,
    #[arg(long)]
    pub discrepancy: Option<String>,
    #[arg(long)]
    pub level: Option<String>,
    #[arg(long = "cross-fit", num_args = 0..=1, default_missing_value = "true")]
    pub cross_fit: Option<String>,
    #[arg(long)]
    pub seed: Option<String>,
    #[arg(long)]
    pub out: Option<String>,
    #[arg(long, env = "CARCAL_THREADS")]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct RhoCheckArgs {
    /// Print JSON instead of text.
    #[arg(long)]
    pub json: bool,
}

const SIMULATE_KEYS: &[(&str, &str)] = &[
    ("model", "1"),
    ("n", "1000"),
    ("p", "30"),
    ("reps", "300"),
    ("design", "stratified-block"),
    ("block", "6"),
    ("pi", "0.5"),
    ("biased-coin", "0.75"),
    ("proxy", "within:ols+raw:x1,x2,x3,x4"),
    ("discrepancy", "quadratic"),
    ("estimators", "sdim,aipw,cal"),
    ("aipw-learner", "ols"),
    ("level", "0.95"),
    ("external-n", "0"),
    ("external-shift", "0"),
    ("freeze-interactions", "false"),
    ("seed", "42"),
    ("out", "simulate.csv"),
];

const ESTIMATE_KEYS: &[(&str, &str)] = &[
    ("data", ""),
    ("outcome", "y"),
    ("arm", "a"),
    ("stratum", "stratum"),
    ("covariates", ""),
    ("winsorize", ""),
    ("winsorize-cols", ""),
    ("prune", ""),
    ("proxy", ""),
    ("external", ""),
    ("external-outcome", ""),
    ("discrepancy", "quadratic"),
    ("level", "0.95"),
    ("cross-fit", "false"),
    ("seed", "42"),
    ("out", "estimate.csv"),
];

/// Resolved `key = value` settings in a fixed key order.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    entries: Vec<(String, String)>,
}

impl RunConfig {
    fn defaults(keys: &[(&str, &str)]) -> Self {
        Self {
            entries: keys.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }

    fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let key = key.trim().replace('_', "-");
        match self.entries.iter_mut().find(|(k, _)| *k == key) {
            Some(e) => {
                e.1 = value.trim().to_string();
                Ok(())
            }
            None => Err(format!("unknown config key '{key}'")),
        }
    }

    /// Applies a config text. Blank lines and `#` comments are skipped.
    /// If any line starts with `# config:`, only those lines are read, so
    /// a previous run's output file can be passed back as a config.
    pub fn apply_text(&mut self, text: &str) -> Result<(), String> {
        let embedded = text.lines().any(|l| l.trim_start().starts_with("# config:"));
        for (no, raw) in text.lines().enumerate() {
            let mut line = raw.trim();
            if let Some(rest) = line.strip_prefix("# config:") {
                line = rest.trim();
            } else if embedded || line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("config line {}: expected 'key = value'", no + 1))?;
            self.set(k, v).map_err(|e| format!("config line {}: {e}", no + 1))?;
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .unwrap_or("")
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T, String>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.get(key);
        v.parse().map_err(|e| format!("invalid value '{v}' for '{key}': {e}"))
    }

    fn optional<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, String>
    where
        T::Err: std::fmt::Display,
    {
        if self.get(key).is_empty() {
            Ok(None)
        } else {
            self.parse(key).map(Some)
        }
    }

    fn required(&self, key: &str) -> Result<&str, String> {
        match self.get(key) {
            "" => Err(format!("missing required setting '{key}'")),
            v => Ok(v),
        }
    }

    fn list(&self, key: &str) -> Vec<String> {
        self.get(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .collect()
    }

    /// `# config: key = value` lines.
    pub fn header(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(s, "# config: {k} = {v}");
        }
        s
    }
}

fn resolve(keys: &[(&str, &str)], config: Option<&Path>, flags: &[(&str, &Option<String>)]) -> Result<RunConfig, String> {
    let mut cfg = RunConfig::defaults(keys);
    if let Some(path) = config {
        let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        cfg.apply_text(&text)?;
    }
    for (k, v) in flags {
        if let Some(v) = v {
            cfg.set(k, v)?;
        }
    }
    Ok(cfg)
}

fn parse_bool(cfg: &RunConfig, key: &str) -> Result<bool, String> {
    match cfg.get(key) {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" | "" => Ok(false),
        other => Err(format!("invalid value '{other}' for '{key}': expected true or false")),
    }
}

fn thread_pool(threads: usize) -> Result<rayon::ThreadPool, String> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| format!("cannot start worker threads: {e}"))
}

fn table_path(out: &Path) -> PathBuf {
    if out.extension().is_some_and(|e| e == "txt") {
        out.with_extension("table.txt")
    } else {
        out.with_extension("txt")
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), String> {
    std::fs::write(path, text).map_err(|e| format!("cannot write {}: {e}", path.display()))
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = match cli.command {
        Command::Simulate(a) => cmd_simulate(&a),
        Command::Estimate(a) => cmd_estimate(&a),
        Command::RhoCheck(a) => return cmd_rho_check(&a),
    };
    match result {
        Ok(()) => 0,
        Err(msg) => {
            eprintln!("error: {msg}");
            2
        }
    }
}

pub fn simulate_config(a: &SimulateArgs) -> Result<RunConfig, String> {
    resolve(
        SIMULATE_KEYS,
        a.config.as_deref(),
        &[
            ("model", &a.model),
            ("n", &a.n),
            ("p", &a.p),
            ("reps", &a.reps),
            ("design", &a.design),
            ("block", &a.block),
            ("pi", &a.pi),
            ("biased-coin", &a.biased_coin),
            ("proxy", &a.proxy),
            ("discrepancy", &a.discrepancy),
            ("estimators", &a.estimators),
            ("aipw-learner", &a.aipw_learner),
            ("level", &a.level),
            ("external-n", &a.external_n),
            ("external-shift", &a.external_shift),
            ("freeze-interactions", &a.freeze_interactions),
            ("seed", &a.seed),
            ("out", &a.out),
        ],
    )
}

fn cmd_simulate(a: &SimulateArgs) -> Result<(), String> {
    let cfg = simulate_config(a)?;
    let seed: u64 = cfg.parse("seed")?;
    let scheme: Scheme = cfg.parse("design")?;
    let mut design = DesignSpec::new(scheme, seed);
    design.block_size = cfg.parse("block")?;
    design.target_share = cfg.parse("pi")?;
    design.biased_coin = cfg.parse("biased-coin")?;
    let mut spec = ModelSpec::new(cfg.parse("model")?, cfg.parse("n")?, design, seed);
    spec.p = cfg.parse("p")?;
    spec.freeze_interactions = parse_bool(&cfg, "freeze-interactions")?;
    let external_n: usize = cfg.parse("external-n")?;
    if external_n > 0 {
        spec.external = Some(ExternalSim {
            n: external_n,
            shift: cfg.parse("external-shift")?,
            unrelated: false,
        });
    }
    spec.validate().map_err(|e| e.to_string())?;
    let reps: usize = cfg.parse("reps")?;
    let level: f64 = cfg.parse("level")?;
    let disc: Discrepancy = cfg.parse("discrepancy")?;
    let recipe: ProxyRecipe = cfg.parse("proxy")?;
    if recipe.needs_external() && spec.external.is_none() {
        return Err("proxy uses external data; set external-n".into());
    }
    let learner: LearnerSpec = cfg.parse("aipw-learner")?;
    let names = cfg.list("estimators");
    if names.is_empty() {
        return Err("no estimators configured".into());
    }
    let mut estimators = Vec::with_capacity(names.len());
    for name in &names {
        let mut e = match name.as_str() {
            "sdim" => StandardEstimator::sdim(),
            "aipw" => StandardEstimator::aipw("aipw", learner.clone()),
            "cal" => StandardEstimator::cal("cal", recipe.clone(), disc),
            "cal-cf" => StandardEstimator::cross_fit("cal-cf", recipe.clone(), disc),
            other => return Err(format!("unknown estimator '{other}'")),
        };
        e.level = level;
        estimators.push(e);
    }
    let out = PathBuf::from(cfg.required("out")?);
    let refs: Vec<&dyn Estimator> = estimators.iter().map(|e| e as &dyn Estimator).collect();
    let pool = thread_pool(a.threads.unwrap_or(0))?;
    let summary = pool.install(|| run_study(&spec, reps, &refs)).map_err(|e| e.to_string())?;

    let mut meta = cfg.header();
    let _ = writeln!(meta, "# true_tau = {}", summary.true_tau);
    for r in &summary.rows {
        if let Some(err) = &r.first_error {
            let _ = writeln!(meta, "# first failure of {}: {}", r.name, err.replace('\n', " "));
        }
    }
    let csv = summary.to_csv().map_err(|e| e.to_string())?;
    write_file(&out, &format!("{meta}{csv}"))?;
    let table = format!("{meta}{}", summary.to_table());
    write_file(&table_path(&out), &table)?;
    print!("{table}");
    Ok(())
}

pub fn estimate_config(a: &EstimateArgs) -> Result<RunConfig, String> {
    resolve(
        ESTIMATE_KEYS,
        a.config.as_deref(),
        &[
            ("data", &a.data),
            ("outcome", &a.outcome),
            ("arm", &a.arm),
            ("stratum", &a.stratum),
            ("covariates", &a.covariates),
            ("winsorize", &a.winsorize),
            ("winsorize-cols", &a.winsorize_cols),
            ("prune", &a.prune),
            ("proxy", &a.proxy),
            ("external", &a.external),
            ("external-outcome", &a.external_outcome),
            ("discrepancy", &a.discrepancy),
            ("level", &a.level),
            ("cross-fit", &a.cross_fit),
            ("seed", &a.seed),
            ("out", &a.out),
        ],
    )
}

fn csv_header(path: &str) -> Result<Vec<String>, String> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| format!("{path}: {e}"))?;
    let h = rdr.headers().map_err(|e| format!("{path}: {e}"))?;
    Ok(h.iter().map(|s| s.trim().to_string()).collect())
}

/// Column names of an [`AteReport`] row in `estimate` output.
pub const REPORT_COLUMNS: [&str; 17] = [
    "estimator",
    "tau_hat",
    "se",
    "ci_low",
    "ci_high",
    "var_h",
    "var_y",
    "var_explained",
    "n",
    "K",
    "d",
    "iterations",
    "residual",
    "converged",
    "all_weights_positive",
    "min_weight",
    "proxy",
];

fn proxy_description(r: &AteReport) -> String {
    r.proxy_labels
        .iter()
        .zip(r.external_columns.iter().chain(std::iter::repeat(&false)))
        .map(|(l, &ext)| if ext { format!("{l}[external]") } else { l.clone() })
        .collect::<Vec<_>>()
        .join(";")
}

fn report_record(r: &AteReport) -> Vec<String> {
    vec![
        r.method.clone(),
        r.tau_hat.to_string(),
        r.se.to_string(),
        r.ci_low.to_string(),
        r.ci_high.to_string(),
        r.var_h.to_string(),
        r.var_y.to_string(),
        r.var_explained.to_string(),
        r.n.to_string(),
        r.k.to_string(),
        r.d.to_string(),
        r.diagnostics.iterations.to_string(),
        r.diagnostics.residual.to_string(),
        r.diagnostics.converged.to_string(),
        r.diagnostics.all_weights_positive.to_string(),
        r.diagnostics.min_weight.to_string(),
        proxy_description(r),
    ]
}

fn report_table(reports: &[AteReport]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<8}  {:>12}  {:>10}  {:>12}  {:>12}  {:>6}  {:>4}  {:>3}  {:>5}  {:>9}  {:>9}",
        "method", "tau_hat", "SE", "CI low", "CI high", "n", "K", "d", "iter", "converged", "w > 0"
    );
    for r in reports {
        let _ = writeln!(
            s,
            "{:<8}  {:>12.5}  {:>10.5}  {:>12.5}  {:>12.5}  {:>6}  {:>4}  {:>3}  {:>5}  {:>9}  {:>9}",
            r.method,
            r.tau_hat,
            r.se,
            r.ci_low,
            r.ci_high,
            r.n,
            r.k,
            r.d,
            r.diagnostics.iterations,
            r.diagnostics.converged,
            r.diagnostics.all_weights_positive
        );
    }
    for r in reports.iter().filter(|r| !r.proxy_labels.is_empty()) {
        let _ = writeln!(s, "proxy ({}): {}", r.method, proxy_description(r));
    }
    s
}

fn cmd_estimate(a: &EstimateArgs) -> Result<(), String> {
    let cfg = estimate_config(a)?;
    let data = cfg.required("data")?.to_string();
    let recipe: ProxyRecipe = cfg.required("proxy")?.parse().map_err(|e| format!("invalid proxy: {e}"))?;
    let disc: Discrepancy = cfg.parse("discrepancy")?;
    let level: f64 = cfg.parse("level")?;
    let seed: u64 = cfg.parse("seed")?;
    let cross_fit = parse_bool(&cfg, "cross-fit")?;
    let winsor: Option<f64> = cfg.optional("winsorize")?;
    let prune: Option<usize> = cfg.optional("prune")?;
    let out = PathBuf::from(cfg.required("out")?);

    let (outcome, arm, stratum) = (cfg.get("outcome"), cfg.get("arm"), cfg.get("stratum"));
    let mut covariates = cfg.list("covariates");
    if covariates.is_empty() {
        covariates = csv_header(&data)?
            .into_iter()
            .filter(|h| h != outcome && h != arm && h != stratum)
            .collect();
    }
    let schema = CsvSchema {
        outcome_col: outcome.to_string(),
        arm_col: arm.to_string(),
        stratum_col: stratum.to_string(),
        covariate_cols: covariates.clone(),
    };
    let mut trial = load_trial(&data, &schema).map_err(|e| format!("{data}: {e}"))?;
    let mut meta = cfg.header();
    let _ = writeln!(meta, "# loaded: {} units in {} strata", trial.n(), trial.k());
    if let Some(pct) = winsor {
        let cols = match cfg.list("winsorize-cols") {
            c if c.is_empty() => (0..trial.p()).collect(),
            c => c
                .iter()
                .map(|name| {
                    covariates
                        .iter()
                        .position(|x| x == name)
                        .ok_or_else(|| format!("winsorize column '{name}' is not a covariate"))
                })
                .collect::<Result<Vec<_>, _>>()?,
        };
        trial = winsorize_trial(&trial, pct, &cols).map_err(|e| e.to_string())?;
    }
    if let Some(min) = prune {
        let (pruned, rep) = prune_strata(&trial, min).map_err(|e| e.to_string())?;
        let _ = writeln!(
            meta,
            "# pruned: removed {} units in {} strata; kept {} units in {} strata",
            rep.removed_units,
            rep.removed_strata.len(),
            rep.kept_units,
            rep.kept_strata
        );
        trial = pruned;
    }
    let external = match cfg.get("external") {
        "" => None,
        path => {
            let ext_outcome = match cfg.get("external-outcome") {
                "" => outcome,
                o => o,
            };
            Some(load_external(path, ext_outcome, &covariates).map_err(|e| format!("{path}: {e}"))?)
        }
    };
    if recipe.needs_external() && external.is_none() {
        return Err("proxy uses external data; pass --external".into());
    }

    let pool = thread_pool(a.threads.unwrap_or(0))?;
    let reports = pool.install(|| -> crate::error::Result<Vec<AteReport>> {
        let mut reports = vec![sdim_ate(&trial, level)?];
        let proxy = recipe.build(&trial, external.as_ref(), seed)?;
        reports.push(calibrate_ate(&trial, &proxy, disc, level)?);
        if cross_fit {
            reports.push(cross_fit_ate(
                &trial,
                |train, eval| recipe.build_at(train, eval, external.as_ref(), crate::rng::derive_seed(seed, 1)),
                disc,
                crate::rng::derive_seed(seed, 2),
                level,
            )?);
        }
        Ok(reports)
    });
    let reports = reports.map_err(|e| e.to_string())?;
    for r in &reports {
        for w in &r.warnings {
            let _ = writeln!(meta, "# warning ({}): {}", r.method, w.replace('\n', " "));
        }
    }

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(REPORT_COLUMNS).map_err(|e| e.to_string())?;
    for r in &reports {
        w.write_record(report_record(r)).map_err(|e| e.to_string())?;
    }
    let body = String::from_utf8(w.into_inner().map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    write_file(&out, &format!("{meta}{body}"))?;
    let table = format!("{meta}{}", report_table(&reports));
    write_file(&table_path(&out), &table)?;
    print!("{table}");
    Ok(())
}

#[derive(Debug, Serialize)]
struct RhoLine {
    discrepancy: &'static str,
    computed: [f64; 3],
    reference: [f64; 3],
    max_error: f64,
    pass: bool,
}

fn rho_lines() -> Vec<RhoLine> {
    Discrepancy::ALL
        .iter()
        .map(|&d| {
            let (a, b, c) = rho_table_check(d);
            let (ra, rb, rc) = rho_table_reference(d);
            let max_error = (a - ra).abs().max((b - rb).abs()).max((c - rc).abs());
            RhoLine {
                discrepancy: d.as_str(),
                computed: [a, b, c],
                reference: [ra, rb, rc],
                max_error,
                pass: max_error <= RHO_TOLERANCE,
            }
        })
        .collect()
}

fn cmd_rho_check(a: &RhoCheckArgs) -> i32 {
    let lines = rho_lines();
    if a.json {
        match serde_json::to_string_pretty(&lines) {
            Ok(s) => println!("{s}"),
            Err(e) => {
                eprintln!("error: {e}");
                return 2;
            }
        }
    } else {
        for l in &lines {
            println!(
                "{} {:<15} ({:.6}, {:.6}, {:.6})  reference ({}, {}, {})",
                if l.pass { "PASS" } else { "FAIL" },
                l.discrepancy,
                l.computed[0],
                l.computed[1],
                l.computed[2],
                l.reference[0],
                l.reference[1],
                l.reference[2]
            );
        }
    }
    if lines.iter().all(|l| l.pass) {
        0
    } else {
        1
    }
}
