//! Configuration, experiment orchestration and built-in verification.
//!
//! Configs are flat `key=value` text with `#` comments. Every omitted key
//! takes its default; unknown keys and bad values are reported together.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error as ThisError;

use crate::client::LocalConfig;
use crate::error::Error;
use crate::linalg::{self, ParamVector};
use crate::metrics::{self, MetricsRow};
use crate::objectives::{
    dirichlet_partition, finite_diff_grad, make_logistic_family, make_quadratic_family, make_worst_case_pair,
    AssumptionConstants, LinearFamily, LogisticParams, Objective,
};
use crate::rng::Streams;
use crate::server::{OptimizerKind, OptimizerName, ServerHyper};
use crate::sim::{self, Participation, RoundEvent, RunSummary, SimConfig};
use crate::theory::{self, BoundInputs};

/// One problem with a config file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigIssue {
    /// 1-based line, 0 when the issue is not tied to a line.
    pub line: usize,
    pub key: String,
    pub message: String,
}

impl fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.line > 0 {
            write!(f, "line {}: {}: {}", self.line, self.key, self.message)
        } else {
            write!(f, "{}: {}", self.key, self.message)
        }
    }
}

#[derive(Debug, ThisError)]
pub enum HarnessError {
    #[error("invalid config:\n{}", join_issues(.0))]
    Config(Vec<ConfigIssue>),
    #[error("verification failed: {0}")]
    Verify(String),
    #[error(transparent)]
    Core(#[from] Error),
}

fn join_issues(issues: &[ConfigIssue]) -> String {
    issues.iter().map(|i| format!("  {i}")).collect::<Vec<_>>().join("\n")
}

impl HarnessError {
    /// 1 for usage/config errors, 2 for failed verification, 3 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 1,
            HarnessError::Verify(_) => 2,
            HarnessError::Core(_) => 3,
        }
    }
}

pub type HarnessResult<T> = std::result::Result<T, HarnessError>;

#[derive(Debug, Clone, PartialEq)]
pub enum ObjectiveSpec {
    Quadratic {
        dim: usize,
        hetero: f64,
        noise_std: f64,
    },
    Logistic {
        dim: usize,
        sparsity: f64,
        rare_rate: f64,
        label_noise: f64,
        test_samples: usize,
    },
    WorstCase {
        g: f64,
    },
}

impl ObjectiveSpec {
    pub fn name(&self) -> &'static str {
        match self {
            ObjectiveSpec::Quadratic { .. } => "quadratic",
            ObjectiveSpec::Logistic { .. } => "logistic",
            ObjectiveSpec::WorstCase { .. } => "worstcase",
        }
    }
}

/// A fully resolved experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub sim: SimConfig,
    pub optimizer: OptimizerName,
    pub objective: ObjectiveSpec,
    /// Dirichlet concentration of label splits.
    pub alpha: f64,
    pub samples_per_client: usize,
    /// Label classes for `partition-stats` on non-dataset objectives.
    pub classes: usize,
    pub out: PathBuf,
}

pub const DEFAULT_ETA: f64 = 0.2;
pub const DEFAULT_EPS: f64 = 0.01;

const COMMON_KEYS: &[&str] = &[
    "n",
    "m",
    "rounds",
    "tau",
    "eta",
    "eta_l",
    "beta",
    "gamma",
    "eps",
    "optimizer",
    "k",
    "r",
    "batch",
    "fixed_k",
    "participation",
    "seed",
    "objective",
    "exclude",
    "parallel",
    "alpha",
    "samples_per_client",
    "classes",
    "out",
];
const QUADRATIC_KEYS: &[&str] = &["dim", "hetero", "noise_std"];
const LOGISTIC_KEYS: &[&str] = &["dim", "sparsity", "rare_rate", "label_noise", "test_samples"];
const WORST_CASE_KEYS: &[&str] = &["g"];

fn is_known(key: &str) -> bool {
    [COMMON_KEYS, QUADRATIC_KEYS, LOGISTIC_KEYS, WORST_CASE_KEYS]
        .iter()
        .any(|ks| ks.contains(&key))
}

struct Fields {
    values: BTreeMap<String, (usize, String)>,
    issues: Vec<ConfigIssue>,
}

impl Fields {
    fn issue(&mut self, line: usize, key: &str, message: impl Into<String>) {
        self.issues.push(ConfigIssue {
            line,
            key: key.to_string(),
            message: message.into(),
        });
    }

    fn line(&self, key: &str) -> usize {
        self.values.get(key).map_or(0, |v| v.0)
    }

    fn get<T: std::str::FromStr>(&mut self, key: &str, default: T) -> T
    where
        T::Err: fmt::Display,
    {
        let Some((line, raw)) = self.values.get(key).cloned() else {
            return default;
        };
        match raw.parse::<T>() {
            Ok(v) => v,
            Err(e) => {
                self.issue(line, key, format!("cannot parse {raw:?}: {e}"));
                default
            }
        }
    }

    fn check(&mut self, key: &str, ok: bool, message: &str) {
        if !ok {
            let line = self.line(key);
            self.issue(line, key, message);
        }
    }
}

/// Parses a config, applying `overrides` on top of the text.
pub fn parse_config_with(text: &str, overrides: &[(String, String)]) -> HarnessResult<RunSpec> {
    let mut f = Fields {
        values: BTreeMap::new(),
        issues: Vec::new(),
    };
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((k, v)) = content.split_once('=') else {
            f.issue(line, content, "expected key=value");
            continue;
        };
        let (k, v) = (k.trim(), v.trim());
        if !is_known(k) {
            f.issue(line, k, "unknown key");
        } else if let Some((first, _)) = f.values.get(k) {
            let msg = format!("duplicate key (first set on line {first})");
            f.issue(line, k, msg);
        } else {
            f.values.insert(k.to_string(), (line, v.to_string()));
        }
    }
    for (k, v) in overrides {
        if is_known(k) {
            f.values.insert(k.clone(), (0, v.clone()));
        } else {
            f.issue(0, k, "unknown key");
        }
    }

    let objective_name: String = f.get("objective", "quadratic".to_string());
    let own_keys: &[&str] = match objective_name.as_str() {
        "quadratic" => QUADRATIC_KEYS,
        "logistic" => LOGISTIC_KEYS,
        "worstcase" => WORST_CASE_KEYS,
        other => {
            let line = f.line("objective");
            f.issue(line, "objective", format!("unknown objective {other:?}"));
            &[]
        }
    };
    let foreign: Vec<(usize, String)> = f
        .values
        .iter()
        .filter(|(k, _)| !COMMON_KEYS.contains(&k.as_str()) && !own_keys.contains(&k.as_str()))
        .map(|(k, (line, _))| (*line, k.clone()))
        .collect();
    for (line, k) in foreign {
        f.issue(line, &k, format!("not used by objective {objective_name}"));
    }

    let worst = objective_name == "worstcase";
    let n: usize = f.get("n", if worst { 2 } else { 100 });
    let m: usize = f.get("m", if worst { 1 } else { 5 });
    let rounds: usize = f.get("rounds", 500);
    let tau: usize = f.get("tau", 5);
    let optimizer: OptimizerName = f.get("optimizer", OptimizerName::FedAms);
    let eta_default = if optimizer == OptimizerName::FedAvg {
        1.0
    } else {
        DEFAULT_ETA
    };
    let eta: f64 = f.get("eta", eta_default);
    let eta_l: f64 = f.get("eta_l", 0.01);
    let beta: f64 = f.get("beta", 0.9);
    let gamma: f64 = f.get("gamma", 0.99);
    let eps: f64 = f.get("eps", DEFAULT_EPS);
    let k_base: usize = f.get("k", 3);
    let r: usize = f.get("r", 2);
    let batch: usize = f.get("batch", 1);
    let fixed_k: bool = f.get("fixed_k", false);
    let participation_name: String = f.get("participation", "exact".to_string());
    let seed: u64 = f.get("seed", 0);
    let parallel: bool = f.get("parallel", false);
    let alpha: f64 = f.get("alpha", 0.5);
    let samples_per_client: usize = f.get("samples_per_client", 20);
    let classes: usize = f.get("classes", 10);
    let out: String = f.get("out", "out".to_string());
    let exclude_raw: String = f.get("exclude", String::new());

    let participation = match participation_name.as_str() {
        "exact" => Participation::ExactM,
        "bernoulli" => Participation::Bernoulli,
        other => {
            let line = f.line("participation");
            f.issue(
                line,
                "participation",
                format!("expected exact or bernoulli, got {other:?}"),
            );
            Participation::ExactM
        }
    };
    let mut excluded = BTreeSet::new();
    for part in exclude_raw.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.parse::<usize>() {
            Ok(c) if c < n => {
                excluded.insert(c);
            }
            Ok(c) => {
                let line = f.line("exclude");
                f.issue(line, "exclude", format!("client {c} out of range for n = {n}"));
            }
            Err(e) => {
                let line = f.line("exclude");
                f.issue(line, "exclude", format!("cannot parse {part:?}: {e}"));
            }
        }
    }

    f.check("n", n >= 1, "must be at least 1");
    f.check("m", m >= 1, "must be at least 1");
    f.check(
        "m",
        m > n || m == 0 || n - excluded.len() >= m,
        "exceeds the clients left after exclusion",
    );
    f.check("m", m <= n, "must not exceed n");
    f.check("rounds", rounds >= 1, "must be at least 1");
    f.check("eta", eta >= 0.0 && eta.is_finite(), "must be finite and nonnegative");
    f.check(
        "eta",
        optimizer != OptimizerName::FedAvg || eta == 1.0,
        "fedavg fixes eta = 1; use fedsgd to tune it",
    );
    f.check("eta_l", eta_l > 0.0 && eta_l.is_finite(), "must be positive");
    f.check("beta", (0.0..1.0).contains(&beta), "must lie in [0, 1)");
    f.check("gamma", (0.0..1.0).contains(&gamma), "must lie in [0, 1)");
    f.check("eps", eps > 0.0 && eps.is_finite(), "must be positive");
    f.check("k", k_base >= 1, "must be at least 1");
    f.check("r", r >= 1, "must be at least 1");
    f.check("batch", batch >= 1, "must be at least 1");
    f.check("alpha", alpha > 0.0 && alpha.is_finite(), "must be positive");
    f.check("samples_per_client", samples_per_client >= 1, "must be at least 1");
    f.check("classes", classes >= 1, "must be at least 1");

    let objective = match objective_name.as_str() {
        "logistic" => {
            let dim: usize = f.get("dim", 100);
            let sparsity: f64 = f.get("sparsity", 0.9);
            let rare_rate: f64 = f.get("rare_rate", 0.05);
            let label_noise: f64 = f.get("label_noise", 0.5);
            let test_samples: usize = f.get("test_samples", 1000);
            f.check("dim", dim >= 1, "must be at least 1");
            f.check("sparsity", (0.0..=1.0).contains(&sparsity), "must lie in [0, 1]");
            f.check("rare_rate", rare_rate > 0.0 && rare_rate <= 1.0, "must lie in (0, 1]");
            f.check(
                "label_noise",
                label_noise >= 0.0 && label_noise.is_finite(),
                "must be nonnegative",
            );
            f.check("test_samples", test_samples >= 1, "must be at least 1");
            ObjectiveSpec::Logistic {
                dim,
                sparsity,
                rare_rate,
                label_noise,
                test_samples,
            }
        }
        "worstcase" => {
            let g: f64 = f.get("g", 1.0);
            f.check("g", g > 0.0 && g.is_finite(), "must be positive");
            f.check("n", n == 2, "worstcase has exactly 2 clients");
            ObjectiveSpec::WorstCase { g }
        }
        _ => {
            let dim: usize = f.get("dim", 20);
            let hetero: f64 = f.get("hetero", 0.5);
            let noise_std: f64 = f.get("noise_std", 0.1);
            f.check("dim", dim >= 1, "must be at least 1");
            f.check("hetero", hetero >= 0.0 && hetero.is_finite(), "must be nonnegative");
            f.check(
                "noise_std",
                noise_std >= 0.0 && noise_std.is_finite(),
                "must be nonnegative",
            );
            ObjectiveSpec::Quadratic { dim, hetero, noise_std }
        }
    };

    if !f.issues.is_empty() {
        f.issues.sort_by(|a, b| (a.line, &a.key).cmp(&(b.line, &b.key)));
        return Err(HarnessError::Config(f.issues));
    }
    Ok(RunSpec {
        sim: SimConfig {
            n,
            m,
            rounds,
            tau,
            hyper: ServerHyper {
                eta,
                beta,
                gamma,
                eps,
                kind: optimizer.kind(),
            },
            local: LocalConfig {
                eta_l,
                k_base,
                r,
                batch,
            },
            participation,
            seed,
            fixed_k,
            excluded,
            parallel,
            x0: None,
        },
        optimizer,
        objective,
        alpha,
        samples_per_client,
        classes,
        out: PathBuf::from(out),
    })
}

pub fn parse_config(text: &str) -> HarnessResult<RunSpec> {
    parse_config_with(text, &[])
}

/// Builds the objective for `spec` with data drawn from `seed`.
pub fn build_objective(spec: &RunSpec, seed: u64) -> HarnessResult<Box<dyn Objective>> {
    let n = spec.sim.n;
    Ok(match &spec.objective {
        ObjectiveSpec::Quadratic { dim, hetero, noise_std } => {
            Box::new(make_quadratic_family(n, *dim, *hetero, *noise_std, seed)?)
        }
        ObjectiveSpec::Logistic {
            dim,
            sparsity,
            rare_rate,
            label_noise,
            test_samples,
        } => Box::new(make_logistic_family(&LogisticParams {
            n,
            d: *dim,
            samples_per_client: spec.samples_per_client,
            sparsity: *sparsity,
            rare_rate: *rare_rate,
            alpha: spec.alpha,
            label_noise: *label_noise,
            test_samples: *test_samples,
            seed,
        })?),
        ObjectiveSpec::WorstCase { g } => Box::new(make_worst_case_pair(*g)?),
    })
}

fn metadata(spec: &RunSpec, seed: u64, seeds: &[u64]) -> String {
    let s = &spec.sim;
    let seed_list: Vec<String> = seeds.iter().map(u64::to_string).collect();
    format!(
        "seed={seed} seeds={} objective={} optimizer={} n={} m={} rounds={} tau={} eta={} eta_l={} beta={} gamma={} eps={} k={} r={}",
        seed_list.join(","),
        spec.objective.name(),
        spec.optimizer,
        s.n,
        s.m,
        s.rounds,
        s.tau,
        s.hyper.eta,
        s.local.eta_l,
        s.hyper.beta,
        s.hyper.gamma,
        s.hyper.eps,
        s.local.k_base,
        s.local.r
    )
}

/// One seeded run.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub rows: Vec<MetricsRow>,
    pub summary: RunSummary,
    pub comments: Vec<String>,
}

/// Runs `spec` under seeds `seed, seed+1, …`; data and sampling both follow the seed.
pub fn run_seeds(spec: &RunSpec, seeds: usize) -> HarnessResult<Vec<SeedRun>> {
    let list: Vec<u64> = (0..seeds.max(1) as u64)
        .map(|i| spec.sim.seed.wrapping_add(i))
        .collect();
    list.iter()
        .map(|&seed| {
            let family = build_objective(spec, seed)?;
            let mut cfg = spec.sim.clone();
            cfg.seed = seed;
            let result = sim::run(&cfg, &*family)?;
            let mut comments = vec![metadata(spec, seed, &list)];
            if let Some(l) = family.smoothness() {
                let h = theory::check_h_condition(
                    cfg.hyper.eta.max(f64::MIN_POSITIVE),
                    cfg.local.eta_l,
                    l,
                    cfg.tau,
                    cfg.hyper.beta,
                    cfg.hyper.eps,
                    result.summary.max_grad_norm,
                )?;
                comments.push(format!("h_condition holds={} slack={}", h.holds, h.slack));
            }
            Ok(SeedRun {
                seed,
                rows: result.rows,
                summary: result.summary,
                comments,
            })
        })
        .collect()
}

fn write_runs(runs: &[SeedRun], dir: &Path, stem: &str) -> HarnessResult<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for r in runs {
        let name = if runs.len() == 1 {
            format!("{stem}.csv")
        } else {
            format!("{stem}.seed{}.csv", r.seed)
        };
        let path = dir.join(name);
        metrics::write_csv_with_comments(&r.rows, &r.comments, &path)?;
        files.push(path);
    }
    Ok(files)
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, c) = v.fold((0.0, 0usize), |(s, c), x| (s + x, c + 1));
    s / c.max(1) as f64
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub files: Vec<PathBuf>,
    pub runs: Vec<SeedRun>,
}

impl RunReport {
    pub fn mean_avg_grad_norm_sq(&self) -> f64 {
        mean(self.runs.iter().map(|r| r.summary.avg_grad_norm_sq))
    }
}

impl fmt::Display for RunReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:>8} {:>16} {:>16} {:>12}",
            "seed", "avg_grad_norm_sq", "final_loss", "test_metric"
        )?;
        for r in &self.runs {
            let tm = r
                .rows
                .last()
                .and_then(|x| x.test_metric)
                .map_or("-".into(), |v| format!("{v:.4}"));
            writeln!(
                f,
                "{:>8} {:>16.6e} {:>16.6e} {:>12}",
                r.seed, r.summary.avg_grad_norm_sq, r.summary.final_train_loss, tm
            )?;
        }
        for p in &self.files {
            writeln!(f, "wrote {}", p.display())?;
        }
        Ok(())
    }
}

pub fn cmd_run(spec: &RunSpec, seeds: usize) -> HarnessResult<RunReport> {
    let runs = run_seeds(spec, seeds)?;
    let files = write_runs(&runs, &spec.out, "run")?;
    Ok(RunReport { files, runs })
}

/// `10^{-3}, 10^{-2.5}, …, 10^1`.
pub fn default_eta_grid() -> Vec<f64> {
    (0..9).map(|i| 10f64.powf(-3.0 + 0.5 * i as f64)).collect()
}

#[derive(Debug, Clone)]
pub struct SweepCell {
    pub value: String,
    pub report: RunReport,
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    pub axis: String,
    pub cells: Vec<SweepCell>,
}

impl fmt::Display for SweepReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>24} {:>16} {:>16}", self.axis, "avg_grad_norm_sq", "final_loss")?;
        for c in &self.cells {
            writeln!(
                f,
                "{:>24} {:>16.6e} {:>16.6e}",
                c.value,
                c.report.mean_avg_grad_norm_sq(),
                mean(c.report.runs.iter().map(|r| r.summary.final_train_loss))
            )?;
        }
        Ok(())
    }
}

/// Runs one cell per value of `axis`, writing `<axis>=<value>.csv` into the
/// output directory. `values` defaults to the half-decade grid when the axis
/// is `eta`. Cells run on `workers` threads.
pub fn cmd_sweep(
    config_text: &str,
    base_overrides: &[(String, String)],
    axis: &str,
    values: Option<Vec<String>>,
    seeds: usize,
    workers: usize,
) -> HarnessResult<SweepReport> {
    let values = match values {
        Some(v) if !v.is_empty() => v,
        _ if axis == "eta" => default_eta_grid().iter().map(f64::to_string).collect(),
        _ => {
            return Err(HarnessError::Config(vec![ConfigIssue {
                line: 0,
                key: axis.to_string(),
                message: "sweep values are required for this axis".into(),
            }]))
        }
    };
    let specs: Vec<(String, RunSpec)> = values
        .iter()
        .map(|v| {
            let mut o = base_overrides.to_vec();
            o.push((axis.to_string(), v.clone()));
            parse_config_with(config_text, &o).map(|s| (v.clone(), s))
        })
        .collect::<HarnessResult<_>>()?;
    let one = |(value, spec): &(String, RunSpec)| -> HarnessResult<SweepCell> {
        let runs = run_seeds(spec, seeds)?;
        let files = write_runs(&runs, &spec.out, &format!("{axis}={value}"))?;
        Ok(SweepCell {
            value: value.clone(),
            report: RunReport { files, runs },
        })
    };
    let cells = if workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::invalid(e.to_string()))?;
        pool.install(|| specs.par_iter().map(one).collect::<HarnessResult<Vec<_>>>())?
    } else {
        specs.iter().map(one).collect::<HarnessResult<Vec<_>>>()?
    };
    Ok(SweepReport {
        axis: axis.to_string(),
        cells,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(
                f,
                "{} {:<22} {}",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.detail
            )?;
        }
        Ok(())
    }
}

fn base_config(n: usize, m: usize, rounds: usize, tau: usize, kind: OptimizerKind, eta: f64) -> SimConfig {
    SimConfig {
        n,
        m,
        rounds,
        tau,
        hyper: ServerHyper {
            eta,
            beta: 0.9,
            gamma: 0.99,
            eps: DEFAULT_EPS,
            kind,
        },
        local: LocalConfig::default(),
        participation: Participation::ExactM,
        seed: 0,
        fixed_k: false,
        excluded: BTreeSet::new(),
        parallel: false,
        x0: None,
    }
}

/// Straight-line synchronous local-SGD averaging, sharing the simulator's
/// random streams. Returns `x_1, …, x_T`.
fn synchronous_reference<F: Objective + ?Sized>(cfg: &SimConfig, family: &F) -> crate::Result<Vec<Vec<f64>>> {
    let streams = Streams::new(cfg.seed);
    let k = cfg.local.k_base;
    let mut x = vec![0.0; family.dim()];
    let mut out = Vec::with_capacity(cfg.rounds);
    for t in 0..cfg.rounds {
        let mut sched = streams.scheduler(t);
        let clients = sim::sample_participants(cfg.n, cfg.m, Participation::ExactM, &mut sched)?;
        for _ in &clients {
            sim::sample_delay(t, 0, &mut sched);
        }
        let mut sum = vec![0.0; x.len()];
        for &c in &clients {
            let mut rng = streams.client(c, t);
            let mut xi = ParamVector::new(x.clone())?;
            for _ in 0..k {
                let g = family.stochastic_grad(c, &xi, cfg.local.batch, &mut rng)?;
                xi = linalg::axpy(-cfg.local.eta_l, &g, &xi)?;
            }
            for j in 0..x.len() {
                sum[j] += (x[j] - xi[j]) / k as f64;
            }
        }
        for j in 0..x.len() {
            x[j] -= sum[j] / clients.len() as f64;
        }
        out.push(x.clone());
    }
    Ok(out)
}

fn check_reduction() -> crate::Result<Check> {
    let fam = make_quadratic_family(10, 5, 0.5, 0.1, 3)?;
    let mut cfg = base_config(10, 3, 100, 0, OptimizerKind::Sgd, 1.0);
    cfg.hyper.beta = 0.0;
    cfg.fixed_k = true;
    let mut traj = Vec::new();
    sim::run_observed(&cfg, &fam, &mut |e: &RoundEvent<'_>| traj.push(e.after.x.clone()))?;
    let reference = synchronous_reference(&cfg, &fam)?;
    let dev = traj
        .iter()
        .zip(&reference)
        .flat_map(|(a, b)| a.iter().zip(b).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max);
    Ok(Check {
        name: "fedavg-reduction",
        passed: dev <= 1e-12,
        detail: format!("max deviation {dev:.3e} over 100 rounds"),
    })
}

fn check_monotone() -> crate::Result<Check> {
    let fam = make_quadratic_family(20, 8, 0.5, 0.1, 1)?;
    let mut violations = 0usize;
    for kind in [OptimizerKind::Adagrad, OptimizerKind::Ams] {
        let cfg = base_config(20, 5, 200, 5, kind, DEFAULT_ETA);
        sim::run_observed(&cfg, &fam, &mut |e: &RoundEvent<'_>| {
            violations += e
                .before
                .v_hat
                .iter()
                .zip(e.after.v_hat.iter())
                .filter(|(a, b)| b < a)
                .count();
        })?;
    }
    Ok(Check {
        name: "second-moment-monotone",
        passed: violations == 0,
        detail: format!("{violations} decreasing coordinates"),
    })
}

fn check_worst_case() -> crate::Result<Check> {
    let fam = make_worst_case_pair(1.0)?;
    let mut cfg = base_config(2, 1, 2000, 5, OptimizerKind::Sgd, 1.0);
    cfg.excluded = BTreeSet::from([0]);
    let r = sim::run(&cfg, &fam)?;
    let x = r.final_state.x[0];
    let g2 = r.summary.final_grad_norm_sq;
    Ok(Check {
        name: "worst-case-floor",
        passed: (x - 1.0).abs() <= 1e-3 && (3.99..=4.01).contains(&g2),
        detail: format!("x_T = {x:.6}, grad_norm_sq = {g2:.6}"),
    })
}

/// Largest relative error of the analytic gradient against central
/// differences over `points` random points per client.
pub fn gradient_check<F: Objective + ?Sized>(family: &F, points: usize, scale: f64, seed: u64) -> crate::Result<f64> {
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = Streams::new(seed).named("gradient-check", 0);
    let mut worst: f64 = 0.0;
    for _ in 0..points {
        let x: Vec<f64> = (0..family.dim())
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                scale * z
            })
            .collect();
        let x = ParamVector::new(x)?;
        for c in 0..family.num_clients() {
            let exact = family.full_grad(c, &x)?;
            let fd = finite_diff_grad(family, c, &x, 1e-5)?;
            let err = linalg::l2_norm(&linalg::sub(&exact, &fd)?) / linalg::l2_norm(&exact).max(1e-12);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn check_gradients() -> crate::Result<Check> {
    let quad = make_quadratic_family(4, 6, 0.5, 0.1, 2)?;
    let logi = make_logistic_family(&LogisticParams {
        n: 4,
        d: 15,
        samples_per_client: 12,
        test_samples: 10,
        ..LogisticParams::default()
    })?;
    let worst = make_worst_case_pair(1.0)?;
    let slopes: Vec<ParamVector> = (0..3)
        .map(|i| ParamVector::new(vec![1.0 + i as f64, -0.5, 0.25 * i as f64]))
        .collect::<crate::Result<_>>()?;
    let lin = LinearFamily::new(slopes)?;
    let errs = [
        ("quadratic", gradient_check(&quad, 10, 1.0, 1)?),
        ("logistic", gradient_check(&logi, 10, 0.5, 2)?),
        ("worstcase", gradient_check(&worst, 10, 2.0, 3)?),
        ("linear", gradient_check(&lin, 10, 1.0, 4)?),
    ];
    let max = errs.iter().map(|e| e.1).fold(0.0, f64::max);
    let detail = errs
        .iter()
        .map(|(n, e)| format!("{n}={e:.1e}"))
        .collect::<Vec<_>>()
        .join(" ");
    Ok(Check {
        name: "finite-differences",
        passed: max <= 1e-5,
        detail,
    })
}

fn check_determinism() -> crate::Result<Check> {
    let fam = make_quadratic_family(12, 4, 0.5, 0.2, 5)?;
    let mut cfg = base_config(12, 4, 60, 3, OptimizerKind::Ams, DEFAULT_ETA);
    cfg.seed = 42;
    let a = metrics::to_csv_string(&sim::run(&cfg, &fam)?.rows, &[]);
    cfg.parallel = true;
    let b = metrics::to_csv_string(&sim::run(&cfg, &fam)?.rows, &[]);
    Ok(Check {
        name: "determinism",
        passed: a == b,
        detail: format!("{} bytes compared", a.len()),
    })
}

type Scenario = fn() -> crate::Result<Check>;

/// Runs the built-in scenarios. Errors inside a scenario count as failures.
pub fn cmd_verify() -> VerifyReport {
    let scenarios: [(&'static str, Scenario); 5] = [
        ("fedavg-reduction", check_reduction),
        ("second-moment-monotone", check_monotone),
        ("worst-case-floor", check_worst_case),
        ("finite-differences", check_gradients),
        ("determinism", check_determinism),
    ];
    let checks = scenarios
        .iter()
        .map(|(name, f)| {
            f().unwrap_or_else(|e| Check {
                name,
                passed: false,
                detail: e.to_string(),
            })
        })
        .collect();
    VerifyReport { checks }
}

/// Runs `spec` once and evaluates every theory quantity with constants
/// measured on that run. Returns the printed table.
pub fn cmd_bound(spec: &RunSpec) -> HarnessResult<String> {
    let family = build_objective(spec, spec.sim.seed)?;
    let cfg = &spec.sim;
    let result = sim::run(cfg, &*family)?;
    let x0 = ParamVector::zeros(family.dim());
    let mut rng = Streams::new(cfg.seed).named("bound", 0);
    let consts = AssumptionConstants::measure(
        &*family,
        &[x0.clone(), result.final_state.x.clone()],
        result.summary.max_grad_norm,
        50,
        &mut rng,
    )?;
    // Losses are nonnegative, so f(x0) bounds the gap when f* is unknown.
    let gap = family.global_value(&x0)? - family.min_value().unwrap_or(0.0);
    let max_steps = (0..family.num_clients())
        .map(|c| family.steps_per_epoch(c, cfg.local.batch))
        .max()
        .unwrap_or(1)
        * cfg.local.max_epochs();
    let eta = cfg.hyper.eta;
    let mut t = String::new();
    let mut row = |name: &str, v: String| {
        let _ = writeln!(t, "{name:<28} {v}");
    };
    row("L", consts.l.to_string());
    row("G (observed)", consts.g.to_string());
    row("sigma_g^2", consts.sigma_g_sq.to_string());
    row("sigma_l^2", consts.sigma_l_sq.to_string());
    row("f(x0) - f*", gap.to_string());
    row("K_max (steps)", max_steps.to_string());
    match theory::lr_upper_bound(
        consts.l.max(f64::MIN_POSITIVE),
        max_steps,
        cfg.tau,
        cfg.hyper.eps,
        consts.g.max(f64::MIN_POSITIVE),
        cfg.rounds,
    ) {
        Ok(b) => {
            row("eta_l upper bound", b.to_string());
            row("eta_l within bound", (cfg.local.eta_l <= b).to_string());
        }
        Err(e) => row("eta_l upper bound", format!("n/a ({e})")),
    }
    if eta > 0.0 {
        let h = theory::check_h_condition(
            eta,
            cfg.local.eta_l,
            consts.l,
            cfg.tau,
            cfg.hyper.beta,
            cfg.hyper.eps,
            consts.g,
        )?;
        row("H1", h.h1.to_string());
        row("H2", h.h2.to_string());
        row("H condition holds", h.holds.to_string());
        row("H condition slack", h.slack.to_string());
        let b = theory::bound_terms(
            &BoundInputs {
                d: family.dim(),
                eta,
                eta_l: cfg.local.eta_l,
                beta: cfg.hyper.beta,
                eps: cfg.hyper.eps,
                m: cfg.m,
                tau: cfg.tau,
                rounds: cfg.rounds,
                phi1: result.summary.phi1,
                phi2: result.summary.phi2,
                phi3: result.summary.phi3,
                gap: gap.max(0.0),
            },
            &consts,
        )?;
        row("C_beta", b.c_beta.to_string());
        row("phi1", b.phi1.to_string());
        row("phi2", b.phi2.to_string());
        row("phi3", b.phi3.to_string());
        row("Phi", b.phi.to_string());
        row("Phi_g", b.phi_g.to_string());
        row("Phi_l", b.phi_l.to_string());
        row("bound (rhs)", b.rhs.to_string());
    }
    row("observed avg grad_norm_sq", result.summary.avg_grad_norm_sq.to_string());
    let env = theory::rate_envelope(cfg.m, cfg.local.k_base, cfg.rounds, cfg.tau);
    row("rate sqrt(1/(mKT))", env.speedup.to_string());
    row("rate K^2/T", env.local.to_string());
    row("rate tau^2/T", env.delay.to_string());
    row("delay-free regime", env.regime.to_string());
    Ok(t)
}

#[derive(Debug, Clone)]
pub struct PartitionReport {
    pub path: PathBuf,
    pub max_label_deviation: f64,
    pub dominant_label_share: f64,
}

impl fmt::Display for PartitionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "max_label_deviation  {}", self.max_label_deviation)?;
        writeln!(f, "dominant_label_share {}", self.dominant_label_share)?;
        writeln!(f, "wrote {}", self.path.display())
    }
}

/// Writes the client/class count table. The logistic objective reports its
/// own split; other objectives split a balanced synthetic label set of
/// `n · samples_per_client` samples over `classes` classes.
pub fn cmd_partition_stats(spec: &RunSpec) -> HarnessResult<PartitionReport> {
    let part = match &spec.objective {
        ObjectiveSpec::Logistic {
            dim,
            sparsity,
            rare_rate,
            label_noise,
            test_samples,
        } => make_logistic_family(&LogisticParams {
            n: spec.sim.n,
            d: *dim,
            samples_per_client: spec.samples_per_client,
            sparsity: *sparsity,
            rare_rate: *rare_rate,
            alpha: spec.alpha,
            label_noise: *label_noise,
            test_samples: *test_samples,
            seed: spec.sim.seed,
        })?
        .partition()
        .clone(),
        _ => {
            let total = spec.sim.n * spec.samples_per_client;
            let labels: Vec<usize> = (0..total.max(spec.classes)).map(|i| i % spec.classes).collect();
            dirichlet_partition(&labels, spec.sim.n, spec.alpha, spec.sim.seed)?
        }
    };
    std::fs::create_dir_all(&spec.out).map_err(|e| Error::io(&spec.out, e))?;
    let path = spec.out.join("partition.csv");
    part.write_csv(&path)?;
    Ok(PartitionReport {
        path,
        max_label_deviation: part.max_label_deviation(),
        dominant_label_share: part.dominant_label_share(),
    })
}
