//! `postbc`: runs the named experiments and writes self-describing run
//! directories.
//!
//! Exit status: 0 success, 1 runtime failure or (with `--check`) a failed
//! acceptance threshold, 2 usage error, 3 invalid config.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use postbc::experiments::*;
use postbc::report::{to_csv, CsvRow, MetricRow};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use config::{load_file, parse_override, resolve, set_path, split_file, ConfigError};

const OUT_ENV: &str = "POSTBC_OUT";

#[derive(Parser)]
#[command(name = "postbc", version, about = "Posterior behavioral cloning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
struct Common {
    /// JSON config file; a previous run's metadata.json also works.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key by dot path, e.g. `--set train.epochs=500`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Sets `seed`, or `seeds` to this single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads. Results do not depend on it.
    #[arg(long)]
    workers: Option<usize>,
    /// Run directory. Defaults to `$POSTBC_OUT/<command>-<config hash>`,
    /// with `POSTBC_OUT` defaulting to `runs`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Exit with status 1 when an acceptance threshold fails.
    #[arg(long)]
    check: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Construction {
    Prop1,
    Prop2,
    Thm2,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Demonstrator {
    Dirichlet,
    EpsOptimal,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Env {
    Fork,
    Reacher,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Method {
    Bc,
    SigmaBc,
    Postbc,
}

#[derive(Subcommand)]
enum Command {
    /// Random-MDP suite comparing tabular estimators across dataset sizes.
    TabularBench {
        #[command(flatten)]
        common: Common,
        /// Dataset sizes, comma separated.
        #[arg(long = "T", value_delimiter = ',')]
        t: Option<Vec<usize>>,
        /// Random MDP draws per dataset size.
        #[arg(long, alias = "trials")]
        draws: Option<usize>,
        /// Demonstrator family for each random MDP.
        #[arg(long, value_enum)]
        demonstrator: Option<Demonstrator>,
        /// Uniform weight of the eps-optimal demonstrator.
        #[arg(long)]
        epsilon: Option<f64>,
    },
    /// The explicit constructions: prop1, prop2 or thm2.
    Counterexample {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        name: Construction,
        /// Rare-arm parameter (prop1 only).
        #[arg(long)]
        epsilon: Option<f64>,
        /// Dataset size.
        #[arg(long = "T")]
        t: Option<usize>,
        /// Independent dataset draws.
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Moments of the Gaussian posterior samplers against the closed form.
    GaussianCheck {
        #[command(flatten)]
        common: Common,
        /// Posterior samples per sampler.
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Ensemble covariance calibration against the closed-form posterior.
    EnsembleCheck {
        #[command(flatten)]
        common: Common,
        /// Number of observations.
        #[arg(long = "T")]
        t: Option<usize>,
        /// Ensemble size.
        #[arg(long = "K")]
        k: Option<usize>,
    },
    /// Collect demonstrations and train one generative policy.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Environment to collect demonstrations in.
        #[arg(long, value_enum)]
        env: Option<Env>,
        /// Training objective.
        #[arg(long, value_enum)]
        method: Option<Method>,
        /// Number of demonstrations.
        #[arg(long = "T")]
        t: Option<usize>,
        /// PostBC noise scale.
        #[arg(long)]
        alpha: Option<f64>,
        /// Training epochs.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Best-of-N finetuning of BC and PostBC on the fork task.
    FinetuneBon {
        #[command(flatten)]
        common: Common,
        /// Candidate actions per Best-of-N step.
        #[arg(long = "N")]
        n: Option<usize>,
        /// Online rollouts used to fit Q.
        #[arg(long = "T-on")]
        t_on: Option<usize>,
        /// Evaluation episodes.
        #[arg(long)]
        episodes: Option<usize>,
        /// Seeds, comma separated.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Training epochs.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Covariance field and BC / PostBC action samples on the fork fixture.
    Fig1Demo {
        #[command(flatten)]
        common: Common,
        /// Action samples per state and method.
        #[arg(long)]
        samples: Option<usize>,
        /// Seeds, comma separated.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Training epochs.
        #[arg(long)]
        epochs: Option<usize>,
    },
}

enum Failure {
    Config(String),
    Runtime(anyhow::Error),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.0)
    }
}

impl From<postbc::Error> for Failure {
    fn from(e: postbc::Error) -> Self {
        use postbc::Error as E;
        match e {
            E::InvalidParameter(_) | E::DimensionMismatch(_) | E::UnknownEstimator(_) => Failure::Config(e.to_string()),
            other => Failure::Runtime(other.into()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

/// Everything a run produces, held in memory until it has succeeded.
struct Output {
    files: Vec<(String, String)>,
    passed: bool,
    summary: Vec<String>,
}

impl Output {
    fn new() -> Self {
        Self { files: Vec::new(), passed: true, summary: Vec::new() }
    }

    fn csv<T: CsvRow>(&mut self, name: &str, rows: &[T]) {
        self.files.push((name.to_string(), to_csv(rows)));
    }

    fn checks(&mut self, name: &str, rows: &[MetricRow]) {
        self.passed &= all_passed(rows);
        for r in rows.iter().filter(|r| r.passed.is_some()) {
            self.summary.push(format!(
                "{} {}: {} (threshold {})",
                if r.passed == Some(true) { "PASS" } else { "FAIL" },
                r.metric,
                r.value,
                r.threshold.unwrap_or(f64::NAN)
            ));
        }
        self.csv(name, rows);
    }
}

/// Config layers and run plumbing shared by all subcommands.
struct Plan {
    command: &'static str,
    common: Common,
    flags: Vec<(String, Value)>,
}

impl Plan {
    fn new(command: &'static str, common: Common) -> Self {
        Self { command, common, flags: Vec::new() }
    }

    fn flag<V: Serialize>(mut self, key: &str, value: Option<V>) -> Self {
        if let Some(v) = value {
            self.flags.push((key.to_string(), serde_json::to_value(v).expect("flag values serialize")));
        }
        self
    }

    /// Resolves the typed config and the worker count.
    fn resolve<T: Serialize + DeserializeOwned + Default>(&self) -> Result<(T, Value, Option<usize>), Failure> {
        let mut layers = Vec::new();
        let mut workers = None;
        if let Some(path) = &self.common.config {
            let (cfg, w) = split_file(load_file(path)?);
            layers.push(cfg);
            workers = w;
        }
        let mut overrides = json!({});
        for s in &self.common.set {
            let (k, v) = parse_override(s)?;
            if k == "workers" {
                workers = Some(v);
            } else {
                set_path(&mut overrides, &k, v)?;
            }
        }
        for (k, v) in &self.flags {
            set_path(&mut overrides, k, v.clone())?;
        }
        if let Some(seed) = self.common.seed {
            let defaults = serde_json::to_value(T::default()).map_err(|e| Failure::Runtime(e.into()))?;
            if defaults.get("seeds").is_some() {
                set_path(&mut overrides, "seeds", json!([seed]))?;
            } else {
                set_path(&mut overrides, "seed", json!(seed))?;
            }
        }
        layers.push(overrides);
        let (typed, canonical) = resolve::<T>(layers)?;
        let workers = match (self.common.workers, workers) {
            (Some(w), _) => Some(w),
            (None, Some(v)) => Some(
                v.as_u64()
                    .map(|w| w as usize)
                    .ok_or_else(|| Failure::Config("workers: expected a positive integer".into()))?,
            ),
            (None, None) => None,
        };
        if workers == Some(0) {
            return Err(Failure::Config("workers: must be at least 1".into()));
        }
        Ok((typed, canonical, workers))
    }

    /// Runs `body` on a pool of the configured size, then writes the run directory.
    fn execute<T, F>(self, body: F) -> Result<bool, Failure>
    where
        T: Serialize + DeserializeOwned + Default,
        F: FnOnce(&T) -> Result<Output, Failure> + Send,
        T: Sync,
    {
        let (cfg, canonical, workers) = self.resolve::<T>()?;
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(w) = workers {
            builder = builder.num_threads(w);
        }
        let pool = builder.build().map_err(|e| Failure::Runtime(e.into()))?;
        let output = pool.install(|| body(&cfg))?;

        let seed = canonical.get("seed").or_else(|| canonical.get("seeds")).cloned().unwrap_or(Value::Null);
        let dir = self.common.out.clone().unwrap_or_else(|| {
            let root = std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
            let digest = Sha256::digest(format!("{}\n{}", self.command, canonical).as_bytes());
            let hash: String = digest.iter().take(6).map(|b| format!("{b:02x}")).collect();
            root.join(format!("{}-{hash}", self.command))
        });
        let metadata = json!({
            "command": self.command,
            "version": env!("CARGO_PKG_VERSION"),
            "seed": seed,
            "workers": workers,
            "config": canonical,
        });
        write_run(&dir, &metadata, &output.files)?;
        for line in &output.summary {
            println!("{line}");
        }
        println!("{}", dir.display());
        Ok(output.passed || !self.common.check)
    }
}

fn write_run(dir: &Path, metadata: &Value, files: &[(String, String)]) -> Result<(), Failure> {
    std::fs::create_dir_all(dir)?;
    let meta = serde_json::to_string_pretty(metadata).map_err(|e| Failure::Runtime(e.into()))?;
    std::fs::write(dir.join("metadata.json"), meta + "\n")?;
    for (name, contents) in files {
        std::fs::write(dir.join(name), contents)?;
    }
    Ok(())
}

/// `--epsilon` alone selects the eps-optimal demonstrator.
fn demonstrator_value(kind: Option<Demonstrator>, epsilon: Option<f64>) -> Result<Option<Value>, Failure> {
    match (kind, epsilon) {
        (None, None) => Ok(None),
        (Some(Demonstrator::Dirichlet), None) => Ok(Some(json!({"kind": "dirichlet"}))),
        (Some(Demonstrator::Dirichlet), Some(_)) => {
            Err(Failure::Config("epsilon: only applies to the eps-optimal demonstrator".into()))
        }
        (_, eps) => Ok(Some(json!({"kind": "eps-optimal", "epsilon": eps.unwrap_or(0.3)}))),
    }
}

fn run(cli: Cli) -> Result<bool, Failure> {
    match cli.command {
        Command::TabularBench { common, t, draws, demonstrator, epsilon } => Plan::new("tabular-bench", common)
            .flag("T", t)
            .flag("draws", draws)
            .flag("demonstrator", demonstrator_value(demonstrator, epsilon)?)
            .execute(|cfg: &TabularSuiteConfig| {
                let rows = tabular_suite(cfg)?;
                let mut checks = suite_coverage_checks(&rows);
                checks.extend(suite_subopt_checks(&rows, &cfg.ts)?);
                let mut out = Output::new();
                out.csv("suite.csv", &rows);
                out.checks("checks.csv", &checks);
                Ok(out)
            }),
        Command::Counterexample { common, name, epsilon, t, trials } => {
            let plan = Plan::new("counterexample", common).flag("epsilon", epsilon).flag("T", t).flag("trials", trials);
            match name {
                Construction::Prop1 => plan.execute(|cfg: &Prop1Config| {
                    let res = prop1_experiment(cfg)?;
                    let mut out = Output::new();
                    out.csv("studies.csv", &res.studies);
                    out.csv("metrics.csv", &res.metrics);
                    out.csv("finetune.csv", &res.finetune);
                    out.checks("checks.csv", &res.checks);
                    Ok(out)
                }),
                Construction::Prop2 => plan.execute(|cfg: &Prop2Config| {
                    let (rows, checks) = prop2_experiment(cfg)?;
                    let mut out = Output::new();
                    out.csv("coverage.csv", &rows);
                    out.checks("checks.csv", &checks);
                    Ok(out)
                }),
                Construction::Thm2 => plan.execute(|cfg: &Thm2Config| {
                    let (rows, checks) = thm2_experiment(cfg)?;
                    let mut out = Output::new();
                    out.csv("gamma.csv", &rows);
                    out.checks("checks.csv", &checks);
                    Ok(out)
                }),
            }
        }
        Command::GaussianCheck { common, samples } => {
            Plan::new("gaussian-check", common).flag("samples", samples).execute(|cfg: &GaussianCheckConfig| {
                let rows = gaussian_check(cfg)?;
                let mut out = Output::new();
                out.passed = rows.iter().all(|r| r.passed);
                out.summary = rows
                    .iter()
                    .map(|r| {
                        format!(
                            "{} {} {}: {} (analytic {})",
                            if r.passed { "PASS" } else { "FAIL" },
                            r.sampler,
                            r.quantity,
                            r.empirical,
                            r.analytic
                        )
                    })
                    .collect();
                out.csv("moments.csv", &rows);
                Ok(out)
            })
        }
        Command::EnsembleCheck { common, t, k } => {
            Plan::new("ensemble-check", common).flag("T", t).flag("K", k).execute(|cfg: &EnsembleCheckConfig| {
                let rows = ensemble_check(cfg)?;
                let mut out = Output::new();
                out.checks("metrics.csv", &rows);
                Ok(out)
            })
        }
        Command::Pretrain { common, env, method, t, alpha, epochs } => Plan::new("pretrain", common)
            .flag("env", env.map(|e| format!("{e:?}").to_lowercase()))
            .flag(
                "method",
                method.map(|m| match m {
                    Method::Bc => "bc",
                    Method::SigmaBc => "sigma-bc",
                    Method::Postbc => "postbc",
                }),
            )
            .flag("T", t)
            .flag("postbc.alpha", alpha)
            .flag("train.epochs", epochs)
            .execute(|cfg: &PretrainConfig| {
                let res = pretrain(cfg)?;
                let mut out = Output::new();
                out.files.push(("demos.jsonl".into(), res.dataset.to_jsonl()?));
                let meta = serde_json::to_string_pretty(&res.dataset.meta()).map_err(|e| Failure::Runtime(e.into()))?;
                out.files.push(("demos.meta.json".into(), meta + "\n"));
                if let Some(field) = &res.cov_field {
                    out.files.push(("ensemble.txt".into(), field.ensemble.to_text()?));
                }
                out.files.push(("policy.txt".into(), res.policy.to_text()?));
                let metrics = vec![
                    MetricRow::new("pretrain", "initial_loss", res.stats.initial_loss),
                    MetricRow::new("pretrain", "final_loss", res.stats.final_loss),
                    MetricRow::new("pretrain", "success_rate", res.success_rate),
                ];
                out.summary.push(format!("success_rate: {}", res.success_rate));
                out.csv("train.csv", &metrics);
                Ok(out)
            }),
        Command::FinetuneBon { common, n, t_on, episodes, seeds, epochs } => Plan::new("finetune-bon", common)
            .flag("N", n)
            .flag("T_on", t_on)
            .flag("episodes", episodes)
            .flag("seeds", seeds)
            .flag("train.epochs", epochs)
            .execute(|cfg: &BonConfig| {
                let res = bon_experiment(cfg)?;
                let mut out = Output::new();
                out.csv("bon.csv", &res.rows);
                out.checks("checks.csv", &res.checks);
                Ok(out)
            }),
        Command::Fig1Demo { common, samples, seeds, epochs } => Plan::new("fig1-demo", common)
            .flag("samples", samples)
            .flag("seeds", seeds)
            .flag("train.epochs", epochs)
            .execute(|cfg: &Fig1Config| {
                let res = fig1_experiment(cfg)?;
                let mut out = Output::new();
                out.csv("cov.csv", &res.cov);
                out.csv("samples.csv", &res.samples);
                out.csv("metrics.csv", &res.metrics);
                out.checks("checks.csv", &res.checks);
                Ok(out)
            }),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(3)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
