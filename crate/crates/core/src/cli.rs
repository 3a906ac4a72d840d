//! Command implementations behind the `offrl` binary.
//!
//! Output files (all CSV headers are fixed):
//!
//! * `stats.csv` (dataset command):
//!   `name,env,total,expert,medium,random,nonexpert,average_reward`
//! * `metrics.csv` (one row per evaluation checkpoint):
//!   `step,mean_return,normalized_score,divergence_expert_p75,divergence_nonexpert_p75,q_separability_auc,grad_norm_p50,grad_norm_p75,grad_norm_p99,grad_norm_max,theorem2_bound`
//! * `train_metrics.csv` (every `log_interval` steps):
//!   `step,critic_loss,actor_loss,gp_penalty,mean_abs_q,mean_w,mmd,eta,grad_norm_p99`
//! * `comparison.csv` (ablate): `dataset,variant,use_gp,use_cr,mean,std,median,failed_runs`
//! * `sweep.csv` (sweep): `lambda_gp,mean,std,median,failed_runs`
//!
//! Fields that do not apply to a run are left empty.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agents::{save_checkpoint, train_observed, AgentConfig, AgentState, StepRecord, TrainObserver};
use crate::datasets::{collect_level, contaminate, dataset_stats, load, save, Dataset};
use crate::envs::{reference_returns, EnvKind, PolicyLevel};
use crate::error::{Error, Result};
use crate::eval::EvalReport;

pub const STATS_HEADER: &str = "name,env,total,expert,medium,random,nonexpert,average_reward";
pub const METRICS_HEADER: &str = "step,mean_return,normalized_score,divergence_expert_p75,divergence_nonexpert_p75,q_separability_auc,grad_norm_p50,grad_norm_p75,grad_norm_p99,grad_norm_max,theorem2_bound";
pub const TRAIN_METRICS_HEADER: &str =
    "step,critic_loss,actor_loss,gp_penalty,mean_abs_q,mean_w,mmd,eta,grad_norm_p99";
pub const COMPARISON_HEADER: &str = "dataset,variant,use_gp,use_cr,mean,std,median,failed_runs";
pub const SWEEP_HEADER: &str = "lambda_gp,mean,std,median,failed_runs";

pub const DEFAULT_SWEEP: [f64; 5] = [0.0, 0.01, 0.1, 1.0, 5.0];
pub const DEFAULT_DATASET_SIZE: usize = 40_000;

/// Which non-expert policy contaminates the expert data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mix {
    #[serde(rename = "expert-random")]
    ExpertRandom,
    #[serde(rename = "expert-medium")]
    ExpertMedium,
}

impl Mix {
    pub fn other(self) -> PolicyLevel {
        match self {
            Mix::ExpertRandom => PolicyLevel::Random,
            Mix::ExpertMedium => PolicyLevel::Medium,
        }
    }

    fn prefix(self) -> &'static str {
        match self {
            Mix::ExpertRandom => "er",
            Mix::ExpertMedium => "em",
        }
    }
}

impl std::str::FromStr for Mix {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "expert-random" => Ok(Mix::ExpertRandom),
            "expert-medium" => Ok(Mix::ExpertMedium),
            other => Err(Error::Config(format!("unknown mix `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Recipe {
    pub mix: Mix,
    pub ratio: f64,
    #[serde(default = "default_size")]
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_size() -> usize {
    DEFAULT_DATASET_SIZE
}

impl Recipe {
    /// `er50`-style label; a zero ratio is the pure expert set.
    pub fn label(&self) -> String {
        if self.ratio == 0.0 {
            "expert".into()
        } else {
            format!("{}{}", self.mix.prefix(), (self.ratio * 100.0).round() as i64)
        }
    }

    /// Parses `er10`, `er30`, `er50`, `er70`, `em30` or `expert`.
    pub fn named(name: &str) -> Result<Self> {
        let (mix, pct) = match name {
            "expert" => (Mix::ExpertRandom, 0),
            "er10" => (Mix::ExpertRandom, 10),
            "er30" => (Mix::ExpertRandom, 30),
            "er50" => (Mix::ExpertRandom, 50),
            "er70" => (Mix::ExpertRandom, 70),
            "em30" => (Mix::ExpertMedium, 30),
            other => return Err(Error::Config(format!("unknown dataset name `{other}`"))),
        };
        Ok(Self {
            mix,
            ratio: pct as f64 / 100.0,
            n: DEFAULT_DATASET_SIZE,
            seed: 0,
        })
    }

    pub fn build(&self, env: EnvKind) -> Result<Dataset> {
        if !(0.0..=1.0).contains(&self.ratio) {
            return Err(Error::Config(format!("ratio must be in [0, 1], got {}", self.ratio)));
        }
        let expert = collect_level(env, PolicyLevel::Expert, self.n, self.seed)?;
        let other = collect_level(env, self.mix.other(), self.n, self.seed)?;
        Ok(contaminate(&expert, &other, self.ratio)?.with_reference_returns(reference_returns(env, self.seed)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSource {
    Path(PathBuf),
    Name(String),
    Recipe(Recipe),
}

impl DatasetSource {
    pub fn label(&self) -> Result<String> {
        Ok(match self {
            DatasetSource::Path(p) => p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "dataset".into()),
            DatasetSource::Name(n) => Recipe::named(n)?.label(),
            DatasetSource::Recipe(r) => r.label(),
        })
    }

    pub fn resolve(&self, env: EnvKind) -> Result<Dataset> {
        match self {
            DatasetSource::Path(p) => load(p),
            DatasetSource::Name(n) => Recipe::named(n)?.build(env),
            DatasetSource::Recipe(r) => r.build(env),
        }
    }
}

/// Contents of the JSON file passed to `train`, `ablate` and `sweep`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub agent: AgentConfig,
    /// Dataset for `train` and `sweep`.
    #[serde(default)]
    pub dataset: Option<DatasetSource>,
    /// Datasets for `ablate`.
    #[serde(default)]
    pub datasets: Vec<DatasetSource>,
    pub output_dir: PathBuf,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Worker threads; defaults to the available parallelism.
    #[serde(default)]
    pub workers: Option<usize>,
    /// Number of trailing checkpoints averaged into the final score.
    #[serde(default = "default_window")]
    pub final_window: usize,
    #[serde(default)]
    pub sweep_values: Option<Vec<f64>>,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_window() -> usize {
    3
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.agent.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seed list is empty".into()));
        }
        if self.final_window == 0 {
            return Err(Error::Config("final_window must be positive".into()));
        }
        if self.workers == Some(0) {
            return Err(Error::Config("workers must be positive".into()));
        }
        if let Some(v) = &self.sweep_values {
            if v.is_empty() || v.iter().any(|x| !(*x >= 0.0)) {
                return Err(Error::Config("sweep values must be a nonempty list of λ ≥ 0".into()));
            }
        }
        for src in self.dataset.iter().chain(&self.datasets) {
            if let DatasetSource::Name(n) = src {
                Recipe::named(n)?;
            }
        }
        Ok(())
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(w) = self.workers {
            b = b.num_threads(w);
        }
        b.build().map_err(|e| Error::Config(e.to_string()))
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn metrics_row(r: &EvalReport) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{},{}",
        r.step,
        r.mean_return,
        r.normalized_score,
        opt(r.divergence_expert_p75),
        opt(r.divergence_nonexpert_p75),
        opt(r.q_separability_auc),
        r.grad_norm.p50,
        r.grad_norm.p75,
        r.grad_norm.p99,
        r.grad_norm.max,
        opt(r.theorem2_bound)
    )
}

pub fn train_metrics_row(r: &StepRecord) -> String {
    let m = &r.metrics;
    format!(
        "{},{},{},{},{},{},{},{},{}",
        r.step,
        opt(m.critic_loss),
        opt(m.actor_loss),
        opt(m.gp_penalty),
        opt(m.mean_abs_q),
        opt(m.mean_w),
        opt(m.mmd),
        opt(m.eta),
        opt(m.grad_norm_p99)
    )
}

fn csv_file(path: &Path, header: &str) -> Result<BufWriter<File>> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{header}")?;
    Ok(w)
}

fn flush_sync(w: &mut BufWriter<File>) -> Result<()> {
    w.flush()?;
    w.get_ref().sync_all()?;
    Ok(())
}

/// Streams one run's logs into its directory.
struct RunWriter {
    dir: PathBuf,
    metrics: BufWriter<File>,
    train: BufWriter<File>,
}

impl RunWriter {
    fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            metrics: csv_file(&dir.join("metrics.csv"), METRICS_HEADER)?,
            train: csv_file(&dir.join("train_metrics.csv"), TRAIN_METRICS_HEADER)?,
        })
    }
}

impl TrainObserver for RunWriter {
    fn on_step(&mut self, record: &StepRecord) -> Result<()> {
        writeln!(self.train, "{}", train_metrics_row(record))?;
        Ok(())
    }

    fn on_eval(&mut self, report: &EvalReport, state: &AgentState, is_best: bool) -> Result<()> {
        writeln!(self.metrics, "{}", metrics_row(report))?;
        flush_sync(&mut self.metrics)?;
        flush_sync(&mut self.train)?;
        if is_best {
            save_checkpoint(state, &self.dir.join("checkpoint_best.json"))?;
        }
        Ok(())
    }
}

/// Per-run summary written to `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub final_mean: f64,
    pub final_std: f64,
    pub final_window: usize,
    pub best_score: Option<f64>,
    pub failed: bool,
    pub abort: Option<String>,
    pub onset_step: Option<u64>,
    pub checkpoints: usize,
}

/// Aggregate over the runs of one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    pub median: f64,
    pub failed_runs: usize,
    pub runs: Vec<RunSummary>,
}

/// Population mean and standard deviation; `(NaN, NaN)` when empty.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, v.sqrt())
}

/// Lower median of a sample.
pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Mean and std of the normalized score over the last `window` checkpoints.
pub fn final_window_score(evals: &[EvalReport], window: usize) -> (f64, f64) {
    let tail: Vec<f64> = evals
        .iter()
        .rev()
        .take(window)
        .map(|r| r.normalized_score)
        .collect();
    mean_std(&tail)
}

pub fn aggregate(runs: Vec<RunSummary>) -> Aggregate {
    let finals: Vec<f64> = runs.iter().map(|r| r.final_mean).collect();
    let (mean, std) = mean_std(&finals);
    Aggregate {
        mean,
        std,
        median: median(&finals),
        failed_runs: runs.iter().filter(|r| r.failed).count(),
        runs,
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

/// Trains one seed into `dir`.
pub fn run_one(cfg: &AgentConfig, ds: &Dataset, dir: &Path, final_window: usize) -> Result<RunSummary> {
    let mut writer = RunWriter::create(dir)?;
    write_json(&dir.join("config.json"), cfg)?;
    let out = train_observed(cfg, ds, &mut writer)?;
    flush_sync(&mut writer.metrics)?;
    flush_sync(&mut writer.train)?;
    save_checkpoint(&out.state, &dir.join("checkpoint_final.json"))?;
    let (final_mean, final_std) = final_window_score(&out.evals, final_window);
    let summary = RunSummary {
        seed: cfg.seed,
        final_mean,
        final_std,
        final_window,
        best_score: out.best.as_ref().map(|(s, _)| *s),
        failed: out.failed(),
        abort: out.abort.clone(),
        onset_step: out.verdict.onset_step,
        checkpoints: out.evals.len(),
    };
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

struct Job {
    group: usize,
    cfg: AgentConfig,
    dataset: usize,
    dir: PathBuf,
}

/// Runs all jobs on the pool and returns per-group aggregates in order.
fn run_jobs(run: &RunConfig, datasets: &[Dataset], jobs: Vec<Job>, groups: usize) -> Result<Vec<Aggregate>> {
    let pool = run.pool()?;
    let results: Vec<(usize, RunSummary)> = pool.install(|| {
        jobs.par_iter()
            .map(|j| {
                eprintln!("[offrl] start {}", j.dir.display());
                let s = run_one(&j.cfg, &datasets[j.dataset], &j.dir, run.final_window)?;
                eprintln!(
                    "[offrl] done {} final {:.2} failed {}",
                    j.dir.display(),
                    s.final_mean,
                    s.failed
                );
                Ok((j.group, s))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut buckets: Vec<Vec<RunSummary>> = vec![Vec::new(); groups];
    for (g, s) in results {
        buckets[g].push(s);
    }
    Ok(buckets.into_iter().map(aggregate).collect())
}

fn seed_jobs(run: &RunConfig, base: &AgentConfig, group: usize, dataset: usize, dir: &Path) -> Vec<Job> {
    run.seeds
        .iter()
        .map(|&seed| Job {
            group,
            cfg: AgentConfig { seed, ..base.clone() },
            dataset,
            dir: dir.join(format!("seed_{seed}")),
        })
        .collect()
}

pub fn cmd_train(run: &RunConfig) -> Result<Aggregate> {
    let src = run
        .dataset
        .as_ref()
        .ok_or_else(|| Error::Config("`dataset` is required for train".into()))?;
    let ds = src.resolve(run.agent.env)?;
    fs::create_dir_all(&run.output_dir)?;
    write_json(&run.output_dir.join("run_config.json"), run)?;
    let jobs = seed_jobs(run, &run.agent, 0, 0, &run.output_dir);
    let agg = run_jobs(run, &[ds], jobs, 1)?.remove(0);
    write_json(&run.output_dir.join("summary.json"), &agg)?;
    Ok(agg)
}

pub const VARIANTS: [(&str, bool, bool); 4] = [
    ("plain", false, false),
    ("gp", true, false),
    ("cr", false, true),
    ("pp", true, true),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub dataset: String,
    pub variant: String,
    pub use_gp: bool,
    pub use_cr: bool,
    pub aggregate: Aggregate,
}

pub fn cmd_ablate(run: &RunConfig) -> Result<Vec<ComparisonRow>> {
    if run.datasets.is_empty() {
        return Err(Error::Config("`datasets` is required for ablate".into()));
    }
    let labels = run.datasets.iter().map(|d| d.label()).collect::<Result<Vec<_>>>()?;
    let sets = run
        .datasets
        .iter()
        .map(|d| d.resolve(run.agent.env))
        .collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(&run.output_dir)?;
    write_json(&run.output_dir.join("run_config.json"), run)?;
    let mut jobs = Vec::new();
    let mut meta = Vec::new();
    for (di, label) in labels.iter().enumerate() {
        for (name, gp, cr) in VARIANTS {
            let base = AgentConfig {
                use_gp: gp,
                use_cr: cr,
                ..run.agent.clone()
            };
            let dir = run.output_dir.join(label).join(name);
            jobs.extend(seed_jobs(run, &base, meta.len(), di, &dir));
            meta.push((label.clone(), name, gp, cr));
        }
    }
    let aggs = run_jobs(run, &sets, jobs, meta.len())?;
    let rows: Vec<ComparisonRow> = meta
        .into_iter()
        .zip(aggs)
        .map(|((dataset, variant, use_gp, use_cr), aggregate)| ComparisonRow {
            dataset,
            variant: variant.into(),
            use_gp,
            use_cr,
            aggregate,
        })
        .collect();
    let mut w = csv_file(&run.output_dir.join("comparison.csv"), COMPARISON_HEADER)?;
    for r in &rows {
        let a = &r.aggregate;
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.dataset, r.variant, r.use_gp, r.use_cr, a.mean, a.std, a.median, a.failed_runs
        )?;
    }
    flush_sync(&mut w)?;
    Ok(rows)
}

pub fn cmd_sweep(run: &RunConfig, values: Option<Vec<f64>>) -> Result<Vec<(f64, Aggregate)>> {
    let src = run
        .dataset
        .as_ref()
        .ok_or_else(|| Error::Config("`dataset` is required for sweep".into()))?;
    let mut values = values
        .or_else(|| run.sweep_values.clone())
        .unwrap_or_else(|| DEFAULT_SWEEP.to_vec());
    if values.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::Config("sweep values must be ≥ 0".into()));
    }
    values.sort_by(f64::total_cmp);
    values.dedup();
    let ds = src.resolve(run.agent.env)?;
    fs::create_dir_all(&run.output_dir)?;
    write_json(&run.output_dir.join("run_config.json"), run)?;
    let mut jobs = Vec::new();
    for (g, &v) in values.iter().enumerate() {
        let base = AgentConfig {
            use_gp: true,
            lambda_gp: v,
            ..run.agent.clone()
        };
        jobs.extend(seed_jobs(run, &base, g, 0, &run.output_dir.join(format!("lambda_{v}"))));
    }
    let aggs = run_jobs(run, &[ds], jobs, values.len())?;
    let rows: Vec<(f64, Aggregate)> = values.into_iter().zip(aggs).collect();
    let mut w = csv_file(&run.output_dir.join("sweep.csv"), SWEEP_HEADER)?;
    for (v, a) in &rows {
        writeln!(w, "{},{},{},{},{}", v, a.mean, a.std, a.median, a.failed_runs)?;
    }
    flush_sync(&mut w)?;
    Ok(rows)
}

pub fn stats_row(name: &str, ds: &Dataset) -> String {
    let s = dataset_stats(ds);
    format!(
        "{},{},{},{},{},{},{},{}",
        name, ds.meta.env, s.total, s.expert, s.medium, s.random, s.nonexpert, s.average_reward
    )
}

/// Writes one dataset (`Some(recipe)`) or the standard suite (expert,
/// medium, random, er10, er30, er50, er70, em30) plus `stats.csv`.
pub fn cmd_dataset(env: EnvKind, recipe: Option<Recipe>, n: usize, seed: u64, out: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out)?;
    let mut named: Vec<(String, Dataset)> = Vec::new();
    match recipe {
        Some(r) => named.push((r.label(), r.build(env)?)),
        None => {
            let refs = reference_returns(env, seed);
            let mut pure = Vec::new();
            for level in [PolicyLevel::Expert, PolicyLevel::Medium, PolicyLevel::Random] {
                let ds = collect_level(env, level, n, seed)?.with_reference_returns(refs);
                pure.push((level.to_string(), ds));
            }
            let expert = pure[0].1.clone();
            for (mix, pct) in [
                (Mix::ExpertRandom, 10),
                (Mix::ExpertRandom, 30),
                (Mix::ExpertRandom, 50),
                (Mix::ExpertRandom, 70),
                (Mix::ExpertMedium, 30),
            ] {
                let other = if mix == Mix::ExpertRandom { &pure[2].1 } else { &pure[1].1 };
                let ds = contaminate(&expert, other, pct as f64 / 100.0)?.with_reference_returns(refs);
                named.push((format!("{}{pct}", mix.prefix()), ds));
            }
            named.splice(0..0, pure);
        }
    }
    let mut w = csv_file(&out.join("stats.csv"), STATS_HEADER)?;
    let mut paths = Vec::new();
    for (name, ds) in &named {
        let path = out.join(format!("{name}.jsonl"));
        save(ds, &path)?;
        writeln!(w, "{}", stats_row(name, ds))?;
        paths.push(path);
    }
    flush_sync(&mut w)?;
    Ok(paths)
}

/// Process exit code for an error: 2 for configuration problems, 3 for I/O
/// and dataset-file problems, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Domain(_) | Error::Json(_) => 2,
        Error::Io(_) | Error::Parse { .. } | Error::Integrity { .. } => 3,
        _ => 1,
    }
}
