//! Experiment orchestration: configuration files, multi-seed training,
//! evaluation, failure-recovery studies and plot emission.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::baselines::kmeans_policy;
use crate::env::{Env, EnvError};
use crate::metrics::MetricsRow;
use crate::nn::Actor;
use crate::rng::{derive_seed, stream_rng, SimRng, Stream};
use crate::train::{load_policy, write_train_csv, Controller, EpisodeLog, TrainConfig, TrainError, Trainer, TRAIN_COLUMNS};
use crate::world::{apply_assignment, make_scenario, ConfigError, FailureEvent, ScenarioConfig};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Runtime(_) => 3,
        }
    }
}

impl From<ConfigError> for HarnessError {
    fn from(e: ConfigError) -> Self {
        HarnessError::Config(e.to_string())
    }
}

impl From<TrainError> for HarnessError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(m) => HarnessError::Config(m),
            other => HarnessError::Runtime(other.to_string()),
        }
    }
}

impl From<EnvError> for HarnessError {
    fn from(e: EnvError) -> Self {
        HarnessError::Runtime(e.to_string())
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> HarnessError + '_ {
    move |e| HarnessError::Runtime(format!("{}: {e}", path.display()))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> HarnessError + '_ {
    move |e| HarnessError::Runtime(format!("{}: {e}", path.display()))
}

fn default_controller() -> Controller {
    Controller::TagMappo
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3, 4]
}

fn default_eval_episodes() -> usize {
    5
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_failure_step() -> usize {
    100
}

/// One experiment: scenario, controller, seeds and where results go.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub scenario: String,
    #[serde(default = "default_controller")]
    pub controller: Controller,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_eval_episodes")]
    pub eval_episodes: usize,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Checkpoint used by every seed in eval and failure-eval; defaults to
    /// each seed's own final checkpoint under `output_dir`.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    /// Evaluate with the most likely action instead of sampling.
    #[serde(default)]
    pub greedy: bool,
    #[serde(default = "default_failure_step")]
    pub failure_step: usize,
    /// UAV index to fail in failure-eval; random when absent.
    #[serde(default)]
    pub failure_uav: Option<usize>,
    /// Overrides on top of the scenario's default table.
    #[serde(default)]
    pub world: toml::Table,
    #[serde(default)]
    pub train: TrainConfig,
}

impl ExperimentSpec {
    pub fn from_table(table: toml::Table) -> Result<ExperimentSpec, HarnessError> {
        let spec: ExperimentSpec = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| HarnessError::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    /// Reads a spec file and applies `key=value` overrides in order.
    pub fn load(path: &Path, sets: &[String]) -> Result<ExperimentSpec, HarnessError> {
        let text = fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| HarnessError::Config(format!("{}: {e}", path.display())))?;
        for s in sets {
            apply_assignment(&mut table, s)?;
        }
        ExperimentSpec::from_table(table)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.seeds.is_empty() {
            return Err(HarnessError::Config("seeds must not be empty".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(HarnessError::Config("seeds must be distinct".into()));
        }
        if self.eval_episodes == 0 {
            return Err(HarnessError::Config("eval_episodes must be positive".into()));
        }
        self.train.validate()?;
        let scenario = self.scenario_config()?;
        if let Some(k) = self.failure_uav {
            if k >= scenario.num_uavs {
                return Err(HarnessError::Config(format!("failure_uav {k} out of range")));
            }
        }
        Ok(())
    }

    pub fn scenario_config(&self) -> Result<ScenarioConfig, HarnessError> {
        Ok(make_scenario(&self.scenario, &self.world)?)
    }

    pub fn to_toml_string(&self) -> Result<String, HarnessError> {
        toml::to_string(self).map_err(|e| HarnessError::Runtime(e.to_string()))
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.output_dir.join(format!("seed_{seed}"))
    }

    pub fn checkpoint_for(&self, seed: u64) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| self.seed_dir(seed).join("checkpoint.bin"))
    }
}

/// Mean with a Student-t 95% confidence interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
}

pub fn t_interval(xs: &[f64]) -> Interval {
    let n = xs.len();
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return Interval { mean, lo: mean, hi: mean };
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .expect("positive degrees of freedom")
        .inverse_cdf(0.975);
    let half = t * (var / n as f64).sqrt();
    Interval {
        mean,
        lo: mean - half,
        hi: mean + half,
    }
}

/// Per-column intervals across series sharing an x axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub x_name: String,
    pub x: Vec<f64>,
    pub columns: Vec<(String, Vec<Interval>)>,
}

impl Aggregate {
    /// `series[i][c][j]` is column `c` at x index `j` for series `i`.
    pub fn from_series(x_name: &str, x: Vec<f64>, names: &[String], series: &[Vec<Vec<f64>>]) -> Aggregate {
        let columns = names
            .iter()
            .enumerate()
            .map(|(c, name)| {
                let bands = (0..x.len())
                    .map(|j| t_interval(&series.iter().map(|s| s[c][j]).collect::<Vec<_>>()))
                    .collect();
                (name.clone(), bands)
            })
            .collect();
        Aggregate {
            x_name: x_name.to_string(),
            x,
            columns,
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), HarnessError> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
        let mut header = vec![self.x_name.clone()];
        for (name, _) in &self.columns {
            header.extend([format!("{name}_mean"), format!("{name}_lo"), format!("{name}_hi")]);
        }
        w.write_record(&header).map_err(csv_err(path))?;
        for (j, x) in self.x.iter().enumerate() {
            let mut row = vec![x.to_string()];
            for (_, bands) in &self.columns {
                let b = bands[j];
                row.extend([b.mean.to_string(), b.lo.to_string(), b.hi.to_string()]);
            }
            w.write_record(&row).map_err(csv_err(path))?;
        }
        w.flush().map_err(io_err(path))?;
        Ok(())
    }
}

fn log_columns(log: &EpisodeLog) -> [f64; 9] {
    [
        log.mean_reward,
        log.c_cov,
        log.handoffs,
        log.e_eff,
        log.jfi_rate,
        log.actor_loss,
        log.critic_loss,
        log.entropy,
        log.beta_ent,
    ]
}

pub fn aggregate_training(runs: &[(u64, Vec<EpisodeLog>)]) -> Aggregate {
    let names: Vec<String> = TRAIN_COLUMNS[1..].iter().map(|s| s.to_string()).collect();
    let len = runs.iter().map(|(_, l)| l.len()).min().unwrap_or(0);
    let x = (0..len).map(|e| e as f64).collect();
    let series: Vec<Vec<Vec<f64>>> = runs
        .iter()
        .map(|(_, logs)| {
            (0..names.len())
                .map(|c| logs[..len].iter().map(|l| log_columns(l)[c]).collect())
                .collect()
        })
        .collect();
    Aggregate::from_series("episode", x, &names, &series)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub runs: Vec<(u64, Vec<EpisodeLog>)>,
    pub aggregate: Aggregate,
}

/// Trains one model per seed (in parallel) and writes per-seed CSVs and
/// checkpoints plus an aggregate CSV with 95% intervals.
pub fn cmd_train(spec: &ExperimentSpec) -> Result<TrainOutcome, HarnessError> {
    if spec.controller == Controller::Kmeans {
        return Err(HarnessError::Config("the kmeans controller has nothing to train".into()));
    }
    let scenario = spec.scenario_config()?;
    fs::create_dir_all(&spec.output_dir).map_err(io_err(&spec.output_dir))?;
    let resolved = spec.output_dir.join("experiment.toml");
    fs::write(&resolved, spec.to_toml_string()?).map_err(io_err(&resolved))?;
    let runs: Result<Vec<(u64, Vec<EpisodeLog>)>, HarnessError> = spec
        .seeds
        .par_iter()
        .map(|&seed| {
            let dir = spec.seed_dir(seed);
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
            let cfg = TrainConfig {
                seed,
                ..spec.train.clone()
            };
            let mut trainer = Trainer::new(&scenario, &cfg, spec.controller)?;
            let every = cfg.checkpoint_every;
            let logs = trainer.run(|t, log| {
                if every > 0 && (log.episode + 1) % every == 0 {
                    t.save(&dir.join(format!("checkpoint_ep{}.bin", log.episode + 1)))?;
                }
                Ok(())
            })?;
            trainer.save(&dir.join("checkpoint.bin"))?;
            let path = dir.join("train.csv");
            let file = fs::File::create(&path).map_err(io_err(&path))?;
            write_train_csv(file, &logs).map_err(csv_err(&path))?;
            Ok((seed, logs))
        })
        .collect();
    let runs = runs?;
    let aggregate = aggregate_training(&runs);
    aggregate.write_csv(&spec.output_dir.join("train_aggregate.csv"))?;
    Ok(TrainOutcome { runs, aggregate })
}

/// How actions are chosen during evaluation.
#[derive(Debug, Clone)]
pub enum Policy {
    Learned { actor: Actor, greedy: bool },
    Kmeans,
}

impl Policy {
    pub fn for_spec(spec: &ExperimentSpec, scenario: &ScenarioConfig, seed: u64) -> Result<Policy, HarnessError> {
        match spec.controller {
            Controller::Kmeans => Ok(Policy::Kmeans),
            c => {
                let (actor, _) = load_policy(&spec.checkpoint_for(seed), scenario, c)?;
                Ok(Policy::Learned {
                    actor,
                    greedy: spec.greedy,
                })
            }
        }
    }

    fn act(&self, env: &Env, seed: u64, rng: &mut SimRng) -> Result<Vec<Option<usize>>, HarnessError> {
        match self {
            Policy::Kmeans => Ok(kmeans_policy(env.state(), env.config(), seed)),
            Policy::Learned { actor, greedy } => env
                .observations()
                .iter()
                .map(|o| match o {
                    None => Ok(None),
                    Some(o) => {
                        let x = o.to_vec();
                        let a = if *greedy {
                            actor.greedy(&x)
                        } else {
                            actor.sample(&x, rng).map(|(a, _)| a)
                        };
                        a.map(Some).map_err(|e| HarnessError::Runtime(e.to_string()))
                    }
                })
                .collect(),
        }
    }
}

/// Runs one episode and returns a metrics row for t = 0 (reset) and every step.
pub fn run_episode(scenario: &ScenarioConfig, policy: &Policy, seed: u64) -> Result<Vec<MetricsRow>, HarnessError> {
    let (mut env, _) = Env::reset(scenario, seed)?;
    let mut rng = stream_rng(seed, Stream::Policy);
    let mut rows = vec![MetricsRow::new(0, env.metrics(), env.state().alive_count())];
    while !env.is_done() {
        let actions = policy.act(&env, seed, &mut rng)?;
        let out = env.step(&actions)?;
        rows.push(MetricsRow::new(env.t(), &out.metrics, env.state().alive_count()));
    }
    Ok(rows)
}

pub fn eval_seed(seed: u64, episode: usize) -> u64 {
    derive_seed(seed, &[u64::MAX, episode as u64])
}

fn write_rows(path: &Path, episodes: &[Vec<MetricsRow>]) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    for rows in episodes {
        for r in rows {
            w.serialize(r).map_err(csv_err(path))?;
        }
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

const TRACE_COLUMNS: [&str; 6] = ["utility", "c_cov", "handoffs", "e_eff", "jfi_rate", "active_uav_count"];

fn row_values(r: &MetricsRow) -> [f64; 6] {
    [
        r.utility,
        r.c_cov,
        r.handoffs as f64,
        r.e_eff,
        r.jfi_rate,
        r.active_uav_count as f64,
    ]
}

/// Per-step intervals across seeds; each seed contributes its episode mean.
pub fn aggregate_traces(per_seed: &[Vec<Vec<MetricsRow>>]) -> Aggregate {
    let names: Vec<String> = TRACE_COLUMNS.iter().map(|s| s.to_string()).collect();
    let len = per_seed.iter().flatten().map(|e| e.len()).min().unwrap_or(0);
    let series: Vec<Vec<Vec<f64>>> = per_seed
        .iter()
        .map(|episodes| {
            (0..names.len())
                .map(|c| {
                    (0..len)
                        .map(|t| episodes.iter().map(|e| row_values(&e[t])[c]).sum::<f64>() / episodes.len() as f64)
                        .collect()
                })
                .collect()
        })
        .collect();
    Aggregate::from_series("t", (0..len).map(|t| t as f64).collect(), &names, &series)
}

fn run_seeds(
    spec: &ExperimentSpec,
    scenario: &ScenarioConfig,
    policy_scenario: &ScenarioConfig,
) -> Result<Vec<Vec<Vec<MetricsRow>>>, HarnessError> {
    spec.seeds
        .par_iter()
        .map(|&seed| {
            let policy = Policy::for_spec(spec, policy_scenario, seed)?;
            (0..spec.eval_episodes)
                .map(|e| run_episode(scenario, &policy, eval_seed(seed, e)))
                .collect()
        })
        .collect()
}

/// Evaluates the trained (or K-Means) controller on fresh episodes.
pub fn cmd_eval(spec: &ExperimentSpec) -> Result<Aggregate, HarnessError> {
    let scenario = spec.scenario_config()?;
    let per_seed = run_seeds(spec, &scenario, &scenario)?;
    let dir = spec.output_dir.join("eval");
    for (seed, episodes) in spec.seeds.iter().zip(&per_seed) {
        write_rows(&dir.join(format!("seed_{seed}.csv")), episodes)?;
    }
    let agg = aggregate_traces(&per_seed);
    agg.write_csv(&dir.join("aggregate.csv"))?;
    Ok(agg)
}

/// Recovery statistics of one coverage trace around a failure at `t_f`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Recovery {
    /// Mean coverage over [t_f − 20, t_f).
    pub pre_mean: f64,
    pub trough: f64,
    pub trough_t: usize,
    /// Steps until coverage first regains 90% of `pre_mean`, counting the
    /// failure step as step 1.
    pub time_to_90: Option<usize>,
    /// Mean coverage over the final 20 steps.
    pub final_mean: f64,
}

pub fn recovery_stats(coverage: &[f64], t_f: usize) -> Option<Recovery> {
    if t_f == 0 || t_f >= coverage.len() {
        return None;
    }
    let pre = &coverage[t_f.saturating_sub(20)..t_f];
    let pre_mean = pre.iter().sum::<f64>() / pre.len() as f64;
    let mut trough_t = t_f;
    for t in t_f..coverage.len() {
        if coverage[t] < coverage[trough_t] {
            trough_t = t;
        }
    }
    let time_to_90 = (t_f..coverage.len())
        .find(|&t| coverage[t] >= 0.9 * pre_mean)
        .map(|t| t - t_f + 1);
    let tail = &coverage[coverage.len().saturating_sub(20)..];
    Some(Recovery {
        pre_mean,
        trough: coverage[trough_t],
        trough_t,
        time_to_90,
        final_mean: tail.iter().sum::<f64>() / tail.len() as f64,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct RecoveryRow {
    pub seed: u64,
    pub episode: usize,
    pub pre_mean: f64,
    pub trough: f64,
    pub trough_t: usize,
    pub time_to_90: Option<usize>,
    pub final_mean: f64,
}

#[derive(Debug, Clone)]
pub struct FailureEvalOutcome {
    pub failure: Vec<Vec<Vec<MetricsRow>>>,
    pub nominal: Vec<Vec<Vec<MetricsRow>>>,
    pub recovery: Vec<RecoveryRow>,
}

/// Paired episodes with and without a node failure at `failure_step`.
pub fn cmd_failure_eval(spec: &ExperimentSpec) -> Result<FailureEvalOutcome, HarnessError> {
    let base = spec.scenario_config()?;
    if spec.failure_step == 0 || spec.failure_step >= base.episode_len {
        return Err(HarnessError::Config(format!(
            "failure_step {} must lie inside the {}-step episode",
            spec.failure_step, base.episode_len
        )));
    }
    let mut failing = base.clone();
    failing.failure_schedule = vec![match spec.failure_uav {
        Some(k) => FailureEvent::index_at(spec.failure_step, k),
        None => FailureEvent::random_at(spec.failure_step),
    }];
    let mut nominal = base.clone();
    nominal.failure_schedule.clear();
    let failure = run_seeds(spec, &failing, &base)?;
    let calm = run_seeds(spec, &nominal, &base)?;
    let dir = spec.output_dir.join("failure_eval");
    let mut recovery = Vec::new();
    for (i, seed) in spec.seeds.iter().enumerate() {
        write_rows(&dir.join("failure").join(format!("seed_{seed}.csv")), &failure[i])?;
        write_rows(&dir.join("nominal").join(format!("seed_{seed}.csv")), &calm[i])?;
        for (e, rows) in failure[i].iter().enumerate() {
            let cov: Vec<f64> = rows.iter().map(|r| r.c_cov).collect();
            if let Some(r) = recovery_stats(&cov, spec.failure_step) {
                recovery.push(RecoveryRow {
                    seed: *seed,
                    episode: e,
                    pre_mean: r.pre_mean,
                    trough: r.trough,
                    trough_t: r.trough_t,
                    time_to_90: r.time_to_90,
                    final_mean: r.final_mean,
                });
            }
        }
    }
    let path = dir.join("recovery.csv");
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    for r in &recovery {
        w.serialize(r).map_err(csv_err(&path))?;
    }
    w.flush().map_err(io_err(&path))?;
    aggregate_traces(&failure).write_csv(&dir.join("failure_aggregate.csv"))?;
    aggregate_traces(&calm).write_csv(&dir.join("nominal_aggregate.csv"))?;
    Ok(FailureEvalOutcome {
        failure,
        nominal: calm,
        recovery,
    })
}

/// A numeric CSV: header plus rows, averaged over repeated x values.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub x: Vec<f64>,
    /// `columns[c][j]`: column `c + 1` at x index `j`.
    pub columns: Vec<Vec<f64>>,
}

pub fn read_numeric_csv(path: &Path) -> Result<Table, HarnessError> {
    let mut rdr = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let header: Vec<String> = rdr.headers().map_err(csv_err(path))?.iter().map(str::to_string).collect();
    if header.len() < 2 {
        return Err(HarnessError::Runtime(format!("{}: need an x column and at least one series", path.display())));
    }
    let mut groups: BTreeMap<u64, (f64, Vec<f64>, usize)> = BTreeMap::new();
    let mut order = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| HarnessError::Runtime(format!("{} line {line}: {e}", path.display())))?;
        let mut vals = Vec::with_capacity(header.len());
        for (c, field) in rec.iter().enumerate() {
            let v: f64 = if field.is_empty() {
                f64::NAN
            } else {
                field.trim().parse().map_err(|_| {
                    HarnessError::Runtime(format!(
                        "{} line {line}: column {} is not numeric: {field:?}",
                        path.display(),
                        header[c]
                    ))
                })?
            };
            vals.push(v);
        }
        if vals.len() != header.len() {
            return Err(HarnessError::Runtime(format!("{} line {line}: wrong field count", path.display())));
        }
        let key = vals[0].to_bits();
        let entry = groups.entry(key).or_insert_with(|| {
            order.push(key);
            (vals[0], vec![0.0; header.len() - 1], 0)
        });
        for (acc, v) in entry.1.iter_mut().zip(&vals[1..]) {
            *acc += v;
        }
        entry.2 += 1;
    }
    if order.is_empty() {
        return Err(HarnessError::Runtime(format!("{}: no data rows", path.display())));
    }
    let mut x = Vec::with_capacity(order.len());
    let mut columns = vec![Vec::with_capacity(order.len()); header.len() - 1];
    for key in order {
        let (xv, sums, n) = &groups[&key];
        x.push(*xv);
        for (c, s) in sums.iter().enumerate() {
            columns[c].push(s / *n as f64);
        }
    }
    Ok(Table { header, x, columns })
}

const PLOT_PREFERENCE: [&str; 7] = ["mean_reward", "utility", "c_cov", "handoffs", "e_eff", "jfi_rate", "active_uav_count"];

/// Aggregates CSVs that share a header (one per seed) and writes
/// `plot_data.csv` plus one SVG line chart with a 95% band per metric.
pub fn cmd_plot(inputs: &[PathBuf], out_dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    if inputs.is_empty() {
        return Err(HarnessError::Config("plot needs at least one CSV".into()));
    }
    let tables: Vec<Table> = inputs.iter().map(|p| read_numeric_csv(p)).collect::<Result<_, _>>()?;
    let first = &tables[0];
    for (t, p) in tables.iter().zip(inputs).skip(1) {
        if t.header != first.header {
            return Err(HarnessError::Runtime(format!("{}: header differs from {}", p.display(), inputs[0].display())));
        }
        if t.x != first.x {
            return Err(HarnessError::Runtime(format!("{}: x values differ from {}", p.display(), inputs[0].display())));
        }
    }
    let series_names = &first.header[1..];
    let mut picked: Vec<usize> = PLOT_PREFERENCE
        .iter()
        .filter_map(|m| series_names.iter().position(|n| n == m))
        .collect();
    if picked.is_empty() {
        picked = (0..series_names.len()).collect();
    }
    let names: Vec<String> = picked.iter().map(|&c| series_names[c].clone()).collect();
    let series: Vec<Vec<Vec<f64>>> = tables
        .iter()
        .map(|t| picked.iter().map(|&c| t.columns[c].clone()).collect())
        .collect();
    let agg = Aggregate::from_series(&first.header[0], first.x.clone(), &names, &series);
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut written = Vec::new();
    let data = out_dir.join("plot_data.csv");
    agg.write_csv(&data)?;
    written.push(data);
    for (name, bands) in &agg.columns {
        let path = out_dir.join(format!("{name}.svg"));
        fs::write(&path, line_chart_svg(name, &agg.x_name, &agg.x, bands)).map_err(io_err(&path))?;
        written.push(path);
    }
    Ok(written)
}

pub fn line_chart_svg(title: &str, x_name: &str, x: &[f64], bands: &[Interval]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const L: f64 = 70.0;
    const R: f64 = 20.0;
    const T: f64 = 40.0;
    const B: f64 = 50.0;
    let finite = |v: f64| v.is_finite();
    let (x0, x1) = x.iter().copied().filter(|v| finite(*v)).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (y0, y1) = bands
        .iter()
        .flat_map(|b| [b.lo, b.hi, b.mean])
        .filter(|v| finite(*v))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let pad = |lo: f64, hi: f64| if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) };
    let (x0, x1) = if x0.is_finite() { pad(x0, x1) } else { (0.0, 1.0) };
    let (y0, y1) = if y0.is_finite() { pad(y0, y1) } else { (0.0, 1.0) };
    let px = |v: f64| L + (v - x0) / (x1 - x0) * (W - L - R);
    let py = |v: f64| H - B - (v - y0) / (y1 - y0) * (H - T - B);
    let pts = |f: &dyn Fn(&Interval) -> f64, idx: &mut dyn Iterator<Item = usize>| {
        idx.filter(|&j| finite(f(&bands[j])))
            .map(|j| format!("{:.2},{:.2}", px(x[j]), py(f(&bands[j]))))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let upper = pts(&|b| b.hi, &mut (0..x.len()));
    let lower = pts(&|b| b.lo, &mut (0..x.len()).rev());
    let mean = pts(&|b| b.mean, &mut (0..x.len()));
    format!(
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">
<rect width="{W}" height="{H}" fill="white"/>
<text x="{tx}" y="24" font-family="sans-serif" font-size="16" text-anchor="middle">{title}</text>
<rect x="{L}" y="{T}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>
<polygon points="{upper} {lower}" fill="#1f77b4" fill-opacity="0.25" stroke="none"/>
<polyline points="{mean}" fill="none" stroke="#1f77b4" stroke-width="1.5"/>
<text x="{L}" y="{xl}" font-family="sans-serif" font-size="11">{x0}</text>
<text x="{xr}" y="{xl}" font-family="sans-serif" font-size="11" text-anchor="end">{x1}</text>
<text x="{tx}" y="{xn}" font-family="sans-serif" font-size="12" text-anchor="middle">{x_name}</text>
<text x="{yl}" y="{yb}" font-family="sans-serif" font-size="11" text-anchor="end">{y0:.4}</text>
<text x="{yl}" y="{yt}" font-family="sans-serif" font-size="11" text-anchor="end">{y1:.4}</text>
</svg>
"##,
        tx = W / 2.0,
        pw = W - L - R,
        ph = H - T - B,
        xl = H - B + 16.0,
        xr = W - R,
        xn = H - 12.0,
        yl = L - 6.0,
        yb = H - B,
        yt = T + 10.0,
    )
}

/// Parses and validates a spec; returns the fully resolved scenario as TOML.
pub fn cmd_validate(spec: &ExperimentSpec) -> Result<String, HarnessError> {
    let scenario = spec.scenario_config()?;
    let mut out = spec.to_toml_string()?;
    out.push_str("\n# resolved scenario\n");
    out.push_str(&scenario.to_toml_string()?);
    Ok(out)
}
