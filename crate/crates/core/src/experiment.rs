//! Config-driven experiment runner.
//!
//! A run evaluates every (method, seed) cell: the stream is generated (or
//! loaded) per seed, rolled into tasks, split at `split_time`, each method
//! is fit on the train tasks where it has something to fit, and the test
//! tasks are forecast and scored. Cells are independent; a failing cell is
//! recorded and the others proceed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{baseline_weights, ForgettingSpec};
use crate::downstream::{fit_predict, Downstream, LinearOptions};
use crate::drift::{generate_abrupt, generate_gradual, AbruptDriftSpec, GeneratedStream, GradualDriftSpec};
use crate::error::{Error, Result};
use crate::metrics::{Metric, MetricReport, PeriodPredictions};
use crate::proxy::SampleWeights;
use crate::resampler::ResamplerModel;
use crate::stream::{generate_tasks, split_tasks, AdaptationTask, TaskParams, TimeIndexedStream};
use crate::trainer::{
    prepare_tasks, task_weights, train_prepared, OptimizerPath, TrainConfig, TrainedResampler,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Scenario {
    Gradual(GradualDriftSpec),
    Abrupt(AbruptDriftSpec),
    Csv { path: PathBuf, period_length: u64 },
}

impl Scenario {
    pub fn tag(&self) -> &'static str {
        match self {
            Scenario::Gradual(_) => "gradual",
            Scenario::Abrupt(_) => "abrupt",
            Scenario::Csv { .. } => "csv",
        }
    }

    /// Stream for one seed. Synthetic scenarios offset their generator seed
    /// by the run seed; CSV streams ignore it.
    pub fn materialize(&self, seed: u64) -> Result<(TimeIndexedStream, Option<GeneratedStream>)> {
        match self {
            Scenario::Gradual(spec) => {
                let spec = GradualDriftSpec {
                    seed: spec.seed.wrapping_add(seed),
                    ..spec.clone()
                };
                let g = generate_gradual(&spec)?;
                Ok((g.stream.clone(), Some(g)))
            }
            Scenario::Abrupt(spec) => {
                let spec = AbruptDriftSpec {
                    seed: spec.seed.wrapping_add(seed),
                    ..spec.clone()
                };
                let g = generate_abrupt(&spec)?;
                Ok((g.stream.clone(), Some(g)))
            }
            Scenario::Csv { path, period_length } => {
                Ok((TimeIndexedStream::from_csv_path(path, *period_length)?, None))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub memory_k: u64,
    /// Test window length; defaults to `interval` so consecutive test
    /// windows tile the evaluation period.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon_tau: Option<u64>,
    pub interval: u64,
    pub split_time: i64,
    #[serde(default)]
    pub allow_partial_memory: bool,
}

impl TaskConfig {
    pub fn params(&self) -> TaskParams {
        TaskParams {
            memory_k: self.memory_k,
            horizon_tau: self.horizon_tau.unwrap_or(self.interval),
            interval: self.interval,
            allow_partial_memory: self.allow_partial_memory,
        }
    }
}

fn default_lags() -> usize {
    4
}
fn default_temperature() -> f64 {
    1.0
}
fn default_validation_fraction() -> f64 {
    0.25
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DdgdaParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default = "default_lags")]
    pub lags: usize,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    /// Feature period in ticks; defaults to the stream's period length.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub period_length: Option<u64>,
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_batch")]
    pub batch: usize,
    #[serde(default = "d_sigma")]
    pub sigma: f64,
    #[serde(default = "d_gho_steps")]
    pub gho_steps: usize,
    #[serde(default = "d_gho_inner_lr")]
    pub gho_inner_lr: f64,
}

fn d_lr() -> f64 {
    TrainConfig::default().learning_rate
}
fn d_epochs() -> usize {
    TrainConfig::default().epochs
}
fn d_batch() -> usize {
    TrainConfig::default().batch
}
fn d_sigma() -> f64 {
    TrainConfig::default().sigma
}
fn d_gho_steps() -> usize {
    TrainConfig::default().gho_steps
}
fn d_gho_inner_lr() -> f64 {
    TrainConfig::default().gho_inner_lr
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForgettingParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// Candidate decay rates (gf_exp) or slopes (gf_lin) per tick. Defaults
    /// to a built-in grid; for gf_lin the default scales with memory_k.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<Vec<f64>>,
    /// Trailing share of train tasks used to select from the grid.
    #[serde(default = "default_validation_fraction")]
    pub validation_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RrParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MethodConfig {
    DdgdaClosed(DdgdaParams),
    DdgdaGho(DdgdaParams),
    Rr(RrParams),
    GfLin(ForgettingParams),
    GfExp(ForgettingParams),
}

impl MethodConfig {
    pub fn kind(&self) -> &'static str {
        match self {
            MethodConfig::DdgdaClosed(_) => "ddgda_closed",
            MethodConfig::DdgdaGho(_) => "ddgda_gho",
            MethodConfig::Rr(_) => "rr",
            MethodConfig::GfLin(_) => "gf_lin",
            MethodConfig::GfExp(_) => "gf_exp",
        }
    }

    pub fn name(&self) -> String {
        let custom = match self {
            MethodConfig::DdgdaClosed(p) | MethodConfig::DdgdaGho(p) => p.name.clone(),
            MethodConfig::Rr(p) => p.name.clone(),
            MethodConfig::GfLin(p) | MethodConfig::GfExp(p) => p.name.clone(),
        };
        custom.unwrap_or_else(|| self.kind().to_string())
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub scenario: Scenario,
    pub tasks: TaskConfig,
    pub methods: Vec<MethodConfig>,
    #[serde(default)]
    pub downstream: Downstream,
    pub metrics: Vec<Metric>,
    pub seeds: Vec<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub linear: LinearOptions,
    /// Write per-task resampling probabilities for every cell.
    #[serde(default)]
    pub dump_weights: bool,
    /// Write trained resampler parameters for every ddgda cell.
    #[serde(default)]
    pub save_models: bool,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        let mut cfg: Self = toml::from_str(&text)?;
        // relative CSV paths resolve against the config file
        if let Scenario::Csv { path: csv, .. } = &mut cfg.scenario {
            if csv.is_relative() {
                if let Some(dir) = path.as_ref().parent() {
                    *csv = dir.join(&*csv);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::Config("`methods` must list at least one method".into()));
        }
        if self.metrics.is_empty() {
            return Err(Error::Config("`metrics` must list at least one metric".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("`seeds` must list at least one seed".into()));
        }
        let mut names: Vec<String> = self.methods.iter().map(MethodConfig::name).collect();
        names.sort();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Config(format!(
                "duplicate method name `{}`; set `name` to disambiguate",
                w[0]
            )));
        }
        let p = self.tasks.params();
        if p.memory_k == 0 || p.horizon_tau == 0 || p.interval == 0 {
            return Err(Error::Config(
                "tasks.memory_k, tasks.horizon_tau and tasks.interval must be >= 1".into(),
            ));
        }
        for m in &self.methods {
            match m {
                MethodConfig::DdgdaClosed(d) | MethodConfig::DdgdaGho(d) => {
                    self.train_config(m, d, 0).validate().map_err(|e| {
                        Error::Config(format!("method `{}`: {e}", m.name()))
                    })?;
                    if !(d.temperature > 0.0) {
                        return Err(Error::Config(format!(
                            "method `{}`: temperature must be positive",
                            m.name()
                        )));
                    }
                }
                MethodConfig::GfLin(f) | MethodConfig::GfExp(f) => {
                    if !(f.validation_fraction > 0.0 && f.validation_fraction <= 1.0) {
                        return Err(Error::Config(format!(
                            "method `{}`: validation_fraction must be in (0, 1]",
                            m.name()
                        )));
                    }
                    if f.grid.as_ref().is_some_and(Vec::is_empty) {
                        return Err(Error::Config(format!("method `{}`: empty grid", m.name())));
                    }
                }
                MethodConfig::Rr(_) => {}
            }
        }
        if let Scenario::Csv { path, .. } = &self.scenario {
            if !path.exists() {
                return Err(Error::Config(format!(
                    "scenario CSV `{}` does not exist",
                    path.display()
                )));
            }
        }
        Ok(())
    }

    fn train_config(&self, method: &MethodConfig, d: &DdgdaParams, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: d.learning_rate,
            epochs: d.epochs,
            batch: d.batch,
            sigma: d.sigma,
            ridge_lambda: self.linear.ridge_lambda,
            fit_intercept: self.linear.fit_intercept,
            seed,
            optimizer_path: match method {
                MethodConfig::DdgdaGho(_) => OptimizerPath::Gho,
                _ => OptimizerPath::ClosedForm,
            },
            gho_steps: d.gho_steps,
            gho_inner_lr: d.gho_inner_lr,
        }
    }

    pub fn scenario_name(&self) -> String {
        self.name
            .clone()
            .unwrap_or_else(|| self.scenario.tag().to_string())
    }
}

/// One `(task_time, sample_timestamp, q)` row of a weight dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightRow {
    pub task_time: i64,
    pub sample_timestamp: i64,
    pub q: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub method: String,
    pub kind: String,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<MetricReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Selected decay rate/slope for forgetting baselines.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tuned_rate: Option<f64>,
    /// `(candidate, validation MSE)` pairs of the grid search.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub validation_grid: Vec<(f64, f64)>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub train_loss_history: Vec<f64>,
    /// Test predictions in task order, concatenated.
    #[serde(skip)]
    pub predictions: Vec<f64>,
    #[serde(skip)]
    pub weights: Vec<WeightRow>,
    #[serde(skip)]
    pub trained: Option<TrainedResampler>,
}

impl CellReport {
    fn failed(method: &MethodConfig, seed: u64, err: &Error) -> Self {
        Self {
            method: method.name(),
            kind: method.kind().to_string(),
            seed,
            report: None,
            error: Some(err.to_string()),
            tuned_rate: None,
            validation_grid: Vec::new(),
            train_loss_history: Vec::new(),
            predictions: Vec::new(),
            weights: Vec::new(),
            trained: None,
        }
    }

    pub fn metric(&self, m: Metric) -> Option<f64> {
        self.report.as_ref().and_then(|r| r.get(m))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: ExperimentConfig,
    pub cells: Vec<CellReport>,
    pub artifacts: Vec<String>,
    pub wall_time_secs: f64,
}

impl RunManifest {
    pub fn failed_cells(&self) -> usize {
        self.cells.iter().filter(|c| c.error.is_some()).count()
    }

    pub fn cell(&self, method: &str, seed: u64) -> Option<&CellReport> {
        self.cells.iter().find(|c| c.method == method && c.seed == seed)
    }

    /// Flat metric table, one row per cell, in config order.
    pub fn metrics_csv(&self) -> String {
        let metrics = &self.config.metrics;
        let mut out = String::from("scenario,method,seed,sample_count");
        for m in metrics {
            let _ = write!(out, ",{m}");
        }
        out.push_str(",error\n");
        let scenario = self.config.scenario_name();
        for c in &self.cells {
            let _ = write!(out, "{},{},{}", csv_field(&scenario), csv_field(&c.method), c.seed);
            match &c.report {
                Some(r) => {
                    let _ = write!(out, ",{}", r.sample_count);
                    for m in metrics {
                        let _ = write!(out, ",{}", r.get(*m).map(|v| v.to_string()).unwrap_or_default());
                    }
                }
                None => {
                    out.push(',');
                    for _ in metrics {
                        out.push(',');
                    }
                }
            }
            let _ = writeln!(out, ",{}", csv_field(c.error.as_deref().unwrap_or("")));
        }
        out
    }

    /// Write `manifest.json`, `metrics.csv` and any requested weight dumps
    /// and model files under `dir`, recording their paths as artifacts.
    pub fn write_outputs(&mut self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut artifacts = Vec::new();
        for c in &self.cells {
            if !c.weights.is_empty() {
                let path = dir.join(format!("weights_{}_seed{}.csv", c.method, c.seed));
                let mut w = csv::Writer::from_path(&path)?;
                w.write_record(["task_time", "sample_timestamp", "q"])?;
                for r in &c.weights {
                    w.write_record([r.task_time.to_string(), r.sample_timestamp.to_string(), r.q.to_string()])?;
                }
                w.flush()?;
                artifacts.push(path.display().to_string());
            }
            if let Some(t) = &c.trained {
                let path = dir.join(format!("model_{}_seed{}.json", c.method, c.seed));
                std::fs::write(&path, t.to_json()?)?;
                artifacts.push(path.display().to_string());
            }
        }
        let csv_path = dir.join("metrics.csv");
        std::fs::write(&csv_path, self.metrics_csv())?;
        artifacts.push(csv_path.display().to_string());
        let manifest_path = dir.join("manifest.json");
        artifacts.push(manifest_path.display().to_string());
        self.artifacts = artifacts;
        std::fs::write(&manifest_path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn evaluate_tasks<F>(
    tasks: &[AdaptationTask<'_>],
    downstream: &Downstream,
    linear: LinearOptions,
    mut weights_for: F,
) -> Result<(Vec<PeriodPredictions>, Vec<WeightRow>)>
where
    F: FnMut(&AdaptationTask<'_>) -> Result<SampleWeights>,
{
    let mut periods = Vec::with_capacity(tasks.len());
    let mut rows = Vec::new();
    for task in tasks {
        let q = weights_for(task)?;
        let test = task.test_window();
        let yhat = fit_predict(downstream, task.train_window(), &q, test, linear)?;
        let samples = task.stream().samples();
        let start = task.test_indices().start;
        periods.push(PeriodPredictions {
            y: test.iter().map(|s| s.label).collect(),
            yhat,
            previous: (start..start + test.len()).map(|i| samples[i - 1].label).collect(),
        });
        rows.extend(task.train_window().iter().zip(q.values()).map(|(s, &q)| WeightRow {
            task_time: task.task_time(),
            sample_timestamp: s.timestamp,
            q,
        }));
    }
    Ok((periods, rows))
}

fn pooled_mse(periods: &[PeriodPredictions]) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for p in periods {
        for (y, f) in p.y.iter().zip(&p.yhat) {
            sum += (y - f) * (y - f);
            n += 1;
        }
    }
    sum / n.max(1) as f64
}

fn default_grid(method: &MethodConfig, memory_k: u64) -> Vec<f64> {
    match method {
        MethodConfig::GfLin(_) => {
            let full = 1.0 / (memory_k.max(2) - 1) as f64;
            [0.0, 0.25, 0.5, 0.75, 1.0].iter().map(|f| f * full).collect()
        }
        _ => vec![
            0.0, 0.0025, 0.005, 0.01, 0.02, 0.04, 0.08, 0.16, 0.32, 0.64, 1.28,
        ],
    }
}

struct SeedData<'a> {
    train: Vec<AdaptationTask<'a>>,
    test: Vec<AdaptationTask<'a>>,
    all: Vec<AdaptationTask<'a>>,
}

fn run_cell(
    cfg: &ExperimentConfig,
    method: &MethodConfig,
    seed: u64,
    data: &SeedData<'_>,
    period_length: u64,
) -> Result<CellReport> {
    let mut cell = CellReport::failed(method, seed, &Error::EmptyInput);
    cell.error = None;
    let linear = cfg.linear;
    let weights: Box<dyn Fn(&AdaptationTask<'_>) -> Result<SampleWeights> + Sync> = match method {
        MethodConfig::Rr(_) => {
            let spec = ForgettingSpec::rr();
            Box::new(move |t| baseline_weights(&spec, t))
        }
        MethodConfig::GfLin(f) | MethodConfig::GfExp(f) => {
            let grid = f
                .grid
                .clone()
                .unwrap_or_else(|| default_grid(method, cfg.tasks.memory_k));
            let n = data.train.len();
            let n_val = ((n as f64 * f.validation_fraction).ceil() as usize).clamp(1, n);
            let val = &data.train[n - n_val..];
            let make = |rate: f64| match method {
                MethodConfig::GfLin(_) => ForgettingSpec::gf_lin(rate),
                _ => ForgettingSpec::gf_exp(rate),
            };
            let mut best: Option<(f64, f64)> = None;
            for &rate in &grid {
                let spec = make(rate);
                let (periods, _) =
                    evaluate_tasks(val, &cfg.downstream, linear, |t| baseline_weights(&spec, t))?;
                let score = pooled_mse(&periods);
                cell.validation_grid.push((rate, score));
                if best.is_none_or(|(_, s)| score < s) {
                    best = Some((rate, score));
                }
            }
            let rate = best.map(|b| b.0).unwrap_or(0.0);
            cell.tuned_rate = Some(rate);
            let spec = make(rate);
            Box::new(move |t| baseline_weights(&spec, t))
        }
        MethodConfig::DdgdaClosed(d) | MethodConfig::DdgdaGho(d) => {
            let tcfg = cfg.train_config(method, d, seed);
            let init = ResamplerModel::zeros(
                d.lags,
                d.period_length.unwrap_or(period_length),
                d.temperature,
            );
            let prepared = prepare_tasks(&init, &data.train, &tcfg)?;
            let trained = train_prepared(&prepared, init, &tcfg)?;
            cell.train_loss_history = trained.loss_history.clone();
            let model = trained.model.clone();
            if cfg.save_models {
                cell.trained = Some(trained);
            }
            Box::new(move |t| task_weights(&model, t, &tcfg))
        }
    };
    let (periods, _) = evaluate_tasks(&data.test, &cfg.downstream, linear, &weights)?;
    if cfg.dump_weights {
        let mut all_rows = Vec::new();
        for t in &data.all {
            let q = weights(t)?;
            all_rows.extend(t.train_window().iter().zip(q.values()).map(|(s, &q)| WeightRow {
                task_time: t.task_time(),
                sample_timestamp: s.timestamp,
                q,
            }));
        }
        cell.weights = all_rows;
    }
    cell.predictions = periods.iter().flat_map(|p| p.yhat.iter().copied()).collect();
    let mut meta = BTreeMap::new();
    meta.insert("scenario".to_string(), cfg.scenario_name());
    meta.insert("method".to_string(), method.name());
    meta.insert("seed".to_string(), seed.to_string());
    meta.insert("downstream".to_string(), cfg.downstream.tag().to_string());
    meta.insert("test_tasks".to_string(), data.test.len().to_string());
    meta.insert("train_tasks".to_string(), data.train.len().to_string());
    meta.insert("ridge_lambda".to_string(), cfg.linear.ridge_lambda.to_string());
    meta.insert("fit_intercept".to_string(), cfg.linear.fit_intercept.to_string());
    cell.report = Some(MetricReport::evaluate(&periods, &cfg.metrics, meta)?);
    Ok(cell)
}

fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Vec<CellReport> {
    let fail_all = |e: &Error| {
        cfg.methods
            .iter()
            .map(|m| CellReport::failed(m, seed, e))
            .collect::<Vec<_>>()
    };
    let stream = match cfg.scenario.materialize(seed) {
        Ok((s, _)) => s,
        Err(e) => return fail_all(&e),
    };
    let all = match generate_tasks(&stream, &cfg.tasks.params()) {
        Ok(t) => t,
        Err(e) => return fail_all(&e),
    };
    let split = match split_tasks(all.clone(), cfg.tasks.split_time) {
        Ok(s) => s,
        Err(e) => return fail_all(&e),
    };
    let data = SeedData {
        train: split.train_tasks,
        test: split.test_tasks,
        all,
    };
    cfg.methods
        .par_iter()
        .map(|m| {
            run_cell(cfg, m, seed, &data, stream.period_length())
                .unwrap_or_else(|e| CellReport::failed(m, seed, &e))
        })
        .collect()
}

/// Execute every (method, seed) cell. Results are ordered seed-major in
/// config order and do not depend on thread scheduling.
pub fn run(config: &ExperimentConfig) -> Result<RunManifest> {
    config.validate()?;
    let start = Instant::now();
    let per_seed: Vec<Vec<CellReport>> = config
        .seeds
        .par_iter()
        .map(|&s| run_seed(config, s))
        .collect();
    Ok(RunManifest {
        config: config.clone(),
        cells: per_seed.into_iter().flatten().collect(),
        artifacts: Vec::new(),
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}

fn path_segments(path: &str) -> Result<Vec<&str>> {
    let segs: Vec<&str> = path.split('.').collect();
    if path.is_empty() || segs.iter().any(|s| s.is_empty()) {
        return Err(Error::InvalidParamPath(path.to_string()));
    }
    Ok(segs)
}

fn lookup<'v>(root: &'v toml::Value, path: &str) -> Option<&'v toml::Value> {
    let mut cur = root;
    for seg in path.split('.') {
        cur = match cur {
            toml::Value::Table(t) => t.get(seg)?,
            toml::Value::Array(a) => a.get(seg.parse::<usize>().ok()?)?,
            _ => return None,
        };
    }
    Some(cur)
}

fn is_scalar(v: &toml::Value) -> bool {
    !matches!(v, toml::Value::Table(_) | toml::Value::Array(_))
}

/// Copy of `config` with the scalar at `param_path` (dotted, array indices
/// as numbers, e.g. `methods.0.learning_rate`) set to `value`.
pub fn with_param(config: &ExperimentConfig, param_path: &str, value: &toml::Value) -> Result<ExperimentConfig> {
    let segs = path_segments(param_path)?;
    let invalid = || Error::InvalidParamPath(param_path.to_string());
    if !is_scalar(value) {
        return Err(invalid());
    }
    let mut root = toml::Value::try_from(config)?;
    let existed = lookup(&root, param_path).is_some();
    {
        let (leaf, parents) = segs.split_last().ok_or_else(invalid)?;
        let mut cur = &mut root;
        for seg in parents {
            cur = match cur {
                toml::Value::Table(t) => t.get_mut(*seg).ok_or_else(invalid)?,
                toml::Value::Array(a) => a
                    .get_mut(seg.parse::<usize>().map_err(|_| invalid())?)
                    .ok_or_else(invalid)?,
                _ => return Err(invalid()),
            };
        }
        match cur {
            toml::Value::Table(t) => {
                if t.get(*leaf).is_some_and(|v| !is_scalar(v)) {
                    return Err(invalid());
                }
                t.insert((*leaf).to_string(), value.clone());
            }
            toml::Value::Array(a) => {
                let i = leaf.parse::<usize>().map_err(|_| invalid())?;
                let slot = a.get_mut(i).ok_or_else(invalid)?;
                if !is_scalar(slot) {
                    return Err(invalid());
                }
                *slot = value.clone();
            }
            _ => return Err(invalid()),
        }
    }
    let updated: ExperimentConfig = root.try_into().map_err(|e: toml::de::Error| {
        if existed {
            Error::Config(format!("setting `{param_path}`: {e}"))
        } else {
            invalid()
        }
    })?;
    // the field must survive a round trip, which rejects keys the schema drops
    let echo = toml::Value::try_from(&updated)?;
    match lookup(&echo, param_path) {
        Some(v) if v == value || numeric_eq(v, value) => {}
        _ => return Err(invalid()),
    }
    updated.validate()?;
    Ok(updated)
}

fn numeric_eq(a: &toml::Value, b: &toml::Value) -> bool {
    match (a, b) {
        (toml::Value::Float(x), toml::Value::Integer(y)) | (toml::Value::Integer(y), toml::Value::Float(x)) => {
            *x == *y as f64
        }
        _ => false,
    }
}

/// Parse a sweep value as a TOML scalar, falling back to a string.
pub fn parse_value(text: &str) -> toml::Value {
    let text = text.trim();
    toml::from_str::<toml::Table>(&format!("v = {text}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(text.to_string()))
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub param_path: String,
    pub values: Vec<toml::Value>,
    pub manifests: Vec<RunManifest>,
}

impl SweepResult {
    /// One row per (value, method, seed) with the configured metrics.
    pub fn csv(&self) -> String {
        let metrics = self
            .manifests
            .first()
            .map(|m| m.config.metrics.clone())
            .unwrap_or_default();
        let mut out = String::from("param_value,method,seed");
        for m in &metrics {
            let _ = write!(out, ",{m}");
        }
        out.push_str(",error\n");
        for (value, manifest) in self.values.iter().zip(&self.manifests) {
            let v = match value {
                toml::Value::String(s) => s.clone(),
                other => other.to_string(),
            };
            for c in &manifest.cells {
                let _ = write!(out, "{},{},{}", csv_field(&v), csv_field(&c.method), c.seed);
                for m in &metrics {
                    let _ = write!(out, ",{}", c.metric(*m).map(|x| x.to_string()).unwrap_or_default());
                }
                let _ = writeln!(out, ",{}", csv_field(c.error.as_deref().unwrap_or("")));
            }
        }
        out
    }
}

/// One run per value with shared seeds. Every value is applied and
/// validated before the first run starts.
pub fn sweep(config: &ExperimentConfig, param_path: &str, values: &[toml::Value]) -> Result<SweepResult> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let configs = values
        .iter()
        .map(|v| with_param(config, param_path, v))
        .collect::<Result<Vec<_>>>()?;
    let manifests = configs.iter().map(run).collect::<Result<Vec<_>>>()?;
    Ok(SweepResult {
        param_path: param_path.to_string(),
        values: values.to_vec(),
        manifests,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
        seeds = [0]
        metrics = ["mse"]

        [scenario]
        kind = "gradual"
        feature_dim = 3
        total_length = 200
        rotation_rate = 0.0
        noise_std = 0.0
        seed = 1
        period_length = 10

        [tasks]
        memory_k = 60
        interval = 10
        split_time = 120

        [[methods]]
        kind = "rr"

        [[methods]]
        kind = "ddgda_closed"
        lags = 2
        epochs = 2
    "#;

    #[test]
    fn parses_and_validates() {
        let cfg = ExperimentConfig::from_toml_str(BASE).unwrap();
        assert_eq!(cfg.methods.len(), 2);
        assert_eq!(cfg.tasks.params().horizon_tau, 10);
        assert_eq!(cfg.downstream, Downstream::Linear);
    }

    #[test]
    fn unknown_field_rejected() {
        let bad = BASE.replace("memory_k = 60", "memory_k = 60\nmemroy = 3");
        let err = ExperimentConfig::from_toml_str(&bad).unwrap_err();
        assert!(err.to_string().contains("memroy"), "{err}");
    }

    #[test]
    fn empty_lists_rejected() {
        let bad = BASE.replace("seeds = [0]", "seeds = []");
        assert!(ExperimentConfig::from_toml_str(&bad).is_err());
        let bad = BASE.replace("metrics = [\"mse\"]", "metrics = []");
        assert!(ExperimentConfig::from_toml_str(&bad).is_err());
    }

    #[test]
    fn param_paths() {
        let cfg = ExperimentConfig::from_toml_str(BASE).unwrap();
        let c = with_param(&cfg, "tasks.interval", &toml::Value::Integer(5)).unwrap();
        assert_eq!(c.tasks.interval, 5);
        let c = with_param(&cfg, "methods.1.learning_rate", &toml::Value::Float(0.5)).unwrap();
        match &c.methods[1] {
            MethodConfig::DdgdaClosed(d) => assert_eq!(d.learning_rate, 0.5),
            other => panic!("{other:?}"),
        }
        let c = with_param(&cfg, "tasks.horizon_tau", &toml::Value::Integer(3)).unwrap();
        assert_eq!(c.tasks.params().horizon_tau, 3);
        for bad in ["tasks.nope", "tasks", "methods.7.lags", "", "tasks..interval", "scenario.kind.x"] {
            assert!(
                matches!(with_param(&cfg, bad, &toml::Value::Integer(1)), Err(Error::InvalidParamPath(_))),
                "{bad}"
            );
        }
    }

    #[test]
    fn value_parsing() {
        assert_eq!(parse_value("3"), toml::Value::Integer(3));
        assert_eq!(parse_value("0.5"), toml::Value::Float(0.5));
        assert_eq!(parse_value("true"), toml::Value::Boolean(true));
        assert_eq!(parse_value("gho"), toml::Value::String("gho".into()));
    }
}
