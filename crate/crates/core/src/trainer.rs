//! Bi-level training of the resampler and forecasting with it.
//!
//! Upper level: `min_Θ Σ_tasks L_Θ(task)` with
//! `L_Θ(task) = 1/(2σ²) Σ_{test} (x·φ(Θ) − y)²`. Lower level: `φ(Θ)` is the
//! weighted ridge fit on the train window under `q = M_Θ(features)`, either
//! in closed form or by unrolled gradient descent.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::downstream::{fit_predict, Downstream, LinearOptions};
use crate::error::{Error, Result};
use crate::proxy::{
    hypergradient_q, solve_unrolled, solve_wls, unrolled_hypergradient_q, DesignMatrix,
};
use crate::resampler::{
    compute_weights, FeatureConfig, ResamplerModel, SimilarityExtractor, SimilarityFeatures,
};
use crate::stream::AdaptationTask;

pub use crate::divergence::kl_normal;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerPath {
    ClosedForm,
    Gho,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Tasks per gradient step.
    pub batch: usize,
    /// Constant σ of the Gaussian conditional; scales the loss by 1/σ².
    pub sigma: f64,
    pub ridge_lambda: f64,
    pub fit_intercept: bool,
    pub seed: u64,
    pub optimizer_path: OptimizerPath,
    pub gho_steps: usize,
    pub gho_inner_lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            epochs: 50,
            batch: 8,
            sigma: 1.0,
            ridge_lambda: 1e-6,
            fit_intercept: true,
            seed: 0,
            optimizer_path: OptimizerPath::ClosedForm,
            gho_steps: 100,
            gho_inner_lr: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v > 0.0 && v.is_finite();
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be finite and >= 0".into()));
        }
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::Config("epochs and batch must be >= 1".into()));
        }
        if !pos(self.sigma) {
            return Err(Error::Config("sigma must be positive".into()));
        }
        if !(self.ridge_lambda >= 0.0 && self.ridge_lambda.is_finite()) {
            return Err(Error::Config("ridge_lambda must be finite and >= 0".into()));
        }
        if self.optimizer_path == OptimizerPath::Gho
            && (self.gho_steps == 0 || !pos(self.gho_inner_lr))
        {
            return Err(Error::Config("gho needs gho_steps >= 1 and gho_inner_lr > 0".into()));
        }
        Ok(())
    }

    pub fn linear_options(&self) -> LinearOptions {
        LinearOptions {
            ridge_lambda: self.ridge_lambda,
            fit_intercept: self.fit_intercept,
        }
    }

    fn feature_config(&self, model: &ResamplerModel) -> FeatureConfig {
        FeatureConfig {
            period_length: model.period_length,
            lags: model.lags(),
            ridge_lambda: self.ridge_lambda,
            fit_intercept: self.fit_intercept,
        }
    }
}

/// A task with its Θ-independent pieces computed once.
#[derive(Debug, Clone)]
pub struct PreparedTask {
    pub task_time: i64,
    pub features: SimilarityFeatures,
    pub train: DesignMatrix,
    pub test: DesignMatrix,
}

pub fn prepare_task(
    model: &ResamplerModel,
    task: &AdaptationTask<'_>,
    cfg: &TrainConfig,
) -> Result<PreparedTask> {
    if task.train_window().is_empty() || task.test_window().is_empty() {
        return Err(Error::InvalidTaskParams(format!(
            "task at tick {} has an empty window",
            task.task_time()
        )));
    }
    let features = SimilarityExtractor::new(cfg.feature_config(model)).extract(task)?;
    Ok(PreparedTask {
        task_time: task.task_time(),
        features,
        train: DesignMatrix::from_samples(task.train_window(), cfg.fit_intercept)?,
        test: DesignMatrix::from_samples(task.test_window(), cfg.fit_intercept)?,
    })
}

pub fn prepare_tasks(
    model: &ResamplerModel,
    tasks: &[AdaptationTask<'_>],
    cfg: &TrainConfig,
) -> Result<Vec<PreparedTask>> {
    tasks
        .par_iter()
        .map(|t| prepare_task(model, t, cfg))
        .collect()
}

/// Upper-level loss and `∂L/∂Θ` for one prepared task.
pub fn prepared_task_loss(
    model: &ResamplerModel,
    task: &PreparedTask,
    cfg: &TrainConfig,
) -> Result<(f64, Vec<f64>)> {
    let q = compute_weights(model, &task.features)?;
    let scale = 1.0 / (cfg.sigma * cfg.sigma);
    let (loss, grad_q) = match cfg.optimizer_path {
        OptimizerPath::ClosedForm => {
            let sol = solve_wls(&task.train, &q, cfg.ridge_lambda)?;
            let (loss, mut g_phi) = task.test.squared_loss_and_grad(&sol.phi);
            g_phi.iter_mut().for_each(|g| *g *= scale);
            (loss * scale, hypergradient_q(&task.train, &q, &sol, &g_phi)?)
        }
        OptimizerPath::Gho => {
            let sol = solve_unrolled(
                &task.train,
                &q,
                cfg.ridge_lambda,
                cfg.gho_steps,
                cfg.gho_inner_lr,
            )?;
            let (loss, mut g_phi) = task.test.squared_loss_and_grad(&sol.phi);
            g_phi.iter_mut().for_each(|g| *g *= scale);
            (
                loss * scale,
                unrolled_hypergradient_q(&task.train, &q, &sol, &g_phi)?,
            )
        }
    };
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            task_time: task.task_time,
        });
    }
    Ok((loss, model.backprop(&task.features, q.values(), &grad_q)))
}

pub fn task_loss(
    model: &ResamplerModel,
    task: &AdaptationTask<'_>,
    cfg: &TrainConfig,
) -> Result<(f64, Vec<f64>)> {
    prepared_task_loss(model, &prepare_task(model, task, cfg)?, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedResampler {
    pub model: ResamplerModel,
    /// Mean task loss per epoch, evaluated at the parameters each batch saw.
    pub loss_history: Vec<f64>,
    pub config_echo: TrainConfig,
}

/// Flat on-disk form of a trained resampler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TrainedResamplerFile {
    parameters: Vec<f64>,
    temperature: f64,
    lags: usize,
    period_length: u64,
    loss_history: Vec<f64>,
    config_echo: TrainConfig,
}

impl TrainedResampler {
    pub fn untrained(model: ResamplerModel, cfg: TrainConfig) -> Self {
        Self {
            model,
            loss_history: Vec::new(),
            config_echo: cfg,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let file = TrainedResamplerFile {
            parameters: self.model.theta(),
            temperature: self.model.temperature,
            lags: self.model.lags(),
            period_length: self.model.period_length,
            loss_history: self.loss_history.clone(),
            config_echo: self.config_echo.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: TrainedResamplerFile = serde_json::from_str(text)?;
        let mut model = ResamplerModel::zeros(file.lags, file.period_length, file.temperature);
        model.set_theta(&file.parameters)?;
        Ok(Self {
            model,
            loss_history: file.loss_history,
            config_echo: file.config_echo,
        })
    }
}

pub fn train(
    tasks: &[AdaptationTask<'_>],
    init: ResamplerModel,
    cfg: &TrainConfig,
) -> Result<TrainedResampler> {
    cfg.validate()?;
    let prepared = prepare_tasks(&init, tasks, cfg)?;
    train_prepared(&prepared, init, cfg)
}

/// Minibatch gradient descent over tasks; task order is reshuffled each
/// epoch from `cfg.seed`.
pub fn train_prepared(
    tasks: &[PreparedTask],
    init: ResamplerModel,
    cfg: &TrainConfig,
) -> Result<TrainedResampler> {
    cfg.validate()?;
    if tasks.is_empty() {
        return Err(Error::Config("no training tasks".into()));
    }
    let mut model = init;
    let mut theta = model.theta();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..tasks.len()).collect();
    let mut loss_history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch) {
            let results: Vec<Result<(f64, Vec<f64>)>> = batch
                .par_iter()
                .map(|&i| prepared_task_loss(&model, &tasks[i], cfg))
                .collect();
            let mut grad = vec![0.0; theta.len()];
            for (&i, r) in batch.iter().zip(results) {
                let task_time = tasks[i].task_time;
                let (loss, g) = r.map_err(|e| match e {
                    Error::NonFiniteLoss { .. } | Error::NonFiniteLogits => {
                        Error::Divergence { epoch, task_time }
                    }
                    other => other,
                })?;
                epoch_loss += loss;
                for (a, b) in grad.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            let scale = cfg.learning_rate / batch.len() as f64;
            for (t, g) in theta.iter_mut().zip(&grad) {
                *t -= scale * g;
            }
            if theta.iter().any(|t| !t.is_finite()) {
                return Err(Error::Divergence {
                    epoch,
                    task_time: tasks[batch[0]].task_time,
                });
            }
            model.set_theta(&theta)?;
        }
        loss_history.push(epoch_loss / tasks.len() as f64);
    }
    Ok(TrainedResampler {
        model,
        loss_history,
        config_echo: cfg.clone(),
    })
}

/// Resampling probabilities the model assigns to a task's train window.
pub fn task_weights(
    model: &ResamplerModel,
    task: &AdaptationTask<'_>,
    cfg: &TrainConfig,
) -> Result<crate::proxy::SampleWeights> {
    let feats = SimilarityExtractor::new(cfg.feature_config(model)).extract(task)?;
    compute_weights(model, &feats)
}

/// Train `downstream` on the task's train window under the resampler's
/// probabilities and predict its test window.
pub fn forecast(
    model: &TrainedResampler,
    task: &AdaptationTask<'_>,
    downstream: &Downstream,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    let q = task_weights(&model.model, task, cfg)?;
    fit_predict(
        downstream,
        task.train_window(),
        &q,
        task.test_window(),
        cfg.linear_options(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::{baseline_weights, ForgettingSpec};
    use crate::drift::{generate_gradual, GradualDriftSpec};
    use crate::stream::{generate_tasks, TaskParams, TimeIndexedStream};

    fn stream(rate: f64, seed: u64) -> TimeIndexedStream {
        generate_gradual(&GradualDriftSpec {
            feature_dim: 3,
            total_length: 240,
            rotation_rate: rate,
            noise_std: 0.1,
            seed,
            samples_per_tick: 2,
            period_length: 10,
        })
        .unwrap()
        .stream
    }

    fn cfg() -> TrainConfig {
        TrainConfig {
            learning_rate: 0.01,
            epochs: 5,
            batch: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_learning_rate_is_noop() {
        let s = stream(0.02, 1);
        let tasks = generate_tasks(&s, &TaskParams::new(60, 10, 10)).unwrap();
        let mut init = ResamplerModel::zeros(2, 10, 1.0);
        init.set_theta(&[0.3, -0.2, 0.1, 0.5]).unwrap();
        let c = TrainConfig {
            learning_rate: 0.0,
            epochs: 1,
            ..cfg()
        };
        let out = train(&tasks, init.clone(), &c).unwrap();
        assert_eq!(out.model.theta(), init.theta());
        assert_eq!(out.loss_history.len(), 1);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let s = stream(0.03, 2);
        let tasks = generate_tasks(&s, &TaskParams::new(60, 10, 10)).unwrap();
        for path in [OptimizerPath::ClosedForm, OptimizerPath::Gho] {
            let c = TrainConfig {
                optimizer_path: path,
                gho_steps: 30,
                gho_inner_lr: 0.2,
                sigma: 0.7,
                ..cfg()
            };
            let mut model = ResamplerModel::zeros(2, 10, 1.5);
            model.set_theta(&[0.05, -0.03, 0.02, 0.4]).unwrap();
            let prepared = prepare_task(&model, &tasks[3], &c).unwrap();
            let (_, grad) = prepared_task_loss(&model, &prepared, &c).unwrap();
            let theta = model.theta();
            for k in 0..theta.len() {
                let h = 1e-5;
                let mut m = model.clone();
                let mut t = theta.clone();
                t[k] += h;
                m.set_theta(&t).unwrap();
                let up = prepared_task_loss(&m, &prepared, &c).unwrap().0;
                t[k] -= 2.0 * h;
                m.set_theta(&t).unwrap();
                let down = prepared_task_loss(&m, &prepared, &c).unwrap().0;
                let fd = (up - down) / (2.0 * h);
                assert!(
                    (fd - grad[k]).abs() <= 1e-5 * fd.abs().max(1e-3),
                    "{path:?} k={k}: fd {fd} vs {}",
                    grad[k]
                );
            }
            assert_eq!(grad[theta.len() - 1], 0.0);
        }
    }

    #[test]
    fn long_unroll_matches_closed_form_loss() {
        let s = stream(0.02, 3);
        let tasks = generate_tasks(&s, &TaskParams::new(60, 10, 10)).unwrap();
        let model = ResamplerModel::zeros(2, 10, 1.0);
        let closed = cfg();
        let gho = TrainConfig {
            optimizer_path: OptimizerPath::Gho,
            gho_steps: 10_000,
            gho_inner_lr: 0.05,
            ..cfg()
        };
        for task in tasks.iter().take(4) {
            let a = task_loss(&model, task, &closed).unwrap().0;
            let b = task_loss(&model, task, &gho).unwrap().0;
            assert!((a - b).abs() <= 1e-4 * a.max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let s = stream(0.03, 4);
        let tasks = generate_tasks(&s, &TaskParams::new(60, 10, 10)).unwrap();
        let c = TrainConfig {
            learning_rate: 0.001,
            epochs: 30,
            ..cfg()
        };
        let a = train(&tasks, ResamplerModel::zeros(3, 10, 1.0), &c).unwrap();
        let b = train(&tasks, ResamplerModel::zeros(3, 10, 1.0), &c).unwrap();
        assert_eq!(a.model.theta(), b.model.theta());
        assert_eq!(a.loss_history, b.loss_history);
        let first = a.loss_history[0];
        let last = *a.loss_history.last().unwrap();
        assert!(last < first, "{first} -> {last}");
    }

    #[test]
    fn untrained_forecast_equals_rr() {
        let s = stream(0.02, 5);
        let tasks = generate_tasks(&s, &TaskParams::new(60, 10, 10)).unwrap();
        let c = cfg();
        let model = TrainedResampler::untrained(ResamplerModel::zeros(2, 10, 1.0), c.clone());
        for task in &tasks {
            let ours = forecast(&model, task, &Downstream::Linear, &c).unwrap();
            let q = baseline_weights(&ForgettingSpec::rr(), task).unwrap();
            let rr = fit_predict(
                &Downstream::Linear,
                task.train_window(),
                &q,
                task.test_window(),
                c.linear_options(),
            )
            .unwrap();
            for (x, y) in ours.iter().zip(&rr) {
                assert!((x - y).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn json_round_trip() {
        let mut model = ResamplerModel::zeros(2, 10, 2.0);
        model.set_theta(&[1.0, -2.0, 0.5, 0.0]).unwrap();
        let t = TrainedResampler {
            model,
            loss_history: vec![3.0, 2.0],
            config_echo: cfg(),
        };
        let back = TrainedResampler::from_json(&t.to_json().unwrap()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn bad_config_rejected() {
        let s = stream(0.02, 6);
        let tasks = generate_tasks(&s, &TaskParams::new(60, 10, 10)).unwrap();
        let c = TrainConfig {
            sigma: 0.0,
            ..cfg()
        };
        assert!(train(&tasks, ResamplerModel::zeros(2, 10, 1.0), &c).is_err());
        assert!(train(&[], ResamplerModel::zeros(2, 10, 1.0), &cfg()).is_err());
    }
}
