//! Forecasting models trained under per-sample weights.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::dot;
use crate::proxy::{solve_wls, DesignMatrix, SampleWeights};
use crate::stream::Sample;

fn default_hidden() -> usize {
    16
}
fn default_mlp_epochs() -> usize {
    400
}
fn default_mlp_lr() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Downstream {
    Linear,
    /// One tanh hidden layer fit by full-batch gradient descent on the
    /// weighted squared loss.
    MlpSmall {
        #[serde(default = "default_hidden")]
        hidden: usize,
        #[serde(default = "default_mlp_epochs")]
        epochs: usize,
        #[serde(default = "default_mlp_lr")]
        learning_rate: f64,
        #[serde(default)]
        seed: u64,
    },
}

impl Default for Downstream {
    fn default() -> Self {
        Downstream::Linear
    }
}

impl Downstream {
    pub fn mlp_small() -> Self {
        Downstream::MlpSmall {
            hidden: default_hidden(),
            epochs: default_mlp_epochs(),
            learning_rate: default_mlp_lr(),
            seed: 0,
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            Downstream::Linear => "linear",
            Downstream::MlpSmall { .. } => "mlp_small",
        }
    }
}

/// Options shared by every linear fit in a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinearOptions {
    pub ridge_lambda: f64,
    pub fit_intercept: bool,
}

impl Default for LinearOptions {
    fn default() -> Self {
        Self {
            ridge_lambda: 1e-6,
            fit_intercept: true,
        }
    }
}

/// Fit `model` on `train` under `weights` and predict `test` in order.
pub fn fit_predict(
    model: &Downstream,
    train: &[Sample],
    weights: &SampleWeights,
    test: &[Sample],
    opts: LinearOptions,
) -> Result<Vec<f64>> {
    if test.is_empty() {
        return Ok(Vec::new());
    }
    match model {
        Downstream::Linear => {
            let design = DesignMatrix::from_samples(train, opts.fit_intercept)?;
            let sol = solve_wls(&design, weights, opts.ridge_lambda)?;
            let test_design = DesignMatrix::from_samples(test, opts.fit_intercept)?;
            Ok(test_design.predict(&sol.phi))
        }
        Downstream::MlpSmall {
            hidden,
            epochs,
            learning_rate,
            seed,
        } => {
            let mlp = Mlp::fit(train, weights, *hidden, *epochs, *learning_rate, *seed)?;
            Ok(test.iter().map(|s| mlp.predict(&s.features)).collect())
        }
    }
}

#[derive(Debug, Clone)]
struct Mlp {
    w1: Vec<Vec<f64>>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: f64,
}

impl Mlp {
    fn fit(
        train: &[Sample],
        weights: &SampleWeights,
        hidden: usize,
        epochs: usize,
        lr: f64,
        seed: u64,
    ) -> Result<Self> {
        if train.is_empty() || weights.len() != train.len() {
            return Err(Error::Downstream(format!(
                "{} training samples with {} weights",
                train.len(),
                weights.len()
            )));
        }
        if hidden == 0 {
            return Err(Error::Downstream("hidden width must be >= 1".into()));
        }
        let m = train[0].features.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (m as f64).sqrt();
        let mut net = Mlp {
            w1: (0..hidden)
                .map(|_| (0..m).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect())
                .collect(),
            b1: vec![0.0; hidden],
            w2: (0..hidden)
                .map(|_| rng.sample::<f64, _>(StandardNormal) / (hidden as f64).sqrt())
                .collect(),
            b2: 0.0,
        };
        let total: f64 = weights.values().iter().sum();
        if !(total > 0.0) {
            return Err(Error::Downstream("weights sum to zero".into()));
        }
        let q: Vec<f64> = weights.values().iter().map(|w| w / total).collect();
        let mut h = vec![0.0; hidden];
        for _ in 0..epochs {
            let mut gw1 = vec![vec![0.0; m]; hidden];
            let mut gb1 = vec![0.0; hidden];
            let mut gw2 = vec![0.0; hidden];
            let mut gb2 = 0.0;
            for (s, &qi) in train.iter().zip(&q) {
                if qi == 0.0 {
                    continue;
                }
                for k in 0..hidden {
                    h[k] = (dot(&net.w1[k], &s.features) + net.b1[k]).tanh();
                }
                let out = dot(&net.w2, &h) + net.b2;
                let d = qi * (out - s.label);
                gb2 += d;
                for k in 0..hidden {
                    gw2[k] += d * h[k];
                    let dh = d * net.w2[k] * (1.0 - h[k] * h[k]);
                    gb1[k] += dh;
                    for (g, x) in gw1[k].iter_mut().zip(&s.features) {
                        *g += dh * x;
                    }
                }
            }
            net.b2 -= lr * gb2;
            for k in 0..hidden {
                net.w2[k] -= lr * gw2[k];
                net.b1[k] -= lr * gb1[k];
                for (w, g) in net.w1[k].iter_mut().zip(&gw1[k]) {
                    *w -= lr * g;
                }
            }
        }
        if !net.b2.is_finite() || net.w2.iter().any(|w| !w.is_finite()) {
            return Err(Error::Downstream("mlp training diverged".into()));
        }
        Ok(net)
    }

    fn predict(&self, x: &[f64]) -> f64 {
        self.w1
            .iter()
            .zip(&self.b1)
            .zip(&self.w2)
            .map(|((w, b), v)| v * (dot(w, x) + b).tanh())
            .sum::<f64>()
            + self.b2
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(n: usize) -> Vec<Sample> {
        (0..n)
            .map(|i| {
                let x = i as f64 / n as f64 - 0.5;
                Sample::new(i as i64, vec![x], 0.8 * x + 0.1)
            })
            .collect()
    }

    #[test]
    fn linear_recovers_line() {
        let train = line(20);
        let pred = fit_predict(
            &Downstream::Linear,
            &train,
            &SampleWeights::uniform(20),
            &train[..3],
            LinearOptions {
                ridge_lambda: 0.0,
                fit_intercept: true,
            },
        )
        .unwrap();
        for (p, s) in pred.iter().zip(&train) {
            assert!((p - s.label).abs() < 1e-12);
        }
    }

    #[test]
    fn mlp_fits_line_roughly_and_is_deterministic() {
        let train = line(40);
        let model = Downstream::MlpSmall {
            hidden: 8,
            epochs: 2000,
            learning_rate: 0.2,
            seed: 1,
        };
        let q = SampleWeights::uniform(40);
        let a = fit_predict(&model, &train, &q, &train, LinearOptions::default()).unwrap();
        let b = fit_predict(&model, &train, &q, &train, LinearOptions::default()).unwrap();
        assert_eq!(a, b);
        let mse: f64 = a.iter().zip(&train).map(|(p, s)| (p - s.label).powi(2)).sum::<f64>() / 40.0;
        assert!(mse < 1e-3, "mse {mse}");
    }

    #[test]
    fn config_tags() {
        let d: Downstream = toml::from_str("kind = \"mlp_small\"\nhidden = 4").unwrap();
        assert_eq!(d.tag(), "mlp_small");
        let d: Downstream = toml::from_str("kind = \"linear\"").unwrap();
        assert_eq!(d, Downstream::Linear);
    }
}
