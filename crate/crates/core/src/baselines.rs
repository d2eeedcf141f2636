//! Forgetting baselines: uniform weights (RR) and linear or exponential
//! decay by sample age (GF-Lin, GF-Exp).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::proxy::SampleWeights;
use crate::stream::AdaptationTask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForgettingScheme {
    Rr,
    GfLin,
    GfExp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForgettingSpec {
    pub scheme: ForgettingScheme,
    /// Weight lost per tick of age under `gf_lin`.
    pub lin_slope: f64,
    /// Decay rate per tick of age under `gf_exp`.
    pub exp_rate: f64,
}

impl ForgettingSpec {
    pub fn rr() -> Self {
        Self {
            scheme: ForgettingScheme::Rr,
            lin_slope: 0.0,
            exp_rate: 0.0,
        }
    }

    pub fn gf_lin(lin_slope: f64) -> Self {
        Self {
            scheme: ForgettingScheme::GfLin,
            lin_slope,
            exp_rate: 0.0,
        }
    }

    pub fn gf_exp(exp_rate: f64) -> Self {
        Self {
            scheme: ForgettingScheme::GfExp,
            lin_slope: 0.0,
            exp_rate,
        }
    }

    /// Weights for samples of the given ages (ticks since the newest train
    /// sample), normalized to sum to one.
    pub fn weights_for_ages(&self, ages: &[i64]) -> Result<SampleWeights> {
        if ages.is_empty() {
            return Err(Error::EmptyInput);
        }
        match self.scheme {
            ForgettingScheme::Rr => Ok(SampleWeights::uniform(ages.len())),
            ForgettingScheme::GfLin => {
                if !(self.lin_slope >= 0.0 && self.lin_slope.is_finite()) {
                    return Err(Error::InvalidForgetting(format!(
                        "lin_slope {} must be finite and >= 0",
                        self.lin_slope
                    )));
                }
                let raw: Vec<f64> = ages.iter().map(|&a| 1.0 - self.lin_slope * a as f64).collect();
                if let Some(w) = raw.iter().find(|w| **w < 0.0) {
                    return Err(Error::InvalidForgetting(format!(
                        "lin_slope {} gives negative weight {w} within the memory window",
                        self.lin_slope
                    )));
                }
                SampleWeights::normalized(raw)
            }
            ForgettingScheme::GfExp => {
                if !(self.exp_rate >= 0.0 && self.exp_rate.is_finite()) {
                    return Err(Error::InvalidForgetting(format!(
                        "exp_rate {} must be finite and >= 0",
                        self.exp_rate
                    )));
                }
                SampleWeights::normalized(
                    ages.iter().map(|&a| (-self.exp_rate * a as f64).exp()).collect(),
                )
            }
        }
    }
}

pub fn baseline_weights(spec: &ForgettingSpec, task: &AdaptationTask<'_>) -> Result<SampleWeights> {
    let window = task.train_window();
    let newest = window.last().ok_or(Error::EmptyInput)?.timestamp;
    let ages: Vec<i64> = window.iter().map(|s| newest - s.timestamp).collect();
    spec.weights_for_ages(&ages)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64]) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-15, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn rr_is_uniform() {
        let q = ForgettingSpec::rr().weights_for_ages(&[3, 2, 1, 0]).unwrap();
        assert_eq!(q.values(), &[0.25; 4]);
    }

    #[test]
    fn exponential_law() {
        let q = ForgettingSpec::gf_exp(std::f64::consts::LN_2)
            .weights_for_ages(&[0, 1, 2])
            .unwrap();
        close(q.values(), &[4.0 / 7.0, 2.0 / 7.0, 1.0 / 7.0]);
    }

    #[test]
    fn linear_law() {
        let q = ForgettingSpec::gf_lin(0.25).weights_for_ages(&[0, 1, 2]).unwrap();
        close(q.values(), &[4.0 / 9.0, 3.0 / 9.0, 2.0 / 9.0]);
    }

    #[test]
    fn negative_linear_weight_rejected() {
        let err = ForgettingSpec::gf_lin(0.6).weights_for_ages(&[0, 1, 2]).unwrap_err();
        assert!(matches!(err, Error::InvalidForgetting(_)));
    }

    #[test]
    fn zero_rates_reduce_to_rr() {
        let ages = [5, 4, 4, 2, 0];
        let rr = ForgettingSpec::rr().weights_for_ages(&ages).unwrap();
        for spec in [ForgettingSpec::gf_lin(0.0), ForgettingSpec::gf_exp(0.0)] {
            let q = spec.weights_for_ages(&ages).unwrap();
            close(q.values(), rr.values());
        }
    }
}
