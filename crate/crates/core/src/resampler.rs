//! The learned resampler: per-sample distribution-similarity features and
//! a softmax head turning them into resampling probabilities.
//!
//! The train window is cut into periods counted back from its end (period
//! 0 is the most recent; a remainder shorter than one period joins the
//! oldest period). For reference periods `R_0..R_lags` a linear model is fit
//! on `R_j` alone, and every period `P` is scored by how its residuals under
//! that model compare with `R_j`'s own residuals:
//!
//! ```text
//! sim(P, R) = −KL( N(μ_P, σ_P²) ‖ N(μ_R, σ_R²) )
//! ```
//!
//! Every sample inherits its period's row `(sim(P, R_0), …, sim(P, R_lags))`.

use serde::{Deserialize, Serialize};

use crate::divergence::kl_normal;
use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};
use crate::proxy::{solve_wls, DesignMatrix, SampleWeights};
use crate::stream::{AdaptationTask, Sample};

/// Mean and (population) variance of residuals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualStats {
    pub mean: f64,
    pub variance: f64,
}

impl ResidualStats {
    pub fn from_residuals(r: &[f64]) -> Self {
        let n = r.len() as f64;
        let mean = r.iter().sum::<f64>() / n;
        let variance = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self { mean, variance }
    }
}

/// Similarity between a period's residual distribution and a reference
/// period's; larger means more alike.
pub trait SimilarityMetric: Send + Sync {
    fn similarity(&self, period: &ResidualStats, reference: &ResidualStats) -> f64;
}

/// Negative KL divergence between Gaussian fits, period relative to
/// reference. Variances are floored so noiseless periods stay comparable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianKl {
    pub variance_floor: f64,
}

impl Default for GaussianKl {
    fn default() -> Self {
        Self {
            variance_floor: 1e-10,
        }
    }
}

impl SimilarityMetric for GaussianKl {
    fn similarity(&self, period: &ResidualStats, reference: &ResidualStats) -> f64 {
        let s1 = period.variance.max(self.variance_floor).sqrt();
        let s2 = reference.variance.max(self.variance_floor).sqrt();
        // both sigmas are positive after flooring
        -kl_normal(period.mean, s1, reference.mean, s2).unwrap_or(f64::INFINITY)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub period_length: u64,
    pub lags: usize,
    pub ridge_lambda: f64,
    pub fit_intercept: bool,
}

impl FeatureConfig {
    pub fn new(period_length: u64, lags: usize) -> Self {
        Self {
            period_length,
            lags,
            ridge_lambda: 1e-6,
            fit_intercept: true,
        }
    }
}

/// `n × (lags + 1)` similarity matrix plus each sample's period index.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityFeatures {
    values: Matrix,
    period_of: Vec<usize>,
}

impl SimilarityFeatures {
    pub fn new(values: Matrix, period_of: Vec<usize>) -> Result<Self> {
        if period_of.len() != values.rows() {
            return Err(Error::DimensionMismatch {
                what: "period index",
                expected: values.rows(),
                found: period_of.len(),
            });
        }
        Ok(Self { values, period_of })
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn n(&self) -> usize {
        self.values.rows()
    }

    pub fn width(&self) -> usize {
        self.values.cols()
    }

    /// Period index of each sample, 0 = most recent.
    pub fn period_of(&self) -> &[usize] {
        &self.period_of
    }
}

pub struct SimilarityExtractor {
    pub config: FeatureConfig,
    metric: Box<dyn SimilarityMetric>,
}

impl SimilarityExtractor {
    pub fn new(config: FeatureConfig) -> Self {
        Self::with_metric(config, Box::new(GaussianKl::default()))
    }

    pub fn with_metric(config: FeatureConfig, metric: Box<dyn SimilarityMetric>) -> Self {
        Self { config, metric }
    }

    pub fn extract(&self, task: &AdaptationTask<'_>) -> Result<SimilarityFeatures> {
        let FeatureConfig {
            period_length,
            lags,
            ridge_lambda,
            fit_intercept,
        } = self.config;
        if period_length == 0 {
            return Err(Error::Config("period_length must be >= 1".into()));
        }
        let window = task.train_window();
        if window.is_empty() {
            return Err(Error::EmptyInput);
        }
        let ticks = task.train_ticks();
        let p = period_length as i64;
        let count = ((ticks.end - ticks.start) / p) as usize;
        if count < lags + 1 {
            return Err(Error::TooFewPeriods {
                available: count,
                required: lags + 1,
            });
        }
        let period_of: Vec<usize> = window
            .iter()
            .map(|s| (((ticks.end - 1 - s.timestamp) / p) as usize).min(count - 1))
            .collect();
        let mut members: Vec<Vec<&Sample>> = vec![Vec::new(); count];
        for (s, &j) in window.iter().zip(&period_of) {
            members[j].push(s);
        }
        let columns = window[0].features.len() + usize::from(fit_intercept);
        for (j, m) in members.iter().enumerate() {
            if m.len() < columns {
                return Err(Error::UnderdeterminedPeriod {
                    period_start: if j + 1 == count {
                        ticks.start
                    } else {
                        ticks.end - (j as i64 + 1) * p
                    },
                    samples: m.len(),
                    columns,
                });
            }
        }

        // sims[P][j] = sim(P, R_j)
        let mut sims = vec![vec![0.0; lags + 1]; count];
        for j in 0..=lags {
            let ref_samples: Vec<Sample> = members[j].iter().map(|s| (*s).clone()).collect();
            let design = DesignMatrix::from_samples(&ref_samples, fit_intercept)?;
            let ones = SampleWeights::raw(vec![1.0; design.n()])?;
            let phi = solve_wls(&design, &ones, ridge_lambda)?.phi;
            let stats: Vec<ResidualStats> = members
                .iter()
                .map(|m| {
                    let r: Vec<f64> = m
                        .iter()
                        .map(|s| s.label - predict(&s.features, &phi, fit_intercept))
                        .collect();
                    ResidualStats::from_residuals(&r)
                })
                .collect();
            for (row, st) in sims.iter_mut().zip(&stats) {
                row[j] = self.metric.similarity(st, &stats[j]);
            }
        }

        let mut values = Matrix::zeros(window.len(), lags + 1);
        for (i, &j) in period_of.iter().enumerate() {
            values.row_mut(i).copy_from_slice(&sims[j]);
        }
        if !values.is_finite() {
            return Err(Error::InvalidStream("non-finite similarity feature".into()));
        }
        SimilarityFeatures::new(values, period_of)
    }
}

fn predict(x: &[f64], phi: &[f64], fit_intercept: bool) -> f64 {
    let m = x.len();
    dot(x, &phi[..m]) + if fit_intercept { phi[m] } else { 0.0 }
}

/// Similarity features with the default Gaussian-KL metric, ridge 1e-6 and
/// an intercept in the per-period fits.
pub fn extract_features(
    task: &AdaptationTask<'_>,
    period_length: u64,
    lags: usize,
) -> Result<SimilarityFeatures> {
    SimilarityExtractor::new(FeatureConfig::new(period_length, lags)).extract(task)
}

/// Linear logits over similarity features followed by a tempered softmax.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResamplerModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub temperature: f64,
    pub period_length: u64,
}

impl ResamplerModel {
    /// All-zero parameters: uniform resampling.
    pub fn zeros(lags: usize, period_length: u64, temperature: f64) -> Self {
        Self {
            weights: vec![0.0; lags + 1],
            bias: 0.0,
            temperature,
            period_length,
        }
    }

    pub fn lags(&self) -> usize {
        self.weights.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + 1
    }

    /// `[weights..., bias]`
    pub fn theta(&self) -> Vec<f64> {
        let mut t = self.weights.clone();
        t.push(self.bias);
        t
    }

    pub fn set_theta(&mut self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.param_count() {
            return Err(Error::DimensionMismatch {
                what: "resampler parameters",
                expected: self.param_count(),
                found: theta.len(),
            });
        }
        let k = self.weights.len();
        self.weights.copy_from_slice(&theta[..k]);
        self.bias = theta[k];
        Ok(())
    }

    fn check(&self, feats: &SimilarityFeatures) -> Result<()> {
        if feats.width() != self.weights.len() {
            return Err(Error::DimensionMismatch {
                what: "similarity feature width",
                expected: self.weights.len(),
                found: feats.width(),
            });
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if feats.n() == 0 {
            return Err(Error::EmptyInput);
        }
        Ok(())
    }

    fn probabilities(&self, feats: &SimilarityFeatures) -> Result<Vec<f64>> {
        self.check(feats)?;
        let logits: Vec<f64> = (0..feats.n())
            .map(|i| (dot(feats.values.row(i), &self.weights) + self.bias) / self.temperature)
            .collect();
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::NonFiniteLogits);
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        Ok(exps.into_iter().map(|e| e / total).collect())
    }

    /// Pull `∂L/∂q` back to `∂L/∂Θ` without materializing the Jacobian.
    pub fn backprop(&self, feats: &SimilarityFeatures, q: &[f64], grad_q: &[f64]) -> Vec<f64> {
        // ∂q_i/∂w_j = q_i (F_ij − Σ_k q_k F_kj) / T, and the bias cancels
        let inner = dot(q, grad_q);
        let mut g = vec![0.0; self.param_count()];
        for i in 0..feats.n() {
            let c = q[i] * (grad_q[i] - inner) / self.temperature;
            if c != 0.0 {
                for (gj, f) in g.iter_mut().zip(feats.values.row(i)) {
                    *gj += c * f;
                }
            }
        }
        g
    }
}

pub fn compute_weights(model: &ResamplerModel, feats: &SimilarityFeatures) -> Result<SampleWeights> {
    SampleWeights::probability(model.probabilities(feats)?)
}

/// `∂q/∂Θ`, one row per sample, one column per parameter.
pub fn weight_jacobian(model: &ResamplerModel, feats: &SimilarityFeatures) -> Result<Matrix> {
    let q = model.probabilities(feats)?;
    let k = model.weights.len();
    let mut mean = vec![0.0; k];
    for (i, qi) in q.iter().enumerate() {
        for (m, f) in mean.iter_mut().zip(feats.values.row(i)) {
            *m += qi * f;
        }
    }
    let mut jac = Matrix::zeros(feats.n(), model.param_count());
    for (i, qi) in q.iter().enumerate() {
        let row = feats.values.row(i).to_vec();
        let out = jac.row_mut(i);
        for j in 0..k {
            out[j] = qi * (row[j] - mean[j]) / model.temperature;
        }
        // softmax is shift invariant: the bias column stays zero
    }
    Ok(jac)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feats(rows: &[Vec<f64>]) -> SimilarityFeatures {
        let m = Matrix::from_rows(rows).unwrap();
        let n = m.rows();
        SimilarityFeatures::new(m, vec![0; n]).unwrap()
    }

    #[test]
    fn zero_theta_is_uniform() {
        let f = feats(&[vec![1.0, -2.0], vec![0.5, 3.0], vec![-1.0, 0.0], vec![2.0, 2.0]]);
        let q = compute_weights(&ResamplerModel::zeros(1, 1, 1.0), &f).unwrap();
        assert!(q.values().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn huge_temperature_flattens() {
        let f = feats(&[vec![1.0, -2.0], vec![0.5, 3.0], vec![-1.0, 0.0]]);
        let mut m = ResamplerModel::zeros(1, 1, 1e6);
        m.weights = vec![3.0, -1.5];
        let q = compute_weights(&m, &f).unwrap();
        for v in q.values() {
            assert!((v - 1.0 / 3.0).abs() < 1e-3);
        }
    }

    #[test]
    fn non_finite_logits_rejected() {
        let f = feats(&[vec![1.0], vec![2.0]]);
        let mut m = ResamplerModel::zeros(0, 1, 1.0);
        m.weights = vec![f64::INFINITY];
        assert!(matches!(compute_weights(&m, &f), Err(Error::NonFiniteLogits)));
    }

    #[test]
    fn jacobian_columns_sum_to_zero() {
        let f = feats(&[vec![1.0, -2.0], vec![0.5, 3.0], vec![-1.0, 0.0]]);
        let mut m = ResamplerModel::zeros(1, 1, 0.7);
        m.weights = vec![0.3, -0.2];
        m.bias = 1.1;
        let j = weight_jacobian(&m, &f).unwrap();
        for c in 0..j.cols() {
            let s: f64 = (0..j.rows()).map(|r| j[(r, c)]).sum();
            assert!(s.abs() < 1e-15);
        }
    }

    #[test]
    fn backprop_matches_jacobian_transpose() {
        let f = feats(&[vec![1.0, -2.0], vec![0.5, 3.0], vec![-1.0, 0.0]]);
        let mut m = ResamplerModel::zeros(1, 1, 1.3);
        m.weights = vec![0.3, -0.2];
        let q = compute_weights(&m, &f).unwrap();
        let gq = [0.7, -1.2, 0.4];
        let via_vjp = m.backprop(&f, q.values(), &gq);
        let j = weight_jacobian(&m, &f).unwrap();
        let via_jac = j.tr_matvec(&gq);
        for (a, b) in via_vjp.iter().zip(&via_jac) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}
