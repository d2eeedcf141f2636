//! Weighted linear regression proxy and its hypergradient.
//!
//! The lower-level problem is
//!
//! ```text
//! φ(q) = argmin_φ ½ Σ_i q_i (x_i·φ − y_i)² + (λ/2)‖φ‖²
//!      = A⁻¹ Xᵀ Q y,   A = Xᵀ Q X + λ I
//! ```
//!
//! Differentiating the optimality condition `A φ = Xᵀ Q y` with respect to
//! `q_i` gives `∂φ/∂q_i = A⁻¹ x_i (y_i − x_i·φ)`, so for an upper-level
//! gradient `g = ∂L/∂φ` one solve `v = A⁻¹ g` yields every component
//! `∂L/∂q_i = (v·x_i)(y_i − x_i·φ)`.
//!
//! The unrolled variant replaces the argmin by a fixed number of gradient
//! steps from `φ₀ = 0` and differentiates through the steps.


use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, norm2, Cholesky, Matrix};
use crate::stream::Sample;

/// Relative residual bound every solve must satisfy.
pub const RESIDUAL_TOL: f64 = 1e-8;

/// Features (optionally with a trailing bias column) and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    x: Matrix,
    y: Vec<f64>,
}

impl DesignMatrix {
    pub fn new(x: Matrix, y: Vec<f64>) -> Result<Self> {
        if x.rows() == 0 {
            return Err(Error::EmptyInput);
        }
        if y.len() != x.rows() {
            return Err(Error::DimensionMismatch {
                what: "labels vs design rows",
                expected: x.rows(),
                found: y.len(),
            });
        }
        if !x.is_finite() || y.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidStream("design matrix has non-finite entries".into()));
        }
        Ok(Self { x, y })
    }

    pub fn from_samples(samples: &[Sample], fit_intercept: bool) -> Result<Self> {
        let m = samples.first().ok_or(Error::EmptyInput)?.features.len();
        let cols = m + usize::from(fit_intercept);
        let mut x = Matrix::zeros(samples.len(), cols);
        for (i, s) in samples.iter().enumerate() {
            if s.features.len() != m {
                return Err(Error::DimensionMismatch {
                    what: "sample features",
                    expected: m,
                    found: s.features.len(),
                });
            }
            let row = x.row_mut(i);
            row[..m].copy_from_slice(&s.features);
            if fit_intercept {
                row[m] = 1.0;
            }
        }
        Self::new(x, samples.iter().map(|s| s.label).collect())
    }

    pub fn n(&self) -> usize {
        self.x.rows()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn x(&self) -> &Matrix {
        &self.x
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn predict(&self, phi: &[f64]) -> Vec<f64> {
        self.x.matvec(phi)
    }

    /// Upper-level loss `½ Σ (x·φ − y)²` and its gradient in φ.
    pub fn squared_loss_and_grad(&self, phi: &[f64]) -> (f64, Vec<f64>) {
        let resid: Vec<f64> = self
            .predict(phi)
            .iter()
            .zip(&self.y)
            .map(|(p, y)| p - y)
            .collect();
        (0.5 * dot(&resid, &resid), self.x.tr_matvec(&resid))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    Probability,
    Raw,
}

/// Non-negative per-sample weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleWeights {
    q: Vec<f64>,
    normalization: Normalization,
}

impl SampleWeights {
    pub fn probability(q: Vec<f64>) -> Result<Self> {
        Self::check_nonneg(&q)?;
        let total: f64 = q.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidWeights(format!(
                "probability weights sum to {total}"
            )));
        }
        Ok(Self {
            q,
            normalization: Normalization::Probability,
        })
    }

    pub fn raw(q: Vec<f64>) -> Result<Self> {
        Self::check_nonneg(&q)?;
        Ok(Self {
            q,
            normalization: Normalization::Raw,
        })
    }

    /// Scale raw non-negative weights to sum to one.
    pub fn normalized(raw: Vec<f64>) -> Result<Self> {
        Self::check_nonneg(&raw)?;
        let total: f64 = raw.iter().sum();
        if !(total > 0.0) {
            return Err(Error::InvalidWeights("weights sum to zero".into()));
        }
        Ok(Self {
            q: raw.into_iter().map(|w| w / total).collect(),
            normalization: Normalization::Probability,
        })
    }

    pub fn uniform(n: usize) -> Self {
        Self {
            q: vec![1.0 / n as f64; n],
            normalization: Normalization::Probability,
        }
    }

    fn check_nonneg(q: &[f64]) -> Result<()> {
        if let Some((i, v)) = q.iter().enumerate().find(|(_, v)| !(**v >= 0.0 && v.is_finite())) {
            return Err(Error::InvalidWeights(format!("q[{i}] = {v}")));
        }
        Ok(())
    }

    pub fn values(&self) -> &[f64] {
        &self.q
    }

    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }

    pub fn normalization(&self) -> Normalization {
        self.normalization
    }
}

fn fingerprint(data: &DesignMatrix, weights: &SampleWeights, ridge_lambda: f64) -> u64 {
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut mix = |v: u64| h = (h ^ v).wrapping_mul(PRIME).rotate_left(29);
    mix(data.n() as u64);
    mix(data.dim() as u64);
    for v in data.x.as_slice().iter().chain(&data.y).chain(&weights.q) {
        mix(v.to_bits());
    }
    mix(ridge_lambda.to_bits());
    h
}

fn check_dims(data: &DesignMatrix, weights: &SampleWeights) -> Result<()> {
    if weights.len() != data.n() {
        return Err(Error::DimensionMismatch {
            what: "weights vs samples",
            expected: data.n(),
            found: weights.len(),
        });
    }
    Ok(())
}

/// `(XᵀQX + λI, XᵀQy)`
fn normal_equations(data: &DesignMatrix, q: &[f64], ridge_lambda: f64) -> (Matrix, Vec<f64>) {
    let p = data.dim();
    // lower triangle, packed row by row
    let mut lower = vec![0.0; p * (p + 1) / 2];
    let mut b = vec![0.0; p];
    for (i, &qi) in q.iter().enumerate() {
        if qi == 0.0 {
            continue;
        }
        let xi = data.x.row(i);
        let mut k = 0;
        for (r, &xr) in xi.iter().enumerate() {
            let w = qi * xr;
            for (acc, &xc) in lower[k..k + r + 1].iter_mut().zip(&xi[..=r]) {
                *acc += w * xc;
            }
            k += r + 1;
        }
        axpy(qi * data.y[i], xi, &mut b);
    }
    let mut a = Matrix::zeros(p, p);
    let mut k = 0;
    for r in 0..p {
        for c in 0..=r {
            a[(r, c)] = lower[k];
            a[(c, r)] = lower[k];
            k += 1;
        }
        a[(r, r)] += ridge_lambda;
    }
    (a, b)
}

fn relative_residual(a: &Matrix, phi: &[f64], b: &[f64]) -> f64 {
    let r: Vec<f64> = a.matvec(phi).iter().zip(b).map(|(x, y)| x - y).collect();
    norm2(&r) / norm2(b).max(1.0)
}

/// Closed-form weighted ridge solution with its cached factorization.
#[derive(Debug, Clone)]
pub struct ProxySolution {
    pub phi: Vec<f64>,
    pub ridge_lambda: f64,
    gram: Matrix,
    factor: Cholesky,
    residual: f64,
    fingerprint: u64,
}

impl ProxySolution {
    /// `A = XᵀQX + λI` the solution was computed from.
    pub fn gram(&self) -> &Matrix {
        &self.gram
    }

    pub fn relative_residual(&self) -> f64 {
        self.residual
    }

    /// Solve another system against the cached factorization of `A`.
    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        self.factor.solve(rhs)
    }
}

pub fn solve_wls(
    data: &DesignMatrix,
    weights: &SampleWeights,
    ridge_lambda: f64,
) -> Result<ProxySolution> {
    check_dims(data, weights)?;
    if !(ridge_lambda >= 0.0 && ridge_lambda.is_finite()) {
        return Err(Error::Config(format!("ridge_lambda must be >= 0, got {ridge_lambda}")));
    }
    let (a, b) = normal_equations(data, &weights.q, ridge_lambda);
    let factor = Cholesky::factor(&a)?;
    let mut phi = factor.solve(&b);
    let mut residual = relative_residual(&a, &phi, &b);
    if residual > RESIDUAL_TOL {
        // one step of iterative refinement
        let r: Vec<f64> = b.iter().zip(a.matvec(&phi)).map(|(x, y)| x - y).collect();
        let d = factor.solve(&r);
        axpy(1.0, &d, &mut phi);
        residual = relative_residual(&a, &phi, &b);
        if residual > RESIDUAL_TOL {
            return Err(Error::ResidualTooLarge { residual });
        }
    }
    Ok(ProxySolution {
        phi,
        ridge_lambda,
        gram: a,
        factor,
        residual,
        fingerprint: fingerprint(data, weights, ridge_lambda),
    })
}

/// `½ Σ q_i (x_i·φ − y_i)²` without the ridge term.
pub fn wls_loss(data: &DesignMatrix, weights: &SampleWeights, phi: &[f64]) -> Result<f64> {
    check_dims(data, weights)?;
    if phi.len() != data.dim() {
        return Err(Error::DimensionMismatch {
            what: "coefficients",
            expected: data.dim(),
            found: phi.len(),
        });
    }
    Ok(0.5
        * (0..data.n())
            .map(|i| {
                let r = dot(data.x.row(i), phi) - data.y[i];
                weights.q[i] * r * r
            })
            .sum::<f64>())
}

/// `∂L/∂q` for an upper-level loss `L(φ(q))` with `upper_grad_phi = ∂L/∂φ`.
pub fn hypergradient_q(
    data: &DesignMatrix,
    weights: &SampleWeights,
    solution: &ProxySolution,
    upper_grad_phi: &[f64],
) -> Result<Vec<f64>> {
    check_dims(data, weights)?;
    if upper_grad_phi.len() != data.dim() {
        return Err(Error::DimensionMismatch {
            what: "upper gradient",
            expected: data.dim(),
            found: upper_grad_phi.len(),
        });
    }
    if fingerprint(data, weights, solution.ridge_lambda) != solution.fingerprint {
        return Err(Error::StaleFactorization);
    }
    // A is symmetric so A⁻ᵀ g = A⁻¹ g
    let v = solution.factor.solve(upper_grad_phi);
    Ok((0..data.n())
        .map(|i| {
            let xi = data.x.row(i);
            dot(&v, xi) * (data.y[i] - dot(xi, &solution.phi))
        })
        .collect())
}

/// Result of `steps` gradient-descent iterations on the weighted ridge loss
/// from `φ₀ = 0`, with the iterate history kept for reverse-mode
/// differentiation.
#[derive(Debug, Clone)]
pub struct UnrolledSolution {
    pub phi: Vec<f64>,
    pub ridge_lambda: f64,
    pub step_size: f64,
    gram: Matrix,
    history: Vec<Vec<f64>>,
    fingerprint: u64,
}

impl UnrolledSolution {
    pub fn steps(&self) -> usize {
        self.history.len()
    }
}

pub fn solve_unrolled(
    data: &DesignMatrix,
    weights: &SampleWeights,
    ridge_lambda: f64,
    steps: usize,
    step_size: f64,
) -> Result<UnrolledSolution> {
    check_dims(data, weights)?;
    if steps == 0 || !(step_size > 0.0 && step_size.is_finite()) {
        return Err(Error::Config(
            "unrolled solve needs steps >= 1 and a positive step size".into(),
        ));
    }
    let (a, b) = normal_equations(data, &weights.q, ridge_lambda);
    let p = data.dim();
    let mut phi = vec![0.0; p];
    let mut history = Vec::with_capacity(steps);
    for _ in 0..steps {
        let grad: Vec<f64> = a.matvec(&phi).iter().zip(&b).map(|(x, y)| x - y).collect();
        let next: Vec<f64> = phi.iter().zip(&grad).map(|(f, g)| f - step_size * g).collect();
        history.push(std::mem::replace(&mut phi, next));
    }
    if phi.iter().any(|v| !v.is_finite()) {
        return Err(Error::Config(format!(
            "unrolled solve diverged (step size {step_size} too large)"
        )));
    }
    Ok(UnrolledSolution {
        phi,
        ridge_lambda,
        step_size,
        gram: a,
        history,
        fingerprint: fingerprint(data, weights, ridge_lambda),
    })
}

/// Reverse-mode `∂L/∂q` through the unrolled iterations
/// `φ_{s+1} = φ_s − η (A φ_s − Xᵀ Q y)`.
pub fn unrolled_hypergradient_q(
    data: &DesignMatrix,
    weights: &SampleWeights,
    solution: &UnrolledSolution,
    upper_grad_phi: &[f64],
) -> Result<Vec<f64>> {
    check_dims(data, weights)?;
    if upper_grad_phi.len() != data.dim() {
        return Err(Error::DimensionMismatch {
            what: "upper gradient",
            expected: data.dim(),
            found: upper_grad_phi.len(),
        });
    }
    if fingerprint(data, weights, solution.ridge_lambda) != solution.fingerprint {
        return Err(Error::StaleFactorization);
    }
    let p = data.dim();
    let eta = solution.step_size;
    // ∂φ_{s+1}/∂q_i = −η x_i (x_i·φ_s − y_i); accumulate Σ_s a_{s+1} φ_sᵀ
    // and Σ_s a_{s+1} so each sample costs O(p²).
    let mut adj = upper_grad_phi.to_vec();
    let mut outer = Matrix::zeros(p, p);
    let mut adj_sum = vec![0.0; p];
    for phi_s in solution.history.iter().rev() {
        for r in 0..p {
            axpy(adj[r], phi_s, outer.row_mut(r));
        }
        axpy(1.0, &adj, &mut adj_sum);
        let a_adj = solution.gram.matvec(&adj);
        for (a, g) in adj.iter_mut().zip(&a_adj) {
            *a -= eta * g;
        }
    }
    Ok((0..data.n())
        .map(|i| {
            let xi = data.x.row(i);
            let quad = dot(xi, &outer.matvec(xi));
            -eta * (quad - data.y[i] * dot(xi, &adj_sum))
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_point() -> DesignMatrix {
        DesignMatrix::new(Matrix::from_rows(&[vec![1.0], vec![1.0]]).unwrap(), vec![1.0, 3.0])
            .unwrap()
    }

    #[test]
    fn equal_weights_give_mean() {
        let s = solve_wls(&two_point(), &SampleWeights::probability(vec![0.5, 0.5]).unwrap(), 0.0)
            .unwrap();
        assert!((s.phi[0] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn unequal_weights_give_weighted_mean() {
        let s = solve_wls(
            &two_point(),
            &SampleWeights::probability(vec![0.75, 0.25]).unwrap(),
            0.0,
        )
        .unwrap();
        assert!((s.phi[0] - 1.5).abs() < 1e-14);
    }

    #[test]
    fn rank_deficient_without_ridge() {
        let d = DesignMatrix::new(
            Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0], vec![3.0, 6.0]]).unwrap(),
            vec![1.0, 2.0, 3.0],
        )
        .unwrap();
        let err = solve_wls(&d, &SampleWeights::uniform(3), 0.0).unwrap_err();
        assert!(matches!(err, Error::SingularNormalEquations { rank: 1, dim: 2 }));
        assert!(err.to_string().contains("rank 1"));
        assert!(solve_wls(&d, &SampleWeights::uniform(3), 1e-6).is_ok());
    }

    #[test]
    fn zero_weights_zero_loss() {
        let d = two_point();
        let q = SampleWeights::raw(vec![0.0, 0.0]).unwrap();
        assert_eq!(wls_loss(&d, &q, &[7.0]).unwrap(), 0.0);
    }

    #[test]
    fn loss_dimension_mismatch() {
        let d = two_point();
        assert!(wls_loss(&d, &SampleWeights::uniform(2), &[1.0, 2.0]).is_err());
        assert!(wls_loss(&d, &SampleWeights::uniform(3), &[1.0]).is_err());
    }

    #[test]
    fn zero_upper_gradient() {
        let d = two_point();
        let q = SampleWeights::uniform(2);
        let s = solve_wls(&d, &q, 0.0).unwrap();
        assert_eq!(hypergradient_q(&d, &q, &s, &[0.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn stale_factorization_detected() {
        let d = two_point();
        let q = SampleWeights::uniform(2);
        let s = solve_wls(&d, &q, 0.0).unwrap();
        let q2 = SampleWeights::probability(vec![0.25, 0.75]).unwrap();
        assert!(matches!(
            hypergradient_q(&d, &q2, &s, &[1.0]),
            Err(Error::StaleFactorization)
        ));
    }

    #[test]
    fn weight_validation() {
        assert!(SampleWeights::probability(vec![0.5, 0.6]).is_err());
        assert!(SampleWeights::raw(vec![-0.1, 1.0]).is_err());
        assert!(SampleWeights::normalized(vec![0.0, 0.0]).is_err());
    }
}
