use crate::error::{Error, Result};

/// `KL(N(μ1, σ1²) ‖ N(μ2, σ2²))`, written as the cross-entropy term minus
/// the entropy term:
///
/// ```text
/// ∫ q log q = −½ log 2π − ½ (log σ1² + 1)
/// ∫ q log p = −½ log 2π − ½ log σ2² − ½ (σ1²/σ2² + (μ1−μ2)²/σ2²)
/// ```
///
/// With `σ1 = σ2 = σ` this is `(μ1 − μ2)² / (2σ²)`.
pub fn kl_normal(mu1: f64, sigma1: f64, mu2: f64, sigma2: f64) -> Result<f64> {
    if !(sigma1 > 0.0 && sigma2 > 0.0) || !sigma1.is_finite() || !sigma2.is_finite() {
        return Err(Error::NonPositiveSigma { sigma1, sigma2 });
    }
    let v1 = sigma1 * sigma1;
    let v2 = sigma2 * sigma2;
    let d = mu1 - mu2;
    // the log 2π parts cancel; grouping keeps σ1 = σ2 exact
    Ok(0.5 * (v2.ln() - v1.ln()) + 0.5 * ((v1 - v2) + d * d) / v2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_is_zero() {
        assert_eq!(kl_normal(0.0, 1.0, 0.0, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn unit_shift_is_half() {
        assert_eq!(kl_normal(1.0, 1.0, 0.0, 1.0).unwrap(), 0.5);
    }

    #[test]
    fn asymmetric_in_sigma() {
        let a = kl_normal(0.0, 1.0, 0.0, 2.0).unwrap();
        let b = kl_normal(0.0, 2.0, 0.0, 1.0).unwrap();
        assert!(a > 0.0 && b > 0.0 && (a - b).abs() > 0.1);
        let expect = 2.0_f64.ln() + 1.0 / 8.0 - 0.5;
        assert!((a - expect).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_sigma() {
        assert!(kl_normal(0.0, 0.0, 0.0, 1.0).is_err());
        assert!(kl_normal(0.0, 1.0, 0.0, -1.0).is_err());
        assert!(kl_normal(0.0, f64::NAN, 0.0, 1.0).is_err());
    }
}
