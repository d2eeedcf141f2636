//! Regression and rank-correlation metrics.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_pair(y: &[f64], yhat: &[f64]) -> Result<()> {
    if y.is_empty() {
        return Err(Error::EmptyInput);
    }
    if y.len() != yhat.len() {
        return Err(Error::DimensionMismatch {
            what: "predictions vs labels",
            expected: y.len(),
            found: yhat.len(),
        });
    }
    Ok(())
}

pub fn mse(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_pair(y, yhat)?;
    Ok(y.iter().zip(yhat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64)
}

pub fn mae(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_pair(y, yhat)?;
    Ok(y.iter().zip(yhat).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64)
}

pub fn rmse(y: &[f64], yhat: &[f64]) -> Result<f64> {
    Ok(mse(y, yhat)?.sqrt())
}

/// `Σ|y − ŷ| / Σ|y|`
pub fn nmae(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_pair(y, yhat)?;
    let denom: f64 = y.iter().map(|v| v.abs()).sum();
    if denom == 0.0 {
        return Err(Error::ZeroNormalizer);
    }
    Ok(y.iter().zip(yhat).map(|(a, b)| (a - b).abs()).sum::<f64>() / denom)
}

/// RMSE over mean absolute label.
pub fn nrmse(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_pair(y, yhat)?;
    let denom = y.iter().map(|v| v.abs()).sum::<f64>() / y.len() as f64;
    if denom == 0.0 {
        return Err(Error::ZeroNormalizer);
    }
    Ok(rmse(y, yhat)? / denom)
}

pub fn skill(rmse_model: f64, rmse_persistence: f64) -> Result<f64> {
    if !(rmse_persistence > 0.0) {
        return Err(Error::ZeroPersistence);
    }
    Ok(1.0 - rmse_model / rmse_persistence)
}

/// RMSE of the lag-1 forecast `ŷ_t = y_{t−1}` over a label sequence.
pub fn persistence_rmse(y: &[f64]) -> Result<f64> {
    if y.len() < 2 {
        return Err(Error::EmptyInput);
    }
    rmse(&y[1..], &y[..y.len() - 1])
}

/// Ascending 1-based ranks, ties share their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        None
    } else {
        Some(sab / (saa * sbb).sqrt())
    }
}

/// Rank IC: Pearson correlation of the rank vectors.
pub fn ic(yhat: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(y, yhat)?;
    if y.len() < 2 {
        return Err(Error::UndefinedRankCorrelation);
    }
    pearson(&average_ranks(yhat), &average_ranks(y)).ok_or(Error::UndefinedRankCorrelation)
}

/// Mean over sample standard deviation (N − 1) of a per-period IC series.
pub fn icir(ic_sequence: &[f64]) -> Result<f64> {
    if ic_sequence.len() < 2 {
        return Err(Error::UndefinedIcir);
    }
    let n = ic_sequence.len() as f64;
    let mean = ic_sequence.iter().sum::<f64>() / n;
    let var = ic_sequence.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    if var == 0.0 {
        return Err(Error::UndefinedIcir);
    }
    Ok(mean / var.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Mse,
    Mae,
    Rmse,
    Nmae,
    Nrmse,
    Skill,
    Ic,
    Icir,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Mse => "mse",
            Metric::Mae => "mae",
            Metric::Rmse => "rmse",
            Metric::Nmae => "nmae",
            Metric::Nrmse => "nrmse",
            Metric::Skill => "skill",
            Metric::Ic => "ic",
            Metric::Icir => "icir",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "mse" => Metric::Mse,
            "mae" => Metric::Mae,
            "rmse" => Metric::Rmse,
            "nmae" => Metric::Nmae,
            "nrmse" => Metric::Nrmse,
            "skill" => Metric::Skill,
            "ic" => Metric::Ic,
            "icir" => Metric::Icir,
            other => return Err(Error::Config(format!("unknown metric `{other}`"))),
        })
    }
}

/// Predictions for one evaluation period (one test task).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PeriodPredictions {
    pub y: Vec<f64>,
    pub yhat: Vec<f64>,
    /// Label of the sample preceding each target, for the persistence forecast.
    pub previous: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub values: BTreeMap<String, f64>,
    pub sample_count: usize,
    pub metadata: BTreeMap<String, String>,
}

impl MetricReport {
    /// Pooled regression metrics over all periods; `ic` is the mean per-period
    /// rank IC and `icir` its mean/std ratio. Periods whose IC is undefined
    /// (fewer than two samples or constant values) are skipped.
    pub fn evaluate(
        periods: &[PeriodPredictions],
        metrics: &[Metric],
        metadata: BTreeMap<String, String>,
    ) -> Result<Self> {
        let y: Vec<f64> = periods.iter().flat_map(|p| p.y.iter().copied()).collect();
        let yhat: Vec<f64> = periods.iter().flat_map(|p| p.yhat.iter().copied()).collect();
        let prev: Vec<f64> = periods.iter().flat_map(|p| p.previous.iter().copied()).collect();
        check_pair(&y, &yhat)?;
        let ic_seq = || -> Vec<f64> { periods.iter().filter_map(|p| ic(&p.yhat, &p.y).ok()).collect() };
        let mut values = BTreeMap::new();
        for &m in metrics {
            let v = match m {
                Metric::Mse => mse(&y, &yhat)?,
                Metric::Mae => mae(&y, &yhat)?,
                Metric::Rmse => rmse(&y, &yhat)?,
                Metric::Nmae => nmae(&y, &yhat)?,
                Metric::Nrmse => nrmse(&y, &yhat)?,
                Metric::Skill => skill(rmse(&y, &yhat)?, rmse(&y, &prev)?)?,
                Metric::Ic => {
                    let seq = ic_seq();
                    if seq.is_empty() {
                        return Err(Error::UndefinedRankCorrelation);
                    }
                    seq.iter().sum::<f64>() / seq.len() as f64
                }
                Metric::Icir => icir(&ic_seq())?,
            };
            if !v.is_finite() {
                return Err(Error::Config(format!("metric {m} is not finite")));
            }
            values.insert(m.name().to_string(), v);
        }
        Ok(Self {
            values,
            sample_count: y.len(),
            metadata,
        })
    }

    pub fn get(&self, m: Metric) -> Option<f64> {
        self.values.get(m.name()).copied()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nmae_hand_value() {
        assert!((nmae(&[1.0, 2.0, -3.0], &[1.0, 1.0, -1.0]).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(nmae(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!(matches!(nmae(&[0.0, 0.0], &[1.0, 2.0]), Err(Error::ZeroNormalizer)));
    }

    #[test]
    fn nrmse_hand_values() {
        let v = nrmse(&[3.0, 4.0], &[0.0, 0.0]).unwrap();
        assert!((v - 12.5_f64.sqrt() / 3.5).abs() < 1e-15);
        assert!((v - 1.01015).abs() < 1e-5);
        assert_eq!(nrmse(&[2.0], &[1.0]).unwrap(), 0.5);
        assert_eq!(nrmse(&[2.0, -1.0], &[2.0, -1.0]).unwrap(), 0.0);
    }

    #[test]
    fn mae_rmse_values() {
        assert_eq!(mae(&[1.0, 3.0], &[2.0, 2.0]).unwrap(), 1.0);
        assert_eq!(rmse(&[1.0, 3.0], &[2.0, 2.0]).unwrap(), 1.0);
        assert_eq!(mae(&[0.0; 3], &[3.0, 0.0, 0.0]).unwrap(), 1.0);
        assert!((rmse(&[0.0; 3], &[3.0, 0.0, 0.0]).unwrap() - 3.0_f64.sqrt()).abs() < 1e-15);
        assert!(matches!(mae(&[], &[]), Err(Error::EmptyInput)));
    }

    #[test]
    fn skill_values() {
        assert_eq!(skill(0.7, 0.7).unwrap(), 0.0);
        assert_eq!(skill(0.0, 0.7).unwrap(), 1.0);
        assert!((skill(0.9, 1.0).unwrap() - 0.1).abs() < 1e-15);
        assert!(skill(0.9, 0.0).is_err());
    }

    #[test]
    fn persistence_forecast() {
        // lag-1 errors: 1, 1, -2
        let v = persistence_rmse(&[1.0, 2.0, 3.0, 1.0]).unwrap();
        assert!((v - 2.0_f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn ic_extremes() {
        let y = [0.3, -1.0, 2.5, 0.9];
        assert!((ic(&y, &y).unwrap() - 1.0).abs() < 1e-15);
        let rev: Vec<f64> = y.iter().map(|v| -v).collect();
        assert!((ic(&rev, &y).unwrap() + 1.0).abs() < 1e-15);
        assert!(matches!(ic(&[1.0, 1.0], &[0.0, 2.0]), Err(Error::UndefinedRankCorrelation)));
    }

    #[test]
    fn ties_get_average_rank() {
        assert_eq!(average_ranks(&[2.0, 1.0, 2.0, 5.0]), vec![2.5, 1.0, 2.5, 4.0]);
    }

    #[test]
    fn icir_hand_value() {
        let v = icir(&[0.1, 0.3]).unwrap();
        assert!((v - 0.2 / 0.02_f64.sqrt()).abs() < 1e-12);
        assert!((v - 1.41421).abs() < 1e-5);
        assert!(matches!(icir(&[0.2, 0.2]), Err(Error::UndefinedIcir)));
    }

    #[test]
    fn metric_names_roundtrip() {
        for m in [
            Metric::Mse,
            Metric::Mae,
            Metric::Rmse,
            Metric::Nmae,
            Metric::Nrmse,
            Metric::Skill,
            Metric::Ic,
            Metric::Icir,
        ] {
            assert_eq!(m.name().parse::<Metric>().unwrap(), m);
        }
        assert!("sharpe".parse::<Metric>().is_err());
    }
}
