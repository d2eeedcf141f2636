//! Synthetic regression streams with known concept trajectories.
//!
//! Both generators draw `x ~ N(0, I)` and label `y = x·W + noise_std·ε`.
//! The gradual generator rotates `W` at a constant rate inside a random
//! plane; the abrupt generator redraws `W` at each segment boundary.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, norm2};
use crate::stream::{Sample, TimeIndexedStream};

fn one() -> usize {
    1
}

fn default_period() -> u64 {
    20
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradualDriftSpec {
    pub feature_dim: usize,
    pub total_length: u64,
    /// Radians per tick.
    pub rotation_rate: f64,
    pub noise_std: f64,
    pub seed: u64,
    #[serde(default = "one")]
    pub samples_per_tick: usize,
    #[serde(default = "default_period")]
    pub period_length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AbruptDriftSpec {
    pub feature_dim: usize,
    pub segment_lengths: Vec<u64>,
    pub noise_std: f64,
    pub seed: u64,
    #[serde(default = "one")]
    pub samples_per_tick: usize,
    #[serde(default = "default_period")]
    pub period_length: u64,
}

/// Concept weights in force at each tick.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleWeights {
    pub ticks: Vec<i64>,
    pub weights: Vec<Vec<f64>>,
}

impl OracleWeights {
    pub fn at(&self, tick: i64) -> Option<&[f64]> {
        let i = self.ticks.binary_search(&tick).ok()?;
        Some(&self.weights[i])
    }

    /// CSV with header `timestamp,w0,...,w{m-1}`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let m = self.weights.first().map_or(0, Vec::len);
        let mut header = vec!["timestamp".to_string()];
        header.extend((0..m).map(|j| format!("w{j}")));
        w.write_record(&header)?;
        for (t, wt) in self.ticks.iter().zip(&self.weights) {
            let mut rec = vec![t.to_string()];
            rec.extend(wt.iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct GeneratedStream {
    pub stream: TimeIndexedStream,
    pub oracle: OracleWeights,
}

/// Planar rotation `W(t) = cos(rt)·u + sin(rt)·v` with orthonormal `u, v`.
#[derive(Debug, Clone, PartialEq)]
pub struct RotationPath {
    u: Vec<f64>,
    v: Vec<f64>,
    rate: f64,
}

impl RotationPath {
    pub fn at(&self, tick: i64) -> Vec<f64> {
        let angle = self.rate * tick as f64;
        let (s, c) = angle.sin_cos();
        self.u.iter().zip(&self.v).map(|(a, b)| c * a + s * b).collect()
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, m: usize) -> Vec<f64> {
    (0..m).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn unit_vec(rng: &mut ChaCha8Rng, m: usize) -> Vec<f64> {
    loop {
        let mut w = gaussian_vec(rng, m);
        let n = norm2(&w);
        if n > 1e-8 {
            w.iter_mut().for_each(|x| *x /= n);
            return w;
        }
    }
}

fn validate_common(feature_dim: usize, noise_std: f64, samples_per_tick: usize) -> Result<()> {
    if feature_dim == 0 {
        return Err(Error::InvalidSpec("feature_dim must be >= 1".into()));
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(Error::InvalidSpec("noise_std must be finite and >= 0".into()));
    }
    if samples_per_tick == 0 {
        return Err(Error::InvalidSpec("samples_per_tick must be >= 1".into()));
    }
    Ok(())
}

fn draw_samples(
    rng: &mut ChaCha8Rng,
    tick: i64,
    w: &[f64],
    noise_std: f64,
    per_tick: usize,
    out: &mut Vec<Sample>,
) {
    for _ in 0..per_tick {
        let x = gaussian_vec(rng, w.len());
        let eps: f64 = rng.sample(StandardNormal);
        let y = dot(&x, w) + noise_std * eps;
        out.push(Sample::new(tick, x, y));
    }
}

impl GradualDriftSpec {
    pub fn rotation_path(&self) -> Result<RotationPath> {
        validate_common(self.feature_dim, self.noise_std, self.samples_per_tick)?;
        if !self.rotation_rate.is_finite() {
            return Err(Error::InvalidSpec("rotation_rate must be finite".into()));
        }
        if self.feature_dim < 2 && self.rotation_rate != 0.0 {
            return Err(Error::RotationUndefined {
                feature_dim: self.feature_dim,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let u = unit_vec(&mut rng, self.feature_dim);
        let v = if self.feature_dim >= 2 {
            // Gram-Schmidt against u
            loop {
                let mut v = gaussian_vec(&mut rng, self.feature_dim);
                let proj = dot(&v, &u);
                axpy(-proj, &u, &mut v);
                let n = norm2(&v);
                if n > 1e-8 {
                    v.iter_mut().for_each(|x| *x /= n);
                    break v;
                }
            }
        } else {
            vec![0.0]
        };
        Ok(RotationPath {
            u,
            v,
            rate: self.rotation_rate,
        })
    }
}

pub fn generate_gradual(spec: &GradualDriftSpec) -> Result<GeneratedStream> {
    let path = spec.rotation_path()?;
    if spec.total_length == 0 {
        return Err(Error::InvalidSpec("total_length must be >= 1".into()));
    }
    // separate stream for sampling so the path does not depend on length
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut samples = Vec::with_capacity(spec.total_length as usize * spec.samples_per_tick);
    let mut oracle = OracleWeights {
        ticks: Vec::new(),
        weights: Vec::new(),
    };
    for t in 0..spec.total_length as i64 {
        let w = path.at(t);
        draw_samples(&mut rng, t, &w, spec.noise_std, spec.samples_per_tick, &mut samples);
        oracle.ticks.push(t);
        oracle.weights.push(w);
    }
    Ok(GeneratedStream {
        stream: TimeIndexedStream::new(samples, spec.period_length)?,
        oracle,
    })
}

pub fn generate_abrupt(spec: &AbruptDriftSpec) -> Result<GeneratedStream> {
    if spec.segment_lengths.is_empty() {
        return Err(Error::NoSegments);
    }
    validate_common(spec.feature_dim, spec.noise_std, spec.samples_per_tick)?;
    if spec.segment_lengths.contains(&0) {
        return Err(Error::InvalidSpec("segment lengths must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let total: u64 = spec.segment_lengths.iter().sum();
    let mut samples = Vec::with_capacity(total as usize * spec.samples_per_tick);
    let mut oracle = OracleWeights {
        ticks: Vec::new(),
        weights: Vec::new(),
    };
    let mut t = 0i64;
    for &len in &spec.segment_lengths {
        let w = unit_vec(&mut rng, spec.feature_dim);
        for _ in 0..len {
            draw_samples(&mut rng, t, &w, spec.noise_std, spec.samples_per_tick, &mut samples);
            oracle.ticks.push(t);
            oracle.weights.push(w.clone());
            t += 1;
        }
    }
    Ok(GeneratedStream {
        stream: TimeIndexedStream::new(samples, spec.period_length)?,
        oracle,
    })
}
