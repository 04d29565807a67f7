//! Ground-truth batch executor used in place of a GPU.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::costmodel::ProfileSample;
use crate::error::{Error, Result};
use crate::rng::{self, stream};
use crate::workload::Micros;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExecutorParams {
    /// Prefill ms per token.
    #[serde(rename = "T0")]
    pub t0: f64,
    /// Decode ms per context token per job.
    pub alpha: f64,
    /// Decode ms per job.
    pub beta: f64,
    /// Fixed ms per iteration.
    pub gamma0: f64,
    /// Standard deviation of additive Gaussian noise (ms).
    pub sigma: f64,
    /// Decode terms use the full context `s + generated` instead of `s`.
    pub context_growth: bool,
}

impl Default for ExecutorParams {
    fn default() -> Self {
        ExecutorParams {
            t0: 0.12,
            alpha: 0.0008,
            beta: 1.0,
            gamma0: 28.0,
            sigma: 0.0,
            context_growth: false,
        }
    }
}

/// One job's share of an iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Work {
    /// Build the cache over `tokens` context tokens in one pass.
    Prefill { tokens: u32 },
    /// Emit one token.
    Decode { input_len: u32, generated: u32 },
}

/// Smallest iteration the executor reports (ms).
const MIN_ITERATION_MS: f64 = 1e-3;

impl ExecutorParams {
    pub fn validate(&self) -> Result<()> {
        let vals = [self.t0, self.alpha, self.beta, self.gamma0, self.sigma];
        if vals.iter().any(|v| !v.is_finite() || *v < 0.0) || self.t0 <= 0.0 || self.beta <= 0.0 {
            return Err(Error::InvalidParameter(
                "executor needs T0, beta > 0 and alpha, gamma0, sigma >= 0".into(),
            ));
        }
        Ok(())
    }

    /// Noise-free latency of one iteration (ms).
    pub fn mean_latency(&self, batch: &[Work]) -> f64 {
        let mut t = self.gamma0;
        for w in batch {
            t += match *w {
                Work::Prefill { tokens } => tokens as f64 * self.t0,
                Work::Decode {
                    input_len,
                    generated,
                } => {
                    let ctx = if self.context_growth {
                        input_len as f64 + generated as f64
                    } else {
                        input_len as f64
                    };
                    self.alpha * ctx + self.beta
                }
            };
        }
        t
    }

    /// Latency of a single request run alone from arrival to completion:
    /// one prefill iteration, then one decode iteration per output token.
    pub fn unloaded_latency_ms(&self, input_len: u32, output_len: u32) -> f64 {
        let mut us = duration_us(self.mean_latency(&[Work::Prefill { tokens: input_len }]));
        for g in 0..output_len {
            us += duration_us(self.mean_latency(&[Work::Decode {
                input_len,
                generated: g,
            }]));
        }
        us as f64 / 1000.0
    }
}

/// Simulated iteration latency (ms), never below a microsecond.
pub fn iteration_latency<R: Rng + ?Sized>(batch: &[Work], params: &ExecutorParams, rng: &mut R) -> f64 {
    let mut t = params.mean_latency(batch);
    if params.sigma > 0.0 {
        let noise = Normal::new(0.0, params.sigma).expect("sigma validated");
        t += noise.sample(rng);
    }
    t.max(MIN_ITERATION_MS)
}

/// Integer duration of an iteration, at least 1 µs.
pub fn duration_us(ms: f64) -> Micros {
    ((ms * 1000.0).round() as Micros).max(1)
}

/// Measures single-job prefill and decode-step times for every `s` in
/// `grid`, `reps` times each. The per-iteration overhead is subtracted so
/// the samples follow the per-job cost form.
pub fn profile(
    params: &ExecutorParams,
    grid: &[u32],
    reps: usize,
    seed: u64,
) -> Result<Vec<ProfileSample<f64>>> {
    params.validate()?;
    if grid.is_empty() || reps == 0 {
        return Err(Error::Empty("profiling grid"));
    }
    let mut p = *params;
    p.context_growth = false;
    let mut rng = rng::component_rng(seed, stream::PROFILING);
    let mut out = Vec::with_capacity(grid.len() * reps);
    for &s in grid {
        for _ in 0..reps {
            let t_pre = iteration_latency(&[Work::Prefill { tokens: s }], &p, &mut rng) - p.gamma0;
            let t_step = iteration_latency(
                &[Work::Decode {
                    input_len: s,
                    generated: 0,
                }],
                &p,
                &mut rng,
            ) - p.gamma0;
            out.push(ProfileSample {
                s,
                n: 1,
                t_pre,
                t_step,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::costmodel::calibrate;

    #[test]
    fn single_decode_job() {
        let p = ExecutorParams {
            t0: 0.1,
            alpha: 0.01,
            beta: 5.0,
            gamma0: 1.0,
            sigma: 0.0,
            context_growth: false,
        };
        let mut rng = rng::component_rng(0, 0);
        let w = Work::Decode {
            input_len: 100,
            generated: 0,
        };
        assert!((iteration_latency(&[w], &p, &mut rng) - 7.0).abs() < 1e-12);
        assert_eq!(p.mean_latency(&[]), 1.0);
        let one = p.mean_latency(&[w]) - p.gamma0;
        let two = p.mean_latency(&[w, w]) - p.gamma0;
        assert_eq!(two, 2.0 * one);
    }

    #[test]
    fn context_growth_uses_generated() {
        let p = ExecutorParams {
            context_growth: true,
            ..ExecutorParams::default()
        };
        let a = p.mean_latency(&[Work::Decode { input_len: 100, generated: 0 }]);
        let b = p.mean_latency(&[Work::Decode { input_len: 100, generated: 50 }]);
        assert!((b - a - 50.0 * p.alpha).abs() < 1e-12);
    }

    #[test]
    fn noise_free_profile_recovers_truth() {
        let p = ExecutorParams::default();
        let samples = profile(&p, &[16, 64, 256, 1024], 2, 1).unwrap();
        let fit = calibrate(&samples).unwrap().coefficients;
        assert!(((fit.t0 - p.t0) / p.t0).abs() < 1e-9);
        assert!(((fit.alpha - p.alpha) / p.alpha).abs() < 1e-9);
        assert!(((fit.beta - p.beta) / p.beta).abs() < 1e-9);
    }

    #[test]
    fn latency_is_positive_under_noise() {
        let p = ExecutorParams {
            sigma: 1000.0,
            ..ExecutorParams::default()
        };
        let mut rng = rng::component_rng(3, 0);
        for _ in 0..200 {
            assert!(iteration_latency(&[Work::Prefill { tokens: 1 }], &p, &mut rng) > 0.0);
        }
        assert_eq!(duration_us(1e-9), 1);
    }
}
