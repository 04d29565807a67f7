//! Analytic execution-time model and its least-squares calibration.
//!
//! A request with `s` prompt tokens and `n` output tokens costs
//! `T_gen(s, n) = s*T0 + n*(alpha*s + beta)` milliseconds: a prefill term
//! linear in the prompt and a per-step decode term that depends on the prompt
//! length only.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostCoefficients<T> {
    /// Prefill cost per prompt token (ms).
    #[serde(rename = "T0")]
    pub t0: T,
    /// Decode-step slope per prompt token (ms).
    pub alpha: T,
    /// Decode-step intercept (ms).
    pub beta: T,
}

impl<T: Scalar> CostCoefficients<T> {
    pub fn new(t0: T, alpha: T, beta: T) -> Result<Self> {
        let c = CostCoefficients { t0, alpha, beta };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.t0.is_finite() && self.alpha.is_finite() && self.beta.is_finite();
        if !finite || self.t0 <= T::zero() || self.beta <= T::zero() || self.alpha < T::zero() {
            return Err(Error::InvalidParameter(format!(
                "cost coefficients need T0 > 0, beta > 0, alpha >= 0 (got {}, {}, {})",
                self.t0, self.alpha, self.beta
            )));
        }
        Ok(())
    }

    pub fn prefill(&self, s: u32) -> T {
        T::of_count(s as u64) * self.t0
    }

    pub fn decode_step(&self, s: u32) -> T {
        self.alpha * T::of_count(s as u64) + self.beta
    }

    /// Every coefficient multiplied by `k`.
    pub fn scaled(&self, k: T) -> Self {
        CostCoefficients {
            t0: self.t0 * k,
            alpha: self.alpha * k,
            beta: self.beta * k,
        }
    }
}

/// Total prefill + decode estimate for `s` input and `n` output tokens.
pub fn estimate_total<T: Scalar>(s: u32, n: u32, c: &CostCoefficients<T>) -> T {
    c.prefill(s) + T::of_count(n as u64) * c.decode_step(s)
}

/// Scheduling view of a job's progress.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct JobProgress {
    pub input_len: u32,
    pub predicted_len: u32,
    pub generated: u32,
    /// KV cache present, so only decode steps remain.
    pub prefilled: bool,
}

/// Estimated remaining execution time (ms), never negative.
///
/// A job without KV pays a prefill over its prompt plus anything it already
/// generated (nothing for a fresh job, the whole history after its cache was
/// dropped), then the remaining decode steps.
pub fn remaining_time<T: Scalar>(p: &JobProgress, c: &CostCoefficients<T>) -> T {
    let steps_left = T::of_count(p.predicted_len.saturating_sub(p.generated) as u64);
    let decode = steps_left * c.decode_step(p.input_len);
    let t = if p.prefilled {
        decode
    } else {
        c.prefill(p.input_len.saturating_add(p.generated)) + decode
    };
    t.max(T::zero())
}

/// One profiled measurement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileSample<T> {
    pub s: u32,
    pub n: u32,
    /// Prefill time (ms).
    pub t_pre: T,
    /// Time of one decode step (ms).
    pub t_step: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration<T> {
    pub coefficients: CostCoefficients<T>,
    /// Standard errors of each fitted coefficient.
    pub std_errors: CostCoefficients<T>,
    pub residual_rms_prefill: T,
    pub residual_rms_step: T,
    pub samples: usize,
}

/// Fits `T0` through the origin on `(s, t_pre)` and `(alpha, beta)` by
/// ordinary least squares on `(s, t_step)`.
pub fn calibrate<T: Scalar>(samples: &[ProfileSample<T>]) -> Result<Calibration<T>> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::Underdetermined(format!("need >= 2 samples, got {n}")));
    }
    let first = samples[0].s;
    if samples.iter().all(|p| p.s == first) {
        return Err(Error::Underdetermined("all samples share one input length".into()));
    }
    for p in samples {
        let ok = p.s > 0 && p.t_pre.is_finite() && p.t_step.is_finite();
        if !ok {
            return Err(Error::InvalidParameter(format!("bad profile sample {p:?}")));
        }
    }
    let nn = T::of_count(n as u64);
    let xs = |p: &ProfileSample<T>| T::of_count(p.s as u64);

    let sxx0: T = samples.iter().map(|p| xs(p) * xs(p)).sum();
    let sxy0: T = samples.iter().map(|p| xs(p) * p.t_pre).sum();
    let t0 = sxy0 / sxx0;
    let sse0: T = samples
        .iter()
        .map(|p| {
            let r = p.t_pre - t0 * xs(p);
            r * r
        })
        .sum();

    let mean_x = samples.iter().map(xs).sum::<T>() / nn;
    let mean_y = samples.iter().map(|p| p.t_step).sum::<T>() / nn;
    let sxx: T = samples.iter().map(|p| (xs(p) - mean_x).powi(2)).sum();
    let sxy: T = samples
        .iter()
        .map(|p| (xs(p) - mean_x) * (p.t_step - mean_y))
        .sum();
    let alpha = sxy / sxx;
    let beta = mean_y - alpha * mean_x;
    let sse1: T = samples
        .iter()
        .map(|p| {
            let r = p.t_step - (alpha * xs(p) + beta);
            r * r
        })
        .sum();

    let var0 = if n > 1 { sse0 / T::of_count(n as u64 - 1) } else { T::zero() };
    let var1 = if n > 2 { sse1 / T::of_count(n as u64 - 2) } else { T::zero() };
    let std_errors = CostCoefficients {
        t0: (var0 / sxx0).sqrt(),
        alpha: (var1 / sxx).sqrt(),
        beta: (var1 * (T::one() / nn + mean_x * mean_x / sxx)).sqrt(),
    };

    Ok(Calibration {
        coefficients: CostCoefficients::new(t0, alpha, beta)?,
        std_errors,
        residual_rms_prefill: (sse0 / nn).sqrt(),
        residual_rms_step: (sse1 / nn).sqrt(),
        samples: n,
    })
}
