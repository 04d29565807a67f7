//! Run reports.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::workload::RequestId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub id: RequestId,
    pub input_len: u32,
    pub output_len: u32,
    pub arrival_ms: f64,
    pub first_token_ms: f64,
    pub completion_ms: f64,
    pub generated: u32,
    pub e2e_ms: f64,
    pub normalized_ms_per_token: f64,
    /// Length predicted at arrival, when the policy uses a predictor.
    pub predicted_len: Option<u32>,
    pub demotions: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SwapStats {
    pub offloads: u64,
    pub uploads: u64,
    pub offload_bytes: u64,
    pub upload_bytes: u64,
    /// Caches deleted for later recomputation.
    pub kv_drops: u64,
    /// Caches evicted because nothing else could run.
    pub emergency_evictions: u64,
    /// Preemptions by the paged FCFS baseline when its batch outgrew memory.
    pub fcfs_preemptions: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PredictorStats {
    pub predictions: u64,
    /// Mean `|predicted - actual| / actual` of arrival-time predictions.
    pub pred_error: f64,
    /// Share of predictions answered from the database.
    pub retrieved_fraction: f64,
    pub mean_latency_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub policy: String,
    pub seed: u64,
    pub rate: Option<f64>,
    pub trace_family: String,
    pub config_digest: String,
    pub env_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub meta: RunMeta,
    pub arrived: u64,
    pub completed: u64,
    /// The simulated-time budget ran out before every request finished.
    pub truncated: bool,
    /// Mean of `e2e / generated tokens` over completed requests (ms/token).
    pub normalized_latency_ms_per_token: f64,
    /// The same statistic for each request served alone on an idle system.
    pub baseline_normalized_latency_ms_per_token: f64,
    pub mean_e2e_ms: f64,
    pub p95_e2e_ms: f64,
    pub mean_ttft_ms: f64,
    pub throughput_rps: f64,
    pub throughput_tps: f64,
    pub makespan_s: f64,
    pub iterations: u64,
    /// Tokens processed by the executor: prefill context plus decode steps.
    pub executed_tokens: u64,
    /// Prefill tokens spent rebuilding dropped caches.
    pub recomputed_tokens: u64,
    pub demotions: u64,
    pub gpu_capacity_bytes: u64,
    pub gpu_high_water_bytes: u64,
    pub swaps: SwapStats,
    pub predictor: Option<PredictorStats>,
    pub requests: Vec<RequestRecord>,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_json<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(self.to_json()?.as_bytes())?;
        out.write_all(b"\n")?;
        Ok(())
    }

    /// One-line human summary.
    pub fn summary_line(&self) -> String {
        format!(
            "policy={} completed={}/{} normalized_latency={:.3} ms/token mean_e2e={:.1} ms throughput={:.4} req/s",
            self.meta.policy,
            self.completed,
            self.arrived,
            self.normalized_latency_ms_per_token,
            self.mean_e2e_ms,
            self.throughput_rps
        )
    }
}

pub(crate) fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Nearest-rank percentile of an unsorted sample; 0 when empty.
pub(crate) fn percentile(xs: &[f64], p: f64) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
    v[rank.min(v.len()) - 1]
}
