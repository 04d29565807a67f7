//! Policy-by-rate comparison tables and knee detection.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::metrics::{mean, MetricsReport};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub policy: String,
    pub rate: f64,
    pub seeds: usize,
    pub normalized_latency_ms_per_token: f64,
    pub baseline_ms_per_token: f64,
    pub mean_e2e_ms: f64,
    pub throughput_rps: f64,
    /// This rate is the policy's knee.
    pub knee: bool,
    /// The policy's knee rate, if any swept rate exceeded the threshold.
    pub knee_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub knee_multiple: f64,
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    pub fn knee_rate(&self, policy: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.policy == policy).and_then(|r| r.knee_rate)
    }

    pub fn row(&self, policy: &str, rate: f64) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.policy == policy && r.rate == rate)
    }
}

/// Averages reports over seeds for each (policy, rate) and marks each
/// policy's knee: the first rate whose normalized latency exceeds
/// `knee_multiple` times the unloaded baseline.
pub fn compare(reports: &[MetricsReport], knee_multiple: f64) -> Result<ComparisonTable> {
    if !(knee_multiple > 0.0) {
        return Err(Error::InvalidParameter("knee multiple must be > 0".into()));
    }
    if let Some(first) = reports.first() {
        for r in reports {
            if r.meta.trace_family != first.meta.trace_family {
                return Err(Error::Incompatible(format!(
                    "trace families {} and {}",
                    first.meta.trace_family, r.meta.trace_family
                )));
            }
            if r.meta.env_digest != first.meta.env_digest {
                return Err(Error::Incompatible("reports come from different environments".into()));
            }
        }
    }
    let mut groups: BTreeMap<(String, u64), Vec<&MetricsReport>> = BTreeMap::new();
    for r in reports {
        let rate = r.meta.rate.unwrap_or(0.0);
        let key = (r.meta.policy.clone(), rate.to_bits());
        let group = groups.entry(key).or_default();
        if group.iter().any(|g| g.meta.seed == r.meta.seed) {
            return Err(Error::Incompatible(format!(
                "duplicate report for {} at rate {rate} seed {}",
                r.meta.policy, r.meta.seed
            )));
        }
        group.push(r);
    }
    let mut rows: Vec<ComparisonRow> = groups
        .into_iter()
        .map(|((policy, bits), g)| ComparisonRow {
            policy,
            rate: f64::from_bits(bits),
            seeds: g.len(),
            normalized_latency_ms_per_token: mean(g.iter().map(|r| r.normalized_latency_ms_per_token)),
            baseline_ms_per_token: mean(g.iter().map(|r| r.baseline_normalized_latency_ms_per_token)),
            mean_e2e_ms: mean(g.iter().map(|r| r.mean_e2e_ms)),
            throughput_rps: mean(g.iter().map(|r| r.throughput_rps)),
            knee: false,
            knee_rate: None,
        })
        .collect();
    rows.sort_by(|a, b| a.policy.cmp(&b.policy).then(a.rate.total_cmp(&b.rate)));

    let mut knees: BTreeMap<String, f64> = BTreeMap::new();
    for r in &mut rows {
        if !knees.contains_key(&r.policy)
            && r.normalized_latency_ms_per_token > knee_multiple * r.baseline_ms_per_token
        {
            knees.insert(r.policy.clone(), r.rate);
            r.knee = true;
        }
    }
    for r in &mut rows {
        r.knee_rate = knees.get(&r.policy).copied();
    }
    Ok(ComparisonTable { knee_multiple, rows })
}
