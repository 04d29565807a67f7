//! Parallel policy x rate x seed sweeps.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::compare::{compare, ComparisonTable};
use super::engine::{prepare, run_prepared, Prepared};
use super::metrics::MetricsReport;
use super::PolicyKind;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::workload::{generate_trace, Trace};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub base: RunConfig,
    pub policies: Vec<PolicyKind>,
    pub rates: Vec<f64>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepFailure {
    pub policy: PolicyKind,
    pub rate: f64,
    pub seed: u64,
    pub error: String,
    pub runtime_abort: bool,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    /// Successful runs in (policy, rate, seed) order.
    pub reports: Vec<MetricsReport>,
    pub failures: Vec<SweepFailure>,
    pub table: ComparisonTable,
}

/// Runs every combination in parallel. Each seed's trace is shared by all
/// policies, and each rate reuses the seed so curves use common random
/// numbers. Failing runs are collected rather than aborting the others.
pub fn sweep(spec: &SweepSpec) -> Result<SweepOutcome> {
    if spec.policies.is_empty() || spec.rates.is_empty() || spec.seeds.is_empty() {
        return Err(Error::Empty("sweep axes"));
    }
    spec.base.validate()?;
    let dist = spec.base.length_distribution()?;
    let duration = spec.base.workload.duration_s;
    let need_predictor = spec.policies.iter().any(|p| p.uses_predictor());

    let prepared: Vec<Prepared> = spec
        .seeds
        .par_iter()
        .map(|&seed| prepare(&spec.base, seed, need_predictor))
        .collect::<Result<_>>()?;
    let traces: Vec<Vec<Trace>> = spec
        .rates
        .par_iter()
        .map(|&rate| {
            spec.seeds
                .iter()
                .map(|&seed| generate_trace(rate, duration, &dist, seed))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let mut jobs = Vec::new();
    for &policy in &spec.policies {
        for ri in 0..spec.rates.len() {
            for si in 0..spec.seeds.len() {
                jobs.push((policy, ri, si));
            }
        }
    }
    let results: Vec<std::result::Result<MetricsReport, SweepFailure>> = jobs
        .par_iter()
        .map(|&(policy, ri, si)| {
            let mut cfg = spec.base.clone();
            cfg.policy = policy;
            cfg.seed = spec.seeds[si];
            cfg.workload.rate = spec.rates[ri];
            run_prepared(&traces[ri][si], &cfg, &prepared[si], None).map_err(|e| SweepFailure {
                policy,
                rate: spec.rates[ri],
                seed: spec.seeds[si],
                runtime_abort: e.is_runtime_abort(),
                error: e.to_string(),
            })
        })
        .collect();
    let mut reports = Vec::new();
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(rep) => reports.push(rep),
            Err(f) => failures.push(f),
        }
    }
    let table = compare(&reports, spec.base.sim.knee_multiple)?;
    Ok(SweepOutcome {
        reports,
        failures,
        table,
    })
}
