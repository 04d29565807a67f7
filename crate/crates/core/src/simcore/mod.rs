//! Deterministic discrete-event simulation of an LLM serving node.
//!
//! One run replays a trace against a simulated executor under one policy.
//! Time advances in integer microseconds; events at equal times are ordered
//! transfer completion, iteration completion, arrival, aging tick, then by
//! insertion order.

mod compare;
mod engine;
mod executor;
mod metrics;
mod sweep;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

pub use compare::{compare, ComparisonRow, ComparisonTable};
pub use engine::{prepare, run, run_prepared, Prepared};
pub use executor::{duration_us, iteration_latency, profile, ExecutorParams, Work};
pub use metrics::{MetricsReport, PredictorStats, RequestRecord, RunMeta, SwapStats};
pub use sweep::{sweep, SweepFailure, SweepOutcome, SweepSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    /// Predicted-length priority queues with preemption, aging and
    /// wait-time driven KV swapping.
    Speculative,
    /// FCFS continuous batching that reserves memory for the maximum length.
    FcfsOrca,
    /// FCFS continuous batching with paged, on-demand KV allocation.
    FcfsVllm,
    /// The speculative policy with the true output length as prediction.
    Oracle,
    /// The speculative policy deleting preempted caches instead of swapping.
    Recompute,
    /// The speculative policy without swapping; new jobs wait for memory.
    Defer,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 6] = [
        PolicyKind::Speculative,
        PolicyKind::FcfsOrca,
        PolicyKind::FcfsVllm,
        PolicyKind::Oracle,
        PolicyKind::Recompute,
        PolicyKind::Defer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Speculative => "speculative",
            PolicyKind::FcfsOrca => "fcfs_orca",
            PolicyKind::FcfsVllm => "fcfs_vllm",
            PolicyKind::Oracle => "oracle",
            PolicyKind::Recompute => "recompute",
            PolicyKind::Defer => "defer",
        }
    }

    pub fn is_fcfs(self) -> bool {
        matches!(self, PolicyKind::FcfsOrca | PolicyKind::FcfsVllm)
    }

    pub fn uses_predictor(self) -> bool {
        matches!(
            self,
            PolicyKind::Speculative | PolicyKind::Recompute | PolicyKind::Defer
        )
    }

    /// Runs the swap planner before each iteration.
    pub fn plans_swaps(self) -> bool {
        matches!(
            self,
            PolicyKind::Speculative | PolicyKind::Oracle | PolicyKind::Recompute
        )
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        PolicyKind::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = PolicyKind::ALL.iter().map(|p| p.name()).collect();
                Error::InvalidParameter(format!("unknown policy '{s}' (expected one of {})", names.join(", ")))
            })
    }
}
