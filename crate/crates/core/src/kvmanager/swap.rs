//! Estimated wait times and the swap planner.

use serde::{Deserialize, Serialize};

use super::memory::{Direction, MemoryState, TransferCommand};
use super::Residency;
use crate::scalar::Scalar;
use crate::scheduler::PriorityQueueSet;
use crate::workload::{us_to_ms, Micros, RequestId};

/// `min(ahead_ms, T_promote)` where `T_promote = level * K - waited`,
/// clamped at 0. Jobs already at level 0 cannot be promoted, so only the
/// work ahead of them counts; without aging the same holds at every level.
pub fn estimated_wait(ahead_ms: f64, level: usize, waited_ms: f64, aging_ms: Option<f64>) -> f64 {
    let promote = match aging_ms {
        Some(k) if level > 0 => (level as f64 * k - waited_ms).max(0.0),
        _ => f64::INFINITY,
    };
    ahead_ms.min(promote).max(0.0)
}

/// EWT of every queued job, in scheduling order.
pub fn ewt_all<T: Scalar>(queues: &PriorityQueueSet<T>, now: Micros) -> Vec<(RequestId, f64)> {
    let aging = queues.config().aging();
    let mut ahead = 0.0;
    queues
        .ranked()
        .into_iter()
        .map(|job| {
            let waited = us_to_ms(now.saturating_sub(job.last_promotion_us));
            let e = estimated_wait(ahead, job.level, waited, aging);
            ahead += job.remaining_ms;
            (job.id(), e)
        })
        .collect()
}

pub fn ewt<T: Scalar>(queues: &PriorityQueueSet<T>, id: RequestId, now: Micros) -> Option<f64> {
    ewt_all(queues, now).into_iter().find(|(j, _)| *j == id).map(|(_, e)| e)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SwapCandidate {
    pub id: RequestId,
    pub level: usize,
    pub ewt_ms: f64,
    /// Position in scheduling order, the final tie-break.
    pub rank: usize,
    pub residency: Residency,
    /// GPU bytes the job needs to run its next step.
    pub gpu_bytes: u64,
    /// Bytes of its compressed copy.
    pub cpu_bytes: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SwapPlan {
    pub granted: Vec<RequestId>,
    pub denied: Vec<RequestId>,
    pub commands: Vec<TransferCommand>,
    /// An offload was needed but CPU memory had no room for it.
    pub cpu_exhausted: bool,
}

/// Grants GPU residency greedily in `(level, EWT, rank)` order against the
/// GPU capacity left after in-flight transfers and `reserved_bytes` (the
/// running batch), then emits uploads for granted jobs on CPU and offloads
/// for denied jobs on GPU.
///
/// Jobs with a transfer in flight must not be passed in; their bytes are
/// already charged by `memory`. Uploads are only issued when the GPU has
/// room now, so an upload may lag the offloads that make room for it.
pub fn plan_swaps(
    candidates: &[SwapCandidate],
    memory: &MemoryState,
    reserved_bytes: u64,
    now: Micros,
) -> SwapPlan {
    let mut order: Vec<&SwapCandidate> = candidates.iter().collect();
    order.sort_by(|a, b| {
        (a.level, a.ewt_ms, a.rank)
            .partial_cmp(&(b.level, b.ewt_ms, b.rank))
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut budget = memory
        .gpu_capacity()
        .saturating_sub(memory.in_flight_gpu_bytes())
        .saturating_sub(reserved_bytes);
    let mut plan = SwapPlan::default();
    let mut grant = Vec::new();
    let mut deny = Vec::new();
    for c in order {
        debug_assert!(!c.residency.in_flight(), "in-flight job {} passed to planner", c.id);
        if c.gpu_bytes <= budget {
            budget -= c.gpu_bytes;
            plan.granted.push(c.id);
            grant.push(c);
        } else {
            plan.denied.push(c.id);
            deny.push(c);
        }
    }

    let mut probe = memory.clone();
    for c in deny.into_iter().filter(|c| c.residency == Residency::Gpu) {
        if probe.cpu_free() < c.cpu_bytes {
            plan.cpu_exhausted = true;
            continue;
        }
        let (start_us, completion_us) = probe.schedule(Direction::Offload, c.cpu_bytes, now);
        let cmd = TransferCommand {
            job: c.id,
            direction: Direction::Offload,
            bytes: c.cpu_bytes,
            start_us,
            completion_us,
        };
        probe.begin(cmd, 0).expect("offload checked above");
        plan.commands.push(cmd);
    }
    for c in grant.into_iter().filter(|c| c.residency == Residency::Cpu) {
        if probe.gpu_free() < c.gpu_bytes {
            continue;
        }
        let (start_us, completion_us) = probe.schedule(Direction::Upload, c.cpu_bytes, now);
        let cmd = TransferCommand {
            job: c.id,
            direction: Direction::Upload,
            bytes: c.cpu_bytes,
            start_us,
            completion_us,
        };
        probe.begin(cmd, c.gpu_bytes).expect("upload checked above");
        plan.commands.push(cmd);
    }
    plan
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::costmodel::CostCoefficients;
    use crate::scheduler::{Job, SchedulerConfig};
    use crate::workload::Request;

    #[test]
    fn ewt_arms() {
        assert_eq!(estimated_wait(0.0, 0, 0.0, Some(1000.0)), 0.0);
        assert_eq!(estimated_wait(5000.0 + 7000.0, 2, 0.0, Some(10_000.0)), 12_000.0);
        assert_eq!(estimated_wait(1e6, 3, 0.0, Some(1000.0)), 3000.0);
        assert_eq!(estimated_wait(1e6, 3, 5000.0, Some(1000.0)), 0.0);
        assert_eq!(estimated_wait(1e6, 3, 0.0, None), 1e6);
        assert_eq!(estimated_wait(1e6, 0, 0.0, Some(1000.0)), 1e6);
    }

    fn cand(id: u64, ewt_ms: f64, residency: Residency, bytes: u64) -> SwapCandidate {
        SwapCandidate {
            id,
            level: 1,
            ewt_ms,
            rank: id as usize,
            residency,
            gpu_bytes: bytes,
            cpu_bytes: bytes / 2,
        }
    }

    #[test]
    fn no_pressure_no_commands() {
        let mut m = MemoryState::new(1000, 1000, 1.0).unwrap();
        m.set_gpu_bytes(1, 100).unwrap();
        let plan = plan_swaps(
            &[cand(1, 0.0, Residency::Gpu, 100), cand(2, 5.0, Residency::None, 100)],
            &m,
            0,
            0,
        );
        assert!(plan.commands.is_empty());
        assert_eq!(plan.granted, vec![1, 2]);
    }

    #[test]
    fn upload_short_wait_offload_long_wait() {
        let mut m = MemoryState::new(120, 1000, 1.0).unwrap();
        m.set_gpu_bytes(9, 60).unwrap();
        m.set_gpu_bytes(3, 60).unwrap();
        let (s, e) = m.schedule(Direction::Offload, 30, 0);
        m.begin(
            TransferCommand {
                job: 3,
                direction: Direction::Offload,
                bytes: 30,
                start_us: s,
                completion_us: e,
            },
            0,
        )
        .unwrap();
        m.complete(3).unwrap();
        assert_eq!(m.residency(3), Residency::Cpu);
        let plan = plan_swaps(
            &[cand(3, 3000.0, Residency::Cpu, 70), cand(9, 9000.0, Residency::Gpu, 70)],
            &m,
            0,
            0,
        );
        assert_eq!(plan.granted, vec![3]);
        assert_eq!(plan.denied, vec![9]);
        // the upload waits for the offload to free room
        assert_eq!(plan.commands.len(), 1);
        assert_eq!(plan.commands[0].job, 9);
        assert_eq!(plan.commands[0].direction, Direction::Offload);
        assert_eq!(plan.commands[0].completion_us, 65_000); // queued behind the first offload

        // once the offload lands the same plan uploads job 3
        let mut m2 = m.clone();
        m2.begin(plan.commands[0], 0).unwrap();
        m2.complete(9).unwrap();
        let plan = plan_swaps(
            &[cand(3, 3000.0, Residency::Cpu, 70), cand(9, 9000.0, Residency::Cpu, 70)],
            &m2,
            0,
            65_000,
        );
        assert_eq!(plan.commands.len(), 1);
        assert_eq!((plan.commands[0].job, plan.commands[0].direction), (3, Direction::Upload));
    }

    #[test]
    fn resident_granted_job_gets_no_command() {
        let mut m = MemoryState::new(100, 1000, 1.0).unwrap();
        m.set_gpu_bytes(1, 50).unwrap();
        let plan = plan_swaps(&[cand(1, 0.0, Residency::Gpu, 50)], &m, 0, 0);
        assert!(plan.commands.is_empty());
    }

    #[test]
    fn reserved_bytes_shrink_the_budget() {
        let mut m = MemoryState::new(100, 1000, 1.0).unwrap();
        m.set_gpu_bytes(1, 40).unwrap();
        let plan = plan_swaps(&[cand(1, 0.0, Residency::Gpu, 40)], &m, 70, 0);
        assert_eq!(plan.denied, vec![1]);
        assert_eq!(plan.commands.len(), 1);
        assert_eq!(plan.commands[0].direction, Direction::Offload);
    }

    #[test]
    fn cpu_exhaustion_is_reported() {
        let mut m = MemoryState::new(100, 10, 1.0).unwrap();
        m.set_gpu_bytes(1, 80).unwrap();
        let plan = plan_swaps(
            &[cand(2, 0.0, Residency::None, 80), cand(1, 5.0, Residency::Gpu, 80)],
            &m,
            0,
            0,
        );
        assert!(plan.cpu_exhausted);
        assert!(plan.commands.is_empty());
    }

    #[test]
    fn ewt_from_queues() {
        let c = CostCoefficients::new(0.1, 0.0, 10.0).unwrap();
        let mut q = PriorityQueueSet::new(SchedulerConfig::default(), c).unwrap();
        let r = |id, n| Request {
            id,
            arrival_us: 0,
            input_len: 10,
            output_len: n,
            prompt_tokens: None,
        };
        q.admit(Job::new(r(1, 5), 5, 2048), 0).unwrap();
        q.admit(Job::new(r(2, 6), 6, 2048), 0).unwrap();
        q.admit(Job::new(r(3, 7), 7, 2048), 0).unwrap();
        let e = ewt_all(&q, 0);
        assert_eq!(e[0], (1, 0.0));
        assert!((e[1].1 - 51.0).abs() < 1e-9);
        assert!((e[2].1 - 112.0).abs() < 1e-9);
        assert_eq!(ewt(&q, 2, 0), Some(e[1].1));
    }
}
