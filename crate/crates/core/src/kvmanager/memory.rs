//! Two-tier KV memory ledger with serialized PCIe transfers.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::Residency;
use crate::error::{Error, Result};
use crate::workload::{Micros, RequestId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Offload,
    Upload,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferCommand {
    pub job: RequestId,
    pub direction: Direction,
    /// Bytes moved over the link (the compressed size).
    pub bytes: u64,
    pub start_us: Micros,
    pub completion_us: Micros,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KvEntry {
    pub residency: Residency,
    pub gpu_bytes: u64,
    pub cpu_bytes: u64,
}

#[derive(Debug, Clone)]
pub struct MemoryState {
    gpu_capacity: u64,
    cpu_capacity: u64,
    gpu_used: u64,
    cpu_used: u64,
    gpu_high_water: u64,
    bandwidth_bytes_per_ms: f64,
    /// Next free time of the offload and upload channels.
    channel_free_us: [Micros; 2],
    entries: BTreeMap<RequestId, KvEntry>,
    in_flight: BTreeMap<RequestId, TransferCommand>,
}

fn lane(d: Direction) -> usize {
    match d {
        Direction::Offload => 0,
        Direction::Upload => 1,
    }
}

impl MemoryState {
    pub fn new(gpu_capacity: u64, cpu_capacity: u64, bandwidth_bytes_per_ms: f64) -> Result<Self> {
        if !(bandwidth_bytes_per_ms > 0.0 && bandwidth_bytes_per_ms.is_finite()) {
            return Err(Error::InvalidParameter("bandwidth must be > 0".into()));
        }
        Ok(MemoryState {
            gpu_capacity,
            cpu_capacity,
            gpu_used: 0,
            cpu_used: 0,
            gpu_high_water: 0,
            bandwidth_bytes_per_ms,
            channel_free_us: [0, 0],
            entries: BTreeMap::new(),
            in_flight: BTreeMap::new(),
        })
    }

    pub fn gpu_capacity(&self) -> u64 {
        self.gpu_capacity
    }

    pub fn cpu_capacity(&self) -> u64 {
        self.cpu_capacity
    }

    pub fn gpu_used(&self) -> u64 {
        self.gpu_used
    }

    pub fn cpu_used(&self) -> u64 {
        self.cpu_used
    }

    pub fn gpu_free(&self) -> u64 {
        self.gpu_capacity.saturating_sub(self.gpu_used)
    }

    pub fn cpu_free(&self) -> u64 {
        self.cpu_capacity.saturating_sub(self.cpu_used)
    }

    pub fn gpu_high_water(&self) -> u64 {
        self.gpu_high_water
    }

    pub fn entry(&self, job: RequestId) -> Option<&KvEntry> {
        self.entries.get(&job)
    }

    pub fn residency(&self, job: RequestId) -> Residency {
        self.entries.get(&job).map_or(Residency::None, |e| e.residency)
    }

    pub fn gpu_bytes(&self, job: RequestId) -> u64 {
        self.entries.get(&job).map_or(0, |e| e.gpu_bytes)
    }

    pub fn in_flight(&self) -> impl Iterator<Item = &TransferCommand> {
        self.in_flight.values()
    }

    pub fn has_in_flight(&self) -> bool {
        !self.in_flight.is_empty()
    }

    /// GPU bytes held by jobs with a transfer in progress.
    pub fn in_flight_gpu_bytes(&self) -> u64 {
        self.in_flight.keys().map(|id| self.gpu_bytes(*id)).sum()
    }

    pub fn transfer_duration_us(&self, bytes: u64) -> Micros {
        (bytes as f64 / self.bandwidth_bytes_per_ms * 1000.0).ceil() as Micros
    }

    /// Start and completion a transfer issued now would get.
    pub fn schedule(&self, direction: Direction, bytes: u64, now: Micros) -> (Micros, Micros) {
        let start = now.max(self.channel_free_us[lane(direction)]);
        (start, start + self.transfer_duration_us(bytes))
    }

    /// Sets a job's GPU-resident footprint, allocating a cache for a job
    /// that had none.
    pub fn set_gpu_bytes(&mut self, job: RequestId, bytes: u64) -> Result<()> {
        let entry = self.entries.entry(job).or_insert(KvEntry {
            residency: Residency::None,
            gpu_bytes: 0,
            cpu_bytes: 0,
        });
        if !matches!(entry.residency, Residency::None | Residency::Gpu) {
            return Err(Error::InvalidParameter(format!(
                "job {job} is {:?}, cannot resize on GPU",
                entry.residency
            )));
        }
        let new_used = self.gpu_used - entry.gpu_bytes + bytes;
        if new_used > self.gpu_capacity {
            return Err(Error::InvalidParameter(format!(
                "GPU allocation for job {job} exceeds capacity ({new_used} > {})",
                self.gpu_capacity
            )));
        }
        self.gpu_used = new_used;
        entry.gpu_bytes = bytes;
        entry.residency = Residency::Gpu;
        self.gpu_high_water = self.gpu_high_water.max(self.gpu_used);
        Ok(())
    }

    /// Frees everything a finished job holds.
    pub fn release(&mut self, job: RequestId) {
        if let Some(e) = self.entries.remove(&job) {
            self.gpu_used -= e.gpu_bytes;
            self.cpu_used -= e.cpu_bytes;
        }
        self.in_flight.remove(&job);
    }

    /// Deletes a GPU-resident cache so the job must recompute it.
    pub fn drop_gpu(&mut self, job: RequestId) -> Result<u64> {
        match self.entries.get(&job) {
            Some(e) if e.residency == Residency::Gpu => {
                let freed = e.gpu_bytes;
                self.release(job);
                Ok(freed)
            }
            _ => Err(Error::InvalidParameter(format!("job {job} has no GPU cache to drop"))),
        }
    }

    /// Applies a planned transfer. Offloads reserve CPU space immediately
    /// and free GPU space on completion; uploads do the reverse.
    pub fn begin(&mut self, cmd: TransferCommand, gpu_bytes_after_upload: u64) -> Result<()> {
        let entry = self
            .entries
            .get_mut(&cmd.job)
            .ok_or_else(|| Error::InvalidParameter(format!("job {} has no cache", cmd.job)))?;
        match cmd.direction {
            Direction::Offload => {
                if entry.residency != Residency::Gpu {
                    return Err(Error::InvalidParameter(format!("job {} not on GPU", cmd.job)));
                }
                if self.cpu_used + cmd.bytes > self.cpu_capacity {
                    return Err(Error::InvalidParameter("CPU memory exhausted".into()));
                }
                self.cpu_used += cmd.bytes;
                entry.cpu_bytes = cmd.bytes;
                entry.residency = Residency::Offloading;
            }
            Direction::Upload => {
                if entry.residency != Residency::Cpu {
                    return Err(Error::InvalidParameter(format!("job {} not on CPU", cmd.job)));
                }
                if self.gpu_used + gpu_bytes_after_upload > self.gpu_capacity {
                    return Err(Error::InvalidParameter("GPU memory exhausted".into()));
                }
                self.gpu_used += gpu_bytes_after_upload;
                entry.gpu_bytes = gpu_bytes_after_upload;
                entry.residency = Residency::Uploading;
                self.gpu_high_water = self.gpu_high_water.max(self.gpu_used);
            }
        }
        let l = lane(cmd.direction);
        self.channel_free_us[l] = self.channel_free_us[l].max(cmd.completion_us);
        self.in_flight.insert(cmd.job, cmd);
        Ok(())
    }

    /// Finishes the in-flight transfer of `job`.
    pub fn complete(&mut self, job: RequestId) -> Result<Direction> {
        let cmd = self
            .in_flight
            .remove(&job)
            .ok_or_else(|| Error::InvalidParameter(format!("no transfer for job {job}")))?;
        let entry = self.entries.get_mut(&job).expect("in-flight job has an entry");
        match cmd.direction {
            Direction::Offload => {
                self.gpu_used -= entry.gpu_bytes;
                entry.gpu_bytes = 0;
                entry.residency = Residency::Cpu;
            }
            Direction::Upload => {
                self.cpu_used -= entry.cpu_bytes;
                entry.cpu_bytes = 0;
                entry.residency = Residency::Gpu;
            }
        }
        Ok(cmd.direction)
    }

    /// Capacity and bookkeeping consistency.
    pub fn check(&self) -> std::result::Result<(), String> {
        if self.gpu_used > self.gpu_capacity {
            return Err(format!("GPU used {} > capacity {}", self.gpu_used, self.gpu_capacity));
        }
        if self.cpu_used > self.cpu_capacity {
            return Err(format!("CPU used {} > capacity {}", self.cpu_used, self.cpu_capacity));
        }
        let g: u64 = self.entries.values().map(|e| e.gpu_bytes).sum();
        let c: u64 = self.entries.values().map(|e| e.cpu_bytes).sum();
        if g != self.gpu_used || c != self.cpu_used {
            return Err(format!(
                "ledger mismatch: gpu {g} vs {}, cpu {c} vs {}",
                self.gpu_used, self.cpu_used
            ));
        }
        Ok(())
    }
}
