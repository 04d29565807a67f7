//! Run configuration: one TOML document covering every component, with
//! dotted `key=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::costmodel::CostCoefficients;
use crate::error::{Error, Result};
use crate::kvmanager::ModelConfig;
use crate::predictor::PredictorConfig;
use crate::scheduler::SchedulerConfig;
use crate::simcore::{ExecutorParams, PolicyKind};
use crate::workload::LengthDistribution;

const GIB: f64 = (1u64 << 30) as f64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadConfig {
    /// `sharegpt` or `alpaca`.
    pub preset: String,
    /// Requests per second.
    pub rate: f64,
    pub duration_s: f64,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        WorkloadConfig {
            preset: "sharegpt".into(),
            rate: 0.1,
            duration_s: 1800.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub preset: String,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            preset: "opt-13b".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MemoryConfig {
    /// Device memory; the KV budget is what remains after the weights.
    pub gpu_memory_gib: f64,
    pub cpu_memory_gib: f64,
    pub pcie_gb_per_s: f64,
    /// Bits per value of offloaded caches.
    pub quant_bits: u32,
    /// Allocation granularity of the paged FCFS baseline.
    pub block_tokens: u32,
    /// Batch cap of the FCFS baselines, whose batch is otherwise bounded by
    /// memory.
    pub fcfs_max_batch: usize,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        MemoryConfig {
            gpu_memory_gib: 32.0,
            cpu_memory_gib: 256.0,
            pcie_gb_per_s: 25.0,
            quant_bits: 8,
            block_tokens: 16,
            fcfs_max_batch: 1024,
        }
    }
}

impl MemoryConfig {
    pub fn kv_capacity_bytes(&self, model: &ModelConfig) -> Result<u64> {
        let total = (self.gpu_memory_gib * GIB) as u64;
        total
            .checked_sub(model.param_bytes)
            .filter(|b| *b > 0)
            .ok_or_else(|| {
                Error::Config(format!(
                    "{} GiB of GPU memory does not hold the {} weights",
                    self.gpu_memory_gib, model.name
                ))
            })
    }

    pub fn cpu_capacity_bytes(&self) -> u64 {
        (self.cpu_memory_gib * GIB) as u64
    }

    /// Link bandwidth in bytes per millisecond.
    pub fn bandwidth_bytes_per_ms(&self) -> f64 {
        self.pcie_gb_per_s * 1e9 / 1e3
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostModelMode {
    /// Profile the executor and fit.
    Calibrate,
    /// Use the configured coefficients.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostModelConfig {
    pub mode: CostModelMode,
    #[serde(rename = "T0")]
    pub t0: f64,
    pub alpha: f64,
    pub beta: f64,
    pub grid: Vec<u32>,
    pub reps: usize,
}

impl Default for CostModelConfig {
    fn default() -> Self {
        let p = ExecutorParams::default();
        CostModelConfig {
            mode: CostModelMode::Calibrate,
            t0: p.t0,
            alpha: p.alpha,
            beta: p.beta,
            grid: vec![16, 32, 64, 128, 256, 512, 1024, 2048],
            reps: 4,
        }
    }
}

impl CostModelConfig {
    pub fn fixed(&self) -> Result<CostCoefficients<f64>> {
        CostCoefficients::new(self.t0, self.alpha, self.beta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WarmupConfig {
    /// Requests in the corpus that trains the regressor and seeds the
    /// database before a run.
    pub corpus_size: usize,
    /// Write completed requests back to the database.
    pub online_update: bool,
}

impl Default for WarmupConfig {
    fn default() -> Self {
        WarmupConfig {
            corpus_size: 512,
            online_update: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Simulated-time budget; the run stops and is marked truncated after it.
    pub max_sim_time_s: f64,
    /// Livelock window: no completion for this long aborts the run.
    pub watchdog_window_s: f64,
    /// A policy's knee is the first rate whose normalized latency exceeds
    /// this multiple of the unloaded baseline.
    pub knee_multiple: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            max_sim_time_s: 7.0 * 86400.0,
            watchdog_window_s: 3600.0,
            knee_multiple: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub policy: PolicyKind,
    pub workload: WorkloadConfig,
    pub model: ModelSection,
    pub memory: MemoryConfig,
    pub executor: ExecutorParams,
    pub costmodel: CostModelConfig,
    pub scheduler: SchedulerConfig,
    pub predictor: PredictorConfig,
    pub warmup: WarmupConfig,
    pub sim: SimConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            policy: PolicyKind::Speculative,
            workload: WorkloadConfig::default(),
            model: ModelSection::default(),
            memory: MemoryConfig::default(),
            executor: ExecutorParams::default(),
            costmodel: CostModelConfig::default(),
            scheduler: SchedulerConfig::default(),
            predictor: PredictorConfig::default(),
            warmup: WarmupConfig::default(),
            sim: SimConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        ModelConfig::preset(&self.model.preset)
    }

    pub fn length_distribution(&self) -> Result<LengthDistribution> {
        LengthDistribution::preset(&self.workload.preset)
    }

    pub fn validate(&self) -> Result<()> {
        let model = self.model_config()?;
        model.validate()?;
        self.memory.kv_capacity_bytes(&model)?;
        self.length_distribution()?.validate()?;
        self.executor.validate()?;
        self.scheduler.validate()?;
        self.predictor.validate()?;
        if self.costmodel.mode == CostModelMode::Fixed {
            self.costmodel.fixed()?;
        }
        let m = &self.memory;
        if !(m.pcie_gb_per_s > 0.0) || !(m.cpu_memory_gib >= 0.0) {
            return Err(Error::Config("memory bandwidth must be > 0, CPU memory >= 0".into()));
        }
        if m.quant_bits != 4 && m.quant_bits != 8 {
            return Err(Error::Config("quant_bits must be 4 or 8".into()));
        }
        if m.block_tokens == 0 || m.fcfs_max_batch == 0 {
            return Err(Error::Config("block_tokens and fcfs_max_batch must be >= 1".into()));
        }
        let s = &self.sim;
        if !(s.max_sim_time_s > 0.0 && s.watchdog_window_s > 0.0 && s.knee_multiple > 1.0) {
            return Err(Error::Config(
                "sim budget and watchdog window must be > 0, knee_multiple > 1".into(),
            ));
        }
        if !(self.workload.rate >= 0.0 && self.workload.duration_s > 0.0) {
            return Err(Error::Config("workload rate must be >= 0 and duration > 0".into()));
        }
        Ok(())
    }

    /// Applies `section.key=value` overrides. Keys must already exist; values
    /// are parsed as TOML and fall back to a bare string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut doc: toml::Table = toml::from_str(&self.to_toml()?)
            .map_err(|e| Error::Config(e.to_string()))?;
        for item in overrides {
            let item = item.as_ref();
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override '{item}' is not key=value")))?;
            let path: Vec<&str> = key.trim().split('.').collect();
            let value = parse_value(raw.trim());
            let (last, parents) = path.split_last().expect("split yields one part");
            let mut table = &mut doc;
            for p in parents {
                table = match table.get_mut(*p) {
                    Some(toml::Value::Table(t)) => t,
                    _ => return Err(Error::Config(format!("unknown config key '{key}'"))),
                };
            }
            match table.get_mut(*last) {
                Some(slot) if !slot.is_table() => *slot = value,
                _ => return Err(Error::Config(format!("unknown config key '{key}'"))),
            }
        }
        let text = toml::to_string(&doc).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_toml(&text)
    }

    /// SHA-256 of the canonical TOML form.
    pub fn digest(&self) -> Result<String> {
        Ok(hex_sha256(self.to_toml()?.as_bytes()))
    }

    /// Digest of the parts that define the serving environment: model,
    /// memory, executor and workload family. Runs that differ only in policy,
    /// rate or seed share it.
    pub fn env_digest(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Env<'a> {
            preset: &'a str,
            model: &'a ModelSection,
            memory: &'a MemoryConfig,
            executor: &'a ExecutorParams,
        }
        let env = Env {
            preset: &self.workload.preset,
            model: &self.model,
            memory: &self.memory,
            executor: &self.executor,
        };
        let text = toml::to_string(&env).map_err(|e| Error::Config(e.to_string()))?;
        Ok(hex_sha256(text.as_bytes()))
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn hex_sha256(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let back = RunConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn empty_document_is_default() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn overrides_apply_and_validate() {
        let c = RunConfig::default()
            .with_overrides(&["scheduler.aging_ms=inf", "policy=fcfs_vllm", "workload.rate=0.5"])
            .unwrap();
        assert!(c.scheduler.aging_ms.is_infinite());
        assert_eq!(c.policy, PolicyKind::FcfsVllm);
        assert_eq!(c.workload.rate, 0.5);
        assert!(c.with_overrides(&["scheduler.nope=1"]).is_err());
        assert!(c.with_overrides(&["scheduler=1"]).is_err());
        assert!(c.with_overrides(&["policy=alien"]).is_err());
        assert!(c.with_overrides(&["scheduler.levels=0"]).is_err());
        assert!(c.with_overrides(&["noequals"]).is_err());
    }

    #[test]
    fn unknown_fields_rejected() {
        assert!(RunConfig::from_toml("[scheduler]\nlevelz = 3\n").is_err());
    }

    #[test]
    fn digests() {
        let a = RunConfig::default();
        let b = a.with_overrides(&["policy=oracle", "seed=9"]).unwrap();
        assert_ne!(a.digest().unwrap(), b.digest().unwrap());
        assert_eq!(a.env_digest().unwrap(), b.env_digest().unwrap());
        assert_eq!(a.digest().unwrap().len(), 64);
        let c = a.with_overrides(&["memory.gpu_memory_gib=80"]).unwrap();
        assert_ne!(a.env_digest().unwrap(), c.env_digest().unwrap());
    }

    #[test]
    fn kv_capacity_excludes_weights() {
        let c = RunConfig::default();
        let m = c.model_config().unwrap();
        assert_eq!(c.memory.kv_capacity_bytes(&m).unwrap(), 8u64 << 30);
        assert!(c.with_overrides(&["memory.gpu_memory_gib=20"]).is_err());
    }
}
