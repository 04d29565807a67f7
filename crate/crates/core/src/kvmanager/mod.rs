//! KV-cache accounting across GPU and CPU tiers, wait-time driven swap
//! planning, and channel-wise integer compression of offloaded caches.

mod memory;
mod quant;
mod swap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use memory::{Direction, KvEntry, MemoryState, TransferCommand};
pub use quant::{dequantize, quantize, QuantizedTensor};
pub use swap::{estimated_wait, ewt, ewt_all, plan_swaps, SwapCandidate, SwapPlan};

/// Bytes of one scale plus one zero-point, stored per channel.
pub const CHANNEL_PARAM_BYTES: u64 = 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    pub num_heads: u32,
    pub num_layers: u32,
    pub hidden_size: u32,
    /// 2 for FP16 caches.
    pub bytes_per_value: u32,
    pub param_bytes: u64,
}

impl ModelConfig {
    fn preset_row(name: &str, heads: u32, layers: u32, hidden: u32, gib: u64) -> Self {
        ModelConfig {
            name: name.into(),
            num_heads: heads,
            num_layers: layers,
            hidden_size: hidden,
            bytes_per_value: 2,
            param_bytes: gib << 30,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        Ok(match name {
            "opt-2.7b" => Self::preset_row(name, 32, 32, 2560, 5),
            "opt-6.7b" => Self::preset_row(name, 40, 40, 5120, 13),
            "opt-13b" => Self::preset_row(name, 40, 40, 5120, 24),
            "llama-7b" => Self::preset_row(name, 32, 32, 4096, 13),
            "llama-13b" => Self::preset_row(name, 40, 40, 5120, 26),
            "pythia-12b" => Self::preset_row(name, 40, 36, 5120, 24),
            other => return Err(Error::InvalidParameter(format!("unknown model '{other}'"))),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let positive = self.num_heads > 0
            && self.num_layers > 0
            && self.hidden_size > 0
            && self.bytes_per_value > 0;
        if !positive || self.hidden_size % self.num_heads != 0 {
            return Err(Error::InvalidParameter(format!(
                "model '{}' needs positive shape with hidden divisible by heads",
                self.name
            )));
        }
        Ok(())
    }

    /// K and V values per token across all layers.
    pub fn values_per_token(&self) -> u64 {
        2 * self.num_layers as u64 * self.hidden_size as u64
    }
}

/// KV footprint of `tokens` tokens at `bytes_per_value` bytes each.
pub fn kv_bytes(model: &ModelConfig, tokens: u64, bytes_per_value: u32) -> u64 {
    model.values_per_token() * bytes_per_value as u64 * tokens
}

/// Footprint of a `bits`-bit quantized cache.
///
/// Each of the `2 * layers * hidden` channels (one per layer, K or V, and
/// hidden column) runs along the token axis and carries one 4-byte scale and
/// one 4-byte zero-point. Codes take `ceil(bits / 8)` bytes each.
pub fn quantized_kv_bytes(model: &ModelConfig, tokens: u64, bits: u32) -> u64 {
    if tokens == 0 {
        return 0;
    }
    let channels = model.values_per_token();
    bits.div_ceil(8) as u64 * channels * tokens + channels * CHANNEL_PARAM_BYTES
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Residency {
    /// No cache: not yet prefilled, or dropped for recomputation.
    None,
    Gpu,
    Cpu,
    Uploading,
    Offloading,
}

impl Residency {
    pub fn in_flight(self) -> bool {
        matches!(self, Residency::Uploading | Residency::Offloading)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn opt13b_single_token_fp16() {
        let m = ModelConfig::preset("opt-13b").unwrap();
        assert_eq!(kv_bytes(&m, 1, 2), 819_200);
        assert_eq!(kv_bytes(&m, 0, 2), 0);
    }

    #[test]
    fn int8_is_half_of_fp16() {
        let m = ModelConfig::preset("opt-2.7b").unwrap();
        for t in [1u64, 7, 128, 2048] {
            assert_eq!(2 * kv_bytes(&m, t, 1), kv_bytes(&m, t, 2));
        }
    }

    #[test]
    fn quantized_footprint_opt13b() {
        let m = ModelConfig::preset("opt-13b").unwrap();
        let payload = 2 * 40 * 5120 * 128u64;
        assert_eq!(payload, 52_428_800);
        assert_eq!(quantized_kv_bytes(&m, 128, 8), payload + 3_276_800);
        assert_eq!(quantized_kv_bytes(&m, 0, 8), 0);
        // 8-bit payload is exactly half of FP16
        assert_eq!(
            quantized_kv_bytes(&m, 128, 8) - 2 * 40 * 5120 * CHANNEL_PARAM_BYTES,
            kv_bytes(&m, 128, 2) / 2
        );
    }

    #[test]
    fn presets_are_valid() {
        for name in ["opt-2.7b", "opt-6.7b", "opt-13b", "llama-7b", "llama-13b", "pythia-12b"] {
            ModelConfig::preset(name).unwrap().validate().unwrap();
        }
        assert!(ModelConfig::preset("gpt-9").is_err());
        let mut m = ModelConfig::preset("opt-13b").unwrap();
        m.num_heads = 3;
        assert!(m.validate().is_err());
    }
}
