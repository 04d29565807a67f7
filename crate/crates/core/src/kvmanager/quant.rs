//! Channel-wise asymmetric b-bit quantization.
//!
//! Per channel: `lambda = (max - min) / (2^b - 1)`, `z = round(-min / lambda)`,
//! `q = clamp(round(x / lambda + z), 0, 2^b - 1)`, and `x ~ lambda * (q - z)`.
//! The zero-point is kept unclamped (as an `i32`) so channels that do not
//! straddle zero still map `min -> 0` and `max -> 2^b - 1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedTensor<T> {
    pub bits: u32,
    pub channels: usize,
    /// Values per channel.
    pub len: usize,
    /// Channel-major codes, one byte each.
    pub codes: Vec<u8>,
    pub scales: Vec<T>,
    pub zero_points: Vec<i32>,
}

impl<T> QuantizedTensor<T> {
    pub fn channel_codes(&self, c: usize) -> &[u8] {
        &self.codes[c * self.len..(c + 1) * self.len]
    }

    /// Stored size with 4-byte scale and zero-point per channel.
    pub fn stored_bytes(&self) -> u64 {
        self.bits.div_ceil(8) as u64 * self.codes.len() as u64
            + self.channels as u64 * super::CHANNEL_PARAM_BYTES
    }
}

/// Quantizes a channel-major tensor of `channels` equal-length rows.
pub fn quantize<T: Scalar>(values: &[T], channels: usize, bits: u32) -> Result<QuantizedTensor<T>> {
    if bits != 4 && bits != 8 {
        return Err(Error::InvalidParameter(format!("bits must be 4 or 8, got {bits}")));
    }
    if values.is_empty() || channels == 0 {
        return Err(Error::Empty("tensor"));
    }
    if values.len() % channels != 0 {
        return Err(Error::InvalidParameter(format!(
            "{} values do not split into {channels} channels",
            values.len()
        )));
    }
    let len = values.len() / channels;
    let qmax = ((1u32 << bits) - 1) as i64;
    let mut out = QuantizedTensor {
        bits,
        channels,
        len,
        codes: Vec::with_capacity(values.len()),
        scales: Vec::with_capacity(channels),
        zero_points: Vec::with_capacity(channels),
    };
    for (c, row) in values.chunks(len).enumerate() {
        if let Some(i) = row.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                channel: c,
                index: i,
            });
        }
        let (lo, hi) = row
            .iter()
            .fold((row[0], row[0]), |(lo, hi), &x| (lo.min(x), hi.max(x)));
        let (scale, zero) = if hi > lo {
            let scale = (hi - lo) / T::of(qmax as f64);
            if !(scale.is_finite() && scale > T::zero()) {
                return Err(Error::InvalidParameter(format!("channel {c}: range not representable")));
            }
            (scale, (-lo / scale).round())
        } else if lo == T::zero() {
            (T::one(), T::zero())
        } else {
            // constant channel: code 1 or 0 against z = 0 or 1 gives back lo
            (lo.abs(), if lo > T::zero() { T::zero() } else { T::one() })
        };
        let zero = zero
            .to_i32()
            .ok_or_else(|| Error::InvalidParameter(format!("channel {c}: zero-point overflows")))?;
        let zf = T::of(zero as f64);
        for &x in row {
            let q = (x / scale + zf).round().to_i64().unwrap_or(0).clamp(0, qmax);
            out.codes.push(q as u8);
        }
        out.scales.push(scale);
        out.zero_points.push(zero);
    }
    Ok(out)
}

pub fn dequantize<T: Scalar>(q: &QuantizedTensor<T>) -> Vec<T> {
    let mut out = Vec::with_capacity(q.codes.len());
    for c in 0..q.channels {
        let (scale, zero) = (q.scales[c], q.zero_points[c]);
        out.extend(
            q.channel_codes(c)
                .iter()
                .map(|&code| scale * T::of((code as i64 - zero as i64) as f64)),
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn unit_interval_endpoints() {
        let q = quantize(&[0.0f64, 1.0], 1, 8).unwrap();
        assert_eq!(q.scales[0], 1.0 / 255.0);
        assert_eq!(q.zero_points[0], 0);
        assert_eq!(q.codes, vec![0, 255]);
        assert_eq!(dequantize(&q), vec![0.0, 1.0]);
    }

    #[test]
    fn constant_channels_recover_exactly() {
        for v in [0.0f64, 3.7, -2.25, 1e-30, -7e20] {
            for bits in [4, 8] {
                let q = quantize(&[v; 5], 1, bits).unwrap();
                assert_eq!(dequantize(&q), vec![v; 5], "value {v}");
            }
        }
    }

    #[test]
    fn positive_channel_spans_full_code_range() {
        let q = quantize(&[10.0f64, 12.0, 20.0], 1, 8).unwrap();
        assert_eq!(q.codes[0], 0);
        assert_eq!(q.codes[2], 255);
        assert_eq!(q.zero_points[0], -255);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(quantize::<f64>(&[], 1, 8).is_err());
        assert!(quantize(&[1.0f64], 1, 3).is_err());
        assert!(quantize(&[1.0f64, 2.0, 3.0], 2, 8).is_err());
        assert!(matches!(
            quantize(&[1.0f64, 2.0, f64::NAN, 0.0], 2, 8),
            Err(Error::NonFinite { channel: 1, index: 0 })
        ));
    }

    #[test]
    fn works_for_f32() {
        let q = quantize(&[-1.0f32, 0.5, 1.0], 1, 4).unwrap();
        let back = dequantize(&q);
        for (a, b) in [-1.0f32, 0.5, 1.0].iter().zip(&back) {
            assert!((a - b).abs() <= q.scales[0] / 2.0 + 1e-6);
        }
    }

    proptest! {
        #[test]
        fn round_trip_within_half_step(
            rows in proptest::collection::vec(proptest::collection::vec(-1e3f64..1e3, 8), 1..6),
            bits in prop_oneof![Just(4u32), Just(8u32)],
        ) {
            let flat: Vec<f64> = rows.concat();
            let q = quantize(&flat, rows.len(), bits).unwrap();
            prop_assert!(q.codes.iter().all(|&c| (c as u32) < (1 << bits)));
            let back = dequantize(&q);
            for (i, (a, b)) in flat.iter().zip(&back).enumerate() {
                let lambda = q.scales[i / 8];
                prop_assert!((a - b).abs() <= lambda / 2.0 + 1e-9, "{a} vs {b}");
            }
        }

        #[test]
        fn requantizing_is_stable(
            row in proptest::collection::vec(-50f64..50.0, 2..64),
            bits in prop_oneof![Just(4u32), Just(8u32)],
        ) {
            let once = dequantize(&quantize(&row, 1, bits).unwrap());
            let q2 = quantize(&once, 1, bits).unwrap();
            let twice = dequantize(&q2);
            prop_assert_eq!(&quantize(&row, 1, bits).unwrap().codes, &q2.codes);
            for (a, b) in once.iter().zip(&twice) {
                prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
            }
        }
    }
}
