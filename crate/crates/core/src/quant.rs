//! Uniform linear quantization.
//!
//! Weights are symmetric, signed, zero-point 0, with one scale per output channel.
//! Activations are unsigned, zero-point 0, with one trainable clipping bound per
//! tensor. Rounding is half-away-from-zero everywhere so the integer kernels and the
//! fake-quantized float path produce identical codes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::Precision;

/// Smallest clipping bound handed out by calibration and kept during training.
pub const MIN_CLIP: f64 = 1e-3;

/// Round half away from zero.
#[inline]
pub fn round_half_away(x: f64) -> f64 {
    x.round()
}

/// Largest positive signed code, `2^(bits-1) - 1`.
#[inline]
pub fn signed_max(bits: u32) -> i32 {
    (1i32 << (bits - 1)) - 1
}

#[inline]
pub fn signed_min(bits: u32) -> i32 {
    -(1i32 << (bits - 1))
}

/// Largest unsigned code, `2^bits - 1`.
#[inline]
pub fn unsigned_max(bits: u32) -> u32 {
    ((1u64 << bits) - 1) as u32
}

fn check_bits(bits: u32) -> Result<()> {
    if (2..=30).contains(&bits) {
        Ok(())
    } else {
        Err(Error::InvalidBits(bits))
    }
}

fn quantized_bits(p: Precision) -> Result<u32> {
    if p.is_quantized() {
        Ok(p.bits())
    } else {
        Err(Error::InvalidBits(p.bits()))
    }
}

/// Per-channel weight scale, stored as `f32` so that exported models reproduce it exactly.
/// All-zero (or vanishing) channels get scale 1.
pub fn weight_scale(max_abs: f64, bits: u32) -> f32 {
    let s = (max_abs / signed_max(bits) as f64) as f32;
    if s.is_normal() && s > 0.0 {
        s
    } else {
        1.0
    }
}

#[inline]
pub fn weight_code(w: f64, scale: f32, bits: u32) -> i32 {
    let q = round_half_away(w / scale as f64);
    q.clamp(signed_min(bits) as f64, signed_max(bits) as f64) as i32
}

/// Per-channel codes and scales of a weight tensor whose first axis is the output channel.
pub fn quantize_channels(w: &[f64], channels: usize, bits: u32) -> Result<(Vec<i32>, Vec<f32>)> {
    check_bits(bits)?;
    if channels == 0 || w.len() % channels != 0 {
        return Err(Error::Config(format!(
            "weight tensor of {} values cannot be split into {channels} channels",
            w.len()
        )));
    }
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("weight tensor"));
    }
    let per = w.len() / channels;
    let mut codes = Vec::with_capacity(w.len());
    let mut scales = Vec::with_capacity(channels);
    for ch in w.chunks(per) {
        let max_abs = ch.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let s = weight_scale(max_abs, bits);
        scales.push(s);
        codes.extend(ch.iter().map(|&v| weight_code(v, s, bits)));
    }
    Ok((codes, scales))
}

/// Bit-packed integer tensor with per-output-channel scales.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub bits: Precision,
    pub packed: Vec<u8>,
    pub shape: Vec<usize>,
    pub scales: Vec<f32>,
    pub signed: bool,
}

impl QuantizedTensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn channels(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn codes(&self) -> Vec<i32> {
        unpack_subbyte(&self.packed, self.bits.bits(), self.numel(), self.signed)
    }

    /// Check the structural invariants (payload length, positive finite scales).
    pub fn validate(&self) -> Result<()> {
        let bits = quantized_bits(self.bits)?;
        let expect = (self.numel() * bits as usize).div_ceil(8);
        if self.packed.len() != expect {
            return Err(Error::Format(format!(
                "packed payload has {} bytes, expected {expect}",
                self.packed.len()
            )));
        }
        if self.scales.len() != self.channels() {
            return Err(Error::Format(format!(
                "{} scales for {} channels",
                self.scales.len(),
                self.channels()
            )));
        }
        if self.scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Format("scales must be positive and finite".into()));
        }
        Ok(())
    }
}

/// Symmetric per-channel quantization; `shape[0]` is the output channel axis.
pub fn quantize_weights_pc(w: &[f64], shape: &[usize], bits: Precision) -> Result<QuantizedTensor> {
    let b = quantized_bits(bits)?;
    if shape.iter().product::<usize>() != w.len() {
        return Err(Error::Config(format!(
            "shape {shape:?} does not match {} values",
            w.len()
        )));
    }
    let (codes, scales) = quantize_channels(w, shape[0], b)?;
    Ok(QuantizedTensor {
        bits,
        packed: pack_subbyte(&codes, b, true)?,
        shape: shape.to_vec(),
        scales,
        signed: true,
    })
}

pub fn dequantize(q: &QuantizedTensor) -> Vec<f64> {
    let codes = q.codes();
    let per = (q.numel() / q.channels().max(1)).max(1);
    codes
        .iter()
        .enumerate()
        .map(|(i, &c)| c as f64 * q.scales[i / per] as f64)
        .collect()
}

/// Bias in accumulator units, `round(b / (s_in · s_w))`.
#[inline]
pub fn bias_code(b: f64, s_in: f64, s_w: f64) -> f64 {
    round_half_away(b / (s_in * s_w))
}

/// Learnable clipping range of an unsigned activation tensor, `[0, clip_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActRange {
    pub tensor_id: u32,
    pub clip_max: f64,
}

impl ActRange {
    pub fn new(tensor_id: u32, clip_max: f64) -> Result<Self> {
        if !(clip_max.is_finite() && clip_max > 0.0) {
            return Err(Error::Config(format!(
                "clip_max of tensor {tensor_id} must be positive and finite, got {clip_max}"
            )));
        }
        Ok(ActRange {
            tensor_id,
            clip_max,
        })
    }

    pub fn scale(&self, bits: u32) -> f64 {
        act_scale(self.clip_max, bits)
    }
}

#[inline]
pub fn act_scale(clip_max: f64, bits: u32) -> f64 {
    clip_max / unsigned_max(bits) as f64
}

/// Activation code `round(clamp(x, 0, clip) / s)`.
#[inline]
pub fn act_code(x: f64, clip_max: f64, bits: u32) -> u32 {
    let s = act_scale(clip_max, bits);
    let q = round_half_away(x.clamp(0.0, clip_max) / s);
    (q as u32).min(unsigned_max(bits))
}

/// Real value represented by an activation code; the top level maps to `clip_max` exactly.
#[inline]
pub fn act_value(code: u32, clip_max: f64, bits: u32) -> f64 {
    if code >= unsigned_max(bits) {
        clip_max
    } else {
        code as f64 * act_scale(clip_max, bits)
    }
}

/// Fake-quantize with an arbitrary bitwidth in `2..=30`.
pub fn fake_quant_act_bits(x: &[f64], clip_max: f64, bits: u32) -> Result<Vec<f64>> {
    check_bits(bits)?;
    if !(clip_max.is_finite() && clip_max > 0.0) {
        return Err(Error::Config(format!(
            "clip_max must be positive, got {clip_max}"
        )));
    }
    Ok(x.iter()
        .map(|&v| act_value(act_code(v, clip_max, bits), clip_max, bits))
        .collect())
}

/// PACT-style activation fake quantization.
pub fn fake_quant_act(x: &[f64], r: &ActRange, bits: Precision) -> Result<Vec<f64>> {
    fake_quant_act_bits(x, r.clip_max, quantized_bits(bits)?)
}

/// Straight-through backward of [`fake_quant_act`]: the input gradient passes inside
/// `[0, clip_max)`, the clip gradient collects every element at or above `clip_max`.
pub fn fake_quant_act_backward(x: &[f64], dy: &[f64], clip_max: f64) -> (Vec<f64>, f64) {
    let mut dclip = 0.0;
    let dx = x
        .iter()
        .zip(dy)
        .map(|(&v, &g)| {
            if v >= clip_max {
                dclip += g;
                0.0
            } else if v < 0.0 {
                0.0
            } else {
                g
            }
        })
        .collect();
    (dx, dclip)
}

fn field_range(bits: u32, signed: bool) -> (i32, i32) {
    if signed {
        (signed_min(bits), signed_max(bits))
    } else {
        (0, unsigned_max(bits) as i32)
    }
}

/// Pack integers into `bits`-wide fields, lowest index in the least significant bits.
/// Signed values are stored two's-complement within their field.
pub fn pack_subbyte(values: &[i32], bits: u32, signed: bool) -> Result<Vec<u8>> {
    if !matches!(bits, 2 | 4 | 8) {
        return Err(Error::InvalidBits(bits));
    }
    let (lo, hi) = field_range(bits, signed);
    let per_byte = 8 / bits as usize;
    let mask = ((1u16 << bits) - 1) as u8;
    let mut out = vec![0u8; (values.len() * bits as usize).div_ceil(8)];
    for (i, &v) in values.iter().enumerate() {
        if v < lo || v > hi {
            return Err(Error::OutOfRange {
                value: v,
                bits,
                kind: if signed { "signed" } else { "unsigned" },
            });
        }
        let field = (v as u8) & mask;
        out[i / per_byte] |= field << ((i % per_byte) * bits as usize);
    }
    Ok(out)
}

pub fn unpack_subbyte(bytes: &[u8], bits: u32, n: usize, signed: bool) -> Vec<i32> {
    let per_byte = 8 / bits as usize;
    let mask = ((1u16 << bits) - 1) as u8;
    (0..n)
        .map(|i| {
            let field = (bytes[i / per_byte] >> ((i % per_byte) * bits as usize)) & mask;
            if signed && field >> (bits - 1) == 1 {
                field as i32 - (1i32 << bits)
            } else {
                field as i32
            }
        })
        .collect()
}

/// Fixed-point rescale `M ≈ multiplier · 2^-shift` with `multiplier ∈ [2^30, 2^31)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequantParams {
    pub multiplier: i32,
    pub shift: u32,
    pub out_zero: i32,
}

const MAX_SHIFT: i32 = 126;

impl RequantParams {
    /// Decompose a positive real multiplier (round-to-nearest on the mantissa).
    pub fn from_real(m: f64) -> Result<Self> {
        if !(m.is_finite() && m > 0.0) {
            return Err(Error::DegenerateScale(format!(
                "requant multiplier {m} must be positive and finite"
            )));
        }
        let (frac, mut exp) = frexp(m);
        let mut mant = round_half_away(frac * (1u64 << 31) as f64) as i64;
        if mant == 1i64 << 31 {
            mant = 1 << 30;
            exp += 1;
        }
        let shift = 31 - exp;
        if shift < 0 {
            return Err(Error::DegenerateScale(format!(
                "requant multiplier {m} needs a negative shift"
            )));
        }
        if shift > MAX_SHIFT {
            return Err(Error::DegenerateScale(format!(
                "requant multiplier {m} is too small to represent"
            )));
        }
        Ok(RequantParams {
            multiplier: mant as i32,
            shift: shift as u32,
            out_zero: 0,
        })
    }

    pub fn real(&self) -> f64 {
        self.multiplier as f64 * (-(self.shift as f64)).exp2()
    }

    /// `round_half_away(acc · multiplier / 2^shift) + out_zero`, before saturation.
    #[inline]
    pub fn apply(&self, acc: i64) -> i64 {
        let v = acc as i128 * self.multiplier as i128;
        let r = if self.shift == 0 {
            v
        } else {
            let half = 1i128 << (self.shift - 1);
            if v >= 0 {
                (v + half) >> self.shift
            } else {
                -((-v + half) >> self.shift)
            }
        };
        r as i64 + self.out_zero as i64
    }

    /// Requantize and saturate into `[lo, hi]`.
    #[inline]
    pub fn requantize(&self, acc: i64, lo: i64, hi: i64) -> i64 {
        self.apply(acc).clamp(lo, hi)
    }
}

/// `x = frac · 2^exp` with `frac ∈ [0.5, 1)` for positive normal `x`.
fn frexp(x: f64) -> (f64, i32) {
    let bits = x.to_bits();
    let biased = ((bits >> 52) & 0x7ff) as i32;
    if biased == 0 {
        // subnormal: scale up first
        let (f, e) = frexp(x * (1u64 << 54) as f64);
        return (f, e - 54);
    }
    let exp = biased - 1022;
    let frac = f64::from_bits((bits & !(0x7ffu64 << 52)) | (1022u64 << 52));
    (frac, exp)
}

/// Per-channel requantization for `acc · s_in · s_w[c] / s_out`.
pub fn compute_requant(s_in: f64, s_w: &[f64], s_out: f64) -> Result<Vec<RequantParams>> {
    if !(s_in > 0.0 && s_out > 0.0) || s_w.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::DegenerateScale(
            "scales must be strictly positive".into(),
        ));
    }
    s_w.iter()
        .map(|&sw| RequantParams::from_real(s_in * sw / s_out))
        .collect()
}

/// Nearest-rank percentile (`p` in `[0, 1]`) of an unsorted sample.
pub fn percentile(values: &mut [f64], p: f64) -> f64 {
    assert!(!values.is_empty());
    let n = values.len();
    let rank = ((p * n as f64).ceil() as usize).clamp(1, n) - 1;
    let (_, v, _) = values.select_nth_unstable_by(rank, |a, b| a.total_cmp(b));
    *v
}

/// Initial clipping bounds: the 99.9th percentile of each activation tensor over a float
/// forward pass of the calibration images, floored at [`MIN_CLIP`].
pub fn calibrate_act_ranges(
    g: &crate::graph::NetworkGraph,
    model: &crate::nn::FloatModel,
    sample: &crate::data::Dataset,
) -> Result<std::collections::BTreeMap<u32, ActRange>> {
    use crate::nn::{FakeQuant, Plan};
    if sample.is_empty() {
        return Err(Error::EmptyDataset("calibration set"));
    }
    let plan = Plan::new(g, model, &FakeQuant::none())?;
    let ids = plan.step_ids();
    let tensors = g.activation_tensors();
    let mut seen: std::collections::BTreeMap<u32, Vec<f64>> =
        tensors.iter().map(|&t| (t, Vec::new())).collect();
    for i in 0..sample.len() {
        crate::nn::check_image(g, sample.image(i))?;
        let trace = plan.forward(sample.image(i));
        for (pos, id) in ids.iter().enumerate() {
            if let Some(v) = seen.get_mut(id) {
                v.extend_from_slice(&trace.out[pos]);
            }
        }
    }
    seen.into_iter()
        .map(|(t, mut v)| {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("calibration activations"));
            }
            let clip = percentile(&mut v, 0.999).max(MIN_CLIP);
            Ok((
                t,
                ActRange {
                    tensor_id: t,
                    clip_max: clip,
                },
            ))
        })
        .collect()
}
