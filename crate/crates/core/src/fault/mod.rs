//! Data-dependent single-bit faults on stored parameters.
//!
//! Bits are numbered in the attack's notation: `b0` is the most significant
//! (two's-complement sign) bit and `b7` the least significant, so `b0` is
//! machine bit 7 of the byte.

mod probe;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::engine::ops::{conv_dims, linear_dims, KERNEL, PAD};
use crate::engine::{PredictionVector, QuantModel};
use crate::error::{Error, Result};
use crate::qtensor::QTensor;

pub use probe::Prober;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    /// Forces the bit to 1 (`0 -> 1`, `1 -> 1`).
    #[serde(alias = "bitset")]
    Set,
    /// Forces the bit to 0 (`0 -> 0`, `1 -> 0`).
    #[serde(alias = "bitreset")]
    Reset,
}

impl Polarity {
    /// Bit value left untouched by the fault.
    pub fn resting_value(self) -> bool {
        matches!(self, Polarity::Set)
    }
}

impl fmt::Display for Polarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Polarity::Set => "set",
            Polarity::Reset => "reset",
        })
    }
}

impl FromStr for Polarity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "set" => Ok(Polarity::Set),
            "reset" => Ok(Polarity::Reset),
            other => Err(Error::validation(format!("unknown polarity {other:?}"))),
        }
    }
}

/// One targeted bit of one stored parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FaultSpec {
    /// Ordinal of the weighted layer (0 = first Linear/Conv2d).
    pub layer: usize,
    /// Flat row-major index into that layer's weight tensor.
    pub param: usize,
    /// 0 = MSB, 7 = LSB.
    pub bit: u8,
    pub polarity: Polarity,
}

impl FaultSpec {
    pub fn new(layer: usize, param: usize, bit: u8, polarity: Polarity) -> Self {
        Self {
            layer,
            param,
            bit,
            polarity,
        }
    }

    pub fn set(layer: usize, param: usize, bit: u8) -> Self {
        Self::new(layer, param, bit, Polarity::Set)
    }
}

impl fmt::Display for FaultSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "L{}:{}:b{}:{}",
            self.layer, self.param, self.bit, self.polarity
        )
    }
}

impl FromStr for FaultSpec {
    type Err = Error;

    /// Parses `L<layer>:<param>:b<bit>:<set|reset>`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::validation(format!("malformed fault spec {s:?}"));
        let mut parts = s.split(':');
        let layer = parts
            .next()
            .and_then(|p| p.strip_prefix('L'))
            .and_then(|p| p.parse().ok())
            .ok_or_else(bad)?;
        let param = parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
        let bit: u8 = parts
            .next()
            .and_then(|p| p.strip_prefix('b'))
            .and_then(|p| p.parse().ok())
            .ok_or_else(bad)?;
        let polarity = parts.next().ok_or_else(bad)?.parse()?;
        if parts.next().is_some() || bit > 7 {
            return Err(bad());
        }
        Ok(Self::new(layer, param, bit, polarity))
    }
}

/// Machine mask of attack bit `bit` (0 = MSB).
pub fn bit_mask(bit: u8) -> u8 {
    debug_assert!(bit < 8);
    0x80 >> bit
}

/// Value of attack bit `bit` of `byte`.
pub fn bit_of(byte: i8, bit: u8) -> bool {
    byte as u8 & bit_mask(bit) != 0
}

pub fn apply_fault(byte: i8, bit: u8, polarity: Polarity) -> i8 {
    let mask = bit_mask(bit);
    let b = byte as u8;
    (match polarity {
        Polarity::Set => b | mask,
        Polarity::Reset => b & !mask,
    }) as i8
}

pub(crate) fn check_spec(model: &QuantModel, spec: &FaultSpec) -> Result<()> {
    if spec.bit > 7 {
        return Err(Error::validation(format!("bit index {} outside [0, 7]", spec.bit)));
    }
    if spec.layer >= model.num_weighted() {
        return Err(Error::validation(format!(
            "{spec}: model has {} weighted layers",
            model.num_weighted()
        )));
    }
    let n = model.weights(spec.layer).len();
    if spec.param >= n {
        return Err(Error::validation(format!("{spec}: layer has {n} parameters")));
    }
    Ok(())
}

fn weight_delta(weights: &QTensor, spec: &FaultSpec) -> i32 {
    let w = weights.values()[spec.param];
    apply_fault(w, spec.bit, spec.polarity) as i32 - w as i32
}

/// Adds the contribution change of the faulted weight to a linear layer's accumulators.
pub(crate) fn patch_linear(input: &[i8], weights: &QTensor, acc: &mut [i32], spec: &FaultSpec) {
    let n_in = linear_dims(weights).map(|d| d[1]).unwrap_or(input.len());
    let dw = weight_delta(weights, spec);
    let (o, j) = (spec.param / n_in, spec.param % n_in);
    acc[o] += dw * input[j] as i32;
}

/// Decomposes a flat conv weight index into `(c_out, c_in, ky, kx)`.
pub(crate) fn conv_index(param: usize, c_in: usize) -> (usize, usize, usize, usize) {
    let kx = param % KERNEL;
    let ky = (param / KERNEL) % KERNEL;
    let ci = (param / (KERNEL * KERNEL)) % c_in;
    let co = param / (KERNEL * KERNEL * c_in);
    (co, ci, ky, kx)
}

/// Output positions `(oy, ox)` that read input row/column through kernel tap `(ky, kx)`.
pub(crate) fn conv_tap_range(k: usize, len: usize) -> std::ops::Range<usize> {
    PAD.saturating_sub(k)..(len + PAD).saturating_sub(k).min(len)
}

pub(crate) fn patch_conv(
    input: &[i8],
    [c_in, h, w]: [usize; 3],
    weights: &QTensor,
    acc: &mut [i32],
    spec: &FaultSpec,
) {
    let dw = weight_delta(weights, spec);
    if dw == 0 {
        return;
    }
    debug_assert_eq!(conv_dims(weights).map(|d| d[1]).ok(), Some(c_in));
    let (co, ci, ky, kx) = conv_index(spec.param, c_in);
    let plane = h * w;
    for oy in conv_tap_range(ky, h) {
        let iy = oy + ky - PAD;
        for ox in conv_tap_range(kx, w) {
            let ix = ox + kx - PAD;
            acc[co * plane + oy * w + ox] += dw * input[ci * plane + iy * w + ix] as i32;
        }
    }
}

/// Inference where the targeted parameter is read through [`apply_fault`].
/// The model itself is never modified.
pub fn faulted_infer(model: &QuantModel, input: &[i8], spec: &FaultSpec) -> Result<PredictionVector> {
    model.forward(input, Some(spec), &mut |_, _| {}, None)
}

/// Faulted inference with a per-layer output hook (used by randomized defenses).
pub fn faulted_infer_hooked(
    model: &QuantModel,
    input: &[i8],
    spec: &FaultSpec,
    hook: &mut dyn FnMut(usize, &mut [i8]),
) -> Result<PredictionVector> {
    model.forward(input, Some(spec), hook, None)
}
