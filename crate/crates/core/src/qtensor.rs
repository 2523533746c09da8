//! Powers-of-two 8-bit fixed-point tensors.
//!
//! A stored value `q` with exponent `dec` represents the real number
//! `q * 2^(dec - 7)`. All arithmetic downstream of quantization is integer
//! only: multiply-accumulate into `i32`, then a rounding right shift back to
//! `i8` with saturation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const Q_MIN: i32 = i8::MIN as i32;
pub const Q_MAX: i32 = i8::MAX as i32;

/// Signed 8-bit tensor with a shared power-of-two exponent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QTensor {
    values: Vec<i8>,
    shape: Vec<usize>,
    dec: i32,
}

impl QTensor {
    pub fn new(values: Vec<i8>, shape: Vec<usize>, dec: i32) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(Error::shape(
                format!("{expected} values for shape {shape:?}"),
                values.len(),
            ));
        }
        Ok(Self { values, shape, dec })
    }

    pub fn zeros(shape: Vec<usize>, dec: i32) -> Self {
        let n = shape.iter().product();
        Self {
            values: vec![0; n],
            shape,
            dec,
        }
    }

    pub fn values(&self) -> &[i8] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [i8] {
        &mut self.values
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dec(&self) -> i32 {
        self.dec
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Real value represented by one stored step.
    pub fn step(&self) -> f64 {
        step(self.dec)
    }

    pub fn dequantize(&self) -> Vec<f64> {
        dequantize(&self.values, self.dec)
    }
}

/// Size of one quantization step for exponent `dec`, i.e. `2^(dec-7)`.
pub fn step(dec: i32) -> f64 {
    (2.0f64).powi(dec - 7)
}

/// `ceil(log2(max |x|))`, or 0 for an all-zero (or empty) tensor.
pub fn compute_dec(xs: &[f64]) -> Result<i32> {
    let mut max_abs = 0.0f64;
    for (i, &x) in xs.iter().enumerate() {
        if !x.is_finite() {
            return Err(Error::validation(format!(
                "non-finite value {x} at index {i}"
            )));
        }
        max_abs = max_abs.max(x.abs());
    }
    if max_abs == 0.0 {
        return Ok(0);
    }
    Ok(max_abs.log2().ceil() as i32)
}

/// Round to nearest (ties away from zero) and saturate to `[-128, 127]`.
pub fn quantize_value(x: f64, dec: i32) -> i8 {
    let scaled = (x * (2.0f64).powi(7 - dec)).round();
    // NaN maps to 0 through the saturating cast; callers validate finiteness.
    scaled.clamp(Q_MIN as f64, Q_MAX as f64) as i8
}

pub fn quantize(xs: &[f64], shape: Vec<usize>, dec: i32) -> Result<QTensor> {
    QTensor::new(xs.iter().map(|&x| quantize_value(x, dec)).collect(), shape, dec)
}

pub fn dequantize(values: &[i8], dec: i32) -> Vec<f64> {
    let s = step(dec);
    values.iter().map(|&v| v as f64 * s).collect()
}

pub fn saturate(v: i64) -> i8 {
    v.clamp(Q_MIN as i64, Q_MAX as i64) as i8
}

/// Rounding arithmetic right shift (round half up) followed by saturation.
pub fn requantize_shift(acc: i32, shift: u32) -> i8 {
    let acc = acc as i64;
    if shift == 0 {
        return saturate(acc);
    }
    saturate((acc + (1i64 << (shift - 1))) >> shift)
}

/// Like [`requantize_shift`] but a negative shift scales up with saturation.
pub fn requantize(acc: i32, shift: i32) -> i8 {
    if shift >= 0 {
        requantize_shift(acc, shift as u32)
    } else {
        let up = (-shift).min(40) as u32;
        saturate((acc as i64).saturating_mul(1i64 << up))
    }
}

/// Element-wise [`requantize`] over an accumulator buffer.
pub fn requantize_all(acc: &[i32], shift: i32) -> Vec<i8> {
    acc.iter().map(|&a| requantize(a, shift)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dec_examples() {
        assert_eq!(compute_dec(&[0.1, -3.2, 2.0]).unwrap(), 2);
        assert_eq!(compute_dec(&[1.0, -0.5]).unwrap(), 0);
        assert_eq!(compute_dec(&[0.0, 0.0]).unwrap(), 0);
        assert_eq!(compute_dec(&[]).unwrap(), 0);
        assert_eq!(compute_dec(&[0.05]).unwrap(), -4);
    }

    #[test]
    fn dec_rejects_non_finite() {
        assert!(matches!(
            compute_dec(&[1.0, f64::NAN]),
            Err(Error::Validation(_))
        ));
        assert!(compute_dec(&[f64::INFINITY]).is_err());
    }

    #[test]
    fn quantize_examples() {
        assert_eq!(quantize_value(0.5, 0), 64);
        assert_eq!(quantize_value(1.0, 0), 127);
        assert_eq!(quantize_value(-0.3, 1), -19);
        assert_eq!(quantize_value(-1.0, 0), -128);
        assert_eq!(quantize_value(-5.0, 0), -128);
    }

    #[test]
    fn quantize_ties_away_from_zero() {
        // 0.5 step exactly at dec = 7 (step = 1.0)
        assert_eq!(quantize_value(2.5, 7), 3);
        assert_eq!(quantize_value(-2.5, 7), -3);
        assert_eq!(quantize_value(0.5, 7), 1);
        assert_eq!(quantize_value(-0.5, 7), -1);
    }

    #[test]
    fn dequantize_examples() {
        assert_eq!(dequantize(&[64], 0), vec![0.5]);
        assert_eq!(dequantize(&[-128], 0), vec![-1.0]);
        assert_eq!(dequantize(&[32], 2), vec![1.0]);
    }

    #[test]
    fn requantize_examples() {
        assert_eq!(requantize_shift(256, 2), 64);
        assert_eq!(requantize_shift(6, 2), 2);
        assert_eq!(requantize_shift(100_000, 4), 127);
        assert_eq!(requantize_shift(-100_000, 4), -128);
        assert_eq!(requantize_shift(-6, 2), -1);
        assert_eq!(requantize_shift(5, 0), 5);
        assert_eq!(requantize(3, -2), 12);
        assert_eq!(requantize(100, -2), 127);
    }

    #[test]
    fn tensor_shape_checked() {
        assert!(QTensor::new(vec![1, 2, 3], vec![2, 2], 0).is_err());
        let t = QTensor::new(vec![1, 2, 3, 4], vec![2, 2], 1).unwrap();
        assert_eq!(t.dequantize(), vec![1.0 / 64.0, 2.0 / 64.0, 3.0 / 64.0, 4.0 / 64.0]);
    }
}
