//! Integer kernels. Each weighted kernel is split into an accumulate step
//! (exact `i32` multiply-accumulate) and a requantize step, so the fault
//! simulator can patch accumulators before requantization.

use crate::error::{Error, Result};
use crate::qtensor::{requantize, requantize_all, QTensor};

use super::PredictionVector;

pub const KERNEL: usize = 5;
pub const PAD: usize = 2;

/// Right shift that maps a `dec_in x dec_w` product back to `out_dec`.
pub fn output_shift(in_dec: i32, w_dec: i32, out_dec: i32) -> i32 {
    (7 - in_dec) + (7 - w_dec) - (7 - out_dec)
}

pub fn linear_acc(input: &[i8], weights: &[i8], n_out: usize) -> Vec<i32> {
    let n_in = input.len();
    debug_assert_eq!(weights.len(), n_in * n_out);
    weights
        .chunks_exact(n_in)
        .map(|row| {
            row.iter()
                .zip(input)
                .map(|(&w, &x)| w as i32 * x as i32)
                .sum()
        })
        .collect()
}

pub fn linear_forward(input: &[i8], in_dec: i32, weights: &QTensor, out_dec: i32) -> Result<Vec<i8>> {
    let [n_out, n_in] = linear_dims(weights)?;
    if input.len() != n_in {
        return Err(Error::shape(format!("input of length {n_in}"), input.len()));
    }
    let acc = linear_acc(input, weights.values(), n_out);
    Ok(requantize_all(&acc, output_shift(in_dec, weights.dec(), out_dec)))
}

pub(crate) fn linear_dims(weights: &QTensor) -> Result<[usize; 2]> {
    match *weights.shape() {
        [n_out, n_in] => Ok([n_out, n_in]),
        ref s => Err(Error::shape("rank-2 weight tensor", format!("{s:?}"))),
    }
}

pub(crate) fn conv_dims(weights: &QTensor) -> Result<[usize; 2]> {
    match *weights.shape() {
        [c_out, c_in, KERNEL, KERNEL] => Ok([c_out, c_in]),
        ref s => Err(Error::shape(
            format!("[c_out, c_in, {KERNEL}, {KERNEL}] weight tensor"),
            format!("{s:?}"),
        )),
    }
}

/// 5x5 convolution, stride 1, zero padding 2, over a CHW input.
pub fn conv2d_acc(input: &[i8], [c_in, h, w]: [usize; 3], weights: &[i8], c_out: usize) -> Vec<i32> {
    debug_assert_eq!(input.len(), c_in * h * w);
    debug_assert_eq!(weights.len(), c_out * c_in * KERNEL * KERNEL);
    let plane = h * w;
    let mut acc = vec![0i32; c_out * plane];
    for co in 0..c_out {
        let out = &mut acc[co * plane..(co + 1) * plane];
        for ci in 0..c_in {
            let src = &input[ci * plane..(ci + 1) * plane];
            let kernel = &weights[(co * c_in + ci) * KERNEL * KERNEL..][..KERNEL * KERNEL];
            for ky in 0..KERNEL {
                for kx in 0..KERNEL {
                    let wv = kernel[ky * KERNEL + kx] as i32;
                    if wv == 0 {
                        continue;
                    }
                    // output (oy, ox) reads input (oy + ky - PAD, ox + kx - PAD)
                    let oy_lo = PAD.saturating_sub(ky);
                    let oy_hi = (h + PAD).saturating_sub(ky).min(h);
                    let ox_lo = PAD.saturating_sub(kx);
                    let ox_hi = (w + PAD).saturating_sub(kx).min(w);
                    for oy in oy_lo..oy_hi {
                        let iy = oy + ky - PAD;
                        let src_row = &src[iy * w..(iy + 1) * w];
                        let out_row = &mut out[oy * w..(oy + 1) * w];
                        for ox in ox_lo..ox_hi {
                            out_row[ox] += wv * src_row[ox + kx - PAD] as i32;
                        }
                    }
                }
            }
        }
    }
    acc
}

pub fn conv2d_forward(
    input: &[i8],
    in_shape: [usize; 3],
    in_dec: i32,
    weights: &QTensor,
    out_dec: i32,
) -> Result<Vec<i8>> {
    let [c_out, c_in] = conv_dims(weights)?;
    if in_shape[0] != c_in || input.len() != in_shape.iter().product::<usize>() {
        return Err(Error::shape(
            format!("input with {c_in} channels"),
            format!("{in_shape:?} ({} values)", input.len()),
        ));
    }
    let acc = conv2d_acc(input, in_shape, weights.values(), c_out);
    Ok(requantize_all(&acc, output_shift(in_dec, weights.dec(), out_dec)))
}

pub fn relu_q(x: &[i8]) -> Vec<i8> {
    x.iter().map(|&v| v.max(0)).collect()
}

/// 2x2 average pooling with stride 2: `(sum + 2) >> 2` per window.
pub fn avgpool2x2(x: &[i8], [c, h, w]: [usize; 3]) -> Result<Vec<i8>> {
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::validation(format!(
            "average pooling needs even spatial dims, got {h}x{w}"
        )));
    }
    if x.len() != c * h * w {
        return Err(Error::shape(c * h * w, x.len()));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                out.push(pool_window(x, [h, w], ch, oy, ox));
            }
        }
    }
    Ok(out)
}

#[inline]
pub(crate) fn pool_window(x: &[i8], [h, w]: [usize; 2], ch: usize, oy: usize, ox: usize) -> i8 {
    let base = ch * h * w + 2 * oy * w + 2 * ox;
    let sum = x[base] as i32 + x[base + 1] as i32 + x[base + w] as i32 + x[base + w + 1] as i32;
    requantize(sum, 2)
}

/// Softmax over the dequantized logits, mapped to integer scores with
/// `floor(127 * p)`.
pub fn softmax_scores(logits: &[i8], logit_dec: i32) -> PredictionVector {
    let step = crate::qtensor::step(logit_dec);
    let max = logits.iter().copied().max().unwrap_or(0) as f64 * step;
    let exps: Vec<f64> = logits
        .iter()
        .map(|&l| (l as f64 * step - max).exp())
        .collect();
    let sum: f64 = exps.iter().sum();
    let scores = exps
        .iter()
        .map(|e| ((127.0 * e / sum).floor() as i64).clamp(0, 127) as u8)
        .collect();
    PredictionVector::from_scores_unchecked(scores)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(input: &[i8], [c_in, h, w]: [usize; 3], weights: &[i8], c_out: usize) -> Vec<i32> {
        let mut out = vec![0i32; c_out * h * w];
        for co in 0..c_out {
            for oy in 0..h as isize {
                for ox in 0..w as isize {
                    let mut s = 0i32;
                    for ci in 0..c_in {
                        for ky in 0..5isize {
                            for kx in 0..5isize {
                                let iy = oy + ky - 2;
                                let ix = ox + kx - 2;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = input[ci * h * w + iy as usize * w + ix as usize] as i32;
                                let wv = weights[((co * c_in + ci) * 5 + ky as usize) * 5 + kx as usize] as i32;
                                s += xv * wv;
                            }
                        }
                    }
                    out[co * h * w + oy as usize * w + ox as usize] = s;
                }
            }
        }
        out
    }

    #[test]
    fn linear_identity_chain() {
        let w = QTensor::new(vec![64, 0, 0, 64], vec![2, 2], 1).unwrap();
        let out = linear_forward(&[64, 64], 0, &w, 1).unwrap();
        assert_eq!(out, vec![32, 32]);
        assert_eq!(crate::qtensor::dequantize(&out, 1), vec![0.5, 0.5]);
    }

    #[test]
    fn linear_single_neuron_rounding() {
        // shift 7 = (7 - 0) + (7 - 0) - (7 - 0)
        let w = QTensor::new(vec![127], vec![1, 1], 0).unwrap();
        assert_eq!(linear_forward(&[127], 0, &w, 0).unwrap(), vec![126]);
    }

    #[test]
    fn linear_zero_weights_and_shape_errors() {
        let w = QTensor::zeros(vec![3, 4], 0);
        assert_eq!(linear_forward(&[5, -7, 9, 1], 0, &w, 0).unwrap(), vec![0, 0, 0]);
        assert!(matches!(
            linear_forward(&[1, 2], 0, &w, 0),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn conv_zero_input() {
        let w = QTensor::new((0..2 * 3 * 25).map(|i| (i % 7) as i8 - 3).collect(), vec![2, 3, 5, 5], 0).unwrap();
        let out = conv2d_forward(&[0; 3 * 8 * 8], [3, 8, 8], 0, &w, 0).unwrap();
        assert!(out.iter().all(|&v| v == 0));
        assert_eq!(out.len(), 2 * 8 * 8);
    }

    #[test]
    fn conv_center_equals_dot_product() {
        let kernel: Vec<i8> = (0..25).map(|i| (i as i8 * 5) - 60).collect();
        let w = QTensor::new(kernel.clone(), vec![1, 1, 5, 5], 0).unwrap();
        let acc = conv2d_acc(&kernel, [1, 5, 5], w.values(), 1);
        let dot: i32 = kernel.iter().map(|&k| k as i32 * k as i32).sum();
        assert_eq!(acc[2 * 5 + 2], dot);
        let out = conv2d_forward(&kernel, [1, 5, 5], 0, &w, 7).unwrap();
        assert_eq!(out[12], requantize(dot, output_shift(0, 0, 7)));
    }

    #[test]
    fn conv_delta_kernel_is_scaled_identity() {
        let mut kernel = vec![0i8; 25];
        kernel[12] = 127;
        let input: Vec<i8> = (0..64).map(|i| ((i * 37) % 255) as i8).collect();
        let acc = conv2d_acc(&input, [1, 8, 8], &kernel, 1);
        assert_eq!(acc, naive_conv(&input, [1, 8, 8], &kernel, 1));
        for (a, &x) in acc.iter().zip(&input) {
            assert_eq!(*a, 127 * x as i32);
        }
    }

    #[test]
    fn conv_matches_naive_oracle() {
        let input: Vec<i8> = (0..2 * 6 * 7).map(|i| ((i * 53 + 11) % 256) as u8 as i8).collect();
        let weights: Vec<i8> = (0..3 * 2 * 25).map(|i| ((i * 29 + 5) % 256) as u8 as i8).collect();
        assert_eq!(
            conv2d_acc(&input, [2, 6, 7], &weights, 3),
            naive_conv(&input, [2, 6, 7], &weights, 3)
        );
    }

    #[test]
    fn relu_examples() {
        assert_eq!(relu_q(&[-5, 0, 117, -128]), vec![0, 0, 117, 0]);
    }

    #[test]
    fn pool_examples() {
        assert_eq!(avgpool2x2(&[4, 4, 4, 4], [1, 2, 2]).unwrap(), vec![4]);
        assert_eq!(avgpool2x2(&[1, 2, 3, 4], [1, 2, 2]).unwrap(), vec![3]);
        assert_eq!(avgpool2x2(&[-4, -4, -4, -4], [1, 2, 2]).unwrap(), vec![-4]);
        assert!(matches!(
            avgpool2x2(&[0; 6], [1, 3, 2]),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax_scores(&[5; 10], 3).scores(), &[12; 10]);
        assert_eq!(softmax_scores(&[0, 0], 0).scores(), &[63, 63]);
    }

    #[test]
    fn softmax_dominant_logit_matches_float_oracle() {
        // logits at dec 7 are real-valued integers; +16 real units on label 3
        let mut logits = [0i8; 10];
        logits[3] = 16;
        let got = softmax_scores(&logits, 7);
        let denom = 16f64.exp() + 9.0;
        let mut want = [0u8; 10];
        for (i, w) in want.iter_mut().enumerate() {
            let p = if i == 3 { 16f64.exp() / denom } else { 1.0 / denom };
            *w = (127.0 * p).floor() as u8;
        }
        assert_eq!(got.scores(), &want);
        assert_eq!(got.scores()[3], 126);
        assert_eq!(got.argmax(), 3);
    }
}
