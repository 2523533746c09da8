//! Incremental faulted inference.
//!
//! A single faulted weight can only move the accumulators that read it, so a
//! probe starts from the cached nominal forward pass, recomputes the touched
//! outputs of the faulted layer and then pushes a sparse set of changed
//! activations through the rest of the network. Whenever that set becomes
//! empty the faulted prediction is provably identical to the nominal one.
//! Results are bit-identical to [`super::faulted_infer`].

use crate::engine::ops::{self, output_shift, pool_window, KERNEL, PAD};
use crate::engine::{PredictionVector, QLayer, QuantModel, Trace};
use crate::error::Result;
use crate::qtensor::{requantize, requantize_all};

use super::{apply_fault, check_spec, conv_index, conv_tap_range, FaultSpec};

/// Sorted `(flat index, new value)` pairs relative to a nominal activation.
type Changes = Vec<(usize, i8)>;

/// Nominal forward pass of one input, reusable across many fault probes.
#[derive(Debug, Clone)]
pub struct Prober<'m> {
    model: &'m QuantModel,
    trace: Trace,
}

impl<'m> Prober<'m> {
    pub fn new(model: &'m QuantModel, input: &[i8]) -> Result<Self> {
        Ok(Self {
            model,
            trace: model.trace(input)?,
        })
    }

    pub fn nominal(&self) -> &PredictionVector {
        &self.trace.prediction
    }

    pub fn input(&self) -> &[i8] {
        &self.trace.acts[0]
    }

    /// Whether the faulted prediction differs from the nominal one.
    pub fn differs(&self, spec: &FaultSpec) -> Result<bool> {
        check_spec(self.model, spec)?;
        Ok(self.propagate(spec).is_some())
    }

    pub fn faulted_prediction(&self, spec: &FaultSpec) -> Result<PredictionVector> {
        check_spec(self.model, spec)?;
        Ok(self
            .propagate(spec)
            .unwrap_or_else(|| self.trace.prediction.clone()))
    }

    /// `None` when the prediction is unchanged.
    fn propagate(&self, spec: &FaultSpec) -> Option<PredictionVector> {
        let model = self.model;
        let li = model.weighted_layers()[spec.layer];
        let mut changes = self.faulted_layer_changes(li, spec);
        for l in li + 1..model.layers().len() {
            if changes.is_empty() {
                return None;
            }
            changes = match &model.layers()[l] {
                QLayer::Relu => self.relu(l, &changes),
                QLayer::AvgPool2x2 => self.pool(l, &changes),
                QLayer::Linear { weights, in_dec, out_dec } => {
                    let shift = output_shift(*in_dec, weights.dec(), *out_dec);
                    self.linear(l, weights.values(), weights.shape()[0], shift, &changes)
                }
                QLayer::Conv2d { weights, in_dec, out_dec } => {
                    let shift = output_shift(*in_dec, weights.dec(), *out_dec);
                    self.conv(l, weights.values(), weights.shape()[0], shift, &changes)
                }
                QLayer::SoftmaxScore => {
                    let logits = self.patched(l, &changes);
                    let p = ops::softmax_scores(&logits, model.logit_dec());
                    return (p != self.trace.prediction).then_some(p);
                }
            };
        }
        unreachable!("softmax terminates every model")
    }

    fn nominal_out(&self, layer: usize) -> &[i8] {
        &self.trace.acts[layer + 1]
    }

    fn nominal_acc(&self, layer: usize) -> &[i32] {
        self.trace.accs[layer].as_deref().expect("weighted layer records accumulators")
    }

    fn patched(&self, layer: usize, changes: &Changes) -> Vec<i8> {
        let mut v = self.trace.acts[layer].clone();
        for &(i, x) in changes {
            v[i] = x;
        }
        v
    }

    fn faulted_layer_changes(&self, li: usize, spec: &FaultSpec) -> Changes {
        let model = self.model;
        let (weights, shift) = match &model.layers()[li] {
            QLayer::Linear { weights, in_dec, out_dec } | QLayer::Conv2d { weights, in_dec, out_dec } => {
                (weights, output_shift(*in_dec, weights.dec(), *out_dec))
            }
            _ => unreachable!(),
        };
        let w = weights.values()[spec.param];
        let dw = apply_fault(w, spec.bit, spec.polarity) as i32 - w as i32;
        if dw == 0 {
            return Vec::new();
        }
        let input = &self.trace.acts[li];
        let acc = self.nominal_acc(li);
        let out = self.nominal_out(li);
        match &model.layers()[li] {
            QLayer::Linear { .. } => {
                let n_in = input.len();
                let (o, j) = (spec.param / n_in, spec.param % n_in);
                let x = input[j] as i32;
                if x == 0 {
                    return Vec::new();
                }
                let v = requantize(acc[o] + dw * x, shift);
                if v != out[o] {
                    vec![(o, v)]
                } else {
                    Vec::new()
                }
            }
            QLayer::Conv2d { .. } => {
                let [c_in, h, w] = model.activation_shape(li);
                let (co, ci, ky, kx) = conv_index(spec.param, c_in);
                let plane = h * w;
                let mut changes = Vec::new();
                for oy in conv_tap_range(ky, h) {
                    let iy = oy + ky - PAD;
                    for ox in conv_tap_range(kx, w) {
                        let x = input[ci * plane + iy * w + ox + kx - PAD] as i32;
                        if x == 0 {
                            continue;
                        }
                        let o = co * plane + oy * w + ox;
                        let v = requantize(acc[o] + dw * x, shift);
                        if v != out[o] {
                            changes.push((o, v));
                        }
                    }
                }
                changes
            }
            _ => unreachable!(),
        }
    }

    fn relu(&self, l: usize, changes: &Changes) -> Changes {
        let out = self.nominal_out(l);
        changes
            .iter()
            .map(|&(i, v)| (i, v.max(0)))
            .filter(|&(i, v)| v != out[i])
            .collect()
    }

    fn pool(&self, l: usize, changes: &Changes) -> Changes {
        let [_, h, w] = self.model.activation_shape(l);
        let (oh, ow) = (h / 2, w / 2);
        let mut targets: Vec<usize> = changes
            .iter()
            .map(|&(i, _)| {
                let (c, y, x) = (i / (h * w), (i / w) % h, i % w);
                c * oh * ow + (y / 2) * ow + x / 2
            })
            .collect();
        targets.sort_unstable();
        targets.dedup();
        let input = self.patched(l, changes);
        let out = self.nominal_out(l);
        targets
            .into_iter()
            .filter_map(|o| {
                let (c, oy, ox) = (o / (oh * ow), (o / ow) % oh, o % ow);
                let v = pool_window(&input, [h, w], c, oy, ox);
                (v != out[o]).then_some((o, v))
            })
            .collect()
    }

    fn linear(&self, l: usize, weights: &[i8], n_out: usize, shift: i32, changes: &Changes) -> Changes {
        let input = &self.trace.acts[l];
        let n_in = input.len();
        let out = self.nominal_out(l);
        let acc: Vec<i32> = if changes.len() * 4 <= n_in {
            let mut acc = self.nominal_acc(l).to_vec();
            for &(j, v) in changes {
                let d = v as i32 - input[j] as i32;
                for (o, a) in acc.iter_mut().enumerate() {
                    *a += weights[o * n_in + j] as i32 * d;
                }
            }
            acc
        } else {
            ops::linear_acc(&self.patched(l, changes), weights, n_out)
        };
        acc.iter()
            .enumerate()
            .filter_map(|(o, &a)| {
                let v = requantize(a, shift);
                (v != out[o]).then_some((o, v))
            })
            .collect()
    }

    fn conv(&self, l: usize, weights: &[i8], c_out: usize, shift: i32, changes: &Changes) -> Changes {
        let shape @ [c_in, h, w] = self.model.activation_shape(l);
        let plane = h * w;
        let input = &self.trace.acts[l];
        let out = self.nominal_out(l);
        if changes.len() * 2 > input.len() {
            let acc = ops::conv2d_acc(&self.patched(l, changes), shape, weights, c_out);
            return requantize_all(&acc, shift)
                .into_iter()
                .enumerate()
                .filter(|&(o, v)| v != out[o])
                .collect();
        }
        let nominal = self.nominal_acc(l);
        let mut delta = vec![0i32; c_out * plane];
        let mut touched = vec![false; c_out * plane];
        for &(i, v) in changes {
            let d = v as i32 - input[i] as i32;
            let (ci, iy, ix) = (i / plane, (i / w) % h, i % w);
            for ky in 0..KERNEL {
                // output row oy reads input row oy + ky - PAD
                let Some(oy) = (iy + PAD).checked_sub(ky).filter(|&oy| oy < h) else {
                    continue;
                };
                for kx in 0..KERNEL {
                    let Some(ox) = (ix + PAD).checked_sub(kx).filter(|&ox| ox < w) else {
                        continue;
                    };
                    for co in 0..c_out {
                        let wv = weights[((co * c_in + ci) * KERNEL + ky) * KERNEL + kx] as i32;
                        let o = co * plane + oy * w + ox;
                        delta[o] += wv * d;
                        touched[o] = true;
                    }
                }
            }
        }
        touched
            .iter()
            .enumerate()
            .filter(|&(_, &t)| t)
            .filter_map(|(o, _)| {
                let v = requantize(nominal[o] + delta[o], shift);
                (v != out[o]).then_some((o, v))
            })
            .collect()
    }
}
