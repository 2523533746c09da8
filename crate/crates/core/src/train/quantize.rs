use crate::arch::LayerSpec;
use crate::data::INPUT_DEC;
use crate::engine::{QLayer, QuantModel};
use crate::error::{Error, Result};
use crate::qtensor::{compute_dec, quantize};

use super::float::FloatModel;

/// Calibration batch size used by deployment-style quantization.
pub const CALIBRATION_SAMPLES: usize = 256;

/// Quantizes weights per layer and calibrates every weighted layer's output
/// exponent from its largest float activation over `calibration`.
pub fn quantize_model(model: &FloatModel, calibration: &[Vec<f64>]) -> Result<QuantModel> {
    if calibration.is_empty() {
        return Err(Error::validation("calibration set is empty"));
    }
    let arch = model.arch();
    let mut max_abs = vec![0.0f64; arch.layers.len()];
    for x in calibration {
        let acts = model.trace(x)?;
        for (m, a) in max_abs.iter_mut().zip(&acts[1..]) {
            *m = a.iter().fold(*m, |acc, v| acc.max(v.abs()));
        }
    }
    let mut dec = INPUT_DEC;
    let mut ordinal = 0;
    let mut layers = Vec::with_capacity(arch.layers.len());
    for (i, spec) in arch.layers.iter().enumerate() {
        layers.push(match spec {
            LayerSpec::Linear { .. } | LayerSpec::Conv2d { .. } => {
                let w = model.weights(ordinal);
                let shape = arch.weight_shapes()?.swap_remove(ordinal);
                let weights = quantize(w, shape, compute_dec(w)?)?;
                ordinal += 1;
                let in_dec = dec;
                dec = compute_dec(&[max_abs[i]])?;
                if matches!(spec, LayerSpec::Linear { .. }) {
                    QLayer::Linear { weights, in_dec, out_dec: dec }
                } else {
                    QLayer::Conv2d { weights, in_dec, out_dec: dec }
                }
            }
            LayerSpec::Relu => QLayer::Relu,
            LayerSpec::AvgPool2x2 => QLayer::AvgPool2x2,
            LayerSpec::SoftmaxScore => QLayer::SoftmaxScore,
        });
    }
    QuantModel::new(arch.input_shape, INPUT_DEC, layers)
}

/// Weight exponent of every weighted layer.
pub fn weight_decs(model: &QuantModel) -> Vec<i32> {
    (0..model.num_weighted()).map(|l| model.weights(l).dec()).collect()
}
