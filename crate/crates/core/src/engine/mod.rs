//! Bit-exact integer inference for bias-free feed-forward networks.

pub mod ops;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::arch::{Arch, LayerSpec};
use crate::error::{Error, Result};
use crate::fault::{self, FaultSpec};
use crate::qtensor::{requantize_all, QTensor};

use ops::{conv2d_acc, conv_dims, linear_acc, linear_dims, output_shift};

/// Integer score vector; every entry lies in `[0, 127]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PredictionVector {
    scores: Vec<u8>,
}

impl PredictionVector {
    pub fn new(scores: Vec<u8>) -> Result<Self> {
        if let Some(bad) = scores.iter().find(|&&s| s > 127) {
            return Err(Error::validation(format!("score {bad} outside [0, 127]")));
        }
        Ok(Self { scores })
    }

    pub(crate) fn from_scores_unchecked(scores: Vec<u8>) -> Self {
        debug_assert!(scores.iter().all(|&s| s <= 127));
        Self { scores }
    }

    pub fn scores(&self) -> &[u8] {
        &self.scores
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Index of the highest score; the lowest index wins ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &s) in self.scores.iter().enumerate() {
            if s > self.scores[best] {
                best = i;
            }
        }
        best
    }
}

impl fmt::Display for PredictionVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, s) in self.scores.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{s}")?;
        }
        write!(f, "]")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum QLayer {
    /// Weights `[n_out, n_in]`, row-major.
    Linear { weights: QTensor, in_dec: i32, out_dec: i32 },
    /// Weights `[c_out, c_in, 5, 5]`; stride 1, padding 2.
    Conv2d { weights: QTensor, in_dec: i32, out_dec: i32 },
    Relu,
    AvgPool2x2,
    SoftmaxScore,
}

impl QLayer {
    pub fn weights(&self) -> Option<&QTensor> {
        match self {
            QLayer::Linear { weights, .. } | QLayer::Conv2d { weights, .. } => Some(weights),
            _ => None,
        }
    }

    fn weights_mut(&mut self) -> Option<&mut QTensor> {
        match self {
            QLayer::Linear { weights, .. } | QLayer::Conv2d { weights, .. } => Some(weights),
            _ => None,
        }
    }

    pub fn decs(&self) -> Option<(i32, i32)> {
        match *self {
            QLayer::Linear { in_dec, out_dec, .. } | QLayer::Conv2d { in_dec, out_dec, .. } => {
                Some((in_dec, out_dec))
            }
            _ => None,
        }
    }

    pub fn spec(&self) -> LayerSpec {
        match self {
            QLayer::Linear { weights, .. } => LayerSpec::Linear {
                out_features: weights.shape()[0],
            },
            QLayer::Conv2d { weights, .. } => LayerSpec::Conv2d {
                out_channels: weights.shape()[0],
            },
            QLayer::Relu => LayerSpec::Relu,
            QLayer::AvgPool2x2 => LayerSpec::AvgPool2x2,
            QLayer::SoftmaxScore => LayerSpec::SoftmaxScore,
        }
    }
}

/// Activation and accumulator buffers filled by a traced forward pass.
type TraceSink<'a> = (&'a mut Vec<Vec<i8>>, &'a mut Vec<Option<Vec<i32>>>);

/// Quantized model: an ordered list of integer layers.
///
/// Parameters are addressed by `(weighted layer ordinal, flat index)`; the
/// ordinal counts only `Linear` and `Conv2d` layers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantModel {
    input_dec: i32,
    layers: Vec<QLayer>,
    arch: Arch,
    shapes: Vec<[usize; 3]>,
    weighted: Vec<usize>,
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    /// `acts[i]` enters layer `i`; the last entry holds the logits.
    pub acts: Vec<Vec<i8>>,
    /// Accumulators of each weighted layer, before requantization.
    pub accs: Vec<Option<Vec<i32>>>,
    pub prediction: PredictionVector,
}

impl QuantModel {
    pub fn new(input_shape: [usize; 3], input_dec: i32, layers: Vec<QLayer>) -> Result<Self> {
        let arch = Arch {
            input_shape,
            layers: layers.iter().map(QLayer::spec).collect(),
        };
        let shapes = arch.activation_shapes()?;
        let expected_w = arch.weight_shapes()?;
        let mut weighted = Vec::new();
        let mut dec = input_dec;
        for (i, layer) in layers.iter().enumerate() {
            if let (Some(w), Some((in_dec, out_dec))) = (layer.weights(), layer.decs()) {
                let want = &expected_w[weighted.len()];
                if w.shape() != want.as_slice() {
                    return Err(Error::shape(
                        format!("layer {i} weights {want:?}"),
                        format!("{:?}", w.shape()),
                    ));
                }
                match layer {
                    QLayer::Linear { weights, .. } => {
                        linear_dims(weights)?;
                    }
                    QLayer::Conv2d { weights, .. } => {
                        conv_dims(weights)?;
                    }
                    _ => {}
                }
                if in_dec != dec {
                    return Err(Error::validation(format!(
                        "layer {i}: input exponent {in_dec} does not match upstream exponent {dec}"
                    )));
                }
                dec = out_dec;
                weighted.push(i);
            }
        }
        Ok(Self {
            input_dec,
            layers,
            arch,
            shapes,
            weighted,
        })
    }

    /// All-zero weights with every exponent set to 0.
    pub fn zeros(arch: &Arch) -> Result<Self> {
        let shapes = arch.weight_shapes()?;
        let mut it = shapes.into_iter();
        let layers = arch
            .layers
            .iter()
            .map(|spec| match spec {
                LayerSpec::Linear { .. } => QLayer::Linear {
                    weights: QTensor::zeros(it.next().unwrap(), 0),
                    in_dec: 0,
                    out_dec: 0,
                },
                LayerSpec::Conv2d { .. } => QLayer::Conv2d {
                    weights: QTensor::zeros(it.next().unwrap(), 0),
                    in_dec: 0,
                    out_dec: 0,
                },
                LayerSpec::Relu => QLayer::Relu,
                LayerSpec::AvgPool2x2 => QLayer::AvgPool2x2,
                LayerSpec::SoftmaxScore => QLayer::SoftmaxScore,
            })
            .collect();
        Self::new(arch.input_shape, 0, layers)
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn layers(&self) -> &[QLayer] {
        &self.layers
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.shapes[0]
    }

    pub fn input_len(&self) -> usize {
        self.shapes[0].iter().product()
    }

    pub fn input_dec(&self) -> i32 {
        self.input_dec
    }

    /// Shape of the activation entering layer `i` (`i == layers.len()` gives the logits).
    pub fn activation_shape(&self, i: usize) -> [usize; 3] {
        self.shapes[i]
    }

    pub fn num_classes(&self) -> usize {
        self.shapes.last().unwrap().iter().product()
    }

    /// Layer indices of the weighted layers.
    pub fn weighted_layers(&self) -> &[usize] {
        &self.weighted
    }

    pub fn num_weighted(&self) -> usize {
        self.weighted.len()
    }

    /// Weight tensor of the `ordinal`-th weighted layer.
    pub fn weights(&self, ordinal: usize) -> &QTensor {
        self.layers[self.weighted[ordinal]].weights().unwrap()
    }

    pub fn param_counts(&self) -> Vec<usize> {
        (0..self.weighted.len()).map(|o| self.weights(o).len()).collect()
    }

    pub fn total_params(&self) -> usize {
        self.param_counts().iter().sum()
    }

    pub fn logit_dec(&self) -> i32 {
        self.weighted
            .last()
            .and_then(|&i| self.layers[i].decs())
            .map(|(_, out)| out)
            .unwrap_or(self.input_dec)
    }

    /// Copy of this model with one stored parameter replaced.
    pub fn with_weight(&self, ordinal: usize, param: usize, value: i8) -> Result<Self> {
        if ordinal >= self.weighted.len() || param >= self.weights(ordinal).len() {
            return Err(Error::validation(format!(
                "parameter {ordinal}:{param} out of range"
            )));
        }
        let mut out = self.clone();
        let li = out.weighted[ordinal];
        out.layers[li].weights_mut().unwrap().values_mut()[param] = value;
        Ok(out)
    }

    /// Copy of this model with a whole weight tensor replaced (same shape).
    pub fn with_weights(&self, ordinal: usize, values: Vec<i8>) -> Result<Self> {
        let w = self.weights(ordinal);
        let replaced = QTensor::new(values, w.shape().to_vec(), w.dec())?;
        let mut out = self.clone();
        let li = out.weighted[ordinal];
        *out.layers[li].weights_mut().unwrap() = replaced;
        Ok(out)
    }

    pub fn check_input(&self, input: &[i8]) -> Result<()> {
        if input.len() != self.input_len() {
            return Err(Error::shape(
                format!("input of {} values {:?}", self.input_len(), self.shapes[0]),
                input.len(),
            ));
        }
        Ok(())
    }

    pub fn infer(&self, input: &[i8]) -> Result<PredictionVector> {
        self.forward(input, None, &mut |_, _| {}, None)
    }

    /// Inference with a callback that may rewrite each layer's output in place.
    pub fn infer_hooked(
        &self,
        input: &[i8],
        hook: &mut dyn FnMut(usize, &mut [i8]),
    ) -> Result<PredictionVector> {
        self.forward(input, None, hook, None)
    }

    pub fn trace(&self, input: &[i8]) -> Result<Trace> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        let mut accs = Vec::with_capacity(self.layers.len());
        let prediction = self.forward(input, None, &mut |_, _| {}, Some((&mut acts, &mut accs)))?;
        Ok(Trace {
            acts,
            accs,
            prediction,
        })
    }

    /// Forward pass. A fault, when given, is applied by correcting the
    /// accumulators that read the targeted weight, which is the same as
    /// reading the faulted byte at every use.
    pub(crate) fn forward(
        &self,
        input: &[i8],
        fault: Option<&FaultSpec>,
        hook: &mut dyn FnMut(usize, &mut [i8]),
        mut record: Option<TraceSink<'_>>,
    ) -> Result<PredictionVector> {
        self.check_input(input)?;
        if let Some(spec) = fault {
            fault::check_spec(self, spec)?;
        }
        let mut cur = input.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let shape = self.shapes[i];
            let mut acc_out = None;
            let mut next = match layer {
                QLayer::Linear {
                    weights,
                    in_dec,
                    out_dec,
                } => {
                    let mut acc = linear_acc(&cur, weights.values(), weights.shape()[0]);
                    if let Some(spec) = fault.filter(|s| self.weighted[s.layer] == i) {
                        fault::patch_linear(&cur, weights, &mut acc, spec);
                    }
                    let out = requantize_all(&acc, output_shift(*in_dec, weights.dec(), *out_dec));
                    acc_out = Some(acc);
                    out
                }
                QLayer::Conv2d {
                    weights,
                    in_dec,
                    out_dec,
                } => {
                    let mut acc = conv2d_acc(&cur, shape, weights.values(), weights.shape()[0]);
                    if let Some(spec) = fault.filter(|s| self.weighted[s.layer] == i) {
                        fault::patch_conv(&cur, shape, weights, &mut acc, spec);
                    }
                    let out = requantize_all(&acc, output_shift(*in_dec, weights.dec(), *out_dec));
                    acc_out = Some(acc);
                    out
                }
                QLayer::Relu => ops::relu_q(&cur),
                QLayer::AvgPool2x2 => ops::avgpool2x2(&cur, shape)?,
                QLayer::SoftmaxScore => {
                    let prediction = ops::softmax_scores(&cur, self.logit_dec());
                    if let Some((acts, accs)) = record.as_mut() {
                        acts.push(cur);
                        accs.push(None);
                    }
                    return Ok(prediction);
                }
            };
            hook(i, &mut next);
            if let Some((acts, accs)) = record.as_mut() {
                acts.push(std::mem::replace(&mut cur, next));
                accs.push(acc_out);
            } else {
                cur = next;
            }
        }
        unreachable!("architecture validation guarantees a trailing softmax layer")
    }
}

/// Free-function form of [`QuantModel::infer`].
pub fn infer(model: &QuantModel, input: &[i8]) -> Result<PredictionVector> {
    model.infer(input)
}

/// Model with uniformly random weights in `[-amp, amp]` and random exponents,
/// deterministic per seed. Used for synthetic victims in tests and benches.
pub fn random_model(arch: &Arch, amp: i8, seed: u64) -> Result<QuantModel> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let amp = amp.max(0);
    let mut shapes = arch.weight_shapes()?.into_iter();
    let mut dec = 0;
    let mut layers = Vec::with_capacity(arch.layers.len());
    for spec in &arch.layers {
        layers.push(match spec {
            LayerSpec::Linear { .. } | LayerSpec::Conv2d { .. } => {
                let shape = shapes.next().expect("weight shape per weighted layer");
                let n = shape.iter().product();
                let values = (0..n).map(|_| rng.gen_range(-amp..=amp)).collect();
                let weights = QTensor::new(values, shape, rng.gen_range(-2..=1))?;
                let in_dec = dec;
                dec = rng.gen_range(1..=4);
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
    QuantModel::new(arch.input_shape, 0, layers)
}
