//! Independent oracles shared by the integration tests and the acceptance run.
//! Nothing here calls the code paths it checks.
#![allow(dead_code)]

use qnn_sea::arch::{Arch, LayerSpec};
use qnn_sea::data::{Dataset, Provenance, Split};
use qnn_sea::sea::{BitKnowledge, ParamBits, Slot};
use qnn_sea::train::FloatModel;
use qnn_sea::{QLayer, QTensor, QuantModel};
use rand::Rng;

/// Exact `round_half_away(x * 2^(7-dec))`, saturated, via integer parts.
pub fn quantize_oracle(x: f64, dec: i32) -> i8 {
    let scaled = x * 2f64.powi(7 - dec);
    let floor = scaled.floor();
    let frac = scaled - floor;
    let r = if frac > 0.5 || (frac == 0.5 && scaled > 0.0) { floor + 1.0 } else { floor };
    r.clamp(-128.0, 127.0) as i8
}

/// `(acc + 2^(s-1)) / 2^s` with floor division in wide integers, saturated.
pub fn requantize_oracle(acc: i32, shift: u32) -> i8 {
    let a = acc as i128;
    let v = if shift == 0 { a } else { (a + (1i128 << (shift - 1))).div_euclid(1i128 << shift) };
    v.clamp(-128, 127) as i8
}

/// Byte with bit `bit` (0 = MSB) forced to one.
pub fn set_bit(v: i8, bit: u8) -> i8 {
    ((v as u8) | (0x80u8 >> bit)) as i8
}

pub fn bit_is_one(v: i8, bit: u8) -> bool {
    (v as u8) & (0x80u8 >> bit) != 0
}

/// Rebuilds the whole model from scratch with one parameter replaced.
pub fn rebuild_with(model: &QuantModel, ordinal: usize, param: usize, value: i8) -> QuantModel {
    let mut seen = 0;
    let layers = model
        .layers()
        .iter()
        .map(|l| match l {
            QLayer::Linear { weights, in_dec, out_dec } | QLayer::Conv2d { weights, in_dec, out_dec } => {
                let mut vals = weights.values().to_vec();
                if seen == ordinal {
                    vals[param] = value;
                }
                seen += 1;
                let w = QTensor::new(vals, weights.shape().to_vec(), weights.dec()).unwrap();
                if matches!(l, QLayer::Linear { .. }) {
                    QLayer::Linear { weights: w, in_dec: *in_dec, out_dec: *out_dec }
                } else {
                    QLayer::Conv2d { weights: w, in_dec: *in_dec, out_dec: *out_dec }
                }
            }
            other => other.clone(),
        })
        .collect();
    QuantModel::new(model.input_shape(), model.input_dec(), layers).unwrap()
}

/// Brute-force safe-error set: every `(layer, param, bit)` whose bit-set
/// mutation changes the prediction of at least one input.
pub fn brute_zero_set(model: &QuantModel, inputs: &[Vec<i8>]) -> Vec<(usize, usize, u8)> {
    let nominal: Vec<_> = inputs.iter().map(|x| model.infer(x).unwrap()).collect();
    let mut out = Vec::new();
    for layer in 0..model.num_weighted() {
        for (p, &w) in model.weights(layer).values().iter().enumerate() {
            for bit in 0..8u8 {
                let m = set_bit(w, bit);
                if m == w {
                    continue;
                }
                let mutated = rebuild_with(model, layer, p, m);
                if inputs.iter().zip(&nominal).any(|(x, n)| mutated.infer(x).unwrap() != *n) {
                    out.push((layer, p, bit));
                }
            }
        }
    }
    out
}

/// Inputs on a coarse grid over every coordinate.
pub fn grid_inputs(len: usize, values: &[i8]) -> Vec<Vec<i8>> {
    let mut out = vec![Vec::new()];
    for _ in 0..len {
        out = out
            .into_iter()
            .flat_map(|p| values.iter().map(move |&v| [p.clone(), vec![v]].concat()))
            .collect();
    }
    out
}

/// Smallest and largest byte consistent with the known bits.
pub fn brute_range(bits: &ParamBits) -> (i8, i8) {
    let ok: Vec<i8> = (i8::MIN..=i8::MAX)
        .filter(|&v| bits.iter().enumerate().all(|(i, s)| s.value().is_none_or(|b| bit_is_one(v, i as u8) == b)))
        .collect();
    (*ok.iter().min().unwrap(), *ok.iter().max().unwrap())
}

/// Reference LSBL: any Unknown above the lowest ZeroSea becomes OneLsbl.
pub fn lsbl_oracle(bits: &ParamBits) -> ParamBits {
    let mut out = *bits;
    if let Some(low) = (0..8).rev().find(|&i| bits[i] == Slot::ZeroSea) {
        for s in &mut out[..low] {
            if *s == Slot::Unknown {
                *s = Slot::OneLsbl;
            }
        }
    }
    out
}

pub fn random_slot<R: Rng>(rng: &mut R) -> Slot {
    [Slot::Unknown, Slot::ZeroSea, Slot::OneLsbl, Slot::OneSea][rng.gen_range(0..4)]
}

pub fn random_bits<R: Rng>(rng: &mut R) -> ParamBits {
    std::array::from_fn(|_| random_slot(rng))
}

/// Small CNN touching every layer type.
pub fn small_cnn() -> Arch {
    Arch {
        input_shape: [2, 4, 4],
        layers: vec![
            LayerSpec::Conv2d { out_channels: 3 },
            LayerSpec::Relu,
            LayerSpec::AvgPool2x2,
            LayerSpec::Linear { out_features: 3 },
            LayerSpec::SoftmaxScore,
        ],
    }
}

fn ce_loss(m: &FloatModel, x: &[f64], label: usize) -> f64 {
    let z = m.logits(x).unwrap();
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln() - z[label]
}

/// Norm-wise relative error between the analytic gradient and central
/// differences over all weights and the input.
pub fn fd_relative_error(m: &FloatModel, x: &[f64], label: usize) -> f64 {
    let h = 1e-5;
    let g = m.grad(x, label).unwrap();
    let (mut num, mut den) = (0.0f64, 0.0f64);
    let mut acc = |fd: f64, an: f64| {
        num += (fd - an).powi(2);
        den += fd.powi(2).max(an.powi(2));
    };
    for l in 0..m.num_weighted() {
        for i in 0..m.weights(l).len() {
            let (mut a, mut b) = (m.clone(), m.clone());
            a.weights_mut(l)[i] += h;
            b.weights_mut(l)[i] -= h;
            acc((ce_loss(&a, x, label) - ce_loss(&b, x, label)) / (2.0 * h), g.weights[l][i]);
        }
    }
    for i in 0..x.len() {
        let (mut a, mut b) = (x.to_vec(), x.to_vec());
        a[i] += h;
        b[i] -= h;
        acc((ce_loss(m, &a, label) - ce_loss(m, &b, label)) / (2.0 * h), g.input[i]);
    }
    (num / den.max(1e-30)).sqrt()
}

/// Random small model with random exponents and either a perceptron or a
/// conv topology.
pub fn random_quant_model<R: Rng>(rng: &mut R) -> QuantModel {
    let arch = if rng.gen_bool(0.5) {
        let depth = rng.gen_range(1..=3);
        let widths: Vec<usize> = (0..depth).map(|i| rng.gen_range(if i + 1 == depth { 2 } else { 1 }..=6)).collect();
        Arch::perceptron([1, 1, rng.gen_range(1..=8)], &widths)
    } else {
        Arch {
            input_shape: [rng.gen_range(1..=2), 4, 4],
            layers: vec![
                LayerSpec::Conv2d { out_channels: rng.gen_range(1..=3) },
                LayerSpec::Relu,
                LayerSpec::AvgPool2x2,
                LayerSpec::Linear { out_features: rng.gen_range(2..=4) },
                LayerSpec::SoftmaxScore,
            ],
        }
    };
    let mut shapes = arch.weight_shapes().unwrap().into_iter();
    let input_dec = rng.gen_range(-3..=3);
    let mut dec = input_dec;
    let layers = arch
        .layers
        .iter()
        .map(|spec| match spec {
            LayerSpec::Linear { .. } | LayerSpec::Conv2d { .. } => {
                let shape = shapes.next().unwrap();
                let n = shape.iter().product();
                let values = (0..n).map(|_| rng.gen::<i8>()).collect();
                let weights = QTensor::new(values, shape, rng.gen_range(-8..=8)).unwrap();
                let in_dec = dec;
                dec = rng.gen_range(-8..=8);
                if matches!(spec, LayerSpec::Linear { .. }) {
                    QLayer::Linear { weights, in_dec, out_dec: dec }
                } else {
                    QLayer::Conv2d { weights, in_dec, out_dec: dec }
                }
            }
            LayerSpec::Relu => QLayer::Relu,
            LayerSpec::AvgPool2x2 => QLayer::AvgPool2x2,
            LayerSpec::SoftmaxScore => QLayer::SoftmaxScore,
        })
        .collect();
    QuantModel::new(arch.input_shape, input_dec, layers).unwrap()
}

pub fn random_knowledge<R: Rng>(rng: &mut R) -> BitKnowledge {
    let sizes: Vec<usize> = (0..rng.gen_range(1..=4)).map(|_| rng.gen_range(0..=40)).collect();
    let total = sizes.iter().sum();
    let mut k = BitKnowledge::from_parts(sizes, (0..total).map(|_| random_bits(rng)).collect()).unwrap();
    k.inputs_consumed = rng.gen();
    k.probes_executed = rng.gen();
    k
}

pub fn random_dataset<R: Rng>(rng: &mut R) -> Dataset {
    let shape = [rng.gen_range(1..=3), rng.gen_range(1..=5), rng.gen_range(1..=5)];
    let n = rng.gen_range(0..=6);
    let per: usize = shape.iter().product();
    let images = (0..n * per).map(|_| rng.gen::<i8>()).collect();
    let classes = rng.gen_range(1..=12);
    let labels = if rng.gen_bool(0.5) { (0..n).map(|_| rng.gen_range(0..classes) as u8).collect() } else { Vec::new() };
    let split = [Split::Train, Split::Test, Split::Attack][rng.gen_range(0..3)];
    let prov = [Provenance::Mnist, Provenance::Cifar10, Provenance::Random, Provenance::Ga, Provenance::TestSet, Provenance::Synthetic]
        [rng.gen_range(0..6)];
    Dataset::new(shape, images, labels, classes, split, prov).unwrap()
}
