use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::arch::{Arch, LayerSpec};
use crate::engine::ops::{KERNEL, PAD};
use crate::engine::QuantModel;
use crate::error::{Error, Result};

/// Real-valued model with the same topology as a [`QuantModel`]. The final
/// softmax layer passes logits through unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatModel {
    arch: Arch,
    weights: Vec<Vec<f64>>,
    shapes: Vec<[usize; 3]>,
}

impl FloatModel {
    pub fn new(arch: Arch, weights: Vec<Vec<f64>>) -> Result<Self> {
        let expected = arch.param_counts()?;
        if expected.len() != weights.len() {
            return Err(Error::shape(format!("{} weighted layers", expected.len()), weights.len()));
        }
        for (l, (w, &n)) in weights.iter().zip(&expected).enumerate() {
            if w.len() != n {
                return Err(Error::shape(format!("{n} weights in layer {l}"), w.len()));
            }
            if let Some(i) = w.iter().position(|v| !v.is_finite()) {
                return Err(Error::validation(format!("non-finite weight L{l}:{i}")));
            }
        }
        let shapes = arch.activation_shapes()?;
        Ok(Self { arch, weights, shapes })
    }

    /// He-normal initialization, deterministic per seed.
    pub fn init(arch: &Arch, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = arch
            .weight_shapes()?
            .iter()
            .map(|s| {
                let n: usize = s.iter().product();
                let fan_in = n / s[0];
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                (0..n).map(|_| normal.sample(&mut rng)).collect()
            })
            .collect();
        Self::new(arch.clone(), weights)
    }

    /// Dequantized copy of a quantized model.
    pub fn from_quant(q: &QuantModel) -> Result<Self> {
        let weights = (0..q.num_weighted()).map(|l| q.weights(l).dequantize()).collect();
        Self::new(q.arch().clone(), weights)
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn num_weighted(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self, ordinal: usize) -> &[f64] {
        &self.weights[ordinal]
    }

    pub fn weights_mut(&mut self, ordinal: usize) -> &mut [f64] {
        &mut self.weights[ordinal]
    }

    pub fn all_weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    pub fn input_len(&self) -> usize {
        self.arch.input_len()
    }

    pub fn num_classes(&self) -> usize {
        self.shapes.last().map_or(0, |s| s.iter().product())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_len() {
            return Err(Error::shape(format!("{} input values", self.input_len()), x.len()));
        }
        Ok(())
    }

    /// Activations entering each layer followed by the logits.
    pub fn trace(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.check_input(x)?;
        let mut acts = Vec::with_capacity(self.arch.layers.len() + 1);
        acts.push(x.to_vec());
        let mut w = self.weights.iter();
        for (i, layer) in self.arch.layers.iter().enumerate() {
            let a = acts.last().expect("input pushed");
            let shape = self.shapes[i];
            let out = match layer {
                LayerSpec::Linear { out_features } => linear(a, w.next().expect("weights"), *out_features),
                LayerSpec::Conv2d { out_channels } => conv(a, shape, w.next().expect("weights"), *out_channels),
                LayerSpec::Relu => a.iter().map(|v| v.max(0.0)).collect(),
                LayerSpec::AvgPool2x2 => pool(a, shape),
                LayerSpec::SoftmaxScore => a.clone(),
            };
            acts.push(out);
        }
        Ok(acts)
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.trace(x)?.pop().expect("non-empty trace"))
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.logits(x)?))
    }

    /// Cross-entropy loss and exact gradients with respect to every weight
    /// and the input.
    pub fn grad(&self, x: &[f64], label: usize) -> Result<Gradients> {
        let mut g = Gradients::zeros(self);
        g.loss = self.accumulate_grad(x, label, 1.0, &mut g.weights, Some(&mut g.input))?.0;
        Ok(g)
    }

    /// Adds `scale * dL/dW` into `acc`; returns the unscaled loss and the
    /// predicted label.
    pub(crate) fn accumulate_grad(
        &self,
        x: &[f64],
        label: usize,
        scale: f64,
        acc: &mut [Vec<f64>],
        input_grad: Option<&mut Vec<f64>>,
    ) -> Result<(f64, usize)> {
        let k = self.num_classes();
        if label >= k {
            return Err(Error::validation(format!("label {label} outside [0, {k})")));
        }
        let acts = self.trace(x)?;
        let logits = acts.last().expect("logits");
        let p = softmax(logits);
        let predicted = argmax(logits);
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let loss = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln() - logits[label];
        let mut delta: Vec<f64> = p.iter().map(|v| v * scale).collect();
        delta[label] -= scale;
        let mut ordinal = self.weights.len();
        for (i, layer) in self.arch.layers.iter().enumerate().rev() {
            let input = &acts[i];
            let shape = self.shapes[i];
            let need_dx = i > 0 || input_grad.is_some();
            delta = match layer {
                LayerSpec::Linear { .. } => {
                    ordinal -= 1;
                    linear_back(input, &self.weights[ordinal], &delta, &mut acc[ordinal], need_dx)
                }
                LayerSpec::Conv2d { out_channels } => {
                    ordinal -= 1;
                    conv_back(input, shape, &self.weights[ordinal], *out_channels, &delta, &mut acc[ordinal], need_dx)
                }
                LayerSpec::Relu => delta.iter().zip(input).map(|(d, &a)| if a > 0.0 { *d } else { 0.0 }).collect(),
                LayerSpec::AvgPool2x2 => pool_back(&delta, shape),
                LayerSpec::SoftmaxScore => delta,
            };
        }
        if let Some(g) = input_grad {
            for (gi, d) in g.iter_mut().zip(&delta) {
                *gi += d;
            }
        }
        Ok((loss, predicted))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub loss: f64,
    pub weights: Vec<Vec<f64>>,
    pub input: Vec<f64>,
}

impl Gradients {
    pub fn zeros(model: &FloatModel) -> Self {
        Self {
            loss: 0.0,
            weights: model.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            input: vec![0.0; model.input_len()],
        }
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn linear(x: &[f64], w: &[f64], n_out: usize) -> Vec<f64> {
    let n_in = x.len();
    (0..n_out)
        .map(|o| w[o * n_in..(o + 1) * n_in].iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

fn linear_back(x: &[f64], w: &[f64], dy: &[f64], dw: &mut [f64], need_dx: bool) -> Vec<f64> {
    let n_in = x.len();
    let mut dx = if need_dx { vec![0.0; n_in] } else { Vec::new() };
    for (o, &d) in dy.iter().enumerate() {
        if d == 0.0 {
            continue;
        }
        let row = o * n_in..(o + 1) * n_in;
        for (g, &xi) in dw[row.clone()].iter_mut().zip(x) {
            *g += d * xi;
        }
        if need_dx {
            for (dxi, &wi) in dx.iter_mut().zip(&w[row]) {
                *dxi += d * wi;
            }
        }
    }
    dx
}

/// Output rows `oy` whose 5-tap window reads input row `y`, clipped to bounds.
fn taps(o: usize, n: usize) -> (usize, usize) {
    let lo = PAD.saturating_sub(o);
    let hi = (n + PAD - o).min(KERNEL);
    (lo, hi)
}

fn conv(x: &[f64], [c_in, h, w]: [usize; 3], wt: &[f64], c_out: usize) -> Vec<f64> {
    let mut out = vec![0.0; c_out * h * w];
    let plane = h * w;
    for co in 0..c_out {
        for ci in 0..c_in {
            let kbase = (co * c_in + ci) * KERNEL * KERNEL;
            let xin = &x[ci * plane..(ci + 1) * plane];
            for oy in 0..h {
                let (ky0, ky1) = taps(oy, h);
                for ox in 0..w {
                    let (kx0, kx1) = taps(ox, w);
                    let mut s = 0.0;
                    for ky in ky0..ky1 {
                        let iy = oy + ky - PAD;
                        let krow = &wt[kbase + ky * KERNEL..kbase + ky * KERNEL + KERNEL];
                        let xrow = &xin[iy * w..(iy + 1) * w];
                        for kx in kx0..kx1 {
                            s += krow[kx] * xrow[ox + kx - PAD];
                        }
                    }
                    out[co * plane + oy * w + ox] += s;
                }
            }
        }
    }
    out
}

fn conv_back(
    x: &[f64],
    [c_in, h, w]: [usize; 3],
    wt: &[f64],
    c_out: usize,
    dy: &[f64],
    dw: &mut [f64],
    need_dx: bool,
) -> Vec<f64> {
    let plane = h * w;
    let mut dx = if need_dx { vec![0.0; c_in * plane] } else { Vec::new() };
    for co in 0..c_out {
        let dyp = &dy[co * plane..(co + 1) * plane];
        for ci in 0..c_in {
            let kbase = (co * c_in + ci) * KERNEL * KERNEL;
            let xin = &x[ci * plane..(ci + 1) * plane];
            for oy in 0..h {
                let (ky0, ky1) = taps(oy, h);
                for ox in 0..w {
                    let d = dyp[oy * w + ox];
                    if d == 0.0 {
                        continue;
                    }
                    let (kx0, kx1) = taps(ox, w);
                    for ky in ky0..ky1 {
                        let iy = oy + ky - PAD;
                        for kx in kx0..kx1 {
                            let ix = ox + kx - PAD;
                            let k = kbase + ky * KERNEL + kx;
                            dw[k] += d * xin[iy * w + ix];
                            if need_dx {
                                dx[ci * plane + iy * w + ix] += d * wt[k];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

fn pool(x: &[f64], [c, h, w]: [usize; 3]) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let p = &x[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let (y, xx) = (2 * oy, 2 * ox);
                out.push(0.25 * (p[y * w + xx] + p[y * w + xx + 1] + p[(y + 1) * w + xx] + p[(y + 1) * w + xx + 1]));
            }
        }
    }
    out
}

fn pool_back(dy: &[f64], [c, h, w]: [usize; 3]) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut dx = vec![0.0; c * h * w];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let d = 0.25 * dy[ch * oh * ow + oy * ow + ox];
                for (dy_, dx_) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    dx[ch * h * w + (2 * oy + dy_) * w + 2 * ox + dx_] = d;
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small_cnn() -> Arch {
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

    /// Norm-wise relative error of the analytic gradient against central
    /// differences, over all weights and the input.
    fn fd_error(m: &FloatModel, x: &[f64], label: usize) -> f64 {
        let h = 1e-5;
        let g = m.grad(x, label).unwrap();
        let loss = |m: &FloatModel, x: &[f64]| {
            let p = softmax(&m.logits(x).unwrap());
            -p[label].ln()
        };
        let (mut num, mut den) = (0.0f64, 0.0f64);
        for l in 0..m.num_weighted() {
            for i in 0..m.weights(l).len() {
                let mut a = m.clone();
                a.weights_mut(l)[i] += h;
                let mut b = m.clone();
                b.weights_mut(l)[i] -= h;
                let fd = (loss(&a, x) - loss(&b, x)) / (2.0 * h);
                num += (fd - g.weights[l][i]).powi(2);
                den += fd.powi(2).max(g.weights[l][i].powi(2));
            }
        }
        for i in 0..x.len() {
            let mut a = x.to_vec();
            a[i] += h;
            let mut b = x.to_vec();
            b[i] -= h;
            let fd = (loss(m, &a) - loss(m, &b)) / (2.0 * h);
            num += (fd - g.input[i]).powi(2);
            den += fd.powi(2).max(g.input[i].powi(2));
        }
        (num / den.max(1e-30)).sqrt()
    }

    #[test]
    fn finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for (arch, trials) in [(Arch::perceptron([1, 1, 6], &[5, 4, 3]), 10), (small_cnn(), 5)] {
            for t in 0..trials {
                let m = FloatModel::init(&arch, t).unwrap();
                let x: Vec<f64> = (0..m.input_len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let e = fd_error(&m, &x, t as usize % 3);
                assert!(e < 1e-4, "relative error {e}");
            }
        }
    }

    #[test]
    fn zero_input_zero_first_layer_grad() {
        let m = FloatModel::init(&Arch::perceptron([1, 1, 5], &[4, 3]), 1).unwrap();
        let g = m.grad(&[0.0; 5], 1).unwrap();
        assert!(g.weights[0].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_matches_naive() {
        let arch = small_cnn();
        let m = FloatModel::init(&arch, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<f64> = (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let out = conv(&x, [2, 4, 4], m.weights(0), 3);
        for co in 0..3 {
            for oy in 0..4i64 {
                for ox in 0..4i64 {
                    let mut s = 0.0;
                    for ci in 0..2 {
                        for ky in 0..5i64 {
                            for kx in 0..5i64 {
                                let (iy, ix) = (oy + ky - 2, ox + kx - 2);
                                if (0..4).contains(&iy) && (0..4).contains(&ix) {
                                    s += m.weights(0)[(co * 2 + ci) * 25 + ky as usize * 5 + kx as usize]
                                        * x[ci * 16 + iy as usize * 4 + ix as usize];
                                }
                            }
                        }
                    }
                    assert!((s - out[co * 16 + oy as usize * 4 + ox as usize]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        let arch = Arch::perceptron([1, 1, 3], &[2]);
        assert!(FloatModel::new(arch.clone(), vec![vec![0.0; 5]]).is_err());
        assert!(FloatModel::new(arch.clone(), vec![vec![f64::NAN; 6]]).is_err());
        assert!(FloatModel::new(arch, vec![vec![0.0; 6]]).is_ok());
    }
}
