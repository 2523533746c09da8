//! Accuracy, fidelity and accuracy-under-attack metrics, and the randomized
//! feature-map scaling countermeasure with its expectation analysis.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::LayerSpec;
use crate::data::{Dataset, INPUT_DEC};
use crate::engine::{PredictionVector, QLayer, QuantModel};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::fault::{bit_of, faulted_infer_hooked, FaultSpec};
use crate::qtensor::{quantize_value, saturate};
use crate::sea::{BitKnowledge, Slot};
use crate::train::{pgd_attack, FloatModel};

/// Anything that assigns a label to a quantized image.
pub trait Classifier: Sync {
    fn classify(&self, image: &[i8]) -> Result<usize>;
}

impl Classifier for QuantModel {
    fn classify(&self, image: &[i8]) -> Result<usize> {
        Ok(self.infer(image)?.argmax())
    }
}

/// Float models see the dequantized image.
impl Classifier for FloatModel {
    fn classify(&self, image: &[i8]) -> Result<usize> {
        self.predict(&crate::qtensor::dequantize(image, INPUT_DEC))
    }
}

fn predictions<C: Classifier + ?Sized>(model: &C, data: &Dataset, exec: Execution) -> Result<Vec<usize>> {
    if data.is_empty() {
        return Err(Error::validation("dataset is empty"));
    }
    exec.map_range(data.len(), |i| model.classify(data.image(i))).into_iter().collect()
}

fn percent(hits: usize, total: usize) -> f64 {
    100.0 * hits as f64 / total as f64
}

/// Top-1 accuracy in percent.
pub fn accuracy<C: Classifier + ?Sized>(model: &C, data: &Dataset, exec: Execution) -> Result<f64> {
    if !data.is_labeled() {
        return Err(Error::validation("accuracy needs a labeled dataset"));
    }
    let p = predictions(model, data, exec)?;
    Ok(percent((0..data.len()).filter(|&i| p[i] == data.label(i)).count(), data.len()))
}

/// Percentage of inputs on which both models predict the same label.
pub fn fidelity<A: Classifier + ?Sized, B: Classifier + ?Sized>(
    a: &A,
    b: &B,
    data: &Dataset,
    exec: Execution,
) -> Result<f64> {
    let pa = predictions(a, data, exec)?;
    let pb = predictions(b, data, exec)?;
    Ok(percent(pa.iter().zip(&pb).filter(|(x, y)| x == y).count(), data.len()))
}

/// Victim accuracy on l-inf PGD examples crafted against the substitute and
/// requantized to the input domain.
pub fn aua(
    victim: &QuantModel,
    substitute: &FloatModel,
    data: &Dataset,
    eps: f64,
    steps: usize,
    exec: Execution,
) -> Result<f64> {
    if !data.is_labeled() || data.is_empty() {
        return Err(Error::validation("AUA needs a non-empty labeled dataset"));
    }
    let hits = exec.map_range(data.len(), |i| -> Result<bool> {
        let adv = pgd_attack(substitute, &data.image_f64(i), data.label(i), eps, steps)?;
        let q: Vec<i8> = adv.iter().map(|&v| quantize_value(v, INPUT_DEC)).collect();
        Ok(victim.infer(&q)?.argmax() == data.label(i))
    });
    let hits = hits.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(percent(hits.iter().filter(|&&h| h).count(), data.len()))
}

/// Table-5-shaped metric row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub model: String,
    pub accuracy: f64,
    pub fidelity: f64,
    pub aua: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DefenseConfig {
    /// Weighted-layer ordinal whose output is scaled; `None` picks the last
    /// convolution.
    pub layer: Option<usize>,
    pub group_count: usize,
    pub channels_per_group: usize,
    pub alpha_min: f64,
    pub alpha_max: f64,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        Self { layer: None, group_count: 8, channels_per_group: 8, alpha_min: 0.9, alpha_max: 1.0 }
    }
}

impl DefenseConfig {
    /// Resolves the target layer and checks the channel count.
    /// Returns `(layer position, elements per channel)`.
    pub fn resolve(&self, model: &QuantModel) -> Result<(usize, usize)> {
        if !(self.alpha_min > 0.0 && self.alpha_min <= self.alpha_max && self.alpha_max.is_finite()) {
            return Err(Error::Config(format!("alpha range [{}, {}] invalid", self.alpha_min, self.alpha_max)));
        }
        let ordinal = match self.layer {
            Some(l) if l < model.num_weighted() => l,
            Some(l) => return Err(Error::Config(format!("weighted layer {l} out of range"))),
            None => (0..model.num_weighted())
                .rev()
                .find(|&l| matches!(model.layers()[model.weighted_layers()[l]], QLayer::Conv2d { .. }))
                .ok_or_else(|| Error::Config("model has no convolution; set the defended layer".into()))?,
        };
        let pos = model.weighted_layers()[ordinal];
        let [c, h, w] = model.activation_shape(pos + 1);
        let channels = match model.layers()[pos].spec() {
            LayerSpec::Conv2d { .. } => c,
            _ => c * h * w,
        };
        if self.group_count * self.channels_per_group != channels {
            return Err(Error::Config(format!(
                "{} groups of {} channels do not cover the {channels} channels of weighted layer {ordinal}",
                self.group_count, self.channels_per_group
            )));
        }
        Ok((pos, model.activation_shape(pos + 1).iter().product::<usize>() / channels))
    }

    fn draw_scales<R: Rng>(&self, rng: &mut R) -> Vec<i32> {
        (0..self.group_count)
            .map(|_| {
                let a = if self.alpha_min == self.alpha_max { self.alpha_min } else { rng.gen_range(self.alpha_min..=self.alpha_max) };
                (a * 256.0).round() as i32
            })
            .collect()
    }
}

/// Fixed-point channel scaling: `(act * scale + 128) >> 8`, saturated.
fn scale_groups(acts: &mut [i8], scales: &[i32], group_len: usize) {
    for (chunk, &s) in acts.chunks_mut(group_len).zip(scales) {
        for a in chunk {
            *a = saturate(((*a as i64) * s as i64 + 128) >> 8);
        }
    }
}

/// Resolved defense bound to one model.
#[derive(Debug, Clone, Copy)]
pub struct Defense {
    config: DefenseConfig,
    position: usize,
    group_len: usize,
}

impl Defense {
    pub fn new(model: &QuantModel, config: DefenseConfig) -> Result<Self> {
        let (position, per_channel) = config.resolve(model)?;
        Ok(Self { config, position, group_len: per_channel * config.channels_per_group })
    }

    fn hook<R: Rng>(&self, rng: &mut R) -> impl FnMut(usize, &mut [i8]) + '_ {
        let scales = self.config.draw_scales(rng);
        move |i, acts| {
            if i == self.position {
                scale_groups(acts, &scales, self.group_len);
            }
        }
    }

    pub fn infer<R: Rng>(&self, model: &QuantModel, input: &[i8], rng: &mut R) -> Result<PredictionVector> {
        model.infer_hooked(input, &mut self.hook(rng))
    }

    pub fn faulted_infer<R: Rng>(
        &self,
        model: &QuantModel,
        input: &[i8],
        spec: &FaultSpec,
        rng: &mut R,
    ) -> Result<PredictionVector> {
        faulted_infer_hooked(model, input, spec, &mut self.hook(rng))
    }

    /// Mean score vector over `n` defended inferences.
    fn mean_scores<R: Rng>(
        &self,
        model: &QuantModel,
        input: &[i8],
        fault: Option<&FaultSpec>,
        n: usize,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        let mut sum = vec![0.0; model.num_classes()];
        for _ in 0..n {
            let p = match fault {
                Some(f) => self.faulted_infer(model, input, f, rng)?,
                None => self.infer(model, input, rng)?,
            };
            for (s, &v) in sum.iter_mut().zip(p.scores()) {
                *s += v as f64;
            }
        }
        Ok(sum.into_iter().map(|s| s / n as f64).collect())
    }
}

/// One inference with freshly drawn scaling factors.
pub fn randomized_infer<R: Rng>(
    model: &QuantModel,
    input: &[i8],
    config: &DefenseConfig,
    rng: &mut R,
) -> Result<PredictionVector> {
    Defense::new(model, *config)?.infer(model, input, rng)
}

fn task_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Accuracy of the defended model, one random draw per input.
pub fn defended_accuracy(
    model: &QuantModel,
    data: &Dataset,
    config: &DefenseConfig,
    seed: u64,
    exec: Execution,
) -> Result<f64> {
    if data.is_empty() || !data.is_labeled() {
        return Err(Error::validation("defended accuracy needs a non-empty labeled dataset"));
    }
    let d = Defense::new(model, *config)?;
    let hits = exec.map_range(data.len(), |i| -> Result<bool> {
        let mut rng = task_rng(seed, i as u64);
        Ok(d.infer(model, data.image(i), &mut rng)?.argmax() == data.label(i))
    });
    let hits = hits.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(percent(hits.iter().filter(|&&h| h).count(), data.len()))
}

/// Mean and population standard deviation of `|Y1 - Y2|` over labels and
/// inputs, where `Y1` and `Y2` each average `n` defended inferences.
pub fn expectation_delta(
    model: &QuantModel,
    inputs: &[Vec<i8>],
    n: usize,
    config: &DefenseConfig,
    seed: u64,
    exec: Execution,
) -> Result<(f64, f64)> {
    if n == 0 {
        return Err(Error::validation("N must be at least 1"));
    }
    if inputs.is_empty() {
        return Err(Error::validation("no inputs"));
    }
    let d = Defense::new(model, *config)?;
    let diffs = exec.map_range(inputs.len(), |i| -> Result<Vec<f64>> {
        let mut rng = task_rng(seed, i as u64);
        let a = d.mean_scores(model, &inputs[i], None, n, &mut rng)?;
        let b = d.mean_scores(model, &inputs[i], None, n, &mut rng)?;
        Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).collect())
    });
    let all: Vec<f64> = diffs.into_iter().collect::<Result<Vec<_>>>()?.concat();
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    let var = all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / all.len() as f64;
    Ok((mean, var.sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DefendedSeaConfig {
    pub seed: u64,
    /// Defended inferences averaged per observation.
    pub expectation: usize,
    /// Largest per-label score difference still read as "no change";
    /// `None` uses 0 for single inferences and 1.0 otherwise.
    pub threshold: Option<f64>,
    /// Number of `(parameter, bit)` probes sampled per input.
    pub probes: usize,
    pub bits: Vec<u8>,
    pub execution: Execution,
}

impl Default for DefendedSeaConfig {
    fn default() -> Self {
        Self { seed: 0, expectation: 1, threshold: None, probes: 200, bits: (0..8).collect(), execution: Execution::default() }
    }
}

impl DefendedSeaConfig {
    pub fn tau(&self) -> f64 {
        self.threshold.unwrap_or(if self.expectation <= 1 { 0.0 } else { 1.0 })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefendedSeaReport {
    pub expectation: usize,
    pub threshold: f64,
    pub probes: usize,
    /// Probes whose targeted bit is 1, where a set fault changes nothing.
    pub probes_on_ones: usize,
    pub zero_marks: usize,
    /// Zero marks on bits that are actually 1.
    pub false_zeros: usize,
    /// `false_zeros / probes_on_ones`.
    pub false_positive_rate: f64,
    /// Share of zero marks that are wrong.
    pub false_discovery_rate: f64,
    pub knowledge: BitKnowledge,
}

/// Bit-set SEA against the defended model. Each observation averages
/// `expectation` defended inferences; a bit is marked zero when some label's
/// mean score moves by more than the threshold. Probes are sampled since a
/// full sweep at large `expectation` is out of reach.
pub fn sea_under_defense(
    model: &QuantModel,
    attack_set: &[Vec<i8>],
    defense: &DefenseConfig,
    cfg: &DefendedSeaConfig,
) -> Result<DefendedSeaReport> {
    if cfg.expectation == 0 || cfg.bits.is_empty() || cfg.bits.iter().any(|&b| b > 7) {
        return Err(Error::Config("expectation must be positive and bits within 0..=7".into()));
    }
    let d = Defense::new(model, *defense)?;
    let tau = cfg.tau();
    let mut k = BitKnowledge::for_model(model);
    let slots = k.num_params() * cfg.bits.len();
    let (mut probes, mut ones, mut false_zeros) = (0, 0, 0);
    for (n, input) in attack_set.iter().enumerate() {
        let mut rng = task_rng(cfg.seed, n as u64);
        let picks: Vec<usize> = sample(&mut rng, slots, cfg.probes.min(slots)).into_vec();
        let base_seed: u64 = rng.gen();
        let reference = d.mean_scores(model, input, None, cfg.expectation, &mut rng)?;
        let results = cfg.execution.map_range(picks.len(), |j| -> Result<(usize, u8, bool, bool)> {
            let (global, bit) = (picks[j] / cfg.bits.len(), cfg.bits[picks[j] % cfg.bits.len()]);
            let (layer, param) = k.locate(global);
            let spec = FaultSpec::set(layer, param, bit);
            let mut prng = task_rng(base_seed, j as u64);
            let faulted = d.mean_scores(model, input, Some(&spec), cfg.expectation, &mut prng)?;
            let moved = faulted.iter().zip(&reference).any(|(a, b)| (a - b).abs() > tau);
            let is_one = bit_of(model.weights(layer).values()[param], bit);
            Ok((global, bit, moved, is_one))
        });
        for r in results {
            let (global, bit, moved, is_one) = r?;
            probes += 1;
            ones += is_one as usize;
            if moved {
                false_zeros += (is_one && k.slots()[global][bit as usize] != Slot::ZeroSea) as usize;
                k.mark_sea(global, bit, false);
            }
        }
    }
    let zero_marks = k.count(Slot::ZeroSea);
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(DefendedSeaReport {
        expectation: cfg.expectation,
        threshold: tau,
        probes,
        probes_on_ones: ones,
        zero_marks,
        false_zeros,
        false_positive_rate: ratio(false_zeros, ones),
        false_discovery_rate: ratio(false_zeros, zero_marks),
        knowledge: k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::Arch;
    use crate::data::{Provenance, Split};
    use crate::engine::random_model;

    fn tiny_cnn() -> QuantModel {
        let arch = Arch {
            input_shape: [1, 4, 4],
            layers: vec![
                LayerSpec::Conv2d { out_channels: 4 },
                LayerSpec::Relu,
                LayerSpec::AvgPool2x2,
                LayerSpec::Linear { out_features: 3 },
                LayerSpec::SoftmaxScore,
            ],
        };
        random_model(&arch, 60, 4).unwrap()
    }

    fn set(m: &QuantModel, n: usize, seed: u64) -> Dataset {
        let inputs = crate::crafter::random_inputs(n, m.input_len(), crate::crafter::ValueRange::PIXELS, seed).unwrap();
        let labels = inputs.iter().map(|x| m.infer(x).unwrap().argmax() as u8).collect();
        Dataset::new(m.input_shape(), inputs.concat(), labels, m.num_classes(), Split::Test, Provenance::Synthetic).unwrap()
    }

    struct Constant(usize);
    impl Classifier for Constant {
        fn classify(&self, _: &[i8]) -> Result<usize> {
            Ok(self.0)
        }
    }

    #[test]
    fn metric_oracles() {
        let m = tiny_cnn();
        let d = set(&m, 40, 1);
        assert_eq!(accuracy(&m, &d, Execution::Parallel).unwrap(), 100.0);
        assert_eq!(fidelity(&m, &m, &d, Execution::Sequential).unwrap(), 100.0);
        let balanced = Dataset::new([1, 1, 1], vec![0; 20], (0..20).map(|i| (i % 10) as u8).collect(), 10, Split::Test, Provenance::Synthetic).unwrap();
        assert_eq!(accuracy(&Constant(3), &balanced, Execution::Sequential).unwrap(), 10.0);
        assert_eq!(fidelity(&Constant(1), &Constant(2), &balanced, Execution::Sequential).unwrap(), 0.0);
        let empty = d.take(0);
        assert!(accuracy(&m, &empty, Execution::Sequential).is_err());
    }

    #[test]
    fn aua_without_budget_is_accuracy() {
        let m = tiny_cnn();
        let f = FloatModel::from_quant(&m).unwrap();
        let d = set(&m, 30, 2);
        let clean = accuracy(&m, &d, Execution::Sequential).unwrap();
        assert_eq!(aua(&m, &f, &d, 0.0, 40, Execution::Parallel).unwrap(), clean);
    }

    #[test]
    fn collapsed_alpha_is_identity() {
        let m = tiny_cnn();
        let cfg = DefenseConfig { group_count: 2, channels_per_group: 2, alpha_min: 1.0, alpha_max: 1.0, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for x in set(&m, 20, 3).inputs() {
            assert_eq!(randomized_infer(&m, &x, &cfg, &mut rng).unwrap(), m.infer(&x).unwrap());
        }
        let inputs = set(&m, 5, 4).inputs();
        assert_eq!(expectation_delta(&m, &inputs, 3, &cfg, 1, Execution::Sequential).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn fixed_point_scaling() {
        let mut a = vec![100i8, -100, 127, 1, 50, -128];
        scale_groups(&mut a, &[230, 256, 128], 2);
        // (100*230+128)>>8 = 90; (-100*230+128)>>8 = -90 (floor of -89.3)
        assert_eq!(a, vec![90, -90, 127, 1, 25, -64]);
    }

    #[test]
    fn config_must_cover_channels() {
        let m = tiny_cnn();
        assert!(Defense::new(&m, DefenseConfig::default()).is_err());
        let mlp = random_model(&Arch::perceptron([1, 1, 5], &[64, 3]), 5, 0).unwrap();
        assert!(Defense::new(&mlp, DefenseConfig::default()).is_err());
        assert!(Defense::new(&mlp, DefenseConfig { layer: Some(0), ..Default::default() }).is_ok());
        let bad = DefenseConfig { layer: Some(0), alpha_min: 1.1, ..Default::default() };
        assert!(Defense::new(&mlp, bad).is_err());
    }

    #[test]
    fn defense_off_sea_is_exact() {
        let m = random_model(&Arch::perceptron([1, 1, 6], &[4, 3]), 40, 9).unwrap();
        let inputs = crate::crafter::random_inputs(3, 6, crate::crafter::ValueRange::PIXELS, 2).unwrap();
        let off = DefenseConfig { layer: Some(0), group_count: 1, channels_per_group: 4, alpha_min: 1.0, alpha_max: 1.0 };
        let cfg = DefendedSeaConfig { probes: usize::MAX, ..Default::default() };
        let r = sea_under_defense(&m, &inputs, &off, &cfg).unwrap();
        assert_eq!(r.false_zeros, 0);
        let exact = crate::sea::run_campaign(&m, &inputs, &crate::sea::CampaignConfig::default()).unwrap();
        assert_eq!(r.knowledge.slots(), exact.knowledge.slots());
    }
}
