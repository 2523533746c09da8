use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::Arch;
use crate::crafter::BlackBox;
use crate::data::Dataset;
use crate::engine::{QLayer, QuantModel};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::qtensor::{step, QTensor};
use crate::sea::{projected_range, BitKnowledge};

use super::float::FloatModel;
use super::sgd::{train_loop, Regularizer, TrainConfig, TrainReport};

/// Integer interval a parameter is known to lie in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Range {
    pub min: i8,
    pub max: i8,
}

impl Range {
    pub fn is_frozen(self) -> bool {
        self.min == self.max
    }

    fn midpoint(self) -> f64 {
        (self.min as f64 + self.max as f64) / 2.0
    }
}

/// Per-parameter projected ranges with the dequantization step of each layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSet {
    ranges: Vec<Vec<Option<Range>>>,
    steps: Vec<f64>,
}

impl ConstraintSet {
    /// Ranges from recovered bits; parameters with no known bit stay free.
    pub fn from_knowledge(k: &BitKnowledge, weight_decs: &[i32]) -> Result<Self> {
        if weight_decs.len() != k.layer_sizes().len() {
            return Err(Error::shape(format!("{} weight exponents", k.layer_sizes().len()), weight_decs.len()));
        }
        let ranges = (0..weight_decs.len())
            .map(|l| {
                k.layer_slots(l)
                    .iter()
                    .map(|bits| {
                        let (min, max) = projected_range(bits);
                        ((min, max) != (i8::MIN, i8::MAX)).then_some(Range { min, max })
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            ranges,
            steps: weight_decs.iter().map(|&d| step(d)).collect(),
        })
    }

    /// No constraints at all.
    pub fn unconstrained(arch: &Arch, weight_decs: &[i32]) -> Result<Self> {
        let counts = arch.param_counts()?;
        if weight_decs.len() != counts.len() {
            return Err(Error::shape(format!("{} weight exponents", counts.len()), weight_decs.len()));
        }
        Ok(Self {
            ranges: counts.iter().map(|&n| vec![None; n]).collect(),
            steps: weight_decs.iter().map(|&d| step(d)).collect(),
        })
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        self.ranges.iter().map(Vec::len).collect()
    }

    pub fn range(&self, layer: usize, index: usize) -> Option<Range> {
        self.ranges[layer][index]
    }

    /// Range in the real domain.
    pub fn real_range(&self, layer: usize, index: usize) -> Option<(f64, f64)> {
        let s = self.steps[layer];
        self.range(layer, index).map(|r| (r.min as f64 * s, r.max as f64 * s))
    }

    pub fn is_frozen(&self, layer: usize, index: usize) -> bool {
        self.range(layer, index).is_some_and(Range::is_frozen)
    }

    pub fn constrained(&self) -> usize {
        self.ranges.iter().flatten().filter(|r| r.is_some()).count()
    }

    pub fn frozen(&self) -> usize {
        self.ranges.iter().flatten().filter(|r| r.is_some_and(Range::is_frozen)).count()
    }

    fn check(&self, model: &FloatModel) -> Result<()> {
        let sizes: Vec<usize> = model.all_weights().iter().map(Vec::len).collect();
        if sizes != self.layer_sizes() {
            return Err(Error::validation(format!(
                "constraints cover layers {:?}, model has {sizes:?}",
                self.layer_sizes()
            )));
        }
        Ok(())
    }

    /// Clips every constrained parameter into its range.
    pub fn clip(&self, model: &mut FloatModel) {
        for l in 0..self.ranges.len() {
            let w = model.weights_mut(l);
            for (i, v) in w.iter_mut().enumerate() {
                if let Some((lo, hi)) = self.real_range(l, i) {
                    *v = v.clamp(lo, hi);
                }
            }
        }
    }

    pub fn satisfied_by(&self, model: &FloatModel) -> bool {
        (0..self.ranges.len()).all(|l| {
            model.weights(l).iter().enumerate().all(|(i, &v)| {
                self.real_range(l, i).is_none_or(|(lo, hi)| lo <= v && v <= hi)
            })
        })
    }
}

/// Cluster centres: parameters of one layer sharing a projected range form a
/// cluster whose centre starts at the range midpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanClusters {
    /// Per layer, per parameter: cluster index or `None` when unconstrained.
    member_of: Vec<Vec<Option<usize>>>,
    /// Per layer, per cluster: current mean in the real domain.
    means: Vec<Vec<f64>>,
}

impl MeanClusters {
    pub fn new(c: &ConstraintSet) -> Self {
        let mut member_of = Vec::with_capacity(c.ranges.len());
        let mut means = Vec::with_capacity(c.ranges.len());
        for (l, layer) in c.ranges.iter().enumerate() {
            let mut ids: BTreeMap<Range, usize> = BTreeMap::new();
            let mut centre = Vec::new();
            let members = layer
                .iter()
                .map(|r| {
                    r.map(|r| {
                        *ids.entry(r).or_insert_with(|| {
                            centre.push(r.midpoint() * c.steps[l]);
                            centre.len() - 1
                        })
                    })
                })
                .collect();
            member_of.push(members);
            means.push(centre);
        }
        Self { member_of, means }
    }

    pub fn mean(&self, layer: usize, index: usize) -> Option<f64> {
        self.member_of[layer][index].map(|c| self.means[layer][c])
    }

    pub fn cluster_count(&self, layer: usize) -> usize {
        self.means[layer].len()
    }

    /// Sets every centre to the mean of its members' current values.
    pub fn update(&mut self, model: &FloatModel) {
        for (l, members) in self.member_of.iter().enumerate() {
            let n = self.means[l].len();
            let mut sum = vec![0.0; n];
            let mut count = vec![0usize; n];
            for (&v, c) in model.weights(l).iter().zip(members) {
                if let Some(c) = *c {
                    sum[c] += v;
                    count[c] += 1;
                }
            }
            for (m, (s, k)) in self.means[l].iter_mut().zip(sum.iter().zip(&count)) {
                if *k > 0 {
                    *m = s / *k as f64;
                }
            }
        }
    }

    /// `lambda * sum_l ||theta_l - mean_l||_2` over constrained parameters,
    /// adding its gradient to `grads` when given.
    pub fn penalty(&self, model: &FloatModel, lambda: f64, mut grads: Option<&mut [Vec<f64>]>) -> f64 {
        if lambda == 0.0 {
            return 0.0;
        }
        let mut total = 0.0;
        for (l, members) in self.member_of.iter().enumerate() {
            let w = model.weights(l);
            let norm = members
                .iter()
                .zip(w)
                .filter_map(|(c, &v)| c.map(|c| (v - self.means[l][c]).powi(2)))
                .sum::<f64>()
                .sqrt();
            total += lambda * norm;
            if let (Some(g), true) = (grads.as_deref_mut(), norm > 0.0) {
                for (i, c) in members.iter().enumerate() {
                    if let Some(c) = *c {
                        g[l][i] += lambda * (w[i] - self.means[l][c]) / norm;
                    }
                }
            }
        }
        total
    }
}

/// Mean cross-entropy of a batch plus the clustering penalty, with gradients.
/// Frozen parameters get a zero gradient.
pub fn loss_sub(
    model: &FloatModel,
    batch: &[(Vec<f64>, usize)],
    constraints: &ConstraintSet,
    clusters: &MeanClusters,
    lambda: f64,
) -> Result<(f64, Vec<Vec<f64>>)> {
    constraints.check(model)?;
    if batch.is_empty() {
        return Err(Error::validation("empty batch"));
    }
    let mut grads: Vec<Vec<f64>> = model.all_weights().iter().map(|w| vec![0.0; w.len()]).collect();
    let scale = 1.0 / batch.len() as f64;
    let mut ce = 0.0;
    for (x, y) in batch {
        ce += model.accumulate_grad(x, *y, scale, &mut grads, None)?.0 * scale;
    }
    let penalty = clusters.penalty(model, lambda, Some(&mut grads));
    for (l, g) in grads.iter_mut().enumerate() {
        for (i, v) in g.iter_mut().enumerate() {
            if constraints.is_frozen(l, i) {
                *v = 0.0;
            }
        }
    }
    Ok((ce + penalty, grads))
}

struct Clustering<'c> {
    constraints: &'c ConstraintSet,
    clusters: MeanClusters,
    lambda: f64,
}

impl Regularizer for Clustering<'_> {
    fn before_batch(&mut self, model: &FloatModel) {
        self.clusters.update(model);
    }

    fn penalty(&self, model: &FloatModel, grads: &mut [Vec<f64>]) -> f64 {
        self.clusters.penalty(model, self.lambda, Some(grads))
    }

    fn is_frozen(&self, layer: usize, index: usize) -> bool {
        self.constraints.is_frozen(layer, index)
    }

    fn after_epoch(&mut self, model: &mut FloatModel) {
        self.constraints.clip(model);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubstituteConfig {
    pub train: TrainConfig,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Fraction of the training pool available to the adversary.
    #[serde(default = "default_fraction")]
    pub data_fraction: f64,
}

fn default_lambda() -> f64 {
    1e-4
}

fn default_fraction() -> f64 {
    0.08
}

impl SubstituteConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            train: TrainConfig::new(seed),
            lambda: default_lambda(),
            data_fraction: default_fraction(),
        }
    }
}

/// Initial substitute: He init for free parameters, uniform inside the range
/// for constrained ones and the exact value for frozen ones.
pub fn init_substitute(arch: &Arch, constraints: &ConstraintSet, seed: u64) -> Result<FloatModel> {
    let mut model = FloatModel::init(arch, seed)?;
    constraints.check(&model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    for l in 0..model.num_weighted() {
        let w = model.weights_mut(l);
        for (i, v) in w.iter_mut().enumerate() {
            if let Some((lo, hi)) = constraints.real_range(l, i) {
                *v = if lo == hi { lo } else { rng.gen_range(lo..=hi) };
            }
        }
    }
    Ok(model)
}

/// Constrained training from an initialized substitute on labeled data.
pub fn train_constrained(
    model: &mut FloatModel,
    data: &Dataset,
    constraints: &ConstraintSet,
    lambda: f64,
    config: &TrainConfig,
) -> Result<TrainReport> {
    constraints.check(model)?;
    let mut reg = Clustering {
        constraints,
        clusters: MeanClusters::new(constraints),
        lambda,
    };
    train_loop(model, data, config, Some(&mut reg))
}

#[derive(Debug, Clone)]
pub struct SubstituteOutcome {
    pub model: FloatModel,
    pub report: TrainReport,
    pub constraints: ConstraintSet,
    pub train_size: usize,
}

/// Draws the adversary's data fraction from `pool`, labels it with the
/// victim's predictions and trains a constrained substitute.
pub fn train_substitute<B: BlackBox>(
    victim: &B,
    arch: &Arch,
    knowledge: &BitKnowledge,
    weight_decs: &[i32],
    pool: &Dataset,
    config: &SubstituteConfig,
) -> Result<SubstituteOutcome> {
    let sizes = arch.param_counts()?;
    if sizes != knowledge.layer_sizes() {
        return Err(Error::validation(format!(
            "knowledge covers layers {:?}, architecture has {sizes:?}",
            knowledge.layer_sizes()
        )));
    }
    let constraints = ConstraintSet::from_knowledge(knowledge, weight_decs)?;
    let subset = pool.sample_fraction(config.data_fraction, config.train.seed)?;
    let labels = victim_labels(victim, &subset, config.train.execution)?;
    let data = subset.relabeled(labels)?;
    let mut model = init_substitute(arch, &constraints, config.train.seed)?;
    let report = train_constrained(&mut model, &data, &constraints, config.lambda, &config.train)?;
    Ok(SubstituteOutcome {
        model,
        report,
        constraints,
        train_size: data.len(),
    })
}

/// Victim's predicted label for every image.
pub fn victim_labels<B: BlackBox>(victim: &B, data: &Dataset, exec: Execution) -> Result<Vec<u8>> {
    let idx: Vec<usize> = (0..data.len()).collect();
    exec.map_slice(&idx, |&i| victim.query(data.image(i)).map(|p| p.argmax() as u8))
        .into_iter()
        .collect()
}

/// Quantized model whose known bits are fixed and unknown bits random, using
/// `layout` only for architecture and exponents.
pub fn no_training_baseline(layout: &QuantModel, knowledge: &BitKnowledge, seed: u64) -> Result<QuantModel> {
    knowledge.check_model(layout)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ordinal = 0;
    let layers = layout
        .layers()
        .iter()
        .map(|layer| -> Result<QLayer> {
            let Some(w) = layer.weights() else {
                return Ok(layer.clone());
            };
            let values = knowledge
                .layer_slots(ordinal)
                .iter()
                .map(|bits| {
                    let mut byte = 0u8;
                    for (b, s) in bits.iter().enumerate() {
                        let bit = s.value().unwrap_or_else(|| rng.gen_bool(0.5));
                        byte |= u8::from(bit) << (7 - b);
                    }
                    byte as i8
                })
                .collect();
            ordinal += 1;
            let weights = QTensor::new(values, w.shape().to_vec(), w.dec())?;
            let (in_dec, out_dec) = layer.decs().expect("weighted layer");
            Ok(match layer {
                QLayer::Conv2d { .. } => QLayer::Conv2d { weights, in_dec, out_dec },
                _ => QLayer::Linear { weights, in_dec, out_dec },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    QuantModel::new(layout.input_shape(), layout.input_dec(), layers)
}
