//! Attack-set construction: random sampling, certainty classification and a
//! black-box genetic algorithm steering predictions toward uncertain scores.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::engine::{PredictionVector, QuantModel};
use crate::error::{Error, Result};
use crate::exec::Execution;

/// Query-only access to a model.
pub trait BlackBox: Sync {
    fn query(&self, input: &[i8]) -> Result<PredictionVector>;
    fn input_len(&self) -> usize;
    fn num_classes(&self) -> usize;
}

impl BlackBox for QuantModel {
    fn query(&self, input: &[i8]) -> Result<PredictionVector> {
        self.infer(input)
    }

    fn input_len(&self) -> usize {
        QuantModel::input_len(self)
    }

    fn num_classes(&self) -> usize {
        QuantModel::num_classes(self)
    }
}

/// Inclusive value range for input coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValueRange {
    pub min: i8,
    pub max: i8,
}

impl ValueRange {
    pub const fn new(min: i8, max: i8) -> Self {
        Self { min, max }
    }

    /// Quantized image pixels.
    pub const PIXELS: Self = Self::new(0, 127);

    pub fn validate(self) -> Result<()> {
        if self.min > self.max {
            return Err(Error::validation(format!(
                "empty range [{}, {}]",
                self.min, self.max
            )));
        }
        Ok(())
    }

    fn contains(self, other: Self) -> bool {
        self.min <= other.min && other.max <= self.max
    }

    fn clip(self, v: i32) -> i8 {
        v.clamp(self.min as i32, self.max as i32) as i8
    }

    fn sample<R: Rng>(self, rng: &mut R) -> i8 {
        rng.gen_range(self.min..=self.max)
    }
}

/// `n` i.i.d. uniform inputs of length `len`.
pub fn random_inputs(n: usize, len: usize, range: ValueRange, seed: u64) -> Result<Vec<Vec<i8>>> {
    range.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| (0..len).map(|_| range.sample(&mut rng)).collect())
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Certainty {
    Certain,
    Uncertain,
}

/// Certain iff a single non-zero score equal to 127.
pub fn classify_prediction(p: &PredictionVector) -> Certainty {
    let mut nonzero = p.scores().iter().filter(|&&s| s != 0);
    match (nonzero.next(), nonzero.next()) {
        (Some(127), None) => Certainty::Certain,
        _ => Certainty::Uncertain,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetScores {
    scores: Vec<u8>,
    zero_count: usize,
}

impl TargetScores {
    pub fn new(scores: Vec<u8>) -> Result<Self> {
        let sum: u32 = scores.iter().map(|&s| s as u32).sum();
        let zero_count = scores.iter().filter(|&&s| s == 0).count();
        if scores.len() < 2 || sum != 127 || zero_count > scores.len() - 2 {
            return Err(Error::validation(format!(
                "target {scores:?} must sum to 127 with at least two non-zero entries"
            )));
        }
        Ok(Self { scores, zero_count })
    }

    pub fn scores(&self) -> &[u8] {
        &self.scores
    }

    pub fn zero_count(&self) -> usize {
        self.zero_count
    }
}

/// Random uncertain target: `C` uniform in `[0, K-2]` zeros, the rest positive
/// and summing to 127.
pub fn gen_target_scores<R: Rng>(k: usize, rng: &mut R) -> Result<TargetScores> {
    if !(2..=127).contains(&k) {
        return Err(Error::validation(format!("label count {k} outside [2, 127]")));
    }
    let c = rng.gen_range(0..=k - 2);
    let mut live = sample(rng, k, k - c).into_vec();
    live.sort_unstable();
    let weights: Vec<f64> = live.iter().map(|_| rng.gen_range(1..=127) as f64).collect();
    let shares = apportion(&weights, 127 - live.len() as u32);
    let mut scores = vec![0u8; k];
    for (&i, s) in live.iter().zip(shares) {
        scores[i] = 1 + s as u8;
    }
    TargetScores::new(scores)
}

/// Largest-remainder apportionment of `total` proportionally to `weights`.
fn apportion(weights: &[f64], total: u32) -> Vec<u32> {
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut out: Vec<u32> = exact.iter().map(|e| e.floor() as u32).collect();
    let mut left = total - out.iter().sum::<u32>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for i in order {
        if left == 0 {
            break;
        }
        out[i] += 1;
        left -= 1;
    }
    out
}

const CE_EPS: f64 = 1e-6;

/// Cross-entropy of the target distribution against the epsilon-smoothed
/// score distribution. Among score vectors summing to at most 127 it is
/// minimal at `scores == target`.
pub fn ga_cost(scores: &PredictionVector, target: &TargetScores) -> f64 {
    let q: Vec<f64> = scores.scores().iter().map(|&s| s as f64 / 127.0 + CE_EPS).collect();
    let z: f64 = q.iter().sum();
    target
        .scores()
        .iter()
        .zip(&q)
        .filter(|(&t, _)| t != 0)
        .map(|(&t, &qi)| -(t as f64 / 127.0) * (qi / z).ln())
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaConfig {
    pub population_size: usize,
    /// Percentage of best elements kept each generation.
    pub best_percent: u32,
    /// Percentage of random sub-optimal elements kept each generation.
    pub random_percent: u32,
    /// Mutation noise is uniform in `[-amplitude, amplitude]`.
    pub mutation_amplitude: i8,
    /// Fraction of coordinates perturbed per mutation.
    pub mutation_fraction: f64,
    pub max_generations: usize,
    /// Initial populations cycle through these ranges.
    pub init_ranges: Vec<ValueRange>,
    pub domain: ValueRange,
    /// Consecutive unconverged runs tolerated while building a set.
    pub max_attempts: usize,
}

impl Default for GaConfig {
    fn default() -> Self {
        Self {
            population_size: 150,
            best_percent: 60,
            random_percent: 20,
            mutation_amplitude: 16,
            mutation_fraction: 0.1,
            max_generations: 100,
            init_ranges: vec![
                ValueRange::new(0, 127),
                ValueRange::new(-127, 127),
                ValueRange::new(-64, 64),
                ValueRange::new(0, 64),
                ValueRange::new(32, 96),
            ],
            domain: ValueRange::new(-127, 127),
            max_attempts: 20,
        }
    }
}

impl GaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population_size < 4 {
            return Err(Error::validation("population size below 4"));
        }
        if self.best_percent + self.random_percent > 100 || self.best_percent == 0 {
            return Err(Error::validation(format!(
                "selection percentages b={} r={} invalid",
                self.best_percent, self.random_percent
            )));
        }
        if !(0.0..=1.0).contains(&self.mutation_fraction) || self.mutation_amplitude < 0 {
            return Err(Error::validation("mutation parameters invalid"));
        }
        if self.init_ranges.is_empty() {
            return Err(Error::validation("no initial ranges"));
        }
        self.domain.validate()?;
        if !ValueRange::new(-127, 127).contains(self.domain) {
            return Err(Error::validation("domain outside [-127, 127]"));
        }
        for r in &self.init_ranges {
            r.validate()?;
            if !self.domain.contains(*r) {
                return Err(Error::validation(format!("init range {r:?} outside domain")));
            }
        }
        Ok(())
    }

    fn kept(&self) -> (usize, usize) {
        let n = self.population_size;
        let best = (n * self.best_percent as usize / 100).max(1);
        let random = (n * self.random_percent as usize / 100).min(n - best);
        (best, random)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaOutcome {
    pub input: Vec<i8>,
    pub prediction: PredictionVector,
    pub cost: f64,
    pub generations: usize,
    /// Best cost after each generation.
    pub trajectory: Vec<f64>,
    pub queries: u64,
    pub converged: bool,
}

struct Member {
    input: Vec<i8>,
    prediction: Option<PredictionVector>,
    cost: f64,
}

/// Evolves one input toward `target` with black-box queries only.
pub fn ga_evolve<B: BlackBox, R: Rng>(
    model: &B,
    target: &TargetScores,
    init: ValueRange,
    config: &GaConfig,
    rng: &mut R,
    exec: Execution,
) -> Result<GaOutcome> {
    config.validate()?;
    if target.scores().len() != model.num_classes() {
        return Err(Error::shape(
            format!("{} target scores", model.num_classes()),
            target.scores().len(),
        ));
    }
    let len = model.input_len();
    let mut pop: Vec<Member> = (0..config.population_size)
        .map(|_| Member {
            input: (0..len).map(|_| init.sample(rng)).collect(),
            prediction: None,
            cost: f64::INFINITY,
        })
        .collect();
    let mut trajectory = Vec::new();
    let mut queries = 0u64;
    let (n_best, n_random) = config.kept();
    let mut generation = 0;
    loop {
        queries += evaluate(model, target, &mut pop, exec)?;
        pop.sort_by(|a, b| a.cost.total_cmp(&b.cost));
        trajectory.push(pop[0].cost);
        let best = pop[0].prediction.as_ref().expect("evaluated");
        let converged = classify_prediction(best) == Certainty::Uncertain;
        if converged || generation >= config.max_generations {
            let m = pop.swap_remove(0);
            return Ok(GaOutcome {
                input: m.input,
                prediction: m.prediction.expect("evaluated"),
                cost: m.cost,
                generations: generation,
                trajectory,
                queries,
                converged,
            });
        }
        generation += 1;

        let rest = pop.split_off(n_best);
        let mut rest: Vec<Option<Member>> = rest.into_iter().map(Some).collect();
        let picks = sample(rng, rest.len(), n_random.min(rest.len())).into_vec();
        for i in picks {
            let mut m = rest[i].take().expect("distinct picks");
            mutate(&mut m.input, config, rng);
            m.prediction = None;
            pop.push(m);
        }
        let parents = pop.len();
        while pop.len() < config.population_size {
            let a = &pop[rng.gen_range(0..parents)].input;
            let b = &pop[rng.gen_range(0..parents)].input;
            let (mut c1, mut c2) = crossover(a, b, rng);
            mutate(&mut c1, config, rng);
            pop.push(Member { input: c1, prediction: None, cost: f64::INFINITY });
            if pop.len() < config.population_size {
                mutate(&mut c2, config, rng);
                pop.push(Member { input: c2, prediction: None, cost: f64::INFINITY });
            }
        }
        debug_assert_eq!(pop.len(), config.population_size);
    }
}

fn evaluate<B: BlackBox>(model: &B, target: &TargetScores, pop: &mut [Member], exec: Execution) -> Result<u64> {
    let todo: Vec<usize> = (0..pop.len()).filter(|&i| pop[i].prediction.is_none()).collect();
    let preds = exec.map_slice(&todo, |&i| model.query(&pop[i].input));
    for (&i, p) in todo.iter().zip(preds) {
        let p = p?;
        pop[i].cost = ga_cost(&p, target);
        pop[i].prediction = Some(p);
    }
    Ok(todo.len() as u64)
}

/// Two children exchanging a random half of the coordinates.
fn crossover<R: Rng>(a: &[i8], b: &[i8], rng: &mut R) -> (Vec<i8>, Vec<i8>) {
    let (mut c1, mut c2) = (a.to_vec(), b.to_vec());
    for i in sample(rng, a.len(), a.len() / 2) {
        c1[i] = b[i];
        c2[i] = a[i];
    }
    (c1, c2)
}

fn mutate<R: Rng>(x: &mut [i8], config: &GaConfig, rng: &mut R) {
    let n = ((x.len() as f64 * config.mutation_fraction).round() as usize).min(x.len());
    let amp = config.mutation_amplitude as i32;
    for i in sample(rng, x.len(), n) {
        x[i] = config.domain.clip(x[i] as i32 + rng.gen_range(-amp..=amp));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AttackStrategy {
    Random { range: ValueRange },
    Ga,
    TestSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CraftConfig {
    pub seed: u64,
    #[serde(default)]
    pub ga: GaConfig,
    #[serde(default)]
    pub execution: Execution,
}

/// Accuracy split by certainty category.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CategoryAccuracy {
    pub all: f64,
    pub uncertain: Option<f64>,
    pub certain: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CertaintyReport {
    pub total: usize,
    pub certain: usize,
    pub uncertain: usize,
    /// Only for labeled sets.
    pub accuracy: Option<CategoryAccuracy>,
    /// GA runs that hit the generation budget.
    pub unconverged: usize,
    pub queries: u64,
}

impl CertaintyReport {
    pub fn uncertain_rate(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.uncertain as f64 / self.total as f64
        }
    }

    pub fn certain_rate(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.certain as f64 / self.total as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSet {
    pub inputs: Vec<Vec<i8>>,
    pub predictions: Vec<PredictionVector>,
    pub report: CertaintyReport,
}

/// Classifies every input and, when labels are given, splits accuracy by
/// category.
pub fn certainty_report<B: BlackBox>(
    model: &B,
    inputs: &[Vec<i8>],
    labels: Option<&[u8]>,
    exec: Execution,
) -> Result<(Vec<PredictionVector>, CertaintyReport)> {
    if let Some(l) = labels {
        if l.len() != inputs.len() {
            return Err(Error::shape(format!("{} labels", inputs.len()), l.len()));
        }
    }
    let preds = exec
        .map_slice(inputs, |x| model.query(x))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let mut report = CertaintyReport { total: inputs.len(), ..Default::default() };
    let mut hits = [[0usize; 2]; 2];
    for (i, p) in preds.iter().enumerate() {
        let c = classify_prediction(p) as usize;
        if c == Certainty::Certain as usize {
            report.certain += 1;
        } else {
            report.uncertain += 1;
        }
        if let Some(l) = labels {
            hits[c][0] += 1;
            hits[c][1] += usize::from(p.argmax() == l[i] as usize);
        }
    }
    if labels.is_some() && !inputs.is_empty() {
        let pct = |[n, ok]: [usize; 2]| (n > 0).then(|| 100.0 * ok as f64 / n as f64);
        report.accuracy = Some(CategoryAccuracy {
            all: 100.0 * (hits[0][1] + hits[1][1]) as f64 / inputs.len() as f64,
            certain: pct(hits[Certainty::Certain as usize]),
            uncertain: pct(hits[Certainty::Uncertain as usize]),
        });
    }
    Ok((preds, report))
}

/// Builds `size` attack inputs. `TestSet` requires `test_set`; GA inputs use
/// a fresh target and cycle through the configured initial ranges.
pub fn build_attack_set<B: BlackBox>(
    model: &B,
    size: usize,
    strategy: AttackStrategy,
    config: &CraftConfig,
    test_set: Option<&Dataset>,
) -> Result<AttackSet> {
    if size == 0 {
        return Err(Error::validation("attack set size must be at least 1"));
    }
    let exec = config.execution;
    match strategy {
        AttackStrategy::Random { range } => {
            let inputs = random_inputs(size, model.input_len(), range, config.seed)?;
            let (predictions, report) = certainty_report(model, &inputs, None, exec)?;
            Ok(AttackSet { inputs, predictions, report })
        }
        AttackStrategy::TestSet => {
            let data = test_set.ok_or_else(|| Error::validation("test-set strategy needs a dataset"))?;
            if data.image_len() != model.input_len() {
                return Err(Error::shape(format!("{} pixels", model.input_len()), data.image_len()));
            }
            let data = data.take(size);
            let inputs = data.inputs();
            let labels = data.is_labeled().then_some(data.labels.as_slice());
            let (predictions, report) = certainty_report(model, &inputs, labels, exec)?;
            Ok(AttackSet { inputs, predictions, report })
        }
        AttackStrategy::Ga => craft_ga(model, size, config),
    }
}

fn craft_ga<B: BlackBox>(model: &B, size: usize, config: &CraftConfig) -> Result<AttackSet> {
    config.ga.validate()?;
    let mut set = AttackSet { inputs: Vec::with_capacity(size), predictions: Vec::with_capacity(size), report: CertaintyReport::default() };
    let mut failures = 0;
    let mut run = 0u64;
    while set.inputs.len() < size {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(run);
        let init = config.ga.init_ranges[run as usize % config.ga.init_ranges.len()];
        run += 1;
        let target = gen_target_scores(model.num_classes(), &mut rng)?;
        let out = ga_evolve(model, &target, init, &config.ga, &mut rng, config.execution)?;
        set.report.queries += out.queries;
        if !out.converged {
            set.report.unconverged += 1;
            failures += 1;
            if failures >= config.ga.max_attempts {
                return Err(Error::Crafting(format!(
                    "{failures} consecutive GA runs ended without an uncertain prediction"
                )));
            }
            continue;
        }
        failures = 0;
        set.inputs.push(out.input);
        set.predictions.push(out.prediction);
    }
    set.report.total = size;
    set.report.uncertain = set
        .predictions
        .iter()
        .filter(|p| classify_prediction(p) == Certainty::Uncertain)
        .count();
    set.report.certain = size - set.report.uncertain;
    Ok(set)
}
