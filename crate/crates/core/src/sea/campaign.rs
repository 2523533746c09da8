use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::engine::{PredictionVector, QuantModel};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::fault::{faulted_infer, FaultSpec, Polarity, Prober};

use super::knowledge::{lsbl_param, BitKnowledge};

/// Parameters probed per work item.
const CHUNK: usize = 2048;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CampaignConfig {
    /// Bit positions to probe (0 = MSB); probed MSB-first.
    pub bits: Vec<u8>,
    pub polarity: Polarity,
    pub max_inputs: Option<usize>,
    /// Stop once this fraction of parameters has `b0` known (after LSBL).
    pub stop_msb: Option<f64>,
    pub execution: Execution,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        Self {
            bits: (0..8).collect(),
            polarity: Polarity::Set,
            max_inputs: None,
            stop_msb: None,
            execution: Execution::default(),
        }
    }
}

impl CampaignConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bits.is_empty() {
            return Err(Error::validation("campaign bit subset is empty"));
        }
        if let Some(b) = self.bits.iter().find(|&&b| b > 7) {
            return Err(Error::validation(format!("bit index {b} outside [0, 7]")));
        }
        if let Some(s) = self.stop_msb {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::validation(format!("stop fraction {s} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Sorted, de-duplicated bit order.
    pub fn bit_order(&self) -> Vec<u8> {
        let mut b = self.bits.clone();
        b.sort_unstable();
        b.dedup();
        b
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProbeOutcome {
    ZeroRecovered,
    OneRecovered,
    Doubt,
}

/// One safe-error probe by full faulted inference: a changed prediction proves
/// the bit was not at the fault's resting value.
pub fn sea_probe(
    model: &QuantModel,
    input: &[i8],
    nominal: &PredictionVector,
    spec: &FaultSpec,
) -> Result<ProbeOutcome> {
    let faulted = faulted_infer(model, input, spec)?;
    Ok(outcome(faulted != *nominal, spec.polarity))
}

fn outcome(differs: bool, polarity: Polarity) -> ProbeOutcome {
    match (differs, polarity) {
        (false, _) => ProbeOutcome::Doubt,
        (true, Polarity::Set) => ProbeOutcome::ZeroRecovered,
        (true, Polarity::Reset) => ProbeOutcome::OneRecovered,
    }
}

/// Progress after one attack input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputRecord {
    pub input: usize,
    pub probes: u64,
    pub new_bits: usize,
    pub new_bits_per_layer: Vec<usize>,
    /// Fraction of parameters with `b0` known once LSBL is applied.
    pub msb_known: f64,
    /// Per bit position, fraction known once LSBL is applied.
    pub bit_known: [f64; 8],
    pub elapsed_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignOutcome {
    /// SEA marks only; apply [`super::lsbl_propagate`] for estimates.
    pub knowledge: BitKnowledge,
    pub records: Vec<InputRecord>,
    pub stopped_early: bool,
}

pub fn run_campaign(model: &QuantModel, attack_set: &[Vec<i8>], config: &CampaignConfig) -> Result<CampaignOutcome> {
    run_campaign_from(model, attack_set, config, BitKnowledge::for_model(model))
}

/// Continues a campaign from existing knowledge; known bits are never re-probed.
pub fn run_campaign_from(
    model: &QuantModel,
    attack_set: &[Vec<i8>],
    config: &CampaignConfig,
    mut knowledge: BitKnowledge,
) -> Result<CampaignOutcome> {
    config.validate()?;
    knowledge.check_model(model)?;
    if attack_set.is_empty() {
        return Err(Error::validation("attack set is empty"));
    }
    let bits = config.bit_order();
    let limit = config.max_inputs.unwrap_or(usize::MAX).min(attack_set.len());
    let mut records = Vec::with_capacity(limit);
    let mut stopped_early = false;
    for (idx, input) in attack_set.iter().enumerate().take(limit) {
        if let Some(target) = config.stop_msb {
            if lsbl_fractions(&knowledge, config.polarity).0 >= target {
                stopped_early = true;
                break;
            }
        }
        let start = Instant::now();
        let prober = Prober::new(model, input)?;
        let (hits, probes) = probe_unknown(&prober, &knowledge, &bits, config.polarity, config.execution)?;
        let value = config.polarity == Polarity::Reset;
        let mut per_layer = vec![0usize; knowledge.layer_sizes().len()];
        let mut new_bits = 0;
        for (g, bit) in hits {
            if knowledge.mark_sea(g, bit, value) {
                new_bits += 1;
                per_layer[knowledge.locate(g).0] += 1;
            }
        }
        knowledge.inputs_consumed += 1;
        knowledge.probes_executed += probes;
        let (msb_known, bit_known) = lsbl_fractions(&knowledge, config.polarity);
        records.push(InputRecord {
            input: idx,
            probes,
            new_bits,
            new_bits_per_layer: per_layer,
            msb_known,
            bit_known,
            elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }
    if let (Some(target), false) = (config.stop_msb, stopped_early) {
        stopped_early = records.len() < attack_set.len() && lsbl_fractions(&knowledge, config.polarity).0 >= target;
    }
    Ok(CampaignOutcome {
        knowledge,
        records,
        stopped_early,
    })
}

/// Probes every still-unknown `(parameter, bit)` for one input. Returns the
/// `(global parameter, bit)` pairs whose fault changed the prediction.
fn probe_unknown(
    prober: &Prober<'_>,
    knowledge: &BitKnowledge,
    bits: &[u8],
    polarity: Polarity,
    exec: Execution,
) -> Result<(Vec<(usize, u8)>, u64)> {
    let n = knowledge.num_params();
    let offsets: Vec<usize> = (0..=knowledge.layer_sizes().len())
        .map(|l| knowledge.layer_sizes()[..l].iter().sum())
        .collect();
    let chunks = n.div_ceil(CHUNK);
    let results = exec.map_range(chunks, |c| -> Result<(Vec<(usize, u8)>, u64)> {
        let mut hits = Vec::new();
        let mut probes = 0u64;
        let range = c * CHUNK..((c + 1) * CHUNK).min(n);
        let mut layer = offsets.partition_point(|&o| o <= range.start) - 1;
        for g in range {
            while g >= offsets[layer + 1] {
                layer += 1;
            }
            let slots = &knowledge.slots()[g];
            for &bit in bits {
                if slots[bit as usize].is_known() {
                    continue;
                }
                probes += 1;
                let spec = FaultSpec::new(layer, g - offsets[layer], bit, polarity);
                if prober.differs(&spec)? {
                    hits.push((g, bit));
                }
            }
        }
        Ok((hits, probes))
    });
    let mut hits = Vec::new();
    let mut probes = 0;
    for r in results {
        let (h, p) = r?;
        hits.extend(h);
        probes += p;
    }
    Ok((hits, probes))
}

/// `(b0 known fraction, per-bit known fractions)` after LSBL, without
/// materializing the propagated knowledge.
fn lsbl_fractions(k: &BitKnowledge, polarity: Polarity) -> (f64, [f64; 8]) {
    let n = k.num_params();
    if n == 0 {
        return (0.0, [0.0; 8]);
    }
    let mut counts = [0usize; 8];
    for p in k.slots() {
        let view = if polarity == Polarity::Set { lsbl_param(p) } else { *p };
        for (c, s) in counts.iter_mut().zip(&view) {
            if s.is_known() {
                *c += 1;
            }
        }
    }
    let fr = counts.map(|c| c as f64 / n as f64);
    (fr[0], fr)
}

/// Bits leaked by a single input on its own (no skipping of known bits),
/// counted per weighted layer.
pub fn input_leakage(model: &QuantModel, input: &[i8], config: &CampaignConfig) -> Result<Vec<usize>> {
    config.validate()?;
    let fresh = BitKnowledge::for_model(model);
    let prober = Prober::new(model, input)?;
    let (hits, _) = probe_unknown(&prober, &fresh, &config.bit_order(), config.polarity, config.execution)?;
    let mut per_layer = vec![0usize; fresh.layer_sizes().len()];
    for (g, _) in hits {
        per_layer[fresh.locate(g).0] += 1;
    }
    Ok(per_layer)
}

/// Ground-truth check used in simulation: SEA marks that contradict the model.
pub fn false_sea_marks(k: &BitKnowledge, truth: &QuantModel) -> Result<usize> {
    k.check_model(truth)?;
    let mut wrong = 0;
    for layer in 0..truth.num_weighted() {
        for (p, bits) in truth.weights(layer).values().iter().zip(k.layer_slots(layer)) {
            for (b, s) in bits.iter().enumerate() {
                if s.is_sea() && s.value() != Some(crate::fault::bit_of(*p, b as u8)) {
                    wrong += 1;
                }
            }
        }
    }
    Ok(wrong)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::Arch;
    use crate::engine::random_model;
    use crate::fault::{apply_fault, bit_of};
    use crate::sea::Slot;

    fn tiny() -> QuantModel {
        random_model(&Arch::perceptron([1, 1, 2], &[2, 2]), 60, 3).unwrap()
    }

    fn grid() -> Vec<Vec<i8>> {
        let vals = [-120i8, -64, -9, 0, 7, 50, 127];
        vals.iter().flat_map(|&a| vals.iter().map(move |&b| vec![a, b])).collect()
    }

    #[test]
    fn exhaustive_oracle() {
        let m = tiny();
        let inputs = grid();
        let cfg = CampaignConfig { execution: Execution::Sequential, ..Default::default() };
        let out = run_campaign(&m, &inputs, &cfg).unwrap();
        for layer in 0..m.num_weighted() {
            for (p, &w) in m.weights(layer).values().iter().enumerate() {
                for bit in 0..8u8 {
                    let faulted = apply_fault(w, bit, Polarity::Set);
                    let mutated = m.with_weight(layer, p, faulted).unwrap();
                    let leaks = faulted != w
                        && inputs.iter().any(|x| mutated.infer(x).unwrap() != m.infer(x).unwrap());
                    let slot = out.knowledge.param(layer, p)[bit as usize];
                    assert_eq!(slot == Slot::ZeroSea, leaks, "L{layer}:{p}:b{bit}");
                    if leaks {
                        assert!(!bit_of(w, bit));
                    }
                }
            }
        }
        assert_eq!(false_sea_marks(&out.knowledge, &m).unwrap(), 0);
    }

    #[test]
    fn order_and_execution_insensitive() {
        let m = random_model(&Arch::perceptron([1, 1, 6], &[5, 3]), 50, 9).unwrap();
        let inputs = grid().into_iter().map(|v| [v.clone(), v.clone(), v].concat()).collect::<Vec<_>>();
        let seq = CampaignConfig { execution: Execution::Sequential, ..Default::default() };
        let par = CampaignConfig { execution: Execution::Parallel, ..Default::default() };
        let a = run_campaign(&m, &inputs, &seq).unwrap();
        let mut rev = inputs.clone();
        rev.reverse();
        let b = run_campaign(&m, &rev, &par).unwrap();
        assert_eq!(a.knowledge.slots(), b.knowledge.slots());
        let known: Vec<usize> = a.records.iter().map(|r| r.new_bits).scan(0, |s, n| { *s += n; Some(*s) }).collect();
        assert!(known.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn probe_outcomes() {
        let m = tiny();
        let x = vec![100, -30];
        let nominal = m.infer(&x).unwrap();
        for layer in 0..m.num_weighted() {
            for (p, &w) in m.weights(layer).values().iter().enumerate() {
                for bit in 0..8 {
                    let spec = FaultSpec::set(layer, p, bit);
                    let o = sea_probe(&m, &x, &nominal, &spec).unwrap();
                    if bit_of(w, bit) {
                        assert_eq!(o, ProbeOutcome::Doubt);
                    }
                }
            }
        }
    }

    #[test]
    fn config_validation() {
        let m = tiny();
        let bad = CampaignConfig { bits: vec![], ..Default::default() };
        assert!(run_campaign(&m, &grid(), &bad).is_err());
        let bad = CampaignConfig { bits: vec![8], ..Default::default() };
        assert!(run_campaign(&m, &grid(), &bad).is_err());
        assert!(run_campaign(&m, &[], &CampaignConfig::default()).is_err());
    }

    #[test]
    fn stop_and_limits() {
        let m = tiny();
        let cfg = CampaignConfig { max_inputs: Some(3), ..Default::default() };
        let out = run_campaign(&m, &grid(), &cfg).unwrap();
        assert_eq!(out.records.len(), 3);
        assert_eq!(out.knowledge.inputs_consumed, 3);
        let cfg = CampaignConfig { stop_msb: Some(0.0), ..Default::default() };
        let out = run_campaign(&m, &grid(), &cfg).unwrap();
        assert!(out.records.is_empty() && out.stopped_early);
        let msb_only = CampaignConfig { bits: vec![0], ..Default::default() };
        let out = run_campaign(&m, &grid(), &msb_only).unwrap();
        assert!(out.knowledge.slots().iter().all(|p| p[1..].iter().all(|s| *s == Slot::Unknown)));
    }

    #[test]
    fn reset_polarity_marks_ones() {
        let m = tiny();
        let cfg = CampaignConfig { polarity: Polarity::Reset, ..Default::default() };
        let out = run_campaign(&m, &grid(), &cfg).unwrap();
        assert!(out.knowledge.count(Slot::OneSea) > 0);
        assert_eq!(out.knowledge.count(Slot::ZeroSea), 0);
        assert_eq!(false_sea_marks(&out.knowledge, &m).unwrap(), 0);
    }

    #[test]
    fn leakage_matches_fresh_campaign() {
        let m = tiny();
        let x = vec![90i8, 12];
        let leak = input_leakage(&m, &x, &CampaignConfig::default()).unwrap();
        let out = run_campaign(&m, &[x], &CampaignConfig::default()).unwrap();
        assert_eq!(leak, out.records[0].new_bits_per_layer);
    }
}
