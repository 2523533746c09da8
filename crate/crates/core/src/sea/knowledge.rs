use std::fmt;

use serde::{Deserialize, Serialize};

use crate::engine::QuantModel;
use crate::error::{Error, Result};

/// Recovery state of one parameter bit.
///
/// Ordered as a join-semilattice: `Unknown` is the bottom, every other state
/// is known. SEA marks (set by a prediction mismatch) are kept apart from
/// LSBL estimates so the heuristic's error can be measured on its own.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[repr(u8)]
pub enum Slot {
    #[default]
    Unknown = 0,
    /// Proven 0 by a bit-set fault that changed the prediction.
    ZeroSea = 1,
    /// Estimated 1 by least-significant-bit leakage.
    OneLsbl = 2,
    /// Proven 1 by a bit-reset fault that changed the prediction.
    OneSea = 3,
}

impl Slot {
    pub fn is_known(self) -> bool {
        self != Slot::Unknown
    }

    pub fn value(self) -> Option<bool> {
        match self {
            Slot::Unknown => None,
            Slot::ZeroSea => Some(false),
            Slot::OneLsbl | Slot::OneSea => Some(true),
        }
    }

    pub fn is_sea(self) -> bool {
        matches!(self, Slot::ZeroSea | Slot::OneSea)
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Slot::Unknown),
            1 => Some(Slot::ZeroSea),
            2 => Some(Slot::OneLsbl),
            3 => Some(Slot::OneSea),
            _ => None,
        }
    }

    /// Slot-wise join: known beats unknown, a proof beats an estimate.
    pub fn join(self, other: Slot) -> Slot {
        match (self, other) {
            (Slot::Unknown, o) => o,
            (s, Slot::Unknown) => s,
            (s, _) if s.is_sea() => s,
            (_, o) => o,
        }
    }
}

/// The eight bit slots of one parameter, `b0` (MSB) first.
pub type ParamBits = [Slot; 8];

/// Text rendering: `0`/`1` for known bits, `?` otherwise.
pub fn bits_string(bits: &ParamBits) -> String {
    bits.iter()
        .map(|s| match s.value() {
            None => '?',
            Some(false) => '0',
            Some(true) => '1',
        })
        .collect()
}

/// Sidecar rendering: `S` for SEA proofs, `L` for LSBL estimates, `.` otherwise.
pub fn source_string(bits: &ParamBits) -> String {
    bits.iter()
        .map(|s| match s {
            Slot::Unknown => '.',
            Slot::ZeroSea | Slot::OneSea => 'S',
            Slot::OneLsbl => 'L',
        })
        .collect()
}

/// Smallest and largest two's-complement bytes consistent with the known bits.
pub fn projected_range(bits: &ParamBits) -> (i8, i8) {
    let mut lo: i32 = 0;
    let mut hi: i32 = 0;
    for (i, slot) in bits.iter().enumerate() {
        let weight = if i == 0 { -128 } else { 1 << (7 - i) };
        match slot.value() {
            Some(true) => {
                lo += weight;
                hi += weight;
            }
            Some(false) => {}
            None if weight < 0 => lo += weight,
            None => hi += weight,
        }
    }
    (lo as i8, hi as i8)
}

/// Packs 8 slot codes into 16 bits, `b0` in the two most significant bits.
pub fn pack_param(bits: &ParamBits) -> u16 {
    bits.iter().fold(0u16, |acc, s| (acc << 2) | s.code() as u16)
}

pub fn unpack_param(word: u16) -> ParamBits {
    std::array::from_fn(|b| Slot::from_code(((word >> (14 - 2 * b)) & 0b11) as u8).expect("2-bit code"))
}

mod packed_slots {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use super::{pack_param, unpack_param, ParamBits};

    pub fn serialize<S: Serializer>(slots: &[ParamBits], s: S) -> Result<S::Ok, S::Error> {
        slots.iter().map(pack_param).collect::<Vec<u16>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<ParamBits>, D::Error> {
        Ok(Vec::<u16>::deserialize(d)?.into_iter().map(unpack_param).collect())
    }
}

/// Per-parameter bit knowledge over every weighted layer of a model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitKnowledge {
    layer_sizes: Vec<usize>,
    #[serde(with = "packed_slots")]
    slots: Vec<ParamBits>,
    pub inputs_consumed: u64,
    pub probes_executed: u64,
}

impl BitKnowledge {
    pub fn new(layer_sizes: Vec<usize>) -> Self {
        let total = layer_sizes.iter().sum();
        Self {
            layer_sizes,
            slots: vec![[Slot::Unknown; 8]; total],
            inputs_consumed: 0,
            probes_executed: 0,
        }
    }

    pub fn for_model(model: &QuantModel) -> Self {
        Self::new(model.param_counts())
    }

    pub fn from_parts(layer_sizes: Vec<usize>, slots: Vec<ParamBits>) -> Result<Self> {
        let k = Self {
            layer_sizes,
            slots,
            inputs_consumed: 0,
            probes_executed: 0,
        };
        k.validate()?;
        Ok(k)
    }

    /// Checks that the layer sizes cover exactly the stored slots.
    pub fn validate(&self) -> Result<()> {
        let total: usize = self.layer_sizes.iter().sum();
        if total != self.slots.len() {
            return Err(Error::validation(format!(
                "layer sizes cover {total} parameters, got {} slot groups",
                self.slots.len()
            )));
        }
        Ok(())
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn num_params(&self) -> usize {
        self.slots.len()
    }

    pub fn layer_offset(&self, layer: usize) -> usize {
        self.layer_sizes[..layer].iter().sum()
    }

    /// Splits a global parameter index into `(layer ordinal, local index)`.
    pub fn locate(&self, global: usize) -> (usize, usize) {
        let mut rest = global;
        for (l, &n) in self.layer_sizes.iter().enumerate() {
            if rest < n {
                return (l, rest);
            }
            rest -= n;
        }
        panic!("parameter {global} out of range");
    }

    pub fn slots(&self) -> &[ParamBits] {
        &self.slots
    }

    pub fn layer_slots(&self, layer: usize) -> &[ParamBits] {
        let off = self.layer_offset(layer);
        &self.slots[off..off + self.layer_sizes[layer]]
    }

    pub fn param(&self, layer: usize, index: usize) -> &ParamBits {
        &self.slots[self.layer_offset(layer) + index]
    }

    pub fn param_mut(&mut self, layer: usize, index: usize) -> &mut ParamBits {
        let off = self.layer_offset(layer);
        &mut self.slots[off + index]
    }

    pub fn matches_model(&self, model: &QuantModel) -> bool {
        self.layer_sizes == model.param_counts()
    }

    pub fn check_model(&self, model: &QuantModel) -> Result<()> {
        if !self.matches_model(model) {
            return Err(Error::validation(format!(
                "knowledge covers layers {:?}, model has {:?}",
                self.layer_sizes,
                model.param_counts()
            )));
        }
        Ok(())
    }

    /// Records a SEA proof; returns whether the slot was previously unknown.
    pub fn mark_sea(&mut self, global: usize, bit: u8, value: bool) -> bool {
        let slot = &mut self.slots[global][bit as usize];
        let mark = if value { Slot::OneSea } else { Slot::ZeroSea };
        let fresh = !slot.is_known();
        *slot = slot.join(mark);
        fresh
    }

    /// Slot-wise join with another knowledge state over the same model.
    pub fn merge(&mut self, other: &BitKnowledge) -> Result<()> {
        if self.layer_sizes != other.layer_sizes {
            return Err(Error::validation("merging knowledge of different models"));
        }
        for (a, b) in self.slots.iter_mut().zip(&other.slots) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x = x.join(y);
            }
        }
        self.inputs_consumed += other.inputs_consumed;
        self.probes_executed += other.probes_executed;
        Ok(())
    }

    pub fn known_slots(&self) -> usize {
        self.slots.iter().flatten().filter(|s| s.is_known()).count()
    }

    pub fn count(&self, state: Slot) -> usize {
        self.slots.iter().flatten().filter(|&&s| s == state).count()
    }

    /// Fraction of parameters whose MSB `b0` is known.
    pub fn msb_known_fraction(&self) -> f64 {
        if self.slots.is_empty() {
            return 0.0;
        }
        self.slots.iter().filter(|p| p[0].is_known()).count() as f64 / self.slots.len() as f64
    }

    /// Per bit position, fraction of parameters with that bit known.
    pub fn bit_known_fractions(&self) -> [f64; 8] {
        let mut out = [0.0; 8];
        if self.slots.is_empty() {
            return out;
        }
        for p in &self.slots {
            for (o, s) in out.iter_mut().zip(p) {
                if s.is_known() {
                    *o += 1.0;
                }
            }
        }
        out.map(|c| c / self.slots.len() as f64)
    }

    /// Text export, one line per parameter: `L<layer>:<index> <bits> <sources>`.
    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.slots.len() * 28);
        for (layer, &n) in self.layer_sizes.iter().enumerate() {
            for (i, p) in self.layer_slots(layer).iter().enumerate().take(n) {
                out.push_str(&format!("L{layer}:{i} {} {}\n", bits_string(p), source_string(p)));
            }
        }
        out
    }
}

impl fmt::Display for BitKnowledge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} params, {} known bits ({} SEA zeros, {} SEA ones, {} LSBL ones), MSB known {:.2}%",
            self.num_params(),
            self.known_slots(),
            self.count(Slot::ZeroSea),
            self.count(Slot::OneSea),
            self.count(Slot::OneLsbl),
            100.0 * self.msb_known_fraction()
        )
    }
}

/// Least-significant-bit leakage on one parameter: if `b_k` (k > 0) was
/// proven 0 by SEA, every unknown bit above it is estimated as 1.
pub fn lsbl_param(bits: &ParamBits) -> ParamBits {
    let mut out = *bits;
    if let Some(k) = (1..8).rev().find(|&k| bits[k] == Slot::ZeroSea) {
        for s in out.iter_mut().take(k) {
            if *s == Slot::Unknown {
                *s = Slot::OneLsbl;
            }
        }
    }
    out
}

pub fn lsbl_propagate(k: &BitKnowledge) -> BitKnowledge {
    let mut out = k.clone();
    for p in out.slots.iter_mut() {
        *p = lsbl_param(p);
    }
    out
}
