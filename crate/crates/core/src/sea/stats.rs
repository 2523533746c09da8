use serde::{Deserialize, Serialize};

use crate::engine::QuantModel;
use crate::error::Result;
use crate::fault::bit_of;

use super::knowledge::{BitKnowledge, Slot};

/// Recovery state of one bit position across all parameters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BitRate {
    pub known: f64,
    pub sea: f64,
    pub lsbl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecovery {
    pub layer: usize,
    pub params: usize,
    pub known_slots: usize,
    pub msb_known: f64,
    pub lsbl_marks: usize,
    pub lsbl_wrong: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub params: usize,
    pub per_bit: [BitRate; 8],
    pub per_layer: Vec<LayerRecovery>,
    pub msb_known: f64,
    pub lsbl_marks: usize,
    pub lsbl_wrong: usize,
    /// `None` when no LSBL estimates exist.
    pub lsbl_error: Option<f64>,
    /// SEA marks contradicting the ground truth; zero under the fault model.
    pub sea_wrong: usize,
}

/// Compares knowledge with the true victim (simulation only).
pub fn recovery_stats(k: &BitKnowledge, truth: &QuantModel) -> Result<RecoveryReport> {
    k.check_model(truth)?;
    let n = k.num_params();
    let mut counts = [[0usize; 3]; 8];
    let mut per_layer = Vec::with_capacity(truth.num_weighted());
    let (mut lsbl_marks, mut lsbl_wrong, mut sea_wrong) = (0, 0, 0);
    for layer in 0..truth.num_weighted() {
        let mut row = LayerRecovery {
            layer,
            params: k.layer_sizes()[layer],
            known_slots: 0,
            msb_known: 0.0,
            lsbl_marks: 0,
            lsbl_wrong: 0,
        };
        let mut msb = 0usize;
        for (&w, bits) in truth.weights(layer).values().iter().zip(k.layer_slots(layer)) {
            if bits[0].is_known() {
                msb += 1;
            }
            for (b, &s) in bits.iter().enumerate() {
                let Some(v) = s.value() else { continue };
                counts[b][0] += 1;
                row.known_slots += 1;
                let correct = v == bit_of(w, b as u8);
                if s.is_sea() {
                    counts[b][1] += 1;
                    sea_wrong += usize::from(!correct);
                } else {
                    counts[b][2] += 1;
                    row.lsbl_marks += 1;
                    row.lsbl_wrong += usize::from(!correct);
                }
            }
        }
        row.msb_known = ratio(msb, row.params);
        lsbl_marks += row.lsbl_marks;
        lsbl_wrong += row.lsbl_wrong;
        per_layer.push(row);
    }
    let per_bit = counts.map(|[known, sea, lsbl]| BitRate {
        known: ratio(known, n),
        sea: ratio(sea, n),
        lsbl: ratio(lsbl, n),
    });
    Ok(RecoveryReport {
        params: n,
        msb_known: per_bit[0].known,
        per_bit,
        per_layer,
        lsbl_marks,
        lsbl_wrong,
        lsbl_error: (lsbl_marks > 0).then(|| lsbl_wrong as f64 / lsbl_marks as f64),
        sea_wrong,
    })
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Per-input bit leakage aggregated over a group of inputs, per layer and in
/// total.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakageRow {
    /// `None` for the whole-model row.
    pub layer: Option<usize>,
    /// Fraction of inputs that recovered no bit.
    pub no_recovery: f64,
    pub mean: f64,
    pub std: f64,
}

/// Aggregates per-input, per-layer leaked bit counts. Rows are one per layer
/// followed by the whole-model row; empty without samples.
pub fn leakage_table(samples: &[Vec<usize>]) -> Vec<LeakageRow> {
    if samples.is_empty() {
        return Vec::new();
    }
    let layers = samples.first().map_or(0, Vec::len);
    let mut rows: Vec<LeakageRow> = (0..layers)
        .map(|l| row(Some(l), samples.iter().map(|s| s[l])))
        .collect();
    rows.push(row(None, samples.iter().map(|s| s.iter().sum())));
    rows
}

fn row(layer: Option<usize>, xs: impl Iterator<Item = usize>) -> LeakageRow {
    let xs: Vec<f64> = xs.map(|x| x as f64).collect();
    if xs.is_empty() {
        return LeakageRow {
            layer,
            no_recovery: 0.0,
            mean: 0.0,
            std: 0.0,
        };
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    LeakageRow {
        layer,
        no_recovery: xs.iter().filter(|&&x| x == 0.0).count() as f64 / n,
        mean,
        std: var.sqrt(),
    }
}

/// Count of slots in a given state for one layer.
pub fn layer_count(k: &BitKnowledge, layer: usize, state: Slot) -> usize {
    k.layer_slots(layer).iter().flatten().filter(|&&s| s == state).count()
}
