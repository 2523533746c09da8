use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use qnn_sea::crafter::{certainty_report, classify_prediction, random_inputs, Certainty, ValueRange};
use qnn_sea::data::Split;
use qnn_sea::eval::MetricsRow;
use qnn_sea::io::{self, CampaignRecord};
use qnn_sea::sea::{input_leakage, leakage_table, CampaignConfig};
use qnn_sea::{LayerSpec, QuantModel};

use crate::config::Workbench;

/// Substitute-performance row; the MSB column is empty for the victim.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Table5Row {
    pub msb_recovered_pct: Option<f64>,
    pub model: String,
    pub accuracy: f64,
    pub fidelity: f64,
    pub aua: f64,
}

impl Table5Row {
    pub fn new(msb: Option<f64>, m: MetricsRow) -> Self {
        Self { msb_recovered_pct: msb, model: m.model, accuracy: m.accuracy, fidelity: m.fidelity, aua: m.aua }
    }
}

#[derive(Serialize)]
pub struct CurveRow {
    pub inputs: usize,
    pub msb_known: f64,
    pub new_bits: usize,
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    pub b3: f64,
    pub b4: f64,
    pub b5: f64,
    pub b6: f64,
    pub b7: f64,
    pub elapsed_ms: f64,
}

/// Recovery curve: per-bit known fractions (SEA plus LSBL) after each input.
pub fn curve_rows(record: &CampaignRecord) -> Vec<CurveRow> {
    record
        .inputs
        .iter()
        .map(|r| {
            let b = r.bit_known;
            CurveRow {
                inputs: r.input + 1,
                msb_known: r.msb_known,
                new_bits: r.new_bits,
                b0: b[0],
                b1: b[1],
                b2: b[2],
                b3: b[3],
                b4: b[4],
                b5: b[5],
                b6: b[6],
                b7: b[7],
                elapsed_ms: r.elapsed_ms,
            }
        })
        .collect()
}

#[derive(Serialize)]
struct Table3Row {
    model: String,
    all: f64,
    uncertain: Option<f64>,
    certain: Option<f64>,
}

#[derive(Serialize)]
struct Table4Row {
    model: String,
    inputs: usize,
    certain_pct: f64,
    uncertain_pct: f64,
}

#[derive(Serialize)]
struct Table6Row {
    layer: String,
    no_recovery_certain_pct: Option<f64>,
    no_recovery_uncertain_pct: Option<f64>,
    mean_bits_certain: Option<f64>,
    std_bits_certain: Option<f64>,
    mean_bits_uncertain: Option<f64>,
    std_bits_uncertain: Option<f64>,
}

fn layer_names(q: &QuantModel) -> Vec<String> {
    let (mut conv, mut linear) = (0, 0);
    q.weighted_layers()
        .iter()
        .map(|&i| match q.layers()[i].spec() {
            LayerSpec::Conv2d { .. } => {
                conv += 1;
                format!("Conv. {conv}")
            }
            _ => {
                linear += 1;
                format!("Linear {linear}")
            }
        })
        .collect()
}

fn model_name(w: &Workbench) -> String {
    format!("{:?}", w.arch).to_uppercase()
}

/// Writes the summary tables into `out`: input-category accuracy,
/// prediction types, per-layer leakage, plus the substitute table, ΔY table
/// and recovery curve when the matching stage outputs exist.
pub fn render(w: &Workbench, q: &QuantModel, out: &Path, evaluations: &[PathBuf]) -> Result<()> {
    let exec = w.report.execution;
    let test = w.load_split(Split::Test)?;
    let name = model_name(w);

    let (preds, rep) = certainty_report(q, &test.inputs(), Some(&test.labels), exec)?;
    let acc = rep.accuracy.context("labeled test set")?;
    let table3 = Table3Row { model: name.clone(), all: acc.all, uncertain: acc.uncertain, certain: acc.certain };

    let randoms = random_inputs(w.report.random_inputs, q.input_len(), ValueRange::PIXELS, w.seed)?;
    let (_, rrep) = certainty_report(q, &randoms, None, exec)?;
    let table4 = Table4Row {
        model: name.clone(),
        inputs: rrep.total,
        certain_pct: 100.0 * rrep.certain_rate(),
        uncertain_pct: 100.0 * rrep.uncertain_rate(),
    };

    let sweep = CampaignConfig { execution: exec, ..CampaignConfig::default() };
    let (mut certain, mut uncertain) = (Vec::new(), Vec::new());
    for (i, pred) in preds.iter().enumerate().take(w.report.leakage_inputs) {
        let leak = input_leakage(q, test.image(i), &sweep)?;
        match classify_prediction(pred) {
            Certainty::Certain => certain.push(leak),
            Certainty::Uncertain => uncertain.push(leak),
        }
    }
    let (tc, tu) = (leakage_table(&certain), leakage_table(&uncertain));
    let mut labels = layer_names(q);
    labels.push(name.clone());
    let table6: Vec<Table6Row> = labels
        .into_iter()
        .enumerate()
        .map(|(i, layer)| Table6Row {
            layer,
            no_recovery_certain_pct: tc.get(i).map(|r| 100.0 * r.no_recovery),
            no_recovery_uncertain_pct: tu.get(i).map(|r| 100.0 * r.no_recovery),
            mean_bits_certain: tc.get(i).map(|r| r.mean),
            std_bits_certain: tc.get(i).map(|r| r.std),
            mean_bits_uncertain: tu.get(i).map(|r| r.mean),
            std_bits_uncertain: tu.get(i).map(|r| r.std),
        })
        .collect();

    io::write_csv(&out.join("table3_accuracy_by_category.csv"), &[table3])?;
    io::write_csv(&out.join("table4_prediction_types.csv"), &[table4])?;
    io::write_csv(&out.join("table6_layer_leakage.csv"), &table6)?;

    let campaign = out.join("campaign.json");
    if campaign.exists() {
        let record = CampaignRecord::load(&campaign)?;
        io::write_csv(&out.join("fig4_recovery_curve.csv"), &curve_rows(&record))?;
    }

    let mut sources: Vec<PathBuf> = evaluations.to_vec();
    if sources.is_empty() && out.join("evaluate.csv").exists() {
        sources.push(out.join("evaluate.csv"));
    }
    if !sources.is_empty() {
        let mut rows: Vec<Table5Row> = Vec::new();
        let mut victim: Option<Table5Row> = None;
        for p in &sources {
            for r in io::read_csv::<Table5Row>(p)? {
                if r.model == "victim" {
                    victim.get_or_insert(r);
                } else {
                    rows.push(r);
                }
            }
        }
        rows.sort_by(|a, b| b.msb_recovered_pct.partial_cmp(&a.msb_recovered_pct).unwrap_or(std::cmp::Ordering::Equal));
        rows.extend(victim);
        io::write_csv(&out.join("table5_substitute.csv"), &rows)?;
    }

    let expectation = out.join("expectation.csv");
    if expectation.exists() {
        let bytes = std::fs::read(&expectation).with_context(|| format!("reading {}", expectation.display()))?;
        io::write_atomic(&out.join("table7_expectation.csv"), &bytes)?;
    }
    Ok(())
}
