mod config;
mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use qnn_sea::crafter::{build_attack_set, AttackStrategy, ValueRange};
use qnn_sea::data::{Dataset, Provenance, Split};
use qnn_sea::eval::{
    accuracy, aua, defended_accuracy, expectation_delta, fidelity, sea_under_defense, MetricsRow,
};
use qnn_sea::io::{self, CampaignRecord};
use qnn_sea::sea::{lsbl_propagate, recovery_stats, run_campaign};
use qnn_sea::train::{quantize_model, train_substitute, train_victim, weight_decs, FloatModel, CALIBRATION_SAMPLES};

use config::{campaign_overrides, Workbench};

#[derive(Parser)]
#[command(name = "qnn-sea", version, about = "Safe-error model extraction workbench for 8-bit quantized networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Workbench TOML file.
    #[arg(long, short)]
    config: PathBuf,
    /// Output directory for artifacts and CSV reports.
    #[arg(long, short, default_value = "out")]
    out: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn workbench(&self) -> Result<Workbench> {
        let mut w = Workbench::load(&self.config)?;
        if let Some(s) = self.seed {
            w.seed = s;
        }
        Ok(w)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Random,
    Ga,
    Testset,
}

#[derive(Subcommand)]
enum Command {
    /// Trains the float victim on the training split.
    TrainVictim {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
    },
    /// Quantizes a float checkpoint, calibrating on training samples.
    Quantize {
        #[command(flatten)]
        common: Common,
        /// Float checkpoint; defaults to `<out>/victim_float.qnnm`.
        #[arg(long)]
        float: Option<PathBuf>,
    },
    /// Builds an attack set and reports its prediction types.
    Craft {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        victim: Option<PathBuf>,
        #[arg(long, value_enum)]
        strategy: Option<StrategyArg>,
        #[arg(long)]
        n: Option<usize>,
    },
    /// Runs the safe-error campaign over an attack set.
    Campaign {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        victim: Option<PathBuf>,
        #[arg(long)]
        attack_set: Option<PathBuf>,
        /// Comma-separated bit positions, 0 = MSB.
        #[arg(long, value_delimiter = ',')]
        bits: Option<Vec<u8>>,
        /// Stop once this fraction of parameters has its MSB known.
        #[arg(long)]
        stop_msb: Option<f64>,
        #[arg(long)]
        max_inputs: Option<usize>,
    },
    /// Applies LSBL to SEA knowledge and reports recovery rates.
    Lsbl {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        knowledge: Option<PathBuf>,
        /// Ground-truth model for error rates; defaults to `<out>/victim.qnnm`.
        #[arg(long)]
        victim: Option<PathBuf>,
    },
    /// Trains a substitute under the recovered-bit constraints.
    TrainSubstitute {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        victim: Option<PathBuf>,
        #[arg(long)]
        knowledge: Option<PathBuf>,
    },
    /// Accuracy, fidelity and accuracy under attack.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        victim: Option<PathBuf>,
        #[arg(long)]
        substitute: Option<PathBuf>,
        /// Knowledge used for the substitute; fills the MSB column.
        #[arg(long)]
        knowledge: Option<PathBuf>,
    },
    /// Randomized-scaling countermeasure: accuracy, ΔY and defended SEA.
    Defend {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        victim: Option<PathBuf>,
        /// Inputs for ΔY; uniform random ones when absent.
        #[arg(long)]
        attack_set: Option<PathBuf>,
    },
    /// Renders the summary tables and the recovery curve.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        victim: Option<PathBuf>,
        /// Evaluation CSVs merged into the substitute table.
        #[arg(long, value_delimiter = ',')]
        evaluations: Vec<PathBuf>,
    },
}

fn or_default(p: &Option<PathBuf>, common: &Common, name: &str) -> PathBuf {
    p.clone().unwrap_or_else(|| common.path(name))
}

const VICTIM_FLOAT: &str = "victim_float.qnnm";
const VICTIM: &str = "victim.qnnm";
const ATTACK_SET: &str = "attack_set.qnnd";
const KNOWLEDGE_SEA: &str = "knowledge_sea.qnnk";
const KNOWLEDGE_LSBL: &str = "knowledge_lsbl.qnnk";
const SUBSTITUTE: &str = "substitute.qnnm";
const CAMPAIGN: &str = "campaign.json";

fn calibration(train: &Dataset) -> Vec<Vec<f64>> {
    (0..CALIBRATION_SAMPLES.min(train.len())).map(|i| train.image_f64(i)).collect()
}

#[derive(Serialize)]
struct QuantizeRow {
    float_accuracy: f64,
    quantized_accuracy: f64,
    agreement: f64,
}

#[derive(Serialize)]
struct CraftRow {
    strategy: String,
    inputs: usize,
    certain_pct: f64,
    uncertain_pct: f64,
    unconverged: usize,
    queries: u64,
}

#[derive(Serialize)]
struct LsblRow {
    bit: usize,
    known: f64,
    sea: f64,
    lsbl: f64,
}

#[derive(Serialize)]
struct LsblSummary {
    params: usize,
    msb_known: f64,
    lsbl_marks: usize,
    lsbl_wrong: usize,
    lsbl_error: Option<f64>,
}

#[derive(Serialize)]
struct DefenseRow {
    nominal_accuracy: f64,
    defended_accuracy: f64,
}

#[derive(Serialize)]
struct DeltaRow {
    n: usize,
    delta_y: f64,
    std: f64,
}

#[derive(Serialize)]
struct DefendedSeaRow {
    n: usize,
    threshold: f64,
    probes: usize,
    probes_on_ones: usize,
    zero_marks: usize,
    false_zeros: usize,
    false_positive_rate: f64,
    false_discovery_rate: f64,
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainVictim { common, epochs, learning_rate } => {
            let w = common.workbench()?;
            let mut cfg = w.train_config()?;
            cfg.epochs = epochs.unwrap_or(cfg.epochs);
            cfg.learning_rate = learning_rate.unwrap_or(cfg.learning_rate);
            cfg.validate()?;
            let train = w.load_split(Split::Train)?;
            let (model, report) = train_victim(&w.arch.arch(), &train, &cfg)?;
            io::save_float_model(&common.path(VICTIM_FLOAT), &model)?;
            io::write_csv(&common.path("train_curve.csv"), &report.curve)?;
        }
        Command::Quantize { common, float } => {
            let w = common.workbench()?;
            let f = io::load_float_model(&or_default(&float, &common, VICTIM_FLOAT))?;
            let train = w.load_split(Split::Train)?;
            let test = w.load_split(Split::Test)?;
            let q = quantize_model(&f, &calibration(&train))?;
            let exec = w.evaluate.execution;
            let row = QuantizeRow {
                float_accuracy: accuracy(&f, &test, exec)?,
                quantized_accuracy: accuracy(&q, &test, exec)?,
                agreement: fidelity(&f, &q, &test, exec)?,
            };
            io::save_model(&common.path(VICTIM), &q)?;
            io::write_csv(&common.path("quantize.csv"), &[row])?;
        }
        Command::Craft { common, victim, strategy, n } => {
            let w = common.workbench()?;
            let q = io::load_model(&or_default(&victim, &common, VICTIM))?;
            let strategy = match strategy {
                None => w.craft.strategy,
                Some(StrategyArg::Random) => match w.craft.strategy {
                    s @ AttackStrategy::Random { .. } => s,
                    _ => AttackStrategy::Random { range: ValueRange::PIXELS },
                },
                Some(StrategyArg::Ga) => AttackStrategy::Ga,
                Some(StrategyArg::Testset) => AttackStrategy::TestSet,
            };
            let n = n.unwrap_or(w.craft.n);
            let test = match strategy {
                AttackStrategy::TestSet => Some(w.load_split(Split::Test)?),
                _ => None,
            };
            let set = build_attack_set(&q, n, strategy, &w.craft_config(), test.as_ref())?;
            let provenance = match strategy {
                AttackStrategy::Random { .. } => Provenance::Random,
                AttackStrategy::Ga => Provenance::Ga,
                AttackStrategy::TestSet => Provenance::TestSet,
            };
            let data = Dataset::from_inputs(q.input_shape(), &set.inputs, q.num_classes(), provenance)?;
            let r = &set.report;
            let row = CraftRow {
                strategy: format!("{provenance:?}").to_lowercase(),
                inputs: r.total,
                certain_pct: 100.0 * r.certain_rate(),
                uncertain_pct: 100.0 * r.uncertain_rate(),
                unconverged: r.unconverged,
                queries: r.queries,
            };
            io::save_dataset(&common.path(ATTACK_SET), &data)?;
            io::write_csv(&common.path("craft.csv"), &[row])?;
        }
        Command::Campaign { common, victim, attack_set, bits, stop_msb, max_inputs } => {
            let w = common.workbench()?;
            let q = io::load_model(&or_default(&victim, &common, VICTIM))?;
            let set = io::load_dataset(&or_default(&attack_set, &common, ATTACK_SET))?;
            let cfg = campaign_overrides(w.campaign.clone(), bits, stop_msb, max_inputs)?;
            let outcome = run_campaign(&q, &set.inputs(), &cfg)?;
            let record = CampaignRecord::new(cfg, outcome);
            io::save_knowledge(&common.path(KNOWLEDGE_SEA), &record.knowledge)?;
            io::write_csv(&common.path("recovery_curve.csv"), &report::curve_rows(&record))?;
            record.save(&common.path(CAMPAIGN))?;
        }
        Command::Lsbl { common, knowledge, victim } => {
            let k = io::load_knowledge(&or_default(&knowledge, &common, KNOWLEDGE_SEA), None)?;
            let truth = io::load_model(&or_default(&victim, &common, VICTIM))?;
            let l = lsbl_propagate(&k);
            let stats = recovery_stats(&l, &truth)?;
            let rows: Vec<LsblRow> = stats
                .per_bit
                .iter()
                .enumerate()
                .map(|(bit, r)| LsblRow { bit, known: r.known, sea: r.sea, lsbl: r.lsbl })
                .collect();
            let summary = LsblSummary {
                params: stats.params,
                msb_known: stats.msb_known,
                lsbl_marks: stats.lsbl_marks,
                lsbl_wrong: stats.lsbl_wrong,
                lsbl_error: stats.lsbl_error,
            };
            io::save_knowledge(&common.path(KNOWLEDGE_LSBL), &l)?;
            io::write_atomic(&common.path("knowledge_lsbl.txt"), l.to_text().as_bytes())?;
            io::write_csv(&common.path("lsbl_bits.csv"), &rows)?;
            io::write_csv(&common.path("lsbl.csv"), &[summary])?;
        }
        Command::TrainSubstitute { common, victim, knowledge } => {
            let w = common.workbench()?;
            let q = io::load_model(&or_default(&victim, &common, VICTIM))?;
            let k = io::load_knowledge(&or_default(&knowledge, &common, KNOWLEDGE_LSBL), Some(&q))?;
            let train = w.load_split(Split::Train)?;
            let out = train_substitute(&q, &w.arch.arch(), &k, &weight_decs(&q), &train, &w.substitute_config()?)?;
            io::save_float_model(&common.path(SUBSTITUTE), &out.model)?;
            io::write_csv(&common.path("substitute_curve.csv"), &out.report.curve)?;
        }
        Command::Evaluate { common, victim, substitute, knowledge } => {
            let w = common.workbench()?;
            let q = io::load_model(&or_default(&victim, &common, VICTIM))?;
            let sub = io::load_float_model(&or_default(&substitute, &common, SUBSTITUTE))?;
            let test = w.load_split(Split::Test)?;
            let adv_set = match w.evaluate.aua_limit {
                Some(n) => test.take(n.min(test.len())),
                None => test.clone(),
            };
            let (eps, steps, exec) = (w.pgd_eps(), w.evaluate.steps, w.evaluate.execution);
            let white_box = FloatModel::from_quant(&q)?;
            let msb = match knowledge {
                Some(p) => Some(100.0 * io::load_knowledge(&p, Some(&q))?.msb_known_fraction()),
                None => None,
            };
            let rows = vec![
                report::Table5Row::new(None, MetricsRow {
                    model: "victim".into(),
                    accuracy: accuracy(&q, &test, exec)?,
                    fidelity: 100.0,
                    aua: aua(&q, &white_box, &adv_set, eps, steps, exec)?,
                }),
                report::Table5Row::new(msb, MetricsRow {
                    model: "substitute".into(),
                    accuracy: accuracy(&sub, &test, exec)?,
                    fidelity: fidelity(&sub, &q, &test, exec)?,
                    aua: aua(&q, &sub, &adv_set, eps, steps, exec)?,
                }),
            ];
            io::write_csv(&common.path("evaluate.csv"), &rows)?;
        }
        Command::Defend { common, victim, attack_set } => {
            let w = common.workbench()?;
            let q = io::load_model(&or_default(&victim, &common, VICTIM))?;
            let d = w.defense_config();
            let test = w.load_split(Split::Test)?;
            let exec = w.evaluate.execution;
            let row = DefenseRow {
                nominal_accuracy: accuracy(&q, &test, exec)?,
                defended_accuracy: defended_accuracy(&q, &test, &d, w.seed, exec)?,
            };
            let inputs = match attack_set {
                Some(p) => io::load_dataset(&p)?.inputs(),
                None => qnn_sea::crafter::random_inputs(w.defense.delta_inputs, q.input_len(), ValueRange::PIXELS, w.seed)?,
            };
            let inputs = &inputs[..w.defense.delta_inputs.min(inputs.len())];
            let mut deltas = Vec::new();
            for &n in &w.defense.expectations {
                let (delta_y, std) = expectation_delta(&q, inputs, n, &d, w.seed, exec)?;
                deltas.push(DeltaRow { n, delta_y, std });
            }
            let sea_inputs = &inputs[..w.defense.sea_inputs.min(inputs.len())];
            let mut sea = Vec::new();
            for &n in &w.defense.sea_expectations {
                let r = sea_under_defense(&q, sea_inputs, &d, &w.defended_sea(n))?;
                sea.push(DefendedSeaRow {
                    n,
                    threshold: r.threshold,
                    probes: r.probes,
                    probes_on_ones: r.probes_on_ones,
                    zero_marks: r.zero_marks,
                    false_zeros: r.false_zeros,
                    false_positive_rate: r.false_positive_rate,
                    false_discovery_rate: r.false_discovery_rate,
                });
            }
            io::write_csv(&common.path("defense.csv"), &[row])?;
            io::write_csv(&common.path("expectation.csv"), &deltas)?;
            io::write_csv(&common.path("defended_sea.csv"), &sea)?;
        }
        Command::Report { common, victim, evaluations } => {
            let w = common.workbench()?;
            let q = io::load_model(&or_default(&victim, &common, VICTIM))?;
            report::render(&w, &q, &common.out, &evaluations)?;
        }
    }
    Ok(())
}

fn ensure_out(dir: &Path) -> Result<()> {
    if dir.exists() && !dir.is_dir() {
        bail!("{} exists and is not a directory", dir.display());
    }
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let out = match &cli.command {
        Command::TrainVictim { common, .. }
        | Command::Quantize { common, .. }
        | Command::Craft { common, .. }
        | Command::Campaign { common, .. }
        | Command::Lsbl { common, .. }
        | Command::TrainSubstitute { common, .. }
        | Command::Evaluate { common, .. }
        | Command::Defend { common, .. }
        | Command::Report { common, .. } => common.out.clone(),
    };
    match ensure_out(&out).and_then(|_| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
