//! Acceptance run: one PASS/FAIL/SKIP line per criterion.
//!
//! Dataset-backed tiers read MNIST from `$QNN_DATA_DIR/mnist` (default
//! `<workspace>/data`). The CNN tier runs only with `ACCEPTANCE_CNN=1` and
//! CIFAR-10 present under `cifar-10-batches-bin/`.

mod common;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use qnn_sea::arch::Arch;
use qnn_sea::crafter::{build_attack_set, certainty_report, random_inputs, AttackStrategy, CraftConfig, GaConfig, ValueRange};
use qnn_sea::data::{Dataset, Split};
use qnn_sea::eval::{
    accuracy, aua, defended_accuracy, expectation_delta, fidelity, sea_under_defense, DefendedSeaConfig,
    DefenseConfig,
};
use qnn_sea::exec::Execution;
use qnn_sea::io;
use qnn_sea::qtensor::{dequantize, quantize, requantize, step};
use qnn_sea::sea::{
    false_sea_marks, lsbl_param, lsbl_propagate, projected_range, recovery_stats, run_campaign, run_campaign_from,
    BitKnowledge, CampaignConfig, Slot,
};
use qnn_sea::train::{quantize_model, train_substitute, train_victim, weight_decs, FloatModel, SubstituteConfig, TrainConfig, CALIBRATION_SAMPLES};
use qnn_sea::{random_model, QuantModel};

const SEED: u64 = 1;

// Pinned tolerances.
const QUANT_TENSORS: usize = 100_000;
const QUANT_BUDGET: Duration = Duration::from_secs(10);
const ORACLE_BUDGET: Duration = Duration::from_secs(60);
const LSBL_PATTERNS: usize = 10_000;
const LSBL_INPUTS: usize = 300;
const LSBL_MAX_ERROR: f64 = 0.01;
const MLP_ACC: (f64, f64) = (94.94, 1.0);
const MLP_UNCERTAIN_MIN: f64 = 0.80;
const MLP_MSB_MIN: f64 = 0.90;
const MLP_SUB_ACC_MIN: f64 = 91.0;
const MLP_SUB_FID_MIN: f64 = 93.0;
const MLP_SUB_AUA_MAX: f64 = 5.0;
const MLP_BUDGET: Duration = Duration::from_secs(4 * 3600);
const CNN_ACC: (f64, f64) = (79.4, 2.0);
const CNN_MSB80_INPUTS: f64 = 150.0;
const CNN_MSB90_INPUTS: f64 = 1500.0;
const CNN_INPUTS_REL_TOL: f64 = 0.10;
const CNN_SUB_ACC_MIN: f64 = 70.0;
const CNN_SUB_FID_MIN: f64 = 80.0;
const CNN_SUB_AUA_MAX: f64 = 6.0;
const GRAD_INSTANCES: u64 = 100;
const GRAD_REL_ERR: f64 = 1e-4;
const GRAD_BUDGET: Duration = Duration::from_secs(60);
const DEF_ACC_DROP_MAX: f64 = 1.0;
const DEF_EXPECTATIONS: [usize; 4] = [2, 10, 100, 1000];
const DEF_DELTA_INPUTS: usize = 200;
const DEF_SEA_INPUTS: usize = 2;
const DEF_SEA_PROBES: usize = 200;
const DEF_FPR_MAX: f64 = 0.01;
const FORMAT_CASES: usize = 1000;
const FORMAT_BUDGET: Duration = Duration::from_secs(10);

#[derive(PartialEq)]
enum Status {
    Pass,
    Fail,
    Skip,
}

struct Line {
    id: u8,
    name: &'static str,
    status: Status,
    detail: String,
}

fn verdict(id: u8, name: &'static str, ok: bool, detail: String) -> Line {
    Line { id, name, status: if ok { Status::Pass } else { Status::Fail }, detail }
}

fn skip(id: u8, name: &'static str, why: &str) -> Line {
    Line { id, name, status: Status::Skip, detail: why.to_string() }
}

fn progress(msg: &str) {
    eprintln!("  .. {msg}");
}

fn data_root() -> PathBuf {
    std::env::var_os("QNN_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data"))
}

fn quantization() -> Line {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let (mut bound, mut mono, mut total) = (0usize, 0usize, 0usize);
    for _ in 0..QUANT_TENSORS {
        let dec = rng.gen_range(-8..=8);
        let s = step(dec);
        let n = rng.gen_range(1..=16);
        let mut xs: Vec<f64> = (0..n).map(|_| rng.gen_range(-128.5 * s..127.5 * s)).collect();
        xs.sort_by(f64::total_cmp);
        let q = quantize(&xs, vec![n], dec).unwrap();
        let back = dequantize(q.values(), dec);
        bound += xs.iter().zip(&back).filter(|(x, b)| (*x - *b).abs() > 2f64.powi(dec - 8)).count();
        mono += q.values().windows(2).filter(|w| w[0] > w[1]).count();
        let wide: Vec<f64> = (0..n).map(|_| rng.gen_range(-1e9..1e9) * s).collect();
        let qw = quantize(&wide, vec![n], dec).unwrap();
        total += wide.iter().zip(qw.values()).filter(|(&x, &v)| v != common::quantize_oracle(x, dec)).count();
        let acc: i32 = rng.gen();
        let shift = rng.gen_range(-8..=30);
        let expect = if shift >= 0 {
            common::requantize_oracle(acc, shift as u32)
        } else {
            (acc as i128 * (1i128 << -shift)).clamp(-128, 127) as i8
        };
        total += (requantize(acc, shift) != expect) as usize;
    }
    let el = t.elapsed();
    verdict(
        1,
        "quantization properties",
        bound == 0 && mono == 0 && total == 0 && el < QUANT_BUDGET,
        format!("{QUANT_TENSORS} tensors: bound violations {bound}, monotonicity {mono}, saturation {total}, {el:.2?}"),
    )
}

fn fault_oracle() -> Line {
    let t = Instant::now();
    let m = random_model(&Arch::perceptron([1, 1, 4], &[3, 2]), 90, 11).unwrap();
    let inputs = common::grid_inputs(4, &[-128, -40, 0, 33, 127]);
    let oracle = common::brute_zero_set(&m, &inputs);
    let mut mismatches = 0;
    let mut zeros = 0;
    for exec in [Execution::Sequential, Execution::Parallel] {
        let cfg = CampaignConfig { execution: exec, ..Default::default() };
        let k = run_campaign(&m, &inputs, &cfg).unwrap().knowledge;
        let mut got = Vec::new();
        for layer in 0..m.num_weighted() {
            for p in 0..m.weights(layer).len() {
                for bit in 0..8u8 {
                    if k.param(layer, p)[bit as usize] == Slot::ZeroSea {
                        got.push((layer, p, bit));
                    }
                }
            }
        }
        mismatches += (got != oracle) as usize;
        zeros += false_sea_marks(&k, &m).unwrap();
    }
    let el = t.elapsed();
    verdict(
        2,
        "fault-model oracle equivalence",
        mismatches == 0 && zeros == 0 && !oracle.is_empty() && el < ORACLE_BUDGET,
        format!(
            "4-3-2 MLP, {} params x 8 bits x {} inputs: oracle zeros {}, set mismatches {mismatches}, false zeros {zeros}, {el:.2?}",
            m.total_params(),
            inputs.len(),
            oracle.len()
        ),
    )
}

fn lsbl_patterns() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut bad = 0;
    for _ in 0..LSBL_PATTERNS {
        let b = common::random_bits(&mut rng);
        let once = lsbl_param(&b);
        bad += (once != common::lsbl_oracle(&b)) as usize;
        bad += (lsbl_param(&once) != once) as usize;
        bad += (projected_range(&b) != common::brute_range(&b)) as usize;
        bad += (projected_range(&once) != common::brute_range(&once)) as usize;
    }
    (bad == 0, format!("{LSBL_PATTERNS} patterns, {bad} violations"))
}

fn gradients() -> Line {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let archs = [Arch::perceptron([1, 1, 6], &[5, 4, 3]), common::small_cnn()];
    let mut worst = 0.0f64;
    for i in 0..GRAD_INSTANCES {
        let m = FloatModel::init(&archs[i as usize % 2], i).unwrap();
        let x: Vec<f64> = (0..m.input_len()).map(|_| rng.gen_range(0.0..1.0)).collect();
        let label = rng.gen_range(0..m.num_classes());
        worst = worst.max(common::fd_relative_error(&m, &x, label));
    }
    let el = t.elapsed();
    verdict(
        6,
        "gradient checks",
        worst < GRAD_REL_ERR && el < GRAD_BUDGET,
        format!("{GRAD_INSTANCES} instances over linear/conv/relu/pool/softmax, worst relative error {worst:.2e}, {el:.2?}"),
    )
}

fn formats() -> Line {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let p = std::path::Path::new("mem");
    let mut bad = 0;
    for _ in 0..FORMAT_CASES {
        let m = common::random_quant_model(&mut rng);
        let b = io::encode_model(&m);
        bad += io::decode_model(p, &b).map_or(true, |x| x != m || io::encode_model(&x) != b) as usize;
        let k = common::random_knowledge(&mut rng);
        let b = io::encode_knowledge(&k);
        bad += io::decode_knowledge(p, &b).map_or(true, |x| x != k || io::encode_knowledge(&x) != b) as usize;
        let d = common::random_dataset(&mut rng);
        let b = io::encode_dataset(&d);
        bad += io::decode_dataset(p, &b).map_or(true, |x| x != d || io::encode_dataset(&x) != b) as usize;
    }
    let el = t.elapsed();
    verdict(
        8,
        "format round-trips",
        bad == 0 && el < FORMAT_BUDGET,
        format!("{FORMAT_CASES} random payloads per container, {bad} mismatches, {el:.2?}"),
    )
}

fn calibration(train: &Dataset) -> Vec<Vec<f64>> {
    (0..CALIBRATION_SAMPLES.min(train.len())).map(|i| train.image_f64(i)).collect()
}

fn band((target, tol): (f64, f64), v: f64) -> bool {
    (v - target).abs() <= tol
}

/// MLP tier: criteria 3 (trained part), 4 and 7.
fn mlp_tier(lsbl_line: (bool, String), lines: &mut Vec<Line>) {
    let root = data_root().join("mnist");
    let (train, test) = match (io::load_mnist_dir(&root, Split::Train), io::load_mnist_dir(&root, Split::Test)) {
        (Ok(a), Ok(b)) => (a, b),
        _ => {
            let why = format!("MNIST not found under {}", root.display());
            lines.push(Line {
                id: 3,
                name: "LSBL",
                status: if lsbl_line.0 { Status::Skip } else { Status::Fail },
                detail: format!("{}; trained-model part skipped: {why}", lsbl_line.1),
            });
            lines.push(skip(4, "MLP end-to-end", &why));
            lines.push(skip(7, "defense", &why));
            return;
        }
    };
    let start = Instant::now();
    let exec = Execution::Parallel;

    progress("training MLP victim");
    let cfg = TrainConfig { epochs: 2, learning_rate: 0.004, ..TrainConfig::new(SEED) };
    let (float, _) = train_victim(&Arch::mlp(), &train, &cfg).unwrap();
    let q = quantize_model(&float, &calibration(&train)).unwrap();
    let acc = accuracy(&q, &test, exec).unwrap();

    let randoms = random_inputs(5000, q.input_len(), ValueRange::PIXELS, SEED).unwrap();
    let (_, rep) = certainty_report(&q, &randoms, None, exec).unwrap();

    progress("campaign, first 300 inputs");
    let camp = CampaignConfig { execution: exec, ..Default::default() };
    let first = run_campaign(&q, &randoms[..LSBL_INPUTS], &camp).unwrap();
    let stats300 = recovery_stats(&lsbl_propagate(&first.knowledge), &q).unwrap();
    let err300 = stats300.lsbl_error.unwrap_or(1.0);
    lines.push(verdict(
        3,
        "LSBL",
        lsbl_line.0 && err300 < LSBL_MAX_ERROR,
        format!(
            "{}; trained MLP after {LSBL_INPUTS} random inputs: LSBL error {:.3}% ({} / {} estimates)",
            lsbl_line.1,
            100.0 * err300,
            stats300.lsbl_wrong,
            stats300.lsbl_marks
        ),
    ));

    progress("campaign until 90% MSB");
    let stop = CampaignConfig { stop_msb: Some(MLP_MSB_MIN), ..camp.clone() };
    let rest = run_campaign_from(&q, &randoms[LSBL_INPUTS..], &stop, first.knowledge).unwrap();
    let used = LSBL_INPUTS + rest.records.len();
    let lsbl: BitKnowledge = lsbl_propagate(&rest.knowledge);
    let stats = recovery_stats(&lsbl, &q).unwrap();

    progress("training substitute");
    let mut sub_cfg = SubstituteConfig::new(SEED);
    sub_cfg.train = TrainConfig { epochs: 30, learning_rate: 0.01, ..TrainConfig::new(SEED) };
    let sub = train_substitute(&q, &Arch::mlp(), &lsbl, &weight_decs(&q), &train, &sub_cfg).unwrap().model;
    progress("evaluating substitute");
    let s_acc = accuracy(&sub, &test, exec).unwrap();
    let s_fid = fidelity(&sub, &q, &test, exec).unwrap();
    let s_aua = aua(&q, &sub, &test, 0.3, 40, exec).unwrap();
    let el = start.elapsed();
    let unc = rep.uncertain_rate();
    lines.push(verdict(
        4,
        "MLP end-to-end",
        band(MLP_ACC, acc)
            && unc >= MLP_UNCERTAIN_MIN
            && stats.msb_known >= MLP_MSB_MIN
            && s_acc >= MLP_SUB_ACC_MIN
            && s_fid >= MLP_SUB_FID_MIN
            && s_aua <= MLP_SUB_AUA_MAX
            && el < MLP_BUDGET,
        format!(
            "victim {acc:.2}%, random Uncertain {:.1}%, b0 known {:.1}% after {used} inputs, substitute acc {s_acc:.2} fid {s_fid:.2} AUA {s_aua:.2}, {el:.0?}",
            100.0 * unc,
            100.0 * stats.msb_known
        ),
    ));

    lines.push(defense(&q, &test, &randoms));
}

fn defense(q: &QuantModel, test: &Dataset, crafted: &[Vec<i8>]) -> Line {
    let exec = Execution::Parallel;
    let d = DefenseConfig { layer: Some(1), ..DefenseConfig::default() };
    progress("defense: accuracy");
    let nominal = accuracy(q, test, exec).unwrap();
    let defended = defended_accuracy(q, test, &d, SEED, exec).unwrap();
    progress("defense: expectation deltas");
    let inputs = &crafted[..DEF_DELTA_INPUTS];
    let deltas: Vec<f64> =
        DEF_EXPECTATIONS.iter().map(|&n| expectation_delta(q, inputs, n, &d, SEED, exec).unwrap().0).collect();
    let decreasing = deltas.windows(2).all(|w| w[1] < w[0]);
    let tenfold = deltas[3] <= deltas[0] / 10.0;
    progress("defense: SEA under defense");
    let sea = |n| {
        let c = DefendedSeaConfig { seed: SEED, expectation: n, probes: DEF_SEA_PROBES, execution: exec, ..Default::default() };
        sea_under_defense(q, &crafted[..DEF_SEA_INPUTS], &d, &c).unwrap()
    };
    let (one, many) = (sea(1), sea(1000));
    let drop = nominal - defended;
    verdict(
        7,
        "defense",
        drop <= DEF_ACC_DROP_MAX
            && decreasing
            && tenfold
            && one.false_positive_rate > 0.0
            && one.false_discovery_rate > 0.0
            && many.false_positive_rate < DEF_FPR_MAX
            && many.false_discovery_rate < DEF_FPR_MAX,
        format!(
            "MLP surrogate on layer 1: accuracy {nominal:.2} -> {defended:.2}; dY(N=2,10,100,1000) = {}; FPR N=1 {:.3} ({}/{}) FDR {:.3}, N=1000 FPR {:.3} ({}/{}) FDR {:.3}",
            deltas.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(", "),
            one.false_positive_rate,
            one.false_zeros,
            one.probes_on_ones,
            one.false_discovery_rate,
            many.false_positive_rate,
            many.false_zeros,
            many.probes_on_ones,
            many.false_discovery_rate
        ),
    )
}

/// Inputs consumed when the MSB-known fraction first reaches `target`.
fn inputs_to_reach(records: &[qnn_sea::sea::InputRecord], target: f64) -> Option<usize> {
    records.iter().find(|r| r.msb_known >= target).map(|r| r.input + 1)
}

fn cnn_tier() -> Line {
    const NAME: &str = "CNN end-to-end";
    if std::env::var("ACCEPTANCE_CNN").as_deref() != Ok("1") {
        return skip(5, NAME, "slow tier, set ACCEPTANCE_CNN=1 to run");
    }
    let root = data_root().join("cifar-10-batches-bin");
    let (train, test) = match (io::load_cifar10_dir(&root, Split::Train), io::load_cifar10_dir(&root, Split::Test)) {
        (Ok(a), Ok(b)) => (a, b),
        _ => return skip(5, NAME, &format!("CIFAR-10 not found under {}", root.display())),
    };
    let start = Instant::now();
    let exec = Execution::Parallel;
    progress("training CNN victim");
    let cfg = TrainConfig {
        epochs: 80,
        learning_rate: 0.01,
        weight_decay: 5e-4,
        lr_decay: 0.97,
        augment: true,
        ..TrainConfig::new(SEED)
    };
    let (float, _) = train_victim(&Arch::cnn(), &train, &cfg).unwrap();
    let q = quantize_model(&float, &calibration(&train)).unwrap();
    let acc = accuracy(&q, &test, exec).unwrap();

    progress("GA crafting");
    let craft = CraftConfig { seed: SEED, ga: GaConfig::default(), execution: exec };
    let set = build_attack_set(&q, 1500, AttackStrategy::Ga, &craft, None).unwrap();
    progress("campaign");
    let camp = CampaignConfig { bits: (0..6).collect(), stop_msb: Some(0.9), execution: exec, ..Default::default() };
    let out = run_campaign(&q, &set.inputs, &camp).unwrap();
    let at80 = inputs_to_reach(&out.records, 0.8);
    let at90 = inputs_to_reach(&out.records, 0.9);
    let near = |got: Option<usize>, want: f64| got.is_some_and(|g| ((g as f64 - want) / want).abs() <= CNN_INPUTS_REL_TOL);
    let lsbl = lsbl_propagate(&out.knowledge);

    progress("training substitute");
    let mut sub_cfg = SubstituteConfig::new(SEED);
    sub_cfg.train = TrainConfig { epochs: 60, learning_rate: 0.01, augment: true, ..TrainConfig::new(SEED) };
    let sub = train_substitute(&q, &Arch::cnn(), &lsbl, &weight_decs(&q), &train, &sub_cfg).unwrap().model;
    let s_acc = accuracy(&sub, &test, exec).unwrap();
    let s_fid = fidelity(&sub, &q, &test, exec).unwrap();
    let s_aua = aua(&q, &sub, &test.take(2000), 8.0 / 255.0, 40, exec).unwrap();
    verdict(
        5,
        NAME,
        band(CNN_ACC, acc)
            && near(at80, CNN_MSB80_INPUTS)
            && near(at90, CNN_MSB90_INPUTS)
            && s_acc >= CNN_SUB_ACC_MIN
            && s_fid >= CNN_SUB_FID_MIN
            && s_aua <= CNN_SUB_AUA_MAX,
        format!(
            "victim {acc:.2}%, 80% MSB at {at80:?} inputs, 90% at {at90:?}, substitute acc {s_acc:.2} fid {s_fid:.2} AUA {s_aua:.2}, {:.0?}",
            start.elapsed()
        ),
    )
}

fn main() -> ExitCode {
    // cargo passes harness flags such as `--list`; only a plain run executes.
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let mut lines = vec![quantization(), fault_oracle()];
    let patterns = lsbl_patterns();
    lines.push(gradients());
    lines.push(formats());
    mlp_tier(patterns, &mut lines);
    lines.push(cnn_tier());
    lines.sort_by_key(|l| l.id);

    println!("acceptance:");
    for l in &lines {
        let s = match l.status {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Skip => "SKIP",
        };
        println!("{s} [{}] {}: {}", l.id, l.name, l.detail);
    }
    if lines.iter().any(|l| l.status == Status::Fail) {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
