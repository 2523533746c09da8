use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use qnn_sea::arch::Arch;
use qnn_sea::crafter::{AttackStrategy, CraftConfig, GaConfig};
use qnn_sea::data::{Dataset, Split};
use qnn_sea::eval::{DefendedSeaConfig, DefenseConfig};
use qnn_sea::exec::Execution;
use qnn_sea::io;
use qnn_sea::sea::CampaignConfig;
use qnn_sea::train::{SubstituteConfig, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ArchKind {
    #[default]
    Mlp,
    Cnn,
}

impl ArchKind {
    pub fn arch(self) -> Arch {
        match self {
            ArchKind::Mlp => Arch::mlp(),
            ArchKind::Cnn => Arch::cnn(),
        }
    }
}

/// Workbench configuration shared by every stage. Only `seed` is required;
/// each stage reads its own section.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Workbench {
    pub seed: u64,
    #[serde(default)]
    pub arch: ArchKind,
    /// Directory holding `mnist/` and `cifar-10-batches-bin/`; falls back
    /// to `$QNN_DATA_DIR`, then `./data`.
    pub data_dir: Option<PathBuf>,
    #[serde(default)]
    pub train: toml::Table,
    #[serde(default)]
    pub craft: CraftSection,
    #[serde(default)]
    pub campaign: CampaignConfig,
    #[serde(default)]
    pub substitute: SubstituteSection,
    #[serde(default)]
    pub evaluate: EvaluateSection,
    #[serde(default)]
    pub defense: DefenseSection,
    #[serde(default)]
    pub report: ReportSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CraftSection {
    pub strategy: AttackStrategy,
    pub n: usize,
    pub ga: GaConfig,
    pub execution: Execution,
}

impl Default for CraftSection {
    fn default() -> Self {
        Self {
            strategy: AttackStrategy::Random { range: qnn_sea::crafter::ValueRange::PIXELS },
            n: 5000,
            ga: GaConfig::default(),
            execution: Execution::default(),
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SubstituteSection {
    pub lambda: Option<f64>,
    pub data_fraction: Option<f64>,
    pub train: toml::Table,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    /// PGD budget; `None` uses 0.3 for the MLP and 8/255 for the CNN.
    pub eps: Option<f64>,
    pub steps: usize,
    /// Test images used for AUA; all when unset.
    pub aua_limit: Option<usize>,
    pub execution: Execution,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        Self { eps: None, steps: 40, aua_limit: None, execution: Execution::default() }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DefenseSection {
    pub scaling: DefenseConfig,
    /// Expectation sizes for the ΔY table.
    pub expectations: Vec<usize>,
    /// Crafted inputs averaged in the ΔY table.
    pub delta_inputs: usize,
    pub sea: DefendedSeaConfig,
    /// Expectation sizes for defended SEA.
    pub sea_expectations: Vec<usize>,
    pub sea_inputs: usize,
}

impl Default for DefenseSection {
    fn default() -> Self {
        Self {
            scaling: DefenseConfig::default(),
            expectations: vec![2, 10, 100, 1000],
            delta_inputs: 5000,
            sea: DefendedSeaConfig::default(),
            sea_expectations: vec![1, 1000],
            sea_inputs: 2,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSection {
    /// Uniform random inputs for the prediction-type table.
    pub random_inputs: usize,
    /// Test inputs swept for per-layer leakage.
    pub leakage_inputs: usize,
    pub execution: Execution,
}

impl Default for ReportSection {
    fn default() -> Self {
        Self { random_inputs: 5000, leakage_inputs: 200, execution: Execution::default() }
    }
}

/// Fills `seed` into a section table, then deserializes it.
fn seeded<T: serde::de::DeserializeOwned>(table: &toml::Table, seed: u64, what: &str) -> Result<T> {
    let mut t = table.clone();
    t.entry("seed").or_insert(toml::Value::Integer(seed as i64));
    toml::Value::Table(t).try_into().with_context(|| format!("invalid [{what}] section"))
}

impl Workbench {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(io::load_toml(path)?)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let c: TrainConfig = seeded(&self.train, self.seed, "train")?;
        c.validate()?;
        Ok(c)
    }

    pub fn substitute_config(&self) -> Result<SubstituteConfig> {
        let train: TrainConfig = seeded(&self.substitute.train, self.seed, "substitute.train")?;
        train.validate()?;
        let mut c = SubstituteConfig::new(self.seed);
        c.train = train;
        if let Some(l) = self.substitute.lambda {
            c.lambda = l;
        }
        if let Some(f) = self.substitute.data_fraction {
            c.data_fraction = f;
        }
        Ok(c)
    }

    pub fn craft_config(&self) -> CraftConfig {
        CraftConfig { seed: self.seed, ga: self.craft.ga.clone(), execution: self.craft.execution }
    }

    pub fn pgd_eps(&self) -> f64 {
        self.evaluate.eps.unwrap_or(match self.arch {
            ArchKind::Mlp => 0.3,
            ArchKind::Cnn => 8.0 / 255.0,
        })
    }

    pub fn defended_sea(&self, expectation: usize) -> DefendedSeaConfig {
        DefendedSeaConfig { seed: self.seed, expectation, ..self.defense.sea.clone() }
    }

    /// Default defended layer: the last convolution, or the second linear
    /// layer of the MLP.
    pub fn defense_config(&self) -> DefenseConfig {
        let mut d = self.defense.scaling;
        if d.layer.is_none() && self.arch == ArchKind::Mlp {
            d.layer = Some(1);
        }
        d
    }

    pub fn data_root(&self) -> PathBuf {
        self.data_dir
            .clone()
            .or_else(|| std::env::var_os("QNN_DATA_DIR").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("data"))
    }

    pub fn load_split(&self, split: Split) -> Result<Dataset> {
        let root = self.data_root();
        let d = match self.arch {
            ArchKind::Mlp => io::load_mnist_dir(&root.join("mnist"), split),
            ArchKind::Cnn => io::load_cifar10_dir(&root.join("cifar-10-batches-bin"), split),
        };
        d.with_context(|| format!("loading {:?} data under {} (see README for download steps)", self.arch, root.display()))
    }
}

/// Applies the campaign flag overrides.
pub fn campaign_overrides(
    mut c: CampaignConfig,
    bits: Option<Vec<u8>>,
    stop_msb: Option<f64>,
    max_inputs: Option<usize>,
) -> Result<CampaignConfig> {
    if let Some(b) = bits {
        c.bits = b;
    }
    if stop_msb.is_some() {
        c.stop_msb = stop_msb;
    }
    if max_inputs.is_some() {
        c.max_inputs = max_inputs;
    }
    c.validate()?;
    Ok(c)
}
