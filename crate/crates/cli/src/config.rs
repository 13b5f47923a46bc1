//! Run configuration: TOML file with one table per concern, overridden by
//! flags, written back out as `config.resolved`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use featmix_core::bench::{BenchConfig, BenchShape};
use featmix_core::datagen::GeneratorSpec;
use featmix_core::features::derive_seed;
use featmix_core::model::{SynthMethod, TrainConfig};
use featmix_core::scores::{ScoreMethod, ScoreParams};

use crate::CliError;

pub const SNAPSHOT_NAME: &str = "config.resolved";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunSection {
    pub command: String,
    pub out_dir: PathBuf,
    pub seed: u64,
    /// `gen` also writes CSV copies of the datasets.
    pub write_csv: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct InputSection {
    /// Training dataset file; generated from `[data]` when absent.
    pub train_data: Option<PathBuf>,
    /// Test dataset file; generated from `[data]` when absent.
    pub test_data: Option<PathBuf>,
    /// Model file for `eval`.
    pub model: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoreSection {
    pub method: ScoreMethod,
    pub temperature: f64,
    pub gen_gamma: f64,
    pub gen_top_m: Option<usize>,
}

impl Default for ScoreSection {
    fn default() -> Self {
        let p = ScoreParams::default();
        Self {
            method: ScoreMethod::default(),
            temperature: p.temperature,
            gen_gamma: p.gen_gamma,
            gen_top_m: p.gen_top_m,
        }
    }
}

impl ScoreSection {
    pub fn params(&self) -> ScoreParams {
        ScoreParams {
            temperature: self.temperature,
            gen_gamma: self.gen_gamma,
            gen_top_m: self.gen_top_m,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TheoremChoice {
    #[default]
    All,
    One,
    Two,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VerifySection {
    pub theorem: TheoremChoice,
    pub dim: usize,
    /// `mu_l - mu_c`, per coordinate.
    pub mu_offset: f64,
    pub n_swap: usize,
    pub trials: usize,
    /// Feature Mixing invocations for the deviation bound.
    pub bound_trials: usize,
    /// Rows per deviation-bound invocation.
    pub bound_rows: usize,
}

impl Default for VerifySection {
    fn default() -> Self {
        Self {
            theorem: TheoremChoice::All,
            dim: 32,
            mu_offset: 2.0,
            n_swap: 8,
            trials: 100_000,
            bound_trials: 1000,
            bound_rows: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSection {
    /// Swap counts; empty means `d/16, d/8, d/4, d/2` of the first modality.
    pub n_values: Vec<usize>,
    pub replicates: usize,
    pub parallel: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            n_values: Vec::new(),
            replicates: 1,
            parallel: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompareSection {
    pub methods: Vec<SynthMethod>,
    pub replicates: usize,
    pub parallel: usize,
}

impl Default for CompareSection {
    fn default() -> Self {
        Self {
            methods: SynthMethod::ALL.to_vec(),
            replicates: 1,
            parallel: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ShapePreset {
    #[default]
    Detection,
    Segmentation,
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchSection {
    pub preset: ShapePreset,
    /// Concrete shape; overwritten from the preset unless it is `custom`.
    pub shape: BenchShape,
    pub methods: Vec<SynthMethod>,
    pub timing: BenchConfig,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            preset: ShapePreset::Detection,
            shape: BenchShape::detection(),
            methods: vec![
                SynthMethod::FeatureMixing,
                SynthMethod::Mixup,
                SynthMethod::Npmix,
                SynthMethod::Vos,
            ],
            timing: BenchConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub run: RunSection,
    pub inputs: InputSection,
    pub data: GeneratorSpec,
    pub train: TrainConfig,
    pub score: ScoreSection,
    pub verify: VerifySection,
    pub sweep: SweepSection,
    pub compare: CompareSection,
    pub bench: BenchSection,
}

/// TOML integers are signed 64-bit, so derived seeds keep 63 bits.
pub fn sub_seed(seed: u64, label: &str) -> u64 {
    derive_seed(seed, label) >> 1
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Usage(format!("config does not serialize: {e}")))
    }

    /// Sets the master seed and every seed derived from it.
    pub fn apply_seed(&mut self, seed: u64) {
        self.run.seed = seed;
        self.data.seed = sub_seed(seed, "data");
        self.train.seed = sub_seed(seed, "train");
        self.bench.timing.seed = sub_seed(seed, "bench");
    }

    /// Fills preset-dependent values so the snapshot is self-contained.
    pub fn resolve(&mut self) {
        match self.bench.preset {
            ShapePreset::Detection => self.bench.shape = BenchShape::detection(),
            ShapePreset::Segmentation => self.bench.shape = BenchShape::segmentation(),
            ShapePreset::Custom => {}
        }
    }

    pub fn write_snapshot(&self) -> Result<PathBuf, CliError> {
        let path = self.run.out_dir.join(SNAPSHOT_NAME);
        std::fs::write(&path, self.to_toml()?).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }
}
