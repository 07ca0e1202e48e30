//! Run configuration: one JSON document plus command-line overrides.

use std::path::{Path, PathBuf};

use roma_core::gradcheck::GradcheckConfig;
use roma_core::synth::GeneratorSpec;
use roma_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    pub fn index(self) -> usize {
        match self {
            Self::Train => 0,
            Self::Val => 1,
            Self::Test => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataOptions {
    /// Fraction of training texts re-paired with a wrong scene.
    pub noise_rate: f64,
    /// Train/validation/test fractions of the scenes.
    pub split: [f64; 3],
}

impl Default for DataOptions {
    fn default() -> Self {
        Self {
            noise_rate: 0.13,
            split: [0.8, 0.1, 0.1],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub split: SplitName,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { split: SplitName::Test }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossScanOptions {
    pub alphas: Vec<f64>,
    /// Interior grid points on `(0, 1)`; the scan also includes `S = 0`.
    pub grid: usize,
}

impl Default for LossScanOptions {
    fn default() -> Self {
        Self {
            alphas: vec![0.5, 1.0, 2.0, 4.0],
            grid: 999,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttnDumpOptions {
    pub scenes: Vec<usize>,
    pub texts: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub trainlog: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
    pub loss_scan: Option<PathBuf>,
    pub attn_dump: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed. Generation, splitting, noise, initialization, batching
    /// and gradient checks all derive from it.
    pub seed: u64,
    pub generator: GeneratorSpec,
    pub data: DataOptions,
    pub train: TrainConfig,
    pub eval: EvalOptions,
    pub gradcheck: GradcheckConfig,
    pub loss_scan: LossScanOptions,
    pub attn_dump: AttnDumpOptions,
    pub paths: Paths,
    pub threads: Option<usize>,
}

/// The part of the configuration that determines results.
#[derive(Serialize)]
struct DigestView<'a> {
    seed: u64,
    generator: &'a GeneratorSpec,
    data: &'a DataOptions,
    train: &'a TrainConfig,
    eval: &'a EvalOptions,
    gradcheck: &'a GradcheckConfig,
    loss_scan: &'a LossScanOptions,
    attn_dump: &'a AttnDumpOptions,
}

const NESTED_SEEDS: [&str; 3] = ["generator", "train", "gradcheck"];

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, String> {
        let raw: serde_json::Value = serde_json::from_str(text).map_err(|e| e.to_string())?;
        for section in NESTED_SEEDS {
            if raw.get(section).and_then(|s| s.get("seed")).is_some() {
                return Err(format!("{section}.seed is derived from the top-level seed; set `seed` instead"));
            }
        }
        let mut config: Self = serde_json::from_value(raw).map_err(|e| e.to_string())?;
        config.sync_seeds();
        Ok(config)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::file(path, e))?;
        Self::from_json(&text).map_err(|e| CliError::file(path, e))
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.sync_seeds();
    }

    fn sync_seeds(&mut self) {
        self.generator.seed = self.seed;
        self.train.seed = self.seed;
        self.gradcheck.seed = self.seed;
    }

    pub fn validate(&self) -> CliResult<()> {
        self.generator.validate()?;
        self.train.validate()?;
        self.gradcheck.validate()?;
        if !(0.0..=1.0).contains(&self.data.noise_rate) {
            return Err(CliError::Usage(format!(
                "data.noise_rate must lie in [0, 1], got {}",
                self.data.noise_rate
            )));
        }
        if self.loss_scan.grid < 10 {
            return Err(CliError::Usage(format!(
                "loss_scan.grid must be at least 10, got {}",
                self.loss_scan.grid
            )));
        }
        if let Some(a) = self.loss_scan.alphas.iter().find(|a| !(**a > 0.0) || !a.is_finite()) {
            return Err(CliError::Usage(format!("loss_scan alphas must be positive, got {a}")));
        }
        if self.threads == Some(0) {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the result-determining settings. Paths and thread count
    /// are excluded.
    pub fn digest(&self) -> String {
        let view = DigestView {
            seed: self.seed,
            generator: &self.generator,
            data: &self.data,
            train: &self.train,
            eval: &self.eval,
            gradcheck: &self.gradcheck,
            loss_scan: &self.loss_scan,
            attn_dump: &self.attn_dump,
        };
        let bytes = serde_json::to_vec(&view).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }
}
