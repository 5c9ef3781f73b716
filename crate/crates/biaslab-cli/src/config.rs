//! The TOML run configuration. Every module's config is mirrored here;
//! unknown keys are rejected, and each command echoes its fully resolved
//! configuration into the output directory so runs can be reproduced
//! bit-for-bit.

use std::path::Path;

use serde::{Deserialize, Serialize};

use biaslab::cbi::TransformSpec;
use biaslab::error::{Error, Result};
use biaslab::gebi::GebiConfig;
use biaslab::model::TrainConfig;
use biaslab::stylemix::StdaConfig;
use biaslab::synthdata::GeneratorSpec;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub input_side: usize,
    pub classes: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_side: 32,
            classes: 2,
            init_seed: 7,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CbiCommandConfig {
    /// Artifact inserted by `audit-cbi`.
    pub transform: TransformSpec,
    /// Stamp side for procedural banks, as a fraction of the image side.
    pub stamp_side_frac: f64,
    /// Bank seed for the audit transform (kept apart from training banks).
    pub bank_seed: u64,
}

impl Default for CbiCommandConfig {
    fn default() -> Self {
        CbiCommandConfig {
            transform: TransformSpec::frame(),
            stamp_side_frac: 0.5,
            bank_seed: 9001,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TdaCommandConfig {
    pub transform: TransformSpec,
    pub probabilities: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Stamp bank seed used during training (disjoint from the test bank).
    pub train_bank_seed: u64,
    /// Stamp bank seed for the bias-inserted test copies.
    pub test_bank_seed: u64,
}

impl Default for TdaCommandConfig {
    fn default() -> Self {
        TdaCommandConfig {
            transform: TransformSpec::frame(),
            probabilities: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            seeds: vec![1, 2, 3],
            train_bank_seed: 5001,
            test_bank_seed: 9001,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeedbackCommandConfig {
    pub alpha: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub lr_decay: f64,
    pub transform: TransformSpec,
    pub train_bank_seed: u64,
}

impl Default for FeedbackCommandConfig {
    fn default() -> Self {
        FeedbackCommandConfig {
            alpha: 0.5,
            epochs: 6,
            learning_rate: 0.05,
            batch_size: 16,
            lr_decay: 0.9,
            transform: TransformSpec::frame(),
            train_bank_seed: 5001,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GebiExportConfig {
    /// How many attribution maps to export as PGM files for inspection.
    pub maps: usize,
    /// Write a per-cluster contact-sheet montage.
    pub contact_sheets: bool,
}

impl Default for GebiExportConfig {
    fn default() -> Self {
        GebiExportConfig {
            maps: 8,
            contact_sheets: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReproConfig {
    /// Per-class size of the reduced dataset used for the mitigation
    /// stages (the audit stages run on the full `[data]` spec).
    pub mitigation_n_per_class: usize,
}

impl Default for ReproConfig {
    fn default() -> Self {
        ReproConfig {
            mitigation_n_per_class: 300,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; 0 keeps the default.
    pub threads: usize,
    pub data: GeneratorSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub gebi: GebiConfig,
    pub gebi_export: GebiExportConfig,
    pub cbi: CbiCommandConfig,
    pub tda: TdaCommandConfig,
    pub feedback: FeedbackCommandConfig,
    pub stda: StdaConfig,
    pub repro: ReproConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Apply the `--seed` override to every stage seed so one flag pins the
    /// whole run.
    pub fn override_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.data.seed = seed;
        self.train.seed = seed;
        self.gebi.seed = seed;
        self.stda.seed = seed;
    }

    pub fn echo(&self, dir: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("config echo: {e}")))?;
        std::fs::write(dir.join("config.toml"), text)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_roundtrips_through_toml() {
        let cfg = RunConfig::default();
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back.data.n_per_class, cfg.data.n_per_class);
        assert_eq!(back.tda.probabilities, cfg.tda.probabilities);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<RunConfig>("definitely_not_a_key = 1").unwrap_err();
        assert!(err.to_string().contains("definitely_not_a_key"));
        let err =
            toml::from_str::<RunConfig>("[train]\nepochs = 2\nwhatever = 3").unwrap_err();
        assert!(err.to_string().contains("whatever"));
    }
}
