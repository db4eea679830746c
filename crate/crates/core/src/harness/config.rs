use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::catalog::DEFAULT_NOVEL;
use crate::adversary::AttackScenario;
use crate::encoding::EncoderProfile;
use crate::error::{Error, Result};
use crate::federation::FederationConfig;
use crate::inference::DisagreementMode;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Dimensions {
    /// feature dimension
    pub d: usize,
    /// embedding dimension
    pub k: usize,
}

impl Default for Dimensions {
    fn default() -> Self {
        Self { d: 32, k: 64 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub samples_per_concept: usize,
    pub noise_std: f64,
    /// Share of each seen concept's samples held out for testing.
    pub test_fraction: f64,
    pub dirichlet_beta: f64,
    /// Scale each concept's feature noise by its disagreement relative to
    /// the catalog mean.
    pub noise_scales_with_disagreement: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            samples_per_concept: 200,
            noise_std: 0.1,
            test_fraction: 0.2,
            dirichlet_beta: 0.5,
            noise_scales_with_disagreement: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConceptConfig {
    /// Concepts to use; empty means every concept in the catalog.
    pub include: Vec<String>,
    /// Held out of all training data.
    pub novel: Vec<String>,
    /// Directory of `<concept_id>.<perspective>.txt` files replacing the
    /// built-in catalog.
    pub descriptions_dir: Option<PathBuf>,
}

impl Default for ConceptConfig {
    fn default() -> Self {
        Self {
            include: Vec::new(),
            novel: DEFAULT_NOVEL.iter().map(|s| (*s).to_owned()).collect(),
            descriptions_dir: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub lambda: f64,
    pub disagreement_mode: DisagreementMode,
    /// Bins for the confidence-vs-disagreement curve.
    pub calibration_bins: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            disagreement_mode: DisagreementMode::Raw,
            calibration_bins: 3,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Stub,
    Remote,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    /// Setting FEDSEM_ENCODER_URL selects the remote backend regardless.
    pub kind: BackendKind,
    pub url: Option<String>,
    pub timeout_secs: f64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Stub,
            url: None,
            timeout_secs: 30.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    /// Texts per encoder for the latency and norm statistics.
    pub latency_corpus_size: usize,
    /// Write the global matrix after every round.
    pub write_snapshots: bool,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            latency_corpus_size: 2000,
            write_snapshots: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dimensions: Dimensions,
    pub data: DataConfig,
    pub concepts: ConceptConfig,
    pub federation: FederationConfig,
    pub inference: InferenceConfig,
    pub encoders: Vec<EncoderProfile>,
    pub encoder_backend: BackendConfig,
    pub report: ReportConfig,
    pub attacks: Vec<AttackScenario>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            output_dir: PathBuf::from("out"),
            dimensions: Dimensions::default(),
            data: DataConfig::default(),
            concepts: ConceptConfig::default(),
            federation: FederationConfig {
                seed: 42,
                ..FederationConfig::default()
            },
            inference: InferenceConfig::default(),
            encoders: EncoderProfile::defaults(),
            encoder_backend: BackendConfig::default(),
            report: ReportConfig::default(),
            attacks: Vec::new(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.resolve();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Propagates the run seed into sub-configs.
    pub fn resolve(&mut self) {
        self.federation.seed = self.seed;
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.resolve();
        self
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the resolved config with the output directory blanked.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let digest = Sha256::digest(c.to_toml()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dimensions.d == 0 || self.dimensions.k == 0 {
            return bad("dimensions must be >= 1".into());
        }
        if self.data.samples_per_concept == 0 {
            return bad("samples_per_concept must be >= 1".into());
        }
        if !(self.data.noise_std >= 0.0) {
            return bad("noise_std must be >= 0".into());
        }
        if !(0.0..1.0).contains(&self.data.test_fraction) {
            return bad("test_fraction must be in [0, 1)".into());
        }
        if !(self.data.dirichlet_beta > 0.0) {
            return bad("dirichlet_beta must be > 0".into());
        }
        if !(0.0..=1.0).contains(&self.inference.lambda) {
            return bad("lambda must be in [0, 1]".into());
        }
        if self.inference.calibration_bins < 2 {
            return bad("calibration_bins must be >= 2".into());
        }
        if self.encoders.len() != 3 {
            return bad(format!("exactly 3 encoders are required, got {}", self.encoders.len()));
        }
        for e in &self.encoders {
            e.validate().map_err(|err| Error::Config(err.to_string()))?;
        }
        if !(self.encoder_backend.timeout_secs > 0.0) {
            return bad("encoder_backend.timeout_secs must be > 0".into());
        }
        if self.federation.seed != self.seed {
            return bad("federation.seed must equal seed".into());
        }
        self.federation.validate()?;
        for a in &self.attacks {
            a.validate()?;
        }
        Ok(())
    }
}
