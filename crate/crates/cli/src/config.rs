use std::path::{Path, PathBuf};

use fedharmony_core::datagen::SyntheticSpec;
use fedharmony_core::federation::{Ablation, FederationConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Fedharmony,
    /// Forces every ablation flag off.
    Fedavg,
}

/// Settings of `verify-theorems`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifySettings {
    pub instances: usize,
    pub steps: usize,
    pub max_labels: usize,
    pub law_tolerance: f64,
    pub decomposition_tolerance: f64,
    pub timing_labels: usize,
    pub timing_clusters: usize,
    pub timing_samples: usize,
    pub timing_repeats: usize,
    /// Runs one instance with a stepsize above the stability limit.
    pub inject_bad_stepsize: bool,
}

impl Default for VerifySettings {
    fn default() -> Self {
        Self {
            instances: 100,
            steps: 50,
            max_labels: 12,
            law_tolerance: 1e-10,
            decomposition_tolerance: 1e-12,
            timing_labels: 64,
            timing_clusters: 8,
            timing_samples: 512,
            timing_repeats: 51,
            inject_bad_stepsize: false,
        }
    }
}

/// Everything one experiment needs. `seed` is required and overrides the
/// nested `data.seed` and `federation.seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default)]
    pub method: Method,
    #[serde(default)]
    pub data: SyntheticSpec,
    #[serde(default)]
    pub federation: FederationConfig,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub verify: VerifySettings,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::Config(format!("invalid config: {e}")))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Applies the seed override, propagates the seed and method, and
    /// validates every section.
    pub fn resolve(mut self, seed_override: Option<u64>) -> Result<Self, CliError> {
        if let Some(s) = seed_override {
            self.seed = s;
        }
        self.data.seed = self.seed;
        self.federation.seed = self.seed;
        if self.method == Method::Fedavg {
            self.federation.flags = Ablation::FEDAVG;
        }
        self.data
            .validate()
            .map_err(|e| CliError::Config(format!("data: {e}")))?;
        self.federation
            .validate()
            .map_err(|e| CliError::Config(format!("federation: {e}")))?;
        let v = &self.verify;
        if v.max_labels < 4 || v.timing_clusters == 0 || v.timing_labels < v.timing_clusters || v.timing_samples < 2 {
            return Err(CliError::Config(
                "verify: need max_labels >= 4 and timing_labels >= timing_clusters >= 1".into(),
            ));
        }
        Ok(self)
    }

    /// `--out` wins over `output_dir`.
    pub fn output(&self, flag: Option<&Path>) -> Result<PathBuf, CliError> {
        flag.map(Path::to_path_buf)
            .or_else(|| self.output_dir.clone())
            .ok_or_else(|| CliError::Config("no output directory: pass --out or set output_dir".into()))
    }
}
