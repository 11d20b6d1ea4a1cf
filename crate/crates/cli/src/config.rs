//! The TOML run configuration shared by all subcommands.

use std::path::Path;

use fstcn::clip::ClipSpec;
use fstcn::net::NetworkConfig;
use fstcn::subseed;
use fstcn::synth::SynthConfig;
use fstcn::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Every knob of a run. Unknown keys are rejected; every section has full
/// defaults, so a config file may specify only what it changes.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub clip: ClipSpec,
    pub net: NetworkConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        if !path.exists() {
            return Err(CliError::Validation(format!("config file {} does not exist", path.display())));
        }
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.clip.validate()?;
        self.net.validate()?;
        self.train.validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string_pretty(self).map_err(|e| CliError::Runtime(format!("config serialization: {e}")))
    }

    /// Re-derive all subsystem seeds from one root seed.
    pub fn apply_root_seed(&mut self, root: u64) {
        self.synth.seed = subseed(root, "synth");
        self.train.seed = subseed(root, "train");
    }
}
