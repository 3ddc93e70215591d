//! Run manifest: every run records its fully resolved configuration,
//! seeds, and the conventions that fill gaps the configuration cannot
//! express, so results stay attributable and reproducible.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: u32,
    /// Which command produced this run.
    pub command: String,
    pub seed: u64,
    pub config: RunConfig,
    /// Active row of the ablation grid, e.g. `"od+pa1+pa2"`.
    pub ablation: String,
    /// Recorded conventions: adopted defaults and behavioral choices
    /// that are fixed by this implementation rather than the config.
    pub notes: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        let mut notes = BTreeMap::new();
        notes.insert(
            "momentum_m".into(),
            format!("{} (MoCo published default; adopted, not tuned)", config.hyper.momentum_m),
        );
        notes.insert(
            "bank_capacity".into(),
            format!("{} (MoCo published default; adopted, not tuned)", config.hyper.bank_capacity),
        );
        notes.insert("eps_div".into(), format!("{}", config.hyper.eps_div));
        notes.insert("timestep_sampling".into(), "uniform on {1..T}, one draw per sample".into());
        notes.insert("banks_at_phase_transition".into(), "retained".into());
        notes.insert(
            "bank_initialization".into(),
            "prefilled from the momentum feature table when the momentum encoder is created".into(),
        );
        notes.insert("aug_loss_denominator".into(), "batch-level index set".into());
        notes.insert("exclude_self".into(), format!("{}", config.exclude_self));
        notes.insert(
            "augmentations".into(),
            "random resized crop, horizontal flip, color jitter, random grayscale".into(),
        );
        notes.insert("precision_averaging".into(), "per-query mean".into());
        let mut parts = Vec::new();
        if config.use_od {
            parts.push("od");
        }
        if config.use_pa1 {
            parts.push("pa1");
        }
        if config.use_pa2 {
            parts.push("pa2");
        }
        RunManifest {
            version: MANIFEST_VERSION,
            command: command.to_string(),
            seed: config.seed,
            config: config.clone(),
            ablation: parts.join("+"),
            notes,
        }
    }

    pub fn note(&mut self, key: &str, value: impl Into<String>) {
        self.notes.insert(key.to_string(), value.into());
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::corrupt(format!("manifest {}: {e}", path.display())))
    }
}
