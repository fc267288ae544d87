use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Operation;
use crate::error::{Error, Result};
use crate::intervention::{InterventionConfig, InterventionMode};
use crate::model::ModelConfig;
use crate::probe::ProbeConfig;
use crate::train::{Regime, TrainConfig};

/// Everything that determines a run. Its hash is the run id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub op: Operation,
    pub train_frac: f64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
    pub intervention: InterventionConfig,
    /// Null-model trials for `pca_summary.csv`; 0 skips the z-scores.
    pub null_trials: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::new(Operation::Add, Regime::Fast, 0)
    }
}

impl RunConfig {
    pub fn new(op: Operation, regime: Regime, seed: u64) -> Self {
        Self {
            op,
            train_frac: 0.5,
            model: ModelConfig {
                n_layers: regime.n_layers(),
                ..ModelConfig::default()
            },
            train: TrainConfig {
                seed,
                max_steps: match regime {
                    Regime::Fast => 20_000,
                    Regime::Slow => 600_000,
                },
                ..TrainConfig::for_regime(regime)
            },
            probe: ProbeConfig::default(),
            intervention: InterventionConfig::default(),
            null_trials: 200,
        }
    }

    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::MissingArtifact {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::from_toml(&text)
    }

    /// Parses a TOML config. Unspecified fields take the defaults of the
    /// file's `train.regime` (fast if absent).
    pub fn from_toml(text: &str) -> Result<Self> {
        let value: toml::Value = toml::from_str(text)?;
        let regime = value
            .get("train")
            .and_then(|t| t.get("regime"))
            .and_then(|r| r.as_str())
            .map(str::parse)
            .transpose()?
            .unwrap_or(Regime::Fast);
        let op = value
            .get("op")
            .and_then(|o| o.as_str())
            .map(str::parse)
            .transpose()?
            .unwrap_or(Operation::Add);
        let seed = value
            .get("train")
            .and_then(|t| t.get("seed"))
            .and_then(|s| s.as_integer())
            .unwrap_or(0) as u64;
        let base = serde_json::to_value(Self::new(op, regime, seed))?;
        let overlay = serde_json::to_value(&value)?;
        let merged = merge(base, overlay);
        let cfg: Self = serde_json::from_value(merged).map_err(|e| Error::InvalidConfig(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.intervention.validate()?;
        if !(self.train_frac > 0.0 && self.train_frac < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "train_frac {} outside (0, 1)",
                self.train_frac
            )));
        }
        if self.model.n_layers != self.train.regime.n_layers() {
            log::warn!(
                "{} layers with the {} regime (its default is {})",
                self.model.n_layers,
                self.train.regime,
                self.train.regime.n_layers()
            );
        }
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    pub fn run_id(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Human-readable directory name ending in the run id.
    pub fn dir_name(&self) -> String {
        let t = &self.train;
        let mut name = format!("{}-{}-lr{}-wd{}-s{}", self.op, t.regime, t.lr, t.weight_decay, t.seed);
        let iv = &self.intervention;
        match iv.mode {
            InterventionMode::None => {}
            m if m.is_suppression() => name.push_str(&format!("-{}{}", m, iv.strength)),
            m => name.push_str(&format!("-{}{}", m, iv.kick_gain)),
        }
        format!("{name}-{}", self.run_id())
    }
}

/// Recursively overlays `top` onto `base` (objects merge, everything else
/// replaces).
fn merge(base: serde_json::Value, top: serde_json::Value) -> serde_json::Value {
    use serde_json::Value;
    match (base, top) {
        (Value::Object(mut b), Value::Object(t)) => {
            for (k, v) in t {
                let merged = match b.remove(&k) {
                    Some(old) => merge(old, v),
                    None => v,
                };
                b.insert(k, merged);
            }
            Value::Object(b)
        }
        (_, t) => t,
    }
}
