//! The persisted run configuration: defaults, then a JSON file, then flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use vicinity::attn::{AttnConfig, EncodingKind};
use vicinity::segnet::{DeskNetConfig, ModelConfig};
use vicinity::synth::{SplitSizes, SynthParams};
use vicinity::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub splits: SplitSizes,
    pub n_x: usize,
    pub n_y: usize,
    pub patch_px: usize,
    pub synth: SynthParams,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            splits: SplitSizes::default(),
            n_x: 16,
            n_y: 16,
            patch_px: 32,
            synth: SynthParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MafSection {
    pub k: usize,
    pub dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub encoding: EncodingKind,
    pub lambda: f64,
}

impl Default for MafSection {
    fn default() -> Self {
        let a = AttnConfig::desk(2);
        MafSection {
            k: a.k,
            dim: a.dim,
            heads: a.heads,
            head_dim: a.head_dim,
            encoding: a.encoding,
            lambda: TrainConfig::desk().lambda,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lr0: f64,
    pub momentum: f64,
    pub decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub cap_per_class: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::desk();
        TrainSection {
            lr0: t.lr0,
            momentum: t.momentum,
            decay: t.decay,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            patience: t.patience,
            cap_per_class: t.cap_per_class,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSection,
    pub net: DeskNetConfig,
    pub maf: MafSection,
    pub train: TrainSection,
    pub paths: Paths,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            net: self.net.clone(),
            attn: AttnConfig {
                dim: self.maf.dim,
                heads: self.maf.heads,
                head_dim: self.maf.head_dim,
                k: self.maf.k,
                encoding: self.maf.encoding,
            },
            seed: self.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            lr0: t.lr0,
            momentum: t.momentum,
            decay: t.decay,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            patience: t.patience,
            lambda: self.maf.lambda,
            cap_per_class: t.cap_per_class,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.net.patch_px != self.data.patch_px {
            bail!(
                "net.patch_px {} differs from data.patch_px {}",
                self.net.patch_px,
                self.data.patch_px
            );
        }
        self.net.validate()?;
        if self.maf.k > 0 {
            self.model_config().attn.validate()?;
        }
        self.train_config().validate()?;
        self.data.synth.validate()?;
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> anyhow::Result<()> {
        std::fs::write(
            dir.join("config.json"),
            serde_json::to_string_pretty(self)? + "\n",
        )
        .with_context(|| format!("writing config to {}", dir.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_documents_fill_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"maf": {"k": 0}, "seed": 3}"#).unwrap();
        assert_eq!(c.maf.k, 0);
        assert_eq!(c.maf.dim, 64);
        assert_eq!(c.train_config().seed, 3);
        assert_eq!(c.model_config().seed, 3);
        c.validate().unwrap();
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"maf": {"kk": 1}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"extra": 1}"#).is_err());
        assert!(
            serde_json::from_str::<RunConfig>(r#"{"data": {"synth": {"marker": 1}}}"#).is_err()
        );
    }

    #[test]
    fn round_trip() {
        let c = RunConfig::default();
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
