//! TOML run configuration shared by every command.
//!
//! ```toml
//! [impact]
//! family = "gru-elc-1d"
//! stride = 20
//!
//! [model]
//! hidden_width = 8
//! scales = 2
//! head = ["P16", "U", "Cn"]
//!
//! [train]
//! epochs = 25
//! median_balancing = false   # weight_c = median(freq) / freq_c
//!
//! [synth]
//! kind = "beacon-parity"
//! distance = 8
//! ```
//!
//! Every key is optional; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::impact::ImpactConfig;
use crate::netpbm::load_manifest;
use crate::seg::{LabeledGrid, SegModelConfig, TrainConfig};
use crate::synth::SynthTaskSpec;

/// Where training and evaluation data come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Manifest of training pairs; when unset, `[synth]` generates them.
    pub train_manifest: Option<PathBuf>,
    /// Manifest of held-out pairs; when unset, `[synth]` generates them.
    pub test_manifest: Option<PathBuf>,
    /// Held-out samples generated after the `synth.samples` training ones.
    pub test_samples: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_manifest: None,
            test_manifest: None,
            test_samples: 100,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub impact: ImpactConfig,
    pub model: SegModelConfig,
    pub train: TrainConfig,
    pub synth: SynthTaskSpec,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::data(path, e.to_string()))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Checks the sections used by seg training and evaluation.
    pub fn validate_seg(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.data.train_manifest.is_none() || self.data.test_manifest.is_none() {
            self.synth.validate()?;
            if self.synth.num_classes != self.model.num_classes {
                return Err(Error::Config(format!(
                    "synth.num_classes = {} but model.num_classes = {}",
                    self.synth.num_classes, self.model.num_classes
                )));
            }
        }
        Ok(())
    }

    /// Training and held-out samples. Synthetic data is generated as one
    /// stream of `synth.samples + data.test_samples` samples, split in order.
    pub fn datasets(&self) -> Result<(Vec<LabeledGrid>, Vec<LabeledGrid>)> {
        let n = self.model.num_classes;
        let synthetic = || -> Result<(Vec<LabeledGrid>, Vec<LabeledGrid>)> {
            let spec = SynthTaskSpec {
                samples: self.synth.samples + self.data.test_samples,
                ..self.synth.clone()
            };
            let mut all = spec.generate()?;
            let test = all.split_off(self.synth.samples);
            Ok((all, test))
        };
        match (&self.data.train_manifest, &self.data.test_manifest) {
            (Some(tr), Some(te)) => Ok((load_manifest(tr, n)?, load_manifest(te, n)?)),
            (Some(tr), None) => Ok((load_manifest(tr, n)?, synthetic()?.1)),
            (None, Some(te)) => Ok((synthetic()?.0, load_manifest(te, n)?)),
            (None, None) => synthetic(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::impact::ImpactFamily;
    use crate::seg::HeadStage;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn partial_sections_override() {
        let cfg = RunConfig::from_toml(
            "[impact]\nfamily = \"gru-elc-1d\"\nstride = 5\n[model]\nhead = [\"U\", \"C8\", \"Cn\"]\n[train]\nepochs = 3\ncrop = [16, 16]\n",
        )
        .unwrap();
        assert_eq!(cfg.impact.family, ImpactFamily::GruElc);
        assert_eq!(cfg.impact.stride, 5);
        assert_eq!(cfg.impact.steps, 100);
        assert_eq!(cfg.model.head[1], HeadStage::Conv3(8));
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.crop, Some([16, 16]));
        assert_eq!(cfg.train.base_lr, 0.001);
    }

    #[test]
    fn unknown_keys_rejected() {
        for text in ["[train]\nepoch = 3\n", "[nope]\n", "seed = 1\n", "[model]\nhead = [\"Q\"]\n"] {
            assert!(matches!(RunConfig::from_toml(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn toml_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.train.crop = Some([8, 8]);
        cfg.data.train_manifest = Some("a/m.tsv".into());
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn synthetic_split() {
        let mut cfg = RunConfig::default();
        cfg.synth.samples = 5;
        cfg.data.test_samples = 2;
        let (tr, te) = cfg.datasets().unwrap();
        assert_eq!((tr.len(), te.len()), (5, 2));
        let mut bigger = cfg.clone();
        bigger.synth.samples = 6;
        assert_eq!(bigger.datasets().unwrap().0[..5], tr[..]);
    }

    #[test]
    fn class_count_must_agree() {
        let mut cfg = RunConfig::default();
        cfg.synth.num_classes = 3;
        assert!(cfg.validate_seg().is_err());
    }
}
