//! Run configuration: one JSON document drives every CLI command.
//!
//! A config file may specify any subset of the sections; everything else
//! takes the documented defaults, and the fully resolved result is written
//! back into the run directory so a run can be reproduced from its own
//! artifacts. Unknown keys are rejected at every level to catch typos
//! before they silently fall back to defaults.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderSpec;
use crate::error::{Error, Result};
use crate::meta::AdaptConfig;
use crate::network::NetworkConfig;
use crate::trainer::TrainConfig;

/// Union of all command inputs. Loss weights live inside the `train` and
/// `adapt` sections, matching where they act.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub adapt: AdaptConfig,
    pub encoder: EncoderSpec,
    pub hr_dir: Option<PathBuf>,
    pub lr_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            network: NetworkConfig::default(),
            train: TrainConfig::default(),
            adapt: AdaptConfig::default(),
            encoder: EncoderSpec::stub(),
            hr_dir: None,
            lr_dir: None,
            out_dir: None,
        }
    }
}

impl RunConfig {
    /// Parses a config document. Never panics on malformed input; any
    /// JSON or schema violation comes back as a usage error.
    pub fn from_json(bytes: &[u8]) -> Result<RunConfig> {
        serde_json::from_slice(bytes).map_err(|e| Error::Config(format!("run config: {e}")))
    }

    /// The fully resolved document, defaults applied, for provenance.
    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("run config serializes")
    }

    /// Semantic validation across sections. Shape consistency between the
    /// encoder and the alignment module is checked here so a bad pairing
    /// fails before any data is touched.
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.train.validate()?;
        self.adapt.validate()?;
        self.encoder.validate()?;
        if self.encoder.embed_dim != self.network.clip_dim {
            return Err(Error::Config(format!(
                "encoder embed_dim {} does not match network clip_dim {}",
                self.encoder.embed_dim, self.network.clip_dim
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_yields_the_documented_defaults() {
        let cfg = RunConfig::from_json(b"{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.train.learning_rate, 1e-4);
        assert_eq!(cfg.train.batch_size, 16);
        assert_eq!(cfg.network.scale, 2);
        assert_eq!(cfg.encoder, EncoderSpec::stub());
        assert!(cfg.out_dir.is_none());
        cfg.validate().unwrap();
    }

    #[test]
    fn partial_sections_keep_the_remaining_defaults() {
        let cfg = RunConfig::from_json(br#"{"train": {"learning_rate": 5e-4}}"#).unwrap();
        assert_eq!(cfg.train.learning_rate, 5e-4);
        assert_eq!(cfg.train.batch_size, 16);

        let cfg = RunConfig::from_json(br#"{"network": {"scale": 4}}"#).unwrap();
        assert_eq!(cfg.network.scale, 4);
        assert_eq!(cfg.network.backbone_channels, 64);
    }

    #[test]
    fn unknown_keys_are_rejected_at_every_level() {
        for doc in [
            br#"{"turbo": true}"#.as_slice(),
            br#"{"train": {"turbo": 1}}"#.as_slice(),
            br#"{"network": {"bogus": 1}}"#.as_slice(),
            br#"{"adapt": {"steps": 1}}"#.as_slice(),
        ] {
            let err = RunConfig::from_json(doc).unwrap_err();
            assert!(err.is_usage(), "{err} should be a usage error");
        }
    }

    #[test]
    fn malformed_json_is_a_usage_error_not_a_panic() {
        for doc in [b"".as_slice(), b"{".as_slice(), b"[1, 2".as_slice(), b"\xff\xfe".as_slice()] {
            assert!(RunConfig::from_json(doc).unwrap_err().is_usage());
        }
    }

    #[test]
    fn resolved_document_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.network.scale = 4;
        cfg.train.epochs = 3;
        cfg.hr_dir = Some(PathBuf::from("/data/hr"));
        let back = RunConfig::from_json(cfg.to_json_pretty().as_bytes()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn validate_cross_checks_encoder_and_alignment_dims() {
        let mut cfg = RunConfig::default();
        cfg.encoder = EncoderSpec::stub_with_dim(64);
        let err = cfg.validate().unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("64") && msg.contains("512"), "{msg}");
    }
}
