//! Experiment description: architecture widths, ablation flags, optimizer
//! settings, schedule and seeds. Serialized as flat JSON; unknown keys are
//! rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nets::{DiscriminatorConfig, EncoderConfig};
use crate::synthdata::Domain;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run_id: String,

    /// Second encoder/head pair trained on source images in target style.
    pub symmetric: bool,
    /// Adversarial alignment of each encoder's features across domains.
    pub feature_align: bool,
    /// Complementary channel gating of the two styles.
    pub ddsm: bool,
    /// Shared channel-impact attention of the two styles.
    pub dusm: bool,

    pub lambda_es: f64,
    pub lambda_et: f64,

    /// SGD for encoders and selectors.
    pub encoder_lr: f64,
    /// SGD for decoder heads.
    pub head_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Adam for discriminators.
    pub disc_lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub poly_power: f64,
    /// Final learning rate as a fraction of the initial one.
    pub lr_floor: f64,

    pub iterations: usize,
    pub batch_size: usize,
    pub init_seed: u64,
    pub data_seed: u64,
    /// Evaluate every this many iterations (0: only at the end).
    pub eval_interval: usize,
    /// Record losses every this many iterations (0: never).
    pub log_interval: usize,
    pub augment: bool,

    pub source_domain: Domain,
    pub target_domain: Domain,

    pub encoder_widths: Vec<usize>,
    pub encoder_refine_convs: usize,
    pub head_width: usize,
    /// Gating bottleneck `C' = C / ddsm_reduction`.
    pub ddsm_reduction: usize,
    /// Universal feature width `C'' = C / dusm_reduction`.
    pub dusm_reduction: usize,
    pub disc_channels: Vec<usize>,
    pub disc_slope: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            run_id: "run".into(),
            symmetric: true,
            feature_align: true,
            ddsm: true,
            dusm: true,
            lambda_es: 0.005,
            lambda_et: 0.005,
            encoder_lr: 0.01,
            head_lr: 0.02,
            momentum: 0.9,
            weight_decay: 5e-4,
            disc_lr: 2.5e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.99,
            poly_power: 0.9,
            lr_floor: 0.01,
            iterations: 3000,
            batch_size: 4,
            init_seed: 0,
            data_seed: 0,
            eval_interval: 0,
            log_interval: 50,
            augment: true,
            source_domain: Domain::A,
            target_domain: Domain::B,
            encoder_widths: vec![16, 32, 64],
            encoder_refine_convs: 0,
            head_width: 32,
            ddsm_reduction: 4,
            dusm_reduction: 2,
            disc_channels: vec![64, 128, 256],
            disc_slope: 0.2,
        }
    }
}

impl RunConfig {
    /// Single encoder/head trained on source labels only.
    pub fn source_only() -> Self {
        RunConfig {
            symmetric: false,
            feature_align: false,
            ddsm: false,
            dusm: false,
            ..RunConfig::default()
        }
    }

    /// Parses JSON, naming any unknown key in the error.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(format!("run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            widths: self.encoder_widths.clone(),
            refine_convs: self.encoder_refine_convs,
        }
    }

    pub fn discriminator(&self) -> DiscriminatorConfig {
        DiscriminatorConfig {
            channels: self.disc_channels.clone(),
            slope: self.disc_slope,
            ..DiscriminatorConfig::default()
        }
    }

    /// Feature channels C.
    pub fn channels(&self) -> usize {
        self.encoder_widths.last().copied().unwrap_or(0)
    }

    /// Extra head input channels C''.
    pub fn universal_channels(&self) -> usize {
        self.channels() / self.dusm_reduction.max(1)
    }

    pub fn gate_channels(&self) -> usize {
        self.channels() / self.ddsm_reduction.max(1)
    }

    /// Whether target images are scored by the two-head ensemble.
    pub fn ensemble(&self) -> bool {
        self.symmetric
    }

    /// Stable digest of every field.
    pub fn hash(&self) -> u64 {
        let digest = Sha256::digest(serde_json::to_vec(self).expect("config serializes"));
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }

    pub fn hash_hex(&self) -> String {
        format!("{:016x}", self.hash())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        for (flag, on) in [("feature_align", self.feature_align), ("ddsm", self.ddsm), ("dusm", self.dusm)] {
            if on && !self.symmetric {
                return bad(format!("{flag} needs the symmetric two-encoder model"));
            }
        }
        for (name, v) in [("lambda_es", self.lambda_es), ("lambda_et", self.lambda_et), ("weight_decay", self.weight_decay)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        for (name, v) in [("encoder_lr", self.encoder_lr), ("head_lr", self.head_lr), ("disc_lr", self.disc_lr), ("poly_power", self.poly_power)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [("momentum", self.momentum), ("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2), ("lr_floor", self.lr_floor)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1), got {v}"));
            }
        }
        if self.iterations == 0 || self.batch_size == 0 {
            return bad("iterations and batch_size must be positive".into());
        }
        if self.source_domain == self.target_domain {
            return bad("source and target domains must differ".into());
        }
        self.encoder().validate()?;
        self.discriminator().validate()?;
        if self.head_width == 0 || self.ddsm_reduction == 0 || self.dusm_reduction == 0 {
            return bad("head_width, ddsm_reduction and dusm_reduction must be positive".into());
        }
        if self.gate_channels() == 0 || self.universal_channels() == 0 {
            return bad(format!(
                "reductions {}/{} leave no channels out of {}",
                self.ddsm_reduction,
                self.dusm_reduction,
                self.channels()
            ));
        }
        Ok(())
    }

    /// Checks the image size against the encoder stride and, when aligning
    /// features, the discriminator's minimum input.
    pub fn validate_image(&self, h: usize, w: usize) -> Result<()> {
        let (fh, fw) = self.encoder().check_input(h, w)?;
        if self.feature_align {
            let d = self.discriminator();
            if d.output_size(fh, fw).is_none() {
                return Err(Error::Config(format!(
                    "{h}x{w} images give {fh}x{fw} features; the discriminator needs at least {0}x{0}",
                    d.min_feature_size()
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
        assert_eq!((c.channels(), c.gate_channels(), c.universal_channels()), (64, 16, 32));
        RunConfig::source_only().validate().unwrap();
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::from_json(r#"{"symetric": true}"#).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("symetric"), "{err}");
    }

    #[test]
    fn flag_dependencies() {
        let c = RunConfig {
            symmetric: false,
            ..RunConfig::default()
        };
        assert!(c.validate().is_err());
        let c = RunConfig {
            lambda_es: -1.0,
            ..RunConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn image_size_checks() {
        let c = RunConfig::default();
        c.validate_image(96, 96).unwrap();
        assert!(c.validate_image(64, 64).is_err());
        assert!(c.validate_image(100, 96).is_err());
        RunConfig::source_only().validate_image(64, 64).unwrap();
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let b = RunConfig {
            init_seed: 1,
            ..RunConfig::default()
        };
        assert_eq!(a.hash(), RunConfig::default().hash());
        assert_ne!(a.hash(), b.hash());
    }
}
