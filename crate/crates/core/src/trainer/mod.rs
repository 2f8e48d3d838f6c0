//! Supervised source training, Mean Teacher UDA with anatomical constraints,
//! and source-free adaptation.

mod augment;
mod loops;
mod losses;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::anatomy::{FilterMode, Penalty};
use crate::error::{Error, Result};
use crate::model::{AdamConfig, ArchConfig, MaskMode};

pub use augment::{augment, reverse_pose, AugmentConfig, AugmentationRecord};
pub use loops::{adapt_sfda, adapt_uda, train_source, EpochLog};
pub use losses::{
    consistency_filter_baseline, consistency_loss, ema_update, l1_distance, ramp_weight, ramp_weight_with,
    task_loss, RampKind,
};

/// Hidden-layer widths; the joint count comes from the skeleton.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Widths {
    pub enc1: usize,
    pub enc2: usize,
    pub dec1: usize,
}

impl Default for Widths {
    fn default() -> Self {
        Widths {
            enc1: 64,
            enc2: 128,
            dec1: 128,
        }
    }
}

impl Widths {
    pub fn arch(&self, joints: usize) -> ArchConfig {
        ArchConfig {
            enc1: self.enc1,
            enc2: self.enc2,
            dec1: self.dec1,
            joints,
        }
    }
}

/// Hyper-parameters of all three training loops.
///
/// `mask_mode` applies to the anatomical loss in UDA and to the whole
/// objective in SFDA; source training always updates every parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub ramp_epochs: usize,
    pub ramp: RampKind,
    pub ema_momentum: f64,
    /// Total epochs; a resumed run stops at the same total.
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_source: usize,
    pub batch_target: usize,
    pub subsample_points: usize,
    pub rotation_deg: f64,
    pub translation: f64,
    pub filter_mode: FilterMode,
    pub mask_mode: MaskMode,
    pub penalty: Penalty,
    pub widths: Widths,
    pub seed: u64,
    /// Where a diverging batch is written before aborting.
    pub replay_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::uda()
    }
}

impl TrainConfig {
    pub fn uda() -> Self {
        TrainConfig {
            lambda1: 0.1,
            lambda2: 1.0,
            ramp_epochs: 40,
            ramp: RampKind::Printed,
            ema_momentum: 0.99,
            epochs: 100,
            lr: 1e-3,
            weight_decay: 1e-5,
            batch_source: 8,
            batch_target: 8,
            subsample_points: 2048,
            rotation_deg: 15.0,
            translation: 0.05,
            filter_mode: FilterMode::TwoOfThree,
            mask_mode: MaskMode::FeatureExtractorOnly,
            penalty: Penalty::L1,
            widths: Widths::default(),
            seed: 0,
            replay_dir: None,
        }
    }

    pub fn source() -> Self {
        TrainConfig::uda()
    }

    pub fn sfda() -> Self {
        TrainConfig {
            ema_momentum: 0.9996,
            epochs: 80,
            mask_mode: MaskMode::FreezeHeads,
            ..TrainConfig::uda()
        }
    }

    /// Scales a preset down for single-core runs: half-width network, 256
    /// points per cloud, and every schedule length cut to 30%.
    pub fn desk(self) -> Self {
        let cut = |n: usize| ((n * 3).div_ceil(10)).max(1);
        TrainConfig {
            widths: Widths {
                enc1: 32,
                enc2: 64,
                dec1: 64,
            },
            subsample_points: 256,
            epochs: cut(self.epochs),
            ramp_epochs: cut(self.ramp_epochs),
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("weight_decay", self.weight_decay),
            ("rotation_deg", self.rotation_deg),
            ("translation", self.translation),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.ema_momentum) {
            return bad(format!("ema_momentum must lie in [0, 1), got {}", self.ema_momentum));
        }
        if self.batch_source == 0 || self.batch_target == 0 {
            return bad("batch sizes must be >= 1".into());
        }
        if self.widths.enc1 == 0 || self.widths.enc2 == 0 || self.widths.dec1 == 0 {
            return bad("layer widths must be >= 1".into());
        }
        Ok(())
    }

    pub fn augment_config(&self) -> AugmentConfig {
        AugmentConfig {
            rotation_deg: self.rotation_deg,
            translation: self.translation,
            subsample_points: self.subsample_points,
        }
    }

    pub fn adam_config(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }

    /// Reads a TOML file whose keys override `base`. Unknown keys are errors.
    pub fn load_over(base: &TrainConfig, path: &Path) -> Result<TrainConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_over(base, &text).map_err(|msg| Error::Parse {
            path: path.display().to_string(),
            msg,
        })
    }

    /// Like [`TrainConfig::load_over`] on an in-memory document.
    pub fn parse_over(base: &TrainConfig, text: &str) -> std::result::Result<TrainConfig, String> {
        let overlay: toml::Table = toml::from_str(text).map_err(|e| e.to_string())?;
        let mut merged = toml::Table::try_from(base).map_err(|e| e.to_string())?;
        merge_tables(&mut merged, overlay);
        let cfg: TrainConfig = merged.try_into().map_err(|e: toml::de::Error| e.to_string())?;
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

pub(crate) fn merge_tables(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_tables(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
