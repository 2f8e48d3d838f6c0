//! Point-feature pose network with a weighted-sum head.
//!
//! Architecture (widths configurable, defaults shown):
//!
//! ```text
//! points (N x 3)
//!   -> linear 3->64   -> norm -> leaky      \
//!   -> linear 64->128 -> norm -> leaky       } feature extractor (encoder)
//!   -> max over points -> global (128)      /
//! [local 128 | global 128]
//!   -> linear 256->128 -> norm -> leaky     \  head (decoder)
//!   -> linear 128->K (logits)               /
//!   -> softmax over points per joint -> weight map W (N x K)
//! joint k = sum_i x_i * W[i, k]
//! ```
//!
//! Normalization layers use batch statistics in training mode and running
//! statistics in inference mode.

mod adam;
mod checkpoint;
mod network;

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Vec3;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{ModelState, Stage};
pub use network::{backward, forward, ForwardCache, ForwardOutput, RunningUpdate};

/// Epsilon inside the normalization layers' square roots.
pub const NORM_EPS: f64 = 1e-5;
/// Running-statistics momentum of the normalization layers.
pub const NORM_MOMENTUM: f64 = 0.1;
/// Negative slope of the leaky rectifier.
pub const LEAKY_SLOPE: f64 = 0.01;

/// A point cloud in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Self {
        PointCloud { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Checks the model-input invariants: at least one point, all finite.
    pub fn check(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::Empty("point cloud has no points".into()));
        }
        if !self.points.iter().flatten().all(|c| c.is_finite()) {
            return Err(Error::NonFinite("point cloud coordinates".into()));
        }
        Ok(())
    }

    pub fn centroid(&self) -> Vec3 {
        let mut c = [0.0; 3];
        for p in &self.points {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        let n = self.points.len().max(1) as f64;
        [c[0] / n, c[1] / n, c[2] / n]
    }
}

/// Layer widths of the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub enc1: usize,
    pub enc2: usize,
    pub dec1: usize,
    pub joints: usize,
}

impl ArchConfig {
    /// The reference widths (3->64->128, 256->128->K).
    pub fn reference(joints: usize) -> Self {
        ArchConfig {
            enc1: 64,
            enc2: 128,
            dec1: 128,
            joints,
        }
    }

    fn shapes(&self) -> [(usize, usize); NUM_PARAMS] {
        let ArchConfig {
            enc1,
            enc2,
            dec1,
            joints,
        } = *self;
        [
            (3, enc1),
            (1, enc1),
            (1, enc1),
            (1, enc1),
            (enc1, enc2),
            (1, enc2),
            (1, enc2),
            (1, enc2),
            (2 * enc2, dec1),
            (1, dec1),
            (1, dec1),
            (1, dec1),
            (dec1, joints),
            (1, joints),
        ]
    }

    fn norm_widths(&self) -> [usize; 3] {
        [self.enc1, self.enc2, self.dec1]
    }
}

/// Index of each parameter array inside [`ModelParams::params`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(usize)]
pub enum ParamId {
    Enc1W,
    Enc1B,
    Norm1Scale,
    Norm1Shift,
    Enc2W,
    Enc2B,
    Norm2Scale,
    Norm2Shift,
    Dec1W,
    Dec1B,
    Norm3Scale,
    Norm3Shift,
    Dec2W,
    Dec2B,
}

pub const NUM_PARAMS: usize = 14;

impl ParamId {
    pub const ALL: [ParamId; NUM_PARAMS] = [
        ParamId::Enc1W,
        ParamId::Enc1B,
        ParamId::Norm1Scale,
        ParamId::Norm1Shift,
        ParamId::Enc2W,
        ParamId::Enc2B,
        ParamId::Norm2Scale,
        ParamId::Norm2Shift,
        ParamId::Dec1W,
        ParamId::Dec1B,
        ParamId::Norm3Scale,
        ParamId::Norm3Shift,
        ParamId::Dec2W,
        ParamId::Dec2B,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamId::Enc1W => "enc1.weight",
            ParamId::Enc1B => "enc1.bias",
            ParamId::Norm1Scale => "norm1.scale",
            ParamId::Norm1Shift => "norm1.shift",
            ParamId::Enc2W => "enc2.weight",
            ParamId::Enc2B => "enc2.bias",
            ParamId::Norm2Scale => "norm2.scale",
            ParamId::Norm2Shift => "norm2.shift",
            ParamId::Dec1W => "dec1.weight",
            ParamId::Dec1B => "dec1.bias",
            ParamId::Norm3Scale => "norm3.scale",
            ParamId::Norm3Shift => "norm3.shift",
            ParamId::Dec2W => "dec2.weight",
            ParamId::Dec2B => "dec2.bias",
        }
    }

    /// Part of the feature extractor (as opposed to the head).
    pub fn is_encoder(self) -> bool {
        (self as usize) < ParamId::Dec1W as usize
    }

    pub fn is_norm(self) -> bool {
        matches!(
            self,
            ParamId::Norm1Scale
                | ParamId::Norm1Shift
                | ParamId::Norm2Scale
                | ParamId::Norm2Shift
                | ParamId::Norm3Scale
                | ParamId::Norm3Shift
        )
    }
}

/// Network parameters and normalization running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub arch: ArchConfig,
    /// Indexed by [`ParamId`].
    pub params: Vec<Array2<f64>>,
    /// `[mean1, var1, mean2, var2, mean3, var3]`, each `1 x width`.
    pub buffers: Vec<Array2<f64>>,
}

impl ModelParams {
    /// Uniform fan-in initialization, zero biases, unit norm scales. The last
    /// layer is scaled by 0.1 so initial weight maps are close to uniform.
    pub fn init(arch: ArchConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes = arch.shapes();
        let params = ParamId::ALL
            .iter()
            .map(|&id| {
                let (r, c) = shapes[id as usize];
                match id {
                    ParamId::Enc1W | ParamId::Enc2W | ParamId::Dec1W | ParamId::Dec2W => {
                        let bound = 1.0 / (r as f64).sqrt();
                        let gain = if id == ParamId::Dec2W { 0.1 } else { 1.0 };
                        Array2::from_shape_fn((r, c), |_| gain * rng.random_range(-bound..bound))
                    }
                    ParamId::Norm1Scale | ParamId::Norm2Scale | ParamId::Norm3Scale => Array2::ones((r, c)),
                    _ => Array2::zeros((r, c)),
                }
            })
            .collect();
        let buffers = arch
            .norm_widths()
            .iter()
            .flat_map(|&w| [Array2::zeros((1, w)), Array2::ones((1, w))])
            .collect();
        ModelParams {
            arch,
            params,
            buffers,
        }
    }

    pub fn param(&self, id: ParamId) -> &Array2<f64> {
        &self.params[id as usize]
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    /// Checks shapes against the architecture and positivity of running variances.
    pub fn check(&self) -> Result<()> {
        let shapes = self.arch.shapes();
        if self.params.len() != NUM_PARAMS || self.buffers.len() != 6 {
            return Err(Error::Checkpoint("wrong number of parameter arrays".into()));
        }
        for (id, p) in ParamId::ALL.iter().zip(&self.params) {
            if p.dim() != shapes[*id as usize] {
                return Err(Error::Checkpoint(format!(
                    "{} has shape {:?}, architecture needs {:?}",
                    id.name(),
                    p.dim(),
                    shapes[*id as usize]
                )));
            }
        }
        for (l, &w) in self.arch.norm_widths().iter().enumerate() {
            for b in &self.buffers[2 * l..2 * l + 2] {
                if b.dim() != (1, w) {
                    return Err(Error::Checkpoint(format!("norm{} buffers have wrong width", l + 1)));
                }
            }
            if !self.buffers[2 * l + 1].iter().all(|&v| v > 0.0) {
                return Err(Error::Checkpoint(format!("norm{} running variance not positive", l + 1)));
            }
        }
        Ok(())
    }

    pub fn same_layout(&self, other: &ModelParams) -> bool {
        self.arch == other.arch
            && self.params.iter().zip(&other.params).all(|(a, b)| a.dim() == b.dim())
            && self.buffers.iter().zip(&other.buffers).all(|(a, b)| a.dim() == b.dim())
    }
}

/// Parameter gradients, laid out like [`ModelParams::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Array2<f64>>,
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Gradients {
            tensors: params.params.iter().map(|p| Array2::zeros(p.dim())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Which parameter subset an optimization target may change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    #[default]
    All,
    /// Encoder layers and their normalization layers.
    FeatureExtractorOnly,
    /// Only the encoder's normalization scale/shift.
    NormLayersOnly,
    /// Everything except the head.
    FreezeHeads,
}

impl FromStr for MaskMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "all" => MaskMode::All,
            "feature_extractor_only" => MaskMode::FeatureExtractorOnly,
            "norm_layers_only" => MaskMode::NormLayersOnly,
            "freeze_heads" => MaskMode::FreezeHeads,
            _ => return Err(Error::InvalidArgument(format!("unknown mask mode '{s}'"))),
        })
    }
}

impl fmt::Display for MaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskMode::All => "all",
            MaskMode::FeatureExtractorOnly => "feature_extractor_only",
            MaskMode::NormLayersOnly => "norm_layers_only",
            MaskMode::FreezeHeads => "freeze_heads",
        })
    }
}

/// Per-parameter-array trainable flags.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamSubsetMask {
    pub trainable: [bool; NUM_PARAMS],
}

impl ParamSubsetMask {
    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id as usize]
    }

    pub fn union(&self, other: &ParamSubsetMask) -> ParamSubsetMask {
        let mut trainable = self.trainable;
        for (t, o) in trainable.iter_mut().zip(other.trainable) {
            *t |= o;
        }
        ParamSubsetMask { trainable }
    }

    pub fn any(&self) -> bool {
        self.trainable.iter().any(|&t| t)
    }
}

pub fn select_mask(mode: MaskMode) -> ParamSubsetMask {
    let mut trainable = [false; NUM_PARAMS];
    for id in ParamId::ALL {
        trainable[id as usize] = match mode {
            MaskMode::All => true,
            MaskMode::FeatureExtractorOnly | MaskMode::FreezeHeads => id.is_encoder(),
            MaskMode::NormLayersOnly => id.is_encoder() && id.is_norm(),
        };
    }
    ParamSubsetMask { trainable }
}

/// Column-stochastic `N x K` weights of one cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMap {
    pub weights: Array2<f64>,
}

impl WeightMap {
    pub fn column_sums(&self) -> Vec<f64> {
        self.weights.sum_axis(ndarray::Axis(0)).to_vec()
    }
}
