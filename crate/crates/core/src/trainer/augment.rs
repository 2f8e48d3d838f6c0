//! Rigid input augmentation and its reversal in output space.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{self, Vec3};
use crate::model::PointCloud;
use crate::skeleton::Pose;

/// Augmentation magnitudes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    /// Rotation about z is drawn uniformly from `[-rotation_deg, rotation_deg]`.
    pub rotation_deg: f64,
    /// Each translation component is drawn uniformly from `[-translation, translation]` meters.
    pub translation: f64,
    /// Number of points after subsampling; 0 keeps every point.
    pub subsample_points: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rotation_deg: 15.0,
            translation: 0.05,
            subsample_points: 2048,
        }
    }
}

/// What [`augment`] did to one cloud.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationRecord {
    /// Rotation about z in radians.
    pub angle: f64,
    pub translation: Vec3,
    /// Input rows that make up the output, in output order.
    pub indices: Vec<usize>,
}

impl AugmentationRecord {
    pub fn identity(n: usize) -> Self {
        AugmentationRecord {
            angle: 0.0,
            translation: [0.0; 3],
            indices: (0..n).collect(),
        }
    }

    /// `Rz(angle) p + t`
    pub fn apply_point(&self, p: Vec3) -> Vec3 {
        geom::add(geom::rot_z(p, self.angle), self.translation)
    }

    pub fn apply_pose(&self, pose: &Pose) -> Pose {
        pose.rigid(self.angle, self.translation)
    }

    /// Maps a gradient taken w.r.t. a reversed pose back onto the augmented
    /// prediction it was computed from.
    pub fn forward_gradient(&self, grad: &[Vec3]) -> Vec<Vec3> {
        grad.iter().map(|&g| geom::rot_z(g, self.angle)).collect()
    }
}

/// Rotates about z, translates and subsamples a cloud.
///
/// With `N >= n` points, `n` distinct rows are drawn and kept in input order.
/// With fewer, every row is kept and the remainder is filled by drawing rows
/// with replacement.
pub fn augment<R: Rng + ?Sized>(
    cloud: &PointCloud,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<(PointCloud, AugmentationRecord)> {
    let n_in = cloud.len();
    if n_in == 0 {
        return Err(Error::Empty("cannot augment an empty cloud".into()));
    }
    let r = cfg.rotation_deg.to_radians();
    let angle = if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
    let mut translation = [0.0; 3];
    if cfg.translation > 0.0 {
        for t in &mut translation {
            *t = rng.random_range(-cfg.translation..=cfg.translation);
        }
    }
    let n = cfg.subsample_points;
    let indices = if n == 0 || n == n_in {
        (0..n_in).collect()
    } else if n < n_in {
        let mut idx = index::sample(rng, n_in, n).into_vec();
        idx.sort_unstable();
        idx
    } else {
        let mut idx: Vec<usize> = (0..n_in).collect();
        idx.extend((n_in..n).map(|_| rng.random_range(0..n_in)));
        idx
    };
    let record = AugmentationRecord {
        angle,
        translation,
        indices,
    };
    let points = record
        .indices
        .iter()
        .map(|&i| record.apply_point(cloud.points[i]))
        .collect();
    Ok((PointCloud::new(points), record))
}

/// Undoes the rigid part of an augmentation: `Rz(-angle) (p - t)`.
pub fn reverse_pose(pose: &Pose, record: &AugmentationRecord) -> Pose {
    Pose::new(
        pose.joints
            .iter()
            .map(|&p| geom::rot_z(geom::sub(p, record.translation), -record.angle))
            .collect(),
    )
}
