//! Synthetic in-bed poses and point clouds, domain shifts and preprocessing.
//!
//! Poses come from forward kinematics over a [`BodyTemplate`]; clouds are
//! samples on capsule surfaces around the bones. Only clouds are shifted
//! between domains, so every label stays valid across shifts.

mod dataset;
mod preprocess;
mod shift;

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{self, Vec3};
use crate::model::PointCloud;
use crate::skeleton::{read_toml, validate_spec, Pose, SkeletonSpec};

pub use dataset::{
    default_target_shift, generate_dataset, load_split, read_ply, read_pose, write_ply, write_pose, DatasetManifest, GenConfig,
    RenderConfig, SplitCounts, SplitEntry, SPLITS,
};
pub use preprocess::{crop_box, dedup_frames, voxel_downsample};
pub use shift::{apply_domain_shift, apply_shifts, ShiftConfig};

/// A cloud with its ground-truth pose.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub cloud: PointCloud,
    pub pose: Pose,
}

/// Geometry and sampling ranges of a synthetic body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BodyTemplate {
    #[serde(skip, default = "SkeletonSpec::default_16")]
    pub spec: SkeletonSpec,
    /// Height of the root joint above the bed plane.
    pub pelvis_height: f64,
    /// Whole-body rotation about z is drawn from `[-yaw_deg, yaw_deg]`.
    pub yaw_deg: f64,
    /// Whole-body x/y offsets are drawn from `[-shift_xy[i], shift_xy[i]]`.
    pub shift_xy: [f64; 2],
    /// Relative per-bone length jitter of a subject.
    pub jitter: f64,
    pub vertical_damping: f64,
    pub height_range: [f64; 2],
    pub lengths: Vec<f64>,
    pub radii: Vec<f64>,
    pub directions: Vec<Vec3>,
    pub spread: Vec<f64>,
    /// Allowed normalized dot product per connected pair.
    pub angle_ranges: Vec<[f64; 2]>,
}

const DEFAULT_TEMPLATE: &str = include_str!("../../data/template16.toml");

impl BodyTemplate {
    /// The shipped template for [`SkeletonSpec::default_16`].
    pub fn default_16() -> Self {
        let mut t: BodyTemplate = toml::from_str(DEFAULT_TEMPLATE).expect("bundled template is valid");
        t.spec = SkeletonSpec::default_16();
        t.check().expect("bundled template is consistent");
        t
    }

    pub fn load(path: &Path, spec: SkeletonSpec) -> Result<Self> {
        let mut t: BodyTemplate = read_toml(path)?;
        t.spec = spec;
        t.check()?;
        Ok(t)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("template serializes")
    }

    pub fn check(&self) -> Result<()> {
        let violations = validate_spec(&self.spec);
        if !violations.is_empty() {
            return Err(Error::InvalidSkeleton(violations));
        }
        let bad = |m: String| Err(Error::InvalidArgument(m));
        let nb = self.spec.num_bones();
        for (name, len) in [
            ("lengths", self.lengths.len()),
            ("radii", self.radii.len()),
            ("directions", self.directions.len()),
            ("spread", self.spread.len()),
        ] {
            if len != nb {
                return bad(format!("template {name} has {len} entries, skeleton has {nb} bones"));
            }
        }
        if self.angle_ranges.len() != self.spec.connected_pairs.len() {
            return bad(format!(
                "template angle_ranges has {} entries, skeleton has {} connected pairs",
                self.angle_ranges.len(),
                self.spec.connected_pairs.len()
            ));
        }
        if self.lengths.iter().chain(&self.radii).any(|&v| !(v > 0.0)) {
            return bad("template lengths and radii must be > 0".into());
        }
        if self.spread.iter().any(|&v| !(v >= 0.0)) || !(self.jitter >= 0.0 && self.jitter < 1.0) {
            return bad("template spread must be >= 0 and jitter in [0, 1)".into());
        }
        if self.directions.iter().any(|&d| geom::normalize(d).is_none()) {
            return bad("template directions must be non-zero".into());
        }
        for (p, r) in self.angle_ranges.iter().enumerate() {
            if !(-1.0 <= r[0] && r[0] <= r[1] && r[1] <= 1.0) {
                return bad(format!("angle range {p} [{}, {}] is empty or outside [-1, 1]", r[0], r[1]));
            }
        }
        if !(self.height_range[0] <= self.height_range[1]) {
            return bad("template height_range is empty".into());
        }
        Ok(())
    }
}

/// Per-subject body proportions.
#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub scale: f64,
    /// Multiplicative length factor per bone; equal within symmetric pairs.
    pub bone_factors: Vec<f64>,
}

impl Subject {
    /// A subject with exactly the template's proportions times `scale`.
    pub fn uniform(template: &BodyTemplate, scale: f64) -> Self {
        Subject {
            scale,
            bone_factors: vec![1.0; template.spec.num_bones()],
        }
    }

    /// Draws per-bone factors in `[1 - jitter, 1 + jitter]`; right bones reuse
    /// the factor of their left partner.
    pub fn sample<R: Rng + ?Sized>(template: &BodyTemplate, scale: f64, rng: &mut R) -> Self {
        let j = template.jitter;
        let mut bone_factors: Vec<f64> = (0..template.spec.num_bones())
            .map(|_| if j > 0.0 { rng.random_range(1.0 - j..=1.0 + j) } else { 1.0 })
            .collect();
        for &(l, r) in &template.spec.symmetric_pairs {
            bone_factors[r] = bone_factors[l];
        }
        Subject { scale, bone_factors }
    }

    pub fn bone_length(&self, template: &BodyTemplate, bone: usize) -> f64 {
        template.lengths[bone] * self.scale * self.bone_factors[bone]
    }
}

const MAX_POSE_ATTEMPTS: usize = 10_000;

/// Samples a pose by forward kinematics from the root.
///
/// Bone directions are the template's rest directions plus damped isotropic
/// noise, rotated by a global yaw; whole poses are redrawn until every
/// connected pair lies inside its angle range and every joint inside the
/// height band. Symmetric bones end up with bit-identical lengths.
pub fn sample_pose<R: Rng + ?Sized>(template: &BodyTemplate, subject: &Subject, rng: &mut R) -> Result<Pose> {
    let spec = &template.spec;
    let order = spec.tree_order();
    // the partner placed first in tree order is the reference
    let position: Vec<usize> = {
        let mut pos = vec![0; spec.num_bones()];
        for (i, &b) in order.iter().enumerate() {
            pos[b] = i;
        }
        pos
    };
    let mut partner: Vec<Option<usize>> = vec![None; spec.num_bones()];
    for &(l, r) in &spec.symmetric_pairs {
        let (first, second) = if position[l] < position[r] { (l, r) } else { (r, l) };
        partner[second] = Some(first);
    }

    for _ in 0..MAX_POSE_ATTEMPTS {
        let yaw = rng.random_range(-1.0..=1.0) * template.yaw_deg.to_radians();
        let root = [
            rng.random_range(-1.0..=1.0) * template.shift_xy[0],
            rng.random_range(-1.0..=1.0) * template.shift_xy[1],
            template.pelvis_height,
        ];
        let mut joints = vec![[0.0; 3]; spec.num_joints()];
        joints[spec.root] = root;
        for &b in &order {
            let (p, c) = spec.bones[b];
            let s = template.spread[b];
            let mut d = template.directions[b];
            for (k, v) in d.iter_mut().enumerate() {
                let n: f64 = StandardNormal.sample(rng);
                let damp = if k == 2 { template.vertical_damping } else { 1.0 };
                *v += s * damp * n;
            }
            let Some(u) = geom::normalize(geom::rot_z(d, yaw)) else {
                continue;
            };
            let len = subject.bone_length(template, b);
            joints[c] = geom::add(joints[p], geom::scale(u, len));
            if let Some(first) = partner[b] {
                let (fp, fc) = spec.bones[first];
                let target = geom::dist(joints[fc], joints[fp]);
                joints[c] = match_length(joints[p], joints[c], target);
            }
        }
        let pose = Pose::new(joints);
        if plausible(template, &pose) {
            return Ok(pose);
        }
    }
    Err(Error::InvalidArgument(format!(
        "no pose satisfied the template ranges after {MAX_POSE_ATTEMPTS} attempts"
    )))
}

fn plausible(template: &BodyTemplate, pose: &Pose) -> bool {
    let spec = &template.spec;
    let [zlo, zhi] = template.height_range;
    if !pose.joints.iter().all(|j| j[2] >= zlo && j[2] <= zhi) {
        return false;
    }
    let bv = crate::skeleton::bone_vectors_unchecked(pose, spec);
    if spec
        .symmetric_pairs
        .iter()
        .any(|&(l, r)| geom::norm(bv[l]) != geom::norm(bv[r]))
    {
        return false;
    }
    spec.connected_pairs
        .iter()
        .zip(&template.angle_ranges)
        .all(|(&(i, j), r)| match crate::skeleton::normalized_dot(bv[i], bv[j]) {
            Some(d) => d >= r[0] && d <= r[1],
            None => false,
        })
}

/// Nudges `child` by a few ulps per coordinate until `|child - parent|`
/// equals `target` exactly as computed in floating point.
fn match_length(parent: Vec3, child: Vec3, target: f64) -> Vec3 {
    let len = |c: Vec3| geom::dist(c, parent);
    if len(child) == target {
        return child;
    }
    // one rescale gets within a few ulps
    let scaled = geom::add(parent, geom::scale(geom::sub(child, parent), target / len(child)));
    const R: i64 = 6;
    let step = |x: f64, k: i64| {
        let mut v = x;
        for _ in 0..k.unsigned_abs() {
            v = if k > 0 { v.next_up() } else { v.next_down() };
        }
        v
    };
    let mut best = scaled;
    let mut best_err = (len(scaled) - target).abs();
    for a in -R..=R {
        for b in -R..=R {
            for c in -R..=R {
                let cand = [step(scaled[0], a), step(scaled[1], b), step(scaled[2], c)];
                let err = (len(cand) - target).abs();
                if err == 0.0 {
                    return cand;
                }
                if err < best_err {
                    best = cand;
                    best_err = err;
                }
            }
        }
    }
    best
}

/// Points on the capsule surface of every bone, plus isotropic Gaussian
/// noise; points below the bed plane are dropped. A zero-length bone is
/// rendered as a sphere around its joint.
pub fn render_cloud<R: Rng + ?Sized>(
    pose: &Pose,
    template: &BodyTemplate,
    points_per_bone: usize,
    noise_sigma: f64,
    rng: &mut R,
) -> Result<PointCloud> {
    template.spec.check_pose(pose)?;
    if points_per_bone == 0 {
        return Err(Error::InvalidArgument("points_per_bone must be >= 1".into()));
    }
    let mut points = Vec::with_capacity(points_per_bone * template.spec.num_bones());
    for (b, &(p, c)) in template.spec.bones.iter().enumerate() {
        let r = template.radii[b];
        let a = pose.joints[p];
        let axis = geom::sub(pose.joints[c], a);
        let dir = geom::normalize(axis);
        for _ in 0..points_per_bone {
            let mut q = match dir {
                Some(d) => {
                    let (u, v) = geom::orthonormal_basis(d);
                    let t: f64 = rng.random_range(0.0..=1.0);
                    let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                    let radial = geom::add(geom::scale(u, r * phi.cos()), geom::scale(v, r * phi.sin()));
                    geom::add(geom::add(a, geom::scale(axis, t)), radial)
                }
                None => {
                    let mut s = [0.0; 3];
                    for v in &mut s {
                        *v = StandardNormal.sample(rng);
                    }
                    let s = geom::normalize(s).unwrap_or([0.0, 0.0, 1.0]);
                    geom::add(a, geom::scale(s, r))
                }
            };
            if noise_sigma > 0.0 {
                for v in &mut q {
                    let n: f64 = StandardNormal.sample(rng);
                    *v += noise_sigma * n;
                }
            }
            if q[2] >= 0.0 {
                points.push(q);
            }
        }
    }
    Ok(PointCloud::new(points))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::anatomy::Anatomy;
    use crate::skeleton::derive_bounds;

    #[test]
    fn default_template_is_consistent() {
        let t = BodyTemplate::default_16();
        assert_eq!(t.lengths.len(), 15);
        let back: BodyTemplate = toml::from_str(&t.to_toml()).unwrap();
        assert_eq!(back.lengths, t.lengths);
    }

    #[test]
    fn zero_jitter_unit_scale_gives_canonical_lengths() {
        let t = BodyTemplate::default_16();
        let subject = Subject::uniform(&t, 1.0);
        let pose = sample_pose(&t, &subject, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let bv = crate::skeleton::bone_vectors(&pose, &t.spec).unwrap();
        for (b, v) in bv.iter().enumerate() {
            assert!((geom::norm(*v) - t.lengths[b]).abs() < 1e-12);
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let t = BodyTemplate::default_16();
        let draw = || {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            let s = Subject::sample(&t, 1.1, &mut rng);
            sample_pose(&t, &s, &mut rng).unwrap()
        };
        assert_eq!(draw(), draw());
    }

    #[test]
    fn symmetric_lengths_are_bit_equal_and_bounds_hold() {
        let t = BodyTemplate::default_16();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut poses = Vec::new();
        for _ in 0..1000 {
            let scale = rng.random_range(0.8..=1.2);
            let subject = Subject::sample(&t, scale, &mut rng);
            poses.push(sample_pose(&t, &subject, &mut rng).unwrap());
        }
        let bounds = derive_bounds(&poses, &t.spec, 0.0).unwrap();
        let anatomy = Anatomy::new(&t.spec, &bounds).unwrap();
        for p in &poses {
            assert_eq!(anatomy.anat_loss(p).unwrap().value, 0.0);
        }
    }

    #[test]
    fn capsule_points_lie_on_the_surface() {
        let t = BodyTemplate::default_16();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pose = sample_pose(&t, &Subject::uniform(&t, 1.0), &mut rng).unwrap();
        let cloud = render_cloud(&pose, &t, 50, 0.0, &mut rng).unwrap();
        assert!(!cloud.is_empty());
        let max_r = t.radii.iter().cloned().fold(0.0, f64::max);
        for q in &cloud.points {
            let near = t.spec.bones.iter().enumerate().any(|(b, &(p, c))| {
                segment_distance(*q, pose.joints[p], pose.joints[c]) <= t.radii[b] + 1e-9
            });
            assert!(near);
            assert!(q[2] >= 0.0);
            assert!(q[2] <= 0.6 + max_r);
        }
    }

    #[test]
    fn one_point_per_bone_bounds_the_count() {
        let t = BodyTemplate::default_16();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pose = sample_pose(&t, &Subject::uniform(&t, 1.0), &mut rng).unwrap();
        assert!(render_cloud(&pose, &t, 1, 0.01, &mut rng).unwrap().len() <= 15);
        assert!(render_cloud(&pose, &t, 0, 0.0, &mut rng).is_err());
    }

    #[test]
    fn degenerate_bone_renders_a_sphere() {
        let t = BodyTemplate::default_16();
        let mut pose = Pose::new(vec![[0.0, 0.0, 0.5]; 16]);
        pose.joints[1] = [0.0, 0.2, 0.5];
        let cloud = render_cloud(&pose, &t, 10, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(cloud.len(), 150);
    }

    #[test]
    fn empty_angle_range_is_rejected() {
        let mut t = BodyTemplate::default_16();
        t.angle_ranges[0] = [0.5, 0.4];
        assert!(t.check().is_err());
    }

    fn segment_distance(q: Vec3, a: Vec3, b: Vec3) -> f64 {
        let ab = geom::sub(b, a);
        let t = (geom::dot(geom::sub(q, a), ab) / geom::dot(ab, ab)).clamp(0.0, 1.0);
        geom::dist(q, geom::add(a, geom::scale(ab, t)))
    }
}
