//! Skeleton graph, poses, bone vectors and anatomical bounds.
//!
//! Bones are directed parent -> child along the kinematic tree rooted at
//! [`SkeletonSpec::root`]. A connected pair `(i, j)` means bone `j` starts at
//! the joint where bone `i` ends, so the normalized dot product of the two
//! tree-directed bone vectors is `1` for a straight limb.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{self, Vec3};

/// A 3D pose: one position per joint, in meters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub joints: Vec<Vec3>,
}

impl Pose {
    pub fn new(joints: Vec<Vec3>) -> Self {
        Pose { joints }
    }

    pub fn zeros(k: usize) -> Self {
        Pose {
            joints: vec![[0.0; 3]; k],
        }
    }

    pub fn len(&self) -> usize {
        self.joints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joints.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.joints.iter().flatten().all(|c| c.is_finite())
    }

    pub fn translated(&self, t: Vec3) -> Pose {
        Pose::new(self.joints.iter().map(|&j| geom::add(j, t)).collect())
    }

    /// Applies `p -> Rz(angle) p + t` to every joint.
    pub fn rigid(&self, angle: f64, t: Vec3) -> Pose {
        Pose::new(
            self.joints
                .iter()
                .map(|&j| geom::add(geom::rot_z(j, angle), t))
                .collect(),
        )
    }
}

/// The skeleton graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkeletonSpec {
    pub root: usize,
    pub joint_names: Vec<String>,
    /// Directed edges `(parent_joint, child_joint)`.
    pub bones: Vec<(usize, usize)>,
    /// `(left_bone, right_bone)` pairs.
    pub symmetric_pairs: Vec<(usize, usize)>,
    /// `(i, j)` pairs of bones where bone `j` starts at the end of bone `i`.
    pub connected_pairs: Vec<(usize, usize)>,
    /// Named joint groups used for per-group error breakdowns.
    #[serde(default)]
    pub groups: BTreeMap<String, Vec<usize>>,
}

const DEFAULT_SKELETON: &str = include_str!("../data/skeleton16.toml");

impl SkeletonSpec {
    /// The shipped 16-joint in-bed skeleton.
    pub fn default_16() -> Self {
        toml::from_str(DEFAULT_SKELETON).expect("bundled skeleton file is valid")
    }

    pub fn num_joints(&self) -> usize {
        self.joint_names.len()
    }

    pub fn num_bones(&self) -> usize {
        self.bones.len()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let spec: SkeletonSpec = read_toml(path)?;
        let violations = validate_spec(&spec);
        if !violations.is_empty() {
            return Err(Error::InvalidSkeleton(violations));
        }
        Ok(spec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_toml(path, self)
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.joint_names.iter().position(|n| n == name)
    }

    /// Checks that `pose` has one finite position per joint.
    pub fn check_pose(&self, pose: &Pose) -> Result<()> {
        if pose.len() != self.num_joints() {
            return Err(Error::Shape(format!(
                "pose has {} joints, skeleton has {}",
                pose.len(),
                self.num_joints()
            )));
        }
        if !pose.is_finite() {
            return Err(Error::NonFinite("pose coordinates".into()));
        }
        Ok(())
    }

    /// Bone indices ordered so that every bone comes after the bone ending at
    /// its parent joint (depth-first from the root).
    pub fn tree_order(&self) -> Vec<usize> {
        let mut children: Vec<Vec<usize>> = vec![Vec::new(); self.num_joints()];
        for (b, &(p, _)) in self.bones.iter().enumerate() {
            if p < children.len() {
                children[p].push(b);
            }
        }
        let mut order = Vec::with_capacity(self.num_bones());
        let mut stack: Vec<usize> = children
            .get(self.root)
            .map(|c| c.iter().rev().copied().collect())
            .unwrap_or_default();
        let mut visited = vec![false; self.num_bones()];
        while let Some(b) = stack.pop() {
            if std::mem::replace(&mut visited[b], true) {
                continue;
            }
            order.push(b);
            let child = self.bones[b].1;
            if child < children.len() {
                stack.extend(children[child].iter().rev());
            }
        }
        order
    }

    /// For every bone, the bone that ends at its parent joint (if any).
    pub fn parent_bones(&self) -> Vec<Option<usize>> {
        let mut incoming = vec![None; self.num_joints()];
        for (b, &(_, c)) in self.bones.iter().enumerate() {
            if c < incoming.len() {
                incoming[c] = Some(b);
            }
        }
        self.bones
            .iter()
            .map(|&(p, _)| incoming.get(p).copied().flatten())
            .collect()
    }
}

/// Returns a description of every violated skeleton invariant; empty means valid.
pub fn validate_spec(spec: &SkeletonSpec) -> Vec<String> {
    let mut out = Vec::new();
    let k = spec.num_joints();
    let nb = spec.num_bones();

    if k == 0 {
        out.push("skeleton has no joints".to_string());
        return out;
    }
    if spec.root >= k {
        out.push(format!("root joint index {} out of range (K = {k})", spec.root));
    }

    let mut seen = BTreeSet::new();
    let mut incoming = vec![0usize; k];
    let mut bones_ok = true;
    for (b, &(p, c)) in spec.bones.iter().enumerate() {
        if p >= k || c >= k {
            out.push(format!("bone {b} references joint out of range ({p}, {c})"));
            bones_ok = false;
            continue;
        }
        if p == c {
            out.push(format!("bone {b} is a self loop on joint {p}"));
            bones_ok = false;
            continue;
        }
        let key = (p.min(c), p.max(c));
        if !seen.insert(key) {
            out.push(format!("bone {b} duplicates edge ({p}, {c})"));
        }
        incoming[c] += 1;
    }
    if nb + 1 != k {
        out.push(format!(
            "bone count {nb} does not form a tree over {k} joints (expected {})",
            k - 1
        ));
    }
    if bones_ok && spec.root < k {
        if incoming[spec.root] != 0 {
            out.push(format!("root joint {} has an incoming bone", spec.root));
        }
        for (j, &n) in incoming.iter().enumerate() {
            if j != spec.root && n != 1 {
                out.push(format!("joint {j} has {n} incoming bones (expected 1)"));
            }
        }
        let reached: BTreeSet<usize> = spec
            .tree_order()
            .into_iter()
            .map(|b| spec.bones[b].1)
            .chain(std::iter::once(spec.root))
            .collect();
        for j in 0..k {
            if !reached.contains(&j) {
                out.push(format!("joint {j} is not reachable from the root"));
            }
        }
    }

    let mut used = BTreeSet::new();
    for (p, &(l, r)) in spec.symmetric_pairs.iter().enumerate() {
        if l >= nb || r >= nb {
            out.push(format!("symmetric pair {p} references bone out of range ({l}, {r})"));
            continue;
        }
        if l == r {
            out.push(format!("symmetric pair {p} references identical bone {l}"));
            continue;
        }
        for b in [l, r] {
            if !used.insert(b) {
                out.push(format!("symmetric pair {p} reuses bone {b}; left/right map is not a bijection"));
            }
        }
    }

    for (p, &(i, j)) in spec.connected_pairs.iter().enumerate() {
        if i >= nb || j >= nb {
            out.push(format!("connected pair {p} references bone out of range ({i}, {j})"));
            continue;
        }
        if spec.bones[j].0 != spec.bones[i].1 {
            out.push(format!(
                "connected pair {p} ({i}, {j}): bone {j} does not start at the end of bone {i}"
            ));
        }
    }

    for (name, idx) in &spec.groups {
        for &j in idx {
            if j >= k {
                out.push(format!("group '{name}' references joint {j} out of range"));
            }
        }
    }
    out
}

/// Per-bone and per-pair limits of the anatomical constraints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnatomicalBounds {
    pub sym_tol: Vec<f64>,
    pub length_lo: Vec<f64>,
    pub length_hi: Vec<f64>,
    pub angle_lo: Vec<f64>,
    pub angle_hi: Vec<f64>,
}

impl AnatomicalBounds {
    /// Checks the bounds' own invariants and their sizes against `spec`.
    pub fn check(&self, spec: &SkeletonSpec) -> Result<()> {
        let sizes = [
            ("sym_tol", self.sym_tol.len(), spec.symmetric_pairs.len()),
            ("length_lo", self.length_lo.len(), spec.num_bones()),
            ("length_hi", self.length_hi.len(), spec.num_bones()),
            ("angle_lo", self.angle_lo.len(), spec.connected_pairs.len()),
            ("angle_hi", self.angle_hi.len(), spec.connected_pairs.len()),
        ];
        for (name, got, want) in sizes {
            if got != want {
                return Err(Error::Shape(format!("{name} has {got} entries, skeleton needs {want}")));
            }
        }
        for (i, &d) in self.sym_tol.iter().enumerate() {
            if !(d >= 0.0) {
                return Err(Error::InvalidBounds(format!("sym_tol[{i}] = {d} is negative")));
            }
        }
        for i in 0..self.length_lo.len() {
            let (lo, hi) = (self.length_lo[i], self.length_hi[i]);
            if !(0.0 <= lo && lo <= hi) {
                return Err(Error::InvalidBounds(format!("length bounds [{i}] = ({lo}, {hi})")));
            }
        }
        for i in 0..self.angle_lo.len() {
            let (lo, hi) = (self.angle_lo[i], self.angle_hi[i]);
            if !(-1.0 <= lo && lo <= hi && hi <= 1.0) {
                return Err(Error::InvalidBounds(format!("angle bounds [{i}] = ({lo}, {hi})")));
            }
        }
        Ok(())
    }

    /// Widens the length intervals to `(lo * (1 - m), hi * (1 + m))`.
    pub fn with_length_margin(mut self, margin: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&margin) {
            return Err(Error::InvalidArgument(format!("margin {margin} must lie in [0, 1)")));
        }
        if margin > 0.0 {
            for v in &mut self.length_lo {
                *v *= 1.0 - margin;
            }
            for v in &mut self.length_hi {
                *v *= 1.0 + margin;
            }
        }
        Ok(self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_toml(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_toml(path, self)
    }
}

/// Row `i` is `joints[child_i] - joints[parent_i]`.
pub fn bone_vectors(pose: &Pose, spec: &SkeletonSpec) -> Result<Vec<Vec3>> {
    if pose.len() != spec.num_joints() {
        return Err(Error::Shape(format!(
            "pose has {} joints, skeleton has {}",
            pose.len(),
            spec.num_joints()
        )));
    }
    Ok(bone_vectors_unchecked(pose, spec))
}

pub(crate) fn bone_vectors_unchecked(pose: &Pose, spec: &SkeletonSpec) -> Vec<Vec3> {
    spec.bones
        .iter()
        .map(|&(p, c)| geom::sub(pose.joints[c], pose.joints[p]))
        .collect()
}

/// Normalized dot product of two bone vectors; `None` when either is zero.
///
/// Both bound derivation and the angle loss go through this function so that
/// derived bounds reproduce the loss-side values bit for bit.
#[inline]
pub(crate) fn normalized_dot(a: Vec3, b: Vec3) -> Option<f64> {
    let na = geom::norm(a);
    let nb = geom::norm(b);
    if na > 0.0 && nb > 0.0 {
        Some(geom::dot(a, b) / (na * nb))
    } else {
        None
    }
}

/// Empirical min/max bounds over a set of labeled poses.
pub fn derive_bounds(poses: &[Pose], spec: &SkeletonSpec, sym_tol_default: f64) -> Result<AnatomicalBounds> {
    if poses.is_empty() {
        return Err(Error::Empty("derive_bounds needs at least one pose".into()));
    }
    if !(sym_tol_default >= 0.0) {
        return Err(Error::InvalidArgument(format!("sym_tol {sym_tol_default} must be >= 0")));
    }
    let nb = spec.num_bones();
    let np = spec.connected_pairs.len();
    let mut length_lo = vec![f64::INFINITY; nb];
    let mut length_hi = vec![f64::NEG_INFINITY; nb];
    let mut angle_lo = vec![f64::INFINITY; np];
    let mut angle_hi = vec![f64::NEG_INFINITY; np];

    for (s, pose) in poses.iter().enumerate() {
        spec.check_pose(pose)?;
        let bv = bone_vectors_unchecked(pose, spec);
        for (i, b) in bv.iter().enumerate() {
            let l = geom::norm(*b);
            length_lo[i] = length_lo[i].min(l);
            length_hi[i] = length_hi[i].max(l);
        }
        for (p, &(i, j)) in spec.connected_pairs.iter().enumerate() {
            let d = normalized_dot(bv[i], bv[j]).ok_or_else(|| {
                let bone = if geom::norm(bv[i]) > 0.0 { j } else { i };
                Error::InvalidArgument(format!(
                    "pose {s}: bone {bone} has zero length inside connected pair {p}"
                ))
            })?;
            angle_lo[p] = angle_lo[p].min(d);
            angle_hi[p] = angle_hi[p].max(d);
        }
    }
    // Rounding can push a normalized dot a hair outside [-1, 1].
    for v in angle_lo.iter_mut().chain(angle_hi.iter_mut()) {
        *v = v.clamp(-1.0, 1.0);
    }
    Ok(AnatomicalBounds {
        sym_tol: vec![sym_tol_default; spec.symmetric_pairs.len()],
        length_lo,
        length_hi,
        angle_lo,
        angle_hi,
    })
}

pub(crate) fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        msg: e.to_string(),
    })
}

pub(crate) fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = toml::to_string(value).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
