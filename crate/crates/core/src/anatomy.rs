//! Anatomical constraint losses and the pseudo-label plausibility filter.
//!
//! Every constraint goes through the same interval penalty: zero inside the
//! closed interval `[lo, hi]`, linear (or quadratic) in the distance outside
//! of it. Gradients are exact and flow through bone norms and normalized dot
//! products back to joint coordinates.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{self, Vec3};
use crate::skeleton::{bone_vectors_unchecked, normalized_dot, AnatomicalBounds, Pose, SkeletonSpec};

/// Bones at or below this norm have no usable direction.
pub const BONE_EPS: f64 = 1e-8;

/// Shape of the interval penalty outside the feasible band.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Penalty {
    #[default]
    L1,
    L2,
}

impl FromStr for Penalty {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(Penalty::L1),
            "l2" => Ok(Penalty::L2),
            _ => Err(Error::InvalidArgument(format!("unknown penalty '{s}' (expected l1 or l2)"))),
        }
    }
}

impl fmt::Display for Penalty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Penalty::L1 => "l1",
            Penalty::L2 => "l2",
        })
    }
}

impl Penalty {
    /// Value and slope at `x`. Points on the boundary are feasible and get
    /// slope 0.
    #[inline]
    fn eval(self, x: f64, lo: f64, hi: f64) -> (f64, f64) {
        let excess = if x < lo {
            x - lo
        } else if x > hi {
            x - hi
        } else {
            return (0.0, 0.0);
        };
        match self {
            Penalty::L1 => (excess.abs(), excess.signum()),
            Penalty::L2 => (excess * excess, 2.0 * excess),
        }
    }
}

/// The base L1 interval penalty: `|x - lo|` below, `|x - hi|` above, 0 inside.
pub fn penalty(x: f64, lo: f64, hi: f64) -> Result<f64> {
    penalty_with(Penalty::L1, x, lo, hi)
}

pub fn penalty_with(kind: Penalty, x: f64, lo: f64, hi: f64) -> Result<f64> {
    if lo > hi {
        return Err(Error::InvalidArgument(format!("penalty bounds inverted: lo {lo} > hi {hi}")));
    }
    Ok(kind.eval(x, lo, hi).0)
}

/// A loss value with its gradient with respect to every joint coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValueWithGrad {
    pub value: f64,
    pub grad: Vec<Vec3>,
}

impl LossValueWithGrad {
    pub(crate) fn zero(k: usize) -> Self {
        LossValueWithGrad {
            value: 0.0,
            grad: vec![[0.0; 3]; k],
        }
    }

    fn accumulate(&mut self, other: &LossValueWithGrad) {
        self.value += other.value;
        for (g, o) in self.grad.iter_mut().zip(&other.grad) {
            for c in 0..3 {
                g[c] += o[c];
            }
        }
    }
}

/// The three constraint losses of one pose.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PlausibilityTriple {
    pub sym: f64,
    pub length: f64,
    pub angle: f64,
}

impl PlausibilityTriple {
    pub fn anat(&self) -> f64 {
        self.sym + self.length + self.angle
    }
}

/// Evaluates the anatomical losses of poses against fixed bounds.
#[derive(Debug, Clone, Copy)]
pub struct Anatomy<'a> {
    spec: &'a SkeletonSpec,
    bounds: &'a AnatomicalBounds,
    penalty: Penalty,
}

impl<'a> Anatomy<'a> {
    pub fn new(spec: &'a SkeletonSpec, bounds: &'a AnatomicalBounds) -> Result<Self> {
        bounds.check(spec)?;
        Ok(Anatomy {
            spec,
            bounds,
            penalty: Penalty::L1,
        })
    }

    pub fn with_penalty(mut self, penalty: Penalty) -> Self {
        self.penalty = penalty;
        self
    }

    pub fn spec(&self) -> &'a SkeletonSpec {
        self.spec
    }

    pub fn bounds(&self) -> &'a AnatomicalBounds {
        self.bounds
    }

    pub fn penalty(&self) -> Penalty {
        self.penalty
    }

    fn bones(&self, pose: &Pose) -> Result<Vec<Vec3>> {
        self.spec.check_pose(pose)?;
        Ok(bone_vectors_unchecked(pose, self.spec))
    }

    pub fn sym_loss(&self, pose: &Pose) -> Result<LossValueWithGrad> {
        let bv = self.bones(pose)?;
        let pairs = &self.spec.symmetric_pairs;
        let mut out = LossValueWithGrad::zero(pose.len());
        if pairs.is_empty() {
            return Ok(out);
        }
        let inv = 1.0 / pairs.len() as f64;
        for (i, &(l, r)) in pairs.iter().enumerate() {
            let (nl, nr) = (geom::norm(bv[l]), geom::norm(bv[r]));
            for (b, n) in [(l, nl), (r, nr)] {
                if n <= BONE_EPS {
                    return Err(Error::DegenerateBone { bone: b, norm: n });
                }
            }
            let d = self.bounds.sym_tol[i];
            let (v, slope) = self.penalty.eval(nl - nr, -d, d);
            out.value += inv * v;
            if slope != 0.0 {
                self.push_norm_grad(&mut out.grad, l, bv[l], nl, inv * slope);
                self.push_norm_grad(&mut out.grad, r, bv[r], nr, -inv * slope);
            }
        }
        Ok(out)
    }

    pub fn length_loss(&self, pose: &Pose) -> Result<LossValueWithGrad> {
        let bv = self.bones(pose)?;
        let mut out = LossValueWithGrad::zero(pose.len());
        if bv.is_empty() {
            return Ok(out);
        }
        let inv = 1.0 / bv.len() as f64;
        for (i, b) in bv.iter().enumerate() {
            let n = geom::norm(*b);
            if n <= BONE_EPS {
                return Err(Error::DegenerateBone { bone: i, norm: n });
            }
            let (v, slope) = self
                .penalty
                .eval(n, self.bounds.length_lo[i], self.bounds.length_hi[i]);
            out.value += inv * v;
            if slope != 0.0 {
                self.push_norm_grad(&mut out.grad, i, *b, n, inv * slope);
            }
        }
        Ok(out)
    }

    pub fn angle_loss(&self, pose: &Pose) -> Result<LossValueWithGrad> {
        let bv = self.bones(pose)?;
        let pairs = &self.spec.connected_pairs;
        let mut out = LossValueWithGrad::zero(pose.len());
        if pairs.is_empty() {
            return Ok(out);
        }
        let inv = 1.0 / pairs.len() as f64;
        for (p, &(i, j)) in pairs.iter().enumerate() {
            let (a, b) = (bv[i], bv[j]);
            let (na, nb) = (geom::norm(a), geom::norm(b));
            for (bone, n) in [(i, na), (j, nb)] {
                if n <= BONE_EPS {
                    return Err(Error::DegenerateBone { bone, norm: n });
                }
            }
            let c = normalized_dot(a, b).expect("norms checked above");
            let (v, slope) = self
                .penalty
                .eval(c, self.bounds.angle_lo[p], self.bounds.angle_hi[p]);
            out.value += inv * v;
            if slope != 0.0 {
                // dc/da = b/(|a||b|) - c a/|a|^2, symmetric for b.
                let s = inv * slope;
                let ga = geom::sub(geom::scale(b, 1.0 / (na * nb)), geom::scale(a, c / (na * na)));
                let gb = geom::sub(geom::scale(a, 1.0 / (na * nb)), geom::scale(b, c / (nb * nb)));
                self.push_bone_grad(&mut out.grad, i, geom::scale(ga, s));
                self.push_bone_grad(&mut out.grad, j, geom::scale(gb, s));
            }
        }
        Ok(out)
    }

    /// Sum of the three constraint losses and their gradients.
    pub fn anat_loss(&self, pose: &Pose) -> Result<LossValueWithGrad> {
        let mut out = self.sym_loss(pose)?;
        out.accumulate(&self.length_loss(pose)?);
        out.accumulate(&self.angle_loss(pose)?);
        Ok(out)
    }

    /// Values of the three losses without gradients. Tolerates degenerate
    /// bones: a zero-norm bone inside a connected pair is scored as if the
    /// normalized dot product were 0.
    pub fn plausibility_triple(&self, pose: &Pose) -> Result<PlausibilityTriple> {
        let bv = self.bones(pose)?;
        let norms: Vec<f64> = bv.iter().map(|b| geom::norm(*b)).collect();
        let mean = |n: usize, total: f64| if n == 0 { 0.0 } else { total / n as f64 };

        let sym: f64 = self
            .spec
            .symmetric_pairs
            .iter()
            .zip(&self.bounds.sym_tol)
            .map(|(&(l, r), &d)| self.penalty.eval(norms[l] - norms[r], -d, d).0)
            .sum();
        let length: f64 = norms
            .iter()
            .enumerate()
            .map(|(i, &n)| self.penalty.eval(n, self.bounds.length_lo[i], self.bounds.length_hi[i]).0)
            .sum();
        let angle: f64 = self
            .spec
            .connected_pairs
            .iter()
            .enumerate()
            .map(|(p, &(i, j))| {
                let c = normalized_dot(bv[i], bv[j]).unwrap_or(0.0);
                self.penalty.eval(c, self.bounds.angle_lo[p], self.bounds.angle_hi[p]).0
            })
            .sum();
        Ok(PlausibilityTriple {
            sym: mean(self.spec.symmetric_pairs.len(), sym),
            length: mean(norms.len(), length),
            angle: mean(self.spec.connected_pairs.len(), angle),
        })
    }

    /// `true` iff the teacher pose is strictly more plausible than the student
    /// pose in at least two of the three constraints.
    pub fn filter_pseudo_label(&self, teacher: &Pose, student: &Pose) -> Result<bool> {
        self.filter_variant(teacher, student, FilterMode::TwoOfThree)
    }

    pub fn filter_variant(&self, teacher: &Pose, student: &Pose, mode: FilterMode) -> Result<bool> {
        if mode == FilterMode::None {
            return Ok(true);
        }
        let t = self.plausibility_triple(teacher)?;
        let s = self.plausibility_triple(student)?;
        decide(mode, &t, &s)
    }

    fn push_norm_grad(&self, grad: &mut [Vec3], bone: usize, b: Vec3, n: f64, weight: f64) {
        self.push_bone_grad(grad, bone, geom::scale(b, weight / n));
    }

    /// Distributes a gradient with respect to a bone vector onto its joints.
    fn push_bone_grad(&self, grad: &mut [Vec3], bone: usize, g: Vec3) {
        let (p, c) = self.spec.bones[bone];
        for k in 0..3 {
            grad[c][k] += g[k];
            grad[p][k] -= g[k];
        }
    }
}

/// Applies a filter rule to precomputed teacher/student loss triples.
pub fn decide(mode: FilterMode, teacher: &PlausibilityTriple, student: &PlausibilityTriple) -> Result<bool> {
    let wins = |t: f64, s: f64| t < s;
    Ok(match mode {
        FilterMode::None => true,
        FilterMode::Sym => wins(teacher.sym, student.sym),
        FilterMode::Length => wins(teacher.length, student.length),
        FilterMode::Angle => wins(teacher.angle, student.angle),
        FilterMode::AnatSum => wins(teacher.anat(), student.anat()),
        FilterMode::TwoOfThree => {
            let n = wins(teacher.sym, student.sym) as u8
                + wins(teacher.length, student.length) as u8
                + wins(teacher.angle, student.angle) as u8;
            n >= 2
        }
        FilterMode::Consistency => {
            return Err(Error::InvalidArgument(
                "the consistency filter needs augmented forward passes; it is evaluated by the trainer".into(),
            ))
        }
    })
}

/// Which pseudo labels the consistency loss may use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterMode {
    /// Accept every pseudo label.
    None,
    Sym,
    Length,
    Angle,
    /// Compare the summed anatomical loss.
    AnatSum,
    /// At least two of the three constraints must favor the teacher.
    #[default]
    TwoOfThree,
    /// Teacher must be more self-consistent than the student under two
    /// augmentations.
    Consistency,
}

impl FromStr for FilterMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => FilterMode::None,
            "sym" => FilterMode::Sym,
            "length" => FilterMode::Length,
            "angle" => FilterMode::Angle,
            "anat_sum" => FilterMode::AnatSum,
            "two_of_three" => FilterMode::TwoOfThree,
            "consistency" => FilterMode::Consistency,
            _ => return Err(Error::InvalidArgument(format!("unknown filter mode '{s}'"))),
        })
    }
}

impl fmt::Display for FilterMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FilterMode::None => "none",
            FilterMode::Sym => "sym",
            FilterMode::Length => "length",
            FilterMode::Angle => "angle",
            FilterMode::AnatSum => "anat_sum",
            FilterMode::TwoOfThree => "two_of_three",
            FilterMode::Consistency => "consistency",
        })
    }
}
