//! Supervised and self-training losses, the EMA teacher update and the ramp.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::anatomy::LossValueWithGrad;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::skeleton::Pose;

fn check_pair(a: &Pose, b: &Pose) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("poses have {} and {} joints", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::Shape("poses have no joints".into()));
    }
    Ok(())
}

/// Sum of absolute coordinate differences.
pub fn l1_distance(a: &Pose, b: &Pose) -> Result<f64> {
    check_pair(a, b)?;
    Ok(a
        .joints
        .iter()
        .zip(&b.joints)
        .flat_map(|(p, q)| (0..3).map(move |c| (p[c] - q[c]).abs()))
        .sum())
}

/// `(1/K) * sum |x - y|` over all `3K` coordinates, with gradient w.r.t. `x`.
fn scaled_l1(x: &Pose, y: &Pose) -> Result<LossValueWithGrad> {
    check_pair(x, y)?;
    let k = x.len() as f64;
    let mut out = LossValueWithGrad::zero(x.len());
    for (g, (p, q)) in out.grad.iter_mut().zip(x.joints.iter().zip(&y.joints)) {
        for c in 0..3 {
            let d = p[c] - q[c];
            out.value += d.abs();
            // subgradient 0 at equality
            g[c] = if d > 0.0 {
                1.0 / k
            } else if d < 0.0 {
                -1.0 / k
            } else {
                0.0
            };
        }
    }
    out.value /= k;
    Ok(out)
}

/// Supervised loss of one sample.
pub fn task_loss(pred: &Pose, gt: &Pose) -> Result<LossValueWithGrad> {
    scaled_l1(pred, gt)
}

/// Consistency between a student prediction and a (constant) teacher pseudo
/// label, both in the same frame. Rejected labels contribute nothing.
pub fn consistency_loss(student: &Pose, teacher: &Pose, accepted: bool) -> Result<LossValueWithGrad> {
    if !accepted {
        check_pair(student, teacher)?;
        return Ok(LossValueWithGrad::zero(student.len()));
    }
    scaled_l1(student, teacher)
}

/// `teacher <- mu * teacher + (1 - mu) * student` for every parameter and
/// normalization buffer.
pub fn ema_update(teacher: &mut ModelParams, student: &ModelParams, mu: f64) -> Result<()> {
    if !teacher.same_layout(student) {
        return Err(Error::Shape("teacher and student architectures differ".into()));
    }
    if !(0.0..1.0).contains(&mu) {
        return Err(Error::InvalidArgument(format!("EMA momentum {mu} outside [0, 1)")));
    }
    let rate = 1.0 - mu;
    let pairs = teacher
        .params
        .iter_mut()
        .zip(&student.params)
        .chain(teacher.buffers.iter_mut().zip(&student.buffers));
    for (t, s) in pairs {
        ndarray::Zip::from(t).and(s).for_each(|t, &s| *t += rate * (s - *t));
    }
    Ok(())
}

/// Shape of the unsupervised-loss ramp.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RampKind {
    /// `exp(-5 (1 - min(t/T, 1)^2))`
    #[default]
    Printed,
    /// The usual Mean Teacher sigmoid ramp `exp(-5 (1 - min(t/T, 1))^2)`.
    MeanTeacher,
}

impl FromStr for RampKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "printed" => Ok(RampKind::Printed),
            "mean_teacher" => Ok(RampKind::MeanTeacher),
            _ => Err(Error::InvalidArgument(format!(
                "unknown ramp '{s}' (expected printed or mean_teacher)"
            ))),
        }
    }
}

impl fmt::Display for RampKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RampKind::Printed => "printed",
            RampKind::MeanTeacher => "mean_teacher",
        })
    }
}

/// Ramp-up weight at epoch `tau` (0-based) for ramp length `t`.
pub fn ramp_weight(tau: usize, t: usize) -> f64 {
    ramp_weight_with(RampKind::Printed, tau, t)
}

pub fn ramp_weight_with(kind: RampKind, tau: usize, t: usize) -> f64 {
    if t == 0 || tau >= t {
        return 1.0;
    }
    let x = tau as f64 / t as f64;
    match kind {
        RampKind::Printed => (-5.0 * (1.0 - x * x)).exp(),
        RampKind::MeanTeacher => (-5.0 * (1.0 - x) * (1.0 - x)).exp(),
    }
}

/// Accepts the teacher's pseudo label iff the teacher is strictly more
/// self-consistent than the student across two augmentations. All four poses
/// must already be reversed into the same frame.
pub fn consistency_filter_baseline(student: [&Pose; 2], teacher: [&Pose; 2]) -> Result<bool> {
    let ds = l1_distance(student[0], student[1])?;
    let dt = l1_distance(teacher[0], teacher[1])?;
    Ok(dt < ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ArchConfig;

    fn pose(j: &[[f64; 3]]) -> Pose {
        Pose::new(j.to_vec())
    }

    #[test]
    fn task_loss_examples() {
        let gt = pose(&[[1.0, 2.0, 3.0]]);
        assert_eq!(task_loss(&gt, &gt).unwrap().value, 0.0);
        assert_eq!(task_loss(&gt, &gt).unwrap().grad, vec![[0.0; 3]]);

        let pred = pose(&[[1.1, 1.8, 3.3]]);
        let l = task_loss(&pred, &gt).unwrap();
        assert!((l.value - 0.6).abs() < 1e-12);
        assert_eq!(l.grad, vec![[1.0, -1.0, 1.0]]);

        let far = pose(&[[1.2, 1.6, 3.6]]);
        assert!((task_loss(&far, &gt).unwrap().value - 1.2).abs() < 1e-12);
        assert!(task_loss(&pose(&[[0.0; 3], [0.0; 3]]), &gt).is_err());
    }

    #[test]
    fn consistency_examples() {
        let s = pose(&[[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]]);
        let t = pose(&[[0.1, 0.0, -0.2], [1.0, 1.3, 0.8]]);
        let off = consistency_loss(&s, &t, false).unwrap();
        assert_eq!(off.value, 0.0);
        assert!(off.grad.iter().flatten().all(|&g| g == 0.0));
        assert_eq!(consistency_loss(&s, &s, true).unwrap().value, 0.0);
        // total L1 distance 0.8, K = 2
        let on = consistency_loss(&s, &t, true).unwrap();
        assert!((on.value - 0.4).abs() < 1e-12);
        assert_eq!(on.grad[0], [-0.5, 0.0, 0.5]);
    }

    #[test]
    fn ema_examples() {
        let arch = ArchConfig {
            enc1: 2,
            enc2: 3,
            dec1: 2,
            joints: 1,
        };
        let mut teacher = ModelParams::init(arch, 1);
        let mut student = teacher.clone();
        for p in teacher.params.iter_mut().chain(teacher.buffers.iter_mut()) {
            p.fill(0.0);
        }
        for p in student.params.iter_mut().chain(student.buffers.iter_mut()) {
            p.fill(1.0);
        }
        ema_update(&mut teacher, &student, 0.99).unwrap();
        assert!(teacher.params.iter().flatten().all(|&v| (v - 0.01).abs() < 1e-15));

        let fixed = ModelParams::init(arch, 5);
        let mut same = fixed.clone();
        ema_update(&mut same, &fixed, 0.9996).unwrap();
        assert_eq!(same, fixed);

        let other = ModelParams::init(ArchConfig { joints: 2, ..arch }, 5);
        assert!(ema_update(&mut same, &other, 0.9).is_err());
        assert!(ema_update(&mut same, &fixed, 1.0).is_err());
    }

    #[test]
    fn ramp_examples() {
        assert_eq!(ramp_weight(0, 40), (-5.0f64).exp());
        assert_eq!(ramp_weight(40, 40), 1.0);
        assert_eq!(ramp_weight(400, 40), 1.0);
        assert!((ramp_weight(20, 40) - (-3.75f64).exp()).abs() < 1e-15);
        assert_eq!(ramp_weight_with(RampKind::MeanTeacher, 0, 40), (-5.0f64).exp());
        assert!((ramp_weight_with(RampKind::MeanTeacher, 20, 40) - (-1.25f64).exp()).abs() < 1e-15);
        for kind in [RampKind::Printed, RampKind::MeanTeacher] {
            for tau in 0..45 {
                assert!(ramp_weight_with(kind, tau + 1, 40) >= ramp_weight_with(kind, tau, 40));
            }
        }
    }

    #[test]
    fn consistency_filter_examples() {
        let a = pose(&[[0.0; 3]]);
        let b1 = pose(&[[0.1, 0.0, 0.0]]);
        let b2 = pose(&[[0.2, 0.0, 0.0]]);
        assert!(consistency_filter_baseline([&a, &b2], [&a, &b1]).unwrap());
        assert!(!consistency_filter_baseline([&a, &b1], [&a, &b1]).unwrap());
        assert!(!consistency_filter_baseline([&a, &a], [&a, &a]).unwrap());
    }
}
