//! Pose error metrics, plausibility reports and the loss/error correlation
//! analysis.
//!
//! Report key-value format (one `key = value` per line, values in meters or
//! unitless, six decimals):
//!
//! ```text
//! samples = 100
//! mpjpe.mean = 0.081234
//! mpjpe.subset_mean = 0.079000        (only with a joint subset)
//! mpjpe.subset = pelvis,spine         (only with a joint subset)
//! mpjpe.group.<group> = ...
//! mpjpe.joint.<joint> = ...
//! plausibility.rate.{sym,length,angle} = ...
//! plausibility.mean.{sym,length,angle,anat} = ...
//! correlation.<loss>.r = ...
//! correlation.<loss>.p = ...          (scientific notation)
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use statrs::function::beta::beta_reg;

use crate::anatomy::{Anatomy, PlausibilityTriple};
use crate::error::{Error, Result};
use crate::geom;
use crate::model::{forward, ModelParams, PointCloud};
use crate::skeleton::{AnatomicalBounds, Pose, SkeletonSpec};
use crate::trainer::{augment, AugmentConfig};

/// Per-joint mean errors and their mean over a joint subset.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Mpjpe {
    pub per_joint: Vec<f64>,
    pub subset: Vec<usize>,
    pub mean: f64,
}

fn check_sets(pred: &[Pose], gt: &[Pose]) -> Result<usize> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!("{} predictions for {} labels", pred.len(), gt.len())));
    }
    if pred.is_empty() {
        return Err(Error::Empty("no poses to evaluate".into()));
    }
    let k = gt[0].len();
    if pred.iter().chain(gt).any(|p| p.len() != k) {
        return Err(Error::Shape("poses have differing joint counts".into()));
    }
    Ok(k)
}

/// Mean Euclidean joint error per joint over samples; `mean` averages the
/// per-joint values over `subset` (all joints when empty).
pub fn mpjpe(pred: &[Pose], gt: &[Pose], subset: &[usize]) -> Result<Mpjpe> {
    let k = check_sets(pred, gt)?;
    if let Some(&bad) = subset.iter().find(|&&j| j >= k) {
        return Err(Error::Shape(format!("joint {bad} outside 0..{k}")));
    }
    let subset: Vec<usize> = if subset.is_empty() { (0..k).collect() } else { subset.to_vec() };
    let mut per_joint = vec![0.0; k];
    for (p, g) in pred.iter().zip(gt) {
        for (e, (a, b)) in per_joint.iter_mut().zip(p.joints.iter().zip(&g.joints)) {
            *e += geom::dist(*a, *b);
        }
    }
    let n = pred.len() as f64;
    per_joint.iter_mut().for_each(|e| *e /= n);
    let mean = subset.iter().map(|&j| per_joint[j]).sum::<f64>() / subset.len() as f64;
    Ok(Mpjpe {
        per_joint,
        subset,
        mean,
    })
}

/// Mean joint error of each sample.
pub fn per_sample_error(pred: &[Pose], gt: &[Pose]) -> Result<Vec<f64>> {
    let k = check_sets(pred, gt)?;
    Ok(pred
        .iter()
        .zip(gt)
        .map(|(p, g)| p.joints.iter().zip(&g.joints).map(|(a, b)| geom::dist(*a, *b)).sum::<f64>() / k as f64)
        .collect())
}

/// Violation rates and mean values of the three constraint losses.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlausibilityReport {
    pub samples: usize,
    /// Fraction of poses with a positive loss: sym, length, angle.
    pub rate: [f64; 3],
    /// Mean loss: sym, length, angle, anat.
    pub mean: [f64; 4],
}

pub fn plausibility_report(poses: &[Pose], spec: &SkeletonSpec, bounds: &AnatomicalBounds) -> Result<PlausibilityReport> {
    if poses.is_empty() {
        return Err(Error::Empty("plausibility report needs at least one pose".into()));
    }
    let anatomy = Anatomy::new(spec, bounds)?;
    let mut rate = [0.0; 3];
    let mut mean = [0.0; 4];
    for p in poses {
        let t = anatomy.plausibility_triple(p)?;
        for (i, v) in [t.sym, t.length, t.angle].into_iter().enumerate() {
            rate[i] += (v > 0.0) as u8 as f64;
            mean[i] += v;
        }
        mean[3] += t.anat();
    }
    let n = poses.len() as f64;
    rate.iter_mut().for_each(|r| *r /= n);
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(PlausibilityReport {
        samples: poses.len(),
        rate,
        mean,
    })
}

/// Sample Pearson correlation and its two-sided p-value from the
/// t-distribution with `n - 2` degrees of freedom.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("pearson on {} and {} values", x.len(), y.len())));
    }
    let n = x.len();
    if n < 3 {
        return Err(Error::InvalidArgument(format!("pearson needs at least 3 values, got {n}")));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / n as f64;
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::InvalidArgument("pearson input has zero variance".into()));
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    Ok((r, pearson_p(r, n)))
}

/// Two-sided p-value of a correlation `r` over `n` samples.
pub fn pearson_p(r: f64, n: usize) -> f64 {
    let df = (n - 2) as f64;
    let one_minus = 1.0 - r * r;
    if one_minus <= 0.0 {
        return 0.0;
    }
    let t2 = r * r * df / one_minus;
    // P(|T| > t) = I_{df / (df + t^2)}(df / 2, 1 / 2)
    beta_reg(df / 2.0, 0.5, df / (df + t2))
}

/// Root-centers every pose.
fn root_centered(pose: &Pose, root: usize) -> Pose {
    pose.translated(geom::scale(pose.joints[root], -1.0))
}

/// The mean root-centered training pose, predicted for every test sample,
/// evaluated against root-centered test poses (so the baseline knows the true
/// root location).
pub fn mean_pose_baseline(train: &[Pose], test: &[Pose], spec: &SkeletonSpec) -> Result<(Pose, EvalReport)> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::Empty("mean-pose baseline needs non-empty splits".into()));
    }
    for p in train.iter().chain(test) {
        spec.check_pose(p)?;
    }
    let k = spec.num_joints();
    let mut mean = vec![[0.0; 3]; k];
    for p in train {
        let c = root_centered(p, spec.root);
        for (m, j) in mean.iter_mut().zip(&c.joints) {
            *m = geom::add(*m, *j);
        }
    }
    let mean = Pose::new(mean.into_iter().map(|m| geom::scale(m, 1.0 / train.len() as f64)).collect());
    let gts: Vec<Pose> = test.iter().map(|p| root_centered(p, spec.root)).collect();
    let preds = vec![mean.clone(); test.len()];
    let report = EvalReport::build(&preds, &gts, spec, None, &[])?;
    Ok((mean, report))
}

/// One row of the correlation table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationRow {
    pub loss: String,
    pub r: f64,
    pub p: f64,
}

/// Pearson R/p between per-sample error and each of sym, length, angle and
/// anat evaluated on the predictions.
pub fn correlation_table(
    pred: &[Pose],
    gt: &[Pose],
    spec: &SkeletonSpec,
    bounds: &AnatomicalBounds,
) -> Result<Vec<CorrelationRow>> {
    let err = per_sample_error(pred, gt)?;
    let anatomy = Anatomy::new(spec, bounds)?;
    let triples: Vec<PlausibilityTriple> = pred
        .iter()
        .map(|p| anatomy.plausibility_triple(p))
        .collect::<Result<_>>()?;
    let columns: [(&str, fn(&PlausibilityTriple) -> f64); 4] = [
        ("sym", |t| t.sym),
        ("length", |t| t.length),
        ("angle", |t| t.angle),
        ("anat", |t| t.anat()),
    ];
    columns
        .iter()
        .map(|(name, f)| {
            let v: Vec<f64> = triples.iter().map(f).collect();
            let (r, p) = pearson(&v, &err)
                .map_err(|e| Error::InvalidArgument(format!("correlation of {name} with pose error: {e}")))?;
            Ok(CorrelationRow {
                loss: name.to_string(),
                r,
                p,
            })
        })
        .collect()
}

/// Runs the model on labeled samples and correlates its plausibility with its
/// error.
pub fn correlation_study(
    params: &ModelParams,
    clouds: &[PointCloud],
    gt: &[Pose],
    spec: &SkeletonSpec,
    bounds: &AnatomicalBounds,
    points: usize,
) -> Result<Vec<CorrelationRow>> {
    let pred = predict(params, clouds, points)?;
    correlation_table(&pred, gt, spec, bounds)
}

const PREDICT_BATCH: usize = 16;

/// Inference-mode predictions. Clouds with more than `points` points are
/// subsampled with a generator seeded by the sample index, so predictions
/// do not depend on batching or run history; 0 keeps every point.
pub fn predict(params: &ModelParams, clouds: &[PointCloud], points: usize) -> Result<Vec<Pose>> {
    let cfg = AugmentConfig {
        rotation_deg: 0.0,
        translation: 0.0,
        subsample_points: points,
    };
    let mut out = Vec::with_capacity(clouds.len());
    for (b, chunk) in clouds.chunks(PREDICT_BATCH).enumerate() {
        let inputs: Vec<PointCloud> = chunk
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let idx = (b * PREDICT_BATCH + i) as u64;
                if points == 0 || c.len() <= points {
                    Ok(c.clone())
                } else {
                    augment(c, &cfg, &mut ChaCha8Rng::seed_from_u64(idx)).map(|(c, _)| c)
                }
            })
            .collect::<Result<_>>()?;
        let refs: Vec<&PointCloud> = inputs.iter().collect();
        out.extend(forward(params, &refs, false)?.poses);
    }
    Ok(out)
}

/// MPJPE breakdown, optional plausibility and correlation results.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub samples: usize,
    pub joint_names: Vec<String>,
    pub per_joint: Vec<f64>,
    pub groups: BTreeMap<String, f64>,
    /// Mean over all joints.
    pub mean: f64,
    /// Joint subset and its mean, when one was requested.
    pub subset: Option<(Vec<usize>, f64)>,
    pub plausibility: Option<PlausibilityReport>,
    pub correlation: Vec<CorrelationRow>,
}

impl EvalReport {
    /// Builds the report from predictions; plausibility is evaluated on the
    /// predictions when bounds are given.
    pub fn build(
        pred: &[Pose],
        gt: &[Pose],
        spec: &SkeletonSpec,
        bounds: Option<&AnatomicalBounds>,
        subset: &[usize],
    ) -> Result<EvalReport> {
        let all = mpjpe(pred, gt, &[])?;
        if all.per_joint.len() != spec.num_joints() {
            return Err(Error::Shape(format!(
                "poses have {} joints, skeleton has {}",
                all.per_joint.len(),
                spec.num_joints()
            )));
        }
        let subset = if subset.is_empty() {
            None
        } else {
            let m = mpjpe(pred, gt, subset)?;
            Some((m.subset, m.mean))
        };
        let groups = spec
            .groups
            .iter()
            .filter(|(_, j)| !j.is_empty() && j.iter().all(|&i| i < spec.num_joints()))
            .map(|(g, j)| (g.clone(), j.iter().map(|&i| all.per_joint[i]).sum::<f64>() / j.len() as f64))
            .collect();
        let plausibility = bounds.map(|b| plausibility_report(pred, spec, b)).transpose()?;
        Ok(EvalReport {
            samples: pred.len(),
            joint_names: spec.joint_names.clone(),
            per_joint: all.per_joint,
            groups,
            mean: all.mean,
            subset,
            plausibility,
            correlation: Vec::new(),
        })
    }

    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "samples = {}", self.samples);
        let _ = writeln!(s, "mpjpe.mean = {:.6}", self.mean);
        if let Some((subset, mean)) = &self.subset {
            let names: Vec<&str> = subset.iter().map(|&j| self.joint_names[j].as_str()).collect();
            let _ = writeln!(s, "mpjpe.subset = {}", names.join(","));
            let _ = writeln!(s, "mpjpe.subset_mean = {mean:.6}");
        }
        for (g, v) in &self.groups {
            let _ = writeln!(s, "mpjpe.group.{g} = {v:.6}");
        }
        for (name, v) in self.joint_names.iter().zip(&self.per_joint) {
            let _ = writeln!(s, "mpjpe.joint.{name} = {v:.6}");
        }
        if let Some(p) = &self.plausibility {
            for (i, c) in ["sym", "length", "angle"].iter().enumerate() {
                let _ = writeln!(s, "plausibility.rate.{c} = {:.6}", p.rate[i]);
            }
            for (i, c) in ["sym", "length", "angle", "anat"].iter().enumerate() {
                let _ = writeln!(s, "plausibility.mean.{c} = {:.6}", p.mean[i]);
            }
        }
        for row in &self.correlation {
            let _ = writeln!(s, "correlation.{}.r = {:.6}", row.loss, row.r);
            let _ = writeln!(s, "correlation.{}.p = {:.3e}", row.loss, row.p);
        }
        s
    }

    /// Aligned human-readable table; errors in millimeters.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let width = self.joint_names.iter().map(String::len).max().unwrap_or(4).max(12);
        let _ = writeln!(s, "{:<width$}  {:>10}", "joint", "MPJPE [mm]");
        for (name, v) in self.joint_names.iter().zip(&self.per_joint) {
            let _ = writeln!(s, "{name:<width$}  {:>10.1}", v * 1000.0);
        }
        for (g, v) in &self.groups {
            let _ = writeln!(s, "{:<width$}  {:>10.1}", format!("[{g}]"), v * 1000.0);
        }
        let _ = writeln!(s, "{:<width$}  {:>10.1}", "mean", self.mean * 1000.0);
        if let Some((_, m)) = &self.subset {
            let _ = writeln!(s, "{:<width$}  {:>10.1}", "mean*", m * 1000.0);
        }
        if !self.correlation.is_empty() {
            let _ = writeln!(s, "\n{:<8}  {:>8}  {:>10}", "loss", "R", "p");
            for row in &self.correlation {
                let _ = writeln!(s, "{:<8}  {:>8.3}  {:>10.2e}", row.loss, row.r, row.p);
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::derive_bounds;

    fn zeros(k: usize) -> Pose {
        Pose::zeros(k)
    }

    #[test]
    fn mpjpe_examples() {
        let gt = vec![zeros(5)];
        let m = mpjpe(&gt, &gt, &[]).unwrap();
        assert!(m.per_joint.iter().all(|&e| e == 0.0));

        let mut pred = zeros(5);
        pred.joints[2] = [3.0, 0.0, 4.0];
        let m = mpjpe(&[pred.clone()], &gt, &[]).unwrap();
        assert_eq!(m.per_joint[2], 5.0);
        assert_eq!(m.mean, 1.0);
        assert_eq!(mpjpe(&[pred.clone()], &gt, &[2]).unwrap().mean, 5.0);
        assert!(mpjpe(&[pred.clone()], &gt, &[7]).is_err());
        assert!(mpjpe(&[pred.clone(), pred], &gt, &[]).is_err());
    }

    #[test]
    fn pearson_examples() {
        let (r, _) = pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap();
        assert!((r - 1.0).abs() < 1e-12);
        let (r, _) = pearson(&[1.0, 2.0, 3.0], &[6.0, 4.0, 2.0]).unwrap();
        assert!((r + 1.0).abs() < 1e-12);
        assert!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
        assert!(pearson(&[1.0, 2.0], &[1.0, 2.0]).is_err());
        assert!(pearson_p(0.56, 20) < 0.05);
        assert!(pearson_p(0.3, 20) > 0.05);
    }

    #[test]
    fn pearson_p_matches_the_t_distribution() {
        use statrs::distribution::{ContinuousCDF, StudentsT};
        for &(r, n) in &[(0.1, 10usize), (0.56, 20), (-0.4, 50), (0.9, 5)] {
            let df = (n - 2) as f64;
            let t: f64 = r * (df / (1.0 - r * r)).sqrt();
            let dist = StudentsT::new(0.0, 1.0, df).unwrap();
            let want = 2.0 * (1.0 - dist.cdf(t.abs()));
            assert!((pearson_p(r, n) - want).abs() < 1e-10, "r={r} n={n}");
        }
    }

    #[test]
    fn mean_pose_baseline_examples() {
        let spec = SkeletonSpec::default_16();
        let pose = Pose::new((0..16).map(|i| [i as f64 * 0.1, 1.0, 0.2]).collect());
        let (_, report) = mean_pose_baseline(std::slice::from_ref(&pose), std::slice::from_ref(&pose), &spec).unwrap();
        assert_eq!(report.mean, 0.0);

        let mirror = Pose::new(pose.joints.iter().map(|j| [-j[0], j[1], j[2]]).collect());
        let (mean, report) = mean_pose_baseline(&[pose.clone(), mirror], &[pose], &spec).unwrap();
        assert!(mean.joints.iter().all(|j| j[0].abs() < 1e-15));
        assert_eq!(report.per_joint[spec.root], 0.0);
    }

    #[test]
    fn plausibility_examples() {
        let spec = SkeletonSpec::default_16();
        let base = Pose::new(
            (0..16)
                .map(|i| [((i * 7) % 5) as f64 * 0.1, i as f64 * 0.1, ((i * 3) % 4) as f64 * 0.05])
                .collect(),
        );
        let bounds = derive_bounds(std::slice::from_ref(&base), &spec, 0.0).unwrap();
        // the lone pose is not symmetric, so widen its own bounds to accept it
        let mut bounds = bounds;
        bounds.sym_tol = vec![10.0; spec.symmetric_pairs.len()];
        let r = plausibility_report(std::slice::from_ref(&base), &spec, &bounds).unwrap();
        assert_eq!(r.rate, [0.0; 3]);

        bounds.sym_tol = vec![0.0; spec.symmetric_pairs.len()];
        let r = plausibility_report(&[base], &spec, &bounds).unwrap();
        assert_eq!(r.rate, [1.0, 0.0, 0.0]);
        assert!(plausibility_report(&[], &spec, &bounds).is_err());
    }

    #[test]
    fn report_formats_are_stable() {
        let spec = SkeletonSpec::default_16();
        let gt = vec![Pose::zeros(16)];
        let mut pred = Pose::zeros(16);
        pred.joints[0] = [0.003, 0.0, 0.004];
        let r = EvalReport::build(&[pred], &gt, &spec, None, &[0, 1]).unwrap();
        let kv = r.to_key_values();
        assert!(kv.contains("mpjpe.joint.pelvis = 0.005000"));
        assert!(kv.contains("mpjpe.subset = pelvis,spine"));
        assert!(kv.contains("mpjpe.subset_mean = 0.002500"));
        assert!(r.to_table().contains("mean*"));
    }
}
