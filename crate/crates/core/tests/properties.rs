//! Invariants checked over random inputs.

use anatda::anatomy::{Anatomy, Penalty};
use anatda::datagen::{dedup_frames, sample_pose, voxel_downsample, BodyTemplate, Subject};
use anatda::eval::{mpjpe, pearson};
use anatda::geom::dist;
use anatda::model::PointCloud;
use anatda::skeleton::{derive_bounds, AnatomicalBounds, Pose, SkeletonSpec};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn poses(seed: u64, n: usize, scale: f64) -> Vec<Pose> {
    let template = BodyTemplate::default_16();
    let subject = Subject::uniform(&template, scale);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| sample_pose(&template, &subject, &mut rng).unwrap()).collect()
}

fn tight_bounds(seed: u64) -> (SkeletonSpec, AnatomicalBounds) {
    let spec = SkeletonSpec::default_16();
    let mut b = derive_bounds(&poses(seed, 4, 1.0), &spec, 0.0).unwrap();
    b.sym_tol.iter_mut().for_each(|t| *t = 0.005);
    (spec, b)
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * (1.0 + a.abs().max(b.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn anatomical_losses_ignore_rigid_motion(
        seed in 0u64..1000,
        angle in -3.1f64..3.1,
        t in prop::array::uniform3(-2.0f64..2.0),
        l2 in any::<bool>(),
    ) {
        let (spec, b) = tight_bounds(seed);
        let kind = if l2 { Penalty::L2 } else { Penalty::L1 };
        let anatomy = Anatomy::new(&spec, &b).unwrap().with_penalty(kind);
        let pose = &poses(seed + 1, 1, 1.1)[0];
        let moved = pose.rigid(angle, t);
        let (p, q) = (anatomy.plausibility_triple(pose).unwrap(), anatomy.plausibility_triple(&moved).unwrap());
        prop_assert!(close(p.sym, q.sym), "{} vs {}", p.sym, q.sym);
        prop_assert!(close(p.length, q.length), "{} vs {}", p.length, q.length);
        prop_assert!(close(p.angle, q.angle), "{} vs {}", p.angle, q.angle);
    }

    #[test]
    fn derived_bounds_ignore_pose_order(seed in 0u64..1000, shift in 1usize..7) {
        let spec = SkeletonSpec::default_16();
        let mut ps = poses(seed, 8, 0.95);
        let a = derive_bounds(&ps, &spec, 0.01).unwrap();
        ps.rotate_left(shift);
        ps.swap(0, 7);
        prop_assert_eq!(a, derive_bounds(&ps, &spec, 0.01).unwrap());
    }

    #[test]
    fn derived_bounds_contain_their_poses(seed in 0u64..1000, n in 1usize..10) {
        let spec = SkeletonSpec::default_16();
        let ps = poses(seed, n, 1.0);
        let b = derive_bounds(&ps, &spec, 0.0).unwrap();
        let anatomy = Anatomy::new(&spec, &b).unwrap();
        for p in &ps {
            prop_assert_eq!(anatomy.anat_loss(p).unwrap().value, 0.0);
        }
    }

    #[test]
    fn a_pose_never_beats_itself(seed in 0u64..1000, scale in 0.8f64..1.2) {
        let (spec, b) = tight_bounds(seed);
        let anatomy = Anatomy::new(&spec, &b).unwrap();
        let p = &poses(seed + 2, 1, scale)[0];
        prop_assert!(!anatomy.filter_pseudo_label(p, p).unwrap());
    }

    #[test]
    fn mpjpe_ignores_a_shared_rigid_motion(
        seed in 0u64..1000,
        angle in -3.1f64..3.1,
        t in prop::array::uniform3(-1.0f64..1.0),
    ) {
        let pred = poses(seed, 3, 1.0);
        let gt = poses(seed + 7, 3, 1.0);
        let a = mpjpe(&pred, &gt, &[]).unwrap().mean;
        let moved = |v: &[Pose]| v.iter().map(|p| p.rigid(angle, t)).collect::<Vec<_>>();
        let b = mpjpe(&moved(&pred), &moved(&gt), &[]).unwrap().mean;
        prop_assert!(close(a, b));
        prop_assert_eq!(mpjpe(&gt, &gt, &[]).unwrap().mean, 0.0);
    }

    #[test]
    fn pearson_is_symmetric_and_affine_invariant(
        x in prop::collection::vec(-10.0f64..10.0, 5..40),
        noise in prop::collection::vec(-1.0f64..1.0, 40),
        a in 0.1f64..5.0,
        c in -3.0f64..3.0,
    ) {
        let y: Vec<f64> = x.iter().zip(&noise).map(|(v, e)| 0.5 * v + e).collect();
        let (r, p) = pearson(&x, &y).unwrap();
        let (r2, p2) = pearson(&y, &x).unwrap();
        prop_assert!(close(r, r2) && close(p, p2));
        let scaled: Vec<f64> = x.iter().map(|v| a * v + c).collect();
        prop_assert!(close(r, pearson(&scaled, &y).unwrap().0));
        let flipped: Vec<f64> = x.iter().map(|v| -v).collect();
        prop_assert!(close(-r, pearson(&flipped, &y).unwrap().0));
        prop_assert!((-1.0..=1.0).contains(&r) && (0.0..=1.0).contains(&p));
    }

    #[test]
    fn voxel_downsampling_is_idempotent(
        points in prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 1..200),
        edge in 0.05f64..0.5,
    ) {
        let once = voxel_downsample(&PointCloud::new(points.clone()), edge).unwrap();
        prop_assert!(once.len() <= points.len());
        let twice = voxel_downsample(&once, edge).unwrap();
        prop_assert_eq!(once.len(), twice.len());
        for (p, q) in once.points.iter().zip(&twice.points) {
            for d in 0..3 {
                prop_assert!((p[d] - q[d]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dedup_keeps_exactly_the_frames_that_moved(seed in 0u64..1000, threshold in 0.0f64..0.4) {
        let ps = poses(seed, 20, 1.0);
        let kept = dedup_frames(&ps, threshold).unwrap();
        prop_assert_eq!(kept[0], 0);
        let moved = |a: &Pose, b: &Pose| {
            a.joints.iter().zip(&b.joints).map(|(p, q)| dist(*p, *q)).fold(0.0, f64::max)
        };
        let mut last = 0;
        for t in 1..ps.len() {
            let far = moved(&ps[t], &ps[last]) > threshold;
            prop_assert_eq!(kept.contains(&t), far);
            if far {
                last = t;
            }
        }
    }
}
