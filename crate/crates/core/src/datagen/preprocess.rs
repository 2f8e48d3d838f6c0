//! Box crop, voxel filter and frame deduplication.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::geom::{self, Vec3};
use crate::model::PointCloud;
use crate::skeleton::Pose;

/// Keeps the points inside the closed box `[min, max]`.
pub fn crop_box(cloud: &PointCloud, min: Vec3, max: Vec3) -> Result<PointCloud> {
    if (0..3).any(|k| !(min[k] <= max[k])) {
        return Err(Error::InvalidArgument(format!("inverted crop box {min:?} .. {max:?}")));
    }
    Ok(PointCloud::new(
        cloud
            .points
            .iter()
            .filter(|p| (0..3).all(|k| p[k] >= min[k] && p[k] <= max[k]))
            .copied()
            .collect(),
    ))
}

/// One centroid per occupied cube of an origin-anchored grid, ordered by
/// voxel index.
pub fn voxel_downsample(cloud: &PointCloud, edge: f64) -> Result<PointCloud> {
    if !(edge > 0.0 && edge.is_finite()) {
        return Err(Error::InvalidArgument(format!("voxel edge {edge} must be > 0")));
    }
    let mut cells: BTreeMap<[i64; 3], (Vec3, usize)> = BTreeMap::new();
    for p in &cloud.points {
        let key = [
            (p[0] / edge).floor() as i64,
            (p[1] / edge).floor() as i64,
            (p[2] / edge).floor() as i64,
        ];
        let e = cells.entry(key).or_insert(([0.0; 3], 0));
        e.0 = geom::add(e.0, *p);
        e.1 += 1;
    }
    Ok(PointCloud::new(
        cells
            .into_values()
            .map(|(sum, n)| geom::scale(sum, 1.0 / n as f64))
            .collect(),
    ))
}

/// Greedy frame selection: frame `t` is kept iff some joint moved strictly
/// more than `threshold` since the last kept frame. Frame 0 is always kept.
pub fn dedup_frames(poses: &[Pose], threshold: f64) -> Result<Vec<usize>> {
    if poses.is_empty() {
        return Err(Error::Empty("dedup_frames needs at least one frame".into()));
    }
    if !(threshold >= 0.0) {
        return Err(Error::InvalidArgument(format!("threshold {threshold} must be >= 0")));
    }
    let mut kept = vec![0];
    for (t, pose) in poses.iter().enumerate().skip(1) {
        let last = &poses[*kept.last().unwrap()];
        if pose.len() != last.len() {
            return Err(Error::Shape(format!("frame {t} has {} joints, expected {}", pose.len(), last.len())));
        }
        let moved = pose
            .joints
            .iter()
            .zip(&last.joints)
            .map(|(a, b)| geom::dist(*a, *b))
            .fold(0.0, f64::max);
        if moved > threshold {
            kept.push(t);
        }
    }
    Ok(kept)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crop_examples() {
        let c = PointCloud::new(vec![[0.0, 0.0, 0.0], [1.0, 1.0, 1.0], [0.5, 2.0, 0.5]]);
        assert_eq!(crop_box(&c, [-5.0; 3], [5.0; 3]).unwrap(), c);
        assert_eq!(crop_box(&c, [10.0; 3], [11.0; 3]).unwrap().len(), 0);
        let on_face = crop_box(&c, [0.0; 3], [1.0; 3]).unwrap();
        assert_eq!(on_face.points, vec![[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]]);
        assert!(crop_box(&c, [1.0; 3], [0.0; 3]).is_err());
    }

    #[test]
    fn voxel_examples() {
        let one = PointCloud::new(vec![[0.001, 0.002, 0.003], [0.011, 0.012, 0.013], [0.019, 0.0, 0.0]]);
        assert_eq!(voxel_downsample(&one, 0.02).unwrap().len(), 1);

        let grid: Vec<Vec3> = (0..27)
            .map(|i| [(i % 3) as f64 * 0.05 + 0.01, ((i / 3) % 3) as f64 * 0.05 + 0.01, (i / 9) as f64 * 0.05 + 0.01])
            .collect();
        let mut out = voxel_downsample(&PointCloud::new(grid.clone()), 0.02).unwrap().points;
        let mut want = grid;
        let key = |p: &Vec3| (p[0].to_bits(), p[1].to_bits(), p[2].to_bits());
        out.sort_by_key(key);
        want.sort_by_key(key);
        assert_eq!(out, want);

        let pair = PointCloud::new(vec![[0.0, 0.0, 0.0], [0.01, 0.0, 0.0]]);
        assert_eq!(voxel_downsample(&pair, 0.02).unwrap().points, vec![[0.005, 0.0, 0.0]]);
        assert!(voxel_downsample(&pair, 0.0).is_err());
    }

    #[test]
    fn negative_coordinates_use_floor_cells() {
        let c = PointCloud::new(vec![[-0.001, 0.0, 0.0], [0.001, 0.0, 0.0]]);
        assert_eq!(voxel_downsample(&c, 0.02).unwrap().len(), 2);
    }

    #[test]
    fn dedup_examples() {
        let p = Pose::new(vec![[0.0; 3], [1.0, 0.0, 0.0]]);
        assert_eq!(dedup_frames(&[p.clone(), p.clone(), p.clone()], 0.1).unwrap(), vec![0]);

        let walk: Vec<Pose> = (0..5)
            .map(|t| Pose::new(vec![[0.0; 3], [1.0 + 0.2 * t as f64, 0.0, 0.0]]))
            .collect();
        assert_eq!(dedup_frames(&walk, 0.1).unwrap(), vec![0, 1, 2, 3, 4]);

        let exact = vec![p.clone(), Pose::new(vec![[0.0; 3], [1.0, 0.0, 0.1]])];
        assert_eq!(dedup_frames(&exact, 0.1).unwrap(), vec![0]);
        assert!(dedup_frames(&[], 0.1).is_err());
    }

    #[test]
    fn dedup_compares_against_the_last_kept_frame() {
        // three steps of 0.06 each: only the cumulative motion exceeds 0.1
        let frames: Vec<Pose> = (0..4).map(|t| Pose::new(vec![[0.06 * t as f64, 0.0, 0.0]])).collect();
        assert_eq!(dedup_frames(&frames, 0.1).unwrap(), vec![0, 2]);
    }
}
