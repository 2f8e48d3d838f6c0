//! Parametric domain shifts acting on clouds only.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{self, Vec3};
use crate::model::PointCloud;

/// One shift. A target domain may stack several.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase", deny_unknown_fields)]
pub enum ShiftConfig {
    /// A blanket proxy: every point is lifted to the highest point within
    /// `radius` in the x/y plane, plus `offset` and Gaussian drape noise.
    Cover { offset: f64, radius: f64, drape_noise: f64 },
    /// A different depth sensor: Gaussian noise on every coordinate, then
    /// only points with `normal . p >= plane_offset` are kept.
    Sensor {
        noise: f64,
        plane_normal: Vec3,
        plane_offset: f64,
    },
    /// Objects around the subject: `clutter_points` uniform points inside the
    /// clutter box and `headboard_points` on a vertical slab.
    Environment {
        clutter_points: usize,
        clutter_min: Vec3,
        clutter_max: Vec3,
        headboard_points: usize,
        headboard_min: Vec3,
        headboard_max: Vec3,
    },
}

impl ShiftConfig {
    pub fn check(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        match self {
            ShiftConfig::Cover {
                offset,
                radius,
                drape_noise,
            } => {
                if !(*offset >= 0.0 && *radius >= 0.0 && *drape_noise >= 0.0) {
                    return bad("cover shift magnitudes must be >= 0");
                }
            }
            ShiftConfig::Sensor {
                noise, plane_normal, ..
            } => {
                if !(*noise >= 0.0) {
                    return bad("sensor noise must be >= 0");
                }
                if geom::normalize(*plane_normal).is_none() {
                    return bad("sensor crop plane normal must be non-zero");
                }
            }
            ShiftConfig::Environment {
                clutter_min,
                clutter_max,
                headboard_min,
                headboard_max,
                ..
            } => {
                for (lo, hi) in [(clutter_min, clutter_max), (headboard_min, headboard_max)] {
                    if (0..3).any(|k| !(lo[k] <= hi[k])) {
                        return bad("environment boxes need min <= max per axis");
                    }
                }
            }
        }
        Ok(())
    }
}

fn uniform_in<R: Rng + ?Sized>(lo: Vec3, hi: Vec3, rng: &mut R) -> Vec3 {
    let mut p = [0.0; 3];
    for k in 0..3 {
        p[k] = if hi[k] > lo[k] { rng.random_range(lo[k]..=hi[k]) } else { lo[k] };
    }
    p
}

/// Highest z within `radius` (x/y distance) of every point.
fn upper_envelope(points: &[Vec3], radius: f64) -> Vec<f64> {
    let cell = |v: f64| (v / radius).floor() as i64;
    let mut grid: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    for (i, p) in points.iter().enumerate() {
        grid.entry((cell(p[0]), cell(p[1]))).or_default().push(i);
    }
    let r2 = radius * radius;
    points
        .iter()
        .map(|p| {
            let (cx, cy) = (cell(p[0]), cell(p[1]));
            let mut top = p[2];
            for dx in -1..=1 {
                for dy in -1..=1 {
                    for &j in grid.get(&(cx + dx, cy + dy)).map(Vec::as_slice).unwrap_or(&[]) {
                        let q = points[j];
                        let (ex, ey) = (q[0] - p[0], q[1] - p[1]);
                        if ex * ex + ey * ey <= r2 && q[2] > top {
                            top = q[2];
                        }
                    }
                }
            }
            top
        })
        .collect()
}

pub fn apply_domain_shift<R: Rng + ?Sized>(cloud: &PointCloud, shift: &ShiftConfig, rng: &mut R) -> Result<PointCloud> {
    shift.check()?;
    let points = match *shift {
        ShiftConfig::Cover {
            offset,
            radius,
            drape_noise,
        } => {
            let tops = if radius > 0.0 {
                upper_envelope(&cloud.points, radius)
            } else {
                cloud.points.iter().map(|p| p[2]).collect()
            };
            cloud
                .points
                .iter()
                .zip(tops)
                .map(|(p, top)| {
                    let mut z = top + offset;
                    if drape_noise > 0.0 {
                        let n: f64 = StandardNormal.sample(rng);
                        z += drape_noise * n;
                    }
                    [p[0], p[1], z]
                })
                .collect()
        }
        ShiftConfig::Sensor {
            noise,
            plane_normal,
            plane_offset,
        } => cloud
            .points
            .iter()
            .map(|&p| {
                let mut q = p;
                if noise > 0.0 {
                    for v in &mut q {
                        let n: f64 = StandardNormal.sample(rng);
                        *v += noise * n;
                    }
                }
                q
            })
            .filter(|q| geom::dot(plane_normal, *q) >= plane_offset)
            .collect(),
        ShiftConfig::Environment {
            clutter_points,
            clutter_min,
            clutter_max,
            headboard_points,
            headboard_min,
            headboard_max,
        } => {
            let mut out = cloud.points.clone();
            out.extend((0..clutter_points).map(|_| uniform_in(clutter_min, clutter_max, rng)));
            out.extend((0..headboard_points).map(|_| uniform_in(headboard_min, headboard_max, rng)));
            out
        }
    };
    Ok(PointCloud::new(points))
}

/// Applies shifts in order.
pub fn apply_shifts<R: Rng + ?Sized>(cloud: &PointCloud, shifts: &[ShiftConfig], rng: &mut R) -> Result<PointCloud> {
    let mut out = cloud.clone();
    for s in shifts {
        out = apply_domain_shift(&out, s, rng)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn cloud() -> PointCloud {
        PointCloud::new(
            (0..200)
                .map(|i| {
                    let t = i as f64 * 0.01;
                    [t.sin() * 0.3, t - 1.0, 0.05 + 0.1 * (3.0 * t).cos().abs()]
                })
                .collect(),
        )
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    #[test]
    fn neutral_cover_is_identity() {
        let shift = ShiftConfig::Cover {
            offset: 0.0,
            radius: 0.0,
            drape_noise: 0.0,
        };
        let c = cloud();
        assert_eq!(apply_domain_shift(&c, &shift, &mut rng()).unwrap(), c);
    }

    #[test]
    fn cover_lifts_to_the_local_maximum() {
        let c = PointCloud::new(vec![[0.0, 0.0, 0.1], [0.05, 0.0, 0.3], [1.0, 0.0, 0.0]]);
        let shift = ShiftConfig::Cover {
            offset: 0.02,
            radius: 0.1,
            drape_noise: 0.0,
        };
        let out = apply_domain_shift(&c, &shift, &mut rng()).unwrap();
        assert!((out.points[0][2] - 0.32).abs() < 1e-12);
        assert!((out.points[1][2] - 0.32).abs() < 1e-12);
        assert!((out.points[2][2] - 0.02).abs() < 1e-12);
        assert_eq!(out.points[0][0], 0.0);
    }

    #[test]
    fn clutter_adds_exactly_the_requested_points() {
        let shift = ShiftConfig::Environment {
            clutter_points: 37,
            clutter_min: [-0.5, -1.0, 0.0],
            clutter_max: [0.5, 1.0, 0.3],
            headboard_points: 0,
            headboard_min: [0.0; 3],
            headboard_max: [0.0; 3],
        };
        let c = cloud();
        let out = apply_domain_shift(&c, &shift, &mut rng()).unwrap();
        assert_eq!(out.len(), c.len() + 37);
        assert_eq!(&out.points[..c.len()], &c.points[..]);
    }

    #[test]
    fn sensor_plane_below_everything_keeps_all_points() {
        let shift = ShiftConfig::Sensor {
            noise: 0.0,
            plane_normal: [0.0, 0.0, 1.0],
            plane_offset: -10.0,
        };
        let c = cloud();
        assert_eq!(apply_domain_shift(&c, &shift, &mut rng()).unwrap(), c);
        let crop = ShiftConfig::Sensor {
            noise: 0.0,
            plane_normal: [0.0, 1.0, 0.0],
            plane_offset: 0.0,
        };
        let out = apply_domain_shift(&c, &crop, &mut rng()).unwrap();
        assert!(out.len() < c.len());
        assert!(out.points.iter().all(|p| p[1] >= 0.0));
    }

    #[test]
    fn negative_magnitudes_are_rejected() {
        let shift = ShiftConfig::Cover {
            offset: -0.1,
            radius: 0.0,
            drape_noise: 0.0,
        };
        assert!(apply_domain_shift(&cloud(), &shift, &mut rng()).is_err());
    }

    #[test]
    fn config_roundtrips_through_toml() {
        #[derive(Serialize, Deserialize, PartialEq, Debug)]
        struct Doc {
            shift: Vec<ShiftConfig>,
        }
        let doc = Doc {
            shift: vec![
                ShiftConfig::Cover {
                    offset: 0.03,
                    radius: 0.12,
                    drape_noise: 0.005,
                },
                ShiftConfig::Sensor {
                    noise: 0.01,
                    plane_normal: [0.0, 0.0, 1.0],
                    plane_offset: 0.0,
                },
            ],
        };
        let text = toml::to_string(&doc).unwrap();
        assert!(text.contains("mode = \"cover\""));
        assert_eq!(toml::from_str::<Doc>(&text).unwrap(), doc);
    }
}
