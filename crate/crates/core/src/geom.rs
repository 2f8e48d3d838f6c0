//! Small fixed-size vector helpers. Poses and clouds are stored as rows of
//! `[f64; 3]`, which keeps the hot loops free of allocation.

pub type Vec3 = [f64; 3];

#[inline]
pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn normalize(a: Vec3) -> Option<Vec3> {
    let n = norm(a);
    if n > 0.0 && n.is_finite() {
        Some(scale(a, 1.0 / n))
    } else {
        None
    }
}

/// Rotation about the z axis by `angle` radians.
#[inline]
pub fn rot_z(a: Vec3, angle: f64) -> Vec3 {
    let (s, c) = angle.sin_cos();
    [c * a[0] - s * a[1], s * a[0] + c * a[1], a[2]]
}

pub fn dist(a: Vec3, b: Vec3) -> f64 {
    norm(sub(a, b))
}

/// Two unit vectors orthogonal to `d` (assumed unit length) and to each other.
pub fn orthonormal_basis(d: Vec3) -> (Vec3, Vec3) {
    let helper = if d[0].abs() < 0.9 {
        [1.0, 0.0, 0.0]
    } else {
        [0.0, 1.0, 0.0]
    };
    let u = normalize(cross(d, helper)).unwrap_or([0.0, 0.0, 1.0]);
    let v = cross(d, u);
    (u, v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rotation_by_pi_flips_x() {
        let r = rot_z([1.0, 0.0, 0.0], std::f64::consts::PI);
        assert!((r[0] + 1.0).abs() < 1e-12);
        assert!(r[1].abs() < 1e-12);
    }

    #[test]
    fn basis_is_orthonormal() {
        for d in [[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], normalize([1.0, 2.0, -3.0]).unwrap()] {
            let (u, v) = orthonormal_basis(d);
            assert!(dot(u, d).abs() < 1e-12);
            assert!(dot(v, d).abs() < 1e-12);
            assert!(dot(u, v).abs() < 1e-12);
            assert!((norm(u) - 1.0).abs() < 1e-12);
            assert!((norm(v) - 1.0).abs() < 1e-12);
        }
    }
}
