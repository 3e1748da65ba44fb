//! Weak-perspective camera: rotate, drop depth, scale, translate.
//!
//! A pose is stored as 7 numbers in the order
//! `(scale, tx, ty, qw, qx, qy, qz)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Quaternions further than this from unit norm trigger a warning before
/// being normalised.
pub const QUATERNION_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 7]", into = "[f64; 7]")]
pub struct CameraPose {
    scale: f64,
    translation: [f64; 2],
    rotation: [f64; 4],
}

impl CameraPose {
    pub fn new(scale: f64, translation: [f64; 2], rotation: [f64; 4]) -> Result<Self> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::Camera(format!("scale must be positive, got {scale}")));
        }
        if translation.iter().chain(rotation.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Camera("pose contains non-finite values".into()));
        }
        let norm = rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(Error::Camera("rotation quaternion has zero norm".into()));
        }
        if (norm - 1.0).abs() > QUATERNION_TOLERANCE {
            log::warn!("camera quaternion norm {norm:.6} is not unit; normalising");
        }
        let rotation = rotation.map(|v| v / norm);
        Ok(Self {
            scale,
            translation,
            rotation,
        })
    }

    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            translation: [0.0, 0.0],
            rotation: [1.0, 0.0, 0.0, 0.0],
        }
    }

    pub fn from_array(v: [f64; 7]) -> Result<Self> {
        Self::new(v[0], [v[1], v[2]], [v[3], v[4], v[5], v[6]])
    }

    pub fn to_array(&self) -> [f64; 7] {
        let [w, x, y, z] = self.rotation;
        [self.scale, self.translation[0], self.translation[1], w, x, y, z]
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn translation(&self) -> [f64; 2] {
        self.translation
    }

    pub fn rotation(&self) -> [f64; 4] {
        self.rotation
    }

    pub fn rotation_matrix(&self) -> [[f64; 3]; 3] {
        quat_to_matrix(self.rotation)
    }

    /// Camera-space depth of a point; smaller is nearer to the viewer.
    pub fn depth(&self, v: [f64; 3]) -> f64 {
        let r = self.rotation_matrix();
        r[2][0] * v[0] + r[2][1] * v[1] + r[2][2] * v[2]
    }
}

impl TryFrom<[f64; 7]> for CameraPose {
    type Error = Error;

    fn try_from(v: [f64; 7]) -> Result<Self> {
        Self::from_array(v)
    }
}

impl From<CameraPose> for [f64; 7] {
    fn from(p: CameraPose) -> Self {
        p.to_array()
    }
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`.
pub fn quat_to_matrix(q: [f64; 4]) -> [[f64; 3]; 3] {
    let [w, x, y, z] = q;
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

/// Partial derivatives of the first two rows of [`quat_to_matrix`] with
/// respect to `(w, x, y, z)`.
fn quat_matrix_partials(q: [f64; 4]) -> [[[f64; 3]; 2]; 4] {
    let [w, x, y, z] = q;
    let two = 2.0;
    [
        // d/dw
        [[0.0, -two * z, two * y], [two * z, 0.0, -two * x]],
        // d/dx
        [[0.0, two * y, two * z], [two * y, -4.0 * x, -two * w]],
        // d/dy
        [[-4.0 * y, two * x, two * w], [two * x, 0.0, two * z]],
        // d/dz
        [[-4.0 * z, -two * w, two * x], [two * w, -4.0 * z, two * y]],
    ]
}

/// Hamilton product `a ∘ b` (apply `b` first, then `a`).
pub fn quat_mul(a: [f64; 4], b: [f64; 4]) -> [f64; 4] {
    let [aw, ax, ay, az] = a;
    let [bw, bx, by, bz] = b;
    [
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ]
}

/// Unit quaternion for a rotation of `angle` radians about `axis`.
pub fn quat_from_axis_angle(axis: [f64; 3], angle: f64) -> [f64; 4] {
    let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
    let (s, c) = (angle / 2.0).sin_cos();
    [c, s * axis[0] / n, s * axis[1] / n, s * axis[2] / n]
}

pub fn project_point(v: [f64; 3], pose: &CameraPose) -> [f64; 2] {
    let r = pose.rotation_matrix();
    let s = pose.scale;
    let t = pose.translation;
    [
        s * (r[0][0] * v[0] + r[0][1] * v[1] + r[0][2] * v[2]) + t[0],
        s * (r[1][0] * v[0] + r[1][1] * v[1] + r[1][2] * v[2]) + t[1],
    ]
}

/// Projects vertices to normalised image coordinates:
/// `p = scale · (R(q) v)_xy + translation`.
pub fn project(vertices: &[[f64; 3]], pose: &CameraPose) -> Vec<[f64; 2]> {
    vertices.iter().map(|v| project_point(*v, pose)).collect()
}

/// Gradient of a scalar with respect to every pose parameter, in the
/// `(scale, tx, ty, qw, qx, qy, qz)` order.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PoseGrad(pub [f64; 7]);

/// Back-propagates `grad` (one 2-vector per projected point) to the vertices
/// and to the pose parameters. The quaternion gradient is taken through the
/// unit-quaternion matrix formula without renormalisation.
pub fn project_backward(vertices: &[[f64; 3]], pose: &CameraPose, grad: &[[f64; 2]]) -> (Vec<[f64; 3]>, PoseGrad) {
    let r = pose.rotation_matrix();
    let s = pose.scale;
    let partials = quat_matrix_partials(pose.rotation);
    let mut pg = [0.0; 7];
    let mut gv = Vec::with_capacity(vertices.len());
    for (v, g) in vertices.iter().zip(grad) {
        let mut d = [0.0; 3];
        for (a, ga) in g.iter().enumerate() {
            for b in 0..3 {
                d[b] += s * r[a][b] * ga;
            }
            let rv = r[a][0] * v[0] + r[a][1] * v[1] + r[a][2] * v[2];
            pg[0] += ga * rv;
            pg[1 + a] += ga;
            for (k, dk) in partials.iter().enumerate() {
                let drv = dk[a][0] * v[0] + dk[a][1] * v[1] + dk[a][2] * v[2];
                pg[3 + k] += ga * s * drv;
            }
        }
        gv.push(d);
    }
    (gv, PoseGrad(pg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn close(a: [f64; 2], b: [f64; 2], tol: f64) -> bool {
        (a[0] - b[0]).abs() < tol && (a[1] - b[1]).abs() < tol
    }

    #[test]
    fn identity_drops_depth() {
        let p = project_point([0.2, -0.3, 0.9], &CameraPose::identity());
        assert_eq!(p, [0.2, -0.3]);
    }

    #[test]
    fn quarter_turn_about_z() {
        let pose = CameraPose::new(1.0, [0.0, 0.0], quat_from_axis_angle([0.0, 0.0, 1.0], FRAC_PI_2)).unwrap();
        assert!(close(project_point([1.0, 0.0, 0.0], &pose), [0.0, 1.0], 1e-12));
    }

    #[test]
    fn scale_and_translation() {
        let pose = CameraPose::new(2.0, [0.1, 0.1], [1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(close(project_point([0.5, 0.5, 0.0], &pose), [1.1, 1.1], 1e-12));
    }

    #[test]
    fn non_unit_quaternion_is_normalised() {
        let pose = CameraPose::new(1.0, [0.0, 0.0], [2.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(pose.rotation(), [1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn invalid_poses_are_rejected() {
        assert!(CameraPose::new(0.0, [0.0, 0.0], [1.0, 0.0, 0.0, 0.0]).is_err());
        assert!(CameraPose::new(1.0, [0.0, 0.0], [0.0; 4]).is_err());
        assert!(CameraPose::new(1.0, [f64::NAN, 0.0], [1.0, 0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn pose_json_is_seven_numbers() {
        let pose = CameraPose::new(0.7, [0.1, -0.2], [1.0, 0.0, 0.0, 0.0]).unwrap();
        let s = serde_json::to_string(&pose).unwrap();
        assert_eq!(s, "[0.7,0.1,-0.2,1.0,0.0,0.0,0.0]");
        let back: CameraPose = serde_json::from_str(&s).unwrap();
        assert_eq!(back, pose);
    }

    #[test]
    fn matrix_matches_axis_angle_oracle() {
        // Rodrigues formula as an independent route.
        let axis = [0.3f64, -0.5, 0.8];
        let n = (axis.iter().map(|a| a * a).sum::<f64>()).sqrt();
        let k = axis.map(|a| a / n);
        let angle = 0.7f64;
        let m = quat_to_matrix(quat_from_axis_angle(axis, angle));
        let (s, c) = angle.sin_cos();
        for i in 0..3 {
            for j in 0..3 {
                let delta = if i == j { 1.0 } else { 0.0 };
                let cross = match (i, j) {
                    (0, 1) => -k[2],
                    (0, 2) => k[1],
                    (1, 0) => k[2],
                    (1, 2) => -k[0],
                    (2, 0) => -k[1],
                    (2, 1) => k[0],
                    _ => 0.0,
                };
                let expect = c * delta + s * cross + (1.0 - c) * k[i] * k[j];
                assert!((m[i][j] - expect).abs() < 1e-12);
            }
        }
    }
}
