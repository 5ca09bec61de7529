//! Closed-form plane and point math shared by every other module.

use nalgebra::{Matrix3, Vector3, Vector4};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;

/// Components with magnitude at or below this are skipped when choosing the
/// canonical sign of a normal.
const CANONICAL_EPS: f64 = 1e-9;
/// Below this, a homogeneous 4-vector has no finite plane.
pub const DEGENERATE_NORMAL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("degenerate plane: normal part has norm {0:e}")]
    Degenerate(f64),
    #[error("matrix is not a proper rotation")]
    NotARotation,
}

/// Plane `{p : n·p = d}` with unit normal `n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plane {
    n: Vec3,
    d: f64,
}

impl Plane {
    /// Build from any non-zero normal; `(n, d)` is rescaled so `|n| = 1`.
    pub fn new(n: Vec3, d: f64) -> Result<Self, GeometryError> {
        let len = n.norm();
        if !(len > DEGENERATE_NORMAL) {
            return Err(GeometryError::Degenerate(len));
        }
        Ok(Plane { n: n / len, d: d / len })
    }

    /// Plane through `point` with normal direction `n`.
    pub fn through(point: &Vec3, n: Vec3) -> Result<Self, GeometryError> {
        let p = Self::new(n, 0.0)?;
        Ok(Plane {
            n: p.n,
            d: p.n.dot(point),
        })
    }

    pub fn normal(&self) -> Vec3 {
        self.n
    }

    pub fn offset(&self) -> f64 {
        self.d
    }

    pub fn flipped(&self) -> Self {
        Plane {
            n: -self.n,
            d: -self.d,
        }
    }

    /// Representative whose first normal component with `|·| > 1e-9` is
    /// positive; `(n, d)` and `(−n, −d)` map to the same value.
    pub fn canonical(&self) -> Self {
        match self.n.iter().find(|c| c.abs() > CANONICAL_EPS) {
            Some(c) if *c < 0.0 => self.flipped(),
            _ => *self,
        }
    }

    /// `(n, d) / ‖(n, d)‖`, the unit 4-vector compared by the ground-truth error.
    pub fn unit4(&self) -> Vector4<f64> {
        let v = Vector4::new(self.n.x, self.n.y, self.n.z, self.d);
        v / v.norm()
    }
}

pub fn reflect_point(p: &Vec3, s: &Plane) -> Vec3 {
    p - 2.0 * s.n * (p.dot(&s.n) - s.d)
}

pub fn signed_distance(p: &Vec3, s: &Plane) -> f64 {
    p.dot(&s.n) - s.d
}

/// Displacement carrying `p` onto `s` along the normal.
pub fn offset_target(p: &Vec3, s: &Plane) -> Vec3 {
    -(p.dot(&s.n) - s.d) * s.n
}

/// Plane from a unit homogeneous vector `β = (a, b, c, d′)` satisfying
/// `a·x + b·y + c·z + d′ = 0`, returned in canonical form.
pub fn plane_from_homogeneous(beta: &[f64; 4]) -> Result<Plane, GeometryError> {
    let n = Vec3::new(beta[0], beta[1], beta[2]);
    let len = n.norm();
    if !(len >= DEGENERATE_NORMAL) {
        return Err(GeometryError::Degenerate(len));
    }
    Ok(Plane {
        n: n / len,
        d: -beta[3] / len,
    }
    .canonical())
}

/// Proper rotation matrix (orthonormal, determinant +1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Matrix3::identity())
    }

    /// Accepts matrices orthonormal to 1e-9 with determinant +1.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self, GeometryError> {
        let err = (m.transpose() * m - Matrix3::identity()).abs().max();
        if err > 1e-9 || (m.determinant() - 1.0).abs() > 1e-9 {
            return Err(GeometryError::NotARotation);
        }
        Ok(Rotation(m))
    }

    /// Rotation by `angle` radians about `axis` (right-handed).
    pub fn about_axis(axis: &Vec3, angle: f64) -> Self {
        let axis = nalgebra::Unit::new_normalize(*axis);
        Rotation(*nalgebra::Rotation3::from_axis_angle(&axis, angle).matrix())
    }

    /// Rotation from a (not necessarily unit) quaternion `w + xi + yj + zk`.
    pub fn from_quaternion(w: f64, x: f64, y: f64, z: f64) -> Self {
        let q = nalgebra::UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(w, x, y, z));
        Rotation(*q.to_rotation_matrix().matrix())
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.0 * p
    }

    pub fn inverse(&self) -> Self {
        Rotation(self.0.transpose())
    }

    pub fn compose(&self, first: &Rotation) -> Self {
        Rotation(self.0 * first.0)
    }

    /// Rotation angle in radians, in `[0, π]`.
    pub fn angle(&self) -> f64 {
        ((self.0.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    }
}

/// Image of `s` under the similarity `p ↦ r·(scale·p) + t`.
pub fn transform_plane(s: &Plane, r: &Rotation, t: &Vec3, scale: f64) -> Plane {
    let n = r.apply(&s.n);
    Plane {
        n,
        d: scale * s.d + n.dot(t),
    }
}

/// Translation and isotropic scale that map an input cloud into the unit box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormRecord {
    pub center: Vec3,
    pub scale: f64,
}

impl Default for NormRecord {
    fn default() -> Self {
        NormRecord {
            center: Vec3::zeros(),
            scale: 1.0,
        }
    }
}

impl NormRecord {
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        (p - self.center) / self.scale
    }

    pub fn invert(&self, q: &Vec3) -> Vec3 {
        q * self.scale + self.center
    }

    /// Plane in input coordinates → plane in normalized coordinates.
    pub fn apply_plane(&self, s: &Plane) -> Plane {
        transform_plane(
            s,
            &Rotation::identity(),
            &(-self.center / self.scale),
            1.0 / self.scale,
        )
    }

    /// Plane in normalized coordinates → plane in input coordinates.
    pub fn invert_plane(&self, s: &Plane) -> Plane {
        transform_plane(s, &Rotation::identity(), &self.center, self.scale)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloudKind {
    Full,
    Partial,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cloud {
    pub points: Vec<Vec3>,
    pub kind: CloudKind,
    /// How `points` relate to the frame the cloud was loaded or generated in.
    pub norm: NormRecord,
}

impl Cloud {
    pub fn new(points: Vec<Vec3>) -> Self {
        Cloud {
            points,
            kind: CloudKind::Full,
            norm: NormRecord::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Rotate every point about the origin.
    pub fn rotated(&self, r: &Rotation) -> Cloud {
        Cloud {
            points: self.points.iter().map(|p| r.apply(p)).collect(),
            kind: self.kind,
            norm: NormRecord::default(),
        }
    }
}

/// Polygon where `s` cuts the cube `[-half, half]³`, vertices in winding
/// order. Empty when the plane misses the cube.
pub fn plane_box_polygon(s: &Plane, half: f64) -> Vec<Vec3> {
    let n = s.normal();
    let mut pts: Vec<Vec3> = Vec::new();
    for axis in 0..3 {
        let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
        for su in [-half, half] {
            for sv in [-half, half] {
                let mut a = Vec3::zeros();
                a[u] = su;
                a[v] = sv;
                if n[axis].abs() < 1e-15 {
                    continue;
                }
                let t = (s.offset() - n.dot(&a)) / n[axis];
                if t.abs() <= half {
                    a[axis] = t;
                    if !pts.iter().any(|q| (q - a).norm() < 1e-12) {
                        pts.push(a);
                    }
                }
            }
        }
    }
    if pts.len() < 3 {
        return Vec::new();
    }
    let c = pts.iter().sum::<Vec3>() / pts.len() as f64;
    let e1 = (pts[0] - c).normalize();
    let e2 = n.cross(&e1);
    pts.sort_by(|a, b| {
        let ta = (a - c).dot(&e2).atan2((a - c).dot(&e1));
        let tb = (b - c).dot(&e2).atan2((b - c).dot(&e1));
        ta.total_cmp(&tb)
    });
    pts
}
