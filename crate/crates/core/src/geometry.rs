//! Projective camera math: world/frustum transforms and viewing rays.
//!
//! A camera is a single fused 4x4 transform `K` taking homogeneous world
//! points `(x, y, z, 1)` to `(u*d, v*d, d, 1)`, where `(u, v)` is the pixel
//! position and `d` the depth along the optical axis.

use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Depth magnitudes below this are treated as lying on the camera plane.
pub const DEPTH_EPS: f64 = 1e-12;
/// Minimum |det| for a transform to count as invertible.
pub const DET_EPS: f64 = 1e-12;
/// Minimum distance between a point and the optical center for a ray.
pub const RAY_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Vec3<T> {
    pub x: T,
    pub y: T,
    pub z: T,
}

impl<T: Real> Vec3<T> {
    pub const fn new(x: T, y: T, z: T) -> Self {
        Self { x, y, z }
    }

    pub fn zero() -> Self {
        Self::new(T::zero(), T::zero(), T::zero())
    }

    pub fn dot(self, o: Self) -> T {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Self) -> Self {
        Self::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> T {
        self.dot(self).sqrt()
    }

    pub fn scale(self, s: T) -> Self {
        Self::new(self.x * s, self.y * s, self.z * s)
    }

    pub fn normalized(self) -> Option<Self> {
        let n = self.norm();
        (n > T::zero() && n.is_finite()).then(|| self.scale(T::one() / n))
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn distance(self, o: Self) -> T {
        (self - o).norm()
    }

    pub fn to_array(self) -> [T; 3] {
        [self.x, self.y, self.z]
    }

    pub fn from_array(a: [T; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn cast<U: Real>(self) -> Vec3<U> {
        Vec3::new(U::lit(self.x.as_f64()), U::lit(self.y.as_f64()), U::lit(self.z.as_f64()))
    }
}

impl<T: Real> Add for Vec3<T> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl<T: Real> Sub for Vec3<T> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl<T: Real> Neg for Vec3<T> {
    type Output = Self;
    fn neg(self) -> Self {
        Self::new(-self.x, -self.y, -self.z)
    }
}

impl<T: Real> Mul<T> for Vec3<T> {
    type Output = Self;
    fn mul(self, s: T) -> Self {
        self.scale(s)
    }
}

/// Row-major 4x4 matrix.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Mat4<T> {
    pub m: [T; 16],
}

impl<T: Real> Mat4<T> {
    pub fn from_rows(m: [T; 16]) -> Self {
        Self { m }
    }

    pub fn identity() -> Self {
        Self::diag([T::one(); 4])
    }

    pub fn diag(d: [T; 4]) -> Self {
        let mut m = [T::zero(); 16];
        for (i, v) in d.into_iter().enumerate() {
            m[i * 5] = v;
        }
        Self { m }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> T {
        self.m[r * 4 + c]
    }

    pub fn mul_vec4(&self, v: [T; 4]) -> [T; 4] {
        let mut out = [T::zero(); 4];
        for (r, o) in out.iter_mut().enumerate() {
            let row = &self.m[r * 4..r * 4 + 4];
            *o = row[0] * v[0] + row[1] * v[1] + row[2] * v[2] + row[3] * v[3];
        }
        out
    }

    pub fn mul_mat(&self, o: &Self) -> Self {
        let mut m = [T::zero(); 16];
        for r in 0..4 {
            for c in 0..4 {
                let mut s = T::zero();
                for k in 0..4 {
                    s += self.at(r, k) * o.at(k, c);
                }
                m[r * 4 + c] = s;
            }
        }
        Self { m }
    }

    pub fn determinant(&self) -> T {
        lu(self).map(|(_, _, det)| det).unwrap_or_else(T::zero)
    }

    /// Gauss-Jordan inverse with partial pivoting.
    pub fn inverse(&self) -> Result<Self> {
        let (_, _, det) = lu(self).ok_or(Error::SingularTransform(0.0))?;
        if det.abs().as_f64() <= DET_EPS || !det.is_finite() {
            return Err(Error::SingularTransform(det.abs().as_f64()));
        }
        let mut a = self.m;
        let mut inv = Self::identity().m;
        for col in 0..4 {
            let pivot = (col..4)
                .max_by(|&i, &j| a[i * 4 + col].abs().partial_cmp(&a[j * 4 + col].abs()).unwrap())
                .unwrap();
            if pivot != col {
                for k in 0..4 {
                    a.swap(pivot * 4 + k, col * 4 + k);
                    inv.swap(pivot * 4 + k, col * 4 + k);
                }
            }
            let p = a[col * 4 + col];
            for k in 0..4 {
                a[col * 4 + k] /= p;
                inv[col * 4 + k] /= p;
            }
            for r in 0..4 {
                if r == col {
                    continue;
                }
                let f = a[r * 4 + col];
                if f == T::zero() {
                    continue;
                }
                for k in 0..4 {
                    a[r * 4 + k] = a[r * 4 + k] - f * a[col * 4 + k];
                    inv[r * 4 + k] = inv[r * 4 + k] - f * inv[col * 4 + k];
                }
            }
        }
        Ok(Self { m: inv })
    }

    pub fn is_finite(&self) -> bool {
        self.m.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Mat4<U> {
        Mat4 { m: self.m.map(|v| U::lit(v.as_f64())) }
    }
}

// Determinant via LU with partial pivoting; None on a zero pivot.
fn lu<T: Real>(mat: &Mat4<T>) -> Option<([T; 16], [usize; 4], T)> {
    let mut a = mat.m;
    let mut perm = [0, 1, 2, 3];
    let mut det = T::one();
    for col in 0..4 {
        let pivot = (col..4)
            .max_by(|&i, &j| a[i * 4 + col].abs().partial_cmp(&a[j * 4 + col].abs()).unwrap())
            .unwrap();
        if a[pivot * 4 + col] == T::zero() {
            return None;
        }
        if pivot != col {
            for k in 0..4 {
                a.swap(pivot * 4 + k, col * 4 + k);
            }
            perm.swap(pivot, col);
            det = -det;
        }
        let p = a[col * 4 + col];
        det *= p;
        for r in col + 1..4 {
            let f = a[r * 4 + col] / p;
            for k in col..4 {
                a[r * 4 + k] = a[r * 4 + k] - f * a[col * 4 + k];
            }
        }
    }
    Some((a, perm, det))
}

/// Pixel position plus depth along the optical axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrustumCoord<T> {
    pub u: T,
    pub v: T,
    pub d: T,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray<T> {
    pub origin: Vec3<T>,
    /// Unit length.
    pub direction: Vec3<T>,
}

impl<T: Real> Ray<T> {
    pub fn point_at(&self, t: T) -> Vec3<T> {
        self.origin + self.direction * t
    }

    /// Perpendicular distance from `p` to the infinite line carrying the ray.
    pub fn distance_to_line(&self, p: Vec3<T>) -> T {
        let w = p - self.origin;
        let along = w.dot(self.direction);
        (w - self.direction * along).norm()
    }

    /// Angle in radians between two ray directions.
    pub fn angle_to(&self, other: &Ray<T>) -> T {
        // atan2 form stays accurate for nearly parallel directions.
        let c = self.direction.cross(other.direction).norm();
        let d = self.direction.dot(other.direction);
        c.atan2(d)
    }
}

/// Serialized form of a camera: fused transform and image bounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraRecord {
    pub world_to_frustum: [f64; 16],
    pub width: u32,
    pub height: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CameraModel<T> {
    world_to_frustum: Mat4<T>,
    frustum_to_world: Mat4<T>,
    width: u32,
    height: u32,
}

impl<T: Real> CameraModel<T> {
    pub fn new(world_to_frustum: Mat4<T>, width: u32, height: u32) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::domain("image width and height must be >= 1"));
        }
        if !world_to_frustum.is_finite() {
            return Err(Error::NonFinite("camera transform".into()));
        }
        let frustum_to_world = world_to_frustum.inverse()?;
        Ok(Self { world_to_frustum, frustum_to_world, width, height })
    }

    /// Pinhole camera from intrinsics and a world-to-camera rigid transform.
    /// `rotation` rows are the camera x (right), y (down), z (forward) axes
    /// expressed in world coordinates.
    pub fn from_pose(
        fx: T,
        fy: T,
        cx: T,
        cy: T,
        rotation: [Vec3<T>; 3],
        center: Vec3<T>,
        width: u32,
        height: u32,
    ) -> Result<Self> {
        let (o, l) = (T::zero(), T::one());
        let intrinsics = Mat4::from_rows([fx, o, cx, o, o, fy, cy, o, o, o, l, o, o, o, o, l]);
        let mut ext = [o; 16];
        for (r, axis) in rotation.iter().enumerate() {
            ext[r * 4] = axis.x;
            ext[r * 4 + 1] = axis.y;
            ext[r * 4 + 2] = axis.z;
            ext[r * 4 + 3] = -axis.dot(center);
        }
        ext[15] = l;
        Self::new(intrinsics.mul_mat(&Mat4::from_rows(ext)), width, height)
    }

    /// Same camera in another precision; the inverse is recomputed.
    pub fn cast<U: Real>(&self) -> Result<CameraModel<U>> {
        CameraModel::new(self.world_to_frustum.cast(), self.width, self.height)
    }

    pub fn world_to_frustum(&self) -> &Mat4<T> {
        &self.world_to_frustum
    }

    pub fn frustum_to_world(&self) -> &Mat4<T> {
        &self.frustum_to_world
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    /// World position of the optical center: the frustum origin mapped back.
    pub fn optical_center(&self) -> Vec3<T> {
        let h = self.frustum_to_world.mul_vec4([T::zero(), T::zero(), T::zero(), T::one()]);
        Vec3::new(h[0] / h[3], h[1] / h[3], h[2] / h[3])
    }

    /// Unit optical axis in world coordinates: the direction in which depth
    /// grows (row 2 of the transform, for affine transforms).
    pub fn forward(&self) -> Vec3<T> {
        let k = &self.world_to_frustum;
        Vec3::new(k.at(2, 0), k.at(2, 1), k.at(2, 2))
            .normalized()
            .expect("invertible camera has an axis")
    }

    pub fn project(&self, p: Vec3<T>) -> Result<FrustumCoord<T>> {
        let h = self.world_to_frustum.mul_vec4([p.x, p.y, p.z, T::one()]);
        // Canonicalize the homogeneous scale before reading off depth.
        let w = h[3];
        if w.abs().as_f64() < DEPTH_EPS {
            return Err(Error::DegenerateDepth(0.0));
        }
        let (ud, vd, d) = (h[0] / w, h[1] / w, h[2] / w);
        if d.abs().as_f64() < DEPTH_EPS || !d.is_finite() {
            return Err(Error::DegenerateDepth(d.abs().as_f64()));
        }
        Ok(FrustumCoord { u: ud / d, v: vd / d, d })
    }

    pub fn unproject(&self, fc: FrustumCoord<T>) -> Result<Vec3<T>> {
        if !(fc.d > T::zero()) {
            return Err(Error::domain("unproject requires d > 0"));
        }
        let h = self.frustum_to_world.mul_vec4([fc.u * fc.d, fc.v * fc.d, fc.d, T::one()]);
        Ok(Vec3::new(h[0] / h[3], h[1] / h[3], h[2] / h[3]))
    }

    pub fn in_image(&self, u: T, v: T) -> bool {
        u >= T::zero()
            && v >= T::zero()
            && u < T::lit(self.width as f64)
            && v < T::lit(self.height as f64)
    }

    pub fn visible(&self, p: Vec3<T>) -> bool {
        match self.project(p) {
            Ok(fc) => fc.d > T::zero() && self.in_image(fc.u, fc.v),
            Err(_) => false,
        }
    }

    pub fn ray_through(&self, p: Vec3<T>) -> Result<Ray<T>> {
        let origin = self.optical_center();
        let delta = p - origin;
        if delta.norm().as_f64() <= RAY_EPS {
            return Err(Error::DegenerateRay);
        }
        let direction = delta.normalized().ok_or(Error::DegenerateRay)?;
        Ok(Ray { origin, direction })
    }

    /// Ray through the pixel `(u, v)`.
    pub fn ray_through_pixel(&self, u: T, v: T) -> Result<Ray<T>> {
        let p = self.unproject(FrustumCoord { u, v, d: T::one() })?;
        self.ray_through(p)
    }

    pub fn to_record(&self) -> CameraRecord {
        CameraRecord {
            world_to_frustum: self.world_to_frustum.m.map(|v| v.as_f64()),
            width: self.width,
            height: self.height,
        }
    }

    pub fn from_record(rec: &CameraRecord) -> Result<Self> {
        Self::new(Mat4::from_rows(rec.world_to_frustum.map(T::lit)), rec.width, rec.height)
    }
}
