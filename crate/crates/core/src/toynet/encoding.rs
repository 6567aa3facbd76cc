//! Fixed positional encodings.
//!
//! Feature tokens and queries both use a sinusoidal embedding of a unit
//! direction's azimuth and elevation. Nothing here sees a depth.

use crate::error::Result;
use crate::geometry::{CameraModel, Vec3};
use crate::scalar::Real;

pub const AZIMUTH_HARMONICS: usize = 12;
pub const ELEVATION_HARMONICS: usize = 4;
/// Elevation is stretched before the harmonics so the narrow vertical field
/// of view spans a useful part of a period.
const ELEVATION_STRETCH: f64 = 3.0;
pub const PE_DIM: usize = 2 * (AZIMUTH_HARMONICS + ELEVATION_HARMONICS);

/// Embedding of a direction; `dir` need not be unit length but must be nonzero.
pub fn direction_pe<T: Real>(dir: Vec3<T>) -> Vec<T> {
    let n = dir.norm();
    let az = dir.y.atan2(dir.x);
    let el = (dir.z / n).max(-T::one()).min(T::one()).asin() * T::lit(ELEVATION_STRETCH);
    let mut out = Vec::with_capacity(PE_DIM);
    for k in 1..=AZIMUTH_HARMONICS {
        let (s, c) = (az * T::lit(k as f64)).sin_cos();
        out.push(s);
        out.push(c);
    }
    for k in 1..=ELEVATION_HARMONICS {
        let (s, c) = (el * T::lit(k as f64)).sin_cos();
        out.push(s);
        out.push(c);
    }
    out
}

/// Embedding of the viewing ray through `pixel`.
pub fn ray_direction_pe<T: Real>(camera: &CameraModel<T>, pixel: (f64, f64)) -> Result<Vec<T>> {
    let ray = camera.ray_through_pixel(T::lit(pixel.0), T::lit(pixel.1))?;
    Ok(direction_pe(ray.direction))
}

/// Embedding of the direction from the rig origin toward `p`; points at the
/// origin fall back to the +x direction.
pub fn point_direction_pe<T: Real>(p: Vec3<T>) -> Vec<T> {
    if p.norm() > T::lit(1e-9) {
        direction_pe(p)
    } else {
        direction_pe(Vec3::new(T::one(), T::zero(), T::zero()))
    }
}
