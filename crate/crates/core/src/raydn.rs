//! Ray-query construction: reference points sampled along the camera ray
//! through each ground-truth center, with one positive per ray.
//!
//! For a box with center depth `d` (in a given camera) and size `(w, h, l)`,
//! point `i` sits at depth `d + β_i · k·(w+h+l)/6` on the ray through the
//! projected center, where `β_i` is a shifted Beta offset. The point closest
//! to the true center is the positive; the rest are hard negatives.

use serde::{Deserialize, Serialize};

use crate::beta::{sample_beta_one, BetaParams};
use crate::error::{Error, Result};
use crate::geometry::{CameraModel, FrustumCoord, Vec3};
use crate::rng::SeededRng;
use crate::scalar::Real;

/// Attempts at redrawing an offset that produced a non-positive depth.
pub const MAX_DEPTH_RESAMPLES: usize = 16;
/// Depth used when every redraw was non-positive.
pub const MIN_DEPTH: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthBox<T> {
    pub center: Vec3<T>,
    /// `(w, h, l)` in meters: width (lateral), height (vertical), length (along yaw).
    pub size: [T; 3],
    pub yaw: T,
    pub class_id: u32,
}

impl<T: Real> GroundTruthBox<T> {
    pub fn validate(&self) -> Result<()> {
        if !self.center.is_finite() || !self.yaw.is_finite() {
            return Err(Error::NonFinite("box center/yaw".into()));
        }
        if self.size.iter().any(|s| !(*s > T::zero()) || !s.is_finite()) {
            return Err(Error::domain(format!("box sizes must be positive, got {:?}", self.size)));
        }
        Ok(())
    }

    /// The eight corners in world coordinates.
    pub fn corners(&self) -> [Vec3<T>; 8] {
        let half = T::lit(0.5);
        let [w, h, l] = self.size;
        let (s, c) = self.yaw.sin_cos();
        let mut out = [Vec3::zero(); 8];
        let mut i = 0;
        for sx in [-half, half] {
            for sy in [-half, half] {
                for sz in [-half, half] {
                    let (lx, ly) = (sx * l, sy * w);
                    out[i] = self.center + Vec3::new(c * lx - s * ly, s * lx + c * ly, sz * h);
                    i += 1;
                }
            }
        }
        out
    }

    pub fn cast<U: Real>(&self) -> GroundTruthBox<U> {
        GroundTruthBox {
            center: self.center.cast(),
            size: self.size.map(|v| U::lit(v.as_f64())),
            yaw: U::lit(self.yaw.as_f64()),
            class_id: self.class_id,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RaySpec {
    pub params: BetaParams,
    /// Radius multiplier `k` on the average half-extent.
    pub radius_k: f64,
    /// Total points per ray (positive included).
    pub n_per_ray: usize,
}

impl Default for RaySpec {
    fn default() -> Self {
        Self { params: BetaParams::default(), radius_k: 3.0, n_per_ray: 5 }
    }
}

impl RaySpec {
    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        if !(self.radius_k > 0.0) || !self.radius_k.is_finite() {
            return Err(Error::domain(format!("radius_k must be positive, got {}", self.radius_k)));
        }
        if self.n_per_ray < 2 {
            return Err(Error::domain("n_per_ray must be >= 2"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryLabel {
    Positive,
    Negative,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RayQueryGroup<T> {
    pub gt_index: usize,
    pub camera_index: usize,
    pub ref_points: Vec<Vec3<T>>,
    pub depths: Vec<T>,
    pub labels: Vec<QueryLabel>,
    pub target: GroundTruthBox<T>,
}

impl<T: Real> RayQueryGroup<T> {
    pub fn len(&self) -> usize {
        self.ref_points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ref_points.is_empty()
    }

    pub fn positive_index(&self) -> usize {
        self.labels.iter().position(|l| *l == QueryLabel::Positive).expect("group has a positive")
    }
}

/// Average-scale radius `k·(w+h+l)/6`.
pub fn scale_extent<T: Real>(b: &GroundTruthBox<T>, k: T) -> Result<T> {
    if !(k > T::zero()) {
        return Err(Error::domain(format!("radius k must be positive, got {k}")));
    }
    if b.size.iter().any(|s| !(*s > T::zero())) {
        return Err(Error::domain(format!("box sizes must be positive, got {:?}", b.size)));
    }
    Ok(k * (b.size[0] + b.size[1] + b.size[2]) / T::lit(6.0))
}

/// Depths `d + y_i·extent` with `y_i` shifted Beta offsets.
pub fn sample_depths<T: Real>(
    rng: &mut SeededRng,
    d: T,
    extent: T,
    params: &BetaParams,
    n: usize,
) -> Result<Vec<T>> {
    params.validate()?;
    if !(d > T::zero()) || !d.is_finite() {
        return Err(Error::domain(format!("center depth must be positive, got {d}")));
    }
    if !(extent > T::zero()) || !extent.is_finite() {
        return Err(Error::domain(format!("extent must be positive, got {extent}")));
    }
    if n == 0 {
        return Err(Error::domain("sample count must be >= 1"));
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut depth = None;
        for _ in 0..=MAX_DEPTH_RESAMPLES {
            let y = T::lit(2.0 * sample_beta_one(rng, params) - 1.0);
            let cand = d + y * extent;
            if cand > T::zero() {
                depth = Some(cand);
                break;
            }
        }
        out.push(depth.unwrap_or_else(|| T::lit(MIN_DEPTH)));
    }
    Ok(out)
}

/// Assemble a group from already-sampled depths along the ray through the
/// box center.
pub fn group_from_depths<T: Real>(
    camera: &CameraModel<T>,
    camera_index: usize,
    gt_index: usize,
    b: &GroundTruthBox<T>,
    depths: Vec<T>,
) -> Result<RayQueryGroup<T>> {
    if !camera.visible(b.center) {
        return Err(Error::NotVisible);
    }
    if depths.is_empty() {
        return Err(Error::domain("a ray group needs at least one depth"));
    }
    let fc = camera.project(b.center)?;
    let ref_points = depths
        .iter()
        .map(|&d| camera.unproject(FrustumCoord { u: fc.u, v: fc.v, d }))
        .collect::<Result<Vec<_>>>()?;
    let mut best = 0;
    let mut best_dist = ref_points[0].distance(b.center);
    for (i, p) in ref_points.iter().enumerate().skip(1) {
        let dist = p.distance(b.center);
        if dist < best_dist {
            best = i;
            best_dist = dist;
        }
    }
    let labels = (0..ref_points.len())
        .map(|i| if i == best { QueryLabel::Positive } else { QueryLabel::Negative })
        .collect();
    Ok(RayQueryGroup { gt_index, camera_index, ref_points, depths, labels, target: *b })
}

pub fn build_ray_group<T: Real>(
    camera: &CameraModel<T>,
    camera_index: usize,
    gt_index: usize,
    b: &GroundTruthBox<T>,
    spec: &RaySpec,
    rng: &mut SeededRng,
) -> Result<RayQueryGroup<T>> {
    spec.validate()?;
    b.validate()?;
    if !camera.visible(b.center) {
        return Err(Error::NotVisible);
    }
    let d = camera.project(b.center)?.d;
    let extent = scale_extent(b, T::lit(spec.radius_k))?;
    let depths = sample_depths(rng, d, extent, &spec.params, spec.n_per_ray)?;
    group_from_depths(camera, camera_index, gt_index, b, depths)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildDiagnostics {
    /// Boxes whose center was visible in no camera.
    pub skipped_boxes: usize,
}

/// One group per visible `(box, camera)` pair, boxes in order, cameras in
/// order within a box. Each pair draws from its own stream keyed on the
/// pair, so the result does not depend on construction order.
pub fn build_all<T: Real>(
    cameras: &[CameraModel<T>],
    boxes: &[GroundTruthBox<T>],
    spec: &RaySpec,
    rng: &mut SeededRng,
) -> Result<(Vec<RayQueryGroup<T>>, BuildDiagnostics)> {
    spec.validate()?;
    let base = rng.next_u64();
    let mut groups = Vec::new();
    let mut diag = BuildDiagnostics::default();
    for (bi, b) in boxes.iter().enumerate() {
        let mut seen = false;
        for (ci, cam) in cameras.iter().enumerate() {
            if !cam.visible(b.center) {
                continue;
            }
            seen = true;
            let mut pair_rng = SeededRng::with_stream(base, ((bi as u64) << 32) | ci as u64);
            groups.push(build_ray_group(cam, ci, bi, b, spec, &mut pair_rng)?);
        }
        if !seen {
            diag.skipped_boxes += 1;
        }
    }
    Ok((groups, diag))
}
