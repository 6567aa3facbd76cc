//! Synthetic surround-view scenes with depth-ambiguous feature tokens.
//!
//! Token content carries only what a camera sees of a box: its class and
//! its projected 2D footprint. Position embeddings encode only the viewing
//! direction. Two boxes on the same ray whose sizes scale with depth render
//! identically, which is exactly the ambiguity that produces colinear
//! duplicate detections.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraModel, CameraRecord};
use crate::raydn::GroundTruthBox;
use crate::rng::SeededRng;
use crate::scalar::Real;
use crate::toynet::encoding::ray_direction_pe;
use crate::{Box3, Camera, Vec3f};

pub const SCENE_SCHEMA: &str = "raydn-scene/1";
/// Minimum center-to-center distance between boxes in a scene.
pub const MIN_SEPARATION: f64 = 2.0;
/// Rejection attempts per box before giving up.
pub const MAX_PLACEMENT_TRIES: usize = 1000;
pub const SIZE_RANGE: (f64, f64) = (1.0, 6.0);

/// Axis-aligned region `(x_min, x_max, y_min, y_max, z_min, z_max)` in meters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerceptionRange {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub z_min: f64,
    pub z_max: f64,
}

impl Default for PerceptionRange {
    fn default() -> Self {
        Self { x_min: -20.0, x_max: 20.0, y_min: -20.0, y_max: 20.0, z_min: -1.0, z_max: 1.0 }
    }
}

impl PerceptionRange {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.x_min, self.x_max, self.y_min, self.y_max, self.z_min, self.z_max]
            .iter()
            .all(|v| v.is_finite())
            && self.x_max > self.x_min
            && self.y_max > self.y_min
            && self.z_max > self.z_min;
        if ok {
            Ok(())
        } else {
            Err(Error::domain(format!("degenerate perception range {self:?}")))
        }
    }

    pub fn min(&self) -> Vec3f {
        Vec3f::new(self.x_min, self.y_min, self.z_min)
    }

    pub fn max(&self) -> Vec3f {
        Vec3f::new(self.x_max, self.y_max, self.z_max)
    }

    pub fn extent(&self) -> Vec3f {
        self.max() - self.min()
    }

    pub fn contains(&self, p: Vec3f) -> bool {
        (self.x_min..=self.x_max).contains(&p.x)
            && (self.y_min..=self.y_max).contains(&p.y)
            && (self.z_min..=self.z_max).contains(&p.z)
    }

    /// Map to `[0, 1]^3`; the flag reports whether clamping was needed.
    pub fn normalize(&self, p: Vec3f) -> ([f64; 3], bool) {
        let (lo, ext) = (self.min().to_array(), self.extent().to_array());
        let mut clamped = false;
        let mut out = [0.0; 3];
        for i in 0..3 {
            let v = (p.to_array()[i] - lo[i]) / ext[i];
            if !(0.0..=1.0).contains(&v) {
                clamped = true;
            }
            out[i] = v.clamp(0.0, 1.0);
        }
        (out, clamped)
    }

    pub fn denormalize(&self, n: [f64; 3]) -> Vec3f {
        let (lo, ext) = (self.min().to_array(), self.extent().to_array());
        Vec3f::new(lo[0] + n[0] * ext[0], lo[1] + n[1] * ext[1], lo[2] + n[2] * ext[2])
    }
}

/// Shared intrinsics of the synthetic rig.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RigSpec {
    pub n_cameras: usize,
    /// Distance of each optical center from the rig origin, meters.
    pub radius: f64,
    pub image_width: u32,
    pub image_height: u32,
    pub hfov_deg: f64,
}

impl Default for RigSpec {
    fn default() -> Self {
        Self { n_cameras: 6, radius: 0.5, image_width: 320, image_height: 240, hfov_deg: 90.0 }
    }
}

impl RigSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_cameras == 0 {
            return Err(Error::domain("a rig needs at least one camera"));
        }
        if !(self.hfov_deg > 0.0 && self.hfov_deg < 180.0) {
            return Err(Error::domain("hfov must be in (0, 180) degrees"));
        }
        if self.image_width == 0 || self.image_height == 0 || !(self.radius >= 0.0) {
            return Err(Error::domain("image size must be positive and radius non-negative"));
        }
        Ok(())
    }
}

/// Cameras at equal azimuth spacing on a horizontal circle, facing outward.
pub fn make_rig(spec: &RigSpec) -> Result<Vec<Camera>> {
    spec.validate()?;
    let (w, h) = (spec.image_width as f64, spec.image_height as f64);
    let f = 0.5 * w / (0.5 * spec.hfov_deg.to_radians()).tan();
    (0..spec.n_cameras)
        .map(|i| {
            let az = 2.0 * PI * i as f64 / spec.n_cameras as f64;
            let (s, c) = az.sin_cos();
            let forward = Vec3f::new(c, s, 0.0);
            let right = Vec3f::new(s, -c, 0.0);
            let down = Vec3f::new(0.0, 0.0, -1.0);
            let center = forward * spec.radius;
            CameraModel::from_pose(
                f,
                f,
                0.5 * w,
                0.5 * h,
                [right, down, forward],
                center,
                spec.image_width,
                spec.image_height,
            )
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub scene_id: String,
    pub rig: Vec<Camera>,
    pub boxes: Vec<Box3>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFile {
    pub schema: String,
    pub scene_id: String,
    pub rig: Vec<CameraRecord>,
    pub boxes: Vec<Box3>,
}

impl Scene {
    pub fn to_file(&self) -> SceneFile {
        SceneFile {
            schema: SCENE_SCHEMA.to_string(),
            scene_id: self.scene_id.clone(),
            rig: self.rig.iter().map(|c| c.to_record()).collect(),
            boxes: self.boxes.clone(),
        }
    }

    pub fn from_file(f: &SceneFile) -> Result<Self> {
        if f.schema != SCENE_SCHEMA {
            return Err(Error::Compat(format!("scene schema {:?}, expected {SCENE_SCHEMA:?}", f.schema)));
        }
        if f.rig.is_empty() {
            return Err(Error::Format("scene rig is empty".into()));
        }
        for b in &f.boxes {
            b.validate()?;
        }
        Ok(Self {
            scene_id: f.scene_id.clone(),
            rig: f.rig.iter().map(CameraModel::from_record).collect::<Result<_>>()?,
            boxes: f.boxes.clone(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("scene serializes") + "\n"
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: SceneFile = serde_json::from_str(s).map_err(|e| Error::Format(e.to_string()))?;
        Self::from_file(&f)
    }
}

/// How box sizes relate to class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeModel {
    /// Every axis log-uniform over the full size range, whatever the class.
    Independent,
    /// Class `c` of `C` draws each axis log-uniform over the `c`-th of `C`
    /// equal log-width bands of the size range. With uniform classes the
    /// per-axis marginal is still log-uniform over the full range.
    ClassBands,
}

impl SizeModel {
    pub fn band(self, class_id: u32, class_count: u32) -> (f64, f64) {
        let (lo, hi) = SIZE_RANGE;
        match self {
            SizeModel::Independent => (lo, hi),
            SizeModel::ClassBands => {
                let step = (hi / lo).ln() / class_count as f64;
                let c = class_id as f64;
                ((lo.ln() + step * c).exp(), (lo.ln() + step * (c + 1.0)).exp())
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub range: PerceptionRange,
    pub class_count: u32,
    pub max_boxes: usize,
    /// Boxes whose center lies closer than this to the rig axis are rejected.
    pub min_center_distance: f64,
    /// Fraction of scenes that receive a depth-compensated colinear pair.
    pub colinear_fraction: f64,
    pub size_model: SizeModel,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            range: PerceptionRange::default(),
            class_count: 3,
            max_boxes: 8,
            min_center_distance: 4.0,
            colinear_fraction: 0.5,
            size_model: SizeModel::ClassBands,
        }
    }
}

fn separated(c: Vec3f, boxes: &[Box3]) -> bool {
    boxes.iter().all(|b| b.center.distance(c) >= MIN_SEPARATION)
}

fn log_uniform(rng: &mut SeededRng, lo: f64, hi: f64) -> f64 {
    (lo.ln() + (hi.ln() - lo.ln()) * rng.uniform()).exp()
}

fn random_yaw(rng: &mut SeededRng) -> f64 {
    // (-π, π]
    PI - 2.0 * PI * rng.uniform()
}

fn random_center(rng: &mut SeededRng, range: &PerceptionRange) -> Vec3f {
    Vec3f::new(
        rng.uniform_range(range.x_min, range.x_max),
        rng.uniform_range(range.y_min, range.y_max),
        rng.uniform_range(range.z_min, range.z_max),
    )
}

/// Append `n_boxes` boxes to `boxes`: centers uniform in `spec.range`,
/// per-axis sizes log-uniform (see [`SizeModel`]), uniform yaw, and at
/// least 2 m between any two centers.
pub fn sample_boxes_into(rng: &mut SeededRng, n_boxes: usize, spec: &SceneSpec, boxes: &mut Vec<Box3>) -> Result<()> {
    spec.range.validate()?;
    if spec.class_count == 0 {
        return Err(Error::domain("class_count must be >= 1"));
    }
    for _ in 0..n_boxes {
        let mut placed = None;
        for _ in 0..MAX_PLACEMENT_TRIES {
            let c = random_center(rng, &spec.range);
            if c.x.hypot(c.y) >= spec.min_center_distance && separated(c, boxes) {
                placed = Some(c);
                break;
            }
        }
        let center = placed.ok_or_else(|| {
            Error::Capacity(format!("could not place box {} after {MAX_PLACEMENT_TRIES} tries", boxes.len()))
        })?;
        let class_id = rng.below(spec.class_count as u64) as u32;
        let (lo, hi) = spec.size_model.band(class_id, spec.class_count);
        let size = [(); 3].map(|_| log_uniform(rng, lo, hi));
        let yaw = random_yaw(rng);
        boxes.push(GroundTruthBox { center, size, yaw, class_id });
    }
    Ok(())
}

/// Scene with `n_boxes` boxes whose sizes ignore class.
pub fn sample_scene(
    rng: &mut SeededRng,
    scene_id: impl Into<String>,
    rig: Vec<Camera>,
    n_boxes: usize,
    range: &PerceptionRange,
    class_count: u32,
) -> Result<Scene> {
    if rig.is_empty() {
        return Err(Error::domain("a scene needs at least one camera"));
    }
    let spec = SceneSpec { range: *range, class_count, size_model: SizeModel::Independent, ..SceneSpec::default() };
    let mut boxes = Vec::with_capacity(n_boxes);
    sample_boxes_into(rng, n_boxes, &spec, &mut boxes)?;
    Ok(Scene { scene_id: scene_id.into(), rig, boxes })
}

/// Second box on the ray from `camera` through `base.center`, `factor`
/// times farther from the optical center and `factor` times larger, so both
/// project to the same footprint in that camera.
pub fn colinear_partner(camera: &Camera, base: &Box3, factor: f64) -> Box3 {
    let o = camera.optical_center();
    GroundTruthBox {
        center: o + (base.center - o) * factor,
        size: base.size.map(|s| s * factor),
        yaw: base.yaw,
        class_id: base.class_id,
    }
}

/// Try to add a compensated colinear pair to `boxes`; both sizes stay in
/// the size range. Returns true on success.
pub fn insert_colinear_pair(rng: &mut SeededRng, rig: &[Camera], boxes: &mut Vec<Box3>, spec: &SceneSpec) -> bool {
    let range = &spec.range;
    for _ in 0..MAX_PLACEMENT_TRIES {
        let class_id = rng.below(spec.class_count.max(1) as u64) as u32;
        let (lo, hi) = spec.size_model.band(class_id, spec.class_count.max(1));
        let factor = rng.uniform_range(1.4, 2.2_f64.min(SIZE_RANGE.1 / lo));
        let c = random_center(rng, range) * (1.0 / factor);
        let base = GroundTruthBox {
            center: c,
            size: [(); 3].map(|_| log_uniform(rng, lo, hi.min(SIZE_RANGE.1 / factor))),
            yaw: random_yaw(rng),
            class_id,
        };
        let Some(ci) = rig.iter().position(|cam| cam.visible(base.center)) else { continue };
        let far = colinear_partner(&rig[ci], &base, factor);
        let ok = c.x.hypot(c.y) >= spec.min_center_distance
            && range.contains(base.center)
            && range.contains(far.center)
            && far.center.distance(base.center) >= MIN_SEPARATION
            && separated(base.center, boxes)
            && separated(far.center, boxes)
            && rig[ci].visible(far.center);
        if ok {
            boxes.push(base);
            boxes.push(far);
            return true;
        }
    }
    false
}

/// Scene for the synthetic benchmark: 1 to `max_boxes` boxes, optionally
/// seeded with one depth-compensated colinear pair.
pub fn sample_benchmark_scene(
    rng: &mut SeededRng,
    scene_id: impl Into<String>,
    rig: &[Camera],
    spec: &SceneSpec,
    with_pair: bool,
) -> Result<Scene> {
    spec.range.validate()?;
    let n = 1 + rng.below(spec.max_boxes.max(1) as u64) as usize;
    let mut boxes = Vec::with_capacity(n);
    if with_pair && n >= 2 {
        insert_colinear_pair(rng, rig, &mut boxes, spec);
    }
    sample_boxes_into(rng, n - boxes.len(), spec, &mut boxes)?;
    Ok(Scene { scene_id: scene_id.into(), rig: rig.to_vec(), boxes })
}

/// True when the scene holds two boxes sharing a camera ray (within
/// `angle_eps`) with matching projected footprints.
pub fn has_colinear_pair(scene: &Scene, angle_eps: f64) -> bool {
    for cam in &scene.rig {
        for (i, a) in scene.boxes.iter().enumerate() {
            for b in &scene.boxes[i + 1..] {
                if !(cam.visible(a.center) && cam.visible(b.center)) || a.class_id != b.class_id {
                    continue;
                }
                let (Ok(ra), Ok(rb)) = (cam.ray_through(a.center), cam.ray_through(b.center)) else { continue };
                if ra.angle_to(&rb) < angle_eps {
                    return true;
                }
            }
        }
    }
    false
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureToken {
    pub camera_index: usize,
    pub pixel: (f64, f64),
    pub content: Vec<f64>,
    pub position: Vec<f64>,
}

/// Layout of a token's content vector:
/// `[background, class one-hot.., footprint w, footprint h, du, dv]`.
pub fn content_dim(class_count: u32) -> usize {
    1 + class_count as usize + 4
}

pub fn background_embedding(class_count: u32) -> Vec<f64> {
    let mut v = vec![0.0; content_dim(class_count)];
    v[0] = 1.0;
    v
}

/// Pixel-space footprint of a box in one camera.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Footprint {
    pub u_min: f64,
    pub u_max: f64,
    pub v_min: f64,
    pub v_max: f64,
    /// Projected box center.
    pub u_c: f64,
    pub v_c: f64,
}

/// Bounding rectangle of the projected corners; `None` unless every corner
/// is in front of the camera and the rectangle overlaps the image.
pub fn footprint<T: Real>(cam: &CameraModel<T>, b: &GroundTruthBox<T>) -> Option<Footprint> {
    let mut fp = Footprint {
        u_min: f64::INFINITY,
        u_max: f64::NEG_INFINITY,
        v_min: f64::INFINITY,
        v_max: f64::NEG_INFINITY,
        u_c: 0.0,
        v_c: 0.0,
    };
    for c in b.corners() {
        let fc = cam.project(c).ok()?;
        if !(fc.d > T::zero()) {
            return None;
        }
        let (u, v) = (fc.u.as_f64(), fc.v.as_f64());
        fp.u_min = fp.u_min.min(u);
        fp.u_max = fp.u_max.max(u);
        fp.v_min = fp.v_min.min(v);
        fp.v_max = fp.v_max.max(v);
    }
    let center = cam.project(b.center).ok()?;
    if !(center.d > T::zero()) {
        return None;
    }
    fp.u_c = center.u.as_f64();
    fp.v_c = center.v.as_f64();
    let (w, h) = (cam.width() as f64, cam.height() as f64);
    let overlaps = fp.u_max >= 0.0 && fp.u_min < w && fp.v_max >= 0.0 && fp.v_min < h;
    overlaps.then_some(fp)
}

/// Pixel centers of a `grid_w × grid_h` token grid over the image.
pub fn grid_pixels(width: u32, height: u32, grid_w: usize, grid_h: usize) -> Vec<(f64, f64)> {
    let (w, h) = (width as f64, height as f64);
    let mut out = Vec::with_capacity(grid_w * grid_h);
    for gy in 0..grid_h {
        for gx in 0..grid_w {
            out.push(((gx as f64 + 0.5) * w / grid_w as f64, (gy as f64 + 0.5) * h / grid_h as f64));
        }
    }
    out
}

/// Feature tokens for every camera, concatenated in camera order, each
/// camera's grid in row-major order. A token pools the image cell around its
/// pixel and picks up every box whose footprint overlaps that cell.
pub fn render_features(scene: &Scene, class_count: u32, grid_w: usize, grid_h: usize) -> Result<Vec<FeatureToken>> {
    if grid_w == 0 || grid_h == 0 {
        return Err(Error::domain("token grid dimensions must be >= 1"));
    }
    let dim = content_dim(class_count);
    let mut tokens = Vec::with_capacity(scene.rig.len() * grid_w * grid_h);
    for (ci, cam) in scene.rig.iter().enumerate() {
        let prints: Vec<(u32, Footprint)> = scene
            .boxes
            .iter()
            .filter_map(|b| footprint(cam, b).map(|f| (b.class_id, f)))
            .collect();
        let (w, h) = (cam.width() as f64, cam.height() as f64);
        let (half_w, half_h) = (0.5 * w / grid_w as f64, 0.5 * h / grid_h as f64);
        for (u, v) in grid_pixels(cam.width(), cam.height(), grid_w, grid_h) {
            let mut content = vec![0.0; dim];
            let mut covered = false;
            for (class_id, f) in &prints {
                let overlaps =
                    f.u_max >= u - half_w && f.u_min < u + half_w && f.v_max >= v - half_h && f.v_min < v + half_h;
                if !overlaps {
                    continue;
                }
                covered = true;
                let k = 1 + (*class_id as usize).min(class_count as usize - 1);
                content[k] += 1.0;
                let base = 1 + class_count as usize;
                content[base] += (f.u_max - f.u_min) / w;
                content[base + 1] += (f.v_max - f.v_min) / h;
                content[base + 2] += (f.u_c - u) / w;
                content[base + 3] += (f.v_c - v) / h;
            }
            if !covered {
                content[0] = 1.0;
            }
            let position = ray_direction_pe(cam, (u, v))?;
            tokens.push(FeatureToken { camera_index: ci, pixel: (u, v), content, position });
        }
    }
    Ok(tokens)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Mat4;

    #[test]
    fn rig_spacing() {
        let rig = make_rig(&RigSpec::default()).unwrap();
        assert_eq!(rig.len(), 6);
        for i in 0..6 {
            let a = rig[i].forward();
            let b = rig[(i + 1) % 6].forward();
            assert!((a.dot(b) - 0.5).abs() < 1e-9);
            assert!(rig[i].world_to_frustum().determinant().abs() > 1e-12);
        }
        let one = make_rig(&RigSpec { n_cameras: 1, ..RigSpec::default() }).unwrap();
        assert_eq!(one.len(), 1);
        let f = one[0].forward();
        assert!((f.x - 1.0).abs() < 1e-12);
        assert!((one[0].optical_center().x - 0.5).abs() < 1e-12);
        assert!(make_rig(&RigSpec { n_cameras: 0, ..RigSpec::default() }).is_err());
    }

    #[test]
    fn every_direction_seen_by_some_camera() {
        let rig = make_rig(&RigSpec::default()).unwrap();
        for k in 0..360 {
            let a = (k as f64).to_radians();
            let p = Vec3f::new(10.0 * a.cos(), 10.0 * a.sin(), 0.0);
            assert!(rig.iter().any(|c| c.visible(p)), "azimuth {k}");
        }
    }

    #[test]
    fn scene_sampling() {
        let rig = make_rig(&RigSpec::default()).unwrap();
        let range = PerceptionRange::default();
        let empty = sample_scene(&mut SeededRng::new(1), "s", rig.clone(), 0, &range, 3).unwrap();
        assert!(empty.boxes.is_empty());
        let a = sample_scene(&mut SeededRng::new(2), "s", rig.clone(), 8, &range, 3).unwrap();
        let b = sample_scene(&mut SeededRng::new(2), "s", rig.clone(), 8, &range, 3).unwrap();
        assert_eq!(a, b);
        for (i, x) in a.boxes.iter().enumerate() {
            assert!(range.contains(x.center));
            assert!(x.size.iter().all(|s| (1.0..=6.0).contains(s)));
            assert!(x.yaw > -PI && x.yaw <= PI);
            for y in &a.boxes[i + 1..] {
                assert!(x.center.distance(y.center) >= MIN_SEPARATION);
            }
        }
    }

    #[test]
    fn overfull_scene_is_a_capacity_error() {
        let tiny = PerceptionRange { x_min: 5.0, x_max: 6.0, y_min: 5.0, y_max: 6.0, z_min: 0.0, z_max: 1.0 };
        let rig = make_rig(&RigSpec::default()).unwrap();
        let err = sample_scene(&mut SeededRng::new(3), "s", rig, 5, &tiny, 1).unwrap_err();
        assert!(matches!(err, Error::Capacity(_)));
    }

    #[test]
    fn scene_json_round_trip() {
        let rig = make_rig(&RigSpec::default()).unwrap();
        let s = sample_scene(&mut SeededRng::new(4), "scene-4", rig, 3, &PerceptionRange::default(), 3).unwrap();
        let back = Scene::from_json(&s.to_json()).unwrap();
        assert_eq!(back.boxes, s.boxes);
        assert_eq!(back.rig.len(), 6);
        let bad = s.to_json().replace(SCENE_SCHEMA, "raydn-scene/0");
        assert!(matches!(Scene::from_json(&bad), Err(Error::Compat(_))));
        let unknown = s.to_json().replacen("\"scene_id\"", "\"bogus\": 1, \"scene_id\"", 1);
        assert!(Scene::from_json(&unknown).is_err());
    }

    #[test]
    fn empty_scene_renders_background() {
        let rig = make_rig(&RigSpec::default()).unwrap();
        let s = Scene { scene_id: "e".into(), rig, boxes: vec![] };
        let toks = render_features(&s, 3, 16, 12).unwrap();
        assert_eq!(toks.len(), 6 * 16 * 12);
        let bg = background_embedding(3);
        assert!(toks.iter().all(|t| t.content == bg));
    }

    #[test]
    fn single_camera_box_stays_in_its_grid() {
        let rig = make_rig(&RigSpec::default()).unwrap();
        // Straight ahead of camera 0, far from the seams.
        let b = GroundTruthBox { center: Vec3f::new(15.0, 0.0, 0.0), size: [2.0, 1.5, 4.0], yaw: 0.3, class_id: 1 };
        let s = Scene { scene_id: "one".into(), rig, boxes: vec![b] };
        let toks = render_features(&s, 3, 16, 12).unwrap();
        let bg = background_embedding(3);
        let hit: Vec<_> = toks.iter().filter(|t| t.content != bg).collect();
        assert!(!hit.is_empty());
        assert!(hit.iter().all(|t| t.camera_index == 0));
        assert!(hit.iter().all(|t| t.content[2] == 1.0));
    }

    #[test]
    fn compensated_depth_renders_identically() {
        // Identity-orientation camera at the origin; a doubling of center and
        // size about the optical center is exact in floating point.
        let cam = CameraModel::from_pose(
            100.0,
            100.0,
            80.0,
            60.0,
            [Vec3f::new(0.0, -1.0, 0.0), Vec3f::new(0.0, 0.0, -1.0), Vec3f::new(1.0, 0.0, 0.0)],
            Vec3f::zero(),
            160,
            120,
        )
        .unwrap();
        let near = GroundTruthBox { center: Vec3f::new(5.0, 0.5, 0.25), size: [1.0, 1.5, 2.0], yaw: 0.0, class_id: 0 };
        let far = colinear_partner(&cam, &near, 2.0);
        let render = |b: Box3| {
            let s = Scene { scene_id: "d".into(), rig: vec![cam.clone()], boxes: vec![b] };
            render_features(&s, 2, 16, 12).unwrap()
        };
        let (a, b) = (render(near), render(far));
        for (x, y) in a.iter().zip(&b) {
            let xa: Vec<u64> = x.content.iter().map(|v| v.to_bits()).collect();
            let ya: Vec<u64> = y.content.iter().map(|v| v.to_bits()).collect();
            assert_eq!(xa, ya);
        }
        // 5 m vs 15 m: equal up to rounding.
        let far3 = colinear_partner(&cam, &near, 3.0);
        for (x, y) in a.iter().zip(&render(far3)) {
            for (p, q) in x.content.iter().zip(&y.content) {
                assert!((p - q).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn class_bands_partition_size_range() {
        let b: Vec<_> = (0..3).map(|c| SizeModel::ClassBands.band(c, 3)).collect();
        assert!((b[0].0 - 1.0).abs() < 1e-12 && (b[2].1 - 6.0).abs() < 1e-12);
        assert!((b[0].1 - b[1].0).abs() < 1e-12 && (b[1].1 - b[2].0).abs() < 1e-12);
        assert_eq!(SizeModel::Independent.band(2, 3), SIZE_RANGE);
        let rig = make_rig(&RigSpec::default()).unwrap();
        let spec = SceneSpec::default();
        let mut rng = SeededRng::new(12);
        for i in 0..50 {
            let s = sample_benchmark_scene(&mut rng, format!("{i}"), &rig, &spec, i % 2 == 0).unwrap();
            for x in &s.boxes {
                assert!(spec.range.contains(x.center));
                assert!(x.size.iter().all(|v| (1.0..=6.0 + 1e-9).contains(v)));
            }
        }
    }

    #[test]
    fn colinear_pair_insertion() {
        let rig = make_rig(&RigSpec::default()).unwrap();
        let spec = SceneSpec::default();
        let mut rng = SeededRng::new(8);
        let s = sample_benchmark_scene(&mut rng, "p", &rig, &SceneSpec { max_boxes: 8, ..spec }, true).unwrap();
        if s.boxes.len() >= 2 {
            assert!(has_colinear_pair(&s, 1e-6));
        }
        let mut boxes = vec![];
        assert!(insert_colinear_pair(&mut rng, &rig, &mut boxes, &spec));
        assert_eq!(boxes.len(), 2);
        assert_eq!(boxes[0].class_id, boxes[1].class_id);
    }

    #[test]
    fn position_embeddings_match_pixel_rays() {
        let cam = CameraModel::new(Mat4::diag([20.0, 20.0, 1.0, 1.0]), 40, 30).unwrap();
        let s = Scene { scene_id: "x".into(), rig: vec![cam.clone()], boxes: vec![] };
        for t in render_features(&s, 1, 4, 3).unwrap() {
            assert_eq!(t.position, ray_direction_pe(&cam, t.pixel).unwrap());
        }
    }
}
