//! Transformer decoder over object and ray queries with shared heads.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::encoding::{point_direction_pe, PE_DIM};
use super::tape::{sigmoid, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::geometry::{CameraModel, Mat4, Vec3};
use crate::masking::{build_attention_mask, AttentionMask};
use crate::raydn::{GroundTruthBox, RayQueryGroup};
use crate::rng::SeededRng;
use crate::scalar::Real;
use crate::scenes::{content_dim, render_features, FeatureToken, PerceptionRange, Scene};

/// Width of the encoded box: normalized center, log sizes, yaw sine/cosine.
pub const BOX_DIM: usize = 8;
/// Box head width: log range scale, height refinement, sizes, yaw.
const HEAD_DIM: usize = BOX_DIM - 1;
pub const GEO_DIM: usize = 4;
const LN_EPS: f64 = 1e-5;
/// Prior probability behind the classification bias init.
const PRIOR_PROB: f64 = 0.01;
/// Diagonal added to the position projection and the cross-attention
/// query/key weights at init, so queries start out attending to tokens
/// along their own direction.
const DIAGONAL_GAIN: f64 = 1.5;
/// Clamp applied before the inverse sigmoid of reference points.
const REF_CLAMP: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub embed_dim: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub n_obj_queries: usize,
    pub hidden_dim: usize,
    pub n_classes: u32,
    pub perception_range: PerceptionRange,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            n_heads: 2,
            n_layers: 2,
            n_obj_queries: 24,
            hidden_dim: 64,
            n_classes: 3,
            perception_range: PerceptionRange::default(),
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.n_heads == 0 || self.embed_dim % self.n_heads != 0 {
            return Err(Error::domain(format!(
                "embed_dim {} must be a positive multiple of n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        if self.n_layers == 0 || self.n_obj_queries == 0 || self.hidden_dim == 0 || self.n_classes == 0 {
            return Err(Error::domain("decoder sizes must be >= 1"));
        }
        self.perception_range.validate()
    }

    pub fn content_dim(&self) -> usize {
        content_dim(self.n_classes)
    }

    /// First 8 bytes of SHA-256 over the canonical JSON form.
    pub fn hash(&self) -> u64 {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}

#[derive(Clone, Copy, Debug)]
struct AttnIdx {
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
}

#[derive(Clone, Copy, Debug)]
struct LayerIdx {
    sa: AttnIdx,
    ln1: (usize, usize),
    ca: AttnIdx,
    ln2: (usize, usize),
    ff_w1: usize,
    ff_b1: usize,
    ff_w2: usize,
    ff_b2: usize,
    ln3: (usize, usize),
}

#[derive(Clone, Debug)]
struct Layout {
    content_w: usize,
    content_b: usize,
    pe_w: usize,
    pe_b: usize,
    q_w1: usize,
    q_b1: usize,
    q_w2: usize,
    q_b2: usize,
    obj_ref: usize,
    layers: Vec<LayerIdx>,
    cls_w: usize,
    cls_b: usize,
    box_w1: usize,
    box_b1: usize,
    box_w2: usize,
    box_b2: usize,
    geo_wq: usize,
    geo_bq: usize,
    geo_wk: usize,
    geo_bk: usize,
}

struct Builder<'a, T> {
    rng: &'a mut SeededRng,
    params: Vec<Tensor<T>>,
    names: Vec<String>,
}

impl<T: Real> Builder<'_, T> {
    fn push(&mut self, name: String, t: Tensor<T>) -> usize {
        self.params.push(t);
        self.names.push(name);
        self.params.len() - 1
    }

    fn xavier(&mut self, name: String, fan_in: usize, fan_out: usize) -> usize {
        let lim = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| T::lit(self.rng.uniform_range(-lim, lim))).collect();
        self.push(name, Tensor::from_vec(fan_in, fan_out, data))
    }

    /// Add `gain` along the leading diagonal of a weight matrix.
    fn add_diagonal(&mut self, idx: usize, gain: f64) {
        let p = &mut self.params[idx];
        for i in 0..p.rows.min(p.cols) {
            let v = p.at(i, i) + T::lit(gain);
            p.set(i, i, v);
        }
    }

    fn bias(&mut self, name: String, n: usize, v: f64) -> usize {
        self.push(name, Tensor::full(1, n, T::lit(v)))
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> (usize, usize) {
        let w = self.xavier(format!("{name}.w"), fan_in, fan_out);
        let b = self.bias(format!("{name}.b"), fan_out, 0.0);
        (w, b)
    }

    fn norm(&mut self, name: &str, n: usize) -> (usize, usize) {
        (self.bias(format!("{name}.gamma"), n, 1.0), self.bias(format!("{name}.beta"), n, 0.0))
    }

    fn attn(&mut self, name: &str, e: usize) -> AttnIdx {
        let (wq, bq) = self.linear(&format!("{name}.q"), e, e);
        let (wk, bk) = self.linear(&format!("{name}.k"), e, e);
        let (wv, bv) = self.linear(&format!("{name}.v"), e, e);
        let (wo, bo) = self.linear(&format!("{name}.o"), e, e);
        AttnIdx { wq, bq, wk, bk, wv, bv, wo, bo }
    }
}

/// A scene prepared for the network: rendered tokens plus ground truth.
#[derive(Clone, Debug)]
pub struct SceneInputs<T> {
    pub scene_id: String,
    /// `n_tokens × content_dim`.
    pub content: Tensor<T>,
    /// `n_tokens × PE_DIM`.
    pub position: Tensor<T>,
    /// `n_tokens × GEO_DIM`: camera origin xy and the unit xy direction of
    /// the ray toward the footprint center the token sees (its own pixel
    /// ray for background tokens).
    pub geometry: Tensor<T>,
    pub rig: Vec<CameraModel<T>>,
    pub boxes: Vec<GroundTruthBox<T>>,
}

impl<T: Real> SceneInputs<T> {
    pub fn from_scene(scene: &Scene, n_classes: u32, grid_w: usize, grid_h: usize) -> Result<Self> {
        let tokens = render_features(scene, n_classes, grid_w, grid_h)?;
        let cd = content_dim(n_classes);
        let mut content = Tensor::zeros(tokens.len(), cd);
        let mut position = Tensor::zeros(tokens.len(), PE_DIM);
        let mut geometry = Tensor::zeros(tokens.len(), GEO_DIM);
        for (i, t) in tokens.iter().enumerate() {
            let g = token_geometry(&scene.rig[t.camera_index], t, n_classes)?;
            geometry.row_mut(i).copy_from_slice(&g.map(T::lit));
            for (dst, &v) in content.row_mut(i).iter_mut().zip(&t.content) {
                *dst = T::lit(v);
            }
            for (dst, &v) in position.row_mut(i).iter_mut().zip(&t.position) {
                *dst = T::lit(v);
            }
        }
        Ok(Self {
            scene_id: scene.scene_id.clone(),
            content,
            position,
            geometry,
            rig: scene.rig.iter().map(|c| c.cast()).collect::<Result<_>>()?,
            boxes: scene.boxes.iter().map(|b| b.cast()).collect(),
        })
    }

    /// True when turning the world by `k` rig steps about +z maps camera
    /// `i` onto camera `i + k` for every camera.
    pub fn rig_symmetric_under(&self, k: usize) -> bool {
        let n = self.rig.len();
        if n == 0 {
            return false;
        }
        let rot = z_rotation::<T>(rig_step_angle(k, n));
        let tol = T::lit(1e-9).max(T::epsilon() * T::lit(64.0));
        self.rig.iter().enumerate().all(|(i, cam)| {
            let moved = self.rig[(i + k) % n].world_to_frustum().mul_mat(&rot);
            let k_i = cam.world_to_frustum();
            let scale = (0..16).map(|j| k_i.at(j / 4, j % 4).abs()).fold(T::one(), |a, b| a.max(b));
            (0..16).all(|j| (moved.at(j / 4, j % 4) - k_i.at(j / 4, j % 4)).abs() <= tol * scale)
        })
    }

    /// The same scene turned by `k` rig steps about +z. Camera `i + k` now
    /// sees what camera `i` saw, so token content moves between camera
    /// blocks while position embeddings stay put.
    pub fn rotated(&self, k: usize) -> Result<Self> {
        let n = self.rig.len();
        if k % n.max(1) == 0 {
            return Ok(self.clone());
        }
        let rows = self.content.rows;
        if rows % n != 0 || !self.rig_symmetric_under(k) {
            return Err(Error::domain("rig is not rotationally symmetric for this step"));
        }
        let per = rows / n;
        let angle = rig_step_angle(k, n);
        let (sa, ca) = (T::lit(angle.sin()), T::lit(angle.cos()));
        let mut content = Tensor::zeros(rows, self.content.cols);
        let mut geometry = Tensor::zeros(rows, GEO_DIM);
        for cam in 0..n {
            let dst = (cam + k) % n;
            for t in 0..per {
                let (from, to) = (cam * per + t, dst * per + t);
                content.row_mut(to).copy_from_slice(self.content.row(from));
                let g = self.geometry.row(from);
                let turned = [ca * g[0] - sa * g[1], sa * g[0] + ca * g[1], ca * g[2] - sa * g[3], sa * g[2] + ca * g[3]];
                geometry.row_mut(to).copy_from_slice(&turned);
            }
        }
        let boxes = self
            .boxes
            .iter()
            .map(|b| {
                let c = b.center;
                let yaw = (b.yaw + T::lit(angle)).as_f64();
                GroundTruthBox {
                    center: Vec3::new(ca * c.x - sa * c.y, sa * c.x + ca * c.y, c.z),
                    yaw: T::lit(yaw.sin().atan2(yaw.cos())),
                    ..*b
                }
            })
            .collect();
        Ok(Self {
            scene_id: self.scene_id.clone(),
            content,
            position: self.position.clone(),
            geometry,
            rig: self.rig.clone(),
            boxes,
        })
    }
}

/// Geometry row of one token. Footprint offsets are summed over the boxes
/// covering the token, so they are averaged by the coverage count.
fn token_geometry(cam: &CameraModel<f64>, token: &FeatureToken, n_classes: u32) -> Result<[f64; GEO_DIM]> {
    let c = &token.content;
    let covered: f64 = c[1..=n_classes as usize].iter().sum();
    let (mut u, mut v) = token.pixel;
    if covered > 0.0 {
        let base = 1 + n_classes as usize;
        u += c[base + 2] / covered * cam.width() as f64;
        v += c[base + 3] / covered * cam.height() as f64;
    }
    let ray = cam.ray_through_pixel(u, v)?;
    let (dx, dy) = (ray.direction.x, ray.direction.y);
    let norm = dx.hypot(dy);
    let (dx, dy) = if norm > 0.0 { (dx / norm, dy / norm) } else { (1.0, 0.0) };
    Ok([ray.origin.x, ray.origin.y, dx, dy])
}

/// Object-query reference points on two staggered rings around the rig
/// origin at mid height, normalized; `phase` in `[0, 1)` turns the rings.
fn polar_anchors(cfg: &DecoderConfig, phase: f64) -> Vec<[f64; 3]> {
    let range = &cfg.perception_range;
    let n = cfg.n_obj_queries;
    let rings = if n >= 8 { 2 } else { 1 };
    let half = 0.5 * (range.x_max - range.x_min).min(range.y_max - range.y_min);
    let mid = (range.min() + range.max()) * 0.5;
    (0..n)
        .map(|i| {
            let ring = i % rings;
            let per = n.div_ceil(rings) as f64;
            let radius = half * (ring + 1) as f64 / (rings as f64 + 0.5);
            let a = 2.0 * std::f64::consts::PI * ((i / rings) as f64 + 0.5 * ring as f64 + phase) / per;
            let p = Vec3::new(mid.x + radius * a.cos(), mid.y + radius * a.sin(), mid.z);
            range.normalize(p).0
        })
        .collect()
}

fn rig_step_angle(k: usize, n: usize) -> f64 {
    2.0 * std::f64::consts::PI * (k % n) as f64 / n as f64
}

fn z_rotation<T: Real>(angle: f64) -> Mat4<T> {
    let (s, c) = angle.sin_cos();
    let z = 0.0;
    Mat4::from_rows([c, -s, z, z, s, c, z, z, z, z, 1.0, z, z, z, z, 1.0].map(T::lit))
}

/// Ray groups laid out as decoder inputs, groups in order.
#[derive(Clone, Debug)]
pub struct RayQueries<T> {
    pub groups: Vec<RayQueryGroup<T>>,
    /// Normalized reference points, `n_ray × 3`.
    pub points: Tensor<T>,
    pub position: Tensor<T>,
    pub group_sizes: Vec<usize>,
}

impl<T: Real> RayQueries<T> {
    pub fn len(&self) -> usize {
        self.points.rows
    }

    pub fn is_empty(&self) -> bool {
        self.points.rows == 0
    }
}

/// Handles produced by one forward pass. Query rows are `[rays | objects]`.
pub struct ForwardOut {
    pub params: Vec<Var>,
    pub class_logits: Var,
    pub boxes: Var,
    /// Query embeddings fed to the first layer.
    pub query_embed: Var,
    pub n_ray: usize,
    pub n_obj: usize,
    pub self_attention: Vec<Var>,
}

/// Plain-value head outputs for a set of queries.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutput<T> {
    pub class_logits: Tensor<T>,
    /// Encoded boxes (`BOX_DIM` columns).
    pub boxes: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictedBox {
    pub class_id: u32,
    pub score: f64,
    pub bbox: GroundTruthBox<f64>,
}

pub struct Model<T> {
    cfg: DecoderConfig,
    params: Vec<Tensor<T>>,
    names: Vec<String>,
    layout: Layout,
    clamped: AtomicU64,
}

impl<T: Real> Clone for Model<T> {
    fn clone(&self) -> Self {
        Self {
            cfg: self.cfg,
            params: self.params.clone(),
            names: self.names.clone(),
            layout: self.layout.clone(),
            clamped: AtomicU64::new(self.clamped.load(Ordering::Relaxed)),
        }
    }
}

impl<T: Real> std::fmt::Debug for Model<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model").field("cfg", &self.cfg).field("n_params", &self.n_params()).finish()
    }
}

fn mlp<T: Real>(tape: &mut Tape<T>, x: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Var {
    let h = tape.matmul(x, w1);
    let h = tape.add_row(h, b1);
    let h = tape.silu(h);
    let o = tape.matmul(h, w2);
    tape.add_row(o, b2)
}

fn linear<T: Real>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Var {
    let y = tape.matmul(x, w);
    tape.add_row(y, b)
}

fn inverse_sigmoid<T: Real>(x: T) -> T {
    let x = x.max(T::lit(REF_CLAMP)).min(T::lit(1.0 - REF_CLAMP));
    (x / (T::one() - x)).ln()
}

impl<T: Real> Model<T> {
    pub fn new(cfg: DecoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = SeededRng::new(seed);
        let (e, hd) = (cfg.embed_dim, cfg.hidden_dim);
        let mut b = Builder { rng: &mut rng, params: Vec::new(), names: Vec::new() };
        let (content_w, content_b) = b.linear("content", cfg.content_dim(), e);
        let (pe_w, pe_b) = b.linear("pos", PE_DIM, e);
        b.add_diagonal(pe_w, DIAGONAL_GAIN);
        let (q_w1, q_b1) = b.linear("query.0", 3, hd);
        let (q_w2, q_b2) = b.linear("query.1", hd, e);
        let refs = polar_anchors(&cfg, b.rng.uniform())
            .into_iter()
            .flat_map(|p| p.map(|v| T::lit(inverse_sigmoid(v.clamp(REF_CLAMP, 1.0 - REF_CLAMP)))))
            .collect();
        let obj_ref = b.push("obj_ref".into(), Tensor::from_vec(cfg.n_obj_queries, 3, refs));
        let layers = (0..cfg.n_layers)
            .map(|l| {
                let sa = b.attn(&format!("layer{l}.self"), e);
                let ln1 = b.norm(&format!("layer{l}.norm1"), e);
                let ca = b.attn(&format!("layer{l}.cross"), e);
                b.add_diagonal(ca.wq, DIAGONAL_GAIN);
                b.add_diagonal(ca.wk, DIAGONAL_GAIN);
                let ln2 = b.norm(&format!("layer{l}.norm2"), e);
                let (ff_w1, ff_b1) = b.linear(&format!("layer{l}.ffn.0"), e, hd);
                let (ff_w2, ff_b2) = b.linear(&format!("layer{l}.ffn.1"), hd, e);
                let ln3 = b.norm(&format!("layer{l}.norm3"), e);
                LayerIdx { sa, ln1, ca, ln2, ff_w1, ff_b1, ff_w2, ff_b2, ln3 }
            })
            .collect();
        let cls_w = b.xavier("cls.w".into(), e, cfg.n_classes as usize);
        let prior_bias = -((1.0 - PRIOR_PROB) / PRIOR_PROB).ln();
        let cls_b = b.bias("cls.b".into(), cfg.n_classes as usize, prior_bias);
        let (box_w1, box_b1) = b.linear("box.0", e, hd);
        let (box_w2, box_b2) = b.linear("box.1", hd, HEAD_DIM);
        let (geo_wq, geo_bq) = b.linear("geo.q", e, e);
        let (geo_wk, geo_bk) = b.linear("geo.k", e, e);
        b.add_diagonal(geo_wq, DIAGONAL_GAIN);
        b.add_diagonal(geo_wk, DIAGONAL_GAIN);
        let Builder { params, names, .. } = b;
        let layout = Layout {
            content_w,
            content_b,
            pe_w,
            pe_b,
            q_w1,
            q_b1,
            q_w2,
            q_b2,
            obj_ref,
            layers,
            cls_w,
            cls_b,
            box_w1,
            box_b1,
            box_w2,
            box_b2,
            geo_wq,
            geo_bq,
            geo_wk,
            geo_bk,
        };
        Ok(Self { cfg, params, names, layout, clamped: AtomicU64::new(0) })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn n_params(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    /// Points clamped into the perception range so far.
    pub fn clamp_count(&self) -> u64 {
        self.clamped.load(Ordering::Relaxed)
    }

    /// Normalize `p` to `[0, 1]^3`, counting points that needed clamping.
    pub fn normalize_point(&self, p: Vec3<T>) -> [T; 3] {
        let (n, clamped) = self.cfg.perception_range.normalize(p.cast());
        if clamped {
            self.clamped.fetch_add(1, Ordering::Relaxed);
        }
        n.map(T::lit)
    }

    /// Query embedding of a 3D point: range normalization then a 2-layer MLP.
    pub fn encode_query(&self, p: Vec3<T>) -> Vec<T> {
        let n = self.normalize_point(p);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(1, 3, n.to_vec()));
        let l = &self.layout;
        let [w1, b1, w2, b2] = [l.q_w1, l.q_b1, l.q_w2, l.q_b2].map(|i| tape.leaf(self.params[i].clone()));
        let out = mlp(&mut tape, x, w1, b1, w2, b2);
        tape.value(out).data.clone()
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            cfg: self.cfg,
            params: self.params.iter().map(|p| p.cast()).collect(),
            names: self.names.clone(),
            layout: self.layout.clone(),
            clamped: AtomicU64::new(self.clamp_count()),
        }
    }

    /// Lay out ray groups as decoder inputs.
    pub fn ray_queries(&self, groups: Vec<RayQueryGroup<T>>) -> RayQueries<T> {
        let n: usize = groups.iter().map(|g| g.len()).sum();
        let mut points = Tensor::zeros(n, 3);
        let mut position = Tensor::zeros(n, PE_DIM);
        let mut r = 0;
        for g in &groups {
            for &p in &g.ref_points {
                points.row_mut(r).copy_from_slice(&self.normalize_point(p));
                position.row_mut(r).copy_from_slice(&point_direction_pe(p));
                r += 1;
            }
        }
        let group_sizes = groups.iter().map(|g| g.len()).collect();
        RayQueries { groups, points, position, group_sizes }
    }

    /// Direction embeddings of the current object reference points.
    pub fn object_positions(&self) -> Tensor<T> {
        let refs = &self.params[self.layout.obj_ref];
        let range = &self.cfg.perception_range;
        let mut out = Tensor::zeros(refs.rows, PE_DIM);
        for r in 0..refs.rows {
            let n = [0, 1, 2].map(|c| sigmoid(refs.at(r, c)).as_f64());
            let p: Vec3<T> = range.denormalize(n).cast();
            out.row_mut(r).copy_from_slice(&point_direction_pe(p));
        }
        out
    }

    /// Full forward pass. `obj_pos` overrides the detached object position
    /// embeddings (used to hold them fixed under finite differences).
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        inputs: &SceneInputs<T>,
        rays: Option<&RayQueries<T>>,
        obj_pos: Option<&Tensor<T>>,
    ) -> Result<ForwardOut> {
        let cfg = &self.cfg;
        if inputs.content.cols != cfg.content_dim() || inputs.position.cols != PE_DIM {
            return Err(Error::shape(format!(
                "token widths {}/{} do not match config {}/{PE_DIM}",
                inputs.content.cols,
                inputs.position.cols,
                cfg.content_dim()
            )));
        }
        let rows = inputs.content.rows;
        if rows != inputs.position.rows || inputs.geometry.shape() != (rows, GEO_DIM) || rows == 0 {
            return Err(Error::shape("token content/position/geometry rows differ or are zero"));
        }
        let pv: Vec<Var> = self.params.iter().map(|p| tape.leaf(p.clone())).collect();
        let l = &self.layout;

        let obj_refs = tape.sigmoid(pv[l.obj_ref]);
        let obj_embed = mlp(tape, obj_refs, pv[l.q_w1], pv[l.q_b1], pv[l.q_w2], pv[l.q_b2]);
        let obj_pos = tape.leaf(match obj_pos {
            Some(p) => p.clone(),
            None => self.object_positions(),
        });
        let n_obj = cfg.n_obj_queries;

        let (query_embed, pos_in, ref_logits, n_ray, mask) = match rays.filter(|r| !r.is_empty()) {
            Some(rq) => {
                let pts = tape.leaf(rq.points.clone());
                let ray_embed = mlp(tape, pts, pv[l.q_w1], pv[l.q_b1], pv[l.q_w2], pv[l.q_b2]);
                let ray_pos = tape.leaf(rq.position.clone());
                let ray_logit = tape.leaf(rq.points.map(inverse_sigmoid));
                let q = tape.concat_rows(&[ray_embed, obj_embed]);
                let p = tape.concat_rows(&[ray_pos, obj_pos]);
                let r = tape.concat_rows(&[ray_logit, pv[l.obj_ref]]);
                let m: Arc<AttentionMask> = Arc::new(build_attention_mask(n_obj, &rq.group_sizes));
                (q, p, r, rq.len(), Some(m))
            }
            None => (obj_embed, obj_pos, pv[l.obj_ref], 0, None),
        };

        let content = tape.leaf(inputs.content.clone());
        let position = tape.leaf(inputs.position.clone());
        let memory = linear(tape, content, pv[l.content_w], pv[l.content_b]);
        let key_pos = linear(tape, position, pv[l.pe_w], pv[l.pe_b]);
        let keys = tape.add(memory, key_pos);
        let query_pos = linear(tape, pos_in, pv[l.pe_w], pv[l.pe_b]);

        let heads = cfg.n_heads;
        let mut h = query_embed;
        let mut self_attention = Vec::with_capacity(l.layers.len());
        for layer in &l.layers {
            let hp = tape.add(h, query_pos);
            let (sa, probs) = attend(tape, &pv, &layer.sa, hp, hp, h, heads, mask.clone());
            self_attention.push(probs);
            let x = tape.add(h, sa);
            h = tape.layer_norm(x, pv[layer.ln1.0], pv[layer.ln1.1], T::lit(LN_EPS));

            let hp = tape.add(h, query_pos);
            let (ca, _) = attend(tape, &pv, &layer.ca, hp, keys, memory, heads, None);
            let x = tape.add(h, ca);
            h = tape.layer_norm(x, pv[layer.ln2.0], pv[layer.ln2.1], T::lit(LN_EPS));

            let ff = mlp(tape, h, pv[layer.ff_w1], pv[layer.ff_b1], pv[layer.ff_w2], pv[layer.ff_b2]);
            let x = tape.add(h, ff);
            h = tape.layer_norm(x, pv[layer.ln3.0], pv[layer.ln3.1], T::lit(LN_EPS));
        }

        let class_logits = linear(tape, h, pv[l.cls_w], pv[l.cls_b]);
        let raw = mlp(tape, h, pv[l.box_w1], pv[l.box_b1], pv[l.box_w2], pv[l.box_b2]);
        let center = self.center_head(tape, &pv, h, keys, inputs, raw, ref_logits);
        let rest = tape.slice_cols(raw, 2, BOX_DIM - 3);
        let boxes = tape.concat_cols(&[center, rest]);
        Ok(ForwardOut { params: pv, class_logits, boxes, query_embed, n_ray, n_obj, self_attention })
    }

    /// Normalized box centers. The query pools camera origins and footprint
    /// ray directions from the tokens it attends to and places the center
    /// along the pooled ray at its reference range scaled by `exp(raw[0])`;
    /// height is a refinement of the reference height by `raw[1]`.
    #[allow(clippy::too_many_arguments)]
    fn center_head(
        &self,
        tape: &mut Tape<T>,
        pv: &[Var],
        h: Var,
        keys: Var,
        inputs: &SceneInputs<T>,
        raw: Var,
        ref_logits: Var,
    ) -> Var {
        let l = &self.layout;
        let nq = tape.shape(h).0;
        let range = &self.cfg.perception_range;
        let lo = [range.x_min, range.y_min].map(T::lit);
        let span = [range.x_max - range.x_min, range.y_max - range.y_min].map(T::lit);
        let per_row = |f: &dyn Fn(usize) -> T| Tensor::from_vec(nq, 2, (0..nq * 2).map(|i| f(i % 2)).collect());

        let q = linear(tape, h, pv[l.geo_wq], pv[l.geo_bq]);
        let k = linear(tape, keys, pv[l.geo_wk], pv[l.geo_bk]);
        let geo = tape.leaf(inputs.geometry.clone());
        let pooled = tape.attention(q, k, geo, 1, None);
        let origin = tape.slice_cols(pooled, 0, 2);
        let dir = tape.slice_cols(pooled, 2, 2);
        let dir = tape.normalize_rows(dir);

        let refs = tape.sigmoid(ref_logits);
        let ref_xy = tape.slice_cols(refs, 0, 2);
        let span_v = tape.leaf(per_row(&|c| span[c]));
        let ref_xy = tape.mul(ref_xy, span_v);
        let lo_v = tape.leaf(Tensor::from_vec(1, 2, lo.to_vec()));
        let ref_xy = tape.add_row(ref_xy, lo_v);
        let unit = tape.normalize_rows(ref_xy);
        let along = tape.mul(ref_xy, unit);
        let ones = tape.leaf(Tensor::full(2, 1, T::one()));
        let ref_range = tape.matmul(along, ones);
        let log_scale = tape.slice_cols(raw, 0, 1);
        let scale = tape.exp(log_scale);
        let r = tape.mul(ref_range, scale);
        let r = tape.concat_cols(&[r, r]);
        let offset = tape.mul(dir, r);
        let xy = tape.add(origin, offset);
        let inv_span = tape.leaf(per_row(&|c| T::one() / span[c]));
        let xy = tape.mul(xy, inv_span);
        let shift = tape.leaf(Tensor::from_vec(1, 2, vec![-lo[0] / span[0], -lo[1] / span[1]]));
        let xy_n = tape.add_row(xy, shift);

        let ref_z = tape.slice_cols(ref_logits, 2, 1);
        let dz = tape.slice_cols(raw, 1, 1);
        let z = tape.add(ref_z, dz);
        let z = tape.sigmoid(z);
        tape.concat_cols(&[xy_n, z])
    }

    /// Object-query outputs without ray queries.
    pub fn predict(&self, inputs: &SceneInputs<T>) -> Result<HeadOutput<T>> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, inputs, None, None)?;
        Ok(HeadOutput {
            class_logits: tape.value(out.class_logits).clone(),
            boxes: tape.value(out.boxes).clone(),
        })
    }

    /// Decoded object predictions with score at least `score_floor`, one per
    /// query (best class), in query order.
    pub fn detect(&self, inputs: &SceneInputs<T>, score_floor: f64) -> Result<Vec<PredictedBox>> {
        let out = self.predict(inputs)?;
        Ok(decode_predictions(&out, &self.cfg.perception_range)
            .into_iter()
            .filter(|p| p.score >= score_floor)
            .collect())
    }
}

#[allow(clippy::too_many_arguments)]
fn attend<T: Real>(
    tape: &mut Tape<T>,
    pv: &[Var],
    idx: &AttnIdx,
    q_in: Var,
    k_in: Var,
    v_in: Var,
    heads: usize,
    mask: Option<Arc<AttentionMask>>,
) -> (Var, Var) {
    let q = linear(tape, q_in, pv[idx.wq], pv[idx.bq]);
    let k = linear(tape, k_in, pv[idx.wk], pv[idx.bk]);
    let v = linear(tape, v_in, pv[idx.wv], pv[idx.bv]);
    let a = tape.attention(q, k, v, heads, mask);
    (linear(tape, a, pv[idx.wo], pv[idx.bo]), a)
}

/// Regression target for a box.
pub fn encode_box<T: Real>(b: &GroundTruthBox<T>, range: &PerceptionRange) -> [T; BOX_DIM] {
    let (n, _) = range.normalize(b.center.cast());
    let (s, c) = b.yaw.sin_cos();
    [
        T::lit(n[0]),
        T::lit(n[1]),
        T::lit(n[2]),
        b.size[0].ln(),
        b.size[1].ln(),
        b.size[2].ln(),
        s,
        c,
    ]
}

/// Inverse of [`encode_box`]; sizes go through `exp` and are always positive.
pub fn decode_box<T: Real>(row: &[T], range: &PerceptionRange, class_id: u32) -> GroundTruthBox<f64> {
    let n = [row[0].as_f64(), row[1].as_f64(), row[2].as_f64()];
    GroundTruthBox {
        center: range.denormalize(n),
        size: [row[3], row[4], row[5]].map(|v| v.as_f64().exp().max(f64::MIN_POSITIVE)),
        yaw: row[6].as_f64().atan2(row[7].as_f64()),
        class_id,
    }
}

pub fn decode_predictions<T: Real>(out: &HeadOutput<T>, range: &PerceptionRange) -> Vec<PredictedBox> {
    (0..out.class_logits.rows)
        .map(|r| {
            let logits = out.class_logits.row(r);
            let mut best = 0;
            for (c, &v) in logits.iter().enumerate() {
                if v > logits[best] {
                    best = c;
                }
            }
            let score = sigmoid(logits[best].as_f64());
            PredictedBox { class_id: best as u32, score, bbox: decode_box(out.boxes.row(r), range, best as u32) }
        })
        .collect()
}
