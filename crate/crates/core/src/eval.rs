//! Center-distance detection metrics and the ray duplicate rate.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{Box3, Camera, Vec3f};

pub const DETECTIONS_SCHEMA: &str = "raydn-detections/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Detection {
    pub scene_id: String,
    pub class_id: u32,
    pub center: Vec3f,
    pub size: [f64; 3],
    pub yaw: f64,
    pub score: f64,
}

impl Detection {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::domain(format!("score {} outside [0, 1]", self.score)));
        }
        if self.size.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::domain(format!("sizes must be positive, got {:?}", self.size)));
        }
        if !self.center.is_finite() || !self.yaw.is_finite() {
            return Err(Error::NonFinite("detection center/yaw".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionsFile {
    pub schema: String,
    pub detections: Vec<Detection>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Center-distance thresholds in meters, strictly increasing.
    pub distance_thresholds: Vec<f64>,
    /// Angular tolerance for calling two detections colinear, radians.
    pub ray_angle_eps: f64,
    /// Points on the recall grid used to integrate AP.
    pub recall_points: usize,
    /// Threshold whose matches feed the duplicate rate.
    pub duplicate_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { distance_thresholds: vec![0.5, 1.0, 2.0, 4.0], ray_angle_eps: 0.01, recall_points: 101, duplicate_threshold: 2.0 }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        let t = &self.distance_thresholds;
        if t.is_empty() || !(t[0] > 0.0) || t.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::domain(format!("thresholds must be positive and strictly increasing, got {t:?}")));
        }
        if !(self.ray_angle_eps > 0.0) || self.recall_points < 2 || !(self.duplicate_threshold > 0.0) {
            return Err(Error::domain("ray_angle_eps and duplicate_threshold must be positive, recall_points >= 2"));
        }
        Ok(())
    }
}

fn planar_distance(a: Vec3f, b: Vec3f) -> f64 {
    (a.x - b.x).hypot(a.y - b.y)
}

/// Descending score, then center lexicographic.
fn score_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.center.x.total_cmp(&b.center.x))
        .then(a.center.y.total_cmp(&b.center.y))
        .then(a.center.z.total_cmp(&b.center.z))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GreedyResult {
    /// Detection indices in matching order.
    pub order: Vec<usize>,
    /// Matched ground truth per detection (input indexing); `None` is a FP.
    pub matched: Vec<Option<usize>>,
    pub unmatched_gts: Vec<usize>,
}

impl GreedyResult {
    pub fn is_tp(&self, det: usize) -> bool {
        self.matched[det].is_some()
    }
}

/// Match detections of one scene to its ground truth. In score order, each
/// detection claims the nearest unclaimed same-class box within
/// `threshold` of ground-plane center distance.
pub fn greedy_match(dets: &[Detection], gts: &[Box3], threshold: f64) -> GreedyResult {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| score_order(&dets[a], &dets[b]).then(a.cmp(&b)));
    let mut claimed = vec![false; gts.len()];
    let mut matched = vec![None; dets.len()];
    for &d in &order {
        let det = &dets[d];
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if claimed[g] || gt.class_id != det.class_id {
                continue;
            }
            let dist = planar_distance(det.center, gt.center);
            if dist <= threshold && best.is_none_or(|(_, b)| dist < b) {
                best = Some((g, dist));
            }
        }
        if let Some((g, _)) = best {
            claimed[g] = true;
            matched[d] = Some(g);
        }
    }
    let unmatched_gts = (0..gts.len()).filter(|&g| !claimed[g]).collect();
    GreedyResult { order, matched, unmatched_gts }
}

/// Precision/recall after each distinct score level, highest first.
pub fn pr_points(matches: &[(f64, bool)], n_gt: usize) -> Vec<(f64, f64)> {
    let mut sorted = matches.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut out = Vec::new();
    let (mut tp, mut seen) = (0usize, 0usize);
    for (i, &(score, is_tp)) in sorted.iter().enumerate() {
        seen += 1;
        tp += is_tp as usize;
        let block_end = sorted.get(i + 1).is_none_or(|n| n.0 != score);
        if block_end {
            out.push((tp as f64 / n_gt.max(1) as f64, tp as f64 / seen as f64));
        }
    }
    out
}

/// Area under the precision envelope sampled on an evenly spaced recall
/// grid of `recall_points` values in `[0, 1]`. `None` when `n_gt == 0`.
pub fn average_precision(matches: &[(f64, bool)], n_gt: usize, recall_points: usize) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let pts = pr_points(matches, n_gt);
    // Envelope: best precision at recall >= r, scanning from the right.
    let mut env = vec![0.0; pts.len()];
    let mut best: f64 = 0.0;
    for i in (0..pts.len()).rev() {
        best = best.max(pts[i].1);
        env[i] = best;
    }
    let mut sum = 0.0;
    let mut j = 0;
    for k in 0..recall_points {
        let r = k as f64 / (recall_points - 1) as f64;
        while j < pts.len() && pts[j].0 < r - 1e-12 {
            j += 1;
        }
        if j < pts.len() {
            sum += env[j];
        }
    }
    Some(sum / recall_points as f64)
}

/// Scene-level inputs to evaluation.
#[derive(Clone, Debug)]
pub struct EvalScene<'a> {
    pub scene_id: &'a str,
    pub boxes: &'a [Box3],
    pub rig: &'a [Camera],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    /// `None` for the curve pooled over classes.
    pub class_id: Option<u32>,
    pub threshold: f64,
    /// `(recall, precision)`; a lone `(0, 0)` marks an empty curve.
    pub points: Vec<(f64, f64)>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub thresholds: Vec<f64>,
    pub classes: Vec<u32>,
    /// `ap[class][threshold]`; `None` when the class has no ground truth.
    pub ap: Vec<Vec<Option<f64>>>,
    pub gt_counts: Vec<usize>,
    /// `counts[class][threshold]`.
    pub counts: Vec<Vec<Counts>>,
    pub map: f64,
    pub curves: Vec<PrCurve>,
    pub ray_duplicate_rate: f64,
}

fn group_by_scene<'d>(dets: &'d [Detection]) -> BTreeMap<&'d str, Vec<Detection>> {
    let mut by: BTreeMap<&str, Vec<Detection>> = BTreeMap::new();
    for d in dets {
        by.entry(d.scene_id.as_str()).or_default().push(d.clone());
    }
    by
}

fn curve(matches: &[(f64, bool)], n_gt: usize) -> Vec<(f64, f64)> {
    let pts = pr_points(matches, n_gt);
    if pts.is_empty() {
        vec![(0.0, 0.0)]
    } else {
        pts
    }
}

/// Per-threshold PR curves for each class and pooled over classes.
pub fn pr_curves(dets: &[Detection], scenes: &[EvalScene<'_>], classes: &[u32], cfg: &EvalConfig) -> Vec<PrCurve> {
    let by = group_by_scene(dets);
    let mut out = Vec::new();
    for &t in &cfg.distance_thresholds {
        let mut pooled = Vec::new();
        let mut pooled_gt = 0;
        for &c in classes {
            let (m, n_gt) = class_matches(&by, scenes, c, t);
            out.push(PrCurve { class_id: Some(c), threshold: t, points: curve(&m, n_gt) });
            pooled.extend(m);
            pooled_gt += n_gt;
        }
        out.push(PrCurve { class_id: None, threshold: t, points: curve(&pooled, pooled_gt) });
    }
    out
}

/// `(score, is_tp)` for every detection of class `c`, and the class's
/// ground-truth count, across scenes.
fn class_matches(
    by: &BTreeMap<&str, Vec<Detection>>,
    scenes: &[EvalScene<'_>],
    c: u32,
    threshold: f64,
) -> (Vec<(f64, bool)>, usize) {
    let mut m = Vec::new();
    let mut n_gt = 0;
    for s in scenes {
        let gts: Vec<Box3> = s.boxes.iter().filter(|b| b.class_id == c).copied().collect();
        n_gt += gts.len();
        let dets: Vec<Detection> =
            by.get(s.scene_id).map(|v| v.iter().filter(|d| d.class_id == c).cloned().collect()).unwrap_or_default();
        let r = greedy_match(&dets, &gts, threshold);
        m.extend(dets.iter().enumerate().map(|(i, d)| (d.score, r.is_tp(i))));
    }
    (m, n_gt)
}

/// Fraction of false positives (at `cfg.duplicate_threshold`) that lie
/// within `ray_angle_eps` of the ray from some camera through a same-class
/// true positive of the same scene. Zero when there are no false positives.
pub fn ray_duplicate_rate(dets: &[Detection], scenes: &[EvalScene<'_>], cfg: &EvalConfig) -> f64 {
    let by = group_by_scene(dets);
    let (mut fps, mut colinear) = (0usize, 0usize);
    for s in scenes {
        let Some(sd) = by.get(s.scene_id) else { continue };
        let r = greedy_match(sd, s.boxes, cfg.duplicate_threshold);
        let tps: Vec<&Detection> = (0..sd.len()).filter(|&i| r.is_tp(i)).map(|i| &sd[i]).collect();
        for (i, d) in sd.iter().enumerate() {
            if r.is_tp(i) {
                continue;
            }
            fps += 1;
            let hit = tps.iter().filter(|t| t.class_id == d.class_id).any(|t| {
                s.rig.iter().any(|cam| match (cam.ray_through(d.center), cam.ray_through(t.center)) {
                    (Ok(a), Ok(b)) => a.angle_to(&b) < cfg.ray_angle_eps,
                    _ => false,
                })
            });
            colinear += hit as usize;
        }
    }
    if fps == 0 {
        0.0
    } else {
        colinear as f64 / fps as f64
    }
}

/// Full report over `classes`. Scenes are processed in the given order and
/// detections grouped by scene id, so the result does not depend on the
/// order of `dets`.
pub fn evaluate(dets: &[Detection], scenes: &[EvalScene<'_>], classes: &[u32], cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    for d in dets {
        d.validate()?;
    }
    let by = group_by_scene(dets);
    let mut ap = Vec::with_capacity(classes.len());
    let mut counts = Vec::with_capacity(classes.len());
    let mut gt_counts = Vec::with_capacity(classes.len());
    for &c in classes {
        let mut row = Vec::new();
        let mut crow = Vec::new();
        let mut n_gt_c = 0;
        for &t in &cfg.distance_thresholds {
            let (m, n_gt) = class_matches(&by, scenes, c, t);
            let tp = m.iter().filter(|x| x.1).count();
            crow.push(Counts { tp, fp: m.len() - tp, fn_: n_gt - tp });
            row.push(average_precision(&m, n_gt, cfg.recall_points));
            n_gt_c = n_gt;
        }
        ap.push(row);
        counts.push(crow);
        gt_counts.push(n_gt_c);
    }
    let defined: Vec<f64> = ap.iter().flatten().flatten().copied().collect();
    let map = if defined.is_empty() { 0.0 } else { defined.iter().sum::<f64>() / defined.len() as f64 };
    Ok(EvalReport {
        thresholds: cfg.distance_thresholds.clone(),
        classes: classes.to_vec(),
        ap,
        gt_counts,
        counts,
        map,
        curves: pr_curves(dets, scenes, classes, cfg),
        ray_duplicate_rate: ray_duplicate_rate(dets, scenes, cfg),
    })
}

fn f6(v: f64) -> String {
    format!("{v:.6}")
}

pub fn metrics_csv(r: &EvalReport) -> String {
    let mut s = String::from("class_id,threshold,ap,n_gt,tp,fp,fn\n");
    for (ci, c) in r.classes.iter().enumerate() {
        for (ti, t) in r.thresholds.iter().enumerate() {
            let ap = r.ap[ci][ti].map(f6).unwrap_or_else(|| "nan".into());
            let k = r.counts[ci][ti];
            let _ = writeln!(s, "{c},{},{ap},{},{},{},{}", f6(*t), r.gt_counts[ci], k.tp, k.fp, k.fn_);
        }
    }
    s
}

pub fn summary_csv(r: &EvalReport) -> String {
    let mut s = String::from("metric,value\n");
    if r.classes.is_empty() {
        return s;
    }
    let _ = writeln!(s, "map,{}", f6(r.map));
    let _ = writeln!(s, "ray_duplicate_rate,{}", f6(r.ray_duplicate_rate));
    for (ti, t) in r.thresholds.iter().enumerate() {
        let k = r.counts.iter().fold(Counts::default(), |a, row| Counts {
            tp: a.tp + row[ti].tp,
            fp: a.fp + row[ti].fp,
            fn_: a.fn_ + row[ti].fn_,
        });
        let _ = writeln!(s, "tp@{},{}", f6(*t), k.tp);
        let _ = writeln!(s, "fp@{},{}", f6(*t), k.fp);
        let _ = writeln!(s, "fn@{},{}", f6(*t), k.fn_);
    }
    s
}

pub fn curves_csv(r: &EvalReport) -> String {
    let mut s = String::from("class_id,threshold,recall,precision\n");
    for c in &r.curves {
        let class = c.class_id.map_or("all".to_string(), |v| v.to_string());
        for (rec, prec) in &c.points {
            let _ = writeln!(s, "{class},{},{},{}", f6(c.threshold), f6(*rec), f6(*prec));
        }
    }
    s
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Axis-aligned plot window.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlotBounds {
    pub x: (f64, f64),
    pub y: (f64, f64),
}

impl PlotBounds {
    pub const UNIT: Self = Self { x: (0.0, 1.0), y: (0.0, 1.0) };

    /// Smallest window holding every point; degenerate spans are widened.
    pub fn fit(series: &[(String, Vec<(f64, f64)>)]) -> Self {
        let pts = series.iter().flat_map(|(_, p)| p.iter()).filter(|(x, y)| x.is_finite() && y.is_finite());
        let (mut x, mut y) = ((f64::INFINITY, f64::NEG_INFINITY), (f64::INFINITY, f64::NEG_INFINITY));
        for &(px, py) in pts {
            x = (x.0.min(px), x.1.max(px));
            y = (y.0.min(py), y.1.max(py));
        }
        let widen = |r: (f64, f64)| {
            if !r.0.is_finite() {
                (0.0, 1.0)
            } else if r.1 - r.0 < 1e-12 {
                (r.0 - 0.5, r.1 + 0.5)
            } else {
                r
            }
        };
        Self { x: widen(x), y: widen(y) }
    }
}

/// Line plot of `(x, y)` series on the unit square.
pub fn svg_plot(title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    svg_plot_in(title, x_label, y_label, PlotBounds::UNIT, series)
}

/// Line plot of `(x, y)` series inside `bounds`; points outside are clamped.
pub fn svg_plot_in(
    title: &str,
    x_label: &str,
    y_label: &str,
    bounds: PlotBounds,
    series: &[(String, Vec<(f64, f64)>)],
) -> String {
    let (w, h, m) = (480.0, 360.0, 48.0);
    let (bx, by) = (bounds.x, bounds.y);
    let px = |x: f64| m + ((x - bx.0) / (bx.1 - bx.0)).clamp(0.0, 1.0) * (w - 2.0 * m);
    let py = |y: f64| h - m - ((y - by.0) / (by.1 - by.0)).clamp(0.0, 1.0) * (h - 2.0 * m);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-family="sans-serif" font-size="14">{title}</text>"#, w / 2.0);
    let _ = writeln!(
        s,
        r#"<path d="M{:.1},{:.1} L{:.1},{:.1} L{:.1},{:.1}" fill="none" stroke="black"/>"#,
        px(bx.0),
        py(by.1),
        px(bx.0),
        py(by.0),
        px(bx.1),
        py(by.0)
    );
    for k in 0..=4 {
        let t = k as f64 / 4.0;
        let (vx, vy) = (bx.0 + t * (bx.1 - bx.0), by.0 + t * (by.1 - by.0));
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-family="sans-serif" font-size="10">{}</text>"#, px(vx), h - m + 14.0, tick(vx));
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end" font-family="sans-serif" font-size="10">{}</text>"#, m - 4.0, py(vy) + 3.0, tick(vy));
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12">{x_label}</text>"#, w / 2.0, h - 8.0);
    let _ = writeln!(s, r#"<text x="14" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12" transform="rotate(-90 14 {})">{y_label}</text>"#, h / 2.0, h / 2.0);
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#, path.join(" "));
        let ly = 36.0 + 14.0 * i as f64;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{ly:.1}" font-family="sans-serif" font-size="10" fill="{color}">{name}</text>"#, w - m - 90.0);
    }
    s.push_str("</svg>\n");
    s
}

fn tick(v: f64) -> String {
    if v.abs() >= 100.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

pub fn curves_svg(r: &EvalReport) -> String {
    let series: Vec<(String, Vec<(f64, f64)>)> = r
        .curves
        .iter()
        .filter(|c| c.class_id.is_none())
        .map(|c| (format!("{} m", f6(c.threshold)), c.points.clone()))
        .collect();
    svg_plot("Precision-recall (all classes)", "recall", "precision", &series)
}

fn write(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Write `metrics.csv`, `summary.csv`, `pr_curves.csv` and `pr_curves.svg`
/// into `dir`, creating it if needed.
pub fn emit_report(report: &EvalReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write(&dir.join("metrics.csv"), &metrics_csv(report))?;
    write(&dir.join("summary.csv"), &summary_csv(report))?;
    write(&dir.join("pr_curves.csv"), &curves_csv(report))?;
    write(&dir.join("pr_curves.svg"), &curves_svg(report))
}
