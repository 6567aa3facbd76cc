//! Classification and box-regression losses, and the matching cost.

use serde::{Deserialize, Serialize};

use super::model::{encode_box, BOX_DIM};
use super::tape::{focal_element, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::raydn::{GroundTruthBox, QueryLabel, RayQueryGroup};
use crate::scalar::Real;
use crate::scenes::PerceptionRange;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    /// Weight of the L1 box term, in both the loss and the matching cost.
    pub l1_weight: f64,
    /// Weight of the denoising loss relative to the matching loss.
    pub denoising_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { focal_gamma: 2.0, focal_alpha: 0.25, l1_weight: 0.25, denoising_weight: 1.0 }
    }
}

/// Sigmoid focal loss summed over queries and classes, divided by the number
/// of positive queries (at least 1). `None` labels are background: every
/// class target is zero.
pub fn focal_loss<T: Real>(
    tape: &mut Tape<T>,
    logits: Var,
    labels: &[Option<u32>],
    gamma: f64,
    alpha: f64,
) -> Result<Var> {
    let (n, c) = tape.shape(logits);
    if labels.len() != n {
        return Err(Error::shape(format!("{} labels for {n} query rows", labels.len())));
    }
    let mut targets = Tensor::zeros(n, c);
    for (r, l) in labels.iter().enumerate() {
        if let Some(k) = *l {
            if k as usize >= c {
                return Err(Error::domain(format!("class {k} out of range for {c} classes")));
            }
            targets.set(r, k as usize, T::one());
        }
    }
    let positives = labels.iter().filter(|l| l.is_some()).count().max(1);
    Ok(tape.focal_loss(logits, &targets, T::lit(gamma), T::lit(alpha), T::lit(positives as f64)))
}

/// `weight / norm · Σ |pred − target|` over rows that have a target.
pub fn l1_box_loss<T: Real>(
    tape: &mut Tape<T>,
    boxes: Var,
    targets: &[Option<[T; BOX_DIM]>],
    weight: f64,
    norm: f64,
) -> Result<Var> {
    let (n, c) = tape.shape(boxes);
    if targets.len() != n || c != BOX_DIM {
        return Err(Error::shape(format!("{} box targets for {n}×{c} predictions", targets.len())));
    }
    let mut t = Tensor::zeros(n, BOX_DIM);
    let mut w = vec![T::zero(); n];
    for (r, tg) in targets.iter().enumerate() {
        if let Some(row) = tg {
            t.row_mut(r).copy_from_slice(row);
            w[r] = T::lit(weight / norm);
        }
    }
    Ok(tape.l1_loss(boxes, &t, &w))
}

/// `n_query × n_gt` cost: focal classification cost plus the weighted L1
/// distance between encoded boxes.
pub fn matching_cost<T: Real>(
    logits: &Tensor<T>,
    boxes: &Tensor<T>,
    gts: &[GroundTruthBox<T>],
    range: &PerceptionRange,
    cfg: &LossConfig,
) -> Vec<Vec<f64>> {
    let targets: Vec<[T; BOX_DIM]> = gts.iter().map(|g| encode_box(g, range)).collect();
    let (gamma, alpha) = (T::lit(cfg.focal_gamma), T::lit(cfg.focal_alpha));
    (0..logits.rows)
        .map(|q| {
            gts.iter()
                .zip(&targets)
                .map(|(g, t)| {
                    let x = logits.at(q, g.class_id as usize);
                    let (pos, _) = focal_element(x, true, gamma, alpha);
                    let (neg, _) = focal_element(x, false, gamma, alpha);
                    let l1 = boxes.row(q).iter().zip(t).fold(T::zero(), |s, (&p, &y)| s + (p - y).abs());
                    (pos - neg).as_f64() + cfg.l1_weight * l1.as_f64()
                })
                .collect()
        })
        .collect()
}

/// Focal loss over all object queries plus L1 on matched ones, both
/// normalized by the ground-truth count.
pub fn matching_loss<T: Real>(
    tape: &mut Tape<T>,
    logits: Var,
    boxes: Var,
    gt_for_query: &[Option<usize>],
    gts: &[GroundTruthBox<T>],
    range: &PerceptionRange,
    cfg: &LossConfig,
) -> Result<Var> {
    let labels: Vec<Option<u32>> = gt_for_query.iter().map(|g| g.map(|i| gts[i].class_id)).collect();
    let cls = focal_loss(tape, logits, &labels, cfg.focal_gamma, cfg.focal_alpha)?;
    let targets: Vec<_> = gt_for_query.iter().map(|g| g.map(|i| encode_box(&gts[i], range))).collect();
    let norm = gts.len().max(1) as f64;
    let reg = l1_box_loss(tape, boxes, &targets, cfg.l1_weight, norm)?;
    Ok(tape.add(cls, reg))
}

/// Denoising loss over ray-query rows laid out group after group: focal
/// classification with the positive labeled as its box's class and the rest
/// background, plus L1 regression of every ray query toward its group's box.
/// Both terms are normalized by the number of groups.
pub fn denoising_loss<T: Real>(
    tape: &mut Tape<T>,
    logits: Var,
    boxes: Var,
    groups: &[RayQueryGroup<T>],
    range: &PerceptionRange,
    cfg: &LossConfig,
) -> Result<Var> {
    let n: usize = groups.iter().map(|g| g.len()).sum();
    if tape.shape(logits).0 != n || tape.shape(boxes).0 != n {
        return Err(Error::shape(format!(
            "{n} ray queries but outputs have {}/{} rows",
            tape.shape(logits).0,
            tape.shape(boxes).0
        )));
    }
    let mut labels = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    for g in groups {
        let t = encode_box(&g.target, range);
        for l in &g.labels {
            labels.push((*l == QueryLabel::Positive).then_some(g.target.class_id));
            targets.push(Some(t));
        }
    }
    let cls = focal_loss(tape, logits, &labels, cfg.focal_gamma, cfg.focal_alpha)?;
    let reg = l1_box_loss(tape, boxes, &targets, cfg.l1_weight, groups.len().max(1) as f64)?;
    Ok(tape.add(cls, reg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{CameraModel, Mat4, Vec3};
    use crate::raydn::group_from_depths;

    fn value(tape: &Tape<f64>, v: Var) -> f64 {
        tape.value(v).item()
    }

    #[test]
    fn focal_examples() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::from_vec(1, 1, vec![20.0]));
        let l = focal_loss(&mut t, x, &[Some(0)], 2.0, 0.25).unwrap();
        assert!(value(&t, l) < 1e-6);

        let x = t.leaf(Tensor::from_vec(1, 1, vec![0.0]));
        let l = focal_loss(&mut t, x, &[Some(0)], 0.0, 1.0).unwrap();
        assert!((value(&t, l) - std::f64::consts::LN_2).abs() < 1e-12);

        let x = t.leaf(Tensor::full(4, 3, -20.0));
        let l = focal_loss(&mut t, x, &[None; 4], 2.0, 0.25).unwrap();
        assert!(value(&t, l) < 1e-6);

        assert!(focal_loss(&mut t, x, &[None; 3], 2.0, 0.25).is_err());
    }

    fn one_group() -> (RayQueryGroup<f64>, PerceptionRange) {
        let cam = CameraModel::new(Mat4::identity(), 10, 10).unwrap();
        let b = GroundTruthBox { center: Vec3::new(0.5, 0.5, 10.0), size: [2.0; 3], yaw: 0.0, class_id: 1 };
        let g = group_from_depths(&cam, 0, 0, &b, vec![10.0, 11.0, 12.5]).unwrap();
        let range = PerceptionRange { z_max: 30.0, ..PerceptionRange::default() };
        (g, range)
    }

    fn perfect(g: &RayQueryGroup<f64>, range: &PerceptionRange) -> (Tensor<f64>, Tensor<f64>) {
        let mut logits = Tensor::full(g.len(), 3, -20.0);
        logits.set(g.positive_index(), 1, 20.0);
        let row = encode_box(&g.target, range);
        let boxes = Tensor::from_rows(&vec![row.to_vec(); g.len()]);
        (logits, boxes)
    }

    #[test]
    fn denoising_examples() {
        let (g, range) = one_group();
        let cfg = LossConfig::default();
        let (logits, boxes) = perfect(&g, &range);
        let eval = |logits: &Tensor<f64>, boxes: &Tensor<f64>| {
            let mut t = Tape::new();
            let (l, b) = (t.leaf(logits.clone()), t.leaf(boxes.clone()));
            let v = denoising_loss(&mut t, l, b, std::slice::from_ref(&g), &range, &cfg).unwrap();
            value(&t, v)
        };
        let base = eval(&logits, &boxes);
        assert!(base < 1e-6);

        let mut prev = base;
        for logit in [0.0, 5.0, 20.0] {
            let mut lg = logits.clone();
            lg.set(1, 1, logit);
            lg.set(2, 1, logit);
            let v = eval(&lg, &boxes);
            assert!(v > prev);
            prev = v;
        }

        let mut shifted = boxes.clone();
        let dx = 1.0 / (range.x_max - range.x_min);
        shifted.set(2, 0, boxes.at(2, 0) + dx);
        let delta = eval(&logits, &shifted) - base;
        assert!((delta - cfg.l1_weight * dx).abs() < 1e-12);

        let mut t = Tape::new();
        let (l, b) = (t.leaf(Tensor::zeros(2, 3)), t.leaf(Tensor::zeros(2, BOX_DIM)));
        assert!(matches!(denoising_loss(&mut t, l, b, &[g], &range, &cfg), Err(Error::Shape(_))));
    }

    #[test]
    fn cost_prefers_matching_class_and_box() {
        let range = PerceptionRange::default();
        let gt = GroundTruthBox { center: Vec3::new(1.0, 2.0, 0.0), size: [2.0; 3], yaw: 0.0, class_id: 0 };
        let good = encode_box(&gt, &range);
        let mut far = good;
        far[0] += 0.3;
        let boxes = Tensor::from_rows(&[good.to_vec(), far.to_vec(), good.to_vec()]);
        let logits = Tensor::from_rows(&[vec![3.0, -3.0], vec![3.0, -3.0], vec![-3.0, 3.0]]);
        let c = matching_cost(&logits, &boxes, &[gt], &range, &LossConfig::default());
        assert!(c[0][0] < c[1][0]);
        assert!(c[0][0] < c[2][0]);
    }
}
