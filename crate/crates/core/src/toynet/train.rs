//! Losses per scene, optimizer, training loop and gradient checking.

use std::borrow::Cow;

use serde::{Deserialize, Serialize};

use super::hungarian::hungarian_match;
use super::loss::{denoising_loss, matching_cost, matching_loss, LossConfig};
use super::model::{ForwardOut, Model, RayQueries, SceneInputs};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::raydn::{build_all, RaySpec};
use crate::rng::SeededRng;
use crate::scalar::Real;

const BATCH_STREAM: u64 = 1;
const RAY_STREAM: u64 = 2;
const AUGMENT_STREAM: u64 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    pub loss: LossConfig,
    /// Turn each training scene by a random whole number of rig steps
    /// about the vertical axis. Scenes whose rig lacks that symmetry are
    /// used as they are.
    pub rotation_augment: bool,
    /// Worker threads for per-scene gradients. Does not affect results.
    #[serde(skip)]
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            batch_size: 4,
            lr: 1e-3,
            weight_decay: 1e-4,
            grad_clip: 10.0,
            loss: LossConfig::default(),
            rotation_augment: true,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::domain("batch_size must be >= 1"));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) || !(self.grad_clip >= 0.0) {
            return Err(Error::domain("lr must be positive, weight_decay and grad_clip nonnegative"));
        }
        Ok(())
    }
}

/// Decoupled weight-decay Adam.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    decay: Vec<bool>,
    t: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> AdamW<T> {
    /// Weight decay applies to weight matrices only.
    pub fn new(model: &Model<T>, lr: f64, weight_decay: f64) -> Self {
        let zeros = || model.params().iter().map(|p| Tensor::zeros(p.rows, p.cols)).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            decay: model.param_names().iter().map(|n| n.ends_with(".w")).collect(),
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) {
        self.t += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let bc1 = T::lit(1.0 - self.beta1.powi(self.t as i32));
        let bc2 = T::lit(1.0 - self.beta2.powi(self.t as i32));
        let (lr, eps) = (T::lit(self.lr), T::lit(self.eps));
        let one = T::one();
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let wd = if self.decay[i] { T::lit(self.lr * self.weight_decay) } else { T::zero() };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.data.len() {
                let gj = g.data[j];
                m.data[j] = b1 * m.data[j] + (one - b1) * gj;
                v.data[j] = b2 * v.data[j] + (one - b2) * gj * gj;
                let mh = m.data[j] / bc1;
                let vh = v.data[j] / bc2;
                p.data[j] = p.data[j] - wd * p.data[j] - lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

/// Loss components of one scene.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SceneLoss {
    pub matching: f64,
    pub denoising: f64,
    pub total: f64,
    /// Ground truth matched to each object query.
    pub gt_for_query: Vec<Option<usize>>,
}

/// Quantities held fixed while differentiating numerically.
#[derive(Clone, Debug)]
pub struct Frozen<T> {
    pub obj_pos: Tensor<T>,
    pub gt_for_query: Vec<Option<usize>>,
}

/// Build the loss graph of one scene. Only object queries take part in
/// bipartite matching; ray queries carry fixed labels.
pub fn scene_loss<T: Real>(
    model: &Model<T>,
    tape: &mut Tape<T>,
    inputs: &SceneInputs<T>,
    rays: Option<&RayQueries<T>>,
    frozen: Option<&Frozen<T>>,
    cfg: &LossConfig,
) -> Result<(Var, ForwardOut, SceneLoss)> {
    let out = model.forward(tape, inputs, rays, frozen.map(|f| &f.obj_pos))?;
    let range = &model.config().perception_range;
    let cls_obj = tape.slice_rows(out.class_logits, out.n_ray, out.n_obj);
    let box_obj = tape.slice_rows(out.boxes, out.n_ray, out.n_obj);
    let gt_for_query = match frozen {
        Some(f) => f.gt_for_query.clone(),
        None => {
            let cost = matching_cost(tape.value(cls_obj), tape.value(box_obj), &inputs.boxes, range, cfg);
            hungarian_match(&cost)?.gt_for_queries(out.n_obj)
        }
    };
    let m = matching_loss(tape, cls_obj, box_obj, &gt_for_query, &inputs.boxes, range, cfg)?;
    let mut loss = SceneLoss { matching: tape.value(m).item().as_f64(), gt_for_query, ..Default::default() };
    let total = match rays.filter(|r| !r.is_empty()) {
        Some(rq) => {
            let cls_ray = tape.slice_rows(out.class_logits, 0, out.n_ray);
            let box_ray = tape.slice_rows(out.boxes, 0, out.n_ray);
            let dn = denoising_loss(tape, cls_ray, box_ray, &rq.groups, range, cfg)?;
            let dn = tape.scale(dn, T::lit(cfg.denoising_weight));
            loss.denoising = tape.value(dn).item().as_f64();
            tape.add(m, dn)
        }
        None => m,
    };
    loss.total = tape.value(total).item().as_f64();
    Ok((total, out, loss))
}

/// Averaged losses of one optimizer step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub total: f64,
    pub matching: f64,
    pub denoising: f64,
    pub grad_norm: f64,
}

/// Loss and parameter gradients of one scene.
pub fn scene_gradients<T: Real>(
    model: &Model<T>,
    inputs: &SceneInputs<T>,
    rays: Option<&RayQueries<T>>,
    cfg: &LossConfig,
) -> Result<(SceneLoss, Vec<Tensor<T>>)> {
    let mut tape = Tape::new();
    let (total, out, loss) = scene_loss(model, &mut tape, inputs, rays, None, cfg)?;
    if !loss.total.is_finite() {
        return Err(Error::NonFinite(format!(
            "scene {}: matching {} denoising {} total {}",
            inputs.scene_id, loss.matching, loss.denoising, loss.total
        )));
    }
    let grads = tape.backward(total);
    let g = out.params.iter().zip(model.params()).map(|(&v, p)| grads.get_or_zeros(v, p.shape())).collect();
    Ok((loss, g))
}

fn run_parallel<R: Send>(n: usize, threads: usize, f: impl Fn(usize) -> R + Sync) -> Vec<R> {
    let threads = threads.clamp(1, n.max(1));
    if threads == 1 {
        return (0..n).map(f).collect();
    }
    let chunk = n.div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                let f = &f;
                s.spawn(move || (t * chunk..((t + 1) * chunk).min(n)).map(f).collect::<Vec<_>>())
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

/// Ray groups for every scene of a batch, one stream per batch slot.
pub fn batch_rays<T: Real>(
    model: &Model<T>,
    batch: &[&SceneInputs<T>],
    spec: &RaySpec,
    rng: &mut SeededRng,
) -> Result<Vec<RayQueries<T>>> {
    let base = rng.next_u64();
    batch
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut r = SeededRng::with_stream(base, i as u64);
            let (groups, _) = build_all(&s.rig, &s.boxes, spec, &mut r)?;
            Ok(model.ray_queries(groups))
        })
        .collect()
}

/// One optimizer step over `batch`. With `spec`, ray groups are sampled
/// from `rng` and the denoising loss is added; without it `rng` is unused.
pub fn train_step<T: Real>(
    model: &mut Model<T>,
    opt: &mut AdamW<T>,
    batch: &[&SceneInputs<T>],
    spec: Option<&RaySpec>,
    rng: &mut SeededRng,
    cfg: &TrainConfig,
) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(Error::domain("training batch is empty"));
    }
    let rays = match spec {
        Some(s) => Some(batch_rays(model, batch, s, rng)?),
        None => None,
    };
    let m: &Model<T> = model;
    let results = run_parallel(batch.len(), cfg.threads, |i| {
        scene_gradients(m, batch[i], rays.as_ref().map(|r| &r[i]), &cfg.loss)
    });
    let inv = T::lit(1.0 / batch.len() as f64);
    let mut grads: Vec<Tensor<T>> = model.params().iter().map(|p| Tensor::zeros(p.rows, p.cols)).collect();
    let mut stats = StepStats::default();
    for r in results {
        let (loss, g) = r?;
        stats.total += loss.total / batch.len() as f64;
        stats.matching += loss.matching / batch.len() as f64;
        stats.denoising += loss.denoising / batch.len() as f64;
        for (acc, gi) in grads.iter_mut().zip(&g) {
            for (a, &x) in acc.data.iter_mut().zip(&gi.data) {
                *a += x * inv;
            }
        }
    }
    let norm = grads.iter().flat_map(|g| &g.data).fold(0.0, |s, &x| s + x.as_f64() * x.as_f64()).sqrt();
    if !norm.is_finite() {
        return Err(Error::NonFinite(format!("gradient norm {norm}")));
    }
    stats.grad_norm = norm;
    if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
        let s = T::lit(cfg.grad_clip / norm);
        grads.iter_mut().for_each(|g| g.data.iter_mut().for_each(|x| *x *= s));
    }
    opt.step(model.params_mut(), &grads);
    Ok(stats)
}

/// Train for `cfg.steps` steps on shuffled mini-batches. Batch order
/// depends only on `seed`, so runs with and without ray denoising see the
/// same scenes in the same order.
pub fn train<T: Real>(
    model: &mut Model<T>,
    scenes: &[SceneInputs<T>],
    spec: Option<&RaySpec>,
    cfg: &TrainConfig,
    seed: u64,
    mut on_step: impl FnMut(usize, &StepStats),
) -> Result<Vec<StepStats>> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::domain("no training scenes"));
    }
    let root = SeededRng::new(seed);
    let mut order_rng = root.derive(BATCH_STREAM);
    let mut ray_rng = root.derive(RAY_STREAM);
    let mut aug_rng = root.derive(AUGMENT_STREAM);
    let symmetric: Vec<bool> = scenes.iter().map(|s| cfg.rotation_augment && s.rig_symmetric_under(1)).collect();
    let mut opt = AdamW::new(model, cfg.lr, cfg.weight_decay);
    let mut order: Vec<usize> = Vec::new();
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(scenes.len()) {
            if order.is_empty() {
                order = (0..scenes.len()).collect();
                for i in (1..order.len()).rev() {
                    order.swap(i, order_rng.below(i as u64 + 1) as usize);
                }
            }
            let idx = order.pop().expect("nonempty");
            let turned = if cfg.rotation_augment {
                let k = aug_rng.below(scenes[idx].rig.len() as u64) as usize;
                symmetric[idx].then(|| scenes[idx].rotated(k)).transpose()?
            } else {
                None
            };
            batch.push(turned.map_or(Cow::Borrowed(&scenes[idx]), Cow::Owned));
        }
        let refs: Vec<&SceneInputs<T>> = batch.iter().map(|c| c.as_ref()).collect();
        let stats = train_step(model, &mut opt, &refs, spec, &mut ray_rng, cfg)?;
        on_step(step, &stats);
        log.push(stats);
    }
    Ok(log)
}

/// Central difference of `f` at `x`.
pub fn finite_difference(mut f: impl FnMut(f64) -> f64, x: f64, eps: f64) -> f64 {
    (f(x + eps) - f(x - eps)) / (2.0 * eps)
}

/// Relative error with a floor on the denominator.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR)
}

/// Denominator floor for [`relative_error`].
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;
/// Coordinates checked per parameter tensor.
pub const GRAD_CHECK_SAMPLES: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: (String, usize),
    pub checked: usize,
}

/// Compare tape gradients of the scene loss with central differences on up
/// to 200 coordinates of every parameter tensor. The matching and the
/// detached query positions are held at their unperturbed values. A
/// coordinate whose difference straddles an `|x|` kink is retried with
/// smaller steps; the smallest error is kept.
pub fn gradient_check(
    model: &Model<f64>,
    inputs: &SceneInputs<f64>,
    rays: Option<&RayQueries<f64>>,
    epsilon: f64,
    seed: u64,
) -> Result<GradCheck> {
    if !(1e-6..=1e-3).contains(&epsilon) {
        return Err(Error::domain(format!("epsilon {epsilon} outside [1e-6, 1e-3]")));
    }
    let cfg = LossConfig::default();
    let mut tape = Tape::new();
    let (_, _, loss) = scene_loss(model, &mut tape, inputs, rays, None, &cfg)?;
    let frozen = Frozen { obj_pos: model.object_positions(), gt_for_query: loss.gt_for_query };

    let mut tape = Tape::new();
    let (total, out, _) = scene_loss(model, &mut tape, inputs, rays, Some(&frozen), &cfg)?;
    let grads = tape.backward(total);

    let eval = |m: &Model<f64>| -> f64 {
        let mut t = Tape::new();
        scene_loss(m, &mut t, inputs, rays, Some(&frozen), &cfg).map(|(_, _, l)| l.total).unwrap_or(f64::NAN)
    };
    let mut probe = model.clone();
    let mut rng = SeededRng::new(seed);
    let mut report = GradCheck { max_rel_error: 0.0, worst: (String::new(), 0), checked: 0 };
    for (pi, &var) in out.params.iter().enumerate() {
        let shape = model.params()[pi].shape();
        let analytic = grads.get_or_zeros(var, shape);
        let n = analytic.len();
        let mut idx: Vec<usize> = (0..n).collect();
        let take = n.min(GRAD_CHECK_SAMPLES);
        for i in 0..take {
            let j = i + rng.below((n - i) as u64) as usize;
            idx.swap(i, j);
        }
        for &k in &idx[..take] {
            let x0 = model.params()[pi].data[k];
            let a = analytic.data[k];
            let mut best = f64::INFINITY;
            // Smaller steps resolve kinks, larger ones suppress roundoff on flat coordinates.
            for eps in [epsilon, epsilon / 10.0, (epsilon * 10.0).min(1e-3), (epsilon / 100.0).max(1e-7)] {
                let num = finite_difference(
                    |x| {
                        probe.params_mut()[pi].data[k] = x;
                        eval(&probe)
                    },
                    x0,
                    eps,
                );
                probe.params_mut()[pi].data[k] = x0;
                best = best.min(relative_error(a, num));
                if best < 1e-6 {
                    break;
                }
            }
            report.checked += 1;
            if best > report.max_rel_error || best.is_nan() {
                report.max_rel_error = if best.is_nan() { f64::INFINITY } else { best };
                report.worst = (model.param_names()[pi].clone(), k);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenes::{make_rig, sample_scene, PerceptionRange, RigSpec};
    use crate::toynet::model::DecoderConfig;

    fn tiny() -> (Model<f64>, Vec<SceneInputs<f64>>) {
        let cfg = DecoderConfig { embed_dim: 8, n_heads: 2, n_layers: 1, n_obj_queries: 6, hidden_dim: 8, ..Default::default() };
        let rig = make_rig(&RigSpec::default()).unwrap();
        let scenes = (0..3)
            .map(|i| {
                let s = sample_scene(&mut SeededRng::new(i), format!("s{i}"), rig.clone(), 3, &PerceptionRange::default(), 3)
                    .unwrap();
                SceneInputs::from_scene(&s, 3, 4, 3).unwrap()
            })
            .collect();
        (Model::new(cfg, 7).unwrap(), scenes)
    }

    #[test]
    fn probe_square() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(3.0f64));
        let y = t.mul(x, x);
        let g = t.backward(y).get(x).unwrap().item();
        let n = finite_difference(|x| x * x, 3.0, 1e-4);
        assert!((g - 6.0).abs() < 1e-12);
        assert!((g - n).abs() < 1e-6);
    }

    #[test]
    fn steps_are_deterministic() {
        let (m0, scenes) = tiny();
        let cfg = TrainConfig { steps: 3, batch_size: 2, ..Default::default() };
        let run = |spec: Option<&RaySpec>| {
            let mut m = m0.clone();
            train(&mut m, &scenes, spec, &cfg, 11, |_, _| {}).unwrap();
            m.params().to_vec()
        };
        assert_eq!(run(None), run(None));
        let spec = RaySpec::default();
        assert_eq!(run(Some(&spec)), run(Some(&spec)));
        assert_ne!(run(None), run(Some(&spec)));
    }

    #[test]
    fn baseline_ignores_rng() {
        let (m0, scenes) = tiny();
        let cfg = TrainConfig::default();
        let batch: Vec<_> = scenes.iter().collect();
        let mut a = m0.clone();
        let mut b = m0.clone();
        let mut oa = AdamW::new(&a, 1e-3, 1e-4);
        let mut ob = AdamW::new(&b, 1e-3, 1e-4);
        let sa = train_step(&mut a, &mut oa, &batch, None, &mut SeededRng::new(1), &cfg).unwrap();
        let sb = train_step(&mut b, &mut ob, &batch, None, &mut SeededRng::new(2), &cfg).unwrap();
        assert_eq!(sa, sb);
        assert_eq!(sa.denoising, 0.0);
        assert_eq!(a.params(), b.params());
    }

    #[test]
    fn parallel_matches_serial() {
        let (m0, scenes) = tiny();
        let spec = RaySpec::default();
        let run = |threads| {
            let mut m = m0.clone();
            let cfg = TrainConfig { steps: 2, batch_size: 3, threads, ..Default::default() };
            train(&mut m, &scenes, Some(&spec), &cfg, 5, |_, _| {}).unwrap();
            m.params().to_vec()
        };
        assert_eq!(run(1), run(3));
    }

    #[test]
    fn empty_batch_rejected() {
        let (mut m, _) = tiny();
        let mut opt = AdamW::new(&m, 1e-3, 0.0);
        let r = train_step(&mut m, &mut opt, &[], None, &mut SeededRng::new(0), &TrainConfig::default());
        assert!(r.is_err());
    }

    #[test]
    fn gradient_check_small_model() {
        let (m, scenes) = tiny();
        let rays = batch_rays(&m, &[&scenes[0]], &RaySpec::default(), &mut SeededRng::new(3)).unwrap();
        let r = gradient_check(&m, &scenes[0], Some(&rays[0]), 1e-4, 1).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
        assert!(gradient_check(&m, &scenes[0], None, 1e-2, 1).is_err());
    }
}
