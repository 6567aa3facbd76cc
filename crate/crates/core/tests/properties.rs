use proptest::prelude::*;

use raydn::beta::{beta_cdf, sample_offsets, BetaParams};
use raydn::config::RunConfig;
use raydn::eval::{average_precision, evaluate, greedy_match, ray_duplicate_rate, Detection, EvalConfig, EvalScene};
use raydn::geometry::{FrustumCoord, Mat4, Vec3};
use raydn::masking::build_attention_mask;
use raydn::raydn::{build_ray_group, scale_extent, QueryLabel, RaySpec};
use raydn::rng::SeededRng;
use raydn::scenes::{make_rig, RigSpec};
use raydn::toynet::hungarian_match;
use raydn::toynet::model::decode_box;
use raydn::{Box3, Camera, Vec3f};

fn camera(yaw: f64, pitch: f64, center: [f64; 3], f: f64) -> Camera {
    let (sy, cy) = yaw.sin_cos();
    let (sp, cp) = pitch.sin_cos();
    let forward = Vec3::new(cp * cy, cp * sy, sp);
    let right = Vec3::new(sy, -cy, 0.0);
    let down = forward.cross(right);
    Camera::from_pose(f, f, 320.0, 240.0, [right, down, forward], Vec3::from_array(center), 640, 480).unwrap()
}

fn arb_camera() -> impl Strategy<Value = Camera> {
    (-3.1f64..3.1, -0.5f64..0.5, prop::array::uniform3(-5.0f64..5.0), 100.0f64..1000.0)
        .prop_map(|(y, p, c, f)| camera(y, p, c, f))
}

/// A point at frustum coordinates `(u, v, d)` of `cam`.
fn point_in_front(cam: &Camera, u: f64, v: f64, d: f64) -> Vec3f {
    cam.unproject(FrustumCoord { u, v, d }).unwrap()
}

fn det(scene: &str, class_id: u32, x: f64, y: f64, score: f64) -> Detection {
    Detection { scene_id: scene.into(), class_id, center: Vec3::new(x, y, 0.5), size: [1.0; 3], yaw: 0.0, score }
}

fn gt(class_id: u32, x: f64, y: f64) -> Box3 {
    Box3 { center: Vec3::new(x, y, 0.5), size: [1.0; 3], yaw: 0.0, class_id }
}

/// AP straight from the definition: at every recall level of the grid, the
/// best precision over all score cutoffs reaching that recall.
fn brute_ap(matches: &[(f64, bool)], n_gt: usize, points: usize) -> f64 {
    let mut cutoffs: Vec<f64> = matches.iter().map(|m| m.0).collect();
    cutoffs.sort_by(|a, b| b.total_cmp(a));
    cutoffs.dedup();
    let pr: Vec<(f64, f64)> = cutoffs
        .iter()
        .map(|&c| {
            let kept: Vec<_> = matches.iter().filter(|m| m.0 >= c).collect();
            let tp = kept.iter().filter(|m| m.1).count() as f64;
            (tp / n_gt as f64, tp / kept.len() as f64)
        })
        .collect();
    (0..points)
        .map(|k| {
            let r = k as f64 / (points - 1) as f64;
            pr.iter().filter(|p| p.0 >= r - 1e-12).map(|p| p.1).fold(0.0, f64::max)
        })
        .sum::<f64>()
        / points as f64
}

fn brute_min_cost(cost: &[Vec<f64>]) -> f64 {
    fn go(cost: &[Vec<f64>], g: usize, used: &mut Vec<bool>) -> f64 {
        if g == cost[0].len() {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        for q in 0..cost.len() {
            if !used[q] {
                used[q] = true;
                best = best.min(cost[q][g] + go(cost, g + 1, used));
                used[q] = false;
            }
        }
        best
    }
    go(cost, 0, &mut vec![false; cost.len()])
}

fn rotate(p: Vec3f, a: f64) -> Vec3f {
    let (s, c) = a.sin_cos();
    Vec3::new(c * p.x - s * p.y, s * p.x + c * p.y, p.z)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn project_unproject_round_trip(cam in arb_camera(), u in 0.0f64..640.0, v in 0.0f64..480.0, d in 0.5f64..60.0) {
        let p = point_in_front(&cam, u, v, d);
        let back = cam.unproject(cam.project(p).unwrap()).unwrap();
        prop_assert!(back.distance(p) < 1e-9);
        let ray = cam.ray_through(p).unwrap();
        prop_assert!(ray.distance_to_line(p) < 1e-9);
        prop_assert!((ray.direction.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn projection_ignores_homogeneous_scale(cam in arb_camera(), s in 0.01f64..100.0, u in 0.0f64..640.0, v in 0.0f64..480.0, d in 0.5f64..60.0) {
        let p = point_in_front(&cam, u, v, d);
        let k = cam.world_to_frustum();
        let scaled = Camera::new(Mat4::from_rows(std::array::from_fn(|i| k.at(i / 4, i % 4) * s)), 640, 480).unwrap();
        let (a, b) = (cam.project(p).unwrap(), scaled.project(p).unwrap());
        prop_assert!((a.u - b.u).abs() < 1e-9 && (a.v - b.v).abs() < 1e-9 && (a.d - b.d).abs() < 1e-9);
        if cam.visible(p) {
            prop_assert!(a.d > 0.0);
        }
    }

    #[test]
    fn beta_cdf_is_monotone(lambda in 0.5f64..10.0, mu in 0.5f64..10.0) {
        let p = BetaParams::new(lambda, mu).unwrap();
        let mut prev = 0.0;
        for i in 0..=1000 {
            let c = beta_cdf(i as f64 / 1000.0, &p).unwrap();
            prop_assert!(c >= prev - 1e-15 && (0.0..=1.0).contains(&c));
            prev = c;
        }
    }

    #[test]
    fn offsets_lie_in_unit_interval(lambda in 0.2f64..10.0, mu in 0.2f64..10.0, seed in any::<u64>()) {
        let p = BetaParams::new(lambda, mu).unwrap();
        let xs = sample_offsets(&mut SeededRng::new(seed), &p, 64).unwrap();
        prop_assert!(xs.iter().all(|x| (-1.0..=1.0).contains(x)));
        prop_assert_eq!(xs, sample_offsets(&mut SeededRng::new(seed), &p, 64).unwrap());
    }

    #[test]
    fn ray_group_contract(
        cam in arb_camera(),
        (u, v, d) in (20.0f64..620.0, 20.0f64..460.0, 2.0f64..40.0),
        size in prop::array::uniform3(0.3f64..6.0),
        k in 0.5f64..5.0,
        n in 2usize..9,
        seed in any::<u64>(),
    ) {
        let b = Box3 { center: point_in_front(&cam, u, v, d), size, yaw: 0.0, class_id: 0 };
        let spec = RaySpec { radius_k: k, n_per_ray: n, ..RaySpec::default() };
        let g = build_ray_group(&cam, 0, 0, &b, &spec, &mut SeededRng::new(seed)).unwrap();
        let ray = cam.ray_through(b.center).unwrap();
        let extent = scale_extent(&b, k).unwrap();
        let depth = cam.project(b.center).unwrap().d;
        prop_assert_eq!(g.labels.iter().filter(|l| **l == QueryLabel::Positive).count(), 1);
        let best = g.ref_points.iter().map(|p| p.distance(b.center)).fold(f64::INFINITY, f64::min);
        prop_assert_eq!(g.ref_points[g.positive_index()].distance(b.center), best);
        for (p, &dh) in g.ref_points.iter().zip(&g.depths) {
            prop_assert!(ray.distance_to_line(*p) < 1e-6);
            prop_assert!(dh > 0.0 && dh >= depth - extent && dh <= depth + extent);
        }
        prop_assert_eq!(&g, &build_ray_group(&cam, 0, 0, &b, &spec, &mut SeededRng::new(seed)).unwrap());
    }

    #[test]
    fn mask_follows_the_block_rules(n_obj in 0usize..6, groups in prop::collection::vec(1usize..5, 0..5)) {
        let m = build_attention_mask(n_obj, &groups);
        let n_ray: usize = groups.iter().sum();
        prop_assert_eq!(m.len(), n_ray + n_obj);
        let owner: Vec<Option<usize>> = groups
            .iter()
            .enumerate()
            .flat_map(|(g, &s)| std::iter::repeat(Some(g)).take(s))
            .chain(std::iter::repeat(None).take(n_obj))
            .collect();
        for r in 0..m.len() {
            prop_assert!(!m.is_blocked(r, r));
            for c in 0..m.len() {
                let want = match (owner[r], owner[c]) {
                    (None, None) | (Some(_), None) => false,
                    (None, Some(_)) => true,
                    (Some(a), Some(b)) => a != b,
                };
                prop_assert_eq!(m.is_blocked(r, c), want);
            }
        }
    }

    #[test]
    fn hungarian_matches_brute_force(
        (nq, ng) in (1usize..7).prop_flat_map(|q| (Just(q), 1..=q)),
        seed in any::<u64>(),
    ) {
        let mut rng = SeededRng::new(seed);
        let cost: Vec<Vec<f64>> = (0..nq).map(|_| (0..ng).map(|_| rng.uniform_range(-2.0, 5.0)).collect()).collect();
        let m = hungarian_match(&cost).unwrap();
        prop_assert_eq!(m.pairs.len(), ng);
        let mut gts: Vec<usize> = m.pairs.iter().map(|p| p.1).collect();
        gts.sort_unstable();
        prop_assert_eq!(gts, (0..ng).collect::<Vec<_>>());
        prop_assert!((m.total_cost(&cost) - brute_min_cost(&cost)).abs() < 1e-9);
    }

    #[test]
    fn decoded_sizes_are_positive(raw in prop::array::uniform3(-1e3f64..1e3)) {
        let range = raydn::scenes::PerceptionRange::default();
        let b = decode_box(&[0.5, 0.5, 0.5, raw[0], raw[1], raw[2], 0.0, 1.0], &range, 0);
        prop_assert!(b.size.iter().all(|s| *s > 0.0));
    }

    #[test]
    fn ap_matches_brute_force(
        matches in prop::collection::vec(((0u8..5).prop_map(|s| s as f64 / 4.0), any::<bool>()), 0..7),
        extra_gt in 0usize..3,
    ) {
        let n_gt = matches.iter().filter(|m| m.1).count() + extra_gt;
        prop_assume!(n_gt > 0);
        let ap = average_precision(&matches, n_gt, 101).unwrap();
        prop_assert!((0.0..=1.0).contains(&ap));
        prop_assert!((ap - brute_ap(&matches, n_gt, 101)).abs() < 1e-12);
    }

    #[test]
    fn ap_reacts_to_added_tp_and_fp(
        matches in prop::collection::vec((0.05f64..0.95, any::<bool>()), 0..8),
        extra_gt in 1usize..3,
        fp_score in 0.0f64..1.0,
    ) {
        let n_gt = matches.iter().filter(|m| m.1).count() + extra_gt;
        let ap = average_precision(&matches, n_gt, 101).unwrap();
        let mut with_tp = matches.clone();
        with_tp.push((0.99, true));
        prop_assert!(average_precision(&with_tp, n_gt, 101).unwrap() >= ap - 1e-12);
        let mut with_fp = matches.clone();
        with_fp.push((fp_score, false));
        prop_assert!(average_precision(&with_fp, n_gt, 101).unwrap() <= ap + 1e-12);
    }

    #[test]
    fn ap_grows_with_distance_threshold(seed in any::<u64>()) {
        let mut rng = SeededRng::new(seed);
        let boxes: Vec<Box3> = (0..6).map(|_| gt(rng.below(2) as u32, rng.uniform_range(-10.0, 10.0), rng.uniform_range(-10.0, 10.0))).collect();
        let mut dets = Vec::new();
        for b in &boxes {
            for _ in 0..rng.below(3) {
                let (x, y) = (b.center.x + rng.normal() * 1.5, b.center.y + rng.normal() * 1.5);
                dets.push(det("s", b.class_id, x, y, rng.uniform()));
            }
        }
        for _ in 0..4 {
            dets.push(det("s", rng.below(2) as u32, rng.uniform_range(-10.0, 10.0), rng.uniform_range(-10.0, 10.0), rng.uniform()));
        }
        let cfg = EvalConfig { distance_thresholds: vec![0.25, 0.5, 1.0, 2.0, 4.0, 8.0], ..EvalConfig::default() };
        let scene = EvalScene { scene_id: "s", boxes: &boxes, rig: &[] };
        let r = evaluate(&dets, &[scene], &[0, 1], &cfg).unwrap();
        for row in &r.ap {
            for w in row.windows(2) {
                if let (Some(a), Some(b)) = (w[0], w[1]) {
                    prop_assert!(b >= a - 1e-12, "{:?}", row);
                }
            }
        }
    }

    #[test]
    fn greedy_matching_ignores_input_order(seed in any::<u64>(), shuffle in any::<u64>()) {
        let mut rng = SeededRng::new(seed);
        let boxes: Vec<Box3> = (0..5).map(|_| gt(rng.below(2) as u32, rng.uniform_range(-5.0, 5.0), rng.uniform_range(-5.0, 5.0))).collect();
        // Coarse scores force ties that only the center order can break.
        let dets: Vec<Detection> = (0..7)
            .map(|_| det("s", rng.below(2) as u32, rng.uniform_range(-5.0, 5.0), rng.uniform_range(-5.0, 5.0), rng.below(3) as f64 / 2.0))
            .collect();
        let mut perm: Vec<usize> = (0..dets.len()).collect();
        let mut srng = SeededRng::new(shuffle);
        for i in (1..perm.len()).rev() {
            perm.swap(i, srng.below(i as u64 + 1) as usize);
        }
        let shuffled: Vec<Detection> = perm.iter().map(|&i| dets[i].clone()).collect();
        let a = greedy_match(&dets, &boxes, 2.0);
        let b = greedy_match(&shuffled, &boxes, 2.0);
        for (j, &i) in perm.iter().enumerate() {
            prop_assert_eq!(a.matched[i], b.matched[j]);
        }
        prop_assert_eq!(a.unmatched_gts, b.unmatched_gts);
    }

    #[test]
    fn duplicate_rate_survives_rigid_rotation(seed in any::<u64>(), turn in 1usize..6) {
        let rig = make_rig(&RigSpec::default()).unwrap();
        let mut rng = SeededRng::new(seed);
        let boxes: Vec<Box3> = (0..4).map(|_| {
            let (r, a) = (rng.uniform_range(5.0, 20.0), rng.uniform_range(-3.1, 3.1));
            gt(0, r * a.cos(), r * a.sin())
        }).collect();
        let mut dets = Vec::new();
        for b in &boxes {
            dets.push(det("s", 0, b.center.x + 0.1, b.center.y, 0.9));
            // Same ray from the rig axis, further out.
            let s = rng.uniform_range(1.3, 2.0);
            dets.push(det("s", 0, b.center.x * s, b.center.y * s, 0.4));
        }
        dets.push(det("s", 0, rng.uniform_range(-20.0, 20.0), rng.uniform_range(-20.0, 20.0), 0.3));
        let cfg = EvalConfig { ray_angle_eps: 0.05, ..EvalConfig::default() };
        let before = ray_duplicate_rate(&dets, &[EvalScene { scene_id: "s", boxes: &boxes, rig: &rig }], &cfg);

        let angle = std::f64::consts::PI * turn as f64 / 3.0;
        let boxes_r: Vec<Box3> = boxes.iter().map(|b| Box3 { center: rotate(b.center, angle), ..*b }).collect();
        let dets_r: Vec<Detection> = dets.iter().map(|d| Detection { center: rotate(d.center, angle), ..d.clone() }).collect();
        let after = ray_duplicate_rate(&dets_r, &[EvalScene { scene_id: "s", boxes: &boxes_r, rig: &rig }], &cfg);
        prop_assert_eq!(before, after);
    }
}

#[test]
fn config_round_trips_through_toml() {
    let mut cfg = RunConfig::default();
    cfg.seed = 17;
    cfg.rays.params = BetaParams::new(5.0, 5.0).unwrap();
    cfg.eval.distance_thresholds = vec![1.0, 3.0];
    cfg.train.steps = 42;
    let text = cfg.to_toml();
    assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
}
