//! Seed-pinned synthetic benchmark: paired baseline and ray-denoising runs.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::config::RunConfig;
use crate::eval::{evaluate, Detection, EvalReport, EvalScene};
use crate::raydn::RaySpec;
use crate::rng::SeededRng;
use crate::scalar::Real;
use crate::scenes::{has_colinear_pair, make_rig, sample_benchmark_scene, Scene};
use crate::toynet::{train, Model, SceneInputs, StepStats};

/// Training steps per benchmark run.
pub const BENCHMARK_STEPS: usize = 1500;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub data_seed: u64,
    pub n_train: usize,
    pub n_eval: usize,
    pub run: RunConfig,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        let mut run = RunConfig::default();
        run.train.steps = BENCHMARK_STEPS;
        Self { data_seed: 2024, n_train: 256, n_eval: 64, run }
    }
}

#[derive(Clone, Debug)]
pub struct Benchmark {
    pub train: Vec<Scene>,
    pub eval: Vec<Scene>,
}

impl Benchmark {
    /// Training and evaluation scenes from independent streams of `data_seed`.
    pub fn generate(cfg: &BenchmarkConfig) -> Result<Self> {
        let rig = make_rig(&cfg.run.rig)?;
        let root = SeededRng::new(cfg.data_seed);
        let split = |key: u64, n: usize, prefix: &str| -> Result<Vec<Scene>> {
            let mut rng = root.derive(key);
            (0..n)
                .map(|i| {
                    let pair = rng.uniform() < cfg.run.scene.colinear_fraction;
                    sample_benchmark_scene(&mut rng, format!("{prefix}-{i:04}"), &rig, &cfg.run.scene, pair)
                })
                .collect()
        };
        Ok(Self { train: split(1, cfg.n_train, "train")?, eval: split(2, cfg.n_eval, "eval")? })
    }

    /// Fraction of all scenes holding a depth-compensated colinear pair.
    pub fn colinear_fraction(&self) -> f64 {
        let all: Vec<&Scene> = self.train.iter().chain(&self.eval).collect();
        if all.is_empty() {
            return 0.0;
        }
        all.iter().filter(|s| has_colinear_pair(s, 1e-6)).count() as f64 / all.len() as f64
    }
}

pub fn prepare<T: Real>(scenes: &[Scene], cfg: &RunConfig) -> Result<Vec<SceneInputs<T>>> {
    scenes.iter().map(|s| SceneInputs::from_scene(s, cfg.decoder.n_classes, cfg.grid_w, cfg.grid_h)).collect()
}

pub fn detections<T: Real>(model: &Model<T>, scenes: &[SceneInputs<T>], score_floor: f64) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for s in scenes {
        for p in model.detect(s, score_floor)? {
            out.push(Detection {
                scene_id: s.scene_id.clone(),
                class_id: p.class_id,
                center: p.bbox.center,
                size: p.bbox.size,
                yaw: p.bbox.yaw,
                score: p.score,
            });
        }
    }
    Ok(out)
}

pub fn evaluate_scenes(dets: &[Detection], scenes: &[Scene], cfg: &RunConfig) -> Result<EvalReport> {
    let views: Vec<EvalScene<'_>> =
        scenes.iter().map(|s| EvalScene { scene_id: &s.scene_id, boxes: &s.boxes, rig: &s.rig }).collect();
    let classes: Vec<u32> = (0..cfg.decoder.n_classes).collect();
    evaluate(dets, &views, &classes, &cfg.eval)
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub report: EvalReport,
    pub losses: Vec<StepStats>,
}

/// Train one model from `seed` and evaluate it on the held-out scenes.
pub fn run<T: Real>(
    bench: &Benchmark,
    train_inputs: &[SceneInputs<T>],
    eval_inputs: &[SceneInputs<T>],
    cfg: &RunConfig,
    spec: Option<&RaySpec>,
    seed: u64,
) -> Result<RunResult> {
    let mut model = Model::<T>::new(cfg.decoder, seed)?;
    let losses = train(&mut model, train_inputs, spec, &cfg.train, seed, |_, _| {})?;
    let dets = detections(&model, eval_inputs, cfg.score_floor)?;
    let report = evaluate_scenes(&dets, &bench.eval, cfg)?;
    Ok(RunResult { report, losses })
}
