use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use raydn::beta::{beta_pdf, sample_beta, BetaParams};
use raydn::bench::detections;
use raydn::config::RunConfig;
use raydn::eval::{emit_report, evaluate, svg_plot_in, DetectionsFile, EvalScene, PlotBounds, DETECTIONS_SCHEMA};
use raydn::raydn::{build_all, BuildDiagnostics};
use raydn::rng::SeededRng;
use raydn::scenes::{make_rig, sample_benchmark_scene, Scene};
use raydn::toynet::{io, train, Model, SceneInputs, StepStats};
use raydn::{Error, RayGroup};
use serde::Serialize;

use crate::{plot, Cli, Command};

pub const QUERIES_SCHEMA: &str = "raydn-queries/1";
const THREADS_ENV: &str = "RAYDN_THREADS";
const HISTOGRAM_BINS: usize = 40;

/// A failed command: message plus process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn input(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::NonFinite(_) => 3,
            Error::Compat(_) => 4,
            _ => 2,
        };
        Self { code, message: e.to_string() }
    }
}

type CmdResult<T = ()> = Result<T, Failure>;

pub fn run(cli: Cli) -> CmdResult {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Command::Eval { score_floor: Some(f), .. } = cli.command {
        cfg.score_floor = f;
    }
    if let Ok(v) = std::env::var(THREADS_ENV) {
        cfg.train.threads =
            v.parse().ok().filter(|&n: &usize| n >= 1).ok_or_else(|| Failure::input(format!("{THREADS_ENV}={v:?} is not a positive integer")))?;
    }
    cfg.validate()?;
    let force = cli.force;
    match cli.command {
        Command::GenScenes { count, out } => gen_scenes(&cfg, count, &out.unwrap_or_else(|| cfg.paths.scenes.clone()), force),
        Command::BuildQueries { scenes, out } => {
            build_queries(&cfg, &scenes.unwrap_or_else(|| cfg.paths.scenes.clone()), &out, force)
        }
        Command::Train { scenes, with_beam, out } => train_cmd(
            &cfg,
            &scenes.unwrap_or_else(|| cfg.paths.scenes.clone()),
            with_beam,
            &out.unwrap_or_else(|| cfg.paths.run.clone()),
            force,
        ),
        Command::Eval { model, scenes, out, .. } => eval_cmd(
            &cfg,
            &model.unwrap_or_else(|| cfg.paths.run.join("model.bin")),
            &scenes.unwrap_or_else(|| cfg.paths.scenes.clone()),
            &out.unwrap_or_else(|| cfg.paths.report.clone()),
            force,
        ),
        Command::BetaSample { lambda, mu, n, svg, out } => {
            let p = BetaParams::new(lambda.unwrap_or(cfg.rays.params.lambda), mu.unwrap_or(cfg.rays.params.mu))?;
            beta_sample(p, n, cfg.seed, svg, &out, force)
        }
        Command::Plot { inputs, out } => plot::run(&inputs, &out, force),
    }
}

/// Refuse to clobber any of `files` unless forced; create `dir`.
pub fn prepare_outputs(dir: &Path, files: &[&str], force: bool) -> CmdResult {
    if !force {
        if let Some(f) = files.iter().map(|f| dir.join(f)).find(|p| p.exists()) {
            return Err(Failure::input(format!("{} exists; pass --force to overwrite", f.display())));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(())
}

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CmdResult {
    fs::write(path, contents).map_err(|e| Error::io(path, e).into())
}

fn scene_file_name(i: usize) -> String {
    format!("scene-{i:05}.json")
}

fn gen_scenes(cfg: &RunConfig, count: usize, out: &Path, force: bool) -> CmdResult {
    if !force && out.is_dir() && fs::read_dir(out).map_err(|e| Error::io(out, e))?.next().is_some() {
        return Err(Failure::input(format!("{} is not empty; pass --force to overwrite", out.display())));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let rig = make_rig(&cfg.rig)?;
    let root = SeededRng::new(cfg.seed);
    for i in 0..count {
        // One stream per scene index, so a scene does not depend on `count`.
        let mut rng = root.derive(i as u64);
        let pair = rng.uniform() < cfg.scene.colinear_fraction;
        let scene = sample_benchmark_scene(&mut rng, format!("scene-{i:05}"), &rig, &cfg.scene, pair)?;
        write_file(&out.join(scene_file_name(i)), scene.to_json())?;
    }
    println!("wrote {count} scenes to {}", out.display());
    Ok(())
}

/// Every `*.json` scene file in `dir`, in file-name order.
pub fn load_scenes(dir: &Path) -> CmdResult<Vec<Scene>> {
    if !dir.is_dir() {
        return Err(Failure::input(format!("scene directory {} does not exist", dir.display())));
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Failure::input(format!("no scene files in {}", dir.display())));
    }
    paths
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            Scene::from_json(&text).map_err(|e| {
                let mut f = Failure::from(e);
                f.message = format!("{}: {}", p.display(), f.message);
                f
            })
        })
        .collect()
}

#[derive(Serialize)]
struct SceneQueries<'a> {
    scene_id: &'a str,
    diagnostics: BuildDiagnostics,
    groups: Vec<RayGroup>,
}

#[derive(Serialize)]
struct QueriesFile<'a> {
    schema: &'static str,
    seed: u64,
    spec: raydn::raydn::RaySpec,
    scenes: Vec<SceneQueries<'a>>,
}

fn build_queries(cfg: &RunConfig, scenes_dir: &Path, out: &Path, force: bool) -> CmdResult {
    let scenes = load_scenes(scenes_dir)?;
    if !force && out.exists() {
        return Err(Failure::input(format!("{} exists; pass --force to overwrite", out.display())));
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let root = SeededRng::new(cfg.seed);
    let mut entries = Vec::with_capacity(scenes.len());
    for (i, s) in scenes.iter().enumerate() {
        let mut rng = root.derive(i as u64);
        let (groups, diagnostics) = build_all(&s.rig, &s.boxes, &cfg.rays, &mut rng)?;
        entries.push(SceneQueries { scene_id: &s.scene_id, diagnostics, groups });
    }
    let n_groups: usize = entries.iter().map(|e| e.groups.len()).sum();
    let file = QueriesFile { schema: QUERIES_SCHEMA, seed: cfg.seed, spec: cfg.rays, scenes: entries };
    let json = serde_json::to_string_pretty(&file).expect("queries serialize") + "\n";
    write_file(out, json)?;
    println!("wrote {n_groups} ray groups for {} scenes to {}", scenes.len(), out.display());
    Ok(())
}

fn inputs_for(cfg: &RunConfig, scenes: &[Scene]) -> CmdResult<Vec<SceneInputs<f64>>> {
    scenes
        .iter()
        .map(|s| SceneInputs::from_scene(s, cfg.decoder.n_classes, cfg.grid_w, cfg.grid_h).map_err(Failure::from))
        .collect()
}

pub fn loss_csv(stats: &[StepStats]) -> String {
    let mut s = String::from("step,total,matching,denoising\n");
    for (i, st) in stats.iter().enumerate() {
        let _ = writeln!(s, "{i},{},{},{}", st.total, st.matching, st.denoising);
    }
    s
}

#[derive(Serialize)]
struct Diagnostic<'a> {
    error: String,
    failed_step: usize,
    last_stats: Option<StepStats>,
    with_beam: bool,
    config: &'a RunConfig,
}

fn train_cmd(cfg: &RunConfig, scenes_dir: &Path, with_beam: bool, out: &Path, force: bool) -> CmdResult {
    let scenes = load_scenes(scenes_dir)?;
    let inputs = inputs_for(cfg, &scenes)?;
    prepare_outputs(out, &["model.bin", "losses.csv"], force)?;
    let mut model = Model::<f64>::new(cfg.decoder, cfg.seed)?;
    let spec = with_beam.then_some(&cfg.rays);
    let mut log = Vec::with_capacity(cfg.train.steps);
    let result = train(&mut model, &inputs, spec, &cfg.train, cfg.seed, |_, st| log.push(*st));
    write_file(&out.join("losses.csv"), loss_csv(&log))?;
    match result {
        Ok(_) => {
            io::save(&model, &out.join("model.bin"))?;
            let last = log.last().map_or(f64::NAN, |s| s.total);
            println!("trained {} steps (final loss {last:.4}); model in {}", log.len(), out.display());
            Ok(())
        }
        Err(e @ Error::NonFinite(_)) => {
            let path = out.join("diagnostic.json");
            let diag = Diagnostic {
                error: e.to_string(),
                failed_step: log.len(),
                last_stats: log.last().copied(),
                with_beam,
                config: cfg,
            };
            write_file(&path, serde_json::to_string_pretty(&diag).expect("diagnostic serializes") + "\n")?;
            Err(Failure { code: 3, message: format!("{e} at step {}; diagnostics in {}", log.len(), path.display()) })
        }
        Err(e) => Err(e.into()),
    }
}

fn eval_cmd(cfg: &RunConfig, model_path: &Path, scenes_dir: &Path, out: &Path, force: bool) -> CmdResult {
    let model = io::load::<f64>(model_path, cfg.decoder)?;
    let scenes = load_scenes(scenes_dir)?;
    let inputs = inputs_for(cfg, &scenes)?;
    prepare_outputs(
        out,
        &["detections.json", "metrics.csv", "summary.csv", "pr_curves.csv", "pr_curves.svg"],
        force,
    )?;
    let dets = detections(&model, &inputs, cfg.score_floor)?;
    let views: Vec<EvalScene<'_>> =
        scenes.iter().map(|s| EvalScene { scene_id: &s.scene_id, boxes: &s.boxes, rig: &s.rig }).collect();
    let classes: Vec<u32> = (0..cfg.decoder.n_classes).collect();
    let report = evaluate(&dets, &views, &classes, &cfg.eval)?;
    let file = DetectionsFile { schema: DETECTIONS_SCHEMA.to_string(), detections: dets };
    write_file(&out.join("detections.json"), serde_json::to_string_pretty(&file).expect("detections serialize") + "\n")?;
    emit_report(&report, out)?;
    println!(
        "{} detections on {} scenes: mAP {:.4}, ray duplicate rate {:.4}",
        file.detections.len(),
        scenes.len(),
        report.map,
        report.ray_duplicate_rate
    );
    Ok(())
}

/// Density-normalized histogram of `values` over `[lo, hi]` as a step curve.
pub fn histogram_steps(values: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<(f64, f64)> {
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &v in values {
        let b = ((v - lo) / width).floor();
        if b >= 0.0 && (b as usize) < bins {
            counts[b as usize] += 1;
        }
    }
    let norm = 1.0 / (values.len().max(1) as f64 * width);
    let mut pts = vec![(lo, 0.0)];
    for (i, c) in counts.iter().enumerate() {
        let y = *c as f64 * norm;
        pts.push((lo + i as f64 * width, y));
        pts.push((lo + (i + 1) as f64 * width, y));
    }
    pts.push((hi, 0.0));
    pts
}

/// Density of the shifted offset `2x - 1` on `(-1, 1)`.
pub fn offset_density(p: &BetaParams, points: usize) -> CmdResult<Vec<(f64, f64)>> {
    (1..points)
        .map(|i| {
            let o = -1.0 + 2.0 * i as f64 / points as f64;
            Ok((o, 0.5 * beta_pdf(0.5 * (o + 1.0), p)?))
        })
        .collect()
}

pub fn offset_plot(p: &BetaParams, offsets: &[f64]) -> CmdResult<String> {
    let series = vec![
        ("samples".to_string(), histogram_steps(offsets, -1.0, 1.0, HISTOGRAM_BINS)),
        (format!("pdf ({}, {})", p.lambda, p.mu), offset_density(p, 200)?),
    ];
    let mut bounds = PlotBounds::fit(&series);
    bounds.x = (-1.0, 1.0);
    bounds.y.0 = 0.0;
    Ok(svg_plot_in("Shifted Beta offsets", "offset", "density", bounds, &series))
}

fn beta_sample(p: BetaParams, n: usize, seed: u64, svg: bool, out: &Path, force: bool) -> CmdResult {
    let files: &[&str] = if svg { &["samples.csv", "pdf.svg"] } else { &["samples.csv"] };
    prepare_outputs(out, files, force)?;
    let mut rng = SeededRng::new(seed);
    let xs = sample_beta(&mut rng, &p, n)?;
    let mut csv = String::from("index,x,offset\n");
    for (i, x) in xs.iter().enumerate() {
        let _ = writeln!(csv, "{i},{x},{}", 2.0 * x - 1.0);
    }
    write_file(&out.join("samples.csv"), csv)?;
    if svg {
        let offsets: Vec<f64> = xs.iter().map(|x| 2.0 * x - 1.0).collect();
        write_file(&out.join("pdf.svg"), offset_plot(&p, &offsets)?)?;
    }
    println!("wrote {n} Beta({}, {}) draws to {}", p.lambda, p.mu, out.display());
    Ok(())
}
