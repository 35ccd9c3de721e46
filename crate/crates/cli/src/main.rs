//! `bevsplat` command-line workflows.
//!
//! Exit codes: 0 success, 1 numeric or assertion failure, 2 usage or input
//! error. `--threads` caps the worker pool; `BEVSPLAT_THREADS` is the
//! fallback.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use bevsplat_core::baselines::{direct_project, ipm_project};
use bevsplat_core::config::Config;
use bevsplat_core::geometry::BevGridSpec;
use bevsplat_core::linalg::Sym2;
use bevsplat_core::losses::LossConfig;
use bevsplat_core::maps::FeatureMap;
use bevsplat_core::matching::{peak, similarity_map, weight_features};
use bevsplat_core::objective::{gradient_check, random_gradcheck_query};
use bevsplat_core::primitives::{generate_primitives, GroundView, PrimitiveSet, RawAttributes};
use bevsplat_core::renderer::{project_set, render_forward, render_reference, BevOutput, RenderSettings, Splat2D};
use bevsplat_core::synth::{evaluate_localization, make_scene, optimize_primitives, weight_ground, Pipeline, PipelineConfig, Scene, SceneSpec};
use bevsplat_core::tensor_io::{self, TensorContainer};
use bevsplat_core::Error;
use clap::{Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

#[derive(Parser)]
#[command(name = "bevsplat", version, about = "Feature-Gaussian BEV splatting and satellite matching")]
struct Cli {
    /// Worker threads (default: BEVSPLAT_THREADS, then all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Splat a primitive table into BEV maps.
    Render {
        #[arg(long)]
        primitives: PathBuf,
        /// JSON config holding at least `grid`.
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Feature dimension used when the primitive file is empty.
        #[arg(long, default_value_t = 1)]
        dim: usize,
        /// Also write c_bev.ppm.
        #[arg(long)]
        ppm: bool,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        splats: usize,
        #[arg(long, default_value_t = 4)]
        dim: usize,
        #[arg(long, default_value_t = 1e-3)]
        step: f64,
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
    },
    /// Localize one ground query against a satellite map.
    Localize {
        #[arg(long)]
        sat: PathBuf,
        /// Directory with depth.bvt, features.bvt, confidence.bvt and optionally raw.bvt.
        #[arg(long)]
        ground_dir: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `search_range` (metres).
        #[arg(long)]
        search_range: Option<f64>,
        /// Writes the similarity map here, with a JSON sidecar next to it.
        #[arg(long)]
        similarity: Option<PathBuf>,
    },
    /// BEV map of a ground query from a non-splatting baseline.
    Baseline {
        #[arg(long, value_enum)]
        method: Method,
        #[arg(long)]
        ground_dir: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Localization over seeded synthetic scenes.
    Synth {
        /// SceneSpec JSON; defaults apply when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        n: usize,
        #[arg(long, value_enum, default_value_t = PipelineArg::Bevsplat)]
        pipeline: PipelineArg,
        #[arg(long)]
        seed: Option<u64>,
        /// Aggregate JSON; per-scene records go to the same path with a .jsonl extension.
        #[arg(long)]
        out: PathBuf,
        /// Writes each scene's maps and a localize config under this directory.
        #[arg(long)]
        emit_dir: Option<PathBuf>,
    },
    /// Gradient descent on the raw attributes of one synthetic scene.
    Optimize {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        steps: usize,
        #[arg(long, default_value_t = 1e-2)]
        lr: f64,
        #[arg(long, default_value_t = 0, value_parser = clap::value_parser!(u8).range(0..=1))]
        lambda1: u8,
        /// GPS window radius in metres.
        #[arg(long)]
        d: Option<f64>,
        #[arg(long)]
        negatives: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tiled renderer throughput and agreement with the reference renderer.
    Bench {
        #[arg(long, default_value_t = 4096)]
        splats: usize,
        #[arg(long, default_value_t = 128)]
        size: usize,
        #[arg(long, default_value_t = 8)]
        dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        /// Skip the reference renderer.
        #[arg(long)]
        no_reference: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Ipm,
    Direct,
}

#[derive(Clone, Copy, ValueEnum)]
enum PipelineArg {
    Bevsplat,
    Ipm,
    Direct,
}

impl From<PipelineArg> for Pipeline {
    fn from(p: PipelineArg) -> Self {
        match p {
            PipelineArg::Bevsplat => Pipeline::Bevsplat,
            PipelineArg::Ipm => Pipeline::Ipm,
            PipelineArg::Direct => Pipeline::Direct,
        }
    }
}

enum Failure {
    Usage(String),
    Numeric(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Io { .. } | Error::Parse { .. } | Error::Config(_) => Failure::Usage(e.to_string()),
            Error::Domain(_) | Error::Divergence { .. } => Failure::Numeric(e.to_string()),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::Usage(format!("{}: {e}", path.display()))
}

fn read_tensor(path: &Path) -> CliResult<TensorContainer> {
    tensor_io::read_file(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn write_tensor(path: &Path, t: &TensorContainer) -> CliResult<()> {
    tensor_io::write_file(path, t).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    Ok(())
}

fn write_map(path: &Path, map: &FeatureMap, scalar: bool) -> CliResult<()> {
    write_tensor(path, &map.to_tensor(scalar)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Numeric(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| io_failure(path, e))
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| io_failure(path, e))
}

fn load_spec(path: Option<&Path>) -> CliResult<SceneSpec> {
    let spec = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| io_failure(p, e))?;
            serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?
        }
        None => SceneSpec::default(),
    };
    spec.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(spec)
}

fn load_config(path: &Path) -> CliResult<Config> {
    Config::load(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

/// An empty file stands for an empty primitive set of dimension `dim`.
fn load_primitives(path: &Path, dim: usize) -> CliResult<PrimitiveSet> {
    let len = fs::metadata(path).map_err(|e| io_failure(path, e))?.len();
    if len == 0 {
        if dim == 0 {
            return Err(Failure::Usage("--dim must be at least 1".into()));
        }
        return Ok(PrimitiveSet::empty(dim));
    }
    Ok(PrimitiveSet::from_tensor(&read_tensor(path)?)?)
}

fn load_view(dir: &Path, cfg: &Config) -> CliResult<(GroundView, Option<RawAttributes>)> {
    let map = |name: &str| -> CliResult<FeatureMap> { Ok(FeatureMap::from_tensor(&read_tensor(&dir.join(name))?)?) };
    let view = GroundView {
        camera: cfg.camera().map_err(|e| Failure::Usage(e.to_string()))?,
        depth: map("depth.bvt")?,
        features: map("features.bvt")?,
        confidence: map("confidence.bvt")?,
    };
    view.validate()?;
    let raw_path = dir.join("raw.bvt");
    let raw = if raw_path.exists() {
        Some(RawAttributes::from_tensor(&read_tensor(&raw_path)?)?)
    } else {
        None
    };
    Ok((view, raw))
}

fn primitives_of(view: &GroundView, raw: Option<RawAttributes>, cfg: &Config) -> CliResult<PrimitiveSet> {
    let raw = raw.unwrap_or_else(|| RawAttributes::zeros(cfg.primitives.n_p, view.height(), view.width()));
    let params = bevsplat_core::primitives::PrimitiveParams {
        n_p: raw.n_p,
        ..cfg.primitives
    };
    Ok(generate_primitives(view, &raw, &params)?)
}

/// Plain-text grayscale image, values in [0,1] mapped to 0..255.
fn write_ppm(path: &Path, map: &FeatureMap) -> CliResult<()> {
    let mut text = format!("P2\n{} {}\n255\n", map.width, map.height);
    for r in 0..map.height {
        let row: Vec<String> = (0..map.width)
            .map(|c| ((map.get(0, r, c).clamp(0.0, 1.0) * 255.0).round() as u8).to_string())
            .collect();
        text.push_str(&row.join(" "));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| io_failure(path, e))
}

fn write_bev(dir: &Path, out: &BevOutput) -> CliResult<()> {
    create_dir(dir)?;
    write_map(&dir.join("f_bev.bvt"), &out.f_bev, false)?;
    write_map(&dir.join("c_bev.bvt"), &out.c_bev, true)?;
    write_map(&dir.join("final_T.bvt"), &out.final_t, true)
}

fn render(primitives: &Path, grid: &Path, out: &Path, dim: usize, ppm: bool) -> CliResult<()> {
    let cfg = load_config(grid)?;
    let grid = cfg.grid_spec()?;
    let set = load_primitives(primitives, dim)?;
    let splats = project_set(&set, &grid)?;
    let bev = render_forward(&splats, &grid, set.dim, &cfg.render);
    write_bev(out, &bev)?;
    if ppm {
        write_ppm(&out.join("c_bev.ppm"), &bev.c_bev)?;
    }
    println!("rendered {} primitives into {}x{} maps with {} channels", set.len(), grid.size, grid.size, set.dim);
    Ok(())
}

fn gradcheck(seed: u64, splats: usize, dim: usize, step: f64, tolerance: f64) -> CliResult<()> {
    let (query, raw) = random_gradcheck_query(seed, splats, dim, RenderSettings::default())?;
    let report = gradient_check(&query, &raw, step, 1e-6)?;
    for c in &report.classes {
        println!("{:<10} checked {:>5} skipped {:>3} max rel error {:.3e}", format!("{:?}", c.class).to_lowercase(), c.checked, c.skipped, c.max_rel_error);
    }
    println!("max relative error {:.3e}", report.max_rel_error);
    if report.checked == 0 {
        return Err(Failure::Numeric("no probe stayed on a smooth branch".into()));
    }
    if !(report.max_rel_error < tolerance) {
        return Err(Failure::Numeric(format!("max relative error {:.3e} exceeds {tolerance:.1e}", report.max_rel_error)));
    }
    Ok(())
}

fn localize(sat: &Path, ground_dir: &Path, config: &Path, out: &Path, search_range: Option<f64>, similarity: Option<&Path>) -> CliResult<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = search_range {
        cfg.search_range = s;
        cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    }
    let grid = cfg.grid_spec()?;
    let satellite = FeatureMap::from_tensor(&read_tensor(sat)?)?;
    let (view, raw) = load_view(ground_dir, &cfg)?;
    let set = primitives_of(&view, raw, &cfg)?;
    let splats = project_set(&set, &grid)?;
    let bev = render_forward(&splats, &grid, set.dim, &cfg.render);
    let weighted = weight_features(&bev.f_bev, &bev.c_bev)?;
    let sim = similarity_map(&satellite, &weighted, cfg.radius_cells(), grid.beta)?;
    let best = peak(&sim);
    if let Some(path) = similarity {
        write_tensor(path, &sim.to_tensor()?)?;
        write_json(&path.with_extension("json"), &sim.sidecar())?;
    }
    write_json(
        out,
        &json!({
            "offset_cells": [best.offset.0, best.offset.1],
            "offset_m": [best.offset_m.0, best.offset_m.1],
            "peak": best.value,
            "radius": sim.radius,
            "beta": sim.beta,
            "primitives": set.len(),
        }),
    )?;
    println!("peak {:.6} at (dz, dx) = ({:.3}, {:.3}) m", best.value, best.offset_m.0, best.offset_m.1);
    Ok(())
}

fn baseline(method: Method, ground_dir: &Path, config: &Path, out: &Path) -> CliResult<()> {
    let cfg = load_config(config)?;
    let grid = cfg.grid_spec()?;
    let (view, raw) = load_view(ground_dir, &cfg)?;
    let masked = match method {
        Method::Ipm => ipm_project(&weight_ground(&view)?, &view.camera, cfg.cam_height, &grid)?,
        Method::Direct => direct_project(&primitives_of(&view, raw, &cfg)?, &grid),
    };
    create_dir(out)?;
    write_map(&out.join("bev.bvt"), &masked.map, false)?;
    write_map(&out.join("mask.bvt"), &masked.mask_map(), true)?;
    println!("{} of {} cells valid", masked.mask.iter().filter(|m| **m).count(), masked.mask.len());
    Ok(())
}

fn emit_scene(dir: &Path, scene: &Scene) -> CliResult<()> {
    create_dir(dir)?;
    write_map(&dir.join("depth.bvt"), &scene.view.depth, true)?;
    write_map(&dir.join("features.bvt"), &scene.view.features, false)?;
    write_map(&dir.join("confidence.bvt"), &scene.view.confidence, true)?;
    write_map(&dir.join("satellite.bvt"), &scene.satellite, false)?;
    let spec = &scene.spec;
    let cfg = Config {
        camera: Some(spec.camera),
        grid: spec.grid_spec()?.into(),
        primitives: Default::default(),
        render: Default::default(),
        loss: LossConfig::default(),
        search_range: spec.search_range,
        cam_height: spec.cam_height,
    };
    write_json(&dir.join("config.json"), &cfg)?;
    write_json(
        &dir.join("truth.json"),
        &json!({"planted_offset_m": [scene.planted_offset.0, scene.planted_offset.1], "seed": spec.seed}),
    )
}

fn synth(spec: Option<&Path>, n: usize, pipeline: PipelineArg, seed: Option<u64>, out: &Path, emit_dir: Option<&Path>) -> CliResult<()> {
    if n == 0 {
        return Err(Failure::Usage("--n must be at least 1".into()));
    }
    let mut spec = load_spec(spec)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let (summary, records) = evaluate_localization(n, pipeline.into(), &spec, &PipelineConfig::default())?;
    if let Some(dir) = emit_dir {
        for i in 0..n as u64 {
            let scene = make_scene(&spec.with_seed(spec.seed + i))?;
            emit_scene(&dir.join(format!("scene_{}", spec.seed + i)), &scene)?;
        }
    }
    let lines = out.with_extension("jsonl");
    let mut file = fs::File::create(&lines).map_err(|e| io_failure(&lines, e))?;
    for r in &records {
        let line = serde_json::to_string(r).map_err(|e| Failure::Numeric(e.to_string()))?;
        writeln!(file, "{line}").map_err(|e| io_failure(&lines, e))?;
    }
    write_json(out, &summary)?;
    println!(
        "{} scenes: mean error {:.3} m, median {:.3} m, recall@1m {:.2}, recall@3m {:.2}",
        summary.n, summary.mean_error_m, summary.median_error_m, summary.recall_1m, summary.recall_3m
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn optimize(spec: Option<&Path>, steps: usize, lr: f64, lambda1: u8, d: Option<f64>, negatives: Option<usize>, seed: Option<u64>, out: &Path) -> CliResult<()> {
    let mut spec = load_spec(spec)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let defaults = LossConfig::default();
    let loss = LossConfig {
        lambda1,
        d: d.unwrap_or(defaults.d),
        negatives: negatives.unwrap_or(defaults.negatives),
        ..defaults
    };
    loss.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    if !(lr.is_finite() && lr >= 0.0) {
        return Err(Failure::Usage(format!("--lr must be a non-negative number, got {lr}")));
    }
    let scene = make_scene(&spec)?;
    let trace = optimize_primitives(&scene, steps, lr, &PipelineConfig::default(), loss)?;
    write_json(out, &trace)?;
    let (first, last) = (trace.losses[0], trace.losses[steps]);
    println!("l_total {first:.6} -> {last:.6} over {steps} steps; final error {:.3} m", trace.final_record.error_m);
    Ok(())
}

fn random_splats(seed: u64, n: usize, size: usize, dim: usize) -> Vec<Splat2D> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|id| {
            let a: f64 = rng.gen_range(0.5..4.0);
            let c: f64 = rng.gen_range(0.5..4.0);
            let cov2 = Sym2::new(a, rng.gen_range(-0.7..0.7) * (a * c).sqrt(), c);
            Splat2D {
                mean2: [rng.gen_range(0.0..size as f64), rng.gen_range(0.0..size as f64)],
                cov2,
                inv_cov2: cov2.inverse().expect("positive definite"),
                base_opacity: rng.gen_range(0.05..1.0),
                feature: (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                confidence: rng.gen_range(0.0..1.0),
                sort_key: rng.gen_range(-5.0..5.0),
                radius: 3.0 * cov2.max_eigenvalue().sqrt(),
                id,
            }
        })
        .collect()
}

fn bench(splats: usize, size: usize, dim: usize, seed: u64, repeats: usize, no_reference: bool) -> CliResult<()> {
    if size == 0 || dim == 0 || repeats == 0 {
        return Err(Failure::Usage("--size, --dim and --repeats must be positive".into()));
    }
    let grid = BevGridSpec::new(size, 1.0, 0.0, 0.0)?;
    let list = random_splats(seed, splats, size, dim);
    let cells = (size * size) as f64;
    let best = |settings: RenderSettings| {
        let _warm = render_forward(&list, &grid, dim, &settings);
        (0..repeats)
            .map(|_| {
                let t = Instant::now();
                let _ = render_forward(&list, &grid, dim, &settings);
                t.elapsed().as_secs_f64()
            })
            .fold(f64::INFINITY, f64::min)
    };
    let t_tiled = best(RenderSettings::default());
    let t_exact = best(RenderSettings::exact());
    let mut report = json!({
        "splats": splats,
        "size": size,
        "threads": rayon::current_num_threads(),
        "tiled_s": t_tiled,
        "tiled_cells_per_s": cells / t_tiled,
        "exact_tiled_s": t_exact,
        "exact_tiled_cells_per_s": cells / t_exact,
    });
    let mut agreement = None;
    if !no_reference {
        let t = Instant::now();
        let reference = render_reference(&list, &grid, dim, RenderSettings::default().alpha_clamp);
        let t_ref = t.elapsed().as_secs_f64();
        let exact = render_forward(&list, &grid, dim, &RenderSettings::exact());
        let err = [(&exact.f_bev, &reference.f_bev), (&exact.c_bev, &reference.c_bev), (&exact.final_t, &reference.final_t)]
            .iter()
            .flat_map(|(a, b)| a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max);
        report["reference_s"] = json!(t_ref);
        report["reference_cells_per_s"] = json!(cells / t_ref);
        report["speedup"] = json!(t_ref / t_tiled);
        report["max_abs_diff"] = json!(err);
        agreement = Some(err);
    }
    println!("{}", serde_json::to_string_pretty(&report).map_err(|e| Failure::Numeric(e.to_string()))?);
    match agreement {
        Some(err) if !(err < 1e-5) => Err(Failure::Numeric(format!("tiled and reference renderers differ by {err:.3e}"))),
        _ => Ok(()),
    }
}

fn thread_count(flag: Option<usize>) -> CliResult<Option<usize>> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var("BEVSPLAT_THREADS") {
            Ok(v) => Some(v.trim().parse().map_err(|_| Failure::Usage(format!("BEVSPLAT_THREADS must be a positive integer, got {v:?}")))?),
            Err(_) => None,
        },
    };
    if n == Some(0) {
        return Err(Failure::Usage("thread count must be positive".into()));
    }
    Ok(n)
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = thread_count(cli.threads)? {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Numeric(e.to_string()))?;
    }
    match cli.command {
        Command::Render { primitives, grid, out, dim, ppm } => render(&primitives, &grid, &out, dim, ppm),
        Command::Gradcheck { seed, splats, dim, step, tolerance } => gradcheck(seed, splats, dim, step, tolerance),
        Command::Localize {
            sat,
            ground_dir,
            config,
            out,
            search_range,
            similarity,
        } => localize(&sat, &ground_dir, &config, &out, search_range, similarity.as_deref()),
        Command::Baseline { method, ground_dir, config, out } => baseline(method, &ground_dir, &config, &out),
        Command::Synth {
            spec,
            n,
            pipeline,
            seed,
            out,
            emit_dir,
        } => synth(spec.as_deref(), n, pipeline, seed, &out, emit_dir.as_deref()),
        Command::Optimize {
            spec,
            steps,
            lr,
            lambda1,
            d,
            negatives,
            seed,
            out,
        } => optimize(spec.as_deref(), steps, lr, lambda1, d, negatives, seed, &out),
        Command::Bench {
            splats,
            size,
            dim,
            seed,
            repeats,
            no_reference,
        } => bench(splats, size, dim, seed, repeats, no_reference),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Numeric(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
