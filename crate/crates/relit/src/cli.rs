//! The command-line surface: dataset generation, training, rendering,
//! relighting, night simulation, mesh insertion, evaluation, gradcheck.
//!
//! Exit codes: 0 success; 1 for anything wrong with the invocation or the
//! user's input files (flags, manifests, lights rigs, meshes, checkpoints);
//! 2 for failures at run time (output IO, non-finite training).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::editor::{cube_object, mesh_object, night_env, relight_env};
use crate::geom::{load_obj, rgb, TriangleMesh};
use crate::grad::gradcheck::{builtin_scenarios, run_scenario, FdOptions};
use crate::grad::ParamSet;
use crate::io::{atomic_write, load_dataset, Dataset};
use crate::lighting::load_lights;
use crate::oracle::dataset::{generate_dataset, DatasetSpec};
use crate::oracle::OracleScene;
use crate::renderer::{render_image, LightColor, LightEnv, OccupancyGrid, PipelineOpts, Rendered};
use crate::trainer::evaluate::{evaluate_frame, FrameMetrics};
use crate::trainer::losses::{loss_term_scenarios, pipeline_scenario};
use crate::trainer::{
    default_model_config, load_checkpoint, save_checkpoint, train, RunConfig, TrainConfig,
    TrainError,
};

/// Desk-scale inverse rendering: optimize a relightable scene model from
/// posed images, then re-render it under new suns, night rigs, or with
/// inserted objects.
#[derive(Parser)]
#[command(name = "relit", version, disable_help_subcommand = true)]
struct Cli {
    /// Base seed for anything stochastic.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Accepted for scripting compatibility; every code path is
    /// deterministic regardless.
    #[arg(long, global = true)]
    deterministic: bool,
    /// JSON file overriding training-configuration defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic oracle dataset (posed images + priors).
    Gen(GenArgs),
    /// Optimize a scene model against a dataset.
    Train(TrainArgs),
    /// Render a trained model from a dataset camera.
    Render(RenderArgs),
    /// Re-render under a moved (or recolored) sun.
    Relight(RelightArgs),
    /// Re-render under a night rig of spotlights.
    Night(NightArgs),
    /// Re-render with a mesh dropped into the scene.
    Insert(InsertArgs),
    /// Render frames against ground truth and write a metrics report.
    Eval(EvalArgs),
    /// Finite-difference check of every gradient scenario.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Number of camera views on the ring.
    #[arg(long, default_value_t = 20)]
    views: usize,
    /// Image resolution, e.g. 96x96.
    #[arg(long, default_value = "96x96")]
    res: String,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory (or a manifest.json path).
    #[arg(long)]
    data: PathBuf,
    /// Optimization iterations.
    #[arg(long)]
    iters: Option<usize>,
    /// Frame indices to hold out of training, comma-separated.
    #[arg(long, value_delimiter = ',')]
    exclude: Vec<usize>,
    /// Treat dataset PNGs as sRGB-encoded photographs.
    #[arg(long)]
    srgb_input: bool,
    /// Output checkpoint directory.
    #[arg(long)]
    out: PathBuf,
}

/// Flags shared by every single-frame rendering command.
#[derive(Args)]
struct ViewArgs {
    /// Checkpoint directory from `train`.
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset directory (or manifest.json) providing cameras.
    #[arg(long)]
    data: PathBuf,
    /// Frame index whose camera to render from.
    #[arg(long, default_value_t = 0)]
    frame: usize,
    /// Output PNG for the rendered color.
    #[arg(long)]
    out: PathBuf,
    /// Also write the composited albedo (PNG).
    #[arg(long)]
    albedo: Option<PathBuf>,
    /// Also write the composited normals (PFM).
    #[arg(long)]
    normal: Option<PathBuf>,
    /// Also write the depth map (PFM).
    #[arg(long)]
    depth: Option<PathBuf>,
    /// Also write the shadow mask, 1 = sun blocked (PNG).
    #[arg(long)]
    shadow: Option<PathBuf>,
    /// Also write per-pixel semantic class indices (PNG).
    #[arg(long)]
    semantic: Option<PathBuf>,
}

#[derive(Args)]
struct RenderArgs {
    #[command(flatten)]
    view: ViewArgs,
}

#[derive(Args)]
struct RelightArgs {
    #[command(flatten)]
    view: ViewArgs,
    /// Sun azimuth in degrees (default: the dataset's).
    #[arg(long)]
    sun_azimuth: Option<f64>,
    /// Sun zenith angle in degrees (default: the dataset's).
    #[arg(long)]
    sun_zenith: Option<f64>,
    /// Override the trained sun color, as r,g,b.
    #[arg(long)]
    sun_color: Option<String>,
    /// Override the trained sky color, as r,g,b.
    #[arg(long)]
    sky_color: Option<String>,
}

#[derive(Args)]
struct NightArgs {
    #[command(flatten)]
    view: ViewArgs,
    /// Night rig JSON: spotlights plus an ambient sky color.
    #[arg(long)]
    lights: PathBuf,
}

#[derive(Args)]
struct InsertArgs {
    #[command(flatten)]
    view: ViewArgs,
    /// Axis-aligned cube: size,cx,cy[,yaw_deg], resting on the ground.
    #[arg(long, conflicts_with = "obj")]
    cube: Option<String>,
    /// Wavefront OBJ mesh in world coordinates.
    #[arg(long)]
    obj: Option<PathBuf>,
    /// Mesh albedo as r,g,b.
    #[arg(long, default_value = "0.7,0.7,0.7")]
    color: String,
    /// Sun azimuth in degrees (default: the dataset's).
    #[arg(long)]
    sun_azimuth: Option<f64>,
    /// Sun zenith angle in degrees (default: the dataset's).
    #[arg(long)]
    sun_zenith: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint directory from `train`.
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset directory (or manifest.json) with ground truth.
    #[arg(long)]
    data: PathBuf,
    /// Frame indices to evaluate, comma-separated (default: the frames the
    /// checkpoint held out, or every frame if none were).
    #[arg(long, value_delimiter = ',')]
    frames: Vec<usize>,
    /// Output report path (JSON).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Maximum relative error for a scenario to pass.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
}

/// Per-frame metrics plus their mean, stamped with the configuration hash
/// and a build identifier.
#[derive(Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    pub frames: Vec<FrameEntry>,
    pub mean: FrameMetrics,
    pub config_hash: String,
    pub build_id: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FrameEntry {
    pub frame: usize,
    pub metrics: FrameMetrics,
}

enum CliError {
    /// The invocation or a user-supplied input file is wrong.
    Validation(String),
    /// The work itself failed.
    Runtime(String),
}

impl CliError {
    fn validation(e: impl std::fmt::Display) -> CliError {
        CliError::Validation(e.to_string())
    }

    fn runtime(e: impl std::fmt::Display) -> CliError {
        CliError::Runtime(e.to_string())
    }
}

type CliResult = Result<(), CliError>;

/// Parse and run one invocation; returns the process exit code.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let out = match cli.cmd {
        Cmd::Gen(ref a) => cmd_gen(a),
        Cmd::Train(ref a) => cmd_train(&cli, a),
        Cmd::Render(ref a) => cmd_view(&a.view, |_, _| Ok(EnvSpec::Training), None),
        Cmd::Relight(ref a) => cmd_relight(a),
        Cmd::Night(ref a) => cmd_night(a),
        Cmd::Insert(ref a) => cmd_insert(a),
        Cmd::Eval(ref a) => cmd_eval(a),
        Cmd::Gradcheck(ref a) => cmd_gradcheck(a),
    };
    match out {
        Ok(()) => 0,
        Err(CliError::Validation(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            2
        }
    }
}

fn manifest_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join("manifest.json")
    } else {
        data.to_path_buf()
    }
}

fn parse_res(s: &str) -> Result<(usize, usize), CliError> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| CliError::Validation(format!("--res must look like 96x96, got '{s}'")))?;
    let parse = |v: &str| {
        v.parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::Validation(format!("bad resolution component '{v}'")))
    };
    Ok((parse(w)?, parse(h)?))
}

fn parse_rgb(s: &str) -> Result<[f64; 3], CliError> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|v| v.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::Validation(format!("bad color '{s}', expected r,g,b")))?;
    if parts.len() != 3 || parts.iter().any(|v| !v.is_finite()) {
        return Err(CliError::Validation(format!("bad color '{s}', expected r,g,b")));
    }
    Ok([parts[0], parts[1], parts[2]])
}

fn cmd_gen(a: &GenArgs) -> CliResult {
    if a.views == 0 {
        return Err(CliError::Validation("--views must be at least 1".into()));
    }
    let (w, h) = parse_res(&a.res)?;
    let spec = DatasetSpec {
        n_views: a.views,
        width: w as u32,
        height: h as u32,
        ..DatasetSpec::default()
    };
    let scene = OracleScene::default_scene();
    generate_dataset(&scene, &spec, &a.out).map_err(CliError::runtime)?;
    println!("wrote {} frames ({w}x{h}) to {}", a.views, a.out.display());
    Ok(())
}

fn load_train_config(cli: &Cli) -> Result<TrainConfig, CliError> {
    let mut tc = match &cli.config {
        None => TrainConfig::default(),
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                CliError::Validation(format!("config {}: {e}", path.display()))
            })?;
            serde_json::from_str(&text).map_err(|e| {
                CliError::Validation(format!("config {}: {e}", path.display()))
            })?
        }
    };
    if let Some(seed) = cli.seed {
        tc.seed = seed;
    }
    Ok(tc)
}

fn cmd_train(cli: &Cli, a: &TrainArgs) -> CliResult {
    let ds = load_dataset(&manifest_path(&a.data), a.srgb_input).map_err(CliError::validation)?;
    let mut tc = load_train_config(cli)?;
    if let Some(iters) = a.iters {
        tc.iterations = iters;
    }
    if !a.exclude.is_empty() {
        tc.exclude_frames = a.exclude.clone();
    }
    let cfg = default_model_config(&ds);

    std::fs::create_dir_all(&a.out).map_err(CliError::runtime)?;
    let mut log = Vec::new();
    let result = train(&ds, &cfg, &tc, Some(&mut log));
    // The loss curve is worth keeping even when training dies.
    let _ = atomic_write(&a.out.join("train.log"), &log);
    let r = result.map_err(|e| match e {
        TrainError::NoFrames => CliError::validation(e),
        other => CliError::runtime(other),
    })?;

    save_checkpoint(&a.out.join("model.ckpt"), &cfg, &r.params, &r.opt, &r.occ)
        .map_err(CliError::runtime)?;
    let rc = RunConfig { model: cfg, train: tc };
    let text = serde_json::to_string_pretty(&rc).map_err(CliError::runtime)?;
    atomic_write(&a.out.join("config.json"), text.as_bytes()).map_err(CliError::runtime)?;
    println!(
        "trained {} iterations, final loss {:.6}; checkpoint in {}",
        rc.train.iterations,
        r.final_loss,
        a.out.display()
    );
    Ok(())
}

/// A loaded checkpoint directory.
struct Loaded {
    rc: RunConfig,
    params: Arc<ParamSet<f32>>,
    occ: OccupancyGrid,
}

fn load_ckpt_dir(dir: &Path) -> Result<Loaded, CliError> {
    let cfg_path = dir.join("config.json");
    let text = std::fs::read_to_string(&cfg_path)
        .map_err(|e| CliError::Validation(format!("checkpoint {}: {e}", cfg_path.display())))?;
    let rc: RunConfig = serde_json::from_str(&text)
        .map_err(|e| CliError::Validation(format!("checkpoint {}: {e}", cfg_path.display())))?;
    let (params, _, occ) =
        load_checkpoint(&dir.join("model.ckpt"), &rc.model).map_err(CliError::validation)?;
    Ok(Loaded { rc, params: Arc::new(params), occ })
}

fn render_opts(rc: &RunConfig, ds: &Dataset) -> PipelineOpts {
    PipelineOpts {
        n_primary: rc.train.n_primary,
        n_shadow: rc.train.n_shadow,
        weight_cutoff: rc.train.weight_cutoff,
        d_max: ds.d_max,
        ..PipelineOpts::default()
    }
}

/// What a view command wants rendered.
enum EnvSpec {
    Training,
    Custom(LightEnv),
}

type InsertSpec = Option<crate::renderer::InsertedObject>;

fn cmd_view(
    view: &ViewArgs,
    env_for: impl FnOnce(&Dataset, &Loaded) -> Result<EnvSpec, CliError>,
    inserted: InsertSpec,
) -> CliResult {
    let ds = load_dataset(&manifest_path(&view.data), false).map_err(CliError::validation)?;
    let loaded = load_ckpt_dir(&view.ckpt)?;
    if view.frame >= ds.frames.len() {
        return Err(CliError::Validation(format!(
            "--frame {} out of range ({} frames)",
            view.frame,
            ds.frames.len()
        )));
    }
    let env = match env_for(&ds, &loaded)? {
        EnvSpec::Training => LightEnv::training(ds.sun_dir()),
        EnvSpec::Custom(e) => e,
    };
    let opts = render_opts(&loaded.rc, &ds);
    let cam = &ds.frames[view.frame].camera;
    let r = render_image(
        &loaded.rc.model,
        &loaded.params,
        Some(&loaded.occ),
        cam,
        &env,
        inserted.as_ref(),
        &opts,
        crate::renderer::DEFAULT_CHUNK_RAYS,
    );
    write_view_outputs(view, &r).map_err(CliError::runtime)?;
    println!("rendered frame {} to {}", view.frame, view.out.display());
    Ok(())
}

fn write_view_outputs(view: &ViewArgs, r: &Rendered) -> Result<(), String> {
    use crate::io::pfm::write_pfm;
    use crate::io::png::{write_label_png, write_png};
    let e = |e: &dyn std::fmt::Display| e.to_string();
    write_png(&view.out, &r.color).map_err(|x| e(&x))?;
    if let Some(p) = &view.albedo {
        write_png(p, &r.albedo).map_err(|x| e(&x))?;
    }
    if let Some(p) = &view.normal {
        write_pfm(p, &r.normal).map_err(|x| e(&x))?;
    }
    if let Some(p) = &view.depth {
        write_pfm(p, &r.depth).map_err(|x| e(&x))?;
    }
    if let Some(p) = &view.shadow {
        let mut m = crate::io::ImageBuf::new(r.color.width, r.color.height, 1);
        for (dst, &v) in m.data.iter_mut().zip(&r.sun_vis.data) {
            *dst = 1.0 - v;
        }
        write_png(p, &m).map_err(|x| e(&x))?;
    }
    if let Some(p) = &view.semantic {
        write_label_png(p, r.color.width, r.color.height, &r.semantic).map_err(|x| e(&x))?;
    }
    Ok(())
}

fn cmd_relight(a: &RelightArgs) -> CliResult {
    let sun_color = a.sun_color.as_deref().map(parse_rgb).transpose()?;
    let sky_color = a.sky_color.as_deref().map(parse_rgb).transpose()?;
    let (az, ze) = (a.sun_azimuth, a.sun_zenith);
    cmd_view(
        &a.view,
        move |ds, _| {
            let azimuth = az.map_or(ds.sun_azimuth, f64::to_radians);
            let zenith = ze.map_or(ds.sun_zenith, f64::to_radians);
            let mut env = relight_env(azimuth, zenith);
            if let Some(c) = sun_color {
                env.sun = LightColor::Fixed(c);
            }
            if let Some(c) = sky_color {
                env.sky = LightColor::Fixed(c);
            }
            Ok(EnvSpec::Custom(env))
        },
        None,
    )
}

fn cmd_night(a: &NightArgs) -> CliResult {
    let rig = load_lights(&a.lights).map_err(CliError::validation)?;
    cmd_view(&a.view, move |_, _| Ok(EnvSpec::Custom(night_env(&rig))), None)
}

fn parse_cube(s: &str) -> Result<(f64, f64, f64, f64), CliError> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|v| v.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::Validation(format!("bad --cube '{s}', expected size,cx,cy[,yaw_deg]")))?;
    match parts.as_slice() {
        [s, cx, cy] if *s > 0.0 => Ok((*s, *cx, *cy, 0.0)),
        [s, cx, cy, yaw] if *s > 0.0 => Ok((*s, *cx, *cy, yaw.to_radians())),
        _ => Err(CliError::Validation(format!(
            "bad --cube '{s}', expected size,cx,cy[,yaw_deg] with positive size"
        ))),
    }
}

fn cmd_insert(a: &InsertArgs) -> CliResult {
    let albedo = parse_rgb(&a.color)?;
    let albedo = rgb(albedo[0], albedo[1], albedo[2]);
    let object = match (&a.cube, &a.obj) {
        (Some(spec), None) => {
            let (size, cx, cy, yaw) = parse_cube(spec)?;
            cube_object(size, yaw, cx, cy, albedo)
        }
        (None, Some(path)) => {
            let mesh: TriangleMesh = load_obj(path).map_err(CliError::validation)?;
            if mesh.is_empty() {
                return Err(CliError::Validation(format!(
                    "mesh {} has no faces",
                    path.display()
                )));
            }
            mesh_object(mesh, albedo)
        }
        _ => {
            return Err(CliError::Validation(
                "insert needs exactly one of --cube or --obj".into(),
            ))
        }
    };
    let (az, ze) = (a.sun_azimuth, a.sun_zenith);
    cmd_view(
        &a.view,
        move |ds, _| {
            let azimuth = az.map_or(ds.sun_azimuth, f64::to_radians);
            let zenith = ze.map_or(ds.sun_zenith, f64::to_radians);
            Ok(EnvSpec::Custom(relight_env(azimuth, zenith)))
        },
        Some(object),
    )
}

fn mean_metrics(all: &[FrameMetrics]) -> FrameMetrics {
    let n = all.len().max(1) as f64;
    let avg = |f: fn(&FrameMetrics) -> f64| all.iter().map(f).sum::<f64>() / n;
    FrameMetrics {
        psnr: avg(|m| m.psnr),
        albedo_rmse: avg(|m| m.albedo_rmse),
        albedo_rmse_shadow: avg(|m| m.albedo_rmse_shadow),
        normal_angle_deg: avg(|m| m.normal_angle_deg),
        shadow_iou: avg(|m| m.shadow_iou),
        semantic_acc: avg(|m| m.semantic_acc),
    }
}

fn cmd_eval(a: &EvalArgs) -> CliResult {
    let ds = load_dataset(&manifest_path(&a.data), false).map_err(CliError::validation)?;
    let loaded = load_ckpt_dir(&a.ckpt)?;
    let frames: Vec<usize> = if !a.frames.is_empty() {
        a.frames.clone()
    } else if !loaded.rc.train.exclude_frames.is_empty() {
        loaded.rc.train.exclude_frames.clone()
    } else {
        (0..ds.frames.len()).collect()
    };
    if let Some(&bad) = frames.iter().find(|&&f| f >= ds.frames.len()) {
        return Err(CliError::Validation(format!(
            "--frames {bad} out of range ({} frames)",
            ds.frames.len()
        )));
    }

    let env = LightEnv::training(ds.sun_dir());
    let opts = render_opts(&loaded.rc, &ds);
    let mut entries = Vec::new();
    for &f in &frames {
        let r = render_image(
            &loaded.rc.model,
            &loaded.params,
            Some(&loaded.occ),
            &ds.frames[f].camera,
            &env,
            None,
            &opts,
            crate::renderer::DEFAULT_CHUNK_RAYS,
        );
        let metrics = evaluate_frame(&r, &ds.frames[f], ds.sky_class as u8);
        entries.push(FrameEntry { frame: f, metrics });
    }
    let mean = mean_metrics(&entries.iter().map(|e| e.metrics).collect::<Vec<_>>());
    let report = MetricsReport {
        frames: entries,
        mean,
        config_hash: config_hash(&loaded.rc),
        build_id: build_id(),
    };
    let finite = |m: &FrameMetrics| {
        [m.psnr, m.albedo_rmse, m.albedo_rmse_shadow, m.normal_angle_deg, m.shadow_iou, m.semantic_acc]
            .iter()
            .all(|v| v.is_finite())
    };
    if !finite(&report.mean) || !report.frames.iter().all(|e| finite(&e.metrics)) {
        return Err(CliError::Runtime("metrics contain non-finite values".into()));
    }
    let text = serde_json::to_string_pretty(&report).map_err(CliError::runtime)?;
    atomic_write(&a.out, text.as_bytes()).map_err(CliError::runtime)?;
    println!(
        "evaluated {} frame(s): psnr {:.2}, shadow-albedo rmse {:.4}, vis iou {:.3} -> {}",
        report.frames.len(),
        report.mean.psnr,
        report.mean.albedo_rmse_shadow,
        report.mean.shadow_iou,
        a.out.display()
    );
    Ok(())
}

/// Hash of the run configuration as serialized into the sidecar.
fn config_hash(rc: &RunConfig) -> String {
    let text = serde_json::to_string(rc).expect("config serializes");
    let mut h = Sha256::new();
    h.update(text.as_bytes());
    let digest = h.finalize();
    let mut out = String::with_capacity(16);
    for b in &digest[..8] {
        let _ = write!(out, "{b:02x}");
    }
    out
}

fn build_id() -> String {
    format!(
        "{}-{}",
        env!("CARGO_PKG_VERSION"),
        option_env!("RELIT_BUILD_ID").unwrap_or("dev")
    )
}

fn cmd_gradcheck(a: &GradcheckArgs) -> CliResult {
    if !(a.tol.is_finite() && a.tol > 0.0) {
        return Err(CliError::Validation("--tol must be a positive number".into()));
    }
    let opts = FdOptions { tol: a.tol, ..FdOptions::default() };
    let mut scenarios = builtin_scenarios();
    scenarios.extend(loss_term_scenarios());
    scenarios.push(pipeline_scenario());
    let mut failed = 0;
    println!("{:<28} {:>12}  result", "scenario", "max rel err");
    for s in &scenarios {
        let report = run_scenario(s, &opts);
        let ok = report.passed(a.tol);
        if !ok {
            failed += 1;
        }
        println!(
            "{:<28} {:>12.3e}  {}",
            report.name,
            report.max_rel_err,
            if ok { "pass" } else { "FAIL" }
        );
    }
    if failed > 0 {
        return Err(CliError::Validation(format!("{failed} scenario(s) failed")));
    }
    Ok(())
}
