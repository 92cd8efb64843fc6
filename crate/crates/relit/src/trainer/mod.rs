//! Scene optimization: batching, the training loop, and checkpointing.
//!
//! Results are a pure function of `(dataset, model config, train config)` —
//! every random draw comes from counter-seeded ChaCha8 streams, gradients
//! merge over chunks in a fixed order, and the chunk size only controls
//! memory, not math.

pub mod adam;
pub mod evaluate;
pub mod losses;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fields::checkpoint::{
    model_from_records, model_records, read_records, write_records, CheckpointError,
    TensorRecord,
};
use crate::fields::{init_params, ModelConfig, SceneModel};
use crate::geom::{generate_ray, Ray};
use crate::grad::{GradSet, ParamGroup, ParamSet, TapeError, PARAM_GROUPS};
use crate::io::Dataset;
use crate::renderer::occupancy::{DEFAULT_RES, DEFAULT_THRESHOLD};
use crate::renderer::pipeline::{build_chunk, LightEnv, PipelineOpts};
use crate::renderer::OccupancyGrid;

pub use adam::{adam_step, clamp_group_min, AdamConfig, AdamState};
pub use losses::{attach_losses, Ablation, LossBundle, LossWeights, RayBatch};

/// Everything that shapes one optimization run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub rays_per_batch: usize,
    /// Rays per graph; affects memory and tape size only.
    pub chunk_rays: usize,
    pub n_primary: usize,
    pub n_shadow: usize,
    pub weight_cutoff: f64,
    pub lr_grid: f64,
    pub lr_head: f64,
    pub lr_light: f64,
    pub seed: u64,
    pub weights: LossWeights,
    pub ablate: Ablation,
    /// Iterations before the occupancy grid starts refreshing (it passes
    /// everything until the first refresh).
    pub occupancy_warmup: usize,
    pub occupancy_every: usize,
    /// Frame indices withheld from sampling (held-out views).
    pub exclude_frames: Vec<usize>,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            iterations: 10_000,
            rays_per_batch: 512,
            chunk_rays: 128,
            n_primary: 64,
            n_shadow: 32,
            weight_cutoff: 1e-4,
            lr_grid: 1e-2,
            lr_head: 1e-3,
            lr_light: 1e-2,
            seed: 0,
            weights: LossWeights::default(),
            ablate: Ablation::default(),
            occupancy_warmup: 512,
            occupancy_every: 256,
            exclude_frames: Vec::new(),
            log_every: 50,
        }
    }
}

impl TrainConfig {
    /// Per-group learning rates in [`ParamGroup::index`] order.
    pub fn lr_table(&self) -> [f64; 9] {
        let mut lr = [self.lr_head; 9];
        lr[ParamGroup::GeoGrid.index()] = self.lr_grid;
        lr[ParamGroup::AppGrid.index()] = self.lr_grid;
        lr[ParamGroup::LightSun.index()] = self.lr_light;
        lr[ParamGroup::LightSky.index()] = self.lr_light;
        lr
    }
}

/// A model configuration sized for the bundled datasets.
pub fn default_model_config(ds: &Dataset) -> ModelConfig {
    let mut cfg = ModelConfig::with_aabb(ds.aabb, ds.n_classes(), ds.sky_class as usize);
    for grid in [&mut cfg.geo_grid, &mut cfg.app_grid] {
        grid.levels = 6;
        grid.table_size = 1 << 14;
        grid.base_res = 8;
        grid.per_level_scale = 1.6;
    }
    cfg.hidden = vec![32];
    cfg
}

/// The configuration sidecar written next to every checkpoint: everything
/// needed to rebuild the model and reproduce the run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset has no trainable frames")]
    NoFrames,
    #[error("non-finite gradient at iteration {iter}: {source}")]
    NonFinite { iter: usize, source: TapeError },
    #[error("log write failed: {0}")]
    Log(#[from] std::io::Error),
}

/// The trained scene plus everything needed to resume or evaluate.
pub struct TrainResult {
    pub cfg: ModelConfig,
    pub params: ParamSet<f32>,
    pub opt: AdamState,
    pub occ: OccupancyGrid,
    pub final_loss: f64,
}

/// Deterministic per-iteration RNG stream.
fn iter_rng(seed: u64, iter: u64, stream: u64) -> ChaCha8Rng {
    let mixed = seed
        ^ iter.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03);
    ChaCha8Rng::seed_from_u64(mixed)
}

/// Draws one training batch: rays in order plus their ground truth.
fn sample_batch(
    ds: &Dataset,
    frames: &[usize],
    n: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<Ray>, RayBatch) {
    let mut rays = Vec::with_capacity(n);
    let mut batch = RayBatch::default();
    for _ in 0..n {
        let f = frames[rng.gen_range(0..frames.len())];
        let fr = &ds.frames[f];
        let (w, h) = (fr.camera.width, fr.camera.height);
        let x = rng.gen_range(0..w);
        let y = rng.gen_range(0..h);
        let i = (y * w + x) as usize;
        rays.push(generate_ray(&fr.camera, x as f64, y as f64));
        for c in 0..3 {
            batch.rgb.push(fr.rgb.data[i * 3 + c] as f64);
            batch.deshadow.push(fr.deshadow.data[i * 3 + c] as f64);
            batch.normal.push(fr.normal.data[i * 3 + c] as f64);
        }
        batch.shadow.push(if fr.shadow.data[i] > 0.5 { 1.0 } else { 0.0 });
        batch.semantic.push(fr.semantic[i]);
    }
    (rays, batch)
}

fn batch_slice(b: &RayBatch, lo: usize, hi: usize) -> RayBatch {
    RayBatch {
        rgb: b.rgb[lo * 3..hi * 3].to_vec(),
        deshadow: b.deshadow[lo * 3..hi * 3].to_vec(),
        shadow: b.shadow[lo..hi].to_vec(),
        normal: b.normal[lo * 3..hi * 3].to_vec(),
        semantic: b.semantic[lo..hi].to_vec(),
    }
}

/// Optimizes a fresh model against the dataset. `log` receives CSV rows
/// (headed) every `log_every` iterations.
pub fn train(
    ds: &Dataset,
    cfg: &ModelConfig,
    tc: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainResult, TrainError> {
    let frames: Vec<usize> =
        (0..ds.frames.len()).filter(|i| !tc.exclude_frames.contains(i)).collect();
    if frames.is_empty() {
        return Err(TrainError::NoFrames);
    }
    let mut params = Arc::new(init_params(cfg, tc.seed));
    let mut opt = AdamState::new(&params);
    let mut occ = OccupancyGrid::new(cfg.aabb(), DEFAULT_RES, DEFAULT_THRESHOLD);
    let env = LightEnv::training(ds.sun_dir());
    let opts = PipelineOpts {
        n_primary: tc.n_primary,
        n_shadow: tc.n_shadow,
        weight_cutoff: tc.weight_cutoff,
        d_max: ds.d_max,
        with_deshadow: !tc.ablate.no_deshadow,
        with_normal_consistency: tc.weights.normal_consist > 0.0,
        with_orientation: tc.weights.orient > 0.0,
        ..PipelineOpts::default()
    };
    let lr = tc.lr_table();
    let adam_cfg = AdamConfig::default();
    let sky = ds.sky_class as u8;

    if let Some(w) = log.as_deref_mut() {
        writeln!(w, "iter,total,terms,occupancy")?;
    }
    let mut final_loss = f64::NAN;
    for iter in 0..tc.iterations {
        let mut ray_rng = iter_rng(tc.seed, iter as u64, 1);
        let mut jitter_rng = iter_rng(tc.seed, iter as u64, 2);
        let (rays, batch) = sample_batch(ds, &frames, tc.rays_per_batch, &mut ray_rng);
        let n = rays.len();

        let mut grads: Option<GradSet<f32>> = None;
        let mut loss_sum = 0.0;
        let mut term_sums: BTreeMap<&'static str, f64> = BTreeMap::new();
        let mut splats: Vec<(crate::geom::Vec3, f32)> = Vec::new();
        let mut lo = 0;
        while lo < n {
            let hi = (lo + tc.chunk_rays).min(n);
            let chunk_batch = batch_slice(&batch, lo, hi);
            let (mut graph, _) = build_chunk(
                cfg,
                params.clone(),
                Some(&occ),
                &rays[lo..hi],
                &env,
                None,
                &opts,
                Some(&mut jitter_rng),
                None,
            );
            {
                let sig = graph.tape.value(graph.ids.sigma);
                for (p, &s) in graph.sample_pts.iter().zip(sig) {
                    splats.push((*p, s));
                }
            }
            let bundle =
                attach_losses(&mut graph, &chunk_batch, &tc.weights, &tc.ablate, sky, ds.d_max, None);
            let share = (hi - lo) as f64 / n as f64;
            loss_sum += graph.tape.scalar(bundle.total) as f64 * share;
            for (name, v) in &bundle.logged {
                *term_sums.entry(name).or_insert(0.0) += v * share;
            }
            let scaled = graph.tape.scale(bundle.total, share as f32);
            let g = graph
                .tape
                .backward(scaled)
                .map_err(|source| TrainError::NonFinite { iter, source })?;
            match grads.as_mut() {
                Some(acc) => acc.add_assign(&g),
                None => grads = Some(g),
            }
            lo = hi;
        }
        let grads = grads.expect("at least one chunk");
        let p = Arc::make_mut(&mut params);
        adam_step(p, &grads, &mut opt, &adam_cfg, &lr);
        clamp_group_min(p, ParamGroup::LightSun, 0.0);
        clamp_group_min(p, ParamGroup::LightSky, 0.0);

        for (pt, s) in splats {
            occ.splat_max(pt, s);
        }
        if iter + 1 >= tc.occupancy_warmup && (iter + 1) % tc.occupancy_every == 0 {
            let mut occ_rng = iter_rng(tc.seed, iter as u64, 3);
            occ.refresh(cfg, &params, &mut occ_rng);
        }

        final_loss = loss_sum;
        if let Some(w) = log.as_deref_mut() {
            if iter % tc.log_every == 0 || iter + 1 == tc.iterations {
                let terms: Vec<String> =
                    term_sums.iter().map(|(k, v)| format!("{k}={v:.5}")).collect();
                writeln!(
                    w,
                    "{iter},{loss_sum:.6},{},{:.4}",
                    terms.join(";"),
                    occ.active_fraction()
                )?;
            }
        }
    }

    Ok(TrainResult {
        cfg: cfg.clone(),
        params: Arc::try_unwrap(params).unwrap_or_else(|a| (*a).clone()),
        opt,
        occ,
        final_loss,
    })
}

// --- checkpointing ---------------------------------------------------------

/// Writes model parameters, optimizer moments, step count, and the occupancy
/// grid into one tensor file.
pub fn save_checkpoint(
    path: &Path,
    cfg: &ModelConfig,
    params: &ParamSet<f32>,
    opt: &AdamState,
    occ: &OccupancyGrid,
) -> Result<(), CheckpointError> {
    let model = SceneModel { cfg: cfg.clone(), params: params.clone() };
    let mut records = model_records(&model);
    for g in PARAM_GROUPS {
        records.push(TensorRecord::flat(&format!("opt.m.{}", g.name()), opt.m.group(g).to_vec()));
        records.push(TensorRecord::flat(&format!("opt.v.{}", g.name()), opt.v.group(g).to_vec()));
    }
    records.push(TensorRecord::flat("opt.step", vec![opt.step as f32]));
    records.push(TensorRecord::flat("occupancy", occ.data().to_vec()));
    write_records(path, &records)
}

/// Reads a checkpoint written by [`save_checkpoint`]. Optimizer and
/// occupancy records are optional: a bare model loads with fresh state.
pub fn load_checkpoint(
    path: &Path,
    cfg: &ModelConfig,
) -> Result<(ParamSet<f32>, AdamState, OccupancyGrid), CheckpointError> {
    let records = read_records(path)?;
    let model = model_from_records(cfg, &records)?;
    let mut opt = AdamState::new(&model.params);
    for g in PARAM_GROUPS {
        if let Some(r) = records.iter().find(|r| r.name == format!("opt.m.{}", g.name())) {
            if r.data.len() == opt.m.group(g).len() {
                opt.m.group_mut(g).copy_from_slice(&r.data);
            }
        }
        if let Some(r) = records.iter().find(|r| r.name == format!("opt.v.{}", g.name())) {
            if r.data.len() == opt.v.group(g).len() {
                opt.v.group_mut(g).copy_from_slice(&r.data);
            }
        }
    }
    if let Some(r) = records.iter().find(|r| r.name == "opt.step") {
        opt.step = r.data.first().copied().unwrap_or(0.0) as u64;
    }
    let aabb = model.cfg.aabb();
    let occ = match records.iter().find(|r| r.name == "occupancy") {
        Some(r) if r.data.len() == (DEFAULT_RES * DEFAULT_RES * DEFAULT_RES) as usize => {
            OccupancyGrid::from_data(aabb, DEFAULT_RES, DEFAULT_THRESHOLD, r.data.clone())
        }
        _ => OccupancyGrid::new(aabb, DEFAULT_RES, DEFAULT_THRESHOLD),
    };
    Ok((model.params, opt, occ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::dataset::{generate_dataset, DatasetSpec};
    use crate::oracle::OracleScene;
    use crate::io::load_dataset;

    fn tiny_dataset() -> (tempfile::TempDir, Dataset) {
        let dir = tempfile::tempdir().unwrap();
        let scene = OracleScene::default_scene();
        let spec = DatasetSpec { n_views: 3, width: 16, height: 16, focal: 14.0, ..DatasetSpec::default() };
        generate_dataset(&scene, &spec, dir.path()).unwrap();
        let ds = load_dataset(&dir.path().join("manifest.json"), false).unwrap();
        (dir, ds)
    }

    fn tiny_model(ds: &Dataset) -> ModelConfig {
        let mut cfg = default_model_config(ds);
        for grid in [&mut cfg.geo_grid, &mut cfg.app_grid] {
            grid.levels = 3;
            grid.table_size = 1 << 10;
        }
        cfg.hidden = vec![16];
        cfg
    }

    fn tiny_train_config() -> TrainConfig {
        TrainConfig {
            iterations: 12,
            rays_per_batch: 48,
            chunk_rays: 20,
            n_primary: 16,
            n_shadow: 8,
            occupancy_warmup: 6,
            occupancy_every: 4,
            log_every: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn short_runs_are_bit_reproducible() {
        let (_dir, ds) = tiny_dataset();
        let cfg = tiny_model(&ds);
        let tc = tiny_train_config();
        let a = train(&ds, &cfg, &tc, None).unwrap();
        let b = train(&ds, &cfg, &tc, None).unwrap();
        for g in PARAM_GROUPS {
            assert_eq!(a.params.group(g), b.params.group(g), "group {} diverged", g.name());
        }
        assert_eq!(a.final_loss.to_bits(), b.final_loss.to_bits());

        let mut tc2 = tc.clone();
        tc2.seed = 1;
        let c = train(&ds, &cfg, &tc2, None).unwrap();
        assert_ne!(
            a.params.group(ParamGroup::GeoGrid),
            c.params.group(ParamGroup::GeoGrid),
            "different seeds should differ"
        );
    }

    #[test]
    fn chunk_size_does_not_change_training() {
        let (_dir, ds) = tiny_dataset();
        let cfg = tiny_model(&ds);
        let tc = tiny_train_config();
        let mut tc_small = tc.clone();
        tc_small.chunk_rays = 7;
        let a = train(&ds, &cfg, &tc, None).unwrap();
        let b = train(&ds, &cfg, &tc_small, None).unwrap();
        for g in PARAM_GROUPS {
            let pa = a.params.group(g);
            let pb = b.params.group(g);
            for (x, y) in pa.iter().zip(pb) {
                assert!(
                    (x - y).abs() <= 1e-6 * x.abs().max(1.0),
                    "group {} differs beyond float reassociation: {x} vs {y}",
                    g.name()
                );
            }
        }
    }

    #[test]
    fn loss_moves_lights_toward_data() {
        // Even a very short run must reduce the objective.
        let (_dir, ds) = tiny_dataset();
        let cfg = tiny_model(&ds);
        let mut tc = tiny_train_config();
        tc.iterations = 30;
        let mut log = Vec::new();
        let r = train(&ds, &cfg, &tc, Some(&mut log)).unwrap();
        let text = String::from_utf8(log).unwrap();
        let first = text
            .lines()
            .nth(1)
            .and_then(|l| l.split(',').nth(1))
            .and_then(|v| v.parse::<f64>().ok())
            .expect("parse first logged loss");
        assert!(r.final_loss < first, "no progress: {first} -> {}", r.final_loss);
        assert!(text.lines().next().unwrap().starts_with("iter,"));
    }

    #[test]
    fn excluded_frames_are_never_sampled() {
        let (_dir, ds) = tiny_dataset();
        // Excluding everything must fail fast.
        let cfg = tiny_model(&ds);
        let mut tc = tiny_train_config();
        tc.exclude_frames = vec![0, 1, 2];
        assert!(matches!(train(&ds, &cfg, &tc, None), Err(TrainError::NoFrames)));
    }

    #[test]
    fn checkpoints_round_trip_params_opt_and_occupancy() {
        let (_dir, ds) = tiny_dataset();
        let cfg = tiny_model(&ds);
        let tc = tiny_train_config();
        let r = train(&ds, &cfg, &tc, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &cfg, &r.params, &r.opt, &r.occ).unwrap();
        let (params, opt, occ) = load_checkpoint(&path, &cfg).unwrap();
        for g in PARAM_GROUPS {
            assert_eq!(params.group(g), r.params.group(g));
            assert_eq!(opt.m.group(g), r.opt.m.group(g));
            assert_eq!(opt.v.group(g), r.opt.v.group(g));
        }
        assert_eq!(opt.step, r.opt.step);
        assert_eq!(occ.data(), r.occ.data());
    }
}
