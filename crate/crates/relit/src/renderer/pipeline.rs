//! Differentiable per-chunk render graphs.
//!
//! [`build_chunk`] turns a batch of rays into one [`Tape`] holding the full
//! forward computation: primary marching, compositing, shadow marching toward
//! every light, shading, and background blending. The returned [`ChunkIds`]
//! name the nodes that callers read (for images) or feed into losses (for
//! training).
//!
//! Every *discrete* decision made along the way — which samples survive the
//! occupancy grid, which samples count as active, where the surface point
//! landed, which rays the sky gate fires on — is recorded into a [`ChunkPlan`].
//! Rebuilding a chunk with `replay = Some(&plan)` reuses those decisions
//! verbatim, so finite differencing the graph against its analytic gradients
//! perturbs only the continuous math. Deployed callers simply drop the plan.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::fields::mlp::HeadConfig;
use crate::fields::{ModelConfig, NORMALIZE_EPS};
use crate::geom::mesh::{ray_mesh, TriangleMesh};
use crate::geom::{ray_aabb, sample_stratified, vec3, Ray, Rgb, Vec3};
use crate::grad::{NodeId, ParamGroup, ParamSet, Real, Segments, Tape};
use crate::lighting::{spotlight_radiance, Spotlight};
use crate::renderer::occupancy::OccupancyGrid;

/// Where a light's color comes from.
#[derive(Debug, Clone, Copy)]
pub enum LightColor {
    /// The trained color parameter (differentiable).
    Trained,
    /// A fixed override, e.g. a dim night sky or a warm evening sun.
    Fixed([f64; 3]),
}

/// Lights for one render: at most one sun, one sky term, any number of
/// spotlights.
#[derive(Debug, Clone)]
pub struct LightEnv {
    /// Unit vector pointing *toward* the sun; `None` disables the sun term.
    pub sun_dir: Option<Vec3>,
    pub sun: LightColor,
    pub sky: LightColor,
    pub spots: Vec<Spotlight>,
}

impl LightEnv {
    /// The training environment: trained sun + trained sky, no spots.
    pub fn training(sun_dir: Vec3) -> LightEnv {
        LightEnv {
            sun_dir: Some(sun_dir),
            sun: LightColor::Trained,
            sky: LightColor::Trained,
            spots: Vec::new(),
        }
    }
}

/// Optional glossy lobe for spotlight shading, gated to one semantic class
/// when `class` is set (argmax of the composited distribution).
#[derive(Debug, Clone, Copy)]
pub struct Specular {
    pub strength: f64,
    pub exponent: i32,
    pub class: Option<usize>,
}

/// A mesh composited into the scene with a constant diffuse albedo.
#[derive(Debug, Clone)]
pub struct InsertedObject {
    pub mesh: TriangleMesh,
    pub albedo: Rgb,
}

/// Knobs controlling graph construction.
#[derive(Debug, Clone)]
pub struct PipelineOpts {
    /// Stratified samples along each primary ray.
    pub n_primary: usize,
    /// Unjittered samples along each shadow ray.
    pub n_shadow: usize,
    /// Samples with composite weight at or below this skip the appearance
    /// network.
    pub weight_cutoff: f64,
    /// Shadow rays start `shadow_eps_scale` primary-sample spacings past the
    /// surface point to step over the density that generated it.
    pub shadow_eps_scale: f64,
    /// Rays with accumulated opacity below this have no usable surface; their
    /// shadow marches are skipped (fully lit).
    pub surf_w_min: f64,
    /// Depth assigned to the background (and to empty rays).
    pub d_max: f64,
    /// Also produce the shadow-free color (training target for deshadowed
    /// supervision).
    pub with_deshadow: bool,
    /// Also evaluate appearance + density normals at the surface point.
    pub with_normal_consistency: bool,
    /// Also accumulate the per-ray orientation penalty.
    pub with_orientation: bool,
    pub specular: Option<Specular>,
}

impl Default for PipelineOpts {
    fn default() -> PipelineOpts {
        PipelineOpts {
            n_primary: 96,
            n_shadow: 48,
            weight_cutoff: 1e-4,
            shadow_eps_scale: 2.0,
            surf_w_min: 0.05,
            d_max: 20.0,
            with_deshadow: false,
            with_normal_consistency: false,
            with_orientation: false,
            specular: None,
        }
    }
}

/// Frozen sampling decisions for one shadow march (one light).
#[derive(Debug, Clone, Default)]
pub struct MarchPlan {
    pub pts_unit: Vec<[f64; 3]>,
    pub deltas: Vec<f64>,
    pub lens: Vec<usize>,
    /// Per-ray binary mesh-occlusion factor (1 clear, 0 blocked), when an
    /// inserted mesh participates.
    pub mesh_factor: Option<Vec<f64>>,
}

/// Every discrete decision taken while building a chunk, sufficient to
/// rebuild the identical graph topology at perturbed parameters.
#[derive(Debug, Clone, Default)]
pub struct ChunkPlan {
    pub lens: Vec<usize>,
    pub ts: Vec<f64>,
    pub deltas: Vec<f64>,
    pub pts_unit: Vec<[f64; 3]>,
    pub pts_world: Vec<Vec3>,
    pub active_idx: Vec<u32>,
    pub active_lens: Vec<usize>,
    pub surf: Vec<Vec3>,
    pub t_surf: Vec<f64>,
    pub has_surface: Vec<bool>,
    pub solid: Vec<bool>,
    pub override_rows: Vec<u32>,
    pub override_albedo: Vec<f64>,
    pub override_normal: Vec<f64>,
    pub override_depth: Vec<f64>,
    pub sun_march: Option<MarchPlan>,
    pub spot_marches: Vec<MarchPlan>,
    pub spec_gate: Option<Vec<f64>>,
    pub gate_sky: Vec<bool>,
}

/// Node handles into a chunk's tape. All per-ray nodes have one row per ray
/// in the original chunk order.
#[derive(Debug, Clone, Copy)]
pub struct ChunkIds {
    /// Per-sample density (kept primary samples, segment order).
    pub sigma: NodeId,
    /// Per-sample composite weights, same layout as `sigma`.
    pub weights: NodeId,
    /// Accumulated opacity `W` of the radiance field alone.
    pub alpha: NodeId,
    /// Opacity after any mesh override (inserted-surface rays pinned to 1).
    pub alpha_eff: NodeId,
    /// Expected termination depth with background fill (and mesh override).
    pub depth: NodeId,
    /// Composited albedo (n×3), post-override.
    pub albedo: NodeId,
    /// Composited, re-normalized normal (n×3), post-override.
    pub normal: NodeId,
    /// Semantic distribution blended with the sky class (n×classes).
    pub sem: NodeId,
    /// Composited visibility-guidance output (n×1).
    pub guide_vis: NodeId,
    /// Marched sun transmittance at the surface point (n×1), if a sun is set.
    pub sun_vis: Option<NodeId>,
    /// Final color after background blending and the sky gate (n×3).
    pub color: NodeId,
    /// Shadow-free color, when requested (n×3).
    pub deshadow: Option<NodeId>,
    /// Per-ray orientation penalty (n×1), when requested.
    pub orient: Option<NodeId>,
    /// Appearance-head normal at the surface point (n×3), when requested.
    pub normal_surf: Option<NodeId>,
    /// Negated, normalized density gradient at the surface point (n×3),
    /// when requested.
    pub normal_density: Option<NodeId>,
}

/// A fully built chunk: the tape plus the nodes and frozen per-ray facts a
/// caller needs.
pub struct ChunkGraph<F: Real> {
    pub tape: Tape<F>,
    pub n_rays: usize,
    pub ids: ChunkIds,
    /// World positions of the kept primary samples (for occupancy feedback).
    pub sample_pts: Vec<Vec3>,
    /// Rays the sky gate fired on.
    pub gate_sky: Vec<bool>,
    /// Rays with a usable surface point.
    pub has_surface: Vec<bool>,
    /// Rays whose surface point lies on solid field geometry (opaque, not an
    /// inserted mesh) — the support of the normal-consistency objective.
    pub solid: Vec<bool>,
    /// The shading/shadow anchor point of each ray.
    pub surf: Vec<Vec3>,
}

/// Runs `x` through a head's layers on the tape, ReLU between layers, raw
/// final output. Returns the output node and the hidden-layer preactivation
/// nodes (needed to replay ReLU masks inside directional derivatives).
fn head_chain<F: Real>(
    tape: &mut Tape<F>,
    x: NodeId,
    group: ParamGroup,
    head: &HeadConfig,
) -> (NodeId, Vec<NodeId>) {
    let mut cur = x;
    let mut pres = Vec::new();
    for l in 0..head.n_layers() {
        let z = tape.linear(cur, group, head.layer(l), true);
        if l + 1 < head.n_layers() {
            pres.push(z);
            cur = tape.relu(z);
        } else {
            cur = z;
        }
    }
    (cur, pres)
}

/// Density at a set of unit-cube points, as tape nodes: hash encoding, the
/// geometry head, softplus. Returns (σ, final preactivation, hidden preacts).
fn sigma_chain<F: Real>(
    tape: &mut Tape<F>,
    cfg: &ModelConfig,
    pts_unit: Vec<[f64; 3]>,
) -> (NodeId, NodeId, Vec<NodeId>) {
    let head = cfg.head(ParamGroup::GeoSigma);
    let enc = tape.encode_grid(ParamGroup::GeoGrid, &cfg.geo_grid, pts_unit);
    let (pre, pres) = head_chain(tape, enc, ParamGroup::GeoSigma, &head);
    let sigma = tape.softplus(pre);
    (sigma, pre, pres)
}

struct MarchSpec<'a> {
    origins: &'a [Vec3],
    dirs: Vec<Vec3>,
    /// March no farther than this distance from the (offset) origin.
    max_dist: Vec<f64>,
    active: &'a [bool],
    eps: &'a [f64],
}

/// Transmittance from per-ray origins toward per-ray directions: fixed-count
/// unjittered samples over the in-box range, `V = exp(−Σ σᵢ δᵢ)`. Inactive or
/// out-of-box rays get an empty segment and therefore V = 1.
fn march_transmittance<F: Real>(
    tape: &mut Tape<F>,
    cfg: &ModelConfig,
    occ: Option<&OccupancyGrid>,
    n_samples: usize,
    spec: &MarchSpec,
    replay: Option<&MarchPlan>,
) -> (NodeId, MarchPlan) {
    let n_rays = spec.origins.len();
    let aabb = cfg.aabb();
    let plan = match replay {
        Some(p) => p.clone(),
        None => {
            let mut plan = MarchPlan::default();
            plan.lens = vec![0; n_rays];
            for r in 0..n_rays {
                if !spec.active[r] {
                    continue;
                }
                let dir = spec.dirs[r];
                let o = spec.origins[r] + dir * spec.eps[r];
                let Some((s0, s1)) = ray_aabb(&Ray { origin: o, dir }, &aabb) else {
                    continue;
                };
                let s1 = s1.min(spec.max_dist[r] - spec.eps[r]);
                if s1 - s0 <= 1e-9 {
                    continue;
                }
                let h = (s1 - s0) / n_samples as f64;
                for t in sample_stratified(s0, s1, n_samples, None) {
                    let p = o + dir * t;
                    if let Some(g) = occ {
                        if !g.active(p) {
                            continue;
                        }
                    }
                    plan.pts_unit.push(cfg.to_unit(p));
                    plan.deltas.push(h);
                    plan.lens[r] += 1;
                }
            }
            plan
        }
    };

    let segs = Arc::new(Segments::from_lens(&plan.lens));
    let deltas: Vec<F> = plan.deltas.iter().map(|&d| F::from_f64(d)).collect();
    let (sigma, _, _) = sigma_chain(tape, cfg, plan.pts_unit.clone());
    let tau = tape.segment_weighted_sum_const(sigma, deltas, 1, segs);
    let neg_tau = tape.neg(tau);
    let mut v = tape.exp(neg_tau);
    tape.set_label(v, "march_vis");
    if let Some(factor) = &plan.mesh_factor {
        let f: Vec<F> = factor.iter().map(|&x| F::from_f64(x)).collect();
        let fnode = tape.constant(n_rays, 1, f);
        v = tape.mul(v, fnode);
    }
    (v, plan)
}

/// True when the mesh blocks the segment from `from` toward `dir` within
/// `max_t` (a small start offset avoids self-intersection at mesh surfaces).
fn mesh_blocks(mesh: &TriangleMesh, from: Vec3, dir: Vec3, eps: f64, max_t: f64) -> bool {
    let ray = Ray { origin: from + dir * eps, dir };
    match ray_mesh(&ray, mesh) {
        Some(hit) => hit.t < max_t - eps,
        None => false,
    }
}

/// Builds the full differentiable graph for one batch of rays.
///
/// `jitter` stratifies primary samples (training); `None` uses bin centers
/// (deterministic inference). `replay` freezes all discrete decisions to a
/// previously recorded plan; the caller must pass the same rays, environment,
/// and options that produced it.
#[allow(clippy::too_many_arguments)]
pub fn build_chunk<F: Real>(
    cfg: &ModelConfig,
    params: Arc<ParamSet<F>>,
    occ: Option<&OccupancyGrid>,
    rays: &[Ray],
    env: &LightEnv,
    inserted: Option<&InsertedObject>,
    opts: &PipelineOpts,
    mut jitter: Option<&mut ChaCha8Rng>,
    replay: Option<&ChunkPlan>,
) -> (ChunkGraph<F>, ChunkPlan) {
    let n_rays = rays.len();
    let aabb = cfg.aabb();
    let mut plan = ChunkPlan::default();

    // ---- primary sampling -------------------------------------------------
    // Each sample represents one stratum of width (t1−t0)/n, whether jittered
    // or centered, so δ is the stratum width; occupancy-skipped samples are
    // dropped outright (σ there would contribute nothing anyway).
    let mut ray_range = vec![None::<(f64, f64)>; n_rays];
    let mut spacing = vec![0.0f64; n_rays];
    for (r, ray) in rays.iter().enumerate() {
        if let Some((t0, t1)) = ray_aabb(ray, &aabb) {
            if t1 - t0 > 1e-9 {
                ray_range[r] = Some((t0, t1));
                spacing[r] = (t1 - t0) / opts.n_primary as f64;
            }
        }
    }
    match replay {
        Some(p) => {
            plan.lens = p.lens.clone();
            plan.ts = p.ts.clone();
            plan.deltas = p.deltas.clone();
            plan.pts_unit = p.pts_unit.clone();
            plan.pts_world = p.pts_world.clone();
        }
        None => {
            plan.lens = vec![0; n_rays];
            for (r, ray) in rays.iter().enumerate() {
                let Some((t0, t1)) = ray_range[r] else { continue };
                let ts = match jitter.as_deref_mut() {
                    Some(rng) => {
                        let mut draw = || rng.gen_range(0.0..1.0);
                        sample_stratified(t0, t1, opts.n_primary, Some(&mut draw))
                    }
                    None => sample_stratified(t0, t1, opts.n_primary, None),
                };
                for &t in &ts {
                    let p = ray.at(t);
                    if let Some(g) = occ {
                        if !g.active(p) {
                            continue;
                        }
                    }
                    plan.ts.push(t);
                    plan.deltas.push(spacing[r]);
                    plan.pts_unit.push(cfg.to_unit(p));
                    plan.pts_world.push(p);
                    plan.lens[r] += 1;
                }
            }
        }
    }
    let segs = Arc::new(Segments::from_lens(&plan.lens));

    // ---- density, weights, opacity, depth ---------------------------------
    let mut tape = Tape::new(params);
    let (sigma, _, _) = sigma_chain(&mut tape, cfg, plan.pts_unit.clone());
    tape.set_label(sigma, "sigma");
    let deltas_f: Vec<F> = plan.deltas.iter().map(|&d| F::from_f64(d)).collect();
    let weights = tape.composite_weights(sigma, deltas_f, segs.clone());
    let alpha = tape.segment_sum(weights, segs.clone());
    tape.set_label(alpha, "alpha");
    let ts_f: Vec<F> = plan.ts.iter().map(|&t| F::from_f64(t)).collect();
    let d_fg = tape.segment_weighted_sum_const(weights, ts_f, 1, segs.clone());
    let one_minus_alpha = tape.one_minus(alpha);
    let d_bg = tape.scale(one_minus_alpha, F::from_f64(opts.d_max));
    let depth_scene = tape.add(d_fg, d_bg);

    // ---- active-sample selection and appearance ----------------------------
    match replay {
        Some(p) => {
            plan.active_idx = p.active_idx.clone();
            plan.active_lens = p.active_lens.clone();
        }
        None => {
            plan.active_lens = vec![0; n_rays];
            let wv = tape.value(weights);
            for r in 0..n_rays {
                for i in segs.range(r) {
                    if wv[i].to_f64() > opts.weight_cutoff {
                        plan.active_idx.push(i as u32);
                        plan.active_lens[r] += 1;
                    }
                }
            }
        }
    }
    let active_segs = Arc::new(Segments::from_lens(&plan.active_lens));
    let active_pts: Vec<[f64; 3]> =
        plan.active_idx.iter().map(|&i| plan.pts_unit[i as usize]).collect();
    let w_act = tape.gather_rows(weights, plan.active_idx.clone());

    let enc_app = tape.encode_grid(ParamGroup::AppGrid, &cfg.app_grid, active_pts);
    let alb_head = cfg.head(ParamGroup::AppAlbedo);
    let (alb_raw, _) = head_chain(&mut tape, enc_app, ParamGroup::AppAlbedo, &alb_head);
    let albedo_smp = tape.sigmoid(alb_raw);
    let nrm_head = cfg.head(ParamGroup::AppNormal);
    let (nrm_raw, _) = head_chain(&mut tape, enc_app, ParamGroup::AppNormal, &nrm_head);
    let normal_smp = tape.normalize_rows(nrm_raw, F::from_f64(NORMALIZE_EPS));
    let sem_head = cfg.head(ParamGroup::AppSemantic);
    let (sem_raw, _) = head_chain(&mut tape, enc_app, ParamGroup::AppSemantic, &sem_head);
    let sem_smp = tape.softmax_rows(sem_raw);
    let gv_head = cfg.head(ParamGroup::AppGuidevis);
    let (gv_raw, _) = head_chain(&mut tape, enc_app, ParamGroup::AppGuidevis, &gv_head);
    let gv_smp = tape.sigmoid(gv_raw);

    let albedo_c = tape.segment_weighted_sum(w_act, albedo_smp, active_segs.clone());
    let normal_acc = tape.segment_weighted_sum(w_act, normal_smp, active_segs.clone());
    let normal_c = tape.normalize_rows(normal_acc, F::from_f64(NORMALIZE_EPS));
    tape.set_label(normal_c, "normal");
    let sem_c = tape.segment_weighted_sum(w_act, sem_smp, active_segs.clone());
    let guide_vis = tape.segment_weighted_sum(w_act, gv_smp, active_segs.clone());
    tape.set_label(guide_vis, "guide_vis");

    let orient = if opts.with_orientation {
        // Penalize sample normals that point away from the camera:
        // Σᵢ wᵢ · max(0, nᵢ·d)² per ray, d the ray direction.
        let mut dir_rows: Vec<F> = Vec::with_capacity(plan.active_idx.len() * 3);
        for r in 0..n_rays {
            for _ in active_segs.range(r) {
                let d = rays[r].dir;
                dir_rows.push(F::from_f64(d.x));
                dir_rows.push(F::from_f64(d.y));
                dir_rows.push(F::from_f64(d.z));
            }
        }
        let dot = tape.row_dot_const_rows(normal_smp, dir_rows);
        let pos = tape.relu(dot);
        let pos2 = tape.square(pos);
        let wpos2 = tape.mul(pos2, w_act);
        Some(tape.segment_sum(wpos2, active_segs.clone()))
    } else {
        None
    };

    // ---- surface points -----------------------------------------------------
    // The shading anchor: expected depth normalized by opacity, clamped into
    // the ray's in-box range. Low-opacity rays anchor at box exit and skip
    // shadow marching. These are frozen facts (plain floats), not tape nodes.
    match replay {
        Some(p) => {
            plan.surf = p.surf.clone();
            plan.t_surf = p.t_surf.clone();
            plan.has_surface = p.has_surface.clone();
        }
        None => {
            let av = tape.value(alpha);
            let dv = tape.value(d_fg);
            plan.surf = Vec::with_capacity(n_rays);
            plan.t_surf = Vec::with_capacity(n_rays);
            plan.has_surface = Vec::with_capacity(n_rays);
            for r in 0..n_rays {
                let (t, has) = match ray_range[r] {
                    Some((t0, t1)) => {
                        let a = av[r].to_f64();
                        if a > opts.surf_w_min {
                            ((dv[r].to_f64() / a).clamp(t0, t1), true)
                        } else {
                            (t1, false)
                        }
                    }
                    None => (opts.d_max, false),
                };
                plan.t_surf.push(t);
                plan.surf.push(rays[r].at(t));
                plan.has_surface.push(has);
            }
        }
    }

    // ---- mesh insertion ------------------------------------------------------
    // Where the inserted mesh is the nearest surface, its attributes replace
    // the composited ones and the ray becomes fully opaque; the shadow anchor
    // moves onto the mesh.
    if replay.is_none() {
        if let Some(obj) = inserted {
            for (r, ray) in rays.iter().enumerate() {
                let Some(hit) = ray_mesh(ray, &obj.mesh) else { continue };
                let t_scene = if plan.has_surface[r] { plan.t_surf[r] } else { f64::INFINITY };
                if hit.t < t_scene {
                    plan.override_rows.push(r as u32);
                    plan.override_albedo.extend_from_slice(&[obj.albedo.r, obj.albedo.g, obj.albedo.b]);
                    plan.override_normal.extend_from_slice(&[hit.normal.x, hit.normal.y, hit.normal.z]);
                    plan.override_depth.push(hit.t);
                    plan.t_surf[r] = hit.t;
                    plan.surf[r] = ray.at(hit.t);
                    plan.has_surface[r] = true;
                }
            }
        }
    } else if let Some(p) = replay {
        plan.override_rows = p.override_rows.clone();
        plan.override_albedo = p.override_albedo.clone();
        plan.override_normal = p.override_normal.clone();
        plan.override_depth = p.override_depth.clone();
    }
    // Solid-surface support for the normal-consistency objective — frozen
    // here so replay keeps the mask fixed while opacity moves.
    match replay {
        Some(p) => plan.solid = p.solid.clone(),
        None => {
            let av = tape.value(alpha);
            plan.solid = (0..n_rays)
                .map(|r| {
                    plan.has_surface[r]
                        && av[r].to_f64() >= 0.5
                        && !plan.override_rows.contains(&(r as u32))
                })
                .collect();
        }
    }

    let overridden = !plan.override_rows.is_empty();
    let (albedo_o, normal_o, depth_o, alpha_eff) = if overridden {
        let alb: Vec<F> = plan.override_albedo.iter().map(|&v| F::from_f64(v)).collect();
        let nrm: Vec<F> = plan.override_normal.iter().map(|&v| F::from_f64(v)).collect();
        let dep: Vec<F> = plan.override_depth.iter().map(|&v| F::from_f64(v)).collect();
        let ones: Vec<F> = vec![F::from_f64(1.0); plan.override_rows.len()];
        (
            tape.override_rows(albedo_c, plan.override_rows.clone(), alb),
            tape.override_rows(normal_c, plan.override_rows.clone(), nrm),
            tape.override_rows(depth_scene, plan.override_rows.clone(), dep),
            tape.override_rows(alpha, plan.override_rows.clone(), ones),
        )
    } else {
        (albedo_c, normal_c, depth_scene, alpha)
    };

    // ---- shadow march toward the sun ----------------------------------------
    let eps: Vec<f64> =
        (0..n_rays).map(|r| opts.shadow_eps_scale * spacing[r].max(1e-4)).collect();
    let mut sun_vis = None;
    if let Some(sun_dir) = env.sun_dir {
        let mut mspec = MarchSpec {
            origins: &plan.surf,
            dirs: vec![sun_dir; n_rays],
            max_dist: vec![f64::INFINITY; n_rays],
            active: &plan.has_surface,
            eps: &eps,
        };
        // Frozen mesh-occlusion factor, decided before the march so replay
        // finds it inside the recorded plan.
        if replay.is_none() {
            if let Some(obj) = inserted {
                let factor: Vec<f64> = (0..n_rays)
                    .map(|r| {
                        if plan.has_surface[r]
                            && mesh_blocks(&obj.mesh, plan.surf[r], sun_dir, eps[r], f64::INFINITY)
                        {
                            0.0
                        } else {
                            1.0
                        }
                    })
                    .collect();
                mspec.max_dist = vec![f64::INFINITY; n_rays];
                let (v, mut mp) = march_transmittance(
                    &mut tape,
                    cfg,
                    occ,
                    opts.n_shadow,
                    &mspec,
                    None,
                );
                mp.mesh_factor = Some(factor.clone());
                let f: Vec<F> = factor.iter().map(|&x| F::from_f64(x)).collect();
                let fnode = tape.constant(n_rays, 1, f);
                let v = tape.mul(v, fnode);
                sun_vis = Some(v);
                plan.sun_march = Some(mp);
            } else {
                let (v, mp) =
                    march_transmittance(&mut tape, cfg, occ, opts.n_shadow, &mspec, None);
                sun_vis = Some(v);
                plan.sun_march = Some(mp);
            }
        } else if let Some(p) = replay {
            let mp = p.sun_march.as_ref().expect("replay plan missing sun march");
            let (v, mp) = march_transmittance(&mut tape, cfg, occ, opts.n_shadow, &mspec, Some(mp));
            sun_vis = Some(v);
            plan.sun_march = Some(mp);
        }
    }

    // ---- irradiance ----------------------------------------------------------
    let sky_row = match env.sky {
        LightColor::Trained => tape.param_vec(ParamGroup::LightSky),
        LightColor::Fixed(c) => {
            tape.constant(1, 3, c.iter().map(|&v| F::from_f64(v)).collect())
        }
    };
    let sky_rows = tape.broadcast_row(sky_row, n_rays);
    let mut irr = sky_rows;
    let mut irr_open = sky_rows;
    if let Some(sun_dir) = env.sun_dir {
        let l: Vec<F> = [sun_dir.x, sun_dir.y, sun_dir.z].iter().map(|&v| F::from_f64(v)).collect();
        let ndl_raw = tape.row_dot_const(normal_o, l);
        let ndl = tape.relu(ndl_raw);
        let shade = tape.mul(ndl, sun_vis.expect("sun march exists when sun is set"));
        let l_sun = match env.sun {
            LightColor::Trained => tape.param_vec(ParamGroup::LightSun),
            LightColor::Fixed(c) => {
                tape.constant(1, 3, c.iter().map(|&v| F::from_f64(v)).collect())
            }
        };
        let sun_rows = tape.col_times_row(shade, l_sun);
        irr = tape.add(irr, sun_rows);
        if opts.with_deshadow {
            let open_rows = tape.col_times_row(ndl, l_sun);
            irr_open = tape.add(irr_open, open_rows);
        }
    }

    // Specular gate: rays whose composited semantics argmax to the requested
    // class (decided on forward values, frozen in the plan).
    if replay.is_none() {
        if let Some(spec) = opts.specular {
            let gate: Vec<f64> = match spec.class {
                None => vec![1.0; n_rays],
                Some(cls) => {
                    let sv = tape.value(sem_c);
                    let c = cfg.n_classes;
                    (0..n_rays)
                        .map(|r| {
                            let row = &sv[r * c..(r + 1) * c];
                            let mut best = 0;
                            for (k, &p) in row.iter().enumerate() {
                                if p > row[best] {
                                    best = k;
                                }
                            }
                            if best == cls {
                                1.0
                            } else {
                                0.0
                            }
                        })
                        .collect()
                }
            };
            plan.spec_gate = Some(gate);
        }
    } else if let Some(p) = replay {
        plan.spec_gate = p.spec_gate.clone();
    }

    let mut spec_acc: Option<NodeId> = None;
    for (k, spot) in env.spots.iter().enumerate() {
        let pos = spot.pos();
        let mut dirs = Vec::with_capacity(n_rays);
        let mut max_dist = Vec::with_capacity(n_rays);
        let mut active = Vec::with_capacity(n_rays);
        let mut radiance: Vec<F> = Vec::with_capacity(n_rays * 3);
        for r in 0..n_rays {
            let to_light = pos - plan.surf[r];
            let dist = to_light.norm();
            match to_light.normalized() {
                Some(d) if plan.has_surface[r] => {
                    dirs.push(d);
                    max_dist.push(dist);
                    active.push(true);
                }
                _ => {
                    dirs.push(vec3(0.0, 0.0, 1.0));
                    max_dist.push(0.0);
                    active.push(false);
                }
            }
            let rad = spotlight_radiance(spot, plan.surf[r]);
            radiance.push(F::from_f64(rad.r));
            radiance.push(F::from_f64(rad.g));
            radiance.push(F::from_f64(rad.b));
        }
        let mspec = MarchSpec {
            origins: &plan.surf,
            dirs: dirs.clone(),
            max_dist: max_dist.clone(),
            active: &active,
            eps: &eps,
        };
        let mp_replay = replay.map(|p| &p.spot_marches[k]);
        let (mut v_spot, mut mp) =
            march_transmittance(&mut tape, cfg, occ, opts.n_shadow, &mspec, mp_replay);
        if replay.is_none() {
            if let Some(obj) = inserted {
                let factor: Vec<f64> = (0..n_rays)
                    .map(|r| {
                        if active[r]
                            && mesh_blocks(&obj.mesh, plan.surf[r], dirs[r], eps[r], max_dist[r])
                        {
                            0.0
                        } else {
                            1.0
                        }
                    })
                    .collect();
                let f: Vec<F> = factor.iter().map(|&x| F::from_f64(x)).collect();
                let fnode = tape.constant(n_rays, 1, f);
                v_spot = tape.mul(v_spot, fnode);
                mp.mesh_factor = Some(factor);
            }
        } else if mp.mesh_factor.is_some() {
            // march_transmittance already applied the recorded factor.
        }
        plan.spot_marches.push(mp);

        let mut dir_rows: Vec<F> = Vec::with_capacity(n_rays * 3);
        for d in &dirs {
            dir_rows.push(F::from_f64(d.x));
            dir_rows.push(F::from_f64(d.y));
            dir_rows.push(F::from_f64(d.z));
        }
        let ndl_raw = tape.row_dot_const_rows(normal_o, dir_rows.clone());
        let ndl = tape.relu(ndl_raw);
        let shade = tape.mul(ndl, v_spot);
        let rad_node = tape.constant(n_rays, 3, radiance);
        let contrib = tape.mul_col_broadcast(rad_node, shade);
        irr = tape.add(irr, contrib);

        if let Some(spec) = opts.specular {
            // Blinn-free mirror lobe: r = 2(n·v)n − v against the light
            // direction, gated per ray, attenuated by the same transmittance.
            let mut v_rows: Vec<F> = Vec::with_capacity(n_rays * 3);
            for ray in rays {
                let v = ray.dir * -1.0;
                v_rows.push(F::from_f64(v.x));
                v_rows.push(F::from_f64(v.y));
                v_rows.push(F::from_f64(v.z));
            }
            let ndv = tape.row_dot_const_rows(normal_o, v_rows.clone());
            let two_ndv = tape.scale(ndv, F::from_f64(2.0));
            let nn = tape.mul_col_broadcast(normal_o, two_ndv);
            let v_node = tape.constant(n_rays, 3, v_rows);
            let refl = tape.sub(nn, v_node);
            let rdl_raw = tape.row_dot_const_rows(refl, dir_rows);
            let rdl = tape.relu(rdl_raw);
            let lobe = tape.powi(rdl, spec.exponent);
            let gate: Vec<F> = plan
                .spec_gate
                .as_ref()
                .map(|g| g.iter().map(|&x| F::from_f64(x * spec.strength)).collect())
                .unwrap_or_else(|| vec![F::from_f64(spec.strength); n_rays]);
            let gate_node = tape.constant(n_rays, 1, gate);
            let gated = tape.mul(lobe, gate_node);
            let shaded = tape.mul(gated, v_spot);
            let s_contrib = tape.mul_col_broadcast(rad_node, shaded);
            spec_acc = Some(match spec_acc {
                Some(acc) => tape.add(acc, s_contrib),
                None => s_contrib,
            });
        }
    }

    // ---- color assembly, background, sky gate --------------------------------
    let mut c_fg = tape.mul(albedo_o, irr);
    if let Some(s) = spec_acc {
        c_fg = tape.add(c_fg, s);
    }
    let one_minus_eff = tape.one_minus(alpha_eff);
    let fg_part = tape.mul_col_broadcast(c_fg, alpha_eff);
    let bg_part = tape.col_times_row(one_minus_eff, sky_row);
    let c_blend = tape.add(fg_part, bg_part);

    // Sky-blended semantics: the escaped probability mass votes for the sky
    // class (pre-override opacity — semantics describe the radiance field).
    let mut e_sky = vec![F::from_f64(0.0); cfg.n_classes];
    e_sky[cfg.sky_class] = F::from_f64(1.0);
    let e_sky_node = tape.constant(1, cfg.n_classes, e_sky);
    let escaped = tape.one_minus(alpha);
    let sky_vote = tape.col_times_row(escaped, e_sky_node);
    let sem_blend = tape.add(sem_c, sky_vote);
    tape.set_label(sem_blend, "semantics");

    match replay {
        Some(p) => plan.gate_sky = p.gate_sky.clone(),
        None => {
            // A ray is pure sky when the field is mostly transparent and the
            // blended semantics argmax to the sky class — and no inserted
            // surface covers it.
            let av = tape.value(alpha);
            let sv = tape.value(sem_blend);
            let c = cfg.n_classes;
            let mut covered = vec![false; n_rays];
            for &r in &plan.override_rows {
                covered[r as usize] = true;
            }
            plan.gate_sky = (0..n_rays)
                .map(|r| {
                    if covered[r] || av[r].to_f64() >= 0.5 {
                        return false;
                    }
                    let row = &sv[r * c..(r + 1) * c];
                    let mut best = 0;
                    for (k, &p) in row.iter().enumerate() {
                        if p > row[best] {
                            best = k;
                        }
                    }
                    best == cfg.sky_class
                })
                .collect();
        }
    }
    let sky_full = tape.broadcast_row(sky_row, n_rays);
    let color = tape.select_rows(plan.gate_sky.clone(), sky_full, c_blend);
    tape.set_label(color, "color");

    let deshadow = if opts.with_deshadow {
        let c_open = tape.mul(albedo_o, irr_open);
        let fg = tape.mul_col_broadcast(c_open, alpha_eff);
        let blend = tape.add(fg, bg_part);
        let sel = tape.select_rows(plan.gate_sky.clone(), sky_full, blend);
        tape.set_label(sel, "deshadow");
        Some(sel)
    } else {
        None
    };

    // ---- surface normals for the consistency pair -----------------------------
    let (normal_surf, normal_density) = if opts.with_normal_consistency {
        let surf_unit: Vec<[f64; 3]> = plan.surf.iter().map(|&p| cfg.to_unit(p)).collect();
        let enc_s = tape.encode_grid(ParamGroup::AppGrid, &cfg.app_grid, surf_unit.clone());
        let (nr, _) = head_chain(&mut tape, enc_s, ParamGroup::AppNormal, &nrm_head);
        let n_surf = tape.normalize_rows(nr, F::from_f64(NORMALIZE_EPS));

        // −∇σ/‖∇σ‖ via three forward directional derivatives. Each chain
        // reuses the σ head's preactivation signs as fixed ReLU masks and
        // ends with softplus' = sigmoid(preactivation), kept on the tape so
        // the pair couples second-order geometry into the gradient.
        let geo_head = cfg.head(ParamGroup::GeoSigma);
        let (_, pre_final, pres) = sigma_chain(&mut tape, cfg, surf_unit.clone());
        let dsig_final = tape.sigmoid(pre_final);
        let us = cfg.unit_scale();
        let mut partials = Vec::with_capacity(3);
        for axis in 0..3 {
            let mut dir = [0.0; 3];
            dir[axis] = us[axis];
            let mut d = tape.encode_grid_jvp(
                ParamGroup::GeoGrid,
                &cfg.geo_grid,
                surf_unit.clone(),
                vec![dir; n_rays],
            );
            for (l, pre) in pres.iter().enumerate() {
                d = tape.linear(d, ParamGroup::GeoSigma, geo_head.layer(l), false);
                let (rows, cols) = tape.shape(*pre);
                let mask: Vec<F> = tape
                    .value(*pre)
                    .iter()
                    .map(|&z| if z.to_f64() > 0.0 { F::from_f64(1.0) } else { F::from_f64(0.0) })
                    .collect();
                let mask_node = tape.constant(rows, cols, mask);
                d = tape.mul(d, mask_node);
            }
            d = tape.linear(d, ParamGroup::GeoSigma, geo_head.layer(geo_head.n_layers() - 1), false);
            let dsig = tape.mul(d, dsig_final);
            partials.push(dsig);
        }
        let grad = tape.concat_cols(&partials);
        let neg_grad = tape.neg(grad);
        let n_hat = tape.normalize_rows(neg_grad, F::from_f64(1e-12));
        tape.set_label(n_hat, "density_normal");
        (Some(n_surf), Some(n_hat))
    } else {
        (None, None)
    };

    let ids = ChunkIds {
        sigma,
        weights,
        alpha,
        alpha_eff,
        depth: depth_o,
        albedo: albedo_o,
        normal: normal_o,
        sem: sem_blend,
        guide_vis,
        sun_vis,
        color,
        deshadow,
        orient,
        normal_surf,
        normal_density,
    };
    let graph = ChunkGraph {
        tape,
        n_rays,
        ids,
        sample_pts: plan.pts_world.clone(),
        gate_sky: plan.gate_sky.clone(),
        has_surface: plan.has_surface.clone(),
        solid: plan.solid.clone(),
        surf: plan.surf.clone(),
    };
    (graph, plan)
}
