//! Training objective: all supervision terms attached to a chunk graph.
//!
//! Each term is a scalar node; the bundle keeps their weighted sum plus the
//! individual forward values for logging. Ablation switches remove whole
//! terms so their effect on recovery can be measured.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::fields::{init_params, ModelConfig};
use crate::geom::{generate_ray, vec3, Aabb, Camera, Pose, Ray};
use crate::grad::gradcheck::Scenario;
use crate::grad::{NodeId, ParamGroup, ParamSet, Real, PARAM_GROUPS};
use crate::oracle::OracleScene;
use crate::renderer::pipeline::{build_chunk, ChunkGraph, LightEnv, PipelineOpts};

/// Relative weight of every supervision term.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub render: f64,
    pub deshadow: f64,
    pub vis: f64,
    pub normal_prior: f64,
    pub normal_consist: f64,
    pub orient: f64,
    pub semantic: f64,
    pub sky_depth: f64,
}

impl Default for LossWeights {
    fn default() -> LossWeights {
        LossWeights {
            render: 1.0,
            deshadow: 1.0,
            vis: 0.1,
            normal_prior: 0.05,
            normal_consist: 0.05,
            orient: 0.01,
            semantic: 0.04,
            sky_depth: 0.01,
        }
    }
}

/// Switches that drop parts of the objective (for ablation studies).
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    /// Drop the shadow-free reconstruction term.
    pub no_deshadow: bool,
    /// Supervise the marched transmittance directly with the shadow mask,
    /// skipping the guidance head.
    pub no_vis_mlp: bool,
    /// Drop visibility supervision entirely.
    pub no_vis_loss: bool,
}

/// Ground truth for one batch of rays, in chunk order.
#[derive(Debug, Clone, Default)]
pub struct RayBatch {
    /// n×3 linear color.
    pub rgb: Vec<f64>,
    /// n×3 shadow-free color.
    pub deshadow: Vec<f64>,
    /// n×1; 1 = the sun is blocked here.
    pub shadow: Vec<f64>,
    /// n×3 unit normals; rows of zeros carry no supervision.
    pub normal: Vec<f64>,
    /// n×1 class labels; 255 = ignore.
    pub semantic: Vec<u8>,
}

impl RayBatch {
    pub fn n_rays(&self) -> usize {
        self.semantic.len()
    }
}

/// The assembled objective: the node to differentiate plus logging values.
pub struct LossBundle {
    pub total: NodeId,
    /// `(term name, weighted forward value)` for every active term.
    pub logged: Vec<(&'static str, f64)>,
}

fn to_f<F: Real>(xs: &[f64]) -> Vec<F> {
    xs.iter().map(|&x| F::from_f64(x)).collect()
}

/// Mean squared error between a node and constant targets, as a node.
fn mse_node<F: Real>(g: &mut ChunkGraph<F>, pred: NodeId, target: &[f64]) -> NodeId {
    let (rows, cols) = g.tape.shape(pred);
    debug_assert_eq!(rows * cols, target.len());
    let t = g.tape.constant(rows, cols, to_f::<F>(target));
    let diff = g.tape.sub(pred, t);
    let sq = g.tape.square(diff);
    g.tape.mean_all(sq)
}

/// Attaches every active loss term to the graph and returns their weighted
/// sum. `sky_class` masks visibility supervision to rays that can carry it:
/// on ground-truth sky rays the composited transmittance is bounded by the
/// (near-zero) opacity, so a "lit" target there would only carve density.
///
/// Every term averages over the chunk's rays, with rays outside a term's
/// support contributing zero. That normalization makes the objective
/// decompose exactly over chunks: weight each chunk's total by its share of
/// the batch and the sum is the whole-batch objective, independent of how
/// the batch was split.
pub fn attach_losses<F: Real>(
    graph: &mut ChunkGraph<F>,
    batch: &RayBatch,
    weights: &LossWeights,
    ablate: &Ablation,
    sky_class: u8,
    d_max: f64,
    march_targets: Option<&[f64]>,
) -> LossBundle {
    let n = graph.n_rays;
    assert_eq!(batch.n_rays(), n, "batch/graph ray count mismatch");
    let ids = graph.ids;
    let mut terms: Vec<(&'static str, f64, NodeId)> = Vec::new();

    terms.push(("render", weights.render, mse_node(graph, ids.color, &batch.rgb)));
    if !ablate.no_deshadow {
        let node = ids.deshadow.expect("deshadow output missing from graph");
        terms.push(("deshadow", weights.deshadow, mse_node(graph, node, &batch.deshadow)));
    }

    // Visibility supervision on non-sky rays: the guidance head learns the
    // detector mask, and the marched transmittance is pulled toward the
    // (frozen) guidance values — or straight toward the mask when the
    // guidance head is ablated.
    if !ablate.no_vis_loss && weights.vis > 0.0 {
        let keep: Vec<u32> = (0..n as u32)
            .filter(|&r| batch.semantic[r as usize] != sky_class && batch.semantic[r as usize] != 255)
            .collect();
        if !keep.is_empty() {
            let share = F::from_f64(keep.len() as f64 / n as f64);
            let lit_target: Vec<F> = keep
                .iter()
                .map(|&r| F::from_f64(1.0 - batch.shadow[r as usize]))
                .collect();
            let v_marched = ids.sun_vis.expect("visibility loss requires a sun");
            let term = if ablate.no_vis_mlp {
                let v_kept = graph.tape.gather_rows(v_marched, keep);
                graph.tape.bce_loss(v_kept, lit_target)
            } else {
                let vi_kept = graph.tape.gather_rows(ids.guide_vis, keep.clone());
                let guide = graph.tape.bce_loss(vi_kept, lit_target);
                // Stop-gradient: the march target is the guidance head's
                // current forward value, taken as a constant. A derivative
                // check must hold these fixed across its perturbed rebuilds
                // (`march_targets`), because sg() deliberately hides the
                // target's parameter dependence from the backward pass.
                let vi_vals: Vec<F> = match march_targets {
                    Some(t) => {
                        assert_eq!(t.len(), keep.len(), "march target length");
                        t.iter().map(|&x| F::from_f64(x)).collect()
                    }
                    None => {
                        let all = graph.tape.value(ids.guide_vis);
                        keep.iter().map(|&r| all[r as usize]).collect()
                    }
                };
                let v_kept = graph.tape.gather_rows(v_marched, keep);
                let march = graph.tape.bce_loss(v_kept, vi_vals);
                graph.tape.add(guide, march)
            };
            let scaled = graph.tape.scale(term, share);
            terms.push(("vis", weights.vis, scaled));
        }
    }

    // Normal prior on rays that carry one (non-zero GT rows).
    if weights.normal_prior > 0.0 {
        let valid: Vec<F> = (0..n)
            .map(|r| {
                let row = &batch.normal[r * 3..r * 3 + 3];
                let has = row.iter().any(|&v| v != 0.0);
                F::from_f64(if has { 1.0 } else { 0.0 })
            })
            .collect();
        let share = F::from_f64(
            valid.iter().map(|v| v.to_f64()).sum::<f64>() / n as f64,
        );
        let t = graph.tape.constant(n, 3, to_f::<F>(&batch.normal));
        let diff = graph.tape.sub(ids.normal, t);
        let sq = graph.tape.square(diff);
        let per_ray = graph.tape.row_sum(sq);
        let term = graph.tape.mean_masked(per_ray, valid);
        let scaled = graph.tape.scale(term, share);
        terms.push(("normal_prior", weights.normal_prior, scaled));
    }

    // Predicted-vs-density normal agreement at solid surface points (the
    // mask was frozen when the chunk was built).
    if weights.normal_consist > 0.0 {
        if let (Some(ns), Some(nd)) = (ids.normal_surf, ids.normal_density) {
            let mask: Vec<F> = graph
                .solid
                .iter()
                .map(|&s| F::from_f64(if s { 1.0 } else { 0.0 }))
                .collect();
            let m = graph.solid.iter().filter(|&&s| s).count();
            let share = F::from_f64(m as f64 / n as f64);
            let diff = graph.tape.sub(ns, nd);
            let sq = graph.tape.square(diff);
            let per_ray = graph.tape.row_sum(sq);
            let term = graph.tape.mean_masked(per_ray, mask);
            let scaled = graph.tape.scale(term, share);
            terms.push(("normal_consist", weights.normal_consist, scaled));
        }
    }

    if weights.orient > 0.0 {
        if let Some(orient) = ids.orient {
            let term = graph.tape.mean_all(orient);
            terms.push(("orient", weights.orient, term));
        }
    }

    if weights.semantic > 0.0 {
        let labeled = batch.semantic.iter().filter(|&&l| l != 255).count();
        if labeled > 0 {
            let share = F::from_f64(labeled as f64 / n as f64);
            let term = graph.tape.cross_entropy_rows(ids.sem, batch.semantic.clone());
            let scaled = graph.tape.scale(term, share);
            terms.push(("semantic", weights.semantic, scaled));
        }
    }

    // Sky rays should terminate at the far plane: penalize depth shortfall.
    if weights.sky_depth > 0.0 {
        let mask: Vec<F> = batch
            .semantic
            .iter()
            .map(|&c| F::from_f64(if c == sky_class { 1.0 } else { 0.0 }))
            .collect();
        let m = batch.semantic.iter().filter(|&&c| c == sky_class).count();
        let share = F::from_f64(m as f64 / n as f64);
        let capped = graph.tape.min_const(ids.depth, F::from_f64(d_max));
        let frac = graph.tape.scale(capped, F::from_f64(1.0 / d_max));
        let shortfall = graph.tape.one_minus(frac);
        let term = graph.tape.mean_masked(shortfall, mask);
        let scaled = graph.tape.scale(term, share);
        terms.push(("sky_depth", weights.sky_depth, scaled));
    }

    let weighted: Vec<(F, NodeId)> =
        terms.iter().map(|&(_, w, id)| (F::from_f64(w), id)).collect();
    let total = graph.tape.weighted_sum(&weighted);
    let logged = terms
        .iter()
        .map(|&(name, w, id)| (name, w * graph.tape.scalar(id).to_f64()))
        .collect();
    LossBundle { total, logged }
}

/// A small but complete training setup — 4 oracle-supervised rays, 4 samples
/// each, through a tiny model — shaped into a finite-difference scenario for
/// the given loss weights. All discrete choices are frozen via the replay
/// plan. `seed` draws the healthy parameter values; terms gated by data-
/// dependent signs (orientation) need one where they actually engage.
fn objective_scenario(name: &str, weights: LossWeights, seed: u64) -> Scenario {
    let aabb = Aabb::new(vec3(-2.0, -2.0, 0.0), vec3(2.0, 2.0, 2.0));
    let mut cfg = ModelConfig::with_aabb(aabb, 4, 3);
    cfg.geo_grid.levels = 2;
    cfg.geo_grid.table_size = 128;
    cfg.geo_grid.base_res = 4;
    cfg.app_grid.levels = 2;
    cfg.app_grid.table_size = 128;
    cfg.app_grid.base_res = 4;
    cfg.hidden = vec![8];

    // Initialization-scale parameters are hostile to finite differences:
    // grid features near zero put normalization denominators (composited
    // normals, density gradients) at the origin where derivatives blow up.
    // Healthy uniform weights keep every intermediate O(1).
    let mut raw = init_params(&cfg, 21);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for g in PARAM_GROUPS {
        for v in raw.group_mut(g).iter_mut() {
            *v = rng.gen_range(-0.6..0.6);
        }
    }
    for g in [ParamGroup::LightSun, ParamGroup::LightSky] {
        for v in raw.group_mut(g).iter_mut() {
            *v = rng.gen_range(0.2..1.0);
        }
    }
    // Put real mass in the box so surfaces, shadows, and the consistency
    // mask all engage (and stay far from their decision thresholds).
    let head = cfg.head(ParamGroup::GeoSigma);
    let last = head.layer(head.n_layers() - 1);
    raw.group_mut(ParamGroup::GeoSigma)[last.b_offset] = 1.5;
    let params: ParamSet<f64> = raw.cast();

    let cam = Camera {
        pose: Pose::look_at(vec3(0.0, -4.5, 1.5), vec3(0.0, 0.0, 0.5), vec3(0.0, 0.0, 1.0)),
        fx: 16.0,
        fy: 16.0,
        cx: 3.0,
        cy: 2.0,
        width: 6,
        height: 4,
    };
    // One lit structure pixel, one shadowed ground pixel, one sky pixel, one
    // shadowed vehicle pixel: all four classes, both shadow labels, so every
    // objective term has something to bite on.
    let rays: Vec<Ray> = [(0.0, 1.0), (2.0, 2.0), (2.0, 0.0), (5.0, 3.0)]
        .iter()
        .map(|&(x, y)| generate_ray(&cam, x, y))
        .collect();

    // Oracle ground truth for those rays (any consistent targets work for a
    // derivative check; realistic ones exercise realistic code paths).
    let scene = OracleScene::default_scene();
    let mut batch = RayBatch::default();
    for ray in &rays {
        let px = scene.render_pixel(ray);
        batch.rgb.extend_from_slice(&[px.rgb.r, px.rgb.g, px.rgb.b]);
        batch.deshadow.extend_from_slice(&[px.deshadow.r, px.deshadow.g, px.deshadow.b]);
        batch.shadow.push(if px.shadow { 1.0 } else { 0.0 });
        batch.normal.extend_from_slice(&[px.normal.x, px.normal.y, px.normal.z]);
        batch.semantic.push(px.class);
    }

    let env = LightEnv::training(scene.sun_dir());
    let opts = PipelineOpts {
        n_primary: 4,
        n_shadow: 4,
        d_max: scene.d_max,
        with_deshadow: true,
        with_normal_consistency: true,
        with_orientation: true,
        ..PipelineOpts::default()
    };
    let ablate = Ablation::default();

    // Record the plan once at the base parameters; every rebuild replays it.
    // The stop-gradient march targets are frozen at base for the same
    // reason: perturbed rebuilds must only vary the differentiable math.
    let (base_graph, plan) = build_chunk(
        &cfg,
        Arc::new(params.clone()),
        None,
        &rays,
        &env,
        None,
        &opts,
        None,
        None,
    );
    let march_targets: Vec<f64> = {
        let all = base_graph.tape.value(base_graph.ids.guide_vis);
        (0..batch.n_rays())
            .filter(|&r| batch.semantic[r] != 3 && batch.semantic[r] != 255)
            .map(|r| all[r])
            .collect()
    };

    Scenario {
        name: name.to_string(),
        params,
        build: Box::new(move |p| {
            let (mut graph, _) =
                build_chunk(&cfg, p, None, &rays, &env, None, &opts, None, Some(&plan));
            let bundle = attach_losses(
                &mut graph,
                &batch,
                &weights,
                &ablate,
                3,
                scene.d_max,
                Some(&march_targets),
            );
            (graph.tape, bundle.total)
        }),
    }
}

/// The full objective with every term active, as one scenario.
pub fn pipeline_scenario() -> Scenario {
    objective_scenario("training_objective", LossWeights::default(), 93)
}

/// One scenario per objective term, each isolated at its default weight so a
/// wrong derivative can't hide behind the other terms.
pub fn loss_term_scenarios() -> Vec<Scenario> {
    let base = LossWeights::default();
    let zero = LossWeights {
        render: 0.0,
        deshadow: 0.0,
        vis: 0.0,
        normal_prior: 0.0,
        normal_consist: 0.0,
        orient: 0.0,
        semantic: 0.0,
        sky_depth: 0.0,
    };
    let mut out = Vec::new();
    let terms: [(&str, u64, Box<dyn Fn(&mut LossWeights)>); 8] = [
        ("loss_render", 93, Box::new(move |w| w.render = base.render)),
        ("loss_deshadow", 93, Box::new(move |w| w.deshadow = base.deshadow)),
        ("loss_vis", 93, Box::new(move |w| w.vis = base.vis)),
        ("loss_normal_prior", 93, Box::new(move |w| w.normal_prior = base.normal_prior)),
        ("loss_normal_consist", 93, Box::new(move |w| w.normal_consist = base.normal_consist)),
        ("loss_orient", ORIENT_SEED, Box::new(move |w| w.orient = base.orient)),
        ("loss_semantic", 93, Box::new(move |w| w.semantic = base.semantic)),
        ("loss_sky_depth", 93, Box::new(move |w| w.sky_depth = base.sky_depth)),
    ];
    for (name, seed, set) in terms {
        let mut w = zero;
        set(&mut w);
        out.push(objective_scenario(name, w, seed));
    }
    out
}

/// Seed 93 happens to draw normal-head weights whose active-sample normals
/// all face the camera, leaving the orientation penalty identically zero (a
/// vacuous derivative check). This seed makes it engage.
const ORIENT_SEED: u64 = 7;
