//! Volume rendering of trained scenes under arbitrary lighting.
//!
//! [`pipeline`] builds the differentiable per-chunk graphs; this module wraps
//! them into whole-image rendering with plain `f32` buffers. Rays never
//! interact across chunk boundaries, so renders are byte-identical for any
//! chunk size.

pub mod occupancy;
pub mod pipeline;

use std::sync::Arc;

use crate::fields::ModelConfig;
use crate::geom::{generate_ray, Camera, Ray};
use crate::grad::ParamSet;
use crate::io::ImageBuf;

pub use occupancy::OccupancyGrid;
pub use pipeline::{
    build_chunk, ChunkGraph, ChunkIds, ChunkPlan, InsertedObject, LightEnv, PipelineOpts,
    LightColor, Specular,
};

/// Default rays per chunk for whole-image rendering.
pub const DEFAULT_CHUNK_RAYS: usize = 256;

/// One rendered view: every per-pixel quantity the pipeline produces.
pub struct Rendered {
    pub color: ImageBuf,
    pub deshadow: Option<ImageBuf>,
    pub depth: ImageBuf,
    pub normal: ImageBuf,
    pub albedo: ImageBuf,
    pub alpha: ImageBuf,
    /// Marched sun transmittance (1 everywhere when no sun is set).
    pub sun_vis: ImageBuf,
    /// The guidance head's composited visibility.
    pub guide_vis: ImageBuf,
    /// Per-pixel argmax class of the sky-blended semantic distribution.
    pub semantic: Vec<u8>,
}

fn copy_rows(buf: &mut ImageBuf, start: usize, vals: &[f32], channels: usize) {
    let dst = &mut buf.data[start * channels..start * channels + vals.len()];
    dst.copy_from_slice(vals);
}

/// Renders a full image with deterministic (bin-center) sampling.
#[allow(clippy::too_many_arguments)]
pub fn render_image(
    cfg: &ModelConfig,
    params: &Arc<ParamSet<f32>>,
    occ: Option<&OccupancyGrid>,
    cam: &Camera,
    env: &LightEnv,
    inserted: Option<&InsertedObject>,
    opts: &PipelineOpts,
    chunk_rays: usize,
) -> Rendered {
    let (w, h) = (cam.width as usize, cam.height as usize);
    let n = w * h;
    let mut out = Rendered {
        color: ImageBuf::new(cam.width, cam.height, 3),
        deshadow: opts.with_deshadow.then(|| ImageBuf::new(cam.width, cam.height, 3)),
        depth: ImageBuf::new(cam.width, cam.height, 1),
        normal: ImageBuf::new(cam.width, cam.height, 3),
        albedo: ImageBuf::new(cam.width, cam.height, 3),
        alpha: ImageBuf::new(cam.width, cam.height, 1),
        sun_vis: ImageBuf::new(cam.width, cam.height, 1),
        guide_vis: ImageBuf::new(cam.width, cam.height, 1),
        semantic: vec![0u8; n],
    };
    let chunk = chunk_rays.max(1);
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let rays: Vec<Ray> = (start..end)
            .map(|i| generate_ray(cam, (i % w) as f64, (i / w) as f64))
            .collect();
        let (g, _) =
            build_chunk(cfg, params.clone(), occ, &rays, env, inserted, opts, None, None);
        let t = &g.tape;
        copy_rows(&mut out.color, start, t.value(g.ids.color), 3);
        copy_rows(&mut out.depth, start, t.value(g.ids.depth), 1);
        copy_rows(&mut out.normal, start, t.value(g.ids.normal), 3);
        copy_rows(&mut out.albedo, start, t.value(g.ids.albedo), 3);
        copy_rows(&mut out.alpha, start, t.value(g.ids.alpha_eff), 1);
        copy_rows(&mut out.guide_vis, start, t.value(g.ids.guide_vis), 1);
        match g.ids.sun_vis {
            Some(id) => copy_rows(&mut out.sun_vis, start, t.value(id), 1),
            None => out.sun_vis.data[start..end].fill(1.0),
        }
        if let (Some(buf), Some(id)) = (out.deshadow.as_mut(), g.ids.deshadow) {
            copy_rows(buf, start, t.value(id), 3);
        }
        let sem = t.value(g.ids.sem);
        let c = cfg.n_classes;
        for r in 0..(end - start) {
            let row = &sem[r * c..(r + 1) * c];
            let mut best = 0;
            for (k, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = k;
                }
            }
            out.semantic[start + r] = best as u8;
        }
        start = end;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{init_params, ModelConfig};
    use crate::geom::{vec3, Aabb, Pose};
    use crate::grad::ParamGroup;

    fn test_cfg() -> ModelConfig {
        let aabb = Aabb::new(vec3(-2.0, -2.0, 0.0), vec3(2.0, 2.0, 2.0));
        let mut cfg = ModelConfig::with_aabb(aabb, 4, 3);
        // Small grids keep the tests quick.
        cfg.geo_grid.levels = 4;
        cfg.geo_grid.table_size = 1 << 12;
        cfg.app_grid.levels = 4;
        cfg.app_grid.table_size = 1 << 12;
        cfg.hidden = vec![16];
        cfg
    }

    fn test_camera() -> Camera {
        Camera {
            pose: Pose::look_at(vec3(0.0, -5.0, 1.2), vec3(0.0, 0.0, 0.8), vec3(0.0, 0.0, 1.0)),
            fx: 20.0,
            fy: 20.0,
            cx: 3.0,
            cy: 2.5,
            width: 6,
            height: 5,
        }
    }

    fn quick_opts() -> PipelineOpts {
        PipelineOpts { n_primary: 24, n_shadow: 12, d_max: 12.0, ..PipelineOpts::default() }
    }

    fn sun_env() -> LightEnv {
        LightEnv::training(vec3(0.3, 0.4, 0.866).normalized().unwrap())
    }

    #[test]
    fn chunk_size_does_not_change_the_image() {
        let cfg = test_cfg();
        let params = Arc::new(init_params(&cfg, 7));
        let cam = test_camera();
        let opts = PipelineOpts { with_deshadow: true, ..quick_opts() };
        let a = render_image(&cfg, &params, None, &cam, &sun_env(), None, &opts, 30);
        let b = render_image(&cfg, &params, None, &cam, &sun_env(), None, &opts, 1);
        let c = render_image(&cfg, &params, None, &cam, &sun_env(), None, &opts, 7);
        assert_eq!(a.color.data, b.color.data);
        assert_eq!(a.color.data, c.color.data);
        assert_eq!(a.depth.data, b.depth.data);
        assert_eq!(a.normal.data, b.normal.data);
        assert_eq!(a.sun_vis.data, b.sun_vis.data);
        assert_eq!(a.semantic, b.semantic);
        assert_eq!(a.deshadow.unwrap().data, b.deshadow.unwrap().data);
    }

    #[test]
    fn empty_scene_renders_the_sky_color_exactly() {
        let cfg = test_cfg();
        let mut params = init_params(&cfg, 3);
        // Push the σ bias far negative: the field becomes vacuum.
        let head = cfg.head(ParamGroup::GeoSigma);
        let last = head.layer(head.n_layers() - 1);
        params.group_mut(ParamGroup::GeoSigma)[last.b_offset] = -30.0;
        let params = Arc::new(params);
        let cam = test_camera();
        let sky = [0.12f64, 0.3, 0.55];
        let env = LightEnv {
            sun_dir: Some(vec3(0.0, 0.0, 1.0)),
            sun: LightColor::Trained,
            sky: LightColor::Fixed(sky),
            spots: Vec::new(),
        };
        let img = render_image(&cfg, &params, None, &cam, &env, None, &quick_opts(), 64);
        for px in 0..(cam.width * cam.height) as usize {
            for ch in 0..3 {
                let got = img.color.data[px * 3 + ch];
                assert_eq!(got, sky[ch] as f32, "pixel {px} channel {ch}");
            }
            assert_eq!(img.semantic[px], cfg.sky_class as u8);
        }
    }

    #[test]
    fn deshadowed_color_is_never_darker_than_lit() {
        let cfg = test_cfg();
        for seed in [1u64, 11, 42] {
            let params = Arc::new(init_params(&cfg, seed));
            let cam = test_camera();
            let opts = PipelineOpts { with_deshadow: true, ..quick_opts() };
            let img = render_image(&cfg, &params, None, &cam, &sun_env(), None, &opts, 64);
            let open = img.deshadow.as_ref().unwrap();
            for (i, (&c, &o)) in img.color.data.iter().zip(open.data.iter()).enumerate() {
                assert!(o >= c - 1e-5, "seed {seed} idx {i}: open {o} < lit {c}");
            }
        }
    }

    #[test]
    fn sun_transmittance_stays_in_unit_range() {
        let cfg = test_cfg();
        let params = Arc::new(init_params(&cfg, 5));
        let cam = test_camera();
        let img = render_image(&cfg, &params, None, &cam, &sun_env(), None, &quick_opts(), 64);
        for &v in &img.sun_vis.data {
            assert!((0.0..=1.0 + 1e-6).contains(&(v as f64)), "V = {v}");
        }
        // The default field has σ ≈ 0.05 everywhere, so shadow rays must
        // attenuate at least a little somewhere.
        assert!(img.sun_vis.data.iter().any(|&v| v < 0.9999));
    }

    #[test]
    fn backward_through_the_full_graph_is_finite() {
        let cfg = test_cfg();
        let mut raw = init_params(&cfg, 9);
        // Densify the field so rays hit real surfaces instead of the sky
        // gate: that routes gradients through the full shading path.
        let head = cfg.head(ParamGroup::GeoSigma);
        let last = head.layer(head.n_layers() - 1);
        raw.group_mut(ParamGroup::GeoSigma)[last.b_offset] = 2.0;
        // Bias normals toward +z so the sun's cosine term is active (a relu
        // gate would otherwise zero the sun path for unlucky seeds).
        let nhead = cfg.head(ParamGroup::AppNormal);
        let nlast = nhead.layer(nhead.n_layers() - 1);
        raw.group_mut(ParamGroup::AppNormal)[nlast.b_offset + 2] = 5.0;
        let params: Arc<ParamSet<f64>> = Arc::new(raw.cast());
        let cam = test_camera();
        let rays: Vec<Ray> = (0..4).map(|i| generate_ray(&cam, i as f64, 2.0)).collect();
        let opts = PipelineOpts {
            with_deshadow: true,
            with_normal_consistency: true,
            with_orientation: true,
            ..quick_opts()
        };
        let (mut g, _) =
            build_chunk(&cfg, params, None, &rays, &sun_env(), None, &opts, None, None);
        g.tape.check_nodes = true;
        let color_mean = g.tape.mean_all(g.ids.color);
        let open_mean = g.tape.mean_all(g.ids.deshadow.unwrap());
        let orient_mean = g.tape.mean_all(g.ids.orient.unwrap());
        let nd_mean = g.tape.mean_all(g.ids.normal_density.unwrap());
        let ns_mean = g.tape.mean_all(g.ids.normal_surf.unwrap());
        let one = 1.0f64;
        let loss = g.tape.weighted_sum(&[
            (one, color_mean),
            (one, open_mean),
            (one, orient_mean),
            (one, nd_mean),
            (one, ns_mean),
        ]);
        let grads = g.tape.backward(loss).expect("finite backward");
        let mut nonzero = 0;
        for (_, gs) in grads.iter() {
            if gs.iter().any(|&x| x != 0.0) {
                nonzero += 1;
            }
        }
        // Semantics and the guidance head feed no term of this loss; every
        // other group must receive gradient.
        assert_eq!(nonzero, 7, "expected 7 groups touched, got {nonzero}");
        assert!(grads.group(ParamGroup::LightSun).iter().any(|&x| x != 0.0));
        assert!(grads.group(ParamGroup::AppAlbedo).iter().any(|&x| x != 0.0));
    }

    #[test]
    fn replayed_plan_reproduces_the_graph_bitwise() {
        let cfg = test_cfg();
        let params: Arc<ParamSet<f64>> = Arc::new(init_params(&cfg, 13).cast());
        let cam = test_camera();
        let rays: Vec<Ray> = (0..3).map(|i| generate_ray(&cam, i as f64, 1.0)).collect();
        let opts = PipelineOpts { with_deshadow: true, ..quick_opts() };
        let (g1, plan) = build_chunk(
            &cfg,
            params.clone(),
            None,
            &rays,
            &sun_env(),
            None,
            &opts,
            None,
            None,
        );
        let (g2, _) = build_chunk(
            &cfg,
            params,
            None,
            &rays,
            &sun_env(),
            None,
            &opts,
            None,
            Some(&plan),
        );
        assert_eq!(g1.tape.n_nodes(), g2.tape.n_nodes());
        assert_eq!(g1.tape.value(g1.ids.color), g2.tape.value(g2.ids.color));
        assert_eq!(g1.tape.value(g1.ids.depth), g2.tape.value(g2.ids.depth));
    }
}
