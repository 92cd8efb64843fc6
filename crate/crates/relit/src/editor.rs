//! Render-time scene edits: a moved sun, night lighting, inserted meshes.
//!
//! Edits never touch trained parameters — they only change the light
//! environment and the per-ray surface overrides the renderer applies, so
//! any combination (relit scene with an inserted object under spotlights)
//! composes for free.

use crate::geom::{vec3, Rgb, TriangleMesh};
use crate::io::Dataset;
use crate::lighting::{sun_direction, NightRig};
use crate::renderer::{InsertedObject, LightEnv, LightColor};

/// Daylight with the sun at explicit angles; trained light colors.
pub fn relight_env(azimuth: f64, zenith: f64) -> LightEnv {
    LightEnv::training(sun_direction(azimuth, zenith))
}

/// The dataset's sun swung about +z by `delta_azimuth` radians, elevation
/// unchanged.
pub fn rotated_sun_env(ds: &Dataset, delta_azimuth: f64) -> LightEnv {
    relight_env(ds.sun_azimuth + delta_azimuth, ds.sun_zenith)
}

/// Night: the sun off, the rig's dim sky as a fixed color, its spotlights
/// on (each occluded by the trained density like the sun would be).
pub fn night_env(rig: &NightRig) -> LightEnv {
    LightEnv {
        sun_dir: None,
        sun: LightColor::Trained,
        sky: LightColor::Fixed(rig.sky),
        spots: rig.spots.clone(),
    }
}

/// An arbitrary mesh as an insertable object.
pub fn mesh_object(mesh: TriangleMesh, albedo: Rgb) -> InsertedObject {
    InsertedObject { mesh, albedo }
}

/// A cube of side `size`, yawed about its own vertical axis, footprint
/// centered on `(cx, cy)`, resting on the ground plane.
pub fn cube_object(size: f64, yaw: f64, cx: f64, cy: f64, albedo: Rgb) -> InsertedObject {
    let centered = TriangleMesh::unit_cube().transformed(1.0, 0.0, vec3(-0.5, -0.5, 0.0));
    mesh_object(centered.transformed(size, yaw, vec3(cx, cy, 0.0)), albedo)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{init_params, ModelConfig};
    use crate::geom::{generate_ray, ray_mesh, rgb, Aabb, Camera, Pose};
    use crate::grad::{ParamGroup, ParamSet};
    use crate::lighting::Spotlight;
    use crate::renderer::{render_image, PipelineOpts, Rendered};
    use std::sync::Arc;

    fn test_cfg() -> ModelConfig {
        let aabb = Aabb::new(vec3(-2.0, -2.0, 0.0), vec3(2.0, 2.0, 2.0));
        let mut cfg = ModelConfig::with_aabb(aabb, 4, 3);
        for grid in [&mut cfg.geo_grid, &mut cfg.app_grid] {
            grid.levels = 4;
            grid.table_size = 1 << 12;
        }
        cfg.hidden = vec![16];
        cfg
    }

    /// Init params with the final σ bias pinned: large negative = vacuum,
    /// positive = uniform fog.
    fn params_with_sigma_bias(cfg: &ModelConfig, bias: f32) -> Arc<ParamSet<f32>> {
        let mut p = init_params(cfg, 7);
        let head = cfg.head(ParamGroup::GeoSigma);
        let last = head.layer(head.n_layers() - 1);
        p.group_mut(ParamGroup::GeoSigma)[last.b_offset] = bias;
        Arc::new(p)
    }

    fn quick_opts() -> PipelineOpts {
        PipelineOpts { n_primary: 24, n_shadow: 12, d_max: 12.0, ..PipelineOpts::default() }
    }

    fn camera(eye: [f64; 3], at: [f64; 3]) -> Camera {
        Camera {
            pose: Pose::look_at(
                vec3(eye[0], eye[1], eye[2]),
                vec3(at[0], at[1], at[2]),
                vec3(0.0, 0.0, 1.0),
            ),
            fx: 20.0,
            fy: 20.0,
            cx: 4.0,
            cy: 3.0,
            width: 8,
            height: 6,
        }
    }

    fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
    }

    #[test]
    fn relight_moves_the_sun_and_keeps_trained_colors() {
        let env = relight_env(0.3, 0.9);
        assert_eq!(env.sun_dir, Some(sun_direction(0.3, 0.9)));
        assert!(matches!(env.sky, LightColor::Trained));
        assert!(env.spots.is_empty());

        let dir = sun_direction(0.3, 0.9);
        let swung = sun_direction(0.3 + 0.5, 0.9);
        // Elevation (the z component) survives an azimuth swing.
        assert!((dir.z - swung.z).abs() < 1e-12);
        assert!((dir - swung).norm() > 0.1);
    }

    #[test]
    fn night_env_is_sunless_with_a_dim_fixed_sky() {
        let rig = NightRig {
            sky: [0.01, 0.01, 0.02],
            spots: vec![Spotlight {
                position: [0.0, 0.0, 4.0],
                direction: [0.0, 0.0, -1.0],
                color: [5.0, 5.0, 4.0],
                exponent: 2.0,
            }],
        };
        let env = night_env(&rig);
        assert_eq!(env.sun_dir, None);
        assert!(matches!(env.sky, LightColor::Fixed(c) if c == [0.01, 0.01, 0.02]));
        assert_eq!(env.spots.len(), 1);
    }

    #[test]
    fn a_mesh_outside_every_ray_changes_nothing() {
        let cfg = test_cfg();
        let params = params_with_sigma_bias(&cfg, 2.0);
        let cam = camera([0.0, -3.5, 1.0], [0.0, 0.0, 0.5]);
        // Sun pointed away from the distant cube so not even a shadow ray
        // can reach it.
        let env = relight_env(std::f64::consts::PI, 0.8);
        let opts = quick_opts();
        let plain = render_image(&cfg, &params, None, &cam, &env, None, &opts, 64);
        let far = cube_object(1.0, 0.0, 50.0, 50.0, rgb(0.9, 0.2, 0.2));
        let with_mesh =
            render_image(&cfg, &params, None, &cam, &env, Some(&far), &opts, 64);
        assert_eq!(plain.color.data, with_mesh.color.data);
        assert_eq!(plain.depth.data, with_mesh.depth.data);
        assert_eq!(plain.alpha.data, with_mesh.alpha.data);
        assert_eq!(plain.sun_vis.data, with_mesh.sun_vis.data);
    }

    #[test]
    fn an_inserted_cube_owns_depth_albedo_and_shading() {
        // Vacuum field: the cube is the only surface, so the override path
        // fully determines the pixel and we can predict it in closed form.
        let cfg = test_cfg();
        let params = params_with_sigma_bias(&cfg, -30.0);
        let cam = camera([0.0, -3.5, 0.5], [0.0, 0.0, 0.4]);
        // Sun from the front-left, well above the horizon: the cube's -y
        // face is lit and its own shadow ray escapes.
        let env = relight_env(-std::f64::consts::FRAC_PI_2, 0.7);
        let opts = quick_opts();
        let albedo = rgb(0.6, 0.3, 0.2);
        let cube = cube_object(0.8, 0.0, 0.0, 0.0, albedo);
        let r: Rendered =
            render_image(&cfg, &params, None, &cam, &env, Some(&cube), &opts, 64);

        let (px, py) = (4, 3);
        let i = py * cam.width as usize + px;
        let ray = generate_ray(&cam, px as f64, py as f64);
        let hit = ray_mesh(&ray, &cube.mesh).expect("center ray must hit the cube");
        assert!((r.depth.data[i] as f64 - hit.t).abs() < 1e-5, "depth must be the mesh hit");
        for c in 0..3 {
            let got = r.albedo.data[i * 3 + c] as f64;
            let want = [albedo.r, albedo.g, albedo.b][c];
            assert!((got - want).abs() < 1e-6, "albedo channel {c}: {got} vs {want}");
        }
        assert!((r.alpha.data[i] - 1.0).abs() < 1e-6, "inserted surface is opaque");

        let sun = env.sun_dir.unwrap();
        let ndl = hit.normal.dot(sun).max(0.0);
        assert!(ndl > 0.3, "test geometry should light the face (ndl = {ndl})");
        let lsun = params.group(ParamGroup::LightSun);
        let lsky = params.group(ParamGroup::LightSky);
        for c in 0..3 {
            let want = [albedo.r, albedo.g, albedo.b][c]
                * (lsun[c] as f64 * ndl + lsky[c] as f64);
            let got = r.color.data[i * 3 + c] as f64;
            assert!(
                (got - want).abs() < 1e-4,
                "channel {c}: rendered {got}, analytic {want}"
            );
        }
        assert!((r.sun_vis.data[i] - 1.0).abs() < 1e-4, "vacuum shadow ray must clear");
    }

    #[test]
    fn a_lamp_behind_a_slab_adds_nothing() {
        // Uniform fog gives every ray a surface point. A thick slab hangs
        // between those points and the lamp (but clear of every camera and
        // cone path that matters): with the slab, the spot term must vanish
        // exactly; without it, the lamp must visibly light the fog.
        let cfg = test_cfg();
        let params = params_with_sigma_bias(&cfg, 2.0);
        let cam = camera([0.0, -3.0, 1.0], [0.0, 0.0, 0.3]);
        let opts = quick_opts();
        let lamp = Spotlight {
            position: [0.0, 0.0, 9.0],
            direction: [0.0, 0.0, -1.0],
            color: [60.0, 60.0, 50.0],
            exponent: 2.0,
        };
        let rig_on = NightRig { sky: [0.01, 0.01, 0.02], spots: vec![lamp] };
        let rig_off = NightRig { sky: [0.01, 0.01, 0.02], spots: vec![] };
        let slab = mesh_object(
            TriangleMesh::unit_cube().transformed(6.0, 0.0, vec3(-3.0, -3.0, 2.0)),
            rgb(0.5, 0.5, 0.5),
        );

        let lit = render_image(
            &cfg, &params, None, &cam, &night_env(&rig_on), None, &opts, 64,
        );
        let dark = render_image(
            &cfg, &params, None, &cam, &night_env(&rig_off), None, &opts, 64,
        );
        let lit_blocked = render_image(
            &cfg, &params, None, &cam, &night_env(&rig_on), Some(&slab), &opts, 64,
        );
        let dark_blocked = render_image(
            &cfg, &params, None, &cam, &night_env(&rig_off), Some(&slab), &opts, 64,
        );

        // Unoccluded, the lamp matters.
        assert!(
            max_abs_diff(&lit.color.data, &dark.color.data) > 1e-3,
            "the lamp should light unshielded fog"
        );
        // Behind the slab it contributes nothing.
        assert!(
            max_abs_diff(&lit_blocked.color.data, &dark_blocked.color.data) < 1e-9,
            "a fully shielded lamp must not light anything"
        );
    }
}
