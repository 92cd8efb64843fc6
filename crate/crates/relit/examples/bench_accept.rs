//! Throwaway probe: trains at full scale and reports the relighting and
//! insertion numbers the acceptance gate will assert on.

use std::sync::Arc;
use std::time::Instant;

use relit::editor::{cube_object, rotated_sun_env};
use relit::geom::{generate_ray, ray_mesh, rgb, vec3, Camera, Pose};
use relit::grad::ParamGroup;
use relit::io::load_dataset;
use relit::lighting::sun_direction;
use relit::oracle::dataset::{generate_dataset, DatasetSpec};
use relit::oracle::{OracleBox, OracleScene, CLASS_SKY, CLASS_STRUCTURE};
use relit::renderer::{render_image, LightEnv, PipelineOpts};
use relit::trainer::evaluate::{binary_iou, evaluate_frame, shadow_iou_vs_scene};
use relit::trainer::{default_model_config, train, TrainConfig};

const HOLDOUT: usize = 10;

fn render_opts(ds: &relit::io::Dataset) -> PipelineOpts {
    PipelineOpts { d_max: ds.d_max, ..PipelineOpts::default() }
}

fn main() {
    let dir = std::env::temp_dir().join("accept_probe_ds");
    let scene = OracleScene::default_scene();
    if !dir.join("manifest.json").exists() {
        generate_dataset(&scene, &DatasetSpec::default(), &dir).unwrap();
    }
    let ds = load_dataset(&dir.join("manifest.json"), false).unwrap();
    let cfg = default_model_config(&ds);
    let tc = TrainConfig { exclude_frames: vec![HOLDOUT], log_every: 2000, ..TrainConfig::default() };

    let t0 = Instant::now();
    let r = train(&ds, &cfg, &tc, None).unwrap();
    println!("train: {:.0}s final_loss {:.4}", t0.elapsed().as_secs_f64(), r.final_loss);
    let params = Arc::new(r.params);
    let occ = r.occ;
    let opts = render_opts(&ds);

    // Criterion-3 style holdout check for reference.
    let f = &ds.frames[HOLDOUT];
    let env = LightEnv::training(ds.sun_dir());
    let rr = render_image(&cfg, &params, Some(&occ), &f.camera, &env, None, &opts, 512);
    let m = evaluate_frame(&rr, f, ds.sky_class as u8);
    println!("holdout: psnr {:.2} alb_sh {:.4} iou {:.3}", m.psnr, m.albedo_rmse_shadow, m.shadow_iou);

    // Relighting: rotate the sun +/-30 deg, compare against the oracle.
    for delta_deg in [30.0f64, -30.0] {
        let delta = delta_deg.to_radians();
        let env = rotated_sun_env(&ds, delta);
        let new_sun = sun_direction(ds.sun_azimuth + delta, ds.sun_zenith);
        for fi in [0usize, HOLDOUT, 15] {
            let cam = &ds.frames[fi].camera;
            let rr = render_image(&cfg, &params, Some(&occ), cam, &env, None, &opts, 512);
            let iou = shadow_iou_vs_scene(&rr, &scene, cam, new_sun);
            println!("relit {delta_deg:+.0} frame {fi}: iou {iou:.3}");
        }
    }

    // Insertion (a): a cube on open lit ground; isolate its cast shadow.
    let (size, cx, cy) = (0.9, -1.0, -2.4);
    let cube = cube_object(size, 0.0, cx, cy, rgb(0.7, 0.7, 0.7));
    let mut scene_cube = scene.clone();
    scene_cube.boxes.push(OracleBox {
        min: vec3(cx - size / 2.0, cy - size / 2.0, 0.0),
        max: vec3(cx + size / 2.0, cy + size / 2.0, size),
        albedo: rgb(0.7, 0.7, 0.7),
        class: CLASS_STRUCTURE,
    });
    // Pick the frame where the added shadow is most visible.
    let sun = scene.sun_dir();
    let mut best = (0usize, 0usize);
    for (fi, f) in ds.frames.iter().enumerate() {
        if fi == HOLDOUT {
            continue;
        }
        let mut added = 0;
        for i in 0..(f.camera.width * f.camera.height) as usize {
            let ray = generate_ray(&f.camera, (i % 96) as f64, (i / 96) as f64);
            let with = scene_cube.render_pixel_with_sun(&ray, sun);
            let without = scene.render_pixel_with_sun(&ray, sun);
            if with.class != CLASS_SKY && with.shadow && !without.shadow {
                added += 1;
            }
        }
        if added > best.1 {
            best = (fi, added);
        }
    }
    let (fi, added) = best;
    println!("insert: frame {fi} adds {added} shadow px");
    let cam = &ds.frames[fi].camera;
    let env = LightEnv::training(ds.sun_dir());
    let rr = render_image(&cfg, &params, Some(&occ), cam, &env, Some(&cube), &opts, 512);
    // Whole-mask IoU and the isolated cast-shadow IoU.
    let whole = shadow_iou_vs_scene(&rr, &scene_cube, cam, sun);
    let n = (cam.width * cam.height) as usize;
    let mut pred_new = vec![false; n];
    let mut gt_new = vec![false; n];
    for i in 0..n {
        let ray = generate_ray(cam, (i % 96) as f64, (i / 96) as f64);
        let with = scene_cube.render_pixel_with_sun(&ray, sun);
        let without = scene.render_pixel_with_sun(&ray, sun);
        if with.class == CLASS_SKY {
            continue;
        }
        let base = without.class != CLASS_SKY && without.shadow;
        pred_new[i] = rr.sun_vis.data[i] < 0.5 && !base;
        gt_new[i] = with.shadow && !base;
    }
    println!("insert: whole iou {whole:.3} cast iou {:.3}", binary_iou(&pred_new, &gt_new));

    // Insertion (b): a small cube inside an existing shadow; the sun term on
    // its sunlit-facing pixels should be negligible.
    let (size, cx, cy) = (0.45, -2.9, 0.2);
    let cube = cube_object(size, 0.0, cx, cy, rgb(0.7, 0.7, 0.7));
    let eye = vec3(cx, cy + 3.0, 1.3);
    let target = vec3(cx, cy, size / 2.0);
    let cam = Camera {
        fx: 80.0,
        fy: 80.0,
        cx: 32.0,
        cy: 32.0,
        width: 64,
        height: 64,
        pose: Pose::look_at(eye, target, vec3(0.0, 0.0, 1.0)),
    };
    let rr = render_image(&cfg, &params, Some(&occ), &cam, &env, Some(&cube), &opts, 512);
    let l_sun = params.group(ParamGroup::LightSun);
    let mut checked = 0usize;
    let mut worst = 0f64;
    let mut worst_vis = 0f64;
    let mut misplaced = 0usize;
    for i in 0..(cam.width * cam.height) as usize {
        let ray = generate_ray(&cam, (i % 64) as f64, (i / 64) as f64);
        let Some(hit) = ray_mesh(&ray, &cube.mesh) else { continue };
        let ndl = hit.normal.dot(sun);
        if ndl < 0.1 {
            continue;
        }
        let p = ray.origin + ray.dir * hit.t;
        if !scene.in_shadow(p, hit.normal, sun) {
            misplaced += 1;
            continue;
        }
        checked += 1;
        let vis = rr.sun_vis.data[i] as f64;
        worst_vis = worst_vis.max(vis);
        for c in 0..3 {
            let term = rr.albedo.data[i * 3 + c] as f64 * l_sun[c] as f64 * ndl * vis;
            worst = worst.max(term);
        }
    }
    println!(
        "shadowed cube: {checked} px checked, {misplaced} outside shadow, max sun term {worst:.4}, max vis {worst_vis:.3}"
    );
}
