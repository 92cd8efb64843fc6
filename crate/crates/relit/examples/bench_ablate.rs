//! Throwaway calibration harness for the ablation study scale.

use std::sync::Arc;
use std::time::Instant;

use relit::editor::relight_env;
use relit::io::load_dataset;
use relit::lighting::sun_direction;
use relit::oracle::dataset::{generate_dataset, DatasetSpec};
use relit::oracle::OracleScene;
use relit::renderer::{render_image, LightEnv, PipelineOpts};
use relit::trainer::evaluate::{evaluate_frame, shadow_iou_vs_scene};
use relit::trainer::losses::Ablation;
use relit::trainer::{default_model_config, train, TrainConfig};

fn main() {
    let iters: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1200);
    let views: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(10);
    let res: u32 = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(48);

    let dir = std::env::temp_dir().join(format!("ablate_ds_{views}_{res}"));
    let scene = OracleScene::default_scene();
    let spec = DatasetSpec { n_views: views, width: res, height: res, ..DatasetSpec::default() };
    generate_dataset(&scene, &spec, &dir).unwrap();
    let ds = load_dataset(&dir.join("manifest.json"), false).unwrap();
    let cfg = default_model_config(&ds);
    let holdout = views / 2;

    let configs: [(&str, Ablation); 4] = [
        ("full", Ablation::default()),
        ("no_deshadow", Ablation { no_deshadow: true, ..Ablation::default() }),
        ("no_vis_mlp", Ablation { no_vis_mlp: true, ..Ablation::default() }),
        ("no_vis_loss", Ablation { no_vis_loss: true, ..Ablation::default() }),
    ];

    let delta = 30f64.to_radians();
    let new_az = ds.sun_azimuth + delta;
    let relit_sun = sun_direction(new_az, ds.sun_zenith);
    let opts = PipelineOpts {
        n_primary: 64,
        n_shadow: 32,
        d_max: ds.d_max,
        ..PipelineOpts::default()
    };

    for (name, ablate) in configs {
        for seed in [0u64, 1, 2] {
            let tc = TrainConfig {
                iterations: iters,
                exclude_frames: vec![holdout],
                seed,
                ablate,
                log_every: 10_000,
                ..TrainConfig::default()
            };
            let t = Instant::now();
            let r = train(&ds, &cfg, &tc, None).unwrap();
            let dt = t.elapsed().as_secs_f64();
            let params = Arc::new(r.params);

            let env = LightEnv::training(ds.sun_dir());
            let rr = render_image(
                &cfg,
                &params,
                Some(&r.occ),
                &ds.frames[holdout].camera,
                &env,
                None,
                &opts,
                256,
            );
            let m = evaluate_frame(&rr, &ds.frames[holdout], ds.sky_class as u8);

            let renv = relight_env(new_az, ds.sun_zenith);
            let rl = render_image(
                &cfg,
                &params,
                Some(&r.occ),
                &ds.frames[0].camera,
                &renv,
                None,
                &opts,
                256,
            );
            let relit_iou = shadow_iou_vs_scene(&rl, &scene, &ds.frames[0].camera, relit_sun);

            println!(
                "{name} seed {seed}: {dt:.0}s  alb_sh {:.4}  relit_iou {:.3}  psnr {:.2}  iou {:.3}",
                m.albedo_rmse_shadow, relit_iou, m.psnr, m.shadow_iou
            );
        }
    }
}
