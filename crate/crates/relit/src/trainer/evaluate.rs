//! Reconstruction metrics against held-out ground truth.

use serde::{Deserialize, Serialize};

use crate::geom::{generate_ray, Camera, Vec3};
use crate::io::Frame;
use crate::oracle::{OracleScene, CLASS_SKY};
use crate::renderer::Rendered;

/// Peak signal-to-noise ratio in dB for unit-range images, capped at 99.
pub fn psnr(pred: &[f32], gt: &[f32]) -> f64 {
    assert_eq!(pred.len(), gt.len());
    if pred.is_empty() {
        return 99.0;
    }
    let mse: f64 = pred
        .iter()
        .zip(gt)
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum::<f64>()
        / pred.len() as f64;
    if mse <= 1e-20 {
        return 99.0;
    }
    (-10.0 * mse.log10()).min(99.0)
}

/// Root-mean-square error over the 3-channel pixels selected by `mask`.
pub fn masked_rmse(pred: &[f32], gt: &[f32], mask: &[bool]) -> f64 {
    assert_eq!(pred.len(), gt.len());
    assert_eq!(pred.len(), mask.len() * 3);
    let mut acc = 0.0;
    let mut n = 0usize;
    for (i, &keep) in mask.iter().enumerate() {
        if !keep {
            continue;
        }
        for c in 0..3 {
            let d = pred[i * 3 + c] as f64 - gt[i * 3 + c] as f64;
            acc += d * d;
            n += 1;
        }
    }
    if n == 0 {
        return 0.0;
    }
    (acc / n as f64).sqrt()
}

/// Mean angle in degrees between unit-normal maps, over `valid` pixels.
pub fn mean_normal_angle_deg(pred: &[f32], gt: &[f32], valid: &[bool]) -> f64 {
    assert_eq!(pred.len(), gt.len());
    assert_eq!(pred.len(), valid.len() * 3);
    let mut acc = 0.0;
    let mut n = 0usize;
    for (i, &keep) in valid.iter().enumerate() {
        if !keep {
            continue;
        }
        let mut dot = 0.0f64;
        let mut na = 0.0f64;
        let mut nb = 0.0f64;
        for c in 0..3 {
            let a = pred[i * 3 + c] as f64;
            let b = gt[i * 3 + c] as f64;
            dot += a * b;
            na += a * a;
            nb += b * b;
        }
        let denom = (na.sqrt() * nb.sqrt()).max(1e-12);
        acc += (dot / denom).clamp(-1.0, 1.0).acos().to_degrees();
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        acc / n as f64
    }
}

/// Intersection over union of two binary masks (1.0 when both are empty).
pub fn binary_iou(pred: &[bool], gt: &[bool]) -> f64 {
    assert_eq!(pred.len(), gt.len());
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&a, &b) in pred.iter().zip(gt) {
        if a && b {
            inter += 1;
        }
        if a || b {
            union += 1;
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Fraction of labels matching, ignoring ground-truth 255.
pub fn semantic_accuracy(pred: &[u8], gt: &[u8]) -> f64 {
    assert_eq!(pred.len(), gt.len());
    let mut hit = 0usize;
    let mut n = 0usize;
    for (&a, &b) in pred.iter().zip(gt) {
        if b == 255 {
            continue;
        }
        n += 1;
        if a == b {
            hit += 1;
        }
    }
    if n == 0 {
        1.0
    } else {
        hit as f64 / n as f64
    }
}

/// Everything measured on one rendered view against its ground truth.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub psnr: f64,
    /// Albedo RMSE over all non-sky pixels.
    pub albedo_rmse: f64,
    /// Albedo RMSE restricted to ground-truth shadow pixels — the places a
    /// plain photometric fit bakes shadows into albedo.
    pub albedo_rmse_shadow: f64,
    pub normal_angle_deg: f64,
    /// IoU of (marched transmittance < 0.5) vs the shadow mask, non-sky.
    pub shadow_iou: f64,
    pub semantic_acc: f64,
}

/// Compares one rendered view with its ground-truth frame.
pub fn evaluate_frame(r: &Rendered, frame: &Frame, sky_class: u8) -> FrameMetrics {
    let n = frame.semantic.len();
    let nonsky: Vec<bool> = frame.semantic.iter().map(|&c| c != sky_class && c != 255).collect();
    let shadow_gt: Vec<bool> = (0..n).map(|i| frame.shadow.data[i] > 0.5).collect();
    let shadow_and_nonsky: Vec<bool> = (0..n).map(|i| nonsky[i] && shadow_gt[i]).collect();
    let normal_valid: Vec<bool> = (0..n)
        .map(|i| {
            let row = &frame.normal.data[i * 3..i * 3 + 3];
            nonsky[i] && row.iter().any(|&v| v != 0.0)
        })
        .collect();

    let albedo_gt = frame.albedo_gt.as_ref().expect("frame carries albedo ground truth");
    let pred_shadowed: Vec<bool> = (0..n)
        .map(|i| nonsky[i] && r.sun_vis.data[i] < 0.5)
        .collect();
    let gt_shadowed: Vec<bool> = (0..n).map(|i| nonsky[i] && shadow_gt[i]).collect();

    FrameMetrics {
        psnr: psnr(&r.color.data, &frame.rgb.data),
        albedo_rmse: masked_rmse(&r.albedo.data, &albedo_gt.data, &nonsky),
        albedo_rmse_shadow: masked_rmse(&r.albedo.data, &albedo_gt.data, &shadow_and_nonsky),
        normal_angle_deg: mean_normal_angle_deg(&r.normal.data, &frame.normal.data, &normal_valid),
        shadow_iou: binary_iou(&pred_shadowed, &gt_shadowed),
        semantic_acc: semantic_accuracy(&r.semantic, &frame.semantic),
    }
}

/// Shadow-mask IoU of a render against the analytic scene re-traced per
/// pixel under `sun_dir` with the same camera — the judge for relighting and
/// insertion, where no stored ground-truth frame exists. Pixels the trace
/// calls sky are excluded.
pub fn shadow_iou_vs_scene(
    r: &Rendered,
    scene: &OracleScene,
    cam: &Camera,
    sun_dir: Vec3,
) -> f64 {
    let (w, h) = (cam.width as usize, cam.height as usize);
    let mut pred = Vec::with_capacity(w * h);
    let mut gt = Vec::with_capacity(w * h);
    for i in 0..w * h {
        let ray = generate_ray(cam, (i % w) as f64, (i / w) as f64);
        let px = scene.render_pixel_with_sun(&ray, sun_dir);
        let nonsky = px.class != CLASS_SKY;
        pred.push(nonsky && r.sun_vis.data[i] < 0.5);
        gt.push(nonsky && px.shadow);
    }
    binary_iou(&pred, &gt)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_of_a_half_gray_offset_is_six_db() {
        let a = vec![1.0f32; 12];
        let b = vec![0.5f32; 12];
        // MSE = 0.25 ⇒ PSNR = −10·log10(0.25) ≈ 6.0206.
        assert!((psnr(&a, &b) - 6.0206).abs() < 1e-3);
        assert_eq!(psnr(&a, &a), 99.0);
    }

    #[test]
    fn masked_rmse_ignores_unmasked_pixels() {
        let pred = vec![0.0f32, 0.0, 0.0, 1.0, 1.0, 1.0];
        let gt = vec![0.0f32, 0.0, 0.0, 0.0, 0.0, 0.0];
        assert_eq!(masked_rmse(&pred, &gt, &[true, false]), 0.0);
        assert!((masked_rmse(&pred, &gt, &[true, true]) - (0.5f64).sqrt()).abs() < 1e-9);
    }

    #[test]
    fn normal_angle_recovers_a_known_rotation() {
        // 10° rotation about x applied to +z normals.
        let th = 10f64.to_radians();
        let gt = vec![0.0f32, 0.0, 1.0, 0.0, 0.0, 1.0];
        let pred = vec![
            0.0,
            th.sin() as f32,
            th.cos() as f32,
            0.0,
            -th.sin() as f32,
            th.cos() as f32,
        ];
        let got = mean_normal_angle_deg(&pred, &gt, &[true, true]);
        assert!((got - 10.0).abs() < 1e-6, "{got}");
    }

    #[test]
    fn iou_counts_overlap_over_union() {
        let a = [true, true, false, false];
        let b = [true, false, true, false];
        assert!((binary_iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(binary_iou(&[false; 3], &[false; 3]), 1.0);
    }

    #[test]
    fn accuracy_ignores_the_void_label() {
        let pred = [1u8, 2, 3, 0];
        let gt = [1u8, 2, 255, 1];
        assert!((semantic_accuracy(&pred, &gt) - 2.0 / 3.0).abs() < 1e-12);
    }
}
