//! Adam with per-group learning rates.
//!
//! Moments live in the same nine-group layout as the parameters, so the
//! whole optimizer state serializes through the existing tensor records.

use crate::grad::{GradSet, ParamGroup, ParamSet, PARAM_GROUPS};

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> AdamConfig {
        AdamConfig { beta1: 0.9, beta2: 0.99, eps: 1e-15 }
    }
}

/// First/second moments plus the shared step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: ParamSet<f32>,
    pub v: ParamSet<f32>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet<f32>) -> AdamState {
        let sizes = |p: &ParamSet<f32>| -> [usize; 9] {
            let mut s = [0; 9];
            for g in PARAM_GROUPS {
                s[g.index()] = p.group(g).len();
            }
            s
        };
        let zeros = ParamSet::with_sizes(sizes(params));
        AdamState { m: zeros.clone(), v: zeros, step: 0 }
    }
}

/// One bias-corrected update, `lr` indexed by [`ParamGroup::index`].
/// Arithmetic runs in f64 and is stored back as f32.
pub fn adam_step(
    params: &mut ParamSet<f32>,
    grads: &GradSet<f32>,
    state: &mut AdamState,
    cfg: &AdamConfig,
    lr: &[f64; 9],
) {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for group in PARAM_GROUPS {
        let rate = lr[group.index()];
        if rate == 0.0 {
            continue;
        }
        let g = grads.group(group);
        let m = state.m.group_mut(group);
        for (mi, &gi) in m.iter_mut().zip(g) {
            *mi = (cfg.beta1 * *mi as f64 + (1.0 - cfg.beta1) * gi as f64) as f32;
        }
        let v = state.v.group_mut(group);
        for (vi, &gi) in v.iter_mut().zip(g) {
            *vi = (cfg.beta2 * *vi as f64 + (1.0 - cfg.beta2) * (gi as f64) * (gi as f64)) as f32;
        }
        let p = params.group_mut(group);
        let m = state.m.group(group);
        let v = state.v.group(group);
        for i in 0..p.len() {
            let m_hat = m[i] as f64 / c1;
            let v_hat = v[i] as f64 / c2;
            p[i] = (p[i] as f64 - rate * m_hat / (v_hat.sqrt() + cfg.eps)) as f32;
        }
    }
}

/// Clamp a group elementwise to at least `lo` (light colors must stay
/// physical).
pub fn clamp_group_min(params: &mut ParamSet<f32>, group: ParamGroup, lo: f32) {
    for p in params.group_mut(group) {
        if *p < lo {
            *p = lo;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_params() -> ParamSet<f32> {
        let mut sizes = [0usize; 9];
        sizes[ParamGroup::GeoGrid.index()] = 4;
        sizes[ParamGroup::LightSun.index()] = 3;
        let mut p = ParamSet::with_sizes(sizes);
        p.group_mut(ParamGroup::GeoGrid).copy_from_slice(&[1.0, -2.0, 0.5, 0.0]);
        p.group_mut(ParamGroup::LightSun).copy_from_slice(&[1.0, 1.0, 1.0]);
        p
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // With bias correction, step one reduces to p −= lr·g/(|g| + ε).
        let mut p = tiny_params();
        let mut grads = GradSet::zeros_like(&p);
        grads.group_mut(ParamGroup::GeoGrid).copy_from_slice(&[0.5, -0.25, 0.0, 3.0]);
        let mut st = AdamState::new(&p);
        let mut lr = [0.0; 9];
        lr[ParamGroup::GeoGrid.index()] = 0.01;
        adam_step(&mut p, &grads, &mut st, &AdamConfig::default(), &lr);
        let got = p.group(ParamGroup::GeoGrid);
        let want = [1.0 - 0.01, -2.0 + 0.01, 0.5, 0.0 - 0.01];
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-6, "{g} vs {w}");
        }
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_rate_freezes_a_group() {
        let mut p = tiny_params();
        let before = p.group(ParamGroup::LightSun).to_vec();
        let mut grads = GradSet::zeros_like(&p);
        grads.group_mut(ParamGroup::LightSun).copy_from_slice(&[1.0, 1.0, 1.0]);
        let mut st = AdamState::new(&p);
        let lr = [0.0; 9];
        adam_step(&mut p, &grads, &mut st, &AdamConfig::default(), &lr);
        assert_eq!(p.group(ParamGroup::LightSun), &before[..]);
    }

    #[test]
    fn repeated_steps_decay_toward_a_minimum() {
        // Minimize (x − 3)² coordinate-wise; Adam must get there.
        let mut sizes = [0usize; 9];
        sizes[ParamGroup::LightSky.index()] = 1;
        let mut p = ParamSet::with_sizes(sizes);
        p.group_mut(ParamGroup::LightSky)[0] = -1.0;
        let mut st = AdamState::new(&p);
        let mut lr = [0.0; 9];
        lr[ParamGroup::LightSky.index()] = 0.05;
        for _ in 0..2000 {
            let x = p.group(ParamGroup::LightSky)[0];
            let mut g = GradSet::zeros_like(&p);
            g.group_mut(ParamGroup::LightSky)[0] = 2.0 * (x - 3.0);
            adam_step(&mut p, &g, &mut st, &AdamConfig::default(), &lr);
        }
        let x = p.group(ParamGroup::LightSky)[0];
        assert!((x - 3.0).abs() < 1e-2, "converged to {x}");
    }

    #[test]
    fn clamping_raises_only_low_entries() {
        let mut p = tiny_params();
        p.group_mut(ParamGroup::LightSun).copy_from_slice(&[-0.5, 0.2, 1.0]);
        clamp_group_min(&mut p, ParamGroup::LightSun, 0.0);
        assert_eq!(p.group(ParamGroup::LightSun), &[0.0, 0.2, 1.0]);
    }
}
