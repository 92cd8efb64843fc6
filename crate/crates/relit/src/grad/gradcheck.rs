//! Central finite-difference verification of the tape's gradients.
//!
//! The checker rebuilds a scalar-loss graph from scratch at perturbed
//! parameters and compares `(f(p+h) − f(p−h)) / 2h` against the analytic
//! gradient from one backward pass, in `f64` throughout. Relative error
//! uses a floored denominator so near-zero pairs don't explode:
//! `|a − b| / max(|a|, |b|, 1e-6)`.
//!
//! Checking every parameter would be wasteful (hash-grid tables are mostly
//! untouched by a tiny batch), so per group we test the entries with the
//! largest analytic gradients plus an evenly-spaced sample of the rest —
//! deterministic, so a passing scenario stays passing.

use super::tape::{NodeId, Tape};
use super::{ParamGroup, ParamSet, PARAM_GROUPS};
use crate::fields::hashgrid::HashGridConfig;
use crate::fields::mlp::HeadConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

/// Relative error with a floored denominator.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

#[derive(Debug, Clone, Copy)]
pub struct FdOptions {
    /// Step is `h_scale · (1 + |p|)`.
    pub h_scale: f64,
    /// A scenario passes when every checked entry is below this.
    pub tol: f64,
    /// Cap on checked entries per parameter group.
    pub per_group: usize,
}

impl Default for FdOptions {
    fn default() -> FdOptions {
        FdOptions { h_scale: 1e-5, tol: 1e-4, per_group: 40 }
    }
}

#[derive(Debug, Clone)]
pub struct WorstEntry {
    pub group: ParamGroup,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub n_checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<WorstEntry>,
}

impl CheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// A named graph builder over its own parameter set. The builder must be a
/// pure function of the parameters (fixed inputs, fixed randomness).
pub struct Scenario {
    pub name: String,
    pub params: ParamSet<f64>,
    #[allow(clippy::type_complexity)]
    pub build: Box<dyn Fn(Arc<ParamSet<f64>>) -> (Tape<f64>, NodeId) + Send + Sync>,
}

/// Run one scenario: analytic backward once, then central differences on a
/// deterministic subset of entries.
pub fn run_scenario(s: &Scenario, opts: &FdOptions) -> CheckReport {
    let base = Arc::new(s.params.clone());
    let (tape, loss) = (s.build)(base.clone());
    let grads = match tape.backward(loss) {
        Ok(g) => g,
        Err(e) => panic!("scenario '{}': backward failed: {e}", s.name),
    };
    let mut report = CheckReport { name: s.name.clone(), n_checked: 0, max_rel_err: 0.0, worst: None };
    for group in PARAM_GROUPS {
        let len = s.params.group(group).len();
        if len == 0 {
            continue;
        }
        let g = grads.group(group);
        for idx in pick_indices(g, opts.per_group) {
            let p0 = s.params.group(group)[idx];
            let h = opts.h_scale * (1.0 + p0.abs());
            let numeric = {
                let lp = eval_at(s, group, idx, p0 + h);
                let lm = eval_at(s, group, idx, p0 - h);
                (lp - lm) / (2.0 * h)
            };
            let analytic = g[idx];
            let e = rel_err(analytic, numeric);
            report.n_checked += 1;
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = Some(WorstEntry { group, index: idx, analytic, numeric });
            }
        }
    }
    report
}

fn eval_at(s: &Scenario, group: ParamGroup, idx: usize, value: f64) -> f64 {
    let mut p = s.params.clone();
    p.group_mut(group)[idx] = value;
    let arc = Arc::new(p);
    let (tape, loss) = (s.build)(arc);
    tape.scalar(loss)
}

/// Largest-|gradient| entries first, then an evenly spaced sample of the
/// remainder (to catch spurious zeros).
fn pick_indices(grad: &[f64], cap: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..grad.len()).collect();
    order.sort_by(|&a, &b| grad[b].abs().partial_cmp(&grad[a].abs()).unwrap().then(a.cmp(&b)));
    let n_top = cap.min(order.len()) * 3 / 4;
    let mut picked: Vec<usize> = order[..n_top].to_vec();
    let n_rest = cap.min(grad.len()) - n_top;
    if n_rest > 0 && grad.len() > n_top {
        let stride = (grad.len() - n_top).div_ceil(n_rest);
        picked.extend(order[n_top..].iter().step_by(stride.max(1)).take(n_rest));
    }
    picked.sort_unstable();
    picked.dedup();
    picked
}

fn param_set_with(rng: &mut ChaCha8Rng, entries: &[(ParamGroup, usize)]) -> ParamSet<f64> {
    let mut sizes = [0usize; 9];
    for &(g, n) in entries {
        sizes[g.index()] = n;
    }
    let mut p = ParamSet::with_sizes(sizes);
    for &(g, _) in entries {
        for v in p.group_mut(g).iter_mut() {
            *v = rng.gen_range(-0.6..0.6);
        }
    }
    p
}

fn rand_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 3]> {
    (0..n).map(|_| [rng.gen_range(0.03..0.97), rng.gen_range(0.03..0.97), rng.gen_range(0.03..0.97)]).collect()
}

/// Self-contained scenarios exercising the op set; the full rendering and
/// loss pipelines contribute their own on top of these.
pub fn builtin_scenarios() -> Vec<Scenario> {
    let mut out = Vec::new();
    let grid_cfg = HashGridConfig { levels: 2, features: 2, table_size: 64, base_res: 4, per_level_scale: 1.6 };

    // Hash-grid encode: linear in the table, so FD is exact.
    {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = param_set_with(&mut rng, &[(ParamGroup::GeoGrid, grid_cfg.param_count())]);
        let pts = rand_points(&mut rng, 5);
        let cfg = grid_cfg.clone();
        out.push(Scenario {
            name: "hashgrid_encode".into(),
            params,
            build: Box::new(move |p| {
                let mut tape = Tape::new(p);
                let e = tape.encode_grid(ParamGroup::GeoGrid, &cfg, pts.clone());
                let sq = tape.square(e);
                let loss = tape.mean_all(sq);
                (tape, loss)
            }),
        });
    }

    // Directional-derivative encoding (the second-order path used by
    // density normals).
    {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let params = param_set_with(&mut rng, &[(ParamGroup::GeoGrid, grid_cfg.param_count())]);
        let pts = rand_points(&mut rng, 5);
        let dirs: Vec<[f64; 3]> = (0..5)
            .map(|_| {
                let v = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0f64)];
                let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-3);
                [v[0] / n, v[1] / n, v[2] / n]
            })
            .collect();
        let cfg = grid_cfg.clone();
        out.push(Scenario {
            name: "hashgrid_jvp".into(),
            params,
            build: Box::new(move |p| {
                let mut tape = Tape::new(p);
                let e = tape.encode_grid_jvp(ParamGroup::GeoGrid, &cfg, pts.clone(), dirs.clone());
                let sq = tape.square(e);
                let loss = tape.mean_all(sq);
                (tape, loss)
            }),
        });
    }

    // Two-layer head with ReLU, sigmoid squashing, mean-square readout.
    {
        let head = HeadConfig { in_dim: 4, hidden: vec![8], out_dim: 3 };
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let params = param_set_with(&mut rng, &[(ParamGroup::AppAlbedo, head.param_count())]);
        let x: Vec<f64> = (0..3 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        out.push(Scenario {
            name: "mlp_head".into(),
            params,
            build: Box::new(move |p| {
                let mut tape = Tape::new(p);
                let xin = tape.constant(3, 4, x.clone());
                let z1 = tape.linear(xin, ParamGroup::AppAlbedo, head.layer(0), true);
                let a1 = tape.relu(z1);
                let z2 = tape.linear(a1, ParamGroup::AppAlbedo, head.layer(1), true);
                let s = tape.sigmoid(z2);
                let sq = tape.square(s);
                let loss = tape.mean_all(sq);
                (tape, loss)
            }),
        });
    }

    // Density → compositing weights → alpha/depth readouts.
    {
        let head = HeadConfig { in_dim: grid_cfg.out_dim(), hidden: vec![8], out_dim: 1 };
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let params = param_set_with(
            &mut rng,
            &[(ParamGroup::GeoGrid, grid_cfg.param_count()), (ParamGroup::GeoSigma, head.param_count())],
        );
        let pts = rand_points(&mut rng, 8);
        let deltas: Vec<f64> = (0..8).map(|_| rng.gen_range(0.02..0.2)).collect();
        let ts: Vec<f64> = (0..8).map(|i| 0.5 + 0.2 * i as f64).collect();
        let cfg = grid_cfg.clone();
        out.push(Scenario {
            name: "composite_weights".into(),
            params,
            build: Box::new(move |p| {
                let segs = Arc::new(super::tape::Segments::from_lens(&[5, 3]));
                let mut tape = Tape::new(p);
                let e = tape.encode_grid(ParamGroup::GeoGrid, &cfg, pts.clone());
                let z1 = tape.linear(e, ParamGroup::GeoSigma, head.layer(0), true);
                let a1 = tape.relu(z1);
                let z2 = tape.linear(a1, ParamGroup::GeoSigma, head.layer(1), true);
                let sigma = tape.softplus(z2);
                let w = tape.composite_weights(sigma, deltas.clone(), segs.clone());
                let depth = tape.segment_weighted_sum_const(w, ts.clone(), 1, segs.clone());
                let alpha = tape.segment_sum(w, segs);
                let d2 = tape.square(depth);
                let a2 = tape.square(alpha);
                let dl = tape.mean_all(d2);
                let al = tape.mean_all(a2);
                let loss = tape.weighted_sum(&[(1.0, dl), (0.7, al)]);
                (tape, loss)
            }),
        });
    }

    // Softmax + masked cross-entropy (the semantic path).
    {
        let head = HeadConfig { in_dim: 4, hidden: vec![8], out_dim: 4 };
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let params = param_set_with(&mut rng, &[(ParamGroup::AppSemantic, head.param_count())]);
        let x: Vec<f64> = (0..5 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        out.push(Scenario {
            name: "softmax_cross_entropy".into(),
            params,
            build: Box::new(move |p| {
                let mut tape = Tape::new(p);
                let xin = tape.constant(5, 4, x.clone());
                let z1 = tape.linear(xin, ParamGroup::AppSemantic, head.layer(0), true);
                let a1 = tape.relu(z1);
                let logits = tape.linear(a1, ParamGroup::AppSemantic, head.layer(1), true);
                let probs = tape.softmax_rows(logits);
                let loss = tape.cross_entropy_rows(probs, vec![0, 3, 255, 1, 2]);
                (tape, loss)
            }),
        });
    }

    // Sigmoid probability under both BCE directions (the visibility path),
    // including a detached-target branch. Stop-gradient targets must be
    // frozen at the base parameters: finite differences would otherwise see
    // the path the tape deliberately blocks.
    {
        let head = HeadConfig { in_dim: 4, hidden: vec![8], out_dim: 1 };
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let params = param_set_with(&mut rng, &[(ParamGroup::AppGuidevis, head.param_count())]);
        let x: Vec<f64> = (0..6 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let net = move |tape: &mut Tape<f64>, x: &[f64], head: &HeadConfig| {
            let xin = tape.constant(6, 4, x.to_vec());
            let z1 = tape.linear(xin, ParamGroup::AppGuidevis, head.layer(0), true);
            let a1 = tape.relu(z1);
            let z2 = tape.linear(a1, ParamGroup::AppGuidevis, head.layer(1), true);
            tape.sigmoid(z2)
        };
        let frozen_target = {
            let mut tape = Tape::new(Arc::new(params.clone()));
            let v = net(&mut tape, &x, &head);
            tape.value(v).to_vec()
        };
        out.push(Scenario {
            name: "bce_visibility".into(),
            params,
            build: Box::new(move |p| {
                let mut tape = Tape::new(p);
                let v = net(&mut tape, &x, &head);
                let l1 = tape.bce_loss(v, vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
                // Second direction: a squashed transform of v against the
                // frozen stop-gradient values of v itself.
                let half = tape.scale(v, 0.5);
                let quarter = tape.constant(6, 1, vec![0.25; 6]);
                let v2 = tape.add(half, quarter);
                let l2 = tape.bce_loss(v2, frozen_target.clone());
                let loss = tape.weighted_sum(&[(1.0, l1), (1.0, l2)]);
                (tape, loss)
            }),
        });
    }

    // Normal paths: normalization, orientation dots, shading products.
    {
        let head = HeadConfig { in_dim: 4, hidden: vec![8], out_dim: 3 };
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let params = param_set_with(
            &mut rng,
            &[(ParamGroup::AppNormal, head.param_count()), (ParamGroup::LightSun, 3), (ParamGroup::LightSky, 3)],
        );
        let x: Vec<f64> = (0..4 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let sun = [0.3, -0.4, 0.866];
        out.push(Scenario {
            name: "shade_normals".into(),
            params,
            build: Box::new(move |p| {
                let mut tape = Tape::new(p);
                let xin = tape.constant(4, 4, x.clone());
                let z1 = tape.linear(xin, ParamGroup::AppNormal, head.layer(0), true);
                let a1 = tape.relu(z1);
                let raw = tape.linear(a1, ParamGroup::AppNormal, head.layer(1), true);
                let n = tape.normalize_rows(raw, 1e-8);
                let ndotl = tape.row_dot_const(n, sun.to_vec());
                let lit = tape.relu(ndotl);
                let lsun = tape.param_vec(ParamGroup::LightSun);
                let lsky = tape.param_vec(ParamGroup::LightSky);
                let sunterm = tape.col_times_row(lit, lsun);
                let skyterm = tape.broadcast_row(lsky, 4);
                let irr = tape.add(sunterm, skyterm);
                let sq = tape.square(irr);
                let loss = tape.mean_all(sq);
                (tape, loss)
            }),
        });
    }

    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_scenarios_pass_fd_check() {
        let opts = FdOptions::default();
        for s in builtin_scenarios() {
            let r = run_scenario(&s, &opts);
            assert!(r.n_checked > 10, "{}: only {} entries checked", r.name, r.n_checked);
            assert!(
                r.passed(opts.tol),
                "{}: max rel err {:.3e}, worst {:?}",
                r.name,
                r.max_rel_err,
                r.worst
            );
        }
    }

    #[test]
    fn checker_catches_a_deliberately_broken_gradient() {
        // The detach drops part of the analytic gradient while finite
        // differences see the whole function — the checker must flag it.
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let params = param_set_with(&mut rng, &[(ParamGroup::LightSun, 3)]);
        let s = Scenario {
            name: "negative_control".into(),
            params,
            build: Box::new(|p| {
                let mut tape = Tape::new(p);
                let v = tape.param_vec(ParamGroup::LightSun);
                let sq = tape.square(v);
                let cut = tape.detach(v);
                let sum = tape.add(sq, cut);
                let loss = tape.mean_all(sum);
                (tape, loss)
            }),
        };
        let r = run_scenario(&s, &FdOptions::default());
        assert!(!r.passed(1e-4), "negative control unexpectedly passed: {:?}", r);
        assert!(r.max_rel_err > 0.05, "expected a gross mismatch, got {}", r.max_rel_err);
    }

    #[test]
    fn rel_err_uses_floored_denominator() {
        assert_eq!(rel_err(0.0, 0.0), 0.0);
        assert!((rel_err(1e-9, 0.0) - 1e-3).abs() < 1e-12);
        assert!((rel_err(2.0, 1.0) - 0.5).abs() < 1e-15);
    }
}
