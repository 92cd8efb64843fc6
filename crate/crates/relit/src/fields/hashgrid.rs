//! Multi-resolution hash-grid encoding with trilinear interpolation.
//!
//! Each level lays a virtual lattice of resolution `res_l = ⌊base·scale^l⌋`
//! over the unit cube. Coarse levels whose full corner lattice fits in the
//! table are indexed densely; finer levels hash the corner coordinates via
//! `XOR(cᵢ·πᵢ) mod table_size`. A query returns the concatenation over
//! levels of the trilinearly-interpolated feature vectors, so the encoding
//! is linear in the table entries — which is what makes the exact
//! directional-derivative kernel (`encode_jvp_*`) possible.

use crate::grad::Real;
use serde::{Deserialize, Serialize};

pub const HASH_PRIMES: [u64; 3] = [1, 2_654_435_761, 805_459_861];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HashGridConfig {
    pub levels: usize,
    /// Features stored per level per entry.
    pub features: usize,
    /// Entries per level. Power of two enables mask-based hashing.
    pub table_size: usize,
    pub base_res: u32,
    pub per_level_scale: f64,
}

impl Default for HashGridConfig {
    fn default() -> Self {
        HashGridConfig {
            levels: 8,
            features: 2,
            table_size: 1 << 16,
            base_res: 16,
            per_level_scale: 1.5,
        }
    }
}

impl HashGridConfig {
    pub fn level_res(&self, level: usize) -> u32 {
        (self.base_res as f64 * self.per_level_scale.powi(level as i32)).floor() as u32
    }

    /// Dense (collision-free) indexing when the whole corner lattice fits.
    pub fn level_is_dense(&self, level: usize) -> bool {
        let n = self.level_res(level) as usize + 1;
        n.checked_mul(n).and_then(|m| m.checked_mul(n)).map_or(false, |c| c <= self.table_size)
    }

    /// Output dimensionality: `levels · features`.
    pub fn out_dim(&self) -> usize {
        self.levels * self.features
    }

    pub fn param_count(&self) -> usize {
        self.levels * self.table_size * self.features
    }

    fn entry_index(&self, level: usize, c: [u32; 3]) -> usize {
        if self.level_is_dense(level) {
            let n = self.level_res(level) as usize + 1;
            (c[0] as usize) + n * ((c[1] as usize) + n * (c[2] as usize))
        } else {
            let h = (c[0] as u64).wrapping_mul(HASH_PRIMES[0])
                ^ (c[1] as u64).wrapping_mul(HASH_PRIMES[1])
                ^ (c[2] as u64).wrapping_mul(HASH_PRIMES[2]);
            if self.table_size.is_power_of_two() {
                (h as usize) & (self.table_size - 1)
            } else {
                (h % self.table_size as u64) as usize
            }
        }
    }
}

/// Base corner and in-cell fractions for a point in `[0,1]³` at a given
/// lattice resolution. Out-of-range coordinates are clamped to the box
/// first (matching the clamp in the query contract), so fractions always
/// land in `[0,1]`.
#[inline]
pub fn corner_setup(x: [f64; 3], res: u32) -> ([u32; 3], [f64; 3]) {
    let mut c0 = [0u32; 3];
    let mut f = [0f64; 3];
    for d in 0..3 {
        let pos = x[d].clamp(0.0, 1.0) * res as f64;
        let i = (pos.floor() as i64).clamp(0, res as i64 - 1) as u32;
        c0[d] = i;
        f[d] = pos - i as f64;
    }
    (c0, f)
}

/// Whether each coordinate is inside the open unit interval; clamped
/// dimensions have zero spatial derivative.
#[inline]
fn active_dims(x: [f64; 3]) -> [bool; 3] {
    [
        x[0] > 0.0 && x[0] < 1.0,
        x[1] > 0.0 && x[1] < 1.0,
        x[2] > 0.0 && x[2] < 1.0,
    ]
}

/// Visit the 8 corners of the cell containing `x` at resolution `res`:
/// `(corner coords, weight, dweight/dxᵈ · res)` per corner. The derivative
/// triple already includes the lattice scale, i.e. it is the gradient of the
/// weight with respect to the *unit-cube* coordinate.
#[inline]
fn for_each_corner(
    x: [f64; 3],
    res: u32,
    mut visit: impl FnMut(usize, [u32; 3], f64, [f64; 3]),
) {
    let (c0, f) = corner_setup(x, res);
    let act = active_dims(x);
    let w = [[1.0 - f[0], f[0]], [1.0 - f[1], f[1]], [1.0 - f[2], f[2]]];
    for corner in 0..8usize {
        let bits = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
        let mut c = [0u32; 3];
        let mut weight = 1.0;
        for d in 0..3 {
            c[d] = c0[d] + bits[d] as u32;
            weight *= w[d][bits[d]];
        }
        let mut dw = [0f64; 3];
        for d in 0..3 {
            if !act[d] {
                continue;
            }
            let sign = if bits[d] == 1 { 1.0 } else { -1.0 };
            let mut prod = sign * res as f64;
            for d2 in 0..3 {
                if d2 != d {
                    prod *= w[d2][bits[d2]];
                }
            }
            dw[d] = prod;
        }
        visit(corner, c, weight, dw);
    }
}

/// Encode a batch of unit-cube points. `out` is row-major `[P × out_dim]`.
pub fn encode_fwd<F: Real>(cfg: &HashGridConfig, table: &[F], pts: &[[f64; 3]], out: &mut [F]) {
    let d_out = cfg.out_dim();
    debug_assert_eq!(table.len(), cfg.param_count());
    debug_assert_eq!(out.len(), pts.len() * d_out);
    for v in out.iter_mut() {
        *v = F::zero();
    }
    for level in 0..cfg.levels {
        let res = cfg.level_res(level);
        let base = level * cfg.table_size * cfg.features;
        for (p, x) in pts.iter().enumerate() {
            let row = &mut out[p * d_out + level * cfg.features..p * d_out + (level + 1) * cfg.features];
            for_each_corner(*x, res, |_, c, w, _| {
                let e = base + cfg.entry_index(level, c) * cfg.features;
                let wf = F::from_f64(w);
                for k in 0..cfg.features {
                    row[k] += wf * table[e + k];
                }
            });
        }
    }
}

/// Backward of [`encode_fwd`]: scatter `d_out` into table gradients.
pub fn encode_bwd<F: Real>(cfg: &HashGridConfig, pts: &[[f64; 3]], d_out: &[F], d_table: &mut [F]) {
    let dim = cfg.out_dim();
    debug_assert_eq!(d_table.len(), cfg.param_count());
    debug_assert_eq!(d_out.len(), pts.len() * dim);
    for level in 0..cfg.levels {
        let res = cfg.level_res(level);
        let base = level * cfg.table_size * cfg.features;
        for (p, x) in pts.iter().enumerate() {
            let g = &d_out[p * dim + level * cfg.features..p * dim + (level + 1) * cfg.features];
            for_each_corner(*x, res, |_, c, w, _| {
                let e = base + cfg.entry_index(level, c) * cfg.features;
                let wf = F::from_f64(w);
                for k in 0..cfg.features {
                    d_table[e + k] += wf * g[k];
                }
            });
        }
    }
}

/// Directional derivative of the encoding along `dirs[p]` (given in
/// unit-cube coordinates): `out[p] = ∂ encode(x)/∂s` for `x + s·dir`.
/// Linear in the table, so it differentiates exactly like a gather.
pub fn encode_jvp_fwd<F: Real>(
    cfg: &HashGridConfig,
    table: &[F],
    pts: &[[f64; 3]],
    dirs: &[[f64; 3]],
    out: &mut [F],
) {
    let dim = cfg.out_dim();
    debug_assert_eq!(out.len(), pts.len() * dim);
    debug_assert_eq!(dirs.len(), pts.len());
    for v in out.iter_mut() {
        *v = F::zero();
    }
    for level in 0..cfg.levels {
        let res = cfg.level_res(level);
        let base = level * cfg.table_size * cfg.features;
        for (p, x) in pts.iter().enumerate() {
            let dir = dirs[p];
            let row = &mut out[p * dim + level * cfg.features..p * dim + (level + 1) * cfg.features];
            for_each_corner(*x, res, |_, c, _, dw| {
                let ws = dw[0] * dir[0] + dw[1] * dir[1] + dw[2] * dir[2];
                if ws == 0.0 {
                    return;
                }
                let e = base + cfg.entry_index(level, c) * cfg.features;
                let wf = F::from_f64(ws);
                for k in 0..cfg.features {
                    row[k] += wf * table[e + k];
                }
            });
        }
    }
}

/// Backward of [`encode_jvp_fwd`] with respect to the table.
pub fn encode_jvp_bwd<F: Real>(
    cfg: &HashGridConfig,
    pts: &[[f64; 3]],
    dirs: &[[f64; 3]],
    d_out: &[F],
    d_table: &mut [F],
) {
    let dim = cfg.out_dim();
    for level in 0..cfg.levels {
        let res = cfg.level_res(level);
        let base = level * cfg.table_size * cfg.features;
        for (p, x) in pts.iter().enumerate() {
            let dir = dirs[p];
            let g = &d_out[p * dim + level * cfg.features..p * dim + (level + 1) * cfg.features];
            for_each_corner(*x, res, |_, c, _, dw| {
                let ws = dw[0] * dir[0] + dw[1] * dir[1] + dw[2] * dir[2];
                if ws == 0.0 {
                    return;
                }
                let e = base + cfg.entry_index(level, c) * cfg.features;
                let wf = F::from_f64(ws);
                for k in 0..cfg.features {
                    d_table[e + k] += wf * g[k];
                }
            });
        }
    }
}

/// Single-point convenience wrapper.
pub fn encode_point<F: Real>(cfg: &HashGridConfig, table: &[F], x: [f64; 3]) -> Vec<F> {
    let mut out = vec![F::zero(); cfg.out_dim()];
    encode_fwd(cfg, table, std::slice::from_ref(&x), &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> HashGridConfig {
        HashGridConfig {
            levels: 1,
            features: 2,
            table_size: 64,
            base_res: 2,
            per_level_scale: 1.5,
        }
    }

    #[test]
    fn default_level_resolutions_and_density() {
        let cfg = HashGridConfig::default();
        let res: Vec<u32> = (0..cfg.levels).map(|l| cfg.level_res(l)).collect();
        assert_eq!(res, vec![16, 24, 36, 54, 81, 121, 182, 273]);
        let dense: Vec<bool> = (0..cfg.levels).map(|l| cfg.level_is_dense(l)).collect();
        assert_eq!(dense, vec![true, true, true, false, false, false, false, false]);
    }

    #[test]
    fn zero_table_encodes_to_zero() {
        let cfg = HashGridConfig::default();
        let table = vec![0f32; cfg.param_count()];
        let out = encode_point(&cfg, &table, [0.3, 0.7, 0.2]);
        assert!(out.iter().all(|v| *v == 0.0));
        assert_eq!(out.len(), 16);
    }

    #[test]
    fn query_at_corner_returns_that_entry() {
        // Single dense level, res 2: the lattice point (1,1,1) is the cell
        // center of the unit cube at x = 0.5.
        let cfg = tiny_cfg();
        assert!(cfg.level_is_dense(0));
        let mut table = vec![0f64; cfg.param_count()];
        let e = cfg.entry_index(0, [1, 1, 1]);
        table[e * 2] = 3.5;
        table[e * 2 + 1] = -1.25;
        let out = encode_point(&cfg, &table, [0.5, 0.5, 0.5]);
        assert!((out[0] - 3.5).abs() < 1e-12);
        assert!((out[1] + 1.25).abs() < 1e-12);
    }

    /// Independent trilinear interpolation written directly from the
    /// 8-corner formula.
    fn trilinear_oracle(cfg: &HashGridConfig, table: &[f64], x: [f64; 3]) -> Vec<f64> {
        let mut out = vec![0.0; cfg.out_dim()];
        for level in 0..cfg.levels {
            let res = cfg.level_res(level) as f64;
            let p = [x[0] * res, x[1] * res, x[2] * res];
            let c0: Vec<i64> = p.iter().map(|v| (v.floor() as i64).clamp(0, res as i64 - 1)).collect();
            let f: Vec<f64> = (0..3).map(|d| p[d] - c0[d] as f64).collect();
            for bz in 0..2i64 {
                for by in 0..2i64 {
                    for bx in 0..2i64 {
                        let w = (if bx == 1 { f[0] } else { 1.0 - f[0] })
                            * (if by == 1 { f[1] } else { 1.0 - f[1] })
                            * (if bz == 1 { f[2] } else { 1.0 - f[2] });
                        let c = [(c0[0] + bx) as u32, (c0[1] + by) as u32, (c0[2] + bz) as u32];
                        let e = level * cfg.table_size * cfg.features
                            + cfg.entry_index(level, c) * cfg.features;
                        for k in 0..cfg.features {
                            out[level * cfg.features + k] += w * table[e + k];
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn interior_matches_trilinear_oracle() {
        let cfg = HashGridConfig {
            levels: 4,
            features: 2,
            table_size: 512,
            base_res: 3,
            per_level_scale: 1.7,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let table: Vec<f64> = (0..cfg.param_count()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for _ in 0..500 {
            let x = [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()];
            let got = encode_point(&cfg, &table, x);
            let want = trilinear_oracle(&cfg, &table, x);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b} at {x:?}");
            }
        }
    }

    #[test]
    fn encoding_is_continuous_across_cell_boundaries() {
        let cfg = HashGridConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let table: Vec<f64> = (0..cfg.param_count()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // Step across the lattice plane x = 1/16 of the coarsest level (a
        // corner plane for every coarser-or-equal level).
        for _ in 0..50 {
            let y = rng.gen::<f64>();
            let z = rng.gen::<f64>();
            let eps = 1e-9;
            let a = encode_point(&cfg, &table, [0.25 - eps, y, z]);
            let b = encode_point(&cfg, &table, [0.25 + eps, y, z]);
            for (u, v) in a.iter().zip(&b) {
                assert!((u - v).abs() < 1e-5, "discontinuity: {u} vs {v}");
            }
        }
    }

    #[test]
    fn out_of_box_points_clamp() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let table: Vec<f64> = (0..cfg.param_count()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let inside = encode_point(&cfg, &table, [0.0, 1.0, 0.5]);
        let outside = encode_point(&cfg, &table, [-3.0, 7.5, 0.5]);
        for (a, b) in inside.iter().zip(&outside) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn backward_scatter_is_adjoint_of_forward() {
        // ⟨encode(T)·g, 1⟩ = ⟨T, encodeᵀ(g)⟩ — the gather/scatter pair must
        // be exact transposes of each other.
        let cfg = HashGridConfig {
            levels: 3,
            features: 2,
            table_size: 128,
            base_res: 4,
            per_level_scale: 2.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let table: Vec<f64> = (0..cfg.param_count()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let pts: Vec<[f64; 3]> =
            (0..40).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let g: Vec<f64> = (0..pts.len() * cfg.out_dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut y = vec![0.0; g.len()];
        encode_fwd(&cfg, &table, &pts, &mut y);
        let lhs: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
        let mut gt = vec![0.0; table.len()];
        encode_bwd(&cfg, &pts, &g, &mut gt);
        let rhs: f64 = table.iter().zip(&gt).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }

    #[test]
    fn jvp_matches_finite_differences() {
        let cfg = HashGridConfig {
            levels: 3,
            features: 2,
            table_size: 256,
            base_res: 3,
            per_level_scale: 1.9,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let table: Vec<f64> = (0..cfg.param_count()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for _ in 0..200 {
            let x = [
                rng.gen_range(0.05..0.95),
                rng.gen_range(0.05..0.95),
                rng.gen_range(0.05..0.95),
            ];
            let mut dir = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let n = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
            for d in &mut dir {
                *d /= n;
            }
            // Skip points whose FD stencil straddles a lattice plane of any
            // level — the encoding is only piecewise smooth there.
            let h = 1e-6;
            let near_plane = (0..cfg.levels).any(|l| {
                let res = cfg.level_res(l) as f64;
                x.iter().any(|v| {
                    let p = v * res;
                    (p - p.round()).abs() < h * res * 4.0
                })
            });
            if near_plane {
                continue;
            }
            let mut jvp = vec![0.0; cfg.out_dim()];
            encode_jvp_fwd(&cfg, &table, std::slice::from_ref(&x), std::slice::from_ref(&dir), &mut jvp);
            let xp = [x[0] + h * dir[0], x[1] + h * dir[1], x[2] + h * dir[2]];
            let xm = [x[0] - h * dir[0], x[1] - h * dir[1], x[2] - h * dir[2]];
            let fp = encode_point(&cfg, &table, xp);
            let fm = encode_point(&cfg, &table, xm);
            for k in 0..cfg.out_dim() {
                let fd = (fp[k] - fm[k]) / (2.0 * h);
                assert!(
                    (jvp[k] - fd).abs() < 1e-5 * fd.abs().max(1.0),
                    "jvp {} vs fd {} at {x:?} dir {dir:?}",
                    jvp[k],
                    fd
                );
            }
        }
    }
}
