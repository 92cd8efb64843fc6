//! Small fully-connected heads over the grid encoding.
//!
//! Each attribute (density, albedo, normal, semantics, visibility guide)
//! gets its own head: `input → hidden… → output` with ReLU between layers
//! and a raw final layer; output activations are applied by the caller.
//! Parameters for one head live in a single flat array — weights row-major
//! `[in × out]` then biases, layer after layer — which is also the
//! optimizer's view of the head.
//!
//! The matmul kernels accumulate over inputs with the output row as the
//! vector axis (`y[o] += x[i]·W[i,o]`), which keeps the inner loop free of
//! reductions so it vectorizes.

use crate::grad::Real;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub in_dim: usize,
    pub hidden: Vec<usize>,
    pub out_dim: usize,
}

impl HeadConfig {
    pub fn new(in_dim: usize, out_dim: usize) -> HeadConfig {
        HeadConfig { in_dim, hidden: vec![64, 64], out_dim }
    }

    /// Layer dimensions including input and output.
    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.in_dim];
        d.extend_from_slice(&self.hidden);
        d.push(self.out_dim);
        d
    }

    pub fn n_layers(&self) -> usize {
        self.hidden.len() + 1
    }

    pub fn param_count(&self) -> usize {
        let d = self.dims();
        (0..self.n_layers()).map(|l| d[l] * d[l + 1] + d[l + 1]).sum()
    }

    /// `(w_offset, b_offset, fan_in, fan_out)` of one layer within the flat
    /// parameter array.
    pub fn layer(&self, l: usize) -> LayerRef {
        let d = self.dims();
        let mut off = 0;
        for k in 0..l {
            off += d[k] * d[k + 1] + d[k + 1];
        }
        LayerRef {
            w_offset: off,
            b_offset: off + d[l] * d[l + 1],
            fan_in: d[l],
            fan_out: d[l + 1],
        }
    }

    /// Kaiming-uniform weights (`U(±√(6/fan_in))`), zero biases, except the
    /// final bias which is set to `last_bias` (used to pin the initial
    /// density).
    pub fn init_params(&self, rng: &mut impl Rng, last_bias: f32) -> Vec<f32> {
        let mut p = vec![0f32; self.param_count()];
        for l in 0..self.n_layers() {
            let lr = self.layer(l);
            let bound = (6.0 / lr.fan_in as f64).sqrt() as f32;
            for i in 0..lr.fan_in * lr.fan_out {
                p[lr.w_offset + i] = rng.gen_range(-bound..bound);
            }
            if l == self.n_layers() - 1 {
                for o in 0..lr.fan_out {
                    p[lr.b_offset + o] = last_bias;
                }
            }
        }
        p
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerRef {
    pub w_offset: usize,
    pub b_offset: usize,
    pub fan_in: usize,
    pub fan_out: usize,
}

/// `y = x·W + b` for a row-major batch: `x` is `[n × in]`, `y` is `[n × out]`.
pub fn linear_fwd<F: Real>(x: &[F], w: &[F], b: Option<&[F]>, n: usize, fan_in: usize, fan_out: usize, y: &mut [F]) {
    debug_assert_eq!(x.len(), n * fan_in);
    debug_assert_eq!(w.len(), fan_in * fan_out);
    debug_assert_eq!(y.len(), n * fan_out);
    for p in 0..n {
        let yr = &mut y[p * fan_out..(p + 1) * fan_out];
        match b {
            Some(b) => yr.copy_from_slice(b),
            None => yr.iter_mut().for_each(|v| *v = F::zero()),
        }
        let xr = &x[p * fan_in..(p + 1) * fan_in];
        for (i, &xi) in xr.iter().enumerate() {
            let wr = &w[i * fan_out..(i + 1) * fan_out];
            for (o, &wv) in wr.iter().enumerate() {
                yr[o] = xi.mul_add(wv, yr[o]);
            }
        }
    }
}

/// Pullbacks of [`linear_fwd`]: `dX += dY·Wᵀ`, `dW += Xᵀ·dY`, `db += Σ dY`.
/// Any of the output accumulators may be omitted.
pub fn linear_bwd<F: Real>(
    x: &[F],
    w: &[F],
    d_y: &[F],
    n: usize,
    fan_in: usize,
    fan_out: usize,
    mut d_x: Option<&mut [F]>,
    mut d_w: Option<&mut [F]>,
    mut d_b: Option<&mut [F]>,
) {
    for p in 0..n {
        let gy = &d_y[p * fan_out..(p + 1) * fan_out];
        let xr = &x[p * fan_in..(p + 1) * fan_in];
        if let Some(dx) = d_x.as_deref_mut() {
            let dxr = &mut dx[p * fan_in..(p + 1) * fan_in];
            for i in 0..fan_in {
                let wr = &w[i * fan_out..(i + 1) * fan_out];
                let mut acc = F::zero();
                for o in 0..fan_out {
                    acc = gy[o].mul_add(wr[o], acc);
                }
                dxr[i] += acc;
            }
        }
        if let Some(dw) = d_w.as_deref_mut() {
            for (i, &xi) in xr.iter().enumerate() {
                let dwr = &mut dw[i * fan_out..(i + 1) * fan_out];
                for o in 0..fan_out {
                    dwr[o] = xi.mul_add(gy[o], dwr[o]);
                }
            }
        }
        if let Some(db) = d_b.as_deref_mut() {
            for o in 0..fan_out {
                db[o] += gy[o];
            }
        }
    }
}

/// Full no-grad head forward for a batch: ReLU between layers, raw output.
pub fn head_forward<F: Real>(cfg: &HeadConfig, params: &[F], x: &[F], n: usize) -> Vec<F> {
    debug_assert_eq!(params.len(), cfg.param_count());
    let mut cur = x.to_vec();
    let mut cur_dim = cfg.in_dim;
    for l in 0..cfg.n_layers() {
        let lr = cfg.layer(l);
        let mut next = vec![F::zero(); n * lr.fan_out];
        linear_fwd(
            &cur,
            &params[lr.w_offset..lr.w_offset + lr.fan_in * lr.fan_out],
            Some(&params[lr.b_offset..lr.b_offset + lr.fan_out]),
            n,
            cur_dim,
            lr.fan_out,
            &mut next,
        );
        if l + 1 < cfg.n_layers() {
            for v in next.iter_mut() {
                if *v < F::zero() {
                    *v = F::zero();
                }
            }
        }
        cur = next;
        cur_dim = lr.fan_out;
    }
    cur
}
