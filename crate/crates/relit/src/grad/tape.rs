//! Eager reverse-mode autodiff over batched tensors.
//!
//! The tape is a flat list of nodes, each holding its forward value (a
//! row-major `rows × cols` buffer) and enough context to pull gradients
//! back. Model parameters are *not* nodes: ops that touch them (`linear`,
//! `encode_grid`, `param_vec`, …) hold a [`ParamGroup`] reference and
//! scatter straight into the [`GradSet`] during [`Tape::backward`]. That
//! keeps the graph small and makes one backward pass produce exactly the
//! per-group gradient buffers the optimizer wants.
//!
//! Everything is generic over [`Real`], so the same graph code runs in
//! `f32` for training and `f64` for finite-difference checking.
//!
//! Ray-marching ops work on *segments*: a CSR layout ([`Segments`]) maps
//! each ray to a contiguous run of sample rows. Empty segments are legal
//! and produce zero sums (and therefore zero alpha / full transmittance)
//! without special cases.

use super::{GradSet, ParamGroup, ParamSet, Real};
use crate::fields::hashgrid::{self, HashGridConfig};
use crate::fields::mlp::{linear_bwd, linear_fwd, LayerRef};
use std::ops::Range;
use std::sync::Arc;
use thiserror::Error;

/// Probabilities inside BCE terms are clamped to `[BCE_EPS, 1−BCE_EPS]`.
pub const BCE_EPS: f64 = 1e-4;
/// Probabilities inside cross-entropy logs are clamped below by this.
pub const CE_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum TapeError {
    #[error("non-finite adjoint at node '{label}' (#{index})")]
    NonFiniteAdjoint { label: &'static str, index: usize },
    #[error("non-finite gradient in parameter group '{}'", group.name())]
    NonFiniteGrad { group: ParamGroup },
}

/// Handle to a tape node. Only valid for the tape that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(u32);

impl NodeId {
    #[inline]
    fn ix(self) -> usize {
        self.0 as usize
    }
}

/// CSR ranges mapping segment `s` to rows `offsets[s]..offsets[s+1]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segments {
    offsets: Vec<u32>,
}

impl Segments {
    pub fn from_lens(lens: &[usize]) -> Segments {
        let mut offsets = Vec::with_capacity(lens.len() + 1);
        let mut acc = 0u32;
        offsets.push(0);
        for &l in lens {
            acc += u32::try_from(l).expect("segment too long");
            offsets.push(acc);
        }
        Segments { offsets }
    }

    pub fn n_segments(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn total(&self) -> usize {
        *self.offsets.last().unwrap() as usize
    }

    #[inline]
    pub fn range(&self, s: usize) -> Range<usize> {
        self.offsets[s] as usize..self.offsets[s + 1] as usize
    }
}

/// Alpha-compositing weights for all segments at once:
/// `w_i = T_i (1 − e^{−σ_i δ_i})` with `T_i = exp(−Σ_{j<i} σ_j δ_j)`,
/// restarting at each segment boundary. Shared by the tape op and the
/// no-grad render path so both produce bit-identical weights.
pub fn composite_weights_fwd<F: Real>(sigma: &[F], deltas: &[F], segs: &Segments, out: &mut [F]) {
    debug_assert_eq!(sigma.len(), segs.total());
    debug_assert_eq!(deltas.len(), sigma.len());
    debug_assert_eq!(out.len(), sigma.len());
    for s in 0..segs.n_segments() {
        let mut t = F::one();
        for i in segs.range(s) {
            let e = (-(sigma[i] * deltas[i])).exp();
            out[i] = t * (F::one() - e);
            t *= e;
        }
    }
}

struct Node<F> {
    value: Vec<F>,
    rows: usize,
    cols: usize,
    label: &'static str,
    op: Op<F>,
}

enum Op<F> {
    Constant,
    ParamVec {
        group: ParamGroup,
    },
    EncodeGrid {
        group: ParamGroup,
        cfg: HashGridConfig,
        pts: Vec<[f64; 3]>,
    },
    EncodeGridJvp {
        group: ParamGroup,
        cfg: HashGridConfig,
        pts: Vec<[f64; 3]>,
        dirs: Vec<[f64; 3]>,
    },
    Linear {
        x: NodeId,
        group: ParamGroup,
        layer: LayerRef,
        bias: bool,
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    Softplus(NodeId),
    Exp(NodeId),
    Neg(NodeId),
    OneMinus(NodeId),
    MinConst(NodeId, F),
    Scale(NodeId, F),
    Square(NodeId),
    Powi(NodeId, i32),
    SoftmaxRows(NodeId),
    NormalizeRows {
        x: NodeId,
        eps: F,
    },
    CompositeWeights {
        sigma: NodeId,
        deltas: Vec<F>,
        segs: Arc<Segments>,
    },
    SegmentSum {
        x: NodeId,
        segs: Arc<Segments>,
    },
    SegmentWeightedSum {
        w: NodeId,
        x: NodeId,
        segs: Arc<Segments>,
    },
    SegmentWeightedSumConst {
        w: NodeId,
        xconst: Vec<F>,
        cols: usize,
        segs: Arc<Segments>,
    },
    GatherRows {
        x: NodeId,
        idx: Vec<u32>,
    },
    ConcatCols(Vec<NodeId>),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MulColBroadcast {
        x: NodeId,
        col: NodeId,
    },
    AddRowBroadcast {
        x: NodeId,
        row: NodeId,
    },
    BroadcastRow {
        row: NodeId,
    },
    ColTimesRow {
        col: NodeId,
        row: NodeId,
    },
    RowDotConst {
        x: NodeId,
        c: Vec<F>,
    },
    RowDotConstRows {
        x: NodeId,
        c: Vec<F>,
    },
    SelectRows {
        mask: Vec<bool>,
        a: NodeId,
        b: NodeId,
    },
    OverrideRows {
        x: NodeId,
        rows: Vec<u32>,
    },
    Detach,
    BceLoss {
        pred: NodeId,
        target: Vec<F>,
    },
    CrossEntropyRows {
        probs: NodeId,
        labels: Vec<u8>,
    },
    MeanAll(NodeId),
    MeanMasked {
        x: NodeId,
        mask: Vec<F>,
    },
    RowSum(NodeId),
    WeightedSum(Vec<(F, NodeId)>),
}

pub struct Tape<F: Real> {
    params: Arc<ParamSet<F>>,
    nodes: Vec<Node<F>>,
    /// When set, backward verifies every node adjoint is finite (slow; the
    /// per-group gradient check at the end always runs).
    pub check_nodes: bool,
}

impl<F: Real> Tape<F> {
    pub fn new(params: Arc<ParamSet<F>>) -> Tape<F> {
        Tape { params, nodes: Vec::new(), check_nodes: false }
    }

    pub fn params(&self) -> &ParamSet<F> {
        &self.params
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn value(&self, id: NodeId) -> &[F] {
        &self.nodes[id.ix()].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        let n = &self.nodes[id.ix()];
        (n.rows, n.cols)
    }

    pub fn rows(&self, id: NodeId) -> usize {
        self.nodes[id.ix()].rows
    }

    /// Forward value of a 1×1 node.
    pub fn scalar(&self, id: NodeId) -> F {
        let n = &self.nodes[id.ix()];
        assert_eq!((n.rows, n.cols), (1, 1), "scalar() on non-scalar node '{}'", n.label);
        n.value[0]
    }

    /// Replace the auto-assigned label (used to name loss terms in
    /// non-finite diagnostics).
    pub fn set_label(&mut self, id: NodeId, label: &'static str) {
        self.nodes[id.ix()].label = label;
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<F>, label: &'static str, op: Op<F>) -> NodeId {
        assert_eq!(value.len(), rows * cols, "node '{label}' value size");
        assert!(self.nodes.len() < u32::MAX as usize, "tape overflow");
        self.nodes.push(Node { value, rows, cols, label, op });
        NodeId((self.nodes.len() - 1) as u32)
    }

    // ---- graph constructors ------------------------------------------

    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<F>) -> NodeId {
        self.push(rows, cols, data, "constant", Op::Constant)
    }

    pub fn constant_scalar(&mut self, v: F) -> NodeId {
        self.constant(1, 1, vec![v])
    }

    /// Materialize a whole parameter group as a 1×len node (meant for the
    /// small light-color groups, not the grids).
    pub fn param_vec(&mut self, group: ParamGroup) -> NodeId {
        let v = self.params.group(group).to_vec();
        let len = v.len();
        self.push(1, len, v, "param_vec", Op::ParamVec { group })
    }

    /// Multi-resolution hash-grid encoding of `pts` (unit-cube coords).
    pub fn encode_grid(&mut self, group: ParamGroup, cfg: &HashGridConfig, pts: Vec<[f64; 3]>) -> NodeId {
        let n = pts.len();
        let dim = cfg.out_dim();
        let mut out = vec![F::zero(); n * dim];
        hashgrid::encode_fwd(cfg, self.params.group(group), &pts, &mut out);
        self.push(n, dim, out, "encode_grid", Op::EncodeGrid { group, cfg: cfg.clone(), pts })
    }

    /// Directional derivative of the encoding along `dirs` (unit-cube
    /// coordinates). Linear in the table, so it backpropagates exactly.
    pub fn encode_grid_jvp(
        &mut self,
        group: ParamGroup,
        cfg: &HashGridConfig,
        pts: Vec<[f64; 3]>,
        dirs: Vec<[f64; 3]>,
    ) -> NodeId {
        assert_eq!(pts.len(), dirs.len(), "encode_grid_jvp: pts/dirs length mismatch");
        let n = pts.len();
        let dim = cfg.out_dim();
        let mut out = vec![F::zero(); n * dim];
        hashgrid::encode_jvp_fwd(cfg, self.params.group(group), &pts, &dirs, &mut out);
        self.push(n, dim, out, "encode_grid_jvp", Op::EncodeGridJvp { group, cfg: cfg.clone(), pts, dirs })
    }

    /// `y = x·W (+ b)` with weights taken from `group` at `layer`.
    pub fn linear(&mut self, x: NodeId, group: ParamGroup, layer: LayerRef, bias: bool) -> NodeId {
        let (n, c) = self.shape(x);
        assert_eq!(c, layer.fan_in, "linear: input cols {} != fan_in {}", c, layer.fan_in);
        let p = self.params.group(group);
        let w = &p[layer.w_offset..layer.w_offset + layer.fan_in * layer.fan_out];
        let b = bias.then(|| &p[layer.b_offset..layer.b_offset + layer.fan_out]);
        let mut y = vec![F::zero(); n * layer.fan_out];
        linear_fwd(&self.nodes[x.ix()].value, w, b, n, layer.fan_in, layer.fan_out, &mut y);
        self.push(n, layer.fan_out, y, "linear", Op::Linear { x, group, layer, bias })
    }

    fn map_unary(&mut self, x: NodeId, label: &'static str, op: Op<F>, f: impl Fn(F) -> F) -> NodeId {
        let (rows, cols) = self.shape(x);
        let value = self.nodes[x.ix()].value.iter().map(|&v| f(v)).collect();
        self.push(rows, cols, value, label, op)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.map_unary(x, "relu", Op::Relu(x), |v| v.max(F::zero()))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.map_unary(x, "sigmoid", Op::Sigmoid(x), super::sigmoid)
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        self.map_unary(x, "softplus", Op::Softplus(x), super::softplus)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.map_unary(x, "exp", Op::Exp(x), |v| v.exp())
    }

    pub fn neg(&mut self, x: NodeId) -> NodeId {
        self.map_unary(x, "neg", Op::Neg(x), |v| -v)
    }

    pub fn one_minus(&mut self, x: NodeId) -> NodeId {
        self.map_unary(x, "one_minus", Op::OneMinus(x), |v| F::one() - v)
    }

    pub fn min_const(&mut self, x: NodeId, c: F) -> NodeId {
        self.map_unary(x, "min_const", Op::MinConst(x, c), |v| v.min(c))
    }

    pub fn scale(&mut self, x: NodeId, c: F) -> NodeId {
        self.map_unary(x, "scale", Op::Scale(x, c), |v| v * c)
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        self.map_unary(x, "square", Op::Square(x), |v| v * v)
    }

    pub fn powi(&mut self, x: NodeId, k: i32) -> NodeId {
        self.map_unary(x, "powi", Op::Powi(x, k), |v| v.powi(k))
    }

    /// Row-wise softmax (max-subtracted for stability).
    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let (rows, cols) = self.shape(x);
        assert!(cols > 0, "softmax_rows: zero cols");
        let xv = &self.nodes[x.ix()].value;
        let mut out = vec![F::zero(); rows * cols];
        for r in 0..rows {
            let xr = &xv[r * cols..(r + 1) * cols];
            let mut m = xr[0];
            for &v in &xr[1..] {
                m = m.max(v);
            }
            let mut sum = F::zero();
            let or = &mut out[r * cols..(r + 1) * cols];
            for (o, &v) in or.iter_mut().zip(xr) {
                *o = (v - m).exp();
                sum += *o;
            }
            for o in or.iter_mut() {
                *o = *o / sum;
            }
        }
        self.push(rows, cols, out, "softmax_rows", Op::SoftmaxRows(x))
    }

    /// Row-wise L2 normalization of 3-vectors; rows with norm ≤ eps become
    /// the up vector (0,0,1) with zero gradient.
    pub fn normalize_rows(&mut self, x: NodeId, eps: F) -> NodeId {
        let (rows, cols) = self.shape(x);
        assert_eq!(cols, 3, "normalize_rows: expected 3 cols");
        let xv = &self.nodes[x.ix()].value;
        let mut out = vec![F::zero(); rows * 3];
        for r in 0..rows {
            let v = &xv[r * 3..r * 3 + 3];
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            let o = &mut out[r * 3..r * 3 + 3];
            if n <= eps {
                o.copy_from_slice(&[F::zero(), F::zero(), F::one()]);
            } else {
                o[0] = v[0] / n;
                o[1] = v[1] / n;
                o[2] = v[2] / n;
            }
        }
        self.push(rows, 3, out, "normalize_rows", Op::NormalizeRows { x, eps })
    }

    /// Volume-rendering weights per sample, restarting at segment bounds.
    pub fn composite_weights(&mut self, sigma: NodeId, deltas: Vec<F>, segs: Arc<Segments>) -> NodeId {
        let (n, c) = self.shape(sigma);
        assert_eq!(c, 1, "composite_weights: sigma must be a column");
        assert_eq!(n, segs.total(), "composite_weights: sigma rows != segment total");
        assert_eq!(deltas.len(), n, "composite_weights: deltas length");
        let mut out = vec![F::zero(); n];
        composite_weights_fwd(&self.nodes[sigma.ix()].value, &deltas, &segs, &mut out);
        self.push(n, 1, out, "composite_weights", Op::CompositeWeights { sigma, deltas, segs })
    }

    /// Per-segment row sums: `[total × c] → [n_segs × c]`.
    pub fn segment_sum(&mut self, x: NodeId, segs: Arc<Segments>) -> NodeId {
        let (n, c) = self.shape(x);
        assert_eq!(n, segs.total(), "segment_sum: rows != segment total");
        let xv = &self.nodes[x.ix()].value;
        let m = segs.n_segments();
        let mut out = vec![F::zero(); m * c];
        for s in 0..m {
            let o = s * c;
            for i in segs.range(s) {
                for j in 0..c {
                    out[o + j] += xv[i * c + j];
                }
            }
        }
        self.push(m, c, out, "segment_sum", Op::SegmentSum { x, segs })
    }

    /// `out[s] = Σ_{i∈s} w_i · x_i` for node-valued samples `x`.
    pub fn segment_weighted_sum(&mut self, w: NodeId, x: NodeId, segs: Arc<Segments>) -> NodeId {
        let (nw, cw) = self.shape(w);
        let (nx, c) = self.shape(x);
        assert_eq!(cw, 1, "segment_weighted_sum: w must be a column");
        assert_eq!(nw, nx, "segment_weighted_sum: w/x rows");
        assert_eq!(nx, segs.total(), "segment_weighted_sum: rows != segment total");
        let m = segs.n_segments();
        let mut out = vec![F::zero(); m * c];
        {
            let wv = &self.nodes[w.ix()].value;
            let xv = &self.nodes[x.ix()].value;
            for s in 0..m {
                let o = s * c;
                for i in segs.range(s) {
                    let wi = wv[i];
                    for j in 0..c {
                        out[o + j] = wi.mul_add(xv[i * c + j], out[o + j]);
                    }
                }
            }
        }
        self.push(m, c, out, "segment_weighted_sum", Op::SegmentWeightedSum { w, x, segs })
    }

    /// `out[s] = Σ_{i∈s} w_i · xconst_i` for constant per-sample rows
    /// (e.g. sample depths).
    pub fn segment_weighted_sum_const(
        &mut self,
        w: NodeId,
        xconst: Vec<F>,
        cols: usize,
        segs: Arc<Segments>,
    ) -> NodeId {
        let (nw, cw) = self.shape(w);
        assert_eq!(cw, 1, "segment_weighted_sum_const: w must be a column");
        assert_eq!(nw, segs.total(), "segment_weighted_sum_const: rows != segment total");
        assert_eq!(xconst.len(), nw * cols, "segment_weighted_sum_const: xconst size");
        let m = segs.n_segments();
        let mut out = vec![F::zero(); m * cols];
        {
            let wv = &self.nodes[w.ix()].value;
            for s in 0..m {
                let o = s * cols;
                for i in segs.range(s) {
                    let wi = wv[i];
                    for j in 0..cols {
                        out[o + j] = wi.mul_add(xconst[i * cols + j], out[o + j]);
                    }
                }
            }
        }
        self.push(
            m,
            cols,
            out,
            "segment_weighted_sum_const",
            Op::SegmentWeightedSumConst { w, xconst, cols, segs },
        )
    }

    /// Row gather: `out[r] = x[idx[r]]`.
    pub fn gather_rows(&mut self, x: NodeId, idx: Vec<u32>) -> NodeId {
        let (n, c) = self.shape(x);
        let xv = &self.nodes[x.ix()].value;
        let mut out = vec![F::zero(); idx.len() * c];
        for (r, &i) in idx.iter().enumerate() {
            assert!((i as usize) < n, "gather_rows: index {i} out of {n}");
            out[r * c..(r + 1) * c].copy_from_slice(&xv[i as usize * c..(i as usize + 1) * c]);
        }
        self.push(idx.len(), c, out, "gather_rows", Op::GatherRows { x, idx })
    }

    /// Horizontal concatenation of same-height nodes.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_cols: empty");
        let rows = self.rows(parts[0]);
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = vec![F::zero(); rows * cols];
        let mut off = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            assert_eq!(r, rows, "concat_cols: row mismatch");
            let pv = &self.nodes[p.ix()].value;
            for row in 0..rows {
                out[row * cols + off..row * cols + off + c].copy_from_slice(&pv[row * c..(row + 1) * c]);
            }
            off += c;
        }
        self.push(rows, cols, out, "concat_cols", Op::ConcatCols(parts.to_vec()))
    }

    fn map_binary(&mut self, a: NodeId, b: NodeId, label: &'static str, op: Op<F>, f: impl Fn(F, F) -> F) -> NodeId {
        let (rows, cols) = self.shape(a);
        assert_eq!(self.shape(b), (rows, cols), "{label}: shape mismatch");
        let av = &self.nodes[a.ix()].value;
        let bv = &self.nodes[b.ix()].value;
        let value = av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect();
        self.push(rows, cols, value, label, op)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.map_binary(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.map_binary(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.map_binary(a, b, "mul", Op::Mul(a, b), |x, y| x * y)
    }

    /// Scale each row of `x` by the matching entry of column `col`.
    pub fn mul_col_broadcast(&mut self, x: NodeId, col: NodeId) -> NodeId {
        let (n, c) = self.shape(x);
        assert_eq!(self.shape(col), (n, 1), "mul_col_broadcast: col shape");
        let xv = &self.nodes[x.ix()].value;
        let cv = &self.nodes[col.ix()].value;
        let mut out = vec![F::zero(); n * c];
        for r in 0..n {
            for j in 0..c {
                out[r * c + j] = xv[r * c + j] * cv[r];
            }
        }
        self.push(n, c, out, "mul_col_broadcast", Op::MulColBroadcast { x, col })
    }

    /// Add a 1×c row vector to every row of `x`.
    pub fn add_row_broadcast(&mut self, x: NodeId, row: NodeId) -> NodeId {
        let (n, c) = self.shape(x);
        assert_eq!(self.shape(row), (1, c), "add_row_broadcast: row shape");
        let xv = &self.nodes[x.ix()].value;
        let rv = &self.nodes[row.ix()].value;
        let mut out = vec![F::zero(); n * c];
        for r in 0..n {
            for j in 0..c {
                out[r * c + j] = xv[r * c + j] + rv[j];
            }
        }
        self.push(n, c, out, "add_row_broadcast", Op::AddRowBroadcast { x, row })
    }

    /// Replicate a 1×c row `n` times.
    pub fn broadcast_row(&mut self, row: NodeId, n: usize) -> NodeId {
        let (r, c) = self.shape(row);
        assert_eq!(r, 1, "broadcast_row: expected one row");
        let rv = &self.nodes[row.ix()].value;
        let mut out = Vec::with_capacity(n * c);
        for _ in 0..n {
            out.extend_from_slice(rv);
        }
        self.push(n, c, out, "broadcast_row", Op::BroadcastRow { row })
    }

    /// Outer product `out[r][j] = col[r] · row[j]`.
    pub fn col_times_row(&mut self, col: NodeId, row: NodeId) -> NodeId {
        let (n, cc) = self.shape(col);
        let (rr, c) = self.shape(row);
        assert_eq!(cc, 1, "col_times_row: col shape");
        assert_eq!(rr, 1, "col_times_row: row shape");
        let cv = &self.nodes[col.ix()].value;
        let rv = &self.nodes[row.ix()].value;
        let mut out = vec![F::zero(); n * c];
        for r in 0..n {
            for j in 0..c {
                out[r * c + j] = cv[r] * rv[j];
            }
        }
        self.push(n, c, out, "col_times_row", Op::ColTimesRow { col, row })
    }

    /// Per-row dot with one constant vector: `out[r] = x_r · c`.
    pub fn row_dot_const(&mut self, x: NodeId, c: Vec<F>) -> NodeId {
        let (n, cols) = self.shape(x);
        assert_eq!(c.len(), cols, "row_dot_const: vector length");
        let xv = &self.nodes[x.ix()].value;
        let mut out = vec![F::zero(); n];
        for r in 0..n {
            let mut acc = F::zero();
            for j in 0..cols {
                acc = xv[r * cols + j].mul_add(c[j], acc);
            }
            out[r] = acc;
        }
        self.push(n, 1, out, "row_dot_const", Op::RowDotConst { x, c })
    }

    /// Per-row dot with per-row constant vectors: `out[r] = x_r · c_r`.
    pub fn row_dot_const_rows(&mut self, x: NodeId, c: Vec<F>) -> NodeId {
        let (n, cols) = self.shape(x);
        assert_eq!(c.len(), n * cols, "row_dot_const_rows: constant size");
        let xv = &self.nodes[x.ix()].value;
        let mut out = vec![F::zero(); n];
        for r in 0..n {
            let mut acc = F::zero();
            for j in 0..cols {
                acc = xv[r * cols + j].mul_add(c[r * cols + j], acc);
            }
            out[r] = acc;
        }
        self.push(n, 1, out, "row_dot_const_rows", Op::RowDotConstRows { x, c })
    }

    /// Row-wise select: rows where `mask` is true come from `a`, the rest
    /// from `b`. The mask is a forward-value decision — gradients flow only
    /// through the chosen branch.
    pub fn select_rows(&mut self, mask: Vec<bool>, a: NodeId, b: NodeId) -> NodeId {
        let (n, c) = self.shape(a);
        assert_eq!(self.shape(b), (n, c), "select_rows: branch shapes differ");
        assert_eq!(mask.len(), n, "select_rows: mask length");
        let av = &self.nodes[a.ix()].value;
        let bv = &self.nodes[b.ix()].value;
        let mut out = vec![F::zero(); n * c];
        for r in 0..n {
            let src = if mask[r] { av } else { bv };
            out[r * c..(r + 1) * c].copy_from_slice(&src[r * c..(r + 1) * c]);
        }
        self.push(n, c, out, "select_rows", Op::SelectRows { mask, a, b })
    }

    /// Replace the listed rows with constant values (their gradient is
    /// dropped); all other rows pass through.
    pub fn override_rows(&mut self, x: NodeId, rows: Vec<u32>, values: Vec<F>) -> NodeId {
        let (n, c) = self.shape(x);
        assert_eq!(values.len(), rows.len() * c, "override_rows: values size");
        let mut out = self.nodes[x.ix()].value.clone();
        for (k, &r) in rows.iter().enumerate() {
            assert!((r as usize) < n, "override_rows: row {r} out of {n}");
            out[r as usize * c..(r as usize + 1) * c].copy_from_slice(&values[k * c..(k + 1) * c]);
        }
        self.push(n, c, out, "override_rows", Op::OverrideRows { x, rows })
    }

    /// Identity forward, zero backward (stop-gradient).
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let (rows, cols) = self.shape(x);
        let value = self.nodes[x.ix()].value.clone();
        self.push(rows, cols, value, "detach", Op::Detach)
    }

    /// Mean binary cross-entropy of a probability column against constant
    /// targets, with predictions clamped to `[BCE_EPS, 1−BCE_EPS]`.
    pub fn bce_loss(&mut self, pred: NodeId, target: Vec<F>) -> NodeId {
        let (n, c) = self.shape(pred);
        assert_eq!(c, 1, "bce_loss: pred must be a column");
        assert_eq!(target.len(), n, "bce_loss: target length");
        assert!(n > 0, "bce_loss: empty batch");
        let lo = F::from_f64(BCE_EPS);
        let hi = F::from_f64(1.0 - BCE_EPS);
        let pv = &self.nodes[pred.ix()].value;
        let mut acc = F::zero();
        for (p, t) in pv.iter().zip(&target) {
            let pc = p.max(lo).min(hi);
            acc -= *t * pc.ln() + (F::one() - *t) * (F::one() - pc).ln();
        }
        let v = acc / F::from_f64(n as f64);
        self.push(1, 1, vec![v], "bce_loss", Op::BceLoss { pred, target })
    }

    /// Mean negative log-likelihood over rows of a probability matrix.
    /// `labels[r] == 255` skips a row; probabilities are clamped below by
    /// `CE_EPS`. Empty valid sets give 0.
    pub fn cross_entropy_rows(&mut self, probs: NodeId, labels: Vec<u8>) -> NodeId {
        let (n, c) = self.shape(probs);
        assert_eq!(labels.len(), n, "cross_entropy_rows: labels length");
        let pv = &self.nodes[probs.ix()].value;
        let lo = F::from_f64(CE_EPS);
        let mut acc = F::zero();
        let mut n_valid = 0usize;
        for (r, &l) in labels.iter().enumerate() {
            if l == 255 {
                continue;
            }
            assert!((l as usize) < c, "cross_entropy_rows: label {l} out of {c}");
            acc -= pv[r * c + l as usize].max(lo).ln();
            n_valid += 1;
        }
        let v = if n_valid == 0 { F::zero() } else { acc / F::from_f64(n_valid as f64) };
        self.push(1, 1, vec![v], "cross_entropy_rows", Op::CrossEntropyRows { probs, labels })
    }

    /// Mean over every entry.
    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let v = &self.nodes[x.ix()].value;
        assert!(!v.is_empty(), "mean_all: empty node");
        let sum: F = v.iter().copied().sum();
        let m = sum / F::from_f64(v.len() as f64);
        self.push(1, 1, vec![m], "mean_all", Op::MeanAll(x))
    }

    /// Weighted mean of a column: `Σ x_i·mask_i / Σ mask_i` (0 when the
    /// mask is all zero).
    pub fn mean_masked(&mut self, x: NodeId, mask: Vec<F>) -> NodeId {
        let (n, c) = self.shape(x);
        assert_eq!(c, 1, "mean_masked: x must be a column");
        assert_eq!(mask.len(), n, "mean_masked: mask length");
        let xv = &self.nodes[x.ix()].value;
        let mut num = F::zero();
        let mut den = F::zero();
        for (v, m) in xv.iter().zip(&mask) {
            num = v.mul_add(*m, num);
            den += *m;
        }
        let v = if den.to_f64() == 0.0 { F::zero() } else { num / den };
        self.push(1, 1, vec![v], "mean_masked", Op::MeanMasked { x, mask })
    }

    /// Sum across columns: `[n × c] → [n × 1]`.
    pub fn row_sum(&mut self, x: NodeId) -> NodeId {
        let (n, c) = self.shape(x);
        let xv = &self.nodes[x.ix()].value;
        let mut out = vec![F::zero(); n];
        for r in 0..n {
            let mut acc = F::zero();
            for j in 0..c {
                acc += xv[r * c + j];
            }
            out[r] = acc;
        }
        self.push(n, 1, out, "row_sum", Op::RowSum(x))
    }

    /// `Σ λ_k · term_k` over scalar nodes — the total-loss combiner.
    pub fn weighted_sum(&mut self, terms: &[(F, NodeId)]) -> NodeId {
        let mut acc = F::zero();
        for &(lam, t) in terms {
            acc = lam.mul_add(self.scalar(t), acc);
        }
        self.push(1, 1, vec![acc], "weighted_sum", Op::WeightedSum(terms.to_vec()))
    }

    // ---- backward -----------------------------------------------------

    /// Reverse sweep from a scalar loss node. Repeated calls on the same
    /// tape produce identical results.
    pub fn backward(&self, loss: NodeId) -> Result<GradSet<F>, TapeError> {
        let ln = &self.nodes[loss.ix()];
        assert_eq!((ln.rows, ln.cols), (1, 1), "backward: loss '{}' is not scalar", ln.label);
        let mut adj: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.ix()] = Some(vec![F::one()]);
        let mut grads = GradSet::zeros_like(&self.params);
        for id in (0..=loss.ix()).rev() {
            let Some(g) = adj[id].take() else { continue };
            if self.check_nodes && g.iter().any(|v| !v.is_finite()) {
                return Err(TapeError::NonFiniteAdjoint { label: self.nodes[id].label, index: id });
            }
            self.backprop_node(id, &g, &mut adj, &mut grads);
        }
        if let Some(group) = grads.first_non_finite() {
            return Err(TapeError::NonFiniteGrad { group });
        }
        Ok(grads)
    }

    fn adj_or_zero<'a>(&self, adj: &'a mut [Option<Vec<F>>], id: NodeId) -> &'a mut [F] {
        let node = &self.nodes[id.ix()];
        adj[id.ix()].get_or_insert_with(|| vec![F::zero(); node.rows * node.cols])
    }

    fn backprop_node(&self, id: usize, g: &[F], adj: &mut [Option<Vec<F>>], grads: &mut GradSet<F>) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Constant | Op::Detach => {}
            Op::ParamVec { group } => {
                for (d, &gi) in grads.group_mut(*group).iter_mut().zip(g) {
                    *d += gi;
                }
            }
            Op::EncodeGrid { group, cfg, pts } => {
                hashgrid::encode_bwd(cfg, pts, g, grads.group_mut(*group));
            }
            Op::EncodeGridJvp { group, cfg, pts, dirs } => {
                hashgrid::encode_jvp_bwd(cfg, pts, dirs, g, grads.group_mut(*group));
            }
            Op::Linear { x, group, layer, bias } => {
                let n = self.nodes[x.ix()].rows;
                let xv = &self.nodes[x.ix()].value;
                let p = self.params.group(*group);
                let w = &p[layer.w_offset..layer.w_offset + layer.fan_in * layer.fan_out];
                {
                    let gm = grads.group_mut(*group);
                    let (head, tail) = gm.split_at_mut(layer.b_offset);
                    let d_w = &mut head[layer.w_offset..layer.w_offset + layer.fan_in * layer.fan_out];
                    let d_b = bias.then(|| &mut tail[..layer.fan_out]);
                    linear_bwd(xv, w, g, n, layer.fan_in, layer.fan_out, None, Some(d_w), d_b);
                }
                let dx = self.adj_or_zero(adj, *x);
                linear_bwd(xv, w, g, n, layer.fan_in, layer.fan_out, Some(dx), None, None);
            }
            Op::Relu(x) => {
                let y = &node.value;
                let dx = self.adj_or_zero(adj, *x);
                for i in 0..g.len() {
                    if y[i] > F::zero() {
                        dx[i] += g[i];
                    }
                }
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                let dx = self.adj_or_zero(adj, *x);
                for i in 0..g.len() {
                    dx[i] = (g[i] * y[i] * (F::one() - y[i])) + dx[i];
                }
            }
            Op::Softplus(x) => {
                // softplus'(x) = sigmoid(x) = 1 − e^{−y}.
                let y = &node.value;
                let dx = self.adj_or_zero(adj, *x);
                for i in 0..g.len() {
                    dx[i] += g[i] * (F::one() - (-y[i]).exp());
                }
            }
            Op::Exp(x) => {
                let y = &node.value;
                let dx = self.adj_or_zero(adj, *x);
                for i in 0..g.len() {
                    dx[i] = g[i].mul_add(y[i], dx[i]);
                }
            }
            Op::Neg(x) | Op::OneMinus(x) => {
                let dx = self.adj_or_zero(adj, *x);
                for i in 0..g.len() {
                    dx[i] -= g[i];
                }
            }
            Op::MinConst(x, c) => {
                let y = &node.value;
                let dx = self.adj_or_zero(adj, *x);
                for i in 0..g.len() {
                    if y[i] < *c {
                        dx[i] += g[i];
                    }
                }
            }
            Op::Scale(x, c) => {
                let dx = self.adj_or_zero(adj, *x);
                for i in 0..g.len() {
                    dx[i] = g[i].mul_add(*c, dx[i]);
                }
            }
            Op::Square(x) => {
                let xv = &self.nodes[x.ix()].value;
                let two = F::from_f64(2.0);
                let dx = self.adj_or_zero(adj, *x);
                for i in 0..g.len() {
                    dx[i] += g[i] * two * xv[i];
                }
            }
            Op::Powi(x, k) => {
                let xv = &self.nodes[x.ix()].value;
                let kf = F::from_f64(*k as f64);
                let dx = self.adj_or_zero(adj, *x);
                for i in 0..g.len() {
                    dx[i] += g[i] * kf * xv[i].powi(*k - 1);
                }
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let (n, c) = (node.rows, node.cols);
                let dx = self.adj_or_zero(adj, *x);
                for r in 0..n {
                    let yr = &y[r * c..(r + 1) * c];
                    let gr = &g[r * c..(r + 1) * c];
                    let mut s = F::zero();
                    for j in 0..c {
                        s = gr[j].mul_add(yr[j], s);
                    }
                    let dr = &mut dx[r * c..(r + 1) * c];
                    for j in 0..c {
                        dr[j] += yr[j] * (gr[j] - s);
                    }
                }
            }
            Op::NormalizeRows { x, eps } => {
                let xv = &self.nodes[x.ix()].value;
                let y = &node.value;
                let dx = self.adj_or_zero(adj, *x);
                for r in 0..node.rows {
                    let v = &xv[r * 3..r * 3 + 3];
                    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                    if n <= *eps {
                        continue;
                    }
                    let yr = &y[r * 3..r * 3 + 3];
                    let gr = &g[r * 3..r * 3 + 3];
                    let dot = yr[0] * gr[0] + yr[1] * gr[1] + yr[2] * gr[2];
                    for j in 0..3 {
                        dx[r * 3 + j] += (gr[j] - yr[j] * dot) / n;
                    }
                }
            }
            Op::CompositeWeights { sigma, deltas, segs } => {
                // dL/dσ_i = δ_i·(T_i e^{−σ_i δ_i} g_i − Σ_{j>i} g_j w_j).
                let sv = &self.nodes[sigma.ix()].value;
                let w = &node.value;
                let ds = self.adj_or_zero(adj, *sigma);
                let mut trans: Vec<F> = Vec::new();
                for s in 0..segs.n_segments() {
                    let range = segs.range(s);
                    trans.clear();
                    let mut t = F::one();
                    for i in range.clone() {
                        trans.push(t);
                        t *= (-(sv[i] * deltas[i])).exp();
                    }
                    let mut suffix = F::zero();
                    for (k, i) in range.clone().enumerate().rev() {
                        let e = (-(sv[i] * deltas[i])).exp();
                        ds[i] += deltas[i] * (trans[k] * e * g[i] - suffix);
                        suffix = g[i].mul_add(w[i], suffix);
                    }
                }
            }
            Op::SegmentSum { x, segs } => {
                let c = node.cols;
                let dx = self.adj_or_zero(adj, *x);
                for s in 0..segs.n_segments() {
                    let gs = &g[s * c..(s + 1) * c];
                    for i in segs.range(s) {
                        for j in 0..c {
                            dx[i * c + j] += gs[j];
                        }
                    }
                }
            }
            Op::SegmentWeightedSum { w, x, segs } => {
                let c = node.cols;
                let wv = &self.nodes[w.ix()].value;
                let xv = &self.nodes[x.ix()].value;
                {
                    let dw = self.adj_or_zero(adj, *w);
                    for s in 0..segs.n_segments() {
                        let gs = &g[s * c..(s + 1) * c];
                        for i in segs.range(s) {
                            let mut acc = F::zero();
                            for j in 0..c {
                                acc = gs[j].mul_add(xv[i * c + j], acc);
                            }
                            dw[i] += acc;
                        }
                    }
                }
                let dx = self.adj_or_zero(adj, *x);
                for s in 0..segs.n_segments() {
                    let gs = &g[s * c..(s + 1) * c];
                    for i in segs.range(s) {
                        for j in 0..c {
                            dx[i * c + j] = wv[i].mul_add(gs[j], dx[i * c + j]);
                        }
                    }
                }
            }
            Op::SegmentWeightedSumConst { w, xconst, cols, segs } => {
                let c = *cols;
                let dw = self.adj_or_zero(adj, *w);
                for s in 0..segs.n_segments() {
                    let gs = &g[s * c..(s + 1) * c];
                    for i in segs.range(s) {
                        let mut acc = F::zero();
                        for j in 0..c {
                            acc = gs[j].mul_add(xconst[i * c + j], acc);
                        }
                        dw[i] += acc;
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                let c = node.cols;
                let dx = self.adj_or_zero(adj, *x);
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        dx[i as usize * c + j] += g[r * c + j];
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let cols = node.cols;
                let mut off = 0;
                for &p in parts {
                    let (rows, c) = self.shape(p);
                    let dp = self.adj_or_zero(adj, p);
                    for r in 0..rows {
                        for j in 0..c {
                            dp[r * c + j] += g[r * cols + off + j];
                        }
                    }
                    off += c;
                }
            }
            Op::Add(a, b) => {
                {
                    let da = self.adj_or_zero(adj, *a);
                    for i in 0..g.len() {
                        da[i] += g[i];
                    }
                }
                let db = self.adj_or_zero(adj, *b);
                for i in 0..g.len() {
                    db[i] += g[i];
                }
            }
            Op::Sub(a, b) => {
                {
                    let da = self.adj_or_zero(adj, *a);
                    for i in 0..g.len() {
                        da[i] += g[i];
                    }
                }
                let db = self.adj_or_zero(adj, *b);
                for i in 0..g.len() {
                    db[i] -= g[i];
                }
            }
            Op::Mul(a, b) => {
                let av = &self.nodes[a.ix()].value;
                let bv = &self.nodes[b.ix()].value;
                {
                    let da = self.adj_or_zero(adj, *a);
                    for i in 0..g.len() {
                        da[i] = g[i].mul_add(bv[i], da[i]);
                    }
                }
                let db = self.adj_or_zero(adj, *b);
                for i in 0..g.len() {
                    db[i] = g[i].mul_add(av[i], db[i]);
                }
            }
            Op::MulColBroadcast { x, col } => {
                let (n, c) = (node.rows, node.cols);
                let xv = &self.nodes[x.ix()].value;
                let cv = &self.nodes[col.ix()].value;
                {
                    let dx = self.adj_or_zero(adj, *x);
                    for r in 0..n {
                        for j in 0..c {
                            dx[r * c + j] = g[r * c + j].mul_add(cv[r], dx[r * c + j]);
                        }
                    }
                }
                let dc = self.adj_or_zero(adj, *col);
                for r in 0..n {
                    let mut acc = F::zero();
                    for j in 0..c {
                        acc = g[r * c + j].mul_add(xv[r * c + j], acc);
                    }
                    dc[r] += acc;
                }
            }
            Op::AddRowBroadcast { x, row } => {
                let (n, c) = (node.rows, node.cols);
                {
                    let dx = self.adj_or_zero(adj, *x);
                    for i in 0..g.len() {
                        dx[i] += g[i];
                    }
                }
                let dr = self.adj_or_zero(adj, *row);
                for r in 0..n {
                    for j in 0..c {
                        dr[j] += g[r * c + j];
                    }
                }
            }
            Op::BroadcastRow { row } => {
                let (n, c) = (node.rows, node.cols);
                let dr = self.adj_or_zero(adj, *row);
                for r in 0..n {
                    for j in 0..c {
                        dr[j] += g[r * c + j];
                    }
                }
            }
            Op::ColTimesRow { col, row } => {
                let (n, c) = (node.rows, node.cols);
                let cv = &self.nodes[col.ix()].value;
                let rv = &self.nodes[row.ix()].value;
                {
                    let dc = self.adj_or_zero(adj, *col);
                    for r in 0..n {
                        let mut acc = F::zero();
                        for j in 0..c {
                            acc = g[r * c + j].mul_add(rv[j], acc);
                        }
                        dc[r] += acc;
                    }
                }
                let dr = self.adj_or_zero(adj, *row);
                for r in 0..n {
                    for j in 0..c {
                        dr[j] = g[r * c + j].mul_add(cv[r], dr[j]);
                    }
                }
            }
            Op::RowDotConst { x, c } => {
                let cols = c.len();
                let dx = self.adj_or_zero(adj, *x);
                for r in 0..node.rows {
                    for j in 0..cols {
                        dx[r * cols + j] = g[r].mul_add(c[j], dx[r * cols + j]);
                    }
                }
            }
            Op::RowDotConstRows { x, c } => {
                let cols = self.nodes[x.ix()].cols;
                let dx = self.adj_or_zero(adj, *x);
                for r in 0..node.rows {
                    for j in 0..cols {
                        dx[r * cols + j] = g[r].mul_add(c[r * cols + j], dx[r * cols + j]);
                    }
                }
            }
            Op::SelectRows { mask, a, b } => {
                let c = node.cols;
                {
                    let da = self.adj_or_zero(adj, *a);
                    for (r, &m) in mask.iter().enumerate() {
                        if m {
                            for j in 0..c {
                                da[r * c + j] += g[r * c + j];
                            }
                        }
                    }
                }
                let db = self.adj_or_zero(adj, *b);
                for (r, &m) in mask.iter().enumerate() {
                    if !m {
                        for j in 0..c {
                            db[r * c + j] += g[r * c + j];
                        }
                    }
                }
            }
            Op::OverrideRows { x, rows } => {
                let c = node.cols;
                let mut replaced = vec![false; node.rows];
                for &r in rows {
                    replaced[r as usize] = true;
                }
                let dx = self.adj_or_zero(adj, *x);
                for r in 0..node.rows {
                    if !replaced[r] {
                        for j in 0..c {
                            dx[r * c + j] += g[r * c + j];
                        }
                    }
                }
            }
            Op::BceLoss { pred, target } => {
                let pv = &self.nodes[pred.ix()].value;
                let n = F::from_f64(pv.len() as f64);
                let lo = F::from_f64(BCE_EPS);
                let hi = F::from_f64(1.0 - BCE_EPS);
                let gs = g[0];
                let dp = self.adj_or_zero(adj, *pred);
                for i in 0..pv.len() {
                    let p = pv[i];
                    if p > lo && p < hi {
                        let t = target[i];
                        dp[i] += gs * ((F::one() - t) / (F::one() - p) - t / p) / n;
                    }
                }
            }
            Op::CrossEntropyRows { probs, labels } => {
                let (_, c) = self.shape(*probs);
                let pv = &self.nodes[probs.ix()].value;
                let n_valid = labels.iter().filter(|&&l| l != 255).count();
                if n_valid == 0 {
                    return;
                }
                let lo = F::from_f64(CE_EPS);
                let scale = g[0] / F::from_f64(n_valid as f64);
                let dp = self.adj_or_zero(adj, *probs);
                for (r, &l) in labels.iter().enumerate() {
                    if l == 255 {
                        continue;
                    }
                    let p = pv[r * c + l as usize];
                    if p > lo {
                        dp[r * c + l as usize] -= scale / p;
                    }
                }
            }
            Op::MeanAll(x) => {
                let len = self.nodes[x.ix()].value.len();
                let s = g[0] / F::from_f64(len as f64);
                let dx = self.adj_or_zero(adj, *x);
                for d in dx.iter_mut() {
                    *d += s;
                }
            }
            Op::MeanMasked { x, mask } => {
                let mut den = F::zero();
                for m in mask {
                    den += *m;
                }
                if den.to_f64() == 0.0 {
                    return;
                }
                let s = g[0] / den;
                let dx = self.adj_or_zero(adj, *x);
                for (d, m) in dx.iter_mut().zip(mask) {
                    *d = s.mul_add(*m, *d);
                }
            }
            Op::RowSum(x) => {
                let c = self.nodes[x.ix()].cols;
                let dx = self.adj_or_zero(adj, *x);
                for r in 0..node.rows {
                    for j in 0..c {
                        dx[r * c + j] += g[r];
                    }
                }
            }
            Op::WeightedSum(terms) => {
                for &(lam, t) in terms {
                    let dt = self.adj_or_zero(adj, t);
                    dt[0] = lam.mul_add(g[0], dt[0]);
                }
            }
        }
    }
}
