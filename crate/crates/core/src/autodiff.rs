//! Tape-based reverse-mode differentiation over dense row-major matrices.
//!
//! Every operation appends a node holding its value and the handles of its
//! inputs. [`Tape::backward`] sweeps the nodes in reverse order once and
//! returns the adjoint of every node. The op set is small and specialized:
//! besides dense algebra it has the block-sparse sheaf diffusion product, the
//! Householder construction, and per-stalk mixing, each with a hand-written
//! vector-Jacobian product.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::graph::DirectedGraph;
use crate::params::{ParamId, ParameterStore};
use crate::sheaf::{householder_from_flat, householder_vjp, softplus, softplus_grad};
use crate::tensor::{gemm, gemm_new, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Identity,
    Tanh,
    Softplus,
    Gelu,
    Relu,
    Square,
    /// `x^{-1/2}` for `x > 0`, else `0`.
    PinvSqrt,
    /// `a·x + b`
    Affine(f64, f64),
}

impl Unary {
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Unary::Identity => x,
            Unary::Tanh => tanh(x),
            Unary::Softplus => softplus(x),
            Unary::Gelu => {
                let u = GELU_C * (x + 0.044715 * x * x * x);
                0.5 * x * (1.0 + tanh(u))
            }
            Unary::Relu => x.max(0.0),
            Unary::Square => x * x,
            Unary::PinvSqrt => {
                if x > 0.0 {
                    1.0 / x.sqrt()
                } else {
                    0.0
                }
            }
            Unary::Affine(a, b) => a * x + b,
        }
    }

    /// Derivative at input `x` given output `y`.
    pub fn deriv(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Identity => 1.0,
            Unary::Tanh => 1.0 - y * y,
            Unary::Softplus => softplus_grad(x),
            Unary::Gelu => {
                let u = GELU_C * (x + 0.044715 * x * x * x);
                let t = tanh(u);
                let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            }
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Square => 2.0 * x,
            Unary::PinvSqrt => {
                if x > 0.0 {
                    -0.5 * y / x
                } else {
                    0.0
                }
            }
            Unary::Affine(a, _) => a,
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// `exp(z)` for `z ≤ 0`, branch-free so loops over slices vectorize.
/// Arguments below `-700` are clamped; the result there is below `1e-304`.
#[inline(always)]
fn exp_nonpositive(z: f64) -> f64 {
    const LOG2E: f64 = std::f64::consts::LOG2_E;
    const LN2_HI: f64 = 6.931_471_803_691_238_2e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    // adding 1.5·2^52 rounds to an integer held in the low mantissa bits
    const ROUND: f64 = 6_755_399_441_055_744.0;
    let z = z.max(-700.0);
    let shifted = z * LOG2E + ROUND;
    let k = shifted - ROUND;
    let r = (z - k * LN2_HI) - k * LN2_LO;
    // Taylor series to r^13; |r| ≤ ln2/2 keeps the remainder below 1e-17
    let mut p = 1.0 / 6_227_020_800.0;
    for c in [
        1.0 / 479_001_600.0,
        1.0 / 39_916_800.0,
        1.0 / 3_628_800.0,
        1.0 / 362_880.0,
        1.0 / 40_320.0,
        1.0 / 5_040.0,
        1.0 / 720.0,
        1.0 / 120.0,
        1.0 / 24.0,
        1.0 / 6.0,
        0.5,
        1.0,
        1.0,
    ] {
        p = p * r + c;
    }
    let two_k = f64::from_bits(shifted.to_bits().wrapping_add(1023) << 52);
    p * two_k
}

/// `tanh` without data-dependent branches: an odd series near the origin,
/// `(1 − e)/(1 + e)` with `e = exp(−2|x|)` elsewhere.
#[inline(always)]
fn tanh(x: f64) -> f64 {
    let a = x.abs();
    let e = exp_nonpositive(-2.0 * a);
    let far = ((1.0 - e) / (1.0 + e)).copysign(x);
    let x2 = x * x;
    let near = x
        * (1.0
            + x2 * (-1.0 / 3.0
                + x2 * (2.0 / 15.0
                    + x2 * (-17.0 / 315.0 + x2 * (62.0 / 2835.0 + x2 * (-1382.0 / 155_925.0))))));
    if a < 0.05 {
        near
    } else {
        far
    }
}

/// `tanh` of every entry. On x86-64 with AVX2 the same kernel is compiled for
/// four lanes; without FMA contraction both paths give identical bits.
fn tanh_slice(x: &[f64]) -> Vec<f64> {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: AVX2 support was just detected.
        return unsafe { tanh_slice_avx2(x) };
    }
    tanh_slice_scalar(x)
}

fn tanh_slice_scalar(x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (o, &v) in out.iter_mut().zip(x) {
        *o = tanh(v);
    }
    out
}

// A plain loop rather than an iterator closure: the closure would be compiled
// without the target feature and called per element.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn tanh_slice_avx2(x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (o, &v) in out.iter_mut().zip(x) {
        *o = tanh(v);
    }
    out
}

/// Constant sparse matrix in CSR form.
#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    pub rows: usize,
    pub cols: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl CsrMatrix {
    /// `out = self · x`
    pub fn matmul_dense(&self, x: &Tensor) -> Tensor {
        assert_eq!(self.cols, x.rows, "spmm inner dimension");
        let mut out = Tensor::zeros(self.rows, x.cols);
        for r in 0..self.rows {
            let dst = out.row_mut(r);
            for p in self.row_ptr[r]..self.row_ptr[r + 1] {
                let w = self.values[p];
                for (o, v) in dst.iter_mut().zip(x.row(self.col_idx[p])) {
                    *o += w * v;
                }
            }
        }
        out
    }

    /// `out = selfᵀ · g`
    pub fn transpose_matmul_dense(&self, g: &Tensor) -> Tensor {
        assert_eq!(self.rows, g.rows, "spmm transpose inner dimension");
        let mut out = Tensor::zeros(self.cols, g.cols);
        for r in 0..self.rows {
            for p in self.row_ptr[r]..self.row_ptr[r + 1] {
                let w = self.values[p];
                let c = self.col_idx[p];
                let src = g.row(r);
                for (o, v) in out.row_mut(c).iter_mut().zip(src) {
                    *o += w * v;
                }
            }
        }
        out
    }

    pub fn to_dense(&self) -> Tensor {
        let mut t = Tensor::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            for p in self.row_ptr[r]..self.row_ptr[r + 1] {
                t.set(r, self.col_idx[p], self.values[p]);
            }
        }
        t
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulRows(Var, Var),
    MulConst(Var, Rc<Tensor>),
    Unary(Var, Unary),
    Reshape(Var),
    SliceCols(Var, usize, usize),
    GatherRows(Var, Rc<Vec<usize>>),
    TileRows(Var, usize),
    SpMM(Var, Rc<CsrMatrix>),
    Householder(Var, usize),
    BatchAtB(Var, Var, usize),
    StalkLeft(Var, Var, usize),
    BlockDiffusion {
        x: Var,
        diag: Var,
        coef: Var,
        blocks: Var,
        d: usize,
        graph: Rc<DirectedGraph>,
    },
    LayerNorm(Var, Rc<Vec<f64>>),
    /// `f(a·wa + b·wb + bias)`, keeping the pre-activation.
    Affine2 {
        a: Var,
        wa: Var,
        b: Var,
        wb: Var,
        bias: Var,
        f: Unary,
        pre: Tensor,
    },
    CrossEntropy {
        logits: Var,
        labels: Rc<Vec<usize>>,
        rows: Rc<Vec<usize>>,
        probs: Rc<Tensor>,
    },
    Sum(Var),
    Dot(Var, Rc<Tensor>),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Recorded forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints of the leaves and parameters reached by a reverse sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Adjoint of `v`, or zeros shaped like `like` when nothing reached it.
    pub fn get_or_zeros(&self, v: Var, rows: usize, cols: usize) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(rows, cols))
    }
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Shape(msg()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// An input that gradients may be requested for.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Alias of [`Tape::leaf`] for values whose adjoint is never read.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// Adds the `1 × c` row `b` to every row of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        check(bv.rows == 1 && bv.cols == xv.cols, || {
            format!("bias {:?} for input {:?}", bv.shape(), xv.shape())
        })?;
        let mut out = xv.clone();
        for r in 0..out.rows {
            for (o, bb) in out.row_mut(r).iter_mut().zip(&bv.data) {
                *o += bb;
            }
        }
        Ok(self.push(out, Op::AddBias(x, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    /// Scales row `r` of `x` by `s[r]`, with `s` an `r × 1` column.
    pub fn mul_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xv, sv) = (self.value(x), self.value(s));
        check(sv.cols == 1 && sv.rows == xv.rows, || {
            format!("row scale {:?} for input {:?}", sv.shape(), xv.shape())
        })?;
        let mut out = xv.clone();
        for r in 0..out.rows {
            let w = sv.data[r];
            for o in out.row_mut(r) {
                *o *= w;
            }
        }
        Ok(self.push(out, Op::MulRows(x, s)))
    }

    /// Elementwise product with a constant tensor (masks, dropout).
    pub fn mul_const(&mut self, x: Var, c: Tensor) -> Result<Var> {
        let v = self.value(x).zip_map(&c, |a, b| a * b)?;
        Ok(self.push(v, Op::MulConst(x, Rc::new(c))))
    }

    pub fn unary(&mut self, x: Var, f: Unary) -> Var {
        if f == Unary::Identity {
            return x;
        }
        let v = match f {
            Unary::Tanh => {
                let t = self.value(x);
                Tensor {
                    rows: t.rows,
                    cols: t.cols,
                    data: tanh_slice(&t.data),
                }
            }
            _ => self.value(x).map(|a| f.eval(a)),
        };
        self.push(v, Op::Unary(x, f))
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        if self.shape(x) == (rows, cols) {
            return Ok(x);
        }
        let v = self.value(x).clone().reshaped(rows, cols)?;
        Ok(self.push(v, Op::Reshape(x)))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        check(start <= end && end <= xv.cols, || {
            format!("column slice {start}..{end} of {:?}", xv.shape())
        })?;
        let mut out = Tensor::zeros(xv.rows, end - start);
        for r in 0..xv.rows {
            out.row_mut(r).copy_from_slice(&xv.row(r)[start..end]);
        }
        Ok(self.push(out, Op::SliceCols(x, start, end)))
    }

    pub fn gather_rows(&mut self, x: Var, idx: Rc<Vec<usize>>) -> Result<Var> {
        let xv = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= xv.rows) {
            return Err(Error::Shape(format!("gather row {bad} of {:?}", xv.shape())));
        }
        let mut out = Tensor::zeros(idx.len(), xv.cols);
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(xv.row(i));
        }
        Ok(self.push(out, Op::GatherRows(x, idx)))
    }

    /// Stacks `times` copies of `x` vertically.
    pub fn tile_rows(&mut self, x: Var, times: usize) -> Var {
        let xv = self.value(x);
        let mut data = Vec::with_capacity(xv.data.len() * times);
        for _ in 0..times {
            data.extend_from_slice(&xv.data);
        }
        let out = Tensor {
            rows: xv.rows * times,
            cols: xv.cols,
            data,
        };
        self.push(out, Op::TileRows(x, times))
    }

    /// `f(a·wa + b·wb + bias)` as one node: one round of a mean-aggregation
    /// predictor stores two tensors instead of six.
    pub fn affine2(&mut self, a: Var, wa: Var, b: Var, wb: Var, bias: Var, f: Unary) -> Result<Var> {
        let (av, wav, bv, wbv, biasv) = (self.value(a), self.value(wa), self.value(b), self.value(wb), self.value(bias));
        check(
            av.cols == wav.rows
                && bv.cols == wbv.rows
                && av.rows == bv.rows
                && wav.cols == wbv.cols
                && biasv.rows == 1
                && biasv.cols == wav.cols,
            || {
                format!(
                    "affine2 with a {:?}, wa {:?}, b {:?}, wb {:?}, bias {:?}",
                    av.shape(),
                    wav.shape(),
                    bv.shape(),
                    wbv.shape(),
                    biasv.shape()
                )
            },
        )?;
        let mut pre = gemm_new(false, false, av, wav);
        gemm(false, false, 1.0, bv, wbv, 1.0, &mut pre);
        for r in 0..pre.rows {
            for (o, c) in pre.row_mut(r).iter_mut().zip(&biasv.data) {
                *o += c;
            }
        }
        let out = match f {
            Unary::Tanh => Tensor {
                rows: pre.rows,
                cols: pre.cols,
                data: tanh_slice(&pre.data),
            },
            Unary::Identity => pre.clone(),
            _ => pre.map(|x| f.eval(x)),
        };
        Ok(self.push(out, Op::Affine2 { a, wa, b, wb, bias, f, pre }))
    }

    pub fn spmm(&mut self, a: Rc<CsrMatrix>, x: Var) -> Result<Var> {
        check(a.cols == self.value(x).rows, || {
            format!("sparse {}x{} times {:?}", a.rows, a.cols, self.value(x).shape())
        })?;
        let v = a.matmul_dense(self.value(x));
        Ok(self.push(v, Op::SpMM(x, a)))
    }

    /// Rows of `v` hold `k` packed reflection vectors of length `d`; output
    /// rows hold the row-major `d × d` products.
    pub fn householder(&mut self, v: Var, d: usize) -> Result<Var> {
        let vv = self.value(v);
        check(d > 0 && vv.cols % d == 0, || {
            format!("{} reflection values per row for d={d}", vv.cols)
        })?;
        let mut out = Tensor::zeros(vv.rows, d * d);
        for r in 0..vv.rows {
            out.row_mut(r)
                .copy_from_slice(&householder_from_flat(vv.row(r), d).data);
        }
        Ok(self.push(out, Op::Householder(v, d)))
    }

    /// Row-wise `aᵣᵀ bᵣ` for `d × d` blocks.
    pub fn batch_at_b(&mut self, a: Var, b: Var, d: usize) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        check(av.shape() == bv.shape() && av.cols == d * d, || {
            format!("batched blocks {:?} and {:?} for d={d}", av.shape(), bv.shape())
        })?;
        let mut out = Tensor::zeros(av.rows, d * d);
        for r in 0..av.rows {
            let (x, y) = (av.row(r), bv.row(r));
            let dst = out.row_mut(r);
            for i in 0..d {
                for j in 0..d {
                    let mut s = 0.0;
                    for k in 0..d {
                        s += x[k * d + i] * y[k * d + j];
                    }
                    dst[i * d + j] = s;
                }
            }
        }
        Ok(self.push(out, Op::BatchAtB(a, b, d)))
    }

    /// `W·Xᵢ` for every node block `Xᵢ` (`d × h`, flattened in row `i` of `x`).
    pub fn stalk_left(&mut self, w: Var, x: Var, d: usize) -> Result<Var> {
        let (wv, xv) = (self.value(w), self.value(x));
        check(wv.shape() == (d, d) && xv.cols % d == 0, || {
            format!("stalk mixing {:?} on {:?} with d={d}", wv.shape(), xv.shape())
        })?;
        let h = xv.cols / d;
        let mut out = Tensor::zeros(xv.rows, xv.cols);
        for r in 0..xv.rows {
            let src = xv.row(r);
            let dst = out.row_mut(r);
            for a in 0..d {
                for b in 0..d {
                    let wab = wv.data[a * d + b];
                    for c in 0..h {
                        dst[a * h + c] += wab * src[b * h + c];
                    }
                }
            }
        }
        Ok(self.push(out, Op::StalkLeft(w, x, d)))
    }

    /// `Yᵢ = diagᵢ·Xᵢ − Σ_{e=(i,j)} coef_e·M_e·Xⱼ`, the block-sparse product of
    /// a conformal sheaf Laplacian whose off-diagonal block on arc `e` is
    /// `−coef_e·M_e`. `x` is `n × (d·h)`, `diag` is `n × 1`, `coef` is `E × 1`
    /// and `blocks` is `E × d²`.
    pub fn block_diffusion(
        &mut self,
        x: Var,
        diag: Var,
        coef: Var,
        blocks: Var,
        d: usize,
        graph: Rc<DirectedGraph>,
    ) -> Result<Var> {
        let n = graph.num_nodes();
        let e_count = graph.num_arcs();
        let (xv, dv, cv, mv) = (
            self.value(x),
            self.value(diag),
            self.value(coef),
            self.value(blocks),
        );
        check(
            xv.rows == n
                && xv.cols % d == 0
                && dv.shape() == (n, 1)
                && cv.shape() == (e_count, 1)
                && mv.shape() == (e_count, d * d),
            || {
                format!(
                    "diffusion over {n} nodes/{e_count} arcs with x {:?}, diag {:?}, coef {:?}, blocks {:?}",
                    xv.shape(),
                    dv.shape(),
                    cv.shape(),
                    mv.shape()
                )
            },
        )?;
        let h = xv.cols / d;
        let mut out = Tensor::zeros(n, xv.cols);
        for i in 0..n {
            let di = dv.data[i];
            let dst = out.row_mut(i);
            for (o, v) in dst.iter_mut().zip(xv.row(i)) {
                *o = di * v;
            }
            for e in graph.out_arcs(i) {
                let j = graph.arcs()[e].1;
                let c = cv.data[e];
                if c == 0.0 {
                    continue;
                }
                let m = mv.row(e);
                let xj = xv.row(j);
                for a in 0..d {
                    for b in 0..d {
                        let w = c * m[a * d + b];
                        for k in 0..h {
                            dst[a * h + k] -= w * xj[b * h + k];
                        }
                    }
                }
            }
        }
        Ok(self.push(
            out,
            Op::BlockDiffusion {
                x,
                diag,
                coef,
                blocks,
                d,
                graph,
            },
        ))
    }

    /// Per-row standardization (no affine part).
    pub fn layer_norm(&mut self, x: Var) -> Var {
        const EPS: f64 = 1e-5;
        let xv = self.value(x);
        let mut out = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.rows);
        let c = xv.cols as f64;
        for r in 0..xv.rows {
            let row = out.row_mut(r);
            let mean = row.iter().sum::<f64>() / c;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
            let s = 1.0 / (var + EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * s;
            }
            inv_std.push(s);
        }
        self.push(out, Op::LayerNorm(x, Rc::new(inv_std)))
    }

    /// Mean negative log-softmax of `logits` over `rows`.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        labels: Rc<Vec<usize>>,
        rows: Rc<Vec<usize>>,
    ) -> Result<Var> {
        let lv = self.value(logits);
        if rows.is_empty() {
            return Err(Error::EmptyMask);
        }
        check(labels.len() == rows.len(), || {
            format!("{} labels for {} rows", labels.len(), rows.len())
        })?;
        let mut probs = Tensor::zeros(rows.len(), lv.cols);
        let mut loss = 0.0;
        for (k, (&r, &y)) in rows.iter().zip(labels.iter()).enumerate() {
            check(r < lv.rows && y < lv.cols, || {
                format!("row {r} / label {y} outside logits {:?}", lv.shape())
            })?;
            let row = lv.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = z.ln() + max;
            loss += log_z - row[y];
            for (p, v) in probs.row_mut(k).iter_mut().zip(row) {
                *p = (v - log_z).exp();
            }
        }
        let value = Tensor::scalar(loss / rows.len() as f64);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels,
                rows,
                probs: Rc::new(probs),
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x))
    }

    /// `Σ w ∘ x` for a constant weight tensor.
    pub fn dot_const(&mut self, x: Var, w: Tensor) -> Result<Var> {
        let xv = self.value(x);
        check(xv.shape() == w.shape(), || {
            format!("dot of {:?} with weights {:?}", xv.shape(), w.shape())
        })?;
        let s = xv.data.iter().zip(&w.data).map(|(a, b)| a * b).sum();
        Ok(self.push(Tensor::scalar(s), Op::Dot(x, Rc::new(w))))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.shape(output) != (1, 1) {
            return Err(Error::Tape(format!(
                "backward needs a scalar output, got {:?}",
                self.shape(output)
            )));
        }
        self.backward_with_seed(output, Tensor::scalar(1.0))
    }

    /// Reverse sweep seeded with an arbitrary adjoint for `output`.
    pub fn backward_with_seed(&self, output: Var, seed: Tensor) -> Result<Gradients> {
        if output.0 >= self.nodes.len() {
            return Err(Error::Tape("output does not belong to this tape".into()));
        }
        if seed.shape() != self.shape(output) {
            return Err(Error::Tape(format!(
                "seed {:?} for output {:?}",
                seed.shape(),
                self.shape(output)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed);
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if matches!(self.nodes[idx].op, Op::Leaf | Op::Param(_)) {
                grads[idx] = Some(g);
            } else {
                self.propagate(idx, g, &mut grads);
            }
        }
        grads.resize(self.nodes.len(), None);
        Ok(Gradients { grads })
    }

    /// Adds parameter adjoints into the store's gradient slots.
    pub fn accumulate_param_grads(&self, grads: &Gradients, store: &mut ParameterStore) {
        for (idx, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, grads.grads.get(idx).and_then(Option::as_ref)) {
                store.grad_mut(*id).add_assign(g);
            }
        }
    }

    fn propagate(&self, idx: usize, g: Tensor, grads: &mut [Option<Tensor>]) {
        fn acc(grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        }
        let val = |v: Var| &self.nodes[v.0].value;

        match &self.nodes[idx].op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let ga = gemm_new(false, true, &g, bv);
                let gb = gemm_new(true, false, av, &g);
                acc(grads, *a, ga);
                acc(grads, *b, gb);
            }
            Op::AddBias(x, b) => {
                let mut gb = Tensor::zeros(1, g.cols);
                for r in 0..g.rows {
                    for (o, v) in gb.data.iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                acc(grads, *b, gb);
                acc(grads, *x, g);
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g);
            }
            Op::Sub(a, b) => {
                acc(grads, *b, g.scale(-1.0));
                acc(grads, *a, g);
            }
            Op::Mul(a, b) => {
                let ga = g.zip_map(val(*b), |x, y| x * y).expect("same shape");
                let gb = g.zip_map(val(*a), |x, y| x * y).expect("same shape");
                acc(grads, *a, ga);
                acc(grads, *b, gb);
            }
            Op::MulRows(x, s) => {
                let (xv, sv) = (val(*x), val(*s));
                let mut gx = g;
                let mut gs = Tensor::zeros(sv.rows, 1);
                for r in 0..gx.rows {
                    let w = sv.data[r];
                    gs.data[r] = gx.row(r).iter().zip(xv.row(r)).map(|(a, b)| a * b).sum();
                    for o in gx.row_mut(r) {
                        *o *= w;
                    }
                }
                acc(grads, *x, gx);
                acc(grads, *s, gs);
            }
            Op::MulConst(x, c) => {
                acc(grads, *x, g.zip_map(c, |a, b| a * b).expect("same shape"));
            }
            Op::Unary(x, f) => {
                let (xv, yv) = (val(*x), &self.nodes[idx].value);
                let mut gx = g;
                for ((o, &xx), &yy) in gx.data.iter_mut().zip(&xv.data).zip(&yv.data) {
                    *o *= f.deriv(xx, yy);
                }
                acc(grads, *x, gx);
            }
            Op::Reshape(x) => {
                let (r, c) = val(*x).shape();
                acc(grads, *x, g.reshaped(r, c).expect("reshape back"));
            }
            Op::SliceCols(x, start, end) => {
                let xv = val(*x);
                let mut gx = Tensor::zeros(xv.rows, xv.cols);
                for r in 0..xv.rows {
                    gx.row_mut(r)[*start..*end].copy_from_slice(g.row(r));
                }
                acc(grads, *x, gx);
            }
            Op::GatherRows(x, rows) => {
                let xv = val(*x);
                let mut gx = Tensor::zeros(xv.rows, xv.cols);
                for (r, &i) in rows.iter().enumerate() {
                    for (o, v) in gx.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                acc(grads, *x, gx);
            }
            Op::TileRows(x, times) => {
                let xv = val(*x);
                let len = xv.data.len();
                let mut gx = Tensor::zeros(xv.rows, xv.cols);
                for t in 0..*times {
                    for (o, v) in gx.data.iter_mut().zip(&g.data[t * len..(t + 1) * len]) {
                        *o += v;
                    }
                }
                acc(grads, *x, gx);
            }
            Op::Affine2 { a, wa, b, wb, bias, f, pre } => {
                let yv = &self.nodes[idx].value;
                let mut gs = g;
                if *f != Unary::Identity {
                    for ((o, &x), &y) in gs.data.iter_mut().zip(&pre.data).zip(&yv.data) {
                        *o *= f.deriv(x, y);
                    }
                }
                let mut gbias = Tensor::zeros(1, gs.cols);
                for r in 0..gs.rows {
                    for (o, v) in gbias.data.iter_mut().zip(gs.row(r)) {
                        *o += v;
                    }
                }
                for (x, w) in [(*a, *wa), (*b, *wb)] {
                    let (xv, wv) = (val(x), val(w));
                    let gx = gemm_new(false, true, &gs, wv);
                    let gw = gemm_new(true, false, xv, &gs);
                    acc(grads, x, gx);
                    acc(grads, w, gw);
                }
                acc(grads, *bias, gbias);
            }
            Op::SpMM(x, a) => {
                acc(grads, *x, a.transpose_matmul_dense(&g));
            }
            Op::Householder(v, d) => {
                let vv = val(*v);
                let mut gv = Tensor::zeros(vv.rows, vv.cols);
                for r in 0..vv.rows {
                    gv.row_mut(r)
                        .copy_from_slice(&householder_vjp(vv.row(r), *d, g.row(r)));
                }
                acc(grads, *v, gv);
            }
            Op::BatchAtB(a, b, d) => {
                let d = *d;
                let (av, bv) = (val(*a), val(*b));
                let mut ga = Tensor::zeros(av.rows, av.cols);
                let mut gb = Tensor::zeros(bv.rows, bv.cols);
                for r in 0..av.rows {
                    let (x, y, gr) = (av.row(r), bv.row(r), g.row(r));
                    // C = AᵀB  ⇒  dA = B·Gᵀ, dB = A·G
                    let ga_r = ga.row_mut(r);
                    for i in 0..d {
                        for j in 0..d {
                            let mut s = 0.0;
                            for k in 0..d {
                                s += y[i * d + k] * gr[j * d + k];
                            }
                            ga_r[i * d + j] = s;
                        }
                    }
                    let gb_r = gb.row_mut(r);
                    for i in 0..d {
                        for j in 0..d {
                            let mut s = 0.0;
                            for k in 0..d {
                                s += x[i * d + k] * gr[k * d + j];
                            }
                            gb_r[i * d + j] = s;
                        }
                    }
                }
                acc(grads, *a, ga);
                acc(grads, *b, gb);
            }
            Op::StalkLeft(w, x, d) => {
                let d = *d;
                let (wv, xv) = (val(*w), val(*x));
                let h = xv.cols / d;
                let mut gw = Tensor::zeros(d, d);
                let mut gx = Tensor::zeros(xv.rows, xv.cols);
                for r in 0..xv.rows {
                    let (src, gr) = (xv.row(r), g.row(r));
                    let gxr = gx.row_mut(r);
                    for a in 0..d {
                        for b in 0..d {
                            let wab = wv.data[a * d + b];
                            let mut s = 0.0;
                            for c in 0..h {
                                s += gr[a * h + c] * src[b * h + c];
                                gxr[b * h + c] += wab * gr[a * h + c];
                            }
                            gw.data[a * d + b] += s;
                        }
                    }
                }
                acc(grads, *w, gw);
                acc(grads, *x, gx);
            }
            Op::BlockDiffusion {
                x,
                diag,
                coef,
                blocks,
                d,
                graph,
            } => {
                let d = *d;
                let (xv, dv, cv, mv) = (val(*x), val(*diag), val(*coef), val(*blocks));
                let h = xv.cols / d;
                let mut gx = Tensor::zeros(xv.rows, xv.cols);
                let mut gdiag = Tensor::zeros(dv.rows, 1);
                let mut gcoef = Tensor::zeros(cv.rows, 1);
                let mut gm = Tensor::zeros(mv.rows, mv.cols);
                let mut mx = vec![0.0; d * h];
                for i in 0..graph.num_nodes() {
                    let gi = g.row(i);
                    if gi.iter().all(|&v| v == 0.0) {
                        continue;
                    }
                    let di = dv.data[i];
                    gdiag.data[i] = gi.iter().zip(xv.row(i)).map(|(a, b)| a * b).sum();
                    for (o, v) in gx.row_mut(i).iter_mut().zip(gi) {
                        *o += di * v;
                    }
                    for e in graph.out_arcs(i) {
                        let j = graph.arcs()[e].1;
                        let c = cv.data[e];
                        let m = mv.row(e);
                        let xj = xv.row(j);
                        // mx = M_e·X_j
                        mx.iter_mut().for_each(|v| *v = 0.0);
                        for a in 0..d {
                            for b in 0..d {
                                let w = m[a * d + b];
                                for k in 0..h {
                                    mx[a * h + k] += w * xj[b * h + k];
                                }
                            }
                        }
                        gcoef.data[e] = -gi.iter().zip(&mx).map(|(a, b)| a * b).sum::<f64>();
                        let gm_e = gm.row_mut(e);
                        for a in 0..d {
                            for b in 0..d {
                                let mut s = 0.0;
                                for k in 0..h {
                                    s += gi[a * h + k] * xj[b * h + k];
                                }
                                gm_e[a * d + b] = -c * s;
                            }
                        }
                        if c != 0.0 {
                            let gxj = gx.row_mut(j);
                            for a in 0..d {
                                for b in 0..d {
                                    let w = c * m[a * d + b];
                                    for k in 0..h {
                                        gxj[b * h + k] -= w * gi[a * h + k];
                                    }
                                }
                            }
                        }
                    }
                }
                acc(grads, *x, gx);
                acc(grads, *diag, gdiag);
                acc(grads, *coef, gcoef);
                acc(grads, *blocks, gm);
            }
            Op::LayerNorm(x, inv_std) => {
                let y = &self.nodes[idx].value;
                let c = y.cols as f64;
                let mut gx = Tensor::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let (gr, yr) = (g.row(r), y.row(r));
                    let mean_g = gr.iter().sum::<f64>() / c;
                    let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / c;
                    let s = inv_std[r];
                    for ((o, &gg), &yy) in gx.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *o = s * (gg - mean_g - yy * mean_gy);
                    }
                }
                acc(grads, *x, gx);
            }
            Op::CrossEntropy {
                logits,
                labels,
                rows,
                probs,
            } => {
                let lv = val(*logits);
                let mut gl = Tensor::zeros(lv.rows, lv.cols);
                let scale = g.data[0] / rows.len() as f64;
                for (k, (&r, &y)) in rows.iter().zip(labels.iter()).enumerate() {
                    let dst = gl.row_mut(r);
                    for (c, (o, p)) in dst.iter_mut().zip(probs.row(k)).enumerate() {
                        let target = if c == y { 1.0 } else { 0.0 };
                        *o += scale * (p - target);
                    }
                }
                acc(grads, *logits, gl);
            }
            Op::Sum(x) => {
                let (r, c) = val(*x).shape();
                acc(grads, *x, Tensor::filled(r, c, g.data[0]));
            }
            Op::Dot(x, w) => {
                acc(grads, *x, w.scale(g.data[0]));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(r: usize, c: usize, rng: &mut impl Rng) -> Tensor {
        Tensor::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central-difference check of `d f / d inputs[k]` for a tape-built scalar `f`.
    fn check_grads(inputs: Vec<Tensor>, build: impl Fn(&mut Tape, &[Var]) -> Var) {
        let eval = |vals: &[Tensor]| -> f64 {
            let mut t = Tape::new();
            let vars: Vec<Var> = vals.iter().map(|v| t.leaf(v.clone())).collect();
            let out = build(&mut t, &vars);
            t.value(out).data[0]
        };
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|v| tape.leaf(v.clone())).collect();
        let out = build(&mut tape, &vars);
        let grads = tape.backward(out).unwrap();
        let h = 1e-6;
        for (k, input) in inputs.iter().enumerate() {
            let analytic = grads.get_or_zeros(vars[k], input.rows, input.cols);
            for p in 0..input.data.len() {
                let mut plus = inputs.clone();
                let mut minus = inputs.clone();
                plus[k].data[p] += h;
                minus[k].data[p] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.data[p];
                assert!(
                    (fd - a).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "input {k} coord {p}: fd {fd} vs analytic {a}"
                );
            }
        }
    }

    #[test]
    fn affine2_matches_the_composed_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for f in [Unary::Tanh, Unary::Identity, Unary::Gelu, Unary::Relu] {
            let inputs = vec![
                rand_t(5, 3, &mut rng),
                rand_t(3, 4, &mut rng),
                rand_t(5, 2, &mut rng),
                rand_t(2, 4, &mut rng),
                rand_t(1, 4, &mut rng),
            ];
            let weights = rand_t(5, 4, &mut rng);
            let fused = |t: &mut Tape, v: &[Var]| {
                let y = t.affine2(v[0], v[1], v[2], v[3], v[4], f).unwrap();
                t.dot_const(y, weights.clone()).unwrap()
            };
            let composed = |t: &mut Tape, v: &[Var]| {
                let p = t.matmul(v[0], v[1]).unwrap();
                let q = t.matmul(v[2], v[3]).unwrap();
                let s = t.add(p, q).unwrap();
                let s = t.add_bias(s, v[4]).unwrap();
                let y = t.unary(s, f);
                t.dot_const(y, weights.clone()).unwrap()
            };
            let run = |build: &dyn Fn(&mut Tape, &[Var]) -> Var| {
                let mut t = Tape::new();
                let vars: Vec<Var> = inputs.iter().map(|x| t.leaf(x.clone())).collect();
                let out = build(&mut t, &vars);
                let g = t.backward(out).unwrap();
                let grads: Vec<Tensor> = vars.iter().map(|&v| g.get(v).unwrap().clone()).collect();
                (t.value(out).data[0], grads)
            };
            let (a, ga) = run(&fused);
            let (b, gb) = run(&composed);
            assert!((a - b).abs() < 1e-13, "{f:?}");
            for (x, y) in ga.iter().zip(&gb) {
                assert!(x.max_abs_diff(y) < 1e-13, "{f:?}");
            }
            if f != Unary::Relu {
                check_grads(inputs, fused);
            }
        }
        let mut t = Tape::new();
        let a = t.leaf(Tensor::zeros(3, 2));
        let w = t.leaf(Tensor::zeros(3, 4));
        let bias = t.leaf(Tensor::zeros(1, 4));
        assert!(t.affine2(a, w, a, w, bias, Unary::Tanh).is_err());
    }

    #[test]
    fn dense_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        check_grads(
            vec![rand_t(4, 5, &mut rng), rand_t(5, 3, &mut rng), rand_t(1, 3, &mut rng)],
            |t, v| {
                let m = t.matmul(v[0], v[1]).unwrap();
                let b = t.add_bias(m, v[2]).unwrap();
                let g = t.unary(b, Unary::Gelu);
                let s = t.slice_cols(g, 1, 3).unwrap();
                let sq = t.unary(s, Unary::Tanh);
                let r = t.reshape(sq, 2, 4).unwrap();
                let l = t.layer_norm(r);
                let sp = t.unary(l, Unary::Softplus);
                t.sum(sp)
            },
        );
    }

    #[test]
    fn elementwise_and_row_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let weights = rand_t(6, 2, &mut rng);
        check_grads(
            vec![
                rand_t(3, 2, &mut rng),
                rand_t(3, 2, &mut rng),
                rand_t(6, 1, &mut rng).map(|x| x.abs() + 0.1),
                rand_t(1, 2, &mut rng),
            ],
            move |t, v| {
                let m = t.mul(v[0], v[1]).unwrap();
                let a = t.add(m, v[0]).unwrap();
                let s = t.sub(a, v[1]).unwrap();
                let idx = Rc::new(vec![0, 2, 2, 1, 0, 1]);
                let gathered = t.gather_rows(s, idx).unwrap();
                let p = t.unary(v[2], Unary::PinvSqrt);
                let scaled = t.mul_rows(gathered, p).unwrap();
                let tiled = t.tile_rows(v[3], 6);
                let both = t.mul(scaled, tiled).unwrap();
                let sq = t.unary(both, Unary::Square);
                t.dot_const(sq, weights.clone()).unwrap()
            },
        );
    }

    #[test]
    fn structured_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = 2;
        let h = 3;
        let graph = Rc::new(DirectedGraph::cycle(4));
        let e = graph.num_arcs();
        let weights = rand_t(4, d * h, &mut rng);
        let g2 = graph.clone();
        check_grads(
            vec![
                rand_t(4, d * h, &mut rng),
                rand_t(4, 1, &mut rng),
                rand_t(e, 1, &mut rng),
                rand_t(e, 2 * d, &mut rng),
                rand_t(e, 2 * d, &mut rng),
                rand_t(d, d, &mut rng),
            ],
            move |t, v| {
                let qa = t.householder(v[3], d).unwrap();
                let qb = t.householder(v[4], d).unwrap();
                let m = t.batch_at_b(qa, qb, d).unwrap();
                let y = t.stalk_left(v[5], v[0], d).unwrap();
                let z = t
                    .block_diffusion(y, v[1], v[2], m, d, g2.clone())
                    .unwrap();
                let z = t.block_diffusion(z, v[1], v[2], m, d, g2.clone()).unwrap();
                t.dot_const(z, weights.clone()).unwrap()
            },
        );
    }

    #[test]
    fn cross_entropy_and_spmm() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Rc::new(CsrMatrix {
            rows: 3,
            cols: 4,
            row_ptr: vec![0, 2, 3, 5],
            col_idx: vec![0, 3, 1, 2, 3],
            values: vec![0.5, -1.0, 2.0, 0.25, 0.75],
        });
        check_grads(vec![rand_t(4, 5, &mut rng)], move |t, v| {
            let y = t.spmm(a.clone(), v[0]).unwrap();
            t.cross_entropy(y, Rc::new(vec![4, 0]), Rc::new(vec![2, 0])).unwrap()
        });
    }

    #[test]
    fn cross_entropy_uniform_is_ln_c() {
        let mut t = Tape::new();
        let l = t.leaf(Tensor::zeros(3, 5));
        let loss = t
            .cross_entropy(l, Rc::new(vec![1, 2, 3]), Rc::new(vec![0, 1, 2]))
            .unwrap();
        assert!((t.value(loss).data[0] - 5f64.ln()).abs() < 1e-15);
        assert!(matches!(
            t.cross_entropy(l, Rc::new(vec![]), Rc::new(vec![])),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn branch_free_exp_and_tanh_match_libm() {
        let mut worst_exp = 0.0f64;
        for i in 0..=200_000 {
            let z = -(i as f64) * 0.0035;
            worst_exp = worst_exp.max((exp_nonpositive(z) / z.exp() - 1.0).abs());
        }
        assert!(worst_exp <= 4.5e-16, "exp relative error {worst_exp:e}");
        assert!(exp_nonpositive(-1e4) < 1e-300);

        let mut worst_tanh = 0.0f64;
        for i in -250_000..=250_000 {
            let x = i as f64 * 1e-4 + 3e-6;
            worst_tanh = worst_tanh.max((tanh(x) - x.tanh()).abs() / (1.0 + x.abs()));
        }
        for x in [-30.0, -0.05, -1e-9, 0.0, 0.05, 1e3, -f64::MAX] {
            worst_tanh = worst_tanh.max((tanh(x) - x.tanh()).abs());
        }
        assert!(worst_tanh <= 2.5e-16, "tanh error {worst_tanh:e}");
        assert_eq!(tanh(0.0), 0.0);

        let xs: Vec<f64> = (-4001..4000).map(|i| i as f64 * 0.0037).chain([-1e3, 1e-300, 700.0]).collect();
        let bits = |v: Vec<f64>| v.into_iter().map(f64::to_bits).collect::<Vec<_>>();
        assert_eq!(bits(tanh_slice(&xs)), bits(tanh_slice_scalar(&xs)));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let l = t.leaf(Tensor::zeros(2, 2));
        assert!(t.backward(l).is_err());
    }

    #[test]
    fn unreached_inputs_have_no_gradient() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::scalar(2.0));
        let b = t.leaf(Tensor::scalar(3.0));
        let s = t.unary(a, Unary::Square);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap().data[0], 4.0);
        assert!(g.get(b).is_none());
    }
}
