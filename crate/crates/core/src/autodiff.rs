//! Tape-based reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation in creation order, which is already a
//! topological order, so [`Tape::backward`] is a single reverse sweep.
//! Batched pose tensors are stored as `(B·N) × F` row blocks; the `block_*`
//! and [`Tape::propagate`] operations act on each `N`-row block separately.

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Dense value carried by the tape.
pub type Tensor = Matrix<f64>;

/// `c = beta·c + op(a)·op(b)` on row-major slices, `op(a)` being `m × k`
/// and `op(b)` being `k × n`; `ta`/`tb` read the stored operand transposed.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the assert above keeps every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulTiled(Var, Var),
    Propagate(Var, Var),
    BlockMatmulNt {
        a: Var,
        b: Var,
        block: usize,
    },
    BlockMatmul {
        p: Var,
        v: Var,
        block: usize,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    Abs(Var),
    Square(Var),
    Transpose(Var),
    Reshape(Var),
    Gelu(Var),
    Relu(Var),
    LayerNorm {
        x: Var,
        gain: Option<Var>,
        bias: Option<Var>,
        normalized: Tensor,
        inv_std: Vec<f64>,
    },
    SoftmaxRows(Var),
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Recording of one forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, lhs: &Tensor, rhs: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: lhs.shape(),
        rhs: rhs.shape(),
    }
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

pub fn gelu_scalar(x: f64) -> f64 {
    x * normal_cdf(x)
}

pub fn gelu_derivative(x: f64) -> f64 {
    normal_cdf(x) + x * normal_pdf(x)
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

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient; `None` if no gradient reached the node.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Gradient, or zeros of the right shape.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v).cloned().unwrap_or_else(|| {
            let (r, c) = self.shape(v);
            Tensor::zeros(r, c)
        })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.rows() {
            return Err(shape_err("matmul", av, bv));
        }
        let mut value = Tensor::zeros(av.rows(), bv.cols());
        gemm(
            av.rows(),
            av.cols(),
            bv.cols(),
            av.as_slice(),
            false,
            bv.as_slice(),
            false,
            0.0,
            value.as_mut_slice(),
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, rg, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self
            .value(a)
            .add(self.value(b))
            .map_err(|_| shape_err("add", self.value(a), self.value(b)))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self
            .value(a)
            .sub(self.value(b))
            .map_err(|_| shape_err("sub", self.value(a), self.value(b)))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, rg, Op::Sub(a, b)))
    }

    /// Elementwise product `a ⊙ b`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self
            .value(a)
            .hadamard(self.value(b))
            .map_err(|_| shape_err("elementwise_mul", self.value(a), self.value(b)))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, rg, Op::Mul(a, b)))
    }

    /// `x + 1·row`, broadcasting a `1×C` row over every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xv, rv) = (self.value(x), self.value(row));
        if rv.rows() != 1 || rv.cols() != xv.cols() {
            return Err(shape_err("add_row", xv, rv));
        }
        let mut value = xv.clone();
        for i in 0..value.rows() {
            for (o, &b) in value.row_mut(i).iter_mut().zip(rv.row(0)) {
                *o += b;
            }
        }
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(value, rg, Op::AddRow(x, row)))
    }

    /// `x ⊙ tile(m)`, where `x` has `B·N` rows and `m` has `N`.
    pub fn mul_tiled(&mut self, x: Var, m: Var) -> Result<Var> {
        let (xv, mv) = (self.value(x), self.value(m));
        if mv.rows() == 0 || xv.cols() != mv.cols() || xv.rows() % mv.rows() != 0 {
            return Err(shape_err("mul_tiled", xv, mv));
        }
        let n = mv.rows();
        let mut value = xv.clone();
        for i in 0..value.rows() {
            for (o, &s) in value.row_mut(i).iter_mut().zip(mv.row(i % n)) {
                *o *= s;
            }
        }
        let rg = self.rg(x) || self.rg(m);
        Ok(self.push(value, rg, Op::MulTiled(x, m)))
    }

    /// Blockwise `adj · H_b` for every `N`-row block `H_b` of `h`.
    pub fn propagate(&mut self, adj: Var, h: Var) -> Result<Var> {
        let (av, hv) = (self.value(adj), self.value(h));
        let n = av.rows();
        if !av.is_square() || n == 0 || hv.rows() % n != 0 {
            return Err(shape_err("propagate", av, hv));
        }
        let f = hv.cols();
        let mut value = Tensor::zeros(hv.rows(), f);
        for b in 0..hv.rows() / n {
            let range = b * n * f..(b + 1) * n * f;
            gemm(
                n,
                n,
                f,
                av.as_slice(),
                false,
                &hv.as_slice()[range.clone()],
                false,
                0.0,
                &mut value.as_mut_slice()[range],
            );
        }
        let rg = self.rg(adj) || self.rg(h);
        Ok(self.push(value, rg, Op::Propagate(adj, h)))
    }

    /// Blockwise `A_b B_bᵀ` over `block`-row blocks; output `(B·n) × n`.
    pub fn block_matmul_nt(&mut self, a: Var, b: Var, block: usize) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if block == 0 || av.shape() != bv.shape() || av.rows() % block != 0 {
            return Err(shape_err("block_matmul_nt", av, bv));
        }
        let f = av.cols();
        let mut value = Tensor::zeros(av.rows(), block);
        for blk in 0..av.rows() / block {
            let r = blk * block * f..(blk + 1) * block * f;
            let out = &mut value.as_mut_slice()[blk * block * block..(blk + 1) * block * block];
            gemm(
                block,
                f,
                block,
                &av.as_slice()[r.clone()],
                false,
                &bv.as_slice()[r],
                true,
                0.0,
                out,
            );
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, rg, Op::BlockMatmulNt { a, b, block }))
    }

    /// Blockwise `P_b V_b`, with `P: (B·n) × n` and `V: (B·n) × F`.
    pub fn block_matmul(&mut self, p: Var, v: Var, block: usize) -> Result<Var> {
        let (pv, vv) = (self.value(p), self.value(v));
        if block == 0 || pv.cols() != block || pv.rows() != vv.rows() || pv.rows() % block != 0 {
            return Err(shape_err("block_matmul", pv, vv));
        }
        let f = vv.cols();
        let mut value = Tensor::zeros(vv.rows(), f);
        for blk in 0..pv.rows() / block {
            let pr = blk * block * block..(blk + 1) * block * block;
            let vr = blk * block * f..(blk + 1) * block * f;
            gemm(
                block,
                block,
                f,
                &pv.as_slice()[pr],
                false,
                &vv.as_slice()[vr.clone()],
                false,
                0.0,
                &mut value.as_mut_slice()[vr],
            );
        }
        let rg = self.rg(p) || self.rg(v);
        Ok(self.push(value, rg, Op::BlockMatmul { p, v, block }))
    }

    /// Column concatenation `x₁ ∥ x₂ ∥ …`.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat_cols of zero tensors".into()))?;
        let rows = self.value(first).rows();
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(shape_err("concat_cols", self.value(first), self.value(p)));
            }
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Tensor::zeros(rows, cols);
        for i in 0..rows {
            let out = value.row_mut(i);
            let mut offset = 0;
            for &p in parts {
                let src = self.nodes[p.0].value.row(i);
                out[offset..offset + src.len()].copy_from_slice(src);
                offset += src.len();
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, rg, Op::ConcatCols(parts.to_vec())))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        if start > end || end > xv.cols() {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: xv.shape(),
                rhs: (start, end),
            });
        }
        let value = Tensor::from_fn(xv.rows(), end - start, |i, j| xv[(i, start + j)]);
        let rg = self.rg(x);
        Ok(self.push(value, rg, Op::SliceCols { x, start }))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).scale(s);
        let rg = self.rg(x);
        self.push(value, rg, Op::Scale(x, s))
    }

    /// Sum of all entries, as a `1×1` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).as_slice().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::filled(1, 1, total), rg, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let mean = v.as_slice().iter().sum::<f64>() / (v.rows() * v.cols()).max(1) as f64;
        let rg = self.rg(x);
        self.push(Tensor::filled(1, 1, mean), rg, Op::Mean(x))
    }

    /// `|x|`, with subgradient 0 at 0.
    pub fn abs(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::abs);
        let rg = self.rg(x);
        self.push(value, rg, Op::Abs(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * v);
        let rg = self.rg(x);
        self.push(value, rg, Op::Square(x))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = self.value(x).transpose();
        let rg = self.rg(x);
        self.push(value, rg, Op::Transpose(x))
    }

    /// Row-major reinterpretation with a new shape.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rows() * xv.cols() != rows * cols {
            return Err(Error::Shape {
                op: "reshape",
                lhs: xv.shape(),
                rhs: (rows, cols),
            });
        }
        let value = Tensor::from_vec(rows, cols, xv.as_slice().to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(value, rg, Op::Reshape(x)))
    }

    /// Exact GELU `x·Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(gelu_scalar);
        let rg = self.rg(x);
        self.push(value, rg, Op::Gelu(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(value, rg, Op::Relu(x))
    }

    /// Per-row standardization with population variance, then an optional
    /// `1×C` affine gain and bias.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gain: Option<Var>,
        bias: Option<Var>,
        eps: f64,
    ) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        for p in [gain, bias].into_iter().flatten() {
            let pv = self.value(p);
            if pv.shape() != (1, cols) {
                return Err(shape_err("layer_norm", xv, pv));
            }
        }
        let mut normalized = Tensor::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for i in 0..rows {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (o, &v) in normalized.row_mut(i).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let mut value = normalized.clone();
        if let Some(g) = gain {
            let gv = self.value(g).row(0).to_vec();
            for i in 0..rows {
                value
                    .row_mut(i)
                    .iter_mut()
                    .zip(&gv)
                    .for_each(|(o, s)| *o *= s);
            }
        }
        if let Some(b) = bias {
            let bv = self.value(b).row(0).to_vec();
            for i in 0..rows {
                value
                    .row_mut(i)
                    .iter_mut()
                    .zip(&bv)
                    .for_each(|(o, s)| *o += s);
            }
        }
        let rg = self.rg(x) || gain.is_some_and(|g| self.rg(g)) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            value,
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
        ))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut value = xv.clone();
        for i in 0..value.rows() {
            let row = value.row_mut(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        let rg = self.rg(x);
        self.push(value, rg, Op::SoftmaxRows(x))
    }

    /// Inverted dropout. Outside training, or at `rate == 0`, returns `x`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate must lie in [0, 1), got {rate}"
            )));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let xv = self.value(x);
        let mask: Vec<f64> = (0..xv.as_slice().len())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        let data = xv
            .as_slice()
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m)
            .collect();
        let value = Tensor::from_vec(xv.rows(), xv.cols(), data)?;
        let rg = self.rg(x);
        Ok(self.push(value, rg, Op::Dropout { x, mask }))
    }

    fn accumulate(&mut self, v: Var, g: Tensor) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(acc) => {
                for (a, b) in acc.as_mut_slice().iter_mut().zip(g.as_slice()) {
                    *a += b;
                }
            }
            None => node.grad = Some(g),
        }
    }

    /// Clears all accumulated gradients.
    pub fn zero_grad(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.grad = None);
    }

    /// Back-propagates from `output`, seeding its gradient with ones.
    pub fn backward(&mut self, output: Var) {
        let (r, c) = self.shape(output);
        self.backward_with(output, Tensor::filled(r, c, 1.0));
    }

    /// Back-propagates an explicit upstream gradient. Gradients accumulate
    /// into any that are already present.
    pub fn backward_with(&mut self, output: Var, seed: Tensor) {
        assert_eq!(seed.shape(), self.shape(output), "seed shape");
        self.accumulate(output, seed);
        for idx in (0..=output.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[idx].grad.take() else {
                continue;
            };
            let contributions = self.vjp(idx, &g);
            self.nodes[idx].grad = Some(g);
            for (v, cg) in contributions {
                self.accumulate(v, cg);
            }
        }
    }

    /// Vector-Jacobian products of node `idx` for upstream gradient `g`.
    fn vjp(&self, idx: usize, g: &Tensor) -> Vec<(Var, Tensor)> {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.rg(*a) {
                    let mut ga = Tensor::zeros(m, k);
                    gemm(
                        m,
                        n,
                        k,
                        g.as_slice(),
                        false,
                        bv.as_slice(),
                        true,
                        0.0,
                        ga.as_mut_slice(),
                    );
                    out.push((*a, ga));
                }
                if self.rg(*b) {
                    let mut gb = Tensor::zeros(k, n);
                    gemm(
                        k,
                        m,
                        n,
                        av.as_slice(),
                        true,
                        g.as_slice(),
                        false,
                        0.0,
                        gb.as_mut_slice(),
                    );
                    out.push((*b, gb));
                }
            }
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.scale(-1.0)));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    out.push((*a, g.hadamard(val(*b)).expect("shape")));
                }
                if self.rg(*b) {
                    out.push((*b, g.hadamard(val(*a)).expect("shape")));
                }
            }
            Op::AddRow(x, row) => {
                out.push((*x, g.clone()));
                if self.rg(*row) {
                    let mut acc = Tensor::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        acc.row_mut(0)
                            .iter_mut()
                            .zip(g.row(i))
                            .for_each(|(a, b)| *a += b);
                    }
                    out.push((*row, acc));
                }
            }
            Op::MulTiled(x, m) => {
                let mv = val(*m);
                let n = mv.rows();
                if self.rg(*x) {
                    let mut gx = g.clone();
                    for i in 0..gx.rows() {
                        gx.row_mut(i)
                            .iter_mut()
                            .zip(mv.row(i % n))
                            .for_each(|(a, s)| *a *= s);
                    }
                    out.push((*x, gx));
                }
                if self.rg(*m) {
                    let xv = val(*x);
                    let mut gm = Tensor::zeros(n, mv.cols());
                    for i in 0..g.rows() {
                        let dst = gm.row_mut(i % n);
                        for ((d, a), b) in dst.iter_mut().zip(g.row(i)).zip(xv.row(i)) {
                            *d += a * b;
                        }
                    }
                    out.push((*m, gm));
                }
            }
            Op::Propagate(adj, h) => {
                let av = val(*adj);
                let hv = val(*h);
                let n = av.rows();
                let f = hv.cols();
                let blocks = hv.rows() / n;
                if self.rg(*h) {
                    let mut gh = Tensor::zeros(hv.rows(), f);
                    for b in 0..blocks {
                        let r = b * n * f..(b + 1) * n * f;
                        gemm(
                            n,
                            n,
                            f,
                            av.as_slice(),
                            true,
                            &g.as_slice()[r.clone()],
                            false,
                            0.0,
                            &mut gh.as_mut_slice()[r],
                        );
                    }
                    out.push((*h, gh));
                }
                if self.rg(*adj) {
                    let mut ga = Tensor::zeros(n, n);
                    for b in 0..blocks {
                        let r = b * n * f..(b + 1) * n * f;
                        gemm(
                            n,
                            f,
                            n,
                            &g.as_slice()[r.clone()],
                            false,
                            &hv.as_slice()[r],
                            true,
                            1.0,
                            ga.as_mut_slice(),
                        );
                    }
                    out.push((*adj, ga));
                }
            }
            Op::BlockMatmulNt { a, b, block } => {
                let (av, bv) = (val(*a), val(*b));
                let n = *block;
                let f = av.cols();
                let blocks = av.rows() / n;
                if self.rg(*a) {
                    // dA_b = G_b B_b
                    let mut ga = Tensor::zeros(av.rows(), f);
                    for blk in 0..blocks {
                        let gr = blk * n * n..(blk + 1) * n * n;
                        let r = blk * n * f..(blk + 1) * n * f;
                        gemm(
                            n,
                            n,
                            f,
                            &g.as_slice()[gr],
                            false,
                            &bv.as_slice()[r.clone()],
                            false,
                            0.0,
                            &mut ga.as_mut_slice()[r],
                        );
                    }
                    out.push((*a, ga));
                }
                if self.rg(*b) {
                    // dB_b = G_bᵀ A_b
                    let mut gb = Tensor::zeros(bv.rows(), f);
                    for blk in 0..blocks {
                        let gr = blk * n * n..(blk + 1) * n * n;
                        let r = blk * n * f..(blk + 1) * n * f;
                        gemm(
                            n,
                            n,
                            f,
                            &g.as_slice()[gr],
                            true,
                            &av.as_slice()[r.clone()],
                            false,
                            0.0,
                            &mut gb.as_mut_slice()[r],
                        );
                    }
                    out.push((*b, gb));
                }
            }
            Op::BlockMatmul { p, v, block } => {
                let (pv, vv) = (val(*p), val(*v));
                let n = *block;
                let f = vv.cols();
                let blocks = pv.rows() / n;
                if self.rg(*p) {
                    // dP_b = G_b V_bᵀ
                    let mut gp = Tensor::zeros(pv.rows(), n);
                    for blk in 0..blocks {
                        let r = blk * n * f..(blk + 1) * n * f;
                        let pr = blk * n * n..(blk + 1) * n * n;
                        gemm(
                            n,
                            f,
                            n,
                            &g.as_slice()[r.clone()],
                            false,
                            &vv.as_slice()[r],
                            true,
                            0.0,
                            &mut gp.as_mut_slice()[pr],
                        );
                    }
                    out.push((*p, gp));
                }
                if self.rg(*v) {
                    // dV_b = P_bᵀ G_b
                    let mut gv = Tensor::zeros(vv.rows(), f);
                    for blk in 0..blocks {
                        let pr = blk * n * n..(blk + 1) * n * n;
                        let r = blk * n * f..(blk + 1) * n * f;
                        gemm(
                            n,
                            n,
                            f,
                            &pv.as_slice()[pr],
                            true,
                            &g.as_slice()[r.clone()],
                            false,
                            0.0,
                            &mut gv.as_mut_slice()[r],
                        );
                    }
                    out.push((*v, gv));
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if self.rg(p) {
                        out.push((p, Tensor::from_fn(g.rows(), w, |i, j| g[(i, offset + j)])));
                    }
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let xv = val(*x);
                let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                for i in 0..g.rows() {
                    gx.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                }
                out.push((*x, gx));
            }
            Op::Scale(x, s) => out.push((*x, g.scale(*s))),
            Op::Sum(x) => {
                let (r, c) = val(*x).shape();
                out.push((*x, Tensor::filled(r, c, g[(0, 0)])));
            }
            Op::Mean(x) => {
                let (r, c) = val(*x).shape();
                out.push((*x, Tensor::filled(r, c, g[(0, 0)] / (r * c).max(1) as f64)));
            }
            Op::Abs(x) => {
                let xv = val(*x);
                out.push((*x, g.zip_map(xv, |gi, xi| gi * sign(xi)).expect("shape")));
            }
            Op::Square(x) => {
                let xv = val(*x);
                out.push((*x, g.zip_map(xv, |gi, xi| 2.0 * gi * xi).expect("shape")));
            }
            Op::Transpose(x) => out.push((*x, g.transpose())),
            Op::Reshape(x) => {
                let (r, c) = val(*x).shape();
                out.push((
                    *x,
                    Tensor::from_vec(r, c, g.as_slice().to_vec()).expect("size"),
                ));
            }
            Op::Gelu(x) => {
                let xv = val(*x);
                out.push((
                    *x,
                    g.zip_map(xv, |gi, xi| gi * gelu_derivative(xi))
                        .expect("shape"),
                ));
            }
            Op::Relu(x) => {
                let xv = val(*x);
                out.push((
                    *x,
                    g.zip_map(xv, |gi, xi| if xi > 0.0 { gi } else { 0.0 })
                        .expect("shape"),
                ));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let (rows, cols) = normalized.shape();
                let gain_row: Option<Vec<f64>> = gain.map(|gv| val(gv).row(0).to_vec());
                if self.rg(*x) {
                    let mut gx = Tensor::zeros(rows, cols);
                    let mut dxhat = vec![0.0; cols];
                    for i in 0..rows {
                        for j in 0..cols {
                            dxhat[j] = g[(i, j)] * gain_row.as_ref().map_or(1.0, |gr| gr[j]);
                        }
                        let xh = normalized.row(i);
                        let mean_d = dxhat.iter().sum::<f64>() / cols as f64;
                        let mean_dx =
                            dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                        for (j, o) in gx.row_mut(i).iter_mut().enumerate() {
                            *o = inv_std[i] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                    out.push((*x, gx));
                }
                if let Some(gv) = gain.filter(|&gv| self.rg(gv)) {
                    let mut acc = Tensor::zeros(1, cols);
                    for i in 0..rows {
                        for j in 0..cols {
                            acc[(0, j)] += g[(i, j)] * normalized[(i, j)];
                        }
                    }
                    out.push((gv, acc));
                }
                if let Some(bv) = bias.filter(|&bv| self.rg(bv)) {
                    let mut acc = Tensor::zeros(1, cols);
                    for i in 0..rows {
                        acc.row_mut(0)
                            .iter_mut()
                            .zip(g.row(i))
                            .for_each(|(a, b)| *a += b);
                    }
                    out.push((bv, acc));
                }
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let mut gx = Tensor::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let yi = y.row(i);
                    let gi = g.row(i);
                    let dot: f64 = yi.iter().zip(gi).map(|(a, b)| a * b).sum();
                    for (j, o) in gx.row_mut(i).iter_mut().enumerate() {
                        *o = yi[j] * (gi[j] - dot);
                    }
                }
                out.push((*x, gx));
            }
            Op::Dropout { x, mask } => {
                let data = g.as_slice().iter().zip(mask).map(|(a, m)| a * m).collect();
                out.push((
                    *x,
                    Tensor::from_vec(g.rows(), g.cols(), data).expect("size"),
                ));
            }
        }
        out
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Result of comparing backward gradients with central differences.
#[derive(Clone, Debug, serde::Serialize)]
pub struct GradCheck {
    /// Per input: `max|analytic − numeric| / max(max|numeric|, max|analytic|, 1e-12)`.
    pub per_input: Vec<f64>,
    pub max_relative_error: f64,
}

/// Checks the gradients of `build` at `inputs` against central differences
/// with step `h`. Non-scalar outputs are contracted with a fixed
/// pseudo-random weighting so every output entry contributes.
///
/// `build` must be deterministic (reseed any RNG inside it).
pub fn gradcheck<F>(inputs: &[Tensor], h: f64, build: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let weights = |shape: (usize, usize)| {
        Tensor::from_fn(shape.0, shape.1, |i, j| {
            // fixed, irregular, O(1) weights
            let k = (i * 7919 + j * 104_729 + 17) as f64;
            0.5 + (k * 0.618_033_988_75).fract()
        })
    };
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|v| tape.param(v.clone())).collect();
        let out = build(&mut tape, &vars)?;
        let w = weights(tape.shape(out));
        Ok(tape
            .value(out)
            .as_slice()
            .iter()
            .zip(w.as_slice())
            .map(|(a, b)| a * b)
            .sum())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.param(v.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let seed = weights(tape.shape(out));
    tape.backward_with(out, seed);

    let mut per_input = Vec::with_capacity(inputs.len());
    let mut perturbed: Vec<Tensor> = inputs.to_vec();
    for (k, &var) in vars.iter().enumerate() {
        let analytic = tape.grad_or_zeros(var);
        let mut numeric = Tensor::zeros(analytic.rows(), analytic.cols());
        for idx in 0..inputs[k].as_slice().len() {
            let orig = inputs[k].as_slice()[idx];
            perturbed[k].as_mut_slice()[idx] = orig + h;
            let up = eval(&perturbed)?;
            perturbed[k].as_mut_slice()[idx] = orig - h;
            let down = eval(&perturbed)?;
            perturbed[k].as_mut_slice()[idx] = orig;
            numeric.as_mut_slice()[idx] = (up - down) / (2.0 * h);
        }
        let scale = numeric.max_abs().max(analytic.max_abs()).max(1e-12);
        per_input.push(analytic.max_abs_diff(&numeric)? / scale);
    }
    let max_relative_error = per_input.iter().copied().fold(0.0, f64::max);
    Ok(GradCheck {
        per_input,
        max_relative_error,
    })
}

/// Draws an `N(0, 1)` tensor.
pub fn randn<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    use rand_distr::{Distribution, StandardNormal};
    Tensor::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// Finite-difference check of every primitive on `N(0, 1)` inputs drawn
/// from `seed`.
pub fn primitive_gradchecks(seed: u64) -> Result<Vec<(&'static str, GradCheck)>> {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const H: f64 = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = |rows, cols| randn(rows, cols, &mut rng);
    let (a34, b42, c34, d34) = (r(3, 4), r(4, 2), r(3, 4), r(3, 4));
    let (row4, m3x4, adj3, h63) = (r(1, 4), r(3, 4), r(3, 3), r(6, 3));
    let (q63, k63, p63, v62) = (r(6, 3), r(6, 3), r(6, 3), r(6, 2));
    let (x48, g18, b18) = (r(4, 8), r(1, 8), r(1, 8));
    let dropout_seed = seed ^ 0x5eed;

    let mut out = Vec::new();
    out.push((
        "matmul",
        gradcheck(&[a34.clone(), b42], H, |t, v| t.matmul(v[0], v[1]))?,
    ));
    out.push((
        "add",
        gradcheck(&[a34.clone(), c34.clone()], H, |t, v| t.add(v[0], v[1]))?,
    ));
    out.push((
        "sub",
        gradcheck(&[a34.clone(), c34.clone()], H, |t, v| t.sub(v[0], v[1]))?,
    ));
    out.push((
        "elementwise_mul",
        gradcheck(&[a34.clone(), c34.clone()], H, |t, v| t.mul(v[0], v[1]))?,
    ));
    out.push((
        "add_row",
        gradcheck(&[a34.clone(), row4], H, |t, v| t.add_row(v[0], v[1]))?,
    ));
    out.push((
        "mul_tiled",
        gradcheck(&[r_tile(&a34, &c34), m3x4], H, |t, v| {
            t.mul_tiled(v[0], v[1])
        })?,
    ));
    out.push((
        "propagate",
        gradcheck(&[adj3, h63], H, |t, v| t.propagate(v[0], v[1]))?,
    ));
    out.push((
        "block_matmul_nt",
        gradcheck(&[q63, k63], H, |t, v| t.block_matmul_nt(v[0], v[1], 3))?,
    ));
    out.push((
        "block_matmul",
        gradcheck(&[p63, v62], H, |t, v| t.block_matmul(v[0], v[1], 3))?,
    ));
    out.push((
        "concat_cols",
        gradcheck(&[a34.clone(), c34.clone(), d34.clone()], H, |t, v| {
            t.concat_cols(v)
        })?,
    ));
    out.push((
        "slice_cols",
        gradcheck(std::slice::from_ref(&a34), H, |t, v| {
            t.slice_cols(v[0], 1, 3)
        })?,
    ));
    out.push((
        "scale",
        gradcheck(
            std::slice::from_ref(&a34),
            H,
            |t, v| Ok(t.scale(v[0], -1.7)),
        )?,
    ));
    out.push((
        "sum",
        gradcheck(std::slice::from_ref(&a34), H, |t, v| Ok(t.sum(v[0])))?,
    ));
    out.push((
        "mean",
        gradcheck(std::slice::from_ref(&a34), H, |t, v| Ok(t.mean(v[0])))?,
    ));
    out.push((
        "abs",
        gradcheck(std::slice::from_ref(&a34), H, |t, v| Ok(t.abs(v[0])))?,
    ));
    out.push((
        "square",
        gradcheck(std::slice::from_ref(&a34), H, |t, v| Ok(t.square(v[0])))?,
    ));
    out.push((
        "transpose",
        gradcheck(std::slice::from_ref(&a34), H, |t, v| Ok(t.transpose(v[0])))?,
    ));
    out.push((
        "reshape",
        gradcheck(std::slice::from_ref(&a34), H, |t, v| t.reshape(v[0], 2, 6))?,
    ));
    out.push((
        "gelu",
        gradcheck(std::slice::from_ref(&a34), H, |t, v| Ok(t.gelu(v[0])))?,
    ));
    out.push((
        "relu",
        gradcheck(std::slice::from_ref(&a34), H, |t, v| Ok(t.relu(v[0])))?,
    ));
    out.push((
        "layer_norm",
        gradcheck(&[x48, g18, b18], H, |t, v| {
            t.layer_norm(v[0], Some(v[1]), Some(v[2]), 1e-5)
        })?,
    ));
    out.push((
        "softmax_rows",
        gradcheck(std::slice::from_ref(&a34), H, |t, v| {
            Ok(t.softmax_rows(v[0]))
        })?,
    ));
    out.push((
        "dropout",
        gradcheck(&[d34], H, |t, v| {
            let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
            t.dropout(v[0], 0.2, true, &mut rng)
        })?,
    ));
    Ok(out)
}

fn r_tile(a: &Tensor, b: &Tensor) -> Tensor {
    let mut data = a.as_slice().to_vec();
    data.extend_from_slice(b.as_slice());
    Tensor::from_vec(a.rows() + b.rows(), a.cols(), data).expect("same width")
}
