//! RS-Net building blocks: higher-order regular-splitting graph convolution,
//! the weight-unsharing baseline, the non-local layer and the residual block.
//!
//! All forward passes take batched `(B·N) × F` inputs; a single pose is the
//! `B = 1` case.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{xavier_uniform, Bound, ParamId, ParamSet};

/// Pointwise nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Gelu,
    Relu,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Gelu => tape.gelu(x),
            Activation::Relu => tape.relu(x),
        }
    }

    pub fn eval(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => crate::autodiff::gelu_scalar(x),
            Activation::Relu => x.max(0.0),
        }
    }
}

/// Normalization/activation pair inside a residual block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockDesign {
    /// Affine layer norm after the first conv, GELU after the second.
    #[default]
    LayerNormGelu,
    /// Parameter-free row standardization, ReLU.
    StandardizeRelu,
}

impl BlockDesign {
    pub fn activation(self) -> Activation {
        match self {
            BlockDesign::LayerNormGelu => Activation::Gelu,
            BlockDesign::StandardizeRelu => Activation::Relu,
        }
    }
}

/// Where the nonlinearity sits relative to the two convs of a block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockLayout {
    /// conv → norm → conv → activation.
    #[default]
    Interleaved,
    /// Every conv output is passed through the activation as well:
    /// conv → activation → norm → conv → activation.
    Activated,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Propagation operator for one hop.
#[derive(Clone, Copy, Debug)]
pub enum HopOperator {
    Full(Var),
    /// Diagonal and off-diagonal parts of `Ǎᵏ`.
    Split {
        diag: Var,
        off: Var,
    },
}

/// Hop operators `Ǎ, Ǎ², …, Ǎᴷ` placed on a tape.
#[derive(Clone, Debug)]
pub struct Propagation {
    pub num_nodes: usize,
    pub hops: Vec<HopOperator>,
}

impl Propagation {
    /// `Ǎ = Â + (Q + Qᵀ)/2` (or `Â` when `q` is `None`) and its first `hops`
    /// powers, optionally split into diagonal and off-diagonal parts.
    pub fn build(
        tape: &mut Tape,
        a_hat: &Tensor,
        q: Option<Var>,
        hops: usize,
        decouple: bool,
    ) -> Result<Self> {
        if hops == 0 {
            return Err(Error::InvalidArgument(
                "hop count K must be at least 1".into(),
            ));
        }
        let n = a_hat.rows();
        if !a_hat.is_square() || n == 0 {
            return Err(Error::Shape {
                op: "propagation",
                lhs: a_hat.shape(),
                rhs: a_hat.shape(),
            });
        }
        let mut a = tape.constant(a_hat.clone());
        if let Some(q) = q {
            if tape.shape(q) != (n, n) {
                return Err(Error::Shape {
                    op: "adjacency_modulation",
                    lhs: (n, n),
                    rhs: tape.shape(q),
                });
            }
            let qt = tape.transpose(q);
            let sym = tape.add(q, qt)?;
            let sym = tape.scale(sym, 0.5);
            a = tape.add(a, sym)?;
        }
        let mut powers = vec![a];
        for k in 1..hops {
            let next = tape.matmul(powers[k - 1], a)?;
            powers.push(next);
        }
        Self::from_power_vars(tape, n, powers, decouple)
    }

    /// Uses precomputed powers as constants.
    pub fn from_powers(tape: &mut Tape, powers: &[Tensor], decouple: bool) -> Result<Self> {
        let n = powers
            .first()
            .ok_or_else(|| Error::InvalidArgument("hop count K must be at least 1".into()))?
            .rows();
        let vars = powers.iter().map(|p| tape.constant(p.clone())).collect();
        Self::from_power_vars(tape, n, vars, decouple)
    }

    fn from_power_vars(
        tape: &mut Tape,
        n: usize,
        powers: Vec<Var>,
        decouple: bool,
    ) -> Result<Self> {
        let hops = if decouple {
            let eye = tape.constant(Tensor::identity(n));
            let off_mask =
                tape.constant(Tensor::from_fn(n, n, |i, j| if i == j { 0.0 } else { 1.0 }));
            powers
                .into_iter()
                .map(|p| {
                    Ok(HopOperator::Split {
                        diag: tape.mul(p, eye)?,
                        off: tape.mul(p, off_mask)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            powers.into_iter().map(HopOperator::Full).collect()
        };
        Ok(Self { num_nodes: n, hops })
    }
}

fn check_input(tape: &Tape, op: &'static str, x: Var, n: usize, width: usize) -> Result<usize> {
    let (rows, cols) = tape.shape(x);
    if cols != width || rows % n != 0 || rows == 0 {
        return Err(Error::Shape {
            op,
            lhs: (rows, cols),
            rhs: (n, width),
        });
    }
    Ok(rows / n)
}

/// Higher-order graph convolution with weight modulation, adjacency
/// modulation (through [`Propagation`]) and initial skip connection.
///
/// Hop `k` computes `Ǎᵏ((H Wₖ) ⊙ Mₖ) + X₀ W̃ₖ`; the `K` hop outputs are
/// concatenated. With decoupled self-connections the diagonal of `Ǎᵏ`
/// acts on `(H Wₖˢ) ⊙ Mₖ` instead.
#[derive(Clone, Debug, Serialize)]
pub struct RsNetConv {
    pub num_nodes: usize,
    pub in_width: usize,
    pub skip_width: Option<usize>,
    pub hop_width: usize,
    pub hops: usize,
    pub decouple: bool,
    #[serde(skip)]
    pub w: Vec<ParamId>,
    #[serde(skip)]
    pub w_self: Vec<ParamId>,
    #[serde(skip)]
    pub m: Vec<ParamId>,
    #[serde(skip)]
    pub w_skip: Vec<ParamId>,
}

impl RsNetConv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        prefix: &str,
        num_nodes: usize,
        in_width: usize,
        skip_width: Option<usize>,
        hop_width: usize,
        hops: usize,
        decouple: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if hops == 0 || hop_width == 0 || in_width == 0 || num_nodes == 0 {
            return Err(Error::InvalidArgument(format!(
                "{prefix}: zero size (N={num_nodes}, in={in_width}, hop width={hop_width}, K={hops})"
            )));
        }
        let mut layer = Self {
            num_nodes,
            in_width,
            skip_width,
            hop_width,
            hops,
            decouple,
            w: Vec::new(),
            w_self: Vec::new(),
            m: Vec::new(),
            w_skip: Vec::new(),
        };
        for k in 1..=hops {
            layer.w.push(params.add(
                format!("{prefix}.w{k}"),
                xavier_uniform(in_width, hop_width, rng),
            ));
            if decouple {
                layer.w_self.push(params.add(
                    format!("{prefix}.w{k}_self"),
                    xavier_uniform(in_width, hop_width, rng),
                ));
            }
            layer.m.push(params.add(
                format!("{prefix}.m{k}"),
                Tensor::filled(num_nodes, hop_width, 1.0),
            ));
            if let Some(sw) = skip_width {
                layer.w_skip.push(params.add(
                    format!("{prefix}.w{k}_skip"),
                    xavier_uniform(sw, hop_width, rng),
                ));
            }
        }
        Ok(layer)
    }

    pub fn out_width(&self) -> usize {
        self.hops * self.hop_width
    }

    /// Every parameter of the layer.
    pub fn param_ids(&self) -> Vec<ParamId> {
        self.w
            .iter()
            .chain(&self.w_self)
            .chain(&self.m)
            .chain(&self.w_skip)
            .copied()
            .collect()
    }

    /// Scalar parameter count.
    pub fn num_params(&self) -> usize {
        let per_hop = self.in_width * self.hop_width * if self.decouple { 2 } else { 1 }
            + self.num_nodes * self.hop_width
            + self.skip_width.unwrap_or(0) * self.hop_width;
        self.hops * per_hop
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        prop: &Propagation,
        h: Var,
        x0: Option<Var>,
    ) -> Result<Var> {
        self.forward_with(tape, bound, prop, h, x0, None)
    }

    /// Forward pass with an optional activation wrapped around the
    /// concatenated output.
    pub fn forward_with(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        prop: &Propagation,
        h: Var,
        x0: Option<Var>,
        activation: Option<Activation>,
    ) -> Result<Var> {
        if prop.num_nodes != self.num_nodes || prop.hops.len() < self.hops {
            return Err(Error::Shape {
                op: "rsnet_conv",
                lhs: (self.num_nodes, self.hops),
                rhs: (prop.num_nodes, prop.hops.len()),
            });
        }
        let batch = check_input(tape, "rsnet_conv", h, self.num_nodes, self.in_width)?;
        let x0 = match (self.skip_width, x0) {
            (Some(sw), Some(x0)) => {
                if check_input(tape, "rsnet_conv_skip", x0, self.num_nodes, sw)? != batch {
                    return Err(Error::Shape {
                        op: "rsnet_conv_skip",
                        lhs: tape.shape(h),
                        rhs: tape.shape(x0),
                    });
                }
                Some(x0)
            }
            (Some(_), None) => {
                return Err(Error::InvalidArgument(
                    "rsnet_conv: skip weights present but no skip source".into(),
                ))
            }
            (None, _) => None,
        };
        let mut outputs = Vec::with_capacity(self.hops);
        for k in 0..self.hops {
            let m = bound.var(self.m[k]);
            let hw = tape.matmul(h, bound.var(self.w[k]))?;
            let modulated = tape.mul_tiled(hw, m)?;
            let mut y = match prop.hops[k] {
                HopOperator::Full(a) => tape.propagate(a, modulated)?,
                HopOperator::Split { diag, off } => {
                    let neighbours = tape.propagate(off, modulated)?;
                    let w_self = *self.w_self.get(k).ok_or_else(|| {
                        Error::InvalidArgument(
                            "rsnet_conv: split propagation on a layer without self weights".into(),
                        )
                    })?;
                    let hs = tape.matmul(h, bound.var(w_self))?;
                    let hs = tape.mul_tiled(hs, m)?;
                    let own = tape.propagate(diag, hs)?;
                    tape.add(neighbours, own)?
                }
            };
            if let Some(x0) = x0 {
                let skip = tape.matmul(x0, bound.var(self.w_skip[k]))?;
                y = tape.add(y, skip)?;
            }
            outputs.push(y);
        }
        let out = if outputs.len() == 1 {
            outputs[0]
        } else {
            tape.concat_cols(&outputs)?
        };
        Ok(match activation {
            Some(act) => act.apply(tape, out),
            None => out,
        })
    }

    /// Per-node loop evaluation of the same layer for a single pose:
    /// `out_i^(k) = Σ_j [Ǎᵏ]_ij · h_j (Wₖ⁽ʲ⁾ ⊙ mₖⱼ) + x_i W̃ₖ`, where `Wₖ⁽ʲ⁾` is the
    /// self weight when `j = i` and decoupling is on.
    pub fn reference_forward(
        &self,
        params: &ParamSet,
        powers: &[Tensor],
        h: &Tensor,
        x0: Option<&Tensor>,
    ) -> Tensor {
        let n = self.num_nodes;
        let f = self.hop_width;
        let mut out = Tensor::zeros(n, self.out_width());
        for (k, power) in powers.iter().enumerate().take(self.hops) {
            let m = params.get(self.m[k]);
            for i in 0..n {
                for j in 0..n {
                    let a = power[(i, j)];
                    let w = if self.decouple && i == j {
                        params.get(self.w_self[k])
                    } else {
                        params.get(self.w[k])
                    };
                    for c in 0..f {
                        let mut acc = 0.0;
                        for r in 0..self.in_width {
                            acc += h[(j, r)] * w[(r, c)] * m[(j, c)];
                        }
                        out.as_mut_slice()[i * self.out_width() + k * f + c] += a * acc;
                    }
                }
                if let (Some(x0), Some(&ws)) = (x0, self.w_skip.get(k)) {
                    let ws = params.get(ws);
                    for c in 0..f {
                        let mut acc = 0.0;
                        for r in 0..ws.rows() {
                            acc += x0[(i, r)] * ws[(r, c)];
                        }
                        out.as_mut_slice()[i * self.out_width() + k * f + c] += acc;
                    }
                }
            }
        }
        out
    }

    /// Compares the row-wise and matrix forms of weight modulation for
    /// every hop of this layer on random features.
    pub fn equivalence_check<R: Rng + ?Sized>(
        &self,
        params: &ParamSet,
        powers: &[Tensor],
        rng: &mut R,
    ) -> Result<EquivalenceReport> {
        let h = crate::autodiff::randn(self.num_nodes, self.in_width, rng);
        let mut max_deviation: f64 = 0.0;
        for k in 0..self.hops {
            let report = weight_modulated_equivalence(
                &powers[k],
                &h,
                params.get(self.w[k]),
                params.get(self.m[k]),
            )?;
            max_deviation = max_deviation.max(report.max_deviation);
        }
        Ok(EquivalenceReport::new(max_deviation))
    }
}

/// Outcome of comparing two evaluations of the same formula.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct EquivalenceReport {
    pub max_deviation: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl EquivalenceReport {
    pub const TOLERANCE: f64 = 1e-12;

    fn new(max_deviation: f64) -> Self {
        Self {
            max_deviation,
            tolerance: Self::TOLERANCE,
            passed: max_deviation < Self::TOLERANCE,
        }
    }
}

/// Row-wise rule `h'_i = Σ_j a_ij h_j (W ⊙ 1 m_j)` against the matrix rule
/// `A((HW) ⊙ M)`.
pub fn weight_modulated_equivalence(
    a: &Tensor,
    h: &Tensor,
    w: &Tensor,
    m: &Tensor,
) -> Result<EquivalenceReport> {
    let n = a.rows();
    let (fin, fout) = w.shape();
    if h.shape() != (n, fin) || m.shape() != (n, fout) || !a.is_square() {
        return Err(Error::Shape {
            op: "weight_modulated_equivalence",
            lhs: h.shape(),
            rhs: m.shape(),
        });
    }
    let matrix_form = a.matmul(&h.matmul(w)?.hadamard(m)?)?;
    let mut row_form = Tensor::zeros(n, fout);
    for j in 0..n {
        // per-node modulated weight W ⊙ m_j
        let wj = Tensor::from_fn(fin, fout, |r, c| w[(r, c)] * m[(j, c)]);
        let hj = Tensor::from_rows(&[h.row(j)]);
        let message = hj.matmul(&wj)?;
        for i in 0..n {
            let aij = a[(i, j)];
            for (o, v) in row_form.row_mut(i).iter_mut().zip(message.row(0)) {
                *o += aij * v;
            }
        }
    }
    Ok(EquivalenceReport::new(matrix_form.max_abs_diff(&row_form)?))
}

/// Graph convolution with one weight matrix per node:
/// `h_i = Σ_j â_ij h_j W_j + x_i W̃`.
#[derive(Clone, Debug)]
pub struct UnsharedConv {
    pub num_nodes: usize,
    pub in_width: usize,
    pub out_width: usize,
    pub skip_width: Option<usize>,
    pub w: Vec<ParamId>,
    pub w_skip: Option<ParamId>,
}

impl UnsharedConv {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        prefix: &str,
        num_nodes: usize,
        in_width: usize,
        skip_width: Option<usize>,
        out_width: usize,
        rng: &mut R,
    ) -> Self {
        let w = (0..num_nodes)
            .map(|j| {
                params.add(
                    format!("{prefix}.w_node{j}"),
                    xavier_uniform(in_width, out_width, rng),
                )
            })
            .collect();
        let w_skip = skip_width.map(|sw| {
            params.add(
                format!("{prefix}.w_skip"),
                xavier_uniform(sw, out_width, rng),
            )
        });
        Self {
            num_nodes,
            in_width,
            out_width,
            skip_width,
            w,
            w_skip,
        }
    }

    /// Builds the layer around caller-supplied weights.
    pub fn from_weights(
        params: &mut ParamSet,
        prefix: &str,
        weights: Vec<Tensor>,
        w_skip: Option<Tensor>,
        num_nodes: usize,
    ) -> Result<Self> {
        if weights.len() != num_nodes {
            return Err(Error::InvalidArgument(format!(
                "rsnet_conv_unshared: expected {num_nodes} per-node weights, got {}",
                weights.len()
            )));
        }
        let (in_width, out_width) = weights[0].shape();
        if let Some(bad) = weights.iter().find(|w| w.shape() != (in_width, out_width)) {
            return Err(Error::Shape {
                op: "rsnet_conv_unshared",
                lhs: (in_width, out_width),
                rhs: bad.shape(),
            });
        }
        let skip_width = w_skip.as_ref().map(|t| t.rows());
        let w = weights
            .into_iter()
            .enumerate()
            .map(|(j, t)| params.add(format!("{prefix}.w_node{j}"), t))
            .collect();
        let w_skip = w_skip.map(|t| params.add(format!("{prefix}.w_skip"), t));
        Ok(Self {
            num_nodes,
            in_width,
            out_width,
            skip_width,
            w,
            w_skip,
        })
    }

    pub fn num_params(&self) -> usize {
        self.num_nodes * self.in_width * self.out_width
            + self.skip_width.unwrap_or(0) * self.out_width
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        a_hat: Var,
        h: Var,
        x0: Option<Var>,
    ) -> Result<Var> {
        let n = self.num_nodes;
        check_input(tape, "rsnet_conv_unshared", h, n, self.in_width)?;
        let mut acc: Option<Var> = None;
        for j in 0..n {
            let hw = tape.matmul(h, bound.var(self.w[j]))?;
            let indicator = tape.constant(Tensor::from_fn(n, self.out_width, |i, _| {
                f64::from(u8::from(i == j))
            }));
            let only_j = tape.mul_tiled(hw, indicator)?;
            let y = tape.propagate(a_hat, only_j)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, y)?,
                None => y,
            });
        }
        let mut out = acc.expect("at least one node");
        if let (Some(ws), Some(x0)) = (self.w_skip, x0) {
            let skip = tape.matmul(x0, bound.var(ws))?;
            out = tape.add(out, skip)?;
        }
        Ok(out)
    }
}

/// Embedded-Gaussian non-local layer with residual:
/// `Z = H + softmax((Hθ)(Hφ)ᵀ/√F_b)(Hg) W_z`.
#[derive(Clone, Debug)]
pub struct NonLocal {
    pub num_nodes: usize,
    pub width: usize,
    pub bottleneck: usize,
    pub theta: ParamId,
    pub phi: ParamId,
    pub g: ParamId,
    pub w_z: ParamId,
}

impl NonLocal {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        prefix: &str,
        num_nodes: usize,
        width: usize,
        rng: &mut R,
    ) -> Self {
        let bottleneck = width.div_ceil(2).max(1);
        Self {
            num_nodes,
            width,
            bottleneck,
            theta: params.add(
                format!("{prefix}.theta"),
                xavier_uniform(width, bottleneck, rng),
            ),
            phi: params.add(
                format!("{prefix}.phi"),
                xavier_uniform(width, bottleneck, rng),
            ),
            g: params.add(
                format!("{prefix}.g"),
                xavier_uniform(width, bottleneck, rng),
            ),
            w_z: params.add(format!("{prefix}.w_z"), Tensor::zeros(bottleneck, width)),
        }
    }

    pub fn num_params(&self) -> usize {
        4 * self.width * self.bottleneck
    }

    /// Attention weights, `(B·N) × N`.
    pub fn attention(&self, tape: &mut Tape, bound: &Bound, h: Var) -> Result<Var> {
        check_input(tape, "nonlocal", h, self.num_nodes, self.width)?;
        let q = tape.matmul(h, bound.var(self.theta))?;
        let k = tape.matmul(h, bound.var(self.phi))?;
        let logits = tape.block_matmul_nt(q, k, self.num_nodes)?;
        let logits = tape.scale(logits, 1.0 / (self.bottleneck as f64).sqrt());
        Ok(tape.softmax_rows(logits))
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, h: Var) -> Result<Var> {
        let attn = self.attention(tape, bound, h)?;
        let values = tape.matmul(h, bound.var(self.g))?;
        let mixed = tape.block_matmul(attn, values, self.num_nodes)?;
        let z = tape.matmul(mixed, bound.var(self.w_z))?;
        tape.add(h, z)
    }
}

/// Two convs with normalization and activation, plus an additive residual.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub conv1: RsNetConv,
    pub conv2: RsNetConv,
    pub norm_gain: Option<ParamId>,
    pub norm_bias: Option<ParamId>,
    pub design: BlockDesign,
    pub layout: BlockLayout,
}

/// Dropout settings for one forward pass.
pub struct DropoutCtx<'a, R: Rng + ?Sized> {
    pub rate: f64,
    pub training: bool,
    pub rng: &'a mut R,
}

impl<R: Rng + ?Sized> DropoutCtx<'_, R> {
    pub fn apply(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.dropout(x, self.rate, self.training, self.rng)
    }
}

impl ResidualBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        prefix: &str,
        num_nodes: usize,
        width: usize,
        skip_width: Option<usize>,
        hops: usize,
        decouple: bool,
        design: BlockDesign,
        layout: BlockLayout,
        rng: &mut R,
    ) -> Result<Self> {
        let hop_width = width / hops;
        if hop_width * hops != width {
            return Err(Error::InvalidArgument(format!(
                "{prefix}: block width {width} is not a multiple of K={hops}"
            )));
        }
        let conv1 = RsNetConv::new(
            params,
            &format!("{prefix}.conv1"),
            num_nodes,
            width,
            skip_width,
            hop_width,
            hops,
            decouple,
            rng,
        )?;
        let (norm_gain, norm_bias) = match design {
            BlockDesign::LayerNormGelu => (
                Some(params.add(format!("{prefix}.norm_gain"), Tensor::filled(1, width, 1.0))),
                Some(params.add(format!("{prefix}.norm_bias"), Tensor::zeros(1, width))),
            ),
            BlockDesign::StandardizeRelu => (None, None),
        };
        let conv2 = RsNetConv::new(
            params,
            &format!("{prefix}.conv2"),
            num_nodes,
            width,
            skip_width,
            hop_width,
            hops,
            decouple,
            rng,
        )?;
        Ok(Self {
            conv1,
            conv2,
            norm_gain,
            norm_bias,
            design,
            layout,
        })
    }

    pub fn width(&self) -> usize {
        self.conv1.in_width
    }

    pub fn num_params(&self) -> usize {
        let norm = if self.norm_gain.is_some() {
            2 * self.width()
        } else {
            0
        };
        self.conv1.num_params() + self.conv2.num_params() + norm
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        prop: &Propagation,
        h: Var,
        x0: Option<Var>,
        dropout: &mut DropoutCtx<'_, R>,
    ) -> Result<Var> {
        let act = self.design.activation();
        let inner = match self.layout {
            BlockLayout::Interleaved => None,
            BlockLayout::Activated => Some(act),
        };
        let a = self.conv1.forward_with(tape, bound, prop, h, x0, inner)?;
        let a = dropout.apply(tape, a)?;
        let a = tape.layer_norm(
            a,
            self.norm_gain.map(|p| bound.var(p)),
            self.norm_bias.map(|p| bound.var(p)),
            LAYER_NORM_EPS,
        )?;
        let b = self.conv2.forward(tape, bound, prop, a, x0)?;
        let b = dropout.apply(tape, b)?;
        let b = act.apply(tape, b);
        if tape.shape(b) != tape.shape(h) {
            return Err(Error::Shape {
                op: "residual_add",
                lhs: tape.shape(h),
                rhs: tape.shape(b),
            });
        }
        tape.add(h, b)
    }
}

/// Finite-difference checks of every layer type on `N(0, 1)` inputs.
pub fn layer_gradchecks(seed: u64) -> Result<Vec<(&'static str, crate::autodiff::GradCheck)>> {
    use crate::autodiff::{gradcheck, randn};
    use crate::graph::{build_adjacency, normalize_adjacency, SkeletonTopology};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const H: f64 = 1e-5;
    let n = 4;
    let topo = SkeletonTopology::path(n)?;
    let (a_hat, _) = normalize_adjacency::<f64>(&build_adjacency(&topo)?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = 2;
    let (fin, f0, hop_w, hops) = (6, 2, 2, 3);
    let width = hop_w * hops;

    let mut out = Vec::new();

    // Conv layer with decoupled self weights; parameters, features, skip
    // source and Q all perturbed.
    for (name, decouple, act) in [
        ("rsnet_conv", false, None),
        ("rsnet_conv_decoupled", true, None),
        ("rsnet_conv_activated", false, Some(Activation::Gelu)),
    ] {
        let mut ps = ParamSet::new();
        let layer = RsNetConv::new(
            &mut ps,
            "c",
            n,
            fin,
            Some(f0),
            hop_w,
            hops,
            decouple,
            &mut rng,
        )?;
        for id in ps.ids().collect::<Vec<_>>() {
            let (r, c) = ps.get(id).shape();
            *ps.get_mut(id) = randn(r, c, &mut rng);
        }
        let mut inputs = ps.tensors().to_vec();
        inputs.push(randn(batch * n, fin, &mut rng));
        inputs.push(randn(batch * n, f0, &mut rng));
        inputs.push(randn(n, n, &mut rng).scale(0.1));
        let np = ps.len();
        let a_hat = a_hat.clone();
        out.push((
            name,
            gradcheck(&inputs, H, |t, v| {
                let bound = Bound::from_vars(v[..np].to_vec());
                let prop = Propagation::build(t, &a_hat, Some(v[np + 2]), hops, decouple)?;
                layer.forward_with(t, &bound, &prop, v[np], Some(v[np + 1]), act)
            })?,
        ));
    }

    {
        let mut ps = ParamSet::new();
        let layer = UnsharedConv::new(&mut ps, "u", n, fin, Some(f0), hop_w, &mut rng);
        let mut inputs = ps.tensors().to_vec();
        inputs.push(randn(batch * n, fin, &mut rng));
        inputs.push(randn(batch * n, f0, &mut rng));
        let np = ps.len();
        let a_hat = a_hat.clone();
        out.push((
            "rsnet_conv_unshared",
            gradcheck(&inputs, H, |t, v| {
                let bound = Bound::from_vars(v[..np].to_vec());
                let a = t.constant(a_hat.clone());
                layer.forward(t, &bound, a, v[np], Some(v[np + 1]))
            })?,
        ));
    }

    {
        let mut ps = ParamSet::new();
        let layer = NonLocal::new(&mut ps, "nl", n, width, &mut rng);
        for id in ps.ids().collect::<Vec<_>>() {
            let (r, c) = ps.get(id).shape();
            *ps.get_mut(id) = randn(r, c, &mut rng);
        }
        let mut inputs = ps.tensors().to_vec();
        inputs.push(randn(batch * n, width, &mut rng));
        let np = ps.len();
        out.push((
            "nonlocal",
            gradcheck(&inputs, H, |t, v| {
                layer.forward(t, &Bound::from_vars(v[..np].to_vec()), v[np])
            })?,
        ));
    }

    for (name, design, layout) in [
        (
            "residual_block",
            BlockDesign::LayerNormGelu,
            BlockLayout::Interleaved,
        ),
        (
            "residual_block_standardize_relu",
            BlockDesign::StandardizeRelu,
            BlockLayout::Interleaved,
        ),
        (
            "residual_block_activated",
            BlockDesign::LayerNormGelu,
            BlockLayout::Activated,
        ),
    ] {
        let mut ps = ParamSet::new();
        let block = ResidualBlock::new(
            &mut ps,
            "b",
            n,
            width,
            Some(f0),
            hops,
            true,
            design,
            layout,
            &mut rng,
        )?;
        for id in ps.ids().collect::<Vec<_>>() {
            let (r, c) = ps.get(id).shape();
            *ps.get_mut(id) = randn(r, c, &mut rng);
        }
        let mut inputs = ps.tensors().to_vec();
        inputs.push(randn(batch * n, width, &mut rng));
        inputs.push(randn(batch * n, f0, &mut rng));
        let np = ps.len();
        let a_hat = a_hat.clone();
        let dropout_seed = seed ^ 0xd0;
        out.push((
            name,
            gradcheck(&inputs, H, |t, v| {
                let bound = Bound::from_vars(v[..np].to_vec());
                let prop = Propagation::build(t, &a_hat, None, hops, true)?;
                let mut drng = ChaCha8Rng::seed_from_u64(dropout_seed);
                let mut ctx = DropoutCtx {
                    rate: 0.2,
                    training: true,
                    rng: &mut drng,
                };
                block.forward(t, &bound, &prop, v[np], Some(v[np + 1]), &mut ctx)
            })?,
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::randn;
    use crate::graph::{
        build_adjacency, hop_powers, modulate_adjacency, normalize_adjacency, SkeletonTopology,
    };
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn a_hat(n: usize) -> Tensor {
        let topo = SkeletonTopology::path(n).unwrap();
        normalize_adjacency::<f64>(&build_adjacency(&topo).unwrap())
            .unwrap()
            .0
    }

    fn randomize(ps: &mut ParamSet, rng: &mut ChaCha8Rng) {
        for id in ps.ids().collect::<Vec<_>>() {
            let (r, c) = ps.get(id).shape();
            *ps.get_mut(id) = randn(r, c, rng);
        }
    }

    fn run_conv(
        layer: &RsNetConv,
        ps: &ParamSet,
        powers: &[Tensor],
        h: &Tensor,
        x0: Option<&Tensor>,
    ) -> Tensor {
        let mut tape = Tape::new();
        let bound = ps.bind(&mut tape);
        let prop = Propagation::from_powers(&mut tape, powers, layer.decouple).unwrap();
        let hv = tape.constant(h.clone());
        let xv = x0.map(|x| tape.constant(x.clone()));
        let out = layer.forward(&mut tape, &bound, &prop, hv, xv).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn neutral_elements_reduce_to_gcn() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = a_hat(5);
        let mut ps = ParamSet::new();
        let layer = RsNetConv::new(&mut ps, "c", 5, 3, Some(2), 4, 1, false, &mut rng).unwrap();
        *ps.get_mut(layer.w_skip[0]) = Tensor::zeros(2, 4);
        let h = randn(5, 3, &mut rng);
        let x0 = randn(5, 2, &mut rng);
        let out = run_conv(&layer, &ps, &[a.clone()], &h, Some(&x0));
        let gcn = a.matmul(&h.matmul(ps.get(layer.w[0])).unwrap()).unwrap();
        assert!(out.max_abs_diff(&gcn).unwrap() < 1e-14);
    }

    #[test]
    fn identity_propagation_returns_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ps = ParamSet::new();
        let layer = RsNetConv::new(&mut ps, "c", 4, 3, Some(3), 3, 1, false, &mut rng).unwrap();
        *ps.get_mut(layer.w[0]) = Tensor::identity(3);
        *ps.get_mut(layer.w_skip[0]) = Tensor::zeros(3, 3);
        let h = randn(4, 3, &mut rng);
        let out = run_conv(&layer, &ps, &[Tensor::identity(4)], &h, Some(&h));
        assert_eq!(out, h);
    }

    #[test]
    fn matrix_form_matches_loops_p3() {
        for decouple in [false, true] {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let q = randn(3, 3, &mut rng).scale(0.01);
            let check = modulate_adjacency(&a_hat(3), &q).unwrap();
            let powers = hop_powers(&check, 3).unwrap();
            let mut ps = ParamSet::new();
            let layer =
                RsNetConv::new(&mut ps, "c", 3, 4, Some(2), 2, 3, decouple, &mut rng).unwrap();
            randomize(&mut ps, &mut rng);
            let h = randn(3, 4, &mut rng);
            let x0 = randn(3, 2, &mut rng);
            let fast = run_conv(&layer, &ps, &powers, &h, Some(&x0));
            let slow = layer.reference_forward(&ps, &powers, &h, Some(&x0));
            assert!(
                fast.max_abs_diff(&slow).unwrap() < 1e-12,
                "decouple={decouple}"
            );
            assert_eq!(fast.cols(), 6);
        }
    }

    #[test]
    fn tape_modulation_matches_graph_core() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = a_hat(5);
        let q = randn(5, 5, &mut rng).scale(0.01);
        let expected = hop_powers(&modulate_adjacency(&a, &q).unwrap(), 3).unwrap();
        let mut tape = Tape::new();
        let qv = tape.param(q);
        let prop = Propagation::build(&mut tape, &a, Some(qv), 3, false).unwrap();
        for (k, op) in prop.hops.iter().enumerate() {
            let HopOperator::Full(v) = op else { panic!() };
            assert!(tape.value(*v).max_abs_diff(&expected[k]).unwrap() < 1e-14);
        }
    }

    #[test]
    fn modulation_equivalence() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = a_hat(3);
        let h = randn(3, 4, &mut rng);
        let w = randn(4, 2, &mut rng);
        let ones = Tensor::filled(3, 2, 1.0);
        let r = weight_modulated_equivalence(&a, &h, &w, &ones).unwrap();
        assert!(r.passed);
        let m = randn(3, 2, &mut rng);
        let r = weight_modulated_equivalence(&a, &h, &w, &m).unwrap();
        assert!(r.passed, "{r:?}");
        // only node 1's features propagate
        let mask = Tensor::from_fn(3, 2, |i, _| if i == 1 { 1.0 } else { 0.0 });
        let out = a
            .matmul(&h.matmul(&w).unwrap().hadamard(&mask).unwrap())
            .unwrap();
        let hw1 = h.matmul(&w).unwrap();
        for i in 0..3 {
            for c in 0..2 {
                assert!((out[(i, c)] - a[(i, 1)] * hw1[(1, c)]).abs() < 1e-15);
            }
        }
        let mut ps = ParamSet::new();
        let layer = RsNetConv::new(&mut ps, "c", 3, 4, None, 2, 3, false, &mut rng).unwrap();
        randomize(&mut ps, &mut rng);
        let powers = hop_powers(&a, 3).unwrap();
        assert!(
            layer
                .equivalence_check(&ps, &powers, &mut rng)
                .unwrap()
                .passed
        );
    }

    #[test]
    fn unshared_collapses_and_hand_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = a_hat(3);
        let w = randn(2, 3, &mut rng);
        let h = randn(3, 2, &mut rng);
        let mut ps = ParamSet::new();
        let layer = UnsharedConv::from_weights(&mut ps, "u", vec![w.clone(); 3], None, 3).unwrap();
        let mut tape = Tape::new();
        let bound = ps.bind(&mut tape);
        let av = tape.constant(a.clone());
        let hv = tape.constant(h.clone());
        let out = layer.forward(&mut tape, &bound, av, hv, None).unwrap();
        let shared = a.matmul(&h.matmul(&w).unwrap()).unwrap();
        assert!(tape.value(out).max_abs_diff(&shared).unwrap() < 1e-14);

        // P3 with scalar weights 2, 3, 5 and features 1, 1, 1:
        // â_01 = â_10 = â_12 = â_21 = 1/√2
        let mut ps = ParamSet::new();
        let ws = [2.0, 3.0, 5.0].map(|v| Tensor::filled(1, 1, v)).to_vec();
        let layer = UnsharedConv::from_weights(&mut ps, "u", ws, None, 3).unwrap();
        let mut tape = Tape::new();
        let bound = ps.bind(&mut tape);
        let av = tape.constant(a);
        let hv = tape.constant(Tensor::filled(3, 1, 1.0));
        let out = layer.forward(&mut tape, &bound, av, hv, None).unwrap();
        let r = std::f64::consts::FRAC_1_SQRT_2;
        let expected = [3.0 * r, 7.0 * r, 3.0 * r];
        for (i, e) in expected.iter().enumerate() {
            assert!((tape.value(out)[(i, 0)] - e).abs() < 1e-14);
        }
        assert!(UnsharedConv::from_weights(
            &mut ParamSet::new(),
            "u",
            vec![Tensor::zeros(1, 1); 2],
            None,
            3
        )
        .is_err());
    }

    #[test]
    fn unshared_param_count_scales_with_nodes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut ps = ParamSet::new();
        let shared = RsNetConv::new(&mut ps, "s", 17, 8, None, 8, 1, false, &mut rng).unwrap();
        let unshared = UnsharedConv::new(&mut ps, "u", 17, 8, None, 8, &mut rng);
        let shared_weights = 8 * 8;
        assert_eq!(unshared.num_params(), 17 * shared_weights);
        assert_eq!(shared.num_params(), shared_weights + 17 * 8);
        assert_eq!(
            ps.num_scalars(),
            shared.num_params() + unshared.num_params()
        );
    }

    #[test]
    fn nonlocal_identity_and_uniform_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut ps = ParamSet::new();
        let nl = NonLocal::new(&mut ps, "nl", 2, 5, &mut rng);
        assert_eq!(nl.bottleneck, 3);
        let row = randn(1, 5, &mut rng);
        let h = Tensor::from_fn(2, 5, |_, j| row[(0, j)]);
        let mut tape = Tape::new();
        let bound = ps.bind(&mut tape);
        let hv = tape.constant(h.clone());
        let out = nl.forward(&mut tape, &bound, hv).unwrap();
        assert_eq!(tape.value(out), &h);
        let attn = nl.attention(&mut tape, &bound, hv).unwrap();
        assert!(tape
            .value(attn)
            .as_slice()
            .iter()
            .all(|v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn residual_block_neutral_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = a_hat(4);
        for design in [BlockDesign::LayerNormGelu, BlockDesign::StandardizeRelu] {
            let mut ps = ParamSet::new();
            let block = ResidualBlock::new(
                &mut ps,
                "b",
                4,
                6,
                Some(2),
                3,
                true,
                design,
                BlockLayout::Interleaved,
                &mut rng,
            )
            .unwrap();
            for id in block
                .conv1
                .param_ids()
                .into_iter()
                .chain(block.conv2.param_ids())
            {
                let (r, c) = ps.get(id).shape();
                *ps.get_mut(id) = Tensor::zeros(r, c);
            }
            let h = randn(8, 6, &mut rng);
            let x0 = randn(8, 2, &mut rng);
            let mut tape = Tape::new();
            let bound = ps.bind(&mut tape);
            let prop = Propagation::build(&mut tape, &a, None, 3, true).unwrap();
            let hv = tape.constant(h.clone());
            let xv = tape.constant(x0);
            let mut drng = ChaCha8Rng::seed_from_u64(0);
            let mut ctx = DropoutCtx {
                rate: 0.2,
                training: false,
                rng: &mut drng,
            };
            let out = block
                .forward(&mut tape, &bound, &prop, hv, Some(xv), &mut ctx)
                .unwrap();
            assert_eq!(tape.value(out), &h);
        }
        let mut ps = ParamSet::new();
        let block = ResidualBlock::new(
            &mut ps,
            "b",
            4,
            6,
            Some(2),
            3,
            false,
            BlockDesign::LayerNormGelu,
            BlockLayout::Activated,
            &mut rng,
        )
        .unwrap();
        let mut tape = Tape::new();
        let bound = ps.bind(&mut tape);
        let prop = Propagation::build(&mut tape, &a, None, 3, false).unwrap();
        let zero = tape.constant(Tensor::zeros(4, 6));
        let zskip = tape.constant(Tensor::zeros(4, 2));
        let mut drng = ChaCha8Rng::seed_from_u64(0);
        let mut ctx = DropoutCtx {
            rate: 0.2,
            training: true,
            rng: &mut drng,
        };
        let out = block
            .forward(&mut tape, &bound, &prop, zero, Some(zskip), &mut ctx)
            .unwrap();
        assert_eq!(tape.value(out).max_abs(), 0.0);
        assert!(ResidualBlock::new(
            &mut ps,
            "bad",
            4,
            7,
            None,
            3,
            false,
            BlockDesign::LayerNormGelu,
            BlockLayout::Interleaved,
            &mut rng
        )
        .is_err());
    }

    #[test]
    fn conv_permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let topo = SkeletonTopology::h36m17();
        let n = topo.num_joints();
        let a = normalize_adjacency::<f64>(&build_adjacency(&topo).unwrap())
            .unwrap()
            .0;
        let q = randn(n, n, &mut rng).scale(0.01);
        let mut ps = ParamSet::new();
        let layer = RsNetConv::new(&mut ps, "c", n, 4, Some(2), 3, 3, true, &mut rng).unwrap();
        randomize(&mut ps, &mut rng);
        let h = randn(n, 4, &mut rng);
        let x0 = randn(n, 2, &mut rng);
        let run = |ps: &ParamSet, a: &Tensor, q: &Tensor, h: &Tensor, x0: &Tensor| {
            let mut tape = Tape::new();
            let bound = ps.bind(&mut tape);
            let qv = tape.constant(q.clone());
            let prop = Propagation::build(&mut tape, a, Some(qv), 3, true).unwrap();
            let hv = tape.constant(h.clone());
            let xv = tape.constant(x0.clone());
            let out = layer
                .forward(&mut tape, &bound, &prop, hv, Some(xv))
                .unwrap();
            tape.value(out).clone()
        };
        let base = run(&ps, &a, &q, &h, &x0);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.reverse();
        perm.swap(0, 5);
        let mut pps = ps.clone();
        for &m in &layer.m {
            *pps.get_mut(m) = ps.get(m).permute_rows(&perm);
        }
        let permuted = run(
            &pps,
            &a.permute_symmetric(&perm),
            &q.permute_symmetric(&perm),
            &h.permute_rows(&perm),
            &x0.permute_rows(&perm),
        );
        let expected = base.permute_rows(&perm);
        assert!(permuted.max_abs_diff(&expected).unwrap() < 1e-10);
    }

    #[test]
    fn every_layer_passes_gradcheck() {
        for seed in 0..5 {
            for (name, check) in layer_gradchecks(seed).unwrap() {
                assert!(
                    check.max_relative_error < 1e-5,
                    "seed {seed} {name}: {check:?}"
                );
            }
        }
    }
}
