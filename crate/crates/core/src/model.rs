//! Full RS-Net: input conv, residual blocks, non-local layer, prediction
//! head and optional pose refinement.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graph::{
    build_adjacency, init_adjacency_modulation, normalize_adjacency, SkeletonTopology,
};
use crate::layers::{
    BlockDesign, BlockLayout, DropoutCtx, NonLocal, Propagation, ResidualBlock, RsNetConv,
};
use crate::params::{xavier_uniform, Bound, ParamId, ParamSet};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_joints: usize,
    /// Hop count `K`.
    pub hops: usize,
    pub filter_size: usize,
    pub num_blocks: usize,
    pub dropout_rate: f64,
    pub use_nonlocal: bool,
    pub use_refinement: bool,
    pub refinement_hidden: usize,
    pub use_skip: bool,
    pub decouple_self: bool,
    pub block_design: BlockDesign,
    pub block_layout: BlockLayout,
    /// Network outputs are multiplied by this to give millimeters.
    pub target_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_joints: 17,
            hops: 3,
            filter_size: 96,
            num_blocks: 4,
            dropout_rate: 0.2,
            use_nonlocal: true,
            use_refinement: true,
            refinement_hidden: 64,
            use_skip: true,
            decouple_self: true,
            block_design: BlockDesign::LayerNormGelu,
            block_layout: BlockLayout::Interleaved,
            target_scale: 1000.0,
        }
    }
}

impl ModelConfig {
    /// Per-hop width `⌊F/K⌋`.
    pub fn hop_width(&self) -> usize {
        self.filter_size / self.hops.max(1)
    }

    /// Hidden width `K·⌊F/K⌋`.
    pub fn width(&self) -> usize {
        self.hops * self.hop_width()
    }

    /// Number of graph conv layers: input, two per block, head.
    pub fn num_conv_layers(&self) -> usize {
        2 + 2 * self.num_blocks
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.hops == 0 {
            return bad("hops must be at least 1".into());
        }
        if self.hop_width() == 0 {
            return bad(format!(
                "filter_size {} is smaller than hops {}",
                self.filter_size, self.hops
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!(
                "dropout_rate must lie in [0, 1), got {}",
                self.dropout_rate
            ));
        }
        if self.use_refinement && self.refinement_hidden == 0 {
            return bad("refinement_hidden must be positive".into());
        }
        if !(self.target_scale.is_finite() && self.target_scale > 0.0) {
            return bad(format!(
                "target_scale must be positive, got {}",
                self.target_scale
            ));
        }
        Ok(())
    }
}

/// Two fully connected layers adding a residual correction to a pose.
#[derive(Clone, Debug)]
pub struct Refinement {
    pub fc1: ParamId,
    pub b1: ParamId,
    pub fc2: ParamId,
    pub b2: ParamId,
}

impl Refinement {
    fn new<R: Rng + ?Sized>(params: &mut ParamSet, dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            fc1: params.add("refine.fc1", xavier_uniform(dim, hidden, rng)),
            b1: params.add("refine.b1", Tensor::zeros(1, hidden)),
            fc2: params.add("refine.fc2", Tensor::zeros(hidden, dim)),
            b2: params.add("refine.b2", Tensor::zeros(1, dim)),
        }
    }

    /// `Ŷ + MLP(flatten(Ŷ))` per sample of a `(B·N) × 3` batch.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        y: Var,
        num_joints: usize,
    ) -> Result<Var> {
        let (rows, cols) = tape.shape(y);
        let batch = rows / num_joints;
        let flat = tape.reshape(y, batch, num_joints * cols)?;
        let hidden = tape.matmul(flat, bound.var(self.fc1))?;
        let hidden = tape.add_row(hidden, bound.var(self.b1))?;
        let hidden = tape.gelu(hidden);
        let delta = tape.matmul(hidden, bound.var(self.fc2))?;
        let delta = tape.add_row(delta, bound.var(self.b2))?;
        let delta = tape.reshape(delta, rows, cols)?;
        tape.add(y, delta)
    }
}

/// Result of a forward pass.
#[derive(Debug)]
pub struct Forward {
    /// Prediction in network units, `(B·N) × 3`.
    pub output: Var,
    /// Backbone prediction before refinement.
    pub backbone: Var,
    /// Named intermediate shapes in evaluation order.
    pub trace: Vec<(String, (usize, usize))>,
}

#[derive(Clone, Debug)]
pub struct RsNet {
    pub config: ModelConfig,
    pub skeleton: SkeletonTopology,
    pub params: ParamSet,
    a_hat: Tensor,
    pub q: ParamId,
    pub input: RsNetConv,
    pub blocks: Vec<ResidualBlock>,
    pub nonlocal: Option<NonLocal>,
    pub head: RsNetConv,
    pub head_proj: ParamId,
    pub refinement: Option<Refinement>,
}

impl RsNet {
    pub fn new(config: ModelConfig, skeleton: SkeletonTopology, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::with_rng(config, skeleton, &mut rng)
    }

    pub fn with_rng<R: Rng + ?Sized>(
        config: ModelConfig,
        skeleton: SkeletonTopology,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        skeleton.validate()?;
        let n = skeleton.num_joints();
        if config.num_joints != n {
            return Err(Error::InvalidArgument(format!(
                "config has {} joints but the skeleton has {n}",
                config.num_joints
            )));
        }
        let (a_hat, _) = normalize_adjacency::<f64>(&build_adjacency(&skeleton)?)?;
        let (k, f, width) = (config.hops, config.hop_width(), config.width());
        let decouple = config.decouple_self;
        let mut params = ParamSet::new();
        let q = params.add("adjacency_modulation", init_adjacency_modulation(n, rng));
        let input_skip = config.use_skip.then_some(2);
        let skip = config.use_skip.then_some(width);
        let input = RsNetConv::new(&mut params, "input", n, 2, input_skip, f, k, decouple, rng)?;
        let blocks = (0..config.num_blocks)
            .map(|b| {
                ResidualBlock::new(
                    &mut params,
                    &format!("block{b}"),
                    n,
                    width,
                    skip,
                    k,
                    decouple,
                    config.block_design,
                    config.block_layout,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let nonlocal = config
            .use_nonlocal
            .then(|| NonLocal::new(&mut params, "nonlocal", n, width, rng));
        let head = RsNetConv::new(&mut params, "head", n, width, skip, 3, k, decouple, rng)?;
        let head_proj = params.add("head.projection", Tensor::zeros(3 * k, 3));
        let refinement = config
            .use_refinement
            .then(|| Refinement::new(&mut params, 3 * n, config.refinement_hidden, rng));
        Ok(Self {
            config,
            skeleton,
            params,
            a_hat,
            q,
            input,
            blocks,
            nonlocal,
            head,
            head_proj,
            refinement,
        })
    }

    pub fn num_joints(&self) -> usize {
        self.config.num_joints
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn normalized_adjacency(&self) -> &Tensor {
        &self.a_hat
    }

    /// Forward pass over a `(B·N) × 2` batch of normalized 2D poses.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: &Tensor,
        training: bool,
        rng: &mut R,
    ) -> Result<Forward> {
        let n = self.num_joints();
        if x.cols() != 2 || x.rows() == 0 || x.rows() % n != 0 {
            return Err(Error::InvalidArgument(format!(
                "input of shape {:?} is not a batch of {n}-joint 2D poses",
                x.shape()
            )));
        }
        let mut trace = Vec::new();
        let mut record =
            |name: &str, tape: &Tape, v: Var| trace.push((name.to_string(), tape.shape(v)));
        let mut dropout = DropoutCtx {
            rate: self.config.dropout_rate,
            training,
            rng,
        };
        let prop = Propagation::build(
            tape,
            &self.a_hat,
            Some(bound.var(self.q)),
            self.config.hops,
            self.config.decouple_self,
        )?;
        let xv = tape.constant(x.clone());
        record("input", tape, xv);
        let h = self
            .input
            .forward(tape, bound, &prop, xv, self.config.use_skip.then_some(xv))?;
        let mut h = dropout.apply(tape, h)?;
        record("input_conv", tape, h);
        let x0 = self.config.use_skip.then_some(h);
        for (b, block) in self.blocks.iter().enumerate() {
            h = block.forward(tape, bound, &prop, h, x0, &mut dropout)?;
            record(&format!("block{b}"), tape, h);
        }
        if let Some(nl) = &self.nonlocal {
            h = nl.forward(tape, bound, h)?;
            record("nonlocal", tape, h);
        }
        let y = self.head.forward(tape, bound, &prop, h, x0)?;
        record("head_conv", tape, y);
        let y = tape.matmul(y, bound.var(self.head_proj))?;
        record("head", tape, y);
        let backbone = y;
        let output = match &self.refinement {
            Some(r) => {
                let out = r.forward(tape, bound, y, n)?;
                record("refine", tape, out);
                out
            }
            None => y,
        };
        Ok(Forward {
            output,
            backbone,
            trace,
        })
    }

    /// Evaluation-mode prediction in millimeters for a `(B·N) × 2` batch.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fwd = self.forward(&mut tape, &bound, x, false, &mut rng)?;
        Ok(tape.value(fwd.output).scale(self.config.target_scale))
    }

    /// Intermediate shapes of an evaluation-mode pass on `batch` zero poses.
    pub fn shape_trace(&self, batch: usize) -> Result<Vec<(String, (usize, usize))>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::zeros(batch * self.num_joints(), 2);
        Ok(self.forward(&mut tape, &bound, &x, false, &mut rng)?.trace)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config: CheckpointConfig {
                model: self.config.clone(),
                skeleton: self.skeleton.clone(),
            },
            tensors: self
                .params
                .iter()
                .map(|(name, t)| {
                    (
                        name.to_string(),
                        StoredTensor {
                            shape: [t.rows(), t.cols()],
                            data: t.as_slice().to_vec(),
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::InvalidArgument(format!(
                "unsupported checkpoint version {}",
                ckpt.version
            )));
        }
        let mut model = Self::new(ckpt.config.model.clone(), ckpt.config.skeleton.clone(), 0)?;
        for (name, _) in model.params.iter() {
            if !ckpt.tensors.contains_key(name) {
                return Err(Error::InvalidArgument(format!(
                    "checkpoint lacks tensor {name}"
                )));
            }
        }
        for (name, stored) in &ckpt.tensors {
            let [r, c] = stored.shape;
            let expected = model
                .params
                .id(name)
                .map(|id| model.params.get(id).shape())
                .ok_or_else(|| {
                    Error::InvalidArgument(format!("checkpoint has unknown tensor {name}"))
                })?;
            if expected != (r, c) {
                return Err(Error::Shape {
                    op: "load_checkpoint",
                    lhs: expected,
                    rhs: (r, c),
                });
            }
            model
                .params
                .set(name, Tensor::from_vec(r, c, stored.data.clone())?)?;
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string(&self.to_checkpoint())?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_checkpoint(&serde_json::from_str(&text)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredTensor {
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointConfig {
    pub model: ModelConfig,
    pub skeleton: SkeletonTopology,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: CheckpointConfig,
    pub tensors: BTreeMap<String, StoredTensor>,
}

/// End-to-end finite-difference check of the training loss with respect to
/// every parameter of a small randomized model (`F = 8`, 5-joint path).
pub fn model_gradcheck(seed: u64) -> Result<crate::autodiff::GradCheck> {
    use crate::autodiff::{gradcheck, randn};

    let skeleton = SkeletonTopology::path(5)?;
    let config = ModelConfig {
        num_joints: 5,
        filter_size: 8,
        num_blocks: 2,
        refinement_hidden: 6,
        ..ModelConfig::default()
    };
    let mut model = RsNet::new(config, skeleton, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    for t in model.params.tensors_mut() {
        *t = randn(t.rows(), t.cols(), &mut rng).scale(0.5);
    }
    let batch = 2;
    let x = randn(batch * 5, 2, &mut rng);
    let y = randn(batch * 5, 3, &mut rng);
    let dropout_seed = seed ^ 0xabc;
    gradcheck(model.params.tensors(), 1e-5, |tape, vars| {
        let bound = Bound::from_vars(vars.to_vec());
        let mut drng = ChaCha8Rng::seed_from_u64(dropout_seed);
        let fwd = model.forward(tape, &bound, &x, true, &mut drng)?;
        let target = tape.constant(y.clone());
        crate::training::pose_loss(tape, target, fwd.output, 0.1)
    })
}
