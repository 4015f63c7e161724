//! Dense multi-exit backbone and the reverse-mode engine underneath it.

mod tape;
mod tensor;

use std::collections::BTreeSet;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

pub use tape::{Gradients, Tape, Var};
pub use tensor::{argmax, Tensor};

pub(crate) use tape::{csa_value, softmax};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("tensor shape {shape:?} does not hold {len} values")]
    ShapeData { shape: Vec<usize>, len: usize },
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    Shape {
        context: String,
        expected: usize,
        found: usize,
    },
    #[error("depth {depth} out of range (available up to {max})")]
    DepthOutOfRange { depth: usize, max: usize },
    #[error("blocks are not contiguous: expected depth {expected}, found {found}")]
    NonContiguous { expected: usize, found: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("loss variable does not belong to this tape")]
    ForeignVar,
    #[error("loss must be a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("entropy of an empty logit vector")]
    EmptyLogits,
    #[error("gradient keys do not match parameters: {0}")]
    KeyMismatch(String),
    #[error("negative learning rate {0}")]
    NegativeRate(f64),
    #[error("invalid backbone template: {0}")]
    Template(String),
}

/// Nonlinearity applied after every backbone block. Heads are always linear.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, tape: &mut Tape, v: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(v),
            Activation::Identity => v,
        }
    }
}

/// Shared layer template every client prefix, exit head and server trunk is
/// cut from. Block depths are 1-based.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneTemplate {
    block_dims: Vec<(usize, usize)>,
    exit_set: BTreeSet<usize>,
    num_classes: usize,
    activation: Activation,
}

impl BackboneTemplate {
    pub fn new(
        block_dims: Vec<(usize, usize)>,
        exit_set: BTreeSet<usize>,
        num_classes: usize,
        activation: Activation,
    ) -> Result<Self, NnError> {
        if block_dims.len() < 2 {
            return Err(NnError::Template("need at least two blocks".into()));
        }
        if block_dims.iter().any(|&(i, o)| i == 0 || o == 0) {
            return Err(NnError::Template("zero-width block".into()));
        }
        for (k, pair) in block_dims.windows(2).enumerate() {
            if pair[0].1 != pair[1].0 {
                return Err(NnError::Template(format!(
                    "block {} outputs {} but block {} expects {}",
                    k + 1,
                    pair[0].1,
                    k + 2,
                    pair[1].0
                )));
            }
        }
        let depth = block_dims.len();
        if exit_set.is_empty() {
            return Err(NnError::Template("exit set is empty".into()));
        }
        if let Some(&bad) = exit_set.iter().find(|&&k| k == 0 || k >= depth) {
            return Err(NnError::Template(format!(
                "exit depth {bad} outside 1..={}",
                depth - 1
            )));
        }
        if num_classes < 2 {
            return Err(NnError::Template("need at least two classes".into()));
        }
        Ok(Self {
            block_dims,
            exit_set,
            num_classes,
            activation,
        })
    }

    /// `depth` blocks: `input_dim → hidden`, then `hidden → hidden`.
    pub fn uniform(
        input_dim: usize,
        hidden: usize,
        depth: usize,
        exit_set: BTreeSet<usize>,
        num_classes: usize,
    ) -> Result<Self, NnError> {
        let mut dims = vec![(input_dim, hidden)];
        dims.extend(std::iter::repeat_n(
            (hidden, hidden),
            depth.saturating_sub(1),
        ));
        Self::new(dims, exit_set, num_classes, Activation::Relu)
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    /// Total block count `D`.
    pub fn depth(&self) -> usize {
        self.block_dims.len()
    }

    pub fn block_dims(&self) -> &[(usize, usize)] {
        &self.block_dims
    }

    /// `(in, out)` of the block at 1-based `depth`.
    pub fn dims_at(&self, depth: usize) -> (usize, usize) {
        self.block_dims[depth - 1]
    }

    pub fn input_dim(&self) -> usize {
        self.block_dims[0].0
    }

    /// Width of the activation leaving block `depth` (`depth == 0` is the input).
    pub fn width_after(&self, depth: usize) -> usize {
        if depth == 0 {
            self.input_dim()
        } else {
            self.block_dims[depth - 1].1
        }
    }

    pub fn exit_set(&self) -> &BTreeSet<usize> {
        &self.exit_set
    }

    pub fn min_split(&self) -> usize {
        *self.exit_set.first().expect("non-empty exit set")
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    /// Randomly initialised blocks for depths `from..=to`.
    pub fn init_blocks<R: Rng>(&self, from: usize, to: usize, rng: &mut R) -> Vec<ParamBlock> {
        (from..=to)
            .map(|d| {
                let (i, o) = self.dims_at(d);
                ParamBlock::random(d, i, o, rng)
            })
            .collect()
    }

    /// Randomly initialised linear head reading the output of block `depth`.
    pub fn init_head<R: Rng>(&self, depth: usize, rng: &mut R) -> Head {
        Head::random(self.width_after(depth), self.num_classes, rng)
    }
}

fn he_normal<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let data = (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
    Tensor::matrix(fan_in, fan_out, data)
}

/// One backbone block: `act(x · W + b)` at a fixed template depth.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock {
    pub depth: usize,
    pub weights: Tensor,
    pub bias: Tensor,
}

impl ParamBlock {
    pub fn random<R: Rng>(depth: usize, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        Self {
            depth,
            weights: he_normal(in_dim, out_dim, rng),
            bias: Tensor::zeros(vec![out_dim]),
        }
    }

    pub fn identity(depth: usize, dim: usize) -> Self {
        Self {
            depth,
            weights: Tensor::identity(dim),
            bias: Tensor::zeros(vec![dim]),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.weights.rows(), self.weights.cols())
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundBlock {
        BoundBlock {
            depth: self.depth,
            weights: tape.leaf(self.weights.clone()),
            bias: tape.leaf(self.bias.clone()),
        }
    }
}

/// Linear classifier head mapping block output to class logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub weights: Tensor,
    pub bias: Tensor,
}

impl Head {
    pub fn random<R: Rng>(in_dim: usize, classes: usize, rng: &mut R) -> Self {
        let std = (1.0 / in_dim as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let data = (0..in_dim * classes).map(|_| normal.sample(rng)).collect();
        Self {
            weights: Tensor::matrix(in_dim, classes, data),
            bias: Tensor::zeros(vec![classes]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn classes(&self) -> usize {
        self.weights.cols()
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundHead {
        BoundHead {
            weights: tape.leaf(self.weights.clone()),
            bias: tape.leaf(self.bias.clone()),
        }
    }

    pub fn apply(&mut self, grad: &HeadGrad, lr: f64) {
        self.weights.axpy(-lr, &grad.weights);
        self.bias.axpy(-lr, &grad.bias);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundBlock {
    pub depth: usize,
    pub weights: Var,
    pub bias: Var,
}

impl BoundBlock {
    pub fn grad(&self, grads: &Gradients) -> BlockGrad {
        BlockGrad {
            depth: self.depth,
            weights: grads.wrt(self.weights),
            bias: grads.wrt(self.bias),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundHead {
    pub weights: Var,
    pub bias: Var,
}

impl BoundHead {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var, NnError> {
        let expected = tape.value(self.weights).rows();
        let found = tape.value(x).shape().last().copied().unwrap_or(0);
        if expected != found {
            return Err(NnError::Shape {
                context: "head input".into(),
                expected,
                found,
            });
        }
        tape.affine(x, self.weights, self.bias)
    }

    pub fn grad(&self, grads: &Gradients) -> HeadGrad {
        HeadGrad {
            weights: grads.wrt(self.weights),
            bias: grads.wrt(self.bias),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockGrad {
    pub depth: usize,
    pub weights: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrad {
    pub weights: Tensor,
    pub bias: Tensor,
}

impl HeadGrad {
    pub fn norm_sq(&self) -> f64 {
        self.weights.norm_sq() + self.bias.norm_sq()
    }
}

impl BlockGrad {
    pub fn norm_sq(&self) -> f64 {
        self.weights.norm_sq() + self.bias.norm_sq()
    }
}

/// Binds a contiguous block sequence onto `tape`.
pub fn bind_blocks(tape: &mut Tape, blocks: &[ParamBlock]) -> Vec<BoundBlock> {
    blocks.iter().map(|b| b.bind(tape)).collect()
}

/// Runs every bound block whose depth lies in `(after, upto]`, in order.
pub fn run_blocks(
    tape: &mut Tape,
    blocks: &[BoundBlock],
    x: Var,
    after: usize,
    upto: usize,
    activation: Activation,
) -> Result<Var, NnError> {
    let mut h = x;
    for block in blocks.iter().filter(|b| b.depth > after && b.depth <= upto) {
        let expected = tape.value(block.weights).rows();
        let found = tape.value(h).shape().last().copied().unwrap_or(0);
        if expected != found {
            return Err(NnError::Shape {
                context: format!("input of block {}", block.depth),
                expected,
                found,
            });
        }
        let z = tape.affine(h, block.weights, block.bias)?;
        h = activation.apply(tape, z);
    }
    Ok(h)
}

/// Executes blocks `1..=upto_depth` of a prefix on `x`.
pub fn forward_prefix(
    tape: &mut Tape,
    blocks: &[BoundBlock],
    x: Var,
    upto_depth: usize,
    activation: Activation,
) -> Result<Var, NnError> {
    for (i, b) in blocks.iter().enumerate() {
        if b.depth != i + 1 {
            return Err(NnError::NonContiguous {
                expected: i + 1,
                found: b.depth,
            });
        }
    }
    if upto_depth > blocks.len() {
        return Err(NnError::DepthOutOfRange {
            depth: upto_depth,
            max: blocks.len(),
        });
    }
    run_blocks(tape, blocks, x, 0, upto_depth, activation)
}

/// Value-only form of [`forward_prefix`] on a fresh tape.
pub fn prefix_output(
    blocks: &[ParamBlock],
    x: &Tensor,
    upto_depth: usize,
    activation: Activation,
) -> Result<Tensor, NnError> {
    let mut tape = Tape::new();
    let bound = bind_blocks(&mut tape, blocks);
    let xv = tape.leaf(x.clone());
    let out = forward_prefix(&mut tape, &bound, xv, upto_depth, activation)?;
    Ok(tape.value(out).clone())
}

/// Shannon entropy (nats) of `Softmax(logits)`, within `[0, ln C]`.
pub fn softmax_entropy(logits: &[f64]) -> Result<f64, NnError> {
    if logits.is_empty() {
        return Err(NnError::EmptyLogits);
    }
    let p = softmax(logits);
    let h: f64 = p.iter().filter(|&&q| q > 0.0).map(|&q| -q * q.ln()).sum();
    Ok(h.clamp(0.0, (logits.len() as f64).ln()))
}

/// `block -= lr * grad` for every block, matched by depth.
pub fn sgd_step(params: &mut [ParamBlock], grads: &[BlockGrad], lr: f64) -> Result<(), NnError> {
    if lr < 0.0 {
        return Err(NnError::NegativeRate(lr));
    }
    if params.len() != grads.len() {
        return Err(NnError::KeyMismatch(format!(
            "{} blocks vs {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.depth != g.depth
            || p.weights.shape() != g.weights.shape()
            || p.bias.shape() != g.bias.shape()
        {
            return Err(NnError::KeyMismatch(format!(
                "block depth {} vs gradient depth {}",
                p.depth, g.depth
            )));
        }
    }
    for (p, g) in params.iter_mut().zip(grads) {
        p.weights.axpy(-lr, &g.weights);
        p.bias.axpy(-lr, &g.bias);
    }
    Ok(())
}
