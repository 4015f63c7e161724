//! A simulated client: prefix `φ_n`, exit head `h_n`, entropy threshold
//! `e_n`, and the local half of every training and inference exchange.
//!
//! One local step looks like this from the client's side:
//!
//! 1. [`make_views`] adapts two temporary copies of the model, one on each of
//!    two mini-batches, and evaluates them cross-batch to produce the feature
//!    pair `(z†, z‡)` plus the pairwise label-match indicator.
//! 2. The features leave the device quantized; the server returns task
//!    logits for `z‡`.
//! 3. [`OuterContext::server_task_loss`] scores those logits against the
//!    private labels and produces the upstream gradient sent back.
//! 4. [`outer_update`] combines the on-device loss with the cut gradient
//!    returned by the server and applies the first-order meta-gradient to the
//!    pre-adaptation parameters.

mod quantize;

use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use thiserror::Error;

use crate::data::{Batch, Dataset, Shard};
use crate::nn::{
    self, argmax, softmax_entropy, Activation, BackboneTemplate, BlockGrad, BoundBlock, BoundHead,
    Gradients, Head, HeadGrad, NnError, ParamBlock, Tape, Tensor, Var,
};

pub use quantize::{quantize, QuantizeError, QuantizedTensor, MAX_BITS};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("batch sizes differ: {0} vs {1}")]
    BatchMismatch(usize, usize),
    #[error("exit depth {depth} not among candidates {candidates:?}")]
    ExitDepth {
        depth: usize,
        candidates: Vec<usize>,
    },
    #[error("client {client} has no valid exit depth at or below split depth {split}")]
    NoExitCandidates { client: usize, split: usize },
    #[error("gamma {0} outside [0, 1]")]
    Gamma(f64),
    #[error("negative step size {0}")]
    NegativeRate(f64),
    #[error("outer context belongs to client {found}, not {expected}")]
    ForeignContext { expected: usize, found: usize },
    #[error("server unreachable")]
    ServerUnreachable,
    #[error("client {client} has an empty shard")]
    EmptyShard { client: usize },
    #[error("offload failed: {0}")]
    Offload(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Quantize(#[from] QuantizeError),
}

/// Client-side parameters `(φ_n, h_n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientModel {
    pub prefix: Vec<ParamBlock>,
    pub head: Head,
    pub activation: Activation,
}

#[derive(Debug, Clone)]
pub struct BoundModel {
    pub prefix: Vec<BoundBlock>,
    pub head: BoundHead,
}

impl BoundModel {
    pub fn grad(&self, grads: &Gradients) -> ModelGrad {
        ModelGrad {
            prefix: self.prefix.iter().map(|b| b.grad(grads)).collect(),
            head: self.head.grad(grads),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrad {
    pub prefix: Vec<BlockGrad>,
    pub head: HeadGrad,
}

impl ModelGrad {
    pub fn norm_sq(&self) -> f64 {
        self.prefix.iter().map(BlockGrad::norm_sq).sum::<f64>() + self.head.norm_sq()
    }
}

impl ClientModel {
    pub fn init<R: Rng>(template: &BackboneTemplate, split_depth: usize, rng: &mut R) -> Self {
        Self {
            prefix: template.init_blocks(1, split_depth, rng),
            head: template.init_head(split_depth, rng),
            activation: template.activation(),
        }
    }

    pub fn split_depth(&self) -> usize {
        self.prefix.len()
    }

    pub fn param_count(&self) -> usize {
        self.prefix
            .iter()
            .map(ParamBlock::param_count)
            .sum::<usize>()
            + self.head.param_count()
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        BoundModel {
            prefix: nn::bind_blocks(tape, &self.prefix),
            head: self.head.bind(tape),
        }
    }

    /// `φ_{:depth}(x)`.
    pub fn features(&self, x: &Tensor, depth: usize) -> Result<Tensor, NnError> {
        nn::prefix_output(&self.prefix, x, depth, self.activation)
    }

    /// `(h ∘ φ)(x)`.
    pub fn local_logits(&self, x: &Tensor) -> Result<Tensor, NnError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let z = nn::forward_prefix(
            &mut tape,
            &bound.prefix,
            xv,
            self.split_depth(),
            self.activation,
        )?;
        let logits = bound.head.forward(&mut tape, z)?;
        Ok(tape.value(logits).clone())
    }

    /// On-device loss `ℓ_C` and its gradient.
    pub fn local_loss_grad(&self, batch: &Batch) -> Result<(f64, ModelGrad), NnError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let xv = tape.leaf(batch.x.clone());
        let z = nn::forward_prefix(
            &mut tape,
            &bound.prefix,
            xv,
            self.split_depth(),
            self.activation,
        )?;
        let logits = bound.head.forward(&mut tape, z)?;
        let loss = tape.cross_entropy(logits, &batch.y)?;
        let grads = tape.backward(loss)?;
        Ok((tape.value(loss).item(), bound.grad(&grads)))
    }

    pub fn apply(&mut self, grad: &ModelGrad, lr: f64) -> Result<(), NnError> {
        nn::sgd_step(&mut self.prefix, &grad.prefix, lr)?;
        self.head.apply(&grad.head, lr);
        Ok(())
    }

    pub fn accuracy(&self, ds: &Dataset, rows: &[usize]) -> Result<f64, NnError> {
        if rows.is_empty() {
            return Ok(0.0);
        }
        let batch = ds.batch(rows);
        let predictions = self.local_logits(&batch.x)?.argmax_rows();
        let hits = predictions
            .iter()
            .zip(&batch.y)
            .filter(|(p, y)| p == y)
            .count();
        Ok(hits as f64 / rows.len() as f64)
    }
}

/// Inner-loop settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptConfig {
    /// `α`.
    pub inner_lr: f64,
    /// `S`.
    pub inner_steps: usize,
    pub batch_size: usize,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            inner_lr: 0.05,
            inner_steps: 1,
            batch_size: 32,
        }
    }
}

impl AdaptConfig {
    /// Caps `α` at `k / L` (`k = 1`) given a smoothness estimate.
    pub fn capped_by_smoothness(mut self, smoothness: f64) -> Self {
        if smoothness > 0.0 && smoothness.is_finite() {
            self.inner_lr = self.inner_lr.min(1.0 / smoothness);
        }
        self
    }
}

/// `S` SGD steps on `ℓ_C` over `batch`, returning a new model.
pub fn adapt(
    model: &ClientModel,
    batch: &Batch,
    cfg: &AdaptConfig,
) -> Result<ClientModel, ClientError> {
    if batch.is_empty() {
        return Err(ClientError::EmptyBatch);
    }
    if cfg.inner_lr < 0.0 {
        return Err(ClientError::NegativeRate(cfg.inner_lr));
    }
    let mut adapted = model.clone();
    for _ in 0..cfg.inner_steps {
        let (_, grad) = adapted.local_loss_grad(batch)?;
        adapted.apply(&grad, cfg.inner_lr)?;
    }
    Ok(adapted)
}

/// One simulated client.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub model: ClientModel,
    /// `e_n`.
    pub entropy_threshold: f64,
    pub shard: Shard,
    pub train_rows: Vec<usize>,
    pub holdout_rows: Vec<usize>,
    exit_candidates: Vec<usize>,
}

impl ClientState {
    pub fn new(
        id: usize,
        model: ClientModel,
        exit_set: &BTreeSet<usize>,
        entropy_threshold: f64,
        shard: Shard,
        train_rows: Vec<usize>,
        holdout_rows: Vec<usize>,
    ) -> Result<Self, ClientError> {
        let split = model.split_depth();
        if !exit_set.contains(&split) {
            return Err(ClientError::ExitDepth {
                depth: split,
                candidates: exit_set.iter().copied().collect(),
            });
        }
        let exit_candidates = exit_set.iter().copied().filter(|&k| k <= split).collect();
        Ok(Self {
            id,
            model,
            entropy_threshold,
            shard,
            train_rows,
            holdout_rows,
            exit_candidates,
        })
    }

    /// `n(φ)`.
    pub fn split_depth(&self) -> usize {
        self.model.split_depth()
    }

    /// `exit_set ∩ {1..n(φ)}`.
    pub fn exit_candidates(&self) -> &[usize] {
        &self.exit_candidates
    }

    /// Draws `K` uniformly from the exit candidates.
    pub fn sample_exit_depth<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<usize, ClientError> {
        sample_exit_depth(&self.exit_candidates, rng).ok_or(ClientError::NoExitCandidates {
            client: self.id,
            split: self.split_depth(),
        })
    }

    /// Two equal-size mini-batches drawn independently from the training rows.
    pub fn sample_batches<R: Rng + ?Sized>(
        &self,
        ds: &Dataset,
        batch_size: usize,
        rng: &mut R,
    ) -> (Batch, Batch) {
        let size = batch_size.min(self.train_rows.len()).max(1);
        let b1: Vec<usize> = self
            .train_rows
            .choose_multiple(rng, size)
            .copied()
            .collect();
        let b2: Vec<usize> = self
            .train_rows
            .choose_multiple(rng, size)
            .copied()
            .collect();
        (ds.batch(&b1), ds.batch(&b2))
    }
}

pub fn sample_exit_depth<R: Rng + ?Sized>(candidates: &[usize], rng: &mut R) -> Option<usize> {
    candidates.choose(rng).copied()
}

/// Features leaving the client for one local step.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewPair {
    /// Branch † output at depth `K`: adapted on `B1`, evaluated on `x₂`.
    pub z_dagger: Tensor,
    /// Branch ‡ output at depth `n(φ)`: adapted on `B2`, evaluated on `x₁`.
    pub z_ddagger: Tensor,
    pub exit_depth: usize,
    pub split_depth: usize,
    /// `indicator[i] = (y₁[i] == y₂[i])`.
    pub indicator: Vec<bool>,
}

/// Client-private state kept between sending the views and receiving the
/// cut gradient: the branch ‡ tape, its bound adapted parameters and the
/// labels of `x₁`.
#[derive(Debug)]
pub struct OuterContext {
    client: usize,
    tape: Tape,
    bound: BoundModel,
    z: Var,
    loss_c: Var,
    labels: Vec<usize>,
}

impl OuterContext {
    pub fn local_loss(&self) -> f64 {
        self.tape.value(self.loss_c).item()
    }

    /// Scores server logits against the private labels of `x₁`, returning
    /// `ℓ_S` and `∂ℓ_S/∂u`.
    pub fn server_task_loss(&self, logits: &Tensor) -> Result<(f64, Tensor), NnError> {
        task_loss_and_grad(logits, &self.labels)
    }
}

/// Mean cross-entropy of `logits` and its gradient with respect to them.
pub fn task_loss_and_grad(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor), NnError> {
    let mut tape = Tape::new();
    let u = tape.leaf(logits.clone());
    let loss = tape.cross_entropy(u, labels)?;
    let grads = tape.backward(loss)?;
    Ok((tape.value(loss).item(), grads.wrt(u)))
}

/// Two-branch cross-batch adaptation producing the view pair for one step.
pub fn make_views(
    state: &ClientState,
    b1: &Batch,
    b2: &Batch,
    exit_depth: usize,
    cfg: &AdaptConfig,
) -> Result<(ViewPair, OuterContext), ClientError> {
    if b1.is_empty() || b2.is_empty() {
        return Err(ClientError::EmptyBatch);
    }
    if b1.len() != b2.len() {
        return Err(ClientError::BatchMismatch(b1.len(), b2.len()));
    }
    if !state.exit_candidates.contains(&exit_depth) {
        return Err(ClientError::ExitDepth {
            depth: exit_depth,
            candidates: state.exit_candidates.clone(),
        });
    }
    let dagger = adapt(&state.model, b1, cfg)?;
    let ddagger = adapt(&state.model, b2, cfg)?;

    let z_dagger = dagger.features(&b2.x, exit_depth)?;

    let split = state.split_depth();
    let mut tape = Tape::new();
    let bound = ddagger.bind(&mut tape);
    let x1 = tape.leaf(b1.x.clone());
    let z = nn::forward_prefix(&mut tape, &bound.prefix, x1, split, ddagger.activation)?;
    let logits = bound.head.forward(&mut tape, z)?;
    let loss_c = tape.cross_entropy(logits, &b1.y)?;

    let indicator = b1.y.iter().zip(&b2.y).map(|(a, b)| a == b).collect();
    let views = ViewPair {
        z_dagger,
        z_ddagger: tape.value(z).clone(),
        exit_depth,
        split_depth: split,
        indicator,
    };
    let ctx = OuterContext {
        client: state.id,
        tape,
        bound,
        z,
        loss_c,
        labels: b1.y.clone(),
    };
    Ok((views, ctx))
}

/// First-order meta-update: the gradient of `γ·ℓ_C + (1−γ)·ℓ_S` taken at the
/// adapted branch ‡ parameters is applied with step `β` to the
/// pre-adaptation model. `cut_grad` is the server's gradient at `z‡`, already
/// weighted by `(1−γ)`. The context, and with it the adapted parameters, is
/// consumed.
pub fn outer_update(
    state: &mut ClientState,
    ctx: OuterContext,
    cut_grad: &Tensor,
    outer_lr: f64,
    gamma: f64,
) -> Result<ModelGrad, ClientError> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(ClientError::Gamma(gamma));
    }
    if outer_lr < 0.0 {
        return Err(ClientError::NegativeRate(outer_lr));
    }
    if ctx.client != state.id {
        return Err(ClientError::ForeignContext {
            expected: state.id,
            found: ctx.client,
        });
    }
    let seeds = [
        (ctx.loss_c, Tensor::scalar(gamma)),
        (ctx.z, cut_grad.clone()),
    ];
    let grads = ctx.tape.backward_seeded(&seeds)?;
    let grad = ctx.bound.grad(&grads);
    state.model.apply(&grad, outer_lr)?;
    Ok(grad)
}

/// Where an inference was answered.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Route {
    Local,
    Offload,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub prediction: usize,
    pub route: Route,
    pub entropy: f64,
}

/// Something that can classify quantized client features entering the
/// server at a given template depth.
pub trait OffloadTarget {
    fn classify(
        &mut self,
        client: usize,
        features: QuantizedTensor,
        depth: usize,
    ) -> Result<Tensor, String>;
}

/// Entropy-gated inference on a single sample: answer locally when the
/// local softmax entropy is strictly below `e_n`, otherwise offload the
/// quantized `φ_n(x)`.
pub fn infer<R: Rng + ?Sized>(
    state: &ClientState,
    server: Option<&mut dyn OffloadTarget>,
    x: &[f64],
    bits: u32,
    rng: &mut R,
) -> Result<Inference, ClientError> {
    let xt = Tensor::matrix(1, x.len(), x.to_vec());
    let logits = state.model.local_logits(&xt)?;
    let entropy = softmax_entropy(logits.data())?;
    if entropy < state.entropy_threshold {
        return Ok(Inference {
            prediction: argmax(logits.data()),
            route: Route::Local,
            entropy,
        });
    }
    let server = server.ok_or(ClientError::ServerUnreachable)?;
    let prediction = offload(state, server, x, state.split_depth(), bits, rng)?;
    Ok(Inference {
        prediction,
        route: Route::Offload,
        entropy,
    })
}

/// Server-route prediction for `x` with features cut at `depth`.
pub fn offload<R: Rng + ?Sized>(
    state: &ClientState,
    server: &mut dyn OffloadTarget,
    x: &[f64],
    depth: usize,
    bits: u32,
    rng: &mut R,
) -> Result<usize, ClientError> {
    if depth == 0 || depth > state.split_depth() {
        return Err(ClientError::ExitDepth {
            depth,
            candidates: state.exit_candidates.clone(),
        });
    }
    let xt = Tensor::matrix(1, x.len(), x.to_vec());
    let z = state.model.features(&xt, depth)?;
    let q = quantize(&z, bits, rng)?;
    let logits = server
        .classify(state.id, q, depth)
        .map_err(ClientError::Offload)?;
    Ok(argmax(logits.data()))
}

/// Replaces the client model with `global` adapted over the full training
/// shard for `steps` mini-batch SGD steps on `ℓ_C`.
pub fn personalize<R: Rng + ?Sized>(
    state: &mut ClientState,
    global: &ClientModel,
    ds: &Dataset,
    cfg: &AdaptConfig,
    steps: usize,
    rng: &mut R,
) -> Result<(), ClientError> {
    if state.train_rows.is_empty() {
        return Err(ClientError::EmptyShard { client: state.id });
    }
    let mut model = global.clone();
    let size = cfg.batch_size.clamp(1, state.train_rows.len());
    let mut order = state.train_rows.clone();
    let mut cursor = order.len();
    for _ in 0..steps {
        if cursor + size > order.len() {
            order.shuffle(rng);
            cursor = 0;
        }
        let batch = ds.batch(&order[cursor..cursor + size]);
        cursor += size;
        let (_, grad) = model.local_loss_grad(&batch)?;
        model.apply(&grad, cfg.inner_lr)?;
    }
    state.model = model;
    Ok(())
}

#[cfg(test)]
mod tests;
