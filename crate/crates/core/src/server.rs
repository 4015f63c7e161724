//! The main server: back end `θ` with depth-matched entry, contrastive
//! alignment on the trunk and the server half of U-shaped task training.

use rand::Rng;
use thiserror::Error;

use crate::client::{OffloadTarget, QuantizedTensor, ViewPair};
use crate::nn::{
    self, csa_value, Activation, BackboneTemplate, BlockGrad, BoundBlock, BoundHead, Gradients,
    Head, HeadGrad, NnError, ParamBlock, Tape, Tensor, Var,
};

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("features entering at depth {depth} must have width {expected}, got {found}")]
    EntryShape {
        depth: usize,
        expected: usize,
        found: usize,
    },
    #[error("entry depth {depth} outside {min}..={max}")]
    EntryDepth {
        depth: usize,
        min: usize,
        max: usize,
    },
    #[error("task session is stale (server version {current}, session version {session})")]
    StaleSession { current: u64, session: u64 },
    #[error("indicator has {found} entries for {expected} pairs")]
    Indicator { expected: usize, found: usize },
    #[error("gamma {0} outside [0, 1]")]
    Gamma(f64),
    #[error("negative step size {0}")]
    NegativeRate(f64),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Back end `θ`: trunk blocks covering template depths `d_min+1..=D` plus
/// the final head.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub trunk: Vec<ParamBlock>,
    pub head: Head,
    pub activation: Activation,
    /// `m`.
    pub margin: f64,
    pub csa_weight: f64,
    pub csa_lr: f64,
    version: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerGrad {
    pub trunk: Vec<BlockGrad>,
    pub head: HeadGrad,
}

impl ServerGrad {
    pub fn norm_sq(&self) -> f64 {
        self.trunk.iter().map(BlockGrad::norm_sq).sum::<f64>() + self.head.norm_sq()
    }
}

#[derive(Debug, Clone)]
pub struct BoundServer {
    pub trunk: Vec<BoundBlock>,
    pub head: BoundHead,
}

impl BoundServer {
    pub fn grad(&self, grads: &Gradients) -> ServerGrad {
        ServerGrad {
            trunk: self.trunk.iter().map(|b| b.grad(grads)).collect(),
            head: self.head.grad(grads),
        }
    }
}

impl ServerState {
    pub fn init<R: Rng>(
        template: &BackboneTemplate,
        margin: f64,
        csa_weight: f64,
        csa_lr: f64,
        rng: &mut R,
    ) -> Self {
        let first = template.min_split() + 1;
        Self {
            trunk: template.init_blocks(first, template.depth(), rng),
            head: template.init_head(template.depth(), rng),
            activation: template.activation(),
            margin,
            csa_weight,
            csa_lr,
            version: 0,
        }
    }

    pub fn from_parts(
        trunk: Vec<ParamBlock>,
        head: Head,
        activation: Activation,
        margin: f64,
    ) -> Self {
        Self {
            trunk,
            head,
            activation,
            margin,
            csa_weight: 1.0,
            csa_lr: 0.0,
            version: 0,
        }
    }

    /// Mutation counter; sessions opened at an older version are stale.
    pub fn version(&self) -> u64 {
        self.version
    }

    /// Smallest depth whose output may enter the trunk (`d_min`).
    pub fn min_entry(&self) -> usize {
        self.trunk.first().map(|b| b.depth - 1).unwrap_or(0)
    }

    /// Template depth `D` of the last trunk block.
    pub fn max_depth(&self) -> usize {
        self.trunk.last().map(|b| b.depth).unwrap_or(0)
    }

    pub fn param_count(&self) -> usize {
        self.trunk
            .iter()
            .map(ParamBlock::param_count)
            .sum::<usize>()
            + self.head.param_count()
    }

    /// Deep, independent copies `θ_n^{r,0}` for each participant.
    pub fn duplicate(&self, participants: &[usize]) -> Vec<ServerState> {
        participants.iter().map(|_| self.clone()).collect()
    }

    /// Replaces trunk and head, as after aggregation.
    pub fn set_params(&mut self, trunk: Vec<ParamBlock>, head: Head) {
        self.trunk = trunk;
        self.head = head;
        self.version += 1;
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundServer {
        BoundServer {
            trunk: nn::bind_blocks(tape, &self.trunk),
            head: self.head.bind(tape),
        }
    }

    pub fn apply(&mut self, grad: &ServerGrad, lr: f64) -> Result<(), NnError> {
        nn::sgd_step(&mut self.trunk, &grad.trunk, lr)?;
        self.head.apply(&grad.head, lr);
        self.version += 1;
        Ok(())
    }

    fn entry_width(&self, depth: usize) -> usize {
        match self.trunk.iter().find(|b| b.depth == depth + 1) {
            Some(b) => b.weights.rows(),
            None => self.head.in_dim(),
        }
    }

    fn check_entry(&self, z: &Tensor, depth: usize) -> Result<(), ServerError> {
        let (min, max) = (self.min_entry(), self.max_depth());
        if depth < min || depth > max {
            return Err(ServerError::EntryDepth { depth, min, max });
        }
        let expected = self.entry_width(depth);
        let found = z.shape().last().copied().unwrap_or(0);
        if z.shape().len() != 2 || expected != found {
            return Err(ServerError::EntryShape {
                depth,
                expected,
                found,
            });
        }
        Ok(())
    }

    /// Records `θ_{K+1:-1}(z)` on `tape`: every trunk block deeper than `depth`.
    pub fn suffix_on_tape(
        &self,
        tape: &mut Tape,
        trunk: &[BoundBlock],
        z: Var,
        depth: usize,
    ) -> Result<Var, ServerError> {
        self.check_entry(tape.value(z), depth)?;
        Ok(nn::run_blocks(
            tape,
            trunk,
            z,
            depth,
            usize::MAX,
            self.activation,
        )?)
    }

    /// Pre-head embedding `z_S` for features cut at template depth `depth`.
    pub fn depth_matched_forward(&self, z: &Tensor, depth: usize) -> Result<Tensor, ServerError> {
        let mut tape = Tape::new();
        let trunk = nn::bind_blocks(&mut tape, &self.trunk);
        let zv = tape.leaf(z.clone());
        let out = self.suffix_on_tape(&mut tape, &trunk, zv, depth)?;
        Ok(tape.value(out).clone())
    }

    /// Class logits `θ_head(θ_{K+1:-1}(z))`.
    pub fn logits(&self, z: &Tensor, depth: usize) -> Result<Tensor, ServerError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let zv = tape.leaf(z.clone());
        let s = self.suffix_on_tape(&mut tape, &bound.trunk, zv, depth)?;
        let u = bound.head.forward(&mut tape, s)?;
        Ok(tape.value(u).clone())
    }

    /// One contrastive alignment step on the trunk. Both feature views enter
    /// behind stop points, the head is never bound, and nothing flows back
    /// to the client. Returns the weighted loss before the step.
    pub fn csa_update(&mut self, views: &ViewPair) -> Result<f64, ServerError> {
        let pairs = views.z_dagger.shape().first().copied().unwrap_or(0);
        if views.indicator.len() != pairs {
            return Err(ServerError::Indicator {
                expected: pairs,
                found: views.indicator.len(),
            });
        }
        let mut tape = Tape::new();
        let trunk = nn::bind_blocks(&mut tape, &self.trunk);
        let a_in = tape.leaf(views.z_dagger.clone());
        let a_in = tape.stop_gradient(a_in);
        let b_in = tape.leaf(views.z_ddagger.clone());
        let b_in = tape.stop_gradient(b_in);
        let za = self.suffix_on_tape(&mut tape, &trunk, a_in, views.exit_depth)?;
        let zb = self.suffix_on_tape(&mut tape, &trunk, b_in, views.split_depth)?;
        let loss = tape.csa(za, zb, &views.indicator, self.margin)?;
        let weighted = tape.scale(loss, self.csa_weight);
        let grads = tape.backward(weighted)?;
        let trunk_grads: Vec<BlockGrad> = trunk.iter().map(|b| b.grad(&grads)).collect();
        nn::sgd_step(&mut self.trunk, &trunk_grads, self.csa_lr)?;
        self.version += 1;
        Ok(tape.value(weighted).item())
    }

    /// Server forward of the U-shaped exchange. The returned session must be
    /// handed back to [`ServerState::apply_upstream_grad`].
    pub fn u_shaped_task_forward(
        &self,
        z: &Tensor,
        split_depth: usize,
    ) -> Result<(Tensor, TaskSession), ServerError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let zv = tape.leaf(z.clone());
        let s = self.suffix_on_tape(&mut tape, &bound.trunk, zv, split_depth)?;
        let u = bound.head.forward(&mut tape, s)?;
        let logits = tape.value(u).clone();
        Ok((
            logits,
            TaskSession {
                tape,
                bound,
                input: zv,
                logits: u,
                version: self.version,
            },
        ))
    }

    /// Backpropagates `(1−γ)·g_u`, applies an SGD step of size `β` to the
    /// trunk and head, and returns the gradient at the cut.
    pub fn apply_upstream_grad(
        &mut self,
        session: TaskSession,
        upstream: &Tensor,
        outer_lr: f64,
        gamma: f64,
    ) -> Result<Tensor, ServerError> {
        if !(0.0..=1.0).contains(&gamma) {
            return Err(ServerError::Gamma(gamma));
        }
        if outer_lr < 0.0 {
            return Err(ServerError::NegativeRate(outer_lr));
        }
        if session.version != self.version {
            return Err(ServerError::StaleSession {
                current: self.version,
                session: session.version,
            });
        }
        let seed = upstream.scale(1.0 - gamma);
        let grads = session.tape.backward_seeded(&[(session.logits, seed)])?;
        let grad = session.bound.grad(&grads);
        self.apply(&grad, outer_lr)?;
        Ok(grads.wrt(session.input))
    }
}

/// Server-side tape retained between the task forward and the upstream
/// gradient.
#[derive(Debug)]
pub struct TaskSession {
    tape: Tape,
    bound: BoundServer,
    input: Var,
    logits: Var,
    version: u64,
}

/// Mean contrastive alignment loss for a batch of embedding pairs.
pub fn csa_loss(
    z_dagger: &Tensor,
    z_ddagger: &Tensor,
    indicator: &[bool],
    margin: f64,
) -> Result<f64, ServerError> {
    if z_dagger.shape() != z_ddagger.shape() || z_dagger.shape().len() != 2 {
        return Err(ServerError::Nn(NnError::Shape {
            context: "csa pair".into(),
            expected: z_dagger.len(),
            found: z_ddagger.len(),
        }));
    }
    if indicator.len() != z_dagger.rows() {
        return Err(ServerError::Indicator {
            expected: z_dagger.rows(),
            found: indicator.len(),
        });
    }
    Ok(csa_value(z_dagger, z_ddagger, indicator, margin))
}

impl OffloadTarget for ServerState {
    fn classify(
        &mut self,
        _client: usize,
        features: QuantizedTensor,
        depth: usize,
    ) -> Result<Tensor, String> {
        self.logits(&features.dequantize(), depth)
            .map_err(|e| e.to_string())
    }
}
