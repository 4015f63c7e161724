//! The fed server and the round orchestrator.
//!
//! Each round samples participants, hands every participant an independent
//! duplicate of the server back end, runs the participant's local steps as
//! one task on a worker pool, and aggregates once every task has finished.
//! All randomness is drawn from streams keyed by entity, round and step, so
//! results do not depend on the number of workers or on task timing.

pub mod aggregate;
pub mod checkpoint;
pub mod experiment;
pub mod probe;

use std::time::Duration;

use rand::seq::index;
use rayon::prelude::*;
use thiserror::Error;

use crate::client::{
    make_views, outer_update, quantize, AdaptConfig, ClientError, ClientModel, ClientState,
    QuantizeError, ViewPair,
};
use crate::data::{DataError, Dataset, Shard};
use crate::nn::{BackboneTemplate, NnError};
use crate::protocol::{
    MessageKind, ModelPayload, PairIndicator, Payload, ProtocolError, Wire, WireMessage,
};
use crate::rng::{stream, Purpose};
use crate::server::{ServerError, ServerState};

pub use aggregate::{aggregate_clients, aggregate_server};
pub use experiment::{run_experiment, simulate, ExperimentReport, RoundMetrics};
pub use probe::{estimate_global_grad_norm, ProbeResult};

/// Entity id of the main server in random streams and checkpoints.
pub const SERVER_ENTITY: u64 = u32::MAX as u64;

#[derive(Debug, Error)]
pub enum StepFailure {
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Server(#[from] ServerError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Quantize(#[from] QuantizeError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("unexpected {0:?} message")]
    Unexpected(MessageKind),
}

#[derive(Debug, Error)]
pub enum CoordError {
    #[error("invalid `{key}`: {reason}")]
    Param { key: &'static str, reason: String },
    #[error("client {client}, round {round}, step {step}: {source}")]
    Step {
        client: usize,
        round: usize,
        step: usize,
        #[source]
        source: StepFailure,
    },
    #[error("aggregation: {0}")]
    Aggregation(String),
    #[error("client {client}: {source}")]
    Client {
        client: usize,
        #[source]
        source: ClientError,
    },
    #[error("round {round}: {source}")]
    Protocol {
        round: usize,
        #[source]
        source: ProtocolError,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Server(#[from] ServerError),
    #[error("worker pool: {0}")]
    Pool(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct HyperParams {
    pub rounds: usize,
    /// `T_n`, one entry per client or a single shared value.
    pub local_steps: Vec<usize>,
    /// `ρ`.
    pub participation: f64,
    /// `γ`.
    pub gamma: f64,
    /// `λ`.
    pub lambda: f64,
    /// `α`.
    pub inner_lr: f64,
    /// `β`.
    pub outer_lr: f64,
    /// `S`.
    pub inner_steps: usize,
    pub batch_size: usize,
    /// `m`.
    pub margin: f64,
    /// `b`.
    pub bits: u32,
    pub csa_weight: f64,
    pub csa_lr: f64,
    /// Sample `K` per step; when false `K` is the split depth.
    pub stochastic_exit: bool,
    pub seed: u64,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            rounds: 1,
            local_steps: vec![1],
            participation: 1.0,
            gamma: 0.5,
            lambda: 0.0,
            inner_lr: 0.05,
            outer_lr: 0.05,
            inner_steps: 1,
            batch_size: 32,
            margin: 1.0,
            bits: 8,
            csa_weight: 1.0,
            csa_lr: 0.05,
            stochastic_exit: true,
            seed: 0,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<(), CoordError> {
        let bad = |key, reason: String| Err(CoordError::Param { key, reason });
        if self.rounds == 0 {
            return bad("rounds", "must be at least 1".into());
        }
        if self.local_steps.is_empty() {
            return bad("local_steps", "no values".into());
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return bad(
                "participation",
                format!("{} outside (0, 1]", self.participation),
            );
        }
        for (key, v) in [("gamma", self.gamma), ("lambda", self.lambda)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(key, format!("{v} outside [0, 1]"));
            }
        }
        for (key, v) in [
            ("inner_lr", self.inner_lr),
            ("outer_lr", self.outer_lr),
            ("margin", self.margin),
            ("csa_weight", self.csa_weight),
            ("csa_lr", self.csa_lr),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(key, format!("{v} must be finite and non-negative"));
            }
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1".into());
        }
        if self.bits == 0 || self.bits > crate::client::MAX_BITS {
            return bad(
                "bits",
                format!("{} outside 1..={}", self.bits, crate::client::MAX_BITS),
            );
        }
        Ok(())
    }

    pub fn steps_for(&self, client: usize) -> usize {
        if self.local_steps.len() == 1 {
            self.local_steps[0]
        } else {
            self.local_steps.get(client).copied().unwrap_or(0)
        }
    }

    pub fn adapt_config(&self) -> AdaptConfig {
        AdaptConfig {
            inner_lr: self.inner_lr,
            inner_steps: self.inner_steps,
            batch_size: self.batch_size,
        }
    }
}

/// `⌈ρN⌉` distinct clients drawn uniformly, sorted, fixed by `(seed, round)`.
pub fn select_participants(
    clients: usize,
    participation: f64,
    round: usize,
    seed: u64,
) -> Vec<usize> {
    let k = ((participation * clients as f64 - 1e-9).ceil() as usize).clamp(1, clients.max(1));
    if k >= clients {
        return (0..clients).collect();
    }
    let mut rng = stream(seed, Purpose::Participants, SERVER_ENTITY, round as u64, 0);
    let mut chosen = index::sample(&mut rng, clients, k).into_vec();
    chosen.sort_unstable();
    chosen
}

/// Everything the simulation mutates: `v = ({φ_n, h_n}, θ)` plus data.
#[derive(Debug, Clone)]
pub struct SimState {
    pub template: BackboneTemplate,
    pub dataset: Dataset,
    pub clients: Vec<ClientState>,
    pub server: ServerState,
    /// `ζ_n`.
    pub zeta: Vec<f64>,
}

impl SimState {
    /// Clients sharing a split depth start from identical parameters: one
    /// prefix and one head per exit depth are drawn and then truncated.
    pub fn new(
        template: BackboneTemplate,
        dataset: Dataset,
        shards: Vec<Shard>,
        splits: &[usize],
        thresholds: &[f64],
        holdout: f64,
        hp: &HyperParams,
    ) -> Result<Self, CoordError> {
        if shards.len() != splits.len() || shards.len() != thresholds.len() {
            return Err(CoordError::Param {
                key: "split_depths",
                reason: format!(
                    "{} shards, {} split depths, {} thresholds",
                    shards.len(),
                    splits.len(),
                    thresholds.len()
                ),
            });
        }
        let deepest = splits.iter().copied().max().unwrap_or(0);
        let mut rng = stream(hp.seed, Purpose::Init, 0, 0, 0);
        let blocks = template.init_blocks(1, deepest, &mut rng);
        let heads: Vec<_> = template
            .exit_set()
            .iter()
            .map(|&e| (e, template.init_head(e, &mut rng)))
            .collect();
        let zeta = shards.iter().map(|s| s.weight).collect();
        let mut clients = Vec::with_capacity(shards.len());
        for (n, shard) in shards.into_iter().enumerate() {
            let split = splits[n];
            let head = heads
                .iter()
                .find(|(e, _)| *e == split)
                .map(|(_, h)| h.clone())
                .ok_or_else(|| CoordError::Param {
                    key: "split_depths",
                    reason: format!("client {n} split depth {split} is not an exit depth"),
                })?;
            let model = ClientModel {
                prefix: blocks[..split].to_vec(),
                head,
                activation: template.activation(),
            };
            let (train, test) = shard.split_holdout(holdout, hp.seed);
            let state = ClientState::new(
                n,
                model,
                template.exit_set(),
                thresholds[n],
                shard,
                train,
                test,
            )
            .map_err(|source| CoordError::Client { client: n, source })?;
            clients.push(state);
        }
        let mut srng = stream(hp.seed, Purpose::Init, SERVER_ENTITY, 0, 0);
        let server = ServerState::init(&template, hp.margin, hp.csa_weight, hp.csa_lr, &mut srng);
        Ok(Self {
            template,
            dataset,
            clients,
            server,
            zeta,
        })
    }
}

/// Per-step losses: `ℓ_C`, `ℓ_S` and the weighted `ℓ_CSA`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepLosses {
    pub loss_c: f64,
    pub loss_s: f64,
    pub loss_csa: f64,
}

/// One local step of client `client` against its server duplicate. Every
/// value crossing the trust boundary goes through `wire`, and each side only
/// reads what it received.
pub fn local_step(
    client: &mut ClientState,
    server: &mut ServerState,
    ds: &Dataset,
    hp: &HyperParams,
    round: usize,
    step: usize,
    wire: &mut Wire,
) -> Result<StepLosses, CoordError> {
    let id = client.id;
    step_inner(client, server, ds, hp, round, step, wire).map_err(|source| CoordError::Step {
        client: id,
        round,
        step,
        source,
    })
}

fn step_inner(
    client: &mut ClientState,
    server: &mut ServerState,
    ds: &Dataset,
    hp: &HyperParams,
    round: usize,
    step: usize,
    wire: &mut Wire,
) -> Result<StepLosses, StepFailure> {
    let id = client.id;
    let mut rng = stream(
        hp.seed,
        Purpose::LocalStep,
        id as u64,
        round as u64,
        step as u64,
    );
    let (b1, b2) = client.sample_batches(ds, hp.batch_size, &mut rng);
    let exit_depth = if hp.stochastic_exit {
        client.sample_exit_depth(&mut rng)?
    } else {
        client.split_depth()
    };
    let (views, ctx) = make_views(client, &b1, &b2, exit_depth, &hp.adapt_config())?;
    let q_dagger = quantize(&views.z_dagger, hp.bits, &mut rng)?;
    let q_ddagger = quantize(&views.z_ddagger, hp.bits, &mut rng)?;
    let msg = |payload| WireMessage::new(round, step, id, payload);

    let pair = wire.send(&msg(Payload::FeaturePair {
        exit_depth: exit_depth as u32,
        features: q_dagger,
        indicator: PairIndicator::new(views.indicator.clone()),
    }))?;
    let task = wire.send(&msg(Payload::TaskFeature {
        split_depth: views.split_depth as u32,
        features: q_ddagger,
    }))?;

    // Server side: only the decoded frames are visible here.
    let Payload::FeaturePair {
        exit_depth,
        features: fa,
        indicator,
    } = pair.payload
    else {
        return Err(StepFailure::Unexpected(pair.kind()));
    };
    let Payload::TaskFeature {
        split_depth,
        features: fb,
    } = task.payload
    else {
        return Err(StepFailure::Unexpected(task.kind()));
    };
    let z_task = fb.dequantize();
    let loss_csa = if server.csa_weight > 0.0 {
        server.csa_update(&ViewPair {
            z_dagger: fa.dequantize(),
            z_ddagger: z_task.clone(),
            exit_depth: exit_depth as usize,
            split_depth: split_depth as usize,
            indicator: indicator.bits().to_vec(),
        })?
    } else {
        0.0
    };
    let (logits, session) = server.u_shaped_task_forward(&z_task, split_depth as usize)?;
    let reply = wire.send(&msg(Payload::TaskLogits { logits }))?;

    // Client side.
    let Payload::TaskLogits { logits } = reply.payload else {
        return Err(StepFailure::Unexpected(reply.kind()));
    };
    let (loss_s, upstream) = ctx.server_task_loss(&logits)?;
    let up = wire.send(&msg(Payload::UpstreamGrad { grad: upstream }))?;

    // Server side.
    let Payload::UpstreamGrad { grad: upstream } = up.payload else {
        return Err(StepFailure::Unexpected(up.kind()));
    };
    let cut = server.apply_upstream_grad(session, &upstream, hp.outer_lr, hp.gamma)?;
    let cut = wire.send(&msg(Payload::CutGrad { grad: cut }))?;

    // Client side.
    let Payload::CutGrad { grad: cut } = cut.payload else {
        return Err(StepFailure::Unexpected(cut.kind()));
    };
    let loss_c = ctx.local_loss();
    outer_update(client, ctx, &cut, hp.outer_lr, hp.gamma)?;
    Ok(StepLosses {
        loss_c,
        loss_s,
        loss_csa,
    })
}

pub fn model_payload(model: &ClientModel) -> ModelPayload {
    ModelPayload {
        split_depth: model.split_depth() as u32,
        blocks: model.prefix.clone(),
        head: model.head.clone(),
    }
}

fn model_from_payload(p: ModelPayload, like: &ClientModel) -> ClientModel {
    ClientModel {
        prefix: p.blocks,
        head: p.head,
        activation: like.activation,
    }
}

/// Worker pool for per-participant tasks.
pub struct Scheduler {
    pool: rayon::ThreadPool,
    delay: Option<Box<dyn Fn(usize, usize) -> Duration + Send + Sync>>,
}

impl Scheduler {
    pub fn new(workers: usize) -> Result<Self, CoordError> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .build()
            .map_err(|e| CoordError::Pool(e.to_string()))?;
        Ok(Self { pool, delay: None })
    }

    /// Sleeps `delay(client, round)` at the start of each task; used to
    /// shuffle task completion order.
    pub fn with_delay(
        mut self,
        delay: impl Fn(usize, usize) -> Duration + Send + Sync + 'static,
    ) -> Self {
        self.delay = Some(Box::new(delay));
        self
    }

    pub fn workers(&self) -> usize {
        self.pool.current_num_threads()
    }
}

struct TaskOutput {
    server: ServerState,
    upload: ClientModel,
    wire: Wire,
    losses: Vec<StepLosses>,
}

fn client_task(
    client: &mut ClientState,
    mut server: ServerState,
    ds: &Dataset,
    hp: &HyperParams,
    round: usize,
    record: bool,
) -> Result<TaskOutput, CoordError> {
    let mut wire = Wire::new(record);
    let steps = hp.steps_for(client.id);
    let mut losses = Vec::with_capacity(steps);
    for t in 0..steps {
        losses.push(local_step(
            client,
            &mut server,
            ds,
            hp,
            round,
            t,
            &mut wire,
        )?);
    }
    let upload = wire
        .send(&WireMessage::new(
            round,
            steps,
            client.id,
            Payload::ModelUpload(model_payload(&client.model)),
        ))
        .map_err(|source| CoordError::Protocol { round, source })?;
    let Payload::ModelUpload(p) = upload.payload else {
        unreachable!("decode preserves the kind")
    };
    Ok(TaskOutput {
        server,
        upload: model_from_payload(p, &client.model),
        wire,
        losses,
    })
}

/// What happened in one round.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RoundOutcome {
    pub participants: Vec<usize>,
    /// Participant order, then step order.
    pub losses: Vec<StepLosses>,
}

/// Runs round `round` (1-based): local steps of every participant in
/// parallel, then client aggregation, server FedAvg and model download.
pub fn run_round(
    state: &mut SimState,
    hp: &HyperParams,
    round: usize,
    sched: &Scheduler,
    wire: &mut Wire,
) -> Result<RoundOutcome, CoordError> {
    let n = state.clients.len();
    let participants = select_participants(n, hp.participation, round, hp.seed);
    let duplicates = state.server.duplicate(&participants);
    let record = wire.transcript().is_some();
    let ds = &state.dataset;
    let delay = sched.delay.as_deref();
    let jobs: Vec<(&mut ClientState, ServerState)> = state
        .clients
        .iter_mut()
        .filter(|c| participants.binary_search(&c.id).is_ok())
        .zip(duplicates)
        .collect();
    let outputs: Vec<Result<TaskOutput, CoordError>> = sched.pool.install(|| {
        jobs.into_par_iter()
            .map(|(client, server)| {
                if let Some(d) = delay {
                    std::thread::sleep(d(client.id, round));
                }
                client_task(client, server, ds, hp, round, record)
            })
            .collect()
    });

    let mut uploads: Vec<Option<ClientModel>> = vec![None; n];
    let mut servers = Vec::with_capacity(participants.len());
    let mut losses = Vec::new();
    for (&p, out) in participants.iter().zip(outputs) {
        let out = out?;
        wire.absorb(out.wire);
        uploads[p] = Some(out.upload);
        servers.push(out.server);
        losses.extend(out.losses);
    }

    let participating: Vec<bool> = uploads.iter().map(Option::is_some).collect();
    let models: Vec<ClientModel> = uploads
        .into_iter()
        .zip(&state.clients)
        .map(|(u, c)| u.unwrap_or_else(|| c.model.clone()))
        .collect();
    let updated = aggregate_clients(&models, &participating, &state.zeta, hp.lambda)?;
    let weights: Vec<f64> = participants.iter().map(|&p| state.zeta[p]).collect();
    let (trunk, head) = aggregate_server(&servers, &weights)?;
    state.server.set_params(trunk, head);

    for (client, model) in state.clients.iter_mut().zip(updated) {
        let msg = WireMessage::new(
            round,
            0,
            client.id,
            Payload::ModelDownload(model_payload(&model)),
        );
        let received = wire
            .send(&msg)
            .map_err(|source| CoordError::Protocol { round, source })?;
        let Payload::ModelDownload(p) = received.payload else {
            unreachable!("decode preserves the kind")
        };
        client.model = model_from_payload(p, &client.model);
    }
    Ok(RoundOutcome {
        participants,
        losses,
    })
}

#[cfg(test)]
mod tests;
