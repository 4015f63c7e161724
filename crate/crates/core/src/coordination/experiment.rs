//! End-to-end runs: build the federation from a [`RunConfig`], train for `R`
//! rounds, personalize, evaluate and write artifacts.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::client::{personalize, quantize, ClientError, ClientState, OffloadTarget};
use crate::config::RunConfig;
use crate::data::{dirichlet_partition_min, gen_gaussian_mixture};
use crate::nn::{softmax_entropy, Activation, BackboneTemplate};
use crate::protocol::{Direction, RemoteServer, Wire};
use crate::rng::{stream, Purpose, StreamRng};

use super::probe::{
    diagnose, estimate_global_grad_norm, probe_with_weights, Diagnostics, DiagnosticsConfig,
    ProbeResult,
};
use super::{checkpoint, run_round, CoordError, HyperParams, Scheduler, SimState, StepLosses};

pub const METRICS_HEADER: &str =
    "round,objective,grad_norm_sq,loss_c,loss_s,loss_csa,bytes_up,bytes_down,local_exit_rate,wall_ms";

#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    pub round: usize,
    pub objective: f64,
    pub grad_norm_sq: f64,
    pub loss_c: f64,
    pub loss_s: f64,
    pub loss_csa: f64,
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub local_exit_rate: f64,
    pub wall_ms: u64,
}

impl RoundMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.round,
            self.objective,
            self.grad_norm_sq,
            self.loss_c,
            self.loss_s,
            self.loss_csa,
            self.bytes_up,
            self.bytes_down,
            self.local_exit_rate,
            self.wall_ms
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientReport {
    pub id: usize,
    pub split_depth: usize,
    pub train_samples: usize,
    pub holdout_samples: usize,
    /// Local-head accuracy on held-out rows with the global model.
    pub accuracy_before: f64,
    /// Same after [`personalize`].
    pub accuracy_after: f64,
    /// Entropy-gated accuracy of the personalized model.
    pub gated_accuracy: f64,
    pub offload_rate: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub config: RunConfig,
    /// Probe at `v^0`.
    pub initial: ProbeResult,
    pub rounds: Vec<RoundMetrics>,
    pub clients: Vec<ClientReport>,
    /// Pooled server-route accuracy per probed cut depth.
    pub fallback_accuracy: BTreeMap<usize, f64>,
    /// Exit depths that were no client's split depth.
    pub unseen_depths: Vec<usize>,
    pub diagnostics: Option<Diagnostics>,
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub transcript: Option<Vec<u8>>,
    /// Personalized clients and the final server.
    pub state: SimState,
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values
        .into_iter()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

impl ExperimentReport {
    /// Running minimum of `grad_norm_sq` over `v^0 … v^r`.
    pub fn running_min_grad_norm_sq(&self, round: usize) -> f64 {
        self.rounds
            .iter()
            .take_while(|m| m.round <= round)
            .map(|m| m.grad_norm_sq)
            .fold(self.initial.grad_norm_sq, f64::min)
    }

    pub fn min_grad_norm_sq(&self) -> f64 {
        self.running_min_grad_norm_sq(usize::MAX)
    }

    pub fn final_objective(&self) -> f64 {
        self.rounds
            .last()
            .map_or(self.initial.objective, |m| m.objective)
    }

    pub fn mean_accuracy_before(&self) -> f64 {
        mean(
            self.clients
                .iter()
                .filter(|c| c.holdout_samples > 0)
                .map(|c| c.accuracy_before),
        )
    }

    pub fn mean_accuracy_after(&self) -> f64 {
        mean(
            self.clients
                .iter()
                .filter(|c| c.holdout_samples > 0)
                .map(|c| c.accuracy_after),
        )
    }

    pub fn metrics_csv(&self) -> String {
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        for m in &self.rounds {
            out.push_str(&m.csv_row());
            out.push('\n');
        }
        out
    }

    /// Flat `key = value` summary.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("rounds", self.rounds.len().to_string());
        kv("objective_initial", self.initial.objective.to_string());
        kv("objective_final", self.final_objective().to_string());
        kv(
            "grad_norm_sq_initial",
            self.initial.grad_norm_sq.to_string(),
        );
        kv("min_grad_norm_sq", self.min_grad_norm_sq().to_string());
        for c in &self.clients {
            let p = format!("client.{}", c.id);
            kv(&format!("{p}.split_depth"), c.split_depth.to_string());
            kv(&format!("{p}.train_samples"), c.train_samples.to_string());
            kv(
                &format!("{p}.holdout_samples"),
                c.holdout_samples.to_string(),
            );
            kv(
                &format!("{p}.accuracy_before"),
                c.accuracy_before.to_string(),
            );
            kv(
                &format!("{p}.personalized_accuracy"),
                c.accuracy_after.to_string(),
            );
            kv(&format!("{p}.gated_accuracy"), c.gated_accuracy.to_string());
            kv(&format!("{p}.offload_rate"), c.offload_rate.to_string());
        }
        kv(
            "mean_local_accuracy_before",
            self.mean_accuracy_before().to_string(),
        );
        kv(
            "mean_local_accuracy_after",
            self.mean_accuracy_after().to_string(),
        );
        for (depth, acc) in &self.fallback_accuracy {
            kv(&format!("fallback_accuracy.depth{depth}"), acc.to_string());
        }
        let unseen: Vec<String> = self.unseen_depths.iter().map(usize::to_string).collect();
        kv("unseen_depths", unseen.join(","));
        kv("bytes_up_total", self.bytes_up.to_string());
        kv("bytes_down_total", self.bytes_down.to_string());
        if let Some(d) = &self.diagnostics {
            for (k, v) in d.entries() {
                kv(&format!("diagnostics.{k}"), v.to_string());
            }
        }
        out
    }
}

fn invalid(e: crate::config::ConfigError) -> CoordError {
    CoordError::Param {
        key: "config",
        reason: e.to_string(),
    }
}

pub fn hyper_params(cfg: &RunConfig) -> HyperParams {
    HyperParams {
        rounds: cfg.rounds,
        local_steps: cfg.client_local_steps(),
        participation: cfg.participation,
        gamma: cfg.gamma,
        lambda: cfg.lambda,
        inner_lr: cfg.inner_lr,
        outer_lr: cfg.outer_lr,
        inner_steps: cfg.inner_steps,
        batch_size: cfg.batch_size,
        margin: cfg.margin,
        bits: cfg.bits,
        csa_weight: cfg.csa_weight,
        csa_lr: cfg.csa_lr,
        stochastic_exit: cfg.stochastic_exit,
        seed: cfg.seed,
    }
}

/// Data, partition and initial models for `cfg`.
pub fn build_state(cfg: &RunConfig) -> Result<(SimState, HyperParams), CoordError> {
    cfg.validate().map_err(invalid)?;
    let hp = hyper_params(cfg);
    hp.validate()?;
    let dataset = gen_gaussian_mixture(cfg.classes, cfg.dim, cfg.samples, cfg.spread, cfg.seed)?;
    let shards = dirichlet_partition_min(
        &dataset,
        cfg.clients,
        cfg.concentration,
        cfg.seed,
        cfg.min_shard,
    )?;
    let widths = cfg.block_widths();
    let mut dims = Vec::with_capacity(widths.len());
    let mut input = cfg.dim;
    for &w in &widths {
        dims.push((input, w));
        input = w;
    }
    let exits: BTreeSet<usize> = cfg.exit_set.iter().copied().collect();
    let template = BackboneTemplate::new(dims, exits, cfg.classes, Activation::Relu)?;
    let state = SimState::new(
        template,
        dataset,
        shards,
        &cfg.client_splits(),
        &cfg.client_thresholds(),
        cfg.holdout,
        &hp,
    )?;
    Ok((state, hp))
}

/// Fraction of all held-out samples whose local entropy is below the
/// owner's threshold.
pub fn local_exit_rate(state: &SimState) -> Result<f64, CoordError> {
    let (mut local, mut total) = (0usize, 0usize);
    for c in &state.clients {
        if c.holdout_rows.is_empty() {
            continue;
        }
        let logits = c
            .model
            .local_logits(&state.dataset.batch(&c.holdout_rows).x)?;
        for i in 0..logits.rows() {
            if softmax_entropy(logits.row(i))? < c.entropy_threshold {
                local += 1;
            }
        }
        total += logits.rows();
    }
    Ok(if total == 0 {
        0.0
    } else {
        local as f64 / total as f64
    })
}

fn mean_losses(losses: &[StepLosses]) -> StepLosses {
    StepLosses {
        loss_c: mean(losses.iter().map(|l| l.loss_c)),
        loss_s: mean(losses.iter().map(|l| l.loss_s)),
        loss_csa: mean(losses.iter().map(|l| l.loss_csa)),
    }
}

/// Server-route predictions for `rows` of `client`, cut at `depth`, sent
/// as one quantized batch.
fn offload_rows(
    client: &ClientState,
    target: &mut dyn OffloadTarget,
    state: &SimState,
    rows: &[usize],
    depth: usize,
    bits: u32,
    rng: &mut StreamRng,
) -> Result<Vec<usize>, CoordError> {
    let fail = |source| CoordError::Client {
        client: client.id,
        source,
    };
    let z = client.model.features(&state.dataset.batch(rows).x, depth)?;
    let q = quantize(&z, bits, rng).map_err(|e| fail(e.into()))?;
    let logits = target
        .classify(client.id, q, depth)
        .map_err(|e| fail(ClientError::Offload(e)))?;
    Ok(logits.argmax_rows())
}

struct Evaluation {
    fallback: BTreeMap<usize, f64>,
    gated: Vec<(f64, f64)>,
}

/// Fallback accuracy at every exit depth and entropy-gated accuracy, with
/// every offload crossing `wire`.
fn evaluate(
    state: &SimState,
    bits: u32,
    seed: u64,
    round: usize,
    wire: &mut Wire,
) -> Result<Evaluation, CoordError> {
    let mut remote = RemoteServer {
        server: &state.server,
        wire,
        round,
        step: 0,
    };
    let mut fallback = BTreeMap::new();
    for &depth in state.template.exit_set() {
        let (mut hits, mut total) = (0usize, 0usize);
        for c in state
            .clients
            .iter()
            .filter(|c| c.split_depth() >= depth && !c.holdout_rows.is_empty())
        {
            let mut rng = stream(seed, Purpose::Inference, c.id as u64, depth as u64, 0);
            let predicted = offload_rows(
                c,
                &mut remote,
                state,
                &c.holdout_rows,
                depth,
                bits,
                &mut rng,
            )?;
            hits += predicted
                .iter()
                .zip(&c.holdout_rows)
                .filter(|(p, &r)| **p == state.dataset.labels[r])
                .count();
            total += predicted.len();
        }
        if total > 0 {
            fallback.insert(depth, hits as f64 / total as f64);
        }
    }

    let mut gated = Vec::with_capacity(state.clients.len());
    for c in &state.clients {
        if c.holdout_rows.is_empty() {
            gated.push((0.0, 0.0));
            continue;
        }
        let logits = c
            .model
            .local_logits(&state.dataset.batch(&c.holdout_rows).x)?;
        let mut predictions = logits.argmax_rows();
        let mut uncertain = Vec::new();
        for i in 0..logits.rows() {
            if softmax_entropy(logits.row(i))? >= c.entropy_threshold {
                uncertain.push(i);
            }
        }
        if !uncertain.is_empty() {
            let rows: Vec<usize> = uncertain.iter().map(|&i| c.holdout_rows[i]).collect();
            let mut rng = stream(seed, Purpose::Inference, c.id as u64, 0, 1);
            let remote_pred = offload_rows(
                c,
                &mut remote,
                state,
                &rows,
                c.split_depth(),
                bits,
                &mut rng,
            )?;
            for (&i, p) in uncertain.iter().zip(remote_pred) {
                predictions[i] = p;
            }
        }
        let hits = predictions
            .iter()
            .zip(&c.holdout_rows)
            .filter(|(p, &r)| **p == state.dataset.labels[r])
            .count();
        let n = c.holdout_rows.len() as f64;
        gated.push((hits as f64 / n, uncertain.len() as f64 / n));
    }
    Ok(Evaluation { fallback, gated })
}

/// Runs the configured experiment in memory.
pub fn simulate(cfg: &RunConfig) -> Result<ExperimentReport, CoordError> {
    simulate_with(cfg, &Scheduler::new(cfg.workers)?)
}

pub fn simulate_with(cfg: &RunConfig, sched: &Scheduler) -> Result<ExperimentReport, CoordError> {
    let (mut state, hp) = build_state(cfg)?;
    let mut wire = Wire::new(cfg.record_transcript);
    let initial = estimate_global_grad_norm(&state, &hp)?;
    let mut rounds = Vec::with_capacity(cfg.rounds);
    for r in 1..=cfg.rounds {
        let started = Instant::now();
        let outcome = run_round(&mut state, &hp, r, sched, &mut wire)?;
        let p: Vec<f64> = (0..state.clients.len())
            .map(|n| {
                if outcome.participants.binary_search(&n).is_ok() {
                    state.zeta[n]
                } else {
                    0.0
                }
            })
            .collect();
        let probe = probe_with_weights(&state, &hp, &p)?;
        let losses = mean_losses(&outcome.losses);
        let wall_ms = if cfg.wall_clock {
            started.elapsed().as_millis() as u64
        } else {
            0
        };
        rounds.push(RoundMetrics {
            round: r,
            objective: probe.objective,
            grad_norm_sq: probe.grad_norm_sq,
            loss_c: losses.loss_c,
            loss_s: losses.loss_s,
            loss_csa: losses.loss_csa,
            bytes_up: wire.ledger.round_total(r as u32, Direction::Up).bytes,
            bytes_down: wire.ledger.round_total(r as u32, Direction::Down).bytes,
            local_exit_rate: local_exit_rate(&state)?,
            wall_ms,
        });
        log::info!(
            "round {r}: objective {} grad_norm_sq {}",
            probe.objective,
            probe.grad_norm_sq
        );
    }

    let diagnostics = if cfg.diagnostics {
        let dc = DiagnosticsConfig {
            estimate_smoothness: cfg.probe_pairs > 0,
            probe_pairs: cfg.probe_pairs,
            dissimilarity: true,
            noise_probes: cfg.noise_probes,
        };
        Some(diagnose(&state, &hp, &dc)?)
    } else {
        None
    };

    let mut before = Vec::with_capacity(state.clients.len());
    for c in &mut state.clients {
        let acc = c.model.accuracy(&state.dataset, &c.holdout_rows)?;
        before.push(acc);
        if cfg.personalize_steps > 0 && !c.train_rows.is_empty() {
            let global = c.model.clone();
            let mut rng = stream(cfg.seed, Purpose::Personalize, c.id as u64, 0, 0);
            personalize(
                c,
                &global,
                &state.dataset,
                &hp.adapt_config(),
                cfg.personalize_steps,
                &mut rng,
            )
            .map_err(|source| CoordError::Client {
                client: c.id,
                source,
            })?;
        }
    }

    let eval = evaluate(&state, cfg.bits, cfg.seed, cfg.rounds + 1, &mut wire)?;
    let splits: BTreeSet<usize> = state.clients.iter().map(ClientState::split_depth).collect();
    let unseen_depths = state
        .template
        .exit_set()
        .iter()
        .copied()
        .filter(|d| !splits.contains(d))
        .collect();
    let mut clients = Vec::with_capacity(state.clients.len());
    for (c, (acc_before, (gated, offload))) in
        state.clients.iter().zip(before.into_iter().zip(eval.gated))
    {
        clients.push(ClientReport {
            id: c.id,
            split_depth: c.split_depth(),
            train_samples: c.train_rows.len(),
            holdout_samples: c.holdout_rows.len(),
            accuracy_before: acc_before,
            accuracy_after: c.model.accuracy(&state.dataset, &c.holdout_rows)?,
            gated_accuracy: gated,
            offload_rate: offload,
        });
    }
    let total = |d| {
        wire.ledger
            .iter()
            .filter(|((_, _, k), _)| k.direction() == d)
            .map(|(_, t)| t.bytes)
            .sum()
    };
    let bytes_up = total(Direction::Up);
    let bytes_down = total(Direction::Down);
    Ok(ExperimentReport {
        config: cfg.clone(),
        initial,
        rounds,
        clients,
        fallback_accuracy: eval.fallback,
        unseen_depths,
        diagnostics,
        bytes_up,
        bytes_down,
        transcript: wire.take_transcript(),
        state,
    })
}

/// Names of the files [`run_experiment`] writes.
pub mod files {
    pub const METRICS: &str = "metrics.csv";
    pub const SUMMARY: &str = "summary.txt";
    pub const CHECKPOINT: &str = "checkpoint.hsfl";
    pub const CONFIG: &str = "config.conf";
    pub const TRANSCRIPT: &str = "transcript.bin";
    pub const DATASET: &str = "dataset.csv";
}

fn write(path: PathBuf, bytes: &[u8]) -> Result<(), CoordError> {
    fs::write(&path, bytes).map_err(|source| CoordError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// [`simulate`] plus artifacts under `cfg.output_dir`.
pub fn run_experiment(cfg: &RunConfig) -> Result<ExperimentReport, CoordError> {
    let report = simulate(cfg)?;
    write_artifacts(&report, &cfg.output_dir)?;
    Ok(report)
}

pub fn write_artifacts(report: &ExperimentReport, dir: &Path) -> Result<(), CoordError> {
    fs::create_dir_all(dir).map_err(|source| CoordError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    write(dir.join(files::METRICS), report.metrics_csv().as_bytes())?;
    write(dir.join(files::SUMMARY), report.summary().as_bytes())?;
    write(dir.join(files::CONFIG), report.config.to_text().as_bytes())?;
    write(
        dir.join(files::CHECKPOINT),
        &checkpoint::encode(&report.state),
    )?;
    if let Some(t) = &report.transcript {
        write(dir.join(files::TRANSCRIPT), t)?;
    }
    if report.config.export_dataset {
        let path = dir.join(files::DATASET);
        report.state.dataset.write_csv(&path)?;
    }
    Ok(())
}
