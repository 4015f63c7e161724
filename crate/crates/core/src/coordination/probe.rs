//! Deterministic evaluation of the global objective `𝓕(v)` and its gradient,
//! plus optional empirical estimates of smoothness, dissimilarity and noise.
//!
//! The probe uses each client's full training rows, `K` equal to the split
//! depth and no quantization. The contrastive term pairs row `i` with row
//! `i + 1` (cyclically) and, as in training, contributes gradient to the
//! server trunk only.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use std::collections::BTreeMap;
use std::ops::Range;

use crate::client::{quantize, ClientState, ModelGrad};
use crate::data::Dataset;
use crate::nn::{self, Tape, Tensor};
use crate::rng::{stream, Purpose};
use crate::server::{ServerGrad, ServerState};

use super::{CoordError, HyperParams, SimState};

/// `𝓕(v)` and `‖∇𝓕(v)‖²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeResult {
    pub objective: f64,
    pub grad_norm_sq: f64,
}

/// One client's contribution at `v`.
#[derive(Debug, Clone)]
pub struct ClientProbe {
    /// `F_n = γ·ℓ_C + (1−γ)·ℓ_S`.
    pub f: f64,
    /// Weighted contrastive term `𝒥_n`.
    pub j: f64,
    /// `∇_{φ_n, h_n} F_n`.
    pub client_grad: ModelGrad,
    /// `∇_θ (F_n + 𝒥_n)`.
    pub server_grad: ServerGrad,
}

/// Row `i` paired with row `i + 1`, cyclically.
pub fn rotated(rows: &[usize]) -> Vec<usize> {
    let mut out = rows.to_vec();
    out.rotate_left(1.min(rows.len()));
    out
}

/// Evaluates `F_n + 𝒥_n` on `rows`, pairing each row with `partners` for
/// the contrastive term. With `quant` the cut features pass through the
/// quantizer with a straight-through gradient.
pub fn probe_client(
    client: &ClientState,
    server: &ServerState,
    ds: &Dataset,
    hp: &HyperParams,
    rows: &[usize],
    partners: &[usize],
    quant: Option<&mut dyn RngCore>,
) -> Result<ClientProbe, CoordError> {
    let fail = |source| CoordError::Client {
        client: client.id,
        source,
    };
    let split = client.split_depth();
    let batch = ds.batch(rows);
    let mut tape = Tape::new();
    let bc = client.model.bind(&mut tape);
    let bs = server.bind(&mut tape);
    let x = tape.leaf(batch.x.clone());
    let z = nn::forward_prefix(&mut tape, &bc.prefix, x, split, client.model.activation)?;
    let local = bc.head.forward(&mut tape, z)?;
    let loss_c = tape.cross_entropy(local, &batch.y)?;
    let z_cut = match quant {
        Some(rng) => {
            let q = quantize(tape.value(z), hp.bits, rng).map_err(|e| fail(e.into()))?;
            tape.straight_through(z, q.dequantize())?
        }
        None => z,
    };
    let s = server.suffix_on_tape(&mut tape, &bs.trunk, z_cut, split)?;
    let u = bs.head.forward(&mut tape, s)?;
    let loss_s = tape.cross_entropy(u, &batch.y)?;
    let wc = tape.scale(loss_c, hp.gamma);
    let ws = tape.scale(loss_s, 1.0 - hp.gamma);
    let f = tape.add(wc, ws)?;

    let use_csa = hp.csa_weight > 0.0 && rows.len() == partners.len() && !rows.is_empty();
    let (total, j) = if use_csa {
        let other = client.model.features(&ds.batch(partners).x, split)?;
        let a_in = tape.leaf(other);
        let a_in = tape.stop_gradient(a_in);
        let b_in = tape.stop_gradient(z_cut);
        let a = server.suffix_on_tape(&mut tape, &bs.trunk, a_in, split)?;
        let b = server.suffix_on_tape(&mut tape, &bs.trunk, b_in, split)?;
        let indicator: Vec<bool> = rows
            .iter()
            .zip(partners)
            .map(|(&r, &p)| ds.labels[r] == ds.labels[p])
            .collect();
        let csa = tape.csa(a, b, &indicator, hp.margin)?;
        let j = tape.scale(csa, hp.csa_weight);
        (tape.add(f, j)?, Some(j))
    } else {
        (f, None)
    };
    let grads = tape.backward(total)?;
    Ok(ClientProbe {
        f: tape.value(f).item(),
        j: j.map(|j| tape.value(j).item()).unwrap_or(0.0),
        client_grad: bc.grad(&grads),
        server_grad: bs.grad(&grads),
    })
}

fn full_probe(state: &SimState, hp: &HyperParams, n: usize) -> Result<ClientProbe, CoordError> {
    let c = &state.clients[n];
    probe_client(
        c,
        &state.server,
        &state.dataset,
        hp,
        &c.train_rows,
        &rotated(&c.train_rows),
        None,
    )
}

fn model_grad_flat(g: &ModelGrad) -> Vec<f64> {
    let mut out = Vec::new();
    for b in &g.prefix {
        out.extend_from_slice(b.weights.data());
        out.extend_from_slice(b.bias.data());
    }
    out.extend_from_slice(g.head.weights.data());
    out.extend_from_slice(g.head.bias.data());
    out
}

fn server_grad_flat(g: &ServerGrad) -> Vec<f64> {
    let mut out = Vec::new();
    for b in &g.trunk {
        out.extend_from_slice(b.weights.data());
        out.extend_from_slice(b.bias.data());
    }
    out.extend_from_slice(g.head.weights.data());
    out.extend_from_slice(g.head.bias.data());
    out
}

fn normalized(p: &[f64]) -> Vec<f64> {
    let total: f64 = p.iter().sum();
    p.iter().map(|v| v / total).collect()
}

/// How client parameters enter `v`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coupling {
    /// One coordinate block per client.
    PerClient,
    /// Blocks at the same depth, and heads at the same exit depth, are one
    /// shared parameter. This is the model fixed by `λ = 0` aggregation.
    Tied,
}

impl Coupling {
    pub fn for_lambda(lambda: f64) -> Self {
        if lambda == 0.0 {
            Coupling::Tied
        } else {
            Coupling::PerClient
        }
    }
}

/// One weight/bias pair of `v`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Slot {
    ClientBlock { owner: Option<usize>, depth: usize },
    ClientHead { owner: Option<usize>, exit: usize },
    Trunk(usize),
    ServerHead,
}

fn owner(n: usize, coupling: Coupling) -> Option<usize> {
    match coupling {
        Coupling::PerClient => Some(n),
        Coupling::Tied => None,
    }
}

/// Calls `f` on every stored copy of every slot.
fn visit(state: &SimState, coupling: Coupling, mut f: impl FnMut(Slot, &Tensor, &Tensor)) {
    for (n, c) in state.clients.iter().enumerate() {
        let owner = owner(n, coupling);
        for b in &c.model.prefix {
            f(
                Slot::ClientBlock {
                    owner,
                    depth: b.depth,
                },
                &b.weights,
                &b.bias,
            );
        }
        let exit = c.split_depth();
        f(
            Slot::ClientHead { owner, exit },
            &c.model.head.weights,
            &c.model.head.bias,
        );
    }
    for b in &state.server.trunk {
        f(Slot::Trunk(b.depth), &b.weights, &b.bias);
    }
    f(
        Slot::ServerHead,
        &state.server.head.weights,
        &state.server.head.bias,
    );
}

fn visit_mut(
    state: &mut SimState,
    coupling: Coupling,
    mut f: impl FnMut(Slot, &mut Tensor, &mut Tensor),
) {
    for (n, c) in state.clients.iter_mut().enumerate() {
        let owner = owner(n, coupling);
        let exit = c.split_depth();
        for b in &mut c.model.prefix {
            f(
                Slot::ClientBlock {
                    owner,
                    depth: b.depth,
                },
                &mut b.weights,
                &mut b.bias,
            );
        }
        f(
            Slot::ClientHead { owner, exit },
            &mut c.model.head.weights,
            &mut c.model.head.bias,
        );
    }
    for b in &mut state.server.trunk {
        f(Slot::Trunk(b.depth), &mut b.weights, &mut b.bias);
    }
    f(
        Slot::ServerHead,
        &mut state.server.head.weights,
        &mut state.server.head.bias,
    );
}

/// Slot values of `v`, weights then bias, taken from the first holder.
fn slot_values(state: &SimState, coupling: Coupling) -> BTreeMap<Slot, Vec<f64>> {
    let mut out = BTreeMap::new();
    visit(state, coupling, |slot, w, b| {
        out.entry(slot)
            .or_insert_with(|| w.data().iter().chain(b.data()).copied().collect());
    });
    out
}

/// `v` flattened in slot order.
pub fn param_vector(state: &SimState, coupling: Coupling) -> Vec<f64> {
    slot_values(state, coupling)
        .into_values()
        .flatten()
        .collect()
}

/// Slots of `v` with their coordinate ranges in [`param_vector`].
pub fn slot_layout(state: &SimState, coupling: Coupling) -> Vec<(Slot, Range<usize>)> {
    let mut at = 0;
    slot_values(state, coupling)
        .into_iter()
        .map(|(slot, values)| {
            let range = at..at + values.len();
            at = range.end;
            (slot, range)
        })
        .collect()
}

/// Writes `v` (as laid out by [`param_vector`]) into every stored copy.
pub fn set_param_vector(state: &mut SimState, coupling: Coupling, v: &[f64]) {
    let layout: BTreeMap<Slot, Range<usize>> = slot_layout(state, coupling).into_iter().collect();
    assert_eq!(
        layout.values().map(|r| r.len()).sum::<usize>(),
        v.len(),
        "parameter vector length"
    );
    visit_mut(state, coupling, |slot, w, b| {
        let values = &v[layout[&slot].clone()];
        let nw = w.len();
        w.data_mut().copy_from_slice(&values[..nw]);
        b.data_mut().copy_from_slice(&values[nw..]);
    });
}

fn accumulate(acc: &mut BTreeMap<Slot, Vec<f64>>, slot: Slot, w: &Tensor, b: &Tensor, scale: f64) {
    let entry = acc
        .entry(slot)
        .or_insert_with(|| vec![0.0; w.len() + b.len()]);
    for (a, g) in entry.iter_mut().zip(w.data().iter().chain(b.data())) {
        *a += scale * g;
    }
}

/// `𝓕(v)` and `∇𝓕(v)` laid out like [`param_vector`], under weights `p`
/// (renormalized to sum to one).
pub fn global_gradient(
    state: &SimState,
    hp: &HyperParams,
    p: &[f64],
    coupling: Coupling,
) -> Result<(f64, Vec<f64>), CoordError> {
    let p = normalized(p);
    let mut objective = 0.0;
    let mut acc = BTreeMap::new();
    for (n, &pn) in p.iter().enumerate() {
        let probe = full_probe(state, hp, n)?;
        objective += pn * (probe.f + probe.j);
        let owner = owner(n, coupling);
        for b in &probe.client_grad.prefix {
            let slot = Slot::ClientBlock {
                owner,
                depth: b.depth,
            };
            accumulate(&mut acc, slot, &b.weights, &b.bias, pn);
        }
        let head = &probe.client_grad.head;
        let slot = Slot::ClientHead {
            owner,
            exit: state.clients[n].split_depth(),
        };
        accumulate(&mut acc, slot, &head.weights, &head.bias, pn);
        for b in &probe.server_grad.trunk {
            accumulate(&mut acc, Slot::Trunk(b.depth), &b.weights, &b.bias, pn);
        }
        let head = &probe.server_grad.head;
        accumulate(&mut acc, Slot::ServerHead, &head.weights, &head.bias, pn);
    }
    Ok((objective, acc.into_values().flatten().collect()))
}

/// `𝓕(v)` and `‖∇𝓕(v)‖²` with `p_n = ζ_n`.
pub fn estimate_global_grad_norm(
    state: &SimState,
    hp: &HyperParams,
) -> Result<ProbeResult, CoordError> {
    probe_with_weights(state, hp, &state.zeta)
}

/// Same with explicit client weights and the coupling implied by `λ`.
pub fn probe_with_weights(
    state: &SimState,
    hp: &HyperParams,
    p: &[f64],
) -> Result<ProbeResult, CoordError> {
    let (objective, g) = global_gradient(state, hp, p, Coupling::for_lambda(hp.lambda))?;
    Ok(ProbeResult {
        objective,
        grad_norm_sq: g.iter().map(|v| v * v).sum(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DiagnosticsConfig {
    pub estimate_smoothness: bool,
    pub probe_pairs: usize,
    pub dissimilarity: bool,
    pub noise_probes: usize,
}

/// Empirical stand-ins for the constants of the convergence analysis.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Diagnostics {
    /// Largest observed `‖∇𝓕(x) − ∇𝓕(y)‖ / ‖x − y‖`.
    pub smoothness: Option<f64>,
    /// `B` with `B² = Σ p_n ‖∇F_n‖² / ‖∇𝓕‖²`.
    pub dissimilarity: Option<f64>,
    /// Mini-batch gradient noise on client coordinates.
    pub sigma_c_sq: Option<f64>,
    /// Mini-batch gradient noise on server coordinates.
    pub sigma_s_sq: Option<f64>,
    /// Gradient change caused by feature quantization.
    pub sigma_q_sq: Option<f64>,
    /// Pair-sampling variance of the contrastive gradient on `θ`.
    pub sigma_csa_sq: Option<f64>,
    /// Largest squared norm of an inner-loop gradient.
    pub inner_grad_sq_max: Option<f64>,
}

impl Diagnostics {
    /// `(key, value)` pairs for the summary file.
    pub fn entries(&self) -> Vec<(&'static str, f64)> {
        [
            ("smoothness", self.smoothness),
            ("dissimilarity", self.dissimilarity),
            ("sigma_c_sq", self.sigma_c_sq),
            ("sigma_s_sq", self.sigma_s_sq),
            ("sigma_q_sq", self.sigma_q_sq),
            ("sigma_csa_sq", self.sigma_csa_sq),
            ("inner_grad_sq_max", self.inner_grad_sq_max),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.map(|v| (k, v)))
        .collect()
    }
}

fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn diagnose(
    state: &SimState,
    hp: &HyperParams,
    cfg: &DiagnosticsConfig,
) -> Result<Diagnostics, CoordError> {
    let mut out = Diagnostics::default();
    let seed = hp.seed;
    let coupling = Coupling::for_lambda(hp.lambda);
    let (_, base) = global_gradient(state, hp, &state.zeta, coupling)?;
    let base_norm_sq: f64 = base.iter().map(|v| v * v).sum();

    if cfg.estimate_smoothness && cfg.probe_pairs > 0 {
        let mut best: f64 = 0.0;
        for i in 0..cfg.probe_pairs {
            let mut rng = stream(seed, Purpose::Diagnostics, 1, i as u64, 0);
            let mut v = param_vector(state, coupling);
            let mut delta_sq = 0.0;
            for x in &mut v {
                let d: f64 = StandardNormal.sample(&mut rng);
                let d = 1e-3 * d;
                *x += d;
                delta_sq += d * d;
            }
            let mut moved = state.clone();
            set_param_vector(&mut moved, coupling, &v);
            let (_, g) = global_gradient(&moved, hp, &state.zeta, coupling)?;
            best = best.max((dist_sq(&g, &base) / delta_sq).sqrt());
        }
        out.smoothness = Some(best);
    }

    if cfg.dissimilarity {
        let p = normalized(&state.zeta);
        let mut weighted = 0.0;
        for (n, pn) in p.iter().enumerate() {
            let probe = full_probe(state, hp, n)?;
            weighted += pn * (probe.client_grad.norm_sq() + probe.server_grad.norm_sq());
        }
        if base_norm_sq > 0.0 {
            out.dissimilarity = Some((weighted / base_norm_sq).sqrt());
        }
    }

    if cfg.noise_probes > 0 {
        let ids: Vec<usize> = (0..state.clients.len()).collect();
        let (mut sc, mut ss, mut sq, mut inner) = (Vec::new(), Vec::new(), Vec::new(), 0.0f64);
        let mut csa_by_client: Vec<Vec<Vec<f64>>> = vec![Vec::new(); ids.len()];
        for i in 0..cfg.noise_probes {
            let mut rng = stream(seed, Purpose::Diagnostics, 2, i as u64, 0);
            let n = *ids.choose(&mut rng).expect("at least one client");
            let c = &state.clients[n];
            let full = full_probe(state, hp, n)?;
            let size = hp.batch_size.min(c.train_rows.len());
            let rows: Vec<usize> = c
                .train_rows
                .choose_multiple(&mut rng, size)
                .copied()
                .collect();
            let sampled = probe_client(
                c,
                &state.server,
                &state.dataset,
                hp,
                &rows,
                &rotated(&rows),
                None,
            )?;
            sc.push(dist_sq(
                &model_grad_flat(&sampled.client_grad),
                &model_grad_flat(&full.client_grad),
            ));
            ss.push(dist_sq(
                &server_grad_flat(&sampled.server_grad),
                &server_grad_flat(&full.server_grad),
            ));

            let rows = &c.train_rows;
            let quantized = probe_client(
                c,
                &state.server,
                &state.dataset,
                hp,
                rows,
                &rotated(rows),
                Some(&mut rng),
            )?;
            sq.push(
                dist_sq(
                    &model_grad_flat(&quantized.client_grad),
                    &model_grad_flat(&full.client_grad),
                ) + dist_sq(
                    &server_grad_flat(&quantized.server_grad),
                    &server_grad_flat(&full.server_grad),
                ),
            );

            if hp.csa_weight > 0.0 {
                let mut partners = rows.clone();
                partners.shuffle(&mut rng);
                let paired =
                    probe_client(c, &state.server, &state.dataset, hp, rows, &partners, None)?;
                csa_by_client[n].push(server_grad_flat(&paired.server_grad));
            }

            let batch = state.dataset.batch(&rows[..size]);
            let (_, g) = c.model.local_loss_grad(&batch)?;
            inner = inner.max(g.norm_sq());
        }
        out.sigma_c_sq = mean(&sc);
        out.sigma_s_sq = mean(&ss);
        out.sigma_q_sq = mean(&sq);
        out.inner_grad_sq_max = Some(inner);
        let mut spreads = Vec::new();
        for samples in csa_by_client.iter().filter(|s| s.len() >= 2) {
            let dim = samples[0].len();
            let centre: Vec<f64> = (0..dim)
                .map(|k| samples.iter().map(|s| s[k]).sum::<f64>() / samples.len() as f64)
                .collect();
            spreads.extend(samples.iter().map(|s| dist_sq(s, &centre)));
        }
        out.sigma_csa_sq = mean(&spreads);
    }

    if let Some(l) = out.smoothness.filter(|l| *l > 0.0) {
        if hp.inner_lr > 1.0 / l {
            log::warn!("inner_lr {} exceeds 1/L = {}", hp.inner_lr, 1.0 / l);
        }
        let b_sq = out.dissimilarity.map(|b| b * b).unwrap_or(1.0);
        let cap = 1.0 / (l * (b_sq + 1.0));
        if hp.outer_lr > cap {
            log::warn!("outer_lr {} exceeds 1/(L(B^2+1)) = {cap}", hp.outer_lr);
        }
    }
    Ok(out)
}
