use std::collections::BTreeSet;
use std::time::Duration;

use super::probe::{
    global_gradient, param_vector, probe_with_weights, set_param_vector, slot_layout, Coupling,
    Slot,
};
use super::*;
use crate::data::{dirichlet_partition, gen_gaussian_mixture, Dataset};
use crate::nn::{Head, Tensor};

fn template(depth: usize, exits: &[usize]) -> BackboneTemplate {
    BackboneTemplate::uniform(
        4,
        6,
        depth,
        exits.iter().copied().collect::<BTreeSet<_>>(),
        3,
    )
    .unwrap()
}

fn small_state(clients: usize, splits: &[usize], hp: &HyperParams) -> SimState {
    let ds = gen_gaussian_mixture(3, 4, 240, 0.6, hp.seed).unwrap();
    let shards = dirichlet_partition(&ds, clients, 1.0, hp.seed).unwrap();
    SimState::new(
        template(4, &[1, 2, 3]),
        ds,
        shards,
        splits,
        &vec![0.5; clients],
        0.2,
        hp,
    )
    .unwrap()
}

fn hp() -> HyperParams {
    HyperParams {
        rounds: 2,
        local_steps: vec![2],
        batch_size: 8,
        seed: 11,
        ..HyperParams::default()
    }
}

#[test]
fn full_participation_selects_everyone() {
    for round in 1..20 {
        assert_eq!(
            select_participants(8, 1.0, round, 3),
            (0..8).collect::<Vec<_>>()
        );
    }
}

#[test]
fn half_participation_selects_four_distinct_sorted() {
    for round in 1..50 {
        let p = select_participants(8, 0.5, round, 3);
        assert_eq!(p.len(), 4);
        assert!(p.windows(2).all(|w| w[0] < w[1]));
        assert!(p.iter().all(|&c| c < 8));
    }
    assert_eq!(
        select_participants(8, 0.5, 7, 3),
        select_participants(8, 0.5, 7, 3)
    );
}

#[test]
fn selection_frequency_matches_participation() {
    let rounds = 10_000;
    let mut counts = [0usize; 8];
    for round in 1..=rounds {
        for c in select_participants(8, 0.5, round, 99) {
            counts[c] += 1;
        }
    }
    for (c, &n) in counts.iter().enumerate() {
        let freq = n as f64 / rounds as f64;
        assert!((freq - 0.5).abs() <= 0.02, "client {c}: {freq}");
    }
}

#[test]
fn zero_local_steps_with_one_participant_is_a_no_op() {
    let hp = HyperParams {
        local_steps: vec![0],
        ..hp()
    };
    let mut state = small_state(1, &[2], &hp);
    let before = state.clone();
    let sched = Scheduler::new(1).unwrap();
    let outcome = run_round(&mut state, &hp, 1, &sched, &mut Wire::new(false)).unwrap();
    assert_eq!(outcome.participants, vec![0]);
    assert!(outcome.losses.is_empty());
    assert_eq!(state.clients[0].model, before.clients[0].model);
    assert_eq!(state.server.trunk, before.server.trunk);
    assert_eq!(state.server.head, before.server.head);
}

#[test]
fn pure_local_loss_leaves_the_server_untouched() {
    let hp = HyperParams {
        gamma: 1.0,
        csa_weight: 0.0,
        ..hp()
    };
    let mut a = small_state(1, &[2], &hp);
    let mut b = a.clone();
    // A different back end must not influence the client when γ = 1.
    for blk in &mut b.server.trunk {
        blk.weights = blk.weights.scale(-2.0);
    }
    let theta = a.server.clone();
    let client_before = a.clients[0].model.clone();
    let sched = Scheduler::new(1).unwrap();
    run_round(&mut a, &hp, 1, &sched, &mut Wire::new(false)).unwrap();
    run_round(&mut b, &hp, 1, &sched, &mut Wire::new(false)).unwrap();
    assert_eq!(a.server.trunk, theta.trunk);
    assert_eq!(a.server.head, theta.head);
    assert_ne!(a.clients[0].model, client_before);
    assert_eq!(a.clients[0].model, b.clients[0].model);
}

fn run(workers: usize, delay: bool, record: bool) -> (SimState, Wire, Vec<RoundOutcome>) {
    let hp = HyperParams {
        participation: 0.75,
        local_steps: vec![1, 2, 3, 2],
        ..hp()
    };
    let mut state = small_state(4, &[1, 2, 3, 2], &hp);
    let mut sched = Scheduler::new(workers).unwrap();
    if delay {
        sched = sched.with_delay(|client, round| {
            Duration::from_millis(((client * 7 + round * 3) % 5) as u64 * 3)
        });
    }
    let mut wire = Wire::new(record);
    let outcomes = (1..=3)
        .map(|r| run_round(&mut state, &hp, r, &sched, &mut wire).unwrap())
        .collect();
    (state, wire, outcomes)
}

#[test]
fn results_do_not_depend_on_workers_or_timing() {
    let (s1, w1, o1) = run(1, false, true);
    for (workers, delay) in [(4, false), (4, true), (2, true)] {
        let (s, w, o) = run(workers, delay, true);
        assert_eq!(o, o1);
        for (a, b) in s.clients.iter().zip(&s1.clients) {
            assert_eq!(a.model, b.model);
        }
        assert_eq!(s.server.trunk, s1.server.trunk);
        assert_eq!(s.server.head, s1.server.head);
        assert_eq!(w.ledger, w1.ledger);
        assert_eq!(w.transcript(), w1.transcript());
    }
}

#[test]
fn shared_depths_agree_after_full_averaging() {
    let hp = hp();
    let mut state = small_state(3, &[2, 2, 2], &hp);
    let sched = Scheduler::new(3).unwrap();
    run_round(&mut state, &hp, 1, &sched, &mut Wire::new(false)).unwrap();
    let first = &state.clients[0].model;
    for c in &state.clients[1..] {
        assert_eq!(&c.model, first);
    }
}

#[test]
fn traffic_is_attributed_to_rounds_and_directions() {
    let (_, wire, outcomes) = run(1, false, false);
    for (r, o) in outcomes.iter().enumerate() {
        let round = r as u32 + 1;
        let up = wire
            .ledger
            .round_total(round, crate::protocol::Direction::Up);
        let steps: usize = o.losses.len();
        // five upstream frames per step, then one model upload per participant
        let expected = 3 * steps + o.participants.len();
        assert_eq!(up.messages as usize, expected);
        let down = wire
            .ledger
            .round_total(round, crate::protocol::Direction::Down);
        assert_eq!(down.messages as usize, 2 * steps + 4);
    }
}

/// Two classes, every input present with both labels.
fn symmetric_dataset() -> Dataset {
    let base = gen_gaussian_mixture(2, 4, 40, 0.7, 5).unwrap();
    let n = base.len();
    let mut data = base.features.data().to_vec();
    data.extend_from_slice(base.features.data());
    let labels = (0..2 * n).map(|i| if i < n { 0 } else { 1 }).collect();
    Dataset {
        features: Tensor::matrix(2 * n, 4, data),
        labels,
        class_count: 2,
    }
}

#[test]
fn probe_vanishes_at_a_stationary_point() {
    let ds = symmetric_dataset();
    let n = ds.len() / 2;
    let shards = vec![
        crate::data::Shard {
            owner: 0,
            indices: (0..n / 2).chain(n..n + n / 2).collect(),
            weight: 0.5,
        },
        crate::data::Shard {
            owner: 1,
            indices: (n / 2..n).chain(n + n / 2..2 * n).collect(),
            weight: 0.5,
        },
    ];
    let tpl = BackboneTemplate::uniform(4, 5, 3, [1, 2].into_iter().collect(), 2).unwrap();
    let hp = HyperParams {
        gamma: 1.0,
        csa_weight: 0.0,
        ..hp()
    };
    let mut state = SimState::new(tpl, ds, shards, &[1, 2], &[0.5, 0.5], 0.0, &hp).unwrap();
    for c in &mut state.clients {
        let (i, k) = (c.model.head.in_dim(), c.model.head.classes());
        c.model.head = Head {
            weights: Tensor::zeros(vec![i, k]),
            bias: Tensor::zeros(vec![k]),
        };
    }
    let probe = estimate_global_grad_norm(&state, &hp).unwrap();
    assert!(probe.grad_norm_sq < 1e-10, "{}", probe.grad_norm_sq);
    assert!((probe.objective - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn probe_is_invariant_to_weight_scaling() {
    let hp = hp();
    let state = small_state(3, &[1, 2, 3], &hp);
    let p = [0.2, 0.3, 0.5];
    let a = probe_with_weights(&state, &hp, &p).unwrap();
    let scaled: Vec<f64> = p.iter().map(|v| v * 7.0).collect();
    let b = probe_with_weights(&state, &hp, &scaled).unwrap();
    assert!((a.objective - b.objective).abs() < 1e-12);
    assert!((a.grad_norm_sq - b.grad_norm_sq).abs() <= 1e-12 * a.grad_norm_sq.max(1.0));
}

#[test]
fn param_vector_round_trips() {
    let hp = hp();
    let mut state = small_state(3, &[1, 2, 3], &hp);
    for coupling in [Coupling::Tied, Coupling::PerClient] {
        let v = param_vector(&state, coupling);
        let shifted: Vec<f64> = v.iter().map(|x| x + 0.25).collect();
        set_param_vector(&mut state, coupling, &shifted);
        assert_eq!(param_vector(&state, coupling), shifted);
    }
}

fn objective(state: &SimState, hp: &HyperParams, coupling: Coupling) -> f64 {
    global_gradient(state, hp, &state.zeta, coupling).unwrap().0
}

/// The contrastive term trains only `θ`, so client coordinates are checked
/// against differences of `F` alone and server coordinates against `F + 𝒥`.
fn check_against_finite_differences(coupling: Coupling) {
    let hp = HyperParams {
        csa_weight: 0.7,
        ..hp()
    };
    let hp_f = HyperParams {
        csa_weight: 0.0,
        ..hp.clone()
    };
    let mut state = small_state(2, &[1, 3], &hp);
    // A wider margin keeps every non-matching pair inside the hinge.
    state.server.margin = 50.0;
    let hp = HyperParams { margin: 50.0, ..hp };
    // Zero biases put all-zero feature rows exactly on the ReLU kink.
    let v: Vec<f64> = param_vector(&state, coupling)
        .iter()
        .enumerate()
        .map(|(i, x)| x + 0.05 * (i as f64).sin())
        .collect();
    set_param_vector(&mut state, coupling, &v);
    let (_, grad) = global_gradient(&state, &hp, &state.zeta, coupling).unwrap();
    assert_eq!(grad.len(), v.len());
    let h = 1e-5;
    let mut checked = 0;
    for (slot, range) in slot_layout(&state, coupling) {
        let client_side = matches!(slot, Slot::ClientBlock { .. } | Slot::ClientHead { .. });
        let hp_used = if client_side { &hp_f } else { &hp };
        for i in range.step_by(3) {
            let mut probe = state.clone();
            let mut plus = v.clone();
            plus[i] += h;
            set_param_vector(&mut probe, coupling, &plus);
            let up = objective(&probe, hp_used, coupling);
            let mut minus = v.clone();
            minus[i] -= h;
            set_param_vector(&mut probe, coupling, &minus);
            let down = objective(&probe, hp_used, coupling);
            let fd = (up - down) / (2.0 * h);
            let err = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-3);
            assert!(err < 1e-4, "{slot:?}[{i}]: fd {fd} analytic {}", grad[i]);
            checked += 1;
        }
    }
    assert!(checked > 50);
}

#[test]
fn global_gradient_matches_finite_differences_tied() {
    check_against_finite_differences(Coupling::Tied);
}

#[test]
fn global_gradient_matches_finite_differences_per_client() {
    check_against_finite_differences(Coupling::PerClient);
}

#[test]
fn tied_gradient_sums_client_contributions() {
    let hp = hp();
    let state = small_state(3, &[2, 2, 2], &hp);
    let (_, tied) = global_gradient(&state, &hp, &state.zeta, Coupling::Tied).unwrap();
    let (_, split) = global_gradient(&state, &hp, &state.zeta, Coupling::PerClient).unwrap();
    let untie = |slot: Slot| match slot {
        Slot::ClientBlock { depth, .. } => Slot::ClientBlock { owner: None, depth },
        Slot::ClientHead { exit, .. } => Slot::ClientHead { owner: None, exit },
        other => other,
    };
    let mut folded = vec![0.0; tied.len()];
    let tied_layout = slot_layout(&state, Coupling::Tied);
    for (slot, range) in slot_layout(&state, Coupling::PerClient) {
        let (_, target) = tied_layout.iter().find(|(s, _)| *s == untie(slot)).unwrap();
        for (k, i) in range.enumerate() {
            folded[target.start + k] += split[i];
        }
    }
    for (a, b) in folded.iter().zip(&tied) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn invalid_hyper_parameters_name_their_key() {
    let cases: Vec<(HyperParams, &str)> = vec![
        (HyperParams { gamma: 1.5, ..hp() }, "gamma"),
        (
            HyperParams {
                lambda: -0.1,
                ..hp()
            },
            "lambda",
        ),
        (HyperParams { rounds: 0, ..hp() }, "rounds"),
        (
            HyperParams {
                participation: 0.0,
                ..hp()
            },
            "participation",
        ),
        (HyperParams { bits: 0, ..hp() }, "bits"),
        (
            HyperParams {
                inner_lr: f64::NAN,
                ..hp()
            },
            "inner_lr",
        ),
    ];
    for (h, key) in cases {
        match h.validate() {
            Err(CoordError::Param { key: k, .. }) => assert_eq!(k, key),
            other => panic!("{key}: {other:?}"),
        }
    }
}

#[test]
fn mismatched_split_list_is_rejected() {
    let hp = hp();
    let ds = gen_gaussian_mixture(3, 4, 60, 0.6, 1).unwrap();
    let shards = dirichlet_partition(&ds, 2, 1.0, 1).unwrap();
    let err = SimState::new(
        template(4, &[1, 2, 3]),
        ds,
        shards,
        &[1],
        &[0.5, 0.5],
        0.2,
        &hp,
    )
    .unwrap_err();
    assert!(matches!(
        err,
        CoordError::Param {
            key: "split_depths",
            ..
        }
    ));
}
