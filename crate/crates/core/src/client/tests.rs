use std::collections::BTreeSet;

use super::*;
use crate::rng::{stream, Purpose};
use crate::server::ServerState;

fn exits(d: &[usize]) -> BTreeSet<usize> {
    d.iter().copied().collect()
}

/// One identity block `1 → 1` and a two-class head: a logistic model whose
/// gradient is written out by hand in [`oracle`].
fn toy_model(p: [f64; 6]) -> ClientModel {
    ClientModel {
        prefix: vec![ParamBlock {
            depth: 1,
            weights: Tensor::matrix(1, 1, vec![p[0]]),
            bias: Tensor::vector(vec![p[1]]),
        }],
        head: Head {
            weights: Tensor::matrix(1, 2, vec![p[2], p[3]]),
            bias: Tensor::vector(vec![p[4], p[5]]),
        },
        activation: Activation::Identity,
    }
}

fn params(m: &ClientModel) -> [f64; 6] {
    let b = &m.prefix[0];
    let h = &m.head;
    [
        b.weights.data()[0],
        b.bias.data()[0],
        h.weights.data()[0],
        h.weights.data()[1],
        h.bias.data()[0],
        h.bias.data()[1],
    ]
}

/// Mean cross-entropy of the toy model and its gradient, written out by hand.
fn oracle(p: &[f64; 6], xs: &[f64], ys: &[usize]) -> (f64, [f64; 6]) {
    let n = xs.len() as f64;
    let mut loss = 0.0;
    let mut g = [0.0; 6];
    for (&x, &y) in xs.iter().zip(ys) {
        let h = p[0] * x + p[1];
        let l = [h * p[2] + p[4], h * p[3] + p[5]];
        let m = l[0].max(l[1]);
        let s = (l[0] - m).exp() + (l[1] - m).exp();
        let prob = [(l[0] - m).exp() / s, (l[1] - m).exp() / s];
        loss -= prob[y].ln() / n;
        let d = [
            (prob[0] - (y == 0) as u8 as f64) / n,
            (prob[1] - (y == 1) as u8 as f64) / n,
        ];
        let dh = d[0] * p[2] + d[1] * p[3];
        g[0] += dh * x;
        g[1] += dh;
        g[2] += d[0] * h;
        g[3] += d[1] * h;
        g[4] += d[0];
        g[5] += d[1];
    }
    (loss, g)
}

fn toy_data() -> Dataset {
    let xs = vec![0.5, -1.0, 2.0, 0.3, -0.7, 1.5, -2.0, 0.9];
    let ys = vec![1, 0, 1, 0, 0, 1, 0, 1];
    Dataset {
        features: Tensor::matrix(xs.len(), 1, xs),
        labels: ys,
        class_count: 2,
    }
}

fn toy_state(p: [f64; 6]) -> ClientState {
    let ds = toy_data();
    let rows: Vec<usize> = (0..ds.len()).collect();
    let shard = Shard {
        owner: 0,
        indices: rows.clone(),
        weight: 1.0,
    };
    ClientState::new(0, toy_model(p), &exits(&[1]), 0.5, shard, rows, vec![]).unwrap()
}

const P0: [f64; 6] = [0.8, -0.1, 0.6, -0.4, 0.05, -0.02];

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "coordinate {i}: {x} vs {y}");
    }
}

#[test]
fn local_loss_grad_matches_hand_gradient() {
    let ds = toy_data();
    let batch = ds.batch(&[0, 1, 2, 3, 4]);
    let (loss, grad) = toy_model(P0).local_loss_grad(&batch).unwrap();
    let xs: Vec<f64> = batch.x.data().to_vec();
    let (want_loss, want) = oracle(&P0, &xs, &batch.y);
    assert!((loss - want_loss).abs() < 1e-12);
    let got = [
        grad.prefix[0].weights.data()[0],
        grad.prefix[0].bias.data()[0],
        grad.head.weights.data()[0],
        grad.head.weights.data()[1],
        grad.head.bias.data()[0],
        grad.head.bias.data()[1],
    ];
    assert_close(&got, &want, 1e-12);
}

#[test]
fn adapt_without_steps_or_rate_is_identity() {
    let ds = toy_data();
    let batch = ds.batch(&[0, 1, 2]);
    let m = toy_model(P0);
    for cfg in [
        AdaptConfig {
            inner_steps: 0,
            ..AdaptConfig::default()
        },
        AdaptConfig {
            inner_lr: 0.0,
            inner_steps: 3,
            ..AdaptConfig::default()
        },
    ] {
        assert_eq!(adapt(&m, &batch, &cfg).unwrap(), m);
    }
}

#[test]
fn adapt_takes_plain_sgd_steps() {
    let ds = toy_data();
    let batch = ds.batch(&[0, 1, 2, 5]);
    let xs = batch.x.data().to_vec();
    let cfg = AdaptConfig {
        inner_lr: 0.3,
        inner_steps: 2,
        batch_size: 4,
    };
    let mut want = P0;
    for _ in 0..2 {
        let (_, g) = oracle(&want, &xs, &batch.y);
        for i in 0..6 {
            want[i] -= 0.3 * g[i];
        }
    }
    let got = adapt(&toy_model(P0), &batch, &cfg).unwrap();
    assert_close(&params(&got), &want, 1e-12);
}

#[test]
fn adapt_rejects_bad_input() {
    let ds = toy_data();
    let m = toy_model(P0);
    assert!(matches!(
        adapt(&m, &ds.batch(&[]), &AdaptConfig::default()),
        Err(ClientError::EmptyBatch)
    ));
    let cfg = AdaptConfig {
        inner_lr: -0.1,
        ..AdaptConfig::default()
    };
    assert!(matches!(
        adapt(&m, &ds.batch(&[0]), &cfg),
        Err(ClientError::NegativeRate(_))
    ));
}

#[test]
fn smoothness_caps_inner_rate() {
    let cfg = AdaptConfig::default().capped_by_smoothness(100.0);
    assert_eq!(cfg.inner_lr, 0.01);
    assert_eq!(
        AdaptConfig::default().capped_by_smoothness(1.0).inner_lr,
        0.05
    );
    assert_eq!(
        AdaptConfig::default().capped_by_smoothness(0.0).inner_lr,
        0.05
    );
}

#[test]
fn fomaml_step_matches_cross_batch_oracle() {
    let ds = toy_data();
    let b1 = ds.batch(&[0, 1, 2, 3]);
    let b2 = ds.batch(&[4, 5, 6, 7]);
    let cfg = AdaptConfig {
        inner_lr: 0.2,
        inner_steps: 1,
        batch_size: 4,
    };
    let (gamma, beta) = (0.4, 0.1);
    let mut state = toy_state(P0);
    let (views, ctx) = make_views(&state, &b1, &b2, 1, &cfg).unwrap();

    let x1 = b1.x.data().to_vec();
    let x2 = b2.x.data().to_vec();
    let (_, g2) = oracle(&P0, &x2, &b2.y);
    let adapted: Vec<f64> = (0..6).map(|i| P0[i] - 0.2 * g2[i]).collect();
    let adapted: [f64; 6] = adapted.try_into().unwrap();
    let z: Vec<f64> = x1.iter().map(|x| adapted[0] * x + adapted[1]).collect();
    assert_close(views.z_ddagger.data(), &z, 1e-12);

    let g_z: Vec<f64> = (0..4).map(|i| 0.1 * i as f64 - 0.15).collect();
    let (_, gc) = oracle(&adapted, &x1, &b1.y);
    let mut want = gc.map(|g| gamma * g);
    want[0] += g_z.iter().zip(&x1).map(|(g, x)| g * x).sum::<f64>();
    want[1] += g_z.iter().sum::<f64>();

    let grad = outer_update(&mut state, ctx, &Tensor::matrix(4, 1, g_z), beta, gamma).unwrap();
    assert_eq!(grad.prefix.len(), 1);
    let updated = params(&state.model);
    let expected: Vec<f64> = (0..6).map(|i| P0[i] - beta * want[i]).collect();
    assert_close(&updated, &expected, 1e-12);
}

#[test]
fn dagger_branch_is_adapted_on_first_batch() {
    let ds = toy_data();
    let b1 = ds.batch(&[0, 2, 4]);
    let b2 = ds.batch(&[1, 3, 5]);
    let cfg = AdaptConfig {
        inner_lr: 0.5,
        inner_steps: 1,
        batch_size: 3,
    };
    let state = toy_state(P0);
    let (views, _) = make_views(&state, &b1, &b2, 1, &cfg).unwrap();
    let dagger = adapt(&state.model, &b1, &cfg).unwrap();
    assert_eq!(views.z_dagger, dagger.features(&b2.x, 1).unwrap());
    assert_eq!(views.exit_depth, 1);
    assert_eq!(views.split_depth, 1);
}

#[test]
fn indicator_tracks_label_equality() {
    let ds = toy_data();
    let state = toy_state(P0);
    let cfg = AdaptConfig::default();
    let same = make_views(&state, &ds.batch(&[0, 1]), &ds.batch(&[2, 3]), 1, &cfg)
        .unwrap()
        .0;
    assert_eq!(same.indicator, vec![true, true]);
    let differ = make_views(&state, &ds.batch(&[0, 1]), &ds.batch(&[1, 0]), 1, &cfg)
        .unwrap()
        .0;
    assert_eq!(differ.indicator, vec![false, false]);
}

fn deep_state(split: usize, seed: u64) -> (BackboneTemplate, ClientState, Dataset) {
    let t = BackboneTemplate::uniform(3, 5, 5, exits(&[1, 2, 4]), 3).unwrap();
    let model = ClientModel::init(&t, split, &mut stream(seed, Purpose::Init, 0, 0, 0));
    let ds = crate::data::gen_gaussian_mixture(3, 3, 40, 0.5, seed).unwrap();
    let rows: Vec<usize> = (0..ds.len()).collect();
    let shard = Shard {
        owner: 2,
        indices: rows.clone(),
        weight: 1.0,
    };
    let state = ClientState::new(2, model, t.exit_set(), 0.5, shard, rows, vec![]).unwrap();
    (t, state, ds)
}

#[test]
fn view_shapes_follow_depths() {
    let (t, state, ds) = deep_state(4, 1);
    let (b1, b2) = state.sample_batches(&ds, 6, &mut stream(1, Purpose::LocalStep, 2, 0, 0));
    let cfg = AdaptConfig::default();
    let (full, _) = make_views(&state, &b1, &b2, 4, &cfg).unwrap();
    assert_eq!(full.z_dagger.shape(), full.z_ddagger.shape());
    let (short, _) = make_views(&state, &b1, &b2, 2, &cfg).unwrap();
    assert_eq!(short.z_dagger.shape(), &[6, t.width_after(2)]);
    assert_eq!(short.z_ddagger.shape(), &[6, t.width_after(4)]);
    assert!(matches!(
        make_views(&state, &b1, &b2, 3, &cfg),
        Err(ClientError::ExitDepth { depth: 3, .. })
    ));
}

#[test]
fn exit_candidates_are_capped_by_split() {
    let (_, state, _) = deep_state(2, 1);
    assert_eq!(state.exit_candidates(), &[1, 2]);
    let t = BackboneTemplate::uniform(3, 5, 5, exits(&[1, 2, 4]), 3).unwrap();
    let model = ClientModel::init(&t, 3, &mut stream(1, Purpose::Init, 0, 0, 0));
    let shard = Shard {
        owner: 0,
        indices: vec![0],
        weight: 1.0,
    };
    assert!(matches!(
        ClientState::new(0, model, t.exit_set(), 0.5, shard, vec![0], vec![]),
        Err(ClientError::ExitDepth { depth: 3, .. })
    ));
}

#[test]
fn exit_depth_sampling_is_uniform() {
    assert_eq!(
        sample_exit_depth(&[3], &mut stream(0, Purpose::LocalStep, 0, 0, 0)),
        Some(3)
    );
    assert_eq!(
        sample_exit_depth(&[], &mut stream(0, Purpose::LocalStep, 0, 0, 0)),
        None
    );

    let candidates = [1, 2, 4];
    let mut rng = stream(11, Purpose::LocalStep, 0, 0, 0);
    let mut counts = [0usize; 3];
    let draws = 30_000;
    for _ in 0..draws {
        let k = sample_exit_depth(&candidates, &mut rng).unwrap();
        counts[candidates.iter().position(|&c| c == k).unwrap()] += 1;
    }
    for c in counts {
        let freq = c as f64 / draws as f64;
        assert!((freq - 1.0 / 3.0).abs() < 0.02, "frequency {freq}");
    }

    let a: Vec<_> = (0..50)
        .map(|i| sample_exit_depth(&candidates, &mut stream(5, Purpose::LocalStep, 1, i, 0)))
        .collect();
    let b: Vec<_> = (0..50)
        .map(|i| sample_exit_depth(&candidates, &mut stream(5, Purpose::LocalStep, 1, i, 0)))
        .collect();
    assert_eq!(a, b);
}

#[test]
fn outer_update_validates_inputs() {
    let ds = toy_data();
    let cfg = AdaptConfig::default();
    let mut state = toy_state(P0);
    let (_, ctx) = make_views(&state, &ds.batch(&[0]), &ds.batch(&[1]), 1, &cfg).unwrap();
    assert!(matches!(
        outer_update(&mut state, ctx, &Tensor::zeros(vec![1, 1]), 0.1, 1.5),
        Err(ClientError::Gamma(_))
    ));

    let other = toy_state(P0);
    let (_, ctx) = make_views(&other, &ds.batch(&[0]), &ds.batch(&[1]), 1, &cfg).unwrap();
    let mut foreign = toy_state(P0);
    foreign.id = 5;
    assert!(matches!(
        outer_update(&mut foreign, ctx, &Tensor::zeros(vec![1, 1]), 0.1, 0.5),
        Err(ClientError::ForeignContext {
            expected: 5,
            found: 0
        })
    ));
}

#[test]
fn gamma_one_and_zero_cut_grad_is_local_meta_gradient() {
    let ds = toy_data();
    let b1 = ds.batch(&[0, 1, 2]);
    let b2 = ds.batch(&[3, 4, 5]);
    let cfg = AdaptConfig {
        inner_lr: 0.1,
        inner_steps: 1,
        batch_size: 3,
    };
    let mut state = toy_state(P0);
    let (_, ctx) = make_views(&state, &b1, &b2, 1, &cfg).unwrap();
    let grad = outer_update(&mut state, ctx, &Tensor::zeros(vec![3, 1]), 0.0, 1.0).unwrap();
    let adapted = adapt(&toy_model(P0), &b2, &cfg).unwrap();
    let (_, want) = adapted.local_loss_grad(&b1).unwrap();
    assert_eq!(grad, want);
    assert_eq!(params(&state.model), P0);
}

fn infer_state(threshold: f64, zero_head: bool) -> (ClientState, ServerState) {
    let t = BackboneTemplate::uniform(2, 3, 3, exits(&[1, 2]), 4).unwrap();
    let mut model = ClientModel::init(&t, 2, &mut stream(3, Purpose::Init, 0, 0, 0));
    if zero_head {
        model.head.weights = Tensor::zeros(model.head.weights.shape().to_vec());
        model.head.bias = Tensor::zeros(vec![4]);
    }
    let shard = Shard {
        owner: 0,
        indices: vec![0],
        weight: 1.0,
    };
    let state =
        ClientState::new(0, model, t.exit_set(), threshold, shard, vec![0], vec![]).unwrap();
    let server = ServerState::init(&t, 1.0, 1.0, 0.1, &mut stream(3, Purpose::Init, 99, 0, 0));
    (state, server)
}

#[test]
fn zero_threshold_always_offloads() {
    let (state, mut server) = infer_state(0.0, false);
    let mut rng = stream(1, Purpose::Inference, 0, 0, 0);
    for i in 0..20 {
        let x = [i as f64 * 0.1 - 1.0, 0.3];
        let r = infer(&state, Some(&mut server), &x, 8, &mut rng).unwrap();
        assert_eq!(r.route, Route::Offload);
    }
}

#[test]
fn threshold_above_max_entropy_never_offloads() {
    let (state, _) = infer_state(4f64.ln() + 1e-9, true);
    let mut rng = stream(1, Purpose::Inference, 0, 0, 0);
    let r = infer(&state, None, &[0.2, -0.4], 8, &mut rng).unwrap();
    assert_eq!(r.route, Route::Local);
}

#[test]
fn entropy_tie_offloads() {
    let (mut state, mut server) = infer_state(0.0, true);
    let tie = softmax_entropy(&[0.0; 4]).unwrap();
    assert!((tie - 4f64.ln()).abs() < 1e-15);
    state.entropy_threshold = tie;
    let mut rng = stream(1, Purpose::Inference, 0, 0, 0);
    let r = infer(&state, Some(&mut server), &[0.2, -0.4], 8, &mut rng).unwrap();
    assert_eq!(r.route, Route::Offload);
    assert_eq!(r.entropy, tie);
}

#[test]
fn offload_without_server_is_an_error() {
    let (state, _) = infer_state(0.0, false);
    let mut rng = stream(1, Purpose::Inference, 0, 0, 0);
    assert!(matches!(
        infer(&state, None, &[0.1, 0.1], 8, &mut rng),
        Err(ClientError::ServerUnreachable)
    ));
}

#[test]
fn offload_rate_is_monotone_in_threshold() {
    let (mut state, mut server) = infer_state(0.0, false);
    let points: Vec<[f64; 2]> = (0..60)
        .map(|i| [(i as f64 * 0.7).sin() * 2.0, (i as f64 * 1.3).cos() * 2.0])
        .collect();
    let mut last = usize::MAX;
    for e in [0.0, 0.2, 0.5, 0.9, 1.2, 1.5] {
        state.entropy_threshold = e;
        let mut rng = stream(1, Purpose::Inference, 0, 0, 0);
        let offloaded = points
            .iter()
            .filter(|x| {
                infer(&state, Some(&mut server), &x[..], 8, &mut rng)
                    .unwrap()
                    .route
                    == Route::Offload
            })
            .count();
        assert!(offloaded <= last, "threshold {e}: {offloaded} > {last}");
        last = offloaded;
    }
}

#[test]
fn offload_rejects_depth_beyond_split() {
    let (state, mut server) = infer_state(0.0, false);
    let mut rng = stream(1, Purpose::Inference, 0, 0, 0);
    assert!(matches!(
        offload(&state, &mut server, &[0.0, 0.0], 3, 8, &mut rng),
        Err(ClientError::ExitDepth { depth: 3, .. })
    ));
    assert!(offload(&state, &mut server, &[0.0, 0.0], 1, 8, &mut rng).is_ok());
}

#[test]
fn personalize_zero_steps_copies_global() {
    let (_, mut state, ds) = deep_state(2, 4);
    let (_, other, _) = deep_state(2, 9);
    let mut rng = stream(1, Purpose::Personalize, 0, 0, 0);
    personalize(
        &mut state,
        &other.model,
        &ds,
        &AdaptConfig::default(),
        0,
        &mut rng,
    )
    .unwrap();
    assert_eq!(state.model, other.model);
}

#[test]
fn personalize_is_deterministic_and_fits_single_class() {
    let (_, base, ds) = deep_state(2, 4);
    let single: Vec<usize> = (0..ds.len()).filter(|&r| ds.labels[r] == 1).collect();
    let mut state = base.clone();
    state.train_rows = single.clone();
    let cfg = AdaptConfig {
        inner_lr: 0.1,
        inner_steps: 1,
        batch_size: 4,
    };
    let before = base.model.accuracy(&ds, &single).unwrap();
    let mut a = state.clone();
    let mut b = state.clone();
    personalize(
        &mut a,
        &base.model,
        &ds,
        &cfg,
        40,
        &mut stream(2, Purpose::Personalize, 2, 0, 0),
    )
    .unwrap();
    personalize(
        &mut b,
        &base.model,
        &ds,
        &cfg,
        40,
        &mut stream(2, Purpose::Personalize, 2, 0, 0),
    )
    .unwrap();
    assert_eq!(a.model, b.model);
    let after = a.model.accuracy(&ds, &single).unwrap();
    assert!(after >= before, "{after} < {before}");
    assert_eq!(after, 1.0);
}

#[test]
fn personalize_needs_training_rows() {
    let (_, mut state, ds) = deep_state(2, 4);
    state.train_rows.clear();
    let global = state.model.clone();
    let mut rng = stream(1, Purpose::Personalize, 0, 0, 0);
    assert!(matches!(
        personalize(
            &mut state,
            &global,
            &ds,
            &AdaptConfig::default(),
            3,
            &mut rng
        ),
        Err(ClientError::EmptyShard { client: 2 })
    ));
}
