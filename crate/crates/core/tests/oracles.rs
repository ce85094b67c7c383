mod support;

use fedmeta::analysis::{decompose_round, fomaml_maml_gap};
use fedmeta::data::{generate_synthetic, split_train_eval, ClientDataset, ClientId, FederatedDataset, SyntheticSpec};
use fedmeta::federation::{fomaml_update, inner_loop_reptile, run_round, RoundConfig, RoundIndex, Weighting};
use fedmeta::model::{gradient, maml_gradient_oracle, sgd_trajectory};
use fedmeta::optim::{make_client_steps, ClientOptimizerConfig, ServerOptimizerConfig, ServerOptimizerState};
use fedmeta::rng::{Purpose, Streams};
use fedmeta::{Activation, Batch, Example, LossKind, ModelSpec, ParamVector};
use std::collections::BTreeMap;
use support::*;

/// Well-conditioned data for the quadratic model: the augmented inputs span
/// every direction, so `A` is invertible.
fn quadratic_batch(seed: u64, n: usize, dim: usize, classes: usize) -> Batch {
    random_batch(&mut rng(seed), n, dim, classes)
}

#[test]
fn backprop_matches_reference_finite_differences() {
    let mut r = rng(2024);
    for case in 0..20u64 {
        let input = 2 + (case as usize % 4);
        let hidden = 3 + (case as usize % 5);
        let classes = 2 + (case as usize % 3);
        let activation = [Activation::Tanh, Activation::Identity, Activation::Relu][case as usize % 3];
        let spec = if case % 5 == 4 {
            ModelSpec::quadratic(input, classes).unwrap()
        } else {
            ModelSpec::new(input, vec![hidden, classes], activation, LossKind::SoftmaxCrossEntropy).unwrap()
        };
        let theta = random_params(&mut r, spec.param_count(), 0.8);
        let batch = random_batch(&mut r, 6, input, classes);
        let analytic = gradient(&spec, &theta, &batch).unwrap();
        let numeric = fd_gradient(|t| reference_loss(&spec, t, &batch), theta.as_slice(), 1e-5);
        let err = max_rel_err(analytic.as_slice(), &numeric, 1e-4);
        assert!(err <= 1e-5, "case {case}: max relative error {err}");
    }
}

#[test]
fn quadratic_maml_oracle_matches_closed_form() {
    let spec = ModelSpec::quadratic(3, 2).unwrap();
    let batch = quadratic_batch(5, 12, 3, 2);
    let (a, c) = quadratic_system(&spec, &batch);
    let beta = 0.5 / lambda_max(&a);
    let theta = random_params(&mut rng(6), spec.param_count(), 1.0);
    for k in [0usize, 1, 3, 5] {
        let batches = vec![batch.clone(); k];
        let fd = maml_gradient_oracle(&spec, &theta, &batches, Some(&batch), beta, 1e-5).unwrap();
        let exact = quadratic_maml(&a, &c, &to_dvec(theta.as_slice()), beta, k);
        let err = rel_norm_err(fd.as_slice(), exact.as_slice());
        assert!(err < 1e-6, "K={k}: relative error {err}");
    }
}

#[test]
fn quadratic_gap_matches_closed_form_and_scales_with_step() {
    let spec = ModelSpec::quadratic(3, 2).unwrap();
    let batch = quadratic_batch(7, 15, 3, 2);
    let (a, c) = quadratic_system(&spec, &batch);
    let theta = random_params(&mut rng(8), spec.param_count(), 1.0);
    let t = to_dvec(theta.as_slice());
    let k = 3;
    let batches = vec![batch.clone(); k];
    // the halving ratio tends to 1/2 only while K·β·λ_max is small
    let beta = 0.05 / lambda_max(&a);

    let gap = |b: f64| fomaml_maml_gap(&spec, &theta, &batches, Some(&batch), b, 1e-5).unwrap();
    let exact = |b: f64| (quadratic_maml(&a, &c, &t, b, k) - quadratic_fomaml(&a, &c, &t, b, k)).norm();

    for b in [beta, beta / 2.0] {
        let g = gap(b).gap_norm;
        let e = exact(b);
        assert!((g - e).abs() <= 1e-6 * e.max(1e-3), "beta {b}: {g} vs {e}");
    }
    let ratio = gap(beta / 2.0).gap_norm / gap(beta).gap_norm;
    assert!((0.3..=0.7).contains(&ratio), "ratio {ratio}");

    let tiny = gap(1e-6 * beta).gap_norm;
    assert!(tiny < 1e-6 * gap(beta).gap_norm.max(1.0));
}

#[test]
fn reptile_on_full_batch_quadratic_matches_closed_form() {
    let spec = ModelSpec::quadratic(2, 2).unwrap();
    let examples = quadratic_batch(9, 10, 2, 2).examples().to_vec();
    let client = ClientDataset {
        train: examples.clone(),
        test: examples[..2].to_vec(),
    };
    let batch = Batch::new(examples);
    let (a, c) = quadratic_system(&spec, &batch);
    let beta = 0.5 / lambda_max(&a);
    let theta = random_params(&mut rng(10), spec.param_count(), 1.0);
    let cfg = ClientOptimizerConfig::new(beta, 10).unwrap();
    for k in [1usize, 4, 9] {
        // a single full batch is reshuffled each epoch, but the mean loss is order-free
        let r = inner_loop_reptile(&spec, &theta, ClientId(0), &client, k, &cfg, &mut rng(k as u64), false).unwrap();
        let exact = quadratic_k_step_delta(&a, &c, &to_dvec(theta.as_slice()), beta, k);
        let err = rel_norm_err(&r.delta, exact.as_slice());
        assert!(err < 1e-10, "K={k}: {err}");
    }
}

fn mlp_setup(seed: u64) -> (ModelSpec, FederatedDataset, ParamVector) {
    let spec = ModelSpec::new(8, vec![16, 4], Activation::Tanh, LossKind::SoftmaxCrossEntropy).unwrap();
    let ds = generate_synthetic(&SyntheticSpec::new(seed, 6, 3, 60, 8, 4, 0.5)).unwrap();
    let ds = split_train_eval(ds, 0.0, seed).unwrap();
    let params = spec.init_params(&mut Streams::new(seed).stream(Purpose::Init, &[]));
    (spec, ds, params)
}

#[test]
fn fomaml_update_matches_trajectory_replay() {
    let (spec, ds, params) = mlp_setup(3);
    let cfg = RoundConfig::fomaml(3, 2, ClientOptimizerConfig::new(0.05, 7).unwrap());
    let streams = Streams::new(3);
    let server = ServerOptimizerState::new(ServerOptimizerConfig::sgd(1.0), params.dim()).unwrap();
    let at = RoundIndex {
        stage: 1,
        round_in_stage: 4,
        global_round: 4,
    };
    let (_, _, trace) = run_round(&spec, &params, &ds, &cfg, &server, &streams, at, true).unwrap();

    // Replay each client's batch sequence from its stream and recompute the
    // third gradient with the reference loss.
    let mut expected = vec![0.0; params.dim()];
    for id in &trace.sampled {
        let client = ds.client(*id).unwrap();
        let mut r = streams.stream(Purpose::ClientBatches, &[1, 4, id.0]);
        let batches = make_client_steps(client, 3, &cfg.client, &mut r).unwrap();
        let mut theta = params.as_slice().to_vec();
        let mut last = Vec::new();
        for b in &batches {
            last = fd_gradient(|t| reference_loss(&spec, t, b), &theta, 1e-6);
            for (p, g) in theta.iter_mut().zip(&last) {
                *p -= 0.05 * g;
            }
        }
        for (e, g) in expected.iter_mut().zip(&last) {
            *e += -0.05 * g / trace.sampled.len() as f64;
        }
    }
    let err = rel_norm_err(&trace.aggregated, &expected);
    assert!(err < 1e-6, "relative error {err}");
}

#[test]
fn fedavg_round_decomposes_into_fedsgd_plus_fomaml() {
    let (spec, ds, params) = mlp_setup(42);
    let client = ClientOptimizerConfig::new(0.1, 10).unwrap();
    let cfg = RoundConfig {
        weighting: Weighting::Uniform,
        ..RoundConfig::reptile(3, 4, client)
    };
    let server = ServerOptimizerState::new(ServerOptimizerConfig::sgd(1.0), params.dim()).unwrap();
    let at = RoundIndex {
        stage: 1,
        round_in_stage: 1,
        global_round: 1,
    };
    let (_, _, trace) = run_round(&spec, &params, &ds, &cfg, &server, &Streams::new(42), at, true).unwrap();
    let report = decompose_round(&trace, 0.1).unwrap();
    assert_eq!(report.g_fomaml_by_j.len(), 3);
    assert!(report.residual_norm <= 1e-10, "residual {}", report.residual_norm);

    // independent sum over the recorded steps
    let mut manual = vec![0.0; params.dim()];
    for c in &trace.clients {
        for g in &c.step_gradients {
            for (m, v) in manual.iter_mut().zip(g.as_slice()) {
                *m += -0.1 * v / 3.0;
            }
        }
    }
    assert!(rel_norm_err(&trace.aggregated, &manual) < 1e-12);
}

#[test]
fn weighted_round_is_rejected_by_decomposition() {
    let spec = ModelSpec::new(2, vec![2], Activation::Identity, LossKind::SoftmaxCrossEntropy).unwrap();
    let mk = |n: usize| ClientDataset {
        train: vec![Example::new(vec![0.5, -0.5], 1); n],
        test: vec![Example::new(vec![0.5, -0.5], 1)],
    };
    let clients: BTreeMap<_, _> = [(ClientId(0), mk(4)), (ClientId(1), mk(9))].into_iter().collect();
    let ds = FederatedDataset::new(clients, 2, 2).unwrap();
    let cfg = RoundConfig::fedavg(2, 1, ClientOptimizerConfig::new(0.1, 2).unwrap());
    let params = spec.zeros();
    let server = ServerOptimizerState::new(ServerOptimizerConfig::sgd(1.0), params.dim()).unwrap();
    let at = RoundIndex {
        stage: 1,
        round_in_stage: 1,
        global_round: 1,
    };
    let (_, _, trace) = run_round(&spec, &params, &ds, &cfg, &server, &Streams::new(0), at, true).unwrap();
    assert!(matches!(
        decompose_round(&trace, 0.1),
        Err(fedmeta::Error::Precondition(_))
    ));
}

#[test]
fn fomaml_zero_is_a_plain_gradient_step() {
    let (spec, ds, params) = mlp_setup(11);
    let id = ds.train_client_ids()[0];
    let client = ds.client(id).unwrap();
    let cfg = ClientOptimizerConfig::new(0.05, 8).unwrap();
    let batches = make_client_steps(client, 1, &cfg, &mut rng(1)).unwrap();
    let (_, grads) = sgd_trajectory(&spec, &params, &batches, 0.05).unwrap();
    let upd = fomaml_update(&[grads.as_slice()], 0, 0.05).unwrap();
    let reference = fd_gradient(|t| reference_loss(&spec, t, &batches[0]), params.as_slice(), 1e-6);
    let scaled: Vec<f64> = reference.iter().map(|g| -0.05 * g).collect();
    assert!(rel_norm_err(&upd, &scaled) < 1e-6);
}
