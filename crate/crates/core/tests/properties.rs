use fedmeta::analysis::decompose_round;
use fedmeta::data::{generate_synthetic, split_train_eval, FederatedDataset, SyntheticSpec};
use fedmeta::federation::{
    run_personalized_fedavg, run_round, EvalConfig, RoundConfig, RoundIndex, RunOptions, StageConfig, TracePolicy,
};
use fedmeta::optim::{ClientOptimizerConfig, ServerOptimizerConfig, ServerOptimizerState};
use fedmeta::personalization::{
    epochs_sweep, eval_population, PersonalizationConfig, PersonalizationOptimizer, Population,
};
use fedmeta::rng::{Purpose, Streams};
use fedmeta::{Activation, LossKind, ModelSpec};
use proptest::prelude::*;

fn dataset(seed: u64, clients: usize) -> FederatedDataset {
    let ds = generate_synthetic(&SyntheticSpec::new(seed, clients, 3, 40, 5, 4, 0.7)).unwrap();
    split_train_eval(ds, 0.25, seed).unwrap()
}

fn spec() -> ModelSpec {
    ModelSpec::new(5, vec![8, 4], Activation::Tanh, LossKind::SoftmaxCrossEntropy).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_uniform_round_decomposes(seed in 0u64..1000, t in 1usize..5, k in 1usize..7, lr in 0.001f64..0.3, bs in 1usize..12) {
        let ds = dataset(seed, 8);
        let spec = spec();
        let params = spec.init_params(&mut Streams::new(seed).stream(Purpose::Init, &[]));
        let cfg = RoundConfig::reptile(t, k, ClientOptimizerConfig::new(lr, bs).unwrap());
        let server = ServerOptimizerState::new(ServerOptimizerConfig::sgd(1.0), params.dim()).unwrap();
        let at = RoundIndex { stage: 1, round_in_stage: 1, global_round: 1 };
        let (_, _, trace) = run_round(&spec, &params, &ds, &cfg, &server, &Streams::new(seed), at, true).unwrap();
        let report = decompose_round(&trace, lr).unwrap();
        prop_assert_eq!(report.g_fomaml_by_j.len(), k - 1);
        prop_assert!(report.residual_norm <= 1e-10, "residual {}", report.residual_norm);
    }

    #[test]
    fn zero_personalization_epochs_report_initial_bit_exact(seed in 0u64..1000) {
        let ds = dataset(seed, 8);
        let spec = spec();
        let params = spec.init_params(&mut Streams::new(seed).stream(Purpose::Init, &[]));
        let cfg = PersonalizationConfig::sgd(0.02, 0);
        let r = eval_population(&spec, &params, &ds, Population::EvalClients, &cfg, &Streams::new(seed), 0).unwrap();
        for o in r.outcomes() {
            prop_assert_eq!(o.initial_acc.to_bits(), o.personalized_acc.to_bits());
        }
        let s = r.summary();
        prop_assert_eq!(s.mean_initial_acc.to_bits(), s.mean_personalized_acc.to_bits());
        prop_assert_eq!(s.negative_fraction, 0.0);
    }
}

fn short_run(seed: u64) -> fedmeta::federation::TrainingRun {
    let ds = dataset(7, 12);
    let spec = spec();
    let client = ClientOptimizerConfig::new(0.05, 10).unwrap();
    let s1 = StageConfig::fedavg_momentum(4, RoundConfig::fedavg(3, 2, client), 1.0, 0.9);
    let s2 = StageConfig::reptile_adam(3, RoundConfig::reptile(3, 4, client), 0.003);
    let opts = RunOptions {
        eval: Some(EvalConfig {
            personalization: PersonalizationConfig::sgd(0.05, 2),
            every: 2,
            population: Population::EvalClients,
        }),
        trace: TracePolicy::All,
        checkpoint_every: 0,
        wallclock: false,
    };
    run_personalized_fedavg(&spec, &ds, &s1, &s2, &opts, seed).unwrap()
}

#[test]
fn runs_do_not_depend_on_thread_count() {
    let one = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap()
        .install(|| short_run(5));
    let many = rayon::ThreadPoolBuilder::new()
        .num_threads(4)
        .build()
        .unwrap()
        .install(|| short_run(5));
    assert_eq!(one, many);
    assert_ne!(one.params, short_run(6).params);
}

#[test]
fn sweep_rows_match_individual_evaluations() {
    let ds = dataset(3, 10);
    let spec = spec();
    let params = spec.init_params(&mut Streams::new(3).stream(Purpose::Init, &[]));
    let streams = Streams::new(3);
    let sgd = PersonalizationConfig::sgd(0.05, 0);
    let adam = PersonalizationConfig {
        optimizer: PersonalizationOptimizer::default_adam(),
        ..sgd
    };
    let rows = epochs_sweep(
        &spec,
        &params,
        &ds,
        Population::EvalClients,
        &[sgd, adam],
        5,
        true,
        &streams,
        9,
    )
    .unwrap();
    assert_eq!(rows.len(), 12);
    for row in &rows {
        let base = if row.optimizer.starts_with("sgd") { sgd } else { adam };
        let cfg = PersonalizationConfig {
            epochs: row.epochs,
            ..base
        };
        let r = eval_population(&spec, &params, &ds, Population::EvalClients, &cfg, &streams, 9).unwrap();
        assert_eq!(r.summary().mean_personalized_acc, row.mean_personalized_acc, "{row:?}");
    }
}
