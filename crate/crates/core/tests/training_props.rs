use cool::dataset_io::{generate_synthetic, prepare, PreparedData, RoadGraph, SyntheticSpec};
use cool::params::ParamGroup;
use cool::{Checkpoint, Component, Error, Model, TrainConfig, Trainer};

fn small_config() -> TrainConfig {
    TrainConfig {
        d: 8,
        prior_layers: 1,
        head_hidden: 8,
        epochs: 2,
        batch_size: 16,
        train_stride: 24,
        eval_stride: 24,
        seed: 3,
        ..TrainConfig::default()
    }
}

fn small_data(cfg: &TrainConfig) -> (RoadGraph, PreparedData) {
    let spec = SyntheticSpec { n_nodes: 4, n_days: 2, lag_pairs: Vec::new(), ..SyntheticSpec::default() };
    let (series, graph) = generate_synthetic(&spec, 1).unwrap();
    let data =
        prepare(&series, cfg.input_steps, cfg.output_steps, cfg.split(), cfg.train_stride, cfg.eval_stride).unwrap();
    (graph, data)
}

fn run(cfg: &TrainConfig, graph: &RoadGraph, data: &PreparedData) -> Trainer {
    let mut t = Trainer::new(cfg, graph, data.normalizer.clone()).unwrap();
    t.fit(&data.train, &data.val, |_, _| Ok(())).unwrap();
    t
}

#[test]
fn two_epoch_smoke_run() {
    let cfg = small_config();
    let (graph, data) = small_data(&cfg);
    let mut t = Trainer::new(&cfg, &graph, data.normalizer.clone()).unwrap();
    let log = t.fit(&data.train, &data.val, |_, _| Ok(())).unwrap();
    assert_eq!(log.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![1, 2]);
    for r in &log {
        assert!(r.train_mae.is_finite() && r.val_mae.is_finite() && r.val_rmse >= r.val_mae);
    }
    assert!(t.is_finished() && t.params().is_finite());
    assert_eq!(t.best_val_mae(), log.iter().map(|r| r.val_mae).reduce(f64::min));
}

#[test]
fn output_has_one_value_per_step_node_and_feature() {
    let cfg = TrainConfig::tiny();
    let (series, graph) = generate_synthetic(&SyntheticSpec::default(), 0).unwrap();
    let data = prepare(&series, 12, 12, cfg.split(), 1, 288).unwrap();
    let model = Model::new(&cfg, &graph, data.normalizer.clone()).unwrap();
    let params = model.init_params(&mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0)).unwrap();
    let pred = model.predict(&params, &data.test[0]).unwrap();
    assert_eq!((graph.n_nodes(), series.n_features()), (8, 1));
    assert_eq!(pred.len(), 12 * 8);
    assert!(pred.iter().all(|v| v.is_finite()));
}

#[test]
fn checkpoints_round_trip_through_disk() {
    let cfg = small_config();
    let (graph, data) = small_data(&cfg);
    let t = run(&cfg, &graph, &data);
    let ckpt = t.checkpoint();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ckpt);
    let model = back.model(&graph).unwrap();
    for s in &data.test {
        assert_eq!(model.predict(&back.params, s).unwrap(), t.model().predict(t.params(), s).unwrap());
    }
    let best = back.best();
    assert!(best.optimizer.is_none() && best.best_params.is_none());
    assert_eq!(Some(&best.params), ckpt.best_params.as_ref());
}

#[test]
fn training_is_deterministic() {
    let cfg = small_config();
    let (graph, data) = small_data(&cfg);
    let a = run(&cfg, &graph, &data).checkpoint().to_bytes().unwrap();
    let b = run(&cfg, &graph, &data).checkpoint().to_bytes().unwrap();
    assert_eq!(a, b);
}

#[test]
fn resuming_matches_an_uninterrupted_run() {
    let cfg = TrainConfig { epochs: 3, ..small_config() };
    let (graph, data) = small_data(&cfg);
    let straight = run(&cfg, &graph, &data).checkpoint();

    let first = run(&TrainConfig { epochs: 1, ..cfg.clone() }, &graph, &data).checkpoint();
    let reloaded = Checkpoint::from_bytes(&first.to_bytes().unwrap()).unwrap();
    let mut t = Trainer::resume(reloaded, &graph, Some(3)).unwrap();
    assert_eq!(t.epoch(), 1);
    let log = t.fit(&data.train, &data.val, |_, _| Ok(())).unwrap();
    assert_eq!(log.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![2, 3]);
    let resumed = t.checkpoint();
    assert_eq!(resumed.params, straight.params);
    assert_eq!(resumed.best_params, straight.best_params);
    assert_eq!(resumed.to_bytes().unwrap(), straight.to_bytes().unwrap());
}

#[test]
fn ablations_keep_the_parameter_set() {
    let cfg = small_config();
    let (graph, data) = small_data(&cfg);
    let shapes = |cfg: &TrainConfig| {
        let model = Model::new(cfg, &graph, data.normalizer.clone()).unwrap();
        let p = model.init_params(&mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(9)).unwrap();
        p.named_tensors().into_iter().map(|(n, m)| (n, m.shape())).collect::<Vec<_>>()
    };
    let full = shapes(&cfg);
    for c in Component::ALL {
        assert_eq!(shapes(&TrainConfig { ablate: vec![c], ..cfg.clone() }), full, "ablating {c}");
    }
}

#[test]
fn ablated_components_receive_no_gradient() {
    let cfg = TrainConfig { ablate: vec![Component::MultiRank], ..small_config() };
    let (graph, data) = small_data(&cfg);
    let model = Model::new(&cfg, &graph, data.normalizer.clone()).unwrap();
    let params = model.init_params(&mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(4)).unwrap();
    let (_, count, grads) = model.sample_gradient(&params, &data.train[0]).unwrap();
    assert!(count > 0);
    for ((name, _), g) in params.named_tensors().into_iter().zip(&grads) {
        if name.starts_with("rank") {
            assert!(g.as_slice().iter().all(|v| *v == 0.0), "{name}");
        }
    }
}

#[test]
fn non_finite_parameters_are_refused() {
    let cfg = small_config();
    let (graph, data) = small_data(&cfg);
    let mut ckpt = Trainer::new(&cfg, &graph, data.normalizer.clone()).unwrap().checkpoint();
    let mut first = true;
    ckpt.params.visit_mut(&mut |m| {
        if first {
            m.as_mut_slice()[0] = f64::NAN;
            first = false;
        }
    });
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.ckpt");
    assert!(matches!(ckpt.save(&path), Err(Error::Numeric(_))));
    assert!(!path.exists());

    let mut t = Trainer::resume(ckpt, &graph, None).unwrap();
    let batch: Vec<_> = data.train.iter().take(2).collect();
    match t.step(&batch, 1) {
        Err(Error::Numeric(m)) => assert!(m.contains("batch 1"), "{m}"),
        other => panic!("expected a numeric error, got {other:?}"),
    }
}

#[test]
fn mismatched_graphs_are_rejected() {
    let cfg = small_config();
    let (graph, data) = small_data(&cfg);
    let ckpt = Trainer::new(&cfg, &graph, data.normalizer.clone()).unwrap().checkpoint();
    let (_, other) = generate_synthetic(
        &SyntheticSpec { n_nodes: 5, n_days: 1, lag_pairs: Vec::new(), ..SyntheticSpec::default() },
        0,
    )
    .unwrap();
    assert!(matches!(ckpt.model(&other), Err(Error::Checkpoint(_))));
    assert!(Trainer::resume(ckpt, &other, None).is_err());
}
