use csnn::datasets::{gen_neighborsmatch, MetricKind, NodeDataset, Split};
use csnn::model::{Activation, GraphContext, MapPredictor, ModelConfig, ModelKind, Normalization};
use csnn::training::{neighborsmatch_setup, train, Checkpoint, Schedule};
use csnn::verify::random_connected_graph;
use csnn::{Error, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn labeled_graph(n: usize, classes: usize, seed: u64) -> NodeDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = random_connected_graph(n, 0.15, &mut rng);
    let mut features = Tensor::zeros(n, 5);
    for v in &mut features.data {
        *v = rng.gen_range(-1.0..1.0);
    }
    let labels = (0..n).map(|i| Some(i % classes)).collect();
    let split = Split {
        train: (0..n / 2).collect(),
        val: (n / 2..3 * n / 4).collect(),
        test: (3 * n / 4..n).collect(),
    };
    NodeDataset::new(g, features, labels, vec![split], MetricKind::Accuracy, None).unwrap()
}

fn small_config(ds: &NodeDataset) -> ModelConfig {
    let mut c = ModelConfig::new(ds.num_features(), ds.num_classes());
    c.stalk_dim = 2;
    c.hidden_channels = 4;
    c.num_layers = 2;
    c.predictor_hidden = 6;
    c
}

#[test]
fn one_adam_step_lowers_the_train_loss_for_most_seeds() {
    let ds = labeled_graph(24, 3, 1);
    let config = small_config(&ds);
    let mut lowered = 0;
    for seed in 0..10 {
        let mut s = Schedule::new(1);
        s.seed = seed;
        s.lr = 1e-3;
        let out = train(&config, &ds, 0, &s, |_| Ok(())).unwrap();
        assert_eq!(out.history.len(), 2);
        if out.history[1].train_loss < out.history[0].train_loss {
            lowered += 1;
        }
    }
    assert!(lowered >= 9, "loss went down for {lowered} of 10 seeds");
}

#[test]
fn zero_epochs_returns_the_initial_evaluation() {
    let ds = labeled_graph(12, 2, 2);
    let out = train(&small_config(&ds), &ds, 0, &Schedule::new(0), |_| Ok(())).unwrap();
    assert_eq!(out.history.len(), 1);
    assert_eq!(out.history[0].epoch, 0);
    assert_eq!(out.best.epoch, 0);
    assert!(out.history[0].val_metric.is_some() && out.history[0].test_metric.is_some());
}

#[test]
fn training_is_deterministic_under_a_seed() {
    let ds = labeled_graph(20, 3, 3);
    let mut config = small_config(&ds);
    config.dropout = 0.3;
    config.input_dropout = 0.2;
    let mut s = Schedule::new(15);
    s.seed = 7;
    s.eval_every = 3;
    let a = train(&config, &ds, 0, &s, |_| Ok(())).unwrap();
    let b = train(&config, &ds, 0, &s, |_| Ok(())).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.best, b.best);
    assert_eq!(a.history.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![0, 3, 6, 9, 12, 15]);
    s.seed = 8;
    let c = train(&config, &ds, 0, &s, |_| Ok(())).unwrap();
    assert_ne!(a.history, c.history);
}

#[test]
fn overfits_a_small_graph() {
    let ds = labeled_graph(30, 3, 4);
    let mut s = Schedule::new(2000);
    s.eval_every = 10;
    s.stop_at_train_metric = Some(1.0);
    let out = train(&ModelConfig::new(ds.num_features(), ds.num_classes()), &ds, 0, &s, |_| Ok(())).unwrap();
    let hit = out.history.iter().find(|r| r.train_metric == 1.0).expect("reaches full train accuracy");
    assert_eq!(out.last.epoch, hit.epoch, "stops at the first evaluation that reaches the target");
}

#[test]
fn checkpoint_round_trips_and_rejects_other_versions() {
    let ds = labeled_graph(16, 2, 5);
    let mut s = Schedule::new(5);
    s.seed = 3;
    let out = train(&small_config(&ds), &ds, 0, &s, |_| Ok(())).unwrap();
    let text = out.best.to_json().unwrap();
    let back = Checkpoint::from_json(&text).unwrap();
    assert_eq!(back, out.best);
    let ctx = GraphContext::new(&ds.graph);
    let a = out.best.to_model().unwrap().predict_logits(&ctx, &ds.features).unwrap();
    let b = back.to_model().unwrap().predict_logits(&ctx, &ds.features).unwrap();
    assert_eq!(a, b);

    let mut old = back.clone();
    old.version += 1;
    assert!(matches!(old.to_model(), Err(Error::Schema { .. })));
    let mut short = back;
    let name = short.params.keys().next().unwrap().clone();
    short.params.get_mut(&name).unwrap().data.pop();
    assert!(short.to_model().is_err());
}

#[test]
fn schedule_and_config_mismatches_are_rejected() {
    let ds = labeled_graph(10, 2, 6);
    let config = small_config(&ds);
    let mut s = Schedule::new(1);
    s.max_seconds = Some(0.0);
    assert!(matches!(train(&config, &ds, 0, &s, |_| Ok(())), Err(Error::Config(_))));
    s.max_seconds = None;
    s.eval_every = 0;
    assert!(matches!(train(&config, &ds, 0, &s, |_| Ok(())), Err(Error::Config(_))));
    let mut wrong = config.clone();
    wrong.input_dim += 1;
    assert!(matches!(train(&wrong, &ds, 0, &Schedule::new(1), |_| Ok(())), Err(Error::Config(_))));
    assert!(train(&config, &ds, 1, &Schedule::new(1), |_| Ok(())).is_err());
}

#[test]
fn neighborsmatch_setup_uses_the_benchmark_hyperparameters() {
    let nm = gen_neighborsmatch(3, 4, 0).unwrap();
    let (c, s) = neighborsmatch_setup(&nm, ModelKind::Csnn, 5, 0.95);
    assert_eq!((c.stalk_dim, c.hidden_channels, c.num_layers), (2, 32, 4));
    assert_eq!(c.activation, Activation::Identity);
    assert_eq!(c.map_predictor, MapPredictor::MeanAgg(4));
    assert_eq!(c.predictor_hidden, 32);
    assert_eq!((c.dropout, c.input_dropout), (0.0, 0.0));
    assert!(c.left_weights && c.right_weights && c.layer_norm);
    assert_eq!(c.normalization, Normalization::Augmented);
    assert_eq!((s.seed, s.stop_at_train_metric, s.max_seconds), (5, Some(0.95), None));
    let (g, _) = neighborsmatch_setup(&nm, ModelKind::Gcn, 5, 1.0);
    assert_eq!((g.model, g.num_layers, g.hidden_channels), (ModelKind::Gcn, 4, 32));
}
