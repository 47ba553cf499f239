use zscir_core::eval::{EvalProtocol, QueryMode};
use zscir_core::experiments::{training_pool, Workbench};
use zscir_core::model::params_hash;
use zscir_core::train::{combiner_objective, finetune_combiner, frozen_embeddings, train, TrainConfig};
use zscir_core::triplets::build_dataset;
use zscir_core::world::generate_world;
use zscir_core::{Checkpoint, ImageRecord, RunConfig, Tokenizer};

fn small_run() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model.d_model = 32;
    cfg.model.n_blocks = 2;
    cfg
}

fn dataset(cfg: &RunConfig, n: usize) -> (Vec<ImageRecord>, zscir_core::triplets::TripletDataset) {
    let images = generate_world(&cfg.world).unwrap();
    let (cap, reform) = cfg.backend.build(&cfg.world).unwrap();
    let mut sampling = cfg.sampling.clone();
    sampling.n_pairs = n;
    let ds = build_dataset(&training_pool(&images), &sampling, &*cap, &*reform, cfg.backend.word_cap).unwrap();
    (images, ds)
}

#[test]
fn toy_model_loss_falls_over_thirty_epochs() {
    let cfg = RunConfig::default();
    let (images, ds) = dataset(&cfg, 200);
    let (_, log) = train(&ds, &images, &cfg.model, Tokenizer::for_world(&cfg.world), &cfg.train).unwrap();
    let means = log.epoch_means();
    assert_eq!(means.len(), 30);
    assert!(means[29] < means[0], "first {} last {}", means[0], means[29]);
}

#[test]
fn zero_epochs_leave_the_initialisation() {
    let cfg = small_run();
    let (images, ds) = dataset(&cfg, 50);
    let tok = Tokenizer::for_world(&cfg.world);
    let tcfg = TrainConfig {
        epochs: 0,
        ..cfg.train.clone()
    };
    let (ckpt, log) = train(&ds, &images, &cfg.model, tok.clone(), &tcfg).unwrap();
    let mut model = cfg.model.clone();
    model.text_vocab_size = tok.vocab_size();
    let init = Checkpoint::init(&model, tok).unwrap();
    assert_eq!(ckpt.to_bytes().unwrap(), init.to_bytes().unwrap());
    assert!(log.steps.is_empty());
}

#[test]
fn seeded_training_repeats_exactly() {
    let cfg = small_run();
    let (images, ds) = dataset(&cfg, 120);
    let tcfg = TrainConfig {
        epochs: 2,
        ..cfg.train.clone()
    };
    let run = || {
        train(&ds, &images, &cfg.model, Tokenizer::for_world(&cfg.world), &tcfg)
            .unwrap()
            .0
            .to_bytes()
            .unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn training_beats_initialisation_and_combiner_keeps_backbone() {
    let mut cfg = small_run();
    cfg.sampling.n_pairs = 600;
    cfg.train.epochs = 15;
    cfg.train.learning_rate = 1e-3;
    let bench = Workbench::new(&cfg).unwrap();
    let ds = bench.dataset(cfg.sampling.n_pairs, 0).unwrap();
    let (trained, _) = train(&ds, &bench.images, &cfg.model, bench.tokenizer.clone(), &cfg.train).unwrap();

    let protocol = EvalProtocol {
        modes: vec![QueryMode::Reformulated],
        ranking_depth: 0,
        per_meta_class: false,
        ..EvalProtocol::default()
    };
    let mut model = cfg.model.clone();
    model.text_vocab_size = bench.tokenizer.vocab_size();
    let init = Checkpoint::init(&model, bench.tokenizer.clone()).unwrap();
    let r1 = |c: &Checkpoint| bench.evaluate(c, &protocol).unwrap().metric(QueryMode::Reformulated, "R@1").unwrap();
    let (before, after) = (r1(&init), r1(&trained));
    assert!(after > before, "R@1 untrained {before}, trained {after}");

    // Different texts on one image lead to different queries.
    let im = &bench.images[0];
    let a = trained.embed_queries(&[im], &["change red to blue"]).unwrap();
    let b = trained.embed_queries(&[im], &["make it striped"]).unwrap();
    assert!((&a - &b).iter().map(|v| v * v).sum::<f64>() > 0.0);

    let (tuned, log) = finetune_combiner(&trained, &ds, &bench.images, &cfg.train).unwrap();
    assert_eq!(tuned.backbone_hash(), trained.backbone_hash());
    assert_eq!(params_hash(&tuned.online), params_hash(&trained.online));
    assert!(!log.steps.is_empty());
    let emb = frozen_embeddings(&trained, &ds, &bench.images).unwrap();
    let bs = cfg.train.batch_size;
    // λ lives on an open interval, so compare against the starting point.
    let fitted = combiner_objective(&emb, tuned.lambda, trained.tau, bs).unwrap();
    let start = combiner_objective(&emb, trained.lambda, trained.tau, bs).unwrap();
    assert!(fitted < start, "fitted λ={} objective {fitted} vs start λ={} {start}", tuned.lambda, trained.lambda);
}

#[test]
fn no_ema_run_still_learns() {
    let mut cfg = small_run();
    cfg.train.epochs = 5;
    cfg.train.no_ema = true;
    let (images, ds) = dataset(&cfg, 300);
    let (_, log) = train(&ds, &images, &cfg.model, Tokenizer::for_world(&cfg.world), &cfg.train).unwrap();
    let means = log.epoch_means();
    assert!(means.iter().all(|m| m.is_finite()));
    assert!(means[4] < means[0]);
}
