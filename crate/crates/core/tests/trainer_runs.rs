mod common;

use infosum::model::{init_params, ModelConfig, ModelParams, COUPLING_PARAM};
use infosum::objectives::Alphas;
use infosum::trainer::{
    train, validate, EpochLog, OutputDir, TrainConfig, TrainError, BEST_CHECKPOINT, EPOCH_LOG,
    LAST_CHECKPOINT,
};

fn small_model(vocab: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        d_model: 16,
        layers: 1,
        heads: 2,
        ffn_dim: 32,
        ..common::overfit_model(vocab, seed)
    }
}

fn quick(epochs: usize, alphas: Alphas) -> TrainConfig {
    TrainConfig {
        learning_rate: 3e-3,
        epochs,
        batch_size: 4,
        alphas,
        seed: 4,
        ..TrainConfig::default()
    }
}

#[test]
fn objectives_change_the_first_step() {
    let corpus = common::overfit_corpus();
    let init = init_params(&small_model(corpus.table.vocab_size(), 1)).unwrap();
    let config = |alphas| TrainConfig {
        total_steps: Some(100),
        ..quick(1, alphas)
    };
    let step = |alphas| {
        train(
            &corpus.examples[..4],
            &[],
            &corpus.table,
            &config(alphas),
            init.clone(),
            &OutputDir(None),
        )
        .unwrap()
        .params
    };
    let plain = step(Alphas::MLE_ONLY);
    let full = step(Alphas::default());
    assert_ne!(plain.tensors, full.tensors);
    assert_ne!(plain.tensors, init.tensors);
    // Only the full objective reaches the transport coupling.
    assert_eq!(plain.get(COUPLING_PARAM), init.get(COUPLING_PARAM).map(|w| {
        let mut w = w.clone();
        let decay = 1.0 - 3e-3 * 1e-6;
        for x in w.data_mut() {
            *x = (*x as f64 * decay) as f32;
        }
        w
    }).as_ref());
    assert_ne!(full.get(COUPLING_PARAM), plain.get(COUPLING_PARAM));
}

#[test]
fn best_checkpoint_reproduces_its_validation_score() {
    let corpus = common::overfit_corpus();
    let train_set = &corpus.examples[..8];
    let val_set = &corpus.examples[..4];
    let dir = tempfile::tempdir().unwrap();
    let outcome = train(
        train_set,
        val_set,
        &corpus.table,
        &TrainConfig {
            learning_rate: 1e-2,
            batch_size: 1,
            patience: 100,
            ..quick(60, Alphas::MLE_ONLY)
        },
        init_params(&small_model(corpus.table.vocab_size(), 2)).unwrap(),
        &OutputDir(Some(dir.path().to_path_buf())),
    )
    .unwrap();
    assert_eq!(outcome.history.scores.len(), 60);
    assert!(outcome.history.scores.iter().any(|&s| s > 0.0));
    assert!(!outcome.stopped_early);
    let best_epoch = outcome.history.best_epoch().unwrap();
    let (epoch, best) = outcome.best.as_ref().unwrap();
    assert_eq!(*epoch, best_epoch);

    let loaded = ModelParams::load_file(&dir.path().join(BEST_CHECKPOINT)).unwrap();
    assert_eq!(&loaded.tensors, &best.tensors);
    let triple = validate(&loaded, val_set, &corpus.table, common::OVERFIT_LIMITS.summary).unwrap();
    let recorded = outcome.history.scores[outcome.history.best_index().unwrap()];
    assert_eq!(triple.mean_f1(), recorded);

    let last = ModelParams::load_file(&dir.path().join(LAST_CHECKPOINT)).unwrap();
    assert_eq!(last.tensors, outcome.params.tensors);
    let log: Vec<EpochLog> = std::fs::read_to_string(dir.path().join(EPOCH_LOG))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(log, outcome.log);
    assert!(log.iter().all(|e| e.loss.total.is_finite()));
}

#[test]
fn non_finite_losses_name_the_term() {
    let corpus = common::overfit_corpus();
    let cfg = small_model(corpus.table.vocab_size(), 3);
    let run = |params| {
        train(
            &corpus.examples[..2],
            &[],
            &corpus.table,
            &quick(1, Alphas::default()),
            params,
            &OutputDir(None),
        )
    };

    let mut params = init_params(&cfg).unwrap();
    params.get_mut(COUPLING_PARAM).unwrap().data_mut()[0] = f32::INFINITY;
    match run(params) {
        Err(TrainError::NonFinite { term, epoch, .. }) => {
            assert_eq!(term, "ot");
            assert_eq!(epoch, 1);
        }
        other => panic!("expected a non-finite abort, got {other:?}"),
    }

    let mut params = init_params(&cfg).unwrap();
    params.get_mut("embed.tokens").unwrap().data_mut()[70] = f32::NAN;
    match run(params) {
        Err(TrainError::NonFinite { term, .. }) => assert_eq!(term, "model forward pass"),
        other => panic!("expected a non-finite abort, got {other:?}"),
    }
}

#[test]
fn empty_dataset_is_rejected() {
    let corpus = common::overfit_corpus();
    let params = init_params(&small_model(corpus.table.vocab_size(), 0)).unwrap();
    let err = train(&[], &[], &corpus.table, &quick(1, Alphas::default()), params, &OutputDir(None));
    assert!(matches!(err, Err(TrainError::EmptyDataset)));
}
