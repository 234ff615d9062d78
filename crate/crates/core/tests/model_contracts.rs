use infosum::diagnostics::{check_config, synthetic_example};
use infosum::model::{
    build_forward, forward, init_params, ModelConfig, ModelParams, PassOptions, EMBED_PARAM,
};
use infosum::objectives::{attach_losses, Alphas};
use infosum::tokenizer::Specials;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tensorgrad::Graph;

fn config(seed: u64) -> ModelConfig {
    ModelConfig {
        layers: 2,
        dropout: 0.1,
        max_source_len: 16,
        max_summary_len: 10,
        seed,
        init_std: 0.4,
        ..check_config()
    }
}

#[test]
fn decoder_logits_are_causal() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for seed in 0..10 {
        let cfg = config(seed);
        let params = init_params(&cfg).unwrap();
        let ex = synthetic_example(cfg.vocab_size, 9, 7, seed);
        let base = forward(&ex, &params, PassOptions::default(), None).unwrap();
        let t = rng.random_range(0..ex.teacher_inputs.len() - 1);
        let mut changed = ex.clone();
        for id in &mut changed.teacher_inputs.0[t + 1..] {
            *id = rng.random_range(4..cfg.vocab_size as u32);
        }
        let other = forward(&changed, &params, PassOptions::default(), None).unwrap();
        let v = cfg.vocab_size;
        assert_eq!(
            &base.decoder_logits.data()[..(t + 1) * v],
            &other.decoder_logits.data()[..(t + 1) * v],
            "seed {seed}, prefix through {t}"
        );
        assert_ne!(base.decoder_logits.data(), other.decoder_logits.data());
    }
}

fn total_and_embed_grad(params: &ModelParams, pad: Option<(usize, usize)>) -> (f64, Vec<f64>) {
    let cfg = &params.config;
    let ex = synthetic_example(cfg.vocab_size, 9, 6, 4);
    let mut g = Graph::<f64>::new();
    let fwd = build_forward(&mut g, cfg, &ex, PassOptions { pad_to: pad }, None).unwrap();
    attach_losses(&mut g, &fwd, &ex, cfg.d_model, Alphas::default());
    let total = g.forward_eval(&params.to_f64()).unwrap().item().unwrap();
    let grads = g.backward().unwrap();
    let pad_row = grads[EMBED_PARAM].row(Specials::DEFAULT.pad as usize).to_vec();
    (total, pad_row)
}

#[test]
fn padding_changes_nothing() {
    let params = init_params(&config(2)).unwrap();
    let (plain, plain_row) = total_and_embed_grad(&params, None);
    let (padded, padded_row) = total_and_embed_grad(&params, Some((16, 10)));
    assert!((plain - padded).abs() < 1e-12, "{plain} vs {padded}");
    assert!(plain_row.iter().all(|&x| x == 0.0));
    assert!(padded_row.iter().all(|&x| x == 0.0), "{padded_row:?}");
}

#[test]
fn eval_pass_is_bitwise_repeatable_and_dropout_is_seeded() {
    let cfg = config(5);
    let params = init_params(&cfg).unwrap();
    let ex = synthetic_example(cfg.vocab_size, 12, 8, 5);
    let a = forward(&ex, &params, PassOptions::default(), None).unwrap();
    let b = forward(&ex, &params, PassOptions::default(), None).unwrap();
    assert_eq!(a, b);

    let run = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        forward(&ex, &params, PassOptions::default(), Some(&mut rng)).unwrap()
    };
    assert_eq!(run(9), run(9));
    assert_ne!(run(9).decoder_logits, a.decoder_logits);
}

#[test]
fn shapes_follow_the_example() {
    let cfg = config(6);
    let params = init_params(&cfg).unwrap();
    let ex = synthetic_example(cfg.vocab_size, 11, 5, 6);
    let out = forward(&ex, &params, PassOptions::default(), None).unwrap();
    assert_eq!(out.h_x.shape(), &[11, cfg.d_model]);
    assert_eq!(out.h_y.shape(), &[5, cfg.d_model]);
    assert_eq!(out.decoder_logits.shape(), &[5, cfg.vocab_size]);
    let k: usize = ex.source_entities.iter().map(|s| s.n()).sum();
    assert_eq!(out.source_logits.unwrap().shape(), &[k, cfg.vocab_size]);
}

#[test]
fn heads_have_independent_storage() {
    let cfg = config(7);
    let mut params = init_params(&cfg).unwrap();
    let ex = synthetic_example(cfg.vocab_size, 10, 6, 7);
    let before = forward(&ex, &params, PassOptions::default(), None).unwrap();
    for x in params.get_mut("head.source.weight").unwrap().data_mut() {
        *x += 1.0;
    }
    let after = forward(&ex, &params, PassOptions::default(), None).unwrap();
    assert_eq!(before.decoder_logits, after.decoder_logits);
    assert_ne!(before.source_logits, after.source_logits);
    assert_ne!(
        params.get("head.source.weight").unwrap(),
        params.get("head.decoder.weight").unwrap()
    );
}

#[test]
fn same_seed_same_weights() {
    let a = init_params(&config(8)).unwrap();
    let b = init_params(&config(8)).unwrap();
    let c = init_params(&config(9)).unwrap();
    let bytes = |p: &ModelParams| {
        let mut v = Vec::new();
        p.save(&mut v).unwrap();
        v
    };
    assert_eq!(bytes(&a), bytes(&b));
    assert_ne!(bytes(&a), bytes(&c));
}

#[test]
fn checkpoint_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let params = init_params(&config(10)).unwrap();
    params.save_file(&path).unwrap();
    let back = ModelParams::load_file(&path).unwrap();
    assert_eq!(back.config, params.config);
    assert_eq!(back.tensors, params.tensors);

    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 3);
    assert!(ModelParams::load(bytes.as_slice()).is_err());
}
