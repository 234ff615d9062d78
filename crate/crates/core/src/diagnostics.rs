//! Finite-difference checks of every loss term on a full model pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tensorgrad::{grad_check, GradReport, Graph};

use crate::corpus::{Side, TokenEntitySpan, TrainingExample};
use crate::model::{build_forward, ModelConfig, ModelError, ModelParams, PassOptions};
use crate::objectives::{attach_losses, Alphas, TERMS};
use crate::tokenizer::{Specials, TokenId, TokenSeq};

/// Small model used for gradient checks: one layer, two heads, 37 tokens.
///
/// Weights are drawn wider than the training default so that every
/// parameter moves the loss by more than finite-difference round-off.
pub fn check_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 37,
        d_model: 8,
        layers: 1,
        heads: 2,
        ffn_dim: 16,
        dropout: 0.0,
        max_source_len: 12,
        max_summary_len: 7,
        seed: 0,
        init_std: 0.3,
    }
}

/// Random example with `source_len`/`summary_len` tokens (each ending in
/// `</s>`) and two entities per side: one single-token, one two-token.
pub fn synthetic_example(
    vocab: usize,
    source_len: usize,
    summary_len: usize,
    seed: u64,
) -> TrainingExample {
    assert!(source_len >= 4 && summary_len >= 4, "room for two entities");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sp = Specials::DEFAULT;
    let first = sp.unk as usize + 1;
    let mut content = |n: usize| -> Vec<TokenId> {
        let mut ids: Vec<TokenId> = (0..n - 1)
            .map(|_| rng.random_range(first..vocab) as TokenId)
            .collect();
        ids.push(sp.eos);
        ids
    };
    let source = content(source_len);
    let summary = content(summary_len);
    let mut teacher = vec![sp.bos];
    teacher.extend_from_slice(&summary[..summary_len - 1]);
    let spans = |len: usize, side| {
        vec![
            TokenEntitySpan {
                token_start: 0,
                token_end: 1,
                side,
            },
            TokenEntitySpan {
                token_start: len - 3,
                token_end: len - 1,
                side,
            },
        ]
    };
    TrainingExample {
        source_entities: spans(source_len, Side::Source),
        summary_entities: spans(summary_len, Side::Summary),
        source: TokenSeq(source),
        summary: TokenSeq(summary),
        teacher_inputs: TokenSeq(teacher),
    }
}

/// One [`GradReport`] per loss term, in [`TERMS`] order, computed in `f64`.
pub fn check_loss_terms(
    params: &ModelParams,
    example: &TrainingExample,
    alphas: Alphas,
    step: f64,
    tol: f64,
) -> Result<Vec<(&'static str, GradReport)>, ModelError> {
    let bindings = params.to_f64();
    let mut g = Graph::<f64>::new();
    let fwd = build_forward(&mut g, &params.config, example, PassOptions::default(), None)?;
    let losses = attach_losses(&mut g, &fwd, example, params.config.d_model, alphas);
    let mut out = Vec::new();
    for term in TERMS {
        g.set_root(losses.node(term).expect("known term"));
        out.push((term, grad_check(&mut g, &bindings, step, tol)?));
    }
    Ok(out)
}
