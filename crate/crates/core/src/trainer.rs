//! AdamW training with linear decay, ROUGE-driven early stopping, and
//! checkpointing.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tensorgrad::{Bindings, Gradients, Graph, GraphError, Real, Tensor};
use thiserror::Error;

use crate::atomic::write_atomic;
use crate::corpus::TrainingExample;
use crate::evalsuite::RougeTriple;
use crate::model::{build_forward, greedy_decode, ModelError, ModelParams, PassOptions};
use crate::objectives::{attach_losses, Alphas, LossBundle, LossNodes};
use crate::tokenizer::{decode, MergeTable, TokenizerError};

pub const EPOCH_LOG: &str = "epochs.jsonl";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("empty training set")]
    EmptyDataset,
    #[error("non-finite value in {term} at epoch {epoch}, step {step} (example {example}): {detail}")]
    NonFinite {
        term: String,
        epoch: usize,
        step: usize,
        example: usize,
        detail: String,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Which ROUGE F-score drives model selection.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregate {
    #[default]
    MeanF,
    Rouge1,
    Rouge2,
    RougeLsum,
}

impl Aggregate {
    pub fn of(self, t: &RougeTriple) -> f64 {
        match self {
            Aggregate::MeanF => t.mean_f1(),
            Aggregate::Rouge1 => t.rouge1.f1,
            Aggregate::Rouge2 => t.rouge2.f1,
            Aggregate::RougeLsum => t.rouge_lsum.f1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Length of the linear decay; defaults to every step of every epoch.
    pub total_steps: Option<usize>,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub alphas: Alphas,
    pub seed: u64,
    /// Validate every this many epochs.
    pub validate_every: usize,
    pub aggregate: Aggregate,
    /// Greedy validation decode length; defaults to the model's summary limit.
    pub max_decode_len: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            epochs: 10,
            total_steps: None,
            weight_decay: 1e-6,
            batch_size: 8,
            patience: 3,
            alphas: Alphas::default(),
            seed: 0,
            validate_every: 1,
            aggregate: Aggregate::MeanF,
            max_decode_len: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if self.validate_every == 0 {
            return bad("validate_every must be at least 1");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be finite and non-negative");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight decay must be finite and non-negative");
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, examples: usize) -> usize {
        examples.div_ceil(self.batch_size)
    }

    pub fn schedule_length(&self, examples: usize) -> usize {
        self.total_steps
            .unwrap_or(self.epochs * self.steps_per_epoch(examples))
    }
}

/// `base · (1 − step/total)`, clamped to `[0, base]`.
pub fn lr_at_step(step: usize, base: f64, total_steps: usize) -> Result<f64, TrainError> {
    if total_steps == 0 {
        return Err(TrainError::InvalidConfig("total steps must be positive".into()));
    }
    let frac = step as f64 / total_steps as f64;
    Ok(base * (1.0 - frac).clamp(0.0, 1.0))
}

/// Validation aggregates in the order they were measured.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationHistory {
    /// 1-based epoch of each validation.
    pub epochs: Vec<usize>,
    pub scores: Vec<f64>,
}

impl ValidationHistory {
    pub fn from_scores(scores: &[f64]) -> Self {
        Self {
            epochs: (1..=scores.len()).collect(),
            scores: scores.to_vec(),
        }
    }

    pub fn push(&mut self, epoch: usize, score: f64) {
        self.epochs.push(epoch);
        self.scores.push(score);
    }

    /// Index of the highest score; ties go to the earliest.
    pub fn best_index(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, &s) in self.scores.iter().enumerate() {
            if best.is_none_or(|b| s > self.scores[b]) {
                best = Some(i);
            }
        }
        best
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best_index().map(|i| self.epochs[i])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    /// Stop; holds the index of the best validation.
    Stop { best: usize },
}

/// Stops once `patience` validations in a row have failed to beat the best.
pub fn early_stop_select(history: &ValidationHistory, patience: usize) -> StopDecision {
    match history.best_index() {
        Some(best) if history.scores.len() - 1 - best >= patience => StopDecision::Stop { best },
        _ => StopDecision::Continue,
    }
}

/// Adam moments with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    first: Bindings<f64>,
    second: Bindings<f64>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            first: Bindings::new(),
            second: Bindings::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// `θ ← θ − lr·(m̂/(√v̂ + ε) + λ·θ)` for every parameter.
    pub fn update(&mut self, params: &mut Bindings<f32>, grads: &Gradients<f64>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, p) in params.iter_mut() {
            let zero;
            let g = match grads.get(name) {
                Some(g) => g,
                None => {
                    zero = Tensor::zeros(p.shape());
                    &zero
                }
            };
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            let (m, v) = (m.data_mut(), v.data_mut());
            for (i, (x, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let adam = (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                let xf = *x as f64;
                *x = (xf - lr * self.weight_decay * xf - lr * adam) as f32;
            }
        }
    }
}

/// Per-example losses and gradients in `f32`, returned in `f64`.
pub fn example_gradients(
    params: &ModelParams,
    example: &TrainingExample,
    alphas: Alphas,
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<(LossBundle, Gradients<f64>), StepFailure> {
    let mut g = Graph::<f32>::new();
    let fwd = build_forward(
        &mut g,
        &params.config,
        example,
        PassOptions::default(),
        dropout.map(|r| r as &mut dyn rand::RngCore),
    )
    .map_err(StepFailure::Model)?;
    let forward_nodes = g.len();
    let losses = attach_losses(&mut g, &fwd, example, params.config.d_model, alphas);
    match g.forward_eval(&params.tensors) {
        Ok(_) => {}
        Err(GraphError::NonFinite { node, op }) => {
            let term = if node < forward_nodes {
                "model forward pass"
            } else {
                losses.term_of(node).unwrap_or("loss")
            };
            return Err(StepFailure::NonFinite {
                term: term.to_string(),
                detail: format!("node #{node} ({op})"),
            });
        }
        Err(e) => return Err(StepFailure::Model(e.into())),
    }
    let bundle = losses.bundle(&g, alphas);
    let grads = g.backward().map_err(|e| StepFailure::Model(e.into()))?;
    for (name, t) in &grads {
        if !t.is_finite() {
            return Err(StepFailure::NonFinite {
                term: "total".into(),
                detail: format!("gradient of `{name}`"),
            });
        }
    }
    Ok((
        bundle,
        grads.into_iter().map(|(k, v)| (k, v.cast())).collect(),
    ))
}

#[derive(Debug)]
pub enum StepFailure {
    NonFinite { term: String, detail: String },
    Model(ModelError),
}

/// Eval-mode losses averaged over `examples`.
pub fn evaluate_losses(
    params: &ModelParams,
    examples: &[TrainingExample],
    alphas: Alphas,
) -> Result<LossBundle, ModelError> {
    let mut sum = LossBundle {
        alphas,
        ..LossBundle::default()
    };
    for ex in examples {
        let mut g = Graph::<f64>::new();
        let fwd = build_forward(&mut g, &params.config, ex, PassOptions::default(), None)?;
        let losses = attach_losses(&mut g, &fwd, ex, params.config.d_model, alphas);
        g.forward_eval(&params.to_f64())?;
        add_bundle(&mut sum, &losses.bundle(&g, alphas));
    }
    Ok(scale_bundle(sum, examples.len()))
}

fn add_bundle(acc: &mut LossBundle, b: &LossBundle) {
    acc.mle += b.mle;
    acc.ot += b.ot;
    acc.transport_cost += b.transport_cost;
    acc.anig += b.anig;
    acc.je += b.je;
    acc.total += b.total;
}

fn scale_bundle(mut b: LossBundle, n: usize) -> LossBundle {
    let k = 1.0 / n.max(1) as f64;
    b.mle *= k;
    b.ot *= k;
    b.transport_cost *= k;
    b.anig *= k;
    b.je *= k;
    b.total *= k;
    b
}

/// Mean predictive entropy over every entity token position (both sides),
/// eval mode.
pub fn entity_entropy(params: &ModelParams, examples: &[TrainingExample]) -> Result<f64, ModelError> {
    let mut total = 0.0;
    let mut count = 0usize;
    for ex in examples {
        let mut g = Graph::<f64>::new();
        let fwd = build_forward(&mut g, &params.config, ex, PassOptions::default(), None)?;
        let losses: LossNodes = attach_losses(&mut g, &fwd, ex, params.config.d_model, Alphas::default());
        g.forward_eval(&params.to_f64())?;
        let sum_h = g.value(losses.summary_entropy).expect("evaluated");
        for span in &ex.summary_entities {
            for p in span.positions() {
                total += sum_h.data()[p].as_f64();
                count += 1;
            }
        }
        if let Some(src) = losses.source_entropy {
            for &h in g.value(src).expect("evaluated").data() {
                total += h;
                count += 1;
            }
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// Greedy-decodes every example and scores it against its reference.
pub fn validate(
    params: &ModelParams,
    examples: &[TrainingExample],
    table: &MergeTable,
    max_len: usize,
) -> Result<RougeTriple, TrainError> {
    let mut candidates = Vec::with_capacity(examples.len());
    let mut references = Vec::with_capacity(examples.len());
    for ex in examples {
        let out = greedy_decode(params, ex.source.ids(), max_len, 0)?;
        candidates.push(decode(out.ids(), table)?);
        references.push(decode(ex.summary.ids(), table)?);
    }
    Ok(crate::evalsuite::score_corpus(&candidates, &references).mean)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub rouge1: f64,
    pub rouge2: f64,
    pub rouge_lsum: f64,
    pub aggregate: f64,
}

/// One line of the epoch log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub loss: LossBundle,
    pub validation: Option<ValidationRecord>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub best: Option<(usize, ModelParams)>,
    pub history: ValidationHistory,
    pub log: Vec<EpochLog>,
    pub stopped_early: bool,
}

/// Where training artifacts go; `None` keeps everything in memory.
#[derive(Clone, Debug, Default)]
pub struct OutputDir(pub Option<PathBuf>);

impl OutputDir {
    fn write_log(&self, log: &[EpochLog]) -> Result<(), TrainError> {
        let Some(dir) = &self.0 else { return Ok(()) };
        write_atomic(&dir.join(EPOCH_LOG), |w| {
            for entry in log {
                serde_json::to_writer(&mut *w, entry).map_err(std::io::Error::other)?;
                w.write_all(b"\n")?;
            }
            Ok(())
        })?;
        Ok(())
    }

    fn write_checkpoint(&self, name: &str, params: &ModelParams) -> Result<(), TrainError> {
        let Some(dir) = &self.0 else { return Ok(()) };
        checkpoint_to(&dir.join(name), params)
    }
}

pub fn checkpoint_to(path: &Path, params: &ModelParams) -> Result<(), TrainError> {
    let mut bytes = Vec::new();
    params.save(&mut bytes)?;
    write_atomic(path, |w| w.write_all(&bytes))?;
    Ok(())
}

/// Runs the full loop: shuffled mini-batches, AdamW with linear decay,
/// periodic greedy validation, early stopping, and checkpoints at every new
/// best validation.
///
/// Deterministic for a fixed `config.seed`.
pub fn train(
    dataset: &[TrainingExample],
    val: &[TrainingExample],
    table: &MergeTable,
    config: &TrainConfig,
    params: ModelParams,
    out: &OutputDir,
) -> Result<TrainOutcome, TrainError> {
    train_observed(dataset, val, table, config, params, out, |_, _| {})
}

/// [`train`] with a callback invoked after every epoch with that epoch's log
/// entry and the parameters at that point.
pub fn train_observed(
    dataset: &[TrainingExample],
    val: &[TrainingExample],
    table: &MergeTable,
    config: &TrainConfig,
    mut params: ModelParams,
    out: &OutputDir,
    mut on_epoch: impl FnMut(&EpochLog, &ModelParams),
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let total_steps = config.schedule_length(dataset.len());
    lr_at_step(0, config.learning_rate, total_steps)?;
    let max_decode = config
        .max_decode_len
        .unwrap_or(params.config.max_summary_len);

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed);
    dropout_rng.set_stream(1);
    let mut opt = AdamW::new(config.weight_decay);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut history = ValidationHistory::default();
    let mut log = Vec::new();
    let mut best: Option<(usize, ModelParams)> = None;
    let mut stopped_early = false;
    let mut step = 0usize;
    let batch_scale = |n: usize| 1.0 / n as f64;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut sum = LossBundle {
            alphas: config.alphas,
            ..LossBundle::default()
        };
        let mut lr = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut acc: Gradients<f64> = Gradients::new();
            for &idx in batch {
                let (bundle, grads) = example_gradients(
                    &params,
                    &dataset[idx],
                    config.alphas,
                    Some(&mut dropout_rng),
                )
                .map_err(|f| match f {
                    StepFailure::NonFinite { term, detail } => TrainError::NonFinite {
                        term,
                        epoch,
                        step,
                        example: idx,
                        detail,
                    },
                    StepFailure::Model(e) => TrainError::Model(e),
                })?;
                add_bundle(&mut sum, &bundle);
                for (name, g) in grads {
                    let g = g.scale(batch_scale(batch.len()));
                    match acc.get_mut(&name) {
                        Some(a) => a.add_assign(&g),
                        None => {
                            acc.insert(name, g);
                        }
                    }
                }
            }
            lr = lr_at_step(step, config.learning_rate, total_steps)?;
            opt.update(&mut params.tensors, &acc, lr);
            step += 1;
        }
        let loss = scale_bundle(sum, dataset.len());

        let validation = if !val.is_empty() && epoch % config.validate_every == 0 {
            let triple = validate(&params, val, table, max_decode)?;
            let aggregate = config.aggregate.of(&triple);
            history.push(epoch, aggregate);
            if history.best_index() == Some(history.scores.len() - 1) {
                out.write_checkpoint(BEST_CHECKPOINT, &params)?;
                best = Some((epoch, params.clone()));
            }
            Some(ValidationRecord {
                rouge1: triple.rouge1.f1,
                rouge2: triple.rouge2.f1,
                rouge_lsum: triple.rouge_lsum.f1,
                aggregate,
            })
        } else {
            None
        };
        log::info!(
            "epoch {epoch}: lr {lr:.3e} mle {:.4} ot {:.4} anig {:.4} je {:.4} total {:.4}{}",
            loss.mle,
            loss.ot,
            loss.anig,
            loss.je,
            loss.total,
            validation
                .as_ref()
                .map(|v| format!(" val {:.4}", v.aggregate))
                .unwrap_or_default()
        );
        log.push(EpochLog {
            epoch,
            steps: step,
            lr,
            loss,
            validation,
        });
        out.write_log(&log)?;
        on_epoch(log.last().expect("just pushed"), &params);

        if validation_is_due(&log) {
            if let StopDecision::Stop { best } = early_stop_select(&history, config.patience) {
                log::info!(
                    "early stop after epoch {epoch}; best epoch {}",
                    history.epochs[best]
                );
                stopped_early = true;
                break;
            }
        }
    }
    out.write_checkpoint(LAST_CHECKPOINT, &params)?;
    Ok(TrainOutcome {
        params,
        best,
        history,
        log,
        stopped_early,
    })
}

fn validation_is_due(log: &[EpochLog]) -> bool {
    log.last().is_some_and(|e| e.validation.is_some())
}
