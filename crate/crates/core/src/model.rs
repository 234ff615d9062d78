//! Post-LN transformer encoder-decoder built on `tensorgrad` graphs.
//!
//! Parameters live as named `f32` tensors. Training graphs are built per
//! example; inference rebuilds the decoder on the growing prefix.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use tensorgrad::{Bindings, Graph, GraphError, NodeId, Real, Tensor};
use thiserror::Error;

use crate::atomic::write_atomic;
use crate::corpus::{Side, TrainingExample};
use crate::tokenizer::{Specials, TokenId, TokenSeq};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"INFOSUMW";
pub const CHECKPOINT_VERSION: u32 = 1;

pub const COUPLING_PARAM: &str = "ot.coupling";
pub const EMBED_PARAM: &str = "embed.tokens";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("{side} length {len} exceeds the configured maximum {max}")]
    LengthOverflow { side: Side, len: usize, max: usize },
    #[error("token id {id} is outside the vocabulary of {vocab}")]
    TokenOutOfRange { id: TokenId, vocab: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    /// Layers on each side.
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Applied to feed-forward activations in train mode.
    pub dropout: f64,
    pub max_source_len: usize,
    pub max_summary_len: usize,
    pub seed: u64,
    /// Standard deviation of the normal weight initializer.
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 500,
            d_model: 64,
            layers: 2,
            heads: 4,
            ffn_dim: 256,
            dropout: 0.1,
            max_source_len: 64,
            max_summary_len: 32,
            seed: 0,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            ));
        }
        if self.layers == 0 || self.ffn_dim == 0 {
            return bad("layers and ffn_dim must be positive".into());
        }
        if self.vocab_size <= Specials::DEFAULT.unk as usize {
            return bad(format!("vocab_size {} leaves no room for tokens", self.vocab_size));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.max_source_len < 2 || self.max_summary_len < 2 {
            return bad("maximum lengths must be at least 2".into());
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return bad(format!("init_std {} must be positive", self.init_std));
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

#[derive(Clone, Copy)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

fn param_specs(c: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (d, f, v) = (c.d_model, c.ffn_dim, c.vocab_size);
    let mut specs = vec![(EMBED_PARAM.to_string(), vec![v, d], Init::Normal)];
    let attn = |specs: &mut Vec<_>, p: &str| {
        for m in ["q", "k", "v", "o"] {
            specs.push((format!("{p}.{m}.weight"), vec![d, d], Init::Normal));
            // A key bias shifts every score in a row equally; softmax ignores it.
            if m != "k" {
                specs.push((format!("{p}.{m}.bias"), vec![d], Init::Zeros));
            }
        }
    };
    let norm = |specs: &mut Vec<_>, p: &str| {
        specs.push((format!("{p}.gain"), vec![d], Init::Ones));
        specs.push((format!("{p}.bias"), vec![d], Init::Zeros));
    };
    let ffn = |specs: &mut Vec<_>, p: &str| {
        specs.push((format!("{p}.in.weight"), vec![d, f], Init::Normal));
        specs.push((format!("{p}.in.bias"), vec![f], Init::Zeros));
        specs.push((format!("{p}.out.weight"), vec![f, d], Init::Normal));
        specs.push((format!("{p}.out.bias"), vec![d], Init::Zeros));
    };
    for i in 0..c.layers {
        attn(&mut specs, &format!("enc.{i}.self_attn"));
        norm(&mut specs, &format!("enc.{i}.ln1"));
        ffn(&mut specs, &format!("enc.{i}.ffn"));
        norm(&mut specs, &format!("enc.{i}.ln2"));
    }
    for i in 0..c.layers {
        attn(&mut specs, &format!("dec.{i}.self_attn"));
        norm(&mut specs, &format!("dec.{i}.ln1"));
        attn(&mut specs, &format!("dec.{i}.cross_attn"));
        norm(&mut specs, &format!("dec.{i}.ln2"));
        ffn(&mut specs, &format!("dec.{i}.ffn"));
        norm(&mut specs, &format!("dec.{i}.ln3"));
    }
    for head in ["decoder", "source"] {
        specs.push((format!("head.{head}.weight"), vec![d, v], Init::Normal));
        specs.push((format!("head.{head}.bias"), vec![v], Init::Zeros));
    }
    specs.push((COUPLING_PARAM.to_string(), vec![d, d], Init::Ones));
    specs
}

/// All trainable tensors, keyed by name.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tensors: Bindings<f32>,
}

impl ModelParams {
    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.tensors.get_mut(name)
    }

    pub fn to_f64(&self) -> Bindings<f64> {
        self.tensors
            .iter()
            .map(|(k, v)| (k.clone(), v.cast()))
            .collect()
    }

    pub fn from_f64(config: ModelConfig, tensors: &Bindings<f64>) -> Self {
        Self {
            config,
            tensors: tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn save(&self, w: impl Write) -> Result<(), ModelError> {
        let mut w = std::io::BufWriter::new(w);
        let config = serde_json::to_vec(&self.config).map_err(std::io::Error::other)?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(config.len() as u64).to_le_bytes())?;
        w.write_all(&config)?;
        w.write_all(&(self.tensors.len() as u64).to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u64).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.ndim() as u64).to_le_bytes())?;
            for &s in t.shape() {
                w.write_all(&(s as u64).to_le_bytes())?;
            }
            for &x in t.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(r: impl Read) -> Result<Self, ModelError> {
        let mut r = std::io::BufReader::new(r);
        let bad = |m: &str| ModelError::Checkpoint(m.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
        }
        let read_u64 = |r: &mut std::io::BufReader<_>| -> Result<u64, ModelError> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            Ok(u64::from_le_bytes(b))
        };
        // Guards against absurd allocations from corrupt headers.
        const LIMIT: u64 = 1 << 32;
        let len = read_u64(&mut r)?;
        if len > LIMIT {
            return Err(bad("corrupt config length"));
        }
        let mut config = vec![0u8; len as usize];
        r.read_exact(&mut config)?;
        let config: ModelConfig =
            serde_json::from_slice(&config).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let count = read_u64(&mut r)?;
        let mut tensors = Bindings::new();
        for _ in 0..count {
            let len = read_u64(&mut r)?;
            if len > LIMIT {
                return Err(bad("corrupt name length"));
            }
            let mut name = vec![0u8; len as usize];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8"))?;
            let ndim = read_u64(&mut r)?;
            if ndim > 8 {
                return Err(bad("corrupt tensor rank"));
            }
            let mut shape = Vec::new();
            for _ in 0..ndim {
                shape.push(read_u64(&mut r)? as usize);
            }
            let n: usize = shape.iter().product();
            if n as u64 > LIMIT {
                return Err(bad("corrupt tensor shape"));
            }
            let mut bytes = vec![0u8; n * 4];
            r.read_exact(&mut bytes)?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
            tensors.insert(name, t);
        }
        let params = Self { config, tensors };
        params.check_complete()?;
        Ok(params)
    }

    pub fn save_file(&self, path: &Path) -> Result<(), ModelError> {
        let mut bytes = Vec::new();
        self.save(&mut bytes)?;
        write_atomic(path, |w| w.write_all(&bytes))?;
        Ok(())
    }

    pub fn load_file(path: &Path) -> Result<Self, ModelError> {
        Self::load(std::fs::File::open(path)?)
    }

    fn check_complete(&self) -> Result<(), ModelError> {
        self.config.validate()?;
        for (name, shape, _) in param_specs(&self.config) {
            match self.tensors.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(ModelError::Checkpoint(format!(
                        "`{name}` has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(ModelError::Checkpoint(format!("missing tensor `{name}`"))),
            }
        }
        Ok(())
    }
}

/// Seeded initialization: normal weights, zero biases, unit norm gains,
/// and an all-ones coupling matrix.
pub fn init_params(config: &ModelConfig) -> Result<ModelParams, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = Normal::new(0.0, config.init_std)
        .map_err(|e| ModelError::InvalidConfig(e.to_string()))?;
    let mut tensors = Bindings::new();
    for (name, shape, init) in param_specs(config) {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = match init {
            Init::Normal => (0..n).map(|_| normal.sample(&mut rng) as f32).collect(),
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
        };
        tensors.insert(name, Tensor::new(shape, data).expect("spec shapes are consistent"));
    }
    Ok(ModelParams {
        config: config.clone(),
        tensors,
    })
}

/// Sinusoidal position table, `[n, d]`.
pub fn positions<T: Real>(n: usize, d: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(n * d);
    for pos in 0..n {
        for i in 0..d {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 / rate;
            data.push(T::of(if i % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::new(vec![n, d], data).expect("n*d entries")
}

/// Options for a teacher-forced pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PassOptions {
    /// Pad source and teacher inputs to these lengths with `<pad>`.
    pub pad_to: Option<(usize, usize)>,
}

/// Node handles of a teacher-forced pass.
#[derive(Clone, Debug)]
pub struct ForwardNodes {
    /// `[l_padded, d]`
    pub h_x: NodeId,
    /// `[m_padded, d]`
    pub h_y: NodeId,
    /// `[m_padded, V]`
    pub decoder_logits: NodeId,
    /// `[k, V]` at `source_positions`; absent when no source entity exists.
    pub source_logits: Option<NodeId>,
    pub source_positions: Vec<usize>,
    pub source_len: usize,
    pub summary_len: usize,
    pub source_padded: usize,
    pub summary_padded: usize,
}

impl ForwardNodes {
    pub fn source_keep(&self) -> Vec<bool> {
        (0..self.source_padded).map(|i| i < self.source_len).collect()
    }

    pub fn summary_keep(&self) -> Vec<bool> {
        (0..self.summary_padded).map(|i| i < self.summary_len).collect()
    }
}

struct Builder<'a, 'r, T> {
    g: &'a mut Graph<T>,
    config: &'a ModelConfig,
    dropout: Option<&'r mut dyn RngCore>,
}

impl<T: Real> Builder<'_, '_, T> {
    fn p(&mut self, name: &str, shape: &[usize]) -> NodeId {
        self.g.parameter(name, shape)
    }

    fn linear(&mut self, x: NodeId, prefix: &str, fan_in: usize, fan_out: usize) -> NodeId {
        let w = self.p(&format!("{prefix}.weight"), &[fan_in, fan_out]);
        let b = self.p(&format!("{prefix}.bias"), &[fan_out]);
        let y = self.g.matmul(x, w);
        self.g.add(y, b)
    }

    fn norm(&mut self, x: NodeId, prefix: &str) -> NodeId {
        let d = self.config.d_model;
        let gain = self.p(&format!("{prefix}.gain"), &[d]);
        let bias = self.p(&format!("{prefix}.bias"), &[d]);
        self.g.layer_norm(x, gain, bias)
    }

    /// Multi-head attention; `keep` is the flattened `[rows, cols]` mask.
    fn attention(&mut self, prefix: &str, q_in: NodeId, kv_in: NodeId, keep: &[bool]) -> NodeId {
        let d = self.config.d_model;
        let hd = self.config.head_dim();
        let q = self.linear(q_in, &format!("{prefix}.q"), d, d);
        let kw = self.p(&format!("{prefix}.k.weight"), &[d, d]);
        let k = self.g.matmul(kv_in, kw);
        let v = self.linear(kv_in, &format!("{prefix}.v"), d, d);
        let scale = 1.0 / (hd as f64).sqrt();
        let mut heads = Vec::with_capacity(self.config.heads);
        for h in 0..self.config.heads {
            let (a, b) = (h * hd, (h + 1) * hd);
            let qh = self.g.slice_cols(q, a, b);
            let kh = self.g.slice_cols(k, a, b);
            let vh = self.g.slice_cols(v, a, b);
            let kt = self.g.transpose(kh);
            let s = self.g.matmul(qh, kt);
            let s = self.g.scale(s, scale);
            let p = self.g.masked_softmax(s, keep.to_vec());
            heads.push(self.g.matmul(p, vh));
        }
        let cat = if heads.len() == 1 {
            heads[0]
        } else {
            self.g.concat_cols(heads)
        };
        self.linear(cat, &format!("{prefix}.o"), d, d)
    }

    fn ffn(&mut self, x: NodeId, rows: usize, prefix: &str) -> NodeId {
        let (d, f) = (self.config.d_model, self.config.ffn_dim);
        let h = self.linear(x, &format!("{prefix}.in"), d, f);
        let mut h = self.g.gelu(h);
        let rate = self.config.dropout;
        if let Some(rng) = self.dropout.as_deref_mut() {
            if rate > 0.0 {
                let keep = T::of(1.0 / (1.0 - rate));
                let mask: Vec<T> = (0..rows * f)
                    .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
                    .collect();
                let mask = self.g.constant(Tensor::new(vec![rows, f], mask).expect("rows*f"));
                h = self.g.mul(h, mask);
            }
        }
        self.linear(h, &format!("{prefix}.out"), f, d)
    }

    fn embed(&mut self, ids: &[TokenId]) -> NodeId {
        let (v, d) = (self.config.vocab_size, self.config.d_model);
        let table = self.p(EMBED_PARAM, &[v, d]);
        let e = self.g.embedding(table, ids.iter().map(|&i| i as usize).collect());
        let e = self.g.scale(e, (d as f64).sqrt());
        let pe = self.g.constant(positions(ids.len(), d));
        self.g.add(e, pe)
    }

    fn encoder(&mut self, ids: &[TokenId], real: usize) -> NodeId {
        let n = ids.len();
        let keep: Vec<bool> = (0..n * n).map(|i| i % n < real).collect();
        let mut x = self.embed(ids);
        for i in 0..self.config.layers {
            let a = self.attention(&format!("enc.{i}.self_attn"), x, x, &keep);
            let r = self.g.add(x, a);
            x = self.norm(r, &format!("enc.{i}.ln1"));
            let f = self.ffn(x, n, &format!("enc.{i}.ffn"));
            let r = self.g.add(x, f);
            x = self.norm(r, &format!("enc.{i}.ln2"));
        }
        x
    }

    /// Returns `(h_y, logits)`.
    fn decoder(
        &mut self,
        h_x: NodeId,
        source_rows: usize,
        source_real: usize,
        ids: &[TokenId],
        real: usize,
    ) -> (NodeId, NodeId) {
        let m = ids.len();
        let causal: Vec<bool> = (0..m * m)
            .map(|i| {
                let (q, k) = (i / m, i % m);
                k <= q && k < real
            })
            .collect();
        let cross: Vec<bool> = (0..m * source_rows)
            .map(|i| i % source_rows < source_real)
            .collect();
        let mut y = self.embed(ids);
        for i in 0..self.config.layers {
            let a = self.attention(&format!("dec.{i}.self_attn"), y, y, &causal);
            let r = self.g.add(y, a);
            y = self.norm(r, &format!("dec.{i}.ln1"));
            let c = self.attention(&format!("dec.{i}.cross_attn"), y, h_x, &cross);
            let r = self.g.add(y, c);
            y = self.norm(r, &format!("dec.{i}.ln2"));
            let f = self.ffn(y, m, &format!("dec.{i}.ffn"));
            let r = self.g.add(y, f);
            y = self.norm(r, &format!("dec.{i}.ln3"));
        }
        let (d, v) = (self.config.d_model, self.config.vocab_size);
        let logits = self.linear(y, "head.decoder", d, v);
        (y, logits)
    }
}

fn check_ids(ids: &[TokenId], vocab: usize) -> Result<(), ModelError> {
    match ids.iter().find(|&&i| i as usize >= vocab) {
        Some(&id) => Err(ModelError::TokenOutOfRange { id, vocab }),
        None => Ok(()),
    }
}

/// Adds a teacher-forced pass for `example` to `g`.
///
/// Dropout is applied to feed-forward activations only when `dropout` is
/// given (train mode).
pub fn build_forward<T: Real>(
    g: &mut Graph<T>,
    config: &ModelConfig,
    example: &TrainingExample,
    options: PassOptions,
    dropout: Option<&mut dyn RngCore>,
) -> Result<ForwardNodes, ModelError> {
    let (l, m) = (example.source.len(), example.teacher_inputs.len());
    if l > config.max_source_len {
        return Err(ModelError::LengthOverflow {
            side: Side::Source,
            len: l,
            max: config.max_source_len,
        });
    }
    if m > config.max_summary_len {
        return Err(ModelError::LengthOverflow {
            side: Side::Summary,
            len: m,
            max: config.max_summary_len,
        });
    }
    if l == 0 || m == 0 || example.summary.len() != m {
        return Err(ModelError::InvalidConfig(
            "example needs non-empty source and matching summary/teacher lengths".into(),
        ));
    }
    let (lp, mp) = options.pad_to.unwrap_or((l, m));
    let (lp, mp) = (lp.max(l), mp.max(m));
    let pad = Specials::DEFAULT.pad;
    let mut src = example.source.ids().to_vec();
    src.resize(lp, pad);
    let mut tgt = example.teacher_inputs.ids().to_vec();
    tgt.resize(mp, pad);
    check_ids(&src, config.vocab_size)?;
    check_ids(&tgt, config.vocab_size)?;
    check_ids(example.summary.ids(), config.vocab_size)?;

    let mut b = Builder {
        g,
        config,
        dropout,
    };
    let h_x = b.encoder(&src, l);
    let (h_y, decoder_logits) = b.decoder(h_x, lp, l, &tgt, m);
    let source_positions: Vec<usize> = example
        .source_entities
        .iter()
        .flat_map(|s| s.positions())
        .collect();
    let source_logits = if source_positions.is_empty() {
        None
    } else {
        let rows = b.g.select_rows(h_x, source_positions.clone());
        let (d, v) = (config.d_model, config.vocab_size);
        Some(b.linear(rows, "head.source", d, v))
    };
    Ok(ForwardNodes {
        h_x,
        h_y,
        decoder_logits,
        source_logits,
        source_positions,
        source_len: l,
        summary_len: m,
        source_padded: lp,
        summary_padded: mp,
    })
}

/// Evaluated teacher-forced pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardStates {
    pub h_x: Tensor<f32>,
    pub h_y: Tensor<f32>,
    pub decoder_logits: Tensor<f32>,
    pub source_logits: Option<Tensor<f32>>,
    pub source_keep: Vec<bool>,
    pub summary_keep: Vec<bool>,
}

pub fn forward(
    example: &TrainingExample,
    params: &ModelParams,
    options: PassOptions,
    dropout: Option<&mut dyn RngCore>,
) -> Result<ForwardStates, ModelError> {
    let mut g = Graph::<f32>::new();
    let nodes = build_forward(&mut g, &params.config, example, options, dropout)?;
    g.set_root(nodes.decoder_logits);
    g.forward_eval(&params.tensors)?;
    let value = |id: NodeId| g.value(id).expect("evaluated").clone();
    Ok(ForwardStates {
        h_x: value(nodes.h_x),
        h_y: value(nodes.h_y),
        decoder_logits: value(nodes.decoder_logits),
        source_logits: nodes.source_logits.map(value),
        source_keep: nodes.source_keep(),
        summary_keep: nodes.summary_keep(),
    })
}

/// Encoder states for inference, `[l, d]`.
pub fn encode_source(params: &ModelParams, source: &[TokenId]) -> Result<Tensor<f32>, ModelError> {
    if source.is_empty() {
        return Err(ModelError::InvalidConfig("empty source".into()));
    }
    check_ids(source, params.config.vocab_size)?;
    let mut g = Graph::<f32>::new();
    let mut b = Builder {
        g: &mut g,
        config: &params.config,
        dropout: None,
    };
    b.encoder(source, source.len());
    Ok(g.forward_eval(&params.tensors)?)
}

/// Log-probabilities of the next token after `prefix` (which starts with `<s>`).
pub fn next_log_probs(
    params: &ModelParams,
    h_x: &Tensor<f32>,
    prefix: &[TokenId],
) -> Result<Vec<f64>, ModelError> {
    check_ids(prefix, params.config.vocab_size)?;
    let mut g = Graph::<f32>::new();
    let hx = g.constant(h_x.clone());
    let rows = h_x.shape()[0];
    let mut b = Builder {
        g: &mut g,
        config: &params.config,
        dropout: None,
    };
    let (_, logits) = b.decoder(hx, rows, rows, prefix, prefix.len());
    g.set_root(logits);
    let logits = g.forward_eval(&params.tensors)?;
    Ok(log_softmax(logits.row(prefix.len() - 1)))
}

fn log_softmax(row: &[f32]) -> Vec<f64> {
    let max = row.iter().fold(f64::NEG_INFINITY, |a, &x| a.max(x as f64));
    let lse = max + row.iter().map(|&x| (x as f64 - max).exp()).sum::<f64>().ln();
    row.iter().map(|&x| x as f64 - lse).collect()
}

/// Index of the largest value; ties go to the lowest index.
fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeamSettings {
    pub max_len: usize,
    pub min_len: usize,
    pub beams: usize,
    pub length_penalty: f64,
}

impl BeamSettings {
    pub fn new(
        max_len: usize,
        min_len: usize,
        beams: usize,
        length_penalty: f64,
    ) -> Result<Self, ModelError> {
        let s = Self {
            max_len,
            min_len,
            beams,
            length_penalty,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.max_len == 0 || self.min_len > self.max_len {
            return Err(ModelError::InvalidConfig(format!(
                "need 1 <= max_len and min_len <= max_len, got min {} max {}",
                self.min_len, self.max_len
            )));
        }
        if self.beams == 0 {
            return Err(ModelError::InvalidConfig("beams must be at least 1".into()));
        }
        if !(self.length_penalty >= 0.0 && self.length_penalty.is_finite()) {
            return Err(ModelError::InvalidConfig(format!(
                "length penalty {} must be finite and >= 0",
                self.length_penalty
            )));
        }
        Ok(())
    }

    pub fn profile(name: &str) -> Option<Self> {
        match name {
            "cnndm" => Some(Self {
                max_len: 142,
                min_len: 56,
                beams: 4,
                length_penalty: 2.0,
            }),
            "xsum" => Some(Self {
                max_len: 62,
                min_len: 11,
                beams: 6,
                length_penalty: 1.0,
            }),
            _ => None,
        }
    }

    pub const PROFILES: [&'static str; 2] = ["cnndm", "xsum"];
}

fn ban_eos(logp: &mut [f64], step: usize, min_len: usize) {
    // `step` tokens already generated; the next one would make length step+1.
    if step + 1 < min_len {
        logp[Specials::DEFAULT.eos as usize] = f64::NEG_INFINITY;
    }
}

/// Greedy decoding; output includes the final `</s>` when one was produced.
pub fn greedy_decode(
    params: &ModelParams,
    source: &[TokenId],
    max_len: usize,
    min_len: usize,
) -> Result<TokenSeq, ModelError> {
    let sp = Specials::DEFAULT;
    let h_x = encode_source(params, source)?;
    let mut prefix = vec![sp.bos];
    let mut out = Vec::new();
    while out.len() < max_len {
        let mut logp = next_log_probs(params, &h_x, &prefix)?;
        ban_eos(&mut logp, out.len(), min_len);
        let tok = argmax(&logp) as TokenId;
        out.push(tok);
        prefix.push(tok);
        if tok == sp.eos {
            break;
        }
    }
    Ok(TokenSeq(out))
}

#[derive(Clone, Debug)]
struct Hypothesis {
    tokens: Vec<TokenId>,
    logp: f64,
}

impl Hypothesis {
    fn score(&self, penalty: f64) -> f64 {
        self.logp / (self.tokens.len().max(1) as f64).powf(penalty)
    }
}

/// Beam search with score `Σ log p / len^penalty`.
///
/// Each step ranks the expansions of all live hypotheses, finishes the ones
/// ending in `</s>` that rank within the beam, and keeps the best `beams`
/// unfinished ones. Ties prefer the earlier hypothesis, then the lower token
/// id, so one beam reproduces [`greedy_decode`].
pub fn beam_search(
    params: &ModelParams,
    source: &[TokenId],
    settings: &BeamSettings,
) -> Result<TokenSeq, ModelError> {
    settings.validate()?;
    let eos = Specials::DEFAULT.eos;
    let bos = Specials::DEFAULT.bos;
    let h_x = encode_source(params, source)?;
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        logp: 0.0,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    let penalty = settings.length_penalty;

    for step in 0..settings.max_len {
        let mut candidates: Vec<(f64, usize, TokenId, f64)> = Vec::new();
        for (h, hyp) in live.iter().enumerate() {
            let mut prefix = Vec::with_capacity(hyp.tokens.len() + 1);
            prefix.push(bos);
            prefix.extend_from_slice(&hyp.tokens);
            let mut logp = next_log_probs(params, &h_x, &prefix)?;
            ban_eos(&mut logp, step, settings.min_len);
            let len = (step + 1) as f64;
            for (tok, &lp) in logp.iter().enumerate() {
                if lp.is_finite() {
                    let total = hyp.logp + lp;
                    candidates.push((total / len.powf(penalty), h, tok as TokenId, total));
                }
            }
        }
        candidates.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        candidates.truncate(2 * settings.beams);

        let mut next = Vec::with_capacity(settings.beams);
        for (rank, &(_, h, tok, total)) in candidates.iter().enumerate() {
            let mut tokens = live[h].tokens.clone();
            tokens.push(tok);
            let hyp = Hypothesis { tokens, logp: total };
            if tok == eos {
                if rank < settings.beams {
                    finished.push(hyp);
                }
            } else if next.len() < settings.beams {
                next.push(hyp);
            }
        }
        live = next;
        if finished.len() >= settings.beams || live.is_empty() {
            break;
        }
    }
    if finished.len() < settings.beams {
        finished.extend(live);
    }
    let mut best = 0;
    for (i, h) in finished.iter().enumerate() {
        if h.score(penalty) > finished[best].score(penalty) {
            best = i;
        }
    }
    Ok(TokenSeq(finished.swap_remove(best).tokens))
}
