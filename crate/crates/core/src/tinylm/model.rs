use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;

use super::config::{ModelConfig, PretrainConfig};
use super::infer::KvCache;
use super::tokenizer::{CharTokenizer, EOT};
use crate::autodiff::{log_sum_exp, NodeId, Tape};
use crate::error::{Error, Result};
use crate::lora::{DenseDelta, LowRankAdapter};
use crate::optim::{AdamW, OptimizerConfig};
use crate::seed;
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;
const MASKED: f64 = -1e9;
const EMBED_STD: f64 = 0.05;
const POSITION_SCALE: f64 = 0.1;

/// Temperatures at or below this decode greedily.
pub const GREEDY_TEMPERATURE: f64 = 1e-6;

/// A projection an adapter can attach to: `d_out × k_in` weight named
/// `layer{i}.q` or `layer{i}.v`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttachPoint {
    pub name: String,
    pub layer: usize,
    pub d_out: usize,
    pub k_in: usize,
}

/// What to run on top of the frozen base.
#[derive(Clone, Copy, Debug)]
pub enum AdapterRef<'a> {
    Base,
    LowRank(&'a LowRankAdapter),
    Dense(&'a DenseDelta),
}

/// Row-major `(len, vocab)` logits; `len` may be zero.
#[derive(Clone, Debug, PartialEq)]
pub struct Logits {
    len: usize,
    vocab: usize,
    data: Vec<f64>,
}

impl Logits {
    pub(super) fn new(len: usize, vocab: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), len * vocab);
        Logits { len, vocab, data }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.vocab..(i + 1) * self.vocab]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleParams {
    pub temperature: f64,
    pub max_new: usize,
}

/// The frozen base model. Weights are immutable after construction.
#[derive(Clone, Debug)]
pub struct TinyLM {
    config: ModelConfig,
    weights: BTreeMap<String, Arc<Tensor>>,
    pub(super) positions: Arc<Tensor>,
    tokenizer: CharTokenizer,
}

struct BoundLayer {
    ln1: (NodeId, NodeId),
    q: NodeId,
    k: NodeId,
    v: NodeId,
    o: NodeId,
    ln2: (NodeId, NodeId),
    up: NodeId,
    down: NodeId,
    q_lora: Option<(NodeId, NodeId)>,
    v_lora: Option<(NodeId, NodeId)>,
}

/// Weight nodes on a tape, shared by every sequence built on it.
struct Bound {
    emb: NodeId,
    pos: NodeId,
    layers: Vec<BoundLayer>,
    lnf: (NodeId, NodeId),
    head: NodeId,
    lora_scale: f64,
    lora_dropout: Option<f64>,
}

/// A model with an adapter merged into its weights, ready for repeated
/// inference calls.
pub struct Prepared<'m> {
    pub(super) model: &'m TinyLM,
    pub(super) overrides: BTreeMap<String, Arc<Tensor>>,
    pub(super) flops: AtomicU64,
}

fn weight_names(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (d, f, v) = (cfg.embed_dim, cfg.ffn_dim, cfg.vocab_size);
    let mut out = vec![("tok_emb".to_string(), vec![v, d])];
    for i in 0..cfg.n_layers {
        for (n, s) in [
            ("ln1.g", vec![d]),
            ("ln1.b", vec![d]),
            ("q", vec![d, d]),
            ("k", vec![d, d]),
            ("v", vec![d, d]),
            ("o", vec![d, d]),
            ("ln2.g", vec![d]),
            ("ln2.b", vec![d]),
            ("ffn.up", vec![f, d]),
            ("ffn.down", vec![d, f]),
        ] {
            out.push((format!("layer{i}.{n}"), s));
        }
    }
    out.push(("ln_f.g".into(), vec![d]));
    out.push(("ln_f.b".into(), vec![d]));
    out.push(("head".into(), vec![v, d]));
    out
}

fn sinusoid(context: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; context * d];
    for p in 0..context {
        for i in 0..d {
            let freq = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = p as f64 * freq;
            data[p * d + i] = POSITION_SCALE * if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::from_parts(vec![context, d], data)
}

fn causal_mask(n: usize) -> Tensor {
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            data[i * n + j] = MASKED;
        }
    }
    Tensor::from_parts(vec![n, n], data)
}

impl TinyLM {
    /// A randomly initialized model.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.check()?;
        let mut rng = seed::rng(seed);
        let residual = 1.0 / (2.0 * config.n_layers as f64).sqrt();
        let mut weights = BTreeMap::new();
        for (name, shape) in weight_names(&config) {
            let t = if name.ends_with(".g") {
                Tensor::full(&shape, 1.0)
            } else if name.ends_with(".b") {
                Tensor::zeros(&shape)
            } else if name == "tok_emb" {
                Tensor::randn(&shape, EMBED_STD, &mut rng)
            } else {
                let fan_in = shape[1] as f64;
                let mut std = 1.0 / fan_in.sqrt();
                if name.ends_with(".o") || name.ends_with("ffn.down") {
                    std *= residual;
                }
                Tensor::randn(&shape, std, &mut rng)
            };
            weights.insert(name, Arc::new(t));
        }
        Self::from_weights(config, weights)
    }

    /// Builds a model from named weights, checking names and shapes.
    pub fn from_weights(
        config: ModelConfig,
        weights: BTreeMap<String, Arc<Tensor>>,
    ) -> Result<Self> {
        config.check()?;
        let expected = weight_names(&config);
        if weights.len() != expected.len() {
            return Err(Error::invalid(format!(
                "expected {} weights, got {}",
                expected.len(),
                weights.len()
            )));
        }
        for (name, shape) in &expected {
            let w = weights
                .get(name)
                .ok_or_else(|| Error::invalid(format!("missing weight `{name}`")))?;
            if w.shape() != shape.as_slice() {
                return Err(Error::shape(
                    "tinylm",
                    format!("weight `{name}` is {:?}, expected {shape:?}", w.shape()),
                ));
            }
        }
        let positions = Arc::new(sinusoid(config.context_len, config.embed_dim));
        let tokenizer = CharTokenizer::new(config.vocab_size)?;
        Ok(TinyLM {
            config,
            weights,
            positions,
            tokenizer,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tokenizer(&self) -> &CharTokenizer {
        &self.tokenizer
    }

    pub fn weights(&self) -> &BTreeMap<String, Arc<Tensor>> {
        &self.weights
    }

    pub fn token_embeddings(&self) -> &Tensor {
        &self.weights["tok_emb"]
    }

    pub fn attachment_points(&self) -> Vec<AttachPoint> {
        let d = self.config.embed_dim;
        (0..self.config.n_layers)
            .flat_map(|layer| {
                ["q", "v"].map(|p| AttachPoint {
                    name: format!("layer{layer}.{p}"),
                    layer,
                    d_out: d,
                    k_in: d,
                })
            })
            .collect()
    }

    /// Merges `adapter` into the attachment-point weights.
    pub fn prepare(&self, adapter: AdapterRef<'_>) -> Result<Prepared<'_>> {
        let mut overrides = BTreeMap::new();
        for p in self.attachment_points() {
            let delta = match adapter {
                AdapterRef::Base => continue,
                AdapterRef::LowRank(a) => a.effective_delta(&p.name)?,
                AdapterRef::Dense(d) => d.delta(&p.name)?.clone(),
            };
            let mut w = self.weights[&p.name].as_ref().clone();
            w.axpy(1.0, &delta).map_err(|_| {
                Error::shape(
                    "adapter",
                    format!(
                        "{} delta {:?} vs weight {:?}",
                        p.name,
                        delta.shape(),
                        w.shape()
                    ),
                )
            })?;
            overrides.insert(p.name, Arc::new(w));
        }
        Ok(Prepared {
            model: self,
            overrides,
            flops: AtomicU64::new(0),
        })
    }

    pub fn forward_logits(&self, adapter: AdapterRef<'_>, tokens: &[u32]) -> Result<Logits> {
        self.prepare(adapter)?.logits(tokens)
    }

    pub fn perplexity(&self, adapter: AdapterRef<'_>, tokens: &[u32]) -> Result<f64> {
        self.prepare(adapter)?.perplexity(tokens)
    }

    pub fn corpus_perplexity(&self, adapter: AdapterRef<'_>, docs: &[Vec<u32>]) -> Result<f64> {
        self.prepare(adapter)?.corpus_perplexity(docs)
    }

    pub fn sample(
        &self,
        adapter: AdapterRef<'_>,
        prompt: &[u32],
        params: SampleParams,
        seed: u64,
    ) -> Result<Vec<u32>> {
        self.prepare(adapter)?.sample(prompt, params, seed)
    }

    /// Final hidden state (after the closing layer norm, before the head) at
    /// `position`, from the frozen base with no adapter.
    pub fn hidden_state_at(&self, tokens: &[u32], position: usize) -> Result<Vec<f64>> {
        self.hidden_state_with(tokens, position, None)
    }

    /// As [`TinyLM::hidden_state_at`], with the token-embedding table
    /// replaced by `embeddings` (same shape). Used to read hidden states of
    /// locally registered tokens.
    pub fn hidden_state_with(
        &self,
        tokens: &[u32],
        position: usize,
        embeddings: Option<Arc<Tensor>>,
    ) -> Result<Vec<f64>> {
        if position >= tokens.len() {
            return Err(Error::invalid(format!(
                "position {position} out of range for {} tokens",
                tokens.len()
            )));
        }
        let mut overrides = BTreeMap::new();
        if let Some(e) = embeddings {
            if e.shape() != self.token_embeddings().shape() {
                return Err(Error::shape(
                    "hidden_state",
                    format!("embedding table {:?}", e.shape()),
                ));
            }
            overrides.insert("tok_emb".to_string(), e);
        }
        // Causal masking makes the prefix up to `position` sufficient.
        let prepared = Prepared {
            model: self,
            overrides,
            flops: AtomicU64::new(0),
        };
        let hidden = prepared.hidden_rows(&tokens[..=position], &[])?;
        let d = self.config.embed_dim;
        Ok(hidden[position * d..(position + 1) * d].to_vec())
    }

    /// Analytic FLOPs (2 per multiply-accumulate) of one inference forward
    /// pass over `len` tokens.
    pub fn forward_flops(&self, len: usize) -> u64 {
        let c = &self.config;
        let (n, d, f, v) = (
            len as u64,
            c.embed_dim as u64,
            c.ffn_dim as u64,
            c.vocab_size as u64,
        );
        let per_layer = 4 * n * d * d + 2 * n * n * d + 2 * n * d * f;
        2 * (c.n_layers as u64 * per_layer + n * d * v)
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<Vec<usize>> {
        if tokens.len() > self.config.context_len {
            return Err(Error::invalid(format!(
                "{} tokens exceed the context length {}",
                tokens.len(),
                self.config.context_len
            )));
        }
        tokens
            .iter()
            .map(|&t| {
                if (t as usize) < self.config.vocab_size {
                    Ok(t as usize)
                } else {
                    Err(Error::invalid(format!(
                        "token id {t} out of vocabulary ({})",
                        self.config.vocab_size
                    )))
                }
            })
            .collect()
    }

    /// Binds every weight on `tape`. Trainable binding registers them as
    /// named inputs; otherwise they are constants, with `overrides` taking
    /// precedence over the frozen values.
    fn bind(
        &self,
        tape: &mut Tape,
        trainable: bool,
        overrides: &BTreeMap<String, Arc<Tensor>>,
    ) -> Result<Bound> {
        let mut w = |name: &str| -> Result<NodeId> {
            let value = overrides.get(name).unwrap_or(&self.weights[name]).clone();
            if trainable {
                tape.input_shared(name, value, true)
            } else {
                Ok(tape.constant_shared(value))
            }
        };
        let emb = w("tok_emb")?;
        let mut layers = Vec::with_capacity(self.config.n_layers);
        for i in 0..self.config.n_layers {
            let mut lw = |n: &str| w(&format!("layer{i}.{n}"));
            layers.push(BoundLayer {
                ln1: (lw("ln1.g")?, lw("ln1.b")?),
                q: lw("q")?,
                k: lw("k")?,
                v: lw("v")?,
                o: lw("o")?,
                ln2: (lw("ln2.g")?, lw("ln2.b")?),
                up: lw("ffn.up")?,
                down: lw("ffn.down")?,
                q_lora: None,
                v_lora: None,
            });
        }
        let lnf = (w("ln_f.g")?, w("ln_f.b")?);
        let head = w("head")?;
        let pos = tape.constant_shared(self.positions.clone());
        Ok(Bound {
            emb,
            pos,
            layers,
            lnf,
            head,
            lora_scale: 0.0,
            lora_dropout: None,
        })
    }

    /// Binds the adapter factors as trainable inputs named `{point}.A` and
    /// `{point}.B`; returns their nodes in [`LowRankAdapter::tensors`] order.
    fn bind_lora(
        &self,
        tape: &mut Tape,
        bound: &mut Bound,
        adapter: &LowRankAdapter,
        training: bool,
    ) -> Result<Vec<NodeId>> {
        let mut nodes = Vec::new();
        for p in self.attachment_points() {
            let f = adapter.factors(&p.name)?;
            if f.a.shape() != [adapter.rank(), p.k_in] || f.b.shape() != [p.d_out, adapter.rank()] {
                return Err(Error::shape(
                    "adapter",
                    format!(
                        "{}: A {:?}, B {:?} do not fit {}×{}",
                        p.name,
                        f.a.shape(),
                        f.b.shape(),
                        p.d_out,
                        p.k_in
                    ),
                ));
            }
            let a = tape.input(&format!("{}.A", p.name), f.a.clone(), true)?;
            let b = tape.input(&format!("{}.B", p.name), f.b.clone(), true)?;
            let layer = &mut bound.layers[p.layer];
            if p.name.ends_with(".q") {
                layer.q_lora = Some((a, b));
            } else {
                layer.v_lora = Some((a, b));
            }
            nodes.push(a);
            nodes.push(b);
        }
        bound.lora_scale = adapter.scale();
        bound.lora_dropout = (training && adapter.dropout_p() > 0.0).then_some(adapter.dropout_p());
        Ok(nodes)
    }

    fn projection(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        h: NodeId,
        w: NodeId,
        lora: Option<(NodeId, NodeId)>,
    ) -> Result<NodeId> {
        let base = tape.matmul(h, w, true)?;
        let Some((a, b)) = lora else { return Ok(base) };
        let mut t = tape.matmul(h, a, true)?;
        if let Some(p) = bound.lora_dropout {
            t = tape.dropout(t, p)?;
        }
        let t = tape.matmul(t, b, true)?;
        let t = tape.scale(t, bound.lora_scale)?;
        tape.add(base, t)
    }

    /// Records one sequence; returns (final hidden states, logits).
    fn sequence(&self, tape: &mut Tape, bound: &Bound, tokens: &[u32]) -> Result<(NodeId, NodeId)> {
        let ids = self.check_tokens(tokens)?;
        let n = ids.len();
        let inv_sqrt_d = 1.0 / (self.config.embed_dim as f64).sqrt();
        let x = tape.embedding(bound.emb, &ids)?;
        let positions: Vec<usize> = (0..n).collect();
        let pos = tape.embedding(bound.pos, &positions)?;
        let mut x = tape.add(x, pos)?;
        let mask = tape.constant(causal_mask(n));
        for layer in &bound.layers {
            let h = tape.layer_norm(x, layer.ln1.0, layer.ln1.1, LN_EPS)?;
            let q = self.projection(tape, bound, h, layer.q, layer.q_lora)?;
            let k = tape.matmul(h, layer.k, true)?;
            let v = self.projection(tape, bound, h, layer.v, layer.v_lora)?;
            let s = tape.matmul(q, k, true)?;
            let s = tape.scale(s, inv_sqrt_d)?;
            let s = tape.add(s, mask)?;
            let att = tape.softmax(s)?;
            let ctx = tape.matmul(att, v, false)?;
            let o = tape.matmul(ctx, layer.o, true)?;
            x = tape.add(x, o)?;
            let h = tape.layer_norm(x, layer.ln2.0, layer.ln2.1, LN_EPS)?;
            let u = tape.matmul(h, layer.up, true)?;
            let u = tape.gelu(u)?;
            let dn = tape.matmul(u, layer.down, true)?;
            x = tape.add(x, dn)?;
        }
        let hidden = tape.layer_norm(x, bound.lnf.0, bound.lnf.1, LN_EPS)?;
        let logits = tape.matmul(hidden, bound.head, true)?;
        Ok((hidden, logits))
    }

    /// Token-weighted mean next-token cross-entropy over `batch`, recorded on
    /// `tape`. Each sequence predicts `tokens[1..]` from `tokens[..n-1]`.
    fn batch_loss(&self, tape: &mut Tape, bound: &Bound, batch: &[&[u32]]) -> Result<NodeId> {
        let total: usize = batch.iter().map(|s| s.len().saturating_sub(1)).sum();
        if total == 0 {
            return Err(Error::invalid("batch has no scored positions"));
        }
        let mut loss: Option<NodeId> = None;
        for seq in batch {
            if seq.len() < 2 {
                continue;
            }
            let (_, logits) = self.sequence(tape, bound, &seq[..seq.len() - 1])?;
            let targets: Vec<usize> = seq[1..].iter().map(|&t| t as usize).collect();
            let ce = tape.cross_entropy(logits, &targets)?;
            let ce = tape.scale(ce, (seq.len() - 1) as f64 / total as f64)?;
            loss = Some(match loss {
                Some(acc) => tape.add(acc, ce)?,
                None => ce,
            });
        }
        Ok(loss.expect("at least one scored sequence"))
    }

    /// Records the adapter-training loss on `tape` with the frozen base as
    /// constants and the adapter factors as trainable inputs. Returns the
    /// loss node and the factor nodes in [`LowRankAdapter::tensors`] order.
    pub fn adapter_loss(
        &self,
        tape: &mut Tape,
        adapter: &LowRankAdapter,
        batch: &[&[u32]],
        training: bool,
    ) -> Result<(NodeId, Vec<NodeId>)> {
        let mut bound = self.bind(tape, false, &BTreeMap::new())?;
        let nodes = self.bind_lora(tape, &mut bound, adapter, training)?;
        Ok((self.batch_loss(tape, &bound, batch)?, nodes))
    }

    /// Records the loss with every base weight as a trainable input named as
    /// in [`TinyLM::weights`].
    pub fn full_loss(&self, tape: &mut Tape, batch: &[&[u32]]) -> Result<NodeId> {
        let bound = self.bind(tape, true, &BTreeMap::new())?;
        self.batch_loss(tape, &bound, batch)
    }

    /// Copy with every weight rounded to f32.
    fn rounded(mut self) -> Self {
        for w in self.weights.values_mut() {
            Arc::make_mut(w).round_to_f32();
        }
        self
    }
}

impl Prepared<'_> {
    pub fn model(&self) -> &TinyLM {
        self.model
    }

    /// FLOPs spent by inference calls on this handle so far.
    pub fn flops(&self) -> u64 {
        self.flops.load(Ordering::Relaxed)
    }

    pub fn perplexity(&self, tokens: &[u32]) -> Result<f64> {
        perplexity_from_log_probs(&self.log_probs(tokens)?)
    }

    /// Perplexity over a set of documents, each scored independently:
    /// `exp(−Σ log P / Σ H)` across all documents.
    pub fn corpus_perplexity(&self, docs: &[Vec<u32>]) -> Result<f64> {
        let all: Vec<f64> = self.docs_log_probs(docs)?.into_iter().flatten().collect();
        perplexity_from_log_probs(&all)
    }

    /// Continuation of `prompt` (not including it). Stops after `max_new`
    /// tokens or at end-of-text, which is not included. Only public token
    /// ids are ever sampled.
    pub fn sample(&self, prompt: &[u32], params: SampleParams, seed: u64) -> Result<Vec<u32>> {
        if params.temperature.is_nan() || params.temperature <= 0.0 {
            return Err(Error::invalid(format!(
                "temperature must be positive, got {}",
                params.temperature
            )));
        }
        let tok = self.model.tokenizer;
        let ctx = self.model.config.context_len;
        let mut rng = seed::rng(seed);
        let mut seq = prompt.to_vec();
        let mut out = Vec::new();
        // Logits of the last position of the trailing `ctx`-token window. The
        // cache holds that window; a full window is rebuilt after each token.
        let mut cache = KvCache::new(self.model.config.n_layers);
        let mut row = if seq.is_empty() {
            None
        } else {
            Some(self.extend(&mut cache, &seq[seq.len().saturating_sub(ctx)..])?)
        };
        while out.len() < params.max_new {
            let next = match &row {
                None => EOT,
                Some(row) => {
                    let allowed: Vec<usize> = (0..row.len())
                        .filter(|&i| tok.is_public(i as u32))
                        .collect();
                    if params.temperature <= GREEDY_TEMPERATURE {
                        // First maximum wins, so ties resolve to the lowest id.
                        let mut best = allowed[0];
                        for &i in &allowed {
                            if row[i] > row[best] {
                                best = i;
                            }
                        }
                        best as u32
                    } else {
                        let scaled: Vec<f64> = allowed
                            .iter()
                            .map(|&i| row[i] / params.temperature)
                            .collect();
                        let lse = log_sum_exp(&scaled);
                        let u: f64 = rng.gen();
                        let mut acc = 0.0;
                        let mut pick = *allowed.last().unwrap();
                        for (j, &i) in allowed.iter().enumerate() {
                            acc += (scaled[j] - lse).exp();
                            if u < acc {
                                pick = i;
                                break;
                            }
                        }
                        pick as u32
                    }
                }
            };
            if next == EOT {
                break;
            }
            seq.push(next);
            out.push(next);
            row = Some(if cache.len() < ctx {
                self.extend(&mut cache, &[next])?
            } else {
                cache = KvCache::new(self.model.config.n_layers);
                self.extend(&mut cache, &seq[seq.len() - ctx..])?
            });
        }
        Ok(out)
    }
}

/// `exp(−mean(log_probs))`. Errors when there are no scored positions.
pub fn perplexity_from_log_probs(log_probs: &[f64]) -> Result<f64> {
    if log_probs.is_empty() {
        return Err(Error::invalid(
            "perplexity needs at least one scored position",
        ));
    }
    let mean = log_probs.iter().sum::<f64>() / log_probs.len() as f64;
    Ok((-mean).exp())
}

/// Trains a fresh model on `corpus` (token sequences, each with its start
/// and end markers) and returns it frozen with f32-exact weights. Sequences
/// longer than the context contribute a random window per draw.
pub fn pretrain_base(
    config: ModelConfig,
    corpus: &[Vec<u32>],
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<TinyLM> {
    if corpus.iter().all(|d| d.len() < 2) {
        return Err(Error::invalid("pretraining corpus is empty"));
    }
    if cfg.steps == 0 {
        return Err(Error::invalid("pretraining needs at least one step"));
    }
    let mut model = TinyLM::init(config, seed::derive(seed, "init"))?;
    let names: Vec<String> = model.weights.keys().cloned().collect();
    let sizes: Vec<usize> = names.iter().map(|n| model.weights[n].numel()).collect();
    let opt_cfg = OptimizerConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        epochs: 1,
        batch_size: cfg.batch_size,
        ..OptimizerConfig::default()
    };
    let mut opt = AdamW::new(opt_cfg, &sizes);
    let usable: Vec<&Vec<u32>> = corpus.iter().filter(|d| d.len() >= 2).collect();
    let span = model.config.context_len + 1;
    let mut rng = seed::rng(seed::derive(seed, "batches"));
    for step in 0..cfg.steps {
        let batch: Vec<&[u32]> = (0..cfg.batch_size)
            .map(|_| {
                let doc = usable[rng.gen_range(0..usable.len())];
                if doc.len() <= span {
                    doc.as_slice()
                } else {
                    let s = rng.gen_range(0..=doc.len() - span);
                    &doc[s..s + span]
                }
            })
            .collect();
        let mut tape = Tape::new(seed::derive_index(seed, step as u64));
        let loss = model.full_loss(&mut tape, &batch)?;
        let grads = tape.backward(loss)?;
        let zero: Vec<Tensor> = names
            .iter()
            .map(|n| Tensor::zeros(model.weights[n].shape()))
            .collect();
        let g: Vec<&Tensor> = names
            .iter()
            .zip(&zero)
            .map(|(n, z)| grads.named(n).unwrap_or(z))
            .collect();
        let mut params: Vec<&mut Tensor> = model.weights.values_mut().map(Arc::make_mut).collect();
        opt.step(&mut params, &g)?;
    }
    Ok(model.rounded())
}
