//! Post-norm transformer sublayers and order-parameterized blocks.
//!
//! A block owns one self-attention, one feed-forward and (in the decoder)
//! one encoder-decoder attention sublayer. The order in which those
//! sublayers run is a call-time argument, so every candidate order reuses
//! the same weights. Each sublayer is a whole residual unit:
//! `LayerNorm(x + Dropout(f(x)))`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::routing::{LayerKind, LayerOrder};
use crate::tensor::{Element, Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PositionalEncoding {
    #[default]
    Sinusoidal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    /// Blocks per stack.
    pub layers: usize,
    pub dropout: f64,
    pub max_len: usize,
    pub positional: PositionalEncoding,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            src_vocab: 16,
            tgt_vocab: 16,
            d_model: 16,
            d_ff: 32,
            heads: 2,
            layers: 1,
            dropout: 0.0,
            max_len: 32,
            positional: PositionalEncoding::Sinusoidal,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("src_vocab", self.src_vocab),
            ("tgt_vocab", self.tgt_vocab),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("heads", self.heads),
            ("layers", self.layers),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "model.d_model ({}) must be divisible by model.heads ({})",
                self.d_model, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("model.dropout must be in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }
}

/// Token ids laid out `[batch, len]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    pub batch: usize,
    pub len: usize,
    pub pad_id: usize,
}

impl TokenBatch {
    pub fn new(ids: Vec<usize>, batch: usize, len: usize, pad_id: usize) -> Result<Self> {
        if ids.len() != batch * len || batch == 0 || len == 0 {
            return Err(Error::Dimension(format!("{} ids for a {batch}x{len} batch", ids.len())));
        }
        Ok(Self { ids, batch, len, pad_id })
    }

    /// Pads each sequence to the longest one.
    pub fn from_rows(rows: &[&[usize]], pad_id: usize) -> Result<Self> {
        let len = rows.iter().map(|r| r.len()).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(rows.len() * len);
        for r in rows {
            ids.extend_from_slice(r);
            ids.extend(std::iter::repeat_n(pad_id, len - r.len()));
        }
        Self::new(ids, rows.len(), len, pad_id)
    }

    /// True at non-pad positions.
    pub fn keep(&self) -> Vec<bool> {
        self.ids.iter().map(|&t| t != self.pad_id).collect()
    }

    pub fn row(&self, b: usize) -> &[usize] {
        &self.ids[b * self.len..(b + 1) * self.len]
    }

    /// Sub-batch of the given rows, in order.
    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        let mut ids = Vec::with_capacity(rows.len() * self.len);
        for &r in rows {
            ids.extend_from_slice(self.row(r));
        }
        Self::new(ids, rows.len(), self.len, self.pad_id)
    }
}

/// Encoder output for a batch.
#[derive(Debug, Clone)]
pub struct EncoderStates {
    /// `[B, T_x, d]` hidden states.
    pub h: Var,
    /// Non-pad flags for the `B * T_x` source positions.
    pub keep: Vec<bool>,
    pub batch: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeedForwardParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
}

/// One parameter set per block, shared by every order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockParams {
    pub sa: AttentionParams,
    pub ed: Option<AttentionParams>,
    pub ff: FeedForwardParams,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransformerParams {
    pub src_embedding: ParamId,
    /// Also the (tied) output projection.
    pub tgt_embedding: ParamId,
    pub encoder: Vec<BlockParams>,
    pub decoder: Vec<BlockParams>,
}

fn uniform<F: Element, R: Rng>(rng: &mut R, shape: Vec<usize>, bound: f64) -> Tensor<F> {
    let n: usize = shape.iter().product();
    let data: Vec<F> = (0..n).map(|_| F::of(rng.gen_range(-bound..bound))).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

fn xavier<F: Element, R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor<F> {
    uniform(rng, vec![rows, cols], (6.0 / (rows + cols) as f64).sqrt())
}

impl TransformerParams {
    /// Registers freshly initialized parameters under `prefix`-free names
    /// (`enc.0.sa.wq`, `dec.1.ff.b2`, `src_emb`, ...).
    pub fn init<F: Element, R: Rng>(config: &ModelConfig, store: &mut ParamStore<F>, rng: &mut R) -> Result<Self> {
        let d = config.d_model;
        // Embedding rows have variance 1/d so that the sqrt(d) input scale
        // yields unit-variance inputs.
        let emb_bound = (3.0 / d as f64).sqrt();
        let src_embedding = store.insert("src_emb", uniform(rng, vec![config.src_vocab, d], emb_bound))?;
        let tgt_embedding = store.insert("tgt_emb", uniform(rng, vec![config.tgt_vocab, d], emb_bound))?;

        let attention = |store: &mut ParamStore<F>, rng: &mut R, p: &str| -> Result<AttentionParams> {
            Ok(AttentionParams {
                wq: store.insert(format!("{p}.wq"), xavier(rng, d, d))?,
                wk: store.insert(format!("{p}.wk"), xavier(rng, d, d))?,
                wv: store.insert(format!("{p}.wv"), xavier(rng, d, d))?,
                wo: store.insert(format!("{p}.wo"), xavier(rng, d, d))?,
                ln_gain: store.insert(format!("{p}.ln.gain"), Tensor::full(vec![d], F::one()))?,
                ln_bias: store.insert(format!("{p}.ln.bias"), Tensor::zeros(vec![d]))?,
            })
        };
        let feed_forward = |store: &mut ParamStore<F>, rng: &mut R, p: &str| -> Result<FeedForwardParams> {
            Ok(FeedForwardParams {
                w1: store.insert(format!("{p}.w1"), xavier(rng, d, config.d_ff))?,
                b1: store.insert(format!("{p}.b1"), Tensor::zeros(vec![config.d_ff]))?,
                w2: store.insert(format!("{p}.w2"), xavier(rng, config.d_ff, d))?,
                b2: store.insert(format!("{p}.b2"), Tensor::zeros(vec![d]))?,
                ln_gain: store.insert(format!("{p}.ln.gain"), Tensor::full(vec![d], F::one()))?,
                ln_bias: store.insert(format!("{p}.ln.bias"), Tensor::zeros(vec![d]))?,
            })
        };

        let mut encoder = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            encoder.push(BlockParams {
                sa: attention(store, rng, &format!("enc.{l}.sa"))?,
                ed: None,
                ff: feed_forward(store, rng, &format!("enc.{l}.ff"))?,
            });
        }
        let mut decoder = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            decoder.push(BlockParams {
                sa: attention(store, rng, &format!("dec.{l}.sa"))?,
                ed: Some(attention(store, rng, &format!("dec.{l}.ed"))?),
                ff: feed_forward(store, rng, &format!("dec.{l}.ff"))?,
            });
        }
        Ok(Self {
            src_embedding,
            tgt_embedding,
            encoder,
            decoder,
        })
    }

    /// Re-binds parameter ids by name, e.g. after loading a checkpoint.
    pub fn bind<F: Element>(config: &ModelConfig, store: &ParamStore<F>) -> Result<Self> {
        let id = |name: String| {
            store
                .id(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
        };
        let attention = |p: String| -> Result<AttentionParams> {
            Ok(AttentionParams {
                wq: id(format!("{p}.wq"))?,
                wk: id(format!("{p}.wk"))?,
                wv: id(format!("{p}.wv"))?,
                wo: id(format!("{p}.wo"))?,
                ln_gain: id(format!("{p}.ln.gain"))?,
                ln_bias: id(format!("{p}.ln.bias"))?,
            })
        };
        let feed_forward = |p: String| -> Result<FeedForwardParams> {
            Ok(FeedForwardParams {
                w1: id(format!("{p}.w1"))?,
                b1: id(format!("{p}.b1"))?,
                w2: id(format!("{p}.w2"))?,
                b2: id(format!("{p}.b2"))?,
                ln_gain: id(format!("{p}.ln.gain"))?,
                ln_bias: id(format!("{p}.ln.bias"))?,
            })
        };
        Ok(Self {
            src_embedding: id("src_emb".into())?,
            tgt_embedding: id("tgt_emb".into())?,
            encoder: (0..config.layers)
                .map(|l| {
                    Ok(BlockParams {
                        sa: attention(format!("enc.{l}.sa"))?,
                        ed: None,
                        ff: feed_forward(format!("enc.{l}.ff"))?,
                    })
                })
                .collect::<Result<_>>()?,
            decoder: (0..config.layers)
                .map(|l| {
                    Ok(BlockParams {
                        sa: attention(format!("dec.{l}.sa"))?,
                        ed: Some(attention(format!("dec.{l}.ed"))?),
                        ff: feed_forward(format!("dec.{l}.ff"))?,
                    })
                })
                .collect::<Result<_>>()?,
        })
    }
}

/// Standard sin/cos table, `[len, d]`.
pub fn sinusoidal_table(len: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 * rate;
            pe[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

/// Shared state for one forward pass.
pub struct Ctx<'a, F> {
    pub store: &'a ParamStore<F>,
    pub config: &'a ModelConfig,
}

impl<'a, F: Element> Ctx<'a, F> {
    pub fn new(store: &'a ParamStore<F>, config: &'a ModelConfig) -> Self {
        Self { store, config }
    }

    fn p(&self, g: &mut Graph<F>, id: ParamId) -> Result<Var> {
        Ok(g.param(self.store, id)?)
    }

    /// Multi-head attention of `queries` over `keys_values` under a boolean
    /// block mask of shape `[B, Tq, Tk]` (true = blocked).
    fn multi_head(
        &self,
        g: &mut Graph<F>,
        p: &AttentionParams,
        queries: Var,
        keys_values: Var,
        blocked: &[bool],
    ) -> Result<Var> {
        let d = self.config.d_model;
        let heads = self.config.heads;
        if !d.is_multiple_of(heads) {
            return Err(Error::Config(format!("d_model {d} not divisible by {heads} heads")));
        }
        let dh = d / heads;
        let (b, tq) = (g.shape(queries)[0], g.shape(queries)[1]);
        let tk = g.shape(keys_values)[1];

        let split = |g: &mut Graph<F>, x: Var, w: ParamId, t: usize| -> Result<Var> {
            let w = self.p(g, w)?;
            let y = g.matmul(x, w)?;
            let y = g.reshape(y, &[b, t, heads, dh])?;
            Ok(g.swap_axes_12(y)?)
        };
        let q = split(g, queries, p.wq, tq)?;
        let k = split(g, keys_values, p.wk, tk)?;
        let v = split(g, keys_values, p.wv, tk)?;

        let scores = g.matmul_t(q, k)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let mut mask = Vec::with_capacity(b * heads * tq * tk);
        for bi in 0..b {
            let m = &blocked[bi * tq * tk..(bi + 1) * tq * tk];
            for _ in 0..heads {
                mask.extend_from_slice(m);
            }
        }
        let scores = g.masked_fill(scores, &mask)?;
        let attn = g.softmax(scores)?;
        let ctx = g.matmul(attn, v)?;
        let ctx = g.swap_axes_12(ctx)?;
        let ctx = g.reshape(ctx, &[b, tq, d])?;
        let wo = self.p(g, p.wo)?;
        Ok(g.matmul(ctx, wo)?)
    }

    fn residual_norm(&self, g: &mut Graph<F>, x: Var, branch: Var, gain: ParamId, bias: ParamId) -> Result<Var> {
        let branch = g.dropout(branch, self.config.dropout)?;
        let sum = g.add(x, branch)?;
        let gain = self.p(g, gain)?;
        let bias = self.p(g, bias)?;
        Ok(g.layer_norm(sum, gain, bias)?)
    }

    /// `LayerNorm(x + Dropout(MultiHead(x, x, x)))` over `[B, T, d]`.
    /// Pad keys (`keep == false`) are masked; `causal` additionally blocks
    /// future positions.
    pub fn self_attention_layer(
        &self,
        g: &mut Graph<F>,
        p: &AttentionParams,
        x: Var,
        keep: &[bool],
        causal: bool,
    ) -> Result<Var> {
        let (b, t) = (g.shape(x)[0], g.shape(x)[1]);
        let mut blocked = vec![false; b * t * t];
        for bi in 0..b {
            for i in 0..t {
                for j in 0..t {
                    // A query always sees itself, so no row is fully masked.
                    let pad = !keep[bi * t + j] && i != j;
                    blocked[(bi * t + i) * t + j] = pad || (causal && j > i);
                }
            }
        }
        let y = self.multi_head(g, p, x, x, &blocked)?;
        self.residual_norm(g, x, y, p.ln_gain, p.ln_bias)
    }

    /// `LayerNorm(x + Dropout(MultiHead(x, h, h)))` against encoder memory.
    pub fn cross_attention_layer(
        &self,
        g: &mut Graph<F>,
        p: &AttentionParams,
        x: Var,
        memory: &EncoderStates,
    ) -> Result<Var> {
        let (b, t) = (g.shape(x)[0], g.shape(x)[1]);
        let s = memory.len;
        if memory.batch != b {
            return Err(Error::Dimension(format!(
                "memory batch {} for query batch {b}",
                memory.batch
            )));
        }
        let mut blocked = vec![false; b * t * s];
        for bi in 0..b {
            let row = &memory.keep[bi * s..(bi + 1) * s];
            if !row.iter().any(|&k| k) {
                return Err(Error::EmptyMemory(bi));
            }
            for i in 0..t {
                for (j, &k) in row.iter().enumerate() {
                    blocked[(bi * t + i) * s + j] = !k;
                }
            }
        }
        let y = self.multi_head(g, p, x, memory.h, &blocked)?;
        self.residual_norm(g, x, y, p.ln_gain, p.ln_bias)
    }

    /// `LayerNorm(x + Dropout(W2 relu(W1 x + b1) + b2))`.
    pub fn feed_forward_layer(&self, g: &mut Graph<F>, p: &FeedForwardParams, x: Var) -> Result<Var> {
        let w1 = self.p(g, p.w1)?;
        let b1 = self.p(g, p.b1)?;
        let w2 = self.p(g, p.w2)?;
        let b2 = self.p(g, p.b2)?;
        let h = g.matmul(x, w1)?;
        let h = g.add(h, b1)?;
        let h = g.relu(h)?;
        let h = g.matmul(h, w2)?;
        let h = g.add(h, b2)?;
        self.residual_norm(g, x, h, p.ln_gain, p.ln_bias)
    }

    /// Runs the block's sublayers in `order`.
    pub fn apply_block(
        &self,
        g: &mut Graph<F>,
        block: &BlockParams,
        x: Var,
        keep: &[bool],
        causal: bool,
        memory: Option<&EncoderStates>,
        order: &LayerOrder,
    ) -> Result<Var> {
        let mut h = x;
        for kind in order.kinds() {
            h = match kind {
                LayerKind::SA => self.self_attention_layer(g, &block.sa, h, keep, causal)?,
                LayerKind::FF => self.feed_forward_layer(g, &block.ff, h)?,
                LayerKind::ED => {
                    let memory = memory.ok_or(Error::MissingMemory)?;
                    let params = block.ed.as_ref().ok_or(Error::MissingMemory)?;
                    self.cross_attention_layer(g, params, h, memory)?
                }
            };
        }
        Ok(h)
    }

    /// Scaled token embeddings plus sinusoidal positions, before dropout.
    pub fn embed(&self, g: &mut Graph<F>, table: ParamId, tokens: &TokenBatch) -> Result<Var> {
        if tokens.len > self.config.max_len {
            return Err(Error::SequenceTooLong {
                len: tokens.len,
                max: self.config.max_len,
            });
        }
        let d = self.config.d_model;
        let table = self.p(g, table)?;
        let e = g.embedding(table, &tokens.ids, &[tokens.batch, tokens.len])?;
        let e = g.scale(e, (d as f64).sqrt())?;
        let pe = g.constant(Tensor::from_f64(vec![tokens.len, d], &sinusoidal_table(tokens.len, d))?)?;
        Ok(g.add(e, pe)?)
    }

    /// Encodes a source batch with every block using `order`. Returns the
    /// pre-dropout input embeddings alongside the encoder states.
    pub fn encode(
        &self,
        g: &mut Graph<F>,
        params: &TransformerParams,
        src: &TokenBatch,
        order: &LayerOrder,
    ) -> Result<(Var, EncoderStates)> {
        if order.contains(LayerKind::ED) {
            return Err(Error::MissingMemory);
        }
        let embedded = self.embed(g, params.src_embedding, src)?;
        let keep = src.keep();
        let h = self.encode_embedded(g, params, embedded, &keep, order)?;
        Ok((
            embedded,
            EncoderStates {
                h,
                keep,
                batch: src.batch,
                len: src.len,
            },
        ))
    }

    /// Encoder stack applied to already embedded inputs.
    pub fn encode_embedded(
        &self,
        g: &mut Graph<F>,
        params: &TransformerParams,
        embedded: Var,
        keep: &[bool],
        order: &LayerOrder,
    ) -> Result<Var> {
        let mut h = g.dropout(embedded, self.config.dropout)?;
        for block in &params.encoder {
            h = self.apply_block(g, block, h, keep, false, None, order)?;
        }
        Ok(h)
    }

    /// Teacher-forced decoder pass producing `[B, T_y, V_tgt]` logits.
    pub fn decode_forward(
        &self,
        g: &mut Graph<F>,
        params: &TransformerParams,
        tgt_in: &TokenBatch,
        memory: &EncoderStates,
        order: &LayerOrder,
    ) -> Result<Var> {
        let x = self.embed(g, params.tgt_embedding, tgt_in)?;
        let mut h = g.dropout(x, self.config.dropout)?;
        let keep = tgt_in.keep();
        for block in &params.decoder {
            h = self.apply_block(g, block, h, &keep, true, Some(memory), order)?;
        }
        let emb = self.p(g, params.tgt_embedding)?;
        Ok(g.matmul_t(h, emb)?)
    }
}

#[cfg(test)]
mod tests;
