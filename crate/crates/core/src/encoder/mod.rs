//! Transformer encoder over token sequences.
//!
//! Input embedding of token `i` is
//! `token[id_i] + position[i] + instruction[instruction_index_i]`, where the
//! instruction table is not a separate tensor: instruction row `k` is the
//! token row of `INSTR<k>`. Jump symbols and instruction boundaries thus
//! share one parameter, and gradients from both uses land in it.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numeric::{
    read_checkpoint, write_checkpoint, AdamState, Checkpoint, CheckpointError, Float, Graph,
    NumericError, ParamId, ParamStore, Tensor, Var,
};
use crate::tokenizer::{TokenSequence, Vocab, JUMP_BASE, MASK_ID, PAD_ID};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub max_instructions: usize,
    pub hidden_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub mlm_head: bool,
    pub jtp_head: bool,
    pub init_std: f64,
}

impl EncoderConfig {
    /// Default desk-scale shape for a vocabulary.
    pub fn desk(vocab: &Vocab) -> Self {
        Self {
            vocab_size: vocab.len(),
            max_seq_len: 256,
            max_instructions: vocab.max_instructions(),
            hidden_dim: 64,
            layers: 2,
            heads: 4,
            ffn_dim: 256,
            mlm_head: true,
            jtp_head: true,
            init_std: 0.02,
        }
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        let fail = |m: String| Err(EncoderError::Config(m));
        if self.hidden_dim == 0 || self.heads == 0 || self.hidden_dim % self.heads != 0 {
            return fail(format!(
                "hidden_dim {} must be a positive multiple of heads {}",
                self.hidden_dim, self.heads
            ));
        }
        if self.max_seq_len == 0 || self.ffn_dim == 0 {
            return fail("max_seq_len and ffn_dim must be positive".into());
        }
        if self.max_instructions == 0 || self.vocab_size < JUMP_BASE as usize + self.max_instructions
        {
            return fail(format!(
                "vocab_size {} cannot hold {} jump symbols",
                self.vocab_size, self.max_instructions
            ));
        }
        if !(self.init_std.is_finite() && self.init_std >= 0.0) {
            return fail("init_std must be finite and non-negative".into());
        }
        Ok(())
    }

    /// Check agreement with the tokenizer's reservations.
    pub fn check_vocab(&self, vocab: &Vocab) -> Result<(), EncoderError> {
        if vocab.len() != self.vocab_size || vocab.max_instructions() != self.max_instructions {
            return Err(EncoderError::Config(format!(
                "vocab has {} tokens and {} jump symbols; model expects {} and {}",
                vocab.len(),
                vocab.max_instructions(),
                self.vocab_size,
                self.max_instructions
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error("{stream} value {index} out of bounds for {len}")]
    IndexOutOfBounds {
        stream: &'static str,
        index: usize,
        len: usize,
    },
    #[error("empty sequence")]
    EmptySequence,
    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    weight: ParamId,
    bias: Option<ParamId>,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Debug, Clone)]
struct Layer {
    q: Dense,
    k: Dense,
    v: Dense,
    o: Dense,
    attn_norm: Norm,
    up: Dense,
    down: Dense,
    ffn_norm: Norm,
}

#[derive(Debug, Clone, Copy)]
struct Head {
    transform: Dense,
    norm: Norm,
    decoder: Dense,
}

/// Parameter layout of an encoder inside a [`ParamStore`]. The store may
/// hold other tensors too.
#[derive(Debug, Clone)]
pub struct Encoder {
    config: EncoderConfig,
    token: ParamId,
    position: ParamId,
    embed_norm: Norm,
    layers: Vec<Layer>,
    mlm: Option<Head>,
    jtp: Option<Head>,
}

/// Names and shapes of all encoder tensors, in insertion order.
fn layout(c: &EncoderConfig) -> Vec<(String, Vec<usize>)> {
    let d = c.hidden_dim;
    let mut out = vec![
        ("embeddings.token".to_string(), vec![c.vocab_size, d]),
        ("embeddings.position".to_string(), vec![c.max_seq_len, d]),
    ];
    let norm = |out: &mut Vec<_>, p: &str| {
        out.push((format!("{p}.gamma"), vec![d]));
        out.push((format!("{p}.beta"), vec![d]));
    };
    norm(&mut out, "embeddings.norm");
    let dense = |out: &mut Vec<(String, Vec<usize>)>, p: &str, i: usize, o: usize| {
        out.push((format!("{p}.weight"), vec![i, o]));
        out.push((format!("{p}.bias"), vec![o]));
    };
    for l in 0..c.layers {
        // No key bias: it adds the same amount to every score of a query
        // row, which softmax cancels, so its gradient is identically zero.
        dense(&mut out, &format!("layers.{l}.attn.q"), d, d);
        out.push((format!("layers.{l}.attn.k.weight"), vec![d, d]));
        dense(&mut out, &format!("layers.{l}.attn.v"), d, d);
        dense(&mut out, &format!("layers.{l}.attn.o"), d, d);
        norm(&mut out, &format!("layers.{l}.attn_norm"));
        dense(&mut out, &format!("layers.{l}.ffn.up"), d, c.ffn_dim);
        dense(&mut out, &format!("layers.{l}.ffn.down"), c.ffn_dim, d);
        norm(&mut out, &format!("layers.{l}.ffn_norm"));
    }
    for (head, on, width) in [
        ("mlm", c.mlm_head, c.vocab_size),
        ("jtp", c.jtp_head, c.max_instructions),
    ] {
        if on {
            dense(&mut out, &format!("{head}.transform"), d, d);
            norm(&mut out, &format!("{head}.norm"));
            dense(&mut out, &format!("{head}.decoder"), d, width);
        }
    }
    out
}

impl Encoder {
    /// Add freshly initialized encoder tensors to `store`: weights from
    /// `N(0, init_std)`, biases zero, norm gains one.
    pub fn init<T: Float, R: Rng + ?Sized>(
        config: EncoderConfig,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self, EncoderError> {
        config.validate()?;
        for (name, shape) in layout(&config) {
            let t = if name.ends_with(".gamma") {
                Tensor::full(&shape, T::one())
            } else if name.ends_with(".bias") || name.ends_with(".beta") {
                Tensor::zeros(&shape)
            } else {
                Tensor::randn(&shape, config.init_std, rng)
            };
            store.insert(name, t);
        }
        Self::bind(config, store)
    }

    /// Resolve the encoder tensors of an existing store, checking shapes.
    pub fn bind<T: Float>(config: EncoderConfig, store: &ParamStore<T>) -> Result<Self, EncoderError> {
        config.validate()?;
        for (name, shape) in layout(&config) {
            match store.by_name(&name) {
                None => {
                    return Err(EncoderError::IncompatibleCheckpoint(format!(
                        "missing tensor {name}"
                    )))
                }
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(EncoderError::IncompatibleCheckpoint(format!(
                        "{name} has shape {:?}, config implies {shape:?}",
                        t.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        let id = |n: &str| store.id(n).expect("checked above");
        let dense = |p: &str| Dense {
            weight: id(&format!("{p}.weight")),
            bias: store.id(&format!("{p}.bias")),
        };
        let norm = |p: &str| Norm {
            gamma: id(&format!("{p}.gamma")),
            beta: id(&format!("{p}.beta")),
        };
        let layers = (0..config.layers)
            .map(|l| Layer {
                q: dense(&format!("layers.{l}.attn.q")),
                k: dense(&format!("layers.{l}.attn.k")),
                v: dense(&format!("layers.{l}.attn.v")),
                o: dense(&format!("layers.{l}.attn.o")),
                attn_norm: norm(&format!("layers.{l}.attn_norm")),
                up: dense(&format!("layers.{l}.ffn.up")),
                down: dense(&format!("layers.{l}.ffn.down")),
                ffn_norm: norm(&format!("layers.{l}.ffn_norm")),
            })
            .collect();
        let head = |p: &str| Head {
            transform: dense(&format!("{p}.transform")),
            norm: norm(&format!("{p}.norm")),
            decoder: dense(&format!("{p}.decoder")),
        };
        Ok(Self {
            token: id("embeddings.token"),
            position: id("embeddings.position"),
            embed_norm: norm("embeddings.norm"),
            layers,
            mlm: config.mlm_head.then(|| head("mlm")),
            jtp: config.jtp_head.then(|| head("jtp")),
            config,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn token_param(&self) -> ParamId {
        self.token
    }

    /// Names of the tensors owned by the encoder.
    pub fn param_names(&self) -> Vec<String> {
        layout(&self.config).into_iter().map(|(n, _)| n).collect()
    }

    fn check_seq(&self, seq: &TokenSequence) -> Result<(), EncoderError> {
        let c = &self.config;
        if seq.is_empty() {
            return Err(EncoderError::EmptySequence);
        }
        let oob = |stream, index: usize, len| EncoderError::IndexOutOfBounds { stream, index, len };
        if seq.len() > c.max_seq_len {
            return Err(oob("length", seq.len(), c.max_seq_len));
        }
        if seq.instruction_index.len() != seq.len() || seq.position.len() != seq.len() {
            return Err(EncoderError::Config("token streams differ in length".into()));
        }
        for &id in &seq.token_ids {
            if id as usize >= c.vocab_size {
                return Err(oob("token id", id as usize, c.vocab_size));
            }
        }
        for &p in &seq.position {
            if p as usize >= c.max_seq_len {
                return Err(oob("position", p as usize, c.max_seq_len));
            }
        }
        for &k in &seq.instruction_index {
            if k as usize >= c.max_instructions {
                return Err(oob("instruction index", k as usize, c.max_instructions));
            }
        }
        Ok(())
    }

    /// `token[id] + position[pos] + instruction[index]` for every token.
    pub fn embed_inputs<T: Float>(
        &self,
        g: &mut Graph<'_, T>,
        seq: &TokenSequence,
    ) -> Result<Var, EncoderError> {
        self.check_seq(seq)?;
        let table = g.param(self.token)?;
        let ids: Vec<usize> = seq.token_ids.iter().map(|&i| i as usize).collect();
        let instr: Vec<usize> = seq
            .instruction_index
            .iter()
            .map(|&k| JUMP_BASE as usize + k as usize)
            .collect();
        let pos: Vec<usize> = seq.position.iter().map(|&p| p as usize).collect();
        let tok = g.gather_rows(table, &ids)?;
        let ins = g.gather_rows(table, &instr)?;
        let ptable = g.param(self.position)?;
        let pe = g.gather_rows(ptable, &pos)?;
        let x = g.add(tok, pe)?;
        Ok(g.add(x, ins)?)
    }

    fn dense<T: Float>(g: &mut Graph<'_, T>, x: Var, d: Dense) -> Result<Var, NumericError> {
        let w = g.param(d.weight)?;
        let y = g.matmul(x, w, false)?;
        match d.bias {
            Some(b) => {
                let b = g.param(b)?;
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }

    fn norm<T: Float>(g: &mut Graph<'_, T>, x: Var, n: Norm) -> Result<Var, NumericError> {
        let gamma = g.param(n.gamma)?;
        let beta = g.param(n.beta)?;
        g.layer_norm(x, gamma, beta)
    }

    /// Final-layer outputs, one row per token.
    pub fn hidden<T: Float>(
        &self,
        g: &mut Graph<'_, T>,
        seq: &TokenSequence,
    ) -> Result<Var, EncoderError> {
        let e = self.embed_inputs(g, seq)?;
        let mut x = Self::norm(g, e, self.embed_norm)?;
        let keys: Vec<bool> = seq.token_ids.iter().map(|&id| id != PAD_ID).collect();
        let dh = self.config.hidden_dim / self.config.heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        for layer in &self.layers {
            let q = Self::dense(g, x, layer.q)?;
            let k = Self::dense(g, x, layer.k)?;
            let v = Self::dense(g, x, layer.v)?;
            let mut heads = Vec::with_capacity(self.config.heads);
            for h in 0..self.config.heads {
                let qh = g.slice_cols(q, h * dh, dh)?;
                let kh = g.slice_cols(k, h * dh, dh)?;
                let vh = g.slice_cols(v, h * dh, dh)?;
                let s = g.matmul(qh, kh, true)?;
                let s = g.scale(s, scale);
                let p = g.softmax(s, Some(&keys))?;
                heads.push(g.matmul(p, vh, false)?);
            }
            let ctx = if heads.len() == 1 {
                heads[0]
            } else {
                g.concat_cols(&heads)?
            };
            let o = Self::dense(g, ctx, layer.o)?;
            let r = g.add(x, o)?;
            x = Self::norm(g, r, layer.attn_norm)?;
            let u = Self::dense(g, x, layer.up)?;
            let u = g.gelu(u);
            let f = Self::dense(g, u, layer.down)?;
            let r = g.add(x, f)?;
            x = Self::norm(g, r, layer.ffn_norm)?;
        }
        Ok(x)
    }

    /// Mean of the hidden rows holding content (not `<pad>` or `<mask>`).
    pub fn pool<T: Float>(
        &self,
        g: &mut Graph<'_, T>,
        hidden: Var,
        seq: &TokenSequence,
    ) -> Result<Var, EncoderError> {
        let mask: Vec<bool> = seq
            .token_ids
            .iter()
            .map(|&id| id != PAD_ID && id != MASK_ID)
            .collect();
        Ok(g.mean_pool(hidden, &mask)?)
    }

    /// Pooled `1×d` function embedding.
    pub fn embed<T: Float>(
        &self,
        g: &mut Graph<'_, T>,
        seq: &TokenSequence,
    ) -> Result<Var, EncoderError> {
        let h = self.hidden(g, seq)?;
        self.pool(g, h, seq)
    }

    fn head_logits<T: Float>(
        g: &mut Graph<'_, T>,
        head: Option<Head>,
        name: &str,
        hidden: Var,
        positions: &[usize],
    ) -> Result<Var, EncoderError> {
        let head = head.ok_or_else(|| EncoderError::Config(format!("{name} head disabled")))?;
        let x = g.gather_rows(hidden, positions)?;
        let t = Self::dense(g, x, head.transform)?;
        let t = g.gelu(t);
        let t = Self::norm(g, t, head.norm)?;
        Ok(Self::dense(g, t, head.decoder)?)
    }

    /// Masked-token logits `[positions × vocab_size]`.
    pub fn mlm_logits<T: Float>(
        &self,
        g: &mut Graph<'_, T>,
        hidden: Var,
        positions: &[usize],
    ) -> Result<Var, EncoderError> {
        Self::head_logits(g, self.mlm, "mlm", hidden, positions)
    }

    /// Jump-target logits `[positions × max_instructions]`.
    pub fn jtp_logits<T: Float>(
        &self,
        g: &mut Graph<'_, T>,
        hidden: Var,
        positions: &[usize],
    ) -> Result<Var, EncoderError> {
        Self::head_logits(g, self.jtp, "jtp", hidden, positions)
    }
}

/// An encoder together with its parameters.
#[derive(Debug, Clone)]
pub struct EncoderModel<T> {
    pub encoder: Encoder,
    pub params: ParamStore<T>,
}

impl<T: Float> EncoderModel<T> {
    pub fn new<R: Rng + ?Sized>(config: EncoderConfig, rng: &mut R) -> Result<Self, EncoderError> {
        let mut params = ParamStore::new();
        let encoder = Encoder::init(config, &mut params, rng)?;
        Ok(Self { encoder, params })
    }

    pub fn config(&self) -> &EncoderConfig {
        self.encoder.config()
    }

    /// Pooled embedding of one sequence.
    pub fn encode_function(&self, seq: &TokenSequence) -> Result<Vec<T>, EncoderError> {
        let mut g = Graph::new(&self.params);
        let e = self.encoder.embed(&mut g, seq)?;
        Ok(g.value(e).data().to_vec())
    }

    /// Row `id` of the token table.
    pub fn token_embedding_row(&self, id: usize) -> &[T] {
        self.params.get(self.encoder.token).row(id)
    }

    /// Row `k` of the instruction table, read through its own indexing.
    pub fn instruction_embedding_row(&self, k: usize) -> &[T] {
        assert!(k < self.config().max_instructions);
        self.params
            .get(self.encoder.token)
            .row(JUMP_BASE as usize + k)
    }
}

/// JSON stored in a checkpoint's config slot. Fields other than `encoder`
/// belong to the pipeline stage that wrote the checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub encoder: EncoderConfig,
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

impl ModelManifest {
    pub fn new(encoder: EncoderConfig) -> Self {
        Self {
            encoder,
            extra: Default::default(),
        }
    }
}

pub fn save_model(
    path: &Path,
    manifest: &ModelManifest,
    params: &ParamStore<f32>,
    optimizer: Option<&AdamState<f32>>,
) -> Result<(), EncoderError> {
    let ck = Checkpoint {
        config: serde_json::to_string(manifest).expect("manifest serializes"),
        params: params.clone(),
        optimizer: optimizer.cloned(),
    };
    write_checkpoint(path, &ck)?;
    Ok(())
}

/// Load a checkpoint and bind its encoder. When `expected` is given, the
/// stored config must equal it.
pub fn load_model(
    path: &Path,
    expected: Option<&EncoderConfig>,
) -> Result<(ModelManifest, Encoder, Checkpoint), EncoderError> {
    let ck = read_checkpoint(path)?;
    let manifest: ModelManifest = serde_json::from_str(&ck.config)
        .map_err(|e| EncoderError::IncompatibleCheckpoint(format!("config echo: {e}")))?;
    if let Some(want) = expected {
        if want != &manifest.encoder {
            return Err(EncoderError::IncompatibleCheckpoint(format!(
                "checkpoint config {:?} differs from requested {:?}",
                manifest.encoder, want
            )));
        }
    }
    let encoder = Encoder::bind(manifest.encoder.clone(), &ck.params)?;
    Ok((manifest, encoder, ck))
}
