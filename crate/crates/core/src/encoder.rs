//! Pre-norm transformer encoder with per-layer CLS embeddings.
//!
//! Layer `n` (1-based) emits the CLS hidden state after `n` blocks, passed
//! through that block's own output norm. Because each block owns its output
//! norm, the embedding of layer `n` depends on blocks `1..=n` only, which is
//! what makes early exit and physical truncation exact.

use std::sync::Arc;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::rng::{self, Stream};
use crate::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const CLS_ID: u32 = 1;
/// Ids below this value are never produced by hashing.
pub const NUM_RESERVED: u32 = 2;
pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;
/// Additive attention bias for padded key positions; `exp` of it underflows
/// to exactly zero.
const MASKED: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            hidden_dim: 64,
            num_heads: 4,
            ffn_dim: 128,
            vocab_size: 2048,
            max_seq_len: 32,
            seed: rng::DEFAULT_SEED,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("hidden_dim", self.hidden_dim),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "hidden_dim {} is not a multiple of num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.max_seq_len < 2 {
            return Err(Error::Config(
                "max_seq_len must be at least 2 (CLS plus one token)".into(),
            ));
        }
        if self.vocab_size <= NUM_RESERVED as usize {
            return Err(Error::Config(format!(
                "vocab_size must exceed the {NUM_RESERVED} reserved ids"
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    /// Closed-form number of scalar weights.
    pub fn parameter_count(&self) -> usize {
        let (d, f) = (self.hidden_dim, self.ffn_dim);
        // four attention projections, two ffn projections, three norms
        let per_block = 4 * (d * d + d) + (d * f + f) + (f * d + d) + 3 * 2 * d;
        (self.vocab_size + self.max_seq_len) * d + self.num_layers * per_block
    }
}

/// Token ids of one sentence; position 0 is always [`CLS_ID`].
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    ids: Vec<u32>,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>) -> Result<Self> {
        if ids.first() != Some(&CLS_ID) {
            return Err(Error::Input("token sequence must start with CLS".into()));
        }
        Ok(Self { ids })
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Deterministic hashing tokenizer: lowercase, split on whitespace and
/// punctuation (punctuation marks are tokens), FNV-1a into the vocabulary.
#[derive(Debug, Clone, Copy)]
pub struct Tokenizer {
    vocab_size: usize,
    max_seq_len: usize,
}

impl Tokenizer {
    pub fn new(config: &EncoderConfig) -> Self {
        Self {
            vocab_size: config.vocab_size,
            max_seq_len: config.max_seq_len,
        }
    }

    pub fn tokenize(&self, text: &str) -> Result<TokenSequence> {
        if text.trim().is_empty() {
            return Err(Error::Input("cannot tokenize empty text".into()));
        }
        let lowered = text.to_lowercase();
        let mut ids = vec![CLS_ID];
        let mut push = |word: &str| ids.push(self.token_id(word));
        let mut start = None;
        for (i, ch) in lowered.char_indices() {
            let boundary = ch.is_whitespace() || ch.is_ascii_punctuation();
            if boundary {
                if let Some(s) = start.take() {
                    push(&lowered[s..i]);
                }
                if ch.is_ascii_punctuation() {
                    push(&lowered[i..i + ch.len_utf8()]);
                }
            } else if start.is_none() {
                start = Some(i);
            }
        }
        if let Some(s) = start {
            push(&lowered[s..]);
        }
        ids.truncate(self.max_seq_len);
        Ok(TokenSequence { ids })
    }

    fn token_id(&self, word: &str) -> u32 {
        let span = (self.vocab_size - NUM_RESERVED as usize) as u64;
        NUM_RESERVED + (fnv1a64(word.as_bytes()) % span) as u32
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325_u64;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `[in, out]`
    pub weight: Arc<Tensor>,
    pub bias: Arc<Tensor>,
}

impl Linear {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Arc::new(Tensor::zeros(&[inputs, outputs])),
            bias: Arc::new(Tensor::zeros(&[outputs])),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Norm {
    pub gain: Arc<Tensor>,
    pub bias: Arc<Tensor>,
}

impl Norm {
    fn identity(dim: usize) -> Self {
        Self {
            gain: Arc::new(Tensor::ones(&[dim])),
            bias: Arc::new(Tensor::zeros(&[dim])),
        }
    }
}

/// One pre-norm transformer block plus the norm applied to its CLS output.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub attn_norm: Norm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub attn_out: Linear,
    pub ffn_norm: Norm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub out_norm: Norm,
}

const BLOCK_TENSORS: [&str; 18] = [
    "attn_norm.gain",
    "attn_norm.bias",
    "query.weight",
    "query.bias",
    "key.weight",
    "key.bias",
    "value.weight",
    "value.bias",
    "attn_out.weight",
    "attn_out.bias",
    "ffn_norm.gain",
    "ffn_norm.bias",
    "ffn_in.weight",
    "ffn_in.bias",
    "ffn_out.weight",
    "ffn_out.bias",
    "out_norm.gain",
    "out_norm.bias",
];

impl Block {
    fn zeros(config: &EncoderConfig) -> Self {
        let (d, f) = (config.hidden_dim, config.ffn_dim);
        Self {
            attn_norm: Norm::identity(d),
            query: Linear::zeros(d, d),
            key: Linear::zeros(d, d),
            value: Linear::zeros(d, d),
            attn_out: Linear::zeros(d, d),
            ffn_norm: Norm::identity(d),
            ffn_in: Linear::zeros(d, f),
            ffn_out: Linear::zeros(f, d),
            out_norm: Norm::identity(d),
        }
    }

    /// Tensors in [`BLOCK_TENSORS`] order.
    fn tensors(&self) -> [&Arc<Tensor>; 18] {
        [
            &self.attn_norm.gain,
            &self.attn_norm.bias,
            &self.query.weight,
            &self.query.bias,
            &self.key.weight,
            &self.key.bias,
            &self.value.weight,
            &self.value.bias,
            &self.attn_out.weight,
            &self.attn_out.bias,
            &self.ffn_norm.gain,
            &self.ffn_norm.bias,
            &self.ffn_in.weight,
            &self.ffn_in.bias,
            &self.ffn_out.weight,
            &self.ffn_out.bias,
            &self.out_norm.gain,
            &self.out_norm.bias,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Arc<Tensor>; 18] {
        [
            &mut self.attn_norm.gain,
            &mut self.attn_norm.bias,
            &mut self.query.weight,
            &mut self.query.bias,
            &mut self.key.weight,
            &mut self.key.bias,
            &mut self.value.weight,
            &mut self.value.bias,
            &mut self.attn_out.weight,
            &mut self.attn_out.bias,
            &mut self.ffn_norm.gain,
            &mut self.ffn_norm.bias,
            &mut self.ffn_in.weight,
            &mut self.ffn_in.bias,
            &mut self.ffn_out.weight,
            &mut self.ffn_out.bias,
            &mut self.out_norm.gain,
            &mut self.out_norm.bias,
        ]
    }
}

/// A named weight tensor in canonical order.
#[derive(Debug, Clone, Copy)]
pub struct ParamRef<'a> {
    pub name: &'a str,
    pub layer: Option<usize>,
    pub tensor: &'a Arc<Tensor>,
}

impl ParamRef<'_> {
    pub fn full_name(&self) -> String {
        match self.layer {
            Some(l) => format!("layers.{l}.{}", self.name),
            None => self.name.to_string(),
        }
    }

    /// Matrices get weight decay; gains and biases do not.
    pub fn is_matrix(&self) -> bool {
        self.tensor.rank() == 2
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    config: EncoderConfig,
    advertised_dim: Option<usize>,
    token_embedding: Arc<Tensor>,
    position_embedding: Arc<Tensor>,
    blocks: Vec<Block>,
}

impl EncoderModel {
    /// Seeded initialization: N(0, 0.02) for embeddings and projection
    /// matrices, zero biases, unit norm gains.
    pub fn init(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut model = Self::zeros(config);
        let mut rng = rng::stream(config.seed, Stream::Init);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        for tensor in model.parameters_mut() {
            if tensor.rank() == 2 {
                let t = Arc::make_mut(tensor);
                for v in t.data_mut() {
                    *v = normal.sample(&mut rng);
                }
            }
        }
        Ok(model)
    }

    pub(crate) fn zeros(config: EncoderConfig) -> Self {
        let d = config.hidden_dim;
        Self {
            config,
            advertised_dim: None,
            token_embedding: Arc::new(Tensor::zeros(&[config.vocab_size, d])),
            position_embedding: Arc::new(Tensor::zeros(&[config.max_seq_len, d])),
            blocks: (0..config.num_layers).map(|_| Block::zeros(&config)).collect(),
        }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn num_layers(&self) -> usize {
        self.config.num_layers
    }

    pub fn hidden_dim(&self) -> usize {
        self.config.hidden_dim
    }

    /// Embedding size an exported model advertises; `hidden_dim` otherwise.
    pub fn advertised_dim(&self) -> Option<usize> {
        self.advertised_dim
    }

    pub fn output_dim(&self) -> usize {
        self.advertised_dim.unwrap_or(self.config.hidden_dim)
    }

    pub(crate) fn set_advertised_dim(&mut self, dim: Option<usize>) {
        self.advertised_dim = dim;
    }

    pub fn tokenizer(&self) -> Tokenizer {
        Tokenizer::new(&self.config)
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    /// Keeps the first `n` blocks.
    pub(crate) fn truncate_layers(&mut self, n: usize) {
        self.blocks.truncate(n);
        self.config.num_layers = self.blocks.len();
    }

    /// All weights in canonical order: embeddings, then each block.
    pub fn parameters(&self) -> Vec<ParamRef<'_>> {
        let mut out = vec![
            ParamRef {
                name: "token_embedding",
                layer: None,
                tensor: &self.token_embedding,
            },
            ParamRef {
                name: "position_embedding",
                layer: None,
                tensor: &self.position_embedding,
            },
        ];
        for (l, block) in self.blocks.iter().enumerate() {
            for (name, tensor) in BLOCK_TENSORS.iter().zip(block.tensors()) {
                out.push(ParamRef {
                    name,
                    layer: Some(l),
                    tensor,
                });
            }
        }
        out
    }

    /// Same order as [`EncoderModel::parameters`].
    pub fn parameters_mut(&mut self) -> Vec<&mut Arc<Tensor>> {
        let mut out = vec![&mut self.token_embedding, &mut self.position_embedding];
        for block in &mut self.blocks {
            out.extend(block.tensors_mut());
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|p| p.tensor.len()).sum()
    }

    /// Attaches every weight to `tape` as a shared leaf.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> BoundEncoder {
        let vars: Vec<Var> = self
            .parameters()
            .into_iter()
            .map(|p| tape.leaf_shared(Arc::clone(p.tensor), requires_grad))
            .collect();
        BoundEncoder::from_vars(self.config, &vars).expect("parameter list matches layout")
    }

    /// CLS embeddings of every layer, full width.
    pub fn forward_all_layers(&self, batch: &Batch) -> Result<Vec<Tensor>> {
        self.forward_layers(batch, self.num_layers())
    }

    /// Early-exit forward: runs blocks `1..=n` only.
    pub fn forward_layers(&self, batch: &Batch, n: usize) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let out = forward(&mut tape, &bound, batch, n)?;
        Ok(out.cls.iter().map(|&v| tape.value(v).clone()).collect())
    }

    /// `X_n^d`: the first `d` components of the layer-`n` CLS state.
    pub fn embed(&self, batch: &Batch, n: usize, d: usize) -> Result<Tensor> {
        self.check_layer_dim(n, d)?;
        let layers = self.forward_layers(batch, n)?;
        Ok(layers[n - 1].prefix_columns(d)?)
    }

    pub fn embed_texts<S: AsRef<str>>(&self, texts: &[S], n: usize, d: usize) -> Result<Tensor> {
        let tok = self.tokenizer();
        let seqs = texts
            .iter()
            .map(|t| tok.tokenize(t.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        self.embed(&Batch::new(&seqs, &self.config)?, n, d)
    }

    pub fn check_layer_dim(&self, n: usize, d: usize) -> Result<()> {
        if n == 0 || n > self.num_layers() {
            return Err(Error::Input(format!(
                "layer {n} outside [1, {}]",
                self.num_layers()
            )));
        }
        if d == 0 || d > self.output_dim() {
            return Err(Error::Input(format!(
                "dimension {d} outside [1, {}]",
                self.output_dim()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundLinear {
    pub weight: Var,
    pub bias: Var,
}

impl BoundLinear {
    fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let y = tape.matmul(x, self.weight)?;
        Ok(tape.add_row(y, self.bias)?)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundNorm {
    pub gain: Var,
    pub bias: Var,
}

impl BoundNorm {
    fn take(next: &mut dyn FnMut() -> Var) -> Self {
        Self {
            gain: next(),
            bias: next(),
        }
    }

    fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        Ok(tape.layer_norm(x, self.gain, self.bias, LAYER_NORM_EPS)?)
    }
}

#[derive(Debug, Clone)]
pub struct BoundBlock {
    pub attn_norm: BoundNorm,
    pub query: BoundLinear,
    pub key: BoundLinear,
    pub value: BoundLinear,
    pub attn_out: BoundLinear,
    pub ffn_norm: BoundNorm,
    pub ffn_in: BoundLinear,
    pub ffn_out: BoundLinear,
    pub out_norm: BoundNorm,
}

/// Model weights attached to a tape.
#[derive(Debug, Clone)]
pub struct BoundEncoder {
    pub config: EncoderConfig,
    pub token_embedding: Var,
    pub position_embedding: Var,
    pub blocks: Vec<BoundBlock>,
}

impl BoundEncoder {
    /// Assembles an encoder from vars in canonical parameter order, e.g. to
    /// substitute some weights with other tape nodes.
    pub fn from_vars(config: EncoderConfig, vars: &[Var]) -> Result<Self> {
        let expected = 2 + BLOCK_TENSORS.len() * config.num_layers;
        if vars.len() != expected {
            return Err(Error::Input(format!(
                "expected {expected} parameter vars, got {}",
                vars.len()
            )));
        }
        let mut it = vars.iter().copied();
        let mut next = || it.next().expect("length checked");
        let token_embedding = next();
        let position_embedding = next();
        let blocks = (0..config.num_layers)
            .map(|_| {
                let linear = |next: &mut dyn FnMut() -> Var| BoundLinear {
                    weight: next(),
                    bias: next(),
                };
                let attn_norm = BoundNorm::take(&mut next);
                let query = linear(&mut next);
                let key = linear(&mut next);
                let value = linear(&mut next);
                let attn_out = linear(&mut next);
                let ffn_norm = BoundNorm::take(&mut next);
                let ffn_in = linear(&mut next);
                let ffn_out = linear(&mut next);
                let out_norm = BoundNorm::take(&mut next);
                BoundBlock {
                    attn_norm,
                    query,
                    key,
                    value,
                    attn_out,
                    ffn_norm,
                    ffn_in,
                    ffn_out,
                    out_norm,
                }
            })
            .collect();
        Ok(BoundEncoder {
            config,
            token_embedding,
            position_embedding,
            blocks,
        })
    }

    /// Leaf variables in [`EncoderModel::parameters`] order.
    pub fn parameters(&self) -> Vec<Var> {
        let mut out = vec![self.token_embedding, self.position_embedding];
        for b in &self.blocks {
            out.extend([
                b.attn_norm.gain,
                b.attn_norm.bias,
                b.query.weight,
                b.query.bias,
                b.key.weight,
                b.key.bias,
                b.value.weight,
                b.value.bias,
                b.attn_out.weight,
                b.attn_out.bias,
                b.ffn_norm.gain,
                b.ffn_norm.bias,
                b.ffn_in.weight,
                b.ffn_in.bias,
                b.ffn_out.weight,
                b.ffn_out.bias,
                b.out_norm.gain,
                b.out_norm.bias,
            ]);
        }
        out
    }
}

/// Right-padded batch of token sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    ids: Vec<u32>,
    lengths: Vec<usize>,
    seq_len: usize,
}

impl Batch {
    pub fn new(seqs: &[TokenSequence], config: &EncoderConfig) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let seq_len = seqs.iter().map(TokenSequence::len).max().unwrap_or(0);
        Self::with_seq_len(seqs, config, seq_len)
    }

    /// Pads every sequence to exactly `seq_len` positions.
    pub fn with_seq_len(seqs: &[TokenSequence], config: &EncoderConfig, seq_len: usize) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        if seq_len > config.max_seq_len {
            return Err(Error::Input(format!(
                "sequence length {seq_len} exceeds max_seq_len {}",
                config.max_seq_len
            )));
        }
        let mut ids = Vec::with_capacity(seqs.len() * seq_len);
        let mut lengths = Vec::with_capacity(seqs.len());
        for (i, s) in seqs.iter().enumerate() {
            if s.len() > seq_len {
                return Err(Error::Input(format!(
                    "sequence {i} has {} tokens, more than the padded length {seq_len}",
                    s.len()
                )));
            }
            if let Some(&bad) = s.ids().iter().find(|&&id| id as usize >= config.vocab_size) {
                return Err(Error::Input(format!(
                    "sequence {i}: token id {bad} outside vocabulary of {}",
                    config.vocab_size
                )));
            }
            ids.extend_from_slice(s.ids());
            ids.extend(std::iter::repeat_n(PAD_ID, seq_len - s.len()));
            lengths.push(s.len());
        }
        Ok(Self {
            ids,
            lengths,
            seq_len,
        })
    }

    pub fn size(&self) -> usize {
        self.lengths.len()
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    fn attention_bias(&self) -> Tensor {
        let (b, t) = (self.size(), self.seq_len);
        let mut data = vec![0.0; b * t * t];
        for (s, &len) in self.lengths.iter().enumerate() {
            for q in 0..t {
                let row = &mut data[(s * t + q) * t..(s * t + q + 1) * t];
                row[len..].fill(MASKED);
            }
        }
        Tensor::from_parts(vec![b, t, t], data)
    }
}

/// Per-layer CLS embeddings recorded on a tape.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// `cls[n - 1]` is the `[batch, D]` embedding after block `n`.
    pub cls: Vec<Var>,
    /// Number of transformer blocks actually evaluated.
    pub blocks_run: usize,
}

/// Runs blocks `1..=layers` and collects each block's normalized CLS state.
pub fn forward(tape: &mut Tape, enc: &BoundEncoder, batch: &Batch, layers: usize) -> Result<EncoderOutput> {
    let cfg = enc.config;
    if layers == 0 || layers > enc.blocks.len() {
        return Err(Error::Input(format!(
            "layer {layers} outside [1, {}]",
            enc.blocks.len()
        )));
    }
    if batch.seq_len > cfg.max_seq_len {
        return Err(Error::Input(format!(
            "sequence length {} exceeds max_seq_len {}",
            batch.seq_len, cfg.max_seq_len
        )));
    }
    let (b, t, d) = (batch.size(), batch.seq_len, cfg.hidden_dim);
    let (heads, dh) = (cfg.num_heads, cfg.head_dim());

    let token_rows: Vec<usize> = batch.ids.iter().map(|&id| id as usize).collect();
    let position_rows: Vec<usize> = (0..b).flat_map(|_| 0..t).collect();
    let tok = tape.gather_rows(enc.token_embedding, &token_rows)?;
    let pos = tape.gather_rows(enc.position_embedding, &position_rows)?;
    let mut x = tape.add(tok, pos)?;

    let mask = tape.constant(batch.attention_bias());
    let cls_rows: Vec<usize> = (0..b).map(|s| s * t).collect();
    let scale = 1.0 / (dh as f64).sqrt();

    let mut cls = Vec::with_capacity(layers);
    for block in &enc.blocks[..layers] {
        let h = block.attn_norm.apply(tape, x)?;
        let q = block.query.apply(tape, h)?;
        let k = block.key.apply(tape, h)?;
        let v = block.value.apply(tape, h)?;
        let mut contexts = Vec::with_capacity(heads);
        for head in 0..heads {
            let split = |tape: &mut Tape, m: Var| -> Result<Var> {
                let s = tape.slice_last(m, head * dh, dh)?;
                Ok(tape.reshape(s, &[b, t, dh])?)
            };
            let (qh, kh, vh) = (split(tape, q)?, split(tape, k)?, split(tape, v)?);
            let scores = tape.batch_matmul(qh, kh, true)?;
            let scores = tape.scale(scores, scale)?;
            let scores = tape.add(scores, mask)?;
            let probs = tape.softmax(scores, 2)?;
            let ctx = tape.batch_matmul(probs, vh, false)?;
            contexts.push(tape.reshape(ctx, &[b * t, dh])?);
        }
        let ctx = tape.concat_last(&contexts)?;
        let attn = block.attn_out.apply(tape, ctx)?;
        x = tape.add(x, attn)?;

        let h = block.ffn_norm.apply(tape, x)?;
        let f = block.ffn_in.apply(tape, h)?;
        let f = tape.gelu(f)?;
        let f = block.ffn_out.apply(tape, f)?;
        x = tape.add(x, f)?;

        let c = tape.gather_rows(x, &cls_rows)?;
        cls.push(block.out_norm.apply(tape, c)?);
        debug_assert_eq!(tape.value(*cls.last().unwrap()).shape(), &[b, d]);
    }
    Ok(EncoderOutput {
        blocks_run: cls.len(),
        cls,
    })
}
