//! The two-stage retrieval network.
//!
//! * text branch: token + position embeddings, pre-norm transformer blocks,
//!   mean pooling, a residual-free feed-forward adapter, L2 normalization;
//! * video branch: input projection, then per block a transformer layer
//!   followed by a `k=3, stride=2, pad=1` convolution, mean pooling and
//!   L2 normalization;
//! * fusion: an MLP over `[z1; z2; z1 + z2; z1 ⊙ z2]`;
//! * re-ranker: `w·φ([z_F; z_V; z_F ⊙ z_V]) + b` with a one-layer ReLU `φ`.
//!
//! All parameters live in one [`ParamStore`] under the prefixes `text.`,
//! `video.`, `fusion.`, `rerank.` and the scalar `log_tau`.

mod config;
pub mod layers;
mod tokenizer;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use config::{parse_kv, ModelConfig};
pub use tokenizer::{normalize_words, Vocab, UNK};

use crate::autodiff::{Bindings, Checkpoint, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use layers::{lookup, xavier, Linear, Mlp, TransformerBlock};

pub const TAU_MIN: f64 = 1e-3;
pub const TAU_MAX: f64 = 100.0;

/// Parameter-name prefixes trained in Stage I.
pub const STAGE1_PREFIXES: [&str; 3] = ["text.", "video.", "log_tau"];
/// Parameter-name prefixes trained in Stage II.
pub const STAGE2_PREFIXES: [&str; 2] = ["fusion.", "rerank."];

/// Which slots of the fusion input carry signal. The MLP input width is
/// always `4d`; disabled slots are zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    #[default]
    Full,
    Add,
    Mul,
}

impl FusionMode {
    pub const ALL: [FusionMode; 3] = [FusionMode::Full, FusionMode::Add, FusionMode::Mul];
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionMode::Full => "full",
            FusionMode::Add => "add",
            FusionMode::Mul => "mul",
        })
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(FusionMode::Full),
            "add" | "add-only" => Ok(FusionMode::Add),
            "mul" | "mul-only" => Ok(FusionMode::Mul),
            other => Err(Error::Config(format!("unknown fusion mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    tok_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<TransformerBlock>,
    adapter: Mlp,
    max_tokens: usize,
}

impl TextEncoder {
    fn init(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.d;
        let tok_emb = store.add("text.tok_emb", xavier(rng, &[cfg.vocab_size, d], cfg.vocab_size, d))?;
        let pos_emb = store.add("text.pos_emb", xavier(rng, &[cfg.max_tokens, d], cfg.max_tokens, d))?;
        let blocks = (0..cfg.text_layers)
            .map(|i| TransformerBlock::init(store, rng, &format!("text.block{i}"), d, cfg.ffn_mult * d, cfg.heads))
            .collect::<Result<_>>()?;
        Ok(Self {
            tok_emb,
            pos_emb,
            blocks,
            adapter: Mlp::init(store, rng, "text.adapter", d, 2 * d, d)?,
            max_tokens: cfg.max_tokens,
        })
    }

    fn resolve(store: &ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.d;
        Ok(Self {
            tok_emb: lookup(store, "text.tok_emb", &[cfg.vocab_size, d])?,
            pos_emb: lookup(store, "text.pos_emb", &[cfg.max_tokens, d])?,
            blocks: (0..cfg.text_layers)
                .map(|i| TransformerBlock::resolve(store, &format!("text.block{i}"), d, cfg.ffn_mult * d, cfg.heads))
                .collect::<Result<_>>()?,
            adapter: Mlp::resolve(store, "text.adapter", d, 2 * d, d)?,
            max_tokens: cfg.max_tokens,
        })
    }

    pub fn adapter(&self) -> &Mlp {
        &self.adapter
    }

    /// Unit-norm `1×d` embedding of a token sequence.
    pub fn forward(&self, tape: &mut Tape, p: &mut Bindings, tokens: &[usize]) -> Result<Var> {
        if tokens.is_empty() || tokens.len() > self.max_tokens {
            return Err(Error::Contract(format!(
                "token sequence length {} outside 1..={}",
                tokens.len(),
                self.max_tokens
            )));
        }
        let (tok, pos) = (p.var(tape, self.tok_emb), p.var(tape, self.pos_emb));
        let x = tape.gather_rows(tok, tokens)?;
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let pe = tape.gather_rows(pos, &positions)?;
        let mut h = tape.add(x, pe)?;
        for block in &self.blocks {
            h = block.forward(tape, p, h)?;
        }
        let pooled = tape.mean_over_axis(h, 0)?;
        let adapted = self.adapter.forward(tape, p, pooled)?;
        tape.l2_normalize_rows(adapted)
            .map_err(|e| match e {
                Error::ZeroNorm(_) => Error::ZeroNorm("text embedding"),
                other => other,
            })
    }
}

#[derive(Clone, Debug)]
pub struct VideoEncoder {
    proj: Linear,
    blocks: Vec<TransformerBlock>,
    conv_kernels: Vec<ParamId>,
    conv_bias: Vec<ParamId>,
    n_frames: usize,
    d_in: usize,
}

impl VideoEncoder {
    fn init(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.d;
        let proj = Linear::init(store, rng, "video.proj", cfg.d_in, d)?;
        let mut blocks = Vec::new();
        let mut conv_kernels = Vec::new();
        let mut conv_bias = Vec::new();
        for i in 0..cfg.layers {
            blocks.push(TransformerBlock::init(
                store,
                rng,
                &format!("video.block{i}"),
                d,
                cfg.ffn_mult * d,
                cfg.heads,
            )?);
            conv_kernels.push(store.add(format!("video.conv{i}.kernel"), xavier(rng, &[3, d, d], 3 * d, 3 * d))?);
            conv_bias.push(store.add(format!("video.conv{i}.b"), Tensor::zeros([d]))?);
        }
        Ok(Self {
            proj,
            blocks,
            conv_kernels,
            conv_bias,
            n_frames: cfg.n_frames,
            d_in: cfg.d_in,
        })
    }

    fn resolve(store: &ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.d;
        let mut blocks = Vec::new();
        let mut conv_kernels = Vec::new();
        let mut conv_bias = Vec::new();
        for i in 0..cfg.layers {
            blocks.push(TransformerBlock::resolve(
                store,
                &format!("video.block{i}"),
                d,
                cfg.ffn_mult * d,
                cfg.heads,
            )?);
            conv_kernels.push(lookup(store, &format!("video.conv{i}.kernel"), &[3, d, d])?);
            conv_bias.push(lookup(store, &format!("video.conv{i}.b"), &[d])?);
        }
        Ok(Self {
            proj: Linear::resolve(store, "video.proj", cfg.d_in, d)?,
            blocks,
            conv_kernels,
            conv_bias,
            n_frames: cfg.n_frames,
            d_in: cfg.d_in,
        })
    }

    /// Unit-norm `1×d` embedding of an `n_frames × d_in` feature matrix.
    pub fn forward(&self, tape: &mut Tape, p: &mut Bindings, frames: &Tensor) -> Result<Var> {
        if frames.shape() != [self.n_frames, self.d_in] {
            return Err(Error::Shape {
                op: "encode_video",
                lhs: frames.shape().to_vec(),
                rhs: vec![self.n_frames, self.d_in],
            });
        }
        let x = tape.constant(frames.clone());
        let mut h = self.proj.forward(tape, p, x)?;
        for ((block, &kernel), &bias) in self.blocks.iter().zip(&self.conv_kernels).zip(&self.conv_bias) {
            h = block.forward(tape, p, h)?;
            let (k, b) = (p.var(tape, kernel), p.var(tape, bias));
            h = tape.conv1d(h, k, 2, 1)?;
            h = tape.add_row(h, b)?;
        }
        let pooled = tape.mean_over_axis(h, 0)?;
        tape.l2_normalize_rows(pooled).map_err(|e| match e {
            Error::ZeroNorm(_) => Error::ZeroNorm("video embedding"),
            other => other,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Fusion {
    mlp: Mlp,
}

impl Fusion {
    /// The `n×4d` MLP input `[z1; z2; z1 + z2; z1 ⊙ z2]`, with the slots that
    /// `mode` disables replaced by zeros.
    pub fn features(tape: &mut Tape, z1: Var, z2: Var, mode: FusionMode) -> Result<Var> {
        let shape = tape.value(z1).shape().to_vec();
        if tape.value(z2).shape() != shape.as_slice() {
            return Err(Error::Shape {
                op: "fuse",
                lhs: shape,
                rhs: tape.value(z2).shape().to_vec(),
            });
        }
        let add = match mode {
            FusionMode::Mul => tape.constant(Tensor::zeros(shape.clone())),
            _ => tape.add(z1, z2)?,
        };
        let mul = match mode {
            FusionMode::Add => tape.constant(Tensor::zeros(shape)),
            _ => tape.mul(z1, z2)?,
        };
        tape.concat_cols(&[z1, z2, add, mul])
    }

    /// Fused query representation, `n×d` for `n` query pairs.
    pub fn forward(&self, tape: &mut Tape, p: &mut Bindings, z1: Var, z2: Var, mode: FusionMode) -> Result<Var> {
        let x = Self::features(tape, z1, z2, mode)?;
        self.mlp.forward(tape, p, x)
    }
}

#[derive(Clone, Debug)]
pub struct Reranker {
    phi: Linear,
    head: Linear,
}

impl Reranker {
    pub fn head(&self) -> &Linear {
        &self.head
    }

    /// `m×1` scores for row-aligned fused queries and video embeddings.
    pub fn forward(&self, tape: &mut Tape, p: &mut Bindings, zf: Var, zv: Var) -> Result<Var> {
        let prod = tape.mul(zf, zv)?;
        let x = tape.concat_cols(&[zf, zv, prod])?;
        let h = self.phi.forward(tape, p, x)?;
        let h = tape.relu(h)?;
        self.head.forward(tape, p, h)
    }
}

/// Full model: configuration, vocabulary and every learnable tensor.
#[derive(Clone, Debug)]
pub struct Datr {
    config: ModelConfig,
    vocab: Vocab,
    params: ParamStore,
    text: TextEncoder,
    video: VideoEncoder,
    fusion: Fusion,
    reranker: Reranker,
    log_tau: ParamId,
}

impl Datr {
    /// Freshly initialized model. `config.vocab_size` is overwritten from `vocab`.
    pub fn new(mut config: ModelConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        config.vocab_size = vocab.len();
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.d;
        let text = TextEncoder::init(&mut store, &mut rng, &config)?;
        let video = VideoEncoder::init(&mut store, &mut rng, &config)?;
        let fusion = Fusion {
            mlp: Mlp::init(&mut store, &mut rng, "fusion", 4 * d, 2 * d, d)?,
        };
        let reranker = Reranker {
            phi: Linear::init(&mut store, &mut rng, "rerank.phi", 3 * d, d)?,
            head: Linear::init(&mut store, &mut rng, "rerank.head", d, 1)?,
        };
        let log_tau = store.add("log_tau", Tensor::scalar(config.tau_init.ln()))?;
        Ok(Self {
            config,
            vocab,
            params: store,
            text,
            video,
            fusion,
            reranker,
            log_tau,
        })
    }

    /// Rebuilds a model around an existing parameter store, checking every
    /// expected tensor name and shape.
    pub fn from_parts(config: ModelConfig, vocab: Vocab, params: ParamStore) -> Result<Self> {
        config.validate()?;
        if config.vocab_size != vocab.len() {
            return Err(Error::Config(format!(
                "vocab_size = {} but vocabulary has {} ids",
                config.vocab_size,
                vocab.len()
            )));
        }
        let d = config.d;
        Ok(Self {
            text: TextEncoder::resolve(&params, &config)?,
            video: VideoEncoder::resolve(&params, &config)?,
            fusion: Fusion {
                mlp: Mlp::resolve(&params, "fusion", 4 * d, 2 * d, d)?,
            },
            reranker: Reranker {
                phi: Linear::resolve(&params, "rerank.phi", 3 * d, d)?,
                head: Linear::resolve(&params, "rerank.head", d, 1)?,
            },
            log_tau: lookup(&params, "log_tau", &[1])?,
            config,
            vocab,
            params,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut config = self.config.to_kv();
        config.push_str("vocab =");
        for w in self.vocab.words() {
            config.push(' ');
            config.push_str(w);
        }
        config.push('\n');
        Checkpoint {
            config,
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let mut map = parse_kv(&ck.config)?;
        let words = map
            .remove("vocab")
            .ok_or_else(|| Error::Config("checkpoint config has no vocab".into()))?;
        let vocab = Vocab::from_words(words.split_whitespace());
        let config = ModelConfig::from_kv(&map)?;
        Self::from_parts(config, vocab, ck.params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }

    /// SHA-256 of the serialized checkpoint.
    pub fn digest(&self) -> [u8; 32] {
        self.to_checkpoint().digest()
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn text_encoder(&self) -> &TextEncoder {
        &self.text
    }

    pub fn video_encoder(&self) -> &VideoEncoder {
        &self.video
    }

    pub fn fusion(&self) -> &Fusion {
        &self.fusion
    }

    pub fn reranker(&self) -> &Reranker {
        &self.reranker
    }

    pub fn log_tau_id(&self) -> ParamId {
        self.log_tau
    }

    /// `τ = exp(log_tau)` clamped to `[TAU_MIN, TAU_MAX]`.
    pub fn temperature(&self) -> f64 {
        self.params.get(self.log_tau).data()[0].exp().clamp(TAU_MIN, TAU_MAX)
    }

    /// The clamped temperature as a graph node.
    pub fn temperature_var(&self, tape: &mut Tape, p: &mut Bindings) -> Result<Var> {
        let log_tau = p.var(tape, self.log_tau);
        let tau = tape.exp(log_tau)?;
        tape.clamp(tau, TAU_MIN, TAU_MAX)
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        self.vocab.tokenize(text, self.config.max_tokens)
    }

    pub fn encode_text(&self, text: &str) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let mut p = Bindings::frozen(&self.params);
        let z = self.text.forward(&mut tape, &mut p, &self.tokenize(text))?;
        Ok(tape.value(z).data().to_vec())
    }

    pub fn encode_video(&self, frames: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let mut p = Bindings::frozen(&self.params);
        let z = self.video.forward(&mut tape, &mut p, frames)?;
        Ok(tape.value(z).data().to_vec())
    }

    fn row(&self, tape: &mut Tape, z: &[f64], what: &'static str) -> Result<Var> {
        if z.len() != self.config.d {
            return Err(Error::Shape {
                op: what,
                lhs: vec![z.len()],
                rhs: vec![self.config.d],
            });
        }
        Ok(tape.constant(Tensor::raw(vec![1, z.len()], z.to_vec())))
    }

    /// Fused representation of a first query and its refinement.
    pub fn fuse(&self, z_q1: &[f64], z_q2: &[f64], mode: FusionMode) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let mut p = Bindings::frozen(&self.params);
        let (a, b) = (self.row(&mut tape, z_q1, "fuse")?, self.row(&mut tape, z_q2, "fuse")?);
        let z = self.fusion.forward(&mut tape, &mut p, a, b, mode)?;
        Ok(tape.value(z).data().to_vec())
    }

    pub fn rerank_score(&self, z_f: &[f64], z_v: &[f64]) -> Result<f64> {
        Ok(self.rerank_scores(z_f, z_v)?[0])
    }

    /// Scores one fused query against `m` video embeddings stored row-major.
    pub fn rerank_scores(&self, z_f: &[f64], videos: &[f64]) -> Result<Vec<f64>> {
        let d = self.config.d;
        if videos.len() % d != 0 {
            return Err(Error::Shape {
                op: "rerank_scores",
                lhs: vec![videos.len()],
                rhs: vec![d],
            });
        }
        let m = videos.len() / d;
        if m == 0 {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let mut p = Bindings::frozen(&self.params);
        let zf = self.row(&mut tape, z_f, "rerank_scores")?;
        let zf = tape.gather_rows(zf, &vec![0; m])?;
        let zv = tape.constant(Tensor::raw(vec![m, d], videos.to_vec()));
        let s = self.reranker.forward(&mut tape, &mut p, zf, zv)?;
        Ok(tape.value(s).data().to_vec())
    }
}
