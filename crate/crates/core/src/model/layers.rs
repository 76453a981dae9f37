//! Graph builders shared by the text and video branches.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Bindings, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Xavier-uniform matrix `fan_in × fan_out`.
pub(crate) fn xavier(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-a..a)).collect();
    Tensor::raw(shape.to_vec(), data)
}

pub(crate) fn lookup(store: &ParamStore, name: &str, shape: &[usize]) -> Result<ParamId> {
    let id = store
        .id(name)
        .ok_or_else(|| Error::Config(format!("checkpoint is missing parameter `{name}`")))?;
    if store.get(id).shape() != shape {
        return Err(Error::Shape {
            op: "load parameter",
            lhs: store.get(id).shape().to_vec(),
            rhs: shape.to_vec(),
        });
    }
    Ok(id)
}

/// Affine map `x·W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub(crate) fn init(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            w: store.add(format!("{name}.w"), xavier(rng, &[d_in, d_out], d_in, d_out))?,
            b: store.add(format!("{name}.b"), Tensor::zeros([d_out]))?,
        })
    }

    pub(crate) fn resolve(store: &ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            w: lookup(store, &format!("{name}.w"), &[d_in, d_out])?,
            b: lookup(store, &format!("{name}.b"), &[d_out])?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &mut Bindings, x: Var) -> Result<Var> {
        let (w, b) = (p.var(tape, self.w), p.var(tape, self.b));
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    fn init(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones([d]))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros([d]))?,
        })
    }

    fn resolve(store: &ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gamma: lookup(store, &format!("{name}.gamma"), &[d])?,
            beta: lookup(store, &format!("{name}.beta"), &[d])?,
        })
    }

    fn forward(&self, tape: &mut Tape, p: &mut Bindings, x: Var) -> Result<Var> {
        let (g, b) = (p.var(tape, self.gamma), p.var(tape, self.beta));
        tape.layer_norm_rows(x, g, b)
    }
}

/// Scaled dot-product attention split over `heads` column blocks.
///
/// `q`, `k` and `v` are `T×d`; each head attends with its own `d/heads`
/// slice and the head outputs are concatenated back to `T×d`.
pub fn multi_head_attention(tape: &mut Tape, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    let d = tape.value(q).cols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (tape.slice_cols(q, lo, hi)?, tape.slice_cols(k, lo, hi)?, tape.slice_cols(v, lo, hi)?)
        };
        let logits = tape.matmul_nt(qh, kh)?;
        let logits = tape.scale(logits, scale)?;
        let weights = tape.softmax_rows(logits)?;
        outs.push(tape.matmul(weights, vh)?);
    }
    if heads == 1 {
        Ok(outs[0])
    } else {
        tape.concat_cols(&outs)
    }
}

/// Pre-norm transformer block: `x + MHA(LN(x))`, then `x + FFN(LN(x))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    ln1: LayerNorm,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    heads: usize,
}

impl TransformerBlock {
    pub(crate) fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d: usize,
        hidden: usize,
        heads: usize,
    ) -> Result<Self> {
        let ln1 = LayerNorm::init(store, &format!("{name}.ln1"), d)?;
        let mut proj = |suffix: &str| store.add(format!("{name}.attn.{suffix}"), xavier(rng, &[d, d], d, d));
        let (wq, wk, wv, wo) = (proj("wq")?, proj("wk")?, proj("wv")?, proj("wo")?);
        Ok(Self {
            ln1,
            wq,
            wk,
            wv,
            wo,
            ln2: LayerNorm::init(store, &format!("{name}.ln2"), d)?,
            ff1: Linear::init(store, rng, &format!("{name}.ffn1"), d, hidden)?,
            ff2: Linear::init(store, rng, &format!("{name}.ffn2"), hidden, d)?,
            heads,
        })
    }

    pub(crate) fn resolve(store: &ParamStore, name: &str, d: usize, hidden: usize, heads: usize) -> Result<Self> {
        let proj = |suffix: &str| lookup(store, &format!("{name}.attn.{suffix}"), &[d, d]);
        Ok(Self {
            ln1: LayerNorm::resolve(store, &format!("{name}.ln1"), d)?,
            wq: proj("wq")?,
            wk: proj("wk")?,
            wv: proj("wv")?,
            wo: proj("wo")?,
            ln2: LayerNorm::resolve(store, &format!("{name}.ln2"), d)?,
            ff1: Linear::resolve(store, &format!("{name}.ffn1"), d, hidden)?,
            ff2: Linear::resolve(store, &format!("{name}.ffn2"), hidden, d)?,
            heads,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &mut Bindings, x: Var) -> Result<Var> {
        let h = self.ln1.forward(tape, p, x)?;
        let (wq, wk, wv, wo) = (
            p.var(tape, self.wq),
            p.var(tape, self.wk),
            p.var(tape, self.wv),
            p.var(tape, self.wo),
        );
        let q = tape.matmul(h, wq)?;
        let k = tape.matmul(h, wk)?;
        let v = tape.matmul(h, wv)?;
        let attn = multi_head_attention(tape, q, k, v, self.heads)?;
        let attn = tape.matmul(attn, wo)?;
        let x = tape.add(x, attn)?;

        let h = self.ln2.forward(tape, p, x)?;
        let f = self.ff1.forward(tape, p, h)?;
        let f = tape.relu(f)?;
        let f = self.ff2.forward(tape, p, f)?;
        tape.add(x, f)
    }
}

/// Two affine maps with a ReLU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp {
    pub(crate) fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_in: usize,
        hidden: usize,
        d_out: usize,
    ) -> Result<Self> {
        Ok(Self {
            l1: Linear::init(store, rng, &format!("{name}.l1"), d_in, hidden)?,
            l2: Linear::init(store, rng, &format!("{name}.l2"), hidden, d_out)?,
        })
    }

    pub(crate) fn resolve(store: &ParamStore, name: &str, d_in: usize, hidden: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            l1: Linear::resolve(store, &format!("{name}.l1"), d_in, hidden)?,
            l2: Linear::resolve(store, &format!("{name}.l2"), hidden, d_out)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &mut Bindings, x: Var) -> Result<Var> {
        let h = self.l1.forward(tape, p, x)?;
        let h = tape.relu(h)?;
        self.l2.forward(tape, p, h)
    }
}
