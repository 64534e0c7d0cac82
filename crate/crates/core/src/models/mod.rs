//! Tiny pre-norm transformers: an encoder classifier and an encoder-decoder.
//!
//! Both accept already-composed (and possibly cutoff-masked) embedding
//! matrices, so augmentation happens entirely outside the model.

pub mod checkpoint;
mod classifier;
mod seq2seq;

pub use classifier::{Classifier, EncoderConfig};
pub use seq2seq::{Seq2Seq, Seq2SeqConfig};

use rand::Rng;

use crate::embedding::INIT_STD;
use crate::error::Result;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var, LAYER_NORM_EPS};

/// Additive score for disallowed attention positions; finite so softmax
/// input checks pass, large enough that `exp` underflows to exactly zero.
const MASKED_SCORE: f64 = -1e30;

/// Anything that maps an `L x d` input-embedding matrix to class logits.
pub trait EmbeddingClassifier {
    fn params(&self) -> &ParamStore;
    fn classes(&self) -> usize;
    /// Logits `[C]` for one embedding matrix using the given parameter values.
    fn logits_with(&self, g: &mut Graph, store: &ParamStore, w: Var) -> Result<Var>;
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct LayerNormParams {
    gain: ParamId,
    bias: ParamId,
}

impl LayerNormParams {
    fn init(store: &mut ParamStore, name: &str, d: usize) -> Self {
        LayerNormParams {
            gain: store.add(format!("{name}.gain"), Tensor::ones(&[d]), false),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[d]), false),
        }
    }

    fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain)?;
        let bias = g.param(store, self.bias)?;
        Ok(g.layer_norm(x, gain, bias, LAYER_NORM_EPS)?)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Linear {
    weight: ParamId,
    bias: ParamId,
}

impl Linear {
    fn init<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        Linear {
            weight: store.add(
                format!("{name}.weight"),
                Tensor::normal(&[d_in, d_out], INIT_STD, rng),
                true,
            ),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]), false),
        }
    }

    fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight)?;
        let b = g.param(store, self.bias)?;
        let y = g.matmul(x, w)?;
        Ok(g.add_row(y, b)?)
    }
}

/// Multi-head attention with the query projection separate from the fused
/// key/value projection, so the same block serves self- and cross-attention.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Attention {
    query: Linear,
    key_value: Linear,
    out: Linear,
    heads: usize,
    width: usize,
}

impl Attention {
    fn init<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut R) -> Self {
        Attention {
            query: Linear::init(store, &format!("{name}.query"), d, d, rng),
            key_value: Linear::init(store, &format!("{name}.key_value"), d, 2 * d, rng),
            out: Linear::init(store, &format!("{name}.out"), d, d, rng),
            heads,
            width: d,
        }
    }

    fn apply(&self, g: &mut Graph, store: &ParamStore, x_q: Var, x_kv: Var, causal: bool) -> Result<Var> {
        let d = self.width;
        let dh = d / self.heads;
        let q = self.query.apply(g, store, x_q)?;
        let kv = self.key_value.apply(g, store, x_kv)?;
        let (lq, lk) = (g.shape(q)[0], g.shape(kv)[0]);
        let mask = if causal {
            let mut m = Tensor::zeros(&[lq, lk]);
            for i in 0..lq {
                for j in (i + 1)..lk {
                    m.data_mut()[i * lk + j] = MASKED_SCORE;
                }
            }
            Some(g.constant(&m)?)
        } else {
            None
        };
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, (h + 1) * dh)?;
            let kh = g.slice_cols(kv, h * dh, (h + 1) * dh)?;
            let vh = g.slice_cols(kv, d + h * dh, d + (h + 1) * dh)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let mut scores = g.scale(scores, scale)?;
            if let Some(m) = mask {
                scores = g.add(scores, m)?;
            }
            let attn = g.softmax(scores)?;
            heads.push(g.matmul(attn, vh)?);
        }
        let joined = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)?
        };
        self.out.apply(g, store, joined)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    fn init<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, hidden: usize, rng: &mut R) -> Self {
        FeedForward {
            up: Linear::init(store, &format!("{name}.up"), d, hidden, rng),
            down: Linear::init(store, &format!("{name}.down"), hidden, d, rng),
        }
    }

    fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.up.apply(g, store, x)?;
        let h = g.gelu(h)?;
        self.down.apply(g, store, h)
    }
}

/// Pre-norm block: `x + attn(ln(x))`, optional `+ cross(ln(.), memory)`,
/// then `+ ffn(ln(.))`.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Block {
    ln_attn: LayerNormParams,
    attn: Attention,
    cross: Option<(LayerNormParams, Attention)>,
    ln_ffn: LayerNormParams,
    ffn: FeedForward,
    causal: bool,
}

impl Block {
    #[allow(clippy::too_many_arguments)]
    fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        ffn_width: usize,
        causal: bool,
        cross: bool,
        rng: &mut R,
    ) -> Self {
        let ln_attn = LayerNormParams::init(store, &format!("{name}.ln_attn"), d);
        let attn = Attention::init(store, &format!("{name}.attn"), d, heads, rng);
        let cross = cross.then(|| {
            (
                LayerNormParams::init(store, &format!("{name}.ln_cross"), d),
                Attention::init(store, &format!("{name}.cross"), d, heads, rng),
            )
        });
        let ln_ffn = LayerNormParams::init(store, &format!("{name}.ln_ffn"), d);
        let ffn = FeedForward::init(store, &format!("{name}.ffn"), d, ffn_width, rng);
        Block {
            ln_attn,
            attn,
            cross,
            ln_ffn,
            ffn,
            causal,
        }
    }

    fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var, memory: Option<Var>) -> Result<Var> {
        let h = self.ln_attn.apply(g, store, x)?;
        let a = self.attn.apply(g, store, h, h, self.causal)?;
        let mut x = g.add(x, a)?;
        if let (Some((ln, cross)), Some(mem)) = (&self.cross, memory) {
            let h = ln.apply(g, store, x)?;
            let c = cross.apply(g, store, h, mem, false)?;
            x = g.add(x, c)?;
        }
        let h = self.ln_ffn.apply(g, store, x)?;
        let f = self.ffn.apply(g, store, h)?;
        Ok(g.add(x, f)?)
    }
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
