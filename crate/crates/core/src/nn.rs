use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{trunc_normal, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Variance guard used by every layer normalization in the model.
pub const LN_EPS: f64 = 1e-12;

/// Standard deviation for truncated-normal weight init.
pub const INIT_STD: f64 = 0.02;

/// Affine map `x W + b` with `W: [in, out]`, `b: [out]`; the bias is
/// optional for projections where it would be redundant.
#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LinearLayer {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Result<Self> {
        let weight = store.register(
            format!("{prefix}.weight"),
            trunc_normal(rng, vec![in_dim, out_dim], INIT_STD),
            true,
        )?;
        let bias = store.register(format!("{prefix}.bias"), Tensor::zeros(vec![out_dim]), true)?;
        Ok(Self {
            weight,
            bias: Some(bias),
            in_dim,
            out_dim,
        })
    }

    pub fn init_no_bias<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Result<Self> {
        let weight = store.register(
            format!("{prefix}.weight"),
            trunc_normal(rng, vec![in_dim, out_dim], INIT_STD),
            true,
        )?;
        Ok(Self {
            weight,
            bias: None,
            in_dim,
            out_dim,
        })
    }

    /// `x: [s, in] -> [s, out]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let xw = g.matmul(x, w)?;
        match self.bias {
            Some(bias) => {
                let b = g.param(store, bias);
                g.add_broadcast_row(xw, b)
            }
            None => Ok(xw),
        }
    }
}

/// Learned row-per-index table `[vocab, h]`.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl EmbeddingTable {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        vocab: usize,
        dim: usize,
    ) -> Result<Self> {
        let table = store.register(name, trunc_normal(rng, vec![vocab, dim], INIT_STD), true)?;
        Ok(Self { table, vocab, dim })
    }

    /// Gather `indices` as rows: output `[indices.len(), dim]`. Repeated
    /// indices are fine; their gradients sum into the same table row.
    pub fn rows(&self, g: &mut Graph, store: &ParamStore, indices: &[usize]) -> Result<Var> {
        let table = g.param(store, self.table);
        let mut parts = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.vocab {
                return Err(Error::IndexOutOfRange {
                    index: i,
                    limit: self.vocab,
                });
            }
            parts.push(g.slice_rows(table, i, i + 1)?);
        }
        g.concat_rows(&parts)
    }

    /// The whole table as a graph value, `[vocab, dim]`.
    pub fn all(&self, g: &mut Graph, store: &ParamStore) -> Var {
        g.param(store, self.table)
    }
}

/// Row-wise layer normalization with learned gain (init 1) and offset (init 0).
#[derive(Debug, Clone)]
pub struct LayerNormLayer {
    pub gain: ParamId,
    pub offset: ParamId,
}

impl LayerNormLayer {
    pub fn init(store: &mut ParamStore, prefix: &str, dim: usize) -> Result<Self> {
        let gain = store.register(format!("{prefix}.gain"), Tensor::filled(vec![dim], 1.0), true)?;
        let offset = store.register(format!("{prefix}.offset"), Tensor::zeros(vec![dim]), true)?;
        Ok(Self { gain, offset })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let offset = g.param(store, self.offset);
        g.layer_norm(x, gain, offset, LN_EPS)
    }
}

/// Attention probability handles captured during a forward pass, indexed as
/// `layers[layer][head]`, each a `[s, s]` row-stochastic matrix.
#[derive(Debug, Default)]
pub struct AttentionTrace {
    pub layers: Vec<Vec<Var>>,
}

struct HeadProj {
    q: LinearLayer,
    k: LinearLayer,
    v: LinearLayer,
}

/// Multi-head scaled dot-product self-attention with per-head projections
/// `h -> h/heads` and a final `h -> h` output projection.
pub struct MultiHeadAttention {
    heads: Vec<HeadProj>,
    out: LinearLayer,
    pub num_heads: usize,
    pub d_head: usize,
}

impl MultiHeadAttention {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        dim: usize,
        num_heads: usize,
    ) -> Result<Self> {
        if num_heads == 0 || dim % num_heads != 0 {
            return Err(Error::Config(format!(
                "attention width {dim} is not divisible into {num_heads} heads"
            )));
        }
        let d_head = dim / num_heads;
        let mut heads = Vec::with_capacity(num_heads);
        for hd in 0..num_heads {
            // No key bias: softmax is invariant to the row-constant score
            // shift a key bias produces, so the parameter would never train.
            heads.push(HeadProj {
                q: LinearLayer::init(store, rng, &format!("{prefix}.head{hd}.q"), dim, d_head)?,
                k: LinearLayer::init_no_bias(store, rng, &format!("{prefix}.head{hd}.k"), dim, d_head)?,
                v: LinearLayer::init(store, rng, &format!("{prefix}.head{hd}.v"), dim, d_head)?,
            });
        }
        let out = LinearLayer::init(store, rng, &format!("{prefix}.out"), dim, dim)?;
        Ok(Self {
            heads,
            out,
            num_heads,
            d_head,
        })
    }

    /// `x: [s, h] -> [s, h]`. When `probs_out` is given, each head's
    /// attention matrix handle is appended to it (in head order).
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        mut probs_out: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let scale = 1.0 / (self.d_head as f64).sqrt();
        let mut contexts = Vec::with_capacity(self.num_heads);
        for head in &self.heads {
            let q = head.q.forward(g, store, x)?;
            let k = head.k.forward(g, store, x)?;
            let v = head.v.forward(g, store, x)?;
            let kt = g.transpose(k)?;
            let scores = g.matmul(q, kt)?;
            let scaled = g.mul_scalar(scores, scale);
            let probs = g.softmax_last(scaled)?;
            if let Some(out) = probs_out.as_deref_mut() {
                out.push(probs);
            }
            contexts.push(g.matmul(probs, v)?);
        }
        let merged = g.concat_cols(&contexts)?;
        self.out.forward(g, store, merged)
    }
}

/// Post-norm transformer encoder layer:
/// `y = LN(x + MHA(x)); out = LN(y + FFN(y))` with a 4x GELU feed-forward.
pub struct EncoderLayer {
    pub attn: MultiHeadAttention,
    norm1: LayerNormLayer,
    ffn_in: LinearLayer,
    ffn_out: LinearLayer,
    norm2: LayerNormLayer,
}

impl EncoderLayer {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        dim: usize,
        num_heads: usize,
    ) -> Result<Self> {
        let attn = MultiHeadAttention::init(store, rng, &format!("{prefix}.attn"), dim, num_heads)?;
        let norm1 = LayerNormLayer::init(store, &format!("{prefix}.norm1"), dim)?;
        let ffn_in = LinearLayer::init(store, rng, &format!("{prefix}.ffn.expand"), dim, 4 * dim)?;
        let ffn_out = LinearLayer::init(store, rng, &format!("{prefix}.ffn.project"), 4 * dim, dim)?;
        let norm2 = LayerNormLayer::init(store, &format!("{prefix}.norm2"), dim)?;
        Ok(Self {
            attn,
            norm1,
            ffn_in,
            ffn_out,
            norm2,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        probs_out: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let attended = self.attn.forward(g, store, x, probs_out)?;
        let summed = g.add(x, attended)?;
        let y = self.norm1.forward(g, store, summed)?;
        let expanded = self.ffn_in.forward(g, store, y)?;
        let activated = g.gelu(expanded);
        let projected = self.ffn_out.forward(g, store, activated)?;
        let summed = g.add(y, projected)?;
        self.norm2.forward(g, store, summed)
    }
}

/// A sequence of encoder layers sharing width and head count.
pub struct EncoderStack {
    pub layers: Vec<EncoderLayer>,
}

impl EncoderStack {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        depth: usize,
        dim: usize,
        num_heads: usize,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(depth);
        for l in 0..depth {
            layers.push(EncoderLayer::init(
                store,
                rng,
                &format!("{prefix}.layer{l}"),
                dim,
                num_heads,
            )?);
        }
        Ok(Self { layers })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        mut x: Var,
        mut trace: Option<&mut AttentionTrace>,
    ) -> Result<Var> {
        for layer in &self.layers {
            let probs_slot = match trace.as_deref_mut() {
                Some(t) => {
                    t.layers.push(Vec::new());
                    Some(t.layers.last_mut().expect("just pushed"))
                }
                None => None,
            };
            x = layer.forward(g, store, x, probs_slot)?;
        }
        Ok(x)
    }
}
