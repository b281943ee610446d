//! Transformer-block sentence encoder.
//!
//! `tanh([word; pos1; pos2])` → optional linear projection → dropout →
//! multi-head self-attention → residual + layer norm → position-wise FFN →
//! residual + layer norm → masked max-pooling → dropout.

use rand::Rng;

use crate::corpus::EncodedSentence;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamId;

#[derive(Clone, Debug)]
pub struct HeadParams {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
}

#[derive(Clone, Debug)]
pub struct BlockParams {
    pub heads: Vec<HeadParams>,
    /// Output projection applied to the concatenated heads.
    pub output: ParamId,
    pub ff_w1: ParamId,
    pub ff_b1: ParamId,
    pub ff_w2: ParamId,
    pub ff_b2: ParamId,
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub word: ParamId,
    pub pos1: ParamId,
    pub pos2: ParamId,
    /// Maps `d_w + 2 d_p` to `d_model` when they differ.
    pub projection: Option<ParamId>,
    pub blocks: Vec<BlockParams>,
    pub ln_eps: f64,
}

/// Dropout rate and mode for the two dropout sites.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dropout {
    pub p: f64,
    pub training: bool,
}

impl Dropout {
    pub const EVAL: Dropout = Dropout {
        p: 0.0,
        training: false,
    };
}

/// Graph handles produced while encoding one sentence.
#[derive(Clone, Debug)]
pub struct SentenceEncoding {
    /// Pooled sentence vector, shape `[d_model]`.
    pub pooled: Var,
    /// Pre-pooling rows of the last block, `m x d_model`.
    pub rows: Var,
    /// Attention weights per block, then per head (`m x m` each).
    pub attention: Vec<Vec<Var>>,
    pub mask: Vec<bool>,
}

/// A pooled sentence vector detached from any graph.
#[derive(Clone, Debug, PartialEq)]
pub struct SentenceFeature {
    pub vector: Vec<f64>,
    pub mask: Vec<bool>,
}

fn ids(v: &[u32]) -> Vec<usize> {
    v.iter().map(|&i| i as usize).collect()
}

/// `tanh` of the per-token concatenation `[word; pos1; pos2]`, `m x (d_w + 2 d_p)`.
pub fn embed_input(g: &mut Graph<'_>, params: &EncoderParams, sentence: &EncodedSentence) -> Result<Var> {
    let words = g.gather(params.word, &ids(&sentence.word_ids))?;
    let pos1 = g.gather(params.pos1, &ids(&sentence.pos1_ids))?;
    let pos2 = g.gather(params.pos2, &ids(&sentence.pos2_ids))?;
    let joined = g.concat_cols(&[words, pos1, pos2])?;
    Ok(g.tanh(joined))
}

/// Output of [`scaled_dot_attention`].
#[derive(Clone, Copy, Debug)]
pub struct Attention {
    pub output: Var,
    pub weights: Var,
}

/// `softmax(Q K^T / sqrt(d_h)) V` with masked keys receiving zero weight.
pub fn scaled_dot_attention(g: &mut Graph<'_>, q: Var, k: Var, v: Var, key_mask: &[bool]) -> Result<Attention> {
    let d_h = g.value(q).dims2().1;
    if g.value(k).dims2().1 != d_h {
        return Err(Error::Shape {
            op: "scaled_dot_attention",
            left: g.value(q).shape().to_vec(),
            right: g.value(k).shape().to_vec(),
        });
    }
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scaled = g.scale(scores, 1.0 / (d_h as f64).sqrt());
    let weights = g.masked_softmax_rows(scaled, key_mask)?;
    let output = g.matmul(weights, v)?;
    Ok(Attention { output, weights })
}

/// Self-attention with one projected attention per head, heads
/// concatenated and mixed by the block's output projection. Returns the
/// output and each head's weight matrix.
pub fn multi_head_self_attention(
    g: &mut Graph<'_>,
    x: Var,
    block: &BlockParams,
    key_mask: &[bool],
) -> Result<(Var, Vec<Var>)> {
    let mut heads = Vec::with_capacity(block.heads.len());
    let mut weights = Vec::with_capacity(block.heads.len());
    for head in &block.heads {
        let wq = g.param(head.query);
        let wk = g.param(head.key);
        let wv = g.param(head.value);
        let q = g.matmul(x, wq)?;
        let k = g.matmul(x, wk)?;
        let v = g.matmul(x, wv)?;
        let att = scaled_dot_attention(g, q, k, v, key_mask)?;
        heads.push(att.output);
        weights.push(att.weights);
    }
    let concat = g.concat_cols(&heads)?;
    let wo = g.param(block.output);
    Ok((g.matmul(concat, wo)?, weights))
}

/// `ReLU(x W1 + b1) W2 + b2`, applied to every row.
pub fn feed_forward(g: &mut Graph<'_>, x: Var, block: &BlockParams) -> Result<Var> {
    let w1 = g.param(block.ff_w1);
    let b1 = g.param(block.ff_b1);
    let w2 = g.param(block.ff_w2);
    let b2 = g.param(block.ff_b2);
    let h = g.matmul(x, w1)?;
    let h = g.add_bias(h, b1)?;
    let h = g.relu(h);
    let out = g.matmul(h, w2)?;
    g.add_bias(out, b2)
}

/// Encodes one sentence into a `d_model` vector. Padded slots are ignored
/// by attention and pooling, so the result does not depend on padding.
pub fn encode<R: Rng + ?Sized>(
    g: &mut Graph<'_>,
    params: &EncoderParams,
    sentence: &EncodedSentence,
    dropout: Dropout,
    rng: &mut R,
) -> Result<SentenceEncoding> {
    if sentence.true_len == 0 {
        return Err(Error::InvalidArgument("cannot encode an empty sentence".into()));
    }
    let mask = sentence.mask();
    let mut x = embed_input(g, params, sentence)?;
    if let Some(proj) = params.projection {
        let w = g.param(proj);
        x = g.matmul(x, w)?;
    }
    x = g.dropout(x, dropout.p, dropout.training, rng)?;

    let mut attention = Vec::with_capacity(params.blocks.len());
    for block in &params.blocks {
        let (a, weights) = multi_head_self_attention(g, x, block, &mask)?;
        attention.push(weights);
        let res = g.add(x, a)?;
        let (gain, bias) = (g.param(block.ln1_gain), g.param(block.ln1_bias));
        let normed = g.layer_norm(res, gain, bias, params.ln_eps)?;
        let f = feed_forward(g, normed, block)?;
        let res = g.add(normed, f)?;
        let (gain, bias) = (g.param(block.ln2_gain), g.param(block.ln2_bias));
        x = g.layer_norm(res, gain, bias, params.ln_eps)?;
    }
    let pooled = g.masked_max_rows(x, &mask)?;
    let pooled = g.dropout(pooled, dropout.p, dropout.training, rng)?;
    Ok(SentenceEncoding {
        pooled,
        rows: x,
        attention,
        mask,
    })
}
