use rand_chacha::ChaCha8Rng;

use super::{sinusoidal_positions, ArchitectureConfig, ForwardCtx, ModelError, PaddedIds, Seq2SeqModel, MASKED};
use crate::numerics::{Graph, ParamStore, Tensor, Var};
use crate::subword::PAD_ID;

pub(super) fn init(c: &ArchitectureConfig, p: &mut ParamStore, r: &mut ChaCha8Rng) {
    let (d, ff) = (c.model_width, c.feedforward_width);
    p.insert_xavier("src_emb", &[c.source_vocab_size, d], r);
    p.insert_xavier("tgt_emb", &[c.target_vocab_size, d], r);
    let attn = |p: &mut ParamStore, r: &mut ChaCha8Rng, pre: &str| {
        for w in ["q", "k", "v", "o"] {
            p.insert_xavier(format!("{pre}.w{w}"), &[d, d], r);
            p.insert_const(format!("{pre}.b{w}"), &[d], 0.0);
        }
    };
    let norm = |p: &mut ParamStore, pre: &str| {
        p.insert_const(format!("{pre}.gain"), &[d], 1.0);
        p.insert_const(format!("{pre}.bias"), &[d], 0.0);
    };
    let ffn = |p: &mut ParamStore, r: &mut ChaCha8Rng, pre: &str| {
        p.insert_xavier(format!("{pre}.w1"), &[d, ff], r);
        p.insert_const(format!("{pre}.b1"), &[ff], 0.0);
        p.insert_xavier(format!("{pre}.w2"), &[ff, d], r);
        p.insert_const(format!("{pre}.b2"), &[d], 0.0);
    };
    for l in 0..c.layer_count {
        norm(p, &format!("enc.{l}.ln1"));
        attn(p, r, &format!("enc.{l}.self"));
        norm(p, &format!("enc.{l}.ln2"));
        ffn(p, r, &format!("enc.{l}.ff"));
    }
    norm(p, "enc.ln");
    for l in 0..c.layer_count {
        norm(p, &format!("dec.{l}.ln1"));
        attn(p, r, &format!("dec.{l}.self"));
        norm(p, &format!("dec.{l}.ln2"));
        attn(p, r, &format!("dec.{l}.cross"));
        norm(p, &format!("dec.{l}.ln3"));
        ffn(p, r, &format!("dec.{l}.ff"));
    }
    norm(p, "dec.ln");
    if !c.tied_embeddings {
        p.insert_xavier("out.w", &[d, c.target_vocab_size], r);
    }
    p.insert_const("out.b", &[c.target_vocab_size], 0.0);
}

struct Ctx<'m> {
    m: &'m Seq2SeqModel,
}

impl Ctx<'_> {
    fn p(&self, g: &mut Graph, name: &str) -> Result<Var, ModelError> {
        Ok(g.param(&self.m.params, self.m.params.id(name)?))
    }

    fn linear(&self, g: &mut Graph, x: Var, pre: &str, w: &str) -> Result<Var, ModelError> {
        let wv = self.p(g, &format!("{pre}.w{w}"))?;
        let bv = self.p(g, &format!("{pre}.b{w}"))?;
        let y = g.matmul(x, wv)?;
        Ok(g.add_bias(y, bv)?)
    }

    fn norm(&self, g: &mut Graph, x: Var, pre: &str) -> Result<Var, ModelError> {
        let gain = self.p(g, &format!("{pre}.gain"))?;
        let bias = self.p(g, &format!("{pre}.bias"))?;
        Ok(g.layer_norm(x, gain, bias)?)
    }

    /// Embeds `[rows, width]` ids as `[rows·width, d]`, scaled by √d plus positions.
    fn embed(&self, g: &mut Graph, table: &str, ids: &PaddedIds) -> Result<Var, ModelError> {
        let d = self.m.config.model_width;
        let t = self.p(g, table)?;
        let e = g.embedding(t, &ids.ids)?;
        let e = g.scale(e, (d as f64).sqrt());
        let pos = sinusoidal_positions(ids.width, d);
        let tiled: Vec<f64> = (0..ids.rows).flat_map(|_| pos.data().iter().copied()).collect();
        let pv = g.constant(Tensor::new(vec![ids.rows * ids.width, d], tiled)?);
        Ok(g.add(e, pv)?)
    }

    /// Multi-head attention. `q_in` is `[b·tq, d]`, `kv_in` is `[b·tk, d]`,
    /// `mask` is an additive `[b·h, tq, tk]` tensor.
    #[allow(clippy::too_many_arguments)]
    fn attention(&self, g: &mut Graph, q_in: Var, kv_in: Var, b: usize, tq: usize, tk: usize, mask: Tensor, pre: &str) -> Result<Var, ModelError> {
        let c = &self.m.config;
        let (h, dh, d) = (c.head_count, c.head_width(), c.model_width);
        let split = |g: &mut Graph, x: Var, t: usize| -> Result<Var, ModelError> {
            let x = g.reshape(x, &[b, t, h, dh])?;
            let x = g.permute(x, &[0, 2, 1, 3])?;
            Ok(g.reshape(x, &[b * h, t, dh])?)
        };
        let q = self.linear(g, q_in, pre, "q")?;
        let k = self.linear(g, kv_in, pre, "k")?;
        let v = self.linear(g, kv_in, pre, "v")?;
        let (q, k, v) = (split(g, q, tq)?, split(g, k, tk)?, split(g, v, tk)?);
        let scores = g.matmul_t(q, k, false, true)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let m = g.constant(mask);
        let scores = g.add(scores, m)?;
        let probs = g.softmax(scores);
        let ctx = g.matmul(probs, v)?;
        let ctx = g.reshape(ctx, &[b, h, tq, dh])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b * tq, d])?;
        self.linear(g, ctx, pre, "o")
    }

    fn feed_forward(&self, g: &mut Graph, x: Var, pre: &str) -> Result<Var, ModelError> {
        let hdn = self.linear(g, x, pre, "1")?;
        let hdn = g.relu(hdn);
        self.linear(g, hdn, pre, "2")
    }
}

/// `[b·h, tq, tk]` additive mask blocking padded keys and, if `causal`, future keys.
fn attention_mask(key_pad: &[bool], b: usize, h: usize, tq: usize, tk: usize, causal: bool) -> Tensor {
    let mut data = vec![0.0; b * h * tq * tk];
    for bi in 0..b {
        for hi in 0..h {
            for q in 0..tq {
                let row = &mut data[((bi * h + hi) * tq + q) * tk..][..tk];
                for (k, v) in row.iter_mut().enumerate() {
                    if key_pad[bi * tk + k] || (causal && k > q) {
                        *v = MASKED;
                    }
                }
            }
        }
    }
    Tensor::new(vec![b * h, tq, tk], data).expect("shape")
}

fn pad_flags(ids: &PaddedIds) -> Vec<bool> {
    ids.ids.iter().map(|&i| i == PAD_ID).collect()
}

/// Encoder states `[b·s, d]` after the final layer norm.
pub(super) fn encode(m: &Seq2SeqModel, g: &mut Graph, src: &PaddedIds, fwd: &mut ForwardCtx<'_>) -> Result<Var, ModelError> {
    let cx = Ctx { m };
    let c = &m.config;
    let (b, s) = (src.rows, src.width);
    let pad = pad_flags(src);
    let mut x = cx.embed(g, "src_emb", src)?;
    x = fwd.dropout(g, x, c.dropout_rate)?;
    for l in 0..c.layer_count {
        let hdn = cx.norm(g, x, &format!("enc.{l}.ln1"))?;
        let a = cx.attention(g, hdn, hdn, b, s, s, attention_mask(&pad, b, c.head_count, s, s, false), &format!("enc.{l}.self"))?;
        let a = fwd.dropout(g, a, c.dropout_rate)?;
        x = g.add(x, a)?;
        let hdn = cx.norm(g, x, &format!("enc.{l}.ln2"))?;
        let f = cx.feed_forward(g, hdn, &format!("enc.{l}.ff"))?;
        let f = fwd.dropout(g, f, c.dropout_rate)?;
        x = g.add(x, f)?;
    }
    cx.norm(g, x, "enc.ln")
}

/// Decoder logits `[b, t, V]` given encoder states `[b·s, d]`.
pub(super) fn decode(
    m: &Seq2SeqModel,
    g: &mut Graph,
    memory: Var,
    src_pad: &[bool],
    src_width: usize,
    tgt: &PaddedIds,
    fwd: &mut ForwardCtx<'_>,
) -> Result<Var, ModelError> {
    let cx = Ctx { m };
    let c = &m.config;
    let (b, t, s, h) = (tgt.rows, tgt.width, src_width, c.head_count);
    let tgt_pad = pad_flags(tgt);
    let mut x = cx.embed(g, "tgt_emb", tgt)?;
    x = fwd.dropout(g, x, c.dropout_rate)?;
    for l in 0..c.layer_count {
        let hdn = cx.norm(g, x, &format!("dec.{l}.ln1"))?;
        let a = cx.attention(g, hdn, hdn, b, t, t, attention_mask(&tgt_pad, b, h, t, t, true), &format!("dec.{l}.self"))?;
        let a = fwd.dropout(g, a, c.dropout_rate)?;
        x = g.add(x, a)?;
        let hdn = cx.norm(g, x, &format!("dec.{l}.ln2"))?;
        let a = cx.attention(g, hdn, memory, b, t, s, attention_mask(src_pad, b, h, t, s, false), &format!("dec.{l}.cross"))?;
        let a = fwd.dropout(g, a, c.dropout_rate)?;
        x = g.add(x, a)?;
        let hdn = cx.norm(g, x, &format!("dec.{l}.ln3"))?;
        let f = cx.feed_forward(g, hdn, &format!("dec.{l}.ff"))?;
        let f = fwd.dropout(g, f, c.dropout_rate)?;
        x = g.add(x, f)?;
    }
    let x = cx.norm(g, x, "dec.ln")?;
    let logits = if c.tied_embeddings {
        let e = cx.p(g, "tgt_emb")?;
        g.matmul_t(x, e, false, true)?
    } else {
        let w = cx.p(g, "out.w")?;
        g.matmul(x, w)?
    };
    let bias = cx.p(g, "out.b")?;
    let logits = g.add_bias(logits, bias)?;
    Ok(g.reshape(logits, &[b, t, c.target_vocab_size])?)
}

pub(super) fn forward(m: &Seq2SeqModel, g: &mut Graph, src: &PaddedIds, tgt: &PaddedIds, fwd: &mut ForwardCtx<'_>) -> Result<Var, ModelError> {
    let memory = encode(m, g, src, fwd)?;
    decode(m, g, memory, &pad_flags(src), src.width, tgt, fwd)
}
