use rand_chacha::ChaCha8Rng;

use super::{ArchitectureConfig, ForwardCtx, ModelError, PaddedIds, Seq2SeqModel, MASKED};
use crate::numerics::{Graph, ParamStore, Tensor, Var};
use crate::subword::PAD_ID;

fn gru_params(p: &mut ParamStore, r: &mut ChaCha8Rng, pre: &str, input: usize, d: usize) {
    p.insert_xavier(format!("{pre}.wx"), &[input, 3 * d], r);
    p.insert_xavier(format!("{pre}.wh"), &[d, 3 * d], r);
    p.insert_const(format!("{pre}.bx"), &[3 * d], 0.0);
    p.insert_const(format!("{pre}.bh"), &[3 * d], 0.0);
}

pub(super) fn init(c: &ArchitectureConfig, p: &mut ParamStore, r: &mut ChaCha8Rng) {
    let d = c.model_width;
    p.insert_xavier("src_emb", &[c.source_vocab_size, d], r);
    p.insert_xavier("tgt_emb", &[c.target_vocab_size, d], r);
    for l in 0..c.layer_count {
        let input = if l == 0 { d } else { 2 * d };
        gru_params(p, r, &format!("enc.{l}.fwd"), input, d);
        gru_params(p, r, &format!("enc.{l}.bwd"), input, d);
    }
    p.insert_xavier("enc.proj.w", &[2 * d, d], r);
    p.insert_const("enc.proj.b", &[d], 0.0);
    for l in 0..c.layer_count {
        p.insert_xavier(format!("dec.{l}.init.w"), &[2 * d, d], r);
        p.insert_const(format!("dec.{l}.init.b"), &[d], 0.0);
        let input = if l == 0 { 2 * d } else { d };
        gru_params(p, r, &format!("dec.{l}.gru"), input, d);
    }
    p.insert_xavier("attn.w", &[d, d], r);
    p.insert_xavier("attn.combine", &[2 * d, d], r);
    if !c.tied_embeddings {
        p.insert_xavier("out.w", &[d, c.target_vocab_size], r);
    }
    p.insert_const("out.b", &[c.target_vocab_size], 0.0);
}

struct Ctx<'m> {
    m: &'m Seq2SeqModel,
    d: usize,
}

/// Input projections of a GRU computed once for the whole sequence.
struct GruInput {
    wh: Var,
    bh: Var,
    gx: Var,
}

impl Ctx<'_> {
    fn p(&self, g: &mut Graph, name: &str) -> Result<Var, ModelError> {
        Ok(g.param(&self.m.params, self.m.params.id(name)?))
    }

    fn gru_input(&self, g: &mut Graph, x: Var, pre: &str) -> Result<GruInput, ModelError> {
        let wx = self.p(g, &format!("{pre}.wx"))?;
        let bx = self.p(g, &format!("{pre}.bx"))?;
        let gx = g.matmul(x, wx)?;
        let gx = g.add_bias(gx, bx)?;
        Ok(GruInput { wh: self.p(g, &format!("{pre}.wh"))?, bh: self.p(g, &format!("{pre}.bh"))?, gx })
    }

    /// One GRU step from precomputed input gates `gx` (`[b, 3d]`).
    fn gru_step(&self, g: &mut Graph, gx: Var, h: Var, wh: Var, bh: Var) -> Result<Var, ModelError> {
        let d = self.d;
        let gh = g.matmul(h, wh)?;
        let gh = g.add_bias(gh, bh)?;
        let part = |g: &mut Graph, v: Var, i: usize| g.slice_last(v, i * d, d);
        let (xr, xz, xn) = (part(g, gx, 0)?, part(g, gx, 1)?, part(g, gx, 2)?);
        let (hr, hz, hn) = (part(g, gh, 0)?, part(g, gh, 1)?, part(g, gh, 2)?);
        let r = g.add(xr, hr)?;
        let r = g.sigmoid(r);
        let z = g.add(xz, hz)?;
        let z = g.sigmoid(z);
        let rn = g.mul(r, hn)?;
        let n = g.add(xn, rn)?;
        let n = g.tanh(n);
        let keep = g.mul(z, h)?;
        let zc = g.one_minus(z);
        let fresh = g.mul(zc, n)?;
        Ok(g.add(keep, fresh)?)
    }

    /// Runs one direction over `x` (`[b, t, in]`); padded steps keep the state.
    fn run(&self, g: &mut Graph, x: Var, masks: &[Var], pre: &str, reverse: bool) -> Result<Vec<Var>, ModelError> {
        let s = g.shape(x).to_vec();
        let (b, t) = (s[0], s[1]);
        let flat = g.reshape(x, &[b * t, s[2]])?;
        let gi = self.gru_input(g, flat, pre)?;
        let gx = g.reshape(gi.gx, &[b, t, 3 * self.d])?;
        let mut h = g.constant(Tensor::zeros(&[b, self.d]));
        let mut out = vec![h; t];
        let order: Vec<usize> = if reverse { (0..t).rev().collect() } else { (0..t).collect() };
        for i in order {
            let xi = g.select(gx, i)?;
            let fresh = self.gru_step(g, xi, h, gi.wh, gi.bh)?;
            let m = masks[i];
            let a = g.mul(m, fresh)?;
            let mc = g.one_minus(m);
            let kept = g.mul(mc, h)?;
            h = g.add(a, kept)?;
            out[i] = h;
        }
        Ok(out)
    }

    fn output(&self, g: &mut Graph, x: Var) -> Result<Var, ModelError> {
        let logits = if self.m.config.tied_embeddings {
            let e = self.p(g, "tgt_emb")?;
            g.matmul_t(x, e, false, true)?
        } else {
            let w = self.p(g, "out.w")?;
            g.matmul(x, w)?
        };
        let b = self.p(g, "out.b")?;
        Ok(g.add_bias(logits, b)?)
    }
}

/// Encoder states `[b·s, d]` and one initial decoder state `[b, d]` per layer.
pub(super) fn encode(m: &Seq2SeqModel, g: &mut Graph, src: &PaddedIds, fwd: &mut ForwardCtx<'_>) -> Result<(Var, Vec<Var>), ModelError> {
    let c = &m.config;
    let d = c.model_width;
    let cx = Ctx { m, d };
    let (b, s) = (src.rows, src.width);
    let masks: Vec<Var> = (0..s)
        .map(|t| {
            let col = src.column(t);
            let data = col.iter().flat_map(|&id| std::iter::repeat_n(if id == PAD_ID { 0.0 } else { 1.0 }, d)).collect();
            g.constant(Tensor::new(vec![b, d], data).expect("shape"))
        })
        .collect();
    let table = cx.p(g, "src_emb")?;
    let e = g.embedding(table, &src.ids)?;
    let e = fwd.dropout(g, e, c.dropout_rate)?;
    let mut x = g.reshape(e, &[b, s, d])?;
    let (mut last_f, mut first_b) = (x, x);
    for l in 0..c.layer_count {
        let f = cx.run(g, x, &masks, &format!("enc.{l}.fwd"), false)?;
        let r = cx.run(g, x, &masks, &format!("enc.{l}.bwd"), true)?;
        (last_f, first_b) = (f[s - 1], r[0]);
        let steps = f.iter().zip(&r).map(|(a, b)| g.concat(&[*a, *b])).collect::<Result<Vec<_>, _>>()?;
        x = g.stack(&steps)?;
        if l + 1 < c.layer_count {
            x = fwd.dropout(g, x, c.dropout_rate)?;
        }
    }
    let flat = g.reshape(x, &[b * s, 2 * d])?;
    let w = cx.p(g, "enc.proj.w")?;
    let bias = cx.p(g, "enc.proj.b")?;
    let memory = g.matmul(flat, w)?;
    let memory = g.add_bias(memory, bias)?;
    let summary = g.concat(&[last_f, first_b])?;
    let mut states = Vec::with_capacity(c.layer_count);
    for l in 0..c.layer_count {
        let w = cx.p(g, &format!("dec.{l}.init.w"))?;
        let bias = cx.p(g, &format!("dec.{l}.init.b"))?;
        let h = g.matmul(summary, w)?;
        let h = g.add_bias(h, bias)?;
        states.push(g.tanh(h));
    }
    Ok((memory, states))
}

/// Decoder logits `[b, t, V]`.
#[allow(clippy::too_many_arguments)]
pub(super) fn decode(
    m: &Seq2SeqModel,
    g: &mut Graph,
    memory: Var,
    init: &[Var],
    src_pad: &[bool],
    src_width: usize,
    tgt: &PaddedIds,
    fwd: &mut ForwardCtx<'_>,
) -> Result<Var, ModelError> {
    let c = &m.config;
    let d = c.model_width;
    let cx = Ctx { m, d };
    let (b, t, s) = (tgt.rows, tgt.width, src_width);
    let memory = g.reshape(memory, &[b, s, d])?;
    let wa = cx.p(g, "attn.w")?;
    let flat_mem = g.reshape(memory, &[b * s, d])?;
    let keys = g.matmul(flat_mem, wa)?;
    let keys = g.reshape(keys, &[b, s, d])?;
    let mask = g.constant(Tensor::new(vec![b, 1, s], src_pad.iter().map(|&p| if p { MASKED } else { 0.0 }).collect())?);
    let wc = cx.p(g, "attn.combine")?;
    let table = cx.p(g, "tgt_emb")?;
    let e = g.embedding(table, &tgt.ids)?;
    let e = fwd.dropout(g, e, c.dropout_rate)?;
    let e = g.reshape(e, &[b, t, d])?;
    let layers: Vec<(Var, Var, Var, Var)> = (0..c.layer_count)
        .map(|l| {
            let pre = format!("dec.{l}.gru");
            Ok((cx.p(g, &format!("{pre}.wx"))?, cx.p(g, &format!("{pre}.bx"))?, cx.p(g, &format!("{pre}.wh"))?, cx.p(g, &format!("{pre}.bh"))?))
        })
        .collect::<Result<_, ModelError>>()?;
    let mut h = init.to_vec();
    let mut feed = g.constant(Tensor::zeros(&[b, d]));
    let mut outputs = Vec::with_capacity(t);
    for i in 0..t {
        let ei = g.select(e, i)?;
        let mut x = g.concat(&[ei, feed])?;
        for (l, &(wx, bx, wh, bh)) in layers.iter().enumerate() {
            let gx = g.matmul(x, wx)?;
            let gx = g.add_bias(gx, bx)?;
            h[l] = cx.gru_step(g, gx, h[l], wh, bh)?;
            x = h[l];
            if l + 1 < layers.len() {
                x = fwd.dropout(g, x, c.dropout_rate)?;
            }
        }
        let q = g.reshape(x, &[b, 1, d])?;
        let scores = g.matmul_t(q, keys, false, true)?;
        let scores = g.add(scores, mask)?;
        let probs = g.softmax(scores);
        let ctx = g.matmul(probs, memory)?;
        let ctx = g.reshape(ctx, &[b, d])?;
        let joined = g.concat(&[ctx, x])?;
        let attn_h = g.matmul(joined, wc)?;
        let attn_h = g.tanh(attn_h);
        let attn_h = fwd.dropout(g, attn_h, c.dropout_rate)?;
        feed = attn_h;
        outputs.push(attn_h);
    }
    let stacked = g.stack(&outputs)?;
    let flat = g.reshape(stacked, &[b * t, d])?;
    let logits = cx.output(g, flat)?;
    Ok(g.reshape(logits, &[b, t, c.target_vocab_size])?)
}

pub(super) fn forward(m: &Seq2SeqModel, g: &mut Graph, src: &PaddedIds, tgt: &PaddedIds, fwd: &mut ForwardCtx<'_>) -> Result<Var, ModelError> {
    let (memory, init) = encode(m, g, src, fwd)?;
    let pad: Vec<bool> = src.ids.iter().map(|&i| i == PAD_ID).collect();
    decode(m, g, memory, &init, &pad, src.width, tgt, fwd)
}
