//! Tape-based forward passes for the encoder and decoder.
//!
//! Both models share the block structure: pre-norm attention and feed-forward
//! with residuals. The encoder attends bidirectionally over
//! `[query; history]` and reads its heads off position 0; the decoder is
//! causally masked. All batched calls take right-padded fixed-shape token
//! matrices, so per-row results are independent of batch composition.

use super::{DecoderConfig, DecoderParams, EncoderConfig, EncoderParams};
use tensorcore::rng::SplitMix64;
use tensorcore::{Scalar, Tape, Tensor, Var, MASK_NEG};

pub const LN_EPS: f64 = 1e-5;

/// Training mode carries the dropout stream; eval mode applies no dropout
/// and is a pure function of (params, tokens).
pub enum ForwardMode<'r> {
    Eval,
    Train { dropout_rng: &'r mut SplitMix64 },
}

impl ForwardMode<'_> {
    fn dropout<S: Scalar>(&mut self, tape: &mut Tape<S>, x: Var, rate: f64) -> Var {
        match self {
            ForwardMode::Eval => x,
            ForwardMode::Train { dropout_rng } => tape.dropout(x, rate, dropout_rng),
        }
    }
}

pub struct BlockVars {
    ln1g: Var,
    ln1b: Var,
    wq: Var,
    bq: Var,
    wk: Var,
    bk: Var,
    wv: Var,
    bv: Var,
    wo: Var,
    bo: Var,
    ln2g: Var,
    ln2b: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

pub struct HeadVars {
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

/// Encoder parameters loaded onto a tape. `param_list` parallels
/// `EncoderParams::named` so gradients line up with the optimizer walk.
pub struct EncoderVars {
    pub embed: Var,
    pub pos: Var,
    pub blocks: Vec<BlockVars>,
    pub final_ln_g: Var,
    pub final_ln_b: Var,
    pub occ: HeadVars,
    pub cens: HeadVars,
    pub param_list: Vec<Var>,
}

pub struct DecoderVars {
    pub embed: Var,
    pub pos: Var,
    pub blocks: Vec<BlockVars>,
    pub final_ln_g: Var,
    pub final_ln_b: Var,
    pub lm_w: Var,
    pub lm_b: Var,
    pub param_list: Vec<Var>,
}

fn load_blocks<S: Scalar>(
    tape: &mut Tape<S>,
    blocks: &[super::BlockParams<S>],
    requires_grad: bool,
    list: &mut Vec<Var>,
) -> Vec<BlockVars> {
    let mut lf = |t: &Tensor<S>, list: &mut Vec<Var>| {
        let v = tape.leaf(t.clone(), requires_grad);
        list.push(v);
        v
    };
    blocks
        .iter()
        .map(|b| BlockVars {
            ln1g: lf(&b.ln1.gain, list),
            ln1b: lf(&b.ln1.bias, list),
            wq: lf(&b.wq, list),
            bq: lf(&b.bq, list),
            wk: lf(&b.wk, list),
            bk: lf(&b.bk, list),
            wv: lf(&b.wv, list),
            bv: lf(&b.bv, list),
            wo: lf(&b.wo, list),
            bo: lf(&b.bo, list),
            ln2g: lf(&b.ln2.gain, list),
            ln2b: lf(&b.ln2.bias, list),
            w1: lf(&b.w1, list),
            b1: lf(&b.b1, list),
            w2: lf(&b.w2, list),
            b2: lf(&b.b2, list),
        })
        .collect()
}

impl EncoderVars {
    pub fn load<S: Scalar>(
        tape: &mut Tape<S>,
        params: &EncoderParams<S>,
        requires_grad: bool,
    ) -> Self {
        let mut list = Vec::new();
        let embed = tape.leaf(params.embed.clone(), requires_grad);
        list.push(embed);
        let pos = tape.leaf(params.pos.clone(), requires_grad);
        list.push(pos);
        let blocks = load_blocks(tape, &params.blocks, requires_grad, &mut list);
        let final_ln_g = tape.leaf(params.final_ln.gain.clone(), requires_grad);
        list.push(final_ln_g);
        let final_ln_b = tape.leaf(params.final_ln.bias.clone(), requires_grad);
        list.push(final_ln_b);
        let mut head = |h: &super::HeadParams<S>, list: &mut Vec<Var>| {
            let w1 = tape.leaf(h.w1.clone(), requires_grad);
            list.push(w1);
            let b1 = tape.leaf(h.b1.clone(), requires_grad);
            list.push(b1);
            let w2 = tape.leaf(h.w2.clone(), requires_grad);
            list.push(w2);
            let b2 = tape.leaf(h.b2.clone(), requires_grad);
            list.push(b2);
            HeadVars { w1, b1, w2, b2 }
        };
        let occ = head(&params.occ_head, &mut list);
        let cens = head(&params.cens_head, &mut list);
        EncoderVars { embed, pos, blocks, final_ln_g, final_ln_b, occ, cens, param_list: list }
    }
}

impl DecoderVars {
    pub fn load<S: Scalar>(
        tape: &mut Tape<S>,
        params: &DecoderParams<S>,
        requires_grad: bool,
    ) -> Self {
        let mut list = Vec::new();
        let embed = tape.leaf(params.embed.clone(), requires_grad);
        list.push(embed);
        let pos = tape.leaf(params.pos.clone(), requires_grad);
        list.push(pos);
        let blocks = load_blocks(tape, &params.blocks, requires_grad, &mut list);
        let final_ln_g = tape.leaf(params.final_ln.gain.clone(), requires_grad);
        list.push(final_ln_g);
        let final_ln_b = tape.leaf(params.final_ln.bias.clone(), requires_grad);
        list.push(final_ln_b);
        let lm_w = tape.leaf(params.lm_w.clone(), requires_grad);
        list.push(lm_w);
        let lm_b = tape.leaf(params.lm_b.clone(), requires_grad);
        list.push(lm_b);
        DecoderVars { embed, pos, blocks, final_ln_g, final_ln_b, lm_w, lm_b, param_list: list }
    }
}

fn proj<S: Scalar>(tape: &mut Tape<S>, x: Var, w: Var, b: Var) -> Var {
    let y = tape.matmul(x, w);
    tape.add_bias(y, b)
}

fn split_heads<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    batch: usize,
    seq: usize,
    heads: usize,
    dh: usize,
) -> Var {
    let r = tape.reshape(x, &[batch, seq, heads, dh]);
    let p = tape.permute(r, &[0, 2, 1, 3]);
    tape.reshape(p, &[batch * heads, seq, dh])
}

fn merge_heads<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    batch: usize,
    seq: usize,
    heads: usize,
    dh: usize,
) -> Var {
    let r = tape.reshape(x, &[batch, heads, seq, dh]);
    let p = tape.permute(r, &[0, 2, 1, 3]);
    tape.reshape(p, &[batch * seq, heads * dh])
}

#[allow(clippy::too_many_arguments)]
fn block_forward<S: Scalar>(
    tape: &mut Tape<S>,
    blk: &BlockVars,
    x: Var,
    mask: &Tensor<S>,
    batch: usize,
    seq: usize,
    heads: usize,
    dh: usize,
    dropout: f64,
    mode: &mut ForwardMode,
) -> Var {
    let ln1 = tape.layer_norm(x, blk.ln1g, blk.ln1b, LN_EPS);
    let q = proj(tape, ln1, blk.wq, blk.bq);
    let k = proj(tape, ln1, blk.wk, blk.bk);
    let v = proj(tape, ln1, blk.wv, blk.bv);
    let qh = split_heads(tape, q, batch, seq, heads, dh);
    let kh = split_heads(tape, k, batch, seq, heads, dh);
    let vh = split_heads(tape, v, batch, seq, heads, dh);
    let scores = tape.batch_matmul(qh, kh, true);
    let scaled = tape.scale(scores, S::from_f64(1.0 / (dh as f64).sqrt()));
    let masked = tape.add_const(scaled, mask);
    let probs = tape.softmax_last(masked);
    let ctx = tape.batch_matmul(probs, vh, false);
    let merged = merge_heads(tape, ctx, batch, seq, heads, dh);
    let mut attn = proj(tape, merged, blk.wo, blk.bo);
    attn = mode.dropout(tape, attn, dropout);
    let x = tape.add(x, attn);

    let ln2 = tape.layer_norm(x, blk.ln2g, blk.ln2b, LN_EPS);
    let mid = proj(tape, ln2, blk.w1, blk.b1);
    let mut act = tape.relu(mid);
    act = mode.dropout(tape, act, dropout);
    let mlp = proj(tape, act, blk.w2, blk.b2);
    tape.add(x, mlp)
}

fn head_forward<S: Scalar>(
    tape: &mut Tape<S>,
    head: &HeadVars,
    h0: Var,
    dropout: f64,
    mode: &mut ForwardMode,
) -> Var {
    let mid = proj(tape, h0, head.w1, head.b1);
    let mut act = tape.relu(mid);
    act = mode.dropout(tape, act, dropout);
    let out = proj(tape, act, head.w2, head.b2); // [batch, 1]
    let batch = tape.value(out).shape()[0];
    tape.reshape(out, &[batch])
}

/// Additive key mask: padded keys get `MASK_NEG`; with `causal`, so do
/// future positions. Shape [batch*heads, seq, seq].
fn attention_mask<S: Scalar>(
    tokens: &[u32],
    batch: usize,
    seq: usize,
    heads: usize,
    pad_token: u32,
    causal: bool,
) -> Tensor<S> {
    let neg = S::from_f64(MASK_NEG);
    let mut data = vec![S::ZERO; batch * heads * seq * seq];
    for b in 0..batch {
        let row = &tokens[b * seq..(b + 1) * seq];
        let mut base = vec![S::ZERO; seq * seq];
        for i in 0..seq {
            for j in 0..seq {
                if row[j] == pad_token || (causal && j > i) {
                    base[i * seq + j] = neg;
                }
            }
        }
        for h in 0..heads {
            let off = (b * heads + h) * seq * seq;
            data[off..off + seq * seq].copy_from_slice(&base);
        }
    }
    Tensor::new(&[batch * heads, seq, seq], data)
}

pub struct EncodeOut {
    /// Final-layer hidden state at position 0 (the query token), [batch, d].
    pub h0: Var,
    /// Occurrence-head logits, [batch].
    pub occ: Var,
    /// Censoring-head logits, [batch].
    pub cens: Var,
}

/// Batched encoder forward over a right-padded [batch, seq] token matrix
/// whose rows start with the query token.
#[allow(clippy::too_many_arguments)]
pub fn encoder_forward<S: Scalar>(
    tape: &mut Tape<S>,
    cfg: &EncoderConfig,
    vars: &EncoderVars,
    tokens: &[u32],
    batch: usize,
    seq: usize,
    pad_token: u32,
    mode: &mut ForwardMode,
) -> EncodeOut {
    assert_eq!(tokens.len(), batch * seq);
    assert!(seq <= cfg.max_len, "sequence of {seq} exceeds max_len {}", cfg.max_len);
    let (d, heads, dh) = (cfg.d_model, cfg.heads, cfg.head_dim());
    let tok_emb = tape.embedding(vars.embed, tokens);
    let pos_ids: Vec<u32> = (0..batch * seq).map(|i| (i % seq) as u32).collect();
    let pos_emb = tape.embedding(vars.pos, &pos_ids);
    let mut x = tape.add(tok_emb, pos_emb);
    let mask = attention_mask::<S>(tokens, batch, seq, heads, pad_token, false);
    for blk in &vars.blocks {
        x = block_forward(tape, blk, x, &mask, batch, seq, heads, dh, cfg.dropout, mode);
    }
    let xf = tape.layer_norm(x, vars.final_ln_g, vars.final_ln_b, LN_EPS);
    let x3 = tape.reshape(xf, &[batch, seq, d]);
    let h0 = tape.select_index(x3, 1, 0);
    let occ = head_forward(tape, &vars.occ, h0, cfg.dropout, mode);
    let cens = head_forward(tape, &vars.cens, h0, cfg.dropout, mode);
    EncodeOut { h0, occ, cens }
}

/// Batched decoder forward; returns next-token logits as [batch*seq, vocab].
#[allow(clippy::too_many_arguments)]
pub fn decoder_forward<S: Scalar>(
    tape: &mut Tape<S>,
    cfg: &DecoderConfig,
    vars: &DecoderVars,
    tokens: &[u32],
    batch: usize,
    seq: usize,
    pad_token: u32,
    mode: &mut ForwardMode,
) -> Var {
    assert_eq!(tokens.len(), batch * seq);
    assert!(seq <= cfg.max_positions, "sequence of {seq} exceeds positions {}", cfg.max_positions);
    let (heads, dh) = (cfg.heads, cfg.head_dim());
    let tok_emb = tape.embedding(vars.embed, tokens);
    let pos_ids: Vec<u32> = (0..batch * seq).map(|i| (i % seq) as u32).collect();
    let pos_emb = tape.embedding(vars.pos, &pos_ids);
    let mut x = tape.add(tok_emb, pos_emb);
    let mask = attention_mask::<S>(tokens, batch, seq, heads, pad_token, true);
    for blk in &vars.blocks {
        x = block_forward(tape, blk, x, &mask, batch, seq, heads, dh, cfg.dropout, mode);
    }
    let xf = tape.layer_norm(x, vars.final_ln_g, vars.final_ln_b, LN_EPS);
    proj(tape, xf, vars.lm_w, vars.lm_b)
}

/// Single-sample query-conditioned forward in eval mode: prepends the query
/// token to the history, right-pads to the context window, and returns the
/// position-0 bottleneck plus both head logits.
pub fn encode(
    params: &EncoderParams<f32>,
    query_token: u32,
    history_tokens: &[u32],
    pad_token: u32,
) -> (Vec<f32>, f32, f32) {
    let cfg = &params.cfg;
    assert!(
        !history_tokens.is_empty() && history_tokens.len() <= cfg.max_len - 1,
        "history must hold 1..={} tokens, got {}",
        cfg.max_len - 1,
        history_tokens.len()
    );
    for &t in history_tokens.iter().chain([&query_token]) {
        assert!((t as usize) < cfg.vocab_size, "token {t} out of range");
    }
    let mut row = Vec::with_capacity(cfg.max_len);
    row.push(query_token);
    row.extend_from_slice(history_tokens);
    row.resize(cfg.max_len, pad_token);
    let mut tape = Tape::<f32>::no_grad();
    let vars = EncoderVars::load(&mut tape, params, false);
    let out = encoder_forward(
        &mut tape,
        cfg,
        &vars,
        &row,
        1,
        cfg.max_len,
        pad_token,
        &mut ForwardMode::Eval,
    );
    (
        tape.value(out.h0).data().to_vec(),
        tape.value(out.occ).data()[0],
        tape.value(out.cens).data()[0],
    )
}

/// Full-sequence decoder logits for one token sequence, eval mode, shape
/// [len, vocab]. Position i's logits depend only on tokens 0..=i.
pub fn ar_forward(params: &DecoderParams<f32>, tokens: &[u32]) -> Tensor<f32> {
    let cfg = &params.cfg;
    assert!(!tokens.is_empty() && tokens.len() <= cfg.max_positions);
    for &t in tokens {
        assert!((t as usize) < cfg.vocab_size, "token {t} out of range");
    }
    let mut tape = Tape::<f32>::no_grad();
    let vars = DecoderVars::load(&mut tape, params, false);
    // No padding: the causal mask alone governs visibility.
    let pad_sentinel = u32::MAX;
    let logits = decoder_forward(
        &mut tape,
        cfg,
        &vars,
        tokens,
        1,
        tokens.len(),
        pad_sentinel,
        &mut ForwardMode::Eval,
    );
    tape.value(logits).reshaped(&[tokens.len(), cfg.vocab_size])
}
