//! Incremental decoder sampling with a per-layer key/value cache.
//!
//! Rollouts from a shared context are stepped in lockstep so the per-token
//! projections run as one small GEMM across rollouts instead of R matrix-
//! vector products. Each rollout consumes its own derived random stream, so
//! results do not depend on batching or scheduling.

use super::forward::LN_EPS;
use super::DecoderParams;
use crate::eventio::{CodeVocab, TokenId};
use tensorcore::rng::SplitMix64;
use tensorcore::Scalar;

/// Generation stops when cumulative generated time exceeds the horizon, the
/// token budget is spent, or the positional table runs out.
#[derive(Debug, Clone, Copy)]
pub struct StopRule {
    pub max_new_tokens: usize,
    pub horizon_h: f64,
}

/// Generated tokens with the cumulative elapsed time (hours) after each
/// token; time advances only on gap tokens, by their bin representative.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub tokens: Vec<TokenId>,
    pub elapsed_h: Vec<f64>,
}

impl Trajectory {
    /// True if any of `codes` (by token id) occurs at elapsed time <= horizon.
    pub fn contains_within(&self, token_ids: &[TokenId], horizon_h: f64) -> bool {
        self.tokens
            .iter()
            .zip(&self.elapsed_h)
            .any(|(t, &e)| e <= horizon_h && token_ids.contains(t))
    }
}

fn gemm(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        <f32 as Scalar>::gemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn add_bias(x: &mut [f32], bias: &[f32]) {
    let d = bias.len();
    for (i, v) in x.iter_mut().enumerate() {
        *v += bias[i % d];
    }
}

/// Row-wise layer norm matching the tape op's arithmetic.
fn layer_norm_rows(x: &[f32], gain: &[f32], bias: &[f32], out: &mut [f32]) {
    let d = gain.len();
    for (row, orow) in x.chunks(d).zip(out.chunks_mut(d)) {
        let mut mu = 0.0f32;
        for &v in row {
            mu += v;
        }
        mu /= d as f32;
        let mut var = 0.0f32;
        for &v in row {
            var += (v - mu) * (v - mu);
        }
        var /= d as f32;
        let rstd = 1.0 / (var + LN_EPS as f32).sqrt();
        for i in 0..d {
            orow[i] = (row[i] - mu) * rstd * gain[i] + bias[i];
        }
    }
}

/// Per-layer caches for R lockstep rollouts; keys/values are stored
/// contiguously per rollout, `cap` positions each.
struct BatchCache {
    k: Vec<Vec<f32>>, // per layer: [r * cap * d]
    v: Vec<Vec<f32>>,
    r: usize,
    cap: usize,
    len: usize,
}

impl BatchCache {
    fn new(layers: usize, r: usize, cap: usize, d: usize) -> Self {
        BatchCache {
            k: (0..layers).map(|_| vec![0.0; r * cap * d]).collect(),
            v: (0..layers).map(|_| vec![0.0; r * cap * d]).collect(),
            r,
            cap,
            len: 0,
        }
    }
}

/// One decoder step for R rollouts: consumes one token per rollout at the
/// same position, appends to the caches, returns [R, vocab] logits.
fn step_batch(
    p: &DecoderParams<f32>,
    cache: &mut BatchCache,
    tokens: &[u32],
    position: usize,
) -> Vec<f32> {
    let cfg = &p.cfg;
    let (d, heads, dh, vsz) = (cfg.d_model, cfg.heads, cfg.head_dim(), cfg.vocab_size);
    let r = cache.r;
    assert_eq!(tokens.len(), r);
    assert!(position < cfg.max_positions, "position {position} beyond table");
    assert_eq!(cache.len, position, "cache length must equal position");

    let mut x = vec![0.0f32; r * d];
    for (ri, &tok) in tokens.iter().enumerate() {
        let te = &p.embed.data()[tok as usize * d..(tok as usize + 1) * d];
        let pe = &p.pos.data()[position * d..(position + 1) * d];
        for i in 0..d {
            x[ri * d + i] = te[i] + pe[i];
        }
    }

    let mut ln = vec![0.0f32; r * d];
    let mut q = vec![0.0f32; r * d];
    let mut kv = vec![0.0f32; r * d];
    let mut ctx = vec![0.0f32; r * d];
    let mut attn_out = vec![0.0f32; r * d];
    let ffn = cfg.ffn_hidden();
    let mut mid = vec![0.0f32; r * ffn];
    let mut mlp = vec![0.0f32; r * d];

    for (li, blk) in p.blocks.iter().enumerate() {
        layer_norm_rows(&x, blk.ln1.gain.data(), blk.ln1.bias.data(), &mut ln);
        // Append this position's keys and values per rollout.
        gemm(r, d, d, &ln, blk.wk.data(), &mut kv);
        add_bias(&mut kv, blk.bk.data());
        for ri in 0..r {
            let dst = (ri * cache.cap + position) * d;
            cache.k[li][dst..dst + d].copy_from_slice(&kv[ri * d..(ri + 1) * d]);
        }
        gemm(r, d, d, &ln, blk.wv.data(), &mut kv);
        add_bias(&mut kv, blk.bv.data());
        for ri in 0..r {
            let dst = (ri * cache.cap + position) * d;
            cache.v[li][dst..dst + d].copy_from_slice(&kv[ri * d..(ri + 1) * d]);
        }
        gemm(r, d, d, &ln, blk.wq.data(), &mut q);
        add_bias(&mut q, blk.bq.data());

        // Attention over each rollout's cached positions 0..=position.
        let scale = 1.0 / (dh as f32).sqrt();
        let seen = position + 1;
        let mut scores = vec![0.0f32; seen];
        for ri in 0..r {
            for h in 0..heads {
                let qh = &q[ri * d + h * dh..ri * d + (h + 1) * dh];
                for (j, s) in scores.iter_mut().enumerate() {
                    let kh = &cache.k[li][(ri * cache.cap + j) * d + h * dh..][..dh];
                    let mut dot = 0.0f32;
                    for i in 0..dh {
                        dot += qh[i] * kh[i];
                    }
                    *s = dot * scale;
                }
                let mut mx = scores[0];
                for &s in scores.iter() {
                    mx = mx.max(s);
                }
                let mut sum = 0.0f32;
                for s in scores.iter_mut() {
                    *s = (*s - mx).exp();
                    sum += *s;
                }
                let chh = &mut ctx[ri * d + h * dh..ri * d + (h + 1) * dh];
                chh.fill(0.0);
                for (j, &s) in scores.iter().enumerate().take(seen) {
                    let w = s / sum;
                    let vh = &cache.v[li][(ri * cache.cap + j) * d + h * dh..][..dh];
                    for i in 0..dh {
                        chh[i] += w * vh[i];
                    }
                }
            }
        }
        gemm(r, d, d, &ctx, blk.wo.data(), &mut attn_out);
        add_bias(&mut attn_out, blk.bo.data());
        for i in 0..r * d {
            x[i] += attn_out[i];
        }

        layer_norm_rows(&x, blk.ln2.gain.data(), blk.ln2.bias.data(), &mut ln);
        gemm(r, d, ffn, &ln, blk.w1.data(), &mut mid);
        add_bias(&mut mid, blk.b1.data());
        for v in mid.iter_mut() {
            *v = v.max(0.0);
        }
        gemm(r, ffn, d, &mid, blk.w2.data(), &mut mlp);
        add_bias(&mut mlp, blk.b2.data());
        for i in 0..r * d {
            x[i] += mlp[i];
        }
    }

    layer_norm_rows(&x, p.final_ln.gain.data(), p.final_ln.bias.data(), &mut ln);
    let mut logits = vec![0.0f32; r * vsz];
    gemm(r, d, vsz, &ln, p.lm_w.data(), &mut logits);
    add_bias(&mut logits, p.lm_b.data());
    cache.len = position + 1;
    logits
}

/// Samples one token id from `logits / temperature`; temperature 0 is
/// argmax (lowest index on ties).
fn sample_token(logits: &[f32], temperature: f64, rng: &mut SplitMix64) -> u32 {
    assert!(temperature >= 0.0, "temperature must be non-negative");
    if temperature == 0.0 {
        let mut best = 0usize;
        for (i, &l) in logits.iter().enumerate() {
            if l > logits[best] {
                best = i;
            }
        }
        return best as u32;
    }
    let mx = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let weights: Vec<f64> =
        logits.iter().map(|&l| ((l as f64 - mx) / temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.next_f64() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i as u32;
        }
        u -= w;
    }
    (weights.len() - 1) as u32
}

/// Samples `rollout_seeds.len()` future trajectories continuing from the
/// shared context (its most recent `context_len` tokens). Each rollout's
/// randomness comes only from its own seed, so any batching yields
/// identical trajectories.
pub fn ar_sample_trajectories(
    params: &DecoderParams<f32>,
    vocab: &CodeVocab,
    context_tokens: &[u32],
    rollout_seeds: &[u64],
    temperature: f64,
    stop: &StopRule,
) -> Vec<Trajectory> {
    assert!(!context_tokens.is_empty(), "context must be nonempty");
    assert!(temperature >= 0.0, "temperature must be non-negative");
    let cfg = &params.cfg;
    let r = rollout_seeds.len();
    assert!(r >= 1);
    let ctx: Vec<u32> = context_tokens
        [context_tokens.len().saturating_sub(cfg.context_len)..]
        .to_vec();
    let budget = stop.max_new_tokens.min(cfg.max_positions - ctx.len());

    // Prefill with a single stream, then replicate the context cache.
    let mut prefill = BatchCache::new(cfg.layers, 1, cfg.max_positions, cfg.d_model);
    let mut last_logits = vec![0.0f32; cfg.vocab_size];
    for (pos, &tok) in ctx.iter().enumerate() {
        last_logits = step_batch(params, &mut prefill, &[tok], pos);
    }
    let mut cache = BatchCache::new(cfg.layers, r, cfg.max_positions, cfg.d_model);
    cache.len = prefill.len;
    let d = cfg.d_model;
    for li in 0..cfg.layers {
        for ri in 0..r {
            let n = prefill.len * d;
            cache.k[li][ri * cfg.max_positions * d..][..n].copy_from_slice(&prefill.k[li][..n]);
            cache.v[li][ri * cfg.max_positions * d..][..n].copy_from_slice(&prefill.v[li][..n]);
        }
    }

    let mut rngs: Vec<SplitMix64> = rollout_seeds.iter().map(|&s| SplitMix64::new(s)).collect();
    let mut trajectories = vec![Trajectory { tokens: Vec::new(), elapsed_h: Vec::new() }; r];
    let mut elapsed = vec![0.0f64; r];
    let mut done = vec![false; r];
    let mut logits = {
        let mut l = Vec::with_capacity(r * cfg.vocab_size);
        for _ in 0..r {
            l.extend_from_slice(&last_logits);
        }
        l
    };
    let pad = vocab.pad_token();

    for step in 0..budget {
        let mut tokens = vec![pad; r];
        for ri in 0..r {
            if done[ri] {
                continue;
            }
            let tok = sample_token(&logits[ri * cfg.vocab_size..(ri + 1) * cfg.vocab_size],
                temperature, &mut rngs[ri]);
            if let Some(rep) = vocab.gap_representative(tok) {
                elapsed[ri] += rep;
            }
            trajectories[ri].tokens.push(tok);
            trajectories[ri].elapsed_h.push(elapsed[ri]);
            tokens[ri] = tok;
            if elapsed[ri] > stop.horizon_h {
                done[ri] = true;
            }
        }
        if done.iter().all(|&d| d) || step + 1 == budget {
            break;
        }
        logits = step_batch(params, &mut cache, &tokens, ctx.len() + step);
    }
    trajectories
}

/// Single-trajectory convenience wrapper; consumes one seed from `rng`.
pub fn ar_sample_trajectory(
    params: &DecoderParams<f32>,
    vocab: &CodeVocab,
    context_tokens: &[u32],
    rng: &mut SplitMix64,
    temperature: f64,
    stop: &StopRule,
) -> Trajectory {
    let seed = rng.next_u64();
    ar_sample_trajectories(params, vocab, context_tokens, &[seed], temperature, stop)
        .pop()
        .unwrap()
}
