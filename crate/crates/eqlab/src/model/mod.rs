//! Two small transformers over a shared tensor core: a bidirectional
//! encoder with a prepended query token and dual heads, and a causal
//! decoder for next-token prediction.

mod checkpoint;
mod forward;
mod sampler;

pub use checkpoint::{
    load_decoder_checkpoint, load_encoder_checkpoint, save_decoder_checkpoint,
    save_encoder_checkpoint, CheckpointError, CheckpointMeta, CHECKPOINT_VERSION,
};
pub use forward::{
    ar_forward, decoder_forward, encode, encoder_forward, DecoderVars, EncodeOut, EncoderVars,
    ForwardMode,
};
pub use sampler::{ar_sample_trajectory, ar_sample_trajectories, StopRule, Trajectory};

use tensorcore::rng::SplitMix64;
use tensorcore::{Scalar, Tensor};

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    /// Hidden width of the two prediction-head MLPs.
    pub head_mlp_hidden: usize,
    /// Total context tokens including the query position.
    pub max_len: usize,
    pub vocab_size: usize,
    pub dropout: f64,
}

impl EncoderConfig {
    pub fn validate(&self) {
        assert!(self.d_model % self.heads == 0, "d_model must divide evenly into heads");
        assert!(self.max_len >= 2, "max_len must be at least 2");
        assert!(self.layers >= 1 && self.vocab_size >= 1);
        assert!((0.0..1.0).contains(&self.dropout));
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// Feed-forward width of the transformer blocks (fixed convention).
    pub fn ffn_hidden(&self) -> usize {
        4 * self.d_model
    }

    /// Closed-form parameter count implied by the config.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let f = self.ffn_hidden();
        let h = self.head_mlp_hidden;
        let per_block = 2 * d            // ln1
            + 4 * (d * d + d)            // q, k, v, o projections
            + 2 * d                      // ln2
            + (d * f + f) + (f * d + d); // ffn
        let head = d * h + h + h + 1;
        self.vocab_size * d + self.max_len * d + self.layers * per_block + 2 * d + 2 * head
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    /// Positional table size: context plus generation budget.
    pub max_positions: usize,
    /// Patient-context budget at inference time.
    pub context_len: usize,
    pub vocab_size: usize,
    pub dropout: f64,
}

impl DecoderConfig {
    pub fn validate(&self) {
        assert!(self.d_model % self.heads == 0, "d_model must divide evenly into heads");
        assert!(self.context_len >= 2 && self.context_len <= self.max_positions);
        assert!(self.layers >= 1 && self.vocab_size >= 1);
        assert!((0.0..1.0).contains(&self.dropout));
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn ffn_hidden(&self) -> usize {
        4 * self.d_model
    }

    pub fn generation_budget(&self) -> usize {
        self.max_positions - self.context_len
    }

    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let f = self.ffn_hidden();
        let per_block = 2 * d + 4 * (d * d + d) + 2 * d + (d * f + f) + (f * d + d);
        self.vocab_size * d
            + self.max_positions * d
            + self.layers * per_block
            + 2 * d
            + (d * self.vocab_size + self.vocab_size) // lm head
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams<S: Scalar = f32> {
    pub gain: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Scalar> LayerNormParams<S> {
    fn ones(d: usize) -> Self {
        LayerNormParams { gain: Tensor::full(&[d], S::ONE), bias: Tensor::zeros(&[d]) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<S: Scalar = f32> {
    pub ln1: LayerNormParams<S>,
    pub wq: Tensor<S>,
    pub bq: Tensor<S>,
    pub wk: Tensor<S>,
    pub bk: Tensor<S>,
    pub wv: Tensor<S>,
    pub bv: Tensor<S>,
    pub wo: Tensor<S>,
    pub bo: Tensor<S>,
    pub ln2: LayerNormParams<S>,
    pub w1: Tensor<S>,
    pub b1: Tensor<S>,
    pub w2: Tensor<S>,
    pub b2: Tensor<S>,
}

impl<S: Scalar> BlockParams<S> {
    fn init(d: usize, ffn: usize, rng: &mut SplitMix64) -> Self {
        BlockParams {
            ln1: LayerNormParams::ones(d),
            wq: Tensor::randn(&[d, d], INIT_STD, rng),
            bq: Tensor::zeros(&[d]),
            wk: Tensor::randn(&[d, d], INIT_STD, rng),
            bk: Tensor::zeros(&[d]),
            wv: Tensor::randn(&[d, d], INIT_STD, rng),
            bv: Tensor::zeros(&[d]),
            wo: Tensor::randn(&[d, d], INIT_STD, rng),
            bo: Tensor::zeros(&[d]),
            ln2: LayerNormParams::ones(d),
            w1: Tensor::randn(&[d, ffn], INIT_STD, rng),
            b1: Tensor::zeros(&[ffn]),
            w2: Tensor::randn(&[ffn, d], INIT_STD, rng),
            b2: Tensor::zeros(&[d]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams<S: Scalar = f32> {
    pub w1: Tensor<S>,
    pub b1: Tensor<S>,
    pub w2: Tensor<S>,
    pub b2: Tensor<S>,
}

impl<S: Scalar> HeadParams<S> {
    fn init(d: usize, hidden: usize, rng: &mut SplitMix64) -> Self {
        HeadParams {
            w1: Tensor::randn(&[d, hidden], INIT_STD, rng),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::randn(&[hidden, 1], INIT_STD, rng),
            b2: Tensor::zeros(&[1]),
        }
    }
}

/// Query-conditioned encoder parameters. Query tokens and history tokens
/// index the same embedding table; both heads read the position-0 vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<S: Scalar = f32> {
    pub cfg: EncoderConfig,
    pub embed: Tensor<S>,
    pub pos: Tensor<S>,
    pub blocks: Vec<BlockParams<S>>,
    pub final_ln: LayerNormParams<S>,
    pub occ_head: HeadParams<S>,
    pub cens_head: HeadParams<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams<S: Scalar = f32> {
    pub cfg: DecoderConfig,
    pub embed: Tensor<S>,
    pub pos: Tensor<S>,
    pub blocks: Vec<BlockParams<S>>,
    pub final_ln: LayerNormParams<S>,
    pub lm_w: Tensor<S>,
    pub lm_b: Tensor<S>,
}

impl<S: Scalar> EncoderParams<S> {
    pub fn init(cfg: &EncoderConfig, seed: u64) -> Self {
        cfg.validate();
        let mut rng = SplitMix64::derive(seed, &[0x494E4954]); // "INIT"
        EncoderParams {
            cfg: cfg.clone(),
            embed: Tensor::randn(&[cfg.vocab_size, cfg.d_model], INIT_STD, &mut rng),
            pos: Tensor::randn(&[cfg.max_len, cfg.d_model], INIT_STD, &mut rng),
            blocks: (0..cfg.layers)
                .map(|_| BlockParams::init(cfg.d_model, cfg.ffn_hidden(), &mut rng))
                .collect(),
            final_ln: LayerNormParams::ones(cfg.d_model),
            occ_head: HeadParams::init(cfg.d_model, cfg.head_mlp_hidden, &mut rng),
            cens_head: HeadParams::init(cfg.d_model, cfg.head_mlp_hidden, &mut rng),
        }
    }

    pub fn cast<T: Scalar>(&self) -> EncoderParams<T> {
        EncoderParams {
            cfg: self.cfg.clone(),
            embed: self.embed.cast(),
            pos: self.pos.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockParams {
                    ln1: LayerNormParams { gain: b.ln1.gain.cast(), bias: b.ln1.bias.cast() },
                    wq: b.wq.cast(),
                    bq: b.bq.cast(),
                    wk: b.wk.cast(),
                    bk: b.bk.cast(),
                    wv: b.wv.cast(),
                    bv: b.bv.cast(),
                    wo: b.wo.cast(),
                    bo: b.bo.cast(),
                    ln2: LayerNormParams { gain: b.ln2.gain.cast(), bias: b.ln2.bias.cast() },
                    w1: b.w1.cast(),
                    b1: b.b1.cast(),
                    w2: b.w2.cast(),
                    b2: b.b2.cast(),
                })
                .collect(),
            final_ln: LayerNormParams {
                gain: self.final_ln.gain.cast(),
                bias: self.final_ln.bias.cast(),
            },
            occ_head: HeadParams {
                w1: self.occ_head.w1.cast(),
                b1: self.occ_head.b1.cast(),
                w2: self.occ_head.w2.cast(),
                b2: self.occ_head.b2.cast(),
            },
            cens_head: HeadParams {
                w1: self.cens_head.w1.cast(),
                b1: self.cens_head.b1.cast(),
                w2: self.cens_head.w2.cast(),
                b2: self.cens_head.b2.cast(),
            },
        }
    }
}

impl<S: Scalar> DecoderParams<S> {
    pub fn init(cfg: &DecoderConfig, seed: u64) -> Self {
        cfg.validate();
        let mut rng = SplitMix64::derive(seed, &[0x494E4954, 2]);
        DecoderParams {
            cfg: cfg.clone(),
            embed: Tensor::randn(&[cfg.vocab_size, cfg.d_model], INIT_STD, &mut rng),
            pos: Tensor::randn(&[cfg.max_positions, cfg.d_model], INIT_STD, &mut rng),
            blocks: (0..cfg.layers)
                .map(|_| BlockParams::init(cfg.d_model, cfg.ffn_hidden(), &mut rng))
                .collect(),
            final_ln: LayerNormParams::ones(cfg.d_model),
            lm_w: Tensor::randn(&[cfg.d_model, cfg.vocab_size], INIT_STD, &mut rng),
            lm_b: Tensor::zeros(&[cfg.vocab_size]),
        }
    }
}

/// Parameter walk order is fixed and shared between gradient collection,
/// optimizer state, and checkpoints; the bool marks no-decay parameters
/// (biases and layer norms).
fn walk_common<'a, S: Scalar>(
    embed: &'a Tensor<S>,
    pos: &'a Tensor<S>,
    blocks: &'a [BlockParams<S>],
    final_ln: &'a LayerNormParams<S>,
) -> Vec<(String, &'a Tensor<S>, bool)> {
    let mut out: Vec<(String, &Tensor<S>, bool)> =
        vec![("embed".into(), embed, false), ("pos".into(), pos, false)];
    for (i, b) in blocks.iter().enumerate() {
        let p = |s: &str| format!("block{i}.{s}");
        out.extend([
            (p("ln1.gain"), &b.ln1.gain, true),
            (p("ln1.bias"), &b.ln1.bias, true),
            (p("wq"), &b.wq, false),
            (p("bq"), &b.bq, true),
            (p("wk"), &b.wk, false),
            (p("bk"), &b.bk, true),
            (p("wv"), &b.wv, false),
            (p("bv"), &b.bv, true),
            (p("wo"), &b.wo, false),
            (p("bo"), &b.bo, true),
            (p("ln2.gain"), &b.ln2.gain, true),
            (p("ln2.bias"), &b.ln2.bias, true),
            (p("w1"), &b.w1, false),
            (p("b1"), &b.b1, true),
            (p("w2"), &b.w2, false),
            (p("b2"), &b.b2, true),
        ]);
    }
    out.push(("final_ln.gain".into(), &final_ln.gain, true));
    out.push(("final_ln.bias".into(), &final_ln.bias, true));
    out
}

fn walk_common_mut<'a, S: Scalar>(
    embed: &'a mut Tensor<S>,
    pos: &'a mut Tensor<S>,
    blocks: &'a mut [BlockParams<S>],
    final_ln: &'a mut LayerNormParams<S>,
) -> Vec<(String, &'a mut Tensor<S>, bool)> {
    let mut out: Vec<(String, &mut Tensor<S>, bool)> =
        vec![("embed".into(), embed, false), ("pos".into(), pos, false)];
    for (i, b) in blocks.iter_mut().enumerate() {
        let p = |s: &str| format!("block{i}.{s}");
        out.push((p("ln1.gain"), &mut b.ln1.gain, true));
        out.push((p("ln1.bias"), &mut b.ln1.bias, true));
        out.push((p("wq"), &mut b.wq, false));
        out.push((p("bq"), &mut b.bq, true));
        out.push((p("wk"), &mut b.wk, false));
        out.push((p("bk"), &mut b.bk, true));
        out.push((p("wv"), &mut b.wv, false));
        out.push((p("bv"), &mut b.bv, true));
        out.push((p("wo"), &mut b.wo, false));
        out.push((p("bo"), &mut b.bo, true));
        out.push((p("ln2.gain"), &mut b.ln2.gain, true));
        out.push((p("ln2.bias"), &mut b.ln2.bias, true));
        out.push((p("w1"), &mut b.w1, false));
        out.push((p("b1"), &mut b.b1, true));
        out.push((p("w2"), &mut b.w2, false));
        out.push((p("b2"), &mut b.b2, true));
    }
    out.push(("final_ln.gain".into(), &mut final_ln.gain, true));
    out.push(("final_ln.bias".into(), &mut final_ln.bias, true));
    out
}

impl<S: Scalar> EncoderParams<S> {
    pub fn named(&self) -> Vec<(String, &Tensor<S>, bool)> {
        let mut out = walk_common(&self.embed, &self.pos, &self.blocks, &self.final_ln);
        for (tag, h) in [("occ_head", &self.occ_head), ("cens_head", &self.cens_head)] {
            out.push((format!("{tag}.w1"), &h.w1, false));
            out.push((format!("{tag}.b1"), &h.b1, true));
            out.push((format!("{tag}.w2"), &h.w2, false));
            out.push((format!("{tag}.b2"), &h.b2, true));
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<S>, bool)> {
        let EncoderParams { embed, pos, blocks, final_ln, occ_head, cens_head, .. } = self;
        let mut out = walk_common_mut(embed, pos, blocks, final_ln);
        for (tag, h) in [("occ_head", occ_head), ("cens_head", cens_head)] {
            out.push((format!("{tag}.w1"), &mut h.w1, false));
            out.push((format!("{tag}.b1"), &mut h.b1, true));
            out.push((format!("{tag}.w2"), &mut h.w2, false));
            out.push((format!("{tag}.b2"), &mut h.b2, true));
        }
        out
    }

    pub fn param_total(&self) -> usize {
        self.named().iter().map(|(_, t, _)| t.numel()).sum()
    }
}

impl<S: Scalar> DecoderParams<S> {
    pub fn named(&self) -> Vec<(String, &Tensor<S>, bool)> {
        let mut out = walk_common(&self.embed, &self.pos, &self.blocks, &self.final_ln);
        out.push(("lm_w".into(), &self.lm_w, false));
        out.push(("lm_b".into(), &self.lm_b, true));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<S>, bool)> {
        let DecoderParams { embed, pos, blocks, final_ln, lm_w, lm_b, .. } = self;
        let mut out = walk_common_mut(embed, pos, blocks, final_ln);
        out.push(("lm_w".into(), &mut *lm_w, false));
        out.push(("lm_b".into(), &mut *lm_b, true));
        out
    }

    pub fn param_total(&self) -> usize {
        self.named().iter().map(|(_, t, _)| t.numel()).sum()
    }
}
