//! Task-conditioned pretraining: random (patient, time, query) triples with
//! censoring-aware masked loss, plus next-token training for the
//! autoregressive baseline. One sample is one freshly drawn triple; there
//! is no epoch bookkeeping. All randomness is derived from the master seed
//! through named streams.

use crate::eventio::{tokenize_record, CodeVocab, EventIoError, TokenId};
use crate::model::{
    decoder_forward, encoder_forward, DecoderConfig, DecoderParams, DecoderVars, EncoderConfig,
    EncoderParams, EncoderVars, ForwardMode,
};
use crate::synthgen::{CodeId, PatientRecord, HOURS_PER_DAY};
use tensorcore::optim::{adamw_step, lr_at_step, AdamHyper, AdamState, OptimError};
use tensorcore::rng::SplitMix64;
use tensorcore::{Tape, Var};
use thiserror::Error;

const STREAM_QUERY_DIST: u64 = 0x5144; // "QD"
const STREAM_BATCH: u64 = 0x4241;
const STREAM_DROPOUT: u64 = 0x4452;
const STREAM_VAL: u64 = 0x564C;
const STREAM_INIT: u64 = 0x494E;

/// A (target code, horizon) pair; the task specification prepended to the
/// model input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Query {
    pub code: CodeId,
    pub horizon_days: f64,
}

/// Codes sampled as pretraining query targets vs. codes held out from the
/// query distribution (still present in histories).
#[derive(Debug, Clone, PartialEq)]
pub struct QueryDistribution {
    pub id_codes: Vec<CodeId>,
    pub ood_codes: Vec<CodeId>,
}

impl QueryDistribution {
    pub fn is_id(&self, code: CodeId) -> bool {
        self.id_codes.binary_search(&code).is_ok()
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no eligible prediction time in cohort (min_events = {0})")]
    NoEligible(usize),
    #[error("non-finite loss at step {step} (batch seed {batch_seed:#x})")]
    NonFiniteLoss { step: u64, batch_seed: u64 },
    #[error(transparent)]
    EventIo(#[from] EventIoError),
    #[error(transparent)]
    Optim(#[from] OptimError),
}

/// Uniform without-replacement sample of `n_id` query-target codes from the
/// code vocabulary; the rest are held out.
pub fn build_query_distribution(
    vocab: &CodeVocab,
    n_id: usize,
    seed: u64,
) -> QueryDistribution {
    let codes = vocab.code_ids();
    assert!(
        n_id > 0 && n_id <= codes.len(),
        "n_id must be in 1..={}, got {n_id}",
        codes.len()
    );
    let mut rng = SplitMix64::derive(seed, &[STREAM_QUERY_DIST]);
    let picked = rng.sample_without_replacement(codes.len(), n_id);
    let mut id_codes = Vec::with_capacity(n_id);
    let mut ood_codes = Vec::with_capacity(codes.len() - n_id);
    let mut next_pick = picked.iter().peekable();
    for (i, &c) in codes.iter().enumerate() {
        if next_pick.peek() == Some(&&i) {
            id_codes.push(c);
            next_pick.next();
        } else {
            ood_codes.push(c);
        }
    }
    QueryDistribution { id_codes, ood_codes }
}

/// Censoring and occurrence labels at a prediction time. Censored means the
/// record's last timestamp falls before `t_L + horizon`; the occurrence
/// label exists only for uncensored samples and is 1 iff the queried code
/// occurs strictly after `t_L` and no later than `t_L + horizon`.
pub fn compute_label(
    record: &PatientRecord,
    prediction_index: usize,
    query: &Query,
) -> (bool, Option<bool>) {
    assert!(prediction_index < record.events.len(), "prediction index outside record");
    let t_l = record.events[prediction_index].time_h;
    let horizon_end = t_l + query.horizon_days * HOURS_PER_DAY;
    if record.last_time() < horizon_end {
        return (true, None);
    }
    let occurs = record.events[prediction_index + 1..]
        .iter()
        .take_while(|e| e.time_h <= horizon_end)
        .any(|e| e.time_h > t_l && e.code == query.code);
    (false, Some(occurs))
}

/// Tokenized context plus query and labels for one training example.
#[derive(Debug, Clone)]
pub struct LabeledSample {
    pub subject_id: u64,
    pub prediction_index: usize,
    pub context_tokens: Vec<TokenId>,
    pub query_token: TokenId,
    pub query_code: CodeId,
    pub y_cens: bool,
    /// Defined only when `y_cens` is false.
    pub y_occurs: Option<bool>,
}

#[derive(Debug, Clone, Copy)]
pub struct SampleSettings {
    /// Minimum events at or before an eligible prediction time.
    pub min_events: usize,
    pub horizon_days: f64,
    /// Token budget for the context (model max_len minus the query slot).
    pub context_tokens: usize,
}

/// Pre-indexed cohort for repeated sampling: patients with at least one
/// eligible prediction position.
pub struct TrainingPool<'a> {
    cohort: &'a [PatientRecord],
    eligible: Vec<u32>,
    pub settings: SampleSettings,
}

impl<'a> TrainingPool<'a> {
    pub fn new(cohort: &'a [PatientRecord], settings: SampleSettings) -> Result<Self, TrainError> {
        let eligible: Vec<u32> = cohort
            .iter()
            .enumerate()
            .filter(|(_, r)| r.events.len() >= settings.min_events)
            .map(|(i, _)| i as u32)
            .collect();
        if eligible.is_empty() {
            return Err(TrainError::NoEligible(settings.min_events));
        }
        Ok(TrainingPool { cohort, eligible, settings })
    }

    /// Draws a patient uniformly among eligible patients, a prediction time
    /// uniformly among its eligible positions, and a query code uniformly
    /// over the id set.
    pub fn sample(
        &self,
        dist: &QueryDistribution,
        vocab: &CodeVocab,
        rng: &mut SplitMix64,
    ) -> Result<LabeledSample, TrainError> {
        let rec_idx = self.eligible[rng.next_below(self.eligible.len() as u64) as usize];
        let record = &self.cohort[rec_idx as usize];
        // Positions with at least min_events events at or before them.
        let first = self.settings.min_events - 1;
        let span = record.events.len() - first;
        let prediction_index = first + rng.next_below(span as u64) as usize;
        let query_code = dist.id_codes[rng.next_below(dist.id_codes.len() as u64) as usize];
        let query = Query { code: query_code, horizon_days: self.settings.horizon_days };
        let (y_cens, y_occurs) = compute_label(record, prediction_index, &query);
        let tk = tokenize_record(record, vocab, prediction_index, self.settings.context_tokens)?;
        Ok(LabeledSample {
            subject_id: record.subject_id,
            prediction_index,
            context_tokens: tk.tokens,
            query_token: vocab.code_token(query_code)?,
            query_code,
            y_cens,
            y_occurs,
        })
    }
}

/// One-shot form of [`TrainingPool::sample`].
pub fn sample_training_example(
    cohort: &[PatientRecord],
    dist: &QueryDistribution,
    vocab: &CodeVocab,
    settings: SampleSettings,
    rng: &mut SplitMix64,
) -> Result<LabeledSample, TrainError> {
    TrainingPool::new(cohort, settings)?.sample(dist, vocab, rng)
}

/// Masked multi-task loss for one sample:
/// `BCE(cens_logit, y_cens) + lambda * (1 - y_cens) * BCE(occ_logit, y_occurs)`.
/// For censored samples the occurrence term never enters the graph, so the
/// occurrence logit's gradient is exactly zero.
pub fn masked_loss(
    tape: &mut Tape<f32>,
    occ_logit: Var,
    cens_logit: Var,
    y_occurs: Option<bool>,
    y_cens: bool,
    lambda: f64,
) -> Var {
    assert_eq!(y_occurs.is_some(), !y_cens, "occurrence label present iff uncensored");
    masked_loss_batch(tape, occ_logit, cens_logit, &[y_occurs], &[y_cens], lambda)
}

/// Batched masked loss, averaged over the batch.
pub fn masked_loss_batch(
    tape: &mut Tape<f32>,
    occ_logits: Var,
    cens_logits: Var,
    y_occurs: &[Option<bool>],
    y_cens: &[bool],
    lambda: f64,
) -> Var {
    assert!(lambda >= 0.0);
    let b = y_cens.len();
    assert_eq!(y_occurs.len(), b);
    assert_eq!(tape.value(occ_logits).numel(), b);
    assert_eq!(tape.value(cens_logits).numel(), b);
    let cens_targets: Vec<f32> = y_cens.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect();
    let cens_losses = tape.bce_with_logits(cens_logits, &cens_targets);
    let w = vec![1.0 / b as f32; b];
    let loss_cens = tape.weighted_sum(cens_losses, &w);

    let unc_rows: Vec<u32> = (0..b as u32).filter(|&i| !y_cens[i as usize]).collect();
    if unc_rows.is_empty() || lambda == 0.0 {
        return loss_cens;
    }
    let occ_targets: Vec<f32> = unc_rows
        .iter()
        .map(|&i| {
            let y = y_occurs[i as usize].expect("uncensored sample must carry a label");
            if y {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    let occ_sub = tape.select_rows(occ_logits, &unc_rows);
    let occ_losses = tape.bce_with_logits(occ_sub, &occ_targets);
    let w_occ = vec![(lambda / b as f64) as f32; unc_rows.len()];
    let loss_occ = tape.weighted_sum(occ_losses, &w_occ);
    tape.add(loss_cens, loss_occ)
}

/// Training-loop hyperparameters shared by both models.
#[derive(Debug, Clone)]
pub struct TrainHyper {
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub max_steps: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub val_every: u64,
    /// Checks without sufficient improvement before stopping.
    pub patience: u32,
    pub min_delta: f64,
    pub lambda_occ: f64,
    pub min_events: usize,
    pub horizon_days: f64,
    pub val_set_size: usize,
    /// Decoder training window in tokens.
    pub ar_window: usize,
    pub ar_batch_size: usize,
    pub ar_val_windows: usize,
    pub master_seed: u64,
}

impl TrainHyper {
    fn adam(&self, lr: f64) -> AdamHyper {
        AdamHyper {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// One line per validation check: `step,train_loss,val_loss,lr`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValCheck {
    pub step: u64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub checks: Vec<ValCheck>,
    pub best_step: u64,
    pub best_val: f64,
    pub stopped_early: bool,
    pub final_step: u64,
}

impl TrainLog {
    pub fn render(&self) -> String {
        let mut out = String::from("step,train_loss,val_loss,lr\n");
        for c in &self.checks {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6e}\n",
                c.step, c.train_loss, c.val_loss, c.lr
            ));
        }
        out
    }
}

/// Early-stopping bookkeeping: an improvement must beat the best value by
/// more than `min_delta` to reset the patience counter.
struct EarlyStop {
    best: f64,
    best_step: u64,
    misses: u32,
    patience: u32,
    min_delta: f64,
}

impl EarlyStop {
    fn new(patience: u32, min_delta: f64) -> Self {
        EarlyStop { best: f64::INFINITY, best_step: 0, misses: 0, patience, min_delta }
    }

    /// Returns (improved, should_stop).
    fn observe(&mut self, step: u64, val: f64) -> (bool, bool) {
        if self.best - val > self.min_delta {
            self.best = val;
            self.best_step = step;
            self.misses = 0;
            (true, false)
        } else {
            self.misses += 1;
            (false, self.misses >= self.patience)
        }
    }
}

fn encoder_row(query_token: TokenId, ctx: &[TokenId], max_len: usize, pad: TokenId) -> Vec<u32> {
    debug_assert!(ctx.len() <= max_len - 1);
    let mut row = Vec::with_capacity(max_len);
    row.push(query_token);
    row.extend_from_slice(ctx);
    row.resize(max_len, pad);
    row
}

/// Packs samples into a fixed-shape [batch, max_len] token matrix.
pub fn pack_encoder_batch(
    samples: &[LabeledSample],
    max_len: usize,
    pad: TokenId,
) -> (Vec<u32>, Vec<Option<bool>>, Vec<bool>) {
    let mut tokens = Vec::with_capacity(samples.len() * max_len);
    for s in samples {
        tokens.extend(encoder_row(s.query_token, &s.context_tokens, max_len, pad));
    }
    let y_occ: Vec<Option<bool>> = samples.iter().map(|s| s.y_occurs).collect();
    let y_cens: Vec<bool> = samples.iter().map(|s| s.y_cens).collect();
    (tokens, y_occ, y_cens)
}

fn eq_eval_loss(
    params: &EncoderParams<f32>,
    val_set: &[LabeledSample],
    batch_size: usize,
    pad: TokenId,
    lambda: f64,
) -> f64 {
    let cfg = &params.cfg;
    let mut total = 0.0;
    let mut n = 0usize;
    for chunk in val_set.chunks(batch_size) {
        let (tokens, y_occ, y_cens) = pack_encoder_batch(chunk, cfg.max_len, pad);
        let mut tape = Tape::<f32>::no_grad();
        let vars = EncoderVars::load(&mut tape, params, false);
        let out = encoder_forward(
            &mut tape,
            cfg,
            &vars,
            &tokens,
            chunk.len(),
            cfg.max_len,
            pad,
            &mut ForwardMode::Eval,
        );
        let loss =
            masked_loss_batch(&mut tape, out.occ, out.cens, &y_occ, &y_cens, lambda);
        total += tape.value(loss).item() as f64 * chunk.len() as f64;
        n += chunk.len();
    }
    total / n as f64
}

/// Trains the query-conditioned encoder; returns the parameters at the best
/// validation loss and the training log. Deterministic under the master
/// seed.
pub fn train_eq(
    cohort_train: &[PatientRecord],
    cohort_val: &[PatientRecord],
    dist: &QueryDistribution,
    vocab: &CodeVocab,
    cfg: &EncoderConfig,
    hyper: &TrainHyper,
) -> Result<(EncoderParams<f32>, TrainLog), TrainError> {
    assert!(!cohort_train.is_empty() && !cohort_val.is_empty());
    let pad = vocab.pad_token();
    let settings = SampleSettings {
        min_events: hyper.min_events,
        horizon_days: hyper.horizon_days,
        context_tokens: cfg.max_len - 1,
    };
    let train_pool = TrainingPool::new(cohort_train, settings)?;
    let val_pool = TrainingPool::new(cohort_val, settings)?;

    // Frozen validation set, drawn once at startup.
    let mut val_rng = SplitMix64::derive(hyper.master_seed, &[STREAM_VAL]);
    let val_set: Vec<LabeledSample> = (0..hyper.val_set_size)
        .map(|_| val_pool.sample(dist, vocab, &mut val_rng))
        .collect::<Result<_, _>>()?;

    let mut params = EncoderParams::<f32>::init(cfg, SplitMix64::derive(hyper.master_seed, &[STREAM_INIT]).state());
    let mut opt_state = {
        let named = params.named();
        AdamState::new(&named.iter().map(|(_, t, _)| *t).collect::<Vec<_>>())
    };
    let no_decay: Vec<bool> = params.named().iter().map(|(_, _, nd)| *nd).collect();

    let mut log = TrainLog::default();
    let mut stopper = EarlyStop::new(hyper.patience, hyper.min_delta);
    let mut best_params = params.clone();
    let mut window_loss = 0.0;
    let mut window_n = 0u64;

    for step in 1..=hyper.max_steps {
        let lr = lr_at_step(step, hyper.warmup_steps, hyper.max_steps, hyper.peak_lr);
        let mut batch_rng = SplitMix64::derive(hyper.master_seed, &[STREAM_BATCH, step]);
        let batch_seed = batch_rng.state();
        let samples: Vec<LabeledSample> = (0..hyper.batch_size)
            .map(|_| train_pool.sample(dist, vocab, &mut batch_rng))
            .collect::<Result<_, _>>()?;
        let (tokens, y_occ, y_cens) = pack_encoder_batch(&samples, cfg.max_len, pad);

        let mut tape = Tape::<f32>::new();
        let vars = EncoderVars::load(&mut tape, &params, true);
        let mut drop_rng = SplitMix64::derive(hyper.master_seed, &[STREAM_DROPOUT, step]);
        let out = encoder_forward(
            &mut tape,
            cfg,
            &vars,
            &tokens,
            samples.len(),
            cfg.max_len,
            pad,
            &mut ForwardMode::Train { dropout_rng: &mut drop_rng },
        );
        let loss = masked_loss_batch(&mut tape, out.occ, out.cens, &y_occ, &y_cens, hyper.lambda_occ);
        let loss_val = tape.value(loss).item() as f64;
        if !loss_val.is_finite() {
            return Err(TrainError::NonFiniteLoss { step, batch_seed });
        }
        tape.backward(loss);
        let grads: Vec<&[f32]> = vars.param_list.iter().map(|&v| tape.grad(v)).collect();
        {
            let mut named = params.named_mut();
            let mut refs: Vec<&mut tensorcore::Tensor<f32>> =
                named.iter_mut().map(|(_, t, _)| &mut **t).collect();
            adamw_step(&mut refs, &grads, &no_decay, &mut opt_state, step, &hyper.adam(lr))?;
        }
        window_loss += loss_val;
        window_n += 1;

        if step % hyper.val_every == 0 || step == hyper.max_steps {
            let val_loss = eq_eval_loss(&params, &val_set, hyper.batch_size, pad, hyper.lambda_occ);
            let train_loss = window_loss / window_n as f64;
            window_loss = 0.0;
            window_n = 0;
            log.checks.push(ValCheck { step, train_loss, val_loss, lr });
            let (improved, stop) = stopper.observe(step, val_loss);
            if improved {
                best_params = params.clone();
            }
            log.final_step = step;
            if stop {
                log.stopped_early = true;
                break;
            }
        }
    }
    log.best_step = stopper.best_step;
    log.best_val = stopper.best;
    if log.final_step == 0 {
        log.final_step = hyper.max_steps;
    }
    Ok((best_params, log))
}

// ---- decoder training -------------------------------------------------------

/// A training window for the decoder: tokens plus next-token targets
/// (-1 where no target exists).
fn ar_window(
    record: &PatientRecord,
    vocab: &CodeVocab,
    window: usize,
    pad: TokenId,
    rng: &mut SplitMix64,
) -> Result<(Vec<u32>, Vec<i64>), TrainError> {
    let tk = tokenize_record(record, vocab, record.events.len() - 1, usize::MAX >> 1)?;
    let full = &tk.tokens;
    let slice: Vec<u32> = if full.len() > window {
        let start = rng.next_below((full.len() - window + 1) as u64) as usize;
        full[start..start + window].to_vec()
    } else {
        full.clone()
    };
    let real = slice.len();
    let mut tokens = slice;
    tokens.resize(window, pad);
    let targets: Vec<i64> = (0..window)
        .map(|t| if t + 1 < real { tokens[t + 1] as i64 } else { -1 })
        .collect();
    Ok((tokens, targets))
}

fn ar_batch(
    cohort: &[PatientRecord],
    eligible: &[u32],
    vocab: &CodeVocab,
    window: usize,
    batch: usize,
    pad: TokenId,
    rng: &mut SplitMix64,
) -> Result<(Vec<u32>, Vec<i64>), TrainError> {
    let mut tokens = Vec::with_capacity(batch * window);
    let mut targets = Vec::with_capacity(batch * window);
    for _ in 0..batch {
        let idx = eligible[rng.next_below(eligible.len() as u64) as usize];
        let (t, y) = ar_window(&cohort[idx as usize], vocab, window, pad, rng)?;
        tokens.extend(t);
        targets.extend(y);
    }
    Ok((tokens, targets))
}

fn ar_loss(
    tape: &mut Tape<f32>,
    logits: Var,
    targets: &[i64],
) -> Var {
    let losses = tape.cross_entropy_logits(logits, targets);
    let n_valid = targets.iter().filter(|&&t| t >= 0).count().max(1);
    let w: Vec<f32> =
        targets.iter().map(|&t| if t >= 0 { 1.0 / n_valid as f32 } else { 0.0 }).collect();
    tape.weighted_sum(losses, &w)
}

fn ar_eval_loss(
    params: &DecoderParams<f32>,
    val_windows: &[(Vec<u32>, Vec<i64>)],
    pad: TokenId,
) -> f64 {
    let cfg = &params.cfg;
    let mut total = 0.0;
    for (tokens, targets) in val_windows {
        let mut tape = Tape::<f32>::no_grad();
        let vars = DecoderVars::load(&mut tape, params, false);
        let logits = decoder_forward(
            &mut tape,
            cfg,
            &vars,
            tokens,
            1,
            tokens.len(),
            pad,
            &mut ForwardMode::Eval,
        );
        let loss = ar_loss(&mut tape, logits, targets);
        total += tape.value(loss).item() as f64;
    }
    total / val_windows.len() as f64
}

/// Trains the causal decoder with next-token cross-entropy over randomly
/// placed windows of tokenized records.
pub fn train_ar(
    cohort_train: &[PatientRecord],
    cohort_val: &[PatientRecord],
    vocab: &CodeVocab,
    cfg: &DecoderConfig,
    hyper: &TrainHyper,
) -> Result<(DecoderParams<f32>, TrainLog), TrainError> {
    assert!(!cohort_train.is_empty() && !cohort_val.is_empty());
    let pad = vocab.pad_token();
    let window = hyper.ar_window.min(cfg.max_positions);
    // Any record with two tokens yields a next-token pair.
    let eligible: Vec<u32> = (0..cohort_train.len() as u32).collect();
    let val_eligible: Vec<u32> = (0..cohort_val.len() as u32).collect();

    let mut val_rng = SplitMix64::derive(hyper.master_seed, &[STREAM_VAL, 2]);
    let mut val_windows = Vec::with_capacity(hyper.ar_val_windows);
    for _ in 0..hyper.ar_val_windows {
        let idx = val_eligible[val_rng.next_below(val_eligible.len() as u64) as usize];
        val_windows.push(ar_window(&cohort_val[idx as usize], vocab, window, pad, &mut val_rng)?);
    }

    let mut params = DecoderParams::<f32>::init(
        cfg,
        SplitMix64::derive(hyper.master_seed, &[STREAM_INIT, 2]).state(),
    );
    let mut opt_state = {
        let named = params.named();
        AdamState::new(&named.iter().map(|(_, t, _)| *t).collect::<Vec<_>>())
    };
    let no_decay: Vec<bool> = params.named().iter().map(|(_, _, nd)| *nd).collect();

    let mut log = TrainLog::default();
    let mut stopper = EarlyStop::new(hyper.patience, hyper.min_delta);
    let mut best_params = params.clone();
    let mut window_loss = 0.0;
    let mut window_n = 0u64;

    for step in 1..=hyper.max_steps {
        let lr = lr_at_step(step, hyper.warmup_steps, hyper.max_steps, hyper.peak_lr);
        let mut batch_rng = SplitMix64::derive(hyper.master_seed, &[STREAM_BATCH, step, 2]);
        let batch_seed = batch_rng.state();
        let (tokens, targets) = ar_batch(
            cohort_train,
            &eligible,
            vocab,
            window,
            hyper.ar_batch_size,
            pad,
            &mut batch_rng,
        )?;
        let mut tape = Tape::<f32>::new();
        let vars = DecoderVars::load(&mut tape, &params, true);
        let mut drop_rng = SplitMix64::derive(hyper.master_seed, &[STREAM_DROPOUT, step, 2]);
        let logits = decoder_forward(
            &mut tape,
            cfg,
            &vars,
            &tokens,
            hyper.ar_batch_size,
            window,
            pad,
            &mut ForwardMode::Train { dropout_rng: &mut drop_rng },
        );
        let loss = ar_loss(&mut tape, logits, &targets);
        let loss_val = tape.value(loss).item() as f64;
        if !loss_val.is_finite() {
            return Err(TrainError::NonFiniteLoss { step, batch_seed });
        }
        tape.backward(loss);
        let grads: Vec<&[f32]> = vars.param_list.iter().map(|&v| tape.grad(v)).collect();
        {
            let mut named = params.named_mut();
            let mut refs: Vec<&mut tensorcore::Tensor<f32>> =
                named.iter_mut().map(|(_, t, _)| &mut **t).collect();
            adamw_step(&mut refs, &grads, &no_decay, &mut opt_state, step, &hyper.adam(lr))?;
        }
        window_loss += loss_val;
        window_n += 1;

        if step % hyper.val_every == 0 || step == hyper.max_steps {
            let val_loss = ar_eval_loss(&params, &val_windows, pad);
            let train_loss = window_loss / window_n as f64;
            window_loss = 0.0;
            window_n = 0;
            log.checks.push(ValCheck { step, train_loss, val_loss, lr });
            let (improved, stop) = stopper.observe(step, val_loss);
            if improved {
                best_params = params.clone();
            }
            log.final_step = step;
            if stop {
                log.stopped_early = true;
                break;
            }
        }
    }
    log.best_step = stopper.best_step;
    log.best_val = stopper.best;
    if log.final_step == 0 {
        log.final_step = hyper.max_steps;
    }
    Ok((best_params, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eventio::{build_vocab, DEFAULT_GAP_BINS};
    use crate::synthgen::Event;

    fn rec(subject: u64, events: &[(f64, CodeId)]) -> PatientRecord {
        PatientRecord {
            subject_id: subject,
            events: events.iter().map(|&(t, c)| Event { time_h: t, code: c }).collect(),
        }
    }

    fn day(d: f64) -> f64 {
        d * 24.0
    }

    #[test]
    fn label_occurrence_inside_window() {
        // Events through day 50, prediction at day 10, query occurs day 25.
        let record = rec(
            0,
            &[(day(0.0), 0), (day(10.0), 1), (day(25.0), 2), (day(50.0), 0)],
        );
        let q = Query { code: 2, horizon_days: 30.0 };
        assert_eq!(compute_label(&record, 1, &q), (false, Some(true)));
    }

    #[test]
    fn label_censored_when_record_ends_early() {
        let record = rec(0, &[(day(0.0), 0), (day(10.0), 1), (day(20.0), 2)]);
        let q = Query { code: 2, horizon_days: 30.0 };
        assert_eq!(compute_label(&record, 1, &q), (true, None));
    }

    #[test]
    fn label_requires_strictly_future_occurrence() {
        // The query code occurs only before the prediction time.
        let record = rec(
            0,
            &[(day(0.0), 7), (day(10.0), 1), (day(45.0), 0)],
        );
        let q = Query { code: 7, horizon_days: 30.0 };
        assert_eq!(compute_label(&record, 1, &q), (false, Some(false)));
    }

    #[test]
    fn label_boundary_is_inclusive_at_horizon_end() {
        let record = rec(0, &[(day(0.0), 0), (day(30.0), 3), (day(40.0), 1)]);
        let q = Query { code: 3, horizon_days: 30.0 };
        // Occurrence exactly at t_L + 30d counts; record extends to day 40
        // which is >= day 30, so uncensored.
        assert_eq!(compute_label(&record, 0, &q), (false, Some(true)));
    }

    #[test]
    fn label_matches_brute_force_scan() {
        // Independent oracle: scan all events with both index and time
        // conditions, no early exit.
        fn brute(record: &PatientRecord, idx: usize, q: &Query) -> (bool, Option<bool>) {
            let t_l = record.events[idx].time_h;
            let end = t_l + q.horizon_days * 24.0;
            if record.events.iter().map(|e| e.time_h).fold(f64::NEG_INFINITY, f64::max) < end {
                return (true, None);
            }
            let mut hit = false;
            for (j, e) in record.events.iter().enumerate() {
                if j > idx && e.code == q.code && e.time_h > t_l && e.time_h <= end {
                    hit = true;
                }
            }
            (false, Some(hit))
        }
        let mut rng = SplitMix64::new(2024);
        for _ in 0..10_000 {
            let n = 2 + rng.next_below(40) as usize;
            let mut t = 0.0;
            let events: Vec<(f64, CodeId)> = (0..n)
                .map(|_| {
                    t += rng.next_exp(30.0);
                    (t, rng.next_below(6) as CodeId)
                })
                .collect();
            let record = rec(0, &events);
            let idx = rng.next_below(n as u64) as usize;
            let q = Query {
                code: rng.next_below(6) as CodeId,
                horizon_days: 0.5 + rng.next_f64() * 10.0,
            };
            assert_eq!(compute_label(&record, idx, &q), brute(&record, idx, &q));
        }
    }

    fn toy_cohort(n: usize, len: usize) -> Vec<PatientRecord> {
        let mut rng = SplitMix64::new(5);
        (0..n as u64)
            .map(|s| {
                let mut t = 0.0;
                let events: Vec<(f64, CodeId)> = (0..len)
                    .map(|_| {
                        t += rng.next_exp(12.0);
                        (t, rng.next_below(8) as CodeId)
                    })
                    .collect();
                rec(s, &events)
            })
            .collect()
    }

    #[test]
    fn query_distribution_boundary_and_counts() {
        let cohort = toy_cohort(10, 60);
        let vocab = build_vocab(&cohort, &DEFAULT_GAP_BINS).unwrap();
        let n_codes = vocab.n_codes();
        let all = build_query_distribution(&vocab, n_codes, 3);
        assert!(all.ood_codes.is_empty());
        let dist = build_query_distribution(&vocab, n_codes - 3, 3);
        assert_eq!(dist.id_codes.len(), n_codes - 3);
        assert_eq!(dist.ood_codes.len(), 3);
        for c in &dist.ood_codes {
            assert!(!dist.id_codes.contains(c));
        }
        let again = build_query_distribution(&vocab, n_codes - 3, 3);
        assert_eq!(dist, again);
    }

    #[test]
    fn sampled_queries_stay_in_support_and_uniform() {
        let cohort = toy_cohort(30, 80);
        let vocab = build_vocab(&cohort, &DEFAULT_GAP_BINS).unwrap();
        let dist = build_query_distribution(&vocab, 6, 11);
        let settings =
            SampleSettings { min_events: 20, horizon_days: 30.0, context_tokens: 63 };
        let pool = TrainingPool::new(&cohort, settings).unwrap();
        let mut rng = SplitMix64::new(77);
        let draws = 100_000;
        let mut counts = std::collections::BTreeMap::new();
        for _ in 0..draws {
            let s = pool.sample(&dist, &vocab, &mut rng).unwrap();
            assert!(dist.id_codes.contains(&s.query_code), "query outside id set");
            assert!(s.context_tokens.len() <= 63);
            assert!(s.prediction_index + 1 >= 20);
            *counts.entry(s.query_code).or_insert(0u64) += 1;
        }
        // Chi-square against uniform over the 6 id codes; critical value for
        // 5 dof at alpha = 0.01 is 15.086.
        let expected = draws as f64 / dist.id_codes.len() as f64;
        let chi2: f64 = dist
            .id_codes
            .iter()
            .map(|c| {
                let o = *counts.get(c).unwrap_or(&0) as f64;
                (o - expected) * (o - expected) / expected
            })
            .sum();
        assert!(chi2 < 15.086, "chi2 = {chi2}");
    }

    #[test]
    fn short_records_never_selected() {
        // With the paper-scale minimum of 50 events, a 40-event patient has
        // no eligible prediction time.
        let mut cohort = toy_cohort(5, 40);
        let long = toy_cohort(1, 80);
        let short_ids: Vec<u64> = cohort.iter().map(|r| r.subject_id).collect();
        cohort.push(rec(99, &long[0].events.iter().map(|e| (e.time_h, e.code)).collect::<Vec<_>>()));
        let vocab = build_vocab(&cohort, &DEFAULT_GAP_BINS).unwrap();
        let dist = build_query_distribution(&vocab, vocab.n_codes(), 1);
        let settings =
            SampleSettings { min_events: 50, horizon_days: 30.0, context_tokens: 63 };
        let pool = TrainingPool::new(&cohort, settings).unwrap();
        let mut rng = SplitMix64::new(8);
        for _ in 0..2000 {
            let s = pool.sample(&dist, &vocab, &mut rng).unwrap();
            assert!(!short_ids.contains(&s.subject_id), "short record selected");
        }
        // And a cohort with only short records has no eligible time at all.
        let only_short = toy_cohort(5, 40);
        assert!(matches!(
            TrainingPool::new(&only_short, settings),
            Err(TrainError::NoEligible(50))
        ));
    }

    #[test]
    fn censoring_rate_matches_direct_timestamp_arithmetic() {
        let cohort = toy_cohort(40, 100);
        let vocab = build_vocab(&cohort, &DEFAULT_GAP_BINS).unwrap();
        let dist = build_query_distribution(&vocab, vocab.n_codes(), 1);
        let settings =
            SampleSettings { min_events: 20, horizon_days: 30.0, context_tokens: 63 };
        let pool = TrainingPool::new(&cohort, settings).unwrap();
        let mut rng = SplitMix64::new(31);
        let mut sampled_cens = 0u64;
        let mut oracle_cens = 0u64;
        let n = 20_000;
        for _ in 0..n {
            let s = pool.sample(&dist, &vocab, &mut rng).unwrap();
            let record = cohort.iter().find(|r| r.subject_id == s.subject_id).unwrap();
            let t_l = record.events[s.prediction_index].time_h;
            let oracle = record.last_time() < t_l + 30.0 * 24.0;
            if s.y_cens {
                sampled_cens += 1;
            }
            if oracle {
                oracle_cens += 1;
            }
            assert_eq!(s.y_cens, oracle, "censor flag disagrees with timestamp arithmetic");
        }
        assert_eq!(sampled_cens, oracle_cens);
    }

    #[test]
    fn masked_loss_values_and_zero_gradient() {
        // Censored: occurrence gradient is exactly zero.
        let mut tape = Tape::<f32>::new();
        let occ = tape.leaf(tensorcore::Tensor::new(&[1], vec![0.7]), true);
        let cens = tape.leaf(tensorcore::Tensor::new(&[1], vec![-0.3]), true);
        let loss = masked_loss(&mut tape, occ, cens, None, true, 1.0);
        tape.backward(loss);
        assert_eq!(tape.grad(occ)[0].to_bits(), 0);
        assert!(tape.grad(cens)[0] != 0.0);

        // Uncensored at logits 0 with lambda 1: loss = 2 ln 2.
        let mut tape = Tape::<f32>::new();
        let occ = tape.leaf(tensorcore::Tensor::new(&[1], vec![0.0]), true);
        let cens = tape.leaf(tensorcore::Tensor::new(&[1], vec![0.0]), true);
        let loss = masked_loss(&mut tape, occ, cens, Some(true), false, 1.0);
        let v = tape.value(loss).item();
        assert!((v - 2.0 * std::f32::consts::LN_2).abs() < 1e-6, "{v}");

        // Lambda 0 reduces to the censoring term alone.
        let mut tape = Tape::<f32>::new();
        let occ = tape.leaf(tensorcore::Tensor::new(&[1], vec![1.3]), true);
        let cens = tape.leaf(tensorcore::Tensor::new(&[1], vec![0.0]), true);
        let loss = masked_loss(&mut tape, occ, cens, Some(false), false, 0.0);
        assert!((tape.value(loss).item() - std::f32::consts::LN_2).abs() < 1e-6);
        tape.backward(loss);
        assert_eq!(tape.grad(occ)[0].to_bits(), 0);
    }

    #[test]
    fn masked_loss_batch_mixes_terms() {
        let mut tape = Tape::<f32>::new();
        let occ = tape.leaf(tensorcore::Tensor::new(&[2], vec![0.0, 5.0]), true);
        let cens = tape.leaf(tensorcore::Tensor::new(&[2], vec![0.0, 0.0]), true);
        let loss = masked_loss_batch(
            &mut tape,
            occ,
            cens,
            &[Some(true), None],
            &[false, true],
            1.0,
        );
        // Sample 0: ln2 (cens) + ln2 (occ); sample 1: ln2 (cens) only.
        let expect = (3.0 * std::f32::consts::LN_2) / 2.0;
        assert!((tape.value(loss).item() - expect).abs() < 1e-6);
        tape.backward(loss);
        assert_eq!(tape.grad(occ)[1].to_bits(), 0, "censored occ grad must be bitwise zero");
        assert!(tape.grad(occ)[0] != 0.0);
    }
}
