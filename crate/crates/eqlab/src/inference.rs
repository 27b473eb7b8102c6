//! The two inference paradigms: single-pass query-conditioned prediction
//! and K-trajectory count estimation, plus disjunctive aggregation for
//! composite tasks and the timing comparison between the two.

use crate::eventio::{tokenize_record, CodeVocab, EventIoError, TokenId};
use crate::model::{
    ar_sample_trajectories, encoder_forward, DecoderParams, EncoderParams, EncoderVars,
    ForwardMode, StopRule, Trajectory,
};
use crate::synthgen::{CodeId, PatientRecord, HOURS_PER_DAY};
use crate::trainer::Query;
use rayon::prelude::*;
use tensorcore::rng::SplitMix64;
use tensorcore::Tape;
use thiserror::Error;

const STREAM_ROLLOUT: u64 = 0x524F4C; // "ROL"

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("probability list is empty")]
    EmptyList,
    #[error("probability {0} outside [0,1]")]
    OutOfRange(f64),
    #[error(transparent)]
    EventIo(#[from] EventIoError),
}

fn sigmoid(x: f32) -> f64 {
    1.0 / (1.0 + (-x as f64).exp())
}

/// Outputs of one query-conditioned forward pass.
#[derive(Debug, Clone)]
pub struct EqOutput {
    pub h0: Vec<f32>,
    pub p_occurs: f64,
    pub p_censored: f64,
}

/// Batched single-pass predictions for many (record, prediction index)
/// pairs under one query. Rows are padded to the fixed context window, so
/// each row's output is independent of batch composition and order.
pub fn eq_forward_batch(
    params: &EncoderParams<f32>,
    vocab: &CodeVocab,
    items: &[(&PatientRecord, usize)],
    query: &Query,
) -> Result<Vec<EqOutput>, InferenceError> {
    let cfg = &params.cfg;
    let pad = vocab.pad_token();
    let query_token = vocab.code_token(query.code)?;
    let mut rows: Vec<Vec<u32>> = Vec::with_capacity(items.len());
    for &(record, idx) in items {
        let tk = tokenize_record(record, vocab, idx, cfg.max_len - 1)?;
        let mut row = Vec::with_capacity(cfg.max_len);
        row.push(query_token);
        row.extend_from_slice(&tk.tokens);
        row.resize(cfg.max_len, pad);
        rows.push(row);
    }
    const BATCH: usize = 64;
    let chunks: Vec<&[Vec<u32>]> = rows.chunks(BATCH).collect();
    let outputs: Vec<Vec<EqOutput>> = chunks
        .into_par_iter()
        .map(|chunk| {
            let flat: Vec<u32> = chunk.iter().flatten().copied().collect();
            let mut tape = Tape::<f32>::no_grad();
            let vars = EncoderVars::load(&mut tape, params, false);
            let out = encoder_forward(
                &mut tape,
                cfg,
                &vars,
                &flat,
                chunk.len(),
                cfg.max_len,
                pad,
                &mut ForwardMode::Eval,
            );
            let d = cfg.d_model;
            let h0 = tape.value(out.h0).data();
            let occ = tape.value(out.occ).data();
            let cens = tape.value(out.cens).data();
            (0..chunk.len())
                .map(|i| EqOutput {
                    h0: h0[i * d..(i + 1) * d].to_vec(),
                    p_occurs: sigmoid(occ[i]),
                    p_censored: sigmoid(cens[i]),
                })
                .collect()
        })
        .collect();
    Ok(outputs.into_iter().flatten().collect())
}

/// Single-pass prediction: sigmoid of the occurrence and censoring logits
/// from exactly one encoder forward.
pub fn eq_predict(
    params: &EncoderParams<f32>,
    vocab: &CodeVocab,
    record: &PatientRecord,
    prediction_index: usize,
    query: &Query,
) -> Result<(f64, f64), InferenceError> {
    let out = eq_forward_batch(params, vocab, &[(record, prediction_index)], query)?;
    Ok((out[0].p_occurs, out[0].p_censored))
}

/// Source of sampled future trajectories; the model-backed implementation
/// can be swapped for a stub with known event probability in tests.
pub trait TrajectorySource: Sync {
    fn sample_batch(&self, seeds: &[u64]) -> Vec<Trajectory>;
}

/// Trajectories from the trained decoder, continuing a patient context.
pub struct ModelTrajectorySource<'a> {
    pub params: &'a DecoderParams<f32>,
    pub vocab: &'a CodeVocab,
    pub context_tokens: Vec<u32>,
    pub temperature: f64,
    pub stop: StopRule,
}

impl TrajectorySource for ModelTrajectorySource<'_> {
    fn sample_batch(&self, seeds: &[u64]) -> Vec<Trajectory> {
        ar_sample_trajectories(
            self.params,
            self.vocab,
            &self.context_tokens,
            seeds,
            self.temperature,
            &self.stop,
        )
    }
}

/// Count estimator over K sampled trajectories: the fraction containing any
/// of the target tokens within the horizon. Always a multiple of 1/K.
pub fn estimate_from_source(
    source: &dyn TrajectorySource,
    target_tokens: &[TokenId],
    horizon_h: f64,
    k: usize,
    rng: &mut SplitMix64,
) -> f64 {
    assert!(k >= 1, "need at least one trajectory");
    let seeds: Vec<u64> = (0..k).map(|_| rng.next_u64()).collect();
    let trajectories = source.sample_batch(&seeds);
    let hits = trajectories
        .iter()
        .filter(|t| t.contains_within(target_tokens, horizon_h))
        .count();
    hits as f64 / k as f64
}

fn model_source<'a>(
    params: &'a DecoderParams<f32>,
    vocab: &'a CodeVocab,
    record: &PatientRecord,
    prediction_index: usize,
    horizon_h: f64,
) -> Result<ModelTrajectorySource<'a>, InferenceError> {
    let tk = tokenize_record(record, vocab, prediction_index, params.cfg.context_len)?;
    Ok(ModelTrajectorySource {
        params,
        vocab,
        context_tokens: tk.tokens,
        temperature: 1.0,
        stop: StopRule { max_new_tokens: params.cfg.generation_budget(), horizon_h },
    })
}

/// Trajectory-sampling probability estimate for a single-code query.
pub fn ar_estimate(
    params: &DecoderParams<f32>,
    vocab: &CodeVocab,
    record: &PatientRecord,
    prediction_index: usize,
    query: &Query,
    k: usize,
    rng: &mut SplitMix64,
) -> Result<f64, InferenceError> {
    let horizon_h = query.horizon_days * HOURS_PER_DAY;
    let source = model_source(params, vocab, record, prediction_index, horizon_h)?;
    let target = vocab.code_token(query.code)?;
    Ok(estimate_from_source(&source, &[target], horizon_h, k, rng))
}

/// Fraction of trajectories containing any code from the set: disjunctions
/// come for free when generating futures.
pub fn ar_disjunction_estimate(
    params: &DecoderParams<f32>,
    vocab: &CodeVocab,
    record: &PatientRecord,
    prediction_index: usize,
    code_set: &[CodeId],
    horizon_days: f64,
    k: usize,
    rng: &mut SplitMix64,
) -> Result<f64, InferenceError> {
    assert!(!code_set.is_empty(), "code set must be nonempty");
    let horizon_h = horizon_days * HOURS_PER_DAY;
    let source = model_source(params, vocab, record, prediction_index, horizon_h)?;
    let targets: Vec<TokenId> =
        code_set.iter().map(|&c| vocab.code_token(c)).collect::<Result<_, _>>()?;
    Ok(estimate_from_source(&source, &targets, horizon_h, k, rng))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggregationStrategy {
    Max,
    Independence,
}

/// Combines per-code probabilities into a disjunction probability: MAX
/// takes the largest, INDEPENDENCE computes 1 - prod(1 - p). Both reduce to
/// the identity on singletons.
pub fn aggregate_disjunction(
    per_code_probs: &[f64],
    strategy: AggregationStrategy,
) -> Result<f64, InferenceError> {
    if per_code_probs.is_empty() {
        return Err(InferenceError::EmptyList);
    }
    for &p in per_code_probs {
        if !(0.0..=1.0).contains(&p) {
            return Err(InferenceError::OutOfRange(p));
        }
    }
    Ok(match strategy {
        AggregationStrategy::Max => per_code_probs.iter().cloned().fold(0.0, f64::max),
        AggregationStrategy::Independence => {
            1.0 - per_code_probs.iter().map(|p| 1.0 - p).product::<f64>()
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InferenceMode {
    Eq,
    Ar,
}

/// Per-patient evaluation workload for the timing comparison: one task over
/// a fixed cohort slice.
pub struct TimingWorkload<'a> {
    pub eq_params: &'a EncoderParams<f32>,
    pub ar_params: &'a DecoderParams<f32>,
    pub vocab: &'a CodeVocab,
    pub patients: Vec<(&'a PatientRecord, usize)>,
    pub query: Query,
    pub k: usize,
    pub eval_seed: u64,
    pub workers: usize,
}

#[derive(Debug, Clone)]
pub struct TimingReport {
    pub mode: InferenceMode,
    pub wall_seconds: f64,
    pub per_patient_ms: f64,
    /// EQ: encoder forward passes (one per patient). AR: trajectories
    /// sampled (K per patient).
    pub forward_pass_count: u64,
    pub workers: usize,
}

/// Wall-clock measurement of one task over the eval cohort in the requested
/// mode, with forward-pass accounting.
pub fn time_inference(
    workload: &TimingWorkload<'_>,
    mode: InferenceMode,
) -> Result<TimingReport, InferenceError> {
    let n = workload.patients.len() as u64;
    let start = std::time::Instant::now();
    let forward_pass_count = match mode {
        InferenceMode::Eq => {
            let out = eq_forward_batch(
                workload.eq_params,
                workload.vocab,
                &workload.patients,
                &workload.query,
            )?;
            assert_eq!(out.len(), workload.patients.len());
            n
        }
        InferenceMode::Ar => {
            let estimates: Result<Vec<f64>, InferenceError> = workload
                .patients
                .par_iter()
                .map(|&(record, idx)| {
                    let mut rng = SplitMix64::derive(
                        workload.eval_seed,
                        &[STREAM_ROLLOUT, record.subject_id],
                    );
                    ar_estimate(
                        workload.ar_params,
                        workload.vocab,
                        record,
                        idx,
                        &workload.query,
                        workload.k,
                        &mut rng,
                    )
                })
                .collect();
            estimates?;
            n * workload.k as u64
        }
    };
    let wall_seconds = start.elapsed().as_secs_f64();
    Ok(TimingReport {
        mode,
        wall_seconds,
        per_patient_ms: wall_seconds * 1e3 / n.max(1) as f64,
        forward_pass_count,
        workers: workload.workers,
    })
}
