//! Experiment stages: generate, train both models, evaluate the task
//! suite, extract embeddings, time the two inference modes. Every stage
//! reads its inputs from and writes its outputs to the run directory, so
//! stages can run individually or chained by `all`. The report bundle
//! (timing aside) is a pure function of the run configuration.

use crate::config::RunConfig;
use crate::report::{
    self, DisjunctiveReport, PredictionRow, SummaryInputs, TimingInputs,
};
use crate::suite::{build_generator, build_task_suite, Task, TaskKind};
use anyhow::{bail, Context, Result};
use eqlab::eventio::{
    build_vocab, load_cohort, load_vocab, write_cohort, write_vocab, CodeVocab, TokenId,
    DEFAULT_GAP_BINS,
};
use eqlab::inference::{
    eq_forward_batch, time_inference, AggregationStrategy, InferenceMode, TimingWorkload,
};
use eqlab::model::{
    ar_sample_trajectories, load_decoder_checkpoint, load_encoder_checkpoint,
    save_decoder_checkpoint, save_encoder_checkpoint, CheckpointMeta, StopRule, Trajectory,
};
use eqlab::stats::{
    auroc, bootstrap_ci, cosine_group_analysis, group_comparison_tests, pairwise_sum,
    prevalence_analysis, wilcoxon_signed_rank, EmbeddingSet, TaskResult, TestMode,
};
use eqlab::synthgen::{generate_cohort, split_cohort, GeneratorConfig, PatientRecord};
use eqlab::textkv::TextKv;
use eqlab::trainer::{
    build_query_distribution, compute_label, train_ar, train_eq, Query, QueryDistribution,
};
use rayon::prelude::*;
use std::path::Path;

const STREAM_AR_EVAL: u64 = 0xA7E7A1;

pub mod files {
    pub const RUN_CONFIG: &str = "run_config.txt";
    pub const GENERATOR: &str = "generator.cfg";
    pub const TRAIN_EVENTS: &str = "train.events";
    pub const VAL_EVENTS: &str = "val.events";
    pub const TEST_EVENTS: &str = "test.events";
    pub const VOCAB: &str = "vocab.txt";
    pub const EQ_CKPT: &str = "eq.ckpt";
    pub const AR_CKPT: &str = "ar.ckpt";
    pub const TRAIN_EQ_LOG: &str = "train_eq.log";
    pub const TRAIN_AR_LOG: &str = "train_ar.log";
    pub const TASKS: &str = "tasks.csv";
    pub const PREDICTIONS: &str = "predictions.csv";
    pub const SUMMARY: &str = "summary.txt";
    pub const EMBEDDINGS: &str = "embeddings.txt";
    pub const TIMING: &str = "timing.txt";
    pub const PLOT: &str = "delta_vs_prevalence.svg";

    /// Files that must be byte-identical across reruns of one config.
    pub const DETERMINISTIC: &[&str] = &[
        RUN_CONFIG,
        GENERATOR,
        TRAIN_EVENTS,
        VAL_EVENTS,
        TEST_EVENTS,
        VOCAB,
        EQ_CKPT,
        AR_CKPT,
        TRAIN_EQ_LOG,
        TRAIN_AR_LOG,
        TASKS,
        PREDICTIONS,
        SUMMARY,
        EMBEDDINGS,
        PLOT,
    ];
}

pub fn resolve_generator(cfg: &RunConfig) -> Result<GeneratorConfig> {
    match &cfg.generator_config_path {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading generator config {path}"))?;
            Ok(GeneratorConfig::from_textkv(&TextKv::parse(&text)?)?)
        }
        None => Ok(build_generator(cfg)),
    }
}

fn stamp(path: &Path, hash: &str, body: String) -> Result<()> {
    std::fs::write(path, format!("# config_hash={hash}\n{body}"))
        .with_context(|| format!("writing {}", path.display()))
}

/// Generates the cohort, splits it by subject, writes the event files, the
/// vocabulary, and the generator config.
pub fn stage_gen(cfg: &RunConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let hash = cfg.hash();
    std::fs::write(out.join(files::RUN_CONFIG), cfg.to_textkv().render())?;
    let gen = resolve_generator(cfg)?;
    std::fs::write(out.join(files::GENERATOR), gen.to_textkv().render())?;
    let cohort = generate_cohort(&gen, cfg.n_patients)?;
    let vocab = build_vocab(&cohort, &DEFAULT_GAP_BINS)?;
    let (train, val, test) = split_cohort(&cohort, cfg.split, cfg.master_seed)?;
    write_cohort(&out.join(files::TRAIN_EVENTS), &train)?;
    write_cohort(&out.join(files::VAL_EVENTS), &val)?;
    write_cohort(&out.join(files::TEST_EVENTS), &test)?;
    write_vocab(&out.join(files::VOCAB), &vocab)?;
    let _ = hash;
    Ok(())
}

fn load_split(out: &Path, which: &str) -> Result<Vec<PatientRecord>> {
    Ok(load_cohort(&out.join(which))?)
}

fn rebuild_distribution(cfg: &RunConfig, vocab: &CodeVocab) -> QueryDistribution {
    let n_id = ((cfg.id_fraction * vocab.n_codes() as f64).round() as usize)
        .clamp(1, vocab.n_codes());
    build_query_distribution(vocab, n_id, cfg.master_seed)
}

pub fn stage_train_eq(cfg: &RunConfig, out: &Path) -> Result<()> {
    let vocab = load_vocab(&out.join(files::VOCAB))?;
    let train = load_split(out, files::TRAIN_EVENTS)?;
    let val = load_split(out, files::VAL_EVENTS)?;
    let dist = rebuild_distribution(cfg, &vocab);
    let enc_cfg = cfg.encoder_config(vocab.n_tokens());
    let (params, log) = train_eq(&train, &val, &dist, &vocab, &enc_cfg, &cfg.eq_hyper())?;
    stamp(&out.join(files::TRAIN_EQ_LOG), &cfg.hash(), log.render())?;
    let meta = CheckpointMeta {
        train_step: log.best_step,
        seed: cfg.master_seed,
        config_hash: cfg.hash(),
    };
    save_encoder_checkpoint(&out.join(files::EQ_CKPT), &params, &meta)?;
    Ok(())
}

pub fn stage_train_ar(cfg: &RunConfig, out: &Path) -> Result<()> {
    let vocab = load_vocab(&out.join(files::VOCAB))?;
    let train = load_split(out, files::TRAIN_EVENTS)?;
    let val = load_split(out, files::VAL_EVENTS)?;
    let dec_cfg = cfg.decoder_config(vocab.n_tokens());
    let (params, log) = train_ar(&train, &val, &vocab, &dec_cfg, &cfg.ar_hyper())?;
    stamp(&out.join(files::TRAIN_AR_LOG), &cfg.hash(), log.render())?;
    let meta = CheckpointMeta {
        train_step: log.best_step,
        seed: cfg.master_seed,
        config_hash: cfg.hash(),
    };
    save_decoder_checkpoint(&out.join(files::AR_CKPT), &params, &meta)?;
    Ok(())
}

/// One evaluation point per test patient: the latest prediction index with
/// enough preceding events and at least the full horizon of follow-up.
pub fn eval_points(
    cohort: &[PatientRecord],
    min_events: usize,
    horizon_h: f64,
) -> Vec<(usize, usize)> {
    let mut points = Vec::new();
    for (ri, rec) in cohort.iter().enumerate() {
        let last = rec.last_time();
        let idx = rec
            .events
            .iter()
            .enumerate()
            .rev()
            .find(|(i, e)| i + 1 >= min_events && last >= e.time_h + horizon_h)
            .map(|(i, _)| i);
        if let Some(i) = idx {
            points.push((ri, i));
        }
    }
    points
}

/// Per-patient trajectories sampled once and shared across every task; the
/// per-(patient, rollout) streams derive from the eval seed alone.
fn sample_eval_trajectories(
    cfg: &RunConfig,
    ar: &eqlab::model::DecoderParams<f32>,
    vocab: &CodeVocab,
    cohort: &[PatientRecord],
    points: &[(usize, usize)],
) -> Result<Vec<Vec<Trajectory>>> {
    let horizon_h = cfg.horizon_days * 24.0;
    let stop = StopRule { max_new_tokens: ar.cfg.generation_budget(), horizon_h };
    points
        .par_iter()
        .map(|&(ri, idx)| {
            let rec = &cohort[ri];
            let tk = eqlab::eventio::tokenize_record(rec, vocab, idx, ar.cfg.context_len)?;
            let seeds: Vec<u64> = (0..cfg.k_trajectories as u64)
                .map(|k| {
                    tensorcore::rng::SplitMix64::derive(
                        cfg.eval_seed,
                        &[STREAM_AR_EVAL, rec.subject_id, k],
                    )
                    .state()
                })
                .collect();
            Ok(ar_sample_trajectories(ar, vocab, &tk.tokens, &seeds, 1.0, &stop))
        })
        .collect()
}

fn trajectory_fraction(trajs: &[Trajectory], targets: &[TokenId], horizon_h: f64) -> f64 {
    let hits = trajs.iter().filter(|t| t.contains_within(targets, horizon_h)).count();
    hits as f64 / trajs.len() as f64
}

struct TaskEval {
    row: TaskResult,
    eq_scores: Vec<f64>,
    ar_scores: Vec<f64>,
    labels: Vec<bool>,
}

#[allow(clippy::too_many_arguments)]
fn evaluate_task(
    cfg: &RunConfig,
    task: &Task,
    eq: &eqlab::model::EncoderParams<f32>,
    vocab: &CodeVocab,
    cohort: &[PatientRecord],
    points: &[(usize, usize)],
    trajectories: &[Vec<Trajectory>],
) -> Result<TaskEval> {
    let horizon_h = cfg.horizon_days * 24.0;
    let query = Query { code: task.code, horizon_days: cfg.horizon_days };
    let labels: Vec<bool> = points
        .iter()
        .map(|&(ri, idx)| {
            let (cens, occ) = compute_label(&cohort[ri], idx, &query);
            debug_assert!(!cens, "eval points are uncensored by construction");
            occ.unwrap_or(false)
        })
        .collect();
    let items: Vec<(&PatientRecord, usize)> =
        points.iter().map(|&(ri, idx)| (&cohort[ri], idx)).collect();
    let eq_out = eq_forward_batch(eq, vocab, &items, &query)?;
    let eq_scores: Vec<f64> = eq_out.iter().map(|o| o.p_occurs).collect();
    let token = vocab.code_token(task.code)?;
    let ar_scores: Vec<f64> = trajectories
        .iter()
        .map(|t| trajectory_fraction(t, &[token], horizon_h))
        .collect();
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    let row = TaskResult {
        name: task.name.clone(),
        is_id: task.is_id,
        prevalence: if labels.is_empty() { 0.0 } else { n_pos as f64 / labels.len() as f64 },
        auc_eq: auroc(&eq_scores, &labels).value(),
        auc_ar: auroc(&ar_scores, &labels).value(),
        n_pos,
        n_neg,
    };
    Ok(TaskEval { row, eq_scores, ar_scores, labels })
}

pub fn stage_eval(cfg: &RunConfig, out: &Path) -> Result<()> {
    let hash = cfg.hash();
    let vocab = load_vocab(&out.join(files::VOCAB))?;
    let test = load_split(out, files::TEST_EVENTS)?;
    let (eq, _) = load_encoder_checkpoint(&out.join(files::EQ_CKPT))?;
    let (ar, _) = load_decoder_checkpoint(&out.join(files::AR_CKPT))?;
    let dist = rebuild_distribution(cfg, &vocab);
    let tasks = build_task_suite(cfg, &dist)?;
    let horizon_h = cfg.horizon_days * 24.0;

    let points = eval_points(&test, cfg.min_events, horizon_h);
    if points.is_empty() {
        bail!("no uncensored eligible evaluation points in the test split");
    }
    let trajectories = sample_eval_trajectories(cfg, &ar, &vocab, &test, &points)?;

    let mut rows = Vec::new();
    let mut predictions: Vec<PredictionRow> = Vec::new();
    let mut absorbing_row = None;
    for task in &tasks {
        let ev = evaluate_task(cfg, task, &eq, &vocab, &test, &points, &trajectories)?;
        for (i, &(ri, _)) in points.iter().enumerate() {
            let subject = test[ri].subject_id;
            predictions.push(PredictionRow {
                subject_id: subject,
                task: task.name.clone(),
                mode: "eq",
                score: ev.eq_scores[i],
                label: ev.labels[i],
            });
            predictions.push(PredictionRow {
                subject_id: subject,
                task: task.name.clone(),
                mode: "ar",
                score: ev.ar_scores[i],
                label: ev.labels[i],
            });
        }
        match task.kind {
            TaskKind::Absorbing => absorbing_row = Some(ev.row.clone()),
            TaskKind::SingleCode => {}
        }
        rows.push(ev.row);
    }

    // Disjunctive readmission-analog task: querying each family code and
    // aggregating vs. checking trajectories for any family code.
    let family = resolve_generator(cfg)?.admission_family;
    let disj_labels: Vec<bool> = points
        .iter()
        .map(|&(ri, idx)| {
            family.iter().any(|&c| {
                let q = Query { code: c, horizon_days: cfg.horizon_days };
                compute_label(&test[ri], idx, &q).1.unwrap_or(false)
            })
        })
        .collect();
    let items: Vec<(&PatientRecord, usize)> =
        points.iter().map(|&(ri, idx)| (&test[ri], idx)).collect();
    let mut per_code: Vec<Vec<f64>> = Vec::new();
    for &code in &family {
        let q = Query { code, horizon_days: cfg.horizon_days };
        let out_batch = eq_forward_batch(&eq, &vocab, &items, &q)?;
        per_code.push(out_batch.into_iter().map(|o| o.p_occurs).collect());
    }
    let n_points = points.len();
    let mut eq_max = Vec::with_capacity(n_points);
    let mut eq_ind = Vec::with_capacity(n_points);
    for i in 0..n_points {
        let probs: Vec<f64> = per_code.iter().map(|v| v[i]).collect();
        eq_max.push(eqlab::inference::aggregate_disjunction(&probs, AggregationStrategy::Max)?);
        eq_ind.push(eqlab::inference::aggregate_disjunction(
            &probs,
            AggregationStrategy::Independence,
        )?);
    }
    let family_tokens: Vec<TokenId> =
        family.iter().map(|&c| vocab.code_token(c)).collect::<Result<_, _>>()?;
    let ar_any: Vec<f64> = trajectories
        .iter()
        .map(|t| trajectory_fraction(t, &family_tokens, horizon_h))
        .collect();
    let disj_pos = disj_labels.iter().filter(|&&l| l).count();
    let disjunctive = DisjunctiveReport {
        prevalence: disj_pos as f64 / n_points as f64,
        n_pos: disj_pos,
        n_neg: n_points - disj_pos,
        auc_eq_max: auroc(&eq_max, &disj_labels).value(),
        auc_eq_independence: auroc(&eq_ind, &disj_labels).value(),
        auc_ar_any: auroc(&ar_any, &disj_labels).value(),
    };
    for (mode, scores) in
        [("eq_max", &eq_max), ("eq_indep", &eq_ind), ("ar_any", &ar_any)]
    {
        for (i, &(ri, _)) in points.iter().enumerate() {
            predictions.push(PredictionRow {
                subject_id: test[ri].subject_id,
                task: "admission_family".into(),
                mode,
                score: scores[i],
                label: disj_labels[i],
            });
        }
    }

    // Aggregate statistics over the single-code tier suite only.
    let tier_rows: Vec<TaskResult> = tasks
        .iter()
        .zip(&rows)
        .filter(|(t, _)| t.kind == TaskKind::SingleCode)
        .map(|(_, r)| r.clone())
        .collect();
    let aggregate = prevalence_analysis(&tier_rows).ok();
    let deltas: Vec<f64> = tier_rows.iter().filter_map(|t| t.delta()).collect();
    let wilcoxon = wilcoxon_signed_rank(&deltas).ok();
    let bootstrap =
        if deltas.is_empty() { None } else { Some(bootstrap_ci(&deltas, 10_000, 0.05, cfg.master_seed)) };
    let group = |want_id: bool| -> Option<(usize, usize, f64)> {
        let ds: Vec<f64> = tier_rows
            .iter()
            .filter(|t| t.is_id == want_id)
            .filter_map(|t| t.delta())
            .collect();
        if ds.is_empty() {
            return None;
        }
        let wins = ds.iter().filter(|&&d| d > 0.0).count();
        Some((wins, ds.len(), pairwise_sum(&ds) / ds.len() as f64))
    };
    let id_deltas: Vec<f64> =
        tier_rows.iter().filter(|t| t.is_id).filter_map(|t| t.delta()).collect();
    let ood_deltas: Vec<f64> =
        tier_rows.iter().filter(|t| !t.is_id).filter_map(|t| t.delta()).collect();
    let comparison = group_comparison_tests(&id_deltas, &ood_deltas).ok();

    report::write_tasks_csv(&out.join(files::TASKS), &hash, &rows)?;
    predictions.sort_by(|a, b| {
        (a.task.as_str(), a.mode, a.subject_id).cmp(&(b.task.as_str(), b.mode, b.subject_id))
    });
    report::write_predictions_csv(&out.join(files::PREDICTIONS), &hash, &predictions)?;
    report::write_summary(
        &out.join(files::SUMMARY),
        &SummaryInputs {
            config_hash: &hash,
            label: &cfg.label,
            master_seed: cfg.master_seed,
            eval_seed: cfg.eval_seed,
            n_eval_patients: n_points,
            k: cfg.k_trajectories,
            aggregate: aggregate.as_ref(),
            wilcoxon: wilcoxon.as_ref().map(|w| {
                (w.p, match w.mode {
                    TestMode::Exact => "exact",
                    TestMode::Approximate => "approximate",
                })
            }),
            bootstrap,
            id_group: group(true),
            ood_group: group(false),
            mann_whitney_p: comparison.as_ref().map(|c| c.mann_whitney_p),
            fisher_p: comparison.as_ref().map(|c| c.fisher_p),
            disjunctive: &disjunctive,
            absorbing: absorbing_row.as_ref(),
        },
    )?;
    crate::plot::emit_plots(&tier_rows, &out.join(files::PLOT))?;
    Ok(())
}

pub fn stage_embed(cfg: &RunConfig, out: &Path) -> Result<()> {
    let vocab = load_vocab(&out.join(files::VOCAB))?;
    let test = load_split(out, files::TEST_EVENTS)?;
    let (eq, _) = load_encoder_checkpoint(&out.join(files::EQ_CKPT))?;
    let dist = rebuild_distribution(cfg, &vocab);
    let tasks = build_task_suite(cfg, &dist)?;
    let horizon_h = cfg.horizon_days * 24.0;
    let points = eval_points(&test, cfg.min_events, horizon_h);
    let take = points.len().min(cfg.embed_patients);
    if take < 2 {
        bail!("embedding analysis needs at least 2 eval patients, got {take}");
    }
    let queries: Vec<&Task> =
        tasks.iter().filter(|t| t.kind == TaskKind::SingleCode).collect();
    let mut entries = Vec::with_capacity(take * queries.len());
    let items: Vec<(&PatientRecord, usize)> =
        points[..take].iter().map(|&(ri, idx)| (&test[ri], idx)).collect();
    for task in &queries {
        let q = Query { code: task.code, horizon_days: cfg.horizon_days };
        let outs = eq_forward_batch(&eq, &vocab, &items, &q)?;
        for (&(ri, _), o) in points[..take].iter().zip(outs) {
            entries.push((test[ri].subject_id, task.code, o.h0));
        }
    }
    let groups = cosine_group_analysis(&EmbeddingSet { entries })?;
    report::write_embeddings_report(
        &out.join(files::EMBEDDINGS),
        &cfg.hash(),
        take,
        queries.len(),
        &groups,
    )?;
    Ok(())
}

pub fn stage_timing(cfg: &RunConfig, out: &Path) -> Result<()> {
    let vocab = load_vocab(&out.join(files::VOCAB))?;
    let test = load_split(out, files::TEST_EVENTS)?;
    let (eq, _) = load_encoder_checkpoint(&out.join(files::EQ_CKPT))?;
    let (ar, _) = load_decoder_checkpoint(&out.join(files::AR_CKPT))?;
    let dist = rebuild_distribution(cfg, &vocab);
    let tasks = build_task_suite(cfg, &dist)?;
    let horizon_h = cfg.horizon_days * 24.0;
    let points = eval_points(&test, cfg.min_events, horizon_h);
    let take = points.len().min(cfg.timing_patients);
    if take == 0 {
        bail!("timing needs at least one eval patient");
    }
    // A mid-prevalence in-distribution task keeps the comparison fair.
    let task = tasks
        .iter()
        .filter(|t| t.kind == TaskKind::SingleCode && t.is_id)
        .min_by(|a, b| {
            (a.tier_target - 0.05)
                .abs()
                .partial_cmp(&(b.tier_target - 0.05).abs())
                .unwrap()
        })
        .context("no in-distribution task available for timing")?;
    let workload = TimingWorkload {
        eq_params: &eq,
        ar_params: &ar,
        vocab: &vocab,
        patients: points[..take].iter().map(|&(ri, idx)| (&test[ri], idx)).collect(),
        query: Query { code: task.code, horizon_days: cfg.horizon_days },
        k: cfg.k_trajectories,
        eval_seed: cfg.eval_seed,
        workers: rayon::current_num_threads(),
    };
    let eq_report = time_inference(&workload, InferenceMode::Eq)?;
    let ar_report = time_inference(&workload, InferenceMode::Ar)?;
    report::write_timing(
        &out.join(files::TIMING),
        &TimingInputs {
            config_hash: &cfg.hash(),
            label: &cfg.label,
            task: &task.name,
            n_patients: take,
            k: cfg.k_trajectories,
            eq: &eq_report,
            ar: &ar_report,
        },
    )?;
    Ok(())
}

/// Runs every stage in order; a failure aborts with the stage name.
pub fn run_experiment(cfg: &RunConfig, out: &Path) -> Result<()> {
    stage_gen(cfg, out).context("stage gen")?;
    stage_train_eq(cfg, out).context("stage train-eq")?;
    stage_train_ar(cfg, out).context("stage train-ar")?;
    stage_eval(cfg, out).context("stage eval")?;
    stage_embed(cfg, out).context("stage embed")?;
    stage_timing(cfg, out).context("stage timing")?;
    Ok(())
}
