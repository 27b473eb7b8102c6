//! Synthetic patient cohorts from a parametric stochastic process with
//! Monte-Carlo-computable outcome probabilities.
//!
//! The process: inter-event gaps are i.i.d. exponential; each event emits
//! one code from a renormalized categorical whose weights are the per-code
//! base rates, multiplicatively lifted for targets of recently-seen trigger
//! codes. History is therefore predictive, and the exact same process can be
//! continued from any history's terminal state to estimate true outcome
//! probabilities.

use crate::textkv::{TextKv, TextKvError};
use crate::trainer::Query;
use rayon::prelude::*;
use tensorcore::rng::SplitMix64;
use thiserror::Error;

pub type CodeId = u32;

/// Stream tags for seed derivation (see `tensorcore::rng`).
const STREAM_GEN: u64 = 0x47454E; // "GEN"
const STREAM_ORACLE: u64 = 0x4F5241; // "ORA"
const STREAM_SPLIT: u64 = 0x53504C; // "SPL"

pub const HOURS_PER_DAY: f64 = 24.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    pub time_h: f64,
    pub code: CodeId,
}

/// Time-ordered sequence of coded events for one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientRecord {
    pub subject_id: u64,
    pub events: Vec<Event>,
}

impl PatientRecord {
    pub fn last_time(&self) -> f64 {
        self.events.last().expect("record must hold at least one event").time_h
    }

    /// Checks the record invariants: at least one event, non-decreasing
    /// timestamps, codes within the vocabulary.
    pub fn check_invariants(&self, vocab_size: u32) -> Result<(), SynthError> {
        if self.events.is_empty() {
            return Err(SynthError::InvalidRecord("record has no events".into()));
        }
        for w in self.events.windows(2) {
            if w[1].time_h < w[0].time_h {
                return Err(SynthError::InvalidRecord(format!(
                    "timestamps decrease at subject {}",
                    self.subject_id
                )));
            }
        }
        for e in &self.events {
            if e.code >= vocab_size {
                return Err(SynthError::CodeOutOfRange { code: e.code, vocab: vocab_size });
            }
        }
        Ok(())
    }
}

/// Multiplicative lift on `target`'s emission weight for `window_h` hours
/// after an occurrence of `trigger`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Boost {
    pub trigger: CodeId,
    pub target: CodeId,
    pub factor: f64,
    pub window_h: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExponentialGap {
    pub mean_hours: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UniformLength {
    pub min_events: u32,
    pub max_events: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub vocab_size: u32,
    /// Per-code emission weights in (0,1); the per-step distribution is the
    /// renormalization of these after boosts.
    pub base_rate: Vec<f64>,
    pub transition_boost: Vec<Boost>,
    pub gap_distribution: ExponentialGap,
    pub record_length_distribution: UniformLength,
    /// Codes whose disjunction defines the readmission-analog task.
    pub admission_family: Vec<CodeId>,
    /// Emitting this code terminates the record (mortality analog).
    pub absorbing_code: Option<CodeId>,
    pub seed: u64,
}

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("code {code} outside vocabulary of size {vocab}")]
    CodeOutOfRange { code: CodeId, vocab: u32 },
    #[error("cohort is empty")]
    EmptyCohort,
    #[error("invalid split fractions: {0}")]
    BadFractions(String),
    #[error("config file: {0}")]
    ConfigFile(#[from] TextKvError),
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let err = |msg: String| Err(SynthError::InvalidConfig(msg));
        if self.vocab_size == 0 {
            return err("vocabulary is empty".into());
        }
        if self.vocab_size > 1000 {
            return err("code identifier scheme supports at most 1000 codes".into());
        }
        if self.base_rate.len() != self.vocab_size as usize {
            return err(format!(
                "base_rate has {} entries for vocab of {}",
                self.base_rate.len(),
                self.vocab_size
            ));
        }
        for (c, &r) in self.base_rate.iter().enumerate() {
            if !(r > 0.0 && r < 1.0) {
                return err(format!("base rate of code {c} is {r}, must be in (0,1)"));
            }
        }
        for b in &self.transition_boost {
            if b.trigger >= self.vocab_size || b.target >= self.vocab_size {
                return err(format!("boost ({}, {}) references unknown code", b.trigger, b.target));
            }
            if !(b.factor > 0.0 && b.factor.is_finite()) {
                return err(format!("boost factor {} must be positive and finite", b.factor));
            }
            if !(b.window_h > 0.0) {
                return err(format!("boost window {} must be positive", b.window_h));
            }
        }
        if self.admission_family.is_empty() {
            return err("admission family must be nonempty".into());
        }
        for &c in &self.admission_family {
            if c >= self.vocab_size {
                return err(format!("admission family code {c} outside vocabulary"));
            }
        }
        if let Some(a) = self.absorbing_code {
            if a >= self.vocab_size {
                return err(format!("absorbing code {a} outside vocabulary"));
            }
        }
        if !(self.gap_distribution.mean_hours > 0.0) {
            return err("gap mean must be positive".into());
        }
        let len = &self.record_length_distribution;
        if len.min_events == 0 || len.min_events > len.max_events {
            return err(format!(
                "record length range [{}, {}] is invalid",
                len.min_events, len.max_events
            ));
        }
        Ok(())
    }

    pub fn to_textkv(&self) -> TextKv {
        let mut kv = TextKv::new();
        kv.push("vocab_size", self.vocab_size);
        kv.push("seed", self.seed);
        kv.push("gap_mean_hours", self.gap_distribution.mean_hours);
        kv.push("record_min_events", self.record_length_distribution.min_events);
        kv.push("record_max_events", self.record_length_distribution.max_events);
        kv.push(
            "admission_family",
            self.admission_family
                .iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        if let Some(a) = self.absorbing_code {
            kv.push("absorbing_code", a);
        }
        for (c, r) in self.base_rate.iter().enumerate() {
            kv.push("base_rate", format!("{c},{r}"));
        }
        for b in &self.transition_boost {
            kv.push("boost", format!("{},{},{},{}", b.trigger, b.target, b.factor, b.window_h));
        }
        kv
    }

    pub fn from_textkv(kv: &TextKv) -> Result<Self, SynthError> {
        let vocab_size: u32 = kv.parse_value("vocab_size", "u32")?;
        let mut base_rate = vec![0.0; vocab_size as usize];
        let mut seen = vec![false; vocab_size as usize];
        for entry in kv.get_all("base_rate") {
            let (c, r) = entry.split_once(',').ok_or_else(|| {
                SynthError::InvalidConfig(format!("base_rate entry {entry:?} is not `code,rate`"))
            })?;
            let c: usize = c
                .trim()
                .parse()
                .map_err(|_| SynthError::InvalidConfig(format!("bad code in {entry:?}")))?;
            if c >= vocab_size as usize {
                return Err(SynthError::InvalidConfig(format!("base_rate code {c} out of range")));
            }
            base_rate[c] = r
                .trim()
                .parse()
                .map_err(|_| SynthError::InvalidConfig(format!("bad rate in {entry:?}")))?;
            seen[c] = true;
        }
        if let Some(c) = seen.iter().position(|s| !s) {
            return Err(SynthError::InvalidConfig(format!("base_rate missing for code {c}")));
        }
        let mut transition_boost = Vec::new();
        for entry in kv.get_all("boost") {
            let parts: Vec<&str> = entry.split(',').map(str::trim).collect();
            if parts.len() != 4 {
                return Err(SynthError::InvalidConfig(format!(
                    "boost entry {entry:?} is not `trigger,target,factor,window_h`"
                )));
            }
            let parse_err =
                |what| SynthError::InvalidConfig(format!("bad {what} in boost {entry:?}"));
            transition_boost.push(Boost {
                trigger: parts[0].parse().map_err(|_| parse_err("trigger"))?,
                target: parts[1].parse().map_err(|_| parse_err("target"))?,
                factor: parts[2].parse().map_err(|_| parse_err("factor"))?,
                window_h: parts[3].parse().map_err(|_| parse_err("window"))?,
            });
        }
        let admission_family = kv
            .require("admission_family")?
            .split(',')
            .map(|s| {
                s.trim().parse().map_err(|_| {
                    SynthError::InvalidConfig(format!("bad admission family code {s:?}"))
                })
            })
            .collect::<Result<Vec<CodeId>, _>>()?;
        let absorbing_code = match kv.get("absorbing_code") {
            Some(v) => Some(v.parse().map_err(|_| {
                SynthError::InvalidConfig(format!("bad absorbing code {v:?}"))
            })?),
            None => None,
        };
        let cfg = GeneratorConfig {
            vocab_size,
            base_rate,
            transition_boost,
            gap_distribution: ExponentialGap {
                mean_hours: kv.parse_value("gap_mean_hours", "f64")?,
            },
            record_length_distribution: UniformLength {
                min_events: kv.parse_value("record_min_events", "u32")?,
                max_events: kv.parse_value("record_max_events", "u32")?,
            },
            admission_family,
            absorbing_code,
            seed: kv.parse_value("seed", "u64")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

// ---- emission process ------------------------------------------------------

/// Walker alias table for O(1) categorical sampling over the base rates.
struct AliasTable {
    prob: Vec<f64>,
    alias: Vec<u32>,
}

impl AliasTable {
    fn new(weights: &[f64]) -> Self {
        let n = weights.len();
        let total: f64 = weights.iter().sum();
        let mut scaled: Vec<f64> = weights.iter().map(|w| w * n as f64 / total).collect();
        let mut prob = vec![0.0; n];
        let mut alias = vec![0u32; n];
        let mut small: Vec<usize> = (0..n).filter(|&i| scaled[i] < 1.0).collect();
        let mut large: Vec<usize> = (0..n).filter(|&i| scaled[i] >= 1.0).collect();
        while let (Some(s), Some(l)) = (small.pop(), large.pop()) {
            prob[s] = scaled[s];
            alias[s] = l as u32;
            scaled[l] = (scaled[l] + scaled[s]) - 1.0;
            if scaled[l] < 1.0 {
                small.push(l);
            } else {
                large.push(l);
            }
        }
        for i in large.into_iter().chain(small) {
            prob[i] = 1.0;
        }
        AliasTable { prob, alias }
    }

    #[inline]
    fn sample(&self, rng: &mut SplitMix64) -> CodeId {
        let n = self.prob.len() as u64;
        let i = rng.next_below(n) as usize;
        if rng.next_f64() < self.prob[i] {
            i as CodeId
        } else {
            self.alias[i]
        }
    }
}

/// Boosts grouped by trigger, with the per-group extra mass precomputed for
/// the common case where no two boosts share a target.
struct TriggerGroup {
    trigger: CodeId,
    window_h: f64,
    /// (target, base_rate * (factor - 1)) per boost in this group.
    extras: Vec<(CodeId, f64)>,
    extra_mass: f64,
}

/// Shared, read-only simulator for the emission process; all mutable state
/// lives in [`ProcessState`], so concurrent rollouts are safe.
pub struct Simulator<'a> {
    cfg: &'a GeneratorConfig,
    alias: AliasTable,
    base_norm: Vec<f64>,
    groups: Vec<TriggerGroup>,
    /// Fast additive path is exact only when boost targets are disjoint and
    /// each group has a single window per trigger.
    additive: bool,
}

/// Last-occurrence time per trigger group, indexed as in `Simulator::groups`.
#[derive(Debug, Clone)]
pub struct ProcessState {
    last_seen: Vec<f64>,
}

impl<'a> Simulator<'a> {
    pub fn new(cfg: &'a GeneratorConfig) -> Self {
        let total: f64 = cfg.base_rate.iter().sum();
        let base_norm: Vec<f64> = cfg.base_rate.iter().map(|r| r / total).collect();
        let mut groups: Vec<TriggerGroup> = Vec::new();
        for b in &cfg.transition_boost {
            match groups
                .iter_mut()
                .find(|g| g.trigger == b.trigger && g.window_h == b.window_h)
            {
                Some(g) => {
                    g.extras.push((b.target, base_norm[b.target as usize] * (b.factor - 1.0)));
                }
                None => groups.push(TriggerGroup {
                    trigger: b.trigger,
                    window_h: b.window_h,
                    extras: vec![(b.target, base_norm[b.target as usize] * (b.factor - 1.0))],
                    extra_mass: 0.0,
                }),
            }
        }
        for g in &mut groups {
            g.extra_mass = g.extras.iter().map(|(_, m)| m).sum();
        }
        let mut targets: Vec<CodeId> = cfg.transition_boost.iter().map(|b| b.target).collect();
        targets.sort_unstable();
        let disjoint_targets = targets.windows(2).all(|w| w[0] != w[1]);
        let one_group_per_trigger = {
            let mut triggers: Vec<CodeId> = groups.iter().map(|g| g.trigger).collect();
            triggers.sort_unstable();
            triggers.windows(2).all(|w| w[0] != w[1])
        };
        Simulator {
            cfg,
            alias: AliasTable::new(&cfg.base_rate),
            base_norm,
            groups,
            additive: disjoint_targets && one_group_per_trigger,
        }
    }

    pub fn fresh_state(&self) -> ProcessState {
        ProcessState { last_seen: vec![f64::NEG_INFINITY; self.groups.len()] }
    }

    /// State as of just after the given history: trigger occurrences within
    /// their windows stay active when the process is continued.
    pub fn state_from_history(&self, events: &[Event]) -> ProcessState {
        let mut state = self.fresh_state();
        for e in events {
            self.observe(&mut state, e.time_h, e.code);
        }
        state
    }

    #[inline]
    fn observe(&self, state: &mut ProcessState, t: f64, code: CodeId) {
        for (gi, g) in self.groups.iter().enumerate() {
            if g.trigger == code {
                state.last_seen[gi] = t;
            }
        }
    }

    /// Per-code emission probabilities at time `t` (boosts from events
    /// strictly before `t`). Reference implementation used by the fast
    /// sampling path's tests and the non-additive fallback.
    pub fn probabilities_at(&self, state: &ProcessState, t: f64) -> Vec<f64> {
        let mut w = self.base_norm.clone();
        for (gi, g) in self.groups.iter().enumerate() {
            if t - state.last_seen[gi] <= g.window_h {
                for b in self.cfg.transition_boost.iter() {
                    if b.trigger == g.trigger && b.window_h == g.window_h {
                        w[b.target as usize] *= b.factor;
                    }
                }
            }
        }
        let z: f64 = w.iter().sum();
        for x in &mut w {
            *x /= z;
        }
        w
    }

    /// Emits one code at time `t` and folds it into the state.
    pub fn step(&self, state: &mut ProcessState, t: f64, rng: &mut SplitMix64) -> CodeId {
        let code = if self.additive {
            // Active boosts add (factor-1) * base mass on top of the base
            // distribution; sample the mixture exactly.
            let mut extra = 0.0;
            for (gi, g) in self.groups.iter().enumerate() {
                if t - state.last_seen[gi] <= g.window_h {
                    extra += g.extra_mass;
                }
            }
            let u = rng.next_f64() * (1.0 + extra);
            if u < 1.0 {
                self.alias.sample(rng)
            } else {
                let mut rem = u - 1.0;
                let mut picked = None;
                'outer: for (gi, g) in self.groups.iter().enumerate() {
                    if t - state.last_seen[gi] <= g.window_h {
                        for &(target, mass) in &g.extras {
                            if rem < mass {
                                picked = Some(target);
                                break 'outer;
                            }
                            rem -= mass;
                        }
                    }
                }
                // Rounding at the top of the range falls back to base mass.
                picked.unwrap_or_else(|| self.alias.sample(rng))
            }
        } else {
            let probs = self.probabilities_at(state, t);
            let mut u = rng.next_f64();
            let mut picked = probs.len() - 1;
            for (i, &p) in probs.iter().enumerate() {
                if u < p {
                    picked = i;
                    break;
                }
                u -= p;
            }
            picked as CodeId
        };
        self.observe(state, t, code);
        code
    }
}

// ---- operations ------------------------------------------------------------

/// Generates `n_patients` records; deterministic under (config, seed), with
/// per-subject derived streams so generation parallelizes safely.
pub fn generate_cohort(
    config: &GeneratorConfig,
    n_patients: usize,
) -> Result<Vec<PatientRecord>, SynthError> {
    config.validate()?;
    if n_patients == 0 {
        return Err(SynthError::EmptyCohort);
    }
    let sim = Simulator::new(config);
    let records: Vec<PatientRecord> = (0..n_patients as u64)
        .into_par_iter()
        .map(|subject_id| {
            let mut rng = SplitMix64::derive(config.seed, &[STREAM_GEN, subject_id]);
            let len = &config.record_length_distribution;
            let span = (len.max_events - len.min_events + 1) as u64;
            let n_events = len.min_events + rng.next_below(span) as u32;
            let mut state = sim.fresh_state();
            let mut events = Vec::with_capacity(n_events as usize);
            let mut t = 0.0;
            for i in 0..n_events {
                if i > 0 {
                    t += rng.next_exp(config.gap_distribution.mean_hours);
                }
                let code = sim.step(&mut state, t, &mut rng);
                events.push(Event { time_h: t, code });
                if Some(code) == config.absorbing_code {
                    break;
                }
            }
            PatientRecord { subject_id, events }
        })
        .collect();
    debug_assert!(records.iter().all(|r| r.check_invariants(config.vocab_size).is_ok()));
    Ok(records)
}

fn simulate_outcomes(
    config: &GeneratorConfig,
    history: &PatientRecord,
    horizon_h: f64,
    n_samples: usize,
    hit: impl Fn(CodeId) -> bool + Sync,
    stream_tags: &[u64],
) -> f64 {
    let sim = Simulator::new(config);
    let base_state = sim.state_from_history(&history.events);
    let t_last = history.last_time();
    let dead = history.events.last().map(|e| Some(e.code) == config.absorbing_code).unwrap_or(false);
    if dead {
        return 0.0;
    }
    const CHUNK: usize = 4096;
    let n_chunks = n_samples.div_ceil(CHUNK);
    let hits: u64 = (0..n_chunks as u64)
        .into_par_iter()
        .map(|chunk| {
            let mut tags = vec![STREAM_ORACLE, history.subject_id, chunk];
            tags.extend_from_slice(stream_tags);
            let mut rng = SplitMix64::derive(config.seed, &tags);
            let lo = chunk as usize * CHUNK;
            let hi = ((chunk as usize + 1) * CHUNK).min(n_samples);
            let mut count = 0u64;
            for _ in lo..hi {
                let mut state = base_state.clone();
                let mut t = t_last;
                loop {
                    t += rng.next_exp(config.gap_distribution.mean_hours);
                    if t > t_last + horizon_h {
                        break;
                    }
                    let code = sim.step(&mut state, t, &mut rng);
                    if hit(code) {
                        count += 1;
                        break;
                    }
                    if Some(code) == config.absorbing_code {
                        break;
                    }
                }
            }
            count
        })
        .sum();
    hits as f64 / n_samples as f64
}

/// Monte Carlo estimate of the probability that the queried code occurs
/// within the query horizon after the history's last event, continuing the
/// true process from the history's terminal state. Deterministic under
/// (config.seed, subject, query); standard error is at most
/// sqrt(p(1-p)/n_samples).
pub fn true_outcome_prob(
    config: &GeneratorConfig,
    history: &PatientRecord,
    query: &Query,
    n_samples: usize,
) -> Result<f64, SynthError> {
    config.validate()?;
    if query.code >= config.vocab_size {
        return Err(SynthError::CodeOutOfRange { code: query.code, vocab: config.vocab_size });
    }
    assert!(n_samples >= 1, "need at least one sample");
    assert!(!history.events.is_empty(), "history must be nonempty");
    let horizon_h = query.horizon_days * HOURS_PER_DAY;
    let target = query.code;
    Ok(simulate_outcomes(
        config,
        history,
        horizon_h,
        n_samples,
        |c| c == target,
        &[target as u64, horizon_h.to_bits()],
    ))
}

/// Oracle probability that any code of `code_set` occurs within the horizon.
pub fn true_any_outcome_prob(
    config: &GeneratorConfig,
    history: &PatientRecord,
    code_set: &[CodeId],
    horizon_days: f64,
    n_samples: usize,
) -> Result<f64, SynthError> {
    config.validate()?;
    assert!(!code_set.is_empty(), "code set must be nonempty");
    for &c in code_set {
        if c >= config.vocab_size {
            return Err(SynthError::CodeOutOfRange { code: c, vocab: config.vocab_size });
        }
    }
    let mut members = vec![false; config.vocab_size as usize];
    for &c in code_set {
        members[c as usize] = true;
    }
    let horizon_h = horizon_days * HOURS_PER_DAY;
    let mut tags: Vec<u64> = vec![horizon_h.to_bits(), 0xD15]; // disjunction stream
    tags.extend(code_set.iter().map(|&c| c as u64));
    Ok(simulate_outcomes(config, history, horizon_h, n_samples, |c| members[c as usize], &tags))
}

/// Partitions a cohort by subject into train/val/test. Subjects are ranked
/// by a seeded hash of their id (no shuffle), then cut at the rounded
/// fraction boundaries, so sizes are within one of the targets and the
/// assignment is deterministic.
pub fn split_cohort(
    cohort: &[PatientRecord],
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(Vec<PatientRecord>, Vec<PatientRecord>, Vec<PatientRecord>), SynthError> {
    if cohort.is_empty() {
        return Err(SynthError::EmptyCohort);
    }
    let fr = [fractions.0, fractions.1, fractions.2];
    if fr.iter().any(|&f| f < 0.0) {
        return Err(SynthError::BadFractions("fractions must be non-negative".into()));
    }
    let sum: f64 = fr.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(SynthError::BadFractions(format!("fractions sum to {sum}, expected 1")));
    }
    let n = cohort.len();
    let mut keyed: Vec<(u64, usize)> = cohort
        .iter()
        .enumerate()
        .map(|(i, r)| {
            (SplitMix64::derive(seed, &[STREAM_SPLIT, r.subject_id]).next_u64(), i)
        })
        .collect();
    keyed.sort_unstable();
    let b1 = (fr[0] * n as f64).round() as usize;
    let b2 = ((fr[0] + fr[1]) * n as f64).round() as usize;
    let bounds = [b1.min(n), b2.min(n), n];
    let sizes = [bounds[0], bounds[1] - bounds[0], bounds[2] - bounds[1]];
    for (i, (&size, &f)) in sizes.iter().zip(&fr).enumerate() {
        if size == 0 && f > 0.0 {
            return Err(SynthError::BadFractions(format!(
                "split {i} has fraction {f} but zero members at cohort size {n}"
            )));
        }
    }
    let mut out: [Vec<PatientRecord>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for (rank, &(_, idx)) in keyed.iter().enumerate() {
        let split = if rank < bounds[0] {
            0
        } else if rank < bounds[1] {
            1
        } else {
            2
        };
        out[split].push(cohort[idx].clone());
    }
    // Keep each split in subject order; membership is what the hash decides.
    for split in &mut out {
        split.sort_by_key(|r| r.subject_id);
    }
    let [train, val, test] = out;
    Ok((train, val, test))
}
