//! Vocabulary layout, generator construction, and the evaluation task
//! suite.
//!
//! Code layout: one trigger code per prevalence tier, then the tier's task
//! candidates (all statistically exchangeable within a tier: same rate,
//! same trigger, same boost), then the admission family (independent: no
//! boosts), one absorbing terminal code, and filler codes absorbing the
//! remaining emission mass.

use crate::config::{RunConfig, TIER_BOOST_FACTORS, TIER_OOD_QUOTA, TIER_TARGETS};
use anyhow::{bail, Result};
use eqlab::synthgen::{
    Boost, CodeId, ExponentialGap, GeneratorConfig, UniformLength,
};
use eqlab::trainer::QueryDistribution;

pub struct CodeLayout {
    pub n_tiers: usize,
    pub codes_per_tier: usize,
    pub n_family: usize,
    pub n_filler: usize,
}

impl CodeLayout {
    pub fn from_config(cfg: &RunConfig) -> Self {
        CodeLayout {
            n_tiers: TIER_TARGETS.len(),
            codes_per_tier: cfg.gen.codes_per_tier,
            n_family: cfg.gen.n_family,
            n_filler: cfg.gen.n_filler,
        }
    }

    pub fn trigger(&self, tier: usize) -> CodeId {
        tier as CodeId
    }

    pub fn tier_candidates(&self, tier: usize) -> Vec<CodeId> {
        let base = self.n_tiers + tier * self.codes_per_tier;
        (base..base + self.codes_per_tier).map(|c| c as CodeId).collect()
    }

    pub fn tier_of_code(&self, code: CodeId) -> Option<usize> {
        let c = code as usize;
        let lo = self.n_tiers;
        let hi = lo + self.n_tiers * self.codes_per_tier;
        (c >= lo && c < hi).then(|| (c - lo) / self.codes_per_tier)
    }

    pub fn family(&self) -> Vec<CodeId> {
        let base = self.n_tiers + self.n_tiers * self.codes_per_tier;
        (base..base + self.n_family).map(|c| c as CodeId).collect()
    }

    pub fn absorbing(&self) -> CodeId {
        (self.n_tiers + self.n_tiers * self.codes_per_tier + self.n_family) as CodeId
    }

    pub fn vocab_size(&self) -> u32 {
        (self.n_tiers + self.n_tiers * self.codes_per_tier + self.n_family + 1 + self.n_filler)
            as u32
    }
}

/// Builds the generator: per-event rates are calibrated so each tier's
/// 30-day window prevalence lands near its target. With N = horizon/gap
/// events per window, a code at per-event probability q occurs with
/// probability 1 - exp(-N q) (Poisson thinning); the boost raises the
/// effective q by 1 + activity * (factor - 1).
pub fn build_generator(cfg: &RunConfig) -> GeneratorConfig {
    let layout = CodeLayout::from_config(cfg);
    let k = &cfg.gen;
    let n_window = cfg.horizon_days * 24.0 / k.gap_mean_hours;
    let trigger_per_window = k.trigger_window_h / k.gap_mean_hours;
    let activity = 1.0 - (-trigger_per_window * k.trigger_rate).exp();

    let mut rates = vec![0.0f64; layout.vocab_size() as usize];
    let mut boosts = Vec::new();
    for tier in 0..layout.n_tiers {
        rates[layout.trigger(tier) as usize] = k.trigger_rate;
        let factor = TIER_BOOST_FACTORS[tier];
        let multiplier = 1.0 + activity * (factor - 1.0);
        let rate = -(1.0 - TIER_TARGETS[tier]).ln() / (n_window * multiplier);
        for code in layout.tier_candidates(tier) {
            rates[code as usize] = rate;
            boosts.push(Boost {
                trigger: layout.trigger(tier),
                target: code,
                factor,
                window_h: k.trigger_window_h,
            });
        }
    }
    let family_rate = -(1.0 - k.family_window_prev).ln() / n_window;
    for code in layout.family() {
        rates[code as usize] = family_rate;
    }
    rates[layout.absorbing() as usize] = -(1.0 - k.absorbing_window_prev).ln() / n_window;

    let assigned: f64 = rates.iter().sum();
    let filler_rate = (1.0 - assigned) / k.n_filler as f64;
    assert!(filler_rate > 0.0, "assigned emission mass exceeds 1; lower tier targets");
    let filler_base = layout.vocab_size() as usize - k.n_filler;
    for r in rates.iter_mut().skip(filler_base) {
        *r = filler_rate;
    }

    GeneratorConfig {
        vocab_size: layout.vocab_size(),
        base_rate: rates,
        transition_boost: boosts,
        gap_distribution: ExponentialGap { mean_hours: k.gap_mean_hours },
        record_length_distribution: UniformLength {
            min_events: k.record_min_events,
            max_events: k.record_max_events,
        },
        admission_family: layout.family(),
        absorbing_code: Some(layout.absorbing()),
        seed: cfg.master_seed,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    SingleCode,
    Absorbing,
}

#[derive(Debug, Clone)]
pub struct Task {
    pub name: String,
    pub code: CodeId,
    pub is_id: bool,
    pub kind: TaskKind,
    pub tier_target: f64,
}

/// The single-code suite: `tasks_per_tier` codes per prevalence tier with
/// the per-tier OOD quota (falling back to whatever the sampled query
/// distribution makes available), plus the absorbing-code task flagged as
/// such.
pub fn build_task_suite(
    cfg: &RunConfig,
    dist: &QueryDistribution,
) -> Result<Vec<Task>> {
    let layout = CodeLayout::from_config(cfg);
    let mut tasks = Vec::new();
    let mut missing_ood = 0usize;
    for tier in 0..layout.n_tiers {
        let candidates = layout.tier_candidates(tier);
        let (ood, id): (Vec<CodeId>, Vec<CodeId>) =
            candidates.iter().partition(|&&c| !dist.is_id(c));
        // Per-tier OOD quota, with shortfalls carried to later tiers and
        // covered from the other group when one side runs dry.
        let want_ood = TIER_OOD_QUOTA[tier].min(cfg.tasks_per_tier) + missing_ood;
        let mut take_ood = want_ood.min(ood.len()).min(cfg.tasks_per_tier);
        let mut take_id = cfg.tasks_per_tier - take_ood;
        if take_id > id.len() {
            let shortfall = take_id - id.len();
            if take_ood + shortfall > ood.len() {
                bail!(
                    "tier {tier}: only {} candidates for {} tasks",
                    id.len() + ood.len(),
                    cfg.tasks_per_tier
                );
            }
            take_ood += shortfall;
            take_id = id.len();
        }
        missing_ood = want_ood.saturating_sub(take_ood);
        for &code in ood.iter().take(take_ood) {
            tasks.push(Task {
                name: format!("C{code:03}"),
                code,
                is_id: false,
                kind: TaskKind::SingleCode,
                tier_target: TIER_TARGETS[tier],
            });
        }
        for &code in id.iter().take(take_id) {
            tasks.push(Task {
                name: format!("C{code:03}"),
                code,
                is_id: true,
                kind: TaskKind::SingleCode,
                tier_target: TIER_TARGETS[tier],
            });
        }
    }
    let absorbing = layout.absorbing();
    tasks.push(Task {
        name: format!("C{absorbing:03}_absorbing"),
        code: absorbing,
        is_id: dist.is_id(absorbing),
        kind: TaskKind::Absorbing,
        tier_target: cfg.gen.absorbing_window_prev,
    });
    Ok(tasks)
}
