//! Evaluation statistics: AUROC, rank tests with exact small-sample paths,
//! percentile bootstrap, prevalence decomposition, and the embedding
//! cosine-group analysis.
//!
//! Exact-vs-approximate thresholds: Wilcoxon enumerates sign assignments
//! for n <= 20, Spearman permutes exactly for n <= 10, Mann-Whitney
//! enumerates assignments for combined n <= 12; larger inputs use normal or
//! t approximations with tie and continuity corrections.

use crate::synthgen::CodeId;
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};
use statrs::function::gamma::ln_gamma;
use tensorcore::rng::SplitMix64;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("need at least {need} observations, got {got}")]
    TooFew { need: usize, got: usize },
    #[error("all deltas are zero")]
    AllZeroDeltas,
    #[error("input vector is constant; ranks are undefined")]
    ConstantInput,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("zero-norm embedding for (patient {0}, query {1})")]
    ZeroNormEmbedding(u64, CodeId),
    #[error("embedding analysis needs at least 2 patients and 2 queries")]
    TooFewGroups,
}

fn normal_sf(z: f64) -> f64 {
    let n = Normal::new(0.0, 1.0).unwrap();
    1.0 - n.cdf(z)
}

/// Deterministic pairwise (cascade) summation; used for reported means.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 32 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

fn mean(xs: &[f64]) -> f64 {
    pairwise_sum(xs) / xs.len() as f64
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Midranks (ties averaged), 1-based.
fn midranks(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j + 2) as f64 / 2.0;
        for k in i..=j {
            ranks[order[k]] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Sum of (t^3 - t) over tie groups, for rank-test variance corrections.
fn tie_term(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut total = 0.0;
    let mut i = 0;
    while i < v.len() {
        let mut j = i;
        while j + 1 < v.len() && v[j + 1] == v[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        total += t * t * t - t;
        i = j + 1;
    }
    total
}

// ---- AUROC ---------------------------------------------------------------

/// AUROC result; degenerate label sets (no positives or no negatives) are
/// flagged rather than given a number.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AurocOutcome {
    Value(f64),
    Degenerate { n_pos: usize, n_neg: usize },
}

impl AurocOutcome {
    pub fn value(&self) -> Option<f64> {
        match self {
            AurocOutcome::Value(v) => Some(*v),
            AurocOutcome::Degenerate { .. } => None,
        }
    }
}

/// Mann-Whitney form of the AUROC: the positive-class rank sum normalized
/// by n_pos * n_neg, ties counted one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> AurocOutcome {
    assert_eq!(scores.len(), labels.len(), "scores and labels must align");
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return AurocOutcome::Degenerate { n_pos, n_neg };
    }
    let ranks = midranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    AurocOutcome::Value(u / (n_pos as f64 * n_neg as f64))
}

// ---- Wilcoxon signed-rank ---------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TestMode {
    Exact,
    Approximate,
}

#[derive(Debug, Clone)]
pub struct WilcoxonResult {
    pub p: f64,
    pub w_plus: f64,
    pub n_used: usize,
    pub mode: TestMode,
}

const WILCOXON_EXACT_MAX: usize = 20;

/// Two-sided signed-rank test on paired differences. Zeros are dropped;
/// n <= 20 enumerates all 2^n sign assignments exactly (as a distribution
/// over doubled rank sums), larger n uses the normal approximation with tie
/// and continuity corrections.
pub fn wilcoxon_signed_rank(deltas: &[f64]) -> Result<WilcoxonResult, StatsError> {
    let nonzero: Vec<f64> = deltas.iter().copied().filter(|&d| d != 0.0).collect();
    if nonzero.is_empty() {
        return Err(StatsError::AllZeroDeltas);
    }
    let n = nonzero.len();
    let abs: Vec<f64> = nonzero.iter().map(|d| d.abs()).collect();
    let ranks = midranks(&abs);
    let w_plus: f64 =
        ranks.iter().zip(&nonzero).filter(|(_, &d)| d > 0.0).map(|(r, _)| r).sum();

    if n <= WILCOXON_EXACT_MAX {
        // Midranks are half-integers; double them so the DP runs on integers.
        let ranks2: Vec<u64> = ranks.iter().map(|r| (2.0 * r).round() as u64).collect();
        let total: u64 = ranks2.iter().sum();
        let mut counts = vec![0.0f64; total as usize + 1];
        counts[0] = 1.0;
        for &r in &ranks2 {
            for s in (r..=total).rev() {
                counts[s as usize] += counts[(s - r) as usize];
            }
        }
        let w2 = (2.0 * w_plus).round() as u64;
        let denom = 2f64.powi(n as i32);
        let p_le: f64 = counts[..=w2 as usize].iter().sum::<f64>() / denom;
        let p_ge: f64 = counts[w2 as usize..].iter().sum::<f64>() / denom;
        let p = (2.0 * p_le.min(p_ge)).min(1.0);
        Ok(WilcoxonResult { p, w_plus, n_used: n, mode: TestMode::Exact })
    } else {
        let nf = n as f64;
        let mu = nf * (nf + 1.0) / 4.0;
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term(&abs) / 48.0;
        let diff = w_plus - mu;
        let z = (diff.abs() - 0.5).max(0.0) / var.sqrt();
        let p = (2.0 * normal_sf(z)).min(1.0);
        Ok(WilcoxonResult { p, w_plus, n_used: n, mode: TestMode::Approximate })
    }
}

// ---- Spearman -------------------------------------------------------------

const SPEARMAN_EXACT_MAX: usize = 10;

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = mean(x);
    let my = mean(y);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for i in 0..x.len() {
        let dx = x[i] - mx;
        let dy = y[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    let _ = n;
    sxy / (sxx.sqrt() * syy.sqrt())
}

/// Spearman rank correlation with a two-sided p-value: exact permutation
/// for n <= 10, t approximation above.
pub fn spearman_rho(x: &[f64], y: &[f64]) -> Result<(f64, f64), StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch(x.len(), y.len()));
    }
    let n = x.len();
    if n < 3 {
        return Err(StatsError::TooFew { need: 3, got: n });
    }
    if x.iter().all(|&v| v == x[0]) || y.iter().all(|&v| v == y[0]) {
        return Err(StatsError::ConstantInput);
    }
    let rx = midranks(x);
    let ry = midranks(y);
    let rho = pearson(&rx, &ry);

    if n <= SPEARMAN_EXACT_MAX {
        // Permute one rank vector over all n! orders; p is the fraction of
        // permutations at least as extreme in |rho|.
        let mut perm: Vec<usize> = (0..n).collect();
        let mut extreme = 0u64;
        let mut total = 0u64;
        let threshold = rho.abs() - 1e-12;
        permute_heap(&mut perm, &mut |p| {
            let permuted: Vec<f64> = p.iter().map(|&i| ry[i]).collect();
            if pearson(&rx, &permuted).abs() >= threshold {
                extreme += 1;
            }
            total += 1;
        });
        Ok((rho, extreme as f64 / total as f64))
    } else {
        let p = if rho.abs() >= 1.0 {
            0.0
        } else {
            let df = (n - 2) as f64;
            let t = rho * (df / (1.0 - rho * rho)).sqrt();
            let dist = StudentsT::new(0.0, 1.0, df).unwrap();
            (2.0 * (1.0 - dist.cdf(t.abs()))).min(1.0)
        };
        Ok((rho, p))
    }
}

fn permute_heap(items: &mut [usize], visit: &mut impl FnMut(&[usize])) {
    fn heap(n: usize, items: &mut [usize], visit: &mut impl FnMut(&[usize])) {
        if n == 1 {
            visit(items);
            return;
        }
        for i in 0..n {
            heap(n - 1, items, visit);
            if n % 2 == 0 {
                items.swap(i, n - 1);
            } else {
                items.swap(0, n - 1);
            }
        }
    }
    let n = items.len();
    heap(n, items, visit);
}

// ---- Mann-Whitney ------------------------------------------------------------

const MANN_WHITNEY_EXACT_MAX: usize = 12;

#[derive(Debug, Clone)]
pub struct MannWhitneyResult {
    pub p: f64,
    pub u: f64,
    pub mode: TestMode,
}

/// Two-sided Mann-Whitney U test on two independent samples.
pub fn mann_whitney(a: &[f64], b: &[f64]) -> Result<MannWhitneyResult, StatsError> {
    if a.is_empty() || b.is_empty() {
        return Err(StatsError::TooFew { need: 1, got: 0 });
    }
    let (na, nb) = (a.len(), b.len());
    let pooled: Vec<f64> = a.iter().chain(b.iter()).copied().collect();
    let ranks = midranks(&pooled);
    let ra: f64 = ranks[..na].iter().sum();
    let u_a = ra - (na * (na + 1)) as f64 / 2.0;

    if na + nb <= MANN_WHITNEY_EXACT_MAX {
        // Enumerate every assignment of group-a slots among the pooled
        // ranks; the observed u's tail probabilities come from the exact
        // distribution of U_a.
        let n = na + nb;
        let mut combo: Vec<usize> = (0..na).collect();
        let mut us: Vec<f64> = Vec::new();
        loop {
            let rsum: f64 = combo.iter().map(|&i| ranks[i]).sum();
            us.push(rsum - (na * (na + 1)) as f64 / 2.0);
            // next combination
            let mut i = na;
            loop {
                if i == 0 {
                    break;
                }
                i -= 1;
                if combo[i] != i + n - na {
                    combo[i] += 1;
                    for j in i + 1..na {
                        combo[j] = combo[j - 1] + 1;
                    }
                    break;
                }
                if i == 0 {
                    combo.clear();
                    break;
                }
            }
            if combo.is_empty() {
                break;
            }
        }
        let total = us.len() as f64;
        let eps = 1e-9;
        let p_le = us.iter().filter(|&&u| u <= u_a + eps).count() as f64 / total;
        let p_ge = us.iter().filter(|&&u| u >= u_a - eps).count() as f64 / total;
        let p = (2.0 * p_le.min(p_ge)).min(1.0);
        Ok(MannWhitneyResult { p, u: u_a, mode: TestMode::Exact })
    } else {
        let (naf, nbf, nf) = (na as f64, nb as f64, (na + nb) as f64);
        let mu = naf * nbf / 2.0;
        let tie = tie_term(&pooled);
        let var = naf * nbf / 12.0 * ((nf + 1.0) - tie / (nf * (nf - 1.0)));
        let z = ((u_a - mu).abs() - 0.5).max(0.0) / var.sqrt();
        let p = (2.0 * normal_sf(z)).min(1.0);
        Ok(MannWhitneyResult { p, u: u_a, mode: TestMode::Approximate })
    }
}

// ---- Fisher exact ------------------------------------------------------------

fn ln_choose(n: u64, k: u64) -> f64 {
    ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0)
}

/// Two-sided Fisher exact test on a 2x2 table via hypergeometric
/// enumeration: the sum of probabilities of all tables with the same
/// margins that are no more likely than the observed one.
pub fn fisher_exact(table: [[u64; 2]; 2]) -> f64 {
    let r1 = table[0][0] + table[0][1];
    let r2 = table[1][0] + table[1][1];
    let c1 = table[0][0] + table[1][0];
    let n = r1 + r2;
    if r1 == 0 || r2 == 0 || c1 == 0 || c1 == n {
        return 1.0;
    }
    let pmf = |k: u64| -> f64 {
        (ln_choose(r1, k) + ln_choose(r2, c1 - k) - ln_choose(n, c1)).exp()
    };
    let lo = c1.saturating_sub(r2);
    let hi = r1.min(c1);
    let p_obs = pmf(table[0][0]);
    let mut p = 0.0;
    for k in lo..=hi {
        let pk = pmf(k);
        if pk <= p_obs * (1.0 + 1e-7) {
            p += pk;
        }
    }
    p.min(1.0)
}

/// ID-vs-OOD style comparison: Mann-Whitney on the per-task deltas and
/// Fisher's exact test on the wins/losses 2x2 table.
#[derive(Debug, Clone)]
pub struct GroupComparison {
    pub mann_whitney_p: f64,
    pub mann_whitney_mode: TestMode,
    pub fisher_p: f64,
    pub win_table: [[u64; 2]; 2],
}

pub fn group_comparison_tests(
    group_a: &[f64],
    group_b: &[f64],
) -> Result<GroupComparison, StatsError> {
    let mw = mann_whitney(group_a, group_b)?;
    let wins = |g: &[f64]| g.iter().filter(|&&d| d > 0.0).count() as u64;
    let table = [
        [wins(group_a), group_a.len() as u64 - wins(group_a)],
        [wins(group_b), group_b.len() as u64 - wins(group_b)],
    ];
    Ok(GroupComparison {
        mann_whitney_p: mw.p,
        mann_whitney_mode: mw.mode,
        fisher_p: fisher_exact(table),
        win_table: table,
    })
}

// ---- bootstrap ----------------------------------------------------------------

/// Percentile bootstrap interval for the mean, deterministic under the seed.
pub fn bootstrap_ci(deltas: &[f64], b: usize, alpha: f64, seed: u64) -> (f64, f64) {
    assert!(b >= 100, "need at least 100 resamples");
    assert!(!deltas.is_empty(), "deltas must be nonempty");
    assert!(alpha > 0.0 && alpha < 1.0);
    let n = deltas.len();
    let mut rng = SplitMix64::derive(seed, &[0xB007]);
    let mut stats: Vec<f64> = (0..b)
        .map(|_| {
            let mut s = 0.0;
            for _ in 0..n {
                s += deltas[rng.next_below(n as u64) as usize];
            }
            s / n as f64
        })
        .collect();
    stats.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let quantile = |q: f64| -> f64 {
        let idx = ((q * b as f64).ceil() as usize).clamp(1, b) - 1;
        stats[idx]
    };
    (quantile(alpha / 2.0), quantile(1.0 - alpha / 2.0))
}

// ---- embedding cosine groups ------------------------------------------------

/// Position-0 bottleneck vectors keyed by (patient, query code).
#[derive(Debug, Clone, Default)]
pub struct EmbeddingSet {
    pub entries: Vec<(u64, CodeId, Vec<f32>)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupStat {
    pub mean: f64,
    pub median: f64,
    pub count: usize,
}

#[derive(Debug, Clone)]
pub struct CosineGroups {
    pub same_query_diff_patient: GroupStat,
    pub same_patient_diff_query: GroupStat,
    pub diff_patient_diff_query: GroupStat,
}

const MAX_PAIRS_PER_GROUP: usize = 1_000_000;

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for i in 0..a.len() {
        dot += a[i] as f64 * b[i] as f64;
        na += a[i] as f64 * a[i] as f64;
        nb += b[i] as f64 * b[i] as f64;
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// Pairwise cosine similarities over all unordered embedding pairs,
/// partitioned into same-query/different-patient, same-patient/different-
/// query, and different/different groups. Groups larger than 10^6 pairs are
/// subsampled with a seeded stream.
pub fn cosine_group_analysis(embs: &EmbeddingSet) -> Result<CosineGroups, StatsError> {
    let entries = &embs.entries;
    let mut patients: Vec<u64> = entries.iter().map(|(p, _, _)| *p).collect();
    patients.sort_unstable();
    patients.dedup();
    let mut queries: Vec<CodeId> = entries.iter().map(|(_, q, _)| *q).collect();
    queries.sort_unstable();
    queries.dedup();
    if patients.len() < 2 || queries.len() < 2 {
        return Err(StatsError::TooFewGroups);
    }
    let dim = entries[0].2.len();
    for (p, q, v) in entries {
        if v.len() != dim {
            return Err(StatsError::LengthMismatch(v.len(), dim));
        }
        if v.iter().all(|&x| x == 0.0) {
            return Err(StatsError::ZeroNormEmbedding(*p, *q));
        }
    }

    let n = entries.len();
    let mut groups: [Vec<f64>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    let total_pairs = n * (n - 1) / 2;
    if total_pairs <= MAX_PAIRS_PER_GROUP {
        for i in 0..n {
            for j in i + 1..n {
                let (pi, qi, vi) = &entries[i];
                let (pj, qj, vj) = &entries[j];
                let g = match (pi == pj, qi == qj) {
                    (false, true) => 0,
                    (true, false) => 1,
                    (false, false) => 2,
                    (true, true) => continue, // duplicate key; skip
                };
                groups[g].push(cosine(vi, vj));
            }
        }
    } else {
        // Seeded pair subsample; group membership decided per drawn pair.
        let mut rng = SplitMix64::derive(0xC05, &[n as u64]);
        let budget = 3 * MAX_PAIRS_PER_GROUP;
        for _ in 0..budget {
            let i = rng.next_below(n as u64) as usize;
            let j = rng.next_below(n as u64) as usize;
            if i == j {
                continue;
            }
            let (pi, qi, vi) = &entries[i];
            let (pj, qj, vj) = &entries[j];
            let g = match (pi == pj, qi == qj) {
                (false, true) => 0,
                (true, false) => 1,
                (false, false) => 2,
                (true, true) => continue,
            };
            if groups[g].len() < MAX_PAIRS_PER_GROUP {
                groups[g].push(cosine(vi, vj));
            }
        }
    }
    let stat = |v: &Vec<f64>| -> Result<GroupStat, StatsError> {
        if v.is_empty() {
            return Err(StatsError::TooFewGroups);
        }
        Ok(GroupStat { mean: mean(v), median: median(v), count: v.len() })
    };
    Ok(CosineGroups {
        same_query_diff_patient: stat(&groups[0])?,
        same_patient_diff_query: stat(&groups[1])?,
        diff_patient_diff_query: stat(&groups[2])?,
    })
}

// ---- task table and prevalence analysis ----------------------------------------

/// Per-task evaluation record (the results-table row).
#[derive(Debug, Clone)]
pub struct TaskResult {
    pub name: String,
    pub is_id: bool,
    /// Positive fraction among uncensored eval samples.
    pub prevalence: f64,
    /// None marks a degenerate task (no positives or no negatives).
    pub auc_eq: Option<f64>,
    pub auc_ar: Option<f64>,
    pub n_pos: usize,
    pub n_neg: usize,
}

impl TaskResult {
    pub fn delta(&self) -> Option<f64> {
        Some(self.auc_eq? - self.auc_ar?)
    }
}

#[derive(Debug, Clone)]
pub struct PrevalenceSummary {
    pub n_tasks: usize,
    pub n_excluded_degenerate: usize,
    pub win_rate: f64,
    pub wins: usize,
    pub mean_delta: f64,
    pub median_delta: f64,
    pub mean_auc_eq: f64,
    pub mean_auc_ar: f64,
    pub spearman_delta_prevalence: (f64, f64),
    pub spearman_auc_ar_prevalence: (f64, f64),
    pub spearman_auc_eq_prevalence: (f64, f64),
}

/// Aggregate statistics over the task table; degenerate tasks are excluded
/// from rank statistics with their count reported.
pub fn prevalence_analysis(results: &[TaskResult]) -> Result<PrevalenceSummary, StatsError> {
    let usable: Vec<&TaskResult> = results.iter().filter(|t| t.delta().is_some()).collect();
    let n_excluded = results.len() - usable.len();
    if usable.len() < 3 {
        return Err(StatsError::TooFew { need: 3, got: usable.len() });
    }
    let deltas: Vec<f64> = usable.iter().map(|t| t.delta().unwrap()).collect();
    let prev: Vec<f64> = usable.iter().map(|t| t.prevalence).collect();
    let auc_eq: Vec<f64> = usable.iter().map(|t| t.auc_eq.unwrap()).collect();
    let auc_ar: Vec<f64> = usable.iter().map(|t| t.auc_ar.unwrap()).collect();
    let wins = deltas.iter().filter(|&&d| d > 0.0).count();
    Ok(PrevalenceSummary {
        n_tasks: usable.len(),
        n_excluded_degenerate: n_excluded,
        win_rate: wins as f64 / usable.len() as f64,
        wins,
        mean_delta: mean(&deltas),
        median_delta: median(&deltas),
        mean_auc_eq: mean(&auc_eq),
        mean_auc_ar: mean(&auc_ar),
        spearman_delta_prevalence: spearman_rho(&deltas, &prev)?,
        spearman_auc_ar_prevalence: spearman_rho(&auc_ar, &prev)?,
        spearman_auc_eq_prevalence: spearman_rho(&auc_eq, &prev)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auroc_perfect_ranking() {
        assert_eq!(auroc(&[0.9, 0.1], &[true, false]), AurocOutcome::Value(1.0));
    }

    #[test]
    fn auroc_all_ties_is_half() {
        assert_eq!(
            auroc(&[0.4, 0.4, 0.4, 0.4], &[true, false, true, false]),
            AurocOutcome::Value(0.5)
        );
    }

    #[test]
    fn auroc_hand_counted_pairs() {
        // Pairs: (0.8,0.2)+, (0.8,0.6)+, (0.4,0.2)+, (0.4,0.6)-: 3 of 4.
        assert_eq!(
            auroc(&[0.2, 0.8, 0.6, 0.4], &[false, true, false, true]),
            AurocOutcome::Value(0.75)
        );
    }

    #[test]
    fn auroc_degenerate_flagged() {
        assert_eq!(
            auroc(&[0.1, 0.9], &[true, true]),
            AurocOutcome::Degenerate { n_pos: 2, n_neg: 0 }
        );
    }

    /// Brute-force all-pairs oracle; exact agreement on grid-valued scores.
    #[test]
    fn auroc_matches_all_pairs_enumeration() {
        fn brute(scores: &[f64], labels: &[bool]) -> f64 {
            let mut num = 0.0;
            let mut den = 0.0;
            for i in 0..scores.len() {
                for j in 0..scores.len() {
                    if labels[i] && !labels[j] {
                        den += 1.0;
                        if scores[i] > scores[j] {
                            num += 1.0;
                        } else if scores[i] == scores[j] {
                            num += 0.5;
                        }
                    }
                }
            }
            num / den
        }
        let mut rng = SplitMix64::new(123);
        let mut done = 0;
        while done < 1000 {
            let n = 2 + rng.next_below(40) as usize;
            let scores: Vec<f64> = (0..n).map(|_| rng.next_below(16) as f64 / 8.0).collect();
            let labels: Vec<bool> = (0..n).map(|_| rng.next_f64() < 0.4).collect();
            match auroc(&scores, &labels) {
                AurocOutcome::Value(v) => {
                    assert_eq!(v, brute(&scores, &labels), "scores {scores:?}");
                    done += 1;
                }
                AurocOutcome::Degenerate { .. } => continue,
            }
        }
    }

    #[test]
    fn wilcoxon_all_positive_distinct() {
        let r = wilcoxon_signed_rank(&[0.1, 0.2, 0.3, 0.4, 0.5]).unwrap();
        assert_eq!(r.mode, TestMode::Exact);
        assert!((r.p - 0.0625).abs() < 1e-12, "p = {}", r.p);
    }

    #[test]
    fn wilcoxon_symmetric_pair_is_one() {
        let r = wilcoxon_signed_rank(&[0.2, -0.2]).unwrap();
        assert_eq!(r.p, 1.0);
    }

    #[test]
    fn wilcoxon_rejects_all_zeros() {
        assert!(matches!(wilcoxon_signed_rank(&[0.0, 0.0]), Err(StatsError::AllZeroDeltas)));
    }

    /// DP distribution vs direct 2^n subset enumeration, exact equality.
    #[test]
    fn wilcoxon_exact_matches_subset_enumeration() {
        let mut rng = SplitMix64::new(77);
        for trial in 0..60 {
            let n = 2 + (trial % 11);
            let deltas: Vec<f64> = (0..n)
                .map(|_| {
                    let mag = (1 + rng.next_below(6)) as f64 / 4.0;
                    if rng.next_f64() < 0.6 {
                        mag
                    } else {
                        -mag
                    }
                })
                .collect();
            let mine = wilcoxon_signed_rank(&deltas).unwrap();
            // Oracle: enumerate sign assignments directly.
            let abs: Vec<f64> = deltas.iter().map(|d| d.abs()).collect();
            let ranks = midranks(&abs);
            let w_obs: f64 =
                ranks.iter().zip(&deltas).filter(|(_, &d)| d > 0.0).map(|(r, _)| r).sum();
            let mut le = 0u64;
            let mut ge = 0u64;
            for mask in 0u64..(1 << n) {
                let w: f64 = (0..n).filter(|&i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
                if w <= w_obs + 1e-9 {
                    le += 1;
                }
                if w >= w_obs - 1e-9 {
                    ge += 1;
                }
            }
            let total = (1u64 << n) as f64;
            let p_oracle = (2.0 * (le.min(ge) as f64) / total).min(1.0);
            assert!(
                (mine.p - p_oracle).abs() < 1e-12,
                "n={n} deltas {deltas:?}: {} vs {p_oracle}",
                mine.p
            );
        }
    }

    #[test]
    fn spearman_perfect_inversion_and_identity() {
        let (rho, _) = spearman_rho(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap();
        assert!((rho + 1.0).abs() < 1e-12);
        let (rho, _) = spearman_rho(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!((rho - 1.0).abs() < 1e-12);
    }

    #[test]
    fn spearman_rejects_constant_input() {
        assert!(matches!(
            spearman_rho(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(StatsError::ConstantInput)
        ));
    }

    /// The built-in exact path must agree with a brute-force enumeration of
    /// all 720 rank permutations at n = 6.
    #[test]
    fn spearman_exact_matches_permutation_oracle() {
        let mut rng = SplitMix64::new(17);
        for _ in 0..10 {
            let x: Vec<f64> = (0..6).map(|_| rng.next_f64()).collect();
            let y: Vec<f64> = (0..6).map(|_| rng.next_f64()).collect();
            let (rho, p) = spearman_rho(&x, &y).unwrap();
            let rx = midranks(&x);
            let ry = midranks(&y);
            let mut perm: Vec<usize> = (0..6).collect();
            let mut extreme = 0u64;
            let mut total = 0u64;
            permute_heap(&mut perm, &mut |pm| {
                let permuted: Vec<f64> = pm.iter().map(|&i| ry[i]).collect();
                if pearson(&rx, &permuted).abs() >= rho.abs() - 1e-12 {
                    extreme += 1;
                }
                total += 1;
            });
            assert_eq!(total, 720);
            assert!((p - extreme as f64 / 720.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mann_whitney_separated_groups_exact() {
        let r = mann_whitney(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
        assert_eq!(r.mode, TestMode::Exact);
        assert!((r.p - 0.1).abs() < 1e-12, "p = {}", r.p);
    }

    #[test]
    fn identical_groups_show_no_effect() {
        let g = [0.3, -0.1, 0.2, 0.5, -0.2, 0.1, 0.4];
        let cmp = group_comparison_tests(&g, &g).unwrap();
        assert_eq!(cmp.mann_whitney_p, 1.0);
        assert_eq!(cmp.fisher_p, 1.0);
    }

    #[test]
    fn fisher_reference_table() {
        // Wins/losses 15/6 vs 17/1.
        let p = fisher_exact([[15, 6], [17, 1]]);
        assert!((p - 0.10).abs() <= 0.02, "p = {p}");
    }

    #[test]
    fn fisher_extreme_table_is_small() {
        let p = fisher_exact([[10, 0], [0, 10]]);
        assert!(p < 1e-4, "p = {p}");
    }

    #[test]
    fn bootstrap_zero_variance() {
        let (lo, hi) = bootstrap_ci(&[0.16; 12], 1000, 0.05, 9);
        assert_eq!(lo, hi, "constant deltas give a degenerate interval");
        assert!((lo - 0.16).abs() < 1e-12);
    }

    #[test]
    fn bootstrap_contains_sample_mean() {
        let mut rng = SplitMix64::new(3);
        for _ in 0..10 {
            let xs: Vec<f64> = (0..25).map(|_| rng.next_normal()).collect();
            let m = mean(&xs);
            let (lo, hi) = bootstrap_ci(&xs, 10_000, 0.05, 11);
            assert!(lo <= m && m <= hi, "mean {m} outside [{lo}, {hi}]");
        }
    }

    #[test]
    fn bootstrap_monotone_in_alpha() {
        let mut rng = SplitMix64::new(5);
        let xs: Vec<f64> = (0..30).map(|_| rng.next_normal()).collect();
        let mut prev = bootstrap_ci(&xs, 5000, 0.01, 2);
        for alpha in [0.05, 0.1, 0.2, 0.5] {
            let ci = bootstrap_ci(&xs, 5000, alpha, 2);
            assert!(ci.0 >= prev.0 - 1e-15 && ci.1 <= prev.1 + 1e-15,
                "alpha {alpha}: {ci:?} wider than {prev:?}");
            prev = ci;
        }
    }

    fn emb(p: u64, q: CodeId, v: &[f32]) -> (u64, CodeId, Vec<f32>) {
        (p, q, v.to_vec())
    }

    #[test]
    fn cosine_groups_identical_embeddings() {
        let e = EmbeddingSet {
            entries: vec![
                emb(1, 0, &[1.0, 2.0]),
                emb(1, 1, &[1.0, 2.0]),
                emb(2, 0, &[1.0, 2.0]),
                emb(2, 1, &[1.0, 2.0]),
            ],
        };
        let g = cosine_group_analysis(&e).unwrap();
        for s in [g.same_query_diff_patient, g.same_patient_diff_query, g.diff_patient_diff_query]
        {
            assert!((s.mean - 1.0).abs() < 1e-9);
            assert!((s.median - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn cosine_groups_constructed_geometry() {
        // Orthogonal per query, identical within query.
        let e = EmbeddingSet {
            entries: vec![
                emb(1, 0, &[1.0, 0.0]),
                emb(2, 0, &[1.0, 0.0]),
                emb(1, 1, &[0.0, 1.0]),
                emb(2, 1, &[0.0, 1.0]),
            ],
        };
        let g = cosine_group_analysis(&e).unwrap();
        assert!((g.same_query_diff_patient.mean - 1.0).abs() < 1e-9);
        assert!(g.same_patient_diff_query.mean.abs() < 1e-9);
        assert!(g.diff_patient_diff_query.mean.abs() < 1e-9);
        assert_eq!(g.same_query_diff_patient.count, 2);
        assert_eq!(g.same_patient_diff_query.count, 2);
        assert_eq!(g.diff_patient_diff_query.count, 2);
    }

    #[test]
    fn cosine_rejects_zero_norm() {
        let e = EmbeddingSet {
            entries: vec![
                emb(1, 0, &[0.0, 0.0]),
                emb(2, 0, &[1.0, 0.0]),
                emb(1, 1, &[0.0, 1.0]),
                emb(2, 1, &[0.0, 1.0]),
            ],
        };
        assert!(matches!(
            cosine_group_analysis(&e),
            Err(StatsError::ZeroNormEmbedding(1, 0))
        ));
    }

    #[test]
    fn cosine_invariant_to_power_of_two_scaling() {
        let mut rng = SplitMix64::new(21);
        let entries: Vec<(u64, CodeId, Vec<f32>)> = (0..12)
            .map(|i| {
                let v: Vec<f32> = (0..8).map(|_| rng.next_normal() as f32).collect();
                (i / 3, (i % 3) as CodeId, v)
            })
            .collect();
        let base = cosine_group_analysis(&EmbeddingSet { entries: entries.clone() }).unwrap();
        let scaled_entries: Vec<(u64, CodeId, Vec<f32>)> = entries
            .into_iter()
            .map(|(p, q, v)| (p, q, v.into_iter().map(|x| x * 4.0).collect()))
            .collect();
        let scaled = cosine_group_analysis(&EmbeddingSet { entries: scaled_entries }).unwrap();
        assert_eq!(base.same_query_diff_patient, scaled.same_query_diff_patient);
        assert_eq!(base.same_patient_diff_query, scaled.same_patient_diff_query);
        assert_eq!(base.diff_patient_diff_query, scaled.diff_patient_diff_query);
    }

    /// The 39-task reference table: delta and prevalence per task, ID flag.
    /// Used to pin the aggregate statistics against reported values.
    pub(super) fn reference_tasks() -> Vec<TaskResult> {
        // (delta, prevalence, is_id, auc_eq)
        let rows: [(f64, f64, bool, f64); 39] = [
            (0.423, 0.0009, true, 0.923),
            (0.415, 0.0019, false, 0.983),
            (0.411, 0.0021, true, 0.925),
            (0.386, 0.0015, true, 0.908),
            (0.361, 0.0005, true, 0.985),
            (0.347, 0.0071, false, 0.971),
            (0.340, 0.0043, true, 0.953),
            (0.337, 0.0055, true, 0.882),
            (0.324, 0.0005, true, 0.810),
            (0.319, 0.0011, true, 0.965),
            (0.316, 0.0055, true, 0.961),
            (0.267, 0.0017, true, 0.920),
            (0.267, 0.0019, true, 0.905),
            (0.256, 0.0025, false, 0.900),
            (0.227, 0.0007, false, 0.861),
            (0.216, 0.0025, false, 0.965),
            (0.208, 0.0037, false, 0.827),
            (0.196, 0.0200, false, 0.949),
            (0.187, 0.0002, false, 0.686),
            (0.176, 0.0026, true, 0.971),
            (0.156, 0.0100, false, 0.818),
            (0.138, 0.0234, false, 0.936),
            (0.134, 0.0133, false, 0.944),
            (0.132, 0.0017, false, 0.761),
            (0.129, 0.0035, false, 0.742),
            (0.088, 0.0299, false, 0.917),
            (0.084, 0.0103, false, 0.956),
            (0.073, 0.0818, true, 0.839),
            (0.063, 0.0429, false, 0.940),
            (0.057, 0.0040, true, 0.770),
            (0.052, 0.0028, true, 0.883),
            (0.023, 0.0821, false, 0.946),
            (-0.023, 0.0057, true, 0.787),
            (-0.061, 0.0031, true, 0.514),
            (-0.063, 0.0104, true, 0.698),
            (-0.083, 0.0027, true, 0.624),
            (-0.112, 0.0006, true, 0.664),
            (-0.266, 0.0043, true, 0.663),
            (-0.267, 0.0001, false, 0.233),
        ];
        rows.iter()
            .enumerate()
            .map(|(i, &(delta, prev, is_id, auc_eq))| TaskResult {
                name: format!("ref{i:02}"),
                is_id,
                prevalence: prev,
                auc_eq: Some(auc_eq),
                auc_ar: Some(auc_eq - delta),
                n_pos: 10,
                n_neg: 100,
            })
            .collect()
    }

    #[test]
    fn reference_table_aggregate_statistics() {
        let tasks = reference_tasks();
        let summary = prevalence_analysis(&tasks).unwrap();
        assert_eq!(summary.n_tasks, 39);
        assert_eq!(summary.wins, 32);
        assert!((summary.win_rate - 32.0 / 39.0).abs() < 1e-12);
        assert!((summary.mean_delta - 0.160).abs() < 0.001, "{}", summary.mean_delta);
        assert!((summary.median_delta - 0.176).abs() < 1e-9);

        let deltas: Vec<f64> = tasks.iter().map(|t| t.delta().unwrap()).collect();
        let w = wilcoxon_signed_rank(&deltas).unwrap();
        assert_eq!(w.mode, TestMode::Approximate);
        assert!(w.p < 1e-4, "signed-rank p = {}", w.p);

        let (lo, hi) = bootstrap_ci(&deltas, 10_000, 0.05, 7);
        assert!((lo - 0.104).abs() <= 0.01, "lo = {lo}");
        assert!((hi - 0.216).abs() <= 0.01, "hi = {hi}");

        // Rare events favour the query-conditioned model; the decomposition
        // shows the trajectory baseline tied to prevalence.
        let (rho_delta, p_delta) = summary.spearman_delta_prevalence;
        assert!((rho_delta + 0.318).abs() <= 0.02, "rho = {rho_delta}");
        assert!((p_delta - 0.048).abs() <= 0.02, "p = {p_delta}");
        let (rho_ar, p_ar) = summary.spearman_auc_ar_prevalence;
        assert!((rho_ar - 0.64).abs() <= 0.02, "rho = {rho_ar}");
        assert!(p_ar < 1e-4);
        let (rho_eq, p_eq) = summary.spearman_auc_eq_prevalence;
        assert!((rho_eq - 0.18).abs() <= 0.02, "rho = {rho_eq}");
        assert!((p_eq - 0.28).abs() <= 0.04, "p = {p_eq}");
    }

    #[test]
    fn reference_table_group_comparison() {
        let tasks = reference_tasks();
        let id: Vec<f64> =
            tasks.iter().filter(|t| t.is_id).map(|t| t.delta().unwrap()).collect();
        let ood: Vec<f64> =
            tasks.iter().filter(|t| !t.is_id).map(|t| t.delta().unwrap()).collect();
        assert_eq!((id.len(), ood.len()), (21, 18));
        assert!((mean(&id) - 0.167).abs() < 0.001);
        assert!((mean(&ood) - 0.152).abs() < 0.001);
        let cmp = group_comparison_tests(&id, &ood).unwrap();
        assert!((cmp.mann_whitney_p - 0.68).abs() <= 0.03, "MW p = {}", cmp.mann_whitney_p);
        assert_eq!(cmp.win_table, [[15, 6], [17, 1]]);
        assert!((cmp.fisher_p - 0.10).abs() <= 0.02, "Fisher p = {}", cmp.fisher_p);
    }

    #[test]
    fn prevalence_analysis_counts_and_exclusions() {
        let mut tasks = reference_tasks();
        tasks[0].auc_ar = None; // degenerate
        let summary = prevalence_analysis(&tasks).unwrap();
        assert_eq!(summary.n_tasks, 38);
        assert_eq!(summary.n_excluded_degenerate, 1);
        let all_pos: Vec<TaskResult> = reference_tasks()
            .into_iter()
            .map(|mut t| {
                t.auc_ar = Some(t.auc_eq.unwrap() - 0.1);
                t
            })
            .collect();
        let s = prevalence_analysis(&all_pos).unwrap();
        assert_eq!(s.win_rate, 1.0);
    }
}
