//! Report writers and the readers the determinism checks use. Every file
//! starts with a `# config_hash=` line; numbers are fixed-format so reruns
//! are byte-comparable.

use anyhow::{Context, Result};
use eqlab::stats::{CosineGroups, PrevalenceSummary, TaskResult};
use std::fmt::Write as _;
use std::path::Path;

pub fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.6}"),
        None => "NA".to_string(),
    }
}

pub fn write_tasks_csv(path: &Path, config_hash: &str, rows: &[TaskResult]) -> Result<()> {
    let mut out = format!("# config_hash={config_hash}\n");
    out.push_str("task,id_ood,prevalence,auc_eq,auc_ar,delta,n_pos,n_neg\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{:.6},{},{},{},{},{}",
            r.name,
            if r.is_id { "id" } else { "ood" },
            r.prevalence,
            fmt_opt(r.auc_eq),
            fmt_opt(r.auc_ar),
            fmt_opt(r.delta()),
            r.n_pos,
            r.n_neg
        )
        .unwrap();
    }
    std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

pub fn parse_tasks_csv(path: &Path) -> Result<Vec<TaskResult>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut rows = Vec::new();
    for line in text.lines() {
        if line.starts_with('#') || line.starts_with("task,") || line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        anyhow::ensure!(f.len() == 8, "bad task row {line:?}");
        let opt = |s: &str| -> Result<Option<f64>> {
            if s == "NA" {
                Ok(None)
            } else {
                Ok(Some(s.parse()?))
            }
        };
        rows.push(TaskResult {
            name: f[0].to_string(),
            is_id: f[1] == "id",
            prevalence: f[2].parse()?,
            auc_eq: opt(f[3])?,
            auc_ar: opt(f[4])?,
            n_pos: f[6].parse()?,
            n_neg: f[7].parse()?,
        });
    }
    Ok(rows)
}

/// One prediction per line: `subject_id,task,mode,score,label,censored`.
pub struct PredictionRow {
    pub subject_id: u64,
    pub task: String,
    pub mode: &'static str,
    pub score: f64,
    pub label: bool,
}

pub fn write_predictions_csv(
    path: &Path,
    config_hash: &str,
    rows: &[PredictionRow],
) -> Result<()> {
    let mut out = format!("# config_hash={config_hash}\n");
    out.push_str("subject_id,task,mode,score,label,censored\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{:.6},{},0",
            r.subject_id,
            r.task,
            r.mode,
            r.score,
            if r.label { 1 } else { 0 }
        )
        .unwrap();
    }
    std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

pub struct DisjunctiveReport {
    pub prevalence: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    pub auc_eq_max: Option<f64>,
    pub auc_eq_independence: Option<f64>,
    pub auc_ar_any: Option<f64>,
}

pub struct SummaryInputs<'a> {
    pub config_hash: &'a str,
    pub label: &'a str,
    pub master_seed: u64,
    pub eval_seed: u64,
    pub n_eval_patients: usize,
    pub k: usize,
    pub aggregate: Option<&'a PrevalenceSummary>,
    pub wilcoxon: Option<(f64, &'a str)>,
    pub bootstrap: Option<(f64, f64)>,
    pub id_group: Option<(usize, usize, f64)>,
    pub ood_group: Option<(usize, usize, f64)>,
    pub mann_whitney_p: Option<f64>,
    pub fisher_p: Option<f64>,
    pub disjunctive: &'a DisjunctiveReport,
    pub absorbing: Option<&'a TaskResult>,
}

pub fn write_summary(path: &Path, s: &SummaryInputs<'_>) -> Result<()> {
    let mut out = format!("# config_hash={}\n", s.config_hash);
    let mut kv = |k: &str, v: String| {
        out.push_str(k);
        out.push_str(" = ");
        out.push_str(&v);
        out.push('\n');
    };
    kv("label", s.label.to_string());
    kv("master_seed", s.master_seed.to_string());
    kv("eval_seed", s.eval_seed.to_string());
    kv("n_eval_patients", s.n_eval_patients.to_string());
    kv("k_trajectories", s.k.to_string());
    match s.aggregate {
        Some(a) => {
            kv("n_tasks", a.n_tasks.to_string());
            kv("n_degenerate_excluded", a.n_excluded_degenerate.to_string());
            kv("wins", a.wins.to_string());
            kv("win_rate", format!("{:.6}", a.win_rate));
            kv("mean_delta", format!("{:.6}", a.mean_delta));
            kv("median_delta", format!("{:.6}", a.median_delta));
            kv("mean_auc_eq", format!("{:.6}", a.mean_auc_eq));
            kv("mean_auc_ar", format!("{:.6}", a.mean_auc_ar));
            kv("spearman_delta_prevalence_rho", format!("{:.6}", a.spearman_delta_prevalence.0));
            kv("spearman_delta_prevalence_p", format!("{:.6}", a.spearman_delta_prevalence.1));
            kv("spearman_auc_ar_prevalence_rho", format!("{:.6}", a.spearman_auc_ar_prevalence.0));
            kv("spearman_auc_ar_prevalence_p", format!("{:.6}", a.spearman_auc_ar_prevalence.1));
            kv("spearman_auc_eq_prevalence_rho", format!("{:.6}", a.spearman_auc_eq_prevalence.0));
            kv("spearman_auc_eq_prevalence_p", format!("{:.6}", a.spearman_auc_eq_prevalence.1));
        }
        None => kv("n_tasks", "NA".into()),
    }
    match s.wilcoxon {
        Some((p, mode)) => {
            kv("wilcoxon_p", format!("{p:.6e}"));
            kv("wilcoxon_mode", mode.to_string());
        }
        None => kv("wilcoxon_p", "NA".into()),
    }
    match s.bootstrap {
        Some((lo, hi)) => {
            kv("bootstrap_ci_lo", format!("{lo:.6}"));
            kv("bootstrap_ci_hi", format!("{hi:.6}"));
        }
        None => kv("bootstrap_ci_lo", "NA".into()),
    }
    let group = |kv: &mut dyn FnMut(&str, String), tag: &str, g: Option<(usize, usize, f64)>| {
        match g {
            Some((wins, n, mean_delta)) => {
                kv(&format!("{tag}_wins"), wins.to_string());
                kv(&format!("{tag}_tasks"), n.to_string());
                kv(&format!("{tag}_mean_delta"), format!("{mean_delta:.6}"));
            }
            None => kv(&format!("{tag}_tasks"), "NA".into()),
        }
    };
    group(&mut kv, "id", s.id_group);
    group(&mut kv, "ood", s.ood_group);
    kv(
        "mann_whitney_p",
        s.mann_whitney_p.map(|p| format!("{p:.6}")).unwrap_or("NA".into()),
    );
    kv("fisher_p", s.fisher_p.map(|p| format!("{p:.6}")).unwrap_or("NA".into()));
    kv("disjunctive_prevalence", format!("{:.6}", s.disjunctive.prevalence));
    kv("disjunctive_n_pos", s.disjunctive.n_pos.to_string());
    kv("disjunctive_n_neg", s.disjunctive.n_neg.to_string());
    kv("disjunctive_auc_eq_max", fmt_opt(s.disjunctive.auc_eq_max));
    kv("disjunctive_auc_eq_independence", fmt_opt(s.disjunctive.auc_eq_independence));
    kv("disjunctive_auc_ar_any", fmt_opt(s.disjunctive.auc_ar_any));
    match s.absorbing {
        Some(t) => {
            kv("absorbing_task", t.name.clone());
            kv("absorbing_prevalence", format!("{:.6}", t.prevalence));
            kv("absorbing_auc_eq", fmt_opt(t.auc_eq));
            kv("absorbing_auc_ar", fmt_opt(t.auc_ar));
        }
        None => kv("absorbing_task", "NA".into()),
    }
    std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

pub fn write_embeddings_report(
    path: &Path,
    config_hash: &str,
    n_patients: usize,
    n_queries: usize,
    groups: &CosineGroups,
) -> Result<()> {
    let mut out = format!("# config_hash={config_hash}\n");
    let mut kv = |k: &str, v: String| {
        out.push_str(k);
        out.push_str(" = ");
        out.push_str(&v);
        out.push('\n');
    };
    kv("n_patients", n_patients.to_string());
    kv("n_queries", n_queries.to_string());
    for (tag, g) in [
        ("same_query_diff_patient", groups.same_query_diff_patient),
        ("same_patient_diff_query", groups.same_patient_diff_query),
        ("diff_patient_diff_query", groups.diff_patient_diff_query),
    ] {
        kv(&format!("{tag}_mean"), format!("{:.6}", g.mean));
        kv(&format!("{tag}_median"), format!("{:.6}", g.median));
        kv(&format!("{tag}_count"), g.count.to_string());
    }
    std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

pub struct TimingInputs<'a> {
    pub config_hash: &'a str,
    pub label: &'a str,
    pub task: &'a str,
    pub n_patients: usize,
    pub k: usize,
    pub eq: &'a eqlab::inference::TimingReport,
    pub ar: &'a eqlab::inference::TimingReport,
}

pub fn write_timing(path: &Path, t: &TimingInputs<'_>) -> Result<()> {
    let mut out = format!("# config_hash={}\n", t.config_hash);
    let mut kv = |k: &str, v: String| {
        out.push_str(k);
        out.push_str(" = ");
        out.push_str(&v);
        out.push('\n');
    };
    kv("label", t.label.to_string());
    kv("task", t.task.to_string());
    kv("n_patients", t.n_patients.to_string());
    kv("k_trajectories", t.k.to_string());
    kv("workers", t.eq.workers.to_string());
    kv("arch", std::env::consts::ARCH.to_string());
    kv("eq_wall_seconds", format!("{:.4}", t.eq.wall_seconds));
    kv("eq_per_patient_ms", format!("{:.4}", t.eq.per_patient_ms));
    kv("eq_forward_passes", t.eq.forward_pass_count.to_string());
    kv("ar_wall_seconds", format!("{:.4}", t.ar.wall_seconds));
    kv("ar_per_patient_ms", format!("{:.4}", t.ar.per_patient_ms));
    kv("ar_trajectories", t.ar.forward_pass_count.to_string());
    kv("speedup_eq_over_ar", format!("{:.2}", t.ar.wall_seconds / t.eq.wall_seconds));
    std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

/// Reads a `key = value` report back; used by the acceptance checks.
pub fn read_report(path: &Path) -> Result<eqlab::textkv::TextKv> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(eqlab::textkv::TextKv::parse(&text)?)
}
