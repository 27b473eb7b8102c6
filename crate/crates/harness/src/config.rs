//! Run configuration: every knob of the experiment in one plain-text
//! key-value file. Seeds are always explicit; reports carry a hash of the
//! resolved configuration so reruns are verifiable.

use anyhow::{bail, Context, Result};
use eqlab::model::{DecoderConfig, EncoderConfig};
use eqlab::textkv::TextKv;
use eqlab::trainer::TrainHyper;
use sha2::{Digest, Sha256};
use std::path::Path;

/// Prevalence spectrum targets: three or more task codes per target span
/// the rare-event axis.
pub const TIER_TARGETS: [f64; 8] = [0.3, 0.2, 0.1, 0.05, 0.02, 0.01, 0.005, 0.002];

/// Per-tier boost factors; rarer tiers get stronger history dependence so
/// the signal stays learnable at low prevalence.
pub const TIER_BOOST_FACTORS: [f64; 8] = [3.0, 3.0, 4.0, 5.0, 8.0, 10.0, 12.0, 12.0];

/// OOD task quota per tier (commonest first). Held-out query codes are
/// evaluated where their embeddings receive enough history-side training;
/// the rarest tiers stay in-distribution.
pub const TIER_OOD_QUOTA: [usize; 8] = [2, 2, 1, 1, 1, 1, 0, 0];

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorKnobs {
    pub gap_mean_hours: f64,
    pub record_min_events: u32,
    pub record_max_events: u32,
    pub codes_per_tier: usize,
    pub n_family: usize,
    pub n_filler: usize,
    pub trigger_rate: f64,
    pub trigger_window_h: f64,
    /// 30-day window prevalence per admission-family code.
    pub family_window_prev: f64,
    /// 30-day window probability of the absorbing (terminal) code.
    pub absorbing_window_prev: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub label: String,
    pub master_seed: u64,
    pub eval_seed: u64,
    pub n_patients: usize,
    pub split: (f64, f64, f64),
    pub generator_config_path: Option<String>,
    pub gen: GeneratorKnobs,
    pub id_fraction: f64,
    pub tasks_per_tier: usize,
    pub k_trajectories: usize,
    pub horizon_days: f64,

    pub enc_layers: usize,
    pub enc_d_model: usize,
    pub enc_heads: usize,
    pub enc_head_mlp: usize,
    pub enc_max_len: usize,
    pub dec_layers: usize,
    pub dec_d_model: usize,
    pub dec_heads: usize,
    pub dec_context_len: usize,
    pub dec_max_positions: usize,
    pub dropout: f64,

    pub eq_batch: usize,
    pub eq_peak_lr: f64,
    pub eq_warmup: u64,
    pub eq_max_steps: u64,
    pub ar_batch: usize,
    pub ar_peak_lr: f64,
    pub ar_warmup: u64,
    pub ar_max_steps: u64,
    pub val_every: u64,
    pub patience: u32,
    pub min_delta: f64,
    pub weight_decay: f64,
    pub lambda_occ: f64,
    pub min_events: usize,
    pub val_set_size: usize,
    pub ar_val_windows: usize,

    pub timing_patients: usize,
    pub embed_patients: usize,
    pub workers: usize,
}

impl RunConfig {
    /// Full-scale configuration for the headline experiment.
    pub fn acceptance(master_seed: u64) -> Self {
        RunConfig {
            label: "acceptance".into(),
            master_seed,
            eval_seed: master_seed.wrapping_mul(1000).wrapping_add(77),
            n_patients: 5000,
            split: (0.70, 0.10, 0.20),
            generator_config_path: None,
            gen: GeneratorKnobs {
                gap_mean_hours: 16.0,
                record_min_events: 200,
                record_max_events: 400,
                codes_per_tier: 10,
                n_family: 5,
                n_filler: 10,
                trigger_rate: 0.024,
                trigger_window_h: 240.0,
                family_window_prev: 0.055,
                absorbing_window_prev: 0.012,
            },
            id_fraction: 0.8,
            tasks_per_tier: 3,
            k_trajectories: 20,
            horizon_days: 30.0,
            enc_layers: 2,
            enc_d_model: 64,
            enc_heads: 4,
            enc_head_mlp: 64,
            enc_max_len: 64,
            dec_layers: 2,
            dec_d_model: 64,
            dec_heads: 4,
            dec_context_len: 64,
            dec_max_positions: 192,
            dropout: 0.1,
            eq_batch: 32,
            eq_peak_lr: 3e-4,
            eq_warmup: 200,
            eq_max_steps: 1600,
            ar_batch: 8,
            ar_peak_lr: 1e-3,
            ar_warmup: 100,
            ar_max_steps: 900,
            val_every: 100,
            patience: 8,
            min_delta: 5e-5,
            weight_decay: 0.05,
            lambda_occ: 1.0,
            min_events: 20,
            val_set_size: 2048,
            ar_val_windows: 96,
            timing_patients: 300,
            embed_patients: 48,
            workers: 2,
        }
    }

    /// Minutes-scale pipeline exercise: every stage and report, tiny sizes.
    pub fn smoke(master_seed: u64) -> Self {
        let mut cfg = Self::acceptance(master_seed);
        cfg.label = "smoke".into();
        cfg.n_patients = 200;
        cfg.gen.record_min_events = 120;
        cfg.gen.record_max_events = 240;
        cfg.eq_max_steps = 400;
        cfg.eq_warmup = 50;
        cfg.ar_max_steps = 250;
        cfg.ar_warmup = 30;
        cfg.val_every = 50;
        cfg.patience = 6;
        cfg.val_set_size = 256;
        cfg.ar_val_windows = 24;
        cfg.timing_patients = 24;
        cfg.embed_patients = 12;
        cfg
    }

    pub fn encoder_config(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            layers: self.enc_layers,
            d_model: self.enc_d_model,
            heads: self.enc_heads,
            head_mlp_hidden: self.enc_head_mlp,
            max_len: self.enc_max_len,
            vocab_size,
            dropout: self.dropout,
        }
    }

    pub fn decoder_config(&self, vocab_size: usize) -> DecoderConfig {
        DecoderConfig {
            layers: self.dec_layers,
            d_model: self.dec_d_model,
            heads: self.dec_heads,
            max_positions: self.dec_max_positions,
            context_len: self.dec_context_len,
            vocab_size,
            dropout: self.dropout,
        }
    }

    pub fn eq_hyper(&self) -> TrainHyper {
        TrainHyper {
            batch_size: self.eq_batch,
            peak_lr: self.eq_peak_lr,
            warmup_steps: self.eq_warmup,
            max_steps: self.eq_max_steps,
            weight_decay: self.weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            val_every: self.val_every,
            patience: self.patience,
            min_delta: self.min_delta,
            lambda_occ: self.lambda_occ,
            min_events: self.min_events,
            horizon_days: self.horizon_days,
            val_set_size: self.val_set_size,
            ar_window: self.dec_max_positions,
            ar_batch_size: self.ar_batch,
            ar_val_windows: self.ar_val_windows,
            master_seed: self.master_seed,
        }
    }

    pub fn ar_hyper(&self) -> TrainHyper {
        TrainHyper {
            peak_lr: self.ar_peak_lr,
            warmup_steps: self.ar_warmup,
            max_steps: self.ar_max_steps,
            ..self.eq_hyper()
        }
    }

    pub fn to_textkv(&self) -> TextKv {
        let mut kv = TextKv::new();
        kv.push("label", &self.label);
        kv.push("master_seed", self.master_seed);
        kv.push("eval_seed", self.eval_seed);
        kv.push("n_patients", self.n_patients);
        kv.push("split", format!("{},{},{}", self.split.0, self.split.1, self.split.2));
        if let Some(p) = &self.generator_config_path {
            kv.push("generator_config", p);
        }
        kv.push("gap_mean_hours", self.gen.gap_mean_hours);
        kv.push("record_min_events", self.gen.record_min_events);
        kv.push("record_max_events", self.gen.record_max_events);
        kv.push("codes_per_tier", self.gen.codes_per_tier);
        kv.push("n_family", self.gen.n_family);
        kv.push("n_filler", self.gen.n_filler);
        kv.push("trigger_rate", self.gen.trigger_rate);
        kv.push("trigger_window_h", self.gen.trigger_window_h);
        kv.push("family_window_prev", self.gen.family_window_prev);
        kv.push("absorbing_window_prev", self.gen.absorbing_window_prev);
        kv.push("id_fraction", self.id_fraction);
        kv.push("tasks_per_tier", self.tasks_per_tier);
        kv.push("k_trajectories", self.k_trajectories);
        kv.push("horizon_days", self.horizon_days);
        kv.push("enc_layers", self.enc_layers);
        kv.push("enc_d_model", self.enc_d_model);
        kv.push("enc_heads", self.enc_heads);
        kv.push("enc_head_mlp", self.enc_head_mlp);
        kv.push("enc_max_len", self.enc_max_len);
        kv.push("dec_layers", self.dec_layers);
        kv.push("dec_d_model", self.dec_d_model);
        kv.push("dec_heads", self.dec_heads);
        kv.push("dec_context_len", self.dec_context_len);
        kv.push("dec_max_positions", self.dec_max_positions);
        kv.push("dropout", self.dropout);
        kv.push("eq_batch", self.eq_batch);
        kv.push("eq_peak_lr", self.eq_peak_lr);
        kv.push("eq_warmup", self.eq_warmup);
        kv.push("eq_max_steps", self.eq_max_steps);
        kv.push("ar_batch", self.ar_batch);
        kv.push("ar_peak_lr", self.ar_peak_lr);
        kv.push("ar_warmup", self.ar_warmup);
        kv.push("ar_max_steps", self.ar_max_steps);
        kv.push("val_every", self.val_every);
        kv.push("patience", self.patience);
        kv.push("min_delta", self.min_delta);
        kv.push("weight_decay", self.weight_decay);
        kv.push("lambda_occ", self.lambda_occ);
        kv.push("min_events", self.min_events);
        kv.push("val_set_size", self.val_set_size);
        kv.push("ar_val_windows", self.ar_val_windows);
        kv.push("timing_patients", self.timing_patients);
        kv.push("embed_patients", self.embed_patients);
        kv.push("workers", self.workers);
        kv
    }

    pub fn from_textkv(kv: &TextKv) -> Result<Self> {
        let split_str = kv.require("split")?;
        let parts: Vec<f64> = split_str
            .split(',')
            .map(|s| s.trim().parse())
            .collect::<Result<_, _>>()
            .with_context(|| format!("bad split {split_str:?}"))?;
        if parts.len() != 3 {
            bail!("split must have three fractions, got {split_str:?}");
        }
        macro_rules! get {
            ($key:literal, $ty:literal) => {
                kv.parse_value($key, $ty)?
            };
        }
        Ok(RunConfig {
            label: kv.require("label")?.to_string(),
            master_seed: get!("master_seed", "u64"),
            eval_seed: get!("eval_seed", "u64"),
            n_patients: get!("n_patients", "usize"),
            split: (parts[0], parts[1], parts[2]),
            generator_config_path: kv.get("generator_config").map(str::to_string),
            gen: GeneratorKnobs {
                gap_mean_hours: get!("gap_mean_hours", "f64"),
                record_min_events: get!("record_min_events", "u32"),
                record_max_events: get!("record_max_events", "u32"),
                codes_per_tier: get!("codes_per_tier", "usize"),
                n_family: get!("n_family", "usize"),
                n_filler: get!("n_filler", "usize"),
                trigger_rate: get!("trigger_rate", "f64"),
                trigger_window_h: get!("trigger_window_h", "f64"),
                family_window_prev: get!("family_window_prev", "f64"),
                absorbing_window_prev: get!("absorbing_window_prev", "f64"),
            },
            id_fraction: get!("id_fraction", "f64"),
            tasks_per_tier: get!("tasks_per_tier", "usize"),
            k_trajectories: get!("k_trajectories", "usize"),
            horizon_days: get!("horizon_days", "f64"),
            enc_layers: get!("enc_layers", "usize"),
            enc_d_model: get!("enc_d_model", "usize"),
            enc_heads: get!("enc_heads", "usize"),
            enc_head_mlp: get!("enc_head_mlp", "usize"),
            enc_max_len: get!("enc_max_len", "usize"),
            dec_layers: get!("dec_layers", "usize"),
            dec_d_model: get!("dec_d_model", "usize"),
            dec_heads: get!("dec_heads", "usize"),
            dec_context_len: get!("dec_context_len", "usize"),
            dec_max_positions: get!("dec_max_positions", "usize"),
            dropout: get!("dropout", "f64"),
            eq_batch: get!("eq_batch", "usize"),
            eq_peak_lr: get!("eq_peak_lr", "f64"),
            eq_warmup: get!("eq_warmup", "u64"),
            eq_max_steps: get!("eq_max_steps", "u64"),
            ar_batch: get!("ar_batch", "usize"),
            ar_peak_lr: get!("ar_peak_lr", "f64"),
            ar_warmup: get!("ar_warmup", "u64"),
            ar_max_steps: get!("ar_max_steps", "u64"),
            val_every: get!("val_every", "u64"),
            patience: get!("patience", "u32"),
            min_delta: get!("min_delta", "f64"),
            weight_decay: get!("weight_decay", "f64"),
            lambda_occ: get!("lambda_occ", "f64"),
            min_events: get!("min_events", "usize"),
            val_set_size: get!("val_set_size", "usize"),
            ar_val_windows: get!("ar_val_windows", "usize"),
            timing_patients: get!("timing_patients", "usize"),
            embed_patients: get!("embed_patients", "usize"),
            workers: get!("workers", "usize"),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading run config {}", path.display()))?;
        let kv = TextKv::parse(&text).context("parsing run config")?;
        Self::from_textkv(&kv)
    }

    /// Hash of the resolved configuration; stamped on every report file.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.to_textkv().render().as_bytes());
        let digest = hasher.finalize();
        hex_prefix(&digest, 16)
    }
}

fn hex_prefix(bytes: &[u8], chars: usize) -> String {
    let mut s = String::new();
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
        if s.len() >= chars {
            break;
        }
    }
    s.truncate(chars);
    s
}
