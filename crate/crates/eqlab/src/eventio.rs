//! On-disk event format, vocabulary construction, and everything-is-code
//! tokenization.
//!
//! Event files are UTF-8 text, one event per line, `subject|hours|code`,
//! sorted by (subject, timestamp). Tokenized sequences interleave code
//! tokens with time-gap tokens; gaps are bucketed into configured bins, and
//! each bin owns one token. Context windows keep the most recent tokens
//! (TO_END) when the encoding exceeds the budget.

use crate::synthgen::{CodeId, Event, PatientRecord};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

pub type TokenId = u32;

/// Log-spaced default boundaries: 5 min, 1 h, 6 h, 1 d, 7 d, 30 d (hours).
pub const DEFAULT_GAP_BINS: [f64; 6] = [5.0 / 60.0, 1.0, 6.0, 24.0, 168.0, 720.0];

#[derive(Debug, Error)]
pub enum EventIoError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("code {0:?} absent from vocabulary")]
    UnknownCode(String),
    #[error("cohort is empty")]
    EmptyCohort,
    #[error("gap bin boundaries must be strictly increasing and positive")]
    BadGapBins,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Code,
    Gap,
    Special,
}

/// Dense token space: code tokens (lexicographic by identifier), then one
/// token per gap bucket, then the padding and sequence-start specials.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeVocab {
    code_to_token: BTreeMap<String, TokenId>,
    identifiers: Vec<String>,
    kinds: Vec<TokenKind>,
    gap_bins: Vec<f64>,
    n_codes: usize,
    /// Dense CodeId -> token lookup for codes of the canonical `C<nnn>` form.
    code_id_to_token: Vec<Option<TokenId>>,
    token_to_code_id: Vec<Option<CodeId>>,
}

pub fn code_identifier(code: CodeId) -> String {
    format!("C{code:03}")
}

fn parse_code_identifier(ident: &str) -> Option<CodeId> {
    ident.strip_prefix('C')?.parse().ok()
}

impl CodeVocab {
    fn build(identifiers: Vec<String>, gap_bins: &[f64]) -> Result<Self, EventIoError> {
        if gap_bins.iter().any(|&b| b <= 0.0)
            || gap_bins.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(EventIoError::BadGapBins);
        }
        let n_codes = identifiers.len();
        let n_gaps = gap_bins.len() + 1;
        let mut idents = identifiers;
        let mut kinds = vec![TokenKind::Code; n_codes];
        for i in 0..n_gaps {
            let lo = if i == 0 { 0.0 } else { gap_bins[i - 1] };
            let hi = if i == gap_bins.len() { f64::INFINITY } else { gap_bins[i] };
            let mut ident = String::new();
            write!(ident, "GAP_{i}_{lo}_{hi}").unwrap();
            idents.push(ident);
            kinds.push(TokenKind::Gap);
        }
        idents.push("PAD".to_string());
        idents.push("START".to_string());
        kinds.push(TokenKind::Special);
        kinds.push(TokenKind::Special);

        let mut code_to_token = BTreeMap::new();
        for (t, ident) in idents.iter().take(n_codes).enumerate() {
            code_to_token.insert(ident.clone(), t as TokenId);
        }
        let max_code = idents
            .iter()
            .take(n_codes)
            .filter_map(|s| parse_code_identifier(s))
            .max()
            .map(|c| c as usize + 1)
            .unwrap_or(0);
        let mut code_id_to_token = vec![None; max_code];
        let mut token_to_code_id = vec![None; idents.len()];
        for (t, ident) in idents.iter().take(n_codes).enumerate() {
            if let Some(c) = parse_code_identifier(ident) {
                code_id_to_token[c as usize] = Some(t as TokenId);
                token_to_code_id[t] = Some(c);
            }
        }
        Ok(CodeVocab {
            code_to_token,
            identifiers: idents,
            kinds,
            gap_bins: gap_bins.to_vec(),
            n_codes,
            code_id_to_token,
            token_to_code_id,
        })
    }

    pub fn n_tokens(&self) -> usize {
        self.identifiers.len()
    }

    pub fn n_codes(&self) -> usize {
        self.n_codes
    }

    pub fn n_gap_buckets(&self) -> usize {
        self.gap_bins.len() + 1
    }

    pub fn gap_bins(&self) -> &[f64] {
        &self.gap_bins
    }

    pub fn pad_token(&self) -> TokenId {
        (self.identifiers.len() - 2) as TokenId
    }

    pub fn start_token(&self) -> TokenId {
        (self.identifiers.len() - 1) as TokenId
    }

    pub fn token_kind(&self, t: TokenId) -> TokenKind {
        self.kinds[t as usize]
    }

    pub fn identifier(&self, t: TokenId) -> &str {
        &self.identifiers[t as usize]
    }

    pub fn token_of_identifier(&self, ident: &str) -> Option<TokenId> {
        self.code_to_token.get(ident).copied()
    }

    pub fn code_token(&self, code: CodeId) -> Result<TokenId, EventIoError> {
        self.code_id_to_token
            .get(code as usize)
            .copied()
            .flatten()
            .ok_or_else(|| EventIoError::UnknownCode(code_identifier(code)))
    }

    pub fn code_of_token(&self, t: TokenId) -> Option<CodeId> {
        self.token_to_code_id.get(t as usize).copied().flatten()
    }

    /// All code ids present in the vocabulary, ascending.
    pub fn code_ids(&self) -> Vec<CodeId> {
        self.token_to_code_id.iter().filter_map(|c| *c).collect()
    }

    pub fn gap_bucket(&self, gap_h: f64) -> usize {
        self.gap_bins.partition_point(|&b| gap_h >= b)
    }

    pub fn gap_token(&self, gap_h: f64) -> TokenId {
        (self.n_codes + self.gap_bucket(gap_h)) as TokenId
    }

    /// Representative elapsed time of a gap token: geometric mean of the bin
    /// edges, half the upper edge for the first bin, twice the lower edge
    /// for the open-ended top bin.
    pub fn gap_representative(&self, t: TokenId) -> Option<f64> {
        if self.token_kind(t) != TokenKind::Gap {
            return None;
        }
        let i = t as usize - self.n_codes;
        Some(self.bucket_representative(i))
    }

    fn bucket_representative(&self, bucket: usize) -> f64 {
        let k = self.gap_bins.len();
        if k == 0 {
            return 0.0;
        }
        if bucket == 0 {
            self.gap_bins[0] / 2.0
        } else if bucket == k {
            2.0 * self.gap_bins[k - 1]
        } else {
            (self.gap_bins[bucket - 1] * self.gap_bins[bucket]).sqrt()
        }
    }

    /// Bucket width used by the reconstruction invariant; infinite bins
    /// count as their lower edge.
    pub fn bucket_width(&self, bucket: usize) -> f64 {
        let k = self.gap_bins.len();
        if bucket == 0 {
            self.gap_bins[0]
        } else if bucket == k {
            2.0 * self.gap_bins[k - 1]
        } else {
            self.gap_bins[bucket] - self.gap_bins[bucket - 1]
        }
    }
}

/// Deterministic vocabulary over every code observed in the cohort,
/// lexicographic by identifier, with gap and special tokens appended.
pub fn build_vocab(cohort: &[PatientRecord], gap_bins: &[f64]) -> Result<CodeVocab, EventIoError> {
    if cohort.is_empty() {
        return Err(EventIoError::EmptyCohort);
    }
    let mut seen: BTreeMap<String, ()> = BTreeMap::new();
    for rec in cohort {
        for e in &rec.events {
            seen.entry(code_identifier(e.code)).or_insert(());
        }
    }
    CodeVocab::build(seen.into_keys().collect(), gap_bins)
}

// ---- event lines -------------------------------------------------------------

/// Parses one canonical event line: `subject_id|timestamp_hours|code`.
pub fn parse_event_line(line: &str) -> Result<(u64, f64, String), EventIoError> {
    let err = |msg: String| EventIoError::Parse { line: 0, msg };
    let mut parts = line.split('|');
    let (a, b, c) = match (parts.next(), parts.next(), parts.next(), parts.next()) {
        (Some(a), Some(b), Some(c), None) => (a, b, c),
        _ => return Err(err(format!("expected 3 `|`-separated fields, got {line:?}"))),
    };
    let subject: u64 =
        a.parse().map_err(|_| err(format!("cannot parse subject id {a:?}")))?;
    let ts: f64 = b.parse().map_err(|_| err(format!("cannot parse timestamp {b:?}")))?;
    if !ts.is_finite() {
        return Err(err(format!("timestamp {b:?} is not finite")));
    }
    if c.is_empty() {
        return Err(err("empty code field".to_string()));
    }
    Ok((subject, ts, c.to_string()))
}

pub fn format_event_line(subject: u64, time_h: f64, code: CodeId) -> String {
    format!("{subject}|{time_h}|{}", code_identifier(code))
}

pub fn write_cohort(path: &Path, cohort: &[PatientRecord]) -> Result<(), EventIoError> {
    let mut sorted: Vec<&PatientRecord> = cohort.iter().collect();
    sorted.sort_by_key(|r| r.subject_id);
    let mut out = String::new();
    for rec in sorted {
        for e in &rec.events {
            out.push_str(&format_event_line(rec.subject_id, e.time_h, e.code));
            out.push('\n');
        }
    }
    std::fs::write(path, out)
        .map_err(|source| EventIoError::Io { path: path.display().to_string(), source })
}

pub fn load_cohort(path: &Path) -> Result<Vec<PatientRecord>, EventIoError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| EventIoError::Io { path: path.display().to_string(), source })?;
    let mut records: Vec<PatientRecord> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (subject, ts, ident) = parse_event_line(line).map_err(|e| match e {
            EventIoError::Parse { msg, .. } => EventIoError::Parse { line: i + 1, msg },
            other => other,
        })?;
        let code = parse_code_identifier(&ident).ok_or(EventIoError::Parse {
            line: i + 1,
            msg: format!("code {ident:?} is not of the canonical C<n> form"),
        })?;
        match records.last_mut() {
            Some(last) if last.subject_id == subject => {
                last.events.push(Event { time_h: ts, code })
            }
            _ => records
                .push(PatientRecord { subject_id: subject, events: vec![Event { time_h: ts, code }] }),
        }
    }
    Ok(records)
}

pub fn write_vocab(path: &Path, vocab: &CodeVocab) -> Result<(), EventIoError> {
    let mut out = String::new();
    for t in 0..vocab.n_tokens() {
        let kind = match vocab.token_kind(t as TokenId) {
            TokenKind::Code => "code",
            TokenKind::Gap => "gap",
            TokenKind::Special => "special",
        };
        writeln!(out, "{t}|{kind}|{}", vocab.identifier(t as TokenId)).unwrap();
    }
    std::fs::write(path, out)
        .map_err(|source| EventIoError::Io { path: path.display().to_string(), source })
}

pub fn load_vocab(path: &Path) -> Result<CodeVocab, EventIoError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| EventIoError::Io { path: path.display().to_string(), source })?;
    let mut codes = Vec::new();
    let mut gap_bins = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('|').collect();
        if parts.len() != 3 {
            return Err(EventIoError::Parse {
                line: i + 1,
                msg: format!("expected `index|kind|identifier`, got {line:?}"),
            });
        }
        match parts[1] {
            "code" => codes.push(parts[2].to_string()),
            "gap" => {
                let bits: Vec<&str> = parts[2].split('_').collect();
                if bits.len() != 4 {
                    return Err(EventIoError::Parse {
                        line: i + 1,
                        msg: format!("bad gap identifier {:?}", parts[2]),
                    });
                }
                let hi: f64 = bits[3].parse().map_err(|_| EventIoError::Parse {
                    line: i + 1,
                    msg: format!("bad gap boundary in {:?}", parts[2]),
                })?;
                if hi.is_finite() {
                    gap_bins.push(hi);
                }
            }
            "special" => {}
            other => {
                return Err(EventIoError::Parse {
                    line: i + 1,
                    msg: format!("unknown token kind {other:?}"),
                })
            }
        }
    }
    CodeVocab::build(codes, &gap_bins)
}

// ---- tokenization ---------------------------------------------------------------

/// Model-ready token sequence with provenance back to source events.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedRecord {
    pub tokens: Vec<TokenId>,
    /// Source event index per token; None for the start and gap tokens.
    pub event_index_of_token: Vec<Option<usize>>,
    /// Event time per code token; None elsewhere.
    pub timestamps: Vec<Option<f64>>,
}

/// Encodes events up to and including `prediction_index` as
/// `[START, code, gap, code, gap, ..., code]`, one gap token between each
/// consecutive event pair, then keeps the most recent `max_len` tokens.
pub fn tokenize_record(
    record: &PatientRecord,
    vocab: &CodeVocab,
    prediction_index: usize,
    max_len: usize,
) -> Result<TokenizedRecord, EventIoError> {
    assert!(prediction_index < record.events.len(), "prediction index outside record");
    assert!(max_len >= 2, "max_len must be at least 2");
    let mut tokens = vec![vocab.start_token()];
    let mut event_index_of_token: Vec<Option<usize>> = vec![None];
    let mut timestamps: Vec<Option<f64>> = vec![None];
    for (i, e) in record.events.iter().take(prediction_index + 1).enumerate() {
        if i > 0 {
            let gap = e.time_h - record.events[i - 1].time_h;
            tokens.push(vocab.gap_token(gap));
            event_index_of_token.push(None);
            timestamps.push(None);
        }
        tokens.push(vocab.code_token(e.code)?);
        event_index_of_token.push(Some(i));
        timestamps.push(Some(e.time_h));
    }
    if tokens.len() > max_len {
        let cut = tokens.len() - max_len;
        tokens.drain(..cut);
        event_index_of_token.drain(..cut);
        timestamps.drain(..cut);
    }
    Ok(TokenizedRecord { tokens, event_index_of_token, timestamps })
}
