//! Metrics: perplexity, seen-only perplexity, semantic MSE, focus-token
//! cross-entropy, and the controlled-generation studies.
//!
//! Teacher-forced metrics run the model in eval mode with gold semantic
//! matrices (fusion) and average natural-log cross-entropy over every target
//! position of each sentence, pad targets included, matching the training
//! objective and the reported perplexity ranges. Per-position CE values are
//! also persisted as a compact binary log so the seen-only aggregate can be
//! recomputed independently.

use std::io::{Read, Write};
use std::path::Path;

use serde::Serialize;

use crate::corpus::{Lexicon, Vocabulary};
use crate::decoder::{DecoderError, Generator, Polarity, Preset};
use crate::model::{Model, ModelError, Variant};
use crate::numerics::rng::{chacha, derive_seed};
use crate::numerics::Tape;
use crate::training::{make_batch, EncodedSentence, TARGETS_PER_SENTENCE};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("empty split")]
    EmptySplit,
    #[error("metric {0} is unsupported for the baseline variant")]
    UnsupportedMetric(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Decoder(#[from] DecoderError),
    #[error("ce log io: {0}")]
    Io(#[from] std::io::Error),
    #[error("ce log format: {0}")]
    Format(String),
}

/// One teacher-forced target position: position within the sentence, gold
/// token id, and its cross-entropy in nats.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CeRecord {
    pub position: u32,
    pub gold: u32,
    pub ce: f32,
}

/// Accumulated teacher-forced statistics over a split.
pub struct TeacherForcedStats {
    pub ce_log: Vec<CeRecord>,
    ce_sum: f64,
    ce_count: u64,
    seen_sum: f64,
    seen_count: u64,
    sem_sq_sum: f64,
    sem_count: u64,
}

impl TeacherForcedStats {
    pub fn ppl(&self) -> f64 {
        (self.ce_sum / self.ce_count as f64).exp()
    }

    /// NaN when no eligible position exists.
    pub fn ppl_seen_only(&self) -> f64 {
        if self.seen_count == 0 {
            f64::NAN
        } else {
            (self.seen_sum / self.seen_count as f64).exp()
        }
    }

    /// Mean squared semantic error over non-pad token-feature pairs.
    pub fn sem_mse(&self) -> Option<f64> {
        (self.sem_count > 0).then(|| self.sem_sq_sum / self.sem_count as f64)
    }
}

const EVAL_CHUNK: usize = 64;

/// One eval-mode pass over a split: CE per target position (running metric
/// sums accumulate separately from the log), plus squared semantic error at
/// non-pad positions for the fusion variant.
pub fn teacher_forced_stats(
    model: &Model<f32>,
    data: &[EncodedSentence],
    heldout: &[usize],
) -> Result<TeacherForcedStats, EvalError> {
    if data.is_empty() {
        return Err(EvalError::EmptySplit);
    }
    let fusion = model.config.variant == Variant::Fusion;
    let mut stats = TeacherForcedStats {
        ce_log: Vec::with_capacity(data.len() * TARGETS_PER_SENTENCE),
        ce_sum: 0.0,
        ce_count: 0,
        seen_sum: 0.0,
        seen_count: 0,
        sem_sq_sum: 0.0,
        sem_count: 0,
    };
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(EVAL_CHUNK) {
        let batch = make_batch(data, chunk);
        let mut tape = Tape::eval();
        let fwd = model.forward(&mut tape, &batch.inputs, fusion.then_some(&batch.sem))?;
        let logits = tape.value(fwd.lm_logits);
        for (row, &sentence_idx) in chunk.iter().enumerate() {
            for t in 0..TARGETS_PER_SENTENCE {
                let gold = batch.targets[[row, t]];
                let mut max = f64::NEG_INFINITY;
                for v in 0..model.config.vocab {
                    max = max.max(f64::from(logits[[row, t, v]]));
                }
                let mut lse = 0.0;
                for v in 0..model.config.vocab {
                    lse += (f64::from(logits[[row, t, v]]) - max).exp();
                }
                let ce = max + lse.ln() - f64::from(logits[[row, t, gold]]);
                stats.ce_sum += ce;
                stats.ce_count += 1;
                if !heldout.contains(&gold) {
                    stats.seen_sum += ce;
                    stats.seen_count += 1;
                }
                stats.ce_log.push(CeRecord {
                    position: t as u32,
                    gold: gold as u32,
                    ce: ce as f32,
                });
            }
            if let Some(aux) = fwd.aux_pred {
                let pred = tape.value(aux);
                let n_real = data[sentence_idx].n_real.min(TARGETS_PER_SENTENCE);
                for t in 0..n_real {
                    for f in 0..model.config.features {
                        let d = f64::from(pred[[row, t, f]]) - f64::from(batch.sem[[row, t, f]]);
                        stats.sem_sq_sum += d * d;
                        stats.sem_count += 1;
                    }
                }
            }
        }
    }
    Ok(stats)
}

/// Exp of the mean next-token cross-entropy over the split.
pub fn perplexity(model: &Model<f32>, data: &[EncodedSentence]) -> Result<f64, EvalError> {
    Ok(teacher_forced_stats(model, data, &[])?.ppl())
}

/// Perplexity over positions whose gold target is not a held-out adjective.
/// Contexts are not filtered: held-out tokens may still appear as inputs.
pub fn seen_only_perplexity(
    model: &Model<f32>,
    data: &[EncodedSentence],
    heldout: &[usize],
) -> Result<f64, EvalError> {
    Ok(teacher_forced_stats(model, data, heldout)?.ppl_seen_only())
}

/// Mean squared error of the auxiliary semantic predictions (fusion only).
pub fn semantic_mse(model: &Model<f32>, data: &[EncodedSentence]) -> Result<f64, EvalError> {
    if model.config.variant != Variant::Fusion {
        return Err(EvalError::UnsupportedMetric("sem_mse"));
    }
    teacher_forced_stats(model, data, &[])?
        .sem_mse()
        .ok_or(EvalError::EmptySplit)
}

#[derive(Debug, Clone, Serialize)]
pub struct FocusCe {
    pub token: String,
    pub count: u64,
    /// Mean CE in nats; absent tokens are flagged, never averaged as zero.
    pub mean_ce: Option<f64>,
}

/// Mean cross-entropy per occurrence of each focus token as the gold target.
pub fn focus_ce_from_log(log: &[CeRecord], tokens: &[String], vocab: &Vocabulary) -> Vec<FocusCe> {
    tokens
        .iter()
        .map(|token| {
            let id = vocab.stoi(token);
            let mut sum = 0.0;
            let mut count = 0u64;
            if let Some(id) = id {
                for r in log.iter().filter(|r| r.gold as usize == id) {
                    sum += f64::from(r.ce);
                    count += 1;
                }
            }
            FocusCe {
                token: token.clone(),
                count,
                mean_ce: (count > 0).then(|| sum / count as f64),
            }
        })
        .collect()
}

pub fn focus_ce(
    model: &Model<f32>,
    data: &[EncodedSentence],
    tokens: &[String],
    vocab: &Vocabulary,
) -> Result<Vec<FocusCe>, EvalError> {
    let stats = teacher_forced_stats(model, data, &[])?;
    Ok(focus_ce_from_log(&stats.ce_log, tokens, vocab))
}

/// Default Table-style focus token list.
pub fn default_focus_tokens() -> Vec<String> {
    ["good", "great", "terrible", "slightly", "very", "!", "?", ","]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

/// The three per-epoch validation numbers, from a single pass.
pub struct ValidationMetrics {
    pub ppl: f64,
    pub ppl_seen_only: f64,
    pub sem_mse: Option<f64>,
}

pub fn validation_metrics(
    model: &Model<f32>,
    data: &[EncodedSentence],
    heldout: &[usize],
) -> Result<ValidationMetrics, EvalError> {
    let stats = teacher_forced_stats(model, data, heldout)?;
    Ok(ValidationMetrics {
        ppl: stats.ppl(),
        ppl_seen_only: stats.ppl_seen_only(),
        sem_mse: stats.sem_mse(),
    })
}

// ---- CE log persistence -------------------------------------------------

const CE_LOG_MAGIC: &[u8; 5] = b"SFCE1";

/// Compact binary log: magic, little-endian u64 count, then
/// (u32 position, u32 gold, f32 ce) per record.
pub fn write_ce_log(path: &Path, log: &[CeRecord]) -> Result<(), EvalError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(CE_LOG_MAGIC)?;
    out.write_all(&(log.len() as u64).to_le_bytes())?;
    for r in log {
        out.write_all(&r.position.to_le_bytes())?;
        out.write_all(&r.gold.to_le_bytes())?;
        out.write_all(&r.ce.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_ce_log(path: &Path) -> Result<Vec<CeRecord>, EvalError> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 5];
    file.read_exact(&mut magic)?;
    if &magic != CE_LOG_MAGIC {
        return Err(EvalError::Format(format!("bad magic {magic:?}")));
    }
    let mut count_bytes = [0u8; 8];
    file.read_exact(&mut count_bytes)?;
    let count = u64::from_le_bytes(count_bytes) as usize;
    let mut log = Vec::with_capacity(count);
    let mut rec = [0u8; 12];
    for _ in 0..count {
        file.read_exact(&mut rec)?;
        log.push(CeRecord {
            position: u32::from_le_bytes([rec[0], rec[1], rec[2], rec[3]]),
            gold: u32::from_le_bytes([rec[4], rec[5], rec[6], rec[7]]),
            ce: f32::from_le_bytes([rec[8], rec[9], rec[10], rec[11]]),
        });
    }
    Ok(log)
}

// ---- controlled generation studies ---------------------------------------

/// The four control-evaluation settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControlSetting {
    PosHard,
    NegQuestionHard,
    PosSoft,
    NegSoft,
}

impl ControlSetting {
    pub fn all() -> [ControlSetting; 4] {
        [
            ControlSetting::PosHard,
            ControlSetting::NegQuestionHard,
            ControlSetting::PosSoft,
            ControlSetting::NegSoft,
        ]
    }

    pub fn name(self) -> &'static str {
        match self {
            ControlSetting::PosHard => "pos-hard",
            ControlSetting::NegQuestionHard => "neg-question-hard",
            ControlSetting::PosSoft => "pos-soft",
            ControlSetting::NegSoft => "neg-soft",
        }
    }

    pub fn preset(self) -> Preset {
        match self {
            ControlSetting::PosHard => Preset::PosStrong,
            ControlSetting::NegQuestionHard => Preset::NegQuestion,
            ControlSetting::PosSoft => Preset::PosSoft,
            ControlSetting::NegSoft => Preset::NegSoft,
        }
    }

    pub fn intended_polarity(self) -> Polarity {
        match self {
            ControlSetting::PosHard | ControlSetting::PosSoft => Polarity::Pos,
            _ => Polarity::Neg,
        }
    }

    pub fn requested_punct(self) -> &'static str {
        match self {
            ControlSetting::PosHard | ControlSetting::PosSoft => "!",
            _ => "?",
        }
    }
}

impl std::str::FromStr for ControlSetting {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ControlSetting::all()
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| format!("unknown control setting {s:?}"))
    }
}

/// Outcome of N controlled generations under one setting.
#[derive(Debug, Clone, Serialize)]
pub struct ControlOutcome {
    pub setting: String,
    pub intended: Polarity,
    pub n: usize,
    pub adj_accuracy: f64,
    pub punct_accuracy: f64,
    /// Realized POS / NEG / OTHER counts; rows sum to `n`.
    pub confusion: [usize; 3],
    /// Fraction of runs whose adjective is held out in the requested class.
    pub ood_hit: f64,
}

/// Run `n` independent generations under a setting; each run draws from its
/// own derived stream, so runs are order-independent.
pub fn control_eval(
    model: &Model<f32>,
    vocab: &Vocabulary,
    lexicon: &Lexicon,
    setting: ControlSetting,
    n: usize,
    seed: u64,
) -> Result<ControlOutcome, EvalError> {
    let preset = setting.preset();
    let generator = Generator::with_preset(model, vocab, lexicon, preset, seed);
    let heldout_requested: Vec<usize> = match setting.intended_polarity() {
        Polarity::Pos => lexicon.heldout_pos.iter().filter_map(|w| vocab.stoi(w)).collect(),
        Polarity::Neg => lexicon.heldout_neg.iter().filter_map(|w| vocab.stoi(w)).collect(),
    };
    let requested_punct = vocab.stoi(setting.requested_punct()).expect("punct in vocab");
    let requested_range = match setting.intended_polarity() {
        Polarity::Pos => vocab.ranges.adjectives_pos.clone(),
        Polarity::Neg => vocab.ranges.adjectives_neg.clone(),
    };

    let mut adj_ok = 0usize;
    let mut punct_ok = 0usize;
    let mut confusion = [0usize; 3];
    let mut ood = 0usize;
    for run in 0..n {
        let mut rng = chacha(derive_seed(seed, &format!("{}-run-{run}", setting.name())));
        let tokens = generator.generate(&[], &mut rng)?;
        let adjective = tokens
            .iter()
            .copied()
            .find(|id| vocab.is_adjective(*id))
            .ok_or_else(|| EvalError::Format("generation without adjective".into()))?;
        let punct = *tokens.last().expect("non-empty generation");
        if requested_range.contains(&adjective) {
            adj_ok += 1;
        }
        if punct == requested_punct {
            punct_ok += 1;
        }
        if vocab.ranges.adjectives_pos.contains(&adjective) {
            confusion[0] += 1;
        } else if vocab.ranges.adjectives_neg.contains(&adjective) {
            confusion[1] += 1;
        } else {
            confusion[2] += 1;
        }
        if heldout_requested.contains(&adjective) {
            ood += 1;
        }
    }
    Ok(ControlOutcome {
        setting: setting.name().to_string(),
        intended: setting.intended_polarity(),
        n,
        adj_accuracy: adj_ok as f64 / n as f64,
        punct_accuracy: punct_ok as f64 / n as f64,
        confusion,
        ood_hit: ood as f64 / n as f64,
    })
}

/// Everything the eval command reports, serializable as JSON.
#[derive(Debug, Serialize)]
pub struct EvalReport {
    pub variant: String,
    pub ppl: f64,
    pub ppl_seen_only: f64,
    pub sem_mse: Option<f64>,
    pub focus_ce: Vec<FocusCe>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub control: Vec<ControlOutcome>,
}

/// Render a confusion block like the paper's intended-vs-realized table.
pub fn format_confusion(rows: &[(&str, [usize; 3], usize)]) -> String {
    let mut out = String::from("intended \\ realized |   POS |   NEG | OTHER\n");
    for (name, counts, n) in rows {
        out.push_str(&format!(
            "{name:>19} | {:>3} ({:.2}) | {:>3} ({:.2}) | {:>3} ({:.2})\n",
            counts[0],
            counts[0] as f64 / *n as f64,
            counts[1],
            counts[1] as f64 / *n as f64,
            counts[2],
            counts[2] as f64 / *n as f64,
        ));
    }
    out
}
