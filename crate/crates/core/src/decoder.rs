//! Grammar-constrained, control-steered generation.
//!
//! One clause follows the chain SUBJ -> VERB -> "the" -> OBJ -> "," ->
//! INTENS -> ADJ -> PUNCT. Sampling always goes through the grammar mask, so
//! generated text cannot leave the grammar; steering, the repetition
//! penalty, and the sampling transform apply after masking, in that order.
//! The acceptor (`advance`/`validate_prefix`) additionally admits pronoun
//! subjects so two-clause corpus sentences validate clause by clause.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Lexicon, Vocabulary, BANG, BOS_ID, QUESTION};
use crate::model::{Model, ModelError, Variant};
use crate::numerics::Tape;
use crate::semantics::{self, adjective_strength, SlotRole, TokenAttributes, FEATURE_COUNT};
use ndarray::{Array2, Array3};

#[derive(Debug, thiserror::Error)]
pub enum DecoderError {
    #[error("no tokens can follow the DONE state")]
    Done,
    #[error("token {token:?} is not allowed in state {state:?}")]
    UnexpectedToken { state: GrammarState, token: String },
    #[error("prefix rejected at position {position}: {token:?} cannot follow state {state:?}")]
    InvalidPrefix { position: usize, state: GrammarState, token: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Position in the one-clause grammar.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GrammarState {
    Subj,
    Verb,
    The,
    Obj,
    Comma,
    Intens,
    Adj,
    Punct,
    Done,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Pos,
    Neg,
}

/// Scalar steering controls plus the optional hard constraints.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ControlVector {
    /// pos_low / pos_med / pos_high.
    pub pos: [f64; 3],
    /// neg_low / neg_med / neg_high.
    pub neg: [f64; 3],
    /// str_low / str_med / str_high.
    pub strength: [f64; 3],
    pub is_question: f64,
    pub is_exclaim: f64,
    pub hard_polarity: Option<Polarity>,
    /// ".", "!" or "?"; fixes the punctuation deterministically.
    pub hard_punct: Option<String>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub temperature: f64,
    pub nucleus_rho: f64,
    /// 0 disables top-k.
    pub top_k: usize,
    /// Group-uniform mixture weight at ADJ under hard class control.
    pub alpha: f64,
    pub rep_window: usize,
    pub rep_factor: f64,
    /// Steering magnitude.
    pub beta: f64,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            temperature: 0.7,
            nucleus_rho: 0.9,
            top_k: 0,
            alpha: 0.0,
            rep_window: 3,
            rep_factor: 1.5,
            beta: 4.0,
            seed: 42,
        }
    }
}

/// Named decoding profiles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Neutral,
    PosStrong,
    NegQuestion,
    BaselineFair,
    PosSoft,
    NegSoft,
}

impl std::str::FromStr for Preset {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "neutral" => Ok(Preset::Neutral),
            "pos-strong" => Ok(Preset::PosStrong),
            "neg-question" => Ok(Preset::NegQuestion),
            "baseline-fair" => Ok(Preset::BaselineFair),
            "pos-soft" => Ok(Preset::PosSoft),
            "neg-soft" => Ok(Preset::NegSoft),
            other => Err(format!(
                "unknown preset {other:?} (expected neutral|pos-strong|neg-question|baseline-fair|pos-soft|neg-soft)"
            )),
        }
    }
}

impl Preset {
    pub fn controls(self) -> ControlVector {
        match self {
            Preset::Neutral | Preset::BaselineFair => ControlVector::default(),
            Preset::PosStrong => ControlVector {
                pos: [0.0, 0.0, 0.95],
                strength: [0.0, 0.0, 0.9],
                hard_polarity: Some(Polarity::Pos),
                hard_punct: Some(BANG.to_string()),
                ..ControlVector::default()
            },
            Preset::NegQuestion => ControlVector {
                neg: [0.0, 0.0, 0.95],
                strength: [0.0, 0.6, 0.0],
                is_question: 1.0,
                hard_polarity: Some(Polarity::Neg),
                hard_punct: Some(QUESTION.to_string()),
                ..ControlVector::default()
            },
            Preset::PosSoft => ControlVector {
                pos: [0.0, 0.0, 0.95],
                strength: [0.0, 0.0, 0.9],
                is_exclaim: 1.0,
                ..ControlVector::default()
            },
            Preset::NegSoft => ControlVector {
                neg: [0.0, 0.0, 0.95],
                strength: [0.0, 0.6, 0.0],
                is_question: 1.0,
                ..ControlVector::default()
            },
        }
    }

    pub fn decode_config(self, seed: u64) -> DecodeConfig {
        let base = DecodeConfig { seed, ..DecodeConfig::default() };
        match self {
            Preset::Neutral | Preset::PosSoft | Preset::NegSoft => base,
            Preset::BaselineFair => DecodeConfig { top_k: 20, rep_factor: 2.5, ..base },
            Preset::PosStrong => DecodeConfig {
                temperature: 1.5,
                nucleus_rho: 1.0,
                alpha: 0.97,
                ..base
            },
            Preset::NegQuestion => DecodeConfig {
                temperature: 1.3,
                nucleus_rho: 0.95,
                alpha: 0.85,
                ..base
            },
        }
    }
}

/// Tokens the *decoder* may emit in `state`; hard controls narrow ADJ and
/// PUNCT. Subjects only at SUBJ: generation never opens with a pronoun.
pub fn grammar_mask(
    state: GrammarState,
    vocab: &Vocabulary,
    controls: &ControlVector,
) -> Result<Vec<usize>, DecoderError> {
    let r = &vocab.ranges;
    Ok(match state {
        GrammarState::Subj => r.subjects.clone().collect(),
        GrammarState::Verb => r.verbs.clone().collect(),
        GrammarState::The => vec![r.the],
        GrammarState::Obj => r.objects.clone().collect(),
        GrammarState::Comma => vec![r.comma],
        GrammarState::Intens => r.intensifiers.clone().collect(),
        GrammarState::Adj => match controls.hard_polarity {
            Some(Polarity::Pos) => r.adjectives_pos.clone().collect(),
            Some(Polarity::Neg) => r.adjectives_neg.clone().collect(),
            None => r.adjectives_pos.clone().chain(r.adjectives_neg.clone()).collect(),
        },
        GrammarState::Punct => match controls.hard_punct.as_deref() {
            Some(mark) => vec![punct_id(vocab, mark)],
            None => vec![r.period, r.bang, r.question],
        },
        GrammarState::Done => return Err(DecoderError::Done),
    })
}

fn punct_id(vocab: &Vocabulary, mark: &str) -> usize {
    match mark {
        BANG => vocab.ranges.bang,
        QUESTION => vocab.ranges.question,
        _ => vocab.ranges.period,
    }
}

/// Advance the *acceptor* by one token. Unlike the decode mask, the acceptor
/// admits pronoun subjects, so clause-two corpus clauses validate too.
pub fn advance(
    state: GrammarState,
    token: usize,
    vocab: &Vocabulary,
) -> Result<GrammarState, DecoderError> {
    let r = &vocab.ranges;
    let reject = || DecoderError::UnexpectedToken {
        state,
        token: vocab.itos(token).to_string(),
    };
    let next = match state {
        GrammarState::Subj => {
            if r.subjects.contains(&token) || r.pronouns.contains(&token) {
                GrammarState::Verb
            } else {
                return Err(reject());
            }
        }
        GrammarState::Verb => {
            if r.verbs.contains(&token) {
                GrammarState::The
            } else {
                return Err(reject());
            }
        }
        GrammarState::The => {
            if token == r.the {
                GrammarState::Obj
            } else {
                return Err(reject());
            }
        }
        GrammarState::Obj => {
            if r.objects.contains(&token) {
                GrammarState::Comma
            } else {
                return Err(reject());
            }
        }
        GrammarState::Comma => {
            if token == r.comma {
                GrammarState::Intens
            } else {
                return Err(reject());
            }
        }
        GrammarState::Intens => {
            if r.intensifiers.contains(&token) {
                GrammarState::Adj
            } else {
                return Err(reject());
            }
        }
        GrammarState::Adj => {
            if r.adjectives_pos.contains(&token) || r.adjectives_neg.contains(&token) {
                GrammarState::Punct
            } else {
                return Err(reject());
            }
        }
        GrammarState::Punct => {
            if [r.period, r.bang, r.question].contains(&token) {
                GrammarState::Done
            } else {
                return Err(reject());
            }
        }
        GrammarState::Done => return Err(DecoderError::Done),
    };
    Ok(next)
}

/// Fold `advance` over a token prefix starting at SUBJ; a completed clause
/// chains into the next one, matching the corpus layout. Rejections carry
/// the 1-based failing position.
pub fn validate_prefix(tokens: &[usize], vocab: &Vocabulary) -> Result<GrammarState, DecoderError> {
    let mut state = GrammarState::Subj;
    for (i, &token) in tokens.iter().enumerate() {
        if state == GrammarState::Done {
            state = GrammarState::Subj;
        }
        state = advance(state, token, vocab).map_err(|e| match e {
            DecoderError::UnexpectedToken { state, token } => {
                DecoderError::InvalidPrefix { position: i + 1, state, token }
            }
            other => other,
        })?;
    }
    Ok(state)
}

/// State-aware additive steering. Weights within a polarity: high 1.0,
/// med 0.6, low 0.2. Intensifier tiers get their own strength scalar;
/// tiering follows the nearest membership center (ties go high).
pub fn steer_logits(
    state: GrammarState,
    logits: &mut [f64],
    controls: &ControlVector,
    beta: f64,
    vocab: &Vocabulary,
    lexicon: &Lexicon,
) {
    if beta == 0.0 {
        return;
    }
    let r = &vocab.ranges;
    match state {
        GrammarState::Adj => {
            let level = |c: &[f64; 3]| 0.2 * c[0] + 0.6 * c[1] + 1.0 * c[2];
            let pos_shift = beta * level(&controls.pos);
            let neg_shift = beta * level(&controls.neg);
            for id in r.adjectives_pos.clone() {
                logits[id] += pos_shift;
            }
            for id in r.adjectives_neg.clone() {
                logits[id] += neg_shift;
            }
        }
        GrammarState::Punct => {
            logits[r.question] += beta * controls.is_question;
            logits[r.bang] += beta * controls.is_exclaim;
        }
        GrammarState::Intens => {
            for (offset, id) in r.intensifiers.clone().enumerate() {
                let intensity = lexicon.intensifiers[offset].1;
                let tier = semantics::CENTERS
                    .iter()
                    .enumerate()
                    .min_by(|(_, a), (_, b)| {
                        let da = (intensity - **a).abs();
                        let db = (intensity - **b).abs();
                        da.partial_cmp(&db).expect("finite centers").then(std::cmp::Ordering::Greater)
                    })
                    .map(|(k, _)| k)
                    .expect("three centers");
                logits[id] += beta * controls.strength[tier];
            }
        }
        _ => {}
    }
}

/// Last-k repetition penalty: a positive logit is divided by the factor, a
/// non-positive one multiplied by it.
pub fn apply_repetition_penalty(logits: &mut [f64], recent: &[usize], factor: f64) {
    if factor <= 1.0 {
        return;
    }
    for &id in recent {
        if logits[id] > 0.0 {
            logits[id] /= factor;
        } else {
            logits[id] *= factor;
        }
    }
}

fn softmax_with_temperature(values: &[f64], temperature: f64) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| ((v - max) / temperature).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Pre-mix distribution then the convex group-uniform mixture:
/// `q = (1 - alpha) softmax(class logits / T) + alpha / |class|`.
pub fn mixture_distribution(
    logits: &[f64],
    class_ids: &[usize],
    temperature: f64,
    alpha: f64,
) -> Vec<f64> {
    let restricted: Vec<f64> = class_ids.iter().map(|&id| logits[id]).collect();
    let p = softmax_with_temperature(&restricted, temperature);
    let uniform = 1.0 / class_ids.len() as f64;
    p.into_iter().map(|pi| (1.0 - alpha) * pi + alpha * uniform).collect()
}

/// Nucleus truncation: keep the smallest probability-sorted prefix whose
/// cumulative mass reaches `rho` (ties broken toward lower token id), then
/// renormalize.
pub fn nucleus_truncate(mut items: Vec<(usize, f64)>, rho: f64) -> Vec<(usize, f64)> {
    items.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite probs").then(a.0.cmp(&b.0)));
    let mut kept = Vec::with_capacity(items.len());
    let mut cumulative = 0.0;
    for item in items {
        cumulative += item.1;
        kept.push(item);
        if cumulative >= rho {
            break;
        }
    }
    let total: f64 = kept.iter().map(|(_, p)| p).sum();
    for item in &mut kept {
        item.1 /= total;
    }
    kept
}

fn sample_discrete(items: &[(usize, f64)], rng: &mut ChaCha8Rng) -> usize {
    let draw: f64 = rng.random();
    let mut cumulative = 0.0;
    for &(id, p) in items {
        cumulative += p;
        if draw < cumulative {
            return id;
        }
    }
    items.last().expect("non-empty candidate set").0
}

/// Mix-then-truncate sampling over an adjective class.
pub fn class_mixture_sample(
    logits: &[f64],
    class_ids: &[usize],
    temperature: f64,
    alpha: f64,
    rho: f64,
    rng: &mut ChaCha8Rng,
) -> usize {
    let q = mixture_distribution(logits, class_ids, temperature, alpha);
    let items: Vec<(usize, f64)> = class_ids.iter().copied().zip(q).collect();
    let kept = nucleus_truncate(items, rho);
    sample_discrete(&kept, rng)
}

/// Temperature softmax over the allowed set, optional top-k, then nucleus.
pub fn sample_masked(
    logits: &[f64],
    allowed: &[usize],
    temperature: f64,
    top_k: usize,
    rho: f64,
    rng: &mut ChaCha8Rng,
) -> usize {
    let restricted: Vec<f64> = allowed.iter().map(|&id| logits[id]).collect();
    let p = softmax_with_temperature(&restricted, temperature);
    let mut items: Vec<(usize, f64)> = allowed.iter().copied().zip(p).collect();
    if top_k > 0 && top_k < items.len() {
        items.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite probs").then(a.0.cmp(&b.0)));
        items.truncate(top_k);
        let total: f64 = items.iter().map(|(_, p)| p).sum();
        for item in &mut items {
            item.1 /= total;
        }
    }
    let kept = nucleus_truncate(items, rho);
    sample_discrete(&kept, rng)
}

/// One decoding session over a loaded model.
pub struct Generator<'a> {
    pub model: &'a Model<f32>,
    pub vocab: &'a Vocabulary,
    pub lexicon: &'a Lexicon,
    pub controls: ControlVector,
    pub config: DecodeConfig,
}

impl<'a> Generator<'a> {
    pub fn new(
        model: &'a Model<f32>,
        vocab: &'a Vocabulary,
        lexicon: &'a Lexicon,
        controls: ControlVector,
        config: DecodeConfig,
    ) -> Self {
        Generator { model, vocab, lexicon, controls, config }
    }

    pub fn with_preset(
        model: &'a Model<f32>,
        vocab: &'a Vocabulary,
        lexicon: &'a Lexicon,
        preset: Preset,
        seed: u64,
    ) -> Self {
        Generator::new(model, vocab, lexicon, preset.controls(), preset.decode_config(seed))
    }

    /// Semantic rows for `<bos>` plus the realized tokens, with slot roles
    /// replayed from the grammar. The "!" nudge is unknowable before PUNCT
    /// and is therefore omitted here.
    fn prefix_attributes(&self, tokens: &[usize]) -> Result<Vec<TokenAttributes>, DecoderError> {
        let mut attrs = vec![TokenAttributes::special("<bos>", SlotRole::Bos)];
        let mut state = GrammarState::Subj;
        let mut clause = 0usize;
        let mut last_intensifier: Option<String> = None;
        for &token in tokens {
            if state == GrammarState::Done {
                state = GrammarState::Subj;
                clause += 1;
                last_intensifier = None;
            }
            let surface = self.vocab.itos(token).to_string();
            let role = match state {
                GrammarState::Subj => SlotRole::Subject,
                GrammarState::Verb => SlotRole::Verb,
                GrammarState::The | GrammarState::Comma => SlotRole::Function,
                GrammarState::Obj => SlotRole::Object,
                GrammarState::Intens => SlotRole::Intensifier,
                GrammarState::Adj => SlotRole::Adjective,
                GrammarState::Punct => SlotRole::Punct,
                GrammarState::Done => unreachable!("reset above"),
            };
            let pronoun = self.lexicon.pronouns.contains(&surface);
            let polarity = match role {
                SlotRole::Adjective if self.vocab.ranges.adjectives_pos.contains(&token) => 1,
                SlotRole::Adjective => -1,
                _ => 0,
            };
            let strength = if role == SlotRole::Adjective {
                let intens = last_intensifier.as_deref().unwrap_or("");
                adjective_strength(self.lexicon, intens, false)
            } else {
                0.0
            };
            if role == SlotRole::Intensifier {
                last_intensifier = Some(surface.clone());
            }
            attrs.push(TokenAttributes {
                coref_subject: clause > 0 && role == SlotRole::Subject && pronoun,
                surface,
                role,
                polarity,
                strength,
                pronoun,
            });
            state = advance(state, token, self.vocab)?;
        }
        Ok(attrs)
    }

    /// Next-token logits for the realized sequence (full forward pass, last
    /// position), as f64 for the sampling math.
    fn step_logits(&self, tokens: &[usize]) -> Result<Vec<f64>, DecoderError> {
        let t = tokens.len() + 1;
        let mut ids = Array2::zeros((1, t));
        ids[[0, 0]] = BOS_ID;
        for (i, &tok) in tokens.iter().enumerate() {
            ids[[0, i + 1]] = tok;
        }
        let sem = if self.model.config.variant == Variant::Fusion {
            let attrs = self.prefix_attributes(tokens)?;
            let mut sem = Array3::zeros((1, t, FEATURE_COUNT));
            for (i, a) in attrs.iter().enumerate() {
                let row = semantics::feature_row(a);
                for (f, v) in row.iter().enumerate() {
                    sem[[0, i, f]] = *v as f32;
                }
            }
            Some(sem)
        } else {
            None
        };
        let mut tape = Tape::eval();
        let out = self.model.forward(&mut tape, &ids, sem.as_ref())?;
        let logits = tape.value(out.lm_logits);
        Ok((0..self.model.config.vocab).map(|v| f64::from(logits[[0, t - 1, v]])).collect())
    }

    /// Generate one clause, optionally continuing a validated prefix.
    /// Transform order at each step: grammar mask, steer, repetition
    /// penalty, sampling.
    pub fn generate(
        &self,
        prefix: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<usize>, DecoderError> {
        let mut state = validate_prefix(prefix, self.vocab)?;
        let mut tokens = prefix.to_vec();
        while state != GrammarState::Done {
            let allowed = grammar_mask(state, self.vocab, &self.controls)?;
            let next = if state == GrammarState::Punct && self.controls.hard_punct.is_some() {
                allowed[0]
            } else {
                let mut logits = self.step_logits(&tokens)?;
                steer_logits(state, &mut logits, &self.controls, self.config.beta, self.vocab, self.lexicon);
                let window = self.config.rep_window.min(tokens.len());
                let recent = &tokens[tokens.len() - window..];
                apply_repetition_penalty(&mut logits, recent, self.config.rep_factor);
                if state == GrammarState::Adj && self.controls.hard_polarity.is_some() {
                    class_mixture_sample(
                        &logits,
                        &allowed,
                        self.config.temperature,
                        self.config.alpha,
                        self.config.nucleus_rho,
                        rng,
                    )
                } else {
                    sample_masked(
                        &logits,
                        &allowed,
                        self.config.temperature,
                        self.config.top_k,
                        self.config.nucleus_rho,
                        rng,
                    )
                }
            };
            tokens.push(next);
            state = advance(state, next, self.vocab)?;
        }
        Ok(tokens)
    }
}

/// Render token ids as a sentence, attaching punctuation to the previous
/// word.
pub fn format_surface(tokens: &[usize], vocab: &Vocabulary) -> String {
    let mut out = String::new();
    for &id in tokens {
        let tok = vocab.itos(id);
        let attached = matches!(tok, "," | "." | "!" | "?");
        if !out.is_empty() && !attached {
            out.push(' ');
        }
        out.push_str(tok);
    }
    out
}

/// Tokenize a prefix string: whitespace split plus detaching trailing
/// punctuation marks, so both "model ," and "model," parse.
pub fn tokenize_prefix(text: &str, vocab: &Vocabulary) -> Result<Vec<usize>, DecoderError> {
    let mut ids = Vec::new();
    for word in text.split_whitespace() {
        let mut rest = word;
        let mut tail = Vec::new();
        while let Some(last) = rest.chars().last() {
            if matches!(last, ',' | '.' | '!' | '?') && rest.len() > 1 {
                tail.push(&rest[rest.len() - 1..]);
                rest = &rest[..rest.len() - 1];
            } else {
                break;
            }
        }
        for piece in std::iter::once(rest).chain(tail.into_iter().rev()) {
            let id = vocab.stoi(piece).ok_or_else(|| DecoderError::InvalidPrefix {
                position: ids.len() + 1,
                state: GrammarState::Subj,
                token: piece.to_string(),
            })?;
            ids.push(id);
        }
    }
    Ok(ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::numerics::rng::chacha;
    use approx::assert_abs_diff_eq;

    fn setup() -> (Lexicon, Vocabulary) {
        let lex = Lexicon::standard();
        let vocab = Vocabulary::build(&lex).unwrap();
        (lex, vocab)
    }

    fn ids(vocab: &Vocabulary, words: &[&str]) -> Vec<usize> {
        words.iter().map(|w| vocab.stoi(w).unwrap()).collect()
    }

    #[test]
    fn mask_matches_the_chain() {
        let (_, vocab) = setup();
        let none = ControlVector::default();
        let intens = grammar_mask(GrammarState::Intens, &vocab, &none).unwrap();
        let words: Vec<&str> = intens.iter().map(|&i| vocab.itos(i)).collect();
        assert_eq!(words, ["slightly", "moderately", "very", "extremely"]);
        let adj = grammar_mask(GrammarState::Adj, &vocab, &none).unwrap();
        assert_eq!(adj.len(), 10);
        let punct = grammar_mask(GrammarState::Punct, &vocab, &none).unwrap();
        assert_eq!(punct.len(), 3);
    }

    #[test]
    fn hard_controls_narrow_adj_and_punct() {
        let (_, vocab) = setup();
        let hard = ControlVector {
            hard_polarity: Some(Polarity::Pos),
            hard_punct: Some("?".into()),
            ..ControlVector::default()
        };
        let adj = grammar_mask(GrammarState::Adj, &vocab, &hard).unwrap();
        let words: Vec<&str> = adj.iter().map(|&i| vocab.itos(i)).collect();
        assert_eq!(words, ["good", "great", "excellent", "pleasant", "wonderful"]);
        let punct = grammar_mask(GrammarState::Punct, &vocab, &hard).unwrap();
        assert_eq!(punct, vec![vocab.stoi("?").unwrap()]);
    }

    #[test]
    fn done_state_has_no_tokens() {
        let (_, vocab) = setup();
        assert!(matches!(
            grammar_mask(GrammarState::Done, &vocab, &ControlVector::default()),
            Err(DecoderError::Done)
        ));
    }

    #[test]
    fn advance_walks_the_chain() {
        let (_, vocab) = setup();
        let alice = vocab.stoi("Alice").unwrap();
        assert_eq!(advance(GrammarState::Subj, alice, &vocab).unwrap(), GrammarState::Verb);
        let bang = vocab.stoi("!").unwrap();
        assert_eq!(advance(GrammarState::Punct, bang, &vocab).unwrap(), GrammarState::Done);
        let the = vocab.stoi("the").unwrap();
        assert!(matches!(
            advance(GrammarState::Obj, the, &vocab),
            Err(DecoderError::UnexpectedToken { .. })
        ));
    }

    #[test]
    fn validate_prefix_reports_state_and_position() {
        let (_, vocab) = setup();
        let good = ids(&vocab, &["Carol", "starts", "the", "model", ","]);
        assert_eq!(validate_prefix(&good, &vocab).unwrap(), GrammarState::Intens);
        assert_eq!(validate_prefix(&[], &vocab).unwrap(), GrammarState::Subj);
        let bad = ids(&vocab, &["Carol", "Carol"]);
        match validate_prefix(&bad, &vocab) {
            Err(DecoderError::InvalidPrefix { position, .. }) => assert_eq!(position, 2),
            other => panic!("expected rejection, got {other:?}"),
        }
    }

    #[test]
    fn validate_prefix_chains_two_corpus_clauses() {
        let (_, vocab) = setup();
        let sentence = ids(
            &vocab,
            &["Alice", "cooks", "the", "meal", ",", "very", "good", ".", "she", "reviews", "the",
              "paper", ",", "slightly", "bad", "!"],
        );
        assert_eq!(validate_prefix(&sentence, &vocab).unwrap(), GrammarState::Done);
    }

    #[test]
    fn steering_shifts_only_the_targeted_ids() {
        let (lex, vocab) = setup();
        let mut logits = vec![0.0; vocab.len()];
        let controls = ControlVector { is_question: 1.0, ..ControlVector::default() };
        steer_logits(GrammarState::Punct, &mut logits, &controls, 4.0, &vocab, &lex);
        for (id, v) in logits.iter().enumerate() {
            let expected = if id == vocab.stoi("?").unwrap() { 4.0 } else { 0.0 };
            assert_abs_diff_eq!(*v, expected);
        }

        let mut untouched = vec![0.3; vocab.len()];
        steer_logits(GrammarState::Adj, &mut untouched, &ControlVector::default(), 4.0, &vocab, &lex);
        assert!(untouched.iter().all(|&v| v == 0.3));
    }

    #[test]
    fn steering_preserves_within_class_ranking() {
        let (lex, vocab) = setup();
        let mut logits: Vec<f64> = (0..vocab.len()).map(|i| (i as f64 * 0.37).sin()).collect();
        let before: Vec<f64> = vocab.ranges.adjectives_pos.clone().map(|i| logits[i]).collect();
        let controls = ControlVector { pos: [0.0, 0.0, 1.0], ..ControlVector::default() };
        steer_logits(GrammarState::Adj, &mut logits, &controls, 4.0, &vocab, &lex);
        let after: Vec<f64> = vocab.ranges.adjectives_pos.clone().map(|i| logits[i]).collect();
        let rank = |v: &[f64]| {
            let mut idx: Vec<usize> = (0..v.len()).collect();
            idx.sort_by(|&a, &b| v[b].partial_cmp(&v[a]).unwrap());
            idx
        };
        assert_eq!(rank(&before), rank(&after));
        for (b, a) in before.iter().zip(after.iter()) {
            assert_abs_diff_eq!(a - b, 4.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn strength_steering_targets_intensifier_tiers() {
        let (lex, vocab) = setup();
        let mut logits = vec![0.0; vocab.len()];
        let controls = ControlVector { strength: [0.2, 0.5, 1.0], ..ControlVector::default() };
        steer_logits(GrammarState::Intens, &mut logits, &controls, 1.0, &vocab, &lex);
        assert_abs_diff_eq!(logits[vocab.stoi("slightly").unwrap()], 0.2);
        assert_abs_diff_eq!(logits[vocab.stoi("moderately").unwrap()], 0.5);
        assert_abs_diff_eq!(logits[vocab.stoi("very").unwrap()], 1.0);
        assert_abs_diff_eq!(logits[vocab.stoi("extremely").unwrap()], 1.0);
    }

    #[test]
    fn repetition_penalty_divides_or_multiplies() {
        let mut logits = vec![2.0, -1.0, 0.5];
        apply_repetition_penalty(&mut logits, &[0, 1], 2.5);
        assert_abs_diff_eq!(logits[0], 0.8);
        assert_abs_diff_eq!(logits[1], -2.5);
        assert_abs_diff_eq!(logits[2], 0.5);
        let mut same = vec![2.0, -1.0];
        apply_repetition_penalty(&mut same, &[0, 1], 1.0);
        assert_abs_diff_eq!(same[0], 2.0);
        assert_abs_diff_eq!(same[1], -1.0);
    }

    #[test]
    fn mixture_distribution_reference_values() {
        // One-hot p over a 5-class with alpha 0.97.
        let mut logits = vec![0.0; 40];
        let class: Vec<usize> = (24..29).collect();
        logits[24] = 1e6;
        let q = mixture_distribution(&logits, &class, 1.0, 0.97);
        assert_abs_diff_eq!(q[0], 0.224, epsilon = 1e-9);
        for v in &q[1..] {
            assert_abs_diff_eq!(*v, 0.194, epsilon = 1e-9);
        }
        assert_abs_diff_eq!(q.iter().sum::<f64>(), 1.0, epsilon = 1e-9);

        // alpha = 1 ignores the logits entirely.
        let q = mixture_distribution(&logits, &class, 1.0, 1.0);
        for v in &q {
            assert_abs_diff_eq!(*v, 0.2, epsilon = 1e-12);
        }
    }

    #[test]
    fn nucleus_keeps_minimal_prefix_with_low_id_ties() {
        let items = vec![(24usize, 0.224), (25, 0.194), (26, 0.194), (27, 0.194), (28, 0.194)];
        let kept = nucleus_truncate(items, 0.5);
        // Cumulative walk: 0.224, 0.418, 0.612 >= 0.5 -> keep three, the tied
        // 0.194s enter in id order.
        assert_eq!(kept.iter().map(|(i, _)| *i).collect::<Vec<_>>(), vec![24, 25, 26]);
        let total_before = 0.612;
        assert_abs_diff_eq!(kept[0].1, 0.224 / total_before, epsilon = 1e-9);
        assert_abs_diff_eq!(kept.iter().map(|(_, p)| p).sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn nucleus_minimality_dropping_last_breaks_threshold() {
        let items: Vec<(usize, f64)> = (0..6).map(|i| (i, (i as f64 + 1.0) / 21.0)).collect();
        for rho in [0.3, 0.5, 0.8, 0.95] {
            let kept = nucleus_truncate(items.clone(), rho);
            let kept_ids: Vec<usize> = kept.iter().map(|(i, _)| *i).collect();
            let raw: f64 = kept_ids.iter().map(|&i| items[i].1).sum();
            assert!(raw >= rho);
            let without_last: f64 = raw - items[*kept_ids.last().unwrap()].1;
            assert!(without_last < rho, "rho={rho}: prefix not minimal");
        }
    }

    #[test]
    fn mixture_floor_holds_for_every_class_member() {
        let mut logits = vec![0.0; 40];
        logits[24] = 50.0; // heavily peaked on one seen adjective
        let class: Vec<usize> = (24..29).collect();
        let alpha = 0.97;
        let q = mixture_distribution(&logits, &class, 1.5, alpha);
        for v in &q {
            assert!(*v >= alpha / 5.0 - 1e-12);
        }
    }

    #[test]
    fn sampling_is_deterministic_for_a_seed() {
        let logits: Vec<f64> = (0..40).map(|i| (i as f64 * 0.13).cos()).collect();
        let class: Vec<usize> = (24..29).collect();
        let a = class_mixture_sample(&logits, &class, 1.5, 0.97, 1.0, &mut chacha(9));
        let b = class_mixture_sample(&logits, &class, 1.5, 0.97, 1.0, &mut chacha(9));
        assert_eq!(a, b);
    }

    #[test]
    fn tokenize_prefix_detaches_punctuation() {
        let (_, vocab) = setup();
        let spaced = tokenize_prefix("Carol starts the model ,", &vocab).unwrap();
        let attached = tokenize_prefix("Carol starts the model,", &vocab).unwrap();
        assert_eq!(spaced, attached);
        assert_eq!(validate_prefix(&spaced, &vocab).unwrap(), GrammarState::Intens);
        assert!(tokenize_prefix("Carol paints", &vocab).is_err());
    }

    #[test]
    fn format_surface_attaches_punctuation() {
        let (_, vocab) = setup();
        let tokens = ids(&vocab, &["Alice", "cooks", "the", "meal", ",", "very", "good", "!"]);
        assert_eq!(format_surface(&tokens, &vocab), "Alice cooks the meal, very good!");
    }

    // Generation properties hold for any parameters, trained or not: masks are
    // structural. An untrained tiny model keeps these tests fast.
    fn tiny_generator<'a>(
        model: &'a Model<f32>,
        lex: &'a Lexicon,
        vocab: &'a Vocabulary,
        preset: Preset,
    ) -> Generator<'a> {
        Generator::with_preset(model, vocab, lex, preset, 7)
    }

    #[test]
    fn generated_clauses_always_parse() {
        let (lex, vocab) = setup();
        let model = Model::<f32>::init(ModelConfig::tiny(Variant::Fusion), 1).unwrap();
        let mut rng = chacha(11);
        for preset in [Preset::Neutral, Preset::PosStrong, Preset::NegQuestion] {
            let generator = tiny_generator(&model, &lex, &vocab, preset);
            for _ in 0..10 {
                let tokens = generator.generate(&[], &mut rng).unwrap();
                assert_eq!(tokens.len(), 8);
                assert_eq!(validate_prefix(&tokens, &vocab).unwrap(), GrammarState::Done);
            }
        }
    }

    #[test]
    fn hard_controls_are_total() {
        let (lex, vocab) = setup();
        let model = Model::<f32>::init(ModelConfig::tiny(Variant::Fusion), 2).unwrap();
        let mut rng = chacha(13);
        let generator = tiny_generator(&model, &lex, &vocab, Preset::NegQuestion);
        for _ in 0..25 {
            let tokens = generator.generate(&[], &mut rng).unwrap();
            let adjective = tokens[6];
            assert!(vocab.ranges.adjectives_neg.contains(&adjective));
            assert_eq!(*tokens.last().unwrap(), vocab.stoi("?").unwrap());
        }
    }

    #[test]
    fn prefix_resumes_at_the_right_state() {
        let (lex, vocab) = setup();
        let model = Model::<f32>::init(ModelConfig::tiny(Variant::Fusion), 3).unwrap();
        let generator = tiny_generator(&model, &lex, &vocab, Preset::PosStrong);
        let prefix = ids(&vocab, &["Carol", "starts", "the", "model", ","]);
        let mut rng = chacha(17);
        let tokens = generator.generate(&prefix, &mut rng).unwrap();
        assert_eq!(&tokens[..5], &prefix[..]);
        assert_eq!(tokens.len(), 8);
        assert!(vocab.ranges.intensifiers.contains(&tokens[5]));
        assert!(vocab.ranges.adjectives_pos.contains(&tokens[6]));
        assert_eq!(tokens[7], vocab.stoi("!").unwrap());
    }

    #[test]
    fn generation_is_reproducible() {
        let (lex, vocab) = setup();
        let model = Model::<f32>::init(ModelConfig::tiny(Variant::Fusion), 4).unwrap();
        let generator = tiny_generator(&model, &lex, &vocab, Preset::Neutral);
        let a = generator.generate(&[], &mut chacha(5)).unwrap();
        let b = generator.generate(&[], &mut chacha(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn baseline_fair_preset_runs_against_baseline_models() {
        let (lex, vocab) = setup();
        let model = Model::<f32>::init(ModelConfig::tiny(Variant::Baseline), 5).unwrap();
        let generator = tiny_generator(&model, &lex, &vocab, Preset::BaselineFair);
        let tokens = generator.generate(&[], &mut chacha(19)).unwrap();
        assert_eq!(validate_prefix(&tokens, &vocab).unwrap(), GrammarState::Done);
    }
}
