//! Synthetic clause-structured corpus: lexicon, vocabulary, sentence
//! sampling, token encoding, and JSONL persistence.
//!
//! Sentences follow the fixed clause template
//! `SUBJ VERB the OBJ , INTENS ADJ PUNCT`, optionally followed by a second
//! clause whose subject is a pronoun coreferring to the first subject.
//! Training splits exclude the held-out adjectives; validation splits keep
//! the full adjective classes.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::rng::{chacha, derive_seed};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const THE: &str = "the";
pub const COMMA: &str = ",";
pub const PERIOD: &str = ".";
pub const BANG: &str = "!";
pub const QUESTION: &str = "?";

/// Fixed ids of the special tokens.
pub const PAD_ID: usize = 0;
pub const BOS_ID: usize = 1;
pub const EOS_ID: usize = 2;

/// Maximum encoded sentence length, counting `<bos>`/`<eos>` and padding.
pub const MAX_LEN: usize = 28;

/// Tokens in one clause of the surface template.
pub const CLAUSE_TOKENS: usize = 8;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("duplicate surface form in lexicon: {0:?}")]
    DuplicateSurface(String),
    #[error("lexicon is malformed: {0}")]
    BadLexicon(String),
    #[error("unknown token while encoding: {0:?}")]
    UnknownToken(String),
    #[error("encoded length {len} exceeds maximum {max}")]
    TooLong { len: usize, max: usize },
    #[error("corpus io: {0}")]
    Io(#[from] std::io::Error),
    #[error("corpus record parse: {0}")]
    Json(#[from] serde_json::Error),
}

/// The fixed word lists plus the held-out adjective subsets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Lexicon {
    pub subjects: Vec<String>,
    pub verbs: Vec<String>,
    pub objects: Vec<String>,
    /// `(word, base intensity r*)` pairs.
    pub intensifiers: Vec<(String, f64)>,
    pub adjectives_pos: Vec<String>,
    pub adjectives_neg: Vec<String>,
    pub heldout_pos: Vec<String>,
    pub heldout_neg: Vec<String>,
    pub pronouns: Vec<String>,
}

fn strings(words: &[&str]) -> Vec<String> {
    words.iter().map(|w| w.to_string()).collect()
}

impl Lexicon {
    /// The standard word lists.
    pub fn standard() -> Self {
        Lexicon {
            subjects: strings(&["Alice", "Bob", "Carol", "Dave", "Eve"]),
            verbs: strings(&["finishes", "reviews", "trains", "starts", "cooks"]),
            objects: strings(&["task", "paper", "model", "project", "meal"]),
            intensifiers: vec![
                ("slightly".into(), 0.2),
                ("moderately".into(), 0.5),
                ("very".into(), 0.8),
                ("extremely".into(), 1.0),
            ],
            adjectives_pos: strings(&["good", "great", "excellent", "pleasant", "wonderful"]),
            adjectives_neg: strings(&["bad", "poor", "terrible", "unpleasant", "awful"]),
            heldout_pos: strings(&["wonderful", "excellent", "great"]),
            heldout_neg: strings(&["terrible", "awful", "unpleasant"]),
            pronouns: strings(&["she", "he", "they"]),
        }
    }

    /// Adjectives of a polarity class that appear in training data.
    pub fn seen_adjectives(&self, positive: bool) -> Vec<String> {
        let (class, held) = if positive {
            (&self.adjectives_pos, &self.heldout_pos)
        } else {
            (&self.adjectives_neg, &self.heldout_neg)
        };
        class.iter().filter(|a| !held.contains(a)).cloned().collect()
    }

    pub fn is_heldout(&self, word: &str) -> bool {
        self.heldout_pos.iter().any(|w| w == word) || self.heldout_neg.iter().any(|w| w == word)
    }

    /// Pronoun used when coreferring to `subject` (before the "they" coin).
    pub fn pronoun_for(&self, subject: &str) -> &str {
        match subject {
            "Bob" | "Dave" => "he",
            _ => "she",
        }
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.intensifiers.iter().any(|(_, r)| !(0.0..=1.0).contains(r)) {
            return Err(CorpusError::BadLexicon("intensity outside [0, 1]".into()));
        }
        for h in self.heldout_pos.iter() {
            if !self.adjectives_pos.contains(h) {
                return Err(CorpusError::BadLexicon(format!(
                    "held-out {h:?} not in positive class"
                )));
            }
        }
        for h in self.heldout_neg.iter() {
            if !self.adjectives_neg.contains(h) {
                return Err(CorpusError::BadLexicon(format!(
                    "held-out {h:?} not in negative class"
                )));
            }
        }
        if self.heldout_pos.len() >= self.adjectives_pos.len()
            || self.heldout_neg.len() >= self.adjectives_neg.len()
        {
            return Err(CorpusError::BadLexicon("a class has no seen adjectives".into()));
        }
        Ok(())
    }

    pub fn intensity(&self, word: &str) -> Option<f64> {
        self.intensifiers.iter().find(|(w, _)| w == word).map(|(_, r)| *r)
    }
}

/// Contiguous id ranges of each token group inside the vocabulary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VocabRanges {
    pub subjects: std::ops::Range<usize>,
    pub verbs: std::ops::Range<usize>,
    pub objects: std::ops::Range<usize>,
    pub the: usize,
    pub comma: usize,
    pub intensifiers: std::ops::Range<usize>,
    pub adjectives_pos: std::ops::Range<usize>,
    pub adjectives_neg: std::ops::Range<usize>,
    pub pronouns: std::ops::Range<usize>,
    pub period: usize,
    pub bang: usize,
    pub question: usize,
}

/// Bidirectional token/id map with a fixed, deterministic ordering.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    pub ranges: VocabRanges,
}

impl Vocabulary {
    /// Ordering: specials, subjects, verbs, objects, "the", ",",
    /// intensifiers, positive adjectives, negative adjectives, pronouns,
    /// ".", "!", "?".
    pub fn build(lex: &Lexicon) -> Result<Self, CorpusError> {
        lex.validate()?;
        let mut tokens: Vec<String> = strings(&[PAD, BOS, EOS]);
        let range = |tokens: &mut Vec<String>, group: &[String]| {
            let start = tokens.len();
            tokens.extend_from_slice(group);
            start..start + group.len()
        };
        let subjects = range(&mut tokens, &lex.subjects);
        let verbs = range(&mut tokens, &lex.verbs);
        let objects = range(&mut tokens, &lex.objects);
        let the = tokens.len();
        tokens.push(THE.into());
        let comma = tokens.len();
        tokens.push(COMMA.into());
        let intens_words: Vec<String> = lex.intensifiers.iter().map(|(w, _)| w.clone()).collect();
        let intensifiers = range(&mut tokens, &intens_words);
        let adjectives_pos = range(&mut tokens, &lex.adjectives_pos);
        let adjectives_neg = range(&mut tokens, &lex.adjectives_neg);
        let pronouns = range(&mut tokens, &lex.pronouns);
        let period = tokens.len();
        tokens.push(PERIOD.into());
        let bang = tokens.len();
        tokens.push(BANG.into());
        let question = tokens.len();
        tokens.push(QUESTION.into());

        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(CorpusError::DuplicateSurface(t.clone()));
            }
        }
        Ok(Vocabulary {
            tokens,
            index,
            ranges: VocabRanges {
                subjects,
                verbs,
                objects,
                the,
                comma,
                intensifiers,
                adjectives_pos,
                adjectives_neg,
                pronouns,
                period,
                bang,
                question,
            },
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn stoi(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn itos(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn end_punct_ids(&self) -> [usize; 3] {
        [self.ranges.period, self.ranges.bang, self.ranges.question]
    }

    pub fn adjective_ids(&self, positive: bool) -> Vec<usize> {
        let r = if positive {
            self.ranges.adjectives_pos.clone()
        } else {
            self.ranges.adjectives_neg.clone()
        };
        r.collect()
    }

    pub fn is_adjective(&self, id: usize) -> bool {
        self.ranges.adjectives_pos.contains(&id) || self.ranges.adjectives_neg.contains(&id)
    }

    /// Ids of the held-out adjectives.
    pub fn heldout_ids(&self, lex: &Lexicon) -> Vec<usize> {
        lex.heldout_pos
            .iter()
            .chain(lex.heldout_neg.iter())
            .filter_map(|w| self.stoi(w))
            .collect()
    }
}

/// One clause of the surface template.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClauseRecord {
    pub subj: String,
    pub verb: String,
    pub obj: String,
    pub intens: String,
    pub adj: String,
    pub punct: String,
}

impl ClauseRecord {
    pub fn surface_tokens(&self) -> [&str; CLAUSE_TOKENS] {
        [
            &self.subj, &self.verb, THE, &self.obj, COMMA, &self.intens, &self.adj, &self.punct,
        ]
    }
}

/// A parsed synthetic sentence: one or two clauses plus the coreference flag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceRecord {
    pub clauses: Vec<ClauseRecord>,
    pub coref: bool,
}

impl SentenceRecord {
    pub fn surface_tokens(&self) -> Vec<&str> {
        self.clauses.iter().flat_map(|c| c.surface_tokens()).collect()
    }

    /// Length after encoding, counting `<bos>` and `<eos>`.
    pub fn encoded_len(&self) -> usize {
        self.clauses.len() * CLAUSE_TOKENS + 2
    }
}

/// A named list of records together with the seed that produced it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusSplit {
    pub name: String,
    pub seed: u64,
    pub records: Vec<SentenceRecord>,
}

/// Sampling probabilities for the slots the template leaves open.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub two_clause_prob: f64,
    /// End punctuation: ".", "!", "?" in this order.
    pub punct_probs: [f64; 3],
    /// Probability that the coreferent pronoun is "they".
    pub they_prob: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            two_clause_prob: 0.6,
            punct_probs: [0.6, 0.25, 0.15],
            they_prob: 0.2,
        }
    }
}

fn choose<'a>(rng: &mut ChaCha8Rng, items: &'a [String]) -> &'a str {
    &items[rng.random_range(0..items.len())]
}

fn sample_punct(rng: &mut ChaCha8Rng, cfg: &SamplerConfig) -> &'static str {
    let x: f64 = rng.random();
    if x < cfg.punct_probs[0] {
        PERIOD
    } else if x < cfg.punct_probs[0] + cfg.punct_probs[1] {
        BANG
    } else {
        QUESTION
    }
}

/// Draw one sentence.
///
/// Draw order (fixed for reproducibility): clause-1 subject, verb, object,
/// intensifier, polarity coin, adjective, punctuation; second-clause coin;
/// then for the second clause the "they" coin followed by verb, object,
/// intensifier, polarity, adjective, punctuation.
pub fn sample_sentence(
    lex: &Lexicon,
    cfg: &SamplerConfig,
    rng: &mut ChaCha8Rng,
    allow_heldout: bool,
) -> SentenceRecord {
    let sample_clause = |rng: &mut ChaCha8Rng, subj: String| {
        let verb = choose(rng, &lex.verbs).to_string();
        let obj = choose(rng, &lex.objects).to_string();
        let intens = choose(rng, &lex.intensifiers_words()).to_string();
        let positive = rng.random::<f64>() < 0.5;
        let class = if allow_heldout {
            if positive { lex.adjectives_pos.clone() } else { lex.adjectives_neg.clone() }
        } else {
            lex.seen_adjectives(positive)
        };
        let adj = choose(rng, &class).to_string();
        let punct = sample_punct(rng, cfg).to_string();
        ClauseRecord { subj, verb, obj, intens, adj, punct }
    };

    let subj1 = choose(rng, &lex.subjects).to_string();
    let clause1 = sample_clause(rng, subj1.clone());
    let mut clauses = vec![clause1];
    let two = rng.random::<f64>() < cfg.two_clause_prob;
    if two {
        let pronoun = if rng.random::<f64>() < cfg.they_prob {
            "they".to_string()
        } else {
            lex.pronoun_for(&subj1).to_string()
        };
        clauses.push(sample_clause(rng, pronoun));
    }
    SentenceRecord { clauses, coref: two }
}

impl Lexicon {
    fn intensifiers_words(&self) -> Vec<String> {
        self.intensifiers.iter().map(|(w, _)| w.clone()).collect()
    }
}

/// Deterministically generate the train and validation splits.
///
/// Train and validation use independent streams derived from `seed`, so the
/// two splits are pure functions of `(seed, n_train)` and `(seed, n_val)`.
/// Records that would encode beyond [`MAX_LEN`] are resampled.
pub fn generate_corpus(
    lex: &Lexicon,
    cfg: &SamplerConfig,
    seed: u64,
    n_train: usize,
    n_val: usize,
) -> (CorpusSplit, CorpusSplit) {
    let fill = |name: &str, n: usize, allow_heldout: bool| {
        let split_seed = derive_seed(seed, name);
        let mut rng = chacha(split_seed);
        let mut records = Vec::with_capacity(n);
        while records.len() < n {
            let r = sample_sentence(lex, cfg, &mut rng, allow_heldout);
            if r.encoded_len() <= MAX_LEN {
                records.push(r);
            }
        }
        CorpusSplit { name: name.to_string(), seed, records }
    };
    (fill("train", n_train, false), fill("val", n_val, true))
}

/// Token ids padded to [`MAX_LEN`] plus the count of real (non-pad) tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub ids: Vec<usize>,
    pub n_real: usize,
}

impl Encoded {
    pub fn non_pad_mask(&self) -> Vec<bool> {
        (0..self.ids.len()).map(|i| i < self.n_real).collect()
    }
}

/// `<bos>` + surface tokens + `<eos>`, right-padded with `<pad>`.
pub fn encode(record: &SentenceRecord, vocab: &Vocabulary) -> Result<Encoded, CorpusError> {
    let surface = record.surface_tokens();
    let n_real = surface.len() + 2;
    if n_real > MAX_LEN {
        return Err(CorpusError::TooLong { len: n_real, max: MAX_LEN });
    }
    let mut ids = Vec::with_capacity(MAX_LEN);
    ids.push(BOS_ID);
    for tok in surface {
        ids.push(vocab.stoi(tok).ok_or_else(|| CorpusError::UnknownToken(tok.to_string()))?);
    }
    ids.push(EOS_ID);
    ids.resize(MAX_LEN, PAD_ID);
    Ok(Encoded { ids, n_real })
}

/// Surface tokens of an encoded sentence, specials stripped.
pub fn decode(ids: &[usize], vocab: &Vocabulary) -> Vec<String> {
    ids.iter()
        .filter(|&&id| id != PAD_ID && id != BOS_ID && id != EOS_ID)
        .map(|&id| vocab.itos(id).to_string())
        .collect()
}

/// Sidecar manifest persisted next to the JSONL splits.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub heldout_pos: Vec<String>,
    pub heldout_neg: Vec<String>,
    pub vocab_size: usize,
    pub sampler: SamplerConfig,
}

pub fn write_jsonl(path: &Path, records: &[SentenceRecord]) -> Result<(), CorpusError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<SentenceRecord>, CorpusError> {
    let file = BufReader::new(std::fs::File::open(path)?);
    let mut records = Vec::new();
    for line in file.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line)?);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_vocab() -> (Lexicon, Vocabulary) {
        let lex = Lexicon::standard();
        let vocab = Vocabulary::build(&lex).unwrap();
        (lex, vocab)
    }

    #[test]
    fn vocabulary_has_forty_tokens_with_fixed_specials() {
        let (_, vocab) = default_vocab();
        assert_eq!(vocab.len(), 40);
        assert_eq!(vocab.stoi(PAD), Some(0));
        assert_eq!(vocab.stoi(BOS), Some(1));
        assert_eq!(vocab.stoi(EOS), Some(2));
    }

    #[test]
    fn vocabulary_ids_round_trip() {
        let (_, vocab) = default_vocab();
        for id in 0..vocab.len() {
            assert_eq!(vocab.stoi(vocab.itos(id)), Some(id));
        }
        assert_eq!(vocab.itos(vocab.stoi("Alice").unwrap()), "Alice");
    }

    #[test]
    fn duplicate_surface_form_is_rejected() {
        let mut lex = Lexicon::standard();
        lex.objects[0] = "Alice".into();
        assert!(matches!(
            Vocabulary::build(&lex),
            Err(CorpusError::DuplicateSurface(_))
        ));
    }

    #[test]
    fn train_sampling_stays_on_seen_adjectives() {
        let lex = Lexicon::standard();
        let cfg = SamplerConfig::default();
        let mut rng = chacha(7);
        let seen = ["good", "pleasant", "bad", "poor"];
        for _ in 0..500 {
            let s = sample_sentence(&lex, &cfg, &mut rng, false);
            for c in &s.clauses {
                assert!(seen.contains(&c.adj.as_str()), "unexpected adjective {:?}", c.adj);
            }
        }
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let lex = Lexicon::standard();
        let cfg = SamplerConfig::default();
        let a = sample_sentence(&lex, &cfg, &mut chacha(99), true);
        let b = sample_sentence(&lex, &cfg, &mut chacha(99), true);
        assert_eq!(a, b);
    }

    #[test]
    fn two_clause_rate_concentrates_at_point_six() {
        let lex = Lexicon::standard();
        let cfg = SamplerConfig::default();
        let mut rng = chacha(11);
        let n = 10_000;
        let two = (0..n)
            .filter(|_| sample_sentence(&lex, &cfg, &mut rng, true).clauses.len() == 2)
            .count();
        let frac = two as f64 / n as f64;
        assert!((frac - 0.6).abs() < 0.015, "two-clause fraction {frac}");
    }

    #[test]
    fn generate_corpus_produces_requested_sizes_and_hygiene() {
        let lex = Lexicon::standard();
        let (train, val) = generate_corpus(&lex, &SamplerConfig::default(), 1, 8000, 1200);
        assert_eq!(train.records.len(), 8000);
        assert_eq!(val.records.len(), 1200);
        for r in &train.records {
            for c in &r.clauses {
                assert!(!lex.is_heldout(&c.adj));
            }
        }
        let val_has_heldout = val
            .records
            .iter()
            .any(|r| r.clauses.iter().any(|c| lex.is_heldout(&c.adj)));
        assert!(val_has_heldout);
    }

    #[test]
    fn generate_corpus_is_a_pure_function_of_its_arguments() {
        let lex = Lexicon::standard();
        let cfg = SamplerConfig::default();
        let (t1, v1) = generate_corpus(&lex, &cfg, 5, 100, 50);
        let (t2, v2) = generate_corpus(&lex, &cfg, 5, 100, 50);
        assert_eq!(t1.records, t2.records);
        assert_eq!(v1.records, v2.records);
    }

    #[test]
    fn encode_pads_to_max_len() {
        let (_, vocab) = default_vocab();
        let record = SentenceRecord {
            clauses: vec![ClauseRecord {
                subj: "Alice".into(),
                verb: "finishes".into(),
                obj: "task".into(),
                intens: "very".into(),
                adj: "good".into(),
                punct: ".".into(),
            }],
            coref: false,
        };
        let enc = encode(&record, &vocab).unwrap();
        assert_eq!(enc.ids.len(), MAX_LEN);
        assert_eq!(enc.n_real, 10);
        assert_eq!(enc.ids[0], BOS_ID);
        assert_eq!(enc.ids[9], EOS_ID);
        assert!(enc.ids[10..].iter().all(|&id| id == PAD_ID));
    }

    #[test]
    fn two_clause_encoding_fits_the_cap() {
        let lex = Lexicon::standard();
        let mut rng = chacha(3);
        for _ in 0..200 {
            let s = sample_sentence(&lex, &SamplerConfig::default(), &mut rng, true);
            assert!(s.encoded_len() <= MAX_LEN);
            assert!(s.encoded_len() == 10 || s.encoded_len() == 18);
        }
    }

    #[test]
    fn decode_inverts_encode_on_surface_tokens() {
        let (lex, vocab) = default_vocab();
        let mut rng = chacha(21);
        for _ in 0..200 {
            let s = sample_sentence(&lex, &SamplerConfig::default(), &mut rng, true);
            let enc = encode(&s, &vocab).unwrap();
            let surface: Vec<String> =
                s.surface_tokens().iter().map(|t| t.to_string()).collect();
            assert_eq!(decode(&enc.ids, &vocab), surface);
        }
    }

    #[test]
    fn unknown_token_is_an_encoding_error() {
        let (_, vocab) = default_vocab();
        let record = SentenceRecord {
            clauses: vec![ClauseRecord {
                subj: "Mallory".into(),
                verb: "finishes".into(),
                obj: "task".into(),
                intens: "very".into(),
                adj: "good".into(),
                punct: ".".into(),
            }],
            coref: false,
        };
        assert!(matches!(encode(&record, &vocab), Err(CorpusError::UnknownToken(_))));
    }

    #[test]
    fn jsonl_round_trip() {
        let lex = Lexicon::standard();
        let (train, _) = generate_corpus(&lex, &SamplerConfig::default(), 9, 50, 10);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.jsonl");
        write_jsonl(&path, &train.records).unwrap();
        let back = read_jsonl(&path).unwrap();
        assert_eq!(back, train.records);
    }

    #[test]
    fn clause2_subject_is_a_pronoun() {
        let lex = Lexicon::standard();
        let mut rng = chacha(17);
        for _ in 0..300 {
            let s = sample_sentence(&lex, &SamplerConfig::default(), &mut rng, true);
            if s.clauses.len() == 2 {
                assert!(s.coref);
                assert!(lex.pronouns.contains(&s.clauses[1].subj));
            } else {
                assert!(!s.coref);
            }
        }
    }
}
