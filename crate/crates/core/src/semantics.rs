//! Fuzzy feature bank: per-token semantic vectors and the sentence-level
//! semantic matrix.
//!
//! Binary predicates come straight from slot roles; graded predicates pass a
//! scalar attribute through the power-law kernel `0.9^(|x-c|/tau)` evaluated
//! at the three centers 0.2 / 0.6 / 1.0 (low / med / high).

use ndarray::Array2;

use crate::corpus::{encode, Encoded, Lexicon, SentenceRecord, Vocabulary, BANG, BOS, EOS, QUESTION};

pub const FEATURE_COUNT: usize = 22;

pub const FEATURE_NAMES: [&str; FEATURE_COUNT] = [
    "is_noun",
    "is_verb",
    "is_adj",
    "is_subject",
    "is_object",
    "is_head",
    "is_bos",
    "is_eos",
    "is_comma",
    "is_question",
    "pos_low",
    "pos_med",
    "pos_high",
    "neg_low",
    "neg_med",
    "neg_high",
    "str_low",
    "str_med",
    "str_high",
    "coref_subject",
    "is_capitalized",
    "is_pronoun",
];

pub const CENTERS: [f64; 3] = [0.2, 0.6, 1.0];
pub const BANDWIDTH: f64 = 0.35;

/// Extra strength fed to the adjective slot when its clause ends in "!".
pub const EXCLAIM_NUDGE: f64 = 0.2;

#[derive(Debug, thiserror::Error)]
pub enum SemanticsError {
    #[error("bandwidth must be positive, got {0}")]
    BadBandwidth(f64),
    #[error("record/encoding mismatch at position {position}")]
    EncodingMismatch { position: usize },
}

/// `0.9^(|x-c|/tau)`: equals 1 iff `x == c`, strictly decreasing in `|x-c|`.
pub fn membership(x: f64, c: f64, tau: f64) -> Result<f64, SemanticsError> {
    if tau <= 0.0 {
        return Err(SemanticsError::BadBandwidth(tau));
    }
    Ok(0.9_f64.powf((x - c).abs() / tau))
}

/// Membership of `x` at the three canonical centers.
pub fn tri(x: f64) -> [f64; 3] {
    CENTERS.map(|c| membership(x, c, BANDWIDTH).expect("fixed positive bandwidth"))
}

/// Slot a token occupies in the clause template.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotRole {
    Subject,
    Verb,
    Object,
    Intensifier,
    Adjective,
    Punct,
    /// "the" and ",".
    Function,
    Bos,
    Eos,
    Pad,
}

/// Everything `feature_row` needs to know about one token position.
#[derive(Debug, Clone)]
pub struct TokenAttributes {
    pub surface: String,
    pub role: SlotRole,
    /// Adjective polarity: +1 positive class, -1 negative class, 0 elsewhere.
    pub polarity: i8,
    /// Strength input r* (nudge already applied); 0 off the adjective slot.
    pub strength: f64,
    pub coref_subject: bool,
    pub pronoun: bool,
}

impl TokenAttributes {
    pub fn special(surface: &str, role: SlotRole) -> Self {
        TokenAttributes {
            surface: surface.to_string(),
            role,
            polarity: 0,
            strength: 0.0,
            coref_subject: false,
            pronoun: false,
        }
    }
}

/// One row of the semantic matrix.
pub fn feature_row(attrs: &TokenAttributes) -> [f64; FEATURE_COUNT] {
    if attrs.role == SlotRole::Pad {
        return [0.0; FEATURE_COUNT];
    }
    let on = |b: bool| if b { 1.0 } else { 0.0 };
    let x_pos = f64::from(attrs.polarity.max(0));
    let x_neg = f64::from((-attrs.polarity).max(0));
    let pos = tri(x_pos);
    let neg = tri(x_neg);
    let strength = tri(attrs.strength);
    let capitalized = attrs.surface.chars().next().is_some_and(char::is_uppercase);
    [
        on(matches!(attrs.role, SlotRole::Subject | SlotRole::Object)),
        on(attrs.role == SlotRole::Verb),
        on(attrs.role == SlotRole::Adjective),
        on(attrs.role == SlotRole::Subject),
        on(attrs.role == SlotRole::Object),
        on(attrs.role == SlotRole::Verb),
        on(attrs.role == SlotRole::Bos),
        on(attrs.role == SlotRole::Eos),
        on(attrs.surface == ","),
        on(attrs.surface == QUESTION),
        pos[0],
        pos[1],
        pos[2],
        neg[0],
        neg[1],
        neg[2],
        strength[0],
        strength[1],
        strength[2],
        on(attrs.coref_subject),
        on(capitalized),
        on(attrs.pronoun),
    ]
}

/// L x F matrix of membership degrees, row-aligned with an encoded sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticMatrix {
    pub degrees: Array2<f64>,
}

impl SemanticMatrix {
    pub fn from_rows(rows: &[[f64; FEATURE_COUNT]]) -> Self {
        let mut degrees = Array2::zeros((rows.len(), FEATURE_COUNT));
        for (i, row) in rows.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                degrees[[i, j]] = *v;
            }
        }
        SemanticMatrix { degrees }
    }

    pub fn len(&self) -> usize {
        self.degrees.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.degrees.nrows() == 0
    }
}

/// Strength input for an adjective: the preceding intensifier's base
/// intensity, nudged by [`EXCLAIM_NUDGE`] (capped at 1) when the clause ends
/// in "!". `with_nudge = false` gives the causal, decode-time value.
pub fn adjective_strength(lex: &Lexicon, intensifier: &str, clause_bang: bool) -> f64 {
    let base = lex.intensity(intensifier).unwrap_or(0.0);
    if clause_bang {
        (base + EXCLAIM_NUDGE).min(1.0)
    } else {
        base
    }
}

/// Per-position attributes for a full record, aligned with [`encode`]'s
/// output: `<bos>`, the clause tokens, `<eos>`, then `<pad>` rows.
pub fn token_attributes(
    record: &SentenceRecord,
    lex: &Lexicon,
    padded_len: usize,
) -> Vec<TokenAttributes> {
    let mut attrs = Vec::with_capacity(padded_len);
    attrs.push(TokenAttributes::special(BOS, SlotRole::Bos));
    for (ci, clause) in record.clauses.iter().enumerate() {
        let pronoun = lex.pronouns.contains(&clause.subj);
        attrs.push(TokenAttributes {
            surface: clause.subj.clone(),
            role: SlotRole::Subject,
            polarity: 0,
            strength: 0.0,
            coref_subject: ci == 1 && pronoun,
            pronoun,
        });
        attrs.push(TokenAttributes::special(&clause.verb, SlotRole::Verb));
        attrs.push(TokenAttributes::special("the", SlotRole::Function));
        attrs.push(TokenAttributes::special(&clause.obj, SlotRole::Object));
        attrs.push(TokenAttributes::special(",", SlotRole::Function));
        attrs.push(TokenAttributes::special(&clause.intens, SlotRole::Intensifier));
        let polarity = if lex.adjectives_pos.contains(&clause.adj) { 1 } else { -1 };
        attrs.push(TokenAttributes {
            surface: clause.adj.clone(),
            role: SlotRole::Adjective,
            polarity,
            strength: adjective_strength(lex, &clause.intens, clause.punct == BANG),
            coref_subject: false,
            pronoun: false,
        });
        attrs.push(TokenAttributes::special(&clause.punct, SlotRole::Punct));
    }
    attrs.push(TokenAttributes::special(EOS, SlotRole::Eos));
    while attrs.len() < padded_len {
        attrs.push(TokenAttributes::special("<pad>", SlotRole::Pad));
    }
    attrs
}

/// Gold semantic matrix for an encoded record.
///
/// `encoded` must be the encoding of `record` under `vocab`; a mismatch is an
/// annotation error.
pub fn annotate(
    record: &SentenceRecord,
    encoded: &Encoded,
    lex: &Lexicon,
    vocab: &Vocabulary,
) -> Result<SemanticMatrix, SemanticsError> {
    let expected = encode(record, vocab).map_err(|_| SemanticsError::EncodingMismatch { position: 0 })?;
    if let Some(position) = (0..encoded.ids.len().max(expected.ids.len()))
        .find(|&i| expected.ids.get(i) != encoded.ids.get(i))
    {
        return Err(SemanticsError::EncodingMismatch { position });
    }
    let attrs = token_attributes(record, lex, encoded.ids.len());
    let rows: Vec<[f64; FEATURE_COUNT]> = attrs.iter().map(feature_row).collect();
    Ok(SemanticMatrix::from_rows(&rows))
}
