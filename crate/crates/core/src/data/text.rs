//! Transcript normalisation, the special/unfinished-word mask transform and
//! the character tokenizer.

use std::collections::HashMap;

use crate::vocab::{MASK, NUM_SPECIAL, SPECIAL_NAMES, UNK};

pub const MASK_WORD: &str = "[MASK]";

/// Lowercases, drops square-bracketed noise tokens, unwraps parentheses
/// (their content stays), replaces other punctuation with spaces and
/// collapses whitespace. Apostrophes are kept.
pub fn normalize_text(raw: &str) -> String {
    let mut out = String::with_capacity(raw.len());
    let mut depth = 0usize;
    for c in raw.chars() {
        match c {
            '[' => {
                depth += 1;
                out.push(' ');
            }
            ']' if depth > 0 => depth -= 1,
            _ if depth > 0 => {}
            '(' | ')' => out.push(' '),
            c if c.is_alphanumeric() || c == '\'' => out.extend(c.to_lowercase()),
            _ => out.push(' '),
        }
    }
    out.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// One word of a masked transcript.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum MaskedWord {
    Masked,
    Word(String),
}

fn is_unfinished(word: &str) -> bool {
    word.len() > 1 && word.ends_with('-')
}

/// Replaces every bracketed special token and every unfinished word (one
/// ending in `-`) with a mask; other words are normalised. Multi-word
/// bracketed tokens such as `[vocalised noise]` become a single mask.
pub fn mask_words(raw: &str) -> Vec<MaskedWord> {
    let mut words = Vec::new();
    let mut in_bracket = false;
    for w in raw.split_whitespace() {
        if in_bracket {
            if w.contains(']') {
                in_bracket = false;
            }
            continue;
        }
        if w.starts_with('[') {
            words.push(MaskedWord::Masked);
            in_bracket = !w.contains(']');
            continue;
        }
        if is_unfinished(w) {
            words.push(MaskedWord::Masked);
            continue;
        }
        let n = normalize_text(w);
        words.extend(n.split_whitespace().map(|p| MaskedWord::Word(p.to_string())));
    }
    words
}

/// Text form of [`mask_words`], e.g. `"[hesitation] to re- renew"` becomes
/// `"[MASK] to [MASK] renew"`.
pub fn mask_transcript(raw: &str) -> String {
    mask_words(raw)
        .iter()
        .map(|w| match w {
            MaskedWord::Masked => MASK_WORD,
            MaskedWord::Word(s) => s.as_str(),
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Words that are actually spoken and fully pronounced: [`mask_words`] with
/// the masked entries removed. Used as the scoring reference and as the
/// CTC target text.
pub fn scoring_reference(raw: &str) -> String {
    mask_words(raw)
        .into_iter()
        .filter_map(|w| match w {
            MaskedWord::Word(s) => Some(s),
            MaskedWord::Masked => None,
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Character tokenizer. Ids `0..NUM_SPECIAL` are the special tokens; each
/// alphabet symbol follows in order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenizer {
    symbols: Vec<char>,
    index: HashMap<char, usize>,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Self::new("abcdefghijklmnopqrstuvwxyz '".chars().collect())
    }
}

impl Tokenizer {
    pub fn new(symbols: Vec<char>) -> Self {
        let index = symbols
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, i + NUM_SPECIAL))
            .collect();
        Self { symbols, index }
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    /// Number of ids in use, specials included.
    pub fn len(&self) -> usize {
        NUM_SPECIAL + self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, c: char) -> usize {
        self.index.get(&c).copied().unwrap_or(UNK)
    }

    pub fn space_id(&self) -> usize {
        self.id(' ')
    }

    /// Character ids; the literal `[MASK]` maps to the single MASK id and
    /// characters outside the alphabet map to UNK.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        let mut out = Vec::with_capacity(text.len());
        let mut rest = text;
        while let Some(c) = rest.chars().next() {
            if let Some(after) = rest.strip_prefix(MASK_WORD) {
                out.push(MASK);
                rest = after;
            } else {
                out.push(self.id(c));
                rest = &rest[c.len_utf8()..];
            }
        }
        out
    }

    /// Inverse of [`Tokenizer::tokenize`] for in-alphabet text. Blank, PAD,
    /// BOS and EOS render as nothing.
    pub fn detokenize(&self, tokens: &[usize]) -> String {
        let mut s = String::with_capacity(tokens.len());
        for &t in tokens {
            match t {
                MASK => s.push_str(MASK_WORD),
                UNK => s.push_str(SPECIAL_NAMES[UNK]),
                t if t < NUM_SPECIAL => {}
                t => {
                    if let Some(&c) = self.symbols.get(t - NUM_SPECIAL) {
                        s.push(c);
                    }
                }
            }
        }
        s
    }

    /// Compact encoding of the alphabet as comma-separated code points.
    pub fn to_table(&self) -> String {
        self.symbols
            .iter()
            .map(|&c| (c as u32).to_string())
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn from_table(table: &str) -> Option<Self> {
        let symbols = table
            .split(',')
            .filter(|p| !p.is_empty())
            .map(|p| p.trim().parse::<u32>().ok().and_then(char::from_u32))
            .collect::<Option<Vec<_>>>()?;
        Some(Self::new(symbols))
    }
}
