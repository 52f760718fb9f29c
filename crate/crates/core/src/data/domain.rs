use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::seed::rng_for;

/// Transcript decoration habits of a domain.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationStyle {
    /// Probability of a `[breath]` token before each word.
    pub breath_prob: f64,
    /// Probability of an unfinished repetition (`re- renew`) before each word.
    pub truncation_prob: f64,
}

impl AnnotationStyle {
    pub fn clean() -> Self {
        Self {
            breath_prob: 0.0,
            truncation_prob: 0.0,
        }
    }
}

/// Word list from which a domain's transcripts are drawn.
#[derive(Clone, Debug, PartialEq)]
pub struct LexiconSpec {
    pub size: usize,
    pub word_len: (usize, usize),
    pub seed: u64,
}

/// A synthetic recording condition plus its text distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainSpec {
    pub name: String,
    /// Letters words are built from; a subset of the tokenizer alphabet.
    pub symbol_set: Vec<char>,
    /// Mean and standard deviation of per-symbol duration in frames.
    pub symbol_duration_frames: (f64, f64),
    pub noise_std: f64,
    /// Per-channel multiplicative gain, one entry per feature channel.
    pub channel_gain_profile: Vec<f64>,
    /// Inclusive bounds on transcript length in symbols (spaces included).
    pub utterance_length_range: (usize, usize),
    pub annotation: AnnotationStyle,
    pub lexicon: LexiconSpec,
}

/// Shortest rendered symbol.
pub const MIN_SYMBOL_FRAMES: usize = 2;

impl DomainSpec {
    pub fn validate(&self, feature_dim: usize) -> Result<()> {
        let (lo, hi) = self.utterance_length_range;
        let mut problems = Vec::new();
        if lo > hi || lo == 0 {
            problems.push(format!("length range {lo}..={hi} is empty"));
        }
        if self.noise_std < 0.0 || !self.noise_std.is_finite() {
            problems.push(format!("noise_std {} must be >= 0", self.noise_std));
        }
        if self.symbol_duration_frames.0 < MIN_SYMBOL_FRAMES as f64 {
            problems.push(format!(
                "mean symbol duration {} below {MIN_SYMBOL_FRAMES} frames",
                self.symbol_duration_frames.0
            ));
        }
        if self.channel_gain_profile.len() != feature_dim {
            problems.push(format!(
                "gain profile has {} channels, features have {feature_dim}",
                self.channel_gain_profile.len()
            ));
        }
        if self.symbol_set.is_empty() || self.lexicon.size == 0 {
            problems.push("empty symbol set or lexicon".into());
        }
        let (wl, wh) = self.lexicon.word_len;
        if wl == 0 || wl > wh || wh >= hi {
            problems.push(format!("word lengths {wl}..={wh} do not fit utterances"));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::config(format!("domain {}: {}", self.name, problems.join("; "))))
        }
    }

    /// Deterministic word list for this domain. Words alternate consonants
    /// and vowels, so all domains share character-level structure even when
    /// their lexicons are disjoint.
    pub fn words(&self) -> Vec<String> {
        let mut rng = rng_for(self.lexicon.seed, "lexicon");
        let (lo, hi) = self.lexicon.word_len;
        let (vowels, consonants): (Vec<char>, Vec<char>) =
            self.symbol_set.iter().partition(|c| "aeiou".contains(**c));
        let classes = if vowels.is_empty() || consonants.is_empty() {
            [self.symbol_set.clone(), self.symbol_set.clone()]
        } else {
            [consonants, vowels]
        };
        let mut words: Vec<String> = Vec::with_capacity(self.lexicon.size);
        while words.len() < self.lexicon.size {
            let len = rng.random_range(lo..=hi);
            let first = rng.random_range(0..2);
            let w: String = (0..len)
                .map(|i| {
                    let class = &classes[(first + i) % 2];
                    class[rng.random_range(0..class.len())]
                })
                .collect();
            if !words.contains(&w) {
                words.push(w);
            }
        }
        words
    }

    /// Draws a raw transcript: Zipf-weighted lexicon words with the domain's
    /// decorations.
    pub fn sample_transcript(&self, words: &[String], rng: &mut impl Rng) -> String {
        let weights: Vec<f64> = (0..words.len()).map(|i| 1.0 / (i as f64 + 1.0)).collect();
        let total: f64 = weights.iter().sum();
        let (lo, hi) = self.utterance_length_range;
        let target = rng.random_range(lo..=hi);
        let mut chosen: Vec<&str> = Vec::new();
        let mut len = 0usize;
        while len < target {
            let mut u = rng.random::<f64>() * total;
            let mut pick = words.len() - 1;
            for (i, w) in weights.iter().enumerate() {
                if u < *w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            let w = &words[pick];
            let extra = w.len() + usize::from(!chosen.is_empty());
            if len + extra > hi {
                if chosen.is_empty() {
                    continue;
                }
                break;
            }
            chosen.push(w);
            len += extra;
        }
        let mut out: Vec<String> = Vec::new();
        for w in chosen {
            if rng.random::<f64>() < self.annotation.breath_prob {
                out.push("[breath]".into());
            }
            if w.len() > 2 && rng.random::<f64>() < self.annotation.truncation_prob {
                out.push(format!("{}-", &w[..w.len().div_ceil(2)]));
            }
            out.push(w.to_string());
        }
        out.join(" ")
    }

    /// Per-symbol duration draw, never below [`MIN_SYMBOL_FRAMES`].
    pub fn sample_duration(&self, rng: &mut impl Rng) -> usize {
        let (mean, std) = self.symbol_duration_frames;
        let d = if std > 0.0 {
            Normal::new(mean, std).map_or(mean, |n| n.sample(rng))
        } else {
            mean
        };
        (d.round().max(0.0) as usize).max(MIN_SYMBOL_FRAMES)
    }
}

/// Lower-case letters used by the built-in domains.
pub fn letters() -> Vec<char> {
    ('a'..='z').collect()
}

/// Smooth gain curve over `f` channels, tilted by `tilt`.
pub fn tilted_gain(f: usize, tilt: f64) -> Vec<f64> {
    (0..f)
        .map(|c| 1.0 + tilt * (c as f64 / (f.max(2) - 1) as f64 - 0.5))
        .collect()
}
