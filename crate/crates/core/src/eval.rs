//! Word error rate, macro averaging and bootstrap statistics.

use std::collections::BTreeMap;

use rand::Rng;

use crate::config::KvConfig;
use crate::data::normalize_text;
use crate::error::{Error, Result};
use crate::seed::rng_for;

/// Edit counts of one alignment.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EditCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_words: usize,
}

impl EditCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    pub fn add(&mut self, o: &EditCounts) {
        self.substitutions += o.substitutions;
        self.deletions += o.deletions;
        self.insertions += o.insertions;
        self.ref_words += o.ref_words;
    }

    /// Errors per reference word; 0 for an empty reference with no errors.
    pub fn rate(&self) -> f64 {
        if self.ref_words == 0 {
            if self.errors() == 0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            self.errors() as f64 / self.ref_words as f64
        }
    }
}

/// Minimum-edit alignment of word sequences. Among optimal alignments the
/// backtrace prefers a substitution, then an insertion, then a deletion.
pub fn align<S: PartialEq>(reference: &[S], hypothesis: &[S]) -> EditCounts {
    let (n, m) = (reference.len(), hypothesis.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            let del = d[(i - 1) * w + j] + 1;
            let ins = d[i * w + j - 1] + 1;
            d[i * w + j] = sub.min(del).min(ins);
        }
    }
    let mut c = EditCounts {
        ref_words: n,
        ..Default::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let same = reference[i - 1] == hypothesis[j - 1];
            if d[(i - 1) * w + j - 1] + usize::from(!same) == here {
                c.substitutions += usize::from(!same);
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if j > 0 && d[i * w + j - 1] + 1 == here {
            c.insertions += 1;
            j -= 1;
        } else {
            c.deletions += 1;
            i -= 1;
        }
    }
    c
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScoringMode {
    /// Both sides pass through [`normalize_text`] first.
    Normalized,
    /// Whitespace split only.
    Raw,
}

fn words(s: &str, mode: ScoringMode) -> Vec<String> {
    let s = match mode {
        ScoringMode::Normalized => normalize_text(s),
        ScoringMode::Raw => s.to_string(),
    };
    s.split_whitespace().map(str::to_string).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct WerReport {
    pub total: EditCounts,
    pub per_utterance: Vec<EditCounts>,
}

impl WerReport {
    pub fn wer(&self) -> f64 {
        self.total.rate()
    }

    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.per_utterance
            .iter()
            .map(|c| (c.errors(), c.ref_words))
            .collect()
    }
}

/// Corpus WER over aligned reference/hypothesis lists.
pub fn wer(refs: &[String], hyps: &[String], mode: ScoringMode) -> Result<WerReport> {
    if refs.len() != hyps.len() {
        return Err(Error::contract(format!(
            "{} references but {} hypotheses",
            refs.len(),
            hyps.len()
        )));
    }
    let mut total = EditCounts::default();
    let per_utterance: Vec<EditCounts> = refs
        .iter()
        .zip(hyps)
        .map(|(r, h)| align(&words(r, mode), &words(h, mode)))
        .collect();
    per_utterance.iter().for_each(|c| total.add(c));
    if total.ref_words == 0 {
        return Err(Error::contract("reference corpus has no words"));
    }
    Ok(WerReport {
        total,
        per_utterance,
    })
}

/// Scores hypotheses keyed by utterance id against references keyed the
/// same way; every reference needs a hypothesis.
pub fn wer_by_id(
    refs: &BTreeMap<String, String>,
    hyps: &BTreeMap<String, String>,
    mode: ScoringMode,
) -> Result<WerReport> {
    let mut r = Vec::with_capacity(refs.len());
    let mut h = Vec::with_capacity(refs.len());
    for (id, text) in refs {
        let hyp = hyps
            .get(id)
            .ok_or_else(|| Error::contract(format!("no hypothesis for utterance {id}")))?;
        r.push(text.clone());
        h.push(hyp.clone());
    }
    if let Some(extra) = hyps.keys().find(|k| !refs.contains_key(*k)) {
        return Err(Error::contract(format!("hypothesis for unknown utterance {extra}")));
    }
    wer(&r, &h, mode)
}

/// Unweighted mean of per-dataset WERs.
pub fn macro_wer(per_dataset: &[f64]) -> Result<f64> {
    if per_dataset.is_empty() {
        return Err(Error::contract("macro WER needs at least one dataset"));
    }
    Ok(per_dataset.iter().sum::<f64>() / per_dataset.len() as f64)
}

fn pooled_rate(pairs: &[(usize, usize)], idx: &[usize]) -> f64 {
    let (e, r) = idx
        .iter()
        .fold((0usize, 0usize), |(e, r), &i| (e + pairs[i].0, r + pairs[i].1));
    if r == 0 {
        0.0
    } else {
        e as f64 / r as f64
    }
}

fn resample(n: usize, rng: &mut impl Rng, buf: &mut Vec<usize>) {
    buf.clear();
    buf.extend((0..n).map(|_| rng.random_range(0..n)));
}

/// Percentile interval of corpus WER over `b` utterance-level resamples of
/// `(error_words, ref_words)` pairs.
pub fn bootstrap_ci(pairs: &[(usize, usize)], alpha: f64, b: usize, seed: u64) -> Result<(f64, f64)> {
    if b == 0 || pairs.is_empty() {
        return Err(Error::contract("bootstrap needs B >= 1 and at least one utterance"));
    }
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::config(format!("alpha {alpha} outside [0, 1)")));
    }
    let mut rng = rng_for(seed, "bootstrap");
    let mut idx = Vec::new();
    let mut stats: Vec<f64> = (0..b)
        .map(|_| {
            resample(pairs.len(), &mut rng, &mut idx);
            pooled_rate(pairs, &idx)
        })
        .collect();
    stats.sort_by(f64::total_cmp);
    let lo = ((alpha / 2.0) * b as f64).floor() as usize;
    let hi = (((1.0 - alpha / 2.0) * b as f64).ceil() as usize).clamp(1, b) - 1;
    Ok((stats[lo.min(b - 1)], stats[hi]))
}

/// Paired bootstrap: the share of resamples in which system `a` does not
/// beat `b`, ties counting one half. Inputs are keyed by utterance id.
pub fn bootstrap_compare(
    a: &BTreeMap<String, (usize, usize)>,
    b: &BTreeMap<String, (usize, usize)>,
    resamples: usize,
    seed: u64,
) -> Result<f64> {
    if a.len() != b.len() || a.keys().any(|k| !b.contains_key(k)) {
        return Err(Error::contract("systems are not paired by utterance id"));
    }
    if resamples == 0 || a.is_empty() {
        return Err(Error::contract("bootstrap needs B >= 1 and at least one utterance"));
    }
    let pa: Vec<(usize, usize)> = a.values().copied().collect();
    let pb: Vec<(usize, usize)> = b.values().copied().collect();
    let mut rng = rng_for(seed, "bootstrap-compare");
    let mut idx = Vec::new();
    let mut not_better = 0.0;
    for _ in 0..resamples {
        resample(pa.len(), &mut rng, &mut idx);
        let (wa, wb) = (pooled_rate(&pa, &idx), pooled_rate(&pb, &idx));
        if wa > wb {
            not_better += 1.0;
        } else if wa == wb {
            not_better += 0.5;
        }
    }
    Ok(not_better / resamples as f64)
}

/// Machine-readable block appended to evaluation reports.
pub fn report_kv(name: &str, report: &WerReport, ci: (f64, f64)) -> KvConfig {
    let mut kv = KvConfig::new();
    let t = &report.total;
    kv.set(&format!("{name}.wer"), format!("{:.6}", report.wer()));
    kv.set(&format!("{name}.substitutions"), t.substitutions);
    kv.set(&format!("{name}.deletions"), t.deletions);
    kv.set(&format!("{name}.insertions"), t.insertions);
    kv.set(&format!("{name}.ref_words"), t.ref_words);
    kv.set(&format!("{name}.ci_low"), format!("{:.6}", ci.0));
    kv.set(&format!("{name}.ci_high"), format!("{:.6}", ci.1));
    kv
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(x: &str) -> String {
        x.to_string()
    }

    #[test]
    fn basic_rates() {
        let r = wer(&[s("a b c")], &[s("a b c")], ScoringMode::Raw).unwrap();
        assert_eq!(r.wer(), 0.0);
        let r = wer(&[s("a b c")], &[s("a b")], ScoringMode::Raw).unwrap();
        assert_eq!(r.total.deletions, 1);
        assert!((r.wer() - 1.0 / 3.0).abs() < 1e-12);
        assert!(wer(&[s("")], &[s("x")], ScoringMode::Raw).is_err());
    }

    #[test]
    fn tie_break_prefers_substitution() {
        let c = align(&["a"], &["b"]);
        assert_eq!((c.substitutions, c.insertions, c.deletions), (1, 0, 0));
        let c = align(&["a", "b"], &["b", "c"]);
        assert_eq!(c.errors(), 2);
        assert_eq!(c.substitutions, 2);
    }

    #[test]
    fn normalized_mode_strips_noise() {
        let r = wer(&[s("Hello [breath] world")], &[s("hello, world")], ScoringMode::Normalized).unwrap();
        assert_eq!(r.wer(), 0.0);
        let raw = wer(&[s("Hello [breath] world")], &[s("hello, world")], ScoringMode::Raw).unwrap();
        assert!(raw.wer() > 0.0);
    }

    #[test]
    fn macro_average() {
        assert_eq!(macro_wer(&[4.0, 8.0]).unwrap(), 6.0);
        assert_eq!(macro_wer(&[3.5]).unwrap(), 3.5);
        assert!(macro_wer(&[]).is_err());
    }

    #[test]
    fn bootstrap_edges() {
        assert_eq!(bootstrap_ci(&[(0, 5), (0, 3)], 0.05, 1000, 1).unwrap(), (0.0, 0.0));
        assert_eq!(bootstrap_ci(&[(2, 8)], 0.05, 200, 1).unwrap(), (0.25, 0.25));
        let a = BTreeMap::from([(s("x"), (1, 4)), (s("y"), (0, 3))]);
        let worse = BTreeMap::from([(s("x"), (2, 4)), (s("y"), (1, 3))]);
        assert_eq!(bootstrap_compare(&a, &worse, 500, 2).unwrap(), 0.0);
        assert_eq!(bootstrap_compare(&a, &a, 500, 2).unwrap(), 0.5);
        let unpaired = BTreeMap::from([(s("z"), (0, 1))]);
        assert!(bootstrap_compare(&a, &unpaired, 10, 0).is_err());
    }
}
