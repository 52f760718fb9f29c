//! Zero-attention internal language model scoring: the decoder runs with
//! every cross-attention context replaced by zeros, so the encoder is never
//! used.

use std::collections::BTreeSet;

use crate::data::{scoring_reference, Manifest, Tokenizer};
use crate::error::{Error, Result};
use crate::model::{CrossContext, Model};
use crate::tensor::{log_softmax_f64, Float};
use crate::vocab::{BOS, EOS};

/// `log p(y_n | y_<n)` for every token of `tokens` followed by EOS, from
/// the final-layer classifier.
pub fn ilm_token_logprobs<T: Float>(model: &Model<T>, tokens: &[usize]) -> Result<Vec<f64>> {
    let d = model.config().decoder_layers;
    let input: Vec<usize> = std::iter::once(BOS).chain(tokens.iter().copied()).collect();
    let mut f = model.inference();
    let vars = f.decode(CrossContext::Zero, &input, Some(&BTreeSet::from([d])))?;
    let out = f.values(&vars);
    let targets = tokens.iter().copied().chain([EOS]);
    Ok(targets
        .enumerate()
        .map(|(n, y)| log_softmax_f64(&out.logits_at(n)[&d])[y])
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct IlmReport {
    pub perplexity: f64,
    pub log_prob: f64,
    /// Scored tokens: every symbol plus one EOS per utterance.
    pub tokens: usize,
    pub utterances: usize,
}

/// Token sequence scored for a transcript: the spoken words only.
pub fn ilm_tokens(raw: &str, tokenizer: &Tokenizer) -> Vec<usize> {
    tokenizer.tokenize(&scoring_reference(raw))
}

pub fn ilm_perplexity<T: Float>(model: &Model<T>, manifest: &Manifest, tokenizer: &Tokenizer) -> Result<IlmReport> {
    if manifest.is_empty() {
        return Err(Error::contract("ILM perplexity of an empty corpus"));
    }
    let mut log_prob = 0.0;
    let mut tokens = 0;
    for e in manifest.entries() {
        let lp = ilm_token_logprobs(model, &ilm_tokens(&e.raw_transcript, tokenizer))?;
        tokens += lp.len();
        log_prob += lp.iter().sum::<f64>();
    }
    Ok(IlmReport {
        perplexity: (-log_prob / tokens as f64).exp(),
        log_prob,
        tokens,
        utterances: manifest.len(),
    })
}

/// Table with one row per system and one column per dataset.
pub fn format_ilm_table(datasets: &[String], rows: &[(String, Vec<f64>)]) -> String {
    let mut out = format!("{:<12}", "model");
    for d in datasets {
        out.push_str(&format!(" {d:>12}"));
    }
    out.push('\n');
    for (name, ppl) in rows {
        out.push_str(&format!("{name:<12}"));
        for p in ppl {
            out.push_str(&format!(" {p:>12.3}"));
        }
        out.push('\n');
    }
    out
}
