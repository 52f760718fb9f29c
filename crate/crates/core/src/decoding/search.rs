//! Greedy and beam search under the joint CTC/attention score.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::path::Path;

use super::ctc_prefix::{CtcPrefixScorer, CtcState};
use super::mixing::{log_p_decred, MixingWeights};
use crate::data::{Corpus, Tokenizer};
use crate::error::{Error, Result};
use crate::model::{CrossContext, Model};
use crate::tensor::{Float, Tensor};
use crate::vocab::{BOS, EOS, NUM_SPECIAL, UNK};

/// Source of attention log-probabilities for the next token.
pub trait AttentionScorer {
    /// `log p(· | prefix)` over the whole vocabulary. `prefix` excludes BOS.
    fn next_log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>>;
}

/// Decoder of a trained model over fixed encoder states.
pub struct ModelScorer<'m, T> {
    model: &'m Model<T>,
    states: Tensor<T>,
    weights: MixingWeights,
    heads: BTreeSet<usize>,
}

impl<'m, T: Float> ModelScorer<'m, T> {
    pub fn new(model: &'m Model<T>, states: Tensor<T>, weights: MixingWeights) -> Result<Self> {
        let cfg = model.config();
        weights.validate(&cfg.classifier_layers, cfg.vocab_size)?;
        let heads = weights.layers(cfg.decoder_layers);
        Ok(Self {
            model,
            states,
            weights,
            heads,
        })
    }
}

impl<T: Float> AttentionScorer for ModelScorer<'_, T> {
    fn next_log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>> {
        let mut f = self.model.inference();
        let enc = f.tape.constant(self.states.clone());
        let input: Vec<usize> = std::iter::once(BOS).chain(prefix.iter().copied()).collect();
        let vars = f.decode(CrossContext::Encoder(enc), &input, Some(&self.heads))?;
        let out = f.values(&vars);
        log_p_decred(
            &out.logits_at(prefix.len()),
            &self.weights,
            self.model.config().decoder_layers,
        )
    }
}

/// Ids a decoder may emit: EOS, UNK and every alphabet symbol of a
/// tokenizer with `tokenizer_len` ids.
pub fn candidate_tokens(tokenizer_len: usize) -> Vec<usize> {
    let mut c = vec![EOS, UNK];
    c.extend(NUM_SPECIAL..tokenizer_len);
    c
}

/// `λ·ctc + (1−λ)·attn`, with a zero weight silencing its term even when
/// that term is `−inf`.
pub fn joint_step_logprob(p_attn: &[f64], ctc_increments: &[f64], lambda: f64) -> Vec<f64> {
    p_attn
        .iter()
        .zip(ctc_increments)
        .map(|(&p, &c)| mix_scores(c, p.ln(), lambda))
        .collect()
}

fn mix_scores(ctc: f64, attn: f64, lambda: f64) -> f64 {
    let a = if lambda == 0.0 { 0.0 } else { lambda * ctc };
    let b = if lambda == 1.0 { 0.0 } else { (1.0 - lambda) * attn };
    a + b
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Emitted tokens; ends with EOS once finished.
    pub tokens: Vec<usize>,
    /// Sum of attention token log-probabilities.
    pub attn_logp: f64,
    /// CTC prefix log-probability (complete-sequence once finished); 0 when
    /// CTC is not used.
    pub ctc_logp: f64,
    pub ctc_state: Option<CtcState>,
    pub score: f64,
    pub finished: bool,
}

impl Hypothesis {
    fn empty(ctc_state: Option<CtcState>) -> Self {
        Self {
            tokens: Vec::new(),
            attn_logp: 0.0,
            ctc_logp: 0.0,
            ctc_state,
            score: 0.0,
            finished: false,
        }
    }

    /// Tokens without the closing EOS.
    pub fn text_tokens(&self) -> &[usize] {
        match self.tokens.last() {
            Some(&EOS) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }

    pub fn normalized_score(&self) -> f64 {
        self.score / self.tokens.len().max(1) as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchConfig {
    pub lambda: f64,
    pub width: usize,
    /// Maximum emitted tokens before EOS is forced.
    pub max_len: usize,
    pub length_normalize: bool,
}

impl SearchConfig {
    pub fn greedy(lambda: f64, max_len: usize) -> Self {
        Self {
            lambda,
            width: 1,
            max_len,
            length_normalize: false,
        }
    }

    fn check(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if self.width == 0 || self.max_len == 0 {
            return Err(Error::config("beam width and max_len must be at least 1"));
        }
        Ok(())
    }
}

/// One scored extension of a hypothesis.
struct Expansion {
    parent: usize,
    token: usize,
    step: f64,
    score: f64,
    attn: f64,
    ctc: Option<(f64, CtcState)>,
}

fn expand(
    hyp: &Hypothesis,
    parent: usize,
    scorer: &mut dyn AttentionScorer,
    ctc: Option<&CtcPrefixScorer>,
    candidates: &[usize],
    cfg: &SearchConfig,
) -> Result<Vec<Expansion>> {
    let attn = scorer.next_log_probs(&hyp.tokens)?;
    let allowed: &[usize] = if hyp.tokens.len() >= cfg.max_len {
        &[EOS]
    } else {
        candidates
    };
    allowed
        .iter()
        .map(|&token| {
            let a = *attn.get(token).ok_or_else(|| {
                Error::contract(format!("token {token} outside the decoder vocabulary"))
            })?;
            let c = match (ctc, &hyp.ctc_state) {
                (Some(s), Some(state)) => Some(s.step(state, token)?),
                _ => None,
            };
            let step = mix_scores(c.as_ref().map_or(0.0, |c| c.0), a, cfg.lambda);
            Ok(Expansion {
                parent,
                token,
                step,
                score: hyp.score + step,
                attn: a,
                ctc: c,
            })
        })
        .collect()
}

fn child(parent: &Hypothesis, e: Expansion) -> Hypothesis {
    let mut tokens = parent.tokens.clone();
    tokens.push(e.token);
    let (ctc_logp, ctc_state) = match e.ctc {
        Some((_, state)) => (state.score, Some(state)),
        None => (0.0, None),
    };
    Hypothesis {
        tokens,
        attn_logp: parent.attn_logp + e.attn,
        ctc_logp,
        ctc_state,
        score: e.score,
        finished: e.token == EOS,
    }
}

/// Orders expansions best first. Equal totals fall back to the step score,
/// then to parent rank and token id, so results never depend on sort
/// stability.
fn rank(a: &Expansion, b: &Expansion) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(b.step.total_cmp(&a.step))
        .then(a.parent.cmp(&b.parent))
        .then(a.token.cmp(&b.token))
}

/// Picks the best next token at every step.
pub fn greedy_search(
    scorer: &mut dyn AttentionScorer,
    ctc_log_probs: Option<&Tensor<f64>>,
    candidates: &[usize],
    cfg: &SearchConfig,
) -> Result<Hypothesis> {
    cfg.check()?;
    let ctc = ctc_log_probs.map(CtcPrefixScorer::new).transpose()?;
    let ctc = ctc.filter(|_| cfg.lambda > 0.0);
    let mut hyp = Hypothesis::empty(ctc.as_ref().map(CtcPrefixScorer::init));
    while !hyp.finished {
        let mut best: Option<Expansion> = None;
        for e in expand(&hyp, 0, scorer, ctc.as_ref(), candidates, cfg)? {
            let better = best.as_ref().is_none_or(|b| e.step > b.step);
            if better {
                best = Some(e);
            }
        }
        hyp = child(&hyp, best.expect("EOS is always allowed"));
    }
    Ok(hyp)
}

/// Beam search; returns finished hypotheses best first.
pub fn beam_search(
    scorer: &mut dyn AttentionScorer,
    ctc_log_probs: Option<&Tensor<f64>>,
    candidates: &[usize],
    cfg: &SearchConfig,
) -> Result<Vec<Hypothesis>> {
    cfg.check()?;
    let mut width = cfg.width;
    if width > candidates.len() {
        log::warn!(
            "beam width {width} exceeds {} candidate tokens; clamping",
            candidates.len()
        );
        width = candidates.len();
    }
    let ctc = ctc_log_probs.map(CtcPrefixScorer::new).transpose()?;
    let ctc = ctc.filter(|_| cfg.lambda > 0.0);
    let mut live = vec![Hypothesis::empty(ctc.as_ref().map(CtcPrefixScorer::init))];
    let mut done: Vec<Hypothesis> = Vec::new();
    while !live.is_empty() {
        let mut pool = Vec::new();
        for (i, h) in live.iter().enumerate() {
            pool.extend(expand(h, i, scorer, ctc.as_ref(), candidates, cfg)?);
        }
        pool.sort_by(rank);
        pool.truncate(width);
        let mut next = Vec::with_capacity(width);
        for e in pool {
            let h = child(&live[e.parent], e);
            if h.finished {
                done.push(h);
            } else {
                next.push(h);
            }
        }
        live = next;
        // Without length normalisation scores only decrease, so no live
        // hypothesis can overtake a finished one that is already ahead.
        if !cfg.length_normalize {
            let best_done = done.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
            let best_live = live.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
            if !done.is_empty() && best_done >= best_live {
                break;
            }
        }
    }
    let key = |h: &Hypothesis| {
        if cfg.length_normalize {
            h.normalized_score()
        } else {
            h.score
        }
    };
    done.sort_by(|a, b| key(b).total_cmp(&key(a)).then_with(|| a.tokens.cmp(&b.tokens)));
    Ok(done)
}

/// Decoding settings for a model.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeOptions {
    pub weights: MixingWeights,
    pub search: SearchConfig,
}

/// Encodes `features` and runs greedy (width 1) or beam search; returns the
/// best hypothesis. `max_len` is further capped at the encoder frame count,
/// the longest sequence a CTC alignment can emit.
pub fn decode_utterance<T: Float>(
    model: &Model<T>,
    features: &Tensor<T>,
    tokenizer_len: usize,
    opts: &DecodeOptions,
) -> Result<Hypothesis> {
    let (t, _) = features.dims2()?;
    let enc = model.encode(features, t)?;
    let ctc = (opts.search.lambda > 0.0)
        .then(|| model.ctc_log_probs(&enc).map(|t| t.cast::<f64>()))
        .transpose()?;
    let search = SearchConfig {
        max_len: opts.search.max_len.min(enc.frames),
        ..opts.search.clone()
    };
    let mut scorer = ModelScorer::new(model, enc.states, opts.weights.clone())?;
    let candidates = candidate_tokens(tokenizer_len);
    if search.width == 1 {
        greedy_search(&mut scorer, ctc.as_ref(), &candidates, &search)
    } else {
        beam_search(&mut scorer, ctc.as_ref(), &candidates, &search)?
            .into_iter()
            .next()
            .ok_or_else(|| Error::contract("beam search finished no hypothesis"))
    }
}

/// Runs the search of `opts` with EOS withheld for exactly `emit` steps, so
/// every configuration does the same amount of decoder work. Used for
/// timing; the hypothesis itself is not meaningful.
pub fn decode_fixed_length<T: Float>(
    model: &Model<T>,
    features: &Tensor<T>,
    tokenizer_len: usize,
    opts: &DecodeOptions,
    emit: usize,
) -> Result<Hypothesis> {
    let (t, _) = features.dims2()?;
    let enc = model.encode(features, t)?;
    let ctc = (opts.search.lambda > 0.0)
        .then(|| model.ctc_log_probs(&enc).map(|t| t.cast::<f64>()))
        .transpose()?;
    let search = SearchConfig {
        max_len: emit,
        ..opts.search.clone()
    };
    let mut scorer = ModelScorer::new(model, enc.states, opts.weights.clone())?;
    let candidates: Vec<usize> = candidate_tokens(tokenizer_len).into_iter().filter(|&c| c != EOS).collect();
    if search.width == 1 {
        greedy_search(&mut scorer, ctc.as_ref(), &candidates, &search)
    } else {
        beam_search(&mut scorer, ctc.as_ref(), &candidates, &search)?
            .into_iter()
            .next()
            .ok_or_else(|| Error::contract("beam search finished no hypothesis"))
    }
}

/// Best hypothesis text for every utterance of `corpus`, in manifest order.
pub fn decode_corpus<T: Float>(
    model: &Model<T>,
    corpus: &Corpus,
    tokenizer: &Tokenizer,
    opts: &DecodeOptions,
) -> Result<Vec<(String, String)>> {
    corpus
        .manifest
        .entries()
        .iter()
        .map(|e| {
            let feats = corpus.features_of(&e.utterance_id)?.cast::<T>();
            let h = decode_utterance(model, &feats, tokenizer.len(), opts)?;
            Ok((e.utterance_id.clone(), tokenizer.detokenize(h.text_tokens())))
        })
        .collect()
}

/// Hypothesis file: one `utterance_id TAB text` line per utterance.
pub fn write_hypotheses(path: &Path, rows: &[(String, String)]) -> Result<()> {
    let text: String = rows.iter().map(|(id, h)| format!("{id}\t{h}\n")).collect();
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_hypotheses(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.is_empty())
        .map(|l| {
            let (id, h) = l.split_once('\t').unwrap_or((l, ""));
            Ok((id.to_string(), h.to_string()))
        })
        .collect()
}
