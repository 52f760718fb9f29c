//! Training losses: CTC, label-smoothed cross-entropy per classifier, the
//! weighted sum over decoder classifiers and the hybrid total.

use std::collections::{BTreeMap, BTreeSet};

use crate::config::KvConfig;
use crate::data::text::{mask_words, MaskedWord};
use crate::data::Tokenizer;
use crate::error::{Error, Result};
use crate::model::{DecoderForwardOutput, DecoderVars};
use crate::tensor::{log_add_exp, Float, Tape, Tensor, Var};
use crate::vocab::{BLANK, BOS, EOS, MASK};

/// Value and gradient of a CTC loss evaluated outside the tape.
#[derive(Clone, Debug, PartialEq)]
pub struct CtcValue {
    /// `−log P(target | x)`; `+inf` when the target cannot be aligned.
    pub loss: f64,
    /// `∂loss/∂log_probs`, row-major `[T', V]`. All zero when unalignable.
    pub grad: Vec<f64>,
}

impl CtcValue {
    pub fn alignable(&self) -> bool {
        self.loss.is_finite()
    }
}

/// Frames needed to emit `target`: one per label plus a blank between
/// each pair of equal neighbours.
pub fn min_ctc_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// CTC negative log-likelihood over `[T', V]` frame log-probabilities with
/// blank id 0, via the log-space forward and backward recursions.
pub fn ctc_loss(log_probs: &Tensor<f64>, target: &[usize]) -> Result<CtcValue> {
    let (t_len, v) = log_probs.dims2()?;
    if let Some(&bad) = target.iter().find(|&&k| k == BLANK || k >= v) {
        return Err(Error::contract(format!(
            "CTC target id {bad} is blank or outside {v} classes"
        )));
    }
    let mut grad = vec![0.0; t_len * v];
    if t_len < min_ctc_frames(target) {
        return Ok(CtcValue {
            loss: f64::INFINITY,
            grad,
        });
    }
    let lp = |t: usize, k: usize| log_probs.data()[t * v + k];
    // Extended label sequence: blank, l1, blank, l2, ..., blank.
    let ext: Vec<usize> = std::iter::once(BLANK)
        .chain(target.iter().flat_map(|&k| [k, BLANK]))
        .collect();
    let s_len = ext.len();
    let can_skip = |s: usize| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2];
    let ninf = f64::NEG_INFINITY;

    let mut alpha = vec![ninf; t_len * s_len];
    alpha[0] = lp(0, ext[0]);
    if s_len > 1 {
        alpha[1] = lp(0, ext[1]);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut a = prev[s];
            if s >= 1 {
                a = log_add_exp(a, prev[s - 1]);
            }
            if can_skip(s) {
                a = log_add_exp(a, prev[s - 2]);
            }
            alpha[t * s_len + s] = a + lp(t, ext[s]);
        }
    }

    let mut beta = vec![ninf; t_len * s_len];
    let last = (t_len - 1) * s_len;
    beta[last + s_len - 1] = lp(t_len - 1, ext[s_len - 1]);
    if s_len > 1 {
        beta[last + s_len - 2] = lp(t_len - 1, ext[s_len - 2]);
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let next = &beta[(t + 1) * s_len..(t + 2) * s_len];
            let mut b = next[s];
            if s + 1 < s_len {
                b = log_add_exp(b, next[s + 1]);
            }
            if s + 2 < s_len && can_skip(s + 2) {
                b = log_add_exp(b, next[s + 2]);
            }
            beta[t * s_len + s] = b + lp(t, ext[s]);
        }
    }

    let end = &alpha[last..];
    let log_p = if s_len > 1 {
        log_add_exp(end[s_len - 1], end[s_len - 2])
    } else {
        end[0]
    };
    if !log_p.is_finite() {
        return Ok(CtcValue {
            loss: f64::INFINITY,
            grad,
        });
    }
    // alpha and beta both include the frame-t emission, so the occupancy of
    // state s at frame t is exp(alpha + beta - lp - log_p).
    for t in 0..t_len {
        let mut occ = vec![ninf; v];
        for s in 0..s_len {
            let i = t * s_len + s;
            let k = ext[s];
            occ[k] = log_add_exp(occ[k], alpha[i] + beta[i] - lp(t, k));
        }
        for k in 0..v {
            grad[t * v + k] = -(occ[k] - log_p).exp();
        }
    }
    Ok(CtcValue { loss: -log_p, grad })
}

/// CTC loss recorded on a tape. `log_probs` is `[T', V]` (already
/// log-softmaxed). Returns `None` for an unalignable target; the caller
/// decides what to skip.
pub fn ctc_loss_var<T: Float>(
    tape: &mut Tape<T>,
    log_probs: Var,
    target: &[usize],
) -> Result<Option<(Var, f64)>> {
    let value = ctc_loss(&tape.value(log_probs).cast(), target)?;
    if !value.alignable() {
        return Ok(None);
    }
    let grad = value.grad.iter().map(|&g| T::from_f64(g)).collect();
    let var = tape.precomputed_scalar(log_probs, T::from_f64(value.loss), grad)?;
    Ok(Some((var, value.loss)))
}

/// Mean over kept positions of the cross-entropy between
/// `q = (1 − eps)·onehot + eps/V` and `softmax(logits)`.
pub fn label_smoothed_ce<T: Float>(
    tape: &mut Tape<T>,
    logits: Var,
    targets: &[usize],
    keep: &[bool],
    eps: f64,
) -> Result<Var> {
    let (n, v) = tape.value(logits).dims2()?;
    if targets.len() != n || keep.len() != n {
        return Err(Error::dim(
            "label_smoothed_ce",
            format!("{n} positions, {} targets, {} mask entries", targets.len(), keep.len()),
        ));
    }
    if let Some(&bad) = targets.iter().find(|&&k| k >= v) {
        return Err(Error::contract(format!("target id {bad} outside {v} classes")));
    }
    let kept = keep.iter().filter(|&&k| k).count();
    if kept == 0 {
        return Err(Error::contract("every position is masked; the loss is empty"));
    }
    let off = eps / v as f64;
    let on = 1.0 - eps + off;
    let q = Tensor::from_fn(&[n, v], |i| {
        let (row, col) = (i / v, i % v);
        let w = if !keep[row] {
            0.0
        } else if col == targets[row] {
            on
        } else {
            off
        };
        T::from_f64(w)
    });
    let q = tape.constant(q);
    let lp = tape.log_softmax(logits, 1)?;
    let weighted = tape.mul(lp, q)?;
    let total = tape.sum(weighted);
    Ok(tape.scale(total, -1.0 / kept as f64))
}

/// `true` where a reference token contributes to the classifier losses,
/// i.e. everywhere except mask tokens.
pub fn build_loss_mask(reference_tokens: &[usize]) -> Vec<bool> {
    reference_tokens.iter().map(|&t| t != MASK).collect()
}

/// Teacher-forcing inputs and targets derived from one raw transcript.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingTarget {
    /// `BOS y1 .. yn`.
    pub decoder_input: Vec<usize>,
    /// `y1 .. yn EOS`.
    pub decoder_target: Vec<usize>,
    pub keep: Vec<bool>,
    /// Transcript with masked words deleted.
    pub ctc_target: Vec<usize>,
    /// False when every word is masked: the utterance then trains CTC only.
    pub use_attention: bool,
}

impl TrainingTarget {
    pub fn new(raw: &str, tokenizer: &Tokenizer, mask_special_tokens: bool) -> Self {
        let words = mask_words(raw);
        let joined = |keep_masked: bool| {
            words
                .iter()
                .filter_map(|w| match w {
                    MaskedWord::Word(s) => Some(s.as_str()),
                    MaskedWord::Masked if keep_masked => Some(crate::data::text::MASK_WORD),
                    MaskedWord::Masked => None,
                })
                .collect::<Vec<_>>()
                .join(" ")
        };
        let tokens = tokenizer.tokenize(&joined(true));
        let ctc_target = tokenizer.tokenize(&joined(false));
        let mut decoder_input = vec![BOS];
        decoder_input.extend(&tokens);
        let mut decoder_target = tokens.clone();
        decoder_target.push(EOS);
        let keep = if mask_special_tokens {
            build_loss_mask(&decoder_target)
        } else {
            vec![true; decoder_target.len()]
        };
        let use_attention = words.iter().any(|w| matches!(w, MaskedWord::Word(_)));
        Self {
            decoder_input,
            decoder_target,
            keep,
            ctc_target,
            use_attention,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveConfig {
    /// CTC weight in the hybrid objective.
    pub alpha: f64,
    pub betas: BTreeMap<usize, f64>,
    pub label_smoothing_eps: f64,
    pub mask_special_tokens: bool,
}

impl ObjectiveConfig {
    pub fn new(betas: BTreeMap<usize, f64>) -> Self {
        Self {
            alpha: 0.3,
            betas,
            label_smoothing_eps: 0.1,
            mask_special_tokens: true,
        }
    }

    /// Final-layer-only objective.
    pub fn baseline(decoder_layers: usize) -> Self {
        Self::new(BTreeMap::from([(decoder_layers, 1.0)]))
    }

    pub fn validate(&self, classifier_layers: &BTreeSet<usize>) -> Result<()> {
        let mut problems = Vec::new();
        if !(0.0..=1.0).contains(&self.alpha) {
            problems.push(format!("alpha {} outside [0, 1]", self.alpha));
        }
        if !(0.0..1.0).contains(&self.label_smoothing_eps) {
            problems.push(format!(
                "label smoothing {} outside [0, 1)",
                self.label_smoothing_eps
            ));
        }
        if self.betas.is_empty() {
            problems.push("no betas".into());
        }
        for (&d, &b) in &self.betas {
            if !classifier_layers.contains(&d) {
                problems.push(format!("beta for layer {d}, which has no classifier"));
            }
            if !(b >= 0.0) {
                problems.push(format!("beta_{d} = {b} is negative"));
            }
        }
        let sum: f64 = self.betas.values().sum();
        if (sum - 1.0).abs() > 1e-9 {
            problems.push(format!("betas sum to {sum}, not 1"));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::config(format!("objective: {}", problems.join("; "))))
        }
    }

    /// Layers whose classifier must be evaluated during training.
    pub fn active_layers(&self) -> BTreeSet<usize> {
        self.betas
            .iter()
            .filter(|(_, &b)| b != 0.0)
            .map(|(&d, _)| d)
            .collect()
    }

    pub fn from_kv(kv: &KvConfig, decoder_layers: usize) -> Result<Self> {
        let mut cfg = Self::baseline(decoder_layers);
        cfg.alpha = kv.get_or("alpha", cfg.alpha)?;
        cfg.label_smoothing_eps = kv.get_or("label_smoothing", cfg.label_smoothing_eps)?;
        cfg.mask_special_tokens = kv.get_or("mask_special_tokens", cfg.mask_special_tokens)?;
        if let Some(s) = kv.get_str("betas") {
            cfg.betas = parse_layer_map(s)?;
        }
        Ok(cfg)
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("alpha", self.alpha);
        kv.set("betas", format_layer_map(&self.betas));
        kv.set("label_smoothing", self.label_smoothing_eps);
        kv.set("mask_special_tokens", self.mask_special_tokens);
        kv
    }
}

/// Parses `"2:0.4,4:0.6"`.
pub fn parse_layer_map(s: &str) -> Result<BTreeMap<usize, f64>> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| {
            let parsed = p
                .split_once(':')
                .and_then(|(d, b)| Some((d.trim().parse().ok()?, b.trim().parse().ok()?)));
            parsed.ok_or_else(|| Error::config(format!("bad layer weight {p:?}, expected d:w")))
        })
        .collect()
}

pub fn format_layer_map(m: &BTreeMap<usize, f64>) -> String {
    m.iter()
        .map(|(d, b)| format!("{d}:{b}"))
        .collect::<Vec<_>>()
        .join(",")
}

/// `Σ_d β_d · CE_d` over the classifiers with nonzero weight.
pub fn decred_loss<T: Float>(
    tape: &mut Tape<T>,
    vars: &DecoderVars,
    target: &TrainingTarget,
    betas: &BTreeMap<usize, f64>,
    eps: f64,
) -> Result<(Var, BTreeMap<usize, f64>)> {
    let mut total: Option<Var> = None;
    let mut parts = BTreeMap::new();
    for (&d, &beta) in betas {
        if beta == 0.0 {
            continue;
        }
        let logits = *vars.logits_by_classifier.get(&d).ok_or_else(|| {
            Error::config(format!("beta_{d} is set but layer {d} has no classifier logits"))
        })?;
        let ce = label_smoothed_ce(tape, logits, &target.decoder_target, &target.keep, eps)?;
        parts.insert(d, tape.value(ce).item().to_f64());
        let term = tape.scale(ce, beta);
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    let total = total.ok_or_else(|| Error::config("all betas are zero"))?;
    Ok((total, parts))
}

/// Value-only form of [`decred_loss`] over precomputed decoder outputs.
pub fn decred_loss_value(
    outputs: &DecoderForwardOutput<f64>,
    target: &TrainingTarget,
    betas: &BTreeMap<usize, f64>,
    eps: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = DecoderVars {
        hidden_by_layer: BTreeMap::new(),
        logits_by_classifier: outputs
            .logits_by_classifier
            .iter()
            .map(|(&d, t)| (d, tape.constant(t.clone())))
            .collect(),
    };
    let (v, _) = decred_loss(&mut tape, &vars, target, betas, eps)?;
    Ok(tape.value(v).item())
}

/// `α·ctc + (1−α)·decred`.
pub fn total_loss(ctc: f64, decred: f64, alpha: f64) -> f64 {
    alpha * ctc + (1.0 - alpha) * decred
}

/// Tape form of [`total_loss`]; a missing term is treated as weightless.
pub fn total_loss_var<T: Float>(
    tape: &mut Tape<T>,
    ctc: Option<Var>,
    decred: Option<Var>,
    alpha: f64,
) -> Result<Option<Var>> {
    let a = ctc.filter(|_| alpha != 0.0).map(|c| tape.scale(c, alpha));
    let b = decred
        .filter(|_| alpha != 1.0)
        .map(|d| tape.scale(d, 1.0 - alpha));
    Ok(match (a, b) {
        (Some(a), Some(b)) => Some(tape.add(a, b)?),
        (a, b) => a.or(b),
    })
}
