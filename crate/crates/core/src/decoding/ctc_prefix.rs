//! CTC prefix probabilities for label-synchronous decoding.
//!
//! For a prefix `g` the state keeps, per frame `t`, the log-probability of
//! all paths over frames `0..=t` that emit exactly `g` and end in a
//! non-blank (`r_n`) or blank (`r_b`) frame. The prefix score `psi(g)` is the
//! log-probability that the full label sequence starts with `g`.

use crate::error::{Error, Result};
use crate::tensor::{log_add_exp, Tensor};
use crate::vocab::{BLANK, EOS};

#[derive(Clone, Debug, PartialEq)]
pub struct CtcState {
    r_n: Vec<f64>,
    r_b: Vec<f64>,
    last: Option<usize>,
    /// Cumulative prefix log-probability.
    pub score: f64,
    pub finished: bool,
}

pub struct CtcPrefixScorer<'a> {
    log_probs: &'a Tensor<f64>,
    frames: usize,
    vocab: usize,
}

impl<'a> CtcPrefixScorer<'a> {
    /// `log_probs` is `[T', V]`, log-softmaxed, blank at 0.
    pub fn new(log_probs: &'a Tensor<f64>) -> Result<Self> {
        let (frames, vocab) = log_probs.dims2()?;
        if frames == 0 {
            return Err(Error::contract("CTC prefix scoring needs at least one frame"));
        }
        Ok(Self {
            log_probs,
            frames,
            vocab,
        })
    }

    fn lp(&self, t: usize, k: usize) -> f64 {
        self.log_probs.data()[t * self.vocab + k]
    }

    /// State of the empty prefix; its score is 0.
    pub fn init(&self) -> CtcState {
        let mut r_b = Vec::with_capacity(self.frames);
        let mut acc = 0.0;
        for t in 0..self.frames {
            acc += self.lp(t, BLANK);
            r_b.push(acc);
        }
        CtcState {
            r_n: vec![f64::NEG_INFINITY; self.frames],
            r_b,
            last: None,
            score: 0.0,
            finished: false,
        }
    }

    /// Extends `state` by `token`. Returns the log-probability increment and
    /// the new state. EOS closes the sequence and scores it completely.
    pub fn step(&self, state: &CtcState, token: usize) -> Result<(f64, CtcState)> {
        if state.finished {
            return Err(Error::contract("cannot extend a finished CTC prefix"));
        }
        let t_end = self.frames - 1;
        if token == EOS {
            let full = log_add_exp(state.r_n[t_end], state.r_b[t_end]);
            let next = CtcState {
                r_n: Vec::new(),
                r_b: Vec::new(),
                last: Some(EOS),
                score: full,
                finished: true,
            };
            return Ok((increment(full, state.score), next));
        }
        if token == BLANK || token >= self.vocab {
            return Err(Error::contract(format!(
                "token {token} cannot extend a CTC prefix over {} classes",
                self.vocab
            )));
        }
        let ninf = f64::NEG_INFINITY;
        let mut r_n = vec![ninf; self.frames];
        let mut r_b = vec![ninf; self.frames];
        // Paths that can be followed by `token` as a new label at frame t.
        let phi = |t: usize| {
            if state.last == Some(token) {
                state.r_b[t]
            } else {
                log_add_exp(state.r_b[t], state.r_n[t])
            }
        };
        if state.last.is_none() {
            r_n[0] = self.lp(0, token);
        }
        let mut psi = r_n[0];
        for t in 1..self.frames {
            let p = phi(t - 1);
            let x = self.lp(t, token);
            r_n[t] = log_add_exp(r_n[t - 1], p) + x;
            r_b[t] = log_add_exp(r_b[t - 1], r_n[t - 1]) + self.lp(t, BLANK);
            psi = log_add_exp(psi, p + x);
        }
        let next = CtcState {
            r_n,
            r_b,
            last: Some(token),
            score: psi,
            finished: false,
        };
        Ok((increment(psi, state.score), next))
    }

    /// Complete-sequence log-probability of `tokens` by stepping through
    /// them and closing with EOS.
    pub fn sequence_score(&self, tokens: &[usize]) -> Result<f64> {
        let mut s = self.init();
        for &t in tokens.iter().chain([EOS].iter()) {
            s = self.step(&s, t)?.1;
        }
        Ok(s.score)
    }
}

fn increment(new: f64, old: f64) -> f64 {
    if new == f64::NEG_INFINITY {
        f64::NEG_INFINITY
    } else {
        new - old
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::ctc_loss;

    fn table() -> Tensor<f64> {
        let rows: Vec<Vec<f64>> = [[0.5, 0.2, 0.1, 0.1, 0.1], [0.1, 0.6, 0.1, 0.1, 0.1], [0.3, 0.1, 0.1, 0.1, 0.4]]
            .iter()
            .map(|r| r.iter().map(|p: &f64| p.ln()).collect())
            .collect();
        Tensor::from_rows(&rows).unwrap()
    }

    #[test]
    fn empty_prefix_scores_zero_and_eos_matches_loss() {
        let lp = table();
        let s = CtcPrefixScorer::new(&lp).unwrap();
        assert_eq!(s.init().score, 0.0);
        for target in [vec![], vec![1], vec![1, 4], vec![4, 4]] {
            let score = s.sequence_score(&target).unwrap();
            let loss = ctc_loss(&lp, &target).unwrap().loss;
            assert!((score + loss).abs() < 1e-12, "{target:?}");
        }
    }

    #[test]
    fn finished_state_rejects_steps() {
        let lp = table();
        let s = CtcPrefixScorer::new(&lp).unwrap();
        let (_, done) = s.step(&s.init(), EOS).unwrap();
        assert!(s.step(&done, 1).is_err());
    }
}
