//! Fitting decode-time mixing weights on held-out data with the network
//! frozen.
//!
//! Classifier logits do not depend on the mixing weights, so they are
//! computed once per fit by teacher forcing and the optimisation runs over
//! the cached values.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;

use crate::data::{Corpus, Manifest, Tokenizer};
use crate::decoding::MixingWeights;
use crate::error::{Error, Result};
use crate::model::{CrossContext, Model};
use crate::objective::TrainingTarget;
use crate::seed::rng_for;
use crate::tensor::Float;

/// Deterministic utterance-level split; `ratio` of the utterances go to the
/// fit set. Both sides keep manifest order.
pub fn split_dev(dev: &Manifest, ratio: f64, seed: u64) -> Result<(Manifest, Manifest)> {
    let n = dev.len();
    if n < 2 {
        return Err(Error::contract(format!(
            "cannot split a dev set of {n} utterance(s)"
        )));
    }
    let n_fit = ((ratio * n as f64).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, "calibration-split"));
    let fit_idx: BTreeSet<usize> = order[..n_fit].iter().copied().collect();
    let ids: BTreeSet<&str> = fit_idx
        .iter()
        .map(|&i| dev.entries()[i].utterance_id.as_str())
        .collect();
    let fit = dev.filter(|e| ids.contains(e.utterance_id.as_str()));
    let hold = dev.filter(|e| !ids.contains(e.utterance_id.as_str()));
    Ok((fit, hold))
}

/// Cached classifier logits of every scored position.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherForced {
    pub vocab: usize,
    pub final_layer: usize,
    /// Layer → row-major `[positions, V]` logits.
    pub logits: BTreeMap<usize, Vec<f64>>,
    pub targets: Vec<usize>,
}

impl TeacherForced {
    pub fn positions(&self) -> usize {
        self.targets.len()
    }

    /// Teacher-forced pass over every utterance that has attention targets;
    /// masked positions are left out.
    pub fn collect<T: Float>(model: &Model<T>, corpus: &Corpus, tokenizer: &Tokenizer) -> Result<Self> {
        let cfg = model.config();
        let mut logits: BTreeMap<usize, Vec<f64>> =
            cfg.classifier_layers.iter().map(|&d| (d, Vec::new())).collect();
        let mut targets = Vec::new();
        for e in corpus.manifest.entries() {
            let tgt = TrainingTarget::new(&e.raw_transcript, tokenizer, true);
            if !tgt.use_attention {
                continue;
            }
            let feats = corpus.features_of(&e.utterance_id)?.cast::<T>();
            let mut f = model.inference();
            let (states, _) = f.encode(&feats, feats.shape()[0])?;
            let vars = f.decode(CrossContext::Encoder(states), &tgt.decoder_input, None)?;
            let out = f.values(&vars);
            for (n, (&y, &keep)) in tgt.decoder_target.iter().zip(&tgt.keep).enumerate() {
                if !keep {
                    continue;
                }
                targets.push(y);
                for (d, row) in out.logits_at(n) {
                    logits.get_mut(&d).expect("classifier layer").extend(row);
                }
            }
        }
        if targets.is_empty() {
            return Err(Error::contract("no scorable tokens for calibration"));
        }
        Ok(Self {
            vocab: cfg.vocab_size,
            final_layer: cfg.decoder_layers,
            logits,
            targets,
        })
    }

    fn row(&self, d: usize, n: usize) -> &[f64] {
        &self.logits[&d][n * self.vocab..(n + 1) * self.vocab]
    }

    fn mixed(&self, weights: &MixingWeights, n: usize) -> Result<Vec<f64>> {
        let rows = self
            .logits
            .keys()
            .map(|&d| (d, self.row(d, n).to_vec()))
            .collect();
        weights.mix(&rows, self.final_layer)
    }

    /// Mean NLL and top-1 accuracy under `weights`.
    pub fn evaluate(&self, weights: &MixingWeights) -> Result<CalibrationReport> {
        let mut nll = 0.0;
        let mut correct = 0;
        for (n, &y) in self.targets.iter().enumerate() {
            let z = self.mixed(weights, n)?;
            let lp = crate::tensor::log_softmax_f64(&z);
            nll -= lp[y];
            let top = (0..z.len())
                .max_by(|&a, &b| z[a].total_cmp(&z[b]).then(b.cmp(&a)))
                .expect("non-empty vocabulary");
            correct += usize::from(top == y);
        }
        let n = self.positions() as f64;
        Ok(CalibrationReport {
            nll: nll / n,
            accuracy: correct as f64 / n,
            tokens: self.positions(),
        })
    }

    /// Mean NLL and its gradient with respect to the mixing parameters,
    /// laid out like [`flatten`].
    fn nll_and_grad(&self, weights: &MixingWeights) -> Result<(f64, Vec<f64>)> {
        let layers: Vec<usize> = weights.layers(self.final_layer).into_iter().collect();
        let v = self.vocab;
        let per_layer = match weights {
            MixingWeights::Vector(_) => v,
            _ => 1,
        };
        let mut grad = vec![0.0; layers.len() * per_layer];
        let mut nll = 0.0;
        for (n, &y) in self.targets.iter().enumerate() {
            let z = self.mixed(weights, n)?;
            let p = crate::tensor::softmax_f64(&z);
            nll -= crate::tensor::log_softmax_f64(&z)[y];
            for (li, &d) in layers.iter().enumerate() {
                let l = self.row(d, n);
                for k in 0..v {
                    let r = (p[k] - f64::from(u8::from(k == y))) * l[k];
                    match weights {
                        MixingWeights::Vector(_) => grad[li * v + k] += r,
                        _ => grad[li] += r,
                    }
                }
            }
        }
        let n = self.positions() as f64;
        grad.iter_mut().for_each(|g| *g /= n);
        Ok((nll / n, grad))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationReport {
    pub nll: f64,
    pub accuracy: f64,
    pub tokens: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CalibrationMode {
    Scalar,
    Vector,
}

impl std::str::FromStr for CalibrationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scalar" => Ok(Self::Scalar),
            "vector" => Ok(Self::Vector),
            other => Err(Error::config(format!(
                "calibration mode must be scalar or vector, got {other:?}"
            ))),
        }
    }
}

/// Mixing weights equivalent to plain final-layer decoding.
pub fn initial_weights(mode: CalibrationMode, layers: &BTreeSet<usize>, final_layer: usize, vocab: usize) -> MixingWeights {
    match mode {
        CalibrationMode::Scalar => MixingWeights::scalar_one_hot(layers, final_layer),
        CalibrationMode::Vector => MixingWeights::vector_init(layers, final_layer, vocab),
    }
}

fn flatten(w: &MixingWeights) -> Vec<f64> {
    match w {
        MixingWeights::Vanilla => Vec::new(),
        MixingWeights::Scalar(m) => m.values().copied().collect(),
        MixingWeights::Vector(m) => m.values().flatten().copied().collect(),
    }
}

fn unflatten(like: &MixingWeights, x: &[f64]) -> MixingWeights {
    match like {
        MixingWeights::Vanilla => MixingWeights::Vanilla,
        MixingWeights::Scalar(m) => MixingWeights::Scalar(m.keys().copied().zip(x.iter().copied()).collect()),
        MixingWeights::Vector(m) => {
            let width = x.len() / m.len().max(1);
            MixingWeights::Vector(
                m.keys()
                    .copied()
                    .zip(x.chunks(width.max(1)).map(<[f64]>::to_vec))
                    .collect(),
            )
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitOptions {
    pub mode: CalibrationMode,
    pub epochs: usize,
    /// Initial step size of the line search.
    pub lr: f64,
    pub patience: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitResult {
    /// Weights with the lowest holdout NLL seen.
    pub weights: MixingWeights,
    /// Fit-set NLL per accepted iterate, starting with the initial weights.
    pub fit_nll: Vec<f64>,
    pub holdout_nll: Vec<f64>,
}

/// Full-batch gradient descent with Armijo backtracking from the vanilla
/// point, stopping early when holdout NLL fails to improve for `patience`
/// epochs.
pub fn fit_on(fit: &TeacherForced, holdout: &TeacherForced, opts: &FitOptions) -> Result<FitResult> {
    let layers: BTreeSet<usize> = fit.logits.keys().copied().collect();
    let mut w = initial_weights(opts.mode, &layers, fit.final_layer, fit.vocab);
    let (mut nll, mut grad) = fit.nll_and_grad(&w)?;
    let initial = nll;
    let mut best = (holdout.evaluate(&w)?.nll, w.clone());
    let mut fit_nll = vec![nll];
    let mut holdout_nll = vec![best.0];
    let mut since_best = 0;
    let mut lr = opts.lr;
    for _ in 0..opts.epochs {
        let x = flatten(&w);
        let g2: f64 = grad.iter().map(|g| g * g).sum();
        if g2 == 0.0 {
            break;
        }
        let mut accepted = None;
        for _ in 0..40 {
            let cand: Vec<f64> = x.iter().zip(&grad).map(|(a, g)| a - lr * g).collect();
            let cw = unflatten(&w, &cand);
            let (cn, cg) = fit.nll_and_grad(&cw)?;
            if cn.is_finite() && cn <= nll - 1e-4 * lr * g2 {
                accepted = Some((cw, cn, cg));
                break;
            }
            lr *= 0.5;
        }
        let Some((cw, cn, cg)) = accepted else {
            break;
        };
        if cn > 10.0 * initial {
            return Err(Error::Numeric(format!(
                "calibration diverged: NLL {cn} from initial {initial}"
            )));
        }
        w = cw;
        nll = cn;
        grad = cg;
        lr *= 2.0;
        fit_nll.push(nll);
        let h = holdout.evaluate(&w)?.nll;
        holdout_nll.push(h);
        if h < best.0 {
            best = (h, w.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= opts.patience {
                break;
            }
        }
    }
    Ok(FitResult {
        weights: best.1,
        fit_nll,
        holdout_nll,
    })
}

/// Collects teacher-forced logits for both splits and fits.
pub fn fit_mixing_weights<T: Float>(
    model: &Model<T>,
    fit_set: &Corpus,
    holdout_set: &Corpus,
    tokenizer: &Tokenizer,
    opts: &FitOptions,
) -> Result<FitResult> {
    let fit = TeacherForced::collect(model, fit_set, tokenizer)?;
    let hold = TeacherForced::collect(model, holdout_set, tokenizer)?;
    fit_on(&fit, &hold, opts)
}

pub fn evaluate_calibration<T: Float>(
    model: &Model<T>,
    weights: &MixingWeights,
    holdout_set: &Corpus,
    tokenizer: &Tokenizer,
) -> Result<CalibrationReport> {
    TeacherForced::collect(model, holdout_set, tokenizer)?.evaluate(weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ManifestEntry;

    fn manifest(n: usize) -> Manifest {
        Manifest::new(
            (0..n)
                .map(|i| ManifestEntry {
                    utterance_id: format!("u{i}"),
                    source: "synth:0:d".into(),
                    raw_transcript: "x".into(),
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn split_is_seventy_thirty_and_exhaustive() {
        let m = manifest(10);
        let (a, b) = split_dev(&m, 0.7, 3).unwrap();
        assert_eq!((a.len(), b.len()), (7, 3));
        assert_eq!(split_dev(&m, 0.7, 3).unwrap(), (a.clone(), b.clone()));
        for e in m.entries() {
            assert!(a.get(&e.utterance_id).is_some() != b.get(&e.utterance_id).is_some());
        }
        assert!(split_dev(&manifest(1), 0.7, 0).is_err());
    }

    fn toy() -> TeacherForced {
        let mut rng = rng_for(5, "toy");
        use rand::Rng;
        let v = 5;
        let n = 40;
        let logits = [2usize, 4]
            .iter()
            .map(|&d| (d, (0..n * v).map(|_| rng.random_range(-2.0..2.0)).collect()))
            .collect();
        let targets = (0..n).map(|_| rng.random_range(0..v)).collect();
        TeacherForced {
            vocab: v,
            final_layer: 4,
            logits,
            targets,
        }
    }

    #[test]
    fn analytic_gradient_matches_differences() {
        let tf = toy();
        let layers = BTreeSet::from([2, 4]);
        for mode in [CalibrationMode::Scalar, CalibrationMode::Vector] {
            let w0 = initial_weights(mode, &layers, 4, 5);
            let x: Vec<f64> = flatten(&w0).iter().enumerate().map(|(i, a)| a + 0.1 * i as f64).collect();
            let w = unflatten(&w0, &x);
            let (_, g) = tf.nll_and_grad(&w).unwrap();
            for i in 0..x.len() {
                let mut p = x.clone();
                p[i] += 1e-6;
                let mut m = x.clone();
                m[i] -= 1e-6;
                let fp = tf.evaluate(&unflatten(&w0, &p)).unwrap().nll;
                let fm = tf.evaluate(&unflatten(&w0, &m)).unwrap().nll;
                assert!(((fp - fm) / 2e-6 - g[i]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn fitting_never_increases_fit_nll() {
        let tf = toy();
        for mode in [CalibrationMode::Scalar, CalibrationMode::Vector] {
            let opts = FitOptions {
                mode,
                epochs: 50,
                lr: 1.0,
                patience: 3,
            };
            let r = fit_on(&tf, &tf, &opts).unwrap();
            assert!(r.fit_nll.windows(2).all(|w| w[1] <= w[0]));
            let end = tf.evaluate(&r.weights).unwrap().nll;
            assert!(end <= r.fit_nll[0]);
            let zero = fit_on(&tf, &tf, &FitOptions { epochs: 0, ..opts }).unwrap();
            assert_eq!(zero.weights, initial_weights(mode, &BTreeSet::from([2, 4]), 4, 5));
        }
    }
}
