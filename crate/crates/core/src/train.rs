//! Teacher-forced training with AdamW, online augmentation, dev-WER
//! checkpoint selection and exact resumption.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::config::KvConfig;
use crate::data::{
    random_speed_factor, scoring_reference, spec_augment, speed_perturb, Corpus, ManifestEntry,
    SpecAugConfig, Tokenizer,
};
use crate::decoding::{decode_corpus, DecodeOptions, MixingWeights, SearchConfig};
use crate::error::{Error, Result};
use crate::eval::{wer, ScoringMode};
use crate::model::{Checkpoint, CrossContext, Model, ModelConfig, ParamStore};
use crate::objective::{ctc_loss_var, decred_loss, total_loss_var, ObjectiveConfig, TrainingTarget};
use crate::seed::{derive_seed, rng_for};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate, reached at the end of warm-up.
    pub lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub specaug: bool,
    /// First step at which SpecAugment is applied.
    pub specaug_after: usize,
    pub speed_perturb: bool,
    /// Training utterances longer than this are dropped; 0 keeps all.
    pub max_frames: usize,
    /// Steps between dev evaluations; 0 evaluates at the end of each epoch.
    pub eval_every: usize,
    /// Evaluations without dev improvement before stopping; 0 never stops.
    pub patience: usize,
    /// CTC weight of dev-set greedy decoding.
    pub decode_lambda: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            epochs: 20,
            batch_size: 8,
            lr: 3e-3,
            warmup_steps: 100,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-9,
            grad_clip: 5.0,
            specaug: true,
            specaug_after: 200,
            speed_perturb: true,
            max_frames: 0,
            eval_every: 0,
            patience: 0,
            decode_lambda: 0.3,
        }
    }
}

impl TrainConfig {
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let d = Self::default();
        let c = Self {
            seed: kv.get_or("seed", d.seed)?,
            epochs: kv.get_or("epochs", d.epochs)?,
            batch_size: kv.get_or("batch_size", d.batch_size)?,
            lr: kv.get_or("lr", d.lr)?,
            warmup_steps: kv.get_or("warmup_steps", d.warmup_steps)?,
            weight_decay: kv.get_or("weight_decay", d.weight_decay)?,
            beta1: kv.get_or("beta1", d.beta1)?,
            beta2: kv.get_or("beta2", d.beta2)?,
            adam_eps: kv.get_or("adam_eps", d.adam_eps)?,
            grad_clip: kv.get_or("grad_clip", d.grad_clip)?,
            specaug: kv.get_or("specaug", d.specaug)?,
            specaug_after: kv.get_or("specaug_after", d.specaug_after)?,
            speed_perturb: kv.get_or("speed_perturb", d.speed_perturb)?,
            max_frames: kv.get_or("max_frames", d.max_frames)?,
            eval_every: kv.get_or("eval_every", d.eval_every)?,
            patience: kv.get_or("patience", d.patience)?,
            decode_lambda: kv.get_or("decode_lambda", d.decode_lambda)?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("seed", self.seed);
        kv.set("epochs", self.epochs);
        kv.set("batch_size", self.batch_size);
        kv.set("lr", self.lr);
        kv.set("warmup_steps", self.warmup_steps);
        kv.set("weight_decay", self.weight_decay);
        kv.set("beta1", self.beta1);
        kv.set("beta2", self.beta2);
        kv.set("adam_eps", self.adam_eps);
        kv.set("grad_clip", self.grad_clip);
        kv.set("specaug", self.specaug);
        kv.set("specaug_after", self.specaug_after);
        kv.set("speed_perturb", self.speed_perturb);
        kv.set("max_frames", self.max_frames);
        kv.set("eval_every", self.eval_every);
        kv.set("patience", self.patience);
        kv.set("decode_lambda", self.decode_lambda);
        kv
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.epochs == 0 || self.batch_size == 0 {
            problems.push("epochs and batch_size must be positive".to_string());
        }
        if !(self.lr > 0.0) {
            problems.push(format!("lr {} must be positive", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            problems.push("Adam betas must lie in [0, 1)".into());
        }
        if !(0.0..=1.0).contains(&self.decode_lambda) {
            problems.push(format!("decode_lambda {} outside [0, 1]", self.decode_lambda));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::config(format!("train: {}", problems.join("; "))))
        }
    }

    /// Linear warm-up to `lr`, then linear decay to zero at `total_steps`.
    /// `step` counts from 1.
    pub fn lr_at(&self, step: usize, total_steps: usize) -> f64 {
        if step <= self.warmup_steps {
            return self.lr * step as f64 / self.warmup_steps.max(1) as f64;
        }
        let rest = total_steps.saturating_sub(self.warmup_steps).max(1) as f64;
        let done = (step - self.warmup_steps) as f64;
        self.lr * (1.0 - done / rest).max(0.0)
    }
}

/// Loss components of one optimiser step, averaged over its utterances.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub ctc: f64,
    pub attn: BTreeMap<usize, f64>,
    pub utterances: usize,
    pub skipped: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalLog {
    pub step: usize,
    pub dev_wer: f64,
}

#[derive(Clone, Debug)]
struct AdamState {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

/// The mutable state of a training run.
pub struct Trainer {
    pub model: Model<f32>,
    pub objective: ObjectiveConfig,
    pub config: TrainConfig,
    pub tokenizer: Tokenizer,
    adam: AdamState,
    /// Completed optimiser steps.
    pub step: usize,
    epoch: usize,
    /// Batches of the current epoch already consumed.
    batch_in_epoch: usize,
    best: Option<(f64, usize, ParamStore<f32>)>,
    evals_since_best: usize,
    pub steps: Vec<StepLog>,
    pub evals: Vec<EvalLog>,
    /// Step and eval entries already appended to the log file.
    logged: (usize, usize),
}

fn is_decayed(name: &str) -> bool {
    name.ends_with(".weight")
}

impl Trainer {
    pub fn new(
        model_cfg: ModelConfig,
        objective: ObjectiveConfig,
        config: TrainConfig,
        tokenizer: Tokenizer,
    ) -> Result<Self> {
        config.validate()?;
        objective.validate(&model_cfg.classifier_layers)?;
        if tokenizer.len() > model_cfg.vocab_size {
            return Err(Error::config(format!(
                "tokenizer has {} ids but vocab_size is {}",
                tokenizer.len(),
                model_cfg.vocab_size
            )));
        }
        let model = Model::build(model_cfg, config.seed)?;
        let adam = AdamState {
            m: model.params().ids().map(|id| vec![0.0; model.params().get(id).numel()]).collect(),
            v: model.params().ids().map(|id| vec![0.0; model.params().get(id).numel()]).collect(),
        };
        Ok(Self {
            model,
            objective,
            config,
            tokenizer,
            adam,
            step: 0,
            epoch: 0,
            batch_in_epoch: 0,
            best: None,
            evals_since_best: 0,
            steps: Vec::new(),
            evals: Vec::new(),
            logged: (0, 0),
        })
    }

    /// Indices of training utterances within `max_frames`.
    fn eligible(&self, train: &Corpus) -> Vec<usize> {
        let max = self.config.max_frames;
        (0..train.manifest.len())
            .filter(|&i| {
                max == 0
                    || train
                        .features
                        .get(&train.manifest.entries()[i].utterance_id)
                        .is_some_and(|f| f.shape()[0] <= max)
            })
            .collect()
    }

    fn epoch_order(&self, train: &Corpus, epoch: usize) -> Vec<usize> {
        let mut order = self.eligible(train);
        order.shuffle(&mut rng_for(self.config.seed, &format!("epoch/{epoch}")));
        order
    }

    pub fn steps_per_epoch(&self, train: &Corpus) -> usize {
        self.eligible(train).len().div_ceil(self.config.batch_size)
    }

    /// Loss and parameter gradients of one utterance. `None` when the
    /// utterance contributes nothing (unalignable CTC target).
    fn utterance(
        &self,
        entry: &ManifestEntry,
        features: &Tensor<f32>,
        step: usize,
    ) -> Result<Option<(f64, f64, BTreeMap<usize, f64>, Vec<Option<Vec<f32>>>)>> {
        let cfg = &self.config;
        let id = &entry.utterance_id;
        let mut rng = rng_for(cfg.seed, &format!("aug/{step}/{id}"));
        let mut feats = features.clone();
        if cfg.speed_perturb {
            feats = speed_perturb(&feats, random_speed_factor(&mut rng));
        }
        if cfg.specaug && step > cfg.specaug_after {
            let f = self.model.config().feature_dim;
            feats = spec_augment(&feats, &SpecAugConfig::scaled(f), &mut rng).0;
        }
        let target = TrainingTarget::new(&entry.raw_transcript, &self.tokenizer, self.objective.mask_special_tokens);
        let mut f = self
            .model
            .session(true, derive_seed(cfg.seed, &format!("dropout/{step}/{id}")));
        let (states, _) = f.encode(&feats, feats.shape()[0])?;
        let alpha = self.objective.alpha;
        let mut ctc_value = 0.0;
        let ctc = if alpha > 0.0 {
            let logits = f.ctc_logits(states)?;
            let lp = f.tape.log_softmax(logits, 1)?;
            match ctc_loss_var(&mut f.tape, lp, &target.ctc_target)? {
                Some((v, value)) => {
                    ctc_value = value;
                    Some(v)
                }
                None => {
                    log::warn!("skipping {id}: CTC target cannot be aligned");
                    return Ok(None);
                }
            }
        } else {
            None
        };
        let mut attn = BTreeMap::new();
        let decred = if target.use_attention && alpha < 1.0 {
            let heads = self.objective.active_layers();
            let vars = f.decode(CrossContext::Encoder(states), &target.decoder_input, Some(&heads))?;
            let (v, parts) = decred_loss(
                &mut f.tape,
                &vars,
                &target,
                &self.objective.betas,
                self.objective.label_smoothing_eps,
            )?;
            attn = parts;
            Some(v)
        } else {
            None
        };
        let Some(total) = total_loss_var(&mut f.tape, ctc, decred, alpha)? else {
            return Ok(None);
        };
        let loss = f64::from(f.tape.value(total).item());
        let mut grads = f.tape.backward(total)?;
        Ok(Some((loss, ctc_value, attn, f.param_grads(&mut grads))))
    }

    /// One optimiser step over `batch`.
    pub fn train_step(&mut self, train: &Corpus, batch: &[usize], total_steps: usize) -> Result<StepLog> {
        let step = self.step + 1;
        let n_params = self.adam.m.len();
        let mut sum: Vec<Option<Vec<f32>>> = vec![None; n_params];
        let mut log = StepLog {
            step,
            lr: self.config.lr_at(step, total_steps),
            loss: 0.0,
            ctc: 0.0,
            attn: BTreeMap::new(),
            utterances: 0,
            skipped: 0,
        };
        for &i in batch {
            let entry = &train.manifest.entries()[i];
            let feats = train.features_of(&entry.utterance_id)?;
            let Some((loss, ctc, attn, grads)) = self.utterance(entry, feats, step)? else {
                log.skipped += 1;
                continue;
            };
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at step {step} on {}",
                    entry.utterance_id
                )));
            }
            log.utterances += 1;
            log.loss += loss;
            log.ctc += ctc;
            for (d, v) in attn {
                *log.attn.entry(d).or_insert(0.0) += v;
            }
            for (acc, g) in sum.iter_mut().zip(grads) {
                if let Some(g) = g {
                    match acc {
                        Some(a) => a.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => *acc = Some(g),
                    }
                }
            }
        }
        if log.utterances > 0 {
            let n = log.utterances as f64;
            log.loss /= n;
            log.ctc /= n;
            log.attn.values_mut().for_each(|v| *v /= n);
            self.apply(&mut sum, log.utterances, log.lr)
                .map_err(|e| Error::Numeric(format!("step {step}: {e}")))?;
        }
        self.step = step;
        self.steps.push(log.clone());
        Ok(log)
    }

    /// AdamW update. Nothing changes when any new value would be non-finite.
    fn apply(&mut self, grads: &mut [Option<Vec<f32>>], count: usize, lr: f64) -> Result<()> {
        let cfg = &self.config;
        let inv = 1.0 / count as f32;
        grads.iter_mut().flatten().flatten().for_each(|g| *g *= inv);
        if cfg.grad_clip > 0.0 {
            let norm = grads
                .iter()
                .flatten()
                .flatten()
                .map(|&g| f64::from(g) * f64::from(g))
                .sum::<f64>()
                .sqrt();
            if norm > cfg.grad_clip {
                let s = (cfg.grad_clip / norm) as f32;
                grads.iter_mut().flatten().flatten().for_each(|g| *g *= s);
            }
        }
        let t = self.step as i32 + 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let mut updates = Vec::new();
        for id in self.model.params().ids() {
            let i = id.index();
            let Some(g) = grads[i].as_ref() else {
                continue;
            };
            let decay = if is_decayed(self.model.params().name(id)) {
                cfg.weight_decay
            } else {
                0.0
            };
            let (m, v) = (&self.adam.m[i], &self.adam.v[i]);
            let p = self.model.params().get(id).data();
            let n = p.len();
            let (mut pn, mut mn, mut vn) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
            for k in 0..n {
                let gk = f64::from(g[k]);
                let mk = b1 * f64::from(m[k]) + (1.0 - b1) * gk;
                let vk = b2 * f64::from(v[k]) + (1.0 - b2) * gk * gk;
                let upd = (mk / c1) / ((vk / c2).sqrt() + cfg.adam_eps) + decay * f64::from(p[k]);
                mn.push(mk as f32);
                vn.push(vk as f32);
                pn.push((f64::from(p[k]) - lr * upd) as f32);
            }
            if !pn.iter().chain(&mn).chain(&vn).all(|x| x.is_finite()) {
                return Err(Error::Numeric(format!(
                    "update of {} is not finite",
                    self.model.params().name(id)
                )));
            }
            updates.push((id, pn, mn, vn));
        }
        for (id, pn, mn, vn) in updates {
            self.model.params_mut().get_mut(id).data_mut().copy_from_slice(&pn);
            self.adam.m[id.index()] = mn;
            self.adam.v[id.index()] = vn;
        }
        Ok(())
    }

    /// Greedy dev-set WER of the current parameters.
    pub fn dev_wer(&self, dev: &Corpus) -> Result<f64> {
        let opts = dev_decode_options(self.config.decode_lambda);
        let hyps = decode_corpus(&self.model, dev, &self.tokenizer, &opts)?;
        let refs: Vec<String> = dev
            .manifest
            .entries()
            .iter()
            .map(|e| scoring_reference(&e.raw_transcript))
            .collect();
        let hyps: Vec<String> = hyps.into_iter().map(|(_, h)| h).collect();
        Ok(wer(&refs, &hyps, ScoringMode::Normalized)?.wer())
    }

    fn evaluate(&mut self, dev: &Corpus) -> Result<()> {
        let w = self.dev_wer(dev)?;
        log::info!("step {}: dev WER {:.4}", self.step, w);
        self.evals.push(EvalLog {
            step: self.step,
            dev_wer: w,
        });
        if self.best.as_ref().is_none_or(|b| w < b.0) {
            self.best = Some((w, self.step, self.model.params().clone()));
            self.evals_since_best = 0;
        } else {
            self.evals_since_best += 1;
        }
        Ok(())
    }

    fn should_stop(&self) -> bool {
        self.config.patience > 0 && self.evals_since_best >= self.config.patience
    }

    /// Trains until the configured epochs finish, early stopping triggers or
    /// `stop_at` steps have been taken. Checkpoints and logs go to `out` when
    /// given.
    pub fn run(&mut self, train: &Corpus, dev: &Corpus, out: Option<&Path>, stop_at: Option<usize>) -> Result<()> {
        let per_epoch = self.steps_per_epoch(train);
        if per_epoch == 0 {
            return Err(Error::contract("no training utterance within max_frames"));
        }
        let total = per_epoch * self.config.epochs;
        let bs = self.config.batch_size;
        while self.epoch < self.config.epochs {
            let order = self.epoch_order(train, self.epoch);
            while self.batch_in_epoch < per_epoch {
                if stop_at.is_some_and(|s| self.step >= s) {
                    return self.persist(out, false);
                }
                let b = self.batch_in_epoch;
                let batch = &order[b * bs..((b + 1) * bs).min(order.len())];
                let result = self.train_step(train, batch, total);
                if let Err(e) = result {
                    self.persist(out, false)?;
                    return Err(e);
                }
                self.batch_in_epoch += 1;
                if self.config.eval_every > 0 && self.step % self.config.eval_every == 0 {
                    self.evaluate(dev)?;
                    self.persist(out, true)?;
                    if self.should_stop() {
                        return Ok(());
                    }
                }
            }
            self.epoch += 1;
            self.batch_in_epoch = 0;
            if self.config.eval_every == 0 {
                self.evaluate(dev)?;
                self.persist(out, true)?;
                if self.should_stop() {
                    return Ok(());
                }
            }
        }
        self.persist(out, false)
    }

    fn persist(&mut self, out: Option<&Path>, after_eval: bool) -> Result<()> {
        let Some(dir) = out else {
            return Ok(());
        };
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.checkpoint().save(&dir.join("last.ckpt"))?;
        if after_eval && self.best.as_ref().is_some_and(|b| b.1 == self.step) {
            self.best_checkpoint().expect("best exists").save(&dir.join("best.ckpt"))?;
        }
        let log_path = dir.join("train_log.tsv");
        let mut text = String::new();
        if self.logged == (0, 0) && self.steps.first().map_or(self.step == 0, |l| l.step == 1) {
            text.push_str(LOG_HEADER);
            std::fs::write(&log_path, "").map_err(|e| Error::io(&log_path, e))?;
        }
        for l in &self.steps[self.logged.0..] {
            text.push_str(&step_line(l));
        }
        for e in &self.evals[self.logged.1..] {
            text.push_str(&eval_line(e));
        }
        self.logged = (self.steps.len(), self.evals.len());
        let mut f = std::fs::OpenOptions::new()
            .append(true)
            .create(true)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?;
        f.write_all(text.as_bytes()).map_err(|e| Error::io(&log_path, e))
    }

    /// In-memory log of this session: step lines, then eval lines.
    pub fn log_tsv(&self) -> String {
        let mut s = String::from(LOG_HEADER);
        self.steps.iter().for_each(|l| s.push_str(&step_line(l)));
        self.evals.iter().for_each(|e| s.push_str(&eval_line(e)));
        s
    }

    pub fn best_dev_wer(&self) -> Option<(f64, usize)> {
        self.best.as_ref().map(|b| (b.0, b.1))
    }

    /// Model with the parameters of the best evaluation so far.
    pub fn best_model(&self) -> Model<f32> {
        let mut m = self.model.clone();
        if let Some(b) = &self.best {
            *m.params_mut() = b.2.clone();
        }
        m
    }

    fn meta(&self) -> KvConfig {
        let mut meta = KvConfig::new();
        meta.merge_prefixed("objective.", &self.objective.to_kv());
        meta.merge_prefixed("train.", &self.config.to_kv());
        meta
    }

    fn best_checkpoint(&self) -> Option<Checkpoint> {
        let b = self.best.as_ref()?;
        let mut ck = Checkpoint::from_model(&self.best_model(), &self.tokenizer);
        ck.meta = self.meta();
        ck.meta.set("state.step", b.1);
        ck.meta.set("state.dev_wer", b.0);
        Some(ck)
    }

    /// Full resumable state: parameters, optimiser moments, position in the
    /// data order and the best parameters seen so far.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_model(&self.model, &self.tokenizer);
        ck.meta = self.meta();
        ck.meta.set("state.step", self.step);
        ck.meta.set("state.epoch", self.epoch);
        ck.meta.set("state.batch_in_epoch", self.batch_in_epoch);
        ck.meta.set("state.evals_since_best", self.evals_since_best);
        let params = self.model.params();
        for id in params.ids() {
            let name = params.name(id);
            let shape = params.get(id).shape().to_vec();
            let i = id.index();
            for (kind, buf) in [("m", &self.adam.m[i]), ("v", &self.adam.v[i])] {
                let t = Tensor::new(shape.clone(), buf.clone()).expect("moment matches parameter");
                ck.tensors.insert(format!("adam.{kind}.{name}"), t);
            }
        }
        if let Some((w, s, store)) = &self.best {
            ck.meta.set("state.best_step", s);
            ck.meta.set("state.best_wer", w);
            for id in store.ids() {
                ck.tensors.insert(format!("best.{}", store.name(id)), store.get(id).clone());
            }
        }
        ck
    }

    /// Restores a run from [`Trainer::checkpoint`] output.
    pub fn resume(ck: &Checkpoint) -> Result<Self> {
        let meta = &ck.meta;
        let objective = ObjectiveConfig::from_kv(&meta.section("objective."), ck.config.decoder_layers)?;
        let config = TrainConfig::from_kv(&meta.section("train."))?;
        let mut t = Self::new(ck.config.clone(), objective, config, ck.tokenizer.clone())?;
        t.model = ck.to_model()?;
        t.step = meta.require("state.step")?;
        t.epoch = meta.require("state.epoch")?;
        t.batch_in_epoch = meta.require("state.batch_in_epoch")?;
        t.evals_since_best = meta.require("state.evals_since_best")?;
        let missing = |n: &str| Error::format("checkpoint", format!("missing tensor {n}"));
        let ids: Vec<_> = t.model.params().ids().collect();
        for &id in &ids {
            let name = t.model.params().name(id).to_string();
            for (kind, dst) in [("m", &mut t.adam.m[id.index()]), ("v", &mut t.adam.v[id.index()])] {
                let key = format!("adam.{kind}.{name}");
                *dst = ck.tensors.get(&key).ok_or_else(|| missing(&key))?.data().to_vec();
            }
        }
        if let Some(best_step) = meta.get::<usize>("state.best_step")? {
            let mut store = t.model.params().clone();
            for &id in &ids {
                let key = format!("best.{}", store.name(id));
                *store.get_mut(id) = ck.tensors.get(&key).ok_or_else(|| missing(&key))?.clone();
            }
            t.best = Some((meta.require("state.best_wer")?, best_step, store));
        }
        Ok(t)
    }
}

const LOG_HEADER: &str = "step\tlr\tloss\tctc\tattn\tutterances\tskipped\n";

fn step_line(l: &StepLog) -> String {
    let attn = l
        .attn
        .iter()
        .map(|(d, v)| format!("{d}:{v:.6}"))
        .collect::<Vec<_>>()
        .join(",");
    format!(
        "{}\t{:.6e}\t{:.6}\t{:.6}\t{attn}\t{}\t{}\n",
        l.step, l.lr, l.loss, l.ctc, l.utterances, l.skipped
    )
}

fn eval_line(e: &EvalLog) -> String {
    format!("# eval step={} dev_wer={:.6}\n", e.step, e.dev_wer)
}

/// Greedy vanilla decoding used for dev-set model selection.
pub fn dev_decode_options(lambda: f64) -> DecodeOptions {
    DecodeOptions {
        weights: MixingWeights::Vanilla,
        search: SearchConfig::greedy(lambda, DEFAULT_MAX_LEN),
    }
}

/// Upper bound on emitted tokens per utterance.
pub const DEFAULT_MAX_LEN: usize = 200;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_warms_up_then_decays() {
        let c = TrainConfig {
            lr: 1.0,
            warmup_steps: 10,
            ..TrainConfig::default()
        };
        assert!((c.lr_at(5, 110) - 0.5).abs() < 1e-12);
        assert!((c.lr_at(10, 110) - 1.0).abs() < 1e-12);
        assert!((c.lr_at(60, 110) - 0.5).abs() < 1e-12);
        assert_eq!(c.lr_at(110, 110), 0.0);
    }

    #[test]
    fn config_round_trip() {
        let c = TrainConfig {
            seed: 9,
            lr: 1e-3,
            ..TrainConfig::default()
        };
        assert_eq!(TrainConfig::from_kv(&c.to_kv()).unwrap(), c);
    }
}
