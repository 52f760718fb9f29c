//! Transformer encoder with a CTC head and a transformer decoder with one
//! classifier per designated layer.
//!
//! Parameters live in a [`ParamStore`]; every forward pass runs inside a
//! [`Forward`] session that binds the parameters it touches onto a fresh
//! [`Tape`]. Sessions borrow the model immutably, so any number of them can
//! decode concurrently against one model.

mod checkpoint;
mod config;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::ModelConfig;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::seed::rng_for;
use crate::tensor::{Float, Gradients, Tape, Tensor, Var};
use crate::vocab::BOS;

const LN_EPS: f64 = 1e-5;
const MASKED_SCORE: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors in creation order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Float> ParamStore<T> {
    fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    fn add(&mut self, name: String, t: Tensor<T>) -> ParamId {
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Clone, Copy, Debug)]
struct FeedForward {
    up: Linear,
    down: Linear,
}

#[derive(Clone, Copy, Debug)]
struct EncoderLayer {
    norm_attn: Norm,
    attn: Attention,
    norm_ff: Norm,
    ff: FeedForward,
}

#[derive(Clone, Copy, Debug)]
struct DecoderLayer {
    norm_self: Norm,
    self_attn: Attention,
    norm_cross: Norm,
    cross_attn: Attention,
    norm_ff: Norm,
    ff: FeedForward,
}

#[derive(Clone, Copy, Debug)]
struct FrontEnd {
    conv1: Linear,
    conv2: Linear,
    proj: Linear,
}

struct Init<T> {
    seed: u64,
    store: ParamStore<T>,
}

impl<T: Float> Init<T> {
    // Each tensor draws from a stream keyed by its own name, so adding or
    // removing a head leaves every other initial value unchanged.
    fn uniform(&mut self, name: String, shape: &[usize], bound: f64) -> ParamId {
        let mut rng = rng_for(self.seed, &name);
        let t = Tensor::from_fn(shape, |_| T::from_f64(rng.random_range(-bound..bound)));
        self.store.add(name, t)
    }

    fn constant(&mut self, name: String, shape: &[usize], v: f64) -> ParamId {
        self.store.add(name, Tensor::full(shape, T::from_f64(v)))
    }

    fn linear(&mut self, name: &str, d_in: usize, d_out: usize) -> Linear {
        let bound = 1.0 / (d_in as f64).sqrt();
        Linear {
            w: self.uniform(format!("{name}.weight"), &[d_in, d_out], bound),
            b: self.constant(format!("{name}.bias"), &[d_out], 0.0),
        }
    }

    fn norm(&mut self, name: &str, n: usize) -> Norm {
        Norm {
            gamma: self.constant(format!("{name}.gamma"), &[n], 1.0),
            beta: self.constant(format!("{name}.beta"), &[n], 0.0),
        }
    }

    fn attention(&mut self, name: &str, d: usize) -> Attention {
        Attention {
            q: self.linear(&format!("{name}.q"), d, d),
            k: self.linear(&format!("{name}.k"), d, d),
            v: self.linear(&format!("{name}.v"), d, d),
            o: self.linear(&format!("{name}.o"), d, d),
        }
    }

    fn feed_forward(&mut self, name: &str, d: usize, width: usize) -> FeedForward {
        FeedForward {
            up: self.linear(&format!("{name}.up"), d, width),
            down: self.linear(&format!("{name}.down"), width, d),
        }
    }

    fn embedding(&mut self, name: String, rows: usize, cols: usize) -> ParamId {
        let mut rng = rng_for(self.seed, &name);
        let t = Tensor::from_fn(&[rows, cols], |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            T::from_f64(z)
        });
        self.store.add(name, t)
    }
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    frontend: FrontEnd,
    encoder: Vec<EncoderLayer>,
    enc_norm: Norm,
    ctc: Linear,
    embed: ParamId,
    decoder: Vec<DecoderLayer>,
    dec_norm: Norm,
    classifiers: BTreeMap<usize, Linear>,
}

/// Encoder states of one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput<T> {
    /// `[frames, d_model]`.
    pub states: Tensor<T>,
    pub frames: usize,
}

/// Per-layer decoder values for a token prefix.
///
/// `hidden_by_layer[d]` is the layer-`d` representation after the shared
/// output normalisation, i.e. exactly the input of classifier `d`, so
/// `logits_by_classifier[d] = hidden_by_layer[d] · W_d + b_d`.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderForwardOutput<T> {
    pub hidden_by_layer: BTreeMap<usize, Tensor<T>>,
    pub logits_by_classifier: BTreeMap<usize, Tensor<T>>,
}

impl<T: Float> DecoderForwardOutput<T> {
    pub fn positions(&self) -> usize {
        self.logits_by_classifier
            .values()
            .next()
            .map_or(0, |t| t.shape()[0])
    }

    /// Raw logits of every classifier at position `n` (0-based), widened to f64.
    pub fn logits_at(&self, n: usize) -> BTreeMap<usize, Vec<f64>> {
        self.logits_by_classifier
            .iter()
            .map(|(&d, t)| (d, t.row(n).iter().map(|v| Float::to_f64(*v)).collect()))
            .collect()
    }
}

/// Graph handles for one decoder pass.
#[derive(Clone, Debug)]
pub struct DecoderVars {
    pub hidden_by_layer: BTreeMap<usize, Var>,
    pub logits_by_classifier: BTreeMap<usize, Var>,
}

/// What the decoder's cross-attention reads.
#[derive(Clone, Copy, Debug)]
pub enum CrossContext {
    Encoder(Var),
    /// Every cross-attention context vector is the zero vector.
    Zero,
}

impl<T: Float> Model<T> {
    /// Builds a model with deterministic initial weights for `seed`.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let v = config.vocab_size;
        let c = config.conv_subsample_channels;
        let mut init = Init {
            seed,
            store: ParamStore::new(),
        };
        let frontend = FrontEnd {
            conv1: init.linear("frontend.conv1", 3 * config.feature_dim, c),
            conv2: init.linear("frontend.conv2", 3 * c, c),
            proj: init.linear("frontend.proj", c, d),
        };
        let encoder = (0..config.encoder_layers)
            .map(|i| EncoderLayer {
                norm_attn: init.norm(&format!("encoder.{i}.norm_attn"), d),
                attn: init.attention(&format!("encoder.{i}.attn"), d),
                norm_ff: init.norm(&format!("encoder.{i}.norm_ff"), d),
                ff: init.feed_forward(&format!("encoder.{i}.ff"), d, config.d_ff_enc),
            })
            .collect();
        let enc_norm = init.norm("encoder.norm", d);
        let ctc = init.linear("ctc", d, v);
        let embed = init.embedding("decoder.embed".into(), v, d);
        let decoder = (0..config.decoder_layers)
            .map(|i| DecoderLayer {
                norm_self: init.norm(&format!("decoder.{i}.norm_self"), d),
                self_attn: init.attention(&format!("decoder.{i}.self_attn"), d),
                norm_cross: init.norm(&format!("decoder.{i}.norm_cross"), d),
                cross_attn: init.attention(&format!("decoder.{i}.cross_attn"), d),
                norm_ff: init.norm(&format!("decoder.{i}.norm_ff"), d),
                ff: init.feed_forward(&format!("decoder.{i}.ff"), d, config.d_ff_dec),
            })
            .collect();
        let dec_norm = init.norm("decoder.norm", d);
        let classifiers = config
            .classifier_layers
            .iter()
            .map(|&l| (l, init.linear(&format!("classifier.{l}"), d, v)))
            .collect();
        Ok(Self {
            config,
            params: init.store,
            frontend,
            encoder,
            enc_norm,
            ctc,
            embed,
            decoder,
            dec_norm,
            classifiers,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.numel()
    }

    /// Weight and bias of the classifier on decoder layer `d`.
    pub fn classifier_params(&self, d: usize) -> Option<(ParamId, ParamId)> {
        self.classifiers.get(&d).map(|l| (l.w, l.b))
    }

    pub fn ctc_params(&self) -> (ParamId, ParamId) {
        (self.ctc.w, self.ctc.b)
    }

    /// Copies the parameters into another float width.
    pub fn cast<U: Float>(&self) -> Model<U> {
        let mut store = ParamStore::new();
        for id in self.params.ids() {
            store.add(self.params.name(id).to_string(), self.params.get(id).cast());
        }
        Model {
            config: self.config.clone(),
            params: store,
            frontend: self.frontend,
            encoder: self.encoder.clone(),
            enc_norm: self.enc_norm,
            ctc: self.ctc,
            embed: self.embed,
            decoder: self.decoder.clone(),
            dec_norm: self.dec_norm,
            classifiers: self.classifiers.clone(),
        }
    }

    /// Session whose parameters are trainable leaves. Dropout is active iff
    /// `train`, drawing from `dropout_seed`.
    pub fn session(&self, train: bool, dropout_seed: u64) -> Forward<'_, T> {
        Forward {
            model: self,
            tape: Tape::new(),
            bound: vec![None; self.params.len()],
            track: true,
            train,
            rng: ChaCha8Rng::seed_from_u64(dropout_seed),
        }
    }

    /// Evaluation session without gradient tracking.
    pub fn inference(&self) -> Forward<'_, T> {
        Forward {
            track: false,
            ..self.session(false, 0)
        }
    }

    pub fn encode(&self, features: &Tensor<T>, length: usize) -> Result<EncoderOutput<T>> {
        let mut f = self.inference();
        let (states, frames) = f.encode(features, length)?;
        Ok(EncoderOutput {
            states: f.tape.value(states).clone(),
            frames,
        })
    }

    /// Encodes each utterance independently; results do not depend on the
    /// position of an utterance in the batch.
    pub fn encode_batch(&self, batch: &[(&Tensor<T>, usize)]) -> Result<Vec<EncoderOutput<T>>> {
        batch.iter().map(|(f, len)| self.encode(f, *len)).collect()
    }

    /// Raw CTC head outputs, `[frames, V]`.
    pub fn ctc_logits(&self, enc: &EncoderOutput<T>) -> Result<Tensor<T>> {
        let mut f = self.inference();
        let s = f.tape.constant(enc.states.clone());
        let l = f.ctc_logits(s)?;
        Ok(f.tape.value(l).clone())
    }

    /// Per-frame CTC log-probabilities, `[frames, V]`.
    pub fn ctc_log_probs(&self, enc: &EncoderOutput<T>) -> Result<Tensor<T>> {
        let mut f = self.inference();
        let s = f.tape.constant(enc.states.clone());
        let l = f.ctc_logits(s)?;
        let lp = f.tape.log_softmax(l, 1)?;
        Ok(f.tape.value(lp).clone())
    }

    /// Decoder pass over `prefix` (which starts with BOS). With `enc = None`
    /// cross-attention contributes zero context vectors.
    pub fn decode_forward(
        &self,
        enc: Option<&EncoderOutput<T>>,
        prefix: &[usize],
    ) -> Result<DecoderForwardOutput<T>> {
        let mut f = self.inference();
        let ctx = match enc {
            Some(e) => CrossContext::Encoder(f.tape.constant(e.states.clone())),
            None => CrossContext::Zero,
        };
        let vars = f.decode(ctx, prefix, None)?;
        Ok(f.values(&vars))
    }
}

/// One forward computation against a borrowed model.
pub struct Forward<'m, T> {
    model: &'m Model<T>,
    pub tape: Tape<T>,
    bound: Vec<Option<Var>>,
    track: bool,
    train: bool,
    rng: ChaCha8Rng,
}

fn sinusoid_table<T: Float>(len: usize, d: usize) -> Tensor<T> {
    Tensor::from_fn(&[len, d], |k| {
        let (pos, i) = (k / d, k % d);
        let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
        let angle = pos as f64 / rate;
        T::from_f64(if i % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

impl<T: Float> Forward<'_, T> {
    pub fn model(&self) -> &Model<T> {
        self.model
    }

    /// Graph handle for a parameter, bound on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let t = self.model.params.get(id).clone();
        let v = if self.track {
            self.tape.leaf(t)
        } else {
            self.tape.constant(t)
        };
        self.bound[id.0] = Some(v);
        v
    }

    /// Gradients of the bound parameters, indexed by [`ParamId`]. Parameters
    /// the pass never touched have `None`.
    pub fn param_grads(&self, grads: &mut Gradients<T>) -> Vec<Option<Vec<T>>> {
        self.bound
            .iter()
            .map(|b| b.and_then(|v| grads.take(v)))
            .collect()
    }

    fn linear(&mut self, l: Linear, x: Var) -> Result<Var> {
        let w = self.param(l.w);
        let b = self.param(l.b);
        let y = self.tape.matmul(x, w)?;
        self.tape.add_row(y, b)
    }

    fn norm(&mut self, n: Norm, x: Var) -> Result<Var> {
        let g = self.param(n.gamma);
        let b = self.param(n.beta);
        self.tape.layer_norm(x, g, b, LN_EPS)
    }

    fn dropout(&mut self, x: Var) -> Var {
        let p = self.model.config.dropout_p;
        self.tape.dropout(x, p, self.train, &mut self.rng)
    }

    fn attention(&mut self, a: Attention, xq: Var, xkv: Var, causal: bool) -> Result<Var> {
        let q = self.linear(a.q, xq)?;
        let k = self.linear(a.k, xkv)?;
        let v = self.linear(a.v, xkv)?;
        let n = self.tape.shape(q)[0];
        let m = self.tape.shape(k)[0];
        let heads = self.model.config.n_heads;
        let dh = self.model.config.d_model / heads;
        let mask = causal.then(|| {
            let masked = T::from_f64(MASKED_SCORE);
            self.tape.constant(Tensor::from_fn(&[n, m], |k| {
                if k % m > k / m {
                    masked
                } else {
                    T::zero()
                }
            }))
        });
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = self.tape.slice(q, 1, h * dh, (h + 1) * dh)?;
            let kh = self.tape.slice(k, 1, h * dh, (h + 1) * dh)?;
            let vh = self.tape.slice(v, 1, h * dh, (h + 1) * dh)?;
            let kt = self.tape.transpose(kh)?;
            let s = self.tape.matmul(qh, kt)?;
            let mut s = self.tape.scale(s, scale);
            if let Some(mask) = mask {
                s = self.tape.add(s, mask)?;
            }
            let p = self.tape.softmax(s, 1)?;
            outs.push(self.tape.matmul(p, vh)?);
        }
        let ctx = self.tape.concat(&outs, 1)?;
        self.linear(a.o, ctx)
    }

    fn feed_forward(&mut self, f: FeedForward, x: Var) -> Result<Var> {
        let h = self.linear(f.up, x)?;
        let h = self.tape.relu(h);
        let h = self.dropout(h);
        self.linear(f.down, h)
    }

    fn residual(&mut self, x: Var, branch: Var) -> Result<Var> {
        let b = self.dropout(branch);
        self.tape.add(x, b)
    }

    /// Encoder over the first `length` frames of `features` (`[T, F]`).
    /// Returns the `[T', d_model]` states and `T'`.
    pub fn encode(&mut self, features: &Tensor<T>, length: usize) -> Result<(Var, usize)> {
        let cfg = &self.model.config;
        let (t, f) = features.dims2()?;
        if length == 0 || t == 0 {
            return Err(Error::contract("cannot encode an empty utterance"));
        }
        if length > t {
            return Err(Error::contract(format!(
                "length {length} exceeds {t} available frames"
            )));
        }
        if f != cfg.feature_dim {
            return Err(Error::dim(
                "encode",
                format!("features have {f} channels, model expects {}", cfg.feature_dim),
            ));
        }
        let d = cfg.d_model;
        let fe = self.model.frontend;
        let input = Tensor::new(vec![length, f], features.data()[..length * f].to_vec())?;
        let x = self.tape.constant(input);
        let u = self.tape.unfold(x, 3, 2, 1)?;
        let h = self.linear(fe.conv1, u)?;
        let h = self.tape.relu(h);
        let u = self.tape.unfold(h, 3, 2, 1)?;
        let h = self.linear(fe.conv2, u)?;
        let h = self.tape.relu(h);
        let h = self.linear(fe.proj, h)?;
        let frames = self.tape.shape(h)[0];
        let pe = self.tape.constant(sinusoid_table(frames, d));
        let h = self.tape.add(h, pe)?;
        let mut x = self.dropout(h);
        for layer in self.model.encoder.clone() {
            let h = self.norm(layer.norm_attn, x)?;
            let a = self.attention(layer.attn, h, h, false)?;
            x = self.residual(x, a)?;
            let h = self.norm(layer.norm_ff, x)?;
            let f = self.feed_forward(layer.ff, h)?;
            x = self.residual(x, f)?;
        }
        let out = self.norm(self.model.enc_norm, x)?;
        Ok((out, frames))
    }

    /// Raw CTC logits; blank is index 0.
    pub fn ctc_logits(&mut self, states: Var) -> Result<Var> {
        self.linear(self.model.ctc, states)
    }

    /// Teacher-forced decoder pass. Position `n` of every output depends only
    /// on `prefix[..=n]`. Logits are computed for the classifier layers in
    /// `heads` (all classifiers when `None`).
    pub fn decode(
        &mut self,
        context: CrossContext,
        prefix: &[usize],
        heads: Option<&BTreeSet<usize>>,
    ) -> Result<DecoderVars> {
        let cfg = &self.model.config;
        if prefix.first() != Some(&BOS) {
            return Err(Error::contract("decoder prefix must start with BOS"));
        }
        if let Some(&bad) = prefix.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(Error::contract(format!(
                "token id {bad} outside vocabulary of {}",
                cfg.vocab_size
            )));
        }
        let (n, d) = (prefix.len(), cfg.d_model);
        let embed = self.param(self.model.embed);
        let e = self.tape.embedding(embed, prefix)?;
        let pe = self.tape.constant(sinusoid_table(n, d));
        let e = self.tape.add(e, pe)?;
        let mut x = self.dropout(e);
        let mut hidden_by_layer = BTreeMap::new();
        let mut logits_by_classifier = BTreeMap::new();
        for (i, layer) in self.model.decoder.clone().into_iter().enumerate() {
            let h = self.norm(layer.norm_self, x)?;
            let a = self.attention(layer.self_attn, h, h, true)?;
            x = self.residual(x, a)?;
            let h = self.norm(layer.norm_cross, x)?;
            let c = match context {
                CrossContext::Encoder(enc) => self.attention(layer.cross_attn, h, enc, false)?,
                CrossContext::Zero => {
                    let zero = self.tape.constant(Tensor::zeros(&[n, d]));
                    self.linear(layer.cross_attn.o, zero)?
                }
            };
            x = self.residual(x, c)?;
            let h = self.norm(layer.norm_ff, x)?;
            let f = self.feed_forward(layer.ff, h)?;
            x = self.residual(x, f)?;

            let depth = i + 1;
            let normed = self.norm(self.model.dec_norm, x)?;
            hidden_by_layer.insert(depth, normed);
            if let Some(&head) = self.model.classifiers.get(&depth) {
                if heads.is_none_or(|h| h.contains(&depth)) {
                    logits_by_classifier.insert(depth, self.linear(head, normed)?);
                }
            }
        }
        Ok(DecoderVars {
            hidden_by_layer,
            logits_by_classifier,
        })
    }

    /// Copies the decoder values out of the tape.
    pub fn values(&self, vars: &DecoderVars) -> DecoderForwardOutput<T> {
        let get = |m: &BTreeMap<usize, Var>| {
            m.iter()
                .map(|(&k, &v)| (k, self.tape.value(v).clone()))
                .collect()
        };
        DecoderForwardOutput {
            hidden_by_layer: get(&vars.hidden_by_layer),
            logits_by_classifier: get(&vars.logits_by_classifier),
        }
    }
}
