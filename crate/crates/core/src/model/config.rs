use std::collections::BTreeSet;

use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::vocab::NUM_SPECIAL;

/// Shape of the encoder-decoder network: the `(E, D, d_model, V)` quadruplet
/// plus the remaining width, head and regularisation settings.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    pub n_heads: usize,
    pub d_ff_enc: usize,
    pub d_ff_dec: usize,
    pub dropout_p: f64,
    /// 1-based decoder layers carrying a classifier head. Always holds `D`.
    pub classifier_layers: BTreeSet<usize>,
    pub conv_subsample_channels: usize,
    pub feature_dim: usize,
}

impl ModelConfig {
    /// Desk-scale default: `(2, 4, 32, 40)` with heads on layers 2 and 4.
    pub fn micro() -> Self {
        Self {
            encoder_layers: 2,
            decoder_layers: 4,
            d_model: 32,
            vocab_size: 40,
            n_heads: 4,
            d_ff_enc: 128,
            d_ff_dec: 128,
            dropout_p: 0.1,
            classifier_layers: [2, 4].into(),
            conv_subsample_channels: 32,
            feature_dim: 16,
        }
    }

    /// `(E, D, d_model, V)` with the remaining settings used at full scale:
    /// four heads, `d_ff = 4 d_model` in the encoder, 2048 in the decoder,
    /// 256 front-end channels over 80 input features, final-layer head only.
    pub fn full_scale(e: usize, d: usize, d_model: usize, v: usize) -> Self {
        Self {
            encoder_layers: e,
            decoder_layers: d,
            d_model,
            vocab_size: v,
            n_heads: 4,
            d_ff_enc: 4 * d_model,
            d_ff_dec: 2048,
            dropout_p: 0.1,
            classifier_layers: [d].into(),
            conv_subsample_channels: 256,
            feature_dim: 80,
        }
    }

    pub fn with_classifiers(mut self, layers: impl IntoIterator<Item = usize>) -> Self {
        self.classifier_layers = layers.into_iter().collect();
        self
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let d = self.decoder_layers;
        if self.encoder_layers == 0 {
            problems.push("encoder_layers must be at least 1".to_string());
        }
        if d == 0 {
            problems.push("decoder_layers must be at least 1".to_string());
        }
        if !self.classifier_layers.contains(&d) {
            problems.push(format!("classifier_layers must contain the last layer {d}"));
        }
        if let Some(bad) = self.classifier_layers.iter().find(|&&l| l == 0 || l > d) {
            problems.push(format!("classifier layer {bad} outside 1..={d}"));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            problems.push(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.vocab_size <= NUM_SPECIAL {
            problems.push(format!(
                "vocab_size {} leaves no room beyond {NUM_SPECIAL} special tokens",
                self.vocab_size
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            problems.push(format!("dropout_p {} outside [0, 1)", self.dropout_p));
        }
        if self.feature_dim == 0 || self.conv_subsample_channels == 0 {
            problems.push("feature_dim and conv_subsample_channels must be positive".into());
        }
        if self.d_ff_enc == 0 || self.d_ff_dec == 0 {
            problems.push("feed-forward widths must be positive".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::config(problems.join("; ")))
        }
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let base = Self::micro();
        let d_model = kv.get_or("d_model", base.d_model)?;
        let decoder_layers = kv.get_or("decoder_layers", base.decoder_layers)?;
        let classifier_layers = match kv.get_list::<usize>("classifier_layers")? {
            Some(l) => l.into_iter().collect(),
            None => [decoder_layers].into(),
        };
        let cfg = Self {
            encoder_layers: kv.get_or("encoder_layers", base.encoder_layers)?,
            decoder_layers,
            d_model,
            vocab_size: kv.get_or("vocab_size", base.vocab_size)?,
            n_heads: kv.get_or("n_heads", base.n_heads)?,
            d_ff_enc: kv.get_or("d_ff_enc", 4 * d_model)?,
            d_ff_dec: kv.get_or("d_ff_dec", base.d_ff_dec)?,
            dropout_p: kv.get_or("dropout", base.dropout_p)?,
            classifier_layers,
            conv_subsample_channels: kv.get_or("conv_channels", base.conv_subsample_channels)?,
            feature_dim: kv.get_or("feature_dim", base.feature_dim)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("encoder_layers", self.encoder_layers);
        kv.set("decoder_layers", self.decoder_layers);
        kv.set("d_model", self.d_model);
        kv.set("vocab_size", self.vocab_size);
        kv.set("n_heads", self.n_heads);
        kv.set("d_ff_enc", self.d_ff_enc);
        kv.set("d_ff_dec", self.d_ff_dec);
        kv.set("dropout", self.dropout_p);
        kv.set(
            "classifier_layers",
            self.classifier_layers
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(","),
        );
        kv.set("conv_channels", self.conv_subsample_channels);
        kv.set("feature_dim", self.feature_dim);
        kv
    }

    /// Encoder frames left after the two stride-2 subsampling stages.
    pub fn subsampled_len(frames: usize) -> usize {
        frames.div_ceil(2).div_ceil(2)
    }
}
