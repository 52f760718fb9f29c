//! Per-layer mixing of classifier logits into the next-token distribution.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{log_softmax_f64, softmax_f64};

const WEIGHTS_MAGIC: &str = "DCRDMIX 1";

#[derive(Clone, Debug, PartialEq)]
pub enum MixingWeights {
    /// Final-layer classifier only.
    Vanilla,
    /// One unconstrained scalar per layer.
    Scalar(BTreeMap<usize, f64>),
    /// One weight per layer and vocabulary entry, applied elementwise.
    Vector(BTreeMap<usize, Vec<f64>>),
}

impl MixingWeights {
    pub fn mode(&self) -> &'static str {
        match self {
            MixingWeights::Vanilla => "vanilla",
            MixingWeights::Scalar(_) => "scalar",
            MixingWeights::Vector(_) => "vector",
        }
    }

    /// Scalar weights with 1 on `layer` and 0 elsewhere.
    pub fn scalar_one_hot(layers: &BTreeSet<usize>, layer: usize) -> Self {
        MixingWeights::Scalar(
            layers
                .iter()
                .map(|&d| (d, if d == layer { 1.0 } else { 0.0 }))
                .collect(),
        )
    }

    /// Vector weights equivalent to [`MixingWeights::Vanilla`]: ones on the
    /// final layer, zeros elsewhere.
    pub fn vector_init(layers: &BTreeSet<usize>, final_layer: usize, vocab: usize) -> Self {
        MixingWeights::Vector(
            layers
                .iter()
                .map(|&d| (d, vec![if d == final_layer { 1.0 } else { 0.0 }; vocab]))
                .collect(),
        )
    }

    /// Classifier layers whose logits are read.
    pub fn layers(&self, final_layer: usize) -> BTreeSet<usize> {
        match self {
            MixingWeights::Vanilla => BTreeSet::from([final_layer]),
            MixingWeights::Scalar(m) => m.keys().copied().collect(),
            MixingWeights::Vector(m) => m.keys().copied().collect(),
        }
    }

    pub fn validate(&self, classifier_layers: &BTreeSet<usize>, vocab: usize) -> Result<()> {
        let keys = match self {
            MixingWeights::Vanilla => return Ok(()),
            MixingWeights::Scalar(m) => m.keys().copied().collect::<BTreeSet<_>>(),
            MixingWeights::Vector(m) => {
                if let Some((d, v)) = m.iter().find(|(_, v)| v.len() != vocab) {
                    return Err(Error::config(format!(
                        "mixing vector for layer {d} has {} entries, vocabulary has {vocab}",
                        v.len()
                    )));
                }
                m.keys().copied().collect()
            }
        };
        if &keys != classifier_layers {
            return Err(Error::config(format!(
                "mixing weights cover layers {keys:?}, model classifiers are {classifier_layers:?}"
            )));
        }
        Ok(())
    }

    /// Mixed logits at one position from raw per-layer classifier logits.
    pub fn mix(&self, logits: &BTreeMap<usize, Vec<f64>>, final_layer: usize) -> Result<Vec<f64>> {
        let get = |d: usize| {
            logits
                .get(&d)
                .ok_or_else(|| Error::config(format!("no classifier logits for layer {d}")))
        };
        match self {
            MixingWeights::Vanilla => Ok(get(final_layer)?.clone()),
            MixingWeights::Scalar(m) => {
                let mut out: Option<Vec<f64>> = None;
                for (&d, &b) in m {
                    let l = get(d)?;
                    let acc = out.get_or_insert_with(|| vec![0.0; l.len()]);
                    acc.iter_mut().zip(l).for_each(|(a, &x)| *a += b * x);
                }
                out.ok_or_else(|| Error::config("scalar mixing weights are empty"))
            }
            MixingWeights::Vector(m) => {
                let mut out: Option<Vec<f64>> = None;
                for (d, w) in m {
                    let l = get(*d)?;
                    if w.len() != l.len() {
                        return Err(Error::dim(
                            "mix",
                            format!("vector of {} for {} logits", w.len(), l.len()),
                        ));
                    }
                    let acc = out.get_or_insert_with(|| vec![0.0; l.len()]);
                    for ((a, &x), &wi) in acc.iter_mut().zip(l).zip(w) {
                        *a += wi * x;
                    }
                }
                out.ok_or_else(|| Error::config("vector mixing weights are empty"))
            }
        }
    }

    /// Serialises as a text header followed by little-endian f64 values,
    /// layer by layer in ascending order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let (layers, width, values): (Vec<usize>, usize, Vec<f64>) = match self {
            MixingWeights::Vanilla => (vec![], 0, vec![]),
            MixingWeights::Scalar(m) => (m.keys().copied().collect(), 1, m.values().copied().collect()),
            MixingWeights::Vector(m) => (
                m.keys().copied().collect(),
                m.values().next().map_or(0, Vec::len),
                m.values().flatten().copied().collect(),
            ),
        };
        let layers = layers.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",");
        let mut out = format!(
            "{WEIGHTS_MAGIC}\nmode={}\nlayers={layers}\nwidth={width}\nend\n",
            self.mode()
        )
        .into_bytes();
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |d: &str| Error::format("mixing weights", d.to_string());
        let mut header = Vec::new();
        let mut pos = 0;
        loop {
            let nl = bytes[pos..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("unterminated header"))?;
            let line = std::str::from_utf8(&bytes[pos..pos + nl]).map_err(|_| bad("header is not UTF-8"))?;
            pos += nl + 1;
            if line == "end" {
                break;
            }
            header.push(line.to_string());
        }
        if header.first().map(String::as_str) != Some(WEIGHTS_MAGIC) {
            return Err(bad("bad magic"));
        }
        let field = |k: &str| {
            header
                .iter()
                .find_map(|l| l.strip_prefix(&format!("{k}=")))
                .ok_or_else(|| bad(&format!("missing {k}")))
        };
        let mode = field("mode")?;
        let layers: Vec<usize> = field("layers")?
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|_| bad("bad layer index")))
            .collect::<Result<_>>()?;
        let width: usize = field("width")?.parse().map_err(|_| bad("bad width"))?;
        let body = &bytes[pos..];
        if body.len() != 8 * layers.len() * width {
            return Err(bad("value count does not match header"));
        }
        let values: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        match mode {
            "vanilla" => Ok(MixingWeights::Vanilla),
            "scalar" if width == 1 => Ok(MixingWeights::Scalar(
                layers.into_iter().zip(values).collect(),
            )),
            "vector" => Ok(MixingWeights::Vector(
                layers
                    .into_iter()
                    .zip(values.chunks(width.max(1)).map(<[f64]>::to_vec))
                    .collect(),
            )),
            other => Err(bad(&format!("unknown mode {other:?}"))),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Next-token distribution from per-layer logits under `weights`.
pub fn p_decred(
    logits: &BTreeMap<usize, Vec<f64>>,
    weights: &MixingWeights,
    final_layer: usize,
) -> Result<Vec<f64>> {
    Ok(softmax_f64(&weights.mix(logits, final_layer)?))
}

pub fn log_p_decred(
    logits: &BTreeMap<usize, Vec<f64>>,
    weights: &MixingWeights,
    final_layer: usize,
) -> Result<Vec<f64>> {
    Ok(log_softmax_f64(&weights.mix(logits, final_layer)?))
}
