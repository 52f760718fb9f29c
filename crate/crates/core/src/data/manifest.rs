use std::collections::HashSet;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub utterance_id: String,
    /// Feature file path (relative to the manifest directory) or
    /// `synth:<seed>:<domain>`.
    pub source: String,
    pub raw_transcript: String,
}

/// Where an entry's features come from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FeatureSource {
    File(PathBuf),
    Synth { seed: u64, domain: String },
}

impl ManifestEntry {
    pub fn feature_source(&self) -> Result<FeatureSource> {
        match self.source.strip_prefix("synth:") {
            Some(rest) => {
                let (seed, domain) = rest.split_once(':').ok_or_else(|| {
                    Error::format("manifest", format!("bad synth source {:?}", self.source))
                })?;
                let seed = seed.parse().map_err(|_| {
                    Error::format("manifest", format!("bad synth seed in {:?}", self.source))
                })?;
                Ok(FeatureSource::Synth {
                    seed,
                    domain: domain.to_string(),
                })
            }
            None => Ok(FeatureSource::File(PathBuf::from(&self.source))),
        }
    }
}

/// Utterance list; ids are unique.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.utterance_id.as_str()) {
                return Err(Error::contract(format!(
                    "duplicate utterance id {}",
                    e.utterance_id
                )));
            }
            for field in [&e.utterance_id, &e.source, &e.raw_transcript] {
                if field.contains(['\t', '\n', '\r']) {
                    return Err(Error::contract(format!(
                        "entry {} contains a tab or newline",
                        e.utterance_id
                    )));
                }
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.utterance_id == id)
    }

    pub fn to_tsv(&self) -> String {
        self.entries
            .iter()
            .map(|e| format!("{}\t{}\t{}\n", e.utterance_id, e.source, e.raw_transcript))
            .collect()
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let entries = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.is_empty())
            .map(|(i, line)| {
                let mut parts = line.splitn(3, '\t');
                match (parts.next(), parts.next(), parts.next()) {
                    (Some(id), Some(src), Some(text)) => Ok(ManifestEntry {
                        utterance_id: id.to_string(),
                        source: src.to_string(),
                        raw_transcript: text.to_string(),
                    }),
                    _ => Err(Error::format(
                        "manifest",
                        format!("line {}: expected 3 tab-separated columns", i + 1),
                    )),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(entries)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tsv(&text)
    }

    /// Entries for which `keep` holds, in order.
    pub fn filter(&self, mut keep: impl FnMut(&ManifestEntry) -> bool) -> Self {
        Self {
            entries: self.entries.iter().filter(|e| keep(e)).cloned().collect(),
        }
    }
}

/// Drops training entries with more than `max_frames` feature frames.
/// Only apply this to training manifests; evaluation sets stay whole.
pub fn length_filter(
    manifest: &Manifest,
    frames_of: impl Fn(&ManifestEntry) -> usize,
    max_frames: usize,
) -> Manifest {
    manifest.filter(|e| frames_of(e) <= max_frames)
}

/// Feature file: `u32 T | u32 F | T*F little-endian f32`.
pub fn write_features(path: &Path, features: &Tensor<f32>) -> Result<()> {
    let (t, f) = features.dims2()?;
    let mut out = Vec::with_capacity(8 + 4 * t * f);
    out.extend_from_slice(&(t as u32).to_le_bytes());
    out.extend_from_slice(&(f as u32).to_le_bytes());
    for v in features.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 {
        return Err(Error::format("feature file", "missing header"));
    }
    let t = u32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as usize;
    let f = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]) as usize;
    if bytes.len() != 8 + 4 * t * f {
        return Err(Error::format(
            "feature file",
            format!("{}: header says {t}x{f}", path.display()),
        ));
    }
    let data = bytes[8..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(vec![t, f], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(id: &str) -> ManifestEntry {
        ManifestEntry {
            utterance_id: id.into(),
            source: "synth:1:studio".into(),
            raw_transcript: "hello there".into(),
        }
    }

    #[test]
    fn duplicate_ids_rejected() {
        assert!(Manifest::new(vec![entry("a"), entry("a")]).is_err());
    }

    #[test]
    fn tsv_round_trip_and_source_parsing() {
        let m = Manifest::new(vec![entry("a"), entry("b")]).unwrap();
        assert_eq!(Manifest::from_tsv(&m.to_tsv()).unwrap(), m);
        assert_eq!(
            m.entries()[0].feature_source().unwrap(),
            FeatureSource::Synth {
                seed: 1,
                domain: "studio".into()
            }
        );
    }

    #[test]
    fn length_filter_removes_exactly_the_long_ones() {
        let m = Manifest::new((0..6).map(|i| entry(&i.to_string())).collect()).unwrap();
        let frames = |e: &ManifestEntry| e.utterance_id.parse::<usize>().unwrap() * 10;
        assert_eq!(length_filter(&m, frames, 100), m);
        let kept = length_filter(&m, frames, 25);
        let ids: Vec<_> = kept.entries().iter().map(|e| e.utterance_id.as_str()).collect();
        assert_eq!(ids, ["0", "1", "2"]);
        assert_eq!(length_filter(&m, frames, 25), kept);
    }

    #[test]
    fn feature_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.feat");
        let t = Tensor::from_fn(&[3, 2], |i| i as f32 * 0.5);
        write_features(&p, &t).unwrap();
        assert_eq!(read_features(&p).unwrap(), t);
        std::fs::write(&p, [1u8, 0, 0, 0, 1, 0, 0, 0]).unwrap();
        assert!(read_features(&p).is_err());
    }
}
