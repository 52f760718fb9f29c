//! The synthetic two-domain benchmark: train on one recording condition,
//! test on it and on a held-out condition with its own vocabulary, and
//! sweep the position and weight of one auxiliary decoder classifier.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::config::KvConfig;
use crate::data::presets::{default_templates, in_domain, out_of_domain};
use crate::data::{generate_corpus, scoring_reference, Corpus, Manifest, Tokenizer};
use crate::decoding::decode_corpus;
use crate::error::{Error, Result};
use crate::eval::{wer, ScoringMode};
use crate::ilm::ilm_perplexity;
use crate::model::{Model, ModelConfig};
use crate::objective::ObjectiveConfig;
use crate::seed::derive_seed;
use crate::train::{dev_decode_options, TrainConfig, Trainer};

#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkSetup {
    pub data_seed: u64,
    pub train_utterances: usize,
    pub dev_utterances: usize,
    /// Utterances in each of the two test sets.
    pub test_utterances: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub alpha: f64,
    /// CTC weight of the greedy test decode.
    pub decode_lambda: f64,
}

impl Default for BenchmarkSetup {
    fn default() -> Self {
        Self {
            data_seed: 7,
            train_utterances: 600,
            dev_utterances: 40,
            test_utterances: 60,
            model: ModelConfig::micro(),
            train: TrainConfig {
                epochs: 15,
                lr: 1e-2,
                warmup_steps: 50,
                specaug: false,
                speed_perturb: false,
                ..TrainConfig::default()
            },
            alpha: 0.3,
            decode_lambda: 0.3,
        }
    }
}

impl BenchmarkSetup {
    /// Reads `data.*`, `model.*`, `train.*`, `objective.alpha` and
    /// `decode.lambda` keys over the defaults.
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let d = Self::default();
        let b = kv.section("data.");
        let model_kv = kv.section("model.");
        let train_kv = kv.section("train.");
        let mut train = d.train.to_kv();
        for (k, v) in train_kv.iter() {
            train.set(k, v);
        }
        let mut model = d.model.to_kv();
        for (k, v) in model_kv.iter() {
            model.set(k, v);
        }
        let s = Self {
            data_seed: b.get_or("seed", d.data_seed)?,
            train_utterances: b.get_or("train_utterances", d.train_utterances)?,
            dev_utterances: b.get_or("dev_utterances", d.dev_utterances)?,
            test_utterances: b.get_or("test_utterances", d.test_utterances)?,
            model: ModelConfig::from_kv(&model)?,
            train: TrainConfig::from_kv(&train)?,
            alpha: kv.get_or("objective.alpha", d.alpha)?,
            decode_lambda: kv.get_or("decode.lambda", d.decode_lambda)?,
        };
        if s.train_utterances == 0 || s.dev_utterances == 0 || s.test_utterances == 0 {
            return Err(Error::config("benchmark corpora must be non-empty"));
        }
        Ok(s)
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("data.seed", self.data_seed);
        kv.set("data.train_utterances", self.train_utterances);
        kv.set("data.dev_utterances", self.dev_utterances);
        kv.set("data.test_utterances", self.test_utterances);
        kv.set("decode.lambda", self.decode_lambda);
        kv.set("objective.alpha", self.alpha);
        kv.merge_prefixed("model.", &self.model.to_kv());
        kv.merge_prefixed("train.", &self.train.to_kv());
        kv
    }
}

/// Corpora of one benchmark instance. `test_out` differs from training in
/// channel, noise and lexicon.
#[derive(Clone, Debug)]
pub struct BenchmarkData {
    pub train: Corpus,
    pub dev: Corpus,
    pub test_in: Corpus,
    pub test_out: Corpus,
}

impl BenchmarkData {
    pub fn generate(setup: &BenchmarkSetup) -> Result<Self> {
        let tpl = default_templates();
        let (id, ood) = (in_domain(), out_of_domain());
        let s = |label: &str| derive_seed(setup.data_seed, label);
        Ok(Self {
            train: generate_corpus(&[id.clone()], &[setup.train_utterances], s("train"), &tpl)?,
            dev: generate_corpus(&[id.clone()], &[setup.dev_utterances], s("dev"), &tpl)?,
            test_in: generate_corpus(&[id], &[setup.test_utterances], s("test"), &tpl)?,
            test_out: generate_corpus(&[ood], &[setup.test_utterances], s("test"), &tpl)?,
        })
    }
}

/// File names of the four benchmark manifests.
pub const SPLITS: [&str; 4] = ["train", "dev", "test_in", "test_out"];

impl BenchmarkData {
    pub fn corpora(&self) -> [&Corpus; 4] {
        [&self.train, &self.dev, &self.test_in, &self.test_out]
    }

    /// Writes `<split>.tsv` manifests into `dir`. Features are synthetic and
    /// re-rendered on load.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
        for (name, c) in SPLITS.iter().zip(self.corpora()) {
            c.manifest.save(&dir.join(format!("{name}.tsv")))?;
        }
        Ok(())
    }
}

/// Loads a manifest written by [`BenchmarkData::save`] or by hand; feature
/// files resolve relative to the manifest's directory.
pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let manifest = Manifest::load(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    Corpus::load(manifest, base, &[in_domain(), out_of_domain()], &default_templates())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SystemResult {
    pub seed: u64,
    pub betas: BTreeMap<usize, f64>,
    pub best_dev_wer: f64,
    pub wer_in: f64,
    pub wer_out: f64,
    /// Zero-attention perplexity on the out-of-domain test transcripts.
    pub ilm_ppl_out: f64,
}

impl SystemResult {
    /// Unweighted mean of the two test WERs.
    pub fn macro_wer(&self) -> f64 {
        (self.wer_in + self.wer_out) / 2.0
    }
}

/// Greedy WER of `model` on `corpus` against the spoken words.
pub fn greedy_wer(model: &Model<f32>, corpus: &Corpus, lambda: f64) -> Result<f64> {
    let tok = Tokenizer::default();
    let hyps = decode_corpus(model, corpus, &tok, &dev_decode_options(lambda))?;
    let refs: Vec<String> = corpus
        .manifest
        .entries()
        .iter()
        .map(|e| scoring_reference(&e.raw_transcript))
        .collect();
    let hyps: Vec<String> = hyps.into_iter().map(|(_, h)| h).collect();
    Ok(wer(&refs, &hyps, ScoringMode::Normalized)?.wer())
}

/// Trains one system and scores its best-dev checkpoint. The model carries
/// exactly the classifiers named in `betas`, plus the final one.
pub fn run_system(
    setup: &BenchmarkSetup,
    data: &BenchmarkData,
    betas: &BTreeMap<usize, f64>,
    seed: u64,
) -> Result<SystemResult> {
    let mut model = setup.model.clone();
    model.classifier_layers = betas.keys().copied().collect();
    model.classifier_layers.insert(model.decoder_layers);
    let mut objective = ObjectiveConfig::new(betas.clone());
    objective.alpha = setup.alpha;
    let train = TrainConfig {
        seed,
        decode_lambda: setup.decode_lambda,
        ..setup.train.clone()
    };
    let mut trainer = Trainer::new(model, objective, train, Tokenizer::default())?;
    trainer.run(&data.train, &data.dev, None, None)?;
    let best_dev_wer = trainer.best_dev_wer().map_or(f64::NAN, |b| b.0);
    let best = trainer.best_model();
    let ilm = ilm_perplexity(&best, &data.test_out.manifest, &Tokenizer::default())?;
    let result = SystemResult {
        seed,
        betas: betas.clone(),
        best_dev_wer,
        wer_in: greedy_wer(&best, &data.test_in, setup.decode_lambda)?,
        wer_out: greedy_wer(&best, &data.test_out, setup.decode_lambda)?,
        ilm_ppl_out: ilm.perplexity,
    };
    log::info!(
        "betas {:?} seed {seed}: in {:.4} out {:.4} ilm {:.3}",
        result.betas,
        result.wer_in,
        result.wer_out,
        result.ilm_ppl_out
    );
    Ok(result)
}

/// Final-layer-only objective weights.
pub fn baseline_betas(decoder_layers: usize) -> BTreeMap<usize, f64> {
    BTreeMap::from([(decoder_layers, 1.0)])
}

/// One auxiliary classifier at `position` with weight `weight`; the final
/// layer takes the rest.
pub fn cell_betas(decoder_layers: usize, position: usize, weight: f64) -> Result<BTreeMap<usize, f64>> {
    if position == 0 || position > decoder_layers {
        return Err(Error::config(format!(
            "position {position} outside 1..={decoder_layers}"
        )));
    }
    if !(0.0..=1.0).contains(&weight) {
        return Err(Error::config(format!("weight {weight} outside [0, 1]")));
    }
    if position == decoder_layers {
        return Ok(baseline_betas(decoder_layers));
    }
    Ok(BTreeMap::from([
        (position, weight),
        (decoder_layers, 1.0 - weight),
    ]))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationCell {
    pub position: usize,
    pub weight: f64,
    pub runs: Vec<SystemResult>,
}

impl AblationCell {
    pub fn wers(&self) -> Vec<f64> {
        self.runs.iter().map(SystemResult::macro_wer).collect()
    }

    pub fn mean(&self) -> f64 {
        mean(&self.wers())
    }

    /// Sample standard deviation over seeds; 0 for a single seed.
    pub fn std(&self) -> f64 {
        std_dev(&self.wers())
    }
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

pub fn std_dev(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return 0.0;
    }
    let m = mean(x);
    (x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() - 1) as f64).sqrt()
}

/// Grid over `positions × weights`, each trained once per seed. `run` is
/// called for every (betas, seed) and may serve repeated requests from a
/// cache.
pub fn run_ablation(
    decoder_layers: usize,
    positions: &[usize],
    weights: &[f64],
    seeds: &[u64],
    mut run: impl FnMut(&BTreeMap<usize, f64>, u64) -> Result<SystemResult>,
) -> Result<Vec<AblationCell>> {
    if positions.is_empty() || weights.is_empty() || seeds.is_empty() {
        return Err(Error::config("ablation needs positions, weights and seeds"));
    }
    let mut cells = Vec::with_capacity(positions.len() * weights.len());
    for &w in weights {
        for &p in positions {
            let betas = cell_betas(decoder_layers, p, w)?;
            let runs = seeds.iter().map(|&s| run(&betas, s)).collect::<Result<_>>()?;
            cells.push(AblationCell {
                position: p,
                weight: w,
                runs,
            });
        }
    }
    Ok(cells)
}

/// Cell with the lowest mean WER; the first one wins ties.
pub fn best_cell(cells: &[AblationCell]) -> Option<&AblationCell> {
    cells
        .iter()
        .fold(None, |best: Option<&AblationCell>, c| match best {
            Some(b) if b.mean() <= c.mean() => Some(b),
            _ => Some(c),
        })
}

/// Weights down, positions across; each entry is the mean WER in percent
/// with its standard deviation over seeds.
pub fn format_ablation(cells: &[AblationCell]) -> String {
    let mut positions: Vec<usize> = cells.iter().map(|c| c.position).collect();
    positions.sort_unstable();
    positions.dedup();
    let mut weights: Vec<f64> = cells.iter().map(|c| c.weight).collect();
    weights.sort_by(f64::total_cmp);
    weights.dedup();
    let mut s = String::from("weight");
    for p in &positions {
        let _ = write!(s, "\td={p}");
    }
    s.push('\n');
    for w in &weights {
        let _ = write!(s, "{w:.1}");
        for p in &positions {
            match cells.iter().find(|c| c.position == *p && c.weight == *w) {
                Some(c) => {
                    let _ = write!(s, "\t{:.2} [σ = {:.2}]", 100.0 * c.mean(), 100.0 * c.std());
                }
                None => s.push_str("\t-"),
            }
        }
        s.push('\n');
    }
    s
}

/// Machine-readable form of an ablation grid.
pub fn ablation_kv(cells: &[AblationCell]) -> KvConfig {
    let mut kv = KvConfig::new();
    for c in cells {
        let key = format!("cell.d{}.w{:.2}", c.position, c.weight);
        kv.set(&format!("{key}.mean"), format!("{:.6}", c.mean()));
        kv.set(&format!("{key}.std"), format!("{:.6}", c.std()));
        let each: Vec<String> = c.wers().iter().map(|w| format!("{w:.6}")).collect();
        kv.set(&format!("{key}.seeds"), each.join(","));
    }
    kv
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fake(betas: &BTreeMap<usize, f64>, seed: u64) -> Result<SystemResult> {
        let w = betas.get(&2).copied().unwrap_or(0.0);
        Ok(SystemResult {
            seed,
            betas: betas.clone(),
            best_dev_wer: 0.0,
            wer_in: 0.1 + (w - 0.4).abs() + seed as f64 * 0.01,
            wer_out: 0.3,
            ilm_ppl_out: 10.0,
        })
    }

    #[test]
    fn grid_shape_and_best_cell() {
        let cells = run_ablation(4, &[1, 2, 3], &[0.2, 0.4], &[1, 2], fake).unwrap();
        assert_eq!(cells.len(), 6);
        let best = best_cell(&cells).unwrap();
        assert_eq!((best.position, best.weight), (2, 0.4));
        assert!((best.std() - std_dev(&[0.205, 0.21])).abs() < 1e-12);
        let table = format_ablation(&cells);
        assert_eq!(table.lines().count(), 3);
        assert!(table.starts_with("weight\td=1\td=2\td=3"));
        assert_eq!(ablation_kv(&cells).iter().count(), 18);
    }

    #[test]
    fn cells_split_the_weight() {
        assert_eq!(cell_betas(4, 2, 0.4).unwrap(), BTreeMap::from([(2, 0.4), (4, 0.6)]));
        assert_eq!(cell_betas(4, 4, 0.3).unwrap(), baseline_betas(4));
        assert!(cell_betas(4, 5, 0.4).is_err());
        assert!(cell_betas(4, 2, 1.5).is_err());
    }

    #[test]
    fn statistics() {
        assert_eq!(std_dev(&[3.0]), 0.0);
        assert!((std_dev(&[1.0, 3.0]) - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(mean(&[1.0, 2.0, 6.0]), 3.0);
    }

    #[test]
    fn setup_round_trips() {
        let s = BenchmarkSetup::default();
        assert_eq!(BenchmarkSetup::from_kv(&s.to_kv()).unwrap(), s);
    }
}
