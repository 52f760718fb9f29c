use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use decred::calibration::{evaluate_calibration, fit_mixing_weights, split_dev, FitOptions};
use decred::config::KvConfig;
use decred::data::{scoring_reference, Tokenizer};
use decred::decoding::{
    decode_corpus, decode_fixed_length, read_hypotheses, write_hypotheses, DecodeOptions, MixingWeights,
    SearchConfig,
};
use decred::eval::{bootstrap_ci, bootstrap_compare, macro_wer, report_kv, wer, wer_by_id, ScoringMode};
use decred::experiment::{ablation_kv, format_ablation, load_corpus, run_ablation, run_system, BenchmarkData, BenchmarkSetup};
use decred::ilm::{format_ilm_table, ilm_perplexity};
use decred::model::{Checkpoint, Model, ModelConfig};
use decred::objective::ObjectiveConfig;
use decred::train::{TrainConfig, Trainer, DEFAULT_MAX_LEN};
use decred::{Error, Result};

use crate::{Command, DecodeArgs};

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { config, out } => gen_data(config.as_deref(), &out),
        Command::Train {
            config,
            train,
            dev,
            out,
            resume,
        } => train_cmd(config.as_deref(), train, dev, &out, resume),
        Command::Decode {
            checkpoint,
            manifest,
            out,
            decode,
        } => decode_cmd(&checkpoint, &manifest, &out, &decode),
        Command::Calibrate {
            checkpoint,
            manifest,
            out,
            mode,
            ratio,
            seed,
            epochs,
            lr,
            patience,
        } => {
            let opts = FitOptions {
                mode: mode.parse()?,
                epochs,
                lr,
                patience,
            };
            calibrate(&checkpoint, &manifest, &out, ratio, seed, &opts)
        }
        Command::Eval {
            manifest,
            hyp,
            baseline,
            resamples,
            seed,
            out,
        } => eval_cmd(&manifest, &hyp, &baseline, resamples, seed, out.as_deref()),
        Command::IlmPpl { checkpoint, manifest } => ilm_cmd(&checkpoint, &manifest),
        Command::Ablate {
            config,
            positions,
            weights,
            seeds,
            out,
        } => ablate(config.as_deref(), &positions, &weights, &seeds, out.as_deref()),
        Command::Benchmark {
            checkpoint,
            manifest,
            decode_config,
            emit,
        } => benchmark(&checkpoint, &manifest, &decode_config, emit),
    }
}

fn load_config(path: Option<&Path>) -> Result<KvConfig> {
    path.map_or_else(|| Ok(KvConfig::new()), KvConfig::load)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn gen_data(config: Option<&Path>, out: &Path) -> Result<()> {
    let setup = BenchmarkSetup::from_kv(&load_config(config)?)?;
    let data = BenchmarkData::generate(&setup)?;
    data.save(out)?;
    for (name, c) in decred::experiment::SPLITS.iter().zip(data.corpora()) {
        println!("{name}\t{} utterances", c.manifest.len());
    }
    Ok(())
}

/// Manifest path from a flag, else from `key` resolved against the config
/// file's directory.
fn manifest_path(flag: Option<PathBuf>, kv: &KvConfig, key: &str, config: Option<&Path>) -> Result<PathBuf> {
    if let Some(p) = flag {
        return Ok(p);
    }
    let rel = kv
        .get_str(key)
        .ok_or_else(|| Error::Config(format!("no manifest given: pass a flag or set {key}")))?;
    let base = config.and_then(Path::parent).unwrap_or(Path::new(""));
    Ok(base.join(rel))
}

fn train_cmd(config: Option<&Path>, train: Option<PathBuf>, dev: Option<PathBuf>, out: &Path, resume: bool) -> Result<()> {
    let kv = load_config(config)?;
    let train_path = manifest_path(train, &kv, "data.train_manifest", config)?;
    let dev_path = manifest_path(dev, &kv, "data.dev_manifest", config)?;
    let last = out.join("last.ckpt");
    let mut trainer = if resume && last.exists() {
        let t = Trainer::resume(&Checkpoint::load(&last)?)?;
        log::info!("resuming at step {}", t.step);
        t
    } else {
        let model_kv = kv.section("model.");
        let mut model = ModelConfig::from_kv(&model_kv)?;
        let objective = ObjectiveConfig::from_kv(&kv.section("objective."), model.decoder_layers)?;
        if !model_kv.contains("classifier_layers") {
            model.classifier_layers.extend(objective.betas.keys().copied());
        }
        let train_cfg = TrainConfig::from_kv(&kv.section("train."))?;
        let mut echo = KvConfig::new();
        echo.merge_prefixed("model.", &model.to_kv());
        echo.merge_prefixed("objective.", &objective.to_kv());
        echo.merge_prefixed("train.", &train_cfg.to_kv());
        create_dir(out)?;
        write_file(&out.join("config.txt"), &echo.to_text())?;
        Trainer::new(model, objective, train_cfg, Tokenizer::default())?
    };
    let train = load_corpus(&train_path)?;
    let dev = load_corpus(&dev_path)?;
    trainer.run(&train, &dev, Some(out), None)?;
    match trainer.best_dev_wer() {
        Some((w, step)) => println!("best dev WER {w:.4} at step {step}"),
        None => println!("no dev evaluation ran"),
    }
    println!("trained {} steps", trainer.step);
    Ok(())
}

fn decode_options(args: &DecodeArgs, model: &Model<f32>) -> Result<DecodeOptions> {
    let kv = load_config(args.config.as_deref())?.section("decode.");
    let lambda = args.lambda.map_or_else(|| kv.get_or("lambda", 0.3), Ok)?;
    let width = args.width.map_or_else(|| kv.get_or("width", 1), Ok)?;
    let max_len = args.max_len.map_or_else(|| kv.get_or("max_len", DEFAULT_MAX_LEN), Ok)?;
    let length_normalize = kv.get_or("length_normalize", false)?;
    let mode = args.mode.clone().or_else(|| kv.get_str("mode").map(str::to_string));
    let weights_path = args.weights.clone().or_else(|| kv.get_str("weights").map(PathBuf::from));
    let weights = match (mode.as_deref(), weights_path) {
        (None | Some("vanilla"), None) => MixingWeights::Vanilla,
        (Some(m @ ("scalar" | "vector")), None) => {
            return Err(Error::Config(format!("{m} mixing needs a weights file")));
        }
        (m, Some(p)) => {
            let w = MixingWeights::load(&p)?;
            if let Some(m) = m {
                if m != w.mode() {
                    return Err(Error::Config(format!(
                        "mode {m} requested but {} holds {} weights",
                        p.display(),
                        w.mode()
                    )));
                }
            }
            w
        }
        (Some(other), None) => return Err(Error::Config(format!("unknown mixing mode {other:?}"))),
    };
    let cfg = model.config();
    weights.validate(&cfg.classifier_layers, cfg.vocab_size)?;
    Ok(DecodeOptions {
        weights,
        search: SearchConfig {
            lambda,
            width,
            max_len,
            length_normalize,
        },
    })
}

fn load_model(checkpoint: &Path) -> Result<(Model<f32>, Tokenizer)> {
    let ck = Checkpoint::load(checkpoint)?;
    Ok((ck.to_model()?, ck.tokenizer))
}

fn decode_cmd(checkpoint: &Path, manifest: &Path, out: &Path, args: &DecodeArgs) -> Result<()> {
    let (model, tok) = load_model(checkpoint)?;
    let opts = decode_options(args, &model)?;
    let corpus = load_corpus(manifest)?;
    println!(
        "# decode mode={} lambda={} width={} max_len={}",
        opts.weights.mode(),
        opts.search.lambda,
        opts.search.width,
        opts.search.max_len
    );
    let mut rows = Vec::with_capacity(corpus.manifest.len());
    let start = Instant::now();
    for e in corpus.manifest.entries() {
        let t = Instant::now();
        let one = corpus.subset(decred::data::Manifest::new(vec![e.clone()])?)?;
        rows.extend(decode_corpus(&model, &one, &tok, &opts)?);
        println!("{}\t{:.2} ms", e.utterance_id, t.elapsed().as_secs_f64() * 1e3);
    }
    let total = start.elapsed().as_secs_f64();
    println!(
        "# {} utterances in {:.3} s ({:.2} ms per utterance)",
        rows.len(),
        total,
        1e3 * total / rows.len().max(1) as f64
    );
    write_hypotheses(out, &rows)
}

fn calibrate(checkpoint: &Path, manifest: &Path, out: &Path, ratio: f64, seed: u64, opts: &FitOptions) -> Result<()> {
    let (model, tok) = load_model(checkpoint)?;
    let corpus = load_corpus(manifest)?;
    let (fit, hold) = split_dev(&corpus.manifest, ratio, seed)?;
    let (fit, hold) = (corpus.subset(fit)?, corpus.subset(hold)?);
    let result = fit_mixing_weights(&model, &fit, &hold, &tok, opts)?;
    let before = evaluate_calibration(&model, &MixingWeights::Vanilla, &hold, &tok)?;
    let after = evaluate_calibration(&model, &result.weights, &hold, &tok)?;
    result.weights.save(out)?;
    println!(
        "mode {} fit {} holdout {} utterances, {} iterations",
        result.weights.mode(),
        fit.manifest.len(),
        hold.manifest.len(),
        result.fit_nll.len() - 1
    );
    println!("holdout nll {:.6} -> {:.6}", before.nll, after.nll);
    println!("holdout accuracy {:.4} -> {:.4}", before.accuracy, after.accuracy);
    if let MixingWeights::Scalar(m) = &result.weights {
        for (d, w) in m {
            println!("beta*_{d} = {w:.4}");
        }
    }
    Ok(())
}

fn hypotheses(path: &Path) -> Result<BTreeMap<String, String>> {
    Ok(read_hypotheses(path)?.into_iter().collect())
}

fn keyed_pairs(refs: &BTreeMap<String, String>, hyps: &BTreeMap<String, String>) -> Result<BTreeMap<String, (usize, usize)>> {
    let report = wer_by_id(refs, hyps, ScoringMode::Normalized)?;
    Ok(refs.keys().cloned().zip(report.pairs()).collect())
}

fn dataset_name(path: &Path) -> String {
    path.file_stem().map_or_else(|| "set".into(), |s| s.to_string_lossy().into_owned())
}

fn eval_cmd(
    manifests: &[PathBuf],
    hyps: &[PathBuf],
    baselines: &[PathBuf],
    resamples: usize,
    seed: u64,
    out: Option<&Path>,
) -> Result<()> {
    if manifests.len() != hyps.len() {
        return Err(Error::Config("give one --hyp per --manifest".into()));
    }
    if !baselines.is_empty() && baselines.len() != manifests.len() {
        return Err(Error::Config("give one --baseline per --manifest".into()));
    }
    let mut text = String::from("dataset\twer\tsub\tdel\tins\tref_words\tci_low\tci_high\n");
    let mut kv = KvConfig::new();
    let mut rates = Vec::new();
    let mut names = BTreeSet::new();
    for (i, (m, h)) in manifests.iter().zip(hyps).enumerate() {
        let mut name = dataset_name(m);
        if !names.insert(name.clone()) {
            name = format!("{name}{i}");
            names.insert(name.clone());
        }
        let refs: BTreeMap<String, String> = decred::data::Manifest::load(m)?
            .entries()
            .iter()
            .map(|e| (e.utterance_id.clone(), scoring_reference(&e.raw_transcript)))
            .collect();
        let hyp = hypotheses(h)?;
        let report = wer_by_id(&refs, &hyp, ScoringMode::Normalized)?;
        let ci = bootstrap_ci(&report.pairs(), 0.05, resamples, seed)?;
        let t = &report.total;
        let _ = writeln!(
            text,
            "{name}\t{:.4}\t{}\t{}\t{}\t{}\t{:.4}\t{:.4}",
            report.wer(),
            t.substitutions,
            t.deletions,
            t.insertions,
            t.ref_words,
            ci.0,
            ci.1
        );
        for (k, v) in report_kv(&name, &report, ci).iter() {
            kv.set(k, v);
        }
        if let Some(b) = baselines.get(i) {
            let p = bootstrap_compare(&keyed_pairs(&refs, &hyp)?, &keyed_pairs(&refs, &hypotheses(b)?)?, resamples, seed)?;
            let _ = writeln!(text, "{name}\tp_not_better_than_baseline\t{p:.4}");
            kv.set(&format!("{name}.p_value"), format!("{p:.6}"));
        }
        rates.push(report.wer());
    }
    let macro_rate = macro_wer(&rates)?;
    let _ = writeln!(text, "macro\t{macro_rate:.4}");
    kv.set("macro.wer", format!("{macro_rate:.6}"));
    text.push_str("\n# key=value\n");
    text.push_str(&kv.to_text());
    print!("{text}");
    if let Some(out) = out {
        write_file(out, &text)?;
    }
    Ok(())
}

fn ilm_cmd(checkpoints: &[PathBuf], manifests: &[PathBuf]) -> Result<()> {
    let corpora = manifests
        .iter()
        .map(|m| decred::data::Manifest::load(m))
        .collect::<Result<Vec<_>>>()?;
    let datasets: Vec<String> = manifests.iter().map(|m| dataset_name(m)).collect();
    let mut rows = Vec::new();
    for ck in checkpoints {
        let (model, tok) = load_model(ck)?;
        let ppl = corpora
            .iter()
            .map(|m| ilm_perplexity(&model, m, &tok).map(|r| r.perplexity))
            .collect::<Result<Vec<_>>>()?;
        let name = ck
            .parent()
            .and_then(Path::file_name)
            .map_or_else(|| dataset_name(ck), |s| s.to_string_lossy().into_owned());
        rows.push((name, ppl));
    }
    print!("{}", format_ilm_table(&datasets, &rows));
    Ok(())
}

fn ablate(config: Option<&Path>, positions: &[usize], weights: &[f64], seeds: &[u64], out: Option<&Path>) -> Result<()> {
    let setup = BenchmarkSetup::from_kv(&load_config(config)?)?;
    let data = BenchmarkData::generate(&setup)?;
    let d = setup.model.decoder_layers;
    let cells = run_ablation(d, positions, weights, seeds, |betas, seed| {
        run_system(&setup, &data, betas, seed)
    })?;
    let mut text = format_ablation(&cells);
    text.push_str("\n# key=value\n");
    text.push_str(&ablation_kv(&cells).to_text());
    print!("{text}");
    if let Some(out) = out {
        write_file(out, &text)?;
    }
    Ok(())
}

struct BenchConfig {
    name: String,
    opts: DecodeOptions,
}

fn parse_bench_config(spec: &str, model: &Model<f32>) -> Result<BenchConfig> {
    let mut name = None;
    let mut args = DecodeArgs {
        config: None,
        lambda: None,
        width: None,
        max_len: None,
        mode: None,
        weights: None,
    };
    let bad = |msg: String| Error::Config(format!("decode config {spec:?}: {msg}"));
    for part in spec.split(',').filter(|p| !p.is_empty()) {
        let (k, v) = part.split_once('=').ok_or_else(|| bad(format!("expected key=value, got {part:?}")))?;
        let num = |what| bad(format!("bad {what} {v:?}"));
        match k.trim() {
            "name" => name = Some(v.to_string()),
            "lambda" => args.lambda = Some(v.parse().map_err(|_| num("lambda"))?),
            "width" => args.width = Some(v.parse().map_err(|_| num("width"))?),
            "mode" => args.mode = Some(v.to_string()),
            "weights" => args.weights = Some(PathBuf::from(v)),
            other => return Err(bad(format!("unknown key {other:?}"))),
        }
    }
    let opts = decode_options(&args, model)?;
    let name = name.unwrap_or_else(|| format!("{}-w{}-l{}", opts.weights.mode(), opts.search.width, opts.search.lambda));
    Ok(BenchConfig { name, opts })
}

fn benchmark(checkpoint: &Path, manifest: &Path, specs: &[String], emit: usize) -> Result<()> {
    if emit == 0 {
        return Err(Error::Config("--emit must be at least 1".into()));
    }
    let (model, tok) = load_model(checkpoint)?;
    let corpus = load_corpus(manifest)?;
    let defaults = ["name=greedy,width=1".to_string(), "name=beam10,width=10".to_string()];
    let specs = if specs.is_empty() { &defaults[..] } else { specs };
    let configs = specs
        .iter()
        .map(|s| parse_bench_config(s, &model))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<String> = corpus
        .manifest
        .entries()
        .iter()
        .map(|e| scoring_reference(&e.raw_transcript))
        .collect();
    let mut rows = Vec::new();
    for c in &configs {
        let start = Instant::now();
        for e in corpus.manifest.entries() {
            let feats = corpus.features_of(&e.utterance_id)?;
            decode_fixed_length(&model, feats, tok.len(), &c.opts, emit)?;
        }
        let per_utt = start.elapsed().as_secs_f64() / corpus.manifest.len().max(1) as f64;
        let hyps: Vec<String> = decode_corpus(&model, &corpus, &tok, &c.opts)?
            .into_iter()
            .map(|(_, h)| h)
            .collect();
        let w = wer(&refs, &hyps, ScoringMode::Normalized)?.wer();
        rows.push((c.name.clone(), per_utt, w));
    }
    let fastest = rows.iter().map(|r| r.1).fold(f64::INFINITY, f64::min);
    println!("# {} utterances, {emit} tokens emitted per utterance", corpus.manifest.len());
    println!("config\tms_per_utt\twer\tslowdown");
    for (name, t, w) in rows {
        println!("{name}\t{:.3}\t{w:.4}\t{:.2}", 1e3 * t, t / fastest);
    }
    Ok(())
}
