use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::Serialize;
use wordbridge_core::alignment::{fit_alignment, load_alignment, save_alignment, train_separate_system, AlignReport, SeparateSystem};
use wordbridge_core::corpus::{build_pair_set, generate_synthetic_corpus, Corpus, Lexicon};
use wordbridge_core::decoder::{build_text_index, decode_corpus, to_record, train_trigram_lm, DecodeRecord, PhoneticEmbedder, TrigramLM};
use wordbridge_core::harness::output::{
    any_failed, write_ablation_csv, write_contour_csv, write_cycle_csv, write_manifest, write_spectrum_csv, RunManifest,
};
use wordbridge_core::harness::{
    emit_contour, run_ablation, run_cycle_study, run_spectrum, word_error_rate, ExperimentConfig, ExperimentGrid, Strategy,
};
use wordbridge_core::nets::checkpoint::{load_model, save_model};
use wordbridge_core::objectives::Term;
use wordbridge_core::trainer::{train_joint, History, TrainConfig, TrainError};
use wordbridge_core::Model32;

use crate::args::{base_config, pair_count, read_spec, DataArgs, HyperArgs};

/// Flags shared by every subcommand.
pub struct Global {
    pub seed: u64,
    pub config: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl Global {
    fn out(&self, name: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.output_dir).with_context(|| format!("creating {}", self.output_dir.display()))?;
        Ok(self.output_dir.join(name))
    }

    fn config(&self, corpus: &Corpus<f32>, hyper: &HyperArgs) -> Result<ExperimentConfig> {
        let mut cfg = base_config(self.config.as_deref(), corpus)?;
        hyper.apply(&mut cfg)?;
        cfg.train.seed = self.seed;
        cfg.net.validate()?;
        Ok(cfg)
    }
}

const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Spec file (TOML); defaults to 50 words, 8 units, 3 speakers
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
    #[arg(long)]
    pub speakers: Option<usize>,
    #[arg(long)]
    pub tokens_per_word: Option<usize>,
    /// Per-frame noise standard deviation
    #[arg(long)]
    pub noise: Option<f64>,
}

pub fn synth(g: &Global, a: &SynthArgs) -> Result<()> {
    let mut spec = read_spec(a.spec.as_deref())?;
    if let Some(v) = a.vocab_size {
        spec.vocab_size = v;
    }
    if let Some(v) = a.speakers {
        spec.speakers = v;
    }
    if let Some(v) = a.tokens_per_word {
        spec.tokens_per_word = v;
    }
    if let Some(v) = a.noise {
        spec.noise = v;
    }
    let syn = generate_synthetic_corpus::<f32>(&spec, g.seed)?;
    syn.train.save(&g.out("train")?)?;
    if let Some(test) = &syn.test {
        test.save(&g.out("test")?)?;
    }
    syn.train.lexicon().save(&g.out("lexicon.txt")?)?;
    std::fs::write(g.out("spec.toml")?, spec.to_toml())?;
    println!(
        "wrote {} training and {} test words to {}",
        syn.train.len(),
        syn.test.as_ref().map_or(0, Corpus::len),
        g.output_dir.display()
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub hyper: HyperArgs,
    /// Number of paired words [all annotated words]
    #[arg(long)]
    pub n_paired: Option<usize>,
    /// Paired words as a fraction of the annotated words
    #[arg(long)]
    pub pair_fraction: Option<f64>,
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    config: &'a ExperimentConfig,
    n_paired: usize,
    steps: usize,
    best_validation: Option<f64>,
    stopped_early: bool,
    alignment: Option<&'a AlignReport>,
}

fn write_history(path: &Path, h: &History) -> Result<()> {
    std::fs::write(path, serde_json::to_string(h)?).with_context(|| format!("writing {}", path.display()))
}

pub fn train(g: &Global, a: &TrainArgs) -> Result<()> {
    let corpus = a.data.train(g.seed)?;
    let cfg = g.config(&corpus, &a.hyper)?;
    let n = pair_count(a.n_paired, a.pair_fraction, &corpus)?;
    let pairs = build_pair_set(&corpus, n, g.seed)?;
    let tcfg = TrainConfig { log_path: Some(g.out("train_log.jsonl")?), ..cfg.train.clone() };
    let lm = train_trigram_lm(&corpus.transcripts(), corpus.lexicon().len(), cfg.lm)?;
    lm.save(&g.out("lm.json")?, corpus.lexicon())?;
    corpus.lexicon().save(&g.out("lexicon.txt")?)?;

    let ckpt = g.out("model.ckpt")?;
    let (steps, best, early, report) = match cfg.strategy {
        Strategy::Joint => {
            let out = match train_joint(&corpus, &pairs, &cfg.net, &tcfg) {
                Ok(o) => o,
                Err(TrainError::Diverged { step, checkpoint, history }) => {
                    save_model(&checkpoint, &ckpt)?;
                    write_history(&g.out("history.json")?, &history)?;
                    bail!("training diverged at step {step}; last finite model saved to {}", ckpt.display());
                }
                Err(TrainError::Setup(e)) => return Err(e.into()),
            };
            save_model(&out.model, &ckpt)?;
            write_history(&g.out("history.json")?, &out.history)?;
            (out.history.steps.len(), out.history.best_validation(), out.history.stopped_early, None)
        }
        Strategy::Separate => {
            let sys = train_separate_system(&corpus, &pairs, &cfg.net, &tcfg, &cfg.align).map_err(|e| anyhow::anyhow!("{e}"))?;
            save_model(&sys.model, &ckpt)?;
            save_alignment(&g.out("alignment.bin")?, &sys.audio_space, &sys.text_space, &sys.maps, &sys.report)?;
            (sys.steps, None, false, Some(sys.report))
        }
    };
    let summary = TrainSummary { config: &cfg, n_paired: n, steps, best_validation: best, stopped_early: early, alignment: report.as_ref() };
    std::fs::write(g.out("train_summary.json")?, serde_json::to_string_pretty(&summary)?)?;
    println!("trained {steps} steps with {n} pairs; model in {}", ckpt.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct AlignArgs {
    /// Checkpoint of a separately trained model
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub hyper: HyperArgs,
    #[arg(long)]
    pub n_paired: Option<usize>,
    #[arg(long)]
    pub pair_fraction: Option<f64>,
}

pub fn align(g: &Global, a: &AlignArgs) -> Result<()> {
    let corpus = a.data.train(g.seed)?;
    let cfg = g.config(&corpus, &a.hyper)?;
    let model: Model32 = load_model(&a.checkpoint, None)?;
    let n = pair_count(a.n_paired, a.pair_fraction, &corpus)?;
    let pairs = build_pair_set(&corpus, n, g.seed)?;
    let sys = fit_alignment(model, &corpus, &pairs, &cfg.align, 0)?;
    let path = g.out("alignment.bin")?;
    save_alignment(&path, &sys.audio_space, &sys.text_space, &sys.maps, &sys.report)?;
    println!(
        "d={} objective {:.4} -> {:.4} after {} steps; maps in {}",
        sys.maps.m_at.rows(),
        sys.report.objective.first().copied().unwrap_or(f64::NAN),
        sys.report.objective.last().copied().unwrap_or(f64::NAN),
        sys.report.steps,
        path.display()
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Manifest of the utterances to decode
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub lexicon: PathBuf,
    /// Trigram LM written by `train`
    #[arg(long)]
    pub lm: PathBuf,
    /// Alignment file; decodes through the separate-training maps
    #[arg(long)]
    pub alignment: Option<PathBuf>,
    #[arg(long)]
    pub cmvn: bool,
    #[command(flatten)]
    pub hyper: HyperArgs,
}

fn embedder(model: Model32, alignment: Option<&Path>) -> Result<Box<dyn PhoneticEmbedder<f32>>> {
    Ok(match alignment {
        None => Box::new(model),
        Some(p) => {
            let (audio_space, text_space, maps, report) = load_alignment(p)?;
            Box::new(SeparateSystem { model, audio_space, text_space, maps, report, steps: 0 })
        }
    })
}

pub fn decode(g: &Global, a: &DecodeArgs) -> Result<()> {
    let data = DataArgs { train_manifest: Some(a.manifest.clone()), lexicon: Some(a.lexicon.clone()), cmvn: a.cmvn, ..Default::default() };
    let corpus = data.train(g.seed)?;
    let cfg = g.config(&corpus, &a.hyper)?;
    let model: Model32 = load_model(&a.checkpoint, None)?;
    if model.config().feature_dim != corpus.feature_dim() {
        bail!("checkpoint expects {}-dim features, corpus has {}", model.config().feature_dim, corpus.feature_dim());
    }
    let lexicon = corpus.lexicon();
    let lm = TrigramLM::load(&a.lm, lexicon)?;
    let emb = embedder(model, a.alignment.as_deref())?;
    let index = build_text_index(lexicon, emb.as_ref())?;
    let decoded = decode_corpus(&corpus, &index, emb.as_ref(), &lm, cfg.beta, cfg.beam)?;
    let path = g.out("decode.jsonl")?;
    let mut w = BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
    for (id, d) in &decoded {
        serde_json::to_writer(&mut w, &to_record(lexicon, id, d))?;
        writeln!(w)?;
    }
    w.flush()?;
    println!("decoded {} utterances into {}", decoded.len(), path.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// Decode output (JSON lines)
    #[arg(long)]
    pub hyp: PathBuf,
    /// Reference manifest with word labels
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub lexicon: PathBuf,
}

pub fn score(g: &Global, a: &ScoreArgs) -> Result<()> {
    let data = DataArgs { train_manifest: Some(a.manifest.clone()), lexicon: Some(a.lexicon.clone()), ..Default::default() };
    let corpus = data.train(g.seed)?;
    let lexicon: &Lexicon = corpus.lexicon();
    let mut hyps: HashMap<String, Vec<String>> = HashMap::new();
    let f = File::open(&a.hyp).with_context(|| format!("opening {}", a.hyp.display()))?;
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: DecodeRecord = serde_json::from_str(&line).with_context(|| format!("{} line {}", a.hyp.display(), i + 1))?;
        hyps.insert(r.utterance_id, r.words);
    }
    let mut refs = Vec::new();
    let mut out = Vec::new();
    for u in corpus.utterances() {
        let r: Vec<String> = u
            .words
            .iter()
            .map(|&i| corpus.word(i).word_label.map(|k| lexicon.surface(k).to_owned()).context("reference word without a label"))
            .collect::<Result<_>>()?;
        refs.push(r);
        out.push(hyps.remove(&u.id).with_context(|| format!("no hypothesis for utterance {}", u.id))?);
    }
    let wer = word_error_rate(&refs, &out)?;
    println!("WER {wer:.2}% over {} utterances", refs.len());
    Ok(())
}

#[derive(Debug, Args)]
pub struct SpectrumArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub hyper: HyperArgs,
    /// Speech budgets in hours
    #[arg(long, value_delimiter = ',', required = true)]
    pub hours: Vec<f64>,
    /// Paired-word counts
    #[arg(long, value_delimiter = ',', required = true)]
    pub n_paired: Vec<usize>,
    /// Data seeds; defaults to the global seed
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    /// Contour grid size per axis; 0 disables the contour
    #[arg(long, default_value_t = 20)]
    pub contour_resolution: usize,
}

fn seeds(g: &Global, s: &[u64]) -> Vec<u64> {
    if s.is_empty() {
        vec![g.seed]
    } else {
        s.to_vec()
    }
}

fn finish<R: Serialize>(g: &Global, command: &str, cfg: &ExperimentConfig, rows: &[R], failed: bool) -> Result<()> {
    write_manifest(&g.out("manifest.json")?, &RunManifest { command, version: VERSION, config: cfg, rows })?;
    if failed {
        bail!("one or more cells failed; see manifest.json");
    }
    Ok(())
}

pub fn spectrum(g: &Global, a: &SpectrumArgs) -> Result<()> {
    let data = a.data.dataset(g.seed)?;
    let cfg = g.config(&data.train, &a.hyper)?;
    let grid = ExperimentGrid { hours: a.hours.clone(), n_paired: a.n_paired.clone(), seeds: seeds(g, &a.seeds) };
    let rows = run_spectrum(&data, &grid, &cfg);
    write_spectrum_csv(&g.out("spectrum.csv")?, &rows)?;
    if a.contour_resolution > 0 {
        // Average over seeds per cell before interpolating.
        let mut cells: Vec<(f64, f64, Vec<f64>)> = Vec::new();
        for r in rows.iter().filter(|r| r.wer.is_some()) {
            match cells.iter_mut().find(|c| c.0 == r.hours && c.1 == r.n_paired as f64) {
                Some(c) => c.2.push(r.wer.unwrap()),
                None => cells.push((r.hours, r.n_paired as f64, vec![r.wer.unwrap()])),
            }
        }
        let pts: Vec<(f64, f64, f64)> = cells.iter().map(|(h, n, w)| (*h, *n, w.iter().sum::<f64>() / w.len() as f64)).collect();
        match emit_contour(&pts, a.contour_resolution) {
            Ok(c) => write_contour_csv(&g.out("contour.csv")?, &c)?,
            Err(e) => log::warn!("no contour: {e}"),
        }
    }
    for r in &rows {
        println!("hours={} n={} seed={} wer={} {}", r.hours, r.n_paired, r.seed, r.wer.map_or("-".into(), |w| format!("{w:.2}")), r.status.label());
    }
    finish(g, "spectrum", &cfg, &rows, any_failed(rows.iter().map(|r| &r.status)))
}

fn parse_term(s: &str) -> Result<Term, String> {
    Term::parse(s).ok_or_else(|| format!("unknown term `{s}`"))
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub hyper: HyperArgs,
    #[arg(long)]
    pub n_paired: usize,
    /// Terms to drop one at a time [intra_audio,intra_text,cross_audio,cross_text,embedding]
    #[arg(long, value_delimiter = ',', value_parser = parse_term)]
    pub drop: Vec<Term>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
}

pub fn ablate(g: &Global, a: &AblateArgs) -> Result<()> {
    let data = a.data.dataset(g.seed)?;
    let cfg = g.config(&data.train, &a.hyper)?;
    let terms = if a.drop.is_empty() { Term::JOINT.to_vec() } else { a.drop.clone() };
    let rows = run_ablation(&data, a.n_paired, &terms, &seeds(g, &a.seeds), &cfg);
    write_ablation_csv(&g.out("ablation.csv")?, &rows)?;
    for r in &rows {
        println!("drop={} seed={} wer={}", r.dropped_term.map_or("none", |t| t.name()), r.seed, r.wer.map_or("-".into(), |w| format!("{w:.2}")));
    }
    finish(g, "ablate", &cfg, &rows, any_failed(rows.iter().map(|r| &r.status)))
}

#[derive(Debug, Args)]
pub struct CycleArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub hyper: HyperArgs,
    #[arg(long, value_delimiter = ',', required = true)]
    pub n_paired: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
}

pub fn cycle_study(g: &Global, a: &CycleArgs) -> Result<()> {
    let data = a.data.dataset(g.seed)?;
    let cfg = g.config(&data.train, &a.hyper)?;
    let rows = run_cycle_study(&data, &a.n_paired, &seeds(g, &a.seeds), &cfg);
    write_cycle_csv(&g.out("cycle.csv")?, &rows)?;
    for r in &rows {
        println!("cycle={} n={} seed={} wer={}", r.cycle_enabled, r.n_paired, r.seed, r.wer.map_or("-".into(), |w| format!("{w:.2}")));
    }
    finish(g, "cycle-study", &cfg, &rows, any_failed(rows.iter().map(|r| &r.status)))
}
