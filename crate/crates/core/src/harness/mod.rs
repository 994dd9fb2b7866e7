//! Evaluation and experiment grids: WER, the hours × N spectrum, loss
//! ablations, the cycle study, the joint-vs-separate comparison and contour
//! interpolation of spectrum results.

pub mod contour;
pub mod output;

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::alignment::{train_separate_system, AlignConfig};
use crate::corpus::{build_pair_set, subsample_speech, Corpus, DEFAULT_FRAME_PERIOD};
use crate::decoder::{build_text_index, decode_corpus, train_trigram_lm, LmConfig, PhoneticEmbedder};
use crate::error::{Error, Result};
use crate::nets::NetConfig;
use crate::objectives::Term;
use crate::scalar::Real;
use crate::trainer::{train_joint, TrainConfig, TrainError};

pub use contour::{emit_contour, ContourPoint};

/// Edit distance between two word sequences.
pub fn edit_distance<W: PartialEq>(r: &[W], h: &[W]) -> usize {
    let mut prev: Vec<usize> = (0..=h.len()).collect();
    let mut cur = vec![0; h.len() + 1];
    for i in 1..=r.len() {
        cur[0] = i;
        for j in 1..=h.len() {
            let sub = prev[j - 1] + usize::from(r[i - 1] != h[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[h.len()]
}

/// `100 × edits / reference words`, edits summed over utterances.
pub fn word_error_rate<W: PartialEq>(refs: &[Vec<W>], hyps: &[Vec<W>]) -> Result<f64> {
    if refs.len() != hyps.len() {
        return Err(Error::InvalidArgument(format!(
            "{} references but {} hypotheses",
            refs.len(),
            hyps.len()
        )));
    }
    let words: usize = refs.iter().map(Vec::len).sum();
    if words == 0 {
        return Err(Error::InvalidArgument("reference set is empty".into()));
    }
    let edits: usize = refs.iter().zip(hyps).map(|(r, h)| edit_distance(r, h)).sum();
    Ok(100.0 * edits as f64 / words as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    Joint,
    /// Separate autoencoders, then linear maps between projected spaces.
    Separate,
}

/// Everything needed to run one cell apart from data and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub net: NetConfig,
    pub train: TrainConfig,
    pub align: AlignConfig,
    pub lm: LmConfig,
    /// LM weight in the decoding score.
    pub beta: f64,
    pub beam: usize,
    pub frame_period: f64,
    pub strategy: Strategy,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            net: NetConfig::new(39, 61),
            train: TrainConfig::default(),
            align: AlignConfig::default(),
            lm: LmConfig::default(),
            beta: 0.01,
            beam: 10,
            frame_period: DEFAULT_FRAME_PERIOD,
            strategy: Strategy::Joint,
        }
    }
}

/// Training and test splits.
#[derive(Debug, Clone)]
pub struct Dataset<T> {
    pub train: Corpus<T>,
    pub test: Corpus<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub hours: f64,
    pub n_paired: usize,
    pub seed: u64,
    pub wer: f64,
    pub steps: usize,
    pub wall_seconds: f64,
    pub best_validation: Option<f64>,
}

/// Decodes the test split with any embedder and returns its WER.
pub fn evaluate<T: Real>(
    train: &Corpus<T>,
    test: &Corpus<T>,
    embedder: &dyn PhoneticEmbedder<T>,
    cfg: &ExperimentConfig,
) -> Result<f64> {
    let lexicon = train.lexicon();
    let index = build_text_index(lexicon, embedder)?;
    let lm = train_trigram_lm(&train.transcripts(), lexicon.len(), cfg.lm)?;
    let decoded = decode_corpus(test, &index, embedder, &lm, cfg.beta, cfg.beam)?;
    let refs: Vec<Vec<Option<usize>>> = test
        .utterances()
        .iter()
        .map(|u| u.words.iter().map(|&i| test.word(i).word_label).collect())
        .collect();
    let hyps: Vec<Vec<Option<usize>>> = decoded.iter().map(|(_, d)| d.words.iter().map(|&k| Some(k)).collect()).collect();
    word_error_rate(&refs, &hyps)
}

fn split_mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Training seed for a cell, derived from the master seed and the cell id.
pub fn cell_seed(master: u64, cell_id: &str) -> u64 {
    let h = cell_id.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3));
    split_mix(master ^ h)
}

/// Subsample, pair, train, decode. `hours = None` uses the whole corpus.
/// Data selection depends only on `seed`, so cells sharing a seed see nested
/// data; training uses `train_seed`.
pub fn run_cell<T: Real>(
    data: &Dataset<T>,
    hours: Option<f64>,
    n_paired: usize,
    cfg: &ExperimentConfig,
    seed: u64,
    train_seed: u64,
) -> Result<CellResult> {
    let start = Instant::now();
    let train = match hours {
        Some(h) => subsample_speech(&data.train, h, cfg.frame_period, seed)?,
        None => data.train.clone(),
    };
    let pairs = build_pair_set(&train, n_paired, seed)?;
    let tcfg = TrainConfig { seed: train_seed, ..cfg.train.clone() };
    let unwrap = |e: TrainError<T>| match e {
        TrainError::Setup(e) => e,
        TrainError::Diverged { step, .. } => Error::NonFiniteObjective { step },
    };
    let (wer, steps, best_validation) = match cfg.strategy {
        Strategy::Joint => {
            let out = train_joint(&train, &pairs, &cfg.net, &tcfg).map_err(unwrap)?;
            let wer = evaluate(&train, &data.test, &out.model, cfg)?;
            (wer, out.history.steps.len(), out.history.best_validation())
        }
        Strategy::Separate => {
            let sys = train_separate_system(&train, &pairs, &cfg.net, &tcfg, &cfg.align).map_err(unwrap)?;
            let wer = evaluate(&train, &data.test, &sys, cfg)?;
            (wer, sys.steps, None)
        }
    };
    Ok(CellResult {
        hours: hours.unwrap_or_else(|| data.train.duration_hours(cfg.frame_period)),
        n_paired,
        seed,
        wer,
        steps,
        wall_seconds: start.elapsed().as_secs_f64(),
        best_validation,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Ok,
    Infeasible,
    Failed(String),
}

impl CellStatus {
    pub fn label(&self) -> &str {
        match self {
            CellStatus::Ok => "ok",
            CellStatus::Infeasible => "infeasible",
            CellStatus::Failed(_) => "failed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumRow {
    pub hours: f64,
    pub n_paired: usize,
    pub seed: u64,
    pub wer: Option<f64>,
    pub status: CellStatus,
    pub detail: Option<CellResult>,
}

/// Hours × N grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentGrid {
    pub hours: Vec<f64>,
    pub n_paired: Vec<usize>,
    pub seeds: Vec<u64>,
}

/// Runs every cell; cells asking for more pairs than the subsample has
/// annotated words are marked infeasible, failures are recorded and the grid
/// continues.
pub fn run_spectrum<T: Real>(data: &Dataset<T>, grid: &ExperimentGrid, cfg: &ExperimentConfig) -> Vec<SpectrumRow> {
    let mut rows = Vec::new();
    for &seed in &grid.seeds {
        for &hours in &grid.hours {
            let available = subsample_speech(&data.train, hours, cfg.frame_period, seed).map(|c| c.annotated_indices().len());
            for &n in &grid.n_paired {
                let cell_id = format!("spectrum/{hours}/{n}");
                let row = |status, wer, detail| SpectrumRow { hours, n_paired: n, seed, wer, status, detail };
                let r = match &available {
                    Err(e) => row(CellStatus::Failed(e.to_string()), None, None),
                    Ok(avail) if n > *avail => row(CellStatus::Infeasible, None, None),
                    Ok(_) => match run_cell(data, Some(hours), n, cfg, seed, cell_seed(seed, &cell_id)) {
                        Ok(res) => row(CellStatus::Ok, Some(res.wer), Some(res)),
                        Err(e) => row(CellStatus::Failed(e.to_string()), None, None),
                    },
                };
                log::info!("spectrum cell hours={hours} n={n} seed={seed}: {} {:?}", r.status.label(), r.wer);
                rows.push(r);
            }
        }
    }
    rows
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    /// `None` for the full-loss baseline.
    pub dropped_term: Option<Term>,
    pub n_paired: usize,
    pub seed: u64,
    pub wer: Option<f64>,
    pub status: CellStatus,
}

/// Baseline plus one run per dropped term, all on the same data and seeds.
pub fn run_ablation<T: Real>(
    data: &Dataset<T>,
    n_paired: usize,
    terms_to_drop: &[Term],
    seeds: &[u64],
    cfg: &ExperimentConfig,
) -> Vec<AblationRow> {
    let mut rows = Vec::new();
    for &seed in seeds {
        let train_seed = cell_seed(seed, &format!("ablation/{n_paired}"));
        let variants = std::iter::once(None).chain(terms_to_drop.iter().copied().map(Some));
        for dropped in variants {
            let mut c = cfg.clone();
            if let Some(t) = dropped {
                c.train.weights.set_enabled(t, false);
            }
            let (wer, status) = match run_cell(data, None, n_paired, &c, seed, train_seed) {
                Ok(r) => (Some(r.wer), CellStatus::Ok),
                Err(e) => (None, CellStatus::Failed(e.to_string())),
            };
            log::info!("ablation drop={dropped:?} n={n_paired} seed={seed}: {wer:?}");
            rows.push(AblationRow { dropped_term: dropped, n_paired, seed, wer, status });
        }
    }
    rows
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleRow {
    pub cycle_enabled: bool,
    pub n_paired: usize,
    pub seed: u64,
    pub wer: Option<f64>,
    pub status: CellStatus,
}

/// With and without the cycle term for each N.
pub fn run_cycle_study<T: Real>(data: &Dataset<T>, n_values: &[usize], seeds: &[u64], cfg: &ExperimentConfig) -> Vec<CycleRow> {
    let mut rows = Vec::new();
    for &seed in seeds {
        for &n in n_values {
            let train_seed = cell_seed(seed, &format!("cycle/{n}"));
            for enabled in [false, true] {
                let mut c = cfg.clone();
                c.train.weights.cycle = enabled;
                let (wer, status) = match run_cell(data, None, n, &c, seed, train_seed) {
                    Ok(r) => (Some(r.wer), CellStatus::Ok),
                    Err(e) => (None, CellStatus::Failed(e.to_string())),
                };
                log::info!("cycle enabled={enabled} n={n} seed={seed}: {wer:?}");
                rows.push(CycleRow { cycle_enabled: enabled, n_paired: n, seed, wer, status });
            }
        }
    }
    rows
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyRow {
    pub strategy: Strategy,
    pub n_paired: usize,
    pub seed: u64,
    pub wer: Option<f64>,
    pub status: CellStatus,
}

/// Joint training against separate training plus linear alignment.
pub fn run_strategy_comparison<T: Real>(data: &Dataset<T>, n_paired: usize, seeds: &[u64], cfg: &ExperimentConfig) -> Vec<StrategyRow> {
    let mut rows = Vec::new();
    for &seed in seeds {
        let train_seed = cell_seed(seed, &format!("strategy/{n_paired}"));
        for strategy in [Strategy::Joint, Strategy::Separate] {
            let c = ExperimentConfig { strategy, ..cfg.clone() };
            let (wer, status) = match run_cell(data, None, n_paired, &c, seed, train_seed) {
                Ok(r) => (Some(r.wer), CellStatus::Ok),
                Err(e) => (None, CellStatus::Failed(e.to_string())),
            };
            rows.push(StrategyRow { strategy, n_paired, seed, wer, status });
        }
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wer_examples() {
        let r = vec![vec!["a", "b", "c"]];
        assert_eq!(word_error_rate(&r, &r).unwrap(), 0.0);
        let d = word_error_rate(&r, &[vec!["a", "c"]]).unwrap();
        assert!((d - 100.0 / 3.0).abs() < 1e-9);
        let si = word_error_rate(&r, &[vec!["x", "b", "c", "d"]]).unwrap();
        assert!((si - 200.0 / 3.0).abs() < 1e-9);
        assert!(word_error_rate::<&str>(&[], &[]).is_err());
        assert!(word_error_rate(&r, &[]).is_err());
    }

    #[test]
    fn cell_seeds_differ_by_cell() {
        assert_ne!(cell_seed(1, "a"), cell_seed(1, "b"));
        assert_eq!(cell_seed(1, "a"), cell_seed(1, "a"));
    }
}
