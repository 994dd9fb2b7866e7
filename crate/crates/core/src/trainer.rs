//! Joint training: batch sampling, negative sampling, the optimization loop,
//! validation with early stopping and the structured run log.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, PairSet};
use crate::error::{Error, Result};
use crate::nets::{save_model, Model, NetConfig};
use crate::objectives::{total_loss, total_loss_and_grads, Batch, Breakdown, LossWeights, Term};
use crate::optim::{clip_global_norm, Adam, AdamConfig};
use crate::params::Grads;
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub clip_norm: f64,
    pub negatives_per_pair: usize,
    /// Fraction of the pair set held out for validation.
    pub validation_fraction: f64,
    /// Optimizer steps per epoch; defaults to one pass over the larger of the
    /// spoken corpus and the training pairs.
    pub steps_per_epoch: Option<usize>,
    /// Hard cap on optimizer steps.
    pub max_steps: Option<usize>,
    #[serde(skip)]
    pub log_path: Option<PathBuf>,
    #[serde(skip)]
    pub checkpoint_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            batch_size: 32,
            max_epochs: 100,
            patience: 10,
            seed: 0,
            weights: LossWeights::default(),
            clip_norm: 5.0,
            negatives_per_pair: 1,
            validation_fraction: 0.1,
            steps_per_epoch: None,
            max_steps: None,
            log_path: None,
            checkpoint_path: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        if !(self.adam.learning_rate > 0.0) {
            return Err(Error::InvalidArgument("learning rate must be positive".into()));
        }
        if self.negatives_per_pair == 0 {
            return Err(Error::InvalidArgument("need at least one negative per pair".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::InvalidArgument("validation fraction must be in [0, 1)".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::InvalidArgument("clip norm must be positive".into()));
        }
        self.weights.validate()
    }
}

/// Independent random streams for each part of a batch, so that the draws for
/// one part never depend on the sizes of the others.
#[derive(Debug, Clone)]
pub struct BatchRng {
    audio: ChaCha8Rng,
    text: ChaCha8Rng,
    pairs: ChaCha8Rng,
    negatives: ChaCha8Rng,
}

fn stream(seed: u64, k: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(k);
    r
}

impl BatchRng {
    pub fn new(seed: u64) -> Self {
        Self { audio: stream(seed, 1), text: stream(seed, 2), pairs: stream(seed, 3), negatives: stream(seed, 4) }
    }
}

/// Uniform sampler over spoken words not paired with a given word in Z.
#[derive(Debug, Clone)]
pub struct NegativeSampler {
    n_spoken: usize,
    /// Per word id, sorted spoken indices paired with it.
    excluded: Vec<Vec<usize>>,
}

impl NegativeSampler {
    pub fn new(n_spoken: usize, n_words: usize, pairs: &PairSet) -> Self {
        let mut excluded = vec![Vec::new(); n_words];
        for &(i, w) in &pairs.pairs {
            excluded[w].push(i);
        }
        for e in &mut excluded {
            e.sort_unstable();
            e.dedup();
        }
        Self { n_spoken, excluded }
    }

    pub fn eligible(&self, anchor: usize) -> usize {
        self.n_spoken - self.excluded[anchor].len()
    }

    pub fn sample(&self, anchor: usize, k: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
        let excl = &self.excluded[anchor];
        let n = self.eligible(anchor);
        if n == 0 {
            return Err(Error::InvalidArgument(format!(
                "no spoken word is eligible as a negative for word {anchor}"
            )));
        }
        Ok((0..k)
            .map(|_| {
                // Map the r-th eligible slot to its spoken index by stepping
                // over the sorted exclusions.
                let mut idx = rng.random_range(0..n);
                for &e in excl {
                    if e <= idx {
                        idx += 1;
                    } else {
                        break;
                    }
                }
                idx
            })
            .collect())
    }
}

/// `k` spoken words, none paired with `anchor` in `pairs`. Spoken words
/// without an annotation are eligible whatever their hidden label.
pub fn sample_negatives<T: Real>(
    corpus: &Corpus<T>,
    pairs: &PairSet,
    anchor: usize,
    k: usize,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    if anchor >= corpus.lexicon().len() {
        return Err(Error::InvalidArgument(format!("word id {anchor} outside the lexicon")));
    }
    NegativeSampler::new(corpus.len(), corpus.lexicon().len(), pairs).sample(anchor, k, rng)
}

/// Indices of one batch into the corpus, lexicon and pair set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchIndices {
    pub audio: Vec<usize>,
    pub text: Vec<usize>,
    pub paired: Vec<usize>,
    pub negatives: Vec<Vec<usize>>,
}

impl BatchIndices {
    pub fn resolve<'a, T: Real>(&self, corpus: &'a Corpus<T>, pairs: &PairSet) -> Batch<'a, T> {
        let lex = corpus.lexicon();
        Batch {
            audio: self.audio.iter().map(|&i| &corpus.word(i).frames).collect(),
            text: self.text.iter().map(|&w| lex.word(w).units.as_slice()).collect(),
            paired: self
                .paired
                .iter()
                .map(|&p| {
                    let (i, w) = pairs.pairs[p];
                    (&corpus.word(i).frames, lex.word(w).units.as_slice())
                })
                .collect(),
            negatives: self.negatives.iter().map(|n| n.iter().map(|&i| &corpus.word(i).frames).collect()).collect(),
        }
    }
}

fn sample_indices<T: Real>(
    corpus: &Corpus<T>,
    pairs: &PairSet,
    neg: &NegativeSampler,
    size: usize,
    k: usize,
    rng: &mut BatchRng,
) -> Result<BatchIndices> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let audio = (0..size).map(|_| rng.audio.random_range(0..corpus.len())).collect();
    let text = (0..size).map(|_| rng.text.random_range(0..corpus.lexicon().len())).collect();
    let mut paired = Vec::new();
    let mut negatives = Vec::new();
    if !pairs.is_empty() {
        for _ in 0..size {
            let p = rng.pairs.random_range(0..pairs.len());
            negatives.push(neg.sample(pairs.pairs[p].1, k, &mut rng.negatives)?);
            paired.push(p);
        }
    }
    Ok(BatchIndices { audio, text, paired, negatives })
}

/// Samples `size` audio, text and paired items (with `k` negatives each).
/// With an empty pair set the cross-domain parts are empty.
pub fn sample_batch<'a, T: Real>(
    corpus: &'a Corpus<T>,
    pairs: &PairSet,
    size: usize,
    k: usize,
    rng: &mut BatchRng,
) -> Result<Batch<'a, T>> {
    let neg = NegativeSampler::new(corpus.len(), corpus.lexicon().len(), pairs);
    Ok(sample_indices(corpus, pairs, &neg, size, k, rng)?.resolve(corpus, pairs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub total: f64,
    pub terms: [f64; 6],
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub step: usize,
    pub epoch: usize,
    pub total: f64,
    pub terms: [f64; 6],
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub steps: Vec<StepRecord>,
    pub validation: Vec<ValidationRecord>,
    /// Index into `validation` of the returned checkpoint.
    pub best: Option<usize>,
    pub stopped_early: bool,
}

impl History {
    pub fn best_validation(&self) -> Option<f64> {
        self.best.map(|i| self.validation[i].total)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T: Real> {
    pub model: Model<T>,
    pub history: History,
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError<T: Real> {
    #[error("training diverged at step {step} (non-finite loss or gradient)")]
    Diverged { step: usize, checkpoint: Box<Model<T>>, history: History },
    #[error(transparent)]
    Setup(#[from] Error),
}

/// Extra per-step gradient contribution, e.g. an adversarial term. Called with
/// the current model, the batch and the loss gradients before clipping.
pub type StepHook<'h, T> = dyn FnMut(&Model<T>, &Batch<'_, T>, &mut Grads<T>) -> Result<()> + 'h;

struct RunLog {
    out: Option<BufWriter<File>>,
}

impl RunLog {
    fn open(path: Option<&Path>) -> Result<Self> {
        let out = match path {
            Some(p) => {
                if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                }
                Some(BufWriter::new(File::create(p).map_err(|e| Error::io(p, e))?))
            }
            None => None,
        };
        Ok(Self { out })
    }

    fn record(&mut self, kind: &str, step: usize, epoch: usize, total: f64, terms: &[f64; 6], extra: Option<(&str, f64)>) {
        let Some(out) = self.out.as_mut() else { return };
        let mut rec = serde_json::json!({ "kind": kind, "step": step, "epoch": epoch, "total": total });
        for t in Term::ALL {
            rec[t.name()] = serde_json::json!(terms[t.index()]);
        }
        if let Some((k, v)) = extra {
            rec[k] = serde_json::json!(v);
        }
        // Logging failures must not abort training.
        let _ = writeln!(out, "{rec}");
    }
}

fn to_f64<T: Real>(b: &Breakdown<T>) -> (f64, [f64; 6]) {
    (b.total.to_f64_lossy(), b.terms.map(Real::to_f64_lossy))
}

/// Validation data: held-out pairs, or a fixed unpaired sample when none.
struct Validation {
    chunks: Vec<BatchIndices>,
    pairs: PairSet,
}

fn split_validation<T: Real>(corpus: &Corpus<T>, pairs: &PairSet, cfg: &TrainConfig) -> Result<(PairSet, Validation)> {
    let mut rng = stream(cfg.seed, 5);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    for i in (1..order.len()).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let n_val = if pairs.len() >= 2 && cfg.validation_fraction > 0.0 {
        ((pairs.len() as f64 * cfg.validation_fraction).round() as usize).clamp(1, pairs.len() - 1)
    } else {
        0
    };
    let val = PairSet { pairs: order[..n_val].iter().map(|&p| pairs.pairs[p]).collect() };
    let train = PairSet { pairs: order[n_val..].iter().map(|&p| pairs.pairs[p]).collect() };
    let chunk = (2 * cfg.batch_size).max(1);
    let mut chunks = Vec::new();
    if val.is_empty() {
        // Intra-domain terms on a fixed sample.
        let n = corpus.len().min(4 * cfg.batch_size);
        let audio: Vec<usize> = (0..n).map(|_| rng.random_range(0..corpus.len())).collect();
        let text: Vec<usize> = (0..n).map(|i| i % corpus.lexicon().len()).collect();
        for (a, t) in audio.chunks(chunk).zip(text.chunks(chunk)) {
            chunks.push(BatchIndices { audio: a.to_vec(), text: t.to_vec(), paired: vec![], negatives: vec![] });
        }
    } else {
        // Negatives for validation come from the full pair set's exclusions.
        let neg = NegativeSampler::new(corpus.len(), corpus.lexicon().len(), pairs);
        let idx: Vec<usize> = (0..val.len()).collect();
        for c in idx.chunks(chunk) {
            let mut negatives = Vec::with_capacity(c.len());
            for &p in c {
                negatives.push(neg.sample(val.pairs[p].1, cfg.negatives_per_pair, &mut rng)?);
            }
            chunks.push(BatchIndices {
                audio: c.iter().map(|&p| val.pairs[p].0).collect(),
                text: c.iter().map(|&p| val.pairs[p].1).collect(),
                paired: c.to_vec(),
                negatives,
            });
        }
    }
    Ok((train, Validation { chunks, pairs: val }))
}

fn validation_loss<T: Real>(model: &Model<T>, corpus: &Corpus<T>, v: &Validation, w: &LossWeights) -> Result<(f64, [f64; 6])> {
    let mut total = 0.0;
    let mut terms = [0.0; 6];
    let mut weight = 0.0;
    for c in &v.chunks {
        let b = c.resolve(corpus, &v.pairs);
        let n = c.audio.len().max(c.paired.len()) as f64;
        let (t, ts) = to_f64(&total_loss(model, &b, w)?);
        total += n * t;
        for k in 0..6 {
            terms[k] += n * ts[k];
        }
        weight += n;
    }
    if weight > 0.0 {
        total /= weight;
        terms.iter_mut().for_each(|x| *x /= weight);
    }
    Ok((total, terms))
}

/// Trains a fresh model on `corpus` with pair set `pairs`.
pub fn train_joint<T: Real>(
    corpus: &Corpus<T>,
    pairs: &PairSet,
    net: &NetConfig,
    cfg: &TrainConfig,
) -> std::result::Result<TrainOutcome<T>, TrainError<T>> {
    let model = Model::new(net.clone(), cfg.seed)?;
    train_from(model, corpus, pairs, cfg, None)
}

/// Continues training `model`; `hook` may add gradient contributions.
pub fn train_from<T: Real>(
    mut model: Model<T>,
    corpus: &Corpus<T>,
    pairs: &PairSet,
    cfg: &TrainConfig,
    mut hook: Option<&mut StepHook<'_, T>>,
) -> std::result::Result<TrainOutcome<T>, TrainError<T>> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus.into());
    }
    let net = model.config();
    if corpus.feature_dim() != net.feature_dim || corpus.lexicon().inventory_size() != net.inventory_size {
        return Err(Error::ConfigMismatch(format!(
            "corpus has feature dim {} and {} units, network expects {} and {}",
            corpus.feature_dim(),
            corpus.lexicon().inventory_size(),
            net.feature_dim,
            net.inventory_size
        ))
        .into());
    }
    let (train_pairs, val) = split_validation(corpus, pairs, cfg)?;
    let neg = NegativeSampler::new(corpus.len(), corpus.lexicon().len(), pairs);
    let mut rng = BatchRng::new(cfg.seed);
    let mut adam = Adam::new(cfg.adam, model.params());
    let mut log = RunLog::open(cfg.log_path.as_deref())?;
    let steps_per_epoch = cfg
        .steps_per_epoch
        .unwrap_or_else(|| corpus.len().max(train_pairs.len()).div_ceil(cfg.batch_size))
        .max(1);

    let mut history = History::default();
    let mut best: Option<(f64, Model<T>)> = None;
    let mut since_best = 0;
    let mut step = 0;
    'epochs: for epoch in 0..cfg.max_epochs {
        for _ in 0..steps_per_epoch {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let idx = sample_indices(corpus, &train_pairs, &neg, cfg.batch_size, cfg.negatives_per_pair, &mut rng)?;
            let batch = idx.resolve(corpus, &train_pairs);
            let (b, mut grads) = total_loss_and_grads(&model, &batch, &cfg.weights)?;
            if let Some(h) = hook.as_deref_mut() {
                h(&model, &batch, &mut grads)?;
            }
            step += 1;
            if !b.is_finite() || !grads.all_finite() {
                log::error!("non-finite loss or gradient at step {step}");
                return Err(TrainError::Diverged { step, checkpoint: Box::new(model), history });
            }
            let norm = clip_global_norm(&mut grads, cfg.clip_norm).to_f64_lossy();
            let before = model.clone();
            adam.step(model.params_mut(), &grads);
            if !model.params().all_finite() {
                return Err(TrainError::Diverged { step, checkpoint: Box::new(before), history });
            }
            let (total, terms) = to_f64(&b);
            log.record("step", step, epoch, total, &terms, Some(("grad_norm", norm)));
            history.steps.push(StepRecord { step, epoch, total, terms, grad_norm: norm });
        }
        let (vt, vterms) = validation_loss(&model, corpus, &val, &cfg.weights)?;
        log.record("validation", step, epoch, vt, &vterms, None);
        history.validation.push(ValidationRecord { step, epoch, total: vt, terms: vterms });
        if !vt.is_finite() {
            return Err(TrainError::Diverged {
                step,
                checkpoint: Box::new(best.map_or(model, |b| b.1)),
                history,
            });
        }
        if best.as_ref().is_none_or(|(bv, _)| vt < *bv) {
            best = Some((vt, model.clone()));
            history.best = Some(history.validation.len() - 1);
            since_best = 0;
            if let Some(p) = &cfg.checkpoint_path {
                save_model(&model, p)?;
            }
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                history.stopped_early = true;
                log::info!("early stop after epoch {epoch}");
                break;
            }
        }
    }
    let model = match best {
        Some((_, m)) => m,
        None => model,
    };
    Ok(TrainOutcome { model, history })
}
