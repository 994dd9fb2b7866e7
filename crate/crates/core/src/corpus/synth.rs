//! Synthetic spoken-word corpus with known ground truth.
//!
//! Every subword unit owns a random prototype frame. A spoken token of a word
//! repeats each of its units' prototypes for a sampled duration, adds a
//! per-speaker offset vector and i.i.d. Gaussian noise.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Corpus, Lexicon, SpokenWord};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub vocab_size: usize,
    pub inventory_size: usize,
    /// Explicit pronunciations; when absent, random distinct sequences are drawn.
    pub word_units: Option<Vec<Vec<usize>>>,
    pub min_word_len: usize,
    pub max_word_len: usize,
    pub speakers: usize,
    pub test_speakers: usize,
    pub tokens_per_word: usize,
    pub test_tokens_per_word: usize,
    pub min_frames_per_unit: usize,
    pub max_frames_per_unit: usize,
    pub feature_dim: usize,
    /// Standard deviation of the per-frame noise.
    pub noise: f64,
    /// Standard deviation of each speaker's offset vector.
    pub speaker_offset: f64,
    pub min_words_per_utterance: usize,
    pub max_words_per_utterance: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            vocab_size: 50,
            inventory_size: 8,
            word_units: None,
            min_word_len: 3,
            max_word_len: 5,
            speakers: 3,
            test_speakers: 1,
            tokens_per_word: 20,
            test_tokens_per_word: 4,
            min_frames_per_unit: 2,
            max_frames_per_unit: 3,
            feature_dim: 13,
            noise: 0.3,
            speaker_offset: 0.5,
            min_words_per_utterance: 4,
            max_words_per_utterance: 8,
        }
    }
}

impl SynthSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Format(format!("synth spec: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("synth spec serializes")
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("synth spec: {m}")));
        if self.vocab_size == 0 || self.inventory_size == 0 || self.feature_dim == 0 {
            return bad("vocabulary, inventory and feature dimension must be positive");
        }
        if self.speakers == 0 || self.tokens_per_word == 0 {
            return bad("need at least one speaker and one token per word");
        }
        if self.min_word_len == 0 || self.min_word_len > self.max_word_len {
            return bad("word length range is empty");
        }
        if self.min_frames_per_unit == 0 || self.min_frames_per_unit > self.max_frames_per_unit {
            return bad("frames-per-unit range is empty");
        }
        if self.min_words_per_utterance == 0 || self.min_words_per_utterance > self.max_words_per_utterance {
            return bad("words-per-utterance range is empty");
        }
        if self.test_tokens_per_word > 0 && self.test_speakers == 0 {
            return bad("test tokens requested without test speakers");
        }
        if !(self.noise >= 0.0) || !(self.speaker_offset >= 0.0) {
            return bad("noise and speaker offset must be non-negative");
        }
        Ok(())
    }
}

/// Generated train/test corpora plus the ground truth used to build them.
#[derive(Debug, Clone)]
pub struct SyntheticCorpus<T> {
    pub train: Corpus<T>,
    /// Tokens from speakers disjoint from the training speakers; `None` when no
    /// test tokens were requested.
    pub test: Option<Corpus<T>>,
    /// `S×D` unit prototypes.
    pub prototypes: Matrix<T>,
    pub speaker_offsets: Vec<(String, Vec<T>)>,
    /// Per spoken word (in corpus order), the frame count of each unit.
    pub train_durations: Vec<Vec<usize>>,
    pub test_durations: Vec<Vec<usize>>,
}

fn draw_words(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<usize>>> {
    if let Some(explicit) = &spec.word_units {
        let mut seen = HashSet::new();
        for (k, w) in explicit.iter().enumerate() {
            if w.is_empty() || w.iter().any(|&u| u >= spec.inventory_size) {
                return Err(Error::InvalidArgument(format!("synth spec: word {k} has an invalid unit sequence")));
            }
            if !seen.insert(w.clone()) {
                return Err(Error::InvalidArgument(format!(
                    "synth spec: word {k} duplicates an earlier unit sequence; words must be phonetically distinct"
                )));
            }
        }
        return Ok(explicit.clone());
    }
    let mut seen = HashSet::new();
    let mut words = Vec::with_capacity(spec.vocab_size);
    let mut attempts = 0usize;
    while words.len() < spec.vocab_size {
        attempts += 1;
        if attempts > 1000 * spec.vocab_size + 10_000 {
            return Err(Error::InvalidArgument(
                "synth spec: cannot draw enough distinct unit sequences; enlarge the inventory or word length".into(),
            ));
        }
        let len = rng.random_range(spec.min_word_len..=spec.max_word_len);
        let w: Vec<usize> = (0..len).map(|_| rng.random_range(0..spec.inventory_size)).collect();
        if seen.insert(w.clone()) {
            words.push(w);
        }
    }
    Ok(words)
}

struct Split {
    spoken: Vec<SpokenWord<f64>>,
    durations: Vec<Vec<usize>>,
}

#[allow(clippy::too_many_arguments)]
fn render_split(
    spec: &SynthSpec,
    words: &[Vec<usize>],
    prototypes: &Matrix<f64>,
    speakers: &[(String, Vec<f64>)],
    tokens_per_word: usize,
    prefix: &str,
    rng: &mut ChaCha8Rng,
) -> Split {
    let d = spec.feature_dim;
    let mut per_speaker: Vec<Vec<usize>> = vec![Vec::new(); speakers.len()];
    for k in 0..words.len() {
        for j in 0..tokens_per_word {
            per_speaker[j % speakers.len()].push(k);
        }
    }
    let mut spoken = Vec::new();
    let mut durations = Vec::new();
    for (s, tokens) in per_speaker.iter_mut().enumerate() {
        tokens.shuffle(rng);
        let (spk, offset) = &speakers[s];
        let mut cursor = 0;
        let mut utt_no = 0;
        while cursor < tokens.len() {
            let n = rng.random_range(spec.min_words_per_utterance..=spec.max_words_per_utterance);
            let end = (cursor + n).min(tokens.len());
            let utt_id = format!("{prefix}-{spk}-u{utt_no:04}");
            for (pos, &k) in tokens[cursor..end].iter().enumerate() {
                let durs: Vec<usize> = words[k]
                    .iter()
                    .map(|_| rng.random_range(spec.min_frames_per_unit..=spec.max_frames_per_unit))
                    .collect();
                let total: usize = durs.iter().sum();
                let mut frames = Matrix::zeros(total, d);
                let mut row = 0;
                for (&u, &du) in words[k].iter().zip(&durs) {
                    for _ in 0..du {
                        for c in 0..d {
                            let noise: f64 = rng.sample(StandardNormal);
                            frames[(row, c)] = prototypes[(u, c)] + offset[c] + spec.noise * noise;
                        }
                        row += 1;
                    }
                }
                spoken.push(SpokenWord {
                    frames,
                    utterance_id: utt_id.clone(),
                    position: pos,
                    word_label: Some(k),
                    speaker: Some(spk.clone()),
                });
                durations.push(durs);
            }
            cursor = end;
            utt_no += 1;
        }
    }
    Split { spoken, durations }
}

pub fn generate_synthetic_corpus<T: Real>(spec: &SynthSpec, seed: u64) -> Result<SyntheticCorpus<T>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words = draw_words(spec, &mut rng)?;
    let s = spec.inventory_size;
    let d = spec.feature_dim;
    let prototypes = Matrix::from_fn(s, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut make_speakers = |n: usize, tag: &str| -> Vec<(String, Vec<f64>)> {
        (0..n)
            .map(|i| {
                let off = (0..d).map(|_| spec.speaker_offset * rng.sample::<f64, _>(StandardNormal)).collect();
                (format!("{tag}{i}"), off)
            })
            .collect()
    };
    let train_speakers = make_speakers(spec.speakers, "spk");
    let test_speakers = make_speakers(spec.test_speakers, "tst");

    let units: Vec<String> = (0..s).map(|u| format!("p{u}")).collect();
    let entries: Vec<(String, Vec<usize>)> =
        words.iter().enumerate().map(|(k, w)| (format!("w{k:03}"), w.clone())).collect();
    let lexicon = Lexicon::new(units, entries)?;

    let train = render_split(spec, &words, &prototypes, &train_speakers, spec.tokens_per_word, "train", &mut rng);
    let test = if spec.test_tokens_per_word > 0 {
        Some(render_split(spec, &words, &prototypes, &test_speakers, spec.test_tokens_per_word, "test", &mut rng))
    } else {
        None
    };

    let cast_speakers = |v: &[(String, Vec<f64>)]| -> Vec<(String, Vec<T>)> {
        v.iter().map(|(n, o)| (n.clone(), o.iter().map(|&x| T::from_f64_lossy(x)).collect())).collect()
    };
    let mut speaker_offsets = cast_speakers(&train_speakers);
    speaker_offsets.extend(cast_speakers(&test_speakers));

    let train_corpus = Corpus::new(train.spoken, lexicon.clone())?.cast();
    let (test_corpus, test_durations) = match test {
        Some(t) => (Some(Corpus::new(t.spoken, lexicon)?.cast()), t.durations),
        None => (None, Vec::new()),
    };
    Ok(SyntheticCorpus {
        train: train_corpus,
        test: test_corpus,
        prototypes: prototypes.cast(),
        speaker_offsets,
        train_durations: train.durations,
        test_durations,
    })
}
