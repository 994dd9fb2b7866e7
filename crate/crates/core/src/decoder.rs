//! Recognition: a phonetic index over the lexicon, softmax posteriors over
//! negative squared distances, a backoff trigram LM and beam search.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Lexicon, SpokenWord};
use crate::error::{Error, Result};
use crate::nets::{AudioEncoder, Model};
use crate::scalar::Real;
use crate::tensor::Matrix;

/// Anything that maps spoken words and unit sequences into one shared space.
pub trait PhoneticEmbedder<T: Real> {
    fn embed_audio(&self, items: &[&Matrix<T>]) -> Result<Matrix<T>>;
    fn embed_text(&self, seqs: &[&[usize]]) -> Result<Matrix<T>>;
}

impl<T: Real> PhoneticEmbedder<T> for Model<T> {
    fn embed_audio(&self, items: &[&Matrix<T>]) -> Result<Matrix<T>> {
        self.encode_audio_batch(AudioEncoder::Phonetic, items)
    }

    fn embed_text(&self, seqs: &[&[usize]]) -> Result<Matrix<T>> {
        self.encode_text_batch(seqs)
    }
}

/// One row per lexicon word, in word-id order.
#[derive(Debug, Clone, PartialEq)]
pub struct TextIndex<T> {
    pub vectors: Matrix<T>,
}

impl<T: Real> TextIndex<T> {
    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }
}

pub fn build_text_index<T: Real>(lexicon: &Lexicon, embedder: &dyn PhoneticEmbedder<T>) -> Result<TextIndex<T>> {
    if lexicon.is_empty() {
        return Err(Error::InvalidArgument("cannot index an empty lexicon".into()));
    }
    let seqs: Vec<&[usize]> = lexicon.words().map(|w| w.units.as_slice()).collect();
    Ok(TextIndex { vectors: embedder.embed_text(&seqs)? })
}

/// Log of the softmax over negative squared distances to every index row.
pub fn log_posterior<T: Real>(query: &[T], index: &TextIndex<T>) -> Result<Vec<T>> {
    if query.len() != index.dim() {
        return Err(Error::DimensionMismatch { row: 0, expected: index.dim(), found: query.len() });
    }
    let neg: Vec<T> = (0..index.len())
        .map(|k| -crate::tensor::squared_distance(query, index.vectors.row(k)))
        .collect();
    let m = neg.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = m + neg.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
    Ok(neg.into_iter().map(|v| v - lse).collect())
}

/// Posterior over lexicon words for a phonetic vector.
pub fn posterior_from_vector<T: Real>(query: &[T], index: &TextIndex<T>) -> Result<Vec<T>> {
    Ok(log_posterior(query, index)?.into_iter().map(T::exp).collect())
}

pub fn acoustic_posterior<T: Real>(x: &SpokenWord<T>, index: &TextIndex<T>, embedder: &dyn PhoneticEmbedder<T>) -> Result<Vec<T>> {
    let v = embedder.embed_audio(&[&x.frames])?;
    posterior_from_vector(v.row(0), index)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    /// Multiplier applied each time the model backs off to a shorter context.
    pub backoff: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self { backoff: 0.4 }
    }
}

const LM_FORMAT: &str = "wordbridge-trigram";
const LM_VERSION: u32 = 1;

/// Backoff trigram over word ids. Symbols `V` and `V+1` are sentence BOS and
/// EOS. A context's distribution over words and EOS is the normalized backoff
/// score: relative trigram frequency when the trigram was seen, otherwise
/// `backoff` times the bigram score, bottoming out at add-one unigrams.
#[derive(Debug)]
pub struct TrigramLM {
    vocab: usize,
    cfg: LmConfig,
    uni: Vec<u64>,
    uni_total: u64,
    bi: HashMap<(usize, usize), u64>,
    bi_ctx: HashMap<usize, u64>,
    tri: HashMap<(usize, usize, usize), u64>,
    tri_ctx: HashMap<(usize, usize), u64>,
    cache: Mutex<HashMap<(usize, usize), Arc<Vec<f64>>>>,
}

#[derive(Serialize, Deserialize)]
struct LmFile {
    format: String,
    version: u32,
    vocab_size: usize,
    backoff: f64,
    vocabulary: Vec<String>,
    unigrams: Vec<(usize, u64)>,
    bigrams: Vec<(usize, usize, u64)>,
    trigrams: Vec<(usize, usize, usize, u64)>,
}

impl TrigramLM {
    pub fn bos(&self) -> usize {
        self.vocab
    }

    pub fn eos(&self) -> usize {
        self.vocab + 1
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn empty(vocab: usize, cfg: LmConfig) -> Self {
        Self {
            vocab,
            cfg,
            uni: vec![0; vocab + 1],
            uni_total: 0,
            bi: HashMap::new(),
            bi_ctx: HashMap::new(),
            tri: HashMap::new(),
            tri_ctx: HashMap::new(),
            cache: Default::default(),
        }
    }

    fn add_trigram(&mut self, u: usize, v: usize, w: usize, c: u64) {
        *self.tri.entry((u, v, w)).or_default() += c;
        *self.tri_ctx.entry((u, v)).or_default() += c;
    }

    fn add_bigram(&mut self, v: usize, w: usize, c: u64) {
        *self.bi.entry((v, w)).or_default() += c;
        *self.bi_ctx.entry(v).or_default() += c;
    }

    fn add_unigram(&mut self, w: usize, c: u64) {
        let slot = if w == self.eos() { self.vocab } else { w };
        self.uni[slot] += c;
        self.uni_total += c;
    }

    /// Probability of `w` (a word id or EOS) after context `(u, v)`.
    pub fn prob(&self, u: usize, v: usize, w: usize) -> f64 {
        let dist = self.distribution(u, v);
        let slot = if w == self.eos() { self.vocab } else { w };
        dist[slot]
    }

    pub fn log_prob(&self, u: usize, v: usize, w: usize) -> f64 {
        self.prob(u, v, w).ln()
    }

    /// Distribution over words `0..V` followed by EOS at index `V`.
    pub fn distribution(&self, u: usize, v: usize) -> Arc<Vec<f64>> {
        if let Some(d) = self.cache.lock().unwrap().get(&(u, v)) {
            return d.clone();
        }
        let eos = self.eos();
        let n = self.vocab + 1;
        let denom_u = (self.uni_total + n as u64) as f64;
        let tri_c = self.tri_ctx.get(&(u, v)).copied().unwrap_or(0);
        let bi_c = self.bi_ctx.get(&v).copied().unwrap_or(0);
        let mut scores = Vec::with_capacity(n);
        for slot in 0..n {
            let w = if slot == self.vocab { eos } else { slot };
            let s = match self.tri.get(&(u, v, w)) {
                Some(&c) if tri_c > 0 => c as f64 / tri_c as f64,
                _ => {
                    let bi = match self.bi.get(&(v, w)) {
                        Some(&c) if bi_c > 0 => c as f64 / bi_c as f64,
                        _ => self.cfg.backoff * (self.uni[slot] + 1) as f64 / denom_u,
                    };
                    self.cfg.backoff * bi
                }
            };
            scores.push(s);
        }
        let z: f64 = scores.iter().sum();
        scores.iter_mut().for_each(|s| *s /= z);
        let d = Arc::new(scores);
        self.cache.lock().unwrap().insert((u, v), d.clone());
        d
    }

    /// Per-word perplexity over the sentences (EOS counted as a token).
    pub fn perplexity(&self, sentences: &[Vec<usize>]) -> f64 {
        let mut nll = 0.0;
        let mut n = 0usize;
        for s in sentences {
            let (mut u, mut v) = (self.bos(), self.bos());
            for &w in s.iter().chain(std::iter::once(&self.eos())) {
                nll -= self.log_prob(u, v, w);
                n += 1;
                (u, v) = (v, w);
            }
        }
        (nll / n.max(1) as f64).exp()
    }

    pub fn to_json(&self, lexicon: &Lexicon) -> Result<String> {
        let eos = self.eos();
        let unigrams = self
            .uni
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(slot, &c)| (if slot == self.vocab { eos } else { slot }, c))
            .collect();
        let file = LmFile {
            format: LM_FORMAT.into(),
            version: LM_VERSION,
            vocab_size: self.vocab,
            backoff: self.cfg.backoff,
            vocabulary: (0..self.vocab).map(|k| lexicon.surface(k).to_owned()).collect(),
            unigrams,
            bigrams: sorted_counts(&self.bi).into_iter().map(|((a, b), c)| (a, b, c)).collect(),
            trigrams: sorted_counts(&self.tri).into_iter().map(|((a, b, d), c)| (a, b, d, c)).collect(),
        };
        serde_json::to_string_pretty(&file).map_err(|e| Error::Serde(e.to_string()))
    }

    /// Parses a serialized LM, checking its vocabulary against `lexicon`.
    pub fn from_json(text: &str, lexicon: &Lexicon) -> Result<Self> {
        let f: LmFile = serde_json::from_str(text).map_err(|e| Error::Format(format!("language model: {e}")))?;
        if f.format != LM_FORMAT {
            return Err(Error::Format(format!("not a language model file (format `{}`)", f.format)));
        }
        if f.version != LM_VERSION {
            return Err(Error::Version { found: f.version, expected: LM_VERSION });
        }
        let same_vocab = f.vocab_size == lexicon.len()
            && f.vocabulary.iter().enumerate().all(|(k, w)| lexicon.surface(k) == w);
        if !same_vocab {
            return Err(Error::ConfigMismatch("language model vocabulary differs from the lexicon".into()));
        }
        let mut lm = Self::empty(f.vocab_size, LmConfig { backoff: f.backoff });
        let limit = f.vocab_size + 2;
        let bad = |x: usize| x >= limit;
        for (w, c) in f.unigrams {
            if bad(w) || w == lm.bos() {
                return Err(Error::Format(format!("language model: bad unigram id {w}")));
            }
            lm.add_unigram(w, c);
        }
        for (a, b, c) in f.bigrams {
            if bad(a) || bad(b) {
                return Err(Error::Format("language model: bad bigram id".into()));
            }
            lm.add_bigram(a, b, c);
        }
        for (a, b, d, c) in f.trigrams {
            if bad(a) || bad(b) || bad(d) {
                return Err(Error::Format("language model: bad trigram id".into()));
            }
            lm.add_trigram(a, b, d, c);
        }
        Ok(lm)
    }

    pub fn save(&self, path: &Path, lexicon: &Lexicon) -> Result<()> {
        crate::container::write_atomic(path, self.to_json(lexicon)?.as_bytes())
    }

    pub fn load(path: &Path, lexicon: &Lexicon) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, lexicon)
    }
}

fn sorted_counts<K: Ord + Copy>(m: &HashMap<K, u64>) -> Vec<(K, u64)> {
    m.iter().map(|(k, &c)| (*k, c)).collect::<BTreeMap<_, _>>().into_iter().collect()
}

/// Counts orders one to three over word-id transcripts.
pub fn train_trigram_lm(transcripts: &[Vec<usize>], vocab_size: usize, cfg: LmConfig) -> Result<TrigramLM> {
    if transcripts.is_empty() {
        return Err(Error::InvalidArgument("language model needs at least one transcript".into()));
    }
    if !(cfg.backoff > 0.0 && cfg.backoff <= 1.0) {
        return Err(Error::InvalidArgument(format!("backoff factor must be in (0, 1], got {}", cfg.backoff)));
    }
    let mut lm = TrigramLM::empty(vocab_size, cfg);
    let (bos, eos) = (lm.bos(), lm.eos());
    for s in transcripts {
        if let Some(&w) = s.iter().find(|&&w| w >= vocab_size) {
            return Err(Error::UnknownWord(format!("word id {w} is outside the lexicon")));
        }
        let mut seq = vec![bos, bos];
        seq.extend_from_slice(s);
        seq.push(eos);
        for t in 2..seq.len() {
            lm.add_trigram(seq[t - 2], seq[t - 1], seq[t], 1);
            lm.add_bigram(seq[t - 1], seq[t], 1);
            lm.add_unigram(seq[t], 1);
        }
    }
    Ok(lm)
}

/// Decoded utterance. `score` is exactly the sum of `word_scores`, each being
/// `log P_a + β log P_LM`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decoded {
    pub words: Vec<usize>,
    pub score: f64,
    pub word_scores: Vec<f64>,
}

#[derive(Debug, Clone)]
struct Hyp {
    words: Vec<usize>,
    scores: Vec<f64>,
    total: f64,
}

/// Beam search with one word per segment. `log_post[t][k]` is the acoustic
/// log-posterior of word `k` for segment `t`. Hypotheses sharing the last two
/// words are recombined, keeping the better one.
pub fn beam_search_log_posteriors(log_post: &[Vec<f64>], lm: &TrigramLM, beta: f64, beam: usize) -> Result<Decoded> {
    if log_post.is_empty() {
        return Err(Error::InvalidArgument("utterance has no segments".into()));
    }
    if beam == 0 || !(beta >= 0.0) {
        return Err(Error::InvalidArgument("beam size must be ≥ 1 and β ≥ 0".into()));
    }
    if log_post.iter().any(|p| p.len() != lm.vocab_size()) {
        return Err(Error::DimensionMismatch { row: 0, expected: lm.vocab_size(), found: log_post[0].len() });
    }
    let bos = lm.bos();
    let mut hyps = vec![Hyp { words: vec![], scores: vec![], total: 0.0 }];
    for post in log_post {
        let mut best: HashMap<(usize, usize), Hyp> = HashMap::new();
        for h in &hyps {
            let n = h.words.len();
            let u = if n >= 2 { h.words[n - 2] } else { bos };
            let v = if n >= 1 { h.words[n - 1] } else { bos };
            let dist = lm.distribution(u, v);
            for (k, &lp) in post.iter().enumerate() {
                let s = lp + beta * dist[k].ln();
                let total = h.total + s;
                let better = |old: &Hyp| total > old.total || (total == old.total && h.words.as_slice() < &old.words[..n]);
                let key = (v, k);
                if best.get(&key).is_none_or(better) {
                    let mut words = h.words.clone();
                    words.push(k);
                    let mut scores = h.scores.clone();
                    scores.push(s);
                    best.insert(key, Hyp { words, scores, total });
                }
            }
        }
        let mut next: Vec<Hyp> = best.into_values().collect();
        next.sort_by(|a, b| b.total.total_cmp(&a.total).then_with(|| a.words.cmp(&b.words)));
        next.truncate(beam);
        hyps = next;
    }
    let h = hyps.swap_remove(0);
    Ok(Decoded { words: h.words, score: h.total, word_scores: h.scores })
}

/// Decodes the spoken words of one utterance.
pub fn beam_search_decode<T: Real>(
    segments: &[&SpokenWord<T>],
    index: &TextIndex<T>,
    embedder: &dyn PhoneticEmbedder<T>,
    lm: &TrigramLM,
    beta: f64,
    beam: usize,
) -> Result<Decoded> {
    if segments.is_empty() {
        return Err(Error::InvalidArgument("utterance has no segments".into()));
    }
    let frames: Vec<&Matrix<T>> = segments.iter().map(|s| &s.frames).collect();
    let vecs = embedder.embed_audio(&frames)?;
    let log_post = (0..vecs.rows())
        .map(|r| Ok(log_posterior(vecs.row(r), index)?.into_iter().map(Real::to_f64_lossy).collect()))
        .collect::<Result<Vec<Vec<f64>>>>()?;
    beam_search_log_posteriors(&log_post, lm, beta, beam)
}

/// One line of decode output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeRecord {
    pub utterance_id: String,
    pub words: Vec<String>,
    pub score: f64,
    pub word_scores: Vec<f64>,
}

/// Decodes every utterance of `corpus`, embedding all spoken words in one pass.
pub fn decode_corpus<T: Real>(
    corpus: &Corpus<T>,
    index: &TextIndex<T>,
    embedder: &dyn PhoneticEmbedder<T>,
    lm: &TrigramLM,
    beta: f64,
    beam: usize,
) -> Result<Vec<(String, Decoded)>> {
    let frames: Vec<&Matrix<T>> = corpus.spoken().iter().map(|s| &s.frames).collect();
    let vecs = embedder.embed_audio(&frames)?;
    let mut out = Vec::with_capacity(corpus.utterances().len());
    for utt in corpus.utterances() {
        let log_post = utt
            .words
            .iter()
            .map(|&i| Ok(log_posterior(vecs.row(i), index)?.into_iter().map(Real::to_f64_lossy).collect()))
            .collect::<Result<Vec<Vec<f64>>>>()?;
        out.push((utt.id.clone(), beam_search_log_posteriors(&log_post, lm, beta, beam)?));
    }
    Ok(out)
}

pub fn to_record(lexicon: &Lexicon, utterance_id: &str, d: &Decoded) -> DecodeRecord {
    DecodeRecord {
        utterance_id: utterance_id.to_owned(),
        words: d.words.iter().map(|&k| lexicon.surface(k).to_owned()).collect(),
        score: d.score,
        word_scores: d.word_scores.clone(),
    }
}
