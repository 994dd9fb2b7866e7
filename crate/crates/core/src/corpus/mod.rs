//! Spoken/text word data model, ingestion, normalization and pair selection.

pub mod formats;
pub mod synth;

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Matrix;

pub use synth::{generate_synthetic_corpus, SynthSpec, SyntheticCorpus};

/// Default feature hop in seconds.
pub const DEFAULT_FRAME_PERIOD: f64 = 0.01;

/// One segmented spoken word: `T×D` feature frames.
#[derive(Debug, Clone, PartialEq)]
pub struct SpokenWord<T> {
    pub frames: Matrix<T>,
    pub utterance_id: String,
    /// Ordinal of this word inside its utterance.
    pub position: usize,
    /// Lexicon index, present only for annotated words.
    pub word_label: Option<usize>,
    pub speaker: Option<String>,
}

impl<T: Real> SpokenWord<T> {
    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.rows() == 0
    }
}

/// A text word as a sequence of subword-unit ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TextWord {
    pub units: Vec<usize>,
    pub word_id: usize,
}

impl TextWord {
    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }
}

pub const BOS_SYMBOL: &str = "<bos>";
pub const EOS_SYMBOL: &str = "<eos>";
pub const PAD_SYMBOL: &str = "<pad>";

/// Closed word list with pronunciations over a subword inventory.
///
/// Unit ids are `0..S`. The decoder input vocabulary appends BOS at id `S`; the
/// decoder output vocabulary appends EOS at id `S`.
#[derive(Debug, Clone, PartialEq)]
pub struct Lexicon {
    words: Vec<(String, TextWord)>,
    units: Vec<String>,
    index: HashMap<String, usize>,
}

impl Lexicon {
    pub fn new(units: Vec<String>, entries: Vec<(String, Vec<usize>)>) -> Result<Self> {
        let s = units.len();
        let mut seen_units = HashSet::new();
        for u in &units {
            if [BOS_SYMBOL, EOS_SYMBOL, PAD_SYMBOL].contains(&u.as_str()) {
                return Err(Error::Lexicon { line: 0, message: format!("unit `{u}` collides with a reserved symbol") });
            }
            if !seen_units.insert(u.as_str()) {
                return Err(Error::Lexicon { line: 0, message: format!("duplicate unit `{u}`") });
            }
        }
        let mut index = HashMap::new();
        let mut words = Vec::with_capacity(entries.len());
        for (k, (surface, seq)) in entries.into_iter().enumerate() {
            if seq.is_empty() {
                return Err(Error::Lexicon { line: k + 1, message: format!("word `{surface}` has no units") });
            }
            if let Some(&bad) = seq.iter().find(|&&u| u >= s) {
                return Err(Error::Lexicon { line: k + 1, message: format!("unit id {bad} out of range for `{surface}`") });
            }
            if index.insert(surface.clone(), k).is_some() {
                return Err(Error::Lexicon { line: k + 1, message: format!("duplicate word `{surface}`") });
            }
            words.push((surface, TextWord { units: seq, word_id: k }));
        }
        Ok(Self { words, units, index })
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let parsed = formats::parse_lexicon(text)?;
        let mut units: Vec<String> = parsed.declared_inventory.clone().unwrap_or_default();
        let mut unit_ids: HashMap<String, usize> = units.iter().enumerate().map(|(i, u)| (u.clone(), i)).collect();
        let declared = parsed.declared_inventory.is_some();
        let mut entries = Vec::with_capacity(parsed.entries.len());
        let mut seen = HashSet::new();
        for (line, word, syms) in parsed.entries {
            if !seen.insert(word.clone()) {
                return Err(Error::Lexicon { line, message: format!("duplicate word `{word}`") });
            }
            let mut seq = Vec::with_capacity(syms.len());
            for sym in syms {
                if [BOS_SYMBOL, EOS_SYMBOL, PAD_SYMBOL].contains(&sym.as_str()) {
                    return Err(Error::Lexicon { line, message: format!("reserved symbol `{sym}` used as a unit") });
                }
                let id = match unit_ids.get(&sym) {
                    Some(&id) => id,
                    None if declared => {
                        return Err(Error::Lexicon { line, message: format!("unknown subword symbol `{sym}`") })
                    }
                    None => {
                        units.push(sym.clone());
                        unit_ids.insert(sym, units.len() - 1);
                        units.len() - 1
                    }
                };
                seq.push(id);
            }
            entries.push((word, seq));
        }
        Self::new(units, entries)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("#inventory {}\n", self.units.join(" "));
        for (surface, tw) in &self.words {
            let syms: Vec<&str> = tw.units.iter().map(|&u| self.units[u].as_str()).collect();
            out.push_str(&format!("{surface}\t{}\n", syms.join(" ")));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Number of distinct words `N`.
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Subword inventory size `S` (excluding reserved symbols).
    pub fn inventory_size(&self) -> usize {
        self.units.len()
    }

    pub fn units(&self) -> &[String] {
        &self.units
    }

    pub fn word(&self, k: usize) -> &TextWord {
        &self.words[k].1
    }

    pub fn surface(&self, k: usize) -> &str {
        &self.words[k].0
    }

    pub fn words(&self) -> impl Iterator<Item = &TextWord> {
        self.words.iter().map(|(_, w)| w)
    }

    pub fn lookup(&self, surface: &str) -> Option<usize> {
        self.index.get(surface).copied()
    }

    pub fn max_word_len(&self) -> usize {
        self.words.iter().map(|(_, w)| w.len()).max().unwrap_or(0)
    }
}

/// Ordered spoken-word indices of one utterance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Utterance {
    pub id: String,
    pub words: Vec<usize>,
}

/// Spoken words grouped into utterances, plus the lexicon they are labelled with.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus<T> {
    spoken: Vec<SpokenWord<T>>,
    lexicon: Lexicon,
    utterances: Vec<Utterance>,
}

impl<T: Real> Corpus<T> {
    /// Groups words into utterances by id (first-appearance order) and orders
    /// each utterance by position.
    pub fn new(spoken: Vec<SpokenWord<T>>, lexicon: Lexicon) -> Result<Self> {
        if spoken.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let dim = spoken[0].frames.cols();
        let mut order: Vec<String> = Vec::new();
        let mut groups: HashMap<String, Vec<usize>> = HashMap::new();
        for (i, w) in spoken.iter().enumerate() {
            if w.frames.rows() == 0 {
                return Err(Error::Manifest { row: i + 1, message: "spoken word has no frames".into() });
            }
            if w.frames.cols() != dim {
                return Err(Error::DimensionMismatch { row: i + 1, expected: dim, found: w.frames.cols() });
            }
            if let Some(k) = w.word_label {
                if k >= lexicon.len() {
                    return Err(Error::Manifest { row: i + 1, message: format!("word label {k} not in lexicon") });
                }
            }
            groups
                .entry(w.utterance_id.clone())
                .or_insert_with(|| {
                    order.push(w.utterance_id.clone());
                    Vec::new()
                })
                .push(i);
        }
        let utterances = order
            .into_iter()
            .map(|id| {
                let mut words = groups.remove(&id).unwrap();
                words.sort_by_key(|&i| (spoken[i].position, i));
                Utterance { id, words }
            })
            .collect();
        Ok(Self { spoken, lexicon, utterances })
    }

    pub fn spoken(&self) -> &[SpokenWord<T>] {
        &self.spoken
    }

    pub fn word(&self, i: usize) -> &SpokenWord<T> {
        &self.spoken[i]
    }

    /// Number of spoken words `M`.
    pub fn len(&self) -> usize {
        self.spoken.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spoken.is_empty()
    }

    pub fn lexicon(&self) -> &Lexicon {
        &self.lexicon
    }

    pub fn utterances(&self) -> &[Utterance] {
        &self.utterances
    }

    pub fn feature_dim(&self) -> usize {
        self.spoken[0].frames.cols()
    }

    pub fn total_frames(&self) -> usize {
        self.spoken.iter().map(|w| w.frames.rows()).sum()
    }

    pub fn duration_hours(&self, frame_period: f64) -> f64 {
        self.total_frames() as f64 * frame_period / 3600.0
    }

    pub fn annotated_indices(&self) -> Vec<usize> {
        (0..self.spoken.len()).filter(|&i| self.spoken[i].word_label.is_some()).collect()
    }

    /// Word-id sequence of an utterance, if every word in it is annotated.
    pub fn transcript(&self, utt: &Utterance) -> Option<Vec<usize>> {
        utt.words.iter().map(|&i| self.spoken[i].word_label).collect()
    }

    pub fn transcripts(&self) -> Vec<Vec<usize>> {
        self.utterances.iter().filter_map(|u| self.transcript(u)).collect()
    }

    pub fn cast<U: Real>(&self) -> Corpus<U> {
        Corpus {
            spoken: self
                .spoken
                .iter()
                .map(|w| SpokenWord {
                    frames: w.frames.cast(),
                    utterance_id: w.utterance_id.clone(),
                    position: w.position,
                    word_label: w.word_label,
                    speaker: w.speaker.clone(),
                })
                .collect(),
            lexicon: self.lexicon.clone(),
            utterances: self.utterances.clone(),
        }
    }

    /// Writes binary feature files, `manifest.jsonl` and `lexicon.txt` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let feat_dir = dir.join("features");
        fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;
        let mut records = Vec::with_capacity(self.spoken.len());
        for (i, w) in self.spoken.iter().enumerate() {
            let rel = format!("features/{i:06}.feat");
            formats::write_features_binary(&dir.join(&rel), &w.frames.cast::<f32>())?;
            records.push(formats::ManifestRecord {
                utterance_id: w.utterance_id.clone(),
                position: w.position,
                features: rel,
                word: w.word_label.map(|k| self.lexicon.surface(k).to_owned()),
                speaker: w.speaker.clone(),
            });
        }
        formats::write_manifest(&dir.join("manifest.jsonl"), &records)?;
        self.lexicon.save(&dir.join("lexicon.txt"))
    }
}

pub fn load_corpus<T: Real>(manifest_path: &Path, lexicon_path: &Path) -> Result<Corpus<T>> {
    let lexicon = Lexicon::load(lexicon_path)?;
    let records = formats::read_manifest(manifest_path)?;
    if records.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut spoken = Vec::with_capacity(records.len());
    let mut dim = None;
    for (i, rec) in records.into_iter().enumerate() {
        let row = i + 1;
        let fpath = {
            let p = Path::new(&rec.features);
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        };
        let frames = formats::read_features(&fpath).map_err(|e| match e {
            Error::Io { source, .. } => Error::Manifest { row, message: format!("{}: {source}", fpath.display()) },
            other => other,
        })?;
        if frames.rows() == 0 {
            return Err(Error::Manifest { row, message: format!("{} has no frames", fpath.display()) });
        }
        match dim {
            None => dim = Some(frames.cols()),
            Some(d) if d != frames.cols() => {
                return Err(Error::DimensionMismatch { row, expected: d, found: frames.cols() })
            }
            _ => {}
        }
        if !frames.all_finite() {
            return Err(Error::NonFinite { row, path: fpath });
        }
        let word_label = match &rec.word {
            Some(w) => Some(
                lexicon
                    .lookup(w)
                    .ok_or_else(|| Error::Manifest { row, message: format!("word `{w}` is not in the lexicon") })?,
            ),
            None => None,
        };
        spoken.push(SpokenWord {
            frames: frames.cast(),
            utterance_id: rec.utterance_id,
            position: rec.position,
            word_label,
            speaker: rec.speaker,
        });
    }
    Corpus::new(spoken, lexicon)
}

/// Per-utterance, per-dimension standardization (population variance).
///
/// Zero-variance dimensions and single-frame utterances are only mean-centered.
pub fn apply_cmvn<T: Real>(corpus: &Corpus<T>) -> Corpus<T> {
    let mut out = corpus.clone();
    let d = corpus.feature_dim();
    for utt in &corpus.utterances {
        let mut n = 0usize;
        let mut mean = vec![0.0f64; d];
        for &i in &utt.words {
            let f = &corpus.spoken[i].frames;
            for r in 0..f.rows() {
                for (m, &v) in mean.iter_mut().zip(f.row(r)) {
                    *m += v.to_f64_lossy();
                }
            }
            n += f.rows();
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut var = vec![0.0f64; d];
        for &i in &utt.words {
            let f = &corpus.spoken[i].frames;
            for r in 0..f.rows() {
                for ((s, &v), &m) in var.iter_mut().zip(f.row(r)).zip(&mean) {
                    let c = v.to_f64_lossy() - m;
                    *s += c * c;
                }
            }
        }
        if n < 2 {
            log::warn!("utterance {} has a single frame; variance undefined, mean-centering only", utt.id);
        }
        let scale: Vec<f64> = var
            .iter()
            .map(|&s| {
                let v = s / n as f64;
                if n < 2 || v <= 1e-24 {
                    1.0
                } else {
                    1.0 / v.sqrt()
                }
            })
            .collect();
        for &i in &utt.words {
            let f = &mut out.spoken[i].frames;
            for r in 0..f.rows() {
                for (c, v) in f.row_mut(r).iter_mut().enumerate() {
                    *v = T::from_f64_lossy((v.to_f64_lossy() - mean[c]) * scale[c]);
                }
            }
        }
    }
    out
}

/// The annotated subset used for every cross-domain loss.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairSet {
    /// `(spoken index, word id)` pairs.
    pub pairs: Vec<(usize, usize)>,
}

impl PairSet {
    pub fn empty() -> Self {
        Self { pairs: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn contains_spoken(&self, i: usize) -> bool {
        self.pairs.iter().any(|&(s, _)| s == i)
    }
}

/// Nested token-level selection: a seeded permutation of the annotated tokens,
/// truncated to `n_paired`. Smaller requests are prefixes of larger ones.
pub fn build_pair_set<T: Real>(corpus: &Corpus<T>, n_paired: usize, seed: u64) -> Result<PairSet> {
    let mut annotated = corpus.annotated_indices();
    if n_paired > annotated.len() {
        return Err(Error::TooManyPairs { requested: n_paired, available: annotated.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    annotated.shuffle(&mut rng);
    let pairs = annotated[..n_paired].iter().map(|&i| (i, corpus.spoken[i].word_label.unwrap())).collect();
    Ok(PairSet { pairs })
}

/// Keeps whole utterances, in a seeded shuffled order, until the duration
/// budget is reached. Retained utterances keep their original order.
pub fn subsample_speech<T: Real>(corpus: &Corpus<T>, hours: f64, frame_period: f64, seed: u64) -> Result<Corpus<T>> {
    if !(hours > 0.0) {
        return Err(Error::InvalidArgument(format!("speech budget must be positive, got {hours} hr")));
    }
    if !(frame_period > 0.0) {
        return Err(Error::InvalidArgument(format!("frame period must be positive, got {frame_period}")));
    }
    let total = corpus.duration_hours(frame_period);
    if hours > total * (1.0 + 1e-9) {
        return Err(Error::InvalidArgument(format!("requested {hours} hr but the corpus holds only {total:.6} hr")));
    }
    if hours >= total * (1.0 - 1e-12) {
        return Ok(corpus.clone());
    }
    let budget_frames = hours * 3600.0 / frame_period;
    let mut order: Vec<usize> = (0..corpus.utterances.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut kept = Vec::new();
    let mut frames = 0usize;
    for u in order {
        if frames as f64 >= budget_frames {
            break;
        }
        frames += corpus.utterances[u].words.iter().map(|&i| corpus.spoken[i].frames.rows()).sum::<usize>();
        kept.push(u);
    }
    kept.sort_unstable();
    let spoken = kept
        .iter()
        .flat_map(|&u| corpus.utterances[u].words.iter().map(|&i| corpus.spoken[i].clone()))
        .collect();
    Corpus::new(spoken, corpus.lexicon.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lexicon() -> Lexicon {
        Lexicon::from_text("a\tx y\nb\ty z\nc\tz\n").unwrap()
    }

    fn word(frames: Vec<Vec<f64>>, utt: &str, pos: usize, label: Option<usize>) -> SpokenWord<f64> {
        SpokenWord {
            frames: Matrix::from_rows(&frames),
            utterance_id: utt.into(),
            position: pos,
            word_label: label,
            speaker: None,
        }
    }

    fn small_corpus() -> Corpus<f64> {
        let spoken = vec![
            word(vec![vec![1.0, 2.0], vec![3.0, 2.0]], "u1", 0, Some(0)),
            word(vec![vec![0.0, 2.0]], "u1", 1, Some(1)),
            word(vec![vec![5.0, 1.0], vec![4.0, 0.0], vec![2.0, 2.0]], "u2", 0, Some(2)),
            word(vec![vec![1.0, 1.0]], "u2", 1, None),
            word(vec![vec![7.0, 1.0], vec![6.0, 0.5]], "u3", 0, Some(0)),
        ];
        Corpus::new(spoken, lexicon()).unwrap()
    }

    #[test]
    fn lexicon_infers_inventory_in_order() {
        let lex = lexicon();
        assert_eq!(lex.units(), &["x", "y", "z"]);
        assert_eq!(lex.word(1).units, vec![1, 2]);
        assert_eq!(lex.lookup("c"), Some(2));
    }

    #[test]
    fn lexicon_rejects_unknown_declared_symbol_and_duplicates() {
        assert!(Lexicon::from_text("#inventory x y\na\tx q\n").is_err());
        assert!(Lexicon::from_text("a\tx\na\ty\n").is_err());
    }

    #[test]
    fn cmvn_two_frame_example() {
        let lex = Lexicon::from_text("a\tx\n").unwrap();
        let c = Corpus::new(vec![word(vec![vec![1.0], vec![3.0]], "u", 0, Some(0))], lex).unwrap();
        let n = apply_cmvn(&c);
        assert_eq!(n.word(0).frames.as_slice(), &[-1.0, 1.0]);
    }

    #[test]
    fn cmvn_constant_dimension_becomes_zero() {
        let lex = Lexicon::from_text("a\tx\n").unwrap();
        let c = Corpus::new(
            vec![
                word(vec![vec![4.0, 1.0], vec![4.0, 2.0]], "u", 0, Some(0)),
                word(vec![vec![4.0, 6.0]], "u", 1, Some(0)),
            ],
            lex,
        )
        .unwrap();
        let n = apply_cmvn(&c);
        for w in n.spoken() {
            for r in 0..w.frames.rows() {
                assert_eq!(w.frames[(r, 0)], 0.0);
            }
        }
    }

    #[test]
    fn cmvn_standardizes_each_utterance() {
        let n = apply_cmvn(&small_corpus());
        for utt in n.utterances() {
            let n = &n;
            let frames: Vec<&[f64]> =
                utt.words.iter().flat_map(|&i| (0..n.word(i).len()).map(move |r| n.word(i).frames.row(r))).collect();
            for d in 0..2 {
                let m: f64 = frames.iter().map(|f| f[d]).sum::<f64>() / frames.len() as f64;
                let v: f64 = frames.iter().map(|f| (f[d] - m).powi(2)).sum::<f64>() / frames.len() as f64;
                assert!(m.abs() < 1e-9);
                assert!((v - 1.0).abs() < 1e-6 || v.abs() < 1e-12, "utt {} dim {d} var {v}", utt.id);
            }
        }
    }

    #[test]
    fn cmvn_single_frame_utterance_is_mean_centered() {
        let lex = Lexicon::from_text("a\tx\n").unwrap();
        let c = Corpus::new(vec![word(vec![vec![2.5, -1.0]], "u", 0, Some(0))], lex).unwrap();
        assert_eq!(apply_cmvn(&c).word(0).frames.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn corpus_groups_and_orders_utterances() {
        let c = small_corpus();
        assert_eq!(c.len(), 5);
        assert_eq!(c.utterances().len(), 3);
        assert_eq!(c.utterances()[1].words, vec![2, 3]);
        assert_eq!(c.annotated_indices().len(), 4);
        assert_eq!(c.transcripts(), vec![vec![0, 1], vec![0]]);
    }

    #[test]
    fn pair_set_bounds_and_determinism() {
        let c = small_corpus();
        let all = build_pair_set(&c, 4, 1).unwrap();
        let mut got: Vec<usize> = all.pairs.iter().map(|p| p.0).collect();
        got.sort();
        assert_eq!(got, vec![0, 1, 2, 4]);
        assert_eq!(build_pair_set(&c, 2, 9).unwrap(), build_pair_set(&c, 2, 9).unwrap());
        let err = build_pair_set(&c, 5, 1).unwrap_err().to_string();
        assert!(err.contains('5') && err.contains('4'), "{err}");
    }

    #[test]
    fn subsample_full_budget_is_identity_and_rejects_nonpositive() {
        let c = small_corpus();
        let full = c.duration_hours(DEFAULT_FRAME_PERIOD);
        assert_eq!(subsample_speech(&c, full, DEFAULT_FRAME_PERIOD, 3).unwrap(), c);
        assert!(subsample_speech(&c, 0.0, DEFAULT_FRAME_PERIOD, 3).is_err());
        assert!(subsample_speech(&c, full * 2.0, DEFAULT_FRAME_PERIOD, 3).is_err());
    }
}
