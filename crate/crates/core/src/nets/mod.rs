//! The three encoders (audio phonetic, speaker, text) and two decoders (audio,
//! text), built on masked GRU layers.
//!
//! Encoders are bidirectional GRU stacks; the fixed-size vector is a linear
//! projection of the concatenated final states of both directions of the top
//! layer. Decoders are unidirectional GRU stacks whose initial states come from
//! a linear map of the conditioning vector, which is also appended to every
//! step's input.

pub mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::corpus::{SpokenWord, TextWord};
use crate::error::{Error, Result};
use crate::params::{Binder, Grads, ParamId, ParamStore};
use crate::scalar::Real;
use crate::tensor::Matrix;

pub use checkpoint::{load_model, save_model};

/// Weight initialization half-width.
pub const INIT_SCALE: f64 = 0.08;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub feature_dim: usize,
    pub inventory_size: usize,
    pub encoder_hidden: usize,
    pub audio_decoder_hidden: usize,
    pub text_decoder_hidden: usize,
    pub layers: usize,
    pub phonetic_dim: usize,
    pub speaker_dim: usize,
    pub embedding_dim: usize,
}

impl NetConfig {
    /// Full-size configuration: 256-unit encoders, 512/256-unit decoders.
    pub fn new(feature_dim: usize, inventory_size: usize) -> Self {
        Self {
            feature_dim,
            inventory_size,
            encoder_hidden: 256,
            audio_decoder_hidden: 512,
            text_decoder_hidden: 256,
            layers: 1,
            phonetic_dim: 256,
            speaker_dim: 256,
            embedding_dim: 64,
        }
    }

    /// Uniform small configuration, handy for tests and desk-scale runs.
    pub fn small(feature_dim: usize, inventory_size: usize, hidden: usize, vector_dim: usize) -> Self {
        Self {
            feature_dim,
            inventory_size,
            encoder_hidden: hidden,
            audio_decoder_hidden: hidden,
            text_decoder_hidden: hidden,
            layers: 1,
            phonetic_dim: vector_dim,
            speaker_dim: vector_dim,
            embedding_dim: vector_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            self.feature_dim,
            self.inventory_size,
            self.encoder_hidden,
            self.audio_decoder_hidden,
            self.text_decoder_hidden,
            self.phonetic_dim,
            self.speaker_dim,
            self.embedding_dim,
        ];
        if sizes.contains(&0) {
            return Err(Error::InvalidArgument("all network sizes must be at least 1".into()));
        }
        if !(1..=3).contains(&self.layers) {
            return Err(Error::InvalidArgument(format!("layer count must be 1, 2 or 3, got {}", self.layers)));
        }
        Ok(())
    }

    /// Decoder output classes: units plus EOS.
    pub fn output_classes(&self) -> usize {
        self.inventory_size + 1
    }

    pub fn eos(&self) -> usize {
        self.inventory_size
    }

    pub fn bos(&self) -> usize {
        self.inventory_size
    }
}

/// Fixed-size embedding of a word's phonetic structure.
#[derive(Debug, Clone, PartialEq)]
pub struct PhoneticVector<T>(pub Vec<T>);

/// Fixed-size embedding of a spoken word's speaker/channel characteristics.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerVector<T>(pub Vec<T>);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AudioEncoder {
    Phonetic,
    Speaker,
}

/// Which sub-network a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Component {
    AudioPhoneticEncoder,
    SpeakerEncoder,
    TextEncoder,
    AudioDecoder,
    TextDecoder,
    Embedding,
}

impl Component {
    fn prefix(self) -> &'static str {
        match self {
            Component::AudioPhoneticEncoder => "ep.",
            Component::SpeakerEncoder => "es.",
            Component::TextEncoder => "et.",
            Component::AudioDecoder => "da.",
            Component::TextDecoder => "dt.",
            Component::Embedding => "emb",
        }
    }

    pub fn of_name(name: &str) -> Option<Self> {
        [
            Component::AudioPhoneticEncoder,
            Component::SpeakerEncoder,
            Component::TextEncoder,
            Component::AudioDecoder,
            Component::TextDecoder,
            Component::Embedding,
        ]
        .into_iter()
        .find(|c| name.starts_with(c.prefix()))
    }

    /// True for the audio autoencoder (E_p, E_s, D_a).
    pub fn is_audio_side(self) -> bool {
        matches!(self, Component::AudioPhoneticEncoder | Component::SpeakerEncoder | Component::AudioDecoder)
    }
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Gru {
    wx: ParamId,
    bx: ParamId,
    wh: ParamId,
    bh: ParamId,
}

#[derive(Debug, Clone)]
struct Encoder {
    layers: Vec<(Gru, Gru)>,
    proj: Linear,
}

#[derive(Debug, Clone)]
struct Decoder {
    init: Vec<Linear>,
    layers: Vec<Gru>,
    out: Linear,
}

#[derive(Debug, Clone)]
struct Layout {
    ep: Encoder,
    es: Encoder,
    et: Encoder,
    da: Decoder,
    dt: Decoder,
    embedding: ParamId,
}

struct Builder<'a, T: Real> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<T: Real> Builder<'_, T> {
    fn weight(&mut self, name: String, rows: usize, cols: usize) -> ParamId {
        self.store.add_uniform(&name, rows, cols, INIT_SCALE, &mut self.rng)
    }

    fn bias(&mut self, name: String, cols: usize) -> ParamId {
        self.store.add_zeros(&name, 1, cols)
    }

    fn linear(&mut self, name: &str, inp: usize, out: usize) -> Linear {
        Linear { w: self.weight(format!("{name}.w"), inp, out), b: self.bias(format!("{name}.b"), out) }
    }

    fn gru(&mut self, name: &str, inp: usize, hidden: usize) -> Gru {
        Gru {
            wx: self.weight(format!("{name}.wx"), inp, 3 * hidden),
            bx: self.bias(format!("{name}.bx"), 3 * hidden),
            wh: self.weight(format!("{name}.wh"), hidden, 3 * hidden),
            bh: self.bias(format!("{name}.bh"), 3 * hidden),
        }
    }

    fn encoder(&mut self, name: &str, inp: usize, hidden: usize, layers: usize, out: usize) -> Encoder {
        let mut ls = Vec::with_capacity(layers);
        for l in 0..layers {
            let i = if l == 0 { inp } else { 2 * hidden };
            ls.push((self.gru(&format!("{name}.l{l}.fwd"), i, hidden), self.gru(&format!("{name}.l{l}.bwd"), i, hidden)));
        }
        Encoder { layers: ls, proj: self.linear(&format!("{name}.proj"), 2 * hidden, out) }
    }

    /// Layer 0 input is `[step input | conditioning]`.
    fn decoder(&mut self, name: &str, step_in: usize, cond: usize, hidden: usize, layers: usize, out: usize) -> Decoder {
        let init = (0..layers).map(|l| self.linear(&format!("{name}.init{l}"), cond, hidden)).collect();
        let layers = (0..layers)
            .map(|l| {
                let i = if l == 0 { step_in + cond } else { hidden };
                self.gru(&format!("{name}.l{l}"), i, hidden)
            })
            .collect();
        Decoder { init, layers, out: self.linear(&format!("{name}.out"), hidden, out) }
    }
}

fn build_layout<T: Real>(cfg: &NetConfig, store: &mut ParamStore<T>, seed: u64) -> Layout {
    let mut b = Builder { store, rng: ChaCha8Rng::seed_from_u64(seed) };
    let (d, p, q, e) = (cfg.feature_dim, cfg.phonetic_dim, cfg.speaker_dim, cfg.embedding_dim);
    let embedding = b.weight("emb".into(), cfg.inventory_size + 1, e);
    let ep = b.encoder("ep", d, cfg.encoder_hidden, cfg.layers, p);
    let es = b.encoder("es", d, cfg.encoder_hidden, cfg.layers, q);
    let et = b.encoder("et", e, cfg.encoder_hidden, cfg.layers, p);
    let da = b.decoder("da", d, p + q, cfg.audio_decoder_hidden, cfg.layers, d);
    let dt = b.decoder("dt", e, p, cfg.text_decoder_hidden, cfg.layers, cfg.output_classes());
    Layout { ep, es, et, da, dt, embedding }
}

/// Encoders, decoders and their parameters.
#[derive(Debug, Clone)]
pub struct Model<T: Real> {
    config: NetConfig,
    params: ParamStore<T>,
    layout: Layout,
}

impl<T: Real> PartialEq for Model<T> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

/// Maximum items per forward pass in the batched evaluation helpers.
const EVAL_CHUNK: usize = 128;

impl<T: Real> Model<T> {
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let layout = build_layout(&config, &mut params, seed);
        Ok(Self { config, params, layout })
    }

    /// Rebuilds a model from named tensors, checking names and shapes.
    pub fn from_tensors(config: NetConfig, tensors: Vec<(String, Matrix<T>)>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        if tensors.len() != model.params.len() {
            return Err(Error::ConfigMismatch(format!(
                "expected {} tensors, found {}",
                model.params.len(),
                tensors.len()
            )));
        }
        for (name, m) in tensors {
            let id = model
                .params
                .find(&name)
                .ok_or_else(|| Error::ConfigMismatch(format!("unexpected tensor `{name}`")))?;
            if model.params.get(id).shape() != m.shape() {
                return Err(Error::ConfigMismatch(format!(
                    "tensor `{name}` has shape {:?}, config implies {:?}",
                    m.shape(),
                    model.params.get(id).shape()
                )));
            }
            *model.params.get_mut(id) = m;
        }
        Ok(model)
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn component(&self, id: ParamId) -> Component {
        Component::of_name(self.params.name(id)).expect("every parameter has a component prefix")
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        let tensors = self.params.iter().map(|(n, m)| (n.to_owned(), m.cast())).collect();
        Model::from_tensors(self.config.clone(), tensors).expect("same config")
    }

    fn check_frames(&self, frames: &Matrix<T>) -> Result<()> {
        if frames.rows() == 0 {
            return Err(Error::InvalidArgument("spoken word has no frames".into()));
        }
        if frames.cols() != self.config.feature_dim {
            return Err(Error::DimensionMismatch { row: 0, expected: self.config.feature_dim, found: frames.cols() });
        }
        Ok(())
    }

    fn check_units(&self, units: &[usize]) -> Result<()> {
        if units.is_empty() {
            return Err(Error::InvalidArgument("text word has no units".into()));
        }
        if let Some(&u) = units.iter().find(|&&u| u >= self.config.inventory_size) {
            return Err(Error::InvalidArgument(format!(
                "unit id {u} outside inventory of size {}",
                self.config.inventory_size
            )));
        }
        Ok(())
    }

    pub fn encode_audio_batch(&self, which: AudioEncoder, items: &[&Matrix<T>]) -> Result<Matrix<T>> {
        for m in items {
            self.check_frames(m)?;
        }
        let mut parts = Vec::new();
        for chunk in items.chunks(EVAL_CHUNK) {
            let g = Graph::new();
            let s = Session::new(&g, self);
            let input = s.audio_input(chunk);
            let v = s.encode_audio(which, &input);
            parts.push(g.value(v));
        }
        let dim = match which {
            AudioEncoder::Phonetic => self.config.phonetic_dim,
            AudioEncoder::Speaker => self.config.speaker_dim,
        };
        if parts.is_empty() {
            return Ok(Matrix::zeros(0, dim));
        }
        Ok(Matrix::vstack(&parts.iter().collect::<Vec<_>>()))
    }

    pub fn encode_text_batch(&self, seqs: &[&[usize]]) -> Result<Matrix<T>> {
        for s in seqs {
            self.check_units(s)?;
        }
        let mut parts = Vec::new();
        for chunk in seqs.chunks(EVAL_CHUNK) {
            let g = Graph::new();
            let s = Session::new(&g, self);
            let v = s.encode_text_ids(chunk);
            parts.push(g.value(v));
        }
        if parts.is_empty() {
            return Ok(Matrix::zeros(0, self.config.phonetic_dim));
        }
        Ok(Matrix::vstack(&parts.iter().collect::<Vec<_>>()))
    }

    pub fn encode_audio_phonetic(&self, x: &SpokenWord<T>) -> Result<PhoneticVector<T>> {
        let m = self.encode_audio_batch(AudioEncoder::Phonetic, &[&x.frames])?;
        Ok(PhoneticVector(m.into_vec()))
    }

    pub fn encode_speaker(&self, x: &SpokenWord<T>) -> Result<SpeakerVector<T>> {
        let m = self.encode_audio_batch(AudioEncoder::Speaker, &[&x.frames])?;
        Ok(SpeakerVector(m.into_vec()))
    }

    /// Depends only on the unit sequence.
    pub fn encode_text(&self, y: &TextWord) -> Result<PhoneticVector<T>> {
        let m = self.encode_text_batch(&[&y.units])?;
        Ok(PhoneticVector(m.into_vec()))
    }

    pub fn decode_audio(&self, vp: &PhoneticVector<T>, vs: &SpeakerVector<T>, frames: usize) -> Result<Matrix<T>> {
        if frames == 0 {
            return Err(Error::InvalidArgument("requested zero output frames".into()));
        }
        self.check_vector(&vp.0, self.config.phonetic_dim, "phonetic")?;
        self.check_vector(&vs.0, self.config.speaker_dim, "speaker")?;
        let g = Graph::new();
        let s = Session::new(&g, self);
        let p = g.constant(Matrix::row_vector(vp.0.clone()));
        let q = g.constant(Matrix::row_vector(vs.0.clone()));
        let steps = s.decode_audio(p, q, frames);
        let rows: Vec<Matrix<T>> = steps.iter().map(|&v| g.value(v)).collect();
        Ok(Matrix::vstack(&rows.iter().collect::<Vec<_>>()))
    }

    /// Per-step distributions over units + EOS. With a teacher, exactly
    /// `len + 1` steps; otherwise greedy until EOS or `max_len` steps.
    pub fn decode_text(&self, vp: &PhoneticVector<T>, teacher: Option<&TextWord>, max_len: usize) -> Result<TextDecoding<T>> {
        if max_len == 0 {
            return Err(Error::InvalidArgument("max_len must be at least 1".into()));
        }
        self.check_vector(&vp.0, self.config.phonetic_dim, "phonetic")?;
        let g = Graph::new();
        let s = Session::new(&g, self);
        let p = g.constant(Matrix::row_vector(vp.0.clone()));
        let (logp, symbols) = match teacher {
            Some(y) => {
                self.check_units(&y.units)?;
                let steps = s.decode_text_teacher(p, &[&y.units]);
                let symbols = steps.iter().map(|&v| argmax(g.value(v).row(0))).collect();
                (steps, symbols)
            }
            None => {
                let free = s.decode_text_greedy(p, max_len, 0);
                let mut syms = free.symbols[0].clone();
                if free.ended[0] {
                    syms.push(self.config.eos());
                }
                (free.log_probs, syms)
            }
        };
        let distributions = logp.iter().map(|&v| g.value(v).row(0).iter().map(|x| x.exp()).collect()).collect();
        Ok(TextDecoding { distributions, symbols })
    }

    /// Greedy transcription of a phonetic vector into unit ids (EOS stripped).
    pub fn greedy_units(&self, vp: &PhoneticVector<T>, max_len: usize) -> Result<Vec<usize>> {
        let d = self.decode_text(vp, None, max_len)?;
        Ok(d.symbols.into_iter().filter(|&s| s != self.config.eos()).collect())
    }

    fn check_vector(&self, v: &[T], dim: usize, what: &str) -> Result<()> {
        if v.len() != dim {
            return Err(Error::InvalidArgument(format!("{what} vector has length {}, expected {dim}", v.len())));
        }
        Ok(())
    }

    /// Applies `-lr * grad` style updates; used by optimizers.
    pub fn apply(&mut self, f: impl FnMut(ParamId, &mut Matrix<T>)) {
        let mut f = f;
        let ids: Vec<ParamId> = self.params.ids().collect();
        for id in ids {
            f(id, self.params.get_mut(id));
        }
    }

    pub fn zero_grads(&self) -> Grads<T> {
        Grads::zeros_like(&self.params)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextDecoding<T> {
    /// One distribution over `S + 1` symbols per emitted step.
    pub distributions: Vec<Vec<T>>,
    /// Argmax symbol per step (EOS = `S`).
    pub symbols: Vec<usize>,
}

pub(crate) fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Padded, time-major stacked sequence batch: row `t * batch + r` is step `t`
/// of item `r`.
#[derive(Debug, Clone)]
pub struct SeqInput {
    pub x: Var,
    pub lengths: Vec<usize>,
}

impl SeqInput {
    pub fn batch(&self) -> usize {
        self.lengths.len()
    }

    pub fn max_len(&self) -> usize {
        self.lengths.iter().copied().max().unwrap_or(0)
    }
}

/// Result of free-running greedy text decoding.
pub struct FreeDecode<T> {
    /// Per-step `B×(S+1)` log-probabilities.
    pub log_probs: Vec<Var>,
    /// Per-step `B×S` unit probabilities (EOS column dropped).
    pub unit_probs: Vec<Var>,
    /// Per row, emitted unit ids (EOS excluded).
    pub symbols: Vec<Vec<usize>>,
    /// Per row, whether EOS was emitted.
    pub ended: Vec<bool>,
    _marker: std::marker::PhantomData<T>,
}

/// A model bound into one graph.
pub struct Session<'g, 'p, T: Real> {
    pub g: &'g Graph<'p, T>,
    bind: Binder<'p, T>,
    model: &'p Model<T>,
}

impl<'g, 'p, T: Real> Session<'g, 'p, T> {
    pub fn new(g: &'g Graph<'p, T>, model: &'p Model<T>) -> Self {
        Self { g, bind: Binder::new(&model.params), model }
    }

    pub fn model(&self) -> &'p Model<T> {
        self.model
    }

    pub fn config(&self) -> &'p NetConfig {
        &self.model.config
    }

    pub fn binder(&self) -> &Binder<'p, T> {
        &self.bind
    }

    fn p(&self, id: ParamId) -> Var {
        self.bind.var(self.g, id)
    }

    fn linear(&self, l: Linear, x: Var) -> Var {
        self.g.affine(x, self.p(l.w), self.p(l.b))
    }

    /// Stacks feature matrices into a padded constant input.
    pub fn audio_input(&self, items: &[&Matrix<T>]) -> SeqInput {
        let lengths: Vec<usize> = items.iter().map(|m| m.rows()).collect();
        let b = items.len();
        let t_max = lengths.iter().copied().max().unwrap_or(0);
        let d = self.config().feature_dim;
        let mut x = Matrix::zeros(t_max * b, d);
        for (r, m) in items.iter().enumerate() {
            for t in 0..m.rows() {
                x.row_mut(t * b + r).copy_from_slice(m.row(t));
            }
        }
        SeqInput { x: self.g.variable_or_constant(x, false), lengths }
    }

    /// Same as [`Session::audio_input`] but the input receives gradients.
    pub fn audio_input_var(&self, items: &[&Matrix<T>]) -> SeqInput {
        let c = self.audio_input(items);
        let m = self.g.value(c.x);
        SeqInput { x: self.g.variable(m), lengths: c.lengths }
    }

    /// Time-major stack of per-step `B×D` nodes.
    pub fn stack_steps(&self, steps: &[Var], lengths: Vec<usize>) -> SeqInput {
        let t_max = lengths.iter().copied().max().unwrap_or(0);
        SeqInput { x: self.g.concat_rows(&steps[..t_max]), lengths }
    }

    fn run_encoder(&self, enc: &Encoder, input: &SeqInput) -> Var {
        let g = self.g;
        let b = input.batch();
        let t_max = input.max_len();
        let hidden = self.g.shape(self.p(enc.layers[0].0.wh)).0;
        let zeros = g.constant(Matrix::zeros(b, hidden));
        let masks: Vec<Vec<bool>> = (0..t_max).map(|t| input.lengths.iter().map(|&l| t < l).collect()).collect();
        let mut x = input.x;
        let mut finals = (zeros, zeros);
        for (li, (fwd, bwd)) in enc.layers.iter().enumerate() {
            let last = li + 1 == enc.layers.len();
            let run = |cell: &Gru, reverse: bool| -> (Var, Vec<Var>) {
                let gx_all = g.affine(x, self.p(cell.wx), self.p(cell.bx));
                let (wh, bh) = (self.p(cell.wh), self.p(cell.bh));
                let mut h = zeros;
                let mut states = vec![zeros; t_max];
                let order: Box<dyn Iterator<Item = usize>> =
                    if reverse { Box::new((0..t_max).rev()) } else { Box::new(0..t_max) };
                for t in order {
                    let gx = g.slice_rows(gx_all, t * b, (t + 1) * b);
                    h = g.gru_step(gx, h, wh, bh, &masks[t]);
                    if !last {
                        states[t] = h;
                    }
                }
                (h, states)
            };
            let (hf, sf) = run(fwd, false);
            let (hb, sb) = run(bwd, true);
            if last {
                finals = (hf, hb);
            } else {
                let per_step: Vec<Var> = (0..t_max).map(|t| g.concat_cols(&[sf[t], sb[t]])).collect();
                x = g.concat_rows(&per_step);
            }
        }
        let top = g.concat_cols(&[finals.0, finals.1]);
        self.linear(enc.proj, top)
    }

    pub fn encode_audio(&self, which: AudioEncoder, input: &SeqInput) -> Var {
        let enc = match which {
            AudioEncoder::Phonetic => &self.model.layout.ep,
            AudioEncoder::Speaker => &self.model.layout.es,
        };
        self.run_encoder(enc, input)
    }

    /// Embedding lookup for padded unit sequences (padding uses the BOS row and
    /// is masked out by `lengths`).
    pub fn text_input(&self, seqs: &[&[usize]]) -> SeqInput {
        let b = seqs.len();
        let lengths: Vec<usize> = seqs.iter().map(|s| s.len()).collect();
        let t_max = lengths.iter().copied().max().unwrap_or(0);
        let pad = self.config().bos();
        let mut ids = Vec::with_capacity(t_max * b);
        for t in 0..t_max {
            for s in seqs {
                ids.push(s.get(t).copied().unwrap_or(pad));
            }
        }
        let emb = self.p(self.model.layout.embedding);
        SeqInput { x: self.g.gather_rows(emb, &ids), lengths }
    }

    /// Text encoder input from per-step `B×S` unit weight vectors (one-hot or
    /// straight-through), mapped through the embedding table.
    pub fn text_input_from_weights(&self, steps: &[Var], lengths: Vec<usize>) -> SeqInput {
        let s = self.config().inventory_size;
        let emb = self.p(self.model.layout.embedding);
        let unit_rows = self.g.slice_rows(emb, 0, s);
        let t_max = lengths.iter().copied().max().unwrap_or(0);
        let stacked = self.g.concat_rows(&steps[..t_max]);
        SeqInput { x: self.g.matmul(stacked, unit_rows), lengths }
    }

    pub fn encode_text_input(&self, input: &SeqInput) -> Var {
        self.run_encoder(&self.model.layout.et, input)
    }

    pub fn encode_text_ids(&self, seqs: &[&[usize]]) -> Var {
        let input = self.text_input(seqs);
        self.encode_text_input(&input)
    }

    fn decoder_init(&self, dec: &Decoder, cond: Var) -> Vec<Var> {
        dec.init.iter().map(|&l| self.linear(l, cond)).collect()
    }

    /// Splits layer-0 input weights into the step-input block and a
    /// precomputed conditioning term (`cond · W_cond + b`).
    fn split_input(&self, cell: &Gru, step_dim: usize, cond: Var) -> (Var, Var) {
        let wx = self.p(cell.wx);
        let rows = self.g.shape(wx).0;
        let w_step = self.g.slice_rows(wx, 0, step_dim);
        let w_cond = self.g.slice_rows(wx, step_dim, rows);
        (w_step, self.g.affine(cond, w_cond, self.p(cell.bx)))
    }

    fn decoder_step(&self, dec: &Decoder, w_step: Var, cond_term: Var, step_in: Var, states: &mut [Var], active: &[bool]) -> Var {
        let g = self.g;
        let gx0 = g.add(g.matmul(step_in, w_step), cond_term);
        let c0 = dec.layers[0];
        states[0] = g.gru_step(gx0, states[0], self.p(c0.wh), self.p(c0.bh), active);
        for l in 1..dec.layers.len() {
            let c = dec.layers[l];
            let gx = g.affine(states[l - 1], self.p(c.wx), self.p(c.bx));
            states[l] = g.gru_step(gx, states[l], self.p(c.wh), self.p(c.bh), active);
        }
        self.linear(dec.out, states[dec.layers.len() - 1])
    }

    /// Autoregressive reconstruction of `frames` steps from `(v_p, v_s)`; the
    /// first step input is a zero frame.
    pub fn decode_audio(&self, vp: Var, vs: Var, frames: usize) -> Vec<Var> {
        let g = self.g;
        let dec = &self.model.layout.da;
        let d = self.config().feature_dim;
        let cond = g.concat_cols(&[vp, vs]);
        let b = g.shape(cond).0;
        let mut states = self.decoder_init(dec, cond);
        let (w_step, cond_term) = self.split_input(&dec.layers[0], d, cond);
        let active = vec![true; b];
        let mut prev = g.constant(Matrix::zeros(b, d));
        let mut out = Vec::with_capacity(frames);
        for _ in 0..frames {
            let y = self.decoder_step(dec, w_step, cond_term, prev, &mut states, &active);
            out.push(y);
            prev = y;
        }
        out
    }

    /// Teacher-forced text decoding: inputs BOS, y₁…y_L; returns per-step
    /// `B×(S+1)` log-probabilities for `max(L) + 1` steps.
    pub fn decode_text_teacher(&self, vp: Var, targets: &[&[usize]]) -> Vec<Var> {
        let g = self.g;
        let dec = &self.model.layout.dt;
        let b = targets.len();
        let bos = self.config().bos();
        let steps = targets.iter().map(|t| t.len()).max().unwrap_or(0) + 1;
        let mut ids = Vec::with_capacity(steps * b);
        for t in 0..steps {
            for y in targets {
                ids.push(if t == 0 { bos } else { y.get(t - 1).copied().unwrap_or(bos) });
            }
        }
        let emb = self.p(self.model.layout.embedding);
        let inputs = g.gather_rows(emb, &ids);
        let e = self.config().embedding_dim;
        let mut states = self.decoder_init(dec, vp);
        let (w_step, cond_term) = self.split_input(&dec.layers[0], e, vp);
        let step_proj = g.matmul(inputs, w_step);
        let c0 = dec.layers[0];
        let active = vec![true; b];
        let mut out = Vec::with_capacity(steps);
        for t in 0..steps {
            let gx0 = g.add(g.slice_rows(step_proj, t * b, (t + 1) * b), cond_term);
            states[0] = g.gru_step(gx0, states[0], self.p(c0.wh), self.p(c0.bh), &active);
            for l in 1..dec.layers.len() {
                let c = dec.layers[l];
                let gx = g.affine(states[l - 1], self.p(c.wx), self.p(c.bx));
                states[l] = g.gru_step(gx, states[l], self.p(c.wh), self.p(c.bh), &active);
            }
            let logits = self.linear(dec.out, states[dec.layers.len() - 1]);
            out.push(g.log_softmax(logits));
        }
        out
    }

    /// Greedy free-running decoding for up to `max_len` steps. When
    /// `min_units > 0`, EOS is suppressed until that many units are emitted.
    pub fn decode_text_greedy(&self, vp: Var, max_len: usize, min_units: usize) -> FreeDecode<T> {
        let g = self.g;
        let dec = &self.model.layout.dt;
        let cfg = self.config();
        let (s, e, eos) = (cfg.inventory_size, cfg.embedding_dim, cfg.eos());
        let b = g.shape(vp).0;
        let emb = self.p(self.model.layout.embedding);
        let mut states = self.decoder_init(dec, vp);
        let (w_step, cond_term) = self.split_input(&dec.layers[0], e, vp);
        let mut prev_ids = vec![cfg.bos(); b];
        let mut symbols = vec![Vec::new(); b];
        let mut ended = vec![false; b];
        let mut log_probs = Vec::new();
        let mut unit_probs = Vec::new();
        for _ in 0..max_len {
            if ended.iter().all(|&x| x) {
                break;
            }
            let active: Vec<bool> = ended.iter().map(|&x| !x).collect();
            let step_in = g.gather_rows(emb, &prev_ids);
            let logits = self.decoder_step(dec, w_step, cond_term, step_in, &mut states, &active);
            let lp = g.log_softmax(logits);
            let lpv = g.value(lp);
            for r in 0..b {
                if ended[r] {
                    continue;
                }
                let row = lpv.row(r);
                let mut best = argmax(row);
                if best == eos && symbols[r].len() < min_units {
                    best = argmax(&row[..s]);
                }
                if best == eos {
                    ended[r] = true;
                } else {
                    symbols[r].push(best);
                    prev_ids[r] = best;
                }
            }
            let probs = g.exp(g.slice_cols(lp, 0, s));
            unit_probs.push(probs);
            log_probs.push(lp);
        }
        FreeDecode { log_probs, unit_probs, symbols, ended, _marker: std::marker::PhantomData }
    }
}

impl<'p, T: Real> Graph<'p, T> {
    fn variable_or_constant(&self, m: Matrix<T>, grad: bool) -> Var {
        if grad {
            self.variable(m)
        } else {
            self.constant(m)
        }
    }
}
