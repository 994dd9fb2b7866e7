//! Training losses over a batch and their weighted combination.
//!
//! Reductions: squared-error terms average over frames and dims per item, then
//! over items. Likelihood terms sum the per-step NLL (EOS included) per item and
//! average over items. Every term is built on one shared graph so a single
//! backward pass yields gradients of the weighted total.

use std::fmt;
use std::sync::atomic::{AtomicBool, Ordering};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nets::{AudioEncoder, Model, Session};
use crate::params::Grads;
use crate::scalar::Real;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Term {
    IntraAudio,
    IntraText,
    CrossAudio,
    CrossText,
    Embedding,
    Cycle,
}

impl Term {
    pub const ALL: [Term; 6] =
        [Term::IntraAudio, Term::IntraText, Term::CrossAudio, Term::CrossText, Term::Embedding, Term::Cycle];
    /// The five terms of the joint objective (cycle excluded).
    pub const JOINT: [Term; 5] = [Term::IntraAudio, Term::IntraText, Term::CrossAudio, Term::CrossText, Term::Embedding];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Term::IntraAudio => "intra_audio",
            Term::IntraText => "intra_text",
            Term::CrossAudio => "cross_audio",
            Term::CrossText => "cross_text",
            Term::Embedding => "embedding",
            Term::Cycle => "cycle",
        }
    }

    pub fn parse(s: &str) -> Option<Term> {
        Term::ALL.into_iter().find(|t| t.name() == s)
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// How the cycle's inner text decode is fed back into the text encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CycleRelaxation {
    /// Greedy one-hot symbols forward, softmax gradients backward.
    #[default]
    StraightThrough,
    /// Unit probabilities forward and backward (smooth surrogate).
    Soft,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Weights of intra audio, intra text, cross audio, cross text, embedding.
    pub alpha: [f64; 5],
    /// Hinge margin on squared distance for negatives.
    pub lambda: f64,
    pub cycle_weight: f64,
    pub enabled: [bool; 5],
    pub cycle: bool,
    pub relaxation: CycleRelaxation,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: [0.2, 1.0, 0.2, 1.0, 5.0],
            lambda: 0.01,
            cycle_weight: 1.0,
            enabled: [true; 5],
            cycle: false,
            relaxation: CycleRelaxation::StraightThrough,
        }
    }
}

impl LossWeights {
    /// Weights with only `term` enabled, at weight 1.
    pub fn only(term: Term) -> Self {
        let mut w = Self { alpha: [1.0; 5], cycle_weight: 1.0, enabled: [false; 5], cycle: false, ..Self::default() };
        w.set_enabled(term, true);
        w
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(Error::InvalidArgument(format!("hinge margin must be positive, got {}", self.lambda)));
        }
        if self.alpha.iter().chain([&self.cycle_weight]).any(|a| !(*a >= 0.0) || !a.is_finite()) {
            return Err(Error::InvalidArgument("loss weights must be finite and non-negative".into()));
        }
        if !Term::ALL.iter().any(|&t| self.is_enabled(t)) {
            return Err(Error::InvalidArgument("at least one loss term must be enabled".into()));
        }
        Ok(())
    }

    pub fn is_enabled(&self, t: Term) -> bool {
        match t {
            Term::Cycle => self.cycle,
            _ => self.enabled[t.index()],
        }
    }

    pub fn set_enabled(&mut self, t: Term, on: bool) {
        match t {
            Term::Cycle => self.cycle = on,
            _ => self.enabled[t.index()] = on,
        }
    }

    /// Effective multiplier of `t` in the total (0 when disabled).
    pub fn weight(&self, t: Term) -> f64 {
        if !self.is_enabled(t) {
            return 0.0;
        }
        match t {
            Term::Cycle => self.cycle_weight,
            _ => self.alpha[t.index()],
        }
    }

    /// Weighted sum of already computed term values.
    pub fn combine<T: Real>(&self, terms: &[T; 6]) -> T {
        Term::ALL
            .iter()
            .filter(|&&t| self.is_enabled(t))
            .map(|&t| T::from_f64_lossy(self.weight(t)) * terms[t.index()])
            .sum()
    }
}

/// One optimization batch. Negatives are listed per paired item.
#[derive(Debug, Clone, Default)]
pub struct Batch<'a, T> {
    pub audio: Vec<&'a Matrix<T>>,
    pub text: Vec<&'a [usize]>,
    pub paired: Vec<(&'a Matrix<T>, &'a [usize])>,
    pub negatives: Vec<Vec<&'a Matrix<T>>>,
}

/// Per-term values (unweighted) and the weighted total.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Breakdown<T> {
    pub terms: [T; 6],
    pub total: T,
}

impl<T: Real> Breakdown<T> {
    pub fn get(&self, t: Term) -> T {
        self.terms[t.index()]
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.terms.iter().all(|v| v.is_finite())
    }
}

static EMPTY_WARNED: [AtomicBool; 6] = [const { AtomicBool::new(false) }; 6];

fn warn_empty(t: Term) {
    if !EMPTY_WARNED[t.index()].swap(true, Ordering::Relaxed) {
        log::warn!("loss term `{t}` has no items in the batch; it contributes 0");
    }
}

/// Per-item mean squared error of padded time-major predictions against
/// `targets`, averaged over items.
pub fn mse_steps<T: Real>(g: &Graph<'_, T>, steps: &[Var], targets: &[&Matrix<T>]) -> Var {
    let b = targets.len();
    let d = targets[0].cols();
    let mut acc: Option<Var> = None;
    for (t, &step) in steps.iter().enumerate() {
        let mut tgt = Matrix::zeros(b, d);
        let mut w = Matrix::zeros(b, d);
        let mut any = false;
        for (r, x) in targets.iter().enumerate() {
            if t < x.rows() {
                any = true;
                tgt.row_mut(r).copy_from_slice(x.row(t));
                let wr = T::one() / T::from_count(x.rows() * d * b);
                w.row_mut(r).iter_mut().for_each(|v| *v = wr);
            }
        }
        if !any {
            continue;
        }
        let diff = g.sub(step, g.constant(tgt));
        let term = g.weighted_sum(g.mul(diff, diff), w);
        acc = Some(acc.map_or(term, |a| g.add(a, term)));
    }
    acc.unwrap_or_else(|| g.constant(Matrix::zeros(1, 1)))
}

/// Teacher-forced NLL: per-item sum over `len + 1` steps (last target EOS),
/// averaged over items.
pub fn nll_steps<T: Real>(g: &Graph<'_, T>, log_probs: &[Var], targets: &[&[usize]], eos: usize) -> Var {
    let b = targets.len();
    let inv_b = T::one() / T::from_count(b);
    let mut acc: Option<Var> = None;
    for (t, &lp) in log_probs.iter().enumerate() {
        let picks: Vec<(usize, T)> = targets
            .iter()
            .map(|y| match t.cmp(&y.len()) {
                std::cmp::Ordering::Less => (y[t], -inv_b),
                std::cmp::Ordering::Equal => (eos, -inv_b),
                std::cmp::Ordering::Greater => (0, T::zero()),
            })
            .collect();
        if picks.iter().all(|p| p.1 == T::zero()) {
            continue;
        }
        let term = g.pick_weighted(lp, picks);
        acc = Some(acc.map_or(term, |a| g.add(a, term)));
    }
    acc.unwrap_or_else(|| g.constant(Matrix::zeros(1, 1)))
}

/// Mean squared distance over positive row pairs plus mean hinge
/// `max(0, λ − d²)` over negative row pairs.
pub fn embedding_hinge<T: Real>(g: &Graph<'_, T>, pos_a: Var, pos_b: Var, neg_a: Var, neg_b: Var, lambda: T) -> Var {
    let sqdist = |a: Var, b: Var| {
        let d = g.sub(a, b);
        g.row_sum(g.mul(d, d))
    };
    let np = g.shape(pos_a).0;
    let nn = g.shape(neg_a).0;
    let pos = g.weighted_sum(sqdist(pos_a, pos_b), Matrix::filled(np, 1, T::one() / T::from_count(np)));
    let margin = g.add_scalar(g.scale(sqdist(neg_a, neg_b), -T::one()), lambda);
    let neg = g.weighted_sum(g.relu(margin), Matrix::filled(nn, 1, T::one() / T::from_count(nn)));
    g.add(pos, neg)
}

/// Value-level squared-error reduction on explicit reconstructions.
pub fn mse_loss<T: Real>(recon: &[&Matrix<T>], targets: &[&Matrix<T>]) -> Result<T> {
    if recon.is_empty() {
        return Ok(T::zero());
    }
    if recon.len() != targets.len() || recon.iter().zip(targets).any(|(a, b)| a.shape() != b.shape()) {
        return Err(Error::InvalidArgument("reconstruction shapes must match targets".into()));
    }
    let g = Graph::new();
    let t_max = targets.iter().map(|m| m.rows()).max().unwrap_or(0);
    let b = recon.len();
    let steps: Vec<Var> = (0..t_max)
        .map(|t| {
            let m = Matrix::from_fn(b, targets[0].cols(), |r, c| if t < recon[r].rows() { recon[r][(t, c)] } else { T::zero() });
            g.constant(m)
        })
        .collect();
    Ok(g.scalar(mse_steps(&g, &steps, targets)))
}

/// Value-level NLL reduction. `log_probs[i]` is `(len_i + 1) × classes`, the
/// last class being EOS.
pub fn nll_loss<T: Real>(log_probs: &[&Matrix<T>], targets: &[&[usize]]) -> Result<T> {
    if log_probs.is_empty() {
        return Ok(T::zero());
    }
    let classes = log_probs[0].cols();
    if log_probs.len() != targets.len()
        || log_probs.iter().zip(targets).any(|(m, y)| m.rows() != y.len() + 1 || m.cols() != classes)
    {
        return Err(Error::InvalidArgument("each item needs len + 1 steps over a common class count".into()));
    }
    let g = Graph::new();
    let b = log_probs.len();
    let t_max = targets.iter().map(|y| y.len() + 1).max().unwrap_or(0);
    let steps: Vec<Var> = (0..t_max)
        .map(|t| g.constant(Matrix::from_fn(b, classes, |r, c| if t < log_probs[r].rows() { log_probs[r][(t, c)] } else { T::zero() })))
        .collect();
    Ok(g.scalar(nll_steps(&g, &steps, targets, classes - 1)))
}

/// Value-level embedding loss from precomputed squared distances.
pub fn embedding_loss_from_distances<T: Real>(pos_sq: &[T], neg_sq: &[T], lambda: T) -> Result<T> {
    if pos_sq.is_empty() {
        return Ok(T::zero());
    }
    if neg_sq.is_empty() {
        return Err(Error::InvalidArgument("embedding loss needs at least one negative".into()));
    }
    let pos = pos_sq.iter().copied().sum::<T>() / T::from_count(pos_sq.len());
    let neg = neg_sq.iter().map(|&d| (lambda - d).max(T::zero())).sum::<T>() / T::from_count(neg_sq.len());
    Ok(pos + neg)
}

/// Graph nodes of a built loss.
pub struct LossGraph {
    pub total: Var,
    pub terms: [Option<Var>; 6],
}

fn concat<'a, X: Copy>(parts: &[&[X]]) -> Vec<X> {
    parts.iter().flat_map(|p| p.iter().copied()).collect()
}

/// Builds every enabled term on the session's graph.
pub fn build_loss<T: Real>(s: &Session<'_, '_, T>, batch: &Batch<'_, T>, w: &LossWeights) -> Result<LossGraph> {
    w.validate()?;
    let g = s.g;
    let cfg = s.config();
    let eos = cfg.eos();
    let on = |t: Term| w.is_enabled(t);

    let n_audio = if on(Term::IntraAudio) { batch.audio.len() } else { 0 };
    let n_text = if on(Term::IntraText) { batch.text.len() } else { 0 };
    let pairs_needed = [Term::CrossAudio, Term::CrossText, Term::Embedding, Term::Cycle].into_iter().any(on);
    let n_pair = if pairs_needed { batch.paired.len() } else { 0 };
    for t in Term::ALL {
        let empty = match t {
            Term::IntraAudio => batch.audio.is_empty(),
            Term::IntraText => batch.text.is_empty(),
            _ => batch.paired.is_empty(),
        };
        if on(t) && empty {
            warn_empty(t);
        }
    }
    let want_neg = on(Term::Embedding) && n_pair > 0;
    if want_neg {
        if batch.negatives.len() != n_pair || batch.negatives.iter().any(Vec::is_empty) {
            return Err(Error::InvalidArgument("every paired item needs at least one negative sample".into()));
        }
    }
    let pair_x: Vec<&Matrix<T>> = batch.paired[..n_pair].iter().map(|p| p.0).collect();
    let pair_y: Vec<&[usize]> = batch.paired[..n_pair].iter().map(|p| p.1).collect();
    let mut neg_x: Vec<&Matrix<T>> = Vec::new();
    let mut neg_anchor: Vec<usize> = Vec::new();
    if want_neg {
        for (j, negs) in batch.negatives.iter().enumerate() {
            for &x in negs {
                neg_x.push(x);
                neg_anchor.push(j);
            }
        }
    }

    // Phonetic encoder rows: [audio | paired | negatives].
    let pair_p = on(Term::CrossText) || on(Term::Embedding) || on(Term::Cycle);
    let n_pp = if pair_p { n_pair } else { 0 };
    let ep_items = concat(&[&batch.audio[..n_audio], &pair_x[..n_pp], &neg_x]);
    let vp_all = (!ep_items.is_empty()).then(|| s.encode_audio(AudioEncoder::Phonetic, &s.audio_input(&ep_items)));
    let rows = |v: Option<Var>, start: usize, n: usize| v.map(|v| g.slice_rows(v, start, start + n));
    let vp_audio = rows(vp_all, 0, n_audio);
    let vp_pair = rows(vp_all, n_audio, n_pp);
    let vp_neg = rows(vp_all, n_audio + n_pp, neg_x.len());

    // Speaker encoder rows: [audio | paired].
    let pair_s = on(Term::CrossAudio) || on(Term::Cycle);
    let n_ps = if pair_s { n_pair } else { 0 };
    let es_items = concat(&[&batch.audio[..n_audio], &pair_x[..n_ps]]);
    let vs_all = (!es_items.is_empty()).then(|| s.encode_audio(AudioEncoder::Speaker, &s.audio_input(&es_items)));
    let vs_audio = rows(vs_all, 0, n_audio);
    let vs_pair = rows(vs_all, n_audio, n_ps);

    // Text encoder rows: [text | paired].
    let pair_t = on(Term::CrossAudio) || on(Term::Embedding) || on(Term::Cycle);
    let n_pt = if pair_t { n_pair } else { 0 };
    let et_items = concat(&[&batch.text[..n_text], &pair_y[..n_pt]]);
    let vt_all = (!et_items.is_empty()).then(|| s.encode_text_ids(&et_items));
    let vt_text = rows(vt_all, 0, n_text);
    let vt_pair = rows(vt_all, n_text, n_pt);

    let cycle = on(Term::Cycle) && n_pair > 0;

    // Audio half of the cycle: greedy text from the audio vector, re-encoded.
    let mut vt_cycle = None;
    if cycle {
        let max_units = pair_y.iter().map(|y| y.len()).max().unwrap_or(1) + 2;
        let free = s.decode_text_greedy(vp_pair.unwrap(), max_units, 1);
        let lengths: Vec<usize> = free.symbols.iter().map(Vec::len).collect();
        let steps: Vec<Var> = free
            .unit_probs
            .iter()
            .enumerate()
            .map(|(t, &soft)| match w.relaxation {
                CycleRelaxation::Soft => soft,
                CycleRelaxation::StraightThrough => {
                    let mut hard = Matrix::zeros(n_pair, cfg.inventory_size);
                    for (r, sym) in free.symbols.iter().enumerate() {
                        if let Some(&u) = sym.get(t) {
                            hard[(r, u)] = T::one();
                        }
                    }
                    g.straight_through(soft, hard)
                }
            })
            .collect();
        vt_cycle = Some(s.encode_text_input(&s.text_input_from_weights(&steps, lengths)));
    }

    // Audio decoder rows: [intra | cross | cycle].
    let cross_rows = if on(Term::CrossAudio) || cycle { n_pair } else { 0 };
    let cyc_rows = if cycle { n_pair } else { 0 };
    let mut da_p = Vec::new();
    let mut da_s = Vec::new();
    let mut da_targets: Vec<&Matrix<T>> = Vec::new();
    if n_audio > 0 {
        da_p.push(vp_audio.unwrap());
        da_s.push(vs_audio.unwrap());
        da_targets.extend(&batch.audio[..n_audio]);
    }
    if cross_rows > 0 {
        da_p.push(vt_pair.unwrap());
        da_s.push(vs_pair.unwrap());
        da_targets.extend(&pair_x);
    }
    if cyc_rows > 0 {
        da_p.push(vt_cycle.unwrap());
        da_s.push(vs_pair.unwrap());
        da_targets.extend(&pair_x);
    }
    let mut terms: [Option<Var>; 6] = [None; 6];
    let mut cycle_audio = None;
    let mut cross_frames: Vec<Var> = Vec::new();
    if !da_targets.is_empty() {
        let t_max = da_targets.iter().map(|m| m.rows()).max().unwrap();
        let steps = s.decode_audio(g.concat_rows(&da_p), g.concat_rows(&da_s), t_max);
        let group = |start: usize, n: usize| -> Vec<Var> {
            let t_g = da_targets[start..start + n].iter().map(|m| m.rows()).max().unwrap();
            steps[..t_g].iter().map(|&v| g.slice_rows(v, start, start + n)).collect()
        };
        if n_audio > 0 {
            terms[0] = Some(mse_steps(g, &group(0, n_audio), &batch.audio[..n_audio]));
        }
        if cross_rows > 0 {
            cross_frames = group(n_audio, cross_rows);
            if on(Term::CrossAudio) {
                terms[2] = Some(mse_steps(g, &cross_frames, &pair_x));
            }
        }
        if cyc_rows > 0 {
            cycle_audio = Some(mse_steps(g, &group(n_audio + cross_rows, cyc_rows), &pair_x));
        }
    }

    // Text half of the cycle re-encodes the cross-decoded audio.
    let vp_cycle = cycle.then(|| {
        let lengths = pair_x.iter().map(|m| m.rows()).collect();
        s.encode_audio(AudioEncoder::Phonetic, &s.stack_steps(&cross_frames, lengths))
    });

    // Text decoder rows: [intra | cross | cycle], teacher forced.
    let mut dt_p = Vec::new();
    let mut dt_targets: Vec<&[usize]> = Vec::new();
    let n_ct = if on(Term::CrossText) { n_pair } else { 0 };
    if n_text > 0 {
        dt_p.push(vt_text.unwrap());
        dt_targets.extend(&batch.text[..n_text]);
    }
    if n_ct > 0 {
        dt_p.push(vp_pair.unwrap());
        dt_targets.extend(&pair_y);
    }
    if let Some(v) = vp_cycle {
        dt_p.push(v);
        dt_targets.extend(&pair_y);
    }
    let mut cycle_text = None;
    if !dt_targets.is_empty() {
        let steps = s.decode_text_teacher(g.concat_rows(&dt_p), &dt_targets);
        let group = |start: usize, n: usize| -> Vec<Var> {
            let t_g = dt_targets[start..start + n].iter().map(|y| y.len()).max().unwrap() + 1;
            steps[..t_g].iter().map(|&v| g.slice_rows(v, start, start + n)).collect()
        };
        if n_text > 0 {
            terms[1] = Some(nll_steps(g, &group(0, n_text), &batch.text[..n_text], eos));
        }
        if n_ct > 0 {
            terms[3] = Some(nll_steps(g, &group(n_text, n_ct), &pair_y, eos));
        }
        if cycle {
            cycle_text = Some(nll_steps(g, &group(n_text + n_ct, n_pair), &pair_y, eos));
        }
    }
    if let (Some(a), Some(b)) = (cycle_audio, cycle_text) {
        terms[5] = Some(g.add(a, b));
    }

    if want_neg {
        let vt_p = vt_pair.unwrap();
        let anchors = g.gather_rows(vt_p, &neg_anchor);
        terms[4] = Some(embedding_hinge(g, vp_pair.unwrap(), vt_p, vp_neg.unwrap(), anchors, T::from_f64_lossy(w.lambda)));
    }

    let mut total: Option<Var> = None;
    for t in Term::ALL {
        if let Some(v) = terms[t.index()] {
            let weighted = g.scale(v, T::from_f64_lossy(w.weight(t)));
            total = Some(total.map_or(weighted, |a| g.add(a, weighted)));
        }
    }
    let total = total.unwrap_or_else(|| g.constant(Matrix::zeros(1, 1)));
    Ok(LossGraph { total, terms })
}

fn breakdown<T: Real>(g: &Graph<'_, T>, lg: &LossGraph) -> Breakdown<T> {
    let terms = std::array::from_fn(|i| lg.terms[i].map_or(T::zero(), |v| g.scalar(v)));
    Breakdown { terms, total: g.scalar(lg.total) }
}

/// Weighted total with per-term breakdown.
pub fn total_loss<T: Real>(model: &Model<T>, batch: &Batch<'_, T>, w: &LossWeights) -> Result<Breakdown<T>> {
    let g = Graph::new();
    let s = Session::new(&g, model);
    let lg = build_loss(&s, batch, w)?;
    Ok(breakdown(&g, &lg))
}

/// Weighted total, breakdown and parameter gradients of the total.
pub fn total_loss_and_grads<T: Real>(model: &Model<T>, batch: &Batch<'_, T>, w: &LossWeights) -> Result<(Breakdown<T>, Grads<T>)> {
    let g = Graph::new();
    let s = Session::new(&g, model);
    let lg = build_loss(&s, batch, w)?;
    let b = breakdown(&g, &lg);
    let mut raw = g.backward(lg.total);
    let grads = s.binder().grads(&mut raw);
    Ok((b, grads))
}

fn single<T: Real>(model: &Model<T>, batch: &Batch<'_, T>, t: Term) -> Result<T> {
    Ok(total_loss(model, batch, &LossWeights::only(t))?.get(t))
}

pub fn intra_audio_recon_loss<T: Real>(model: &Model<T>, batch: &Batch<'_, T>) -> Result<T> {
    single(model, batch, Term::IntraAudio)
}

pub fn intra_text_recon_loss<T: Real>(model: &Model<T>, batch: &Batch<'_, T>) -> Result<T> {
    single(model, batch, Term::IntraText)
}

pub fn cross_audio_recon_loss<T: Real>(model: &Model<T>, batch: &Batch<'_, T>) -> Result<T> {
    single(model, batch, Term::CrossAudio)
}

pub fn cross_text_recon_loss<T: Real>(model: &Model<T>, batch: &Batch<'_, T>) -> Result<T> {
    single(model, batch, Term::CrossText)
}

pub fn cross_embedding_loss<T: Real>(model: &Model<T>, batch: &Batch<'_, T>, lambda: f64) -> Result<T> {
    let w = LossWeights { lambda, ..LossWeights::only(Term::Embedding) };
    Ok(total_loss(model, batch, &w)?.get(Term::Embedding))
}

pub fn cycle_loss<T: Real>(model: &Model<T>, batch: &Batch<'_, T>, relaxation: CycleRelaxation) -> Result<T> {
    let w = LossWeights { relaxation, ..LossWeights::only(Term::Cycle) };
    Ok(total_loss(model, batch, &w)?.get(Term::Cycle))
}
