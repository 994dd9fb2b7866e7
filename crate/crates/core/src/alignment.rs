//! Separate learning then transformation: independent autoencoders (with a
//! speaker-adversarial critic on the audio side), standardization and PCA of
//! both phonetic spaces, and linear maps between them fitted by gradient
//! descent on a paired reconstruction objective with cycle terms.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::container;
use crate::corpus::{Corpus, PairSet};
use crate::decoder::PhoneticEmbedder;
use crate::error::{Error, Result};
use crate::nets::{AudioEncoder, Model, NetConfig, Session};
use crate::objectives::Term;
use crate::optim::{Adam, AdamConfig};
use crate::params::{Binder, Grads, ParamId, ParamStore};
use crate::scalar::Real;
use crate::tensor::Matrix;
use crate::trainer::{train_from, TrainConfig, TrainError, TrainOutcome};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignConfig {
    /// Projection dimension shared by both spaces.
    pub dim: usize,
    /// Weight of the cycle terms.
    pub lambda_prime: f64,
    pub learning_rate: f64,
    pub steps: usize,
    /// Speaker-adversarial critic on the audio phonetic encoder.
    pub adversarial: bool,
    pub adversarial_weight: f64,
    pub n_critic: usize,
    pub gp_weight: f64,
    pub critic_hidden: usize,
    pub critic_learning_rate: f64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            dim: 128,
            lambda_prime: 1.0,
            learning_rate: 1e-3,
            steps: 5000,
            adversarial: true,
            adversarial_weight: 1.0,
            n_critic: 5,
            gp_weight: 10.0,
            critic_hidden: 256,
            critic_learning_rate: 1e-4,
        }
    }
}

/// Standardization statistics and a PCA basis for one embedding space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectedSpace {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// `P×d`, orthonormal columns ordered by decreasing variance.
    pub basis: Matrix<f64>,
    pub explained_variance_ratio: Vec<f64>,
}

impl ProjectedSpace {
    pub fn dim(&self) -> usize {
        self.basis.cols()
    }

    pub fn input_dim(&self) -> usize {
        self.basis.rows()
    }

    /// Rows of `v` (n×P) to projected rows (n×d).
    pub fn project<T: Real>(&self, v: &Matrix<T>) -> Result<Matrix<f64>> {
        if v.cols() != self.input_dim() {
            return Err(Error::DimensionMismatch { row: 0, expected: self.input_dim(), found: v.cols() });
        }
        let z = Matrix::from_fn(v.rows(), v.cols(), |r, c| (v[(r, c)].to_f64_lossy() - self.mean[c]) / self.std[c]);
        Ok(z.matmul(&self.basis))
    }

    /// Back to the original space; exact on the retained subspace.
    pub fn reconstruct(&self, z: &Matrix<f64>) -> Matrix<f64> {
        let s = z.matmul(&self.basis.transpose());
        Matrix::from_fn(s.rows(), s.cols(), |r, c| s[(r, c)] * self.std[c] + self.mean[c])
    }
}

/// Standardizes each dimension and keeps the top `d` principal components.
/// Dimensions with zero variance are centred but not scaled.
pub fn fit_projection<T: Real>(vectors: &Matrix<T>, d: usize) -> Result<ProjectedSpace> {
    let (n, p) = vectors.shape();
    if d == 0 || d > p {
        return Err(Error::InvalidArgument(format!("projection dimension must be in 1..={p}, got {d}")));
    }
    if n < d + 1 {
        return Err(Error::InvalidArgument(format!("need at least {} vectors for d={d}, got {n}", d + 1)));
    }
    let x = vectors.cast::<f64>();
    let mean: Vec<f64> = (0..p).map(|c| (0..n).map(|r| x[(r, c)]).sum::<f64>() / n as f64).collect();
    let std: Vec<f64> = (0..p)
        .map(|c| {
            let var = (0..n).map(|r| (x[(r, c)] - mean[c]).powi(2)).sum::<f64>() / n as f64;
            if var > 1e-24 { var.sqrt() } else { 1.0 }
        })
        .collect();
    let z = DMatrix::from_fn(n, p, |r, c| (x[(r, c)] - mean[c]) / std[c]);
    let cov = (z.transpose() * &z) / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let rank = order.iter().filter(|&&i| eig.eigenvalues[i] > top * 1e-10 && eig.eigenvalues[i] > 1e-20).count();
    if rank < d {
        return Err(Error::RankDeficient { rank, requested: d });
    }
    let total: f64 = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).sum();
    let basis = Matrix::from_fn(p, d, |r, c| eig.eigenvectors[(r, order[c])]);
    let explained_variance_ratio = order[..d].iter().map(|&i| eig.eigenvalues[i].max(0.0) / total).collect();
    Ok(ProjectedSpace { mean, std, basis, explained_variance_ratio })
}

/// `M_at` maps audio to text coordinates, `M_ta` the reverse. Vectors are
/// columns in the maths, rows in storage (so `a ↦ a · M_atᵀ`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentMaps {
    pub m_at: Matrix<f64>,
    pub m_ta: Matrix<f64>,
    pub lambda_prime: f64,
}

impl AlignmentMaps {
    pub fn identity(d: usize, lambda_prime: f64) -> Self {
        Self { m_at: Matrix::identity(d), m_ta: Matrix::identity(d), lambda_prime }
    }

    pub fn audio_to_text(&self, a: &Matrix<f64>) -> Matrix<f64> {
        a.matmul(&self.m_at.transpose())
    }

    pub fn text_to_audio(&self, t: &Matrix<f64>) -> Matrix<f64> {
        t.matmul(&self.m_ta.transpose())
    }
}

struct Residuals {
    r1: Matrix<f64>,
    r2: Matrix<f64>,
    r3: Matrix<f64>,
    r4: Matrix<f64>,
    ma: Matrix<f64>,
    nt: Matrix<f64>,
}

fn residuals(maps: &AlignmentMaps, a: &Matrix<f64>, t: &Matrix<f64>) -> Residuals {
    let ma = maps.audio_to_text(a);
    let nt = maps.text_to_audio(t);
    let sub = |x: &Matrix<f64>, y: &Matrix<f64>| x.zip_map(y, |p, q| p - q);
    let r1 = sub(t, &ma);
    let r2 = sub(a, &nt);
    let r3 = sub(a, &maps.text_to_audio(&ma));
    let r4 = sub(t, &maps.audio_to_text(&nt));
    Residuals { r1, r2, r3, r4, ma, nt }
}

/// The paired mapping objective. Rows of `a` and `t` correspond.
pub fn alignment_objective(maps: &AlignmentMaps, a: &Matrix<f64>, t: &Matrix<f64>, lambda_prime: f64) -> f64 {
    let r = residuals(maps, a, t);
    r.r1.frobenius_sq() + r.r2.frobenius_sq() + lambda_prime * (r.r3.frobenius_sq() + r.r4.frobenius_sq())
}

/// Gradients of the objective with respect to `(M_at, M_ta)`.
pub fn alignment_gradients(maps: &AlignmentMaps, a: &Matrix<f64>, t: &Matrix<f64>, lambda_prime: f64) -> (Matrix<f64>, Matrix<f64>) {
    let r = residuals(maps, a, t);
    let (m, n) = (&maps.m_at, &maps.m_ta);
    // With row storage, Σ r xᵀ is rᵀ x.
    let outer = |x: &Matrix<f64>, y: &Matrix<f64>| x.transpose().matmul(y);
    let mut gm = outer(&r.r1, a);
    let mut gm_cyc = n.transpose().matmul(&outer(&r.r3, a));
    gm_cyc.add_assign(&outer(&r.r4, &r.nt));
    gm_cyc.scale_assign(lambda_prime);
    gm.add_assign(&gm_cyc);
    gm.scale_assign(-2.0);

    let mut gn = outer(&r.r2, t);
    let mut gn_cyc = outer(&r.r3, &r.ma);
    gn_cyc.add_assign(&m.transpose().matmul(&outer(&r.r4, t)));
    gn_cyc.scale_assign(lambda_prime);
    gn.add_assign(&gn_cyc);
    gn.scale_assign(-2.0);
    (gm, gn)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignReport {
    /// Objective before the first step and after every accepted step.
    pub objective: Vec<f64>,
    pub steps: usize,
    pub final_learning_rate: f64,
}

/// Gradient descent from identity maps. The step size is halved whenever a
/// step would raise the objective, so the iterates are monotone, and regrows
/// toward `learning_rate` after accepted steps.
pub fn learn_alignment_maps(
    a: &Matrix<f64>,
    t: &Matrix<f64>,
    lambda_prime: f64,
    steps: usize,
    learning_rate: f64,
) -> Result<(AlignmentMaps, AlignReport)> {
    if a.shape() != t.shape() || a.rows() == 0 {
        return Err(Error::InvalidArgument("alignment needs equally shaped, non-empty paired sets".into()));
    }
    if !(learning_rate > 0.0) || !(lambda_prime >= 0.0) {
        return Err(Error::InvalidArgument("alignment needs lr > 0 and λ' ≥ 0".into()));
    }
    let d = a.cols();
    let mut maps = AlignmentMaps::identity(d, lambda_prime);
    let mut obj = alignment_objective(&maps, a, t, lambda_prime);
    if !obj.is_finite() {
        return Err(Error::NonFiniteObjective { step: 0 });
    }
    let mut history = vec![obj];
    let mut lr = learning_rate;
    let mut step = 0;
    let mut stalled = 0;
    while step < steps && obj > 0.0 {
        let (gm, gn) = alignment_gradients(&maps, a, t, lambda_prime);
        let mut accepted = false;
        for _ in 0..60 {
            let cand = AlignmentMaps {
                m_at: maps.m_at.zip_map(&gm, |m, g| m - lr * g),
                m_ta: maps.m_ta.zip_map(&gn, |m, g| m - lr * g),
                lambda_prime,
            };
            let cand_obj = alignment_objective(&cand, a, t, lambda_prime);
            if cand_obj.is_finite() && cand_obj <= obj {
                let improvement = (obj - cand_obj) / obj.max(1e-300);
                stalled = if improvement < 1e-12 { stalled + 1 } else { 0 };
                maps = cand;
                obj = cand_obj;
                accepted = true;
                lr = (lr * 1.25).min(learning_rate);
                break;
            }
            lr *= 0.5;
        }
        step += 1;
        if !accepted {
            log::debug!("alignment converged: no descent step at step {step}");
            break;
        }
        history.push(obj);
        if obj == 0.0 || stalled >= 20 {
            break;
        }
    }
    Ok((maps, AlignReport { objective: history, steps: step, final_learning_rate: lr }))
}

/// Two-layer critic scoring phonetic-vector pairs (see [`pair_features`]).
pub struct Critic<T: Real> {
    pub params: ParamStore<T>,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Critic and encoder objectives for one set of pairs.
pub struct AdversarialLosses {
    /// Minimized by the critic: `E_cross f − E_same f + γ·GP`.
    pub critic: Var,
    /// Minimized by the encoder: `E_same f − E_cross f`.
    pub encoder: Var,
    pub penalty: Var,
}

impl<T: Real> Critic<T> {
    pub fn new(input: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let w1 = params.add_uniform("critic.w1", input, hidden, crate::nets::INIT_SCALE, &mut rng);
        let b1 = params.add_zeros("critic.b1", 1, hidden);
        let w2 = params.add_uniform("critic.w2", hidden, 1, crate::nets::INIT_SCALE, &mut rng);
        let b2 = params.add_zeros("critic.b2", 1, 1);
        Self { params, w1, b1, w2, b2 }
    }

    /// Scores and, per row, the input gradient `∂f/∂x` built as graph nodes
    /// so that a penalty on it can be differentiated.
    fn score_and_input_grad<'p>(&'p self, g: &Graph<'p, T>, bind: &Binder<'p, T>, x: Var) -> (Var, Var) {
        let (w1, b1, w2, b2) = (bind.var(g, self.w1), bind.var(g, self.b1), bind.var(g, self.w2), bind.var(g, self.b2));
        let pre = g.affine(x, w1, b1);
        let h = g.relu(pre);
        let score = g.affine(h, w2, b2);
        let mask = g.with_value(pre, |m| m.map(|v| if v > T::zero() { T::one() } else { T::zero() }));
        let w2_row = g.transpose(w2);
        let gated = g.mul_row_broadcast(g.constant(mask), w2_row);
        let grad_x = g.matmul(gated, g.transpose(w1));
        (score, grad_x)
    }

    /// Builds both objectives. `same` and `cross` are `B×2P` pair inputs;
    /// `mix` holds one interpolation weight per row.
    pub fn losses<'p>(&'p self, g: &Graph<'p, T>, bind: &Binder<'p, T>, same: Var, cross: Var, mix: &[T], gp_weight: T) -> AdversarialLosses {
        let b = g.shape(same).0;
        let mean = |v: Var| g.weighted_sum(v, Matrix::filled(g.shape(v).0, 1, T::one() / T::from_count(g.shape(v).0)));
        let (fs, _) = self.score_and_input_grad(g, bind, same);
        let (fc, _) = self.score_and_input_grad(g, bind, cross);
        let alpha = Matrix::from_fn(b, 1, |r, _| mix[r]);
        let one_minus = Matrix::from_fn(b, 1, |r, _| T::one() - mix[r]);
        let cols = g.shape(same).1;
        let ones = g.constant(Matrix::filled(1, cols, T::one()));
        let spread = |w: Matrix<T>| g.matmul(g.constant(w), ones);
        let interp = g.add(g.mul(spread(alpha), same), g.mul(spread(one_minus), cross));
        let (_, grad) = self.score_and_input_grad(g, bind, interp);
        let norm = g.sqrt(g.add_scalar(g.row_sum(g.mul(grad, grad)), T::from_f64_lossy(1e-12)));
        let dev = g.add_scalar(norm, -T::one());
        let penalty = mean(g.mul(dev, dev));
        let gap = g.sub(mean(fc), mean(fs));
        let critic = g.add(gap, g.scale(penalty, gp_weight));
        let encoder = g.scale(gap, -T::one());
        AdversarialLosses { critic, encoder, penalty }
    }
}

/// Symmetric pair representation `[v1⊙v2, (v1−v2)²]` fed to the critic;
/// a plain concatenation leaves the critic to learn similarity from scratch.
pub fn pair_features<T: Real>(g: &Graph<'_, T>, v1: Var, v2: Var) -> Var {
    let diff = g.sub(v1, v2);
    g.concat_cols(&[g.mul(v1, v2), g.mul(diff, diff)])
}

/// Same-utterance and cross-utterance spoken-word index pairs.
pub fn sample_utterance_pairs<T: Real>(corpus: &Corpus<T>, n: usize, rng: &mut impl Rng) -> Result<(Vec<(usize, usize)>, Vec<(usize, usize)>)> {
    let multi: Vec<&crate::corpus::Utterance> = corpus.utterances().iter().filter(|u| u.words.len() >= 2).collect();
    if multi.len() < 2 {
        return Err(Error::InvalidArgument("adversarial pairs need two utterances with at least two words".into()));
    }
    let mut same = Vec::with_capacity(n);
    let mut cross = Vec::with_capacity(n);
    for _ in 0..n {
        let u = multi[rng.random_range(0..multi.len())];
        let i = rng.random_range(0..u.words.len());
        let mut j = rng.random_range(0..u.words.len() - 1);
        if j >= i {
            j += 1;
        }
        same.push((u.words[i], u.words[j]));
        let a = rng.random_range(0..multi.len());
        let mut b = rng.random_range(0..multi.len() - 1);
        if b >= a {
            b += 1;
        }
        let (ua, ub) = (multi[a], multi[b]);
        cross.push((ua.words[rng.random_range(0..ua.words.len())], ub.words[rng.random_range(0..ub.words.len())]));
    }
    Ok((same, cross))
}

/// Per-step adversarial routine: `n_critic` critic updates on the current
/// phonetic vectors, then the encoder gradient of the adversarial objective.
pub struct SpeakerAdversary<'c, T: Real> {
    corpus: &'c Corpus<T>,
    critic: Critic<T>,
    adam: Adam<T>,
    rng: ChaCha8Rng,
    cfg: AlignConfig,
    batch: usize,
}

impl<'c, T: Real> SpeakerAdversary<'c, T> {
    pub fn new(corpus: &'c Corpus<T>, net: &NetConfig, cfg: &AlignConfig, batch: usize, seed: u64) -> Self {
        let critic = Critic::new(2 * net.phonetic_dim, cfg.critic_hidden, seed ^ 0x5eed);
        let adam_cfg = AdamConfig { learning_rate: cfg.critic_learning_rate, beta1: 0.5, beta2: 0.9, epsilon: 1e-8 };
        let adam = Adam::new(adam_cfg, &critic.params);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(7);
        Self { corpus, critic, adam, rng, cfg: cfg.clone(), batch }
    }

    pub fn critic(&self) -> &Critic<T> {
        &self.critic
    }

    /// Adds the encoder's adversarial gradient to `grads`.
    pub fn step(&mut self, model: &Model<T>, grads: &mut Grads<T>) -> Result<()> {
        let (same, cross) = sample_utterance_pairs(self.corpus, self.batch, &mut self.rng)?;
        let items: Vec<&Matrix<T>> = same
            .iter()
            .chain(&cross)
            .flat_map(|&(i, j)| [&self.corpus.word(i).frames, &self.corpus.word(j).frames])
            .collect();
        let g = Graph::new();
        let s = Session::new(&g, model);
        let v = s.encode_audio(AudioEncoder::Phonetic, &s.audio_input(&items));
        let b = same.len();
        // Rows come in (first, second) order; split into pair inputs.
        let pick = |k: usize, second: bool| -> Vec<usize> { (0..b).map(|r| 2 * (k * b + r) + usize::from(second)).collect() };
        let pair_input = |k: usize| pair_features(&g, g.gather_rows(v, &pick(k, false)), g.gather_rows(v, &pick(k, true)));
        let same_in = pair_input(0);
        let cross_in = pair_input(1);
        let gp = T::from_f64_lossy(self.cfg.gp_weight);

        let (same_val, cross_val) = (g.value(same_in), g.value(cross_in));
        for _ in 0..self.cfg.n_critic {
            let mix: Vec<T> = (0..b).map(|_| T::from_f64_lossy(self.rng.random_range(0.0..1.0))).collect();
            let cg = Graph::new();
            let bind = Binder::new(&self.critic.params);
            let l = self.critic.losses(&cg, &bind, cg.constant(same_val.clone()), cg.constant(cross_val.clone()), &mix, gp);
            let mut raw = cg.backward(l.critic);
            let cgrads = bind.grads(&mut raw);
            if !cgrads.all_finite() {
                return Err(Error::NonFiniteObjective { step: 0 });
            }
            drop(bind);
            self.adam.step(&mut self.critic.params, &cgrads);
        }

        let mix: Vec<T> = (0..b).map(|_| T::from_f64_lossy(self.rng.random_range(0.0..1.0))).collect();
        let bind = Binder::new(&self.critic.params);
        let l = self.critic.losses(&g, &bind, same_in, cross_in, &mix, gp);
        let obj = g.scale(l.encoder, T::from_f64_lossy(self.cfg.adversarial_weight));
        let mut raw = g.backward(obj);
        let enc = s.binder().grads(&mut raw);
        log::debug!(
            "adversary: gap {:.4} penalty {:.4} encoder grad norm {:.4}",
            g.scalar(l.encoder).to_f64_lossy(),
            g.scalar(l.penalty).to_f64_lossy(),
            enc.global_norm().to_f64_lossy()
        );
        grads.add_scaled(&enc, T::one());
        Ok(())
    }
}

/// Trains the two autoencoders with only the intra-domain terms enabled,
/// plus the speaker-adversarial term when configured.
pub fn train_separate<T: Real>(
    corpus: &Corpus<T>,
    pairs: &PairSet,
    net: &NetConfig,
    train: &TrainConfig,
    align: &AlignConfig,
) -> std::result::Result<TrainOutcome<T>, TrainError<T>> {
    let mut cfg = train.clone();
    for t in [Term::CrossAudio, Term::CrossText, Term::Embedding, Term::Cycle] {
        cfg.weights.set_enabled(t, false);
    }
    // Validation runs on the intra-domain terms only, so pairs play no part.
    let _ = pairs;
    let model = Model::new(net.clone(), cfg.seed)?;
    if align.adversarial {
        let mut adv = SpeakerAdversary::new(corpus, net, align, cfg.batch_size, cfg.seed);
        let mut hook = |m: &Model<T>, _: &crate::objectives::Batch<'_, T>, g: &mut Grads<T>| adv.step(m, g);
        train_from(model, corpus, &PairSet::empty(), &cfg, Some(&mut hook))
    } else {
        train_from(model, corpus, &PairSet::empty(), &cfg, None)
    }
}

/// A separately trained model plus projections and maps, usable wherever a
/// joint model is.
#[derive(Debug, Clone)]
pub struct SeparateSystem<T: Real> {
    pub model: Model<T>,
    pub audio_space: ProjectedSpace,
    pub text_space: ProjectedSpace,
    pub maps: AlignmentMaps,
    pub report: AlignReport,
    pub steps: usize,
}

impl<T: Real> PhoneticEmbedder<T> for SeparateSystem<T> {
    fn embed_audio(&self, items: &[&Matrix<T>]) -> Result<Matrix<T>> {
        let v = self.model.encode_audio_batch(AudioEncoder::Phonetic, items)?;
        Ok(self.maps.audio_to_text(&self.audio_space.project(&v)?).cast())
    }

    fn embed_text(&self, seqs: &[&[usize]]) -> Result<Matrix<T>> {
        let v = self.model.encode_text_batch(seqs)?;
        Ok(self.text_space.project(&v)?.cast())
    }
}

/// Largest usable projection dimension for the given data.
pub fn effective_dim(requested: usize, net: &NetConfig, n_audio: usize, n_text: usize) -> usize {
    requested.min(net.phonetic_dim).min(n_audio.saturating_sub(1)).min(n_text.saturating_sub(1)).max(1)
}

/// Fits both projections and the maps for an already trained model.
pub fn fit_alignment<T: Real>(model: Model<T>, corpus: &Corpus<T>, pairs: &PairSet, cfg: &AlignConfig, steps: usize) -> Result<SeparateSystem<T>> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("alignment maps need at least one pair".into()));
    }
    let lexicon = corpus.lexicon();
    let frames: Vec<&Matrix<T>> = corpus.spoken().iter().map(|s| &s.frames).collect();
    let audio = model.encode_audio_batch(AudioEncoder::Phonetic, &frames)?;
    let seqs: Vec<&[usize]> = lexicon.words().map(|w| w.units.as_slice()).collect();
    let text = model.encode_text_batch(&seqs)?;
    let d = effective_dim(cfg.dim, model.config(), audio.rows(), text.rows());
    if d < cfg.dim {
        log::warn!("projection dimension reduced from {} to {d} to fit the data", cfg.dim);
    }
    let fit = |m: &Matrix<T>| -> Result<ProjectedSpace> {
        let mut k = d;
        loop {
            match fit_projection(m, k) {
                Err(Error::RankDeficient { rank, .. }) if rank >= 1 && rank < k => k = rank,
                other => return other,
            }
        }
    };
    let mut audio_space = fit(&audio)?;
    let mut text_space = fit(&text)?;
    let k = audio_space.dim().min(text_space.dim());
    if audio_space.dim() != k {
        audio_space = fit_projection(&audio, k)?;
    }
    if text_space.dim() != k {
        text_space = fit_projection(&text, k)?;
    }
    let a_rows: Vec<usize> = pairs.pairs.iter().map(|p| p.0).collect();
    let t_rows: Vec<usize> = pairs.pairs.iter().map(|p| p.1).collect();
    let a = audio_space.project(&audio.select_rows(&a_rows))?;
    let t = text_space.project(&text.select_rows(&t_rows))?;
    let (maps, report) = learn_alignment_maps(&a, &t, cfg.lambda_prime, cfg.steps, cfg.learning_rate)?;
    Ok(SeparateSystem { model, audio_space, text_space, maps, report, steps })
}

/// Separate training followed by projection and map learning.
pub fn train_separate_system<T: Real>(
    corpus: &Corpus<T>,
    pairs: &PairSet,
    net: &NetConfig,
    train: &TrainConfig,
    align: &AlignConfig,
) -> std::result::Result<SeparateSystem<T>, TrainError<T>> {
    let out = train_separate(corpus, pairs, net, train, align)?;
    let steps = out.history.steps.len();
    Ok(fit_alignment(out.model, corpus, pairs, align, steps)?)
}

const ALIGN_KIND: &str = "alignment";

#[derive(Serialize, Deserialize)]
struct AlignMeta {
    lambda_prime: f64,
    audio_explained: Vec<f64>,
    text_explained: Vec<f64>,
    objective: Vec<f64>,
    steps: usize,
    final_learning_rate: f64,
}

/// Saves maps and both projections in the tensor container.
pub fn save_alignment(path: &Path, audio: &ProjectedSpace, text: &ProjectedSpace, maps: &AlignmentMaps, report: &AlignReport) -> Result<()> {
    let meta = AlignMeta {
        lambda_prime: maps.lambda_prime,
        audio_explained: audio.explained_variance_ratio.clone(),
        text_explained: text.explained_variance_ratio.clone(),
        objective: report.objective.clone(),
        steps: report.steps,
        final_learning_rate: report.final_learning_rate,
    };
    let row = |v: &[f64]| Matrix::row_vector(v.to_vec());
    let (am, as_, tm, ts) = (row(&audio.mean), row(&audio.std), row(&text.mean), row(&text.std));
    let tensors: Vec<(&str, &Matrix<f64>)> = vec![
        ("m_at", &maps.m_at),
        ("m_ta", &maps.m_ta),
        ("audio.mean", &am),
        ("audio.std", &as_),
        ("audio.basis", &audio.basis),
        ("text.mean", &tm),
        ("text.std", &ts),
        ("text.basis", &text.basis),
    ];
    let meta = serde_json::to_value(meta).map_err(|e| Error::Serde(e.to_string()))?;
    container::save(path, ALIGN_KIND, meta, &tensors)
}

pub fn load_alignment(path: &Path) -> Result<(ProjectedSpace, ProjectedSpace, AlignmentMaps, AlignReport)> {
    let c = container::load::<f64>(path, ALIGN_KIND)?;
    let corrupt = |m: &str| Error::Corrupt { path: path.to_owned(), message: m.to_owned() };
    let meta: AlignMeta = serde_json::from_value(c.meta).map_err(|e| corrupt(&e.to_string()))?;
    let get = |name: &str| {
        c.tensors.iter().find(|(n, _)| n == name).map(|(_, m)| m.clone()).ok_or_else(|| corrupt(&format!("missing tensor {name}")))
    };
    let space = |prefix: &str, explained: Vec<f64>| -> Result<ProjectedSpace> {
        Ok(ProjectedSpace {
            mean: get(&format!("{prefix}.mean"))?.into_vec(),
            std: get(&format!("{prefix}.std"))?.into_vec(),
            basis: get(&format!("{prefix}.basis"))?,
            explained_variance_ratio: explained,
        })
    };
    let audio = space("audio", meta.audio_explained)?;
    let text = space("text", meta.text_explained)?;
    let maps = AlignmentMaps { m_at: get("m_at")?, m_ta: get("m_ta")?, lambda_prime: meta.lambda_prime };
    let d = maps.m_at.rows();
    if maps.m_at.shape() != (d, d) || maps.m_ta.shape() != (d, d) || audio.dim() != d || text.dim() != d {
        return Err(corrupt("inconsistent alignment dimensions"));
    }
    let report = AlignReport { objective: meta.objective, steps: meta.steps, final_learning_rate: meta.final_learning_rate };
    Ok((audio, text, maps, report))
}
