#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wordbridge_core::corpus::{Lexicon, SpokenWord};
use wordbridge_core::decoder::{acoustic_posterior, beam_search_decode, build_text_index, train_trigram_lm, LmConfig, TrigramLM};
use wordbridge_core::nets::{Model, NetConfig};
use wordbridge_core::params::Grads;
use wordbridge_core::tensor::Matrix;

/// Worst relative error between analytic gradients and central differences
/// over `n` randomly chosen parameter scalars.
pub fn fd_check(
    model: &Model<f64>,
    grads: &Grads<f64>,
    n: usize,
    seed: u64,
    step: f64,
    f: impl Fn(&Model<f64>) -> f64,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = model.params().num_scalars();
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let k = rng.random_range(0..total);
        let (id, off) = model.params().locate(k);
        let mut m = model.clone();
        let orig = m.params().get(id).as_slice()[off];
        m.params_mut().get_mut(id).as_mut_slice()[off] = orig + step;
        let up = f(&m);
        m.params_mut().get_mut(id).as_mut_slice()[off] = orig - step;
        let down = f(&m);
        let numeric = (up - down) / (2.0 * step);
        let analytic = grads.at(id, off);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    worst
}

pub fn random_frames(rng: &mut ChaCha8Rng, t: usize, d: usize) -> Matrix<f64> {
    Matrix::from_fn(t, d, |_, _| rng.random_range(-1.0..1.0))
}

pub fn lm_score(lm: &TrigramLM, post: &[Vec<f64>], words: &[usize], beta: f64) -> f64 {
    let (mut u, mut v) = (lm.bos(), lm.bos());
    let mut s = 0.0;
    for (t, &w) in words.iter().enumerate() {
        s += post[t][w] + beta * lm.prob(u, v, w).ln();
        (u, v) = (v, w);
    }
    s
}

/// One random 3-word model with a 2-segment utterance: beam search with beam
/// 9 and 10 must match enumeration of all 9 hypotheses, and every posterior
/// must sum to one.
pub fn beam_exhaustive_trial(trial: u64, rng: &mut ChaCha8Rng) -> Result<(), String> {
    let lexicon = Lexicon::new(
        vec!["a".into(), "b".into(), "c".into()],
        vec![("x".into(), vec![0, 1]), ("y".into(), vec![1, 2]), ("z".into(), vec![2])],
    )
    .unwrap();
    let model = Model::<f64>::new(NetConfig::small(2, 3, 6, 4), trial).unwrap();
    let index = build_text_index(&lexicon, &model).unwrap();
    let transcripts: Vec<Vec<usize>> =
        (0..4).map(|_| (0..rng.random_range(1..4)).map(|_| rng.random_range(0..3)).collect()).collect();
    let lm = train_trigram_lm(&transcripts, 3, LmConfig::default()).unwrap();
    let segs: Vec<SpokenWord<f64>> = (0..2)
        .map(|_| SpokenWord {
            frames: Matrix::from_fn(rng.random_range(1..5), 2, |_, _| rng.random_range(-2.0..2.0)),
            utterance_id: "u".into(),
            position: 0,
            word_label: None,
            speaker: None,
        })
        .collect();
    let refs: Vec<&SpokenWord<f64>> = segs.iter().collect();
    let beta = rng.random_range(0.0..2.0);
    let mut post = Vec::new();
    for s in &segs {
        let p = acoustic_posterior(s, &index, &model).unwrap();
        let total: f64 = p.iter().sum();
        if (total - 1.0).abs() >= 1e-6 {
            return Err(format!("trial {trial}: posterior sums to {total}"));
        }
        post.push(p.iter().map(|x| x.ln()).collect::<Vec<f64>>());
    }
    let mut best = f64::NEG_INFINITY;
    for a in 0..3 {
        for b in 0..3 {
            best = best.max(lm_score(&lm, &post, &[a, b], beta));
        }
    }
    for beam in [9, 10] {
        let d = beam_search_decode(&refs, &index, &model, &lm, beta, beam).unwrap();
        if (d.score - best).abs() >= 1e-9 || (lm_score(&lm, &post, &d.words, beta) - d.score).abs() >= 1e-9 {
            return Err(format!("trial {trial}, beam {beam}: {} vs exhaustive {best}", d.score));
        }
    }
    Ok(())
}
