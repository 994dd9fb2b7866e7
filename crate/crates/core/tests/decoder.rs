mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wordbridge_core::corpus::Lexicon;
use wordbridge_core::decoder::{beam_search_log_posteriors, train_trigram_lm, LmConfig, TrigramLM};

#[test]
fn beam_matches_exhaustive_search_on_random_models() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for trial in 0..100u64 {
        common::beam_exhaustive_trial(trial, &mut rng).unwrap();
    }
}

/// Counts recomputed by scanning the padded sentences for each query.
fn oracle_prob(sents: &[Vec<usize>], v: usize, ctx: (usize, usize), w: usize, backoff: f64) -> f64 {
    let (bos, eos) = (v, v + 1);
    let padded: Vec<Vec<usize>> = sents
        .iter()
        .map(|s| [vec![bos, bos], s.clone(), vec![eos]].concat())
        .collect();
    let count = |pat: &[usize]| -> f64 {
        padded
            .iter()
            .map(|s| (2..s.len()).filter(|&t| s[t + 1 - pat.len()..=t] == *pat).count())
            .sum::<usize>() as f64
    };
    let targets: Vec<usize> = (0..v).chain([eos]).collect();
    let total_tokens: f64 = padded.iter().map(|s| (s.len() - 2) as f64).sum();
    let score = |x: usize| {
        let c3 = count(&[ctx.0, ctx.1, x]);
        if c3 > 0.0 {
            return c3 / targets.iter().map(|&y| count(&[ctx.0, ctx.1, y])).sum::<f64>();
        }
        let c2 = count(&[ctx.1, x]);
        let bi = if c2 > 0.0 {
            c2 / targets.iter().map(|&y| count(&[ctx.1, y])).sum::<f64>()
        } else {
            backoff * (count(&[x]) + 1.0) / (total_tokens + (v + 1) as f64)
        };
        backoff * bi
    };
    score(w) / targets.iter().map(|&y| score(y)).sum::<f64>()
}

#[test]
fn lm_perplexity_matches_counting_oracle() {
    let sents = vec![vec![0, 1, 2], vec![0, 1], vec![2, 2, 0, 1], vec![3]];
    let lm = train_trigram_lm(&sents, 4, LmConfig::default()).unwrap();
    let mut nll = 0.0;
    let mut n = 0.0;
    for s in &sents {
        let (mut u, mut v) = (4, 4);
        for &w in s.iter().chain([&5]) {
            nll -= oracle_prob(&sents, 4, (u, v), w, 0.4).ln();
            n += 1.0;
            (u, v) = (v, w);
        }
    }
    let expected = (nll / n).exp();
    assert!((lm.perplexity(&sents) - expected).abs() < 1e-9 * expected);

    let lexicon = Lexicon::new(
        vec!["p".into()],
        (0..4).map(|k| (format!("w{k}"), vec![0; k + 1])).collect(),
    )
    .unwrap();
    let back = TrigramLM::from_json(&lm.to_json(&lexicon).unwrap(), &lexicon).unwrap();
    assert_eq!(back.perplexity(&sents), lm.perplexity(&sents));
}

proptest! {
    #[test]
    fn lm_is_normalized_and_order_invariant(
        sents in prop::collection::vec(prop::collection::vec(0usize..5, 1..6), 1..8),
        u in 0usize..6, v in 0usize..6,
    ) {
        let lm = train_trigram_lm(&sents, 5, LmConfig::default()).unwrap();
        let mut rev = sents.clone();
        rev.reverse();
        let lm2 = train_trigram_lm(&rev, 5, LmConfig::default()).unwrap();
        let d = lm.distribution(u, v);
        prop_assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        prop_assert_eq!(&*d, &*lm2.distribution(u, v));
    }

    #[test]
    fn beam_is_bounded_by_and_exact_against_enumeration(
        seed in 0u64..10_000,
        segments in 1usize..5,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 4;
        let sents: Vec<Vec<usize>> = (0..5).map(|_| (0..rng.random_range(1..5)).map(|_| rng.random_range(0..n)).collect()).collect();
        let lm = train_trigram_lm(&sents, n, LmConfig::default()).unwrap();
        let post: Vec<Vec<f64>> = (0..segments).map(|_| {
            let raw: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..0.0)).collect();
            let z = raw.iter().map(|x: &f64| x.exp()).sum::<f64>().ln();
            raw.iter().map(|x| x - z).collect()
        }).collect();
        let beta = rng.random_range(0.0..3.0);
        let mut best = f64::NEG_INFINITY;
        for code in 0..n.pow(segments as u32) {
            let words: Vec<usize> = (0..segments).map(|t| code / n.pow(t as u32) % n).collect();
            best = best.max(common::lm_score(&lm, &post, &words, beta));
        }
        // Hypotheses recombine on their last two words, so n² slots keep
        // every distinct state and the search becomes exact.
        for beam in 1..=20 {
            let d = beam_search_log_posteriors(&post, &lm, beta, beam).unwrap();
            prop_assert!(d.score <= best + 1e-9, "beam {} beat enumeration", beam);
            if beam >= n * n {
                prop_assert!((d.score - best).abs() < 1e-9, "beam {} not exact", beam);
            }
        }
    }
}
