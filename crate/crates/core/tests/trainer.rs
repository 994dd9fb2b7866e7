use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wordbridge_core::corpus::{build_pair_set, generate_synthetic_corpus, Corpus, PairSet, SynthSpec};
use wordbridge_core::nets::{Model, NetConfig};
use wordbridge_core::objectives::{Batch, LossWeights, Term};
use wordbridge_core::optim::AdamConfig;
use wordbridge_core::params::Grads;
use wordbridge_core::trainer::{sample_negatives, train_from, train_joint, TrainConfig, TrainError};

fn corpus(seed: u64, noise: f64) -> Corpus<f64> {
    let spec = SynthSpec { vocab_size: 6, tokens_per_word: 4, noise, test_speakers: 0, test_tokens_per_word: 0, ..Default::default() };
    generate_synthetic_corpus::<f64>(&spec, seed).unwrap().train
}

fn small_net(c: &Corpus<f64>) -> NetConfig {
    NetConfig::small(c.feature_dim(), c.lexicon().inventory_size(), 10, 6)
}

#[test]
fn negatives_are_uniform_over_eligible_tokens() {
    let c = corpus(1, 0.3);
    let pairs = build_pair_set(&c, 10, 3).unwrap();
    let anchor = pairs.pairs[0].1;
    let excluded: Vec<usize> = pairs.pairs.iter().filter(|p| p.1 == anchor).map(|p| p.0).collect();
    let eligible = c.len() - excluded.len();
    let draws = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut counts = vec![0usize; c.len()];
    for i in sample_negatives(&c, &pairs, anchor, draws, &mut rng).unwrap() {
        counts[i] += 1;
    }
    let p = 1.0 / eligible as f64;
    let (mean, sd) = (draws as f64 * p, (draws as f64 * p * (1.0 - p)).sqrt());
    for (i, &n) in counts.iter().enumerate() {
        if excluded.contains(&i) {
            assert_eq!(n, 0, "excluded token {i} drawn");
        } else {
            // Per-token 3σ band; with ~20 tokens a chance excursion is rare
            // and the seed is fixed.
            assert!((n as f64 - mean).abs() <= 3.0 * sd, "token {i}: {n} draws, expected {mean:.1}±{sd:.1}");
        }
    }
}

/// Hashes of the text-side parameters seen at every step.
fn text_trajectory(c: &Corpus<f64>, net: &NetConfig, cfg: &TrainConfig) -> Vec<Vec<u64>> {
    let mut seen = Vec::new();
    let mut hook = |m: &Model<f64>, _: &Batch<'_, f64>, _: &mut Grads<f64>| {
        let bits = m
            .params()
            .ids()
            .filter(|&id| !m.component(id).is_audio_side())
            .flat_map(|id| m.params().get(id).as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>())
            .collect();
        seen.push(bits);
        Ok(())
    };
    train_from(Model::new(net.clone(), cfg.seed).unwrap(), c, &PairSet::empty(), cfg, Some(&mut hook)).unwrap();
    seen
}

#[test]
fn text_updates_ignore_the_audio_corpus_without_cross_terms() {
    // Same lexicon and token count, different audio.
    let a = corpus(1, 0.3);
    let spec = SynthSpec { vocab_size: 6, tokens_per_word: 4, noise: 0.9, test_speakers: 0, test_tokens_per_word: 0, ..Default::default() };
    let mut b = generate_synthetic_corpus::<f64>(&spec, 2).unwrap().train;
    b = Corpus::new(b.spoken().to_vec(), a.lexicon().clone()).unwrap();
    assert_eq!(a.len(), b.len());
    let mut weights = LossWeights::default();
    for t in [Term::CrossAudio, Term::CrossText, Term::Embedding] {
        weights.set_enabled(t, false);
    }
    // Global-norm clipping couples the two sides whenever it activates.
    let cfg = TrainConfig { max_steps: Some(15), batch_size: 4, clip_norm: f64::INFINITY, weights, seed: 4, ..Default::default() };
    let net = small_net(&a);
    let ta = text_trajectory(&a, &net, &cfg);
    let tb = text_trajectory(&b, &net, &cfg);
    assert_eq!(ta.len(), 15);
    assert!(ta.windows(2).any(|w| w[0] != w[1]), "text parameters never moved");
    assert_eq!(ta, tb);
}

#[test]
fn returned_checkpoint_has_the_best_validation_loss() {
    let c = corpus(5, 0.3);
    let pairs = build_pair_set(&c, 20, 5).unwrap();
    let cfg = TrainConfig {
        adam: AdamConfig { learning_rate: 3e-3, ..Default::default() },
        batch_size: 8,
        max_epochs: 6,
        steps_per_epoch: Some(5),
        seed: 9,
        ..Default::default()
    };
    let out = train_joint(&c, &pairs, &small_net(&c), &cfg).unwrap();
    let h = &out.history;
    let best = h.best_validation().unwrap();
    assert!(h.validation.iter().all(|v| best <= v.total));
    assert_eq!(h.steps.len(), 30);
}

#[test]
fn early_stopping_honours_patience() {
    let c = corpus(5, 0.3);
    let pairs = build_pair_set(&c, 20, 5).unwrap();
    let cfg = TrainConfig { batch_size: 4, max_epochs: 50, patience: 3, steps_per_epoch: Some(1), ..Default::default() };
    // Zeroed gradients freeze the model, so validation loss never improves
    // after the first epoch.
    let mut freeze = |m: &Model<f64>, _: &Batch<'_, f64>, g: &mut Grads<f64>| {
        *g = Grads::zeros_like(m.params());
        Ok(())
    };
    let model = Model::new(small_net(&c), 0).unwrap();
    let out = train_from(model, &c, &pairs, &cfg, Some(&mut freeze)).unwrap();
    assert!(out.history.stopped_early);
    assert_eq!(out.history.validation.len(), 4);
    assert_eq!(out.history.best, Some(0));
}

#[test]
fn divergence_returns_the_last_finite_model() {
    let c = corpus(6, 0.3);
    let pairs = build_pair_set(&c, 20, 6).unwrap();
    let cfg = TrainConfig {
        adam: AdamConfig { learning_rate: 1e300, ..Default::default() },
        batch_size: 4,
        max_steps: Some(20),
        ..Default::default()
    };
    match train_joint(&c, &pairs, &small_net(&c), &cfg) {
        Err(TrainError::Diverged { checkpoint, step, .. }) => {
            assert!(checkpoint.params().all_finite());
            assert!(step >= 1);
        }
        other => panic!("expected divergence, got {:?}", other.map(|o| o.history.steps.len())),
    }
}

#[test]
fn run_log_has_one_record_per_step_and_epoch() {
    let c = corpus(7, 0.3);
    let pairs = build_pair_set(&c, 10, 7).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("run.jsonl");
    let cfg = TrainConfig { batch_size: 4, max_epochs: 2, steps_per_epoch: Some(3), log_path: Some(log.clone()), ..Default::default() };
    train_joint(&c, &pairs, &small_net(&c), &cfg).unwrap();
    let text = std::fs::read_to_string(&log).unwrap();
    let recs: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(recs.iter().filter(|r| r["kind"] == "step").count(), 6);
    assert_eq!(recs.iter().filter(|r| r["kind"] == "validation").count(), 2);
    assert!(recs[0]["embedding"].is_number() && recs[0]["grad_norm"].is_number());
}
