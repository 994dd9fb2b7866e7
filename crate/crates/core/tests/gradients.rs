mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wordbridge_core::autodiff::{Graph, Var};
use wordbridge_core::nets::{AudioEncoder, Model, NetConfig, Session};
use wordbridge_core::objectives::{total_loss, total_loss_and_grads, Batch, CycleRelaxation, LossWeights, Term};
use wordbridge_core::tensor::Matrix;

use common::{fd_check, random_frames};

fn model() -> Model<f64> {
    Model::new(NetConfig::small(4, 5, 16, 8), 3).unwrap()
}

fn forward<'g, 'p>(m: &'p Model<f64>, g: &'g Graph<'p, f64>, xs: &[Matrix<f64>], ys: &[Vec<usize>]) -> (Session<'g, 'p, f64>, Var) {
    let s = Session::new(g, m);
    let refs: Vec<&Matrix<f64>> = xs.iter().collect();
    let inp = s.audio_input(&refs);
    let vp = s.encode_audio(AudioEncoder::Phonetic, &inp);
    let vs = s.encode_audio(AudioEncoder::Speaker, &inp);
    let frames = s.decode_audio(vp, vs, 4);
    let ids: Vec<&[usize]> = ys.iter().map(Vec::as_slice).collect();
    let vt = s.encode_text_ids(&ids);
    let steps = s.decode_text_teacher(vt, &ids);
    let mut acc = g.sum(g.concat_rows(&frames));
    for st in steps {
        acc = g.add(acc, g.sum(st));
    }
    (s, acc)
}

#[test]
fn network_operations_match_finite_differences() {
    let m = model();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let xs: Vec<Matrix<f64>> = (0..3).map(|i| random_frames(&mut rng, 3 + i, 4)).collect();
    let ys: Vec<Vec<usize>> = vec![vec![0, 4, 2], vec![1]];
    let g = Graph::new();
    let (s, out) = forward(&m, &g, &xs, &ys);
    let mut raw = g.backward(out);
    let grads = s.binder().grads(&mut raw);
    let err = fd_check(&m, &grads, 40, 9, 1e-4, |m| {
        let g = Graph::new();
        let (_, out) = forward(m, &g, &xs, &ys);
        g.scalar(out)
    });
    assert!(err <= 1e-3, "relative error {err}");
}

#[test]
fn every_loss_matches_finite_differences() {
    let m = model();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let xs: Vec<Matrix<f64>> = (0..7).map(|_| {
        let t = rng.random_range(2..6);
        random_frames(&mut rng, t, 4)
    }).collect();
    let ys: Vec<Vec<usize>> = vec![vec![0, 1, 2], vec![3], vec![4, 4], vec![2, 0]];
    let batch = Batch {
        audio: vec![&xs[0], &xs[1]],
        text: vec![&ys[0][..], &ys[1][..]],
        paired: vec![(&xs[2], &ys[2][..]), (&xs[3], &ys[3][..])],
        negatives: vec![vec![&xs[4]], vec![&xs[5], &xs[6]]],
    };
    // Large margin so the hinge is active and its gradient is exercised.
    let base = LossWeights { lambda: 5.0, relaxation: CycleRelaxation::Soft, ..LossWeights::default() };
    let mut configs: Vec<(String, LossWeights)> = Term::ALL
        .iter()
        .map(|&t| (t.to_string(), LossWeights { lambda: 5.0, relaxation: CycleRelaxation::Soft, ..LossWeights::only(t) }))
        .collect();
    configs.push(("total".into(), LossWeights { cycle: true, ..base }));
    for (name, w) in configs {
        let (b, grads) = total_loss_and_grads(&m, &batch, &w).unwrap();
        assert!(b.total > 0.0, "{name}");
        let err = fd_check(&m, &grads, 25, 5, 1e-4, |m| total_loss(m, &batch, &w).unwrap().total);
        assert!(err <= 1e-3, "{name}: relative error {err}");
    }
}
