use proptest::prelude::*;
use wordbridge_core::corpus::{generate_synthetic_corpus, SynthSpec};
use wordbridge_core::harness::contour::Interpolator;
use wordbridge_core::harness::output::{write_ablation_csv, write_spectrum_csv};
use wordbridge_core::harness::{
    edit_distance, emit_contour, run_ablation, run_cycle_study, run_spectrum, CellStatus, Dataset, ExperimentConfig,
    ExperimentGrid,
};
use wordbridge_core::nets::NetConfig;
use wordbridge_core::objectives::Term;
use wordbridge_core::trainer::TrainConfig;

fn tiny() -> (Dataset<f32>, ExperimentConfig) {
    let spec = SynthSpec { vocab_size: 6, tokens_per_word: 4, test_tokens_per_word: 2, ..SynthSpec::default() };
    let s = generate_synthetic_corpus::<f32>(&spec, 11).unwrap();
    let data = Dataset { train: s.train, test: s.test.unwrap() };
    let cfg = ExperimentConfig {
        net: NetConfig::small(spec.feature_dim, spec.inventory_size, 6, 4),
        train: TrainConfig { max_steps: Some(3), batch_size: 4, ..TrainConfig::default() },
        ..ExperimentConfig::default()
    };
    (data, cfg)
}

#[test]
fn single_cell_grid_gives_one_row_and_marks_infeasible_cells() {
    let (data, cfg) = tiny();
    let full = data.train.duration_hours(cfg.frame_period);
    let grid = ExperimentGrid { hours: vec![full], n_paired: vec![3, 1_000_000], seeds: vec![5] };
    let rows = run_spectrum(&data, &grid, &cfg);
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].status, CellStatus::Ok);
    assert!(rows[0].wer.is_some_and(|w| w >= 0.0));
    assert_eq!(rows[1].status, CellStatus::Infeasible);
    assert_eq!(rows[1].wer, None);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("spectrum.csv");
    write_spectrum_csv(&path, &rows).unwrap();
    let csv = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "hours,n_paired,wer,seed,status");
    assert!(lines[1].ends_with(",5,ok"));
    assert!(lines[2].ends_with(",,5,infeasible"), "{}", lines[2]);
}

#[test]
fn spectrum_rows_are_reproducible() {
    let (data, cfg) = tiny();
    let grid = ExperimentGrid { hours: vec![data.train.duration_hours(cfg.frame_period)], n_paired: vec![2], seeds: vec![1] };
    let a = run_spectrum(&data, &grid, &cfg);
    let b = run_spectrum(&data, &grid, &cfg);
    assert_eq!(a[0].wer.map(f64::to_bits), b[0].wer.map(f64::to_bits));
}

#[test]
fn ablation_and_cycle_rows_cover_every_variant() {
    let (data, cfg) = tiny();
    let drop = [Term::Embedding, Term::CrossText];
    let rows = run_ablation(&data, 3, &drop, &[1, 2], &cfg);
    assert_eq!(rows.len(), 6);
    for seed_rows in rows.chunks(3) {
        assert_eq!(seed_rows[0].dropped_term, None);
        assert_eq!(seed_rows[1].dropped_term, Some(Term::Embedding));
        assert_eq!(seed_rows[2].dropped_term, Some(Term::CrossText));
        assert!(seed_rows.iter().all(|r| r.status == CellStatus::Ok));
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ablation.csv");
    write_ablation_csv(&path, &rows).unwrap();
    let csv = std::fs::read_to_string(&path).unwrap();
    assert!(csv.starts_with("dropped_term,n_paired,wer,seed\nnone,3,"));
    assert!(csv.contains("\nembedding,3,"));

    let rows = run_cycle_study(&data, &[2, 3], &[4], &cfg);
    let keys: Vec<(bool, usize)> = rows.iter().map(|r| (r.cycle_enabled, r.n_paired)).collect();
    assert_eq!(keys, [(false, 2), (true, 2), (false, 3), (true, 3)]);
}

/// Plane through three points in log-log space, solved by Cramer's rule.
fn plane_oracle(p: &[(f64, f64, f64); 3], h: f64, n: f64) -> Option<f64> {
    let q: Vec<(f64, f64, f64)> = p.iter().map(|&(h, n, w)| (h.ln(), n.ln(), w)).collect();
    let (x, y) = (h.ln(), n.ln());
    let det3 = |m: [[f64; 3]; 3]| {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    let rows = |col: Option<usize>| {
        let mut m = [[0.0; 3]; 3];
        for (i, &(a, b, w)) in q.iter().enumerate() {
            m[i] = [1.0, a, b];
            if let Some(c) = col {
                m[i][c] = w;
            }
        }
        m
    };
    let d = det3(rows(None));
    let coef: Vec<f64> = (0..3).map(|c| det3(rows(Some(c))) / d).collect();
    // Inside test: the point is on the same side of every edge as the
    // opposite vertex.
    let side = |a: (f64, f64, f64), b: (f64, f64, f64), px: f64, py: f64| (b.0 - a.0) * (py - a.1) - (b.1 - a.1) * (px - a.0);
    let inside = (0..3).all(|i| {
        let (a, b, c) = (q[i], q[(i + 1) % 3], q[(i + 2) % 3]);
        side(a, b, x, y) * side(a, b, c.0, c.1) >= -1e-9
    });
    inside.then(|| coef[0] + coef[1] * x + coef[2] * y)
}

proptest! {
    #[test]
    fn contour_on_three_points_matches_the_plane_oracle(
        h in prop::array::uniform3(0.1f64..100.0),
        n in prop::array::uniform3(1.0f64..10_000.0),
        w in prop::array::uniform3(0.0f64..100.0),
        qh in 0.1f64..100.0,
        qn in 1.0f64..10_000.0,
    ) {
        let p = [(h[0], n[0], w[0]), (h[1], n[1], w[1]), (h[2], n[2], w[2])];
        let (x, y): (Vec<f64>, Vec<f64>) = p.iter().map(|q| (q.0.ln(), q.1.ln())).unzip();
        let area = ((x[1] - x[0]) * (y[2] - y[0]) - (x[2] - x[0]) * (y[1] - y[0])).abs();
        prop_assume!(area > 1e-2);
        let it = Interpolator::new(&p).unwrap();
        let got = it.eval(qh, qn).unwrap();
        match (got, plane_oracle(&p, qh, qn)) {
            (Some(g), Some(o)) => prop_assert!((g - o).abs() < 1e-6 * (1.0 + o.abs()), "{g} vs {o}"),
            (None, None) => {}
            // Points within tolerance of an edge may land on either side.
            (g, o) => prop_assert!(false, "{g:?} vs {o:?}"),
        }
    }

    #[test]
    fn edit_distance_matches_recursive_oracle(r in prop::collection::vec(0u8..3, 0..6), h in prop::collection::vec(0u8..3, 0..6)) {
        fn lev(r: &[u8], h: &[u8]) -> usize {
            match (r.split_first(), h.split_first()) {
                (None, _) => h.len(),
                (_, None) => r.len(),
                (Some((a, rt)), Some((b, ht))) => {
                    (lev(rt, ht) + usize::from(a != b)).min(lev(rt, h) + 1).min(lev(r, ht) + 1)
                }
            }
        }
        prop_assert_eq!(edit_distance(&r, &h), lev(&r, &h));
    }
}

#[test]
fn contour_grid_spans_the_inputs() {
    let pts = [(0.5, 10.0, 80.0), (8.0, 10.0, 40.0), (0.5, 1000.0, 50.0), (8.0, 1000.0, 10.0)];
    let out = emit_contour(&pts, 5).unwrap();
    assert_eq!(out.len(), 25);
    assert!(out.iter().all(|p| p.wer_interp.is_some()));
    assert!((out[0].hours - 0.5).abs() < 1e-12 && (out[24].n_paired - 1000.0).abs() < 1e-9);
    assert!((out[0].wer_interp.unwrap() - 80.0).abs() < 1e-9);
    assert!(emit_contour(&pts[..2], 5).is_err());
}
