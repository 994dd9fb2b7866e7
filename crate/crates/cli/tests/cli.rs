use std::path::Path;
use std::process::{Command, Output};

fn wordbridge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wordbridge")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn ok(out: &Output) -> String {
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(out.status.success(), "stdout:\n{stdout}\nstderr:\n{}", String::from_utf8_lossy(&out.stderr));
    stdout
}

fn small_spec(dir: &Path) -> String {
    let spec = dir.join("spec.toml");
    std::fs::write(&spec, "vocab_size = 6\ntokens_per_word = 4\ntest_tokens_per_word = 2\n").unwrap();
    spec.display().to_string()
}

/// Tiny network and a short run, enough to exercise the plumbing.
const FAST: &[&str] = &[
    "--encoder-hidden", "8", "--audio-decoder-hidden", "8", "--text-decoder-hidden", "8",
    "--phonetic-dim", "4", "--speaker-dim", "4", "--embedding-dim", "4", "--max-steps", "4", "--batch-size", "4",
];

#[test]
fn help_lists_every_subcommand() {
    let help = ok(&wordbridge(&["--help"]));
    for cmd in ["synth", "train", "align", "decode", "score", "spectrum", "ablate", "cycle-study"] {
        assert!(help.contains(cmd), "missing {cmd}");
    }
    let train = ok(&wordbridge(&["train", "--help"]));
    for flag in ["--alpha", "--lambda", "--lr", "--beam", "--lambda-prime", "--n-critic", "--gp-weight", "--seed", "--config"] {
        assert!(train.contains(flag), "missing {flag}");
    }
}

#[test]
fn synth_train_decode_score_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let spec = small_spec(dir);
    let data = dir.join("data");
    ok(&wordbridge(&["synth", "--spec", &spec, "--seed", "3", "-o", data.to_str().unwrap()]));
    let manifest = data.join("train/manifest.jsonl");
    let test_manifest = data.join("test/manifest.jsonl");
    let lexicon = data.join("lexicon.txt");
    assert!(manifest.exists() && test_manifest.exists() && lexicon.exists());

    let model = dir.join("model");
    let mut args = vec!["train", "--train-manifest", manifest.to_str().unwrap(), "--lexicon", lexicon.to_str().unwrap(), "--pair-fraction", "0.5", "-o", model.to_str().unwrap()];
    args.extend_from_slice(FAST);
    ok(&wordbridge(&args));
    for f in ["model.ckpt", "lm.json", "history.json", "train_log.jsonl", "train_summary.json"] {
        assert!(model.join(f).exists(), "missing {f}");
    }

    let dec = dir.join("dec");
    let mut args: Vec<String> = vec![
        "decode".into(), "--checkpoint".into(), model.join("model.ckpt").to_str().unwrap().to_owned(),
        "--manifest".into(), test_manifest.to_str().unwrap().to_owned(), "--lexicon".into(), lexicon.to_str().unwrap().to_owned(),
        "--lm".into(), model.join("lm.json").to_str().unwrap().to_owned(), "-o".into(), dec.to_str().unwrap().to_owned(),
    ];
    args.extend(FAST.iter().map(|s| s.to_string()));
    ok(&wordbridge(&args.iter().map(String::as_str).collect::<Vec<_>>()));
    let lines = std::fs::read_to_string(dec.join("decode.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(lines.lines().next().unwrap()).unwrap();
    assert!(first["words"].is_array() && first["utterance_id"].is_string());

    let scored = ok(&wordbridge(&[
        "score", "--hyp", dec.join("decode.jsonl").to_str().unwrap(), "--manifest", test_manifest.to_str().unwrap(),
        "--lexicon", lexicon.to_str().unwrap(),
    ]));
    assert!(scored.starts_with("WER "), "{scored}");
}

#[test]
fn separate_strategy_writes_alignment_and_align_refits() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let spec = small_spec(dir);
    let out = dir.join("sep");
    let mut args = vec!["train", "--synth-spec", &spec, "--strategy", "separate", "--align-dim", "3", "--align-steps", "50", "--critic-hidden", "8", "-o", out.to_str().unwrap()];
    args.extend_from_slice(FAST);
    ok(&wordbridge(&args));
    assert!(out.join("alignment.bin").exists());
    let re = dir.join("re");
    let ckpt = out.join("model.ckpt");
    let mut args = vec!["align", "--checkpoint", ckpt.to_str().unwrap(), "--synth-spec", &spec, "--align-dim", "3", "--align-steps", "50", "-o", re.to_str().unwrap()];
    args.extend_from_slice(FAST);
    let printed = ok(&wordbridge(&args));
    assert!(printed.starts_with("d=3"), "{printed}");
}

#[test]
fn grid_commands_write_csv_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let spec = small_spec(dir);
    let s = dir.join("s");
    let mut args = vec!["spectrum", "--synth-spec", &spec, "--hours", "0.0003,0.0006", "--n-paired", "2,4", "--contour-resolution", "3", "-o", s.to_str().unwrap()];
    args.extend_from_slice(FAST);
    ok(&wordbridge(&args));
    let csv = std::fs::read_to_string(s.join("spectrum.csv")).unwrap();
    assert!(csv.starts_with("hours,n_paired,wer,seed,status\n"), "{csv}");
    assert_eq!(csv.lines().count(), 5);
    assert!(std::fs::read_to_string(s.join("contour.csv")).unwrap().starts_with("hours,n_paired,wer_interp\n"));
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(s.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["rows"].as_array().unwrap().len(), 4);
    assert!(manifest["config"]["train"]["adam"]["learning_rate"].is_number());

    let a = dir.join("a");
    let mut args = vec!["ablate", "--synth-spec", &spec, "--n-paired", "4", "--drop", "embedding,cross_text", "-o", a.to_str().unwrap()];
    args.extend_from_slice(FAST);
    ok(&wordbridge(&args));
    let csv = std::fs::read_to_string(a.join("ablation.csv")).unwrap();
    assert!(csv.starts_with("dropped_term,n_paired,wer,seed\nnone,"), "{csv}");
    assert_eq!(csv.lines().count(), 4);

    let c = dir.join("c");
    let mut args = vec!["cycle-study", "--synth-spec", &spec, "--n-paired", "2,4", "-o", c.to_str().unwrap()];
    args.extend_from_slice(FAST);
    ok(&wordbridge(&args));
    let csv = std::fs::read_to_string(c.join("cycle.csv")).unwrap();
    assert!(csv.starts_with("cycle_enabled,n_paired,wer,seed\n"));
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn failed_cells_give_nonzero_exit() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = small_spec(tmp.path());
    let out = tmp.path().join("f");
    // More pairs than annotated words: every run fails.
    let mut args = vec!["ablate", "--synth-spec", &spec, "--n-paired", "100000", "-o", out.to_str().unwrap()];
    args.extend_from_slice(FAST);
    let res = wordbridge(&args);
    assert!(!res.status.success());
    assert!(out.join("manifest.json").exists() && out.join("ablation.csv").exists());
}

#[test]
fn bad_flags_are_rejected() {
    assert!(!wordbridge(&["train", "--alpha", "1,2"]).status.success());
    assert!(!wordbridge(&["ablate", "--n-paired", "3", "--drop", "bogus"]).status.success());
}
