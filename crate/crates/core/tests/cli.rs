use std::collections::BTreeSet;
use std::path::Path;
use std::process::Command;

use cotok::cli::run;
use cotok::cotokenizer::AttentionMaps;
use cotok::flops::estimate;
use cotok::ingest::{normalize_words, read_qa};
use cotok::metrics::read_predictions;

fn cotok(args: &[&str]) -> i32 {
    run(std::iter::once("cotok").chain(args.iter().copied()))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        assert_eq!(cotok(&["synth", "--task", "temporal_order", "--n", "1000", "--seed", "7", "--out", p(out)]), 0);
    }
    let qa = std::fs::read(a.join("qa.tsv")).unwrap();
    assert_eq!(qa, std::fs::read(b.join("qa.tsv")).unwrap());
    assert_eq!(read_qa(&a.join("qa.tsv")).unwrap().len(), 1000);
}

#[test]
fn synth_can_render_videos() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    assert_eq!(cotok(&["synth", "--task", "frame_color", "--n", "2", "--out", p(&out), "--videos"]), 0);
    let ex = read_qa(&out.join("qa.tsv")).unwrap();
    let cfg = cotok::preset("toy").unwrap();
    let video = cotok::ingest::load_video(&ex[0].video, &out).unwrap();
    assert_eq!(video.frames.len(), cotok::ingest::SOURCE_FRAMES);
    assert!(cotok::ingest::clips_for_config(&video, &cfg).is_ok());
}

#[test]
fn profile_csv_matches_estimate() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("out.csv");
    assert_eq!(cotok(&["profile", "--preset", "two_stream", "--csv", p(&csv)]), 0);
    let want = estimate(&cotok::preset("two_stream").unwrap()).unwrap().to_csv();
    let got = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(got, want);
    assert!(got.lines().any(|l| l.starts_with("backbone,")));
}

#[test]
fn train_then_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data");
    assert_eq!(cotok(&["synth", "--task", "frame_color", "--n", "40", "--test", "12", "--seed", "2", "--out", p(&data)]), 0);
    let ck = root.join("ck");
    assert_eq!(
        cotok(&["train", "--preset", "toy", "--data", p(&data.join("qa.tsv")), "--out", p(&ck), "--steps", "30"]),
        0
    );
    for f in ["config.txt", "vocab.txt", "answers.txt", "model.ckpt", "train_log.csv"] {
        assert!(ck.join(f).exists(), "{f}");
    }
    let log = std::fs::read_to_string(ck.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().next(), Some("step,loss,wall_time"));
    assert_eq!(log.lines().count(), 31);

    let small = root.join("small.txt");
    std::fs::write(&small, "red\nblue\n").unwrap();
    let test = data.join("qa_test.tsv");
    let mut outputs = Vec::new();
    for run_id in 0..2 {
        let preds = root.join(format!("preds{run_id}.tsv"));
        let csv = root.join(format!("report{run_id}.csv"));
        let code = cotok(&[
            "eval", "--checkpoint", p(&ck), "--data", p(&test), "--decode", "masked", "--vocab", p(&small),
            "--predictions", p(&preds), "--csv", p(&csv),
        ]);
        assert_eq!(code, 0);
        outputs.push(std::fs::read(&preds).unwrap());
        let report = std::fs::read_to_string(&csv).unwrap();
        assert!(report.lines().last().unwrap().starts_with("all,12,"));
    }
    assert_eq!(outputs[0], outputs[1]);
    let allowed: BTreeSet<&str> = ["red", "blue"].into();
    let preds = read_predictions(&root.join("preds0.tsv")).unwrap();
    assert_eq!(preds.len(), 12);
    for pr in &preds {
        assert!(normalize_words(&pr.answer).iter().all(|w| allowed.contains(w.as_str())), "{:?}", pr);
    }

    let preds = root.join("open.tsv");
    assert_eq!(
        cotok(&["eval", "--checkpoint", p(&ck), "--data", p(&test), "--beam", "1", "--predictions", p(&preds)]),
        0
    );
    assert_eq!(read_predictions(&preds).unwrap().len(), 12);
}

#[test]
fn classifier_head_predicts_from_the_answer_set() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data");
    assert_eq!(cotok(&["synth", "--task", "repeat_count", "--n", "24", "--out", p(&data)]), 0);
    let ck = root.join("ck");
    let qa = data.join("qa.tsv");
    assert_eq!(cotok(&["train", "--preset", "toy", "--data", p(&qa), "--out", p(&ck), "--steps", "10", "--fc"]), 0);
    let preds = root.join("fc.tsv");
    assert_eq!(
        cotok(&["eval", "--checkpoint", p(&ck), "--data", p(&qa), "--decode", "fc", "--predictions", p(&preds)]),
        0
    );
    let answers = std::fs::read_to_string(ck.join("answers.txt")).unwrap();
    let set: BTreeSet<&str> = answers.lines().collect();
    for pr in read_predictions(&preds).unwrap() {
        assert!(set.contains(pr.answer.as_str()), "{}", pr.answer);
        assert!(pr.score <= 0.0);
    }
}

#[test]
fn export_attention_writes_maps_and_graymaps() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data");
    assert_eq!(cotok(&["synth", "--task", "temporal_order", "--n", "3", "--out", p(&data)]), 0);
    let out = root.join("att");
    let id = read_qa(&data.join("qa.tsv")).unwrap()[1].id.clone();
    let code = cotok(&[
        "export-attention", "--preset", "toy", "--data", p(&data.join("qa.tsv")), "--ids", &id, "--out", p(&out),
    ]);
    assert_eq!(code, 0);
    let cfg = cotok::preset("toy").unwrap().validate().unwrap();
    let ex_dir = out.join(&id);
    let mut texts = 0;
    for round in 0..cfg.fusion_layers {
        for geom in cfg.features() {
            let stem = format!("iter{round}_s{}_k{}", geom.stream, geom.scale);
            let path = ex_dir.join(format!("{stem}.txt"));
            let text = std::fs::read_to_string(&path).unwrap();
            let header: Vec<usize> = text.lines().next().unwrap().split(' ').map(|v| v.parse().unwrap()).collect();
            assert_eq!(header, vec![cfg.tokens_per_feature, geom.frames, geom.height, geom.width]);
            let maps = AttentionMaps::from_text(&text, &path).unwrap();
            assert_eq!(maps.values.len(), header.iter().product::<usize>());
            let pgm = std::fs::read(ex_dir.join(format!("{stem}_tok0_t0.pgm"))).unwrap();
            assert_eq!(&pgm[..2], b"P5");
            texts += 1;
        }
    }
    assert_eq!(texts, cfg.fusion_layers * cfg.features().len());
}

fn binary(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_cotok")).args(args).output().unwrap();
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
}

#[test]
fn exit_codes_distinguish_usage_from_runtime_failures() {
    let (code, err) = binary(&["profile", "--bogus"]);
    assert_eq!(code, 1, "{err}");
    assert_eq!(binary(&["frobnicate"]).0, 1);
    assert_eq!(binary(&["--help"]).0, 0);

    let (code, err) = binary(&["eval", "--checkpoint", "/nonexistent/ck", "--data", "/nonexistent/qa.tsv"]);
    assert_eq!(code, 2);
    assert_eq!(err.trim().lines().count(), 1, "{err}");
    assert!(err.contains("/nonexistent/ck"));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.txt");
    std::fs::write(&bad, "preset=toy\ntokens_per_feature=0\n").unwrap();
    let (code, err) = binary(&["profile", "--config", p(&bad)]);
    assert_eq!(code, 1);
    assert!(err.contains("tokens_per_feature"), "{err}");
    assert_eq!(binary(&["profile", "--preset", "nope"]).0, 1);
}
