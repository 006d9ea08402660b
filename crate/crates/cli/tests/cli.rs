//! Integration tests driving the `drrd` binary end to end.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use drrd_core::corpus::{parse_engagements, write_corpus};

fn drrd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_drrd"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_success(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn synth_small(path: &Path, seed: &str) {
    let out = drrd(&[
        "synth",
        "--events",
        "40",
        "--users",
        "100",
        "--horizon",
        "4",
        "--seed",
        seed,
        "--out",
        path.to_str().unwrap(),
    ]);
    assert_success(&out);
}

/// Train quickly at small dimensions; returns the checkpoint dir.
fn train_small(corpus: &Path, dir: &Path) {
    let out = drrd(&[
        "train",
        "--corpus",
        corpus.to_str().unwrap(),
        "--out-dir",
        dir.to_str().unwrap(),
        "--epochs",
        "6",
        "--d-v",
        "16",
        "--d-f",
        "8",
        "--dense-hidden",
        "8",
        "--embed-epochs",
        "6",
        "--infer-epochs",
        "10",
        "--patience",
        "0",
        "--seed",
        "5",
    ]);
    assert_success(&out);
}

#[test]
fn synth_requires_an_output_path() {
    let out = drrd(&["synth", "--events", "10"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn synth_is_deterministic_per_flags() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    synth_small(&a, "11");
    synth_small(&b, "11");
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    let c = dir.path().join("c.jsonl");
    synth_small(&c, "12");
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
}

#[test]
fn synth_output_is_parseable_and_balanced() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("corpus.jsonl");
    synth_small(&path, "3");
    let events = parse_engagements(fs::read(&path).unwrap().as_slice()).unwrap();
    assert_eq!(events.len(), 40);
    let rumours = events
        .iter()
        .filter(|e| e.label == drrd_core::Label::Rumour)
        .count();
    assert_eq!(rumours, 20);
}

#[test]
fn train_writes_all_artifacts_with_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus.jsonl");
    synth_small(&corpus, "7");
    let run = dir.path().join("run");
    train_small(&corpus, &run);

    for name in [
        "drrd.bin",
        "text_embed.bin",
        "user_embed.bin",
        "train_log.csv",
        "split.json",
        "effective_config.toml",
        "manifest.json",
    ] {
        assert!(run.join(name).exists(), "{name} missing");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    let files = manifest["files"].as_object().unwrap();
    assert_eq!(files.len(), 6);
    for (name, hash) in files {
        let actual = drrd_core::util::sha256_file(run.join(name)).unwrap();
        assert_eq!(hash.as_str().unwrap(), actual, "{name} hash mismatch");
    }

    let log = fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert!(log.starts_with("epoch,train_loss,val_loss\n"));
    assert_eq!(log.lines().count(), 7); // header + 6 epochs
}

#[test]
fn train_twice_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus.jsonl");
    synth_small(&corpus, "9");
    let run1 = dir.path().join("run1");
    let run2 = dir.path().join("run2");
    train_small(&corpus, &run1);
    train_small(&corpus, &run2);
    for name in ["drrd.bin", "text_embed.bin", "user_embed.bin", "manifest.json"] {
        assert_eq!(
            fs::read(run1.join(name)).unwrap(),
            fs::read(run2.join(name)).unwrap(),
            "{name} differs between identical runs"
        );
    }
}

#[test]
fn rerunning_with_the_echoed_config_reproduces_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus.jsonl");
    synth_small(&corpus, "13");
    let run1 = dir.path().join("run1");
    train_small(&corpus, &run1);

    // second run driven purely by the echoed config
    let run2 = dir.path().join("run2");
    let out = drrd(&[
        "train",
        "--config",
        run1.join("effective_config.toml").to_str().unwrap(),
        "--corpus",
        corpus.to_str().unwrap(),
        "--out-dir",
        run2.to_str().unwrap(),
    ]);
    assert_success(&out);
    assert_eq!(
        fs::read(run1.join("drrd.bin")).unwrap(),
        fs::read(run2.join("drrd.bin")).unwrap()
    );
}

#[test]
fn predict_probabilities_sum_to_one() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus.jsonl");
    synth_small(&corpus, "17");
    let run = dir.path().join("run");
    train_small(&corpus, &run);

    let out = drrd(&[
        "predict",
        "--corpus",
        corpus.to_str().unwrap(),
        "--checkpoint-dir",
        run.to_str().unwrap(),
    ]);
    assert_success(&out);
    let text = String::from_utf8(out.stdout).unwrap();
    let mut n = 0;
    for line in text.lines() {
        let parts: Vec<&str> = line.split(',').collect();
        assert_eq!(parts.len(), 4, "bad line {line}");
        let p_r: f64 = parts[1].parse().unwrap();
        let p_n: f64 = parts[2].parse().unwrap();
        assert!((p_r + p_n - 1.0).abs() < 1e-9);
        assert!(parts[3] == "rumour" || parts[3] == "non_rumour");
        n += 1;
    }
    assert_eq!(n, 40);
}

#[test]
fn huge_deadline_equals_no_deadline() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus.jsonl");
    synth_small(&corpus, "19");
    let run = dir.path().join("run");
    train_small(&corpus, &run);

    let plain = drrd(&[
        "predict",
        "--corpus",
        corpus.to_str().unwrap(),
        "--checkpoint-dir",
        run.to_str().unwrap(),
    ]);
    let capped = drrd(&[
        "predict",
        "--corpus",
        corpus.to_str().unwrap(),
        "--checkpoint-dir",
        run.to_str().unwrap(),
        "--deadline",
        "1e9",
    ]);
    assert_success(&plain);
    assert_success(&capped);
    assert_eq!(plain.stdout, capped.stdout);
}

#[test]
fn missing_corpus_is_a_data_error() {
    let out = drrd(&[
        "predict",
        "--corpus",
        "/nonexistent/events.jsonl",
        "--checkpoint-dir",
        "/nonexistent",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unreadable_corpus_fails_train_with_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("bad.jsonl");
    fs::write(&corpus, "not json\n").unwrap();
    let out = drrd(&[
        "train",
        "--corpus",
        corpus.to_str().unwrap(),
        "--out-dir",
        dir.path().join("run").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("line 1"), "stderr: {stderr}");
}

#[test]
fn invalid_synth_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = drrd(&[
        "synth",
        "--events",
        "10",
        "--affinity",
        "0.2",
        "--out",
        dir.path().join("x.jsonl").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn tampered_checkpoints_are_rejected_as_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus.jsonl");
    synth_small(&corpus, "23");
    let run = dir.path().join("run");
    train_small(&corpus, &run);

    // retrain the embeddings alone by swapping in another run's embed file
    let other_corpus = dir.path().join("other.jsonl");
    synth_small(&other_corpus, "24");
    let other_run = dir.path().join("other");
    train_small(&other_corpus, &other_run);
    fs::copy(other_run.join("text_embed.bin"), run.join("text_embed.bin")).unwrap();

    let out = drrd(&[
        "predict",
        "--corpus",
        corpus.to_str().unwrap(),
        "--checkpoint-dir",
        run.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("mismatch"), "stderr: {stderr}");
}

#[test]
fn foreign_corpus_universe_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus.jsonl");
    synth_small(&corpus, "29");
    let run = dir.path().join("run");
    train_small(&corpus, &run);

    // rename every id so nothing overlaps with the training universe
    let mut events = parse_engagements(fs::read(&corpus).unwrap().as_slice()).unwrap();
    for event in &mut events {
        event.event_id = format!("foreign-{}", event.event_id);
        for post in &mut event.posts {
            post.post_id = format!("foreign-{}", post.post_id);
            post.user_id = format!("foreign-{}", post.user_id);
        }
    }
    let foreign = dir.path().join("foreign.jsonl");
    let mut buf = Vec::new();
    write_corpus(&events, &mut buf).unwrap();
    fs::write(&foreign, buf).unwrap();

    let out = drrd(&[
        "eval",
        "--corpus",
        foreign.to_str().unwrap(),
        "--checkpoint-dir",
        run.to_str().unwrap(),
        "--out-dir",
        dir.path().join("evalrun").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("mismatch"), "stderr: {stderr}");
}

#[test]
fn eval_checkpoint_mode_emits_the_metrics_columns() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus.jsonl");
    synth_small(&corpus, "31");
    let run = dir.path().join("run");
    train_small(&corpus, &run);

    let eval_dir = dir.path().join("evalrun");
    let out = drrd(&[
        "eval",
        "--corpus",
        corpus.to_str().unwrap(),
        "--checkpoint-dir",
        run.to_str().unwrap(),
        "--out-dir",
        eval_dir.to_str().unwrap(),
        "--deadlines",
        "2,4,24",
    ]);
    assert_success(&out);

    let metrics = fs::read_to_string(eval_dir.join("metrics.csv")).unwrap();
    assert_eq!(
        metrics.lines().next().unwrap(),
        "setting,fold,class,accuracy,precision,recall,f1"
    );
    let curve = fs::read_to_string(eval_dir.join("early_detection.csv")).unwrap();
    assert_eq!(
        curve.lines().next().unwrap(),
        "deadline_hours,accuracy,n_no_evidence"
    );
    assert_eq!(curve.lines().count(), 4); // header + 3 deadlines
}

#[test]
fn diverged_embedding_training_exits_with_numeric_failure() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus.jsonl");
    synth_small(&corpus, "37");
    fs::write(
        dir.path().join("bad.toml"),
        "[embed]\nlr_start = 1e200\nlr_min = 1e200\n",
    )
    .unwrap();
    let out = drrd(&[
        "train",
        "--config",
        dir.path().join("bad.toml").to_str().unwrap(),
        "--corpus",
        corpus.to_str().unwrap(),
        "--out-dir",
        dir.path().join("run").to_str().unwrap(),
        "--epochs",
        "2",
        "--d-v",
        "8",
        "--d-f",
        "4",
        "--dense-hidden",
        "4",
    ]);
    assert_eq!(out.status.code(), Some(3), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}
