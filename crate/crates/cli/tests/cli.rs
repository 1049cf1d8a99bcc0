//! End-to-end runs of the `flava` binary.

use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "model.hidden_size=16",
    "model.num_heads=2",
    "model.intermediate_size=32",
    "model.image_layers=1",
    "model.text_layers=1",
    "model.multimodal_layers=1",
    "model.codebook_size=16",
    "model.text_vocab_size=64",
    "optim.batch_size=4",
    "optim.total_updates=8",
    "optim.warmup_updates=2",
    "train.budget=8",
    "train.eval_interval=4",
    "train.checkpoint_interval=4",
    "train.codebook_fit_images=8",
    "datasets.0.source=synthetic:8",
    "datasets.1.source=synthetic:8",
    "datasets.2.source=synthetic:8",
];

fn flava(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flava"))
        .args(args)
        .env_remove("FLAVA_OUT")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny_pretrain(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["pretrain", "--out", out.to_str().unwrap()];
    for s in TINY {
        args.extend(["--set", s]);
    }
    args.extend(extra);
    flava(&args)
}

fn error_line(o: &Output) -> String {
    stderr(o).lines().next().unwrap_or_default().to_string()
}

#[test]
fn unknown_subcommand_prints_usage() {
    let o = flava(&["bogus"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(error_line(&o).starts_with("error category=usage message="));
    assert!(stderr(&o).contains("Usage:"));
    let o = flava(&["pretrain", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn config_and_input_errors_are_categorized() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = flava(&["pretrain", "--out", out.to_str().unwrap(), "--set", "model.nope=1"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(error_line(&o).starts_with("error category=config "));
    assert_eq!(stderr(&o).lines().count(), 1);

    let o = flava(&["pretrain", "--out", out.to_str().unwrap(), "--config", "preset:nope"]);
    assert_eq!(o.status.code(), Some(3));

    let o = flava(&["eval", "retrieval", "--checkpoint", "/nonexistent.ckpt", "--data", "synthetic:4"]);
    assert_eq!(o.status.code(), Some(4));
    assert!(error_line(&o).starts_with("error category="));
}

#[test]
fn verify_global_contrastive_reports_both_variants() {
    let o = flava(&["verify-global-contrastive", "--workers", "4", "--batch", "32"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.lines().any(|l| l.starts_with("variant=global") && l.ends_with("pass=true")));
    assert!(out.lines().any(|l| l.starts_with("variant=local") && l.ends_with("pass=true")));
    let o = flava(&["verify-global-contrastive", "--workers", "3", "--batch", "32"]);
    assert!(!o.status.success());
    assert!(error_line(&o).starts_with("error category="));
}

#[test]
fn pretrain_is_reproducible_and_evaluable() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = tiny_pretrain(out, &["--seed", "7"]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(stdout(&o).contains("event=summary final_step=8"));
    }
    let log = |d: &Path| std::fs::read_to_string(d.join("metrics.log")).unwrap();
    assert_eq!(log(&a), log(&b));
    let resolved = std::fs::read_to_string(a.join("resolved_config.toml")).unwrap();
    assert!(resolved.contains("seed = 7"));
    assert!(a.join("invocation.json").exists());

    // Kill at step 4, then resume from its checkpoint into a fresh directory.
    let c = dir.path().join("c");
    let o = tiny_pretrain(&c, &["--seed", "7", "--stop-after", "4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ckpt = c.join("checkpoint_step4.ckpt");
    let o = flava(&["pretrain", "--out", c.to_str().unwrap(), "--resume", ckpt.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(log(&a), log(&c));

    let ckpt = a.join("checkpoint_step8.ckpt");
    let ck = ckpt.to_str().unwrap();
    let report = dir.path().join("report");
    let o = flava(&["eval", "retrieval", "--checkpoint", ck, "--data", "synthetic:8:9", "--out", report.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    for m in ["IR@1", "IR@5", "TR@1", "TR@5"] {
        assert!(out.contains(&format!("task=retrieval metric={m} value=")), "{out}");
    }
    let rows: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(report.join("report.json")).unwrap()).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 4);

    let o = flava(&["eval", "zeroshot", "--checkpoint", ck, "--data", "synthetic:16", "--template", "a {} object"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("task=zeroshot metric=accuracy value="));

    let o = flava(&["eval", "probe", "--checkpoint", ck, "--data", "synthetic:32"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("task=probe metric=accuracy value="));

    let o = flava(&["eval", "finetune", "--checkpoint", ck, "--data", "synthetic:32", "--task", "multimodal", "--recipe", "desk"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("task=finetune metric=accuracy value="));
}

#[test]
fn corpus_and_tokenizer_commands() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("y.jsonl"),
        concat!(
            "{\"image_hash\": \"a\", \"description\": \"a boat on the lake\"}\n",
            "{\"image_hash\": \"b\", \"description\": \"ok\", \"title\": \"un bateau sur le lac\"}\n",
        ),
    )
    .unwrap();
    std::fs::write(dir.path().join("sources.json"), "{\"sources\": [{\"tag\": \"yfcc100m\", \"path\": \"y.jsonl\"}]}").unwrap();
    let out = dir.path().join("corpus");
    let o = flava(&["corpus", "build", "--sources", dir.path().join("sources.json").to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let s = stdout(&o);
    assert!(s.contains("pairs=1") && s.contains("rejected.language=1"), "{s}");
    assert!(out.join("manifest.json").exists() && out.join("shard_00000.jsonl").exists());

    let tok = dir.path().join("tok");
    let mut args = vec!["tokenizer", "fit", "--out", tok.to_str().unwrap()];
    for s in TINY {
        args.extend(["--set", s]);
    }
    let o = flava(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("codebook_size=16"));
    assert!(tok.join("codebook.ckpt").exists() && tok.join("resolved_config.toml").exists());
}
