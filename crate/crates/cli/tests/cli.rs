use std::path::Path;
use std::process::Command;

const BIN: &str = env!("CARGO_BIN_EXE_dcmtl");

const SMALL: &str = r#"
seed = 2
num_worlds = 40
cycle = 3

[model]
dim = 8
embed_dim = 6
depth = 2
attention_maps = 2

[[tasks]]
task = "icr"
tap = 1
batch_size = 4
iters = 3
step = 10

[[tasks]]
task = "vqa"
tap = 2
batch_size = 4
iters = 3
step = 10

[[tasks]]
task = "vg"
tap = 1
batch_size = 4
iters = 3
step = 10
"#;

fn dcmtl(out: &Path, args: &[&str]) -> std::process::Output {
    let config = out.join("small.toml");
    if !config.exists() {
        std::fs::create_dir_all(out).unwrap();
        std::fs::write(&config, SMALL).unwrap();
    }
    Command::new(BIN)
        .args(args)
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn ok(o: &std::process::Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn err(o: &std::process::Output) -> String {
    assert!(!o.status.success());
    String::from_utf8(o.stderr.clone()).unwrap()
}

#[test]
fn full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let report = ok(&dcmtl(out, &["gen-data"]));
    assert!(report.contains("40 worlds"), "{report}");
    assert!(out.join("worlds.jsonl").exists());
    assert!(out.join("resolved_config.toml").exists());

    let report = ok(&dcmtl(out, &["train"]));
    assert!(report.contains("stage 1: VQA for 3 iterations"), "{report}");
    assert!(report.contains("stage 3: VQA + VG + ICR for 9 iterations"), "{report}");
    let log = std::fs::read_to_string(out.join("train.log")).unwrap();
    assert_eq!(log.lines().count(), 18);
    assert!(log.lines().next().unwrap().starts_with("stage=1 iter=0 task=vqa"));
    assert!(log.lines().last().unwrap().starts_with("stage=3 iter=8 task=icr"));
    let hash = std::fs::read_to_string(out.join("model.ckpt.sha256")).unwrap();
    assert_eq!(hash.trim().len(), 64);
    let metrics = std::fs::read_to_string(out.join("metrics.log")).unwrap();
    assert!(metrics.contains("\"final\""));

    let ckpt = out.join("model.ckpt");
    let ckpt = ckpt.to_str().unwrap();
    let table = ok(&dcmtl(out, &["eval", "--checkpoint", ckpt, "--split", "test"]));
    assert!(table.contains("VQA + VG + ICR"), "{table}");
    assert!(out.join("eval_test.json").exists());

    let dump = ok(&dcmtl(out, &["dump-attention", "--checkpoint", ckpt, "--samples", "0,5"]));
    let parsed: serde_json::Value = serde_json::from_str(&dump).unwrap();
    assert_eq!(parsed.as_array().unwrap().len(), 2);
    let e = err(&dcmtl(out, &["dump-attention", "--checkpoint", ckpt, "--samples", "999"]));
    assert!(e.starts_with("error[E_INPUT]"), "{e}");
}

#[test]
fn training_is_reproducible() {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut outputs = Vec::new();
    for d in &dirs {
        ok(&dcmtl(d.path(), &["gen-data"]));
        ok(&dcmtl(d.path(), &["train"]));
        outputs.push((
            std::fs::read_to_string(d.path().join("train.log")).unwrap(),
            std::fs::read(d.path().join("model.ckpt")).unwrap(),
        ));
    }
    assert_eq!(outputs[0], outputs[1]);
    let d = tempfile::tempdir().unwrap();
    ok(&dcmtl(d.path(), &["gen-data"]));
    ok(&dcmtl(d.path(), &["train", "--seed", "3"]));
    assert_ne!(std::fs::read(d.path().join("model.ckpt")).unwrap(), outputs[0].1);
}

#[test]
fn trainval_regime_refuses_val() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    ok(&dcmtl(out, &["gen-data", "--regime", "vqa-trainval"]));
    let stages = "stages=[[\"vqa\"]]";
    ok(&dcmtl(out, &["train", "--set", stages]));
    let ckpt = out.join("model.ckpt");
    let ckpt = ckpt.to_str().unwrap();
    let e = err(&dcmtl(out, &["eval", "--set", stages, "--checkpoint", ckpt, "--split", "val"]));
    assert!(e.starts_with("error[E_REGIME]"), "{e}");
    ok(&dcmtl(out, &["eval", "--set", stages, "--checkpoint", ckpt, "--split", "test"]));
}

#[test]
fn errors_are_single_coded_lines() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let e = err(&dcmtl(out, &["train"]));
    assert!(e.starts_with("error[E_IO]"), "{e}");
    assert_eq!(e.lines().count(), 1);

    let e = err(&dcmtl(out, &["gen-data", "--set", "tasks.0.tap=7"]));
    assert!(e.starts_with("error[E_TAP]"), "{e}");
    let e = err(&dcmtl(out, &["gen-data", "--set", "nonsense=1"]));
    assert!(e.starts_with("error[E_CONFIG]"), "{e}");

    ok(&dcmtl(out, &["gen-data"]));
    std::fs::write(out.join("worlds.jsonl"), "{\"not\": \"a world\"}\n").unwrap();
    let e = err(&dcmtl(out, &["train"]));
    assert!(e.starts_with("error[E_PARSE]"), "{e}");

    ok(&dcmtl(out, &["gen-data"]));
    let e = err(&dcmtl(out, &["train", "--set", "cycle=100"]));
    assert!(e.starts_with("error[E_PLAN]"), "{e}");
}
