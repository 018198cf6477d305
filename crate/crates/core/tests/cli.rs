//! End-to-end runs of the `longrep` binary on a tiny configuration.

use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[corpus]
patients = { train = 16, validation = 3, test = 3 }
image_side = 16

[tokenizer]
budget = 270

[model]
d_model = 16
layers = 1
heads = 2
ff_width = 32
max_positions = 192
image_side = 16
patch_size = 8
encoder_width = 8

[teacher_forcing]
epochs = 1
max_prompt = 64
max_target = 96
max_new_tokens = 32

[adaptation]
epochs = 1
max_prompt = 64
max_target = 96
max_new_tokens = 32

[scst]
batch_size = 4
validations_per_epoch = 2
max_prompt = 64
max_target = 96
max_new_tokens = 32

[decode]
strategy = "greedy"
max_new_tokens = 32
"#;

fn longrep(dir: &Path, args: &[&str]) -> Output {
    let cfg = dir.join("tiny.toml");
    if !cfg.exists() {
        std::fs::write(&cfg, TINY).unwrap();
    }
    Command::new(env!("CARGO_BIN_EXE_longrep"))
        .current_dir(dir)
        .args(["--config", cfg.to_str().unwrap()])
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = longrep(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    longrep(dir, args).status.code().unwrap()
}

#[test]
fn corpus_train_generate_evaluate() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let first = ok(d, &["corpus", "--out", "corpus"]);
    assert!(first.contains("digest"));
    let again = ok(d, &["corpus", "--out", "corpus2"]);
    assert_eq!(first.replace("corpus2", "corpus"), again.replace("corpus2", "corpus"));
    for f in ["train.jsonl", "validation.jsonl", "test.jsonl"] {
        assert_eq!(std::fs::read(d.join("corpus").join(f)).unwrap(), std::fs::read(d.join("corpus2").join(f)).unwrap());
    }

    ok(d, &["train", "--corpus", "corpus", "--out", "multi", "--conditioning", "multi"]);
    for f in ["vocab.json", "best.ckpt", "last.ckpt", "manifest.json", "config.toml"] {
        assert!(d.join("multi").join(f).exists(), "missing {f}");
    }

    let greedy = ok(d, &["generate", "--run", "multi", "--corpus", "corpus"]);
    let beam1 = ok(d, &["generate", "--run", "multi", "--corpus", "corpus", "--strategy", "beam", "--beams", "1"]);
    assert_eq!(greedy, beam1);
    let rows: serde_json::Value = serde_json::from_str(&greedy).unwrap();
    assert!(!rows.as_array().unwrap().is_empty());
    let pid = rows[0]["patient_id"].as_str().unwrap().to_string();

    let one = ok(d, &["generate", "--run", "multi", "--corpus", "corpus", "--study", &format!("{pid}:1")]);
    assert_eq!(serde_json::from_str::<serde_json::Value>(&one).unwrap().as_array().unwrap().len(), 1);
    assert_eq!(code(d, &["generate", "--run", "multi", "--corpus", "corpus", "--study", "nobody:1"]), 2);
    assert_eq!(code(d, &["generate", "--run", "multi", "--corpus", "corpus", "--study", "nobody"]), 1);

    let e1 = ok(d, &["evaluate", "--run", "multi", "--corpus", "corpus"]);
    let e2 = ok(d, &["evaluate", "--run", "multi", "--corpus", "corpus"]);
    assert_eq!(e1, e2);
    let report: serde_json::Value = serde_json::from_str(&e1).unwrap();
    assert!(report["aggregate"]["f1"].is_number());

    // Longitudinal adaptation of the multi-image run, then SCST on its own reports.
    ok(d, &["train", "--corpus", "corpus", "--out", "long", "--conditioning", "longitudinal", "--init", "multi"]);
    ok(d, &["train", "--corpus", "corpus", "--out", "scst", "--stage", "scst", "--conditioning", "longitudinal", "--prompt", "generated", "--init", "long"]);
    let plan: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("scst/plan.json")).unwrap()).unwrap();
    assert!(!plan.as_array().unwrap().is_empty());
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("scst/manifest.json")).unwrap()).unwrap();
    assert!(manifest["run"]["cache_peak"].as_u64().unwrap() <= 8);

    let sub = ok(d, &["evaluate", "--run", "long", "--corpus", "corpus", "--subset", "has-previous", "--prompt-mode", "generated"]);
    assert!(serde_json::from_str::<serde_json::Value>(&sub).is_ok());
}

#[test]
fn contract_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(code(d, &["train", "--corpus", "missing", "--out", "o"]), 2);
    ok(d, &["corpus", "--out", "corpus"]);
    assert_eq!(code(d, &["train", "--corpus", "corpus", "--out", "o", "--stage", "scst"]), 2);
    assert_eq!(code(d, &["evaluate", "--run", "nothing-here", "--corpus", "corpus"]), 2);
    assert_eq!(code(d, &["train", "--corpus", "corpus", "--out", "o", "--set", "model.heads=3"]), 2);
    assert_eq!(code(d, &["train", "--corpus", "corpus", "--out", "o", "--conditioning", "single", "--prompt", "radiologist"]), 1);
}
