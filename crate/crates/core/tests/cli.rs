use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const DESK: &str = "epochs = 2\nbatch_size = 16\nlr = 0.001\nmomentum = 0.9\n\n[weights]\naudio = 0.001\ntags = 0.05\ncontrastive = 1.0\ntemperature = 0.1\n";

fn coala(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coala"))
        .current_dir(dir)
        .env_remove("COALA_SEED")
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("spawn coala")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = coala(dir, args);
    assert!(
        out.status.success(),
        "coala {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn usage_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let help = coala(d, &["--help"]);
    assert_eq!(help.status.code(), Some(0));
    let text = String::from_utf8_lossy(&help.stdout);
    for sub in ["vocab", "preprocess", "synth", "train", "embed", "eval", "cca"] {
        assert!(text.contains(sub), "{sub}");
    }
    assert_eq!(coala(d, &["bogus"]).status.code(), Some(1));
    assert_eq!(coala(d, &["train", "--mode", "sideways"]).status.code(), Some(1));

    let missing = coala(d, &["preprocess", "--in", "nowhere.tsv", "--out", "p.bin"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nowhere.tsv"));
    assert!(!d.join("p.bin").exists());
}

#[test]
fn pipeline_smoke_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("desk.toml"), DESK).unwrap();
    ok(d, &["synth", "--out", "corpus", "--num-clips", "64", "--seed", "3"]);
    assert!(d.join("corpus/run.json").exists());
    ok(d, &["vocab", "--in", "corpus/manifest.tsv", "--out", "vocab.tsv"]);
    ok(d, &["preprocess", "--in", "corpus/manifest.tsv", "--out", "patches.bin"]);

    let train = |out: &str| {
        ok(
            d,
            &[
                "--threads", "1", "train", "--mode", "ae-c", "--data", "patches.bin", "--manifest",
                "corpus/manifest.tsv", "--vocab", "vocab.tsv", "--config", "desk.toml", "--seed", "11", "--out", out,
            ],
        )
    };
    train("run_a");
    train("run_b");
    for f in ["best.ckpt", "last.ckpt"] {
        let a = fs::read(d.join("run_a").join(f)).unwrap();
        let b = fs::read(d.join("run_b").join(f)).unwrap();
        assert!(a == b, "{f} differs between identical runs");
    }
    let run: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("run_a/run.json")).unwrap()).unwrap();
    assert_eq!(run["seed"], 11);
    assert_eq!(run["inputs"].as_array().unwrap().len(), 4);
    assert_eq!(run["inputs"][0]["sha256"].as_str().unwrap().len(), 64);
    assert!(d.join("run_a/config.toml").exists());
    let epochs = fs::read_to_string(d.join("run_a/epochs.jsonl")).unwrap();
    assert_eq!(epochs.lines().count(), 2);
    let steps = fs::read_to_string(d.join("run_a/log.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(steps.lines().next().unwrap()).unwrap();
    for key in ["L_a", "L_t", "L_xi", "total", "step", "epoch"] {
        assert!(first.get(key).is_some(), "{key}");
    }

    ok(d, &["embed", "--checkpoint", "run_a/best.ckpt", "--clips", "corpus", "--out", "emb.csv"]);
    ok(d, &["embed", "--mfcc", "--clips", "corpus", "--out", "mfcc.csv"]);
    let header = fs::read_to_string(d.join("emb.csv")).unwrap();
    assert!(header.starts_with("clip_id,label,split,v0,"));
    assert_eq!(header.lines().count(), 65);
    let report = ok(d, &["eval", "--features", "emb.csv", "--repeats", "2", "--epochs", "20", "--out", "eval.json"]);
    assert!(report.contains("accuracy"));
    ok(d, &["cca", "--embeddings", "aec=emb.csv", "--clips", "corpus", "--out", "cca.csv", "--max-components", "8"]);
    let cca = fs::read_to_string(d.join("cca.csv")).unwrap();
    assert_eq!(cca.lines().count(), 1 + 12 + 1);
}

#[test]
fn exploding_run_exits_with_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--out", "corpus", "--num-clips", "12"]);
    ok(d, &["vocab", "--in", "corpus/manifest.tsv", "--out", "vocab.tsv"]);
    ok(d, &["preprocess", "--in", "corpus/manifest.tsv", "--out", "patches.bin"]);
    fs::write(d.join("tiny.toml"), "epochs = 5\nbatch_size = 4\n\n[net]\nchannels = 4\ntag_layers = [8, 36]\n").unwrap();
    let out = coala(
        d,
        &[
            "train", "--data", "patches.bin", "--manifest", "corpus/manifest.tsv", "--vocab", "vocab.tsv",
            "--config", "tiny.toml", "--lr", "1e30", "--out", "run",
        ],
    );
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(d.join("run/last_good.ckpt").exists());
    let diag: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("run/diagnostic.json")).unwrap()).unwrap();
    assert!(diag["batch"].is_u64());
}
