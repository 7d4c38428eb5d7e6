//! End-to-end checks of the command-line surface: the individual
//! subcommands chained the way a user would chain them, plus the exit-code
//! contract. Model and corpus sizes are kept tiny — these tests check
//! plumbing, not learning.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_circuit-lab"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary should launch")
}

fn assert_ok(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed with {:?}:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn assert_exit(out: &Output, code: i32, what: &str) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "{what}: expected exit {code}, got {:?}:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_configs(dir: &Path) -> (PathBuf, PathBuf) {
    let model = dir.join("model.json");
    std::fs::write(
        &model,
        serde_json::json!({
            "n_layers": 1, "n_heads": 2, "d_model": 8, "d_mlp": 16,
            "vocab_size": 0, "max_seq_len": 48, "tie_lm_head": true, "seed": 1
        })
        .to_string(),
    )
    .unwrap();
    let train = dir.join("train.json");
    std::fs::write(
        &train,
        serde_json::json!({
            "epochs": 1, "batch_size": 8, "lr": 1e-3, "weight_decay": 0.01,
            "beta1": 0.9, "beta2": 0.999, "eps": 1e-8, "grad_clip": 1.0,
            "patience": 0, "min_improvement": 1e-5, "seed": 2
        })
        .to_string(),
    )
    .unwrap();
    (model, train)
}

fn gen_corpus(dir: &Path, seed: &str) {
    let out = run(&[
        "gen-corpus",
        "--examples", "40",
        "--sentences", "4",
        "--salient", "1",
        "--vocab-words", "60",
        "--seed", seed,
        "--out", p(dir),
    ]);
    assert_ok(&out, "gen-corpus");
}

#[test]
fn subcommand_chain_produces_expected_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let corpus = root.join("corpus");
    gen_corpus(&corpus, "3");
    for f in ["train.jsonl", "val.jsonl", "test.jsonl", "tokenizer.json", "manifest.json"] {
        assert!(corpus.join(f).is_file(), "gen-corpus should write {f}");
    }

    let (model_cfg, train_cfg) = write_configs(root);
    let base_dir = root.join("base");
    let out = run(&[
        "train",
        "--corpus", p(&corpus),
        "--model-config", p(&model_cfg),
        "--train-config", p(&train_cfg),
        "--objective", "lm",
        "--out", p(&base_dir),
    ]);
    assert_ok(&out, "train");
    for f in ["model.ckpt", "history.csv", "manifest.json"] {
        assert!(base_dir.join(f).is_file(), "train should write {f}");
    }
    let base_ckpt = base_dir.join("model.ckpt");

    let ft_dir = root.join("finetuned");
    let out = run(&[
        "finetune",
        "--base", p(&base_ckpt),
        "--corpus", p(&corpus),
        "--train-config", p(&train_cfg),
        "--out", p(&ft_dir),
    ]);
    assert_ok(&out, "finetune");
    let ft_ckpt = ft_dir.join("model.ckpt");
    assert!(ft_ckpt.is_file());

    let tokenizer = corpus.join("tokenizer.json");
    let test_jsonl = corpus.join("test.jsonl");
    let pre_trc = root.join("base.trc");
    let post_trc = root.join("ft.trc");
    for (ckpt, tag, trc) in [(&base_ckpt, "base", &pre_trc), (&ft_ckpt, "fine-tuned", &post_trc)] {
        let out = run(&[
            "trace",
            "--model", p(ckpt),
            "--corpus", p(&test_jsonl),
            "--tokenizer", p(&tokenizer),
            "--tag", tag,
            "--out", p(trc),
        ]);
        assert_ok(&out, "trace");
        assert!(trc.is_file());
    }

    let analysis = root.join("analysis");
    let out = run(&["analyze", "--pre", p(&pre_trc), "--post", p(&post_trc), "--out", p(&analysis)]);
    assert_ok(&out, "analyze");
    for f in [
        "kl.csv", "entropy_pre.csv", "entropy_post.csv", "entropy_diff.csv",
        "entropy_fraction.csv", "actmag.csv", "layer_kl.csv", "neurons_layer0.csv",
        "meta.json", "latents_pca3.csv", "manifest.json",
    ] {
        assert!(analysis.join(f).is_file(), "analyze should write {f}");
    }

    let circuit = root.join("circuit.json");
    let out = run(&[
        "circuit",
        "--pre", p(&pre_trc),
        "--post", p(&post_trc),
        "--k", "1",
        "--out", p(&circuit),
    ]);
    assert_ok(&out, "circuit");
    assert!(circuit.is_file());

    let lora_dir = root.join("lora");
    let out = run(&[
        "lora",
        "--base", p(&base_ckpt),
        "--corpus", p(&corpus),
        "--circuit", p(&circuit),
        "--rank", "2",
        "--train-config", p(&train_cfg),
        "--out", p(&lora_dir),
    ]);
    assert_ok(&out, "lora");
    let adapters = lora_dir.join("lora.adapters");
    assert!(adapters.is_file());

    let eval_dir = root.join("scores");
    let out = run(&[
        "eval",
        "--corpus", p(&test_jsonl),
        "--tokenizer", p(&tokenizer),
        "--base", p(&base_ckpt),
        "--finetuned", p(&ft_ckpt),
        "--adapters", p(&adapters),
        "--max-new", "8",
        "--out", p(&eval_dir),
    ]);
    assert_ok(&out, "eval");
    assert!(eval_dir.join("rouge.csv").is_file());
    let table = String::from_utf8_lossy(&out.stdout).to_string();
    for label in ["Base", "Fine-tuned", "LoRA-targeted"] {
        assert!(table.contains(label), "eval output should list {label}: {table}");
    }

    let heatmaps = root.join("heatmaps");
    let report_md = root.join("report.md");
    let out = run(&[
        "report",
        "--dir", p(&analysis),
        "--heatmaps", p(&heatmaps),
        "--out", p(&report_md),
    ]);
    assert_ok(&out, "report");
    assert!(report_md.is_file());
    assert!(heatmaps.join("kl.pgm").is_file());
    assert!(heatmaps.join("entropy_diff.pgm").is_file());
}

#[test]
fn gen_corpus_is_deterministic_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    gen_corpus(&a, "5");
    gen_corpus(&b, "5");
    gen_corpus(&c, "6");
    let read = |d: &Path| std::fs::read(d.join("train.jsonl")).unwrap();
    assert_eq!(read(&a), read(&b), "same seed must reproduce the corpus bitwise");
    assert_ne!(read(&a), read(&c), "a different seed should change the corpus");
}

#[test]
fn exit_codes_follow_the_contract() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();

    // Unusable invocation: clap rejects the unknown flag.
    assert_exit(&run(&["gen-corpus", "--no-such-flag"]), 2, "unknown flag");

    // Unusable environment: a non-numeric worker cap.
    let out = bin()
        .env("CIRCUIT_LAB_THREADS", "many")
        .args(["gen-corpus", "--examples", "10", "--out", p(&root.join("x"))])
        .output()
        .unwrap();
    assert_exit(&out, 2, "bad CIRCUIT_LAB_THREADS");

    // Bad data: a checkpoint path that does not exist.
    let out = run(&[
        "trace",
        "--model", p(&root.join("missing.ckpt")),
        "--corpus", p(&root.join("missing.jsonl")),
        "--tokenizer", p(&root.join("missing.json")),
        "--tag", "x",
        "--out", p(&root.join("out.trc")),
    ]);
    assert_exit(&out, 3, "missing checkpoint");

    // Refused comparison: traces taken over different example sets (the
    // val and test splits of one corpus — same tokenizer, different
    // fingerprints).
    let corpus = root.join("ca");
    gen_corpus(&corpus, "7");
    let (model_cfg, train_cfg) = write_configs(root);
    let base = root.join("m");
    assert_ok(
        &run(&[
            "train",
            "--corpus", p(&corpus),
            "--model-config", p(&model_cfg),
            "--train-config", p(&train_cfg),
            "--objective", "lm",
            "--out", p(&base),
        ]),
        "train",
    );
    let ckpt = base.join("model.ckpt");
    let trc_a = root.join("a.trc");
    let trc_b = root.join("b.trc");
    for (jsonl, trc) in [("test.jsonl", &trc_a), ("val.jsonl", &trc_b)] {
        assert_ok(
            &run(&[
                "trace",
                "--model", p(&ckpt),
                "--corpus", p(&corpus.join(jsonl)),
                "--tokenizer", p(&corpus.join("tokenizer.json")),
                "--tag", "t",
                "--out", p(trc),
            ]),
            "trace",
        );
    }
    let out = run(&["analyze", "--pre", p(&trc_a), "--post", p(&trc_b), "--out", p(&root.join("an"))]);
    assert_exit(&out, 5, "fingerprint mismatch");
}
