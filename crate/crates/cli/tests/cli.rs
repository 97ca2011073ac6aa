use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const TINY: &str = r#"
seed = 3
K = 32
L_max = 48
L_d = 32
H = 16
d_emb = 8
d_o = 8
T = 20
skip_stride = 5
epochs = 2
batch_size = 8

[datagen]
n = 200
max_atoms = 8

[omics]
hidden1 = 16
hidden2 = 16
epochs = 2
batch_size = 8

[text]
width = 16
heads = 2
layers = 1
ff_hidden = 16
epochs = 1
batch_size = 16

[diffusion]
blocks = 1
heads = 2
ff_hidden = 16

[eval]
held_out = 70
"#;

fn todi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_todi")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = todi(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn code(args: &[&str]) -> (i32, String) {
    let out = todi(args);
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
}

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new() -> Self {
        let w = Workspace { dir: tempfile::tempdir().unwrap() };
        fs::write(w.p("tiny.toml"), TINY).unwrap();
        ok(&["datagen", "--config", &w.s("tiny.toml"), "--out", &w.s("data")]);
        w
    }

    fn p(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn s(&self, rel: &str) -> String {
        self.p(rel).to_string_lossy().into_owned()
    }

    fn train(&self, what: &str, out: &str, extra: &[&str]) {
        let mut args = vec![what, "--config", "", "--corpus", "", "--out", ""];
        let (c, d, o) = (self.s("tiny.toml"), self.s("data/corpus.jsonl"), self.s(out));
        args[2] = &c;
        args[4] = &d;
        args[6] = &o;
        args.extend_from_slice(extra);
        ok(&args);
    }

    fn upstream(&self) {
        self.train("train-omics", "m/omics.ckpt", &[]);
        self.train("train-text", "m/text.ckpt", &[]);
    }

    /// Held-out tail of the corpus as a conditions file.
    fn conditions(&self) -> String {
        let text = fs::read_to_string(self.p("data/corpus.jsonl")).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        let mut out = String::new();
        for line in &lines[lines.len() - 10..] {
            let mut v: Value = serde_json::from_str(line).unwrap();
            let m = v.as_object_mut().unwrap();
            let selfies = m.remove("selfies").unwrap();
            m.insert("reference".into(), selfies);
            out.push_str(&v.to_string());
            out.push('\n');
        }
        fs::write(self.p("cond.jsonl"), out).unwrap();
        self.s("cond.jsonl")
    }
}

fn read(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn datagen_writes_identical_files_on_rerun() {
    let w = Workspace::new();
    for f in ["corpus.jsonl", "stats.json", "selfies_vocab.txt", "text_vocab.txt"] {
        assert!(w.p("data").join(f).exists(), "{f}");
    }
    ok(&["datagen", "--config", &w.s("tiny.toml"), "--out", &w.s("again")]);
    for f in ["corpus.jsonl", "stats.json", "selfies_vocab.txt", "text_vocab.txt"] {
        assert_eq!(read(&w.p("data").join(f)), read(&w.p("again").join(f)), "{f}");
    }
    assert_eq!(fs::read_to_string(w.p("data/corpus.jsonl")).unwrap().lines().count(), 200);
    ok(&["datagen", "--config", &w.s("tiny.toml"), "--n", "20", "--seed", "9", "--out", &w.s("small")]);
    assert_eq!(fs::read_to_string(w.p("small/corpus.jsonl")).unwrap().lines().count(), 20);
}

#[test]
fn config_errors_exit_2_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "seed = 1\nlearning_rate = 0.1\n").unwrap();
    let (c, err) = code(&["datagen", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(c, 2);
    assert!(err.contains("learning_rate"), "{err}");
    fs::write(&cfg, "lambda = -0.5\n").unwrap();
    assert_eq!(code(&["datagen", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]).0, 2);
    assert_eq!(code(&["train-diffusion", "--corpus", "x", "--ablation", "everything"]).0, 2);
}

#[test]
fn staged_training_is_deterministic_and_checks_upstream() {
    let w = Workspace::new();
    w.upstream();
    let up = ["--omics", &w.s("m/omics.ckpt"), "--text", &w.s("m/text.ckpt")].map(String::from);
    let up: Vec<&str> = up.iter().map(String::as_str).collect();
    w.train("train-diffusion", "m/diffusion.ckpt", &up);
    w.train("train-diffusion", "m2/diffusion.ckpt", &up);
    assert_eq!(read(&w.p("m/diffusion.ckpt")), read(&w.p("m2/diffusion.ckpt")));
    assert_eq!(read(&w.p("m/diffusion_loss.csv")), read(&w.p("m2/diffusion_loss.csv")));
    let csv = fs::read_to_string(w.p("m/omics_loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3, "header plus two epochs");
    w.train("train-omics", "m2/omics.ckpt", &[]);
    assert_eq!(read(&w.p("m/omics.ckpt")), read(&w.p("m2/omics.ckpt")));

    let (c, err) = code(&[
        "train-diffusion", "--config", &w.s("tiny.toml"), "--corpus", &w.s("data/corpus.jsonl"),
        "--omics", &w.s("m/omics.ckpt"), "--out", &w.s("m/x.ckpt"),
    ]);
    assert_eq!(c, 3);
    assert!(err.contains("text checkpoint"), "{err}");
    let (c, err) = code(&[
        "train-diffusion", "--config", &w.s("tiny.toml"), "--corpus", &w.s("data/corpus.jsonl"),
        "--omics", &w.s("nope.ckpt"), "--text", &w.s("m/text.ckpt"), "--out", &w.s("m/x.ckpt"),
    ]);
    assert_eq!(c, 3);
    assert!(err.contains("nope.ckpt"), "{err}");

    w.train("train-diffusion", "m/notext.ckpt", &["--ablation", "no-text", "--omics", &w.s("m/omics.ckpt")]);
    assert!(w.p("m/notext.ckpt").exists());
}

#[test]
fn generate_evaluate_round() {
    let w = Workspace::new();
    w.upstream();
    let up = ["--omics", &w.s("m/omics.ckpt"), "--text", &w.s("m/text.ckpt")].map(String::from);
    let up: Vec<&str> = up.iter().map(String::as_str).collect();
    w.train("train-diffusion", "m/diffusion.ckpt", &up);
    let cond = w.conditions();
    let gen = |out: &str, seed: &str| {
        let mut args = vec!["generate", "--checkpoint", "", "--conditions", &cond, "--n", "3", "--seed", seed, "--out", out];
        let ck = w.s("m/diffusion.ckpt");
        args[2] = &ck;
        args.extend_from_slice(&up);
        ok(&args);
    };
    gen(&w.s("g1.jsonl"), "5");
    gen(&w.s("g2.jsonl"), "5");
    assert_eq!(read(&w.p("g1.jsonl")), read(&w.p("g2.jsonl")));
    let text = fs::read_to_string(w.p("g1.jsonl")).unwrap();
    let blocks: Vec<Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(blocks.len(), 10);
    for (i, b) in blocks.iter().enumerate() {
        assert_eq!(b["condition"], i);
        let s = b["samples"].as_array().unwrap();
        assert_eq!(s.len(), 3);
        assert!(s.iter().all(|x| x["valid"] == true && x["noise_error"].as_f64().unwrap() >= 0.0));
    }

    ok(&["evaluate", "--generated", &w.s("g1.jsonl"), "--references", &cond, "--train", &w.s("data/corpus.jsonl"), "--out-dir", &w.s("rep"), "--pca"]);
    let header = fs::read_to_string(w.p("rep/report.csv")).unwrap();
    assert_eq!(
        header.lines().next().unwrap(),
        "set,validity,uniqueness,novelty,levenshtein,fcd,morgan,maccs_keys,bleu,hit_ratio"
    );
    let rep: Value = serde_json::from_str(&fs::read_to_string(w.p("rep/report.json")).unwrap()).unwrap();
    assert_eq!(rep[0]["metrics"]["validity"], 1.0);
    let hr = rep[0]["hit_ratio"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&hr));
    assert!(w.p("rep/hit_by_group.csv").exists());
    assert!(fs::read_to_string(w.p("rep/pca.csv")).unwrap().starts_with("pc1,pc2,kind"));

    // A free-text narrative with a profile still samples.
    let first: Value = serde_json::from_str(fs::read_to_string(&cond).unwrap().lines().next().unwrap()).unwrap();
    let narrative = serde_json::json!({
        "description": "Patient reports progressive memory loss and confusion over several months.",
        "omics": first["omics"],
    });
    fs::write(w.p("narrative.jsonl"), format!("{narrative}\n")).unwrap();
    let mut args = vec!["generate", "--checkpoint", "", "--conditions", "", "--n", "2", "--out", ""];
    let (ck, nc, no) = (w.s("m/diffusion.ckpt"), w.s("narrative.jsonl"), w.s("narr_out.jsonl"));
    args[2] = &ck;
    args[4] = &nc;
    args[8] = &no;
    args.extend_from_slice(&up);
    ok(&args);

    // Omics missing on a row the full model needs.
    fs::write(w.p("textonly.jsonl"), "{\"description\": \"The molecule contains an ether group.\"}\n").unwrap();
    let tc = w.s("textonly.jsonl");
    args[4] = &tc;
    let (c, err) = code(&args);
    assert_eq!(c, 4, "{err}");
}

#[test]
fn evaluate_self_comparison_and_schema_errors() {
    let w = Workspace::new();
    let corpus = w.s("data/corpus.jsonl");
    ok(&["evaluate", "--generated", &corpus, "--references", &corpus, "--out-dir", &w.s("self")]);
    let rep: Value = serde_json::from_str(&fs::read_to_string(w.p("self/report.json")).unwrap()).unwrap();
    let m = &rep[0]["metrics"];
    assert_eq!(m["levenshtein"], 1.0);
    assert!(m["fcd"].as_f64().unwrap() <= 1e-6);
    assert_eq!(m["morgan"], 1.0);
    assert!(rep[0]["hit_ratio"].is_null());

    fs::write(w.p("bad.jsonl"), "{\"selfies\": \"[C]\"}\n{oops\n").unwrap();
    let (c, err) = code(&["evaluate", "--generated", &w.s("bad.jsonl"), "--references", &corpus, "--out-dir", &w.s("x")]);
    assert_eq!(c, 1);
    assert!(err.contains("line 2"), "{err}");
}

#[test]
fn numeric_failure_exits_5() {
    let w = Workspace::new();
    fs::write(w.p("hot.toml"), TINY.replace("[omics]\n", "[omics]\nlr = 1e30\n")).unwrap();
    let (c, err) = code(&[
        "train-omics", "--config", &w.s("hot.toml"), "--corpus", &w.s("data/corpus.jsonl"), "--out", &w.s("hot.ckpt"),
    ]);
    assert_eq!(c, 5, "{err}");
}

#[test]
fn pipeline_sweep_and_ablations_emit_reports() {
    let w = Workspace::new();
    let (cfg, corpus) = (w.s("tiny.toml"), w.s("data/corpus.jsonl"));
    ok(&["pipeline", "--config", &cfg, "--corpus", &corpus, "--out-dir", &w.s("run")]);
    for f in ["omics.ckpt", "text.ckpt", "diffusion.ckpt", "diffusion_loss.csv", "generated.jsonl", "report.csv", "report.json"] {
        assert!(w.p("run").join(f).exists(), "{f}");
    }

    ok(&["lambda-sweep", "--config", &cfg, "--corpus", &corpus, "--out-dir", &w.s("sweep")]);
    let csv = fs::read_to_string(w.p("sweep/lambda_sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 8);
    assert!(lines[0].starts_with("lambda,validity"));
    let labels: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(labels, ["0", "0.1", "0.3", "0.5", "0.7", "0.9", "1"]);
    for l in &lines[1..] {
        assert!(l.split(',').skip(1).all(|v| !v.is_empty() && v != "NaN"), "{l}");
    }

    ok(&["ablations", "--config", &cfg, "--corpus", &corpus, "--out-dir", &w.s("abl")]);
    let csv = fs::read_to_string(w.p("abl/ablations.csv")).unwrap();
    let labels: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(labels, ["full", "no-text", "no-omics"]);
}
