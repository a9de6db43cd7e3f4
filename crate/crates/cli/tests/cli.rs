use std::path::Path;
use std::process::{Command, Output};

fn smar(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_smar"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn smar")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = smar(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    smar(dir, args).status.code().expect("exit code")
}

const OUTPUTS: [&str; 12] = [
    "data.jsonl",
    "top.jsonl",
    "band.jsonl",
    "anchors.jsonl",
    "model.json",
    "eval.csv",
    "exp/report.csv",
    "exp/summary.json",
    "exp/plot.svg",
    "means.csv",
    "plot.svg",
    "validate.txt",
];

fn pipeline(dir: &Path) {
    std::fs::write(dir.join("gen.cfg"), "n_queries = 30\nseed = 3\n").unwrap();
    std::fs::write(dir.join("train.cfg"), "model.epochs = 2\nloss.alpha = 0.4\n").unwrap();
    std::fs::write(
        dir.join("exp.cfg"),
        "n_queries = 40\nexperiment.seeds = 1, 2\nmodel.epochs = 2\n",
    )
    .unwrap();
    ok(dir, &["generate", "--config", "gen.cfg", "--out", "data.jsonl"]);
    let v = ok(dir, &["validate", "--data", "data.jsonl"]);
    std::fs::write(dir.join("validate.txt"), v.stdout).unwrap();
    ok(dir, &["annotate", "--strategy", "top-p", "--data", "data.jsonl", "--out", "top.jsonl", "--p", "0.3"]);
    ok(dir, &[
        "annotate", "--strategy", "band", "--data", "data.jsonl", "--out", "band.jsonl", "--lo", "0.3", "--hi", "0.7",
    ]);
    ok(dir, &["annotate", "--strategy", "anchors", "--data", "data.jsonl", "--out", "anchors.jsonl", "--t-rounds", "2"]);
    ok(dir, &["train", "--data", "data.jsonl", "--plan", "top.jsonl", "--config", "train.cfg", "--out", "model.json"]);
    ok(dir, &[
        "eval", "--data", "data.jsonl", "--model", "model.json", "--metrics", "mrr,map,ndcg,f1,pnr", "--k", "5",
        "--threshold", "0.0", "--out", "eval.csv",
    ]);
    ok(dir, &["experiment", "percentile-bands", "--config", "exp.cfg", "--out-dir", "exp"]);
    ok(dir, &["report", "--in", "exp", "--format", "csv", "--out", "means.csv"]);
    ok(dir, &["report", "--in", "exp", "--format", "plot", "--out", "plot.svg"]);
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path());
    pipeline(b.path());
    for f in OUTPUTS {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert!(!x.is_empty(), "{f} is empty");
        assert!(x == y, "{f} differs between runs");
    }
    let eval = std::fs::read_to_string(a.path().join("eval.csv")).unwrap();
    assert!(eval.starts_with("run_id,metric,k,value,n_queries,n_excluded\n"));
    assert_eq!(eval.lines().count(), 6);
    let plot = std::fs::read_to_string(a.path().join("plot.svg")).unwrap();
    assert!(plot.starts_with("<svg"));
}

#[test]
fn invalid_input_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("bad.cfg"), "n_queries = 3\nno_such_key = 1\n").unwrap();
    assert_eq!(code(d, &["generate", "--config", "bad.cfg", "--out", "x.jsonl"]), 1);

    std::fs::write(d.join("neg.cfg"), "n_queries = -2\n").unwrap();
    assert_eq!(code(d, &["generate", "--config", "neg.cfg", "--out", "x.jsonl"]), 1);

    std::fs::write(d.join("broken.jsonl"), "{\"query_id\": \"q\"\n").unwrap();
    assert_eq!(code(d, &["validate", "--data", "broken.jsonl"]), 1);

    let q = r#"{"query_id":"q","user_features":[0.0],"candidates":[{"item_id":"a","modality":1,"upstream_score":0.5,"features":[0.1],"text_embedding":[0.1,0.2],"visual_embedding":null,"label":5,"clicked":null}]}"#;
    std::fs::write(d.join("grade.jsonl"), format!("{q}\n")).unwrap();
    let out = smar(d, &["validate", "--data", "grade.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("label out of range"));

    assert_eq!(code(d, &["experiment", "no-such-kind", "--out-dir", "o"]), 1);
    assert_eq!(code(d, &["annotate", "--strategy", "top-p", "--data", "grade.jsonl", "--out", "p.jsonl"]), 1);
    assert_eq!(code(d, &["frobnicate"]), 1);
}

#[test]
fn runtime_failures_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(d, &["validate", "--data", "missing.jsonl"]), 2);

    std::fs::write(d.join("gen.cfg"), "n_queries = 6\n").unwrap();
    ok(d, &["generate", "--config", "gen.cfg", "--out", "data.jsonl"]);
    ok(d, &["annotate", "--strategy", "top-p", "--data", "data.jsonl", "--out", "plan.jsonl", "--p", "1.0"]);
    // Unclipped steps this large overflow within the first epoch.
    std::fs::write(d.join("hot.cfg"), "model.learning_rate = 1e30\nmodel.grad_clip = 0\n").unwrap();
    let out = smar(d, &["train", "--data", "data.jsonl", "--plan", "plan.jsonl", "--config", "hot.cfg", "--out", "m.json"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("diverged"));
}

#[test]
fn help_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(dir.path(), &["--help"]), 0);
}
