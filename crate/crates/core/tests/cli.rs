use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn geovlp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geovlp")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn synth(dir: &Path) -> PathBuf {
    let w = dir.join("world");
    let o = geovlp(&["synth", "--seed", "4", "--records", "60", "--out", p(&w)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    w
}

fn corpus_args<'a>(w: &'a Path, out: &'a Path) -> Vec<String> {
    vec![
        "build-corpus".into(),
        "--records".into(),
        w.join("records.jsonl").display().to_string(),
        "--kb".into(),
        w.join("kb.jsonl").display().to_string(),
        "--embeddings".into(),
        w.join("embeddings.txt").display().to_string(),
        "--out".into(),
        out.display().to_string(),
    ]
}

fn run(args: &[String]) -> Output {
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    geovlp(&refs)
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(code(&geovlp(&["--help"])), 0);
    assert_eq!(code(&geovlp(&["train", "--help"])), 0);
    assert_eq!(code(&geovlp(&[])), 1);
    assert_eq!(code(&geovlp(&["nonsense"])), 1);
    assert_eq!(code(&geovlp(&["gradcheck", "--hidden", "many"])), 1);
}

#[test]
fn sampling_commands_require_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let o = geovlp(&["synth", "--out", p(dir.path())]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--seed"));
    let w = synth(dir.path());
    let o = run(&corpus_args(&w, &dir.path().join("c.jsonl")));
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--seed"));
    let line = stderr(&o);
    let rec: serde_json::Value = serde_json::from_str(line.trim()).unwrap();
    assert_eq!(rec["error"], "validation");
}

#[test]
fn missing_input_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    let o = geovlp(&["train", "--seed", "1", "--corpus", "/definitely/not/here", "--out", p(&out)]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn malformed_input_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let w = synth(dir.path());
    std::fs::write(w.join("records.jsonl"), "{not json\n").unwrap();
    let o = run(&[corpus_args(&w, &dir.path().join("c.jsonl")), vec!["--seed".into(), "1".into()]].concat());
    assert_eq!(code(&o), 1, "{}", stderr(&o));
}

#[test]
fn config_file_layering() {
    let dir = tempfile::tempdir().unwrap();
    let w = synth(dir.path());
    let cfg = dir.path().join("run.cfg");

    std::fs::write(&cfg, "bogus_key = 1\n").unwrap();
    let o = run(&[corpus_args(&w, &dir.path().join("a.jsonl")), vec!["--config".into(), p(&cfg).into()]].concat());
    assert_eq!(code(&o), 1);

    std::fs::write(&cfg, "# corpus\nseed = 9\nmlm_rate = 0.2\n").unwrap();
    let a = dir.path().join("a.jsonl");
    let o = run(&[corpus_args(&w, &a), vec!["--config".into(), p(&cfg).into()]].concat());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("seed: 9"));
    let (m, _) = geovlp::formats::read_corpus(&a).unwrap();
    assert_eq!((m.seed, m.mlm_rate), (9, 0.2));

    let b = dir.path().join("b.jsonl");
    let o = run(&[corpus_args(&w, &b), vec!["--config".into(), p(&cfg).into(), "--seed".into(), "10".into()]].concat());
    assert_eq!(code(&o), 0);
    assert_eq!(geovlp::formats::read_corpus(&b).unwrap().0.seed, 10);
}

#[test]
fn corpus_rebuild_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let w = synth(dir.path());
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    for out in [&a, &b] {
        let o = run(&[corpus_args(&w, out), vec!["--seed".into(), "5".into(), "--threads".into(), "2".into()]].concat());
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn pipeline_from_parses() {
    let dir = tempfile::tempdir().unwrap();
    let det = dir.path().join("det.jsonl");
    std::fs::write(
        &det,
        concat!(
            r#"{"image_id":"c01","width":100,"height":80,"objects":[{"tag":"paper","bbox":[0,0,50,40],"feature":[0.1,0.2]}]}"#,
            "\n",
            r#"{"image_id":"nope","width":10,"height":10,"objects":[]}"#,
            "\n"
        ),
    )
    .unwrap();
    let records = dir.path().join("records.jsonl");
    let o = geovlp(&[
        "extract",
        "--parses",
        p(&fixture("extraction.conllu")),
        "--detections",
        p(&det),
        "--out",
        p(&records),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let recs = geovlp::formats::read_records(&records).unwrap();
    assert_eq!(recs.len(), 1);
    assert_eq!(recs[0].concept_name.as_deref(), Some("Chinese paper cuttings"));

    let pages = dir.path().join("pages.jsonl");
    std::fs::write(
        &pages,
        r#"{"concept_name":"torii","sentence_id":"d01","text":"A torii is a traditional Japanese gate most commonly found at the entrance of a Shinto shrine."}"#,
    )
    .unwrap();
    let kb = dir.path().join("kb.jsonl");
    let o = geovlp(&[
        "build-kb",
        "--parses",
        p(&fixture("extraction.conllu")),
        "--pages",
        p(&pages),
        "--knowledge-budget",
        "5",
        "--out",
        p(&kb),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let kb = geovlp::formats::read_knowledge_base(&kb).unwrap();
    assert_eq!(kb[0].category, "traditional Japanese gate");
    assert_eq!(kb[0].knowledge.split_whitespace().count(), 5);
}

#[test]
fn train_report_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let w = synth(dir.path());
    let corpus = dir.path().join("c.jsonl");
    assert_eq!(code(&run(&[corpus_args(&w, &corpus), vec!["--seed".into(), "1".into()]].concat())), 0);
    let run_dir = dir.path().join("run");
    let o = geovlp(&[
        "train", "--seed", "2", "--corpus", p(&corpus), "--out", p(&run_dir), "--max-steps", "6",
        "--checkpoint-interval", "3", "--hidden", "16", "--heads", "2", "--ffn", "32", "--layers", "1",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(run_dir.join("step0000003.ckpt").exists());
    assert!(run_dir.join("final.ckpt").exists());

    let zs = dir.path().join("zs");
    assert_eq!(code(&geovlp(&["synth", "--seed", "3", "--records", "4", "--zero-shot-classes", "2", "--out", p(&zs)])), 0);
    let result = dir.path().join("zs.json");
    let o = geovlp(&[
        "eval-zeroshot", "--checkpoint", p(&run_dir.join("final.ckpt")), "--task", p(&zs.join("task.json")),
        "--out", p(&result),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let rep = dir.path().join("rep");
    let o = geovlp(&[
        "report", "--metrics", p(&run_dir.join("metrics.jsonl")), "--corpus", p(&corpus), "--zeroshot", p(&result),
        "--out", p(&rep),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = std::fs::read_to_string(rep.join("curves.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);

    let empty = dir.path().join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    assert_eq!(code(&geovlp(&["report", "--metrics", p(&empty)])), 1);
}

#[test]
fn gradcheck_and_selftest() {
    let o = geovlp(&["gradcheck", "--hidden", "4", "--heads", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("max relative error"));
    assert_eq!(code(&geovlp(&["selftest"])), 0);
}
