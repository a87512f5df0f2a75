use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_ctxprobe"));
    c.env_remove("CTXPROBE_HTTP_TIMEOUT_MS");
    c
}

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn files(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    v.sort();
    v
}

/// A second document as plain text.
fn text_corpus(dir: &Path) -> PathBuf {
    let p = dir.join("texts");
    fs::create_dir_all(&p).unwrap();
    fs::write(
        p.join("harbour.txt"),
        "The harbour light turns . Ships wait and the light turns again .",
    )
    .unwrap();
    p
}

#[test]
fn probe_writes_one_store_per_document() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("runs");
    let texts = text_corpus(tmp.path());
    let o = run(&[
        "probe",
        "--conllu",
        fixture().to_str().unwrap(),
        "--text",
        texts.to_str().unwrap(),
        "--backend",
        "ngram:2:1.0",
        "--c-max",
        "64",
        "--stride",
        "1",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(
        files(&out),
        [
            "harbour.clps",
            "harbour.doc.json",
            "harbour.manifest.json",
            "lighthouse.clps",
            "lighthouse.doc.json",
            "lighthouse.manifest.json",
            "vocab.json"
        ]
    );
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("lighthouse.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["c_max"], 64);
    assert_eq!(manifest["backend"]["name"], "ngram:2:1");
}

#[test]
fn usage_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let fx = fixture();
    let base = [
        "probe",
        "--conllu",
        fx.to_str().unwrap(),
        "--backend",
        "ngram:2:1",
        "--out",
        out.to_str().unwrap(),
    ];
    let with = |extra: &[&str]| {
        let mut a: Vec<&str> = base.to_vec();
        a.extend(extra);
        run(&a)
    };
    assert_eq!(code(&with(&["--stride", "0"])), 2);
    assert_eq!(code(&with(&["--c-max", "4", "--stride", "5"])), 2);
    assert_eq!(code(&with(&["--dtype", "f8"])), 2);
    assert_eq!(code(&run(&["probe", "--backend", "ngram:2:1", "--out", "x"])), 2);
    let bad_backend = run(&[
        "probe",
        "--conllu",
        fx.to_str().unwrap(),
        "--backend",
        "bigram",
        "--out",
        "x",
    ]);
    assert_eq!(code(&bad_backend), 2);
    let missing = run(&[
        "probe",
        "--conllu",
        "/nonexistent/x.conllu",
        "--backend",
        "ngram:2:1",
        "--out",
        "x",
    ]);
    assert_eq!(code(&missing), 2);
    assert!(!out.exists());
}

#[test]
fn unreachable_backend_exits_3_without_stores() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let port = std::net::TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let o = bin()
        .args([
            "probe",
            "--conllu",
            fixture().to_str().unwrap(),
            "--backend",
            &format!("http:http://127.0.0.1:{port}"),
            "--out",
            out.to_str().unwrap(),
        ])
        .env("CTXPROBE_HTTP_TIMEOUT_MS", "2000")
        .output()
        .unwrap();
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(!out.exists() || files(&out).iter().all(|f| !f.ends_with(".clps")));
}

#[test]
fn malformed_conllu_exits_4_with_line() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.conllu");
    fs::write(&bad, "1\tword\t_\tNOUN\t_\t_\t_\t_\t_\t_\n2\tbroken\n").unwrap();
    let o = run(&[
        "probe",
        "--conllu",
        bad.to_str().unwrap(),
        "--backend",
        "ngram:2:1",
        "--out",
        tmp.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 4);
    assert!(stderr(&o).contains("bad.conllu:2:"), "{}", stderr(&o));
}

#[test]
fn dry_run_prints_cost_and_writes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let o = run(&[
        "probe",
        "--conllu",
        fixture().to_str().unwrap(),
        "--backend",
        "ngram:2:1",
        "--c-max",
        "8",
        "--stride",
        "2",
        "--batch-size",
        "4",
        "--max-piece-chars",
        "4",
        "--dry-run",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    let stdout = String::from_utf8(o.stdout).unwrap();
    // 45 tokens, c_max 8, stride 2: segments start at 1, 3, ..., 43
    assert!(stdout.contains("lighthouse: 45 tokens, 22 segments"), "{stdout}");
    assert!(!out.exists());
}

fn pipeline(out: &Path, texts: &Path) {
    let o = run(&[
        "run",
        "--conllu",
        fixture().to_str().unwrap(),
        "--text",
        texts.to_str().unwrap(),
        "--max-piece-chars",
        "4",
        "--backend",
        "ngram:3:0.5",
        "--c-max",
        "80",
        "--dtype",
        "f32",
        "--min-pos-count",
        "2",
        "--min-position",
        "4",
        "--parallelism",
        "3",
        "--jobs",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn full_pipeline_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let texts = text_corpus(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    pipeline(&a, &texts);
    pipeline(&b, &texts);
    let outputs: Vec<String> = files(&a)
        .into_iter()
        .filter(|f| !f.ends_with(".manifest.json"))
        .collect();
    for name in [
        "lighthouse.bundle.json",
        "harbour.bundle.json",
        "aggregate.json",
        "fig2_loss_by_context.csv",
        "fig3_loss_by_pos.csv",
        "fig4_delta_decay.csv",
        "fig6_delta_by_pos.csv",
        "lighthouse.curves.csv",
        "lighthouse.deltas.csv",
    ] {
        assert!(outputs.contains(&name.to_string()), "missing {name}");
    }
    for f in &outputs {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f} differs between runs"
        );
    }

    let bundle: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.join("lighthouse.bundle.json")).unwrap()).unwrap();
    assert_eq!(bundle["schema_version"], "1.0");
    assert_eq!(bundle["doc"]["tokens"][7], "cann");
    assert_eq!(bundle["doc"]["pos_tags"][7], "AUX");
    let t = &bundle["targets"][10];
    assert_eq!(t["n"], 11);
    assert_eq!(t["top_k"][0].as_array().unwrap().len(), 10);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.join("aggregate.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["min_pos_count"], 2);
    assert_eq!(report["documents"], 2);
}

#[test]
fn companion_commands_on_a_probe_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let runs = tmp.path().join("runs");
    let o = run(&[
        "probe",
        "--conllu",
        fixture().to_str().unwrap(),
        "--backend",
        "trigger:the:lamp:20:0.5:0.01",
        "--c-max",
        "30",
        "--stride",
        "3",
        "--out",
        runs.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m = tmp.path().join("m");
    assert_eq!(
        code(&run(&[
            "metrics",
            "--runs",
            runs.to_str().unwrap(),
            "--out",
            m.to_str().unwrap()
        ])),
        0
    );
    let curves = fs::read_to_string(m.join("lighthouse.curves.csv")).unwrap();
    assert!(curves.starts_with("n,c,nll,kl\n"));
    let agg = run(&[
        "aggregate",
        "--runs",
        runs.to_str().unwrap(),
        "--out",
        m.to_str().unwrap(),
    ]);
    assert_eq!(code(&agg), 0, "{}", stderr(&agg));
    // 45 tokens: no targets past the default min position, and no tag reaches 100
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(m.join("aggregate.json")).unwrap()).unwrap();
    assert!(report["delta_decay"]["empty_reason"].as_str().unwrap().contains("1024"));
    assert_eq!(
        fs::read_to_string(m.join("fig3_loss_by_pos.csv")).unwrap(),
        "group,c,mean,std,count\n"
    );
    let ex = run(&[
        "export",
        "--runs",
        runs.to_str().unwrap(),
        "--export-top-k",
        "3",
        "--full-resolution",
    ]);
    assert_eq!(code(&ex), 0, "{}", stderr(&ex));
    let bundle: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(runs.join("lighthouse.bundle.json")).unwrap()).unwrap();
    assert_eq!(bundle["manifest"]["config"]["stride"], 3);
    assert_eq!(bundle["targets"][0]["top_k"][0].as_array().unwrap().len(), 3);

    let unknown = run(&[
        "probe",
        "--conllu",
        fixture().to_str().unwrap(),
        "--backend",
        "trigger:zzz:lamp:20:0.5:0.01",
        "--out",
        runs.to_str().unwrap(),
    ]);
    assert_eq!(code(&unknown), 2);
    let empty = tmp.path().join("empty");
    fs::create_dir(&empty).unwrap();
    assert_eq!(code(&run(&["export", "--runs", empty.to_str().unwrap()])), 4);
}
