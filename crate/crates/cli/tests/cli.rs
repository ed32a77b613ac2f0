use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sparse-npls"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).env_remove("SPARSE_NPLS_THREADS").output().expect("spawn")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn generate(dir: &Path, seed: &str) -> Output {
    run(&[
        "generate",
        "--dims",
        "8,10,5",
        "--outputs",
        "3",
        "--batches",
        "6",
        "--batch-size",
        "30",
        "--zero-slices",
        "mode1:3-8",
        "--seed",
        seed,
        "--out",
        dir.to_str().unwrap(),
    ])
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn generate_writes_manifest_and_batches_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let out = generate(&a, "7");
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("dims 8x10x5"));
    assert!(stdout(&out).contains("mode1=0.7500"));
    assert!(generate(&b, "7").status.success());
    let (fa, fb) = (read_dir_sorted(&a), read_dir_sorted(&b));
    assert_eq!(fa.len(), 6 + 2);
    assert!(fa.iter().any(|(n, _)| n == "manifest.txt"));
    assert_eq!(fa, fb);
}

#[test]
fn zero_dimension_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["generate", "--dims", "0,3", "--out", tmp.path().join("s").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("dims"), "{}", stderr(&out));
}

#[test]
fn bad_grid_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    let s = tmp.path().join("s");
    assert!(generate(&s, "1").status.success());
    let out = run(&["replay", "--stream", s.to_str().unwrap(), "--grid", "l3:0.1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("grid"));
}

#[test]
fn replay_is_byte_identical_and_saves_models() {
    let tmp = tempfile::tempdir().unwrap();
    let s = tmp.path().join("s");
    assert!(generate(&s, "3").status.success());
    let mut metrics = Vec::new();
    for run_id in 0..2 {
        let out_file = tmp.path().join(format!("m{run_id}.jsonl"));
        let models = tmp.path().join("models");
        let out = run(&[
            "replay",
            "--stream",
            s.to_str().unwrap(),
            "--grid",
            "l1:0,0.2;l0.5:0.05",
            "--f-max",
            "3",
            "--train-prefix",
            "4",
            "--models-dir",
            models.to_str().unwrap(),
            "--out",
            out_file.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", stderr(&out));
        assert!(stdout(&out).contains("dotp_median"));
        metrics.push(std::fs::read(&out_file).unwrap());
    }
    // header lines name the output file, so compare the record lines
    let records = |b: &[u8]| String::from_utf8(b.to_vec()).unwrap().lines().skip(1).map(String::from).collect::<Vec<_>>();
    assert_eq!(records(&metrics[0]), records(&metrics[1]));
    assert_eq!(records(&metrics[0]).len(), 3);
    let text = String::from_utf8(metrics[0].clone()).unwrap();
    assert!(text.starts_with("{\"header\":"));
    assert!(text.lines().next().unwrap().contains("\"seed\":\"3\""));

    let model = tmp.path().join("models").join("model_l1_lambda0.2.nplsm");
    let out = run(&["inspect", model.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let report = stdout(&out);
    for key in ["dims: 8x10x5", "lambda: 0.2", "mu: 1", "F: ", "f*: ", "sparse_idx_mode_1"] {
        assert!(report.contains(key), "{key} missing from\n{report}");
    }

    let plain = tmp.path().join("models").join("model_l1_lambda0.nplsm");
    let report = stdout(&run(&["inspect", plain.to_str().unwrap()]));
    assert!(report.contains("sparse_idx_mode_1: 0.0000"));
    assert!(report.contains("sparse_idx_mode_2: 0.0000"));
}

#[test]
fn same_invocation_gives_identical_metrics_file() {
    let tmp = tempfile::tempdir().unwrap();
    let s = tmp.path().join("s");
    assert!(generate(&s, "5").status.success());
    let out_file = tmp.path().join("m.jsonl");
    let args = [
        "replay",
        "--stream",
        s.to_str().unwrap(),
        "--grid",
        "l1:0..0.3:0.1",
        "--train-prefix",
        "3",
        "--session-length",
        "2",
        "--out",
        out_file.to_str().unwrap(),
    ];
    assert!(run(&args).status.success());
    let first = std::fs::read(&out_file).unwrap();
    let out = bin().args(args).env("SPARSE_NPLS_THREADS", "1").output().unwrap();
    assert!(out.status.success());
    assert_eq!(first, std::fs::read(&out_file).unwrap());
}

#[test]
fn corrupt_batch_names_the_file() {
    let tmp = tempfile::tempdir().unwrap();
    let s = tmp.path().join("s");
    assert!(generate(&s, "2").status.success());
    let victim = s.join("batch_00003.ntns");
    let bytes = std::fs::read(&victim).unwrap();
    std::fs::write(&victim, &bytes[..bytes.len() / 2]).unwrap();
    let out = run(&["replay", "--stream", s.to_str().unwrap(), "--grid", "l1:0"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("batch_00003.ntns"), "{}", stderr(&out));
}

#[test]
fn truncated_model_exits_with_format_code() {
    let tmp = tempfile::tempdir().unwrap();
    let s = tmp.path().join("s");
    assert!(generate(&s, "4").status.success());
    let models = tmp.path().join("models");
    let out = run(&[
        "replay",
        "--stream",
        s.to_str().unwrap(),
        "--grid",
        "l1:0.1",
        "--models-dir",
        models.to_str().unwrap(),
        "--out",
        tmp.path().join("m.jsonl").to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let path = models.join("model_l1_lambda0.1.nplsm");
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
    let out = run(&["inspect", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    let missing = run(&["inspect", tmp.path().join("nope.nplsm").to_str().unwrap()]);
    assert_eq!(missing.status.code(), Some(3));
}

#[test]
fn config_file_values_yield_to_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("gen.cfg");
    let s = tmp.path().join("s");
    std::fs::write(
        &cfg,
        format!("dims=4,3,2\noutputs=2\nbatches=3\nbatch-size=10\nseed=11\nout={}\n", s.display()),
    )
    .unwrap();
    let out = run(&["generate", "--config", cfg.to_str().unwrap(), "--batches", "4"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let manifest = std::fs::read_to_string(s.join("manifest.txt")).unwrap();
    assert!(manifest.contains("count=4"), "{manifest}");
    assert!(manifest.contains("seed=11"));

    std::fs::write(&cfg, "dims=4,3\nbogus=1\n").unwrap();
    let out = run(&["generate", "--config", cfg.to_str().unwrap(), "--out", s.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("bogus"));
}

#[test]
fn bad_thread_env_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let s = tmp.path().join("s");
    assert!(generate(&s, "1").status.success());
    let out = bin()
        .args(["replay", "--stream", s.to_str().unwrap(), "--grid", "l1:0"])
        .env("SPARSE_NPLS_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("SPARSE_NPLS_THREADS"));
}
