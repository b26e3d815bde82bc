//! End-to-end checks of the command-line interface: the full
//! gen -> train -> eval -> sweep chain, exit codes, and config-file
//! precedence, all through the real binary.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_algaedet"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn assert_code(out: &Output, code: i32, ctx: &str) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "{ctx}\nstdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> String {
    p.to_str().unwrap().to_owned()
}

#[test]
fn full_pipeline_through_the_binary() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let out = run(&["gen", "--n-images", "8", "--seed", "5", "--out", &s(&data)]);
    assert_code(&out, 0, "gen should succeed");
    assert!(data.join("annotations.jsonl").is_file());
    assert!(data.join("taxonomy.csv").is_file());
    assert!(data.join("images").join("img00000.png").is_file());

    let run_dir = tmp.path().join("run");
    let out = run(&[
        "train",
        "--data",
        &s(&data),
        "--out",
        &s(&run_dir),
        "--model",
        "tiny",
        "--steps",
        "6",
        "--seed",
        "5",
        "--lambda",
        "0.2",
        "--merge-threshold",
        "0",
    ]);
    assert_code(&out, 0, "train should succeed");
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("completed 6 steps"), "{stdout}");
    assert!(stdout.contains("final map_genus"), "{stdout}");
    let ckpt = run_dir.join("checkpoint.json");
    assert!(ckpt.is_file());
    assert!(run_dir.join("train_log.jsonl").is_file());

    let eval_dir = tmp.path().join("eval");
    let out = run(&[
        "eval",
        "--data",
        &s(&data),
        "--checkpoint",
        &s(&ckpt),
        "--out",
        &s(&eval_dir),
        "--render",
    ]);
    assert_code(&out, 0, "eval should succeed");
    assert!(eval_dir.join("report.csv").is_file());
    assert!(eval_dir.join("report.txt").is_file());
    assert!(eval_dir.join("detections.jsonl").is_file());
    // one rendered PNG per evaluated (held-out) image: 8 images -> 2 held out
    let rendered: Vec<_> = std::fs::read_dir(eval_dir.join("render"))
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    assert_eq!(rendered.len(), 2, "{rendered:?}");
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("Genus-level detection"), "{stdout}");
    assert!(stdout.contains("Total"), "{stdout}");

    let sweep_dir = tmp.path().join("sweep");
    let out = run(&[
        "sweep",
        "--data",
        &s(&data),
        "--out",
        &s(&sweep_dir),
        "--model",
        "tiny",
        "--steps",
        "3",
        "--seed",
        "5",
        "--lambdas",
        "0,0.2",
        "--jobs",
        "2",
        "--merge-threshold",
        "0",
    ]);
    assert_code(&out, 0, "sweep should succeed");
    let csv = std::fs::read_to_string(sweep_dir.join("sweep.csv")).unwrap();
    assert!(csv.starts_with("lambda,final_map_genus,final_map_class,status"), "{csv}");
    assert_eq!(csv.lines().count(), 3, "{csv}");
    assert!(sweep_dir.join("lambda-0.2").join("train_log.jsonl").is_file());
}

#[test]
fn generation_is_deterministic_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert_code(&run(&["gen", "--n-images", "3", "--seed", "9", "--out", &s(&a)]), 0, "gen a");
    assert_code(&run(&["gen", "--n-images", "3", "--seed", "9", "--out", &s(&b)]), 0, "gen b");
    let ann_a = std::fs::read(a.join("annotations.jsonl")).unwrap();
    let ann_b = std::fs::read(b.join("annotations.jsonl")).unwrap();
    assert_eq!(ann_a, ann_b);
    let img_a = std::fs::read(a.join("images").join("img00001.png")).unwrap();
    let img_b = std::fs::read(b.join("images").join("img00001.png")).unwrap();
    assert_eq!(img_a, img_b);
}

#[test]
fn exit_codes_distinguish_failure_classes() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert_code(
        &run(&["gen", "--n-images", "4", "--seed", "1", "--out", &s(&data)]),
        0,
        "gen",
    );

    // usage error: zero images
    let out = run(&["gen", "--n-images", "0", "--out", &s(&tmp.path().join("x"))]);
    assert_code(&out, 2, "zero images is a usage error");
    assert!(String::from_utf8_lossy(&out.stderr).contains("--n-images"));

    // usage error: unknown flag (handled by the parser)
    assert_code(&run(&["gen", "--frobnicate"]), 2, "unknown flag");

    // usage error: missing required option
    let out = run(&["train", "--data", &s(&data)]);
    assert_code(&out, 2, "missing --out");
    assert!(String::from_utf8_lossy(&out.stderr).contains("--out"));

    // ingestion error: checkpoint file does not exist
    let out = run(&[
        "eval",
        "--data",
        &s(&data),
        "--checkpoint",
        &s(&tmp.path().join("missing.json")),
        "--out",
        &s(&tmp.path().join("e")),
    ]);
    assert_code(&out, 3, "missing checkpoint");
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("checkpoint"), "{stderr}");

    // ingestion error: corrupt dataset
    let broken = tmp.path().join("broken");
    std::fs::create_dir_all(broken.join("images")).unwrap();
    std::fs::copy(data.join("taxonomy.csv"), broken.join("taxonomy.csv")).unwrap();
    std::fs::write(broken.join("annotations.jsonl"), "{oops\n").unwrap();
    let out = run(&["train", "--data", &s(&broken), "--out", &s(&tmp.path().join("r")), "--steps", "1"]);
    assert_code(&out, 3, "malformed annotations");
}

#[test]
fn eval_rejects_checkpoint_from_other_taxonomy() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert_code(&run(&["gen", "--n-images", "8", "--seed", "2", "--out", &s(&data)]), 0, "gen");
    let run_dir = tmp.path().join("run");
    assert_code(
        &run(&[
            "train", "--data", &s(&data), "--out", &s(&run_dir), "--model", "tiny", "--steps", "2",
            "--merge-threshold", "0",
        ]),
        0,
        "train",
    );
    // same images, but the dataset taxonomy gains an extra genus
    let other = tmp.path().join("other");
    std::fs::create_dir_all(&other).unwrap();
    for name in ["annotations.jsonl", "taxonomy.csv"] {
        std::fs::copy(data.join(name), other.join(name)).unwrap();
    }
    std::os::unix::fs::symlink(data.join("images"), other.join("images")).unwrap();
    let mut tax = std::fs::read_to_string(other.join("taxonomy.csv")).unwrap();
    tax.push_str("Phantom,Chlorophyta\n");
    std::fs::write(other.join("taxonomy.csv"), tax).unwrap();
    let out = run(&[
        "eval",
        "--data",
        &s(&other),
        "--checkpoint",
        &s(&run_dir.join("checkpoint.json")),
        "--out",
        &s(&tmp.path().join("e")),
    ]);
    assert_code(&out, 4, "fingerprint mismatch is a validation error");
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("fingerprint"), "{stderr}");
}

#[test]
fn config_file_supplies_options_and_flags_override() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("from-config");
    let cfg = tmp.path().join("gen.json");
    std::fs::write(
        &cfg,
        format!(r#"{{"n_images": 2, "seed": 3, "out": "{}"}}"#, s(&out_dir)),
    )
    .unwrap();
    assert_code(&run(&["gen", "--config", &s(&cfg)]), 0, "all options from file");
    assert!(out_dir.join("annotations.jsonl").is_file());
    // explicit flag overrides the file value
    let out = run(&["gen", "--config", &s(&cfg), "--n-images", "0"]);
    assert_code(&out, 2, "flag overrides file");
    // unknown keys in the file are rejected
    std::fs::write(&cfg, r#"{"n_imagez": 2}"#).unwrap();
    let out = run(&["gen", "--config", &s(&cfg), "--out", &s(&tmp.path().join("y"))]);
    assert_code(&out, 3, "unknown config key");
}
