//! End-to-end tests of the `effdet` binary.
//!
//! Help output is compared with files in `tests/golden`; run with
//! `UPDATE_GOLDEN=1` to rewrite them after an intentional change.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const SUBCOMMANDS: [&str; 7] = ["scale", "train", "infer", "enhance", "eval", "bench", "study"];

fn golden(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

fn effdet(args: &[&str], root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_effdet"))
        .args(args)
        .env("EFFDET_OUTPUT_ROOT", root)
        .env_remove("RUST_LOG")
        .output()
        .expect("run effdet")
}

fn ok_json(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("JSON summary on stdout")
}

fn error_json(out: &Output, code: i32) -> Value {
    assert_eq!(out.status.code(), Some(code), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let line = String::from_utf8_lossy(&out.stderr);
    let last = line.lines().last().expect("error line on stderr");
    let v: Value = serde_json::from_str(last).expect("JSON error on stderr");
    assert_eq!(v["code"], code);
    v
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

#[test]
fn scale_tables_match_goldens() {
    let tmp = tempfile::tempdir().unwrap();
    for split in ["1-5", "5-1", "3-3"] {
        let out = effdet(&["scale", "--table", "--split", split], tmp.path());
        assert!(out.status.success());
        assert_eq!(String::from_utf8(out.stdout).unwrap(), std::fs::read_to_string(golden(&format!("scale_table_{split}.csv"))).unwrap());
    }
}

#[test]
fn scale_single_records() {
    let tmp = tempfile::tempdir().unwrap();
    let out = effdet(&["scale", "--phi", "3", "--split", "1-5"], tmp.path());
    assert_eq!(
        String::from_utf8(out.stdout).unwrap(),
        "architecture=D3(1-5)\ninput_resolution=896\nbackbone_tier=3\nfused_channels=160\nbifpn_depth=4\nhead_depth=6\n"
    );
    let out = effdet(&["scale", "--phi", "0", "--split", "3-3"], tmp.path());
    let text = String::from_utf8(out.stdout).unwrap();
    for line in ["input_resolution=512", "backbone_tier=0", "fused_channels=64", "bifpn_depth=3", "head_depth=3"] {
        assert!(text.lines().any(|l| l == line), "{line} missing from {text}");
    }
    let desk = effdet(&["scale", "--phi", "0", "--split", "1-5", "--desk"], tmp.path());
    assert!(String::from_utf8(desk.stdout).unwrap().contains("input_resolution=128\n"));
}

#[test]
fn usage_errors_exit_2_with_json() {
    let tmp = tempfile::tempdir().unwrap();
    error_json(&effdet(&["scale", "--phi", "-1"], tmp.path()), 2);
    error_json(&effdet(&["scale", "--split", "2-2-2"], tmp.path()), 2);
    error_json(&effdet(&["frobnicate"], tmp.path()), 2);
    error_json(&effdet(&["train", "--epochs", "0"], tmp.path()), 2);
    error_json(&effdet(&["enhance", "--enhance", "const", "--c", "300", "a.png", "b.png"], tmp.path()), 2);
}

#[test]
fn missing_inputs_exit_3_naming_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.ckpt");
    let v = error_json(&effdet(&["study", "--checkpoint", &s(&missing)], tmp.path()), 3);
    assert!(v["message"].as_str().unwrap().contains("nope.ckpt"));
    error_json(&effdet(&["enhance", &s(&tmp.path().join("in.png")), &s(&tmp.path().join("out.png"))], tmp.path()), 3);
}

#[test]
fn corrupt_checkpoint_is_a_runtime_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.ckpt");
    std::fs::write(&bad, b"not a checkpoint").unwrap();
    error_json(&effdet(&["infer", "--checkpoint", &s(&bad), "x.png"], tmp.path()), 4);
}

#[test]
fn help_text_matches_goldens_and_documents_every_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let update = std::env::var_os("UPDATE_GOLDEN").is_some();
    let mut names = vec![""];
    names.extend(SUBCOMMANDS);
    for cmd in names {
        let args: Vec<&str> = if cmd.is_empty() { vec!["--help"] } else { vec![cmd, "--help"] };
        let out = effdet(&args, tmp.path());
        assert!(out.status.success());
        let text = String::from_utf8(out.stdout).unwrap();
        let file = golden(&format!("help_{}.txt", if cmd.is_empty() { "effdet" } else { cmd }));
        if update {
            std::fs::write(&file, &text).unwrap();
        } else {
            assert_eq!(text, std::fs::read_to_string(&file).unwrap(), "help for `{cmd}` drifted; rerun with UPDATE_GOLDEN=1");
        }
        // A description follows the flag on the same line (compact layout)
        // or on the next one (long layout).
        let lines: Vec<&str> = text.lines().collect();
        for (i, l) in lines.iter().enumerate() {
            let t = l.trim_start();
            if t.starts_with("--") || (t.starts_with('-') && t.len() > 1 && !t.starts_with("- ")) {
                let same_line = t.contains("  ");
                let next = lines.get(i + 1).map_or("", |n| n.trim());
                assert!(
                    same_line || (!next.is_empty() && !next.starts_with('-')),
                    "`{cmd}` flag `{t}` has no description"
                );
            }
        }
    }
}

fn write_png(path: &Path, values: &[u8], w: u32, h: u32) {
    let img = effdet::PixelImage::new(w, h, values.to_vec()).unwrap();
    img.save(path).unwrap();
}

#[test]
fn enhance_const_adds_and_clamps() {
    let tmp = tempfile::tempdir().unwrap();
    let (input, output) = (tmp.path().join("in.png"), tmp.path().join("out.png"));
    let values: Vec<u8> = vec![0, 10, 100, 200, 215, 216, 250, 255, 128, 64, 32, 1];
    write_png(&input, &values, 2, 2);
    let v = ok_json(&effdet(&["enhance", "--enhance", "const", "--c", "40", &s(&input), &s(&output)], tmp.path()));
    assert_eq!(v["strategy"], "c=40");
    let out = effdet::PixelImage::load(&output).unwrap();
    let want: Vec<u8> = values.iter().map(|&x| x.saturating_add(40)).collect();
    assert_eq!(out.as_raw(), &want[..]);

    let dark = tmp.path().join("dark.png");
    ok_json(&effdet(
        &["enhance", "--darken-offset", "120", "--enhance", "const", "--c", "80", &s(&input), &s(&dark)],
        tmp.path(),
    ));
    let want: Vec<u8> = values.iter().map(|&x| x.saturating_sub(120).saturating_add(80)).collect();
    assert_eq!(effdet::PixelImage::load(&dark).unwrap().as_raw(), &want[..]);
}

#[test]
fn eval_reports_ap_keys() {
    let tmp = tempfile::tempdir().unwrap();
    write_png(&tmp.path().join("a.png"), &[0; 64 * 64 * 3], 64, 64);
    let gt = tmp.path().join("gt.json");
    std::fs::write(
        &gt,
        r#"[{"image": "a.png", "width": 64, "height": 64,
             "boxes": [{"xmin": 4, "ymin": 4, "xmax": 30, "ymax": 30, "class": "bag"},
                       {"xmin": 34, "ymin": 34, "xmax": 60, "ymax": 60, "class": "bottle"}]}]"#,
    )
    .unwrap();
    let pred = tmp.path().join("p.jsonl");
    std::fs::write(
        &pred,
        "{\"image\": \"a.png\", \"box\": [4, 4, 30, 30], \"class\": \"bag\", \"score\": 0.9}\n\
         {\"image\": \"a.png\", \"box\": [40, 40, 62, 62], \"class\": \"bottle\", \"score\": 0.8}\n",
    )
    .unwrap();
    let out_dir = tmp.path().join("ev");
    let v = ok_json(&effdet(
        &["eval", "--pred", &s(&pred), "--gt", &s(&gt), "--class-map", "wpbb", "--out-dir", &s(&out_dir)],
        tmp.path(),
    ));
    for k in ["ap", "ap50", "ap75"] {
        assert!(v[k].is_number(), "missing {k} in {v}");
    }
    // bag is exact; the bottle box has IoU 400/760 = 0.53 with its ground truth.
    assert_eq!(v["ap50"], 100.0);
    assert!(v["ap"].as_f64().unwrap() < 100.0);
    for f in ["eval.json", "eval.csv", "manifest.json"] {
        assert!(out_dir.join(f).exists(), "{f}");
    }
}

/// Trains a tiny model into `dir` and returns the summary.
fn tiny_train(dir: &Path, extra: &[&str]) -> Value {
    let mut args = vec![
        "train", "--synth-images", "12", "--epochs", "2", "--batch-size", "4", "--resolution", "128", "--width", "16",
        "--seed", "3", "--out-dir",
    ];
    let d = s(dir);
    args.push(&d);
    args.extend(extra);
    ok_json(&effdet(&args, dir.parent().unwrap()))
}

#[test]
fn train_infer_and_reproduce_from_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let first = tmp.path().join("first");
    let summary = tiny_train(&first, &[]);
    assert_eq!(summary["train_images"], 10);
    for f in ["model.ckpt", "history.json", "metrics.json", "manifest.json", "run.cfg"] {
        assert!(first.join(f).exists(), "{f}");
    }

    // Re-feeding the resolved manifest reproduces the run.
    let again = tmp.path().join("again");
    let m = s(&first.join("manifest.json"));
    let a = s(&again);
    ok_json(&effdet(&["train", "--config", &m, "--out-dir", &a], tmp.path()));
    for f in ["history.json", "metrics.json"] {
        assert_eq!(std::fs::read(first.join(f)).unwrap(), std::fs::read(again.join(f)).unwrap(), "{f}");
    }
    let cfg_a = std::fs::read_to_string(first.join("run.cfg")).unwrap();
    assert_eq!(cfg_a, std::fs::read_to_string(again.join("run.cfg")).unwrap());

    // The flat key=value file works as a config too.
    let third = tmp.path().join("third");
    let c = s(&first.join("run.cfg"));
    let t = s(&third);
    ok_json(&effdet(&["train", "--config", &c, "--out-dir", &t], tmp.path()));
    assert_eq!(std::fs::read(first.join("metrics.json")).unwrap(), std::fs::read(third.join("metrics.json")).unwrap());

    // infer --tau keeps only detections at or above tau.
    let img = tmp.path().join("x.png");
    let sample = &effdet::datasets::synth_shapes(1, 128, 2, 9).unwrap()[0];
    sample.image.save(&img).unwrap();
    let ck = s(&first.join("model.ckpt"));
    for tau in ["0.0", "0.95"] {
        let pred = tmp.path().join(format!("pred{tau}.jsonl"));
        let i = s(&img);
        let p = s(&pred);
        ok_json(&effdet(&["infer", "--checkpoint", &ck, "--tau", tau, "--pred-out", &p, &i], tmp.path()));
        let t: f64 = tau.parse().unwrap();
        for line in std::fs::read_to_string(&pred).unwrap().lines() {
            let d: Value = serde_json::from_str(line).unwrap();
            assert!(d["score"].as_f64().unwrap() >= t);
            assert_eq!(d["image"], i.as_str());
        }
    }
}

#[test]
fn study_with_external_stub_gives_four_rows_and_is_repeatable() {
    let tmp = tempfile::tempdir().unwrap();
    let train_dir = tmp.path().join("model");
    tiny_train(&train_dir, &[]);
    let ck = s(&train_dir.join("model.ckpt"));
    let run = |name: &str| {
        let out = tmp.path().join(name);
        let o = s(&out);
        let v = ok_json(&effdet(
            &["study", "--checkpoint", &ck, "--synth-images", "12", "--seed", "3", "--external-cmd", "cp", "--out-dir", &o],
            tmp.path(),
        ));
        (out, v)
    };
    let (a, _) = run("study-a");
    for f in ["report.csv", "frontier.svg", "manifest.json", "report.json"] {
        assert!(a.join(f).exists(), "{f}");
    }
    let csv = std::fs::read_to_string(a.join("report.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 4, "{csv}");
    let labels: Vec<&str> = rows.iter().map(|r| r.split(',').nth(1).unwrap()).collect();
    assert_eq!(labels, ["none", "c=40", "c=80", "external:cp"]);

    // Metric columns repeat exactly; latency columns may not.
    let (b, _) = run("study-b");
    let metrics = |dir: &Path| -> Vec<String> {
        std::fs::read_to_string(dir.join("report.csv"))
            .unwrap()
            .lines()
            .map(|l| l.split(',').take(5).collect::<Vec<_>>().join(","))
            .collect()
    };
    assert_eq!(metrics(&a), metrics(&b));
}

#[test]
fn output_root_flag_beats_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let env_root = tmp.path().join("env");
    let flag_root = tmp.path().join("flag");
    let img = tmp.path().join("i.png");
    write_png(&img, &[50; 12], 2, 2);
    let out = tmp.path().join("o.png");
    let v = ok_json(&effdet(&["enhance", "--output-root", &s(&flag_root), &s(&img), &s(&out)], &env_root));
    assert!(v["run_dir"].as_str().unwrap().starts_with(&s(&flag_root)));
    assert!(!env_root.exists());
}

#[test]
fn bench_sweep_writes_latency_for_each_phi() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("b");
    let v = ok_json(&effdet(
        &["bench", "--sweep-phi", "1", "--runs", "2", "--warmup", "1", "--device-label", "test", "--out-dir", &s(&out)],
        tmp.path(),
    ));
    let lat = v["latency"].as_array().unwrap();
    assert_eq!(lat.len(), 2);
    assert_eq!(lat[0]["device_label"], "test");
    assert_eq!(lat[1]["num_runs"], 2);
    assert!(out.join("latency.csv").exists() && out.join("manifest.json").exists());
}
