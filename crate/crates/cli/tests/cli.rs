use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn csi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_csi")).args(args).output().expect("run csi")
}

fn ok_json(args: &[&str]) -> Value {
    let out = csi(args);
    assert!(out.status.success(), "csi {args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_mask(path: &Path) {
    let mut buf = vec![255u8; 16 * 16];
    for y in 4..12 {
        for x in 4..12 {
            buf[y * 16 + x] = 0;
        }
    }
    image::save_buffer(path, &buf, 16, 16, image::ExtendedColorType::L8).unwrap();
}

#[test]
fn train_inpaint_traverse_and_diagnose_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let s1 = dir.path().join("s1.ckpt");
    let s2 = dir.path().join("s2.ckpt");

    let ds = ok_json(&["dataset", "--out", p(&data), "--count", "40", "--seed", "3"]);
    assert_eq!(ds["count"], 40);
    assert_eq!(ds["held_out"], 4);
    assert!(data.join("factors.csv").exists());

    let small = ["--epochs", "1", "--batch-size", "8", "--max-batches", "2", "--seed", "1"];
    let mut args = vec!["train", "--stage", "1", "--preset", "desk", "--data", p(&data), "--out", p(&s1), "--filters", "4"];
    args.extend(small);
    let t1 = ok_json(&args);
    assert_eq!(t1["stage"], "1");
    assert_eq!(t1["history"].as_array().unwrap().len(), 1);
    assert_eq!(t1["history"][0]["steps"], 2);

    let mut args = vec!["train", "--stage", "2", "--data", p(&data), "--out", p(&s2), "--stage1", p(&s1)];
    args.extend(small);
    let t2 = ok_json(&args);
    assert_eq!(t2["stage"], "2");

    let image = data.join("00000.png");
    let mask = dir.path().join("mask.png");
    write_mask(&mask);

    let out = dir.path().join("inpaint");
    let inp = ok_json(&[
        "inpaint", "--checkpoint", p(&s2), "--image", p(&image), "--mask", p(&mask), "--out", p(&out),
        "--count", "2", "--override", "1=3.5", "--seed", "4",
    ]);
    let files = inp["files"].as_array().unwrap();
    assert_eq!(files.len(), 2);
    assert!(inp["latents"].as_array().unwrap().iter().all(|z| z[1] == 3.5));
    let original = image::open(&image).unwrap().into_rgb8();
    let done = image::open(files[0].as_str().unwrap()).unwrap().into_rgb8();
    for (x, y, px) in original.enumerate_pixels() {
        if !(4..12).contains(&x) || !(4..12).contains(&y) {
            assert_eq!(done.get_pixel(x, y), px);
        }
    }
    let again = ok_json(&[
        "inpaint", "--checkpoint", p(&s2), "--image", p(&image), "--mask", p(&mask), "--out", p(&out),
        "--count", "2", "--override", "1=3.5", "--seed", "4",
    ]);
    assert_eq!(inp["latents"], again["latents"]);

    let trav = dir.path().join("trav");
    let tr = ok_json(&[
        "traverse", "--checkpoint", p(&s2), "--image", p(&image), "--mask", p(&mask), "--out", p(&trav), "--index", "0",
    ]);
    assert_eq!(tr["values"], serde_json::json!([-6.0, -4.0, -2.0, 0.0, 2.0, 4.0, 6.0]));
    assert_eq!(tr["files"].as_array().unwrap().len(), 7);
    let grid = image::open(tr["grid"].as_str().unwrap()).unwrap();
    assert_eq!((grid.width(), grid.height()), (7 * 16, 16));

    let tr = ok_json(&[
        "traverse", "--checkpoint", p(&s1), "--image", p(&image), "--mask", p(&mask), "--out", p(&trav), "--index", "2",
        "--values", "-1,1", "--mode", "reconstruct",
    ]);
    assert_eq!(tr["files"].as_array().unwrap().len(), 2);

    let dec = ok_json(&["diagnose", "decompose", "--checkpoint", p(&s2), "--data", p(&data), "--batch", "8", "--limit", "16"]);
    assert_eq!(dec["dataset_size"], 16);
    assert_eq!(dec["batches"].as_array().unwrap().len(), 2);
    assert!(dec["max_identity_error"].as_f64().unwrap() < 1e-9);

    let cau = ok_json(&["diagnose", "causality", "--checkpoint", p(&s2)]);
    assert_eq!(cau["causal"], true);
    assert_eq!(cau["violation_count"], 0);

    let bad = csi(&["diagnose", "causality", "--checkpoint", p(&s1)]);
    assert!(!bad.status.success());
}

#[test]
fn random_weight_causality_report() {
    let v = ok_json(&["diagnose", "causality", "--size", "8"]);
    assert_eq!(v["causal"], true);
    assert_eq!(v["report"]["stacks"].as_array().unwrap().len(), 4);
}

#[test]
fn receptive_field_report() {
    let v = ok_json(&["diagnose", "receptive-field"]);
    assert_eq!(v["matches_expected"], true);
    assert_eq!(v["report"]["bounding_box"], serde_json::json!([7, 15]));
    let v = ok_json(&["diagnose", "receptive-field", "--blocks", "1"]);
    assert_eq!(v["matches_expected"], true);
    assert_eq!(v["report"]["bounding_box"], serde_json::json!([3, 7]));
}

#[test]
fn usage_errors_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok_json(&["dataset", "--out", p(&data), "--count", "10"]);

    let out = csi(&["train", "--stage", "2", "--data", p(&data), "--out", p(&dir.path().join("x.ckpt"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--stage1"));

    let out = csi(&["train", "--stage", "3", "--data", p(&data), "--out", "x"]);
    assert!(!out.status.success());

    let out = csi(&["inpaint", "--checkpoint", p(&dir.path().join("missing.ckpt")), "--image", "a", "--mask", "b", "--out", "c"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.ckpt"));
}
