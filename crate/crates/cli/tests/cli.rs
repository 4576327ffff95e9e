use std::path::Path;
use std::process::{Command, Output};

use duofield::io::{read_gray_png, read_rgb_png, FloatMap};
use duofield::train::{Checkpoint, TrainConfig};

fn duofield(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_duofield")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = duofield(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn code(args: &[&str]) -> i32 {
    duofield(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn assert_provenance(dir: &Path) {
    for f in ["config.toml", "manifest.json", "run.log"] {
        assert!(dir.join(f).is_file(), "{f} missing from {}", dir.display());
    }
    let manifest = std::fs::read_to_string(dir.join("manifest.json")).unwrap();
    for key in ["\"seed\"", "\"formats\"", "DUOC v1", "DUOF v1", "\"train_config\""] {
        assert!(manifest.contains(key), "manifest lacks {key}");
    }
}

#[test]
fn generate_static_only_has_empty_motion_masks_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for dir in [&a, &b] {
        ok(&["generate", "--scene", "static-only", "--seed", "4", "--out", s(dir)]);
    }
    assert_provenance(&a);
    let frames = a.join("frames");
    let mut names: Vec<String> = std::fs::read_dir(&frames).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names.iter().filter(|n| n.ends_with("_meta.json")).count(), 8);
    for n in &names {
        assert_eq!(std::fs::read(frames.join(n)).unwrap(), std::fs::read(b.join("frames").join(n)).unwrap(), "{n} differs");
        if n.ends_with("_motion.png") {
            let (_, _, px) = read_gray_png(&frames.join(n)).unwrap();
            assert!(px.iter().all(|&v| v == 0));
        }
    }
}

#[test]
fn train_decompose_evaluate_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    ok(&["train", "--steps", "12", "--init-epochs", "0", "--seed", "3", "--out", s(&run)]);
    assert_provenance(&run);
    assert_eq!(std::fs::read_to_string(run.join("run.log")).unwrap().lines().count(), 12);
    let ckpt = Checkpoint::load(&run.join("checkpoint.duoc")).unwrap();
    assert_eq!(ckpt.step, 12);
    assert_eq!(ckpt.config.init_epochs, 0);
    assert_eq!(ckpt.config.seed, 3);

    // The resolved config reproduces the run bit-exactly.
    let again = tmp.path().join("again");
    ok(&["train", "--config", s(&run.join("config.toml")), "--out", s(&again)]);
    assert_eq!(std::fs::read(run.join("checkpoint.duoc")).unwrap(), std::fs::read(again.join("checkpoint.duoc")).unwrap());

    let dec = tmp.path().join("dec");
    ok(&["decompose", s(&run), "--frame", "2", "--out", s(&dec)]);
    assert_provenance(&dec);
    let stem = dec.join("frame_002");
    for suffix in ["composed.png", "static.png", "dynamic.png"] {
        let (w, h, _) = read_rgb_png(&stem.with_file_name(format!("frame_002_{suffix}"))).unwrap();
        assert_eq!((w, h), (48, 48));
    }
    for suffix in ["semantic.png", "static_semantic.png", "motion.png"] {
        let (w, h, _) = read_gray_png(&stem.with_file_name(format!("frame_002_{suffix}"))).unwrap();
        assert_eq!((w, h), (48, 48));
    }
    for suffix in ["depth.duof", "static_depth.duof", "shadow.duof"] {
        let m = FloatMap::load(&stem.with_file_name(format!("frame_002_{suffix}"))).unwrap();
        assert_eq!(m.values.len(), 48 * 48);
        assert!(m.values.iter().all(|v| v.is_finite()));
    }
    let maps = std::fs::read_dir(&dec).unwrap().filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with("frame_")).count();
    assert_eq!(maps, 9);
    assert_eq!(code(&["decompose", s(&run), "--frame", "8", "--out", s(&dec)]), 2);

    let eval = tmp.path().join("eval");
    let out = ok(&["evaluate", s(&run.join("checkpoint.duoc")), "--split", "all", "--out", s(&eval)]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("PSNR"));
    assert_provenance(&eval);
    let csv = std::fs::read_to_string(eval.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], duofield::metrics::CSV_COLUMNS.join(","));
    assert_eq!(lines.len(), 1 + 8 + 1);
    assert!(lines[9].starts_with("all,"));
    assert!(eval.join("metrics.json").is_file());

    // Default output lands next to the checkpoint.
    ok(&["evaluate", s(&run), "--split", "holdout"]);
    assert!(run.join("eval-holdout").join("metrics.csv").is_file());
    assert_eq!(code(&["evaluate", s(&run), "--scene", "two-cars"]), 2);
}

#[test]
fn evaluate_fails_on_an_empty_split() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { holdout_every: 0, steps: Some(2), ..TrainConfig::desk() };
    let path = tmp.path().join("c.duoc");
    duofield::train::train(cfg, None).unwrap().save(&path).unwrap();
    let out = duofield(&["evaluate", s(&path), "--split", "holdout", "--out", s(&tmp.path().join("e"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("split is empty"));
}

#[test]
fn ablate_writes_full_row_and_signed_deltas() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("abl");
    ok(&["ablate", "--steps", "4", "--toggle", "fgmask", "--toggle", "sem", "--split", "all", "--out", s(&out)]);
    assert_provenance(&out);
    let csv = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[1][0], "full");
    assert!(rows[1][7..].iter().all(|v| v.parse::<f64>().unwrap() == 0.0));
    assert_eq!(rows[2][0], "w/o sem");
    assert_eq!(rows[3][0], "w/o fgmask");
    for r in &rows[2..] {
        let d = r[7].parse::<f64>().unwrap();
        let expect = r[1].parse::<f64>().unwrap() - rows[1][1].parse::<f64>().unwrap();
        assert!((d - expect).abs() < 2e-6);
    }
    for dir in ["full", "no-sem", "no-fgmask"] {
        assert_provenance(&out.join(dir));
        assert!(out.join(dir).join("checkpoint.duoc").is_file());
    }
    let no_mask = Checkpoint::load(&out.join("no-fgmask").join("checkpoint.duoc")).unwrap();
    assert_eq!(no_mask.config.disabled, vec![duofield::train::Toggle::Fgmask]);
    assert!(no_mask.model().unwrap().dynamic_field.mask.is_none());
    assert!(no_mask.config.active_terms(duofield::loss::Phase::Full).contains(&duofield::loss::Term::Semantic));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&["ablate", "--toggle", "wings", "--out", s(tmp.path())]), 2);
    assert_eq!(code(&["train", "--robust-fraction", "2", "--out", s(tmp.path())]), 2);
    assert_eq!(code(&["train", "--bogus"]), 2);
    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "learning-rate = 1\n").unwrap();
    assert_eq!(code(&["train", "--config", s(&bad)]), 2);
    assert_eq!(code(&["evaluate", s(&tmp.path().join("missing.duoc"))]), 4);
    let corrupt = tmp.path().join("corrupt.duoc");
    std::fs::write(&corrupt, b"DUOC\x01\x00").unwrap();
    assert_eq!(code(&["decompose", s(&corrupt)]), 4);
    assert_eq!(code(&["train", "--config", s(&tmp.path().join("nope.toml"))]), 4);
}

#[test]
fn static_only_training_leaves_a_nearly_empty_motion_mask() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    ok(&["train", "--scene", "static-only", "--steps", "300", "--out", s(&run)]);
    let dec = tmp.path().join("dec");
    ok(&["decompose", s(&run), "--out", s(&dec)]);
    let (mut on, mut total) = (0, 0);
    for f in 0..8 {
        let (_, _, px) = read_gray_png(&dec.join(format!("frame_{f:03}_motion.png"))).unwrap();
        on += px.iter().filter(|&&v| v > 0).count();
        total += px.len();
    }
    assert!((on as f64) < 0.01 * total as f64, "{on} of {total} pixels flagged as moving");
}
