use std::path::Path;
use std::process::{Command, Output};

use patchseg::{load_volume, PhantomSpec, Volume3D};

fn patchseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_patchseg"))
        .args(args)
        .env("PATCHSEG_THREADS", "1")
        .output()
        .expect("run patchseg")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_corpus(dir: &Path, n: usize, seed: &str) -> std::path::PathBuf {
    let spec = dir.join("spec.json");
    std::fs::write(&spec, serde_json::to_string(&PhantomSpec::small()).unwrap()).unwrap();
    let out = dir.join(format!("corpus{seed}"));
    let o = patchseg(&[
        "phantom", "--n", &n.to_string(), "--out", path(&out), "--seed", seed, "--config", path(&spec),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn phantom_writes_pairs_and_manifest_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    let a = small_corpus(dir.path(), 3, "1");
    for f in ["corpus.json", "sub000_img.pseg", "sub000_lbl.pseg", "sub002_img.pseg", "sub002_lbl.pseg"] {
        assert!(a.join(f).exists(), "{f}");
    }
    std::fs::rename(&a, dir.path().join("first")).unwrap();
    let b = small_corpus(dir.path(), 3, "1");
    for f in ["corpus.json", "sub001_img.pseg", "sub001_lbl.pseg"] {
        assert_eq!(
            std::fs::read(dir.path().join("first").join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn train_segment_dice_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(dir.path(), 3, "2");
    let run = dir.path().join("run");
    let o = patchseg(&[
        "train", "--corpus", path(&corpus), "--ids", "0,1", "--steps", "20", "--batch", "16", "--patch", "5",
        "--eta", "0.01", "--seed", "3", "--checkpoint-every", "10", "--out", path(&run),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stderr = String::from_utf8_lossy(&o.stderr);
    assert!(stderr.contains("\"batch_size\":16") && stderr.contains("\"dropout\":0.5"), "{stderr}");
    for f in ["model.pdnn", "mask.pseg", "train_log.csv", "config.json", "ckpt_10.pdnn", "ckpt_20.pdnn"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let log = std::fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert!(log.starts_with("step,loss,ms_per_step,heldout_dice\n"));
    assert_eq!(log.lines().count(), 21);

    let out = dir.path().join("seg.pseg");
    let o = patchseg(&[
        "segment", "--ckpt", path(&run.join("model.pdnn")), "--image", path(&corpus.join("sub002_img.pseg")),
        "--mask", path(&run.join("mask.pseg")), "--out", path(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let seg = load_volume(&out).unwrap();
    assert_eq!(seg.dims(), [32, 24, 24]);
    let sidecar: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("seg.json")).unwrap()).unwrap();
    assert_eq!(sidecar["checkpoint_step"], 20);
    assert!(sidecar["voxels_classified"].as_u64().unwrap() > 0);

    let o = patchseg(&["dice", "--a", path(&out), "--b", path(&corpus.join("sub002_lbl.pseg"))]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!((0.0..=1.0).contains(&v["dice"].as_f64().unwrap()));
}

#[test]
fn segment_on_mismatched_grid_exits_5() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(dir.path(), 2, "4");
    let run = dir.path().join("run");
    let o = patchseg(&[
        "train", "--corpus", path(&corpus), "--steps", "2", "--batch", "4", "--patch", "5", "--out", path(&run),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let small = dir.path().join("small.pseg");
    patchseg::save_volume(&Volume3D::intensity([4, 4, 4], [1.0; 3], vec![0.0; 64]).unwrap(), &small).unwrap();
    let o = patchseg(&[
        "segment", "--ckpt", path(&run.join("model.pdnn")), "--image", path(&small), "--mask",
        path(&run.join("mask.pseg")), "--out", path(&dir.path().join("x.pseg")),
    ]);
    assert_eq!(o.status.code(), Some(5));
    let stderr = String::from_utf8_lossy(&o.stderr);
    let last = stderr.lines().last().unwrap();
    assert!(last.starts_with("error category=dims:"), "{last}");
}

#[test]
fn exit_codes_follow_error_category() {
    let o = patchseg(&["train", "--corpus", "x", "--out", "y", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(2));
    let o = patchseg(&["dice", "--a", "/nonexistent/a.pseg", "--b", "/nonexistent/b.pseg"]);
    assert_eq!(o.status.code(), Some(3));
    let o = patchseg(&["crossval", "--corpus", "/nonexistent", "--batch", "3"]);
    assert_eq!(o.status.code(), Some(2), "odd batch is a configuration error");

    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(dir.path(), 2, "5");
    let o = patchseg(&[
        "train", "--corpus", path(&corpus), "--steps", "50", "--batch", "8", "--patch", "5", "--eta", "1e6",
        "--out", path(&dir.path().join("run")),
    ]);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn help_documents_defaults() {
    let o = patchseg(&["train", "--help"]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    for needle in ["--eta", "[default: 1e-5]", "[default: 200]", "[default: 0.5]", "[default: 13]", "--seed"] {
        assert!(text.contains(needle), "missing {needle}");
    }
    for sub in ["phantom", "mask", "segment", "pbs", "dice", "crossval"] {
        assert!(patchseg(&[sub, "--help"]).status.success(), "{sub}");
    }
}

#[test]
fn crossval_prints_a_report_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(dir.path(), 4, "6");
    let args = [
        "crossval", "--corpus", path(&corpus), "--folds", "2", "--steps", "10", "--batch", "8", "--patch", "5",
        "--eta", "0.01", "--seed", "1",
    ];
    let a = patchseg(&args);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    let report: serde_json::Value = serde_json::from_slice(&a.stdout).unwrap();
    assert_eq!(report["scores"].as_array().unwrap().len(), 4);
    assert_eq!(report["meta"]["folds"], 2);
    let b = patchseg(&args);
    assert_eq!(a.stdout, b.stdout);

    let out = dir.path().join("cv");
    let o = patchseg(&[
        "crossval", "--corpus", path(&corpus), "--folds", "2", "--method", "pbs", "--pbs-patch", "3", "--window",
        "5", "--out", path(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["report.json", "report.csv", "summary.txt"] {
        assert!(out.join(f).exists(), "{f}");
    }
}

#[test]
fn mask_and_pbs_commands() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(dir.path(), 3, "7");
    let mask = dir.path().join("mask.pseg");
    let o = patchseg(&["mask", "--corpus", path(&corpus), "--ids", "0,1", "--radius", "1", "--out", path(&mask)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = dir.path().join("pbs.pseg");
    let o = patchseg(&[
        "pbs", "--corpus", path(&corpus), "--ids", "0,1", "--image", path(&corpus.join("sub002_img.pseg")),
        "--mask", path(&mask), "--pbs-patch", "3", "--window", "5", "--out", path(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(load_volume(&out).unwrap().labels().is_some());
    let sidecar: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("pbs.json")).unwrap()).unwrap();
    assert_eq!(sidecar["method"], "pbs-3");
}
