use std::path::Path;

use serde_json::{json, Value};
use udig_harness::config::ExperimentConfig;
use udig_harness::experiment::{reconstruct, sensitivity, train_dm, CHECKPOINT_FILE, SCHEDULE_FILE};

fn config(out: &Path, ckpt: &Path, workers: usize) -> ExperimentConfig {
    let v: Value = json!({
        "task": "ct",
        "image_size": 16,
        "ct": {"n_views": 6, "n_full_views": 60},
        "phantoms": {"kind": "random_ellipses", "seed": 40},
        "n_scans": 2,
        "seed": 9,
        "output_dir": out,
        "eval_every": 4,
        "workers": workers,
        "timing": "omit",
        "network": {"base_width": 4, "depth": 2},
        "diffusion": {
            "schedule": {"T": 20, "beta_min": 0.0001, "beta_max": 0.02, "kind": "linear"},
            "network": {"base_width": 4, "depth": 2},
            "n_train": 8, "epochs": 2, "batch": 4, "lr": 0.001,
            "checkpoint": ckpt
        },
        "methods": [
            {"kind": "dip", "name": "DIP", "iters": 8, "lr": 0.002},
            {"kind": "refg_dip", "name": "Ref-G DIP", "iters": 8, "lr": 0.002},
            {"kind": "udig", "name": "uDiG-DIP", "K": 4, "N": 2, "M": 2, "lambda": 1.0, "lr": 0.002}
        ],
        "sensitivity": {"sigmas": [0.0, 0.2], "n_seeds": 1, "iters": 6, "lr": 0.002}
    });
    ExperimentConfig::from_json(&v.to_string()).unwrap()
}

#[test]
fn full_pipeline_is_byte_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let a = config(&tmp.path().join("a"), &tmp.path().join("dm_a"), 1);
    let b = config(&tmp.path().join("b"), &tmp.path().join("dm_b"), 2);

    let ta = train_dm(&a).unwrap();
    let tb = train_dm(&b).unwrap();
    assert_eq!(ta.loss_trace, tb.loss_trace);
    let ca = std::fs::read(tmp.path().join("dm_a").join(CHECKPOINT_FILE)).unwrap();
    let cb = std::fs::read(tmp.path().join("dm_b").join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(ca, cb);
    assert!(tmp.path().join("dm_a").join(SCHEDULE_FILE).is_file());

    let ra = reconstruct(&a, None).unwrap();
    let rb = reconstruct(&b, None).unwrap();
    assert!(ra.failures.is_empty() && rb.failures.is_empty());
    assert_eq!(ra.rows.len(), 3);
    let read = |p: &Path| std::fs::read(p).unwrap();
    assert_eq!(read(&tmp.path().join("a/results.csv")), read(&tmp.path().join("b/results.csv")));
    assert_eq!(read(&tmp.path().join("a/curves.csv")), read(&tmp.path().join("b/curves.csv")));
    assert_eq!(
        read(&tmp.path().join("a/runs/udig_dip/scan_001/recon.udig-array")),
        read(&tmp.path().join("b/runs/udig_dip/scan_001/recon.udig-array"))
    );
    let u = ra.curve("uDiG-DIP").unwrap();
    assert_eq!(u.iterations, vec![4, 8]);
}

#[test]
fn sensitivity_writes_one_row_per_sigma() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config(&tmp.path().join("s"), &tmp.path().join("dm"), 1);
    cfg.task = udig_harness::config::TaskKind::Mri;
    let rep = sensitivity(&cfg).unwrap();
    assert_eq!(rep.points.len(), 2);
    assert!(rep.points.iter().all(|p| p.n_runs == 2 && p.mean_best_psnr_db.is_finite()));
    let csv = std::fs::read_to_string(tmp.path().join("s/sensitivity.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(tmp.path().join("s/sensitivity.svg").is_file());
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["mri.json", "ct.json", "sensitivity.json"] {
        let text = std::fs::read_to_string(dir.join(name)).unwrap();
        let cfg = ExperimentConfig::from_json(&text).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert!(cfg.n_scans > 0, "{name}");
    }
}
