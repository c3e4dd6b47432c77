use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use vico_core::cli::MaskSidecar;
use vico_core::data::read_png;
use vico_core::evalkit::{mask_iou, MetricReport};

fn vico(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vico"))
        .args(args)
        .env_remove("VICO_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> Output {
    assert!(
        out.status.success(),
        "status {:?}\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY_CONFIG: &str = r#"{
  "dataset": "data/manifest.json",
  "out_dir": "run",
  "seed": 3,
  "model": {
    "unet": {
      "latent": [3, 8, 8], "patch": 1, "base_channels": 8, "channel_mult": [1],
      "attn_encoder": [1], "attn_middle": 1, "attn_decoder": [2], "vico_blocks": [2, 3],
      "heads": 2, "norm_groups": 4, "d_text": 8, "seed": 5
    },
    "text": { "d_text": 8, "heads": 2 }
  },
  "train": { "steps": 4, "batch": 2, "checkpoint_every": 2 }
}"#;

/// Synthetic 8x8 dataset plus a 4-step training run, shared by the tests.
fn fixture() -> &'static Path {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        ok(vico(&[
            "gen-synthetic",
            "--out",
            s(&data),
            "--n",
            "3",
            "--size",
            "8",
            "--radius",
            "2",
            "--seed",
            "1",
        ]));
        let cfg = dir.path().join("run.json");
        std::fs::write(&cfg, TINY_CONFIG).unwrap();
        ok(vico(&["--deterministic", "train", "--config", s(&cfg)]));
        dir
    })
    .path()
}

fn checkpoint() -> PathBuf {
    fixture().join("run/checkpoint_0004.ckpt")
}

fn reference() -> PathBuf {
    fixture().join("data/image_00.png")
}

#[test]
fn gen_synthetic_writes_images_masks_and_manifest() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        ok(vico(&[
            "gen-synthetic",
            "--out",
            s(d.path()),
            "--n",
            "5",
            "--seed",
            "4",
        ]));
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["images"].as_array().unwrap().len(), 5);
    assert_eq!(manifest["masks"].as_array().unwrap().len(), 5);
    let mut names: Vec<_> = std::fs::read_dir(a.path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert_eq!(names.len(), 11);
    for n in names {
        assert_eq!(
            std::fs::read(a.path().join(&n)).unwrap(),
            std::fs::read(b.path().join(&n)).unwrap(),
            "{n:?} differs"
        );
    }
}

#[test]
fn train_writes_checkpoints_and_loss_rows() {
    let run = fixture().join("run");
    for step in [2, 4] {
        assert!(run.join(format!("checkpoint_{step:04}.ckpt")).is_file());
    }
    let csv = std::fs::read_to_string(run.join("loss.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("step,total,denoise,reg"));
    assert_eq!(lines.count(), 4);
    assert!(run.join("train_summary.json").is_file());
}

#[test]
fn malformed_config_exits_2_with_key_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"dataset": "d", "out_dir": "o", "train": {"lamda": 0.1}}"#).unwrap();
    let out = vico(&["train", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("$.train.lamda"), "{err}");

    std::fs::write(&cfg, r#"{"dataset": "d", "out_dir": "o", "train": {"lambda": -1.0}}"#).unwrap();
    let out = vico(&["train", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("$.train"));
}

#[test]
fn sample_is_reproducible_and_validates_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.png"), dir.path().join("b.png"));
    for p in [&a, &b] {
        ok(vico(&[
            "sample",
            "--checkpoint",
            s(&checkpoint()),
            "--reference",
            s(&reference()),
            "--steps",
            "3",
            "--seed",
            "9",
            "--out",
            s(p),
        ]));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let img = read_png(&a).unwrap();
    assert_eq!((img.width, img.height), (8, 8));

    let out = vico(&["sample", "--checkpoint", s(&checkpoint()), "--out", s(&a)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--reference"));

    let out = vico(&[
        "sample",
        "--checkpoint",
        s(&checkpoint()),
        "--reference",
        s(&reference()),
        "--prompt",
        "a photo of a dog",
        "--out",
        s(&a),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("placeholder"));

    let out = vico(&[
        "sample",
        "--checkpoint",
        s(&dir.path().join("missing.ckpt")),
        "--reference",
        s(&reference()),
        "--out",
        s(&a),
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn inspect_dumps_every_interval_with_offline_iou() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("inspect");
    let truth = fixture().join("data/mask_00.png");
    ok(vico(&[
        "inspect",
        "--checkpoint",
        s(&checkpoint()),
        "--reference",
        s(&reference()),
        "--mask",
        s(&truth),
        "--steps",
        "10",
        "--interval",
        "5",
        "--out",
        s(&out),
    ]));
    let mut sides: Vec<MaskSidecar> = std::fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .map(|p| serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap())
        .collect();
    sides.sort_by_key(|s| (s.block, s.step));
    assert_eq!(sides.len(), 4);
    for block in [2, 3] {
        let steps: Vec<usize> = sides.iter().filter(|s| s.block == block).map(|s| s.step).collect();
        assert_eq!(steps, vec![4, 9]);
    }
    let t = read_png(&truth).unwrap();
    for side in &sides {
        let heat = read_png(&out.join(&side.heatmap)).unwrap();
        assert_eq!(heat.width * heat.height, side.grid[0] * side.grid[1]);
        let mask = read_png(&out.join(&side.mask)).unwrap().to_mask();
        let iou = mask_iou(&mask, (side.grid[0], side.grid[1]), &t.to_mask(), (t.height, t.width)).unwrap();
        assert_eq!(side.iou, Some(iou));
    }
    assert!(out.join("sample.png").is_file());
}

#[test]
fn eval_writes_one_sample_and_a_stable_report() {
    let dir = tempfile::tempdir().unwrap();
    let prompts = dir.path().join("prompts.txt");
    std::fs::write(&prompts, "a photo of a {}\n").unwrap();
    let manifest = fixture().join("data/manifest.json");
    let mut reports = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        ok(vico(&[
            "eval",
            "--checkpoint",
            s(&checkpoint()),
            "--dataset",
            s(&manifest),
            "--prompts",
            s(&prompts),
            "--samples",
            "1",
            "--steps",
            "3",
            "--out",
            s(&out),
        ]));
        assert_eq!(std::fs::read_dir(out.join("samples")).unwrap().count(), 1);
        reports.push(std::fs::read_to_string(out.join("report.json")).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
    let r: MetricReport = serde_json::from_str(&reports[0]).unwrap();
    assert_eq!(r.per_prompt.len(), 1);
    assert!(r.mask_iou.is_some());
}

#[test]
fn bad_thread_setting_is_a_config_error() {
    let out = Command::new(env!("CARGO_BIN_EXE_vico"))
        .args(["gen-synthetic", "--out", "/nonexistent/never"])
        .env("VICO_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("VICO_THREADS"));
}
