use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use candle_core::DType;
use mirrorseg::checkpoint::load_checkpoint;
use mirrorseg::pipeline::{evaluate_split, read_logits};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_mirrorseg"));
    c.env_remove("MIRRORSEG_SEED");
    c
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("spawn mirrorseg")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn synth(root: &Path, videos: usize, frames: usize, size: usize) {
    let out = run(bin().args(["synth", "--videos", &videos.to_string(), "--frames", &frames.to_string()]).args([
        "--size",
        &size.to_string(),
        "--out",
        root.to_str().unwrap(),
    ]));
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}

fn train(data: &Path, out_dir: &Path, steps: usize) -> PathBuf {
    let out = run(bin()
        .args(["train", "--data", data.to_str().unwrap(), "--steps", &steps.to_string()])
        .args(["--out", out_dir.to_str().unwrap()]));
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    out_dir.join("model.safetensors")
}

#[test]
fn train_evaluate_predict_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, 2, 10, 48);
    let run_dir = dir.path().join("run");
    let ckpt = train(&data, &run_dir, 2);
    assert!(ckpt.exists());
    let log = std::fs::read_to_string(run_dir.join("loss.tsv")).unwrap();
    assert_eq!(log.lines().count(), 2);
    assert!(run_dir.join("checkpoints/step000002.safetensors").exists());

    // evaluate: stdout table equals the library computation
    let out = run(bin().args(["evaluate", "--checkpoint", ckpt.to_str().unwrap(), "--data", data.to_str().unwrap()]));
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let table = String::from_utf8_lossy(&out.stdout).into_owned();
    let model = load_checkpoint(&ckpt, None, DType::F32).unwrap();
    let expected = evaluate_split(&model, &data, "test").unwrap();
    assert_eq!(table, expected.to_tsv());
    assert_eq!(table.lines().next().unwrap(), "video_id\tiou\tf_beta\taccuracy\tmae");
    assert_eq!(table.lines().count(), 1 + 2 + 1);

    // predict one 10-frame video: 8 masks at the frame size plus the requested dumps
    let pred = dir.path().join("pred");
    let out = run(bin()
        .args(["predict", "--checkpoint", ckpt.to_str().unwrap()])
        .args(["--input", data.join("video000").to_str().unwrap()])
        .args(["--output", pred.to_str().unwrap()])
        .args(["--dump-prompts", "--dump-intermediate", "--dump-logits"]));
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let vdir = pred.join("video000");
    let mut masks: Vec<_> = std::fs::read_dir(&vdir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .collect();
    masks.sort();
    assert_eq!(masks.len(), 8);
    assert_eq!(masks[0].file_name().unwrap(), "000001.png");
    assert_eq!(masks[7].file_name().unwrap(), "000008.png");
    for m in &masks {
        let img = image::open(m).unwrap().to_luma8();
        assert_eq!(img.dimensions(), (48, 48));
        assert!(img.pixels().all(|p| p.0[0] == 0 || p.0[0] == 255));
    }
    let prompts = std::fs::read_to_string(vdir.join("prompts.txt")).unwrap();
    assert!(prompts.lines().count() >= 8);
    for line in prompts.lines() {
        let f: Vec<&str> = line.split(' ').collect();
        assert_eq!(f.len(), 4, "{line}");
        let frame: usize = f[0].parse().unwrap();
        assert!((1..=8).contains(&frame));
        for v in &f[1..3] {
            let v: f64 = v.parse().unwrap();
            assert!((0.0..1.0).contains(&v));
        }
    }
    for sub in ["freq", "response"] {
        assert_eq!(std::fs::read_dir(vdir.join(sub)).unwrap().count(), 8, "{sub}");
    }
    let (h, w, v) = read_logits(&vdir.join("logits/000004.msk")).unwrap();
    assert_eq!((h, w, v.len()), (48, 48, 48 * 48));

    // a whole root works too
    let out = run(bin()
        .args(["predict", "--checkpoint", ckpt.to_str().unwrap()])
        .args(["--input", data.to_str().unwrap(), "--output", dir.path().join("all").to_str().unwrap()]));
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(dir.path().join("all/video001/000008.png").exists());

    // architecture mismatch names the field and is a usage error
    let out = run(bin()
        .args(["evaluate", "--checkpoint", ckpt.to_str().unwrap(), "--data", data.to_str().unwrap()])
        .args(["--set", "heads=2"]));
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("heads"), "{}", stderr(&out));

    // a missing depth frame is an error, not a silent RGB-only run
    std::fs::remove_file(data.join("video000/depth/000003.png")).unwrap();
    let out = run(bin()
        .args(["predict", "--checkpoint", ckpt.to_str().unwrap()])
        .args(["--input", data.join("video000").to_str().unwrap()])
        .args(["--output", dir.path().join("nodepth").to_str().unwrap()]));
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("depth"), "{}", stderr(&out));
}

#[test]
fn empty_split_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, 1, 4, 32);
    let ckpt = train(&data, &dir.path().join("run"), 1);
    std::fs::write(data.join("empty.tsv"), "").unwrap();
    let out = run(bin()
        .args(["evaluate", "--checkpoint", ckpt.to_str().unwrap(), "--data", data.to_str().unwrap()])
        .args(["--split", "empty"]));
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("no videos"), "{}", stderr(&out));
}

#[test]
fn config_errors_exit_with_two() {
    let out = run(bin().args(["train", "--synthetic", "1", "--set", "bogus=1"]));
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("bogus"));

    let out = run(bin().args(["train", "--synthetic", "1", "--set", "input_size=50"]));
    assert_eq!(code(&out), 2);

    let out = run(bin().args(["train", "--synthetic", "1"]).env("MIRRORSEG_SEED", "minus one"));
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("MIRRORSEG_SEED"));

    let out = run(bin().args(["train", "--profile", "medium", "--synthetic", "1"]));
    assert_eq!(code(&out), 2);

    let out = run(bin().args(["train"]));
    assert_eq!(code(&out), 2);
}

#[test]
fn config_file_and_overrides_are_applied() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# toy run\nprofile = toy\ninput_size = 32\nmax_steps = 1\n").unwrap();
    let out_dir = dir.path().join("run");
    let out = run(bin()
        .args(["train", "--config", cfg.to_str().unwrap(), "--synthetic", "1"])
        .args(["--set", "seed=9", "--out", out_dir.to_str().unwrap()]));
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let stored = mirrorseg::checkpoint::read_checkpoint_config(&out_dir.join("model.safetensors")).unwrap();
    assert_eq!(stored.input_size, 32);
    assert_eq!(stored.max_steps, Some(1));
    assert_eq!(stored.seed, 9);

    // the environment seed wins over the file and flags
    let out = run(bin()
        .args(["train", "--config", cfg.to_str().unwrap(), "--synthetic", "1"])
        .args(["--seed", "4", "--out", out_dir.to_str().unwrap()])
        .env("MIRRORSEG_SEED", "21"));
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let stored = mirrorseg::checkpoint::read_checkpoint_config(&out_dir.join("model.safetensors")).unwrap();
    assert_eq!(stored.seed, 21);
}

#[test]
fn missing_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(bin()
        .args(["evaluate", "--checkpoint", dir.path().join("none.safetensors").to_str().unwrap()])
        .args(["--data", dir.path().to_str().unwrap()]));
    assert_eq!(code(&out), 1);
}

#[test]
fn gradcheck_reports_every_surface_and_catches_a_cut_residual() {
    let out = run(bin().args(["gradcheck"]));
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report = String::from_utf8_lossy(&out.stdout).into_owned();
    for s in mirrorseg::gradcheck::SURFACES {
        let line = report.lines().find(|l| l.starts_with(s)).unwrap_or_else(|| panic!("no line for {s}"));
        assert!(line.ends_with("ok"), "{line}");
    }

    let out = run(bin().args(["gradcheck", "--broken-residual"]));
    assert_eq!(code(&out), 3);
    let report = String::from_utf8_lossy(&out.stdout).into_owned();
    let fdaf = report.lines().find(|l| l.starts_with("fdaf")).unwrap();
    assert!(fdaf.ends_with("FAIL"), "{fdaf}");
    assert!(stderr(&out).contains("fdaf"));
}
