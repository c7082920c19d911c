use candle_core::DType;
use mirrorseg::train::{synthetic_clips, train, TrainOptions};
use mirrorseg::{MirrorSegModel, RunConfig};

fn run(seed: u64) -> (Vec<f64>, Vec<Vec<(f64, f64)>>) {
    let mut cfg = RunConfig::toy();
    cfg.input_size = 32;
    cfg.seed = seed;
    let model = MirrorSegModel::new(&cfg, DType::F32).unwrap();
    let clips = synthetic_clips(32, 2, seed).unwrap();
    let opts = TrainOptions {
        steps: 10,
        ..TrainOptions::default()
    };
    let report = train(&model, &clips, &opts).unwrap();
    let prompts = model
        .forward_clip(&clips[0])
        .unwrap()
        .iter()
        .map(|o| o.prompts[0].coords.clone())
        .collect();
    (report.losses, prompts)
}

#[test]
fn same_seed_same_run() {
    let (la, pa) = run(11);
    let (lb, pb) = run(11);
    assert_eq!(la.len(), 10);
    for (a, b) in la.iter().zip(&lb) {
        assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
    }
    assert_eq!(pa, pb);
}

#[test]
fn different_seed_different_run() {
    let (la, _) = run(11);
    let (lb, _) = run(12);
    assert_ne!(la[0], lb[0]);
}
