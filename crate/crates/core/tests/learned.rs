use eigenscore::gmm::GaussianMixture;
use eigenscore::io;
use eigenscore::mlp::{train, MlpDenoiser, TrainConfig};
use eigenscore::pipeline::{eigen_feature, FeatureConfig};
use eigenscore::rng::RngStream;
use eigenscore::schedule::{NoiseSchedule, ScheduleKind, TimestepSet};
use eigenscore::spectral::StepSize;
use eigenscore::Denoiser;

fn trained(steps: usize) -> (MlpDenoiser, NoiseSchedule) {
    let g = GaussianMixture::isotropic(vec![0.0], 1.0).unwrap();
    let data = g.sample(4000, &mut RngStream::from_seed(5));
    let sched = NoiseSchedule::build(ScheduleKind::Geometric, 0.05, 5.0, 200).unwrap();
    let cfg = TrainConfig { steps, hidden: vec![32, 32], seed: 1, ..Default::default() };
    (train(&data, &sched, &cfg).unwrap().model, sched)
}

#[test]
fn short_training_approaches_the_posterior_variance() {
    let (model, sched) = trained(3000);
    let t = sched.nearest_index(1.0);
    let cfg = FeatureConfig {
        timesteps: Some(TimestepSet::new(vec![t]).unwrap()),
        k: 1,
        repetitions: 8,
        c: StepSize::Relative(1e-3),
        ..Default::default()
    };
    let sigma = sched.sigma_at(t).unwrap();
    let want = sigma * sigma / (1.0 + sigma * sigma);
    for x in [-1.0, 0.0, 1.0] {
        let f = eigen_feature(&model, &[x], 0, &sched, &cfg, 9).unwrap();
        assert!((f.values[0] - want).abs() < 0.15, "x = {x}: {} vs {want}", f.values[0]);
    }
}

#[test]
fn checkpoint_round_trip_preserves_features() {
    let (model, sched) = trained(200);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bin");
    io::write_checkpoint(&path, &model, |sha256| io::CheckpointMeta {
        widths: model.widths().to_vec(),
        n_params: model.n_params(),
        schedule: sched.spec().clone(),
        train: TrainConfig::default(),
        n_train: 4000,
        final_loss: None,
        sha256,
    })
    .unwrap();
    let back = io::read_checkpoint(&path).unwrap();
    assert_eq!(back, model);
    let cfg = FeatureConfig { repetitions: 3, ..Default::default() };
    let a = eigen_feature(&model, &[0.4], 2, &sched, &cfg, 1).unwrap();
    let b = eigen_feature(&back, &[0.4], 2, &sched, &cfg, 1).unwrap();
    assert_eq!(a, b);
    assert_eq!(back.denoise(&[0.4], 1.0).unwrap(), model.denoise(&[0.4], 1.0).unwrap());
}

#[test]
fn truncated_checkpoint_is_a_format_error() {
    let (model, _) = trained(1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bin");
    let bytes = model.to_bytes();
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    let err = io::read_checkpoint(&path).unwrap_err();
    assert_eq!(err.exit_code(), 2, "{err}");
}
