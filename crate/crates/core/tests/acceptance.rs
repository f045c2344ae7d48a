//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fail.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use eigenscore::eval::auroc;
use eigenscore::gmm::{GaussianMixture, GmmSpec};
use eigenscore::mlp::{train, TrainConfig};
use eigenscore::par::Execution;
use eigenscore::pipeline::{fit_calibration, raw_features, score_dataset, Calibration, FeatureConfig, Metric, RawFeature};
use eigenscore::rng::{derive_seed, RngStream};
use eigenscore::schedule::{NoiseSchedule, ScheduleKind, ScheduleSpec};
use eigenscore::spectral::{subspace_iteration, SpectralConfig};
use eigenscore::verify::{
    score_gap_quadrature, flattening_deviation, lattice_points, flattening_mixture, mse_mixture, mse_gap_quadrature, random_psd,
    random_triples, verify_score_route, verify_kyfan, verify_flattening, verify_miyasawa, verify_mse_trace, verify_spectral,
    SigmaGrid,
};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn within(elapsed: Duration, limit: Duration) -> bool {
    elapsed < limit
}

fn kl_identity() -> Outcome {
    let t = Instant::now();
    let p = GaussianMixture::isotropic(vec![0.0], 1.0).unwrap();
    let q = GaussianMixture::isotropic(vec![1.0], 1.0).unwrap();
    let quad = mse_gap_quadrature(&p, &q, &SigmaGrid::default()).unwrap();
    let el = t.elapsed();
    let pass = (quad.value - 0.5).abs() <= 0.002 && within(el, Duration::from_secs(1));
    outcome(pass, format!("quadrature {:.6} vs KL 0.5 (tol 0.002), {el:.2?} (limit 1 s)", quad.value))
}

fn score_route() -> Outcome {
    let t = Instant::now();
    let p = GaussianMixture::isotropic(vec![0.0], 1.0).unwrap();
    let q = GaussianMixture::isotropic(vec![1.0], 1.0).unwrap();
    let mse = mse_gap_quadrature(&p, &q, &SigmaGrid::default()).unwrap().value;
    let score = score_gap_quadrature(&p, &q, &SigmaGrid::default()).unwrap().value;
    let entries = verify_score_route(&p, &q, &SigmaGrid::default()).unwrap();
    let el = t.elapsed();
    let gap = (mse - score).abs();
    let pass = gap <= 1e-6 && entries.iter().all(|e| e.passed) && within(el, Duration::from_secs(1));
    outcome(pass, format!("mse route {mse:.9}, score route {score:.9}, gap {gap:.2e} (tol 1e-6), {el:.2?} (limit 1 s)"))
}

fn spectral() -> Outcome {
    let t = Instant::now();
    let seed = derive_seed(0, 5);
    let triples = random_triples(seed, 50, (3, 16), (0.7, 3.0), Some(3)).unwrap();
    let e = verify_spectral(&triples, 3, 20, seed).unwrap();
    let el = t.elapsed();
    let pass = e[0].deviation <= 0.01 && e[1].deviation <= 1e-4 && within(el, Duration::from_secs(30));
    outcome(
        pass,
        format!(
            "max rel error {:.2e} (tol 1e-2), dense vs analytic top {:.2e} (tol 1e-4), {el:.2?} (limit 30 s)",
            e[0].deviation, e[1].deviation
        ),
    )
}

fn flattening() -> Outcome {
    let e = verify_flattening(&flattening_mixture().unwrap(), &[10.0, 30.0, 100.0], &lattice_points(), 0.05).unwrap();
    let at100 = e[0].extra.get("deviation_sigma_100").copied().unwrap_or(f64::NAN);
    let mut single = 0.0f64;
    let g = GaussianMixture::isotropic(vec![0.0, 0.0], 1.0).unwrap();
    for s in [0.1, 1.0, 10.0, 30.0, 100.0] {
        for x in lattice_points() {
            let (flat, _) = flattening_deviation(&g, &x, s).unwrap();
            single = single.max((flat - 1.0 / (1.0 + s * s)).abs());
        }
    }
    let pass = e.iter().all(|c| c.passed) && at100 <= 0.05 && single <= 1e-9;
    outcome(
        pass,
        format!(
            "deviation at sigma 100 {at100:.4e} (tol 0.05), monotone {}, single Gaussian error {single:.2e} (tol 1e-9)",
            e[1].passed
        ),
    )
}

fn kyfan() -> Outcome {
    let mut rng = RngStream::from_seed(17);
    let (mut bound, mut attain) = (0.0f64, 0.0f64);
    let mut pass = true;
    for m in 0..20 {
        let n = 2 + rng.below(15);
        let a = random_psd(&mut rng, n).unwrap();
        let k = 1 + rng.below(n.min(4));
        let e = verify_kyfan(&a, k, 500, m).unwrap();
        bound = bound.max(e[0].deviation);
        attain = attain.max(e[1].deviation);
        pass &= e[0].deviation <= 1e-8 && e[1].deviation <= 1e-10;
    }
    outcome(pass, format!("worst excess over bound {bound:.2e} (tol 1e-8), worst attainment gap {attain:.2e} (tol 1e-10)"))
}

fn miyasawa() -> Outcome {
    let triples = random_triples(derive_seed(0, 4), 100, (1, 8), (0.1, 3.0), None).unwrap();
    let e = verify_miyasawa(&triples).unwrap();
    let pass = e[0].deviation == 0.0 && e[1].deviation <= 1e-4 && e[2].deviation <= 1e-4;
    outcome(
        pass,
        format!(
            "tweedie {:.1e} (exact), hessian {:.2e} (tol 1e-4), jacobian {:.2e} (tol 1e-4)",
            e[0].deviation, e[1].deviation, e[2].deviation
        ),
    )
}

fn mse_trace() -> Outcome {
    let e = verify_mse_trace(&mse_mixture().unwrap(), 1.0, 100_000, 23, 3.0).unwrap();
    outcome(
        e.deviation <= 3.0,
        format!(
            "mse {:.5}, mean trace {:.5}, {:.2} standard errors (tol 3)",
            e.lhs.unwrap_or(f64::NAN),
            e.rhs.unwrap_or(f64::NAN),
            e.deviation
        ),
    )
}

fn learned() -> Outcome {
    let t = Instant::now();
    let g = GaussianMixture::isotropic(vec![0.0], 1.0).unwrap();
    let data = g.sample(20_000, &mut RngStream::from_seed(1));
    let sched = NoiseSchedule::build(ScheduleKind::Geometric, 0.05, 5.0, 200).unwrap();
    let cfg = TrainConfig { steps: 20_000, seed: 3, ..Default::default() };
    let model = train(&data, &sched, &cfg).unwrap().model;
    let el = t.elapsed();
    let mut se = 0.0;
    let mut n = 0;
    for s in [0.25, 0.5, 1.0, 2.0] {
        for i in 0..=20 {
            let x = -2.0 + 0.2 * i as f64;
            let d = model.forward(&[x], s).unwrap()[0];
            se += (d - g.denoise_mmse(&[x], s).unwrap()[0]).powi(2);
            n += 1;
        }
    }
    let mse = se / n as f64;
    let lambda = subspace_iteration(&model, &[0.0], 1.0, &SpectralConfig { k: 1, ..Default::default() }).unwrap().eigenvalues[0];
    let pass = mse <= 0.01 && (lambda - 0.5).abs() <= 0.1 && within(el, Duration::from_secs(120));
    outcome(pass, format!("grid mse {mse:.2e} (tol 1e-2), lambda_1 {lambda:.4} (0.5 +- 0.1), trained in {el:.2?} (limit 2 min)"))
}

/// Narrow core inside a wide halo: shifted points land in the halo, where
/// the posterior is broad.
fn spike_and_slab() -> GaussianMixture {
    GaussianMixture::from_spec(GmmSpec {
        weights: vec![0.9, 0.1],
        means: vec![vec![0.0, 0.0]; 2],
        covariances: vec![vec![0.1, 0.0, 0.0, 0.1], vec![4.0, 0.0, 0.0, 4.0]],
    })
    .unwrap()
}

fn end_to_end() -> Outcome {
    let t = Instant::now();
    let g = spike_and_slab();
    let (_, cov) = g.moments();
    let q = g.shifted(&[3.0 * cov[(0, 0)].sqrt(), 0.0]).unwrap();
    let sched = ScheduleSpec::default().build().unwrap();
    let cfg = FeatureConfig::default();
    let ts = cfg.resolve_timesteps(&sched).unwrap();
    let exec = Execution::Sequential;
    let train_rows = g.sample(500, &mut RngStream::from_seed(1));
    let ind = g.sample(500, &mut RngStream::from_seed(2));
    let fresh = g.sample(500, &mut RngStream::from_seed(4));
    let ood = q.sample(500, &mut RngStream::from_seed(3));
    let raw: Vec<RawFeature> = raw_features(&g, &train_rows, &sched, &ts, &cfg, 11, exec).unwrap();
    let feats: Vec<_> = raw.iter().map(|r| r.aggregate(&ts, cfg.aggregation).unwrap()).collect();
    let cal = Calibration::new(Metric::Eigenscore, ts, cfg.aggregation, fit_calibration(&feats).unwrap(), String::new());
    let score = |rows: &[Vec<f64>], seed| -> Vec<f64> {
        score_dataset(&g, rows, &sched, &cal, &cfg, seed, exec).unwrap().iter().map(|r| r.score).collect()
    };
    let (s_ind, s_ood, s_fresh) = (score(&ind, 12), score(&ood, 13), score(&fresh, 14));
    let el = t.elapsed();
    let a_ood = auroc(&s_ind, &s_ood).unwrap().auroc;
    let a_same = auroc(&s_ind, &s_fresh).unwrap().auroc;
    let pass = a_ood >= 0.90 && (0.45..=0.55).contains(&a_same) && within(el, Duration::from_secs(300));
    outcome(
        pass,
        format!("shifted auroc {a_ood:.4} (>= 0.90), fresh draw auroc {a_same:.4} ([0.45, 0.55]), {el:.2?} single-threaded (limit 5 min)"),
    )
}

fn auroc_checks() -> Outcome {
    let a = auroc(&[1.0, 3.0], &[2.0, 4.0]).unwrap().auroc;
    let ties = auroc(&[1.0; 5], &[1.0; 7]).unwrap().auroc;
    let mut rng = RngStream::from_seed(9);
    let ind: Vec<f64> = (0..300).map(|_| rng.standard_normal()).collect();
    let ood: Vec<f64> = (0..300).map(|_| rng.standard_normal() + 0.5).collect();
    let f = |v: &[f64]| v.iter().map(|x| (2.0 * x).exp() + 3.0).collect::<Vec<_>>();
    let base = auroc(&ind, &ood).unwrap().auroc;
    let moved = auroc(&f(&ind), &f(&ood)).unwrap().auroc;
    let pass = a == 0.75 && ties == 0.5 && (base - moved).abs() <= 1e-12;
    outcome(pass, format!("{{1,3}} vs {{2,4}} {a}, all ties {ties}, transform shift {:.1e} (tol 1e-12)", (base - moved).abs()))
}

fn run_cli(args: &[&str], threads: Option<usize>) {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_eigenscore"));
    cmd.args(args).env_remove("EIGENSCORE_THREADS");
    if let Some(n) = threads {
        cmd.args(["--threads", &n.to_string()]);
    }
    let out = cmd.output().expect("spawn eigenscore");
    assert!(out.status.success(), "eigenscore {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    let spec = serde_json::json!({
        "model": { "gmm": {
            "weights": [0.5, 0.5],
            "means": [[-1.0, 0.0], [1.0, 0.5]],
            "covariances": [[0.3, 0.1, 0.1, 0.4], [0.5, 0.0, 0.0, 0.2]]
        }},
        "features": { "repetitions": 5 },
        "seed": 42,
        "n": 200,
        "paths": { "train_data": "train.bin", "test": "test.bin", "calibration": "cal.json" }
    });
    std::fs::write(&cfg, serde_json::to_vec_pretty(&spec).unwrap()).unwrap();
    let c = cfg.to_str().unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    run_cli(&["gen-data", "--config", c, "--out", &p("train.bin")], None);
    run_cli(&["gen-data", "--config", c, "--out", &p("test.bin"), "--seed", "7"], None);
    run_cli(&["fit", "--config", c], None);
    let mut outputs = Vec::new();
    for threads in [1, 1, 8, 8] {
        let out = p(&format!("scores_{}.csv", outputs.len()));
        run_cli(&["score", "--config", c, "--out", &out], Some(threads));
        outputs.push(std::fs::read(Path::new(&out)).unwrap());
    }
    let identical = outputs.windows(2).all(|w| w[0] == w[1]);
    let rows = outputs[0].iter().filter(|&&b| b == b'\n').count().saturating_sub(1);
    outcome(identical && rows == 200, format!("4 runs (1, 1, 8, 8 threads), {rows} rows, byte-identical: {identical}"))
}

type Check = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Check; 11] = [
        ("KL from excess denoising error", kl_identity),
        ("score and MSE quadratures agree", score_route),
        ("subspace iteration vs dense spectrum", spectral),
        ("covariance flattening at large noise", flattening),
        ("Ky Fan bound", kyfan),
        ("Tweedie and covariance identities", miyasawa),
        ("MSE equals expected trace", mse_trace),
        ("learned denoiser fidelity", learned),
        ("end-to-end OOD separation", end_to_end),
        ("AUROC correctness", auroc_checks),
        ("CLI determinism across threads", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let o = check();
        let tag = if o.passed { "PASS" } else { "FAIL" };
        println!("criterion {:>2} {tag}  {name}: {}", i + 1, o.detail);
        failed += usize::from(!o.passed);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
