use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use eigenscore::error::{Error, Result};
use eigenscore::eval::auroc;
use eigenscore::gmm::GaussianMixture;
use eigenscore::io::{self, CheckpointMeta, RunConfig, ScoreSummary, Tensor};
use eigenscore::mlp;
use eigenscore::par::{self, Execution};
use eigenscore::pipeline::{
    self, fit_calibration, metric_features, raw_features, score_dataset, Aggregation, Calibration, Metric, RawFeature,
};
use eigenscore::rng::{derive_seed, RngStream};
use eigenscore::verify::{run_suite, SuiteConfig};

/// Seed labels, so each data split gets its own noise streams.
const SPLIT_DATA: u64 = 1;
const SPLIT_TRAIN: u64 = 2;
const SPLIT_VAL_IND: u64 = 3;
const SPLIT_VAL_OOD: u64 = 4;
const SPLIT_SCORE: u64 = 5;

#[derive(Parser)]
#[command(name = "eigenscore", version, about = "Out-of-distribution scores from posterior covariance spectra")]
struct Cli {
    /// Worker threads for per-sample work.
    #[arg(long, global = true, env = "EIGENSCORE_THREADS")]
    threads: Option<usize>,

    /// Log progress (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a dataset from the configured mixture.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `n` from the config.
        #[arg(long)]
        n: Option<usize>,
        /// Overrides `seed` from the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated mean shift applied to every component.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        shift: Option<Vec<f64>>,
    },
    /// Train an MLP denoiser on `paths.train_data`.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Extract training features, tune on validation data if present, and
    /// write the calibration.
    Fit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "eigenscore", value_parser = parse_metric)]
        metric: Metric,
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        val_ind: Option<PathBuf>,
        #[arg(long)]
        val_ood: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score samples against a calibration.
    Score {
        #[arg(long)]
        config: PathBuf,
        /// Must match the calibration's metric when given.
        #[arg(long, value_parser = parse_metric)]
        metric: Option<Metric>,
        #[arg(long)]
        calibration: Option<PathBuf>,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// AUROC of two score files (in-distribution first).
    Eval {
        ind_csv: PathBuf,
        ood_csv: PathBuf,
        /// Write the ROC curve as `fpr,tpr` CSV.
        #[arg(long)]
        roc: Option<PathBuf>,
    },
    /// Run the numerical verification suite.
    Verify {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_metric(s: &str) -> std::result::Result<Metric, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn required(opt: Option<PathBuf>, fallback: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    opt.or_else(|| fallback.clone()).ok_or_else(|| Error::Config(format!("no {what} path given")))
}

#[derive(Serialize)]
struct DataSidecar<'a> {
    model: &'a eigenscore::gmm::GmmSpec,
    seed: u64,
    n: usize,
    shift: Option<&'a [f64]>,
}

fn gen_data(config: &Path, out: &Path, n: Option<usize>, seed: Option<u64>, shift: Option<Vec<f64>>) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let mut gmm = GaussianMixture::from_spec(cfg.data_spec()?.clone())?;
    if let Some(delta) = &shift {
        gmm = gmm.shifted(delta)?;
    }
    let n = n.unwrap_or(cfg.n);
    if n == 0 {
        return Err(Error::Config("n must be at least 1".into()));
    }
    let seed = seed.unwrap_or(cfg.seed);
    let rows = gmm.sample(n, &mut RngStream::from_seed(derive_seed(seed, SPLIT_DATA)));
    io::write_tensor(out, &Tensor::from_rows(&rows)?)?;
    io::write_json(&io::sidecar_path(out), &DataSidecar { model: gmm.spec(), seed, n, shift: shift.as_deref() })?;
    log::info!("wrote {n} samples to {}", out.display());
    Ok(())
}

fn train(config: &Path, data: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let data_path = required(data, &cfg.paths.train_data, "training data")?;
    let out = required(out, &cfg.paths.checkpoint, "checkpoint")?;
    let rows = io::read_dataset(&data_path)?;
    let schedule = cfg.schedule.build()?;
    let trained = mlp::train(&rows, &schedule, &cfg.train)?;
    let model = trained.model;
    io::write_checkpoint(&out, &model, |sha256| CheckpointMeta {
        widths: model.widths().to_vec(),
        n_params: model.n_params(),
        schedule: cfg.schedule.clone(),
        train: cfg.train.clone(),
        n_train: rows.len(),
        final_loss: trained.losses.last().copied(),
        sha256,
    })?;
    log::info!("wrote checkpoint to {}", out.display());
    Ok(())
}

struct FitArgs {
    metric: Metric,
    train: Option<PathBuf>,
    val_ind: Option<PathBuf>,
    val_ood: Option<PathBuf>,
    out: Option<PathBuf>,
}

fn fit(config: &Path, args: FitArgs) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let model = cfg.load_model()?;
    let den = model.denoiser();
    let schedule = cfg.schedule.build()?;
    cfg.features.validate(&schedule)?;
    let timesteps = cfg.features.resolve_timesteps(&schedule)?;
    let train_rows = io::read_dataset(&required(args.train, &cfg.paths.train_data, "training data")?)?;
    let out = required(args.out, &cfg.paths.calibration, "calibration")?;
    let exec = Execution::Parallel;
    let seed_for = |label| derive_seed(cfg.seed, label);

    let calibration = if args.metric == Metric::Eigenscore {
        let extract = |rows: &[Vec<f64>], label| raw_features(den, rows, &schedule, &timesteps, &cfg.features, seed_for(label), exec);
        let train_raw = extract(&train_rows, SPLIT_TRAIN)?;
        let load = |p: Option<PathBuf>, fallback: &Option<PathBuf>, label| -> Result<Vec<RawFeature>> {
            match p.or_else(|| fallback.clone()) {
                Some(path) => extract(&io::read_dataset(&path)?, label),
                None => Ok(Vec::new()),
            }
        };
        let val_ind = load(args.val_ind, &cfg.paths.val_ind, SPLIT_VAL_IND)?;
        let val_ood = load(args.val_ood, &cfg.paths.val_ood, SPLIT_VAL_OOD)?;
        let grid = timesteps.contiguous_subsets();
        let tuned = pipeline::tune(
            &train_raw,
            &val_ind,
            &val_ood,
            &grid,
            &Aggregation::ALL,
            (timesteps.clone(), cfg.features.aggregation),
        )?;
        if let Some(best) = tuned.candidates.iter().find(|c| c.timesteps == tuned.timesteps && c.aggregation == tuned.aggregation) {
            log::info!("selected timesteps {:?}, {} (validation AUROC {:.4})", best.timesteps.indices(), best.aggregation, best.auroc);
        }
        let feats: Vec<_> = train_raw.iter().map(|r| r.aggregate(&tuned.timesteps, tuned.aggregation)).collect::<Result<_>>()?;
        Calibration::new(Metric::Eigenscore, tuned.timesteps, tuned.aggregation, fit_calibration(&feats)?, cfg.config_hash()?)
    } else {
        let agg = cfg.features.aggregation;
        let feats =
            metric_features(args.metric, den, &train_rows, &schedule, &timesteps, agg, &cfg.features, seed_for(SPLIT_TRAIN), exec)?;
        Calibration::new(args.metric, timesteps, agg, fit_calibration(&feats)?, cfg.config_hash()?)
    };
    io::write_json(&out, &calibration)?;
    log::info!("wrote calibration to {}", out.display());
    Ok(())
}

fn score(config: &Path, metric: Option<Metric>, calibration: Option<PathBuf>, input: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let cal: Calibration = io::read_json(&required(calibration, &cfg.paths.calibration, "calibration")?)?;
    if let Some(m) = metric {
        if m != cal.metric {
            return Err(Error::Config(format!("calibration was fit for metric {}, not {m}", cal.metric)));
        }
    }
    let hash = cfg.config_hash()?;
    if hash != cal.config_hash {
        return Err(Error::Config("calibration was fit with a different model, schedule, feature or seed configuration".into()));
    }
    let model = cfg.load_model()?;
    let schedule = cfg.schedule.build()?;
    let rows = io::read_dataset(&required(input, &cfg.paths.test, "input")?)?;
    let out = required(out, &cfg.paths.scores, "score output")?;
    let records = score_dataset(
        model.denoiser(),
        &rows,
        &schedule,
        &cal,
        &cfg.features,
        derive_seed(cfg.seed, SPLIT_SCORE),
        Execution::Parallel,
    )?;
    io::write_scores(&out, &records)?;
    io::write_json(&io::summary_path(&out), &ScoreSummary::of(cal.metric.to_string(), &records, hash))?;
    log::info!("wrote {} scores to {}", records.len(), out.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    auroc: f64,
    n_ind: usize,
    n_ood: usize,
}

fn eval(ind: &Path, ood: &Path, roc: Option<PathBuf>) -> Result<()> {
    let r = auroc(&io::read_scores(ind)?, &io::read_scores(ood)?)?;
    if let Some(p) = roc {
        io::write_roc(&p, &r)?;
    }
    let report = EvalReport { auroc: r.auroc, n_ind: r.n_ind, n_ood: r.n_ood };
    println!("{}", serde_json::to_string(&report).map_err(|e| Error::Config(e.to_string()))?);
    Ok(())
}

/// Returns whether every check passed.
fn verify(config: Option<PathBuf>, out: Option<PathBuf>) -> Result<bool> {
    let (suite, report_path) = match config {
        Some(p) => {
            let cfg = RunConfig::load(&p)?;
            (cfg.verify, out.or(cfg.paths.report))
        }
        None => (SuiteConfig::default(), out),
    };
    let report = run_suite(&suite)?;
    print!("{}", report.table());
    if let Some(p) = report_path {
        io::write_json(&p, &report)?;
    }
    Ok(report.all_passed())
}

fn run(command: Command) -> Result<bool> {
    match command {
        Command::GenData { config, out, n, seed, shift } => gen_data(&config, &out, n, seed, shift)?,
        Command::Train { config, data, out } => train(&config, data, out)?,
        Command::Fit { config, metric, train, val_ind, val_ood, out } => {
            fit(&config, FitArgs { metric, train, val_ind, val_ood, out })?
        }
        Command::Score { config, metric, calibration, input, out } => score(&config, metric, calibration, input, out)?,
        Command::Eval { ind_csv, ood_csv, roc } => eval(&ind_csv, &ood_csv, roc)?,
        Command::Verify { config, out } => return verify(config, out),
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if cli.threads.is_some() && !par::parallel_available() {
        log::warn!("built without the `parallel` feature; --threads is ignored");
    }
    match par::with_threads(cli.threads, || run(cli.command)) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
