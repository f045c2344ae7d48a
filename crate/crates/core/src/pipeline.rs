//! Feature extraction, calibration, tuning and scoring.
//!
//! For each selected timestep `t` and repetition `i` a sample is noised to
//! `x_t = x + z`, `z ~ N(0, sigma_t^2 I)`, and the sum of the top `K`
//! posterior-covariance eigenvalues at `x_t` is recorded. Repetitions are
//! aggregated per timestep, z-scored against training statistics and summed.
//!
//! Randomness for `(sample, t, i)` comes from its own stream, which drives
//! both the noise draw and the subspace starting block.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::eval::auroc;
use crate::linalg;
use crate::par::{try_map_indexed, Execution};
use crate::rng::{gaussian_vec, RngStream, StreamId};
use crate::schedule::{NoiseSchedule, TimestepSet};
use crate::spectral::{subspace_iteration_with, SpectralConfig, StepSize};

/// Floor applied to calibration standard deviations before dividing.
pub const SIGMA_FLOOR: f64 = 1e-12;

/// Retries use the repetition index with the top bit set, which no regular
/// repetition can reach.
const RETRY_BIT: u64 = 1 << 63;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Mean,
    Median,
    /// Keep every repetition as its own coordinate.
    #[serde(alias = "none")]
    All,
}

impl Aggregation {
    pub const ALL: [Aggregation; 3] = [Aggregation::Mean, Aggregation::Median, Aggregation::All];

    fn rank(self) -> u8 {
        match self {
            Aggregation::Mean => 0,
            Aggregation::Median => 1,
            Aggregation::All => 2,
        }
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Aggregation::Mean => "mean",
            Aggregation::Median => "median",
            Aggregation::All => "all",
        })
    }
}

impl FromStr for Aggregation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Aggregation::Mean),
            "median" => Ok(Aggregation::Median),
            "all" | "none" => Ok(Aggregation::All),
            other => Err(Error::Config(format!("unknown aggregation {other:?}"))),
        }
    }
}

/// Per-sample statistic used as the OOD score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    #[default]
    Eigenscore,
    Mse,
    ScoreNorm,
    ScoreDeriv,
    Nll,
}

impl Metric {
    pub const ALL: [Metric; 5] = [Metric::Eigenscore, Metric::Mse, Metric::ScoreNorm, Metric::ScoreDeriv, Metric::Nll];
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Eigenscore => "eigenscore",
            Metric::Mse => "mse",
            Metric::ScoreNorm => "score-norm",
            Metric::ScoreDeriv => "score-deriv",
            Metric::Nll => "nll",
        })
    }
}

impl FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown metric {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    /// Schedule indices; `None` picks the schedule's defaults.
    pub timesteps: Option<TimestepSet>,
    pub k: usize,
    pub repetitions: usize,
    pub aggregation: Aggregation,
    pub iters: usize,
    pub c: StepSize,
    pub early_stop: Option<f64>,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        let s = SpectralConfig::default();
        FeatureConfig {
            timesteps: None,
            k: s.k,
            repetitions: 20,
            aggregation: Aggregation::Mean,
            iters: s.iters,
            c: s.c,
            early_stop: s.early_stop,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.repetitions == 0 {
            return Err(Error::Config("repetitions must be at least 1".into()));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if let Some(ts) = &self.timesteps {
            ts.validate_for(schedule)?;
        }
        self.spectral(usize::MAX).validate(usize::MAX)
    }

    pub fn resolve_timesteps(&self, schedule: &NoiseSchedule) -> Result<TimestepSet> {
        let ts = self.timesteps.clone().unwrap_or_else(|| schedule.default_timesteps());
        ts.validate_for(schedule)?;
        Ok(ts)
    }

    /// Spectral settings for data of dimension `dim`, with `k` capped at `dim`.
    pub fn spectral(&self, dim: usize) -> SpectralConfig {
        SpectralConfig { k: self.k.min(dim), iters: self.iters, c: self.c, early_stop: self.early_stop, seed: 0 }
    }

    fn warn_if_clamped(&self, dim: usize) {
        if self.k > dim {
            log::warn!("k = {} exceeds the data dimension {dim}; using k = {dim}", self.k);
        }
    }
}

/// Label of one feature coordinate. `slot` is 1 for mean/median and the
/// 1-based repetition for "all".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Slot {
    pub timestep: usize,
    pub slot: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenFeature {
    pub values: Vec<f64>,
    pub layout: Vec<Slot>,
}

impl EigenFeature {
    /// One unnamed coordinate, used for the scalar baselines.
    pub fn scalar(value: f64) -> Self {
        EigenFeature { values: vec![value], layout: vec![Slot { timestep: 0, slot: 1 }] }
    }
}

/// Un-aggregated top-K sums: `values[j][i]` for timestep `timesteps[j]` and
/// repetition `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawFeature {
    pub timesteps: Vec<usize>,
    pub values: Vec<Vec<f64>>,
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

impl RawFeature {
    /// Restricts to `timesteps` and aggregates the repetitions.
    pub fn aggregate(&self, timesteps: &TimestepSet, aggregation: Aggregation) -> Result<EigenFeature> {
        let mut values = Vec::new();
        let mut layout = Vec::new();
        for &t in timesteps.indices() {
            let row = self
                .timesteps
                .iter()
                .position(|&s| s == t)
                .map(|j| &self.values[j])
                .ok_or_else(|| Error::LayoutMismatch(format!("timestep {t} was not extracted")))?;
            match aggregation {
                Aggregation::Mean => {
                    values.push(mean(row));
                    layout.push(Slot { timestep: t, slot: 1 });
                }
                Aggregation::Median => {
                    values.push(median(row));
                    layout.push(Slot { timestep: t, slot: 1 });
                }
                Aggregation::All => {
                    for (i, &v) in row.iter().enumerate() {
                        values.push(v);
                        layout.push(Slot { timestep: t, slot: i + 1 });
                    }
                }
            }
        }
        Ok(EigenFeature { values, layout })
    }
}

fn check_finite(x: &[f64]) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite("input sample"))
    }
}

fn noisy(x: &[f64], z: &[f64]) -> Vec<f64> {
    x.iter().zip(z).map(|(a, b)| a + b).collect()
}

fn top_sum_once<D: Denoiser + ?Sized>(
    denoiser: &D,
    x: &[f64],
    sigma: f64,
    spectral: &SpectralConfig,
    seed: u64,
    id: StreamId,
) -> Result<f64> {
    let mut rng = RngStream::new(seed, id);
    let z = gaussian_vec(&mut rng, x.len(), sigma);
    let r = subspace_iteration_with(denoiser, &noisy(x, &z), sigma, spectral, &mut rng)?;
    Ok(r.top_sum())
}

/// Top-K sums for every `(t, i)` of one sample.
pub fn raw_feature<D: Denoiser + ?Sized>(
    denoiser: &D,
    x: &[f64],
    sample: u64,
    schedule: &NoiseSchedule,
    timesteps: &TimestepSet,
    config: &FeatureConfig,
    seed: u64,
) -> Result<RawFeature> {
    check_finite(x)?;
    if denoiser.dim() != x.len() {
        return Err(Error::DimMismatch { expected: denoiser.dim(), got: x.len() });
    }
    let spectral = config.spectral(x.len());
    let mut values = Vec::with_capacity(timesteps.len());
    for &t in timesteps.indices() {
        let sigma = schedule.sigma_at(t)?;
        let mut row: Vec<Option<f64>> = Vec::with_capacity(config.repetitions);
        for i in 0..config.repetitions as u64 {
            let id = StreamId::new(sample, t as u64, i);
            let m = match top_sum_once(denoiser, x, sigma, &spectral, seed, id) {
                Err(Error::RankDeficient { .. }) => {
                    let retry = StreamId::new(sample, t as u64, i | RETRY_BIT);
                    match top_sum_once(denoiser, x, sigma, &spectral, seed, retry) {
                        Err(Error::RankDeficient { .. }) => None,
                        other => Some(other?),
                    }
                }
                other => Some(other?),
            };
            row.push(m);
        }
        let ok: Vec<f64> = row.iter().flatten().copied().collect();
        if ok.is_empty() {
            return Err(Error::RankDeficient { column: 0, residual: 0.0 });
        }
        let fill = median(&ok);
        if ok.len() < row.len() {
            log::warn!(
                "sample {sample}, timestep {t}: {} of {} repetitions rank deficient after retry; imputed {fill:.6e}",
                row.len() - ok.len(),
                row.len()
            );
        }
        values.push(row.into_iter().map(|m| m.unwrap_or(fill)).collect());
    }
    Ok(RawFeature { timesteps: timesteps.indices().to_vec(), values })
}

/// Aggregated feature vector for one sample.
pub fn eigen_feature<D: Denoiser + ?Sized>(
    denoiser: &D,
    x: &[f64],
    sample: u64,
    schedule: &NoiseSchedule,
    config: &FeatureConfig,
    seed: u64,
) -> Result<EigenFeature> {
    let ts = config.resolve_timesteps(schedule)?;
    raw_feature(denoiser, x, sample, schedule, &ts, config, seed)?.aggregate(&ts, config.aggregation)
}

/// [`raw_feature`] for a dataset; sample ids are the row indices.
pub fn raw_features<D: Denoiser + ?Sized>(
    denoiser: &D,
    data: &[Vec<f64>],
    schedule: &NoiseSchedule,
    timesteps: &TimestepSet,
    config: &FeatureConfig,
    seed: u64,
    exec: Execution,
) -> Result<Vec<RawFeature>> {
    config.warn_if_clamped(denoiser.dim());
    timesteps.validate_for(schedule)?;
    try_map_indexed(data, exec, |i, x| raw_feature(denoiser, x, i as u64, schedule, timesteps, config, seed))
}

/// Mean and population standard deviation per coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZStats {
    pub layout: Vec<Slot>,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub n: usize,
}

impl ZStats {
    pub fn z_scores(&self, feature: &EigenFeature) -> Result<Vec<f64>> {
        if feature.layout != self.layout {
            return Err(Error::LayoutMismatch(format!(
                "feature has {} coordinates, calibration has {}",
                feature.layout.len(),
                self.layout.len()
            )));
        }
        Ok(feature
            .values
            .iter()
            .zip(self.mu.iter().zip(&self.sigma))
            .map(|(v, (m, s))| (v - m) / s.max(SIGMA_FLOOR))
            .collect())
    }
}

pub fn fit_calibration(features: &[EigenFeature]) -> Result<ZStats> {
    if features.len() < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: features.len() });
    }
    let layout = features[0].layout.clone();
    if let Some(bad) = features.iter().position(|f| f.layout != layout || f.values.len() != layout.len()) {
        return Err(Error::LayoutMismatch(format!("training feature {bad} differs from feature 0")));
    }
    let n = features.len() as f64;
    let m = layout.len();
    let mut mu = vec![0.0; m];
    for f in features {
        for (a, v) in mu.iter_mut().zip(&f.values) {
            *a += v;
        }
    }
    mu.iter_mut().for_each(|a| *a /= n);
    let mut var = vec![0.0; m];
    for f in features {
        for ((a, v), c) in var.iter_mut().zip(&f.values).zip(&mu) {
            *a += (v - c) * (v - c);
        }
    }
    let sigma = var.into_iter().map(|v| (v / n).sqrt()).collect();
    Ok(ZStats { layout, mu, sigma, n: features.len() })
}

/// Everything needed to score new samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Calibration {
    pub metric: Metric,
    pub timesteps: TimestepSet,
    pub aggregation: Aggregation,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub layout: Vec<Slot>,
    pub n_train: usize,
    pub config_hash: String,
}

impl Calibration {
    pub fn new(metric: Metric, timesteps: TimestepSet, aggregation: Aggregation, stats: ZStats, config_hash: String) -> Self {
        Calibration {
            metric,
            timesteps,
            aggregation,
            mu: stats.mu,
            sigma: stats.sigma,
            layout: stats.layout,
            n_train: stats.n,
            config_hash,
        }
    }

    pub fn stats(&self) -> ZStats {
        ZStats { layout: self.layout.clone(), mu: self.mu.clone(), sigma: self.sigma.clone(), n: self.n_train }
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.layout.len();
        if self.mu.len() != m || self.sigma.len() != m {
            return Err(Error::LayoutMismatch(format!(
                "layout has {m} coordinates but mu/sigma have {}/{}",
                self.mu.len(),
                self.sigma.len()
            )));
        }
        if self.sigma.iter().any(|s| !(*s >= 0.0)) || self.mu.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("calibration statistics"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub id: u64,
    pub score: f64,
    pub z: Vec<f64>,
}

pub fn eigen_score(id: u64, feature: &EigenFeature, stats: &ZStats) -> Result<ScoreRecord> {
    let z = stats.z_scores(feature)?;
    Ok(ScoreRecord { id, score: z.iter().sum(), z })
}

/// One grid point of the validation search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneCandidate {
    pub timesteps: TimestepSet,
    pub aggregation: Aggregation,
    pub auroc: f64,
}

/// Highest AUROC, then fewer timesteps, then mean over median over all.
pub fn select_best(candidates: &[TuneCandidate]) -> Option<&TuneCandidate> {
    candidates.iter().min_by(|a, b| {
        b.auroc
            .total_cmp(&a.auroc)
            .then(a.timesteps.len().cmp(&b.timesteps.len()))
            .then(a.aggregation.rank().cmp(&b.aggregation.rank()))
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneOutcome {
    pub timesteps: TimestepSet,
    pub aggregation: Aggregation,
    /// Every grid point evaluated; empty when tuning fell back to defaults.
    pub candidates: Vec<TuneCandidate>,
}

fn aggregate_all(raw: &[RawFeature], ts: &TimestepSet, agg: Aggregation) -> Result<Vec<EigenFeature>> {
    raw.iter().map(|r| r.aggregate(ts, agg)).collect()
}

fn score_all(features: &[EigenFeature], stats: &ZStats) -> Result<Vec<f64>> {
    features.iter().enumerate().map(|(i, f)| eigen_score(i as u64, f, stats).map(|r| r.score)).collect()
}

/// Picks timesteps and aggregation by validation AUROC. Each grid point is
/// calibrated on `train` and evaluated on `val_ind` vs `val_ood`. Without
/// OOD validation data the defaults are returned.
pub fn tune(
    train: &[RawFeature],
    val_ind: &[RawFeature],
    val_ood: &[RawFeature],
    grid: &[TimestepSet],
    aggregations: &[Aggregation],
    defaults: (TimestepSet, Aggregation),
) -> Result<TuneOutcome> {
    if val_ood.is_empty() || val_ind.is_empty() {
        log::warn!("no labelled validation data; using default timesteps and aggregation");
        return Ok(TuneOutcome { timesteps: defaults.0, aggregation: defaults.1, candidates: Vec::new() });
    }
    let mut candidates = Vec::with_capacity(grid.len() * aggregations.len());
    for ts in grid {
        for &agg in aggregations {
            let stats = fit_calibration(&aggregate_all(train, ts, agg)?)?;
            let ind = score_all(&aggregate_all(val_ind, ts, agg)?, &stats)?;
            let ood = score_all(&aggregate_all(val_ood, ts, agg)?, &stats)?;
            let a = auroc(&ind, &ood)?.auroc;
            log::debug!("tune {:?} {agg}: auroc {a:.4}", ts.indices());
            candidates.push(TuneCandidate { timesteps: ts.clone(), aggregation: agg, auroc: a });
        }
    }
    let best = select_best(&candidates).ok_or_else(|| Error::Config("empty tuning grid".into()))?.clone();
    Ok(TuneOutcome { timesteps: best.timesteps, aggregation: best.aggregation, candidates })
}

/// Residual `x - D(x + z)` for the `(sample, t, i)` noise draw.
fn residual_at<D: Denoiser + ?Sized>(
    denoiser: &D,
    x: &[f64],
    sigma: f64,
    seed: u64,
    id: StreamId,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut rng = RngStream::new(seed, id);
    let z = gaussian_vec(&mut rng, x.len(), sigma);
    let x_t = noisy(x, &z);
    let d = denoiser.denoise(&x_t, sigma)?;
    Ok((x_t, d))
}

fn check_input<D: Denoiser + ?Sized>(denoiser: &D, x: &[f64], repetitions: usize) -> Result<()> {
    check_finite(x)?;
    if denoiser.dim() != x.len() {
        return Err(Error::DimMismatch { expected: denoiser.dim(), got: x.len() });
    }
    if repetitions == 0 {
        return Err(Error::Config("repetitions must be at least 1".into()));
    }
    Ok(())
}

/// Mean reconstruction error `||x - D(x_t)||^2` over timesteps and repetitions.
pub fn mse_score<D: Denoiser + ?Sized>(
    denoiser: &D,
    x: &[f64],
    sample: u64,
    schedule: &NoiseSchedule,
    timesteps: &TimestepSet,
    repetitions: usize,
    seed: u64,
) -> Result<f64> {
    check_input(denoiser, x, repetitions)?;
    let mut total = 0.0;
    for &t in timesteps.indices() {
        let sigma = schedule.sigma_at(t)?;
        for i in 0..repetitions as u64 {
            let (_, d) = residual_at(denoiser, x, sigma, seed, StreamId::new(sample, t as u64, i))?;
            total += linalg::squared_distance(x, &d);
        }
    }
    Ok(total / (timesteps.len() * repetitions) as f64)
}

/// `sqrt(sum_t mean_i ||eps||^2)` with `eps = (x_t - D(x_t)) / sigma_t`.
pub fn score_norm<D: Denoiser + ?Sized>(
    denoiser: &D,
    x: &[f64],
    sample: u64,
    schedule: &NoiseSchedule,
    timesteps: &TimestepSet,
    repetitions: usize,
    seed: u64,
) -> Result<f64> {
    check_input(denoiser, x, repetitions)?;
    let mut total = 0.0;
    for &t in timesteps.indices() {
        let sigma = schedule.sigma_at(t)?;
        let mut acc = 0.0;
        for i in 0..repetitions as u64 {
            let (x_t, d) = residual_at(denoiser, x, sigma, seed, StreamId::new(sample, t as u64, i))?;
            acc += linalg::squared_distance(&x_t, &d) / (sigma * sigma);
        }
        total += acc / repetitions as f64;
    }
    Ok(total.sqrt())
}

/// Noise-prediction residual at `x + sigma z`.
fn eps_at<D: Denoiser + ?Sized>(denoiser: &D, x: &[f64], z: &[f64], sigma: f64) -> Result<Vec<f64>> {
    let x_t: Vec<f64> = x.iter().zip(z).map(|(a, b)| a + sigma * b).collect();
    let d = denoiser.denoise(&x_t, sigma)?;
    Ok(x_t.iter().zip(&d).map(|(a, b)| (a - b) / sigma).collect())
}

/// Root-sum-square of the finite difference of `eps` between consecutive
/// selected timesteps, per unit index, on a shared standard-normal draw.
pub fn score_derivative_norm<D: Denoiser + ?Sized>(
    denoiser: &D,
    x: &[f64],
    sample: u64,
    schedule: &NoiseSchedule,
    timesteps: &TimestepSet,
    repetitions: usize,
    seed: u64,
) -> Result<f64> {
    check_input(denoiser, x, repetitions)?;
    if timesteps.len() < 2 {
        return Err(Error::TooFewTimesteps);
    }
    let idx = timesteps.indices();
    let sigmas: Vec<f64> = idx.iter().map(|&t| schedule.sigma_at(t)).collect::<Result<_>>()?;
    let mut per_pair = vec![0.0; idx.len() - 1];
    for i in 0..repetitions as u64 {
        // Timestep 0 is never a schedule index, so this stream is disjoint
        // from the per-timestep ones.
        let mut rng = RngStream::new(seed, StreamId::new(sample, 0, i));
        let z = gaussian_vec(&mut rng, x.len(), 1.0);
        let eps: Vec<Vec<f64>> = sigmas.iter().map(|&s| eps_at(denoiser, x, &z, s)).collect::<Result<_>>()?;
        for (j, acc) in per_pair.iter_mut().enumerate() {
            let gap = (idx[j + 1] - idx[j]) as f64;
            *acc += linalg::squared_distance(&eps[j + 1], &eps[j]) / (gap * gap);
        }
    }
    Ok((per_pair.iter().sum::<f64>() / repetitions as f64).sqrt())
}

/// `-sum_t log p_t(x)` under the analytic mixture.
pub fn nll_score<D: Denoiser + ?Sized>(
    denoiser: &D,
    x: &[f64],
    schedule: &NoiseSchedule,
    timesteps: &TimestepSet,
) -> Result<f64> {
    let gmm = denoiser.as_gmm().ok_or(Error::AnalyticModelRequired)?;
    check_finite(x)?;
    let mut total = 0.0;
    for &t in timesteps.indices() {
        total -= gmm.noisy_logpdf(x, schedule.sigma_at(t)?)?;
    }
    Ok(total)
}

/// Feature vector for any metric; baselines give a single coordinate.
#[allow(clippy::too_many_arguments)]
pub fn metric_feature<D: Denoiser + ?Sized>(
    metric: Metric,
    denoiser: &D,
    x: &[f64],
    sample: u64,
    schedule: &NoiseSchedule,
    timesteps: &TimestepSet,
    aggregation: Aggregation,
    config: &FeatureConfig,
    seed: u64,
) -> Result<EigenFeature> {
    let reps = config.repetitions;
    let v = match metric {
        Metric::Eigenscore => {
            return raw_feature(denoiser, x, sample, schedule, timesteps, config, seed)?.aggregate(timesteps, aggregation)
        }
        Metric::Mse => mse_score(denoiser, x, sample, schedule, timesteps, reps, seed)?,
        Metric::ScoreNorm => score_norm(denoiser, x, sample, schedule, timesteps, reps, seed)?,
        Metric::ScoreDeriv => score_derivative_norm(denoiser, x, sample, schedule, timesteps, reps, seed)?,
        Metric::Nll => nll_score(denoiser, x, schedule, timesteps)?,
    };
    Ok(EigenFeature::scalar(v))
}

/// [`metric_feature`] over a dataset; sample ids are the row indices.
#[allow(clippy::too_many_arguments)]
pub fn metric_features<D: Denoiser + ?Sized>(
    metric: Metric,
    denoiser: &D,
    data: &[Vec<f64>],
    schedule: &NoiseSchedule,
    timesteps: &TimestepSet,
    aggregation: Aggregation,
    config: &FeatureConfig,
    seed: u64,
    exec: Execution,
) -> Result<Vec<EigenFeature>> {
    if metric == Metric::Eigenscore {
        config.warn_if_clamped(denoiser.dim());
    }
    if metric == Metric::Nll && denoiser.as_gmm().is_none() {
        return Err(Error::AnalyticModelRequired);
    }
    timesteps.validate_for(schedule)?;
    try_map_indexed(data, exec, |i, x| {
        metric_feature(metric, denoiser, x, i as u64, schedule, timesteps, aggregation, config, seed)
    })
}

/// Scores a dataset against a calibration.
pub fn score_dataset<D: Denoiser + ?Sized>(
    denoiser: &D,
    data: &[Vec<f64>],
    schedule: &NoiseSchedule,
    calibration: &Calibration,
    config: &FeatureConfig,
    seed: u64,
    exec: Execution,
) -> Result<Vec<ScoreRecord>> {
    calibration.validate()?;
    let feats = metric_features(
        calibration.metric,
        denoiser,
        data,
        schedule,
        &calibration.timesteps,
        calibration.aggregation,
        config,
        seed,
        exec,
    )?;
    let stats = calibration.stats();
    feats.iter().enumerate().map(|(i, f)| eigen_score(i as u64, f, &stats)).collect()
}
