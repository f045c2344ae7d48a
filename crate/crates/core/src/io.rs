//! File formats and run configuration.
//!
//! Tensors use a small binary layout: `TSR1`, then `version`, `ndim` and the
//! dims as little-endian u32, then the f32 little-endian payload in
//! row-major order. Every file is written to a temporary sibling and renamed
//! into place.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::eval::RocResult;
use crate::gmm::{GaussianMixture, GmmSpec};
use crate::mlp::{MlpDenoiser, TrainConfig};
use crate::pipeline::{FeatureConfig, ScoreRecord};
use crate::schedule::ScheduleSpec;
use crate::verify::SuiteConfig;

pub const TENSOR_MAGIC: &[u8; 4] = b"TSR1";
pub const TENSOR_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::DimMismatch { expected: n, got: data.len() });
        }
        Ok(Tensor { dims, data })
    }

    /// `n x d` tensor from rows, rounded to f32.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::BadRange("rows have different lengths".into()));
        }
        Tensor::new(vec![rows.len(), d], rows.iter().flatten().map(|&v| v as f32).collect())
    }

    pub fn to_rows(&self) -> Result<Vec<Vec<f64>>> {
        match self.dims[..] {
            [_, d] if d > 0 => Ok(self.data.chunks(d).map(|c| c.iter().map(|&v| f64::from(v)).collect()).collect()),
            _ => Err(Error::BadRange(format!("expected a non-empty n x d tensor, got dims {:?}", self.dims))),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(TENSOR_MAGIC);
        out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut words = bytes.get(4..).unwrap_or_default().chunks_exact(4).map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        if bytes.len() < 12 || &bytes[..4] != TENSOR_MAGIC {
            return Err("missing TSR1 header".into());
        }
        let version = words.next().unwrap_or_default();
        if version != TENSOR_VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let ndim = words.next().unwrap_or_default() as usize;
        let header = 12 + 4 * ndim;
        if bytes.len() < header {
            return Err(format!("truncated header for {ndim} dims"));
        }
        let dims: Vec<usize> = words.take(ndim).map(|d| d as usize).collect();
        let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or("dims overflow")?;
        let payload = &bytes[header..];
        if Some(payload.len()) != n.checked_mul(4) {
            return Err(format!("payload is {} bytes, dims {dims:?} need {}", payload.len(), n * 4));
        }
        let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        Ok(Tensor { dims, data })
    }
}

/// Writes `bytes` to a temporary file next to `path` and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_tensor(path: &Path, tensor: &Tensor) -> Result<()> {
    write_atomic(path, &tensor.encode())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    Tensor::decode(&read_bytes(path)?).map_err(|r| Error::format(path, r))
}

/// Reads an `n x d` tensor as rows.
pub fn read_dataset(path: &Path) -> Result<Vec<Vec<f64>>> {
    let t = read_tensor(path)?;
    let rows = t.to_rows().map_err(|e| Error::format(path, e.to_string()))?;
    if rows.is_empty() {
        return Err(Error::format(path, "no samples"));
    }
    Ok(rows)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_slice(&read_bytes(path)?).map_err(|e| Error::format(path, e.to_string()))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Where the denoiser comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum ModelSpec {
    Gmm(GmmSpec),
    Checkpoint(PathBuf),
}

/// Input and output locations; relative paths are taken from the config
/// file's directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Training samples, for `train` and `fit`.
    pub train_data: Option<PathBuf>,
    /// Labelled validation samples for tuning in `fit`.
    pub val_ind: Option<PathBuf>,
    pub val_ood: Option<PathBuf>,
    /// Samples to score.
    pub test: Option<PathBuf>,
    /// Checkpoint written by `train`.
    pub checkpoint: Option<PathBuf>,
    pub calibration: Option<PathBuf>,
    /// Score CSV; the summary goes next to it with a `.json` extension.
    pub scores: Option<PathBuf>,
    /// Verification report JSON.
    pub report: Option<PathBuf>,
}

impl Paths {
    fn resolve(&mut self, base: &Path) {
        for p in [
            &mut self.train_data,
            &mut self.val_ind,
            &mut self.val_ood,
            &mut self.test,
            &mut self.checkpoint,
            &mut self.calibration,
            &mut self.scores,
            &mut self.report,
        ]
        .into_iter()
        .flatten()
        {
            *p = resolve(base, p);
        }
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn default_n() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSpec,
    /// Distribution sampled by `gen-data`; defaults to the analytic model.
    #[serde(default)]
    pub data: Option<GmmSpec>,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub features: FeatureConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub verify: SuiteConfig,
    #[serde(default)]
    pub seed: u64,
    /// Samples drawn by `gen-data`.
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default)]
    pub paths: Paths,
}

impl RunConfig {
    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::format(origin, e.to_string()))
    }

    /// Parses the file and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = RunConfig::from_json(&text, path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.paths.resolve(&base);
        if let ModelSpec::Checkpoint(p) = &mut cfg.model {
            *p = resolve(&base, p);
        }
        Ok(cfg)
    }

    /// Spec of the distribution sampled by `gen-data`.
    pub fn data_spec(&self) -> Result<&GmmSpec> {
        match (&self.data, &self.model) {
            (Some(spec), _) => Ok(spec),
            (None, ModelSpec::Gmm(spec)) => Ok(spec),
            (None, ModelSpec::Checkpoint(_)) => Err(Error::Config("gen-data needs `data` when the model is a checkpoint".into())),
        }
    }

    pub fn load_model(&self) -> Result<Model> {
        match &self.model {
            ModelSpec::Gmm(spec) => Ok(Model::Gmm(GaussianMixture::from_spec(spec.clone())?)),
            ModelSpec::Checkpoint(path) => Ok(Model::Mlp(read_checkpoint(path)?)),
        }
    }

    /// Hash of everything that determines feature values: model, schedule,
    /// feature settings and seed. Checkpoints contribute their file hash.
    pub fn config_hash(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Key<'a> {
            model: serde_json::Value,
            schedule: &'a ScheduleSpec,
            features: &'a FeatureConfig,
            seed: u64,
        }
        let model = match &self.model {
            ModelSpec::Gmm(spec) => serde_json::json!({ "gmm": spec }),
            ModelSpec::Checkpoint(p) => serde_json::json!({ "checkpoint_sha256": sha256_hex(&read_bytes(p)?) }),
        };
        let key = Key { model, schedule: &self.schedule, features: &self.features, seed: self.seed };
        let bytes = serde_json::to_vec(&key).map_err(|e| Error::Config(e.to_string()))?;
        Ok(sha256_hex(&bytes))
    }
}

pub enum Model {
    Gmm(GaussianMixture),
    Mlp(MlpDenoiser),
}

impl Model {
    pub fn denoiser(&self) -> &dyn Denoiser {
        match self {
            Model::Gmm(g) => g,
            Model::Mlp(m) => m,
        }
    }
}

/// Sidecar written next to a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub widths: Vec<usize>,
    pub n_params: usize,
    pub schedule: ScheduleSpec,
    pub train: TrainConfig,
    pub n_train: usize,
    pub final_loss: Option<f64>,
    pub sha256: String,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn write_checkpoint(path: &Path, model: &MlpDenoiser, meta: impl FnOnce(String) -> CheckpointMeta) -> Result<()> {
    let bytes = model.to_bytes();
    let m = meta(sha256_hex(&bytes));
    write_atomic(path, &bytes)?;
    write_json(&sidecar_path(path), &m)
}

pub fn read_checkpoint(path: &Path) -> Result<MlpDenoiser> {
    MlpDenoiser::from_bytes(&read_bytes(path)?).map_err(|r| Error::format(path, r))
}

/// Path of the JSON summary that accompanies a score CSV.
pub fn summary_path(scores: &Path) -> PathBuf {
    scores.with_extension("json")
}

/// `id,score,z_1..z_m`, floats in shortest round-trip form.
pub fn encode_scores(records: &[ScoreRecord]) -> Result<Vec<u8>> {
    let m = records.first().map_or(0, |r| r.z.len());
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["id".to_string(), "score".to_string()];
    header.extend((1..=m).map(|i| format!("z_{i}")));
    let fail = |e: csv::Error| Error::Config(format!("csv encoding failed: {e}"));
    w.write_record(&header).map_err(fail)?;
    for r in records {
        if r.z.len() != m {
            return Err(Error::LayoutMismatch(format!("record {} has {} z-scores, expected {m}", r.id, r.z.len())));
        }
        let mut row = vec![r.id.to_string(), r.score.to_string()];
        row.extend(r.z.iter().map(f64::to_string));
        w.write_record(&row).map_err(fail)?;
    }
    w.into_inner().map_err(|e| Error::Config(format!("csv encoding failed: {e}")))
}

pub fn write_scores(path: &Path, records: &[ScoreRecord]) -> Result<()> {
    write_atomic(path, &encode_scores(records)?)
}

/// The `score` column of a score CSV.
pub fn read_scores(path: &Path) -> Result<Vec<f64>> {
    let bytes = read_bytes(path)?;
    let mut r = csv::Reader::from_reader(&bytes[..]);
    let headers = r.headers().map_err(|e| Error::format(path, e.to_string()))?.clone();
    let col = headers.iter().position(|h| h == "score").ok_or_else(|| Error::format(path, "no `score` column"))?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::format(path, e.to_string()))?;
        let field = rec.get(col).ok_or_else(|| Error::format(path, format!("row {} has no score", i + 1)))?;
        out.push(field.parse::<f64>().map_err(|e| Error::format(path, format!("row {}: {e}", i + 1)))?);
    }
    if out.is_empty() {
        return Err(Error::format(path, "no score rows"));
    }
    Ok(out)
}

pub fn write_roc(path: &Path, roc: &RocResult) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| Error::Config(format!("csv encoding failed: {e}"));
    w.write_record(["fpr", "tpr"]).map_err(fail)?;
    for (f, t) in &roc.curve {
        w.write_record([f.to_string(), t.to_string()]).map_err(fail)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(format!("csv encoding failed: {e}")))?;
    write_atomic(path, &bytes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub metric: String,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub config_hash: String,
}

impl ScoreSummary {
    pub fn of(metric: String, records: &[ScoreRecord], config_hash: String) -> Self {
        let n = records.len();
        let s: Vec<f64> = records.iter().map(|r| r.score).collect();
        let mean = s.iter().sum::<f64>() / n.max(1) as f64;
        let std = (s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n.max(1) as f64).sqrt();
        ScoreSummary {
            metric,
            n,
            mean,
            std,
            min: s.iter().copied().fold(f64::INFINITY, f64::min),
            max: s.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            config_hash,
        }
    }
}
