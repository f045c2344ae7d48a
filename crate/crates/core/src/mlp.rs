//! Fully connected denoiser trained on the clean-signal MSE objective.
//!
//! Inputs are `x_t` with `ln sigma` appended; hidden layers use `tanh` so the
//! Jacobian is smooth everywhere, and the output layer is linear and starts
//! at zero.

use serde::{Deserialize, Serialize};

use crate::denoiser::{check_dim, Denoiser};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, Copy, PartialEq)]
struct LayerShape {
    n_in: usize,
    n_out: usize,
    /// Offset of the weights in the flat parameter vector; biases follow.
    offset: usize,
}

impl LayerShape {
    fn n_params(&self) -> usize {
        self.n_in * self.n_out + self.n_out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpDenoiser {
    widths: Vec<usize>,
    shapes: Vec<LayerShape>,
    params: Vec<f64>,
    finite: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Hidden layer widths.
    pub hidden: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 20_000,
            batch_size: 64,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            hidden: vec![128, 128],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("eps must be positive".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        Ok(())
    }
}

/// One training example: noisy input, its noise level and the clean target.
#[derive(Debug, Clone)]
pub struct Example {
    pub x_t: Vec<f64>,
    pub sigma: f64,
    pub target: Vec<f64>,
}

struct Trace {
    /// Input plus post-activation output of every layer.
    acts: Vec<Vec<f64>>,
}

impl MlpDenoiser {
    /// Glorot-uniform hidden layers, zero output layer, zero biases.
    pub fn init(data_dim: usize, hidden: &[usize], rng: &mut RngStream) -> Result<Self> {
        let mut widths = Vec::with_capacity(hidden.len() + 2);
        widths.push(data_dim + 1);
        widths.extend_from_slice(hidden);
        widths.push(data_dim);
        let mut model = MlpDenoiser::zeros(&widths)?;
        let last = model.shapes.len() - 1;
        for (l, shape) in model.shapes.clone().into_iter().enumerate() {
            if l == last {
                continue;
            }
            let limit = (6.0 / (shape.n_in + shape.n_out) as f64).sqrt();
            for w in &mut model.params[shape.offset..shape.offset + shape.n_in * shape.n_out] {
                *w = limit * (2.0 * rng.uniform() - 1.0);
            }
        }
        Ok(model)
    }

    pub fn zeros(widths: &[usize]) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::InvalidModel(format!("bad layer widths {widths:?}")));
        }
        if widths[0] != widths[widths.len() - 1] + 1 {
            return Err(Error::InvalidModel(format!(
                "input width must be data dim + 1, got {widths:?}"
            )));
        }
        let mut shapes = Vec::with_capacity(widths.len() - 1);
        let mut offset = 0;
        for pair in widths.windows(2) {
            let shape = LayerShape { n_in: pair[0], n_out: pair[1], offset };
            offset += shape.n_params();
            shapes.push(shape);
        }
        Ok(MlpDenoiser { widths: widths.to_vec(), shapes, params: vec![0.0; offset], finite: true })
    }

    pub fn from_params(widths: &[usize], params: Vec<f64>) -> Result<Self> {
        let mut model = MlpDenoiser::zeros(widths)?;
        if params.len() != model.params.len() {
            return Err(Error::DimMismatch { expected: model.params.len(), got: params.len() });
        }
        model.finite = params.iter().all(|p| p.is_finite());
        model.params = params;
        Ok(model)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn data_dim(&self) -> usize {
        *self.widths.last().expect("at least two widths")
    }

    fn run(&self, x_t: &[f64], sigma: f64) -> Trace {
        let mut input = Vec::with_capacity(x_t.len() + 1);
        input.extend_from_slice(x_t);
        input.push(sigma.ln());
        let mut acts = Vec::with_capacity(self.shapes.len() + 1);
        acts.push(input);
        let last = self.shapes.len() - 1;
        for (l, s) in self.shapes.iter().enumerate() {
            let w = &self.params[s.offset..s.offset + s.n_in * s.n_out];
            let b = &self.params[s.offset + s.n_in * s.n_out..s.offset + s.n_params()];
            let prev = &acts[l];
            let out: Vec<f64> = (0..s.n_out)
                .map(|o| {
                    let row = &w[o * s.n_in..(o + 1) * s.n_in];
                    let z = b[o] + row.iter().zip(prev).map(|(a, x)| a * x).sum::<f64>();
                    if l == last {
                        z
                    } else {
                        z.tanh()
                    }
                })
                .collect();
            acts.push(out);
        }
        Trace { acts }
    }

    pub fn forward(&self, x_t: &[f64], sigma: f64) -> Result<Vec<f64>> {
        check_dim(self.data_dim(), x_t.len())?;
        if !self.finite {
            return Err(Error::NonFiniteParameters);
        }
        if !(sigma > 0.0) {
            return Err(Error::BadRange(format!("sigma must be positive, got {sigma}")));
        }
        Ok(self.run(x_t, sigma).acts.pop().expect("output layer"))
    }

    /// Mean over the batch of `||target - D(x_t, sigma)||^2`, with its gradient
    /// with respect to the flat parameter vector.
    pub fn loss_and_grad(&self, batch: &[Example]) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; self.params.len()];
        let scale = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        let last = self.shapes.len() - 1;
        for ex in batch {
            let trace = self.run(&ex.x_t, ex.sigma);
            let out = &trace.acts[last + 1];
            // d loss / d output
            let mut delta: Vec<f64> = out
                .iter()
                .zip(&ex.target)
                .map(|(o, t)| {
                    let e = o - t;
                    loss += e * e * scale;
                    2.0 * e * scale
                })
                .collect();
            for l in (0..=last).rev() {
                let s = self.shapes[l];
                let prev = &trace.acts[l];
                let (gw, gb) = grad[s.offset..s.offset + s.n_params()].split_at_mut(s.n_in * s.n_out);
                for (o, &d) in delta.iter().enumerate() {
                    gb[o] += d;
                    for (g, &a) in gw[o * s.n_in..(o + 1) * s.n_in].iter_mut().zip(prev) {
                        *g += d * a;
                    }
                }
                if l == 0 {
                    break;
                }
                let w = &self.params[s.offset..s.offset + s.n_in * s.n_out];
                let mut back = vec![0.0; s.n_in];
                for (o, &d) in delta.iter().enumerate() {
                    for (b, &wi) in back.iter_mut().zip(&w[o * s.n_in..(o + 1) * s.n_in]) {
                        *b += d * wi;
                    }
                }
                // prev is tanh output of layer l-1: derivative 1 - a^2.
                for (b, &a) in back.iter_mut().zip(prev) {
                    *b *= 1.0 - a * a;
                }
                delta = back;
            }
        }
        (loss, grad)
    }

    pub fn with_params(&self, params: Vec<f64>) -> Result<Self> {
        MlpDenoiser::from_params(&self.widths, params)
    }
}

impl Denoiser for MlpDenoiser {
    fn dim(&self) -> usize {
        self.data_dim()
    }

    fn denoise(&self, x_t: &[f64], sigma: f64) -> Result<Vec<f64>> {
        self.forward(x_t, sigma)
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam { m: vec![0.0; n], v: vec![0.0; n], step: 0 }
    }

    fn update(&mut self, params: &mut [f64], grad: &[f64], cfg: &TrainConfig) {
        self.step += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.step);
        let c2 = 1.0 - cfg.beta2.powi(self.step);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            *p -= cfg.learning_rate * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
        }
    }
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub model: MlpDenoiser,
    /// Minibatch loss at every step.
    pub losses: Vec<f64>,
}

/// Minibatch Adam on `||x - D(x + sigma_t z, sigma_t)||^2` with `x` drawn from
/// the dataset, `t` uniform over the schedule and `z` standard normal.
pub fn train(dataset: &[Vec<f64>], schedule: &NoiseSchedule, config: &TrainConfig) -> Result<Trained> {
    config.validate()?;
    let d = dataset.first().ok_or(Error::EmptyDataset)?.len();
    if d == 0 {
        return Err(Error::EmptyDataset);
    }
    if let Some(bad) = dataset.iter().find(|x| x.len() != d) {
        return Err(Error::DimMismatch { expected: d, got: bad.len() });
    }
    let mut rng = RngStream::from_seed(config.seed);
    let mut model = MlpDenoiser::init(d, &config.hidden, &mut rng)?;
    let mut adam = Adam::new(model.n_params());
    let mut losses = Vec::with_capacity(config.steps);
    let sigmas = schedule.sigmas();

    let mut batch = Vec::with_capacity(config.batch_size);
    for step in 0..config.steps {
        batch.clear();
        for _ in 0..config.batch_size {
            let x = &dataset[rng.below(dataset.len())];
            let sigma = sigmas[rng.below(sigmas.len())];
            let x_t = x.iter().map(|xi| xi + sigma * rng.standard_normal()).collect();
            batch.push(Example { x_t, sigma, target: x.clone() });
        }
        let (loss, grad) = model.loss_and_grad(&batch);
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::DivergedLoss(step));
        }
        losses.push(loss);
        adam.update(&mut model.params, &grad, config);
    }
    model.finite = model.params.iter().all(|p| p.is_finite());
    if !model.finite {
        return Err(Error::NonFiniteParameters);
    }
    Ok(Trained { model, losses })
}

const MAGIC: &[u8; 4] = b"MLPD";
const VERSION: u32 = 1;

impl MlpDenoiser {
    /// `MLPD`, version, layer count, widths (all u32 LE), then f64 LE
    /// parameters layer by layer (row-major weights, then biases).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.widths.len() + 8 * self.params.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.shapes.len() as u32).to_le_bytes());
        for &w in &self.widths {
            out.extend_from_slice(&(w as u32).to_le_bytes());
        }
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut cur = bytes;
        let mut take = |n: usize| -> std::result::Result<&[u8], String> {
            if cur.len() < n {
                return Err("truncated checkpoint".to_string());
            }
            let (head, rest) = cur.split_at(n);
            cur = rest;
            Ok(head)
        };
        if take(4)? != MAGIC {
            return Err("bad magic".into());
        }
        let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes"));
        let version = u32_at(take(4)?);
        if version != VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let layers = u32_at(take(4)?) as usize;
        if layers == 0 || layers > 1024 {
            return Err(format!("implausible layer count {layers}"));
        }
        let widths: Vec<usize> =
            (0..=layers).map(|_| take(4).map(|b| u32_at(b) as usize)).collect::<std::result::Result<_, _>>()?;
        let skeleton = MlpDenoiser::zeros(&widths).map_err(|e| e.to_string())?;
        let n = skeleton.n_params();
        let raw = take(8 * n)?;
        let params = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        if !cur.is_empty() {
            return Err(format!("{} trailing bytes", cur.len()));
        }
        MlpDenoiser::from_params(&widths, params).map_err(|e| e.to_string())
    }
}
