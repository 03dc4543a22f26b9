//! Feedforward network machinery: dense layers, ReLU/softmax heads, the
//! weighted cross-entropy and MSE losses, analytic backprop, Adam, and a
//! versioned text checkpoint format.
//!
//! Everything runs at f64 and is deterministic given the seed.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Mat};

pub const CHECKPOINT_VERSION: u32 = 1;

const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Softmax,
    Identity,
}

impl Activation {
    fn tag(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Softmax => "softmax",
            Activation::Identity => "identity",
        }
    }

    fn from_tag(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "softmax" => Ok(Activation::Softmax),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::Corrupt(format!("unknown activation `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Layer {
    /// (in_dim, out_dim), row-major.
    pub weights: Mat,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

#[derive(Debug, Clone)]
pub struct MlpModel {
    pub layers: Vec<Layer>,
}

/// Hidden widths shared by the pairwise classifier and the regressor.
pub const HIDDEN_WIDTHS: [usize; 3] = [128, 256, 128];

impl MlpModel {
    /// He-style uniform initialization, zero biases.
    pub fn new(dims: &[usize], activations: &[Activation], seed: u64) -> Self {
        assert_eq!(dims.len(), activations.len() + 1, "one activation per layer");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(activations.len());
        for (i, &act) in activations.iter().enumerate() {
            let (fan_in, fan_out) = (dims[i], dims[i + 1]);
            let limit = (6.0 / fan_in as f64).sqrt();
            let mut w = Mat::zeros(fan_in, fan_out);
            for v in w.data.iter_mut() {
                *v = rng.random_range(-limit..limit);
            }
            layers.push(Layer {
                weights: w,
                bias: vec![0.0; fan_out],
                activation: act,
            });
        }
        MlpModel { layers }
    }

    /// Pairwise binary classifier: 128/256/128 ReLU hidden layers, 2-unit
    /// softmax head.
    pub fn classifier(input_dim: usize, seed: u64) -> Self {
        let dims = [input_dim, HIDDEN_WIDTHS[0], HIDDEN_WIDTHS[1], HIDDEN_WIDTHS[2], 2];
        let acts = [Activation::Relu, Activation::Relu, Activation::Relu, Activation::Softmax];
        Self::new(&dims, &acts, seed)
    }

    /// Score regressor: same trunk, single linear output unit.
    pub fn regressor(input_dim: usize, seed: u64) -> Self {
        let dims = [input_dim, HIDDEN_WIDTHS[0], HIDDEN_WIDTHS[1], HIDDEN_WIDTHS[2], 1];
        let acts = [Activation::Relu, Activation::Relu, Activation::Relu, Activation::Identity];
        Self::new(&dims, &acts, seed)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.rows
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().weights.cols
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.is_finite() && l.bias.iter().all(|b| b.is_finite()))
    }
}

fn apply_activation(z: &mut Mat, act: Activation) {
    match act {
        Activation::Identity => {}
        Activation::Relu => {
            for v in z.data.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        Activation::Softmax => {
            let cols = z.cols;
            for i in 0..z.rows {
                let row = z.row_mut(i);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                for v in row.iter_mut() {
                    *v /= sum;
                    if *v < PROB_FLOOR {
                        *v = PROB_FLOOR;
                    }
                }
                let _ = cols;
            }
        }
    }
}

fn layer_forward(layer: &Layer, input: &Mat) -> Mat {
    let mut z = linalg::matmul(input, &layer.weights);
    for i in 0..z.rows {
        let row = z.row_mut(i);
        for (v, b) in row.iter_mut().zip(&layer.bias) {
            *v += b;
        }
    }
    apply_activation(&mut z, layer.activation);
    z
}

/// Batched forward pass; one input per row.
pub fn forward(model: &MlpModel, input: &Mat) -> Result<Mat> {
    if input.cols != model.input_dim() {
        return Err(Error::Shape(format!(
            "input width {} != model input dim {}",
            input.cols,
            model.input_dim()
        )));
    }
    let mut a = layer_forward(&model.layers[0], input);
    for layer in &model.layers[1..] {
        a = layer_forward(layer, &a);
    }
    Ok(a)
}

pub fn forward_one(model: &MlpModel, x: &[f64]) -> Result<Vec<f64>> {
    let input = Mat {
        rows: 1,
        cols: x.len(),
        data: x.to_vec(),
    };
    Ok(forward(model, &input)?.data)
}

/// Eq-style weighted binary cross-entropy on a softmax pair `[p0, p1]`.
pub fn weighted_xent_loss(p: [f64; 2], label: u8, weight: f64) -> f64 {
    let p0 = p[0].max(PROB_FLOOR);
    let p1 = p[1].max(PROB_FLOOR);
    let l = label as f64;
    weight * (-(1.0 - l) * p0.ln() - l * p1.ln())
}

/// w = min(|y_i - y_j|, 1).
pub fn pair_weight(y_i: f64, y_j: f64) -> f64 {
    (y_i - y_j).abs().min(1.0)
}

pub fn mse_loss(prediction: f64, target: f64) -> f64 {
    (prediction - target) * (prediction - target)
}

/// What the batch is being trained against.
#[derive(Debug, Clone)]
pub enum BatchLoss {
    /// Binary labels plus per-sample loss weights; expects a 2-unit softmax
    /// head.
    WeightedXent { labels: Vec<u8>, weights: Vec<f64> },
    /// Scalar regression targets; expects a 1-unit identity head.
    Mse { targets: Vec<f64> },
}

#[derive(Debug, Clone)]
pub struct LayerGrad {
    pub weights: Mat,
    pub bias: Vec<f64>,
}

/// Mean batch loss and its analytic gradients.
pub fn backward(model: &MlpModel, input: &Mat, loss: &BatchLoss) -> Result<(f64, Vec<LayerGrad>)> {
    if input.cols != model.input_dim() {
        return Err(Error::Shape(format!(
            "input width {} != model input dim {}",
            input.cols,
            model.input_dim()
        )));
    }
    let batch = input.rows;
    let bf = batch as f64;

    // forward, keeping every activation
    let mut activations: Vec<Mat> = Vec::with_capacity(model.layers.len() + 1);
    activations.push(input.clone());
    for layer in &model.layers {
        let next = layer_forward(layer, activations.last().unwrap());
        activations.push(next);
    }
    let output = activations.last().unwrap();

    // loss value and output-layer delta (d mean-loss / d pre-activation,
    // using the softmax+xent and identity+mse shortcuts)
    let head = model.layers.last().unwrap().activation;
    let mut delta = Mat::zeros(batch, output.cols);
    let mut total_loss = 0.0;
    match loss {
        BatchLoss::WeightedXent { labels, weights } => {
            if head != Activation::Softmax || output.cols != 2 {
                return Err(Error::Shape("weighted cross-entropy needs a 2-unit softmax head".into()));
            }
            if labels.len() != batch || weights.len() != batch {
                return Err(Error::Shape("label/weight count != batch size".into()));
            }
            for i in 0..batch {
                let p = [output.get(i, 0), output.get(i, 1)];
                total_loss += weighted_xent_loss(p, labels[i], weights[i]);
                let y = [1.0 - labels[i] as f64, labels[i] as f64];
                for j in 0..2 {
                    delta.set(i, j, weights[i] * (p[j] - y[j]) / bf);
                }
            }
        }
        BatchLoss::Mse { targets } => {
            if head != Activation::Identity || output.cols != 1 {
                return Err(Error::Shape("mse needs a single identity output unit".into()));
            }
            if targets.len() != batch {
                return Err(Error::Shape("target count != batch size".into()));
            }
            for i in 0..batch {
                let x = output.get(i, 0);
                total_loss += mse_loss(x, targets[i]);
                delta.set(i, 0, 2.0 * (x - targets[i]) / bf);
            }
        }
    }
    total_loss /= bf;

    // backprop
    let mut grads: Vec<Option<LayerGrad>> = vec![None; model.layers.len()];
    for l in (0..model.layers.len()).rev() {
        let a_prev = &activations[l];
        let dw = linalg::matmul_tn(a_prev, &delta);
        let mut db = vec![0.0; delta.cols];
        for i in 0..delta.rows {
            for (acc, &v) in db.iter_mut().zip(delta.row(i)) {
                *acc += v;
            }
        }
        grads[l] = Some(LayerGrad { weights: dw, bias: db });
        if l > 0 {
            let mut prev_delta = linalg::matmul_nt(&delta, &model.layers[l].weights);
            // hidden layers are ReLU; gate by the stored activation
            if model.layers[l - 1].activation == Activation::Relu {
                let a = &activations[l];
                for (d, &av) in prev_delta.data.iter_mut().zip(&a.data) {
                    if av <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            delta = prev_delta;
        }
    }
    Ok((total_loss, grads.into_iter().map(Option::unwrap).collect()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamHyper {
    pub fn with_lr(learning_rate: f64) -> Self {
        AdamHyper {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub hyper: AdamHyper,
    pub step: u64,
    m: Vec<LayerGrad>,
    v: Vec<LayerGrad>,
}

impl AdamState {
    pub fn new(model: &MlpModel, hyper: AdamHyper) -> Self {
        let zeros = || {
            model
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weights: Mat::zeros(l.weights.rows, l.weights.cols),
                    bias: vec![0.0; l.bias.len()],
                })
                .collect::<Vec<_>>()
        };
        AdamState {
            hyper,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

fn adam_update(p: &mut f64, g: f64, m: &mut f64, v: &mut f64, h: &AdamHyper, bc1: f64, bc2: f64) {
    *m = h.beta1 * *m + (1.0 - h.beta1) * g;
    *v = h.beta2 * *v + (1.0 - h.beta2) * g * g;
    let m_hat = *m / bc1;
    let v_hat = *v / bc2;
    *p -= h.learning_rate * m_hat / (v_hat.sqrt() + h.epsilon);
}

pub fn adam_step(model: &mut MlpModel, state: &mut AdamState, grads: &[LayerGrad]) -> Result<()> {
    for g in grads {
        if !g.weights.is_finite() || g.bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::NonFinite("gradient".into()));
        }
    }
    state.step += 1;
    let h = state.hyper.clone();
    let bc1 = 1.0 - h.beta1.powi(state.step as i32);
    let bc2 = 1.0 - h.beta2.powi(state.step as i32);
    for (l, g) in grads.iter().enumerate() {
        let layer = &mut model.layers[l];
        for i in 0..layer.weights.data.len() {
            adam_update(
                &mut layer.weights.data[i],
                g.weights.data[i],
                &mut state.m[l].weights.data[i],
                &mut state.v[l].weights.data[i],
                &h,
                bc1,
                bc2,
            );
        }
        for i in 0..layer.bias.len() {
            adam_update(
                &mut layer.bias[i],
                g.bias[i],
                &mut state.m[l].bias[i],
                &mut state.v[l].bias[i],
                &h,
                bc1,
                bc2,
            );
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub validation_fraction: f64,
    /// Ordered pairs drawn per classifier epoch; `None` means 50 per
    /// training utterance.
    pub pairs_per_epoch: Option<usize>,
}

impl TrainConfig {
    pub fn classifier(seed: u64) -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            epochs: 30,
            batch_size: 1024,
            seed,
            validation_fraction: 0.10,
            pairs_per_epoch: None,
        }
    }

    pub fn regressor(seed: u64) -> Self {
        TrainConfig {
            batch_size: 4,
            ..Self::classifier(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("learning_rate, epochs and batch_size must be positive".into()));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::InvalidConfig("validation_fraction must be in (0, 1)".into()));
        }
        Ok(())
    }
}

/// A trained model plus the config and seed that produced it.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: MlpModel,
    pub config: Option<TrainConfig>,
    pub seed: u64,
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_floats(w: &mut impl Write, vals: &[f64], path: &Path) -> Result<()> {
    let mut line = String::with_capacity(vals.len() * 26);
    for (i, v) in vals.iter().enumerate() {
        if i > 0 {
            line.push(' ');
        }
        line.push_str(&format!("{v:.17e}"));
    }
    writeln!(w, "{line}").map_err(|e| io_err(path, e))
}

pub fn save_model(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "orars-model v{CHECKPOINT_VERSION}").map_err(|e| io_err(path, e))?;
    writeln!(w, "seed {}", ckpt.seed).map_err(|e| io_err(path, e))?;
    let cfg = match &ckpt.config {
        Some(c) => serde_json::to_string(c).expect("config serializes"),
        None => "-".into(),
    };
    writeln!(w, "config {cfg}").map_err(|e| io_err(path, e))?;
    writeln!(w, "layers {}", ckpt.model.layers.len()).map_err(|e| io_err(path, e))?;
    for layer in &ckpt.model.layers {
        writeln!(
            w,
            "layer {} {} {}",
            layer.weights.rows,
            layer.weights.cols,
            layer.activation.tag()
        )
        .map_err(|e| io_err(path, e))?;
        write_floats(&mut w, &layer.weights.data, path)?;
        write_floats(&mut w, &layer.bias, path)?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let mut next = || -> Result<String> {
        lines
            .next()
            .ok_or_else(|| Error::Corrupt("unexpected end of checkpoint".into()))?
            .map_err(|e| io_err(path, e))
    };

    let magic = next()?;
    let version = magic
        .strip_prefix("orars-model v")
        .ok_or_else(|| Error::Corrupt("missing checkpoint magic".into()))?
        .parse::<u32>()
        .map_err(|_| Error::Corrupt("bad version field".into()))?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let seed_line = next()?;
    let seed = seed_line
        .strip_prefix("seed ")
        .ok_or_else(|| Error::Corrupt("missing seed line".into()))?
        .parse::<u64>()
        .map_err(|_| Error::Corrupt("bad seed".into()))?;
    let cfg_line = next()?;
    let cfg_body = cfg_line
        .strip_prefix("config ")
        .ok_or_else(|| Error::Corrupt("missing config line".into()))?;
    let config = if cfg_body == "-" {
        None
    } else {
        Some(serde_json::from_str(cfg_body).map_err(|e| Error::Corrupt(format!("bad config echo: {e}")))?)
    };
    let layer_count: usize = next()?
        .strip_prefix("layers ")
        .ok_or_else(|| Error::Corrupt("missing layers line".into()))?
        .parse()
        .map_err(|_| Error::Corrupt("bad layer count".into()))?;

    let parse_floats = |line: &str, n: usize| -> Result<Vec<f64>> {
        let vals: Vec<f64> = line
            .split_ascii_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Corrupt("unparseable parameter value".into()))?;
        if vals.len() != n {
            return Err(Error::Corrupt(format!("expected {n} values, found {}", vals.len())));
        }
        Ok(vals)
    };

    let mut layers = Vec::with_capacity(layer_count);
    for _ in 0..layer_count {
        let header = next()?;
        let parts: Vec<&str> = header.split_ascii_whitespace().collect();
        if parts.len() != 4 || parts[0] != "layer" {
            return Err(Error::Corrupt(format!("bad layer header `{header}`")));
        }
        let rows: usize = parts[1].parse().map_err(|_| Error::Corrupt("bad layer rows".into()))?;
        let cols: usize = parts[2].parse().map_err(|_| Error::Corrupt("bad layer cols".into()))?;
        let activation = Activation::from_tag(parts[3])?;
        let wdata = parse_floats(&next()?, rows * cols)?;
        let bias = parse_floats(&next()?, cols)?;
        layers.push(Layer {
            weights: Mat {
                rows,
                cols,
                data: wdata,
            },
            bias,
            activation,
        });
    }
    let model = MlpModel { layers };
    if !model.is_finite() {
        return Err(Error::Corrupt("non-finite parameter in checkpoint".into()));
    }
    Ok(Checkpoint { model, config, seed })
}
