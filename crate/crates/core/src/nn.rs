//! Two-layer dense classifier: 784 → H (ReLU) → X (sigmoid when X = 1,
//! softmax otherwise), trained with Adam on mean cross-entropy.
//!
//! All training arithmetic is `f64`. Inputs are bytes scaled by 1/255.

use std::io::{self, Read, Write};

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::SplitDataset;
use crate::transform::{IdxDataset, PayloadVector, VECTOR_LEN};

pub const INPUT_WIDTH: usize = VECTOR_LEN;
/// Probabilities are clamped to `[PROB_FLOOR, 1 - PROB_FLOOR]` inside logs.
pub const PROB_FLOOR: f64 = 1e-12;

pub const MODEL_MAGIC: [u8; 4] = *b"IOTP";
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("label {label} does not fit a model with {outputs} output(s)")]
    LabelOutOfRange { label: u8, outputs: usize },
    #[error("not a model file (magic {0:?})")]
    BadModelMagic([u8; 4]),
    #[error("unsupported model format version {found} (this build reads {MODEL_FORMAT_VERSION})")]
    UnsupportedVersion { found: u32 },
    #[error("invalid model parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputKind {
    Sigmoid,
    Softmax,
}

impl OutputKind {
    pub fn for_width(outputs: usize) -> Self {
        if outputs == 1 {
            OutputKind::Sigmoid
        } else {
            OutputKind::Softmax
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub hidden: usize,
    pub outputs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// hidden × 784
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    /// outputs × hidden
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub output_kind: OutputKind,
}

impl ModelParams {
    pub fn zeros(shape: Shape) -> Self {
        ModelParams {
            w1: Array2::zeros((shape.hidden, INPUT_WIDTH)),
            b1: Array1::zeros(shape.hidden),
            w2: Array2::zeros((shape.outputs, shape.hidden)),
            b2: Array1::zeros(shape.outputs),
            output_kind: OutputKind::for_width(shape.outputs),
        }
    }

    pub fn shape(&self) -> Shape {
        Shape {
            hidden: self.w1.nrows(),
            outputs: self.w2.nrows(),
        }
    }

    pub fn outputs(&self) -> usize {
        self.w2.nrows()
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let Shape { hidden, outputs } = self.shape();
        if hidden == 0 || outputs == 0 {
            return Err(NnError::InvalidParams("zero-width layer".into()));
        }
        if self.w1.ncols() != INPUT_WIDTH || self.b1.len() != hidden || self.w2.ncols() != hidden || self.b2.len() != outputs {
            return Err(NnError::InvalidParams("inconsistent layer shapes".into()));
        }
        if self.output_kind != OutputKind::for_width(outputs) {
            return Err(NnError::InvalidParams(format!(
                "{:?} output with {outputs} neuron(s)",
                self.output_kind
            )));
        }
        let finite = self.w1.iter().chain(&self.b1).chain(&self.w2).chain(&self.b2).all(|x| x.is_finite());
        if !finite {
            return Err(NnError::InvalidParams("non-finite weight".into()));
        }
        Ok(())
    }
}

/// Weights i.i.d. Normal(0, `std`), biases zero.
pub fn init_params(shape: Shape, std: f64, seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, std).expect("init std must be finite and non-negative");
    let mut p = ModelParams::zeros(shape);
    p.w1.iter_mut().for_each(|w| *w = normal.sample(&mut rng));
    p.w2.iter_mut().for_each(|w| *w = normal.sample(&mut rng));
    p
}

#[derive(Debug, Clone)]
pub struct Forward {
    pub hidden: Array2<f64>,
    pub output: Array2<f64>,
}

pub fn forward(p: &ModelParams, batch: ArrayView2<'_, f64>) -> Result<Forward, NnError> {
    if batch.ncols() != p.w1.ncols() {
        return Err(NnError::ShapeMismatch(format!(
            "batch has {} columns, model expects {}",
            batch.ncols(),
            p.w1.ncols()
        )));
    }
    let mut hidden = batch.dot(&p.w1.t()) + &p.b1;
    hidden.mapv_inplace(|z| z.max(0.0));
    let mut output = hidden.dot(&p.w2.t()) + &p.b2;
    match p.output_kind {
        OutputKind::Sigmoid => output.mapv_inplace(sigmoid),
        OutputKind::Softmax => {
            for mut row in output.rows_mut() {
                let max = row.fold(f64::NEG_INFINITY, |m, &z| m.max(z));
                row.mapv_inplace(|z| (z - max).exp());
                let sum = row.sum();
                row.mapv_inplace(|e| e / sum);
            }
        }
    }
    Ok(Forward { hidden, output })
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean cross-entropy. One output column means binary cross-entropy on the
/// probability of label 1.
pub fn loss(output: ArrayView2<'_, f64>, targets: &[u8]) -> f64 {
    if targets.is_empty() {
        return 0.0;
    }
    let total: f64 = if output.ncols() == 1 {
        output
            .column(0)
            .iter()
            .zip(targets)
            .map(|(&p, &y)| {
                let p = p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
                if y == 1 {
                    -p.ln()
                } else {
                    -(1.0 - p).ln()
                }
            })
            .sum()
    } else {
        output
            .rows()
            .into_iter()
            .zip(targets)
            .map(|(row, &y)| -row[y as usize].max(PROB_FLOOR).ln())
            .sum()
    };
    total / targets.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl Gradients {
    pub fn zeros(shape: Shape) -> Self {
        let z = ModelParams::zeros(shape);
        Gradients {
            w1: z.w1,
            b1: z.b1,
            w2: z.w2,
            b2: z.b2,
        }
    }
}

fn check_targets(targets: &[u8], outputs: usize) -> Result<(), NnError> {
    let limit = if outputs == 1 { 2 } else { outputs };
    match targets.iter().find(|&&t| t as usize >= limit) {
        Some(&label) => Err(NnError::LabelOutOfRange { label, outputs }),
        None => Ok(()),
    }
}

/// Gradients of [`loss`] for a batch. Output layer uses the fused
/// `(probability - target) / batch` form; ReLU'(0) is taken as 0.
pub fn backward(p: &ModelParams, batch: ArrayView2<'_, f64>, targets: &[u8]) -> Result<Gradients, NnError> {
    if batch.nrows() != targets.len() {
        return Err(NnError::ShapeMismatch(format!(
            "{} rows but {} targets",
            batch.nrows(),
            targets.len()
        )));
    }
    check_targets(targets, p.outputs())?;
    let fwd = forward(p, batch)?;
    Ok(backward_from(p, batch, targets, &fwd))
}

fn backward_from(p: &ModelParams, batch: ArrayView2<'_, f64>, targets: &[u8], fwd: &Forward) -> Gradients {
    let n = targets.len().max(1) as f64;
    let mut delta_out = fwd.output.clone();
    if p.outputs() == 1 {
        for (d, &y) in delta_out.column_mut(0).iter_mut().zip(targets) {
            *d -= y as f64;
        }
    } else {
        for (mut row, &y) in delta_out.rows_mut().into_iter().zip(targets) {
            row[y as usize] -= 1.0;
        }
    }
    delta_out /= n;

    let w2 = delta_out.t().dot(&fwd.hidden);
    let b2 = delta_out.sum_axis(Axis(0));
    let mut delta_hidden = delta_out.dot(&p.w2);
    ndarray::Zip::from(&mut delta_hidden)
        .and(&fwd.hidden)
        .for_each(|d, &h| {
            if h <= 0.0 {
                *d = 0.0;
            }
        });
    let w1 = delta_hidden.t().dot(&batch);
    let b1 = delta_hidden.sum_axis(Axis(0));
    Gradients { w1, b1, w2, b2 }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-7,
        }
    }
}

/// Bias-corrected Adam on flat slices; `t` is the 1-based step number.
pub fn adam_update(params: &mut [f64], grads: &[f64], m: &mut [f64], v: &mut [f64], t: u64, cfg: &AdamConfig) {
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        params[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
}

/// First and second moment accumulators, plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Gradients,
    pub v: Gradients,
    pub t: u64,
}

impl AdamState {
    pub fn new(shape: Shape) -> Self {
        AdamState {
            m: Gradients::zeros(shape),
            v: Gradients::zeros(shape),
            t: 0,
        }
    }
}

fn flat<D: ndarray::Dimension>(a: &mut ndarray::Array<f64, D>) -> &mut [f64] {
    a.as_slice_mut().expect("parameters are contiguous")
}

fn flat_ref<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>) -> &[f64] {
    a.as_slice().expect("gradients are contiguous")
}

/// Advances `state.t` and applies one Adam update to every parameter.
pub fn adam_step(p: &mut ModelParams, g: &Gradients, state: &mut AdamState, cfg: &AdamConfig) {
    state.t += 1;
    let t = state.t;
    adam_update(flat(&mut p.w1), flat_ref(&g.w1), flat(&mut state.m.w1), flat(&mut state.v.w1), t, cfg);
    adam_update(flat(&mut p.b1), flat_ref(&g.b1), flat(&mut state.m.b1), flat(&mut state.v.b1), t, cfg);
    adam_update(flat(&mut p.w2), flat_ref(&g.w2), flat(&mut state.m.w2), flat(&mut state.v.w2), t, cfg);
    adam_update(flat(&mut p.b2), flat_ref(&g.b2), flat(&mut state.m.b2), flat(&mut state.v.b2), t, cfg);
}

/// Training hyperparameters. The defaults are the values every CLI run
/// starts from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub hidden: usize,
    pub init_std: f64,
    #[serde(flatten)]
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 25,
            batch_size: 100,
            hidden: INPUT_WIDTH,
            init_std: 0.05,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |msg: &str| Err(NnError::InvalidConfig(msg.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if self.hidden == 0 {
            return bad("hidden width must be positive");
        }
        if !(self.init_std.is_finite() && self.init_std >= 0.0) {
            return bad("init std must be finite and non-negative");
        }
        let AdamConfig { learning_rate, beta1, beta2, epsilon } = self.adam;
        if !(learning_rate.is_finite() && learning_rate > 0.0) {
            return bad("learning rate must be positive");
        }
        if !(beta1 > 0.0 && beta1 < 1.0 && beta2 > 0.0 && beta2 < 1.0) {
            return bad("beta1 and beta2 must lie strictly between 0 and 1");
        }
        if epsilon.is_nan() || epsilon <= 0.0 {
            return bad("epsilon must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: f64,
    pub validation_accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
}

impl TrainHistory {
    /// Epoch (1-based) with the highest validation accuracy; ties go to the
    /// lower validation loss, then to the earlier epoch.
    pub fn best_epoch(&self) -> Option<usize> {
        self.epochs
            .iter()
            .fold(None::<&EpochStats>, |best, e| match best {
                None => Some(e),
                Some(b) => {
                    let better = e.validation_accuracy > b.validation_accuracy
                        || (e.validation_accuracy == b.validation_accuracy && e.validation_loss < b.validation_loss);
                    Some(if better { e } else { b })
                }
            })
            .map(|e| e.epoch)
    }
}

/// Copies scaled rows of `images` selected by `rows` into a dense batch.
pub fn batch_matrix<'a, I>(images: I) -> Array2<f64>
where
    I: IntoIterator<Item = &'a PayloadVector>,
    I::IntoIter: ExactSizeIterator,
{
    let iter = images.into_iter();
    let mut m = Array2::zeros((iter.len(), INPUT_WIDTH));
    for (mut row, img) in m.rows_mut().into_iter().zip(iter) {
        for (x, &b) in row.iter_mut().zip(img.as_bytes()) {
            *x = b as f64 / 255.0;
        }
    }
    m
}

/// Predicted class per row: `p >= 0.5` for one output, otherwise argmax
/// with ties to the lowest index.
pub fn decide(row: &[f64]) -> usize {
    if row.len() == 1 {
        usize::from(row[0] >= 0.5)
    } else {
        argmax(row)
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

const EVAL_CHUNK: usize = 1024;

/// Probabilities for every image, one row each.
pub fn predict_batch(p: &ModelParams, images: &[PayloadVector]) -> Array2<f64> {
    let mut out = Array2::zeros((images.len(), p.outputs()));
    for (start, chunk) in (0..).step_by(EVAL_CHUNK).zip(images.chunks(EVAL_CHUNK)) {
        let x = batch_matrix(chunk);
        let fwd = forward(p, x.view()).expect("batch width is fixed");
        out.slice_mut(s![start..start + chunk.len(), ..]).assign(&fwd.output);
    }
    out
}

pub fn predict(p: &ModelParams, image: &PayloadVector) -> Vec<f64> {
    predict_batch(p, std::slice::from_ref(image)).row(0).to_vec()
}

/// Mean loss and accuracy of `p` on a labeled set (NaN when empty).
pub fn score(p: &ModelParams, ds: &IdxDataset) -> (f64, f64) {
    if ds.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let probs = predict_batch(p, &ds.images);
    let l = loss(probs.view(), &ds.labels);
    let correct = probs
        .rows()
        .into_iter()
        .zip(&ds.labels)
        .filter(|(row, &y)| decide(row.as_slice().expect("row-major")) == y as usize)
        .count();
    (l, correct as f64 / ds.len() as f64)
}

/// Mini-batch training on `data.train`; validation loss and accuracy are
/// recorded after each epoch. Deterministic for a given config.
pub fn train(data: &SplitDataset, config: &TrainConfig) -> Result<(ModelParams, TrainHistory), NnError> {
    train_with(&data.train, &data.validation, data.spec.output_width, config, |_| {})
}

/// As [`train`], on explicit sets, calling `on_epoch` after each epoch.
pub fn train_with(
    train_set: &IdxDataset,
    validation: &IdxDataset,
    outputs: usize,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<(ModelParams, TrainHistory), NnError> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(NnError::EmptyTrainingSet);
    }
    if train_set.images.len() != train_set.labels.len() {
        return Err(NnError::ShapeMismatch("images and labels differ in count".into()));
    }
    check_targets(&train_set.labels, outputs)?;
    check_targets(&validation.labels, outputs)?;

    let shape = Shape {
        hidden: config.hidden,
        outputs,
    };
    let mut params = init_params(shape, config.init_std, config.seed);
    let mut state = AdamState::new(shape);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle_rng.set_stream(1);

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = TrainHistory::default();
    let mut targets = Vec::with_capacity(config.batch_size);
    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let x = batch_matrix(batch.iter().map(|&i| &train_set.images[i]));
            targets.clear();
            targets.extend(batch.iter().map(|&i| train_set.labels[i]));
            let fwd = forward(&params, x.view())?;
            loss_sum += loss(fwd.output.view(), &targets) * batch.len() as f64;
            let grads = backward_from(&params, x.view(), &targets, &fwd);
            adam_step(&mut params, &grads, &mut state, &config.adam);
        }
        let (validation_loss, validation_accuracy) = score(&params, validation);
        let stats = EpochStats {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            validation_loss,
            validation_accuracy,
        };
        on_epoch(&stats);
        history.epochs.push(stats);
    }
    Ok((params, history))
}

/// Outcome of the select-then-retrain protocol.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// History of the exploratory run over `max_epochs`.
    pub search: TrainHistory,
    pub best_epoch: usize,
    /// History of the fresh retraining run.
    pub retrain: TrainHistory,
}

/// Trains for `config.epochs`, picks the best epoch from the validation
/// curve, then retrains from scratch (same seed) for that many epochs.
pub fn train_select_retrain(
    data: &SplitDataset,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&str, &EpochStats),
) -> Result<TrainOutcome, NnError> {
    let (_, search) = train_with(&data.train, &data.validation, data.spec.output_width, config, |e| {
        on_epoch("search", e)
    })?;
    let best_epoch = search.best_epoch().unwrap_or(config.epochs);
    let retrain_config = TrainConfig {
        epochs: best_epoch,
        ..*config
    };
    let (params, retrain) = train_with(&data.train, &data.validation, data.spec.output_width, &retrain_config, |e| {
        on_epoch("retrain", e)
    })?;
    Ok(TrainOutcome {
        params,
        search,
        best_epoch,
        retrain,
    })
}

/// Writes the binary parameter container.
pub fn save_model<W: Write>(p: &ModelParams, mut w: W) -> Result<(), NnError> {
    p.validate()?;
    let Shape { hidden, outputs } = p.shape();
    w.write_all(&MODEL_MAGIC)?;
    w.write_all(&MODEL_FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(hidden as u32).to_le_bytes())?;
    w.write_all(&(outputs as u32).to_le_bytes())?;
    w.write_all(&[match p.output_kind {
        OutputKind::Sigmoid => 0u8,
        OutputKind::Softmax => 1u8,
    }])?;
    let mut buf = Vec::with_capacity(8 * (p.w1.len() + p.b1.len() + p.w2.len() + p.b2.len()));
    for x in p.w1.iter().chain(&p.b1).chain(&p.w2).chain(&p.b2) {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

pub fn load_model<R: Read>(mut r: R) -> Result<ModelParams, NnError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MODEL_MAGIC {
        return Err(NnError::BadModelMagic(magic));
    }
    let mut word = [0u8; 4];
    let mut read_u32 = |r: &mut R| -> io::Result<u32> {
        r.read_exact(&mut word)?;
        Ok(u32::from_le_bytes(word))
    };
    let version = read_u32(&mut r)?;
    if version != MODEL_FORMAT_VERSION {
        return Err(NnError::UnsupportedVersion { found: version });
    }
    let hidden = read_u32(&mut r)? as usize;
    let outputs = read_u32(&mut r)? as usize;
    let mut kind = [0u8; 1];
    r.read_exact(&mut kind)?;
    let output_kind = match kind[0] {
        0 => OutputKind::Sigmoid,
        1 => OutputKind::Softmax,
        k => return Err(NnError::InvalidParams(format!("unknown output kind tag {k}"))),
    };
    if hidden == 0 || outputs == 0 || hidden > 1 << 16 || outputs > 1 << 16 {
        return Err(NnError::InvalidParams(format!("implausible shape {hidden}x{outputs}")));
    }
    let mut p = ModelParams::zeros(Shape { hidden, outputs });
    p.output_kind = output_kind;
    let mut bytes = [0u8; 8];
    for x in p
        .w1
        .iter_mut()
        .chain(p.b1.iter_mut())
        .chain(p.w2.iter_mut())
        .chain(p.b2.iter_mut())
    {
        r.read_exact(&mut bytes)?;
        *x = f64::from_le_bytes(bytes);
    }
    p.validate()?;
    Ok(p)
}

/// Text sidecar written next to every saved model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub format_version: u32,
    pub tool_version: String,
    pub scheme: u8,
    pub scheme_description: String,
    pub label_names: Vec<String>,
    pub output_kind: OutputKind,
    pub hidden: usize,
    pub outputs: usize,
    pub config: TrainConfig,
    pub split_seed: u64,
    pub best_epoch: Option<usize>,
    pub threshold: Option<f64>,
    pub history: TrainHistory,
}
