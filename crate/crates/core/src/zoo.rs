//! Three small classifiers of deliberately different architecture, their
//! training loop, and the weight file format.
//!
//! Weight file layout (integers little-endian):
//!
//! ```text
//! "RAEW" | version u8 | arch u8 | H u16 | W u16 | C u16 | K u16 | count u32
//! per tensor: name_len u16 | name | rank u8 | dims u32 × rank | f32 × numel
//! CRC-32 of everything above, u32
//! ```

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::LabeledDataset;
use crate::tensor::{softmax, Graph, NodeId, Tensor, TensorError};

const MAGIC: &[u8; 4] = b"RAEW";
const VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum ZooError {
    #[error("unknown architecture '{0}' (expected mlp, cnn-a or cnn-res)")]
    UnknownArch(String),
    #[error("invalid model spec: {0}")]
    BadSpec(String),
    #[error("weights do not match spec: {0}")]
    ShapeMismatch(String),
    #[error("not a weight file (bad magic)")]
    BadMagic,
    #[error("unsupported weight file version {0}")]
    BadVersion(u8),
    #[error("weight file truncated at byte offset {offset}")]
    Truncated { offset: usize },
    #[error("weight file checksum mismatch")]
    Checksum,
    #[error("training data is empty")]
    EmptyData,
    #[error("epochs must be at least 1")]
    ZeroEpochs,
    #[error("training diverged (non-finite loss) in epoch {epoch}")]
    Diverged { epoch: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Arch {
    #[serde(rename = "mlp")]
    Mlp,
    #[serde(rename = "cnn-a")]
    CnnA,
    #[serde(rename = "cnn-res")]
    CnnRes,
}

impl Arch {
    pub const ALL: [Arch; 3] = [Arch::Mlp, Arch::CnnA, Arch::CnnRes];

    fn code(self) -> u8 {
        match self {
            Arch::Mlp => 0,
            Arch::CnnA => 1,
            Arch::CnnRes => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.code() == c)
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::Mlp => "mlp",
            Arch::CnnA => "cnn-a",
            Arch::CnnRes => "cnn-res",
        })
    }
}

impl FromStr for Arch {
    type Err = ZooError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mlp" => Ok(Arch::Mlp),
            "cnn-a" => Ok(Arch::CnnA),
            "cnn-res" => Ok(Arch::CnnRes),
            other => Err(ZooError::UnknownArch(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Arch,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub classes: usize,
}

const INPUT_SCALE: f32 = 4.0;
const MLP_HIDDEN: usize = 64;
const CNN_A_WIDTH: [usize; 2] = [12, 16];
const CNN_RES_WIDTH: [usize; 2] = [8, 16];

impl ModelSpec {
    pub fn new(arch: Arch, height: usize, width: usize, channels: usize, classes: usize) -> Result<Self, ZooError> {
        let spec = Self { arch, height, width, channels, classes };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), ZooError> {
        if self.classes < 2 {
            return Err(ZooError::BadSpec(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(ZooError::BadSpec("zero input dimension".into()));
        }
        if self.arch != Arch::Mlp && (!self.height.is_multiple_of(4) || !self.width.is_multiple_of(4)) {
            return Err(ZooError::BadSpec(format!(
                "{} needs H and W divisible by 4, got {}x{}",
                self.arch, self.height, self.width
            )));
        }
        Ok(())
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }

    /// Parameter names and shapes in storage order.
    pub fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let (h, w, c, k) = (self.height, self.width, self.channels, self.classes);
        match self.arch {
            Arch::Mlp => vec![
                ("fc1.w", vec![MLP_HIDDEN, h * w * c]),
                ("fc1.b", vec![MLP_HIDDEN]),
                ("fc2.w", vec![k, MLP_HIDDEN]),
                ("fc2.b", vec![k]),
            ],
            Arch::CnnA => {
                let [a, b] = CNN_A_WIDTH;
                vec![
                    ("conv1.k", vec![3, 3, c, a]),
                    ("conv1.b", vec![a]),
                    ("conv2.k", vec![3, 3, a, b]),
                    ("conv2.b", vec![b]),
                    ("fc.w", vec![k, (h / 4) * (w / 4) * b]),
                    ("fc.b", vec![k]),
                ]
            }
            Arch::CnnRes => {
                let [a, b] = CNN_RES_WIDTH;
                vec![
                    ("stem.k", vec![3, 3, c, a]),
                    ("stem.b", vec![a]),
                    ("res1.k", vec![3, 3, a, a]),
                    ("res1.b", vec![a]),
                    ("res2.k", vec![3, 3, a, a]),
                    ("res2.b", vec![a]),
                    ("conv.k", vec![3, 3, a, b]),
                    ("conv.b", vec![b]),
                    ("fc.w", vec![k, (h / 4) * (w / 4) * b]),
                    ("fc.b", vec![k]),
                ]
            }
        }
    }
}

/// Named parameter tensors in [`ModelSpec::param_shapes`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub tensors: Vec<(String, Tensor)>,
}

impl Weights {
    /// Every parameter zero; predicts the uniform distribution.
    pub fn zeros(spec: &ModelSpec) -> Self {
        Self {
            tensors: spec.param_shapes().into_iter().map(|(n, s)| (n.to_string(), Tensor::zeros(&s))).collect(),
        }
    }

    /// He-uniform weights, zero biases.
    pub fn init(spec: &ModelSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = spec
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let t = if name.ends_with(".b") {
                    Tensor::zeros(&shape)
                } else {
                    let fan_in: usize = if shape.len() == 4 { shape[0] * shape[1] * shape[2] } else { shape[1] };
                    let bound = (6.0 / fan_in as f32).sqrt();
                    let n = shape.iter().product();
                    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
                    Tensor::new(shape, data).expect("nonzero shape")
                };
                (name.to_string(), t)
            })
            .collect();
        Self { tensors }
    }

    fn check(&self, spec: &ModelSpec) -> Result<(), ZooError> {
        let expected = spec.param_shapes();
        if expected.len() != self.tensors.len() {
            return Err(ZooError::ShapeMismatch(format!(
                "{} expects {} tensors, got {}",
                spec.arch,
                expected.len(),
                self.tensors.len()
            )));
        }
        for ((en, es), (n, t)) in expected.iter().zip(&self.tensors) {
            if en != n || es.as_slice() != t.shape() {
                return Err(ZooError::ShapeMismatch(format!(
                    "expected {en}{es:?}, found {n}{:?}",
                    t.shape()
                )));
            }
            if !t.all_finite() {
                return Err(ZooError::ShapeMismatch(format!("{n} holds non-finite values")));
            }
        }
        Ok(())
    }
}

/// A spec together with weights that match it.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    weights: Weights,
}

impl Model {
    pub fn new(spec: ModelSpec, weights: Weights) -> Result<Self, ZooError> {
        spec.validate()?;
        weights.check(&spec)?;
        Ok(Self { spec, weights })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    fn check_input(&self, x: &Tensor) -> Result<(), ZooError> {
        if x.shape() != self.spec.input_shape() {
            return Err(ZooError::ShapeMismatch(format!(
                "input {:?}, model expects {:?}",
                x.shape(),
                self.spec.input_shape()
            )));
        }
        Ok(())
    }

    /// Records the forward pass on `g`, returning parameter leaves and logits.
    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<(Vec<NodeId>, NodeId), ZooError> {
        let p: Vec<NodeId> = self.weights.tensors.iter().map(|(_, t)| g.leaf(t.clone())).collect();
        // fixed input normalization: [0, 1] -> [-2, 2]
        let scaled = g.scale(x, INPUT_SCALE)?;
        let shift = g.leaf(Tensor::full(g.value(x).shape(), -0.5 * INPUT_SCALE));
        let x = g.add(scaled, shift)?;
        let logits = match self.spec.arch {
            Arch::Mlp => {
                let h = g.dense(x, p[0], p[1])?;
                let h = g.relu(h)?;
                g.dense(h, p[2], p[3])?
            }
            Arch::CnnA => {
                let h = g.conv2d(x, p[0], p[1])?;
                let h = g.relu(h)?;
                let h = g.maxpool2x2(h)?;
                let h = g.conv2d(h, p[2], p[3])?;
                let h = g.relu(h)?;
                let h = g.maxpool2x2(h)?;
                g.dense(h, p[4], p[5])?
            }
            Arch::CnnRes => {
                let a = g.conv2d(x, p[0], p[1])?;
                let a = g.relu(a)?;
                let r = g.conv2d(a, p[2], p[3])?;
                let r = g.relu(r)?;
                let r = g.conv2d(r, p[4], p[5])?;
                let h = g.add(a, r)?;
                let h = g.relu(h)?;
                let h = g.maxpool2x2(h)?;
                let h = g.conv2d(h, p[6], p[7])?;
                let h = g.relu(h)?;
                let h = g.maxpool2x2(h)?;
                g.dense(h, p[8], p[9])?
            }
        };
        Ok((p, logits))
    }

    pub fn logits(&self, x: &Tensor) -> Result<Vec<f32>, ZooError> {
        self.check_input(x)?;
        let mut g = Graph::new();
        let xi = g.leaf(x.clone());
        let (_, logits) = self.forward(&mut g, xi)?;
        Ok(g.value(logits).data().to_vec())
    }

    /// Softmax class probabilities for an image in `[0, 1]`.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<f32>, ZooError> {
        Ok(softmax(&self.logits(x)?))
    }

    pub fn classify(&self, x: &Tensor) -> Result<usize, ZooError> {
        Ok(argmax(&self.logits(x)?))
    }

    /// Cross-entropy loss and its gradient with respect to the input.
    pub fn loss_and_input_grad(&self, x: &Tensor, label: usize) -> Result<(f32, Tensor), ZooError> {
        self.check_input(x)?;
        let mut g = Graph::new();
        let xi = g.leaf(x.clone());
        let (_, logits) = self.forward(&mut g, xi)?;
        let loss = g.softmax_cross_entropy(logits, label)?;
        let mut grads = g.backward(loss)?;
        let gx = grads.take(xi).unwrap_or_else(|| Tensor::zeros(x.shape()));
        Ok((g.value(loss).item(), gx))
    }

    fn loss_and_param_grads(&self, x: &Tensor, label: usize) -> Result<(f32, bool, Vec<Tensor>), ZooError> {
        let mut g = Graph::new();
        let xi = g.leaf(x.clone());
        let (params, logits) = self.forward(&mut g, xi)?;
        let correct = argmax(g.value(logits).data()) == label;
        let loss = g.softmax_cross_entropy(logits, label)?;
        let mut grads = g.backward(loss)?;
        let pg = params
            .iter()
            .zip(&self.weights.tensors)
            .map(|(&id, (_, t))| grads.take(id).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        Ok((g.value(loss).item(), correct, pg))
    }
}

pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f32,
    pub momentum: f32,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 4, lr: 0.01, momentum: 0.9, batch_size: 32, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub model: Model,
    pub epoch_losses: Vec<f32>,
    pub train_accuracy: f32,
}

/// Minibatch SGD with momentum. Per-example gradients run in parallel but are
/// summed in example order, so results are bit-identical for a fixed seed.
pub fn train(spec: ModelSpec, data: &LabeledDataset, cfg: &TrainConfig) -> Result<TrainReport, ZooError> {
    spec.validate()?;
    if data.is_empty() {
        return Err(ZooError::EmptyData);
    }
    if cfg.epochs == 0 {
        return Err(ZooError::ZeroEpochs);
    }
    let inputs: Vec<Tensor> = data.images().iter().map(|im| im.to_tensor()).collect();
    if let Some(bad) = inputs.iter().find(|t| t.shape() != spec.input_shape()) {
        return Err(ZooError::ShapeMismatch(format!(
            "dataset image {:?} vs model input {:?}",
            bad.shape(),
            spec.input_shape()
        )));
    }
    let labels = data.labels();
    let mut model = Model { spec, weights: Weights::init(&spec, cfg.seed) };
    let mut velocity: Vec<Vec<f32>> = model.weights.tensors.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_5eed);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let batch = cfg.batch_size.max(1);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0f64;
        for chunk in order.chunks(batch) {
            let results: Vec<_> = chunk
                .par_iter()
                .map(|&i| model.loss_and_param_grads(&inputs[i], labels[i]))
                .collect::<Result<_, _>>()?;
            let mut sum: Vec<Vec<f32>> = velocity.iter().map(|v| vec![0.0; v.len()]).collect();
            for (loss, _, grads) in &results {
                total += *loss as f64;
                for (s, g) in sum.iter_mut().zip(grads) {
                    for (a, b) in s.iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
            }
            let scale = 1.0 / chunk.len() as f32;
            for ((v, s), (_, w)) in velocity.iter_mut().zip(&sum).zip(model.weights.tensors.iter_mut()) {
                for ((vi, si), wi) in v.iter_mut().zip(s).zip(w.data_mut()) {
                    *vi = cfg.momentum * *vi + si * scale;
                    *wi -= cfg.lr * *vi;
                }
            }
        }
        let mean = (total / inputs.len() as f64) as f32;
        if !mean.is_finite() || model.weights.tensors.iter().any(|(_, t)| !t.all_finite()) {
            return Err(ZooError::Diverged { epoch });
        }
        log::debug!("{} epoch {epoch}: loss {mean:.4}", spec.arch);
        epoch_losses.push(mean);
    }

    let correct: usize = inputs
        .par_iter()
        .zip(labels.par_iter())
        .map(|(x, &y)| model.classify(x).map(|p| (p == y) as usize))
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .sum();
    Ok(TrainReport { model, epoch_losses, train_accuracy: correct as f32 / inputs.len() as f32 })
}

pub fn encode_model(model: &Model) -> Vec<u8> {
    let s = &model.spec;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(s.arch.code());
    for d in [s.height, s.width, s.channels, s.classes] {
        out.extend_from_slice(&(d as u16).to_le_bytes());
    }
    out.extend_from_slice(&(model.weights.tensors.len() as u32).to_le_bytes());
    for (name, t) in &model.weights.tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ZooError> {
        if self.buf.len() - self.pos < n {
            return Err(ZooError::Truncated { offset: self.buf.len() });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, ZooError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, ZooError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, ZooError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<Model, ZooError> {
    if bytes.len() < 4 {
        return Err(if MAGIC.starts_with(bytes) { ZooError::Truncated { offset: bytes.len() } } else { ZooError::BadMagic });
    }
    if &bytes[..4] != MAGIC {
        return Err(ZooError::BadMagic);
    }
    // The body is parsed before the checksum so truncation reports where the
    // data ran out rather than a generic checksum failure.
    let mut r = Reader { buf: bytes, pos: 4 };
    let version = r.u8()?;
    if version != VERSION {
        return Err(ZooError::BadVersion(version));
    }
    let arch_code = r.u8()?;
    let arch = Arch::from_code(arch_code).ok_or_else(|| ZooError::UnknownArch(format!("code {arch_code}")))?;
    let dims = [r.u16()?, r.u16()?, r.u16()?, r.u16()?].map(|d| d as usize);
    let spec = ModelSpec::new(arch, dims[0], dims[1], dims[2], dims[3])?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(64));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = String::from_utf8_lossy(r.take(len)?).into_owned();
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(4).ok_or(ZooError::Truncated { offset: r.pos })?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        tensors.push((name, Tensor::new(shape, data)?));
    }
    let body_end = r.pos;
    let stored = r.u32()?;
    if crc32fast::hash(&bytes[..body_end]) != stored {
        return Err(ZooError::Checksum);
    }
    Model::new(spec, Weights { tensors })
}

pub fn save_weights(model: &Model, path: impl AsRef<Path>) -> Result<(), ZooError> {
    std::fs::write(path, encode_model(model))?;
    Ok(())
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<Model, ZooError> {
    decode_model(&std::fs::read(path)?)
}

/// Loads weights and checks they were trained for `spec`.
pub fn load_weights_for(path: impl AsRef<Path>, spec: &ModelSpec) -> Result<Model, ZooError> {
    let m = load_weights(path)?;
    if m.spec != *spec {
        return Err(ZooError::ShapeMismatch(format!("file holds {:?}, expected {:?}", m.spec, spec)));
    }
    Ok(m)
}
