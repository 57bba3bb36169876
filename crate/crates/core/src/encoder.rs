//! A small graph encoder that emits keypoints directly: two edge-convolution
//! layers over k-NN graphs, global max pooling and a bounded affine head.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Tensor, Var};
use crate::geometry::{ObjectModel, Point3, PointCloud};
use crate::loss::{self, LossConfig, LossError, PreparedObject, Similarity};
use crate::nn::{self, LEAKY_SLOPE};
use crate::sampling::{fps_indices, KeypointSet, SamplingError};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const DEFAULT_K: usize = 8;
pub const DEFAULT_HIDDEN: usize = 32;
/// Keypoints are `OUTPUT_SCALE · tanh(·)`, i.e. within 1.5× the normalized box.
pub const OUTPUT_SCALE: f64 = 0.75;
pub const DEFAULT_LR: f64 = 1e-3;
/// The learning rate is divided by this factor (decay ×0.1) every [`LR_DECAY_EVERY`] epochs.
pub const LR_DECAY_DIVISOR: f64 = 10.0;
pub const LR_DECAY_EVERY: usize = 50;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("k = {k} needs more than {k} points, cloud has {n}")]
    TooFewPoints { k: usize, n: usize },
    #[error("invalid encoder configuration: {0}")]
    InvalidConfig(String),
    #[error("checkpoint version {found} is not supported (expected {CHECKPOINT_VERSION})")]
    UnsupportedVersion { found: u32 },
    #[error("checkpoint is inconsistent: {0}")]
    BadCheckpoint(String),
    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("no objects to train on")]
    NoObjects,
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
}

/// Per-node neighbor lists, nearest first, self excluded.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KnnGraph {
    pub k: usize,
    pub neighbors: Vec<Vec<usize>>,
}

impl KnnGraph {
    fn flat(&self) -> Vec<usize> {
        self.neighbors.iter().flatten().copied().collect()
    }
}

/// Brute-force k-NN over the rows of a feature matrix; ties go to the lower index.
pub fn knn_rows(features: &Tensor, k: usize) -> Result<KnnGraph, EncoderError> {
    let n = features.rows;
    if k == 0 || k >= n {
        return Err(EncoderError::TooFewPoints { k, n });
    }
    let mut neighbors = Vec::with_capacity(n);
    let mut d2 = Vec::with_capacity(n);
    for i in 0..n {
        d2.clear();
        let xi = features.row(i);
        for j in 0..n {
            if j != i {
                let d: f64 = xi.iter().zip(features.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
                d2.push((d, j));
            }
        }
        d2.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        neighbors.push(d2[..k].iter().map(|&(_, j)| j).collect());
    }
    Ok(KnnGraph { k, neighbors })
}

pub fn build_knn_graph(cloud: &PointCloud, k: usize) -> Result<KnnGraph, EncoderError> {
    knn_rows(&node_features(cloud, false), k)
}

/// Node features: xyz, or xyz followed by rgb.
pub fn node_features(cloud: &PointCloud, use_color: bool) -> Tensor {
    let f = if use_color { 6 } else { 3 };
    let mut data = Vec::with_capacity(cloud.len() * f);
    for p in &cloud.points {
        data.extend(p.position.iter());
        if use_color {
            data.extend(p.color);
        }
    }
    Tensor::new(cloud.len(), f, data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub k: usize,
    pub hidden: usize,
    pub n_k: usize,
    pub use_color: bool,
}

impl Architecture {
    pub fn in_dim(&self) -> usize {
        if self.use_color {
            6
        } else {
            3
        }
    }

    /// Parameter shapes in storage order.
    pub fn shapes(&self) -> Vec<(usize, usize)> {
        let (f, h) = (self.in_dim(), self.hidden);
        vec![
            (2 * f, h),
            (1, h),
            (1, h),
            (1, h),
            (2 * h, h),
            (1, h),
            (1, h),
            (1, h),
            (h, 3 * self.n_k),
            (1, 3 * self.n_k),
        ]
    }

    fn validate(&self) -> Result<(), EncoderError> {
        if self.k == 0 || self.hidden == 0 || self.n_k == 0 {
            return Err(EncoderError::InvalidConfig(format!("k, hidden and n_k must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Parameters per layer: edge affine weight and bias, layer-norm gain and offset.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphEncoder {
    pub arch: Architecture,
    pub params: Vec<Tensor>,
}

struct Placed(Vec<Var>);

impl GraphEncoder {
    pub fn new(arch: Architecture, rng_seed: u64) -> Result<Self, EncoderError> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let params = arch
            .shapes()
            .into_iter()
            .enumerate()
            .map(|(idx, (r, c))| match idx {
                0 | 4 => nn::he_uniform(&mut rng, r, c),
                2 | 6 => Tensor::filled(r, c, 1.0),
                8 => nn::small_uniform(&mut rng, r, c, (1.0 / r as f64).sqrt()),
                _ => Tensor::zeros(r, c),
            })
            .collect();
        Ok(Self { arch, params })
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(Tensor::is_finite)
    }

    fn place(&self, tape: &mut Tape) -> Placed {
        Placed(self.params.iter().map(|p| tape.leaf(p.clone())).collect())
    }

    fn check_cloud(&self, cloud: &PointCloud) -> Result<(), EncoderError> {
        if self.arch.k >= cloud.len() {
            return Err(EncoderError::TooFewPoints { k: self.arch.k, n: cloud.len() });
        }
        Ok(())
    }
}

fn edge_conv(tape: &mut Tape, x: Var, graph: &KnnGraph, v: &[Var]) -> Var {
    let centers: Vec<usize> = (0..graph.neighbors.len())
        .flat_map(|i| std::iter::repeat_n(i, graph.k))
        .collect();
    let xi = tape.gather_rows(x, &centers);
    let xj = tape.gather_rows(x, &graph.flat());
    let rel = tape.sub(xj, xi);
    let edges = tape.concat_cols(xi, rel);
    let z = tape.matmul(edges, v[0]);
    let z = tape.add_row(z, v[1]);
    let a = tape.leaky_relu(z, LEAKY_SLOPE);
    let pooled = tape.segment_max(a, graph.k);
    nn::layer_norm(tape, pooled, v[2], v[3]).out
}

/// Emits an N_K×3 node of keypoints.
fn forward_on_tape(tape: &mut Tape, enc: &GraphEncoder, p: &Placed, cloud: &PointCloud) -> Result<Var, EncoderError> {
    enc.check_cloud(cloud)?;
    let feats = node_features(cloud, enc.arch.use_color);
    let g1 = knn_rows(&node_features(cloud, false), enc.arch.k)?;
    let x = tape.constant(feats);
    let h1 = edge_conv(tape, x, &g1, &p.0[0..4]);
    let g2 = knn_rows(tape.value(h1), enc.arch.k)?;
    let h2 = edge_conv(tape, h1, &g2, &p.0[4..8]);
    let global = tape.segment_max(h2, cloud.len());
    let y = tape.matmul(global, p.0[8]);
    let y = tape.add_row(y, p.0[9]);
    let y = tape.tanh(y);
    let y = tape.scale(y, OUTPUT_SCALE);
    Ok(tape.reshape(y, enc.arch.n_k, 3))
}

fn to_points(t: &Tensor) -> Vec<Point3> {
    (0..t.rows).map(|r| Point3::new(t.at(r, 0), t.at(r, 1), t.at(r, 2))).collect()
}

/// Raw keypoint coordinates; unlike [`encoder_forward`] coincident outputs are allowed.
pub fn encoder_forward_raw(enc: &GraphEncoder, cloud: &PointCloud) -> Result<Vec<Point3>, EncoderError> {
    let mut tape = Tape::new();
    let p = enc.place(&mut tape);
    let out = forward_on_tape(&mut tape, enc, &p, cloud)?;
    Ok(to_points(tape.value(out)))
}

/// Keypoints in the normalized frame for a normalized cloud.
pub fn encoder_forward(enc: &GraphEncoder, cloud: &PointCloud) -> Result<KeypointSet, EncoderError> {
    Ok(KeypointSet::new(encoder_forward_raw(enc, cloud)?)?)
}

/// `lr0 · 0.1^⌊epoch / 50⌋`.
pub fn learning_rate(lr0: f64, epoch: usize) -> f64 {
    lr0 / LR_DECAY_DIVISOR.powi((epoch / LR_DECAY_EVERY) as i32)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr0: f64,
    pub k: usize,
    pub hidden: usize,
    pub n_k: usize,
    pub use_color: bool,
    /// Larger clouds are reduced by farthest point sampling before encoding.
    pub max_points: usize,
    /// Apply the two-phase weight schedule; otherwise `loss.alpha`/`loss.beta` stay fixed.
    pub schedule: bool,
    pub loss: LossConfig,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr0: DEFAULT_LR,
            k: DEFAULT_K,
            hidden: DEFAULT_HIDDEN,
            n_k: 8,
            use_color: false,
            max_points: 256,
            schedule: true,
            loss: LossConfig::default(),
            rng_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub alpha: f64,
    pub beta: f64,
    pub loss: f64,
}

/// Input cloud and loss cloud for one training object.
struct TrainObject {
    input: PointCloud,
    loss: PreparedObject,
}

/// Farthest-point reduction to `max_points`, the same input training sees.
pub fn encoder_input(cloud: &PointCloud, max_points: usize) -> Result<PointCloud, EncoderError> {
    if cloud.len() <= max_points {
        return Ok(cloud.clone());
    }
    let idx = fps_indices(cloud, max_points, 0)?;
    Ok(PointCloud { points: idx.into_iter().map(|i| cloud.points[i]).collect() })
}

/// Loss for one object and its gradient with respect to every parameter.
fn object_loss_and_grads(
    enc: &GraphEncoder,
    obj: &TrainObject,
    config: &LossConfig,
) -> Result<(f64, Vec<Tensor>), EncoderError> {
    let mut tape = Tape::new();
    let p = enc.place(&mut tape);
    let kp = forward_on_tape(&mut tape, enc, &p, &obj.input)?;
    let objects = std::slice::from_ref(&obj.loss);
    let (value, out) = match config.similarity {
        Similarity::ExactW1 => {
            let out = loss::tape_loss(&mut tape, kp, objects, config)?;
            (tape.scalar(out), out)
        }
        Similarity::Critic => {
            // Surrogate Σ K ⊙ ∂L/∂K carries the analytic keypoint gradient into the encoder.
            let coords = to_points(tape.value(kp));
            let (report, g) = loss::loss_and_gradient_prepared(&coords, objects, config)?;
            let gt = tape.constant(Tensor::new(enc.arch.n_k, 3, g.iter().flat_map(|v| [v.x, v.y, v.z]).collect()));
            let prod = tape.mul(kp, gt);
            (report.total, tape.sum(prod))
        }
        other => return Err(LossError::NotDifferentiable(other).into()),
    };
    let grads = tape.backward(out);
    let g = p
        .0
        .iter()
        .zip(&enc.params)
        .map(|(v, t)| grads.get_or_zeros(*v, t.rows, t.cols))
        .collect();
    Ok((value, g))
}

fn mean_loss_and_grads(
    enc: &GraphEncoder,
    objects: &[TrainObject],
    config: &LossConfig,
) -> Result<(f64, Vec<Tensor>), EncoderError> {
    let results: Vec<(f64, Vec<Tensor>)> = {
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            objects
                .par_iter()
                .map(|o| object_loss_and_grads(enc, o, config))
                .collect::<Result<_, _>>()?
        }
        #[cfg(not(feature = "parallel"))]
        {
            objects
                .iter()
                .map(|o| object_loss_and_grads(enc, o, config))
                .collect::<Result<_, _>>()?
        }
    };
    let n = objects.len() as f64;
    let mut grads: Vec<Tensor> = enc.params.iter().map(|t| Tensor::zeros(t.rows, t.cols)).collect();
    let mut total = 0.0;
    for (value, g) in results {
        total += value / n;
        for (acc, gi) in grads.iter_mut().zip(g) {
            for (a, b) in acc.data.iter_mut().zip(gi.data) {
                *a += b / n;
            }
        }
    }
    Ok((total, grads))
}

fn prepare_training(objects: &[ObjectModel], max_points: usize) -> Result<Vec<TrainObject>, EncoderError> {
    loss::prepare_objects(objects)
        .into_iter()
        .map(|o| Ok(TrainObject { input: encoder_input(&o.cloud, max_points)?, loss: o }))
        .collect()
}

/// Mean loss over objects and its parameter gradient, on the objects' normalized clouds.
pub fn loss_and_parameter_gradient(
    enc: &GraphEncoder,
    objects: &[ObjectModel],
    config: &LossConfig,
    max_points: usize,
) -> Result<(f64, Vec<Tensor>), EncoderError> {
    mean_loss_and_grads(enc, &prepare_training(objects, max_points)?, config)
}

/// Plain SGD, one step per epoch on the object-averaged gradient.
pub fn train_encoder(objects: &[ObjectModel], config: &TrainConfig) -> Result<(GraphEncoder, Vec<EpochRecord>), EncoderError> {
    train_encoder_with(objects, config, |_| {})
}

/// [`train_encoder`] reporting each epoch as it completes.
pub fn train_encoder_with(
    objects: &[ObjectModel],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(GraphEncoder, Vec<EpochRecord>), EncoderError> {
    if objects.is_empty() {
        return Err(EncoderError::NoObjects);
    }
    if !(config.lr0 > 0.0) {
        return Err(EncoderError::InvalidConfig(format!("lr0 must be positive, got {}", config.lr0)));
    }
    config.loss.validate()?;
    if !config.loss.similarity.is_differentiable() {
        return Err(LossError::NotDifferentiable(config.loss.similarity).into());
    }
    let arch = Architecture { k: config.k, hidden: config.hidden, n_k: config.n_k, use_color: config.use_color };
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let mut enc = GraphEncoder::new(arch, rng.random())?;
    let train = prepare_training(objects, config.max_points.max(config.k + 1))?;

    let mut trace = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let (alpha, beta) = if config.schedule {
            loss::weight_schedule(epoch)
        } else {
            (config.loss.alpha, config.loss.beta)
        };
        let loss_cfg = config.loss.with_weights((alpha, beta));
        let (value, grads) = mean_loss_and_grads(&enc, &train, &loss_cfg)?;
        if !value.is_finite() {
            return Err(EncoderError::NonFiniteLoss { epoch });
        }
        let lr = learning_rate(config.lr0, epoch);
        for (p, g) in enc.params.iter_mut().zip(&grads) {
            for (a, b) in p.data.iter_mut().zip(&g.data) {
                *a -= lr * b;
            }
        }
        if !enc.is_finite() {
            return Err(EncoderError::NonFiniteLoss { epoch });
        }
        let record = EpochRecord { epoch, lr, alpha, beta, loss: value };
        on_epoch(&record);
        trace.push(record);
    }
    Ok((enc, trace))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub architecture: Architecture,
    pub output_scale: f64,
    pub shapes: Vec<(usize, usize)>,
    pub params: Vec<Vec<f64>>,
}

impl From<&GraphEncoder> for Checkpoint {
    fn from(enc: &GraphEncoder) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            architecture: enc.arch.clone(),
            output_scale: OUTPUT_SCALE,
            shapes: enc.params.iter().map(|t| (t.rows, t.cols)).collect(),
            params: enc.params.iter().map(|t| t.data.clone()).collect(),
        }
    }
}

impl TryFrom<Checkpoint> for GraphEncoder {
    type Error = EncoderError;

    fn try_from(c: Checkpoint) -> Result<Self, EncoderError> {
        if c.version != CHECKPOINT_VERSION {
            return Err(EncoderError::UnsupportedVersion { found: c.version });
        }
        c.architecture.validate()?;
        let expected = c.architecture.shapes();
        if c.shapes != expected || c.params.len() != expected.len() {
            return Err(EncoderError::BadCheckpoint("parameter shapes do not match the architecture".into()));
        }
        let params: Vec<Tensor> = expected
            .iter()
            .zip(c.params)
            .map(|(&(r, cols), data)| {
                if data.len() != r * cols {
                    return Err(EncoderError::BadCheckpoint(format!("expected {} values, found {}", r * cols, data.len())));
                }
                Ok(Tensor::new(r, cols, data))
            })
            .collect::<Result<_, _>>()?;
        let enc = GraphEncoder { arch: c.architecture, params };
        if !enc.is_finite() {
            return Err(EncoderError::BadCheckpoint("non-finite parameter".into()));
        }
        Ok(enc)
    }
}

pub fn save_checkpoint(enc: &GraphEncoder, path: &Path) -> Result<(), EncoderError> {
    let json = serde_json::to_string_pretty(&Checkpoint::from(enc))?;
    fs::write(path, json).map_err(|source| EncoderError::Io { path: path.display().to_string(), source })
}

pub fn load_checkpoint(path: &Path) -> Result<GraphEncoder, EncoderError> {
    let text = fs::read_to_string(path).map_err(|source| EncoderError::Io { path: path.display().to_string(), source })?;
    GraphEncoder::try_from(serde_json::from_str::<Checkpoint>(&text)?)
}
