//! The keypoint objective: pairwise vote-distribution similarity plus an
//! exponential dispersion term, mixed as `α·similarity + β·dispersion`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Tensor, Var};
use crate::distances::{
    self, critic_difference, wasserstein1_exact, Critic, DistanceError, DivergenceKind, DEFAULT_CRITIC_LR,
    DEFAULT_EPSILON, DEFAULT_LAMBDA,
};
use crate::geometry::{ObjectModel, Point3, PointCloud};
use crate::sampling::normalized_cloud;
use crate::votes::{axis_projections, build_histogram, check_projections, compute_votes, joint_range, scalar_channels};
use crate::votes::{VoteError, VoteScheme, DEFAULT_BINS};

/// A pair at one object diameter apart contributes 0.1.
pub const DEFAULT_GAMMA: f64 = std::f64::consts::LN_10;
pub const SCHEDULE_SWAP_EPOCH: usize = 50;
pub const EARLY_WEIGHTS: (f64, f64) = (0.7, 0.3);
pub const LATE_WEIGHTS: (f64, f64) = (0.3, 0.7);

#[derive(Debug, Error)]
pub enum LossError {
    #[error("invalid loss config: {0}")]
    InvalidConfig(String),
    #[error("no objects")]
    NoObjects,
    #[error("need at least two keypoints, got {0}")]
    TooFewKeypoints(usize),
    #[error("{0:?} similarity has no gradient")]
    NotDifferentiable(Similarity),
    #[error(transparent)]
    Vote(#[from] VoteError),
    #[error(transparent)]
    Distance(#[from] DistanceError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Similarity {
    ExactW1,
    Critic,
    Kl,
    Js,
    Ce,
}

impl Similarity {
    pub fn is_differentiable(self) -> bool {
        matches!(self, Similarity::ExactW1 | Similarity::Critic)
    }

    fn divergence(self) -> Option<DivergenceKind> {
        match self {
            Similarity::Kl => Some(DivergenceKind::Kl),
            Similarity::Js => Some(DivergenceKind::Js),
            Similarity::Ce => Some(DivergenceKind::Ce),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CriticSettings {
    pub steps: usize,
    pub lr: f64,
    pub lambda: f64,
    pub seed: u64,
}

impl Default for CriticSettings {
    fn default() -> Self {
        Self { steps: 200, lr: DEFAULT_CRITIC_LR, lambda: DEFAULT_LAMBDA, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub similarity: Similarity,
    pub scheme: VoteScheme,
    /// Unit directions scalarizing vector-valued votes.
    pub projections: Vec<Point3>,
    /// Histogram bins for the divergence similarities.
    pub bins: usize,
    pub critic: CriticSettings,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: EARLY_WEIGHTS.0,
            beta: EARLY_WEIGHTS.1,
            gamma: DEFAULT_GAMMA,
            similarity: Similarity::ExactW1,
            scheme: VoteScheme::Radial,
            projections: axis_projections(),
            bins: DEFAULT_BINS,
            critic: CriticSettings::default(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        let bad = |m: String| Err(LossError::InvalidConfig(m));
        if !(0.0..=1.0).contains(&self.alpha) || !(0.0..=1.0).contains(&self.beta) {
            return bad(format!("alpha {} and beta {} must lie in [0, 1]", self.alpha, self.beta));
        }
        if (self.alpha + self.beta - 1.0).abs() > 1e-12 {
            return bad(format!("alpha + beta = {}, expected 1", self.alpha + self.beta));
        }
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return bad(format!("gamma must be positive, got {}", self.gamma));
        }
        if self.bins == 0 {
            return bad("bins must be at least 1".into());
        }
        if self.scheme != VoteScheme::Radial {
            check_projections(&self.projections)?;
        }
        if self.similarity == Similarity::Critic && self.critic.steps == 0 {
            return bad("critic.steps must be at least 1".into());
        }
        Ok(())
    }

    pub fn with_weights(&self, (alpha, beta): (f64, f64)) -> Self {
        Self { alpha, beta, ..self.clone() }
    }
}

/// `(α, β)` for an epoch: the early pair before `swap_epoch`, swapped after.
pub fn weight_schedule_at(epoch: usize, swap_epoch: usize) -> (f64, f64) {
    if epoch < swap_epoch {
        EARLY_WEIGHTS
    } else {
        LATE_WEIGHTS
    }
}

pub fn weight_schedule(epoch: usize) -> (f64, f64) {
    weight_schedule_at(epoch, SCHEDULE_SWAP_EPOCH)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairValue {
    pub i: usize,
    pub j: usize,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectLoss {
    pub object_id: String,
    pub similarity_sum: f64,
    pub pairs: Vec<PairValue>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Per-pair similarity averaged over objects.
    pub wass_pairs: Vec<PairValue>,
    pub dis_pairs: Vec<PairValue>,
    pub per_object: Vec<ObjectLoss>,
}

impl LossReport {
    pub fn similarity_sum(&self) -> f64 {
        self.wass_pairs.iter().map(|p| p.value).sum()
    }

    pub fn dispersion_sum(&self) -> f64 {
        self.dis_pairs.iter().map(|p| p.value).sum()
    }
}

/// An object's identifier and its cloud in the normalized frame.
#[derive(Clone, Debug)]
pub struct PreparedObject {
    pub id: String,
    pub cloud: PointCloud,
}

pub fn prepare_objects(objects: &[ObjectModel]) -> Vec<PreparedObject> {
    objects
        .iter()
        .map(|o| PreparedObject { id: o.id.clone(), cloud: normalized_cloud(o) })
        .collect()
}

fn pairs(n: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n).flat_map(move |i| (i + 1..n).map(move |j| (i, j)))
}

/// Per pair `i < j`: `exp(−γ‖k_i − k_j‖)`.
pub fn dispersion_loss(keypoints: &[Point3], gamma: f64) -> Result<(f64, Vec<PairValue>), LossError> {
    if !(gamma > 0.0) {
        return Err(LossError::InvalidConfig(format!("gamma must be positive, got {gamma}")));
    }
    let values: Vec<PairValue> = pairs(keypoints.len())
        .map(|(i, j)| PairValue { i, j, value: (-gamma * (keypoints[i] - keypoints[j]).norm()).exp() })
        .collect();
    Ok((values.iter().map(|p| p.value).sum(), values))
}

/// Derivative of the summed dispersion term with respect to each keypoint.
pub fn dispersion_gradient(keypoints: &[Point3], gamma: f64) -> Vec<Point3> {
    let mut grad = vec![Point3::zeros(); keypoints.len()];
    for (i, j) in pairs(keypoints.len()) {
        let diff = keypoints[i] - keypoints[j];
        let d = diff.norm();
        if d == 0.0 {
            continue;
        }
        let g = diff * (-gamma * (-gamma * d).exp() / d);
        grad[i] += g;
        grad[j] -= g;
    }
    grad
}

/// Partial derivatives with respect to the samples of each set.
type SampleGradients = (Vec<f64>, Vec<f64>);

/// Similarity of two 1-D sample sets, with the partial derivatives with respect
/// to each sample when requested.
fn channel_pair(
    a: &[f64],
    b: &[f64],
    config: &LossConfig,
    critic_seed: u64,
    want_grad: bool,
) -> Result<(f64, Option<SampleGradients>), LossError> {
    match config.similarity {
        Similarity::ExactW1 => {
            let value = wasserstein1_exact(a, b)?;
            let grad = want_grad.then(|| w1_sample_gradient(a, b));
            Ok((value, grad))
        }
        Similarity::Critic => {
            let c = &config.critic;
            let critic = distances::train_critic(a, b, c.steps, c.lr, c.lambda, critic_seed)?;
            let value = critic_difference(a, b, &critic);
            let grad = want_grad.then(|| {
                let (_, sa) = critic.value_and_slope(a);
                let (_, sb) = critic.value_and_slope(b);
                let (na, nb) = (a.len() as f64, b.len() as f64);
                (sa.iter().map(|s| s / na).collect(), sb.iter().map(|s| -s / nb).collect())
            });
            Ok((value, grad))
        }
        kind => {
            let (lo, hi) = joint_range([a, b]);
            let ha = build_histogram(a, config.bins, lo, hi)?;
            let hb = build_histogram(b, config.bins, lo, hi)?;
            let value = distances::divergence(kind.divergence().unwrap(), &ha, &hb, DEFAULT_EPSILON)?;
            if want_grad {
                return Err(LossError::NotDifferentiable(kind));
            }
            Ok((value, None))
        }
    }
}

/// Stable argsort.
pub fn argsort(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&x, &y| values[x].total_cmp(&values[y]));
    order
}

/// Subgradient of the sorted-pairing W1 for equal-size sets.
fn w1_sample_gradient(a: &[f64], b: &[f64]) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(a.len(), b.len(), "vote sets of one object have equal sizes");
    let n = a.len() as f64;
    let (oa, ob) = (argsort(a), argsort(b));
    let mut ga = vec![0.0; a.len()];
    let mut gb = vec![0.0; b.len()];
    for (&ia, &ib) in oa.iter().zip(&ob) {
        let s = sign(a[ia] - b[ib]) / n;
        ga[ia] = s;
        gb[ib] = -s;
    }
    (ga, gb)
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Derivative of a channel sample with respect to its keypoint.
fn sample_jacobian(scheme: VoteScheme, k: &Point3, p: &Point3, projection: Option<&Point3>) -> Point3 {
    let diff = k - p;
    match scheme {
        VoteScheme::Radial => {
            let r = diff.norm();
            if r == 0.0 {
                Point3::zeros()
            } else {
                diff / r
            }
        }
        VoteScheme::Offset => *projection.unwrap(),
        VoteScheme::Vector => {
            let d = projection.unwrap();
            let r = diff.norm();
            let u = diff / r;
            (d - u * u.dot(d)) / r
        }
    }
}

struct ObjectTerms {
    pairs: Vec<PairValue>,
    grad: Option<Vec<Point3>>,
}

fn object_terms(
    keypoints: &[Point3],
    object: &PreparedObject,
    object_index: usize,
    config: &LossConfig,
    want_grad: bool,
) -> Result<ObjectTerms, LossError> {
    let field = compute_votes(&object.cloud, keypoints, config.scheme)?;
    let channels = scalar_channels(&field, &config.projections)?;
    let n_k = keypoints.len();
    let n_c = channels.len() as f64;
    let mut values = vec![0.0; n_k * n_k];
    let mut grad = want_grad.then(|| vec![Point3::zeros(); n_k]);
    let points: Vec<Point3> = object.cloud.positions().copied().collect();

    for (c, channel) in channels.iter().enumerate() {
        let projection = (config.scheme != VoteScheme::Radial).then(|| &config.projections[c]);
        for (i, j) in pairs(n_k) {
            let seed = config
                .critic
                .seed
                .wrapping_add((((object_index * channels.len() + c) * n_k + i) * n_k + j) as u64);
            let (v, g) = channel_pair(&channel[i], &channel[j], config, seed, want_grad)?;
            values[i * n_k + j] += v / n_c;
            if let (Some(total), Some((ga, gb))) = (grad.as_mut(), g) {
                for (p, (da, db)) in points.iter().zip(ga.iter().zip(&gb)) {
                    if *da != 0.0 {
                        total[i] += sample_jacobian(config.scheme, &keypoints[i], p, projection) * (da / n_c);
                    }
                    if *db != 0.0 {
                        total[j] += sample_jacobian(config.scheme, &keypoints[j], p, projection) * (db / n_c);
                    }
                }
            }
        }
    }
    Ok(ObjectTerms {
        pairs: pairs(n_k).map(|(i, j)| PairValue { i, j, value: values[i * n_k + j] }).collect(),
        grad,
    })
}

#[cfg(feature = "parallel")]
fn per_object<T: Send>(
    objects: &[PreparedObject],
    f: impl Fn(usize, &PreparedObject) -> Result<T, LossError> + Sync,
) -> Result<Vec<T>, LossError> {
    use rayon::prelude::*;
    objects.par_iter().enumerate().map(|(i, o)| f(i, o)).collect()
}

#[cfg(not(feature = "parallel"))]
fn per_object<T: Send>(
    objects: &[PreparedObject],
    f: impl Fn(usize, &PreparedObject) -> Result<T, LossError> + Sync,
) -> Result<Vec<T>, LossError> {
    objects.iter().enumerate().map(|(i, o)| f(i, o)).collect()
}

fn evaluate(
    keypoints: &[Point3],
    objects: &[PreparedObject],
    config: &LossConfig,
    want_grad: bool,
) -> Result<(LossReport, Option<Vec<Point3>>), LossError> {
    config.validate()?;
    if objects.is_empty() {
        return Err(LossError::NoObjects);
    }
    if keypoints.len() < 2 {
        return Err(LossError::TooFewKeypoints(keypoints.len()));
    }
    if want_grad && !config.similarity.is_differentiable() {
        return Err(LossError::NotDifferentiable(config.similarity));
    }
    let terms = per_object(objects, |i, o| object_terms(keypoints, o, i, config, want_grad))?;
    let n_obj = objects.len() as f64;

    let (_, dis_pairs) = dispersion_loss(keypoints, config.gamma)?;
    let mut wass_pairs = terms[0].pairs.clone();
    for p in wass_pairs.iter_mut() {
        p.value = 0.0;
    }
    let mut per_object = Vec::with_capacity(objects.len());
    for (t, o) in terms.iter().zip(objects) {
        for (acc, p) in wass_pairs.iter_mut().zip(&t.pairs) {
            acc.value += p.value / n_obj;
        }
        per_object.push(ObjectLoss {
            object_id: o.id.clone(),
            similarity_sum: t.pairs.iter().map(|p| p.value).sum(),
            pairs: t.pairs.clone(),
        });
    }
    let mut report = LossReport {
        total: 0.0,
        alpha: config.alpha,
        beta: config.beta,
        wass_pairs,
        dis_pairs,
        per_object,
    };
    report.total = config.alpha * report.similarity_sum() + config.beta * report.dispersion_sum();

    let grad = want_grad.then(|| {
        let mut g: Vec<Point3> = dispersion_gradient(keypoints, config.gamma)
            .into_iter()
            .map(|v| v * config.beta)
            .collect();
        for t in &terms {
            for (acc, v) in g.iter_mut().zip(t.grad.as_ref().unwrap()) {
                *acc += v * (config.alpha / n_obj);
            }
        }
        g
    });
    Ok((report, grad))
}

/// Loss over objects whose clouds are already normalized.
pub fn combined_loss_prepared(
    keypoints: &[Point3],
    objects: &[PreparedObject],
    config: &LossConfig,
) -> Result<LossReport, LossError> {
    Ok(evaluate(keypoints, objects, config, false)?.0)
}

/// Keypoints are in the normalized frame; similarity is averaged over objects.
pub fn combined_loss(keypoints: &[Point3], objects: &[ObjectModel], config: &LossConfig) -> Result<LossReport, LossError> {
    combined_loss_prepared(keypoints, &prepare_objects(objects), config)
}

pub fn loss_and_gradient_prepared(
    keypoints: &[Point3],
    objects: &[PreparedObject],
    config: &LossConfig,
) -> Result<(LossReport, Vec<Point3>), LossError> {
    let (report, grad) = evaluate(keypoints, objects, config, true)?;
    Ok((report, grad.unwrap()))
}

/// Gradient of [`combined_loss`]'s total with respect to each keypoint.
pub fn loss_gradient(keypoints: &[Point3], objects: &[ObjectModel], config: &LossConfig) -> Result<Vec<Point3>, LossError> {
    Ok(loss_and_gradient_prepared(keypoints, &prepare_objects(objects), config)?.1)
}

/// Builds the exact-W1 objective on a tape for an N_K×3 keypoint node. The
/// sorted pairing is read from current values and enters as a constant
/// gather, so gradients follow the same subgradient as [`loss_gradient`].
pub fn tape_loss(tape: &mut Tape, keypoints: Var, objects: &[PreparedObject], config: &LossConfig) -> Result<Var, LossError> {
    config.validate()?;
    if config.similarity != Similarity::ExactW1 {
        return Err(LossError::NotDifferentiable(config.similarity));
    }
    if objects.is_empty() {
        return Err(LossError::NoObjects);
    }
    let n_k = tape.value(keypoints).rows;
    if n_k < 2 {
        return Err(LossError::TooFewKeypoints(n_k));
    }
    let proj = match config.scheme {
        VoteScheme::Radial => None,
        _ => {
            let d = &config.projections;
            let mut t = Tensor::zeros(3, d.len());
            for (c, v) in d.iter().enumerate() {
                for r in 0..3 {
                    t.data[r * d.len() + c] = v[r];
                }
            }
            Some(tape.constant(t))
        }
    };
    let n_c = proj.map_or(1, |p| tape.value(p).cols);

    let mut object_sums = Vec::with_capacity(objects.len());
    for object in objects {
        let n = object.cloud.len();
        let neg = tape.constant(Tensor::new(
            n,
            3,
            object.cloud.positions().flat_map(|p| [-p.x, -p.y, -p.z]).collect(),
        ));
        // samples[j]: N×C channel values for keypoint j
        let mut samples = Vec::with_capacity(n_k);
        for j in 0..n_k {
            let k = tape.gather_rows(keypoints, &[j]);
            let diff = tape.add_row(neg, k);
            let s = match config.scheme {
                VoteScheme::Radial => {
                    let sq = tape.square(diff);
                    let r2 = tape.row_sum(sq);
                    tape.sqrt(r2)
                }
                VoteScheme::Offset => tape.matmul(diff, proj.unwrap()),
                VoteScheme::Vector => {
                    let sq = tape.square(diff);
                    let r2 = tape.row_sum(sq);
                    let r = tape.sqrt(r2);
                    let u = tape.div_col(diff, r);
                    tape.matmul(u, proj.unwrap())
                }
            };
            samples.push(s);
        }
        let mut terms = Vec::new();
        for c in 0..n_c {
            let sorted: Vec<Var> = samples
                .iter()
                .map(|&s| {
                    let column: Vec<f64> = (0..n).map(|r| tape.value(s).at(r, c)).collect();
                    let idx = argsort(&column).into_iter().map(|r| r * n_c + c).collect();
                    tape.gather(s, idx, n, 1)
                })
                .collect();
            for (i, j) in pairs(n_k) {
                let d = tape.sub(sorted[i], sorted[j]);
                let d = tape.abs(d);
                terms.push(tape.mean(d));
            }
        }
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = tape.add(acc, t);
        }
        object_sums.push(tape.scale(acc, 1.0 / n_c as f64));
    }
    let mut sim = object_sums[0];
    for &s in &object_sums[1..] {
        sim = tape.add(sim, s);
    }
    let sim = tape.scale(sim, config.alpha / objects.len() as f64);

    let mut dis = None;
    for (i, j) in pairs(n_k) {
        let ki = tape.gather_rows(keypoints, &[i]);
        let kj = tape.gather_rows(keypoints, &[j]);
        let d = tape.sub(ki, kj);
        let d = tape.square(d);
        let d = tape.sum(d);
        let d = tape.sqrt(d);
        let e = tape.scale(d, -config.gamma);
        let e = tape.exp(e);
        dis = Some(match dis {
            None => e,
            Some(acc) => tape.add(acc, e),
        });
    }
    let dis = tape.scale(dis.unwrap(), config.beta);
    Ok(tape.add(sim, dis))
}
