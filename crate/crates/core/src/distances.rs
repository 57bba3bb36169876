//! Distribution similarity: exact 1-D Wasserstein-1, a learned critic with
//! gradient penalty, and histogram divergences (KL, JS, cross-entropy).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{leaky_slopes, Tape, Tensor, Var};
use crate::nn::{self, Adam, LEAKY_SLOPE};
use crate::votes::Histogram;

pub const DEFAULT_LAMBDA: f64 = 10.0;
pub const DEFAULT_EPSILON: f64 = 1e-12;
pub const CRITIC_HIDDEN: usize = 32;
pub const DEFAULT_CRITIC_LR: f64 = 2e-2;
pub const DEFAULT_CRITIC_STEPS: usize = 500;
/// Larger sample sets are minibatched to this size per critic step.
pub const CRITIC_BATCH: usize = 256;

#[derive(Debug, Error)]
pub enum DistanceError {
    #[error("empty sample set")]
    Empty,
    #[error("non-finite sample")]
    NonFinite,
    #[error("histograms have different bin edges")]
    MismatchedEdges,
    #[error("epsilon must be positive, got {0}")]
    InvalidEpsilon(f64),
    #[error("lambda must be non-negative, got {0}")]
    InvalidLambda(f64),
    #[error("critic training needs at least one step")]
    NoSteps,
    #[error("non-finite critic loss at step {step}")]
    NonFiniteLoss { step: usize },
}

fn sorted(samples: &[f64]) -> Result<Vec<f64>, DistanceError> {
    if samples.is_empty() {
        return Err(DistanceError::Empty);
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(DistanceError::NonFinite);
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(s)
}

/// Exact W1 between two empirical distributions.
///
/// Equal sizes use the sorted pairing `mean |a_(i) − b_(i)|`; otherwise the
/// integral of `|F_A − F_B|` over the merged support.
pub fn wasserstein1_exact(a: &[f64], b: &[f64]) -> Result<f64, DistanceError> {
    let (sa, sb) = (sorted(a)?, sorted(b)?);
    if sa.len() == sb.len() {
        let total: f64 = sa.iter().zip(&sb).map(|(x, y)| (x - y).abs()).sum();
        return Ok(total / sa.len() as f64);
    }
    Ok(cdf_integral(&sa, &sb))
}

fn cdf_integral(sa: &[f64], sb: &[f64]) -> f64 {
    let (na, nb) = (sa.len() as f64, sb.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut prev = sa[0].min(sb[0]);
    let mut total = 0.0;
    while i < sa.len() || j < sb.len() {
        let next = match (sa.get(i), sb.get(j)) {
            (Some(x), Some(y)) => x.min(*y),
            (Some(x), None) => *x,
            (None, Some(y)) => *y,
            (None, None) => unreachable!(),
        };
        total += (i as f64 / na - j as f64 / nb).abs() * (next - prev);
        while i < sa.len() && sa[i] == next {
            i += 1;
        }
        while j < sb.len() && sb[j] == next {
            j += 1;
        }
        prev = next;
    }
    total
}

fn same_edges(a: &Histogram, b: &Histogram) -> Result<(), DistanceError> {
    if a.bin_edges != b.bin_edges {
        return Err(DistanceError::MismatchedEdges);
    }
    Ok(())
}

/// `Σ_b |CDF_A(b) − CDF_B(b)| · width(b)` over shared bins.
pub fn wasserstein1_hist(a: &Histogram, b: &Histogram) -> Result<f64, DistanceError> {
    same_edges(a, b)?;
    let (mut ca, mut cb, mut total) = (0.0, 0.0, 0.0);
    for k in 0..a.bins() {
        ca += a.mass[k];
        cb += b.mass[k];
        total += (ca - cb).abs() * a.bin_width(k);
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DivergenceKind {
    Kl,
    Js,
    Ce,
}

fn smooth(mass: &[f64], epsilon: f64) -> Vec<f64> {
    let z = 1.0 + epsilon * mass.len() as f64;
    mass.iter().map(|m| (m + epsilon) / z).collect()
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(pi, qi)| if *pi > 0.0 { pi * (pi / qi).ln() } else { 0.0 })
        .sum()
}

/// Histogram divergence in nats after additive `epsilon` smoothing.
pub fn divergence(kind: DivergenceKind, p: &Histogram, q: &Histogram, epsilon: f64) -> Result<f64, DistanceError> {
    same_edges(p, q)?;
    if !(epsilon > 0.0) {
        return Err(DistanceError::InvalidEpsilon(epsilon));
    }
    let (p, q) = (smooth(&p.mass, epsilon), smooth(&q.mass, epsilon));
    Ok(match kind {
        DivergenceKind::Kl => kl(&p, &q),
        DivergenceKind::Js => {
            let m: Vec<f64> = p.iter().zip(&q).map(|(a, b)| 0.5 * (a + b)).collect();
            0.5 * kl(&p, &m) + 0.5 * kl(&q, &m)
        }
        DivergenceKind::Ce => -p.iter().zip(&q).map(|(a, b)| a * b.ln()).sum::<f64>(),
    })
}

pub fn entropy(mass: &[f64]) -> f64 {
    -mass.iter().filter(|m| **m > 0.0).map(|m| m * m.ln()).sum::<f64>()
}

/// A scalar function with a known derivative, usable as a Wasserstein critic.
pub trait Critic {
    /// Values and input-derivatives at each sample.
    fn value_and_slope(&self, xs: &[f64]) -> (Vec<f64>, Vec<f64>);
}

/// `D(x) = scale·x + bias`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineCritic {
    pub scale: f64,
    pub bias: f64,
}

impl Critic for AffineCritic {
    fn value_and_slope(&self, xs: &[f64]) -> (Vec<f64>, Vec<f64>) {
        (
            xs.iter().map(|x| self.scale * x + self.bias).collect(),
            vec![self.scale; xs.len()],
        )
    }
}

/// MLP critic 1 → 32 → 32 → 1. Each hidden layer is affine, leaky rectifier,
/// then layer normalization with learned gain/offset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticModel {
    params: Vec<Tensor>,
}

/// Parameter leaves of a [`CriticModel`] placed on a tape.
pub struct CriticVars {
    pub vars: Vec<Var>,
}

impl CriticModel {
    pub fn new(rng_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let h = CRITIC_HIDDEN;
        let params = vec![
            nn::he_uniform(&mut rng, 1, h),
            nn::small_uniform(&mut rng, 1, h, 1.0),
            Tensor::filled(1, h, 1.0),
            Tensor::zeros(1, h),
            nn::he_uniform(&mut rng, h, h),
            nn::small_uniform(&mut rng, 1, h, 0.1),
            Tensor::filled(1, h, 1.0),
            Tensor::zeros(1, h),
            nn::small_uniform(&mut rng, h, 1, 0.05),
            Tensor::zeros(1, 1),
        ];
        Self { params }
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(Tensor::is_finite)
    }

    pub fn place(&self, tape: &mut Tape) -> CriticVars {
        CriticVars {
            vars: self.params.iter().map(|p| tape.leaf(p.clone())).collect(),
        }
    }

    /// Critic values for a B×1 input node.
    pub fn forward(tape: &mut Tape, p: &CriticVars, x: Var) -> Var {
        let v = &p.vars;
        let mut h = x;
        for layer in 0..2 {
            let base = layer * 4;
            let z = tape.matmul(h, v[base]);
            let z = tape.add_row(z, v[base + 1]);
            let a = tape.leaky_relu(z, LEAKY_SLOPE);
            h = nn::layer_norm(tape, a, v[base + 2], v[base + 3]).out;
        }
        let y = tape.matmul(h, v[8]);
        tape.add_row(y, v[9])
    }

    /// Critic values and their derivatives with respect to the input, both as
    /// B×1 nodes. The derivative is itself differentiable on the tape.
    pub fn forward_with_slope(tape: &mut Tape, p: &CriticVars, x: Var) -> (Var, Var) {
        let v = &p.vars;
        let rows = tape.value(x).rows;
        let mut h = x;
        let mut dh = tape.constant(Tensor::filled(rows, 1, 1.0));
        for layer in 0..2 {
            let base = layer * 4;
            let z = tape.matmul(h, v[base]);
            let z = tape.add_row(z, v[base + 1]);
            let dz = tape.matmul(dh, v[base]);
            let slopes = leaky_slopes(tape.value(z), LEAKY_SLOPE);
            let a = tape.mask(z, slopes.clone());
            let da = tape.mask(dz, slopes);
            let ln = nn::layer_norm(tape, a, v[base + 2], v[base + 3]);
            dh = nn::layer_norm_tangent(tape, &ln, da, v[base + 2]);
            h = ln.out;
        }
        let y = tape.matmul(h, v[8]);
        let y = tape.add_row(y, v[9]);
        let dy = tape.matmul(dh, v[8]);
        (y, dy)
    }

    fn update(&mut self, opt: &mut Adam, grads: Vec<Tensor>) {
        let mut refs: Vec<&mut Tensor> = self.params.iter_mut().collect();
        opt.step(&mut refs, &grads);
    }
}

impl Critic for CriticModel {
    fn value_and_slope(&self, xs: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut tape = Tape::new();
        let p = self.place(&mut tape);
        let x = tape.constant(Tensor::new(xs.len(), 1, xs.to_vec()));
        let (y, dy) = CriticModel::forward_with_slope(&mut tape, &p, x);
        (tape.value(y).data.clone(), tape.value(dy).data.clone())
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Gradient-penalty interpolates `u·a + (1−u)·b` for `n` random pairs.
pub fn draw_interpolates(a: &[f64], b: &[f64], n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let x = a[rng.random_range(0..a.len())];
            let y = b[rng.random_range(0..b.len())];
            let u: f64 = rng.random();
            u * x + (1.0 - u) * y
        })
        .collect()
}

/// Critic-difference term `mean D(A) − mean D(B)`.
pub fn critic_difference<C: Critic + ?Sized>(a: &[f64], b: &[f64], critic: &C) -> f64 {
    mean(&critic.value_and_slope(a).0) - mean(&critic.value_and_slope(b).0)
}

/// Returns `(loss, gp_term)` with
/// `loss = mean D(A) − mean D(B) + λ·mean((|D'(x̂)| − 1)²)` over
/// `max(|A|, |B|)` interpolates drawn with `rng_seed`.
pub fn critic_wasserstein<C: Critic + ?Sized>(
    a: &[f64],
    b: &[f64],
    critic: &C,
    lambda: f64,
    rng_seed: u64,
) -> Result<(f64, f64), DistanceError> {
    if a.is_empty() || b.is_empty() {
        return Err(DistanceError::Empty);
    }
    if !(lambda >= 0.0) {
        return Err(DistanceError::InvalidLambda(lambda));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let xs = draw_interpolates(a, b, a.len().max(b.len()), &mut rng);
    let (_, slopes) = critic.value_and_slope(&xs);
    let gp = mean(&slopes.iter().map(|s| (s.abs() - 1.0).powi(2)).collect::<Vec<_>>());
    Ok((critic_difference(a, b, critic) + lambda * gp, gp))
}

/// `λ·GP − (mean D(A) − mean D(B))`, the quantity the critic minimizes, and
/// the `mean D(B) − mean D(A)` node inside it.
fn critic_objective(tape: &mut Tape, p: &CriticVars, a: &[f64], b: &[f64], interp: &[f64], lambda: f64) -> (Var, Var) {
    let xa = tape.constant(Tensor::new(a.len(), 1, a.to_vec()));
    let xb = tape.constant(Tensor::new(b.len(), 1, b.to_vec()));
    let xi = tape.constant(Tensor::new(interp.len(), 1, interp.to_vec()));
    let da = CriticModel::forward(tape, p, xa);
    let db = CriticModel::forward(tape, p, xb);
    let (_, slope) = CriticModel::forward_with_slope(tape, p, xi);
    let ma = tape.mean(da);
    let mb = tape.mean(db);
    let diff = tape.sub(mb, ma);
    let s = tape.abs(slope);
    let s = tape.add_scalar(s, -1.0);
    let s = tape.square(s);
    let gp = tape.mean(s);
    let pen = tape.scale(gp, lambda);
    (tape.add(diff, pen), diff)
}

fn minibatch(samples: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
    if samples.len() <= CRITIC_BATCH {
        samples.to_vec()
    } else {
        (0..CRITIC_BATCH)
            .map(|_| samples[rng.random_range(0..samples.len())])
            .collect()
    }
}

/// Trains a fresh critic to maximize `mean D(A) − mean D(B) − λ·GP` with Adam.
pub fn train_critic(
    a: &[f64],
    b: &[f64],
    steps: usize,
    lr: f64,
    lambda: f64,
    rng_seed: u64,
) -> Result<CriticModel, DistanceError> {
    train_critic_traced(a, b, steps, lr, lambda, rng_seed, |_, _| {})
}

/// [`train_critic`] with a callback receiving `(step, critic difference)` for
/// the batch used at each step, before the update.
pub fn train_critic_traced(
    a: &[f64],
    b: &[f64],
    steps: usize,
    lr: f64,
    lambda: f64,
    rng_seed: u64,
    mut on_step: impl FnMut(usize, f64),
) -> Result<CriticModel, DistanceError> {
    if a.is_empty() || b.is_empty() {
        return Err(DistanceError::Empty);
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(DistanceError::NonFinite);
    }
    if steps == 0 {
        return Err(DistanceError::NoSteps);
    }
    if !(lambda >= 0.0) {
        return Err(DistanceError::InvalidLambda(lambda));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut critic = CriticModel::new(rng.random());
    let shapes: Vec<usize> = critic.params.iter().map(Tensor::len).collect();
    let mut opt = Adam::new(lr, &shapes);

    for step in 0..steps {
        let (ba, bb) = (minibatch(a, &mut rng), minibatch(b, &mut rng));
        let xs = draw_interpolates(a, b, ba.len().max(bb.len()), &mut rng);

        let mut tape = Tape::new();
        let p = critic.place(&mut tape);
        let (objective, diff) = critic_objective(&mut tape, &p, &ba, &bb, &xs, lambda);
        if !tape.scalar(objective).is_finite() {
            return Err(DistanceError::NonFiniteLoss { step });
        }
        on_step(step, -tape.scalar(diff));
        let grads = tape.backward(objective);
        let g: Vec<Tensor> = p
            .vars
            .iter()
            .zip(&critic.params)
            .map(|(v, t)| grads.get_or_zeros(*v, t.rows, t.cols))
            .collect();
        critic.update(&mut opt, g);
        if !critic.is_finite() {
            return Err(DistanceError::NonFiniteLoss { step });
        }
    }
    Ok(critic)
}

/// Critic-based distance estimate: train a critic, report its difference term.
pub fn critic_distance(
    a: &[f64],
    b: &[f64],
    steps: usize,
    lr: f64,
    lambda: f64,
    rng_seed: u64,
) -> Result<f64, DistanceError> {
    let critic = train_critic(a, b, steps, lr, lambda, rng_seed)?;
    Ok(critic_difference(a, b, &critic))
}

/// Average ranks (1-based), ties sharing their mean rank.
pub fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            out[order[k]] = r;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let (mx, my) = (mean(&rx), mean(&ry));
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}
