//! Network building blocks on top of [`crate::autodiff`]: layer normalization
//! (with its forward-mode tangent), parameter initialization and Adam.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};

pub const LEAKY_SLOPE: f64 = 0.01;
/// Added to the per-row variance before the square root.
pub const LAYER_NORM_EPS: f64 = 1e-10;

/// Row-wise layer normalization: mean 0, variance 1, then `⊙ gain + offset`.
pub struct LayerNormOut {
    pub out: Var,
    /// Normalized rows before gain/offset.
    pub normalized: Var,
    /// Per-row standard deviation, R×1.
    pub std: Var,
}

pub fn layer_norm(tape: &mut Tape, a: Var, gain: Var, offset: Var) -> LayerNormOut {
    let mu = tape.row_mean(a);
    let centered = tape.sub_col(a, mu);
    let sq = tape.square(centered);
    let var = tape.row_mean(sq);
    let var = tape.add_scalar(var, LAYER_NORM_EPS);
    let std = tape.sqrt(var);
    let normalized = tape.div_col(centered, std);
    let scaled = tape.mul_row(normalized, gain);
    let out = tape.add_row(scaled, offset);
    LayerNormOut { out, normalized, std }
}

/// Directional derivative of [`layer_norm`] along input tangent `da`.
pub fn layer_norm_tangent(tape: &mut Tape, ln: &LayerNormOut, da: Var, gain: Var) -> Var {
    let mu_d = tape.row_mean(da);
    let dc = tape.sub_col(da, mu_d);
    // ŷ = c/s, so c·dc = s·(ŷ·dc)
    let y_dc = tape.mul(ln.normalized, dc);
    let ds = tape.row_mean(y_dc);
    let shifted = tape.mul_col(ln.normalized, ds);
    let num = tape.sub(dc, shifted);
    let dy = tape.div_col(num, ln.std);
    tape.mul_row(dy, gain)
}

/// Uniform in ±sqrt(6 / fan_in).
pub fn he_uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let bound = (6.0 / rows as f64).sqrt();
    Tensor::new(
        rows,
        cols,
        (0..rows * cols).map(|_| (rng.random::<f64>() * 2.0 - 1.0) * bound).collect(),
    )
}

pub fn small_uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Tensor {
    Tensor::new(
        rows,
        cols,
        (0..rows * cols).map(|_| (rng.random::<f64>() * 2.0 - 1.0) * bound).collect(),
    )
}

/// Adam over a fixed list of parameter tensors.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(lr: f64, shapes: &[usize]) -> Self {
        Self {
            lr,
            beta1: 0.5,
            beta2: 0.9,
            eps: 1e-8,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    /// Descends along `grads`.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                self.m[k][i] = self.beta1 * self.m[k][i] + (1.0 - self.beta1) * gi;
                self.v[k][i] = self.beta2 * self.v[k][i] + (1.0 - self.beta2) * gi * gi;
                let mh = self.m[k][i] / c1;
                let vh = self.v[k][i] / c2;
                p.data[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}
