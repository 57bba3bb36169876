//! Minimal tensor-level reverse-mode differentiation.
//!
//! Every value on the [`Tape`] is a dense row-major matrix. Operations record
//! their parents, and [`Tape::backward`] walks the node list in reverse to
//! accumulate adjoints. Because input-gradients (as needed by a gradient
//! penalty) can be written with the same recorded operations, the tape also
//! supports differentiating through a derivative.
//!
//! Selections that are discrete (max over neighbours, sorting, nearest
//! neighbour lookup) are expressed as [`Tape::gather`] with indices computed
//! from the forward values; gradients flow only through the selected entries.

use serde::{Deserialize, Serialize};

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor shape does not match data");
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self::new(rows, cols, vec![value; rows * cols])
    }

    pub fn scalar(value: f64) -> Self {
        Self::new(1, 1, vec![value])
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn same_shape(&self, other: &Tensor) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    SubCol(Var, Var),
    MulCol(Var, Var),
    DivCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Mask(Var, Vec<f64>),
    Sqrt(Var),
    Exp(Var),
    Tanh(Var),
    Abs(Var),
    RowSum(Var),
    Sum(Var),
    Gather(Var, Vec<usize>),
    ConcatCols(Var, Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Adjoint of `v`, or `None` when the output does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Adjoint of `v`, zero-filled to `like`'s shape when absent.
    pub fn get_or_zeros(&self, v: Var, rows: usize, cols: usize) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(rows, cols))
    }
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        debug_assert_eq!(t.len(), 1);
        t.data[0]
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.cols, y.rows, "matmul inner dimensions differ");
        let (n, m, p) = (x.rows, x.cols, y.cols);
        let mut out = vec![0.0; n * p];
        for i in 0..n {
            let orow = &mut out[i * p..(i + 1) * p];
            for k in 0..m {
                let xv = x.data[i * m + k];
                if xv == 0.0 {
                    continue;
                }
                let yrow = &y.data[k * p..(k + 1) * p];
                for (o, yv) in orow.iter_mut().zip(yrow) {
                    *o += xv * yv;
                }
            }
        }
        self.push(Tensor::new(n, p, out), Op::MatMul(a, b))
    }

    fn zip_same(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert!(x.same_shape(y), "elementwise shapes differ");
        let data = x.data.iter().zip(&y.data).map(|(p, q)| f(*p, *q)).collect();
        let out = Tensor::new(x.rows, x.cols, data);
        self.push(out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |p, q| p + q, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |p, q| p - q, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |p, q| p * q, Op::Mul(a, b))
    }

    fn row_broadcast(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert!(y.rows == 1 && y.cols == x.cols, "row broadcast shape mismatch");
        let mut data = x.data.clone();
        for row in data.chunks_mut(x.cols.max(1)) {
            for (v, w) in row.iter_mut().zip(&y.data) {
                *v = f(*v, *w);
            }
        }
        let out = Tensor::new(x.rows, x.cols, data);
        self.push(out, op)
    }

    /// `a + b` with `b` a 1×C row broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        self.row_broadcast(a, b, |p, q| p + q, Op::AddRow(a, b))
    }

    /// `a ⊙ b` with `b` a 1×C row broadcast over the rows of `a`.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Var {
        self.row_broadcast(a, b, |p, q| p * q, Op::MulRow(a, b))
    }

    fn col_broadcast(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert!(y.cols == 1 && y.rows == x.rows, "column broadcast shape mismatch");
        let mut data = x.data.clone();
        for (r, row) in data.chunks_mut(x.cols.max(1)).enumerate() {
            let w = y.data[r];
            for v in row.iter_mut() {
                *v = f(*v, w);
            }
        }
        let out = Tensor::new(x.rows, x.cols, data);
        self.push(out, op)
    }

    /// `a − b` with `b` an R×1 column broadcast over the columns of `a`.
    pub fn sub_col(&mut self, a: Var, b: Var) -> Var {
        self.col_broadcast(a, b, |p, q| p - q, Op::SubCol(a, b))
    }

    pub fn mul_col(&mut self, a: Var, b: Var) -> Var {
        self.col_broadcast(a, b, |p, q| p * q, Op::MulCol(a, b))
    }

    pub fn div_col(&mut self, a: Var, b: Var) -> Var {
        self.col_broadcast(a, b, |p, q| p / q, Op::DivCol(a, b))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let x = self.value(a);
        let out = Tensor::new(x.rows, x.cols, x.data.iter().map(|v| f(*v)).collect());
        self.push(out, op)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(a, |v| v * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.map(a, |v| v + s, Op::AddScalar(a))
    }

    /// Elementwise product with a constant mask; the mask receives no gradient.
    pub fn mask(&mut self, a: Var, mask: Vec<f64>) -> Var {
        let x = self.value(a);
        assert_eq!(mask.len(), x.len(), "mask length mismatch");
        let data = x.data.iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::new(x.rows, x.cols, data);
        self.push(out, Op::Mask(a, mask))
    }

    /// Leaky rectifier, recorded as a mask multiply by the piecewise slope.
    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let mask = leaky_slopes(self.value(a), slope);
        self.mask(a, mask)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.map(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, f64::exp, Op::Exp(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    /// Absolute value; the subgradient at zero is zero.
    pub fn abs(&mut self, a: Var) -> Var {
        self.map(a, f64::abs, Op::Abs(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    /// R×C → R×1 row sums.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let data = (0..x.rows).map(|r| x.row(r).iter().sum()).collect();
        let out = Tensor::new(x.rows, 1, data);
        self.push(out, Op::RowSum(a))
    }

    pub fn row_mean(&mut self, a: Var) -> Var {
        let cols = self.value(a).cols as f64;
        let s = self.row_sum(a);
        self.scale(s, 1.0 / cols)
    }

    /// Sum of all entries as a 1×1 node.
    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Builds an `rows`×`cols` node whose flat entry `i` is `a.data[indices[i]]`.
    /// Covers reshapes, row/column selection, sorting and max-selection.
    pub fn gather(&mut self, a: Var, indices: Vec<usize>, rows: usize, cols: usize) -> Var {
        let x = self.value(a);
        let data = indices.iter().map(|&i| x.data[i]).collect();
        let out = Tensor::new(rows, cols, data);
        self.push(out, Op::Gather(a, indices))
    }

    /// Selects whole rows of `a` (row indices may repeat).
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let cols = self.value(a).cols;
        let indices = rows
            .iter()
            .flat_map(|&r| (0..cols).map(move |c| r * cols + c))
            .collect();
        self.gather(a, indices, rows.len(), cols)
    }

    /// Selects column `c` of `a` as an R×1 node.
    pub fn column(&mut self, a: Var, c: usize) -> Var {
        let (rows, cols) = (self.value(a).rows, self.value(a).cols);
        let indices = (0..rows).map(|r| r * cols + c).collect();
        self.gather(a, indices, rows, 1)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let n = self.value(a).len();
        assert_eq!(n, rows * cols, "reshape changes element count");
        self.gather(a, (0..n).collect(), rows, cols)
    }

    /// Column-wise maximum over consecutive groups of `group` rows.
    /// Ties resolve to the first (lowest) row in the group.
    pub fn segment_max(&mut self, a: Var, group: usize) -> Var {
        let x = self.value(a);
        assert!(group > 0 && x.rows.is_multiple_of(group), "rows not divisible by group");
        let (segments, cols) = (x.rows / group, x.cols);
        let mut indices = Vec::with_capacity(segments * cols);
        for s in 0..segments {
            for c in 0..cols {
                let mut best = s * group * cols + c;
                for r in 1..group {
                    let idx = (s * group + r) * cols + c;
                    if x.data[idx] > x.data[best] {
                        best = idx;
                    }
                }
                indices.push(best);
            }
        }
        self.gather(a, indices, segments, cols)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.rows, y.rows, "concat row counts differ");
        let cols = x.cols + y.cols;
        let mut data = Vec::with_capacity(x.rows * cols);
        for r in 0..x.rows {
            data.extend_from_slice(x.row(r));
            data.extend_from_slice(y.row(r));
        }
        let out = Tensor::new(x.rows, cols, data);
        self.push(out, Op::ConcatCols(a, b))
    }

    /// Reverse pass from a 1×1 output node.
    pub fn backward(&self, output: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        let out = self.value(output);
        grads[output.0] = Some(Tensor::filled(out.rows, out.cols, 1.0));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let send = |v: Var, contrib: Tensor, grads: &mut Vec<Option<Tensor>>| match &mut grads
                [v.0]
            {
                Some(existing) => existing.add_assign(&contrib),
                slot @ None => *slot = Some(contrib),
            };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (x, y) = (self.value(*a), self.value(*b));
                    send(*a, matmul_nt(&g, y), &mut grads);
                    send(*b, matmul_tn(x, &g), &mut grads);
                }
                Op::Add(a, b) => {
                    send(*a, g.clone(), &mut grads);
                    send(*b, g.clone(), &mut grads);
                }
                Op::Sub(a, b) => {
                    send(*a, g.clone(), &mut grads);
                    send(*b, map_t(&g, |v| -v), &mut grads);
                }
                Op::Mul(a, b) => {
                    let (x, y) = (self.value(*a), self.value(*b));
                    send(*a, zip_t(&g, y, |p, q| p * q), &mut grads);
                    send(*b, zip_t(&g, x, |p, q| p * q), &mut grads);
                }
                Op::AddRow(a, b) => {
                    send(*b, col_sums(&g), &mut grads);
                    send(*a, g, &mut grads);
                }
                Op::MulRow(a, b) => {
                    let (x, y) = (self.value(*a), self.value(*b));
                    let ga = row_apply(&g, y, |p, q| p * q);
                    let gb = col_sums(&zip_t(&g, x, |p, q| p * q));
                    send(*a, ga, &mut grads);
                    send(*b, gb, &mut grads);
                }
                Op::SubCol(a, b) => {
                    send(*b, map_t(&row_sums(&g), |v| -v), &mut grads);
                    send(*a, g, &mut grads);
                }
                Op::MulCol(a, b) => {
                    let (x, y) = (self.value(*a), self.value(*b));
                    let ga = col_apply(&g, y, |p, q| p * q);
                    let gb = row_sums(&zip_t(&g, x, |p, q| p * q));
                    send(*a, ga, &mut grads);
                    send(*b, gb, &mut grads);
                }
                Op::DivCol(a, b) => {
                    let (x, y) = (self.value(*a), self.value(*b));
                    let ga = col_apply(&g, y, |p, q| p / q);
                    // d(x/y)/dy = -x/y²
                    let gx = zip_t(&g, x, |p, q| p * q);
                    let mut gb = row_sums(&gx);
                    for (v, d) in gb.data.iter_mut().zip(&y.data) {
                        *v = -*v / (d * d);
                    }
                    send(*a, ga, &mut grads);
                    send(*b, gb, &mut grads);
                }
                Op::Scale(a, s) => send(*a, map_t(&g, |v| v * s), &mut grads),
                Op::AddScalar(a) => send(*a, g, &mut grads),
                Op::Mask(a, m) => {
                    let data = g.data.iter().zip(m).map(|(p, q)| p * q).collect();
                    send(*a, Tensor::new(g.rows, g.cols, data), &mut grads);
                }
                Op::Sqrt(a) => {
                    let y = &node.value;
                    send(*a, zip_t(&g, y, |p, q| p * 0.5 / q), &mut grads);
                }
                Op::Exp(a) => {
                    let y = &node.value;
                    send(*a, zip_t(&g, y, |p, q| p * q), &mut grads);
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    send(*a, zip_t(&g, y, |p, q| p * (1.0 - q * q)), &mut grads);
                }
                Op::Abs(a) => {
                    let x = self.value(*a);
                    send(*a, zip_t(&g, x, |p, q| p * sign(q)), &mut grads);
                }
                Op::RowSum(a) => {
                    let x = self.value(*a);
                    let mut out = Tensor::zeros(x.rows, x.cols);
                    for r in 0..x.rows {
                        for c in 0..x.cols {
                            out.data[r * x.cols + c] = g.data[r];
                        }
                    }
                    send(*a, out, &mut grads);
                }
                Op::Sum(a) => {
                    let x = self.value(*a);
                    send(*a, Tensor::filled(x.rows, x.cols, g.data[0]), &mut grads);
                }
                Op::Gather(a, indices) => {
                    let x = self.value(*a);
                    let mut out = Tensor::zeros(x.rows, x.cols);
                    for (gv, &i) in g.data.iter().zip(indices) {
                        out.data[i] += gv;
                    }
                    send(*a, out, &mut grads);
                }
                Op::ConcatCols(a, b) => {
                    let (x, y) = (self.value(*a), self.value(*b));
                    let mut ga = Vec::with_capacity(x.len());
                    let mut gb = Vec::with_capacity(y.len());
                    for r in 0..g.rows {
                        let row = g.row(r);
                        ga.extend_from_slice(&row[..x.cols]);
                        gb.extend_from_slice(&row[x.cols..]);
                    }
                    send(*a, Tensor::new(x.rows, x.cols, ga), &mut grads);
                    send(*b, Tensor::new(y.rows, y.cols, gb), &mut grads);
                }
            }
        }
        Gradients { grads }
    }
}

/// Piecewise slope of the leaky rectifier: 1 for positive inputs, `slope` otherwise.
pub fn leaky_slopes(x: &Tensor, slope: f64) -> Vec<f64> {
    x.data
        .iter()
        .map(|&v| if v > 0.0 { 1.0 } else { slope })
        .collect()
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn map_t(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(x.rows, x.cols, x.data.iter().map(|v| f(*v)).collect())
}

fn zip_t(x: &Tensor, y: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = x.data.iter().zip(&y.data).map(|(p, q)| f(*p, *q)).collect();
    Tensor::new(x.rows, x.cols, data)
}

fn row_apply(x: &Tensor, row: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let mut out = x.clone();
    for r in 0..x.rows {
        for c in 0..x.cols {
            let i = r * x.cols + c;
            out.data[i] = f(x.data[i], row.data[c]);
        }
    }
    out
}

fn col_apply(x: &Tensor, col: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let mut out = x.clone();
    for r in 0..x.rows {
        for c in 0..x.cols {
            let i = r * x.cols + c;
            out.data[i] = f(x.data[i], col.data[r]);
        }
    }
    out
}

fn col_sums(x: &Tensor) -> Tensor {
    let mut out = vec![0.0; x.cols];
    for r in 0..x.rows {
        for (o, v) in out.iter_mut().zip(x.row(r)) {
            *o += v;
        }
    }
    Tensor::new(1, x.cols, out)
}

fn row_sums(x: &Tensor) -> Tensor {
    Tensor::new(x.rows, 1, (0..x.rows).map(|r| x.row(r).iter().sum()).collect())
}

/// `g · yᵀ`
fn matmul_nt(g: &Tensor, y: &Tensor) -> Tensor {
    let (n, p, m) = (g.rows, g.cols, y.rows);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let grow = g.row(i);
        for k in 0..m {
            let yrow = y.row(k);
            out[i * m + k] = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
        }
    }
    debug_assert_eq!(y.cols, p);
    Tensor::new(n, m, out)
}

/// `xᵀ · g`
fn matmul_tn(x: &Tensor, g: &Tensor) -> Tensor {
    let (n, m, p) = (x.rows, x.cols, g.cols);
    let mut out = vec![0.0; m * p];
    for i in 0..n {
        let grow = g.row(i);
        for k in 0..m {
            let xv = x.data[i * m + k];
            if xv == 0.0 {
                continue;
            }
            let orow = &mut out[k * p..(k + 1) * p];
            for (o, gv) in orow.iter_mut().zip(grow) {
                *o += xv * gv;
            }
        }
    }
    Tensor::new(m, p, out)
}
