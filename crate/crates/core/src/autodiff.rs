//! Reverse-mode automatic differentiation over row-major matrices.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles. Calling
//! [`Graph::backward`] on a scalar (1x1) node walks the record in reverse and
//! accumulates gradients for every node that depends on a trainable leaf.
//! Constant leaves, and everything computed only from constants, are skipped
//! during the backward sweep, so frozen parameters always receive exactly zero
//! gradient.

use std::sync::Arc;

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use crate::scalar::Scalar;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Recip(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNormRows { x: Var, inv_std: Vec<T> },
    L2NormalizeRows { x: Var, norms: Vec<T> },
    SumAll(Var),
    SumRows(Var),
    SumCols(Var),
    MaxCols { x: Var, argmax: Vec<usize> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    GatherRows { x: Var, index: Vec<usize> },
    Reshape(Var),
}

struct Node<T> {
    value: Arc<Array2<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Tape of recorded operations.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Array2<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the differentiated output w.r.t. `v`, or `None` when `v` does
    /// not depend on any trainable leaf (its gradient is identically zero).
    pub fn get(&self, v: Var) -> Option<&Array2<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient w.r.t. `v`, materialising zeros when absent.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Array2<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Array2::zeros(shape))
    }
}

fn standard<T: Clone>(a: Array2<T>) -> Array2<T> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

fn owned_t<T: Scalar>(a: ArrayView2<'_, T>) -> Array2<T> {
    a.t().as_standard_layout().into_owned()
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<T>, op: Op<T>, needs_grad: bool) -> Var {
        let value = standard(value);
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Leaf holding `value`; `trainable` leaves receive gradients.
    pub fn leaf(&mut self, value: Array2<T>, trainable: bool) -> Var {
        self.push(value, Op::Leaf, trainable)
    }

    /// Leaf sharing storage with a parameter store.
    pub fn shared_leaf(&mut self, value: Arc<Array2<T>>, trainable: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: trainable,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Array2<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Array2<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> T {
        let val = self.value(v);
        debug_assert_eq!(val.dim(), (1, 1));
        val[[0, 0]]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.needs(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = owned_t(self.value(a).view());
        let ng = self.needs(a);
        self.push(value, Op::Transpose(a), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let value = self.value(a) + self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let value = self.value(a) - self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let value = self.value(a) * self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    /// `a + row`, broadcasting the 1xC `row` over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "add_row: expects a row vector");
        assert_eq!(self.shape(a).1, self.shape(row).1, "add_row: width mismatch");
        let value = self.value(a) + self.value(row);
        let ng = self.needs(a) || self.needs(row);
        self.push(value, Op::AddRow(a, row), ng)
    }

    /// `a * row`, broadcasting the 1xC `row` over every row of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "mul_row: expects a row vector");
        assert_eq!(self.shape(a).1, self.shape(row).1, "mul_row: width mismatch");
        let value = self.value(a) * self.value(row);
        let ng = self.needs(a) || self.needs(row);
        self.push(value, Op::MulRow(a, row), ng)
    }

    /// `a * col`, broadcasting the Rx1 `col` over every column of `a`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        assert_eq!(self.shape(col).1, 1, "mul_col: expects a column vector");
        assert_eq!(self.shape(a).0, self.shape(col).0, "mul_col: height mismatch");
        let value = self.value(a) * self.value(col);
        let ng = self.needs(a) || self.needs(col);
        self.push(value, Op::MulCol(a, col), ng)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a) * s;
        let ng = self.needs(a);
        self.push(value, Op::Scale(a, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a) + s;
        let ng = self.needs(a);
        self.push(value, Op::AddScalar(a), ng)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -T::one())
    }

    /// `1 - a`
    pub fn one_minus(&mut self, a: Var) -> Var {
        let n = self.neg(a);
        self.add_scalar(n, T::one())
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(a).mapv(f);
        let ng = self.needs(a);
        self.push(value, op, ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(T::zero()), Op::Relu(a))
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let half = T::lit(0.5);
        let inv_sqrt2 = T::lit(std::f64::consts::FRAC_1_SQRT_2);
        self.unary(
            a,
            |x| half * x * (T::one() + (x * inv_sqrt2).erf()),
            Op::Gelu(a),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, T::tanh, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, T::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, T::ln, Op::Log(a))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, T::recip, Op::Recip(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a).view());
        let ng = self.needs(a);
        self.push(value, Op::SoftmaxRows(a), ng)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut value = x.clone();
        for mut row in value.rows_mut() {
            let lse = log_sum_exp(row.iter().copied());
            row.mapv_inplace(|v| v - lse);
        }
        let ng = self.needs(a);
        self.push(value, Op::LogSoftmaxRows(a), ng)
    }

    /// Per-row standardisation without affine terms.
    pub fn layer_norm_rows(&mut self, a: Var, eps: T) -> Var {
        let x = self.value(a);
        let cols = T::from_usize(x.ncols()).unwrap();
        let mut value = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in value.rows_mut() {
            let mean = row.iter().copied().sum::<T>() / cols;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|&v| v * v).sum::<T>() / cols;
            let inv = (var + eps).sqrt().recip();
            row.mapv_inplace(|v| v * inv);
            inv_std.push(inv);
        }
        let ng = self.needs(a);
        self.push(value, Op::LayerNormRows { x: a, inv_std }, ng)
    }

    /// Scales every row to unit Euclidean norm. A zero row yields non-finite output.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut value = x.clone();
        let mut norms = Vec::with_capacity(x.nrows());
        for mut row in value.rows_mut() {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            row.mapv_inplace(|v| v / n);
            norms.push(n);
        }
        let ng = self.needs(a);
        self.push(value, Op::L2NormalizeRows { x: a, norms }, ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let total = self.value(a).sum();
        let ng = self.needs(a);
        self.push(Array2::from_elem((1, 1), total), Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum_all(a);
        self.scale(s, T::from_usize(n).unwrap().recip())
    }

    /// Row sums as an Rx1 column.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let ng = self.needs(a);
        self.push(value, Op::SumRows(a), ng)
    }

    /// Column sums as a 1xC row.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        let ng = self.needs(a);
        self.push(value, Op::SumCols(a), ng)
    }

    /// Column-wise maximum as a 1xC row. Ties resolve to the first row.
    pub fn max_cols(&mut self, a: Var) -> Var {
        let x = self.value(a);
        assert!(x.nrows() > 0, "max_cols of an empty matrix");
        let mut argmax = Vec::with_capacity(x.ncols());
        let mut out = Array2::zeros((1, x.ncols()));
        for (j, col) in x.columns().into_iter().enumerate() {
            let mut best = 0;
            for (i, &v) in col.iter().enumerate() {
                if v > col[best] {
                    best = i;
                }
            }
            argmax.push(best);
            out[[0, j]] = col[best];
        }
        let ng = self.needs(a);
        self.push(out, Op::MaxCols { x: a, argmax }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows: col mismatch");
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(value, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![.., start..start + len]).to_owned();
        let ng = self.needs(a);
        self.push(value, Op::SliceCols { x: a, start }, ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![start..start + len, ..]).to_owned();
        let ng = self.needs(a);
        self.push(value, Op::SliceRows { x: a, start }, ng)
    }

    /// Row `i` of the output is row `index[i]` of `a`; rows may repeat.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Var {
        let x = self.value(a);
        let value = x.select(Axis(0), index);
        let ng = self.needs(a);
        self.push(
            value,
            Op::GatherRows {
                x: a,
                index: index.to_vec(),
            },
            ng,
        )
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let value = self
            .value(a)
            .clone()
            .into_shape_with_order((rows, cols))
            .expect("reshape: element count mismatch");
        let ng = self.needs(a);
        self.push(value, Op::Reshape(a), ng)
    }

    /// `x W + b` with `W` stored input-major (in x out) and `b` a 1 x out row.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    /// Reverse sweep from a 1x1 output.
    pub fn backward(&self, output: Var) -> Gradients<T> {
        assert_eq!(self.shape(output), (1, 1), "backward expects a scalar output");
        self.backward_with(output, Array2::from_elem((1, 1), T::one()))
    }

    /// Reverse sweep seeded with an arbitrary cotangent for `output`.
    pub fn backward_with(&self, output: Var, seed: Array2<T>) -> Gradients<T> {
        assert_eq!(seed.dim(), self.shape(output), "seed shape mismatch");
        let mut grads: Vec<Option<Array2<T>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed);
        for id in (0..=output.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Array2<T>>], v: Var, g: Array2<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node<T>, g: &Array2<T>, grads: &mut [Option<Array2<T>>]) {
        let y = &*node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    let ga = g.dot(&self.value(*b).t());
                    self.accumulate(grads, *a, ga);
                }
                if self.needs(*b) {
                    let gb = self.value(*a).t().dot(g);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, owned_t(g.view())),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.mapv(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g * self.value(*b));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, g * self.value(*a));
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.needs(*row) {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accumulate(grads, *row, gr);
                }
            }
            Op::MulRow(a, row) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g * self.value(*row));
                }
                if self.needs(*row) {
                    let gr = (g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accumulate(grads, *row, gr);
                }
            }
            Op::MulCol(a, col) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g * self.value(*col));
                }
                if self.needs(*col) {
                    let gc = (g * self.value(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                    self.accumulate(grads, *col, gc);
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g * *s),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Relu(a) => {
                let mut ga = g.clone();
                Zip::from(&mut ga)
                    .and(self.value(*a))
                    .for_each(|d, &x| {
                        if x <= T::zero() {
                            *d = T::zero();
                        }
                    });
                self.accumulate(grads, *a, ga);
            }
            Op::Gelu(a) => {
                let inv_sqrt2 = T::lit(std::f64::consts::FRAC_1_SQRT_2);
                let inv_sqrt2pi = T::lit(0.398_942_280_401_432_7);
                let half = T::lit(0.5);
                let mut ga = g.clone();
                Zip::from(&mut ga).and(self.value(*a)).for_each(|d, &x| {
                    let cdf = half * (T::one() + (x * inv_sqrt2).erf());
                    let pdf = inv_sqrt2pi * (-half * x * x).exp();
                    *d *= cdf + x * pdf;
                });
                self.accumulate(grads, *a, ga);
            }
            Op::Sigmoid(a) => {
                let ga = g * &y.mapv(|s| s * (T::one() - s));
                self.accumulate(grads, *a, ga);
            }
            Op::Tanh(a) => {
                let ga = g * &y.mapv(|t| T::one() - t * t);
                self.accumulate(grads, *a, ga);
            }
            Op::Exp(a) => self.accumulate(grads, *a, g * y),
            Op::Log(a) => self.accumulate(grads, *a, g / self.value(*a)),
            Op::Recip(a) => {
                let ga = g * &y.mapv(|r| -r * r);
                self.accumulate(grads, *a, ga);
            }
            Op::SoftmaxRows(a) => {
                let mut ga = g * y;
                for (mut row, yrow) in ga.rows_mut().into_iter().zip(y.rows()) {
                    let dot: T = row.sum();
                    Zip::from(&mut row).and(&yrow).for_each(|d, &p| *d -= p * dot);
                }
                self.accumulate(grads, *a, ga);
            }
            Op::LogSoftmaxRows(a) => {
                let mut ga = g.clone();
                for (mut row, yrow) in ga.rows_mut().into_iter().zip(y.rows()) {
                    let total: T = row.sum();
                    Zip::from(&mut row)
                        .and(&yrow)
                        .for_each(|d, &ly| *d -= ly.exp() * total);
                }
                self.accumulate(grads, *a, ga);
            }
            Op::LayerNormRows { x, inv_std } => {
                let cols = T::from_usize(y.ncols()).unwrap();
                let mut ga = g.clone();
                for ((mut row, yrow), &inv) in
                    ga.rows_mut().into_iter().zip(y.rows()).zip(inv_std.iter())
                {
                    let mean_g = row.sum() / cols;
                    let mean_gy = row.iter().zip(yrow.iter()).map(|(&a, &b)| a * b).sum::<T>() / cols;
                    Zip::from(&mut row)
                        .and(&yrow)
                        .for_each(|d, &yv| *d = inv * (*d - mean_g - yv * mean_gy));
                }
                self.accumulate(grads, *x, ga);
            }
            Op::L2NormalizeRows { x, norms } => {
                let mut ga = g.clone();
                for ((mut row, yrow), &n) in
                    ga.rows_mut().into_iter().zip(y.rows()).zip(norms.iter())
                {
                    let dot = row.iter().zip(yrow.iter()).map(|(&a, &b)| a * b).sum::<T>();
                    Zip::from(&mut row)
                        .and(&yrow)
                        .for_each(|d, &yv| *d = (*d - yv * dot) / n);
                }
                self.accumulate(grads, *x, ga);
            }
            Op::SumAll(a) => {
                let ga = Array2::from_elem(self.shape(*a), g[[0, 0]]);
                self.accumulate(grads, *a, ga);
            }
            Op::SumRows(a) => {
                let ga = g
                    .broadcast(self.shape(*a))
                    .expect("sum_rows broadcast")
                    .to_owned();
                self.accumulate(grads, *a, ga);
            }
            Op::SumCols(a) => {
                let ga = g
                    .broadcast(self.shape(*a))
                    .expect("sum_cols broadcast")
                    .to_owned();
                self.accumulate(grads, *a, ga);
            }
            Op::MaxCols { x, argmax } => {
                let mut ga = Array2::zeros(self.shape(*x));
                for (j, &i) in argmax.iter().enumerate() {
                    ga[[i, j]] = g[[0, j]];
                }
                self.accumulate(grads, *x, ga);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    if self.needs(p) {
                        let gp = g.slice(s![.., start..start + w]).to_owned();
                        self.accumulate(grads, p, gp);
                    }
                    start += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let h = self.shape(p).0;
                    if self.needs(p) {
                        let gp = g.slice(s![start..start + h, ..]).to_owned();
                        self.accumulate(grads, p, gp);
                    }
                    start += h;
                }
            }
            Op::SliceCols { x, start } => {
                let mut ga = Array2::zeros(self.shape(*x));
                ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                self.accumulate(grads, *x, ga);
            }
            Op::SliceRows { x, start } => {
                let mut ga = Array2::zeros(self.shape(*x));
                ga.slice_mut(s![*start..*start + g.nrows(), ..]).assign(g);
                self.accumulate(grads, *x, ga);
            }
            Op::GatherRows { x, index } => {
                let mut ga = Array2::zeros(self.shape(*x));
                for (row, &src) in g.rows().into_iter().zip(index.iter()) {
                    let mut dst = ga.row_mut(src);
                    dst.zip_mut_with(&row, |d, &v| *d += v);
                }
                self.accumulate(grads, *x, ga);
            }
            Op::Reshape(a) => {
                let ga = g
                    .clone()
                    .into_shape_with_order(self.shape(*a))
                    .expect("reshape backward");
                self.accumulate(grads, *a, ga);
            }
        }
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn log_sum_exp<T: Scalar>(values: impl Iterator<Item = T> + Clone) -> T {
    let max = values.clone().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<T>().ln()
}

/// Numerically stable row-wise softmax.
pub fn softmax_rows<T: Scalar>(x: ArrayView2<'_, T>) -> Array2<T> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row.mapv_inplace(|v| v / total);
    }
    out
}
