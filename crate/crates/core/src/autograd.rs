//! A small reverse-mode automatic differentiation tape over dense `f64` matrices.
//!
//! Every value on the tape is a 2-D array. Vectors are stored as `n×1` columns or
//! `1×n` rows and scalars as `1×1`. Binary elementwise ops broadcast their
//! second operand when it has shape `1×n`, `m×1` or `1×1`.

use ndarray::{s, Array2, Axis, Zip};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Constant,
    Input,
    Param(usize),
    StopGrad,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Array2<f64>),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    RowMax(Var, Vec<usize>),
    LayerNorm(Var, Array2<f64>, Vec<f64>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    Pick(Var, usize, usize),
    ShiftRows(Var, isize),
    StraightThrough(Var),
    KlLogProb(Var, Array2<f64>),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    params: Vec<Option<Array2<f64>>>,
    inputs: Vec<(Var, Array2<f64>)>,
}

impl Gradients {
    /// Gradient of a parameter by its store index, `None` if it did not influence the seeds.
    pub fn param(&self, id: usize) -> Option<&Array2<f64>> {
        self.params.get(id).and_then(|g| g.as_ref())
    }

    /// Gradient accumulated at an [`Tape::input`] leaf.
    pub fn input(&self, var: Var) -> Option<&Array2<f64>> {
        self.inputs.iter().find(|(v, _)| *v == var).map(|(_, g)| g)
    }

    pub fn into_params(self) -> Vec<Option<Array2<f64>>> {
        self.params
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

fn broadcast_compatible(a: (usize, usize), b: (usize, usize)) -> bool {
    (b.0 == a.0 || b.0 == 1) && (b.1 == a.1 || b.1 == 1)
}

/// Sums `grad` down to `shape` along broadcast axes.
fn reduce_to(grad: &Array2<f64>, shape: (usize, usize)) -> Array2<f64> {
    let mut g = grad.clone();
    if shape.0 == 1 && g.nrows() != 1 {
        g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 == 1 && g.ncols() != 1 {
        g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    g
}

fn broadcast_op(
    a: &Array2<f64>,
    b: &Array2<f64>,
    f: impl Fn(f64, f64) -> f64,
) -> Array2<f64> {
    let bb = b
        .broadcast(a.raw_dim())
        .unwrap_or_else(|| panic!("cannot broadcast {:?} to {:?}", b.dim(), a.dim()));
    let mut out = a.clone();
    Zip::from(&mut out).and(&bb).for_each(|x, &y| *x = f(*x, y));
    out
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

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Scalar value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        debug_assert_eq!(val.dim(), (1, 1));
        val[[0, 0]]
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn scalar_constant(&mut self, x: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), x))
    }

    /// A leaf whose gradient is reported by [`Gradients::input`].
    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Input)
    }

    /// Registers parameter `id`; repeated calls with the same id return the same node.
    pub fn param(&mut self, id: usize, value: &Array2<f64>) -> Var {
        if self.param_vars.len() <= id {
            self.param_vars.resize(id + 1, None);
        }
        if let Some(v) = self.param_vars[id] {
            return v;
        }
        let v = self.push(value.clone(), Op::Param(id));
        self.param_vars[id] = Some(v);
        v
    }

    /// Same value as `a`, but no gradient flows back through it.
    pub fn stop_grad(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.push(value, Op::StopGrad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        self.push(value, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert!(broadcast_compatible(self.shape(a), self.shape(b)));
        let value = broadcast_op(self.value(a), self.value(b), |x, y| x + y);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert!(broadcast_compatible(self.shape(a), self.shape(b)));
        let value = broadcast_op(self.value(a), self.value(b), |x, y| x - y);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert!(broadcast_compatible(self.shape(a), self.shape(b)));
        let value = broadcast_op(self.value(a), self.value(b), |x, y| x * y);
        self.push(value, Op::Mul(a, b))
    }

    /// Elementwise product with a constant (broadcast like [`Tape::mul`]).
    pub fn mul_const(&mut self, a: Var, c: Array2<f64>) -> Var {
        assert!(broadcast_compatible(self.shape(a), c.dim()));
        let value = broadcast_op(self.value(a), &c, |x, y| x * y);
        self.push(value, Op::MulConst(a, c))
    }

    pub fn add_const(&mut self, a: Var, c: Array2<f64>) -> Var {
        let cv = self.constant(c);
        self.add(a, cv)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a) * k;
        self.push(value, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let c = self.scalar_constant(k);
        self.add(a, c)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::exp);
        self.push(value, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::ln);
        self.push(value, Op::Log(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::abs);
        self.push(value, Op::Abs(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x * x);
        self.push(value, Op::Square(a))
    }

    /// Clamp into `[lo, hi]`; gradient is zero where clamping was active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).mapv(|x| x.clamp(lo, hi));
        self.push(value, Op::Clamp(a, lo, hi))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        self.push(value, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let value = log_softmax_rows(self.value(a));
        self.push(value, Op::LogSoftmaxRows(a))
    }

    /// Row-wise maximum as an `m×1` column.
    pub fn row_max(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut arg = Vec::with_capacity(x.nrows());
        let mut value = Array2::zeros((x.nrows(), 1));
        for (i, row) in x.rows().into_iter().enumerate() {
            let (j, m) = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bj, bm), (j, &v)| {
                    if v > bm {
                        (j, v)
                    } else {
                        (bj, bm)
                    }
                });
            arg.push(j);
            value[[i, 0]] = m;
        }
        self.push(value, Op::RowMax(a, arg))
    }

    /// Row-wise normalization to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let n = x.ncols() as f64;
        let mut xhat = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * inv);
            inv_std.push(inv);
        }
        let value = xhat.clone();
        self.push(value, Op::LayerNorm(a, xhat, inv_std))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows: col mismatch");
        self.push(value, Op::ConcatRows(parts.to_vec()))
    }

    /// Columns `[start, end)`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(value, Op::SliceCols(a, start))
    }

    /// Rows `[start, end)`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![start..end, ..]).to_owned();
        self.push(value, Op::SliceRows(a, start))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        self.push(value, Op::Transpose(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let value = Array2::from_elem((1, 1), x.sum() / x.len() as f64);
        self.push(value, Op::Mean(a))
    }

    pub fn pick(&mut self, a: Var, row: usize, col: usize) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a)[[row, col]]);
        self.push(value, Op::Pick(a, row, col))
    }

    /// `out[i] = a[i - offset]`, zero where out of range.
    pub fn shift_rows(&mut self, a: Var, offset: isize) -> Var {
        let x = self.value(a);
        let value = shift_rows(x, offset);
        self.push(value, Op::ShiftRows(a, offset))
    }

    /// Forward value is `hard`; the backward pass routes gradients to `relaxed`.
    pub fn straight_through(&mut self, hard: Array2<f64>, relaxed: Var) -> Var {
        assert_eq!(hard.dim(), self.shape(relaxed));
        self.push(hard, Op::StraightThrough(relaxed))
    }

    /// `KL(exp(p) || exp(q))` for log-probability rows `p` (on tape) and constant `q`.
    /// Terms with zero probability under `p` contribute zero.
    pub fn kl_log_prob(&mut self, p: Var, q: Array2<f64>) -> Var {
        let pv = self.value(p);
        assert_eq!(pv.dim(), q.dim());
        let mut total = 0.0;
        Zip::from(pv).and(&q).for_each(|&lp, &lq| {
            let prob = lp.exp();
            if prob > 0.0 {
                total += prob * (lp - lq);
            }
        });
        self.push(Array2::from_elem((1, 1), total), Op::KlLogProb(p, q))
    }

    /// Accumulates gradients of `Σ weight · seed` with respect to parameters and inputs.
    pub fn backward(&self, seeds: &[(Var, f64)]) -> Gradients {
        let n_params = self
            .nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Param(id) => Some(id + 1),
                _ => None,
            })
            .max()
            .unwrap_or(0);
        let mut params: Vec<Option<Array2<f64>>> = vec![None; n_params];
        let mut inputs = Vec::new();
        let Some(top) = seeds.iter().map(|(v, _)| v.0).max() else {
            return Gradients { params, inputs };
        };
        let mut grads: Vec<Option<Array2<f64>>> = Vec::with_capacity(top + 1);
        grads.resize_with(top + 1, || None);
        for &(v, w) in seeds {
            let seed = Array2::from_elem(self.shape(v), w);
            accumulate(&mut grads, v, seed);
        }

        for idx in (0..=top).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant | Op::StopGrad => {}
                Op::Input => inputs.push((Var(idx), g)),
                Op::Param(id) => match &mut params[*id] {
                    Some(acc) => *acc += &g,
                    slot => *slot = Some(g),
                },
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    let ga = g.dot(self.value(*b));
                    let gb = g.t().dot(self.value(*a));
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    let gb = reduce_to(&g, self.shape(*b));
                    accumulate(&mut grads, *b, gb);
                    accumulate(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    let gb = reduce_to(&g, self.shape(*b)).mapv(|x| -x);
                    accumulate(&mut grads, *b, gb);
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = broadcast_op(&g, self.value(*b), |x, y| x * y);
                    let full = &g * self.value(*a);
                    let gb = reduce_to(&full, self.shape(*b));
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MulConst(a, c) => {
                    let ga = broadcast_op(&g, c, |x, y| x * y);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Scale(a, k) => accumulate(&mut grads, *a, g * *k),
                Op::Relu(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(self.value(*a))
                        .for_each(|d, &x| {
                            if x <= 0.0 {
                                *d = 0.0
                            }
                        });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(&node.value)
                        .for_each(|d, &y| *d *= y * (1.0 - y));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(&node.value)
                        .for_each(|d, &y| *d *= 1.0 - y * y);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Exp(a) => accumulate(&mut grads, *a, g * &node.value),
                Op::Log(a) => accumulate(&mut grads, *a, g / self.value(*a)),
                Op::Abs(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(self.value(*a))
                        .for_each(|d, &x| *d *= if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Square(a) => {
                    let ga = g * self.value(*a) * 2.0;
                    accumulate(&mut grads, *a, ga);
                }
                Op::Clamp(a, lo, hi) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(self.value(*a)).for_each(|d, &x| {
                        if x < *lo || x > *hi {
                            *d = 0.0
                        }
                    });
                    accumulate(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = &g * y;
                    for (mut row, yrow) in ga.rows_mut().into_iter().zip(y.rows()) {
                        let dot = row.sum();
                        Zip::from(&mut row).and(&yrow).for_each(|d, &yy| *d -= yy * dot);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::LogSoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = g;
                    for (mut row, yrow) in ga.rows_mut().into_iter().zip(y.rows()) {
                        let total = row.sum();
                        Zip::from(&mut row)
                            .and(&yrow)
                            .for_each(|d, &ly| *d -= ly.exp() * total);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::RowMax(a, arg) => {
                    let (m, n) = self.shape(*a);
                    let mut ga = Array2::zeros((m, n));
                    for (i, &j) in arg.iter().enumerate() {
                        ga[[i, j]] = g[[i, 0]];
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::LayerNorm(a, xhat, inv_std) => {
                    let n = xhat.ncols() as f64;
                    let mut ga = g;
                    for ((mut row, xrow), &inv) in
                        ga.rows_mut().into_iter().zip(xhat.rows()).zip(inv_std)
                    {
                        let mean_g = row.sum() / n;
                        let mean_gx = row.iter().zip(xrow.iter()).map(|(d, x)| d * x).sum::<f64>() / n;
                        Zip::from(&mut row)
                            .and(&xrow)
                            .for_each(|d, &x| *d = inv * (*d - mean_g - x * mean_gx));
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.shape(p).1;
                        accumulate(&mut grads, p, g.slice(s![.., off..off + w]).to_owned());
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let h = self.shape(p).0;
                        accumulate(&mut grads, p, g.slice(s![off..off + h, ..]).to_owned());
                        off += h;
                    }
                }
                Op::SliceCols(a, start) => {
                    let mut ga = Array2::zeros(self.shape(*a));
                    let w = g.ncols();
                    ga.slice_mut(s![.., *start..*start + w]).assign(&g);
                    accumulate(&mut grads, *a, ga);
                }
                Op::SliceRows(a, start) => {
                    let mut ga = Array2::zeros(self.shape(*a));
                    let h = g.nrows();
                    ga.slice_mut(s![*start..*start + h, ..]).assign(&g);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.t().to_owned()),
                Op::Sum(a) => {
                    let ga = Array2::from_elem(self.shape(*a), g[[0, 0]]);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Mean(a) => {
                    let shape = self.shape(*a);
                    let ga = Array2::from_elem(shape, g[[0, 0]] / (shape.0 * shape.1) as f64);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Pick(a, r, c) => {
                    let mut ga = Array2::zeros(self.shape(*a));
                    ga[[*r, *c]] = g[[0, 0]];
                    accumulate(&mut grads, *a, ga);
                }
                Op::ShiftRows(a, off) => accumulate(&mut grads, *a, shift_rows(&g, -off)),
                Op::StraightThrough(r) => accumulate(&mut grads, *r, g),
                Op::KlLogProb(p, q) => {
                    let up = g[[0, 0]];
                    let mut ga = self.value(*p).clone();
                    Zip::from(&mut ga).and(q).for_each(|lp, &lq| {
                        let prob = lp.exp();
                        *lp = if prob > 0.0 { up * prob * (*lp - lq + 1.0) } else { 0.0 };
                    });
                    accumulate(&mut grads, *p, ga);
                }
            }
        }
        inputs.reverse();
        Gradients { params, inputs }
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(acc) => *acc += &g,
        slot => *slot = Some(g),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
    out
}

pub fn log_softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

fn shift_rows(x: &Array2<f64>, offset: isize) -> Array2<f64> {
    let n = x.nrows() as isize;
    let mut out = Array2::zeros(x.dim());
    for i in 0..n {
        let src = i - offset;
        if (0..n).contains(&src) {
            out.row_mut(i as usize).assign(&x.row(src as usize));
        }
    }
    out
}
