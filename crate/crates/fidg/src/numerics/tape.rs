//! Reverse-mode autodiff on a Wengert tape.
//!
//! The backward pass does not write raw gradient buffers: it *emits ordinary
//! tape ops* for every vector-Jacobian product. Gradients are therefore
//! themselves differentiable tensors on the same tape, which gives
//! higher-order derivatives for free — `backward` of an expression built out
//! of a previous `backward`'s outputs just works. The R1 penalty
//! (gradient-norm regularizer on the critics) relies on exactly this.
//!
//! The primitive op set is closed under differentiation: the VJP of every op
//! is expressible with ops from the same set. In particular the three matmul
//! layouts (NN, NT, TN) produce each other, so transposes are never
//! materialized.

use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::{as_matrix_dims, kernels, TapeRef};
use super::{NumericsError, Tensor};

static TAPE_UID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    /// y = mul * x + add, with f64 constants. (The additive part does not
    /// appear in the VJP, so only `mul` is stored.)
    Affine { x: usize, mul: f64 },
    MatmulNN(usize, usize),
    MatmulNT(usize, usize),
    MatmulTN(usize, usize),
    /// x: [n, d], b: [d]
    AddBias { x: usize, b: usize },
    /// [n, d] -> [d]
    SumRows(usize),
    /// [n, d] -> [n]
    SumCols(usize),
    /// [d] -> [n, d]
    BcastRows { b: usize },
    /// [n] -> [n, d]
    BcastCols { v: usize },
    /// any -> scalar
    SumAll(usize),
    /// scalar -> any
    ExpandScalar { s: usize },
    Relu(usize),
    LeakyRelu { x: usize, slope: f64 },
    Tanh(usize),
    Sigmoid(usize),
    Softplus(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Reshape(usize),
}

struct Node {
    op: Op,
    value: Tensor,
    /// False for constants and anything derived only from constants;
    /// backward skips those subtrees.
    needs_grad: bool,
}

/// Gradient map returned by [`Tape::backward`]. Gradients are tensors that
/// live on the same tape, so they can participate in further taped math.
#[derive(Debug)]
pub struct Gradients {
    tape_uid: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `t`, if `t` is on the tape and gradient
    /// actually flowed to it.
    pub fn wrt(&self, t: &Tensor) -> Option<Tensor> {
        let r = t.tape?;
        if r.tape_uid != self.tape_uid {
            return None;
        }
        self.grads.get(r.node).and_then(|g| g.clone())
    }
}

/// A recording of tensor ops plus their values. One tape per training step;
/// drop it to free the graph.
pub struct Tape {
    uid: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            uid: TAPE_UID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, shape: &[usize], data: Vec<f64>, needs_grad: bool) -> Result<Tensor, NumericsError> {
        let mut value = Tensor::from_vec(shape, data)?;
        value.tape = Some(TapeRef {
            tape_uid: self.uid,
            node: self.nodes.len(),
        });
        self.nodes.push(Node {
            op,
            value: value.clone(),
            needs_grad,
        });
        Ok(value)
    }

    fn resolve(&self, t: &Tensor, op: &'static str) -> Result<usize, NumericsError> {
        match t.tape {
            Some(r) if r.tape_uid == self.uid => Ok(r.node),
            Some(_) => Err(NumericsError::TapeMismatch { op }),
            None => Err(NumericsError::Detached { op }),
        }
    }

    fn value(&self, node: usize) -> &Tensor {
        &self.nodes[node].value
    }

    fn needs(&self, node: usize) -> bool {
        self.nodes[node].needs_grad
    }

    /// Record a differentiable leaf (a trainable parameter or an input whose
    /// gradient will be queried, e.g. for gradient penalties).
    pub fn var(&mut self, t: &Tensor) -> Tensor {
        self.push(Op::Leaf, t.shape(), t.data().to_vec(), true)
            .expect("leaf shapes are consistent by construction")
    }

    /// Record a non-differentiable leaf. Gradient never flows into it.
    pub fn constant(&mut self, t: &Tensor) -> Tensor {
        self.push(Op::Leaf, t.shape(), t.data().to_vec(), false)
            .expect("leaf shapes are consistent by construction")
    }

    fn binary_elementwise(
        &mut self,
        a: &Tensor,
        b: &Tensor,
        op_name: &'static str,
        make: impl Fn(usize, usize) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, NumericsError> {
        let ia = self.resolve(a, op_name)?;
        let ib = self.resolve(b, op_name)?;
        if a.shape() != b.shape() {
            return Err(NumericsError::ShapeMismatch {
                op: op_name,
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let data = a
            .data()
            .iter()
            .zip(b.data().iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let needs = self.needs(ia) || self.needs(ib);
        self.push(make(ia, ib), a.shape(), data, needs)
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
        self.binary_elementwise(a, b, "add", Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
        self.binary_elementwise(a, b, "sub", Op::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
        self.binary_elementwise(a, b, "mul", Op::Mul, |x, y| x * y)
    }

    pub fn div(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
        self.binary_elementwise(a, b, "div", Op::Div, |x, y| x / y)
    }

    /// y = mul * x + add (elementwise, constants).
    pub fn affine(&mut self, x: &Tensor, mul: f64, add: f64) -> Result<Tensor, NumericsError> {
        let ix = self.resolve(x, "affine")?;
        let data = x.data().iter().map(|&v| mul * v + add).collect();
        let needs = self.needs(ix);
        self.push(Op::Affine { x: ix, mul }, x.shape(), data, needs)
    }

    pub fn scale(&mut self, x: &Tensor, c: f64) -> Result<Tensor, NumericsError> {
        self.affine(x, c, 0.0)
    }

    pub fn neg(&mut self, x: &Tensor) -> Result<Tensor, NumericsError> {
        self.affine(x, -1.0, 0.0)
    }

    pub fn matmul_nn(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
        let ia = self.resolve(a, "matmul_nn")?;
        let ib = self.resolve(b, "matmul_nn")?;
        let (m, k) = as_matrix_dims(a, "matmul_nn")?;
        let (k2, n) = as_matrix_dims(b, "matmul_nn")?;
        if k != k2 {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul_nn",
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let data = kernels::matmul_nn(a.data(), b.data(), m, k, n);
        let needs = self.needs(ia) || self.needs(ib);
        self.push(Op::MatmulNN(ia, ib), &[m, n], data, needs)
    }

    /// a (m x k) times b^T where b is (n x k).
    pub fn matmul_nt(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
        let ia = self.resolve(a, "matmul_nt")?;
        let ib = self.resolve(b, "matmul_nt")?;
        let (m, k) = as_matrix_dims(a, "matmul_nt")?;
        let (n, k2) = as_matrix_dims(b, "matmul_nt")?;
        if k != k2 {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul_nt",
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let data = kernels::matmul_nt(a.data(), b.data(), m, k, n);
        let needs = self.needs(ia) || self.needs(ib);
        self.push(Op::MatmulNT(ia, ib), &[m, n], data, needs)
    }

    /// a^T times b where a is (m x k1), b is (m x k2).
    pub fn matmul_tn(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
        let ia = self.resolve(a, "matmul_tn")?;
        let ib = self.resolve(b, "matmul_tn")?;
        let (m, k1) = as_matrix_dims(a, "matmul_tn")?;
        let (m2, k2) = as_matrix_dims(b, "matmul_tn")?;
        if m != m2 {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul_tn",
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let data = kernels::matmul_tn(a.data(), b.data(), m, k1, k2);
        let needs = self.needs(ia) || self.needs(ib);
        self.push(Op::MatmulTN(ia, ib), &[k1, k2], data, needs)
    }

    /// Broadcast-add a `[d]` bias over the rows of `[n, d]`.
    pub fn add_bias(&mut self, x: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
        let ix = self.resolve(x, "add_bias")?;
        let ib = self.resolve(b, "add_bias")?;
        let (_, d) = as_matrix_dims(x, "add_bias")?;
        if b.shape() != [d] {
            return Err(NumericsError::ShapeMismatch {
                op: "add_bias",
                left: x.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let mut data = x.data().to_vec();
        for row in data.chunks_exact_mut(d) {
            for (o, &bv) in row.iter_mut().zip(b.data().iter()) {
                *o += bv;
            }
        }
        let needs = self.needs(ix) || self.needs(ib);
        self.push(Op::AddBias { x: ix, b: ib }, x.shape(), data, needs)
    }

    /// Column sums: [n, d] -> [d].
    pub fn sum_rows(&mut self, x: &Tensor) -> Result<Tensor, NumericsError> {
        let ix = self.resolve(x, "sum_rows")?;
        let (_, d) = as_matrix_dims(x, "sum_rows")?;
        let mut out = vec![0.0; d];
        for row in x.data().chunks_exact(d) {
            for (o, &v) in out.iter_mut().zip(row.iter()) {
                *o += v;
            }
        }
        let needs = self.needs(ix);
        self.push(Op::SumRows(ix), &[d], out, needs)
    }

    /// Row sums: [n, d] -> [n].
    pub fn sum_cols(&mut self, x: &Tensor) -> Result<Tensor, NumericsError> {
        let ix = self.resolve(x, "sum_cols")?;
        let (n, d) = as_matrix_dims(x, "sum_cols")?;
        let mut out = Vec::with_capacity(n);
        for row in x.data().chunks_exact(d) {
            out.push(kernels::sum(row));
        }
        let needs = self.needs(ix);
        self.push(Op::SumCols(ix), &[n], out, needs)
    }

    /// Repeat a `[d]` vector as n rows: -> [n, d].
    pub fn bcast_rows(&mut self, b: &Tensor, n: usize) -> Result<Tensor, NumericsError> {
        let ib = self.resolve(b, "bcast_rows")?;
        if b.shape().len() != 1 {
            return Err(NumericsError::InvalidShape {
                op: "bcast_rows",
                shape: b.shape().to_vec(),
                reason: "expected rank-1 tensor",
            });
        }
        let d = b.shape()[0];
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            data.extend_from_slice(b.data());
        }
        let needs = self.needs(ib);
        self.push(Op::BcastRows { b: ib }, &[n, d], data, needs)
    }

    /// Repeat a `[n]` vector across d columns: -> [n, d].
    pub fn bcast_cols(&mut self, v: &Tensor, d: usize) -> Result<Tensor, NumericsError> {
        let iv = self.resolve(v, "bcast_cols")?;
        if v.shape().len() != 1 {
            return Err(NumericsError::InvalidShape {
                op: "bcast_cols",
                shape: v.shape().to_vec(),
                reason: "expected rank-1 tensor",
            });
        }
        let n = v.shape()[0];
        let mut data = Vec::with_capacity(n * d);
        for &val in v.data() {
            data.extend(std::iter::repeat(val).take(d));
        }
        let needs = self.needs(iv);
        self.push(Op::BcastCols { v: iv }, &[n, d], data, needs)
    }

    /// Sum of all elements -> scalar.
    pub fn sum_all(&mut self, x: &Tensor) -> Result<Tensor, NumericsError> {
        let ix = self.resolve(x, "sum_all")?;
        let s = kernels::sum(x.data());
        let needs = self.needs(ix);
        self.push(Op::SumAll(ix), &[], vec![s], needs)
    }

    /// Mean of all elements -> scalar.
    pub fn mean_all(&mut self, x: &Tensor) -> Result<Tensor, NumericsError> {
        if x.numel() == 0 {
            return Err(NumericsError::InvalidShape {
                op: "mean_all",
                shape: x.shape().to_vec(),
                reason: "mean of an empty tensor",
            });
        }
        let n = x.numel() as f64;
        let s = self.sum_all(x)?;
        self.scale(&s, 1.0 / n)
    }

    /// Broadcast a scalar to an arbitrary shape.
    pub fn expand_scalar(&mut self, s: &Tensor, shape: &[usize]) -> Result<Tensor, NumericsError> {
        let is = self.resolve(s, "expand_scalar")?;
        if !s.is_scalar() {
            return Err(NumericsError::NotScalar {
                op: "expand_scalar",
                shape: s.shape().to_vec(),
            });
        }
        let n: usize = shape.iter().product();
        let data = vec![s.data()[0]; n];
        let needs = self.needs(is);
        self.push(Op::ExpandScalar { s: is }, shape, data, needs)
    }

    fn unary(
        &mut self,
        x: &Tensor,
        op_name: &'static str,
        make: impl Fn(usize) -> Op,
        f: impl Fn(f64) -> f64,
    ) -> Result<Tensor, NumericsError> {
        let ix = self.resolve(x, op_name)?;
        let data = x.data().iter().map(|&v| f(v)).collect();
        let needs = self.needs(ix);
        self.push(make(ix), x.shape(), data, needs)
    }

    pub fn relu(&mut self, x: &Tensor) -> Result<Tensor, NumericsError> {
        self.unary(x, "relu", Op::Relu, |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn leaky_relu(&mut self, x: &Tensor, slope: f64) -> Result<Tensor, NumericsError> {
        self.unary(x, "leaky_relu", |i| Op::LeakyRelu { x: i, slope }, |v| {
            if v > 0.0 {
                v
            } else {
                slope * v
            }
        })
    }

    pub fn tanh(&mut self, x: &Tensor) -> Result<Tensor, NumericsError> {
        self.unary(x, "tanh", Op::Tanh, f64::tanh)
    }

    pub fn sigmoid(&mut self, x: &Tensor) -> Result<Tensor, NumericsError> {
        self.unary(x, "sigmoid", Op::Sigmoid, sigmoid_stable)
    }

    pub fn softplus(&mut self, x: &Tensor) -> Result<Tensor, NumericsError> {
        self.unary(x, "softplus", Op::Softplus, softplus_stable)
    }

    pub fn exp(&mut self, x: &Tensor) -> Result<Tensor, NumericsError> {
        self.unary(x, "exp", Op::Exp, f64::exp)
    }

    pub fn log(&mut self, x: &Tensor) -> Result<Tensor, NumericsError> {
        if let Some(&bad) = x.data().iter().find(|v| **v <= 0.0) {
            return Err(NumericsError::Domain { op: "log", value: bad });
        }
        self.unary(x, "log", Op::Log, f64::ln)
    }

    pub fn sqrt(&mut self, x: &Tensor) -> Result<Tensor, NumericsError> {
        if let Some(&bad) = x.data().iter().find(|v| **v < 0.0) {
            return Err(NumericsError::Domain { op: "sqrt", value: bad });
        }
        self.unary(x, "sqrt", Op::Sqrt, f64::sqrt)
    }

    pub fn reshape(&mut self, x: &Tensor, shape: &[usize]) -> Result<Tensor, NumericsError> {
        let ix = self.resolve(x, "reshape")?;
        let expected: usize = shape.iter().product();
        if expected != x.numel() {
            return Err(NumericsError::LengthMismatch {
                expected,
                actual: x.numel(),
            });
        }
        let needs = self.needs(ix);
        self.push(Op::Reshape(ix), shape, x.data().to_vec(), needs)
    }

    /// Sum of squared elements -> scalar. Convenience composite.
    pub fn l2_norm_squared(&mut self, x: &Tensor) -> Result<Tensor, NumericsError> {
        let sq = self.mul(x, x)?;
        self.sum_all(&sq)
    }

    /// Mean over rows of the per-row Euclidean norm of `[n, d]`.
    pub fn mean_row_norm(&mut self, x: &Tensor) -> Result<Tensor, NumericsError> {
        let (n, _) = as_matrix_dims(x, "mean_row_norm")?;
        let sq = self.mul(x, x)?;
        let rows = self.sum_cols(&sq)?;
        let norms = self.sqrt(&rows)?;
        let total = self.sum_all(&norms)?;
        self.scale(&total, 1.0 / n as f64)
    }

    /// Reverse-mode sweep from a scalar `loss`. Returns gradients for every
    /// node the loss depends on (constants excluded). The VJPs are recorded
    /// on the tape, so gradients can be differentiated again.
    pub fn backward(&mut self, loss: &Tensor) -> Result<Gradients, NumericsError> {
        let root = self.resolve(loss, "backward")?;
        if !loss.is_scalar() {
            return Err(NumericsError::NotScalar {
                op: "backward",
                shape: loss.shape().to_vec(),
            });
        }
        let mut adjoints: Vec<Option<Tensor>> = vec![None; root + 1];
        let seed = self.constant(&Tensor::scalar(1.0));
        adjoints[root] = Some(seed);

        for id in (0..=root).rev() {
            let Some(g) = adjoints[id].clone() else { continue };
            if !self.nodes[id].needs_grad {
                continue;
            }
            let op = self.nodes[id].op.clone();
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.accumulate(&mut adjoints, a, g.clone())?;
                    self.accumulate(&mut adjoints, b, g)?;
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut adjoints, a, g.clone())?;
                    if self.needs(b) {
                        let neg = self.neg(&g)?;
                        self.accumulate(&mut adjoints, b, neg)?;
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(a) {
                        let vb = self.value(b).clone();
                        let da = self.mul(&g, &vb)?;
                        self.accumulate(&mut adjoints, a, da)?;
                    }
                    if self.needs(b) {
                        let va = self.value(a).clone();
                        let db = self.mul(&g, &va)?;
                        self.accumulate(&mut adjoints, b, db)?;
                    }
                }
                Op::Div(a, b) => {
                    // y = a / b: da = g / b, db = -g * y / b
                    let vb = self.value(b).clone();
                    if self.needs(a) {
                        let da = self.div(&g, &vb)?;
                        self.accumulate(&mut adjoints, a, da)?;
                    }
                    if self.needs(b) {
                        let vy = self.value(id).clone();
                        let gy = self.mul(&g, &vy)?;
                        let q = self.div(&gy, &vb)?;
                        let db = self.neg(&q)?;
                        self.accumulate(&mut adjoints, b, db)?;
                    }
                }
                Op::Affine { x, mul } => {
                    if self.needs(x) {
                        let dx = self.scale(&g, mul)?;
                        self.accumulate(&mut adjoints, x, dx)?;
                    }
                }
                Op::MatmulNN(a, b) => {
                    // C = A B: dA = dC B^T, dB = A^T dC
                    if self.needs(a) {
                        let vb = self.value(b).clone();
                        let da = self.matmul_nt(&g, &vb)?;
                        self.accumulate(&mut adjoints, a, da)?;
                    }
                    if self.needs(b) {
                        let va = self.value(a).clone();
                        let db = self.matmul_tn(&va, &g)?;
                        self.accumulate(&mut adjoints, b, db)?;
                    }
                }
                Op::MatmulNT(a, b) => {
                    // C = A B^T: dA = dC B, dB = dC^T A
                    if self.needs(a) {
                        let vb = self.value(b).clone();
                        let da = self.matmul_nn(&g, &vb)?;
                        self.accumulate(&mut adjoints, a, da)?;
                    }
                    if self.needs(b) {
                        let va = self.value(a).clone();
                        let db = self.matmul_tn(&g, &va)?;
                        self.accumulate(&mut adjoints, b, db)?;
                    }
                }
                Op::MatmulTN(a, b) => {
                    // C = A^T B: dA = B dC^T, dB = A dC
                    if self.needs(a) {
                        let vb = self.value(b).clone();
                        let da = self.matmul_nt(&vb, &g)?;
                        self.accumulate(&mut adjoints, a, da)?;
                    }
                    if self.needs(b) {
                        let va = self.value(a).clone();
                        let db = self.matmul_nn(&va, &g)?;
                        self.accumulate(&mut adjoints, b, db)?;
                    }
                }
                Op::AddBias { x, b } => {
                    self.accumulate(&mut adjoints, x, g.clone())?;
                    if self.needs(b) {
                        let db = self.sum_rows(&g)?;
                        self.accumulate(&mut adjoints, b, db)?;
                    }
                }
                Op::SumRows(x) => {
                    if self.needs(x) {
                        let n = self.value(x).shape()[0];
                        let dx = self.bcast_rows(&g, n)?;
                        self.accumulate(&mut adjoints, x, dx)?;
                    }
                }
                Op::SumCols(x) => {
                    if self.needs(x) {
                        let d = self.value(x).shape()[1];
                        let dx = self.bcast_cols(&g, d)?;
                        self.accumulate(&mut adjoints, x, dx)?;
                    }
                }
                Op::BcastRows { b } => {
                    if self.needs(b) {
                        let db = self.sum_rows(&g)?;
                        self.accumulate(&mut adjoints, b, db)?;
                    }
                }
                Op::BcastCols { v } => {
                    if self.needs(v) {
                        let dv = self.sum_cols(&g)?;
                        self.accumulate(&mut adjoints, v, dv)?;
                    }
                }
                Op::SumAll(x) => {
                    if self.needs(x) {
                        let shape = self.value(x).shape().to_vec();
                        let dx = self.expand_scalar(&g, &shape)?;
                        self.accumulate(&mut adjoints, x, dx)?;
                    }
                }
                Op::ExpandScalar { s } => {
                    if self.needs(s) {
                        let ds = self.sum_all(&g)?;
                        self.accumulate(&mut adjoints, s, ds)?;
                    }
                }
                Op::Relu(x) => {
                    if self.needs(x) {
                        let mask = self.value(x).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                        let mask = self.constant(&mask);
                        let dx = self.mul(&g, &mask)?;
                        self.accumulate(&mut adjoints, x, dx)?;
                    }
                }
                Op::LeakyRelu { x, slope } => {
                    // The mask is constant between sign changes, so its own
                    // derivative is zero a.e. — entering it as a constant is
                    // exactly the right second-order behaviour.
                    if self.needs(x) {
                        let mask = self.value(x).map(|v| if v > 0.0 { 1.0 } else { slope });
                        let mask = self.constant(&mask);
                        let dx = self.mul(&g, &mask)?;
                        self.accumulate(&mut adjoints, x, dx)?;
                    }
                }
                Op::Tanh(x) => {
                    if self.needs(x) {
                        // d tanh = 1 - y^2, built from the (differentiable) output.
                        let y = self.value(id).clone();
                        let y2 = self.mul(&y, &y)?;
                        let one_minus = self.affine(&y2, -1.0, 1.0)?;
                        let dx = self.mul(&g, &one_minus)?;
                        self.accumulate(&mut adjoints, x, dx)?;
                    }
                }
                Op::Sigmoid(x) => {
                    if self.needs(x) {
                        // d sigma = y (1 - y)
                        let y = self.value(id).clone();
                        let one_minus = self.affine(&y, -1.0, 1.0)?;
                        let yy = self.mul(&y, &one_minus)?;
                        let dx = self.mul(&g, &yy)?;
                        self.accumulate(&mut adjoints, x, dx)?;
                    }
                }
                Op::Softplus(x) => {
                    if self.needs(x) {
                        // d softplus = sigmoid(x); re-taped so it stays differentiable.
                        let vx = self.value(x).clone();
                        let s = self.sigmoid(&vx)?;
                        let dx = self.mul(&g, &s)?;
                        self.accumulate(&mut adjoints, x, dx)?;
                    }
                }
                Op::Exp(x) => {
                    if self.needs(x) {
                        let y = self.value(id).clone();
                        let dx = self.mul(&g, &y)?;
                        self.accumulate(&mut adjoints, x, dx)?;
                    }
                }
                Op::Log(x) => {
                    if self.needs(x) {
                        let vx = self.value(x).clone();
                        let dx = self.div(&g, &vx)?;
                        self.accumulate(&mut adjoints, x, dx)?;
                    }
                }
                Op::Sqrt(x) => {
                    if self.needs(x) {
                        // d sqrt = 1 / (2 y)
                        let y = self.value(id).clone();
                        let two_y = self.scale(&y, 2.0)?;
                        let dx = self.div(&g, &two_y)?;
                        self.accumulate(&mut adjoints, x, dx)?;
                    }
                }
                Op::Reshape(x) => {
                    if self.needs(x) {
                        let shape = self.value(x).shape().to_vec();
                        let dx = self.reshape(&g, &shape)?;
                        self.accumulate(&mut adjoints, x, dx)?;
                    }
                }
            }
        }

        Ok(Gradients {
            tape_uid: self.uid,
            grads: adjoints,
        })
    }

    fn accumulate(
        &mut self,
        adjoints: &mut [Option<Tensor>],
        node: usize,
        contrib: Tensor,
    ) -> Result<(), NumericsError> {
        if !self.nodes[node].needs_grad {
            return Ok(());
        }
        adjoints[node] = Some(match adjoints[node].take() {
            Some(existing) => self.add(&existing, &contrib)?,
            None => contrib,
        });
        Ok(())
    }
}

fn sigmoid_stable(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus_stable(x: f64) -> f64 {
    // ln(1 + e^x) = max(x, 0) + ln(1 + e^-|x|)
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn add_and_mul_gradients() {
        // loss = sum(a * b + a) => dl/da = b + 1, dl/db = a
        let mut tape = Tape::new();
        let a = tape.var(&Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        let b = tape.var(&Tensor::from_vec(&[3], vec![4.0, 5.0, 6.0]).unwrap());
        let prod = tape.mul(&a, &b).unwrap();
        let s = tape.add(&prod, &a).unwrap();
        let loss = tape.sum_all(&s).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.wrt(&a).unwrap().data(), &[5.0, 6.0, 7.0]);
        assert_eq!(grads.wrt(&b).unwrap().data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn matmul_gradient_matches_hand_derivation() {
        // loss = sum(A B); dA = ones * B^T, dB = A^T * ones
        let mut tape = Tape::new();
        let a = tape.var(&Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.var(&Tensor::from_vec(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap());
        let c = tape.matmul_nn(&a, &b).unwrap();
        let loss = tape.sum_all(&c).unwrap();
        let grads = tape.backward(&loss).unwrap();
        // row sums of B^T = column... dA[i,l] = sum_j B[l,j]
        assert_eq!(grads.wrt(&a).unwrap().data(), &[11.0, 15.0, 11.0, 15.0]);
        // dB[l,j] = sum_i A[i,l]
        assert_eq!(grads.wrt(&b).unwrap().data(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn constant_subtrees_get_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.var(&Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
        let c = tape.constant(&Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap());
        let p = tape.mul(&a, &c).unwrap();
        let loss = tape.sum_all(&p).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.wrt(&a).unwrap().data(), &[3.0, 4.0]);
        assert!(grads.wrt(&c).is_none());
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let a = tape.var(&Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
        let err = tape.backward(&a).unwrap_err();
        assert!(matches!(err, NumericsError::NotScalar { .. }));
    }

    #[test]
    fn detached_tensor_is_rejected() {
        let mut tape = Tape::new();
        let loose = Tensor::scalar(1.0);
        assert!(matches!(
            tape.sum_all(&loose).unwrap_err(),
            NumericsError::Detached { .. }
        ));
    }

    #[test]
    fn tensors_cannot_cross_tapes() {
        let mut t1 = Tape::new();
        let mut t2 = Tape::new();
        let a = t1.var(&Tensor::scalar(1.0));
        assert!(matches!(
            t2.sum_all(&a).unwrap_err(),
            NumericsError::TapeMismatch { .. }
        ));
    }

    /// Central finite difference of a scalar function of a single tensor.
    fn finite_diff(
        f: &mut dyn FnMut(&Tensor) -> f64,
        x: &Tensor,
        h: f64,
    ) -> Vec<f64> {
        let mut grad = vec![0.0; x.numel()];
        for i in 0..x.numel() {
            let mut plus = x.data().to_vec();
            plus[i] += h;
            let mut minus = x.data().to_vec();
            minus[i] -= h;
            let fp = f(&Tensor::from_vec(x.shape(), plus).unwrap());
            let fm = f(&Tensor::from_vec(x.shape(), minus).unwrap());
            grad[i] = (fp - fm) / (2.0 * h);
        }
        grad
    }

    #[test]
    fn every_unary_op_matches_finite_differences() {
        type TapeFn = fn(&mut Tape, &Tensor) -> Result<Tensor, NumericsError>;
        let cases: Vec<(&str, TapeFn)> = vec![
            ("relu", |t, x| t.relu(x)),
            ("leaky_relu", |t, x| t.leaky_relu(x, 0.2)),
            ("tanh", |t, x| t.tanh(x)),
            ("sigmoid", |t, x| t.sigmoid(x)),
            ("softplus", |t, x| t.softplus(x)),
            ("exp", |t, x| t.exp(x)),
            ("log", |t, x| t.log(x)),
            ("sqrt", |t, x| t.sqrt(x)),
        ];
        let mut rng = Rng::from_seed(31);
        for (name, op) in cases {
            for trial in 0..8 {
                let positive_only = matches!(name, "log" | "sqrt");
                let data: Vec<f64> = (0..6)
                    .map(|_| {
                        if positive_only {
                            rng.uniform(0.3, 2.5)
                        } else {
                            rng.uniform(-1.5, 1.5)
                        }
                    })
                    .collect();
                let x = Tensor::from_vec(&[6], data).unwrap();
                let mut tape = Tape::new();
                let xv = tape.var(&x);
                let y = op(&mut tape, &xv).unwrap();
                let loss = tape.sum_all(&y).unwrap();
                let grads = tape.backward(&loss).unwrap();
                let got = grads.wrt(&xv).unwrap();
                let fd = finite_diff(
                    &mut |xt: &Tensor| {
                        let mut t = Tape::new();
                        let xv = t.var(xt);
                        let y = op(&mut t, &xv).unwrap();
                        t.sum_all(&y).unwrap().item().unwrap()
                    },
                    &x,
                    1e-6,
                );
                for (g, f) in got.data().iter().zip(fd.iter()) {
                    assert_close(*g, *f, 1e-5 * (1.0 + f.abs()));
                }
                let _ = trial;
            }
        }
    }

    #[test]
    fn gradient_of_gradient_linear_map() {
        // y = a . x, loss = ||dy/dx||^2 = ||a||^2, so dloss/da = 2 a and
        // dloss/dx = 0. Exercises backward-through-backward.
        let mut tape = Tape::new();
        let a_val = Tensor::from_vec(&[1, 4], vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        let x_val = Tensor::from_vec(&[1, 4], vec![1.0, 1.0, -3.0, 2.0]).unwrap();
        let a = tape.var(&a_val);
        let x = tape.var(&x_val);
        let prod = tape.mul(&a, &x).unwrap();
        let y = tape.sum_all(&prod).unwrap();
        let g1 = tape.backward(&y).unwrap();
        let gx = g1.wrt(&x).unwrap();
        let loss = tape.l2_norm_squared(&gx).unwrap();
        let g2 = tape.backward(&loss).unwrap();
        let da = g2.wrt(&a).unwrap();
        for (d, av) in da.data().iter().zip(a_val.data().iter()) {
            assert_close(*d, 2.0 * av, 1e-12);
        }
        // x only enters through the (constant-in-x) gradient a, so no grad flows.
        let dx = g2.wrt(&x);
        if let Some(dx) = dx {
            for d in dx.data() {
                assert_close(*d, 0.0, 1e-12);
            }
        }
    }

    #[test]
    fn second_derivative_of_tanh_network() {
        // f(x) = sum(tanh(W x)); p = ||df/dx||^2. Check dp/dW against
        // finite differences of p — the double-backward path the gradient
        // penalty uses, with a nonlinearity in the loop.
        let mut rng = Rng::from_seed(77);
        let w_val = Tensor::from_vec(&[3, 3], rng.gaussian_vec(9)).unwrap();
        let x_val = Tensor::from_vec(&[1, 3], rng.gaussian_vec(3)).unwrap();

        let penalty = |w: &Tensor, x: &Tensor| -> (f64, Option<Vec<f64>>) {
            let mut tape = Tape::new();
            let wv = tape.var(w);
            let xv = tape.var(x);
            let h = tape.matmul_nt(&xv, &wv).unwrap();
            let y = tape.tanh(&h).unwrap();
            let f = tape.sum_all(&y).unwrap();
            let g1 = tape.backward(&f).unwrap();
            let gx = g1.wrt(&xv).unwrap();
            let p = tape.l2_norm_squared(&gx).unwrap();
            let pv = p.item().unwrap();
            let g2 = tape.backward(&p).unwrap();
            let dw = g2.wrt(&wv).map(|t| t.data().to_vec());
            (pv, dw)
        };

        let (_, dw) = penalty(&w_val, &x_val);
        let dw = dw.expect("gradient should flow to W");
        let h = 1e-5;
        for i in 0..9 {
            let mut plus = w_val.data().to_vec();
            plus[i] += h;
            let mut minus = w_val.data().to_vec();
            minus[i] -= h;
            let (pp, _) = penalty(&Tensor::from_vec(&[3, 3], plus).unwrap(), &x_val);
            let (pm, _) = penalty(&Tensor::from_vec(&[3, 3], minus).unwrap(), &x_val);
            let fd = (pp - pm) / (2.0 * h);
            assert_close(dw[i], fd, 1e-5 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn every_reachable_node_gradient_has_matching_shape() {
        let mut tape = Tape::new();
        let a = tape.var(&Tensor::from_vec(&[2, 3], vec![0.1; 6]).unwrap());
        let b = tape.var(&Tensor::from_vec(&[3], vec![0.2; 3]).unwrap());
        let h = tape.add_bias(&a, &b).unwrap();
        let act = tape.tanh(&h).unwrap();
        let rows = tape.sum_cols(&act).unwrap();
        let norms = tape.sqrt(&rows).unwrap();
        let loss = tape.mean_all(&norms).unwrap();
        let grads = tape.backward(&loss).unwrap();
        for t in [&a, &b, &h, &act, &rows, &norms] {
            let g = grads.wrt(t).expect("reachable node must have a gradient");
            assert_eq!(g.shape(), t.shape());
        }
    }

    #[test]
    fn div_gradients() {
        // loss = sum(a/b): da = 1/b, db = -a/b^2
        let mut tape = Tape::new();
        let a = tape.var(&Tensor::from_vec(&[2], vec![1.0, 4.0]).unwrap());
        let b = tape.var(&Tensor::from_vec(&[2], vec![2.0, 8.0]).unwrap());
        let q = tape.div(&a, &b).unwrap();
        let loss = tape.sum_all(&q).unwrap();
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.wrt(&a).unwrap().data(), &[0.5, 0.125]);
        assert_eq!(g.wrt(&b).unwrap().data(), &[-0.25, -0.0625]);
    }

    #[test]
    fn softplus_matches_reference_values() {
        assert_close(softplus_stable(0.0), std::f64::consts::LN_2, 1e-15);
        assert_close(softplus_stable(50.0), 50.0, 1e-12);
        assert_close(softplus_stable(-50.0), (-50.0f64).exp(), 1e-15);
        assert_close(sigmoid_stable(0.0), 0.5, 1e-15);
        assert_close(sigmoid_stable(700.0), 1.0, 1e-15);
        assert!(sigmoid_stable(-700.0) > 0.0);
    }
}
