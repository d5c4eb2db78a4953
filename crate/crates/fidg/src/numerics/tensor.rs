//! Dense row-major `f64` tensors and the raw kernels behind both the plain
//! (value-level) ops and the tape ops.
//!
//! A `Tensor` optionally remembers the tape node that produced it; plain ops
//! on `Tensor` always return detached values. Gradient-carrying computation
//! goes through [`crate::numerics::Tape`], which reuses the same kernels.

use std::sync::Arc;

use super::NumericsError;

/// Handle tying a tensor to a node on a tape. `tape_uid` guards against
/// mixing tensors across tapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TapeRef {
    pub(crate) tape_uid: u64,
    pub(crate) node: usize,
}

/// Dense row-major tensor. Cloning is cheap (shared data).
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    pub(crate) tape: Option<TapeRef>,
}

impl Tensor {
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor, NumericsError> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(NumericsError::LengthMismatch {
                expected,
                actual: data.len(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
            tape: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![0.0; n]),
            tape: None,
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![value; n]),
            tape: None,
        }
    }

    /// Rank-0 scalar.
    pub fn scalar(value: f64) -> Tensor {
        Tensor {
            shape: vec![],
            data: Arc::new(vec![value]),
            tape: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<f64, NumericsError> {
        if self.data.len() != 1 {
            return Err(NumericsError::NotScalar {
                op: "item",
                shape: self.shape.clone(),
            });
        }
        Ok(self.data[0])
    }

    /// Detached copy of this tensor's value (drops tape history).
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            tape: None,
        }
    }

    /// Same data viewed under a new shape; detached.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor, NumericsError> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(NumericsError::LengthMismatch {
                expected,
                actual: self.data.len(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
            tape: None,
        })
    }

    /// Rows `lo..hi` of a rank-2 tensor, as a fresh detached tensor.
    pub fn slice_rows(&self, lo: usize, hi: usize) -> Result<Tensor, NumericsError> {
        if self.shape.len() != 2 || hi < lo || hi > self.shape[0] {
            return Err(NumericsError::InvalidShape {
                op: "slice_rows",
                shape: self.shape.clone(),
                reason: "expected rank-2 tensor and a valid row range",
            });
        }
        let d = self.shape[1];
        Tensor::from_vec(&[hi - lo, d], self.data[lo * d..hi * d].to_vec())
    }

    /// Gather rows of a rank-2 tensor by index.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Tensor, NumericsError> {
        if self.shape.len() != 2 {
            return Err(NumericsError::InvalidShape {
                op: "gather_rows",
                shape: self.shape.clone(),
                reason: "expected rank-2 tensor",
            });
        }
        let d = self.shape[1];
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= self.shape[0] {
                return Err(NumericsError::InvalidShape {
                    op: "gather_rows",
                    shape: self.shape.clone(),
                    reason: "row index out of range",
                });
            }
            out.extend_from_slice(&self.data[i * d..(i + 1) * d]);
        }
        Tensor::from_vec(&[idx.len(), d], out)
    }

    fn same_shape(&self, rhs: &Tensor, op: &'static str) -> Result<(), NumericsError> {
        if self.shape != rhs.shape {
            return Err(NumericsError::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: rhs.shape.clone(),
            });
        }
        Ok(())
    }

    fn zip(&self, rhs: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, NumericsError> {
        self.same_shape(rhs, op)?;
        let data = self
            .data
            .iter()
            .zip(rhs.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Tensor::from_vec(&self.shape, data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        let data: Vec<f64> = self.data.iter().map(|&a| f(a)).collect();
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(data),
            tape: None,
        }
    }

    // Plain value-level arithmetic. All of these return detached tensors.

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor, NumericsError> {
        self.zip(rhs, "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor, NumericsError> {
        self.zip(rhs, "sub", |a, b| a - b)
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor, NumericsError> {
        self.zip(rhs, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|a| a * c)
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor, NumericsError> {
        let (m, k) = as_matrix_dims(self, "matmul")?;
        let (k2, n) = as_matrix_dims(rhs, "matmul")?;
        if k != k2 {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                left: self.shape.clone(),
                right: rhs.shape.clone(),
            });
        }
        let out = kernels::matmul_nn(&self.data, &rhs.data, m, k, n);
        Tensor::from_vec(&[m, n], out)
    }

    /// Broadcast-add a `[d]` bias across the rows of an `[n, d]` tensor.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor, NumericsError> {
        let (n, d) = as_matrix_dims(self, "add_bias")?;
        if bias.shape != [d] {
            return Err(NumericsError::ShapeMismatch {
                op: "add_bias",
                left: self.shape.clone(),
                right: bias.shape.clone(),
            });
        }
        let mut out = self.data.as_ref().clone();
        for row in out.chunks_exact_mut(d) {
            for (o, &b) in row.iter_mut().zip(bias.data.iter()) {
                *o += b;
            }
        }
        let _ = n;
        Tensor::from_vec(&self.shape, out)
    }

    pub fn sum(&self) -> f64 {
        kernels::sum(&self.data)
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.sum() / self.data.len() as f64
    }

    pub fn l2_norm_squared(&self) -> f64 {
        self.data.iter().map(|&a| a * a).sum()
    }

    /// True if every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|a| a.is_finite())
    }
}

pub(crate) fn as_matrix_dims(t: &Tensor, op: &'static str) -> Result<(usize, usize), NumericsError> {
    if t.shape().len() != 2 {
        return Err(NumericsError::InvalidShape {
            op,
            shape: t.shape().to_vec(),
            reason: "expected rank-2 tensor",
        });
    }
    Ok((t.shape()[0], t.shape()[1]))
}

/// Raw kernels shared by plain ops and tape ops. Loop orders are fixed so
/// floating-point results are reproducible run to run.
pub(crate) mod kernels {
    /// C = A (m x k) * B (k x n).
    pub fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for (i, c_row) in c.chunks_exact_mut(n).enumerate() {
            let a_row = &a[i * k..(i + 1) * k];
            for (l, &a_il) in a_row.iter().enumerate() {
                let b_row = &b[l * n..(l + 1) * n];
                for (cv, &bv) in c_row.iter_mut().zip(b_row.iter()) {
                    *cv += a_il * bv;
                }
            }
        }
        c
    }

    /// Dot product with eight independent accumulators (fixed lane order, so
    /// results stay reproducible) to break the serial-add dependency chain.
    fn dot(a: &[f64], b: &[f64]) -> f64 {
        const LANES: usize = 8;
        let mut acc = [0.0f64; LANES];
        let mut ca = a.chunks_exact(LANES);
        let mut cb = b.chunks_exact(LANES);
        for (xa, xb) in ca.by_ref().zip(cb.by_ref()) {
            for l in 0..LANES {
                acc[l] += xa[l] * xb[l];
            }
        }
        let mut tail = 0.0;
        for (&xa, &xb) in ca.remainder().iter().zip(cb.remainder().iter()) {
            tail += xa * xb;
        }
        let mut total = 0.0;
        for &lane in &acc {
            total += lane;
        }
        total + tail
    }

    /// C = A (m x k) * B^T where B is (n x k).
    pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &a[i * k..(i + 1) * k];
            let c_row = &mut c[i * n..(i + 1) * n];
            for (j, cv) in c_row.iter_mut().enumerate() {
                let b_row = &b[j * k..(j + 1) * k];
                *cv = dot(a_row, b_row);
            }
        }
        c
    }

    /// C = A^T * B where A is (m x k1), B is (m x k2); result (k1 x k2).
    pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k1: usize, k2: usize) -> Vec<f64> {
        let mut c = vec![0.0; k1 * k2];
        for i in 0..m {
            let a_row = &a[i * k1..(i + 1) * k1];
            let b_row = &b[i * k2..(i + 1) * k2];
            for (l, &av) in a_row.iter().enumerate() {
                let c_row = &mut c[l * k2..(l + 1) * k2];
                for (cv, &bv) in c_row.iter_mut().zip(b_row.iter()) {
                    *cv += av * bv;
                }
            }
        }
        c
    }

    /// Sequential left-to-right sum; the reduction order is part of the
    /// reproducibility contract.
    pub fn sum(xs: &[f64]) -> f64 {
        let mut acc = 0.0;
        for &x in xs {
            acc += x;
        }
        acc
    }
}
