//! Dense-array numeric kernel with reverse-mode autodiff and Adam.
//!
//! Everything downstream (the transformer, the losses, both training loops)
//! is built on three pieces:
//! - [`DenseArray`]: row-major f64 storage with shape checking,
//! - [`Tape`]: a record of coarse primitives (matmul, layer norm, attention,
//!   gather, masked losses) replayed backward for exact gradients,
//! - [`adam_step`]: the standard bias-corrected Adam update.
//!
//! [`finite_diff_grad`] is the independent oracle used by the tests to pin
//! the analytic gradients down; it never touches the tape.

pub mod kernels;
mod tape;

pub use tape::{Gradients, NodeId, Tape};

use thiserror::Error;

/// Probability floor applied to the second argument of [`kl_forward`].
/// Keeps the divergence finite when a saturated distribution puts zero mass
/// where the reference has support.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum NumError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("numeric error: {0}")]
    Numeric(String),
}

/// Row-major dense array of 64-bit floats.
///
/// Invariants: `data.len()` equals the product of the shape extents, and all
/// values stay finite through every public operation on finite inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseArray {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl DenseArray {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NumError> {
        let expected: usize = shape.iter().product();
        if shape.iter().any(|&e| e == 0) {
            return Err(NumError::InvalidArgument("zero extent in shape".into()));
        }
        if data.len() != expected {
            return Err(NumError::InvalidArgument(format!(
                "shape {shape:?} wants {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self { shape, data: vec![0.0; len] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumError> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Extent product check for 2-D use.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() == 1 {
            1
        } else {
            self.shape[1..].iter().product()
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// Scalar value of a one-element array.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.len(), 1);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Softmax of a logits vector with max subtraction.
pub fn softmax_row(logits: &[f64]) -> Result<Vec<f64>, NumError> {
    if logits.is_empty() {
        return Err(NumError::InvalidArgument("softmax of empty vector".into()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(NumError::InvalidArgument("softmax of non-finite input".into()));
    }
    let mut out = logits.to_vec();
    kernels::softmax_in_place(&mut out);
    Ok(out)
}

/// Forward KL divergence `sum_i p_i ln(p_i / q_i)` with the default floor.
///
/// Terms with `p_i == 0` contribute zero. `q` is clamped to the floor and
/// renormalized first, so a saturated `q` cannot produce an infinite value.
pub fn kl_forward(p: &[f64], q: &[f64]) -> Result<f64, NumError> {
    kl_forward_with_floor(p, q, PROB_FLOOR)
}

/// [`kl_forward`] with an explicit floor. A zero floor exposes the raw
/// divergence, where `q_i == 0` against `p_i > 0` is a domain error.
pub fn kl_forward_with_floor(p: &[f64], q: &[f64], floor: f64) -> Result<f64, NumError> {
    if p.len() != q.len() {
        return Err(NumError::InvalidArgument(format!(
            "length mismatch: p has {}, q has {}",
            p.len(),
            q.len()
        )));
    }
    if p.is_empty() {
        return Err(NumError::InvalidArgument("empty distributions".into()));
    }
    for (name, v) in [("p", p), ("q", q)] {
        if v.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(NumError::InvalidArgument(format!("{name} is not a probability vector")));
        }
        let sum: f64 = v.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(NumError::InvalidArgument(format!("{name} sums to {sum}, not 1")));
        }
    }
    let floored: Vec<f64> = q.iter().map(|&v| v.max(floor)).collect();
    let norm: f64 = floored.iter().sum();
    let mut total = 0.0;
    for (&pi, &qi) in p.iter().zip(&floored) {
        if pi == 0.0 {
            continue;
        }
        let qi = qi / norm;
        if qi == 0.0 {
            return Err(NumError::Domain("q has zero mass where p > 0".into()));
        }
        total += pi * (pi / qi).ln();
    }
    Ok(total)
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamHyper {
    pub fn new(learning_rate: f64) -> Self {
        Self { learning_rate, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }

    fn validate(&self) -> Result<(), NumError> {
        if self.learning_rate < 0.0
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || self.epsilon <= 0.0
        {
            return Err(NumError::InvalidArgument(format!("bad Adam hyperparameters {self:?}")));
        }
        Ok(())
    }
}

/// Optimizer state: step counter plus first and second moment estimates,
/// one array per parameter array, shape-matched.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<DenseArray>,
    pub v: Vec<DenseArray>,
    pub hyper: AdamHyper,
}

impl AdamState {
    pub fn new(params: &[&DenseArray], hyper: AdamHyper) -> Self {
        let m = params.iter().map(|p| DenseArray::zeros(p.shape().to_vec())).collect();
        let v = params.iter().map(|p| DenseArray::zeros(p.shape().to_vec())).collect();
        Self { step: 0, m, v, hyper }
    }
}

/// One bias-corrected Adam update over a parameter list. Deterministic:
/// identical inputs produce bit-identical outputs.
pub fn adam_step(
    params: &mut [&mut DenseArray],
    grads: &[&DenseArray],
    state: &mut AdamState,
) -> Result<(), NumError> {
    state.hyper.validate()?;
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(NumError::InvalidArgument(format!(
            "param/grad/state count mismatch: {} vs {} vs {}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, p) in params.iter().enumerate() {
        if p.shape() != grads[i].shape() || p.shape() != state.m[i].shape() {
            return Err(NumError::InvalidArgument(format!(
                "shape mismatch at parameter {i}: {:?} vs {:?}",
                p.shape(),
                grads[i].shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let AdamHyper { learning_rate: lr, beta1, beta2, epsilon } = state.hyper;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, pv) in p.data_mut().iter_mut().enumerate() {
            m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
            v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *pv -= lr * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
    Ok(())
}

/// Central-difference gradient oracle: `(f(p+e) - f(p-e)) / 2eps` per
/// coordinate. Independent of the tape by construction.
pub fn finite_diff_grad<F>(
    mut f: F,
    params: &[DenseArray],
    eps: f64,
) -> Result<Vec<DenseArray>, NumError>
where
    F: FnMut(&[DenseArray]) -> f64,
{
    if eps <= 0.0 {
        return Err(NumError::InvalidArgument("eps must be positive".into()));
    }
    let mut work: Vec<DenseArray> = params.to_vec();
    let mut grads: Vec<DenseArray> = params.iter().map(|p| DenseArray::zeros(p.shape().to_vec())).collect();
    for a in 0..params.len() {
        for j in 0..params[a].len() {
            let orig = work[a].data()[j];
            work[a].data_mut()[j] = orig + eps;
            let up = f(&work);
            work[a].data_mut()[j] = orig - eps;
            let down = f(&work);
            work[a].data_mut()[j] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(NumError::Numeric(format!(
                    "non-finite evaluation at parameter {a}[{j}]"
                )));
            }
            grads[a].data_mut()[j] = (up - down) / (2.0 * eps);
        }
    }
    Ok(grads)
}

/// Relative error used by the gradient checks: absolute difference over
/// `max(|a|, |b|, floor)`. The floor turns the comparison absolute for
/// near-zero gradient components, where central differences bottom out at
/// rounding noise far below any real defect.
pub fn grad_rel_err(analytic: f64, oracle: f64, floor: f64) -> f64 {
    (analytic - oracle).abs() / analytic.abs().max(oracle.abs()).max(floor)
}
