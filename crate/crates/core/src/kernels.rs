//! Per-group covariance functions.
//!
//! Each coordinate group gets an anisotropic squared-exponential kernel
//! `k(x, x') = s^2 exp(-1/2 sum_j ((x_j - x'_j) / l_j)^2)`. Parameters
//! are stored as unconstrained logs so hyperparameter fitting can run
//! plain gradient updates.

use nalgebra::{DMatrix, DVector};

use crate::{Error, Real, Result};

#[derive(Debug, Clone)]
pub struct SubKernel<T: Real> {
    log_lengthscales: DVector<T>,
    log_signal_variance: T,
}

impl<T: Real> SubKernel<T> {
    pub fn new(lengthscales: &[T], signal_variance: T) -> Result<Self> {
        if lengthscales.is_empty() {
            return Err(Error::InvalidArgument("kernel needs at least one lengthscale".into()));
        }
        if lengthscales.iter().any(|l| *l <= T::zero()) {
            return Err(Error::InvalidArgument("lengthscales must be strictly positive".into()));
        }
        if signal_variance <= T::zero() {
            return Err(Error::InvalidArgument("signal variance must be strictly positive".into()));
        }
        Ok(SubKernel {
            log_lengthscales: DVector::from_iterator(
                lengthscales.len(),
                lengthscales.iter().map(|l| l.ln()),
            ),
            log_signal_variance: signal_variance.ln(),
        })
    }

    pub fn from_logs(log_lengthscales: &[T], log_signal_variance: T) -> Self {
        SubKernel {
            log_lengthscales: DVector::from_column_slice(log_lengthscales),
            log_signal_variance,
        }
    }

    /// Input dimension of the group this kernel covers.
    pub fn dim(&self) -> usize {
        self.log_lengthscales.len()
    }

    pub fn lengthscales(&self) -> DVector<T> {
        self.log_lengthscales.map(|v| v.exp())
    }

    pub fn signal_variance(&self) -> T {
        self.log_signal_variance.exp()
    }

    /// Unconstrained parameters, `[log l_1, .., log l_d, log s^2]`.
    pub fn params(&self) -> Vec<T> {
        let mut p: Vec<T> = self.log_lengthscales.iter().copied().collect();
        p.push(self.log_signal_variance);
        p
    }

    pub fn param_count(&self) -> usize {
        self.dim() + 1
    }

    pub fn with_params(&self, params: &[T]) -> Result<Self> {
        if params.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                params.len()
            )));
        }
        Ok(SubKernel::from_logs(&params[..self.dim()], params[self.dim()]))
    }

    pub fn eval(&self, x: &DVector<T>, x2: &DVector<T>) -> Result<T> {
        if x.len() != self.dim() || x2.len() != self.dim() {
            return Err(Error::Shape(format!(
                "points of dimension {} and {} for a kernel of dimension {}",
                x.len(),
                x2.len(),
                self.dim()
            )));
        }
        let mut acc = T::zero();
        for c in 0..self.dim() {
            let inv_l = (-self.log_lengthscales[c]).exp();
            let d = (x[c] - x2[c]) * inv_l;
            acc += d * d;
        }
        Ok(self.signal_variance() * (acc * T::from_f64(-0.5).unwrap()).exp())
    }

    /// Cross-covariance matrix with entry `(j, l) = k(a_j, b_l)`.
    pub fn cross_cov(&self, a: &DMatrix<T>, b: &DMatrix<T>) -> Result<DMatrix<T>> {
        if a.ncols() != self.dim() || b.ncols() != self.dim() {
            return Err(Error::Shape(format!(
                "inputs have {} and {} columns for a kernel of dimension {}",
                a.ncols(),
                b.ncols(),
                self.dim()
            )));
        }
        let s2 = self.signal_variance();
        let half = T::from_f64(0.5).unwrap();
        let inv_l: Vec<T> = self
            .log_lengthscales
            .iter()
            .map(|&ll| (-ll).exp())
            .collect();
        let entry = |j: usize, l: usize| {
            let mut q = T::zero();
            for (c, &il) in inv_l.iter().enumerate() {
                let d = (a[(j, c)] - b[(l, c)]) * il;
                q += d * d;
            }
            s2 * (-half * q).exp()
        };
        let mut out = DMatrix::zeros(a.nrows(), b.nrows());
        if std::ptr::eq(a, b) {
            // symmetric case: evaluate one triangle and mirror
            for l in 0..b.nrows() {
                out[(l, l)] = s2;
                for j in 0..l {
                    let v = entry(j, l);
                    out[(j, l)] = v;
                    out[(l, j)] = v;
                }
            }
        } else {
            for l in 0..b.nrows() {
                for j in 0..a.nrows() {
                    out[(j, l)] = entry(j, l);
                }
            }
        }
        Ok(out)
    }

    /// Partial derivatives of `cross_cov(a, a)` with respect to each
    /// unconstrained parameter, in `params()` order.
    pub fn cross_cov_param_grad(&self, a: &DMatrix<T>) -> Result<Vec<DMatrix<T>>> {
        if a.ncols() != self.dim() {
            return Err(Error::Shape(format!(
                "input has {} columns for a kernel of dimension {}",
                a.ncols(),
                self.dim()
            )));
        }
        let n = a.nrows();
        let k = self.cross_cov(a, a)?;
        let mut grads = Vec::with_capacity(self.param_count());
        for c in 0..self.dim() {
            // d k / d log l_c = k * ((x_c - x'_c) / l_c)^2
            let inv_l = (-self.log_lengthscales[c]).exp();
            let mut g = DMatrix::zeros(n, n);
            for l in 0..n {
                for j in 0..n {
                    let d = (a[(j, c)] - a[(l, c)]) * inv_l;
                    g[(j, l)] = k[(j, l)] * d * d;
                }
            }
            grads.push(g);
        }
        // d k / d log s^2 = k
        grads.push(k);
        Ok(grads)
    }
}
