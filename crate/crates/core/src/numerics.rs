//! Dense positive-semidefinite linear algebra and Gaussian sampling.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::{Error, Real, Result};

/// Escalating diagonal-jitter schedule for Cholesky retries.
///
/// Jitter values are relative to the mean diagonal of the matrix being
/// factored: the first retry adds `initial_rel * mean_diag`, each
/// further retry multiplies by `growth`, stopping at
/// `max_rel * mean_diag`. A plain factorization (zero jitter) is always
/// attempted first.
#[derive(Debug, Clone, Copy)]
pub struct JitterPolicy {
    pub initial_rel: f64,
    pub growth: f64,
    pub max_rel: f64,
}

impl Default for JitterPolicy {
    fn default() -> Self {
        JitterPolicy {
            initial_rel: 1e-8,
            growth: 10.0,
            max_rel: 1e-2,
        }
    }
}

/// Cholesky factor of `A + jitter_used * I` for a symmetric PSD `A`.
#[derive(Debug, Clone)]
pub struct PsdFactor<T: Real> {
    lower: DMatrix<T>,
    jitter_used: T,
}

impl<T: Real> PsdFactor<T> {
    /// The lower-triangular factor `L` with `L L^T = A + jitter_used * I`.
    pub fn lower(&self) -> &DMatrix<T> {
        &self.lower
    }

    pub fn jitter_used(&self) -> T {
        self.jitter_used
    }

    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    /// Solves `(A + jitter_used * I) X = B`.
    pub fn solve(&self, b: &DMatrix<T>) -> Result<DMatrix<T>> {
        solve_with_factor(self, b)
    }

    /// Solves for a single right-hand side vector.
    pub fn solve_vec(&self, b: &DVector<T>) -> Result<DVector<T>> {
        let n = self.dim();
        if b.len() != n {
            return Err(Error::Shape(format!(
                "rhs length {} does not match factor dimension {}",
                b.len(),
                n
            )));
        }
        let cols = DMatrix::from_column_slice(n, 1, b.as_slice());
        let x = self.solve(&cols)?;
        Ok(DVector::from_column_slice(x.as_slice()))
    }

    /// `log det (A + jitter_used * I)`, from the factor diagonal.
    pub fn log_det(&self) -> T {
        let mut acc = T::zero();
        for i in 0..self.dim() {
            acc += self.lower[(i, i)].ln();
        }
        acc + acc
    }
}

fn symmetry_violation<T: Real>(a: &DMatrix<T>) -> T {
    let mut worst = T::zero();
    let mut scale = T::zero();
    for j in 0..a.ncols() {
        for i in 0..j {
            let d = (a[(i, j)] - a[(j, i)]).abs();
            if d > worst {
                worst = d;
            }
        }
        for i in 0..a.nrows() {
            let m = a[(i, j)].abs();
            if m > scale {
                scale = m;
            }
        }
    }
    if scale > T::zero() {
        worst / scale
    } else {
        worst
    }
}

/// Factors a symmetric PSD matrix, escalating diagonal jitter on failure.
pub fn factor_psd<T: Real>(a: &DMatrix<T>, policy: JitterPolicy) -> Result<PsdFactor<T>> {
    if a.nrows() != a.ncols() {
        return Err(Error::Shape(format!(
            "matrix is {}x{}, expected square",
            a.nrows(),
            a.ncols()
        )));
    }
    let n = a.nrows();
    if n == 0 {
        return Ok(PsdFactor {
            lower: DMatrix::zeros(0, 0),
            jitter_used: T::zero(),
        });
    }
    let tol = T::from_f64(1e-8).unwrap();
    if symmetry_violation(a) > tol {
        return Err(Error::Shape("matrix is not symmetric".into()));
    }
    // Work on the symmetrized copy so roundoff asymmetry cannot leak in.
    let mut sym = DMatrix::zeros(n, n);
    for j in 0..n {
        for i in 0..n {
            sym[(i, j)] = (a[(i, j)] + a[(j, i)]) * T::from_f64(0.5).unwrap();
        }
    }
    let mean_diag = sym.diagonal().sum() / T::from_usize(n).unwrap();
    // Zero or negative mean diagonal (e.g. the all-zero matrix) gives
    // nothing to scale the schedule by; fall back to unit scale.
    let scale = if mean_diag > T::zero() {
        mean_diag
    } else {
        T::one()
    };
    let growth = T::from_f64(policy.growth).unwrap();
    let max_jitter = T::from_f64(policy.max_rel).unwrap() * scale;
    let mut jitter = T::zero();
    loop {
        let mut shifted = sym.clone();
        for i in 0..n {
            shifted[(i, i)] += jitter;
        }
        if let Some(chol) = nalgebra::Cholesky::new(shifted) {
            return Ok(PsdFactor {
                lower: chol.unpack(),
                jitter_used: jitter,
            });
        }
        if jitter >= max_jitter {
            return Err(Error::Singular {
                max_jitter: max_jitter.to_f64().unwrap_or(f64::NAN),
            });
        }
        jitter = if jitter == T::zero() {
            T::from_f64(policy.initial_rel).unwrap() * scale
        } else {
            (jitter * growth).min(max_jitter)
        };
    }
}

/// Solves `(A + jitter * I) X = B` given a factor of `A + jitter * I`.
pub fn solve_with_factor<T: Real>(f: &PsdFactor<T>, b: &DMatrix<T>) -> Result<DMatrix<T>> {
    let n = f.dim();
    if b.nrows() != n {
        return Err(Error::Shape(format!(
            "rhs has {} rows, factor dimension is {}",
            b.nrows(),
            n
        )));
    }
    let y = f
        .lower
        .solve_lower_triangular(b)
        .ok_or_else(|| Error::Logic("triangular solve failed on a valid factor".into()))?;
    f.lower
        .tr_solve_lower_triangular(&y)
        .ok_or_else(|| Error::Logic("triangular solve failed on a valid factor".into()))
}

/// Draws `count` iid columns from `N(mean, L L^T)`, `L` from `factor`.
///
/// Consumes `n * count` standard normals from `rng` in a fixed
/// (column-major) order, so equal seeds give bit-identical output.
pub fn sample_gaussian<T: Real, R: Rng>(
    mean: &DVector<T>,
    factor: &PsdFactor<T>,
    count: usize,
    rng: &mut R,
) -> Result<DMatrix<T>> {
    let n = factor.dim();
    if mean.len() != n {
        return Err(Error::Shape(format!(
            "mean length {} does not match factor dimension {}",
            mean.len(),
            n
        )));
    }
    let xi = standard_normal_matrix::<T, R>(n, count, rng);
    let mut out = &factor.lower * xi;
    for c in 0..count {
        let mut col = out.column_mut(c);
        col += mean;
    }
    Ok(out)
}

/// `rows x cols` matrix of standard normals, filled column by column.
pub fn standard_normal_matrix<T: Real, R: Rng>(
    rows: usize,
    cols: usize,
    rng: &mut R,
) -> DMatrix<T> {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        let z: f64 = rng.sample(StandardNormal);
        data.push(T::from_f64(z).unwrap());
    }
    DMatrix::from_column_slice(rows, cols, &data)
}
