//! Batched posterior samplers for the subfunctions of an additive GP.
//!
//! Three routes to draws of `[f_1(Z_1), .., f_M(Z_M)] | y`:
//!
//! * [`sample_naive`]: one Cholesky of the full stacked joint posterior.
//!   Exact, cubic in `M B`, kept as the oracle and small-M fallback.
//! * [`sample_marginal`]: each group from its marginal posterior,
//!   independently. Cheap, but discards cross-group covariance.
//! * [`sample_joint`]: the same joint law as `sample_naive`, via an
//!   autoregressive chain of residual conditionals, one factorization
//!   of size `N + B_m` per group.
//!
//! All samplers work in standardized output units and batch `count`
//! draws through a single factorization per group.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::model::{AdditiveGpModel, Dataset, PredictiveGaussian};
use crate::numerics::{factor_psd, sample_gaussian, standard_normal_matrix, JitterPolicy};
use crate::{Error, Real, Result};

/// Per-group candidate matrices and sampled subfunction values.
///
/// `values(m)` is `B_m x count`: column `c` of every group together
/// forms one joint draw.
#[derive(Debug, Clone)]
pub struct GroupSampleSet<T: Real> {
    pub(crate) candidates: Vec<DMatrix<T>>,
    pub(crate) values: Vec<DMatrix<T>>,
}

impl<T: Real> GroupSampleSet<T> {
    pub fn num_groups(&self) -> usize {
        self.candidates.len()
    }

    pub fn count(&self) -> usize {
        self.values.first().map_or(0, |v| v.ncols())
    }

    pub fn candidates(&self, m: usize) -> &DMatrix<T> {
        &self.candidates[m]
    }

    pub fn values(&self, m: usize) -> &DMatrix<T> {
        &self.values[m]
    }

    /// Stacks the per-group value blocks into a `(sum B_m) x count`
    /// matrix in group order.
    pub fn stacked_values(&self) -> DMatrix<T> {
        let total: usize = self.values.iter().map(|v| v.nrows()).sum();
        let mut out = DMatrix::zeros(total, self.count());
        let mut at = 0;
        for v in &self.values {
            out.view_mut((at, 0), (v.nrows(), v.ncols())).copy_from(v);
            at += v.nrows();
        }
        out
    }
}

/// Exact stacked joint posterior over all groups' candidate values.
#[derive(Debug, Clone)]
pub struct JointPosteriorSpec<T: Real> {
    pub mean: DVector<T>,
    pub covariance: DMatrix<T>,
    offsets: Vec<usize>,
}

impl<T: Real> JointPosteriorSpec<T> {
    /// Start of group `m`'s block in the stacked vector.
    pub fn offset(&self, m: usize) -> usize {
        self.offsets[m]
    }

    pub fn block_len(&self, m: usize) -> usize {
        let end = if m + 1 < self.offsets.len() {
            self.offsets[m + 1]
        } else {
            self.mean.len()
        };
        end - self.offsets[m]
    }

    pub fn num_groups(&self) -> usize {
        self.offsets.len()
    }
}

/// Execution counters for the efficient sampler, used to verify the
/// batching contract (factorizations are independent of `count`).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct JointSampleStats {
    /// Factorizations of the augmented conditional covariances.
    pub conditional_factorizations: usize,
    /// Factorizations of the cumulative design-point Grams.
    pub gram_factorizations: usize,
}

fn check_candidates<T: Real>(model: &AdditiveGpModel<T>, z: &[DMatrix<T>]) -> Result<()> {
    let s = model.structure();
    if z.len() != s.num_groups() {
        return Err(Error::Shape(format!(
            "{} candidate blocks for {} groups",
            z.len(),
            s.num_groups()
        )));
    }
    for (m, zm) in z.iter().enumerate() {
        if zm.ncols() != s.group_dim(m) {
            return Err(Error::Shape(format!(
                "candidate block {} has {} columns, group has dimension {}",
                m,
                zm.ncols(),
                s.group_dim(m)
            )));
        }
    }
    Ok(())
}

/// The exact joint posterior `N(mu^Z, Sigma^Z)` over the stacked
/// subfunction values, including all cross-group blocks.
pub fn naive_joint_posterior<T: Real>(
    model: &AdditiveGpModel<T>,
    data: &Dataset<T>,
    z: &[DMatrix<T>],
) -> Result<JointPosteriorSpec<T>> {
    check_candidates(model, z)?;
    let s = model.structure();
    let m_groups = s.num_groups();
    let mut offsets = Vec::with_capacity(m_groups);
    let mut total = 0;
    for zm in z {
        offsets.push(total);
        total += zm.nrows();
    }
    // block-diagonal prior
    let mut cov = DMatrix::zeros(total, total);
    for (m, zm) in z.iter().enumerate() {
        let prior = model.kernel(m).cross_cov(zm, zm)?;
        cov.view_mut((offsets[m], offsets[m]), (prior.nrows(), prior.ncols()))
            .copy_from(&prior);
    }
    if data.is_empty() {
        return Ok(JointPosteriorSpec {
            mean: DVector::zeros(total),
            covariance: cov,
            offsets,
        });
    }
    let n = data.len();
    let f = model.train_gram(data)?;
    // cross-covariance between training responses and all blocks
    let mut t = DMatrix::zeros(n, total);
    for (m, zm) in z.iter().enumerate() {
        let px = s.project(m, data.x())?;
        let kxz = model.kernel(m).cross_cov(&px, zm)?;
        t.view_mut((0, offsets[m]), (n, zm.nrows())).copy_from(&kxz);
    }
    let alpha = f.solve_vec(&model.standardized_y(data))?;
    let mean = t.transpose() * alpha;
    // cov -= T^T Ktilde^-1 T, via V = L^-1 T and one symmetric product
    let v = f
        .lower()
        .solve_lower_triangular(&t)
        .ok_or(Error::Singular { max_jitter: 0.0 })?;
    cov -= v.transpose() * v;
    Ok(JointPosteriorSpec {
        mean,
        covariance: cov,
        offsets,
    })
}

fn split_rows<T: Real>(
    stacked: &DMatrix<T>,
    z: &[DMatrix<T>],
) -> Vec<DMatrix<T>> {
    let mut out = Vec::with_capacity(z.len());
    let mut at = 0;
    for zm in z {
        out.push(stacked.view((at, 0), (zm.nrows(), stacked.ncols())).into_owned());
        at += zm.nrows();
    }
    out
}

/// `count` exact joint draws via one factorization of the full stacked
/// covariance.
pub fn sample_naive<T: Real, R: Rng>(
    model: &AdditiveGpModel<T>,
    data: &Dataset<T>,
    z: &[DMatrix<T>],
    count: usize,
    rng: &mut R,
) -> Result<GroupSampleSet<T>> {
    let spec = naive_joint_posterior(model, data, z)?;
    let f = factor_psd(&spec.covariance, JitterPolicy::default())?;
    let draws = sample_gaussian(&spec.mean, &f, count, rng)?;
    Ok(GroupSampleSet {
        candidates: z.to_vec(),
        values: split_rows(&draws, z),
    })
}

/// Each group drawn independently from its marginal posterior, in
/// stored group order. Ignores all cross-group covariance.
pub fn sample_marginal<T: Real, R: Rng>(
    model: &AdditiveGpModel<T>,
    data: &Dataset<T>,
    z: &[DMatrix<T>],
    count: usize,
    rng: &mut R,
) -> Result<GroupSampleSet<T>> {
    check_candidates(model, z)?;
    let mut values = Vec::with_capacity(z.len());
    for (m, zm) in z.iter().enumerate() {
        let g = model.subfunction_marginal(data, m, zm)?;
        let f = factor_psd(&g.covariance, JitterPolicy::default())?;
        values.push(sample_gaussian(&g.mean, &f, count, rng)?);
    }
    Ok(GroupSampleSet {
        candidates: z.to_vec(),
        values,
    })
}

/// Conditional of the augmented vector `[f_m(P_m X); f_m(Z_m)]` given
/// the residual of the groups still in `remaining`.
///
/// `remaining` lists the groups whose design-point values have not yet
/// been subtracted from `residual`; it must contain `m`. The Gram is
/// `sum_{j in remaining} K_j(P_j X, P_j X) + tau^2 I`.
pub fn residual_conditional<T: Real>(
    model: &AdditiveGpModel<T>,
    data: &Dataset<T>,
    m: usize,
    remaining: &[usize],
    residual: &DVector<T>,
    z_m: &DMatrix<T>,
) -> Result<PredictiveGaussian<T>> {
    let s = model.structure();
    if m >= s.num_groups() {
        return Err(Error::Shape(format!(
            "group index {} out of range for {} groups",
            m,
            s.num_groups()
        )));
    }
    if !remaining.contains(&m) {
        return Err(Error::Logic(format!(
            "group {m} is not in the remaining set"
        )));
    }
    if residual.len() != data.len() {
        return Err(Error::Shape(format!(
            "residual length {} does not match {} observations",
            residual.len(),
            data.len()
        )));
    }
    if z_m.ncols() != s.group_dim(m) {
        return Err(Error::Shape(format!(
            "candidates have {} columns, group {} has dimension {}",
            z_m.ncols(),
            m,
            s.group_dim(m)
        )));
    }
    let n = data.len();
    let px = s.project(m, data.x())?;
    // augmented inputs [P_m X; Z_m]
    let b = z_m.nrows();
    let mut w = DMatrix::zeros(n + b, z_m.ncols());
    w.view_mut((0, 0), (n, px.ncols())).copy_from(&px);
    w.view_mut((n, 0), (b, z_m.ncols())).copy_from(z_m);
    let prior = model.kernel(m).cross_cov(&w, &w)?;
    if n == 0 {
        return Ok(PredictiveGaussian {
            mean: DVector::zeros(b),
            covariance: prior,
        });
    }
    let mut gram = DMatrix::zeros(n, n);
    for &j in remaining {
        let pj = s.project(j, data.x())?;
        gram += model.kernel(j).cross_cov(&pj, &pj)?;
    }
    for i in 0..n {
        gram[(i, i)] += model.noise_variance();
    }
    let f = factor_psd(&gram, JitterPolicy::default())?;
    let kxw = model.kernel(m).cross_cov(&px, &w)?;
    let solved = f.solve(&kxw)?;
    let mean = solved.transpose() * residual;
    let cov = prior - kxw.transpose() * solved;
    Ok(PredictiveGaussian { mean, covariance: cov })
}

/// Joint draws via the autoregressive residual chain.
///
/// Groups are processed in descending stored order; at the step for
/// group `m` the residual still contains groups `0..=m`, so the
/// cumulative design Grams are ascending prefix sums. Each step samples
/// the augmented `[f_m(P_m X); f_m(Z_m)]`, keeps the `Z_m` part, and
/// uses the design part only to update the residual.
pub fn sample_joint<T: Real, R: Rng>(
    model: &AdditiveGpModel<T>,
    data: &Dataset<T>,
    z: &[DMatrix<T>],
    count: usize,
    rng: &mut R,
) -> Result<GroupSampleSet<T>> {
    Ok(sample_joint_with_stats(model, data, z, count, rng)?.0)
}

/// [`sample_joint`] plus factorization counters.
pub fn sample_joint_with_stats<T: Real, R: Rng>(
    model: &AdditiveGpModel<T>,
    data: &Dataset<T>,
    z: &[DMatrix<T>],
    count: usize,
    rng: &mut R,
) -> Result<(GroupSampleSet<T>, JointSampleStats)> {
    check_candidates(model, z)?;
    let s = model.structure();
    let m_groups = s.num_groups();
    let n = data.len();
    let mut stats = JointSampleStats::default();

    // Ascending prefix Grams over design points, built incrementally.
    let projected: Vec<DMatrix<T>> = (0..m_groups)
        .map(|m| s.project(m, data.x()))
        .collect::<Result<_>>()?;
    let mut prefix = Vec::with_capacity(m_groups);
    let mut acc = DMatrix::zeros(n, n);
    for i in 0..n {
        acc[(i, i)] = model.noise_variance();
    }
    for px in &projected {
        acc += model.kernel(prefix.len()).cross_cov(px, px)?;
        prefix.push(acc.clone());
    }

    // Pre-draw the per-group noise in processing order so concurrent
    // covariance work cannot perturb the stream.
    let order: Vec<usize> = (0..m_groups).rev().collect();
    let xi: Vec<DMatrix<T>> = order
        .iter()
        .map(|&m| standard_normal_matrix::<T, R>(n + z[m].nrows(), count, rng))
        .collect();

    // Covariance parts: per group, independent of the residual chain.
    struct GroupPart<T: Real> {
        mean_map: DMatrix<T>, // (N + B_m) x N, maps residual to mean
        cov_draw: DMatrix<T>, // (N + B_m) x count
    }
    let mut parts: Vec<Option<GroupPart<T>>> = (0..m_groups).map(|_| None).collect();
    for (step, &m) in order.iter().enumerate() {
        let px = &projected[m];
        let b = z[m].nrows();
        let mut w = DMatrix::zeros(n + b, z[m].ncols());
        w.view_mut((0, 0), (n, px.ncols())).copy_from(px);
        w.view_mut((n, 0), (b, z[m].ncols())).copy_from(&z[m]);
        let prior = model.kernel(m).cross_cov(&w, &w)?;
        let (mean_map, cond_cov) = if n == 0 {
            (DMatrix::zeros(b, 0), prior)
        } else {
            let gram_factor = factor_psd(&prefix[m], JitterPolicy::default())?;
            stats.gram_factorizations += 1;
            let kxw = model.kernel(m).cross_cov(px, &w)?;
            let solved = gram_factor.solve(&kxw)?;
            let cov = prior - kxw.transpose() * &solved;
            (solved.transpose(), cov)
        };
        let cond_factor = factor_psd(&cond_cov, JitterPolicy::default())?;
        stats.conditional_factorizations += 1;
        let cov_draw = cond_factor.lower() * &xi[step];
        parts[m] = Some(GroupPart { mean_map, cov_draw });
    }

    // Mean parts form the sequential residual chain.
    let yhat = model.standardized_y(data);
    let mut residual = DMatrix::zeros(n, count);
    for c in 0..count {
        residual.set_column(c, &yhat);
    }
    let mut values: Vec<DMatrix<T>> = (0..m_groups).map(|_| DMatrix::zeros(0, 0)).collect();
    for &m in &order {
        let part = parts[m].take().expect("covariance part computed above");
        let b = z[m].nrows();
        let aug = if n == 0 {
            part.cov_draw
        } else {
            part.cov_draw + &part.mean_map * &residual
        };
        values[m] = aug.view((n, 0), (b, count)).into_owned();
        if n > 0 {
            residual -= aug.view((0, 0), (n, count));
        }
    }
    Ok((
        GroupSampleSet {
            candidates: z.to_vec(),
            values,
        },
        stats,
    ))
}
