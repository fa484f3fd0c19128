//! The additive GP model: training covariance assembly, exact and
//! additive prediction, subfunction marginals, marginal likelihood and
//! its gradient, and Adam hyperparameter fitting.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::kernels::SubKernel;
use crate::numerics::{factor_psd, JitterPolicy, PsdFactor};
use crate::structure::AdditiveStructure;
use crate::{Error, Real, Result};

/// Hard floor on the noise variance, in standardized output units.
pub const NOISE_FLOOR: f64 = 1e-6;

/// Design matrix in the unit cube plus raw responses.
#[derive(Debug, Clone)]
pub struct Dataset<T: Real> {
    x: DMatrix<T>,
    y: DVector<T>,
}

impl<T: Real> Dataset<T> {
    pub fn new(x: DMatrix<T>, y: DVector<T>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::Shape(format!(
                "{} design rows but {} responses",
                x.nrows(),
                y.len()
            )));
        }
        let slack = T::from_f64(1e-12).unwrap();
        let lo = -slack;
        let hi = T::one() + slack;
        for v in x.iter() {
            if *v < lo || *v > hi {
                return Err(Error::InvalidArgument(
                    "design entries must lie in the unit cube".into(),
                ));
            }
        }
        Ok(Dataset { x, y })
    }

    pub fn empty(p: usize) -> Self {
        Dataset {
            x: DMatrix::zeros(0, p),
            y: DVector::zeros(0),
        }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.len() == 0
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn x(&self) -> &DMatrix<T> {
        &self.x
    }

    pub fn y(&self) -> &DVector<T> {
        &self.y
    }

    /// Appends one evaluated point.
    pub fn push(&mut self, point: &[T], value: T) -> Result<()> {
        if point.len() != self.p() {
            return Err(Error::Shape(format!(
                "point has dimension {}, design has {}",
                point.len(),
                self.p()
            )));
        }
        let n = self.len();
        let mut x = DMatrix::zeros(n + 1, self.p());
        x.view_mut((0, 0), (n, self.p())).copy_from(&self.x);
        for (c, v) in point.iter().enumerate() {
            x[(n, c)] = *v;
        }
        let mut y = DVector::zeros(n + 1);
        y.rows_mut(0, n).copy_from(&self.y);
        y[n] = value;
        self.x = x;
        self.y = y;
        Ok(())
    }
}

/// A multivariate normal over function values.
#[derive(Debug, Clone)]
pub struct PredictiveGaussian<T: Real> {
    pub mean: DVector<T>,
    pub covariance: DMatrix<T>,
}

impl<T: Real> PredictiveGaussian<T> {
    /// Diagonal of the covariance, clamped at zero.
    pub fn variances(&self) -> DVector<T> {
        self.covariance.map_diagonal(|v| v.max(T::zero()))
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.len() == 0
    }
}

/// Additive GP: a partition of the coordinates, one kernel per group,
/// a shared noise variance, and the response standardization constants.
#[derive(Debug, Clone)]
pub struct AdditiveGpModel<T: Real> {
    structure: AdditiveStructure,
    kernels: Vec<SubKernel<T>>,
    noise_variance: T,
    y_shift: T,
    y_scale: T,
}

impl<T: Real> AdditiveGpModel<T> {
    /// Builds a model with the default initialization: per-group
    /// lengthscales `0.5 sqrt(d_m)`, signal variances `1/M`, and noise
    /// variance `1e-2` in standardized units.
    pub fn new(structure: AdditiveStructure) -> Self {
        let m = structure.num_groups();
        let kernels = (0..m)
            .map(|i| {
                let d = structure.group_dim(i);
                let l = T::from_f64(0.5).unwrap() * T::from_usize(d).unwrap().sqrt();
                let ls = vec![l; d];
                SubKernel::new(&ls, T::one() / T::from_usize(m).unwrap())
                    .expect("default hyperparameters are positive")
            })
            .collect();
        AdditiveGpModel {
            structure,
            kernels,
            noise_variance: T::from_f64(1e-2).unwrap(),
            y_shift: T::zero(),
            y_scale: T::one(),
        }
    }

    pub fn with_kernels(
        structure: AdditiveStructure,
        kernels: Vec<SubKernel<T>>,
        noise_variance: T,
    ) -> Result<Self> {
        if kernels.len() != structure.num_groups() {
            return Err(Error::Shape(format!(
                "{} kernels for {} groups",
                kernels.len(),
                structure.num_groups()
            )));
        }
        for (m, k) in kernels.iter().enumerate() {
            if k.dim() != structure.group_dim(m) {
                return Err(Error::Shape(format!(
                    "kernel {} has dimension {}, group has {}",
                    m,
                    k.dim(),
                    structure.group_dim(m)
                )));
            }
        }
        let floor = T::from_f64(NOISE_FLOOR).unwrap();
        Ok(AdditiveGpModel {
            structure,
            kernels,
            noise_variance: noise_variance.max(floor),
            y_shift: T::zero(),
            y_scale: T::one(),
        })
    }

    pub fn structure(&self) -> &AdditiveStructure {
        &self.structure
    }

    pub fn kernels(&self) -> &[SubKernel<T>] {
        &self.kernels
    }

    pub fn kernel(&self, m: usize) -> &SubKernel<T> {
        &self.kernels[m]
    }

    pub fn noise_variance(&self) -> T {
        self.noise_variance
    }

    pub fn y_shift(&self) -> T {
        self.y_shift
    }

    pub fn y_scale(&self) -> T {
        self.y_scale
    }

    /// Sets the standardization constants from the data (mean / RMS
    /// deviation of the responses). Degenerate data keeps unit scale.
    pub fn set_standardization(&mut self, data: &Dataset<T>) {
        let n = data.len();
        if n == 0 {
            self.y_shift = T::zero();
            self.y_scale = T::one();
            return;
        }
        let mean = data.y().sum() / T::from_usize(n).unwrap();
        let mut ss = T::zero();
        for v in data.y().iter() {
            let d = *v - mean;
            ss += d * d;
        }
        let var = ss / T::from_usize(n).unwrap();
        self.y_shift = mean;
        self.y_scale = if var > T::from_f64(1e-24).unwrap() {
            var.sqrt()
        } else {
            T::one()
        };
    }

    /// Responses in standardized units.
    pub fn standardized_y(&self, data: &Dataset<T>) -> DVector<T> {
        data.y().map(|v| (v - self.y_shift) / self.y_scale)
    }

    fn check_data(&self, data: &Dataset<T>) -> Result<()> {
        if data.p() != self.structure.p() {
            return Err(Error::Shape(format!(
                "data has {} columns, model dimension is {}",
                data.p(),
                self.structure.p()
            )));
        }
        Ok(())
    }

    fn check_new(&self, xnew: &DMatrix<T>) -> Result<()> {
        if xnew.ncols() != self.structure.p() {
            return Err(Error::Shape(format!(
                "prediction points have {} columns, model dimension is {}",
                xnew.ncols(),
                self.structure.p()
            )));
        }
        Ok(())
    }

    /// Summed kernel matrix over all groups, `sum_m K_m(P_m A, P_m B)`.
    pub fn summed_cross_cov(&self, a: &DMatrix<T>, b: &DMatrix<T>) -> Result<DMatrix<T>> {
        let mut out = DMatrix::zeros(a.nrows(), b.nrows());
        for m in 0..self.structure.num_groups() {
            let pa = self.structure.project(m, a)?;
            let pb = self.structure.project(m, b)?;
            out += self.kernels[m].cross_cov(&pa, &pb)?;
        }
        Ok(out)
    }

    /// Factor of the training Gram `sum_m K_m(P_m X, P_m X) + tau^2 I`.
    pub fn train_gram(&self, data: &Dataset<T>) -> Result<PsdFactor<T>> {
        self.check_data(data)?;
        let n = data.len();
        let mut gram = self.summed_cross_cov(data.x(), data.x())?;
        for i in 0..n {
            gram[(i, i)] += self.noise_variance;
        }
        factor_psd(&gram, JitterPolicy::default())
    }

    /// Exact posterior of `f(xnew)` in raw output units, including all
    /// cross-group covariance.
    pub fn predict_exact(&self, data: &Dataset<T>, xnew: &DMatrix<T>) -> Result<PredictiveGaussian<T>> {
        self.check_data(data)?;
        self.check_new(xnew)?;
        let prior = self.summed_cross_cov(xnew, xnew)?;
        let (mean_std, cov_std) = if data.is_empty() {
            (DVector::zeros(xnew.nrows()), prior)
        } else {
            let f = self.train_gram(data)?;
            let kxz = self.summed_cross_cov(data.x(), xnew)?;
            let alpha = f.solve_vec(&self.standardized_y(data))?;
            let mean = kxz.transpose() * alpha;
            let s = f.solve(&kxz)?;
            (mean, prior - kxz.transpose() * s)
        };
        Ok(self.destandardize(mean_std, cov_std))
    }

    /// Posterior with the cross-group data-correction terms dropped
    /// from the covariance; the mean is identical to `predict_exact`.
    pub fn predict_additive(&self, data: &Dataset<T>, xnew: &DMatrix<T>) -> Result<PredictiveGaussian<T>> {
        self.check_data(data)?;
        self.check_new(xnew)?;
        let prior = self.summed_cross_cov(xnew, xnew)?;
        let (mean_std, cov_std) = if data.is_empty() {
            (DVector::zeros(xnew.nrows()), prior)
        } else {
            let f = self.train_gram(data)?;
            let kxz = self.summed_cross_cov(data.x(), xnew)?;
            let alpha = f.solve_vec(&self.standardized_y(data))?;
            let mean = kxz.transpose() * alpha;
            let mut cov = prior;
            for m in 0..self.structure.num_groups() {
                let px = self.structure.project(m, data.x())?;
                let pz = self.structure.project(m, xnew)?;
                let kxz_m = self.kernels[m].cross_cov(&px, &pz)?;
                let s = f.solve(&kxz_m)?;
                cov -= kxz_m.transpose() * s;
            }
            (mean, cov)
        };
        Ok(self.destandardize(mean_std, cov_std))
    }

    fn destandardize(&self, mean_std: DVector<T>, cov_std: DMatrix<T>) -> PredictiveGaussian<T> {
        let scale2 = self.y_scale * self.y_scale;
        PredictiveGaussian {
            mean: mean_std.map(|v| self.y_shift + self.y_scale * v),
            covariance: cov_std * scale2,
        }
    }

    /// Marginal posterior of subfunction `m` at `z_m`, in standardized
    /// units (the constant shift has no additive-split identification).
    pub fn subfunction_marginal(
        &self,
        data: &Dataset<T>,
        m: usize,
        z_m: &DMatrix<T>,
    ) -> Result<PredictiveGaussian<T>> {
        self.check_data(data)?;
        if m >= self.structure.num_groups() {
            return Err(Error::Shape(format!(
                "group index {} out of range for {} groups",
                m,
                self.structure.num_groups()
            )));
        }
        if z_m.ncols() != self.structure.group_dim(m) {
            return Err(Error::Shape(format!(
                "candidates have {} columns, group {} has dimension {}",
                z_m.ncols(),
                m,
                self.structure.group_dim(m)
            )));
        }
        let prior = self.kernels[m].cross_cov(z_m, z_m)?;
        if data.is_empty() {
            return Ok(PredictiveGaussian {
                mean: DVector::zeros(z_m.nrows()),
                covariance: prior,
            });
        }
        let f = self.train_gram(data)?;
        let px = self.structure.project(m, data.x())?;
        let kxz = self.kernels[m].cross_cov(&px, z_m)?;
        let alpha = f.solve_vec(&self.standardized_y(data))?;
        let mean = kxz.transpose() * alpha;
        let s = f.solve(&kxz)?;
        Ok(PredictiveGaussian {
            mean,
            covariance: prior - kxz.transpose() * s,
        })
    }

    /// Gaussian log marginal likelihood of the standardized responses.
    pub fn log_marginal_likelihood(&self, data: &Dataset<T>) -> Result<T> {
        Ok(self.lml_with_factor(data)?.0)
    }

    fn lml_with_factor(&self, data: &Dataset<T>) -> Result<(T, PsdFactor<T>, DVector<T>)> {
        self.check_data(data)?;
        let n = data.len();
        if n == 0 {
            return Err(Error::InvalidArgument(
                "marginal likelihood needs at least one observation".into(),
            ));
        }
        let f = self.train_gram(data)?;
        let yhat = self.standardized_y(data);
        let alpha = f.solve_vec(&yhat)?;
        let fit = yhat.dot(&alpha);
        let two_pi = T::from_f64(2.0 * std::f64::consts::PI).unwrap();
        let half = T::from_f64(0.5).unwrap();
        let lml = -half * (fit + f.log_det() + T::from_usize(n).unwrap() * two_pi.ln());
        Ok((lml, f, alpha))
    }

    /// Number of unconstrained parameters: per-group log-lengthscales
    /// and log signal variances, plus the log noise variance.
    pub fn num_params(&self) -> usize {
        self.kernels.iter().map(|k| k.param_count()).sum::<usize>() + 1
    }

    /// Flattened unconstrained parameters, group by group in stored
    /// order, with `log tau^2` last.
    pub fn unconstrained_params(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_params());
        for k in &self.kernels {
            out.extend(k.params());
        }
        out.push(self.noise_variance.ln());
        out
    }

    /// Copy of the model with the given unconstrained parameters. The
    /// noise variance is clamped at its floor.
    pub fn with_unconstrained_params(&self, params: &[T]) -> Result<Self> {
        if params.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                params.len()
            )));
        }
        let mut kernels = Vec::with_capacity(self.kernels.len());
        let mut at = 0;
        for k in &self.kernels {
            let c = k.param_count();
            kernels.push(k.with_params(&params[at..at + c])?);
            at += c;
        }
        let floor = T::from_f64(NOISE_FLOOR).unwrap();
        let noise = params[at].exp().max(floor);
        Ok(AdditiveGpModel {
            structure: self.structure.clone(),
            kernels,
            noise_variance: noise,
            y_shift: self.y_shift,
            y_scale: self.y_scale,
        })
    }

    /// Analytic gradient of the log marginal likelihood with respect to
    /// the unconstrained parameters, in `unconstrained_params` order.
    pub fn lml_gradient(&self, data: &Dataset<T>) -> Result<DVector<T>> {
        Ok(self.lml_and_gradient(data)?.1)
    }

    /// Likelihood and gradient from a single factorization.
    pub fn lml_and_gradient(&self, data: &Dataset<T>) -> Result<(T, DVector<T>)> {
        let (lml, f, alpha) = self.lml_with_factor(data)?;
        let n = data.len();
        let kinv = f.solve(&DMatrix::identity(n, n))?;
        let half = T::from_f64(0.5).unwrap();
        let mut grad = Vec::with_capacity(self.num_params());
        for m in 0..self.structure.num_groups() {
            let px = self.structure.project(m, data.x())?;
            for g in self.kernels[m].cross_cov_param_grad(&px)? {
                let quad = alpha.dot(&(&g * &alpha));
                let mut tr = T::zero();
                for j in 0..n {
                    for i in 0..n {
                        tr += kinv[(i, j)] * g[(i, j)];
                    }
                }
                grad.push(half * (quad - tr));
            }
        }
        // d K / d log tau^2 = tau^2 I
        let tau2 = self.noise_variance;
        let quad = alpha.dot(&alpha) * tau2;
        let tr = kinv.trace() * tau2;
        grad.push(half * (quad - tr));
        Ok((lml, DVector::from_vec(grad)))
    }

    /// Fits hyperparameters by Adam ascent on the marginal likelihood,
    /// returning the best parameters seen. Standardization constants
    /// are recomputed from the data before fitting.
    pub fn fit(&self, data: &Dataset<T>, steps: usize, step_size: T) -> Result<Self> {
        if data.len() < 2 {
            return Err(Error::InvalidArgument(
                "fitting needs at least two observations".into(),
            ));
        }
        let mut model = self.clone();
        model.set_standardization(data);
        let initial = model.log_marginal_likelihood(data)?;
        if !initial.is_finite() {
            return Err(Error::Initialization(
                "marginal likelihood is not finite at the initial hyperparameters".into(),
            ));
        }
        let np = model.num_params();
        let mut theta: Vec<T> = model.unconstrained_params();
        let mut best_theta = theta.clone();
        let mut best_lml = initial;
        let beta1 = T::from_f64(0.9).unwrap();
        let beta2 = T::from_f64(0.999).unwrap();
        let eps = T::from_f64(1e-8).unwrap();
        let mut m1 = vec![T::zero(); np];
        let mut m2 = vec![T::zero(); np];
        let mut beta1_t = T::one();
        let mut beta2_t = T::one();
        for _ in 0..steps {
            let (lml, grad) = model.lml_and_gradient(data)?;
            if lml.is_finite() && lml > best_lml {
                best_lml = lml;
                best_theta = theta.clone();
            }
            beta1_t *= beta1;
            beta2_t *= beta2;
            for i in 0..np {
                let g = grad[i];
                m1[i] = beta1 * m1[i] + (T::one() - beta1) * g;
                m2[i] = beta2 * m2[i] + (T::one() - beta2) * g * g;
                let mhat = m1[i] / (T::one() - beta1_t);
                let vhat = m2[i] / (T::one() - beta2_t);
                theta[i] += step_size * mhat / (vhat.sqrt() + eps);
            }
            model = model.with_unconstrained_params(&theta)?;
        }
        let final_lml = model.log_marginal_likelihood(data)?;
        if final_lml.is_finite() && final_lml > best_lml {
            best_theta = theta;
        }
        model.with_unconstrained_params(&best_theta)
    }
}

/// JSON form of the model hyperparameters, for benchmark logging.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelJson {
    pub groups: Vec<Vec<usize>>,
    pub lengthscales: Vec<Vec<f64>>,
    pub signal_variances: Vec<f64>,
    pub noise_variance: f64,
    pub y_shift: f64,
    pub y_scale: f64,
}

impl AdditiveGpModel<f64> {
    pub fn to_json(&self) -> ModelJson {
        ModelJson {
            groups: self.structure.groups().to_vec(),
            lengthscales: self
                .kernels
                .iter()
                .map(|k| k.lengthscales().iter().copied().collect())
                .collect(),
            signal_variances: self.kernels.iter().map(|k| k.signal_variance()).collect(),
            noise_variance: self.noise_variance,
            y_shift: self.y_shift,
            y_scale: self.y_scale,
        }
    }

    pub fn from_json(json: &ModelJson) -> Result<Self> {
        let p = json.groups.iter().map(|g| g.len()).sum();
        let structure = AdditiveStructure::new(json.groups.clone(), p)?;
        if json.lengthscales.len() != structure.num_groups()
            || json.signal_variances.len() != structure.num_groups()
        {
            return Err(Error::Shape("kernel parameter counts do not match groups".into()));
        }
        let mut kernels = Vec::new();
        for (m, ls) in json.lengthscales.iter().enumerate() {
            kernels.push(SubKernel::new(ls, json.signal_variances[m])?);
        }
        let mut model = AdditiveGpModel::with_kernels(structure, kernels, json.noise_variance)?;
        model.y_shift = json.y_shift;
        model.y_scale = json.y_scale;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_cube_matrix(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(rows, cols, |_, _| rng.random::<f64>())
    }

    fn random_model(p: usize, groups: Vec<Vec<usize>>, seed: u64) -> AdditiveGpModel<f64> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = AdditiveStructure::new(groups, p).unwrap();
        let kernels = (0..s.num_groups())
            .map(|m| {
                let d = s.group_dim(m);
                let ls: Vec<f64> = (0..d).map(|_| 0.2 + 0.6 * rng.random::<f64>()).collect();
                SubKernel::new(&ls, 0.3 + rng.random::<f64>()).unwrap()
            })
            .collect();
        AdditiveGpModel::with_kernels(s, kernels, 0.05).unwrap()
    }

    fn random_instance(seed: u64) -> (AdditiveGpModel<f64>, Dataset<f64>) {
        let model = random_model(4, vec![vec![1, 3], vec![2], vec![4]], seed);
        let x = unit_cube_matrix(8, 4, seed + 1000);
        let y = unit_cube_matrix(8, 1, seed + 2000).column(0).into_owned() * 3.0;
        let mut model = model;
        let data = Dataset::new(x, y).unwrap();
        model.set_standardization(&data);
        (model, data)
    }

    /// Test-local plain GP predictor on a caller-supplied kernel
    /// function, using a dense inverse rather than the crate's solver.
    fn textbook_gp_predict(
        kernel: &dyn Fn(&[f64], &[f64]) -> f64,
        tau2: f64,
        x: &DMatrix<f64>,
        yhat: &DVector<f64>,
        xnew: &DMatrix<f64>,
    ) -> (DVector<f64>, DMatrix<f64>) {
        let n = x.nrows();
        let row = |m: &DMatrix<f64>, i: usize| -> Vec<f64> { m.row(i).iter().copied().collect() };
        let mut kxx = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                kxx[(i, j)] = kernel(&row(x, i), &row(x, j));
            }
            kxx[(i, i)] += tau2;
        }
        let kinv = kxx.try_inverse().unwrap();
        let nn = xnew.nrows();
        let mut kxz = DMatrix::zeros(n, nn);
        let mut kzz = DMatrix::zeros(nn, nn);
        for i in 0..nn {
            for j in 0..n {
                kxz[(j, i)] = kernel(&row(x, j), &row(xnew, i));
            }
            for j in 0..nn {
                kzz[(i, j)] = kernel(&row(xnew, i), &row(xnew, j));
            }
        }
        let mean = kxz.transpose() * &kinv * yhat;
        let cov = kzz - kxz.transpose() * &kinv * kxz;
        (mean, cov)
    }

    #[test]
    fn train_gram_single_point_two_groups() {
        let s = AdditiveStructure::new(vec![vec![1], vec![2]], 2).unwrap();
        let kernels = vec![
            SubKernel::new(&[0.5], 1.0).unwrap(),
            SubKernel::new(&[0.5], 1.0).unwrap(),
        ];
        let model = AdditiveGpModel::with_kernels(s, kernels, 0.1).unwrap();
        let data = Dataset::new(
            DMatrix::from_row_slice(1, 2, &[0.3, 0.7]),
            DVector::from_column_slice(&[1.0]),
        )
        .unwrap();
        let f = model.train_gram(&data).unwrap();
        let rec = f.lower() * f.lower().transpose();
        assert_relative_eq!(rec[(0, 0)], 2.1, max_relative = 1e-12);
    }

    #[test]
    fn train_gram_invariant_under_group_permutation() {
        let (model, data) = random_instance(3);
        // same kernels attached to the same coordinate groups, groups
        // listed in a different order at construction
        let perm = AdditiveGpModel::with_kernels(
            AdditiveStructure::new(
                vec![vec![4], vec![1, 3], vec![2]],
                4,
            )
            .unwrap(),
            vec![
                model.kernel(0).clone(),
                model.kernel(1).clone(),
                model.kernel(2).clone(),
            ],
            model.noise_variance(),
        )
        .unwrap();
        let f1 = model.train_gram(&data).unwrap();
        let f2 = perm.train_gram(&data).unwrap();
        let g1 = f1.lower() * f1.lower().transpose();
        let g2 = f2.lower() * f2.lower().transpose();
        assert_relative_eq!(g1, g2, max_relative = 1e-12);
    }

    #[test]
    fn empty_dataset_prediction_is_prior() {
        let (mut model, _) = random_instance(5);
        model.y_shift = 2.0;
        model.y_scale = 1.5;
        let data = Dataset::empty(4);
        let xnew = unit_cube_matrix(3, 4, 99);
        let g = model.predict_exact(&data, &xnew).unwrap();
        for v in g.mean.iter() {
            assert_relative_eq!(*v, 2.0, max_relative = 1e-12);
        }
        let prior = model.summed_cross_cov(&xnew, &xnew).unwrap() * (1.5 * 1.5);
        assert_relative_eq!(g.covariance, prior, max_relative = 1e-12);
        let ga = model.predict_additive(&data, &xnew).unwrap();
        assert_relative_eq!(ga.covariance, g.covariance, max_relative = 1e-12);
    }

    #[test]
    fn single_group_matches_textbook_gp() {
        let mut model = random_model(3, vec![vec![1, 2, 3]], 11);
        let x = unit_cube_matrix(7, 3, 12);
        let y = unit_cube_matrix(7, 1, 13).column(0).into_owned();
        let data = Dataset::new(x.clone(), y).unwrap();
        model.set_standardization(&data);
        let xnew = unit_cube_matrix(4, 3, 14);
        let got = model.predict_exact(&data, &xnew).unwrap();
        let k = model.kernel(0).clone();
        let kernel = move |a: &[f64], b: &[f64]| {
            k.eval(
                &DVector::from_column_slice(a),
                &DVector::from_column_slice(b),
            )
            .unwrap()
        };
        let yhat = model.standardized_y(&data);
        let (mean, cov) = textbook_gp_predict(&kernel, model.noise_variance(), &x, &yhat, &xnew);
        let mean = mean.map(|v| model.y_shift() + model.y_scale() * v);
        let cov = cov * model.y_scale() * model.y_scale();
        assert!((got.mean - mean).norm() < 1e-8);
        assert!((got.covariance - cov).norm() < 1e-8);
    }

    #[test]
    fn single_training_point_hand_formula() {
        let s = AdditiveStructure::new(vec![vec![1], vec![2]], 2).unwrap();
        let kernels = vec![
            SubKernel::new(&[0.5], 0.7).unwrap(),
            SubKernel::new(&[0.5], 0.5).unwrap(),
        ];
        let mut model = AdditiveGpModel::with_kernels(s, kernels, 0.1).unwrap();
        model.y_shift = 3.0;
        model.y_scale = 2.0;
        let x = DMatrix::from_row_slice(1, 2, &[0.4, 0.6]);
        let data = Dataset::new(x.clone(), DVector::from_column_slice(&[5.0])).unwrap();
        let g = model.predict_exact(&data, &x).unwrap();
        let v = 0.7 + 0.5;
        let yhat = (5.0 - 3.0) / 2.0;
        let expected = 3.0 + 2.0 * yhat * v / (v + 0.1);
        assert_relative_eq!(g.mean[0], expected, max_relative = 1e-10);
    }

    #[test]
    fn additive_covariance_matches_direct_assembly() {
        let (model, data) = random_instance(21);
        let xnew = unit_cube_matrix(5, 4, 22);
        let got = model.predict_additive(&data, &xnew).unwrap();
        // direct assembly with a dense inverse
        let n = data.len();
        let mut ktilde = model.summed_cross_cov(data.x(), data.x()).unwrap();
        for i in 0..n {
            ktilde[(i, i)] += model.noise_variance();
        }
        let kinv = ktilde.try_inverse().unwrap();
        let mut cov = model.summed_cross_cov(&xnew, &xnew).unwrap();
        for m in 0..model.structure().num_groups() {
            let px = model.structure().project(m, data.x()).unwrap();
            let pz = model.structure().project(m, &xnew).unwrap();
            let kxz = model.kernel(m).cross_cov(&px, &pz).unwrap();
            cov -= kxz.transpose() * &kinv * kxz;
        }
        cov *= model.y_scale() * model.y_scale();
        assert!((got.covariance - cov).norm() < 1e-8);
    }

    #[test]
    fn exact_and_additive_means_agree() {
        for seed in 0..5u64 {
            let (model, data) = random_instance(seed * 7 + 1);
            let xnew = unit_cube_matrix(6, 4, seed + 500);
            let e = model.predict_exact(&data, &xnew).unwrap();
            let a = model.predict_additive(&data, &xnew).unwrap();
            assert!((e.mean - a.mean).norm() < 1e-10);
        }
    }

    #[test]
    fn exact_prediction_equals_summed_kernel_gp() {
        let (model, data) = random_instance(31);
        let xnew = unit_cube_matrix(5, 4, 32);
        let got = model.predict_exact(&data, &xnew).unwrap();
        let m2 = model.clone();
        let kernel = move |a: &[f64], b: &[f64]| {
            let am = DMatrix::from_row_slice(1, a.len(), a);
            let bm = DMatrix::from_row_slice(1, b.len(), b);
            m2.summed_cross_cov(&am, &bm).unwrap()[(0, 0)]
        };
        let yhat = model.standardized_y(&data);
        let (mean, cov) =
            textbook_gp_predict(&kernel, model.noise_variance(), data.x(), &yhat, &xnew);
        let mean = mean.map(|v| model.y_shift() + model.y_scale() * v);
        let cov = cov * model.y_scale() * model.y_scale();
        assert!((got.mean - mean).norm() < 1e-10);
        assert!((got.covariance - cov).norm() < 1e-10);
    }

    #[test]
    fn subfunction_marginal_trivia() {
        let (model, data) = random_instance(41);
        // N = 0: zero mean, prior covariance
        let empty = Dataset::empty(4);
        let z = unit_cube_matrix(3, 2, 42);
        let g = model.subfunction_marginal(&empty, 0, &z).unwrap();
        assert_eq!(g.mean, DVector::zeros(3));
        let prior = model.kernel(0).cross_cov(&z, &z).unwrap();
        assert_relative_eq!(g.covariance, prior, max_relative = 1e-12);
        // bad group index
        assert!(model.subfunction_marginal(&data, 9, &z).is_err());
    }

    #[test]
    fn subfunction_means_sum_to_exact_mean() {
        let (model, data) = random_instance(51);
        let xnew = unit_cube_matrix(6, 4, 52);
        let mut sum = DVector::zeros(6);
        for m in 0..model.structure().num_groups() {
            let pz = model.structure().project(m, &xnew).unwrap();
            sum += model.subfunction_marginal(&data, m, &pz).unwrap().mean;
        }
        let exact = model.predict_exact(&data, &xnew).unwrap();
        let exact_std = exact
            .mean
            .map(|v| (v - model.y_shift()) / model.y_scale());
        assert!((sum - exact_std).norm() < 1e-8);
    }

    #[test]
    fn posterior_variance_bounded_by_prior() {
        for seed in 0..5u64 {
            let (model, data) = random_instance(seed + 61);
            let xnew = unit_cube_matrix(6, 4, seed + 71);
            let g = model.predict_exact(&data, &xnew).unwrap();
            let prior_var: f64 = model
                .kernels()
                .iter()
                .map(|k| k.signal_variance())
                .sum::<f64>()
                * model.y_scale()
                * model.y_scale();
            for v in g.variances().iter() {
                assert!(*v <= prior_var + 1e-8);
            }
        }
    }

    #[test]
    fn lml_single_point_hand_formula() {
        let s = AdditiveStructure::new(vec![vec![1], vec![2]], 2).unwrap();
        let kernels = vec![
            SubKernel::new(&[0.5], 0.7).unwrap(),
            SubKernel::new(&[0.5], 0.5).unwrap(),
        ];
        let model = AdditiveGpModel::with_kernels(s, kernels, 0.1).unwrap();
        let data = Dataset::new(
            DMatrix::from_row_slice(1, 2, &[0.4, 0.6]),
            DVector::from_column_slice(&[0.8]),
        )
        .unwrap();
        let v = 0.7 + 0.5 + 0.1;
        let expected = -0.5 * (0.8f64.powi(2) / v + (2.0 * std::f64::consts::PI * v).ln());
        assert_relative_eq!(
            model.log_marginal_likelihood(&data).unwrap(),
            expected,
            max_relative = 1e-12
        );
    }

    #[test]
    fn lml_requires_data() {
        let (model, _) = random_instance(81);
        assert!(model.log_marginal_likelihood(&Dataset::empty(4)).is_err());
    }

    #[test]
    fn duplicated_point_does_not_raise_average_likelihood() {
        let s = AdditiveStructure::new(vec![vec![1]], 1).unwrap();
        let kernels = vec![SubKernel::new(&[0.5], 1.0).unwrap()];
        let model = AdditiveGpModel::with_kernels(s, kernels, 1e6).unwrap();
        let one = Dataset::new(
            DMatrix::from_row_slice(1, 1, &[0.3]),
            DVector::from_column_slice(&[0.7]),
        )
        .unwrap();
        let two = Dataset::new(
            DMatrix::from_row_slice(2, 1, &[0.3, 0.3]),
            DVector::from_column_slice(&[0.7, 0.7]),
        )
        .unwrap();
        let l1 = model.log_marginal_likelihood(&one).unwrap();
        let l2 = model.log_marginal_likelihood(&two).unwrap();
        assert!(l2 / 2.0 <= l1 + 1e-9);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut model = random_model(5, vec![vec![1, 4], vec![2, 5], vec![3]], 91);
        let x = unit_cube_matrix(10, 5, 92);
        let y = unit_cube_matrix(10, 1, 93).column(0).into_owned() * 2.0;
        let data = Dataset::new(x, y).unwrap();
        model.set_standardization(&data);
        let grad = model.lml_gradient(&data).unwrap();
        assert!(grad.iter().all(|g| g.is_finite()));
        let theta = model.unconstrained_params();
        let h = 1e-6;
        for i in 0..theta.len() {
            let mut plus = theta.clone();
            let mut minus = theta.clone();
            plus[i] += h;
            minus[i] -= h;
            let lp = model
                .with_unconstrained_params(&plus)
                .unwrap()
                .log_marginal_likelihood(&data)
                .unwrap();
            let lm = model
                .with_unconstrained_params(&minus)
                .unwrap()
                .log_marginal_likelihood(&data)
                .unwrap();
            let fd = (lp - lm) / (2.0 * h);
            let denom = grad[i].abs().max(1e-6);
            assert!(
                (fd - grad[i]).abs() / denom < 1e-5,
                "parameter {i}: analytic {} vs fd {}",
                grad[i],
                fd
            );
        }
    }

    #[test]
    fn noise_gradient_sign_at_huge_noise() {
        let (model, data) = random_instance(101);
        let mut theta = model.unconstrained_params();
        let np = theta.len();
        theta[np - 1] = (1e6f64).ln();
        let big = model.with_unconstrained_params(&theta).unwrap();
        let grad = big.lml_gradient(&data).unwrap();
        // With tau^2 huge, K ~ tau^2 I and d lml / d log tau^2 ~
        // -N/2 (1 - yhat'yhat / (N tau^2)), which is negative here.
        let n = data.len() as f64;
        let yhat = big.standardized_y(&data);
        let expected = -0.5 * n * (1.0 - yhat.dot(&yhat) / (n * 1e6));
        assert!(grad[np - 1] < 0.0);
        assert_relative_eq!(grad[np - 1], expected, max_relative = 1e-2);
    }

    #[test]
    fn fit_improves_likelihood_and_is_deterministic() {
        let (model, data) = random_instance(111);
        let fresh = AdditiveGpModel::new(model.structure().clone());
        let mut init = fresh.clone();
        init.set_standardization(&data);
        let before = init.log_marginal_likelihood(&data).unwrap();
        let fitted = fresh.fit(&data, 200, 1e-3).unwrap();
        let after = fitted.log_marginal_likelihood(&data).unwrap();
        assert!(after >= before);
        let fitted2 = fresh.fit(&data, 200, 1e-3).unwrap();
        assert_eq!(
            fitted.unconstrained_params(),
            fitted2.unconstrained_params()
        );
    }

    #[test]
    fn fit_recovers_single_group_lengthscale() {
        use crate::numerics::{factor_psd, sample_gaussian, JitterPolicy};
        let s = AdditiveStructure::new(vec![vec![1]], 1).unwrap();
        let true_l = 0.6;
        let truth = AdditiveGpModel::with_kernels(
            s.clone(),
            vec![SubKernel::new(&[true_l], 1.0).unwrap()],
            1e-4,
        )
        .unwrap();
        let x = unit_cube_matrix(80, 1, 121);
        let gram = truth.summed_cross_cov(&x, &x).unwrap();
        let f = factor_psd(&gram, JitterPolicy::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(122);
        let y = sample_gaussian(&DVector::zeros(80), &f, 1, &mut rng)
            .unwrap()
            .column(0)
            .into_owned();
        let data = Dataset::new(x, y).unwrap();
        let fitted = AdditiveGpModel::new(s).fit(&data, 1000, 1e-4).unwrap();
        let log_l = fitted.kernel(0).lengthscales()[0].ln();
        assert!((log_l - true_l.ln()).abs() < 0.5);
    }

    #[test]
    fn fit_requires_two_points() {
        let (model, _) = random_instance(131);
        let one = Dataset::new(
            unit_cube_matrix(1, 4, 132),
            DVector::from_column_slice(&[1.0]),
        )
        .unwrap();
        assert!(model.fit(&one, 10, 1e-4).is_err());
    }

    #[test]
    fn noise_floor_is_enforced() {
        let (model, _) = random_instance(141);
        let mut theta = model.unconstrained_params();
        let np = theta.len();
        theta[np - 1] = -100.0;
        let m = model.with_unconstrained_params(&theta).unwrap();
        assert!(m.noise_variance() >= NOISE_FLOOR);
    }

    #[test]
    fn dataset_validation() {
        assert!(Dataset::new(
            DMatrix::from_row_slice(1, 2, &[0.5, 1.5]),
            DVector::from_column_slice(&[1.0])
        )
        .is_err());
        assert!(Dataset::new(
            DMatrix::from_row_slice(1, 2, &[0.5, 0.5]),
            DVector::from_column_slice(&[1.0, 2.0])
        )
        .is_err());
    }

    #[test]
    fn model_json_round_trip() {
        let (mut model, data) = random_instance(151);
        model.set_standardization(&data);
        let js = serde_json::to_string(&model.to_json()).unwrap();
        let parsed: ModelJson = serde_json::from_str(&js).unwrap();
        let back = AdditiveGpModel::from_json(&parsed).unwrap();
        assert_eq!(back.unconstrained_params(), model.unconstrained_params());
        assert_eq!(back.y_shift(), model.y_shift());
        assert_eq!(back.y_scale(), model.y_scale());
    }
}
