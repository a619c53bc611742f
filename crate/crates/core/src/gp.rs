//! Gaussian process regression on values only, or on values plus gradient
//! observations, with hyperparameters fitted by maximizing the log marginal
//! likelihood.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::kernel::{covariance_blocks, SEHyperparams};
use crate::linalg::{cholesky_psd, log_det_from_factor, CholFactor, SymMatrix};
use crate::points::Points;

/// Relative jitter used when factoring `K + sigma^2 I`.
pub const GRAM_JITTER: f64 = 1e-10;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Scheme {
    /// Values and gradients are observed (BALGPD).
    WithDerivatives,
    /// Values only (BALGP).
    ValuesOnly,
}

impl Scheme {
    pub fn is_extended(self) -> bool {
        matches!(self, Scheme::WithDerivatives)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    inputs: Points,
    outputs: Vec<f64>,
    gradients: Option<Points>,
}

impl Dataset {
    pub fn new(inputs: Points, outputs: Vec<f64>, gradients: Option<Points>) -> Result<Self> {
        if outputs.len() != inputs.len() {
            return Err(Error::DimensionMismatch {
                expected: inputs.len(),
                found: outputs.len(),
            });
        }
        if let Some(g) = &gradients {
            if g.len() != inputs.len() {
                return Err(Error::DimensionMismatch {
                    expected: inputs.len(),
                    found: g.len(),
                });
            }
            if g.dim() != inputs.dim() {
                return Err(Error::DimensionMismatch {
                    expected: inputs.dim(),
                    found: g.dim(),
                });
            }
        }
        Ok(Self {
            inputs,
            outputs,
            gradients,
        })
    }

    pub fn values_only(inputs: Points, outputs: Vec<f64>) -> Result<Self> {
        Self::new(inputs, outputs, None)
    }

    pub fn inputs(&self) -> &Points {
        &self.inputs
    }

    pub fn outputs(&self) -> &[f64] {
        &self.outputs
    }

    pub fn gradients(&self) -> Option<&Points> {
        self.gradients.as_ref()
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.dim()
    }

    /// Appends rows. Gradients must be supplied iff the dataset already carries them.
    pub fn append(
        &mut self,
        inputs: &Points,
        outputs: &[f64],
        gradients: Option<&Points>,
    ) -> Result<()> {
        if outputs.len() != inputs.len() {
            return Err(Error::DimensionMismatch {
                expected: inputs.len(),
                found: outputs.len(),
            });
        }
        match (&mut self.gradients, gradients) {
            (Some(own), Some(g)) => {
                if g.len() != inputs.len() {
                    return Err(Error::DimensionMismatch {
                        expected: inputs.len(),
                        found: g.len(),
                    });
                }
                own.extend(g)?;
            }
            (None, None) => {}
            _ => {
                return Err(Error::DegenerateData(
                    "gradient rows must accompany gradient datasets".into(),
                ))
            }
        }
        self.inputs.extend(inputs)?;
        self.outputs.extend_from_slice(outputs);
        Ok(())
    }

    /// Observation vector for a scheme: values, then gradients point-major.
    fn stacked(&self, scheme: Scheme) -> Result<DVector<f64>> {
        let mut y = self.outputs.clone();
        if scheme.is_extended() {
            let g = self.gradients.as_ref().ok_or_else(|| {
                Error::DegenerateData("derivative scheme requires gradient observations".into())
            })?;
            y.extend_from_slice(g.as_slice());
        }
        Ok(DVector::from_vec(y))
    }

    fn check_for(&self, scheme: Scheme, theta: &SEHyperparams) -> Result<()> {
        if self.is_empty() {
            return Err(Error::DegenerateData("dataset has no observations".into()));
        }
        if self.dim() != theta.dim() {
            return Err(Error::DimensionMismatch {
                expected: theta.dim(),
                found: self.dim(),
            });
        }
        if scheme.is_extended() && self.gradients.is_none() {
            return Err(Error::DegenerateData(
                "derivative scheme requires gradient observations".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct OptimizerConfig {
    pub starts: usize,
    pub max_iters: usize,
    /// Stop when the objective improves by less than this.
    pub tol: f64,
    /// Central-difference step in log-parameter space.
    pub fd_step: f64,
    /// Standard deviation of the log-space perturbation for extra starts.
    pub perturbation: f64,
    pub optimize_signal: bool,
    pub optimize_noise: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            starts: 5,
            max_iters: 200,
            tol: 1e-6,
            fd_step: 1e-5,
            perturbation: 1.0,
            optimize_signal: true,
            optimize_noise: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GpModel {
    dataset: Dataset,
    theta: SEHyperparams,
    scheme: Scheme,
    factor: CholFactor,
    alpha: DVector<f64>,
}

#[derive(Clone, Debug)]
pub struct PredictiveBatch {
    pub mean_points: Vec<f64>,
    /// Point-major, `n*d` entries; empty for the values-only scheme.
    pub mean_grads: Vec<f64>,
    pub cov_points: SymMatrix,
    /// `n x (n*d)`; zero columns for the values-only scheme.
    pub cov_cross: DMatrix<f64>,
    pub cov_grads: Option<SymMatrix>,
}

impl PredictiveBatch {
    /// Full joint covariance in `[values | gradients]` layout.
    pub fn assembled(&self) -> SymMatrix {
        let n = self.mean_points.len();
        let g = self.cov_cross.ncols();
        let mut m = DMatrix::zeros(n + g, n + g);
        m.view_mut((0, 0), (n, n))
            .copy_from(self.cov_points.as_matrix());
        if let Some(cg) = &self.cov_grads {
            m.view_mut((0, n), (n, g)).copy_from(&self.cov_cross);
            m.view_mut((n, 0), (g, n))
                .copy_from(&self.cov_cross.transpose());
            m.view_mut((n, n), (g, g)).copy_from(cg.as_matrix());
        }
        SymMatrix::symmetrize(m)
    }
}

fn gram(x: &Points, scheme: Scheme, theta: &SEHyperparams) -> DMatrix<f64> {
    let ext = scheme.is_extended();
    covariance_blocks(x, ext, x, ext, theta)
}

fn factor_gram(x: &Points, scheme: Scheme, theta: &SEHyperparams) -> Result<CholFactor> {
    let mut k = gram(x, scheme, theta);
    for i in 0..k.nrows() {
        k[(i, i)] += theta.noise_variance;
    }
    cholesky_psd(&SymMatrix::symmetrize(k), GRAM_JITTER)
}

/// Log density of the stacked observations under the GP prior plus noise.
pub fn log_marginal_likelihood(
    data: &Dataset,
    scheme: Scheme,
    theta: &SEHyperparams,
) -> Result<f64> {
    data.check_for(scheme, theta)?;
    theta.validate()?;
    let y = data.stacked(scheme)?;
    let factor = factor_gram(data.inputs(), scheme, theta)?;
    let w = factor
        .lower()
        .solve_lower_triangular(&y)
        .expect("positive diagonal");
    let m = y.len() as f64;
    Ok(-0.5 * w.norm_squared() - 0.5 * log_det_from_factor(&factor) - 0.5 * m * LN_2PI)
}

/// Hyperparameters in the optimizer's log coordinates:
/// `[ln sigma_f^2, ln l_1, .., ln l_d, ln sigma^2]`.
#[derive(Clone, Debug)]
struct LogSpace {
    lower: Vec<f64>,
    upper: Vec<f64>,
    free: Vec<bool>,
}

impl LogSpace {
    fn new(data: &Dataset, cfg: &OptimizerConfig) -> Self {
        let d = data.dim();
        let mut lower = vec![1e-6f64.ln()];
        let mut upper = vec![1e6f64.ln()];
        for k in 0..d {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for row in data.inputs().rows() {
                lo = lo.min(row[k]);
                hi = hi.max(row[k]);
            }
            let range = hi - lo;
            let scale = if range > 1e-12 { range } else { 1.0 };
            lower.push(scale.ln() - 5.0);
            upper.push(scale.ln() + 5.0);
        }
        lower.push(1e-8f64.ln());
        upper.push(1e3f64.ln());
        let mut free = vec![cfg.optimize_signal];
        free.extend(std::iter::repeat_n(true, d));
        free.push(cfg.optimize_noise);
        Self { lower, upper, free }
    }

    fn encode(theta: &SEHyperparams) -> Vec<f64> {
        let mut p = vec![theta.signal_variance.ln()];
        p.extend(theta.lengthscales.iter().map(|l| l.ln()));
        p.push(theta.noise_variance.max(1e-300).ln());
        p
    }

    fn decode(&self, p: &[f64], fixed: &SEHyperparams) -> SEHyperparams {
        let d = p.len() - 2;
        SEHyperparams {
            signal_variance: if self.free[0] {
                p[0].exp()
            } else {
                fixed.signal_variance
            },
            lengthscales: p[1..=d].iter().map(|v| v.exp()).collect(),
            noise_variance: if self.free[d + 1] {
                p[d + 1].exp()
            } else {
                fixed.noise_variance
            },
        }
    }

    fn clamp(&self, p: &mut [f64]) {
        for (i, v) in p.iter_mut().enumerate() {
            if self.free[i] {
                *v = v.clamp(self.lower[i], self.upper[i]);
            }
        }
    }
}

struct Objective<'a> {
    data: &'a Dataset,
    scheme: Scheme,
    space: LogSpace,
    anchor: SEHyperparams,
    fd_step: f64,
}

impl Objective<'_> {
    fn value(&self, p: &[f64]) -> f64 {
        let theta = self.space.decode(p, &self.anchor);
        log_marginal_likelihood(self.data, self.scheme, &theta).unwrap_or(f64::NEG_INFINITY)
    }

    fn gradient(&self, p: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; p.len()];
        let mut q = p.to_vec();
        for i in 0..p.len() {
            if !self.space.free[i] {
                continue;
            }
            q[i] = p[i] + self.fd_step;
            let up = self.value(&q);
            q[i] = p[i] - self.fd_step;
            let down = self.value(&q);
            q[i] = p[i];
            let gi = (up - down) / (2.0 * self.fd_step);
            g[i] = if gi.is_finite() { gi } else { 0.0 };
        }
        g
    }

    /// Zero the components that would push a clamped coordinate out of bounds.
    fn project(&self, p: &[f64], g: &mut [f64]) {
        for i in 0..p.len() {
            let at_lo = p[i] <= self.space.lower[i] && g[i] < 0.0;
            let at_hi = p[i] >= self.space.upper[i] && g[i] > 0.0;
            if at_lo || at_hi || !self.space.free[i] {
                g[i] = 0.0;
            }
        }
    }

    /// Quasi-Newton (BFGS) ascent with finite-difference gradients and
    /// backtracking on the projected step.
    fn ascend(&self, start: Vec<f64>, max_iters: usize, tol: f64) -> (Vec<f64>, f64) {
        let m = start.len();
        let mut p = start;
        self.space.clamp(&mut p);
        let mut fp = self.value(&p);
        if !fp.is_finite() {
            return (p, fp);
        }
        let mut g = self.gradient(&p);
        self.project(&p, &mut g);
        let mut h = DMatrix::<f64>::identity(m, m);
        for _ in 0..max_iters {
            let gv = DVector::from_column_slice(&g);
            if gv.amax() == 0.0 {
                break;
            }
            let mut dir = &h * &gv;
            if dir.dot(&gv) <= 0.0 {
                h.fill_with_identity();
                dir = gv.clone();
            }
            let norm = dir.norm();
            if norm > 2.0 {
                dir *= 2.0 / norm;
            }
            let mut t = 1.0;
            let mut accepted = None;
            for _ in 0..30 {
                let mut q: Vec<f64> = p.iter().zip(dir.iter()).map(|(a, b)| a + t * b).collect();
                self.space.clamp(&mut q);
                let fq = self.value(&q);
                if fq.is_finite() && fq > fp {
                    accepted = Some((q, fq));
                    break;
                }
                t *= 0.5;
            }
            let Some((q, fq)) = accepted else { break };
            let mut gq = self.gradient(&q);
            self.project(&q, &mut gq);
            let s = DVector::from_iterator(m, q.iter().zip(&p).map(|(a, b)| a - b));
            // curvature pair for the minimization of -lml
            let y = DVector::from_iterator(m, g.iter().zip(&gq).map(|(a, b)| a - b));
            let sy = s.dot(&y);
            if sy > 1e-12 {
                let rho = 1.0 / sy;
                let ident = DMatrix::<f64>::identity(m, m);
                let left = &ident - rho * &s * y.transpose();
                let right = &ident - rho * &y * s.transpose();
                h = &left * &h * &right + rho * &s * s.transpose();
            }
            let improvement = fq - fp;
            p = q;
            fp = fq;
            g = gq;
            if improvement < tol {
                break;
            }
        }
        (p, fp)
    }
}

/// Finite-difference gradient of the log marginal likelihood with respect to
/// the log-parameters `[ln sigma_f^2, ln l_k.., ln sigma^2]`, as used by [`fit`].
/// Fixed parameters get a zero component.
pub fn lml_gradient(
    data: &Dataset,
    scheme: Scheme,
    theta: &SEHyperparams,
    cfg: &OptimizerConfig,
) -> Result<Vec<f64>> {
    data.check_for(scheme, theta)?;
    let obj = Objective {
        data,
        scheme,
        space: LogSpace::new(data, cfg),
        anchor: theta.clone(),
        fd_step: cfg.fd_step,
    };
    Ok(obj.gradient(&LogSpace::encode(theta)))
}

/// Fits hyperparameters by multi-start ascent on the log marginal likelihood.
///
/// The first start is `theta_init` itself (clamped to the bounds), so the
/// result never scores below the initial point.
pub fn fit(
    data: &Dataset,
    scheme: Scheme,
    theta_init: &SEHyperparams,
    opt: &OptimizerConfig,
    rng_seed: u64,
) -> Result<GpModel> {
    data.check_for(scheme, theta_init)?;
    theta_init.validate()?;
    let space = LogSpace::new(data, opt);
    let obj = Objective {
        data,
        scheme,
        space,
        anchor: theta_init.clone(),
        fd_step: opt.fd_step,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let p0 = LogSpace::encode(theta_init);
    let mut best: Option<(Vec<f64>, f64)> = None;
    for s in 0..opt.starts.max(1) {
        let mut start = p0.clone();
        if s > 0 {
            for (i, v) in start.iter_mut().enumerate() {
                let z: f64 = StandardNormal.sample(&mut rng);
                if obj.space.free[i] {
                    *v += opt.perturbation * z;
                }
            }
        }
        let (p, fp) = obj.ascend(start, opt.max_iters, opt.tol);
        if fp.is_finite() && best.as_ref().is_none_or(|(_, fb)| fp > *fb) {
            best = Some((p, fp));
        }
    }
    let theta = match best {
        Some((p, _)) => obj.space.decode(&p, theta_init),
        None => return Err(Error::NotPositiveDefinite { jitter: f64::NAN }),
    };
    GpModel::condition(data.clone(), scheme, theta)
}

impl GpModel {
    /// Conditions on `data` at fixed hyperparameters.
    pub fn condition(data: Dataset, scheme: Scheme, theta: SEHyperparams) -> Result<Self> {
        data.check_for(scheme, &theta)?;
        theta.validate()?;
        let y = data.stacked(scheme)?;
        let factor = factor_gram(data.inputs(), scheme, &theta)?;
        let alpha = crate::linalg::solve_with_factor(
            &factor,
            &DMatrix::from_column_slice(y.len(), 1, y.as_slice()),
        )?
        .column(0)
        .into_owned();
        Ok(Self {
            dataset: data,
            theta,
            scheme,
            factor,
            alpha,
        })
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn theta(&self) -> &SEHyperparams {
        &self.theta
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn factor(&self) -> &CholFactor {
        &self.factor
    }

    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    pub fn log_marginal_likelihood(&self) -> Result<f64> {
        log_marginal_likelihood(&self.dataset, self.scheme, &self.theta)
    }

    fn check_test(&self, test: &Points) -> Result<()> {
        if test.dim() != self.theta.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.theta.dim(),
                found: test.dim(),
            });
        }
        if test.is_empty() {
            return Err(Error::DegenerateData("no test points".into()));
        }
        Ok(())
    }

    fn cross(&self, test: &Points, test_ext: bool) -> DMatrix<f64> {
        covariance_blocks(
            self.dataset.inputs(),
            self.scheme.is_extended(),
            test,
            test_ext,
            &self.theta,
        )
    }

    /// `L^{-1} k(train, test)` on values at the test side, plus the cross matrix.
    pub(crate) fn whitened_cross(&self, test: &Points) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        self.check_test(test)?;
        let c = self.cross(test, false);
        let v = self.factor.solve_lower(&c)?;
        Ok((c, v))
    }

    /// All predictive blocks. Covariances are for the latent function
    /// (observation noise excluded).
    pub fn predict(&self, test: &Points) -> Result<PredictiveBatch> {
        self.check_test(test)?;
        if !self.scheme.is_extended() {
            let (mean_points, cov_points) = self.predict_point_block(test)?;
            return Ok(PredictiveBatch {
                mean_points,
                mean_grads: Vec::new(),
                cov_points,
                cov_cross: DMatrix::zeros(test.len(), 0),
                cov_grads: None,
            });
        }
        let n = test.len();
        let d = test.dim();
        let c = self.cross(test, true);
        let mean = c.tr_mul(&self.alpha);
        let v = self.factor.solve_lower(&c)?;
        let prior = covariance_blocks(test, true, test, true, &self.theta);
        let cov = prior - v.tr_mul(&v);
        Ok(PredictiveBatch {
            mean_points: mean.rows(0, n).iter().copied().collect(),
            mean_grads: mean.rows(n, n * d).iter().copied().collect(),
            cov_points: SymMatrix::symmetrize(cov.view((0, 0), (n, n)).into_owned()),
            cov_cross: cov.view((0, n), (n, n * d)).into_owned(),
            cov_grads: Some(SymMatrix::symmetrize(
                cov.view((n, n), (n * d, n * d)).into_owned(),
            )),
        })
    }

    /// Point block `(mean_points, cov_points)` without forming the gradient
    /// test columns. Training-side derivative information still enters.
    pub fn predict_point_block(&self, test: &Points) -> Result<(Vec<f64>, SymMatrix)> {
        let (c, v) = self.whitened_cross(test)?;
        let mean = c.tr_mul(&self.alpha);
        let prior = covariance_blocks(test, false, test, false, &self.theta);
        let cov = prior - v.tr_mul(&v);
        Ok((mean.iter().copied().collect(), SymMatrix::symmetrize(cov)))
    }

    /// Predictive means at the test points.
    pub fn predict_mean(&self, test: &Points) -> Result<Vec<f64>> {
        self.check_test(test)?;
        let c = self.cross(test, false);
        Ok(c.tr_mul(&self.alpha).iter().copied().collect())
    }

    /// Per-point predictive mean and latent variance (no joint covariance).
    pub fn predict_marginal(&self, test: &Points) -> Result<(Vec<f64>, Vec<f64>)> {
        let (c, v) = self.whitened_cross(test)?;
        let mean = c.tr_mul(&self.alpha).iter().copied().collect();
        let var = v
            .column_iter()
            .map(|col| (self.theta.signal_variance - col.norm_squared()).max(0.0))
            .collect();
        Ok((mean, var))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::min_eigenvalue;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn random_dataset(rng: &mut ChaCha8Rng, n0: usize, d: usize) -> Dataset {
        let x = Points::new((0..n0 * d).map(|_| rng.gen_range(-2.0..2.0)).collect(), d).unwrap();
        let y = (0..n0).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let g = Points::new((0..n0 * d).map(|_| rng.gen_range(-1.0..1.0)).collect(), d).unwrap();
        Dataset::new(x, y, Some(g)).unwrap()
    }

    fn random_theta(rng: &mut ChaCha8Rng, d: usize) -> SEHyperparams {
        SEHyperparams::new(
            rng.gen_range(0.5..2.0),
            (0..d).map(|_| rng.gen_range(0.5..1.5)).collect(),
            rng.gen_range(1e-3..0.1),
        )
        .unwrap()
    }

    #[test]
    fn lml_single_value() {
        let data = Dataset::values_only(Points::from_scalars(&[0.0]), vec![0.0]).unwrap();
        let theta = SEHyperparams::isotropic(1.0, 1.0, 1, 1.0).unwrap();
        let lml = log_marginal_likelihood(&data, Scheme::ValuesOnly, &theta).unwrap();
        assert_abs_diff_eq!(
            lml,
            -0.5 * (4.0 * std::f64::consts::PI).ln(),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(lml, -1.26551, epsilon = 1e-5);
    }

    #[test]
    fn lml_single_value_with_gradient() {
        let data = Dataset::new(
            Points::from_scalars(&[0.0]),
            vec![0.0],
            Some(Points::from_scalars(&[0.0])),
        )
        .unwrap();
        let theta = SEHyperparams::isotropic(1.0, 1.0, 1, 1.0).unwrap();
        let lml = log_marginal_likelihood(&data, Scheme::WithDerivatives, &theta).unwrap();
        assert_abs_diff_eq!(lml, -(4.0 * std::f64::consts::PI).ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(lml, -2.53102, epsilon = 1e-5);
    }

    #[test]
    fn lml_matches_dense_inverse_density() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let d = rng.gen_range(1..=2);
            let data = {
                let n = rng.gen_range(1..=5);
                random_dataset(&mut rng, n, d)
            };
            let theta = random_theta(&mut rng, d);
            for scheme in [Scheme::ValuesOnly, Scheme::WithDerivatives] {
                let lml = log_marginal_likelihood(&data, scheme, &theta).unwrap();
                let k = gram(data.inputs(), scheme, &theta);
                let k = k.clone()
                    + DMatrix::<f64>::identity(k.nrows(), k.nrows()) * theta.noise_variance;
                let y = data.stacked(scheme).unwrap();
                let inv = k.clone().try_inverse().unwrap();
                let det = k.determinant();
                let m = y.len() as f64;
                let dense =
                    -0.5 * (y.transpose() * inv * &y)[0] - 0.5 * det.ln() - 0.5 * m * LN_2PI;
                assert_abs_diff_eq!(lml, dense, epsilon = 1e-8 * dense.abs().max(1.0));
            }
        }
    }

    #[test]
    fn lml_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let data = random_dataset(&mut rng, 5, 2);
        let theta = random_theta(&mut rng, 2);
        let perm = [3, 1, 4, 0, 2];
        let y: Vec<f64> = perm.iter().map(|&i| data.outputs()[i]).collect();
        let permuted = Dataset::new(
            data.inputs().select(&perm),
            y,
            data.gradients().map(|g| g.select(&perm)),
        )
        .unwrap();
        for scheme in [Scheme::ValuesOnly, Scheme::WithDerivatives] {
            let a = log_marginal_likelihood(&data, scheme, &theta).unwrap();
            let b = log_marginal_likelihood(&permuted, scheme, &theta).unwrap();
            assert_abs_diff_eq!(a, b, epsilon = 1e-10);
        }
    }

    #[test]
    fn fit_rejects_empty_data() {
        let data = Dataset::values_only(Points::empty(1), vec![]).unwrap();
        let theta = SEHyperparams::isotropic(1.0, 1.0, 1, 0.1).unwrap();
        assert!(matches!(
            fit(
                &data,
                Scheme::ValuesOnly,
                &theta,
                &OptimizerConfig::default(),
                0
            ),
            Err(Error::DegenerateData(_))
        ));
    }

    #[test]
    fn fit_never_loses_to_initial_point() {
        let data = Dataset::values_only(Points::from_scalars(&[0.0]), vec![0.0]).unwrap();
        let theta = SEHyperparams::isotropic(1.0, 1.0, 1, 1.0).unwrap();
        let model = fit(
            &data,
            Scheme::ValuesOnly,
            &theta,
            &OptimizerConfig::default(),
            3,
        )
        .unwrap();
        assert!(model.log_marginal_likelihood().unwrap() >= -1.26551 - 1e-9);
    }

    #[test]
    fn fit_respects_fixed_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data = random_dataset(&mut rng, 6, 1);
        let theta = SEHyperparams::isotropic(1.5, 0.7, 1, 0.01).unwrap();
        let cfg = OptimizerConfig {
            optimize_noise: false,
            optimize_signal: false,
            starts: 2,
            ..Default::default()
        };
        let model = fit(&data, Scheme::WithDerivatives, &theta, &cfg, 1).unwrap();
        assert_eq!(model.theta().signal_variance, 1.5);
        assert_eq!(model.theta().noise_variance, 0.01);
    }

    #[test]
    fn lml_gradient_consistent_with_coarser_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let data = random_dataset(&mut rng, 5, 2);
        let theta = random_theta(&mut rng, 2);
        let cfg = OptimizerConfig::default();
        let internal = lml_gradient(&data, Scheme::WithDerivatives, &theta, &cfg).unwrap();
        let base = LogSpace::encode(&theta);
        let h = 1e-4;
        for i in 0..base.len() {
            let eval = |delta: f64| {
                let mut p = base.clone();
                p[i] += delta;
                let t = SEHyperparams {
                    signal_variance: p[0].exp(),
                    lengthscales: vec![p[1].exp(), p[2].exp()],
                    noise_variance: p[3].exp(),
                };
                log_marginal_likelihood(&data, Scheme::WithDerivatives, &t).unwrap()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            assert!(
                (fd - internal[i]).abs() <= 1e-3 * fd.abs().max(1e-3),
                "component {i}: {fd} vs {}",
                internal[i]
            );
        }
    }

    #[test]
    fn noiseless_interpolation_at_training_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let data = random_dataset(&mut rng, 4, 2);
        let theta = SEHyperparams::isotropic(1.0, 1.0, 2, 0.0).unwrap();
        let model = GpModel::condition(data.clone(), Scheme::WithDerivatives, theta).unwrap();
        let test = data.inputs().select(&[1]);
        let p = model.predict(&test).unwrap();
        assert_abs_diff_eq!(p.mean_points[0], data.outputs()[1], epsilon = 1e-6);
        for a in 0..2 {
            assert_abs_diff_eq!(
                p.mean_grads[a],
                data.gradients().unwrap().row(1)[a],
                epsilon = 1e-6
            );
        }
        assert!(p.cov_points.get(0, 0) <= 1e-6);
    }

    #[test]
    fn far_training_point_reverts_to_prior() {
        let data = Dataset::new(
            Points::from_scalars(&[100.0]),
            vec![1.0],
            Some(Points::from_scalars(&[0.5])),
        )
        .unwrap();
        let theta = SEHyperparams::isotropic(2.0, 1.0, 1, 0.01).unwrap();
        let model = GpModel::condition(data, Scheme::WithDerivatives, theta).unwrap();
        let (_, cov) = model
            .predict_point_block(&Points::from_scalars(&[0.0, 3.0]))
            .unwrap();
        let prior = covariance_blocks(
            &Points::from_scalars(&[0.0, 3.0]),
            false,
            &Points::from_scalars(&[0.0, 3.0]),
            false,
            model.theta(),
        );
        assert!((cov.as_matrix() - prior).amax() <= 1e-6);
    }

    #[test]
    fn point_block_agrees_with_full_prediction() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        for _ in 0..20 {
            let d = rng.gen_range(1..=3);
            let data = {
                let n = rng.gen_range(1..=6);
                random_dataset(&mut rng, n, d)
            };
            let theta = random_theta(&mut rng, d);
            let model = GpModel::condition(data, Scheme::WithDerivatives, theta).unwrap();
            let test =
                Points::new((0..3 * d).map(|_| rng.gen_range(-2.0..2.0)).collect(), d).unwrap();
            let full = model.predict(&test).unwrap();
            let (mean, cov) = model.predict_point_block(&test).unwrap();
            for (a, b) in mean.iter().zip(&full.mean_points) {
                assert!((a - b).abs() <= 1e-12);
            }
            assert!((cov.as_matrix() - full.cov_points.as_matrix()).amax() <= 1e-12);
            assert!(min_eigenvalue(&full.assembled()).unwrap() >= -1e-8);
            for i in 0..3 {
                let v = full.cov_points.get(i, i);
                assert!(v >= -1e-12 && v <= model.theta().signal_variance + 1e-8);
            }
        }
    }

    #[test]
    fn single_point_variance_by_hand() {
        // training at 0 with gradient, test at 0, d = 1, unit kernel, noise 0.01:
        // K~ + s I = diag(1.01, 1.01), cross column = [1, 0]
        let data = Dataset::new(
            Points::from_scalars(&[0.0]),
            vec![0.3],
            Some(Points::from_scalars(&[0.1])),
        )
        .unwrap();
        let theta = SEHyperparams::isotropic(1.0, 1.0, 1, 0.01).unwrap();
        let model = GpModel::condition(data, Scheme::WithDerivatives, theta).unwrap();
        let (_, cov) = model
            .predict_point_block(&Points::from_scalars(&[0.0]))
            .unwrap();
        assert_abs_diff_eq!(cov.get(0, 0), 1.0 - 1.0 / 1.01, epsilon = 1e-12);
    }

    #[test]
    fn derivative_variance_not_above_values_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        for _ in 0..30 {
            let d = rng.gen_range(1..=3);
            let data = {
                let n = rng.gen_range(1..=6);
                random_dataset(&mut rng, n, d)
            };
            let theta = random_theta(&mut rng, d);
            let test = Points::new((0..d).map(|_| rng.gen_range(-2.0..2.0)).collect(), d).unwrap();
            let md =
                GpModel::condition(data.clone(), Scheme::WithDerivatives, theta.clone()).unwrap();
            let mv = GpModel::condition(data, Scheme::ValuesOnly, theta).unwrap();
            let vd = md.predict_point_block(&test).unwrap().1.get(0, 0);
            let vv = mv.predict_point_block(&test).unwrap().1.get(0, 0);
            assert!(vd <= vv + 1e-9);
        }
    }

    #[test]
    fn adding_a_point_never_increases_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        for _ in 0..20 {
            let d = rng.gen_range(1..=2);
            let data = random_dataset(&mut rng, 4, d);
            let theta = random_theta(&mut rng, d);
            let test =
                Points::new((0..3 * d).map(|_| rng.gen_range(-2.0..2.0)).collect(), d).unwrap();
            for scheme in [Scheme::ValuesOnly, Scheme::WithDerivatives] {
                let small = Dataset::new(
                    data.inputs().select(&[0, 1, 2]),
                    data.outputs()[..3].to_vec(),
                    data.gradients().map(|g| g.select(&[0, 1, 2])),
                )
                .unwrap();
                let a = GpModel::condition(small, scheme, theta.clone()).unwrap();
                let b = GpModel::condition(data.clone(), scheme, theta.clone()).unwrap();
                let ca = a.predict_point_block(&test).unwrap().1;
                let cb = b.predict_point_block(&test).unwrap().1;
                for i in 0..3 {
                    assert!(cb.get(i, i) <= ca.get(i, i) + 1e-9);
                }
            }
        }
    }

    #[test]
    fn marginal_matches_point_block_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        let data = random_dataset(&mut rng, 5, 2);
        let theta = random_theta(&mut rng, 2);
        let model = GpModel::condition(data, Scheme::WithDerivatives, theta).unwrap();
        let test = Points::new((0..8).map(|_| rng.gen_range(-2.0..2.0)).collect(), 2).unwrap();
        let (m, v) = model.predict_marginal(&test).unwrap();
        let (mb, cb) = model.predict_point_block(&test).unwrap();
        for i in 0..4 {
            assert_abs_diff_eq!(m[i], mb[i], epsilon = 1e-12);
            assert_abs_diff_eq!(v[i], cb.get(i, i).max(0.0), epsilon = 1e-12);
        }
    }

    #[test]
    fn derivative_scheme_requires_gradients() {
        let data = Dataset::values_only(Points::from_scalars(&[0.0]), vec![1.0]).unwrap();
        let theta = SEHyperparams::isotropic(1.0, 1.0, 1, 0.1).unwrap();
        assert!(GpModel::condition(data, Scheme::WithDerivatives, theta).is_err());
    }
}
