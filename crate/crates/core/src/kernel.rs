//! Squared exponential kernel with first and mixed second derivatives, and
//! assembly of the extended (value + gradient) covariance matrices.
//!
//! Extended matrices use the layout `[all values | all gradients]`: for a
//! side with `n` points in `d` dimensions, index `i` is the value at point
//! `i` and index `n + i*d + a` is the `a`-th partial derivative at point `i`.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::SymMatrix;
use crate::points::Points;

const FLUSH_BELOW: f64 = 1e-300;

#[derive(Clone, Debug, PartialEq)]
pub struct SEHyperparams {
    pub signal_variance: f64,
    pub lengthscales: Vec<f64>,
    pub noise_variance: f64,
}

impl SEHyperparams {
    pub fn new(signal_variance: f64, lengthscales: Vec<f64>, noise_variance: f64) -> Result<Self> {
        let theta = Self {
            signal_variance,
            lengthscales,
            noise_variance,
        };
        theta.validate()?;
        Ok(theta)
    }

    /// Same lengthscale on every axis.
    pub fn isotropic(
        signal_variance: f64,
        lengthscale: f64,
        d: usize,
        noise_variance: f64,
    ) -> Result<Self> {
        Self::new(signal_variance, vec![lengthscale; d], noise_variance)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.signal_variance.is_finite()
            && self.signal_variance > 0.0
            && !self.lengthscales.is_empty()
            && self.lengthscales.iter().all(|l| l.is_finite() && *l > 0.0)
            && self.noise_variance.is_finite()
            && self.noise_variance >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::DegenerateData(format!(
                "invalid hyperparameters {self:?}"
            )))
        }
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    fn check(&self, xi: &[f64], xj: &[f64]) -> Result<()> {
        for x in [xi, xj] {
            if x.len() != self.dim() {
                return Err(Error::DimensionMismatch {
                    expected: self.dim(),
                    found: x.len(),
                });
            }
        }
        Ok(())
    }

    fn check_points(&self, x: &Points) -> Result<()> {
        if x.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: x.dim(),
            });
        }
        Ok(())
    }

    #[inline]
    fn value_unchecked(&self, xi: &[f64], xj: &[f64]) -> f64 {
        let mut q = 0.0;
        for ((a, b), l) in xi.iter().zip(xj).zip(&self.lengthscales) {
            let r = (a - b) / l;
            q += r * r;
        }
        let k = self.signal_variance * (-0.5 * q).exp();
        if k < FLUSH_BELOW {
            0.0
        } else {
            k
        }
    }
}

pub fn se_kernel(xi: &[f64], xj: &[f64], theta: &SEHyperparams) -> Result<f64> {
    theta.check(xi, xj)?;
    Ok(theta.value_unchecked(xi, xj))
}

/// Gradient of `k(xi, xj)` with respect to `xi`.
pub fn se_grad_first(xi: &[f64], xj: &[f64], theta: &SEHyperparams) -> Result<Vec<f64>> {
    theta.check(xi, xj)?;
    let k = theta.value_unchecked(xi, xj);
    Ok(xi
        .iter()
        .zip(xj)
        .zip(&theta.lengthscales)
        .map(|((a, b), l)| -(a - b) / (l * l) * k)
        .collect())
}

/// Gradient of `k(xi, xj)` with respect to `xj`; the negation of [`se_grad_first`].
pub fn se_grad_second(xi: &[f64], xj: &[f64], theta: &SEHyperparams) -> Result<Vec<f64>> {
    Ok(se_grad_first(xi, xj, theta)?
        .into_iter()
        .map(|g| -g)
        .collect())
}

/// Mixed second derivative `d^2 k / dxi dxj`.
pub fn se_hess_cross(xi: &[f64], xj: &[f64], theta: &SEHyperparams) -> Result<DMatrix<f64>> {
    theta.check(xi, xj)?;
    let d = theta.dim();
    let k = theta.value_unchecked(xi, xj);
    let w: Vec<f64> = scaled_diff(xi, xj, theta).collect();
    Ok(DMatrix::from_fn(d, d, |a, b| {
        let delta = if a == b {
            1.0 / (theta.lengthscales[a] * theta.lengthscales[a])
        } else {
            0.0
        };
        (delta - w[a] * w[b]) * k
    }))
}

/// `(xi - xj) / l^2` componentwise.
#[inline]
fn scaled_diff<'a>(
    xi: &'a [f64],
    xj: &'a [f64],
    theta: &'a SEHyperparams,
) -> impl Iterator<Item = f64> + 'a {
    xi.iter()
        .zip(xj)
        .zip(&theta.lengthscales)
        .map(|((a, b), l)| (a - b) / (l * l))
}

/// The `(1+d) x (1+d)` block `[[k, (dk/dxj)^T], [dk/dxi, d2k/dxi dxj]]`.
pub fn extended_block(xi: &[f64], xj: &[f64], theta: &SEHyperparams) -> Result<DMatrix<f64>> {
    let d = theta.dim();
    let k = se_kernel(xi, xj, theta)?;
    let gi = se_grad_first(xi, xj, theta)?;
    let h = se_hess_cross(xi, xj, theta)?;
    let mut block = DMatrix::zeros(1 + d, 1 + d);
    block[(0, 0)] = k;
    for a in 0..d {
        block[(0, 1 + a)] = -gi[a];
        block[(1 + a, 0)] = gi[a];
        for b in 0..d {
            block[(1 + a, 1 + b)] = h[(a, b)];
        }
    }
    Ok(block)
}

/// Which entries the test side of a cross-covariance carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CrossMode {
    ValuesOnly,
    Extended,
}

/// Rows/columns a side contributes: `n` values, plus `n*d` partials when extended.
fn side_len(x: &Points, extended: bool) -> usize {
    if extended {
        x.len() * (1 + x.dim())
    } else {
        x.len()
    }
}

/// Covariance between the (optionally extended) representations of `a` and `b`.
pub(crate) fn covariance_blocks(
    a: &Points,
    a_ext: bool,
    b: &Points,
    b_ext: bool,
    theta: &SEHyperparams,
) -> DMatrix<f64> {
    let d = theta.dim();
    let (na, nb) = (a.len(), b.len());
    let mut out = DMatrix::zeros(side_len(a, a_ext), side_len(b, b_ext));
    let mut w = vec![0.0; d];
    for j in 0..nb {
        let xj = b.row(j);
        for i in 0..na {
            let xi = a.row(i);
            let k = theta.value_unchecked(xi, xj);
            out[(i, j)] = k;
            if !a_ext && !b_ext {
                continue;
            }
            for (wk, v) in w.iter_mut().zip(scaled_diff(xi, xj, theta)) {
                *wk = v;
            }
            if b_ext {
                // cov(f(xi), d f(xj)/dxj_b) = w_b k
                for bb in 0..d {
                    out[(i, nb + j * d + bb)] = w[bb] * k;
                }
            }
            if a_ext {
                // cov(d f(xi)/dxi_a, f(xj)) = -w_a k
                for aa in 0..d {
                    out[(na + i * d + aa, j)] = -w[aa] * k;
                }
            }
            if a_ext && b_ext {
                for bb in 0..d {
                    let col = nb + j * d + bb;
                    for aa in 0..d {
                        let delta = if aa == bb {
                            1.0 / (theta.lengthscales[aa] * theta.lengthscales[aa])
                        } else {
                            0.0
                        };
                        out[(na + i * d + aa, col)] = (delta - w[aa] * w[bb]) * k;
                    }
                }
            }
        }
    }
    out
}

/// Plain Gram matrix `K(X, X)` on values.
pub fn assemble_gram(x: &Points, theta: &SEHyperparams) -> Result<SymMatrix> {
    theta.check_points(x)?;
    if x.is_empty() {
        return Err(Error::DegenerateData("no points".into()));
    }
    Ok(SymMatrix::symmetrize(covariance_blocks(
        x, false, x, false, theta,
    )))
}

/// Extended Gram matrix of size `n(1+d)` in `[values | gradients]` layout.
pub fn assemble_extended_gram(x: &Points, theta: &SEHyperparams) -> Result<SymMatrix> {
    theta.check_points(x)?;
    if x.is_empty() {
        return Err(Error::DegenerateData("no points".into()));
    }
    Ok(SymMatrix::symmetrize(covariance_blocks(
        x, true, x, true, theta,
    )))
}

/// Cross-covariance between the extended training representation (rows) and
/// the test points (columns: values only, or extended).
pub fn assemble_cross(
    train: &Points,
    test: &Points,
    theta: &SEHyperparams,
    mode: CrossMode,
) -> Result<DMatrix<f64>> {
    theta.check_points(train)?;
    theta.check_points(test)?;
    Ok(covariance_blocks(
        train,
        true,
        test,
        mode == CrossMode::Extended,
        theta,
    ))
}
