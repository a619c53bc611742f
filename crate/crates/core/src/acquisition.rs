//! Batch acquisition: optimality criteria on the predictive point covariance,
//! a multi-start projected ascent over the joint batch coordinates, greedy
//! pool selection and the safety-constrained variant.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::Rng;

use crate::error::{Error, Result};
use crate::gp::GpModel;
use crate::linalg::{cholesky_psd, log_det_from_factor, max_eigenvalue, SymMatrix};
use crate::points::Points;

const D_JITTER: f64 = 1e-10;
const MAX_RESAMPLES: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Criterion {
    /// Log-determinant.
    D,
    /// Trace.
    A,
    /// Largest eigenvalue.
    E,
}

impl Criterion {
    pub const ALL: [Criterion; 3] = [Criterion::D, Criterion::A, Criterion::E];
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Criterion::D => "D",
            Criterion::A => "A",
            Criterion::E => "E",
        };
        f.write_str(s)
    }
}

impl FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "D" => Ok(Criterion::D),
            "A" => Ok(Criterion::A),
            "E" => Ok(Criterion::E),
            other => Err(Error::Config(format!("unknown criterion '{other}'"))),
        }
    }
}

/// Larger is more informative for every criterion.
pub fn criterion_value(cov: &SymMatrix, c: Criterion) -> Result<f64> {
    match c {
        Criterion::D => Ok(log_det_from_factor(&cholesky_psd(cov, D_JITTER)?)),
        Criterion::A => Ok(cov.trace()),
        Criterion::E => max_eigenvalue(cov),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchBox {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl SearchBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.is_empty() || lower.len() != upper.len() {
            return Err(Error::EmptyBox);
        }
        if lower
            .iter()
            .zip(&upper)
            .any(|(l, u)| !(l.is_finite() && u.is_finite() && l < u))
        {
            return Err(Error::EmptyBox);
        }
        Ok(Self { lower, upper })
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn width(&self, k: usize) -> f64 {
        self.upper[k] - self.lower[k]
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (l, u))| *v >= *l && *v <= *u)
    }

    /// The same box repeated `n` times (flattened batch coordinates).
    pub fn repeat(&self, n: usize) -> SearchBox {
        SearchBox {
            lower: self.lower.repeat(n),
            upper: self.upper.repeat(n),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| rng.gen_range(*l..=*u))
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct BatchProposal {
    pub points: Points,
    pub score: f64,
    pub feasible: bool,
    /// Safety value of the returned batch when a constraint was active.
    pub zeta: Option<f64>,
    /// Candidates (starts, resamples or ascent steps) rejected by the safety constraint.
    pub rejected: usize,
}

#[derive(Clone, Debug)]
pub struct AcquisitionConfig {
    pub starts: usize,
    pub max_iters: usize,
    /// Finite-difference step as a fraction of the box width.
    pub fd_step: f64,
    pub tol: f64,
}

impl Default for AcquisitionConfig {
    fn default() -> Self {
        Self {
            starts: 10,
            max_iters: 100,
            fd_step: 1e-4,
            tol: 1e-10,
        }
    }
}

/// Maps a parameter vector inside a box to a batch of input points.
pub trait BatchParameterization {
    fn bounds(&self) -> &SearchBox;
    fn batch(&self, params: &[f64]) -> Points;
}

/// Batch of `n` points parameterized directly by their flattened coordinates.
#[derive(Clone, Debug)]
pub struct CoordinateBatch {
    flat: SearchBox,
    d: usize,
}

impl CoordinateBatch {
    pub fn new(space: &SearchBox, n: usize) -> Self {
        Self {
            flat: space.repeat(n),
            d: space.dim(),
        }
    }
}

impl BatchParameterization for CoordinateBatch {
    fn bounds(&self) -> &SearchBox {
        &self.flat
    }

    fn batch(&self, params: &[f64]) -> Points {
        Points::new(params.to_vec(), self.d).expect("flattened batch has whole rows")
    }
}

/// Batch safety functional; feasibility is `zeta > 1 - alpha`.
pub trait SafetyFunctional {
    fn zeta(&self, batch: &Points) -> Result<f64>;
}

/// Criterion of the predictive point block; a covariance too degenerate
/// to factor scores `-inf`.
pub fn batch_score(model: &GpModel, batch: &Points, c: Criterion) -> Result<f64> {
    let (_, cov) = model.predict_point_block(batch)?;
    match criterion_value(&cov, c) {
        Ok(v) if v.is_finite() => Ok(v),
        Ok(_) | Err(Error::NotPositiveDefinite { .. }) => Ok(f64::NEG_INFINITY),
        Err(e) => Err(e),
    }
}

struct Search<'a, P: BatchParameterization, S: SafetyFunctional + ?Sized> {
    model: &'a GpModel,
    param: &'a P,
    criterion: Criterion,
    cfg: &'a AcquisitionConfig,
    constraint: Option<(&'a S, f64)>,
    rejected: usize,
}

impl<P: BatchParameterization, S: SafetyFunctional + ?Sized> Search<'_, P, S> {
    fn to_params(&self, u: &[f64]) -> Vec<f64> {
        let b = self.param.bounds();
        u.iter()
            .enumerate()
            .map(|(k, v)| b.lower()[k] + v * b.width(k))
            .collect()
    }

    fn score(&self, u: &[f64]) -> Result<f64> {
        let batch = self.param.batch(&self.to_params(u));
        batch_score(self.model, &batch, self.criterion)
    }

    fn feasible(&mut self, u: &[f64]) -> Result<bool> {
        match self.constraint {
            None => Ok(true),
            Some((safety, alpha)) => {
                let z = safety.zeta(&self.param.batch(&self.to_params(u)))?;
                let ok = z > 1.0 - alpha;
                if !ok {
                    self.rejected += 1;
                }
                Ok(ok)
            }
        }
    }

    /// Central differences in normalized coordinates, one-sided at the faces.
    fn gradient(&self, u: &[f64]) -> Result<Vec<f64>> {
        let h = self.cfg.fd_step;
        let mut g = vec![0.0; u.len()];
        let mut q = u.to_vec();
        for k in 0..u.len() {
            let hi = (u[k] + h).min(1.0);
            let lo = (u[k] - h).max(0.0);
            q[k] = hi;
            let f_hi = self.score(&q)?;
            q[k] = lo;
            let f_lo = self.score(&q)?;
            q[k] = u[k];
            let gk = (f_hi - f_lo) / (hi - lo);
            g[k] = if gk.is_finite() { gk } else { 0.0 };
        }
        Ok(g)
    }

    fn ascend(&mut self, mut u: Vec<f64>) -> Result<(Vec<f64>, f64)> {
        let mut fu = self.score(&u)?;
        let mut step = 0.1;
        for _ in 0..self.cfg.max_iters {
            let mut g = self.gradient(&u)?;
            for (k, gk) in g.iter_mut().enumerate() {
                if (u[k] >= 1.0 && *gk > 0.0) || (u[k] <= 0.0 && *gk < 0.0) {
                    *gk = 0.0;
                }
            }
            let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                break;
            }
            let mut moved = None;
            while step >= 1e-7 {
                let cand: Vec<f64> = u
                    .iter()
                    .zip(&g)
                    .map(|(a, b)| (a + step * b / norm).clamp(0.0, 1.0))
                    .collect();
                let fc = self.score(&cand)?;
                if fc > fu && self.feasible(&cand)? {
                    moved = Some((cand, fc));
                    break;
                }
                step *= 0.5;
            }
            let Some((cand, fc)) = moved else { break };
            let gain = fc - fu;
            u = cand;
            fu = fc;
            step = (step * 2.0).min(1.0);
            if gain <= self.cfg.tol * fu.abs().max(1.0) {
                break;
            }
        }
        Ok((u, fu))
    }

    fn run<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<BatchProposal> {
        let m = self.param.bounds().dim();
        let mut best: Option<(Vec<f64>, f64)> = None;
        for _ in 0..self.cfg.starts.max(1) {
            let mut u: Vec<f64> = (0..m).map(|_| rng.gen_range(0.0..=1.0)).collect();
            let mut ok = self.feasible(&u)?;
            let mut resamples = 0;
            while !ok && resamples < MAX_RESAMPLES {
                u = (0..m).map(|_| rng.gen_range(0.0..=1.0)).collect();
                ok = self.feasible(&u)?;
                resamples += 1;
            }
            if !ok {
                continue;
            }
            let (u, fu) = self.ascend(u)?;
            // strict comparison keeps the earliest start on ties
            if best.as_ref().is_none_or(|(_, fb)| fu > *fb) {
                best = Some((u, fu));
            }
        }
        let (u, score) = best.ok_or(Error::NoFeasibleStart)?;
        let points = self.param.batch(&self.to_params(&u));
        let zeta = match self.constraint {
            Some((s, _)) => Some(s.zeta(&points)?),
            None => None,
        };
        let feasible = match (zeta, self.constraint) {
            (Some(z), Some((_, alpha))) => z > 1.0 - alpha,
            _ => true,
        };
        Ok(BatchProposal {
            points,
            score,
            feasible,
            zeta,
            rejected: self.rejected,
        })
    }
}

struct NoSafety;

impl SafetyFunctional for NoSafety {
    fn zeta(&self, _: &Points) -> Result<f64> {
        Ok(1.0)
    }
}

/// Maximizes the criterion over a parameterized batch.
pub fn optimize_batch_param<P: BatchParameterization, R: Rng + ?Sized>(
    model: &GpModel,
    param: &P,
    c: Criterion,
    cfg: &AcquisitionConfig,
    rng: &mut R,
) -> Result<BatchProposal> {
    Search::<P, NoSafety> {
        model,
        param,
        criterion: c,
        cfg,
        constraint: None,
        rejected: 0,
    }
    .run(rng)
}

/// Maximizes the criterion over a parameterized batch subject to
/// `zeta(batch) > 1 - alpha`.
pub fn optimize_batch_param_safe<P, S, R>(
    model: &GpModel,
    safety: &S,
    alpha: f64,
    param: &P,
    c: Criterion,
    cfg: &AcquisitionConfig,
    rng: &mut R,
) -> Result<BatchProposal>
where
    P: BatchParameterization,
    S: SafetyFunctional + ?Sized,
    R: Rng + ?Sized,
{
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Config(format!("alpha {alpha} outside (0, 1]")));
    }
    Search {
        model,
        param,
        criterion: c,
        cfg,
        constraint: Some((safety, alpha)),
        rejected: 0,
    }
    .run(rng)
}

/// Jointly optimizes a batch of `n` points inside `space`.
pub fn optimize_batch<R: Rng + ?Sized>(
    model: &GpModel,
    space: &SearchBox,
    n: usize,
    c: Criterion,
    cfg: &AcquisitionConfig,
    rng: &mut R,
) -> Result<BatchProposal> {
    check_batch(model, space, n)?;
    optimize_batch_param(model, &CoordinateBatch::new(space, n), c, cfg, rng)
}

#[allow(clippy::too_many_arguments)]
pub fn optimize_batch_safe<S: SafetyFunctional + ?Sized, R: Rng + ?Sized>(
    model: &GpModel,
    safety: &S,
    alpha: f64,
    space: &SearchBox,
    n: usize,
    c: Criterion,
    cfg: &AcquisitionConfig,
    rng: &mut R,
) -> Result<BatchProposal> {
    check_batch(model, space, n)?;
    optimize_batch_param_safe(
        model,
        safety,
        alpha,
        &CoordinateBatch::new(space, n),
        c,
        cfg,
        rng,
    )
}

fn check_batch(model: &GpModel, space: &SearchBox, n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::DegenerateData("batch size must be positive".into()));
    }
    if space.dim() != model.theta().dim() {
        return Err(Error::DimensionMismatch {
            expected: model.theta().dim(),
            found: space.dim(),
        });
    }
    Ok(())
}

/// Greedy pool selection: each round adds the candidate that maximizes the
/// criterion of the joint point covariance of the selected set plus that
/// candidate. Ties go to the lowest index.
pub fn pool_select(model: &GpModel, pool: &Points, n: usize, c: Criterion) -> Result<Vec<usize>> {
    let m = pool.len();
    if n == 0 || m < n {
        return Err(Error::PoolTooSmall { pool: m, batch: n });
    }
    let (_, v) = model.whitened_cross(pool)?;
    let theta = model.theta();
    let mut selected: Vec<usize> = Vec::with_capacity(n);
    let mut taken = vec![false; m];
    for _ in 0..n {
        let k = selected.len() + 1;
        let mut base = DMatrix::zeros(k, k);
        for (a, &i) in selected.iter().enumerate() {
            for (b, &j) in selected.iter().enumerate().take(a + 1) {
                let val = crate::kernel::se_kernel(pool.row(i), pool.row(j), theta)?
                    - v.column(i).dot(&v.column(j));
                base[(a, b)] = val;
                base[(b, a)] = val;
            }
        }
        let mut best: Option<(usize, f64)> = None;
        for cand in (0..m).filter(|c| !taken[*c]) {
            let mut cov = base.clone();
            let vc = v.column(cand);
            for (a, &i) in selected.iter().enumerate() {
                let val = crate::kernel::se_kernel(pool.row(i), pool.row(cand), theta)?
                    - v.column(i).dot(&vc);
                cov[(a, k - 1)] = val;
                cov[(k - 1, a)] = val;
            }
            cov[(k - 1, k - 1)] = theta.signal_variance - vc.norm_squared();
            let score = match criterion_value(&SymMatrix::symmetrize(cov), c) {
                Ok(s) if s.is_finite() => s,
                Ok(_) | Err(Error::NotPositiveDefinite { .. }) => f64::NEG_INFINITY,
                Err(e) => return Err(e),
            };
            if best.is_none_or(|(_, b)| score > b) {
                best = Some((cand, score));
            }
        }
        let (idx, _) = best.expect("pool has an unselected candidate");
        taken[idx] = true;
        selected.push(idx);
    }
    Ok(selected)
}
