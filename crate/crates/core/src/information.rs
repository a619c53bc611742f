//! Information gain and executable checks of the covariance ordering, the
//! trace bound and the running-average decay of the acquisition criterion.

use crate::acquisition::{criterion_value, Criterion};
use crate::error::{Error, Result};
use crate::gp::{Dataset, GpModel, Scheme};
use crate::kernel::{assemble_extended_gram, assemble_gram, SEHyperparams};
use crate::linalg::{cholesky_psd, log_det_from_factor, min_eigenvalue, SymMatrix};
use crate::points::Points;

/// Tolerance for `ig_with_derivatives - ig_values_only >= -tol`.
pub const PROPOSITION1_TOL: f64 = 1e-10;
/// Tolerance on the minimum eigenvalue of `Sigma - Sigma_p`.
pub const THEOREM1_TOL: f64 = 1e-8;
pub const LEMMA1_TOL: f64 = 1e-8;

fn half_log_det_i_plus(gram: &SymMatrix, noise: f64) -> Result<f64> {
    let scaled = SymMatrix::symmetrize(gram.as_matrix() / noise).add_diagonal(1.0);
    Ok(0.5 * log_det_from_factor(&cholesky_psd(&scaled, 0.0)?))
}

fn require_noise(theta: &SEHyperparams) -> Result<()> {
    if theta.noise_variance > 0.0 {
        Ok(())
    } else {
        Err(Error::DegenerateData(
            "information gain needs noise_variance > 0".into(),
        ))
    }
}

/// `1/2 log det(I + K / sigma^2)` with `K` the plain or extended Gram matrix.
pub fn information_gain(x: &Points, theta: &SEHyperparams, scheme: Scheme) -> Result<f64> {
    require_noise(theta)?;
    if x.is_empty() {
        return Ok(0.0);
    }
    let gram = match scheme {
        Scheme::ValuesOnly => assemble_gram(x, theta)?,
        Scheme::WithDerivatives => assemble_extended_gram(x, theta)?,
    };
    half_log_det_i_plus(&gram, theta.noise_variance)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IgReport {
    pub ig_values_only: f64,
    pub ig_with_derivatives: f64,
    pub difference: f64,
}

impl IgReport {
    pub fn pass(&self) -> bool {
        self.difference >= -PROPOSITION1_TOL
    }
}

/// Information gain with and without derivative observations on the same inputs.
pub fn check_proposition1(x: &Points, theta: &SEHyperparams) -> Result<IgReport> {
    let ig_values_only = information_gain(x, theta, Scheme::ValuesOnly)?;
    let ig_with_derivatives = information_gain(x, theta, Scheme::WithDerivatives)?;
    Ok(IgReport {
        ig_values_only,
        ig_with_derivatives,
        difference: ig_with_derivatives - ig_values_only,
    })
}

/// Predictive point covariances of both schemes at `test`, same data and theta.
pub fn paired_covariances(
    data: &Dataset,
    theta: &SEHyperparams,
    test: &Points,
) -> Result<(SymMatrix, SymMatrix)> {
    let values = GpModel::condition(data.clone(), Scheme::ValuesOnly, theta.clone())?;
    let derivs = GpModel::condition(data.clone(), Scheme::WithDerivatives, theta.clone())?;
    Ok((
        values.predict_point_block(test)?.1,
        derivs.predict_point_block(test)?.1,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Theorem1Report {
    pub min_eigenvalue_of_difference: f64,
    pub pass: bool,
}

/// Minimum eigenvalue of `Sigma(values only) - Sigma_p(with derivatives)`.
pub fn check_theorem1(
    data: &Dataset,
    theta: &SEHyperparams,
    test: &Points,
) -> Result<Theorem1Report> {
    let (values, derivs) = paired_covariances(data, theta, test)?;
    let min = min_eigenvalue(&values.sub(&derivs)?)?;
    Ok(Theorem1Report {
        min_eigenvalue_of_difference: min,
        pass: min >= -THEOREM1_TOL,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dominance {
    pub criterion: Criterion,
    pub values_only: f64,
    pub with_derivatives: f64,
}

impl Dominance {
    pub fn holds(&self, tol: f64) -> bool {
        self.with_derivatives <= self.values_only + tol
    }
}

/// D, A and E values of both schemes' point covariances at `test`.
pub fn criterion_dominance(
    data: &Dataset,
    theta: &SEHyperparams,
    test: &Points,
) -> Result<Vec<Dominance>> {
    let (values, derivs) = paired_covariances(data, theta, test)?;
    Criterion::ALL
        .iter()
        .map(|&c| {
            Ok(Dominance {
                criterion: c,
                values_only: criterion_value(&values, c)?,
                with_derivatives: criterion_value(&derivs, c)?,
            })
        })
        .collect()
}

/// Per-round traces of the values-only predictive covariance at each explored
/// batch (before observing it), and the realized information gain of the
/// whole explored sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceHistory {
    pub traces: Vec<f64>,
    pub ig_realized: f64,
}

/// Builds a [`TraceHistory`] by sequentially conditioning a values-only GP
/// at fixed `theta`. Outputs are irrelevant to covariances and set to zero.
pub fn trace_history(
    initial: &Points,
    batches: &[Points],
    theta: &SEHyperparams,
) -> Result<TraceHistory> {
    require_noise(theta)?;
    if batches.is_empty() {
        return Err(Error::EmptyHistory);
    }
    let mut seen = initial.clone();
    let mut traces = Vec::with_capacity(batches.len());
    for batch in batches {
        let cov = if seen.is_empty() {
            assemble_gram(batch, theta)?
        } else {
            let data = Dataset::values_only(seen.clone(), vec![0.0; seen.len()])?;
            GpModel::condition(data, Scheme::ValuesOnly, theta.clone())?
                .predict_point_block(batch)?
                .1
        };
        traces.push(cov.trace());
        seen.extend(batch)?;
    }
    let ig_realized = information_gain(&seen, theta, Scheme::ValuesOnly)?
        - information_gain(initial, theta, Scheme::ValuesOnly)?;
    Ok(TraceHistory {
        traces,
        ig_realized,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lemma1Report {
    pub lhs: f64,
    pub rhs: f64,
    pub pass: bool,
}

/// `C_tr = 2 sigma^2 (1 + n sigma^-2 sigma_f^2)`.
pub fn trace_bound_constant(theta: &SEHyperparams, n: usize) -> f64 {
    let s2 = theta.noise_variance;
    2.0 * s2 * (1.0 + n as f64 * theta.signal_variance / s2)
}

/// Average trace over `t` rounds against `C_tr * IG / t`.
pub fn check_lemma1(
    history: &TraceHistory,
    theta: &SEHyperparams,
    n: usize,
) -> Result<Lemma1Report> {
    require_noise(theta)?;
    if history.traces.is_empty() {
        return Err(Error::EmptyHistory);
    }
    let t = history.traces.len() as f64;
    let lhs = history.traces.iter().sum::<f64>() / t;
    let rhs = trace_bound_constant(theta, n) * history.ig_realized / t;
    Ok(Lemma1Report {
        lhs,
        rhs,
        pass: lhs <= rhs + LEMMA1_TOL,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecaySeries {
    pub per_round: Vec<f64>,
    pub running_average: Vec<f64>,
}

impl DecaySeries {
    /// Whether the running average never increases from 1-based round
    /// `from` to the end.
    pub fn non_increasing_from(&self, from: usize) -> bool {
        let start = from.saturating_sub(1);
        self.running_average
            .get(start..)
            .is_none_or(|tail| tail.windows(2).all(|w| w[1] <= w[0]))
    }
}

pub fn decay_series(per_round: &[f64]) -> Result<DecaySeries> {
    if per_round.is_empty() {
        return Err(Error::EmptyHistory);
    }
    let mut sum = 0.0;
    let running_average = per_round
        .iter()
        .enumerate()
        .map(|(i, v)| {
            sum += v;
            sum / (i + 1) as f64
        })
        .collect();
    Ok(DecaySeries {
        per_round: per_round.to_vec(),
        running_average,
    })
}

/// Random instances for the numerical checks above.
pub mod trials {
    use super::*;
    use rand::Rng;

    fn uniform_points<R: Rng + ?Sized>(rng: &mut R, n: usize, d: usize, half_width: f64) -> Points {
        let data = (0..n * d)
            .map(|_| rng.gen_range(-half_width..half_width))
            .collect();
        Points::new(data, d).expect("whole rows")
    }

    /// Hyperparameters with log-uniform scales and `noise_variance` in `noise`.
    pub fn random_theta<R: Rng + ?Sized>(
        rng: &mut R,
        d: usize,
        noise: (f64, f64),
    ) -> SEHyperparams {
        let log_uniform = |rng: &mut R, lo: f64, hi: f64| rng.gen_range(lo.ln()..hi.ln()).exp();
        let signal = log_uniform(rng, 0.1, 10.0);
        let lengthscales = (0..d).map(|_| log_uniform(rng, 0.3, 3.0)).collect();
        let noise = log_uniform(rng, noise.0, noise.1);
        SEHyperparams::new(signal, lengthscales, noise).expect("positive draws")
    }

    /// Inputs for an information-gain comparison: up to 6 points in up to 2 dimensions.
    pub fn ig_instance<R: Rng + ?Sized>(rng: &mut R) -> (Points, SEHyperparams) {
        let d = rng.gen_range(1..=2);
        let n = rng.gen_range(1..=6);
        (
            uniform_points(rng, n, d, 2.0),
            random_theta(rng, d, (1e-3, 1.0)),
        )
    }

    /// Training data (with gradients), hyperparameters and a test batch.
    pub fn covariance_instance<R: Rng + ?Sized>(rng: &mut R) -> (Dataset, SEHyperparams, Points) {
        let d = rng.gen_range(1..=2);
        let n0 = rng.gen_range(1..=6);
        let n = rng.gen_range(1..=3);
        let x = uniform_points(rng, n0, d, 2.0);
        let y = (0..n0).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let g = uniform_points(rng, n0, d, 1.0);
        let data = Dataset::new(x, y, Some(g)).expect("consistent shapes");
        (
            data,
            random_theta(rng, d, (1e-3, 1.0)),
            uniform_points(rng, n, d, 2.0),
        )
    }

    /// A sequential 1-d exploration history of at most 10 rounds.
    pub fn history_instance<R: Rng + ?Sized>(
        rng: &mut R,
    ) -> (Points, Vec<Points>, SEHyperparams, usize) {
        let n = rng.gen_range(1..=3);
        let t = rng.gen_range(1..=10);
        let n0 = rng.gen_range(0..=4);
        let initial = uniform_points(rng, n0, 1, 3.0);
        let batches = (0..t).map(|_| uniform_points(rng, n, 1, 3.0)).collect();
        (initial, batches, random_theta(rng, 1, (1e-3, 1.0)), n)
    }

    #[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
    pub struct Tally {
        pub passed: usize,
        pub failed: usize,
    }

    impl Tally {
        fn record(&mut self, ok: bool) {
            if ok {
                self.passed += 1;
            } else {
                self.failed += 1;
            }
        }
    }

    #[derive(Clone, Debug, Default, PartialEq)]
    pub struct TheoryReport {
        pub proposition1: Tally,
        pub theorem1: Tally,
        pub dominance: Tally,
        pub lemma1: Tally,
    }

    /// Runs each check on `trials` random instances.
    pub fn run_checks<R: Rng + ?Sized>(trials: usize, rng: &mut R) -> Result<TheoryReport> {
        let mut report = TheoryReport::default();
        for _ in 0..trials {
            let (x, theta) = ig_instance(rng);
            report
                .proposition1
                .record(check_proposition1(&x, &theta)?.pass());

            let (data, theta, test) = covariance_instance(rng);
            report
                .theorem1
                .record(check_theorem1(&data, &theta, &test)?.pass);
            let dom = criterion_dominance(&data, &theta, &test)?;
            report
                .dominance
                .record(dom.iter().all(|c| c.holds(THEOREM1_TOL)));

            let (initial, batches, theta, n) = history_instance(rng);
            let history = trace_history(&initial, &batches, &theta)?;
            report
                .lemma1
                .record(check_lemma1(&history, &theta, n)?.pass);
        }
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::LN_2;

    #[test]
    fn ig_vanishes_without_signal() {
        let theta = SEHyperparams::isotropic(1e-12, 1.0, 1, 1.0).unwrap();
        let ig = information_gain(
            &Points::from_scalars(&[0.0, 1.0]),
            &theta,
            Scheme::ValuesOnly,
        )
        .unwrap();
        assert!(ig.abs() < 1e-11);
    }

    #[test]
    fn ig_two_independent_points() {
        // far apart so K = I
        let theta = SEHyperparams::isotropic(1.0, 1.0, 1, 1.0).unwrap();
        let ig = information_gain(
            &Points::from_scalars(&[0.0, 100.0]),
            &theta,
            Scheme::ValuesOnly,
        )
        .unwrap();
        assert_abs_diff_eq!(ig, LN_2, epsilon = 1e-12);
    }

    #[test]
    fn proposition1_single_point_by_hand() {
        let theta = SEHyperparams::isotropic(1.0, 1.0, 1, 1.0).unwrap();
        let r = check_proposition1(&Points::from_scalars(&[0.3]), &theta).unwrap();
        assert_abs_diff_eq!(r.ig_values_only, 0.5 * LN_2, epsilon = 1e-12);
        assert_abs_diff_eq!(r.ig_with_derivatives, LN_2, epsilon = 1e-12);
        assert_abs_diff_eq!(r.difference, 0.5 * LN_2, epsilon = 1e-12);
        assert!(r.pass());
    }

    #[test]
    fn proposition1_large_noise_limit() {
        let theta = SEHyperparams::isotropic(1.0, 1.0, 2, 1e12).unwrap();
        let x = Points::from_rows(&[[0.0, 0.0], [0.5, 0.1], [1.0, -1.0]]).unwrap();
        let r = check_proposition1(&x, &theta).unwrap();
        assert!(r.ig_values_only < 1e-10 && r.ig_with_derivatives < 1e-10);
        assert!(r.difference.abs() < 1e-10);
    }

    #[test]
    fn ig_grows_with_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..30 {
            let d = rng.gen_range(1..=3);
            let theta = SEHyperparams::isotropic(
                rng.gen_range(0.2..1.0),
                rng.gen_range(0.3..1.5),
                d,
                rng.gen_range(1e-3..1.0),
            )
            .unwrap();
            let mut x =
                Points::new((0..3 * d).map(|_| rng.gen_range(-2.0..2.0)).collect(), d).unwrap();
            for scheme in [Scheme::ValuesOnly, Scheme::WithDerivatives] {
                let before = information_gain(&x, &theta, scheme).unwrap();
                let mut bigger = x.clone();
                bigger
                    .push(&(0..d).map(|_| rng.gen_range(-2.0..2.0)).collect::<Vec<_>>())
                    .unwrap();
                assert!(information_gain(&bigger, &theta, scheme).unwrap() >= before - 1e-10);
            }
            x.push(&vec![0.0; d]).unwrap();
        }
    }

    #[test]
    fn theorem1_scalar_and_zero_gradients() {
        let data = Dataset::new(
            Points::from_scalars(&[-0.5, 0.4]),
            vec![0.0, 0.0],
            Some(Points::from_scalars(&[0.0, 0.0])),
        )
        .unwrap();
        let theta = SEHyperparams::isotropic(1.0, 0.7, 1, 0.01).unwrap();
        let r = check_theorem1(&data, &theta, &Points::from_scalars(&[0.1])).unwrap();
        assert!(r.pass);
        let (v, d) = paired_covariances(&data, &theta, &Points::from_scalars(&[0.1])).unwrap();
        assert!(v.get(0, 0) >= d.get(0, 0));
    }

    #[test]
    fn lemma1_single_point_prior() {
        let theta = SEHyperparams::isotropic(1.0, 1.0, 1, 1.0).unwrap();
        let h = trace_history(&Points::empty(1), &[Points::from_scalars(&[0.0])], &theta).unwrap();
        let r = check_lemma1(&h, &theta, 1).unwrap();
        assert_abs_diff_eq!(r.lhs, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.rhs, 2.0 * LN_2, epsilon = 1e-12);
        assert!(r.pass);
    }

    #[test]
    fn lemma1_no_signal_limit() {
        let theta = SEHyperparams::isotropic(1e-14, 1.0, 1, 1.0).unwrap();
        let h = trace_history(
            &Points::empty(1),
            &[Points::from_scalars(&[0.0, 1.0])],
            &theta,
        )
        .unwrap();
        let r = check_lemma1(&h, &theta, 2).unwrap();
        assert!(r.lhs < 1e-12 && r.rhs < 1e-12);
    }

    #[test]
    fn lemma1_empty_history() {
        let theta = SEHyperparams::isotropic(1.0, 1.0, 1, 1.0).unwrap();
        let h = TraceHistory {
            traces: vec![],
            ig_realized: 0.0,
        };
        assert!(matches!(
            check_lemma1(&h, &theta, 1),
            Err(Error::EmptyHistory)
        ));
    }

    #[test]
    fn realized_ig_is_sum_of_conditional_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let theta = SEHyperparams::isotropic(0.8, 0.6, 1, 0.05).unwrap();
        let initial = Points::from_scalars(&[0.0]);
        let batches: Vec<Points> = (0..4)
            .map(|_| Points::from_scalars(&[rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)]))
            .collect();
        let h = trace_history(&initial, &batches, &theta).unwrap();
        let mut seen = initial.clone();
        let mut sum = 0.0;
        for b in &batches {
            let data = Dataset::values_only(seen.clone(), vec![0.0; seen.len()]).unwrap();
            let m = GpModel::condition(data, Scheme::ValuesOnly, theta.clone()).unwrap();
            let cov = m.predict_point_block(b).unwrap().1;
            sum += half_log_det_i_plus(&cov, theta.noise_variance).unwrap();
            seen.extend(b).unwrap();
        }
        assert_abs_diff_eq!(h.ig_realized, sum, epsilon = 1e-9);
    }

    #[test]
    fn decay_series_arithmetic() {
        let s = decay_series(&[2.5, 2.5, 2.5]).unwrap();
        assert_eq!(s.running_average, vec![2.5, 2.5, 2.5]);
        let s = decay_series(&[4.0, 2.0]).unwrap();
        assert_eq!(s.running_average, vec![4.0, 3.0]);
        assert!(matches!(decay_series(&[]), Err(Error::EmptyHistory)));
        let s = decay_series(&[1.0, 5.0, 3.0, 2.0, 1.0]).unwrap();
        assert!(!s.non_increasing_from(1));
        assert!(s.non_increasing_from(3));
    }

    #[test]
    fn random_checks_all_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let r = trials::run_checks(20, &mut rng).unwrap();
        for t in [r.proposition1, r.theorem1, r.dominance, r.lemma1] {
            assert_eq!(
                t,
                trials::Tally {
                    passed: 20,
                    failed: 0
                }
            );
        }
    }
}
