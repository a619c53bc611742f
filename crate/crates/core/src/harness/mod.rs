//! Experiment loops for the three schemes, metrics and replication.

pub mod config;
pub mod report;

use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::acquisition::{
    batch_score, optimize_batch, optimize_batch_param_safe, pool_select, AcquisitionConfig,
    BatchParameterization, BatchProposal, SafetyFunctional, SearchBox,
};
use crate::error::{Error, Result};
use crate::gp::{fit, Dataset, GpModel, OptimizerConfig, Scheme};
use crate::kernel::SEHyperparams;
use crate::oracles::{bumps, cardinal_sine, finite_diff_gradient, plant};
use crate::points::Points;
use crate::safety::SafetyModel;

pub use config::{
    format_config, parse_config, ExperimentConfig, ExperimentKind, GradientSource, SchemeKind,
};
pub use report::{Aggregate, AggregateRow};

/// Interval from which initial sine inputs are drawn.
pub const SINE_INIT_RANGE: (f64, f64) = (-0.5, 0.5);
/// Fraction of each ramp-parameter range used for the initial safe trajectories.
pub const PLANT_INIT_FRACTION: f64 = 0.3;
/// Resampling budget for random safe trajectories.
pub const RANDOM_SAFE_TRIES: usize = 100;

const FD_STEP_PLANT: f64 = 1e-4;
const STREAM_INITIAL: u64 = 1;
const STREAM_ACQUIRE: u64 = 2;
const STREAM_NOISE: u64 = 3;
const STREAM_TEST: u64 = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub points_total: usize,
    pub rmse: f64,
    pub criterion_value: f64,
    pub zeta_min: Option<f64>,
    pub wall_ms: f64,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub config: ExperimentConfig,
    pub per_round: Vec<RoundRecord>,
    /// RMSE of the model fitted on the initial data only.
    pub initial_rmse: f64,
    pub final_theta: SEHyperparams,
    pub final_size: usize,
    /// Every queried input, initial data first.
    pub explored: Points,
    /// Number of calls into the batch optimizer or pool selector.
    pub acquisition_calls: usize,
    /// Candidates turned down by the safety constraint.
    pub safety_rejections: usize,
    /// Queried points whose true safety value exceeded the limit.
    pub safety_violations: usize,
}

#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)]
pub enum RunOutcome {
    Completed(RunResult),
    Failed { seed: u64, reason: String },
}

impl RunOutcome {
    pub fn completed(&self) -> Option<&RunResult> {
        match self {
            RunOutcome::Completed(r) => Some(r),
            RunOutcome::Failed { .. } => None,
        }
    }
}

/// Trajectory of `len` lag vectors generated by linear ramps of `u` and `v`.
///
/// Parameters are `(u_start, u_end, v_start, v_end)`. A trajectory of `len`
/// points spans `len + HISTORY - 1` time steps so every lag is defined.
#[derive(Clone, Debug)]
pub struct RampBatch {
    bounds: SearchBox,
    len: usize,
}

impl RampBatch {
    pub fn new(bounds: SearchBox, len: usize) -> Result<Self> {
        if bounds.dim() != 4 {
            return Err(Error::DimensionMismatch {
                expected: 4,
                found: bounds.dim(),
            });
        }
        if len == 0 {
            return Err(Error::DegenerateData(
                "trajectory length must be positive".into(),
            ));
        }
        Ok(Self { bounds, len })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

impl BatchParameterization for RampBatch {
    fn bounds(&self) -> &SearchBox {
        &self.bounds
    }

    fn batch(&self, params: &[f64]) -> Points {
        let steps = self.len + plant::HISTORY - 1;
        let ramp = |a: f64, b: f64| -> Vec<f64> {
            (0..steps)
                .map(|t| (a + (b - a) * t as f64 / (steps - 1) as f64).clamp(0.0, 1.0))
                .collect()
        };
        let u = ramp(params[0], params[1]);
        let v = ramp(params[2], params[3]);
        let mut out = Points::empty(plant::INPUT_DIM);
        for i in plant::HISTORY - 1..steps {
            let lag = plant::lag_vector(&u[..=i], &v[..=i]).expect("history long enough");
            out.push(&lag).expect("rows match the plant input");
        }
        out
    }
}

/// Root mean squared error of the predictive mean on a test set.
pub fn rmse(model: &GpModel, test_inputs: &Points, test_truths: &[f64]) -> Result<f64> {
    if test_inputs.len() != test_truths.len() {
        return Err(Error::DimensionMismatch {
            expected: test_inputs.len(),
            found: test_truths.len(),
        });
    }
    if test_inputs.is_empty() {
        return Err(Error::DegenerateData("empty test set".into()));
    }
    let mean = model.predict_mean(test_inputs)?;
    rmse_of(&mean, test_truths)
}

/// RMSE between two equal-length vectors.
pub fn rmse_of(predicted: &[f64], truth: &[f64]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            expected: truth.len(),
            found: predicted.len(),
        });
    }
    if truth.is_empty() {
        return Err(Error::DegenerateData("empty test set".into()));
    }
    let ss: f64 = predicted
        .iter()
        .zip(truth)
        .map(|(p, t)| (p - t).powi(2))
        .sum();
    Ok((ss / truth.len() as f64).sqrt())
}

fn model_scheme(s: SchemeKind) -> Scheme {
    match s {
        SchemeKind::Balgpd => Scheme::WithDerivatives,
        SchemeKind::Balgp | SchemeKind::Random => Scheme::ValuesOnly,
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn noise<R: Rng + ?Sized>(sd: f64, rng: &mut R) -> f64 {
    if sd == 0.0 {
        0.0
    } else {
        Normal::new(0.0, sd).expect("finite sd").sample(rng)
    }
}

/// Hyperparameter search settings for the first fit and for warm-started refits.
struct FitSchedule {
    initial: OptimizerConfig,
    refit: OptimizerConfig,
}

fn schedule(
    initial_starts: usize,
    initial_iters: usize,
    refit_starts: usize,
    refit_iters: usize,
) -> FitSchedule {
    FitSchedule {
        initial: OptimizerConfig {
            starts: initial_starts,
            max_iters: initial_iters,
            ..Default::default()
        },
        refit: OptimizerConfig {
            starts: refit_starts,
            max_iters: refit_iters,
            ..Default::default()
        },
    }
}

/// Observed batch: inputs, values, gradients and (safe plant only) safety values.
struct Observation {
    inputs: Points,
    values: Vec<f64>,
    gradients: Points,
    safety: Vec<f64>,
    violations: usize,
}

#[allow(clippy::large_enum_variant)]
enum Environment {
    Sine,
    Map {
        coords: Points,
        heights: Vec<f64>,
        gradients: Points,
        available: Vec<usize>,
    },
    Plant {
        ramps: RampBatch,
        safety: Option<SafetyModel>,
        safety_theta: SEHyperparams,
    },
}

struct Run<'a> {
    cfg: &'a ExperimentConfig,
    env: Environment,
    scheme: Scheme,
    fits: FitSchedule,
    acquisition: AcquisitionConfig,
    test_inputs: Points,
    test_truths: Vec<f64>,
    noise_rng: ChaCha8Rng,
    acquire_rng: ChaCha8Rng,
    acquisition_calls: usize,
    safety_rejections: usize,
    safety_violations: usize,
}

impl<'a> Run<'a> {
    fn new(cfg: &'a ExperimentConfig) -> Result<Self> {
        let scheme = model_scheme(cfg.scheme);
        let mut test_rng = stream(cfg.seed, STREAM_TEST);
        let (env, fits, acquisition, test_inputs, test_truths) = match cfg.experiment {
            ExperimentKind::CardinalSine => {
                let b = &cfg.search_box;
                let m = cfg.test_grid_size;
                let xs: Vec<f64> = (0..m)
                    .map(|i| {
                        if m == 1 {
                            0.5 * (b.lower()[0] + b.upper()[0])
                        } else {
                            b.lower()[0] + b.width(0) * i as f64 / (m - 1) as f64
                        }
                    })
                    .collect();
                let truths = xs.iter().map(|x| cardinal_sine(*x).0).collect();
                (
                    Environment::Sine,
                    schedule(5, 200, 2, 50),
                    AcquisitionConfig::default(),
                    Points::from_scalars(&xs),
                    truths,
                )
            }
            ExperimentKind::Map => {
                let mut grid = bumps::grid(cfg.test_grid_size);
                let gradients = match cfg.gradient_source {
                    GradientSource::Estimated => grid.estimate_gradients()?.clone(),
                    GradientSource::Analytic => {
                        let mut g = Points::empty(2);
                        for c in grid.coordinates.rows() {
                            g.push(&bumps::surface(c).1)?;
                        }
                        g
                    }
                };
                let coords = grid.coordinates.clone();
                let heights = grid.heights.clone();
                (
                    Environment::Map {
                        available: (0..heights.len()).collect(),
                        coords: coords.clone(),
                        heights: heights.clone(),
                        gradients,
                    },
                    schedule(3, 100, 1, 3),
                    AcquisitionConfig::default(),
                    coords,
                    heights,
                )
            }
            ExperimentKind::SafePlant => {
                let ramps = RampBatch::new(cfg.search_box.clone(), cfg.batch_size)?;
                let n_traj = cfg.test_grid_size.div_ceil(cfg.batch_size);
                let mut xs = Points::empty(plant::INPUT_DIM);
                for _ in 0..n_traj {
                    let p = cfg.search_box.sample(&mut test_rng);
                    xs.extend(&ramps.batch(&p))?;
                }
                let xs = xs.select(&(0..cfg.test_grid_size).collect::<Vec<_>>());
                let truths = xs
                    .rows()
                    .map(|r| plant::respond(r).map(|s| s.y))
                    .collect::<Result<Vec<_>>>()?;
                (
                    Environment::Plant {
                        ramps,
                        safety: None,
                        safety_theta: SEHyperparams::isotropic(0.25, 1.0, plant::INPUT_DIM, 1e-4)?,
                    },
                    schedule(2, 60, 1, 5),
                    AcquisitionConfig {
                        starts: 5,
                        max_iters: 30,
                        ..Default::default()
                    },
                    xs,
                    truths,
                )
            }
        };
        Ok(Self {
            cfg,
            env,
            scheme,
            fits,
            acquisition,
            test_inputs,
            test_truths,
            noise_rng: stream(cfg.seed, STREAM_NOISE),
            acquire_rng: stream(cfg.seed, STREAM_ACQUIRE),
            acquisition_calls: 0,
            safety_rejections: 0,
            safety_violations: 0,
        })
    }

    fn theta_init(&self) -> Result<SEHyperparams> {
        let noise = self.cfg.noise_point.powi(2).max(1e-6);
        match self.cfg.experiment {
            ExperimentKind::CardinalSine => SEHyperparams::isotropic(10.0, 2.0, 1, noise),
            ExperimentKind::Map => SEHyperparams::isotropic(100.0, 8.0, 2, noise),
            ExperimentKind::SafePlant => {
                SEHyperparams::isotropic(10.0, 1.0, plant::INPUT_DIM, noise)
            }
        }
    }

    fn initial_inputs(&mut self) -> Result<Points> {
        let mut rng = stream(self.cfg.seed, STREAM_INITIAL);
        let cfg = self.cfg;
        match &mut self.env {
            Environment::Sine => {
                let (lo, hi) = SINE_INIT_RANGE;
                let xs: Vec<f64> = (0..cfg.n_initial).map(|_| rng.gen_range(lo..hi)).collect();
                Ok(Points::from_scalars(&xs))
            }
            Environment::Map {
                coords, available, ..
            } => {
                let mut idx = sample(&mut rng, available.len(), cfg.n_initial).into_vec();
                idx.sort_unstable();
                let chosen: Vec<usize> = idx.iter().map(|i| available[*i]).collect();
                available.retain(|i| !chosen.contains(i));
                Ok(coords.select(&chosen))
            }
            Environment::Plant { ramps, .. } => {
                let b = &cfg.search_box;
                let init = SearchBox::new(
                    b.lower().to_vec(),
                    (0..4)
                        .map(|k| b.lower()[k] + PLANT_INIT_FRACTION * b.width(k))
                        .collect(),
                )?;
                let mut xs = Points::empty(plant::INPUT_DIM);
                for _ in 0..cfg.n_initial / cfg.batch_size {
                    xs.extend(&ramps.batch(&init.sample(&mut rng)))?;
                }
                Ok(xs)
            }
        }
    }

    fn observe(&mut self, inputs: &Points) -> Result<Observation> {
        let cfg = self.cfg;
        let rng = &mut self.noise_rng;
        let d = inputs.dim();
        let mut values = Vec::with_capacity(inputs.len());
        let mut gradients = Points::empty(d);
        let mut safety = Vec::new();
        let mut violations = 0;
        match &self.env {
            Environment::Sine => {
                for x in inputs.rows() {
                    let (v, g) = cardinal_sine(x[0]);
                    values.push(v + noise(cfg.noise_point, rng));
                    gradients.push(&[g + noise(cfg.noise_grad, rng)])?;
                }
            }
            Environment::Map {
                coords,
                heights,
                gradients: est,
                ..
            } => {
                for x in inputs.rows() {
                    let i = coords
                        .rows()
                        .position(|c| c == x)
                        .ok_or_else(|| Error::DegenerateData("query outside the pool".into()))?;
                    values.push(heights[i] + noise(cfg.noise_point, rng));
                    let g: Vec<f64> = est
                        .row(i)
                        .iter()
                        .map(|g| g + noise(cfg.noise_grad, rng))
                        .collect();
                    gradients.push(&g)?;
                }
            }
            Environment::Plant { .. } => {
                let domain = plant::input_box();
                for x in inputs.rows() {
                    let truth = plant::respond(x)?;
                    if truth.z > plant::Z_MAX {
                        violations += 1;
                    }
                    let y = truth.y + noise(cfg.noise_point, rng);
                    let fd = finite_diff_gradient(
                        |q| plant::respond(q).map(|s| s.y).unwrap_or(f64::NAN),
                        x,
                        FD_STEP_PLANT,
                        Some(&domain),
                    )?;
                    let g: Vec<f64> = fd
                        .gradient
                        .iter()
                        .map(|g| g + noise(cfg.noise_grad, rng))
                        .collect();
                    values.push(y);
                    gradients.push(&g)?;
                    safety.push(y / plant::Y_CAP);
                }
            }
        }
        Ok(Observation {
            inputs: inputs.clone(),
            values,
            gradients,
            safety,
            violations,
        })
    }

    fn fit_safety(&mut self, obs: &Observation, seed: u64) -> Result<()> {
        if let Environment::Plant {
            safety,
            safety_theta,
            ..
        } = &mut self.env
        {
            let next = match safety.as_ref() {
                None => SafetyModel::fit(
                    obs.inputs.clone(),
                    obs.safety.clone(),
                    plant::Z_MAX,
                    safety_theta,
                    &self.fits.initial,
                    seed,
                )?,
                Some(s) => s.update(&obs.inputs, &obs.safety, &self.fits.refit, seed)?,
            };
            *safety = Some(next);
        }
        Ok(())
    }

    /// Picks the next batch. Returns the points, the criterion value and
    /// the safety value when a constraint is active.
    fn propose(&mut self, model: &GpModel) -> Result<(Points, f64, Option<f64>)> {
        let cfg = self.cfg;
        let n = cfg.batch_size;
        let c = cfg.criterion;
        let random = cfg.scheme == SchemeKind::Random;
        let rng = &mut self.acquire_rng;
        match &mut self.env {
            Environment::Sine => {
                if random {
                    let mut xs = Points::empty(1);
                    for _ in 0..n {
                        xs.push(&cfg.search_box.sample(rng))?;
                    }
                    let score = batch_score(model, &xs, c)?;
                    Ok((xs, score, None))
                } else {
                    self.acquisition_calls += 1;
                    let p = optimize_batch(model, &cfg.search_box, n, c, &self.acquisition, rng)?;
                    Ok((p.points, p.score, None))
                }
            }
            Environment::Map {
                coords, available, ..
            } => {
                if available.len() < n {
                    return Err(Error::PoolTooSmall {
                        pool: available.len(),
                        batch: n,
                    });
                }
                let picked: Vec<usize> = if random {
                    let mut idx = sample(rng, available.len(), n).into_vec();
                    idx.sort_unstable();
                    idx
                } else {
                    self.acquisition_calls += 1;
                    let pool = coords.select(available);
                    pool_select(model, &pool, n, c)?
                };
                let chosen: Vec<usize> = picked.iter().map(|i| available[*i]).collect();
                let mut sorted = picked.clone();
                sorted.sort_unstable_by(|a, b| b.cmp(a));
                for i in sorted {
                    available.remove(i);
                }
                let xs = coords.select(&chosen);
                let score = batch_score(model, &xs, c)?;
                Ok((xs, score, None))
            }
            Environment::Plant { ramps, safety, .. } => {
                let safety = safety
                    .as_ref()
                    .expect("safety model fitted on initial data");
                let alpha = cfg.alpha.expect("validated");
                if random {
                    for _ in 0..RANDOM_SAFE_TRIES {
                        let xs = ramps.batch(&cfg.search_box.sample(rng));
                        let zeta = SafetyFunctional::zeta(safety, &xs)?;
                        if zeta > 1.0 - alpha {
                            let score = batch_score(model, &xs, c)?;
                            return Ok((xs, score, Some(zeta)));
                        }
                        self.safety_rejections += 1;
                    }
                    Err(Error::NoFeasibleStart)
                } else {
                    self.acquisition_calls += 1;
                    let p: BatchProposal = optimize_batch_param_safe(
                        model,
                        safety,
                        alpha,
                        ramps,
                        c,
                        &self.acquisition,
                        rng,
                    )?;
                    self.safety_rejections += p.rejected;
                    Ok((p.points, p.score, p.zeta))
                }
            }
        }
    }
}

fn fit_seed(seed: u64, round: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(round as u64)
}

/// Runs one experiment.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunResult> {
    cfg.validate()?;
    let mut run = Run::new(cfg)?;
    let x0 = run.initial_inputs()?;
    let obs = run.observe(&x0)?;
    run.safety_violations += obs.violations;
    run.fit_safety(&obs, fit_seed(cfg.seed, 0))?;
    let mut data = Dataset::new(obs.inputs, obs.values, Some(obs.gradients))?;
    let theta0 = run.theta_init()?;
    let mut model = fit(
        &data,
        run.scheme,
        &theta0,
        &run.fits.initial,
        fit_seed(cfg.seed, 0),
    )?;
    let initial_rmse = rmse(&model, &run.test_inputs, &run.test_truths)?;

    let mut per_round = Vec::with_capacity(cfg.rounds);
    for round in 1..=cfg.rounds {
        let start = Instant::now();
        let (batch, criterion_value, zeta_min) = run.propose(&model)?;
        let obs = run.observe(&batch)?;
        run.safety_violations += obs.violations;
        run.fit_safety(&obs, fit_seed(cfg.seed, round))?;
        data.append(&obs.inputs, &obs.values, Some(&obs.gradients))?;
        model = fit(
            &data,
            run.scheme,
            model.theta(),
            &run.fits.refit,
            fit_seed(cfg.seed, round),
        )?;
        let err = rmse(&model, &run.test_inputs, &run.test_truths)?;
        per_round.push(RoundRecord {
            round,
            points_total: data.len(),
            rmse: err,
            criterion_value,
            zeta_min,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(RunResult {
        config: cfg.clone(),
        per_round,
        initial_rmse,
        final_theta: model.theta().clone(),
        final_size: data.len(),
        explored: data.inputs().clone(),
        acquisition_calls: run.acquisition_calls,
        safety_rejections: run.safety_rejections,
        safety_violations: run.safety_violations,
    })
}

/// Runs `cfg.replications` runs with seeds `seed, seed + 1, ...` and
/// aggregates the completed ones per round.
pub fn run_replications(cfg: &ExperimentConfig) -> Result<Aggregate> {
    cfg.validate()?;
    let runs: Vec<RunOutcome> = (0..cfg.replications as u64)
        .into_par_iter()
        .map(|k| {
            let mut c = cfg.clone();
            c.seed = cfg.seed.wrapping_add(k);
            match run_experiment(&c) {
                Ok(r) => RunOutcome::Completed(r),
                Err(e) => RunOutcome::Failed {
                    seed: c.seed,
                    reason: e.to_string(),
                },
            }
        })
        .collect();
    Ok(Aggregate::from_runs(runs))
}
