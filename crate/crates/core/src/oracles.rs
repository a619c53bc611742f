//! Ground-truth functions and gradient estimators used by the experiments.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::acquisition::SearchBox;
use crate::error::{Error, Result};
use crate::points::Points;

type EvalFn = dyn Fn(&[f64]) -> (f64, Vec<f64>) + Send + Sync;

/// A noisy function with analytic gradient over a box.
#[derive(Clone)]
pub struct FunctionOracle {
    eval: Arc<EvalFn>,
    pub domain: SearchBox,
    pub noise_point: f64,
    pub noise_grad: f64,
}

impl std::fmt::Debug for FunctionOracle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FunctionOracle")
            .field("domain", &self.domain)
            .field("noise_point", &self.noise_point)
            .field("noise_grad", &self.noise_grad)
            .finish_non_exhaustive()
    }
}

impl FunctionOracle {
    pub fn new<F>(eval: F, domain: SearchBox, noise_point: f64, noise_grad: f64) -> Result<Self>
    where
        F: Fn(&[f64]) -> (f64, Vec<f64>) + Send + Sync + 'static,
    {
        if !(noise_point >= 0.0 && noise_grad >= 0.0) {
            return Err(Error::Config(
                "noise standard deviations must be non-negative".into(),
            ));
        }
        Ok(Self {
            eval: Arc::new(eval),
            domain,
            noise_point,
            noise_grad,
        })
    }

    pub fn cardinal_sine(domain: SearchBox, noise_point: f64, noise_grad: f64) -> Result<Self> {
        Self::new(
            |x| {
                let (v, g) = cardinal_sine(x[0]);
                (v, vec![g])
            },
            domain,
            noise_point,
            noise_grad,
        )
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    /// Noise-free value and gradient.
    pub fn truth(&self, x: &[f64]) -> (f64, Vec<f64>) {
        (self.eval)(x)
    }

    /// Value and gradient with additive Gaussian noise.
    pub fn observe<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> (f64, Vec<f64>) {
        let (v, g) = self.truth(x);
        let v = v + gaussian(self.noise_point, rng);
        let g = g
            .into_iter()
            .map(|gk| gk + gaussian(self.noise_grad, rng))
            .collect();
        (v, g)
    }
}

fn gaussian<R: Rng + ?Sized>(sd: f64, rng: &mut R) -> f64 {
    if sd == 0.0 {
        0.0
    } else {
        Normal::new(0.0, sd).expect("finite sd").sample(rng)
    }
}

/// `f(x) = 10 sin(x - 10) / (x - 10)` and its derivative.
pub fn cardinal_sine(x: f64) -> (f64, f64) {
    let u = x - 10.0;
    if u.abs() < 1e-8 {
        return (10.0, 0.0);
    }
    let (s, c) = u.sin_cos();
    (10.0 * s / u, 10.0 * c / u - 10.0 * s / (u * u))
}

#[derive(Clone, Debug, PartialEq)]
pub struct FdGradient {
    pub gradient: Vec<f64>,
    /// Set when some component fell back to a one-sided difference at the domain boundary.
    pub one_sided: bool,
}

/// Central differences `(f(x + h e_k) - f(x - h e_k)) / 2h`. With a domain,
/// components whose stencil would leave it use a one-sided difference.
pub fn finite_diff_gradient<F>(
    f: F,
    x: &[f64],
    h: f64,
    domain: Option<&SearchBox>,
) -> Result<FdGradient>
where
    F: Fn(&[f64]) -> f64,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::Config(
            "finite-difference step must be positive".into(),
        ));
    }
    if let Some(b) = domain {
        if !b.contains(x) {
            return Err(Error::DomainViolation);
        }
    }
    let mut one_sided = false;
    let mut q = x.to_vec();
    let mut gradient = Vec::with_capacity(x.len());
    for k in 0..x.len() {
        let (mut hi, mut lo) = (x[k] + h, x[k] - h);
        if let Some(b) = domain {
            if hi > b.upper()[k] {
                hi = x[k];
                one_sided = true;
            }
            if lo < b.lower()[k] {
                lo = x[k];
                one_sided = true;
            }
            if hi == lo {
                return Err(Error::DomainViolation);
            }
        }
        q[k] = hi;
        let f_hi = f(&q);
        q[k] = lo;
        let f_lo = f(&q);
        q[k] = x[k];
        gradient.push((f_hi - f_lo) / (hi - lo));
    }
    Ok(FdGradient {
        gradient,
        one_sided,
    })
}

const NEIGHBOURS: usize = 4;

/// Slope estimate at `points[target]` from its four nearest neighbours, by
/// least squares on `sigma = V * grad` with each row (offset and height
/// difference) divided by the neighbour's planar distance.
pub fn scattered_gradient(points: &[[f64; 3]], target: usize) -> Result<[f64; 2]> {
    if points.len() < NEIGHBOURS + 1 {
        return Err(Error::TooFewPoints {
            needed: NEIGHBOURS + 1,
            found: points.len(),
        });
    }
    let p = points[target];
    let mut order: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != target)
        .map(|(i, q)| ((q[0] - p[0]).hypot(q[1] - p[1]), i))
        .filter(|(dist, _)| *dist > 0.0)
        .collect();
    if order.len() < NEIGHBOURS {
        return Err(Error::TooFewPoints {
            needed: NEIGHBOURS + 1,
            found: order.len() + 1,
        });
    }
    let by_distance = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    order.select_nth_unstable_by(NEIGHBOURS - 1, by_distance);
    order[..NEIGHBOURS].sort_by(by_distance);
    // normal equations of the distance-normalized system
    let (mut a11, mut a12, mut a22, mut b1, mut b2) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &(dist, i) in &order[..NEIGHBOURS] {
        let q = points[i];
        let v1 = (q[0] - p[0]) / dist;
        let v2 = (q[1] - p[1]) / dist;
        let s = (q[2] - p[2]) / dist;
        a11 += v1 * v1;
        a12 += v1 * v2;
        a22 += v2 * v2;
        b1 += v1 * s;
        b2 += v2 * s;
    }
    let det = a11 * a22 - a12 * a12;
    // rows are unit vectors, so the trace is NEIGHBOURS
    if det.abs() <= 1e-10 {
        return Err(Error::CollinearNeighborhood);
    }
    Ok([(a22 * b1 - a12 * b2) / det, (a11 * b2 - a12 * b1) / det])
}

/// Scattered height samples with optional estimated slopes.
#[derive(Clone, Debug, PartialEq)]
pub struct ElevationDataset {
    pub coordinates: Points,
    pub heights: Vec<f64>,
    pub estimated_gradients: Option<Points>,
}

impl ElevationDataset {
    pub fn new(coordinates: Points, heights: Vec<f64>) -> Result<Self> {
        if coordinates.dim() != 2 {
            return Err(Error::DimensionMismatch {
                expected: 2,
                found: coordinates.dim(),
            });
        }
        if coordinates.len() != heights.len() {
            return Err(Error::DimensionMismatch {
                expected: coordinates.len(),
                found: heights.len(),
            });
        }
        Ok(Self {
            coordinates,
            heights,
            estimated_gradients: None,
        })
    }

    pub fn len(&self) -> usize {
        self.heights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heights.is_empty()
    }

    fn triples(&self) -> Vec<[f64; 3]> {
        self.coordinates
            .rows()
            .zip(&self.heights)
            .map(|(c, h)| [c[0], c[1], *h])
            .collect()
    }

    /// Fills `estimated_gradients` with [`scattered_gradient`] at every point.
    pub fn estimate_gradients(&mut self) -> Result<&Points> {
        let triples = self.triples();
        let mut flat = Vec::with_capacity(2 * triples.len());
        for i in 0..triples.len() {
            flat.extend_from_slice(&scattered_gradient(&triples, i)?);
        }
        self.estimated_gradients = Some(Points::new(flat, 2)?);
        Ok(self.estimated_gradients.as_ref().expect("just set"))
    }
}

const HEADER_NAMES: &[&str] = &[
    "x",
    "y",
    "z",
    "x1",
    "x2",
    "h",
    "height",
    "elevation",
    "east",
    "north",
    "easting",
    "northing",
];

fn split_fields(line: &str) -> Vec<&str> {
    if line.contains(',') {
        line.split(',').map(str::trim).collect()
    } else {
        line.split_whitespace().collect()
    }
}

/// Parses `x1<sep>x2<sep>y` lines, drops duplicate coordinates (first kept)
/// and keeps a uniform random subset of `fraction` of the points in file order.
pub fn load_elevation_csv(
    path: &Path,
    subsample_fraction: f64,
    rng_seed: u64,
) -> Result<ElevationDataset> {
    if !(subsample_fraction > 0.0 && subsample_fraction <= 1.0) {
        return Err(Error::Config(format!(
            "subsample fraction {subsample_fraction} outside (0, 1]"
        )));
    }
    let text = fs::read_to_string(path)?;
    let mut rows: Vec<[f64; 3]> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    let mut first_content = true;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields = split_fields(line);
        let is_first = std::mem::replace(&mut first_content, false);
        if is_first
            && fields.len() == 3
            && fields
                .iter()
                .all(|f| HEADER_NAMES.contains(&f.to_ascii_lowercase().as_str()))
        {
            continue;
        }
        if fields.len() != 3 {
            return Err(Error::Parse {
                line: lineno + 1,
                msg: format!("expected 3 fields, found {}", fields.len()),
            });
        }
        let mut row = [0.0; 3];
        for (slot, field) in row.iter_mut().zip(&fields) {
            *slot = field.parse::<f64>().map_err(|e| Error::Parse {
                line: lineno + 1,
                msg: format!("'{field}': {e}"),
            })?;
        }
        if seen.insert((row[0].to_bits(), row[1].to_bits())) {
            rows.push(row);
        }
    }
    if rows.is_empty() {
        return Err(Error::EmptyFile(path.to_path_buf()));
    }
    let m = rows.len();
    let keep = ((subsample_fraction * m as f64).round() as usize).clamp(1, m);
    let mut idx: Vec<usize> = if keep == m {
        (0..m).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        sample(&mut rng, m, keep).into_vec()
    };
    idx.sort_unstable();
    let coords: Vec<f64> = idx.iter().flat_map(|&i| [rows[i][0], rows[i][1]]).collect();
    let heights = idx.iter().map(|&i| rows[i][2]).collect();
    ElevationDataset::new(Points::new(coords, 2)?, heights)
}

/// A smooth surface of three Gaussian bumps, used as a synthetic elevation map
/// on `[0, 49]^2` (meters).
pub mod bumps {
    use super::*;

    /// (center x1, center x2, amplitude, width)
    const BUMPS: [(f64, f64, f64, f64); 3] = [
        (14.0, 15.0, 30.0, 7.0),
        (34.0, 30.0, -20.0, 9.0),
        (18.0, 38.0, 15.0, 6.0),
    ];

    pub const EXTENT: f64 = 49.0;

    pub fn surface(x: &[f64]) -> (f64, Vec<f64>) {
        let mut v = 0.0;
        let mut g = vec![0.0, 0.0];
        for (c1, c2, amp, w) in BUMPS {
            let (d1, d2) = (x[0] - c1, x[1] - c2);
            let e = amp * (-(d1 * d1 + d2 * d2) / (2.0 * w * w)).exp();
            v += e;
            g[0] -= d1 / (w * w) * e;
            g[1] -= d2 / (w * w) * e;
        }
        (v, g)
    }

    /// `size x size` grid over `[0, EXTENT]^2`, row-major in `x1`.
    pub fn grid(size: usize) -> ElevationDataset {
        let step = EXTENT / (size.max(2) - 1) as f64;
        let mut coords = Vec::with_capacity(2 * size * size);
        let mut heights = Vec::with_capacity(size * size);
        for j in 0..size {
            for i in 0..size {
                let x = [i as f64 * step, j as f64 * step];
                coords.extend_from_slice(&x);
                heights.push(surface(&x).0);
            }
        }
        ElevationDataset::new(Points::new(coords, 2).expect("2-d rows"), heights)
            .expect("matching lengths")
    }

    pub fn domain() -> SearchBox {
        SearchBox::new(vec![0.0, 0.0], vec![EXTENT, EXTENT]).expect("non-empty box")
    }
}

/// Smooth surrogate for a pressure plant driven by actuation `u` and speed `v`.
///
/// The input is the lag vector `(u_i, u_{i-1}, u_{i-2}, u_{i-3}, v_i, v_{i-1}, v_{i-3})`
/// with all entries in `[0, 1]`. The response is
///
/// ```text
/// s = 0.9 (0.4 u_i + 0.3 u_{i-1} + 0.2 u_{i-2} + 0.1 u_{i-3})
///   + 0.6 (0.5 v_i + 0.3 v_{i-1} + 0.2 v_{i-3})
///   + 0.8 u_i v_i
/// y = 10 tanh(s),   z = y / 7
/// ```
///
/// and the safety limit is `z = 1`, i.e. `s > atanh(0.7) ~ 0.867` is unsafe.
/// Zero input maps to zero output; the all-ones corner has `z ~ 1.40`.
pub mod plant {
    use super::*;

    pub const INPUT_DIM: usize = 7;
    pub const Y_SCALE: f64 = 10.0;
    pub const Y_CAP: f64 = 7.0;
    pub const Z_MAX: f64 = 1.0;
    /// Lags consumed from the history: current step plus three back.
    pub const HISTORY: usize = 4;

    const U_WEIGHTS: [f64; 4] = [0.4, 0.3, 0.2, 0.1];
    const V_WEIGHTS: [f64; 3] = [0.5, 0.3, 0.2];
    const U_GAIN: f64 = 0.9;
    const V_GAIN: f64 = 0.6;
    const COUPLING: f64 = 0.8;

    #[derive(Clone, Debug, PartialEq)]
    pub struct PlantSample {
        pub y: f64,
        pub z: f64,
        pub grad: Vec<f64>,
    }

    fn drive(x: &[f64]) -> f64 {
        let u: f64 = U_WEIGHTS.iter().zip(&x[0..4]).map(|(w, v)| w * v).sum();
        let v: f64 = V_WEIGHTS.iter().zip(&x[4..7]).map(|(w, v)| w * v).sum();
        U_GAIN * u + V_GAIN * v + COUPLING * x[0] * x[4]
    }

    /// Response at a lag vector.
    pub fn respond(x: &[f64]) -> Result<PlantSample> {
        if x.len() != INPUT_DIM {
            return Err(Error::DimensionMismatch {
                expected: INPUT_DIM,
                found: x.len(),
            });
        }
        let s = drive(x);
        let t = s.tanh();
        let y = Y_SCALE * t;
        let dy_ds = Y_SCALE * (1.0 - t * t);
        let mut ds = [0.0; INPUT_DIM];
        for k in 0..4 {
            ds[k] = U_GAIN * U_WEIGHTS[k];
        }
        for k in 0..3 {
            ds[4 + k] = V_GAIN * V_WEIGHTS[k];
        }
        ds[0] += COUPLING * x[4];
        ds[4] += COUPLING * x[0];
        Ok(PlantSample {
            y,
            z: y / Y_CAP,
            grad: ds.iter().map(|d| dy_ds * d).collect(),
        })
    }

    /// Lag vector at the last step of the histories (most recent last).
    pub fn lag_vector(u: &[f64], v: &[f64]) -> Result<[f64; INPUT_DIM]> {
        for h in [u, v] {
            if h.len() < HISTORY {
                return Err(Error::HistoryTooShort {
                    needed: HISTORY,
                    found: h.len(),
                });
            }
        }
        let (i, j) = (u.len() - 1, v.len() - 1);
        Ok([u[i], u[i - 1], u[i - 2], u[i - 3], v[j], v[j - 1], v[j - 3]])
    }

    pub fn synthetic_safe_plant(u_history: &[f64], v_history: &[f64]) -> Result<PlantSample> {
        respond(&lag_vector(u_history, v_history)?)
    }

    pub fn input_box() -> SearchBox {
        SearchBox::new(vec![0.0; INPUT_DIM], vec![1.0; INPUT_DIM]).expect("unit box")
    }
}
