use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::acquisition::{Criterion, SearchBox};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ExperimentKind {
    CardinalSine,
    SafePlant,
    Map,
}

impl ExperimentKind {
    /// Dimension of the search box for this experiment.
    pub fn box_dim(self) -> usize {
        match self {
            ExperimentKind::CardinalSine => 1,
            ExperimentKind::Map => 2,
            ExperimentKind::SafePlant => 4,
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExperimentKind::CardinalSine => "cardinal-sine",
            ExperimentKind::SafePlant => "safe-plant",
            ExperimentKind::Map => "map",
        })
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "cardinal-sine" => Ok(ExperimentKind::CardinalSine),
            "safe-plant" => Ok(ExperimentKind::SafePlant),
            "map" => Ok(ExperimentKind::Map),
            other => Err(Error::Config(format!("unknown experiment '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SchemeKind {
    Balgpd,
    Balgp,
    Random,
}

impl fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SchemeKind::Balgpd => "balgpd",
            SchemeKind::Balgp => "balgp",
            SchemeKind::Random => "random",
        })
    }
}

impl FromStr for SchemeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "balgpd" => Ok(SchemeKind::Balgpd),
            "balgp" => Ok(SchemeKind::Balgp),
            "random" => Ok(SchemeKind::Random),
            other => Err(Error::Config(format!("unknown scheme '{other}'"))),
        }
    }
}

/// Where the map experiment takes its slope observations from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GradientSource {
    /// Exact slope of the synthetic surface.
    Analytic,
    /// Four-neighbour least-squares estimate from the full height grid.
    Estimated,
}

impl fmt::Display for GradientSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GradientSource::Analytic => "analytic",
            GradientSource::Estimated => "estimated",
        })
    }
}

impl FromStr for GradientSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "analytic" => Ok(GradientSource::Analytic),
            "estimated" => Ok(GradientSource::Estimated),
            other => Err(Error::Config(format!("unknown gradient source '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub scheme: SchemeKind,
    pub criterion: Criterion,
    pub rounds: usize,
    pub batch_size: usize,
    pub n_initial: usize,
    pub search_box: SearchBox,
    pub noise_point: f64,
    pub noise_grad: f64,
    pub alpha: Option<f64>,
    pub seed: u64,
    pub replications: usize,
    /// Sine: number of test points. Map: grid side. Safe plant: number of test points.
    pub test_grid_size: usize,
    /// Map experiment only.
    pub gradient_source: GradientSource,
}

impl ExperimentConfig {
    pub fn defaults(experiment: ExperimentKind) -> Self {
        match experiment {
            ExperimentKind::CardinalSine => Self {
                experiment,
                scheme: SchemeKind::Balgpd,
                criterion: Criterion::D,
                rounds: 13,
                batch_size: 2,
                n_initial: 4,
                search_box: SearchBox::new(vec![-10.0], vec![15.0]).expect("valid box"),
                noise_point: 0.01,
                noise_grad: 0.01,
                alpha: None,
                seed: 0,
                replications: 30,
                test_grid_size: 200,
                gradient_source: GradientSource::Analytic,
            },
            ExperimentKind::SafePlant => Self {
                experiment,
                scheme: SchemeKind::Balgpd,
                criterion: Criterion::D,
                rounds: 8,
                batch_size: 5,
                n_initial: 25,
                search_box: SearchBox::new(vec![0.0; 4], vec![1.0; 4]).expect("valid box"),
                noise_point: 0.01,
                noise_grad: 0.01,
                alpha: Some(0.5),
                seed: 0,
                replications: 40,
                test_grid_size: 200,
                gradient_source: GradientSource::Analytic,
            },
            ExperimentKind::Map => Self {
                experiment,
                scheme: SchemeKind::Balgpd,
                criterion: Criterion::D,
                rounds: 42,
                batch_size: 3,
                n_initial: 25,
                search_box: crate::oracles::bumps::domain(),
                noise_point: 0.0,
                noise_grad: 0.0,
                alpha: None,
                seed: 0,
                replications: 60,
                test_grid_size: 50,
                gradient_source: GradientSource::Analytic,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.rounds == 0 {
            return fail("rounds must be at least 1");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1");
        }
        if self.n_initial == 0 {
            return fail("n_initial must be at least 1");
        }
        if self.replications == 0 {
            return fail("replications must be at least 1");
        }
        if self.test_grid_size == 0 {
            return fail("test_grid_size must be at least 1");
        }
        if !(self.noise_point >= 0.0 && self.noise_grad >= 0.0) {
            return fail("noise standard deviations must be non-negative");
        }
        if let Some(a) = self.alpha {
            if !(a > 0.0 && a <= 1.0) {
                return fail("alpha must lie in (0, 1]");
            }
        }
        if self.search_box.dim() != self.experiment.box_dim() {
            return Err(Error::Config(format!(
                "box for {} must have {} dimensions, got {}",
                self.experiment,
                self.experiment.box_dim(),
                self.search_box.dim()
            )));
        }
        match self.experiment {
            ExperimentKind::SafePlant => {
                if self.alpha.is_none() {
                    return fail("safe-plant requires alpha");
                }
                if !self.n_initial.is_multiple_of(self.batch_size) {
                    return fail("safe-plant n_initial must be a whole number of trajectories (multiple of batch_size)");
                }
            }
            ExperimentKind::Map => {
                let pool = self.test_grid_size * self.test_grid_size;
                if self.test_grid_size < 3 {
                    return fail("map grid side must be at least 3");
                }
                if self.n_initial + self.rounds * self.batch_size > pool {
                    return fail("map pool too small for the requested rounds");
                }
            }
            ExperimentKind::CardinalSine => {}
        }
        Ok(())
    }

    pub fn points_after(&self, round: usize) -> usize {
        self.n_initial + round * self.batch_size
    }
}

const KEYS: &[&str] = &[
    "experiment",
    "scheme",
    "criterion",
    "rounds",
    "batch_size",
    "n_initial",
    "box",
    "noise_point",
    "noise_grad",
    "alpha",
    "seed",
    "replications",
    "test_grid_size",
    "gradient_source",
];

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .parse::<T>()
        .map_err(|e| Error::Config(format!("{key}: '{value}': {e}")))
}

/// `lo:hi` per dimension, dimensions separated by commas.
pub fn parse_box(value: &str) -> Result<SearchBox> {
    let mut lower = Vec::new();
    let mut upper = Vec::new();
    for part in value.split(',') {
        let (lo, hi) = part
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("box: expected lo:hi, got '{}'", part.trim())))?;
        lower.push(parse_num::<f64>("box", lo.trim())?);
        upper.push(parse_num::<f64>("box", hi.trim())?);
    }
    SearchBox::new(lower, upper).map_err(|_| Error::Config(format!("box '{value}' is empty")))
}

pub fn format_box(b: &SearchBox) -> String {
    b.lower()
        .iter()
        .zip(b.upper())
        .map(|(l, u)| format!("{l}:{u}"))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Parses `key = value` lines. Missing keys take the experiment defaults.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut pairs: BTreeMap<String, String> = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
        let key = key.trim().to_string();
        if !KEYS.contains(&key.as_str()) {
            return Err(Error::Config(format!(
                "line {}: unknown key '{key}'",
                lineno + 1
            )));
        }
        if pairs
            .insert(key.clone(), value.trim().to_string())
            .is_some()
        {
            return Err(Error::Config(format!(
                "line {}: duplicate key '{key}'",
                lineno + 1
            )));
        }
    }
    let experiment = match pairs.get("experiment") {
        Some(v) => v.parse()?,
        None => ExperimentKind::CardinalSine,
    };
    let mut cfg = ExperimentConfig::defaults(experiment);
    for (key, value) in &pairs {
        let v = value.as_str();
        match key.as_str() {
            "experiment" => {}
            "scheme" => cfg.scheme = v.parse()?,
            "criterion" => cfg.criterion = v.parse()?,
            "rounds" => cfg.rounds = parse_num(key, v)?,
            "batch_size" => cfg.batch_size = parse_num(key, v)?,
            "n_initial" => cfg.n_initial = parse_num(key, v)?,
            "box" => cfg.search_box = parse_box(v)?,
            "noise_point" => cfg.noise_point = parse_num(key, v)?,
            "noise_grad" => cfg.noise_grad = parse_num(key, v)?,
            "alpha" => {
                cfg.alpha = if v.is_empty() || v == "none" {
                    None
                } else {
                    Some(parse_num(key, v)?)
                }
            }
            "seed" => cfg.seed = parse_num(key, v)?,
            "replications" => cfg.replications = parse_num(key, v)?,
            "test_grid_size" => cfg.test_grid_size = parse_num(key, v)?,
            "gradient_source" => cfg.gradient_source = v.parse()?,
            _ => unreachable!("keys checked above"),
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Inverse of [`parse_config`].
pub fn format_config(cfg: &ExperimentConfig) -> String {
    let mut out = String::new();
    out.push_str(&format!("experiment = {}\n", cfg.experiment));
    out.push_str(&format!("scheme = {}\n", cfg.scheme));
    out.push_str(&format!("criterion = {}\n", cfg.criterion));
    out.push_str(&format!("rounds = {}\n", cfg.rounds));
    out.push_str(&format!("batch_size = {}\n", cfg.batch_size));
    out.push_str(&format!("n_initial = {}\n", cfg.n_initial));
    out.push_str(&format!("box = {}\n", format_box(&cfg.search_box)));
    out.push_str(&format!("noise_point = {}\n", cfg.noise_point));
    out.push_str(&format!("noise_grad = {}\n", cfg.noise_grad));
    if let Some(a) = cfg.alpha {
        out.push_str(&format!("alpha = {a}\n"));
    }
    out.push_str(&format!("seed = {}\n", cfg.seed));
    out.push_str(&format!("replications = {}\n", cfg.replications));
    out.push_str(&format!("test_grid_size = {}\n", cfg.test_grid_size));
    out.push_str(&format!("gradient_source = {}\n", cfg.gradient_source));
    out
}
