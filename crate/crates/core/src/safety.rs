//! Safety model: a values-only GP on observed safety values `z`, and the
//! batch safety functional
//!
//! `zeta(x_1..x_n) = min_i Phi((z_max - mu_g(x_i)) / sigma_g(x_i))`
//!
//! where `sigma_g` includes observation noise.

use statrs::function::erf::erfc;

use crate::acquisition::SafetyFunctional;
use crate::error::{Error, Result};
use crate::gp::{fit, Dataset, GpModel, OptimizerConfig, Scheme};
use crate::kernel::SEHyperparams;
use crate::points::Points;

#[derive(Clone, Debug)]
pub struct SafetyModel {
    gp: GpModel,
    z_max: f64,
}

pub fn standard_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

impl SafetyModel {
    pub fn new(gp: GpModel, z_max: f64) -> Result<Self> {
        if !z_max.is_finite() {
            return Err(Error::Config("z_max must be finite".into()));
        }
        if gp.scheme() != Scheme::ValuesOnly {
            return Err(Error::Config(
                "safety model uses the values-only scheme".into(),
            ));
        }
        Ok(Self { gp, z_max })
    }

    /// Fits the safety GP on `(inputs, z)`.
    pub fn fit(
        inputs: Points,
        z: Vec<f64>,
        z_max: f64,
        theta_init: &SEHyperparams,
        opt: &OptimizerConfig,
        seed: u64,
    ) -> Result<Self> {
        let data = Dataset::values_only(inputs, z)?;
        Self::new(
            fit(&data, Scheme::ValuesOnly, theta_init, opt, seed)?,
            z_max,
        )
    }

    pub fn gp(&self) -> &GpModel {
        &self.gp
    }

    pub fn z_max(&self) -> f64 {
        self.z_max
    }

    pub fn with_z_max(&self, z_max: f64) -> Result<Self> {
        Self::new(self.gp.clone(), z_max)
    }

    /// Per-point exceedance-safe probabilities.
    pub fn pointwise(&self, batch: &Points) -> Result<Vec<f64>> {
        let (mean, var) = self.gp.predict_marginal(batch)?;
        let noise = self.gp.theta().noise_variance;
        Ok(mean
            .iter()
            .zip(&var)
            .map(|(m, v)| {
                let sd = (v + noise).max(0.0).sqrt();
                if sd == 0.0 {
                    if *m < self.z_max {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    standard_normal_cdf((self.z_max - m) / sd)
                }
            })
            .collect())
    }

    pub fn zeta(&self, batch: &Points) -> Result<f64> {
        Ok(self.pointwise(batch)?.into_iter().fold(1.0, f64::min))
    }

    /// Refits on the augmented data, warm-started at the current hyperparameters.
    pub fn update(
        &self,
        new_inputs: &Points,
        new_z: &[f64],
        opt: &OptimizerConfig,
        seed: u64,
    ) -> Result<Self> {
        if new_inputs.is_empty() && new_z.is_empty() {
            return Ok(self.clone());
        }
        let mut data = self.gp.dataset().clone();
        data.append(new_inputs, new_z, None)?;
        let gp = fit(&data, Scheme::ValuesOnly, self.gp.theta(), opt, seed)?;
        Self::new(gp, self.z_max)
    }
}

pub fn update_safety(
    s: &SafetyModel,
    new_inputs: &Points,
    new_z: &[f64],
    opt: &OptimizerConfig,
    seed: u64,
) -> Result<SafetyModel> {
    s.update(new_inputs, new_z, opt, seed)
}

impl SafetyFunctional for SafetyModel {
    fn zeta(&self, batch: &Points) -> Result<f64> {
        SafetyModel::zeta(self, batch)
    }
}
