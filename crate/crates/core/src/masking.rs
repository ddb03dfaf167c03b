//! Per-parameter agreement statistics across environments and the masks built from them.
//!
//! Everything here works column-wise on an [`EnvGradientSet`]: row `e` holds
//! the gradient of environment `e`, column `j` the gradients flowing into
//! parameter `j`.

use std::io::Write;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Gradients of every environment stacked row-wise, shape `(environments, parameters)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvGradientSet {
    grads: Array2<f64>,
    env_ids: Vec<usize>,
}

impl EnvGradientSet {
    pub fn new(grads: Array2<f64>, env_ids: Vec<usize>) -> Result<Self> {
        if env_ids.len() != grads.nrows() {
            return Err(Error::LengthMismatch {
                what: "env_ids",
                expected: grads.nrows(),
                actual: env_ids.len(),
            });
        }
        if grads.nrows() == 0 {
            return Err(Error::TooFewEnvironments {
                required: 1,
                actual: 0,
            });
        }
        for ((env, param), v) in grads.indexed_iter() {
            if !v.is_finite() {
                return Err(Error::NonFiniteGradient { env, param });
            }
        }
        Ok(Self { grads, env_ids })
    }

    /// Environments labelled `0..rows`.
    pub fn from_rows(grads: Array2<f64>) -> Result<Self> {
        let ids = (0..grads.nrows()).collect();
        Self::new(grads, ids)
    }

    pub fn into_grads(self) -> Array2<f64> {
        self.grads
    }

    pub fn grads(&self) -> ArrayView2<'_, f64> {
        self.grads.view()
    }

    pub fn env_ids(&self) -> &[usize] {
        &self.env_ids
    }

    pub fn num_envs(&self) -> usize {
        self.grads.nrows()
    }

    pub fn num_params(&self) -> usize {
        self.grads.ncols()
    }

    fn require_masking_envs(&self) -> Result<()> {
        if self.num_envs() < 2 {
            return Err(Error::TooFewEnvironments {
                required: 2,
                actual: self.num_envs(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MaskMethod {
    #[default]
    None,
    AndMask,
    SandMask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    #[default]
    Arithmetic,
    Geometric,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskConfig {
    pub method: MaskMethod,
    /// Agreement threshold in `[0, 1]`.
    pub tau: f64,
    /// Below this squared mean the dispersion ratio is treated as degenerate.
    pub eps_avg: f64,
    /// Below this variance a degenerate column counts as fully consistent.
    pub eps_var: f64,
    pub averaging: Averaging,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            method: MaskMethod::None,
            tau: 1.0,
            eps_avg: 1e-12,
            eps_var: 1e-12,
            averaging: Averaging::Arithmetic,
        }
    }
}

impl MaskConfig {
    pub fn new(method: MaskMethod, tau: f64) -> Self {
        Self {
            method,
            tau,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::InvalidConfig(format!(
                "tau {} outside [0, 1]",
                self.tau
            )));
        }
        if !(self.eps_avg > 0.0 && self.eps_var > 0.0) {
            return Err(Error::InvalidConfig(
                "eps_avg and eps_var must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Per-parameter update weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamMask {
    pub weights: Vec<f64>,
}

impl ParamMask {
    pub fn ones(n: usize) -> Self {
        Self {
            weights: vec![1.0; n],
        }
    }

    /// Mean weight, i.e. the effective fraction of parameters receiving updates.
    pub fn density(&self) -> f64 {
        if self.weights.is_empty() {
            return 1.0;
        }
        self.weights.iter().sum::<f64>() / self.weights.len() as f64
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn columns(g: &EnvGradientSet) -> impl Iterator<Item = ArrayView1<'_, f64>> {
    g.grads.axis_iter(Axis(1))
}

/// `a_j = |mean_e sign(g_ej)|`, with `sign(0) = 0`.
pub fn sign_agreement(g: &EnvGradientSet) -> Result<Vec<f64>> {
    g.require_masking_envs()?;
    let d = g.num_envs() as f64;
    // Row-major accumulation; per column the environments are still summed in order.
    let mut acc = vec![0.0; g.num_params()];
    for row in g.grads.outer_iter() {
        for (a, &v) in acc.iter_mut().zip(row.iter()) {
            *a += sign(v);
        }
    }
    Ok(acc.into_iter().map(|s| (s / d).abs()).collect())
}

fn ratio(mean: f64, var: f64, eps_avg: f64, eps_var: f64) -> f64 {
    let avg2 = mean * mean;
    if avg2 < eps_avg {
        if var >= eps_var {
            f64::INFINITY
        } else {
            0.0
        }
    } else {
        var / avg2
    }
}

/// Variance-to-squared-mean ratio across environments (population variance).
/// A near-zero mean yields `+inf` unless the variance is near zero as well, in which case `0`.
pub fn dispersion(g: &EnvGradientSet, eps_avg: f64, eps_var: f64) -> Result<Vec<f64>> {
    g.require_masking_envs()?;
    let d = g.num_envs() as f64;
    let mut mean = vec![0.0; g.num_params()];
    for row in g.grads.outer_iter() {
        for (m, &v) in mean.iter_mut().zip(row.iter()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= d);
    let mut var = vec![0.0; g.num_params()];
    for row in g.grads.outer_iter() {
        for ((s, &v), &m) in var.iter_mut().zip(row.iter()).zip(&mean) {
            *s += (v - m).powi(2);
        }
    }
    Ok(mean
        .iter()
        .zip(&var)
        .map(|(&m, &s)| ratio(m, s / d, eps_avg, eps_var))
        .collect())
}

pub fn and_mask(agreement: &[f64], tau: f64) -> ParamMask {
    ParamMask {
        weights: agreement
            .iter()
            .map(|&a| if a >= tau { 1.0 } else { 0.0 })
            .collect(),
    }
}

/// Weight of a single parameter under the smoothed mask `max(0, tanh((a - tau) / sigma2))`.
pub fn sand_weight(agreement: f64, sigma2: f64, tau: f64) -> f64 {
    let margin = agreement - tau;
    if margin <= 0.0 {
        return 0.0;
    }
    if sigma2 == 0.0 {
        return 1.0;
    }
    if sigma2.is_infinite() {
        return 0.0;
    }
    (margin / sigma2).tanh().max(0.0)
}

pub fn sand_mask(agreement: &[f64], sigma2: &[f64], tau: f64) -> Result<ParamMask> {
    if agreement.len() != sigma2.len() {
        return Err(Error::LengthMismatch {
            what: "sigma2",
            expected: agreement.len(),
            actual: sigma2.len(),
        });
    }
    Ok(ParamMask {
        weights: agreement
            .iter()
            .zip(sigma2)
            .map(|(&a, &s)| sand_weight(a, s, tau))
            .collect(),
    })
}

pub fn arithmetic_mean_grad(g: &EnvGradientSet) -> Vec<f64> {
    g.grads
        .mean_axis(Axis(0))
        .expect("gradient set has at least one environment")
        .to_vec()
}

/// Signed geometric mean per coordinate. Columns without a strict common sign give 0.
pub fn geometric_mean_grad(g: &EnvGradientSet) -> Vec<f64> {
    let d = g.num_envs() as f64;
    columns(g)
        .map(|col| {
            let s = sign(col[0]);
            if s == 0.0 || col.iter().any(|&v| sign(v) != s) {
                return 0.0;
            }
            s * (col.iter().map(|v| v.abs().ln()).sum::<f64>() / d).exp()
        })
        .collect()
}

/// Result of one masking step. `agreement` and `dispersion` are always filled for logging.
#[derive(Debug, Clone)]
pub struct MaskedUpdate {
    pub update: Vec<f64>,
    pub mask: ParamMask,
    pub agreement: Vec<f64>,
    pub dispersion: Vec<f64>,
}

pub fn masked_update_gradient(g: &EnvGradientSet, cfg: &MaskConfig) -> Result<MaskedUpdate> {
    cfg.validate()?;
    let mean = match cfg.averaging {
        Averaging::Arithmetic => arithmetic_mean_grad(g),
        Averaging::Geometric => geometric_mean_grad(g),
    };
    let (agreement, dispersion) = if g.num_envs() >= 2 {
        (sign_agreement(g)?, dispersion(g, cfg.eps_avg, cfg.eps_var)?)
    } else if cfg.method == MaskMethod::None {
        (vec![1.0; g.num_params()], vec![0.0; g.num_params()])
    } else {
        return Err(Error::TooFewEnvironments {
            required: 2,
            actual: g.num_envs(),
        });
    };
    let mask = match cfg.method {
        MaskMethod::None => ParamMask::ones(g.num_params()),
        MaskMethod::AndMask => and_mask(&agreement, cfg.tau),
        MaskMethod::SandMask => sand_mask(&agreement, &dispersion, cfg.tau)?,
    };
    let update = if cfg.method == MaskMethod::None {
        mean
    } else {
        mean.iter().zip(&mask.weights).map(|(g, m)| g * m).collect()
    };
    Ok(MaskedUpdate {
        update,
        mask,
        agreement,
        dispersion,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub a: f64,
    pub sigma2: f64,
    pub mask: f64,
}

/// Tabulates the smoothed mask over an agreement grid for each dispersion level.
pub fn mask_shape_curve(tau: f64, sigma2_list: &[f64], a_grid: &[f64]) -> Result<Vec<CurvePoint>> {
    if a_grid.is_empty() {
        return Err(Error::InvalidConfig("agreement grid is empty".into()));
    }
    Ok(sigma2_list
        .iter()
        .flat_map(|&sigma2| {
            a_grid.iter().map(move |&a| CurvePoint {
                a,
                sigma2,
                mask: sand_weight(a, sigma2, tau),
            })
        })
        .collect())
}

/// `points` evenly spaced values covering `[0, 1]`.
pub fn uniform_grid(points: usize) -> Vec<f64> {
    match points {
        0 => Vec::new(),
        1 => vec![0.0],
        n => (0..n).map(|i| i as f64 / (n - 1) as f64).collect(),
    }
}

/// Writes the curve as CSV with header `a,sigma2,mask`.
pub fn write_curve_csv<W: Write>(points: &[CurvePoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for p in points {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}
