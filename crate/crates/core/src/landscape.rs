//! Analytic two-dimensional loss surfaces for studying masked gradient fields.
//!
//! Surfaces are sums of Gaussian wells (negative amplitude) and bumps
//! (positive amplitude). [`compute_field`] evaluates every environment on a
//! grid and runs the masking pipeline per cell, treating the two coordinates
//! as two parameters.

use std::io::Write;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::{
    arithmetic_mean_grad, geometric_mean_grad, masked_update_gradient, EnvGradientSet, MaskConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianTerm {
    pub center: [f64; 2],
    /// Negative for a well, positive for a bump.
    pub amplitude: f64,
    pub width: f64,
}

/// `L(x, y) = sum amplitude * exp(-|p - center|^2 / (2 width^2))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandscapeSpec {
    pub terms: Vec<GaussianTerm>,
}

impl LandscapeSpec {
    pub fn new(terms: Vec<GaussianTerm>) -> Result<Self> {
        if terms.is_empty() {
            return Err(Error::InvalidConfig(
                "landscape needs at least one term".into(),
            ));
        }
        if terms.iter().any(|t| !(t.width > 0.0)) {
            return Err(Error::InvalidConfig(
                "gaussian widths must be positive".into(),
            ));
        }
        Ok(Self { terms })
    }

    pub fn value(&self, p: [f64; 2]) -> f64 {
        eval_grad(self, p).0
    }
}

/// Surface value and closed-form gradient at `p`.
pub fn eval_grad(spec: &LandscapeSpec, p: [f64; 2]) -> (f64, [f64; 2]) {
    let mut value = 0.0;
    let mut grad = [0.0; 2];
    for t in &spec.terms {
        let dx = p[0] - t.center[0];
        let dy = p[1] - t.center[1];
        let w2 = t.width * t.width;
        let e = t.amplitude * (-(dx * dx + dy * dy) / (2.0 * w2)).exp();
        value += e;
        grad[0] -= e * dx / w2;
        grad[1] -= e * dy / w2;
    }
    (value, grad)
}

/// Two environments sharing a shallow well at `(+1, +1)` and disagreeing at
/// `(-1, -1)`: a deep well in A, a bump in B. Their average keeps a spurious
/// minimum at `(-1, -1)` of depth `-0.5`.
pub fn make_fig1_pair() -> (LandscapeSpec, LandscapeSpec) {
    let shared = GaussianTerm {
        center: [1.0, 1.0],
        amplitude: -0.5,
        width: 0.5,
    };
    let a = LandscapeSpec {
        terms: vec![
            shared,
            GaussianTerm {
                center: [-1.0, -1.0],
                amplitude: -2.0,
                width: 0.5,
            },
        ],
    };
    let b = LandscapeSpec {
        terms: vec![
            shared,
            GaussianTerm {
                center: [-1.0, -1.0],
                amplitude: 1.0,
                width: 0.5,
            },
        ],
    };
    (a, b)
}

/// Arithmetic mean of several surfaces at `p`.
pub fn average_value(envs: &[LandscapeSpec], p: [f64; 2]) -> f64 {
    envs.iter().map(|e| e.value(p)).sum::<f64>() / envs.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridParams {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub resolution: (usize, usize),
}

impl Default for GridParams {
    fn default() -> Self {
        Self {
            x_range: (-2.5, 2.5),
            y_range: (-2.5, 2.5),
            resolution: (101, 101),
        }
    }
}

impl GridParams {
    pub fn validate(&self) -> Result<()> {
        if self.resolution.0 < 2 || self.resolution.1 < 2 {
            return Err(Error::InvalidConfig(
                "grid resolution must be >= 2 per axis".into(),
            ));
        }
        if !(self.x_range.0 < self.x_range.1 && self.y_range.0 < self.y_range.1) {
            return Err(Error::InvalidConfig(
                "grid ranges must be increasing".into(),
            ));
        }
        Ok(())
    }

    pub fn spacing(&self) -> (f64, f64) {
        (
            (self.x_range.1 - self.x_range.0) / (self.resolution.0 - 1) as f64,
            (self.y_range.1 - self.y_range.0) / (self.resolution.1 - 1) as f64,
        )
    }

    pub fn point(&self, ix: usize, iy: usize) -> [f64; 2] {
        let (hx, hy) = self.spacing();
        [
            self.x_range.0 + ix as f64 * hx,
            self.y_range.0 + iy as f64 * hy,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldCell {
    pub x: f64,
    pub y: f64,
    /// One gradient per environment.
    pub env_grads: Vec<[f64; 2]>,
    /// Unmasked average gradient (arithmetic or geometric, per the mask config).
    pub mean_grad: [f64; 2],
    pub agreement: [f64; 2],
    pub dispersion: [f64; 2],
    pub mask: [f64; 2],
    pub update: [f64; 2],
}

/// Cells stored row-major with x varying fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldGrid {
    pub grid: GridParams,
    pub config: MaskConfig,
    pub cells: Vec<FieldCell>,
}

impl FieldGrid {
    pub fn cell(&self, ix: usize, iy: usize) -> &FieldCell {
        &self.cells[iy * self.grid.resolution.0 + ix]
    }
}

pub fn compute_field(
    envs: &[LandscapeSpec],
    grid: &GridParams,
    cfg: &MaskConfig,
) -> Result<FieldGrid> {
    if envs.len() < 2 {
        return Err(Error::TooFewEnvironments {
            required: 2,
            actual: envs.len(),
        });
    }
    grid.validate()?;
    cfg.validate()?;
    let (nx, ny) = grid.resolution;
    let cells = (0..nx * ny)
        .into_par_iter()
        .map(|idx| {
            let [x, y] = grid.point(idx % nx, idx / nx);
            let env_grads: Vec<[f64; 2]> = envs.iter().map(|e| eval_grad(e, [x, y]).1).collect();
            let flat: Vec<f64> = env_grads.iter().flatten().copied().collect();
            let set = EnvGradientSet::from_rows(
                Array2::from_shape_vec((envs.len(), 2), flat).expect("two coordinates per row"),
            )?;
            let mean = match cfg.averaging {
                crate::masking::Averaging::Arithmetic => arithmetic_mean_grad(&set),
                crate::masking::Averaging::Geometric => geometric_mean_grad(&set),
            };
            let out = masked_update_gradient(&set, cfg)?;
            Ok(FieldCell {
                x,
                y,
                env_grads,
                mean_grad: [mean[0], mean[1]],
                agreement: [out.agreement[0], out.agreement[1]],
                dispersion: [out.dispersion[0], out.dispersion[1]],
                mask: [out.mask.weights[0], out.mask.weights[1]],
                update: [out.update[0], out.update[1]],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FieldGrid {
        grid: *grid,
        config: *cfg,
        cells,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeadZoneMap {
    pub dead: Vec<bool>,
    pub resolution: (usize, usize),
    pub dead_fraction: f64,
}

fn is_dead(cell: &FieldCell) -> bool {
    cell.update == [0.0, 0.0] && cell.mean_grad != [0.0, 0.0]
}

/// A cell is dead when masking zeroes its whole update although the unmasked average is nonzero.
pub fn dead_zone_map(field: &FieldGrid) -> DeadZoneMap {
    let dead: Vec<bool> = field.cells.iter().map(is_dead).collect();
    let count = dead.iter().filter(|&&d| d).count();
    DeadZoneMap {
        dead_fraction: count as f64 / dead.len() as f64,
        dead,
        resolution: field.grid.resolution,
    }
}

/// Writes `x,y,gxA,gyA,gxB,gyB,mask_x,mask_y,ux,uy,dead` for the first two environments.
pub fn write_field_csv<W: Write>(field: &FieldGrid, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "x", "y", "gxA", "gyA", "gxB", "gyB", "mask_x", "mask_y", "ux", "uy", "dead",
    ])?;
    for cell in &field.cells {
        let [ga, gb] = [cell.env_grads[0], cell.env_grads[1]];
        let dead = u8::from(is_dead(cell));
        w.write_record([
            cell.x.to_string(),
            cell.y.to_string(),
            ga[0].to_string(),
            ga[1].to_string(),
            gb[0].to_string(),
            gb[1].to_string(),
            cell.mask[0].to_string(),
            cell.mask[1].to_string(),
            cell.update[0].to_string(),
            cell.update[1].to_string(),
            dead.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrthantEstimate {
    pub analytic: f64,
    pub monte_carlo: f64,
    pub trials: usize,
}

impl OrthantEstimate {
    /// Binomial standard deviation of the Monte-Carlo fraction around the analytic value.
    pub fn binomial_std(&self) -> f64 {
        (self.analytic * (1.0 - self.analytic) / self.trials as f64).sqrt()
    }
}

/// Probability that `n_env` sign-symmetric gradients fail unanimous agreement:
/// `(2^n - 2) / 2^n` analytically, plus a Monte-Carlo estimate.
pub fn orthant_dead_fraction<R: Rng + ?Sized>(
    n_env: u32,
    trials: usize,
    rng: &mut R,
) -> Result<OrthantEstimate> {
    if n_env == 0 || trials == 0 {
        return Err(Error::InvalidConfig("n_env and trials must be >= 1".into()));
    }
    if n_env > 62 {
        return Err(Error::OrthantOverflow(n_env));
    }
    let orthants = (1u64 << n_env) as f64;
    let analytic = (orthants - 2.0) / orthants;
    let mut dead = 0usize;
    for _ in 0..trials {
        let mut positive = 0;
        for _ in 0..n_env {
            let g: f64 = StandardNormal.sample(rng);
            if g > 0.0 {
                positive += 1;
            }
        }
        if positive != 0 && positive != n_env {
            dead += 1;
        }
    }
    Ok(OrthantEstimate {
        analytic,
        monte_carlo: dead as f64 / trials as f64,
        trials,
    })
}

/// Diagonal quadratic environment `L_e(θ) = ½ Σ λ_i (θ_i - θ*_i)^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticEnvSpec {
    pub eigenvalues: Vec<f64>,
    pub optimum: Vec<f64>,
}

impl QuadraticEnvSpec {
    pub fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        self.eigenvalues
            .iter()
            .zip(theta.iter().zip(&self.optimum))
            .map(|(l, (t, o))| l * (t - o))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HessianMeans {
    pub geometric: Vec<f64>,
    pub arithmetic: Vec<f64>,
}

fn check_quadratics(envs: &[QuadraticEnvSpec]) -> Result<usize> {
    let first = envs.first().ok_or(Error::TooFewEnvironments {
        required: 1,
        actual: 0,
    })?;
    let dim = first.eigenvalues.len();
    for (e, env) in envs.iter().enumerate() {
        if env.eigenvalues.len() != dim || env.optimum.len() != dim {
            return Err(Error::LengthMismatch {
                what: "quadratic environment",
                expected: dim,
                actual: env.eigenvalues.len(),
            });
        }
        for (coord, &value) in env.eigenvalues.iter().enumerate() {
            if !(value > 0.0) {
                return Err(Error::NonPositiveEigenvalue {
                    env: e,
                    coord,
                    value,
                });
            }
        }
    }
    Ok(dim)
}

/// Coordinate-wise geometric and arithmetic means of diagonal Hessian eigenvalues.
pub fn hessian_means(envs: &[QuadraticEnvSpec]) -> Result<HessianMeans> {
    let dim = check_quadratics(envs)?;
    let d = envs.len() as f64;
    let mut geometric = Vec::with_capacity(dim);
    let mut arithmetic = Vec::with_capacity(dim);
    for i in 0..dim {
        let logs: f64 = envs.iter().map(|e| e.eigenvalues[i].ln()).sum();
        geometric.push((logs / d).exp());
        arithmetic.push(envs.iter().map(|e| e.eigenvalues[i]).sum::<f64>() / d);
    }
    Ok(HessianMeans {
        geometric,
        arithmetic,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentityReport {
    /// `H^geo (θ - θ*)`.
    pub hessian_side: Vec<f64>,
    /// Coordinate-wise signed geometric mean of per-environment gradients.
    pub gradient_side: Vec<f64>,
    pub max_relative_error: f64,
}

/// Checks that the geometric-mean Hessian applied to `θ - θ*` equals the
/// geometric mean of the per-environment gradients.
pub fn quadratic_grad_identity_check(
    envs: &[QuadraticEnvSpec],
    theta: &[f64],
) -> Result<IdentityReport> {
    let dim = check_quadratics(envs)?;
    if theta.len() != dim {
        return Err(Error::LengthMismatch {
            what: "theta",
            expected: dim,
            actual: theta.len(),
        });
    }
    let optimum = &envs[0].optimum;
    if envs.iter().any(|e| &e.optimum != optimum) {
        return Err(Error::Precondition(
            "environments must share the optimum".into(),
        ));
    }
    if theta.iter().zip(optimum).any(|(t, o)| t == o) {
        return Err(Error::Precondition(
            "theta must differ from the optimum in every coordinate".into(),
        ));
    }
    let means = hessian_means(envs)?;
    let hessian_side: Vec<f64> = means
        .geometric
        .iter()
        .zip(theta.iter().zip(optimum))
        .map(|(h, (t, o))| h * (t - o))
        .collect();
    let rows: Vec<f64> = envs.iter().flat_map(|e| e.gradient(theta)).collect();
    let set = EnvGradientSet::from_rows(
        Array2::from_shape_vec((envs.len(), dim), rows).expect("rows have equal length"),
    )?;
    let gradient_side = geometric_mean_grad(&set);
    let max_relative_error = hessian_side
        .iter()
        .zip(&gradient_side)
        .map(|(a, b)| (a - b).abs() / a.abs())
        .fold(0.0, f64::max);
    Ok(IdentityReport {
        hessian_side,
        gradient_side,
        max_relative_error,
    })
}
