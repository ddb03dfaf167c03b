//! Optimizers consuming already-masked update gradients.
//!
//! The mask is applied before the gradient enters the optimizer, so the
//! momentum buffer itself is never masked: a coordinate whose update is
//! zeroed keeps moving by `-lr * momentum * M` until its velocity decays.

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamVector;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    SgdMomentum,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub optimizer: OptimizerKind,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
            optimizer: OptimizerKind::SgdMomentum,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!(
                "momentum {} outside [0, 1)",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig(
                "weight decay must be nonnegative".into(),
            ));
        }
        if self.optimizer == OptimizerKind::Adam
            && !((0.0..1.0).contains(&self.adam_beta1)
                && (0.0..1.0).contains(&self.adam_beta2)
                && self.adam_eps > 0.0)
        {
            return Err(Error::InvalidConfig("invalid adam betas/eps".into()));
        }
        Ok(())
    }
}

/// Velocity (and Adam second moment) per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumState {
    pub velocity: Vec<f64>,
    pub second_moment: Option<Vec<f64>>,
    pub step: u64,
}

impl MomentumState {
    pub fn new(n: usize, kind: OptimizerKind) -> Self {
        Self {
            velocity: vec![0.0; n],
            second_moment: (kind == OptimizerKind::Adam).then(|| vec![0.0; n]),
            step: 0,
        }
    }
}

fn check_inputs(params: &ParamVector, update: &[f64], state: &MomentumState) -> Result<()> {
    if update.len() != params.len() {
        return Err(Error::LengthMismatch {
            what: "update",
            expected: params.len(),
            actual: update.len(),
        });
    }
    if state.velocity.len() != params.len() {
        return Err(Error::LengthMismatch {
            what: "momentum state",
            expected: params.len(),
            actual: state.velocity.len(),
        });
    }
    if let Some(param) = update.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteUpdate { param });
    }
    Ok(())
}

/// `M' = momentum * M + update + weight_decay * theta`, then `theta' = theta - lr * M'`.
pub fn sgd_momentum_step(
    params: &mut ParamVector,
    update: &[f64],
    state: &mut MomentumState,
    cfg: &OptimConfig,
) -> Result<()> {
    check_inputs(params, update, state)?;
    let (lr, beta, wd) = (cfg.learning_rate, cfg.momentum, cfg.weight_decay);
    for ((theta, m), &g) in params
        .values_mut()
        .iter_mut()
        .zip(state.velocity.iter_mut())
        .zip(update)
    {
        *m = beta * *m + g + wd * *theta;
        *theta -= lr * *m;
    }
    state.step += 1;
    Ok(())
}

/// Bias-corrected Adam on the (already masked) update, with coupled weight decay.
pub fn adam_step(
    params: &mut ParamVector,
    update: &[f64],
    state: &mut MomentumState,
    cfg: &OptimConfig,
) -> Result<()> {
    check_inputs(params, update, state)?;
    let n = params.len();
    let second = state.second_moment.get_or_insert_with(|| vec![0.0; n]);
    if second.len() != n {
        return Err(Error::LengthMismatch {
            what: "adam second moment",
            expected: n,
            actual: second.len(),
        });
    }
    state.step += 1;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let k = state.step as i32;
    let c1 = 1.0 - b1.powi(k);
    let c2 = 1.0 - b2.powi(k);
    for (((theta, m), v), &u) in params
        .values_mut()
        .iter_mut()
        .zip(state.velocity.iter_mut())
        .zip(second.iter_mut())
        .zip(update)
    {
        let g = u + cfg.weight_decay * *theta;
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *theta -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_eps);
    }
    Ok(())
}

/// Dispatches on `cfg.optimizer`.
pub fn optimizer_step(
    params: &mut ParamVector,
    update: &[f64],
    state: &mut MomentumState,
    cfg: &OptimConfig,
) -> Result<()> {
    match cfg.optimizer {
        OptimizerKind::SgdMomentum => sgd_momentum_step(params, update, state, cfg),
        OptimizerKind::Adam => adam_step(params, update, state, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{MlpSpec, ParamLayout};
    use std::sync::Arc;

    /// A layout with exactly `n` parameters is not always expressible by an MLP,
    /// so tests use 1-in/1-hidden/1-out networks (4 parameters).
    fn params(values: [f64; 4]) -> ParamVector {
        let layout: Arc<ParamLayout> = Arc::new(MlpSpec::new(1, 1, 1, 1).layout());
        ParamVector::from_values(layout, values.to_vec()).unwrap()
    }

    fn sgd(lr: f64, momentum: f64) -> OptimConfig {
        OptimConfig {
            learning_rate: lr,
            momentum,
            ..OptimConfig::default()
        }
    }

    #[test]
    fn one_momentum_step() {
        let mut p = params([1.0, 0.0, 0.0, 0.0]);
        let mut s = MomentumState::new(4, OptimizerKind::SgdMomentum);
        sgd_momentum_step(&mut p, &[0.5, 0.0, 0.0, 0.0], &mut s, &sgd(0.1, 0.9)).unwrap();
        assert!((s.velocity[0] - 0.5).abs() < 1e-15);
        assert!((p.values()[0] - 0.95).abs() < 1e-15);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn momentum_carries_through_masked_coordinate() {
        let mut p = params([0.0; 4]);
        let mut s = MomentumState::new(4, OptimizerKind::SgdMomentum);
        s.velocity[0] = 2.0;
        sgd_momentum_step(&mut p, &[0.0; 4], &mut s, &sgd(0.1, 0.9)).unwrap();
        assert!((s.velocity[0] - 1.8).abs() < 1e-15);
        assert!((p.values()[0] + 0.18).abs() < 1e-15);
    }

    #[test]
    fn zero_momentum_is_plain_sgd() {
        let mut p = params([1.0, -2.0, 0.5, 3.0]);
        let u = [0.3, -0.1, 2.0, 0.0];
        let mut s = MomentumState::new(4, OptimizerKind::SgdMomentum);
        for _ in 0..3 {
            let before = p.values().to_vec();
            sgd_momentum_step(&mut p, &u, &mut s, &sgd(0.05, 0.0)).unwrap();
            for i in 0..4 {
                assert!((p.values()[i] - (before[i] - 0.05 * u[i])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn coupled_weight_decay() {
        let mut p = params([2.0, 0.0, 0.0, 0.0]);
        let mut s = MomentumState::new(4, OptimizerKind::SgdMomentum);
        let cfg = OptimConfig {
            weight_decay: 0.1,
            ..sgd(0.5, 0.0)
        };
        sgd_momentum_step(&mut p, &[0.0; 4], &mut s, &cfg).unwrap();
        assert!((p.values()[0] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut p = params([0.0; 4]);
        let mut s = MomentumState::new(4, OptimizerKind::SgdMomentum);
        let cfg = sgd(0.1, 0.9);
        assert!(matches!(
            sgd_momentum_step(&mut p, &[0.0, f64::NAN, 0.0, 0.0], &mut s, &cfg),
            Err(Error::NonFiniteUpdate { param: 1 })
        ));
        assert!(sgd_momentum_step(&mut p, &[0.0; 3], &mut s, &cfg).is_err());
        let mut short = MomentumState::new(3, OptimizerKind::SgdMomentum);
        assert!(sgd_momentum_step(&mut p, &[0.0; 4], &mut short, &cfg).is_err());
        assert!(sgd(0.0, 0.5).validate().is_err());
        assert!(sgd(0.1, 1.0).validate().is_err());
    }

    fn adam(lr: f64) -> OptimConfig {
        OptimConfig {
            learning_rate: lr,
            optimizer: OptimizerKind::Adam,
            ..OptimConfig::default()
        }
    }

    #[test]
    fn adam_zero_updates_do_not_move() {
        let mut p = params([0.3, 0.0, -1.0, 2.0]);
        let mut s = MomentumState::new(4, OptimizerKind::Adam);
        for _ in 0..10 {
            adam_step(&mut p, &[0.0; 4], &mut s, &adam(0.1)).unwrap();
        }
        assert_eq!(p.values(), &[0.3, 0.0, -1.0, 2.0]);
        assert!(s.second_moment.as_ref().unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adam_first_step_is_lr_times_sign() {
        let mut p = params([0.0; 4]);
        let mut s = MomentumState::new(4, OptimizerKind::Adam);
        let c = [0.5, -3.0, 1e-3, 0.0];
        adam_step(&mut p, &c, &mut s, &adam(0.01)).unwrap();
        for i in 0..4 {
            let expected = -0.01 * c[i] / (c[i].abs() + 1e-8);
            assert!((p.values()[i] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_constant_update_moves_by_lr() {
        let mut p = params([0.0; 4]);
        let mut s = MomentumState::new(4, OptimizerKind::Adam);
        let c = [0.2, -0.2, 5.0, -5.0];
        let mut last = p.values().to_vec();
        for _ in 0..500 {
            adam_step(&mut p, &c, &mut s, &adam(0.01)).unwrap();
            let now = p.values().to_vec();
            for i in 0..4 {
                let step = now[i] - last[i];
                assert!((step + 0.01 * c[i].signum()).abs() < 1e-6);
            }
            last = now;
        }
    }
}
