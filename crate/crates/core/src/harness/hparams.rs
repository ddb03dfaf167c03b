//! Hyperparameters, their per-dataset defaults and random-search distributions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, MlpSpec};
use crate::error::{Error, Result};
use crate::masking::{Averaging, MaskConfig, MaskMethod};
use crate::optim::{OptimConfig, OptimizerKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HParams {
    pub learning_rate: f64,
    /// Minibatch size per environment.
    pub batch_size: usize,
    pub weight_decay: f64,
    pub mlp_depth: usize,
    pub mlp_width: usize,
    pub dropout: f64,
    pub tau: f64,
    pub momentum: f64,
    pub optimizer: OptimizerKind,
    pub init_scale: f64,
    pub activation: Activation,
    pub averaging: Averaging,
}

impl Default for HParams {
    fn default() -> Self {
        Self::spirals()
    }
}

impl HParams {
    pub fn spirals() -> Self {
        Self {
            learning_rate: 0.01,
            batch_size: 512,
            weight_decay: 0.001,
            mlp_depth: 3,
            mlp_width: 256,
            dropout: 0.0,
            tau: 1.0,
            momentum: 0.9,
            optimizer: OptimizerKind::SgdMomentum,
            init_scale: 1.0,
            activation: Activation::Relu,
            averaging: Averaging::Arithmetic,
        }
    }

    pub fn cmnist() -> Self {
        Self {
            learning_rate: 0.001,
            batch_size: 64,
            weight_decay: 0.0,
            mlp_depth: 2,
            mlp_width: 64,
            optimizer: OptimizerKind::Adam,
            ..Self::spirals()
        }
    }

    pub fn defaults_for(dataset: &str) -> Result<Self> {
        match dataset {
            "spirals" => Ok(Self::spirals()),
            "cmnist" => Ok(Self::cmnist()),
            other => Err(Error::UnknownDataset(other.to_string())),
        }
    }

    /// Defaults of `dataset` with the keys of a JSON object applied on top.
    pub fn with_overrides(dataset: &str, overrides: &serde_json::Value) -> Result<Self> {
        let mut base = serde_json::to_value(Self::defaults_for(dataset)?)?;
        if let (Some(base), Some(extra)) = (base.as_object_mut(), overrides.as_object()) {
            for (k, v) in extra {
                base.insert(k.clone(), v.clone());
            }
        } else if !overrides.is_null() {
            return Err(Error::InvalidConfig(
                "hparam overrides must be a JSON object".into(),
            ));
        }
        let hp: Self = serde_json::from_value(base)?;
        hp.validate()?;
        Ok(hp)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.init_scale >= 0.0) {
            return Err(Error::InvalidConfig("init_scale must be >= 0".into()));
        }
        self.mlp_spec(1, 2).validate()?;
        self.optim_config().validate()?;
        self.mask_config(MaskMethod::AndMask).validate()
    }

    pub fn mlp_spec(&self, input_dim: usize, output_dim: usize) -> MlpSpec {
        MlpSpec {
            input_dim,
            depth: self.mlp_depth,
            width: self.mlp_width,
            output_dim,
            activation: self.activation,
            dropout_rate: self.dropout,
        }
    }

    pub fn optim_config(&self) -> OptimConfig {
        OptimConfig {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            optimizer: self.optimizer,
            ..OptimConfig::default()
        }
    }

    pub fn mask_config(&self, method: MaskMethod) -> MaskConfig {
        MaskConfig {
            method,
            tau: self.tau,
            averaging: self.averaging,
            ..MaskConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum SamplingRule {
    /// `10^U(lo, hi)`.
    Log10Uniform {
        lo: f64,
        hi: f64,
    },
    /// `round(2^U(lo, hi))`.
    Log2Uniform {
        lo: f64,
        hi: f64,
    },
    Uniform {
        lo: f64,
        hi: f64,
    },
    Choice {
        values: Vec<f64>,
    },
    Fixed {
        value: f64,
    },
}

impl SamplingRule {
    fn check(&self) -> Result<()> {
        let ordered = match self {
            SamplingRule::Log10Uniform { lo, hi }
            | SamplingRule::Log2Uniform { lo, hi }
            | SamplingRule::Uniform { lo, hi } => lo <= hi,
            SamplingRule::Choice { values } => !values.is_empty(),
            SamplingRule::Fixed { .. } => true,
        };
        if ordered {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "ill-formed sampling rule {self:?}"
            )))
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u = |rng: &mut R, lo: f64, hi: f64| {
            if lo == hi {
                lo
            } else {
                rng.random_range(lo..hi)
            }
        };
        match self {
            SamplingRule::Log10Uniform { lo, hi } => 10f64.powf(u(rng, *lo, *hi)),
            SamplingRule::Log2Uniform { lo, hi } => 2f64.powf(u(rng, *lo, *hi)).round(),
            SamplingRule::Uniform { lo, hi } => u(rng, *lo, *hi),
            SamplingRule::Choice { values } => values[rng.random_range(0..values.len())],
            SamplingRule::Fixed { value } => *value,
        }
    }
}

/// Random-search distributions for one dataset. Parameters are sampled in list order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HparamSpace {
    pub dataset: String,
    pub rules: Vec<(String, SamplingRule)>,
}

fn rule(name: &str, r: SamplingRule) -> (String, SamplingRule) {
    (name.to_string(), r)
}

impl HparamSpace {
    pub fn for_dataset(dataset: &str) -> Result<Self> {
        use SamplingRule::*;
        let rules = match dataset {
            "spirals" => vec![
                rule("learning_rate", Log10Uniform { lo: -3.5, hi: -1.5 }),
                rule("batch_size", Log2Uniform { lo: 3.0, hi: 9.0 }),
                rule("weight_decay", Log10Uniform { lo: -6.0, hi: -2.0 }),
                rule(
                    "mlp_depth",
                    Choice {
                        values: vec![3.0, 4.0, 5.0],
                    },
                ),
                rule("mlp_width", Log2Uniform { lo: 6.0, hi: 10.0 }),
                rule("tau", Uniform { lo: 0.0, hi: 1.0 }),
                rule(
                    "dropout",
                    Choice {
                        values: vec![0.0, 0.1, 0.5],
                    },
                ),
            ],
            "cmnist" => vec![
                rule("learning_rate", Log10Uniform { lo: -4.5, hi: -3.5 }),
                rule("batch_size", Log2Uniform { lo: 3.0, hi: 9.0 }),
                rule("weight_decay", Fixed { value: 0.0 }),
                rule("tau", Uniform { lo: 0.0, hi: 1.0 }),
                rule(
                    "dropout",
                    Choice {
                        values: vec![0.0, 0.1, 0.5],
                    },
                ),
            ],
            other => return Err(Error::UnknownDataset(other.to_string())),
        };
        Ok(Self {
            dataset: dataset.to_string(),
            rules,
        })
    }

    /// Reduced-cost variant of the spirals space for single-machine runs:
    /// same learning-rate, weight-decay, depth, tau and dropout distributions,
    /// with batch `round(2^U(3, 7))` and width `round(2^U(4, 7))`.
    pub fn spirals_desk() -> Self {
        let mut space = Self::for_dataset("spirals").expect("spirals space exists");
        for (name, r) in &mut space.rules {
            match name.as_str() {
                "batch_size" => *r = SamplingRule::Log2Uniform { lo: 3.0, hi: 7.0 },
                "mlp_width" => *r = SamplingRule::Log2Uniform { lo: 4.0, hi: 7.0 },
                _ => {}
            }
        }
        space
    }

    /// Applies a sampled value to the named field of `hp`.
    fn assign(hp: &mut HParams, name: &str, v: f64) -> Result<()> {
        match name {
            "learning_rate" => hp.learning_rate = v,
            "batch_size" => hp.batch_size = v as usize,
            "weight_decay" => hp.weight_decay = v,
            "mlp_depth" => hp.mlp_depth = v as usize,
            "mlp_width" => hp.mlp_width = v as usize,
            "tau" => hp.tau = v,
            "dropout" => hp.dropout = v,
            "momentum" => hp.momentum = v,
            "init_scale" => hp.init_scale = v,
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown hyperparameter '{other}'"
                )))
            }
        }
        Ok(())
    }
}

pub fn sample_hparams<R: Rng + ?Sized>(space: &HparamSpace, rng: &mut R) -> Result<HParams> {
    let mut hp = HParams::defaults_for(&space.dataset)?;
    for (name, r) in &space.rules {
        r.check()?;
        let v = r.sample(rng);
        HparamSpace::assign(&mut hp, name, v)?;
    }
    hp.validate()?;
    Ok(hp)
}

/// Configuration `config_id` of a random search seeded by `search_seed`.
pub fn sample_config(space: &HparamSpace, search_seed: u64, config_id: usize) -> Result<HParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(search_seed);
    rng.set_stream(config_id as u64);
    sample_hparams(space, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spirals_defaults() {
        let hp = HParams::defaults_for("spirals").unwrap();
        assert_eq!(hp.learning_rate, 0.01);
        assert_eq!(hp.batch_size, 512);
        assert_eq!(hp.weight_decay, 0.001);
        assert_eq!(hp.mlp_depth, 3);
        assert_eq!(hp.mlp_width, 256);
        assert_eq!(hp.tau, 1.0);
        assert_eq!(hp.dropout, 0.0);
        assert!(HParams::defaults_for("vlcs").is_err());
        assert!(HparamSpace::for_dataset("vlcs").is_err());
    }

    #[test]
    fn learning_rate_distribution() {
        let space = HparamSpace::for_dataset("spirals").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut log_sum = 0.0;
        for _ in 0..1000 {
            let hp = sample_hparams(&space, &mut rng).unwrap();
            assert!(hp.learning_rate >= 10f64.powf(-3.5) && hp.learning_rate <= 10f64.powf(-1.5));
            assert!((8..=512).contains(&hp.batch_size));
            assert!((64..=1024).contains(&hp.mlp_width));
            assert!([3, 4, 5].contains(&hp.mlp_depth));
            assert!([0.0, 0.1, 0.5].contains(&hp.dropout));
            assert!((0.0..=1.0).contains(&hp.tau));
            log_sum += hp.learning_rate.log10();
        }
        assert!((log_sum / 1000.0 + 2.5).abs() < 0.1);
    }

    #[test]
    fn sampled_configs_are_reproducible() {
        let space = HparamSpace::for_dataset("cmnist").unwrap();
        let a = sample_config(&space, 3, 5).unwrap();
        let b = sample_config(&space, 3, 5).unwrap();
        let c = sample_config(&space, 3, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.weight_decay, 0.0);
        assert_eq!(a.optimizer, OptimizerKind::Adam);
    }

    #[test]
    fn desk_space_bounds() {
        let space = HparamSpace::spirals_desk();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let hp = sample_hparams(&space, &mut rng).unwrap();
            assert!((8..=128).contains(&hp.batch_size));
            assert!((16..=128).contains(&hp.mlp_width));
        }
    }

    #[test]
    fn overrides() {
        let hp = HParams::with_overrides(
            "spirals",
            &serde_json::json!({"momentum": 0.0, "mlp_width": 32}),
        )
        .unwrap();
        assert_eq!(hp.momentum, 0.0);
        assert_eq!(hp.mlp_width, 32);
        assert_eq!(hp.batch_size, 512);
        assert!(HParams::with_overrides("spirals", &serde_json::json!({"tau": 2.0})).is_err());
    }
}
