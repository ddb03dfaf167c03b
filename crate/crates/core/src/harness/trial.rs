//! One training run: a hyperparameter config, a trial seed and a held-out environment.

use std::time::Instant;

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::hparams::HParams;
use crate::autodiff::{
    accuracy, mlp_backward_into, mlp_forward, predict, softmax_cross_entropy, MlpSpec, Mode,
    ParamVector, Reduction,
};
use crate::datasets::{env_split, leave_one_env_out, DatasetSpec, EnvDataset, Environment};
use crate::error::{Error, Result};
use crate::masking::{
    masked_update_gradient, EnvGradientSet, MaskConfig, MaskMethod, MaskedUpdate,
};
use crate::optim::{optimizer_step, MomentumState, OptimConfig};

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_HOLDOUT_FRACTION: f64 = 0.2;

/// Everything needed to reproduce a trial, dataset included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSpec {
    pub dataset: DatasetSpec,
    pub method: MaskMethod,
    pub hparams: HParams,
    pub config_id: usize,
    pub test_env: usize,
    pub seed: u64,
    pub steps: usize,
    pub holdout_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    /// Mean over training environments of the minibatch loss.
    pub train_loss: f64,
    pub mask_density: f64,
    pub mean_agreement: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum TrialStatus {
    Completed,
    /// Non-finite loss, gradient or update at `step`; accuracies are recorded as 0.
    Diverged {
        step: usize,
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub schema_version: u32,
    pub spec: TrialSpec,
    pub test_env_name: String,
    pub status: TrialStatus,
    pub log: Vec<StepLog>,
    /// Mean over training environments of accuracy on their 80% training splits.
    pub train_acc: f64,
    /// Mean over training environments of accuracy on their 20% validation splits.
    pub train_val_acc: f64,
    /// Accuracy on the held-out environment after the final step.
    pub test_acc: f64,
    pub wall_time_s: f64,
}

impl TrialRecord {
    pub fn failed(&self) -> bool {
        !matches!(self.status, TrialStatus::Completed)
    }

    /// Equality of every field except wall time.
    pub fn same_outcome(&self, other: &TrialRecord) -> bool {
        let mut a = self.clone();
        a.wall_time_s = other.wall_time_s;
        a == *other
    }
}

/// Notified whenever the held-out environment is read.
pub trait TrialObserver {
    fn test_env_accessed(&mut self, _completed_steps: usize) {}
}

pub struct NoObserver;

impl TrialObserver for NoObserver {}

/// Collects the step counts at which the held-out environment was read.
#[derive(Debug, Default, Clone)]
pub struct TestAccessLog {
    pub accesses: Vec<usize>,
}

impl TrialObserver for TestAccessLog {
    fn test_env_accessed(&mut self, completed_steps: usize) {
        self.accesses.push(completed_steps);
    }
}

/// The held-out environment, readable only through [`SealedEnv::open`], which reports to the observer.
struct SealedEnv<'o> {
    env: Environment,
    observer: &'o mut dyn TrialObserver,
}

impl SealedEnv<'_> {
    fn open(&mut self, completed_steps: usize) -> &Environment {
        self.observer.test_env_accessed(completed_steps);
        &self.env
    }
}

/// Parameters plus optimizer state; applies one masked update per call.
pub struct Trainer {
    pub params: ParamVector,
    pub state: MomentumState,
    pub mask: MaskConfig,
    pub optim: OptimConfig,
}

impl Trainer {
    pub fn new(params: ParamVector, mask: MaskConfig, optim: OptimConfig) -> Result<Self> {
        mask.validate()?;
        optim.validate()?;
        let state = MomentumState::new(params.len(), optim.optimizer);
        Ok(Self {
            params,
            state,
            mask,
            optim,
        })
    }

    pub fn apply(&mut self, grads: &EnvGradientSet) -> Result<MaskedUpdate> {
        let masked = masked_update_gradient(grads, &self.mask)?;
        optimizer_step(
            &mut self.params,
            &masked.update,
            &mut self.state,
            &self.optim,
        )?;
        Ok(masked)
    }
}

fn is_divergence(e: &Error) -> bool {
    matches!(
        e,
        Error::NonFiniteIntermediate { .. }
            | Error::NonFiniteGradient { .. }
            | Error::NonFiniteUpdate { .. }
    )
}

fn mean_accuracy(spec: &MlpSpec, params: &ParamVector, envs: &[Environment]) -> Result<f64> {
    let mut total = 0.0;
    for env in envs {
        let logits = predict(spec, params, env.features.view())?;
        total += accuracy(logits.view(), &env.labels);
    }
    Ok(total / envs.len().max(1) as f64)
}

pub fn run_trial(spec: &TrialSpec, dataset: &EnvDataset) -> Result<TrialRecord> {
    run_trial_observed(spec, dataset, &mut NoObserver)
}

/// Trains for exactly `spec.steps` steps; the held-out environment is read once, after the last step.
pub fn run_trial_observed(
    spec: &TrialSpec,
    dataset: &EnvDataset,
    observer: &mut dyn TrialObserver,
) -> Result<TrialRecord> {
    let started = Instant::now();
    let hp = &spec.hparams;
    hp.validate()?;
    let (pool, test) = leave_one_env_out(dataset, spec.test_env)?;
    let test_env_name = test.name.clone();
    let mut sealed = SealedEnv {
        env: test,
        observer,
    };
    let (train, val) = env_split(&pool, spec.holdout_fraction, spec.seed)?;
    let mlp = hp.mlp_spec(dataset.feature_dim, dataset.num_classes);
    mlp.validate()?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let params = ParamVector::init(&mlp, hp.init_scale, &mut rng);
    let mut trainer = Trainer::new(params, hp.mask_config(spec.method), hp.optim_config())?;
    let envs = &train.environments;
    let env_ids: Vec<usize> = envs.iter().map(|e| e.id).collect();
    let mut grads = Array2::zeros((envs.len(), trainer.params.len()));
    let mut log = Vec::with_capacity(spec.steps);
    let mut status = TrialStatus::Completed;

    for step in 0..spec.steps {
        match train_step(
            &mlp,
            &mut trainer,
            envs,
            &env_ids,
            hp.batch_size,
            &mut grads,
            &mut rng,
        ) {
            Ok(mut entry) => {
                entry.step = step + 1;
                log.push(entry);
            }
            Err(e) if is_divergence(&e) => {
                status = TrialStatus::Diverged {
                    step: step + 1,
                    reason: e.to_string(),
                };
                break;
            }
            Err(e) => return Err(e),
        }
    }

    let (train_acc, train_val_acc, test_acc) = match status {
        TrialStatus::Completed => {
            let evaluated = (|| -> Result<(f64, f64, f64)> {
                let tr = mean_accuracy(&mlp, &trainer.params, envs)?;
                let va = mean_accuracy(&mlp, &trainer.params, &val.environments)?;
                let te = mean_accuracy(
                    &mlp,
                    &trainer.params,
                    std::slice::from_ref(sealed.open(spec.steps)),
                )?;
                Ok((tr, va, te))
            })();
            match evaluated {
                Ok(accs) => accs,
                Err(e) if is_divergence(&e) => {
                    status = TrialStatus::Diverged {
                        step: spec.steps,
                        reason: e.to_string(),
                    };
                    (0.0, 0.0, 0.0)
                }
                Err(e) => return Err(e),
            }
        }
        TrialStatus::Diverged { .. } => (0.0, 0.0, 0.0),
    };

    Ok(TrialRecord {
        schema_version: SCHEMA_VERSION,
        spec: spec.clone(),
        test_env_name,
        status,
        log,
        train_acc,
        train_val_acc,
        test_acc,
        wall_time_s: started.elapsed().as_secs_f64(),
    })
}

/// Equal-size minibatch from every environment, per-environment gradients, one masked update.
fn train_step(
    mlp: &MlpSpec,
    trainer: &mut Trainer,
    envs: &[Environment],
    env_ids: &[usize],
    batch_size: usize,
    grads: &mut Array2<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<StepLog> {
    let mut loss_sum = 0.0;
    for (e, env) in envs.iter().enumerate() {
        let b = batch_size.min(env.len());
        let idx = rand::seq::index::sample(rng, env.len(), b).into_vec();
        let x = env.features.select(Axis(0), &idx);
        let y: Vec<usize> = idx.iter().map(|&i| env.labels[i]).collect();
        let (logits, tape) = mlp_forward(mlp, &trainer.params, x.view(), Mode::Train(rng))?;
        let (loss, dlogits) = softmax_cross_entropy(logits.view(), &y, Reduction::Mean)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteIntermediate { layer: mlp.depth });
        }
        loss_sum += loss;
        let mut row = grads.row_mut(e);
        let out = row
            .as_slice_mut()
            .expect("rows of a standard-layout array are contiguous");
        mlp_backward_into(tape, dlogits.view(), out)?;
    }
    let set = EnvGradientSet::new(std::mem::take(grads), env_ids.to_vec())?;
    let masked = trainer.apply(&set);
    *grads = set.into_grads();
    let masked = masked?;
    let agreement = masked.agreement.iter().sum::<f64>() / masked.agreement.len().max(1) as f64;
    Ok(StepLog {
        step: 0,
        train_loss: loss_sum / envs.len() as f64,
        mask_density: masked.mask.density(),
        mean_agreement: agreement,
    })
}

/// Regenerates the dataset from the record's embedded spec and reruns the trial.
pub fn replay_trial(record: &TrialRecord) -> Result<TrialRecord> {
    let dataset = record.spec.dataset.generate()?;
    run_trial(&record.spec, &dataset)
}

/// Runs independent trials on the rayon pool; output order matches `specs`.
pub fn run_trials(specs: &[TrialSpec], dataset: &EnvDataset) -> Result<Vec<TrialRecord>> {
    specs.par_iter().map(|s| run_trial(s, dataset)).collect()
}
