//! Random search, trial execution, model selection and sweeps.

pub mod hparams;
pub mod selection;
pub mod sweep;
pub mod trial;

use serde::{Deserialize, Serialize};

use crate::datasets::DatasetSpec;
use crate::error::Result;
use crate::masking::MaskMethod;

pub use hparams::{sample_config, sample_hparams, HParams, HparamSpace, SamplingRule};
pub use selection::{
    build_table, read_records_jsonl, select_model, select_model_audited, write_records_jsonl,
    write_table_csv, AccessLog, CellStat, ResultTable, SelectionScheme,
};
pub use sweep::{run_sweep, write_sweep_csv, BoxStats, SweepKind, SweepSpec, SweepTable};
pub use trial::{
    replay_trial, run_trial, run_trial_observed, run_trials, StepLog, TestAccessLog, Trainer,
    TrialObserver, TrialRecord, TrialSpec, TrialStatus, DEFAULT_HOLDOUT_FRACTION,
};

/// A random search: `configs` sampled hyperparameter sets × `seeds` trial seeds ×
/// `test_envs` × `methods`. Every method sees the same sampled configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchPlan {
    pub dataset: DatasetSpec,
    pub space: HparamSpace,
    pub methods: Vec<MaskMethod>,
    pub configs: usize,
    pub seeds: usize,
    pub test_envs: Vec<usize>,
    pub steps: usize,
    pub search_seed: u64,
}

impl SearchPlan {
    pub fn trials(&self) -> Result<Vec<TrialSpec>> {
        let mut out = Vec::new();
        for config_id in 0..self.configs {
            let hp = sample_config(&self.space, self.search_seed, config_id)?;
            for &method in &self.methods {
                for &test_env in &self.test_envs {
                    for seed in 0..self.seeds as u64 {
                        out.push(TrialSpec {
                            dataset: self.dataset.clone(),
                            method,
                            hparams: hp.clone(),
                            config_id,
                            test_env,
                            seed,
                            steps: self.steps,
                            holdout_fraction: DEFAULT_HOLDOUT_FRACTION,
                        });
                    }
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_enumerates_grid() {
        let plan = SearchPlan {
            dataset: DatasetSpec::by_name("spirals").unwrap(),
            space: HparamSpace::for_dataset("spirals").unwrap(),
            methods: vec![MaskMethod::None, MaskMethod::AndMask],
            configs: 4,
            seeds: 3,
            test_envs: vec![0, 5],
            steps: 10,
            search_seed: 1,
        };
        let t = plan.trials().unwrap();
        assert_eq!(t.len(), 4 * 3 * 2 * 2);
        assert_eq!(t[0].hparams, t[6].hparams);
        assert_eq!(t[0].method, MaskMethod::None);
        assert_eq!(t[6].method, MaskMethod::AndMask);
    }
}
