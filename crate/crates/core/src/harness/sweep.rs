//! One-knob sweeps of a fixed configuration over many seeds.

use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::hparams::HParams;
use super::trial::{run_trials, TrialRecord, TrialSpec, DEFAULT_HOLDOUT_FRACTION};
use crate::datasets::{DatasetSpec, SpiralsConfig};
use crate::error::{Error, Result};
use crate::masking::MaskMethod;
use crate::stats::{self, Correlation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    /// Optimizer momentum.
    Momentum,
    /// Std of the Gaussian noise on the invariant spiral dimensions.
    Noise,
    /// Multiplier of the initialisation scale.
    Init,
}

impl SweepKind {
    pub fn name(self) -> &'static str {
        match self {
            SweepKind::Momentum => "momentum",
            SweepKind::Noise => "noise",
            SweepKind::Init => "init",
        }
    }
}

impl FromStr for SweepKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "momentum" => Ok(SweepKind::Momentum),
            "noise" => Ok(SweepKind::Noise),
            "init" | "init_scale" => Ok(SweepKind::Init),
            other => Err(Error::UnknownSweepKind(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub kind: SweepKind,
    pub values: Vec<f64>,
    pub method: MaskMethod,
    pub base: HParams,
    pub dataset: SpiralsConfig,
    /// Trial seeds `0..seeds`.
    pub seeds: usize,
    pub steps: usize,
    /// Seed `s` holds out `test_envs[s % len]`.
    pub test_envs: Vec<usize>,
}

impl SweepSpec {
    pub fn new(kind: SweepKind, values: Vec<f64>) -> Self {
        Self {
            kind,
            values,
            method: MaskMethod::AndMask,
            base: HParams::spirals(),
            dataset: SpiralsConfig::default(),
            seeds: 20,
            steps: 3000,
            test_envs: vec![0],
        }
    }

    fn point(&self, value: f64) -> (HParams, SpiralsConfig) {
        let mut hp = self.base.clone();
        let mut ds = self.dataset.clone();
        match self.kind {
            SweepKind::Momentum => hp.momentum = value,
            SweepKind::Noise => ds.invariant_noise_std = value,
            SweepKind::Init => hp.init_scale = value,
        }
        (hp, ds)
    }

    /// Trials of one sweep value, in seed order.
    pub fn trials_for(&self, value_index: usize) -> Result<Vec<TrialSpec>> {
        if self.test_envs.is_empty() || self.seeds == 0 {
            return Err(Error::InvalidConfig(
                "sweep needs at least one seed and test env".into(),
            ));
        }
        let (hparams, ds) = self.point(self.values[value_index]);
        hparams.validate()?;
        ds.validate()?;
        Ok((0..self.seeds)
            .map(|s| TrialSpec {
                dataset: DatasetSpec::Spirals(ds.clone()),
                method: self.method,
                hparams: hparams.clone(),
                config_id: value_index,
                test_env: self.test_envs[s % self.test_envs.len()],
                seed: s as u64,
                steps: self.steps,
                holdout_fraction: DEFAULT_HOLDOUT_FRACTION,
            })
            .collect())
    }
}

/// Five-number summary plus mean, for box plots.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub mean: f64,
}

impl BoxStats {
    pub fn from_values(xs: &[f64]) -> Self {
        let mut s = xs.to_vec();
        s.sort_by(f64::total_cmp);
        Self {
            min: stats::quantile_sorted(&s, 0.0),
            q1: stats::quantile_sorted(&s, 0.25),
            median: stats::quantile_sorted(&s, 0.5),
            q3: stats::quantile_sorted(&s, 0.75),
            max: stats::quantile_sorted(&s, 1.0),
            mean: stats::mean(&s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    /// Held-out accuracy per seed.
    pub accuracies: Vec<f64>,
    pub stats: BoxStats,
    pub variance: f64,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub kind: SweepKind,
    pub method: MaskMethod,
    pub points: Vec<SweepPoint>,
    /// Spearman correlation of held-out accuracy with the swept value over all trials.
    pub trend: Correlation,
    pub records: Vec<TrialRecord>,
}

pub fn run_sweep(spec: &SweepSpec) -> Result<SweepTable> {
    if spec.values.is_empty() {
        return Err(Error::InvalidConfig(
            "sweep needs at least one value".into(),
        ));
    }
    let mut points = Vec::with_capacity(spec.values.len());
    let mut records = Vec::new();
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for (i, &value) in spec.values.iter().enumerate() {
        let trials = spec.trials_for(i)?;
        let dataset = trials[0].dataset.generate()?;
        let done = run_trials(&trials, &dataset)?;
        let accuracies: Vec<f64> = done.iter().map(|r| r.test_acc).collect();
        xs.extend(std::iter::repeat_n(value, accuracies.len()));
        ys.extend_from_slice(&accuracies);
        points.push(SweepPoint {
            value,
            stats: BoxStats::from_values(&accuracies),
            variance: stats::sample_variance(&accuracies),
            failed: done.iter().filter(|r| r.failed()).count(),
            accuracies,
        });
        records.extend(done);
    }
    Ok(SweepTable {
        kind: spec.kind,
        method: spec.method,
        points,
        trend: stats::spearman(&xs, &ys),
        records,
    })
}

/// Long format, one row per trial: `kind,method,value,seed,test_env,test_acc,status`.
pub fn write_sweep_csv<W: Write>(table: &SweepTable, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "kind", "method", "value", "seed", "test_env", "test_acc", "status",
    ])?;
    let method = serde_json::to_value(table.method)?;
    let method = method.as_str().unwrap_or_default();
    for (point, chunk) in table.points.iter().zip(
        table
            .records
            .chunks(table.records.len() / table.points.len().max(1)),
    ) {
        for r in chunk {
            w.write_record([
                table.kind.name(),
                method,
                &point.value.to_string(),
                &r.spec.seed.to_string(),
                &r.spec.test_env.to_string(),
                &r.test_acc.to_string(),
                if r.failed() { "diverged" } else { "completed" },
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
