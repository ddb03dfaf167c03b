//! Deterministic multi-environment synthetic datasets.
//!
//! * Spirals: two interleaved spiral arms (the invariant dimensions) plus one
//!   shortcut block per environment that encodes the label only inside its own
//!   environment and is standard-normal noise everywhere else.
//! * Synthetic Colored MNIST: a noisy label derived from core features plus a
//!   two-dimensional "color" block whose correlation with the label varies per
//!   environment and flips sign at test time.

use std::fs;
use std::path::Path;

use ndarray::{s, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Environment {
    pub id: usize,
    pub name: String,
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
}

impl Environment {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Environment {
        Environment {
            id: self.id,
            name: self.name.clone(),
            features: self.features.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn class_counts(&self, num_classes: usize) -> Vec<usize> {
        let mut counts = vec![0; num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpiralsConfig {
    pub num_envs: usize,
    pub samples_per_env: usize,
    pub spiral_turns: f64,
    /// Outer radius of the spiral arms.
    pub spiral_radius: f64,
    pub invariant_noise_std: f64,
    pub shortcut_dims_per_env: usize,
    pub shortcut_flip_prob_train: f64,
    /// Std of the Gaussian jitter added to the ±1 shortcut encoding.
    pub shortcut_jitter: f64,
    pub seed: u64,
}

impl Default for SpiralsConfig {
    fn default() -> Self {
        Self {
            num_envs: 16,
            samples_per_env: 512,
            spiral_turns: 0.5,
            spiral_radius: 1.0,
            invariant_noise_std: 0.0,
            shortcut_dims_per_env: 32,
            shortcut_flip_prob_train: 0.0,
            shortcut_jitter: 0.1,
            seed: 0,
        }
    }
}

impl SpiralsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_envs < 2 {
            return Err(Error::InvalidConfig("spirals needs num_envs >= 2".into()));
        }
        if self.samples_per_env < 2 {
            return Err(Error::InvalidConfig("samples_per_env must be >= 2".into()));
        }
        if self.shortcut_dims_per_env == 0 {
            return Err(Error::InvalidConfig(
                "shortcut_dims_per_env must be >= 1".into(),
            ));
        }
        if !(self.invariant_noise_std >= 0.0) || !(self.shortcut_jitter >= 0.0) {
            return Err(Error::InvalidConfig("noise std must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.shortcut_flip_prob_train) {
            return Err(Error::InvalidConfig(
                "shortcut_flip_prob_train outside [0, 1]".into(),
            ));
        }
        if !(self.spiral_turns > 0.0) || !(self.spiral_radius > 0.0) {
            return Err(Error::InvalidConfig(
                "spiral_turns and spiral_radius must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        2 + self.num_envs * self.shortcut_dims_per_env
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticCmnistConfig {
    /// Color/label correlation per environment, in `[-1, 1]`.
    pub env_label_color_corr: Vec<f64>,
    pub label_noise: f64,
    pub core_feature_dim: usize,
    /// Minimum distance of every core vector from the true decision boundary.
    pub core_margin: f64,
    pub samples_per_env: usize,
    pub seed: u64,
}

impl Default for SyntheticCmnistConfig {
    fn default() -> Self {
        Self {
            env_label_color_corr: vec![0.9, 0.8, -0.9],
            label_noise: 0.25,
            core_feature_dim: 8,
            core_margin: 0.5,
            samples_per_env: 2500,
            seed: 0,
        }
    }
}

impl SyntheticCmnistConfig {
    pub fn validate(&self) -> Result<()> {
        if self.env_label_color_corr.is_empty() {
            return Err(Error::InvalidConfig(
                "at least one environment is required".into(),
            ));
        }
        if self.env_label_color_corr.iter().any(|c| !(c.abs() <= 1.0)) {
            return Err(Error::InvalidConfig(
                "color correlation outside [-1, 1]".into(),
            ));
        }
        if !(0.0..0.5).contains(&self.label_noise) {
            return Err(Error::InvalidConfig("label_noise outside [0, 0.5)".into()));
        }
        if self.core_feature_dim == 0 || self.samples_per_env < 2 {
            return Err(Error::InvalidConfig(
                "core_feature_dim must be >= 1 and samples_per_env >= 2".into(),
            ));
        }
        if !(self.core_margin >= 0.0) {
            return Err(Error::InvalidConfig("core_margin must be >= 0".into()));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.core_feature_dim + 2
    }
}

/// Human-readable name of a color-correlation environment, e.g. `+90%`.
pub fn corr_env_name(corr: f64) -> String {
    format!("{:+}%", (corr * 100.0).round() as i64)
}

/// Generator plus its full configuration (seed included); enough to regenerate a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", content = "config", rename_all = "snake_case")]
pub enum DatasetSpec {
    Spirals(SpiralsConfig),
    Cmnist(SyntheticCmnistConfig),
}

impl DatasetSpec {
    pub fn name(&self) -> &'static str {
        match self {
            DatasetSpec::Spirals(_) => "spirals",
            DatasetSpec::Cmnist(_) => "cmnist",
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            DatasetSpec::Spirals(c) => c.seed,
            DatasetSpec::Cmnist(c) => c.seed,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        match &mut self {
            DatasetSpec::Spirals(c) => c.seed = seed,
            DatasetSpec::Cmnist(c) => c.seed = seed,
        }
        self
    }

    /// Default configuration of a named dataset.
    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "spirals" => Ok(DatasetSpec::Spirals(SpiralsConfig::default())),
            "cmnist" => Ok(DatasetSpec::Cmnist(SyntheticCmnistConfig::default())),
            other => Err(Error::UnknownDataset(other.to_string())),
        }
    }

    /// Named dataset with a JSON object of overrides applied over its defaults.
    pub fn from_name_and_json(name: &str, overrides: &serde_json::Value) -> Result<Self> {
        match name {
            "spirals" => Ok(DatasetSpec::Spirals(serde_json::from_value(
                overrides.clone(),
            )?)),
            "cmnist" => Ok(DatasetSpec::Cmnist(serde_json::from_value(
                overrides.clone(),
            )?)),
            other => Err(Error::UnknownDataset(other.to_string())),
        }
    }

    pub fn generate(&self) -> Result<EnvDataset> {
        match self {
            DatasetSpec::Spirals(c) => gen_spirals(c),
            DatasetSpec::Cmnist(c) => gen_synthetic_cmnist(c),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvDataset {
    pub environments: Vec<Environment>,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub provenance: DatasetSpec,
}

impl EnvDataset {
    pub fn env(&self, id: usize) -> Result<&Environment> {
        self.environments
            .iter()
            .find(|e| e.id == id)
            .ok_or(Error::UnknownEnvironment(id))
    }

    pub fn env_ids(&self) -> Vec<usize> {
        self.environments.iter().map(|e| e.id).collect()
    }

    fn with_environments(&self, environments: Vec<Environment>) -> EnvDataset {
        EnvDataset {
            environments,
            feature_dim: self.feature_dim,
            num_classes: self.num_classes,
            provenance: self.provenance.clone(),
        }
    }
}

/// Independent stream per environment so that environments do not depend on each other's sizes.
fn env_rng(seed: u64, env: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(env as u64 + 1);
    rng
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Point on arm `class` (0 or 1) of a two-arm spiral at parameter `t` in `[0, 1]`.
pub fn spiral_point(class: usize, t: f64, turns: f64) -> [f64; 2] {
    let angle = 2.0 * std::f64::consts::PI * turns * t + std::f64::consts::PI * class as f64;
    let radius = 0.1 + 0.9 * t;
    [radius * angle.cos(), radius * angle.sin()]
}

pub fn gen_spirals(cfg: &SpiralsConfig) -> Result<EnvDataset> {
    cfg.validate()?;
    let dim = cfg.feature_dim();
    let k = cfg.shortcut_dims_per_env;
    let mut environments = Vec::with_capacity(cfg.num_envs);
    for e in 0..cfg.num_envs {
        let mut rng = env_rng(cfg.seed, e);
        let n = cfg.samples_per_env;
        let mut features = Array2::zeros((n, dim));
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let y = i % 2;
            let t: f64 = rng.random();
            let [px, py] = spiral_point(y, t, cfg.spiral_turns).map(|v| v * cfg.spiral_radius);
            let mut row = features.row_mut(i);
            row[0] = px + cfg.invariant_noise_std * normal(&mut rng);
            row[1] = py + cfg.invariant_noise_std * normal(&mut rng);
            for block in 0..cfg.num_envs {
                for j in 0..k {
                    row[2 + block * k + j] = normal(&mut rng);
                }
            }
            let flipped = rng.random::<f64>() < cfg.shortcut_flip_prob_train;
            let code = if (y == 1) != flipped { 1.0 } else { -1.0 };
            for j in 0..k {
                row[2 + e * k + j] = code + cfg.shortcut_jitter * normal(&mut rng);
            }
            labels.push(y);
        }
        environments.push(Environment {
            id: e,
            name: e.to_string(),
            features,
            labels,
        });
    }
    Ok(EnvDataset {
        environments,
        feature_dim: dim,
        num_classes: 2,
        provenance: DatasetSpec::Spirals(cfg.clone()),
    })
}

pub fn gen_synthetic_cmnist(cfg: &SyntheticCmnistConfig) -> Result<EnvDataset> {
    cfg.validate()?;
    let k = cfg.core_feature_dim;
    let dim = cfg.feature_dim();
    let w = 1.0 / (k as f64).sqrt();
    let mut environments = Vec::with_capacity(cfg.env_label_color_corr.len());
    for (e, &corr) in cfg.env_label_color_corr.iter().enumerate() {
        let mut rng = env_rng(cfg.seed, e);
        let n = cfg.samples_per_env;
        let mut features = Array2::zeros((n, dim));
        let mut labels = Vec::with_capacity(n);
        let color_match = (1.0 + corr) / 2.0;
        let mut flip = false;
        for i in 0..n {
            let true_label = i % 2;
            let target = if true_label == 1 { 1.0 } else { -1.0 };
            let mut core: Vec<f64> = (0..k).map(|_| normal(&mut rng)).collect();
            let mut score: f64 = core.iter().map(|v| v * w).sum();
            if score * target < 0.0 {
                core.iter_mut().for_each(|v| *v = -*v);
                score = -score;
            }
            // push away from the boundary along the true direction
            let push = (cfg.core_margin - score.abs()).max(0.0) * target;
            core.iter_mut().for_each(|v| *v += push * w);

            // consecutive (0, 1) pairs share one flip draw, keeping observed labels balanced
            if true_label == 0 {
                flip = rng.random::<f64>() < cfg.label_noise;
            }
            let label = if flip { 1 - true_label } else { true_label };
            let color = if rng.random::<f64>() < color_match {
                label
            } else {
                1 - label
            };
            let mut row = features.row_mut(i);
            row.slice_mut(s![..k])
                .assign(&ndarray::ArrayView1::from(&core));
            row[k + color] = 1.0;
            labels.push(label);
        }
        environments.push(Environment {
            id: e,
            name: corr_env_name(corr),
            features,
            labels,
        });
    }
    Ok(EnvDataset {
        environments,
        feature_dim: dim,
        num_classes: 2,
        provenance: DatasetSpec::Cmnist(cfg.clone()),
    })
}

/// Index of the color bit inside a synthetic CMNIST feature row.
pub fn cmnist_color_bit(cfg: &SyntheticCmnistConfig, row: ndarray::ArrayView1<'_, f64>) -> usize {
    usize::from(row[cfg.core_feature_dim + 1] > row[cfg.core_feature_dim])
}

/// Label-stratified per-environment split. Returns `(train, heldout)`.
pub fn env_split(
    ds: &EnvDataset,
    holdout_fraction: f64,
    seed: u64,
) -> Result<(EnvDataset, EnvDataset)> {
    if !(holdout_fraction > 0.0 && holdout_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "holdout fraction {holdout_fraction} outside (0, 1)"
        )));
    }
    let mut train = Vec::with_capacity(ds.environments.len());
    let mut heldout = Vec::with_capacity(ds.environments.len());
    for env in &ds.environments {
        let (tr, ho) = split_indices(env, ds.num_classes, holdout_fraction, seed)?;
        train.push(env.subset(&tr));
        heldout.push(env.subset(&ho));
    }
    Ok((ds.with_environments(train), ds.with_environments(heldout)))
}

fn split_indices(
    env: &Environment,
    num_classes: usize,
    fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &y) in env.labels.iter().enumerate() {
        by_class[y].push(i);
    }
    for (class, members) in by_class.iter().enumerate() {
        if !members.is_empty() && members.len() < 2 {
            return Err(Error::EnvironmentTooSmall {
                env: env.id,
                class,
                count: members.len(),
            });
        }
    }

    // largest-remainder allocation so the heldout total is round(n * fraction)
    let total = (env.len() as f64 * fraction).round() as usize;
    let quotas: Vec<f64> = by_class.iter().map(|m| m.len() as f64 * fraction).collect();
    let mut take: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..num_classes).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut remaining = total.saturating_sub(take.iter().sum());
    for &c in &order {
        if remaining == 0 {
            break;
        }
        if take[c] < by_class[c].len() {
            take[c] += 1;
            remaining -= 1;
        }
    }
    for (c, members) in by_class.iter().enumerate() {
        if !members.is_empty() {
            take[c] = take[c].clamp(1, members.len() - 1);
        }
    }

    let mut rng = env_rng(seed, env.id);
    let mut train = Vec::new();
    let mut heldout = Vec::new();
    for (c, mut members) in by_class.into_iter().enumerate() {
        members.shuffle(&mut rng);
        heldout.extend_from_slice(&members[..take[c]]);
        train.extend_from_slice(&members[take[c]..]);
    }
    train.sort_unstable();
    heldout.sort_unstable();
    Ok((train, heldout))
}

/// A held-out Spirals environment carries no shortcut: its own block is
/// redrawn as standard-normal noise, like every other block.
fn scrub_own_shortcut(cfg: &SpiralsConfig, env: &mut Environment) {
    let k = cfg.shortcut_dims_per_env;
    let first = 2 + env.id * k;
    if first + k > env.features.ncols() {
        return;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(u64::MAX - env.id as u64);
    for mut row in env.features.outer_iter_mut() {
        for j in first..first + k {
            row[j] = normal(&mut rng);
        }
    }
}

/// Removes `test_env` from the training pool. Returns `(training environments, test environment)`.
/// For Spirals the returned test environment has every shortcut block replaced by noise.
pub fn leave_one_env_out(ds: &EnvDataset, test_env: usize) -> Result<(EnvDataset, Environment)> {
    if ds.environments.len() < 3 {
        return Err(Error::TooFewEnvironments {
            required: 3,
            actual: ds.environments.len(),
        });
    }
    let mut test = ds.env(test_env)?.clone();
    if let DatasetSpec::Spirals(cfg) = &ds.provenance {
        scrub_own_shortcut(cfg, &mut test);
    }
    let train = ds
        .environments
        .iter()
        .filter(|e| e.id != test_env)
        .cloned()
        .collect();
    Ok((ds.with_environments(train), test))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestEnv {
    id: usize,
    name: String,
    file: String,
    samples: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    #[serde(flatten)]
    spec: DatasetSpec,
    feature_dim: usize,
    num_classes: usize,
    environments: Vec<ManifestEnv>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes `env_<id>.csv` (header `f0..f{D-1},label`) per environment plus `manifest.json`.
pub fn write_dataset(ds: &EnvDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut envs = Vec::with_capacity(ds.environments.len());
    for env in &ds.environments {
        let file = format!("env_{}.csv", env.id);
        let mut w = csv::Writer::from_path(dir.join(&file))?;
        let mut header: Vec<String> = (0..ds.feature_dim).map(|j| format!("f{j}")).collect();
        header.push("label".into());
        w.write_record(&header)?;
        for (row, &y) in env.features.outer_iter().zip(&env.labels) {
            let mut record: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            record.push(y.to_string());
            w.write_record(&record)?;
        }
        w.flush()?;
        envs.push(ManifestEnv {
            id: env.id,
            name: env.name.clone(),
            file,
            samples: env.len(),
        });
    }
    let manifest = Manifest {
        format_version: 1,
        spec: ds.provenance.clone(),
        feature_dim: ds.feature_dim,
        num_classes: ds.num_classes,
        environments: envs,
    };
    fs::write(
        dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<EnvDataset> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    let mut environments = Vec::with_capacity(manifest.environments.len());
    for meta in &manifest.environments {
        let mut r = csv::Reader::from_path(dir.join(&meta.file))?;
        let mut values = Vec::with_capacity(meta.samples * manifest.feature_dim);
        let mut labels = Vec::with_capacity(meta.samples);
        for record in r.records() {
            let record = record?;
            if record.len() != manifest.feature_dim + 1 {
                return Err(Error::InvalidConfig(format!(
                    "{}: expected {} columns, found {}",
                    meta.file,
                    manifest.feature_dim + 1,
                    record.len()
                )));
            }
            for field in record.iter().take(manifest.feature_dim) {
                values.push(field.parse::<f64>().map_err(|e| {
                    Error::InvalidConfig(format!("{}: bad feature '{field}': {e}", meta.file))
                })?);
            }
            let label = &record[manifest.feature_dim];
            labels.push(label.parse::<usize>().map_err(|e| {
                Error::InvalidConfig(format!("{}: bad label '{label}': {e}", meta.file))
            })?);
        }
        let rows = labels.len();
        let features = Array2::from_shape_vec((rows, manifest.feature_dim), values)
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        environments.push(Environment {
            id: meta.id,
            name: meta.name.clone(),
            features,
            labels,
        });
    }
    Ok(EnvDataset {
        environments,
        feature_dim: manifest.feature_dim,
        num_classes: manifest.num_classes,
        provenance: manifest.spec,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spirals() -> SpiralsConfig {
        SpiralsConfig {
            samples_per_env: 64,
            shortcut_dims_per_env: 1,
            ..SpiralsConfig::default()
        }
    }

    #[test]
    fn spirals_dimensions() {
        let ds = gen_spirals(&SpiralsConfig {
            shortcut_dims_per_env: 1,
            ..SpiralsConfig::default()
        })
        .unwrap();
        assert_eq!(ds.feature_dim, 18);
        assert_eq!(SpiralsConfig::default().feature_dim(), 2 + 16 * 32);
        assert_eq!(ds.environments.len(), 16);
        for env in &ds.environments {
            assert_eq!(env.features.dim(), (512, 18));
            assert_eq!(env.class_counts(2), vec![256, 256]);
        }
    }

    #[test]
    fn spirals_zero_noise_points_lie_on_arms() {
        let ds = gen_spirals(&small_spirals()).unwrap();
        let env = &ds.environments[3];
        for (row, &y) in env.features.outer_iter().zip(&env.labels) {
            let (x, z) = (row[0], row[1]);
            let r = (x * x + z * z).sqrt();
            let t = (r - 0.1) / 0.9;
            let p = spiral_point(y, t, 0.5);
            assert!((p[0] - x).abs() < 1e-9 && (p[1] - z).abs() < 1e-9);
        }
    }

    #[test]
    fn spirals_shortcut_only_in_own_env() {
        let ds = gen_spirals(&small_spirals()).unwrap();
        for env in &ds.environments {
            let col = env.features.column(2 + env.id);
            for (&v, &y) in col.iter().zip(&env.labels) {
                assert_eq!(v > 0.0, y == 1);
            }
        }
    }

    #[test]
    fn spirals_shortcut_flips() {
        let cfg = SpiralsConfig {
            shortcut_flip_prob_train: 1.0,
            ..small_spirals()
        };
        let ds = gen_spirals(&cfg).unwrap();
        let env = &ds.environments[0];
        for (&v, &y) in env.features.column(2).iter().zip(&env.labels) {
            assert_eq!(v > 0.0, y == 0);
        }
    }

    #[test]
    fn generators_are_deterministic() {
        let a = gen_spirals(&small_spirals()).unwrap();
        let b = gen_spirals(&small_spirals()).unwrap();
        assert_eq!(a, b);
        let c = gen_spirals(&SpiralsConfig {
            seed: 1,
            ..small_spirals()
        })
        .unwrap();
        assert_ne!(a, c);
        let cfg = SyntheticCmnistConfig {
            samples_per_env: 100,
            ..Default::default()
        };
        assert_eq!(
            gen_synthetic_cmnist(&cfg).unwrap(),
            gen_synthetic_cmnist(&cfg).unwrap()
        );
    }

    #[test]
    fn invalid_configs() {
        assert!(gen_spirals(&SpiralsConfig {
            num_envs: 1,
            ..small_spirals()
        })
        .is_err());
        assert!(gen_spirals(&SpiralsConfig {
            invariant_noise_std: -1.0,
            ..small_spirals()
        })
        .is_err());
        let bad = SyntheticCmnistConfig {
            label_noise: 0.5,
            ..Default::default()
        };
        assert!(gen_synthetic_cmnist(&bad).is_err());
        let bad = SyntheticCmnistConfig {
            env_label_color_corr: vec![1.2],
            ..Default::default()
        };
        assert!(gen_synthetic_cmnist(&bad).is_err());
    }

    #[test]
    fn cmnist_layout() {
        let cfg = SyntheticCmnistConfig::default();
        let ds = gen_synthetic_cmnist(&cfg).unwrap();
        assert_eq!(ds.feature_dim, 10);
        let names: Vec<_> = ds.environments.iter().map(|e| e.name.as_str()).collect();
        assert_eq!(names, ["+90%", "+80%", "-90%"]);
        for env in &ds.environments {
            for row in env.features.outer_iter() {
                assert_eq!(row[8] + row[9], 1.0);
                let score: f64 = row.iter().take(8).sum::<f64>() / 8f64.sqrt();
                assert!(score.abs() >= 0.5 - 1e-12);
            }
        }
    }

    #[test]
    fn split_eighty_twenty() {
        let cfg = SpiralsConfig {
            samples_per_env: 100,
            ..SpiralsConfig::default()
        };
        let ds = gen_spirals(&cfg).unwrap();
        let (train, heldout) = env_split(&ds, 0.2, 7).unwrap();
        for (tr, ho) in train.environments.iter().zip(&heldout.environments) {
            assert_eq!(tr.len(), 80);
            assert_eq!(ho.len(), 20);
            assert_eq!(tr.class_counts(2), vec![40, 40]);
        }
        let (train2, heldout2) = env_split(&ds, 0.2, 7).unwrap();
        assert_eq!(train, train2);
        assert_eq!(heldout, heldout2);
    }

    #[test]
    fn split_union_reconstructs_parent() {
        let cfg = SpiralsConfig {
            samples_per_env: 37,
            num_envs: 3,
            ..SpiralsConfig::default()
        };
        let ds = gen_spirals(&cfg).unwrap();
        let (train, heldout) = env_split(&ds, 0.3, 1).unwrap();
        for ((orig, tr), ho) in ds
            .environments
            .iter()
            .zip(&train.environments)
            .zip(&heldout.environments)
        {
            let mut rows: Vec<Vec<u64>> = tr
                .features
                .outer_iter()
                .chain(ho.features.outer_iter())
                .map(|r| r.iter().map(|v| v.to_bits()).collect())
                .collect();
            let mut expected: Vec<Vec<u64>> = orig
                .features
                .outer_iter()
                .map(|r| r.iter().map(|v| v.to_bits()).collect())
                .collect();
            rows.sort();
            expected.sort();
            assert_eq!(rows, expected);
            let parent = orig.class_counts(2);
            let child = ho.class_counts(2);
            for c in 0..2 {
                let ideal = parent[c] as f64 * 0.3;
                assert!((child[c] as f64 - ideal).abs() <= 1.0);
            }
        }
    }

    #[test]
    fn split_rejects_tiny_env() {
        let env = Environment {
            id: 0,
            name: "0".into(),
            features: Array2::zeros((3, 1)),
            labels: vec![0, 0, 1],
        };
        let ds = EnvDataset {
            environments: vec![env],
            feature_dim: 1,
            num_classes: 2,
            provenance: DatasetSpec::by_name("spirals").unwrap(),
        };
        assert!(matches!(
            env_split(&ds, 0.2, 0),
            Err(Error::EnvironmentTooSmall { class: 1, .. })
        ));
        assert!(env_split(&ds, 1.0, 0).is_err());
    }

    #[test]
    fn leave_one_out() {
        let ds = gen_spirals(&small_spirals()).unwrap();
        let (train, test) = leave_one_env_out(&ds, 0).unwrap();
        assert_eq!(train.environments.len(), 15);
        assert_eq!(test.id, 0);
        assert!(train.environments.iter().all(|e| e.id != 0));
        assert_eq!(test.labels, ds.environments[0].labels);
        assert_eq!(
            test.features.column(0),
            ds.environments[0].features.column(0)
        );
        let agree = test
            .features
            .column(2)
            .iter()
            .zip(&test.labels)
            .filter(|(&v, &y)| (v > 0.0) == (y == 1))
            .count() as f64
            / test.len() as f64;
        assert!(
            (agree - 0.5).abs() < 0.25,
            "held-out shortcut still predictive: {agree}"
        );
        assert!(matches!(
            leave_one_env_out(&ds, 99),
            Err(Error::UnknownEnvironment(99))
        ));

        let cm = gen_synthetic_cmnist(&SyntheticCmnistConfig {
            samples_per_env: 50,
            ..Default::default()
        })
        .unwrap();
        let (train, test) = leave_one_env_out(&cm, 2).unwrap();
        assert_eq!(train.environments.len(), 2);
        assert_eq!(test.name, "-90%");

        let two = gen_spirals(&SpiralsConfig {
            num_envs: 2,
            ..small_spirals()
        })
        .unwrap();
        assert!(matches!(
            leave_one_env_out(&two, 0),
            Err(Error::TooFewEnvironments {
                required: 3,
                actual: 2
            })
        ));
    }

    #[test]
    fn csv_roundtrip() {
        let cfg = SpiralsConfig {
            samples_per_env: 20,
            num_envs: 3,
            invariant_noise_std: 0.1,
            ..small_spirals()
        };
        let ds = gen_spirals(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let header = fs::read_to_string(dir.path().join("env_0.csv")).unwrap();
        assert!(header.starts_with("f0,f1,f2,f3,f4,label\n"));
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn spec_overrides() {
        let spec = DatasetSpec::from_name_and_json(
            "spirals",
            &serde_json::json!({"num_envs": 4, "invariant_noise_std": 0.2}),
        )
        .unwrap();
        match &spec {
            DatasetSpec::Spirals(c) => {
                assert_eq!(c.num_envs, 4);
                assert_eq!(c.samples_per_env, 512);
            }
            _ => unreachable!(),
        }
        assert!(DatasetSpec::by_name("mnist").is_err());
        let json = serde_json::to_string(&spec).unwrap();
        assert!(json.contains("\"generator\":\"spirals\""));
    }
}
