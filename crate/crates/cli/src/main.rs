use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::Value;

use sandmask_core::datasets::{
    read_dataset, write_dataset, DatasetSpec, EnvDataset, MANIFEST_FILE,
};
use sandmask_core::harness::{
    build_table, read_records_jsonl, replay_trial, run_sweep, run_trials, sample_config,
    write_records_jsonl, write_sweep_csv, write_table_csv, HParams, HparamSpace, SelectionScheme,
    SweepKind, SweepSpec, TrialSpec, DEFAULT_HOLDOUT_FRACTION,
};
use sandmask_core::landscape::{
    compute_field, dead_zone_map, make_fig1_pair, write_field_csv, GridParams,
};
use sandmask_core::masking::{
    mask_shape_curve, uniform_grid, write_curve_csv, MaskConfig, MaskMethod,
};
use sandmask_core::SpiralsConfig;

#[derive(Parser)]
#[command(
    name = "sandmask",
    version,
    about = "Gradient-agreement masking experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum TrainMethod {
    Erm,
    And,
    Sand,
}

impl From<TrainMethod> for MaskMethod {
    fn from(m: TrainMethod) -> Self {
        match m {
            TrainMethod::Erm => MaskMethod::None,
            TrainMethod::And => MaskMethod::AndMask,
            TrainMethod::Sand => MaskMethod::SandMask,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FieldMethod {
    None,
    And,
    Sand,
}

#[derive(Clone, Copy, ValueEnum)]
enum DatasetName {
    Spirals,
    Cmnist,
}

impl DatasetName {
    fn as_str(self) -> &'static str {
        match self {
            DatasetName::Spirals => "spirals",
            DatasetName::Cmnist => "cmnist",
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset as per-environment CSV files plus a JSON manifest.
    GenData {
        #[arg(long, value_enum)]
        dataset: DatasetName,
        /// Generator config overrides: inline JSON object or path to a JSON file.
        #[arg(long)]
        config: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on all but one environment and append one JSON line per trial.
    Run {
        /// Dataset directory written by `gen-data`, or a dataset name for its default config.
        #[arg(long)]
        dataset: String,
        /// Comma-separated methods.
        #[arg(long, value_enum, value_delimiter = ',', default_value = "erm")]
        method: Vec<TrainMethod>,
        /// Comma-separated environment ids, or `all`.
        #[arg(long, default_value = "0")]
        test_env: String,
        /// Inline JSON/file of overrides on the dataset defaults, or `sample:N` for N random configs.
        #[arg(long, default_value = "{}")]
        hparams: String,
        /// Hyperparameter space for `sample:N`: `table` or (Spirals only) `desk`.
        #[arg(long, default_value = "table")]
        space: String,
        #[arg(long, default_value_t = 0)]
        search_seed: u64,
        /// Trial seeds 0..k.
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        #[arg(long, default_value_t = 3000)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
        /// Append to `out` instead of overwriting it.
        #[arg(long)]
        append: bool,
    },
    /// Sweep one knob of AND-mask training on Spirals over many seeds.
    Sweep {
        #[arg(long)]
        kind: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long, value_enum, default_value = "and")]
        method: TrainMethod,
        #[arg(long, default_value_t = 20)]
        seeds: usize,
        #[arg(long, default_value_t = 3000)]
        steps: usize,
        /// Overrides on the Spirals default hyperparameters (inline JSON or file).
        #[arg(long, default_value = "{}")]
        hparams: String,
        /// Overrides on the Spirals generator config (inline JSON or file).
        #[arg(long, default_value = "{}")]
        dataset_config: String,
        /// Held-out environments, cycled over seeds.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        test_envs: Vec<usize>,
        /// Also write the full trial records as JSON lines.
        #[arg(long)]
        records: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export the masked update field of a 2-D landscape preset.
    Landscape {
        #[arg(long, default_value = "fig1")]
        preset: String,
        #[arg(long, value_enum, default_value = "and")]
        method: FieldMethod,
        #[arg(long, default_value_t = 1.0)]
        tau: f64,
        #[arg(long, default_value_t = 101)]
        resolution: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tabulate the SAND-mask weight as a function of agreement.
    MaskCurve {
        #[arg(long)]
        tau: f64,
        #[arg(long, value_delimiter = ',', required = true)]
        sigma2: Vec<f64>,
        #[arg(long, default_value_t = 101)]
        points: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Select models per seed and aggregate into a per-environment table.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value = "trainval")]
        selection: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-run every record of a results file and check that the outcomes match.
    Replay {
        #[arg(long = "in")]
        input: PathBuf,
    },
}

/// Inline JSON, or the contents of a JSON file.
fn json_arg(text: &str) -> Result<Value> {
    let trimmed = text.trim_start();
    if trimmed.starts_with('{') || trimmed.starts_with('[') {
        return serde_json::from_str(text).context("parsing inline JSON");
    }
    let body = fs::read_to_string(text).with_context(|| format!("reading {text}"))?;
    serde_json::from_str(&body).with_context(|| format!("parsing {text}"))
}

fn load_dataset(arg: &str) -> Result<EnvDataset> {
    let path = Path::new(arg);
    if path.join(MANIFEST_FILE).exists() {
        return read_dataset(path).with_context(|| format!("reading dataset from {arg}"));
    }
    Ok(DatasetSpec::by_name(arg)?.generate()?)
}

fn parse_test_envs(text: &str, data: &EnvDataset) -> Result<Vec<usize>> {
    if text == "all" {
        return Ok(data.env_ids());
    }
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .with_context(|| format!("bad environment id '{s}'"))
        })
        .collect()
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn gen_data(
    dataset: DatasetName,
    config: Option<String>,
    seed: Option<u64>,
    out: &Path,
) -> Result<()> {
    let overrides = config
        .as_deref()
        .map(json_arg)
        .transpose()?
        .unwrap_or(Value::Null);
    let mut spec = if overrides.is_null() {
        DatasetSpec::by_name(dataset.as_str())?
    } else {
        DatasetSpec::from_name_and_json(dataset.as_str(), &overrides)?
    };
    if let Some(seed) = seed {
        spec = spec.with_seed(seed);
    }
    let data = spec.generate()?;
    write_dataset(&data, out)?;
    eprintln!(
        "wrote {} environments ({} features) to {}",
        data.environments.len(),
        data.feature_dim,
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run(
    dataset: &str,
    methods: &[TrainMethod],
    test_env: &str,
    hparams: &str,
    space: &str,
    search_seed: u64,
    seeds: usize,
    steps: usize,
    out: &Path,
    append: bool,
) -> Result<()> {
    let data = load_dataset(dataset)?;
    let name = data.provenance.name();
    let test_envs = parse_test_envs(test_env, &data)?;
    let configs: Vec<HParams> = if let Some(n) = hparams.strip_prefix("sample:") {
        let n: usize = n.parse().context("sample:N expects an integer")?;
        let space = match space {
            "table" => HparamSpace::for_dataset(name)?,
            "desk" if name == "spirals" => HparamSpace::spirals_desk(),
            other => bail!("unknown hyperparameter space '{other}' for {name}"),
        };
        (0..n)
            .map(|id| sample_config(&space, search_seed, id))
            .collect::<sandmask_core::Result<_>>()?
    } else {
        vec![HParams::with_overrides(name, &json_arg(hparams)?)?]
    };

    let mut specs = Vec::new();
    for (config_id, hp) in configs.iter().enumerate() {
        for &m in methods {
            for &env in &test_envs {
                for seed in 0..seeds as u64 {
                    specs.push(TrialSpec {
                        dataset: data.provenance.clone(),
                        method: m.into(),
                        hparams: hp.clone(),
                        config_id,
                        test_env: env,
                        seed,
                        steps,
                        holdout_fraction: DEFAULT_HOLDOUT_FRACTION,
                    });
                }
            }
        }
    }
    eprintln!("running {} trials", specs.len());
    let records = run_trials(&specs, &data)?;
    let file = if append {
        fs::OpenOptions::new().create(true).append(true).open(out)?
    } else {
        create(out)?.into_inner()?
    };
    write_records_jsonl(&records, BufWriter::new(file))?;
    let failed = records.iter().filter(|r| r.failed()).count();
    eprintln!(
        "wrote {} records to {} ({failed} diverged)",
        records.len(),
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn sweep(
    kind: &str,
    values: Vec<f64>,
    method: TrainMethod,
    seeds: usize,
    steps: usize,
    hparams: &str,
    dataset_config: &str,
    test_envs: Vec<usize>,
    records: Option<PathBuf>,
    out: &Path,
) -> Result<()> {
    let kind: SweepKind = kind.parse()?;
    let dataset: SpiralsConfig = serde_json::from_value(json_arg(dataset_config)?)?;
    let spec = SweepSpec {
        method: method.into(),
        base: HParams::with_overrides("spirals", &json_arg(hparams)?)?,
        dataset,
        seeds,
        steps,
        test_envs,
        ..SweepSpec::new(kind, values)
    };
    let table = run_sweep(&spec)?;
    write_sweep_csv(&table, create(out)?)?;
    if let Some(path) = records {
        write_records_jsonl(&table.records, create(&path)?)?;
    }
    for p in &table.points {
        eprintln!(
            "{}={:<6} mean {:.3} median {:.3} [{:.3}, {:.3}] var {:.4}",
            kind.name(),
            p.value,
            p.stats.mean,
            p.stats.median,
            p.stats.min,
            p.stats.max,
            p.variance
        );
    }
    eprintln!(
        "spearman rho {:.3} (p = {:.3e}, n = {})",
        table.trend.rho, table.trend.p_value, table.trend.n
    );
    Ok(())
}

fn landscape(
    preset: &str,
    method: FieldMethod,
    tau: f64,
    resolution: usize,
    out: &Path,
) -> Result<()> {
    if preset != "fig1" {
        bail!("unknown landscape preset '{preset}' (available: fig1)");
    }
    let (a, b) = make_fig1_pair();
    let method = match method {
        FieldMethod::None => MaskMethod::None,
        FieldMethod::And => MaskMethod::AndMask,
        FieldMethod::Sand => MaskMethod::SandMask,
    };
    let grid = GridParams {
        resolution: (resolution, resolution),
        ..GridParams::default()
    };
    let field = compute_field(&[a, b], &grid, &MaskConfig::new(method, tau))?;
    write_field_csv(&field, create(out)?)?;
    eprintln!("dead fraction {:.4}", dead_zone_map(&field).dead_fraction);
    Ok(())
}

fn mask_curve(tau: f64, sigma2: &[f64], points: usize, out: &Path) -> Result<()> {
    let curve = mask_shape_curve(tau, sigma2, &uniform_grid(points))?;
    write_curve_csv(&curve, create(out)?)?;
    Ok(())
}

fn report(input: &Path, selection: &str, out: &Path) -> Result<()> {
    let scheme: SelectionScheme = selection.parse()?;
    let records = read_records_jsonl(BufReader::new(
        File::open(input).with_context(|| format!("opening {}", input.display()))?,
    ))?;
    let table = build_table(&records, scheme)?;
    write_table_csv(&table, create(out)?)?;
    Ok(())
}

fn replay(input: &Path) -> Result<()> {
    let records = read_records_jsonl(BufReader::new(File::open(input)?))?;
    let mut mismatches = 0;
    for (i, r) in records.iter().enumerate() {
        if !replay_trial(r)?.same_outcome(r) {
            mismatches += 1;
            eprintln!(
                "record {i} (config {}, seed {}) does not replay",
                r.spec.config_id, r.spec.seed
            );
        }
    }
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "{} records, {mismatches} mismatches", records.len())?;
    if mismatches > 0 {
        bail!("{mismatches} records failed to replay");
    }
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenData {
            dataset,
            config,
            seed,
            out,
        } => gen_data(dataset, config, seed, &out),
        Command::Run {
            dataset,
            method,
            test_env,
            hparams,
            space,
            search_seed,
            seeds,
            steps,
            out,
            append,
        } => run(
            &dataset,
            &method,
            &test_env,
            &hparams,
            &space,
            search_seed,
            seeds,
            steps,
            &out,
            append,
        ),
        Command::Sweep {
            kind,
            values,
            method,
            seeds,
            steps,
            hparams,
            dataset_config,
            test_envs,
            records,
            out,
        } => sweep(
            &kind,
            values,
            method,
            seeds,
            steps,
            &hparams,
            &dataset_config,
            test_envs,
            records,
            &out,
        ),
        Command::Landscape {
            preset,
            method,
            tau,
            resolution,
            out,
        } => landscape(&preset, method, tau, resolution, &out),
        Command::MaskCurve {
            tau,
            sigma2,
            points,
            out,
        } => mask_curve(tau, &sigma2, points, &out),
        Command::Report {
            input,
            selection,
            out,
        } => report(&input, &selection, &out),
        Command::Replay { input } => replay(&input),
    }
}
