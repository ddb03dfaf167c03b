//! Model selection, aggregation into per-environment tables, and record persistence.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::trial::{TrialRecord, SCHEMA_VERSION};
use crate::error::{Error, Result};
use crate::masking::MaskMethod;
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SelectionScheme {
    /// Argmax of accuracy on the 20% validation splits of the training environments.
    #[serde(rename = "trainval")]
    TrainingDomainValidation,
    /// Argmax of final-step accuracy on the test environment.
    #[serde(rename = "oracle")]
    TestDomainOracle,
}

impl SelectionScheme {
    pub fn name(self) -> &'static str {
        match self {
            SelectionScheme::TrainingDomainValidation => "trainval",
            SelectionScheme::TestDomainOracle => "oracle",
        }
    }
}

impl fmt::Display for SelectionScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SelectionScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "trainval" | "training_domain_validation" => Ok(Self::TrainingDomainValidation),
            "oracle" | "test_domain_oracle" => Ok(Self::TestDomainOracle),
            other => Err(Error::InvalidConfig(format!(
                "unknown selection scheme '{other}'"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricField {
    TrainValAcc,
    TestAcc,
}

/// One metric read made during selection. `step` is the training step the value belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MetricAccess {
    pub config_id: usize,
    pub field: MetricField,
    pub step: usize,
}

#[derive(Debug, Default, Clone)]
pub struct AccessLog {
    pub reads: Vec<MetricAccess>,
}

impl SelectionScheme {
    fn score(self, r: &TrialRecord, log: &mut AccessLog) -> f64 {
        let field = match self {
            SelectionScheme::TrainingDomainValidation => MetricField::TrainValAcc,
            SelectionScheme::TestDomainOracle => MetricField::TestAcc,
        };
        log.reads.push(MetricAccess {
            config_id: r.spec.config_id,
            field,
            step: r.spec.steps,
        });
        match field {
            MetricField::TrainValAcc => r.train_val_acc,
            MetricField::TestAcc => r.test_acc,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Selection<'a> {
    pub index: usize,
    pub record: &'a TrialRecord,
    pub score: f64,
}

pub fn select_model(records: &[TrialRecord], scheme: SelectionScheme) -> Result<Selection<'_>> {
    select_model_audited(records, scheme, &mut AccessLog::default())
}

/// Highest score wins; ties go to the lower config id, then to the earlier record.
pub fn select_model_audited<'a>(
    records: &'a [TrialRecord],
    scheme: SelectionScheme,
    log: &mut AccessLog,
) -> Result<Selection<'a>> {
    let first = records.first().ok_or(Error::EmptyRecords)?;
    if let Some(r) = records.iter().find(|r| {
        r.spec.test_env != first.spec.test_env || r.spec.dataset.name() != first.spec.dataset.name()
    }) {
        return Err(Error::Precondition(format!(
            "records mix test environments or datasets ({} / {} vs {} / {})",
            first.spec.dataset.name(),
            first.spec.test_env,
            r.spec.dataset.name(),
            r.spec.test_env
        )));
    }
    let mut best: Option<Selection<'a>> = None;
    for (index, record) in records.iter().enumerate() {
        let score = scheme.score(record, log);
        let better = match &best {
            None => true,
            Some(b) => {
                score > b.score
                    || (score == b.score && record.spec.config_id < b.record.spec.config_id)
            }
        };
        if better {
            best = Some(Selection {
                index,
                record,
                score,
            });
        }
    }
    Ok(best.expect("records is non-empty"))
}

/// Mean and standard error of a metric over seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellStat {
    pub mean: f64,
    pub std_err: f64,
    pub n: usize,
}

impl CellStat {
    pub fn from_values(xs: &[f64]) -> Self {
        Self {
            mean: stats::mean(xs),
            std_err: stats::std_err(xs),
            n: xs.len(),
        }
    }

    /// Percentages, `xx.x ± y.y`.
    pub fn format(&self) -> String {
        format!("{:.1} ± {:.1}", 100.0 * self.mean, 100.0 * self.std_err)
    }
}

pub fn method_label(m: MaskMethod) -> &'static str {
    match m {
        MaskMethod::None => "ERM",
        MaskMethod::AndMask => "AND-mask",
        MaskMethod::SandMask => "SAND-mask",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub method: MaskMethod,
    /// One entry per column of [`ResultTable::columns`]; `None` where the method has no runs.
    pub cells: Vec<Option<CellStat>>,
    pub avg: Option<CellStat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub scheme: SelectionScheme,
    /// `(test env id, name)` in ascending id order.
    pub columns: Vec<(usize, String)>,
    pub rows: Vec<TableRow>,
}

fn method_rank(m: MaskMethod) -> u8 {
    match m {
        MaskMethod::None => 0,
        MaskMethod::AndMask => 1,
        MaskMethod::SandMask => 2,
    }
}

type SeedGroups = BTreeMap<u64, Vec<TrialRecord>>;

/// Per (method, test env, seed): select among configs; then mean ± standard error over seeds.
/// The Avg column averages each seed's selected accuracies over test environments first,
/// using only seeds present in every column.
pub fn build_table(records: &[TrialRecord], scheme: SelectionScheme) -> Result<ResultTable> {
    if records.is_empty() {
        return Err(Error::EmptyRecords);
    }
    let mut columns = BTreeMap::new();
    // method rank -> test env -> seed -> records
    let mut groups: BTreeMap<u8, (MaskMethod, BTreeMap<usize, SeedGroups>)> = BTreeMap::new();
    for r in records {
        columns.insert(r.spec.test_env, r.test_env_name.clone());
        groups
            .entry(method_rank(r.spec.method))
            .or_insert_with(|| (r.spec.method, BTreeMap::new()))
            .1
            .entry(r.spec.test_env)
            .or_default()
            .entry(r.spec.seed)
            .or_default()
            .push(r.clone());
    }

    let mut rows = Vec::new();
    for (method, by_env) in groups.into_values() {
        let mut per_seed: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
        let mut cells = Vec::with_capacity(columns.len());
        for env in columns.keys() {
            let Some(by_seed) = by_env.get(env) else {
                cells.push(None);
                continue;
            };
            let mut accs = Vec::with_capacity(by_seed.len());
            for (&seed, group) in by_seed {
                let chosen = select_model(group, scheme)?;
                accs.push(chosen.record.test_acc);
                per_seed
                    .entry(seed)
                    .or_default()
                    .push(chosen.record.test_acc);
            }
            cells.push(Some(CellStat::from_values(&accs)));
        }
        let complete: Vec<f64> = per_seed
            .values()
            .filter(|v| v.len() == columns.len())
            .map(|v| stats::mean(v))
            .collect();
        let avg = (!complete.is_empty()).then(|| CellStat::from_values(&complete));
        rows.push(TableRow { method, cells, avg });
    }
    Ok(ResultTable {
        scheme,
        columns: columns.into_iter().collect(),
        rows,
    })
}

/// Header `method,selection,<env names...>,Avg`; cells `xx.x ± y.y`, empty when missing.
pub fn write_table_csv<W: Write>(table: &ResultTable, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["method".to_string(), "selection".to_string()];
    header.extend(table.columns.iter().map(|(_, name)| name.clone()));
    header.push("Avg".into());
    w.write_record(&header)?;
    for row in &table.rows {
        let mut rec = vec![
            method_label(row.method).to_string(),
            table.scheme.to_string(),
        ];
        for cell in row.cells.iter().chain(std::iter::once(&row.avg)) {
            rec.push(cell.map(|c| c.format()).unwrap_or_default());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_records_jsonl<W: Write>(records: &[TrialRecord], mut out: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_records_jsonl<R: BufRead>(input: R) -> Result<Vec<TrialRecord>> {
    let mut records = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: TrialRecord = serde_json::from_str(&line)?;
        if r.schema_version != SCHEMA_VERSION {
            return Err(Error::InvalidConfig(format!(
                "unsupported record schema version {} (expected {SCHEMA_VERSION})",
                r.schema_version
            )));
        }
        records.push(r);
    }
    Ok(records)
}

/// Test environments in ascending order.
pub fn test_envs_of(records: &[TrialRecord]) -> Vec<usize> {
    records
        .iter()
        .map(|r| r.spec.test_env)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{DatasetSpec, SpiralsConfig};
    use crate::harness::hparams::HParams;
    use crate::harness::trial::{TrialSpec, TrialStatus};

    pub(crate) fn record(
        config_id: usize,
        seed: u64,
        test_env: usize,
        val: f64,
        test: f64,
    ) -> TrialRecord {
        TrialRecord {
            schema_version: SCHEMA_VERSION,
            spec: TrialSpec {
                dataset: DatasetSpec::Spirals(SpiralsConfig::default()),
                method: MaskMethod::AndMask,
                hparams: HParams::spirals(),
                config_id,
                test_env,
                seed,
                steps: 100,
                holdout_fraction: 0.2,
            },
            test_env_name: test_env.to_string(),
            status: TrialStatus::Completed,
            log: Vec::new(),
            train_acc: 1.0,
            train_val_acc: val,
            test_acc: test,
            wall_time_s: 0.0,
        }
    }

    #[test]
    fn single_record_selects_itself() {
        let rs = [record(0, 0, 0, 0.4, 0.6)];
        for scheme in [
            SelectionScheme::TrainingDomainValidation,
            SelectionScheme::TestDomainOracle,
        ] {
            assert_eq!(select_model(&rs, scheme).unwrap().index, 0);
        }
    }

    #[test]
    fn schemes_diverge() {
        let rs = [record(0, 0, 0, 0.9, 0.2), record(1, 0, 0, 0.7, 0.9)];
        assert_eq!(
            select_model(&rs, SelectionScheme::TrainingDomainValidation)
                .unwrap()
                .index,
            0
        );
        assert_eq!(
            select_model(&rs, SelectionScheme::TestDomainOracle)
                .unwrap()
                .index,
            1
        );
    }

    #[test]
    fn ties_go_to_lower_config() {
        let rs = [
            record(5, 0, 0, 0.8, 0.5),
            record(2, 0, 0, 0.8, 0.5),
            record(7, 0, 0, 0.8, 0.5),
        ];
        assert_eq!(
            select_model(&rs, SelectionScheme::TrainingDomainValidation)
                .unwrap()
                .record
                .spec
                .config_id,
            2
        );
    }

    #[test]
    fn oracle_reads_only_final_step() {
        let rs = [record(0, 0, 0, 0.9, 0.2), record(1, 0, 0, 0.7, 0.9)];
        let mut log = AccessLog::default();
        select_model_audited(&rs, SelectionScheme::TestDomainOracle, &mut log).unwrap();
        assert_eq!(log.reads.len(), 2);
        assert!(log
            .reads
            .iter()
            .all(|a| a.step == 100 && a.field == MetricField::TestAcc));
        let mut log = AccessLog::default();
        select_model_audited(&rs, SelectionScheme::TrainingDomainValidation, &mut log).unwrap();
        assert!(log
            .reads
            .iter()
            .all(|a| a.field == MetricField::TrainValAcc));
    }

    #[test]
    fn selection_errors() {
        assert!(matches!(
            select_model(&[], SelectionScheme::TestDomainOracle),
            Err(Error::EmptyRecords)
        ));
        let mixed = [record(0, 0, 0, 0.5, 0.5), record(1, 0, 1, 0.5, 0.5)];
        assert!(matches!(
            select_model(&mixed, SelectionScheme::TestDomainOracle),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn cell_formatting() {
        let c = CellStat::from_values(&[0.90, 0.92, 0.94]);
        assert!((c.mean - 0.92).abs() < 1e-12);
        assert!((c.std_err - 0.011_547).abs() < 1e-6);
        assert_eq!(c.format(), "92.0 ± 1.2");
        assert_eq!(CellStat::from_values(&[0.5, 0.5]).format(), "50.0 ± 0.0");
    }

    #[test]
    fn table_layout() {
        let mut rs = Vec::new();
        for env in 0..2 {
            for seed in 0..2 {
                rs.push(record(0, seed, env, 0.9, 0.5 + 0.1 * env as f64));
                rs.push(record(1, seed, env, 0.1, 1.0));
            }
        }
        let t = build_table(&rs, SelectionScheme::TrainingDomainValidation).unwrap();
        assert_eq!(t.columns, vec![(0, "0".into()), (1, "1".into())]);
        assert_eq!(t.rows.len(), 1);
        assert!((t.rows[0].cells[1].unwrap().mean - 0.6).abs() < 1e-12);
        assert!((t.rows[0].avg.unwrap().mean - 0.55).abs() < 1e-12);
        let oracle = build_table(&rs, SelectionScheme::TestDomainOracle).unwrap();
        assert_eq!(oracle.rows[0].avg.unwrap().mean, 1.0);

        let mut buf = Vec::new();
        write_table_csv(&t, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "method,selection,0,1,Avg");
        assert_eq!(
            text.lines().nth(1).unwrap(),
            "AND-mask,trainval,50.0 ± 0.0,60.0 ± 0.0,55.0 ± 0.0"
        );
    }

    #[test]
    fn jsonl_roundtrip() {
        let rs = vec![record(0, 1, 2, 0.3, 0.4), record(1, 1, 2, 0.5, 0.6)];
        let mut buf = Vec::new();
        write_records_jsonl(&rs, &mut buf).unwrap();
        assert_eq!(buf.iter().filter(|&&b| b == b'\n').count(), 2);
        let back = read_records_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back, rs);
        let bumped = String::from_utf8(buf)
            .unwrap()
            .replace("\"schema_version\":1", "\"schema_version\":99");
        assert!(read_records_jsonl(bumped.as_bytes()).is_err());
    }
}
