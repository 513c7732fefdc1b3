//! Per-round records, the CSV metrics file, the JSON run summary and the
//! cross-run comparison table.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blocks::Stage;

/// Bumped whenever the column set or meaning changes.
pub const SCHEMA_VERSION: u32 = 1;

pub const HEADER: [&str; 18] = [
    "schema",
    "round",
    "step_round",
    "stage",
    "step",
    "mode",
    "train_loss",
    "test_accuracy",
    "em",
    "freeze",
    "cap_hit",
    "peak_memory_bytes",
    "participation",
    "selected",
    "fallback",
    "uploaded",
    "downloaded",
    "flops",
];

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: schema version {found}, expected {expected}")]
    Schema { path: String, found: u32, expected: u32 },
    #[error("{path}: header does not match the metrics schema")]
    Header { path: String },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("compare needs at least two files")]
    TooFewFiles,
}

pub type Result<T> = std::result::Result<T, MetricsError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Profl,
    Oracle,
    Allsmall,
    Exclusive,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Profl => "profl",
            Mode::Oracle => "oracle",
            Mode::Allsmall => "allsmall",
            Mode::Exclusive => "exclusive",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "profl" => Ok(Mode::Profl),
            "oracle" => Ok(Mode::Oracle),
            "allsmall" => Ok(Mode::Allsmall),
            "exclusive" => Ok(Mode::Exclusive),
            other => Err(format!("unknown mode {other:?} (profl, oracle, allsmall, exclusive)")),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub schema: u32,
    /// Global round counter over the whole run, distillation included.
    pub round: usize,
    /// Round index within the current step, 1-based.
    pub step_round: usize,
    pub stage: Stage,
    pub step: usize,
    pub mode: Mode,
    pub train_loss: f64,
    pub test_accuracy: Option<f64>,
    pub em: Option<f64>,
    pub freeze: bool,
    pub cap_hit: bool,
    /// Estimated peak bytes of the configuration trained by the selected
    /// devices (head-only when nobody could train the full sub-model).
    pub peak_memory_bytes: u64,
    pub participation: f64,
    pub selected: usize,
    pub fallback: usize,
    pub uploaded: u64,
    pub downloaded: u64,
    pub flops: u64,
}

pub fn write_csv<W: std::io::Write>(out: W, records: &[RoundRecord]) -> std::result::Result<(), csv::Error> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(HEADER)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn csv_string(records: &[RoundRecord]) -> String {
    let mut buf = Vec::new();
    write_csv(&mut buf, records).expect("writing to memory");
    String::from_utf8(buf).expect("csv is utf-8")
}

pub fn read_csv<R: std::io::Read>(input: R, path: &str) -> Result<Vec<RoundRecord>> {
    let mut rd = csv::Reader::from_reader(input);
    let csv_err = |source| MetricsError::Csv {
        path: path.to_string(),
        source,
    };
    let header = rd.headers().map_err(csv_err)?.clone();
    if header.iter().ne(HEADER.iter().copied()) {
        return Err(MetricsError::Header { path: path.to_string() });
    }
    let mut out = Vec::new();
    for row in rd.deserialize::<RoundRecord>() {
        let row = row.map_err(csv_err)?;
        if row.schema != SCHEMA_VERSION {
            return Err(MetricsError::Schema {
                path: path.to_string(),
                found: row.schema,
                expected: SCHEMA_VERSION,
            });
        }
        out.push(row);
    }
    Ok(out)
}

pub fn load_csv(path: &Path) -> Result<Vec<RoundRecord>> {
    let name = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|source| MetricsError::Io {
        path: name.clone(),
        source,
    })?;
    read_csv(file, &name)
}

/// Aggregates over the rounds of one `(stage, step)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSummary {
    pub stage: Stage,
    pub step: usize,
    pub rounds: usize,
    pub peak_memory_bytes: u64,
    pub mean_participation: f64,
    /// Step-local round at which the step froze; `None` for baselines and
    /// distillation.
    pub freeze_round: Option<usize>,
    pub cap_hit: bool,
    pub final_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema: u32,
    pub mode: Option<Mode>,
    /// The run could not execute (no device affords the model).
    pub na: bool,
    pub rounds: usize,
    pub final_accuracy: Option<f64>,
    pub peak_memory_bytes: u64,
    /// Mean participation over training rounds (distillation excluded).
    pub participation: f64,
    pub uploaded: u64,
    pub downloaded: u64,
    pub flops: u64,
    pub distill_uploaded: u64,
    pub distill_flops: u64,
    pub steps: Vec<StepSummary>,
}

impl Summary {
    /// Everything here is a function of the rows alone.
    pub fn from_records(records: &[RoundRecord]) -> Summary {
        let training: Vec<&RoundRecord> = records.iter().filter(|r| r.stage != Stage::Distill).collect();
        let distill = records.iter().filter(|r| r.stage == Stage::Distill);
        let mut steps: Vec<StepSummary> = Vec::new();
        let mut index: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        let mut participation_sums: Vec<f64> = Vec::new();
        for r in records {
            // keep first-appearance order while grouping
            let key = (stage_rank(r.stage), r.step);
            let i = *index.entry(key).or_insert_with(|| {
                steps.push(StepSummary {
                    stage: r.stage,
                    step: r.step,
                    rounds: 0,
                    peak_memory_bytes: 0,
                    mean_participation: 0.0,
                    freeze_round: None,
                    cap_hit: false,
                    final_accuracy: None,
                });
                participation_sums.push(0.0);
                steps.len() - 1
            });
            let s = &mut steps[i];
            s.rounds += 1;
            s.peak_memory_bytes = s.peak_memory_bytes.max(r.peak_memory_bytes);
            participation_sums[i] += r.participation;
            if r.freeze && s.freeze_round.is_none() {
                s.freeze_round = Some(r.step_round);
            }
            s.cap_hit |= r.cap_hit;
            if r.test_accuracy.is_some() {
                s.final_accuracy = r.test_accuracy;
            }
        }
        for (s, p) in steps.iter_mut().zip(&participation_sums) {
            s.mean_participation = p / s.rounds as f64;
        }
        Summary {
            schema: SCHEMA_VERSION,
            mode: records.first().map(|r| r.mode),
            na: records.is_empty(),
            rounds: training.len(),
            final_accuracy: training.iter().rev().find_map(|r| r.test_accuracy),
            peak_memory_bytes: training.iter().map(|r| r.peak_memory_bytes).max().unwrap_or(0),
            participation: if training.is_empty() {
                0.0
            } else {
                training.iter().map(|r| r.participation).sum::<f64>() / training.len() as f64
            },
            uploaded: training.iter().map(|r| r.uploaded).sum(),
            downloaded: training.iter().map(|r| r.downloaded).sum(),
            flops: training.iter().map(|r| r.flops).sum(),
            distill_uploaded: distill.clone().map(|r| r.uploaded).sum(),
            distill_flops: distill.map(|r| r.flops).sum(),
            steps,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes")
    }

    pub fn one_line(&self) -> String {
        match (self.na, self.mode) {
            (true, _) | (_, None) => "NA: no device can train this configuration".to_string(),
            (false, Some(mode)) => format!(
                "{mode}: accuracy {} | peak {} B | participation {:.3} | uploaded {} | rounds {}",
                fmt_opt(self.final_accuracy),
                self.peak_memory_bytes,
                self.participation,
                self.uploaded,
                self.rounds
            ),
        }
    }
}

fn stage_rank(s: Stage) -> usize {
    match s {
        Stage::Shrinking => 0,
        Stage::Distill => 1,
        Stage::Growing => 2,
        Stage::Baseline => 3,
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |a| format!("{a:.4}"))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub file: String,
    pub mode: String,
    pub final_accuracy: Option<f64>,
    pub peak_memory_bytes: u64,
    pub participation: f64,
    pub uploaded: u64,
    pub downloaded: u64,
    pub flops: u64,
    /// Differences against the first file.
    pub delta_accuracy: Option<f64>,
    pub delta_peak_memory_bytes: i64,
    pub delta_uploaded: i64,
}

pub fn compare(runs: &[(String, Vec<RoundRecord>)]) -> Result<Vec<ComparisonRow>> {
    if runs.len() < 2 {
        return Err(MetricsError::TooFewFiles);
    }
    let summaries: Vec<Summary> = runs.iter().map(|(_, r)| Summary::from_records(r)).collect();
    let base = &summaries[0];
    Ok(runs
        .iter()
        .zip(&summaries)
        .map(|((file, _), s)| ComparisonRow {
            file: file.clone(),
            mode: s.mode.map_or_else(|| "NA".to_string(), |m| m.to_string()),
            final_accuracy: s.final_accuracy,
            peak_memory_bytes: s.peak_memory_bytes,
            participation: s.participation,
            uploaded: s.uploaded,
            downloaded: s.downloaded,
            flops: s.flops,
            delta_accuracy: s.final_accuracy.zip(base.final_accuracy).map(|(a, b)| a - b),
            delta_peak_memory_bytes: s.peak_memory_bytes as i64 - base.peak_memory_bytes as i64,
            delta_uploaded: s.uploaded as i64 - base.uploaded as i64,
        })
        .collect())
}

pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("writing to memory");
    }
    String::from_utf8(w.into_inner().expect("flush to memory")).expect("csv is utf-8")
}

pub fn comparison_table(rows: &[ComparisonRow]) -> String {
    let mut out = format!(
        "{:<28} {:>9} {:>9} {:>12} {:>7} {:>14} {:>9} {:>12}\n",
        "file", "mode", "accuracy", "peak_bytes", "PR", "uploaded", "Δacc", "Δpeak"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<28} {:>9} {:>9} {:>12} {:>7.3} {:>14} {:>9} {:>12}\n",
            r.file,
            r.mode,
            fmt_opt(r.final_accuracy),
            r.peak_memory_bytes,
            r.participation,
            r.uploaded,
            r.delta_accuracy.map_or_else(|| "NA".to_string(), |d| format!("{d:+.4}")),
            r.delta_peak_memory_bytes
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(round: usize, stage: Stage, step: usize, acc: Option<f64>, freeze: bool) -> RoundRecord {
        RoundRecord {
            schema: SCHEMA_VERSION,
            round,
            step_round: round,
            stage,
            step,
            mode: Mode::Profl,
            train_loss: 0.5,
            test_accuracy: acc,
            em: None,
            freeze,
            cap_hit: false,
            peak_memory_bytes: 100 * step as u64,
            participation: 0.75,
            selected: 3,
            fallback: 1,
            uploaded: 40,
            downloaded: 80,
            flops: 1000,
        }
    }

    #[test]
    fn csv_round_trip() {
        let rows = vec![
            rec(1, Stage::Shrinking, 2, Some(0.25), false),
            rec(2, Stage::Distill, 2, None, false),
            rec(3, Stage::Growing, 1, Some(0.5), true),
        ];
        let text = csv_string(&rows);
        assert!(text.starts_with(&HEADER.join(",")));
        assert_eq!(read_csv(text.as_bytes(), "mem").unwrap(), rows);
    }

    #[test]
    fn wrong_header_rejected() {
        let text = "a,b\n1,2\n";
        assert!(matches!(read_csv(text.as_bytes(), "x"), Err(MetricsError::Header { .. })));
    }

    #[test]
    fn summary_groups_steps_and_excludes_distillation() {
        let rows = vec![
            rec(1, Stage::Shrinking, 2, Some(0.25), true),
            rec(2, Stage::Distill, 2, None, false),
            rec(3, Stage::Growing, 1, Some(0.5), false),
            rec(4, Stage::Growing, 1, Some(0.6), true),
        ];
        let s = Summary::from_records(&rows);
        assert_eq!(s.rounds, 3);
        assert_eq!(s.uploaded, 120);
        assert_eq!(s.distill_uploaded, 40);
        assert_eq!(s.final_accuracy, Some(0.6));
        assert_eq!(s.steps.len(), 3);
        assert_eq!(s.steps[2].freeze_round, Some(4));
        assert_eq!(s.steps[2].rounds, 2);
    }

    #[test]
    fn comparing_a_run_with_itself_gives_zero_deltas() {
        let rows = vec![rec(1, Stage::Growing, 1, Some(0.5), false)];
        let out = compare(&[("a".into(), rows.clone()), ("b".into(), rows)]).unwrap();
        for r in &out {
            assert_eq!(r.delta_accuracy, Some(0.0));
            assert_eq!(r.delta_peak_memory_bytes, 0);
            assert_eq!(r.delta_uploaded, 0);
        }
        assert!(compare(&[("a".into(), vec![])]).is_err());
    }
}
