//! Run records, confusion CSV, metrics JSON and confusion heatmaps.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::ser::Serializer;
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;

use crate::data::{encode_p5, Dataset, Level, Partition};
use crate::error::{Error, Result};
use crate::train::{EpochStats, EvalReport, TrainConfig};

/// Side length in pixels of one heatmap cell.
pub const HEATMAP_CELL: usize = 16;

/// Every value needed to repeat a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Data folder as given on the command line.
    pub data: Option<String>,
    pub level: Level,
    pub image_size: usize,
    pub train_fraction: f64,
    /// Seeds the split, initialisation and shuffling.
    pub seed: u64,
    pub train: TrainConfig,
    pub min_confidence: Option<f64>,
    pub metadata: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub class_names: Vec<String>,
    pub train_counts: Vec<usize>,
    pub test_counts: Vec<usize>,
}

impl DatasetSummary {
    pub fn from_dataset(data: &Dataset) -> Result<Self> {
        let count = |which| -> Result<Vec<usize>> {
            let mut counts = vec![0; data.class_names().len()];
            for item in data.subset(which)? {
                counts[item.label] += 1;
            }
            Ok(counts)
        };
        Ok(DatasetSummary {
            class_names: data.class_names().to_vec(),
            train_counts: count(Partition::Train)?,
            test_counts: count(Partition::Test)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub config: RunConfig,
    pub dataset: DatasetSummary,
    pub evaluation: EvalReport,
    /// Empty for evaluation-only runs.
    pub history: Vec<EpochStats>,
    /// Not part of [`metrics_to_json`]; see [`timing_to_json`].
    pub wall_clock_seconds: f64,
}

/// A float written with exactly six decimals.
struct Fixed6(f64);

impl Serialize for Fixed6 {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let raw =
            RawValue::from_string(format!("{:.6}", self.0)).map_err(serde::ser::Error::custom)?;
        raw.serialize(serializer)
    }
}

#[derive(Serialize)]
struct EvaluationJson<'a> {
    accuracy: Fixed6,
    per_class_accuracy: Vec<Fixed6>,
    confusion: &'a [Vec<u64>],
    n_test: usize,
}

#[derive(Serialize)]
struct RecordJson<'a> {
    config: &'a RunConfig,
    dataset: &'a DatasetSummary,
    evaluation: EvaluationJson<'a>,
    history: &'a [EpochStats],
}

/// Pretty JSON of everything in `record` except wall-clock time, so that
/// repeated runs produce identical bytes. Accuracies carry six decimals.
pub fn metrics_to_json(record: &RunRecord) -> String {
    let eval = &record.evaluation;
    let json = RecordJson {
        config: &record.config,
        dataset: &record.dataset,
        evaluation: EvaluationJson {
            accuracy: Fixed6(eval.accuracy),
            per_class_accuracy: eval.per_class_accuracy.iter().map(|&a| Fixed6(a)).collect(),
            confusion: &eval.confusion,
            n_test: eval.n_test,
        },
        history: &record.history,
    };
    let mut text = serde_json::to_string_pretty(&json).expect("record serialises");
    text.push('\n');
    text
}

/// `{"wall_clock_seconds": ...}` for the timing sidecar.
pub fn timing_to_json(record: &RunRecord) -> String {
    format!(
        "{{\n  \"wall_clock_seconds\": {:.3}\n}}\n",
        record.wall_clock_seconds
    )
}

/// Confusion matrix as CSV: a `true\predicted` header, then one row per true class.
pub fn confusion_to_csv(report: &EvalReport, class_names: &[String]) -> Result<String> {
    if class_names.len() != report.classes() {
        return Err(Error::Contract(format!(
            "{} class names for a {}-class confusion matrix",
            class_names.len(),
            report.classes()
        )));
    }
    let mut out = String::from("true\\predicted");
    for name in class_names {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for (name, row) in class_names.iter().zip(&report.confusion) {
        out.push_str(name);
        for count in row {
            out.push_str(&format!(",{count}"));
        }
        out.push('\n');
    }
    Ok(out)
}

/// Parses [`confusion_to_csv`] output back into class names and counts.
pub fn confusion_from_csv(text: &str) -> Result<(Vec<String>, Vec<Vec<u64>>)> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Decode("empty confusion CSV".into()))?;
    let mut fields = header.split(',');
    if fields.next() != Some("true\\predicted") {
        return Err(Error::Decode(format!(
            "unexpected confusion CSV header {header:?}"
        )));
    }
    let names: Vec<String> = fields.map(str::to_string).collect();
    let mut grid = Vec::with_capacity(names.len());
    for (i, line) in lines.enumerate() {
        let mut fields = line.split(',');
        if fields.next() != names.get(i).map(String::as_str) {
            return Err(Error::Decode(format!(
                "row {i} does not start with its class name: {line:?}"
            )));
        }
        let row = fields
            .map(|f| {
                f.parse::<u64>()
                    .map_err(|_| Error::Decode(format!("bad count {f:?} in row {i}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if row.len() != names.len() {
            return Err(Error::Decode(format!(
                "row {i} has {} counts, expected {}",
                row.len(),
                names.len()
            )));
        }
        grid.push(row);
    }
    if grid.len() != names.len() {
        return Err(Error::Decode(format!(
            "{} rows for {} classes",
            grid.len(),
            names.len()
        )));
    }
    Ok((names, grid))
}

/// Row-normalised confusion matrix as a P5 image, one 16x16 block per cell.
pub fn confusion_heatmap_pgm(report: &EvalReport) -> Vec<u8> {
    let classes = report.classes();
    let cells: Vec<u8> = report
        .confusion
        .iter()
        .flat_map(|row| {
            let total: u64 = row.iter().sum();
            row.iter().map(move |&count| {
                if total == 0 {
                    0
                } else {
                    // f64::round rounds half away from zero
                    (255.0 * count as f64 / total as f64).round() as u8
                }
            })
        })
        .collect();
    let side = HEATMAP_CELL * classes;
    let mut pixels = Vec::with_capacity(side * side);
    for y in 0..side {
        for x in 0..side {
            pixels.push(cells[(y / HEATMAP_CELL) * classes + x / HEATMAP_CELL]);
        }
    }
    encode_p5(side, side, &pixels).expect("pixel count matches")
}

/// Writes through a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(contents)
        .map_err(|e| Error::io(tmp.path(), e))?;
    tmp.as_file()
        .sync_all()
        .map_err(|e| Error::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}
