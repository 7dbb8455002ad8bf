//! File formats: CSV datasets, JSONL/CSV training histories, and partition
//! manifests. Floats are written with enough digits to round-trip exactly,
//! so files are faithful to the in-memory values.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::Context;
use fedabml_core::fedcore::{Mode, RoundRecord};
use fedabml_core::linalg::Matrix;
use fedabml_core::metrics::ClientEval;
use fedabml_core::tasks::Dataset;
use serde::{Deserialize, Serialize};

use crate::config::ConfigError;

/// Stable lowercase name of a training mode, matching the configuration
/// schema's spelling.
pub fn mode_name(mode: &Mode) -> &'static str {
    match mode {
        Mode::FedAbml => "fedabml",
        Mode::FedAvg => "fedavg",
        Mode::PerFedAvg { .. } => "per_fedavg",
        Mode::PFedMeStyle { .. } => "pfedme_style",
    }
}

/// Writes a classification dataset as CSV with header
/// `f0,...,f{d-1},label`. Features use the shortest representation that
/// parses back to the same `f64`.
pub fn save_csv(dataset: &Dataset, path: &Path) -> anyhow::Result<()> {
    let file = fs::File::create(path)
        .with_context(|| format!("creating dataset file {}", path.display()))?;
    let mut out = BufWriter::new(file);
    let d = dataset.dim();
    for j in 0..d {
        write!(out, "f{j},")?;
    }
    writeln!(out, "label")?;
    let features = dataset.features();
    for (i, &label) in dataset.labels().iter().enumerate() {
        for v in features.row(i) {
            // Ryu shortest round-trip form, same as the JSON history files.
            let mut buf = ryu_format(*v);
            buf.push(',');
            out.write_all(buf.as_bytes())?;
        }
        writeln!(out, "{label}")?;
    }
    out.flush()?;
    Ok(())
}

fn ryu_format(v: f64) -> String {
    // serde_json's float printing is the shortest round-trip form; reuse it
    // rather than pulling in a second formatter.
    serde_json::to_string(&v).expect("finite float")
}

/// Loads a CSV dataset written by [`save_csv`] (or any file with the same
/// header convention). When `n_classes` is `None` the class count is the
/// largest label plus one.
pub fn load_csv(path: &Path, n_classes: Option<usize>) -> anyhow::Result<Dataset> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading dataset file {}", path.display()))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| config_err(path, 1, "file is empty"))?;
    let columns: Vec<&str> = header.split(',').map(str::trim).collect();
    if columns.last() != Some(&"label") || columns.len() < 2 {
        return Err(config_err(
            path,
            1,
            "header must be f0,...,f{d-1},label",
        ));
    }
    let d = columns.len() - 1;
    for (j, name) in columns[..d].iter().enumerate() {
        if *name != format!("f{j}") {
            return Err(config_err(
                path,
                1,
                format!("feature column {j} is named `{name}`, expected `f{j}`"),
            ));
        }
    }
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != d + 1 {
            return Err(config_err(
                path,
                idx + 1,
                format!("expected {} fields, found {}", d + 1, fields.len()),
            ));
        }
        for field in &fields[..d] {
            let v: f64 = field
                .parse()
                .map_err(|_| config_err(path, idx + 1, format!("`{field}` is not a number")))?;
            if !v.is_finite() {
                return Err(config_err(path, idx + 1, "features must be finite"));
            }
            features.push(v);
        }
        let label: usize = fields[d]
            .parse()
            .map_err(|_| config_err(path, idx + 1, format!("`{}` is not a label", fields[d])))?;
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(config_err(path, 1, "no data rows"));
    }
    let rows = labels.len();
    let matrix = Matrix::from_vec(rows, d, features)?;
    let n_classes = match n_classes {
        Some(c) => c,
        None => labels.iter().copied().max().unwrap_or(0) + 1,
    };
    Ok(Dataset::new(matrix, labels, n_classes)?)
}

fn config_err(path: &Path, line: usize, msg: impl std::fmt::Display) -> anyhow::Error {
    anyhow::Error::new(ConfigError(format!(
        "{}:{line}: {msg}",
        path.display()
    )))
}

/// One history line: a round's aggregates plus the per-client detail.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub round: u64,
    pub mode: String,
    pub mean_loss: f64,
    pub std_loss: f64,
    pub mean_acc: Option<f64>,
    pub std_acc: Option<f64>,
    pub mean_mse: Option<f64>,
    pub mean_nll: f64,
    pub mean_entropy: Option<f64>,
    pub dist_to_target: Option<f64>,
    pub selected: Vec<usize>,
    pub per_client: Vec<ClientEval>,
}

impl HistoryRow {
    pub fn from_record(record: &RoundRecord, mode: &Mode) -> Self {
        HistoryRow {
            round: record.round,
            mode: mode_name(mode).to_string(),
            mean_loss: record.mean_local_loss,
            std_loss: record.std_local_loss,
            mean_acc: record.eval.mean_accuracy,
            std_acc: record.eval.std_accuracy,
            mean_mse: record.eval.mean_mse,
            mean_nll: record.eval.mean_nll,
            mean_entropy: record.eval.mean_entropy,
            dist_to_target: record.dist_to_target,
            selected: record.selected.clone(),
            per_client: record.eval.per_client.clone(),
        }
    }
}

/// Writes the history as JSON Lines, one [`HistoryRow`] per round.
pub fn export_history_jsonl(
    history: &[RoundRecord],
    mode: &Mode,
    path: &Path,
) -> anyhow::Result<()> {
    let file = fs::File::create(path)
        .with_context(|| format!("creating history file {}", path.display()))?;
    let mut out = BufWriter::new(file);
    for record in history {
        let row = HistoryRow::from_record(record, mode);
        serde_json::to_writer(&mut out, &row)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Writes the history aggregates as flat CSV (per-client detail stays in
/// the JSONL file). Missing optional metrics are empty fields.
pub fn export_history_csv(
    history: &[RoundRecord],
    mode: &Mode,
    path: &Path,
) -> anyhow::Result<()> {
    let file = fs::File::create(path)
        .with_context(|| format!("creating history file {}", path.display()))?;
    let mut out = BufWriter::new(file);
    writeln!(
        out,
        "round,mode,mean_loss,std_loss,mean_acc,std_acc,mean_mse,mean_nll,mean_entropy,dist_to_target"
    )?;
    let opt = |v: Option<f64>| v.map(ryu_format).unwrap_or_default();
    for record in history {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            record.round,
            mode_name(mode),
            ryu_format(record.mean_local_loss),
            ryu_format(record.std_local_loss),
            opt(record.eval.mean_accuracy),
            opt(record.eval.std_accuracy),
            opt(record.eval.mean_mse),
            ryu_format(record.eval.mean_nll),
            opt(record.eval.mean_entropy),
            opt(record.dist_to_target),
        )?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a JSONL history back into rows (used by tests and downstream
/// tooling).
pub fn read_history_jsonl(path: &Path) -> anyhow::Result<Vec<HistoryRow>> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading history file {}", path.display()))?;
    let mut rows = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(line)?);
    }
    Ok(rows)
}

/// Per-client view of a label-skew partition, written by the `partition`
/// subcommand.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionManifest {
    pub n_clients: usize,
    pub n_rows: usize,
    pub clients: Vec<PartitionClient>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionClient {
    pub client_id: usize,
    pub classes: Vec<usize>,
    pub rows: Vec<usize>,
}

pub fn write_partition_manifest(
    manifest: &PartitionManifest,
    path: &Path,
) -> anyhow::Result<()> {
    let json = serde_json::to_string_pretty(manifest)?;
    fs::write(path, json)
        .with_context(|| format!("writing partition manifest {}", path.display()))?;
    Ok(())
}
