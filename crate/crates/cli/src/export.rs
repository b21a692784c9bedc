//! Results tables for plotting: collection, CSV/JSON writers and re-import.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use semisup::{Error, Result};

use crate::exec::{RunSummary, SUMMARY_FILE};

pub const SCHEMA: &str = "semisup-results/1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum View {
    /// Every column of every run.
    Runs,
    /// Linear-eval and fine-tune top-1 of the same pretrained network, side by side.
    Correlation,
}

/// One row of the correlation view.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub run: String,
    pub complete: bool,
    pub seed: u64,
    pub config_hash: String,
    pub build_id: String,
    pub axes: String,
    pub width: f64,
    pub head_layers: usize,
    pub label_fraction: Option<f64>,
    pub from_layer: Option<usize>,
    pub linear_eval_top1: Option<f64>,
    pub finetune_top1: Option<f64>,
}

impl From<&RunSummary> for CorrelationRow {
    fn from(r: &RunSummary) -> Self {
        Self {
            run: r.run.clone(),
            complete: r.complete,
            seed: r.seed,
            config_hash: r.config_hash.clone(),
            build_id: r.build_id.clone(),
            axes: r.axes.clone(),
            width: r.width,
            head_layers: r.head_layers,
            label_fraction: r.label_fraction,
            from_layer: r.from_layer,
            linear_eval_top1: r.linear_eval_top1,
            finetune_top1: r.finetune_top1,
        }
    }
}

fn data_err(e: impl std::fmt::Display) -> Error {
    Error::Data(e.to_string())
}

fn header<T: Serialize + Default>() -> Result<Vec<String>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.serialize(T::default()).map_err(data_err)?;
    let bytes = w.into_inner().map_err(data_err)?;
    let text = String::from_utf8(bytes).map_err(data_err)?;
    let mut r = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    Ok(r.headers().map_err(data_err)?.iter().map(str::to_string).collect())
}

/// CSV with a `# schema` line, a header row and one line per row.
pub fn write_csv<T: Serialize + Default>(rows: &[T]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(header::<T>()?).map_err(data_err)?;
    for r in rows {
        w.serialize(r).map_err(data_err)?;
    }
    let body = String::from_utf8(w.into_inner().map_err(data_err)?).map_err(data_err)?;
    Ok(format!("# schema: {SCHEMA}\n{body}"))
}

pub fn to_csv(rows: &[RunSummary]) -> Result<String> {
    write_csv(rows)
}

/// Parses a table written by [`write_csv`], checking the schema line.
pub fn read_csv<T: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<T>> {
    let first = text.lines().next().unwrap_or_default();
    if first.trim() != format!("# schema: {SCHEMA}") {
        return Err(Error::Data(format!("expected `# schema: {SCHEMA}`, found `{first}`")));
    }
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    r.deserialize().map(|row| row.map_err(data_err)).collect()
}

pub fn write_json<T: Serialize>(rows: &[T]) -> Result<String> {
    #[derive(Serialize)]
    struct Doc<'a, T> {
        schema: &'a str,
        rows: &'a [T],
    }
    serde_json::to_string_pretty(&Doc { schema: SCHEMA, rows }).map_err(data_err)
}

pub fn read_summary(path: &Path) -> Result<RunSummary> {
    let text = fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            walk(&p, out)?;
        } else if p.file_name().is_some_and(|n| n == SUMMARY_FILE) {
            out.push(p);
        }
    }
    Ok(())
}

/// Every run summary below `root`, ordered by path. The `run` column is
/// rewritten as the run directory relative to `root`.
pub fn collect(root: &Path) -> Result<Vec<RunSummary>> {
    if !root.is_dir() {
        return Err(Error::Config(format!(
            "results directory {} does not exist",
            root.display()
        )));
    }
    let mut paths = Vec::new();
    walk(root, &mut paths)?;
    paths
        .iter()
        .map(|p| {
            let mut row = read_summary(p)?;
            let dir = p.parent().expect("summary has a parent");
            let rel = dir.strip_prefix(root).unwrap_or(dir);
            row.run = if rel.as_os_str().is_empty() {
                ".".into()
            } else {
                rel.components()
                    .map(|c| c.as_os_str().to_string_lossy().into_owned())
                    .collect::<Vec<_>>()
                    .join("/")
            };
            Ok(row)
        })
        .collect()
}

/// Renders `rows` in the requested view and format.
pub fn render(rows: &[RunSummary], view: View, format: Format) -> Result<String> {
    match (view, format) {
        (View::Runs, Format::Csv) => write_csv(rows),
        (View::Runs, Format::Json) => write_json(rows),
        (View::Correlation, f) => {
            let rows: Vec<CorrelationRow> = rows.iter().map(CorrelationRow::from).collect();
            match f {
                Format::Csv => write_csv(&rows),
                Format::Json => write_json(&rows),
            }
        }
    }
}

/// Runs that have not finished every stage.
pub fn incomplete(rows: &[RunSummary]) -> Vec<&RunSummary> {
    rows.iter().filter(|r| !r.complete).collect()
}
