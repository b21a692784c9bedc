//! Cartesian sweeps over config keys.

use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use semisup::{Error, Result};

use crate::config::{set_key, ExperimentConfig};
use crate::exec::{execute, Cache, RunSummary, SUMMARY_FILE};
use crate::export;
use crate::plan::{prepare, Prepared};

pub const RESULTS_FILE: &str = "results.csv";
pub const MANIFEST_FILE: &str = "sweep.toml";

/// Seeds and a list of grids. Each grid maps dotted config keys to value
/// lists and expands to their Cartesian product, first key slowest; the
/// sweep is the concatenation of its grids, each cell run once per seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub grid: Vec<toml::Table>,
}

fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3]
}

const SIZE: &str = r#"
[[grid]]
"network.width" = [1.0, 2.0]
"finetune.label_fraction" = [0.01, 0.1, 1.0]
"supervised.enabled" = [true]
"#;

const MEMORY: &str = r#"
[[grid]]
"pretrain.use_queue" = [false, true]
"finetune.label_fraction" = [0.01, 0.1, 1.0]
"#;

const HEAD: &str = r#"
[[grid]]
"network.head_layers" = [2]
"finetune.from_layer" = [0, 1]
"finetune.label_fraction" = [0.01, 0.1, 1.0]

[[grid]]
"network.head_layers" = [3]
"finetune.from_layer" = [0, 1, 2]
"finetune.label_fraction" = [0.01, 0.1, 1.0]

[[grid]]
"network.head_layers" = [4]
"finetune.from_layer" = [0, 1, 2, 3]
"finetune.label_fraction" = [0.01, 0.1, 1.0]
"#;

const DISTILL: &str = r#"
[[grid]]
"distill.enabled" = [true]
"distill.alpha" = [0.0, 0.5, 1.0]
"distill.temperature" = [0.1, 1.0, 2.0]
"#;

pub const BUILTIN: &[&str] = &["size", "memory", "head", "distill"];

/// One point of the sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub index: usize,
    pub seed: u64,
    pub assignments: Vec<(String, toml::Value)>,
}

impl Cell {
    pub fn dir_name(&self) -> String {
        format!("c{:03}-s{}", self.index, self.seed)
    }

    pub fn axes(&self) -> String {
        self.assignments
            .iter()
            .map(|(k, v)| match v {
                toml::Value::String(s) => format!("{k}={s}"),
                other => format!("{k}={other}"),
            })
            .collect::<Vec<_>>()
            .join(";")
    }
}

impl SweepSpec {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("invalid sweep: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read sweep {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// A named grid: `size`, `memory`, `head` or `distill`.
    pub fn builtin(name: &str) -> Result<Self> {
        let text = match name {
            "size" => SIZE,
            "memory" => MEMORY,
            "head" => HEAD,
            "distill" => DISTILL,
            other => {
                return Err(Error::Config(format!(
                    "unknown grid `{other}` (expected one of {})",
                    BUILTIN.join(", ")
                )))
            }
        };
        Self::parse(text)
    }

    /// Every cell in enumeration order.
    pub fn cells(&self) -> Result<Vec<Cell>> {
        if self.seeds.is_empty() {
            return Err(Error::Config("a sweep needs at least one seed".into()));
        }
        let mut points: Vec<Vec<(String, toml::Value)>> = Vec::new();
        for grid in &self.grid {
            let mut block = vec![Vec::new()];
            for (key, values) in grid {
                let values = values
                    .as_array()
                    .filter(|a| !a.is_empty())
                    .ok_or_else(|| Error::Config(format!("sweep axis `{key}` needs a non-empty list")))?;
                block = block
                    .into_iter()
                    .flat_map(|prefix| {
                        values.iter().map(move |v| {
                            let mut p = prefix.clone();
                            p.push((key.clone(), v.clone()));
                            p
                        })
                    })
                    .collect();
            }
            points.extend(block);
        }
        let mut cells = Vec::new();
        for (index, assignments) in points.into_iter().enumerate() {
            for &seed in &self.seeds {
                cells.push(Cell {
                    index,
                    seed,
                    assignments: assignments.clone(),
                });
            }
        }
        Ok(cells)
    }
}

/// Resolved config table of one cell.
pub fn cell_table(base: &toml::Table, cell: &Cell) -> Result<toml::Table> {
    let mut t = base.clone();
    for (k, v) in &cell.assignments {
        set_key(&mut t, k, v.clone())?;
    }
    set_key(&mut t, "run.seed", toml::Value::Integer(cell.seed as i64))?;
    Ok(t)
}

fn refuse_clobber(out: &Path) -> Result<()> {
    if out.exists() {
        let mut entries = fs::read_dir(out)?;
        if entries.next().is_some() {
            return Err(Error::Config(format!(
                "output directory {} is not empty; refusing to overwrite",
                out.display()
            )));
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct Manifest<'a> {
    build_id: &'a str,
    seeds: &'a [u64],
    grid: &'a [toml::Table],
    base: &'a toml::Table,
}

/// Validates every cell, then runs them on `jobs` threads and writes the
/// results table. Returns one row per cell in enumeration order.
pub fn run_sweep(
    base: &toml::Table,
    spec: &SweepSpec,
    out: &Path,
    jobs: usize,
    cache: &Cache,
    quiet: bool,
) -> Result<Vec<RunSummary>> {
    refuse_clobber(out)?;
    let cells = spec.cells()?;
    let mut prepared: Vec<Prepared> = Vec::with_capacity(cells.len());
    for cell in &cells {
        let cfg = ExperimentConfig::from_table(&cell_table(base, cell)?)
            .map_err(|e| Error::Config(format!("cell {} ({}): {e}", cell.dir_name(), cell.axes())))?;
        prepared.push(prepare(&cfg).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("cell {} ({}): {m}", cell.dir_name(), cell.axes())),
            other => other,
        })?);
    }
    fs::create_dir_all(out.join("cells"))?;
    let manifest = Manifest {
        build_id: crate::build_id(),
        seeds: &spec.seeds,
        grid: &spec.grid,
        base,
    };
    fs::write(
        out.join(MANIFEST_FILE),
        toml::to_string(&manifest).map_err(|e| Error::Config(e.to_string()))?,
    )?;

    let next = AtomicUsize::new(0);
    let abort = AtomicBool::new(false);
    let results: Mutex<Vec<Option<Result<RunSummary>>>> = Mutex::new((0..cells.len()).map(|_| None).collect());
    let total = cells.len();
    std::thread::scope(|s| {
        for _ in 0..jobs.max(1) {
            s.spawn(|| loop {
                if abort.load(Ordering::SeqCst) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= total {
                    break;
                }
                let cell = &cells[i];
                let label = format!("cells/{}", cell.dir_name());
                let say = |stage: &str| {
                    if !quiet {
                        eprintln!("[{}/{total}] {} {stage}", i + 1, cell.dir_name());
                    }
                };
                let r = execute(&prepared[i], &out.join(&label), cache, &label, &cell.axes(), &say);
                if r.is_err() {
                    abort.store(true, Ordering::SeqCst);
                }
                results.lock().expect("results lock")[i] = Some(r);
            });
        }
    });

    let mut rows = Vec::new();
    let mut first_err = None;
    for (cell, r) in cells.iter().zip(results.into_inner().expect("results lock")) {
        match r {
            Some(Ok(row)) => rows.push(row),
            other => {
                if let Some(Err(e)) = other {
                    first_err.get_or_insert(e);
                }
                let label = format!("cells/{}", cell.dir_name());
                let path = out.join(&label).join(SUMMARY_FILE);
                let row = export::read_summary(&path).unwrap_or_else(|_| RunSummary {
                    run: label,
                    missing: "all".into(),
                    seed: cell.seed,
                    axes: cell.axes(),
                    build_id: crate::build_id().into(),
                    ..RunSummary::default()
                });
                rows.push(row);
            }
        }
    }
    fs::write(out.join(RESULTS_FILE), export::to_csv(&rows)?)?;
    match first_err {
        Some(e) => Err(e),
        None => Ok(rows),
    }
}
