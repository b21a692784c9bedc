//! Library side of the `semisup` command: config resolution, plan
//! validation, execution, sweeps and export.

pub mod config;
pub mod exec;
pub mod export;
pub mod plan;
pub mod sweep;

use std::fs;
use std::path::{Path, PathBuf};

use semisup::data::SyntheticSpec;
use semisup::verify::{gradient_suite, CheckOutcome};
use semisup::{Error, Result};

use config::ExperimentConfig;
use exec::{execute, Cache, RunSummary, SUMMARY_FILE};

/// `v<version>-g<commit>` of the build, `-dirty` when the tree had changes.
pub fn build_id() -> &'static str {
    env!("SEMISUP_BUILD_ID")
}

pub struct RunArgs<'a> {
    pub config: Option<&'a Path>,
    pub set: &'a [String],
    pub seed: Option<u64>,
    pub out: Option<&'a Path>,
    pub quiet: bool,
}

fn overrides(set: &[String], seed: Option<u64>) -> Vec<String> {
    let mut all = set.to_vec();
    if let Some(s) = seed {
        all.push(format!("run.seed={s}"));
    }
    all
}

/// Loads the config and validates the full chain without training.
/// Returns the prepared run and its output directory.
pub fn prepare_run(args: &RunArgs) -> Result<(plan::Prepared, PathBuf)> {
    let cfg = ExperimentConfig::load(args.config, &overrides(args.set, args.seed))?;
    let prep = plan::prepare(&cfg)?;
    let out = match args.out {
        Some(p) => p.to_path_buf(),
        None => PathBuf::from("runs").join(&prep.config.hash()[..12]),
    };
    if out.join(SUMMARY_FILE).exists() {
        return Err(Error::Config(format!(
            "{} already holds a run; choose another --out",
            out.display()
        )));
    }
    Ok((prep, out))
}

/// Validates the full chain, then runs it into the output directory.
/// Returns the summary row and the directory used.
pub fn cmd_run(args: &RunArgs) -> Result<(RunSummary, PathBuf)> {
    let (prep, out) = prepare_run(args)?;
    let quiet = args.quiet;
    let say = |stage: &str| {
        if !quiet {
            eprintln!("{stage}");
        }
    };
    let row = execute(&prep, &out, &Cache::default(), ".", "", &say)?;
    fs::write(
        out.join(sweep::RESULTS_FILE),
        export::to_csv(std::slice::from_ref(&row))?,
    )?;
    Ok((row, out))
}

pub struct SweepArgs<'a> {
    pub config: Option<&'a Path>,
    pub set: &'a [String],
    /// A built-in grid name or a sweep file.
    pub grid: &'a str,
    pub seeds: Option<Vec<u64>>,
    pub out: &'a Path,
    pub jobs: usize,
    pub quiet: bool,
}

pub fn load_sweep(grid: &str) -> Result<sweep::SweepSpec> {
    if sweep::BUILTIN.contains(&grid) {
        sweep::SweepSpec::builtin(grid)
    } else {
        sweep::SweepSpec::load(Path::new(grid))
    }
}

pub fn cmd_sweep(args: &SweepArgs, cache: &Cache) -> Result<Vec<RunSummary>> {
    let mut spec = load_sweep(args.grid)?;
    if let Some(s) = &args.seeds {
        spec.seeds = s.clone();
    }
    let mut base = match args.config {
        Some(p) => config::read_table(p)?,
        None => toml::Table::new(),
    };
    for o in args.set {
        let (k, v) = config::parse_override(o)?;
        config::set_key(&mut base, &k, v)?;
    }
    sweep::run_sweep(&base, &spec, args.out, args.jobs, cache, args.quiet)
}

/// Collects every run under `dir` and renders it. Incomplete runs are kept
/// and flagged by the `complete` and `missing` columns.
pub fn cmd_export(dir: &Path, view: export::View, format: export::Format) -> Result<(String, Vec<RunSummary>)> {
    let rows = export::collect(dir)?;
    let text = export::render(&rows, view, format)?;
    let partial = export::incomplete(&rows).into_iter().cloned().collect();
    Ok((text, partial))
}

pub fn cmd_grad_check(instances: usize, seed: u64) -> Result<Vec<CheckOutcome>> {
    gradient_suite(instances, seed)
}

/// Writes `train.ssds` and `test.ssds` for a `blobs:` spec into `out`.
pub fn cmd_dataset_gen(spec: &str, out: &Path) -> Result<[PathBuf; 2]> {
    let spec: SyntheticSpec = spec.parse()?;
    let (train, test) = spec.generate()?;
    fs::create_dir_all(out)?;
    let paths = [out.join("train.ssds"), out.join("test.ssds")];
    train.save(&paths[0])?;
    test.save(&paths[1])?;
    Ok(paths)
}
