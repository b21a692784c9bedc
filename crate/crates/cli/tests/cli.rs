use std::fs;
use std::path::Path;
use std::process::Command;

use proptest::prelude::*;

use semisup::data::{DataSource, Split};
use semisup_cli::config::{parse_override, ExperimentConfig};
use semisup_cli::exec::{Cache, RunSummary, SUMMARY_FILE};
use semisup_cli::export::{self, CorrelationRow, Format, View};
use semisup_cli::sweep::{SweepSpec, RESULTS_FILE};
use semisup_cli::{RunArgs, SweepArgs};

const TINY: &[&str] = &[
    "data.source=blobs:3:8x8x1:90/45:5",
    "network.output_dim=16",
    "network.width=0.5",
    "pretrain.epochs=2",
    "pretrain.batch_size=32",
    "lineareval.epochs=2",
    "finetune.epochs=3",
    "finetune.label_fraction=0.2",
    "finetune.batch_size=16",
    "distill.epochs=1",
];

fn tiny(extra: &[&str]) -> Vec<String> {
    TINY.iter().chain(extra).map(|s| s.to_string()).collect()
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_semisup"))
}

fn run_in(dir: &Path, set: &[String]) -> RunSummary {
    semisup_cli::cmd_run(&RunArgs {
        config: None,
        set,
        seed: None,
        out: Some(dir),
        quiet: true,
    })
    .unwrap()
    .0
}

#[test]
fn set_overrides_exactly_one_key() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("exp.toml");
    fs::write(&path, "[finetune]\nlabel_fraction = 0.5\nbatch_size = 32\n").unwrap();
    let set = vec!["finetune.label_fraction=0.01".to_string()];
    let cfg = ExperimentConfig::load(Some(&path), &set).unwrap();
    let mut expected = ExperimentConfig::default();
    expected.finetune.label_fraction = 0.01;
    expected.finetune.batch_size = 32;
    assert_eq!(cfg, expected);
}

#[test]
fn override_values_parse_as_toml_literals() {
    assert_eq!(parse_override("a.b=3").unwrap().1, toml::Value::Integer(3));
    assert_eq!(parse_override("a.b=true").unwrap().1, toml::Value::Boolean(true));
    assert_eq!(parse_override("a.b = 0.5").unwrap().1, toml::Value::Float(0.5));
    assert_eq!(
        parse_override("a.b=x.ssds,y.ssds").unwrap().1,
        toml::Value::String("x.ssds,y.ssds".into())
    );
    assert!(parse_override("novalue").is_err());
}

#[test]
fn unknown_key_is_a_config_error_listing_valid_keys() {
    let out = bin()
        .args(["run", "--dry-run", "--set", "finetune.label_fractoin=0.1"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("label_fractoin"), "{err}");
    assert!(err.contains("label_fraction") && err.contains("from_layer"), "{err}");
}

#[test]
fn missing_teacher_fails_before_any_training() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("run");
    let mut cmd = bin();
    cmd.args(["run", "-q", "--out"]).arg(&out_dir);
    for s in tiny(&["distill.enabled=true", "distill.teacher=/nonexistent/teacher.ck"]) {
        cmd.args(["--set", &s]);
    }
    let out = cmd.output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("teacher"));
    assert!(!out_dir.exists());
}

#[test]
fn invalid_from_layer_fails_before_any_training() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("run");
    let set = tiny(&["finetune.from_layer=3"]);
    let r = semisup_cli::cmd_run(&RunArgs {
        config: None,
        set: &set,
        seed: None,
        out: Some(&out_dir),
        quiet: true,
    });
    assert!(matches!(r, Err(semisup::Error::Config(_))));
    assert!(!out_dir.exists());
}

#[test]
fn bad_data_exits_with_data_code() {
    let tmp = tempfile::tempdir().unwrap();
    let train = tmp.path().join("train.ssds");
    fs::write(&train, b"not a dataset").unwrap();
    let src = format!("data.source={},{}", train.display(), train.display());
    let out = bin().args(["run", "--dry-run", "--set", &src]).output().unwrap();
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn identical_invocations_write_identical_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let set = tiny(&["supervised.enabled=true", "distill.enabled=true"]);
    let a = run_in(&tmp.path().join("a"), &set);
    let b = run_in(&tmp.path().join("b"), &set);
    assert_eq!(a, b);
    assert!(a.complete);
    for name in ["pretrain", "finetune", "supervised", "distill"] {
        for ext in ["metrics.csv", "loss.csv", "ck"] {
            let f = format!("{name}.{ext}");
            assert_eq!(
                fs::read(tmp.path().join("a").join(&f)).unwrap(),
                fs::read(tmp.path().join("b").join(&f)).unwrap(),
                "{f}"
            );
        }
    }
    assert_eq!(
        fs::read(tmp.path().join("a").join(RESULTS_FILE)).unwrap(),
        fs::read(tmp.path().join("b").join(RESULTS_FILE)).unwrap()
    );
}

#[test]
fn resolved_manifest_reproduces_the_run_config() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("r");
    let row = run_in(&dir, &tiny(&["lineareval.enabled=false"]));
    let manifest = dir.join("config.resolved.toml");
    let cfg = ExperimentConfig::load(Some(&manifest), &[]).unwrap();
    assert_eq!(cfg.resolved(), cfg);
    assert_eq!(cfg.hash(), row.config_hash);
    assert_eq!(row.seed, cfg.run.seed);
    assert_eq!(row.build_id, semisup_cli::build_id());
}

#[test]
fn run_refuses_to_overwrite_a_finished_run() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("r");
    let set = tiny(&["lineareval.enabled=false", "finetune.enabled=false"]);
    run_in(&dir, &set);
    let again = semisup_cli::cmd_run(&RunArgs {
        config: None,
        set: &set,
        seed: None,
        out: Some(&dir),
        quiet: true,
    });
    assert!(matches!(again, Err(semisup::Error::Config(_))));
}

#[test]
fn seed_flag_overrides_config_seed() {
    let set = tiny(&["run.seed=9"]);
    let (prep, _) = semisup_cli::prepare_run(&RunArgs {
        config: None,
        set: &set,
        seed: Some(4),
        out: Some(Path::new("unused")),
        quiet: true,
    })
    .unwrap();
    assert_eq!(prep.config.run.seed, 4);
}

#[test]
fn builtin_grids_have_the_expected_shapes() {
    let n = |g: &str| SweepSpec::builtin(g).unwrap().cells().unwrap().len();
    assert_eq!(n("size"), 2 * 3 * 3);
    assert_eq!(n("memory"), 2 * 3 * 3);
    assert_eq!(n("head"), (2 + 3 + 4) * 3 * 3);
    assert_eq!(n("distill"), 3 * 3 * 3);

    let cells = SweepSpec::builtin("distill").unwrap().cells().unwrap();
    let mut pairs: Vec<(String, String)> = cells
        .iter()
        .map(|c| (c.assignments[1].1.to_string(), c.assignments[2].1.to_string()))
        .collect();
    pairs.dedup();
    assert_eq!(pairs.len(), 9);
    assert!(pairs.contains(&("0.5".into(), "2.0".into())));

    let head = SweepSpec::builtin("head").unwrap().cells().unwrap();
    for c in &head {
        let l = c.assignments[0].1.as_integer().unwrap();
        let k = c.assignments[1].1.as_integer().unwrap();
        assert!(k < l);
    }
    assert!(SweepSpec::builtin("nope").is_err());
}

fn axis_values() -> impl Strategy<Value = Vec<Vec<i64>>> {
    prop::collection::vec(prop::collection::vec(0i64..100, 1..4), 1..4)
}

proptest! {
    #[test]
    fn sweep_enumeration_is_the_ordered_cartesian_product(
        axes in axis_values(),
        seeds in prop::collection::vec(0u64..50, 1..4),
    ) {
        let mut grid = toml::Table::new();
        for (i, vals) in axes.iter().enumerate() {
            grid.insert(
                format!("k{i}"),
                toml::Value::Array(vals.iter().map(|&v| toml::Value::Integer(v)).collect()),
            );
        }
        let spec = SweepSpec { seeds: seeds.clone(), grid: vec![grid] };
        let cells = spec.cells().unwrap();
        let total: usize = axes.iter().map(Vec::len).product();
        prop_assert_eq!(cells.len(), total * seeds.len());

        let reparsed = SweepSpec::parse(&toml::to_string(&spec).unwrap()).unwrap();
        prop_assert_eq!(&reparsed.cells().unwrap(), &cells);

        for (n, cell) in cells.iter().enumerate() {
            prop_assert_eq!(cell.index, n / seeds.len());
            prop_assert_eq!(cell.seed, seeds[n % seeds.len()]);
            let mut rest = cell.index;
            for (i, vals) in axes.iter().enumerate().rev() {
                prop_assert_eq!(&cell.assignments[i].0, &format!("k{i}"));
                prop_assert_eq!(cell.assignments[i].1.as_integer(), Some(vals[rest % vals.len()]));
                rest /= vals.len();
            }
        }
    }
}

fn tiny_sweep(out: &Path, jobs: usize, cache: &Cache) -> semisup::Result<Vec<RunSummary>> {
    let tmp_grid = out.with_extension("toml");
    fs::write(
        &tmp_grid,
        "seeds = [1, 2]\n[[grid]]\n\"finetune.from_layer\" = [0, 1]\n\"pretrain.use_queue\" = [false, true]\n",
    )
    .unwrap();
    let set = tiny(&["lineareval.enabled=false"]);
    semisup_cli::cmd_sweep(
        &SweepArgs {
            config: None,
            set: &set,
            grid: tmp_grid.to_str().unwrap(),
            seeds: None,
            out,
            jobs,
            quiet: true,
        },
        cache,
    )
}

#[test]
fn sweep_rows_follow_enumeration_order_and_carry_provenance() {
    let tmp = tempfile::tempdir().unwrap();
    let serial = tiny_sweep(&tmp.path().join("serial"), 1, &Cache::default()).unwrap();
    let parallel = tiny_sweep(&tmp.path().join("parallel"), 3, &Cache::default()).unwrap();
    assert_eq!(serial, parallel);
    assert_eq!(serial.len(), 8);
    let names: Vec<&str> = serial.iter().map(|r| r.run.as_str()).collect();
    assert_eq!(names[..3], ["cells/c000-s1", "cells/c000-s2", "cells/c001-s1"]);
    for r in &serial {
        assert!(r.complete);
        assert!(r.finetune_top1.is_some());
        assert!(!r.config_hash.is_empty() && !r.build_id.is_empty());
        assert!(r.axes.starts_with("finetune.from_layer="));
        for trace in r.loss_traces.split(';') {
            assert!(tmp.path().join("serial").join(&r.run).join(trace).is_file());
        }
    }
    assert_eq!(serial[2].axes, "finetune.from_layer=0;pretrain.use_queue=true");
    assert!(serial[2].use_queue);
    let table: Vec<RunSummary> =
        export::read_csv(&fs::read_to_string(tmp.path().join("serial").join(RESULTS_FILE)).unwrap()).unwrap();
    assert_eq!(table, serial);
}

#[test]
fn sweep_refuses_to_clobber_an_output_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("sw");
    fs::create_dir_all(&out).unwrap();
    fs::write(out.join("keep.txt"), "x").unwrap();
    let r = tiny_sweep(&out, 1, &Cache::default());
    assert!(matches!(r, Err(semisup::Error::Config(_))));
    assert_eq!(fs::read_dir(&out).unwrap().count(), 1);
}

#[test]
fn sweep_validates_every_cell_before_running() {
    let tmp = tempfile::tempdir().unwrap();
    let grid = tmp.path().join("g.toml");
    fs::write(&grid, "seeds = [1]\n[[grid]]\n\"finetune.from_layer\" = [0, 7]\n").unwrap();
    let out = tmp.path().join("sw");
    let set = tiny(&[]);
    let r = semisup_cli::cmd_sweep(
        &SweepArgs {
            config: None,
            set: &set,
            grid: grid.to_str().unwrap(),
            seeds: None,
            out: &out,
            jobs: 1,
            quiet: true,
        },
        &Cache::default(),
    );
    assert!(
        matches!(r, Err(semisup::Error::Config(ref m)) if m.contains("c001")),
        "{r:?}"
    );
    assert!(!out.exists());
}

fn sample_rows() -> Vec<RunSummary> {
    vec![
        RunSummary {
            run: "cells/c000-s1".into(),
            complete: true,
            seed: 1,
            config_hash: "ab".repeat(32),
            build_id: "v0.1.0-g0123456789ab".into(),
            axes: "network.width=2.0;finetune.label_fraction=0.01".into(),
            data: "a.ssds,b.ssds".into(),
            encoder: "mlp".into(),
            width: 2.0,
            depth: 2,
            head_layers: 3,
            label_fraction: Some(0.01),
            from_layer: Some(1),
            pretrain_loss_first: Some(4.143134726391533),
            pretrain_loss_last: Some(0.1 + 0.2),
            linear_eval_top1: Some(0.8765),
            finetune_top1: Some(1.0 / 3.0),
            loss_traces: "pretrain.loss.csv;finetune.loss.csv".into(),
            ..RunSummary::default()
        },
        RunSummary {
            run: "cells/c001-s1".into(),
            complete: false,
            missing: "finetune;distill".into(),
            seed: 18446744073709551615,
            distill_alpha: Some(0.5),
            distill_temperature: Some(f64::MIN_POSITIVE),
            width: 1e-300,
            ..RunSummary::default()
        },
    ]
}

#[test]
fn csv_round_trips_bit_identically() {
    let rows = sample_rows();
    let text = export::to_csv(&rows).unwrap();
    assert!(text.starts_with(&format!("# schema: {}\n", export::SCHEMA)));
    let back: Vec<RunSummary> = export::read_csv(&text).unwrap();
    assert_eq!(back, rows);
    for (a, b) in back.iter().zip(&rows) {
        assert_eq!(a.finetune_top1.map(f64::to_bits), b.finetune_top1.map(f64::to_bits));
        assert_eq!(a.width.to_bits(), b.width.to_bits());
    }
    assert_eq!(export::to_csv(&back).unwrap(), text);
    assert!(export::read_csv::<RunSummary>(&text.replacen("/1", "/0", 1)).is_err());
}

#[test]
fn column_order_is_stable() {
    let text = export::to_csv(&[]).unwrap();
    let header = text.lines().nth(1).unwrap();
    assert!(header.starts_with("run,complete,missing,seed,config_hash,build_id,axes,"));
    let cols: Vec<&str> = header.split(',').collect();
    let pos = |c: &str| cols.iter().position(|x| *x == c).unwrap();
    assert!(pos("linear_eval_top1") < pos("finetune_top1"));
    assert_eq!(export::to_csv(&sample_rows()).unwrap().lines().nth(1).unwrap(), header);
}

fn write_summaries(root: &Path, rows: &[RunSummary]) {
    for r in rows {
        let dir = root.join(&r.run);
        fs::create_dir_all(&dir).unwrap();
        fs::write(dir.join(SUMMARY_FILE), serde_json::to_string(r).unwrap()).unwrap();
    }
}

#[test]
fn empty_results_dir_exports_header_only() {
    let tmp = tempfile::tempdir().unwrap();
    let (text, partial) = semisup_cli::cmd_export(tmp.path(), View::Runs, Format::Csv).unwrap();
    assert_eq!(text.lines().count(), 2);
    assert!(partial.is_empty());
    assert!(export::read_csv::<RunSummary>(&text).unwrap().is_empty());
    let (corr, _) = semisup_cli::cmd_export(tmp.path(), View::Correlation, Format::Csv).unwrap();
    assert_eq!(corr.lines().count(), 2);
}

#[test]
fn correlation_export_pairs_probe_and_finetune_columns() {
    let tmp = tempfile::tempdir().unwrap();
    let rows = sample_rows();
    write_summaries(tmp.path(), &rows);
    let (text, _) = semisup_cli::cmd_export(tmp.path(), View::Correlation, Format::Csv).unwrap();
    let header: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    for c in ["seed", "config_hash", "build_id", "linear_eval_top1", "finetune_top1"] {
        assert!(header.contains(&c), "{c}");
    }
    let back: Vec<CorrelationRow> = export::read_csv(&text).unwrap();
    assert_eq!(back.len(), 2);
    assert_eq!(back[0].linear_eval_top1, Some(0.8765));
    assert_eq!(back[0].finetune_top1, Some(1.0 / 3.0));
}

#[test]
fn incomplete_runs_are_flagged_in_export() {
    let tmp = tempfile::tempdir().unwrap();
    write_summaries(tmp.path(), &sample_rows());
    let (text, partial) = semisup_cli::cmd_export(tmp.path(), View::Runs, Format::Csv).unwrap();
    assert_eq!(partial.len(), 1);
    assert_eq!(partial[0].run, "cells/c001-s1");
    let back: Vec<RunSummary> = export::read_csv(&text).unwrap();
    assert_eq!(back, sample_rows());
    assert!(!back[1].complete && back[1].missing == "finetune;distill");

    let out = bin().arg("export").arg(tmp.path()).output().unwrap();
    assert!(out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("partial export") && err.contains("cells/c001-s1"), "{err}");

    let (json, _) = semisup_cli::cmd_export(tmp.path(), View::Runs, Format::Json).unwrap();
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(v["schema"], export::SCHEMA);
    assert_eq!(v["rows"][1]["complete"], false);
}

#[test]
fn dataset_gen_writes_a_loadable_pair() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = "blobs:4:6x6x3:40/12:9";
    let out = bin()
        .args(["dataset", "gen", "--spec", spec, "--out"])
        .arg(tmp.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    let files = DataSource::parse(&format!(
        "{},{}",
        tmp.path().join("train.ssds").display(),
        tmp.path().join("test.ssds").display()
    ))
    .unwrap()
    .load()
    .unwrap();
    let direct = DataSource::parse(spec).unwrap().load().unwrap();
    assert_eq!(files.0.split(), Split::Train);
    assert_eq!(files.0.len(), 40);
    assert_eq!(files.1.len(), 12);
    assert_eq!(files.0.shape(), [3, 6, 6]);
    for i in 0..40 {
        assert_eq!(files.0.pixels(i), direct.0.pixels(i));
    }
    assert_eq!(files.0.all_labels(), direct.0.all_labels());
}

#[test]
fn grad_check_command_passes() {
    let out = bin().args(["grad-check", "--instances", "3"]).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.lines().count() >= 26);
    assert!(!text.contains("FAIL"));
}
