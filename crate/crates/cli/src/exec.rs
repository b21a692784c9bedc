//! Executes a prepared run, writing checkpoints, metrics and a summary row.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use semisup::pipeline::{content_hash, distill, finetune, linear_eval, pretrain, supervised, Checkpoint, StageOutput};
use semisup::{Error, Result};

use crate::build_id;
use crate::plan::{Prepared, PretrainSource, TeacherSource};

pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_FILE: &str = "config.resolved.toml";
pub const PLAN_FILE: &str = "plan.json";

/// Per-key memo; concurrent callers of one key wait for a single computation.
pub struct Memo<T> {
    slots: Mutex<HashMap<String, Arc<Mutex<Option<T>>>>>,
}

impl<T> Default for Memo<T> {
    fn default() -> Self {
        Self {
            slots: Mutex::new(HashMap::new()),
        }
    }
}

impl<T: Clone> Memo<T> {
    pub fn get_or_try(&self, key: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let slot = {
            let mut slots = self.slots.lock().expect("memo lock");
            slots.entry(key.to_string()).or_default().clone()
        };
        let mut guard = slot.lock().expect("memo slot lock");
        if let Some(v) = guard.as_ref() {
            return Ok(v.clone());
        }
        let v = f()?;
        *guard = Some(v.clone());
        Ok(v)
    }
}

/// Stage results shared between runs of one process.
#[derive(Default)]
pub struct Cache {
    stages: Memo<Arc<StageOutput>>,
    probes: Memo<f64>,
}

/// One results row. Field order is the export column order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run: String,
    pub complete: bool,
    /// Stages not yet finished, `;`-separated.
    pub missing: String,
    pub seed: u64,
    pub config_hash: String,
    pub build_id: String,
    /// Sweep axis assignments, `key=value;...`.
    pub axes: String,
    pub data: String,
    pub encoder: String,
    pub width: f64,
    pub depth: usize,
    pub head_layers: usize,
    pub use_queue: bool,
    pub label_fraction: Option<f64>,
    pub from_layer: Option<usize>,
    pub distill_alpha: Option<f64>,
    pub distill_temperature: Option<f64>,
    pub student_width: Option<f64>,
    pub pretrain_loss_first: Option<f64>,
    pub pretrain_loss_last: Option<f64>,
    pub linear_eval_top1: Option<f64>,
    pub finetune_top1: Option<f64>,
    pub supervised_top1: Option<f64>,
    pub self_distill_top1: Option<f64>,
    pub distill_top1: Option<f64>,
    /// Loss-trace files, `;`-separated, relative to the run directory.
    pub loss_traces: String,
}

fn io(e: std::io::Error, path: &Path) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| io(e, path))
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

struct Writer<'a> {
    dir: &'a Path,
    summary: RunSummary,
    pending: Vec<&'static str>,
}

impl Writer<'_> {
    fn flush(&self) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.summary).expect("summary serializes");
        write(&self.dir.join(SUMMARY_FILE), json)
    }

    fn stage(&mut self, name: &'static str, out: &StageOutput) -> Result<()> {
        out.checkpoint.save(&self.dir.join(format!("{name}.ck")))?;
        write(&self.dir.join(format!("{name}.metrics.csv")), out.log.to_csv())?;
        write(&self.dir.join(format!("{name}.timing.csv")), out.log.timing_csv())?;
        let mut trace = String::from("step,loss\n");
        for (i, v) in out.loss_trace.iter().enumerate() {
            writeln!(trace, "{},{v}", i + 1).expect("string write");
        }
        let file = format!("{name}.loss.csv");
        write(&self.dir.join(&file), trace)?;
        if !self.summary.loss_traces.is_empty() {
            self.summary.loss_traces.push(';');
        }
        self.summary.loss_traces.push_str(&file);
        Ok(())
    }

    fn done(&mut self, name: &'static str) -> Result<()> {
        self.pending.retain(|p| *p != name);
        self.summary.missing = self.pending.join(";");
        self.summary.complete = self.pending.is_empty();
        self.flush()
    }
}

fn stage_key(parts: &impl Serialize) -> String {
    content_hash(parts)
}

fn checkpoint_key(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| io(e, path))?;
    Ok(content_hash(&(
        path.display().to_string(),
        bytes.len(),
        &bytes[bytes.len().saturating_sub(32)..],
    )))
}

/// Runs every stage of `prep` into `dir`, reusing `cache` for stages whose
/// inputs match an earlier run. `label` and `axes` fill the provenance columns.
pub fn execute(
    prep: &Prepared,
    dir: &Path,
    cache: &Cache,
    label: &str,
    axes: &str,
    log: &dyn Fn(&str),
) -> Result<RunSummary> {
    fs::create_dir_all(dir).map_err(|e| io(e, dir))?;
    let cfg = &prep.config;
    let plan = &prep.plan;
    write(&dir.join(CONFIG_FILE), cfg.to_toml())?;
    write(
        &dir.join(PLAN_FILE),
        serde_json::to_string_pretty(plan).expect("plan serializes"),
    )?;
    let (train, test) = (&prep.train, &prep.test);
    let mut pending = Vec::new();
    if plan.pretrain.is_some() {
        pending.push("pretrain");
    }
    for (on, name) in [
        (plan.linear_eval.is_some(), "lineareval"),
        (plan.finetune.is_some(), "finetune"),
        (plan.supervised.is_some(), "supervised"),
        (plan.distill.is_some(), "distill"),
    ] {
        if on {
            pending.push(name);
        }
    }
    let mut w = Writer {
        dir,
        summary: RunSummary {
            run: label.to_string(),
            complete: pending.is_empty(),
            missing: pending.join(";"),
            seed: cfg.run.seed,
            config_hash: cfg.hash(),
            build_id: build_id().to_string(),
            axes: axes.to_string(),
            data: cfg.data.source.clone(),
            encoder: serde_json::to_value(cfg.network.encoder)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_default(),
            width: cfg.network.width,
            depth: cfg.network.depth,
            head_layers: cfg.network.head_layers,
            use_queue: cfg.pretrain.use_queue,
            label_fraction: (plan.finetune.is_some() || plan.supervised.is_some())
                .then_some(cfg.finetune.label_fraction),
            from_layer: plan
                .finetune
                .as_ref()
                .or(plan.supervised.as_ref())
                .map(|f| f.resolved_from_layer()),
            distill_alpha: plan.distill.as_ref().map(|d| d.hops[d.hops.len() - 1].alpha),
            distill_temperature: None,
            student_width: plan.distill.as_ref().and(cfg.distill.student_width),
            ..RunSummary::default()
        },
        pending,
    };
    w.flush()?;

    let pretrained = match &plan.pretrain {
        Some(PretrainSource::Train(p)) => {
            let key = stage_key(&("pretrain", &plan.data, p));
            let out = cache.stages.get_or_try(&key, || {
                log("pretrain");
                pretrain(p, train).map(Arc::new)
            })?;
            w.stage("pretrain", &out)?;
            let k = (out.loss_trace.len() / 10).max(1);
            w.summary.pretrain_loss_first = Some(mean(&out.loss_trace[..k]));
            w.summary.pretrain_loss_last = Some(mean(&out.loss_trace[out.loss_trace.len() - k..]));
            w.done("pretrain")?;
            Some((key, out.checkpoint.clone()))
        }
        Some(PretrainSource::Checkpoint(path)) => {
            let ck = Checkpoint::load(path)?;
            w.done("pretrain")?;
            Some((checkpoint_key(path)?, ck))
        }
        None => None,
    };

    if let (Some(le), Some((pkey, ck))) = (&plan.linear_eval, &pretrained) {
        let key = stage_key(&("lineareval", &plan.data, pkey, le));
        let top1 = cache.probes.get_or_try(&key, || {
            log("lineareval");
            linear_eval(&ck.network, le.layer, train, test, &le.probe)
        })?;
        w.summary.linear_eval_top1 = Some(top1);
        w.done("lineareval")?;
    }

    let mut teacher = None;
    if let (Some(fp), Some((pkey, ck))) = (&plan.finetune, &pretrained) {
        let key = stage_key(&("finetune", &plan.data, pkey, fp));
        let out = cache.stages.get_or_try(&key, || {
            log("finetune");
            finetune(fp, ck, train, test).map(Arc::new)
        })?;
        w.stage("finetune", &out)?;
        w.summary.finetune_top1 = out.top1;
        w.done("finetune")?;
        teacher = Some((key, out.checkpoint.clone()));
    }

    if let Some(sp) = &plan.supervised {
        let key = stage_key(&("supervised", &plan.data, &plan.network, sp));
        let out = cache.stages.get_or_try(&key, || {
            log("supervised");
            supervised(sp, &plan.network, train, test).map(Arc::new)
        })?;
        w.stage("supervised", &out)?;
        w.summary.supervised_top1 = out.top1;
        w.done("supervised")?;
    }

    if let Some(chain) = &plan.distill {
        let (mut tkey, mut tck) = match &chain.teacher {
            TeacherSource::Checkpoint(path) => (checkpoint_key(path)?, Checkpoint::load(path)?),
            TeacherSource::Finetune => teacher
                .clone()
                .ok_or_else(|| Error::Contract("finetune teacher missing after a validated plan".into()))?,
        };
        let last = chain.hops.len() - 1;
        for (i, hop) in chain.hops.iter().enumerate() {
            let name = if i < last { "selfdistill" } else { "distill" };
            let key = stage_key(&("distill", &plan.data, &tkey, hop));
            let out = cache.stages.get_or_try(&key, || {
                log(name);
                distill(hop, &tck, train, test).map(Arc::new)
            })?;
            w.stage(name, &out)?;
            let tau = hop.resolved_temperature(tck.network.spec());
            if i < last {
                w.summary.self_distill_top1 = out.top1;
            } else {
                w.summary.distill_top1 = out.top1;
                w.summary.distill_temperature = Some(tau);
            }
            tkey = key;
            tck = out.checkpoint.clone();
        }
        w.done("distill")?;
    }
    Ok(w.summary)
}
