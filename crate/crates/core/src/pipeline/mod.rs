//! Contrastive pretraining, fine-tuning, distillation and evaluation stages.

mod checkpoint;
mod eval;
mod metrics;

pub use checkpoint::{Checkpoint, Provenance};
pub use eval::{
    argmax_rows, evaluate_top1, extract_all_features, top1_from_logits, train_linear_probe, LinearProbe, ProbeSettings,
};
pub use metrics::{MetricLog, MetricRecord, CSV_HEADER};

use std::collections::BTreeMap;
use std::fmt;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{augment_batch, make_pair_batch, subsample_labels, AugmentKind, AugmentSpec, Dataset, LabelSplit};
use crate::error::{Error, Result};
use crate::losses::{
    combined_loss, cross_entropy, nt_xent, softmax_probs, ContrastiveConfig, DistillConfig, MemoryQueue,
};
use crate::nn::{param_groups, BnUpdates, EmaNetwork, Mode, Network, NetworkSpec};
use crate::optim::{Optimizer, OptimizerConfig, ScheduleSpec};
use crate::rng::Rng;
use crate::tensor::Graph;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Finetune,
    Distill,
    LinearEval,
    Supervised,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
            Stage::Distill => "distill",
            Stage::LinearEval => "lineareval",
            Stage::Supervised => "supervised",
        })
    }
}

/// Hex SHA-256 of a value's JSON encoding.
pub fn content_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("plain data serializes");
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Settings shared by every gradient-trained stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate is `lr_coefficient * sqrt(batch_size)`.
    pub lr_coefficient: f64,
    pub warmup_fraction: f64,
    pub optimizer: OptimizerConfig,
    pub augment: AugmentSpec,
    pub seed: u64,
    /// Evaluate on the test split every this many epochs; 0 = last epoch only.
    pub eval_every: usize,
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size < 2 {
            return Err(Error::Config("epochs must be >= 1 and batch_size >= 2".into()));
        }
        self.optimizer.validate()?;
        self.augment.validate()?;
        ScheduleSpec {
            base_coefficient: self.lr_coefficient,
            batch_size: self.batch_size,
            total_steps: 1,
            warmup_fraction: self.warmup_fraction,
        }
        .validate()
    }

    fn schedule(&self, pool: usize) -> ScheduleSpec {
        ScheduleSpec {
            base_coefficient: self.lr_coefficient,
            batch_size: self.batch_size,
            total_steps: self.epochs * batches_per_epoch(pool, self.batch_size),
            warmup_fraction: self.warmup_fraction,
        }
    }
}

fn batches_per_epoch(n: usize, bs: usize) -> usize {
    let full = n / bs;
    if full == 0 {
        1
    } else if n % bs >= 2 {
        full + 1
    } else {
        full
    }
}

/// Shuffled mini-batches of `pool`; a trailing single example joins the
/// previous batch so no batch is smaller than two.
fn epoch_batches(pool: &[usize], bs: usize, rng: &Rng) -> Vec<Vec<usize>> {
    let order = rng.clone().permutation(pool.len());
    let mut out: Vec<Vec<usize>> = order.chunks(bs).map(|c| c.iter().map(|&k| pool[k]).collect()).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
        let tail = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").extend(tail);
    }
    out
}

fn ensure_no_label_reads(ds: &Dataset, before: u64, stage: &str) -> Result<()> {
    let reads = ds.label_reads() - before;
    if reads > 0 {
        return Err(Error::Protocol(format!("{stage} read {reads} training labels")));
    }
    Ok(())
}

fn trainable_all(_: &str) -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainPlan {
    pub network: NetworkSpec,
    pub train: TrainSettings,
    pub contrastive: ContrastiveConfig,
    /// Decay of the shadow network that fills the queue.
    pub ema_decay: f64,
}

impl PretrainPlan {
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        if !self.network.has_full_head() {
            return Err(Error::Config("pretraining needs the complete projection head".into()));
        }
        self.train.validate()?;
        if self.train.augment.kind != AugmentKind::Pretrain {
            return Err(Error::Config(
                "pretraining uses the pretrain augmentation pipeline".into(),
            ));
        }
        self.contrastive.validate()?;
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!(
                "ema_decay must be in [0, 1], got {}",
                self.ema_decay
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct StageOutput {
    pub checkpoint: Checkpoint,
    pub log: MetricLog,
    /// Loss after every optimizer step.
    pub loss_trace: Vec<f64>,
    /// Test top-1 at the end, for classifier stages.
    pub top1: Option<f64>,
}

/// Task-agnostic contrastive pretraining on every training image. Reading
/// any label is a protocol violation.
pub fn pretrain(plan: &PretrainPlan, train: &Dataset) -> Result<StageOutput> {
    plan.validate()?;
    let start_reads = train.label_reads();
    let started = Instant::now();
    let s = &plan.train;
    let mut net = Network::new(plan.network.clone(), s.seed)?;
    let groups = param_groups(&net);
    let mut opt = Optimizer::new(s.optimizer.clone(), groups.excluded)?;
    let schedule = s.schedule(train.len());
    let cfg = &plan.contrastive;
    let mut ema = if cfg.use_queue {
        Some(EmaNetwork::new(&net, plan.ema_decay)?)
    } else {
        None
    };
    let out_dim = plan.network.head.output_dim;
    let mut queue = MemoryQueue::new(out_dim, if cfg.use_queue { cfg.queue_capacity } else { 0 });
    let root = Rng::new(s.seed);
    let pool: Vec<usize> = (0..train.len()).collect();
    let mut log = MetricLog::new();
    let mut trace = Vec::new();
    let mut step = 0;
    for epoch in 0..s.epochs {
        let batches = epoch_batches(&pool, s.batch_size, &root.split("shuffle").split_index(epoch as u64));
        let mut epoch_loss = 0.0;
        let mut lr = 0.0;
        for (b, idx) in batches.iter().enumerate() {
            let aug_rng = root.split("augment").split_index(epoch as u64).split_index(b as u64);
            let views = make_pair_batch(train, idx, &s.augment, &aug_rng)?;
            let mut g = Graph::<f32>::new();
            let bind = net.bind(&mut g, trainable_all);
            let x = g.constant(views.views.clone());
            let mut upd = BnUpdates::default();
            let z = net.embed(&mut g, &bind, x, Mode::Train, &mut upd)?;
            let q = ema.as_ref().map(|_| &queue);
            let loss = nt_xent(&mut g, z, &views.positives, cfg, q)?;
            let value = f64::from(g.value(loss).item());
            g.backward(loss)?;
            lr = schedule.lr_at(step as f64);
            opt.step(net.params_mut(), &bind.grads(&g), lr)?;
            net.apply_bn_updates(&upd);
            if let Some(ema) = ema.as_mut() {
                ema.update(&net)?;
                let shadow = ema.shadow();
                let mut sg = Graph::<f32>::new();
                let sb = shadow.bind(&mut sg, |_| false);
                let sx = sg.constant(views.views);
                let mut supd = BnUpdates::default();
                let sz = shadow.embed(&mut sg, &sb, sx, Mode::Train, &mut supd)?;
                queue.enqueue(sg.value(sz))?;
                ema.shadow_mut().apply_bn_updates(&supd);
            }
            trace.push(value);
            epoch_loss += value;
            step += 1;
        }
        log.push(MetricRecord {
            stage: Stage::Pretrain,
            epoch,
            step,
            lr,
            loss: epoch_loss / batches.len() as f64,
            top1: None,
            wall_time_s: started.elapsed().as_secs_f64(),
        })?;
    }
    ensure_no_label_reads(train, start_reads, "pretraining")?;
    let provenance = vec![Provenance {
        stage: Stage::Pretrain,
        plan_hash: content_hash(plan),
        seed: s.seed,
        epochs: s.epochs,
        label_fraction: None,
    }];
    Ok(StageOutput {
        checkpoint: Checkpoint::new(net, provenance),
        log,
        loss_trace: trace,
        top1: None,
    })
}

/// Supervised training on the labeled subset, from a pretrained network or
/// from scratch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetunePlan {
    /// Head layers kept under the task head; `None` picks 1 below 100%
    /// labels and 0 at 100%.
    pub from_layer: Option<usize>,
    pub label_fraction: f64,
    pub split_seed: u64,
    pub train: TrainSettings,
    /// Train only the task head on eval-mode features.
    pub freeze_pretrained: bool,
}

impl FinetunePlan {
    pub fn resolved_from_layer(&self) -> usize {
        self.from_layer
            .unwrap_or(if self.label_fraction >= 1.0 { 0 } else { 1 })
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.train.augment.kind != AugmentKind::Finetune {
            return Err(Error::Config(
                "fine-tuning uses the finetune augmentation pipeline".into(),
            ));
        }
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "label_fraction must be in (0, 1], got {}",
                self.label_fraction
            )));
        }
        Ok(())
    }

    /// The plan with fine-tuning's fixed choices: no weight decay, no warmup.
    pub fn normalized(&self) -> FinetunePlan {
        let mut p = self.clone();
        p.train.optimizer.weight_decay = 0.0;
        p.train.warmup_fraction = 0.0;
        p
    }
}

pub fn finetune(plan: &FinetunePlan, source: &Checkpoint, train: &Dataset, test: &Dataset) -> Result<StageOutput> {
    let plan = plan.normalized();
    plan.validate()?;
    let from_layer = plan.resolved_from_layer();
    let net = source
        .network
        .build_finetune_network(from_layer, train.num_classes(), plan.train.seed)?;
    let split = subsample_labels(train, plan.label_fraction, plan.split_seed)?;
    let mut provenance = source.provenance.clone();
    provenance.push(Provenance {
        stage: Stage::Finetune,
        plan_hash: content_hash(&plan),
        seed: plan.train.seed,
        epochs: plan.train.epochs,
        label_fraction: Some(plan.label_fraction),
    });
    train_supervised(Stage::Finetune, net, &plan, &split, train, test, provenance)
}

/// The fine-tuning procedure applied to a randomly initialized classifier
/// built from `spec` (encoder plus `from_layer` head layers).
pub fn supervised(plan: &FinetunePlan, spec: &NetworkSpec, train: &Dataset, test: &Dataset) -> Result<StageOutput> {
    let plan = plan.normalized();
    plan.validate()?;
    let cls = spec.classifier(plan.resolved_from_layer(), train.num_classes())?;
    let net = Network::new(cls, plan.train.seed)?;
    let split = subsample_labels(train, plan.label_fraction, plan.split_seed)?;
    let provenance = vec![Provenance {
        stage: Stage::Supervised,
        plan_hash: content_hash(&plan),
        seed: plan.train.seed,
        epochs: plan.train.epochs,
        label_fraction: Some(plan.label_fraction),
    }];
    train_supervised(Stage::Supervised, net, &plan, &split, train, test, provenance)
}

fn train_supervised(
    stage: Stage,
    mut net: Network,
    plan: &FinetunePlan,
    split: &LabelSplit,
    train: &Dataset,
    test: &Dataset,
    provenance: Vec<Provenance>,
) -> Result<StageOutput> {
    let started = Instant::now();
    let s = &plan.train;
    let freeze = plan.freeze_pretrained;
    let trainable = move |name: &str| !freeze || name.starts_with("task.");
    let mode = if freeze { Mode::Eval } else { Mode::Train };
    let mut opt = Optimizer::new(s.optimizer.clone(), param_groups(&net).excluded)?;
    let schedule = s.schedule(split.labeled.len());
    let root = Rng::new(s.seed);
    let mut log = MetricLog::new();
    let mut trace = Vec::new();
    let mut top1 = None;
    let mut step = 0;
    for epoch in 0..s.epochs {
        let batches = epoch_batches(
            &split.labeled,
            s.batch_size,
            &root.split("shuffle").split_index(epoch as u64),
        );
        let mut epoch_loss = 0.0;
        let mut lr = 0.0;
        for (b, idx) in batches.iter().enumerate() {
            let aug_rng = root.split("augment").split_index(epoch as u64).split_index(b as u64);
            let x = augment_batch(train, idx, &s.augment, &aug_rng);
            let labels = train.labels(idx);
            let mut g = Graph::<f32>::new();
            let bind = net.bind(&mut g, trainable);
            let xv = g.constant(x);
            let mut upd = BnUpdates::default();
            let logits = net.logits(&mut g, &bind, xv, mode, &mut upd)?;
            let loss = cross_entropy(&mut g, logits, &labels)?;
            let value = f64::from(g.value(loss).item());
            g.backward(loss)?;
            lr = schedule.lr_at(step as f64);
            opt.step(net.params_mut(), &bind.grads(&g), lr)?;
            net.apply_bn_updates(&upd);
            trace.push(value);
            epoch_loss += value;
            step += 1;
        }
        let last = epoch + 1 == s.epochs;
        let acc = if last || (s.eval_every > 0 && (epoch + 1) % s.eval_every == 0) {
            Some(evaluate_top1(&net, test)?)
        } else {
            None
        };
        if last {
            top1 = acc;
        }
        log.push(MetricRecord {
            stage,
            epoch,
            step,
            lr,
            loss: epoch_loss / batches.len() as f64,
            top1: acc,
            wall_time_s: started.elapsed().as_secs_f64(),
        })?;
    }
    Ok(StageOutput {
        checkpoint: Checkpoint::new(net, provenance),
        log,
        loss_trace: trace,
        top1,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StudentInit {
    Random,
    /// Start from the teacher's parameters (same architecture only).
    Teacher,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillPlan {
    /// Student classifier spec; `None` distills into the teacher's own
    /// architecture.
    pub student: Option<NetworkSpec>,
    /// `None` picks 0.1 for self-distillation and 1.0 otherwise.
    pub temperature: Option<f64>,
    pub alpha: f64,
    /// Needed only when `alpha < 1`.
    pub label_fraction: Option<f64>,
    pub split_seed: u64,
    pub train: TrainSettings,
    pub student_init: StudentInit,
    /// Run the student's batch norm on its running statistics.
    pub freeze_student_bn: bool,
}

pub const SELF_DISTILL_TEMPERATURE: f64 = 0.1;
pub const BIG_TO_SMALL_TEMPERATURE: f64 = 1.0;

impl DistillPlan {
    pub fn student_spec(&self, teacher: &NetworkSpec) -> NetworkSpec {
        self.student.clone().unwrap_or_else(|| teacher.clone())
    }

    pub fn resolved_temperature(&self, teacher: &NetworkSpec) -> f64 {
        self.temperature.unwrap_or(if &self.student_spec(teacher) == teacher {
            SELF_DISTILL_TEMPERATURE
        } else {
            BIG_TO_SMALL_TEMPERATURE
        })
    }

    pub fn validate(&self, teacher: &NetworkSpec) -> Result<()> {
        self.train.validate()?;
        if self.train.augment.kind != AugmentKind::Finetune {
            return Err(Error::Config(
                "distillation uses the finetune augmentation pipeline".into(),
            ));
        }
        let student = self.student_spec(teacher);
        student.validate()?;
        let (Some(tc), Some(sc)) = (teacher.task_classes, student.task_classes) else {
            return Err(Error::Config("teacher and student must both be classifiers".into()));
        };
        if tc != sc {
            return Err(Error::Config(format!("teacher has {tc} classes, student {sc}")));
        }
        if self.student_init == StudentInit::Teacher && &student != teacher {
            return Err(Error::Config(
                "student_init = teacher needs the teacher's architecture".into(),
            ));
        }
        DistillConfig {
            temperature: self.resolved_temperature(teacher),
            alpha: self.alpha,
        }
        .validate()?;
        if self.alpha < 1.0 && self.label_fraction.is_none() {
            return Err(Error::Config(
                "alpha < 1 needs a label_fraction for the supervised term".into(),
            ));
        }
        Ok(())
    }
}

/// Trains a student on the whole training pool against the frozen
/// teacher's softened predictions on the same augmented views.
pub fn distill(plan: &DistillPlan, teacher: &Checkpoint, train: &Dataset, test: &Dataset) -> Result<StageOutput> {
    let tspec = teacher.network.spec();
    plan.validate(tspec)?;
    let started = Instant::now();
    let start_reads = train.label_reads();
    let s = &plan.train;
    let cfg = DistillConfig {
        temperature: plan.resolved_temperature(tspec),
        alpha: plan.alpha,
    };
    let mut net = match plan.student_init {
        StudentInit::Random => Network::new(plan.student_spec(tspec), s.seed)?,
        StudentInit::Teacher => teacher.network.clone(),
    };
    let split = match plan.label_fraction {
        Some(f) if cfg.alpha < 1.0 => Some(subsample_labels(train, f, plan.split_seed)?),
        _ => None,
    };
    let mode = if plan.freeze_student_bn {
        Mode::Eval
    } else {
        Mode::Train
    };
    let mut opt = Optimizer::new(s.optimizer.clone(), param_groups(&net).excluded)?;
    let schedule = s.schedule(train.len());
    let root = Rng::new(s.seed);
    let pool: Vec<usize> = (0..train.len()).collect();
    let mut log = MetricLog::new();
    let mut trace = Vec::new();
    let mut top1 = None;
    let mut step = 0;
    for epoch in 0..s.epochs {
        let batches = epoch_batches(&pool, s.batch_size, &root.split("shuffle").split_index(epoch as u64));
        let labeled_batches = split.as_ref().map(|sp| {
            epoch_batches(
                &sp.labeled,
                s.batch_size,
                &root.split("labeled").split_index(epoch as u64),
            )
        });
        let mut epoch_loss = 0.0;
        let mut lr = 0.0;
        for (b, idx) in batches.iter().enumerate() {
            let aug_rng = root.split("augment").split_index(epoch as u64).split_index(b as u64);
            let x = augment_batch(train, idx, &s.augment, &aug_rng);
            let teacher_probs = softmax_probs(&teacher.network.predict(x.clone())?, cfg.temperature)?;
            let mut g = Graph::<f32>::new();
            let bind = net.bind(&mut g, trainable_all);
            let mut upd = BnUpdates::default();
            let xv = g.constant(x);
            let student_logits = net.logits(&mut g, &bind, xv, mode, &mut upd)?;
            let labeled = match &labeled_batches {
                Some(lb) => {
                    let lidx = &lb[b % lb.len()];
                    let lrng = root
                        .split("labeled-augment")
                        .split_index(epoch as u64)
                        .split_index(b as u64);
                    let lx = g.constant(augment_batch(train, lidx, &s.augment, &lrng));
                    Some((net.logits(&mut g, &bind, lx, mode, &mut upd)?, train.labels(lidx)))
                }
                None => None,
            };
            let loss = combined_loss(
                &mut g,
                labeled.as_ref().map(|(v, y)| (*v, y.as_slice())),
                student_logits,
                &teacher_probs,
                &cfg,
            )?;
            let value = f64::from(g.value(loss).item());
            g.backward(loss)?;
            lr = schedule.lr_at(step as f64);
            opt.step(net.params_mut(), &bind.grads(&g), lr)?;
            if mode == Mode::Train {
                net.apply_bn_updates(&upd);
            }
            trace.push(value);
            epoch_loss += value;
            step += 1;
        }
        let last = epoch + 1 == s.epochs;
        let acc = if last || (s.eval_every > 0 && (epoch + 1) % s.eval_every == 0) {
            Some(evaluate_top1(&net, test)?)
        } else {
            None
        };
        if last {
            top1 = acc;
        }
        log.push(MetricRecord {
            stage: Stage::Distill,
            epoch,
            step,
            lr,
            loss: epoch_loss / batches.len() as f64,
            top1: acc,
            wall_time_s: started.elapsed().as_secs_f64(),
        })?;
    }
    if cfg.alpha >= 1.0 {
        ensure_no_label_reads(train, start_reads, "label-free distillation")?;
    }
    let mut provenance = teacher.provenance.clone();
    provenance.push(Provenance {
        stage: Stage::Distill,
        plan_hash: content_hash(plan),
        seed: s.seed,
        epochs: s.epochs,
        label_fraction: split.as_ref().map(|sp| sp.fraction),
    });
    Ok(StageOutput {
        checkpoint: Checkpoint::new(net, provenance),
        log,
        loss_trace: trace,
        top1,
    })
}

/// Top-1 of a linear classifier trained with every training label on frozen
/// eval-mode features at head activation `layer` (0 = encoder output).
pub fn linear_eval(
    net: &Network,
    layer: usize,
    train: &Dataset,
    test: &Dataset,
    settings: &ProbeSettings,
) -> Result<f64> {
    let ftr = extract_all_features(net, train, layer)?;
    let fte = extract_all_features(net, test, layer)?;
    let probe = train_linear_probe(&ftr, &train.all_labels(), train.num_classes(), settings)?;
    probe.top1(&fte, &test.all_labels())
}

/// Parameter-name map of a network, for bit-exact before/after comparisons.
pub fn snapshot(net: &Network) -> BTreeMap<String, Vec<u32>> {
    net.params()
        .iter()
        .chain(net.buffers())
        .map(|(k, t)| (k.clone(), t.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

/// Augmentation spec for a stage.
pub fn default_augment(stage: Stage) -> AugmentSpec {
    match stage {
        Stage::Pretrain => AugmentSpec::pretrain(),
        _ => AugmentSpec::finetune(),
    }
}
