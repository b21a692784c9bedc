//! Turns a resolved config into validated stage plans before any training.

use std::path::PathBuf;

use serde::Serialize;

use semisup::data::{AugmentSpec, DataSource, Dataset};
use semisup::losses::ContrastiveConfig;
use semisup::nn::{EncoderKind, EncoderSpec, NetworkSpec};
use semisup::optim::{OptimizerConfig, OptimizerKind};
use semisup::pipeline::{Checkpoint, DistillPlan, FinetunePlan, PretrainPlan, ProbeSettings, TrainSettings};
use semisup::{Error, Result};

use crate::config::ExperimentConfig;

#[derive(Clone, Debug, Serialize)]
pub enum PretrainSource {
    Train(PretrainPlan),
    Checkpoint(PathBuf),
}

#[derive(Clone, Debug, Serialize)]
pub enum TeacherSource {
    Finetune,
    Checkpoint(PathBuf),
}

#[derive(Clone, Debug, Serialize)]
pub struct DistillChain {
    pub teacher: TeacherSource,
    /// Applied in order; each hop's student teaches the next.
    pub hops: Vec<DistillPlan>,
}

#[derive(Clone, Debug, Serialize)]
pub struct LinearEvalPlan {
    pub layer: usize,
    pub probe: ProbeSettings,
}

/// Every stage of one run, validated.
#[derive(Clone, Debug, Serialize)]
pub struct RunPlan {
    pub data: String,
    pub network: NetworkSpec,
    pub pretrain: Option<PretrainSource>,
    pub linear_eval: Option<LinearEvalPlan>,
    pub finetune: Option<FinetunePlan>,
    pub supervised: Option<FinetunePlan>,
    pub distill: Option<DistillChain>,
}

pub struct Prepared {
    pub config: ExperimentConfig,
    pub plan: RunPlan,
    pub train: Dataset,
    pub test: Dataset,
}

fn optimizer(kind: OptimizerKind, momentum: f64, weight_decay: f64, trust_coefficient: f64) -> OptimizerConfig {
    OptimizerConfig {
        kind,
        momentum,
        weight_decay,
        trust_coefficient,
    }
}

fn network_spec(
    kind: EncoderKind,
    depth: usize,
    width: f64,
    shape: [usize; 3],
    head_layers: usize,
    out: usize,
) -> NetworkSpec {
    let encoder = match kind {
        EncoderKind::Mlp => EncoderSpec::mlp(depth, width, shape),
        EncoderKind::SmallConv => EncoderSpec::small_conv(depth, width, shape),
    };
    NetworkSpec::pretraining(encoder, head_layers, out)
}

fn existing(path: &str, what: &str) -> Result<PathBuf> {
    let p = PathBuf::from(path);
    if !p.is_file() {
        return Err(Error::Config(format!("{what} `{path}` does not exist")));
    }
    Ok(p)
}

/// Resolves, loads data and validates the full chain.
pub fn prepare(config: &ExperimentConfig) -> Result<Prepared> {
    let cfg = config.resolved();
    let (train, test) = DataSource::parse(&cfg.data.source)?.load()?;
    let classes = train.num_classes();
    let n = &cfg.network;
    let network = network_spec(n.encoder, n.depth, n.width, train.shape(), n.head_layers, n.output_dim);
    network.validate()?;
    let seed = cfg.run.seed;
    let eval_every = cfg.run.eval_every;

    let p = &cfg.pretrain;
    let pretrain = if let Some(path) = &p.checkpoint {
        let path = existing(path, "pretrain.checkpoint")?;
        let ck = Checkpoint::load(&path)?;
        if !ck.network.spec().has_full_head() {
            return Err(Error::Config(format!("{} is not a pretrained network", path.display())));
        }
        if ck.network.spec() != &network {
            return Err(Error::Config(format!(
                "[network] does not match the architecture stored in {}",
                path.display()
            )));
        }
        Some(PretrainSource::Checkpoint(path))
    } else if p.enabled {
        let plan = PretrainPlan {
            network: network.clone(),
            train: TrainSettings {
                epochs: p.epochs,
                batch_size: p.batch_size,
                lr_coefficient: p.lr_coefficient,
                warmup_fraction: p.warmup_fraction,
                optimizer: optimizer(p.optimizer, p.momentum, p.weight_decay, p.trust_coefficient),
                augment: AugmentSpec::pretrain(),
                seed,
                eval_every,
            },
            contrastive: ContrastiveConfig {
                temperature: p.temperature,
                use_queue: p.use_queue,
                queue_capacity: p.queue_capacity,
            },
            ema_decay: p.ema_decay,
        };
        plan.validate()?;
        Some(PretrainSource::Train(plan))
    } else {
        None
    };
    if pretrain.is_none() && (cfg.lineareval.enabled || cfg.finetune.enabled) {
        return Err(Error::Config(
            "[lineareval] and [finetune] need a pretrained network: enable [pretrain] or set pretrain.checkpoint"
                .into(),
        ));
    }

    let l = &cfg.lineareval;
    let linear_eval = if l.enabled {
        if l.layer > network.head.num_layers {
            return Err(Error::Config(format!(
                "lineareval.layer {} out of range for a {}-layer head",
                l.layer, network.head.num_layers
            )));
        }
        Some(LinearEvalPlan {
            layer: l.layer,
            probe: ProbeSettings {
                epochs: l.epochs,
                batch_size: l.batch_size,
                lr: l.lr,
                seed,
            },
        })
    } else {
        None
    };

    let f = &cfg.finetune;
    let ft_plan = FinetunePlan {
        from_layer: f.from_layer,
        label_fraction: f.label_fraction,
        split_seed: seed,
        train: TrainSettings {
            epochs: f.epochs.expect("resolved"),
            batch_size: f.batch_size,
            lr_coefficient: f.lr_coefficient,
            warmup_fraction: 0.0,
            optimizer: optimizer(f.optimizer, f.momentum, 0.0, f.trust_coefficient),
            augment: AugmentSpec::finetune(),
            seed,
            eval_every,
        },
        freeze_pretrained: f.freeze_pretrained,
    };
    let needs_ft = f.enabled || cfg.supervised.enabled;
    if needs_ft {
        ft_plan.validate()?;
        network.classifier(ft_plan.resolved_from_layer(), classes)?;
    }
    let finetune = f.enabled.then(|| ft_plan.clone());
    let supervised = cfg.supervised.enabled.then_some(ft_plan);

    let d = &cfg.distill;
    let distill = if d.enabled {
        let (teacher_src, teacher_spec) = match &d.teacher {
            Some(path) => {
                let path = existing(path, "distill.teacher")?;
                let spec = Checkpoint::load(&path)?.network.spec().clone();
                (TeacherSource::Checkpoint(path), spec)
            }
            None if finetune.is_some() => {
                let spec = network.classifier(finetune.as_ref().expect("checked").resolved_from_layer(), classes)?;
                (TeacherSource::Finetune, spec)
            }
            None => {
                return Err(Error::Config(
                    "distillation needs a teacher checkpoint: enable [finetune] or set distill.teacher".into(),
                ))
            }
        };
        let student = match d.student_width {
            Some(w) if w != teacher_spec.encoder.width_multiplier => {
                let e = &teacher_spec.encoder;
                let base = network_spec(
                    e.kind,
                    e.depth_blocks,
                    w,
                    e.input_shape,
                    teacher_spec.head.num_layers,
                    teacher_spec.head.output_dim,
                );
                let classes = teacher_spec
                    .task_classes
                    .ok_or_else(|| Error::Config("the distillation teacher has no task head".into()))?;
                Some(base.classifier(teacher_spec.retained_head_layers, classes)?)
            }
            _ => None,
        };
        let settings = TrainSettings {
            epochs: d.epochs,
            batch_size: d.batch_size.expect("resolved"),
            lr_coefficient: d.lr_coefficient.expect("resolved"),
            warmup_fraction: d.warmup_fraction.expect("resolved"),
            optimizer: optimizer(
                d.optimizer.expect("resolved"),
                d.momentum.expect("resolved"),
                d.weight_decay.expect("resolved"),
                d.trust_coefficient.expect("resolved"),
            ),
            augment: AugmentSpec::finetune(),
            seed,
            eval_every,
        };
        let hop = |student: Option<NetworkSpec>, temperature: Option<f64>| DistillPlan {
            student,
            temperature,
            alpha: d.alpha,
            label_fraction: d.label_fraction,
            split_seed: seed,
            train: settings.clone(),
            student_init: d.student_init,
            freeze_student_bn: d.freeze_student_bn,
        };
        let mut hops = Vec::new();
        if d.self_distill_first && student.is_some() {
            hops.push(hop(None, None));
        }
        hops.push(hop(student, d.temperature));
        for h in &hops {
            h.validate(&teacher_spec)?;
        }
        Some(DistillChain {
            teacher: teacher_src,
            hops,
        })
    } else {
        None
    };

    Ok(Prepared {
        config: cfg.clone(),
        plan: RunPlan {
            data: cfg.data.source.clone(),
            network,
            pretrain,
            linear_eval,
            finetune,
            supervised,
            distill,
        },
        train,
        test,
    })
}
