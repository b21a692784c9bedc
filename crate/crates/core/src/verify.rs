//! Finite-difference verification of every differentiable primitive and of
//! the composed losses, on random instances.

use serde::Serialize;

use crate::error::Result;
use crate::losses::{cross_entropy, distill_loss, nt_xent, softmax_probs, ContrastiveConfig, MemoryQueue};
use crate::rng::Rng;
use crate::tensor::{grad_check, BnStats, Graph, Tensor, Var};

pub const PRIMITIVE_TOL: f64 = 1e-4;
pub const COMPOSED_TOL: f64 = 1e-3;
const EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub composed: bool,
    pub instances: usize,
    pub max_rel_err: f64,
    pub tol: f64,
    pub passed: bool,
}

fn random(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).expect("shape matches data")
}

fn positive(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform_range(0.5, 2.0)).collect()).expect("shape matches data")
}

/// Random linear functional of `y`, so every output coordinate carries gradient.
fn probe(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let w = g.constant(random(&mut Rng::new(seed), &shape));
    let p = g.mul(y, w)?;
    g.sum(p, None)
}

type Case = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

/// One random instance: the function under test and its inputs.
type Instance = (Case, Vec<Tensor<f64>>);

fn primitive(name: &'static str, rng: &mut Rng) -> Instance {
    let s = rng.next_u64();
    let (m, n, k) = (2 + rng.below(3), 2 + rng.below(3), 2 + rng.below(3));
    match name {
        "matmul" => (
            Box::new(move |g, v| {
                let y = g.matmul(v[0], v[1])?;
                probe(g, y, s)
            }),
            vec![random(rng, &[m, k]), random(rng, &[k, n])],
        ),
        "transpose" => (
            Box::new(move |g, v| {
                let y = g.transpose(v[0])?;
                probe(g, y, s)
            }),
            vec![random(rng, &[m, n])],
        ),
        "add" | "sub" | "mul" => (
            Box::new(move |g, v| {
                let y = match name {
                    "add" => g.add(v[0], v[1])?,
                    "sub" => g.sub(v[0], v[1])?,
                    _ => g.mul(v[0], v[1])?,
                };
                probe(g, y, s)
            }),
            vec![random(rng, &[m, n]), random(rng, &[m, n])],
        ),
        "add_row" => (
            Box::new(move |g, v| {
                let y = g.add_row(v[0], v[1])?;
                probe(g, y, s)
            }),
            vec![random(rng, &[m, n]), random(rng, &[n])],
        ),
        "relu" | "exp" | "neg" | "scale" => (
            Box::new(move |g, v| {
                let y = match name {
                    "relu" => g.relu(v[0]),
                    "exp" => g.exp(v[0]),
                    "neg" => g.neg(v[0]),
                    _ => g.scale(v[0], 0.37),
                };
                probe(g, y, s)
            }),
            vec![random(rng, &[m, n])],
        ),
        "log" => (
            Box::new(move |g, v| {
                let y = g.log(v[0])?;
                probe(g, y, s)
            }),
            vec![positive(rng, &[m, n])],
        ),
        "sum" | "mean" => {
            let axis = rng.below(3);
            (
                Box::new(move |g, v| {
                    let y = if name == "sum" {
                        g.sum(v[0], Some(axis))?
                    } else {
                        g.mean(v[0], Some(axis))?
                    };
                    probe(g, y, s)
                }),
                vec![random(rng, &[m, n, k])],
            )
        }
        "l2_normalize" => (
            Box::new(move |g, v| {
                let y = g.l2_normalize(v[0])?;
                probe(g, y, s)
            }),
            vec![random(rng, &[m, n])],
        ),
        "conv2d" => {
            let stride = 1 + rng.below(2);
            (
                Box::new(move |g, v| {
                    let y = g.conv2d(v[0], v[1], stride)?;
                    probe(g, y, s)
                }),
                vec![random(rng, &[2, 2, 5, 5]), random(rng, &[3, 2, 3, 3])],
            )
        }
        "batchnorm_train" => (
            Box::new(move |g, v| {
                let y = g.batchnorm(v[0], v[1], v[2], BnStats::Batch)?.out;
                probe(g, y, s)
            }),
            vec![random(rng, &[m + 3, n]), random(rng, &[n]), random(rng, &[n])],
        ),
        "batchnorm_eval" => {
            let mean: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
            let var: Vec<f64> = (0..n).map(|_| rng.uniform_range(0.5, 2.0)).collect();
            (
                Box::new(move |g, v| {
                    let y = g
                        .batchnorm(v[0], v[1], v[2], BnStats::Running { mean: &mean, var: &var })?
                        .out;
                    probe(g, y, s)
                }),
                vec![random(rng, &[m, n]), random(rng, &[n]), random(rng, &[n])],
            )
        }
        "log_softmax" => (
            Box::new(move |g, v| {
                let y = g.log_softmax(v[0])?;
                probe(g, y, s)
            }),
            vec![random(rng, &[m, n])],
        ),
        "mask_fill_neg_inf" => {
            let mask: Vec<bool> = (0..m * (n + 1)).map(|i| i % (n + 1) == 0).collect();
            (
                Box::new(move |g, v| {
                    let y = g.mask_fill_neg_inf(v[0], mask.clone())?;
                    let y = g.log_softmax(y)?;
                    let p = g.pick(y, (0..m).map(|r| 1 + r % n).collect())?;
                    g.sum(p, None)
                }),
                vec![random(rng, &[m, n + 1])],
            )
        }
        "pick" => {
            let idx: Vec<usize> = (0..m).map(|_| rng.below(n)).collect();
            (
                Box::new(move |g, v| {
                    let y = g.pick(v[0], idx.clone())?;
                    probe(g, y, s)
                }),
                vec![random(rng, &[m, n])],
            )
        }
        "concat_cols" => (
            Box::new(move |g, v| {
                let y = g.concat_cols(v[0], v[1])?;
                probe(g, y, s)
            }),
            vec![random(rng, &[m, n]), random(rng, &[m, k])],
        ),
        "reshape" => (
            Box::new(move |g, v| {
                let y = g.reshape(v[0], &[m * n])?;
                probe(g, y, s)
            }),
            vec![random(rng, &[m, n])],
        ),
        "global_avg_pool" => (
            Box::new(move |g, v| {
                let y = g.global_avg_pool(v[0])?;
                probe(g, y, s)
            }),
            vec![random(rng, &[2, m, 3, n])],
        ),
        _ => unreachable!("unknown primitive {name}"),
    }
}

fn composed(name: &'static str, rng: &mut Rng) -> Result<Instance> {
    let (n, c) = (2 + rng.below(3), 3 + rng.below(4));
    Ok(match name {
        "nt_xent" => {
            let tau = rng.uniform_range(0.1, 1.0);
            let cfg = ContrastiveConfig {
                temperature: tau,
                use_queue: true,
                queue_capacity: 4,
            };
            let mut queue = MemoryQueue::new(4, 4);
            if rng.bernoulli(0.5) {
                let q = random(rng, &[3, 4]);
                let rows: Vec<f32> = q
                    .data()
                    .chunks(4)
                    .flat_map(|r| {
                        let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                        r.iter().map(move |v| (v / norm) as f32).collect::<Vec<_>>()
                    })
                    .collect();
                queue.enqueue(&Tensor::new(vec![3, 4], rows)?)?;
            }
            let positives: Vec<usize> = (0..2 * n).map(|i| i ^ 1).collect();
            (
                Box::new(move |g, v| {
                    let p = g.matmul(v[0], v[1])?;
                    let z = g.l2_normalize(p)?;
                    nt_xent(g, z, &positives, &cfg, Some(&queue))
                }),
                vec![random(rng, &[2 * n, 5]), random(rng, &[5, 4])],
            )
        }
        "cross_entropy" => {
            let labels: Vec<usize> = (0..n).map(|_| rng.below(c)).collect();
            (
                Box::new(move |g, v| cross_entropy(g, v[0], &labels)),
                vec![random(rng, &[n, c])],
            )
        }
        "distill_loss" => {
            let tau = rng.uniform_range(0.1, 2.0);
            let teacher = softmax_probs(&random(rng, &[n, c]), tau)?;
            (
                Box::new(move |g, v| distill_loss(g, v[0], &teacher, tau)),
                vec![random(rng, &[n, c])],
            )
        }
        _ => unreachable!("unknown loss {name}"),
    })
}

pub const PRIMITIVES: &[&str] = &[
    "matmul",
    "transpose",
    "add",
    "sub",
    "mul",
    "add_row",
    "relu",
    "exp",
    "log",
    "neg",
    "scale",
    "sum",
    "mean",
    "l2_normalize",
    "conv2d",
    "batchnorm_train",
    "batchnorm_eval",
    "log_softmax",
    "mask_fill_neg_inf",
    "pick",
    "concat_cols",
    "reshape",
    "global_avg_pool",
];

pub const COMPOSED: &[&str] = &["nt_xent", "cross_entropy", "distill_loss"];

fn run(name: &'static str, composed_loss: bool, instances: usize, rng: &mut Rng) -> Result<CheckOutcome> {
    let tol = if composed_loss { COMPOSED_TOL } else { PRIMITIVE_TOL };
    let mut worst: f64 = 0.0;
    let mut passed = true;
    for _ in 0..instances {
        let (f, inputs) = if composed_loss {
            composed(name, rng)?
        } else {
            primitive(name, rng)
        };
        let report = grad_check(f, &inputs, EPS, tol)?;
        worst = worst.max(report.max_rel_err);
        passed &= report.passed;
    }
    Ok(CheckOutcome {
        name,
        composed: composed_loss,
        instances,
        max_rel_err: worst,
        tol,
        passed,
    })
}

/// Runs `instances` random checks of every primitive and composed loss.
pub fn gradient_suite(instances: usize, seed: u64) -> Result<Vec<CheckOutcome>> {
    let root = Rng::new(seed);
    let mut out = Vec::new();
    for (i, &name) in PRIMITIVES.iter().chain(COMPOSED).enumerate() {
        let mut rng = root.split_index(i as u64);
        out.push(run(name, i >= PRIMITIVES.len(), instances, &mut rng)?);
    }
    Ok(out)
}
