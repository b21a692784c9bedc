use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::cross_entropy;
use crate::nn::Network;
use crate::optim::{Optimizer, OptimizerConfig};
use crate::rng::Rng;
use crate::tensor::{Graph, Scalar, Tensor};

pub const EVAL_BATCH: usize = 256;

/// Index of the largest entry in each row; ties go to the lowest index.
pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (k, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

pub fn top1_from_logits<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Data("top-1 of an empty set".into()));
    }
    let hits = argmax_rows(logits).iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Eval-mode top-1 accuracy of a classifier on every example of `ds`.
pub fn evaluate_top1(net: &Network, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    let mut hits = 0usize;
    let all: Vec<usize> = (0..ds.len()).collect();
    for chunk in all.chunks(EVAL_BATCH) {
        let logits = net.predict(ds.batch(chunk))?;
        let labels = ds.labels(chunk);
        hits += argmax_rows(&logits).iter().zip(&labels).filter(|(p, y)| p == y).count();
    }
    Ok(hits as f64 / ds.len() as f64)
}

/// Eval-mode features at head activation `layer` for every example of `ds`.
pub fn extract_all_features(net: &Network, ds: &Dataset, layer: usize) -> Result<Tensor<f32>> {
    let all: Vec<usize> = (0..ds.len()).collect();
    let mut data = Vec::new();
    let mut dim = 0;
    for chunk in all.chunks(EVAL_BATCH) {
        let f = net.extract_features(ds.batch(chunk), layer)?;
        dim = f.shape()[1];
        data.extend_from_slice(f.data());
    }
    Tensor::new(vec![ds.len(), dim], data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 128,
            lr: 0.1,
            seed: 0,
        }
    }
}

/// Softmax-regression classifier on fixed features, with the training
/// features' per-dimension standardization folded in.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    mean: Vec<f32>,
    inv_std: Vec<f32>,
    weight: Tensor<f32>,
    bias: Tensor<f32>,
}

impl LinearProbe {
    fn standardize(&self, x: &Tensor<f32>) -> Tensor<f32> {
        let d = self.mean.len();
        let data = x
            .data()
            .chunks(d)
            .flat_map(|row| {
                row.iter()
                    .enumerate()
                    .map(|(j, v)| (v - self.mean[j]) * self.inv_std[j])
            })
            .collect();
        Tensor::new(x.shape().to_vec(), data).expect("same shape")
    }

    pub fn logits(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::<f32>::new();
        let xv = g.constant(self.standardize(x));
        let w = g.constant(self.weight.clone());
        let b = g.constant(self.bias.clone());
        let y = g.matmul(xv, w)?;
        let y = g.add_row(y, b)?;
        Ok(g.value(y).clone())
    }

    pub fn top1(&self, x: &Tensor<f32>, labels: &[usize]) -> Result<f64> {
        top1_from_logits(&self.logits(x)?, labels)
    }
}

/// Trains a linear classifier on `features[n×d]` with heavy-ball SGD.
pub fn train_linear_probe(
    features: &Tensor<f32>,
    labels: &[usize],
    num_classes: usize,
    settings: &ProbeSettings,
) -> Result<LinearProbe> {
    let [n, d] = features.shape()[..] else {
        return Err(Error::Rank(format!(
            "probe features must be rank 2, got {:?}",
            features.shape()
        )));
    };
    if n == 0 || labels.len() != n {
        return Err(Error::Data(format!("{} labels for {n} feature rows", labels.len())));
    }
    let mut mean = vec![0f64; d];
    let mut sq = vec![0f64; d];
    for row in features.data().chunks(d) {
        for j in 0..d {
            let v = f64::from(row[j]);
            mean[j] += v;
            sq[j] += v * v;
        }
    }
    let inv_std = (0..d)
        .map(|j| {
            let m = mean[j] / n as f64;
            let var = (sq[j] / n as f64 - m * m).max(0.0);
            (1.0 / (var.sqrt() + 1e-6)) as f32
        })
        .collect();
    let mut probe = LinearProbe {
        mean: mean.iter().map(|m| (m / n as f64) as f32).collect(),
        inv_std,
        weight: Tensor::zeros(&[d, num_classes]),
        bias: Tensor::zeros(&[num_classes]),
    };
    let x = probe.standardize(features);
    let mut params = BTreeMap::from([
        ("probe.weight".to_string(), probe.weight.clone()),
        ("probe.bias".to_string(), probe.bias.clone()),
    ]);
    let mut opt = Optimizer::new(
        OptimizerConfig::sgd(0.9, 0.0),
        BTreeSet::from(["probe.bias".to_string()]),
    )?;
    let shuffle = Rng::new(settings.seed).split("probe");
    let bs = settings.batch_size.clamp(1, n);
    for epoch in 0..settings.epochs {
        let order = shuffle.split_index(epoch as u64).permutation(n);
        for chunk in order.chunks(bs) {
            let rows: Vec<f32> = chunk.iter().flat_map(|&i| x.row(i).iter().copied()).collect();
            let ys: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::<f32>::new();
            let xb = g.constant(Tensor::new(vec![chunk.len(), d], rows)?);
            let w = g.param(params["probe.weight"].clone());
            let b = g.param(params["probe.bias"].clone());
            let y = g.matmul(xb, w)?;
            let y = g.add_row(y, b)?;
            let loss = cross_entropy(&mut g, y, &ys)?;
            g.backward(loss)?;
            let grads = BTreeMap::from([
                ("probe.weight".to_string(), g.grad(w).expect("param").clone()),
                ("probe.bias".to_string(), g.grad(b).expect("param").clone()),
            ]);
            opt.step(&mut params, &grads, settings.lr)?;
        }
    }
    probe.weight = params.remove("probe.weight").expect("present");
    probe.bias = params.remove("probe.bias").expect("present");
    Ok(probe)
}
