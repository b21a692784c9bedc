use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Labeled subset of a training set. The unlabeled pool is always the whole
/// training set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelSplit {
    pub fraction: f64,
    pub seed: u64,
    /// Sorted training indices whose labels are visible.
    pub labeled: Vec<usize>,
    pub pool_size: usize,
}

impl LabelSplit {
    pub fn unlabeled(&self) -> Vec<usize> {
        (0..self.pool_size).collect()
    }
}

/// Stratified, seeded choice of `round(fraction * n)` labeled examples.
///
/// Per-class quotas differ by at most one; which classes receive the
/// remainder is drawn from the seed.
pub fn subsample_labels(ds: &Dataset, fraction: f64, seed: u64) -> Result<LabelSplit> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!(
            "label fraction must be in (0, 1], got {fraction}"
        )));
    }
    let n = ds.len();
    let k = ds.num_classes();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, l) in ds.all_labels().into_iter().enumerate() {
        by_class[l].push(i);
    }
    if let Some(c) = by_class.iter().position(Vec::is_empty) {
        return Err(Error::Data(format!("class {c} has no training examples")));
    }
    let total = ((fraction * n as f64).round() as usize).clamp(1, n);
    let rng = Rng::new(seed).split("labels");
    let mut quota = vec![total / k; k];
    for c in rng.split("remainder").permutation(k).into_iter().take(total % k) {
        quota[c] += 1;
    }
    // Classes too small for their quota pass the excess on, smallest deficit first.
    let mut spare = 0;
    for c in 0..k {
        if quota[c] > by_class[c].len() {
            spare += quota[c] - by_class[c].len();
            quota[c] = by_class[c].len();
        }
    }
    while spare > 0 {
        let c = (0..k)
            .filter(|&c| quota[c] < by_class[c].len())
            .min_by_key(|&c| quota[c])
            .expect("total <= n leaves room");
        quota[c] += 1;
        spare -= 1;
    }
    let mut labeled = Vec::with_capacity(total);
    for (c, members) in by_class.iter().enumerate() {
        let mut r = rng.split_index(c as u64);
        let order = r.permutation(members.len());
        labeled.extend(order[..quota[c]].iter().map(|&j| members[j]));
    }
    labeled.sort_unstable();
    Ok(LabelSplit {
        fraction,
        seed,
        labeled,
        pool_size: n,
    })
}
