//! Training objectives.
//!
//! All batch reductions are means: the contrastive loss averages over every
//! ordered positive pair, cross-entropy and distillation over examples.

mod queue;

pub use queue::MemoryQueue;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Rows handed to the contrastive loss must be unit-norm to this tolerance.
pub const UNIT_NORM_TOL: f64 = 1e-5;
/// Teacher distributions must sum to one within this tolerance.
pub const PROB_SUM_TOL: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    pub temperature: f64,
    pub use_queue: bool,
    pub queue_capacity: usize,
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        check_temperature(self.temperature)?;
        if self.use_queue && self.queue_capacity == 0 {
            return Err(Error::Config(
                "queue_capacity must be positive when the queue is on".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub temperature: f64,
    pub alpha: f64,
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        check_temperature(self.temperature)?;
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must be in [0, 1], got {}", self.alpha)));
        }
        Ok(())
    }
}

fn check_temperature(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("temperature must be positive, got {tau}")))
    }
}

fn rows(g: &Graph<impl Scalar>, v: Var, what: &str) -> Result<(usize, usize)> {
    match *g.shape(v) {
        [n, d] => Ok((n, d)),
        ref s => Err(Error::Rank(format!("{what} must be rank 2, got {s:?}"))),
    }
}

/// Pairwise cosine similarities of unit-norm rows: `z · wᵀ`.
pub fn cosine_sim_matrix<T: Scalar>(g: &mut Graph<T>, z: Var, w: Var) -> Result<Var> {
    let (_, d) = rows(g, z, "cosine_sim_matrix lhs")?;
    let (_, d2) = rows(g, w, "cosine_sim_matrix rhs")?;
    if d != d2 {
        return Err(Error::dim("cosine_sim_matrix", g.shape(z), g.shape(w)));
    }
    let wt = g.transpose(w)?;
    g.matmul(z, wt)
}

fn check_unit_rows<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<()> {
    let d = t.shape()[1];
    for (i, row) in t.data().chunks(d).enumerate() {
        let norm = row.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::Contract(format!(
                "{what} row {i} has norm {norm}, expected unit norm"
            )));
        }
    }
    Ok(())
}

/// Validates a positive-pair map over `2N` views: an involution without
/// fixed points.
pub fn check_pairing(positives: &[usize]) -> Result<()> {
    let m = positives.len();
    if !m.is_multiple_of(2) || m < 4 {
        return Err(Error::DegenerateBatch(format!(
            "contrastive loss needs 2N views with N >= 2, got {m}"
        )));
    }
    for (i, &j) in positives.iter().enumerate() {
        if j >= m || j == i || positives[j] != i {
            return Err(Error::Contract(format!("view {i} has inconsistent positive {j}")));
        }
    }
    Ok(())
}

/// NT-Xent over `2N` unit-norm embeddings.
///
/// For view `i` with positive `j`, the loss is
/// `-log exp(s_ij/τ) / Σ_{k≠i} exp(s_ik/τ)`, where the denominator runs over
/// the other batch views and, when given, every queued embedding. The result
/// is the mean over all `2N` ordered pairs.
pub fn nt_xent<T: Scalar>(
    g: &mut Graph<T>,
    z: Var,
    positives: &[usize],
    cfg: &ContrastiveConfig,
    queue: Option<&MemoryQueue>,
) -> Result<Var> {
    check_temperature(cfg.temperature)?;
    let (m, d) = rows(g, z, "nt_xent embeddings")?;
    if positives.len() != m {
        return Err(Error::dim("nt_xent", g.shape(z), &[positives.len()]));
    }
    check_pairing(positives)?;
    check_unit_rows(g.value(z), "embedding")?;

    let sim = cosine_sim_matrix(g, z, z)?;
    let mut logits = g.scale(sim, 1.0 / cfg.temperature);
    let mut width = m;
    if let Some(q) = queue.filter(|q| !q.is_empty()) {
        if q.dim() != d {
            return Err(Error::dim("nt_xent queue", &[q.len(), q.dim()], &[m, d]));
        }
        let qv = g.constant(q.to_tensor().cast());
        let qsim = cosine_sim_matrix(g, z, qv)?;
        let qlogits = g.scale(qsim, 1.0 / cfg.temperature);
        logits = g.concat_cols(logits, qlogits)?;
        width += q.len();
    }
    let mask = (0..m * width).map(|k| k / width == k % width).collect();
    let masked = g.mask_fill_neg_inf(logits, mask)?;
    let logp = g.log_softmax(masked)?;
    let picked = g.pick(logp, positives.to_vec())?;
    let mean = g.mean(picked, None)?;
    Ok(g.neg(mean))
}

/// `softmax(logits / τ)` on the graph.
pub fn temperature_softmax<T: Scalar>(g: &mut Graph<T>, logits: Var, tau: f64) -> Result<Var> {
    check_temperature(tau)?;
    let scaled = g.scale(logits, 1.0 / tau);
    let ls = g.log_softmax(scaled)?;
    Ok(g.exp(ls))
}

/// `softmax(logits / τ)` of a plain tensor, for frozen teacher targets.
pub fn softmax_probs<T: Scalar>(logits: &Tensor<T>, tau: f64) -> Result<Tensor<T>> {
    check_temperature(tau)?;
    let [n, c] = logits.shape()[..] else {
        return Err(Error::Rank(format!("logits must be rank 2, got {:?}", logits.shape())));
    };
    let mut out = Vec::with_capacity(n * c);
    for row in logits.data().chunks(c) {
        let scaled: Vec<f64> = row.iter().map(|v| v.as_f64() / tau).collect();
        let mx = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scaled.iter().map(|v| (v - mx).exp()).collect();
        let s: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| T::from_f64(e / s)));
    }
    Tensor::new(vec![n, c], out)
}

/// Mean negative log-likelihood of the true class.
pub fn cross_entropy<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let (n, c) = rows(g, logits, "logits")?;
    if labels.len() != n {
        return Err(Error::dim("cross_entropy", g.shape(logits), &[labels.len()]));
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::Data(format!("label {bad} out of range for {c} classes")));
    }
    let ls = g.log_softmax(logits)?;
    let picked = g.pick(ls, labels.to_vec())?;
    let mean = g.mean(picked, None)?;
    Ok(g.neg(mean))
}

/// Mean over examples of `-Σ_y P_T(y) log P_S(y; τ)`. The teacher
/// distribution enters as a constant and receives no gradient.
pub fn distill_loss<T: Scalar>(
    g: &mut Graph<T>,
    student_logits: Var,
    teacher_probs: &Tensor<T>,
    tau: f64,
) -> Result<Var> {
    check_temperature(tau)?;
    let (n, c) = rows(g, student_logits, "student logits")?;
    if teacher_probs.shape() != [n, c] {
        return Err(Error::dim(
            "distill_loss",
            g.shape(student_logits),
            teacher_probs.shape(),
        ));
    }
    for (i, row) in teacher_probs.data().chunks(c).enumerate() {
        let s: f64 = row.iter().map(|v| v.as_f64()).sum();
        if (s - 1.0).abs() > PROB_SUM_TOL || row.iter().any(|v| v.as_f64() < 0.0) {
            return Err(Error::Contract(format!(
                "teacher row {i} is not a distribution (sum {s})"
            )));
        }
    }
    let tp = g.constant(teacher_probs.clone());
    let scaled = g.scale(student_logits, 1.0 / tau);
    let ls = g.log_softmax(scaled)?;
    let prod = g.mul(tp, ls)?;
    let total = g.sum(prod, None)?;
    Ok(g.scale(total, -1.0 / n as f64))
}

/// `(1 - α) · cross_entropy(labeled) + α · distill_loss(unlabeled)`.
///
/// A term whose weight is zero is not evaluated at all, so `α = 1` never
/// touches labels and `labeled` may be `None`.
pub fn combined_loss<T: Scalar>(
    g: &mut Graph<T>,
    labeled: Option<(Var, &[usize])>,
    student_logits_unlabeled: Var,
    teacher_probs: &Tensor<T>,
    cfg: &DistillConfig,
) -> Result<Var> {
    cfg.validate()?;
    let alpha = cfg.alpha;
    let distill = if alpha > 0.0 {
        Some(distill_loss(
            g,
            student_logits_unlabeled,
            teacher_probs,
            cfg.temperature,
        )?)
    } else {
        None
    };
    let ce = if alpha < 1.0 {
        let (logits, labels) =
            labeled.ok_or_else(|| Error::Config("alpha < 1 needs a labeled batch for the supervised term".into()))?;
        Some(cross_entropy(g, logits, labels)?)
    } else {
        None
    };
    match (ce, distill) {
        (None, Some(d)) => Ok(d),
        (Some(c), None) => Ok(c),
        (Some(c), Some(d)) => {
            let wc = g.scale(c, 1.0 - alpha);
            let wd = g.scale(d, alpha);
            g.add(wc, wd)
        }
        (None, None) => unreachable!("alpha is in [0, 1]"),
    }
}
