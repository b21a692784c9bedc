use super::kernels::{col2im, conv_out, im2col, BnLayout};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Batch-norm variance floor.
pub const BN_EPS: f64 = 1e-5;
/// Rows with a smaller Euclidean norm cannot be normalized.
pub const NORMALIZE_EPS: f64 = 1e-12;

/// Handle to a tensor recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Neg(Var),
    Scale(Var, T),
    Sum {
        x: Var,
        axis: Option<usize>,
        mean: bool,
    },
    L2Normalize {
        x: Var,
        norms: Vec<T>,
    },
    Conv2d {
        x: Var,
        k: Var,
        stride: usize,
        cols: Vec<T>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    LogSoftmax(Var),
    MaskFill {
        x: Var,
        mask: Vec<bool>,
    },
    Pick {
        x: Var,
        idx: Vec<usize>,
    },
    ConcatCols(Var, Var),
    Reshape(Var),
    GlobalAvgPool(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Statistics selection for [`Graph::batchnorm`].
pub enum BnStats<'a, T> {
    /// Normalize with the batch's own statistics.
    Batch,
    /// Normalize with the supplied running mean and variance.
    Running { mean: &'a [T], var: &'a [T] },
}

pub struct BatchNormOutput<T> {
    pub out: Var,
    /// Per-group batch mean (empty when running statistics were used).
    pub mean: Vec<T>,
    /// Per-group biased batch variance (empty when running statistics were used).
    pub var: Vec<T>,
}

/// Tape of recorded operations. Nodes are appended in evaluation order, so
/// insertion order is a topological order and backward walks it in reverse.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_or_scalar(a: &[usize], b: &[usize]) -> bool {
    a == b || a.is_empty() || b.is_empty()
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn rank2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [m, n] => Ok((m, n)),
            ref s => Err(Error::Rank(format!("{op} expects a rank-2 tensor, got {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rank2(a, "matmul")?;
        let (k2, n) = self.rank2(b, "matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (n as isize, 1),
            &mut out,
            false,
        );
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.rank2(a, "transpose")?;
        let src = self.value(a).data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(a), &[a]))
    }

    fn binary(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !same_or_scalar(sa, sb) {
            return Err(Error::dim(op, sa, sb));
        }
        let (va, vb) = (self.value(a), self.value(b));
        let shape = if sa.is_empty() { sb.to_vec() } else { sa.to_vec() };
        let n = va.numel().max(vb.numel());
        let pick = |t: &Tensor<T>, i: usize| if t.numel() == 1 { t.data()[0] } else { t.data()[i] };
        let data = (0..n).map(|i| f(pick(va, i), pick(vb, i))).collect();
        Tensor::new(shape, data)
    }

    /// Elementwise sum; either operand may be a rank-0 scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.neg(b);
        self.add(a, nb)
    }

    /// Elementwise product; either operand may be a rank-0 scalar.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    /// `x[n×d] + bias[d]`, the bias repeated over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, d) = self.rank2(x, "add_row")?;
        if self.shape(bias) != [d] {
            return Err(Error::dim("add_row", self.shape(x), self.shape(bias)));
        }
        let (xv, bv) = (self.value(x).data(), self.value(bias).data());
        let mut out = xv.to_vec();
        for r in 0..n {
            for (o, b) in out[r * d..(r + 1) * d].iter_mut().zip(bv) {
                *o += *b;
            }
        }
        Ok(self.push(Tensor::new(vec![n, d], out)?, Op::AddRow(x, bias), &[x, bias]))
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let v = self.value(x);
        let t =
            Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| f(a)).collect()).expect("unary preserves shape");
        self.push(t, op, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |a| if a > T::zero() { a } else { T::zero() })
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), |a| a.exp())
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data().iter().find(|a| **a <= T::zero()) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {:?}", bad),
            });
        }
        Ok(self.unary(x, Op::Log(x), |a| a.ln()))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, Op::Neg(x), |a| -a)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = T::from_f64(s);
        self.unary(x, Op::Scale(x, s), |a| a * s)
    }

    fn reduce(&mut self, x: Var, axis: Option<usize>, mean: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let data = self.value(x).data();
        let t = match axis {
            None => {
                let mut s = data.iter().fold(T::zero(), |acc, &v| acc + v);
                if mean {
                    s = s / T::from_f64(data.len() as f64);
                }
                Tensor::scalar(s)
            }
            Some(ax) => {
                if ax >= shape.len() {
                    return Err(Error::dim("reduce", &shape, &[ax]));
                }
                let outer: usize = shape[..ax].iter().product();
                let extent = shape[ax];
                let inner: usize = shape[ax + 1..].iter().product();
                let mut out = vec![T::zero(); outer * inner];
                for o in 0..outer {
                    for e in 0..extent {
                        let src = &data[(o * extent + e) * inner..(o * extent + e + 1) * inner];
                        for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                            *d += *s;
                        }
                    }
                }
                if mean {
                    let inv = T::one() / T::from_f64(extent as f64);
                    out.iter_mut().for_each(|v| *v *= inv);
                }
                let mut oshape = shape.clone();
                oshape.remove(ax);
                Tensor::new(oshape, out)?
            }
        };
        Ok(self.push(t, Op::Sum { x, axis, mean }, &[x]))
    }

    /// Sum over `axis`, or over everything (to a scalar) when `axis` is `None`.
    pub fn sum(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(x, axis, false)
    }

    pub fn mean(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(x, axis, true)
    }

    /// Scales each row of `x[n×d]` to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let (n, d) = self.rank2(x, "l2_normalize")?;
        let data = self.value(x).data();
        let mut out = vec![T::zero(); n * d];
        let mut norms = Vec::with_capacity(n);
        for r in 0..n {
            let row = &data[r * d..(r + 1) * d];
            let norm = row.iter().fold(T::zero(), |acc, &v| acc + v * v).sqrt();
            if norm.as_f64() < NORMALIZE_EPS {
                return Err(Error::DegenerateEmbedding {
                    row: r,
                    norm: norm.as_f64(),
                });
            }
            for (o, v) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = *v / norm;
            }
            norms.push(norm);
        }
        Ok(self.push(Tensor::new(vec![n, d], out)?, Op::L2Normalize { x, norms }, &[x]))
    }

    /// 3x3 cross-correlation with zero "same" padding. `x: [n,c,h,w]`,
    /// `k: [o,c,3,3]`, `stride` in {1, 2}.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize) -> Result<Var> {
        if stride != 1 && stride != 2 {
            return Err(Error::Config(format!("conv2d stride must be 1 or 2, got {stride}")));
        }
        let (xs, ks) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        let [n, c, h, w] = xs[..] else {
            return Err(Error::Rank(format!("conv2d input must be rank 4, got {xs:?}")));
        };
        let [o, kc, 3, 3] = ks[..] else {
            return Err(Error::dim("conv2d", &xs, &ks));
        };
        if kc != c {
            return Err(Error::dim("conv2d", &xs, &ks));
        }
        let (oh, ow) = (conv_out(h, stride), conv_out(w, stride));
        let p = oh * ow;
        let img = c * h * w;
        let colsz = c * 9 * p;
        let mut cols = vec![T::zero(); n * colsz];
        let mut out = vec![T::zero(); n * o * p];
        let (xv, kv) = (self.value(x).data(), self.value(k).data());
        for b in 0..n {
            let col = &mut cols[b * colsz..(b + 1) * colsz];
            im2col(&xv[b * img..(b + 1) * img], c, h, w, stride, col);
            T::gemm(
                o,
                c * 9,
                p,
                kv,
                ((c * 9) as isize, 1),
                col,
                (p as isize, 1),
                &mut out[b * o * p..(b + 1) * o * p],
                false,
            );
        }
        let t = Tensor::new(vec![n, o, oh, ow], out)?;
        Ok(self.push(t, Op::Conv2d { x, k, stride, cols }, &[x, k]))
    }

    /// Batch normalization over features (`[n,d]`) or channels (`[n,c,h,w]`).
    pub fn batchnorm(&mut self, x: Var, gamma: Var, beta: Var, stats: BnStats<'_, T>) -> Result<BatchNormOutput<T>> {
        let shape = self.shape(x).to_vec();
        let layout = BnLayout::from_shape(&shape)
            .ok_or_else(|| Error::Rank(format!("batchnorm expects rank 2 or 4, got {shape:?}")))?;
        let g = layout.groups;
        if self.shape(gamma) != [g] || self.shape(beta) != [g] {
            return Err(Error::dim("batchnorm", &shape, self.shape(gamma)));
        }
        let train = matches!(stats, BnStats::Batch);
        if train && layout.n < 2 {
            return Err(Error::DegenerateBatch(format!(
                "batch norm in train mode needs at least 2 samples, got {}",
                layout.n
            )));
        }
        let eps = T::from_f64(BN_EPS);
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        let mut inv_std = Vec::with_capacity(g);
        let (mut means, mut vars) = (Vec::new(), Vec::new());
        let m = T::from_f64(layout.per_group as f64);
        for grp in 0..g {
            let (mu, var) = match &stats {
                BnStats::Batch => {
                    let mut s = T::zero();
                    layout.for_group(grp, |i| s += xv[i]);
                    let mu = s / m;
                    let mut s2 = T::zero();
                    layout.for_group(grp, |i| {
                        let d = xv[i] - mu;
                        s2 += d * d;
                    });
                    let var = s2 / m;
                    means.push(mu);
                    vars.push(var);
                    (mu, var)
                }
                BnStats::Running { mean, var } => (mean[grp], var[grp]),
            };
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            layout.for_group(grp, |i| {
                let xh = (xv[i] - mu) * inv;
                xhat[i] = xh;
                out[i] = gv[grp] * xh + bv[grp];
            });
        }
        let t = Tensor::new(shape, out)?;
        let out = self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            &[x, gamma, beta],
        );
        Ok(BatchNormOutput {
            out,
            mean: means,
            var: vars,
        })
    }

    /// Row-wise log-softmax of `x[n×C]` with max subtraction.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (n, c) = self.rank2(x, "log_softmax")?;
        let data = self.value(x).data();
        let mut out = vec![T::zero(); n * c];
        for r in 0..n {
            let row = &data[r * c..(r + 1) * c];
            let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let lse = row.iter().fold(T::zero(), |acc, &v| acc + (v - mx).exp()).ln() + mx;
            for (o, v) in out[r * c..(r + 1) * c].iter_mut().zip(row) {
                *o = *v - lse;
            }
        }
        Ok(self.push(Tensor::new(vec![n, c], out)?, Op::LogSoftmax(x), &[x]))
    }

    /// Replaces masked entries with negative infinity; masked entries pass no gradient.
    pub fn mask_fill_neg_inf(&mut self, x: Var, mask: Vec<bool>) -> Result<Var> {
        let v = self.value(x);
        if mask.len() != v.numel() {
            return Err(Error::dim("mask_fill", v.shape(), &[mask.len()]));
        }
        let data = v
            .data()
            .iter()
            .zip(&mask)
            .map(|(&a, &m)| if m { T::neg_infinity() } else { a })
            .collect();
        let t = Tensor::new(v.shape().to_vec(), data)?;
        Ok(self.push(t, Op::MaskFill { x, mask }, &[x]))
    }

    /// `out[i] = x[i, idx[i]]` for `x[n×C]`.
    pub fn pick(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let (n, c) = self.rank2(x, "pick")?;
        if idx.len() != n {
            return Err(Error::dim("pick", self.shape(x), &[idx.len()]));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= c) {
            return Err(Error::Data(format!("pick index {bad} out of range for {c} columns")));
        }
        let data = self.value(x).data();
        let out = idx.iter().enumerate().map(|(r, &i)| data[r * c + i]).collect();
        Ok(self.push(Tensor::new(vec![n], out)?, Op::Pick { x, idx }, &[x]))
    }

    /// `[a | b]` for `a[n×p]`, `b[n×q]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, p) = self.rank2(a, "concat_cols")?;
        let (n2, q) = self.rank2(b, "concat_cols")?;
        if n != n2 {
            return Err(Error::dim("concat_cols", self.shape(a), self.shape(b)));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * (p + q));
        for r in 0..n {
            out.extend_from_slice(&av[r * p..(r + 1) * p]);
            out.extend_from_slice(&bv[r * q..(r + 1) * q]);
        }
        Ok(self.push(Tensor::new(vec![n, p + q], out)?, Op::ConcatCols(a, b), &[a, b]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// `[n,c,h,w] -> [n,c]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.shape(x)[..] else {
            return Err(Error::Rank(format!(
                "global_avg_pool expects rank 4, got {:?}",
                self.shape(x)
            )));
        };
        let hw = h * w;
        let inv = T::one() / T::from_f64(hw as f64);
        let data = self.value(x).data();
        let out = (0..n * c)
            .map(|i| data[i * hw..(i + 1) * hw].iter().fold(T::zero(), |a, &b| a + b) * inv)
            .collect();
        Ok(self.push(Tensor::new(vec![n, c], out)?, Op::GlobalAvgPool(x), &[x]))
    }

    /// Reverse pass from a scalar `loss`. Afterwards every node that requires
    /// a gradient and is reachable from `loss` holds `dloss/dnode`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::GraphReuse);
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Rank(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(gy) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            for (input, contrib) in self.local_grads(idx, &gy) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += *c),
                    slot @ None => *slot = Some(contrib),
                }
            }
            let shape = self.nodes[idx].value.shape().to_vec();
            self.nodes[idx].grad = Some(Tensor::new(shape, gy)?);
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `idx` for upstream gradient `gy`.
    fn local_grads(&self, idx: usize, gy: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[idx];
        let val = |v: Var| self.nodes[v.0].value.data();
        let need = |v: Var| self.nodes[v.0].requires_grad;
        let y = node.value.data();
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let mut out = Vec::new();
                if need(*a) {
                    // dA = dY · Bᵀ
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(m, n, k, gy, (n as isize, 1), val(*b), (1, n as isize), &mut da, false);
                    out.push((*a, da));
                }
                if need(*b) {
                    // dB = Aᵀ · dY
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(k, m, n, val(*a), (1, k as isize), gy, (n as isize, 1), &mut db, false);
                    out.push((*b, db));
                }
                out
            }
            Op::Transpose(a) => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                let mut da = vec![T::zero(); m * n];
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] = gy[j * m + i];
                    }
                }
                vec![(*a, da)]
            }
            Op::Add(a, b) => {
                let mut out = Vec::new();
                for v in [*a, *b] {
                    if self.nodes[v.0].value.rank() == 0 && gy.len() != 1 {
                        out.push((v, vec![gy.iter().fold(T::zero(), |s, &g| s + g)]));
                    } else {
                        out.push((v, gy.to_vec()));
                    }
                }
                out
            }
            Op::Mul(a, b) => {
                let mut out = Vec::new();
                for (this, other) in [(*a, *b), (*b, *a)] {
                    if !need(this) {
                        continue;
                    }
                    let ov = val(other);
                    let o = |i: usize| if ov.len() == 1 { ov[0] } else { ov[i] };
                    let full: Vec<T> = gy.iter().enumerate().map(|(i, &g)| g * o(i)).collect();
                    if self.nodes[this.0].value.rank() == 0 && gy.len() != 1 {
                        out.push((this, vec![full.iter().fold(T::zero(), |s, &v| s + v)]));
                    } else {
                        out.push((this, full));
                    }
                }
                out
            }
            Op::AddRow(x, b) => {
                let d = self.shape(*b)[0];
                let mut db = vec![T::zero(); d];
                for row in gy.chunks(d) {
                    db.iter_mut().zip(row).for_each(|(a, g)| *a += *g);
                }
                vec![(*x, gy.to_vec()), (*b, db)]
            }
            Op::Relu(x) => {
                let xv = val(*x);
                let dx = gy
                    .iter()
                    .zip(xv)
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                vec![(*x, dx)]
            }
            Op::Exp(x) => vec![(*x, gy.iter().zip(y).map(|(&g, &e)| g * e).collect())],
            Op::Log(x) => vec![(*x, gy.iter().zip(val(*x)).map(|(&g, &v)| g / v).collect())],
            Op::Neg(x) => vec![(*x, gy.iter().map(|&g| -g).collect())],
            Op::Scale(x, s) => vec![(*x, gy.iter().map(|&g| g * *s).collect())],
            Op::Sum { x, axis, mean } => {
                let shape = self.shape(*x);
                let numel = self.nodes[x.0].value.numel();
                match axis {
                    None => {
                        let mut g = gy[0];
                        if *mean {
                            g = g / T::from_f64(numel as f64);
                        }
                        vec![(*x, vec![g; numel])]
                    }
                    Some(ax) => {
                        let outer: usize = shape[..*ax].iter().product();
                        let extent = shape[*ax];
                        let inner: usize = shape[ax + 1..].iter().product();
                        let scale = if *mean {
                            T::one() / T::from_f64(extent as f64)
                        } else {
                            T::one()
                        };
                        let mut dx = vec![T::zero(); numel];
                        for o in 0..outer {
                            for e in 0..extent {
                                for i in 0..inner {
                                    dx[(o * extent + e) * inner + i] = gy[o * inner + i] * scale;
                                }
                            }
                        }
                        vec![(*x, dx)]
                    }
                }
            }
            Op::L2Normalize { x, norms } => {
                let d = self.shape(*x)[1];
                let mut dx = vec![T::zero(); gy.len()];
                for (r, &norm) in norms.iter().enumerate() {
                    let yr = &y[r * d..(r + 1) * d];
                    let gr = &gy[r * d..(r + 1) * d];
                    let dot = yr.iter().zip(gr).fold(T::zero(), |a, (&p, &q)| a + p * q);
                    for j in 0..d {
                        dx[r * d + j] = (gr[j] - yr[j] * dot) / norm;
                    }
                }
                vec![(*x, dx)]
            }
            Op::Conv2d { x, k, stride, cols } => {
                let xs = self.shape(*x);
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let o = self.shape(*k)[0];
                let p = conv_out(h, *stride) * conv_out(w, *stride);
                let colsz = c * 9 * p;
                let mut out = Vec::new();
                if need(*k) {
                    let mut dk = vec![T::zero(); o * c * 9];
                    for b in 0..n {
                        T::gemm(
                            o,
                            p,
                            c * 9,
                            &gy[b * o * p..(b + 1) * o * p],
                            (p as isize, 1),
                            &cols[b * colsz..(b + 1) * colsz],
                            (1, p as isize),
                            &mut dk,
                            true,
                        );
                    }
                    out.push((*k, dk));
                }
                if need(*x) {
                    let kv = val(*k);
                    let mut dx = vec![T::zero(); n * c * h * w];
                    let mut dcol = vec![T::zero(); colsz];
                    for b in 0..n {
                        T::gemm(
                            c * 9,
                            o,
                            p,
                            kv,
                            (1, (c * 9) as isize),
                            &gy[b * o * p..(b + 1) * o * p],
                            (p as isize, 1),
                            &mut dcol,
                            false,
                        );
                        col2im(&dcol, c, h, w, *stride, &mut dx[b * c * h * w..(b + 1) * c * h * w]);
                    }
                    out.push((*x, dx));
                }
                out
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let layout = BnLayout::from_shape(self.shape(*x)).expect("validated in forward");
                let gv = val(*gamma);
                let g = layout.groups;
                let m = T::from_f64(layout.per_group as f64);
                let mut dgamma = vec![T::zero(); g];
                let mut dbeta = vec![T::zero(); g];
                let mut dx = vec![T::zero(); gy.len()];
                for grp in 0..g {
                    let (mut sg, mut sgx) = (T::zero(), T::zero());
                    layout.for_group(grp, |i| {
                        sg += gy[i];
                        sgx += gy[i] * xhat[i];
                    });
                    dbeta[grp] = sg;
                    dgamma[grp] = sgx;
                    let scale = gv[grp] * inv_std[grp];
                    if *train {
                        layout.for_group(grp, |i| {
                            dx[i] = scale * (gy[i] - sg / m - xhat[i] * sgx / m);
                        });
                    } else {
                        layout.for_group(grp, |i| dx[i] = scale * gy[i]);
                    }
                }
                vec![(*x, dx), (*gamma, dgamma), (*beta, dbeta)]
            }
            Op::LogSoftmax(x) => {
                let c = self.shape(*x)[1];
                let mut dx = vec![T::zero(); gy.len()];
                for (r, (gr, yr)) in gy.chunks(c).zip(y.chunks(c)).enumerate() {
                    let s = gr.iter().fold(T::zero(), |a, &b| a + b);
                    for j in 0..c {
                        dx[r * c + j] = gr[j] - yr[j].exp() * s;
                    }
                }
                vec![(*x, dx)]
            }
            Op::MaskFill { x, mask } => {
                let dx = gy
                    .iter()
                    .zip(mask)
                    .map(|(&g, &m)| if m { T::zero() } else { g })
                    .collect();
                vec![(*x, dx)]
            }
            Op::Pick { x, idx } => {
                let c = self.shape(*x)[1];
                let mut dx = vec![T::zero(); idx.len() * c];
                for (r, &i) in idx.iter().enumerate() {
                    dx[r * c + i] = gy[r];
                }
                vec![(*x, dx)]
            }
            Op::ConcatCols(a, b) => {
                let (n, p) = (self.shape(*a)[0], self.shape(*a)[1]);
                let q = self.shape(*b)[1];
                let (mut da, mut db) = (Vec::with_capacity(n * p), Vec::with_capacity(n * q));
                for r in 0..n {
                    let row = &gy[r * (p + q)..(r + 1) * (p + q)];
                    da.extend_from_slice(&row[..p]);
                    db.extend_from_slice(&row[p..]);
                }
                vec![(*a, da), (*b, db)]
            }
            Op::Reshape(x) => vec![(*x, gy.to_vec())],
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x);
                let hw = s[2] * s[3];
                let inv = T::one() / T::from_f64(hw as f64);
                let mut dx = Vec::with_capacity(gy.len() * hw);
                for &g in gy {
                    dx.extend(std::iter::repeat_n(g * inv, hw));
                }
                vec![(*x, dx)]
            }
        }
    }
}
