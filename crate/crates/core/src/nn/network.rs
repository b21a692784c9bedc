use std::collections::BTreeMap;

use super::{EncoderKind, EncoderSpec, NetworkSpec};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{BnStats, Graph, Scalar, Tensor, Var};

/// Running-statistics momentum: `running = m * running + (1 - m) * batch`.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch statistics observed during a train-mode forward, applied to the
/// running averages with [`Network::apply_bn_updates`].
#[derive(Clone, Debug, Default)]
pub struct BnUpdates {
    entries: Vec<(String, Vec<f64>, Vec<f64>, usize)>,
}

impl BnUpdates {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Graph variables for a network's parameters.
#[derive(Clone, Debug, Default)]
pub struct Binding {
    vars: BTreeMap<String, Var>,
}

impl Binding {
    pub fn from_vars(vars: BTreeMap<String, Var>) -> Self {
        Self { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Structure(format!("parameter `{name}` is not bound")))
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    /// Gradients of every bound parameter that received one, cast to `f32`.
    pub fn grads<T: Scalar>(&self, g: &Graph<T>) -> BTreeMap<String, Tensor<f32>> {
        self.vars
            .iter()
            .filter_map(|(name, v)| g.grad(*v).map(|t| (name.clone(), t.cast())))
            .collect()
    }
}

/// A network instance: spec, named parameters, and batch-norm running stats.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    params: BTreeMap<String, Tensor<f32>>,
    buffers: BTreeMap<String, Tensor<f32>>,
}

fn gaussian(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor<f32> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| (rng.normal() * std) as f32).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

impl Network {
    /// Fresh network with fan-in scaled Gaussian weights, zero biases and
    /// identity batch norm. Weight streams are keyed by parameter name.
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let init = Rng::new(seed).split("init");
        let mut net = Self {
            spec: spec.clone(),
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
        };
        let enc = &spec.encoder;
        let mut fan_in = match enc.kind {
            EncoderKind::Mlp => enc.input_len(),
            EncoderKind::SmallConv => enc.input_shape[0],
        };
        for (b, width) in enc.block_widths().into_iter().enumerate() {
            let p = format!("encoder.{b}");
            match enc.kind {
                EncoderKind::Mlp => {
                    net.init_linear(&init, &p, fan_in, width, 2.0);
                }
                EncoderKind::SmallConv => {
                    let name = format!("{p}.kernel");
                    let std = (2.0 / (fan_in * 9) as f64).sqrt();
                    let t = gaussian(&mut init.split(&name), &[width, fan_in, 3, 3], std);
                    net.params.insert(name, t);
                }
            }
            net.init_bn(&format!("{p}.bn"), width);
            fan_in = width;
        }
        let feat = enc.feature_dim();
        for i in 1..=spec.retained_head_layers {
            net.init_head_layer(&init, i, feat);
        }
        if let Some(c) = spec.task_classes {
            net.init_task_head(&init, c);
        }
        Ok(net)
    }

    fn init_linear(&mut self, init: &Rng, prefix: &str, fan_in: usize, fan_out: usize, gain: f64) {
        let name = format!("{prefix}.weight");
        let w = gaussian(
            &mut init.split(&name),
            &[fan_in, fan_out],
            (gain / fan_in as f64).sqrt(),
        );
        self.params.insert(name, w);
        self.params.insert(format!("{prefix}.bias"), Tensor::zeros(&[fan_out]));
    }

    fn init_bn(&mut self, prefix: &str, width: usize) {
        self.params
            .insert(format!("{prefix}.gamma"), Tensor::full(&[width], 1.0));
        self.params.insert(format!("{prefix}.beta"), Tensor::zeros(&[width]));
        self.buffers
            .insert(format!("{prefix}.running_mean"), Tensor::zeros(&[width]));
        self.buffers
            .insert(format!("{prefix}.running_var"), Tensor::full(&[width], 1.0));
    }

    fn init_head_layer(&mut self, init: &Rng, i: usize, feat: usize) {
        let (a, b) = self.spec.head.layer_dims(feat, i);
        let last = i == self.spec.head.num_layers;
        self.init_linear(init, &format!("head.{i}"), a, b, if last { 1.0 } else { 2.0 });
        if !last {
            self.init_bn(&format!("head.{i}.bn"), b);
        }
    }

    fn init_task_head(&mut self, init: &Rng, classes: usize) {
        let dim = self.spec.activation_dim(self.spec.retained_head_layers);
        self.init_linear(init, "task", dim, classes, 1.0);
    }

    /// Assembles a network from stored parts, checking them against the spec.
    pub fn from_parts(
        spec: NetworkSpec,
        params: BTreeMap<String, Tensor<f32>>,
        buffers: BTreeMap<String, Tensor<f32>>,
    ) -> Result<Self> {
        let reference = Network::new(spec.clone(), 0)?;
        let shapes_match = |a: &BTreeMap<String, Tensor<f32>>, b: &BTreeMap<String, Tensor<f32>>| {
            a.len() == b.len()
                && a.iter()
                    .zip(b)
                    .all(|((na, ta), (nb, tb))| na == nb && ta.shape() == tb.shape())
        };
        if !shapes_match(&reference.params, &params) || !shapes_match(&reference.buffers, &buffers) {
            return Err(Error::Structure("stored tensors do not match the network spec".into()));
        }
        Ok(Self { spec, params, buffers })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<f32>> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor<f32>> {
        &mut self.params
    }

    pub fn buffers(&self) -> &BTreeMap<String, Tensor<f32>> {
        &self.buffers
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Registers every parameter on `g`; `trainable(name)` decides which
    /// ones receive gradients.
    pub fn bind<T: Scalar>(&self, g: &mut Graph<T>, trainable: impl Fn(&str) -> bool) -> Binding {
        let vars = self
            .params
            .iter()
            .map(|(name, t)| (name.clone(), g.leaf(t.cast(), trainable(name))))
            .collect();
        Binding { vars }
    }

    fn bn<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &Binding,
        x: Var,
        prefix: &str,
        mode: Mode,
        upd: &mut BnUpdates,
    ) -> Result<Var> {
        let gamma = b.get(&format!("{prefix}.gamma"))?;
        let beta = b.get(&format!("{prefix}.beta"))?;
        match mode {
            Mode::Train => {
                let shape = g.shape(x).to_vec();
                let count = shape[0] * shape[2..].iter().product::<usize>();
                let out = g.batchnorm(x, gamma, beta, BnStats::Batch)?;
                upd.entries.push((
                    prefix.to_string(),
                    out.mean.iter().map(|v| v.as_f64()).collect(),
                    out.var.iter().map(|v| v.as_f64()).collect(),
                    count,
                ));
                Ok(out.out)
            }
            Mode::Eval => {
                let rm: Vec<T> = self.buffer(&format!("{prefix}.running_mean"))?;
                let rv: Vec<T> = self.buffer(&format!("{prefix}.running_var"))?;
                Ok(g.batchnorm(x, gamma, beta, BnStats::Running { mean: &rm, var: &rv })?
                    .out)
            }
        }
    }

    fn buffer<T: Scalar>(&self, name: &str) -> Result<Vec<T>> {
        let t = self
            .buffers
            .get(name)
            .ok_or_else(|| Error::Structure(format!("missing buffer `{name}`")))?;
        Ok(t.data().iter().map(|v| T::from_f64(f64::from(*v))).collect())
    }

    fn linear<T: Scalar>(&self, g: &mut Graph<T>, b: &Binding, x: Var, prefix: &str) -> Result<Var> {
        let w = b.get(&format!("{prefix}.weight"))?;
        let bias = b.get(&format!("{prefix}.bias"))?;
        let y = g.matmul(x, w)?;
        g.add_row(y, bias)
    }

    /// Encoder forward: `x[n,c,h,w] -> h[n, feature_dim]`.
    pub fn encode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &Binding,
        x: Var,
        mode: Mode,
        upd: &mut BnUpdates,
    ) -> Result<Var> {
        let enc: &EncoderSpec = &self.spec.encoder;
        let shape = g.shape(x).to_vec();
        let [c, h, w] = enc.input_shape;
        if shape.len() != 4 || shape[1..] != [c, h, w] {
            return Err(Error::dim("encoder_forward", &shape, &[0, c, h, w]));
        }
        let n = shape[0];
        match enc.kind {
            EncoderKind::Mlp => {
                let mut a = g.reshape(x, &[n, c * h * w])?;
                for blk in 0..enc.depth_blocks {
                    let p = format!("encoder.{blk}");
                    a = self.linear(g, b, a, &p)?;
                    a = self.bn(g, b, a, &format!("{p}.bn"), mode, upd)?;
                    a = g.relu(a);
                }
                Ok(a)
            }
            EncoderKind::SmallConv => {
                let mut a = x;
                for blk in 0..enc.depth_blocks {
                    let p = format!("encoder.{blk}");
                    let k = b.get(&format!("{p}.kernel"))?;
                    a = g.conv2d(a, k, EncoderSpec::conv_stride(blk))?;
                    a = self.bn(g, b, a, &format!("{p}.bn"), mode, upd)?;
                    a = g.relu(a);
                }
                g.global_avg_pool(a)
            }
        }
    }

    /// Activations `[a_0 = h, a_1, ..., a_k]` through the retained head layers.
    pub fn head_activations<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &Binding,
        h: Var,
        mode: Mode,
        upd: &mut BnUpdates,
    ) -> Result<Vec<Var>> {
        let mut acts = vec![h];
        let mut a = h;
        for i in 1..=self.spec.retained_head_layers {
            let p = format!("head.{i}");
            a = self.linear(g, b, a, &p)?;
            if i < self.spec.head.num_layers {
                a = self.bn(g, b, a, &format!("{p}.bn"), mode, upd)?;
                a = g.relu(a);
            }
            acts.push(a);
        }
        Ok(acts)
    }

    /// Unit-norm contrastive embedding `z = normalize(g(f(x)))`.
    pub fn embed<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &Binding,
        x: Var,
        mode: Mode,
        upd: &mut BnUpdates,
    ) -> Result<Var> {
        if !self.spec.has_full_head() {
            return Err(Error::Structure(
                "contrastive embedding needs the complete projection head".into(),
            ));
        }
        let h = self.encode(g, b, x, mode, upd)?;
        let acts = self.head_activations(g, b, h, mode, upd)?;
        g.l2_normalize(*acts.last().expect("non-empty"))
    }

    /// Feature at activation index `layer` (0 = encoder output).
    pub fn features<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &Binding,
        x: Var,
        layer: usize,
        mode: Mode,
        upd: &mut BnUpdates,
    ) -> Result<Var> {
        if layer > self.spec.retained_head_layers {
            return Err(Error::Config(format!(
                "layer {layer} not available (network keeps {} head layers)",
                self.spec.retained_head_layers
            )));
        }
        let h = self.encode(g, b, x, mode, upd)?;
        let acts = self.head_activations(g, b, h, mode, upd)?;
        Ok(acts[layer])
    }

    /// Task logits `f_task(x)`.
    pub fn logits<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &Binding,
        x: Var,
        mode: Mode,
        upd: &mut BnUpdates,
    ) -> Result<Var> {
        if self.spec.task_classes.is_none() {
            return Err(Error::Structure("network has no task head".into()));
        }
        let h = self.encode(g, b, x, mode, upd)?;
        let acts = self.head_activations(g, b, h, mode, upd)?;
        self.linear(g, b, *acts.last().expect("non-empty"), "task")
    }

    pub fn apply_bn_updates(&mut self, upd: &BnUpdates) {
        for (prefix, mean, var, count) in &upd.entries {
            let unbias = if *count > 1 {
                *count as f64 / (*count as f64 - 1.0)
            } else {
                1.0
            };
            if let Some(rm) = self.buffers.get_mut(&format!("{prefix}.running_mean")) {
                for (r, m) in rm.data_mut().iter_mut().zip(mean) {
                    *r = (BN_MOMENTUM * f64::from(*r) + (1.0 - BN_MOMENTUM) * m) as f32;
                }
            }
            if let Some(rv) = self.buffers.get_mut(&format!("{prefix}.running_var")) {
                for (r, v) in rv.data_mut().iter_mut().zip(var) {
                    *r = (BN_MOMENTUM * f64::from(*r) + (1.0 - BN_MOMENTUM) * v * unbias) as f32;
                }
            }
        }
    }

    /// Classifier built on this (pretrained) network: encoder plus head
    /// layers `1..=from_layer` copied verbatim, and a fresh task head.
    pub fn build_finetune_network(&self, from_layer: usize, num_classes: usize, seed: u64) -> Result<Network> {
        let spec = self.spec.classifier(from_layer, num_classes)?;
        if from_layer > self.spec.retained_head_layers {
            return Err(Error::Config(format!(
                "source network keeps only {} head layers",
                self.spec.retained_head_layers
            )));
        }
        let mut net = Network::new(spec, seed)?;
        for (name, t) in net.params.iter_mut() {
            if name.starts_with("task.") {
                continue;
            }
            *t = self.params[name].clone();
        }
        for (name, t) in net.buffers.iter_mut() {
            *t = self.buffers[name].clone();
        }
        Ok(net)
    }

    /// Eval-mode logits for a batch of images, without recording gradients.
    pub fn predict(&self, x: Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::<f32>::new();
        let b = self.bind(&mut g, |_| false);
        let xv = g.constant(x);
        let mut upd = BnUpdates::default();
        let out = self.logits(&mut g, &b, xv, Mode::Eval, &mut upd)?;
        Ok(g.value(out).clone())
    }

    /// Eval-mode features at `layer` for a batch of images.
    pub fn extract_features(&self, x: Tensor<f32>, layer: usize) -> Result<Tensor<f32>> {
        let mut g = Graph::<f32>::new();
        let b = self.bind(&mut g, |_| false);
        let xv = g.constant(x);
        let mut upd = BnUpdates::default();
        let out = self.features(&mut g, &b, xv, layer, Mode::Eval, &mut upd)?;
        Ok(g.value(out).clone())
    }
}
