//! Encoder `f`, projection head `g`, task head, and the EMA shadow network.

mod ema;
mod network;

pub use ema::EmaNetwork;
pub use network::{Binding, BnUpdates, Mode, Network};

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Base hidden width of the MLP encoder at width multiplier 1.
pub const MLP_BASE_WIDTH: usize = 128;
/// First-stage channel count of the conv encoder at width multiplier 1.
pub const CONV_BASE_CHANNELS: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Mlp,
    #[serde(rename = "smallconv")]
    SmallConv,
}

impl std::str::FromStr for EncoderKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(Self::Mlp),
            "smallconv" => Ok(Self::SmallConv),
            other => Err(Error::Config(format!(
                "unknown encoder kind `{other}` (expected mlp or smallconv)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub kind: EncoderKind,
    pub depth_blocks: usize,
    pub width_multiplier: f64,
    /// `(channels, height, width)` of one input image.
    pub input_shape: [usize; 3],
}

impl EncoderSpec {
    pub fn mlp(depth_blocks: usize, width_multiplier: f64, input_shape: [usize; 3]) -> Self {
        Self {
            kind: EncoderKind::Mlp,
            depth_blocks,
            width_multiplier,
            input_shape,
        }
    }

    pub fn small_conv(depth_blocks: usize, width_multiplier: f64, input_shape: [usize; 3]) -> Self {
        Self {
            kind: EncoderKind::SmallConv,
            depth_blocks,
            width_multiplier,
            input_shape,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth_blocks == 0 {
            return Err(Error::Config("encoder depth_blocks must be >= 1".into()));
        }
        if !(self.width_multiplier > 0.0 && self.width_multiplier.is_finite()) {
            return Err(Error::Config("width_multiplier must be positive".into()));
        }
        if self.base_width() == 0 {
            return Err(Error::Config("width_multiplier too small for a single unit".into()));
        }
        if self.input_shape.contains(&0) {
            return Err(Error::Config("input_shape extents must be positive".into()));
        }
        Ok(())
    }

    fn base_width(&self) -> usize {
        let base = match self.kind {
            EncoderKind::Mlp => MLP_BASE_WIDTH,
            EncoderKind::SmallConv => CONV_BASE_CHANNELS,
        };
        (base as f64 * self.width_multiplier).round() as usize
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// Output width of each block, in order.
    pub fn block_widths(&self) -> Vec<usize> {
        let base = self.base_width();
        match self.kind {
            EncoderKind::Mlp => vec![base; self.depth_blocks],
            EncoderKind::SmallConv => (0..self.depth_blocks).map(|s| base << s).collect(),
        }
    }

    /// Width of the representation `h`.
    pub fn feature_dim(&self) -> usize {
        *self.block_widths().last().expect("depth >= 1")
    }

    /// Stride of conv stage `s`: the first stage keeps resolution.
    pub fn conv_stride(stage: usize) -> usize {
        if stage == 0 {
            1
        } else {
            2
        }
    }

    pub fn param_count(&self) -> usize {
        let widths = self.block_widths();
        let mut total = 0;
        let mut fan_in = match self.kind {
            EncoderKind::Mlp => self.input_len(),
            EncoderKind::SmallConv => self.input_shape[0],
        };
        for w in widths {
            total += match self.kind {
                EncoderKind::Mlp => fan_in * w + w,
                EncoderKind::SmallConv => w * fan_in * 9,
            };
            total += 2 * w; // batch-norm gamma and beta
            fan_in = w;
        }
        total
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
}

impl HeadSpec {
    /// Head whose hidden width equals the encoder's feature width.
    pub fn for_encoder(encoder: &EncoderSpec, num_layers: usize, output_dim: usize) -> Self {
        Self {
            num_layers,
            hidden_dim: encoder.feature_dim(),
            output_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=4).contains(&self.num_layers) {
            return Err(Error::Config(format!(
                "head num_layers must be in 2..=4, got {}",
                self.num_layers
            )));
        }
        if self.hidden_dim == 0 || self.output_dim == 0 {
            return Err(Error::Config("head widths must be positive".into()));
        }
        Ok(())
    }

    /// `(in, out)` width of head layer `i` (1-based), given the encoder width.
    pub fn layer_dims(&self, feature_dim: usize, i: usize) -> (usize, usize) {
        let fan_in = if i == 1 { feature_dim } else { self.hidden_dim };
        let out = if i == self.num_layers {
            self.output_dim
        } else {
            self.hidden_dim
        };
        (fan_in, out)
    }

    /// Parameters of head layer `i`: weight, bias and, for every layer but
    /// the last, batch-norm gamma and beta.
    pub fn layer_param_count(&self, feature_dim: usize, i: usize) -> usize {
        let (a, b) = self.layer_dims(feature_dim, i);
        a * b + b + if i < self.num_layers { 2 * b } else { 0 }
    }
}

/// Full description of a network: encoder, the first `retained_head_layers`
/// projection-head layers, and optionally a linear task head on top.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub encoder: EncoderSpec,
    pub head: HeadSpec,
    pub retained_head_layers: usize,
    pub task_classes: Option<usize>,
}

impl NetworkSpec {
    /// Encoder plus the complete projection head, as used for pretraining.
    pub fn pretraining(encoder: EncoderSpec, head_layers: usize, output_dim: usize) -> Self {
        let head = HeadSpec::for_encoder(&encoder, head_layers, output_dim);
        Self {
            encoder,
            head,
            retained_head_layers: head_layers,
            task_classes: None,
        }
    }

    /// Encoder plus `from_layer` head layers plus a task head.
    pub fn classifier(&self, from_layer: usize, num_classes: usize) -> Result<Self> {
        if from_layer >= self.head.num_layers {
            return Err(Error::Config(format!(
                "from_layer {from_layer} out of range for a {}-layer head (max {})",
                self.head.num_layers,
                self.head.num_layers - 1
            )));
        }
        if num_classes < 2 {
            return Err(Error::Config("a task head needs at least 2 classes".into()));
        }
        Ok(Self {
            encoder: self.encoder.clone(),
            head: self.head.clone(),
            retained_head_layers: from_layer,
            task_classes: Some(num_classes),
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.head.validate()?;
        match self.task_classes {
            None if self.retained_head_layers != self.head.num_layers => Err(Error::Config(
                "a network without task head must keep the full projection head".into(),
            )),
            Some(_) if self.retained_head_layers >= self.head.num_layers => Err(Error::Config(
                "the final projection layer cannot be kept under a task head".into(),
            )),
            Some(c) if c < 2 => Err(Error::Config("a task head needs at least 2 classes".into())),
            _ => Ok(()),
        }
    }

    pub fn has_full_head(&self) -> bool {
        self.task_classes.is_none()
    }

    /// Width of activation `a_k` (k = 0 is the encoder output).
    pub fn activation_dim(&self, k: usize) -> usize {
        if k == 0 {
            self.encoder.feature_dim()
        } else {
            self.head.layer_dims(self.encoder.feature_dim(), k).1
        }
    }

    pub fn param_count(&self) -> usize {
        let feat = self.encoder.feature_dim();
        let mut total = self.encoder.param_count();
        for i in 1..=self.retained_head_layers {
            total += self.head.layer_param_count(feat, i);
        }
        if let Some(c) = self.task_classes {
            total += self.activation_dim(self.retained_head_layers) * c + c;
        }
        total
    }
}

/// Split of parameter names into those adapted by LARS (and decayed) and
/// those excluded from both: biases and batch-norm affine terms.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamGroups {
    pub adapted: BTreeSet<String>,
    pub excluded: BTreeSet<String>,
}

impl ParamGroups {
    pub fn is_excluded(&self, name: &str) -> bool {
        self.excluded.contains(name)
    }
}

pub fn is_adapted_name(name: &str) -> bool {
    name.ends_with(".weight") || name.ends_with(".kernel")
}

pub fn param_groups(net: &Network) -> ParamGroups {
    let mut groups = ParamGroups::default();
    for name in net.params().keys() {
        if is_adapted_name(name) {
            groups.adapted.insert(name.clone());
        } else {
            groups.excluded.insert(name.clone());
        }
    }
    groups
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn widths_scale_with_multiplier() {
        let a = EncoderSpec::mlp(2, 1.0, [1, 8, 8]);
        let b = EncoderSpec::mlp(2, 2.0, [1, 8, 8]);
        assert_eq!(b.feature_dim(), 2 * a.feature_dim());
        let c = EncoderSpec::small_conv(3, 1.0, [3, 16, 16]);
        let d = EncoderSpec::small_conv(3, 2.0, [3, 16, 16]);
        assert_eq!(c.feature_dim(), 64);
        assert_eq!(d.feature_dim(), 128);
    }

    #[test]
    fn mlp_param_count_closed_form() {
        // in 64, two hidden layers of 128 with bias and batch norm
        let e = EncoderSpec::mlp(2, 1.0, [1, 8, 8]);
        let expected = (64 * 128 + 128 + 256) + (128 * 128 + 128 + 256);
        assert_eq!(e.param_count(), expected);
    }

    #[test]
    fn classifier_rejects_final_layer() {
        let spec = NetworkSpec::pretraining(EncoderSpec::mlp(1, 1.0, [1, 4, 4]), 3, 16);
        assert!(spec.classifier(3, 10).is_err());
        assert!(spec.classifier(2, 10).is_ok());
        assert!(spec.validate().is_ok());
    }

    #[test]
    fn head_depth_bounds() {
        let e = EncoderSpec::mlp(1, 1.0, [1, 4, 4]);
        assert!(HeadSpec::for_encoder(&e, 1, 8).validate().is_err());
        assert!(HeadSpec::for_encoder(&e, 5, 8).validate().is_err());
        assert!(HeadSpec::for_encoder(&e, 4, 8).validate().is_ok());
    }
}
