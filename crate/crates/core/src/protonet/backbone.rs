//! Convolutional feature extractors. Parameter names follow the torchvision
//! layout (`features.N.weight`, `layer1.0.conv1.weight`, ...) under a
//! `backbone.` prefix, so converted ImageNet weights load by name.

use std::fmt;
use std::str::FromStr;

use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use super::params::{ParamGroup, ParamStore};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    Vgg19,
    Resnet18,
    /// Three conv/pool stages; for desk-scale experiments and tests.
    Tiny,
}

impl BackboneKind {
    pub fn native_input_size(self) -> usize {
        match self {
            BackboneKind::Vgg19 | BackboneKind::Resnet18 => 224,
            BackboneKind::Tiny => 32,
        }
    }

    /// Ratio between input side and feature-map side.
    pub fn downsample(self) -> usize {
        match self {
            BackboneKind::Vgg19 | BackboneKind::Resnet18 => 32,
            BackboneKind::Tiny => 8,
        }
    }

    pub fn out_channels(self) -> usize {
        match self {
            BackboneKind::Vgg19 | BackboneKind::Resnet18 => 512,
            BackboneKind::Tiny => 64,
        }
    }
}

impl FromStr for BackboneKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "vgg19" => Ok(BackboneKind::Vgg19),
            "resnet18" => Ok(BackboneKind::Resnet18),
            "tiny" => Ok(BackboneKind::Tiny),
            other => Err(format!("unknown backbone `{other}` (expected vgg19, resnet18 or tiny)")),
        }
    }
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackboneKind::Vgg19 => "vgg19",
            BackboneKind::Resnet18 => "resnet18",
            BackboneKind::Tiny => "tiny",
        })
    }
}

pub(crate) struct Conv2d {
    weight: Var,
    bias: Option<Var>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = store.kaiming(&format!("{name}.weight"), (c_out, c_in, kernel, kernel), group)?;
        let bias = if bias {
            Some(store.constant(&format!("{name}.bias"), c_out, 0.0, group, true)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(self.weight.as_tensor(), self.padding, self.stride, 1, 1)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&b.as_tensor().reshape((1, (), 1, 1))?)?,
            None => y,
        })
    }
}

/// Batch norm in inference form: running statistics are fixed, the affine part trains.
pub(crate) struct FrozenBatchNorm {
    weight: Var,
    bias: Var,
    running_mean: Var,
    running_var: Var,
}

impl FrozenBatchNorm {
    fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        let g = ParamGroup::Backbone;
        Ok(Self {
            weight: store.constant(&format!("{name}.weight"), channels, 1.0, g, true)?,
            bias: store.constant(&format!("{name}.bias"), channels, 0.0, g, true)?,
            running_mean: store.constant(&format!("{name}.running_mean"), channels, 0.0, g, false)?,
            running_var: store.constant(&format!("{name}.running_var"), channels, 1.0, g, false)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let scale = self
            .weight
            .as_tensor()
            .div(&(self.running_var.as_tensor() + 1e-5)?.sqrt()?)?;
        let shift = self
            .bias
            .as_tensor()
            .sub(&self.running_mean.as_tensor().mul(&scale)?)?;
        Ok(x
            .broadcast_mul(&scale.reshape((1, (), 1, 1))?)?
            .broadcast_add(&shift.reshape((1, (), 1, 1))?)?)
    }
}

pub(crate) struct BasicBlock {
    conv1: Conv2d,
    bn1: FrozenBatchNorm,
    conv2: Conv2d,
    bn2: FrozenBatchNorm,
    downsample: Option<(Conv2d, FrozenBatchNorm)>,
}

impl BasicBlock {
    fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, stride: usize) -> Result<Self> {
        let g = ParamGroup::Backbone;
        let downsample = if stride != 1 || c_in != c_out {
            Some((
                Conv2d::new(store, &format!("{name}.downsample.0"), g, c_in, c_out, 1, stride, 0, false)?,
                FrozenBatchNorm::new(store, &format!("{name}.downsample.1"), c_out)?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), g, c_in, c_out, 3, stride, 1, false)?,
            bn1: FrozenBatchNorm::new(store, &format!("{name}.bn1"), c_out)?,
            conv2: Conv2d::new(store, &format!("{name}.conv2"), g, c_out, c_out, 3, 1, 1, false)?,
            bn2: FrozenBatchNorm::new(store, &format!("{name}.bn2"), c_out)?,
            downsample,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.bn1.forward(&self.conv1.forward(x)?)?.relu()?;
        let y = self.bn2.forward(&self.conv2.forward(&y)?)?;
        let shortcut = match &self.downsample {
            Some((conv, bn)) => bn.forward(&conv.forward(x)?)?,
            None => x.clone(),
        };
        Ok((y + shortcut)?.relu()?)
    }
}

pub(crate) enum Stage {
    ConvRelu(Conv2d),
    MaxPool,
}

pub(crate) enum Backbone {
    /// VGG-style plain stack (also used for the tiny backbone).
    Plain(Vec<Stage>),
    Resnet {
        conv1: Conv2d,
        bn1: FrozenBatchNorm,
        blocks: Vec<BasicBlock>,
    },
}

const VGG19_CFG: [Option<usize>; 21] = [
    Some(64), Some(64), None,
    Some(128), Some(128), None,
    Some(256), Some(256), Some(256), Some(256), None,
    Some(512), Some(512), Some(512), Some(512), None,
    Some(512), Some(512), Some(512), Some(512), None,
];

const TINY_CFG: [Option<usize>; 6] = [Some(16), None, Some(32), None, Some(64), None];

fn plain(store: &mut ParamStore, cfg: &[Option<usize>]) -> Result<Backbone> {
    let mut stages = Vec::new();
    let mut index = 0;
    let mut c_in = 3;
    for item in cfg {
        match item {
            Some(c_out) => {
                let name = format!("backbone.features.{index}");
                stages.push(Stage::ConvRelu(Conv2d::new(
                    store,
                    &name,
                    ParamGroup::Backbone,
                    c_in,
                    *c_out,
                    3,
                    1,
                    1,
                    true,
                )?));
                c_in = *c_out;
                index += 2;
            }
            None => {
                stages.push(Stage::MaxPool);
                index += 1;
            }
        }
    }
    Ok(Backbone::Plain(stages))
}

impl Backbone {
    pub fn new(kind: BackboneKind, store: &mut ParamStore) -> Result<Self> {
        match kind {
            BackboneKind::Vgg19 => plain(store, &VGG19_CFG),
            BackboneKind::Tiny => plain(store, &TINY_CFG),
            BackboneKind::Resnet18 => {
                let g = ParamGroup::Backbone;
                let conv1 = Conv2d::new(store, "backbone.conv1", g, 3, 64, 7, 2, 3, false)?;
                let bn1 = FrozenBatchNorm::new(store, "backbone.bn1", 64)?;
                let mut blocks = Vec::new();
                let mut c_in = 64;
                for (layer, &c_out) in [64usize, 128, 256, 512].iter().enumerate() {
                    for block in 0..2 {
                        let stride = if layer > 0 && block == 0 { 2 } else { 1 };
                        blocks.push(BasicBlock::new(
                            store,
                            &format!("backbone.layer{}.{block}", layer + 1),
                            c_in,
                            c_out,
                            stride,
                        )?);
                        c_in = c_out;
                    }
                }
                Ok(Backbone::Resnet { conv1, bn1, blocks })
            }
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Backbone::Plain(stages) => {
                let mut x = x.clone();
                for stage in stages {
                    x = match stage {
                        Stage::ConvRelu(conv) => conv.forward(&x)?.relu()?,
                        Stage::MaxPool => x.max_pool2d(2)?,
                    };
                }
                Ok(x)
            }
            Backbone::Resnet { conv1, bn1, blocks } => {
                let x = bn1.forward(&conv1.forward(x)?)?.relu()?;
                // 3x3/2 max pool with padding 1; inputs are post-ReLU so zero padding is neutral
                let x = x.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?;
                let mut x = x.max_pool2d_with_stride(3, 2)?;
                for block in blocks {
                    x = block.forward(&x)?;
                }
                Ok(x)
            }
        }
    }
}
