//! DenseNet-121 (growth 32, bottleneck 4, blocks 6/12/24/16) with
//! torchvision parameter names.

use candle_core::Tensor;

use crate::error::Result;
use crate::nn::layers::{global_avg_pool, max_pool_3x3_s2, BatchNorm2d, Conv2d};
use crate::nn::params::{Init, ParamSpec, ParamStore};

pub const FEATURE_WIDTH: usize = 1024;
pub const FIRST_CONV: &str = "features.conv0.weight";
pub const CLASSIFIER: &str = "classifier";

const GROWTH: usize = 32;
const BOTTLENECK: usize = 4;
const BLOCKS: [usize; 4] = [6, 12, 24, 16];
const STEM: usize = 64;

fn conv_spec(specs: &mut Vec<ParamSpec>, name: &str, out_c: usize, in_c: usize, k: usize) {
    // kaiming normal, fan_in mode
    specs.push(ParamSpec::weight(
        format!("{name}.weight"),
        &[out_c, in_c, k, k],
        Init::KaimingNormal { fan: in_c * k * k },
    ));
}

fn bn_spec(specs: &mut Vec<ParamSpec>, name: &str, c: usize) {
    specs.push(ParamSpec::weight(format!("{name}.weight"), &[c], Init::Const(1.0)));
    specs.push(ParamSpec::weight(format!("{name}.bias"), &[c], Init::Const(0.0)));
    specs.push(ParamSpec::buffer(format!("{name}.running_mean"), &[c], 0.0));
    specs.push(ParamSpec::buffer(format!("{name}.running_var"), &[c], 1.0));
}

pub fn param_specs() -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    conv_spec(&mut specs, "features.conv0", STEM, 3, 7);
    bn_spec(&mut specs, "features.norm0", STEM);
    let mut channels = STEM;
    for (b, &layers) in BLOCKS.iter().enumerate() {
        for l in 0..layers {
            let p = format!("features.denseblock{}.denselayer{}", b + 1, l + 1);
            let in_c = channels + l * GROWTH;
            bn_spec(&mut specs, &format!("{p}.norm1"), in_c);
            conv_spec(&mut specs, &format!("{p}.conv1"), BOTTLENECK * GROWTH, in_c, 1);
            bn_spec(&mut specs, &format!("{p}.norm2"), BOTTLENECK * GROWTH);
            conv_spec(&mut specs, &format!("{p}.conv2"), GROWTH, BOTTLENECK * GROWTH, 3);
        }
        channels += layers * GROWTH;
        if b + 1 < BLOCKS.len() {
            let p = format!("features.transition{}", b + 1);
            bn_spec(&mut specs, &format!("{p}.norm"), channels);
            conv_spec(&mut specs, &format!("{p}.conv"), channels / 2, channels, 1);
            channels /= 2;
        }
    }
    bn_spec(&mut specs, "features.norm5", channels);
    specs.push(ParamSpec::weight(
        "classifier.weight",
        &[1000, FEATURE_WIDTH],
        Init::linear_default(FEATURE_WIDTH),
    ));
    specs.push(ParamSpec::weight("classifier.bias", &[1000], Init::Const(0.0)));
    specs
}

#[derive(Debug, Clone)]
struct DenseLayer {
    norm1: BatchNorm2d,
    conv1: Conv2d,
    norm2: BatchNorm2d,
    conv2: Conv2d,
}

impl DenseLayer {
    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = self.conv1.forward(&self.norm1.forward(x, train)?.relu()?)?;
        self.conv2.forward(&self.norm2.forward(&y, train)?.relu()?)
    }
}

#[derive(Debug, Clone)]
struct Transition {
    norm: BatchNorm2d,
    conv: Conv2d,
}

#[derive(Debug, Clone)]
pub struct DenseNet121 {
    conv0: Conv2d,
    norm0: BatchNorm2d,
    blocks: Vec<Vec<DenseLayer>>,
    transitions: Vec<Transition>,
    norm5: BatchNorm2d,
}

impl DenseNet121 {
    pub fn load(store: &ParamStore) -> Result<Self> {
        let mut blocks = Vec::new();
        let mut transitions = Vec::new();
        for (b, &layers) in BLOCKS.iter().enumerate() {
            let mut block = Vec::with_capacity(layers);
            for l in 0..layers {
                let p = format!("features.denseblock{}.denselayer{}", b + 1, l + 1);
                block.push(DenseLayer {
                    norm1: BatchNorm2d::load(store, &format!("{p}.norm1"))?,
                    conv1: Conv2d::load(store, &format!("{p}.conv1"), 1, 0)?,
                    norm2: BatchNorm2d::load(store, &format!("{p}.norm2"))?,
                    conv2: Conv2d::load(store, &format!("{p}.conv2"), 1, 1)?,
                });
            }
            blocks.push(block);
            if b + 1 < BLOCKS.len() {
                let p = format!("features.transition{}", b + 1);
                transitions.push(Transition {
                    norm: BatchNorm2d::load(store, &format!("{p}.norm"))?,
                    conv: Conv2d::load(store, &format!("{p}.conv"), 1, 0)?,
                });
            }
        }
        Ok(Self {
            conv0: Conv2d::load(store, "features.conv0", 2, 3)?,
            norm0: BatchNorm2d::load(store, "features.norm0")?,
            blocks,
            transitions,
            norm5: BatchNorm2d::load(store, "features.norm5")?,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.conv0.in_channels()
    }

    /// `(B, C, H, W) -> (B, 1024)`. Spatial size must survive five halvings.
    pub fn features(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut y = self.norm0.forward(&self.conv0.forward(x)?, train)?.relu()?;
        y = max_pool_3x3_s2(&y)?;
        for (b, block) in self.blocks.iter().enumerate() {
            let mut feats = vec![y];
            for layer in block {
                let input = Tensor::cat(&feats, 1)?;
                feats.push(layer.forward(&input, train)?);
            }
            y = Tensor::cat(&feats, 1)?;
            if let Some(t) = self.transitions.get(b) {
                y = t.conv.forward(&t.norm.forward(&y, train)?.relu()?)?;
                y = y.avg_pool2d_with_stride(2, 2)?;
            }
        }
        let y = self.norm5.forward(&y, train)?.relu()?;
        global_avg_pool(&y)
    }
}
