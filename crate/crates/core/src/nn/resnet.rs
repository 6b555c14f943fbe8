//! ResNet-18 with torchvision parameter names.

use candle_core::Tensor;

use crate::error::Result;
use crate::nn::layers::{global_avg_pool, max_pool_3x3_s2, BatchNorm2d, Conv2d};
use crate::nn::params::{Init, ParamSpec, ParamStore};

pub const FEATURE_WIDTH: usize = 512;
pub const FIRST_CONV: &str = "conv1.weight";
pub const CLASSIFIER: &str = "fc";

const STAGES: [(usize, usize); 4] = [(64, 1), (128, 2), (256, 2), (512, 2)];

fn conv_spec(specs: &mut Vec<ParamSpec>, name: &str, out_c: usize, in_c: usize, k: usize) {
    // kaiming normal, fan_out mode
    specs.push(ParamSpec::weight(
        format!("{name}.weight"),
        &[out_c, in_c, k, k],
        Init::KaimingNormal { fan: out_c * k * k },
    ));
}

fn bn_spec(specs: &mut Vec<ParamSpec>, name: &str, c: usize) {
    specs.push(ParamSpec::weight(format!("{name}.weight"), &[c], Init::Const(1.0)));
    specs.push(ParamSpec::weight(format!("{name}.bias"), &[c], Init::Const(0.0)));
    specs.push(ParamSpec::buffer(format!("{name}.running_mean"), &[c], 0.0));
    specs.push(ParamSpec::buffer(format!("{name}.running_var"), &[c], 1.0));
}

/// Every parameter and buffer, including the 1000-way classifier.
pub fn param_specs() -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    conv_spec(&mut specs, "conv1", 64, 3, 7);
    bn_spec(&mut specs, "bn1", 64);
    let mut in_c = 64;
    for (stage, &(out_c, stride)) in STAGES.iter().enumerate() {
        for block in 0..2 {
            let p = format!("layer{}.{block}", stage + 1);
            let block_in = if block == 0 { in_c } else { out_c };
            conv_spec(&mut specs, &format!("{p}.conv1"), out_c, block_in, 3);
            bn_spec(&mut specs, &format!("{p}.bn1"), out_c);
            conv_spec(&mut specs, &format!("{p}.conv2"), out_c, out_c, 3);
            bn_spec(&mut specs, &format!("{p}.bn2"), out_c);
            if block == 0 && (stride != 1 || block_in != out_c) {
                conv_spec(&mut specs, &format!("{p}.downsample.0"), out_c, block_in, 1);
                bn_spec(&mut specs, &format!("{p}.downsample.1"), out_c);
            }
        }
        in_c = out_c;
    }
    specs.push(ParamSpec::weight(
        "fc.weight",
        &[1000, FEATURE_WIDTH],
        Init::linear_default(FEATURE_WIDTH),
    ));
    specs.push(ParamSpec::weight(
        "fc.bias",
        &[1000],
        Init::linear_default(FEATURE_WIDTH),
    ));
    specs
}

#[derive(Debug, Clone)]
struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    downsample: Option<(Conv2d, BatchNorm2d)>,
}

impl BasicBlock {
    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = self.bn1.forward(&self.conv1.forward(x)?, train)?.relu()?;
        let y = self.bn2.forward(&self.conv2.forward(&y)?, train)?;
        let identity = match &self.downsample {
            Some((conv, bn)) => bn.forward(&conv.forward(x)?, train)?,
            None => x.clone(),
        };
        Ok((y + identity)?.relu()?)
    }
}

/// Convolutional trunk up to global average pooling.
#[derive(Debug, Clone)]
pub struct ResNet18 {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    blocks: Vec<BasicBlock>,
}

impl ResNet18 {
    pub fn load(store: &ParamStore) -> Result<Self> {
        let mut blocks = Vec::new();
        for (stage, &(_, stride)) in STAGES.iter().enumerate() {
            for block in 0..2 {
                let p = format!("layer{}.{block}", stage + 1);
                let s = if block == 0 { stride } else { 1 };
                let ds_name = format!("{p}.downsample.0");
                let downsample = if store.contains(&format!("{ds_name}.weight")) {
                    Some((
                        Conv2d::load(store, &ds_name, s, 0)?,
                        BatchNorm2d::load(store, &format!("{p}.downsample.1"))?,
                    ))
                } else {
                    None
                };
                blocks.push(BasicBlock {
                    conv1: Conv2d::load(store, &format!("{p}.conv1"), s, 1)?,
                    bn1: BatchNorm2d::load(store, &format!("{p}.bn1"))?,
                    conv2: Conv2d::load(store, &format!("{p}.conv2"), 1, 1)?,
                    bn2: BatchNorm2d::load(store, &format!("{p}.bn2"))?,
                    downsample,
                });
            }
        }
        Ok(Self {
            conv1: Conv2d::load(store, "conv1", 2, 3)?,
            bn1: BatchNorm2d::load(store, "bn1")?,
            blocks,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.conv1.in_channels()
    }

    /// `(B, C, H, W) -> (B, 512)`.
    pub fn features(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut y = self.bn1.forward(&self.conv1.forward(x)?, train)?.relu()?;
        y = max_pool_3x3_s2(&y)?;
        for block in &self.blocks {
            y = block.forward(&y, train)?;
        }
        global_avg_pool(&y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::Role;

    #[test]
    fn parameter_count_matches_reference() {
        // torchvision resnet18: 11,689,512 learnable scalars
        let n: usize = param_specs()
            .iter()
            .filter(|s| s.role == Role::Weight)
            .map(|s| s.shape.iter().product::<usize>())
            .sum();
        assert_eq!(n, 11_689_512);
    }
}
