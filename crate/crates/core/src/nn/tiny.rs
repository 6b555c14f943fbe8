//! Small reference network used to rank augmentations: three blocks of
//! (3×3 conv, ReLU, 2×2 max pool) with widths 16/32/64, global average
//! pooling and a 2-way affine output. Takes single-channel input.

use candle_core::{DType, Tensor};

use crate::error::Result;
use crate::nn::layers::{global_avg_pool, Conv2d, Linear};
use crate::nn::params::{instantiate, Init, ParamSpec, ParamStore};
use crate::nn::{Mode, Network};
use crate::seed::SeedBank;

const WIDTHS: [usize; 3] = [16, 32, 64];

pub fn param_specs() -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    let mut in_c = 1;
    for (i, &w) in WIDTHS.iter().enumerate() {
        let fan_in = in_c * 9;
        specs.push(ParamSpec::weight(
            format!("features.{i}.weight"),
            &[w, in_c, 3, 3],
            Init::KaimingNormal { fan: fan_in },
        ));
        specs.push(ParamSpec::weight(format!("features.{i}.bias"), &[w], Init::Const(0.0)));
        in_c = w;
    }
    specs.push(ParamSpec::weight("fc.weight", &[2, in_c], Init::linear_default(in_c)));
    specs.push(ParamSpec::weight("fc.bias", &[2], Init::linear_default(in_c)));
    specs
}

#[derive(Debug, Clone)]
pub struct TinyCnn {
    store: ParamStore,
    convs: Vec<Conv2d>,
    fc: Linear,
}

impl TinyCnn {
    pub fn new(seeds: &SeedBank, dtype: DType) -> Result<Self> {
        let mut store = ParamStore::new(dtype)?;
        instantiate(&mut store, &param_specs(), &mut seeds.rng("init"))?;
        let convs = (0..WIDTHS.len())
            .map(|i| Conv2d::load(&store, &format!("features.{i}"), 1, 1))
            .collect::<Result<_>>()?;
        let fc = Linear::load(&store, "fc")?;
        Ok(Self { store, convs, fc })
    }
}

impl Network for TinyCnn {
    fn forward(&self, x: &Tensor, mode: &mut Mode<'_>) -> Result<Tensor> {
        let mut y = x.clone();
        for conv in &self.convs {
            y = conv.forward(&y)?.relu()?.max_pool2d(2)?;
        }
        // no dropout or normalization, so both modes compute the same function
        let _ = mode;
        self.fc.forward(&global_avg_pool(&y)?)
    }

    fn input_channels(&self) -> usize {
        1
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn describe(&self) -> String {
        "reference-cnn".to_string()
    }
}
