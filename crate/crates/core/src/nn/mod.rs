//! Network building blocks on top of candle tensors.

pub mod densenet;
pub mod layers;
pub mod params;
pub mod resnet;
pub mod tiny;

use candle_core::Tensor;

use crate::error::Result;
use crate::seed::Rng;
use params::ParamStore;

/// Forward-pass mode. Training mode carries the generator that drives
/// dropout masks.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut Rng),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// A 2-way image classifier trained by the engine.
pub trait Network {
    /// `(B, C, H, W)` input to `(B, 2)` logits.
    fn forward(&self, x: &Tensor, mode: &mut Mode<'_>) -> Result<Tensor>;

    /// Channel count the first layer expects.
    fn input_channels(&self) -> usize;

    fn store(&self) -> &ParamStore;

    /// Short identifier for logs and reports.
    fn describe(&self) -> String;

    /// Reject a network whose live layers contradict its configuration.
    fn check_consistency(&self) -> Result<()> {
        Ok(())
    }
}
