//! Optimizers over the trainable parameter group.

use std::fmt;
use std::str::FromStr;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Adam (beta 0.9/0.999, eps 1e-8, no weight decay).
    #[default]
    Adam,
    /// Heavy-ball SGD with momentum 0.9.
    SgdMomentum,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::SgdMomentum => "sgd_momentum",
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" | "sgd_momentum" | "momentum" => Ok(OptimizerKind::SgdMomentum),
            other => Err(Error::Parse(format!("unknown optimizer {other:?}"))),
        }
    }
}

pub const SGD_MOMENTUM: f64 = 0.9;

/// SGD with momentum in the PyTorch formulation:
/// `v ← μ·v + g`, `θ ← θ − lr·v`.
#[derive(Debug)]
pub struct MomentumSgd {
    vars: Vec<(Var, Option<Tensor>)>,
    lr: f64,
    momentum: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct MomentumParams {
    pub lr: f64,
    pub momentum: f64,
}

impl Optimizer for MomentumSgd {
    type Config = MomentumParams;

    fn new(vars: Vec<Var>, config: MomentumParams) -> candle_core::Result<Self> {
        Ok(Self {
            vars: vars
                .into_iter()
                .filter(|v| v.dtype().is_float())
                .map(|v| (v, None))
                .collect(),
            lr: config.lr,
            momentum: config.momentum,
        })
    }

    fn step(&mut self, grads: &GradStore) -> candle_core::Result<()> {
        for (var, velocity) in self.vars.iter_mut() {
            let Some(g) = grads.get(var) else { continue };
            let v = match velocity.take() {
                Some(prev) => ((prev * self.momentum)? + g)?,
                None => g.clone(),
            };
            var.set(&var.as_tensor().sub(&(&v * self.lr)?)?)?;
            *velocity = Some(v);
        }
        Ok(())
    }

    fn learning_rate(&self) -> f64 {
        self.lr
    }

    fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }
}

/// Runtime-selected optimizer.
#[derive(Debug)]
pub enum Optim {
    Adam(AdamW),
    Sgd(MomentumSgd),
}

impl Optim {
    pub fn new(kind: OptimizerKind, vars: Vec<Var>, lr: f64) -> Result<Self> {
        Ok(match kind {
            OptimizerKind::Adam => Optim::Adam(AdamW::new(
                vars,
                ParamsAdamW {
                    lr,
                    weight_decay: 0.0,
                    ..ParamsAdamW::default()
                },
            )?),
            OptimizerKind::SgdMomentum => Optim::Sgd(MomentumSgd::new(
                vars,
                MomentumParams {
                    lr,
                    momentum: SGD_MOMENTUM,
                },
            )?),
        })
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        match self {
            Optim::Adam(o) => o.step(grads)?,
            Optim::Sgd(o) => o.step(grads)?,
        }
        Ok(())
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        match self {
            Optim::Adam(o) => o.set_learning_rate(lr),
            Optim::Sgd(o) => o.set_learning_rate(lr),
        }
    }

    pub fn learning_rate(&self) -> f64 {
        match self {
            Optim::Adam(o) => o.learning_rate(),
            Optim::Sgd(o) => o.learning_rate(),
        }
    }
}
