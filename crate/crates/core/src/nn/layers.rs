//! Layer primitives built on parameter-store tensors.

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng as _;

use crate::error::Result;
use crate::nn::params::ParamStore;
use crate::seed::Rng;

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn load(store: &ParamStore, prefix: &str, stride: usize, padding: usize) -> Result<Self> {
        let bias_name = format!("{prefix}.bias");
        let bias = if store.contains(&bias_name) {
            Some(store.tensor(&bias_name)?)
        } else {
            None
        };
        Ok(Self {
            weight: store.tensor(&format!("{prefix}.weight"))?,
            bias,
            stride,
            padding,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.reshape((1, (), 1, 1))?)?),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn load(store: &ParamStore, prefix: &str) -> Result<Self> {
        Ok(Self {
            weight: store.tensor(&format!("{prefix}.weight"))?,
            bias: store.tensor(&format!("{prefix}.bias"))?,
        })
    }

    pub fn out_features(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

/// 2-D batch normalization. In training mode it normalizes with batch
/// statistics and folds them into the running buffers (momentum 0.1,
/// unbiased variance); otherwise it uses the stored statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    weight: Tensor,
    bias: Tensor,
    running_mean: Var,
    running_var: Var,
}

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

impl BatchNorm2d {
    pub fn load(store: &ParamStore, prefix: &str) -> Result<Self> {
        Ok(Self {
            weight: store.tensor(&format!("{prefix}.weight"))?,
            bias: store.tensor(&format!("{prefix}.bias"))?,
            running_mean: store.var(&format!("{prefix}.running_mean"))?.clone(),
            running_var: store.var(&format!("{prefix}.running_var"))?.clone(),
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let c = x.dims()[1];
        let w = self.weight.reshape((1, c, 1, 1))?;
        let b = self.bias.reshape((1, c, 1, 1))?;
        if !train {
            let rm = self.running_mean.as_tensor().detach();
            let rv = self.running_var.as_tensor().detach();
            let scale = (&self.weight / (rv + BN_EPS)?.sqrt()?)?;
            let shift = (&self.bias - (rm * &scale)?)?;
            return Ok(x
                .broadcast_mul(&scale.reshape((1, c, 1, 1))?)?
                .broadcast_add(&shift.reshape((1, c, 1, 1))?)?);
        }
        let (n, _, h, wd) = x.dims4()?;
        let mean = x.mean_keepdim((0, 2, 3))?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim((0, 2, 3))?;
        let xhat = centered.broadcast_div(&(&var + BN_EPS)?.sqrt()?)?;
        let y = xhat.broadcast_mul(&w)?.broadcast_add(&b)?;

        let count = (n * h * wd) as f64;
        let unbiased = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
        let batch_mean = mean.detach().flatten_all()?;
        let batch_var = (var.detach().flatten_all()? * unbiased)?;
        let rm = self.running_mean.as_tensor().detach();
        let rv = self.running_var.as_tensor().detach();
        let next_mean = ((rm * (1.0 - BN_MOMENTUM))? + (batch_mean * BN_MOMENTUM)?)?;
        let next_var = ((rv * (1.0 - BN_MOMENTUM))? + (batch_var * BN_MOMENTUM)?)?;
        self.running_mean.set(&next_mean)?;
        self.running_var.set(&next_var)?;
        Ok(y)
    }
}

/// 3×3 max pooling, stride 2, padding 1. Inputs must be non-negative
/// (post-ReLU) so zero padding never wins a window.
pub fn max_pool_3x3_s2(x: &Tensor) -> Result<Tensor> {
    let padded = x.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?;
    if !x.track_op() {
        return Ok(padded.max_pool2d_with_stride(3, 2)?);
    }
    // candle only differentiates non-overlapping pools; take the separable
    // max over shifted index selections instead
    let (_, _, hp, wp) = padded.dims4()?;
    let rows = window_max(&padded, 2, hp)?;
    window_max(&rows, 3, wp)
}

fn window_max(x: &Tensor, dim: usize, padded_len: usize) -> Result<Tensor> {
    let out_len = (padded_len - 3) / 2 + 1;
    let mut acc: Option<Tensor> = None;
    for offset in 0..3u32 {
        let idx: Vec<u32> = (0..out_len as u32).map(|i| 2 * i + offset).collect();
        let idx = Tensor::from_vec(idx, out_len, x.device())?;
        let sel = x.index_select(&idx, dim)?;
        acc = Some(match acc {
            None => sel,
            Some(a) => a.maximum(&sel)?,
        });
    }
    Ok(acc.expect("three offsets"))
}

/// Mean over the spatial axes: `(B, C, H, W) -> (B, C)`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean((2, 3))?)
}

/// Inverted dropout with a seeded mask.
pub fn dropout(x: &Tensor, p: f64, rng: &mut Rng) -> Result<Tensor> {
    if p <= 0.0 {
        return Ok(x.clone());
    }
    let keep = 1.0 - p;
    let scale = 1.0 / keep;
    let mask: Vec<f32> = (0..x.elem_count())
        .map(|_| if rng.random_bool(keep) { scale as f32 } else { 0.0 })
        .collect();
    let mask = Tensor::from_vec(mask, x.shape(), &Device::Cpu)?.to_dtype(x.dtype())?;
    Ok(x.mul(&mask)?)
}

/// Index of the larger logit per row; exact ties resolve to class 0.
pub fn argmax_rows(logits: &Tensor) -> Result<(Vec<usize>, usize)> {
    let rows = logits.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    let mut ties = 0;
    let preds = rows
        .iter()
        .map(|r| {
            let mut best = 0;
            for (i, &v) in r.iter().enumerate().skip(1) {
                if v > r[best] {
                    best = i;
                } else if v == r[best] {
                    ties += 1;
                }
            }
            best
        })
        .collect();
    Ok((preds, ties))
}

/// Mean cross-entropy of `(B, K)` logits against class indices.
pub fn cross_entropy(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::loss::cross_entropy(logits, targets)?)
}

/// Softmax over the last axis.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::softmax(logits, D::Minus1)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::{Init, ParamSpec, Role};
    use candle_core::Var;
    use rand::SeedableRng;

    fn cpu() -> Device {
        Device::Cpu
    }

    #[test]
    fn separable_pool_matches_native() {
        let mut rng = Rng::seed_from_u64(3);
        let vals: Vec<f32> = (0..2 * 3 * 9 * 11).map(|_| rng.random::<f32>()).collect();
        let x = Tensor::from_vec(vals, (2, 3, 9, 11), &cpu()).unwrap();
        let native = max_pool_3x3_s2(&x).unwrap();
        let var = Var::from_tensor(&x).unwrap();
        let tracked = max_pool_3x3_s2(var.as_tensor()).unwrap();
        assert_eq!(native.dims(), &[2, 3, 5, 6]);
        let d = (native - tracked).unwrap().abs().unwrap().max_all().unwrap();
        assert_eq!(d.to_scalar::<f32>().unwrap(), 0.0);
    }

    #[test]
    fn pool_gradient_routes_to_window_max() {
        let x = Tensor::from_vec(
            vec![0.1f32, 0.9, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8],
            (1, 1, 3, 3),
            &cpu(),
        )
        .unwrap();
        let var = Var::from_tensor(&x).unwrap();
        let y = max_pool_3x3_s2(var.as_tensor()).unwrap();
        // 3x3 input -> 2x2 output
        let grads = y.sum_all().unwrap().backward().unwrap();
        let g = grads
            .get(var.as_tensor())
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap();
        // windows: tl {0.1,0.9,0.3,0.4}->0.9; tr {0.9,0.2,0.4,0.5}->0.9;
        // bl {0.3,0.4,0.6,0.7}->0.7; br {0.4,0.5,0.7,0.8}->0.8
        assert_eq!(g, vec![0.0, 2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn batchnorm_train_then_eval() {
        let mut store = ParamStore::new(DType::F32).unwrap();
        let mut rng = Rng::seed_from_u64(0);
        crate::nn::params::instantiate(
            &mut store,
            &[
                ParamSpec::weight("bn.weight", &[2], Init::Const(1.0)),
                ParamSpec::weight("bn.bias", &[2], Init::Const(0.0)),
                ParamSpec::buffer("bn.running_mean", &[2], 0.0),
                ParamSpec::buffer("bn.running_var", &[2], 1.0),
            ],
            &mut rng,
        )
        .unwrap();
        let bn = BatchNorm2d::load(&store, "bn").unwrap();
        let x = Tensor::from_vec(vec![1f32, 3.0, 10.0, 10.0], (2, 2, 1, 1), &cpu()).unwrap();
        // channel 0 values {1, 10}, channel 1 values {3, 10}
        let y = bn.forward(&x, true).unwrap();
        let y = y.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!((y[0] + 1.0).abs() < 1e-3 && (y[2] - 1.0).abs() < 1e-3);
        let rm = store
            .var("bn.running_mean")
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap();
        assert!((rm[0] - 0.55).abs() < 1e-6 && (rm[1] - 0.65).abs() < 1e-6);
        let rv = store
            .var("bn.running_var")
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap();
        // unbiased var of {1,10} = 40.5
        assert!((rv[0] - (0.9 + 4.05)).abs() < 1e-4);
        let _ = Role::Buffer;
    }

    #[test]
    fn argmax_ties_go_to_norm() {
        let t = Tensor::from_vec(vec![0.5f32, 0.5, 0.1, 0.2, 0.3, 0.1], (3, 2), &cpu()).unwrap();
        let (p, ties) = argmax_rows(&t).unwrap();
        assert_eq!(p, vec![0, 1, 0]);
        assert_eq!(ties, 1);
    }

    #[test]
    fn dropout_keeps_expected_fraction() {
        let mut rng = Rng::seed_from_u64(9);
        let x = Tensor::ones(10_000, DType::F32, &cpu()).unwrap();
        let y = dropout(&x, 0.2, &mut rng).unwrap().to_vec1::<f32>().unwrap();
        let kept = y.iter().filter(|&&v| v > 0.0).count() as f64 / 1e4;
        assert!((kept - 0.8).abs() < 0.02);
        assert!(y.iter().all(|&v| v == 0.0 || (v - 1.25).abs() < 1e-6));
    }
}
