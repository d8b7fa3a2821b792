//! Layer helpers shared by the network components.

use crate::error::Result;
use crate::params::ParamStore;
use crate::tensor::{Conv2dSpec, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics.
    Eval,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Parameters and buffers visible to a forward pass, plus the running
/// statistic updates it produces.
pub struct Ctx<'a> {
    pub params: &'a ParamStore,
    pub buffers: &'a ParamStore,
    pub mode: Mode,
    pub buffer_updates: Vec<(String, Tensor)>,
}

impl<'a> Ctx<'a> {
    pub fn new(params: &'a ParamStore, buffers: &'a ParamStore, mode: Mode) -> Self {
        Ctx { params, buffers, mode, buffer_updates: Vec::new() }
    }

    pub fn p(&self, name: &str) -> Result<&Tensor> {
        self.params.get(name)
    }

    /// Convolution with `{prefix}.w` and, if registered, `{prefix}.b`.
    pub fn conv(&self, x: &Tensor, prefix: &str, spec: Conv2dSpec) -> Result<Tensor> {
        let w = self.params.get(&format!("{prefix}.w"))?;
        let bias_name = format!("{prefix}.b");
        let b = self.params.contains(&bias_name).then(|| self.params.get(&bias_name)).transpose()?;
        Ok(x.conv2d(w, b, spec)?)
    }

    /// Per-channel normalization of `[n, c, h, w]` with affine
    /// `{prefix}.gamma` / `{prefix}.beta`.
    pub fn batch_norm(&mut self, x: &Tensor, prefix: &str) -> Result<Tensor> {
        let shape = x.shape().to_vec();
        let c = shape[1];
        let per_channel = |t: &Tensor| -> Result<Tensor> { Ok(t.reshape(&[1, c, 1, 1])?.expand(&shape)?) };
        let gamma = per_channel(self.params.get(&format!("{prefix}.gamma"))?)?;
        let beta = per_channel(self.params.get(&format!("{prefix}.beta"))?)?;
        let mean_name = format!("{prefix}.running_mean");
        let var_name = format!("{prefix}.running_var");
        let normalized = match self.mode {
            Mode::Train => {
                let mean = x.mean_axes(&[0, 2, 3])?;
                let centered = x.sub(&mean.expand(&shape)?)?;
                let var = centered.mul(&centered)?.mean_axes(&[0, 2, 3])?;
                let inv_std = var.add_scalar(BN_EPS).powf(-0.5);
                let blend = |old: &Tensor, new: &Tensor| -> Result<Tensor> {
                    let data = old
                        .data()
                        .iter()
                        .zip(new.data())
                        .map(|(o, n)| (1.0 - BN_MOMENTUM) * o + BN_MOMENTUM * n)
                        .collect();
                    Ok(Tensor::new(old.shape(), data)?)
                };
                let new_mean = blend(self.buffers.get(&mean_name)?, &mean)?;
                let new_var = blend(self.buffers.get(&var_name)?, &var)?;
                self.buffer_updates.push((mean_name, new_mean));
                self.buffer_updates.push((var_name, new_var));
                centered.mul(&inv_std.expand(&shape)?)?
            }
            Mode::Eval => {
                let mean = self.buffers.get(&mean_name)?.detach();
                let var = self.buffers.get(&var_name)?.detach();
                let inv_std = var.add_scalar(BN_EPS).powf(-0.5);
                x.sub(&per_channel(&mean)?)?.mul(&per_channel(&inv_std)?)?
            }
        };
        Ok(normalized.mul(&gamma)?.add(&beta)?)
    }
}

/// Promotes `[c, h, w]` to `[1, c, h, w]`; rank-4 input passes through.
pub fn as_batch(x: &Tensor) -> Result<Tensor> {
    match *x.shape() {
        [c, h, w] => Ok(x.reshape(&[1, c, h, w])?),
        _ => Ok(x.clone()),
    }
}
