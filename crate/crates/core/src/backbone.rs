//! Four-stage convolutional encoder and atrous spatial pyramid pooling.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{as_batch, Ctx};
use crate::params::{he_normal, ones_param, zeros_param, ParamStore};
use crate::tensor::{Conv2dSpec, Tensor};

/// Number of encoder stages supervised by boundary heads.
pub const N_LAYER: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub stage_channels: [usize; N_LAYER],
    pub input_channels: usize,
    pub aspp_dilations: Vec<usize>,
    pub aspp_out_channels: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            stage_channels: [16, 32, 64, 128],
            input_channels: 1,
            aspp_dilations: vec![1, 2, 4],
            aspp_out_channels: 128,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.contains(&0) || self.input_channels == 0 || self.aspp_out_channels == 0 {
            return Err(Error::Config("encoder channel counts must be positive".into()));
        }
        if self.aspp_dilations.is_empty() || self.aspp_dilations.contains(&0) {
            return Err(Error::Config("aspp_dilations must be a nonempty list of positive rates".into()));
        }
        Ok(())
    }
}

/// Encoder outputs at strides 2, 4, 8, 16 and the ASPP-refined deepest map.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub stages: [Tensor; N_LAYER],
    pub x_aspp: Tensor,
}

pub fn init_params(
    cfg: &EncoderConfig,
    params: &mut ParamStore,
    buffers: &mut ParamStore,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    cfg.validate()?;
    let mut c_prev = cfg.input_channels;
    for (i, &c) in cfg.stage_channels.iter().enumerate() {
        let s = format!("enc.s{}", i + 1);
        params.insert(format!("{s}.conv1.w"), he_normal(&[c, c_prev, 3, 3], c_prev * 9, rng))?;
        params.insert(format!("{s}.bn1.gamma"), ones_param(&[c]))?;
        params.insert(format!("{s}.bn1.beta"), zeros_param(&[c]))?;
        buffers.insert(format!("{s}.bn1.running_mean"), Tensor::zeros(&[c]))?;
        buffers.insert(format!("{s}.bn1.running_var"), Tensor::ones(&[c]))?;
        params.insert(format!("{s}.conv2.w"), he_normal(&[c, c, 3, 3], c * 9, rng))?;
        params.insert(format!("{s}.conv2.b"), zeros_param(&[c]))?;
        params.insert(format!("{s}.down.w"), he_normal(&[c, c, 3, 3], c * 9, rng))?;
        params.insert(format!("{s}.down.b"), zeros_param(&[c]))?;
        c_prev = c;
    }
    let c4 = cfg.stage_channels[N_LAYER - 1];
    let a = cfg.aspp_out_channels;
    for j in 0..cfg.aspp_dilations.len() {
        params.insert(format!("aspp.b{j}.w"), he_normal(&[a, c4, 3, 3], c4 * 9, rng))?;
        params.insert(format!("aspp.b{j}.b"), zeros_param(&[a]))?;
    }
    params.insert("aspp.pool.w", he_normal(&[a, c4, 1, 1], c4, rng))?;
    params.insert("aspp.pool.b", zeros_param(&[a]))?;
    let fused = a * (cfg.aspp_dilations.len() + 1);
    params.insert("aspp.fuse.w", he_normal(&[a, fused, 1, 1], fused, rng))?;
    params.insert("aspp.fuse.b", zeros_param(&[a]))?;
    Ok(())
}

/// Runs the four encoder stages. Each stage is
/// conv3×3 → norm → ReLU → conv3×3 → ReLU → stride-2 conv3×3.
pub fn encode_stages(image: &Tensor, cfg: &EncoderConfig, ctx: &mut Ctx) -> Result<[Tensor; N_LAYER]> {
    let x = as_batch(image)?;
    let (h, w) = (x.shape()[2], x.shape()[3]);
    if h % 16 != 0 || w % 16 != 0 {
        return Err(Error::Config(format!("input {h}x{w} is not divisible by 16")));
    }
    if x.shape()[1] != cfg.input_channels {
        return Err(Error::Config(format!(
            "input has {} channels, encoder expects {}",
            x.shape()[1],
            cfg.input_channels
        )));
    }
    let same = Conv2dSpec::same(3, 1);
    let down = Conv2dSpec { stride: 2, padding: 1, dilation: 1 };
    let mut cur = x;
    let mut out = Vec::with_capacity(N_LAYER);
    for i in 1..=N_LAYER {
        let s = format!("enc.s{i}");
        let y = ctx.conv(&cur, &format!("{s}.conv1"), same)?;
        let y = ctx.batch_norm(&y, &format!("{s}.bn1"))?.relu();
        let y = ctx.conv(&y, &format!("{s}.conv2"), same)?.relu();
        cur = ctx.conv(&y, &format!("{s}.down"), down)?;
        out.push(cur.clone());
    }
    Ok(out.try_into().expect("four stages"))
}

/// Parallel dilated 3×3 branches plus a global-average branch, each with
/// ReLU, concatenated and fused by a 1×1 convolution.
pub fn aspp(f4: &Tensor, cfg: &EncoderConfig, ctx: &mut Ctx) -> Result<Tensor> {
    let f4 = as_batch(f4)?;
    let (n, h, w) = (f4.shape()[0], f4.shape()[2], f4.shape()[3]);
    let a = cfg.aspp_out_channels;
    let mut branches = Vec::with_capacity(cfg.aspp_dilations.len() + 1);
    for (j, &d) in cfg.aspp_dilations.iter().enumerate() {
        branches.push(ctx.conv(&f4, &format!("aspp.b{j}"), Conv2dSpec::same(3, d))?.relu());
    }
    let pooled = f4.mean_axes(&[2, 3])?;
    let global = ctx.conv(&pooled, "aspp.pool", Conv2dSpec::default())?.relu();
    branches.push(global.expand(&[n, a, h, w])?);
    let refs: Vec<&Tensor> = branches.iter().collect();
    let cat = Tensor::concat(&refs, 1)?;
    ctx.conv(&cat, "aspp.fuse", Conv2dSpec::default())
}

pub fn encode(image: &Tensor, cfg: &EncoderConfig, ctx: &mut Ctx) -> Result<FeaturePyramid> {
    let stages = encode_stages(image, cfg, ctx)?;
    let x_aspp = aspp(&stages[N_LAYER - 1], cfg, ctx)?;
    Ok(FeaturePyramid { stages, x_aspp })
}
