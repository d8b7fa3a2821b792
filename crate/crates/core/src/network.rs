//! The full segmentation network: encoder, ASPP, guidance blocks, final
//! head and boundary-detection heads.

use serde::{Deserialize, Serialize};

use crate::backbone::{self, EncoderConfig, FeaturePyramid, N_LAYER};
use crate::bd::{self, boundary_target, BdOutput};
use crate::data::{stream_rng, SegSample};
use crate::error::{Error, Result};
use crate::ggb::{self, ChannelGgbOutput, ChannelGgbParams, GuidanceMap, SpatialGgbOutput, SpatialGgbParams};
use crate::losses::{total_loss, LayerPrediction, LayerTargets, LossBreakdown, LossWeights};
use crate::mask::BinaryMask;
use crate::nn::{as_batch, Ctx, Mode};
use crate::params::{normal, zeros_param, ParamStore};
use crate::tensor::{no_grad, Conv2dSpec, Tensor};

/// Which optional components are active. Switching a component off removes
/// its parameters from the table rather than leaving them inert.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub spatial_ggb: bool,
    pub channel_ggb: bool,
    /// Gate attention with the MLIF guidance; off gives plain non-local blocks.
    pub guidance: bool,
    /// Boundary heads and their deep-supervision loss terms.
    pub bd: bool,
}

impl Variant {
    pub const FULL: Variant = Variant { spatial_ggb: true, channel_ggb: true, guidance: true, bd: true };
    pub const BASELINE: Variant = Variant { spatial_ggb: false, channel_ggb: false, guidance: false, bd: false };
    pub const GGB_NO_BD: Variant = Variant { spatial_ggb: true, channel_ggb: true, guidance: true, bd: false };

    fn any_ggb(&self) -> bool {
        self.spatial_ggb || self.channel_ggb
    }

    fn uses_guidance(&self) -> bool {
        self.any_ggb() && self.guidance
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        match (self.spatial_ggb, self.channel_ggb) {
            (true, true) => parts.push("ggb"),
            (true, false) => parts.push("spatial-ggb"),
            (false, true) => parts.push("channel-ggb"),
            (false, false) => {}
        }
        if self.any_ggb() && !self.guidance {
            parts.push("unguided");
        }
        if self.bd {
            parts.push("bd");
        }
        if parts.is_empty() {
            "baseline".into()
        } else {
            format!("baseline+{}", parts.join("+"))
        }
    }
}

impl Default for Variant {
    fn default() -> Self {
        Variant::FULL
    }
}

/// Everything needed to rebuild the parameter table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub encoder: EncoderConfig,
    pub reduction: usize,
    pub variant: Variant,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture { encoder: EncoderConfig::default(), reduction: ggb::DEFAULT_REDUCTION, variant: Variant::FULL }
    }
}

// Independent initialization streams, so that shared components start from
// the same weights regardless of which optional parts are present.
const INIT_STREAM: u64 = 0x494e_4954;
const INIT_ENCODER: u64 = 0;
const INIT_GGB: u64 = 1;
const INIT_HEAD: u64 = 2;
const INIT_BD: u64 = 3;

#[derive(Debug, Clone)]
pub struct GgNet {
    pub arch: Architecture,
    pub params: ParamStore,
    /// Non-trainable state (normalization running statistics).
    pub buffers: ParamStore,
}

/// Outputs of one forward pass over a batch.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[n, 1, H, W]` in `(0, 1)`.
    pub final_prob: Tensor,
    /// `[n, 1, H/16, W/16]` before upsampling.
    pub final_logits: Tensor,
    /// One per encoder stage when boundary heads are enabled, else empty.
    pub bd: Vec<BdOutput>,
    pub pyramid: FeaturePyramid,
    pub spatial: Option<SpatialGgbOutput>,
    pub channel: Option<ChannelGgbOutput>,
    /// Running-statistic updates produced in training mode.
    pub buffer_updates: Vec<(String, Tensor)>,
}

impl GgNet {
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        arch.encoder.validate()?;
        let mut params = ParamStore::new();
        let mut buffers = ParamStore::new();
        backbone::init_params(&arch.encoder, &mut params, &mut buffers, &mut stream_rng(seed, INIT_STREAM, INIT_ENCODER))?;
        let c = arch.encoder.aspp_out_channels;
        if arch.variant.any_ggb() {
            let mut gp = ParamStore::new();
            ggb::init_params(&arch.encoder.stage_channels, c, arch.reduction, &mut gp, &mut stream_rng(seed, INIT_STREAM, INIT_GGB))?;
            for (name, t) in gp.iter() {
                let keep = (name.starts_with("mlif.") && arch.variant.uses_guidance())
                    || (name.starts_with("sggb.") && arch.variant.spatial_ggb && (arch.variant.guidance || !is_guidance_weight(name)))
                    || (name.starts_with("cggb.") && arch.variant.channel_ggb && arch.variant.guidance);
                if keep {
                    params.insert(name, t.clone())?;
                }
            }
        }
        let mut rng = stream_rng(seed, INIT_STREAM, INIT_HEAD);
        params.insert("head.w", normal(&[1, c, 1, 1], bd::HEAD_INIT_STD, &mut rng))?;
        params.insert("head.b", zeros_param(&[1]))?;
        if arch.variant.bd {
            let mut rng = stream_rng(seed, INIT_STREAM, INIT_BD);
            for (i, &ch) in arch.encoder.stage_channels.iter().enumerate() {
                bd::init_params(i + 1, ch, &mut params, &mut rng)?;
            }
        }
        Ok(GgNet { arch, params, buffers })
    }

    pub fn variant(&self) -> Variant {
        self.arch.variant
    }

    /// Number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    fn spatial_params(&self) -> Result<SpatialGgbParams> {
        if self.arch.variant.guidance {
            return SpatialGgbParams::from_store(&self.params);
        }
        // The guidance projections are never read on the unguided path.
        let w = self.params.get("sggb.theta.w")?.detach();
        Ok(SpatialGgbParams {
            w_theta: self.params.get("sggb.theta.w")?.clone(),
            w_phi: self.params.get("sggb.phi.w")?.clone(),
            w_mu: self.params.get("sggb.mu.w")?.clone(),
            w_eta: w.clone(),
            w_rho: w,
        })
    }

    fn channel_params(&self, c: usize) -> Result<ChannelGgbParams> {
        if self.arch.variant.guidance {
            return ChannelGgbParams::from_store(&self.params);
        }
        // The squeeze-excitation gate only feeds the guided similarity.
        let hidden = (c / self.arch.reduction).max(1);
        Ok(ChannelGgbParams { w_fc1: Tensor::zeros(&[hidden, c]), w_fc2: Tensor::zeros(&[c, hidden]) })
    }

    /// Runs the network on `[n, 1, H, W]` (or a single `[1, H, W]`) images.
    pub fn forward(&self, images: &Tensor, mode: Mode) -> Result<ForwardOutput> {
        let x = as_batch(images)?;
        let (h, w) = (x.shape()[2], x.shape()[3]);
        let mut ctx = Ctx::new(&self.params, &self.buffers, mode);
        let pyramid = backbone::encode(&x, &self.arch.encoder, &mut ctx)?;
        let v = self.arch.variant;

        let guidance = if v.uses_guidance() {
            ggb::build_mlif(&pyramid, &ctx)?.guidance
        } else {
            GuidanceMap { g: pyramid.x_aspp.detach() }
        };
        let mut feat = pyramid.x_aspp.clone();
        let spatial = if v.spatial_ggb {
            let out = ggb::spatial_ggb(&feat, &guidance, &self.spatial_params()?, v.guidance)?;
            feat = out.y.clone();
            Some(out)
        } else {
            None
        };
        let channel = if v.channel_ggb {
            let out = ggb::channel_ggb(&feat, &guidance, &self.channel_params(feat.shape()[1])?, v.guidance)?;
            feat = out.z.clone();
            Some(out)
        } else {
            None
        };
        let final_logits = ctx.conv(&feat, "head", Conv2dSpec::default())?;
        let final_prob = final_logits.resize_bilinear((h, w))?.sigmoid();
        let bd = if v.bd {
            pyramid
                .stages
                .iter()
                .enumerate()
                .map(|(i, f)| bd::bd_head(&ctx, f, i + 1))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        Ok(ForwardOutput {
            final_prob,
            final_logits,
            bd,
            pyramid,
            spatial,
            channel,
            buffer_updates: ctx.buffer_updates,
        })
    }

    /// Final-probability map for one `[1, H, W]` image, as `[H, W]` values.
    pub fn predict_prob(&self, image: &Tensor) -> Result<Vec<f64>> {
        no_grad(|| Ok(self.forward(image, Mode::Eval)?.final_prob.to_vec()))
    }

    /// Binary mask of pixels whose probability is strictly above `threshold`.
    pub fn infer(&self, image: &Tensor, threshold: f64) -> Result<BinaryMask> {
        let s = image.shape();
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        BinaryMask::from_threshold(&self.predict_prob(image)?, h, w, threshold)
    }

    /// Forward pass plus the composite loss over a batch of samples.
    pub fn loss(&self, batch: &[SegSample], weights: &LossWeights, mode: Mode) -> Result<(LossBreakdown, ForwardOutput)> {
        if batch.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let images = stack(batch.iter().map(|s| &s.image))?;
        let out = self.forward(&images, mode)?;
        let final_target = stack_masks(batch.iter().map(|s| s.mask.clone()))?;
        let mut preds = Vec::with_capacity(out.bd.len());
        let mut targets = Vec::with_capacity(out.bd.len());
        for head in &out.bd {
            let (lh, lw) = (head.boundary.shape()[2], head.boundary.shape()[3]);
            preds.push(LayerPrediction { seg_prob: head.seg_prob.clone(), boundary: head.boundary_pred() });
            targets.push(LayerTargets {
                mask: stack_masks(batch.iter().map(|s| s.mask.resize_nearest(lh, lw)))?,
                boundary: stack_masks(batch.iter().map(|s| boundary_target(&s.boundary, lh, lw)))?,
            });
        }
        let breakdown = total_loss(&preds, &out.final_prob, &targets, &final_target, weights)?;
        Ok((breakdown, out))
    }

    /// Writes running-statistic updates from a training forward pass.
    pub fn apply_buffer_updates(&mut self, updates: Vec<(String, Tensor)>) -> Result<()> {
        for (name, t) in updates {
            self.buffers.replace(&name, t)?;
        }
        Ok(())
    }
}

fn is_guidance_weight(name: &str) -> bool {
    name == "sggb.eta.w" || name == "sggb.rho.w"
}

/// Stacks `[1, H, W]` images into `[n, 1, H, W]`.
pub fn stack<'a>(images: impl Iterator<Item = &'a Tensor>) -> Result<Tensor> {
    let batched: Vec<Tensor> = images.map(as_batch).collect::<Result<_>>()?;
    let refs: Vec<&Tensor> = batched.iter().collect();
    Ok(Tensor::concat(&refs, 0)?)
}

fn stack_masks(masks: impl Iterator<Item = BinaryMask>) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut dims = None;
    let mut n = 0;
    for m in masks {
        dims.get_or_insert(m.dims());
        data.extend(m.to_values());
        n += 1;
    }
    let (h, w) = dims.unwrap_or((0, 0));
    Ok(Tensor::new(&[n, 1, h, w], data)?)
}

/// Expected shapes of the four boundary-head outputs for an `h × w` input.
pub fn bd_extents(h: usize, w: usize) -> [(usize, usize); N_LAYER] {
    std::array::from_fn(|i| (h >> (i + 1), w >> (i + 1)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_phantom, PhantomParams};

    pub(crate) fn tiny_arch(variant: Variant) -> Architecture {
        Architecture {
            encoder: EncoderConfig {
                stage_channels: [2, 3, 4, 4],
                input_channels: 1,
                aspp_dilations: vec![1, 2],
                aspp_out_channels: 4,
            },
            reduction: 2,
            variant,
        }
    }

    fn image() -> Tensor {
        let p = PhantomParams { height: 32, width: 32, axes_min: 4.0, axes_max: 8.0, seed: 1, ..Default::default() };
        generate_phantom(&p, "t").unwrap().image
    }

    #[test]
    fn shape_and_range() {
        let net = GgNet::new(tiny_arch(Variant::FULL), 0).unwrap();
        let out = net.forward(&image(), Mode::Eval).unwrap();
        assert_eq!(out.final_prob.shape(), &[1, 1, 32, 32]);
        assert!(out.final_prob.data().iter().all(|&p| p > 0.0 && p < 1.0));
        assert_eq!(out.bd.len(), 4);
        for (head, (h, w)) in out.bd.iter().zip(bd_extents(32, 32)) {
            assert_eq!(head.boundary.shape(), &[1, 1, h, w]);
        }
    }

    #[test]
    fn deterministic() {
        let a = GgNet::new(tiny_arch(Variant::FULL), 5).unwrap();
        let b = GgNet::new(tiny_arch(Variant::FULL), 5).unwrap();
        assert_eq!(a.parameter_count(), b.parameter_count());
        let pa = a.forward(&image(), Mode::Eval).unwrap().final_prob.to_vec();
        let pb = b.forward(&image(), Mode::Eval).unwrap().final_prob.to_vec();
        assert_eq!(pa, pb);
    }

    #[test]
    fn shared_components_share_initialization() {
        let full = GgNet::new(tiny_arch(Variant::FULL), 3).unwrap();
        let base = GgNet::new(tiny_arch(Variant::BASELINE), 3).unwrap();
        for (name, t) in base.params.iter() {
            assert_eq!(full.params.get(name).unwrap().data(), t.data(), "{name}");
        }
        assert!(base.parameter_count() < full.parameter_count());
    }

    #[test]
    fn zero_value_projection_reduces_to_baseline_path() {
        let v = Variant { channel_ggb: false, bd: false, ..Variant::FULL };
        let mut net = GgNet::new(tiny_arch(v), 9).unwrap();
        net.params.replace("sggb.mu.w", Tensor::zeros(&[4, 4, 1, 1])).unwrap();
        let base = GgNet::new(tiny_arch(Variant::BASELINE), 9).unwrap();
        let a = net.forward(&image(), Mode::Eval).unwrap().final_prob.to_vec();
        let b = base.forward(&image(), Mode::Eval).unwrap().final_prob.to_vec();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_head_gives_empty_mask() {
        let mut net = GgNet::new(tiny_arch(Variant::FULL), 0).unwrap();
        net.params.replace("head.w", Tensor::zeros(&[1, 4, 1, 1])).unwrap();
        let img = image();
        assert!(net.predict_prob(&img).unwrap().iter().all(|&p| p == 0.5));
        assert!(net.infer(&img, 0.5).unwrap().is_empty());
    }

    #[test]
    fn threshold_monotone() {
        let net = GgNet::new(tiny_arch(Variant::FULL), 2).unwrap();
        let img = image();
        let mut prev = usize::MAX;
        for t in [0.0, 0.2, 0.4, 0.5, 0.6, 0.8, 1.0] {
            let n = net.infer(&img, t).unwrap().count();
            assert!(n <= prev);
            prev = n;
        }
    }

    #[test]
    fn unguided_variant_has_no_guidance_weights() {
        let v = Variant { guidance: false, ..Variant::FULL };
        let net = GgNet::new(tiny_arch(v), 0).unwrap();
        assert!(!net.params.contains("mlif.proj.w"));
        assert!(!net.params.contains("sggb.eta.w"));
        assert!(!net.params.contains("cggb.fc1.w"));
        net.forward(&image(), Mode::Train).unwrap();
    }

    #[test]
    fn labels() {
        assert_eq!(Variant::BASELINE.label(), "baseline");
        assert_eq!(Variant::GGB_NO_BD.label(), "baseline+ggb");
        assert_eq!(Variant::FULL.label(), "baseline+ggb+bd");
    }
}
