//! Global guidance blocks.
//!
//! Both blocks are non-local attention whose pairwise similarity is gated
//! element-wise by a second similarity computed from a guidance map `G`.
//! The guidance is the multi-layer integrated feature (MLIF): all four
//! encoder stages resized to the stride-4 grid and concatenated, then
//! brought to the shape of the deep feature `X`.
//!
//! Similarity maps are row-normalized: entry `[i, j]` is the weight that
//! output position (or channel) `i` gives to input `j`.

use rand_chacha::ChaCha8Rng;

use crate::backbone::{FeaturePyramid, N_LAYER};
use crate::error::{Error, Result};
use crate::nn::{as_batch, Ctx};
use crate::params::{he_normal, normal, zeros_param, ParamStore};
use crate::tensor::{Conv2dSpec, Tensor, TensorError};

pub const DEFAULT_REDUCTION: usize = 4;

/// Guidance map matched to `X` in channels and spatial extent.
#[derive(Debug, Clone)]
pub struct GuidanceMap {
    pub g: Tensor,
}

/// MLIF before and after projection onto `X`'s shape.
#[derive(Debug, Clone)]
pub struct Mlif {
    /// Stage features resized to stage 2 and concatenated on channels.
    pub integrated: Tensor,
    pub guidance: GuidanceMap,
}

#[derive(Debug, Clone)]
pub struct SpatialGgbParams {
    pub w_theta: Tensor,
    pub w_phi: Tensor,
    pub w_mu: Tensor,
    pub w_eta: Tensor,
    pub w_rho: Tensor,
}

#[derive(Debug, Clone)]
pub struct ChannelGgbParams {
    /// `[c / r, c]`
    pub w_fc1: Tensor,
    /// `[c, c / r]`
    pub w_fc2: Tensor,
}

#[derive(Debug, Clone)]
pub struct SpatialGgbOutput {
    pub y: Tensor,
    pub s_x: Tensor,
    /// Absent when the block runs without guidance.
    pub s_g: Option<Tensor>,
    pub s_m: Tensor,
}

#[derive(Debug, Clone)]
pub struct ChannelGgbOutput {
    pub z: Tensor,
    pub s_z: Tensor,
    pub beta: Tensor,
    pub v_lambda: Tensor,
    pub s_ghat: Option<Tensor>,
    pub s_q: Tensor,
}

impl SpatialGgbParams {
    pub fn from_store(p: &ParamStore) -> Result<Self> {
        Ok(SpatialGgbParams {
            w_theta: p.get("sggb.theta.w")?.clone(),
            w_phi: p.get("sggb.phi.w")?.clone(),
            w_mu: p.get("sggb.mu.w")?.clone(),
            w_eta: p.get("sggb.eta.w")?.clone(),
            w_rho: p.get("sggb.rho.w")?.clone(),
        })
    }
}

impl ChannelGgbParams {
    pub fn from_store(p: &ParamStore) -> Result<Self> {
        Ok(ChannelGgbParams {
            w_fc1: p.get("cggb.fc1.w")?.clone(),
            w_fc2: p.get("cggb.fc2.w")?.clone(),
        })
    }
}

/// Registers the MLIF projection and both blocks' weights for `c` channels.
pub fn init_params(
    stage_channels: &[usize; N_LAYER],
    c: usize,
    reduction: usize,
    params: &mut ParamStore,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    if reduction == 0 || c % reduction != 0 {
        return Err(Error::Config(format!("reduction {reduction} must divide {c} channels")));
    }
    let total: usize = stage_channels.iter().sum();
    params.insert("mlif.proj.w", he_normal(&[c, total, 1, 1], total, rng))?;
    params.insert("mlif.proj.b", zeros_param(&[c]))?;
    // Small similarity logits keep the softmaxes away from saturation at init.
    let attn_std = 1.0 / c as f64;
    for name in ["theta", "phi", "mu", "eta", "rho"] {
        params.insert(format!("sggb.{name}.w"), normal(&[c, c, 1, 1], attn_std, rng))?;
    }
    let hidden = c / reduction;
    params.insert("cggb.fc1.w", he_normal(&[hidden, c], c, rng))?;
    params.insert("cggb.fc2.w", he_normal(&[c, hidden], hidden, rng))?;
    Ok(())
}

/// Resizes every stage to stage 2's grid, concatenates on channels, then
/// resizes to `X`'s grid and projects to `X`'s channel count with a 1×1 conv.
pub fn build_mlif(pyr: &FeaturePyramid, ctx: &Ctx) -> Result<Mlif> {
    let target = (pyr.stages[1].shape()[2], pyr.stages[1].shape()[3]);
    let resized = pyr
        .stages
        .iter()
        .map(|f| f.resize_bilinear(target))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let refs: Vec<&Tensor> = resized.iter().collect();
    let integrated = Tensor::concat(&refs, 1)?;
    let x = &pyr.x_aspp;
    let down = integrated.resize_bilinear((x.shape()[2], x.shape()[3]))?;
    let g = ctx.conv(&down, "mlif.proj", Conv2dSpec::default())?;
    Ok(Mlif { integrated, guidance: GuidanceMap { g } })
}

fn check_matched(x: &Tensor, g: &Tensor) -> Result<()> {
    if x.shape() != g.shape() {
        return Err(TensorError::Dimension {
            op: "ggb",
            lhs: x.shape().to_vec(),
            rhs: g.shape().to_vec(),
        }
        .into());
    }
    Ok(())
}

/// `[n, c, h, w]` → `[n, hw, c]` (one row per position).
fn positions(t: &Tensor) -> Result<Tensor> {
    let (n, c) = (t.shape()[0], t.shape()[1]);
    let hw = t.shape()[2] * t.shape()[3];
    Ok(t.reshape(&[n, c, hw])?.transpose(1, 2)?)
}

/// `[n, c, h, w]` → `[n, c, hw]` (one row per channel).
fn channels(t: &Tensor) -> Result<Tensor> {
    let (n, c) = (t.shape()[0], t.shape()[1]);
    let hw = t.shape()[2] * t.shape()[3];
    Ok(t.reshape(&[n, c, hw])?)
}

fn restore_rank(t: Tensor, like: &Tensor) -> Result<Tensor> {
    if like.rank() == 3 {
        Ok(t.reshape(like.shape())?)
    } else {
        Ok(t)
    }
}

/// Spatial-wise block: `Y = S_M · μ(X) + X` with
/// `S_M = softmax(S_x ⊙ S_g)`, `S_x = softmax(θ(X) φ(X)ᵀ)` and
/// `S_g = softmax(ρ(G) η(G)ᵀ)` over `hw × hw` positions.
///
/// With `guided == false` the block is a plain non-local block, `S_M = S_x`.
pub fn spatial_ggb(x: &Tensor, g: &GuidanceMap, p: &SpatialGgbParams, guided: bool) -> Result<SpatialGgbOutput> {
    check_matched(x, &g.g)?;
    let xb = as_batch(x)?;
    let gb = as_batch(&g.g)?;
    let one = Conv2dSpec::default();
    let theta = xb.conv2d(&p.w_theta, None, one)?;
    let phi = xb.conv2d(&p.w_phi, None, one)?;
    let mu = xb.conv2d(&p.w_mu, None, one)?;

    let s_x = positions(&theta)?.matmul(&channels(&phi)?)?.softmax(2)?;
    let (s_g, s_m) = if guided {
        let eta = gb.conv2d(&p.w_eta, None, one)?;
        let rho = gb.conv2d(&p.w_rho, None, one)?;
        let s_g = positions(&rho)?.matmul(&channels(&eta)?)?.softmax(2)?;
        let s_m = s_x.mul(&s_g)?.softmax(2)?;
        (Some(s_g), s_m)
    } else {
        (None, s_x.clone())
    };
    let attended = s_m.matmul(&positions(&mu)?)?.transpose(1, 2)?.reshape(xb.shape())?;
    let y = restore_rank(attended.add(&xb)?, x)?;
    Ok(SpatialGgbOutput { y, s_x, s_g, s_m })
}

/// Channel-wise block: `Z = S_Q · Ŷ + Y` with `Ŷ` the `c × hw` view of `Y`,
/// `S_Q = softmax(S_Z ⊙ S_Ĝ)`, `S_Z = softmax(Ŷ Ŷᵀ)`, and `S_Ĝ` built the same
/// way from the guidance re-weighted per channel by a squeeze-excitation
/// gate `V_λ = sigmoid(W₂ relu(W₁ β))`, `β` the channel means of `G`.
pub fn channel_ggb(y: &Tensor, g: &GuidanceMap, p: &ChannelGgbParams, guided: bool) -> Result<ChannelGgbOutput> {
    check_matched(y, &g.g)?;
    let yb = as_batch(y)?;
    let gb = as_batch(&g.g)?;
    let (n, c) = (yb.shape()[0], yb.shape()[1]);
    let hw = yb.shape()[2] * yb.shape()[3];

    let y_hat = channels(&yb)?;
    let s_z = y_hat.matmul(&y_hat.transpose(1, 2)?)?.softmax(2)?;

    let beta = gb.mean_axes(&[2, 3])?.reshape(&[n, c])?;
    let hidden = beta.matmul(&p.w_fc1.transpose(0, 1)?)?.relu();
    let v_lambda = hidden.matmul(&p.w_fc2.transpose(0, 1)?)?.sigmoid();

    let (s_ghat, s_q) = if guided {
        let g_hat = v_lambda.reshape(&[n, c, 1])?.expand(&[n, c, hw])?.mul(&channels(&gb)?)?;
        let s_ghat = g_hat.matmul(&g_hat.transpose(1, 2)?)?.softmax(2)?;
        let s_q = s_z.mul(&s_ghat)?.softmax(2)?;
        (Some(s_ghat), s_q)
    } else {
        (None, s_z.clone())
    };
    let z = s_q.matmul(&y_hat)?.add(&y_hat)?.reshape(yb.shape())?;
    Ok(ChannelGgbOutput {
        z: restore_rank(z, y)?,
        s_z,
        beta,
        v_lambda,
        s_ghat,
        s_q,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn spatial_params(c: usize, rng: &mut ChaCha8Rng) -> SpatialGgbParams {
        SpatialGgbParams {
            w_theta: rand_tensor(&[c, c, 1, 1], rng),
            w_phi: rand_tensor(&[c, c, 1, 1], rng),
            w_mu: rand_tensor(&[c, c, 1, 1], rng),
            w_eta: rand_tensor(&[c, c, 1, 1], rng),
            w_rho: rand_tensor(&[c, c, 1, 1], rng),
        }
    }

    fn channel_params(c: usize, r: usize, rng: &mut ChaCha8Rng) -> ChannelGgbParams {
        ChannelGgbParams {
            w_fc1: rand_tensor(&[c / r, c], rng),
            w_fc2: rand_tensor(&[c, c / r], rng),
        }
    }

    fn assert_rows_normalized(s: &Tensor) {
        let len = *s.shape().last().unwrap();
        for row in s.data().chunks(len) {
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_mu_is_residual_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&[3, 4, 4], &mut rng);
        let g = GuidanceMap { g: rand_tensor(&[3, 4, 4], &mut rng) };
        let mut p = spatial_params(3, &mut rng);
        p.w_mu = Tensor::zeros(&[3, 3, 1, 1]);
        let out = spatial_ggb(&x, &g, &p, true).unwrap();
        assert_eq!(out.y.shape(), x.shape());
        assert_eq!(out.y.data(), x.data());
    }

    #[test]
    fn single_position_degenerates() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&[2, 1, 1], &mut rng);
        let g = GuidanceMap { g: rand_tensor(&[2, 1, 1], &mut rng) };
        let p = spatial_params(2, &mut rng);
        let out = spatial_ggb(&x, &g, &p, true).unwrap();
        assert_eq!(out.s_m.data(), &[1.0]);
        let mu = x.conv2d(&p.w_mu, None, Conv2dSpec::default()).unwrap();
        let want: Vec<f64> = mu.data().iter().zip(x.data()).map(|(a, b)| a + b).collect();
        assert_eq!(out.y.data(), want.as_slice());
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&[2, 4, 4], &mut rng);
        let g = GuidanceMap { g: rand_tensor(&[2, 2, 2], &mut rng) };
        let p = spatial_params(2, &mut rng);
        assert!(matches!(
            spatial_ggb(&x, &g, &p, true),
            Err(Error::Tensor(TensorError::Dimension { .. }))
        ));
        assert!(channel_ggb(&x, &g, &channel_params(2, 1, &mut rng), true).is_err());
    }

    #[test]
    fn single_channel_doubles() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let y = rand_tensor(&[1, 3, 3], &mut rng);
        let g = GuidanceMap { g: rand_tensor(&[1, 3, 3], &mut rng) };
        let out = channel_ggb(&y, &g, &channel_params(1, 1, &mut rng), true).unwrap();
        let doubled: Vec<f64> = y.data().iter().map(|v| 2.0 * v).collect();
        assert_eq!(out.z.data(), doubled.as_slice());
    }

    #[test]
    fn beta_of_constant_guidance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let y = rand_tensor(&[4, 2, 2], &mut rng);
        let g = GuidanceMap { g: Tensor::full(&[4, 2, 2], 0.37) };
        let out = channel_ggb(&y, &g, &channel_params(4, 2, &mut rng), true).unwrap();
        for b in out.beta.data() {
            assert!((b - 0.37).abs() < 1e-15);
        }
        assert!(out.v_lambda.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn similarity_rows_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_tensor(&[2, 4, 3, 3], &mut rng);
        let g = GuidanceMap { g: rand_tensor(&[2, 4, 3, 3], &mut rng) };
        let s = spatial_ggb(&x, &g, &spatial_params(4, &mut rng), true).unwrap();
        let c = channel_ggb(&s.y, &g, &channel_params(4, 2, &mut rng), true).unwrap();
        for m in [&s.s_x, s.s_g.as_ref().unwrap(), &s.s_m, &c.s_z, c.s_ghat.as_ref().unwrap(), &c.s_q] {
            assert_rows_normalized(m);
        }
        assert_eq!(s.s_x.shape(), &[2, 9, 9]);
        assert_eq!(c.s_q.shape(), &[2, 4, 4]);
    }

    #[test]
    fn channel_residual_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let y = rand_tensor(&[3, 2, 2], &mut rng);
        let g = GuidanceMap { g: rand_tensor(&[3, 2, 2], &mut rng) };
        let out = channel_ggb(&y, &g, &channel_params(3, 1, &mut rng), true).unwrap();
        let y_hat = y.reshape(&[1, 3, 4]).unwrap();
        let attended = out.s_q.matmul(&y_hat).unwrap();
        let want: Vec<f64> = attended.data().iter().zip(y.data()).map(|(a, b)| a + b).collect();
        assert_eq!(out.z.data(), want.as_slice());
    }

    #[test]
    fn unguided_uses_plain_similarity() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_tensor(&[2, 2, 2], &mut rng);
        let g = GuidanceMap { g: rand_tensor(&[2, 2, 2], &mut rng) };
        let s = spatial_ggb(&x, &g, &spatial_params(2, &mut rng), false).unwrap();
        assert!(s.s_g.is_none());
        assert_eq!(s.s_m.data(), s.s_x.data());
        let c = channel_ggb(&x, &g, &channel_params(2, 1, &mut rng), false).unwrap();
        assert!(c.s_ghat.is_none());
        assert_eq!(c.s_q.data(), c.s_z.data());
    }
}
