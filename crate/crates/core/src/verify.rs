//! Self-verification suite: gradient checks, attention normalization,
//! residual identities, metric oracles and boundary cases.
//!
//! Every check reports the quantity it measured next to its tolerance, so a
//! passing report also shows how much headroom each check has.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::bd::{bd_forward, boundary_gt};
use crate::error::Result;
use crate::ggb::{channel_ggb, spatial_ggb, ChannelGgbParams, GuidanceMap, SpatialGgbParams};
use crate::losses::{boundary_mse, dice_bce, total_loss, LayerPrediction, LayerTargets, LossWeights};
use crate::mask::BinaryMask;
use crate::metrics::{abd, hausdorff, overlap_metrics};
use crate::nn::{Ctx, Mode};
use crate::params::ParamStore;
use crate::tensor::{gradcheck, Conv2dSpec, Tensor, TensorError};

pub const GRADCHECK_TOL: f64 = 1e-3;
pub const GRADCHECK_EPS: f64 = 1e-6;
pub const ROW_SUM_TOL: f64 = 1e-6;
pub const DISTANCE_TOL: f64 = 1e-9;
pub const IDENTITY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl Check {
    /// Passes when `measured <= tolerance` (NaN fails).
    pub fn at_most(name: impl Into<String>, measured: f64, tolerance: f64) -> Self {
        Check { name: name.into(), measured, tolerance, passed: measured <= tolerance }
    }

    /// Headroom left before the check would fail.
    pub fn margin(&self) -> f64 {
        self.tolerance - self.measured
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
        for c in &self.checks {
            writeln!(
                f,
                "{} {:<width$}  measured {:>10.3e}  tolerance {:>9.1e}  margin {:>10.3e}",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.measured,
                c.tolerance,
                c.margin(),
            )?;
        }
        let failed = self.failures().count();
        write!(f, "{} checks, {} failed", self.checks.len(), failed)
    }
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("valid shape")
}

/// Values bounded away from zero with random sign, for ops with a kink at 0.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape, data).expect("valid shape")
}

/// Contracts a tensor with fixed random weights, so every output element
/// contributes a distinct amount to the scalar.
fn project(t: &Tensor, w: &Tensor) -> Result<Tensor> {
    Ok(t.mul(&w.reshape(t.shape())?)?.sum())
}

type ScalarFn = Box<dyn Fn(&Tensor) -> Result<Tensor>>;

struct GradCase {
    name: &'static str,
    f: ScalarFn,
    x: Tensor,
}

fn case(name: &'static str, x: Tensor, f: impl Fn(&Tensor) -> Result<Tensor> + 'static) -> GradCase {
    GradCase { name, f: Box::new(f), x }
}

fn spatial_params(c: usize, rng: &mut ChaCha8Rng) -> SpatialGgbParams {
    let mut w = || uniform(&[c, c, 1, 1], -1.0, 1.0, rng);
    SpatialGgbParams { w_theta: w(), w_phi: w(), w_mu: w(), w_eta: w(), w_rho: w() }
}

fn channel_params(c: usize, hidden: usize, rng: &mut ChaCha8Rng) -> ChannelGgbParams {
    ChannelGgbParams { w_fc1: uniform(&[hidden, c], -1.0, 1.0, rng), w_fc2: uniform(&[c, hidden], -1.0, 1.0, rng) }
}

fn gradient_cases(rng: &mut ChaCha8Rng) -> Vec<GradCase> {
    let mut cases = Vec::new();
    let w24 = uniform(&[24], -1.0, 1.0, rng);
    let other = uniform(&[2, 3, 4], -1.0, 1.0, rng);

    macro_rules! unary {
        ($name:expr, $x:expr, |$t:ident| $body:expr) => {{
            let w = w24.clone();
            cases.push(case($name, $x, move |$t: &Tensor| project(&$body, &w)));
        }};
    }
    let base = uniform(&[2, 3, 4], -1.0, 1.0, rng);
    let positive = uniform(&[2, 3, 4], 0.2, 2.0, rng);
    {
        let o = other.clone();
        unary!("add", base.clone(), |t| t.add(&o)?);
    }
    {
        let o = other.clone();
        unary!("sub", base.clone(), |t| o.sub(t)?);
    }
    {
        let o = other.clone();
        unary!("mul", base.clone(), |t| t.mul(&o)?);
    }
    unary!("mul self", base.clone(), |t| t.mul(t)?);
    unary!("add_scalar", base.clone(), |t| t.add_scalar(0.7));
    unary!("mul_scalar", base.clone(), |t| t.mul_scalar(-1.3));
    unary!("neg", base.clone(), |t| t.neg());
    unary!("relu", away_from_zero(&[2, 3, 4], rng), |t| t.relu());
    unary!("sigmoid", base.clone(), |t| t.sigmoid());
    unary!("exp", base.clone(), |t| t.exp());
    unary!("ln", positive.clone(), |t| t.ln());
    unary!("powf", positive.clone(), |t| t.powf(-0.5));
    unary!("clamp", away_from_zero(&[2, 3, 4], rng), |t| t.clamp(-0.05, 0.05).add(&t.clamp(-2.0, 2.0))?);
    unary!("softmax axis 0", base.clone(), |t| t.softmax(0)?);
    unary!("softmax axis 2", base.clone(), |t| t.softmax(2)?);
    unary!("reshape", base.clone(), |t| t.reshape(&[4, 6])?);
    unary!("permute", base.clone(), |t| t.permute(&[2, 0, 1])?);
    unary!("transpose", base.clone(), |t| t.transpose(0, 2)?);

    let w12 = uniform(&[12], -1.0, 1.0, rng);
    let w8 = uniform(&[8], -1.0, 1.0, rng);
    {
        let w = w8.clone();
        cases.push(case("sum_axis", base.clone(), move |t| project(&t.sum_axis(1)?, &w)));
    }
    cases.push(case("sum", base.clone(), |t| Ok(t.sum().mul_scalar(0.3))));
    cases.push(case("mean", base.clone(), |t| Ok(t.mean().mul(&t.mean())?)));
    {
        let w = uniform(&[2], -1.0, 1.0, rng);
        cases.push(case("mean_axes", base.clone(), move |t| project(&t.mean_axes(&[1, 2])?, &w)));
    }
    {
        let w = uniform(&[48], -1.0, 1.0, rng);
        cases.push(case("expand", uniform(&[2, 1, 4], -1.0, 1.0, rng), move |t| {
            project(&t.expand(&[2, 6, 4])?, &w)
        }));
    }
    {
        let (o, w) = (uniform(&[2, 2, 4], -1.0, 1.0, rng), uniform(&[40], -1.0, 1.0, rng));
        cases.push(case("concat", base.clone(), move |t| project(&Tensor::concat(&[&o, t], 1)?, &w)));
    }
    {
        let (b, w) = (uniform(&[4, 3], -1.0, 1.0, rng), w12.clone());
        cases.push(case("matmul 2d lhs", uniform(&[4, 4], -1.0, 1.0, rng), move |t| project(&t.matmul(&b)?, &w)));
    }
    {
        let (a, w) = (uniform(&[4, 4], -1.0, 1.0, rng), w12.clone());
        cases.push(case("matmul 2d rhs", uniform(&[4, 3], -1.0, 1.0, rng), move |t| project(&a.matmul(t)?, &w)));
    }
    {
        let (b, w) = (uniform(&[2, 4, 2], -1.0, 1.0, rng), uniform(&[12], -1.0, 1.0, rng));
        cases.push(case("matmul batched", uniform(&[2, 3, 4], -1.0, 1.0, rng), move |t| {
            project(&t.matmul(&b)?, &w)
        }));
    }
    {
        let (wt, bias, w) = (uniform(&[2, 2, 3, 3], -1.0, 1.0, rng), uniform(&[2], -1.0, 1.0, rng), uniform(&[50], -1.0, 1.0, rng));
        cases.push(case("conv2d input", uniform(&[1, 2, 5, 5], -1.0, 1.0, rng), move |t| {
            project(&t.conv2d(&wt, Some(&bias), Conv2dSpec::same(3, 1))?, &w)
        }));
    }
    {
        let (x, w) = (uniform(&[1, 2, 6, 6], -1.0, 1.0, rng), uniform(&[18], -1.0, 1.0, rng));
        cases.push(case("conv2d weight (stride 2)", uniform(&[2, 2, 3, 3], -1.0, 1.0, rng), move |t| {
            project(&x.conv2d(t, None, Conv2dSpec { stride: 2, padding: 1, dilation: 1 })?, &w)
        }));
    }
    {
        let (wt, w) = (uniform(&[1, 1, 3, 3], -1.0, 1.0, rng), uniform(&[36], -1.0, 1.0, rng));
        cases.push(case("conv2d dilated", uniform(&[1, 1, 6, 6], -1.0, 1.0, rng), move |t| {
            project(&t.conv2d(&wt, None, Conv2dSpec::same(3, 2))?, &w)
        }));
    }
    {
        let (x, w) = (uniform(&[1, 2, 4, 4], -1.0, 1.0, rng), uniform(&[32], -1.0, 1.0, rng));
        cases.push(case("conv2d bias", uniform(&[2], -1.0, 1.0, rng), move |t| {
            let wt = Tensor::ones(&[2, 2, 1, 1]);
            project(&x.conv2d(&wt, Some(t), Conv2dSpec::default())?, &w)
        }));
    }
    {
        let w = uniform(&[36], -1.0, 1.0, rng);
        cases.push(case("maxpool2d", uniform(&[1, 1, 6, 6], -1.0, 1.0, rng), move |t| {
            project(&t.maxpool2d(3, 1, 1)?, &w)
        }));
    }
    {
        let w = uniform(&[35], -1.0, 1.0, rng);
        cases.push(case("resize_bilinear up", uniform(&[1, 1, 3, 4], -1.0, 1.0, rng), move |t| {
            project(&t.resize_bilinear((5, 7))?, &w)
        }));
    }
    {
        let w = uniform(&[6], -1.0, 1.0, rng);
        cases.push(case("resize_bilinear down", uniform(&[1, 1, 7, 5], -1.0, 1.0, rng), move |t| {
            project(&t.resize_bilinear((3, 2))?, &w)
        }));
    }
    {
        let w = uniform(&[32], -1.0, 1.0, rng);
        cases.push(case("batch_norm (train)", uniform(&[2, 2, 2, 4], -1.0, 1.0, rng), move |t| {
            let mut params = ParamStore::new();
            params.insert("bn.gamma", Tensor::new(&[2], vec![1.3, 0.7])?)?;
            params.insert("bn.beta", Tensor::new(&[2], vec![0.1, -0.2])?)?;
            let mut buffers = ParamStore::new();
            buffers.insert("bn.running_mean", Tensor::zeros(&[2]))?;
            buffers.insert("bn.running_var", Tensor::ones(&[2]))?;
            let mut ctx = Ctx::new(&params, &buffers, Mode::Train);
            project(&ctx.batch_norm(t, "bn")?, &w)
        }));
    }

    // Composed blocks.
    let (c, h, w) = (3, 2, 3);
    let shape = [1, c, h, w];
    {
        let (p, g, wt) = (spatial_params(c, rng), uniform(&shape, -1.0, 1.0, rng), uniform(&[18], -1.0, 1.0, rng));
        cases.push(case("spatial_ggb wrt X", uniform(&shape, -1.0, 1.0, rng), move |t| {
            project(&spatial_ggb(t, &GuidanceMap { g: g.clone() }, &p, true)?.y, &wt)
        }));
    }
    {
        let (p, x, wt) = (spatial_params(c, rng), uniform(&shape, -1.0, 1.0, rng), uniform(&[18], -1.0, 1.0, rng));
        cases.push(case("spatial_ggb wrt G", uniform(&shape, -1.0, 1.0, rng), move |t| {
            project(&spatial_ggb(&x, &GuidanceMap { g: t.clone() }, &p, true)?.y, &wt)
        }));
    }
    {
        let (x, g, wt) = (uniform(&shape, -1.0, 1.0, rng), uniform(&shape, -1.0, 1.0, rng), uniform(&[18], -1.0, 1.0, rng));
        cases.push(case("spatial_ggb wrt w_theta", uniform(&[c, c, 1, 1], -1.0, 1.0, rng), move |t| {
            let mut p = spatial_params(c, &mut ChaCha8Rng::seed_from_u64(7));
            p.w_theta = t.clone();
            project(&spatial_ggb(&x, &GuidanceMap { g: g.clone() }, &p, true)?.y, &wt)
        }));
    }
    {
        let (p, g, wt) = (channel_params(c, 2, rng), uniform(&shape, -1.0, 1.0, rng), uniform(&[18], -1.0, 1.0, rng));
        cases.push(case("channel_ggb wrt Y", uniform(&shape, -1.0, 1.0, rng), move |t| {
            project(&channel_ggb(t, &GuidanceMap { g: g.clone() }, &p, true)?.z, &wt)
        }));
    }
    {
        let (p, y, wt) = (channel_params(c, 2, rng), uniform(&shape, -1.0, 1.0, rng), uniform(&[18], -1.0, 1.0, rng));
        cases.push(case("channel_ggb wrt G", uniform(&shape, -1.0, 1.0, rng), move |t| {
            project(&channel_ggb(&y, &GuidanceMap { g: t.clone() }, &p, true)?.z, &wt)
        }));
    }
    {
        let (y, g, wt) = (uniform(&shape, -1.0, 1.0, rng), uniform(&shape, -1.0, 1.0, rng), uniform(&[18], -1.0, 1.0, rng));
        cases.push(case("channel_ggb wrt w_fc1", uniform(&[2, c], -1.0, 1.0, rng), move |t| {
            let mut p = channel_params(c, 2, &mut ChaCha8Rng::seed_from_u64(8));
            p.w_fc1 = t.clone();
            project(&channel_ggb(&y, &GuidanceMap { g: g.clone() }, &p, true)?.z, &wt)
        }));
    }
    {
        let (wt, b, w1, w2) = (
            uniform(&[1, 2, 1, 1], -1.0, 1.0, rng),
            uniform(&[1], -1.0, 1.0, rng),
            uniform(&[25], -1.0, 1.0, rng),
            uniform(&[25], -1.0, 1.0, rng),
        );
        cases.push(case("bd_forward", uniform(&[1, 2, 5, 5], -1.0, 1.0, rng), move |t| {
            let out = bd_forward(t, &wt, &b)?;
            Ok(project(&out.boundary, &w1)?.add(&project(&out.seg_prob, &w2)?)?)
        }));
    }
    {
        let g = binary_tensor(&[16], rng);
        cases.push(case("dice_bce", uniform(&[16], 0.05, 0.95, rng), move |t| dice_bce(t, &g)));
    }
    {
        let b = binary_tensor(&[16], rng);
        cases.push(case("boundary_mse", uniform(&[16], -1.0, 1.0, rng), move |t| boundary_mse(t, &b)));
    }
    for (name, slot) in [("total_loss wrt final", 0usize), ("total_loss wrt layer seg", 1), ("total_loss wrt layer boundary", 2)] {
        let layers: Vec<(Tensor, Tensor, Tensor, Tensor)> = (0..4)
            .map(|_| {
                (
                    uniform(&[8], 0.05, 0.95, rng),
                    uniform(&[8], -0.5, 1.5, rng),
                    binary_tensor(&[8], rng),
                    binary_tensor(&[8], rng),
                )
            })
            .collect();
        let (fp, ft) = (uniform(&[8], 0.05, 0.95, rng), binary_tensor(&[8], rng));
        let x = match slot {
            2 => uniform(&[8], -0.5, 1.5, rng),
            _ => uniform(&[8], 0.05, 0.95, rng),
        };
        cases.push(case(name, x, move |t| {
            let preds: Vec<LayerPrediction> = layers
                .iter()
                .enumerate()
                .map(|(i, (p, d, _, _))| LayerPrediction {
                    seg_prob: if slot == 1 && i == 0 { t.clone() } else { p.clone() },
                    boundary: if slot == 2 && i == 0 { t.clone() } else { d.clone() },
                })
                .collect();
            let targets: Vec<LayerTargets> =
                layers.iter().map(|(_, _, m, b)| LayerTargets { mask: m.clone(), boundary: b.clone() }).collect();
            let final_prob = if slot == 0 { t.clone() } else { fp.clone() };
            Ok(total_loss(&preds, &final_prob, &targets, &ft, &LossWeights::default())?.total)
        }));
    }
    cases
}

fn binary_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| if rng.random_bool(0.4) { 1.0 } else { 0.0 }).collect()).expect("valid shape")
}

/// Relative gradient error of every op and composed block against central
/// differences.
pub fn gradient_checks(seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    gradient_cases(&mut rng)
        .into_iter()
        .map(|c| {
            debug_assert!(c.x.numel() <= 64, "{} uses {} inputs", c.name, c.x.numel());
            let err = gradcheck(|t| (c.f)(t).map_err(|e| TensorError::Usage(e.to_string())), &c.x, GRADCHECK_EPS).unwrap_or(f64::INFINITY);
            Check::at_most(format!("gradient: {}", c.name), err, GRADCHECK_TOL)
        })
        .collect()
}

fn max_row_error(s: &Tensor) -> f64 {
    let n = *s.shape().last().expect("rank >= 1");
    s.data()
        .chunks(n)
        .map(|row| (row.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, |a: f64, e| if e.is_nan() { f64::INFINITY } else { a.max(e) })
}

/// Row sums of every similarity matrix over `instances` random block inputs.
pub fn normalization_checks(instances: usize, seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names = ["S_x", "S_g", "S_M", "S_Z", "S_Ghat", "S_Q"];
    let mut worst = [0.0f64; 6];
    let mut plain = 0.0f64;
    for _ in 0..instances {
        let c = rng.random_range(1..=4);
        let (h, w) = (rng.random_range(1..=4), rng.random_range(1..=4));
        let scale = rng.random_range(0.1..4.0);
        let x = uniform(&[1, c, h, w], -scale, scale, &mut rng);
        let g = GuidanceMap { g: uniform(&[1, c, h, w], -scale, scale, &mut rng) };
        let hidden = rng.random_range(1..=c);
        let sp = spatial_ggb(&x, &g, &spatial_params(c, &mut rng), true).expect("valid spatial block");
        let ch = channel_ggb(&sp.y, &g, &channel_params(c, hidden, &mut rng), true).expect("valid channel block");
        let mats = [
            Some(&sp.s_x),
            sp.s_g.as_ref(),
            Some(&sp.s_m),
            Some(&ch.s_z),
            ch.s_ghat.as_ref(),
            Some(&ch.s_q),
        ];
        for (k, m) in mats.iter().enumerate() {
            let e = m.map_or(f64::INFINITY, max_row_error);
            worst[k] = worst[k].max(e);
        }
        let t = uniform(&[3, rng.random_range(1..=9)], -30.0, 30.0, &mut rng);
        plain = plain.max(max_row_error(&t.softmax(1).expect("axis 1 exists")));
    }
    let mut out = vec![Check::at_most("softmax row sums (plain)", plain, ROW_SUM_TOL)];
    out.extend(
        names.iter().zip(worst).map(|(n, e)| Check::at_most(format!("softmax row sums ({n})"), e, ROW_SUM_TOL)),
    );
    out
}

fn bit_mismatches(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).filter(|(x, y)| x.to_bits() != y.to_bits()).count() as f64
}

/// Exact residual identities of the guidance blocks. Measured values count
/// elements that differ bitwise.
pub fn residual_checks(seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut zero_mu, mut single, mut structure) = (0.0, 0.0, 0.0);
    for _ in 0..20 {
        let c = rng.random_range(1..=4);
        let (h, w) = (rng.random_range(1..=4), rng.random_range(1..=4));
        let x = uniform(&[1, c, h, w], -2.0, 2.0, &mut rng);
        let g = GuidanceMap { g: uniform(&[1, c, h, w], -2.0, 2.0, &mut rng) };
        let mut p = spatial_params(c, &mut rng);
        p.w_mu = Tensor::zeros(&[c, c, 1, 1]);
        zero_mu += bit_mismatches(spatial_ggb(&x, &g, &p, true).expect("valid").y.data(), x.data());

        let y1 = uniform(&[1, 1, h, w], -2.0, 2.0, &mut rng);
        let g1 = GuidanceMap { g: uniform(&[1, 1, h, w], -2.0, 2.0, &mut rng) };
        let z = channel_ggb(&y1, &g1, &channel_params(1, 1, &mut rng), true).expect("valid").z;
        let twice: Vec<f64> = y1.data().iter().map(|v| 2.0 * v).collect();
        single += bit_mismatches(z.data(), &twice);

        let cp = channel_params(c, 1, &mut rng);
        let out = channel_ggb(&x, &g, &cp, true).expect("valid");
        let y_hat = x.reshape(&[1, c, h * w]).expect("same size");
        let rebuilt = out.s_q.matmul(&y_hat).and_then(|a| a.add(&y_hat)).expect("shapes agree");
        structure += bit_mismatches(out.z.data(), rebuilt.data());
    }
    vec![
        Check::at_most("spatial_ggb with zero value projection returns X bitwise", zero_mu, 0.0),
        Check::at_most("channel_ggb with one channel returns 2Y exactly", single, 0.0),
        Check::at_most("channel_ggb output equals S_Q Y + Y bitwise", structure, 0.0),
    ]
}

/// Brute-force reference implementations used as oracles.
pub mod oracle {
    use crate::mask::BinaryMask;

    pub fn inner_boundary(m: &BinaryMask) -> Vec<(usize, usize)> {
        let (h, w) = m.dims();
        let mut out = Vec::new();
        for r in 0..h {
            for c in 0..w {
                if !m.get(r, c) {
                    continue;
                }
                let up = r == 0 || !m.get(r - 1, c);
                let down = r + 1 == h || !m.get(r + 1, c);
                let left = c == 0 || !m.get(r, c - 1);
                let right = c + 1 == w || !m.get(r, c + 1);
                if up || down || left || right {
                    out.push((r, c));
                }
            }
        }
        out
    }

    fn nearest(p: (usize, usize), set: &[(usize, usize)]) -> f64 {
        set.iter()
            .map(|&q| {
                let dr = p.0 as f64 - q.0 as f64;
                let dc = p.1 as f64 - q.1 as f64;
                (dr * dr + dc * dc).sqrt()
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// `(dice, jaccard, accuracy, recall, precision)` from pixel counts.
    pub fn overlap(pred: &BinaryMask, gt: &BinaryMask) -> [f64; 5] {
        let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0usize, 0usize, 0usize);
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            match (p, g) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, false) => tn += 1,
                (false, true) => fn_ += 1,
            }
        }
        if tp + fp + fn_ == 0 {
            return [1.0; 5];
        }
        let r = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        [
            r(2 * tp, 2 * tp + fp + fn_),
            r(tp, tp + fp + fn_),
            r(tp + tn, tp + fp + tn + fn_),
            r(tp, tp + fn_),
            r(tp, tp + fp),
        ]
    }

    /// `(hd, abd)` by exhaustive nearest-point search, `None` if a mask is empty.
    pub fn distances(pred: &BinaryMask, gt: &BinaryMask) -> Option<(f64, f64)> {
        let (a, b) = (inner_boundary(pred), inner_boundary(gt));
        if a.is_empty() || b.is_empty() {
            return None;
        }
        let da: Vec<f64> = a.iter().map(|&p| nearest(p, &b)).collect();
        let db: Vec<f64> = b.iter().map(|&p| nearest(p, &a)).collect();
        let hd = da.iter().chain(&db).copied().fold(0.0, f64::max);
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        Some((hd, (mean(&da) + mean(&db)) / 2.0))
    }
}

fn random_mask(h: usize, w: usize, rng: &mut ChaCha8Rng) -> BinaryMask {
    match rng.random_range(0..5) {
        0 => BinaryMask::empty(h, w),
        1 => {
            let (r0, c0) = (rng.random_range(0..h), rng.random_range(0..w));
            let (r1, c1) = (rng.random_range(r0..h), rng.random_range(c0..w));
            BinaryMask::from_fn(h, w, |r, c| (r0..=r1).contains(&r) && (c0..=c1).contains(&c))
        }
        _ => {
            let density = rng.random_range(0.05..0.7);
            let bits: Vec<bool> = (0..h * w).map(|_| rng.random_bool(density)).collect();
            BinaryMask::new(h, w, bits).expect("matching size")
        }
    }
}

/// Metric implementations against brute-force oracles on random mask pairs.
pub fn metric_checks(pairs: usize, seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut overlap_mismatch, mut dist_err, mut defined_mismatch, mut identity) = (0.0, 0.0f64, 0.0, 0.0f64);
    for _ in 0..pairs {
        let pred = random_mask(16, 16, &mut rng);
        let gt = random_mask(16, 16, &mut rng);
        let o = overlap_metrics(&pred, &gt).expect("same dims");
        let got = [o.dice, o.jaccard, o.accuracy, o.recall, o.precision];
        overlap_mismatch += bit_mismatches(&got, &oracle::overlap(&pred, &gt));
        identity = identity.max((o.dice - 2.0 * o.jaccard / (1.0 + o.jaccard)).abs());
        match (oracle::distances(&pred, &gt), hausdorff(&pred, &gt), abd(&pred, &gt)) {
            (Some((hd, ad)), Ok(h), Ok(a)) => dist_err = dist_err.max((hd - h).abs()).max((ad - a).abs()),
            (None, Err(_), Err(_)) => {}
            _ => defined_mismatch += 1.0,
        }
    }
    vec![
        Check::at_most("metrics: overlap ratios equal oracle exactly (mismatches)", overlap_mismatch, 0.0),
        Check::at_most("metrics: hd and abd match brute force", dist_err, DISTANCE_TOL),
        Check::at_most("metrics: distance definedness matches oracle (mismatches)", defined_mismatch, 0.0),
        Check::at_most("metrics: dice = 2J/(1+J)", identity, IDENTITY_TOL),
    ]
}

/// The two hand-constructed boundary cases.
pub fn boundary_checks() -> Vec<Check> {
    let square = BinaryMask::from_fn(5, 5, |r, c| (1..=3).contains(&r) && (1..=3).contains(&c));
    let rim = BinaryMask::from_fn(5, 5, |r, c| square.get(r, c) && (r, c) != (2, 2));
    let gt_mismatch = bit_mismatches(&boundary_gt(&square).to_values(), &rim.to_values());

    // Step from 0 to 1 between columns 2 and 3.
    let (h, w) = (4, 6);
    let f = Tensor::new(&[1, 1, h, w], (0..h * w).map(|i| if i % w >= 3 { 1.0 } else { 0.0 }).collect())
        .expect("valid shape");
    let e = bd_forward(&f, &Tensor::ones(&[1, 1, 1, 1]), &Tensor::zeros(&[1])).expect("valid head");
    let want: Vec<f64> = (0..h * w).map(|i| if i % w == 2 { -1.0 } else { 0.0 }).collect();
    let step_mismatch = bit_mismatches(e.boundary.data(), &want);
    vec![
        Check::at_most("boundary_gt of 3x3 square in 5x5 is its 8 rim pixels (mismatches)", gt_mismatch, 0.0),
        Check::at_most("bd_forward on a step edge is -1 on the off-side column only (mismatches)", step_mismatch, 0.0),
    ]
}

pub const DEFAULT_SEED: u64 = 0x5eed;

/// The full suite as run by the `verify` command.
pub fn run_all() -> VerifyReport {
    let mut checks = gradient_checks(DEFAULT_SEED);
    checks.extend(normalization_checks(100, DEFAULT_SEED));
    checks.extend(residual_checks(DEFAULT_SEED));
    checks.extend(metric_checks(200, DEFAULT_SEED));
    checks.extend(boundary_checks());
    VerifyReport { checks }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_boundary_matches_rim() {
        let sq = BinaryMask::from_fn(5, 5, |r, c| (1..=3).contains(&r) && (1..=3).contains(&c));
        assert_eq!(oracle::inner_boundary(&sq).len(), 8);
    }

    #[test]
    fn cheap_sections_pass() {
        for c in residual_checks(1).into_iter().chain(boundary_checks()).chain(metric_checks(30, 1)) {
            assert!(c.passed, "{c:?}");
        }
    }

    #[test]
    fn every_case_stays_within_64_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for c in gradient_cases(&mut rng) {
            assert!(c.x.numel() <= 64, "{}", c.name);
        }
    }

    #[test]
    fn nan_measurement_fails() {
        assert!(!Check::at_most("x", f64::NAN, 1.0).passed);
    }
}
