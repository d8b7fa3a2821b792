//! Synthetic ultrasound phantoms: one hypoechoic lesion on a brighter
//! background with optional irregular outline, blurred boundary, posterior
//! shadowing and multiplicative speckle.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::SegSample;
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::tensor::Tensor;

/// Brightness multiplier inside a shadow band.
const SHADOW_FACTOR: f64 = 0.55;
const HARMONICS: [f64; 3] = [2.0, 3.0, 4.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomParams {
    pub height: usize,
    pub width: usize,
    /// Range of the ellipse semi-axes in pixels.
    pub axes_min: f64,
    pub axes_max: f64,
    pub lesion_mean: f64,
    pub background_mean: f64,
    /// Standard deviation of the unit-mean speckle.
    pub speckle: f64,
    pub shadow_prob: f64,
    /// Gaussian sigma of the boundary blur in pixels; 0 disables it.
    pub blur: f64,
    /// Amplitude of low-frequency radial perturbation; 0 gives ellipses.
    pub irregularity: f64,
    pub seed: u64,
}

impl Default for PhantomParams {
    fn default() -> Self {
        PhantomParams {
            height: 64,
            width: 64,
            axes_min: 8.0,
            axes_max: 24.0,
            lesion_mean: 0.35,
            background_mean: 0.6,
            speckle: 0.25,
            shadow_prob: 0.3,
            blur: 1.5,
            irregularity: 0.15,
            seed: 0,
        }
    }
}

impl PhantomParams {
    fn max_radius(&self) -> f64 {
        self.axes_max * (1.0 + self.irregularity)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Phantom(m));
        if self.height == 0 || self.width == 0 {
            return bad("image extents must be positive".into());
        }
        if !(self.axes_min > 0.0 && self.axes_min <= self.axes_max) {
            return bad(format!("axes range [{}, {}] is degenerate", self.axes_min, self.axes_max));
        }
        if !(0.0..1.0).contains(&self.irregularity) {
            return bad(format!("irregularity {} must lie in [0, 1)", self.irregularity));
        }
        let fit = 2.0 * self.max_radius() + 2.0;
        if fit > self.height.min(self.width) as f64 {
            return bad(format!(
                "lesion of radius up to {:.1} px does not fit a {}x{} image",
                self.max_radius(),
                self.height,
                self.width
            ));
        }
        for (name, v) in [("lesion_mean", self.lesion_mean), ("background_mean", self.background_mean)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} {v} outside [0, 1]"));
            }
        }
        if !(self.speckle >= 0.0 && self.speckle.is_finite()) || !(self.blur >= 0.0 && self.blur.is_finite()) {
            return bad("speckle and blur must be finite and nonnegative".into());
        }
        if !(0.0..=1.0).contains(&self.shadow_prob) {
            return bad(format!("shadow_prob {} outside [0, 1]", self.shadow_prob));
        }
        Ok(())
    }
}

/// Lesion geometry drawn from the generator.
#[derive(Debug, Clone, PartialEq)]
pub struct LesionShape {
    pub center: (f64, f64),
    pub semi_axes: (f64, f64),
    pub rotation: f64,
    pub harmonics: [(f64, f64); 3],
}

impl LesionShape {
    fn draw(p: &PhantomParams, rng: &mut ChaCha8Rng) -> Self {
        let a = rng.random_range(p.axes_min..=p.axes_max);
        let b = rng.random_range(p.axes_min..=p.axes_max);
        let rotation = rng.random_range(0.0..PI);
        let mut harmonics = [(0.0, 0.0); 3];
        for h in &mut harmonics {
            *h = (
                p.irregularity * rng.random_range(0.0..1.0) / HARMONICS.len() as f64,
                rng.random_range(0.0..2.0 * PI),
            );
        }
        let r = a.max(b) * (1.0 + p.irregularity);
        let cy = rng.random_range(r..=(p.height as f64 - 1.0 - r));
        let cx = rng.random_range(r..=(p.width as f64 - 1.0 - r));
        LesionShape { center: (cy, cx), semi_axes: (a, b), rotation, harmonics }
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        let dy = r as f64 - self.center.0;
        let dx = c as f64 - self.center.1;
        let (s, co) = self.rotation.sin_cos();
        let u = dx * co + dy * s;
        let v = -dx * s + dy * co;
        let rho = ((u / self.semi_axes.0).powi(2) + (v / self.semi_axes.1).powi(2)).sqrt();
        let angle = v.atan2(u);
        let limit = 1.0
            + self
                .harmonics
                .iter()
                .zip(HARMONICS)
                .map(|(&(amp, phase), k)| amp * (k * angle + phase).cos())
                .sum::<f64>();
        rho <= limit
    }

    fn half_width(&self) -> f64 {
        self.semi_axes.0.max(self.semi_axes.1) * 0.8
    }
}

fn gaussian_blur(field: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            tmp[r * w + c] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * field[r * w + clamp(c as isize + k as isize - radius, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            out[r * w + c] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * tmp[clamp(r as isize + k as isize - radius, h) * w + c])
                .sum();
        }
    }
    out
}

/// Draws a phantom; fully determined by `params` (including its seed).
pub fn generate_phantom(params: &PhantomParams, id: impl Into<String>) -> Result<SegSample> {
    params.validate()?;
    let (h, w) = (params.height, params.width);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let shape = LesionShape::draw(params, &mut rng);
    let shadowed = rng.random_bool(params.shadow_prob);

    let mask = BinaryMask::from_fn(h, w, |r, c| shape.contains(r, c));
    let mut field: Vec<f64> = mask
        .data()
        .iter()
        .map(|&m| if m { params.lesion_mean } else { params.background_mean })
        .collect();
    if params.blur > 0.0 {
        field = gaussian_blur(&field, h, w, params.blur);
    }
    if shadowed {
        let (cy, cx) = shape.center;
        let half = shape.half_width();
        for r in 0..h {
            if (r as f64) < cy {
                continue;
            }
            for c in 0..w {
                if (c as f64 - cx).abs() <= half {
                    field[r * w + c] *= SHADOW_FACTOR;
                }
            }
        }
    }
    if params.speckle > 0.0 {
        let var = params.speckle * params.speckle;
        let gamma = Gamma::new(1.0 / var, var).map_err(|e| Error::Phantom(e.to_string()))?;
        for v in &mut field {
            *v *= gamma.sample(&mut rng);
        }
    }
    for v in &mut field {
        *v = v.clamp(0.0, 1.0);
    }
    let image = Tensor::new(&[1, h, w], field)?;
    Ok(SegSample::new(id, image, mask))
}

/// Seed of sample `index` in a dataset generated from `seed`.
pub fn sample_seed(seed: u64, index: u64) -> u64 {
    super::mix_seed(seed, 0x5048_414e_544f_4d00, index)
}
