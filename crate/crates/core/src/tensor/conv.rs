//! Spatial operators over `[c, h, w]` or `[n, c, h, w]` tensors.

use super::gemm::{gemm_acc, transpose2};
use super::{Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Conv2dSpec { stride: 1, padding: 0, dilation: 1 }
    }
}

impl Conv2dSpec {
    /// Stride 1 with padding that keeps the spatial shape of a `k×k` kernel.
    pub fn same(k: usize, dilation: usize) -> Self {
        Conv2dSpec { stride: 1, padding: dilation * (k - 1) / 2, dilation }
    }

    pub fn output_extent(&self, input: usize, k: usize) -> Option<usize> {
        let span = self.dilation * (k - 1) + 1;
        let padded = input + 2 * self.padding;
        (padded >= span && self.stride > 0).then(|| (padded - span) / self.stride + 1)
    }
}

/// `(n, c, h, w)` of a rank-3 or rank-4 tensor.
fn nchw(op: &'static str, x: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *x.shape() {
        [c, h, w] => Ok((1, c, h, w)),
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(TensorError::Config {
            op,
            msg: format!("expected [c,h,w] or [n,c,h,w], got {:?}", x.shape()),
        }),
    }
}

fn with_spatial(x: &Tensor, n: usize, c: usize, h: usize, w: usize) -> Vec<usize> {
    if x.rank() == 3 {
        vec![c, h, w]
    } else {
        vec![n, c, h, w]
    }
}

struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    ho: usize,
    wo: usize,
    spec: Conv2dSpec,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Calls `f(col_row, col_index, input_index)` for every in-bounds tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let Conv2dSpec { stride, padding, dilation } = self.spec;
        for c in 0..self.c_in {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let r = (c * self.k + ky) * self.k + kx;
                    for oy in 0..self.ho {
                        let iy = (oy * stride + ky * dilation) as isize - padding as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for ox in 0..self.wo {
                            let ix = (ox * stride + kx * dilation) as isize - padding as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            f(r, oy * self.wo + ox, (c * self.h + iy as usize) * self.w + ix as usize);
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let l = self.cols();
        let mut col = vec![0.0; self.rows() * l];
        self.for_each_tap(|r, j, i| col[r * l + j] = x[i]);
        col
    }

    fn col2im_acc(&self, col: &[f64], gx: &mut [f64]) {
        let l = self.cols();
        self.for_each_tap(|r, j, i| gx[i] += col[r * l + j]);
    }
}

impl Tensor {
    /// 2-D cross-correlation. `weight` is `[c_out, c_in, k, k]` with odd `k`,
    /// `bias` is `[c_out]`.
    pub fn conv2d(&self, weight: &Tensor, bias: Option<&Tensor>, spec: Conv2dSpec) -> Result<Tensor> {
        let (n, c_in, h, w) = nchw("conv2d", self)?;
        let (c_out, k) = match *weight.shape() {
            [co, ci, kh, kw] if ci == c_in && kh == kw => (co, kh),
            _ => {
                return Err(TensorError::Dimension {
                    op: "conv2d",
                    lhs: self.shape().to_vec(),
                    rhs: weight.shape().to_vec(),
                })
            }
        };
        if k % 2 == 0 {
            return Err(TensorError::Config { op: "conv2d", msg: format!("kernel size {k} must be odd") });
        }
        if spec.dilation == 0 {
            return Err(TensorError::Config { op: "conv2d", msg: "dilation must be positive".into() });
        }
        if let Some(b) = bias {
            if b.shape() != [c_out] {
                return Err(TensorError::Dimension {
                    op: "conv2d",
                    lhs: weight.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
        }
        let (Some(ho), Some(wo)) = (spec.output_extent(h, k), spec.output_extent(w, k)) else {
            return Err(TensorError::Config {
                op: "conv2d",
                msg: format!("output extent is not positive for input {h}x{w}, kernel {k}, {spec:?}"),
            });
        };
        let geom = ConvGeom { c_in, h, w, k, ho, wo, spec };
        let (kk, l) = (geom.rows(), geom.cols());
        let plane_in = c_in * h * w;
        let mut out = vec![0.0; n * c_out * l];
        for s in 0..n {
            let col = geom.im2col(&self.data()[s * plane_in..(s + 1) * plane_in]);
            gemm_acc(weight.data(), &col, &mut out[s * c_out * l..(s + 1) * c_out * l], c_out, kk, l);
        }
        if let Some(b) = bias {
            for (chunk, &bv) in out.chunks_mut(l).zip(b.data().iter().cycle()) {
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }

        let shape = with_spatial(self, n, c_out, ho, wo);
        let (x, wt) = (self.clone(), weight.clone());
        let need_x = self.tracks_grad();
        let need_w = weight.tracks_grad();
        let has_bias = bias.is_some();
        let mut inputs = vec![self, weight];
        if let Some(b) = bias {
            inputs.push(b);
        }
        Ok(Tensor::from_op("conv2d", shape, out, &inputs, move |g| {
            let mut gx = need_x.then(|| vec![0.0; n * plane_in]);
            let mut gw = need_w.then(|| vec![0.0; c_out * kk]);
            let w_t = need_x.then(|| transpose2(wt.data(), c_out, kk));
            for s in 0..n {
                let gs = &g[s * c_out * l..(s + 1) * c_out * l];
                if let Some(gw) = gw.as_mut() {
                    let col = geom.im2col(&x.data()[s * plane_in..(s + 1) * plane_in]);
                    let col_t = transpose2(&col, kk, l);
                    gemm_acc(gs, &col_t, gw, c_out, l, kk);
                }
                if let (Some(gx), Some(w_t)) = (gx.as_mut(), w_t.as_ref()) {
                    let mut gcol = vec![0.0; kk * l];
                    gemm_acc(w_t, gs, &mut gcol, kk, c_out, l);
                    geom.col2im_acc(&gcol, &mut gx[s * plane_in..(s + 1) * plane_in]);
                }
            }
            let mut grads = vec![gx, gw];
            if has_bias {
                let mut gb = vec![0.0; c_out];
                for (chunk, gbv) in g.chunks(l).zip((0..c_out).cycle()) {
                    gb[gbv] += chunk.iter().sum::<f64>();
                }
                grads.push(Some(gb));
            }
            grads
        }))
    }

    /// Max pooling with `-inf` padding. Gradient goes to the first maximal
    /// element of each window in row-major order.
    pub fn maxpool2d(&self, kernel: usize, stride: usize, padding: usize) -> Result<Tensor> {
        let (n, c, h, w) = nchw("maxpool2d", self)?;
        if kernel % 2 == 0 || stride == 0 || padding > kernel / 2 {
            return Err(TensorError::Config {
                op: "maxpool2d",
                msg: format!("kernel {kernel}, stride {stride}, padding {padding}"),
            });
        }
        let spec = Conv2dSpec { stride, padding, dilation: 1 };
        let (Some(ho), Some(wo)) = (spec.output_extent(h, kernel), spec.output_extent(w, kernel)) else {
            return Err(TensorError::Config {
                op: "maxpool2d",
                msg: format!("output extent is not positive for input {h}x{w}"),
            });
        };
        let planes = n * c;
        let mut out = Vec::with_capacity(planes * ho * wo);
        let mut argmax = Vec::with_capacity(planes * ho * wo);
        let x = self.data();
        for p in 0..planes {
            let base = p * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = usize::MAX;
                    for ky in 0..kernel {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kernel {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let i = base + iy as usize * w + ix as usize;
                            if best_i == usize::MAX || x[i] > best {
                                best = x[i];
                                best_i = i;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_i);
                }
            }
        }
        let numel = self.numel();
        Ok(Tensor::from_op("maxpool2d", with_spatial(self, n, c, ho, wo), out, &[self], move |g| {
            let mut gx = vec![0.0; numel];
            for (&i, &gv) in argmax.iter().zip(g) {
                gx[i] += gv;
            }
            vec![Some(gx)]
        }))
    }

    /// Bilinear resampling of the two trailing axes, half-pixel centers
    /// (align-corners false).
    pub fn resize_bilinear(&self, target: (usize, usize)) -> Result<Tensor> {
        let (n, c, h, w) = nchw("resize_bilinear", self)?;
        let (h2, w2) = target;
        if h2 == 0 || w2 == 0 {
            return Err(TensorError::Config {
                op: "resize_bilinear",
                msg: format!("target {h2}x{w2} must be positive"),
            });
        }
        if (h2, w2) == (h, w) {
            return Ok(Tensor::from_op("resize_bilinear", self.shape().to_vec(), self.to_vec(), &[self], |g| {
                vec![Some(g.to_vec())]
            }));
        }
        let ys = interp_taps(h, h2);
        let xs = interp_taps(w, w2);
        let planes = n * c;
        let x = self.data();
        let mut out = Vec::with_capacity(planes * h2 * w2);
        for p in 0..planes {
            let base = p * h * w;
            for &(y0, y1, ly) in &ys {
                for &(x0, x1, lx) in &xs {
                    let v00 = x[base + y0 * w + x0];
                    let v01 = x[base + y0 * w + x1];
                    let v10 = x[base + y1 * w + x0];
                    let v11 = x[base + y1 * w + x1];
                    out.push(
                        (1.0 - ly) * (1.0 - lx) * v00
                            + (1.0 - ly) * lx * v01
                            + ly * (1.0 - lx) * v10
                            + ly * lx * v11,
                    );
                }
            }
        }
        let numel = self.numel();
        Ok(Tensor::from_op("resize_bilinear", with_spatial(self, n, c, h2, w2), out, &[self], move |g| {
            let mut gx = vec![0.0; numel];
            let mut it = g.iter();
            for p in 0..planes {
                let base = p * h * w;
                for &(y0, y1, ly) in &ys {
                    for &(x0, x1, lx) in &xs {
                        let gv = *it.next().expect("gradient length");
                        gx[base + y0 * w + x0] += (1.0 - ly) * (1.0 - lx) * gv;
                        gx[base + y0 * w + x1] += (1.0 - ly) * lx * gv;
                        gx[base + y1 * w + x0] += ly * (1.0 - lx) * gv;
                        gx[base + y1 * w + x1] += ly * lx * gv;
                    }
                }
            }
            vec![Some(gx)]
        }))
    }
}

/// `(lo, hi, frac)` per output coordinate for align-corners-false sampling.
fn interp_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let pos = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}
