use std::sync::atomic::{AtomicBool, Ordering};

use super::gemm::{gemm_acc, transpose2};
use super::{numel_of, Result, Tensor, TensorError};

static SOFTMAX_FAULT: AtomicBool = AtomicBool::new(false);

/// Test hook: when enabled, softmax skips its normalization step.
///
/// Exists only so the verification suite can prove it notices a broken
/// softmax. Never enable it outside that check.
#[doc(hidden)]
pub fn set_softmax_fault(enabled: bool) {
    SOFTMAX_FAULT.store(enabled, Ordering::SeqCst);
}

#[doc(hidden)]
pub fn softmax_fault_enabled() -> bool {
    SOFTMAX_FAULT.load(Ordering::SeqCst)
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::Dimension {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn check_axis(op: &'static str, t: &Tensor, axis: usize) -> Result<()> {
    if axis >= t.rank() {
        return Err(TensorError::Config {
            op,
            msg: format!("axis {axis} out of range for shape {:?}", t.shape()),
        });
    }
    Ok(())
}

/// (outer, len, inner) view of a shape around `axis`.
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel_of(&shape[..axis]),
        shape[axis],
        numel_of(&shape[axis + 1..]),
    )
}

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    strides
}

/// For every output position, the flat source index under per-output-axis
/// source strides.
fn index_map(out_shape: &[usize], src_strides: &[usize]) -> Vec<usize> {
    let n = numel_of(out_shape);
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    let mut src = 0usize;
    for _ in 0..n {
        map.push(src);
        for d in (0..out_shape.len()).rev() {
            idx[d] += 1;
            src += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= src_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

impl Tensor {
    fn gather(&self, op: &'static str, out_shape: Vec<usize>, map: Vec<usize>) -> Tensor {
        let data: Vec<f64> = map.iter().map(|&i| self.data()[i]).collect();
        let n_in = self.numel();
        Tensor::from_op(op, out_shape, data, &[self], move |g| {
            let mut gx = vec![0.0; n_in];
            for (&src, &gv) in map.iter().zip(g) {
                gx[src] += gv;
            }
            vec![Some(gx)]
        })
    }

    fn unary(
        &self,
        op: &'static str,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
    ) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|&v| f(v)).collect();
        let x = self.clone();
        let y = data.clone();
        Tensor::from_op(op, self.shape().to_vec(), data, &[self], move |g| {
            let gx = g
                .iter()
                .zip(x.data())
                .zip(&y)
                .map(|((&gv, &xv), &yv)| gv * df(xv, yv))
                .collect();
            vec![Some(gx)]
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("add", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a + b).collect();
        Ok(Tensor::from_op("add", self.shape().to_vec(), data, &[self, other], |g| {
            vec![Some(g.to_vec()), Some(g.to_vec())]
        }))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("sub", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a - b).collect();
        Ok(Tensor::from_op("sub", self.shape().to_vec(), data, &[self, other], |g| {
            vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())]
        }))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("mul", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a * b).collect();
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op("mul", self.shape().to_vec(), data, &[self, other], move |g| {
            let ga = g.iter().zip(b.data()).map(|(g, b)| g * b).collect();
            let gb = g.iter().zip(a.data()).map(|(g, a)| g * a).collect();
            vec![Some(ga), Some(gb)]
        }))
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        let data = self.data().iter().map(|v| v + s).collect();
        Tensor::from_op("add_scalar", self.shape().to_vec(), data, &[self], |g| {
            vec![Some(g.to_vec())]
        })
    }

    pub fn mul_scalar(&self, s: f64) -> Tensor {
        let data = self.data().iter().map(|v| v * s).collect();
        Tensor::from_op("mul_scalar", self.shape().to_vec(), data, &[self], move |g| {
            vec![Some(g.iter().map(|v| v * s).collect())]
        })
    }

    pub fn neg(&self) -> Tensor {
        self.mul_scalar(-1.0)
    }

    pub fn relu(&self) -> Tensor {
        self.unary("relu", |v| v.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary("sigmoid", sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn exp(&self) -> Tensor {
        self.unary("exp", f64::exp, |_, y| y)
    }

    pub fn ln(&self) -> Tensor {
        self.unary("ln", f64::ln, |x, _| 1.0 / x)
    }

    pub fn powf(&self, e: f64) -> Tensor {
        self.unary("powf", |v| v.powf(e), move |x, _| e * x.powf(e - 1.0))
    }

    /// Gradient passes where `lo <= x <= hi`.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        self.unary(
            "clamp",
            |v| v.clamp(lo, hi),
            move |x, _| if (lo..=hi).contains(&x) { 1.0 } else { 0.0 },
        )
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&self) -> Tensor {
        let s = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op("sum", vec![1], vec![s], &[self], move |g| vec![Some(vec![g[0]; n])])
    }

    pub fn mean(&self) -> Tensor {
        self.sum().mul_scalar(1.0 / self.numel() as f64)
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        check_axis("sum_axis", self, axis)?;
        let (outer, len, inner) = split_at_axis(self.shape(), axis);
        let mut data = vec![0.0; outer * inner];
        let x = self.data();
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                let dst = &mut data[o * inner..(o + 1) * inner];
                for (d, v) in dst.iter_mut().zip(&x[base..base + inner]) {
                    *d += v;
                }
            }
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = 1;
        Ok(Tensor::from_op("sum_axis", shape, data, &[self], move |g| {
            let mut gx = vec![0.0; outer * len * inner];
            for o in 0..outer {
                for l in 0..len {
                    let base = (o * len + l) * inner;
                    gx[base..base + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Mean over several axes, each kept with extent 1.
    pub fn mean_axes(&self, axes: &[usize]) -> Result<Tensor> {
        let mut out = self.clone();
        let mut count = 1usize;
        for &a in axes {
            check_axis("mean_axes", self, a)?;
            count *= self.shape()[a];
            out = out.sum_axis(a)?;
        }
        Ok(out.mul_scalar(1.0 / count as f64))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel_of(shape) != self.numel() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::Dimension {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor::from_op("reshape", shape.to_vec(), self.to_vec(), &[self], |g| {
            vec![Some(g.to_vec())]
        }))
    }

    /// Repeats extent-1 axes to match `shape`. Ranks must agree.
    pub fn expand(&self, shape: &[usize]) -> Result<Tensor> {
        let bad = || TensorError::Dimension {
            op: "expand",
            lhs: self.shape().to_vec(),
            rhs: shape.to_vec(),
        };
        if shape.len() != self.rank() {
            return Err(bad());
        }
        let strides = strides_of(self.shape());
        let mut src_strides = Vec::with_capacity(shape.len());
        for (d, (&from, &to)) in self.shape().iter().zip(shape).enumerate() {
            if from == to {
                src_strides.push(strides[d]);
            } else if from == 1 && to > 0 {
                src_strides.push(0);
            } else {
                return Err(bad());
            }
        }
        let map = index_map(shape, &src_strides);
        Ok(self.gather("expand", shape.to_vec(), map))
    }

    /// Reorders axes: output axis `d` is input axis `perm[d]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let mut sorted = perm.to_vec();
        sorted.sort_unstable();
        if perm.len() != self.rank() || sorted.iter().enumerate().any(|(i, &p)| i != p) {
            return Err(TensorError::Config {
                op: "permute",
                msg: format!("{perm:?} is not a permutation of the axes of {:?}", self.shape()),
            });
        }
        let strides = strides_of(self.shape());
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape()[p]).collect();
        let src_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
        let map = index_map(&out_shape, &src_strides);
        Ok(self.gather("permute", out_shape, map))
    }

    pub fn transpose(&self, a: usize, b: usize) -> Result<Tensor> {
        check_axis("transpose", self, a)?;
        check_axis("transpose", self, b)?;
        let mut perm: Vec<usize> = (0..self.rank()).collect();
        perm.swap(a, b);
        self.permute(&perm)
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| TensorError::Config {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        check_axis("concat", first, axis)?;
        for p in &parts[1..] {
            let compatible = p.rank() == first.rank()
                && p.shape().iter().zip(first.shape()).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(TensorError::Dimension {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        let (outer, _, inner) = split_at_axis(first.shape(), axis);
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &len) in parts.iter().zip(&lens) {
                data.extend_from_slice(&p.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        Ok(Tensor::from_op("concat", shape, data, parts, move |g| {
            let mut grads: Vec<Vec<f64>> = lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
            let mut off = 0;
            for _ in 0..outer {
                for (gp, &len) in grads.iter_mut().zip(&lens) {
                    gp.extend_from_slice(&g[off..off + len * inner]);
                    off += len * inner;
                }
            }
            grads.into_iter().map(Some).collect()
        }))
    }

    /// Matrix product of `[m,k]·[k,n]`, or batched `[b,m,k]·[b,k,n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let bad = || TensorError::Dimension {
            op: "matmul",
            lhs: self.shape().to_vec(),
            rhs: other.shape().to_vec(),
        };
        let (batch, m, k, n) = match (self.shape(), other.shape()) {
            (&[m, k], &[k2, n]) if k == k2 => (1, m, k, n),
            (&[b, m, k], &[b2, k2, n]) if k == k2 && b == b2 => (b, m, k, n),
            _ => return Err(bad()),
        };
        let mut data = vec![0.0; batch * m * n];
        for bi in 0..batch {
            gemm_acc(
                &self.data()[bi * m * k..(bi + 1) * m * k],
                &other.data()[bi * k * n..(bi + 1) * k * n],
                &mut data[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op("matmul", shape, data, &[self, other], move |g| {
            let mut ga = vec![0.0; batch * m * k];
            let mut gb = vec![0.0; batch * k * n];
            for bi in 0..batch {
                let gs = &g[bi * m * n..(bi + 1) * m * n];
                let bt = transpose2(&b.data()[bi * k * n..(bi + 1) * k * n], k, n);
                gemm_acc(gs, &bt, &mut ga[bi * m * k..(bi + 1) * m * k], m, n, k);
                let at = transpose2(&a.data()[bi * m * k..(bi + 1) * m * k], m, k);
                gemm_acc(&at, gs, &mut gb[bi * k * n..(bi + 1) * k * n], k, m, n);
            }
            vec![Some(ga), Some(gb)]
        }))
    }

    /// Normalized exponential along `axis`, computed with max subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        check_axis("softmax", self, axis)?;
        let (outer, len, inner) = split_at_axis(self.shape(), axis);
        let faulty = softmax_fault_enabled();
        let x = self.data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let max = (0..len).map(|l| x[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for l in 0..len {
                    let e = (x[at(l)] - max).exp();
                    y[at(l)] = e;
                    total += e;
                }
                if !faulty {
                    for l in 0..len {
                        y[at(l)] /= total;
                    }
                }
            }
        }
        let out = y.clone();
        Ok(Tensor::from_op("softmax", self.shape().to_vec(), y, &[self], move |g| {
            let mut gx = vec![0.0; out.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |l: usize| (o * len + l) * inner + i;
                    let dot: f64 = (0..len).map(|l| g[at(l)] * out[at(l)]).sum();
                    for l in 0..len {
                        gx[at(l)] = out[at(l)] * (g[at(l)] - dot);
                    }
                }
            }
            vec![Some(gx)]
        }))
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_zero() {
        let i2 = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(i2.matmul(&i2).unwrap().data(), i2.data());
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let z = Tensor::zeros(&[2, 2]);
        assert_eq!(a.matmul(&z).unwrap().data(), &[0.0; 4]);
    }

    #[test]
    fn matmul_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let err = a.matmul(&b).unwrap_err();
        assert_eq!(
            err,
            TensorError::Dimension { op: "matmul", lhs: vec![2, 3], rhs: vec![2, 3] }
        );
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let u = Tensor::zeros(&[3]).softmax(0).unwrap();
        for v in u.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = t(&[2], &[1000.0, 0.0]).softmax(0).unwrap();
        assert!(s.all_finite());
        assert!((s.data()[0] - 1.0).abs() < 1e-15);
        assert!(s.data()[1] < 1e-300);
    }

    #[test]
    fn softmax_matches_direct_evaluation() {
        let s = t(&[3], &[1.0, 2.0, 3.0]).softmax(0).unwrap();
        let z = 1f64.exp() + 2f64.exp() + 3f64.exp();
        let expected = [1f64.exp() / z, 2f64.exp() / z, 3f64.exp() / z];
        for (a, b) in s.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn softmax_inner_axis() {
        let x = t(&[2, 3], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        let s = x.softmax(0).unwrap();
        for c in 0..3 {
            let col = s.data()[c] + s.data()[3 + c];
            assert!((col - 1.0).abs() < 1e-12);
        }
        assert!(x.softmax(2).is_err());
    }

    #[test]
    fn permute_and_transpose() {
        let x = t(&[2, 3], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        let y = x.transpose(0, 1).unwrap();
        assert_eq!(y.shape(), &[3, 2]);
        assert_eq!(y.data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        let z = Tensor::new(&[2, 3, 4], (0..24).map(f64::from).collect()).unwrap();
        let p = z.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        // p[k][i][j] = z[i][j][k]
        assert_eq!(p.data()[(1 * 2 + 1) * 3 + 2], z.data()[(1 * 3 + 2) * 4 + 1]);
        assert!(z.permute(&[0, 0, 1]).is_err());
    }

    #[test]
    fn expand_repeats_unit_axes() {
        let x = t(&[2, 1], &[1.0, 2.0]);
        let e = x.expand(&[2, 3]).unwrap();
        assert_eq!(e.data(), &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
        assert!(x.expand(&[3, 3]).is_err());
        assert!(x.expand(&[2, 3, 1]).is_err());
    }

    #[test]
    fn expand_backward_sums() {
        let x = t(&[1, 2], &[1.0, 2.0]).requires_grad();
        x.expand(&[3, 2]).unwrap().sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![3.0, 3.0]);
    }

    #[test]
    fn concat_middle_axis() {
        let a = t(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 2, 2], &[5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = Tensor::concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 3, 2]);
        assert_eq!(
            c.data(),
            &[1.0, 2.0, 5.0, 6.0, 7.0, 8.0, 3.0, 4.0, 9.0, 10.0, 11.0, 12.0]
        );
        assert!(Tensor::concat(&[&a, &Tensor::zeros(&[3, 1, 2])], 1).is_err());
    }

    #[test]
    fn sum_axis_keeps_dim() {
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let s0 = x.sum_axis(0).unwrap();
        assert_eq!(s0.shape(), &[1, 3]);
        assert_eq!(s0.data(), &[5.0, 7.0, 9.0]);
        let s1 = x.sum_axis(1).unwrap();
        assert_eq!(s1.data(), &[6.0, 15.0]);
        let m = x.mean_axes(&[0, 1]).unwrap();
        assert_eq!(m.data(), &[3.5]);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
    }

    #[test]
    fn clamp_gradient_mask() {
        let x = t(&[3], &[-1.0, 0.5, 2.0]).requires_grad();
        x.clamp(0.0, 1.0).sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 1.0, 0.0]);
    }
}
