use super::{no_grad, Result, Tensor, TensorError};

/// Largest relative disagreement between the analytic gradient of a scalar
/// function and its central finite-difference estimate.
///
/// Per element the error is `|a - fd| / max(1e-8, |a| + |fd|)`.
pub fn gradcheck<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let leaf = x.detach().requires_grad();
    let y = f(&leaf)?;
    if y.numel() != 1 {
        return Err(TensorError::Usage(format!(
            "gradcheck needs a scalar function, got shape {:?}",
            y.shape()
        )));
    }
    if y.tracks_grad() {
        y.backward()?;
    }
    let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |data: Vec<f64>| -> Result<f64> {
        let probe = Tensor::new(x.shape(), data)?;
        no_grad(|| f(&probe)).map(|t| t.item())
    };
    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = x.to_vec();
        plus[i] += eps;
        let mut minus = x.to_vec();
        minus[i] -= eps;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let err = (a - fd).abs() / (a.abs() + fd.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}
