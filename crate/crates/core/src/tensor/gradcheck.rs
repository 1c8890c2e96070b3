use super::Tensor;
use crate::error::{Error, Result};

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// max over elements of |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)
    pub max_rel_err: f64,
    pub analytic: Vec<Vec<f64>>,
    pub numeric: Vec<Vec<f64>>,
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
}

/// Checks `f` against central differences at every element of every input.
///
/// `f` must return a one-element tensor. Inputs are taken by value and
/// re-created as gradient leaves, so constants can be passed in.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let leaves: Vec<Tensor<f64>> = inputs.iter().map(|t| t.requires_grad_leaf()).collect();
    let y = f(&leaves)?;
    if y.numel() != 1 {
        return Err(Error::NonScalar(y.shape().to_vec()));
    }
    y.backward()?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let mut numeric = Vec::with_capacity(inputs.len());
    let mut max_rel_err: f64 = 0.0;
    for (which, input) in inputs.iter().enumerate() {
        let mut fd = Vec::with_capacity(input.numel());
        for i in 0..input.numel() {
            let eval = |delta: f64| -> Result<f64> {
                let args: Vec<Tensor<f64>> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| {
                        if j == which {
                            let mut d = t.to_vec();
                            d[i] += delta;
                            Tensor::from_vec(t.shape(), d)
                        } else {
                            Ok(t.detach())
                        }
                    })
                    .collect::<Result<_>>()?;
                Ok(f(&args)?.item())
            };
            let g = (eval(eps)? - eval(-eps)?) / (2.0 * eps);
            max_rel_err = max_rel_err.max(rel_err(analytic[which][i], g));
            fd.push(g);
        }
        numeric.push(fd);
    }
    Ok(GradCheckReport {
        max_rel_err,
        analytic,
        numeric,
    })
}
