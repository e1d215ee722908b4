//! Softmax-categorical likelihood on logits.

use crate::error::{Error, Result};
use crate::linalg::Mat;

/// Numerically stable softmax.
pub fn softmax(f: &[f64]) -> Vec<f64> {
    let mut p = vec![0.0; f.len()];
    softmax_into(f, &mut p);
    p
}

pub fn softmax_into(f: &[f64], p: &mut [f64]) {
    let m = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (pi, fi) in p.iter_mut().zip(f) {
        *pi = (fi - m).exp();
        z += *pi;
    }
    p.iter_mut().for_each(|v| *v /= z);
}

pub fn log_sum_exp(f: &[f64]) -> f64 {
    let m = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + f.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// `-log softmax(f)[y]`.
pub fn nll(f: &[f64], y: usize) -> Result<f64> {
    if y >= f.len() {
        return Err(Error::Domain(format!("label {y} out of range for {} classes", f.len())));
    }
    Ok(log_sum_exp(f) - f[y])
}

/// Gradient of [`nll`] with respect to the logits: `softmax(f) - onehot(y)`.
pub fn nll_grad(f: &[f64], y: usize) -> Result<Vec<f64>> {
    if y >= f.len() {
        return Err(Error::Domain(format!("label {y} out of range for {} classes", f.len())));
    }
    let mut g = softmax(f);
    g[y] -= 1.0;
    Ok(g)
}

/// Logit Hessian of the negative log-likelihood, `diag(p) - p pᵀ`.
pub fn lambda(f: &[f64]) -> Mat {
    lambda_from_probs(&softmax(f))
}

pub fn lambda_from_probs(p: &[f64]) -> Mat {
    let c = p.len();
    Mat::from_fn(c, c, |i, j| if i == j { p[i] - p[i] * p[i] } else { -p[i] * p[j] })
}

/// A square root `L` with `L Lᵀ = Λ`, namely `diag(√p) - p √pᵀ`.
pub fn lambda_sqrt_from_probs(p: &[f64]) -> Mat {
    let c = p.len();
    let sq: Vec<f64> = p.iter().map(|v| v.sqrt()).collect();
    Mat::from_fn(c, c, |i, j| if i == j { sq[i] - p[i] * sq[j] } else { -p[i] * sq[j] })
}

/// Directional derivative of [`lambda`] at `f` along `df`.
pub fn lambda_tangent(f: &[f64], df: &[f64]) -> Mat {
    lambda_tangent_from_probs(&softmax(f), df)
}

pub fn lambda_tangent_from_probs(p: &[f64], df: &[f64]) -> Mat {
    let c = p.len();
    let mean: f64 = p.iter().zip(df).map(|(a, b)| a * b).sum();
    let dp: Vec<f64> = p.iter().zip(df).map(|(pi, di)| pi * (di - mean)).collect();
    Mat::from_fn(c, c, |i, j| {
        let d = if i == j { dp[i] } else { 0.0 };
        d - dp[i] * p[j] - p[i] * dp[j]
    })
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax(f: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in f.iter().enumerate() {
        if *v > f[best] {
            best = i;
        }
    }
    best
}
