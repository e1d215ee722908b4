//! Laplace-GGN log marginal likelihood and its gradient with respect to the
//! per-layer log prior precisions.
//!
//! The damped curvature of layer `l` is `H_l + γ_l I`. For the Kronecker
//! variant `H_l = (1/N) Â_l ⊗ Ĝ_l` and the damping is applied by shifting
//! eigenvalues.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::batch::AugSpec;
use crate::curvature::{full_ggn_pass, kfac_pass, Averaging, CurvatureKind, DataRef, FullGgnState, KfacFactors};
use crate::error::{Error, Result};
use crate::linalg::{inverse_spd, kron_damped_bilinear_trace, kron_damped_logdet, logdet_spd, Mat};
use crate::model::MlpModel;

/// Isotropic Gaussian prior per layer, parameterised by `log γ_l`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prior {
    pub log_precision: Vec<f64>,
}

impl Prior {
    pub fn new(log_precision: Vec<f64>) -> Result<Self> {
        if log_precision.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("log prior precisions must be finite".into()));
        }
        Ok(Prior { log_precision })
    }

    pub fn uniform(layers: usize, precision: f64) -> Result<Self> {
        if !(precision > 0.0) {
            return Err(Error::Domain(format!("prior precision must be positive, got {precision}")));
        }
        Ok(Prior { log_precision: vec![precision.ln(); layers] })
    }

    pub fn precisions(&self) -> Vec<f64> {
        self.log_precision.iter().map(|v| v.exp()).collect()
    }

    fn check(&self, model: &MlpModel) -> Result<()> {
        if self.log_precision.len() != model.num_layers() {
            return Err(Error::Shape(format!(
                "prior has {} layers, model {}",
                self.log_precision.len(),
                model.num_layers()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarglikReport {
    pub loglik: f64,
    pub logprior: f64,
    /// `−½ log|H̄| + (P/2) log 2π`.
    pub logdet_term: f64,
    pub total: f64,
}

impl MarglikReport {
    pub fn new(loglik: f64, logprior: f64, logdet_term: f64) -> Self {
        MarglikReport { loglik, logprior, logdet_term, total: loglik + logprior + logdet_term }
    }
}

/// `Σ_l (d_l/2)(log γ_l − log 2π) − (γ_l/2)‖θ_l‖²`.
pub fn log_prior(model: &MlpModel, prior: &Prior) -> Result<f64> {
    prior.check(model)?;
    let ln2pi = (2.0 * PI).ln();
    Ok(model
        .layer_param_counts()
        .iter()
        .zip(model.layer_sq_norms())
        .zip(&prior.log_precision)
        .map(|((&d, sq), &lg)| 0.5 * d as f64 * (lg - ln2pi) - 0.5 * lg.exp() * sq)
        .sum())
}

/// Gradient of [`log_prior`] with respect to the flat parameters.
pub fn log_prior_grad(model: &MlpModel, prior: &Prior) -> Result<Vec<f64>> {
    prior.check(model)?;
    let theta = model.flatten();
    let mut g = vec![0.0; theta.len()];
    for ((off, d), lg) in model.layer_offsets().iter().zip(model.layer_param_counts()).zip(&prior.log_precision) {
        let gamma = lg.exp();
        for p in *off..off + d {
            g[p] = -gamma * theta[p];
        }
    }
    Ok(g)
}

fn logdet_constant(model: &MlpModel) -> f64 {
    0.5 * model.num_params() as f64 * (2.0 * PI).ln()
}

/// Per-layer `log|(1/N) Â ⊗ Ĝ + γ I|`.
pub fn kfac_layer_logdets(factors: &KfacFactors, prior: &Prior) -> Result<Vec<f64>> {
    if factors.layers.len() != prior.log_precision.len() {
        return Err(Error::Shape("prior and curvature have different layer counts".into()));
    }
    factors
        .layers
        .iter()
        .zip(prior.precisions())
        .map(|(layer, gamma)| kron_damped_logdet(&layer.a.values, &layer.g.values, factors.scale(), gamma))
        .collect()
}

/// Kronecker-factored marginal likelihood; `loglik` is the data-fit term.
pub fn log_marglik_kfac(factors: &KfacFactors, model: &MlpModel, prior: &Prior, loglik: f64) -> Result<MarglikReport> {
    prior.check(model)?;
    let logdet: f64 = kfac_layer_logdets(factors, prior)?.iter().sum();
    Ok(MarglikReport::new(loglik, log_prior(model, prior)?, -0.5 * logdet + logdet_constant(model)))
}

/// `H + diag(γ_l)` with each precision on its layer block.
pub fn damped_dense(state: &FullGgnState, model: &MlpModel, prior: &Prior) -> Result<Mat> {
    prior.check(model)?;
    if !state.h.is_finite() {
        return Err(Error::Divergence("the Gauss-Newton matrix is not finite".into()));
    }
    let mut h = state.h.clone();
    h.symmetrize();
    for ((off, d), gamma) in model.layer_offsets().iter().zip(model.layer_param_counts()).zip(prior.precisions()) {
        for p in *off..off + d {
            h[(p, p)] += gamma;
        }
    }
    Ok(h)
}

/// Dense marginal likelihood; `loglik` is the data-fit term.
pub fn log_marglik_full(state: &FullGgnState, model: &MlpModel, prior: &Prior, loglik: f64) -> Result<MarglikReport> {
    let h = damped_dense(state, model, prior)?;
    let logdet = logdet_spd(&h)?;
    Ok(MarglikReport::new(loglik, log_prior(model, prior)?, -0.5 * logdet + logdet_constant(model)))
}

fn precision_grad(d: usize, gamma: f64, sq: f64, trace_inv: f64) -> f64 {
    gamma * (0.5 * d as f64 / gamma - 0.5 * sq - 0.5 * trace_inv)
}

/// `∂ total / ∂ log γ_l` for the Kronecker-factored curvature.
pub fn grad_log_precision_kfac(factors: &KfacFactors, model: &MlpModel, prior: &Prior) -> Result<Vec<f64>> {
    prior.check(model)?;
    let sq = model.layer_sq_norms();
    let counts = model.layer_param_counts();
    factors
        .layers
        .iter()
        .enumerate()
        .map(|(l, layer)| {
            let gamma = prior.log_precision[l].exp();
            let ones_a = vec![1.0; layer.a.values.len()];
            let ones_g = vec![1.0; layer.g.values.len()];
            let tr = kron_damped_bilinear_trace(&ones_a, &ones_g, &layer.a.values, &layer.g.values, factors.scale(), gamma)?;
            Ok(precision_grad(counts[l], gamma, sq[l], tr))
        })
        .collect()
}

/// `∂ total / ∂ log γ_l` for the dense curvature.
pub fn grad_log_precision_full(state: &FullGgnState, model: &MlpModel, prior: &Prior) -> Result<Vec<f64>> {
    let inv = inverse_spd(&damped_dense(state, model, prior)?)?;
    let sq = model.layer_sq_norms();
    Ok(model
        .layer_offsets()
        .iter()
        .zip(model.layer_param_counts())
        .enumerate()
        .map(|(l, (off, d))| {
            let tr: f64 = (*off..off + d).map(|p| inv[(p, p)]).sum();
            precision_grad(d, prior.log_precision[l].exp(), sq[l], tr)
        })
        .collect())
}

/// A finalised curvature of either kind.
#[derive(Clone, Debug)]
pub enum Curvature {
    Kfac(KfacFactors),
    Full(FullGgnState),
}

impl Curvature {
    /// Accumulates and finalises the curvature over `indices`.
    pub fn build(
        kind: CurvatureKind,
        model: &MlpModel,
        data: DataRef,
        indices: &[usize],
        aug: Option<&AugSpec>,
        averaging: Averaging,
    ) -> Result<Self> {
        Ok(match kind {
            CurvatureKind::Kfac => Curvature::Kfac(kfac_pass(model, data, indices, aug, averaging)?.finalize()?),
            CurvatureKind::Full => Curvature::Full(full_ggn_pass(model, data, indices, aug, averaging)?),
        })
    }

    /// Data-fit term collected during accumulation.
    pub fn loglik(&self) -> f64 {
        match self {
            Curvature::Kfac(f) => f.loglik,
            Curvature::Full(s) => s.loglik,
        }
    }

    pub fn report(&self, model: &MlpModel, prior: &Prior) -> Result<MarglikReport> {
        match self {
            Curvature::Kfac(f) => log_marglik_kfac(f, model, prior, f.loglik),
            Curvature::Full(s) => log_marglik_full(s, model, prior, s.loglik),
        }
    }

    pub fn grad_log_precision(&self, model: &MlpModel, prior: &Prior) -> Result<Vec<f64>> {
        match self {
            Curvature::Kfac(f) => grad_log_precision_kfac(f, model, prior),
            Curvature::Full(s) => grad_log_precision_full(s, model, prior),
        }
    }
}
