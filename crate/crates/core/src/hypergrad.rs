//! Gradient of the Laplace marginal likelihood with respect to the
//! augmentation parameters `η`.
//!
//! The data-fit part is differentiated in forward mode through `f̂`. The
//! log-determinant part uses `∂ log|H̄| / ∂ηᵢ = Σ_pq [H̄⁻¹]_pq [∂H̄/∂ηᵢ]_pq`,
//! with `H̄⁻¹` taken from the curvature over all data and `∂H̄/∂ηᵢ` estimated
//! on a subsample of `M` data scaled by `N/M`.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::augment::AugmentationParams;
use crate::batch::{AugSpec, NoiseKey};
use crate::curvature::{
    full_ggn_tangent_pass, kfac_tangent_pass, Averaging, CurvatureKind, DataRef, FullGgnState, FullGgnTangentState,
    KfacFactors, KfacTangentState,
};
use crate::error::{Error, Result};
use crate::laplace::{damped_dense, Curvature, MarglikReport, Prior};
use crate::linalg::{inverse_spd, kron_damped_bilinear_trace};
use crate::model::MlpModel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EtaGradient {
    pub loglik_part: Vec<f64>,
    pub logdet_part: Vec<f64>,
    pub total: Vec<f64>,
}

impl EtaGradient {
    pub fn new(loglik_part: Vec<f64>, logdet_part: Vec<f64>) -> Self {
        let total = loglik_part.iter().zip(&logdet_part).map(|(a, b)| a + b).collect();
        EtaGradient { loglik_part, logdet_part, total }
    }

    pub fn zeros(k: usize) -> Self {
        EtaGradient::new(vec![0.0; k], vec![0.0; k])
    }
}

/// Settings of one hyper-gradient evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperConfig {
    pub curvature: CurvatureKind,
    /// Augmentation samples per datum.
    pub samples: usize,
    pub antithetic: bool,
    /// Data used for the curvature derivative; `None` uses all of them.
    pub subsample: Option<usize>,
    /// Differentiate through `Λ(f̂)`.
    pub include_dlambda: bool,
}

/// Everything a hyper-step needs.
#[derive(Clone, Debug)]
pub struct HyperOutcome {
    pub eta: EtaGradient,
    pub log_precision: Vec<f64>,
    pub report: MarglikReport,
}

/// `∂/∂ηᵢ Σ log p(y | f̂)` over `indices`.
pub fn grad_eta_loglik(model: &MlpModel, data: DataRef, indices: &[usize], aug: &AugSpec) -> Result<Vec<f64>> {
    Ok(crate::curvature::loglik_tangent_pass(model, data, indices, aug)?.1)
}

fn clamped(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| x.max(0.0)).collect()
}

/// `∂ log|H̄| / ∂ηᵢ` for the Kronecker-factored curvature, summed over layers.
pub fn grad_eta_logdet_kfac(
    factors: &KfacFactors,
    tangents: &KfacTangentState,
    prior: &Prior,
    n_total: usize,
) -> Result<Vec<f64>> {
    if factors.layers.len() != tangents.da.len() || factors.layers.len() != prior.log_precision.len() {
        return Err(Error::Shape("curvature, tangents and prior disagree on the layer count".into()));
    }
    let scale = factors.scale();
    let extra = tangents.extrapolation(n_total);
    let mut grad = vec![0.0; tangents.k()];
    for (l, layer) in factors.layers.iter().enumerate() {
        let gamma = prior.log_precision[l].exp();
        let (la, lg) = (&layer.a.values, &layer.g.values);
        if tangents.da[l].first().map(|m| m.rows()) != Some(la.len())
            || tangents.dg[l].first().map(|m| m.rows()) != Some(lg.len())
        {
            return Err(Error::Shape(format!("tangent factors of layer {l} do not match the curvature")));
        }
        let (ca, cg) = (clamped(la), clamped(lg));
        for (i, g) in grad.iter_mut().enumerate() {
            let pa: Vec<f64> = layer.a.rotated_diag(&tangents.da[l][i]).iter().map(|v| v * extra).collect();
            let qg: Vec<f64> = layer.g.rotated_diag(&tangents.dg[l][i]).iter().map(|v| v * extra).collect();
            let t1 = kron_damped_bilinear_trace(&pa, &cg, la, lg, scale, gamma)?;
            let t2 = kron_damped_bilinear_trace(&ca, &qg, la, lg, scale, gamma)?;
            *g += scale * (t1 + t2);
        }
    }
    Ok(grad)
}

/// `∂ log|H̄| / ∂ηᵢ` for the dense curvature.
pub fn grad_eta_logdet_full(
    state: &FullGgnState,
    tangents: &FullGgnTangentState,
    model: &MlpModel,
    prior: &Prior,
    n_total: usize,
) -> Result<Vec<f64>> {
    let inv = inverse_spd(&damped_dense(state, model, prior)?)?;
    let extra = tangents.extrapolation(n_total);
    Ok(tangents.dh.iter().map(|dh| extra * inv.frobenius_dot(dh)).collect())
}

/// Draws the curvature-derivative subsample: all data when `m ≥ N`,
/// otherwise `m` indices without replacement in increasing order.
pub fn draw_subsample(n: usize, m: Option<usize>, key: NoiseKey) -> Vec<usize> {
    match m {
        Some(m) if m < n => {
            let mut idx = sample(&mut key.rng(0), n, m).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..n).collect(),
    }
}

/// Two-pass hyper-gradient at the current `θ`, `η` and prior.
///
/// Pass one builds the curvature over all data and yields the marginal
/// likelihood and prior-precision gradient; pass two differentiates the
/// curvature and data fit on a subsample. Both passes draw the same noise
/// per datum, so the result is the exact derivative of the estimate made
/// in pass one whenever the subsample covers all data.
pub fn grad_eta_total(
    model: &MlpModel,
    data: DataRef,
    aug: &AugmentationParams,
    prior: &Prior,
    cfg: &HyperConfig,
    key: NoiseKey,
) -> Result<HyperOutcome> {
    if data.is_empty() {
        return Err(Error::Config("hyper-gradients need at least one datum".into()));
    }
    let spec = AugSpec { params: aug, samples: cfg.samples, antithetic: cfg.antithetic, key: key.child(1) };
    let all = data.all_indices();
    let curv = Curvature::build(cfg.curvature, model, data, &all, Some(&spec), Averaging::Logits)?;
    let report = curv.report(model, prior)?;
    let log_precision = curv.grad_log_precision(model, prior)?;
    let sub = draw_subsample(data.len(), cfg.subsample, key.child(2));
    let (dloglik, dlogdet) = match &curv {
        Curvature::Kfac(f) => {
            let t = kfac_tangent_pass(model, data, &sub, &spec, cfg.include_dlambda)?;
            let extra = t.extrapolation(data.len());
            (t.dloglik.iter().map(|v| v * extra).collect::<Vec<_>>(), grad_eta_logdet_kfac(f, &t, prior, data.len())?)
        }
        Curvature::Full(s) => {
            let t = full_ggn_tangent_pass(model, data, &sub, &spec, cfg.include_dlambda)?;
            let extra = t.extrapolation(data.len());
            (t.dloglik.iter().map(|v| v * extra).collect(), grad_eta_logdet_full(s, &t, model, prior, data.len())?)
        }
    };
    let eta = EtaGradient::new(dloglik, dlogdet.iter().map(|v| -0.5 * v).collect());
    Ok(HyperOutcome { eta, log_precision, report })
}

/// Marginal likelihood at `η` with the noise of [`grad_eta_total`].
pub fn marglik_at(
    model: &MlpModel,
    data: DataRef,
    aug: &AugmentationParams,
    prior: &Prior,
    cfg: &HyperConfig,
    key: NoiseKey,
) -> Result<MarglikReport> {
    let spec = AugSpec { params: aug, samples: cfg.samples, antithetic: cfg.antithetic, key: key.child(1) };
    Curvature::build(cfg.curvature, model, data, &data.all_indices(), Some(&spec), Averaging::Logits)?.report(model, prior)
}

/// Central finite differences of `f` at `eta` with step `h`.
pub fn fd_oracle(mut f: impl FnMut(&[f64]) -> Result<f64>, eta: &[f64], h: f64) -> Result<Vec<f64>> {
    if !(h > 0.0) {
        return Err(Error::Domain(format!("finite-difference step must be positive, got {h}")));
    }
    let mut x = eta.to_vec();
    (0..eta.len())
        .map(|i| {
            x[i] = eta[i] + h;
            let up = f(&x)?;
            x[i] = eta[i] - h;
            let down = f(&x)?;
            x[i] = eta[i];
            Ok((up - down) / (2.0 * h))
        })
        .collect()
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
