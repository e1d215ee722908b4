//! Interleaved optimisation: MAP steps on the weights against the augmented
//! log joint, periodic hyper-steps on `η` and the prior precisions, and the
//! baseline methods.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{AugmentationParams, Family};
use crate::batch::{augment_batch, group_mean, AugSpec, NoiseKey};
use crate::curvature::{sharded, Averaging, CurvatureKind, DataRef, MAX_DENSE_PARAMS};
use crate::data::{Dataset, DatasetKind};
use crate::error::{Error, Result};
use crate::hypergrad::{grad_eta_total, HyperConfig};
use crate::laplace::{log_prior_grad, Curvature, MarglikReport, Prior};
use crate::likelihood::{argmax, log_sum_exp};
use crate::linalg::Mat;
use crate::model::MlpModel;

/// Augerino's norm reward on `η`.
pub const AUGERINO_ETA_REWARD: f64 = 1e-2;
/// Augerino's fixed weight decay.
pub const AUGERINO_WEIGHT_DECAY: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Method {
    /// Plain network, no augmentation.
    Baseline,
    /// Augmentation with `η` held fixed. By default every augmented copy is
    /// its own datum of weight `1/S`; with `averaged` the network is the
    /// averaged predictor instead.
    DataAug {
        eta: Vec<f64>,
        #[serde(default)]
        averaged: bool,
    },
    /// Joint training of weights and `η` on a regularised training loss.
    Augerino,
    /// `η` learned by ascending the Laplace marginal likelihood.
    Marglik,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::DataAug { .. } => "data_aug",
            Method::Augerino => "augerino",
            Method::Marglik => "marglik",
        }
    }

    fn averaging(&self) -> Averaging {
        match self {
            Method::DataAug { averaged: false, .. } => Averaging::Likelihood,
            _ => Averaging::Logits,
        }
    }

    fn augments(&self) -> bool {
        !matches!(self, Method::Baseline)
    }
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Minibatch size; `None` trains full batch.
    #[serde(default)]
    pub batch_size: Option<usize>,
    /// Augmentation samples per datum during training and for curvature.
    pub samples_train: usize,
    pub samples_test: usize,
    pub lr_theta: f64,
    pub lr_theta_floor: f64,
    pub lr_hyper: f64,
    pub lr_hyper_floor: f64,
    /// Learning rate of the log prior precisions.
    pub lr_prior: f64,
    /// Initial prior precision of every layer.
    pub prior_precision: f64,
    pub burnin_epochs: usize,
    pub hyper_every: usize,
    /// Data used for the curvature derivative; `None` uses all.
    #[serde(default)]
    pub hyper_subsample: Option<usize>,
    pub curvature: CurvatureKind,
    pub method: Method,
    pub antithetic: bool,
    /// Initial `η`; zeros when absent.
    #[serde(default)]
    pub eta_init: Option<Vec<f64>>,
    #[serde(default = "default_true")]
    pub include_dlambda: bool,
    /// Also evaluate the dense-GGN marginal likelihood at the end.
    #[serde(default)]
    pub final_full_marglik: bool,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.hyper_every == 0 {
            return bad("hyper_every must be at least 1".into());
        }
        if self.samples_train == 0 || self.samples_test == 0 {
            return bad("sample counts must be at least 1".into());
        }
        if self.antithetic && (self.samples_train % 2 == 1 || self.samples_test % 2 == 1) {
            return bad("antithetic sampling needs even sample counts".into());
        }
        if self.batch_size == Some(0) {
            return bad("batch_size must be at least 1".into());
        }
        if self.hyper_subsample == Some(0) {
            return bad("hyper_subsample must be at least 1".into());
        }
        for (name, v) in [
            ("lr_theta", self.lr_theta),
            ("lr_theta_floor", self.lr_theta_floor),
            ("lr_hyper", self.lr_hyper),
            ("lr_hyper_floor", self.lr_hyper_floor),
            ("lr_prior", self.lr_prior),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if !(self.prior_precision > 0.0 && self.prior_precision.is_finite()) {
            return bad(format!("prior_precision must be positive, got {}", self.prior_precision));
        }
        if let Some(e) = &self.eta_init {
            if e.iter().any(|v| !v.is_finite()) {
                return bad("eta_init must be finite".into());
            }
        }
        Ok(())
    }
}

/// Cosine decay from `start` at epoch 0 to `floor` at `epochs`.
pub fn cosine_lr(epoch: usize, epochs: usize, start: f64, floor: f64) -> f64 {
    let t = (epoch.min(epochs) as f64) / epochs.max(1) as f64;
    floor + 0.5 * (start - floor) * (1.0 + (PI * t).cos())
}

/// Adam for a minimised objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Adam { m: vec![0.0; n], v: vec![0.0; n], t: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimiser holds {} moments, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grad.len()
            )));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Augmentation family matching a dataset, if any.
pub fn family_for(kind: DatasetKind) -> Option<Family> {
    match kind {
        DatasetKind::Points2D => Some(Family::PointRotation),
        DatasetKind::Images { height, width } => Some(Family::ImageAffine { height, width }),
        DatasetKind::Polar => None,
    }
}

/// Summed training loss over a set of data and its gradients.
#[derive(Clone, Debug)]
pub struct LossGrad {
    /// `Σ nll`.
    pub nll: f64,
    /// `∂ Σ nll / ∂θ`.
    pub theta: Vec<f64>,
    /// `∂ Σ nll / ∂η`, when requested.
    pub eta: Vec<f64>,
}

/// `Σ nll` and its gradients over `indices`, sharded.
pub fn nll_grads(
    model: &MlpModel,
    data: DataRef,
    indices: &[usize],
    aug: Option<&AugSpec>,
    averaging: Averaging,
    want_eta: bool,
) -> Result<LossGrad> {
    let (p, k) = (model.num_params(), if want_eta { aug.map_or(0, |a| a.params.k()) } else { 0 });
    sharded(
        indices,
        || Ok(LossGrad { nll: 0.0, theta: vec![0.0; p], eta: vec![0.0; k] }),
        |st, idx| chunk_nll_grads(st, model, data, idx, aug, averaging, k > 0),
        |a, b| {
            a.nll += b.nll;
            a.theta.iter_mut().zip(&b.theta).for_each(|(x, y)| *x += y);
            a.eta.iter_mut().zip(&b.eta).for_each(|(x, y)| *x += y);
            Ok(())
        },
    )
}

/// Writes softmax probabilities minus the one-hot label into `row`, returns the nll.
fn softmax_residual(f: &[f64], y: usize, row: &mut [f64]) -> f64 {
    let lse = log_sum_exp(f);
    for (q, (r, v)) in row.iter_mut().zip(f).enumerate() {
        *r = (v - lse).exp() - if q == y { 1.0 } else { 0.0 };
    }
    lse - f[y]
}

fn chunk_nll_grads(
    st: &mut LossGrad,
    model: &MlpModel,
    data: DataRef,
    idx: &[usize],
    aug: Option<&AugSpec>,
    averaging: Averaging,
    want_eta: bool,
) -> Result<()> {
    let batch = augment_batch(data.inputs, idx, aug, want_eta)?;
    let s = batch.samples;
    let trace = model.forward_batch(batch.x.clone())?;
    let c = model.output_dim();
    let rows = trace.rows();
    let mut delta = Mat::zeros(rows, c);
    match averaging {
        Averaging::Logits => {
            let fbar = group_mean(trace.logits(), s, batch.paired);
            let mut resid = Mat::zeros(idx.len(), c);
            for (j, &n) in idx.iter().enumerate() {
                st.nll += softmax_residual(fbar.row(j), data.labels[n], resid.row_mut(j));
                for t in 0..s {
                    for (d, r) in delta.row_mut(j * s + t).iter_mut().zip(resid.row(j)) {
                        *d = r / s as f64;
                    }
                }
            }
            if want_eta {
                for (i, dx) in batch.dx.iter().enumerate() {
                    let tangent = model.tangent_batch(&trace, dx.clone());
                    let dfbar = group_mean(tangent.logits(), s, batch.paired);
                    st.eta[i] += resid.frobenius_dot(&dfbar);
                }
            }
        }
        Averaging::Likelihood => {
            if want_eta {
                return Err(Error::Config("η-gradients need the averaged predictor".into()));
            }
            let mut r = vec![0.0; c];
            for (j, &n) in idx.iter().enumerate() {
                let mut acc = 0.0;
                for t in 0..s {
                    acc += softmax_residual(trace.logits().row(j * s + t), data.labels[n], &mut r);
                    for (d, v) in delta.row_mut(j * s + t).iter_mut().zip(&r) {
                        *d = v / s as f64;
                    }
                }
                st.nll += acc / s as f64;
            }
        }
    }
    model.backward_batch(&trace, &delta, &mut st.theta);
    Ok(())
}

/// Accuracy and mean nll of the averaged predictor.
pub fn evaluate(model: &MlpModel, data: DataRef, aug: Option<&AugSpec>) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::Config("cannot evaluate on an empty dataset".into()));
    }
    let (correct, nll) = sharded(
        &data.all_indices(),
        || Ok((0usize, 0.0)),
        |st: &mut (usize, f64), idx| {
            let batch = augment_batch(data.inputs, idx, aug, false)?;
            let trace = model.forward_batch(batch.x)?;
            let fbar = group_mean(trace.logits(), batch.samples, batch.paired);
            for (j, &n) in idx.iter().enumerate() {
                let f = fbar.row(j);
                let y = data.labels[n];
                st.0 += usize::from(argmax(f) == y);
                st.1 += log_sum_exp(f) - f[y];
            }
            Ok(())
        },
        |a, b| {
            a.0 += b.0;
            a.1 += b.1;
            Ok(())
        },
    )?;
    let n = data.len() as f64;
    Ok((correct as f64 / n, nll / n))
}

/// Gradient of Augerino's regulariser `−c‖η‖₂`; zero at `η = 0`.
pub fn augerino_reg_grad(eta: &[f64]) -> Vec<f64> {
    let norm = eta.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return vec![0.0; eta.len()];
    }
    eta.iter().map(|v| -AUGERINO_ETA_REWARD * v / norm).collect()
}

/// Mutable state of one run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: MlpModel,
    pub prior: Prior,
    /// Present for every augmenting method.
    pub aug: Option<AugmentationParams>,
    pub opt_theta: Adam,
    pub opt_eta: Adam,
    pub opt_prior: Adam,
}

impl TrainState {
    pub fn new(model: MlpModel, kind: DatasetKind, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let aug = if cfg.method.augments() {
            let family = family_for(kind)
                .ok_or_else(|| Error::Config(format!("method {} needs an augmentable dataset", cfg.method.name())))?;
            let eta = match (&cfg.method, &cfg.eta_init) {
                (Method::DataAug { eta, .. }, _) => eta.clone(),
                (_, Some(e)) => e.clone(),
                _ => vec![0.0; family.k()],
            };
            Some(AugmentationParams::new(family, eta)?)
        } else {
            None
        };
        let k = aug.as_ref().map_or(0, |a| a.k());
        let prior = Prior::uniform(model.num_layers(), cfg.prior_precision)?;
        Ok(TrainState {
            opt_theta: Adam::new(model.num_params()),
            opt_eta: Adam::new(k),
            opt_prior: Adam::new(model.num_layers()),
            model,
            prior,
            aug,
        })
    }

    fn spec(&self, samples: usize, antithetic: bool, key: NoiseKey) -> Option<AugSpec<'_>> {
        self.aug.as_ref().map(|params| AugSpec { params, samples, antithetic, key })
    }
}

fn base_key(cfg: &TrainConfig) -> NoiseKey {
    NoiseKey::new(cfg.seed, 0)
}

fn check_finite(what: &str, epoch: usize, step: usize, values: &[f64]) -> Result<()> {
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::Divergence(format!("{what} became {v} at epoch {epoch}, step {step}")));
    }
    Ok(())
}

/// One pass over the data in minibatches; returns the mean training nll.
pub fn map_epoch(state: &mut TrainState, data: DataRef, cfg: &TrainConfig, epoch: usize) -> Result<f64> {
    let n = data.len();
    let lr = cosine_lr(epoch, cfg.epochs, cfg.lr_theta, cfg.lr_theta_floor);
    let batch = cfg.batch_size.unwrap_or(n).min(n).max(1);
    let mut order = data.all_indices();
    if batch < n {
        order.shuffle(&mut base_key(cfg).child(4).rng(epoch as u64));
    }
    let augerino = cfg.method == Method::Augerino;
    let averaging = cfg.method.averaging();
    let mut total = 0.0;
    for (step, idx) in order.chunks(batch).enumerate() {
        let key = base_key(cfg).child(1).child(epoch as u64).child(step as u64);
        let spec = state.spec(cfg.samples_train, cfg.antithetic, key);
        let lg = nll_grads(&state.model, data, idx, spec.as_ref(), averaging, augerino)?;
        check_finite("training loss", epoch, step, &[lg.nll])?;
        total += lg.nll;
        let b = idx.len() as f64;
        let mut theta = state.model.flatten();
        let mut grad: Vec<f64> = lg.theta.iter().map(|g| g / b).collect();
        if augerino {
            grad.iter_mut().zip(&theta).for_each(|(g, t)| *g += AUGERINO_WEIGHT_DECAY * t);
            let aug = state.aug.as_mut().expect("augerino augments");
            let reg = augerino_reg_grad(&aug.eta);
            let eg: Vec<f64> = lg.eta.iter().zip(&reg).map(|(g, r)| g / b + r).collect();
            check_finite("η-gradient", epoch, step, &eg)?;
            state.opt_eta.step(&mut aug.eta, &eg, lr)?;
        } else {
            let prior = log_prior_grad(&state.model, &state.prior)?;
            grad.iter_mut().zip(&prior).for_each(|(g, p)| *g -= p / n as f64);
        }
        check_finite("weight gradient", epoch, step, &grad)?;
        state.opt_theta.step(&mut theta, &grad, lr)?;
        state.model.set_flat(&theta)?;
    }
    Ok(total / n as f64)
}

fn hyper_config(cfg: &TrainConfig, curvature: CurvatureKind) -> HyperConfig {
    HyperConfig {
        curvature,
        samples: cfg.samples_train,
        antithetic: cfg.antithetic,
        subsample: cfg.hyper_subsample,
        include_dlambda: cfg.include_dlambda,
    }
}

/// Hyper-steps are due after burn-in on every `hyper_every`-th epoch.
pub fn hyper_due(cfg: &TrainConfig, epoch: usize) -> bool {
    epoch >= cfg.burnin_epochs && (epoch - cfg.burnin_epochs) % cfg.hyper_every == 0
}

/// Marginal likelihood of the current state under `curvature`.
pub fn marglik_report(state: &TrainState, data: DataRef, cfg: &TrainConfig, curvature: CurvatureKind, key: NoiseKey) -> Result<MarglikReport> {
    let spec = state.spec(cfg.samples_train, cfg.antithetic, key.child(1));
    Curvature::build(curvature, &state.model, data, &data.all_indices(), spec.as_ref(), cfg.method.averaging())?
        .report(&state.model, &state.prior)
}

/// One marginal-likelihood ascent step on `η` (method `marglik` only) and
/// the log prior precisions. Returns the report at the state before the step.
pub fn hyper_step(state: &mut TrainState, data: DataRef, cfg: &TrainConfig, epoch: usize) -> Result<MarglikReport> {
    let key = base_key(cfg).child(2).child(epoch as u64);
    let lr_eta = cosine_lr(epoch, cfg.epochs, cfg.lr_hyper, cfg.lr_hyper_floor);
    let (report, dprec) = match (&cfg.method, state.aug.as_ref()) {
        (Method::Marglik, Some(aug)) => {
            let out = grad_eta_total(&state.model, data, aug, &state.prior, &hyper_config(cfg, cfg.curvature), key)?;
            check_finite("η-gradient", epoch, 0, &out.eta.total)?;
            let descent: Vec<f64> = out.eta.total.iter().map(|g| -g).collect();
            let aug = state.aug.as_mut().expect("checked above");
            state.opt_eta.step(&mut aug.eta, &descent, lr_eta)?;
            (out.report, out.log_precision)
        }
        _ => {
            let spec = state.spec(cfg.samples_train, cfg.antithetic, key.child(1));
            let curv = Curvature::build(cfg.curvature, &state.model, data, &data.all_indices(), spec.as_ref(), cfg.method.averaging())?;
            (curv.report(&state.model, &state.prior)?, curv.grad_log_precision(&state.model, &state.prior)?)
        }
    };
    check_finite("prior gradient", epoch, 0, &dprec)?;
    let descent: Vec<f64> = dprec.iter().map(|g| -g).collect();
    state.opt_prior.step(&mut state.prior.log_precision, &descent, cfg.lr_prior)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub epoch: usize,
    /// `|ηᵢ|` after the epoch.
    pub eta: Vec<f64>,
    pub report: MarglikReport,
    pub train_nll: f64,
    pub lr_theta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub method: String,
    pub seed: u64,
    pub trajectory: Vec<TrajectoryRow>,
    /// Final `η` as optimised (signed).
    pub eta: Vec<f64>,
    pub eta_abs: Vec<f64>,
    pub log_precision: Vec<f64>,
    pub test_accuracy: f64,
    pub test_nll: f64,
    /// Final marginal likelihood with the configured curvature.
    pub report: MarglikReport,
    pub report_kfac: MarglikReport,
    pub report_full: Option<MarglikReport>,
    pub num_params: usize,
    pub wallclock_seconds: f64,
}

impl RunResult {
    /// `epoch,eta_1..eta_k,loglik,logprior,logdet_term,marglik_total,train_nll,lr_theta`.
    pub fn trajectory_csv(&self) -> String {
        let k = self.eta.len();
        let mut out = String::from("epoch");
        for i in 1..=k {
            let _ = write!(out, ",eta_{i}");
        }
        out.push_str(",loglik,logprior,logdet_term,marglik_total,train_nll,lr_theta\n");
        for r in &self.trajectory {
            let _ = write!(out, "{}", r.epoch);
            for e in &r.eta {
                let _ = write!(out, ",{e}");
            }
            let m = &r.report;
            let _ = writeln!(out, ",{},{},{},{},{},{}", m.loglik, m.logprior, m.logdet_term, m.total, r.train_nll, r.lr_theta);
        }
        out
    }
}

/// Trains `model` on `train` and evaluates on `test`.
pub fn run(model: MlpModel, train: &Dataset, test: &Dataset, cfg: &TrainConfig) -> Result<RunResult> {
    Ok(run_with_model(model, train, test, cfg)?.0)
}

/// As [`run`], also returning the trained network.
pub fn run_with_model(model: MlpModel, train: &Dataset, test: &Dataset, cfg: &TrainConfig) -> Result<(RunResult, MlpModel)> {
    let start = Instant::now();
    let mut state = TrainState::new(model, train.kind, cfg)?;
    if test.kind != train.kind {
        return Err(Error::Config("train and test data differ in kind".into()));
    }
    if let Some(m) = cfg.hyper_subsample {
        if m > train.len() {
            return Err(Error::Config(format!("hyper_subsample {m} exceeds the {} training data", train.len())));
        }
    }
    let data = DataRef::new(&train.inputs, &train.labels)?;
    let mut trajectory = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg.epochs, cfg.lr_theta, cfg.lr_theta_floor);
        let train_nll = map_epoch(&mut state, data, cfg, epoch)?;
        let report = if cfg.method != Method::Augerino && hyper_due(cfg, epoch) {
            hyper_step(&mut state, data, cfg, epoch)?
        } else {
            marglik_report(&state, data, cfg, cfg.curvature, base_key(cfg).child(2).child(epoch as u64))?
        };
        let eta = state.aug.as_ref().map_or_else(Vec::new, |a| a.magnitudes());
        log::debug!("epoch {epoch}: nll {train_nll:.4}, marglik {:.3}, |η| {eta:?}", report.total);
        trajectory.push(TrajectoryRow { epoch, eta, report, train_nll, lr_theta: lr });
    }
    let final_key = base_key(cfg).child(5);
    let report_kfac = marglik_report(&state, data, cfg, CurvatureKind::Kfac, final_key)?;
    let report_full = if cfg.final_full_marglik || cfg.curvature == CurvatureKind::Full {
        if state.model.num_params() > MAX_DENSE_PARAMS {
            return Err(Error::Capacity(format!("{} parameters are too many for a dense marginal likelihood", state.model.num_params())));
        }
        Some(marglik_report(&state, data, cfg, CurvatureKind::Full, final_key)?)
    } else {
        None
    };
    let report = match cfg.curvature {
        CurvatureKind::Kfac => report_kfac,
        CurvatureKind::Full => report_full.expect("computed above"),
    };
    let test_ref = DataRef::new(&test.inputs, &test.labels)?;
    let test_spec = state.spec(cfg.samples_test, cfg.antithetic, base_key(cfg).child(3));
    let (test_accuracy, test_nll) = evaluate(&state.model, test_ref, test_spec.as_ref())?;
    let eta = state.aug.as_ref().map_or_else(Vec::new, |a| a.eta.clone());
    let result = RunResult {
        method: cfg.method.name().into(),
        seed: cfg.seed,
        trajectory,
        eta_abs: eta.iter().map(|v| v.abs()).collect(),
        eta,
        log_precision: state.prior.log_precision.clone(),
        test_accuracy,
        test_nll,
        report,
        report_kfac,
        report_full,
        num_params: state.model.num_params(),
        wallclock_seconds: start.elapsed().as_secs_f64(),
    };
    Ok((result, state.model))
}
