//! Command implementations of the `augmarglik` executable.

pub mod config;
pub mod report;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use augmarglik::augment::{draw_eps, AugmentationParams, Family};
use augmarglik::batch::NoiseKey;
use augmarglik::curvature::DataRef;
use augmarglik::data::{write_idx, DatasetKind};
use augmarglik::hypergrad::{fd_oracle, grad_eta_total, marglik_at, relative_error, HyperConfig};
use augmarglik::laplace::{MarglikReport, Prior};
use augmarglik::model::write_atomic;
use augmarglik::train::{family_for, run_with_model, RunResult};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

/// Largest network `gradcheck` accepts.
pub const GRADCHECK_MAX_PARAMS: usize = 500;
/// Relative error below which an analytic gradient passes.
pub const GRADCHECK_TOLERANCE: f64 = 1e-3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Usage(String),
    #[error("gradient check failed for {0} component(s)")]
    GradcheckFailed(usize),
    #[error(transparent)]
    Core(#[from] augmarglik::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    /// Process exit code: 2 for invalid input, 3 for divergence, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => 2,
            CliError::Core(augmarglik::Error::Config(_)) => 2,
            CliError::Core(augmarglik::Error::Divergence(_)) => 3,
            _ => 1,
        }
    }
}

/// Output directory: `--out`, then `OUTPUT_DIR`, then the configured one.
pub fn resolve_output_dir(cfg: &RunConfig, out: Option<&Path>) -> PathBuf {
    out.map(Path::to_path_buf)
        .or_else(|| std::env::var_os("OUTPUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| cfg.output_dir.clone())
}

/// Contents of `result.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultFile {
    pub dataset: String,
    pub transform: String,
    pub method: String,
    pub curvature: String,
    pub seed: u64,
    pub marglik_total: f64,
    pub test_acc: f64,
    pub test_nll: f64,
    pub eta_abs: Vec<f64>,
    pub config: RunConfig,
    pub result: RunResult,
}

fn label<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default()
}

/// Trains one configuration and writes `trajectory.csv`, `result.json` and
/// the model checkpoint into `dir`.
pub fn cmd_train(cfg: &RunConfig, dir: &Path) -> Result<ResultFile, CliError> {
    let splits = cfg.datasets()?;
    let model = cfg.build_model(&splits.train)?;
    let tc = cfg.train_config();
    log::info!(
        "training {} on {} train / {} test data, {} parameters",
        tc.method.name(),
        splits.train.len(),
        splits.test.len(),
        model.num_params()
    );
    let (result, final_model) = run_with_model(model, &splits.train, &splits.test, &tc)?;
    std::fs::create_dir_all(dir)?;
    write_atomic(&dir.join("trajectory.csv"), result.trajectory_csv().as_bytes())?;
    final_model.save_checkpoint(&dir.join("model.json"))?;
    let file = ResultFile {
        dataset: label(&cfg.dataset.name),
        transform: label(&cfg.dataset.transform),
        method: result.method.clone(),
        curvature: label(&cfg.method.curvature),
        seed: cfg.train.seed,
        marglik_total: result.report.total,
        test_acc: result.test_accuracy,
        test_nll: result.test_nll,
        eta_abs: result.eta_abs.clone(),
        config: cfg.clone(),
        result,
    };
    write_atomic(&dir.join("result.json"), serde_json::to_string_pretty(&file)?.as_bytes())?;
    Ok(file)
}

/// One line of the gradient check table.
#[derive(Clone, Debug, PartialEq)]
pub struct GradRow {
    pub component: String,
    pub analytic: f64,
    pub finite_difference: f64,
    pub relative_error: f64,
}

impl GradRow {
    pub fn passed(&self) -> bool {
        self.relative_error < GRADCHECK_TOLERANCE
    }
}

fn default_eta(family: Family) -> Vec<f64> {
    match family {
        Family::PointRotation => vec![0.8],
        Family::ImageAffine { .. } => vec![0.15, -0.1, 0.4, 0.12, -0.08, 0.1],
    }
}

/// Analytic against central finite-difference gradients of the marginal
/// likelihood in `η` (data-fit part, log-determinant part, total) and in
/// the log prior precisions, at the initial weights.
pub fn cmd_gradcheck(cfg: &RunConfig, corrupt: bool) -> Result<Vec<GradRow>, CliError> {
    let splits = cfg.datasets()?;
    let model = cfg.build_model(&splits.train)?;
    if model.num_params() > GRADCHECK_MAX_PARAMS {
        return Err(CliError::Usage(format!(
            "gradcheck needs a network with at most {GRADCHECK_MAX_PARAMS} parameters, this one has {}",
            model.num_params()
        )));
    }
    let family = family_for(splits.train.kind).ok_or_else(|| CliError::Usage("gradcheck needs an augmentable dataset".into()))?;
    let eta = cfg.method.fixed_eta.clone().or_else(|| cfg.train.eta_init.clone()).unwrap_or_else(|| default_eta(family));
    let aug = AugmentationParams::new(family, eta)?;
    let layers = model.num_layers();
    let prior = Prior::new((0..layers).map(|l| cfg.train.prior_precision.ln() + 0.3 * l as f64 - 0.2).collect())?;
    let hc = HyperConfig {
        curvature: cfg.method.curvature,
        samples: cfg.train.samples_train,
        antithetic: cfg.train.antithetic,
        subsample: None,
        include_dlambda: cfg.train.include_dlambda,
    };
    let data = DataRef::new(&splits.train.inputs, &splits.train.labels)?;
    let key = NoiseKey::new(cfg.train.seed, 7);
    let out = grad_eta_total(&model, data, &aug, &prior, &hc, key)?;
    let floor = 1e-6 * out.report.total.abs().max(1.0);
    let h = 1e-5;

    let at_eta = |e: &[f64]| -> augmarglik::Result<MarglikReport> {
        marglik_at(&model, data, &AugmentationParams::new(family, e.to_vec())?, &prior, &hc, key)
    };
    let fd_part = |part: fn(&MarglikReport) -> f64| fd_oracle(|e| Ok(part(&at_eta(e)?)), &aug.eta, h);
    let fd_loglik = fd_part(|r| r.loglik)?;
    let fd_logdet = fd_part(|r| r.logdet_term)?;
    let fd_total = fd_part(|r| r.total)?;
    let fd_prec = fd_oracle(
        |lp| Ok(marglik_at(&model, data, &aug, &Prior::new(lp.to_vec())?, &hc, key)?.total),
        &prior.log_precision,
        h,
    )?;

    let mut rows = Vec::new();
    let mut push = |component: String, analytic: f64, fd: f64| {
        let analytic = if corrupt { analytic * 1.1 + 1e-3 } else { analytic };
        rows.push(GradRow { component, analytic, finite_difference: fd, relative_error: relative_error(analytic, fd, floor) });
    };
    for i in 0..aug.k() {
        push(format!("eta_{} loglik", i + 1), out.eta.loglik_part[i], fd_loglik[i]);
        push(format!("eta_{} logdet", i + 1), out.eta.logdet_part[i], fd_logdet[i]);
        push(format!("eta_{} total", i + 1), out.eta.total[i], fd_total[i]);
    }
    for l in 0..layers {
        push(format!("log_prec_{}", l + 1), out.log_precision[l], fd_prec[l]);
    }
    Ok(rows)
}

pub fn format_gradcheck(rows: &[GradRow]) -> String {
    let mut s = format!("{:<18} {:>16} {:>18} {:>12}\n", "component", "analytic", "finite-difference", "rel-error");
    for r in rows {
        let _ = writeln!(
            s,
            "{:<18} {:>16.8e} {:>18.8e} {:>12.3e}{}",
            r.component,
            r.analytic,
            r.finite_difference,
            r.relative_error,
            if r.passed() { "" } else { "  FAIL" }
        );
    }
    s
}

/// Sampled augmentation transforms as CSV rows of nine entries.
pub fn cmd_dump_transforms(cfg: &RunConfig, samples: usize) -> Result<String, CliError> {
    let splits = cfg.datasets()?;
    let family = family_for(splits.train.kind).ok_or_else(|| CliError::Usage("dataset has no augmentation family".into()))?;
    let eta = cfg.method.fixed_eta.clone().or_else(|| cfg.train.eta_init.clone()).unwrap_or_else(|| vec![0.0; family.k()]);
    let aug = AugmentationParams::new(family, eta)?;
    let eps = draw_eps(&mut NoiseKey::new(cfg.train.seed, 9).rng(0), aug.k(), samples.max(1), false)?;
    let mut s = String::from("t00,t01,t02,t10,t11,t12,t20,t21,t22\n");
    for r in 0..eps.rows() {
        let t = aug.transform(eps.row(r)).flat();
        let cells: Vec<String> = t.iter().map(f64::to_string).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    Ok(s)
}

/// Writes the configured train and test data into `dir`, as dataset caches
/// and, for images, as IDX files.
pub fn cmd_gen_data(cfg: &RunConfig, dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let splits = cfg.datasets()?;
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for (name, d) in [("train", &splits.train), ("test", &splits.test)] {
        let p = dir.join(format!("{name}.json"));
        d.save(&p)?;
        written.push(p);
        if let DatasetKind::Images { .. } = d.kind {
            let (i, l) = (dir.join(format!("{name}-images-idx3-ubyte")), dir.join(format!("{name}-labels-idx1-ubyte")));
            write_idx(d, &i, &l)?;
            written.extend([i, l]);
        }
    }
    Ok(written)
}
