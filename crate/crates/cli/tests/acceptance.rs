//! Acceptance criteria. Every criterion prints one `PASS` or `FAIL` line.
//!
//! The cheap criteria (4, 5, 7) run with the normal test suite. The toy
//! experiments (1, 2, 3) and the MNIST study (6) are long and ignored by
//! default:
//!
//! ```text
//! cargo test --release -p augmarglik-cli --test acceptance -- --ignored --nocapture --test-threads 1
//! ```
//!
//! Criterion 6 reads the IDX files from the directory named by `MNIST_DIR`.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::time::Instant;

use augmarglik::augment::{AugmentationParams, Family};
use augmarglik::batch::{AugSpec, NoiseKey};
use augmarglik::curvature::{kfac_pass, kfac_tangent_pass, Averaging, CurvatureKind, DataRef};
use augmarglik::hypergrad::{grad_eta_logdet_kfac, grad_eta_total, HyperConfig};
use augmarglik::laplace::{Curvature, Prior};
use augmarglik::likelihood::{lambda, softmax};
use augmarglik::linalg::{inverse_spd, kron_damped_bilinear_trace, kron_damped_logdet, logdet_spd, sym_eigh, Mat};
use augmarglik::model::{Activation, Dense, MlpModel};
use augmarglik::train::{run_with_model, RunResult};
use augmarglik_cli::config::RunConfig;
use augmarglik_cli::{cmd_gradcheck, cmd_train};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 3] = [0, 1, 2];

fn verdict(criterion: &str, passed: bool, detail: &str) -> bool {
    println!("{} criterion {criterion}: {detail}", if passed { "PASS" } else { "FAIL" });
    passed
}

fn config(name: &str) -> RunConfig {
    RunConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)).unwrap()
}

fn train(mut cfg: RunConfig, seed: u64) -> RunResult {
    cfg.override_seed(seed);
    let splits = cfg.datasets().unwrap();
    let model = cfg.build_model(&splits.train).unwrap();
    run_with_model(model, &splits.train, &splits.test, &cfg.train_config()).unwrap().0
}

fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> Mat {
    let b = Mat::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    b.matmul_tn(&b)
}

fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    let mut d = a.clone();
    d.axpy(-1.0, b).unwrap();
    d.max_abs()
}

#[test]
fn criterion_4_gradient_checks() {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut all = true;
    for name in ["gradcheck_toy.json", "gradcheck_image.json", "gradcheck_deep.json"] {
        let rows = cmd_gradcheck(&config(name), false).unwrap();
        all &= rows.iter().all(|r| r.passed());
        worst = rows.iter().map(|r| r.relative_error).fold(worst, f64::max);
    }
    let secs = start.elapsed().as_secs_f64();
    let ok = verdict(
        "4",
        all && worst < 1e-3 && secs <= 60.0,
        &format!("gradcheck on toy k=1, 8x8 image k=6 and 2-15-15-2 net: worst relative error {worst:.2e} (< 1e-3), {secs:.1} s (<= 60 s)"),
    );
    assert!(ok);
}

/// Class-probability model with three free logits and no inputs.
fn bias_model(b: &[f64]) -> MlpModel {
    MlpModel::from_layers(vec![Dense { w: Mat::zeros(3, 0), b: b.to_vec(), activation: Activation::Identity }]).unwrap()
}

fn quadrature_log_evidence(counts: [f64; 3], gamma: f64) -> f64 {
    let (half, points) = (7.0, 141);
    let step = 2.0 * half / (points - 1) as f64;
    let mut logs = Vec::new();
    for i in 0..points {
        for j in 0..points {
            for k in 0..points {
                let b = [-half + i as f64 * step, -half + j as f64 * step, -half + k as f64 * step];
                let lse = b.iter().map(|v| v.exp()).sum::<f64>().ln();
                let loglik: f64 = (0..3).map(|c| counts[c] * (b[c] - lse)).sum();
                let sq: f64 = b.iter().map(|v| v * v).sum();
                logs.push(loglik + 1.5 * (gamma / (2.0 * PI)).ln() - 0.5 * gamma * sq);
            }
        }
    }
    let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + logs.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + 3.0 * step.ln()
}

#[test]
fn criterion_5_oracle_equivalences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);

    // (a) single datum, no augmentation: KFAC block against J_lᵀ Λ J_l.
    let mut worst_a = 0.0f64;
    for seed in 0..10 {
        let model = MlpModel::new(&[2, 6, 4, 3], Activation::Tanh, seed).unwrap();
        let x = Mat::from_fn(1, 2, |_, _| rng.random_range(-1.5..1.5));
        let y = vec![rng.random_range(0..3)];
        let data = DataRef::new(&x, &y).unwrap();
        let st = kfac_pass(&model, data, &[0], None, Averaging::Logits).unwrap();
        let j = model.jacobian_params(x.row(0)).unwrap();
        let lam = lambda(&model.forward(x.row(0)).unwrap().0);
        for l in 0..model.num_layers() {
            let (off, cnt) = (model.layer_offsets()[l], model.layer_param_counts()[l]);
            let jl = Mat::from_fn(3, cnt, |c, p| j[(c, off + p)]);
            worst_a = worst_a.max(max_abs_diff(&st.dense_block(l), &jl.matmul_tn(&lam.matmul(&jl))));
        }
    }

    // (b) Kronecker damped logdet and trace against dense matrices.
    let mut worst_b = 0.0f64;
    for _ in 0..20 {
        let (na, ng) = (rng.random_range(1..6), rng.random_range(1..6));
        let (a, g) = (random_spd(na, &mut rng), random_spd(ng, &mut rng));
        let (x, yv) = (random_spd(na, &mut rng), random_spd(ng, &mut rng));
        let (scale, gamma) = (rng.random_range(0.05..2.0), rng.random_range(0.05..2.0));
        let (ea, eg) = (sym_eigh(&a).unwrap(), sym_eigh(&g).unwrap());
        let mut dense = a.kron(&g).scaled(scale);
        for i in 0..na * ng {
            dense[(i, i)] += gamma;
        }
        let ld = kron_damped_logdet(&ea.values, &eg.values, scale, gamma).unwrap();
        let tr = kron_damped_bilinear_trace(&ea.rotated_diag(&x), &eg.rotated_diag(&yv), &ea.values, &eg.values, scale, gamma).unwrap();
        worst_b = worst_b.max((ld - logdet_spd(&dense).unwrap()).abs());
        worst_b = worst_b.max((tr - inverse_spd(&dense).unwrap().frobenius_dot(&x.kron(&yv))).abs());
    }

    // (c) preconditioner identity on a single-layer net.
    let mut worst_c = 0.0f64;
    for seed in 0..5 {
        let model = MlpModel::new(&[2, 3], Activation::Tanh, seed).unwrap();
        let x = Mat::from_fn(15, 2, |_, _| rng.random_range(-1.5..1.5));
        let y: Vec<usize> = (0..15).map(|_| rng.random_range(0..3)).collect();
        let data = DataRef::new(&x, &y).unwrap();
        let aug = AugmentationParams::new(Family::PointRotation, vec![rng.random_range(-1.2..1.2)]).unwrap();
        let spec = AugSpec { params: &aug, samples: 6, antithetic: true, key: NoiseKey::new(seed, 3) };
        let idx = data.all_indices();
        let st = kfac_pass(&model, data, &idx, Some(&spec), Averaging::Logits).unwrap();
        let t = kfac_tangent_pass(&model, data, &idx, &spec, true).unwrap();
        let prior = Prior::new(vec![rng.random_range(-1.0..1.0)]).unwrap();
        let got = grad_eta_logdet_kfac(&st.finalize().unwrap(), &t, &prior, 15).unwrap()[0];
        let mut hbar = st.dense_block(0);
        for p in 0..hbar.rows() {
            hbar[(p, p)] += prior.log_precision[0].exp();
        }
        let mut dh = t.da[0][0].kron(&st.g[0]);
        dh.add_assign(&st.a[0].kron(&t.dg[0][0])).unwrap();
        dh.scale(1.0 / 15.0);
        let dense = inverse_spd(&hbar).unwrap().frobenius_dot(&dh);
        worst_c = worst_c.max((got - dense).abs());
    }

    // (d) Laplace evidence of a three-parameter categorical model against
    // grid quadrature.
    let mut worst_d = 0.0f64;
    for (counts, gamma) in [([6.0, 4.0, 2.0], 1.0), ([10.0, 1.0, 3.0], 0.5), ([3.0, 3.0, 3.0], 2.0)] {
        let n: f64 = counts.iter().sum();
        let mut b = [0.0; 3];
        for _ in 0..20_000 {
            let p = softmax(&b);
            for c in 0..3 {
                b[c] += 0.01 * (counts[c] - n * p[c] - gamma * b[c]);
            }
        }
        let labels: Vec<usize> = (0..3).flat_map(|c| std::iter::repeat_n(c, counts[c] as usize)).collect();
        let inputs = Mat::zeros(labels.len(), 0);
        let data = DataRef::new(&inputs, &labels).unwrap();
        let model = bias_model(&b);
        let prior = Prior::uniform(1, gamma).unwrap();
        let laplace = Curvature::build(CurvatureKind::Full, &model, data, &data.all_indices(), None, Averaging::Logits)
            .unwrap()
            .report(&model, &prior)
            .unwrap()
            .total;
        let quad = quadrature_log_evidence(counts, gamma);
        worst_d = worst_d.max((laplace - quad).abs() / quad.abs());
    }

    let results = [
        verdict("5a", worst_a < 1e-9, &format!("KFAC block vs dense GGN block, N=1: max entry error {worst_a:.2e} (< 1e-9)")),
        verdict("5b", worst_b < 1e-8, &format!("Kronecker logdet/trace vs dense: max error {worst_b:.2e} (< 1e-8)")),
        verdict("5c", worst_c < 1e-8, &format!("preconditioner gradient vs dense trace: max error {worst_c:.2e} (< 1e-8)")),
        verdict("5d", worst_d <= 0.15, &format!("Laplace vs quadrature log evidence, 3 parameters: max relative gap {worst_d:.3} (<= 0.15)")),
    ];
    assert!(results.iter().all(|r| *r));
}

#[test]
fn criterion_7_structural_invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut zero = true;
    for (family, dim) in [(Family::PointRotation, 2), (Family::ImageAffine { height: 4, width: 4 }, 16)] {
        let model = MlpModel::new(&[dim, 5, 3], Activation::Tanh, 1).unwrap();
        let x = Mat::from_fn(12, dim, |_, _| rng.random_range(0.0..1.0));
        let y: Vec<usize> = (0..12).map(|_| rng.random_range(0..3)).collect();
        let data = DataRef::new(&x, &y).unwrap();
        let prior = Prior::uniform(2, 1.0).unwrap();
        for curvature in [CurvatureKind::Kfac, CurvatureKind::Full] {
            let cfg = HyperConfig { curvature, samples: 6, antithetic: true, subsample: None, include_dlambda: true };
            let out = grad_eta_total(&model, data, &AugmentationParams::zeros(family), &prior, &cfg, NoiseKey::new(2, 0)).unwrap();
            zero &= out.eta.total.iter().chain(&out.eta.loglik_part).chain(&out.eta.logdet_part).all(|v| *v == 0.0);
        }
    }

    let mut cfg = config("gradcheck_toy.json");
    cfg.train.epochs = 6;
    cfg.train.burnin_epochs = 3;
    cfg.train.eta_init = Some(vec![0.4]);
    let r = train(cfg.clone(), 0);
    let frozen = r.trajectory[..3].iter().all(|row| row.eta == [0.4]);
    let moved = r.trajectory[3].eta != [0.4];

    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    cmd_train(&cfg, &a).unwrap();
    cmd_train(&cfg, &b).unwrap();
    let same = std::fs::read(a.join("trajectory.csv")).unwrap() == std::fs::read(b.join("trajectory.csv")).unwrap();

    let results = [
        verdict("7a", zero, "eta = 0 antithetic hyper-gradient is the exact zero vector (both families, both curvatures)"),
        verdict("7b", frozen && moved, "eta is bit-constant during the 3 burn-in epochs and moves afterwards"),
        verdict("7c", same, "two runs of the same config and seed write identical trajectory.csv"),
    ];
    assert!(results.iter().all(|r| *r));
}

fn full_total(r: &RunResult) -> f64 {
    r.report_full.expect("configs request the full-GGN report").total
}

#[test]
#[ignore = "trains 15 toy networks; run with --ignored"]
fn criteria_1_2_3_toy_problem() {
    let mut learned = Vec::new();
    let mut full_driven = Vec::new();
    let mut baseline = Vec::new();
    let mut augmented = Vec::new();
    let mut radial = Vec::new();
    for seed in SEEDS {
        learned.push(train(config("toy_marglik.json"), seed));
        full_driven.push(train(config("toy_marglik_full.json"), seed));
        baseline.push(train(config("toy_baseline.json"), seed));
        augmented.push(train(config("toy_data_aug.json"), seed));
        radial.push(train(config("toy_marglik_radial.json"), seed));
    }
    let deg = |r: &RunResult| r.eta_abs[0].to_degrees();
    let in_band = |r: &RunResult| (PI / 4.0..=5.0 * PI / 12.0).contains(&r.eta_abs[0]);
    let list = |rs: &[RunResult], f: &dyn Fn(&RunResult) -> String| rs.iter().map(f).collect::<Vec<_>>().join(", ");

    let hits = learned.iter().filter(|r| in_band(r)).count();
    let slowest = learned.iter().map(|r| r.wallclock_seconds).fold(0.0, f64::max);
    let c1 = verdict(
        "1",
        hits >= 2 && slowest <= 300.0,
        &format!(
            "learned |eta_rot| = [{}] deg, {hits}/3 in [45, 75] (need 2), slowest run {slowest:.0} s (<= 300 s)",
            list(&learned, &|r| format!("{:.1}", deg(r)))
        ),
    );
    let radial_hits = radial.iter().filter(|r| in_band(r)).count();
    println!(
        "INFO criterion 1 on the radial generator (labels fully rotation-invariant): |eta_rot| = [{}] deg, {radial_hits}/3 in band",
        list(&radial, &|r| format!("{:.1}", deg(r)))
    );

    let ordered = (0..3)
        .filter(|&i| full_total(&learned[i]) > full_total(&baseline[i]) && full_total(&baseline[i]) > full_total(&augmented[i]))
        .count();
    let c2 = verdict(
        "2",
        ordered >= 2,
        &format!(
            "full-GGN marglik learned > baseline > data_aug(pi/3) in {ordered}/3 seeds (need 2): [{}]",
            list(&learned, &|r| {
                let i = SEEDS.iter().position(|s| *s == r.seed).unwrap();
                format!("{:.2} / {:.2} / {:.2}", full_total(r), full_total(&baseline[i]), full_total(&augmented[i]))
            })
        ),
    );

    let gap = learned
        .iter()
        .map(|r| {
            let full = r.report_full.unwrap().logdet_term;
            (r.report_kfac.logdet_term - full).abs() / full.abs()
        })
        .fold(0.0, f64::max);
    let drift = learned.iter().zip(&full_driven).map(|(k, f)| (deg(k) - deg(f)).abs()).fold(0.0, f64::max);
    let c3 = verdict(
        "3",
        gap <= 0.15 && drift <= 10.0,
        &format!(
            "KFAC vs full logdet term: max relative gap {gap:.3} (<= 0.15); KFAC-driven vs full-driven |eta_rot| [{}] deg, max difference {drift:.1} (<= 10)",
            list(&full_driven, &|r| format!("{:.1}", deg(r)))
        ),
    );
    assert!(c1 && c2 && c3);
}

fn mnist_config(name: &str, dir: &Path) -> RunConfig {
    let mut cfg = config(name);
    let p = cfg.dataset.paths.as_mut().unwrap();
    for (f, file) in [
        (&mut p.train_images, "train-images-idx3-ubyte"),
        (&mut p.train_labels, "train-labels-idx1-ubyte"),
        (&mut p.test_images, "test-images-idx3-ubyte"),
        (&mut p.test_labels, "test-labels-idx1-ubyte"),
    ] {
        *f = dir.join(file);
    }
    cfg
}

#[test]
#[ignore = "trains 9 MNIST networks; needs MNIST_DIR; run with --ignored"]
fn criterion_6_mnist_subset() {
    let Some(dir) = std::env::var_os("MNIST_DIR").map(PathBuf::from) else {
        verdict("6", false, "MNIST_DIR is not set");
        panic!("MNIST_DIR is not set");
    };
    let runs = |name: &str| SEEDS.iter().map(|&s| train(mnist_config(name, &dir), s)).collect::<Vec<_>>();
    let partial = runs("mnist_partial_marglik.json");
    let baseline = runs("mnist_partial_baseline.json");
    let full = runs("mnist_full_marglik.json");

    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let acc_l = mean(&partial.iter().map(|r| r.test_accuracy).collect::<Vec<_>>());
    let acc_b = mean(&baseline.iter().map(|r| r.test_accuracy).collect::<Vec<_>>());
    let eta: Vec<f64> = (0..6).map(|i| mean(&full.iter().map(|r| r.eta_abs[i]).collect::<Vec<_>>())).collect();
    let rotation_wins = (0..6).filter(|&i| i != 2).all(|i| eta[2] > eta[i]);
    let slowest = partial.iter().chain(&baseline).chain(&full).map(|r| r.wallclock_seconds).fold(0.0, f64::max);
    let ok = verdict(
        "6",
        acc_l - acc_b >= 0.02 && rotation_wins && slowest <= 45.0 * 60.0,
        &format!(
            "partially rotated: learned {:.2}% vs baseline {:.2}% (gap >= 2 points); fully rotated mean |eta| = [{}] (|eta_3| largest); slowest run {:.0} s (<= 2700 s)",
            100.0 * acc_l,
            100.0 * acc_b,
            eta.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(", "),
            slowest
        ),
    );
    assert!(ok);
}
