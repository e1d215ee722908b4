//! Curvature of the augmented model: the dense generalised Gauss-Newton
//! matrix and its Kronecker-factored approximation, together with their
//! derivatives with respect to the augmentation parameters.
//!
//! All states hold plain sums over data, so shard states merge by addition.
//! The `1/N` of the Kronecker product is applied when factors are used.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::batch::{augment_batch, chunk_ranges, group_mean, with_constant_column, AugSpec, AugmentedBatch};
use crate::error::{Error, Result};
use crate::likelihood::{lambda_sqrt_from_probs, lambda_tangent_from_probs, softmax_into};
use crate::linalg::{gemm, mean_rows, sym_eigh, Mat, SymEig};
use crate::model::{BatchTrace, MlpModel};

/// Largest parameter count for which a dense GGN is formed.
pub const MAX_DENSE_PARAMS: usize = 20_000;

/// Data per work item of a sharded pass.
pub const CHUNK: usize = 64;

/// Where the sample average enters the likelihood.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    /// Invariant model: the likelihood sees the averaged logits `f̂`.
    Logits,
    /// Classical augmentation: every augmented copy is a datum of weight `1/S`.
    Likelihood,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurvatureKind {
    Full,
    Kfac,
}

/// Labelled data addressed by index.
#[derive(Clone, Copy, Debug)]
pub struct DataRef<'a> {
    pub inputs: &'a Mat,
    pub labels: &'a [usize],
}

impl<'a> DataRef<'a> {
    pub fn new(inputs: &'a Mat, labels: &'a [usize]) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::Shape(format!("{} inputs but {} labels", inputs.rows(), labels.len())));
        }
        Ok(DataRef { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }
}

/// Sums of `ā āᵀ` and `ḡ Λ ḡᵀ` per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct KfacState {
    pub a: Vec<Mat>,
    pub g: Vec<Mat>,
    pub n_seen: usize,
    /// `Σ log p(y | f̂)` over the seen data.
    pub loglik: f64,
}

/// Derivatives of the Kronecker factor sums, indexed `[layer][component]`.
#[derive(Clone, Debug, PartialEq)]
pub struct KfacTangentState {
    pub da: Vec<Vec<Mat>>,
    pub dg: Vec<Vec<Mat>>,
    /// `∂/∂ηᵢ Σ log p(y | f̂)` over the seen data.
    pub dloglik: Vec<f64>,
    pub m_seen: usize,
}

/// Dense `Σ Ĵᵀ Λ Ĵ`.
#[derive(Clone, Debug, PartialEq)]
pub struct FullGgnState {
    pub h: Mat,
    pub n_seen: usize,
    pub loglik: f64,
}

/// Dense `∂Ĥ/∂ηᵢ`.
#[derive(Clone, Debug, PartialEq)]
pub struct FullGgnTangentState {
    pub dh: Vec<Mat>,
    pub dloglik: Vec<f64>,
    pub m_seen: usize,
}

/// Eigendecompositions of one layer's Kronecker factors.
#[derive(Clone, Debug)]
pub struct KfacLayer {
    pub a: SymEig,
    pub g: SymEig,
}

/// Finalised Kronecker factors; the layer curvature is `(1/N) Â ⊗ Ĝ`.
#[derive(Clone, Debug)]
pub struct KfacFactors {
    pub layers: Vec<KfacLayer>,
    pub n: usize,
    pub loglik: f64,
}

impl KfacFactors {
    /// `1/N`, with an empty dataset treated as `N = 1`.
    pub fn scale(&self) -> f64 {
        1.0 / self.n.max(1) as f64
    }
}

fn merge_mats(dst: &mut [Mat], src: &[Mat]) -> Result<()> {
    if dst.len() != src.len() {
        return Err(Error::Shape(format!("merging {} layers into {}", src.len(), dst.len())));
    }
    dst.iter_mut().zip(src).try_for_each(|(d, s)| d.add_assign(s))
}

fn add_vec(dst: &mut [f64], src: &[f64]) -> Result<()> {
    if dst.len() != src.len() {
        return Err(Error::Shape(format!("merging vectors of length {} and {}", src.len(), dst.len())));
    }
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
    Ok(())
}

impl KfacState {
    pub fn empty(model: &MlpModel) -> Self {
        KfacState {
            a: model.layers().iter().map(|d| Mat::zeros(d.in_dim() + 1, d.in_dim() + 1)).collect(),
            g: model.layers().iter().map(|d| Mat::zeros(d.out_dim(), d.out_dim())).collect(),
            n_seen: 0,
            loglik: 0.0,
        }
    }

    pub fn merge(&mut self, other: &KfacState) -> Result<()> {
        merge_mats(&mut self.a, &other.a)?;
        merge_mats(&mut self.g, &other.g)?;
        self.n_seen += other.n_seen;
        self.loglik += other.loglik;
        Ok(())
    }

    /// Symmetrises the factors and eigendecomposes them.
    pub fn finalize(&self) -> Result<KfacFactors> {
        let layers = self
            .a
            .iter()
            .zip(&self.g)
            .enumerate()
            .map(|(l, (a, g))| {
                if !a.is_finite() || !g.is_finite() {
                    return Err(Error::Divergence(format!("Kronecker factors of layer {l} are not finite")));
                }
                let (mut a, mut g) = (a.clone(), g.clone());
                a.symmetrize();
                g.symmetrize();
                Ok(KfacLayer { a: sym_eigh(&a)?, g: sym_eigh(&g)? })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(KfacFactors { layers, n: self.n_seen, loglik: self.loglik })
    }

    /// Dense `(1/N) Â_l ⊗ Ĝ_l`.
    pub fn dense_block(&self, layer: usize) -> Mat {
        self.a[layer].kron(&self.g[layer]).scaled(1.0 / self.n_seen.max(1) as f64)
    }
}

impl KfacTangentState {
    pub fn empty(model: &MlpModel, k: usize) -> Self {
        KfacTangentState {
            da: model.layers().iter().map(|d| vec![Mat::zeros(d.in_dim() + 1, d.in_dim() + 1); k]).collect(),
            dg: model.layers().iter().map(|d| vec![Mat::zeros(d.out_dim(), d.out_dim()); k]).collect(),
            dloglik: vec![0.0; k],
            m_seen: 0,
        }
    }

    pub fn k(&self) -> usize {
        self.dloglik.len()
    }

    pub fn merge(&mut self, other: &KfacTangentState) -> Result<()> {
        if self.da.len() != other.da.len() {
            return Err(Error::Shape("tangent states of different networks".into()));
        }
        for l in 0..self.da.len() {
            merge_mats(&mut self.da[l], &other.da[l])?;
            merge_mats(&mut self.dg[l], &other.dg[l])?;
        }
        add_vec(&mut self.dloglik, &other.dloglik)?;
        self.m_seen += other.m_seen;
        Ok(())
    }

    /// Factor that extrapolates the subsample sums to `n_total` data.
    pub fn extrapolation(&self, n_total: usize) -> f64 {
        if self.m_seen == 0 {
            0.0
        } else {
            n_total as f64 / self.m_seen as f64
        }
    }
}

impl FullGgnState {
    pub fn empty(model: &MlpModel) -> Result<Self> {
        let p = check_dense(model)?;
        Ok(FullGgnState { h: Mat::zeros(p, p), n_seen: 0, loglik: 0.0 })
    }

    pub fn merge(&mut self, other: &FullGgnState) -> Result<()> {
        self.h.add_assign(&other.h)?;
        self.n_seen += other.n_seen;
        self.loglik += other.loglik;
        Ok(())
    }
}

impl FullGgnTangentState {
    pub fn empty(model: &MlpModel, k: usize) -> Result<Self> {
        let p = check_dense(model)?;
        Ok(FullGgnTangentState { dh: vec![Mat::zeros(p, p); k], dloglik: vec![0.0; k], m_seen: 0 })
    }

    pub fn merge(&mut self, other: &FullGgnTangentState) -> Result<()> {
        merge_mats(&mut self.dh, &other.dh)?;
        add_vec(&mut self.dloglik, &other.dloglik)?;
        self.m_seen += other.m_seen;
        Ok(())
    }

    pub fn extrapolation(&self, n_total: usize) -> f64 {
        if self.m_seen == 0 {
            0.0
        } else {
            n_total as f64 / self.m_seen as f64
        }
    }
}

fn check_dense(model: &MlpModel) -> Result<usize> {
    let p = model.num_params();
    if p > MAX_DENSE_PARAMS {
        return Err(Error::Capacity(format!(
            "a dense GGN with {p} parameters exceeds the limit of {MAX_DENSE_PARAMS}; use the Kronecker-factored curvature"
        )));
    }
    Ok(p)
}

/// Forward quantities of one chunk, reduced to "effective data": one row per
/// datum when averaging logits, one row per augmented copy otherwise.
struct ChunkEval {
    batch: AugmentedBatch,
    trace: BatchTrace,
    /// Per-row `g_l`.
    g: Vec<Mat>,
    /// Effective logits.
    f: Mat,
    /// Softmax of the effective logits.
    p: Mat,
    labels: Vec<usize>,
    weight: f64,
    averaging: Averaging,
}

impl ChunkEval {
    fn new(
        model: &MlpModel,
        data: DataRef,
        indices: &[usize],
        aug: Option<&AugSpec>,
        averaging: Averaging,
        tangents: bool,
    ) -> Result<Self> {
        let batch = augment_batch(data.inputs, indices, aug, tangents)?;
        let trace = model.forward_batch(batch.x.clone())?;
        let g = model.back_grads_batch(&trace);
        let s = batch.samples;
        let (f, labels, weight) = match averaging {
            Averaging::Logits => (
                group_mean(trace.logits(), s, batch.paired),
                indices.iter().map(|&n| data.labels[n]).collect::<Vec<_>>(),
                1.0,
            ),
            Averaging::Likelihood => (
                trace.logits().clone(),
                indices.iter().flat_map(|&n| std::iter::repeat_n(data.labels[n], s)).collect(),
                1.0 / s as f64,
            ),
        };
        let c = model.output_dim();
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::Domain(format!("label {bad} out of range for {c} classes")));
        }
        let mut p = Mat::zeros(f.rows(), c);
        for r in 0..f.rows() {
            softmax_into(f.row(r), p.row_mut(r));
        }
        Ok(ChunkEval { batch, trace, g, f, p, labels, weight, averaging })
    }

    fn rows(&self) -> usize {
        self.f.rows()
    }

    fn loglik(&self) -> f64 {
        let mut total = 0.0;
        for r in 0..self.rows() {
            let f = self.f.row(r);
            let m = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + f.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += f[self.labels[r]] - lse;
        }
        total * self.weight
    }

    /// Reduces per-row values to effective rows.
    fn reduce(&self, m: &Mat) -> Mat {
        match self.averaging {
            Averaging::Logits => group_mean(m, self.batch.samples, self.batch.paired),
            Averaging::Likelihood => m.clone(),
        }
    }

    fn lambda_sqrt(&self, r: usize) -> Mat {
        lambda_sqrt_from_probs(self.p.row(r))
    }
}

/// `Q[o, e·C + c] = Σ_k gbar[e, o·C + k] · M_e[k, c]` for per-row matrices `M_e`.
fn stack_right(gbar: &Mat, mats: &[Mat], out_dim: usize, c: usize) -> Mat {
    let e = gbar.rows();
    let mut q = Mat::zeros(out_dim, e * c);
    for (r, m) in mats.iter().enumerate() {
        let g = gbar.row(r);
        for o in 0..out_dim {
            let grow = &g[o * c..(o + 1) * c];
            let dst = &mut q.row_mut(o)[r * c..(r + 1) * c];
            for (k, gv) in grow.iter().enumerate() {
                if *gv == 0.0 {
                    continue;
                }
                for (d, mv) in dst.iter_mut().zip(m.row(k)) {
                    *d += gv * mv;
                }
            }
        }
    }
    q
}

/// `gbar` rearranged to `out × (E·C)`.
fn stack_plain(gbar: &Mat, out_dim: usize, c: usize) -> Mat {
    let e = gbar.rows();
    Mat::from_fn(out_dim, e * c, |o, col| gbar[(col / c, o * c + col % c)])
}

/// `X + Xᵀ` added into `dst`.
fn add_sym(dst: &mut Mat, x: &Mat) {
    let n = x.rows();
    for i in 0..n {
        for j in 0..n {
            dst[(i, j)] += x[(i, j)] + x[(j, i)];
        }
    }
}

/// Accumulates Kronecker factors of data `indices` into `state`.
pub fn accumulate_kfac(
    state: &mut KfacState,
    model: &MlpModel,
    data: DataRef,
    indices: &[usize],
    aug: Option<&AugSpec>,
    averaging: Averaging,
) -> Result<()> {
    if indices.is_empty() {
        return Ok(());
    }
    let ev = ChunkEval::new(model, data, indices, aug, averaging, false)?;
    let c = model.output_dim();
    let roots: Vec<Mat> = (0..ev.rows()).map(|r| ev.lambda_sqrt(r)).collect();
    for (l, d) in model.layers().iter().enumerate() {
        let abar = ev.reduce(&with_constant_column(&ev.trace.acts[l], 1.0));
        gemm(ev.weight, &abar, true, &abar, false, 1.0, &mut state.a[l]);
        let gbar = ev.reduce(&ev.g[l]);
        let q = stack_right(&gbar, &roots, d.out_dim(), c);
        gemm(ev.weight, &q, false, &q, true, 1.0, &mut state.g[l]);
    }
    state.n_seen += indices.len();
    state.loglik += ev.loglik();
    Ok(())
}

/// Accumulates `∂Â/∂ηᵢ`, `∂Ĝ/∂ηᵢ` and `∂ log p/∂ηᵢ` of data `indices`.
///
/// With `include_dlambda = false` the dependence of `Λ(f̂)` on `η` is
/// ignored.
pub fn accumulate_kfac_tangents(
    state: &mut KfacTangentState,
    model: &MlpModel,
    data: DataRef,
    indices: &[usize],
    aug: &AugSpec,
    include_dlambda: bool,
) -> Result<()> {
    if indices.is_empty() {
        return Ok(());
    }
    let k = aug.params.k();
    if state.k() != k {
        return Err(Error::Shape(format!("tangent state has {} components, augmentation {k}", state.k())));
    }
    let ev = ChunkEval::new(model, data, indices, Some(aug), Averaging::Logits, true)?;
    let c = model.output_dim();
    let e = ev.rows();
    let roots: Vec<Mat> = (0..e).map(|r| ev.lambda_sqrt(r)).collect();
    let abars: Vec<Mat> = (0..model.num_layers())
        .map(|l| ev.reduce(&with_constant_column(&ev.trace.acts[l], 1.0)))
        .collect();
    let gbars: Vec<Mat> = ev.g.iter().map(|g| ev.reduce(g)).collect();
    let qs: Vec<Mat> = model
        .layers()
        .iter()
        .enumerate()
        .map(|(l, d)| stack_right(&gbars[l], &roots, d.out_dim(), c))
        .collect();
    for i in 0..k {
        let tangent = model.tangent_batch(&ev.trace, ev.batch.dx[i].clone());
        let dg = model.back_grads_tangent_batch(&ev.trace, &ev.g, &tangent);
        let dfbar = ev.reduce(tangent.logits());
        for r in 0..e {
            let y = ev.labels[r];
            let pr = ev.p.row(r);
            let df = dfbar.row(r);
            let grad: f64 = (0..c).map(|j| (if j == y { 1.0 } else { 0.0 } - pr[j]) * df[j]).sum();
            state.dloglik[i] += grad;
        }
        let dlambdas: Option<Vec<Mat>> =
            include_dlambda.then(|| (0..e).map(|r| lambda_tangent_from_probs(ev.p.row(r), dfbar.row(r))).collect());
        for (l, d) in model.layers().iter().enumerate() {
            let dabar = ev.reduce(&with_constant_column(&tangent.acts[l], 0.0));
            let mut x = Mat::zeros(d.in_dim() + 1, d.in_dim() + 1);
            gemm(1.0, &dabar, true, &abars[l], false, 0.0, &mut x);
            add_sym(&mut state.da[l][i], &x);

            let dgbar = ev.reduce(&dg[l]);
            let dq = stack_right(&dgbar, &roots, d.out_dim(), c);
            let mut x = Mat::zeros(d.out_dim(), d.out_dim());
            gemm(1.0, &dq, false, &qs[l], true, 0.0, &mut x);
            add_sym(&mut state.dg[l][i], &x);
            if let Some(dl) = &dlambdas {
                let ed = stack_right(&gbars[l], dl, d.out_dim(), c);
                let gs = stack_plain(&gbars[l], d.out_dim(), c);
                gemm(1.0, &ed, false, &gs, true, 1.0, &mut state.dg[l][i]);
            }
        }
    }
    state.m_seen += indices.len();
    Ok(())
}

/// Writes the per-row Jacobians (`C × P` each) of rows `rows` into
/// consecutive rows of `out`, flattened.
fn jacobian_rows(model: &MlpModel, trace: &BatchTrace, g: &[Mat], rows: std::ops::Range<usize>, out: &mut Mat) {
    let c = model.output_dim();
    let p = model.num_params();
    let offsets = model.layer_offsets();
    for (t, r) in rows.enumerate() {
        let dst = out.row_mut(t);
        dst.iter_mut().for_each(|v| *v = 0.0);
        for (l, d) in model.layers().iter().enumerate() {
            let a = trace.acts[l].row(r);
            let gl = g[l].row(r);
            let (din, dout) = (d.in_dim(), d.out_dim());
            for ci in 0..c {
                let row = &mut dst[ci * p..(ci + 1) * p];
                for i in 0..=din {
                    let ai = if i < din { a[i] } else { 1.0 };
                    let base = offsets[l] + i * dout;
                    for o in 0..dout {
                        row[base + o] = ai * gl[o * c + ci];
                    }
                }
            }
        }
    }
}

/// Tangents of [`jacobian_rows`]: `dã ⊗ g + ã ⊗ dg`.
fn jacobian_tangent_rows(
    model: &MlpModel,
    trace: &BatchTrace,
    g: &[Mat],
    da: &[Mat],
    dg: &[Mat],
    rows: std::ops::Range<usize>,
    out: &mut Mat,
) {
    let c = model.output_dim();
    let p = model.num_params();
    let offsets = model.layer_offsets();
    for (t, r) in rows.enumerate() {
        let dst = out.row_mut(t);
        for (l, d) in model.layers().iter().enumerate() {
            let a = trace.acts[l].row(r);
            let dav = da[l].row(r);
            let gl = g[l].row(r);
            let dgl = dg[l].row(r);
            let (din, dout) = (d.in_dim(), d.out_dim());
            for ci in 0..c {
                let row = &mut dst[ci * p..(ci + 1) * p];
                for i in 0..=din {
                    let (ai, dai) = if i < din { (a[i], dav[i]) } else { (1.0, 0.0) };
                    let base = offsets[l] + i * dout;
                    for o in 0..dout {
                        row[base + o] = dai * gl[o * c + ci] + ai * dgl[o * c + ci];
                    }
                }
            }
        }
    }
}

/// Effective Jacobians `Ĵ_e`, stacked as `(E·C) × P`.
fn effective_jacobians(model: &MlpModel, ev: &ChunkEval) -> Mat {
    let (c, p) = (model.output_dim(), model.num_params());
    let s = ev.batch.samples;
    let e = ev.rows();
    let mut out = Mat::zeros(e * c, p);
    match ev.averaging {
        Averaging::Logits => {
            let mut buf = Mat::zeros(s, c * p);
            let mut mean = vec![0.0; c * p];
            for j in 0..e {
                jacobian_rows(model, &ev.trace, &ev.g, j * s..(j + 1) * s, &mut buf);
                mean_rows(&buf, 0, s, ev.batch.paired, &mut mean);
                out.data_mut()[j * c * p..(j + 1) * c * p].copy_from_slice(&mean);
            }
        }
        Averaging::Likelihood => {
            let mut buf = Mat::zeros(1, c * p);
            for r in 0..e {
                jacobian_rows(model, &ev.trace, &ev.g, r..r + 1, &mut buf);
                out.data_mut()[r * c * p..(r + 1) * c * p].copy_from_slice(buf.data());
            }
        }
    }
    out
}

/// `M_e · J_e` for each effective row, with `M_e` given per row (`C × C`).
fn left_multiply(j: &Mat, mats: &[Mat], c: usize) -> Mat {
    let p = j.cols();
    let mut out = Mat::zeros(j.rows(), p);
    for (e, m) in mats.iter().enumerate() {
        for ci in 0..c {
            let dst_start = (e * c + ci) * p;
            for k in 0..c {
                let w = m[(ci, k)];
                if w == 0.0 {
                    continue;
                }
                let src_start = (e * c + k) * p;
                for q in 0..p {
                    let v = j.data()[src_start + q];
                    out.data_mut()[dst_start + q] += w * v;
                }
            }
        }
    }
    out
}

/// Accumulates the dense augmented GGN of data `indices`.
pub fn accumulate_full_ggn(
    state: &mut FullGgnState,
    model: &MlpModel,
    data: DataRef,
    indices: &[usize],
    aug: Option<&AugSpec>,
    averaging: Averaging,
) -> Result<()> {
    check_dense(model)?;
    if indices.is_empty() {
        return Ok(());
    }
    let ev = ChunkEval::new(model, data, indices, aug, averaging, false)?;
    let c = model.output_dim();
    let j = effective_jacobians(model, &ev);
    let roots_t: Vec<Mat> = (0..ev.rows()).map(|r| ev.lambda_sqrt(r).transpose()).collect();
    let k = left_multiply(&j, &roots_t, c);
    gemm(ev.weight, &k, true, &k, false, 1.0, &mut state.h);
    state.n_seen += indices.len();
    state.loglik += ev.loglik();
    Ok(())
}

/// Accumulates `∂Ĥ/∂ηᵢ` and `∂ log p/∂ηᵢ` of data `indices`.
pub fn accumulate_full_ggn_tangents(
    state: &mut FullGgnTangentState,
    model: &MlpModel,
    data: DataRef,
    indices: &[usize],
    aug: &AugSpec,
    include_dlambda: bool,
) -> Result<()> {
    check_dense(model)?;
    if indices.is_empty() {
        return Ok(());
    }
    let k = aug.params.k();
    if state.dloglik.len() != k {
        return Err(Error::Shape(format!("tangent state has {} components, augmentation {k}", state.dloglik.len())));
    }
    let ev = ChunkEval::new(model, data, indices, Some(aug), Averaging::Logits, true)?;
    let (c, p) = (model.output_dim(), model.num_params());
    let s = ev.batch.samples;
    let e = ev.rows();
    let j = effective_jacobians(model, &ev);
    let lambdas: Vec<Mat> = (0..e).map(|r| crate::likelihood::lambda_from_probs(ev.p.row(r))).collect();
    let lj = left_multiply(&j, &lambdas, c);
    let mut buf = Mat::zeros(s, c * p);
    let mut mean = vec![0.0; c * p];
    for i in 0..k {
        let tangent = model.tangent_batch(&ev.trace, ev.batch.dx[i].clone());
        let dg = model.back_grads_tangent_batch(&ev.trace, &ev.g, &tangent);
        let dfbar = ev.reduce(tangent.logits());
        for r in 0..e {
            let y = ev.labels[r];
            let pr = ev.p.row(r);
            let df = dfbar.row(r);
            state.dloglik[i] += (0..c).map(|q| (if q == y { 1.0 } else { 0.0 } - pr[q]) * df[q]).sum::<f64>();
        }
        let mut dj = Mat::zeros(e * c, p);
        for jn in 0..e {
            jacobian_tangent_rows(model, &ev.trace, &ev.g, &tangent.acts, &dg, jn * s..(jn + 1) * s, &mut buf);
            mean_rows(&buf, 0, s, ev.batch.paired, &mut mean);
            dj.data_mut()[jn * c * p..(jn + 1) * c * p].copy_from_slice(&mean);
        }
        let mut x = Mat::zeros(p, p);
        gemm(1.0, &dj, true, &lj, false, 0.0, &mut x);
        add_sym(&mut state.dh[i], &x);
        if include_dlambda {
            let dl: Vec<Mat> = (0..e).map(|r| lambda_tangent_from_probs(ev.p.row(r), dfbar.row(r))).collect();
            let dlj = left_multiply(&j, &dl, c);
            gemm(1.0, &j, true, &dlj, false, 1.0, &mut state.dh[i]);
        }
    }
    state.m_seen += indices.len();
    Ok(())
}

/// Accumulates `Σ log p(y | f̂)` and its `η`-gradient over data `indices`.
pub fn accumulate_loglik_tangents(
    model: &MlpModel,
    data: DataRef,
    indices: &[usize],
    aug: &AugSpec,
    dloglik: &mut [f64],
) -> Result<f64> {
    if indices.is_empty() {
        return Ok(0.0);
    }
    let ev = ChunkEval::new(model, data, indices, Some(aug), Averaging::Logits, true)?;
    for (i, dst) in dloglik.iter_mut().enumerate() {
        let tangent = model.tangent_batch(&ev.trace, ev.batch.dx[i].clone());
        let dfbar = ev.reduce(tangent.logits());
        for r in 0..ev.rows() {
            let y = ev.labels[r];
            let pr = ev.p.row(r);
            *dst += dfbar.row(r).iter().enumerate().map(|(q, d)| (if q == y { 1.0 } else { 0.0 } - pr[q]) * d).sum::<f64>();
        }
    }
    Ok(ev.loglik())
}

/// `(Σ log p, ∂/∂η Σ log p)` over `indices`, sharded.
pub fn loglik_tangent_pass(model: &MlpModel, data: DataRef, indices: &[usize], aug: &AugSpec) -> Result<(f64, Vec<f64>)> {
    let k = aug.params.k();
    sharded(
        indices,
        || Ok((0.0, vec![0.0; k])),
        |st: &mut (f64, Vec<f64>), idx| {
            st.0 += accumulate_loglik_tangents(model, data, idx, aug, &mut st.1)?;
            Ok(())
        },
        |a, b| {
            a.0 += b.0;
            add_vec(&mut a.1, &b.1)
        },
    )
}

/// Runs `work` over chunks of `indices` in parallel and merges the partial
/// states in chunk order, so the result is independent of the thread count.
pub(crate) fn sharded<S: Send>(
    indices: &[usize],
    empty: impl Fn() -> Result<S> + Sync,
    work: impl Fn(&mut S, &[usize]) -> Result<()> + Sync,
    merge: impl Fn(&mut S, &S) -> Result<()>,
) -> Result<S> {
    let mut total = empty()?;
    let ranges = chunk_ranges(indices.len(), CHUNK);
    let wave = rayon::current_num_threads().max(1);
    for group in ranges.chunks(wave) {
        let parts: Vec<Result<S>> = group
            .par_iter()
            .map(|r| {
                let mut st = empty()?;
                work(&mut st, &indices[r.clone()])?;
                Ok(st)
            })
            .collect();
        for part in parts {
            merge(&mut total, &part?)?;
        }
    }
    Ok(total)
}

/// Kronecker factors over `indices`, sharded.
pub fn kfac_pass(
    model: &MlpModel,
    data: DataRef,
    indices: &[usize],
    aug: Option<&AugSpec>,
    averaging: Averaging,
) -> Result<KfacState> {
    sharded(
        indices,
        || Ok(KfacState::empty(model)),
        |st, idx| accumulate_kfac(st, model, data, idx, aug, averaging),
        |a, b| a.merge(b),
    )
}

pub fn kfac_tangent_pass(
    model: &MlpModel,
    data: DataRef,
    indices: &[usize],
    aug: &AugSpec,
    include_dlambda: bool,
) -> Result<KfacTangentState> {
    let k = aug.params.k();
    sharded(
        indices,
        || Ok(KfacTangentState::empty(model, k)),
        |st, idx| accumulate_kfac_tangents(st, model, data, idx, aug, include_dlambda),
        |a, b| a.merge(b),
    )
}

pub fn full_ggn_pass(
    model: &MlpModel,
    data: DataRef,
    indices: &[usize],
    aug: Option<&AugSpec>,
    averaging: Averaging,
) -> Result<FullGgnState> {
    sharded(
        indices,
        || FullGgnState::empty(model),
        |st, idx| accumulate_full_ggn(st, model, data, idx, aug, averaging),
        |a, b| a.merge(b),
    )
}

pub fn full_ggn_tangent_pass(
    model: &MlpModel,
    data: DataRef,
    indices: &[usize],
    aug: &AugSpec,
    include_dlambda: bool,
) -> Result<FullGgnTangentState> {
    let k = aug.params.k();
    sharded(
        indices,
        || FullGgnTangentState::empty(model, k),
        |st, idx| accumulate_full_ggn_tangents(st, model, data, idx, aug, include_dlambda),
        |a, b| a.merge(b),
    )
}
