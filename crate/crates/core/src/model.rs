//! Fully connected networks with the derivative machinery needed for
//! Laplace curvature: forward traces, per-layer output Jacobians `g_l`,
//! per-sample parameter Jacobians, forward-mode input tangents and the
//! augmentation-averaged predictor.
//!
//! Parameters of layer `l` are the bias-augmented weight matrix `W̃ = [W | b]`
//! vectorised column by column: entry `(o, i)` sits at `offset + i·out + o`,
//! with `i = in` addressing the bias. Under this ordering the per-sample
//! Jacobian block of layer `l` is `ã ⊗ g_l` with `ã = [a; 1]`.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{draw_eps, AugmentationParams};
use crate::error::{Error, Result};
use crate::linalg::{gemm, mean_rows, Mat};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, s: f64) -> f64 {
        match self {
            Activation::Tanh => s.tanh(),
            Activation::Relu => s.max(0.0),
            Activation::Identity => s,
        }
    }

    /// `φ'(s)`, given `s` and `a = φ(s)`. ReLU uses 0 at the kink.
    #[inline]
    pub fn deriv(self, s: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if s > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }

    /// `φ''(s)`, given `s` and `a = φ(s)`.
    #[inline]
    pub fn second_deriv(self, _s: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => -2.0 * a * (1.0 - a * a),
            Activation::Relu | Activation::Identity => 0.0,
        }
    }
}

/// One affine layer followed by an elementwise activation.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    /// `out × in`.
    pub w: Mat,
    pub b: Vec<f64>,
    pub activation: Activation,
}

impl Dense {
    pub fn in_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.w.rows()
    }

    /// `(in + 1) · out`.
    pub fn num_params(&self) -> usize {
        (self.in_dim() + 1) * self.out_dim()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpModel {
    layers: Vec<Dense>,
    seed: Option<u64>,
}

/// Intermediate values of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    /// Layer inputs `a₀ … a_{L−1}`, with `a₀ = x`.
    pub inputs: Vec<Vec<f64>>,
    /// Pre-activations `s₁ … s_L`.
    pub pre: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

/// Per-layer `g_l = ∂f/∂s_l` transposed, each `out_l × C`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerBackGrads {
    pub g: Vec<Mat>,
}

/// Forward pass over a batch of rows.
#[derive(Clone, Debug)]
pub struct BatchTrace {
    /// Layer inputs, `R × in_l`; `acts[0]` is the batch itself.
    pub acts: Vec<Mat>,
    /// Pre-activations, `R × out_l`; the last one holds the logits.
    pub pre: Vec<Mat>,
}

impl BatchTrace {
    pub fn rows(&self) -> usize {
        self.acts[0].rows()
    }

    pub fn logits(&self) -> &Mat {
        self.pre.last().expect("at least one layer")
    }
}

/// Forward-mode tangents of a batch pass along one input direction.
#[derive(Clone, Debug)]
pub struct BatchTangent {
    /// Input tangents `da₀ … da_{L−1}`, matching `BatchTrace::acts`.
    pub acts: Vec<Mat>,
    /// Pre-activation tangents `ds₁ … ds_L`; the last one is `dlogits`.
    pub pre: Vec<Mat>,
}

impl BatchTangent {
    pub fn logits(&self) -> &Mat {
        self.pre.last().expect("at least one layer")
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    layer_sizes: Vec<usize>,
    activations: Vec<Activation>,
    seed: Option<u64>,
    num_params: usize,
    params_file: String,
}

impl MlpModel {
    /// Builds a network with layer widths `sizes = [input, hidden…, classes]`,
    /// `hidden` activations on every layer but the last, and uniform
    /// `U(−1/√in, 1/√in)` initialisation of weights and biases.
    pub fn new(sizes: &[usize], hidden: Activation, seed: u64) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Config(format!("invalid layer sizes {sizes:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|l| {
                let (din, dout) = (sizes[l], sizes[l + 1]);
                let bound = 1.0 / (din as f64).sqrt();
                let w = Mat::from_fn(dout, din, |_, _| rng.random_range(-bound..bound));
                let b = (0..dout).map(|_| rng.random_range(-bound..bound)).collect();
                let activation = if l + 1 == n { Activation::Identity } else { hidden };
                Dense { w, b, activation }
            })
            .collect();
        Ok(MlpModel { layers, seed: Some(seed) })
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("a network needs at least one layer".into()));
        }
        for (l, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::Shape(format!(
                    "layer {l} outputs {} values but layer {} expects {}",
                    pair[0].out_dim(),
                    l + 1,
                    pair[1].in_dim()
                )));
            }
        }
        for (l, d) in layers.iter().enumerate() {
            if d.b.len() != d.out_dim() {
                return Err(Error::Shape(format!("layer {l} bias has length {} for {} outputs", d.b.len(), d.out_dim())));
            }
        }
        if layers.last().map(|d| d.activation) != Some(Activation::Identity) {
            return Err(Error::Config("the output layer must use the identity activation".into()));
        }
        Ok(MlpModel { layers, seed: None })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    /// `[input, hidden…, classes]`.
    pub fn layer_sizes(&self) -> Vec<usize> {
        std::iter::once(self.input_dim()).chain(self.layers.iter().map(|d| d.out_dim())).collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|d| d.num_params()).sum()
    }

    pub fn layer_param_counts(&self) -> Vec<usize> {
        self.layers.iter().map(|d| d.num_params()).collect()
    }

    /// Start of each layer's block in the flat parameter vector.
    pub fn layer_offsets(&self) -> Vec<usize> {
        self.layers
            .iter()
            .scan(0, |off, d| {
                let start = *off;
                *off += d.num_params();
                Some(start)
            })
            .collect()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for d in &self.layers {
            let (din, dout) = (d.in_dim(), d.out_dim());
            for i in 0..=din {
                for o in 0..dout {
                    out.push(if i < din { d.w[(o, i)] } else { d.b[o] });
                }
            }
        }
        out
    }

    pub fn set_flat(&mut self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "parameter vector of length {} for a model with {}",
                theta.len(),
                self.num_params()
            )));
        }
        let mut k = 0;
        for d in &mut self.layers {
            let (din, dout) = (d.in_dim(), d.out_dim());
            for i in 0..=din {
                for o in 0..dout {
                    if i < din {
                        d.w[(o, i)] = theta[k];
                    } else {
                        d.b[o] = theta[k];
                    }
                    k += 1;
                }
            }
        }
        Ok(())
    }

    /// Squared norm of each layer's parameters.
    pub fn layer_sq_norms(&self) -> Vec<f64> {
        self.layers
            .iter()
            .map(|d| d.w.data().iter().chain(&d.b).map(|v| v * v).sum())
            .collect()
    }

    fn check_input(&self, len: usize) -> Result<()> {
        if len != self.input_dim() {
            return Err(Error::Shape(format!("input of dimension {len} for a network expecting {}", self.input_dim())));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, ForwardTrace)> {
        self.check_input(x.len())?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut a = x.to_vec();
        for d in &self.layers {
            let mut s = d.w.matvec(&a);
            s.iter_mut().zip(&d.b).for_each(|(v, b)| *v += b);
            let next: Vec<f64> = s.iter().map(|v| d.activation.apply(*v)).collect();
            inputs.push(std::mem::replace(&mut a, next));
            pre.push(s);
        }
        let trace = ForwardTrace { inputs, pre, output: a.clone() };
        Ok((a, trace))
    }

    /// `g_l` for every layer, by one matrix-valued reverse sweep.
    pub fn back_grads(&self, trace: &ForwardTrace) -> LayerBackGrads {
        let n = self.layers.len();
        let c = self.output_dim();
        let mut g = vec![Mat::zeros(0, 0); n];
        g[n - 1] = Mat::identity(c);
        for l in (0..n - 1).rev() {
            let next = &self.layers[l + 1];
            let d = &self.layers[l];
            let s = &trace.pre[l];
            let a = &trace.inputs[l + 1];
            let mut gl = next.w.matmul_tn(&g[l + 1]);
            for o in 0..gl.rows() {
                let phi = d.activation.deriv(s[o], a[o]);
                gl.row_mut(o).iter_mut().for_each(|v| *v *= phi);
            }
            g[l] = gl;
        }
        LayerBackGrads { g }
    }

    /// `C × P` Jacobian of the logits with respect to the flat parameters.
    pub fn jacobian_params(&self, x: &[f64]) -> Result<Mat> {
        let (_, trace) = self.forward(x)?;
        let grads = self.back_grads(&trace);
        let mut j = Mat::zeros(self.output_dim(), self.num_params());
        self.add_jacobian(&trace.inputs, &grads.g, 1.0, &mut j);
        Ok(j)
    }

    /// `J += scale · Σ_l (ã_l ⊗ g_l)ᵀ`, laid out as a `C × P` matrix.
    pub(crate) fn add_jacobian(&self, inputs: &[impl AsRef<[f64]>], g: &[Mat], scale: f64, j: &mut Mat) {
        let offsets = self.layer_offsets();
        for (l, d) in self.layers.iter().enumerate() {
            let a = inputs[l].as_ref();
            let (din, dout) = (d.in_dim(), d.out_dim());
            for c in 0..j.rows() {
                let row = j.row_mut(c);
                for i in 0..=din {
                    let ai = scale * if i < din { a[i] } else { 1.0 };
                    let base = offsets[l] + i * dout;
                    for o in 0..dout {
                        row[base + o] += ai * g[l][(o, c)];
                    }
                }
            }
        }
    }

    /// Directional derivative of the logits along the input direction `dx`.
    pub fn input_jvp(&self, trace: &ForwardTrace, dx: &[f64]) -> Result<Vec<f64>> {
        self.check_input(dx.len())?;
        let mut da = dx.to_vec();
        for (l, d) in self.layers.iter().enumerate() {
            let ds = d.w.matvec(&da);
            let s = &trace.pre[l];
            let a = trace.inputs.get(l + 1).unwrap_or(&trace.output);
            da = ds.iter().enumerate().map(|(o, v)| v * d.activation.deriv(s[o], a[o])).collect();
        }
        Ok(da)
    }

    /// Batched forward pass; `x` holds one input per row.
    pub fn forward_batch(&self, x: Mat) -> Result<BatchTrace> {
        self.check_input(x.cols())?;
        let r = x.rows();
        let mut acts = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut a = x;
        for d in &self.layers {
            let mut s = Mat::from_fn(r, d.out_dim(), |_, o| d.b[o]);
            gemm(1.0, &a, false, &d.w, true, 1.0, &mut s);
            let mut next = s.clone();
            if d.activation != Activation::Identity {
                next.data_mut().iter_mut().for_each(|v| *v = d.activation.apply(*v));
            }
            acts.push(std::mem::replace(&mut a, next));
            pre.push(s);
        }
        Ok(BatchTrace { acts, pre })
    }

    /// Forward-mode tangents of a batch pass along input tangents `dx`.
    pub fn tangent_batch(&self, trace: &BatchTrace, dx: Mat) -> BatchTangent {
        let n = self.layers.len();
        let mut acts = Vec::with_capacity(n);
        let mut pre = Vec::with_capacity(n);
        let mut da = dx;
        for (l, d) in self.layers.iter().enumerate() {
            let mut ds = Mat::zeros(da.rows(), d.out_dim());
            gemm(1.0, &da, false, &d.w, true, 0.0, &mut ds);
            let next = if l + 1 < n {
                let s = &trace.pre[l];
                let a = &trace.acts[l + 1];
                let mut t = ds.clone();
                for ((v, sv), av) in t.data_mut().iter_mut().zip(s.data()).zip(a.data()) {
                    *v *= d.activation.deriv(*sv, *av);
                }
                t
            } else {
                Mat::zeros(0, 0)
            };
            acts.push(std::mem::replace(&mut da, next));
            pre.push(ds);
        }
        BatchTangent { acts, pre }
    }

    /// Accumulates `Σ_r δ_rᵀ ∂f_r/∂θ` into `grad`, where `delta` holds
    /// `∂loss/∂logits` per row.
    pub fn backward_batch(&self, trace: &BatchTrace, delta: &Mat, grad: &mut [f64]) {
        assert_eq!(grad.len(), self.num_params());
        let offsets = self.layer_offsets();
        let mut delta = delta.clone();
        for l in (0..self.layers.len()).rev() {
            let d = &self.layers[l];
            let (din, dout) = (d.in_dim(), d.out_dim());
            let mut gw = Mat::zeros(din, dout);
            gemm(1.0, &trace.acts[l], true, &delta, false, 0.0, &mut gw);
            let block = &mut grad[offsets[l]..offsets[l] + d.num_params()];
            for (dst, src) in block.iter_mut().zip(gw.data()) {
                *dst += src;
            }
            let bias = &mut block[din * dout..];
            for r in 0..delta.rows() {
                for (dst, src) in bias.iter_mut().zip(delta.row(r)) {
                    *dst += src;
                }
            }
            if l > 0 {
                let prev = &self.layers[l - 1];
                let mut next = Mat::zeros(delta.rows(), din);
                gemm(1.0, &delta, false, &d.w, false, 0.0, &mut next);
                let s = &trace.pre[l - 1];
                let a = &trace.acts[l];
                for ((v, sv), av) in next.data_mut().iter_mut().zip(s.data()).zip(a.data()) {
                    *v *= prev.activation.deriv(*sv, *av);
                }
                delta = next;
            }
        }
    }

    /// Per-row `g_l`, each stored as an `R × (out_l·C)` matrix with row-major
    /// `out_l × C` blocks.
    pub fn back_grads_batch(&self, trace: &BatchTrace) -> Vec<Mat> {
        let n = self.layers.len();
        let c = self.output_dim();
        let r = trace.rows();
        let mut g = vec![Mat::zeros(0, 0); n];
        g[n - 1] = Mat::from_fn(r, c * c, |_, k| if k / c == k % c { 1.0 } else { 0.0 });
        for l in (0..n - 1).rev() {
            let next = &self.layers[l + 1];
            let act = self.layers[l].activation;
            let (dl, dn) = (self.layers[l].out_dim(), next.out_dim());
            let mut gl = Mat::zeros(r, dl * c);
            for row in 0..r {
                let gn = g[l + 1].row(row);
                let s = trace.pre[l].row(row);
                let a = trace.acts[l + 1].row(row);
                let out = gl.row_mut(row);
                for o in 0..dl {
                    let phi = act.deriv(s[o], a[o]);
                    if phi == 0.0 {
                        continue;
                    }
                    let dst = &mut out[o * c..(o + 1) * c];
                    for p in 0..dn {
                        let w = next.w[(p, o)] * phi;
                        for (v, gv) in dst.iter_mut().zip(&gn[p * c..(p + 1) * c]) {
                            *v += w * gv;
                        }
                    }
                }
            }
            g[l] = gl;
        }
        g
    }

    /// Forward-mode tangents of [`back_grads_batch`](Self::back_grads_batch)
    /// along a batch tangent.
    pub fn back_grads_tangent_batch(&self, trace: &BatchTrace, g: &[Mat], tangent: &BatchTangent) -> Vec<Mat> {
        let n = self.layers.len();
        let c = self.output_dim();
        let r = trace.rows();
        let mut dg = vec![Mat::zeros(0, 0); n];
        dg[n - 1] = Mat::zeros(r, c * c);
        for l in (0..n - 1).rev() {
            let next = &self.layers[l + 1];
            let act = self.layers[l].activation;
            let (dl, dn) = (self.layers[l].out_dim(), next.out_dim());
            let mut out_m = Mat::zeros(r, dl * c);
            let mut wg = vec![0.0; c];
            let mut wdg = vec![0.0; c];
            for row in 0..r {
                let gn = g[l + 1].row(row);
                let dgn = dg[l + 1].row(row);
                let s = trace.pre[l].row(row);
                let a = trace.acts[l + 1].row(row);
                let ds = tangent.pre[l].row(row);
                let out = out_m.row_mut(row);
                for o in 0..dl {
                    let phi1 = act.deriv(s[o], a[o]);
                    let phi2 = act.second_deriv(s[o], a[o]) * ds[o];
                    if phi1 == 0.0 && phi2 == 0.0 {
                        continue;
                    }
                    wg.iter_mut().for_each(|v| *v = 0.0);
                    wdg.iter_mut().for_each(|v| *v = 0.0);
                    for p in 0..dn {
                        let w = next.w[(p, o)];
                        for k in 0..c {
                            wg[k] += w * gn[p * c + k];
                            wdg[k] += w * dgn[p * c + k];
                        }
                    }
                    for k in 0..c {
                        out[o * c + k] = phi2 * wg[k] + phi1 * wdg[k];
                    }
                }
            }
            dg[l] = out_m;
        }
        dg
    }

    /// `f̂(x) = (1/S) Σ_s f(g(x, ε_s; η))` with fresh noise from `rng`.
    pub fn averaged_forward<R: Rng + ?Sized>(
        &self,
        x: &[f64],
        aug: &AugmentationParams,
        s: usize,
        antithetic: bool,
        rng: &mut R,
    ) -> Result<(Vec<f64>, Vec<ForwardTrace>, Mat)> {
        self.check_input(x.len())?;
        let eps = draw_eps(rng, aug.k(), s, antithetic)?;
        let mut traces = Vec::with_capacity(s);
        let mut outputs = Mat::zeros(s, self.output_dim());
        let mut xa = vec![0.0; x.len()];
        for r in 0..s {
            aug.apply(x, eps.row(r), &mut xa)?;
            let (f, trace) = self.forward(&xa)?;
            outputs.row_mut(r).copy_from_slice(&f);
            traces.push(trace);
        }
        let mut fhat = vec![0.0; self.output_dim()];
        mean_rows(&outputs, 0, s, antithetic, &mut fhat);
        Ok((fhat, traces, eps))
    }

    /// `f̂(x)` together with `∂f̂/∂η` as a `C × k` matrix.
    pub fn averaged_forward_tangent<R: Rng + ?Sized>(
        &self,
        x: &[f64],
        aug: &AugmentationParams,
        s: usize,
        antithetic: bool,
        rng: &mut R,
    ) -> Result<(Vec<f64>, Mat)> {
        self.check_input(x.len())?;
        let eps = draw_eps(rng, aug.k(), s, antithetic)?;
        self.averaged_forward_tangent_with(x, aug, &eps, antithetic)
    }

    /// As [`averaged_forward_tangent`](Self::averaged_forward_tangent) with
    /// the noise supplied as an `S × k` matrix.
    pub fn averaged_forward_tangent_with(
        &self,
        x: &[f64],
        aug: &AugmentationParams,
        eps: &Mat,
        paired: bool,
    ) -> Result<(Vec<f64>, Mat)> {
        let (s, k, c) = (eps.rows(), aug.k(), self.output_dim());
        let mut outputs = Mat::zeros(s, c);
        let mut tangents = vec![Mat::zeros(s, c); k];
        let mut xa = vec![0.0; x.len()];
        let mut dx = vec![vec![0.0; x.len()]; k];
        for r in 0..s {
            {
                let mut views: Vec<&mut [f64]> = dx.iter_mut().map(|v| v.as_mut_slice()).collect();
                aug.apply_with_tangents(x, eps.row(r), &mut xa, &mut views)?;
            }
            let (f, trace) = self.forward(&xa)?;
            outputs.row_mut(r).copy_from_slice(&f);
            for i in 0..k {
                let df = self.input_jvp(&trace, &dx[i])?;
                tangents[i].row_mut(r).copy_from_slice(&df);
            }
        }
        let mut fhat = vec![0.0; c];
        mean_rows(&outputs, 0, s, paired, &mut fhat);
        let mut dfhat = Mat::zeros(c, k);
        let mut col = vec![0.0; c];
        for (i, t) in tangents.iter().enumerate() {
            mean_rows(t, 0, s, paired, &mut col);
            for (o, v) in col.iter().enumerate() {
                dfhat[(o, i)] = *v;
            }
        }
        Ok((fhat, dfhat))
    }

    /// Writes a JSON header at `path` and the parameters as little-endian
    /// `f64` values to the sibling `.bin` file.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let bin = path.with_extension("bin");
        let header = CheckpointHeader {
            layer_sizes: self.layer_sizes(),
            activations: self.layers.iter().map(|d| d.activation).collect(),
            seed: self.seed,
            num_params: self.num_params(),
            params_file: bin.file_name().and_then(|s| s.to_str()).unwrap_or_default().to_string(),
        };
        let bytes: Vec<u8> = self.flatten().iter().flat_map(|v| v.to_le_bytes()).collect();
        write_atomic(&bin, &bytes)?;
        write_atomic(path, serde_json::to_string_pretty(&header)?.as_bytes())?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let header: CheckpointHeader = serde_json::from_slice(&fs::read(path)?)?;
        let sizes = &header.layer_sizes;
        if sizes.len() != header.activations.len() + 1 {
            return Err(Error::Format { field: "activations", msg: "one activation per layer is required".into() });
        }
        let bin = path.parent().unwrap_or(Path::new(".")).join(&header.params_file);
        let bytes = fs::read(&bin)?;
        if bytes.len() % 8 != 0 {
            return Err(Error::Format { field: "params", msg: format!("{} bytes is not a whole number of f64", bytes.len()) });
        }
        let theta: Vec<f64> = bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        let layers = (0..header.activations.len())
            .map(|l| Dense {
                w: Mat::zeros(sizes[l + 1], sizes[l]),
                b: vec![0.0; sizes[l + 1]],
                activation: header.activations[l],
            })
            .collect();
        let mut model = MlpModel::from_layers(layers)?;
        if theta.len() != model.num_params() || header.num_params != theta.len() {
            return Err(Error::Format {
                field: "num_params",
                msg: format!("expected {} parameters, found {}", model.num_params(), theta.len()),
            });
        }
        model.set_flat(&theta)?;
        model.seed = header.seed;
        Ok(model)
    }
}

/// Writes `bytes` to a temporary sibling and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = PathBuf::from(path);
    let name = format!(".{}.tmp", path.file_name().and_then(|s| s.to_str()).unwrap_or("out"));
    tmp.set_file_name(name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::{rotate_point, Family};
    use crate::linalg::dot;

    fn random_model(sizes: &[usize], act: Activation, seed: u64) -> MlpModel {
        let mut m = MlpModel::new(sizes, act, seed).unwrap();
        // move away from the small-init regime so derivatives are not tiny
        let theta: Vec<f64> = m.flatten().iter().map(|v| v * 2.5).collect();
        m.set_flat(&theta).unwrap();
        m
    }

    fn naive_forward(m: &MlpModel, x: &[f64]) -> Vec<f64> {
        let mut a = x.to_vec();
        for d in m.layers() {
            let mut next = Vec::new();
            for o in 0..d.out_dim() {
                let mut s = d.b[o];
                for i in 0..d.in_dim() {
                    s += d.w[(o, i)] * a[i];
                }
                next.push(match d.activation {
                    Activation::Tanh => s.tanh(),
                    Activation::Relu => s.max(0.0),
                    Activation::Identity => s,
                });
            }
            a = next;
        }
        a
    }

    #[test]
    fn forward_trivial_cases() {
        let mut m = MlpModel::new(&[3, 4, 2], Activation::Tanh, 0).unwrap();
        m.set_flat(&vec![0.0; m.num_params()]).unwrap();
        assert_eq!(m.forward(&[1.0, -2.0, 3.0]).unwrap().0, vec![0.0, 0.0]);
        let lin = MlpModel::from_layers(vec![Dense { w: Mat::identity(3), b: vec![0.0; 3], activation: Activation::Identity }])
            .unwrap();
        assert_eq!(lin.forward(&[1.0, -2.0, 3.0]).unwrap().0, vec![1.0, -2.0, 3.0]);
        assert!(matches!(m.forward(&[1.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn forward_matches_naive_implementation() {
        let m = random_model(&[4, 7, 3], Activation::Tanh, 1);
        let x = [0.3, -0.7, 1.1, 0.05];
        let (f, trace) = m.forward(&x).unwrap();
        let g = naive_forward(&m, &x);
        assert!(f.iter().zip(&g).all(|(a, b)| (a - b).abs() < 1e-12));
        assert_eq!(trace.output, f);
        let batch = m.forward_batch(Mat::from_vec(1, 4, x.to_vec()).unwrap()).unwrap();
        assert!(batch.logits().row(0).iter().zip(&f).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn trace_recomputation_is_bit_identical() {
        let m = random_model(&[3, 5, 5, 2], Activation::Tanh, 8);
        let (_, trace) = m.forward(&[0.1, 0.2, 0.3]).unwrap();
        let (f2, _) = m.forward(&trace.inputs[0]).unwrap();
        assert_eq!(f2, trace.output);
    }

    #[test]
    fn flatten_roundtrip_and_layout() {
        let mut m = random_model(&[2, 3, 2], Activation::Relu, 2);
        let theta = m.flatten();
        assert_eq!(theta.len(), 3 * 3 + 4 * 2);
        assert_eq!(theta[1], m.layers()[0].w[(1, 0)]);
        assert_eq!(theta[3], m.layers()[0].w[(0, 1)]);
        assert_eq!(theta[6], m.layers()[0].b[0]);
        m.set_flat(&theta).unwrap();
        assert_eq!(m.flatten(), theta);
        assert!(m.set_flat(&theta[1..]).is_err());
    }

    #[test]
    fn back_grads_examples() {
        let m = random_model(&[3, 4, 2], Activation::Identity, 3);
        let (_, trace) = m.forward(&[0.4, 0.1, -0.3]).unwrap();
        let g = m.back_grads(&trace);
        assert_eq!(g.g[1], Mat::identity(2));
        assert_eq!(g.g[0], m.layers()[1].w.transpose());
    }

    #[test]
    fn back_grads_match_finite_differences() {
        let m = random_model(&[3, 5, 4, 2], Activation::Tanh, 4);
        let x = [0.4, -0.1, 0.8];
        let (_, trace) = m.forward(&x).unwrap();
        let g = m.back_grads(&trace);
        let h = 1e-6;
        for l in 0..m.num_layers() {
            for o in 0..m.layers()[l].out_dim() {
                let run = |delta: f64| {
                    let mut a = trace.pre[l].clone();
                    a[o] += delta;
                    let mut v: Vec<f64> = a.iter().map(|s| m.layers()[l].activation.apply(*s)).collect();
                    for d in &m.layers()[l + 1..] {
                        let mut s = d.w.matvec(&v);
                        s.iter_mut().zip(&d.b).for_each(|(x, b)| *x += b);
                        v = s.iter().map(|s| d.activation.apply(*s)).collect();
                    }
                    v
                };
                let (up, down) = (run(h), run(-h));
                for c in 0..2 {
                    let fd = (up[c] - down[c]) / (2.0 * h);
                    assert!((g.g[l][(o, c)] - fd).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn jacobian_examples() {
        let lin = MlpModel::from_layers(vec![Dense { w: Mat::zeros(2, 3), b: vec![0.0; 2], activation: Activation::Identity }])
            .unwrap();
        let x = [0.5, -1.0, 2.0];
        let j = lin.jacobian_params(&x).unwrap();
        for c in 0..2 {
            for i in 0..4 {
                let xi = if i < 3 { x[i] } else { 1.0 };
                for o in 0..2 {
                    assert_eq!(j[(c, i * 2 + o)], if o == c { xi } else { 0.0 });
                }
            }
        }
        let m = random_model(&[3, 4, 2], Activation::Tanh, 5);
        let mut z = m.clone();
        let mut theta = z.flatten();
        theta[12..16].iter_mut().for_each(|v| *v = 0.0);
        z.set_flat(&theta).unwrap();
        let j = z.jacobian_params(&[0.0; 3]).unwrap();
        for c in 0..2 {
            assert!(j.row(c)[..12].iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn jacobian_matches_perturbation() {
        let m = random_model(&[3, 6, 3], Activation::Tanh, 6);
        let x = [0.2, 0.9, -0.4];
        let j = m.jacobian_params(&x).unwrap();
        let theta = m.flatten();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let delta: Vec<f64> = (0..theta.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let h = 1e-6;
        let shifted = |s: f64| {
            let mut mm = m.clone();
            let t: Vec<f64> = theta.iter().zip(&delta).map(|(a, b)| a + s * b).collect();
            mm.set_flat(&t).unwrap();
            mm.forward(&x).unwrap().0
        };
        let (up, down) = (shifted(h), shifted(-h));
        for c in 0..3 {
            let fd = (up[c] - down[c]) / (2.0 * h);
            let an = dot(j.row(c), &delta);
            assert!((fd - an).abs() < 1e-6 * an.abs().max(1.0));
        }
    }

    #[test]
    fn jacobian_block_is_kronecker_of_a_and_g() {
        let m = random_model(&[3, 4, 4, 2], Activation::Tanh, 7);
        let x = [0.3, -0.5, 0.2];
        let (_, trace) = m.forward(&x).unwrap();
        let g = m.back_grads(&trace);
        let j = m.jacobian_params(&x).unwrap();
        let offsets = m.layer_offsets();
        for (l, d) in m.layers().iter().enumerate() {
            let mut a = trace.inputs[l].clone();
            a.push(1.0);
            for c in 0..2 {
                let col = Mat::from_vec(d.out_dim(), 1, (0..d.out_dim()).map(|o| g.g[l][(o, c)]).collect()).unwrap();
                let kron = Mat::from_vec(a.len(), 1, a.clone()).unwrap().kron(&col);
                for p in 0..d.num_params() {
                    assert!((j[(c, offsets[l] + p)] - kron.data()[p]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn input_jvp_examples() {
        let m = random_model(&[3, 5, 2], Activation::Tanh, 9);
        let (_, trace) = m.forward(&[0.1, 0.2, 0.3]).unwrap();
        assert_eq!(m.input_jvp(&trace, &[0.0; 3]).unwrap(), vec![0.0, 0.0]);
        let lin = random_model(&[3, 4, 2], Activation::Identity, 10);
        let (_, trace) = lin.forward(&[0.1, 0.2, 0.3]).unwrap();
        let dx = [1.0, -0.5, 0.25];
        let prod = lin.layers()[1].w.matmul(&lin.layers()[0].w);
        let expect = prod.matvec(&dx);
        let got = lin.input_jvp(&trace, &dx).unwrap();
        assert!(got.iter().zip(&expect).all(|(a, b)| (a - b).abs() < 1e-14));
    }

    #[test]
    fn input_jvp_matches_finite_difference() {
        let m = random_model(&[3, 6, 5, 2], Activation::Tanh, 11);
        let x = [0.1, -0.4, 0.6];
        let dx = [0.3, 0.8, -0.5];
        let (_, trace) = m.forward(&x).unwrap();
        let jvp = m.input_jvp(&trace, &dx).unwrap();
        let h = 1e-6;
        let at = |s: f64| {
            let xs: Vec<f64> = x.iter().zip(&dx).map(|(a, b)| a + s * b).collect();
            m.forward(&xs).unwrap().0
        };
        let (up, down) = (at(h), at(-h));
        for c in 0..2 {
            assert!((jvp[c] - (up[c] - down[c]) / (2.0 * h)).abs() < 1e-6);
        }
    }

    #[test]
    fn batch_paths_match_single_sample_paths() {
        let m = random_model(&[3, 6, 5, 4], Activation::Tanh, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Mat::from_fn(5, 3, |_, _| rng.random_range(-1.0..1.0));
        let dx = Mat::from_fn(5, 3, |_, _| rng.random_range(-1.0..1.0));
        let trace = m.forward_batch(x.clone()).unwrap();
        let tangent = m.tangent_batch(&trace, dx.clone());
        let g = m.back_grads_batch(&trace);
        let dg = m.back_grads_tangent_batch(&trace, &g, &tangent);
        let h = 1e-6;
        for r in 0..5 {
            let (f, single) = m.forward(x.row(r)).unwrap();
            assert!(trace.logits().row(r).iter().zip(&f).all(|(a, b)| (a - b).abs() < 1e-12));
            let jvp = m.input_jvp(&single, dx.row(r)).unwrap();
            assert!(tangent.logits().row(r).iter().zip(&jvp).all(|(a, b)| (a - b).abs() < 1e-12));
            let gs = m.back_grads(&single);
            for l in 0..m.num_layers() {
                assert!(g[l].row(r).iter().zip(gs.g[l].data()).all(|(a, b)| (a - b).abs() < 1e-12));
            }
            // dg against finite differences of g along dx
            let shifted = |s: f64| {
                let xs: Vec<f64> = x.row(r).iter().zip(dx.row(r)).map(|(a, b)| a + s * b).collect();
                let (_, t) = m.forward(&xs).unwrap();
                m.back_grads(&t)
            };
            let (up, down) = (shifted(h), shifted(-h));
            for l in 0..m.num_layers() {
                for k in 0..up.g[l].data().len() {
                    let fd = (up.g[l].data()[k] - down.g[l].data()[k]) / (2.0 * h);
                    assert!((dg[l].row(r)[k] - fd).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn backward_batch_matches_jacobian() {
        let m = random_model(&[3, 6, 3], Activation::Tanh, 13);
        let x = Mat::from_vec(2, 3, vec![0.1, 0.2, 0.3, -0.3, 0.5, 0.9]).unwrap();
        let delta = Mat::from_vec(2, 3, vec![0.5, -1.0, 0.25, 1.5, 0.0, -0.75]).unwrap();
        let trace = m.forward_batch(x.clone()).unwrap();
        let mut grad = vec![0.0; m.num_params()];
        m.backward_batch(&trace, &delta, &mut grad);
        let mut expect = vec![0.0; m.num_params()];
        for r in 0..2 {
            let j = m.jacobian_params(x.row(r)).unwrap();
            for (p, e) in expect.iter_mut().enumerate() {
                *e += (0..3).map(|c| delta[(r, c)] * j[(c, p)]).sum::<f64>();
            }
        }
        assert!(grad.iter().zip(&expect).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn averaged_forward_at_zero_eta_is_plain_forward() {
        let m = random_model(&[2, 5, 2], Activation::Tanh, 14);
        let aug = AugmentationParams::zeros(Family::PointRotation);
        let x = [0.7, -0.3];
        let (f, _) = m.forward(&x).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for s in [1, 2, 10] {
            let (fhat, traces, _) = m.averaged_forward(&x, &aug, s, s % 2 == 0, &mut rng).unwrap();
            assert_eq!(fhat, f);
            assert_eq!(traces.len(), s);
            let (fhat, dfhat) = m.averaged_forward_tangent(&x, &aug, s, s % 2 == 0, &mut rng).unwrap();
            assert_eq!(fhat, f);
            if s % 2 == 0 {
                assert!(dfhat.data().iter().all(|v| *v == 0.0));
            }
        }
    }

    #[test]
    fn averaged_forward_converges_for_linear_model() {
        let w = Mat::from_vec(2, 2, vec![1.0, 0.5, -0.3, 2.0]).unwrap();
        let m = MlpModel::from_layers(vec![Dense { w: w.clone(), b: vec![0.0; 2], activation: Activation::Identity }]).unwrap();
        let eta = 1.2;
        let aug = AugmentationParams::new(Family::PointRotation, vec![eta]).unwrap();
        let x = [1.0, 0.4];
        // E[R(εη)] = (sin η / η) I since E[sin(εη)] = 0
        let scale = eta.sin() / eta;
        let analytic = w.matvec(&[scale * x[0], scale * x[1]]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut errs = Vec::new();
        for s in [100usize, 10_000] {
            let (fhat, _, _) = m.averaged_forward(&x, &aug, s, true, &mut rng).unwrap();
            errs.push(fhat.iter().zip(&analytic).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        }
        assert!(errs[1] < 0.02);
        assert!(errs[1] < errs[0] + 1e-3);
    }

    #[test]
    fn antithetic_pair_average_is_even_in_eta() {
        let w = Mat::from_vec(2, 2, vec![1.0, 0.5, -0.3, 2.0]).unwrap();
        let m = MlpModel::from_layers(vec![Dense { w, b: vec![0.1, 0.2], activation: Activation::Identity }]).unwrap();
        let x = [1.0, 0.4];
        let plus = AugmentationParams::new(Family::PointRotation, vec![0.8]).unwrap();
        let minus = AugmentationParams::new(Family::PointRotation, vec![-0.8]).unwrap();
        let a = m.averaged_forward(&x, &plus, 2, true, &mut ChaCha8Rng::seed_from_u64(3)).unwrap().0;
        let b = m.averaged_forward(&x, &minus, 2, true, &mut ChaCha8Rng::seed_from_u64(3)).unwrap().0;
        assert!(a.iter().zip(&b).all(|(u, v)| (u - v).abs() < 1e-15));
    }

    #[test]
    fn averaged_tangent_matches_finite_differences() {
        let m = random_model(&[16, 5, 3], Activation::Tanh, 15);
        let family = Family::ImageAffine { height: 4, width: 4 };
        let aug = AugmentationParams::new(family, vec![0.1, -0.2, 0.3, 0.15, -0.1, 0.2]).unwrap();
        let x: Vec<f64> = (0..16).map(|v| ((v as f64) * 0.7).sin().abs()).collect();
        let eps = draw_eps(&mut ChaCha8Rng::seed_from_u64(6), 6, 4, true).unwrap();
        let (_, dfhat) = m.averaged_forward_tangent_with(&x, &aug, &eps, true).unwrap();
        let h = 1e-6;
        for i in 0..6 {
            let at = |s: f64| {
                let mut a = aug.clone();
                a.eta[i] += s;
                m.averaged_forward_tangent_with(&x, &a, &eps, true).unwrap().0
            };
            let (up, down) = (at(h), at(-h));
            for c in 0..3 {
                assert!((dfhat[(c, i)] - (up[c] - down[c]) / (2.0 * h)).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn averaged_tangent_linear_rotation_closed_form() {
        let w = Mat::from_vec(2, 2, vec![0.4, -1.0, 0.7, 0.3]).unwrap();
        let m = MlpModel::from_layers(vec![Dense { w: w.clone(), b: vec![0.0; 2], activation: Activation::Identity }]).unwrap();
        let aug = AugmentationParams::new(Family::PointRotation, vec![0.9]).unwrap();
        let x = [0.5, 1.5];
        let eps = draw_eps(&mut ChaCha8Rng::seed_from_u64(8), 1, 6, false).unwrap();
        let (_, dfhat) = m.averaged_forward_tangent_with(&x, &aug, &eps, false).unwrap();
        let mut expect = [0.0; 2];
        for r in 0..6 {
            let (_, t) = rotate_point(x, 0.9, eps[(r, 0)]);
            let wt = w.matvec(&t);
            expect[0] += wt[0] / 6.0;
            expect[1] += wt[1] / 6.0;
        }
        assert!((dfhat[(0, 0)] - expect[0]).abs() < 1e-14);
        assert!((dfhat[(1, 0)] - expect[1]).abs() < 1e-14);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let m = random_model(&[4, 3, 2], Activation::Relu, 16);
        let path = dir.path().join("model.json");
        m.save_checkpoint(&path).unwrap();
        assert!(dir.path().join("model.bin").exists());
        let back = MlpModel::load_checkpoint(&path).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn from_layers_validates_shapes() {
        let a = Dense { w: Mat::zeros(3, 2), b: vec![0.0; 3], activation: Activation::Tanh };
        let b = Dense { w: Mat::zeros(2, 4), b: vec![0.0; 2], activation: Activation::Identity };
        assert!(matches!(MlpModel::from_layers(vec![a.clone(), b]), Err(Error::Shape(_))));
        assert!(matches!(MlpModel::from_layers(vec![a]), Err(Error::Config(_))));
    }
}
