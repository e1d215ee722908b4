//! Reparameterised augmentation distributions `x' = g(x, ε; η)`.
//!
//! Two families are supported: planar rotation of 2-D points about the origin
//! (one parameter) and the six-generator affine family acting on images
//! through bilinear resampling. Both return exact derivatives of `x'` with
//! respect to each component of `η`.
//!
//! Image coordinates are normalised to `[-1, 1]` on both axes: `(-1, -1)` is
//! the centre of the top-left pixel and `(1, 1)` the centre of the
//! bottom-right one. A transform `T` maps source to output coordinates, so
//! each output pixel samples the input at `T⁻¹ (x', y', 1)`; samples outside
//! the grid read zero.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{expm3, expm3_frechet, inv3, Mat, Mat3};

/// Generators of the affine family: horizontal translation, vertical
/// translation, rotation, horizontal scale, vertical scale, shear.
pub const GENERATORS: [Mat3; 6] = [
    Mat3([[0.0, 0.0, 1.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]]),
    Mat3([[0.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, 0.0, 0.0]]),
    Mat3([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]]),
    Mat3([[1.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]]),
    Mat3([[0.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 0.0]]),
    Mat3([[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]]),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Family {
    PointRotation,
    ImageAffine { height: usize, width: usize },
}

impl Family {
    /// Number of augmentation parameters.
    pub fn k(&self) -> usize {
        match self {
            Family::PointRotation => 1,
            Family::ImageAffine { .. } => 6,
        }
    }

    /// Dimension of a (flattened) input.
    pub fn input_dim(&self) -> usize {
        match self {
            Family::PointRotation => 2,
            Family::ImageAffine { height, width } => height * width,
        }
    }
}

/// Invariance parameters `η` of one augmentation family.
///
/// `η` is stored unconstrained; since `ε` is symmetric only `|ηᵢ|` matters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationParams {
    pub family: Family,
    pub eta: Vec<f64>,
}

/// One draw of reparameterisation noise, `ε ∈ [-1, 1]^k`.
#[derive(Clone, Debug, PartialEq)]
pub struct EpsSample {
    pub eps: Vec<f64>,
}

/// Draws `count` noise vectors of length `k` uniformly on `[-1, 1]^k`.
///
/// With `antithetic`, draws come in `(ε, -ε)` pairs so the sample mean of `ε`
/// is exactly zero.
pub fn sample_eps<R: Rng + ?Sized>(rng: &mut R, k: usize, count: usize, antithetic: bool) -> Result<Vec<EpsSample>> {
    let m = draw_eps(rng, k, count, antithetic)?;
    Ok((0..count).map(|r| EpsSample { eps: m.row(r).to_vec() }).collect())
}

/// Like [`sample_eps`], returning a `count × k` matrix.
pub fn draw_eps<R: Rng + ?Sized>(rng: &mut R, k: usize, count: usize, antithetic: bool) -> Result<Mat> {
    if k != 1 && k != 6 {
        return Err(Error::Config(format!("augmentation families have 1 or 6 parameters, not {k}")));
    }
    if count == 0 {
        return Err(Error::Config("at least one augmentation sample is required".into()));
    }
    if antithetic && count % 2 == 1 {
        return Err(Error::Config(format!(
            "antithetic sampling needs an even sample count, got {count}"
        )));
    }
    let mut m = Mat::zeros(count, k);
    if antithetic {
        for pair in 0..count / 2 {
            for c in 0..k {
                let e: f64 = rng.random_range(-1.0..=1.0);
                m[(2 * pair, c)] = e;
                m[(2 * pair + 1, c)] = -e;
            }
        }
    } else {
        m.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..=1.0));
    }
    Ok(m)
}

/// `T = exp(Σᵢ εᵢηᵢGᵢ)` together with `∂T/∂ηᵢ` for all six components.
pub fn affine_matrix(eta: &[f64], eps: &[f64]) -> (Mat3, [Mat3; 6]) {
    assert_eq!(eta.len(), 6);
    assert_eq!(eps.len(), 6);
    let generator = affine_generator(eta, eps);
    let mut tangents = [Mat3::ZERO; 6];
    let mut t = Mat3::IDENTITY;
    for (i, tangent) in tangents.iter_mut().enumerate() {
        let (e, l) = expm3_frechet(&generator, &GENERATORS[i].scale(eps[i]));
        t = e;
        *tangent = l;
    }
    (t, tangents)
}

/// Transform only, without derivatives.
pub fn affine_transform(eta: &[f64], eps: &[f64]) -> Mat3 {
    expm3(&affine_generator(eta, eps))
}

fn affine_generator(eta: &[f64], eps: &[f64]) -> Mat3 {
    GENERATORS
        .iter()
        .zip(eta.iter().zip(eps))
        .fold(Mat3::ZERO, |acc, (g, (e, s))| acc + g.scale(e * s))
}

/// Centre and half-extent (in pixels) of one image axis.
fn axis_geometry(n: usize) -> (f64, f64) {
    let centre = (n as f64 - 1.0) * 0.5;
    (centre, if n > 1 { centre } else { 1.0 })
}

/// Source sampling geometry of one warp: the inverse transform and its
/// pixel-space form.
struct WarpGeometry {
    t_inv: Mat3,
    // rows: source column / row offsets from the centre, as affine maps of the
    // centred output pixel coordinates
    k: [[f64; 3]; 2],
    cx: f64,
    cy: f64,
    sx: f64,
    sy: f64,
}

impl WarpGeometry {
    fn new(height: usize, width: usize, t: &Mat3) -> Result<Self> {
        let t_inv = inv3(t)?;
        let (cx, sx) = axis_geometry(width);
        let (cy, sy) = axis_geometry(height);
        let a = &t_inv.0;
        let k = [
            [a[0][0], a[0][1] * (sx / sy), a[0][2] * sx],
            [a[1][0] * (sy / sx), a[1][1], a[1][2] * sy],
        ];
        Ok(WarpGeometry { t_inv, k, cx, cy, sx, sy })
    }

    /// Source pixel position (column, row) for output pixel `(i, j)`.
    #[inline]
    fn source(&self, i: usize, j: usize) -> (f64, f64) {
        let ox = j as f64 - self.cx;
        let oy = i as f64 - self.cy;
        let px = self.k[0][0] * ox + self.k[0][1] * oy + self.k[0][2] + self.cx;
        let py = self.k[1][0] * ox + self.k[1][1] * oy + self.k[1][2] + self.cy;
        (px, py)
    }

    /// Normalised coordinates of a source pixel position.
    #[inline]
    fn normalised(&self, px: f64, py: f64) -> (f64, f64) {
        ((px - self.cx) / self.sx, (py - self.cy) / self.sy)
    }
}

/// Bilinear sample and its spatial gradient at `(px, py)` with zero padding.
///
/// Cells are chosen as `[ceil(p) - 1, ceil(p)]`, so on integer grid lines the
/// gradient is that of the left/upper cell.
#[inline]
fn bilinear(img: &Mat, px: f64, py: f64) -> (f64, f64, f64) {
    let (h, w) = (img.rows() as isize, img.cols() as isize);
    let x0f = px.ceil() - 1.0;
    let y0f = py.ceil() - 1.0;
    let fx = px - x0f;
    let fy = py - y0f;
    let (x0, y0) = (x0f as isize, y0f as isize);
    let at = |y: isize, x: isize| -> f64 {
        if y >= 0 && y < h && x >= 0 && x < w {
            img[(y as usize, x as usize)]
        } else {
            0.0
        }
    };
    if x0 < -1 || y0 < -1 || x0 >= w || y0 >= h || !px.is_finite() || !py.is_finite() {
        return (0.0, 0.0, 0.0);
    }
    let i00 = at(y0, x0);
    let i01 = at(y0, x0 + 1);
    let i10 = at(y0 + 1, x0);
    let i11 = at(y0 + 1, x0 + 1);
    let top = (1.0 - fx) * i00 + fx * i01;
    let bottom = (1.0 - fx) * i10 + fx * i11;
    let value = (1.0 - fy) * top + fy * bottom;
    let dx = (1.0 - fy) * (i01 - i00) + fy * (i11 - i10);
    let dy = bottom - top;
    (value, dx, dy)
}

/// Resamples `img` under the forward transform `t`.
pub fn warp_image(img: &Mat, t: &Mat3) -> Result<Mat> {
    let geo = WarpGeometry::new(img.rows(), img.cols(), t)?;
    let mut out = Mat::zeros(img.rows(), img.cols());
    for i in 0..img.rows() {
        for j in 0..img.cols() {
            let (px, py) = geo.source(i, j);
            out[(i, j)] = bilinear(img, px, py).0;
        }
    }
    Ok(out)
}

/// Directional derivative of [`warp_image`] with respect to `t` along `dt`.
pub fn warp_image_jvp(img: &Mat, t: &Mat3, dt: &Mat3) -> Result<Mat> {
    let (_, mut tangents) = warp_image_with_tangents(img, t, std::slice::from_ref(dt))?;
    Ok(tangents.pop().expect("one tangent requested"))
}

/// Warped image together with its derivatives along each of `dts`.
pub fn warp_image_with_tangents(img: &Mat, t: &Mat3, dts: &[Mat3]) -> Result<(Mat, Vec<Mat>)> {
    let (h, w) = img.shape();
    let geo = WarpGeometry::new(h, w, t)?;
    // d(source) = -T⁻¹ dT T⁻¹ (x', y', 1) = -T⁻¹ dT (u, v, 1)
    let directions: Vec<Mat3> = dts.iter().map(|dt| (geo.t_inv * *dt).scale(-1.0)).collect();
    let mut out = Mat::zeros(h, w);
    let mut tangents = vec![Mat::zeros(h, w); dts.len()];
    for i in 0..h {
        for j in 0..w {
            let (px, py) = geo.source(i, j);
            let (value, gx, gy) = bilinear(img, px, py);
            out[(i, j)] = value;
            if gx == 0.0 && gy == 0.0 {
                continue;
            }
            let (u, v) = geo.normalised(px, py);
            for (d, tangent) in directions.iter().zip(tangents.iter_mut()) {
                let du = d.0[0][0] * u + d.0[0][1] * v + d.0[0][2];
                let dv = d.0[1][0] * u + d.0[1][1] * v + d.0[1][2];
                tangent[(i, j)] = gx * geo.sx * du + gy * geo.sy * dv;
            }
        }
    }
    Ok((out, tangents))
}

/// Rotates `x` by `ε·η` about the origin; returns the point and `∂x'/∂η`.
pub fn rotate_point(x: [f64; 2], eta_rot: f64, eps: f64) -> ([f64; 2], [f64; 2]) {
    let (s, c) = (eps * eta_rot).sin_cos();
    let rotated = [c * x[0] - s * x[1], s * x[0] + c * x[1]];
    let tangent = [eps * (-s * x[0] - c * x[1]), eps * (c * x[0] - s * x[1])];
    (rotated, tangent)
}

impl AugmentationParams {
    pub fn new(family: Family, eta: Vec<f64>) -> Result<Self> {
        if eta.len() != family.k() {
            return Err(Error::Shape(format!(
                "family {:?} takes {} parameters, got {}",
                family,
                family.k(),
                eta.len()
            )));
        }
        if eta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("augmentation parameters must be finite".into()));
        }
        Ok(AugmentationParams { family, eta })
    }

    pub fn zeros(family: Family) -> Self {
        AugmentationParams { family, eta: vec![0.0; family.k()] }
    }

    pub fn k(&self) -> usize {
        self.family.k()
    }

    /// Magnitudes `|ηᵢ|`, the quantities that define the distribution.
    pub fn magnitudes(&self) -> Vec<f64> {
        self.eta.iter().map(|v| v.abs()).collect()
    }

    /// Sampled transform as a homogeneous 3×3 matrix.
    pub fn transform(&self, eps: &[f64]) -> Mat3 {
        match self.family {
            Family::PointRotation => {
                let (s, c) = (eps[0] * self.eta[0]).sin_cos();
                Mat3([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
            }
            Family::ImageAffine { .. } => affine_transform(&self.eta, eps),
        }
    }

    /// Augmented copy of the flattened input `x`.
    pub fn apply(&self, x: &[f64], eps: &[f64], out: &mut [f64]) -> Result<()> {
        self.check_input(x, eps)?;
        match self.family {
            Family::PointRotation => {
                let (r, _) = rotate_point([x[0], x[1]], self.eta[0], eps[0]);
                out.copy_from_slice(&r);
            }
            Family::ImageAffine { height, width } => {
                let img = Mat::from_vec(height, width, x.to_vec())?;
                let warped = warp_image(&img, &affine_transform(&self.eta, eps))?;
                out.copy_from_slice(warped.data());
            }
        }
        Ok(())
    }

    /// Augmented input and `∂x'/∂ηᵢ` for every component, written into
    /// `out` and `tangents[i]`.
    pub fn apply_with_tangents(&self, x: &[f64], eps: &[f64], out: &mut [f64], tangents: &mut [&mut [f64]]) -> Result<()> {
        self.check_input(x, eps)?;
        assert_eq!(tangents.len(), self.k());
        match self.family {
            Family::PointRotation => {
                let (r, t) = rotate_point([x[0], x[1]], self.eta[0], eps[0]);
                out.copy_from_slice(&r);
                tangents[0].copy_from_slice(&t);
            }
            Family::ImageAffine { height, width } => {
                let img = Mat::from_vec(height, width, x.to_vec())?;
                let (t, dts) = affine_matrix(&self.eta, eps);
                let (warped, dw) = warp_image_with_tangents(&img, &t, &dts)?;
                out.copy_from_slice(warped.data());
                for (dst, src) in tangents.iter_mut().zip(&dw) {
                    dst.copy_from_slice(src.data());
                }
            }
        }
        Ok(())
    }

    fn check_input(&self, x: &[f64], eps: &[f64]) -> Result<()> {
        if x.len() != self.family.input_dim() {
            return Err(Error::Shape(format!(
                "input of length {} for an augmentation expecting {}",
                x.len(),
                self.family.input_dim()
            )));
        }
        if eps.len() != self.k() {
            return Err(Error::Shape(format!("noise of length {} for k = {}", eps.len(), self.k())));
        }
        Ok(())
    }
}
