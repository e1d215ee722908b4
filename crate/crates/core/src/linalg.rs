//! Dense linear algebra used by the curvature code.
//!
//! Matrices are row-major `f64`. Products go through `matrixmultiply`'s
//! strided GEMM; symmetric eigendecompositions are delegated to `nalgebra`.
//! The 3×3 exponential machinery (`expm3`, `expm3_frechet`, `inv3`) backs the
//! affine augmentation family, and the Kronecker helpers evaluate log-determinants
//! and traces of `scale·(A⊗G) + γI` from the eigenvalues of the two factors.

use std::fmt;
use std::ops::{Add, Index, IndexMut, Mul, Sub};

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Mat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Mat {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows.min(8) {
            write!(f, "  ")?;
            for c in 0..self.cols.min(8) {
                write!(f, "{:>12.5e} ", self[(r, c)])?;
            }
            writeln!(f)?;
        }
        write!(f, "]")
    }
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Mat { rows, cols, data }
    }

    pub fn from_diag(d: &[f64]) -> Self {
        let mut m = Mat::zeros(d.len(), d.len());
        for (i, v) in d.iter().enumerate() {
            m[(i, i)] = *v;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Mat {
        Mat::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn trace(&self) -> f64 {
        self.diag().iter().sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.is_square()
            && (0..self.rows).all(|r| (r + 1..self.cols).all(|c| (self[(r, c)] - self[(c, r)]).abs() <= tol))
    }

    /// Replaces the matrix with `(M + Mᵀ)/2`.
    pub fn symmetrize(&mut self) {
        assert!(self.is_square());
        for r in 0..self.rows {
            for c in r + 1..self.cols {
                let v = 0.5 * (self[(r, c)] + self[(c, r)]);
                self[(r, c)] = v;
                self[(c, r)] = v;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn scaled(&self, s: f64) -> Mat {
        let mut m = self.clone();
        m.scale(s);
        m
    }

    pub fn add_assign(&mut self, other: &Mat) -> Result<()> {
        self.axpy(1.0, other)
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Mat) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "cannot add {:?} to {:?}",
                other.shape(),
                self.shape()
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn matmul(&self, b: &Mat) -> Mat {
        let mut c = Mat::zeros(self.rows, b.cols);
        gemm(1.0, self, false, b, false, 0.0, &mut c);
        c
    }

    /// `selfᵀ · b`
    pub fn matmul_tn(&self, b: &Mat) -> Mat {
        let mut c = Mat::zeros(self.cols, b.cols);
        gemm(1.0, self, true, b, false, 0.0, &mut c);
        c
    }

    /// `self · bᵀ`
    pub fn matmul_nt(&self, b: &Mat) -> Mat {
        let mut c = Mat::zeros(self.rows, b.rows);
        gemm(1.0, self, false, b, true, 0.0, &mut c);
        c
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }

    /// `selfᵀ · x`
    pub fn matvec_t(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, xr) in x.iter().enumerate() {
            for (o, v) in out.iter_mut().zip(self.row(r)) {
                *o += xr * v;
            }
        }
        out
    }

    /// Kronecker product `self ⊗ b`.
    pub fn kron(&self, b: &Mat) -> Mat {
        Mat::from_fn(self.rows * b.rows, self.cols * b.cols, |r, c| {
            self[(r / b.rows, c / b.cols)] * b[(r % b.rows, c % b.cols)]
        })
    }

    /// Sum of elementwise products, `Σ_ij A_ij B_ij`.
    pub fn frobenius_dot(&self, b: &Mat) -> f64 {
        assert_eq!(self.shape(), b.shape());
        dot(&self.data, &b.data)
    }
}

impl Index<(usize, usize)> for Mat {
    type Output = f64;
    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Mat {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `C = alpha · op(A) · op(B) + beta · C`, where `op` optionally transposes.
///
/// Panics on non-conforming shapes.
pub fn gemm(alpha: f64, a: &Mat, trans_a: bool, b: &Mat, trans_b: bool, beta: f64, c: &mut Mat) {
    let (m, k) = if trans_a { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (kb, n) = if trans_b { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, kb, "gemm inner dimensions differ");
    assert_eq!((c.rows, c.cols), (m, n), "gemm output has wrong shape");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.scale(beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if trans_b { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    // SAFETY: strides and extents describe exactly the buffers owned by `a`, `b`
    // and `c`; `c` is borrowed mutably and cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.data.as_mut_ptr(),
            c.cols as isize,
            1,
        );
    }
}

/// Neumaier-compensated accumulator.
#[derive(Clone, Copy, Debug, Default)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

impl FromIterator<f64> for KahanSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut k = KahanSum::new();
        iter.into_iter().for_each(|v| k.add(v));
        k
    }
}

/// Mean over `count` consecutive rows of `m` starting at `start`, written to `out`.
///
/// The mean is formed as `r₀ + Σ (rⱼ − r₀)/count` with compensated summation,
/// so identical rows reproduce their value exactly. With `paired`, rows
/// `(2j, 2j+1)` are added first; antithetic pairs of an odd integrand then
/// cancel to an exact zero.
pub fn mean_rows(m: &Mat, start: usize, count: usize, paired: bool, out: &mut [f64]) {
    let w = m.cols;
    assert_eq!(out.len(), w);
    assert!(count >= 1 && start + count <= m.rows);
    if count == 1 {
        out.copy_from_slice(m.row(start));
        return;
    }
    if paired {
        debug_assert!(count % 2 == 0);
        let pairs = count / 2;
        let pair = |j: usize, c: usize| m[(start + 2 * j, c)] + m[(start + 2 * j + 1, c)];
        for c in 0..w {
            let base = pair(0, c);
            let acc: KahanSum = (1..pairs).map(|j| pair(j, c) - base).collect();
            out[c] = (base + acc.value() / pairs as f64) * 0.5;
        }
    } else {
        for c in 0..w {
            let base = m[(start, c)];
            let acc: KahanSum = (1..count).map(|j| m[(start + j, c)] - base).collect();
            out[c] = base + acc.value() / count as f64;
        }
    }
}

/// Eigendecomposition of a symmetric matrix.
#[derive(Clone, Debug)]
pub struct SymEig {
    /// Ascending eigenvalues.
    pub values: Vec<f64>,
    /// Orthonormal eigenvectors stored as columns.
    pub vectors: Mat,
}

impl SymEig {
    pub fn reconstruct(&self) -> Mat {
        let n = self.values.len();
        let mut vd = self.vectors.clone();
        for r in 0..n {
            for c in 0..n {
                vd[(r, c)] *= self.values[c];
            }
        }
        vd.matmul_nt(&self.vectors)
    }

    /// `diag(Vᵀ X V)`, the quadratic forms of `x` along each eigenvector.
    pub fn rotated_diag(&self, x: &Mat) -> Vec<f64> {
        let xv = x.matmul(&self.vectors);
        let n = self.values.len();
        (0..n)
            .map(|j| (0..n).map(|i| self.vectors[(i, j)] * xv[(i, j)]).sum())
            .collect()
    }
}

pub fn sym_eigh(m: &Mat) -> Result<SymEig> {
    if !m.is_square() {
        return Err(Error::Shape(format!("eigendecomposition of non-square {:?}", m.shape())));
    }
    if !m.is_finite() {
        return Err(Error::Domain("eigendecomposition of a matrix with non-finite entries".into()));
    }
    if !m.is_symmetric(1e-10 * m.max_abs().max(1.0)) {
        return Err(Error::Shape("eigendecomposition of an asymmetric matrix".into()));
    }
    let n = m.rows;
    if n == 0 {
        return Ok(SymEig { values: vec![], vectors: Mat::zeros(0, 0) });
    }
    let dm = nalgebra::DMatrix::from_row_slice(n, n, &m.data);
    let eig = nalgebra::SymmetricEigen::new(dm);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = Mat::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    Ok(SymEig { values, vectors })
}

/// Lower Cholesky factor `L` with `m = L Lᵀ`.
pub fn cholesky(m: &Mat) -> Result<Mat> {
    if !m.is_square() {
        return Err(Error::Shape(format!("Cholesky of non-square {:?}", m.shape())));
    }
    let n = m.rows;
    let mut l = Mat::zeros(n, n);
    for j in 0..n {
        let d = m[(j, j)] - dot(&l.row(j)[..j], &l.row(j)[..j]);
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::NotPositiveDefinite { pivot: j, value: d });
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in j + 1..n {
            let s = m[(i, j)] - dot(&l.row(i)[..j], &l.row(j)[..j]);
            l[(i, j)] = s / djj;
        }
    }
    Ok(l)
}

/// `log det m` for a symmetric positive-definite matrix.
pub fn logdet_spd(m: &Mat) -> Result<f64> {
    if !m.is_symmetric(1e-10 * m.max_abs().max(1.0)) {
        return Err(Error::Shape("log-determinant of an asymmetric matrix".into()));
    }
    let l = cholesky(m)?;
    Ok(2.0 * l.diag().iter().map(|d| d.ln()).sum::<f64>())
}

/// Inverse of a symmetric positive-definite matrix via its Cholesky factor.
pub fn inverse_spd(m: &Mat) -> Result<Mat> {
    let l = cholesky(m)?;
    let n = m.rows;
    // L⁻¹ by forward substitution, column by column.
    let mut linv = Mat::zeros(n, n);
    for c in 0..n {
        for r in c..n {
            let mut s = if r == c { 1.0 } else { 0.0 };
            for k in c..r {
                s -= l[(r, k)] * linv[(k, c)];
            }
            linv[(r, c)] = s / l[(r, r)];
        }
    }
    let mut inv = linv.matmul_tn(&linv);
    inv.symmetrize();
    Ok(inv)
}

/// 3×3 matrix, used for homogeneous 2-D affine transforms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mat3(pub [[f64; 3]; 3]);

impl Mat3 {
    pub const ZERO: Mat3 = Mat3([[0.0; 3]; 3]);
    pub const IDENTITY: Mat3 = Mat3([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);

    pub fn transpose(&self) -> Mat3 {
        let m = &self.0;
        Mat3([[m[0][0], m[1][0], m[2][0]], [m[0][1], m[1][1], m[2][1]], [m[0][2], m[1][2], m[2][2]]])
    }

    pub fn det(&self) -> f64 {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn apply(&self, v: [f64; 3]) -> [f64; 3] {
        let m = &self.0;
        [
            m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
            m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
            m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
        ]
    }

    pub fn scale(&self, s: f64) -> Mat3 {
        let mut out = *self;
        out.0.iter_mut().flatten().for_each(|v| *v *= s);
        out
    }

    pub fn max_abs_diff(&self, o: &Mat3) -> f64 {
        self.0
            .iter()
            .flatten()
            .zip(o.0.iter().flatten())
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|v| v.is_finite())
    }

    pub fn to_mat(&self) -> Mat {
        Mat::from_fn(3, 3, |r, c| self.0[r][c])
    }

    pub fn from_mat(m: &Mat) -> Mat3 {
        assert_eq!(m.shape(), (3, 3));
        let mut out = Mat3::ZERO;
        for r in 0..3 {
            for c in 0..3 {
                out.0[r][c] = m[(r, c)];
            }
        }
        out
    }

    /// Row-major entries.
    pub fn flat(&self) -> [f64; 9] {
        let m = &self.0;
        [m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2]]
    }
}

impl Mul for Mat3 {
    type Output = Mat3;
    fn mul(self, b: Mat3) -> Mat3 {
        let mut out = Mat3::ZERO;
        for r in 0..3 {
            for c in 0..3 {
                out.0[r][c] = self.0[r][0] * b.0[0][c] + self.0[r][1] * b.0[1][c] + self.0[r][2] * b.0[2][c];
            }
        }
        out
    }
}

impl Add for Mat3 {
    type Output = Mat3;
    fn add(self, b: Mat3) -> Mat3 {
        let mut out = self;
        out.0.iter_mut().flatten().zip(b.0.iter().flatten()).for_each(|(a, b)| *a += b);
        out
    }
}

impl Sub for Mat3 {
    type Output = Mat3;
    fn sub(self, b: Mat3) -> Mat3 {
        self + b.scale(-1.0)
    }
}

fn norm1(m: &Mat) -> f64 {
    (0..m.cols).map(|c| (0..m.rows).map(|r| m[(r, c)].abs()).sum::<f64>()).fold(0.0, f64::max)
}

const EXPM_TAYLOR_DEGREE: u32 = 13;
const EXPM_SCALE_THRESHOLD: f64 = 0.5;

/// Matrix exponential of a small square matrix by scaling and squaring with a
/// degree-13 Taylor kernel (‖A/2ˢ‖₁ ≤ 0.5).
pub fn expm(a: &Mat) -> Mat {
    assert!(a.is_square());
    let n = a.rows;
    let norm = norm1(a);
    let mut squarings = 0u32;
    if norm > EXPM_SCALE_THRESHOLD {
        squarings = (norm / EXPM_SCALE_THRESHOLD).log2().ceil().max(0.0) as u32;
    }
    let scaled = a.scaled(0.5f64.powi(squarings as i32));
    // Horner: I + A(I + A/2(I + A/3(...)))
    let mut p = Mat::identity(n);
    for k in (1..=EXPM_TAYLOR_DEGREE).rev() {
        let mut next = scaled.matmul(&p);
        next.scale(1.0 / k as f64);
        for i in 0..n {
            next[(i, i)] += 1.0;
        }
        p = next;
    }
    for _ in 0..squarings {
        p = p.matmul(&p);
    }
    p
}

pub fn expm3(m: &Mat3) -> Mat3 {
    Mat3::from_mat(&expm(&m.to_mat()))
}

/// `(exp(m), L(m, e))` with `L` the Fréchet derivative of the exponential at
/// `m` in direction `e`, read off `exp([[m, e], [0, m]])`.
pub fn expm3_frechet(m: &Mat3, e: &Mat3) -> (Mat3, Mat3) {
    let block = Mat::from_fn(6, 6, |r, c| match (r < 3, c < 3) {
        (true, true) => m.0[r][c],
        (true, false) => e.0[r][c - 3],
        (false, false) => m.0[r - 3][c - 3],
        (false, true) => 0.0,
    });
    let x = expm(&block);
    let mut exp_m = Mat3::ZERO;
    let mut frechet = Mat3::ZERO;
    for r in 0..3 {
        for c in 0..3 {
            exp_m.0[r][c] = x[(r, c)];
            frechet.0[r][c] = x[(r, c + 3)];
        }
    }
    (exp_m, frechet)
}

pub fn inv3(m: &Mat3) -> Result<Mat3> {
    let det = m.det();
    if !(det.abs() > 1e-12) {
        return Err(Error::Singular { det });
    }
    let a = &m.0;
    let cof = |r0: usize, r1: usize, c0: usize, c1: usize| a[r0][c0] * a[r1][c1] - a[r0][c1] * a[r1][c0];
    let adj = Mat3([
        [cof(1, 2, 1, 2), -cof(0, 2, 1, 2), cof(0, 1, 1, 2)],
        [-cof(1, 2, 0, 2), cof(0, 2, 0, 2), -cof(0, 1, 0, 2)],
        [cof(1, 2, 0, 1), -cof(0, 2, 0, 1), cof(0, 1, 0, 1)],
    ]);
    Ok(adj.scale(1.0 / det))
}

fn check_damping(gamma: f64, scale: f64) -> Result<()> {
    if !(gamma > 0.0) {
        return Err(Error::Domain(format!("damping must be positive, got {gamma}")));
    }
    if !(scale > 0.0) {
        return Err(Error::Domain(format!("Kronecker scale must be positive, got {scale}")));
    }
    Ok(())
}

/// `log det(scale·(A⊗G) + γI)` from the eigenvalues of `A` and `G`.
///
/// Eigenvalues are clamped at zero first.
pub fn kron_damped_logdet(lam_a: &[f64], lam_g: &[f64], scale: f64, gamma: f64) -> Result<f64> {
    check_damping(gamma, scale)?;
    let mut acc = KahanSum::new();
    for &la in lam_a {
        let la = la.max(0.0);
        for &lg in lam_g {
            acc.add((scale * la * lg.max(0.0) + gamma).ln());
        }
    }
    Ok(acc.value())
}

/// `Σᵢⱼ pᵢ qⱼ / (scale·λᴬᵢ·λᴳⱼ + γ)`.
///
/// With `p = diag(VᴬᵀXVᴬ)` and `q = diag(VᴳᵀYVᴳ)` this is
/// `tr[(scale·A⊗G + γI)⁻¹ (X⊗Y)]`.
pub fn kron_damped_bilinear_trace(
    p_diag: &[f64],
    q_diag: &[f64],
    lam_a: &[f64],
    lam_g: &[f64],
    scale: f64,
    gamma: f64,
) -> Result<f64> {
    check_damping(gamma, scale)?;
    if p_diag.len() != lam_a.len() || q_diag.len() != lam_g.len() {
        return Err(Error::Shape(format!(
            "trace vectors ({}, {}) do not match eigenvalue counts ({}, {})",
            p_diag.len(),
            q_diag.len(),
            lam_a.len(),
            lam_g.len()
        )));
    }
    let mut acc = KahanSum::new();
    for (p, &la) in p_diag.iter().zip(lam_a) {
        let la = la.max(0.0);
        for (q, &lg) in q_diag.iter().zip(lam_g) {
            acc.add(p * q / (scale * la * lg.max(0.0) + gamma));
        }
    }
    Ok(acc.value())
}
