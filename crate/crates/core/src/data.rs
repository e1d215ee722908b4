//! Datasets: the soft rotation-invariant toy problem, IDX image files,
//! transformed image variants and subsets.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_3, PI};
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::augment::{warp_image, GENERATORS};
use crate::error::{Error, Result};
use crate::linalg::{expm3, Mat, Mat3};
use crate::model::write_atomic;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DatasetKind {
    Points2D,
    /// Polar features `(r, cos φ, sin φ)` of 2-D points.
    Polar,
    Images { height: usize, width: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub kind: DatasetKind,
    /// One row per datum; images are flattened row-major.
    pub inputs: Mat,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub provenance: String,
}

impl Dataset {
    pub fn new(kind: DatasetKind, inputs: Mat, labels: Vec<usize>, classes: usize, provenance: String) -> Result<Self> {
        let d = match kind {
            DatasetKind::Points2D => 2,
            DatasetKind::Polar => 3,
            DatasetKind::Images { height, width } => height * width,
        };
        if inputs.cols() != d {
            return Err(Error::Shape(format!("{kind:?} data need {d} columns, got {}", inputs.cols())));
        }
        if inputs.rows() != labels.len() {
            return Err(Error::Shape(format!("{} inputs but {} labels", inputs.rows(), labels.len())));
        }
        if labels.is_empty() {
            return Err(Error::Config("a dataset needs at least one datum".into()));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Domain(format!("label {y} is out of range for {classes} classes")));
        }
        if matches!(kind, DatasetKind::Images { .. }) && inputs.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Domain("pixel values must lie in [0, 1]".into()));
        }
        Ok(Dataset { kind, inputs, labels, classes, provenance })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, n: usize) -> Result<Mat> {
        match self.kind {
            DatasetKind::Images { height, width } => Mat::from_vec(height, width, self.inputs.row(n).to_vec()),
            _ => Err(Error::Config("not an image dataset".into())),
        }
    }

    /// Rows `indices` in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Dataset> {
        let mut inputs = Mat::zeros(indices.len(), self.inputs.cols());
        for (r, &n) in indices.iter().enumerate() {
            if n >= self.len() {
                return Err(Error::Shape(format!("index {n} is out of range for {} data", self.len())));
            }
            inputs.row_mut(r).copy_from_slice(self.inputs.row(n));
        }
        let labels = indices.iter().map(|&n| self.labels[n]).collect();
        Dataset::new(self.kind, inputs, labels, self.classes, self.provenance.clone())
    }

    /// Writes a JSON header at `path` and the inputs as little-endian `f64`
    /// next to it with extension `.bin`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bin = path.with_extension("bin");
        let header = DatasetHeader {
            kind: self.kind,
            rows: self.inputs.rows(),
            cols: self.inputs.cols(),
            classes: self.classes,
            labels: self.labels.clone(),
            provenance: self.provenance.clone(),
            inputs_file: bin.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
        };
        let bytes: Vec<u8> = self.inputs.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        write_atomic(&bin, &bytes)?;
        write_atomic(path, serde_json::to_string_pretty(&header)?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let header: DatasetHeader = serde_json::from_slice(&std::fs::read(path)?)?;
        let bin = path.with_file_name(&header.inputs_file);
        let bytes = std::fs::read(bin)?;
        if bytes.len() != header.rows * header.cols * 8 {
            return Err(Error::Format { field: "inputs", msg: format!("expected {} bytes, found {}", header.rows * header.cols * 8, bytes.len()) });
        }
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Dataset::new(header.kind, Mat::from_vec(header.rows, header.cols, data)?, header.labels, header.classes, header.provenance)
    }
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    kind: DatasetKind,
    rows: usize,
    cols: usize,
    classes: usize,
    labels: Vec<usize>,
    provenance: String,
    inputs_file: String,
}

/// Anchor arrangement of the toy problem.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyLayout {
    /// Class 0 at radius 1 and class 1 at radius 2, both around angle 0.
    #[default]
    Radial,
    /// As `Radial` for half of the points; the other half sits around
    /// angle π with the radii of the two classes swapped.
    Opposed,
}

/// Two-class points with a soft ±60° rotational invariance about the origin.
///
/// Points get angular jitter `N(0, 0.1²)` and radial jitter `N(0, 0.05²)`
/// around their anchor and are then rotated by an angle drawn from
/// `U[-π/3, π/3]`. Datum `n` has label `n mod 2`.
pub fn gen_toy(seed: u64, n: usize) -> Result<Dataset> {
    gen_toy_with(seed, n, ToyLayout::Radial)
}

pub fn gen_toy_with(seed: u64, n: usize, layout: ToyLayout) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::Config(format!("the toy problem needs at least two points, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let angular = Normal::new(0.0, 0.1).expect("valid deviation");
    let radial = Normal::new(0.0, 0.05).expect("valid deviation");
    let mut inputs = Mat::zeros(n, 2);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % 2;
        let flipped = layout == ToyLayout::Opposed && (i / 2) % 2 == 1;
        let (ring, anchor) = if flipped { (1 - y, PI) } else { (y, 0.0) };
        let r = (ring + 1) as f64 + radial.sample(&mut rng);
        let phi = anchor + angular.sample(&mut rng) + rng.random_range(-FRAC_PI_3..=FRAC_PI_3);
        inputs.row_mut(i).copy_from_slice(&[r * phi.cos(), r * phi.sin()]);
        labels.push(y);
    }
    Dataset::new(DatasetKind::Points2D, inputs, labels, 2, format!("toy {layout:?} n={n} seed={seed}"))
}

/// Small synthetic images: class `c` shows a Gaussian bump placed at angle
/// `2πc/C` around the centre, with jittered position, width and brightness.
pub fn gen_image_fixture(seed: u64, n: usize, side: usize, classes: usize) -> Result<Dataset> {
    if n == 0 || side < 2 || classes < 2 {
        return Err(Error::Config(format!("invalid image fixture: n={n}, side={side}, classes={classes}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centre = (side as f64 - 1.0) / 2.0;
    let mut inputs = Mat::zeros(n, side * side);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % classes;
        let angle = 2.0 * PI * y as f64 / classes as f64 + rng.random_range(-0.3..0.3);
        let radius = side as f64 * rng.random_range(0.15..0.3);
        let (bx, by) = (centre + radius * angle.cos(), centre + radius * angle.sin());
        let width = side as f64 * rng.random_range(0.12..0.2);
        let amp = rng.random_range(0.6..1.0);
        for (p, v) in inputs.row_mut(i).iter_mut().enumerate() {
            let (r, c) = ((p / side) as f64, (p % side) as f64);
            *v = amp * (-((c - bx).powi(2) + (r - by).powi(2)) / (2.0 * width * width)).exp();
        }
        labels.push(y);
    }
    Dataset::new(DatasetKind::Images { height: side, width: side }, inputs, labels, classes, format!("image fixture n={n} side={side} seed={seed}"))
}

/// `(r, cos φ, sin φ)` per point; the origin maps to `(0, 1, 0)`.
pub fn to_polar(d: &Dataset) -> Result<Dataset> {
    if d.kind != DatasetKind::Points2D {
        return Err(Error::Config("polar features need 2-D points".into()));
    }
    let inputs = Mat::from_fn(d.len(), 3, |r, c| {
        let (x, y) = (d.inputs[(r, 0)], d.inputs[(r, 1)]);
        let rad = x.hypot(y);
        match c {
            0 => rad,
            1 if rad == 0.0 => 1.0,
            1 => x / rad,
            _ if rad == 0.0 => 0.0,
            _ => y / rad,
        }
    });
    Dataset::new(DatasetKind::Polar, inputs, d.labels.clone(), d.classes, format!("{} polar", d.provenance))
}

fn read_u32(bytes: &[u8], at: usize, field: &'static str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Format { field, msg: "file ends inside the header".into() })
}

/// Parses IDX image and label buffers.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let magic = read_u32(images, 0, "images magic")?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Format { field: "images magic", msg: format!("expected 0x{IMAGES_MAGIC:08x}, found 0x{magic:08x}") });
    }
    let count = read_u32(images, 4, "images count")? as usize;
    let rows = read_u32(images, 8, "images rows")? as usize;
    let cols = read_u32(images, 12, "images cols")? as usize;
    let magic = read_u32(labels, 0, "labels magic")?;
    if magic != LABELS_MAGIC {
        return Err(Error::Format { field: "labels magic", msg: format!("expected 0x{LABELS_MAGIC:08x}, found 0x{magic:08x}") });
    }
    let label_count = read_u32(labels, 4, "labels count")? as usize;
    if label_count != count {
        return Err(Error::Format { field: "labels count", msg: format!("{label_count} labels for {count} images") });
    }
    let pixels = count * rows * cols;
    if images.len() < 16 + pixels {
        return Err(Error::Format { field: "images pixels", msg: format!("expected {pixels} pixels, found {}", images.len() - 16) });
    }
    if labels.len() < 8 + count {
        return Err(Error::Format { field: "labels data", msg: format!("expected {count} labels, found {}", labels.len() - 8) });
    }
    let data = images[16..16 + pixels].iter().map(|&b| f64::from(b) / 255.0).collect();
    let ys: Vec<usize> = labels[8..8 + count].iter().map(|&b| usize::from(b)).collect();
    let classes = ys.iter().max().map_or(1, |m| m + 1).max(10);
    Dataset::new(DatasetKind::Images { height: rows, width: cols }, Mat::from_vec(count, rows * cols, data)?, ys, classes, "idx".into())
}

pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let mut d = parse_idx(&std::fs::read(images)?, &std::fs::read(labels)?)?;
    d.provenance = format!("idx {}", images.display());
    Ok(d)
}

/// IDX encodings of an image dataset; pixels are rounded to `u8`.
pub fn encode_idx(d: &Dataset) -> Result<(Vec<u8>, Vec<u8>)> {
    let DatasetKind::Images { height, width } = d.kind else {
        return Err(Error::Config("only image datasets have an IDX encoding".into()));
    };
    if let Some(&y) = d.labels.iter().find(|&&y| y > 255) {
        return Err(Error::Domain(format!("label {y} does not fit in a byte")));
    }
    let mut images = Vec::with_capacity(16 + d.inputs.data().len());
    for v in [IMAGES_MAGIC, d.len() as u32, height as u32, width as u32] {
        images.extend_from_slice(&v.to_be_bytes());
    }
    images.extend(d.inputs.data().iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    let mut labels = Vec::with_capacity(8 + d.len());
    labels.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    labels.extend_from_slice(&(d.len() as u32).to_be_bytes());
    labels.extend(d.labels.iter().map(|&y| y as u8));
    Ok((images, labels))
}

pub fn write_idx(d: &Dataset, images: &Path, labels: &Path) -> Result<()> {
    let (i, l) = encode_idx(d)?;
    write_atomic(images, &i)?;
    write_atomic(labels, &l)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    None,
    /// Rotation by `U[-π, π]`.
    FullRot,
    /// Rotation by `U[-π/2, π/2]`.
    PartialRot,
    /// Shift by `U[-8, 8]` pixels on each axis.
    Translate,
    /// Isotropic scaling by `exp(s)`, `s ~ U[-log 2, log 2]`.
    Scale,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformSpec {
    pub kind: TransformKind,
    pub seed: u64,
}

/// The forward transform drawn for one image of the given shape.
pub fn draw_transform<R: Rng + ?Sized>(kind: TransformKind, height: usize, width: usize, rng: &mut R) -> Mat3 {
    let pixels_to_unit = |p: f64, n: usize| if n > 1 { 2.0 * p / (n as f64 - 1.0) } else { 0.0 };
    match kind {
        TransformKind::None => Mat3::IDENTITY,
        TransformKind::FullRot => expm3(&GENERATORS[2].scale(rng.random_range(-PI..=PI))),
        TransformKind::PartialRot => expm3(&GENERATORS[2].scale(rng.random_range(-FRAC_PI_2..=FRAC_PI_2))),
        TransformKind::Translate => {
            let dx = rng.random_range(-8.0..=8.0);
            let dy = rng.random_range(-8.0..=8.0);
            let mut t = Mat3::IDENTITY;
            t.0[0][2] = pixels_to_unit(dx, width);
            t.0[1][2] = pixels_to_unit(dy, height);
            t
        }
        TransformKind::Scale => {
            let s = rng.random_range(-std::f64::consts::LN_2..=std::f64::consts::LN_2).exp();
            Mat3([[s, 0.0, 0.0], [0.0, s, 0.0], [0.0, 0.0, 1.0]])
        }
    }
}

/// Warps every image once by an independently drawn transform.
pub fn apply_transform(d: &Dataset, t: TransformSpec) -> Result<Dataset> {
    let DatasetKind::Images { height, width } = d.kind else {
        return Err(Error::Config("transforms apply to image datasets only".into()));
    };
    if t.kind == TransformKind::None {
        return Ok(d.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
    let mut inputs = Mat::zeros(d.len(), height * width);
    for n in 0..d.len() {
        let m = draw_transform(t.kind, height, width, &mut rng);
        let warped = warp_image(&d.image(n)?, &m)?;
        for (dst, v) in inputs.row_mut(n).iter_mut().zip(warped.data()) {
            *dst = v.clamp(0.0, 1.0);
        }
    }
    let provenance = format!("{} {:?} seed={}", d.provenance, t.kind, t.seed);
    Dataset::new(d.kind, inputs, d.labels.clone(), d.classes, provenance)
}

/// `n` distinct indices out of `0..total`, uniformly without replacement.
pub fn subset_indices(total: usize, n: usize, seed: u64) -> Result<Vec<usize>> {
    if n > total {
        return Err(Error::Config(format!("cannot draw {n} of {total} data")));
    }
    Ok(sample(&mut ChaCha8Rng::seed_from_u64(seed), total, n).into_vec())
}

pub fn subset(d: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    let mut s = d.select(&subset_indices(d.len(), n, seed)?)?;
    s.provenance = format!("{} subset n={n} seed={seed}", d.provenance);
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_is_reproducible_and_balanced() {
        let a = gen_toy(3, 200).unwrap();
        assert_eq!(a, gen_toy(3, 200).unwrap());
        assert_ne!(a.inputs, gen_toy(4, 200).unwrap().inputs);
        assert_eq!(a.labels.iter().filter(|&&y| y == 0).count(), 100);
        assert!(gen_toy(0, 1).is_err());
    }

    #[test]
    fn toy_geometry() {
        let d = gen_toy(0, 400).unwrap();
        for r in 0..d.len() {
            let (x, y) = (d.inputs[(r, 0)], d.inputs[(r, 1)]);
            let rad = x.hypot(y);
            assert!((rad - (d.labels[r] + 1) as f64).abs() < 0.4);
            assert!(y.atan2(x).abs() < FRAC_PI_3 + 0.5);
        }
    }

    #[test]
    fn image_fixture_is_valid() {
        let d = gen_image_fixture(1, 9, 8, 3).unwrap();
        assert_eq!(d.kind, DatasetKind::Images { height: 8, width: 8 });
        assert_eq!(d.labels, vec![0, 1, 2, 0, 1, 2, 0, 1, 2]);
        assert!(d.inputs.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(d, gen_image_fixture(1, 9, 8, 3).unwrap());
    }

    #[test]
    fn polar_examples() {
        let inputs = Mat::from_vec(3, 2, vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let d = Dataset::new(DatasetKind::Points2D, inputs, vec![0, 1, 0], 2, String::new()).unwrap();
        let p = to_polar(&d).unwrap();
        assert_eq!(p.inputs.row(0), &[1.0, 1.0, 0.0]);
        assert_eq!(p.inputs.row(1), &[1.0, 0.0, 1.0]);
        assert_eq!(p.inputs.row(2), &[0.0, 1.0, 0.0]);
        assert!(to_polar(&p).is_err());
    }

    fn fixture() -> (Vec<u8>, Vec<u8>) {
        let mut images = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2];
        images.extend_from_slice(&[0, 255, 51, 102, 1, 2, 3, 4]);
        let labels = vec![0, 0, 8, 1, 0, 0, 0, 2, 7, 3];
        (images, labels)
    }

    #[test]
    fn idx_fixture_parses_exactly() {
        let (i, l) = fixture();
        let d = parse_idx(&i, &l).unwrap();
        assert_eq!(d.kind, DatasetKind::Images { height: 2, width: 2 });
        assert_eq!(d.inputs.row(0), &[0.0, 1.0, 0.2, 0.4]);
        assert_eq!(d.inputs[(1, 3)], 4.0 / 255.0);
        assert_eq!(d.labels, vec![7, 3]);
        assert_eq!(d.classes, 10);
        assert_eq!(encode_idx(&d).unwrap(), (i, l));
    }

    #[test]
    fn idx_errors_name_the_field() {
        let (mut i, l) = fixture();
        let field = |r: Result<Dataset>| match r {
            Err(Error::Format { field, .. }) => field,
            other => panic!("expected a format error, got {other:?}"),
        };
        assert_eq!(field(parse_idx(&i[..10], &l)), "images rows");
        assert_eq!(field(parse_idx(&i[..20], &l)), "images pixels");
        assert_eq!(field(parse_idx(&i, &l[..9])), "labels data");
        let mut bad = l.clone();
        bad[7] = 3;
        assert_eq!(field(parse_idx(&i, &bad)), "labels count");
        bad = l.clone();
        bad[3] = 3;
        assert_eq!(field(parse_idx(&i, &bad)), "labels magic");
        i[3] = 1;
        assert_eq!(field(parse_idx(&i, &l)), "images magic");
    }

    #[test]
    fn idx_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (i, l) = fixture();
        let (pi, pl) = (dir.path().join("img"), dir.path().join("lab"));
        std::fs::write(&pi, &i).unwrap();
        std::fs::write(&pl, &l).unwrap();
        let d = load_idx(&pi, &pl).unwrap();
        let (qi, ql) = (dir.path().join("img2"), dir.path().join("lab2"));
        write_idx(&d, &qi, &ql).unwrap();
        assert_eq!(std::fs::read(qi).unwrap(), i);
        assert_eq!(std::fs::read(ql).unwrap(), l);
    }

    #[test]
    fn dataset_cache_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let d = gen_toy(1, 10).unwrap();
        let p = dir.path().join("toy.json");
        d.save(&p).unwrap();
        assert_eq!(Dataset::load(&p).unwrap(), d);
    }

    fn blob(n: usize) -> Dataset {
        let c = (n as f64 - 1.0) / 2.0;
        let img = Mat::from_fn(n, n, |i, j| {
            let r2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
            (-(r2) / (2.0 * (n as f64 / 8.0).powi(2))).exp()
        });
        let inputs = Mat::from_vec(1, n * n, img.into_data()).unwrap();
        Dataset::new(DatasetKind::Images { height: n, width: n }, inputs, vec![0], 10, String::new()).unwrap()
    }

    #[test]
    fn none_transform_is_identity() {
        let d = blob(8);
        assert_eq!(apply_transform(&d, TransformSpec { kind: TransformKind::None, seed: 3 }).unwrap(), d);
    }

    #[test]
    fn integer_translation_is_an_index_shift() {
        let n = 28;
        let d = blob(n);
        let img = d.image(0).unwrap();
        let mut found = 0;
        for seed in 0..50_000u64 {
            let t = draw_transform(TransformKind::Translate, n, n, &mut ChaCha8Rng::seed_from_u64(seed));
            let (dx, dy) = (t.0[0][2] * (n as f64 - 1.0) / 2.0, t.0[1][2] * (n as f64 - 1.0) / 2.0);
            let (rx, ry) = (dx.round(), dy.round());
            if (dx - rx).abs() > 1e-2 || (dy - ry).abs() > 1e-2 {
                continue;
            }
            found += 1;
            let mut one = Dataset::new(d.kind, d.inputs.clone(), vec![0], 10, String::new()).unwrap();
            one = apply_transform(&one, TransformSpec { kind: TransformKind::Translate, seed }).unwrap();
            let out = one.image(0).unwrap();
            let blend = 4e-2 * img.max_abs();
            for i in 0..n {
                for j in 0..n {
                    let (si, sj) = (i as f64 - ry, j as f64 - rx);
                    let expect = if si >= 0.0 && sj >= 0.0 && si < n as f64 && sj < n as f64 {
                        img[(si as usize, sj as usize)]
                    } else {
                        0.0
                    };
                    assert!((out[(i, j)] - expect).abs() < blend + 1e-6, "seed {seed} at ({i},{j})");
                }
            }
        }
        assert!(found > 0);
    }

    #[test]
    fn rotation_preserves_mass() {
        let d = blob(28);
        let mass = d.inputs.data().iter().sum::<f64>();
        let once = apply_transform(&d, TransformSpec { kind: TransformKind::FullRot, seed: 1 }).unwrap();
        let twice = apply_transform(&once, TransformSpec { kind: TransformKind::FullRot, seed: 2 }).unwrap();
        for x in [&once, &twice] {
            let m = x.inputs.data().iter().sum::<f64>();
            assert!((m - mass).abs() / mass < 0.02, "{m} vs {mass}");
        }
    }

    #[test]
    fn transforms_keep_labels_and_size() {
        let mut d = blob(8);
        d = d.select(&[0, 0, 0]).unwrap();
        for kind in [TransformKind::FullRot, TransformKind::PartialRot, TransformKind::Translate, TransformKind::Scale] {
            let t = apply_transform(&d, TransformSpec { kind, seed: 5 }).unwrap();
            assert_eq!(t.labels, d.labels);
            assert_eq!(t.len(), 3);
            assert_eq!(t, apply_transform(&d, TransformSpec { kind, seed: 5 }).unwrap());
        }
    }

    #[test]
    fn subsets() {
        let d = gen_toy(0, 20).unwrap();
        let s = subset_indices(20, 20, 1).unwrap();
        let mut sorted = s.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..20).collect::<Vec<_>>());
        let s = subset_indices(20, 7, 1).unwrap();
        let mut u = s.clone();
        u.sort_unstable();
        u.dedup();
        assert_eq!(u.len(), 7);
        assert_eq!(subset(&d, 7, 1).unwrap(), subset(&d, 7, 1).unwrap());
        assert!(subset(&d, 21, 1).is_err());
    }
}
