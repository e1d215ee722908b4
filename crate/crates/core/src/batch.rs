//! Augmented mini-batches and per-datum sample averaging.
//!
//! Every datum draws its own noise from a stream keyed by
//! `(seed, stream, datum index)`, so results do not depend on how data are
//! split into chunks or distributed over threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::{draw_eps, AugmentationParams};
use crate::error::{Error, Result};
use crate::linalg::{mean_rows, Mat};

/// Identifies one family of noise streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NoiseKey {
    pub seed: u64,
    pub stream: u64,
}

impl NoiseKey {
    pub fn new(seed: u64, stream: u64) -> Self {
        NoiseKey { seed, stream }
    }

    /// Derived key for a sub-purpose, e.g. one training step.
    pub fn child(self, tag: u64) -> Self {
        NoiseKey { seed: self.seed, stream: mix(self.stream ^ mix(tag.wrapping_add(0x5851_f42d))) }
    }

    /// Random stream of datum `index`.
    pub fn rng(self, index: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(mix(self.seed ^ mix(self.stream ^ mix(index))))
    }
}

/// SplitMix64 finaliser.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// How augmentation enters a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct AugSpec<'a> {
    pub params: &'a AugmentationParams,
    /// Samples per datum.
    pub samples: usize,
    pub antithetic: bool,
    pub key: NoiseKey,
}

impl AugSpec<'_> {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::Config("at least one augmentation sample is required".into()));
        }
        if self.antithetic && self.samples % 2 == 1 {
            return Err(Error::Config(format!(
                "antithetic sampling needs an even sample count, got {}",
                self.samples
            )));
        }
        Ok(())
    }
}

/// A chunk of data expanded into `S` augmented rows per datum.
#[derive(Clone, Debug)]
pub struct AugmentedBatch {
    /// `(n·S) × D`, rows of datum `j` at `j·S .. (j+1)·S`.
    pub x: Mat,
    /// `∂x'/∂ηᵢ`, one matrix per component when requested.
    pub dx: Vec<Mat>,
    pub samples: usize,
    /// Rows come in antithetic pairs.
    pub paired: bool,
}

impl AugmentedBatch {
    pub fn data_count(&self) -> usize {
        self.x.rows() / self.samples
    }
}

/// Builds the augmented rows for data `indices` of `inputs`.
pub fn augment_batch(inputs: &Mat, indices: &[usize], aug: Option<&AugSpec>, tangents: bool) -> Result<AugmentedBatch> {
    let d = inputs.cols();
    let Some(spec) = aug else {
        let mut x = Mat::zeros(indices.len(), d);
        for (r, &n) in indices.iter().enumerate() {
            x.row_mut(r).copy_from_slice(inputs.row(n));
        }
        return Ok(AugmentedBatch { x, dx: Vec::new(), samples: 1, paired: false });
    };
    spec.validate()?;
    if spec.params.family.input_dim() != d {
        return Err(Error::Shape(format!(
            "augmentation expects inputs of dimension {}, data have {}",
            spec.params.family.input_dim(),
            d
        )));
    }
    let (s, k) = (spec.samples, spec.params.k());
    let rows = indices.len() * s;
    let mut x = Mat::zeros(rows, d);
    let mut dx = if tangents { vec![Mat::zeros(rows, d); k] } else { Vec::new() };
    for (j, &n) in indices.iter().enumerate() {
        let eps = draw_eps(&mut spec.key.rng(n as u64), k, s, spec.antithetic)?;
        let src = inputs.row(n);
        for t in 0..s {
            let r = j * s + t;
            if tangents {
                let mut views: Vec<&mut [f64]> = dx.iter_mut().map(|m| m.row_mut(r)).collect();
                spec.params.apply_with_tangents(src, eps.row(t), x.row_mut(r), &mut views)?;
            } else {
                spec.params.apply(src, eps.row(t), x.row_mut(r))?;
            }
        }
    }
    Ok(AugmentedBatch { x, dx, samples: s, paired: spec.antithetic })
}

/// Means over consecutive groups of `s` rows.
pub fn group_mean(m: &Mat, s: usize, paired: bool) -> Mat {
    assert!(s >= 1 && m.rows() % s == 0);
    if s == 1 {
        return m.clone();
    }
    let n = m.rows() / s;
    let mut out = Mat::zeros(n, m.cols());
    for j in 0..n {
        mean_rows(m, j * s, s, paired, out.row_mut(j));
    }
    out
}

/// `[a | fill]`: appends one constant column.
pub fn with_constant_column(a: &Mat, fill: f64) -> Mat {
    let (r, c) = a.shape();
    Mat::from_fn(r, c + 1, |i, j| if j < c { a[(i, j)] } else { fill })
}

/// Splits `0..n` into consecutive ranges of at most `chunk` elements.
pub fn chunk_ranges(n: usize, chunk: usize) -> Vec<std::ops::Range<usize>> {
    let chunk = chunk.max(1);
    (0..n).step_by(chunk).map(|s| s..(s + chunk).min(n)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::Family;
    use rand::Rng;

    #[test]
    fn noise_streams_depend_on_all_key_parts() {
        let k = NoiseKey::new(1, 2);
        let draw = |key: NoiseKey, i: u64| key.rng(i).random::<u64>();
        assert_eq!(draw(k, 3), draw(k, 3));
        assert_ne!(draw(k, 3), draw(k, 4));
        assert_ne!(draw(k, 3), draw(NoiseKey::new(2, 2), 3));
        assert_ne!(draw(k, 3), draw(k.child(0), 3));
        assert_ne!(draw(k.child(0), 3), draw(k.child(1), 3));
    }

    #[test]
    fn batch_noise_is_chunking_invariant() {
        let inputs = Mat::from_fn(5, 2, |i, j| (i * 2 + j) as f64 * 0.1 + 0.2);
        let params = AugmentationParams::new(Family::PointRotation, vec![0.7]).unwrap();
        let spec = AugSpec { params: &params, samples: 4, antithetic: true, key: NoiseKey::new(3, 0) };
        let all = augment_batch(&inputs, &[0, 1, 2, 3, 4], Some(&spec), true).unwrap();
        let part = augment_batch(&inputs, &[3, 4], Some(&spec), true).unwrap();
        assert_eq!(&all.x.data()[12 * 2..], part.x.data());
        assert_eq!(&all.dx[0].data()[12 * 2..], part.dx[0].data());
    }

    #[test]
    fn plain_batch_copies_rows() {
        let inputs = Mat::from_fn(3, 2, |i, j| (i * 2 + j) as f64);
        let b = augment_batch(&inputs, &[2, 0], None, false).unwrap();
        assert_eq!(b.x.data(), &[4.0, 5.0, 0.0, 1.0]);
        assert_eq!(b.samples, 1);
    }

    #[test]
    fn group_mean_of_identical_rows_is_exact() {
        let m = Mat::from_fn(6, 2, |_, j| 0.1 + j as f64 / 3.0);
        let g = group_mean(&m, 3, false);
        assert_eq!(g.rows(), 2);
        assert_eq!(g.row(1), m.row(0));
    }

    #[test]
    fn chunks_cover_range() {
        assert_eq!(chunk_ranges(5, 2), vec![0..2, 2..4, 4..5]);
        assert!(chunk_ranges(0, 3).is_empty());
    }
}
