//! Vector geometry on the unit hypersphere.
//!
//! Every embedding produced by the crate lives on the unit sphere, so squared
//! Euclidean distances are bounded by `[0, 4]` and can be computed from a
//! single dot product: `|u - v|^2 = 2 - 2 u.v`.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Norms below this are treated as a collapsed (degenerate) output.
pub const ZERO_NORM: f64 = 1e-12;

/// Tolerance on the unit-norm invariant of an [`Embedding`].
pub const UNIT_TOLERANCE: f64 = 1e-6;

/// A point on the unit hypersphere.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// Wraps values that are already unit norm (within [`UNIT_TOLERANCE`]).
    ///
    /// Falls back to renormalizing when the input drifted off the sphere.
    pub fn from_unit(values: Vec<f64>) -> Result<Self> {
        let sq: f64 = values.iter().map(|x| x * x).sum();
        if (sq - 1.0).abs() <= UNIT_TOLERANCE {
            Ok(Embedding(values))
        } else {
            l2_normalize(&values)
        }
    }

    pub fn dot(&self, other: &Embedding) -> Result<f64> {
        check_dims(self.dim(), other.dim())?;
        Ok(dot(&self.0, &other.0))
    }
}

impl AsRef<[f64]> for Embedding {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            check_dims(cols, r.as_ref().len())?;
            data.extend_from_slice(r.as_ref());
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics, and a zero-column matrix has no meaningful rows
        let cols = self.cols.max(1);
        self.data.chunks_exact(cols).take(self.rows)
    }

    /// Copies the selected rows into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }
}

/// Symmetric matrix of squared distances between the members of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    size: usize,
    entries: Vec<f64>,
}

impl DistanceMatrix {
    /// Builds a matrix from row-major entries. Used for hand-constructed
    /// distance structures in mining and tests.
    pub fn from_entries(size: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != size * size {
            return Err(Error::ShapeMismatch(format!(
                "{} entries for a {size}x{size} distance matrix",
                entries.len()
            )));
        }
        Ok(DistanceMatrix { size, entries })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.size + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.size..(i + 1) * self.size]
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

fn check_dims(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimMismatch { expected, got });
    }
    Ok(())
}

/// Scales `v` onto the unit sphere.
pub fn l2_normalize(v: &[f64]) -> Result<Embedding> {
    let n = norm(v);
    if !(n >= ZERO_NORM) {
        return Err(Error::ZeroVector { norm: n });
    }
    Ok(Embedding(v.iter().map(|x| x / n).collect()))
}

/// Plain `sum (u_i - v_i)^2`.
pub fn squared_distance(u: &Embedding, v: &Embedding) -> Result<f64> {
    check_dims(u.dim(), v.dim())?;
    Ok(sq_dist(&u.0, &v.0))
}

#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

/// All-pairs squared distances via `2 - 2 u.v`, clamped at zero.
///
/// The diagonal is exactly zero and the result is exactly symmetric: both
/// triangles evaluate the same dot product in the same summation order.
pub fn pairwise_sqdist(batch: &[Embedding]) -> Result<DistanceMatrix> {
    let first = batch.first().ok_or(Error::EmptyInput)?;
    let dim = first.dim();
    for e in batch {
        check_dims(dim, e.dim())?;
    }
    let size = batch.len();
    let mut entries = vec![0.0; size * size];
    entries
        .par_chunks_mut(size)
        .enumerate()
        .for_each(|(i, row)| {
            let ei = &batch[i].0;
            for (j, out) in row.iter_mut().enumerate() {
                if i != j {
                    *out = (2.0 - 2.0 * dot(ei, &batch[j].0)).max(0.0);
                }
            }
        });
    Ok(DistanceMatrix { size, entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn e(v: &[f64]) -> Embedding {
        l2_normalize(v).unwrap()
    }

    #[test]
    fn normalize_examples() {
        let n = l2_normalize(&[3.0, 4.0]).unwrap();
        assert!((n.values()[0] - 0.6).abs() < 1e-15);
        assert!((n.values()[1] - 0.8).abs() < 1e-15);
        assert_eq!(l2_normalize(&[1.0, 0.0]).unwrap().values(), &[1.0, 0.0]);
        assert!(matches!(
            l2_normalize(&[0.0, 0.0]),
            Err(Error::ZeroVector { .. })
        ));
        assert!(matches!(
            l2_normalize(&[1e-13, 0.0]),
            Err(Error::ZeroVector { .. })
        ));
    }

    #[test]
    fn distance_examples() {
        let a = e(&[1.0, 0.0]);
        assert_eq!(squared_distance(&a, &a).unwrap(), 0.0);
        assert_eq!(squared_distance(&a, &e(&[-1.0, 0.0])).unwrap(), 4.0);
        assert_eq!(squared_distance(&a, &e(&[0.0, 1.0])).unwrap(), 2.0);
        assert!(matches!(
            squared_distance(&a, &e(&[1.0, 0.0, 0.0])),
            Err(Error::DimMismatch { .. })
        ));
    }

    #[test]
    fn pairwise_examples() {
        let one = pairwise_sqdist(&[e(&[0.3, 0.4])]).unwrap();
        assert_eq!(one.size(), 1);
        assert_eq!(one.get(0, 0), 0.0);

        let two = pairwise_sqdist(&[e(&[1.0, 0.0]), e(&[0.0, 1.0])]).unwrap();
        assert_eq!(two.row(0), &[0.0, 2.0]);
        assert_eq!(two.row(1), &[2.0, 0.0]);

        assert!(pairwise_sqdist(&[e(&[1.0, 0.0]), e(&[1.0, 0.0, 0.0])]).is_err());
        assert!(pairwise_sqdist(&[]).is_err());
    }

    #[test]
    fn pairwise_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let batch: Vec<Embedding> = (0..8)
                .map(|_| {
                    e(&(0..5)
                        .map(|_| rng.random_range(-1.0..1.0))
                        .collect::<Vec<_>>())
                })
                .collect();
            let m = pairwise_sqdist(&batch).unwrap();
            for i in 0..8 {
                for j in 0..8 {
                    let mut acc = 0.0;
                    for k in 0..5 {
                        let d = batch[i].values()[k] - batch[j].values()[k];
                        acc += d * d;
                    }
                    assert!((m.get(i, j) - acc).abs() < 1e-9);
                }
            }
        }
    }

    fn unit_vec(dim: usize) -> impl Strategy<Value = Embedding> {
        proptest::collection::vec(-1.0f64..1.0, dim)
            .prop_filter("nonzero", |v| norm(v) > 1e-3)
            .prop_map(|v| l2_normalize(&v).unwrap())
    }

    proptest! {
        #[test]
        fn distance_bounded(a in unit_vec(6), b in unit_vec(6)) {
            let d = squared_distance(&a, &b).unwrap();
            prop_assert!((0.0..=4.0 + 1e-9).contains(&d));
        }

        #[test]
        fn pairwise_symmetric(batch in proptest::collection::vec(unit_vec(4), 1..12)) {
            let m = pairwise_sqdist(&batch).unwrap();
            for i in 0..batch.len() {
                prop_assert_eq!(m.get(i, i), 0.0);
                for j in 0..batch.len() {
                    prop_assert_eq!(m.get(i, j).to_bits(), m.get(j, i).to_bits());
                    prop_assert!(m.get(i, j) <= 4.0 + 1e-9);
                }
            }
        }

        #[test]
        fn normalize_idempotent(v in proptest::collection::vec(-10.0f64..10.0, 1..20)) {
            prop_assume!(norm(&v) > 1e-6);
            let once = l2_normalize(&v).unwrap();
            let twice = l2_normalize(once.values()).unwrap();
            for (a, b) in once.values().iter().zip(twice.values()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            prop_assert!((norm(once.values()) - 1.0).abs() < UNIT_TOLERANCE);
        }
    }
}
