//! Verification metrics over pairs of embeddings.
//!
//! A pair is accepted at threshold `d` when its squared distance is `<= d`.
//! `VAL(d)` is the accepted fraction of same-identity pairs and `FAR(d)` the
//! accepted fraction of different-identity pairs. Inclusive comparison makes
//! both exactly nondecreasing in `d`.

use std::collections::{HashMap, HashSet};
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{l2_normalize, squared_distance, Embedding};
use crate::mining::IdentityId;

pub const NUM_FOLDS: usize = 10;

const QUANT_MAGIC: &[u8; 4] = b"TQ08";
const QUANT_SCALE: f64 = 127.0;

pub type Pair = (usize, usize);

/// Same-identity and different-identity sample pairs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PairSet {
    pub same: Vec<Pair>,
    pub diff: Vec<Pair>,
}

fn unordered((i, j): Pair) -> Pair {
    (i.min(j), i.max(j))
}

impl PairSet {
    pub fn new(same: Vec<Pair>, diff: Vec<Pair>) -> Result<Self> {
        let set = PairSet { same, diff };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(&(i, _)) = self.same.iter().chain(&self.diff).find(|(i, j)| i == j) {
            return Err(Error::Parse(format!(
                "pair ({i}, {i}) pairs a sample with itself"
            )));
        }
        let same: HashSet<Pair> = self.same.iter().copied().map(unordered).collect();
        if let Some(p) = self.diff.iter().find(|p| same.contains(&unordered(**p))) {
            return Err(Error::Parse(format!(
                "pair {p:?} listed as both same and diff"
            )));
        }
        Ok(())
    }

    /// Every unordered pair of distinct samples, classified by label.
    pub fn all_pairs(labels: &[IdentityId]) -> Self {
        let mut set = PairSet::default();
        for i in 0..labels.len() {
            for j in i + 1..labels.len() {
                if labels[i] == labels[j] {
                    set.same.push((i, j));
                } else {
                    set.diff.push((i, j));
                }
            }
        }
        set
    }

    /// All same-identity pairs plus an equal number of different-identity
    /// pairs drawn without replacement.
    pub fn balanced(labels: &[IdentityId], seed: u64) -> Self {
        let mut all = Self::all_pairs(labels);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        all.diff.shuffle(&mut rng);
        all.diff.truncate(all.same.len());
        all.diff.sort_unstable();
        all
    }

    pub fn len(&self) -> usize {
        self.same.len() + self.diff.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Parses `i,j,same|diff` lines.
    pub fn parse(text: &str) -> Result<Self> {
        let mut set = PairSet::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            let [i, j, kind] = fields[..] else {
                return Err(Error::Parse(format!(
                    "pair line {line:?}: expected 3 fields"
                )));
            };
            let parse = |s: &str| {
                s.parse::<usize>()
                    .map_err(|e| Error::Parse(format!("pair line {line:?}: {e}")))
            };
            let pair = (parse(i)?, parse(j)?);
            match kind {
                "same" => set.same.push(pair),
                "diff" => set.diff.push(pair),
                other => {
                    return Err(Error::Parse(format!(
                        "pair line {line:?}: unknown kind {other:?}"
                    )))
                }
            }
        }
        set.validate()?;
        Ok(set)
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        for (i, j) in &self.same {
            writeln!(w, "{i},{j},same")?;
        }
        for (i, j) in &self.diff {
            writeln!(w, "{i},{j},diff")?;
        }
        Ok(())
    }
}

/// Squared distance per pair, looked up in either orientation.
#[derive(Debug, Clone, Default)]
pub struct DistanceMap(HashMap<Pair, f64>);

impl DistanceMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, pair: Pair, d: f64) {
        self.0.insert(unordered(pair), d);
    }

    pub fn get(&self, pair: Pair) -> Option<f64> {
        self.0.get(&unordered(pair)).copied()
    }

    /// Distances of every pair in `pairs`, computed from `embeddings`.
    pub fn from_embeddings(embeddings: &[Embedding], pairs: &PairSet) -> Result<Self> {
        Self::from_fn(pairs, |i, j| {
            let a = embeddings.get(i).ok_or(Error::MissingDistance(i, j))?;
            let b = embeddings.get(j).ok_or(Error::MissingDistance(i, j))?;
            squared_distance(a, b)
        })
    }

    pub fn from_fn(
        pairs: &PairSet,
        mut f: impl FnMut(usize, usize) -> Result<f64>,
    ) -> Result<Self> {
        let mut map = DistanceMap::new();
        for &(i, j) in pairs.same.iter().chain(&pairs.diff) {
            map.insert((i, j), f(i, j)?);
        }
        Ok(map)
    }

    fn lookup(&self, pairs: &[Pair]) -> Result<Vec<f64>> {
        pairs
            .iter()
            .map(|&(i, j)| self.get((i, j)).ok_or(Error::MissingDistance(i, j)))
            .collect()
    }
}

/// Sorted same/diff distances; counting accepts is a binary search.
struct SortedDistances {
    same: Vec<f64>,
    diff: Vec<f64>,
}

impl SortedDistances {
    fn new(dists: &DistanceMap, pairs: &PairSet) -> Result<Self> {
        if pairs.same.is_empty() {
            return Err(Error::EmptyPairSet("no same-identity pairs"));
        }
        if pairs.diff.is_empty() {
            return Err(Error::EmptyPairSet("no different-identity pairs"));
        }
        let mut same = dists.lookup(&pairs.same)?;
        let mut diff = dists.lookup(&pairs.diff)?;
        same.sort_by(f64::total_cmp);
        diff.sort_by(f64::total_cmp);
        Ok(SortedDistances { same, diff })
    }

    fn val_far(&self, d: f64) -> (f64, f64) {
        (
            accepted(&self.same, d) as f64 / self.same.len() as f64,
            accepted(&self.diff, d) as f64 / self.diff.len() as f64,
        )
    }
}

fn accepted(sorted: &[f64], d: f64) -> usize {
    sorted.partition_point(|&x| x <= d)
}

pub fn compute_val_far(dists: &DistanceMap, pairs: &PairSet, d: f64) -> Result<(f64, f64)> {
    Ok(SortedDistances::new(dists, pairs)?.val_far(d))
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerificationReport {
    pub thresholds: Vec<f64>,
    pub val: Vec<f64>,
    pub far: Vec<f64>,
}

impl VerificationReport {
    pub fn len(&self) -> usize {
        self.thresholds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.thresholds.is_empty()
    }

    /// `threshold,val,far` with a header.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "threshold,val,far")?;
        for k in 0..self.len() {
            writeln!(w, "{},{},{}", self.thresholds[k], self.val[k], self.far[k])?;
        }
        Ok(())
    }
}

pub fn roc_sweep(
    dists: &DistanceMap,
    pairs: &PairSet,
    thresholds: &[f64],
) -> Result<VerificationReport> {
    if thresholds.windows(2).any(|w| !(w[0] <= w[1])) {
        return Err(Error::Parse("thresholds must be ascending".into()));
    }
    let sorted = SortedDistances::new(dists, pairs)?;
    let (val, far) = thresholds.iter().map(|&d| sorted.val_far(d)).unzip();
    Ok(VerificationReport {
        thresholds: thresholds.to_vec(),
        val,
        far,
    })
}

/// `0.000, 0.001, ..., 4.000`.
pub fn default_threshold_grid() -> Vec<f64> {
    (0..=4000).map(|i| i as f64 / 1000.0).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatingPoint {
    pub val: f64,
    pub far: f64,
    pub threshold: f64,
    /// False when no threshold reached a FAR at or below the target.
    pub qualified: bool,
}

/// VAL at the largest threshold whose FAR does not exceed `target_far`.
pub fn val_at_far(report: &VerificationReport, target_far: f64) -> Result<OperatingPoint> {
    if report.is_empty() {
        return Err(Error::EmptyReport);
    }
    let best = (0..report.len())
        .rev()
        .find(|&k| report.far[k] <= target_far);
    Ok(match best {
        Some(k) => OperatingPoint {
            val: report.val[k],
            far: report.far[k],
            threshold: report.thresholds[k],
            qualified: true,
        },
        None => OperatingPoint {
            val: 0.0,
            far: report.far[0],
            threshold: report.thresholds[0],
            qualified: false,
        },
    })
}

/// VAL at the best threshold with FAR at or below `target_far`, searched over
/// every real threshold rather than a grid. Differs from a grid sweep only
/// when the grid is too coarse for the distances involved.
pub fn exact_val_at_far(
    dists: &DistanceMap,
    pairs: &PairSet,
    target_far: f64,
) -> Result<OperatingPoint> {
    let sorted = SortedDistances::new(dists, pairs)?;
    let n = sorted.diff.len();
    // Largest k with k / n <= target_far.
    let mut k = ((target_far * n as f64).floor().max(0.0) as usize).min(n);
    while k > 0 && k as f64 / n as f64 > target_far {
        k -= 1;
    }
    if k == n {
        let t = sorted
            .same
            .last()
            .copied()
            .unwrap_or(0.0)
            .max(sorted.diff[n - 1]);
        return Ok(OperatingPoint {
            val: 1.0,
            far: 1.0,
            threshold: t,
            qualified: true,
        });
    }
    // Accept everything strictly below the (k+1)-th smallest diff distance.
    let limit = sorted.diff[k];
    let same = sorted.same.partition_point(|&x| x < limit);
    let diff = sorted.diff.partition_point(|&x| x < limit);
    let below = |v: &[f64], c: usize| if c > 0 { Some(v[c - 1]) } else { None };
    let threshold = match (below(&sorted.same, same), below(&sorted.diff, diff)) {
        (Some(a), Some(b)) => a.max(b),
        (Some(a), None) | (None, Some(a)) => a,
        (None, None) => 0.0,
    };
    Ok(OperatingPoint {
        val: same as f64 / sorted.same.len() as f64,
        far: diff as f64 / n as f64,
        threshold,
        qualified: true,
    })
}

/// Fold assignment (0..10) for each same and diff pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Folds {
    pub same: Vec<usize>,
    pub diff: Vec<usize>,
}

impl Folds {
    /// Shuffles each list and deals it round-robin, so every fold gets an
    /// equal share (within one) of same and diff pairs.
    pub fn balanced(pairs: &PairSet, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut deal = |n: usize| {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let mut folds = vec![0; n];
            for (rank, &i) in order.iter().enumerate() {
                folds[i] = rank % NUM_FOLDS;
            }
            folds
        };
        let same = deal(pairs.same.len());
        let diff = deal(pairs.diff.len());
        Folds { same, diff }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TenfoldReport {
    pub mean_accuracy: f64,
    /// Standard error of the mean over folds (sample standard deviation / sqrt(10)).
    pub std_error: f64,
    pub fold_accuracies: Vec<f64>,
    pub fold_thresholds: Vec<f64>,
}

impl TenfoldReport {
    pub fn threshold_span(&self) -> f64 {
        let lo = self
            .fold_thresholds
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        let hi = self
            .fold_thresholds
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        hi - lo
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "fold,threshold,accuracy")?;
        for (k, (t, a)) in self
            .fold_thresholds
            .iter()
            .zip(&self.fold_accuracies)
            .enumerate()
        {
            writeln!(w, "{k},{t},{a}")?;
        }
        writeln!(w, "mean,,{}", self.mean_accuracy)?;
        writeln!(w, "std_error,,{}", self.std_error)?;
        Ok(())
    }
}

/// For each fold, picks the grid threshold with the best same/different
/// accuracy on the other nine folds (lowest threshold on ties) and scores it
/// on the held-out fold.
pub fn tenfold_accuracy(
    dists: &DistanceMap,
    pairs: &PairSet,
    folds: &Folds,
    grid: &[f64],
) -> Result<TenfoldReport> {
    if grid.is_empty() {
        return Err(Error::BadPartition("empty threshold grid".into()));
    }
    if folds.same.len() != pairs.same.len() || folds.diff.len() != pairs.diff.len() {
        return Err(Error::BadPartition(
            "fold assignment does not cover every pair".into(),
        ));
    }
    if let Some(&f) = folds
        .same
        .iter()
        .chain(&folds.diff)
        .find(|&&f| f >= NUM_FOLDS)
    {
        return Err(Error::BadPartition(format!("fold index {f} out of range")));
    }
    let same = dists.lookup(&pairs.same)?;
    let diff = dists.lookup(&pairs.diff)?;

    let bucket = |values: &[f64], assign: &[usize]| {
        let mut out = vec![Vec::new(); NUM_FOLDS];
        for (&v, &f) in values.iter().zip(assign) {
            out[f].push(v);
        }
        for b in &mut out {
            b.sort_by(f64::total_cmp);
        }
        out
    };
    let same_by_fold = bucket(&same, &folds.same);
    let diff_by_fold = bucket(&diff, &folds.diff);
    if let Some(f) =
        (0..NUM_FOLDS).find(|&f| same_by_fold[f].is_empty() && diff_by_fold[f].is_empty())
    {
        return Err(Error::BadPartition(format!("fold {f} is empty")));
    }

    let correct = |f: usize, d: f64| -> usize {
        accepted(&same_by_fold[f], d) + diff_by_fold[f].len() - accepted(&diff_by_fold[f], d)
    };

    let mut fold_thresholds = Vec::with_capacity(NUM_FOLDS);
    let mut fold_accuracies = Vec::with_capacity(NUM_FOLDS);
    for test in 0..NUM_FOLDS {
        let mut best: Option<(usize, f64)> = None;
        for &d in grid {
            let score: usize = (0..NUM_FOLDS)
                .filter(|&f| f != test)
                .map(|f| correct(f, d))
                .sum();
            best = match best {
                Some((s, t)) if s > score || (s == score && t <= d) => Some((s, t)),
                _ => Some((score, d)),
            };
        }
        let (_, threshold) = best.expect("grid is nonempty");
        let total = same_by_fold[test].len() + diff_by_fold[test].len();
        fold_thresholds.push(threshold);
        fold_accuracies.push(correct(test, threshold) as f64 / total as f64);
    }

    let n = NUM_FOLDS as f64;
    let mean = fold_accuracies.iter().sum::<f64>() / n;
    let var = fold_accuracies
        .iter()
        .map(|a| (a - mean).powi(2))
        .sum::<f64>()
        / (n - 1.0);
    Ok(TenfoldReport {
        mean_accuracy: mean,
        std_error: (var / n).sqrt(),
        fold_accuracies,
        fold_thresholds,
    })
}

/// Symmetric linear int8 codes: `clamp(round(127 c), -127, 127)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantizedEmbedding {
    pub codes: Vec<i8>,
}

pub fn quantize(e: &Embedding) -> QuantizedEmbedding {
    QuantizedEmbedding {
        codes: e
            .values()
            .iter()
            .map(|&c| (c * QUANT_SCALE).round().clamp(-QUANT_SCALE, QUANT_SCALE) as i8)
            .collect(),
    }
}

/// Decodes and re-normalizes onto the sphere.
pub fn dequantize(q: &QuantizedEmbedding) -> Result<Embedding> {
    let v: Vec<f64> = q.codes.iter().map(|&c| c as f64 / QUANT_SCALE).collect();
    l2_normalize(&v)
}

/// TQ08 layout: `"TQ08" | count u32 | dim u32 | i8 codes row-major`.
pub fn encode_quantized(codes: &[QuantizedEmbedding]) -> Result<Vec<u8>> {
    let dim = codes.first().map_or(0, |q| q.codes.len());
    let mut out = Vec::with_capacity(12 + codes.len() * dim);
    out.extend_from_slice(QUANT_MAGIC);
    out.extend_from_slice(&(codes.len() as u32).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    for q in codes {
        if q.codes.len() != dim {
            return Err(Error::DimMismatch {
                expected: dim,
                got: q.codes.len(),
            });
        }
        out.extend(q.codes.iter().map(|&c| c as u8));
    }
    Ok(out)
}

pub fn decode_quantized(bytes: &[u8]) -> Result<Vec<QuantizedEmbedding>> {
    if bytes.len() < 12 || &bytes[..4] != QUANT_MAGIC {
        return Err(Error::CorruptFile("bad TQ08 header".into()));
    }
    let count = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let dim = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    if count.checked_mul(dim).and_then(|n| n.checked_add(12)) != Some(bytes.len()) {
        return Err(Error::CorruptFile(
            "TQ08 length does not match shape".into(),
        ));
    }
    if dim == 0 {
        return Ok(vec![QuantizedEmbedding { codes: Vec::new() }; count]);
    }
    Ok(bytes[12..]
        .chunks_exact(dim)
        .map(|row| QuantizedEmbedding {
            codes: row.iter().map(|&b| b as i8).collect(),
        })
        .collect())
}

/// Report over the default grid for every pair implied by `labels`.
pub fn report_for_labels(
    embeddings: &[Embedding],
    labels: &[IdentityId],
) -> Result<(PairSet, VerificationReport)> {
    let pairs = PairSet::all_pairs(labels);
    let dists = DistanceMap::from_embeddings(embeddings, &pairs)?;
    let report = roc_sweep(&dists, &pairs, &default_threshold_grid())?;
    Ok((pairs, report))
}

/// Exact operating point over every pair implied by `labels`.
pub fn operating_point_for_labels(
    embeddings: &[Embedding],
    labels: &[IdentityId],
    target_far: f64,
) -> Result<OperatingPoint> {
    let pairs = PairSet::all_pairs(labels);
    let dists = DistanceMap::from_embeddings(embeddings, &pairs)?;
    exact_val_at_far(&dists, &pairs, target_far)
}

/// Random pair subset for quick checks: `n` same and `n` diff pairs, drawn
/// with replacement.
pub fn sample_pairs(labels: &[IdentityId], n: usize, seed: u64) -> PairSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = PairSet::default();
    let len = labels.len();
    if len < 2 {
        return set;
    }
    let mut attempts = 0;
    while (set.same.len() < n || set.diff.len() < n) && attempts < 1000 * n.max(1) {
        attempts += 1;
        let i = rng.random_range(0..len);
        let j = rng.random_range(0..len);
        if i == j {
            continue;
        }
        if labels[i] == labels[j] {
            if set.same.len() < n {
                set.same.push((i, j));
            }
        } else if set.diff.len() < n {
            set.diff.push((i, j));
        }
    }
    set
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn toy() -> (DistanceMap, PairSet) {
        let pairs = PairSet::new(vec![(0, 1), (2, 3)], vec![(0, 2), (1, 3)]).unwrap();
        let mut d = DistanceMap::new();
        d.insert((0, 1), 0.5);
        d.insert((2, 3), 1.5);
        d.insert((0, 2), 1.0);
        d.insert((1, 3), 3.0);
        (d, pairs)
    }

    #[test]
    fn val_far_examples() {
        let (d, p) = toy();
        assert_eq!(compute_val_far(&d, &p, 1.2).unwrap(), (0.5, 0.5));
        assert_eq!(compute_val_far(&d, &p, 4.0).unwrap(), (1.0, 1.0));
        assert_eq!(compute_val_far(&d, &p, 0.4).unwrap(), (0.0, 0.0));
        // inclusive
        assert_eq!(compute_val_far(&d, &p, 1.0).unwrap(), (0.5, 0.5));
        assert_eq!(compute_val_far(&d, &p, 0.5).unwrap(), (0.5, 0.0));
    }

    #[test]
    fn val_far_errors() {
        let (d, p) = toy();
        let no_same = PairSet::new(vec![], p.diff.clone()).unwrap();
        assert!(matches!(
            compute_val_far(&d, &no_same, 1.0),
            Err(Error::EmptyPairSet(_))
        ));
        let extra = PairSet::new(vec![(0, 1), (5, 6)], p.diff.clone()).unwrap();
        assert!(matches!(
            compute_val_far(&d, &extra, 1.0),
            Err(Error::MissingDistance(5, 6))
        ));
        assert!(PairSet::new(vec![(1, 1)], vec![]).is_err());
        assert!(PairSet::new(vec![(1, 2)], vec![(2, 1)]).is_err());
    }

    #[test]
    fn sweep_examples() {
        let (d, p) = toy();
        let r = roc_sweep(&d, &p, &[0.0, 4.0]).unwrap();
        assert_eq!((r.val[0], r.far[0]), (0.0, 0.0));
        assert_eq!((r.val[1], r.far[1]), (1.0, 1.0));
        let single = roc_sweep(&d, &p, &[1.2]).unwrap();
        assert_eq!(single.len(), 1);
        assert_eq!(
            (single.val[0], single.far[0]),
            compute_val_far(&d, &p, 1.2).unwrap()
        );
        assert!(roc_sweep(&d, &p, &[1.0, 0.5]).is_err());

        let mut buf = Vec::new();
        single.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "threshold,val,far\n1.2,0.5,0.5\n"
        );
    }

    #[test]
    fn sweep_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut d = DistanceMap::new();
        let mut pairs = PairSet::default();
        for k in 0..50 {
            let pair = (2 * k, 2 * k + 1);
            d.insert(pair, rng.random_range(0.0..4.0));
            if rng.random_bool(0.4) {
                pairs.same.push(pair);
            } else {
                pairs.diff.push(pair);
            }
        }
        let grid: Vec<f64> = (0..400).map(|i| i as f64 * 4.0 / 399.0).collect();
        let r = roc_sweep(&d, &pairs, &grid).unwrap();
        for (k, &t) in grid.iter().enumerate() {
            let ta = pairs
                .same
                .iter()
                .filter(|&&p| d.get(p).unwrap() <= t)
                .count();
            let fa = pairs
                .diff
                .iter()
                .filter(|&&p| d.get(p).unwrap() <= t)
                .count();
            assert_eq!(r.val[k], ta as f64 / pairs.same.len() as f64);
            assert_eq!(r.far[k], fa as f64 / pairs.diff.len() as f64);
        }
    }

    #[test]
    fn operating_point_lookup() {
        let r = VerificationReport {
            thresholds: vec![0.5, 1.0, 1.5],
            val: vec![0.2, 0.8, 1.0],
            far: vec![0.0, 0.5, 1.0],
        };
        let p = val_at_far(&r, 0.5).unwrap();
        assert_eq!((p.val, p.threshold, p.qualified), (0.8, 1.0, true));
        assert_eq!(val_at_far(&r, 1.0).unwrap().threshold, 1.5);
        let low = VerificationReport {
            far: vec![0.1, 0.5, 1.0],
            ..r.clone()
        };
        let p = val_at_far(&low, 0.05).unwrap();
        assert_eq!((p.val, p.threshold, p.qualified), (0.0, 0.5, false));
        let empty = VerificationReport {
            thresholds: vec![],
            val: vec![],
            far: vec![],
        };
        assert!(matches!(val_at_far(&empty, 0.1), Err(Error::EmptyReport)));
    }

    fn folds_of(pairs: &PairSet) -> Folds {
        Folds {
            same: (0..pairs.same.len()).map(|i| i % NUM_FOLDS).collect(),
            diff: (0..pairs.diff.len()).map(|i| i % NUM_FOLDS).collect(),
        }
    }

    #[test]
    fn tenfold_separable() {
        let mut d = DistanceMap::new();
        let mut pairs = PairSet::default();
        for k in 0..40 {
            let p = (2 * k, 2 * k + 1);
            if k % 2 == 0 {
                d.insert(p, 0.3);
                pairs.same.push(p);
            } else {
                d.insert(p, 2.0 + 0.01 * k as f64);
                pairs.diff.push(p);
            }
        }
        let r = tenfold_accuracy(&d, &pairs, &folds_of(&pairs), &default_threshold_grid()).unwrap();
        assert_eq!(r.mean_accuracy, 1.0);
        assert_eq!(r.std_error, 0.0);
        assert_eq!(r.fold_thresholds.len(), 10);
    }

    #[test]
    fn tenfold_constant_distances() {
        // 4 pairs, all at distance 1.0: 1 same, 3 diff, each in its own fold.
        // Any threshold < 1 rejects everything; >= 1 accepts everything.
        let pairs = PairSet::new(vec![(0, 1)], vec![(2, 3), (4, 5), (6, 7)]).unwrap();
        let mut d = DistanceMap::new();
        for &p in pairs.same.iter().chain(&pairs.diff) {
            d.insert(p, 1.0);
        }
        let folds = Folds {
            same: vec![0],
            diff: vec![1, 2, 3],
        };
        // Folds 4..9 are empty.
        assert!(matches!(
            tenfold_accuracy(&d, &pairs, &folds, &[0.5, 1.5]),
            Err(Error::BadPartition(_))
        ));

        // Ten pairs, one per fold: 3 same, 7 diff, all at distance 1.
        let pairs = PairSet::new(
            (0..3).map(|k| (2 * k, 2 * k + 1)).collect(),
            (3..10).map(|k| (2 * k, 2 * k + 1)).collect(),
        )
        .unwrap();
        let mut d = DistanceMap::new();
        for &p in pairs.same.iter().chain(&pairs.diff) {
            d.insert(p, 1.0);
        }
        let folds = Folds {
            same: vec![0, 1, 2],
            diff: (3..10).collect(),
        };
        let r = tenfold_accuracy(&d, &pairs, &folds, &[0.5, 1.5]).unwrap();
        // Training on nine folds always prefers rejecting (6 or 7 diff vs 2 or 3 same),
        // so same-pair folds score 0 and diff-pair folds score 1.
        assert_eq!(r.fold_thresholds, vec![0.5; 10]);
        assert!((r.mean_accuracy - 0.7).abs() < 1e-12);
    }

    #[test]
    fn tenfold_errors() {
        let (d, p) = toy();
        assert!(tenfold_accuracy(&d, &p, &folds_of(&p), &[]).is_err());
        let bad = Folds {
            same: vec![0],
            diff: vec![0, 1],
        };
        assert!(tenfold_accuracy(&d, &p, &bad, &[1.0]).is_err());
        let out_of_range = Folds {
            same: vec![0, 11],
            diff: vec![0, 1],
        };
        assert!(tenfold_accuracy(&d, &p, &out_of_range, &[1.0]).is_err());
    }

    #[test]
    fn default_grid_contains_reference_threshold() {
        let g = default_threshold_grid();
        assert_eq!(g.len(), 4001);
        assert!(g.contains(&1.242));
        assert!(g.contains(&1.256));
        assert_eq!(*g.last().unwrap(), 4.0);
    }

    #[test]
    fn quantization_examples() {
        let axis = l2_normalize(&[1.0, 0.0, 0.0]).unwrap();
        let q = quantize(&axis);
        assert_eq!(q.codes, vec![127, 0, 0]);
        assert_eq!(dequantize(&q).unwrap().values(), &[1.0, 0.0, 0.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let v: Vec<f64> = (0..128).map(|_| rng.random_range(-1.0..1.0)).collect();
            let e = l2_normalize(&v).unwrap();
            let back = dequantize(&quantize(&e)).unwrap();
            assert!(squared_distance(&e, &back).unwrap() < 1e-3);
            let raw: f64 = quantize(&e)
                .codes
                .iter()
                .map(|&c| (c as f64 / 127.0).powi(2))
                .sum();
            assert!((raw.sqrt() - 1.0).abs() < 0.02);
        }
    }

    #[test]
    fn quantized_file_round_trip() {
        let qs = vec![
            QuantizedEmbedding {
                codes: vec![1, -127, 127],
            },
            QuantizedEmbedding {
                codes: vec![0, 5, -5],
            },
        ];
        let bytes = encode_quantized(&qs).unwrap();
        assert_eq!(&bytes[..4], b"TQ08");
        assert_eq!(bytes.len(), 12 + 6);
        assert_eq!(decode_quantized(&bytes).unwrap(), qs);
        assert!(decode_quantized(&bytes[..15]).is_err());
        let ragged = vec![qs[0].clone(), QuantizedEmbedding { codes: vec![1] }];
        assert!(encode_quantized(&ragged).is_err());
    }

    #[test]
    fn pair_file_round_trip() {
        let (_, p) = toy();
        let mut buf = Vec::new();
        p.write(&mut buf).unwrap();
        assert_eq!(
            PairSet::parse(std::str::from_utf8(&buf).unwrap()).unwrap(),
            p
        );
        assert!(PairSet::parse("1,2,maybe").is_err());
        assert!(PairSet::parse("1,2").is_err());
    }

    proptest! {
        #[test]
        fn reports_are_monotone(
            same in proptest::collection::vec(0.0f64..4.0, 1..30),
            diff in proptest::collection::vec(0.0f64..4.0, 1..30),
        ) {
            let mut d = DistanceMap::new();
            let mut pairs = PairSet::default();
            for (k, &v) in same.iter().enumerate() {
                d.insert((2 * k, 2 * k + 1), v);
                pairs.same.push((2 * k, 2 * k + 1));
            }
            let off = 2 * same.len();
            for (k, &v) in diff.iter().enumerate() {
                d.insert((off + 2 * k, off + 2 * k + 1), v);
                pairs.diff.push((off + 2 * k, off + 2 * k + 1));
            }
            let grid: Vec<f64> = (0..400).map(|i| i as f64 * (4.0 + 1e-9) / 399.0).collect();
            let r = roc_sweep(&d, &pairs, &grid).unwrap();
            for k in 1..r.len() {
                prop_assert!(r.val[k] >= r.val[k - 1]);
                prop_assert!(r.far[k] >= r.far[k - 1]);
            }
            prop_assert_eq!((r.val[399], r.far[399]), (1.0, 1.0));
            prop_assert!(r.val.iter().chain(&r.far).all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
