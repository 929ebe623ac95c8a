//! Agglomerative clustering under squared distance, and pairwise F1 scoring.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::geometry::{pairwise_sqdist, Embedding};
use crate::mining::IdentityId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Linkage {
    Single,
    #[default]
    Average,
    Complete,
}

impl fmt::Display for Linkage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            Linkage::Single => "single",
            Linkage::Average => "average",
            Linkage::Complete => "complete",
        })
    }
}

impl FromStr for Linkage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Linkage::Single),
            "average" => Ok(Linkage::Average),
            "complete" => Ok(Linkage::Complete),
            other => Err(Error::Parse(format!("unknown linkage {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Clustering {
    /// Cluster id per sample, in input order. Ids are numbered from 0 by
    /// first appearance.
    pub assignments: Vec<usize>,
    pub num_clusters: usize,
}

impl Clustering {
    /// Relabels arbitrary cluster keys to contiguous ids by first appearance.
    pub fn from_labels<T: PartialEq + Copy>(labels: &[T]) -> Clustering {
        let mut seen: Vec<T> = Vec::new();
        let assignments = labels
            .iter()
            .map(|l| match seen.iter().position(|s| s == l) {
                Some(i) => i,
                None => {
                    seen.push(*l);
                    seen.len() - 1
                }
            })
            .collect();
        Clustering {
            assignments,
            num_clusters: seen.len(),
        }
    }

    pub fn len(&self) -> usize {
        self.assignments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }

    /// Writes `sample_id,cluster_id`, taking sample ids from `ids`.
    pub fn write_csv(&self, path: &Path, ids: &[usize]) -> Result<()> {
        if ids.len() != self.len() {
            return Err(Error::LabelMismatch {
                predicted: self.len(),
                truth: ids.len(),
            });
        }
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "sample_id,cluster_id")?;
        for (id, c) in ids.iter().zip(&self.assignments) {
            writeln!(out, "{id},{c}")?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Merges the closest pair of clusters until the closest pair is farther
/// apart than `cutoff`. O(n^3) time and O(n^2) memory.
pub fn agglomerative_cluster(
    embeddings: &[Embedding],
    cutoff: f64,
    linkage: Linkage,
) -> Result<Clustering> {
    if embeddings.is_empty() {
        return Err(Error::EmptyInput);
    }
    if !(cutoff >= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "cutoff must be >= 0, got {cutoff}"
        )));
    }
    let n = embeddings.len();
    let dm = pairwise_sqdist(embeddings)?;
    let mut d: Vec<f64> = (0..n).flat_map(|i| dm.row(i).to_vec()).collect();
    // Each cluster is keyed by its lowest member index.
    let mut parent: Vec<usize> = (0..n).collect();
    let mut size = vec![1usize; n];
    let mut active: Vec<usize> = (0..n).collect();

    while active.len() > 1 {
        let mut best: Option<(f64, usize, usize)> = None;
        for (x, &i) in active.iter().enumerate() {
            for &j in &active[x + 1..] {
                let dij = d[i * n + j];
                if best.is_none_or(|(b, _, _)| dij < b) {
                    best = Some((dij, i, j));
                }
            }
        }
        let (dist, i, j) = best.expect("at least two active clusters");
        if dist > cutoff {
            break;
        }
        let (si, sj) = (size[i] as f64, size[j] as f64);
        for &k in &active {
            if k == i || k == j {
                continue;
            }
            let (dik, djk) = (d[i * n + k], d[j * n + k]);
            let merged = match linkage {
                Linkage::Single => dik.min(djk),
                Linkage::Complete => dik.max(djk),
                Linkage::Average => (si * dik + sj * djk) / (si + sj),
            };
            d[i * n + k] = merged;
            d[k * n + i] = merged;
        }
        size[i] += size[j];
        parent[j] = i;
        active.retain(|&k| k != j);
    }

    let root = |mut k: usize| {
        while parent[k] != k {
            k = parent[k];
        }
        k
    };
    let roots: Vec<usize> = (0..n).map(root).collect();
    Ok(Clustering::from_labels(&roots))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn pairwise_f1(predicted: &Clustering, truth: &[IdentityId]) -> Result<PairScores> {
    if predicted.len() != truth.len() {
        return Err(Error::LabelMismatch {
            predicted: predicted.len(),
            truth: truth.len(),
        });
    }
    let a = &predicted.assignments;
    let (mut both, mut same_cluster, mut same_identity) = (0u64, 0u64, 0u64);
    for i in 0..a.len() {
        for j in i + 1..a.len() {
            let c = a[i] == a[j];
            let t = truth[i] == truth[j];
            same_cluster += c as u64;
            same_identity += t as u64;
            both += (c && t) as u64;
        }
    }
    let ratio = |num: u64, den: u64| {
        if den == 0 {
            1.0
        } else {
            num as f64 / den as f64
        }
    };
    let precision = ratio(both, same_cluster);
    let recall = ratio(both, same_identity);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(PairScores {
        precision,
        recall,
        f1,
    })
}
