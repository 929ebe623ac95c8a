//! Identity-quota mini-batches and online triplet selection.
//!
//! The default policy generates every ordered anchor-positive pair in the
//! batch and pairs it with a semi-hard negative: the closest negative that is
//! still strictly farther from the anchor than the positive. When no negative
//! qualifies, the farthest negative is used instead. Ties go to the lowest
//! batch index.

use std::collections::BTreeMap;
use std::io::{self, Write};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataio::LabeledSet;
use crate::error::{Error, Result};
use crate::geometry::{pairwise_sqdist, DistanceMatrix, Matrix};
use crate::loss::{Margin, Triplet};
use crate::model::EmbeddingNet;

pub type IdentityId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchSpec {
    pub faces_per_identity: usize,
    pub identities_per_batch: usize,
    pub random_negatives: usize,
    pub seed: u64,
}

impl Default for BatchSpec {
    fn default() -> Self {
        BatchSpec {
            faces_per_identity: 40,
            identities_per_batch: 45,
            random_negatives: 0,
            seed: 0,
        }
    }
}

impl BatchSpec {
    /// Nominal batch size; identities with fewer samples than the quota shrink it.
    pub fn batch_size(&self) -> usize {
        self.identities_per_batch * self.faces_per_identity + self.random_negatives
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    pub inputs: Matrix,
    pub labels: Vec<IdentityId>,
    /// Row ids in the originating [`LabeledSet`]'s id space.
    pub source_indices: Vec<usize>,
    /// Samples added only to serve as negatives.
    pub negative_only: Vec<bool>,
}

impl LabeledBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NegativeMode {
    SemiHard,
    Hardest,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PositiveMode {
    AllPairs,
    Hardest,
}

/// How negatives and positives are chosen. `seed` only drives
/// [`NegativeMode::Random`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MiningPolicy {
    pub negative_mode: NegativeMode,
    pub positive_mode: PositiveMode,
    pub seed: u64,
}

impl Default for MiningPolicy {
    fn default() -> Self {
        MiningPolicy {
            negative_mode: NegativeMode::SemiHard,
            positive_mode: PositiveMode::AllPairs,
            seed: 0,
        }
    }
}

impl MiningPolicy {
    pub fn new(negative_mode: NegativeMode, positive_mode: PositiveMode) -> Self {
        MiningPolicy {
            negative_mode,
            positive_mode,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

impl std::str::FromStr for NegativeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "semi_hard" | "semi-hard" | "semihard" => Ok(NegativeMode::SemiHard),
            "hardest" => Ok(NegativeMode::Hardest),
            "random" => Ok(NegativeMode::Random),
            other => Err(Error::Parse(format!("unknown negative mode {other:?}"))),
        }
    }
}

impl std::str::FromStr for PositiveMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all_pairs" | "all-pairs" => Ok(PositiveMode::AllPairs),
            "hardest" => Ok(PositiveMode::Hardest),
            other => Err(Error::Parse(format!("unknown positive mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for NegativeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NegativeMode::SemiHard => "semi_hard",
            NegativeMode::Hardest => "hardest",
            NegativeMode::Random => "random",
        })
    }
}

impl std::fmt::Display for PositiveMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PositiveMode::AllPairs => "all_pairs",
            PositiveMode::Hardest => "hardest",
        })
    }
}

/// Per-step generator: stream `step` of the batch seed, so any step can be
/// reproduced without replaying the ones before it.
pub(crate) fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// Samples `identities_per_batch` identities (each with at least two samples),
/// up to `faces_per_identity` faces of each, then `random_negatives` single
/// samples drawn from distinct identities outside the selection.
pub fn assemble_batch(set: &LabeledSet, spec: &BatchSpec, step: u64) -> Result<LabeledBatch> {
    if spec.faces_per_identity < 2 {
        return Err(Error::InsufficientSamples(format!(
            "faces_per_identity = {} cannot form anchor-positive pairs",
            spec.faces_per_identity
        )));
    }
    let mut by_identity: BTreeMap<IdentityId, Vec<usize>> = BTreeMap::new();
    for (row, &label) in set.labels.iter().enumerate() {
        by_identity.entry(label).or_default().push(row);
    }
    let eligible: Vec<IdentityId> = by_identity
        .iter()
        .filter(|(_, rows)| rows.len() >= 2)
        .map(|(&id, _)| id)
        .collect();
    if eligible.len() < spec.identities_per_batch {
        return Err(Error::InsufficientIdentities {
            needed: spec.identities_per_batch,
            available: eligible.len(),
        });
    }

    let mut rng = step_rng(spec.seed, step);
    let chosen: Vec<IdentityId> =
        index::sample(&mut rng, eligible.len(), spec.identities_per_batch)
            .into_iter()
            .map(|i| eligible[i])
            .collect();

    let mut rows = Vec::with_capacity(spec.batch_size());
    let mut negative_only = Vec::with_capacity(spec.batch_size());
    for id in &chosen {
        let pool = &by_identity[id];
        let take = spec.faces_per_identity.min(pool.len());
        rows.extend(
            index::sample(&mut rng, pool.len(), take)
                .into_iter()
                .map(|i| pool[i]),
        );
        negative_only.extend(std::iter::repeat_n(false, take));
    }

    if spec.random_negatives > 0 {
        let others: Vec<IdentityId> = by_identity
            .keys()
            .copied()
            .filter(|id| !chosen.contains(id))
            .collect();
        if others.len() < spec.random_negatives {
            return Err(Error::InsufficientIdentities {
                needed: spec.identities_per_batch + spec.random_negatives,
                available: by_identity.len(),
            });
        }
        for i in index::sample(&mut rng, others.len(), spec.random_negatives) {
            let pool = &by_identity[&others[i]];
            rows.push(pool[rng.random_range(0..pool.len())]);
            negative_only.push(true);
        }
    }

    Ok(LabeledBatch {
        inputs: set.inputs.select_rows(&rows),
        labels: rows.iter().map(|&r| set.labels[r]).collect(),
        source_indices: rows.iter().map(|&r| set.ids[r]).collect(),
        negative_only,
    })
}

/// Online triplet selection over a batch distance matrix.
///
/// The margin is accepted for interface symmetry with the loss; semi-hard
/// selection does not filter negatives by it.
pub fn select_triplets(
    dists: &DistanceMatrix,
    labels: &[IdentityId],
    _m: Margin,
    policy: &MiningPolicy,
) -> Result<Vec<Triplet>> {
    check_aligned(dists, labels)?;
    let anchors: Vec<usize> = (0..labels.len()).collect();
    select_for_anchors(dists, labels, &anchors, policy)
}

fn check_aligned(dists: &DistanceMatrix, labels: &[IdentityId]) -> Result<()> {
    if dists.size() != labels.len() {
        return Err(Error::DimMismatch {
            expected: dists.size(),
            got: labels.len(),
        });
    }
    Ok(())
}

/// Selection restricted to the given anchors; positives and negatives range
/// over every point. Anchors are visited in the given order.
pub(crate) fn select_for_anchors(
    dists: &DistanceMatrix,
    labels: &[IdentityId],
    anchors: &[usize],
    policy: &MiningPolicy,
) -> Result<Vec<Triplet>> {
    let Some(&first) = labels.first() else {
        return Ok(Vec::new());
    };
    if labels.iter().all(|&l| l == first) {
        return Err(Error::NoNegatives);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(policy.seed);
    let mut triplets = Vec::new();
    let mut positives = Vec::new();
    // Negatives of the current anchor, sorted by (distance, index).
    let mut negatives: Vec<(f64, usize)> = Vec::new();

    for &a in anchors {
        let row = dists.row(a);
        let label = labels[a];
        positives.clear();
        positives.extend((0..labels.len()).filter(|&p| p != a && labels[p] == label));
        if positives.is_empty() {
            continue;
        }
        if policy.positive_mode == PositiveMode::Hardest {
            let mut best = positives[0];
            for &p in &positives[1..] {
                if row[p] > row[best] {
                    best = p;
                }
            }
            positives.clear();
            positives.push(best);
        }

        negatives.clear();
        negatives.extend(
            labels
                .iter()
                .enumerate()
                .filter(|&(_, &l)| l != label)
                .map(|(n, _)| (row[n], n)),
        );
        if policy.negative_mode != NegativeMode::Random {
            negatives.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
        }

        for &p in &positives {
            let d_ap = row[p];
            let negative = match policy.negative_mode {
                NegativeMode::Hardest => negatives[0].1,
                NegativeMode::Random => negatives[rng.random_range(0..negatives.len())].1,
                NegativeMode::SemiHard => {
                    let k = negatives.partition_point(|&(d, _)| d <= d_ap);
                    if k < negatives.len() {
                        negatives[k].1
                    } else {
                        // No semi-hard candidate: lowest index among the farthest.
                        let far = negatives[negatives.len() - 1].0;
                        let start = negatives.partition_point(|&(d, _)| d < far);
                        negatives[start].1
                    }
                }
            };
            triplets.push(Triplet::new(a, p, negative));
        }
    }
    Ok(triplets)
}

/// A triplet of dataset row ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RowTriplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// Embeds a whole subset with a checkpointed network and mines it as one batch.
pub fn offline_mine(
    net: &EmbeddingNet,
    subset: &LabeledSet,
    m: Margin,
    policy: &MiningPolicy,
) -> Result<Vec<RowTriplet>> {
    let embeddings = net.embed(&subset.inputs)?;
    let dists = pairwise_sqdist(&embeddings)?;
    let triplets = select_triplets(&dists, &subset.labels, m, policy)?;
    Ok(triplets
        .into_iter()
        .map(|t| RowTriplet {
            anchor: subset.ids[t.anchor],
            positive: subset.ids[t.positive],
            negative: subset.ids[t.negative],
        })
        .collect())
}

/// Writes one `anchor_row,positive_row,negative_row` line per triplet.
pub fn write_triplet_dump<W: Write>(mut w: W, triplets: &[RowTriplet]) -> io::Result<()> {
    for t in triplets {
        writeln!(w, "{},{},{}", t.anchor, t.positive, t.negative)?;
    }
    Ok(())
}

pub fn read_triplet_dump(text: &str) -> Result<Vec<RowTriplet>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let fields: Vec<usize> = line
                .split(',')
                .map(|f| f.trim().parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse(format!("triplet line {line:?}: {e}")))?;
            match fields[..] {
                [anchor, positive, negative] => Ok(RowTriplet {
                    anchor,
                    positive,
                    negative,
                }),
                _ => Err(Error::Parse(format!(
                    "triplet line {line:?}: expected 3 fields"
                ))),
            }
        })
        .collect()
}
