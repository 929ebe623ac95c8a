//! Harmonic embeddings: training a new (v2) network whose embeddings stay
//! directly comparable with a frozen older (v1) network's.
//!
//! Each batch is embedded by v2, and the precomputed v1 embeddings of the same
//! samples are appended, giving a `2B`-point union in one shared space
//! (v2 points first, then v1). Anchors are v2 points; positives are every
//! other same-identity point of either version; semi-hard negatives are mined
//! over the whole union. v1 points enter the loss as constants.

use std::collections::BTreeMap;

use crate::dataio::LabeledSet;
use crate::error::{Error, Result};
use crate::eval::{roc_sweep, DistanceMap, PairSet, VerificationReport};
use crate::geometry::{pairwise_sqdist, squared_distance, DistanceMatrix, Embedding, Matrix};
use crate::loss::{batch_triplet_loss, Margin, Triplet};
use crate::mining::{assemble_batch, select_for_anchors, IdentityId, MiningPolicy};
use crate::model::EmbeddingNet;
use crate::trainer::{
    adagrad_step, mix, AdaGradState, StepRecord, TrainConfig, TrainLog, COLLAPSE_NORM,
};

/// Embeddings keyed by sample id.
pub type EmbeddingMap = BTreeMap<usize, Embedding>;

/// Embeds every row of `set`, keyed by the set's row ids.
pub fn embed_map(net: &EmbeddingNet, set: &LabeledSet) -> Result<EmbeddingMap> {
    let embeddings = net.embed(&set.inputs)?;
    Ok(set.ids.iter().copied().zip(embeddings).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Version {
    V1,
    V2,
}

/// Which union points may serve as anchors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AnchorVersions {
    #[default]
    V2Only,
    /// Also anchor on v1 points (their triplets still train v2 through the
    /// positive and negative slots).
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct HarmonicTriplet {
    /// Batch indices of the three samples.
    pub triplet: Triplet,
    pub anchor_version: Version,
    pub positive_version: Version,
    pub negative_version: Version,
}

/// Distances over the union `[v2 batch..., v1 batch...]`.
pub fn union_distances(v2: &[Embedding], v1: &[Embedding]) -> Result<DistanceMatrix> {
    if v1.len() != v2.len() {
        return Err(Error::DimMismatch {
            expected: v2.len(),
            got: v1.len(),
        });
    }
    let union: Vec<Embedding> = v2.iter().chain(v1).cloned().collect();
    pairwise_sqdist(&union)
}

fn split_index(u: usize, batch: usize) -> (usize, Version) {
    if u < batch {
        (u, Version::V2)
    } else {
        (u - batch, Version::V1)
    }
}

/// Mines triplets over the union of both versions of a batch.
///
/// Triplets come out anchor-major in union order (v2 anchors first), with
/// positives in ascending union index.
pub fn generate_harmonic_triplets(
    labels: &[IdentityId],
    union: &DistanceMatrix,
    _m: Margin,
    policy: &MiningPolicy,
    anchors: AnchorVersions,
) -> Result<Vec<HarmonicTriplet>> {
    let batch = labels.len();
    if union.size() != 2 * batch {
        return Err(Error::DimMismatch {
            expected: 2 * batch,
            got: union.size(),
        });
    }
    let union_labels: Vec<IdentityId> = labels.iter().chain(labels).copied().collect();
    let anchor_ids: Vec<usize> = match anchors {
        AnchorVersions::V2Only => (0..batch).collect(),
        AnchorVersions::Both => (0..2 * batch).collect(),
    };
    let raw = select_for_anchors(union, &union_labels, &anchor_ids, policy)?;
    Ok(raw
        .into_iter()
        .filter_map(|t| {
            let (a, av) = split_index(t.anchor, batch);
            let (p, pv) = split_index(t.positive, batch);
            let (n, nv) = split_index(t.negative, batch);
            // A triplet with no v2 slot carries no gradient.
            (av == Version::V2 || pv == Version::V2 || nv == Version::V2).then_some(
                HarmonicTriplet {
                    triplet: Triplet::new(a, p, n),
                    anchor_version: av,
                    positive_version: pv,
                    negative_version: nv,
                },
            )
        })
        .collect())
}

impl HarmonicTriplet {
    fn union_triplet(&self, batch: usize) -> Triplet {
        let at = |i: usize, v: Version| if v == Version::V2 { i } else { i + batch };
        Triplet::new(
            at(self.triplet.anchor, self.anchor_version),
            at(self.triplet.positive, self.positive_version),
            at(self.triplet.negative, self.negative_version),
        )
    }
}

/// Harmonic loss over a batch; only the v2 rows of the gradient are kept.
#[derive(Debug, Clone, PartialEq)]
pub struct HarmonicLoss {
    pub total: f64,
    pub v2_grad: Matrix,
    pub active: usize,
}

pub fn harmonic_loss(
    v2: &[Embedding],
    v1: &[Embedding],
    triplets: &[HarmonicTriplet],
    m: Margin,
) -> Result<HarmonicLoss> {
    let batch = v2.len();
    let union: Vec<Embedding> = v2.iter().chain(v1).cloned().collect();
    let union_triplets: Vec<Triplet> = triplets.iter().map(|t| t.union_triplet(batch)).collect();
    let loss = batch_triplet_loss(&union, &union_triplets, m)?;
    let dim = loss.grad.cols();
    let v2_grad = Matrix::from_vec(batch, dim, loss.grad.as_slice()[..batch * dim].to_vec())?;
    Ok(HarmonicLoss {
        total: loss.total,
        v2_grad,
        active: loss.active,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// Only the final affine (embedding) layer is updated.
    LastLayerOnly,
    FullNetwork,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HarmonicConfig {
    pub train: TrainConfig,
    pub anchors: AnchorVersions,
    /// Refuse a full-network stage until at least one last-layer step ran.
    pub require_staging: bool,
}

impl Default for HarmonicConfig {
    fn default() -> Self {
        HarmonicConfig {
            train: TrainConfig::default(),
            anchors: AnchorVersions::V2Only,
            require_staging: true,
        }
    }
}

/// A staged harmonic retraining run. The v1 map is only ever read.
pub struct HarmonicSession<'a> {
    cfg: &'a HarmonicConfig,
    v1: &'a EmbeddingMap,
    set: &'a LabeledSet,
    net: EmbeddingNet,
    state: AdaGradState,
    next_step: usize,
    last_layer_steps: usize,
    log: TrainLog,
}

impl<'a> HarmonicSession<'a> {
    pub fn new(
        v2_net: EmbeddingNet,
        v1: &'a EmbeddingMap,
        set: &'a LabeledSet,
        cfg: &'a HarmonicConfig,
    ) -> Result<Self> {
        cfg.train.validate()?;
        if let Some(&missing) = set.ids.iter().find(|id| !v1.contains_key(id)) {
            return Err(Error::MissingEmbedding(missing));
        }
        if let Some(e) = v1.values().find(|e| e.dim() != v2_net.embedding_dim()) {
            return Err(Error::DimMismatch {
                expected: v2_net.embedding_dim(),
                got: e.dim(),
            });
        }
        let state = AdaGradState::for_network(&v2_net);
        Ok(HarmonicSession {
            cfg,
            v1,
            set,
            net: v2_net,
            state,
            next_step: 0,
            last_layer_steps: 0,
            log: TrainLog::default(),
        })
    }

    pub fn net(&self) -> &EmbeddingNet {
        &self.net
    }

    pub fn log(&self) -> &TrainLog {
        &self.log
    }

    pub fn run_stage(&mut self, stage: Stage, steps: usize) -> Result<()> {
        if stage == Stage::FullNetwork
            && self.cfg.require_staging
            && self.last_layer_steps == 0
            && steps > 0
        {
            return Err(Error::StageOrderViolation);
        }
        for _ in 0..steps {
            self.step(stage)?;
        }
        Ok(())
    }

    fn step(&mut self, stage: Stage) -> Result<()> {
        let cfg = &self.cfg.train;
        let step = self.next_step;
        let batch = assemble_batch(self.set, &cfg.batch, step as u64)?;
        let v1: Vec<Embedding> = batch
            .source_indices
            .iter()
            .map(|id| self.v1.get(id).cloned().ok_or(Error::MissingEmbedding(*id)))
            .collect::<Result<_>>()?;

        let trace = self.net.forward(&batch.inputs)?;
        let mean_norm = trace.mean_output_norm();
        if !(mean_norm >= COLLAPSE_NORM) {
            return Err(Error::CollapseDetected { step, mean_norm });
        }
        let v2 = trace.embeddings()?;
        let union = union_distances(&v2, &v1)?;
        let policy = cfg.policy.with_seed(mix(cfg.seed, step as u64));
        let triplets = generate_harmonic_triplets(
            &batch.labels,
            &union,
            cfg.margin,
            &policy,
            self.cfg.anchors,
        )?;
        let mut loss = harmonic_loss(&v2, &v1, &triplets, cfg.margin)?;

        let lr = cfg.rate_at(step);
        let mut mean_loss = 0.0;
        if !triplets.is_empty() {
            let scale = 1.0 / triplets.len() as f64;
            loss.v2_grad
                .as_mut_slice()
                .iter_mut()
                .for_each(|g| *g *= scale);
            mean_loss = loss.total * scale;
            let mut grads = self.net.backprop(&trace, &loss.v2_grad)?;
            if stage == Stage::LastLayerOnly {
                grads.keep_last_layer_only();
            }
            adagrad_step(
                self.net.layers_mut(),
                &grads,
                &mut self.state,
                lr,
                cfg.adagrad_epsilon,
            )?;
        }
        self.next_step += 1;
        if stage == Stage::LastLayerOnly {
            self.last_layer_steps += 1;
        }
        self.log.records.push(StepRecord {
            step,
            loss: mean_loss,
            active: loss.active,
            triplets: triplets.len(),
            lr,
            seconds: 0.0,
        });
        Ok(())
    }

    pub fn finish(self) -> (EmbeddingNet, TrainLog) {
        (self.net, self.log)
    }
}

/// Runs `cfg.train.steps` steps of a single stage from a fresh session.
///
/// With `require_staging`, a lone full-network stage is rejected; use
/// [`HarmonicSession`] to chain the stages.
pub fn harmonic_train(
    v2_net: EmbeddingNet,
    v1: &EmbeddingMap,
    set: &LabeledSet,
    cfg: &HarmonicConfig,
    stage: Stage,
) -> Result<(EmbeddingNet, TrainLog)> {
    let mut session = HarmonicSession::new(v2_net, v1, set, cfg)?;
    session.run_stage(stage, cfg.train.steps)?;
    Ok(session.finish())
}

/// Same-version and mixed-version verification reports.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossVersionReport {
    pub v1_v1: VerificationReport,
    pub v2_v2: VerificationReport,
    /// First pair member embedded by v1, second by v2.
    pub mixed: VerificationReport,
}

fn lookup(map: &EmbeddingMap, id: usize) -> Result<&Embedding> {
    map.get(&id).ok_or(Error::MissingEmbedding(id))
}

pub fn cross_version_distances(
    first: &EmbeddingMap,
    second: &EmbeddingMap,
    pairs: &PairSet,
) -> Result<DistanceMap> {
    DistanceMap::from_fn(pairs, |i, j| {
        squared_distance(lookup(first, i)?, lookup(second, j)?)
    })
}

pub fn cross_version_report(
    v1: &EmbeddingMap,
    v2: &EmbeddingMap,
    pairs: &PairSet,
    thresholds: &[f64],
) -> Result<CrossVersionReport> {
    let d11 = cross_version_distances(v1, v1, pairs)?;
    let d22 = cross_version_distances(v2, v2, pairs)?;
    let d12 = cross_version_distances(v1, v2, pairs)?;
    Ok(CrossVersionReport {
        v1_v1: roc_sweep(&d11, pairs, thresholds)?,
        v2_v2: roc_sweep(&d22, pairs, thresholds)?,
        mixed: roc_sweep(&d12, pairs, thresholds)?,
    })
}
