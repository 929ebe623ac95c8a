//! Training loop: batch -> embed -> mine -> loss -> backprop -> AdaGrad.
//!
//! Every step draws its batch from stream `step` of the batch seed, so a run
//! resumed from a step-`k` checkpoint (network plus AdaGrad accumulators)
//! reproduces the uninterrupted run bit for bit.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::dataio::LabeledSet;
use crate::error::{Error, Result};
use crate::eval::operating_point_for_labels;
use crate::geometry::pairwise_sqdist;
use crate::loss::{batch_triplet_loss, Margin};
use crate::mining::{
    assemble_batch, select_triplets, BatchSpec, MiningPolicy, NegativeMode, PositiveMode,
};
use crate::model::{decode_params, encode_params, EmbeddingNet, LayerParams, ParamGrads};

/// Mean pre-normalization output norm below which a run is declared collapsed.
pub const COLLAPSE_NORM: f64 = 1e-6;

/// FAR at which periodic evaluation reports VAL.
pub const EVAL_FAR: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub margin: Margin,
    pub steps: usize,
    pub batch: BatchSpec,
    pub policy: MiningPolicy,
    pub adagrad_epsilon: f64,
    /// `(step, rate)`: from `step` on, use `rate`. Steps strictly increasing.
    pub lr_schedule: Vec<(usize, f64)>,
    /// Write a checkpoint after every this many steps; 0 disables.
    pub checkpoint_every: usize,
    /// Evaluate on the eval set after every this many steps; 0 disables.
    pub eval_every: usize,
    /// Seeds per-step randomness in mining (random negative mode).
    pub seed: u64,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.05,
            margin: Margin::DEFAULT,
            steps: 1000,
            batch: BatchSpec::default(),
            policy: MiningPolicy::default(),
            adagrad_epsilon: 1e-8,
            lr_schedule: Vec::new(),
            checkpoint_every: 0,
            eval_every: 0,
            seed: 0,
            checkpoint_dir: None,
        }
    }
}

/// Keys accepted by [`TrainConfig::set`].
pub const TRAIN_KEYS: &[&str] = &[
    "learning_rate",
    "margin",
    "steps",
    "faces_per_identity",
    "identities_per_batch",
    "random_negatives",
    "batch_seed",
    "negative_mode",
    "positive_mode",
    "adagrad_epsilon",
    "lr_schedule",
    "checkpoint_every",
    "eval_every",
    "seed",
    "checkpoint_dir",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| Error::InvalidTrainConfig(format!("{key} = {value:?}: {e}")))
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidTrainConfig(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning_rate must be >= 0, got {}",
                self.learning_rate
            ));
        }
        if !(self.adagrad_epsilon > 0.0) {
            return bad("adagrad_epsilon must be positive".into());
        }
        if self.lr_schedule.windows(2).any(|w| w[0].0 >= w[1].0) {
            return bad("lr_schedule steps must be strictly increasing".into());
        }
        if self.lr_schedule.iter().any(|&(_, r)| !(r >= 0.0)) {
            return bad("lr_schedule rates must be >= 0".into());
        }
        if self.checkpoint_every > 0 && self.checkpoint_dir.is_none() {
            return bad("checkpoint_every needs checkpoint_dir".into());
        }
        if self.batch.identities_per_batch == 0 {
            return bad("identities_per_batch must be positive".into());
        }
        Ok(())
    }

    pub fn rate_at(&self, step: usize) -> f64 {
        self.lr_schedule
            .iter()
            .rev()
            .find(|&&(s, _)| s <= step)
            .map_or(self.learning_rate, |&(_, r)| r)
    }

    /// Sets one field by its flat key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "margin" => self.margin = Margin::new(parse(key, value)?)?,
            "steps" => self.steps = parse(key, value)?,
            "faces_per_identity" => self.batch.faces_per_identity = parse(key, value)?,
            "identities_per_batch" => self.batch.identities_per_batch = parse(key, value)?,
            "random_negatives" => self.batch.random_negatives = parse(key, value)?,
            "batch_seed" => self.batch.seed = parse(key, value)?,
            "negative_mode" => self.policy.negative_mode = value.trim().parse::<NegativeMode>()?,
            "positive_mode" => self.policy.positive_mode = value.trim().parse::<PositiveMode>()?,
            "adagrad_epsilon" => self.adagrad_epsilon = parse(key, value)?,
            "lr_schedule" => self.lr_schedule = parse_schedule(value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "eval_every" => self.eval_every = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "checkpoint_dir" => {
                let v = value.trim();
                self.checkpoint_dir = (!v.is_empty()).then(|| PathBuf::from(v));
            }
            other => return Err(Error::InvalidTrainConfig(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Every field as `key -> value`, in a form [`TrainConfig::set`] accepts.
    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let schedule = self
            .lr_schedule
            .iter()
            .map(|(s, r)| format!("{s}:{r}"))
            .collect::<Vec<_>>()
            .join(",");
        let pairs: [(&str, String); 15] = [
            ("learning_rate", self.learning_rate.to_string()),
            ("margin", self.margin.alpha().to_string()),
            ("steps", self.steps.to_string()),
            (
                "faces_per_identity",
                self.batch.faces_per_identity.to_string(),
            ),
            (
                "identities_per_batch",
                self.batch.identities_per_batch.to_string(),
            ),
            ("random_negatives", self.batch.random_negatives.to_string()),
            ("batch_seed", self.batch.seed.to_string()),
            ("negative_mode", self.policy.negative_mode.to_string()),
            ("positive_mode", self.policy.positive_mode.to_string()),
            ("adagrad_epsilon", self.adagrad_epsilon.to_string()),
            ("lr_schedule", schedule),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("seed", self.seed.to_string()),
            (
                "checkpoint_dir",
                self.checkpoint_dir
                    .as_ref()
                    .map(|p| p.display().to_string())
                    .unwrap_or_default(),
            ),
        ];
        pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }
}

/// `"100:0.01,500:0.005"`; empty means no schedule.
pub fn parse_schedule(text: &str) -> Result<Vec<(usize, f64)>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|entry| {
            let (step, rate) = entry.split_once(':').ok_or_else(|| {
                Error::InvalidTrainConfig(format!("schedule entry {entry:?} is not step:rate"))
            })?;
            Ok((parse("lr_schedule", step)?, parse("lr_schedule", rate)?))
        })
        .collect()
}

/// Per-parameter sums of squared gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaGradState {
    pub accumulators: Vec<LayerParams>,
}

impl AdaGradState {
    pub fn for_network(net: &EmbeddingNet) -> Self {
        AdaGradState {
            accumulators: net.layers().iter().map(LayerParams::zeros_like).collect(),
        }
    }

    /// Same TNET layout as network checkpoints.
    pub fn to_bytes(&self) -> Vec<u8> {
        encode_params(&self.accumulators)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Ok(AdaGradState {
            accumulators: decode_params(bytes)?,
        })
    }
}

/// `G += g^2; theta -= lr * g / (sqrt(G) + eps)` for every parameter.
pub fn adagrad_step(
    params: &mut [LayerParams],
    grads: &ParamGrads,
    state: &mut AdaGradState,
    lr: f64,
    eps: f64,
) -> Result<()> {
    let congruent = params.len() == grads.layers.len()
        && params.len() == state.accumulators.len()
        && params
            .iter()
            .zip(&grads.layers)
            .zip(&state.accumulators)
            .all(|((p, g), a)| p.same_shape(g) && p.same_shape(a));
    if !congruent {
        return Err(Error::ShapeMismatch(
            "parameters, gradients and AdaGrad state differ in shape".into(),
        ));
    }
    for ((p, g), acc) in params
        .iter_mut()
        .zip(&grads.layers)
        .zip(&mut state.accumulators)
    {
        for ((theta, &g), sum) in p.values_mut().zip(g.values()).zip(acc.values_mut()) {
            if g != 0.0 {
                *sum += g * g;
                *theta -= lr * g / (sum.sqrt() + eps);
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    /// Mean loss over the step's triplets.
    pub loss: f64,
    pub active: usize,
    pub triplets: usize,
    pub lr: f64,
    pub seconds: f64,
}

impl StepRecord {
    pub fn active_fraction(&self) -> f64 {
        if self.triplets == 0 {
            0.0
        } else {
            self.active as f64 / self.triplets as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub step: usize,
    pub val: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
}

impl TrainLog {
    /// `step,loss,active,triplets,lr,seconds` with a header.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "step,loss,active,triplets,lr,seconds")?;
        for r in &self.records {
            writeln!(
                w,
                "{},{},{},{},{},{:.3}",
                r.step, r.loss, r.active, r.triplets, r.lr, r.seconds
            )?;
        }
        Ok(())
    }

    pub fn mean_active_fraction(&self, range: std::ops::Range<usize>) -> f64 {
        let slice = &self.records[range];
        slice.iter().map(StepRecord::active_fraction).sum::<f64>() / slice.len().max(1) as f64
    }
}

/// Stateful training run over a labeled training set.
pub struct Trainer<'a> {
    cfg: &'a TrainConfig,
    set: &'a LabeledSet,
    eval_set: Option<&'a LabeledSet>,
    net: EmbeddingNet,
    state: AdaGradState,
    next_step: usize,
    log: TrainLog,
    started: Instant,
}

impl<'a> Trainer<'a> {
    pub fn new(net: EmbeddingNet, set: &'a LabeledSet, cfg: &'a TrainConfig) -> Result<Self> {
        let state = AdaGradState::for_network(&net);
        Self::resume(net, state, 0, set, cfg)
    }

    /// Continues a run whose first `next_step` steps are already applied.
    pub fn resume(
        net: EmbeddingNet,
        state: AdaGradState,
        next_step: usize,
        set: &'a LabeledSet,
        cfg: &'a TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if net.input_dim() != set.inputs.cols() {
            return Err(Error::DimMismatch {
                expected: net.input_dim(),
                got: set.inputs.cols(),
            });
        }
        Ok(Trainer {
            cfg,
            set,
            eval_set: None,
            net,
            state,
            next_step,
            log: TrainLog::default(),
            started: Instant::now(),
        })
    }

    pub fn with_eval_set(mut self, eval: &'a LabeledSet) -> Self {
        self.eval_set = Some(eval);
        self
    }

    pub fn net(&self) -> &EmbeddingNet {
        &self.net
    }

    pub fn state(&self) -> &AdaGradState {
        &self.state
    }

    pub fn next_step(&self) -> usize {
        self.next_step
    }

    pub fn log(&self) -> &TrainLog {
        &self.log
    }

    pub fn step(&mut self) -> Result<&StepRecord> {
        let step = self.next_step;
        let batch = assemble_batch(self.set, &self.cfg.batch, step as u64)?;
        let trace = self.net.forward(&batch.inputs)?;
        let mean_norm = trace.mean_output_norm();
        if !(mean_norm >= COLLAPSE_NORM) {
            return Err(Error::CollapseDetected { step, mean_norm });
        }
        let embeddings = trace.embeddings()?;
        let dists = pairwise_sqdist(&embeddings)?;
        let policy = self.cfg.policy.with_seed(mix(self.cfg.seed, step as u64));
        let triplets = select_triplets(&dists, &batch.labels, self.cfg.margin, &policy)?;
        let mut loss = batch_triplet_loss(&embeddings, &triplets, self.cfg.margin)?;

        let lr = self.cfg.rate_at(step);
        let mut mean_loss = 0.0;
        if !triplets.is_empty() {
            let scale = 1.0 / triplets.len() as f64;
            loss.grad
                .as_mut_slice()
                .iter_mut()
                .for_each(|g| *g *= scale);
            mean_loss = loss.total * scale;
            let grads = self.net.backprop(&trace, &loss.grad)?;
            adagrad_step(
                self.net.layers_mut(),
                &grads,
                &mut self.state,
                lr,
                self.cfg.adagrad_epsilon,
            )?;
        }
        self.next_step += 1;

        if self.cfg.checkpoint_every > 0 && self.next_step.is_multiple_of(self.cfg.checkpoint_every)
        {
            if let Some(dir) = &self.cfg.checkpoint_dir {
                write_checkpoint_pair(dir, self.next_step, &self.net, &self.state)?;
            }
        }
        if self.cfg.eval_every > 0 && self.next_step.is_multiple_of(self.cfg.eval_every) {
            if let Some(eval) = self.eval_set {
                let embeddings = self.net.embed(&eval.inputs)?;
                let point = operating_point_for_labels(&embeddings, &eval.labels, EVAL_FAR)?;
                self.log.evals.push(EvalRecord {
                    step: self.next_step,
                    val: point.val,
                    threshold: point.threshold,
                });
            }
        }

        self.log.records.push(StepRecord {
            step,
            loss: mean_loss,
            active: loss.active,
            triplets: triplets.len(),
            lr,
            seconds: self.started.elapsed().as_secs_f64(),
        });
        Ok(self.log.records.last().expect("pushed above"))
    }

    /// Runs until `cfg.steps` steps have been applied in total.
    pub fn run(mut self) -> Result<(EmbeddingNet, TrainLog)> {
        while self.next_step < self.cfg.steps {
            self.step()?;
        }
        Ok((self.net, self.log))
    }

    pub fn into_parts(self) -> (EmbeddingNet, AdaGradState, TrainLog) {
        (self.net, self.state, self.log)
    }
}

/// Splitmix-style mixing of a seed with a step counter.
pub(crate) fn mix(seed: u64, step: u64) -> u64 {
    let mut z = seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn checkpoint_paths(dir: &Path, step: usize) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("ckpt_{step:06}.tnet")),
        dir.join(format!("adagrad_{step:06}.tnet")),
    )
}

fn write_checkpoint_pair(
    dir: &Path,
    step: usize,
    net: &EmbeddingNet,
    state: &AdaGradState,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (net_path, state_path) = checkpoint_paths(dir, step);
    fs::write(net_path, net.save_checkpoint())?;
    fs::write(state_path, state.to_bytes())?;
    Ok(())
}

pub fn train(
    net: EmbeddingNet,
    set: &LabeledSet,
    cfg: &TrainConfig,
) -> Result<(EmbeddingNet, TrainLog)> {
    Trainer::new(net, set, cfg)?.run()
}
