//! Command-line front end.
//!
//! Every subcommand reads a flat set of `snake_case` keys. Values come from
//! the built-in defaults, then an optional `--config` file of `key = value`
//! lines, then `--kebab-case` flags; later sources win. Outputs go to
//! `--out <dir>` under fixed names, together with `config.resolved` (the
//! merged keys, usable as a `--config` file) and `run.json`.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Arg, ArgAction, ArgMatches, Command};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::cluster::{agglomerative_cluster, pairwise_f1, Linkage};
use crate::dataio::{
    encode_vectors, generate_synthetic, read_vectors, split_by_identity, write_manifest,
    write_split_file, LabeledSet, Split, SyntheticSpec, VectorFile,
};
use crate::error::Error;
use crate::eval::{
    dequantize, encode_quantized, quantize, roc_sweep, tenfold_accuracy, val_at_far, DistanceMap,
    Folds, PairSet, TenfoldReport,
};
use crate::geometry::{Embedding, Matrix};
use crate::harmonic::{
    cross_version_report, embed_map, AnchorVersions, HarmonicConfig, HarmonicSession, Stage,
};
use crate::model::{new_network, EmbeddingNet, NetConfig};
use crate::trainer::{AdaGradState, TrainConfig, Trainer, TRAIN_KEYS};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

/// Environment variable capping worker threads (0 = one per core).
pub const THREADS_ENV: &str = "TRIPLETSPACE_THREADS";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(Error),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage: {m}"),
            CliError::Data(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Data(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.into())
    }
}

type CliResult<T = ()> = std::result::Result<T, CliError>;

struct Key {
    name: &'static str,
    default: String,
    help: &'static str,
}

fn key(name: &'static str, default: impl Into<String>, help: &'static str) -> Key {
    Key {
        name,
        default: default.into(),
        help,
    }
}

fn grid_keys() -> Vec<Key> {
    vec![
        key("threshold_step", "0.001", "spacing of the threshold grid"),
        key("threshold_max", "4.0", "last threshold of the grid"),
    ]
}

fn train_keys() -> Vec<Key> {
    let defaults = TrainConfig::default().to_kv();
    TRAIN_KEYS
        .iter()
        .map(|&k| key(k, defaults[k].clone(), "training setting"))
        .collect()
}

fn command_keys(name: &str) -> Vec<Key> {
    let spec = SyntheticSpec::default();
    let mut keys = match name {
        "synth" => vec![
            key(
                "num_identities",
                spec.num_identities.to_string(),
                "identities to generate",
            ),
            key(
                "samples_per_identity",
                spec.samples_per_identity.to_string(),
                "samples per identity",
            ),
            key(
                "latent_dim",
                spec.latent_dim.to_string(),
                "latent sphere dimension",
            ),
            key(
                "input_dim",
                spec.input_dim.to_string(),
                "input vector dimension",
            ),
            key(
                "noise_sigma",
                spec.noise_sigma.to_string(),
                "per-coordinate latent noise",
            ),
            key(
                "distortion_layers",
                spec.distortion_layers.to_string(),
                "depth of the random lift",
            ),
            key("seed", spec.seed.to_string(), "generator seed"),
            key("holdout_fraction", "0.3", "fraction of identities held out"),
            key("split_seed", "0", "identity split seed"),
        ],
        "train" => {
            let mut k = vec![
                key("input", "", "labeled training vectors (TVEC)"),
                key("eval_input", "", "labeled vectors for periodic evaluation"),
                key("hidden_dims", "64,64", "comma-separated hidden widths"),
                key("embedding_dim", "128", "embedding dimension"),
                key("init_scale", "1.0", "weight init scale"),
                key("net_seed", "0", "weight init seed"),
                key(
                    "init_checkpoint",
                    "",
                    "start from this network instead of a fresh one",
                ),
                key("init_state", "", "AdaGrad accumulators to resume from"),
                key("start_step", "0", "steps already applied when resuming"),
            ];
            k.extend(train_keys());
            k
        }
        "embed" => vec![
            key("checkpoint", "", "network checkpoint (TNET)"),
            key("input", "", "vectors to embed (TVEC)"),
        ],
        "eval-roc" => {
            let mut k = vec![
                key("embeddings", "", "labeled embeddings (TVEC)"),
                key(
                    "pairs",
                    "",
                    "pair list; default is every pair of the labels",
                ),
            ];
            k.extend(grid_keys());
            k
        }
        "eval-tenfold" => {
            let mut k = vec![
                key("embeddings", "", "labeled embeddings (TVEC)"),
                key(
                    "pairs",
                    "",
                    "pair list; default is a balanced sample of the labels",
                ),
                key("pair_seed", "0", "seed of the balanced pair sample"),
                key("fold_seed", "0", "seed of the fold assignment"),
            ];
            k.extend(grid_keys());
            k
        }
        "val-at-far" => {
            let mut k = vec![
                key("embeddings", "", "labeled embeddings (TVEC)"),
                key(
                    "pairs",
                    "",
                    "pair list; default is every pair of the labels",
                ),
                key("far", "0.01", "target false accept rate"),
            ];
            k.extend(grid_keys());
            k
        }
        "cluster" => {
            let mut k = vec![
                key("embeddings", "", "embeddings (TVEC); labels enable scoring"),
                key(
                    "cutoff",
                    "",
                    "merge cutoff; default is the mean tenfold threshold",
                ),
                key(
                    "linkage",
                    Linkage::default().to_string(),
                    "single, average or complete",
                ),
                key(
                    "pair_seed",
                    "0",
                    "seed of the balanced pairs for the default cutoff",
                ),
                key("fold_seed", "0", "seed of the folds for the default cutoff"),
            ];
            k.extend(grid_keys());
            k
        }
        "quantize" => vec![key("embeddings", "", "embeddings (TVEC)")],
        "harmonic" => {
            let mut k = vec![
                key("input", "", "labeled training vectors (TVEC)"),
                key(
                    "v1_embeddings",
                    "",
                    "old-model embeddings of the training vectors, row-aligned",
                ),
                key("v2_checkpoint", "", "new network to retrain"),
                key("eval_input", "", "labeled evaluation vectors"),
                key(
                    "eval_v1_embeddings",
                    "",
                    "old-model embeddings of the evaluation vectors",
                ),
                key(
                    "last_layer_steps",
                    "1000",
                    "steps updating only the last layer",
                ),
                key("full_steps", "1000", "steps updating the whole network"),
                key(
                    "reinit_last_layer",
                    "true",
                    "redraw the last layer before retraining",
                ),
                key("reinit_seed", "0", "seed for the redrawn last layer"),
                key("init_scale", "1.0", "scale for the redrawn last layer"),
                key("anchors", "v2", "anchor versions: v2 or both"),
                key("far", "0.01", "target false accept rate for the summary"),
            ];
            k.extend(train_keys().into_iter().filter(|k| k.name != "steps"));
            k.extend(grid_keys());
            k
        }
        _ => Vec::new(),
    };
    keys.push(key("out", "out", "output directory"));
    keys
}

const COMMANDS: &[(&str, &str)] = &[
    ("synth", "generate a synthetic identity dataset"),
    ("train", "train an embedding network"),
    ("embed", "embed vectors with a checkpoint"),
    ("eval-roc", "VAL/FAR sweep over a threshold grid"),
    ("eval-tenfold", "tenfold threshold selection and accuracy"),
    ("val-at-far", "VAL at a target FAR"),
    ("cluster", "agglomerative clustering of embeddings"),
    ("quantize", "int8 quantization of embeddings"),
    (
        "harmonic",
        "retrain a new network to be compatible with old embeddings",
    ),
];

fn kebab(name: &str) -> String {
    name.replace('_', "-")
}

pub fn command() -> Command {
    let mut cmd = Command::new("tripletspace")
        .about("Triplet-loss embeddings on the unit hypersphere")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for &(name, about) in COMMANDS {
        let mut sub = Command::new(name).about(about).arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .help("key = value file; flags override it"),
        );
        for k in command_keys(name) {
            sub = sub.arg(
                Arg::new(k.name)
                    .long(kebab(k.name))
                    .value_name("VALUE")
                    .action(ArgAction::Set)
                    .help(format!("{} [default: {:?}]", k.help, k.default)),
            );
        }
        cmd = cmd.subcommand(sub);
    }
    cmd
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_config(text: &str) -> CliResult<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            CliError::Usage(format!("config line {}: expected key = value", n + 1))
        })?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn resolve(
    name: &str,
    matches: &ArgMatches,
) -> CliResult<(BTreeMap<String, String>, Option<PathBuf>)> {
    let keys = command_keys(name);
    let mut params: BTreeMap<String, String> = keys
        .iter()
        .map(|k| (k.name.to_string(), k.default.clone()))
        .collect();
    let config_path = matches.get_one::<String>("config").map(PathBuf::from);
    if let Some(path) = &config_path {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        for (k, v) in parse_config(&text)? {
            if !params.contains_key(&k) {
                return Err(CliError::Usage(format!(
                    "unknown config key {k:?} for {name}"
                )));
            }
            params.insert(k, v);
        }
    }
    for k in &keys {
        if let Some(v) = matches.get_one::<String>(k.name) {
            params.insert(k.name.to_string(), v.clone());
        }
    }
    Ok((params, config_path))
}

#[derive(Debug, Serialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
    /// False for files that embed wall-clock time.
    pub deterministic: bool,
}

/// Everything needed to rerun a command and check its outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<String>,
    pub params: BTreeMap<String, String>,
    pub seeds: BTreeMap<String, String>,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub version: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

fn artifact(path: &Path, deterministic: bool) -> CliResult<Artifact> {
    let bytes = fs::read(path)?;
    Ok(Artifact {
        path: path.display().to_string(),
        sha256: sha256_hex(&bytes),
        bytes: bytes.len() as u64,
        deterministic,
    })
}

struct Ctx {
    command: String,
    params: BTreeMap<String, String>,
    out: PathBuf,
    inputs: Vec<PathBuf>,
    outputs: Vec<(PathBuf, bool)>,
}

impl Ctx {
    fn str(&self, key: &str) -> &str {
        self.params.get(key).map_or("", |s| s.trim())
    }

    fn get<T: FromStr>(&self, key: &str) -> CliResult<T>
    where
        T::Err: fmt::Display,
    {
        self.str(key)
            .parse()
            .map_err(|e| CliError::Usage(format!("--{} {:?}: {e}", kebab(key), self.str(key))))
    }

    fn optional_path(&mut self, key: &str) -> Option<PathBuf> {
        let v = self.str(key);
        if v.is_empty() {
            return None;
        }
        let p = PathBuf::from(v);
        self.inputs.push(p.clone());
        Some(p)
    }

    fn path(&mut self, key: &str) -> CliResult<PathBuf> {
        self.optional_path(key)
            .ok_or_else(|| CliError::Usage(format!("{} requires --{}", self.command, kebab(key))))
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> CliResult<PathBuf> {
        self.write_as(name, bytes, true)
    }

    fn write_as(&mut self, name: &str, bytes: &[u8], deterministic: bool) -> CliResult<PathBuf> {
        let path = self.out.join(name);
        fs::write(&path, bytes)?;
        self.outputs.push((path.clone(), deterministic));
        Ok(path)
    }

    fn write_csv(
        &mut self,
        name: &str,
        f: impl FnOnce(&mut Vec<u8>) -> crate::Result<()>,
    ) -> CliResult<PathBuf> {
        let mut buf = Vec::new();
        f(&mut buf)?;
        self.write(name, &buf)
    }

    fn grid(&self) -> CliResult<Vec<f64>> {
        let step: f64 = self.get("threshold_step")?;
        let max: f64 = self.get("threshold_max")?;
        if !(step > 0.0 && max >= 0.0) {
            return Err(
                Error::InvalidConfig("threshold grid needs step > 0 and max >= 0".into()).into(),
            );
        }
        let n = (max / step + 1e-9).floor() as usize;
        // Divide by an integral inverse when there is one, so 0.001 * 941
        // comes out as 0.941.
        let inv = (1.0 / step).round();
        let exact = (1.0 / step - inv).abs() < 1e-9;
        Ok((0..=n)
            .map(|i| {
                if exact {
                    i as f64 / inv
                } else {
                    i as f64 * step
                }
            })
            .collect())
    }
}

fn labeled(file: VectorFile, what: &str) -> CliResult<LabeledSet> {
    let labels = file
        .labels
        .ok_or_else(|| Error::InvalidConfig(format!("{what} has no labels")))?;
    Ok(LabeledSet::new(file.data, labels)?)
}

fn embeddings_of(file: &VectorFile) -> CliResult<Vec<Embedding>> {
    file.data
        .iter_rows()
        .map(|r| Embedding::from_unit(r.to_vec()).map_err(CliError::from))
        .collect()
}

fn embeddings_matrix(e: &[Embedding]) -> crate::Result<Matrix> {
    let dim = e.first().map_or(0, Embedding::dim);
    Matrix::from_vec(
        e.len(),
        dim,
        e.iter().flat_map(|x| x.values().iter().copied()).collect(),
    )
}

fn read_pairs(ctx: &mut Ctx) -> CliResult<Option<PairSet>> {
    match ctx.optional_path("pairs") {
        Some(p) => Ok(Some(PairSet::parse(&fs::read_to_string(p)?)?)),
        None => Ok(None),
    }
}

fn tenfold_on(
    e: &[Embedding],
    pairs: &PairSet,
    fold_seed: u64,
    grid: &[f64],
) -> CliResult<TenfoldReport> {
    let d = DistanceMap::from_embeddings(e, pairs)?;
    Ok(tenfold_accuracy(
        &d,
        pairs,
        &Folds::balanced(pairs, fold_seed),
        grid,
    )?)
}

fn run_synth(ctx: &mut Ctx) -> CliResult {
    let spec = SyntheticSpec {
        num_identities: ctx.get("num_identities")?,
        samples_per_identity: ctx.get("samples_per_identity")?,
        latent_dim: ctx.get("latent_dim")?,
        input_dim: ctx.get("input_dim")?,
        noise_sigma: ctx.get("noise_sigma")?,
        distortion_layers: ctx.get("distortion_layers")?,
        seed: ctx.get("seed")?,
    };
    let data = split_by_identity(
        &generate_synthetic(&spec)?,
        ctx.get("holdout_fraction")?,
        ctx.get("split_seed")?,
    )?;
    ctx.write(
        "dataset.tvec",
        &encode_vectors(&data.inputs, Some(&data.labels))?,
    )?;
    for (split, name) in [
        (Split::Train, "train.tvec"),
        (Split::Holdout, "holdout.tvec"),
    ] {
        let s = data.subset(split);
        ctx.write(name, &encode_vectors(&s.inputs, Some(&s.labels))?)?;
    }
    ctx.write_csv("manifest.csv", |w| write_manifest(w, &data.labels))?;
    ctx.write_csv("split.csv", |w| write_split_file(w, &data.splits))?;
    println!(
        "synth: {} samples, {} train / {} holdout identities",
        data.len(),
        data.identities(Some(Split::Train)).len(),
        data.identities(Some(Split::Holdout)).len()
    );
    Ok(())
}

fn parse_dims(text: &str) -> CliResult<Vec<usize>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .map_err(|e| CliError::Usage(format!("--hidden-dims {text:?}: {e}")))
        })
        .collect()
}

fn train_config(ctx: &Ctx, skip: &[&str]) -> CliResult<TrainConfig> {
    let mut cfg = TrainConfig::default();
    for &k in TRAIN_KEYS.iter().filter(|k| !skip.contains(k)) {
        cfg.set(k, ctx.str(k))?;
    }
    Ok(cfg)
}

fn run_train(ctx: &mut Ctx) -> CliResult {
    let input = ctx.path("input")?;
    let set = labeled(read_vectors(&input)?, "training input")?;
    let eval = match ctx.optional_path("eval_input") {
        Some(p) => Some(labeled(read_vectors(&p)?, "eval input")?),
        None => None,
    };
    let net = match ctx.optional_path("init_checkpoint") {
        Some(p) => EmbeddingNet::load_checkpoint(&fs::read(p)?)?,
        None => new_network(NetConfig {
            input_dim: set.inputs.cols(),
            hidden_dims: parse_dims(ctx.str("hidden_dims"))?,
            embedding_dim: ctx.get("embedding_dim")?,
            init_scale: ctx.get("init_scale")?,
            seed: ctx.get("net_seed")?,
        })?,
    };
    let state = match ctx.optional_path("init_state") {
        Some(p) => AdaGradState::from_bytes(&fs::read(p)?)?,
        None => AdaGradState::for_network(&net),
    };
    let mut cfg = train_config(ctx, &[])?;
    if cfg.checkpoint_every > 0 && cfg.checkpoint_dir.is_none() {
        cfg.checkpoint_dir = Some(ctx.out.join("checkpoints"));
    }
    let mut trainer = Trainer::resume(net, state, ctx.get("start_step")?, &set, &cfg)?;
    if let Some(eval) = &eval {
        trainer = trainer.with_eval_set(eval);
    }
    while trainer.next_step() < cfg.steps {
        trainer.step()?;
    }
    let (net, state, log) = trainer.into_parts();

    ctx.write("model.tnet", &net.save_checkpoint())?;
    ctx.write("adagrad.tnet", &state.to_bytes())?;
    let mut buf = Vec::new();
    log.write_csv(&mut buf)?;
    ctx.write_as("train_log.csv", &buf, false)?;
    if !log.evals.is_empty() {
        ctx.write_csv("eval_log.csv", |w| {
            writeln!(w, "step,val,threshold")?;
            for e in &log.evals {
                writeln!(w, "{},{},{}", e.step, e.val, e.threshold)?;
            }
            Ok(())
        })?;
    }
    if let Some(dir) = &cfg.checkpoint_dir {
        if let Ok(entries) = fs::read_dir(dir) {
            let mut paths: Vec<PathBuf> =
                entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
            paths.sort();
            ctx.outputs.extend(paths.into_iter().map(|p| (p, true)));
        }
    }
    let last = log.records.last();
    println!(
        "train: {} steps, final loss {:.6}, active {}/{}",
        log.records.len(),
        last.map_or(0.0, |r| r.loss),
        last.map_or(0, |r| r.active),
        last.map_or(0, |r| r.triplets)
    );
    Ok(())
}

fn run_embed(ctx: &mut Ctx) -> CliResult {
    let net = EmbeddingNet::load_checkpoint(&fs::read(ctx.path("checkpoint")?)?)?;
    let input = read_vectors(&ctx.path("input")?)?;
    let e = net.embed(&input.data)?;
    ctx.write(
        "embeddings.tvec",
        &encode_vectors(&embeddings_matrix(&e)?, input.labels.as_deref())?,
    )?;
    println!("embed: {} vectors -> dim {}", e.len(), net.embedding_dim());
    Ok(())
}

fn run_eval_roc(ctx: &mut Ctx) -> CliResult {
    let file = read_vectors(&ctx.path("embeddings")?)?;
    let e = embeddings_of(&file)?;
    let pairs = match read_pairs(ctx)? {
        Some(p) => p,
        None => PairSet::all_pairs(file.labels.as_deref().ok_or(Error::InvalidConfig(
            "embeddings have no labels; pass --pairs".into(),
        ))?),
    };
    let report = roc_sweep(
        &DistanceMap::from_embeddings(&e, &pairs)?,
        &pairs,
        &ctx.grid()?,
    )?;
    ctx.write_csv("roc.csv", |w| report.write_csv(w))?;
    println!(
        "eval-roc: {} same / {} diff pairs, {} thresholds",
        pairs.same.len(),
        pairs.diff.len(),
        report.len()
    );
    Ok(())
}

fn run_eval_tenfold(ctx: &mut Ctx) -> CliResult {
    let file = read_vectors(&ctx.path("embeddings")?)?;
    let e = embeddings_of(&file)?;
    let pairs = match read_pairs(ctx)? {
        Some(p) => p,
        None => PairSet::balanced(
            file.labels.as_deref().ok_or(Error::InvalidConfig(
                "embeddings have no labels; pass --pairs".into(),
            ))?,
            ctx.get("pair_seed")?,
        ),
    };
    let report = tenfold_on(&e, &pairs, ctx.get("fold_seed")?, &ctx.grid()?)?;
    ctx.write_csv("tenfold.csv", |w| report.write_csv(w))?;
    println!(
        "eval-tenfold: accuracy {:.4} +- {:.4}, thresholds {:?}",
        report.mean_accuracy, report.std_error, report.fold_thresholds
    );
    Ok(())
}

fn run_val_at_far(ctx: &mut Ctx) -> CliResult {
    let file = read_vectors(&ctx.path("embeddings")?)?;
    let e = embeddings_of(&file)?;
    let pairs = match read_pairs(ctx)? {
        Some(p) => p,
        None => PairSet::all_pairs(file.labels.as_deref().ok_or(Error::InvalidConfig(
            "embeddings have no labels; pass --pairs".into(),
        ))?),
    };
    let report = roc_sweep(
        &DistanceMap::from_embeddings(&e, &pairs)?,
        &pairs,
        &ctx.grid()?,
    )?;
    let op = val_at_far(&report, ctx.get("far")?)?;
    ctx.write_csv("operating_point.csv", |w| {
        writeln!(w, "val,far,threshold,qualified")?;
        writeln!(w, "{},{},{},{}", op.val, op.far, op.threshold, op.qualified)?;
        Ok(())
    })?;
    println!(
        "val-at-far: VAL {:.4} at FAR {:.5} (threshold {})",
        op.val, op.far, op.threshold
    );
    Ok(())
}

fn run_cluster(ctx: &mut Ctx) -> CliResult {
    let file = read_vectors(&ctx.path("embeddings")?)?;
    let e = embeddings_of(&file)?;
    let linkage: Linkage = ctx.get("linkage")?;
    let cutoff = if ctx.str("cutoff").is_empty() {
        let labels = file.labels.as_deref().ok_or(Error::InvalidConfig(
            "default cutoff needs labeled embeddings; pass --cutoff".into(),
        ))?;
        let pairs = PairSet::balanced(labels, ctx.get("pair_seed")?);
        let t = tenfold_on(&e, &pairs, ctx.get("fold_seed")?, &ctx.grid()?)?;
        t.fold_thresholds.iter().sum::<f64>() / t.fold_thresholds.len() as f64
    } else {
        ctx.get("cutoff")?
    };
    let c = agglomerative_cluster(&e, cutoff, linkage)?;
    let ids: Vec<usize> = (0..c.len()).collect();
    let path = ctx.out.join("clusters.csv");
    c.write_csv(&path, &ids)?;
    ctx.outputs.push((path, true));
    let mut summary = format!("cluster: {} clusters at cutoff {cutoff:.4}", c.num_clusters);
    if let Some(labels) = &file.labels {
        let s = pairwise_f1(&c, labels)?;
        ctx.write_csv("cluster_scores.csv", |w| {
            writeln!(w, "num_clusters,cutoff,precision,recall,f1")?;
            writeln!(
                w,
                "{},{},{},{},{}",
                c.num_clusters, cutoff, s.precision, s.recall, s.f1
            )?;
            Ok(())
        })?;
        summary += &format!(", pairwise F1 {:.4}", s.f1);
    }
    println!("{summary}");
    Ok(())
}

fn run_quantize(ctx: &mut Ctx) -> CliResult {
    let file = read_vectors(&ctx.path("embeddings")?)?;
    let e = embeddings_of(&file)?;
    let codes: Vec<_> = e.iter().map(quantize).collect();
    ctx.write("quantized.tq08", &encode_quantized(&codes)?)?;
    let back = codes
        .iter()
        .map(dequantize)
        .collect::<crate::Result<Vec<_>>>()?;
    ctx.write(
        "dequantized.tvec",
        &encode_vectors(&embeddings_matrix(&back)?, file.labels.as_deref())?,
    )?;
    println!(
        "quantize: {} vectors, {} bytes each",
        codes.len(),
        file.data.cols()
    );
    Ok(())
}

fn embedding_map_for(
    file: &VectorFile,
    rows: usize,
    what: &str,
) -> CliResult<crate::harmonic::EmbeddingMap> {
    if file.data.rows() != rows {
        return Err(Error::InvalidConfig(format!(
            "{what} has {} rows, expected {rows}",
            file.data.rows()
        ))
        .into());
    }
    Ok(embeddings_of(file)?.into_iter().enumerate().collect())
}

fn run_harmonic(ctx: &mut Ctx) -> CliResult {
    let set = labeled(read_vectors(&ctx.path("input")?)?, "training input")?;
    let v1 = embedding_map_for(
        &read_vectors(&ctx.path("v1_embeddings")?)?,
        set.len(),
        "v1 embeddings",
    )?;
    let mut net = EmbeddingNet::load_checkpoint(&fs::read(ctx.path("v2_checkpoint")?)?)?;
    if ctx.get::<bool>("reinit_last_layer")? {
        net.reinit_last_layer(ctx.get("init_scale")?, ctx.get("reinit_seed")?);
    }
    let anchors = match ctx.str("anchors") {
        "v2" => AnchorVersions::V2Only,
        "both" => AnchorVersions::Both,
        other => {
            return Err(CliError::Usage(format!(
                "--anchors {other:?}: expected v2 or both"
            )))
        }
    };
    let cfg = HarmonicConfig {
        train: train_config(ctx, &["steps"])?,
        anchors,
        require_staging: true,
    };
    let mut session = HarmonicSession::new(net, &v1, &set, &cfg)?;
    session.run_stage(Stage::LastLayerOnly, ctx.get("last_layer_steps")?)?;
    session.run_stage(Stage::FullNetwork, ctx.get("full_steps")?)?;
    let (net, log) = session.finish();
    ctx.write("model.tnet", &net.save_checkpoint())?;
    ctx.write_csv("train_log.csv", |w| log.write_csv(w))?;

    if let Some(eval_path) = ctx.optional_path("eval_input") {
        let eval = labeled(read_vectors(&eval_path)?, "eval input")?;
        let v1_eval_path = ctx.path("eval_v1_embeddings")?;
        let v1_eval = embedding_map_for(
            &read_vectors(&v1_eval_path)?,
            eval.len(),
            "eval v1 embeddings",
        )?;
        let eval_local = LabeledSet::new(eval.inputs.clone(), eval.labels.clone())?;
        let v2_eval = embed_map(&net, &eval_local)?;
        let pairs = PairSet::all_pairs(&eval.labels);
        let report = cross_version_report(&v1_eval, &v2_eval, &pairs, &ctx.grid()?)?;
        let far: f64 = ctx.get("far")?;
        let mut summary = String::from("comparison,val,far,threshold\n");
        for (name, r) in [
            ("v1_v1", &report.v1_v1),
            ("v2_v2", &report.v2_v2),
            ("mixed", &report.mixed),
        ] {
            ctx.write_csv(&format!("roc_{name}.csv"), |w| r.write_csv(w))?;
            let op = val_at_far(r, far)?;
            summary += &format!("{name},{},{},{}\n", op.val, op.far, op.threshold);
            println!("harmonic: {name} VAL {:.4} at FAR {:.5}", op.val, op.far);
        }
        ctx.write("cross_version.csv", summary.as_bytes())?;
    }
    println!("harmonic: {} steps", log.records.len());
    Ok(())
}

fn execute(name: &str, ctx: &mut Ctx) -> CliResult {
    match name {
        "synth" => run_synth(ctx),
        "train" => run_train(ctx),
        "embed" => run_embed(ctx),
        "eval-roc" => run_eval_roc(ctx),
        "eval-tenfold" => run_eval_tenfold(ctx),
        "val-at-far" => run_val_at_far(ctx),
        "cluster" => run_cluster(ctx),
        "quantize" => run_quantize(ctx),
        "harmonic" => run_harmonic(ctx),
        other => Err(CliError::Usage(format!("unknown command {other}"))),
    }
}

fn write_manifest_atomically(ctx: &Ctx, config_path: Option<&Path>, started: f64) -> CliResult {
    let mut outputs = Vec::with_capacity(ctx.outputs.len());
    for (p, det) in &ctx.outputs {
        outputs.push(artifact(p, *det)?);
    }
    let mut inputs = Vec::with_capacity(ctx.inputs.len());
    for p in &ctx.inputs {
        inputs.push(artifact(p, true)?);
    }
    let manifest = RunManifest {
        command: ctx.command.clone(),
        config_path: config_path.map(|p| p.display().to_string()),
        seeds: ctx
            .params
            .iter()
            .filter(|(k, _)| k.ends_with("seed"))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect(),
        params: ctx.params.clone(),
        inputs,
        outputs,
        started_unix: started,
        finished_unix: unix_now(),
        version: env!("CARGO_PKG_VERSION").to_string(),
    };
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::Parse(e.to_string()))?;
    let tmp = ctx.out.join("run.json.tmp");
    fs::write(&tmp, json)?;
    fs::rename(&tmp, ctx.out.join("run.json"))?;
    Ok(())
}

fn configure_threads() {
    let n = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .unwrap_or(0);
    if n > 0 {
        // Fails only if a pool already exists, e.g. on a second call in-process.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
}

/// Runs one command line and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    configure_threads();
    let Some((name, sub)) = matches.subcommand() else {
        return EXIT_USAGE;
    };
    match dispatch(name, sub) {
        Ok(()) => EXIT_OK,
        Err(e @ CliError::Usage(_)) => {
            eprintln!("error: {e}");
            EXIT_USAGE
        }
        Err(e @ CliError::Data(_)) => {
            eprintln!("error: {e}");
            EXIT_DATA
        }
    }
}

fn dispatch(name: &str, sub: &ArgMatches) -> CliResult {
    let started = unix_now();
    let (params, config_path) = resolve(name, sub)?;
    let out = PathBuf::from(params.get("out").map_or("out", |s| s.as_str()));
    fs::create_dir_all(&out)?;
    let mut ctx = Ctx {
        command: name.to_string(),
        params,
        out,
        inputs: Vec::new(),
        outputs: Vec::new(),
    };
    if let Some(p) = &config_path {
        ctx.inputs.push(p.clone());
    }
    execute(name, &mut ctx)?;
    let resolved: String = ctx
        .params
        .iter()
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect();
    ctx.write("config.resolved", resolved.as_bytes())?;
    write_manifest_atomically(&ctx, config_path.as_deref(), started)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_parsing() {
        let c = parse_config("# comment\nsteps = 10\n\nmargin=0.3 # inline\n").unwrap();
        assert_eq!(c["steps"], "10");
        assert_eq!(c["margin"], "0.3");
        assert!(matches!(parse_config("steps 10"), Err(CliError::Usage(_))));
    }

    #[test]
    fn every_command_builds() {
        command().debug_assert();
        for &(name, _) in COMMANDS {
            let keys = command_keys(name);
            assert!(keys.iter().any(|k| k.name == "out"), "{name}");
        }
        assert_eq!(
            command_keys("train")
                .iter()
                .filter(|k| TRAIN_KEYS.contains(&k.name))
                .count(),
            TRAIN_KEYS.len()
        );
    }

    #[test]
    fn flags_override_config() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.txt");
        fs::write(&cfg, "num_identities = 7\nseed = 3\n").unwrap();
        let m = command()
            .try_get_matches_from([
                "tripletspace",
                "synth",
                "--config",
                cfg.to_str().unwrap(),
                "--seed",
                "9",
            ])
            .unwrap();
        let (_, sub) = m.subcommand().unwrap();
        let (params, _) = resolve("synth", sub).unwrap();
        assert_eq!(params["num_identities"], "7");
        assert_eq!(params["seed"], "9");
        assert_eq!(params["latent_dim"], "8");

        fs::write(&cfg, "bogus = 1\n").unwrap();
        let m = command()
            .try_get_matches_from(["tripletspace", "synth", "--config", cfg.to_str().unwrap()])
            .unwrap();
        let (_, sub) = m.subcommand().unwrap();
        assert!(matches!(resolve("synth", sub), Err(CliError::Usage(_))));
    }

    #[test]
    fn sha256_known_value() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
