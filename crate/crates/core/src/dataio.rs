//! Synthetic identity datasets, identity-disjoint splits, and on-disk formats.
//!
//! Each identity is a point on a low-dimensional latent sphere. A sample is
//! that point plus isotropic Gaussian noise, renormalized, then lifted into
//! input space by a fixed random ReLU network. Recovering identity geometry
//! means learning to undo the lift.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::geometry::{norm, Matrix};
use crate::mining::IdentityId;

const VECTOR_MAGIC: &[u8; 4] = b"TVEC";
const VECTOR_VERSION: u32 = 1;

/// Weight gain of the lift layers (He-style, `gain^2 / fan_in` variance).
const LIFT_GAIN: f64 = 2.0;
/// Standard deviation of lift biases.
const LIFT_BIAS_SD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub num_identities: usize,
    pub samples_per_identity: usize,
    pub latent_dim: usize,
    pub input_dim: usize,
    pub noise_sigma: f64,
    pub distortion_layers: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_identities: 50,
            samples_per_identity: 30,
            latent_dim: 8,
            input_dim: 64,
            noise_sigma: 0.15,
            distortion_layers: 2,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.to_string()));
        if self.num_identities == 0 || self.samples_per_identity == 0 {
            return bad("identity and sample counts must be positive");
        }
        if self.latent_dim < 2 {
            return bad("latent_dim must be at least 2");
        }
        if self.input_dim < self.latent_dim {
            return bad("input_dim must be >= latent_dim");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be >= 0");
        }
        if self.num_identities > u32::MAX as usize {
            return bad("too many identities");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Holdout,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Holdout => "holdout",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "holdout" => Ok(Split::Holdout),
            other => Err(Error::Parse(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Matrix,
    pub labels: Vec<IdentityId>,
    pub splits: Vec<Split>,
    /// Clean-plus-noise latent points, when the dataset was generated here.
    pub latents: Option<Matrix>,
}

/// Rows of a dataset with their labels and dataset-level row ids.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub inputs: Matrix,
    pub labels: Vec<IdentityId>,
    pub ids: Vec<usize>,
}

impl LabeledSet {
    pub fn new(inputs: Matrix, labels: Vec<IdentityId>) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::DimMismatch {
                expected: inputs.rows(),
                got: labels.len(),
            });
        }
        let ids = (0..labels.len()).collect();
        Ok(LabeledSet {
            inputs,
            labels,
            ids,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_identities(&self) -> usize {
        self.labels.iter().collect::<BTreeSet<_>>().len()
    }

    pub fn select(&self, rows: &[usize]) -> LabeledSet {
        LabeledSet {
            inputs: self.inputs.select_rows(rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            ids: rows.iter().map(|&r| self.ids[r]).collect(),
        }
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn identities(&self, split: Option<Split>) -> BTreeSet<IdentityId> {
        self.labels
            .iter()
            .zip(&self.splits)
            .filter(|(_, s)| split.is_none_or(|want| **s == want))
            .map(|(l, _)| *l)
            .collect()
    }

    pub fn subset(&self, split: Split) -> LabeledSet {
        let rows: Vec<usize> = (0..self.len())
            .filter(|&r| self.splits[r] == split)
            .collect();
        self.all().select(&rows)
    }

    pub fn all(&self) -> LabeledSet {
        LabeledSet {
            inputs: self.inputs.clone(),
            labels: self.labels.clone(),
            ids: (0..self.len()).collect(),
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn unit_gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| gaussian(rng)).collect();
        let n = norm(&v);
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

struct Lift {
    layers: Vec<(Matrix, Vec<f64>)>,
    input_dim: usize,
}

impl Lift {
    fn new(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Lift {
        let mut layers = Vec::with_capacity(spec.distortion_layers);
        let mut fan_in = spec.latent_dim;
        for _ in 0..spec.distortion_layers {
            let sd = LIFT_GAIN / (fan_in as f64).sqrt();
            let w = (0..spec.input_dim * fan_in)
                .map(|_| sd * gaussian(rng))
                .collect();
            let b = (0..spec.input_dim)
                .map(|_| LIFT_BIAS_SD * gaussian(rng))
                .collect();
            layers.push((
                Matrix::from_vec(spec.input_dim, fan_in, w).expect("sized"),
                b,
            ));
            fan_in = spec.input_dim;
        }
        Lift {
            layers,
            input_dim: spec.input_dim,
        }
    }

    fn apply(&self, latent: &[f64]) -> Vec<f64> {
        if self.layers.is_empty() {
            let mut out = latent.to_vec();
            out.resize(self.input_dim, 0.0);
            return out;
        }
        let mut h = latent.to_vec();
        for (w, b) in &self.layers {
            h = (0..w.rows())
                .map(|j| (crate::geometry::dot(w.row(j), &h) + b[j]).max(0.0))
                .collect();
        }
        h
    }
}

/// Generates a dataset with every sample tagged [`Split::Train`].
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let lift = Lift::new(spec, &mut rng);
    let centers: Vec<Vec<f64>> = (0..spec.num_identities)
        .map(|_| unit_gaussian(&mut rng, spec.latent_dim))
        .collect();

    let n = spec.num_identities * spec.samples_per_identity;
    let mut inputs = Matrix::zeros(n, spec.input_dim);
    let mut latents = Matrix::zeros(n, spec.latent_dim);
    let mut labels = Vec::with_capacity(n);
    let mut row = 0;
    for (id, center) in centers.iter().enumerate() {
        for _ in 0..spec.samples_per_identity {
            let mut z: Vec<f64> = center
                .iter()
                .map(|c| c + spec.noise_sigma * gaussian(&mut rng))
                .collect();
            let zn = norm(&z);
            if zn > 1e-12 {
                z.iter_mut().for_each(|x| *x /= zn);
            } else {
                z.clone_from(center);
            }
            inputs.row_mut(row).copy_from_slice(&lift.apply(&z));
            latents.row_mut(row).copy_from_slice(&z);
            labels.push(id as IdentityId);
            row += 1;
        }
    }
    Ok(Dataset {
        inputs,
        labels,
        splits: vec![Split::Train; n],
        latents: Some(latents),
    })
}

/// Moves a random `holdout_fraction` of identities (at least one, and at
/// least one left over) into the hold-out split.
pub fn split_by_identity(dataset: &Dataset, holdout_fraction: f64, seed: u64) -> Result<Dataset> {
    if !(holdout_fraction > 0.0 && holdout_fraction < 1.0) {
        return Err(Error::InvalidSpec(format!(
            "holdout fraction must be in (0, 1), got {holdout_fraction}"
        )));
    }
    let mut ids: Vec<IdentityId> = dataset.identities(None).into_iter().collect();
    if ids.len() < 2 {
        return Err(Error::TooFewIdentities(ids.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let k = ((ids.len() as f64 * holdout_fraction).round() as usize).clamp(1, ids.len() - 1);
    let holdout: BTreeSet<IdentityId> = ids[..k].iter().copied().collect();
    let mut out = dataset.clone();
    out.splits = dataset
        .labels
        .iter()
        .map(|l| {
            if holdout.contains(l) {
                Split::Holdout
            } else {
                Split::Train
            }
        })
        .collect();
    Ok(out)
}

/// A matrix with optional per-row labels, as stored in a TVEC file.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorFile {
    pub data: Matrix,
    pub labels: Option<Vec<IdentityId>>,
}

/// TVEC layout: `"TVEC" | version u32 | count u32 | dim u32 | has_labels u8 |
/// f32 rows | [u32 labels] | crc32`, little-endian, CRC over all preceding bytes.
pub fn encode_vectors(data: &Matrix, labels: Option<&[IdentityId]>) -> Result<Vec<u8>> {
    if let Some(l) = labels {
        if l.len() != data.rows() {
            return Err(Error::DimMismatch {
                expected: data.rows(),
                got: l.len(),
            });
        }
    }
    let mut out = Vec::with_capacity(21 + 4 * data.as_slice().len() + 4 * data.rows());
    out.extend_from_slice(VECTOR_MAGIC);
    out.extend_from_slice(&VECTOR_VERSION.to_le_bytes());
    out.extend_from_slice(&(data.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(data.cols() as u32).to_le_bytes());
    out.push(labels.is_some() as u8);
    for &v in data.as_slice() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    for &l in labels.unwrap_or(&[]) {
        out.extend_from_slice(&l.to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn decode_vectors(bytes: &[u8]) -> Result<VectorFile> {
    let corrupt = |m: &str| Error::CorruptFile(m.to_string());
    if bytes.len() < 21 {
        return Err(corrupt("truncated header"));
    }
    if &bytes[..4] != VECTOR_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let (body, crc) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(crc.try_into().expect("4 bytes")) {
        return Err(corrupt("crc mismatch"));
    }
    let u32_at = |at: usize| u32::from_le_bytes(body[at..at + 4].try_into().expect("4 bytes"));
    let version = u32_at(4);
    if version != VECTOR_VERSION {
        return Err(corrupt(&format!("unsupported version {version}")));
    }
    let count = u32_at(8) as usize;
    let dim = u32_at(12) as usize;
    let has_labels = match body[16] {
        0 => false,
        1 => true,
        _ => return Err(corrupt("bad label flag")),
    };
    let values = count
        .checked_mul(dim)
        .ok_or_else(|| corrupt("shape overflow"))?;
    let expected = 17 + 4 * values + if has_labels { 4 * count } else { 0 };
    if body.len() != expected {
        return Err(corrupt("length does not match shape"));
    }
    let data: Vec<f64> = body[17..17 + 4 * values]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    let labels = has_labels.then(|| {
        body[17 + 4 * values..]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect()
    });
    Ok(VectorFile {
        data: Matrix::from_vec(count, dim, data)?,
        labels,
    })
}

pub fn write_vectors(path: &Path, data: &Matrix, labels: Option<&[IdentityId]>) -> Result<()> {
    fs::write(path, encode_vectors(data, labels)?)?;
    Ok(())
}

pub fn read_vectors(path: &Path) -> Result<VectorFile> {
    decode_vectors(&fs::read(path)?)
}

/// `sample_id,identity_id` lines with a header.
pub fn write_manifest<W: Write>(mut w: W, labels: &[IdentityId]) -> Result<()> {
    writeln!(w, "sample_id,identity_id")?;
    for (i, l) in labels.iter().enumerate() {
        writeln!(w, "{i},{l}")?;
    }
    Ok(())
}

pub fn read_manifest(text: &str) -> Result<Vec<IdentityId>> {
    let mut labels = Vec::new();
    for (n, line) in text.lines().skip(1).enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, label) = line
            .split_once(',')
            .ok_or_else(|| Error::Parse(format!("manifest line {}: {line:?}", n + 2)))?;
        let id: usize = id
            .trim()
            .parse()
            .map_err(|_| Error::Parse(format!("bad sample id {id:?}")))?;
        if id != labels.len() {
            return Err(Error::Parse(format!(
                "manifest sample ids must be 0..N, got {id}"
            )));
        }
        labels.push(
            label
                .trim()
                .parse()
                .map_err(|_| Error::Parse(format!("bad identity {label:?}")))?,
        );
    }
    Ok(labels)
}

/// `sample_id,split` lines with a header.
pub fn write_split_file<W: Write>(mut w: W, splits: &[Split]) -> Result<()> {
    writeln!(w, "sample_id,split")?;
    for (i, s) in splits.iter().enumerate() {
        writeln!(w, "{i},{s}")?;
    }
    Ok(())
}
