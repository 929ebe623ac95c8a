//! Triplet-loss embedding learning on the unit hypersphere.
//!
//! A small dense network maps input vectors to unit-norm embeddings so that
//! squared Euclidean distance encodes identity. Training mines semi-hard
//! triplets online from each mini-batch and optimizes the hinge triplet loss
//! with AdaGrad. Around that sit verification metrics (VAL/FAR sweeps and the
//! tenfold threshold protocol), int8 quantization, agglomerative clustering,
//! and harmonic training of a new network against a frozen older one.
//!
//! ```
//! use tripletspace::dataio::{generate_synthetic, SyntheticSpec};
//! use tripletspace::model::{new_network, NetConfig};
//!
//! let data = generate_synthetic(&SyntheticSpec { num_identities: 4, samples_per_identity: 3, ..Default::default() })?;
//! let net = new_network(NetConfig::new(64, vec![32], 16))?;
//! let embeddings = net.embed(&data.inputs)?;
//! assert_eq!(embeddings.len(), 12);
//! # Ok::<(), tripletspace::Error>(())
//! ```

// `!(x >= y)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod cluster;
pub mod dataio;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod harmonic;
pub mod loss;
pub mod mining;
pub mod model;
pub mod trainer;

pub use error::{Error, Result};
pub use geometry::{Embedding, Matrix};
pub use model::{EmbeddingNet, NetConfig};
pub use trainer::{train, TrainConfig};
