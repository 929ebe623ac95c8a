//! Feedforward embedding network with an L2-normalization head.
//!
//! Architecture: `affine -> relu -> ... -> affine -> l2_normalize`. There is
//! no activation after the final affine layer. Gradients are exact, including
//! the Jacobian of the normalization `(I - y y^T) / |x|`.
//!
//! ReLU subgradient convention: the derivative at an exactly-zero
//! pre-activation is 0.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{dot, l2_normalize, norm, Embedding, Matrix};

const CHECKPOINT_MAGIC: &[u8; 4] = b"TNET";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub embedding_dim: usize,
    pub init_scale: f64,
    pub seed: u64,
}

impl NetConfig {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, embedding_dim: usize) -> Self {
        NetConfig {
            input_dim,
            hidden_dims,
            embedding_dim,
            ..Default::default()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidConfig("input_dim must be positive".into()));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::InvalidConfig("hidden dims must be positive".into()));
        }
        if self.embedding_dim < 2 {
            return Err(Error::InvalidConfig(
                "embedding_dim must be at least 2".into(),
            ));
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return Err(Error::InvalidConfig("init_scale must be positive".into()));
        }
        Ok(())
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut prev = self.input_dim;
        for &h in self
            .hidden_dims
            .iter()
            .chain(std::iter::once(&self.embedding_dim))
        {
            dims.push((h, prev));
            prev = h;
        }
        dims
    }
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            input_dim: 1,
            hidden_dims: Vec::new(),
            embedding_dim: 128,
            init_scale: 1.0,
            seed: 0,
        }
    }
}

/// Weights (`out x in`, row-major) and biases of one affine layer.
///
/// The same shape doubles as the carrier for gradients and optimizer
/// accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl LayerParams {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        LayerParams {
            weights: Matrix::zeros(out_dim, in_dim),
            bias: vec![0.0; out_dim],
        }
    }

    pub fn out_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.out_dim(), self.in_dim())
    }

    pub fn same_shape(&self, other: &LayerParams) -> bool {
        self.weights.shape() == other.weights.shape() && self.bias.len() == other.bias.len()
    }

    /// Weights then biases, in storage order.
    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.weights.as_slice().iter().chain(self.bias.iter())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights
            .as_mut_slice()
            .iter_mut()
            .chain(self.bias.iter_mut())
    }
}

/// Gradients of a scalar loss with respect to every network parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub layers: Vec<LayerParams>,
}

impl ParamGrads {
    pub fn zeros_for(net: &EmbeddingNet) -> Self {
        ParamGrads {
            layers: net.layers.iter().map(LayerParams::zeros_like).collect(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.layers.iter().all(|l| l.values().all(|&v| v == 0.0))
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(LayerParams::values)
    }

    /// Zeroes every layer except the final (embedding) layer.
    pub fn keep_last_layer_only(&mut self) {
        let n = self.layers.len();
        for layer in self.layers.iter_mut().take(n.saturating_sub(1)) {
            layer.values_mut().for_each(|v| *v = 0.0);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingNet {
    layers: Vec<LayerParams>,
    config: NetConfig,
}

/// Intermediate values of a forward pass, retained for backprop.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `activations[0]` is the input; `activations[l]` is the input to layer `l`.
    activations: Vec<Matrix>,
    /// Affine outputs of every layer, before the rectifier.
    pre_activations: Vec<Matrix>,
}

impl ForwardTrace {
    pub fn batch_size(&self) -> usize {
        self.activations[0].rows()
    }

    /// Affine outputs of layer `l`, before the rectifier.
    pub fn pre_activation(&self, l: usize) -> &Matrix {
        &self.pre_activations[l]
    }

    /// Final affine outputs, before normalization.
    pub fn outputs(&self) -> &Matrix {
        self.pre_activations
            .last()
            .expect("network has at least one layer")
    }

    pub fn output_norms(&self) -> Vec<f64> {
        self.outputs().iter_rows().map(norm).collect()
    }

    pub fn mean_output_norm(&self) -> f64 {
        let norms = self.output_norms();
        if norms.is_empty() {
            return 0.0;
        }
        norms.iter().sum::<f64>() / norms.len() as f64
    }

    pub fn embeddings(&self) -> Result<Vec<Embedding>> {
        self.outputs().iter_rows().map(l2_normalize).collect()
    }
}

impl EmbeddingNet {
    pub fn new(config: NetConfig) -> Result<Self> {
        new_network(config)
    }

    /// Assembles a network from explicit parameters.
    pub fn from_layers(layers: Vec<LayerParams>) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::InvalidConfig("network needs at least one layer".into()))?;
        for (l, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.out_dim() {
                return Err(Error::ShapeMismatch(format!(
                    "layer {l}: bias length {} vs {} outputs",
                    layer.bias.len(),
                    layer.out_dim()
                )));
            }
        }
        for (l, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::ShapeMismatch(format!(
                    "layer {l} outputs {} but layer {} expects {}",
                    pair[0].out_dim(),
                    l + 1,
                    pair[1].in_dim()
                )));
            }
        }
        let config = NetConfig {
            input_dim: first.in_dim(),
            hidden_dims: layers[..layers.len() - 1]
                .iter()
                .map(|l| l.out_dim())
                .collect(),
            embedding_dim: layers.last().map(|l| l.out_dim()).unwrap_or(0),
            ..Default::default()
        };
        config.validate()?;
        Ok(EmbeddingNet { layers, config })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.embedding_dim
    }

    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    /// Mutable parameter access. Shapes must not be changed.
    pub fn layers_mut(&mut self) -> &mut [LayerParams] {
        &mut self.layers
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.bias.len() * (l.in_dim() + 1))
            .sum()
    }

    /// Re-draws the final affine layer from the initializer, keeping the rest.
    pub fn reinit_last_layer(&mut self, init_scale: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let last = self
            .layers
            .last_mut()
            .expect("network has at least one layer");
        *last = init_layer(last.out_dim(), last.in_dim(), init_scale, &mut rng);
    }

    /// Forward pass without the normalization head.
    pub fn forward(&self, inputs: &Matrix) -> Result<ForwardTrace> {
        if inputs.cols() != self.input_dim() {
            return Err(Error::DimMismatch {
                expected: self.input_dim(),
                got: inputs.cols(),
            });
        }
        let n_layers = self.layers.len();
        let mut activations = Vec::with_capacity(n_layers);
        let mut pre_activations = Vec::with_capacity(n_layers);
        activations.push(inputs.clone());
        for (l, layer) in self.layers.iter().enumerate() {
            let z = affine(layer, activations.last().expect("pushed above"));
            if l + 1 < n_layers {
                let mut a = z.clone();
                a.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
                activations.push(a);
            }
            pre_activations.push(z);
        }
        Ok(ForwardTrace {
            activations,
            pre_activations,
        })
    }

    pub fn embed_batch(&self, inputs: &Matrix) -> Result<(Vec<Embedding>, ForwardTrace)> {
        embed_batch(self, inputs)
    }

    pub fn embed(&self, inputs: &Matrix) -> Result<Vec<Embedding>> {
        Ok(embed_batch(self, inputs)?.0)
    }

    pub fn backprop(
        &self,
        trace: &ForwardTrace,
        grad_wrt_embeddings: &Matrix,
    ) -> Result<ParamGrads> {
        backprop(self, trace, grad_wrt_embeddings)
    }

    pub fn save_checkpoint(&self) -> Vec<u8> {
        encode_params(&self.layers)
    }

    pub fn load_checkpoint(bytes: &[u8]) -> Result<Self> {
        let layers = decode_params(bytes)?;
        EmbeddingNet::from_layers(layers).map_err(|e| Error::CorruptCheckpoint(e.to_string()))
    }
}

fn init_layer(out_dim: usize, in_dim: usize, init_scale: f64, rng: &mut ChaCha8Rng) -> LayerParams {
    let bound = init_scale / (in_dim as f64).sqrt();
    let weights = (0..out_dim * in_dim)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    LayerParams {
        weights: Matrix::from_vec(out_dim, in_dim, weights).expect("sized above"),
        bias: vec![0.0; out_dim],
    }
}

/// Draws weights uniformly in `+-init_scale / sqrt(fan_in)`; biases start at zero.
pub fn new_network(config: NetConfig) -> Result<EmbeddingNet> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let layers = config
        .layer_dims()
        .into_iter()
        .map(|(out_dim, in_dim)| init_layer(out_dim, in_dim, config.init_scale, &mut rng))
        .collect();
    Ok(EmbeddingNet { layers, config })
}

fn affine(layer: &LayerParams, input: &Matrix) -> Matrix {
    let out_dim = layer.out_dim();
    let mut z = Matrix::zeros(input.rows(), out_dim);
    if out_dim == 0 {
        return z;
    }
    z.as_mut_slice()
        .par_chunks_mut(out_dim)
        .zip(input.as_slice().par_chunks(input.cols().max(1)))
        .for_each(|(z_row, x)| {
            for (j, out) in z_row.iter_mut().enumerate() {
                *out = dot(layer.weights.row(j), x) + layer.bias[j];
            }
        });
    z
}

pub fn embed_batch(net: &EmbeddingNet, inputs: &Matrix) -> Result<(Vec<Embedding>, ForwardTrace)> {
    let trace = net.forward(inputs)?;
    let embeddings = trace.embeddings()?;
    Ok((embeddings, trace))
}

pub fn backprop(
    net: &EmbeddingNet,
    trace: &ForwardTrace,
    grad_wrt_embeddings: &Matrix,
) -> Result<ParamGrads> {
    let batch = trace.batch_size();
    if trace.pre_activations.len() != net.layers.len() {
        return Err(Error::ShapeMismatch(
            "trace does not belong to this network".into(),
        ));
    }
    for (z, layer) in trace.pre_activations.iter().zip(&net.layers) {
        if z.cols() != layer.out_dim() {
            return Err(Error::ShapeMismatch(
                "trace does not belong to this network".into(),
            ));
        }
    }
    if grad_wrt_embeddings.shape() != (batch, net.embedding_dim()) {
        return Err(Error::ShapeMismatch(format!(
            "gradient is {:?}, expected ({batch}, {})",
            grad_wrt_embeddings.shape(),
            net.embedding_dim()
        )));
    }

    // Through the normalization head: g_x = (g - y (y.g)) / |x|.
    let outputs = trace.outputs();
    let mut gz = Matrix::zeros(batch, net.embedding_dim());
    for b in 0..batch {
        let x = outputs.row(b);
        let g = grad_wrt_embeddings.row(b);
        let n = norm(x);
        if g.iter().all(|&v| v == 0.0) {
            continue;
        }
        if n < crate::geometry::ZERO_NORM {
            return Err(Error::ZeroVector { norm: n });
        }
        let yg = dot(x, g) / n;
        for ((out, &xi), &gi) in gz.row_mut(b).iter_mut().zip(x).zip(g) {
            *out = (gi - (xi / n) * yg) / n;
        }
    }

    let mut grads = ParamGrads::zeros_for(net);
    for l in (0..net.layers.len()).rev() {
        let layer = &net.layers[l];
        let input = &trace.activations[l];
        let g_layer = &mut grads.layers[l];
        let in_dim = layer.in_dim();

        g_layer
            .weights
            .as_mut_slice()
            .par_chunks_mut(in_dim.max(1))
            .zip(g_layer.bias.par_iter_mut())
            .enumerate()
            .for_each(|(j, (gw_row, gb))| {
                for b in 0..batch {
                    let g = gz.get(b, j);
                    if g != 0.0 {
                        *gb += g;
                        for (w, &a) in gw_row.iter_mut().zip(input.row(b)) {
                            *w += g * a;
                        }
                    }
                }
            });

        if l == 0 {
            break;
        }
        // Into the previous layer's pre-activations, through the rectifier.
        let z_prev = &trace.pre_activations[l - 1];
        let mut g_prev = Matrix::zeros(batch, in_dim);
        g_prev
            .as_mut_slice()
            .par_chunks_mut(in_dim.max(1))
            .enumerate()
            .for_each(|(b, row)| {
                for (j, &g) in gz.row(b).iter().enumerate() {
                    if g != 0.0 {
                        for (r, &w) in row.iter_mut().zip(layer.weights.row(j)) {
                            *r += g * w;
                        }
                    }
                }
                for (r, &z) in row.iter_mut().zip(z_prev.row(b)) {
                    if z <= 0.0 {
                        *r = 0.0;
                    }
                }
            });
        gz = g_prev;
    }
    Ok(grads)
}

/// Serializes parameter-shaped data in the TNET layout:
/// `"TNET" | version u32 | layers u32 | (out u32, in u32, weights f64*, bias f64*)* | crc32`.
///
/// All integers and floats are little-endian; the CRC covers every preceding byte.
pub fn encode_params(layers: &[LayerParams]) -> Vec<u8> {
    let n_values: usize = layers.iter().map(|l| l.bias.len() * (l.in_dim() + 1)).sum();
    let mut out = Vec::with_capacity(16 + 8 * layers.len() + 8 * n_values);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(layers.len() as u32).to_le_bytes());
    for layer in layers {
        out.extend_from_slice(&(layer.out_dim() as u32).to_le_bytes());
        out.extend_from_slice(&(layer.in_dim() as u32).to_le_bytes());
        for v in layer.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn decode_params(bytes: &[u8]) -> Result<Vec<LayerParams>> {
    let corrupt = |msg: &str| Error::CorruptCheckpoint(msg.to_string());
    if bytes.len() < 16 {
        return Err(corrupt("truncated header"));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(crc_bytes.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(corrupt("crc mismatch"));
    }
    let mut cur = Cursor { buf: body, pos: 4 };
    let version = cur.u32().ok_or_else(|| corrupt("truncated"))?;
    if version != CHECKPOINT_VERSION {
        return Err(corrupt(&format!("unsupported version {version}")));
    }
    let n_layers = cur.u32().ok_or_else(|| corrupt("truncated"))? as usize;
    let mut layers = Vec::with_capacity(n_layers.min(1024));
    for _ in 0..n_layers {
        let out_dim = cur.u32().ok_or_else(|| corrupt("truncated layer header"))? as usize;
        let in_dim = cur.u32().ok_or_else(|| corrupt("truncated layer header"))? as usize;
        let count = out_dim
            .checked_mul(in_dim)
            .filter(|&c| {
                c.checked_add(out_dim)
                    .is_some_and(|t| t * 8 <= cur.remaining())
            })
            .ok_or_else(|| corrupt("truncated layer data"))?;
        let weights = (0..count)
            .map(|_| cur.f64().expect("length checked"))
            .collect();
        let bias = (0..out_dim)
            .map(|_| cur.f64().expect("length checked"))
            .collect();
        layers.push(LayerParams {
            weights: Matrix::from_vec(out_dim, in_dim, weights)?,
            bias,
        });
    }
    if cur.remaining() != 0 {
        return Err(corrupt("trailing bytes"));
    }
    Ok(layers)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take<const N: usize>(&mut self) -> Option<[u8; N]> {
        let bytes = self.buf.get(self.pos..self.pos + N)?;
        self.pos += N;
        Some(bytes.try_into().expect("slice of length N"))
    }

    fn u32(&mut self) -> Option<u32> {
        self.take::<4>().map(u32::from_le_bytes)
    }

    fn f64(&mut self) -> Option<f64> {
        self.take::<8>().map(f64::from_le_bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_inputs(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn construction_is_deterministic() {
        let cfg = NetConfig::new(6, vec![5, 4], 3).with_seed(42);
        let a = new_network(cfg.clone()).unwrap();
        let b = new_network(cfg).unwrap();
        assert_eq!(a, b);
        let bound = 1.0 / 6f64.sqrt();
        assert!(a.layers()[0]
            .weights
            .as_slice()
            .iter()
            .all(|w| w.abs() <= bound));
        assert!(a.layers().iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
    }

    #[test]
    fn no_hidden_layers_is_single_linear_map() {
        let net = new_network(NetConfig::new(7, vec![], 4)).unwrap();
        assert_eq!(net.layers().len(), 1);
        assert_eq!(net.layers()[0].weights.shape(), (4, 7));
    }

    #[test]
    fn invalid_configs() {
        assert!(matches!(
            new_network(NetConfig::new(0, vec![], 4)),
            Err(Error::InvalidConfig(_))
        ));
        assert!(new_network(NetConfig::new(3, vec![0], 4)).is_err());
        assert!(new_network(NetConfig::new(3, vec![], 1)).is_err());
    }

    #[test]
    fn identity_network_passes_unit_inputs_through() {
        let mut w = Matrix::zeros(3, 3);
        for i in 0..3 {
            w.set(i, i, 1.0);
        }
        let net = EmbeddingNet::from_layers(vec![LayerParams {
            weights: w,
            bias: vec![0.0; 3],
        }])
        .unwrap();
        let x = Matrix::from_rows(&[[0.6, 0.0, 0.8], [0.0, -1.0, 0.0]]).unwrap();
        let out = net.embed(&x).unwrap();
        assert_eq!(out[0].values(), x.row(0));
        assert_eq!(out[1].values(), x.row(1));
    }

    #[test]
    fn outputs_are_unit_norm_and_rowwise() {
        let net = new_network(NetConfig::new(5, vec![8, 8], 4).with_seed(3)).unwrap();
        let x = random_inputs(16, 5, 9);
        let (batch, _) = net.embed_batch(&x).unwrap();
        for (i, e) in batch.iter().enumerate() {
            assert!((norm(e.values()) - 1.0).abs() < 1e-6);
            let single = net.embed(&x.select_rows(&[i])).unwrap();
            for (a, b) in single[0].values().iter().zip(e.values()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        assert!(net.embed(&random_inputs(2, 4, 1)).is_err());
    }

    #[test]
    fn zero_gradient_gives_zero_param_grads() {
        let net = new_network(NetConfig::new(4, vec![3], 2).with_seed(1)).unwrap();
        let (_, trace) = net.embed_batch(&random_inputs(5, 4, 2)).unwrap();
        let grads = net.backprop(&trace, &Matrix::zeros(5, 2)).unwrap();
        assert!(grads.is_zero());
        assert!(net.backprop(&trace, &Matrix::zeros(4, 2)).is_err());
    }

    #[test]
    fn radial_gradient_is_annihilated() {
        // Single linear layer 2x2 with weights 2*I maps a unit input to |x| = 2.
        let mut w = Matrix::zeros(2, 2);
        w.set(0, 0, 2.0);
        w.set(1, 1, 2.0);
        let net = EmbeddingNet::from_layers(vec![LayerParams {
            weights: w,
            bias: vec![0.0; 2],
        }])
        .unwrap();
        let x = Matrix::from_rows(&[[0.6, 0.8]]).unwrap();
        let (_, trace) = net.embed_batch(&x).unwrap();
        assert!((trace.output_norms()[0] - 2.0).abs() < 1e-15);
        let g = Matrix::from_rows(&[[1.2, 1.6]]).unwrap();
        let grads = net.backprop(&trace, &g).unwrap();
        assert!(grads.values().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn relu_derivative_is_zero_at_zero() {
        // Hidden unit pre-activation is exactly zero for this input.
        let w1 = Matrix::from_rows(&[[1.0, -1.0]]).unwrap();
        let w2 = Matrix::from_rows(&[[1.0], [0.5]]).unwrap();
        let net = EmbeddingNet::from_layers(vec![
            LayerParams {
                weights: w1,
                bias: vec![0.0],
            },
            LayerParams {
                weights: w2,
                bias: vec![1.0, 0.0],
            },
        ])
        .unwrap();
        let x = Matrix::from_rows(&[[0.5, 0.5]]).unwrap();
        let (_, trace) = net.embed_batch(&x).unwrap();
        assert_eq!(trace.pre_activations[0].get(0, 0), 0.0);
        let grads = net
            .backprop(&trace, &Matrix::from_rows(&[[0.3, -0.7]]).unwrap())
            .unwrap();
        assert!(grads.layers[0].values().all(|&v| v == 0.0));
    }

    /// Returns false when some row of the draw has an all-dead final layer.
    fn fd_check(hidden: Vec<usize>, seed: u64) -> bool {
        let mut net = new_network(NetConfig::new(4, hidden, 3).with_seed(seed)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 300);
        for layer in net.layers_mut() {
            layer
                .bias
                .iter_mut()
                .for_each(|b| *b = rng.random_range(-0.2..0.3));
        }
        let x = random_inputs(5, 4, seed + 100);
        let dir = random_inputs(5, 3, seed + 200);
        if net.embed(&x).is_err() {
            return false;
        }
        let loss = |net: &EmbeddingNet| -> f64 {
            let e = net.embed(&x).unwrap();
            e.iter()
                .enumerate()
                .map(|(b, e)| dot(e.values(), dir.row(b)))
                .sum()
        };
        let (_, trace) = net.embed_batch(&x).unwrap();
        let grads = net.backprop(&trace, &dir).unwrap();
        let h = 1e-5;
        for l in 0..net.layers().len() {
            let n = net.layers()[l].values().count();
            for k in 0..n {
                let orig = *net.layers_mut()[l].values_mut().nth(k).unwrap();
                *net.layers_mut()[l].values_mut().nth(k).unwrap() = orig + h;
                let up = loss(&net);
                *net.layers_mut()[l].values_mut().nth(k).unwrap() = orig - h;
                let down = loss(&net);
                *net.layers_mut()[l].values_mut().nth(k).unwrap() = orig;
                let numeric = (up - down) / (2.0 * h);
                let analytic = *grads.layers[l].values().nth(k).unwrap();
                let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-4);
                assert!(rel < 1e-4, "layer {l} param {k}: {analytic} vs {numeric}");
            }
        }
        true
    }

    #[test]
    fn finite_difference_gradients() {
        let mut checked = 0;
        for seed in 0..10 {
            checked += fd_check(vec![3], seed) as usize;
            checked += fd_check(vec![], seed) as usize;
            checked += fd_check(vec![6, 5, 4], seed) as usize;
        }
        assert!(checked >= 20, "only {checked} usable draws");
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = new_network(NetConfig::new(5, vec![16], 3).with_seed(8)).unwrap();
        let bytes = net.save_checkpoint();
        let loaded = EmbeddingNet::load_checkpoint(&bytes).unwrap();
        assert_eq!(loaded.layers(), net.layers());
        assert_eq!(loaded.save_checkpoint(), bytes);
        let x = random_inputs(4, 5, 1);
        assert_eq!(net.embed(&x).unwrap(), loaded.embed(&x).unwrap());
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let net = new_network(NetConfig::new(3, vec![2], 2)).unwrap();
        let bytes = net.save_checkpoint();
        for cut in [0, 3, 10, bytes.len() - 1] {
            assert!(matches!(
                EmbeddingNet::load_checkpoint(&bytes[..cut]),
                Err(Error::CorruptCheckpoint(_))
            ));
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(EmbeddingNet::load_checkpoint(&bad).is_err());

        // Non-chaining shapes with a valid CRC.
        let layers = vec![LayerParams::zeros(2, 3), LayerParams::zeros(2, 4)];
        assert!(matches!(
            EmbeddingNet::load_checkpoint(&encode_params(&layers)),
            Err(Error::CorruptCheckpoint(_))
        ));
    }
}
