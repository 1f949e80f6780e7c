//! The learnable hash function.
//!
//! A fully-connected network with ReLU hidden layers and a `tanh` head. During
//! training the head output `h ∈ (-1, 1)^L` is used directly; at inference the
//! head is replaced by `sign` (see [`binarize`]).
//!
//! Parameters live in one flat vector so they can be averaged, serialized and
//! counted as a unit. Per layer the layout is the row-major `(out, in)` weight
//! matrix followed by the `out` biases; layers follow in order.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `y`.
    /// The ReLU subgradient at 0 is 0.
    fn derivative(self, z: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }

    fn tag(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Activation::Relu),
            1 => Ok(Activation::Tanh),
            other => Err(Error::Protocol(format!("unknown activation tag {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(input_dim: usize, output_dim: usize, activation: Activation) -> Self {
        Self {
            input_dim,
            output_dim,
            activation,
        }
    }

    fn param_len(&self) -> usize {
        self.input_dim * self.output_dim + self.output_dim
    }
}

/// The reference architecture: hidden layers of the given widths with ReLU,
/// then a `tanh` head of `code_len` units.
pub fn mlp_spec(input_dim: usize, hidden: &[usize], code_len: usize) -> Vec<LayerSpec> {
    let mut dims = Vec::with_capacity(hidden.len() + 2);
    dims.push(input_dim);
    dims.extend_from_slice(hidden);
    dims.push(code_len);
    let last = dims.len() - 2;
    dims.windows(2)
        .enumerate()
        .map(|(i, w)| {
            let act = if i == last {
                Activation::Tanh
            } else {
                Activation::Relu
            };
            LayerSpec::new(w[0], w[1], act)
        })
        .collect()
}

/// Checks that a layer list describes a valid hash network.
pub fn validate_spec(spec: &[LayerSpec]) -> Result<()> {
    let last = spec
        .last()
        .ok_or_else(|| Error::InvalidSpec("empty layer list".into()))?;
    for (i, layer) in spec.iter().enumerate() {
        if layer.input_dim == 0 || layer.output_dim == 0 {
            return Err(Error::InvalidSpec(format!(
                "layer {i} has a zero dimension"
            )));
        }
    }
    for (i, pair) in spec.windows(2).enumerate() {
        if pair[0].output_dim != pair[1].input_dim {
            return Err(Error::InvalidSpec(format!(
                "layer {i} outputs {} but layer {} expects {}",
                pair[0].output_dim,
                i + 1,
                pair[1].input_dim
            )));
        }
    }
    if last.activation != Activation::Tanh {
        return Err(Error::InvalidSpec("final activation must be tanh".into()));
    }
    Ok(())
}

/// Network layout plus the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    pub layers: Vec<LayerSpec>,
    pub values: Vec<f64>,
    /// Seed used at initialization. Not carried on the wire; decoded
    /// parameters report 0.
    pub seed: u64,
}

impl NetworkParams {
    /// Wraps an explicit parameter vector after checking it against the spec.
    pub fn from_values(layers: Vec<LayerSpec>, values: Vec<f64>) -> Result<Self> {
        validate_spec(&layers)?;
        let expected: usize = layers.iter().map(LayerSpec::param_len).sum();
        if values.len() != expected {
            return Err(Error::LengthMismatch(values.len(), expected));
        }
        Ok(Self {
            layers,
            values,
            seed: 0,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim
    }

    /// Output width, i.e. the code length `L`.
    pub fn code_len(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim
    }

    /// Offsets of each layer's weight block inside `values`.
    fn offsets(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.layers.len());
        let mut at = 0;
        for layer in &self.layers {
            out.push(at);
            at += layer.param_len();
        }
        out
    }

    /// Same network with every value rounded through `f32`, the precision
    /// parameters have on the wire.
    pub fn to_f32_precision(&self) -> Self {
        let mut out = self.clone();
        for v in &mut out.values {
            *v = *v as f32 as f64;
        }
        out
    }

    fn fingerprint(&self) -> u64 {
        let mut hasher = DefaultHasher::new();
        self.layers.hash(&mut hasher);
        for v in &self.values {
            v.to_bits().hash(&mut hasher);
        }
        hasher.finish()
    }
}

/// `|Θ|`: total number of weights and biases.
pub fn param_count(params: &NetworkParams) -> usize {
    params.values.len()
}

/// Parameter count implied by a layer list.
pub fn spec_param_count(spec: &[LayerSpec]) -> Result<usize> {
    validate_spec(spec)?;
    Ok(spec.iter().map(LayerSpec::param_len).sum())
}

/// Weights uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, biases zero.
pub fn init_network(spec: &[LayerSpec], seed: u64) -> Result<NetworkParams> {
    validate_spec(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(spec.iter().map(LayerSpec::param_len).sum());
    for layer in spec {
        let limit = 1.0 / (layer.input_dim as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
        values.extend((0..layer.input_dim * layer.output_dim).map(|_| dist.sample(&mut rng)));
        values.extend(std::iter::repeat_n(0.0, layer.output_dim));
    }
    Ok(NetworkParams {
        layers: spec.to_vec(),
        values,
        seed,
    })
}

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub inputs: Vec<Vec<f64>>,
    /// `pre[layer][sample]`: affine outputs before the activation.
    pub pre: Vec<Vec<Vec<f64>>>,
    /// `post[layer][sample]`: activation outputs.
    pub post: Vec<Vec<Vec<f64>>>,
    fingerprint: u64,
}

impl ForwardTrace {
    pub fn batch_len(&self) -> usize {
        self.inputs.len()
    }

    /// Smallest `|z|` over all ReLU pre-activations; used to stay away from
    /// kinks in numerical gradient checks.
    pub fn min_relu_margin(&self, params: &NetworkParams) -> f64 {
        let mut best = f64::INFINITY;
        for (l, layer) in params.layers.iter().enumerate() {
            if layer.activation != Activation::Relu {
                continue;
            }
            for row in &self.pre[l] {
                for z in row {
                    best = best.min(z.abs());
                }
            }
        }
        best
    }
}

fn affine(
    weights: &[f64],
    biases: &[f64],
    input: &[f64],
    act: Activation,
    pre: &mut Vec<f64>,
    post: &mut Vec<f64>,
) {
    let in_dim = input.len();
    for (o, &b) in biases.iter().enumerate() {
        let row = &weights[o * in_dim..(o + 1) * in_dim];
        let z = row.iter().zip(input).fold(b, |acc, (w, x)| acc + w * x);
        pre.push(z);
        post.push(act.apply(z));
    }
}

/// Relaxed forward pass over a batch: returns the `tanh` head outputs and the
/// full trace.
pub fn forward(
    params: &NetworkParams,
    batch: &[Vec<f64>],
) -> Result<(Vec<Vec<f64>>, ForwardTrace)> {
    let in_dim = params.input_dim();
    if let Some(bad) = batch.iter().find(|x| x.len() != in_dim) {
        return Err(Error::Shape(format!(
            "input has {} features, network expects {in_dim}",
            bad.len()
        )));
    }
    let offsets = params.offsets();
    let mut pre_all = Vec::with_capacity(params.layers.len());
    let mut post_all: Vec<Vec<Vec<f64>>> = Vec::with_capacity(params.layers.len());
    for (l, layer) in params.layers.iter().enumerate() {
        let w_len = layer.input_dim * layer.output_dim;
        let weights = &params.values[offsets[l]..offsets[l] + w_len];
        let biases = &params.values[offsets[l] + w_len..offsets[l] + layer.param_len()];
        let inputs: &[Vec<f64>] = if l == 0 { batch } else { &post_all[l - 1] };
        let mut pre_layer = Vec::with_capacity(batch.len());
        let mut post_layer = Vec::with_capacity(batch.len());
        for x in inputs {
            let mut pre = Vec::with_capacity(layer.output_dim);
            let mut post = Vec::with_capacity(layer.output_dim);
            affine(weights, biases, x, layer.activation, &mut pre, &mut post);
            pre_layer.push(pre);
            post_layer.push(post);
        }
        pre_all.push(pre_layer);
        post_all.push(post_layer);
    }
    let h = post_all.last().cloned().unwrap_or_default();
    Ok((
        h,
        ForwardTrace {
            inputs: batch.to_vec(),
            pre: pre_all,
            post: post_all,
            fingerprint: params.fingerprint(),
        },
    ))
}

/// Batch-mean gradient of `Σ_b <grad_h[b], h_b>` with respect to the flat
/// parameter vector.
pub fn backward(
    params: &NetworkParams,
    trace: &ForwardTrace,
    grad_h: &[Vec<f64>],
) -> Result<Vec<f64>> {
    if trace.fingerprint != params.fingerprint() || trace.pre.len() != params.layers.len() {
        return Err(Error::StaleTrace);
    }
    let batch = trace.batch_len();
    let code_len = params.code_len();
    if grad_h.len() != batch || grad_h.iter().any(|g| g.len() != code_len) {
        return Err(Error::Shape(format!(
            "seed gradient must be {batch} x {code_len}"
        )));
    }
    let offsets = params.offsets();
    let mut grad = vec![0.0; params.values.len()];
    if batch == 0 {
        return Ok(grad);
    }
    let scale = 1.0 / batch as f64;

    for (b, row) in grad_h.iter().enumerate() {
        let mut upstream = row.clone();
        for l in (0..params.layers.len()).rev() {
            let layer = params.layers[l];
            let w_len = layer.input_dim * layer.output_dim;
            let pre = &trace.pre[l][b];
            let post = &trace.post[l][b];
            let input = if l == 0 {
                &trace.inputs[b]
            } else {
                &trace.post[l - 1][b]
            };
            let delta: Vec<f64> = upstream
                .iter()
                .zip(pre.iter().zip(post))
                .map(|(g, (&z, &y))| g * layer.activation.derivative(z, y))
                .collect();
            let base = offsets[l];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &mut grad[base + o * layer.input_dim..base + (o + 1) * layer.input_dim];
                for (gw, &x) in row.iter_mut().zip(input) {
                    *gw += d * x * scale;
                }
                grad[base + w_len + o] += d * scale;
            }
            if l > 0 {
                let weights = &params.values[base..base + w_len];
                let mut next = vec![0.0; layer.input_dim];
                for (o, &d) in delta.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    let row = &weights[o * layer.input_dim..(o + 1) * layer.input_dim];
                    for (n, &w) in next.iter_mut().zip(row) {
                        *n += d * w;
                    }
                }
                upstream = next;
            }
        }
    }
    Ok(grad)
}

/// `L`-bit code in `{-1, +1}^L`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HashCode {
    bits: Vec<i8>,
}

impl HashCode {
    /// Builds a code from explicit `±1` components.
    pub fn from_bits(bits: Vec<i8>) -> Result<Self> {
        if bits.iter().any(|&b| b != 1 && b != -1) {
            return Err(Error::Shape("code components must be -1 or +1".into()));
        }
        Ok(Self { bits })
    }

    pub fn bits(&self) -> &[i8] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// `ceil(L/8)` bytes, MSB-first, bit set for `+1`.
    pub fn pack(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.bits.len().div_ceil(8)];
        for (j, &b) in self.bits.iter().enumerate() {
            if b == 1 {
                out[j / 8] |= 0x80 >> (j % 8);
            }
        }
        out
    }

    pub fn unpack(bytes: &[u8], len: usize) -> Result<Self> {
        if bytes.len() != len.div_ceil(8) {
            return Err(Error::LengthMismatch(bytes.len(), len.div_ceil(8)));
        }
        let bits = (0..len)
            .map(|j| {
                if bytes[j / 8] & (0x80 >> (j % 8)) != 0 {
                    1
                } else {
                    -1
                }
            })
            .collect();
        Ok(Self { bits })
    }

    /// Componentwise negation.
    pub fn antipode(&self) -> Self {
        Self {
            bits: self.bits.iter().map(|b| -b).collect(),
        }
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| b as f64).collect()
    }
}

/// `sign` with `sign(0) = +1`.
pub fn binarize(h: &[f64]) -> HashCode {
    HashCode {
        bits: h.iter().map(|&v| if v >= 0.0 { 1 } else { -1 }).collect(),
    }
}

/// Hashes every row of `batch`.
pub fn hash_batch(params: &NetworkParams, batch: &[Vec<f64>]) -> Result<Vec<HashCode>> {
    let (h, _) = forward(params, batch)?;
    Ok(h.iter().map(|row| binarize(row)).collect())
}

/// Byte length of the shape header that precedes the values.
pub fn header_len(n_layers: usize) -> usize {
    4 + 9 * n_layers
}

/// Wire encoding: big-endian layer count, per layer `input_dim`,
/// `output_dim` (u32) and activation tag (u8), then every value as a
/// big-endian `f32`.
pub fn encode_params(params: &NetworkParams) -> Vec<u8> {
    encode_vector(&params.layers, &params.values)
}

/// Encodes an arbitrary flat vector (e.g. a gradient) laid out like the
/// network described by `layers`.
pub fn encode_vector(layers: &[LayerSpec], values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(header_len(layers.len()) + 4 * values.len());
    out.extend_from_slice(&(layers.len() as u32).to_be_bytes());
    for layer in layers {
        out.extend_from_slice(&(layer.input_dim as u32).to_be_bytes());
        out.extend_from_slice(&(layer.output_dim as u32).to_be_bytes());
        out.push(layer.activation.tag());
    }
    for &v in values {
        out.extend_from_slice(&(v as f32).to_be_bytes());
    }
    out
}

pub fn decode_params(bytes: &[u8]) -> Result<NetworkParams> {
    let short = || Error::Protocol("truncated parameter payload".into());
    let read_u32 = |at: usize| -> Result<u32> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
            .ok_or_else(short)
    };
    let n_layers = read_u32(0)? as usize;
    let mut layers = Vec::with_capacity(n_layers);
    let mut at = 4;
    for _ in 0..n_layers {
        let input_dim = read_u32(at)? as usize;
        let output_dim = read_u32(at + 4)? as usize;
        let tag = *bytes.get(at + 8).ok_or_else(short)?;
        layers.push(LayerSpec::new(
            input_dim,
            output_dim,
            Activation::from_tag(tag)?,
        ));
        at += 9;
    }
    validate_spec(&layers)?;
    let count: usize = layers.iter().map(LayerSpec::param_len).sum();
    let body = &bytes[at..];
    if body.len() != 4 * count {
        return Err(Error::Protocol(format!(
            "expected {} value bytes, got {}",
            4 * count,
            body.len()
        )));
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_be_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok(NetworkParams {
        layers,
        values,
        seed: 0,
    })
}
