//! Feed-forward embedding network: affine layers with `max(0, ·)` between
//! them, an affine output layer and optional L2 normalization of each output
//! row. Parameters are immutable values; [`EmbeddingParams::sgd_step`]
//! returns a new set.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numerics::{axpy, dot, ensure_finite, norm, Matrix};
use crate::rng::{seeded, Stream};

/// One affine layer; `weights` is `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

/// Weights of a teacher or student embedding network.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingParams {
    layer_dims: Vec<usize>,
    layers: Vec<Dense>,
    normalize_output: bool,
}

/// Embeddings for a batch of samples, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    embeddings: Matrix,
    normalized: bool,
}

impl EmbeddingBatch {
    /// Wraps a matrix of embeddings, verifying unit rows when `normalized`.
    pub fn new(embeddings: Matrix, normalized: bool) -> Result<Self> {
        if !embeddings.is_finite() {
            return Err(Error::NonFinite {
                context: "embedding batch",
            });
        }
        if normalized {
            for (row, r) in embeddings.iter_rows().enumerate() {
                if (norm(r) - 1.0).abs() > 1e-10 {
                    return Err(Error::InvalidDataset(format!(
                        "embedding row {row} is not unit-normalized"
                    )));
                }
            }
        }
        Ok(Self {
            embeddings,
            normalized,
        })
    }

    pub fn count(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn matrix(&self) -> &Matrix {
        &self.embeddings
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.embeddings.row(i)
    }

    pub fn into_matrix(self) -> Matrix {
        self.embeddings
    }
}

/// Gradients with the same layout as [`EmbeddingParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

impl ParamGrads {
    pub fn zeros_like(params: &EmbeddingParams) -> Self {
        Self {
            weights: params
                .layers
                .iter()
                .map(|l| Matrix::zeros(l.weights.rows(), l.weights.cols()))
                .collect(),
            biases: params
                .layers
                .iter()
                .map(|l| vec![0.0; l.bias.len()])
                .collect(),
        }
    }

    /// `self += alpha · other`
    pub fn add_scaled(&mut self, alpha: f64, other: &ParamGrads) {
        for (w, o) in self.weights.iter_mut().zip(&other.weights) {
            w.add_scaled(alpha, o);
        }
        for (b, o) in self.biases.iter_mut().zip(&other.biases) {
            axpy(alpha, o, b);
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b);
        }
        out
    }

    pub fn is_zero(&self) -> bool {
        self.to_flat().iter().all(|&g| g == 0.0)
    }
}

/// Intermediate values kept for the backward pass.
struct Trace {
    /// `activations[l]` is the input to layer `l`; the last entry is the raw output.
    activations: Vec<Matrix>,
    /// Pre-activation values for every hidden layer.
    pre_activations: Vec<Matrix>,
}

impl EmbeddingParams {
    /// Random initialization: weights `~ N(0, 1) / sqrt(fan_in)`, zero biases.
    pub fn init(seed: u64, layer_dims: &[usize], normalize_output: bool) -> Result<Self> {
        validate_dims(layer_dims)?;
        let mut rng = seeded(seed, Stream::Init);
        let layers = layer_dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let scale = 1.0 / (fan_in as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
                    .collect();
                Dense {
                    weights: Matrix::from_vec(fan_out, fan_in, data).expect("sized from dims"),
                    bias: vec![0.0; fan_out],
                }
            })
            .collect();
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            layers,
            normalize_output,
        })
    }

    /// Assembles parameters from explicit layers, checking shape compatibility.
    pub fn from_layers(layers: Vec<Dense>, normalize_output: bool) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::InvalidLayerDims("no layers".into()))?;
        let mut layer_dims = vec![first.weights.cols()];
        for (i, l) in layers.iter().enumerate() {
            let expected_in = *layer_dims.last().unwrap();
            if l.weights.cols() != expected_in {
                return Err(Error::InvalidLayerDims(format!(
                    "layer {i} expects {} inputs, previous layer emits {expected_in}",
                    l.weights.cols()
                )));
            }
            if l.bias.len() != l.weights.rows() {
                return Err(Error::InvalidLayerDims(format!(
                    "layer {i} bias has {} entries for {} outputs",
                    l.bias.len(),
                    l.weights.rows()
                )));
            }
            if !l.weights.is_finite() || l.bias.iter().any(|b| !b.is_finite()) {
                return Err(Error::NonFinite {
                    context: "layer parameters",
                });
            }
            layer_dims.push(l.weights.rows());
        }
        validate_dims(&layer_dims)?;
        Ok(Self {
            layer_dims,
            layers,
            normalize_output,
        })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn normalize_output(&self) -> bool {
        self.normalize_output
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.as_slice().len() + l.bias.len())
            .sum()
    }

    /// Flattened parameters, layer by layer: row-major weights then bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for l in &self.layers {
            out.extend_from_slice(l.weights.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    /// Inverse of [`to_flat`](Self::to_flat).
    pub fn with_flat(&self, flat: &[f64]) -> Self {
        assert_eq!(flat.len(), self.parameter_count(), "flat parameter length");
        let mut next = self.clone();
        let mut offset = 0;
        for l in &mut next.layers {
            let nw = l.weights.as_slice().len();
            l.weights
                .as_mut_slice()
                .copy_from_slice(&flat[offset..offset + nw]);
            offset += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[offset..offset + nb]);
            offset += nb;
        }
        next
    }

    fn check_inputs(&self, inputs: &Matrix) -> Result<()> {
        if inputs.cols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "forward input columns",
                expected: self.input_dim(),
                found: inputs.cols(),
            });
        }
        ensure_finite(inputs.as_slice(), "forward inputs")
    }

    fn trace(&self, inputs: &Matrix) -> Result<Trace> {
        self.check_inputs(inputs)?;
        let n = inputs.rows();
        let mut activations = vec![inputs.clone()];
        let mut pre_activations = Vec::with_capacity(self.layers.len() - 1);
        for (li, layer) in self.layers.iter().enumerate() {
            let input = activations.last().unwrap();
            let mut out = Matrix::zeros(n, layer.weights.rows());
            for r in 0..n {
                let x = input.row(r);
                for (o, (w, b)) in out
                    .row_mut(r)
                    .iter_mut()
                    .zip(layer.weights.iter_rows().zip(&layer.bias))
                {
                    *o = dot(w, x) + b;
                }
            }
            if li + 1 < self.layers.len() {
                let mut act = out.clone();
                for v in act.as_mut_slice() {
                    *v = v.max(0.0);
                }
                pre_activations.push(out);
                activations.push(act);
            } else {
                activations.push(out);
            }
        }
        Ok(Trace {
            activations,
            pre_activations,
        })
    }

    /// Embeds every input row.
    pub fn forward(&self, inputs: &Matrix) -> Result<EmbeddingBatch> {
        let raw = self.trace(inputs)?.activations.pop().unwrap();
        if !raw.is_finite() {
            return Err(Error::NonFinite {
                context: "forward output",
            });
        }
        if !self.normalize_output {
            return Ok(EmbeddingBatch {
                embeddings: raw,
                normalized: false,
            });
        }
        let mut out = raw;
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let n = norm(row);
            if n == 0.0 {
                return Err(Error::DeadEmbedding { row: r });
            }
            row.iter_mut().for_each(|v| *v /= n);
        }
        Ok(EmbeddingBatch {
            embeddings: out,
            normalized: true,
        })
    }

    /// Reverse-mode gradient of `Σ grad_embeddings ⊙ forward(inputs)` with
    /// respect to every weight and bias, including the normalization Jacobian.
    pub fn backward(&self, inputs: &Matrix, grad_embeddings: &Matrix) -> Result<ParamGrads> {
        let trace = self.trace(inputs)?;
        let raw = trace.activations.last().unwrap();
        if (grad_embeddings.rows(), grad_embeddings.cols()) != (raw.rows(), raw.cols()) {
            return Err(Error::DimensionMismatch {
                context: "backward gradient shape",
                expected: raw.rows() * raw.cols(),
                found: grad_embeddings.rows() * grad_embeddings.cols(),
            });
        }
        let mut grads = ParamGrads::zeros_like(self);
        let last = self.layers.len() - 1;
        for r in 0..inputs.rows() {
            let mut delta = grad_embeddings.row(r).to_vec();
            if delta.iter().all(|&g| g == 0.0) {
                continue;
            }
            if self.normalize_output {
                let z = raw.row(r);
                let n = norm(z);
                if n == 0.0 {
                    return Err(Error::DeadEmbedding { row: r });
                }
                // d(z/|z|)/dz applied to delta: (g - y (y·g)) / |z|
                let y: Vec<f64> = z.iter().map(|v| v / n).collect();
                let yg = dot(&y, &delta);
                for (d, yi) in delta.iter_mut().zip(&y) {
                    *d = (*d - yi * yg) / n;
                }
            }
            for li in (0..=last).rev() {
                let input = trace.activations[li].row(r);
                grads.weights[li].add_outer(1.0, &delta, input);
                axpy(1.0, &delta, &mut grads.biases[li]);
                if li == 0 {
                    break;
                }
                let mut upstream = self.layers[li].weights.transpose_matvec(&delta);
                for (u, &pre) in upstream
                    .iter_mut()
                    .zip(trace.pre_activations[li - 1].row(r))
                {
                    if pre <= 0.0 {
                        *u = 0.0;
                    }
                }
                delta = upstream;
            }
        }
        Ok(grads)
    }

    /// Returns `self - learning_rate · grads`.
    pub fn sgd_step(&self, grads: &ParamGrads, learning_rate: f64) -> Self {
        assert_eq!(
            grads.weights.len(),
            self.layers.len(),
            "gradient layer count"
        );
        let mut next = self.clone();
        for ((l, gw), gb) in next
            .layers
            .iter_mut()
            .zip(&grads.weights)
            .zip(&grads.biases)
        {
            assert_eq!(
                l.weights.as_slice().len(),
                gw.as_slice().len(),
                "weight shape"
            );
            assert_eq!(l.bias.len(), gb.len(), "bias shape");
            axpy(-learning_rate, gw.as_slice(), l.weights.as_mut_slice());
            axpy(-learning_rate, gb, &mut l.bias);
        }
        next
    }
}

fn validate_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 {
        return Err(Error::InvalidLayerDims(format!(
            "need at least an input and an output width, got {dims:?}"
        )));
    }
    if dims.contains(&0) {
        return Err(Error::InvalidLayerDims(format!(
            "layer widths must be positive, got {dims:?}"
        )));
    }
    Ok(())
}
