//! Parallel 1D convolutions over token embeddings with sigmoid filter
//! activations, per-filter max pooling and a dense sigmoid output.

use ndarray::{Array1, Array2, Array3, ArrayView2, ShapeBuilder};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Sample;
use crate::stats::sigmoid;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("sample {sample_id}: embedding dimension {found}, model expects {expected}")]
    DimensionMismatch {
        sample_id: u64,
        expected: usize,
        found: usize,
    },
    #[error("invalid model parameters: {0}")]
    InvalidParams(String),
}

/// One convolutional layer: `kernels` is `K x D x F`, `biases` has length `F`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayerParams {
    pub kernel_size: usize,
    pub n_filters: usize,
    pub kernels: Array3<f64>,
    pub biases: Array1<f64>,
}

impl ConvLayerParams {
    pub fn zeros(kernel_size: usize, dim: usize, n_filters: usize) -> Self {
        ConvLayerParams {
            kernel_size,
            n_filters,
            kernels: Array3::zeros((kernel_size, dim, n_filters)),
            biases: Array1::zeros(n_filters),
        }
    }

    /// Kernels viewed as a `(K*D) x F` matrix, matching a flattened phrase window.
    pub fn kernel_matrix(&self) -> ArrayView2<'_, f64> {
        let (k, d, f) = self.kernels.dim();
        self.kernels
            .view()
            .into_shape_with_order((k * d, f))
            .expect("kernels are stored in standard layout")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputLayerParams {
    pub weights: Array1<f64>,
    pub bias: f64,
}

/// All learnable weights of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub conv_layers: Vec<ConvLayerParams>,
    pub output: OutputLayerParams,
    pub embedding_dim: usize,
}

impl ModelParams {
    /// All-zero parameters for the given architecture.
    pub fn zeros(dim: usize, kernel_sizes: &[usize], n_filters: usize) -> Self {
        let conv_layers: Vec<_> = kernel_sizes
            .iter()
            .map(|&k| ConvLayerParams::zeros(k, dim, n_filters))
            .collect();
        ModelParams {
            output: OutputLayerParams {
                weights: Array1::zeros(n_filters * kernel_sizes.len()),
                bias: 0.0,
            },
            conv_layers,
            embedding_dim: dim,
        }
    }

    /// Scaled-uniform initialization: weights in `±sqrt(6 / (fan_in + fan_out))`, biases zero.
    ///
    /// Conv layers use `fan_in = K*D`, `fan_out = K*F`; the output layer uses
    /// `fan_in = F*M`, `fan_out = 1`.
    pub fn glorot<R: Rng + ?Sized>(
        dim: usize,
        kernel_sizes: &[usize],
        n_filters: usize,
        rng: &mut R,
    ) -> Self {
        let mut p = Self::zeros(dim, kernel_sizes, n_filters);
        for layer in &mut p.conv_layers {
            let k = layer.kernel_size;
            let limit = (6.0 / ((k * dim + k * n_filters) as f64)).sqrt();
            layer
                .kernels
                .mapv_inplace(|_| rng.random_range(-limit..=limit));
        }
        let fan_in = p.output.weights.len();
        let limit = (6.0 / ((fan_in + 1) as f64)).sqrt();
        p.output
            .weights
            .mapv_inplace(|_| rng.random_range(-limit..=limit));
        p
    }

    pub fn total_filters(&self) -> usize {
        self.conv_layers.iter().map(|l| l.n_filters).sum()
    }

    pub fn max_kernel_size(&self) -> usize {
        self.conv_layers
            .iter()
            .map(|l| l.kernel_size)
            .max()
            .unwrap_or(0)
    }

    /// Offset of layer `layer`'s first filter in the pooled / output-weight vector.
    pub fn filter_offset(&self, layer: usize) -> usize {
        self.conv_layers[..layer].iter().map(|l| l.n_filters).sum()
    }

    /// `(layer, filter)` for a column of the pooled vector.
    pub fn locate_filter(&self, column: usize) -> (usize, usize) {
        let mut rem = column;
        for (l, layer) in self.conv_layers.iter().enumerate() {
            if rem < layer.n_filters {
                return (l, rem);
            }
            rem -= layer.n_filters;
        }
        panic!("filter column {column} out of range");
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidParams(m));
        if self.conv_layers.is_empty() {
            return bad("at least one convolutional layer is required".into());
        }
        for (l, layer) in self.conv_layers.iter().enumerate() {
            let (k, d, f) = layer.kernels.dim();
            if k != layer.kernel_size || f != layer.n_filters || k == 0 || f == 0 {
                return bad(format!(
                    "layer {l}: kernel tensor shape {k}x{d}x{f} inconsistent"
                ));
            }
            if d != self.embedding_dim {
                return bad(format!(
                    "layer {l}: kernel depth {d} != embedding dim {}",
                    self.embedding_dim
                ));
            }
            if layer.biases.len() != f {
                return bad(format!(
                    "layer {l}: {} biases for {f} filters",
                    layer.biases.len()
                ));
            }
        }
        if self.output.weights.len() != self.total_filters() {
            return bad(format!(
                "output layer has {} weights for {} filters",
                self.output.weights.len(),
                self.total_filters()
            ));
        }
        if self
            .tensors()
            .iter()
            .any(|t| t.iter().any(|v| !v.is_finite()))
        {
            return bad("non-finite parameter".into());
        }
        Ok(())
    }

    /// Every parameter tensor as a flat slice, in a fixed order:
    /// per layer kernels (row-major `K,D,F`) then biases; output weights; output bias.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.conv_layers.len() + 2);
        for layer in &self.conv_layers {
            out.push(layer.kernels.as_slice().expect("standard layout"));
            out.push(layer.biases.as_slice().expect("standard layout"));
        }
        out.push(self.output.weights.as_slice().expect("standard layout"));
        out.push(std::slice::from_ref(&self.output.bias));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * self.conv_layers.len() + 2);
        for layer in &mut self.conv_layers {
            out.push(layer.kernels.as_slice_mut().expect("standard layout"));
            out.push(layer.biases.as_slice_mut().expect("standard layout"));
        }
        out.push(self.output.weights.as_slice_mut().expect("standard layout"));
        out.push(std::slice::from_mut(&mut self.output.bias));
        out
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(
            flat.len(),
            self.n_params(),
            "flat parameter length mismatch"
        );
        let mut rest = flat;
        for t in self.tensors_mut() {
            let (head, tail) = rest.split_at(t.len());
            t.copy_from_slice(head);
            rest = tail;
        }
    }

    /// Human-readable path of the flat coordinate `index`, e.g. `conv[1].kernel[2,0,3]`.
    pub fn coordinate_name(&self, index: usize) -> String {
        let mut rem = index;
        for (l, layer) in self.conv_layers.iter().enumerate() {
            let (_, d, f) = layer.kernels.dim();
            if rem < layer.kernels.len() {
                return format!(
                    "conv[{l}].kernel[{},{},{}]",
                    rem / (d * f),
                    (rem / f) % d,
                    rem % f
                );
            }
            rem -= layer.kernels.len();
            if rem < f {
                return format!("conv[{l}].bias[{rem}]");
            }
            rem -= f;
        }
        if rem < self.output.weights.len() {
            return format!("out.weight[{rem}]");
        }
        assert_eq!(
            rem,
            self.output.weights.len(),
            "coordinate {index} out of range"
        );
        "out.bias".to_string()
    }
}

/// Activations of one conv layer on one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    /// `P x F`; column `f` holds filter `f`'s activation on every phrase window.
    pub activations: Array2<f64>,
    pub pooled: Vec<f64>,
    pub argmax: Vec<usize>,
}

/// Everything the forward pass computes for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub layers: Vec<LayerTrace>,
    /// Max-pooled activations concatenated across layers (length `sum F_l`).
    pub pooled: Vec<f64>,
    /// Phrase start index attaining each pooled value.
    pub argmax_positions: Vec<usize>,
    pub logit: f64,
    pub prediction: f64,
}

/// Embeddings widened to f64 and zero-padded on the right to at least `min_rows` rows.
pub fn padded_embeddings(sample: &Sample, min_rows: usize) -> Array2<f64> {
    let (u, d) = sample.embeddings.dim();
    let rows = u.max(min_rows);
    let mut out = Array2::zeros((rows, d));
    out.slice_mut(ndarray::s![..u, ..])
        .assign(&sample.embeddings.mapv(f64::from));
    out
}

/// Number of phrase windows for `u` tokens and kernel size `k` (after padding).
pub fn phrase_count(u: usize, k: usize) -> usize {
    u.max(k) - k + 1
}

/// Sliding `K x D` windows (stride 1) over the zero-padded embedding rows.
pub fn phrases(sample: &Sample, kernel_size: usize) -> Vec<Array2<f64>> {
    let emb = padded_embeddings(sample, kernel_size);
    let p = phrase_count(sample.len(), kernel_size);
    (0..p)
        .map(|t| emb.slice(ndarray::s![t..t + kernel_size, ..]).to_owned())
        .collect()
}

/// The first `p` windows of a padded embedding matrix as one `P x (K*D)` strided view.
pub(crate) fn window_matrix(
    emb: &Array2<f64>,
    kernel_size: usize,
    p: usize,
) -> ArrayView2<'_, f64> {
    let d = emb.ncols();
    debug_assert!(p + kernel_size - 1 <= emb.nrows());
    let data = emb.as_slice().expect("standard layout");
    ArrayView2::from_shape((p, kernel_size * d).strides((d, 1)), data)
        .expect("windows stay inside the buffer")
}

/// First index attaining the maximum (lowest index wins ties).
pub(crate) fn argmax_first(values: impl Iterator<Item = f64>) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

fn check_dim(params: &ModelParams, sample: &Sample) -> Result<(), ModelError> {
    let found = sample.embeddings.ncols();
    if found != params.embedding_dim {
        return Err(ModelError::DimensionMismatch {
            sample_id: sample.id,
            expected: params.embedding_dim,
            found,
        });
    }
    Ok(())
}

/// Forward pass with the full activation trace.
pub fn forward(params: &ModelParams, sample: &Sample) -> Result<ForwardTrace, ModelError> {
    check_dim(params, sample)?;
    let emb = padded_embeddings(sample, params.max_kernel_size());
    Ok(forward_padded(params, &emb, sample.len()))
}

/// Forward pass over `emb`, whose first `u` rows are the sample's tokens.
/// Layer `K` sees `max(u, K) - K + 1` windows regardless of extra padding.
pub(crate) fn forward_padded(params: &ModelParams, emb: &Array2<f64>, u: usize) -> ForwardTrace {
    let mut layers = Vec::with_capacity(params.conv_layers.len());
    let mut pooled = Vec::with_capacity(params.total_filters());
    let mut argmax_positions = Vec::with_capacity(params.total_filters());
    for layer in &params.conv_layers {
        let windows = window_matrix(emb, layer.kernel_size, phrase_count(u, layer.kernel_size));
        let mut act = windows.dot(&layer.kernel_matrix());
        act += &layer.biases;
        act.mapv_inplace(sigmoid);
        let mut lp = Vec::with_capacity(layer.n_filters);
        let mut la = Vec::with_capacity(layer.n_filters);
        for col in act.columns() {
            let (t, v) = argmax_first(col.iter().copied());
            lp.push(v);
            la.push(t);
        }
        pooled.extend_from_slice(&lp);
        argmax_positions.extend_from_slice(&la);
        layers.push(LayerTrace {
            activations: act,
            pooled: lp,
            argmax: la,
        });
    }
    let logit = params.output.bias
        + params
            .output
            .weights
            .iter()
            .zip(&pooled)
            .map(|(w, a)| w * a)
            .sum::<f64>();
    ForwardTrace {
        layers,
        pooled,
        argmax_positions,
        logit,
        prediction: sigmoid(logit),
    }
}

/// Forward pass over many samples, order-preserving.
pub fn forward_batch(
    params: &ModelParams,
    samples: &[Sample],
) -> Result<Vec<ForwardTrace>, ModelError> {
    samples.iter().map(|s| forward(params, s)).collect()
}

/// Predicted probabilities only.
pub fn predict(params: &ModelParams, samples: &[Sample]) -> Result<Vec<f64>, ModelError> {
    samples
        .iter()
        .map(|s| forward(params, s).map(|t| t.prediction))
        .collect()
}

/// Architecture summary stored alongside checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub embedding_dim: usize,
    pub kernel_sizes: Vec<usize>,
    pub n_filters: Vec<usize>,
}

impl From<&ModelParams> for Architecture {
    fn from(p: &ModelParams) -> Self {
        Architecture {
            embedding_dim: p.embedding_dim,
            kernel_sizes: p.conv_layers.iter().map(|l| l.kernel_size).collect(),
            n_filters: p.conv_layers.iter().map(|l| l.n_filters).collect(),
        }
    }
}
