//! Composite training loss and its exact gradients.
//!
//! `total = bce + l2_conv + activity + l1_out` where
//!
//! * `bce` is class-weighted binary cross-entropy averaged over the batch,
//! * `l2_conv = lambda_ker_conv * sum W_conv^2` over every conv layer,
//! * `activity = lambda_act_conv * sum_l max(R_l)`, with `R_l[f,g]` the clipped
//!   Pearson correlation between filters `f != g` of layer `l`, measured over
//!   every phrase window of every sample in the batch,
//! * `l1_out = lambda_ker_out * sum |W_out|` (the output bias is not penalized).

use std::borrow::Borrow;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Sample;
use crate::model::{
    forward_padded, padded_embeddings, window_matrix, ForwardTrace, ModelError, ModelParams,
};

/// Predictions are clamped to `[EPS, 1 - EPS]` before taking logs.
pub const EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("{outcomes} outcomes but {predictions} predictions")]
    LengthMismatch { outcomes: usize, predictions: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_ker_conv: f64,
    pub lambda_act_conv: f64,
    pub lambda_ker_out: f64,
    /// `(w0, w1)`: weight applied to samples with outcome 0 and 1.
    pub class_weights: (f64, f64),
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_ker_conv: 0.0,
            lambda_act_conv: 0.0,
            lambda_ker_out: 0.0,
            class_weights: (1.0, 1.0),
        }
    }
}

impl LossWeights {
    pub fn class_weight(&self, y: u8) -> f64 {
        if y == 1 {
            self.class_weights.1
        } else {
            self.class_weights.0
        }
    }
}

/// `w_c = N / (2 N_c)`; `None` when a class is absent.
pub fn balanced_class_weights(outcomes: &[f64]) -> Option<(f64, f64)> {
    let n = outcomes.len() as f64;
    let n1 = outcomes.iter().filter(|&&y| y > 0.5).count() as f64;
    let n0 = n - n1;
    if n0 == 0.0 || n1 == 0.0 {
        return None;
    }
    Some((n / (2.0 * n0), n / (2.0 * n1)))
}

/// Redundancy statistics for one conv layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerActivity {
    /// `F x F`, zero diagonal, entries `max(cor, 0)`.
    pub r_matrix: Array2<f64>,
    pub max: f64,
    /// `(f, g)` with `f < g` attaining `max`; `None` when `max == 0`.
    pub argmax: Option<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub bce: f64,
    pub l2_conv: f64,
    pub activity: f64,
    pub l1_out: f64,
    pub total: f64,
    pub layers: Vec<LayerActivity>,
    /// `(layer, f, g)` of the largest R entry over all layers.
    pub r_argmax: Option<(usize, usize, usize)>,
}

/// Gradient of the total loss, shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads(pub ModelParams);

impl std::ops::Deref for ParamGrads {
    type Target = ModelParams;
    fn deref(&self) -> &ModelParams {
        &self.0
    }
}

/// Class-weighted binary cross-entropy, averaged over samples.
pub fn bce_loss(
    outcomes: &[u8],
    predictions: &[f64],
    class_weights: (f64, f64),
) -> Result<f64, LossError> {
    if outcomes.len() != predictions.len() {
        return Err(LossError::LengthMismatch {
            outcomes: outcomes.len(),
            predictions: predictions.len(),
        });
    }
    if outcomes.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let sum: f64 = outcomes
        .iter()
        .zip(predictions)
        .map(|(&y, &p)| {
            let p = p.clamp(EPS, 1.0 - EPS);
            if y == 1 {
                -class_weights.1 * p.ln()
            } else {
                -class_weights.0 * (1.0 - p).ln()
            }
        })
        .sum();
    Ok(sum / outcomes.len() as f64)
}

/// Per-column centering statistics used by both the penalty and its gradient.
struct ColumnStats {
    means: Vec<f64>,
    /// Sum of squared deviations per column.
    ss: Vec<f64>,
}

fn column_stats(acts: &Array2<f64>) -> ColumnStats {
    let n = acts.nrows() as f64;
    let means: Vec<f64> = acts.columns().into_iter().map(|c| c.sum() / n).collect();
    let ss = acts
        .columns()
        .into_iter()
        .zip(&means)
        .map(|(c, m)| c.iter().map(|v| (v - m) * (v - m)).sum())
        .collect();
    ColumnStats { means, ss }
}

/// Clipped correlation matrix of the columns of `acts` (`T x F`, one row per phrase).
///
/// Fewer than two filters or fewer than two phrases give a zero penalty.
pub fn activity_penalty(acts: &Array2<f64>) -> LayerActivity {
    let f = acts.ncols();
    let mut r = Array2::zeros((f, f));
    if f < 2 || acts.nrows() < 2 {
        return LayerActivity {
            r_matrix: r,
            max: 0.0,
            argmax: None,
        };
    }
    let stats = column_stats(acts);
    let mut best = (0.0, None);
    for a in 0..f {
        for b in (a + 1)..f {
            let denom = (stats.ss[a] * stats.ss[b]).sqrt();
            let cor = if stats.ss[a] > 0.0 && stats.ss[b] > 0.0 {
                let (ma, mb) = (stats.means[a], stats.means[b]);
                let sab: f64 = acts
                    .column(a)
                    .iter()
                    .zip(acts.column(b))
                    .map(|(x, y)| (x - ma) * (y - mb))
                    .sum();
                (sab / denom).clamp(-1.0, 1.0)
            } else {
                0.0
            };
            let v = cor.max(0.0);
            r[[a, b]] = v;
            r[[b, a]] = v;
            if v > best.0 {
                best = (v, Some((a, b)));
            }
        }
    }
    LayerActivity {
        r_matrix: r,
        max: best.0,
        argmax: best.1,
    }
}

/// Stacks each layer's `P_i x F` activation blocks over the batch into `T x F`.
fn stack_layer_activations(traces: &[ForwardTrace], layer: usize) -> Array2<f64> {
    let views: Vec<_> = traces
        .iter()
        .map(|t| t.layers[layer].activations.view())
        .collect();
    ndarray::concatenate(Axis(0), &views).expect("all blocks share F")
}

fn regularizers(params: &ModelParams, w: &LossWeights) -> (f64, f64) {
    let l2: f64 = params
        .conv_layers
        .iter()
        .map(|l| l.kernels.iter().map(|v| v * v).sum::<f64>())
        .sum();
    let l1: f64 = params.output.weights.iter().map(|v| v.abs()).sum();
    (w.lambda_ker_conv * l2, w.lambda_ker_out * l1)
}

fn breakdown<S: Borrow<Sample>>(
    params: &ModelParams,
    batch: &[S],
    traces: &[ForwardTrace],
    w: &LossWeights,
) -> LossBreakdown {
    let outcomes: Vec<u8> = batch.iter().map(|s| s.borrow().outcome).collect();
    let preds: Vec<f64> = traces.iter().map(|t| t.prediction).collect();
    let bce =
        bce_loss(&outcomes, &preds, w.class_weights).expect("lengths agree and batch non-empty");

    let layers: Vec<LayerActivity> = (0..params.conv_layers.len())
        .map(|l| activity_penalty(&stack_layer_activations(traces, l)))
        .collect();
    let mut r_argmax = None;
    let mut r_best = 0.0;
    for (l, la) in layers.iter().enumerate() {
        if let Some((f, g)) = la.argmax {
            if la.max > r_best {
                r_best = la.max;
                r_argmax = Some((l, f, g));
            }
        }
    }
    let activity = w.lambda_act_conv * layers.iter().map(|l| l.max).sum::<f64>();
    let (l2_conv, l1_out) = regularizers(params, w);
    LossBreakdown {
        bce,
        l2_conv,
        activity,
        l1_out,
        total: bce + l2_conv + activity + l1_out,
        layers,
        r_argmax,
    }
}

fn run_forward<S: Borrow<Sample>>(
    params: &ModelParams,
    batch: &[S],
) -> Result<(Vec<Array2<f64>>, Vec<ForwardTrace>), LossError> {
    if batch.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let kmax = params.max_kernel_size();
    let mut embs = Vec::with_capacity(batch.len());
    let mut traces = Vec::with_capacity(batch.len());
    for s in batch {
        let s = s.borrow();
        if s.embeddings.ncols() != params.embedding_dim {
            return Err(ModelError::DimensionMismatch {
                sample_id: s.id,
                expected: params.embedding_dim,
                found: s.embeddings.ncols(),
            }
            .into());
        }
        let emb = padded_embeddings(s, kmax);
        traces.push(forward_padded(params, &emb, s.len()));
        embs.push(emb);
    }
    Ok((embs, traces))
}

/// Loss terms on one batch.
pub fn total_loss<S: Borrow<Sample>>(
    params: &ModelParams,
    batch: &[S],
    weights: &LossWeights,
) -> Result<LossBreakdown, LossError> {
    let (_, traces) = run_forward(params, batch)?;
    Ok(breakdown(params, batch, &traces, weights))
}

/// Loss breakdown and exact gradient of `total` with respect to every parameter.
///
/// Max-pooling routes gradient to the lowest-index maximizing phrase; the
/// activity term routes gradient through the lowest `(f, g)` pair attaining
/// each layer's max; the L1 subgradient uses `sign(0) = 0`. Clamped predictions
/// contribute no BCE gradient.
pub fn gradients<S: Borrow<Sample>>(
    params: &ModelParams,
    batch: &[S],
    weights: &LossWeights,
) -> Result<(LossBreakdown, ParamGrads), LossError> {
    let (embs, traces) = run_forward(params, batch)?;
    let bd = breakdown(params, batch, &traces, weights);
    let n = batch.len() as f64;
    let mut grads = ModelParams::zeros(params.embedding_dim, &[], 0);
    grads.conv_layers = params
        .conv_layers
        .iter()
        .map(|l| {
            crate::model::ConvLayerParams::zeros(l.kernel_size, params.embedding_dim, l.n_filters)
        })
        .collect();
    grads.output.weights = Array1::zeros(params.total_filters());

    // Correlation-gradient coefficients per layer: for the argmax pair (f, g),
    // d r / d x_t = yc_t / sqrt(Sxx Syy) - r xc_t / Sxx (and symmetrically for y).
    struct PairGrad {
        f: usize,
        g: usize,
        mean_f: f64,
        mean_g: f64,
        inv_denom: f64,
        r_over_ssf: f64,
        r_over_ssg: f64,
    }
    let pair_grads: Vec<Option<PairGrad>> = bd
        .layers
        .iter()
        .enumerate()
        .map(|(l, la)| {
            let (f, g) = la.argmax?;
            if weights.lambda_act_conv == 0.0 {
                return None;
            }
            let acts = stack_layer_activations(&traces, l);
            let stats = column_stats(&acts);
            let r = la.max;
            Some(PairGrad {
                f,
                g,
                mean_f: stats.means[f],
                mean_g: stats.means[g],
                inv_denom: 1.0 / (stats.ss[f] * stats.ss[g]).sqrt(),
                r_over_ssf: r / stats.ss[f],
                r_over_ssg: r / stats.ss[g],
            })
        })
        .collect();

    for ((sample, emb), trace) in batch.iter().zip(&embs).zip(&traces) {
        let sample = sample.borrow();
        let y = sample.y();
        let p = trace.prediction;
        let dlogit = if (EPS..=1.0 - EPS).contains(&p) {
            weights.class_weight(sample.outcome) * (p - y) / n
        } else {
            0.0
        };
        grads.output.bias += dlogit;
        for (gw, a) in grads.output.weights.iter_mut().zip(&trace.pooled) {
            *gw += dlogit * a;
        }

        let mut col = 0;
        for (l, (layer, lt)) in params.conv_layers.iter().zip(&trace.layers).enumerate() {
            let mut d_act = Array2::<f64>::zeros(lt.activations.raw_dim());
            for f in 0..layer.n_filters {
                d_act[[lt.argmax[f], f]] += dlogit * params.output.weights[col + f];
            }
            if let Some(pg) = &pair_grads[l] {
                let scale = weights.lambda_act_conv;
                for t in 0..lt.activations.nrows() {
                    let xc = lt.activations[[t, pg.f]] - pg.mean_f;
                    let yc = lt.activations[[t, pg.g]] - pg.mean_g;
                    d_act[[t, pg.f]] += scale * (yc * pg.inv_denom - pg.r_over_ssf * xc);
                    d_act[[t, pg.g]] += scale * (xc * pg.inv_denom - pg.r_over_ssg * yc);
                }
            }
            // Through the sigmoid: dz = da * a * (1 - a).
            let d_pre = &d_act * &lt.activations.mapv(|a| a * (1.0 - a));
            let windows = window_matrix(emb, layer.kernel_size, lt.activations.nrows());
            let dk = windows.t().dot(&d_pre);
            let gl = &mut grads.conv_layers[l];
            {
                let (k, d, fcount) = gl.kernels.dim();
                let mut km = gl
                    .kernels
                    .view_mut()
                    .into_shape_with_order((k * d, fcount))
                    .expect("standard layout");
                km += &dk;
            }
            gl.biases += &d_pre.sum_axis(Axis(0));
            col += layer.n_filters;
        }
    }

    for (gl, pl) in grads.conv_layers.iter_mut().zip(&params.conv_layers) {
        gl.kernels
            .scaled_add(2.0 * weights.lambda_ker_conv, &pl.kernels);
    }
    for (g, w) in grads.output.weights.iter_mut().zip(&params.output.weights) {
        let sign = if *w > 0.0 {
            1.0
        } else if *w < 0.0 {
            -1.0
        } else {
            0.0
        };
        *g += weights.lambda_ker_out * sign;
    }
    Ok((bd, ParamGrads(grads)))
}

// ---------------------------------------------------------------------------
// Finite-difference check
// ---------------------------------------------------------------------------

/// Relative errors use `|a - n| / max(|a|, |n|, REL_ERR_FLOOR)`.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FdEntry {
    pub index: usize,
    pub name: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    /// Near a pooling / max-R tie; excluded from pass/fail.
    pub tie: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FdReport {
    pub h: f64,
    pub tie_tolerance: f64,
    pub entries: Vec<FdEntry>,
}

impl FdReport {
    /// Largest relative error over coordinates not flagged as ties.
    pub fn max_rel_error(&self) -> f64 {
        self.entries
            .iter()
            .filter(|e| !e.tie)
            .map(|e| e.rel_error)
            .fold(0.0, f64::max)
    }

    pub fn n_flagged(&self) -> usize {
        self.entries.iter().filter(|e| e.tie).count()
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error() <= tolerance
    }

    /// Tab-separated table: coordinate, analytic, numeric, relative error, tie flag.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("coordinate\tanalytic\tnumeric\trel_error\ttie\n");
        for e in &self.entries {
            out.push_str(&format!(
                "{}\t{:.12e}\t{:.12e}\t{:.3e}\t{}\n",
                e.name, e.analytic, e.numeric, e.rel_error, e.tie
            ));
        }
        out
    }
}

/// Discrete choices made by the loss: pooled argmaxes, R argmaxes, clamping.
#[derive(Debug, Clone, PartialEq)]
struct Structure {
    argmax: Vec<Vec<usize>>,
    r_argmax: Vec<Option<(usize, usize)>>,
    clamped: Vec<bool>,
}

/// Per-(layer, filter) smallest gap between the best and runner-up phrase
/// activation over the batch, and per-layer gap between the two largest R entries.
struct TieGaps {
    pool: Vec<Vec<f64>>,
    r: Vec<f64>,
}

fn structure_and_gaps<S: Borrow<Sample>>(
    params: &ModelParams,
    batch: &[S],
) -> (Structure, TieGaps, LossBreakdown) {
    let (_, traces) = run_forward(params, batch).expect("validated by caller");
    let bd = breakdown(params, batch, &traces, &LossWeights::default());
    let mut pool: Vec<Vec<f64>> = params
        .conv_layers
        .iter()
        .map(|l| vec![f64::INFINITY; l.n_filters])
        .collect();
    for tr in &traces {
        for (l, lt) in tr.layers.iter().enumerate() {
            for (f, col) in lt.activations.columns().into_iter().enumerate() {
                let best = lt.pooled[f];
                let second = col
                    .iter()
                    .enumerate()
                    .filter(|(t, _)| *t != lt.argmax[f])
                    .map(|(_, v)| *v)
                    .fold(f64::NEG_INFINITY, f64::max);
                pool[l][f] = pool[l][f].min(best - second);
            }
        }
    }
    let r = bd
        .layers
        .iter()
        .map(|la| {
            let f = la.r_matrix.nrows();
            let mut vals: Vec<f64> = (0..f)
                .flat_map(|a| ((a + 1)..f).map(move |b| (a, b)))
                .map(|(a, b)| la.r_matrix[[a, b]])
                .collect();
            vals.sort_by(|a, b| b.total_cmp(a));
            match vals.as_slice() {
                [a, b, ..] if *a > 0.0 => a - b,
                _ => f64::INFINITY,
            }
        })
        .collect();
    let structure = Structure {
        argmax: traces.iter().map(|t| t.argmax_positions.clone()).collect(),
        r_argmax: bd.layers.iter().map(|l| l.argmax).collect(),
        clamped: traces
            .iter()
            .map(|t| !(EPS..=1.0 - EPS).contains(&t.prediction))
            .collect(),
    };
    (structure, TieGaps { pool, r }, bd)
}

/// Central-difference gradient check over every parameter coordinate.
///
/// A coordinate is flagged as a tie when perturbing it by `±h` changes any
/// discrete choice of the loss, or when it feeds a filter (or layer) whose
/// pooling (or max-R) gap is already below `tie_tolerance`.
pub fn fd_check<S: Borrow<Sample>>(
    params: &ModelParams,
    batch: &[S],
    weights: &LossWeights,
    h: f64,
    tie_tolerance: f64,
) -> Result<FdReport, LossError> {
    let (_, grads) = gradients(params, batch, weights)?;
    let analytic = grads.to_flat();
    let (base_structure, gaps, _) = structure_and_gaps(params, batch);

    // Which (layer, filter) each flat coordinate belongs to, if any.
    let mut owner: Vec<Option<(usize, usize)>> = Vec::with_capacity(analytic.len());
    for (l, layer) in params.conv_layers.iter().enumerate() {
        let f = layer.n_filters;
        owner.extend((0..layer.kernels.len()).map(|i| Some((l, i % f))));
        owner.extend((0..f).map(|i| Some((l, i))));
    }
    owner.resize(analytic.len(), None);

    let base = params.to_flat();
    let mut probe = params.clone();
    let mut entries = Vec::with_capacity(base.len());
    for (i, &a) in analytic.iter().enumerate() {
        let mut x = base.clone();
        x[i] = base[i] + h;
        probe.set_flat(&x);
        let plus = total_loss(&probe, batch, weights)?.total;
        let (s_plus, _, _) = structure_and_gaps(&probe, batch);
        x[i] = base[i] - h;
        probe.set_flat(&x);
        let minus = total_loss(&probe, batch, weights)?.total;
        let (s_minus, _, _) = structure_and_gaps(&probe, batch);

        let numeric = (plus - minus) / (2.0 * h);
        let near_gap = owner[i]
            .map(|(l, f)| gaps.pool[l][f] < tie_tolerance || gaps.r[l] < tie_tolerance)
            .unwrap_or(false);
        let tie = near_gap || s_plus != base_structure || s_minus != base_structure;
        let rel_error = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
        entries.push(FdEntry {
            index: i,
            name: params.coordinate_name(i),
            analytic: a,
            numeric,
            rel_error,
            tie,
        });
    }
    Ok(FdReport {
        h,
        tie_tolerance,
        entries,
    })
}
