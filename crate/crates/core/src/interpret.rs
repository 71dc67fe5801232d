//! Reading a trained network as a set of text treatments.
//!
//! Pooled activations become per-sample treatment values, filters are ranked
//! by their output weight, and each filter is summarized by the phrases that
//! activate it most strongly.

use std::cmp::Ordering;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Corpus;
use crate::loss::{activity_penalty, LayerActivity};
use crate::model::{forward, ModelError, ModelParams};
use crate::stats::{median, pearson};

/// Default activation-range threshold below which a filter is ignored.
pub const USEFUL_THRESHOLD: f64 = 0.05;
/// Token used for window positions past the end of a short sample.
pub const PAD_TOKEN: &str = "[PAD]";

/// Absolute slack for the inclusive range test, so a range that is exactly `t`
/// in decimal (e.g. `0.45 - 0.40`) is not rejected by binary rounding.
const RANGE_SLACK: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InterpretError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("row count mismatch: {left} vs {right}")]
    RowMismatch { left: usize, right: usize },
    #[error("need at least {needed} rows, got {got}")]
    TooFewRows { needed: usize, got: usize },
}

/// Per-sample max-pooled activations, columns ordered like the output weights.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledMatrix {
    pub values: Array2<f64>,
    pub argmax: Array2<usize>,
    pub sample_ids: Vec<u64>,
}

pub fn pooled_matrix(model: &ModelParams, corpus: &Corpus) -> Result<PooledMatrix, ModelError> {
    let cols = model.total_filters();
    let n = corpus.len();
    let mut values = Array2::zeros((n, cols));
    let mut argmax = Array2::zeros((n, cols));
    for (i, s) in corpus.samples().iter().enumerate() {
        let tr = forward(model, s)?;
        for j in 0..cols {
            values[[i, j]] = tr.pooled[j];
            argmax[[i, j]] = tr.argmax_positions[j];
        }
    }
    Ok(PooledMatrix {
        values,
        argmax,
        sample_ids: corpus.samples().iter().map(|s| s.id).collect(),
    })
}

/// `max - min` of every column.
pub fn activation_ranges(pooled: &Array2<f64>) -> Vec<f64> {
    pooled
        .columns()
        .into_iter()
        .map(|c| {
            let hi = c.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lo = c.iter().copied().fold(f64::INFINITY, f64::min);
            hi - lo
        })
        .collect()
}

/// `mask[f]` is true iff column `f` spans a range of at least `t` (inclusive).
pub fn useful_filters(pooled: &Array2<f64>, t: f64) -> Vec<bool> {
    activation_ranges(pooled)
        .into_iter()
        .map(|r| r + RANGE_SLACK >= t)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreatmentMode {
    Continuous,
    Binary,
}

/// `N x m` treatment values for the useful filters only.
#[derive(Debug, Clone, PartialEq)]
pub struct TreatmentMatrix {
    pub values: Array2<f64>,
    /// Human-readable column labels.
    pub labels: Vec<String>,
    /// Column of the pooled matrix each treatment came from.
    pub source_columns: Vec<usize>,
    pub mode: TreatmentMode,
}

impl TreatmentMatrix {
    pub fn n_rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.values.ncols()
    }

    /// Rows at `indices` (repeats allowed).
    pub fn select_rows(&self, indices: &[usize]) -> TreatmentMatrix {
        TreatmentMatrix {
            values: self.values.select(Axis(0), indices),
            ..self.clone()
        }
    }

    /// Wraps an arbitrary feature matrix (e.g. benchmark n-gram counts).
    pub fn from_features(values: Array2<f64>, labels: Vec<String>) -> Self {
        let source_columns = (0..values.ncols()).collect();
        TreatmentMatrix {
            values,
            labels,
            source_columns,
            mode: TreatmentMode::Continuous,
        }
    }
}

/// `Z[i,f] = 1[a[i,f] > median_f]`, strict inequality.
pub fn binarize(pooled: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(pooled.raw_dim());
    for (j, col) in pooled.columns().into_iter().enumerate() {
        let m = median(&col.to_vec());
        for (i, v) in col.iter().enumerate() {
            out[[i, j]] = if *v > m { 1.0 } else { 0.0 };
        }
    }
    out
}

/// Treatments from the useful columns of a pooled matrix.
pub fn treatments(
    model: &ModelParams,
    pooled: &Array2<f64>,
    useful: &[bool],
    mode: TreatmentMode,
) -> TreatmentMatrix {
    let keep: Vec<usize> = useful
        .iter()
        .enumerate()
        .filter(|(_, &u)| u)
        .map(|(j, _)| j)
        .collect();
    let selected = pooled.select(Axis(1), &keep);
    let values = match mode {
        TreatmentMode::Continuous => selected,
        TreatmentMode::Binary => binarize(&selected),
    };
    let labels = keep
        .iter()
        .map(|&j| {
            let (l, f) = model.locate_filter(j);
            format!("L{l}F{f}")
        })
        .collect();
    TreatmentMatrix {
        values,
        labels,
        source_columns: keep,
        mode,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopPhrase {
    pub tokens: Vec<String>,
    pub sample_id: u64,
    pub start: usize,
    pub activation: f64,
}

impl TopPhrase {
    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

/// Ranking: activation descending, then sample id and start ascending.
fn rank(a: &(f64, u64, usize), b: &(f64, u64, usize)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
}

fn phrase_tokens(tokens: &[String], start: usize, k: usize) -> Vec<String> {
    (start..start + k)
        .map(|i| {
            tokens
                .get(i)
                .cloned()
                .unwrap_or_else(|| PAD_TOKEN.to_string())
        })
        .collect()
}

/// Top-`k` phrase windows for every filter, gathered in one pass over the corpus.
///
/// The `k` highest activations are taken first; duplicates of the same token
/// string within them are then collapsed onto their best occurrence.
fn top_phrases_all(
    model: &ModelParams,
    corpus: &Corpus,
    k: usize,
) -> Result<Vec<Vec<TopPhrase>>, ModelError> {
    let cols = model.total_filters();
    let mut best: Vec<Vec<(f64, u64, usize, usize)>> = vec![Vec::with_capacity(k + 1); cols];
    for (si, s) in corpus.samples().iter().enumerate() {
        let tr = forward(model, s)?;
        let mut col = 0;
        for lt in &tr.layers {
            for act in lt.activations.columns() {
                let list = &mut best[col];
                for (t, &a) in act.iter().enumerate() {
                    let key = (a, s.id, t);
                    if list.len() == k {
                        let last = list.last().expect("k >= 1");
                        if rank(&key, &(last.0, last.1, last.2)) != Ordering::Less {
                            continue;
                        }
                    }
                    let pos =
                        list.partition_point(|e| rank(&(e.0, e.1, e.2), &key) == Ordering::Less);
                    list.insert(pos, (a, s.id, t, si));
                    list.truncate(k);
                }
                col += 1;
            }
        }
    }
    Ok(best
        .into_iter()
        .enumerate()
        .map(|(col, list)| {
            let (layer, _) = model.locate_filter(col);
            let kernel = model.conv_layers[layer].kernel_size;
            let mut out: Vec<TopPhrase> = Vec::with_capacity(list.len());
            for (a, id, t, si) in list {
                let tokens = phrase_tokens(&corpus.samples()[si].tokens, t, kernel);
                if out.iter().any(|p| p.tokens == tokens) {
                    continue;
                }
                out.push(TopPhrase {
                    tokens,
                    sample_id: id,
                    start: t,
                    activation: a,
                });
            }
            out
        })
        .collect())
}

/// Most strongly activating phrases of filter `f` in conv layer `layer`.
pub fn top_phrases(
    model: &ModelParams,
    corpus: &Corpus,
    layer: usize,
    f: usize,
    k: usize,
) -> Result<Vec<TopPhrase>, ModelError> {
    let col = model.filter_offset(layer) + f;
    Ok(top_phrases_all(model, corpus, k.max(1))?.swap_remove(col))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub layer: usize,
    pub filter: usize,
    /// Column in the pooled / output-weight vector.
    pub column: usize,
    pub output_weight: f64,
    pub activation_range: f64,
    pub useful: bool,
    pub top_phrases: Vec<TopPhrase>,
    pub pooled: Vec<f64>,
}

/// One report per filter, ordered by output weight (largest first).
pub fn filter_reports(
    model: &ModelParams,
    corpus: &Corpus,
    t: f64,
    k: usize,
) -> Result<Vec<FilterReport>, ModelError> {
    let pooled = pooled_matrix(model, corpus)?;
    let ranges = activation_ranges(&pooled.values);
    let useful = useful_filters(&pooled.values, t);
    let tops = top_phrases_all(model, corpus, k.max(1))?;
    let mut reports: Vec<FilterReport> = tops
        .into_iter()
        .enumerate()
        .map(|(col, top)| {
            let (layer, filter) = model.locate_filter(col);
            FilterReport {
                layer,
                filter,
                column: col,
                output_weight: model.output.weights[col],
                activation_range: ranges[col],
                useful: useful[col],
                top_phrases: top,
                pooled: pooled.values.column(col).to_vec(),
            }
        })
        .collect();
    reports.sort_by(|a, b| {
        b.output_weight
            .total_cmp(&a.output_weight)
            .then(a.column.cmp(&b.column))
    });
    Ok(reports)
}

/// Tab-separated filter table: rank, layer, filter, output weight, range, usefulness, phrases.
pub fn reports_to_tsv(reports: &[FilterReport]) -> String {
    let mut out =
        String::from("rank\tlayer\tfilter\tw_out\tactivation_range\tuseful\ttop_phrases\tlabel\n");
    for (rank, r) in reports.iter().enumerate() {
        let phrases: Vec<String> = r
            .top_phrases
            .iter()
            .map(|p| format!("\"{}\"", p.text()))
            .collect();
        out.push_str(&format!(
            "{}\t{}\t{}\t{:.6}\t{:.6}\t{}\t{}\t\n",
            rank + 1,
            r.layer,
            r.filter,
            r.output_weight,
            r.activation_range,
            r.useful,
            phrases.join(", ")
        ));
    }
    out
}

/// Pearson correlation of every column of `a` with every column of `b` (`p x q`).
pub fn correlation_grid(a: &Array2<f64>, b: &Array2<f64>) -> Result<Array2<f64>, InterpretError> {
    if a.nrows() != b.nrows() {
        return Err(InterpretError::RowMismatch {
            left: a.nrows(),
            right: b.nrows(),
        });
    }
    if a.nrows() < 2 {
        return Err(InterpretError::TooFewRows {
            needed: 2,
            got: a.nrows(),
        });
    }
    let acols: Vec<Vec<f64>> = a.columns().into_iter().map(|c| c.to_vec()).collect();
    let bcols: Vec<Vec<f64>> = b.columns().into_iter().map(|c| c.to_vec()).collect();
    Ok(Array2::from_shape_fn(
        (acols.len(), bcols.len()),
        |(j, k)| pearson(&acols[j], &bcols[k]),
    ))
}

/// Dense numeric table with row and column labels.
pub fn grid_to_tsv(grid: &Array2<f64>, row_labels: &[String], col_labels: &[String]) -> String {
    let mut out = String::from("feature");
    for c in col_labels {
        out.push('\t');
        out.push_str(c);
    }
    out.push('\n');
    for (label, row) in row_labels.iter().zip(grid.rows()) {
        out.push_str(label);
        for v in row {
            out.push_str(&format!("\t{v:.6}"));
        }
        out.push('\n');
    }
    out
}

/// Clipped filter-correlation matrices over every phrase of every sample in `corpus`.
pub fn corpus_activity(
    model: &ModelParams,
    corpus: &Corpus,
) -> Result<Vec<LayerActivity>, ModelError> {
    let mut blocks: Vec<Vec<Array2<f64>>> =
        vec![Vec::with_capacity(corpus.len()); model.conv_layers.len()];
    for s in corpus.samples() {
        let tr = forward(model, s)?;
        for (l, lt) in tr.layers.into_iter().enumerate() {
            blocks[l].push(lt.activations);
        }
    }
    Ok(blocks
        .iter()
        .map(|b| {
            let views: Vec<_> = b.iter().map(|a| a.view()).collect();
            if views.is_empty() {
                return activity_penalty(&Array2::zeros((0, 0)));
            }
            activity_penalty(&ndarray::concatenate(Axis(0), &views).expect("same filter count"))
        })
        .collect())
}

/// Largest off-diagonal clipped correlation over all layers.
pub fn max_filter_correlation(activity: &[LayerActivity]) -> f64 {
    activity.iter().map(|l| l.max).fold(0.0, f64::max)
}
