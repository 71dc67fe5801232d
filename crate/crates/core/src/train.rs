//! Adam training with early stopping, and cross-validated grid tuning.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{split, Corpus, CorpusError, Sample, SplitSpec};
use crate::interpret::{
    corpus_activity, max_filter_correlation, pooled_matrix, useful_filters, USEFUL_THRESHOLD,
};
use crate::loss::{
    balanced_class_weights, gradients, total_loss, LossBreakdown, LossError, LossWeights,
    ParamGrads,
};
use crate::model::{predict, ModelError, ModelParams};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite gradient at {coordinate}")]
    NonFiniteGradient { coordinate: String },
    #[error("training set contains only class {0}; balanced class weights are undefined")]
    SingleClass(u8),
    #[error("cannot carve a validation split: {0}")]
    DegenerateSplit(#[source] CorpusError),
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConstants {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConstants {
    fn default() -> Self {
        AdamConstants {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub loss_weights: LossWeights,
    /// Replace `loss_weights.class_weights` with `N / (2 N_c)` computed on the
    /// portion of the training data used for gradient steps.
    pub balanced_class_weights: bool,
    pub kernel_sizes: Vec<usize>,
    pub n_filters: usize,
    pub validation_fraction: f64,
    pub seed: u64,
    pub adam: AdamConstants,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::censorship_profile()
    }
}

impl TrainConfig {
    /// Settings selected for the censorship-style application (8 filters, kernels 5 and 7).
    pub fn censorship_profile() -> Self {
        TrainConfig {
            epochs: 100,
            patience: 15,
            batch_size: 32,
            learning_rate: 1e-4,
            loss_weights: LossWeights {
                lambda_ker_conv: 1e-3,
                lambda_act_conv: 3.0,
                lambda_ker_out: 1e-4,
                class_weights: (1.0, 1.0),
            },
            balanced_class_weights: true,
            kernel_sizes: vec![5, 7],
            n_filters: 8,
            validation_fraction: 0.2,
            seed: 0,
            adam: AdamConstants::default(),
        }
    }

    /// Settings selected for the complaint-response application (16 filters, kernel 5).
    pub fn cfpb_profile() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            loss_weights: LossWeights {
                lambda_ker_conv: 0.0,
                lambda_act_conv: 0.5,
                lambda_ker_out: 1e-3,
                class_weights: (1.0, 1.0),
            },
            kernel_sizes: vec![5],
            n_filters: 16,
            ..TrainConfig::censorship_profile()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.kernel_sizes.is_empty() || self.kernel_sizes.contains(&0) {
            return bad("kernel sizes must be non-empty and >= 1");
        }
        if self.n_filters == 0 {
            return bad("n_filters must be >= 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad("validation_fraction must lie in (0, 1)");
        }
        let w = &self.loss_weights;
        for v in [w.lambda_ker_conv, w.lambda_act_conv, w.lambda_ker_out] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad("penalty strengths must be finite and >= 0");
            }
        }
        if !self.balanced_class_weights && !(w.class_weights.0 > 0.0 && w.class_weights.1 > 0.0) {
            return bad("class weights must be positive");
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || a.epsilon <= 0.0 {
            return bad("Adam constants out of range");
        }
        Ok(())
    }

    /// Kernel sizes beyond the corpus truncation length cannot see a full phrase.
    pub fn check_feasible(&self, corpus: &Corpus) -> Result<(), TrainError> {
        self.validate()?;
        if let Some(&k) = self.kernel_sizes.iter().find(|&&k| k > corpus.max_tokens()) {
            return Err(TrainError::InvalidConfig(format!(
                "kernel size {k} exceeds max_tokens {}",
                corpus.max_tokens()
            )));
        }
        Ok(())
    }
}

/// Moment accumulators shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ModelParams,
    pub v: ModelParams,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let mut zero = params.clone();
        for t in zero.tensors_mut() {
            t.fill(0.0);
        }
        AdamState {
            m: zero.clone(),
            v: zero,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &ParamGrads,
    state: &mut AdamState,
    learning_rate: f64,
    c: &AdamConstants,
) -> Result<(), TrainError> {
    let flat = grads.tensors();
    if let Some(i) = flat
        .iter()
        .flat_map(|t| t.iter())
        .position(|g| !g.is_finite())
    {
        return Err(TrainError::NonFiniteGradient {
            coordinate: params.coordinate_name(i),
        });
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    for (((p, g), m), v) in params
        .tensors_mut()
        .into_iter()
        .zip(flat)
        .zip(state.m.tensors_mut())
        .zip(state.v.tensors_mut())
    {
        for i in 0..p.len() {
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
        }
    }
    Ok(())
}

/// Loss terms averaged over an epoch's batches.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TermSummary {
    pub bce: f64,
    pub l2_conv: f64,
    pub activity: f64,
    pub l1_out: f64,
    pub total: f64,
}

impl TermSummary {
    fn add(&mut self, b: &LossBreakdown) {
        self.bce += b.bce;
        self.l2_conv += b.l2_conv;
        self.activity += b.activity;
        self.l1_out += b.l1_out;
        self.total += b.total;
    }

    fn scale(&mut self, s: f64) {
        self.bce *= s;
        self.l2_conv *= s;
        self.activity *= s;
        self.l1_out *= s;
        self.total *= s;
    }

    fn from_breakdown(b: &LossBreakdown) -> Self {
        let mut t = TermSummary::default();
        t.add(b);
        t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: TermSummary,
    pub validation_loss: f64,
    pub validation_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Loss on the gradient-step portion before the first update.
    pub initial_train_loss: TermSummary,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub class_weights: (f64, f64),
}

impl TrainHistory {
    pub fn to_tsv(&self) -> String {
        let mut out =
            String::from("epoch\ttrain_total\ttrain_bce\ttrain_l2_conv\ttrain_activity\ttrain_l1_out\tval_loss\tval_accuracy\tbest\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{}\t{:.8}\t{:.8}\t{:.8}\t{:.8}\t{:.8}\t{:.8}\t{:.6}\t{}\n",
                e.epoch,
                e.train.total,
                e.train.bce,
                e.train.l2_conv,
                e.train.activity,
                e.train.l1_out,
                e.validation_loss,
                e.validation_accuracy,
                e.epoch == self.best_epoch
            ));
        }
        out
    }
}

/// Fraction of samples whose thresholded prediction (at 0.5) equals the outcome.
pub fn accuracy(params: &ModelParams, corpus: &Corpus) -> Result<f64, ModelError> {
    if corpus.is_empty() {
        return Ok(f64::NAN);
    }
    let preds = predict(params, corpus.samples())?;
    let hits = preds
        .iter()
        .zip(corpus.samples())
        .filter(|(p, s)| u8::from(**p >= 0.5) == s.outcome)
        .count();
    Ok(hits as f64 / corpus.len() as f64)
}

/// Seed for the validation carve-out, kept distinct from the init/shuffle stream.
fn validation_seed(seed: u64) -> u64 {
    seed ^ 0x5DEE_CE66_D1CE_5EED
}

/// Trains a fresh model on `corpus`.
///
/// A `validation_fraction` slice is held out for early stopping on validation
/// total loss; training stops once `max(patience, 1)` consecutive epochs fail
/// to improve on the best loss, and the best parameters are returned.
pub fn train(
    corpus: &Corpus,
    config: &TrainConfig,
) -> Result<(ModelParams, TrainHistory), TrainError> {
    config.check_feasible(corpus)?;
    if corpus.len() < 2 {
        return Err(TrainError::TooFewSamples {
            needed: 2,
            got: corpus.len(),
        });
    }
    let (fit, val) = split(
        corpus,
        &SplitSpec {
            train_fraction: 1.0 - config.validation_fraction,
            seed: validation_seed(config.seed),
        },
    )
    .map_err(TrainError::DegenerateSplit)?;

    let mut weights = config.loss_weights;
    if config.balanced_class_weights {
        let y = fit.outcomes();
        weights.class_weights =
            balanced_class_weights(&y).ok_or_else(|| TrainError::SingleClass(y[0] as u8))?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = ModelParams::glorot(
        corpus.embedding_dim(),
        &config.kernel_sizes,
        config.n_filters,
        &mut rng,
    );
    let mut adam = AdamState::new(&params);

    let initial = TermSummary::from_breakdown(&total_loss(&params, fit.samples(), &weights)?);
    let mut history = TrainHistory {
        initial_train_loss: initial,
        epochs: Vec::new(),
        best_epoch: 0,
        stopped_early: false,
        class_weights: weights.class_weights,
    };

    let mut order: Vec<usize> = (0..fit.len()).collect();
    let mut best: Option<(f64, ModelParams)> = None;
    let mut stale = 0;
    let needed_stale = config.patience.max(1);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut summary = TermSummary::default();
        let mut n_batches = 0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &fit.samples()[i]).collect();
            let (bd, grads) = gradients(&params, &batch, &weights)?;
            adam_step(
                &mut params,
                &grads,
                &mut adam,
                config.learning_rate,
                &config.adam,
            )?;
            summary.add(&bd);
            n_batches += 1;
        }
        summary.scale(1.0 / n_batches as f64);

        let val_loss = total_loss(&params, val.samples(), &weights)?.total;
        let val_acc = accuracy(&params, &val)?;
        history.epochs.push(EpochRecord {
            epoch,
            train: summary,
            validation_loss: val_loss,
            validation_accuracy: val_acc,
        });

        let improved = best.as_ref().is_none_or(|(b, _)| val_loss < *b);
        if improved {
            best = Some((val_loss, params.clone()));
            history.best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= needed_stale {
                history.stopped_early = epoch + 1 < config.epochs;
                break;
            }
        }
    }
    let (_, best_params) = best.expect("at least one epoch ran");
    Ok((best_params, history))
}

// ---------------------------------------------------------------------------
// Tuning
// ---------------------------------------------------------------------------

/// Weight on the max filter correlation and on the useful-filter fraction.
pub const CORRELATION_WEIGHT: f64 = 0.25;
pub const USEFUL_WEIGHT: f64 = 0.25;

/// `accuracy - 0.25 * max_corr + 0.25 * useful_count / total_filters`.
pub fn composite_score(
    accuracy: f64,
    max_corr: f64,
    useful_count: f64,
    total_filters: usize,
) -> f64 {
    accuracy - CORRELATION_WEIGHT * max_corr + USEFUL_WEIGHT * (useful_count / total_filters as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldStats {
    pub accuracy: f64,
    pub max_corr: f64,
    pub useful_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub grid_index: usize,
    pub config: TrainConfig,
    pub folds: Vec<FoldStats>,
    pub mean_accuracy: f64,
    pub mean_max_corr: f64,
    pub mean_useful: f64,
    pub composite: f64,
    /// Set when the grid entry could not be trained; such entries sort last.
    pub failure: Option<String>,
}

impl TuneResult {
    pub fn fold_accuracies(&self) -> Vec<f64> {
        self.folds.iter().map(|f| f.accuracy).collect()
    }
}

/// Seeded assignment of `n` samples to `folds` near-equal folds (sample indices per fold).
pub fn fold_indices(n: usize, folds: usize, seed: u64) -> Vec<Vec<usize>> {
    let perm = crate::corpus::seeded_permutation(n, seed);
    let mut out = vec![Vec::new(); folds];
    for (rank, i) in perm.into_iter().enumerate() {
        out[rank % folds].push(i);
    }
    for f in &mut out {
        f.sort_unstable();
    }
    out
}

fn evaluate_fold(
    corpus: &Corpus,
    config: &TrainConfig,
    held_out: &[usize],
) -> Result<FoldStats, TrainError> {
    let held: std::collections::HashSet<usize> = held_out.iter().copied().collect();
    let train_idx: Vec<usize> = (0..corpus.len()).filter(|i| !held.contains(i)).collect();
    let fit = corpus.subset(&train_idx);
    let val = corpus.subset(held_out);
    let (params, _) = train(&fit, config)?;
    let acc = accuracy(&params, &val)?;
    let max_corr = max_filter_correlation(&corpus_activity(&params, &val)?);
    let pooled = pooled_matrix(&params, &val)?;
    let useful_count = useful_filters(&pooled.values, USEFUL_THRESHOLD)
        .iter()
        .filter(|&&u| u)
        .count();
    Ok(FoldStats {
        accuracy: acc,
        max_corr,
        useful_count,
    })
}

/// K-fold cross-validation of every grid entry, sorted by composite score (best first).
///
/// Infeasible or failing entries are reported with `failure` set rather than aborting.
/// Work items are independent and run on the current rayon pool; results do not
/// depend on the number of threads.
pub fn cross_validate(
    corpus: &Corpus,
    grid: &[TrainConfig],
    folds: usize,
    seed: u64,
) -> Result<Vec<TuneResult>, TrainError> {
    if folds < 2 {
        return Err(TrainError::InvalidConfig("need at least 2 folds".into()));
    }
    if corpus.len() < folds {
        return Err(TrainError::TooFewSamples {
            needed: folds,
            got: corpus.len(),
        });
    }
    let assignment = fold_indices(corpus.len(), folds, seed);
    let jobs: Vec<(usize, usize)> = (0..grid.len())
        .flat_map(|g| (0..folds).map(move |f| (g, f)))
        .collect();
    let outcomes: Vec<Result<FoldStats, String>> = jobs
        .par_iter()
        .map(|&(g, f)| {
            grid[g]
                .check_feasible(corpus)
                .and_then(|_| evaluate_fold(corpus, &grid[g], &assignment[f]))
                .map_err(|e| e.to_string())
        })
        .collect();

    let mut results: Vec<TuneResult> = grid
        .iter()
        .enumerate()
        .map(|(g, config)| {
            let fold_results = &outcomes[g * folds..(g + 1) * folds];
            let failure = fold_results.iter().find_map(|r| r.as_ref().err().cloned());
            let stats: Vec<FoldStats> = fold_results
                .iter()
                .filter_map(|r| r.as_ref().ok().cloned())
                .collect();
            let (mean_accuracy, mean_max_corr, mean_useful, composite) = if failure.is_none() {
                let k = stats.len() as f64;
                let acc = stats.iter().map(|s| s.accuracy).sum::<f64>() / k;
                let corr = stats.iter().map(|s| s.max_corr).sum::<f64>() / k;
                let useful = stats.iter().map(|s| s.useful_count as f64).sum::<f64>() / k;
                let total = config.n_filters * config.kernel_sizes.len();
                (acc, corr, useful, composite_score(acc, corr, useful, total))
            } else {
                (f64::NAN, f64::NAN, f64::NAN, f64::NEG_INFINITY)
            };
            TuneResult {
                grid_index: g,
                config: config.clone(),
                folds: stats,
                mean_accuracy,
                mean_max_corr,
                mean_useful,
                composite,
                failure,
            }
        })
        .collect();
    results.sort_by(|a, b| {
        b.composite
            .total_cmp(&a.composite)
            .then(a.grid_index.cmp(&b.grid_index))
    });
    Ok(results)
}

pub fn tune_results_to_tsv(results: &[TuneResult]) -> String {
    let mut out = String::from(
        "rank\tgrid_index\tn_filters\tkernel_sizes\tlambda_ker_conv\tlambda_act_conv\tlambda_ker_out\tlearning_rate\tmean_accuracy\tmean_max_corr\tmean_useful\tcomposite\tstatus\n",
    );
    for (rank, r) in results.iter().enumerate() {
        let c = &r.config;
        let ks: Vec<String> = c.kernel_sizes.iter().map(|k| k.to_string()).collect();
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{:.3}\t{:.6}\t{}\n",
            rank + 1,
            r.grid_index,
            c.n_filters,
            ks.join(","),
            c.loss_weights.lambda_ker_conv,
            c.loss_weights.lambda_act_conv,
            c.loss_weights.lambda_ker_out,
            c.learning_rate,
            r.mean_accuracy,
            r.mean_max_corr,
            r.mean_useful,
            r.composite,
            r.failure
                .as_deref()
                .map_or("ok".to_string(), |e| format!("failed: {e}"))
        ));
    }
    out
}

/// Cartesian product of hyperparameter choices over a base configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub n_filters: Vec<usize>,
    pub kernel_sizes: Vec<Vec<usize>>,
    pub lambda_ker_conv: Vec<f64>,
    pub lambda_act_conv: Vec<f64>,
    pub lambda_ker_out: Vec<f64>,
    pub learning_rate: Vec<f64>,
}

impl GridSpec {
    /// Values searched for the censorship-style model.
    pub fn censorship() -> Self {
        GridSpec {
            n_filters: vec![4, 8, 16],
            kernel_sizes: vec![vec![5], vec![7], vec![5, 7]],
            lambda_ker_conv: vec![0.0, 1e-4, 1e-3],
            lambda_act_conv: vec![0.0, 1.0, 3.0],
            lambda_ker_out: vec![1e-4, 1e-3, 1e-2],
            learning_rate: vec![1e-5, 1e-4, 1e-3],
        }
    }

    /// Values searched for the complaint-response model.
    pub fn cfpb() -> Self {
        GridSpec {
            n_filters: vec![4, 8, 16],
            kernel_sizes: vec![vec![5], vec![7], vec![5, 7]],
            lambda_ker_conv: vec![0.0, 1e-4, 1e-3, 1e-2],
            lambda_act_conv: vec![0.0, 0.5, 1.0, 3.0],
            lambda_ker_out: vec![1e-4, 1e-3, 1e-2],
            learning_rate: vec![1e-5, 1e-4, 1e-3, 1e-2, 1e-1],
        }
    }

    pub fn expand(&self, base: &TrainConfig) -> Vec<TrainConfig> {
        let mut out = Vec::new();
        for &f in &self.n_filters {
            for ks in &self.kernel_sizes {
                for &lc in &self.lambda_ker_conv {
                    for &la in &self.lambda_act_conv {
                        for &lo in &self.lambda_ker_out {
                            for &lr in &self.learning_rate {
                                let mut c = base.clone();
                                c.n_filters = f;
                                c.kernel_sizes = ks.clone();
                                c.loss_weights.lambda_ker_conv = lc;
                                c.loss_weights.lambda_act_conv = la;
                                c.loss_weights.lambda_ker_out = lo;
                                c.learning_rate = lr;
                                out.push(c);
                            }
                        }
                    }
                }
            }
        }
        out
    }
}
