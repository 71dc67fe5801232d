//! Treatment-effect estimation: OLS with intercept, fit metrics, collinearity
//! diagnostics, and percentile bootstraps over fixed or retrained models.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Corpus;
use crate::interpret::{
    pooled_matrix, treatments, useful_filters, FilterReport, TreatmentMatrix, TreatmentMode,
};
use crate::model::{ModelError, ModelParams};
use crate::stats::{mean, pearson, percentile};
use crate::train::{accuracy, train, TrainConfig, TrainError};

/// Column pairs with `|corr|` above this are flagged as near duplicates.
pub const DUPLICATE_CORRELATION: f64 = 0.999;
/// Interval bounds as quantiles (the 2.5th and 97.5th percentiles).
pub const LOWER_QUANTILE: f64 = 0.025;
pub const UPPER_QUANTILE: f64 = 0.975;

#[derive(Debug, Error)]
pub enum EffectsError {
    #[error("need more than {needed} rows for {m} treatments, got {n}")]
    TooFewRows { n: usize, m: usize, needed: usize },
    #[error("{0} outcomes for {1} treatment rows")]
    LengthMismatch(usize, usize),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("design is rank deficient; dependent columns: {}", .columns.join(", "))]
    RankDeficient { columns: Vec<String> },
    #[error("expected {expected} treatment columns, got {found}")]
    ColumnMismatch { expected: usize, found: usize },
    #[error("outcomes are constant; intervals are not reported")]
    ConstantOutcome,
    #[error("bootstrap needs at least one resample")]
    NoResamples,
    #[error("every resample failed ({0} failures)")]
    AllResamplesFailed(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OlsFit {
    pub labels: Vec<String>,
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    pub fitted: Vec<f64>,
    pub residuals: Vec<f64>,
    pub r2: f64,
    pub adjusted_r2: f64,
    pub n: usize,
    pub m: usize,
}

impl OlsFit {
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        self.intercept
            + self
                .coefficients
                .iter()
                .zip(row)
                .map(|(b, x)| b * x)
                .sum::<f64>()
    }
}

/// `[1 | Z]` as an nalgebra matrix.
fn design(z: ArrayView2<'_, f64>) -> DMatrix<f64> {
    let (n, m) = z.dim();
    DMatrix::from_fn(n, m + 1, |i, j| if j == 0 { 1.0 } else { z[[i, j - 1]] })
}

fn rank_tolerance(rows: usize, cols: usize, sigma_max: f64) -> f64 {
    rows.max(cols) as f64 * f64::EPSILON * sigma_max
}

/// Columns of `x` (0 = intercept) that lie in the span of earlier columns.
fn dependent_columns(x: &DMatrix<f64>) -> Vec<usize> {
    let sigma_max = x.clone().svd(false, false).singular_values.max();
    let tol = rank_tolerance(x.nrows(), x.ncols(), sigma_max).max(f64::MIN_POSITIVE);
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut dependent = Vec::new();
    for j in 0..x.ncols() {
        let mut v = x.column(j).into_owned();
        // two passes of modified Gram-Schmidt
        for _ in 0..2 {
            for q in &basis {
                let c = q.dot(&v);
                v.axpy(-c, q, 1.0);
            }
        }
        let norm = v.norm();
        if norm <= tol {
            dependent.push(j);
        } else {
            basis.push(v / norm);
        }
    }
    dependent
}

/// Treatment columns that are exactly collinear with the intercept and the
/// columns before them.
pub fn dependent_treatment_columns(z: ArrayView2<'_, f64>) -> Vec<usize> {
    dependent_columns(&design(z))
        .into_iter()
        .filter(|&j| j > 0)
        .map(|j| j - 1)
        .collect()
}

/// Least squares of `outcomes` on `[1 | treatments]` through a QR factorization.
///
/// `r2 = 1 - SSR/SST`, defined as 0 when `SST = 0`, and
/// `adjusted_r2 = 1 - (1 - r2)(N - 1)/(N - m - 1)`.
pub fn ols_fit(treatments: &TreatmentMatrix, outcomes: &[f64]) -> Result<OlsFit, EffectsError> {
    ols_fit_matrix(treatments.values.view(), outcomes, &treatments.labels)
}

pub fn ols_fit_matrix(
    z: ArrayView2<'_, f64>,
    outcomes: &[f64],
    labels: &[String],
) -> Result<OlsFit, EffectsError> {
    let (n, m) = z.dim();
    if outcomes.len() != n {
        return Err(EffectsError::LengthMismatch(outcomes.len(), n));
    }
    if n <= m + 1 {
        return Err(EffectsError::TooFewRows {
            n,
            m,
            needed: m + 1,
        });
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(EffectsError::NonFinite("treatments"));
    }
    if outcomes.iter().any(|v| !v.is_finite()) {
        return Err(EffectsError::NonFinite("outcomes"));
    }
    let x = design(z);
    let dependent = dependent_columns(&x);
    if !dependent.is_empty() {
        let columns = dependent
            .into_iter()
            .map(|j| match j {
                0 => "intercept".to_string(),
                j => labels
                    .get(j - 1)
                    .cloned()
                    .unwrap_or_else(|| format!("column {}", j - 1)),
            })
            .collect();
        return Err(EffectsError::RankDeficient { columns });
    }

    let y = DVector::from_column_slice(outcomes);
    let (q, r) = x.clone().qr().unpack();
    let qty = q.transpose() * &y;
    let beta = r
        .solve_upper_triangular(&qty)
        .ok_or(EffectsError::RankDeficient {
            columns: vec!["intercept".into()],
        })?;
    let fitted_v = &x * &beta;
    let fitted: Vec<f64> = fitted_v.iter().copied().collect();
    let residuals: Vec<f64> = outcomes.iter().zip(&fitted).map(|(y, f)| y - f).collect();

    let ybar = mean(outcomes);
    let sst: f64 = outcomes.iter().map(|y| (y - ybar).powi(2)).sum();
    let ssr: f64 = residuals.iter().map(|e| e * e).sum();
    let r2 = if sst == 0.0 { 0.0 } else { 1.0 - ssr / sst };
    let adjusted_r2 = adjusted_r2(r2, n, m);

    Ok(OlsFit {
        labels: labels.to_vec(),
        coefficients: beta.iter().skip(1).copied().collect(),
        intercept: beta[0],
        fitted,
        residuals,
        r2,
        adjusted_r2,
        n,
        m,
    })
}

pub fn adjusted_r2(r2: f64, n: usize, m: usize) -> f64 {
    1.0 - (1.0 - r2) * (n as f64 - 1.0) / (n as f64 - m as f64 - 1.0)
}

/// Mean squared error of `fit` on held-out rows.
pub fn oos_mse(
    fit: &OlsFit,
    test: ArrayView2<'_, f64>,
    outcomes: &[f64],
) -> Result<f64, EffectsError> {
    if test.ncols() != fit.m {
        return Err(EffectsError::ColumnMismatch {
            expected: fit.m,
            found: test.ncols(),
        });
    }
    if test.nrows() != outcomes.len() {
        return Err(EffectsError::LengthMismatch(outcomes.len(), test.nrows()));
    }
    if outcomes.is_empty() {
        return Ok(f64::NAN);
    }
    let sse: f64 = test
        .rows()
        .into_iter()
        .zip(outcomes)
        .map(|(row, y)| (y - fit.predict_row(&row.to_vec())).powi(2))
        .sum();
    Ok(sse / outcomes.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollinearityReport {
    /// Numerical rank of the treatment matrix alone.
    pub rank: usize,
    /// Numerical rank of `[1 | Z]`.
    pub design_rank: usize,
    pub n_columns: usize,
    pub singular_values: Vec<f64>,
    pub smallest_singular_value: f64,
    pub tolerance: f64,
    /// `(i, j, corr)` with `i < j` and `|corr| > 0.999`.
    pub flagged_pairs: Vec<(usize, usize, f64)>,
}

impl CollinearityReport {
    pub fn is_full_rank(&self) -> bool {
        self.design_rank == self.n_columns + 1
    }
}

fn numerical_rank(x: &DMatrix<f64>) -> (usize, Vec<f64>, f64) {
    if x.ncols() == 0 || x.nrows() == 0 {
        return (0, Vec::new(), 0.0);
    }
    let sv: Vec<f64> = x
        .clone()
        .svd(false, false)
        .singular_values
        .iter()
        .copied()
        .collect();
    let sigma_max = sv.iter().copied().fold(0.0, f64::max);
    let tol = rank_tolerance(x.nrows(), x.ncols(), sigma_max);
    let rank = sv.iter().filter(|&&s| s > tol).count();
    (rank, sv, tol)
}

/// Singular-value rank with tolerance `max(N, m) * eps * sigma_max`, plus
/// near-duplicate column pairs.
pub fn collinearity_check(z: ArrayView2<'_, f64>) -> CollinearityReport {
    let (n, m) = z.dim();
    let zm = DMatrix::from_fn(n, m, |i, j| z[[i, j]]);
    let (rank, mut singular_values, tolerance) = numerical_rank(&zm);
    let (design_rank, _, _) = numerical_rank(&design(z));
    singular_values.sort_by(|a, b| b.total_cmp(a));
    let smallest_singular_value = singular_values.last().copied().unwrap_or(0.0);

    let cols: Vec<Vec<f64>> = z.columns().into_iter().map(|c| c.to_vec()).collect();
    let mut flagged_pairs = Vec::new();
    for i in 0..m {
        for j in i + 1..m {
            let r = if cols[i] == cols[j] {
                1.0
            } else {
                pearson(&cols[i], &cols[j])
            };
            if r.abs() > DUPLICATE_CORRELATION {
                flagged_pairs.push((i, j, r));
            }
        }
    }
    CollinearityReport {
        rank,
        design_rank,
        n_columns: m,
        singular_values,
        smallest_singular_value,
        tolerance,
        flagged_pairs,
    }
}

// ---------------------------------------------------------------------------
// Bootstrap
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BootstrapMode {
    FixedModel,
    Retrain,
}

/// How the rows of each resample are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resampling {
    #[default]
    WithReplacement,
    /// Every resample is the original rows in order and retraining reuses the
    /// configured seed. Only useful for checking the machinery.
    Identity,
}

/// Mean and percentile band of one bootstrap statistic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
}

impl Interval {
    pub fn from_draws(xs: &[f64]) -> Self {
        Interval {
            mean: mean(xs),
            lower: percentile(xs, LOWER_QUANTILE),
            upper: percentile(xs, UPPER_QUANTILE),
        }
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lower <= x && x <= self.upper
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResampleRecord {
    pub index: usize,
    pub failure: Option<String>,
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    pub adjusted_r2: f64,
    pub oos_mse: Option<f64>,
    pub accuracy: Option<f64>,
}

impl ResampleRecord {
    fn failed(index: usize, reason: String) -> Self {
        ResampleRecord {
            index,
            failure: Some(reason),
            coefficients: Vec::new(),
            intercept: f64::NAN,
            adjusted_r2: f64::NAN,
            oos_mse: None,
            accuracy: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub mode: BootstrapMode,
    pub seed: u64,
    pub resamples_requested: usize,
    pub n_failed: usize,
    /// Coefficient labels; empty for retrain runs, whose features change per resample.
    pub labels: Vec<String>,
    pub coefficients: Vec<Interval>,
    pub intercept: Option<Interval>,
    pub adjusted_r2: Interval,
    pub oos_mse: Option<Interval>,
    pub accuracy: Option<Interval>,
    pub resamples: Vec<ResampleRecord>,
}

impl BootstrapResult {
    fn aggregate(
        mode: BootstrapMode,
        seed: u64,
        labels: Vec<String>,
        resamples: Vec<ResampleRecord>,
    ) -> Result<Self, EffectsError> {
        let ok: Vec<&ResampleRecord> = resamples.iter().filter(|r| r.failure.is_none()).collect();
        let n_failed = resamples.len() - ok.len();
        if ok.is_empty() {
            return Err(EffectsError::AllResamplesFailed(n_failed));
        }
        let column = |f: &dyn Fn(&ResampleRecord) -> Option<f64>| -> Option<Interval> {
            let xs: Option<Vec<f64>> = ok.iter().map(|r| f(r)).collect();
            xs.map(|xs| Interval::from_draws(&xs))
        };
        let coefficients = if mode == BootstrapMode::FixedModel {
            (0..labels.len())
                .map(|j| column(&|r| Some(r.coefficients[j])).expect("present"))
                .collect()
        } else {
            Vec::new()
        };
        let intercept = if mode == BootstrapMode::FixedModel {
            column(&|r| Some(r.intercept))
        } else {
            None
        };
        Ok(BootstrapResult {
            mode,
            seed,
            resamples_requested: resamples.len(),
            n_failed,
            labels,
            coefficients,
            intercept,
            adjusted_r2: column(&|r| Some(r.adjusted_r2)).expect("present"),
            oos_mse: column(&|r| r.oos_mse),
            accuracy: column(&|r| r.accuracy),
            resamples,
        })
    }

    /// One row per resample, in resample order.
    pub fn resamples_to_tsv(&self) -> String {
        let mut out = String::from("resample\tstatus\tadjusted_r2\toos_mse\taccuracy\tintercept");
        for l in &self.labels {
            out.push_str(&format!("\tbeta_{l}"));
        }
        out.push('\n');
        let opt = |x: Option<f64>| x.map(|v| format!("{v}")).unwrap_or_else(|| "NA".into());
        for r in &self.resamples {
            let status = r
                .failure
                .as_deref()
                .unwrap_or("ok")
                .replace(['\t', '\n'], " ");
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}",
                r.index,
                status,
                r.adjusted_r2,
                opt(r.oos_mse),
                opt(r.accuracy),
                r.intercept
            ));
            for j in 0..self.labels.len() {
                out.push_str(&format!("\t{}", opt(r.coefficients.get(j).copied())));
            }
            out.push('\n');
        }
        out
    }
}

/// Row indices and a derived seed for resample `b`.
///
/// Resample `b` draws from ChaCha8 stream `b` keyed by `seed`, so it does not
/// depend on how resamples are scheduled.
pub fn resample_indices(
    n: usize,
    seed: u64,
    b: usize,
    resampling: Resampling,
) -> (Vec<usize>, u64) {
    match resampling {
        Resampling::Identity => ((0..n).collect(), seed),
        Resampling::WithReplacement => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(b as u64);
            let idx = (0..n).map(|_| rng.random_range(0..n)).collect();
            (idx, rng.random())
        }
    }
}

fn is_constant(xs: &[f64]) -> bool {
    xs.windows(2).all(|w| w[0] == w[1])
}

/// Percentile bootstrap over the rows of a fixed treatment matrix.
///
/// Each resample refits OLS on the drawn rows and records its coefficients and
/// adjusted R². When `reference` is given (an OLS fit on training treatments)
/// the resample also records that fit's MSE on the drawn rows.
pub fn bootstrap_treatments(
    z: &TreatmentMatrix,
    outcomes: &[f64],
    reference: Option<&OlsFit>,
    resamples: usize,
    seed: u64,
    resampling: Resampling,
) -> Result<BootstrapResult, EffectsError> {
    if resamples == 0 {
        return Err(EffectsError::NoResamples);
    }
    if outcomes.len() != z.n_rows() {
        return Err(EffectsError::LengthMismatch(outcomes.len(), z.n_rows()));
    }
    if is_constant(outcomes) {
        return Err(EffectsError::ConstantOutcome);
    }
    if let Some(fit) = reference {
        if fit.m != z.n_cols() {
            return Err(EffectsError::ColumnMismatch {
                expected: fit.m,
                found: z.n_cols(),
            });
        }
    }
    let n = z.n_rows();
    let records: Vec<ResampleRecord> = (0..resamples)
        .into_par_iter()
        .map(|b| {
            let (idx, _) = resample_indices(n, seed, b, resampling);
            let zb = z.values.select(ndarray::Axis(0), &idx);
            let yb: Vec<f64> = idx.iter().map(|&i| outcomes[i]).collect();
            match ols_fit_matrix(zb.view(), &yb, &z.labels) {
                Err(e) => ResampleRecord::failed(b, e.to_string()),
                Ok(fit) => ResampleRecord {
                    index: b,
                    failure: None,
                    oos_mse: reference.map(|r| oos_mse(r, zb.view(), &yb).expect("shapes checked")),
                    coefficients: fit.coefficients,
                    intercept: fit.intercept,
                    adjusted_r2: fit.adjusted_r2,
                    accuracy: None,
                },
            }
        })
        .collect();
    BootstrapResult::aggregate(BootstrapMode::FixedModel, seed, z.labels.clone(), records)
}

/// Which filters become treatments and how they are coded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreatmentSpec {
    pub useful_threshold: f64,
    pub mode: TreatmentMode,
}

impl Default for TreatmentSpec {
    fn default() -> Self {
        TreatmentSpec {
            useful_threshold: crate::interpret::USEFUL_THRESHOLD,
            mode: TreatmentMode::Binary,
        }
    }
}

/// Treatment matrices for a trained model on a training and a test corpus.
///
/// Useful filters are chosen on the test corpus, and the same columns are
/// used for the training corpus.
pub fn model_treatments(
    model: &ModelParams,
    train: Option<&Corpus>,
    test: &Corpus,
    spec: &TreatmentSpec,
) -> Result<(Option<TreatmentMatrix>, TreatmentMatrix), EffectsError> {
    let test_pooled = pooled_matrix(model, test)?.values;
    let train_pooled = match train {
        Some(c) => Some(pooled_matrix(model, c)?.values),
        None => None,
    };
    let useful = useful_filters(&test_pooled, spec.useful_threshold);
    let z_test = treatments(model, &test_pooled, &useful, spec.mode);
    let z_train = train_pooled.map(|p| treatments(model, &p, &useful, spec.mode));
    Ok((z_train, z_test))
}

/// Fixed-model bootstrap: the network is frozen and test rows are resampled.
///
/// Each sample's treatments do not depend on other rows, so a resample is a
/// row selection of the full test treatment matrix. With a training corpus the
/// out-of-sample MSE of the training-set OLS fit is recorded per resample.
pub fn bootstrap_fixed(
    model: &ModelParams,
    test: &Corpus,
    train: Option<&Corpus>,
    spec: &TreatmentSpec,
    resamples: usize,
    seed: u64,
) -> Result<BootstrapResult, EffectsError> {
    if resamples == 0 {
        return Err(EffectsError::NoResamples);
    }
    let (z_train, z_test) = model_treatments(model, train, test, spec)?;
    let reference = match (&z_train, train) {
        (Some(z), Some(c)) => Some(ols_fit(z, &c.outcomes())?),
        _ => None,
    };
    let mut result = bootstrap_treatments(
        &z_test,
        &test.outcomes(),
        reference.as_ref(),
        resamples,
        seed,
        Resampling::WithReplacement,
    )?;
    let acc = accuracy(model, test)?;
    for r in result.resamples.iter_mut() {
        if r.failure.is_none() {
            r.accuracy = Some(acc);
        }
    }
    result.accuracy = Some(Interval {
        mean: acc,
        lower: acc,
        upper: acc,
    });
    Ok(result)
}

/// Metrics of one retrained model: OLS on training treatments, its MSE on the
/// test set, and classifier accuracy on the test set.
fn retrain_metrics(
    train_set: &Corpus,
    test: &Corpus,
    config: &TrainConfig,
    spec: &TreatmentSpec,
) -> Result<(OlsFit, f64, f64), EffectsError> {
    let (model, _) = train(train_set, config)?;
    let (z_train, z_test) = model_treatments(&model, Some(train_set), test, spec)?;
    let fit = ols_fit(&z_train.expect("train corpus given"), &train_set.outcomes())?;
    let mse = oos_mse(&fit, z_test.values.view(), &test.outcomes())?;
    Ok((fit, mse, accuracy(&model, test)?))
}

/// Retrain bootstrap: training rows are resampled and a fresh model is
/// trained per resample under `config`, with a seed derived from `(seed, b)`.
/// Records adjusted R², out-of-sample MSE and test accuracy. Coefficients are
/// not aggregated because each retrain learns different features.
pub fn bootstrap_retrain(
    train_set: &Corpus,
    test: &Corpus,
    config: &TrainConfig,
    spec: &TreatmentSpec,
    resamples: usize,
    seed: u64,
    resampling: Resampling,
) -> Result<BootstrapResult, EffectsError> {
    if resamples == 0 {
        return Err(EffectsError::NoResamples);
    }
    config.validate()?;
    let records: Vec<ResampleRecord> = (0..resamples)
        .into_par_iter()
        .map(|b| {
            let (idx, derived) = resample_indices(train_set.len(), seed, b, resampling);
            let mut cfg = config.clone();
            if resampling == Resampling::WithReplacement {
                cfg.seed = derived;
            }
            let boot = train_set.resample(&idx);
            match retrain_metrics(&boot, test, &cfg, spec) {
                Err(e) => ResampleRecord::failed(b, e.to_string()),
                Ok((fit, mse, acc)) => ResampleRecord {
                    index: b,
                    failure: None,
                    coefficients: fit.coefficients,
                    intercept: fit.intercept,
                    adjusted_r2: fit.adjusted_r2,
                    oos_mse: Some(mse),
                    accuracy: Some(acc),
                },
            }
        })
        .collect();
    BootstrapResult::aggregate(BootstrapMode::Retrain, seed, Vec::new(), records)
}

/// Effect table: one row per useful filter in the order of `reports`
/// (output weight descending) with the OLS estimate and bootstrap interval.
pub fn effect_table_tsv(
    reports: &[FilterReport],
    z: &TreatmentMatrix,
    fit: &OlsFit,
    boot: Option<&BootstrapResult>,
) -> String {
    let mut out = String::from("filter\tlabel\tw_out\tbeta\tci_lower\tci_upper\tphrases\n");
    for rep in reports {
        let Some(j) = z.source_columns.iter().position(|&c| c == rep.column) else {
            continue;
        };
        let (lo, hi) = match boot.and_then(|b| b.coefficients.get(j)) {
            Some(iv) => (format!("{}", iv.lower), format!("{}", iv.upper)),
            None => ("NA".into(), "NA".into()),
        };
        let phrases: Vec<String> = rep.top_phrases.iter().map(|p| p.text()).collect();
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            rep.column,
            z.labels[j],
            rep.output_weight,
            fit.coefficients[j],
            lo,
            hi,
            phrases.join(" | ").replace(['\t', '\n'], " ")
        ));
    }
    out
}

/// Treatment columns as an owned `N x m` matrix plus intercept.
pub fn design_matrix(z: &Array2<f64>) -> Array2<f64> {
    let (n, m) = z.dim();
    Array2::from_shape_fn(
        (n, m + 1),
        |(i, j)| if j == 0 { 1.0 } else { z[[i, j - 1]] },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand_distr::{Distribution, StandardNormal};

    fn labels(m: usize) -> Vec<String> {
        (0..m).map(|j| format!("z{j}")).collect()
    }

    #[test]
    fn exact_line_is_recovered() {
        let z = array![[0.0], [1.0], [2.0], [5.0]];
        let y = [0.0, 1.0, 2.0, 5.0];
        let fit = ols_fit_matrix(z.view(), &y, &labels(1)).unwrap();
        assert_abs_diff_eq!(fit.coefficients[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.intercept, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.r2, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.adjusted_r2, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn constant_outcome_has_zero_r2() {
        let z = array![[0.0], [1.0], [2.0], [5.0]];
        let fit = ols_fit_matrix(z.view(), &[1.0; 4], &labels(1)).unwrap();
        assert_abs_diff_eq!(fit.coefficients[0], 0.0, epsilon = 1e-12);
        assert_eq!(fit.r2, 0.0);
        assert_eq!(fit.adjusted_r2, adjusted_r2(0.0, 4, 1));
    }

    #[test]
    fn rank_deficiency_names_columns() {
        let z = array![[1.0, 2.0], [2.0, 4.0], [3.0, 6.0], [0.0, 0.0]];
        match ols_fit_matrix(z.view(), &[0.0, 1.0, 0.0, 1.0], &labels(2)) {
            Err(EffectsError::RankDeficient { columns }) => {
                assert_eq!(columns, vec!["z1".to_string()])
            }
            other => panic!("{other:?}"),
        }
        let z = array![[3.0], [3.0], [3.0], [3.0]];
        assert!(matches!(
            ols_fit_matrix(z.view(), &[0.0, 1.0, 0.0, 1.0], &labels(1)),
            Err(EffectsError::RankDeficient { .. })
        ));
    }

    #[test]
    fn too_few_rows_rejected() {
        let z = array![[0.0], [1.0]];
        assert!(matches!(
            ols_fit_matrix(z.view(), &[0.0, 1.0], &labels(1)),
            Err(EffectsError::TooFewRows { .. })
        ));
    }

    #[test]
    fn residuals_are_orthogonal_to_design() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = Array2::from_shape_fn((60, 4), |_| StandardNormal.sample(&mut rng));
        let y: Vec<f64> = (0..60).map(|_| StandardNormal.sample(&mut rng)).collect();
        let fit = ols_fit_matrix(z.view(), &y, &labels(4)).unwrap();
        let x = design_matrix(&z);
        for col in x.columns() {
            let dot: f64 = col.iter().zip(&fit.residuals).map(|(a, b)| a * b).sum();
            assert!(dot.abs() < 1e-8, "{dot}");
        }
        for i in 0..60 {
            assert_abs_diff_eq!(fit.fitted[i] + fit.residuals[i], y[i], epsilon = 1e-10);
        }
        assert!(fit.adjusted_r2 <= fit.r2);
    }

    #[test]
    fn oos_mse_of_intercept_only_fit() {
        let z = Array2::<f64>::zeros((4, 0));
        let fit = ols_fit_matrix(z.view(), &[0.0, 1.0, 1.0, 0.0], &[]).unwrap();
        assert_abs_diff_eq!(fit.intercept, 0.5, epsilon = 1e-12);
        let test = Array2::<f64>::zeros((6, 0));
        let mse = oos_mse(&fit, test.view(), &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        assert_abs_diff_eq!(mse, 0.25, epsilon = 1e-12);
        let bad = Array2::<f64>::zeros((6, 1));
        assert!(oos_mse(&fit, bad.view(), &[0.0; 6]).is_err());
    }

    #[test]
    fn collinearity_flags_duplicates() {
        let z = array![
            [1.0, 1.0, 0.0],
            [2.0, 2.0, 1.0],
            [3.0, 3.0, 0.0],
            [4.0, 4.0, 1.0]
        ];
        let rep = collinearity_check(z.view());
        assert_eq!(rep.rank, 2);
        assert_eq!(rep.flagged_pairs.len(), 1);
        assert_eq!((rep.flagged_pairs[0].0, rep.flagged_pairs[0].1), (0, 1));
        let eye = Array2::<f64>::eye(4);
        let rep = collinearity_check(eye.view());
        assert_eq!(rep.rank, 4);
        assert!(rep.flagged_pairs.is_empty());
    }

    #[test]
    fn bootstrap_of_exact_relation_is_degenerate() {
        let z = TreatmentMatrix::from_features(
            array![[0.0], [1.0], [1.0], [0.0], [1.0], [0.0], [1.0], [0.0]],
            labels(1),
        );
        let y: Vec<f64> = z.values.column(0).to_vec();
        let res = bootstrap_treatments(&z, &y, None, 200, 5, Resampling::WithReplacement).unwrap();
        // some draws are all one class and cannot be fit
        assert_eq!(
            res.n_failed + res.resamples.iter().filter(|r| r.failure.is_none()).count(),
            200
        );
        assert_abs_diff_eq!(res.coefficients[0].lower, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(res.coefficients[0].upper, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn interval_uses_interpolated_percentiles() {
        let draws: Vec<f64> = (1..=101).rev().map(f64::from).collect();
        let iv = Interval::from_draws(&draws);
        assert_abs_diff_eq!(iv.lower, 3.5, epsilon = 1e-12);
        assert_abs_diff_eq!(iv.upper, 98.5, epsilon = 1e-12);
        assert_abs_diff_eq!(iv.mean, 51.0, epsilon = 1e-12);
    }

    #[test]
    fn single_resample_collapses_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z = Array2::from_shape_fn((30, 2), |_| StandardNormal.sample(&mut rng));
        let y: Vec<f64> = (0..30).map(|_| StandardNormal.sample(&mut rng)).collect();
        let tm = TreatmentMatrix::from_features(z, labels(2));
        let res = bootstrap_treatments(&tm, &y, None, 1, 1, Resampling::WithReplacement).unwrap();
        for iv in &res.coefficients {
            assert_eq!(iv.lower, iv.upper);
            assert_eq!(iv.mean, iv.lower);
        }
        let again = bootstrap_treatments(&tm, &y, None, 1, 1, Resampling::WithReplacement).unwrap();
        assert_eq!(res, again);
    }

    #[test]
    fn bootstrap_rejects_bad_inputs() {
        let tm = TreatmentMatrix::from_features(array![[0.0], [1.0], [2.0]], labels(1));
        assert!(matches!(
            bootstrap_treatments(&tm, &[1.0, 0.0, 1.0], None, 0, 1, Resampling::Identity),
            Err(EffectsError::NoResamples)
        ));
        assert!(matches!(
            bootstrap_treatments(&tm, &[1.0, 1.0, 1.0], None, 5, 1, Resampling::Identity),
            Err(EffectsError::ConstantOutcome)
        ));
    }

    #[test]
    fn resample_streams_are_independent_of_order() {
        let a = resample_indices(50, 7, 3, Resampling::WithReplacement);
        let _ = resample_indices(50, 7, 2, Resampling::WithReplacement);
        let b = resample_indices(50, 7, 3, Resampling::WithReplacement);
        assert_eq!(a, b);
        assert_ne!(
            a.0,
            resample_indices(50, 7, 4, Resampling::WithReplacement).0
        );
        assert_eq!(
            resample_indices(4, 7, 0, Resampling::Identity),
            (vec![0, 1, 2, 3], 7)
        );
    }
}
