//! Regularized logistic regression benchmark on n-gram counts.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Corpus;
use crate::effects::dependent_treatment_columns;
use crate::stats::{mean, sigmoid};

pub const MAX_ITERATIONS: usize = 10_000;
pub const DECREASE_TOLERANCE: f64 = 1e-9;
/// Any coefficient beyond this magnitude is taken as a sign of separation.
pub const COEFFICIENT_CAP: f64 = 1e3;
pub const DEFAULT_MAX_SELECTED: usize = 16;
/// Bisection stops once the bracket is narrower than this fraction of `lambda_max`.
pub const LAMBDA_RESOLUTION: f64 = 1e-3;

static ENGLISH_STOPWORDS: &str = include_str!("../data/stopwords_en.txt");
static CHINESE_STOPWORDS: &str = include_str!("../data/stopwords_zh.txt");

#[derive(Debug, Error)]
pub enum RlrError {
    #[error("gram length must be at least 1")]
    ZeroGramLength,
    #[error("negative or non-finite penalty {0}")]
    BadLambda(f64),
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("{0} outcomes for {1} rows")]
    LengthMismatch(usize, usize),
    #[error("outcomes must be 0 or 1 and not all equal")]
    DegenerateOutcome,
    #[error("failed to read stopwords from {path}: {source}")]
    Stopwords {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub fn parse_stopwords(text: &str) -> BTreeSet<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect()
}

pub fn english_stopwords() -> BTreeSet<String> {
    parse_stopwords(ENGLISH_STOPWORDS)
}

pub fn chinese_stopwords() -> BTreeSet<String> {
    parse_stopwords(CHINESE_STOPWORDS)
}

/// One stopword per line; blank lines and `#` comments are skipped.
pub fn load_stopwords(path: impl AsRef<Path>) -> Result<BTreeSet<String>, RlrError> {
    let path = path.as_ref();
    fs::read_to_string(path)
        .map(|t| parse_stopwords(&t))
        .map_err(|source| RlrError::Stopwords {
            path: path.display().to_string(),
            source,
        })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NGramVocab {
    pub n: usize,
    pub stopwords: BTreeSet<String>,
    pub min_frequency: usize,
    /// Grams with their corpus frequency, by frequency descending then lexicographically.
    pub grams: Vec<(Vec<String>, usize)>,
}

impl NGramVocab {
    pub fn len(&self) -> usize {
        self.grams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grams.is_empty()
    }

    pub fn labels(&self) -> Vec<String> {
        self.grams.iter().map(|(g, _)| g.join(" ")).collect()
    }
}

/// Tokens left after dropping stopwords.
pub fn filtered<'a>(tokens: &'a [String], stopwords: &BTreeSet<String>) -> Vec<&'a str> {
    tokens
        .iter()
        .map(String::as_str)
        .filter(|t| !stopwords.contains(*t))
        .collect()
}

fn count_grams<'a>(tokens: &[&'a str], n: usize) -> HashMap<Vec<&'a str>, usize> {
    let mut counts = HashMap::new();
    for w in tokens.windows(n) {
        *counts.entry(w.to_vec()).or_insert(0) += 1;
    }
    counts
}

/// Contiguous `n`-grams of the stopword-filtered token sequences, counted over
/// the corpus and kept when their frequency reaches `min_frequency`.
pub fn build_vocab(
    corpus: &Corpus,
    n: usize,
    stopwords: &BTreeSet<String>,
    min_frequency: usize,
) -> Result<NGramVocab, RlrError> {
    if n == 0 {
        return Err(RlrError::ZeroGramLength);
    }
    let totals = corpus
        .samples()
        .par_iter()
        .map(|s| count_grams(&filtered(&s.tokens, stopwords), n))
        .reduce(HashMap::new, |mut a, b| {
            for (g, c) in b {
                *a.entry(g).or_insert(0) += c;
            }
            a
        });
    let mut grams: Vec<(Vec<String>, usize)> = totals
        .into_iter()
        .filter(|(_, c)| *c >= min_frequency)
        .map(|(g, c)| (g.into_iter().map(str::to_string).collect(), c))
        .collect();
    grams.sort_by(|(ga, ca), (gb, cb)| cb.cmp(ca).then_with(|| ga.cmp(gb)));
    Ok(NGramVocab {
        n,
        stopwords: stopwords.clone(),
        min_frequency,
        grams,
    })
}

/// `N x V` matrix of gram occurrence counts.
pub fn featurize(corpus: &Corpus, vocab: &NGramVocab) -> Array2<f64> {
    let index: HashMap<Vec<&str>, usize> = vocab
        .grams
        .iter()
        .enumerate()
        .map(|(i, (g, _))| (g.iter().map(String::as_str).collect(), i))
        .collect();
    let rows: Vec<Vec<f64>> = corpus
        .samples()
        .par_iter()
        .map(|s| {
            let mut row = vec![0.0; vocab.len()];
            for w in filtered(&s.tokens, &vocab.stopwords).windows(vocab.n) {
                if let Some(&j) = index.get(w) {
                    row[j] += 1.0;
                }
            }
            row
        })
        .collect();
    let mut x = Array2::zeros((rows.len(), vocab.len()));
    for (mut dst, src) in x.axis_iter_mut(Axis(0)).zip(&rows) {
        dst.assign(&Array1::from(src.clone()));
    }
    x
}

// ---------------------------------------------------------------------------
// L1 logistic regression
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RlrFit {
    pub lambda: f64,
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective decrease of the last accepted step.
    pub last_decrease: f64,
    /// Set when a coefficient exceeded the magnitude cap.
    pub separated: bool,
}

impl RlrFit {
    /// Indices of nonzero coefficients.
    pub fn selected(&self) -> Vec<usize> {
        self.coefficients
            .iter()
            .enumerate()
            .filter(|(_, b)| **b != 0.0)
            .map(|(j, _)| j)
            .collect()
    }
}

fn check_inputs(x: ArrayView2<'_, f64>, y: &[f64]) -> Result<(), RlrError> {
    if y.len() != x.nrows() {
        return Err(RlrError::LengthMismatch(y.len(), x.nrows()));
    }
    if y.len() < 2 {
        return Err(RlrError::TooFewSamples(y.len()));
    }
    if y.iter().any(|&v| v != 0.0 && v != 1.0) || y.iter().all(|&v| v == y[0]) {
        return Err(RlrError::DegenerateOutcome);
    }
    Ok(())
}

/// Mean negative log-likelihood of the logistic model.
pub fn logistic_nll(x: ArrayView2<'_, f64>, y: &[f64], beta: &[f64], intercept: f64) -> f64 {
    let eta = x.dot(&Array1::from(beta.to_vec())) + intercept;
    let total: f64 = eta
        .iter()
        .zip(y)
        .map(|(&e, &yi)| softplus(e) - yi * e)
        .sum();
    total / y.len() as f64
}

/// Penalized objective `nll + lambda * ||beta||_1`.
pub fn l1_objective(
    x: ArrayView2<'_, f64>,
    y: &[f64],
    beta: &[f64],
    intercept: f64,
    lambda: f64,
) -> f64 {
    logistic_nll(x, y, beta, intercept) + lambda * beta.iter().map(|b| b.abs()).sum::<f64>()
}

fn softplus(e: f64) -> f64 {
    if e > 0.0 {
        e + (-e).exp().ln_1p()
    } else {
        e.exp().ln_1p()
    }
}

/// Gradient of the smooth part: `(X^T (p - y) / N, mean(p - y))`.
fn nll_gradient(
    x: ArrayView2<'_, f64>,
    y: &[f64],
    beta: &Array1<f64>,
    intercept: f64,
) -> (Array1<f64>, f64) {
    let eta = x.dot(beta) + intercept;
    let resid: Array1<f64> = eta.iter().zip(y).map(|(&e, &yi)| sigmoid(e) - yi).collect();
    let n = y.len() as f64;
    (x.t().dot(&resid) / n, resid.sum() / n)
}

/// `max_j |X^T (y - ybar)|_j / N`; at or above it every coefficient is zero.
pub fn lambda_max(x: ArrayView2<'_, f64>, y: &[f64]) -> f64 {
    let ybar = mean(y);
    let centered: Array1<f64> = y.iter().map(|v| v - ybar).collect();
    let g = x.t().dot(&centered) / y.len() as f64;
    g.iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// L1-penalized logistic regression by proximal gradient with backtracking,
/// starting from `warm` when given. The intercept is not penalized.
pub fn fit_l1_logistic_from(
    x: ArrayView2<'_, f64>,
    y: &[f64],
    lambda: f64,
    warm: Option<&RlrFit>,
) -> Result<RlrFit, RlrError> {
    check_inputs(x, y)?;
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(RlrError::BadLambda(lambda));
    }
    let v = x.ncols();
    let ybar = mean(y);
    let null_intercept = (ybar / (1.0 - ybar)).ln();
    if lambda >= lambda_max(x, y) {
        // zero coefficients with intercept logit(ybar) satisfy the optimality conditions
        let zeros = vec![0.0; v];
        return Ok(RlrFit {
            lambda,
            objective: l1_objective(x, y, &zeros, null_intercept, lambda),
            coefficients: zeros,
            intercept: null_intercept,
            iterations: 0,
            converged: true,
            last_decrease: 0.0,
            separated: false,
        });
    }

    let (mut beta, mut b0) = match warm {
        Some(w) if w.coefficients.len() == v && !w.separated => {
            (Array1::from(w.coefficients.clone()), w.intercept)
        }
        _ => (Array1::zeros(v), null_intercept),
    };
    let penalty = |b: &Array1<f64>| lambda * b.iter().map(|c| c.abs()).sum::<f64>();
    let smooth = |b: &Array1<f64>, c: f64| logistic_nll(x, y, b.as_slice().expect("contiguous"), c);

    let mut f = smooth(&beta, b0);
    let mut objective = f + penalty(&beta);
    let mut step = 1.0;
    let mut iterations = 0;
    let mut converged = false;
    let mut separated = false;
    let mut last_decrease = f64::INFINITY;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let (g, g0) = nll_gradient(x, y, &beta, b0);
        step *= 2.0;
        let (next_beta, next_b0, next_f) = loop {
            let nb: Array1<f64> = beta
                .iter()
                .zip(&g)
                .map(|(b, gj)| soft_threshold(b - step * gj, step * lambda))
                .collect();
            let nb0 = b0 - step * g0;
            let nf = smooth(&nb, nb0);
            let d = &nb - &beta;
            let d0 = nb0 - b0;
            let model = f + g.dot(&d) + g0 * d0 + (d.dot(&d) + d0 * d0) / (2.0 * step);
            if nf <= model || step < 1e-300 {
                break (nb, nb0, nf);
            }
            step *= 0.5;
        };
        let next_objective = next_f + penalty(&next_beta);
        let decrease = objective - next_objective;
        if decrease < 0.0 {
            // round-off; keep the current iterate
            converged = true;
            last_decrease = 0.0;
            break;
        }
        beta = next_beta;
        b0 = next_b0;
        f = next_f;
        objective = next_objective;
        last_decrease = decrease;
        if beta.iter().any(|b| b.abs() > COEFFICIENT_CAP) || b0.abs() > COEFFICIENT_CAP {
            separated = true;
            break;
        }
        if decrease < DECREASE_TOLERANCE {
            converged = true;
            break;
        }
    }
    Ok(RlrFit {
        lambda,
        coefficients: beta.to_vec(),
        intercept: b0,
        objective,
        iterations,
        converged,
        last_decrease,
        separated,
    })
}

pub fn fit_l1_logistic(x: ArrayView2<'_, f64>, y: &[f64], lambda: f64) -> Result<RlrFit, RlrError> {
    fit_l1_logistic_from(x, y, lambda, None)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub lambda: f64,
    pub n_selected: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaSelection {
    pub lambda: f64,
    pub lambda_max: f64,
    pub fit: RlrFit,
    /// Every penalty evaluated during the search.
    pub grid: Vec<GridPoint>,
    /// Selected columns kept after dropping exact collinearity, in column order.
    pub selected: Vec<usize>,
    /// Selected columns that were exactly collinear with earlier ones.
    pub dropped_collinear: Vec<usize>,
    /// Unpenalized logistic refit on `selected`.
    pub refit: RlrFit,
}

/// Smallest penalty on the bisection grid over `[0, lambda_max]` whose fit
/// keeps at most `max_selected` nonzero coefficients.
pub fn select_lambda(
    x: ArrayView2<'_, f64>,
    y: &[f64],
    max_selected: usize,
) -> Result<LambdaSelection, RlrError> {
    check_inputs(x, y)?;
    let lmax = lambda_max(x, y);
    let mut grid = Vec::new();
    let mut record = |fit: &RlrFit| {
        grid.push(GridPoint {
            lambda: fit.lambda,
            n_selected: fit.selected().len(),
        })
    };

    let mut hi_fit = fit_l1_logistic(x, y, lmax)?;
    record(&hi_fit);
    let zero_fit = fit_l1_logistic(x, y, 0.0)?;
    record(&zero_fit);
    let chosen = if zero_fit.selected().len() <= max_selected {
        zero_fit
    } else {
        let (mut lo, mut hi) = (0.0, lmax);
        while hi - lo > LAMBDA_RESOLUTION * lmax {
            let mid = 0.5 * (lo + hi);
            let fit = fit_l1_logistic_from(x, y, mid, Some(&hi_fit))?;
            record(&fit);
            if fit.selected().len() <= max_selected {
                hi = mid;
                hi_fit = fit;
            } else {
                lo = mid;
            }
        }
        hi_fit
    };
    grid.sort_by(|a, b| a.lambda.total_cmp(&b.lambda));

    let candidates = chosen.selected();
    let sub = x.select(Axis(1), &candidates);
    let dependent = dependent_treatment_columns(sub.view());
    let dropped_collinear: Vec<usize> = dependent.iter().map(|&j| candidates[j]).collect();
    let selected: Vec<usize> = candidates
        .iter()
        .copied()
        .filter(|c| !dropped_collinear.contains(c))
        .collect();
    let refit = fit_l1_logistic(x.select(Axis(1), &selected).view(), y, 0.0)?;
    Ok(LambdaSelection {
        lambda: chosen.lambda,
        lambda_max: lmax,
        fit: chosen,
        grid,
        selected,
        dropped_collinear,
        refit,
    })
}

/// Selected grams with penalized and refit coefficients.
pub fn selection_to_tsv(sel: &LambdaSelection, labels: &[String]) -> String {
    let mut out = String::from("gram\tpenalized\trefit\n");
    for (k, &j) in sel.selected.iter().enumerate() {
        out.push_str(&format!(
            "{}\t{}\t{}\n",
            labels[j], sel.fit.coefficients[j], sel.refit.coefficients[k]
        ));
    }
    for &j in &sel.dropped_collinear {
        out.push_str(&format!(
            "{}\t{}\tdropped\n",
            labels[j], sel.fit.coefficients[j]
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Sample;
    use ndarray::array;

    fn corpus(docs: &[&str]) -> Corpus {
        let samples = docs
            .iter()
            .enumerate()
            .map(|(i, d)| {
                let tokens: Vec<String> = d.split_whitespace().map(str::to_string).collect();
                Sample {
                    id: i as u64,
                    embeddings: Array2::zeros((tokens.len(), 1)),
                    tokens,
                    outcome: (i % 2) as u8,
                    raw_text: None,
                }
            })
            .collect();
        Corpus::new(samples, 1, 64, "test").unwrap()
    }

    fn gram(s: &str) -> Vec<String> {
        s.split(' ').map(str::to_string).collect()
    }

    #[test]
    fn trigrams_of_one_sample() {
        let v = build_vocab(&corpus(&["a b c d"]), 3, &BTreeSet::new(), 1).unwrap();
        let grams: Vec<_> = v.grams.iter().map(|(g, _)| g.clone()).collect();
        assert_eq!(grams, vec![gram("a b c"), gram("b c d")]);
        let v = build_vocab(&corpus(&["a b c d"]), 3, &BTreeSet::new(), 2).unwrap();
        assert!(v.is_empty());
    }

    #[test]
    fn stopwords_are_removed_before_forming_grams() {
        let stop: BTreeSet<String> = ["the".to_string()].into();
        let v = build_vocab(&corpus(&["a the b c", "x a b c"]), 3, &stop, 1).unwrap();
        assert_eq!(v.grams[0], (gram("a b c"), 2));
        assert_eq!(v.grams[1], (gram("x a b"), 1));
        assert!(v.grams.iter().all(|(g, _)| !g.contains(&"the".to_string())));
    }

    #[test]
    fn featurize_counts_repeats() {
        let c = corpus(&["a b c", "a b c a b c", "q r s"]);
        let v = build_vocab(&c, 3, &BTreeSet::new(), 1).unwrap();
        let x = featurize(&c, &v);
        let j = v
            .grams
            .iter()
            .position(|(g, _)| *g == gram("a b c"))
            .unwrap();
        assert_eq!(x[[0, j]], 1.0);
        assert_eq!(x[[1, j]], 2.0);
        assert_eq!(x[[2, j]], 0.0);
    }

    #[test]
    fn shipped_stopword_lists_load() {
        assert!(english_stopwords().contains("the"));
        assert!(chinese_stopwords().contains("的"));
    }

    #[test]
    fn huge_penalty_gives_null_model() {
        let x = array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [0.0, 0.0], [2.0, 1.0]];
        let y = [1.0, 0.0, 1.0, 0.0, 0.0];
        let fit = fit_l1_logistic(x.view(), &y, 1e6).unwrap();
        assert!(fit.coefficients.iter().all(|&b| b == 0.0));
        assert!((fit.intercept - (0.4f64 / 0.6).ln()).abs() < 1e-12);
    }

    #[test]
    fn separable_data_is_flagged() {
        let x = array![[-2.0], [-1.0], [1.0], [2.0]];
        let fit = fit_l1_logistic(x.view(), &[0.0, 0.0, 1.0, 1.0], 0.0).unwrap();
        assert!(fit.separated || !fit.converged || fit.coefficients[0] > 10.0);
    }

    #[test]
    fn just_below_lambda_max_selects_something() {
        let x = array![
            [1.0, 0.0],
            [0.0, 1.0],
            [1.0, 1.0],
            [0.0, 0.0],
            [2.0, 1.0],
            [3.0, 0.0]
        ];
        let y = [1.0, 0.0, 1.0, 0.0, 0.0, 1.0];
        let lmax = lambda_max(x.view(), &y);
        assert!(fit_l1_logistic(x.view(), &y, lmax)
            .unwrap()
            .selected()
            .is_empty());
        assert!(!fit_l1_logistic(x.view(), &y, 0.9 * lmax)
            .unwrap()
            .selected()
            .is_empty());
    }

    #[test]
    fn determining_gram_is_selected() {
        let x = array![
            [1.0, 0.0, 1.0],
            [0.0, 1.0, 1.0],
            [1.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [1.0, 1.0, 1.0],
            [0.0, 0.0, 0.0]
        ];
        let y: Vec<f64> = x.column(0).to_vec();
        let sel = select_lambda(x.view(), &y, 1).unwrap();
        assert_eq!(sel.selected, vec![0]);
        let counts: Vec<usize> = sel.grid.iter().map(|p| p.n_selected).collect();
        assert!(counts.windows(2).all(|w| w[0] >= w[1]), "{counts:?}");
    }

    #[test]
    fn generous_cap_returns_zero_penalty() {
        let x = array![
            [1.0, 0.5],
            [0.0, 1.0],
            [1.0, 1.0],
            [0.0, 0.0],
            [2.0, 1.0],
            [1.0, 3.0]
        ];
        let y = [1.0, 0.0, 0.0, 1.0, 0.0, 1.0];
        let sel = select_lambda(x.view(), &y, 2).unwrap();
        assert_eq!(sel.lambda, 0.0);
    }

    #[test]
    fn collinear_selected_columns_are_dropped() {
        let x = array![
            [1.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
            [1.0, 1.0, 1.0],
            [0.0, 0.0, 0.0],
            [1.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
            [1.0, 1.0, 1.0],
            [0.0, 0.0, 1.0]
        ];
        let y = [1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0];
        let sel = select_lambda(x.view(), &y, 16).unwrap();
        for &d in &sel.dropped_collinear {
            assert!(!sel.selected.contains(&d));
        }
        let both = sel.fit.selected();
        if both.contains(&0) && both.contains(&1) {
            assert_eq!(sel.dropped_collinear, vec![1]);
        }
    }
}
