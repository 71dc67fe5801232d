//! End-to-end acceptance checks.
//!
//! Each test prints one `PASS`/`FAIL` line straight to stderr so the verdicts
//! show up in `cargo test` output without `--nocapture`. The tests hold a
//! shared lock so the timed criteria never compete with each other for a core.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Mutex, MutexGuard};
use std::time::{Duration, Instant};

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use textcnn::cli::{gradcheck_instance, GradcheckConfig};
use textcnn::corpus::{
    generate_synthetic, read_corpus, split, write_corpus, PlantedPattern, SplitSpec, SyntheticSpec,
};
use textcnn::effects::{
    bootstrap_fixed, bootstrap_treatments, model_treatments, ols_fit, ols_fit_matrix, Resampling,
    TreatmentSpec,
};
use textcnn::interpret::{
    corpus_activity, filter_reports, max_filter_correlation, TreatmentMatrix, TreatmentMode,
};
use textcnn::loss::fd_check;
use textcnn::model::forward;
use textcnn::rlr::{
    build_vocab, featurize, fit_l1_logistic, l1_objective, lambda_max, select_lambda,
};
use textcnn::stats::sigmoid;
use textcnn::train::{accuracy, cross_validate, train, GridSpec};
use textcnn::{Corpus, LossWeights, ModelParams, Sample, TrainConfig};

fn verdict(name: &str, pass: bool, detail: impl AsRef<str>) {
    let tag = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(
        std::io::stderr(),
        "[acceptance] {tag} {name}: {}",
        detail.as_ref()
    );
}

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn single_threaded<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap()
        .install(f)
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn planted_spec() -> SyntheticSpec {
    let text = std::fs::read_to_string(repo_root().join("configs/planted.toml")).unwrap();
    toml::from_str(&text).unwrap()
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn pattern_recovered(p: &PlantedPattern, phrase: &[String]) -> bool {
    let k = p.tokens.len();
    phrase.len() >= k && phrase.windows(k).any(|w| p.matches_at(w))
}

fn recovery_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 60,
        patience: 5,
        batch_size: 32,
        learning_rate: 0.01,
        loss_weights: LossWeights {
            lambda_ker_conv: 1e-3,
            lambda_act_conv: 0.0,
            lambda_ker_out: 1e-4,
            class_weights: (1.0, 1.0),
        },
        kernel_sizes: vec![3],
        n_filters: 16,
        seed,
        ..TrainConfig::censorship_profile()
    }
}

// ---------------------------------------------------------------------------
// Gradients and forward pass
// ---------------------------------------------------------------------------

#[test]
fn gradient_oracle() {
    let _guard = serial();
    let cfg = GradcheckConfig::default();
    let w = &cfg.loss_weights;
    assert!(w.lambda_ker_conv > 0.0 && w.lambda_act_conv > 0.0 && w.lambda_ker_out > 0.0);
    let start = Instant::now();
    let (worst, flagged) = single_threaded(|| {
        let mut worst = 0.0f64;
        let mut flagged = 0;
        for seed in 0..50 {
            let (params, batch) = gradcheck_instance(&cfg, seed);
            let report = fd_check(&params, &batch, w, cfg.h, cfg.tie_tolerance).unwrap();
            worst = worst.max(report.max_rel_error());
            flagged += report.n_flagged();
        }
        (worst, flagged)
    });
    let elapsed = start.elapsed();
    let pass = worst <= 1e-4 && elapsed < Duration::from_secs(120);
    verdict(
        "gradient oracle",
        pass,
        format!(
            "50 instances, max rel error {worst:.2e} (<= 1e-4), {flagged} tie coordinates flagged, {:.1}s (< 120s)",
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

/// Direct sums over phrases, kernel rows, embedding dimensions and filters.
fn naive_forward(p: &ModelParams, s: &Sample) -> (Vec<f64>, f64) {
    let u = s.embeddings.nrows();
    let d = p.embedding_dim;
    let mut pooled = Vec::new();
    for layer in &p.conv_layers {
        let k = layer.kernel_size;
        let n_phrases = u.max(k) - k + 1;
        for f in 0..layer.n_filters {
            let mut best = f64::NEG_INFINITY;
            for t in 0..n_phrases {
                let mut z = layer.biases[f];
                for r in 0..k {
                    if t + r >= u {
                        continue;
                    }
                    for j in 0..d {
                        z += f64::from(s.embeddings[[t + r, j]]) * layer.kernels[[r, j, f]];
                    }
                }
                best = best.max(1.0 / (1.0 + (-z).exp()));
            }
            pooled.push(best);
        }
    }
    let mut logit = p.output.bias;
    for (w, a) in p.output.weights.iter().zip(&pooled) {
        logit += w * a;
    }
    (pooled, 1.0 / (1.0 + (-logit).exp()))
}

fn random_instance(seed: u64) -> (ModelParams, Sample) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rng.random_range(1..=8);
    let n_layers = rng.random_range(1..=3);
    let ks: Vec<usize> = (0..n_layers).map(|_| rng.random_range(1..=7)).collect();
    let f = rng.random_range(1..=6);
    let mut p = ModelParams::zeros(d, &ks, f);
    for layer in &mut p.conv_layers {
        layer.kernels.mapv_inplace(|_| 0.7 * normal(&mut rng));
        layer.biases.mapv_inplace(|_| normal(&mut rng));
    }
    p.output.weights.mapv_inplace(|_| normal(&mut rng));
    p.output.bias = normal(&mut rng);
    let u = rng.random_range(1..=20);
    let embeddings = Array2::from_shape_fn((u, d), |_| normal(&mut rng) as f32);
    let sample = Sample {
        id: seed,
        tokens: (0..u).map(|i| format!("t{i}")).collect(),
        embeddings,
        outcome: 0,
        raw_text: None,
    };
    (p, sample)
}

#[test]
fn forward_oracle() {
    let _guard = serial();
    let mut worst = 0.0f64;
    for seed in 0..100 {
        let (p, s) = random_instance(seed);
        let tr = forward(&p, &s).unwrap();
        let (pooled, pred) = naive_forward(&p, &s);
        assert_eq!(tr.pooled.len(), pooled.len());
        for (a, b) in tr.pooled.iter().zip(&pooled) {
            worst = worst.max((a - b).abs());
        }
        worst = worst.max((tr.prediction - pred).abs());
    }
    let pass = worst <= 1e-12;
    verdict(
        "forward oracle",
        pass,
        format!("100 instances, max abs difference {worst:.2e} (<= 1e-12)"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// Planted treatments
// ---------------------------------------------------------------------------

#[test]
fn planted_treatment_recovery() {
    let _guard = serial();
    let start = Instant::now();
    let spec = planted_spec();
    assert_eq!(spec.n_samples, 2000);
    assert_eq!(spec.embedding_dim, 16);
    assert_eq!(spec.planted_patterns.len(), 3);
    assert!(spec
        .planted_patterns
        .iter()
        .any(|p| p.alternatives().iter().any(|a| a.len() == 4)));

    let seed = 7;
    let (acc, found, chosen) = single_threaded(|| {
        let corpus = generate_synthetic(&spec).unwrap();
        let (train_set, test_set) = split(
            &corpus,
            &SplitSpec {
                train_fraction: 0.8,
                seed,
            },
        )
        .unwrap();
        let grid = GridSpec {
            n_filters: vec![16],
            kernel_sizes: vec![vec![3]],
            lambda_ker_conv: vec![1e-3],
            lambda_act_conv: vec![0.0],
            lambda_ker_out: vec![1e-4, 1e-3],
            learning_rate: vec![0.01, 0.03],
        }
        .expand(&recovery_config(seed));
        assert_eq!(grid.len(), 4);
        let results = cross_validate(&train_set, &grid, 5, seed).unwrap();
        let best = results[0].config.clone();
        let (model, _) = train(&train_set, &best).unwrap();
        let acc = accuracy(&model, &test_set).unwrap();
        let reports = filter_reports(&model, &test_set, 0.05, 5).unwrap();
        let found: Vec<bool> = spec
            .planted_patterns
            .iter()
            .map(|p| {
                reports
                    .iter()
                    .filter(|r| r.useful && r.output_weight > 0.0)
                    .any(|r| {
                        r.top_phrases
                            .iter()
                            .any(|ph| pattern_recovered(p, &ph.tokens))
                    })
            })
            .collect();
        (acc, found, best)
    });
    let elapsed = start.elapsed();
    let n_found = found.iter().filter(|&&f| f).count();
    let pass = acc >= 0.95 && n_found >= 2 && elapsed < Duration::from_secs(900);
    verdict(
        "planted-treatment recovery",
        pass,
        format!(
            "test accuracy {acc:.4} (>= 0.95), recovered {n_found}/3 {found:?} (>= 2), chosen lr {} lambda_out {}, {:.1}s (< 900s)",
            chosen.learning_rate,
            chosen.loss_weights.lambda_ker_out,
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn redundancy_penalty_effect() {
    let _guard = serial();
    let mut spec = planted_spec();
    let duplicate = spec.planted_patterns[0].clone();
    spec.planted_patterns.push(duplicate);
    let seed = 7;
    let (r0, r3) = single_threaded(|| {
        let corpus = generate_synthetic(&spec).unwrap();
        let (train_set, _) = split(
            &corpus,
            &SplitSpec {
                train_fraction: 0.8,
                seed,
            },
        )
        .unwrap();
        let run = |lambda_act: f64| {
            let mut cfg = recovery_config(seed);
            cfg.n_filters = 8;
            cfg.epochs = 50;
            cfg.loss_weights.lambda_act_conv = lambda_act;
            let (model, _) = train(&train_set, &cfg).unwrap();
            max_filter_correlation(&corpus_activity(&model, &corpus).unwrap())
        };
        (run(0.0), run(3.0))
    });
    let pass = r0 - r3 >= 0.05;
    verdict(
        "redundancy penalty",
        pass,
        format!(
            "full-corpus max filter correlation {r0:.4} at lambda_act=0 vs {r3:.4} at lambda_act=3 (drop {:.4} >= 0.05)",
            r0 - r3
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// Effects
// ---------------------------------------------------------------------------

/// Solves `A x = b` by Gaussian elimination with partial pivoting.
fn gauss_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let factor = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= factor * a[col][k];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x
}

fn normal_equations(z: &Array2<f64>, y: &[f64]) -> Vec<f64> {
    let (n, m) = z.dim();
    let row = |i: usize| -> Vec<f64> {
        std::iter::once(1.0)
            .chain(z.row(i).iter().copied())
            .collect()
    };
    let mut xtx = vec![vec![0.0; m + 1]; m + 1];
    let mut xty = vec![0.0; m + 1];
    for i in 0..n {
        let r = row(i);
        for a in 0..=m {
            xty[a] += r[a] * y[i];
            for b in 0..=m {
                xtx[a][b] += r[a] * r[b];
            }
        }
    }
    gauss_solve(xtx, xty)
}

#[test]
fn effects_machinery() {
    let _guard = serial();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(500);
    let (n, m) = (200, 8);
    let z = Array2::from_shape_fn((n, m), |_| normal(&mut rng));
    let y: Vec<f64> = (0..n)
        .map(|i| 0.3 - 0.7 * z[[i, 0]] + 0.2 * z[[i, 5]] + normal(&mut rng))
        .collect();
    let labels: Vec<String> = (0..m).map(|j| format!("z{j}")).collect();
    let fit = ols_fit_matrix(z.view(), &y, &labels).unwrap();
    let oracle = normal_equations(&z, &y);
    let mut ols_err = (fit.intercept - oracle[0]).abs();
    for (b, o) in fit.coefficients.iter().zip(&oracle[1..]) {
        ols_err = ols_err.max((b - o).abs());
    }
    let identity = fit.adjusted_r2 == 1.0 - (1.0 - fit.r2) * (n as f64 - 1.0) / (n - m - 1) as f64;

    let beta = 0.5;
    let reps = 100;
    let covered = single_threaded(|| {
        (0..reps)
            .filter(|&rep| {
                let mut rng = ChaCha8Rng::seed_from_u64(10_000 + rep as u64);
                let n = 500;
                let zc = Array2::from_shape_fn((n, 1), |_| normal(&mut rng));
                let y: Vec<f64> = (0..n)
                    .map(|i| beta * zc[[i, 0]] + normal(&mut rng))
                    .collect();
                let tm = TreatmentMatrix::from_features(zc, vec!["z".into()]);
                let boot = bootstrap_treatments(
                    &tm,
                    &y,
                    None,
                    1000,
                    rep as u64,
                    Resampling::WithReplacement,
                )
                .unwrap();
                boot.coefficients[0].contains(beta)
            })
            .count()
    });
    let elapsed = start.elapsed();
    let pass = ols_err <= 1e-8 && identity && covered >= 90 && elapsed < Duration::from_secs(600);
    verdict(
        "effects machinery",
        pass,
        format!(
            "OLS vs normal equations {ols_err:.2e} (<= 1e-8), adjusted R2 identity exact: {identity}, 95% CI coverage {covered}/{reps} (>= 90), {:.1}s (< 600s)",
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn useful_filter_rule() {
    let _guard = serial();
    // Filter 0 reads the first embedding coordinate; filter 1 is constant.
    let mut model = ModelParams::zeros(2, &[1], 2);
    model.conv_layers[0].kernels[[0, 0, 0]] = 3.0;
    model.conv_layers[0].biases[1] = 0.3;
    model.output.weights = Array1::from(vec![4.0, 1.0]);
    model.output.bias = -3.0;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let samples: Vec<Sample> = (0..120)
        .map(|i| {
            let u = rng.random_range(2..6);
            let embeddings = Array2::from_shape_fn((u, 2), |_| normal(&mut rng) as f32);
            let outcome = u8::from(embeddings.column(0).iter().any(|&v| v > 1.0));
            Sample {
                id: i,
                tokens: (0..u).map(|t| format!("w{t}")).collect(),
                embeddings,
                outcome,
                raw_text: None,
            }
        })
        .collect();
    let corpus = Corpus::new(samples, 2, 16, "useful-filter check").unwrap();
    let reports = filter_reports(&model, &corpus, 0.05, 5).unwrap();
    let constant = reports.iter().find(|r| r.filter == 1).unwrap();
    let varying = reports.iter().find(|r| r.filter == 0).unwrap();
    let spec = TreatmentSpec {
        useful_threshold: 0.05,
        mode: TreatmentMode::Continuous,
    };
    let (_, z) = model_treatments(&model, None, &corpus, &spec).unwrap();
    let fit = ols_fit(&z, &corpus.outcomes()).unwrap();
    let boot = bootstrap_fixed(&model, &corpus, None, &spec, 50, 1).unwrap();
    let excluded = !constant.useful
        && constant.activation_range == 0.0
        && varying.useful
        && z.source_columns == vec![0]
        && fit.labels == vec!["L0F0".to_string()]
        && boot.labels == vec!["L0F0".to_string()];
    verdict(
        "useful-filter rule",
        excluded,
        format!(
            "constant filter range {:.1e} excluded at t=0.05, regression columns {:?}",
            constant.activation_range, fit.labels
        ),
    );
    assert!(excluded);
}

// ---------------------------------------------------------------------------
// n-gram benchmark
// ---------------------------------------------------------------------------

/// Cyclic coordinate descent with exact one-dimensional minimization.
fn coordinate_descent_objective(x: &Array2<f64>, y: &[f64], lambda: f64) -> f64 {
    let (n, v) = x.dim();
    let mut beta = vec![0.0; v];
    let mut b0 = 0.0;
    let eta = |beta: &[f64], b0: f64, i: usize| -> f64 {
        b0 + (0..v).map(|j| x[[i, j]] * beta[j]).sum::<f64>()
    };
    // Derivative of the mean log-loss along coordinate j (None = intercept) at value t.
    let deriv = |beta: &[f64], b0: f64, j: Option<usize>, t: f64| -> f64 {
        let mut b = beta.to_vec();
        let mut c = b0;
        match j {
            Some(j) => b[j] = t,
            None => c = t,
        }
        (0..n)
            .map(|i| {
                let xi = j.map_or(1.0, |j| x[[i, j]]);
                xi * (sigmoid(eta(&b, c, i)) - y[i])
            })
            .sum::<f64>()
            / n as f64
    };
    // Root of an increasing function on the half-line starting at 0 in direction `dir`.
    let root = |g: &dyn Fn(f64) -> f64, dir: f64| -> f64 {
        let mut lo = 0.0;
        let mut hi = dir;
        while g(hi) * dir < 0.0 {
            lo = hi;
            hi *= 2.0;
        }
        let (mut a, mut b) = if dir > 0.0 { (lo, hi) } else { (hi, lo) };
        for _ in 0..200 {
            let mid = 0.5 * (a + b);
            if g(mid) < 0.0 {
                a = mid;
            } else {
                b = mid;
            }
        }
        0.5 * (a + b)
    };
    for _ in 0..5000 {
        let mut change = 0.0f64;
        let g = |t: f64| deriv(&beta, b0, None, t);
        let dir = if g(b0) < 0.0 { 1.0 } else { -1.0 };
        let new_b0 = root(&|t| g(t), dir * (1.0 + b0.abs()));
        change = change.max((new_b0 - b0).abs());
        b0 = new_b0;
        for j in 0..v {
            let d0 = deriv(&beta, b0, Some(j), 0.0);
            let new = if d0.abs() <= lambda {
                0.0
            } else if d0 < -lambda {
                root(&|t| deriv(&beta, b0, Some(j), t) + lambda, 1.0)
            } else {
                root(&|t| deriv(&beta, b0, Some(j), t) - lambda, -1.0)
            };
            change = change.max((new - beta[j]).abs());
            beta[j] = new;
        }
        if change < 1e-13 {
            break;
        }
    }
    l1_objective(x.view(), y, &beta, b0, lambda)
}

fn literal_trigram_spec() -> SyntheticSpec {
    let mut spec = planted_spec();
    for p in &mut spec.planted_patterns {
        p.clusters.clear();
        p.cluster_spread = 0.0;
    }
    spec
}

#[test]
fn rlr_benchmark() {
    let _guard = serial();
    let spec = literal_trigram_spec();
    let corpus = generate_synthetic(&spec).unwrap();
    let no_stopwords = Default::default();
    let vocab = build_vocab(&corpus, 3, &no_stopwords, 20).unwrap();
    let x = featurize(&corpus, &vocab);
    let y = corpus.outcomes();
    let labels = vocab.labels();
    let sel = select_lambda(x.view(), &y, 16).unwrap();
    let chosen: Vec<&str> = sel.selected.iter().map(|&j| labels[j].as_str()).collect();
    let planted: Vec<String> = spec
        .planted_patterns
        .iter()
        .map(|p| p.tokens.join(" "))
        .collect();
    let includes =
        sel.fit.selected().len() <= 16 && planted.iter().all(|p| chosen.contains(&p.as_str()));

    let lmax = lambda_max(x.view(), &y);
    let null = fit_l1_logistic(x.view(), &y, lmax).unwrap();
    let ybar = y.iter().sum::<f64>() / y.len() as f64;
    let resid: Vec<f64> = y.iter().map(|v| v - sigmoid(null.intercept)).collect();
    let kkt = (0..x.ncols())
        .map(|j| {
            (0..x.nrows())
                .map(|i| x[[i, j]] * resid[i])
                .sum::<f64>()
                .abs()
                / y.len() as f64
        })
        .fold(0.0, f64::max);
    let just_below = fit_l1_logistic(x.view(), &y, lmax * (1.0 - 1e-3)).unwrap();
    let zeroing = null.coefficients.iter().all(|&b| b == 0.0)
        && (null.intercept - (ybar / (1.0 - ybar)).ln()).abs() <= 1e-12
        && kkt <= lmax * (1.0 + 1e-12)
        && !just_below.selected().is_empty();

    let mut worst_gap = 0.0f64;
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, v) = (40, 5);
        let xs = Array2::from_shape_fn((n, v), |_| normal(&mut rng));
        let ys: Vec<f64> = (0..n)
            .map(|i| {
                let p = sigmoid(1.5 * xs[[i, 0]] - xs[[i, 2]] + 0.3 * normal(&mut rng));
                f64::from(u8::from(rng.random::<f64>() < p))
            })
            .collect();
        let fit = fit_l1_logistic(xs.view(), &ys, 0.1).unwrap();
        let oracle = coordinate_descent_objective(&xs, &ys, 0.1);
        worst_gap = worst_gap.max((fit.objective - oracle).abs());
    }
    let pass = includes && zeroing && worst_gap <= 1e-6;
    verdict(
        "RLR benchmark",
        pass,
        format!(
            "selected {} grams incl. all planted trigrams: {includes}; lambda_max zeroing exact with KKT sup {kkt:.3e} <= {lmax:.3e}: {zeroing}; objective gap vs coordinate descent {worst_gap:.2e} (<= 1e-6)",
            chosen.len()
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// Reproducibility
// ---------------------------------------------------------------------------

fn run_cli(dir: &Path, args: &[&str]) {
    let status = Command::new(env!("CARGO_BIN_EXE_textcnn"))
        .current_dir(dir)
        .args(args)
        .args(["--config", "run.toml", "--threads", "1"])
        .output()
        .unwrap();
    assert!(
        status.status.success(),
        "textcnn {args:?} failed: {}",
        String::from_utf8_lossy(&status.stderr)
    );
}

fn collect_files(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            collect_files(root, &path, out);
        } else {
            let rel = path.strip_prefix(root).unwrap().to_path_buf();
            out.insert(rel, std::fs::read(&path).unwrap());
        }
    }
}

const PIPELINE_CONFIG: &str = r#"profile = "censorship-like"
seed = 21

[paths]
spec = "spec.toml"
corpus = "out/synth/corpus.embt"
train = "out/split/train.embt"
test = "out/split/test.embt"
model = "out/train/model.json"

[train]
epochs = 8
patience = 3
learning_rate = 0.01
kernel_sizes = [3]
n_filters = 4

[effects]
b_fixed = 100
b_retrain = 2
"#;

fn run_pipeline(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut spec = planted_spec();
    spec.n_samples = 300;
    std::fs::write(dir.join("spec.toml"), toml::to_string(&spec).unwrap()).unwrap();
    let mut cfg = PIPELINE_CONFIG.to_string();
    cfg.push_str("\n[train.loss_weights]\nlambda_act_conv = 1.0\n");
    std::fs::write(dir.join("run.toml"), cfg).unwrap();
    for cmd in ["synth", "split", "train", "interpret", "effects"] {
        run_cli(dir, &[cmd]);
    }
    let mut files = BTreeMap::new();
    collect_files(&dir.join("out"), &dir.join("out"), &mut files);
    files
}

#[test]
fn pipeline_determinism() {
    let _guard = serial();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let fa = run_pipeline(a.path());
    let fb = run_pipeline(b.path());
    let differing: Vec<_> = fa
        .iter()
        .filter(|(k, v)| fb.get(*k) != Some(*v))
        .map(|(k, _)| k.display().to_string())
        .collect();
    let pass = !fa.is_empty() && fa.len() == fb.len() && differing.is_empty();
    verdict(
        "determinism",
        pass,
        format!(
            "synth, split, train, interpret, effects twice at --threads 1: {} files, {} differ {differing:?}",
            fa.len(),
            differing.len()
        ),
    );
    assert!(pass);
}

fn random_corpus(seed: u64, n: usize) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rng.random_range(1..=12);
    let samples = (0..n)
        .map(|i| {
            let u = rng.random_range(1..=40);
            let tokens: Vec<String> = (0..u)
                .map(|_| match rng.random_range(0..4) {
                    0 => "é".repeat(rng.random_range(1..4)),
                    1 => String::from("审查"),
                    _ => format!("w{}", rng.random_range(0..500)),
                })
                .collect();
            Sample {
                id: rng.random(),
                tokens,
                embeddings: Array2::from_shape_fn((u, d), |_| {
                    f32::from_bits(rng.random::<u32>() & 0xBF7F_FFFF)
                }),
                outcome: rng.random_range(0..2),
                raw_text: if rng.random::<bool>() {
                    Some(format!("raw text {i}\twith\nbreaks"))
                } else {
                    None
                },
            }
        })
        .collect();
    Corpus::new(samples, d, 40, "round-trip check").unwrap()
}

#[test]
fn embt_round_trip() {
    let _guard = serial();
    let mut all_identical = true;
    for seed in 0..3 {
        let corpus = random_corpus(seed, 1000);
        let mut first = Vec::new();
        write_corpus(&corpus, &mut first).unwrap();
        let back = read_corpus(first.as_slice()).unwrap();
        let mut second = Vec::new();
        write_corpus(&back, &mut second).unwrap();
        all_identical &= first == second && back.len() == 1000;
    }
    verdict(
        "EMBT round trip",
        all_identical,
        "write/read/re-write of three 1000-sample random corpora is byte-identical",
    );
    assert!(all_identical);
}
