//! Corpora of tokenized texts with per-token embeddings and binary outcomes.
//!
//! Covers the EMBT container format, seeded train/test splitting and a
//! synthetic generator that plants known phrase treatments into filler text.
//!
//! EMBT layout (little-endian throughout):
//!
//! ```text
//! "EMBT" | version u32 = 1 | D u32 | N u64 | max_tokens u32 | provenance (u32 len + UTF-8)
//! N x { id u64 | outcome u8 | U u32 | U x (u32 len + UTF-8) | U*D f32 row-major | raw_text (u32 len + UTF-8) }
//! ```

use std::collections::HashSet;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stats::sigmoid;

pub const MAGIC: &[u8; 4] = b"EMBT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic bytes {0:?}, expected \"EMBT\"")]
    BadMagic([u8; 4]),
    #[error("unsupported EMBT version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("truncated payload while reading {field} (sample index {index:?}, id {sample_id:?})")]
    Truncated {
        field: &'static str,
        index: Option<u64>,
        sample_id: Option<u64>,
    },
    #[error("non-finite embedding entry in sample {sample_id} at row {row}, column {col}")]
    NonFinite {
        sample_id: u64,
        row: usize,
        col: usize,
    },
    #[error("invalid UTF-8 in {field} (sample id {sample_id:?})")]
    Utf8 {
        field: &'static str,
        sample_id: Option<u64>,
    },
    #[error("sample {sample_id}: outcome must be 0 or 1, found {value}")]
    BadOutcome { sample_id: u64, value: u8 },
    #[error("sample {sample_id}: {tokens} tokens but {rows} embedding rows")]
    TokenRowMismatch {
        sample_id: u64,
        tokens: usize,
        rows: usize,
    },
    #[error("sample {sample_id} has no tokens")]
    EmptySample { sample_id: u64 },
    #[error("sample {sample_id}: embedding dimension {found}, corpus dimension {expected}")]
    DimensionMismatch {
        sample_id: u64,
        expected: usize,
        found: usize,
    },
    #[error("sample {sample_id}: {len} tokens exceeds max_tokens {max}")]
    TooLong {
        sample_id: u64,
        len: usize,
        max: usize,
    },
    #[error("duplicate sample id {0}")]
    DuplicateId(u64),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("split fraction {fraction} on {n} samples leaves one side empty")]
    DegenerateSplit { fraction: f64, n: usize },
    #[error("infeasible synthetic spec: {0}")]
    InfeasibleSynthetic(String),
    #[error("value too large for the EMBT field {0}")]
    Overflow(&'static str),
}

/// One tokenized text with its embeddings and binary outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub tokens: Vec<String>,
    /// `U x D`, one row per token.
    pub embeddings: Array2<f32>,
    pub outcome: u8,
    pub raw_text: Option<String>,
}

impl Sample {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn y(&self) -> f64 {
        f64::from(self.outcome)
    }

    fn validate(&self, dim: usize, max_tokens: usize) -> Result<(), CorpusError> {
        let id = self.id;
        if self.tokens.is_empty() {
            return Err(CorpusError::EmptySample { sample_id: id });
        }
        if self.outcome > 1 {
            return Err(CorpusError::BadOutcome {
                sample_id: id,
                value: self.outcome,
            });
        }
        let (rows, cols) = self.embeddings.dim();
        if rows != self.tokens.len() {
            return Err(CorpusError::TokenRowMismatch {
                sample_id: id,
                tokens: self.tokens.len(),
                rows,
            });
        }
        if cols != dim {
            return Err(CorpusError::DimensionMismatch {
                sample_id: id,
                expected: dim,
                found: cols,
            });
        }
        if rows > max_tokens {
            return Err(CorpusError::TooLong {
                sample_id: id,
                len: rows,
                max: max_tokens,
            });
        }
        if let Some(((row, col), _)) = self.embeddings.indexed_iter().find(|(_, v)| !v.is_finite())
        {
            return Err(CorpusError::NonFinite {
                sample_id: id,
                row,
                col,
            });
        }
        Ok(())
    }
}

/// An immutable, validated collection of samples sharing one embedding dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    samples: Vec<Sample>,
    embedding_dim: usize,
    max_tokens: usize,
    provenance: String,
}

impl Corpus {
    pub fn new(
        samples: Vec<Sample>,
        embedding_dim: usize,
        max_tokens: usize,
        provenance: impl Into<String>,
    ) -> Result<Self, CorpusError> {
        let mut seen = HashSet::with_capacity(samples.len());
        for s in &samples {
            s.validate(embedding_dim, max_tokens)?;
            if !seen.insert(s.id) {
                return Err(CorpusError::DuplicateId(s.id));
            }
        }
        Ok(Corpus {
            samples,
            embedding_dim,
            max_tokens,
            provenance: provenance.into(),
        })
    }

    /// Builds a corpus, keeping only the first `max_tokens` tokens of each sample.
    pub fn truncated(
        mut samples: Vec<Sample>,
        embedding_dim: usize,
        max_tokens: usize,
        provenance: impl Into<String>,
    ) -> Result<Self, CorpusError> {
        for s in &mut samples {
            if s.tokens.len() > max_tokens {
                s.tokens.truncate(max_tokens);
                s.embeddings = s.embeddings.slice(ndarray::s![..max_tokens, ..]).to_owned();
            }
        }
        Self::new(samples, embedding_dim, max_tokens, provenance)
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedding_dim
    }

    pub fn max_tokens(&self) -> usize {
        self.max_tokens
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn outcomes(&self) -> Vec<f64> {
        self.samples.iter().map(Sample::y).collect()
    }

    /// Sub-corpus made of the samples at `indices` (in that order). Indices must be distinct.
    pub fn subset(&self, indices: &[usize]) -> Corpus {
        Corpus {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            embedding_dim: self.embedding_dim,
            max_tokens: self.max_tokens,
            provenance: self.provenance.clone(),
        }
    }

    /// Sub-corpus drawn with possible repeats; ids are reassigned `0..n` in draw order.
    pub fn resample(&self, indices: &[usize]) -> Corpus {
        let samples = indices
            .iter()
            .enumerate()
            .map(|(new_id, &i)| Sample {
                id: new_id as u64,
                ..self.samples[i].clone()
            })
            .collect();
        Corpus {
            samples,
            embedding_dim: self.embedding_dim,
            max_tokens: self.max_tokens,
            provenance: self.provenance.clone(),
        }
    }

    pub fn into_samples(self) -> Vec<Sample> {
        self.samples
    }
}

// ---------------------------------------------------------------------------
// EMBT serialization
// ---------------------------------------------------------------------------

struct CountingWriter<W> {
    inner: W,
    count: u64,
}

impl<W: Write> Write for CountingWriter<W> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.count += n as u64;
        Ok(n)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}

fn len_u32(len: usize, field: &'static str) -> Result<u32, CorpusError> {
    u32::try_from(len).map_err(|_| CorpusError::Overflow(field))
}

fn write_str<W: Write>(w: &mut W, s: &str, field: &'static str) -> Result<(), CorpusError> {
    w.write_all(&len_u32(s.len(), field)?.to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

/// Serializes `corpus` in EMBT format and returns the number of bytes written.
pub fn write_corpus<W: Write>(corpus: &Corpus, sink: W) -> Result<u64, CorpusError> {
    // Corpus values are validated on construction; re-check in case samples were
    // assembled through `subset`/`resample` from a hand-built corpus.
    let mut seen = HashSet::with_capacity(corpus.len());
    for s in corpus.samples() {
        s.validate(corpus.embedding_dim, corpus.max_tokens)?;
        if !seen.insert(s.id) {
            return Err(CorpusError::DuplicateId(s.id));
        }
    }

    let mut w = CountingWriter {
        inner: sink,
        count: 0,
    };
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&len_u32(corpus.embedding_dim, "D")?.to_le_bytes())?;
    w.write_all(&(corpus.len() as u64).to_le_bytes())?;
    w.write_all(&len_u32(corpus.max_tokens, "max_tokens")?.to_le_bytes())?;
    write_str(&mut w, &corpus.provenance, "provenance")?;

    for s in corpus.samples() {
        w.write_all(&s.id.to_le_bytes())?;
        w.write_all(&[s.outcome])?;
        w.write_all(&len_u32(s.tokens.len(), "U")?.to_le_bytes())?;
        for t in &s.tokens {
            write_str(&mut w, t, "token")?;
        }
        let mut block = Vec::with_capacity(s.embeddings.len() * 4);
        for row in s.embeddings.rows() {
            for v in row {
                block.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(&block)?;
        write_str(&mut w, s.raw_text.as_deref().unwrap_or(""), "raw_text")?;
    }
    w.flush()?;
    Ok(w.count)
}

pub fn write_corpus_file(corpus: &Corpus, path: impl AsRef<Path>) -> Result<u64, CorpusError> {
    let file = File::create(path)?;
    write_corpus(corpus, BufWriter::new(file))
}

struct EmbtReader<R> {
    inner: R,
    index: Option<u64>,
    sample_id: Option<u64>,
}

impl<R: Read> EmbtReader<R> {
    fn bytes(&mut self, buf: &mut [u8], field: &'static str) -> Result<(), CorpusError> {
        self.inner.read_exact(buf).map_err(|e| {
            if e.kind() == io::ErrorKind::UnexpectedEof {
                CorpusError::Truncated {
                    field,
                    index: self.index,
                    sample_id: self.sample_id,
                }
            } else {
                CorpusError::Io(e)
            }
        })
    }

    fn u8(&mut self, field: &'static str) -> Result<u8, CorpusError> {
        let mut b = [0u8; 1];
        self.bytes(&mut b, field)?;
        Ok(b[0])
    }

    fn u32(&mut self, field: &'static str) -> Result<u32, CorpusError> {
        let mut b = [0u8; 4];
        self.bytes(&mut b, field)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self, field: &'static str) -> Result<u64, CorpusError> {
        let mut b = [0u8; 8];
        self.bytes(&mut b, field)?;
        Ok(u64::from_le_bytes(b))
    }

    fn string(&mut self, field: &'static str) -> Result<String, CorpusError> {
        let len = self.u32(field)? as usize;
        let mut buf = Vec::new();
        // Read through `take` so a corrupt length cannot force a huge allocation.
        let got = (&mut self.inner).take(len as u64).read_to_end(&mut buf)?;
        if got < len {
            return Err(CorpusError::Truncated {
                field,
                index: self.index,
                sample_id: self.sample_id,
            });
        }
        String::from_utf8(buf).map_err(|_| CorpusError::Utf8 {
            field,
            sample_id: self.sample_id,
        })
    }
}

/// Parses an EMBT stream.
pub fn read_corpus<R: Read>(source: R) -> Result<Corpus, CorpusError> {
    let mut r = EmbtReader {
        inner: source,
        index: None,
        sample_id: None,
    };
    let mut magic = [0u8; 4];
    r.bytes(&mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(CorpusError::BadMagic(magic));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(CorpusError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let dim = r.u32("D")? as usize;
    let n = r.u64("N")?;
    let max_tokens = r.u32("max_tokens")? as usize;
    let provenance = r.string("provenance")?;

    let mut samples = Vec::new();
    for index in 0..n {
        r.index = Some(index);
        r.sample_id = None;
        let id = r.u64("sample id")?;
        r.sample_id = Some(id);
        let outcome = r.u8("outcome")?;
        let u = r.u32("token count")? as usize;
        let mut tokens = Vec::new();
        for _ in 0..u {
            tokens.push(r.string("token")?);
        }
        let mut data = Vec::new();
        let mut b = [0u8; 4];
        for row in 0..u {
            for col in 0..dim {
                r.bytes(&mut b, "embedding block")?;
                let v = f32::from_le_bytes(b);
                if !v.is_finite() {
                    return Err(CorpusError::NonFinite {
                        sample_id: id,
                        row,
                        col,
                    });
                }
                data.push(v);
            }
        }
        let embeddings = Array2::from_shape_vec((u, dim), data).expect("shape matches data length");
        let raw = r.string("raw_text")?;
        samples.push(Sample {
            id,
            tokens,
            embeddings,
            outcome,
            raw_text: if raw.is_empty() { None } else { Some(raw) },
        });
    }
    Corpus::new(samples, dim, max_tokens, provenance)
}

pub fn read_corpus_file(path: impl AsRef<Path>) -> Result<Corpus, CorpusError> {
    let file = File::open(path)?;
    read_corpus(BufReader::new(file))
}

// ---------------------------------------------------------------------------
// Splitting
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

/// Seeded permutation of `0..n`: each index draws a `u64` key from
/// `ChaCha8Rng(seed)` in index order, then indices are sorted by `(key, index)`.
pub fn seeded_permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keyed: Vec<(u64, usize)> = (0..n).map(|i| (rng.random::<u64>(), i)).collect();
    keyed.sort_unstable();
    keyed.into_iter().map(|(_, i)| i).collect()
}

/// Number of training samples: `round(fraction * n)`, halves rounded away from zero.
pub fn train_count(n: usize, fraction: f64) -> usize {
    (fraction * n as f64).round() as usize
}

/// Seeded train/test partition. Both sides keep the original sample order.
pub fn split(corpus: &Corpus, spec: &SplitSpec) -> Result<(Corpus, Corpus), CorpusError> {
    if corpus.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    let n = corpus.len();
    let f = spec.train_fraction;
    let n_train = train_count(n, f);
    if !(f > 0.0 && f < 1.0) || n_train == 0 || n_train >= n {
        return Err(CorpusError::DegenerateSplit { fraction: f, n });
    }
    let perm = seeded_permutation(n, spec.seed);
    let mut train_idx = perm[..n_train].to_vec();
    let mut test_idx = perm[n_train..].to_vec();
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    Ok((corpus.subset(&train_idx), corpus.subset(&test_idx)))
}

// ---------------------------------------------------------------------------
// Synthetic corpora
// ---------------------------------------------------------------------------

/// A set of interchangeable tokens at one position of a planted pattern.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynonymCluster {
    pub position: usize,
    /// Alternatives for `tokens[position]`; the canonical token is always a member.
    pub members: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedPattern {
    pub tokens: Vec<String>,
    #[serde(default)]
    pub clusters: Vec<SynonymCluster>,
    #[serde(default)]
    pub cluster_spread: f64,
    pub base_rate: f64,
}

impl PlantedPattern {
    /// Tokens allowed at each position of the pattern.
    pub fn alternatives(&self) -> Vec<Vec<String>> {
        self.tokens
            .iter()
            .enumerate()
            .map(|(pos, canonical)| {
                let mut alts = vec![canonical.clone()];
                for c in self.clusters.iter().filter(|c| c.position == pos) {
                    for m in &c.members {
                        if !alts.contains(m) {
                            alts.push(m.clone());
                        }
                    }
                }
                alts
            })
            .collect()
    }

    /// True if `window` starts with an instance of this pattern (any cluster member accepted).
    pub fn matches_at(&self, window: &[String]) -> bool {
        if window.len() < self.tokens.len() {
            return false;
        }
        self.alternatives()
            .iter()
            .zip(window)
            .all(|(alts, tok)| alts.contains(tok))
    }

    /// True if the pattern occurs anywhere in `tokens`.
    pub fn occurs_in(&self, tokens: &[String]) -> bool {
        let k = self.tokens.len();
        tokens.len() >= k && (0..=tokens.len() - k).any(|t| self.matches_at(&tokens[t..]))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OutcomeRule {
    /// Outcome is 1 iff at least one planted pattern is present.
    AnyPresent,
    /// `P(Y = 1) = sigmoid(intercept + sum_k coefficients[k] * present_k)`.
    Logistic {
        coefficients: Vec<f64>,
        intercept: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_samples: usize,
    pub vocab_size: usize,
    pub embedding_dim: usize,
    pub doc_length_range: [usize; 2],
    pub planted_patterns: Vec<PlantedPattern>,
    pub outcome_rule: OutcomeRule,
    #[serde(default)]
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |m: String| Err(CorpusError::InfeasibleSynthetic(m));
        let [lo, hi] = self.doc_length_range;
        if self.n_samples == 0 {
            return bad("n_samples must be positive".into());
        }
        if self.vocab_size == 0 || self.embedding_dim == 0 {
            return bad("vocab_size and embedding_dim must be positive".into());
        }
        if lo == 0 || lo > hi {
            return bad(format!("doc_length_range [{lo}, {hi}] is empty"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be finite and >= 0".into());
        }
        for (k, p) in self.planted_patterns.iter().enumerate() {
            if p.tokens.is_empty() || p.tokens.len() > 7 {
                return bad(format!("pattern {k} must have 1..=7 tokens"));
            }
            if p.tokens.len() > lo {
                return bad(format!(
                    "pattern {k} has {} tokens, longer than the shortest document ({lo})",
                    p.tokens.len()
                ));
            }
            if !(p.base_rate > 0.0 && p.base_rate < 1.0) {
                return bad(format!("pattern {k} base_rate must lie in (0, 1)"));
            }
            if !(p.cluster_spread >= 0.0 && p.cluster_spread.is_finite()) {
                return bad(format!("pattern {k} cluster_spread must be >= 0"));
            }
            if p.clusters.iter().any(|c| c.position >= p.tokens.len()) {
                return bad(format!("pattern {k} has a cluster past its last token"));
            }
            if p.alternatives().iter().flatten().any(|t| is_filler(t)) {
                return bad(format!(
                    "pattern {k} uses a reserved filler token name (w<digits>)"
                ));
            }
        }
        if let OutcomeRule::Logistic {
            coefficients,
            intercept,
        } = &self.outcome_rule
        {
            if coefficients.len() != self.planted_patterns.len() {
                return bad("logistic rule needs one coefficient per planted pattern".into());
            }
            if !intercept.is_finite() || coefficients.iter().any(|c| !c.is_finite()) {
                return bad("logistic rule coefficients must be finite".into());
            }
        }
        Ok(())
    }

    /// Expected fraction of positive outcomes, by enumerating which patterns are planted.
    pub fn analytic_positive_rate(&self) -> f64 {
        let k = self.planted_patterns.len();
        let mut total = 0.0;
        for mask in 0u64..(1u64 << k) {
            let on = |j: usize| mask >> j & 1 == 1;
            let prob: f64 = self
                .planted_patterns
                .iter()
                .enumerate()
                .map(|(j, p)| {
                    if on(j) {
                        p.base_rate
                    } else {
                        1.0 - p.base_rate
                    }
                })
                .product();
            let p_pos = match &self.outcome_rule {
                OutcomeRule::AnyPresent => f64::from(u8::from(mask != 0)),
                OutcomeRule::Logistic {
                    coefficients,
                    intercept,
                } => sigmoid(
                    intercept
                        + (0..k)
                            .filter(|&j| on(j))
                            .map(|j| coefficients[j])
                            .sum::<f64>(),
                ),
            };
            total += prob * p_pos;
        }
        total
    }

    /// Largest document length the generator can produce.
    pub fn max_doc_len(&self) -> usize {
        let planted: usize = self.planted_patterns.iter().map(|p| p.tokens.len()).sum();
        self.doc_length_range[1].max(planted)
    }
}

fn filler_token(i: usize) -> String {
    format!("w{i}")
}

fn is_filler(t: &str) -> bool {
    t.len() > 1 && t.starts_with('w') && t[1..].bytes().all(|b| b.is_ascii_digit())
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// Deterministic standard-normal vector keyed by `(key, dimension index)`.
pub fn hashed_vector(key: &str, seed: u64, dim: usize) -> Vec<f64> {
    let base = fnv1a(key.as_bytes()) ^ splitmix64(seed);
    (0..dim)
        .map(|d| {
            let h1 = splitmix64(base ^ splitmix64(2 * d as u64 + 1));
            let h2 = splitmix64(h1 ^ 0xA5A5_A5A5_5A5A_5A5A);
            // 53-bit uniforms, u1 in (0, 1].
            let u1 = ((h1 >> 11) as f64 + 1.0) / (1u64 << 53) as f64;
            let u2 = (h2 >> 11) as f64 / (1u64 << 53) as f64;
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect()
}

/// Base embedding for every token that can appear in a synthetic corpus.
struct TokenTable {
    seed: u64,
    dim: usize,
    cluster_of: std::collections::HashMap<String, (String, f64)>,
}

impl TokenTable {
    fn new(spec: &SyntheticSpec) -> Self {
        let mut cluster_of = std::collections::HashMap::new();
        for p in &spec.planted_patterns {
            for c in &p.clusters {
                let key = format!("cluster:{}", p.tokens[c.position]);
                let mut members = c.members.clone();
                members.push(p.tokens[c.position].clone());
                for m in members {
                    cluster_of.insert(m, (key.clone(), p.cluster_spread));
                }
            }
        }
        TokenTable {
            seed: spec.seed,
            dim: spec.embedding_dim,
            cluster_of,
        }
    }

    fn vector(&self, token: &str) -> Vec<f64> {
        match self.cluster_of.get(token) {
            Some((key, spread)) => {
                let base = hashed_vector(key, self.seed, self.dim);
                let own = hashed_vector(token, self.seed, self.dim);
                base.iter().zip(own).map(|(b, o)| b + spread * o).collect()
            }
            None => hashed_vector(token, self.seed, self.dim),
        }
    }
}

/// Generates a corpus of filler documents with planted phrase treatments.
///
/// Filler tokens are `w0..w{vocab_size-1}`; pattern tokens must not collide with
/// them, so pattern presence is exact. Each pattern is planted independently with
/// probability `base_rate` at a random non-overlapping position.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Corpus, CorpusError> {
    spec.validate()?;
    let table = TokenTable::new(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let [lo, hi] = spec.doc_length_range;
    let dim = spec.embedding_dim;
    let alts: Vec<Vec<Vec<String>>> = spec
        .planted_patterns
        .iter()
        .map(|p| p.alternatives())
        .collect();

    let mut samples = Vec::with_capacity(spec.n_samples);
    for id in 0..spec.n_samples {
        let target_len = rng.random_range(lo..=hi);
        let present: Vec<bool> = spec
            .planted_patterns
            .iter()
            .map(|p| rng.random::<f64>() < p.base_rate)
            .collect();

        let planted: Vec<Vec<String>> = present
            .iter()
            .enumerate()
            .filter(|(_, &on)| on)
            .map(|(k, _)| {
                alts[k]
                    .iter()
                    .map(|choices| choices[rng.random_range(0..choices.len())].clone())
                    .collect()
            })
            .collect();
        let planted_len: usize = planted.iter().map(Vec::len).sum();
        let n_filler = target_len.max(planted_len) - planted_len;
        let filler: Vec<String> = (0..n_filler)
            .map(|_| filler_token(rng.random_range(0..spec.vocab_size)))
            .collect();

        // Choose insertion slots among the filler tokens (0..=n_filler), in order.
        let mut slots: Vec<usize> = (0..planted.len())
            .map(|_| rng.random_range(0..=n_filler))
            .collect();
        slots.sort_unstable();
        let mut tokens = Vec::with_capacity(n_filler + planted_len);
        let mut next = 0;
        for (slot, phrase) in slots.iter().zip(&planted) {
            tokens.extend_from_slice(&filler[next..*slot]);
            tokens.extend(phrase.iter().cloned());
            next = *slot;
        }
        tokens.extend_from_slice(&filler[next..]);

        let u = tokens.len();
        let mut data = Vec::with_capacity(u * dim);
        for t in &tokens {
            for v in table.vector(t) {
                let noise: f64 = if spec.noise_sigma > 0.0 {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    spec.noise_sigma * z
                } else {
                    0.0
                };
                data.push((v + noise) as f32);
            }
        }

        let outcome = match &spec.outcome_rule {
            OutcomeRule::AnyPresent => u8::from(present.iter().any(|&p| p)),
            OutcomeRule::Logistic {
                coefficients,
                intercept,
            } => {
                let eta = intercept
                    + coefficients
                        .iter()
                        .zip(&present)
                        .map(|(c, &p)| if p { *c } else { 0.0 })
                        .sum::<f64>();
                u8::from(rng.random::<f64>() < sigmoid(eta))
            }
        };

        samples.push(Sample {
            id: id as u64,
            raw_text: Some(tokens.join(" ")),
            embeddings: Array2::from_shape_vec((u, dim), data).expect("row-major block"),
            tokens,
            outcome,
        });
    }
    Corpus::new(
        samples,
        dim,
        spec.max_doc_len(),
        format!("synthetic seed={} n={}", spec.seed, spec.n_samples),
    )
}
