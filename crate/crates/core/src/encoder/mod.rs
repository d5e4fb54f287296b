//! Dual encoder over hashed bag-of-ngrams features.
//!
//! A query or passage is featurized into an L2-normalized sparse count vector
//! over `hash_dim` buckets and projected to `emb_dim` dimensions by a learned
//! linear map. Queries and passages use separate projections.

mod features;
mod loss;

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::Passage;
use crate::error::{Error, Result};
use crate::hash::Fnv64;

pub use features::{Featurizer, SparseFeatures};
pub use loss::{chain_nll_loss, loss_and_gradient, loss_gradient, ParamGrad};

pub const SEP_TOKEN: &str = "[sep]";
pub const DEFAULT_MAX_LEN: usize = 256;

const CHECKPOINT_MAGIC: &[u8; 8] = b"HOPCENC\0";
const CHECKPOINT_FORMAT: u32 = 1;

/// Dense embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseVector(pub Vec<f64>);

impl DenseVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Inner product of a query and a passage embedding.
pub fn similarity(qv: &DenseVector, pv: &DenseVector) -> Result<f64> {
    if qv.dim() != pv.dim() {
        return Err(Error::DimensionMismatch {
            what: "similarity operands",
            expected: qv.dim(),
            found: pv.dim(),
        });
    }
    Ok(dot(&qv.0, &pv.0))
}

/// Question tokens followed by `[sep]` and each prior hop's tokens, tail-truncated.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComposedQuery(Vec<String>);

impl ComposedQuery {
    pub fn tokens(&self) -> &[String] {
        &self.0
    }
}

pub fn compose_query<S: AsRef<str>>(
    question_tokens: &[S],
    hops: &[&Passage],
    max_len: usize,
) -> ComposedQuery {
    let mut tokens: Vec<String> = question_tokens
        .iter()
        .map(|t| t.as_ref().to_string())
        .collect();
    for p in hops {
        if tokens.len() >= max_len {
            break;
        }
        tokens.push(SEP_TOKEN.to_string());
        tokens.extend(p.tokens.iter().cloned());
    }
    tokens.truncate(max_len);
    ComposedQuery(tokens)
}

/// A `emb_dim x hash_dim` linear map. Stored bucket-major so that the
/// embedding column of one bucket is contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    emb_dim: usize,
    hash_dim: usize,
    cols: Vec<f64>,
}

impl Projection {
    fn zeros(emb_dim: usize, hash_dim: usize) -> Self {
        Projection {
            emb_dim,
            hash_dim,
            cols: vec![0.0; emb_dim * hash_dim],
        }
    }

    /// Entry at (row, bucket) of the `emb_dim x hash_dim` matrix.
    pub fn get(&self, row: usize, bucket: usize) -> f64 {
        self.cols[bucket * self.emb_dim + row]
    }

    pub fn set(&mut self, row: usize, bucket: usize, v: f64) {
        self.cols[bucket * self.emb_dim + row] = v;
    }

    pub fn column(&self, bucket: usize) -> &[f64] {
        &self.cols[bucket * self.emb_dim..(bucket + 1) * self.emb_dim]
    }

    pub(crate) fn raw(&self) -> &[f64] {
        &self.cols
    }

    pub(crate) fn raw_mut(&mut self) -> &mut [f64] {
        &mut self.cols
    }

    pub fn apply(&self, x: &SparseFeatures) -> DenseVector {
        let mut out = vec![0.0; self.emb_dim];
        for &(b, v) in x.entries() {
            for (o, w) in out.iter_mut().zip(self.column(b as usize)) {
                *o += v * w;
            }
        }
        DenseVector(out)
    }

    fn row_major(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.cols.len());
        for r in 0..self.emb_dim {
            for b in 0..self.hash_dim {
                out.push(self.get(r, b));
            }
        }
        out
    }

    fn from_row_major(emb_dim: usize, hash_dim: usize, data: &[f64]) -> Self {
        let mut p = Projection::zeros(emb_dim, hash_dim);
        for r in 0..emb_dim {
            for b in 0..hash_dim {
                p.set(r, b, data[r * hash_dim + b]);
            }
        }
        p
    }
}

/// How the two projections are drawn at initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum InitScheme {
    /// Separate Gaussian draws for the query and passage projections.
    Independent,
    /// One Gaussian draw copied into both projections. They still train
    /// independently. `W_Q^T W_P` then starts close to a scaled identity, so
    /// an untrained model already matches shared tokens, including tokens no
    /// training question contains.
    #[default]
    Tied,
}

impl InitScheme {
    /// Default weight std: `2/sqrt(emb_dim)` when tied (untrained scores are
    /// about four times the feature cosine), `1/sqrt(hash_dim)` otherwise.
    pub fn default_std(self, hash_dim: usize, emb_dim: usize) -> f64 {
        match self {
            InitScheme::Tied => 2.0 / (emb_dim as f64).sqrt(),
            InitScheme::Independent => 1.0 / (hash_dim as f64).sqrt(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub hash_dim: usize,
    pub emb_dim: usize,
    pub max_len: usize,
    pub init: InitScheme,
    /// Standard deviation of the initial weights; `None` picks
    /// [`InitScheme::default_std`].
    pub init_std: Option<f64>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            hash_dim: 1 << 14,
            emb_dim: 1024,
            max_len: DEFAULT_MAX_LEN,
            init: InitScheme::default(),
            init_std: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    seed: u64,
    max_len: usize,
    /// Checkpoint stamp; bumped by the trainer at each refresh.
    pub version: u64,
    featurizer: Featurizer,
    pub query: Projection,
    pub passage: Projection,
}

impl EncoderParams {
    pub fn new(cfg: &EncoderConfig, seed: u64) -> Result<Self> {
        if cfg.hash_dim == 0 || cfg.emb_dim == 0 {
            return Err(Error::invalid("hash_dim and emb_dim must be positive"));
        }
        let std = cfg
            .init_std
            .unwrap_or_else(|| cfg.init.default_std(cfg.hash_dim, cfg.emb_dim));
        if !(std.is_finite() && std >= 0.0) {
            return Err(Error::invalid(format!("bad init std {std}")));
        }
        let normal = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = || {
            let mut p = Projection::zeros(cfg.emb_dim, cfg.hash_dim);
            for w in p.raw_mut() {
                *w = normal.sample(&mut rng);
            }
            p
        };
        let query = draw();
        let passage = match cfg.init {
            InitScheme::Independent => draw(),
            InitScheme::Tied => query.clone(),
        };
        Ok(EncoderParams {
            seed,
            max_len: cfg.max_len,
            version: 0,
            featurizer: Featurizer::new(cfg.hash_dim, seed),
            query,
            passage,
        })
    }

    /// Zero projections; mostly useful for hand-built test instances.
    pub fn zeros(hash_dim: usize, emb_dim: usize, seed: u64) -> Self {
        EncoderParams {
            seed,
            max_len: DEFAULT_MAX_LEN,
            version: 0,
            featurizer: Featurizer::new(hash_dim, seed),
            query: Projection::zeros(emb_dim, hash_dim),
            passage: Projection::zeros(emb_dim, hash_dim),
        }
    }

    pub fn hash_dim(&self) -> usize {
        self.featurizer.dim()
    }

    pub fn emb_dim(&self) -> usize {
        self.query.emb_dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn with_max_len(mut self, max_len: usize) -> Self {
        self.max_len = max_len;
        self
    }

    pub fn featurizer(&self) -> &Featurizer {
        &self.featurizer
    }

    pub fn encode_passage(&self, passage: &Passage) -> DenseVector {
        self.passage.apply(&self.featurizer.featurize(&passage.tokens))
    }

    pub fn encode_query(&self, query: &ComposedQuery) -> DenseVector {
        self.query.apply(&self.featurizer.featurize(query.tokens()))
    }

    pub fn encode_passage_tokens<S: AsRef<str>>(&self, tokens: &[S]) -> DenseVector {
        self.passage.apply(&self.featurizer.featurize(tokens))
    }

    /// Compose `question + hops` and encode it with the query projection.
    pub fn encode_composed<S: AsRef<str>>(&self, question_tokens: &[S], hops: &[&Passage]) -> DenseVector {
        self.encode_query(&compose_query(question_tokens, hops, self.max_len))
    }

    pub fn is_finite(&self) -> bool {
        self.query.raw().iter().chain(self.passage.raw()).all(|w| w.is_finite())
    }

    /// `params -= lr * grad`. Returns whether every updated weight is finite.
    pub fn apply_gradient(&mut self, grad: &ParamGrad, lr: f64) -> Result<bool> {
        if grad.query.len() != self.query.cols.len() || grad.passage.len() != self.passage.cols.len() {
            return Err(Error::DimensionMismatch {
                what: "gradient",
                expected: self.query.cols.len(),
                found: grad.query.len(),
            });
        }
        if lr == 0.0 {
            return Ok(true);
        }
        let d = self.emb_dim();
        let mut finite = true;
        for (proj, g, buckets) in [
            (&mut self.query, &grad.query, grad.query_buckets()),
            (&mut self.passage, &grad.passage, grad.passage_buckets()),
        ] {
            for &b in buckets {
                let range = b as usize * d..(b as usize + 1) * d;
                for (w, g) in proj.cols[range.clone()].iter_mut().zip(&g[range]) {
                    *w -= lr * g;
                    finite &= w.is_finite();
                }
            }
        }
        Ok(finite)
    }

    /// Content hash over dimensions, seed and every weight. Two parameter sets
    /// with equal fingerprints embed identically.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv64::with_seed(0);
        h.write_u64(self.hash_dim() as u64);
        h.write_u64(self.emb_dim() as u64);
        h.write_u64(self.seed);
        h.write_u64(self.max_len as u64);
        for w in self.query.raw().iter().chain(self.passage.raw()) {
            h.write_u64(w.to_bits());
        }
        h.finish()
    }

    /// Binary checkpoint: magic, format, V, d, seed, max_len, version, then
    /// W_Q and W_P as row-major `d x V` little-endian f64.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
        w.write_all(&CHECKPOINT_FORMAT.to_le_bytes()).map_err(io)?;
        for v in [
            self.hash_dim() as u64,
            self.emb_dim() as u64,
            self.seed,
            self.max_len as u64,
            self.version,
        ] {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        for m in [&self.query, &self.passage] {
            for x in m.row_major() {
                w.write_all(&x.to_le_bytes()).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let bad = |message: String| Error::Format {
            path: path.to_path_buf(),
            message,
        };
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| bad("truncated header".into()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("not an encoder checkpoint".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4).map_err(|_| bad("truncated header".into()))?;
        let format = u32::from_le_bytes(b4);
        if format != CHECKPOINT_FORMAT {
            return Err(bad(format!("unsupported checkpoint format {format}")));
        }
        let mut header = [0u64; 5];
        for h in &mut header {
            let mut b8 = [0u8; 8];
            r.read_exact(&mut b8).map_err(|_| bad("truncated header".into()))?;
            *h = u64::from_le_bytes(b8);
        }
        let [hash_dim, emb_dim, seed, max_len, version] = header;
        let (hash_dim, emb_dim) = (hash_dim as usize, emb_dim as usize);
        if hash_dim == 0 || emb_dim == 0 {
            return Err(bad(format!("invalid dimensions V={hash_dim} d={emb_dim}")));
        }
        let n = hash_dim
            .checked_mul(emb_dim)
            .ok_or_else(|| bad("dimensions overflow".into()))?;
        let mut read_matrix = || -> Result<Projection> {
            let mut buf = vec![0u8; n * 8];
            r.read_exact(&mut buf)
                .map_err(|_| bad(format!("truncated weights, expected {n} values per matrix")))?;
            let data: Vec<f64> = buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Ok(Projection::from_row_major(emb_dim, hash_dim, &data))
        };
        let query = read_matrix()?;
        let passage = read_matrix()?;
        let mut rest = Vec::new();
        r.read_to_end(&mut rest).map_err(|e| Error::io(path, e))?;
        if !rest.is_empty() {
            return Err(bad(format!("{} trailing bytes", rest.len())));
        }
        let params = EncoderParams {
            seed,
            max_len: max_len as usize,
            version,
            featurizer: Featurizer::new(hash_dim, seed),
            query,
            passage,
        };
        if !params.is_finite() {
            return Err(bad("non-finite weight".into()));
        }
        Ok(params)
    }
}
