//! Exact maximum-inner-product index over passage embeddings.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::corpus::Corpus;
use crate::encoder::{dot, DenseVector, EncoderParams};
use crate::error::{Error, Result};

const INDEX_MAGIC: &[u8; 8] = b"HOPCIDX\0";
const INDEX_FORMAT: u32 = 1;

/// A search hit. Ordering: score descending, then id ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct Hit {
    pub id: String,
    pub score: f64,
}

pub(crate) fn rank_cmp(a_score: f64, a_id: &str, b_score: f64, b_id: &str) -> Ordering {
    // adding 0.0 folds -0.0 into 0.0 so equal scores tie on id
    (b_score + 0.0).total_cmp(&(a_score + 0.0)).then_with(|| a_id.cmp(b_id))
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    ids: Vec<String>,
    dim: usize,
    matrix: Vec<f64>,
    pub model_version: u64,
    params_fingerprint: u64,
}

impl VectorIndex {
    pub fn from_rows(ids: Vec<String>, rows: Vec<Vec<f64>>, model_version: u64) -> Result<Self> {
        if ids.len() != rows.len() {
            return Err(Error::invalid("ids and rows differ in length"));
        }
        let dim = rows.first().map_or(0, Vec::len);
        let mut seen = HashSet::new();
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::DuplicateId(id.clone()));
            }
        }
        let mut matrix = Vec::with_capacity(ids.len() * dim);
        for r in rows {
            if r.len() != dim {
                return Err(Error::DimensionMismatch {
                    what: "index row",
                    expected: dim,
                    found: r.len(),
                });
            }
            if r.iter().any(|x| !x.is_finite()) {
                return Err(Error::invalid("non-finite embedding"));
            }
            matrix.extend(r);
        }
        Ok(VectorIndex {
            ids,
            dim,
            matrix,
            model_version,
            params_fingerprint: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.matrix[i * self.dim..(i + 1) * self.dim]
    }

    pub fn params_fingerprint(&self) -> u64 {
        self.params_fingerprint
    }

    /// Fails unless the index was built from exactly these parameters.
    pub fn check_params(&self, params: &EncoderParams) -> Result<()> {
        if self.dim != params.emb_dim() {
            return Err(Error::DimensionMismatch {
                what: "index embedding dim vs checkpoint",
                expected: params.emb_dim(),
                found: self.dim,
            });
        }
        let fp = params.fingerprint();
        if fp != self.params_fingerprint {
            return Err(Error::StaleIndex {
                index: self.params_fingerprint,
                params: fp,
            });
        }
        Ok(())
    }

    /// Top-k row positions by inner product, full scan.
    pub(crate) fn search_positions(&self, qv: &[f64], k: usize) -> Vec<(usize, f64)> {
        let mut scored: Vec<(usize, f64)> = (0..self.len()).map(|i| (i, dot(self.row(i), qv))).collect();
        let cmp = |a: &(usize, f64), b: &(usize, f64)| rank_cmp(a.1, &self.ids[a.0], b.1, &self.ids[b.0]);
        let k = k.min(scored.len());
        if k < scored.len() {
            scored.select_nth_unstable_by(k, cmp);
            scored.truncate(k);
        }
        scored.sort_by(cmp);
        scored
    }

    /// Exact top-k by inner product, sorted score descending then id ascending.
    pub fn search(&self, qv: &DenseVector, k: usize) -> Result<Vec<Hit>> {
        if self.is_empty() {
            return Err(Error::EmptyIndex);
        }
        if k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        if qv.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                what: "query vector",
                expected: self.dim,
                found: qv.dim(),
            });
        }
        Ok(self
            .search_positions(qv.as_slice(), k)
            .into_iter()
            .map(|(i, score)| Hit {
                id: self.ids[i].clone(),
                score,
            })
            .collect())
    }

    /// Layout: magic, format (u32), n, d, model_version, params fingerprint
    /// (u64 each), then n length-prefixed UTF-8 ids, then the row-major
    /// `n x d` matrix. All little-endian.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        w.write_all(INDEX_MAGIC).map_err(io)?;
        w.write_all(&INDEX_FORMAT.to_le_bytes()).map_err(io)?;
        for v in [
            self.len() as u64,
            self.dim as u64,
            self.model_version,
            self.params_fingerprint,
        ] {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        for id in &self.ids {
            w.write_all(&(id.len() as u32).to_le_bytes()).map_err(io)?;
            w.write_all(id.as_bytes()).map_err(io)?;
        }
        for x in &self.matrix {
            w.write_all(&x.to_le_bytes()).map_err(io)?;
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
        r.read_exact(&mut magic).map_err(|_| bad("truncated header".into()))?;
        if &magic != INDEX_MAGIC {
            return Err(bad("not an index file".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4).map_err(|_| bad("truncated header".into()))?;
        let format = u32::from_le_bytes(b4);
        if format != INDEX_FORMAT {
            return Err(bad(format!("unsupported index format {format}")));
        }
        let read_u64 = |r: &mut BufReader<File>| -> Result<u64> {
            let mut b8 = [0u8; 8];
            r.read_exact(&mut b8).map_err(|_| bad("truncated header".into()))?;
            Ok(u64::from_le_bytes(b8))
        };
        let n = read_u64(&mut r)? as usize;
        let dim = read_u64(&mut r)? as usize;
        let model_version = read_u64(&mut r)?;
        let params_fingerprint = read_u64(&mut r)?;
        let mut ids = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            r.read_exact(&mut b4).map_err(|_| bad("truncated id table".into()))?;
            let mut buf = vec![0u8; u32::from_le_bytes(b4) as usize];
            r.read_exact(&mut buf).map_err(|_| bad("truncated id table".into()))?;
            ids.push(String::from_utf8(buf).map_err(|_| bad("id is not UTF-8".into()))?);
        }
        let len = n
            .checked_mul(dim)
            .ok_or_else(|| bad("dimensions overflow".into()))?;
        let mut buf = vec![0u8; len * 8];
        r.read_exact(&mut buf)
            .map_err(|_| bad(format!("truncated matrix, expected {n}x{dim}")))?;
        let mut rest = Vec::new();
        r.read_to_end(&mut rest).map_err(|e| Error::io(path, e))?;
        if !rest.is_empty() {
            return Err(bad(format!("{} trailing bytes", rest.len())));
        }
        let matrix: Vec<f64> = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut seen = HashSet::new();
        if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(bad(format!("duplicate id {dup:?}")));
        }
        if matrix.iter().any(|x| !x.is_finite()) {
            return Err(bad("non-finite entry".into()));
        }
        Ok(VectorIndex {
            ids,
            dim,
            matrix,
            model_version,
            params_fingerprint,
        })
    }

    /// Load and check the embedding width against a checkpoint.
    pub fn load_for(path: impl AsRef<Path>, params: &EncoderParams) -> Result<Self> {
        let index = Self::load(path)?;
        if index.dim != params.emb_dim() {
            return Err(Error::DimensionMismatch {
                what: "index embedding dim vs checkpoint",
                expected: params.emb_dim(),
                found: index.dim,
            });
        }
        Ok(index)
    }
}

/// Embed every passage of the corpus with the passage encoder.
pub fn build_index(params: &EncoderParams, corpus: &Corpus) -> Result<VectorIndex> {
    if corpus.is_empty() {
        return Err(Error::invalid("cannot index an empty corpus"));
    }
    let dim = params.emb_dim();
    let rows: Vec<Vec<f64>> = corpus
        .passages()
        .par_iter()
        .map(|p| params.encode_passage(p).0)
        .collect();
    let mut matrix = Vec::with_capacity(rows.len() * dim);
    for r in rows {
        matrix.extend(r);
    }
    Ok(VectorIndex {
        ids: corpus.passages().iter().map(|p| p.id.clone()).collect(),
        dim,
        matrix,
        model_version: params.version,
        params_fingerprint: params.fingerprint(),
    })
}

/// Re-embed the corpus with new parameters and bump the generation stamp.
pub fn refresh(index: &VectorIndex, new_params: &EncoderParams, corpus: &Corpus) -> Result<VectorIndex> {
    if new_params.emb_dim() != index.dim {
        return Err(Error::DimensionMismatch {
            what: "refresh embedding dim",
            expected: index.dim,
            found: new_params.emb_dim(),
        });
    }
    let mut fresh = build_index(new_params, corpus)?;
    fresh.model_version = index.model_version + 1;
    Ok(fresh)
}
