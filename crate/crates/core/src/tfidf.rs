//! TF-IDF cosine retriever.
//!
//! Weights are `tf(t, p) * ln((1 + N) / (1 + df(t)))` and document vectors are
//! L2-normalized. A term present in every document has zero weight.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::beam::{RunRecord, ScoredChain};
use crate::corpus::{Corpus, QuestionRecord};
use crate::error::{Error, Result};
use crate::vindex::{rank_cmp, Hit};

const TFIDF_MAGIC: &[u8; 8] = b"HOPCTFI\0";
const TFIDF_FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TfIdfModel {
    doc_count: usize,
    terms: Vec<String>,
    term_ids: HashMap<String, u32>,
    df: Vec<u32>,
    idf: Vec<f64>,
    doc_ids: Vec<String>,
    /// Raw term counts per document, sorted by term id.
    doc_tf: Vec<Vec<(u32, u32)>>,
    doc_norms: Vec<f64>,
    /// term id -> (doc, normalized weight)
    postings: Vec<Vec<(u32, f64)>>,
}

fn count_terms<'a>(tokens: impl Iterator<Item = &'a String>) -> HashMap<&'a str, u32> {
    let mut tf = HashMap::new();
    for t in tokens {
        *tf.entry(t.as_str()).or_insert(0) += 1;
    }
    tf
}

impl TfIdfModel {
    pub fn fit(corpus: &Corpus) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::invalid("cannot fit tf-idf on an empty corpus"));
        }
        let mut terms: Vec<String> = Vec::new();
        let mut term_ids: HashMap<String, u32> = HashMap::new();
        let mut doc_tf = Vec::with_capacity(corpus.len());
        for p in corpus.passages() {
            let mut tf: Vec<(u32, u32)> = count_terms(p.tokens.iter())
                .into_iter()
                .map(|(t, c)| {
                    let id = *term_ids.entry(t.to_string()).or_insert_with(|| {
                        terms.push(t.to_string());
                        (terms.len() - 1) as u32
                    });
                    (id, c)
                })
                .collect();
            tf.sort_unstable();
            doc_tf.push(tf);
        }
        let doc_ids = corpus.passages().iter().map(|p| p.id.clone()).collect();
        Ok(Self::from_counts(terms, term_ids, doc_ids, doc_tf))
    }

    fn from_counts(
        terms: Vec<String>,
        term_ids: HashMap<String, u32>,
        doc_ids: Vec<String>,
        doc_tf: Vec<Vec<(u32, u32)>>,
    ) -> Self {
        let n = doc_ids.len();
        let mut df = vec![0u32; terms.len()];
        for doc in &doc_tf {
            for &(t, _) in doc {
                df[t as usize] += 1;
            }
        }
        let idf: Vec<f64> = df
            .iter()
            .map(|&d| ((1.0 + n as f64) / (1.0 + d as f64)).ln())
            .collect();
        let mut postings = vec![Vec::new(); terms.len()];
        let mut doc_norms = Vec::with_capacity(n);
        for (di, doc) in doc_tf.iter().enumerate() {
            let norm = doc
                .iter()
                .map(|&(t, c)| (c as f64 * idf[t as usize]).powi(2))
                .sum::<f64>()
                .sqrt();
            doc_norms.push(norm);
            if norm > 0.0 {
                for &(t, c) in doc {
                    let w = c as f64 * idf[t as usize] / norm;
                    if w != 0.0 {
                        postings[t as usize].push((di as u32, w));
                    }
                }
            }
        }
        TfIdfModel {
            doc_count: n,
            terms,
            term_ids,
            df,
            idf,
            doc_ids,
            doc_tf,
            doc_norms,
            postings,
        }
    }

    pub fn doc_count(&self) -> usize {
        self.doc_count
    }

    pub fn df(&self, term: &str) -> u32 {
        self.term_ids.get(term).map_or(0, |&t| self.df[t as usize])
    }

    pub fn idf(&self, term: &str) -> Option<f64> {
        self.term_ids.get(term).map(|&t| self.idf[t as usize])
    }

    pub fn doc_norm(&self, id: &str) -> Option<f64> {
        self.doc_ids.iter().position(|d| d == id).map(|i| self.doc_norms[i])
    }

    /// Cosine score of every document, in corpus order.
    pub fn scores<S: AsRef<str>>(&self, query_tokens: &[S]) -> Vec<f64> {
        let mut tf: HashMap<u32, u32> = HashMap::new();
        for t in query_tokens {
            if let Some(&id) = self.term_ids.get(t.as_ref()) {
                *tf.entry(id).or_insert(0) += 1;
            }
        }
        let mut qw: Vec<(u32, f64)> = tf
            .into_iter()
            .map(|(t, c)| (t, c as f64 * self.idf[t as usize]))
            .filter(|(_, w)| *w != 0.0)
            .collect();
        qw.sort_unstable_by_key(|e| e.0);
        let qnorm = qw.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
        let mut scores = vec![0.0; self.doc_count];
        if qnorm == 0.0 {
            return scores;
        }
        for (t, w) in qw {
            let wq = w / qnorm;
            for &(d, wd) in &self.postings[t as usize] {
                scores[d as usize] += wq * wd;
            }
        }
        scores
    }

    /// Top-k documents by cosine, ties broken by ascending id.
    pub fn search<S: AsRef<str>>(&self, query_tokens: &[S], k: usize) -> Result<Vec<Hit>> {
        if self.doc_count == 0 {
            return Err(Error::EmptyIndex);
        }
        if k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        let scores = self.scores(query_tokens);
        let mut order: Vec<usize> = (0..self.doc_count).collect();
        let cmp = |a: &usize, b: &usize| rank_cmp(scores[*a], &self.doc_ids[*a], scores[*b], &self.doc_ids[*b]);
        let k = k.min(order.len());
        if k < order.len() {
            order.select_nth_unstable_by(k, cmp);
            order.truncate(k);
        }
        order.sort_by(cmp);
        Ok(order
            .into_iter()
            .map(|i| Hit {
                id: self.doc_ids[i].clone(),
                score: scores[i],
            })
            .collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        let put_str = |w: &mut BufWriter<File>, s: &str| -> std::io::Result<()> {
            w.write_all(&(s.len() as u32).to_le_bytes())?;
            w.write_all(s.as_bytes())
        };
        w.write_all(TFIDF_MAGIC).map_err(io)?;
        w.write_all(&TFIDF_FORMAT.to_le_bytes()).map_err(io)?;
        w.write_all(&(self.doc_count as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&(self.terms.len() as u64).to_le_bytes()).map_err(io)?;
        for t in &self.terms {
            put_str(&mut w, t).map_err(io)?;
        }
        for (id, tf) in self.doc_ids.iter().zip(&self.doc_tf) {
            put_str(&mut w, id).map_err(io)?;
            w.write_all(&(tf.len() as u32).to_le_bytes()).map_err(io)?;
            for &(t, c) in tf {
                w.write_all(&t.to_le_bytes()).map_err(io)?;
                w.write_all(&c.to_le_bytes()).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let bad = |m: &str| Error::Format {
            path: path.to_path_buf(),
            message: m.to_string(),
        };
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != TFIDF_MAGIC {
            return Err(bad("not a tf-idf model"));
        }
        let u32_at = |r: &mut BufReader<File>| -> Result<u32> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(|_| bad("truncated file"))?;
            Ok(u32::from_le_bytes(b))
        };
        let u64_at = |r: &mut BufReader<File>| -> Result<u64> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(|_| bad("truncated file"))?;
            Ok(u64::from_le_bytes(b))
        };
        let str_at = |r: &mut BufReader<File>| -> Result<String> {
            let len = u32_at(r)? as usize;
            let mut buf = vec![0u8; len];
            r.read_exact(&mut buf).map_err(|_| bad("truncated file"))?;
            String::from_utf8(buf).map_err(|_| bad("string is not UTF-8"))
        };
        if u32_at(&mut r)? != TFIDF_FORMAT {
            return Err(bad("unsupported tf-idf format"));
        }
        let n = u64_at(&mut r)? as usize;
        let n_terms = u64_at(&mut r)? as usize;
        let mut terms = Vec::with_capacity(n_terms.min(1 << 20));
        let mut term_ids = HashMap::new();
        for i in 0..n_terms {
            let t = str_at(&mut r)?;
            term_ids.insert(t.clone(), i as u32);
            terms.push(t);
        }
        let mut doc_ids = Vec::with_capacity(n.min(1 << 20));
        let mut doc_tf = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            doc_ids.push(str_at(&mut r)?);
            let nnz = u32_at(&mut r)? as usize;
            let mut tf = Vec::with_capacity(nnz);
            for _ in 0..nnz {
                let t = u32_at(&mut r)?;
                if t as usize >= n_terms {
                    return Err(bad("term id out of range"));
                }
                tf.push((t, u32_at(&mut r)?));
            }
            doc_tf.push(tf);
        }
        Ok(Self::from_counts(terms, term_ids, doc_ids, doc_tf))
    }
}

/// Free-function form of [`TfIdfModel::search`].
pub fn search_tfidf<S: AsRef<str>>(model: &TfIdfModel, query_tokens: &[S], k: usize) -> Result<Vec<Hit>> {
    model.search(query_tokens, k)
}

/// Term-matching chain baseline: the top `n_chains + 1` hits on the raw
/// question paired as `(h1, h2), (h2, h3), ...`. A chain scores the sum of
/// its two hit scores; chains keep hit order.
pub fn tfidf_chains<S: AsRef<str>>(model: &TfIdfModel, question_tokens: &[S], n_chains: usize) -> Result<Vec<ScoredChain>> {
    let hits = model.search(question_tokens, n_chains + 1)?;
    Ok(hits
        .windows(2)
        .map(|w| ScoredChain {
            hops: vec![w[0].id.clone(), w[1].id.clone()],
            step_scores: vec![w[0].score, w[1].score],
            score: w[0].score + w[1].score,
        })
        .collect())
}

/// [`tfidf_chains`] for every question, in input order.
pub fn tfidf_run(model: &TfIdfModel, questions: &[QuestionRecord], n_chains: usize) -> Result<Vec<RunRecord>> {
    questions
        .iter()
        .map(|q| {
            Ok(RunRecord {
                question_id: q.id.clone(),
                chains: tfidf_chains(model, &q.tokens(), n_chains)?,
            })
        })
        .collect()
}
