//! Beam search for evidence chains in the dense space.
//!
//! At each hop every chain in the beam is composed with the question into a new
//! query, the index returns `per_step_k` candidate passages, and the extended
//! chains from all parents are pooled and pruned back to `beam_size`. The last
//! hop's pool is returned unpruned except for `return_top`.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{write_jsonl, Corpus, Passage, QuestionRecord};
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::vindex::VectorIndex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreMode {
    /// `S_t = S_{t-1} + f(q_t, p_t)`: a product of `exp(f)` kept in log space.
    #[default]
    RawSum,
    /// `S_t = S_{t-1} + log softmax(f(q_t, p_t))` over the parent's candidates.
    PerStepSoftmax,
}

impl std::str::FromStr for ScoreMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw-sum" => Ok(ScoreMode::RawSum),
            "per-step-softmax" => Ok(ScoreMode::PerStepSoftmax),
            other => Err(Error::invalid(format!(
                "unknown score mode {other:?} (expected raw-sum or per-step-softmax)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BeamConfig {
    pub beam_size: usize,
    /// Hits requested per parent and hop; `None` means `max(beam_size, 10)`.
    pub per_step_k: Option<usize>,
    pub chain_len: usize,
    pub score_mode: ScoreMode,
    pub return_top: usize,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            beam_size: 10,
            per_step_k: None,
            chain_len: 2,
            score_mode: ScoreMode::RawSum,
            return_top: 10,
        }
    }
}

impl BeamConfig {
    pub fn per_step_k(&self) -> usize {
        self.per_step_k.unwrap_or(self.beam_size.max(10))
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 || self.per_step_k() == 0 || self.chain_len == 0 || self.return_top == 0 {
            return Err(Error::invalid(
                "beam_size, per_step_k, chain_len and return_top must all be at least 1",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredChain {
    pub hops: Vec<String>,
    pub step_scores: Vec<f64>,
    pub score: f64,
}

/// Chain score after appending a hop with similarity `sim`. `step_candidates`
/// holds the similarities of every extension considered for the same parent
/// at this hop, including `sim` itself; only the softmax mode reads it.
pub fn chain_score_update(prev: f64, sim: f64, step_candidates: &[f64], mode: ScoreMode) -> f64 {
    match mode {
        ScoreMode::RawSum => prev + sim,
        ScoreMode::PerStepSoftmax if step_candidates.is_empty() => prev,
        ScoreMode::PerStepSoftmax => prev + sim - log_sum_exp(step_candidates),
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

#[derive(Debug, Clone)]
struct Partial {
    hops: Vec<usize>,
    step_scores: Vec<f64>,
    score: f64,
}

/// Dense multi-hop retriever over a prebuilt index.
pub struct Retriever<'a> {
    params: &'a EncoderParams,
    index: &'a VectorIndex,
    /// index row -> passage
    passages: Vec<&'a Passage>,
}

impl<'a> Retriever<'a> {
    pub fn new(params: &'a EncoderParams, index: &'a VectorIndex, corpus: &'a Corpus) -> Result<Self> {
        if index.is_empty() {
            return Err(Error::EmptyIndex);
        }
        index.check_params(params)?;
        let passages = index
            .ids()
            .iter()
            .map(|id| {
                corpus
                    .get(id)
                    .ok_or_else(|| Error::invalid(format!("index id {id:?} missing from corpus")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Retriever {
            params,
            index,
            passages,
        })
    }

    fn id(&self, row: usize) -> &str {
        &self.index.ids()[row]
    }

    fn chain_cmp(&self, a: &Partial, b: &Partial) -> Ordering {
        (b.score + 0.0).total_cmp(&(a.score + 0.0)).then_with(|| {
            a.hops
                .iter()
                .map(|&r| self.id(r))
                .cmp(b.hops.iter().map(|&r| self.id(r)))
        })
    }

    pub fn retrieve<S: AsRef<str>>(&self, question_tokens: &[S], cfg: &BeamConfig) -> Result<Vec<ScoredChain>> {
        cfg.validate()?;
        if cfg.chain_len > self.index.len() {
            return Err(Error::invalid(format!(
                "chain length {} exceeds corpus size {}",
                cfg.chain_len,
                self.index.len()
            )));
        }
        let k = cfg.per_step_k();
        let mut beam = vec![Partial {
            hops: Vec::new(),
            step_scores: Vec::new(),
            score: 0.0,
        }];
        for t in 0..cfg.chain_len {
            let mut pool: HashMap<Vec<usize>, Partial> = HashMap::new();
            for parent in &beam {
                let prefix: Vec<&Passage> = parent.hops.iter().map(|&r| self.passages[r]).collect();
                let qv = self.params.encode_composed(question_tokens, &prefix);
                let hits: Vec<(usize, f64)> = self
                    .index
                    .search_positions(qv.as_slice(), k)
                    .into_iter()
                    .filter(|(r, _)| !parent.hops.contains(r))
                    .collect();
                let sims: Vec<f64> = hits.iter().map(|h| h.1).collect();
                for &(row, sim) in &hits {
                    let mut hops = parent.hops.clone();
                    hops.push(row);
                    let mut step_scores = parent.step_scores.clone();
                    step_scores.push(sim);
                    let score = chain_score_update(parent.score, sim, &sims, cfg.score_mode);
                    let cand = Partial {
                        hops,
                        step_scores,
                        score,
                    };
                    match pool.get(&cand.hops) {
                        Some(existing) if existing.score >= cand.score => {}
                        _ => {
                            pool.insert(cand.hops.clone(), cand);
                        }
                    }
                }
            }
            let mut next: Vec<Partial> = pool.into_values().collect();
            next.sort_by(|a, b| self.chain_cmp(a, b));
            let keep = if t + 1 == cfg.chain_len {
                cfg.return_top
            } else {
                cfg.beam_size
            };
            next.truncate(keep);
            beam = next;
        }
        Ok(beam
            .into_iter()
            .map(|p| ScoredChain {
                hops: p.hops.iter().map(|&r| self.id(r).to_string()).collect(),
                step_scores: p.step_scores,
                score: p.score,
            })
            .collect())
    }

    /// Retrieve for many questions in parallel; output order follows input.
    pub fn retrieve_all(&self, questions: &[QuestionRecord], cfg: &BeamConfig) -> Result<Vec<RunRecord>> {
        questions
            .par_iter()
            .map(|q| {
                Ok(RunRecord {
                    question_id: q.id.clone(),
                    chains: self.retrieve(&q.tokens(), cfg)?,
                })
            })
            .collect()
    }
}

pub fn retrieve_chains(
    question: &QuestionRecord,
    params: &EncoderParams,
    index: &VectorIndex,
    corpus: &Corpus,
    cfg: &BeamConfig,
) -> Result<Vec<ScoredChain>> {
    Retriever::new(params, index, corpus)?.retrieve(&question.tokens(), cfg)
}

/// One line of a run file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub question_id: String,
    pub chains: Vec<ScoredChain>,
}

pub fn write_run(run: &[RunRecord], path: impl AsRef<Path>) -> Result<()> {
    write_jsonl(path.as_ref(), run.iter())
}

pub fn load_run(path: impl AsRef<Path>) -> Result<Vec<RunRecord>> {
    let mut out = Vec::new();
    crate::corpus::read_jsonl(path.as_ref(), |r: RunRecord| {
        out.push(r);
        Ok(())
    })?;
    Ok(out)
}
