//! Training: tf-idf warm-up negatives, chain-NLL minibatch SGD, and periodic
//! hard-negative refresh by beam search with the current parameters.
//!
//! Refresh can run inline every `refresh_every` steps (sequential mode, fully
//! deterministic) or on a background thread that mines from immutable
//! parameter snapshots while training continues (concurrent mode). In both
//! modes the trainer only swaps pools at minibatch boundaries.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::mpsc::{self, TrySendError};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::beam::{BeamConfig, Retriever};
use crate::corpus::{infer_hop_order, write_jsonl, Corpus, OrderedChain, QuestionRecord};
use crate::encoder::{loss_and_gradient, EncoderConfig, EncoderParams, ParamGrad};
use crate::error::{Error, Result};
use crate::eval::evaluate_run;
use crate::tfidf::TfIdfModel;
use crate::vindex::{build_index, refresh, VectorIndex};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum RefreshMode {
    #[default]
    SequentialRefresh,
    ConcurrentRefresh,
}

impl std::str::FromStr for RefreshMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sequential-refresh" | "sequential" => Ok(RefreshMode::SequentialRefresh),
            "concurrent-refresh" | "concurrent" => Ok(RefreshMode::ConcurrentRefresh),
            other => Err(Error::invalid(format!("unknown refresh mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Negative chains per question.
    pub negatives: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Refresh the negative pools every this many optimizer steps.
    pub refresh_every: usize,
    /// Beam settings used to mine hard negatives.
    pub mining: BeamConfig,
    /// Beam settings for the per-epoch dev evaluation.
    pub eval_beam: BeamConfig,
    pub mode: RefreshMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            negatives: 4,
            learning_rate: 0.1,
            epochs: 10,
            batch_size: 8,
            refresh_every: 20,
            mining: BeamConfig::default(),
            eval_beam: BeamConfig::default(),
            mode: RefreshMode::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.negatives == 0 || self.refresh_every == 0 || self.batch_size == 0 {
            return Err(Error::invalid(
                "negatives, refresh_every and batch_size must be at least 1",
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::invalid(format!("bad learning rate {}", self.learning_rate)));
        }
        self.mining.validate()?;
        self.eval_beam.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NegativeSource {
    Warmup,
    Refreshed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NegativeChain {
    pub chain: OrderedChain,
    pub source: NegativeSource,
}

/// Negative chains per question id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NegativePool {
    pub chains: BTreeMap<String, Vec<NegativeChain>>,
    pub pool_version: u64,
    /// Index generation the refreshed chains were scored with.
    pub model_version: Option<u64>,
    /// Questions that received fewer than the requested number of negatives.
    pub short: usize,
}

impl NegativePool {
    pub fn get(&self, question_id: &str) -> &[NegativeChain] {
        self.chains.get(question_id).map_or(&[], Vec::as_slice)
    }

    /// Every chain has the gold length and a passage set different from gold.
    pub fn validate(&self, golds: &[(String, OrderedChain)]) -> Result<()> {
        for (qid, gold) in golds {
            for neg in self.get(qid) {
                if neg.chain.len() != gold.len() {
                    return Err(Error::invalid(format!(
                        "negative for {qid} has {} hops, gold has {}",
                        neg.chain.len(),
                        gold.len()
                    )));
                }
                if neg.chain.same_set(gold) {
                    return Err(Error::invalid(format!("negative for {qid} equals the gold set")));
                }
            }
        }
        Ok(())
    }
}

/// Pair consecutive non-gold tf-idf hits for the question into chains:
/// `(h1, h2), (h2, h3), ...`.
pub fn mine_warmup_negatives(
    tfidf: &TfIdfModel,
    question: &QuestionRecord,
    gold: &OrderedChain,
    m: usize,
) -> Result<Vec<OrderedChain>> {
    if gold.len() != 2 {
        return Err(Error::invalid("warm-up negatives are built for two-hop chains"));
    }
    let gold_ids = gold.id_set();
    let needed = m + 1;
    let depth = needed + gold.len();
    let hits: Vec<String> = tfidf
        .search(&question.tokens(), depth)?
        .into_iter()
        .map(|h| h.id)
        .filter(|id| !gold_ids.contains(id.as_str()))
        .collect();
    let mut out = Vec::with_capacity(m);
    for pair in hits.windows(2) {
        if out.len() == m {
            break;
        }
        let chain = OrderedChain::new(pair.to_vec())?;
        if !chain.same_set(gold) {
            out.push(chain);
        }
    }
    if out.len() < m {
        return Err(Error::Infeasible(format!(
            "corpus too small for {m} warm-up negatives on question {:?}",
            question.id
        )));
    }
    Ok(out)
}

/// The `m` best beam chains whose passage set differs from gold. The flag is
/// set when fewer than `m` were found.
pub fn mine_with_retriever(
    retriever: &Retriever<'_>,
    question: &QuestionRecord,
    gold: &OrderedChain,
    cfg: &BeamConfig,
    m: usize,
) -> Result<(Vec<OrderedChain>, bool)> {
    let cfg = BeamConfig {
        chain_len: gold.len(),
        // the gold set can show up once per hop order
        return_top: cfg.return_top.max(m + 2),
        ..*cfg
    };
    let chains = retriever.retrieve(&question.tokens(), &cfg)?;
    let mut out = Vec::with_capacity(m);
    for c in chains {
        let chain = OrderedChain::new(c.hops)?;
        if !chain.same_set(gold) {
            out.push(chain);
            if out.len() == m {
                break;
            }
        }
    }
    let short = out.len() < m;
    Ok((out, short))
}

pub fn mine_hard_negative_chains(
    params: &EncoderParams,
    index: &VectorIndex,
    corpus: &Corpus,
    question: &QuestionRecord,
    gold: &OrderedChain,
    cfg: &BeamConfig,
    m: usize,
) -> Result<(Vec<OrderedChain>, bool)> {
    let retriever = Retriever::new(params, index, corpus)?;
    mine_with_retriever(&retriever, question, gold, cfg, m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub pool_version: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub dev_p_em: Option<f64>,
    pub pool_version: u64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: EncoderParams,
    /// Parameters just before the first refresh was applied, i.e. trained on
    /// warm-up negatives only. `None` if no refresh happened.
    pub warmup_params: Option<EncoderParams>,
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
    pub pool: NegativePool,
    pub refreshes: usize,
}

impl TrainOutcome {
    pub fn write_log(&self, path: impl AsRef<Path>) -> Result<()> {
        write_jsonl(path.as_ref(), self.steps.iter())
    }
}

struct Example<'q> {
    question: &'q QuestionRecord,
    gold: OrderedChain,
}

fn prepare<'q>(corpus: &Corpus, questions: &'q [QuestionRecord]) -> Result<Vec<Example<'q>>> {
    corpus.validate_questions(questions)?;
    questions
        .iter()
        .map(|q| {
            if !q.is_supervised() {
                return Err(Error::invalid(format!(
                    "training question {:?} needs exactly two distinct gold ids",
                    q.id
                )));
            }
            Ok(Example {
                question: q,
                gold: infer_hop_order(q, corpus)?.chain,
            })
        })
        .collect()
}

fn warmup_pool(corpus: &Corpus, examples: &[Example<'_>], m: usize) -> Result<NegativePool> {
    let tfidf = TfIdfModel::fit(corpus)?;
    let mined: Vec<(String, Vec<NegativeChain>)> = examples
        .par_iter()
        .map(|ex| {
            let negs = mine_warmup_negatives(&tfidf, ex.question, &ex.gold, m)?;
            Ok((
                ex.question.id.clone(),
                negs.into_iter()
                    .map(|chain| NegativeChain {
                        chain,
                        source: NegativeSource::Warmup,
                    })
                    .collect(),
            ))
        })
        .collect::<Result<_>>()?;
    Ok(NegativePool {
        chains: mined.into_iter().collect(),
        pool_version: 0,
        model_version: None,
        short: 0,
    })
}

/// Re-mine every question's negatives against `index`, which must embed `params`.
fn mine_pool(
    params: &EncoderParams,
    index: &VectorIndex,
    corpus: &Corpus,
    examples: &[Example<'_>],
    cfg: &TrainConfig,
    pool_version: u64,
) -> Result<NegativePool> {
    let retriever = Retriever::new(params, index, corpus)?;
    let mined: Vec<(String, Vec<NegativeChain>, bool)> = examples
        .par_iter()
        .map(|ex| {
            let (negs, short) = mine_with_retriever(&retriever, ex.question, &ex.gold, &cfg.mining, cfg.negatives)?;
            let negs = negs
                .into_iter()
                .map(|chain| NegativeChain {
                    chain,
                    source: NegativeSource::Refreshed,
                })
                .collect();
            Ok((ex.question.id.clone(), negs, short))
        })
        .collect::<Result<_>>()?;
    let short = mined.iter().filter(|m| m.2).count();
    if short > 0 {
        log::warn!("{short} questions received fewer than {} negatives", cfg.negatives);
    }
    let pool = NegativePool {
        chains: mined.into_iter().map(|(id, negs, _)| (id, negs)).collect(),
        pool_version,
        model_version: Some(index.model_version),
        short,
    };
    let golds: Vec<(String, OrderedChain)> = examples
        .iter()
        .map(|e| (e.question.id.clone(), e.gold.clone()))
        .collect();
    pool.validate(&golds)?;
    Ok(pool)
}

/// Dev P EM of `params` with a freshly built index.
pub fn dev_p_em(params: &EncoderParams, corpus: &Corpus, dev: &[QuestionRecord], beam: &BeamConfig) -> Result<f64> {
    let index = build_index(params, corpus)?;
    let run = Retriever::new(params, &index, corpus)?.retrieve_all(dev, beam)?;
    Ok(evaluate_run(&run, dev, corpus, beam.return_top)?.p_em)
}

struct Trainer<'a> {
    corpus: &'a Corpus,
    examples: Vec<Example<'a>>,
    dev: Option<&'a [QuestionRecord]>,
    cfg: &'a TrainConfig,
    checkpoint_dir: Option<PathBuf>,
    params: EncoderParams,
    grad: ParamGrad,
    rng: ChaCha8Rng,
    step: usize,
    steps: Vec<StepLog>,
    epochs: Vec<EpochLog>,
    warmup_params: Option<EncoderParams>,
    refreshes: usize,
}

impl<'a> Trainer<'a> {
    fn step_on(&mut self, batch: &[usize], pool: &NegativePool) -> Result<f64> {
        self.grad.clear();
        let scale = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        for &i in batch {
            let ex = &self.examples[i];
            let negs: Vec<OrderedChain> = pool.get(&ex.question.id).iter().map(|n| n.chain.clone()).collect();
            loss += scale
                * loss_and_gradient(
                    &self.params,
                    ex.question,
                    self.corpus,
                    &ex.gold,
                    &negs,
                    Some((&mut self.grad, scale)),
                )?;
        }
        self.step += 1;
        if !loss.is_finite() {
            return Err(Error::Divergence { step: self.step, loss });
        }
        if !self.params.apply_gradient(&self.grad, self.cfg.learning_rate)? {
            return Err(Error::Divergence { step: self.step, loss });
        }
        self.steps.push(StepLog {
            step: self.step,
            loss,
            pool_version: pool.pool_version,
        });
        Ok(loss)
    }

    fn end_epoch(&mut self, epoch: usize, losses: &[f64], pool_version: u64) -> Result<()> {
        let dev_p_em = match self.dev {
            Some(dev) if !dev.is_empty() => Some(dev_p_em(&self.params, self.corpus, dev, &self.cfg.eval_beam)?),
            _ => None,
        };
        let mean_loss = losses.iter().sum::<f64>() / losses.len().max(1) as f64;
        log::info!("epoch {epoch}: loss {mean_loss:.4} dev P EM {dev_p_em:?} pool v{pool_version}");
        self.epochs.push(EpochLog {
            epoch,
            mean_loss,
            dev_p_em,
            pool_version,
        });
        Ok(())
    }

    fn save_checkpoint(&self, params: &EncoderParams) -> Result<()> {
        if let Some(dir) = &self.checkpoint_dir {
            params.save(dir.join(format!("checkpoint-{:04}.bin", params.version)))?;
        }
        Ok(())
    }

    fn epoch_order(&mut self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.examples.len()).collect();
        order.shuffle(&mut self.rng);
        order
    }

    fn run_sequential(mut self, mut pool: NegativePool) -> Result<TrainOutcome> {
        let mut index: Option<VectorIndex> = None;
        for epoch in 0..self.cfg.epochs {
            let order = self.epoch_order();
            let mut losses = Vec::new();
            for batch in order.chunks(self.cfg.batch_size) {
                losses.push(self.step_on(batch, &pool)?);
                if self.step.is_multiple_of(self.cfg.refresh_every) {
                    if self.warmup_params.is_none() {
                        self.warmup_params = Some(self.params.clone());
                    }
                    self.params.version += 1;
                    let next = match &index {
                        None => build_index(&self.params, self.corpus)?,
                        Some(old) => refresh(old, &self.params, self.corpus)?,
                    };
                    debug_assert_eq!(next.model_version, self.params.version);
                    pool = mine_pool(
                        &self.params,
                        &next,
                        self.corpus,
                        &self.examples,
                        self.cfg,
                        pool.pool_version + 1,
                    )?;
                    index = Some(next);
                    self.refreshes += 1;
                    self.save_checkpoint(&self.params)?;
                }
            }
            self.end_epoch(epoch, &losses, pool.pool_version)?;
        }
        Ok(self.finish(pool))
    }

    fn run_concurrent(mut self, mut pool: NegativePool) -> Result<TrainOutcome> {
        // one slot: a snapshot taken while the refresher is busy replaces
        // nothing and is dropped, so at most one waits in memory
        let (snap_tx, snap_rx) = mpsc::sync_channel::<Arc<EncoderParams>>(1);
        let (pool_tx, pool_rx) = mpsc::channel::<Result<NegativePool>>();
        let corpus = self.corpus;
        let cfg = self.cfg;
        let examples: Vec<Example<'_>> = self
            .examples
            .iter()
            .map(|e| Example {
                question: e.question,
                gold: e.gold.clone(),
            })
            .collect();

        std::thread::scope(|scope| -> Result<TrainOutcome> {
            scope.spawn(move || {
                let mut version = 0u64;
                while let Ok(snap) = snap_rx.recv() {
                    version += 1;
                    let mined = build_index(&snap, corpus)
                        .and_then(|index| mine_pool(&snap, &index, corpus, &examples, cfg, version));
                    if pool_tx.send(mined).is_err() {
                        break;
                    }
                }
            });

            for epoch in 0..self.cfg.epochs {
                let order = self.epoch_order();
                let mut losses = Vec::new();
                for batch in order.chunks(self.cfg.batch_size) {
                    while let Ok(mined) = pool_rx.try_recv() {
                        pool = mined?;
                        self.refreshes += 1;
                    }
                    losses.push(self.step_on(batch, &pool)?);
                    if self.step.is_multiple_of(self.cfg.refresh_every) {
                        if self.warmup_params.is_none() {
                            self.warmup_params = Some(self.params.clone());
                        }
                        self.params.version += 1;
                        let snap = Arc::new(self.params.clone());
                        self.save_checkpoint(&snap)?;
                        match snap_tx.try_send(snap) {
                            Ok(()) | Err(TrySendError::Full(_)) => {}
                            Err(TrySendError::Disconnected(_)) => {
                                return Err(Error::invalid("negative refresher stopped unexpectedly"));
                            }
                        }
                    }
                }
                self.end_epoch(epoch, &losses, pool.pool_version)?;
            }
            drop(snap_tx);
            // drain whatever the refresher finished so its sends never block
            while let Ok(mined) = pool_rx.recv() {
                pool = mined?;
                self.refreshes += 1;
            }
            Ok(self.finish(pool))
        })
    }

    fn finish(self, pool: NegativePool) -> TrainOutcome {
        TrainOutcome {
            params: self.params,
            warmup_params: self.warmup_params,
            steps: self.steps,
            epochs: self.epochs,
            pool,
            refreshes: self.refreshes,
        }
    }
}

/// Train a dual encoder on supervised two-hop questions.
pub fn train(
    corpus: &Corpus,
    questions: &[QuestionRecord],
    dev: Option<&[QuestionRecord]>,
    encoder: &EncoderConfig,
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if questions.is_empty() {
        return Err(Error::invalid("no training questions"));
    }
    let examples = prepare(corpus, questions)?;
    if let Some(dev) = dev {
        corpus.validate_questions(dev)?;
    }
    let pool = warmup_pool(corpus, &examples, cfg.negatives)?;
    let params = EncoderParams::new(encoder, cfg.seed)?;
    let trainer = Trainer {
        corpus,
        examples,
        dev,
        cfg,
        checkpoint_dir: checkpoint_dir.map(Path::to_path_buf),
        grad: ParamGrad::zeros_like(&params),
        params,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x005e_ed0f_7a1e),
        step: 0,
        steps: Vec::new(),
        epochs: Vec::new(),
        warmup_params: None,
        refreshes: 0,
    };
    match cfg.mode {
        RefreshMode::SequentialRefresh => trainer.run_sequential(pool),
        RefreshMode::ConcurrentRefresh => trainer.run_concurrent(pool),
    }
}
