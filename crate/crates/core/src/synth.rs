//! Synthetic two-hop corpora.
//!
//! Each chain has a question entity `e1`, a bridge entity `e2` and an answer.
//! The hop-1 passage holds `e1` and `e2`, the hop-2 passage holds `e2` and the
//! answer, and the question holds `e1` plus a few topic words. Distractor
//! passages repeat the topic words but never the bridge. With
//! `bridge_overlap = 0` the hop-2 passage shares no token with its question,
//! so it can only be reached through the bridge entity in hop 1.
//!
//! Each chain also asks about one of `relations` attributes: the question
//! holds `ask{k}` and the hop-2 passage holds the different token `attr{k}`.
//! Term matching cannot connect the two; a trained encoder can.

use std::collections::HashSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, Corpus, Passage, QuestionRecord};
use crate::error::{Error, Result};
use crate::tfidf::TfIdfModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub num_chains: usize,
    /// Of `num_chains`, how many go to the dev split (the rest are train).
    pub dev_chains: usize,
    pub distractors_per_chain: usize,
    /// Number of distinct surface words.
    pub vocab_size: usize,
    pub tokens_per_passage: usize,
    pub topic_words: usize,
    /// Number of attribute relations; 0 disables the `ask`/`attr` tokens.
    pub relations: usize,
    /// Fraction of the hop-2 filler words drawn from the question's words.
    pub bridge_overlap: f64,
    /// Depth of the generation-time tf-idf check on hop-2 passages.
    pub tfidf_check_depth: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_chains: 200,
            dev_chains: 50,
            distractors_per_chain: 3,
            vocab_size: 300,
            tokens_per_passage: 6,
            topic_words: 1,
            relations: 8,
            bridge_overlap: 0.0,
            tfidf_check_depth: 20,
            seed: 13,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub corpus: Corpus,
    pub train: Vec<QuestionRecord>,
    pub dev: Vec<QuestionRecord>,
    /// Constructed (hop 1, hop 2) ids per question, train then dev.
    pub chains: Vec<(String, String, String)>,
}

impl SynthData {
    pub fn all_questions(&self) -> Vec<QuestionRecord> {
        self.train.iter().chain(&self.dev).cloned().collect()
    }
}

fn word(i: usize) -> String {
    format!("w{i:05}")
}

fn attr_word(k: usize) -> String {
    format!("attr{k:02}")
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        let infeasible = |m: String| Err(Error::Infeasible(m));
        if self.num_chains == 0 {
            return infeasible("num_chains must be positive".into());
        }
        if self.dev_chains > self.num_chains {
            return infeasible(format!(
                "dev_chains {} exceeds num_chains {}",
                self.dev_chains, self.num_chains
            ));
        }
        if !(0.0..=1.0).contains(&self.bridge_overlap) {
            return infeasible(format!("bridge_overlap {} outside [0, 1]", self.bridge_overlap));
        }
        if self.tokens_per_passage < self.topic_words + 3 {
            return infeasible(format!(
                "tokens_per_passage {} too small for {} topic words plus entities",
                self.tokens_per_passage, self.topic_words
            ));
        }
        // hop-2 fillers must avoid the question's topic words and still have
        // room to vary between chains
        let min_vocab = 2 * self.tokens_per_passage + self.topic_words;
        if self.vocab_size < min_vocab {
            return infeasible(format!(
                "vocab_size {} too small, need at least {min_vocab}",
                self.vocab_size
            ));
        }
        Ok(())
    }
}

/// Generate a corpus and train/dev questions. Deterministic under `cfg.seed`.
pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let vocab: Vec<String> = (0..cfg.vocab_size).map(word).collect();
    let fillers = |rng: &mut ChaCha8Rng, n: usize, avoid: &HashSet<String>| -> Vec<String> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let w = vocab.choose(rng).unwrap();
            if !avoid.contains(w) {
                out.push(w.clone());
            }
        }
        out
    };

    // (title, body tokens, chain, role)
    let mut drafts: Vec<(String, Vec<String>)> = Vec::new();
    let mut plans = Vec::with_capacity(cfg.num_chains);
    for c in 0..cfg.num_chains {
        let e1 = format!("ent{:05}", 2 * c);
        let e2 = format!("ent{:05}", 2 * c + 1);
        let answer = format!("ans{c:05}");
        let topic: Vec<String> = vocab
            .choose_multiple(&mut rng, cfg.topic_words)
            .cloned()
            .collect();
        let mut q_words: HashSet<String> = topic.iter().cloned().collect();
        q_words.insert(e1.clone());

        // the body mentions the bridge twice
        let mut hop1 = vec![e1.clone(), e2.clone(), e2.clone()];
        hop1.extend(fillers(&mut rng, cfg.tokens_per_passage - 3, &HashSet::new()));
        hop1.shuffle(&mut rng);

        let relation = (cfg.relations > 0).then(|| rng.random_range(0..cfg.relations));
        let mut hop2 = vec![e2.clone(), answer.clone()];
        if let Some(k) = relation {
            hop2.push(attr_word(k));
        }
        let room = cfg.tokens_per_passage - hop2.len();
        let shared = ((cfg.bridge_overlap * room as f64).round() as usize).min(room);
        let q_list: Vec<String> = {
            let mut v: Vec<String> = q_words.iter().cloned().collect();
            v.sort();
            v
        };
        for _ in 0..shared {
            hop2.push(q_list.choose(&mut rng).unwrap().clone());
        }
        hop2.extend(fillers(&mut rng, room - shared, &q_words));
        hop2[2..].shuffle(&mut rng);

        let h1 = drafts.len();
        drafts.push((e1.clone(), hop1));
        let h2 = drafts.len();
        drafts.push((e2.clone(), hop2));
        for _ in 0..cfg.distractors_per_chain {
            let mut d = topic.clone();
            let avoid: HashSet<String> = [e1.clone(), e2.clone()].into_iter().collect();
            if cfg.relations > 0 {
                d.push(attr_word(rng.random_range(0..cfg.relations)));
            }
            let n_rest = cfg.tokens_per_passage - d.len();
            d.extend(fillers(&mut rng, n_rest, &avoid));
            d.shuffle(&mut rng);
            let title = word(rng.random_range(0..cfg.vocab_size));
            drafts.push((title, d));
        }
        let mut q_text = vec![e1.clone()];
        q_text.extend(topic);
        if let Some(k) = relation {
            q_text.push(format!("ask{k:02}"));
        }
        q_text.shuffle(&mut rng);
        plans.push((q_text.join(" "), answer, h1, h2));
    }

    // shuffle id assignment so gold passages are not systematically first
    let mut ids: Vec<usize> = (0..drafts.len()).collect();
    ids.shuffle(&mut rng);
    let pid = |draft: usize| format!("p{:06}", ids[draft]);
    let mut passages: Vec<Passage> = drafts
        .iter()
        .enumerate()
        .map(|(i, (title, body))| Passage::new(pid(i), title.clone(), body.join(" ")))
        .collect();
    passages.sort_by(|a, b| a.id.cmp(&b.id));
    let corpus = Corpus::from_passages(passages)?;

    let n_train = cfg.num_chains - cfg.dev_chains;
    let mut train = Vec::with_capacity(n_train);
    let mut dev = Vec::with_capacity(cfg.dev_chains);
    let mut chains = Vec::with_capacity(cfg.num_chains);
    for (c, (text, answer, h1, h2)) in plans.into_iter().enumerate() {
        let q = QuestionRecord {
            id: format!("q{c:05}"),
            text,
            answer,
            gold_ids: vec![pid(h1), pid(h2)],
            qtype: Some("bridge".into()),
        };
        chains.push((q.id.clone(), pid(h1), pid(h2)));
        if c < n_train {
            train.push(q);
        } else {
            dev.push(q);
        }
    }
    let data = SynthData {
        corpus,
        train,
        dev,
        chains,
    };
    if cfg.bridge_overlap == 0.0 {
        check_hop2_unreachable(&data, cfg.tfidf_check_depth)?;
    }
    Ok(data)
}

/// The hop-2 passage must share no token with its question, and a tf-idf search
/// on the raw question must not surface it within `depth` hits whenever the
/// corpus is larger than `depth`.
fn check_hop2_unreachable(data: &SynthData, depth: usize) -> Result<()> {
    let model = TfIdfModel::fit(&data.corpus)?;
    for (q, (_, _, hop2)) in data.all_questions().iter().zip(&data.chains) {
        let q_tokens: HashSet<String> = tokenize(&q.text).into_iter().collect();
        let p = data.corpus.require(hop2)?;
        if p.tokens.iter().any(|t| q_tokens.contains(t)) {
            return Err(Error::Infeasible(format!(
                "hop-2 passage {hop2} shares a token with question {}",
                q.id
            )));
        }
        if data.corpus.len() > depth {
            let hits = model.search(&q.tokens(), depth)?;
            if hits.iter().any(|h| &h.id == hop2) {
                return Err(Error::Infeasible(format!(
                    "tf-idf ranks hop-2 passage {hop2} within the top {depth} for question {}; \
                     increase distractors or topic words",
                    q.id
                )));
            }
        }
    }
    Ok(())
}
