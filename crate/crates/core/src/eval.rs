//! Retrieval metrics over run files and hop-level diagnostics.
//!
//! All four metrics look at the union of passages in the top `top_chains`
//! chains of each question, except EM which only looks at the best chain:
//!
//! - AR: the answer string occurs in some retrieved passage
//! - PR: at least one gold passage was retrieved
//! - P EM: both gold passages were retrieved
//! - EM: the best chain holds both gold passages, in either order

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::beam::RunRecord;
use crate::corpus::{infer_hop_order, Corpus, QuestionRecord};
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::vindex::rank_cmp;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct QuestionMetrics {
    pub question_id: String,
    pub ar: bool,
    pub pr: bool,
    pub p_em: bool,
    pub em: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub ar: f64,
    pub pr: f64,
    pub p_em: f64,
    pub em: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalMetrics {
    pub ar: f64,
    pub pr: f64,
    pub p_em: f64,
    pub em: f64,
    pub per_question: Vec<QuestionMetrics>,
}

impl RetrievalMetrics {
    pub fn n(&self) -> usize {
        self.per_question.len()
    }

    pub fn summary(&self) -> MetricsSummary {
        MetricsSummary {
            ar: self.ar,
            pr: self.pr,
            p_em: self.p_em,
            em: self.em,
            n: self.n(),
        }
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let body = serde_json::to_string(&self.summary()).expect("summary serializes");
        std::fs::write(path, body + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        writeln!(w, "question_id,ar,pr,p_em,em").map_err(io)?;
        for q in &self.per_question {
            writeln!(
                w,
                "{},{},{},{},{}",
                q.question_id, q.ar as u8, q.pr as u8, q.p_em as u8, q.em as u8
            )
            .map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

fn index_run(run: &[RunRecord]) -> Result<HashMap<&str, &RunRecord>> {
    let mut by_id = HashMap::with_capacity(run.len());
    for r in run {
        if by_id.insert(r.question_id.as_str(), r).is_some() {
            return Err(Error::DuplicateId(r.question_id.clone()));
        }
    }
    Ok(by_id)
}

pub fn evaluate_run(
    run: &[RunRecord],
    questions: &[QuestionRecord],
    corpus: &Corpus,
    top_chains: usize,
) -> Result<RetrievalMetrics> {
    if questions.is_empty() {
        return Err(Error::invalid("no questions to evaluate"));
    }
    let by_id = index_run(run)?;
    let mut per_question = Vec::with_capacity(questions.len());
    for q in questions {
        if !q.is_supervised() {
            return Err(Error::invalid(format!(
                "question {:?} needs exactly two distinct gold ids",
                q.id
            )));
        }
        let rec = by_id
            .get(q.id.as_str())
            .ok_or_else(|| Error::invalid(format!("run has no entry for question {:?}", q.id)))?;
        let chains = &rec.chains[..rec.chains.len().min(top_chains)];
        let retrieved: BTreeSet<&str> = chains
            .iter()
            .flat_map(|c| c.hops.iter().map(String::as_str))
            .collect();
        let gold = q.gold_set();
        let found = gold.iter().filter(|g| retrieved.contains(*g)).count();
        let ar = retrieved.iter().any(|id| {
            corpus
                .get(id)
                .is_some_and(|p| p.contains_answer(&q.answer))
        });
        let em = match chains.first() {
            None => false,
            Some(top) if top.hops.len() != 2 => {
                return Err(Error::invalid(format!(
                    "EM needs two-hop chains; question {:?} has a {}-hop top chain",
                    q.id,
                    top.hops.len()
                )))
            }
            Some(top) => top.hops.iter().map(String::as_str).collect::<BTreeSet<_>>() == gold,
        };
        per_question.push(QuestionMetrics {
            question_id: q.id.clone(),
            ar,
            pr: found >= 1,
            p_em: found == gold.len(),
            em,
        });
    }
    let mean = |f: fn(&QuestionMetrics) -> bool| {
        per_question.iter().filter(|m| f(m)).count() as f64 / per_question.len() as f64
    };
    Ok(RetrievalMetrics {
        ar: mean(|m| m.ar),
        pr: mean(|m| m.pr),
        p_em: mean(|m| m.p_em),
        em: mean(|m| m.em),
        per_question,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HopReport {
    /// Questions where some top chain has the gold hop-1 passage first.
    pub hop1_acc: f64,
    /// Questions where some top chain has the gold hop-2 passage second.
    pub hop2_acc: f64,
    /// Mean Jaccard overlap between first-position and second-position passages.
    pub overlap: f64,
    pub n: usize,
    /// Questions whose hop order came from the overlap fallback.
    pub flagged: usize,
}

pub fn hop_report(
    run: &[RunRecord],
    questions: &[QuestionRecord],
    corpus: &Corpus,
    top_chains: usize,
) -> Result<HopReport> {
    if questions.is_empty() {
        return Err(Error::invalid("no questions to evaluate"));
    }
    let by_id = index_run(run)?;
    let (mut hop1, mut hop2, mut overlap, mut flagged) = (0usize, 0usize, 0.0, 0usize);
    for q in questions {
        let order = infer_hop_order(q, corpus)?;
        flagged += order.flagged as usize;
        let rec = by_id
            .get(q.id.as_str())
            .ok_or_else(|| Error::invalid(format!("run has no entry for question {:?}", q.id)))?;
        let chains = &rec.chains[..rec.chains.len().min(top_chains)];
        let (g1, g2) = (&order.chain.hops()[0], &order.chain.hops()[1]);
        let first: HashSet<&str> = chains.iter().filter_map(|c| c.hops.first()).map(String::as_str).collect();
        let second: HashSet<&str> = chains.iter().filter_map(|c| c.hops.get(1)).map(String::as_str).collect();
        hop1 += first.contains(g1.as_str()) as usize;
        hop2 += second.contains(g2.as_str()) as usize;
        let union = first.union(&second).count();
        if union > 0 {
            overlap += first.intersection(&second).count() as f64 / union as f64;
        }
    }
    let n = questions.len();
    Ok(HopReport {
        hop1_acc: hop1 as f64 / n as f64,
        hop2_acc: hop2 as f64 / n as f64,
        overlap: overlap / n as f64,
        n,
        flagged,
    })
}

/// Label of an exported embedding row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingLabel {
    Q1,
    Q2,
    P1,
    P2,
    Neg,
}

impl EmbeddingLabel {
    pub fn as_str(&self) -> &'static str {
        match self {
            EmbeddingLabel::Q1 => "Q1",
            EmbeddingLabel::Q2 => "Q2",
            EmbeddingLabel::P1 => "P1",
            EmbeddingLabel::P2 => "P2",
            EmbeddingLabel::Neg => "NEG",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRow {
    pub label: EmbeddingLabel,
    pub question_id: String,
    pub id: String,
    pub values: Vec<f64>,
}

/// Labeled vectors for offline projection: per question the bare query (Q1),
/// the query composed with gold hop 1 (Q2), both gold passages (P1, P2) and
/// the `negatives` highest-scoring non-gold passages for Q1 (NEG).
pub fn embedding_rows(
    params: &EncoderParams,
    corpus: &Corpus,
    questions: &[QuestionRecord],
    negatives: usize,
) -> Result<Vec<EmbeddingRow>> {
    let passage_vecs: Vec<Vec<f64>> = corpus.passages().iter().map(|p| params.encode_passage(p).0).collect();
    let mut rows = Vec::new();
    for q in questions {
        let order = infer_hop_order(q, corpus)?;
        let hop1 = corpus.require(&order.chain.hops()[0])?;
        let hop2 = corpus.require(&order.chain.hops()[1])?;
        let tokens = q.tokens();
        let q1 = params.encode_composed(&tokens, &[]);
        let q2 = params.encode_composed(&tokens, &[hop1]);
        let mut push = |label, id: &str, values: Vec<f64>| {
            rows.push(EmbeddingRow {
                label,
                question_id: q.id.clone(),
                id: id.to_string(),
                values,
            })
        };
        push(EmbeddingLabel::Q1, &q.id, q1.0.clone());
        push(EmbeddingLabel::Q2, &q.id, q2.0);
        push(EmbeddingLabel::P1, &hop1.id, params.encode_passage(hop1).0);
        push(EmbeddingLabel::P2, &hop2.id, params.encode_passage(hop2).0);

        let gold = q.gold_set();
        let mut ranked: Vec<(usize, f64)> = passage_vecs
            .iter()
            .enumerate()
            .filter(|(i, _)| !gold.contains(corpus.passage(*i).id.as_str()))
            .map(|(i, v)| (i, crate::encoder::dot(&q1.0, v)))
            .collect();
        ranked.sort_by(|a, b| rank_cmp(a.1, &corpus.passage(a.0).id, b.1, &corpus.passage(b.0).id));
        for &(i, _) in ranked.iter().take(negatives) {
            push(EmbeddingLabel::Neg, &corpus.passage(i).id, passage_vecs[i].clone());
        }
    }
    Ok(rows)
}

/// Tab-separated: label, question id, row id, then the vector.
pub fn export_embeddings(
    params: &EncoderParams,
    corpus: &Corpus,
    questions: &[QuestionRecord],
    negatives: usize,
    path: impl AsRef<Path>,
) -> Result<usize> {
    let path = path.as_ref();
    let rows = embedding_rows(params, corpus, questions, negatives)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    for r in &rows {
        write!(w, "{}\t{}\t{}", r.label.as_str(), r.question_id, r.id).map_err(io)?;
        for v in &r.values {
            write!(w, "\t{v}").map_err(io)?;
        }
        writeln!(w).map_err(io)?;
    }
    w.flush().map_err(io)?;
    Ok(rows.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::beam::ScoredChain;
    use crate::corpus::Passage;

    fn corpus() -> Corpus {
        Corpus::from_passages(vec![
            Passage::new("A", "Alpha", "alpha links to bravo"),
            Passage::new("B", "Bravo", "bravo answer zulu"),
            Passage::new("C", "Charlie", "charlie"),
            Passage::new("D", "Delta", "delta"),
        ])
        .unwrap()
    }

    fn question(id: &str) -> QuestionRecord {
        QuestionRecord {
            id: id.into(),
            text: "what about alpha".into(),
            answer: "zulu".into(),
            gold_ids: vec!["A".into(), "B".into()],
            qtype: None,
        }
    }

    fn chain(hops: &[&str]) -> ScoredChain {
        ScoredChain {
            hops: hops.iter().map(|s| s.to_string()).collect(),
            step_scores: vec![0.0; hops.len()],
            score: 0.0,
        }
    }

    fn run(id: &str, chains: &[&[&str]]) -> RunRecord {
        RunRecord {
            question_id: id.into(),
            chains: chains.iter().map(|c| chain(c)).collect(),
        }
    }

    #[test]
    fn gold_top_chain_in_either_order() {
        for hops in [["A", "B"], ["B", "A"]] {
            let m = evaluate_run(&[run("q", &[&hops])], &[question("q")], &corpus(), 10).unwrap();
            assert_eq!((m.ar, m.pr, m.p_em, m.em), (1.0, 1.0, 1.0, 1.0));
        }
    }

    #[test]
    fn split_gold_counts_for_p_em_only() {
        let m = evaluate_run(&[run("q", &[&["A", "C"], &["B", "D"]])], &[question("q")], &corpus(), 10).unwrap();
        assert_eq!((m.p_em, m.em), (1.0, 0.0));
    }

    #[test]
    fn mean_over_questions() {
        let r = [run("q1", &[&["A", "B"]]), run("q2", &[&["C", "D"]])];
        let m = evaluate_run(&r, &[question("q1"), question("q2")], &corpus(), 10).unwrap();
        assert_eq!(m.em, 0.5);
        assert_eq!(m.ar, 0.5);
    }

    #[test]
    fn missing_question_and_bad_chain_length() {
        assert!(evaluate_run(&[], &[question("q")], &corpus(), 10).is_err());
        assert!(evaluate_run(&[run("q", &[&["A", "B", "C"]])], &[question("q")], &corpus(), 10).is_err());
    }

    #[test]
    fn chains_beyond_cutoff_are_ignored() {
        let r = [run("q", &[&["C", "D"], &["A", "B"]])];
        let m = evaluate_run(&r, &[question("q")], &corpus(), 1).unwrap();
        assert_eq!((m.pr, m.p_em), (0.0, 0.0));
    }

    #[test]
    fn hop_report_extremes() {
        let r = [run("q", &[&["A", "B"], &["A", "B"]])];
        let h = hop_report(&r, &[question("q")], &corpus(), 10).unwrap();
        assert_eq!((h.hop1_acc, h.hop2_acc, h.overlap), (1.0, 1.0, 0.0));

        let r = [run("q", &[&["C", "D"], &["D", "C"]])];
        let h = hop_report(&r, &[question("q")], &corpus(), 10).unwrap();
        assert_eq!((h.hop1_acc, h.hop2_acc, h.overlap), (0.0, 0.0, 1.0));
    }

    #[test]
    fn metric_files() {
        let m = evaluate_run(&[run("q", &[&["A", "B"]])], &[question("q")], &corpus(), 10).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let json = dir.path().join("m.json");
        m.write_json(&json).unwrap();
        let back: MetricsSummary = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
        assert_eq!(back, m.summary());
        let csv = dir.path().join("m.csv");
        m.write_csv(&csv).unwrap();
        assert_eq!(std::fs::read_to_string(&csv).unwrap(), "question_id,ar,pr,p_em,em\nq,1,1,1,1\n");
    }
}
