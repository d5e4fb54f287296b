//! Passages, questions and gold-chain ordering.
//!
//! Corpora and question sets are read from JSONL files, one object per line.
//! Passages are tokenized once at load time and the tokens cached alongside the
//! raw text.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lowercase and split on runs of non-alphanumeric characters.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(|s| s.to_lowercase())
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Passage {
    pub id: String,
    pub title: String,
    pub text: String,
    pub tokens: Vec<String>,
}

impl Passage {
    pub fn new(id: impl Into<String>, title: impl Into<String>, text: impl Into<String>) -> Self {
        let id = id.into();
        let title = title.into();
        let text = text.into();
        let tokens = tokenize(&format!("{title} {text}"));
        Passage {
            id,
            title,
            text,
            tokens,
        }
    }

    /// Title and body joined the way answer matching sees them.
    pub fn full_text(&self) -> String {
        format!("{} {}", self.title, self.text)
    }

    /// Case-insensitive substring test against title and body.
    pub fn contains_answer(&self, answer: &str) -> bool {
        contains_ci(&self.full_text(), answer)
    }
}

pub(crate) fn contains_ci(haystack: &str, needle: &str) -> bool {
    !needle.is_empty() && haystack.to_lowercase().contains(&needle.to_lowercase())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct PassageRecord {
    id: String,
    title: String,
    text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub id: String,
    #[serde(rename = "question")]
    pub text: String,
    #[serde(default)]
    pub answer: String,
    #[serde(default)]
    pub gold_ids: Vec<String>,
    #[serde(rename = "type", default, skip_serializing_if = "Option::is_none")]
    pub qtype: Option<String>,
}

impl QuestionRecord {
    pub fn tokens(&self) -> Vec<String> {
        tokenize(&self.text)
    }

    /// Supervised records carry exactly two distinct gold passages.
    pub fn is_supervised(&self) -> bool {
        self.gold_ids.len() == 2 && self.gold_ids[0] != self.gold_ids[1]
    }

    pub fn gold_set(&self) -> BTreeSet<&str> {
        self.gold_ids.iter().map(String::as_str).collect()
    }
}

/// Ordered sequence of passage ids with no repeats.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct OrderedChain(Vec<String>);

impl OrderedChain {
    pub fn new(hops: Vec<String>) -> Result<Self> {
        let mut seen = HashSet::new();
        for h in &hops {
            if !seen.insert(h.as_str()) {
                return Err(Error::invalid(format!("chain repeats passage {h:?}")));
            }
        }
        Ok(OrderedChain(hops))
    }

    pub fn hops(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn id_set(&self) -> BTreeSet<&str> {
        self.0.iter().map(String::as_str).collect()
    }

    /// True when both chains cover the same passages, in any order.
    pub fn same_set(&self, other: &OrderedChain) -> bool {
        self.id_set() == other.id_set()
    }
}

#[derive(Debug, Clone, Default)]
pub struct Corpus {
    passages: Vec<Passage>,
    by_id: HashMap<String, usize>,
}

impl Corpus {
    pub fn from_passages(passages: Vec<Passage>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(passages.len());
        for (i, p) in passages.iter().enumerate() {
            if by_id.insert(p.id.clone(), i).is_some() {
                return Err(Error::DuplicateId(p.id.clone()));
            }
        }
        Ok(Corpus { passages, by_id })
    }

    pub fn len(&self) -> usize {
        self.passages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }

    pub fn passages(&self) -> &[Passage] {
        &self.passages
    }

    pub fn get(&self, id: &str) -> Option<&Passage> {
        self.by_id.get(id).map(|&i| &self.passages[i])
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    pub fn passage(&self, idx: usize) -> &Passage {
        &self.passages[idx]
    }

    pub fn require(&self, id: &str) -> Result<&Passage> {
        self.get(id)
            .ok_or_else(|| Error::invalid(format!("unknown passage {id:?}")))
    }

    /// Check that every question's gold ids exist in the corpus.
    pub fn validate_questions(&self, questions: &[QuestionRecord]) -> Result<()> {
        for q in questions {
            for g in &q.gold_ids {
                if self.get(g).is_none() {
                    return Err(Error::UnknownPassage {
                        question: q.id.clone(),
                        passage: g.clone(),
                    });
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn read_jsonl<T, F>(path: &Path, mut f: F) -> Result<()>
where
    T: for<'de> Deserialize<'de>,
    F: FnMut(T) -> Result<()>,
{
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: T = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        f(rec)?;
    }
    Ok(())
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let mut passages = Vec::new();
    read_jsonl(path.as_ref(), |r: PassageRecord| {
        passages.push(Passage::new(r.id, r.title, r.text));
        Ok(())
    })?;
    Corpus::from_passages(passages)
}

pub fn load_questions(path: impl AsRef<Path>) -> Result<Vec<QuestionRecord>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    read_jsonl(path.as_ref(), |q: QuestionRecord| {
        if !seen.insert(q.id.clone()) {
            return Err(Error::DuplicateId(q.id));
        }
        out.push(q);
        Ok(())
    })?;
    Ok(out)
}

pub fn write_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let records = corpus.passages().iter().map(|p| PassageRecord {
        id: p.id.clone(),
        title: p.title.clone(),
        text: p.text.clone(),
    });
    write_jsonl(path.as_ref(), records)
}

pub fn write_questions(questions: &[QuestionRecord], path: impl AsRef<Path>) -> Result<()> {
    write_jsonl(path.as_ref(), questions.iter())
}

pub(crate) fn write_jsonl<T: Serialize>(
    path: &Path,
    records: impl IntoIterator<Item = T>,
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(&r).expect("records serialize");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Result of ordering a gold pair. `flagged` is set when neither passage
/// contains the answer and the order came from the overlap fallback alone.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HopOrder {
    pub chain: OrderedChain,
    pub flagged: bool,
}

/// Order an unordered gold pair into (hop 1, hop 2).
///
/// The passage containing the answer is hop 2. When both contain it, a passage
/// whose title appears in the question is hop 1. Remaining ties go to larger
/// question-token overlap as hop 1, then ascending id.
pub fn infer_hop_order(q: &QuestionRecord, corpus: &Corpus) -> Result<HopOrder> {
    if !q.is_supervised() {
        return Err(Error::invalid(format!(
            "question {:?} needs exactly two distinct gold ids, has {}",
            q.id,
            q.gold_ids.len()
        )));
    }
    if q.answer.is_empty() {
        return Err(Error::invalid(format!("question {:?} has no answer", q.id)));
    }
    let lookup = |id: &String| {
        corpus.get(id).ok_or_else(|| Error::UnknownPassage {
            question: q.id.clone(),
            passage: id.clone(),
        })
    };
    let a = lookup(&q.gold_ids[0])?;
    let b = lookup(&q.gold_ids[1])?;

    let ordered = |first: &Passage, second: &Passage| {
        OrderedChain(vec![first.id.clone(), second.id.clone()])
    };

    let (a_ans, b_ans) = (a.contains_answer(&q.answer), b.contains_answer(&q.answer));
    match (a_ans, b_ans) {
        (true, false) => {
            return Ok(HopOrder {
                chain: ordered(b, a),
                flagged: false,
            })
        }
        (false, true) => {
            return Ok(HopOrder {
                chain: ordered(a, b),
                flagged: false,
            })
        }
        (true, true) => {
            let title_hit = |p: &Passage| !p.title.trim().is_empty() && contains_ci(&q.text, &p.title);
            match (title_hit(a), title_hit(b)) {
                (true, false) => {
                    return Ok(HopOrder {
                        chain: ordered(a, b),
                        flagged: false,
                    })
                }
                (false, true) => {
                    return Ok(HopOrder {
                        chain: ordered(b, a),
                        flagged: false,
                    })
                }
                _ => {}
            }
        }
        (false, false) => {}
    }

    let q_tokens: HashSet<String> = q.tokens().into_iter().collect();
    let overlap = |p: &Passage| {
        p.tokens
            .iter()
            .collect::<HashSet<_>>()
            .into_iter()
            .filter(|t| q_tokens.contains(*t))
            .count()
    };
    let (oa, ob) = (overlap(a), overlap(b));
    let a_first = oa > ob || (oa == ob && a.id < b.id);
    let chain = if a_first { ordered(a, b) } else { ordered(b, a) };
    Ok(HopOrder {
        chain,
        flagged: !a_ans && !b_ans,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(gold: [&str; 2], question: &str, answer: &str) -> QuestionRecord {
        QuestionRecord {
            id: "q".into(),
            text: question.into(),
            answer: answer.into(),
            gold_ids: gold.iter().map(|s| s.to_string()).collect(),
            qtype: None,
        }
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("Ralph Hefferline"), vec!["ralph", "hefferline"]);
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("co-wrote a film."), vec!["co", "wrote", "a", "film"]);
        assert_eq!(tokenize("[sep]"), vec!["sep"]);
    }

    #[test]
    fn tokenize_is_idempotent() {
        let t = tokenize("Gestalt Therapy, co-written by Ralph (1951)!");
        assert_eq!(tokenize(&t.join(" ")), t);
    }

    #[test]
    fn load_corpus_and_duplicate_ids() {
        let dir = tempfile::tempdir().unwrap();
        let ok = dir.path().join("ok.jsonl");
        let mut f = File::create(&ok).unwrap();
        writeln!(f, r#"{{"id":"a","title":"A","text":"alpha"}}"#).unwrap();
        writeln!(f, r#"{{"id":"b","title":"B","text":"beta"}}"#).unwrap();
        drop(f);
        let c = load_corpus(&ok).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.get("b").unwrap().tokens, vec!["b", "beta"]);

        let dup = dir.path().join("dup.jsonl");
        let mut f = File::create(&dup).unwrap();
        writeln!(f, r#"{{"id":"a","title":"A","text":"alpha"}}"#).unwrap();
        writeln!(f, r#"{{"id":"a","title":"A2","text":"alpha"}}"#).unwrap();
        drop(f);
        let err = load_corpus(&dup).unwrap_err();
        assert!(err.to_string().contains("duplicate id"), "{err}");
    }

    #[test]
    fn malformed_line_names_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.jsonl");
        let mut f = File::create(&p).unwrap();
        writeln!(f, r#"{{"id":"a","title":"A","text":"alpha"}}"#).unwrap();
        writeln!(f, r#"{{"id":"b","title":"#).unwrap();
        drop(f);
        match load_corpus(&p).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn questions_round_trip_and_validate() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("q.jsonl");
        let mut f = File::create(&p).unwrap();
        writeln!(
            f,
            r#"{{"id":"q1","question":"who?","answer":"x","gold_ids":["a","z"],"type":"bridge"}}"#
        )
        .unwrap();
        drop(f);
        let qs = load_questions(&p).unwrap();
        assert_eq!(qs[0].qtype.as_deref(), Some("bridge"));
        let corpus = Corpus::from_passages(vec![Passage::new("a", "A", "x")]).unwrap();
        assert!(matches!(
            corpus.validate_questions(&qs),
            Err(Error::UnknownPassage { .. })
        ));

        let out = dir.path().join("q2.jsonl");
        write_questions(&qs, &out).unwrap();
        assert_eq!(load_questions(&out).unwrap(), qs);
    }

    fn corpus(ps: &[(&str, &str, &str)]) -> Corpus {
        Corpus::from_passages(ps.iter().map(|(i, t, x)| Passage::new(*i, *t, *x)).collect()).unwrap()
    }

    #[test]
    fn answer_passage_is_second_hop() {
        let c = corpus(&[("A", "Alpha", "mentions bravo"), ("B", "Bravo", "the answer is zulu")]);
        for gold in [["A", "B"], ["B", "A"]] {
            let h = infer_hop_order(&q(gold, "what of alpha?", "Zulu"), &c).unwrap();
            assert_eq!(h.chain.hops(), ["A", "B"]);
            assert!(!h.flagged);
        }
    }

    #[test]
    fn title_in_question_breaks_answer_tie() {
        let c = corpus(&[("A", "Alpha", "zulu one"), ("B", "Bravo", "zulu two")]);
        let h = infer_hop_order(&q(["B", "A"], "tell me about alpha", "zulu"), &c).unwrap();
        assert_eq!(h.chain.hops(), ["A", "B"]);
        let h = infer_hop_order(&q(["A", "B"], "tell me about bravo", "zulu"), &c).unwrap();
        assert_eq!(h.chain.hops(), ["B", "A"]);
    }

    #[test]
    fn overlap_then_id_breaks_remaining_ties() {
        // both contain the answer, no title in the question; A shares
        // {red, fox} with the question, B shares {red}
        let c = corpus(&[("A", "T1", "zulu red fox"), ("B", "T2", "zulu red")]);
        let h = infer_hop_order(&q(["B", "A"], "red fox jumps", "zulu"), &c).unwrap();
        assert_eq!(h.chain.hops(), ["A", "B"]);
        // equal overlap falls back to ascending id
        let c = corpus(&[("A", "T1", "zulu red"), ("B", "T2", "zulu red")]);
        let h = infer_hop_order(&q(["B", "A"], "red fox", "zulu"), &c).unwrap();
        assert_eq!(h.chain.hops(), ["A", "B"]);
    }

    #[test]
    fn missing_answer_falls_back_and_flags() {
        let c = corpus(&[("A", "T1", "red"), ("B", "T2", "red fox")]);
        let h = infer_hop_order(&q(["A", "B"], "red fox", "yes"), &c).unwrap();
        assert_eq!(h.chain.hops(), ["B", "A"]);
        assert!(h.flagged);
    }

    #[test]
    fn rejects_bad_gold_sets() {
        let c = corpus(&[("A", "T1", "x")]);
        let mut rec = q(["A", "A"], "x", "x");
        assert!(infer_hop_order(&rec, &c).is_err());
        rec.gold_ids.pop();
        assert!(infer_hop_order(&rec, &c).is_err());
    }

    #[test]
    fn chain_rejects_repeats() {
        assert!(OrderedChain::new(vec!["a".into(), "a".into()]).is_err());
        let c1 = OrderedChain::new(vec!["a".into(), "b".into()]).unwrap();
        let c2 = OrderedChain::new(vec!["b".into(), "a".into()]).unwrap();
        assert!(c1.same_set(&c2));
    }
}
