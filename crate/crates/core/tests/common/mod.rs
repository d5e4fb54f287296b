#![allow(dead_code)]

use hopchain::encoder::InitScheme;
use hopchain::{Corpus, EncoderConfig, EncoderParams, Passage, QuestionRecord, ScoreMode};
use rand::seq::SliceRandom;
use rand::Rng;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Score descending, then ids ascending.
pub fn rank<T: Ord>(items: &mut [(T, f64)]) {
    items.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
}

fn random_words(rng: &mut impl Rng, vocab: usize, n: usize) -> String {
    (0..n)
        .map(|_| format!("t{}", rng.random_range(0..vocab)))
        .collect::<Vec<_>>()
        .join(" ")
}

/// `n` passages with random words; ids are zero-padded but stored shuffled.
pub fn random_corpus(rng: &mut impl Rng, n: usize, vocab: usize) -> Corpus {
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(rng);
    let passages = ids
        .into_iter()
        .map(|i| {
            let len = rng.random_range(2..8);
            Passage::new(format!("p{i:04}"), format!("title{i}"), random_words(rng, vocab, len))
        })
        .collect();
    Corpus::from_passages(passages).unwrap()
}

pub fn random_question(rng: &mut impl Rng, vocab: usize) -> QuestionRecord {
    let len = rng.random_range(1..6);
    QuestionRecord {
        id: "q".into(),
        text: random_words(rng, vocab, len),
        answer: String::new(),
        gold_ids: Vec::new(),
        qtype: None,
    }
}

pub fn random_params(seed: u64, hash_dim: usize, emb_dim: usize) -> EncoderParams {
    let cfg = EncoderConfig {
        hash_dim,
        emb_dim,
        init: InitScheme::Independent,
        init_std: Some(1.0),
        ..EncoderConfig::default()
    };
    EncoderParams::new(&cfg, seed).unwrap()
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Every ordered pair of distinct passages with its two-hop chain score.
/// Softmax mode normalizes each hop over every passage the hop could pick.
pub fn all_pairs(
    params: &EncoderParams,
    corpus: &Corpus,
    question: &QuestionRecord,
    mode: ScoreMode,
) -> Vec<((String, String), f64)> {
    let tokens = question.tokens();
    let passages = corpus.passages();
    let pvecs: Vec<Vec<f64>> = passages.iter().map(|p| params.encode_passage(p).0).collect();
    let q1 = params.encode_composed(&tokens, &[]).0;
    let s1: Vec<f64> = pvecs.iter().map(|v| dot(&q1, v)).collect();
    let lse1 = log_sum_exp(&s1);
    let mut out = Vec::new();
    for (i, p1) in passages.iter().enumerate() {
        let q2 = params.encode_composed(&tokens, &[p1]).0;
        let s2: Vec<f64> = pvecs.iter().map(|v| dot(&q2, v)).collect();
        let others: Vec<f64> = s2.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, s)| *s).collect();
        let lse2 = log_sum_exp(&others);
        for (j, p2) in passages.iter().enumerate() {
            if i == j {
                continue;
            }
            let score = match mode {
                ScoreMode::RawSum => s1[i] + s2[j],
                ScoreMode::PerStepSoftmax => (s1[i] - lse1) + (s2[j] - lse2),
            };
            out.push(((p1.id.clone(), p2.id.clone()), score));
        }
    }
    rank(&mut out);
    out
}
