use hopchain::eval::{embedding_rows, export_embeddings};
use hopchain::{
    evaluate_run, hop_report, Corpus, EncoderConfig, EncoderParams, Passage, QuestionRecord, RunRecord, ScoredChain,
};
use proptest::prelude::*;

fn corpus() -> Corpus {
    Corpus::from_passages(vec![
        Passage::new("a1", "alice", "alice was born in bergen"),
        Passage::new("a2", "bergen", "bergen is a port with rain"),
        Passage::new("b1", "bob", "bob studied in oslo"),
        Passage::new("b2", "oslo", "oslo is the capital city"),
        Passage::new("x", "noise", "nothing to see here"),
    ])
    .unwrap()
}

fn q(id: &str, text: &str, answer: &str, gold: [&str; 2]) -> QuestionRecord {
    QuestionRecord {
        id: id.into(),
        text: text.into(),
        answer: answer.into(),
        gold_ids: gold.iter().map(|s| s.to_string()).collect(),
        qtype: None,
    }
}

fn questions() -> Vec<QuestionRecord> {
    vec![
        q("qa", "where was alice born and what weather", "rain", ["a1", "a2"]),
        q("qb", "bob studied in which capital", "capital", ["b2", "b1"]),
    ]
}

fn chain(hops: &[&str]) -> ScoredChain {
    ScoredChain {
        hops: hops.iter().map(|s| s.to_string()).collect(),
        step_scores: vec![0.0; hops.len()],
        score: 0.0,
    }
}

fn record(id: &str, chains: &[&[&str]]) -> RunRecord {
    RunRecord {
        question_id: id.into(),
        chains: chains.iter().map(|c| chain(c)).collect(),
    }
}

#[test]
fn gold_run_scores_one_everywhere() {
    let run = vec![record("qa", &[&["a1", "a2"]]), record("qb", &[&["b1", "b2"]])];
    let m = evaluate_run(&run, &questions(), &corpus(), 10).unwrap();
    assert_eq!((m.ar, m.pr, m.p_em, m.em), (1.0, 1.0, 1.0, 1.0));
    let h = hop_report(&run, &questions(), &corpus(), 10).unwrap();
    assert_eq!((h.hop1_acc, h.hop2_acc, h.overlap), (1.0, 1.0, 0.0));
}

#[test]
fn hop_report_fixture() {
    // qa: first positions {a1, x}, second {x, a2} -> both hops right, overlap 1/3
    // qb: hop order is (b1, b2) because b2 holds the answer;
    //     first {b2}, second {b1} -> neither hop right, overlap 0
    let run = vec![
        record("qa", &[&["a1", "x"], &["x", "a2"]]),
        record("qb", &[&["b2", "b1"]]),
    ];
    let h = hop_report(&run, &questions(), &corpus(), 10).unwrap();
    assert_eq!(h.n, 2);
    assert_eq!(h.hop1_acc, 0.5);
    assert_eq!(h.hop2_acc, 0.5);
    assert!((h.overlap - (1.0 / 3.0) / 2.0).abs() < 1e-12);
    assert_eq!(h.flagged, 0);

    let m = evaluate_run(&run, &questions(), &corpus(), 10).unwrap();
    // qa retrieves both golds across two chains; qb's only chain is gold reversed
    assert_eq!((m.pr, m.p_em, m.em), (1.0, 1.0, 0.5));
}

#[test]
fn exported_tsv_parses_back_to_the_same_rows() {
    let cfg = EncoderConfig {
        hash_dim: 128,
        emb_dim: 6,
        ..EncoderConfig::default()
    };
    let params = EncoderParams::new(&cfg, 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("emb.tsv");
    let n = export_embeddings(&params, &corpus(), &questions(), 2, &path).unwrap();
    let rows = embedding_rows(&params, &corpus(), &questions(), 2).unwrap();
    assert_eq!(n, rows.len());
    assert_eq!(n, 2 * (4 + 2));
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), rows.len());
    for (line, row) in lines.iter().zip(&rows) {
        let fields: Vec<&str> = line.split('\t').collect();
        assert_eq!(fields[0], row.label.as_str());
        assert_eq!(fields[1], row.question_id);
        assert_eq!(fields[2], row.id);
        let values: Vec<f64> = fields[3..].iter().map(|f| f.parse().unwrap()).collect();
        assert_eq!(values, row.values);
    }
    let labels: Vec<&str> = lines[..6].iter().map(|l| l.split('\t').next().unwrap()).collect();
    assert_eq!(labels, ["Q1", "Q2", "P1", "P2", "NEG", "NEG"]);
    // negatives never include the question's own gold passages
    for r in rows.iter().filter(|r| r.label.as_str() == "NEG") {
        let gold = if r.question_id == "qa" { ["a1", "a2"] } else { ["b1", "b2"] };
        assert!(!gold.contains(&r.id.as_str()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn metric_order_holds(picks in prop::collection::vec(prop::collection::vec((0usize..5, 0usize..5), 0..4), 2), top in 1usize..4) {
        let ids = ["a1", "a2", "b1", "b2", "x"];
        let run: Vec<RunRecord> = ["qa", "qb"].iter().zip(&picks).map(|(qid, cs)| RunRecord {
            question_id: qid.to_string(),
            chains: cs.iter().filter(|(i, j)| i != j).map(|&(i, j)| chain(&[ids[i], ids[j]])).collect(),
        }).collect();
        let m = evaluate_run(&run, &questions(), &corpus(), top).unwrap();
        prop_assert!(m.em <= m.p_em && m.p_em <= m.pr);
        for pq in &m.per_question {
            prop_assert!(!pq.em || pq.p_em);
            prop_assert!(!pq.p_em || pq.pr);
        }
    }
}
