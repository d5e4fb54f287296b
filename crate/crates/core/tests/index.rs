mod common;

use common::{dot, rank};
use hopchain::{DenseVector, VectorIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn brute(ids: &[String], rows: &[Vec<f64>], q: &[f64], k: usize) -> Vec<(String, f64)> {
    let mut all: Vec<(String, f64)> = ids.iter().cloned().zip(rows.iter().map(|r| dot(r, q))).collect();
    rank(&mut all);
    all.truncate(k);
    all
}

fn instance(rng: &mut ChaCha8Rng, integer: bool) -> (Vec<String>, Vec<Vec<f64>>, Vec<f64>) {
    let n = rng.random_range(1..60);
    let d = rng.random_range(1..9);
    let value = |rng: &mut ChaCha8Rng| {
        if integer {
            rng.random_range(-2i32..=2) as f64
        } else {
            rng.random_range(-1.0..1.0)
        }
    };
    let mut ids: Vec<String> = (0..n).map(|i| format!("d{i:03}")).collect();
    // insertion order must not leak into the tie-break
    ids.reverse();
    let rows = (0..n).map(|_| (0..d).map(|_| value(rng)).collect()).collect();
    let q = (0..d).map(|_| value(rng)).collect();
    (ids, rows, q)
}

#[test]
fn search_matches_brute_force_with_ties() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..300 {
        let (ids, rows, q) = instance(&mut rng, case % 2 == 0);
        let index = VectorIndex::from_rows(ids.clone(), rows.clone(), 0).unwrap();
        let k = rng.random_range(1..ids.len() + 5);
        let got: Vec<(String, f64)> = index
            .search(&DenseVector(q.clone()), k)
            .unwrap()
            .into_iter()
            .map(|h| (h.id, h.score))
            .collect();
        let want = brute(&ids, &rows, &q, k);
        assert_eq!(got.len(), want.len(), "case {case}");
        for (g, w) in got.iter().zip(&want) {
            assert_eq!(g.0, w.0, "case {case}");
            assert!((g.1 - w.1).abs() <= 1e-12, "case {case}: {} vs {}", g.1, w.1);
        }
    }
}

#[test]
fn all_tied_rows_come_back_in_id_order() {
    let ids: Vec<String> = ["c", "a", "b"].iter().map(|s| s.to_string()).collect();
    let index = VectorIndex::from_rows(ids, vec![vec![1.0]; 3], 0).unwrap();
    let hits = index.search(&DenseVector(vec![2.0]), 2).unwrap();
    let got: Vec<&str> = hits.iter().map(|h| h.id.as_str()).collect();
    assert_eq!(got, ["a", "b"]);
}
