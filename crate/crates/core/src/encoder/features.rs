use crate::hash::Fnv64;

/// Separates the two halves of a bigram key; never produced by the tokenizer.
const BIGRAM_JOIN: u8 = 0x1f;

/// Sparse vector over hash buckets, sorted by bucket with no duplicates.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseFeatures {
    entries: Vec<(u32, f64)>,
}

impl SparseFeatures {
    pub fn entries(&self) -> &[(u32, f64)] {
        &self.entries
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn is_zero(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.entries.iter().map(|(_, v)| v * v).sum::<f64>().sqrt()
    }

    pub fn to_dense(&self, dim: usize) -> Vec<f64> {
        let mut out = vec![0.0; dim];
        for &(b, v) in &self.entries {
            out[b as usize] = v;
        }
        out
    }
}

/// Hashes unigrams and adjacent bigrams into `dim` buckets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Featurizer {
    dim: usize,
    seed: u64,
}

impl Featurizer {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim > 0, "hash dimension must be positive");
        Featurizer { dim, seed }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn unigram_bucket(&self, token: &str) -> u32 {
        let mut h = Fnv64::with_seed(self.seed);
        h.write(token.as_bytes());
        (h.finish() % self.dim as u64) as u32
    }

    pub fn bigram_bucket(&self, left: &str, right: &str) -> u32 {
        let mut h = Fnv64::with_seed(self.seed);
        h.write(left.as_bytes());
        h.write(&[BIGRAM_JOIN]);
        h.write(right.as_bytes());
        (h.finish() % self.dim as u64) as u32
    }

    /// L2-normalized bucket counts of unigrams and bigrams of adjacent distinct
    /// tokens. Empty input gives the zero vector.
    pub fn featurize<S: AsRef<str>>(&self, tokens: &[S]) -> SparseFeatures {
        let mut buckets: Vec<u32> = Vec::with_capacity(tokens.len() * 2);
        for (i, t) in tokens.iter().enumerate() {
            buckets.push(self.unigram_bucket(t.as_ref()));
            if let Some(next) = tokens.get(i + 1) {
                // a token repeated in place adds weight, not a new feature
                if next.as_ref() != t.as_ref() {
                    buckets.push(self.bigram_bucket(t.as_ref(), next.as_ref()));
                }
            }
        }
        buckets.sort_unstable();
        let mut entries: Vec<(u32, f64)> = Vec::new();
        for b in buckets {
            match entries.last_mut() {
                Some((last, c)) if *last == b => *c += 1.0,
                _ => entries.push((b, 1.0)),
            }
        }
        let norm = entries.iter().map(|(_, c)| c * c).sum::<f64>().sqrt();
        if norm > 0.0 {
            for (_, c) in &mut entries {
                *c /= norm;
            }
        }
        SparseFeatures { entries }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_is_zero() {
        let f = Featurizer::new(64, 7);
        assert!(f.featurize::<&str>(&[]).is_zero());
    }

    #[test]
    fn repetition_keeps_direction() {
        let f = Featurizer::new(64, 7);
        assert_eq!(f.featurize(&["a"]), f.featurize(&["a", "a"]));
    }

    #[test]
    fn two_tokens_hit_at_most_three_buckets() {
        let f = Featurizer::new(1 << 12, 0);
        let x = f.featurize(&["a", "b"]);
        let mut expected = vec![
            f.unigram_bucket("a"),
            f.unigram_bucket("b"),
            f.bigram_bucket("a", "b"),
        ];
        expected.sort_unstable();
        expected.dedup();
        assert_eq!(x.nnz(), expected.len());
        assert!(x.nnz() <= 3);
        let got: Vec<u32> = x.entries().iter().map(|e| e.0).collect();
        assert_eq!(got, expected);
    }

    #[test]
    fn collisions_accumulate() {
        let f = Featurizer::new(1, 0);
        let x = f.featurize(&["a", "b"]);
        assert_eq!(x.entries(), &[(0, 1.0)]);
    }

    proptest! {
        #[test]
        fn unit_norm_or_zero(tokens in prop::collection::vec("[a-z]{1,4}", 0..12), seed in any::<u64>()) {
            let f = Featurizer::new(97, seed);
            let x = f.featurize(&tokens);
            if tokens.is_empty() {
                prop_assert!(x.is_zero());
            } else {
                prop_assert!((x.norm() - 1.0).abs() < 1e-12);
                prop_assert!(x.entries().windows(2).all(|w| w[0].0 < w[1].0));
            }
        }
    }
}
