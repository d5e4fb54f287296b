//! Chain-level negative log likelihood and its analytic gradient.
//!
//! At every hop the positive chain's next passage competes against each
//! negative chain's passage at the same hop. Each chain is scored with its own
//! composed prefix `[q; p_1 .. p_{t-1}]`.

use super::{dot, DenseVector, EncoderParams, SparseFeatures};
use crate::corpus::{Corpus, OrderedChain, Passage, QuestionRecord};
use crate::encoder::compose_query;
use crate::error::{Error, Result};

/// Gradient with the layout of the two projections (bucket-major). Only the
/// columns listed in `touched_*` can be nonzero.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad {
    emb_dim: usize,
    pub query: Vec<f64>,
    pub passage: Vec<f64>,
    touched_query: Touched,
    touched_passage: Touched,
}

#[derive(Debug, Clone, PartialEq)]
struct Touched {
    seen: Vec<bool>,
    list: Vec<u32>,
}

impl Touched {
    fn new(n: usize) -> Self {
        Touched {
            seen: vec![false; n],
            list: Vec::new(),
        }
    }

    fn mark(&mut self, b: u32) {
        if !std::mem::replace(&mut self.seen[b as usize], true) {
            self.list.push(b);
        }
    }

    fn reset(&mut self) {
        for &b in &self.list {
            self.seen[b as usize] = false;
        }
        self.list.clear();
    }
}

impl ParamGrad {
    pub fn zeros_like(params: &EncoderParams) -> Self {
        let n = params.emb_dim() * params.hash_dim();
        ParamGrad {
            emb_dim: params.emb_dim(),
            query: vec![0.0; n],
            passage: vec![0.0; n],
            touched_query: Touched::new(params.hash_dim()),
            touched_passage: Touched::new(params.hash_dim()),
        }
    }

    pub fn emb_dim(&self) -> usize {
        self.emb_dim
    }

    pub fn query_at(&self, row: usize, bucket: usize) -> f64 {
        self.query[bucket * self.emb_dim + row]
    }

    pub fn passage_at(&self, row: usize, bucket: usize) -> f64 {
        self.passage[bucket * self.emb_dim + row]
    }

    /// Buckets whose query column may be nonzero.
    pub fn query_buckets(&self) -> &[u32] {
        &self.touched_query.list
    }

    /// Buckets whose passage column may be nonzero.
    pub fn passage_buckets(&self) -> &[u32] {
        &self.touched_passage.list
    }

    pub fn clear(&mut self) {
        let d = self.emb_dim;
        for &b in &self.touched_query.list {
            self.query[b as usize * d..(b as usize + 1) * d].fill(0.0);
        }
        for &b in &self.touched_passage.list {
            self.passage[b as usize * d..(b as usize + 1) * d].fill(0.0);
        }
        self.touched_query.reset();
        self.touched_passage.reset();
    }

    pub fn max_abs(&self) -> f64 {
        self.query
            .iter()
            .chain(&self.passage)
            .fold(0.0f64, |m, g| m.max(g.abs()))
    }

    fn add_outer(
        target: &mut [f64],
        touched: &mut Touched,
        emb_dim: usize,
        coef: f64,
        dense: &DenseVector,
        sparse: &SparseFeatures,
    ) {
        for &(b, x) in sparse.entries() {
            touched.mark(b);
            let col = &mut target[b as usize * emb_dim..(b as usize + 1) * emb_dim];
            let c = coef * x;
            for (g, v) in col.iter_mut().zip(&dense.0) {
                *g += c * v;
            }
        }
    }
}

struct Scored {
    q_feat: SparseFeatures,
    p_feat: SparseFeatures,
    q_vec: DenseVector,
    p_vec: DenseVector,
    logit: f64,
}

fn score(params: &EncoderParams, q_tokens: &[String], prefix: &[&Passage], next: &Passage) -> Scored {
    let composed = compose_query(q_tokens, prefix, params.max_len());
    let f = params.featurizer();
    let q_feat = f.featurize(composed.tokens());
    let p_feat = f.featurize(&next.tokens);
    let q_vec = params.query.apply(&q_feat);
    let p_vec = params.passage.apply(&p_feat);
    let logit = dot(&q_vec.0, &p_vec.0);
    Scored {
        q_feat,
        p_feat,
        q_vec,
        p_vec,
        logit,
    }
}

fn resolve<'c>(corpus: &'c Corpus, chain: &OrderedChain) -> Result<Vec<&'c Passage>> {
    chain.hops().iter().map(|id| corpus.require(id)).collect()
}

/// Loss and, when `grad` is given, `scale * dLoss/dParams` added into it.
pub fn loss_and_gradient(
    params: &EncoderParams,
    q: &QuestionRecord,
    corpus: &Corpus,
    pos: &OrderedChain,
    negs: &[OrderedChain],
    mut grad: Option<(&mut ParamGrad, f64)>,
) -> Result<f64> {
    let n = pos.len();
    if n == 0 {
        return Err(Error::invalid("positive chain is empty"));
    }
    if let Some(bad) = negs.iter().find(|c| c.len() != n) {
        return Err(Error::invalid(format!(
            "chain length mismatch: positive has {n} hops, negative has {}",
            bad.len()
        )));
    }
    let q_tokens = q.tokens();
    let pos_p = resolve(corpus, pos)?;
    let neg_p = negs
        .iter()
        .map(|c| resolve(corpus, c))
        .collect::<Result<Vec<_>>>()?;

    let d = params.emb_dim();
    let mut total = 0.0;
    for t in 0..n {
        let mut scored = Vec::with_capacity(negs.len() + 1);
        scored.push(score(params, &q_tokens, &pos_p[..t], pos_p[t]));
        for chain in &neg_p {
            scored.push(score(params, &q_tokens, &chain[..t], chain[t]));
        }
        let max = scored.iter().map(|s| s.logit).fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = scored.iter().map(|s| (s.logit - max).exp()).sum();
        let lse = max + sum_exp.ln();
        total += lse - scored[0].logit;

        if let Some((g, scale)) = grad.as_mut() {
            for (i, s) in scored.iter().enumerate() {
                let prob = (s.logit - lse).exp();
                let coef = *scale * (prob - if i == 0 { 1.0 } else { 0.0 });
                if coef == 0.0 {
                    continue;
                }
                ParamGrad::add_outer(&mut g.query, &mut g.touched_query, d, coef, &s.p_vec, &s.q_feat);
                ParamGrad::add_outer(&mut g.passage, &mut g.touched_passage, d, coef, &s.q_vec, &s.p_feat);
            }
        }
    }
    Ok(total)
}

pub fn chain_nll_loss(
    params: &EncoderParams,
    q: &QuestionRecord,
    corpus: &Corpus,
    pos: &OrderedChain,
    negs: &[OrderedChain],
) -> Result<f64> {
    loss_and_gradient(params, q, corpus, pos, negs, None)
}

pub fn loss_gradient(
    params: &EncoderParams,
    q: &QuestionRecord,
    corpus: &Corpus,
    pos: &OrderedChain,
    negs: &[OrderedChain],
) -> Result<ParamGrad> {
    let mut g = ParamGrad::zeros_like(params);
    loss_and_gradient(params, q, corpus, pos, negs, Some((&mut g, 1.0)))?;
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EncoderConfig, Featurizer};

    fn chain(ids: &[&str]) -> OrderedChain {
        OrderedChain::new(ids.iter().map(|s| s.to_string()).collect()).unwrap()
    }

    fn question(text: &str) -> QuestionRecord {
        QuestionRecord {
            id: "q".into(),
            text: text.into(),
            answer: String::new(),
            gold_ids: vec![],
            qtype: None,
        }
    }

    fn toy_corpus() -> Corpus {
        Corpus::from_passages(vec![
            Passage::new("a", "", "alpha bravo"),
            Passage::new("b", "", "bravo charlie"),
            Passage::new("c", "", "delta echo"),
            Passage::new("d", "", "foxtrot golf"),
        ])
        .unwrap()
    }

    fn random_params(seed: u64) -> EncoderParams {
        let cfg = EncoderConfig {
            hash_dim: 16,
            emb_dim: 4,
            init_std: Some(0.7),
            ..Default::default()
        };
        EncoderParams::new(&cfg, seed).unwrap()
    }

    #[test]
    fn no_negatives_means_zero_loss_and_gradient() {
        let c = toy_corpus();
        let p = random_params(1);
        let q = question("alpha");
        let pos = chain(&["a", "b"]);
        assert_eq!(chain_nll_loss(&p, &q, &c, &pos, &[]).unwrap(), 0.0);
        assert_eq!(loss_gradient(&p, &q, &c, &pos, &[]).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn equal_similarities_give_n_ln2() {
        // zero weights make every similarity 0
        let p = EncoderParams::zeros(16, 4, 0);
        let c = toy_corpus();
        let loss = chain_nll_loss(&p, &question("alpha"), &c, &chain(&["a", "b"]), &[chain(&["c", "d"])]).unwrap();
        assert!((loss - 2.0 * std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let p = random_params(0);
        let c = toy_corpus();
        let err = chain_nll_loss(&p, &question("x"), &c, &chain(&["a", "b"]), &[chain(&["c"])]);
        assert!(err.is_err());
    }

    /// Recompute the loss from scalar similarities built by hand from the
    /// dense feature vectors and explicit matrix products.
    #[test]
    fn matches_scalar_recomputation() {
        let c = Corpus::from_passages(vec![
            Passage::new("x", "", "red apple"),
            Passage::new("y", "", "green pear"),
        ])
        .unwrap();
        let p = random_params(5);
        let f = Featurizer::new(16, p.seed());
        let (v, d) = (16, 4);
        let embed = |w: &super::super::Projection, tokens: &[String]| -> Vec<f64> {
            let x = f.featurize(tokens).to_dense(v);
            (0..d)
                .map(|r| (0..v).map(|b| w.get(r, b) * x[b]).sum())
                .collect()
        };
        let sim = |qt: Vec<String>, pid: &str| -> f64 {
            let qv = embed(&p.query, &qt);
            let pv = embed(&p.passage, &c.get(pid).unwrap().tokens);
            qv.iter().zip(&pv).map(|(a, b)| a * b).sum()
        };
        let s = |xs: &[&str]| xs.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        let q = question("which fruit");
        // positive (x, y), negative (y, x)
        let s1p = sim(s(&["which", "fruit"]), "x");
        let s1n = sim(s(&["which", "fruit"]), "y");
        let s2p = sim(s(&["which", "fruit", "[sep]", "red", "apple"]), "y");
        let s2n = sim(s(&["which", "fruit", "[sep]", "green", "pear"]), "x");
        let expected = -(s1p.exp() / (s1p.exp() + s1n.exp())).ln() - (s2p.exp() / (s2p.exp() + s2n.exp())).ln();
        let got = chain_nll_loss(&p, &q, &c, &chain(&["x", "y"]), &[chain(&["y", "x"])]).unwrap();
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    fn central_difference(
        p: &EncoderParams,
        q: &QuestionRecord,
        c: &Corpus,
        pos: &OrderedChain,
        negs: &[OrderedChain],
        h: f64,
    ) -> ParamGrad {
        let mut g = ParamGrad::zeros_like(p);
        let (d, v) = (p.emb_dim(), p.hash_dim());
        for which in 0..2 {
            for r in 0..d {
                for b in 0..v {
                    let mut plus = p.clone();
                    let mut minus = p.clone();
                    let (mp, mm) = if which == 0 {
                        (&mut plus.query, &mut minus.query)
                    } else {
                        (&mut plus.passage, &mut minus.passage)
                    };
                    let w = mp.get(r, b);
                    mp.set(r, b, w + h);
                    mm.set(r, b, w - h);
                    let lp = chain_nll_loss(&plus, q, c, pos, negs).unwrap();
                    let lm = chain_nll_loss(&minus, q, c, pos, negs).unwrap();
                    let slot = if which == 0 { &mut g.query } else { &mut g.passage };
                    slot[b * d + r] = (lp - lm) / (2.0 * h);
                }
            }
        }
        g
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let c = toy_corpus();
        let q = question("alpha bravo");
        let pos = chain(&["a", "b"]);
        let negs = [chain(&["c", "d"]), chain(&["a", "c"])];
        for seed in 0..5 {
            let p = random_params(seed);
            let g = loss_gradient(&p, &q, &c, &pos, &negs).unwrap();
            let fd = central_difference(&p, &q, &c, &pos, &negs, 1e-5);
            let scale = g.max_abs().max(fd.max_abs());
            let err = g
                .query
                .iter()
                .chain(&g.passage)
                .zip(fd.query.iter().chain(&fd.passage))
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(err / scale < 1e-6, "seed {seed}: rel err {}", err / scale);
        }
    }

    #[test]
    fn logit_shift_leaves_softmax_gradient_unchanged() {
        // softmax(z + c) = softmax(z), so the residuals driving the gradient
        // are invariant to a common shift
        let z = [0.3, -1.1, 2.4];
        let resid = |z: &[f64]| {
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = z.iter().map(|x| (x - m).exp()).sum();
            z.iter().map(|x| (x - m).exp() / s).collect::<Vec<_>>()
        };
        let shifted: Vec<f64> = z.iter().map(|x| x + 17.0).collect();
        for (a, b) in resid(&z).iter().zip(resid(&shifted)) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn loss_is_nonnegative() {
        let c = toy_corpus();
        for seed in 0..20 {
            let p = random_params(seed);
            let l = chain_nll_loss(&p, &question("golf"), &c, &chain(&["c", "d"]), &[chain(&["a", "b"])]).unwrap();
            assert!(l > 0.0);
        }
    }
}
