//! Multi-hop evidence chain retrieval.
//!
//! Questions are answered by chains of passages found one hop at a time: the
//! query for hop `t` is the question with the passages of hops `1..t`
//! appended. A trainable dual encoder embeds queries and passages, an exact
//! inner-product index serves candidates, and beam search keeps the best
//! partial chains between hops.

pub mod beam;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
mod hash;
pub mod synth;
pub mod tfidf;
pub mod training;
pub mod vindex;

pub use beam::{chain_score_update, retrieve_chains, BeamConfig, Retriever, RunRecord, ScoreMode, ScoredChain};
pub use corpus::{infer_hop_order, load_corpus, load_questions, tokenize, Corpus, OrderedChain, Passage, QuestionRecord};
pub use encoder::{compose_query, similarity, DenseVector, EncoderConfig, EncoderParams};
pub use error::{Error, Result};
pub use eval::{evaluate_run, hop_report, RetrievalMetrics};
pub use tfidf::{search_tfidf, tfidf_chains, tfidf_run, TfIdfModel};
pub use vindex::{build_index, refresh, Hit, VectorIndex};
pub use synth::{generate, SynthConfig, SynthData};
pub use training::{train, NegativePool, RefreshMode, TrainConfig, TrainOutcome};
