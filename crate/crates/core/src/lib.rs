//! Relevance-aware contrastive pre-training for dense retrievers.
//!
//! A tiny shared bag-of-tokens encoder is trained with InfoNCE over random
//! span crops. Each document yields one fixed query span and several positive
//! spans; the loss of every pair is weighted by the model's own estimate of
//! how related the two spans are, so crops that straddle unrelated content
//! contribute less. Around that sit the pieces needed to check the behaviour:
//! a momentum negative queue, exact dense retrieval, BM25, ranking metrics and
//! a paired t-test.

pub mod augment;
pub mod checkpoint;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod loss;
pub mod negatives;
pub mod retrieval;
pub mod trainer;

pub use error::{Error, Result};
