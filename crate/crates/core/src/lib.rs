//! Real-time generative object detection at desk scale.
//!
//! A patch featurizer and transformer encoder feed a region-language
//! decoder that refines object queries and per-query text embeddings
//! together. A DAG text head turns each query's text embeddings into a
//! token graph decoded non-autoregressively into a category name.

pub mod error;
pub mod evaluation;
pub mod featurizer;
pub mod gradient_suite;
pub mod model;
pub mod dag_head;
pub mod numcore;
pub mod objective;
pub mod rl_decoder;
pub mod synthdata;
pub mod train;

pub use error::{Error, Result};
