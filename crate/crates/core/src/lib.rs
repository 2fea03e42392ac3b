//! Relevance classification for short disaster-event posts.
//!
//! The pipeline: parse pretrained word-vector files ([`embeddings`]),
//! normalize and encode post text ([`text`]), run gated recurrent
//! classifiers built on a small reverse-mode tape ([`tensor`], [`nets`]),
//! train them with early stopping ([`train`]), and fuse either the
//! embeddings themselves (meta averaging) or the per-model predictions
//! with fixed weights ([`ensemble`]).

pub mod data;
pub mod embeddings;
pub mod ensemble;
pub mod nets;
pub mod rng;
pub mod tensor;
pub mod text;
pub mod train;
