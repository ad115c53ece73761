//! Retrieve-and-edit framework for predicting structured token sequences.
//!
//! Given an input (for example a natural-language description of a code
//! snippet), the pipeline first retrieves a similar training example with a
//! learned, task-aware embedding, then edits the retrieved output with an
//! attention-based sequence decoder equipped with a copy mechanism.
//!
//! The crate is organized bottom-up:
//!
//! - [`corpus`]: tokenization, deduplication, group-disjoint splits,
//!   vocabulary construction, JSONL persistence.
//! - [`vmf`]: von Mises-Fisher distribution (log density, closed-form KL,
//!   exact and reparameterized sampling) used as the retriever's latent
//!   noise model on the unit sphere.
//! - [`nn`]: minimal reverse-mode automatic differentiation over dense
//!   `f64` tensors, GRU cells, and a minibatch Adam optimizer.
//! - [`embednet`]: the noisy encoder-decoder whose encoder becomes the
//!   retrieval embedding, plus its training loop.
//! - [`retriever`]: exact and random-projection-forest nearest-neighbor
//!   indexes over unit vectors, embedding persistence, and retrieval
//!   front-ends (task, input-only, lexical).
//! - [`editor`]: the attention decoder with a positional copy mechanism,
//!   its training loop, beam search, and next-token candidate scoring.
//! - [`eval`]: sentence BLEU, exact match, autocomplete metrics, and
//!   report generation.
//! - [`synth`]: synthetic templated corpora for end-to-end validation.
//! - [`config`], [`checkpoint`], [`pipeline`]: run configuration, binary
//!   model persistence, and the stage orchestration used by the CLI.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod editor;
pub mod embednet;
pub mod eval;
pub mod nn;
pub mod pipeline;
pub mod retriever;
pub mod synth;
pub mod vmf;
