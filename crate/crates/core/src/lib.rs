//! Desk-scale laboratory for sentence-level alignment via parallel decoding.
//!
//! The crate trains tiny causal transformers on a fully synthetic token
//! domain with an exactly computable reward, then refines base-model outputs
//! by Jacobi fixed-point decoding with a consistency-trained refiner. Every
//! stage is deterministic given its seeds, so end-to-end claims (fixed-point
//! equivalence, gradient exactness, alignment gains, pass-count savings,
//! cross-model transfer) are checkable as plain assertions.
//!
//! Module map:
//! - [`numkit`]: dense f64 arrays, reverse-mode autodiff tape, Adam.
//! - [`model`]: vocabulary, context layout, the micro transformer, checkpoints.
//! - [`decode`]: autoregressive, Jacobi, and hybrid block decoding with traces.
//! - [`reward`]: programmable synthetic reward and corpus generators.
//! - [`trajectory`]: reward-ranked response trajectories and the dataset format.
//! - [`train`]: the consistency + autoregressive losses and both training loops.
//! - [`analysis`]: KL-constrained optimum, implicit rewards, and the
//!   preference-identity check on enumerable response spaces.
//! - [`eval`]: the end-to-end scenario runner and its reports.

pub mod analysis;
pub mod decode;
pub mod eval;
pub mod model;
pub mod numkit;
pub mod reward;
pub mod trajectory;
pub mod train;
pub mod util;

/// A vocabulary index. The whole domain runs on raw indices; there is no
/// tokenizer.
pub type Token = u32;

/// A sequence of vocabulary indices. Prompts have length `m`, responses are
/// standardized to the response budget `N`.
pub type TokenSeq = Vec<Token>;
