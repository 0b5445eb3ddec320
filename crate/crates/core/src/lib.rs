//! Whispered-speech speaker verification toolkit.
//!
//! A shallow encoder-decoder post-network corrects speaker embeddings for the
//! phonation mismatch between normal and whispered speech. It is trained with
//! a triplet loss plus a small-weight cosine-softmax classification loss, and
//! evaluated with EER/ROC/AUC over speaker-disjoint trial lists.
//!
//! The numeric modules are generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below pin the `f64` instantiation used by the training and
//! evaluation pipeline.

// `!(x > 0)` checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod audio;
pub mod corpus;
pub mod evaluation;
pub mod numcore;
pub mod objectives;
pub mod postnet;
pub mod scalar;
pub mod trainer;

pub use scalar::Scalar;

pub type Vector64 = numcore::Vector<f64>;
pub type Vector32 = numcore::Vector<f32>;
pub type Matrix64 = numcore::Matrix<f64>;
pub type Matrix32 = numcore::Matrix<f32>;
pub type Tape64 = numcore::Tape<f64>;
pub type PostNet64 = postnet::PostNet<f64>;
pub type PostNet32 = postnet::PostNet<f32>;
