//! Low-resolution text recognition through teacher–student distillation.
//!
//! A frozen recognizer trained on high-resolution text images supervises a
//! student that only sees half-resolution inputs. Knowledge moves through
//! three losses: a masked feature-cosine loss on backbone features, a
//! contrastive loss on per-character semantic vectors, and a KL loss against
//! teacher distributions revised with top-K decoding-path votes.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod alphabet;
pub mod cli;
pub mod error;
pub mod harness;
pub mod losses;
pub mod ndgrad;
pub mod par;
pub mod recognizer;
pub mod rng;
pub mod seqlabel;
pub mod synthdata;

pub use error::{Error, Result};
