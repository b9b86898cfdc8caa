//! Speech-language-behavior sequence modeling lab.
//!
//! Interleaved text, speech, face and body token streams share one rotary
//! timeline and flow through mixture-of-modality-experts transformer
//! layers with a restricted cross-modal attention topology.

// `!(x > 0.0)` deliberately rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod modality;
pub mod model;
pub mod mome;
pub mod lab;
pub mod numerics;
pub mod rope;
pub mod streams;
pub mod timeline;

pub use modality::{Expert, Modality};
