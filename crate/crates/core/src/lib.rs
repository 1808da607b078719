#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod audio_io;
pub mod budget;
pub mod cli;
pub mod dsp;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod quant;
pub mod rng;
pub mod streaming;
pub mod synth;
