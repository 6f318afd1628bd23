//! Knowledge-aware vision-language pre-training: corpus construction,
//! negative sampling and a desk-scale transformer trainer.

pub mod assembler;
pub mod concept;
pub mod config;
pub mod embed;
pub mod formats;
pub mod model;
pub mod negatives;
pub mod selftest;
pub mod synth;
pub mod train;
