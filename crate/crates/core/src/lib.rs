//! Longitudinal, multi-image report generation.

pub mod autograd;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod decoding;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod scheduler;
pub mod seeding;
pub mod tensor;
pub mod tokenizer;
pub mod training;
