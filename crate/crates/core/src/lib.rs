//! Core library: model, objectives, training and evaluation.

pub mod batch;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod data;
pub mod distributed;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod graph;
pub mod masking;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod par;
pub mod params;
pub mod rng;
pub mod synthetic;
pub mod text;
pub mod trainer;
pub mod visual_tokenizer;

pub use error::{FlavaError, Result};
