//! Model components: encoders, entity perception, relation reasoning, and
//! the query engine, assembled by [`pipeline::Model`].

pub mod encoders;
pub mod engine;
pub mod perceptron;
pub mod pipeline;
pub mod relation;

pub use pipeline::{argmax, score_matrix, ForwardPass, Model, Prediction};
pub use relation::select_top_k;
