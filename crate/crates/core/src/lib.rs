//! Joint learning of audio and text phonetic embeddings from mostly
//! unpaired data, with decoding, alignment baselines and an experiment harness.

pub mod alignment;
pub mod autodiff;
pub mod container;
pub mod corpus;
pub mod decoder;
pub mod error;
pub mod harness;
pub mod nets;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod trainer;

/// Single-precision aliases; training defaults to these.
pub type Matrix32 = tensor::Matrix<f32>;
pub type Model32 = nets::Model<f32>;
pub type Corpus32 = corpus::Corpus<f32>;

/// Double-precision aliases, used for gradient checks.
pub type Matrix64 = tensor::Matrix<f64>;
pub type Model64 = nets::Model<f64>;
pub type Corpus64 = corpus::Corpus<f64>;
