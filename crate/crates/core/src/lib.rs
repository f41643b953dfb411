//! Training-dynamics laboratory for toy abstractive summarization.

pub mod corpus;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod token;
pub mod trainer;
pub mod truncation;
