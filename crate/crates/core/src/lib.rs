//! Compositional test-set construction and a reference engine for
//! re-encoding decoders.

pub mod compdegree;
pub mod corpus;
pub mod ngram_index;
pub mod novelty;
pub mod rdangle;
pub mod uncertainty;
pub mod pipeline;
