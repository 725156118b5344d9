//! Decay RNN laboratory.
//!
//! A desk-scale workbench for the Decay RNN cell family (DRNN, SDRNN,
//! Ab-DRNN) next to SRN/LSTM/GRU baselines: BPTT numerics with a
//! finite-difference oracle, a template-grammar corpus generator with
//! agreement annotation, classifier and language-model training, and the
//! evaluation protocols (accuracy, stratified breakdowns, confidence
//! profiles, perplexity, targeted syntactic evaluation, rank summaries).

pub mod cells;
pub mod corpus;
pub mod eval;
pub mod gradcheck;
pub mod tape;
pub mod tensor;
pub mod training;

mod threads;

pub use threads::thread_pool;
