pub mod atomic;
pub mod corpus;
pub mod diagnostics;
pub mod evalsuite;
pub mod model;
pub mod objectives;
pub mod tokenizer;
pub mod trainer;
