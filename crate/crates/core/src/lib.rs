pub mod agent;
pub mod envgen;
pub mod evaluator;
pub mod fedcore;
pub mod harness;
pub mod image;
pub mod protocol;
pub mod toolkit;
pub mod trace;
pub mod trainer;
pub mod vocab;
