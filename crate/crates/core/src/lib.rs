//! Stale GPU register leakage: a deterministic register-file simulator, the
//! attacks that read leftover register state, and the shader sanitizers that
//! stop them.

pub mod cnn;
pub mod covert;
pub mod isa;
pub mod kernels;
pub mod llm;
pub mod pgm;
pub mod pixel;
pub mod sanitize;
pub mod sim;
