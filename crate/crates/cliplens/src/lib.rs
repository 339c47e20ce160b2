//! Service and command-line front end for the `cliplens-core` engine.
//!
//! Dumps are loaded once and shared read-only. Anything that needs a live
//! model (encoding an uploaded image or a new text) is forwarded to the
//! encode sidecar over HTTP.

pub mod config;
pub mod llm;
pub mod models;
pub mod server;
pub mod sidecar;
