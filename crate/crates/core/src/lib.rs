//! Head-level interpretability engine for CLIP-style vision transformers.
//!
//! The engine works from exported per-head contributions (see [`store`])
//! and never runs a model itself:
//!
//! - [`textspan`] decomposes each head's outputs into ranked text directions,
//! - [`labeler`] turns those descriptions into property labels,
//! - [`metrics`] scores how entangled and how consistent the labels are,
//! - [`analysis`] answers retrieval and segmentation queries per head,
//! - [`pipeline`] ties the first three together for one dump.

pub mod analysis;
pub mod labeler;
pub mod metrics;
pub mod pipeline;
pub mod store;
pub mod synthetic;
pub mod textspan;

pub use store::{ContributionBank, HeadId, ModelMeta, TextBank};
