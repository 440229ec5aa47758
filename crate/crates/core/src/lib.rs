//! Building personalized networks of psychological processes from therapy
//! transcripts.
//!
//! The pipeline runs in three stages. [`detect`] finds process-bearing
//! patient utterances and labels their dimensions, [`cluster`] groups the
//! processes into themes, and [`links`] infers directed edges between themes
//! by ensemble voting. [`network`] assembles and exports the result,
//! [`baseline`] produces the single-prompt comparison network, and
//! [`evalkit`] holds the evaluation metrics. All model calls go through
//! [`llm_gateway`].

pub mod baseline;
pub mod cluster;
pub mod detect;
pub mod evalkit;
pub mod links;
pub mod llm_gateway;
pub mod network;
pub mod schemas;
pub mod transcript;
pub mod util;
