//! One module per subcommand.

pub mod bridge;
pub mod contrast;
pub mod controls;
pub mod couple;
pub mod freeze;
pub mod ingest;
pub mod reentry;
pub mod replay;
pub mod report;
pub mod search;
pub mod synth;
pub mod tangent;
pub mod validate;
pub mod witness;
