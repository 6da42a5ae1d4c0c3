//! On-disk formats: PGM/PPM images, CSV corpus manifests, binary
//! checkpoints, binary embedding archives, and the key=value run config.
//!
//! Every decoder in this module takes untrusted byte slices and is exercised
//! by the fuzz harness; parsing must fail with an error, never a panic.

pub mod checkpoint;
pub mod config;
pub mod embedding;
pub mod manifest;
pub mod pnm;
