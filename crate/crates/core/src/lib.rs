//! Deterministic simulator for hybrid split-federated learning.
//!
//! Clients hold a prefix of a shared multi-exit backbone plus a local exit
//! head; a main server holds the deeper back end. Each local step adapts two
//! temporary copies of the client model, offloads quantized cross-batch
//! feature views, aligns them on the server with a contrastive loss, and
//! trains the fallback path through a U-shaped exchange that keeps labels on
//! the device. A fed server then aggregates client blocks depth by depth and
//! the main server averages its duplicates.
//!
//! All gradients come from the small reverse-mode engine in [`nn`].

pub mod client;
pub mod config;
pub mod coordination;
pub mod data;
pub mod nn;
pub mod protocol;
pub mod rng;
pub mod server;
