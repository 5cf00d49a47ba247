//! GraphMIX: value factorization for cooperative multi-agent reinforcement
//! learning through a monotonic mixing graph neural network.
//!
//! Agents run a shared recurrent Q-network. Their hidden states define the
//! edge weights of a complete directed graph through scaled query-key
//! attention. A mixing GNN, whose non-negative weights come from
//! state-conditioned hypernetworks, folds per-agent Q-values into the joint
//! value and splits the global reward into per-agent fractions.
//!
//! The crate is `no_std` (with `alloc`) when built without the default `std`
//! feature. File formats, configuration and the command line live in the
//! `graphmix` companion crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod agent;
pub mod diff;
pub mod envs;
mod error;
pub mod graphattn;
pub mod mixer;
pub mod model;
pub mod rng;
pub mod trainer;
pub mod verify;

pub use error::Error;
