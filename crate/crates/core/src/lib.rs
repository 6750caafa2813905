//! Asynchronous, transaction-consistent checkpointing for a fully replicated,
//! eventually consistent key-value store.
//!
//! The crate contains the protocol itself ([`replica`], [`protocol`]), a
//! deterministic network simulator ([`simnet`]), an independent verifier
//! ([`oracle`]) and offline crash recovery ([`recovery`]).

pub mod artifact;
pub mod fuzz;
pub mod model;
pub mod oracle;
pub mod protocol;
pub mod recovery;
pub mod replica;
pub mod simnet;
pub mod trace;

pub use model::*;
