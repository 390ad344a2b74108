//! Blocklace-based Byzantine fault-tolerant atomic broadcast governed by an
//! amendable constitution, together with a deterministic discrete-event
//! simulator for exercising it under partial synchrony and Byzantine faults.
//!
//! The protocol totally orders transactions through a hash-linked DAG of
//! signed blocks (a *blocklace*) partitioned into three-round waves. A wave
//! finalises at most one first-round block; finalised blocks induce a total
//! order on everything they approve. The protocol is quiescent when idle,
//! uses a spontaneous leader for isolated transactions, and round-robin
//! formal leaders under load.
//!
//! Each epoch runs under a constitution `(P, sigma, delta)` — the participant
//! set, the supermajority threshold, and the presumed post-GST message bound.
//! Participants amend the constitution democratically: votes are ordered by
//! the consensus itself, aggregated by deterministic rules, and the resulting
//! amendment decision starts the next epoch via a coronation handshake.

pub mod block;
pub mod blocklace;
// pub mod engine;
// pub mod epochs;
pub mod governance;
// pub mod simnet;
pub mod testing;
pub mod types;

pub use block::{Block, BlockId, Payload, StubSigner, Tx};
pub use blocklace::{Blocklace, FinalityStatus, RoundInWave};

pub use governance::{AmendmentDecision, Vote, VoteSetTransaction};

pub use types::{AgentId, Constitution, InstanceId, Sigma};
