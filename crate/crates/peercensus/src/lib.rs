//! A deterministic implementation of a proof-of-work gated, dynamically
//! sized byzantine agreement stack, together with the tooling needed to
//! study it: a discrete-event network simulator and a closed-form tail-bound
//! analyzer for the probability that an attacker ever controls enough online
//! voters to break agreement.
//!
//! The stack has three layers. The blockchain layer ([`block`], [`pow`],
//! [`identity`]) throttles the admission of voting identities: a peer becomes
//! a voter only by sealing its public key into a proof-of-work block. The
//! agreement layer ([`agreement`]) replicates the shared state — operation
//! log, online voter set, and chain — through pre-prepare/prepare/commit
//! phases with view changes, and resolves forks by committing exactly one
//! child per chain head. The application layer ([`discoin`]) keeps signed
//! account balances on top of the agreed membership.
//!
//! [`sim`] drives all of it from a single seed; [`analysis`] evaluates the
//! Chernoff-style bounds the simulator is checked against.

pub mod agreement;
pub mod analysis;
pub mod block;
pub mod cli;
pub mod discoin;
pub mod enc;
pub mod identity;
pub mod pow;
pub mod sim;
