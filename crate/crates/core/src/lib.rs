//! Decentralized cooperative data exchange with instantly decodable network
//! coding, modeled as a family of common-payoff delay games.
//!
//! A base station broadcasts a frame of packets over an erasure channel; the
//! clients then cooperate to recover each other's losses by exchanging binary
//! XOR combinations that are instantly decodable for the targeted receivers.
//! Whether to transmit at a given slot is a strategic decision: simultaneous
//! transmissions collide, silence wastes the slot, and every wanting player
//! pays delay either way.
//!
//! The crate provides:
//!
//! - [`model`]: the shared network state (state matrix, erasure matrix,
//!   channel realizations) and the delay / completion-time kernels.
//! - [`coding`]: IDNC packet-combination selection, a greedy clique
//!   heuristic over the coding graph plus an exhaustive small-instance
//!   oracle.
//! - [`games`]: the six stage utilities (completion time, maximum decoding
//!   delay, sum decoding delay; plain and collision-punished variants),
//!   collision bookkeeping, and back-off.
//! - [`equilibrium`]: closed-form Nash-equilibrium sets, price of anarchy,
//!   and the Pareto-optimal NE, cross-checked by brute-force enumeration
//!   over the profile lattice.
//! - [`learning`]: best-response dynamics and Bush–Mosteller reinforcement
//!   learning, driving full recovery episodes for the five schemes
//!   (OPT-PMP, OPT-CDE, LC-CDE, LS-PMP, LS-CDE).
//! - [`lossy`]: local feedback matrices with uncertain entries under lossy
//!   acknowledgements, and the modified learning update.
//! - [`harness`]: seeded Monte Carlo parameter sweeps with CSV output.
//! - [`corpus`]: random stage-game generators used by the analysis and the
//!   test suite, with documented validity filters.
//!
//! All randomness flows through [`rng`]: one root seed, split into
//! per-(episode, stage, purpose) sub-streams so that experiments are
//! bit-reproducible and iterations can run in parallel.

pub mod coding;
pub mod corpus;
pub mod equilibrium;
pub mod games;
pub mod harness;
pub mod learning;
pub mod lossy;
pub mod model;
pub mod rng;

pub use games::{GameKind, History, UtilityMode};
pub use model::{DelayMetric, ErasureMatrix, GameConfig, StateMatrix};
