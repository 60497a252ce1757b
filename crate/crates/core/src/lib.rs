//! Desk-scale laboratory for emergent semantic communication: worlds with
//! weighted entailment structure, a two-agent signaling game solved by
//! alternating maximization, semantic source coding, causal-graph posterior
//! learning via flow networks, real-valued logic, and channel models.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! at the crate root fix `f64`, which is what the CLI and the serialized
//! artifacts use.

#![forbid(unsafe_code)]

pub mod causal;
pub mod channel;
pub mod equilibria;
pub mod game;
pub mod logic;
pub mod matrix;
pub mod metrics;
pub mod scalar;
pub mod seeds;
pub mod semantics;
pub mod world;

pub use scalar::Scalar;

/// Scalar used by the CLI and all serialized artifacts.
pub type Real = f64;

pub type World64 = world::World<f64>;
pub type CopresheafIndex64 = semantics::CopresheafIndex<f64>;
pub type Prior64 = semantics::Prior<f64>;
pub type Codebook64 = channel::Codebook<f64>;
pub type PolicyPair64 = game::PolicyPair<f64>;
pub type GameConfig64 = game::GameConfig<f64>;
pub type VoronoiCode64 = equilibria::VoronoiCode;
pub type Scm64 = causal::Scm<f64>;
pub type FlowModel64 = causal::FlowModel<f64>;
