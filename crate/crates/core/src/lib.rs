//! Quantum-inspired metric encoding for sample-limited offline reinforcement learning.
//!
//! The crate simulates small real-amplitude circuits exactly, trains a
//! reward-supervised encoder/decoder circuit with a derivative-free optimizer,
//! uses the encoder's latent register as a state representation for offline
//! SAC and IQL, and measures the Gromov delta-hyperbolicity of the resulting
//! embeddings.
//!
//! Basis convention: qubit `q` is bit `q` (least significant first) of the
//! basis index.

pub mod ansatz;
pub mod baselines;
pub mod dfo;
pub mod envdata;
pub mod error;
pub mod geom;
pub mod neural;
pub mod qme;
pub mod report;
pub mod rl;
pub mod statevector;

pub use error::{Error, Result};
