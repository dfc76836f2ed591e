//! Self-supervised video pretraining by tracking synthetic moving patches.
//!
//! Patches cut from a clip are pasted back along random trajectories; a 3D
//! CNN encoder plus a small prediction head learns to follow each patch
//! from its first-frame box. The learned encoder is then evaluated with a
//! linear probe and with nearest-neighbour clip retrieval.

pub mod checkpoint;
pub mod compositor;
pub mod config;
pub mod dataset;
pub mod error;
pub mod geometry;
pub mod io;
pub mod model;
pub mod nn;
pub mod objective;
pub mod optim;
pub mod seeding;
pub mod trainer;
pub mod trajsynth;
pub mod transfer;

pub use error::{CtpError, Result};
