//! Optimizers, training loops, checkpointing, and gradient verification.

pub mod checkpoint;
pub mod gradcheck;
pub mod loops;
pub mod optim;
