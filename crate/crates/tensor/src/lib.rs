//! Dense f64 tensor engine with a reverse-mode autodiff tape.
//!
//! The tape records every primitive applied during a forward pass and replays
//! it in reverse to accumulate gradients. Tensors are flat row-major buffers;
//! maps use `[H, W, C]` layout, kernels `[kh, kw, Cin, Cout]`, scalars `[1]`.
//!
//! A tape is built per forward/backward pass; long-lived parameters are plain
//! buffers owned by the caller and copied in as leaves each pass.

mod init;
mod tape;

pub use init::{glorot_uniform, sgd_step};
pub use tape::{DistanceKind, Padding, Tape, TensorError, TensorId};

/// Log-clamp floor used by [`Tape::cce_loss`] so confident wrong predictions
/// stay finite.
pub const CCE_LOG_FLOOR: f64 = 1e-12;
