//! Complex-valued layers on top of the autodiff graph, their parameter
//! storage, and a finite-difference gradient checker.
//!
//! Complex feature maps are channel-stacked real tensors `[B, 2C, F, T]`: the
//! first `C` channels hold real parts, the last `C` imaginary parts.

mod gradcheck;
mod layers;
mod store;

pub use gradcheck::{grad_check, probe_projection, GradCheckOptions, GradCheckReport};
pub use layers::{
    ComplexBatchNorm, ComplexConv2d, ComplexConvTranspose2d, ComplexLinear, ComplexLstm, Lstm, Prelu, TimeCrop,
};
pub use store::{Mode, ParamStore, Session, BN_EPS, BN_MOMENTUM};
