//! Streaming video denoiser built around two forward recurrent modules: a
//! main module propagating history and a look-ahead module running `k` frames
//! ahead of it. The look-ahead feature is aligned back to the current frame
//! through a chain of warps; forward warping onto an enlarged canvas keeps
//! pixels that move out of frame in a border ring so the alignment can
//! recover them. The result is an online denoiser with fixed latency `k` and
//! memory independent of sequence length, together with offline, forward-only
//! and bidirectional baselines for comparison.
//!
//! The crate is organized as a library first; see the `examples/` directory
//! for one runnable program per capability and `src/bin/flostream.rs` for the
//! thin command-line wrapper.

pub mod autodiff;
pub mod cli;
pub mod conv;
pub mod data;
pub mod error;
pub mod eval;
pub mod flow;
pub mod net;
pub mod pipeline;
pub mod train;
pub mod types;
pub mod warp;

pub use error::{Error, Result};
pub use types::{
    ConfigMap, DenoiserConfig, FlowDirection, FlowField, Frame, MarginSpec, NoiseKind, NoiseSpec,
    VideoClip, WarpMode,
};
