//! Stereo disparity network with multi-scale feature fusion, a
//! skip-connection hourglass over a correlation cost volume and stacked
//! warp-guided residual refinement, built on a small reverse-mode autodiff
//! engine.
//!
//! The crate needs only `alloc`; disable the default `std` feature for
//! `no_std` targets. File formats and the command line live in the `msfnet`
//! crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod config;
pub mod conv;
pub mod correlation;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod msfm;
pub mod network;
pub mod optim;
pub mod params;
pub mod reference;
pub mod schm;
pub mod sgrm;
pub mod stereo;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;
mod warp;

pub use config::{FeatureRouting, NetConfig, WidthMultiplier};
pub use conv::ConvSpec;
pub use correlation::CorrSpec;
pub use error::{Error, Result};
pub use network::{NetOutputs, Network};
pub use params::{ConvLayer, Forward, Init, Mode, ParamId, ParamStore};
pub use stereo::{epe, three_px_error, DisparityMap, Mask};
pub use tape::{Tape, Var};
pub use tensor::{Scalar, Shape, Tensor};
