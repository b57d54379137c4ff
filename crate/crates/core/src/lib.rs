//! Two-stage multichannel speech enhancement: a multi-output CRN denoiser,
//! a frequency-wise recurrent spatial filter and a single-output CRN
//! post-filter, plus classical baselines, scene simulation and metrics.

pub mod baselines;
pub mod crn;
pub mod dsp;
pub mod error;
pub mod harness;
pub mod loss;
pub mod metrics;
pub mod pipeline;
pub mod simkit;

pub use error::{Error, Result};
