//! Training and synthesis toolkit for an LPCNet-style vocoder whose output
//! density is a mixture of Gaussians with a linear-prediction mean shift.

pub mod grad;
pub mod dsp;
pub mod lpmdn;
pub mod net;
pub mod model;
pub mod trainer;
pub mod config;
pub mod io;
pub mod metrics;
pub mod gradsuite;
