//! Core library for small-scale online continual learning experiments with
//! hybrid CTC/attention sequence recognizers.

pub mod autodiff;
pub mod ctc;
pub mod data;
pub mod metrics;
pub mod model;
pub mod ocl;
pub mod selftrain;
pub mod stream;
