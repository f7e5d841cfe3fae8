//! Radar precipitation nowcasting and estimation toolkit.
//!
//! A valid-convolution U-Net trained in two phases (earth-mover reflectivity
//! pre-training, then fine-tuning with a differentiable CSI loss or the
//! cross-entropy/focal alternatives), together with the persistence and Z-R
//! baselines, verification metrics and a deterministic synthetic data source.

pub mod autograd;
pub mod dataset;
pub mod grid;
pub mod model;
pub mod tensor;
pub mod baselines;
pub mod losses;
pub mod metrics;
pub mod synth;
pub mod trainer;
pub mod cli;
