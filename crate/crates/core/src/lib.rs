//! Ordinal-prior disentanglement and self-training domain adaptation at desk
//! scale: a recursively conditional Gaussian chain prior over ordered class
//! anchors, diagonal-Gaussian posteriors fused per class by product of
//! experts, small MLP encoders/decoders with hand-derived reverse-mode
//! gradients, and a synthetic cross-domain ordinal benchmark.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod neural;
pub mod param;
pub mod prior;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod variational;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use prior::RcgParams;
pub use synth::SynthSpec;
pub use trainer::TrainConfig;
