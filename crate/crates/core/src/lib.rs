//! Stochastic dynamics of the Lipschitz bound `K = Π_ℓ σ₁(θ⁽ℓ⁾)` of a
//! feed-forward ReLU network under SGD.
//!
//! [`noise`] estimates each layer's mini-batch gradient-noise covariance in
//! low-rank form, [`spectral`] supplies the first and second derivatives of
//! `σ₁`, and [`dynamics`] combines them into drift, diffusion and
//! entropy-production terms with their integrated statistics.
//! [`experiment`] drives instrumented training runs.

pub mod dynamics;
pub mod experiment;
pub mod mlp;
pub mod noise;
pub mod oracle;
pub mod spectral;
pub mod tensor;

pub use dynamics::{LayerTerms, NetworkTerms, Trajectory, TrajectoryRow};
pub use experiment::{Dataset, ExperimentConfig, ExperimentError};
pub use mlp::{MlpSpec, MlpState, PerSampleGradBatch, SupervisionNoise};
pub use noise::{build_noise_model, NoiseModel};
pub use spectral::SpectralState;
pub use tensor::{Matrix, Rng, SvdFactors};
