//! Shared fixtures for the kernel benchmarks.

use lipsde_core::experiment::make_blobs;
use lipsde_core::mlp::{per_sample_gradients, Loss, SampleGradients};
use lipsde_core::{Matrix, MlpSpec, MlpState, Rng, SupervisionNoise};

/// A Kaiming-initialized network with one mini-batch of blobs data.
pub struct Fixture {
    pub state: MlpState,
    pub inputs: Matrix,
    pub labels: Vec<usize>,
}

impl Fixture {
    /// `widths` includes input and output; `batch` samples.
    pub fn new(widths: &[usize], batch: usize, seed: u64) -> Self {
        let (d, c) = (widths[0], *widths.last().expect("nonempty widths"));
        let data = make_blobs(&mut Rng::derive(seed, 4), batch, d, c, 0.5).expect("blobs");
        let spec = MlpSpec::from_widths(widths).expect("widths");
        Self {
            state: MlpState::kaiming(&spec, &mut Rng::derive(seed, 0), 0.01),
            inputs: data.inputs,
            labels: data.labels,
        }
    }

    pub fn gradients(&self) -> SampleGradients {
        per_sample_gradients(
            &self.state,
            &self.inputs,
            &self.labels,
            Loss::CrossEntropy,
            &SupervisionNoise::none(),
            &mut Rng::new(0),
        )
        .expect("per-sample gradients")
    }
}
