use std::time::Instant;

use super::config::{DatasetKind, DriftMode, ExperimentConfig, SamplingMode};
use super::data::{load_mnist_idx, make_blobs, Dataset};
use super::ExperimentError;
use crate::dynamics::{
    layer_terms, network_terms, noise_increment, pathwise_increment, ExpectationIntegrator,
    NetworkTerms, Trajectory, TrajectoryMeta, TrajectoryRow,
};
use crate::mlp::{
    corrupt_labels, evaluate, mean_gradients, per_sample_gradients, Gradients, MlpState,
};
use crate::noise::build_noise_model;
use crate::spectral::SpectralState;
use crate::tensor::Rng;

/// Stream ids derived from the configured seeds.
const INIT_STREAM: u64 = 0;
const SAMPLING_STREAM: u64 = 1;
const NOISE_STREAM: u64 = 2;
const LABEL_STREAM: u64 = 3;
const DATA_STREAM: u64 = 4;

/// Output of one tracked training run.
#[derive(Clone, Debug)]
pub struct TrackedRun {
    pub trajectory: Trajectory,
    pub steps_run: u64,
    /// Full-data loss and accuracy at the final parameters (training labels).
    pub final_loss: f64,
    pub final_accuracy: f64,
    /// Per-step network sum of the first-order noise increments.
    pub noise_increments: Vec<f64>,
    pub wall_seconds: f64,
}

impl TrackedRun {
    pub fn final_log_k(&self) -> f64 {
        self.trajectory
            .last()
            .map_or(self.trajectory.z0, |r| r.k_observed.ln())
    }
}

pub fn build_dataset(cfg: &ExperimentConfig) -> Result<Dataset, ExperimentError> {
    match cfg.dataset {
        DatasetKind::Blobs => Ok(make_blobs(
            &mut Rng::derive(cfg.data_seed, DATA_STREAM),
            cfg.n_samples,
            cfg.n_features,
            cfg.n_classes,
            cfg.spread,
        )?),
        DatasetKind::Mnist => {
            let dir = std::path::Path::new(&cfg.mnist_dir);
            let subset = (cfg.mnist_subset > 0).then_some(cfg.mnist_subset);
            Ok(load_mnist_idx(
                &dir.join("train-images-idx3-ubyte"),
                &dir.join("train-labels-idx1-ubyte"),
                subset,
            )?)
        }
    }
}

pub fn run_tracked_training(cfg: &ExperimentConfig) -> Result<TrackedRun, ExperimentError> {
    let data = build_dataset(cfg)?;
    track_on(cfg, &data)
}

/// Mini-batch index source. Epoch mode takes consecutive slices of a
/// permutation redrawn each epoch (a short tail is dropped); iid mode
/// draws the first `batch` entries of a partial shuffle every step.
struct Sampler {
    rng: Rng,
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    mode: SamplingMode,
}

impl Sampler {
    fn new(rng: Rng, n: usize, batch: usize, mode: SamplingMode) -> Self {
        Self {
            rng,
            order: (0..n).collect(),
            pos: n,
            batch,
            mode,
        }
    }

    fn next_batch(&mut self) -> &[usize] {
        if self.mode == SamplingMode::Iid {
            let n = self.order.len();
            for i in 0..self.batch {
                let j = i + self.rng.below(n - i);
                self.order.swap(i, j);
            }
            return &self.order[..self.batch];
        }
        if self.pos + self.batch > self.order.len() {
            self.rng.shuffle(&mut self.order);
            self.pos = 0;
        }
        let start = self.pos;
        self.pos += self.batch;
        &self.order[start..self.pos]
    }
}

fn spectral_states(state: &MlpState) -> Result<Vec<SpectralState>, ExperimentError> {
    state
        .weights
        .iter()
        .enumerate()
        .map(|(l, w)| SpectralState::new(l, w).map_err(ExperimentError::from))
        .collect()
}

fn numerical(step: u64, what: impl Into<String>) -> ExperimentError {
    ExperimentError::Numerical {
        step,
        what: what.into(),
    }
}

/// Trains on `data` per `cfg`, recording SDE terms, predictions and the
/// observed bound.
pub fn track_on(cfg: &ExperimentConfig, data: &Dataset) -> Result<TrackedRun, ExperimentError> {
    cfg.validate()?;
    if data.len() < cfg.batch_size {
        return Err(ExperimentError::Config(format!(
            "dataset has {} samples, fewer than batch_size {}",
            data.len(),
            cfg.batch_size
        )));
    }
    let started = Instant::now();
    let noise = cfg.supervision_noise();
    let (signal, noise_scale) = noise.mixing();
    let spec = cfg.network(data.dim(), data.num_classes)?;
    let mut state = MlpState::kaiming(&spec, &mut Rng::derive(cfg.init_seed, INIT_STREAM), cfg.eta);
    let mut sampler = Sampler::new(
        Rng::derive(cfg.sampling_seed, SAMPLING_STREAM),
        data.len(),
        cfg.batch_size,
        cfg.sampling,
    );
    let mut noise_rng = Rng::derive(cfg.noise_seed, NOISE_STREAM);
    let labels = if cfg.label_eps > 0.0 {
        corrupt_labels(
            &mut Rng::derive(cfg.noise_seed, LABEL_STREAM),
            &data.labels,
            cfg.label_eps,
            data.num_classes,
        )
    } else {
        data.labels.clone()
    };
    let full_drift = match cfg.drift {
        DriftMode::Full => true,
        DriftMode::Batch => false,
        DriftMode::Auto => data.len() <= cfg.full_drift_limit,
    };

    let mut spectral = spectral_states(&state)?;
    let meta = TrajectoryMeta {
        init_seed: cfg.init_seed,
        sampling_seed: cfg.sampling_seed,
        noise_seed: cfg.noise_seed,
        config_hash: cfg.hash(),
    };
    let mut trajectory =
        Trajectory::new(meta, spectral.iter().map(SpectralState::sigma1).collect());
    if !trajectory.z0.is_finite() {
        return Err(numerical(0, "initial log K is not finite"));
    }
    let mut expectation = ExpectationIntegrator::new(trajectory.z0);
    let mut z_path = trajectory.z0;
    let mut noise_integral = 0.0;
    let mut noise_increments = Vec::with_capacity(cfg.steps as usize);
    let mut held: Option<NetworkTerms> = None;
    let mut previous_kappa: Vec<Option<f64>> = vec![None; state.num_layers()];
    let record_stride = cfg.effective_record_stride();
    let mut steps_run = 0;

    for k in 1..=cfg.steps {
        let (xb, yb) = {
            let idx = sampler.next_batch();
            let (x, _) = data.gather(idx);
            (x, idx.iter().map(|&i| labels[i]).collect::<Vec<_>>())
        };
        let samples = per_sample_gradients(&state, &xb, &yb, cfg.loss, &noise, &mut noise_rng)?;
        let batch_grad = samples.mean_gradients();
        if cfg!(debug_assertions) && noise_scale == 0.0 {
            let (direct, _) = mean_gradients(&state, &xb, &yb, cfg.loss)?;
            for (a, b) in batch_grad.weights.iter().zip(&direct.weights) {
                let dev = a
                    .sub(&b.scaled(signal))
                    .map_err(|e| numerical(k, e.to_string()))?;
                debug_assert!(
                    dev.max_abs() <= 1e-10 * (1.0 + b.max_abs()),
                    "row mean drift at step {k}"
                );
            }
        }

        let (drift, full_loss): (Gradients, Option<f64>) = if full_drift {
            let (mut g, loss) = mean_gradients(&state, &data.inputs, &labels, cfg.loss)?;
            g.weights.iter_mut().for_each(|w| w.scale(signal));
            (g, Some(loss))
        } else {
            (batch_grad.clone(), None)
        };

        // Full-data loss at the parameters this step starts from.
        let loss_now = match (cfg.stop_loss > 0.0, full_loss) {
            (false, _) => None,
            (true, Some(l)) => Some(l),
            (true, None) => Some(evaluate(&state, &data.inputs, &labels, cfg.loss)?.0),
        };
        let stop = loss_now.is_some_and(|l| l < cfg.stop_loss);

        if (k - 1) % cfg.noise_stride == 0 || held.is_none() {
            let mut layers = Vec::with_capacity(spectral.len());
            for (l, ss) in spectral.iter().enumerate() {
                let nm = build_noise_model(&samples.layers[l])?;
                let t = layer_terms(ss, &nm, &drift.weights[l], cfg.eta, previous_kappa[l])?;
                if !(t.mu.is_finite() && t.kappa.is_finite() && t.lambda_sq.is_finite()) {
                    return Err(numerical(k, format!("non-finite terms in layer {l}")));
                }
                previous_kappa[l] = Some(t.kappa);
                trajectory.total_evaluations += 1;
                trajectory.degenerate_evaluations += u64::from(t.degenerate);
                layers.push(t);
            }
            held = Some(network_terms(layers)?);
        }
        let terms = held.as_ref().expect("terms evaluated on first step");
        let point = expectation.advance(terms, cfg.eta);

        let mut step_noise = 0.0;
        for (l, ss) in spectral.iter().enumerate() {
            let delta = batch_grad.weights[l].scaled(-cfg.eta);
            z_path += pathwise_increment(ss, &delta)?.value;
            if full_drift {
                step_noise +=
                    noise_increment(ss, &batch_grad.weights[l], &drift.weights[l], cfg.eta)?;
            }
        }
        noise_integral += step_noise;
        noise_increments.push(step_noise);

        state
            .sgd_step(&batch_grad)
            .map_err(|e| numerical(k, e.to_string()))?;
        spectral = spectral_states(&state)?;
        let sigma1: Vec<f64> = spectral.iter().map(SpectralState::sigma1).collect();
        let k_observed: f64 = sigma1.iter().product();
        if !(k_observed.is_finite() && z_path.is_finite() && point.e_z.is_finite()) {
            return Err(numerical(k, "non-finite Lipschitz bound or prediction"));
        }
        steps_run = k;

        if k % record_stride == 0 || k == cfg.steps || stop {
            trajectory.push(TrajectoryRow {
                step: k,
                t: k as f64 * cfg.eta,
                terms: terms.clone(),
                sigma1_observed: sigma1,
                z_pred_expectation: point.e_z,
                z_pred_pathwise: z_path,
                var_z: point.var_z,
                e_k: point.e_k,
                var_k: point.var_k,
                k_observed,
                noise_integral,
            })?;
        }
        if stop {
            break;
        }
    }

    let (final_loss, final_accuracy) = evaluate(&state, &data.inputs, &labels, cfg.loss)?;
    Ok(TrackedRun {
        trajectory,
        steps_run,
        final_loss,
        final_accuracy,
        noise_increments,
        wall_seconds: started.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epoch_batches_partition_the_epoch() {
        let mut s = Sampler::new(Rng::new(1), 10, 3, SamplingMode::Epoch);
        let mut seen: Vec<usize> = (0..3).flat_map(|_| s.next_batch().to_vec()).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 9);
    }

    #[test]
    fn iid_batches_have_distinct_members() {
        let mut s = Sampler::new(Rng::new(2), 10, 4, SamplingMode::Iid);
        let mut union = std::collections::BTreeSet::new();
        for _ in 0..20 {
            let mut b = s.next_batch().to_vec();
            union.extend(b.iter().copied());
            b.sort();
            b.dedup();
            assert_eq!(b.len(), 4);
        }
        assert_eq!(union.len(), 10);
    }
}
