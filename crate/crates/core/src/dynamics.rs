//! Drift, diffusion and entropy-production terms of `log σ₁` per layer,
//! their network aggregates, and the statistics of `Z = Σ_ℓ log σ₁⁽ℓ⁾` and
//! `K = e^Z`.
//!
//! Per layer, at parameters `θ` with learning rate `η`:
//!
//! ```text
//! μ  = ⟨J, −∇L⟩ / σ₁
//! λ² = (η / σ₁²) · Jᵀ Σ̂ J
//! κ  = (η / 2σ₁) · ⟨H, Σ̂⟩
//! ```
//!
//! Time is `t = kη` and integrals are left Riemann sums with `Δs = η`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::noise::NoiseModel;
use crate::spectral::{SpectralError, SpectralState};
use crate::tensor::Matrix;

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("layer {layer}: σ₁ = 0, terms are undefined")]
    ZeroNorm { layer: usize },
    #[error("learning rate must be positive, got {0}")]
    InvalidEta(f64),
    #[error("network terms need at least one layer")]
    NoLayers,
    #[error("batch-size law needs at least 2 distinct batch sizes, got {0}")]
    TooFewBatchSizes(usize),
    #[error("variance at batch size {batch} is {variance}, expected positive and finite")]
    InvalidVariance { batch: usize, variance: f64 },
    #[error("trajectory rows must have increasing time and positive K (step {step})")]
    InvalidRow { step: u64 },
    #[error(transparent)]
    Spectral(#[from] SpectralError),
}

/// SDE coefficients of one layer at one step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerTerms {
    pub layer: usize,
    pub mu: f64,
    pub kappa: f64,
    pub lambda_sq: f64,
    pub sigma1: f64,
    /// `κ` was carried forward because the top singular value was not simple.
    pub degenerate: bool,
}

/// Layer terms at `θ` from its spectral state, its noise model and the
/// drift gradient `∇⁽ℓ⁾L` (shaped like the weights).
///
/// On a degenerate spectrum `κ` is taken from `previous_kappa` (0 if none).
pub fn layer_terms(
    ss: &SpectralState,
    nm: &NoiseModel,
    mean_grad: &Matrix,
    eta: f64,
    previous_kappa: Option<f64>,
) -> Result<LayerTerms, DynamicsError> {
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(DynamicsError::InvalidEta(eta));
    }
    let s1 = ss.sigma1();
    if s1 == 0.0 {
        return Err(DynamicsError::ZeroNorm { layer: ss.layer });
    }
    let mu = -ss.directional_derivative(mean_grad)? / s1;
    let c = ss.noise_contractions(nm)?;
    let lambda_sq = eta / (s1 * s1) * c.jacobian_sigma_jacobian;
    let (kappa, degenerate) = match c.hessian_sigma {
        Some(h) => (eta / (2.0 * s1) * h, false),
        None => (previous_kappa.unwrap_or(0.0), true),
    };
    Ok(LayerTerms {
        layer: ss.layer,
        mu,
        kappa,
        lambda_sq,
        sigma1: s1,
        degenerate,
    })
}

/// Network aggregates `μ_Z = Σ μ`, `κ_Z = Σ κ`, `λ_Z² = Σ λ²`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkTerms {
    pub mu_z: f64,
    pub kappa_z: f64,
    pub lambda_z_sq: f64,
    pub layers: Vec<LayerTerms>,
}

impl NetworkTerms {
    /// Constant terms with no per-layer breakdown, for synthetic inputs.
    pub fn constant(mu_z: f64, kappa_z: f64, lambda_z_sq: f64) -> Self {
        Self {
            mu_z,
            kappa_z,
            lambda_z_sq,
            layers: Vec::new(),
        }
    }

    pub fn degenerate_layers(&self) -> usize {
        self.layers.iter().filter(|l| l.degenerate).count()
    }
}

pub fn network_terms(layers: Vec<LayerTerms>) -> Result<NetworkTerms, DynamicsError> {
    if layers.is_empty() {
        return Err(DynamicsError::NoLayers);
    }
    Ok(NetworkTerms {
        mu_z: layers.iter().map(|l| l.mu).sum(),
        kappa_z: layers.iter().map(|l| l.kappa).sum(),
        lambda_z_sq: layers.iter().map(|l| l.lambda_sq).sum(),
        layers,
    })
}

/// Predicted moments of `Z(t)` and `K(t)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpectationPoint {
    pub t: f64,
    pub e_z: f64,
    pub var_z: f64,
    pub e_k: f64,
    pub var_k: f64,
}

impl ExpectationPoint {
    fn from_moments(t: f64, e_z: f64, var_z: f64) -> Self {
        let e_k = (e_z + 0.5 * var_z).exp();
        Self {
            t,
            e_z,
            var_z,
            e_k,
            var_k: e_k * e_k * var_z.exp_m1(),
        }
    }
}

/// Running left-Riemann integral of the network terms.
#[derive(Clone, Debug)]
pub struct ExpectationIntegrator {
    z0: f64,
    drift: f64,
    variance: f64,
    t: f64,
}

impl ExpectationIntegrator {
    pub fn new(z0: f64) -> Self {
        Self {
            z0,
            drift: 0.0,
            variance: 0.0,
            t: 0.0,
        }
    }

    /// Integrates terms evaluated at the start of a step of length `dt`.
    pub fn advance(&mut self, terms: &NetworkTerms, dt: f64) -> ExpectationPoint {
        self.drift += (terms.mu_z + terms.kappa_z - 0.5 * terms.lambda_z_sq) * dt;
        self.variance += terms.lambda_z_sq * dt;
        self.t += dt;
        self.point()
    }

    pub fn point(&self) -> ExpectationPoint {
        ExpectationPoint::from_moments(self.t, self.z0 + self.drift, self.variance)
    }
}

/// Moments after each step; `terms[k]` is evaluated at the start of step `k`.
pub fn integrate_expectation(terms: &[NetworkTerms], z0: f64, eta: f64) -> Vec<ExpectationPoint> {
    let mut acc = ExpectationIntegrator::new(z0);
    terms.iter().map(|t| acc.advance(t, eta)).collect()
}

/// Change of `log σ₁` predicted from a realized update `Δ`:
/// `(JᵀΔ + ½ ΔᵀHΔ)/σ₁ − ½ (JᵀΔ/σ₁)²`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PathwiseIncrement {
    pub value: f64,
    /// The curvature term was dropped.
    pub degenerate: bool,
}

pub fn pathwise_increment(
    ss: &SpectralState,
    delta: &Matrix,
) -> Result<PathwiseIncrement, DynamicsError> {
    let s1 = ss.sigma1();
    if s1 == 0.0 {
        return Err(DynamicsError::ZeroNorm { layer: ss.layer });
    }
    let first = ss.directional_derivative(delta)? / s1;
    let (curvature, degenerate) = if ss.degenerate {
        (0.0, true)
    } else {
        (0.5 * ss.hessian_quadratic_form(delta)? / s1, false)
    };
    Ok(PathwiseIncrement {
        value: first + curvature - 0.5 * first * first,
        degenerate,
    })
}

/// Noise part `−η ⟨J, ĝ − ∇L⟩ / σ₁` of one step's first-order increment.
pub fn noise_increment(
    ss: &SpectralState,
    batch_grad: &Matrix,
    drift_grad: &Matrix,
    eta: f64,
) -> Result<f64, DynamicsError> {
    let s1 = ss.sigma1();
    if s1 == 0.0 {
        return Err(DynamicsError::ZeroNorm { layer: ss.layer });
    }
    let diff = batch_grad.sub(drift_grad).map_err(SpectralError::from)?;
    Ok(-eta * ss.directional_derivative(&diff)? / s1)
}

/// Least-squares fit of `log Var` against `log M`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchLawFit {
    pub slope: f64,
    pub intercept: f64,
}

pub fn batch_size_variance_law(points: &[(usize, f64)]) -> Result<BatchLawFit, DynamicsError> {
    let mut sizes: Vec<usize> = points.iter().map(|p| p.0).collect();
    sizes.sort_unstable();
    sizes.dedup();
    if sizes.len() < 2 {
        return Err(DynamicsError::TooFewBatchSizes(sizes.len()));
    }
    for &(batch, variance) in points {
        if !(variance > 0.0 && variance.is_finite()) {
            return Err(DynamicsError::InvalidVariance { batch, variance });
        }
    }
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| (p.0 as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let slope = sxy / sxx;
    Ok(BatchLawFit {
        slope,
        intercept: my - slope * mx,
    })
}

/// One recorded step. Terms are evaluated at the parameters before the
/// update of step `step`; predictions and `k_observed` are after it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub step: u64,
    pub t: f64,
    pub terms: NetworkTerms,
    pub sigma1_observed: Vec<f64>,
    pub z_pred_expectation: f64,
    pub z_pred_pathwise: f64,
    pub var_z: f64,
    pub e_k: f64,
    pub var_k: f64,
    pub k_observed: f64,
    /// Running sum of [`noise_increment`] over all layers and steps.
    pub noise_integral: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMeta {
    pub init_seed: u64,
    pub sampling_seed: u64,
    pub noise_seed: u64,
    pub config_hash: String,
}

/// Predicted and observed Lipschitz quantities over a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub meta: TrajectoryMeta,
    /// `log K(0)` from the initial weights.
    pub z0: f64,
    pub sigma1_initial: Vec<f64>,
    pub rows: Vec<TrajectoryRow>,
    /// Layer-steps whose `κ` was carried forward.
    pub degenerate_evaluations: u64,
    pub total_evaluations: u64,
}

impl Trajectory {
    pub fn new(meta: TrajectoryMeta, sigma1_initial: Vec<f64>) -> Self {
        let z0 = sigma1_initial.iter().map(|s| s.ln()).sum();
        Self {
            meta,
            z0,
            sigma1_initial,
            ..Self::default()
        }
    }

    pub fn push(&mut self, row: TrajectoryRow) -> Result<(), DynamicsError> {
        let increasing = self.rows.last().is_none_or(|last| row.t > last.t);
        if !increasing || !(row.k_observed > 0.0) {
            return Err(DynamicsError::InvalidRow { step: row.step });
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn last(&self) -> Option<&TrajectoryRow> {
        self.rows.last()
    }

    pub fn k_initial(&self) -> f64 {
        self.z0.exp()
    }

    pub fn degenerate_fraction(&self) -> f64 {
        if self.total_evaluations == 0 {
            0.0
        } else {
            self.degenerate_evaluations as f64 / self.total_evaluations as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlp::PerSampleGradBatch;
    use crate::noise::build_noise_model;
    use crate::tensor::{gaussian_matrix, Rng};

    /// `Ω = I`, one row per coordinate, so `Σ̂ = I`.
    fn identity_noise(m: usize, n: usize) -> NoiseModel {
        NoiseModel::from_omega(0, m, n, &Matrix::identity(m * n), 1).unwrap()
    }

    #[test]
    fn identity_noise_is_identity() {
        let nm = identity_noise(2, 2);
        for k in 0..4 {
            let mut e = vec![0.0; 4];
            e[k] = 1.0;
            assert!((nm.quadratic_form(&e).unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn diag_two_one_terms() {
        let ss = SpectralState::new(0, &Matrix::from_diag(&[2.0, 1.0])).unwrap();
        let nm = identity_noise(2, 2);
        let g = 0.7;
        let grad = ss.jacobian().scaled(g);
        let t = layer_terms(&ss, &nm, &grad, 0.1, None).unwrap();
        assert!((t.mu + g / 2.0).abs() < 1e-14);
        assert!((t.kappa - 1.0 / 30.0).abs() < 1e-12);
        assert!((t.lambda_sq - 0.1 / 4.0).abs() < 1e-12);
        assert!(!t.degenerate);
    }

    #[test]
    fn zero_noise_terms() {
        let ss = SpectralState::new(0, &Matrix::from_diag(&[2.0, 1.0])).unwrap();
        let cols = Matrix::from_fn(4, 3, |r, _| r as f64);
        let nm = build_noise_model(&PerSampleGradBatch::dense(0, 2, 2, cols).unwrap()).unwrap();
        let grad = Matrix::from_rows(&[&[1.0, 0.5], &[0.0, 2.0]]).unwrap();
        let t = layer_terms(&ss, &nm, &grad, 0.05, None).unwrap();
        assert_eq!(t.kappa, 0.0);
        assert_eq!(t.lambda_sq, 0.0);
        assert!((t.mu + 0.5).abs() < 1e-15);
    }

    #[test]
    fn degenerate_carries_kappa() {
        let ss = SpectralState::new(0, &Matrix::identity(2)).unwrap();
        let nm = identity_noise(2, 2);
        let t = layer_terms(&ss, &nm, &Matrix::zeros(2, 2), 0.1, Some(0.25)).unwrap();
        assert!(t.degenerate);
        assert_eq!(t.kappa, 0.25);
    }

    #[test]
    fn bad_eta_and_zero_norm() {
        let nm = identity_noise(2, 2);
        let ss = SpectralState::new(0, &Matrix::from_diag(&[2.0, 1.0])).unwrap();
        assert!(matches!(
            layer_terms(&ss, &nm, &Matrix::zeros(2, 2), 0.0, None),
            Err(DynamicsError::InvalidEta(_))
        ));
        let zero = SpectralState::new(1, &Matrix::zeros(2, 2)).unwrap();
        assert!(matches!(
            layer_terms(&zero, &nm, &Matrix::zeros(2, 2), 0.1, None),
            Err(DynamicsError::ZeroNorm { layer: 1 })
        ));
    }

    fn lt(mu: f64, kappa: f64, lambda_sq: f64) -> LayerTerms {
        LayerTerms {
            layer: 0,
            mu,
            kappa,
            lambda_sq,
            sigma1: 1.0,
            degenerate: false,
        }
    }

    #[test]
    fn network_sums() {
        let one = network_terms(vec![lt(0.3, 0.1, 0.2)]).unwrap();
        assert_eq!((one.mu_z, one.kappa_z, one.lambda_z_sq), (0.3, 0.1, 0.2));
        let two = network_terms(vec![lt(0.0, 0.0, 3.0), lt(0.0, 0.0, 4.0)]).unwrap();
        assert_eq!(two.lambda_z_sq, 7.0);
        let many = network_terms(vec![lt(0.25, 0.0, 0.0); 4]).unwrap();
        assert_eq!(many.mu_z, 1.0);
        assert!(matches!(
            network_terms(vec![]),
            Err(DynamicsError::NoLayers)
        ));
    }

    #[test]
    fn constant_coefficient_statistics() {
        let eta = 0.01;
        let steps = 1000;
        let z0 = 2f64.ln();
        let drift = vec![NetworkTerms::constant(0.1, 0.05, 0.0); steps];
        let last = *integrate_expectation(&drift, z0, eta).last().unwrap();
        assert!((last.e_k - 2.0 * 1.5f64.exp()).abs() < 1e-12 * last.e_k);
        assert_eq!(last.var_k, 0.0);

        let noisy = vec![NetworkTerms::constant(0.1, 0.05, 0.02); steps];
        let last = *integrate_expectation(&noisy, z0, eta).last().unwrap();
        let ek = 2.0 * 1.5f64.exp();
        assert!((last.e_k - ek).abs() < 1e-12 * ek);
        let vk = ek * ek * (0.2f64.exp() - 1.0);
        assert!((last.var_k - vk).abs() < 1e-12 * vk);

        let zero = vec![NetworkTerms::constant(0.0, 0.0, 0.0); 10];
        for p in integrate_expectation(&zero, z0, eta) {
            assert!((p.e_k - 2.0).abs() < 1e-15 && p.var_k == 0.0);
        }
    }

    #[test]
    fn pathwise_zero_update() {
        let ss = SpectralState::new(0, &Matrix::from_diag(&[2.0, 1.0])).unwrap();
        let inc = pathwise_increment(&ss, &Matrix::zeros(2, 2)).unwrap();
        assert_eq!(inc.value, 0.0);
    }

    #[test]
    fn pathwise_matches_log_ratio() {
        let mut rng = Rng::new(41);
        let w = gaussian_matrix(&mut rng, 5, 4, 1.0);
        let d = gaussian_matrix(&mut rng, 5, 4, 1.0);
        let ss = SpectralState::new(0, &w).unwrap();
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for &eta in &[1e-2, 3e-3, 1e-3, 3e-4, 1e-4] {
            let step = d.scaled(-eta);
            let mut next = w.clone();
            next.axpy(1.0, &step).unwrap();
            let exact = (SpectralState::new(0, &next).unwrap().sigma1() / ss.sigma1()).ln();
            let err = (pathwise_increment(&ss, &step).unwrap().value - exact).abs();
            xs.push(eta.ln());
            ys.push(err.max(1e-300).ln());
        }
        let n = xs.len() as f64;
        let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
        let slope = xs
            .iter()
            .zip(&ys)
            .map(|(x, y)| (x - mx) * (y - my))
            .sum::<f64>()
            / xs.iter().map(|x| (x - mx) * (x - mx)).sum::<f64>();
        assert!(slope >= 1.9, "slope {slope}");
    }

    #[test]
    fn batch_law_synthetic() {
        let pts: Vec<(usize, f64)> = [32, 64, 128, 256]
            .iter()
            .map(|&m| (m, 3.0 / m as f64))
            .collect();
        let fit = batch_size_variance_law(&pts).unwrap();
        assert!((fit.slope + 1.0).abs() < 1e-12);
        assert!((pts[0].1 / pts[1].1 - 2.0).abs() < 1e-12);
        assert!(matches!(
            batch_size_variance_law(&[(32, 1.0), (32, 2.0)]),
            Err(DynamicsError::TooFewBatchSizes(1))
        ));
        assert!(batch_size_variance_law(&[(32, 1.0), (64, 0.0)]).is_err());
    }

    #[test]
    fn trajectory_rejects_bad_rows() {
        let mut tr = Trajectory::new(TrajectoryMeta::default(), vec![2.0, 1.5]);
        assert!((tr.k_initial() - 3.0).abs() < 1e-15);
        let row = TrajectoryRow {
            step: 1,
            t: 0.01,
            terms: NetworkTerms::constant(0.0, 0.0, 0.0),
            sigma1_observed: vec![2.0, 1.5],
            z_pred_expectation: 0.0,
            z_pred_pathwise: 0.0,
            var_z: 0.0,
            e_k: 3.0,
            var_k: 0.0,
            k_observed: 3.0,
            noise_integral: 0.0,
        };
        tr.push(row.clone()).unwrap();
        assert!(tr.push(row.clone()).is_err());
        let mut bad = row;
        bad.t = 0.02;
        bad.k_observed = 0.0;
        assert!(tr.push(bad).is_err());
    }
}
