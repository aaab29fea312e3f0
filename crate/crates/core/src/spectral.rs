//! First and second derivatives of the top singular value `σ₁(W)`.
//!
//! With the thin SVD `W = Σₖ σₖ uₖ vₖᵀ` and a simple top singular value,
//!
//! ```text
//! ∂σ₁/∂W = u₁ v₁ᵀ
//! Δᵀ H Δ = Σ_{i≥2} σ₁ aᵢ² / (σ₁² − σᵢ²)
//!        + Σ_{j≥2} σ₁ bⱼ² / (σ₁² − σⱼ²)
//!        + 2 Σ_{k≥2} σₖ aₖ bₖ / (σ₁² − σₖ²)
//! ```
//!
//! where `aᵢ = uᵢᵀ Δ v₁` runs over a full basis of `Rᵐ`, `bⱼ = u₁ᵀ Δ vⱼ`
//! over a full basis of `Rⁿ`, and singular values past the thin factors are
//! zero. Components outside the thin factors are folded in through
//! `‖Δ v₁‖²` and `‖Δᵀ u₁‖²`, so the full bases are never built.

use thiserror::Error;

use crate::noise::{NoiseError, NoiseModel};
use crate::tensor::{dot, svd, LinalgError, Matrix, SvdFactors};

/// A top gap `σ₁² − σ₂²` at or below `GAP_RTOL · σ₁²` is degenerate.
pub const GAP_RTOL: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum SpectralError {
    #[error("layer {layer}: weights are zero, top singular direction undefined")]
    ZeroMatrix { layer: usize },
    #[error("layer {layer}: top singular value is not simple (gap {gap:e} <= floor {floor:e})")]
    Degenerate { layer: usize, gap: f64, floor: f64 },
    #[error("layer {layer}: direction is {got:?}, weights are {expected:?}")]
    ShapeMismatch {
        layer: usize,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
}

/// SVD of one weight matrix plus the quantities derived from it.
#[derive(Clone, Debug)]
pub struct SpectralState {
    pub layer: usize,
    pub factors: SvdFactors,
    /// `σ₁² − σ₂²`, or `σ₁²` for a single singular value.
    pub gap: f64,
    pub degenerate: bool,
    rows: usize,
    cols: usize,
}

/// Second-order statistics of `σ₁` against a layer's noise model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseContractions {
    /// `Jᵀ Σ̂ J`.
    pub jacobian_sigma_jacobian: f64,
    /// `⟨H, Σ̂⟩ = tr(H Σ̂)`; `None` when the top singular value is degenerate.
    pub hessian_sigma: Option<f64>,
}

impl SpectralState {
    pub fn new(layer: usize, weights: &Matrix) -> Result<Self, SpectralError> {
        let factors = svd(weights)?;
        let s1 = factors.sigma1();
        let s2 = factors.singular_values.get(1).copied().unwrap_or(0.0);
        let gap = s1 * s1 - s2 * s2;
        let degenerate = s1 == 0.0 || gap <= GAP_RTOL * s1 * s1;
        Ok(Self {
            layer,
            factors,
            gap,
            degenerate,
            rows: weights.rows(),
            cols: weights.cols(),
        })
    }

    pub fn sigma1(&self) -> f64 {
        self.factors.sigma1()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn u1(&self) -> &[f64] {
        self.factors.u(0)
    }

    pub fn v1(&self) -> &[f64] {
        self.factors.v(0)
    }

    /// `J = u₁ v₁ᵀ`.
    pub fn jacobian(&self) -> Matrix {
        let (u, v) = (self.u1(), self.v1());
        Matrix::from_fn(self.rows, self.cols, |i, j| u[i] * v[j])
    }

    /// `vec(u₁ v₁ᵀ) = v₁ ⊗ u₁`, column-major, unit norm.
    pub fn op_norm_jacobian(&self) -> Result<Vec<f64>, SpectralError> {
        if self.sigma1() == 0.0 {
            return Err(SpectralError::ZeroMatrix { layer: self.layer });
        }
        Ok(self.jacobian().into_vec())
    }

    /// `⟨J, Δ⟩ = u₁ᵀ Δ v₁`.
    pub fn directional_derivative(&self, delta: &Matrix) -> Result<f64, SpectralError> {
        self.check_shape(delta)?;
        let dv = delta.matvec(self.v1())?;
        Ok(dot(self.u1(), &dv))
    }

    /// `Δᵀ H Δ` for a direction `Δ` shaped like the weights.
    pub fn hessian_quadratic_form(&self, delta: &Matrix) -> Result<f64, SpectralError> {
        self.check_shape(delta)?;
        self.require_simple()?;
        let dv = delta.matvec(self.v1())?;
        let dtu = delta.t_matvec(self.u1())?;
        let a = self.factors.left.t_matvec(&dv)?;
        let b = self.factors.right.t_matvec(&dtu)?;
        Ok(self.quadratic_from_projections(&a, dot(&dv, &dv), &b, dot(&dtu, &dtu)))
    }

    /// `Jᵀ Σ̂ J` and `⟨H, Σ̂⟩` in one pass over the rows of `Ω`.
    ///
    /// `⟨H, Σ̂⟩ = (1/M) Σᵢ Wᵢᵀ H Wᵢ` with `Wᵢ` row `i` of `Ω` reshaped, and
    /// `Jᵀ Σ̂ J = (1/M) Σᵢ (u₁ᵀ Wᵢ v₁)²`, which is the first projection
    /// already needed for the Hessian term.
    pub fn noise_contractions(
        &self,
        noise: &NoiseModel,
    ) -> Result<NoiseContractions, SpectralError> {
        if noise.shape() != self.shape() {
            return Err(SpectralError::ShapeMismatch {
                layer: self.layer,
                expected: self.shape(),
                got: noise.shape(),
            });
        }
        let (wv, wtu) = noise.row_contractions(self.u1(), self.v1())?;
        let a = self.factors.left.t_matmul(&wv)?;
        let b = self.factors.right.t_matmul(&wtu)?;
        let batch = noise.batch_size() as f64;
        let rows = wv.cols();

        let jsj = (0..rows).map(|i| a[(0, i)] * a[(0, i)]).sum::<f64>() / batch;
        let hessian_sigma = if self.degenerate {
            None
        } else {
            let total: f64 = (0..rows)
                .map(|i| {
                    let (wvi, wtui) = (wv.col(i), wtu.col(i));
                    self.quadratic_from_projections(
                        a.col(i),
                        dot(wvi, wvi),
                        b.col(i),
                        dot(wtui, wtui),
                    )
                })
                .sum();
            let h_sigma = total / batch;
            debug_assert!(h_sigma >= -1e-10, "negative contraction {h_sigma}");
            Some(h_sigma)
        };
        Ok(NoiseContractions {
            jacobian_sigma_jacobian: jsj,
            hessian_sigma,
        })
    }

    /// `⟨H, Σ̂⟩` alone.
    pub fn hessian_sigma_contraction(&self, noise: &NoiseModel) -> Result<f64, SpectralError> {
        self.require_simple()?;
        let c = self.noise_contractions(noise)?;
        Ok(c.hessian_sigma.expect("checked non-degenerate"))
    }

    /// `Jᵀ Σ̂ J` alone.
    pub fn jacobian_sigma_jacobian(&self, noise: &NoiseModel) -> Result<f64, SpectralError> {
        Ok(self.noise_contractions(noise)?.jacobian_sigma_jacobian)
    }

    /// Quadratic form from `a = Uᵀ(Δv₁)`, `b = Vᵀ(Δᵀu₁)` and the full squared
    /// norms of `Δv₁` and `Δᵀu₁`.
    fn quadratic_from_projections(
        &self,
        a: &[f64],
        a_norm_sq: f64,
        b: &[f64],
        b_norm_sq: f64,
    ) -> f64 {
        let sv = &self.factors.singular_values;
        let s1 = sv[0];
        let s1sq = s1 * s1;
        let k = sv.len();
        let mut total = 0.0;
        let rank = self.factors.rank;
        for i in 1..k {
            let denom = s1sq - sv[i] * sv[i];
            total += s1 * (a[i] * a[i] + b[i] * b[i]) / denom;
            if i < rank {
                total += 2.0 * sv[i] * a[i] * b[i] / denom;
            }
        }
        // Remaining basis directions carry σ = 0, i.e. coefficient 1/σ₁.
        let a_proj_sq: f64 = a.iter().map(|x| x * x).sum();
        let b_proj_sq: f64 = b.iter().map(|x| x * x).sum();
        if k < self.rows {
            total += (a_norm_sq - a_proj_sq).max(0.0) / s1;
        }
        if k < self.cols {
            total += (b_norm_sq - b_proj_sq).max(0.0) / s1;
        }
        total
    }

    fn require_simple(&self) -> Result<(), SpectralError> {
        if self.degenerate {
            let s1 = self.sigma1();
            return Err(SpectralError::Degenerate {
                layer: self.layer,
                gap: self.gap,
                floor: GAP_RTOL * s1 * s1,
            });
        }
        Ok(())
    }

    fn check_shape(&self, delta: &Matrix) -> Result<(), SpectralError> {
        if delta.shape() != self.shape() {
            return Err(SpectralError::ShapeMismatch {
                layer: self.layer,
                expected: self.shape(),
                got: delta.shape(),
            });
        }
        Ok(())
    }
}

/// `‖W‖₂ = σ₁(W)`.
pub fn op_norm(weights: &Matrix) -> Result<f64, SpectralError> {
    Ok(svd(weights)?.sigma1())
}
