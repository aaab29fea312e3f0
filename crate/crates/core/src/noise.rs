//! Low-rank model of the per-layer mini-batch gradient-noise covariance.
//!
//! For a batch of `M` per-sample gradients `gᵢ = vec(∇⁽ℓ⁾ ℓ(θ; xᵢ, yᵢ))`
//! with batch mean `ḡ`, the deviation matrix is
//!
//! ```text
//! Ω = (1/√(M−1)) · [ (g₁ − ḡ)ᵀ ; … ; (g_M − ḡ)ᵀ ]      (M × mn)
//! Σ̂ = (1/M) · Ωᵀ Ω                                    (mn × mn, never formed)
//! ```
//!
//! The `1/(M−1)` factor makes `ΩᵀΩ` the unbiased sample covariance of a
//! single instance gradient; the extra `1/M` turns it into the covariance of
//! the batch mean. Everything downstream only needs contractions of `Σ̂`
//! with a handful of vectors, which cost `O(M·mn)` through `Ω`.

use std::sync::OnceLock;

use thiserror::Error;

use crate::mlp::{GradRows, PerSampleGradBatch};
use crate::tensor::{dot, gemm, sym_eig, LinalgError, Matrix, SymEig};

/// Gram eigenvalues below `PINV_RTOL · Λ_max` are treated as zero.
pub const PINV_RTOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum NoiseError {
    #[error("noise covariance needs at least 2 samples, got {0}")]
    BatchTooSmall(usize),
    #[error("vector of length {got}, layer has {expected} parameters")]
    ShapeMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Implicit representation of `Ω`.
#[derive(Clone, Debug)]
enum Omega {
    /// Row `i` is `c · (s·δᵢ aᵢᵀ − Ḡ)` with `c = 1/√(M−1)`.
    Outer {
        deltas: Matrix,
        inputs: Matrix,
        scale: f64,
        mean: Matrix,
        norm: f64,
    },
    /// `mn × rows`; column `i` is row `i` of `Ω`.
    Dense(Matrix),
}

/// Centered, scaled deviation matrix `Ω` of one layer together with its
/// small Gram matrix `(1/M) Ω Ωᵀ`. The Gram eigendecomposition is only
/// needed for `Σ̂^{1/2}` and is computed on first use.
#[derive(Clone, Debug)]
pub struct NoiseModel {
    pub layer: usize,
    m: usize,
    n: usize,
    /// The `M` in `Σ̂ = ΩᵀΩ / M`.
    batch: usize,
    omega: Omega,
    gram: Matrix,
    eig: OnceLock<Result<SymEig, LinalgError>>,
}

/// Builds the noise model from one layer's per-sample gradients.
pub fn build_noise_model(grads: &PerSampleGradBatch) -> Result<NoiseModel, NoiseError> {
    let batch = grads.batch_size();
    if batch < 2 {
        return Err(NoiseError::BatchTooSmall(batch));
    }
    let (m, n) = grads.shape();
    let norm = 1.0 / ((batch - 1) as f64).sqrt();
    let omega = match grads.grads() {
        GradRows::Outer {
            deltas,
            inputs,
            scale,
        } => Omega::Outer {
            deltas: deltas.clone(),
            inputs: inputs.clone(),
            scale: *scale,
            mean: grads.mean(),
            norm,
        },
        GradRows::Dense(cols) => {
            let mean = grads.mean();
            let mut centered = cols.clone();
            for i in 0..batch {
                centered
                    .col_mut(i)
                    .iter_mut()
                    .zip(mean.as_slice())
                    .for_each(|(g, mu)| *g = (*g - mu) * norm);
            }
            Omega::Dense(centered)
        }
    };
    NoiseModel::assemble(grads.layer, m, n, batch, omega)
}

impl NoiseModel {
    /// Model with an explicit deviation matrix: `omega_rows` is `k × mn`
    /// and `Σ̂ = ΩᵀΩ / batch`. No centering is applied.
    pub fn from_omega(
        layer: usize,
        m: usize,
        n: usize,
        omega_rows: &Matrix,
        batch: usize,
    ) -> Result<Self, NoiseError> {
        if omega_rows.cols() != m * n {
            return Err(NoiseError::ShapeMismatch {
                expected: m * n,
                got: omega_rows.cols(),
            });
        }
        if batch == 0 || omega_rows.rows() == 0 {
            return Err(NoiseError::BatchTooSmall(batch.min(omega_rows.rows())));
        }
        Self::assemble(layer, m, n, batch, Omega::Dense(omega_rows.transpose()))
    }

    fn assemble(
        layer: usize,
        m: usize,
        n: usize,
        batch: usize,
        omega: Omega,
    ) -> Result<Self, NoiseError> {
        let mut gram = omega.gram();
        gram.scale(1.0 / batch as f64);
        symmetrize(&mut gram);
        Ok(Self {
            layer,
            m,
            n,
            batch,
            omega,
            gram,
            eig: OnceLock::new(),
        })
    }

    /// `(m, n)` of the layer's weight matrix.
    pub fn shape(&self) -> (usize, usize) {
        (self.m, self.n)
    }

    pub fn dim(&self) -> usize {
        self.m * self.n
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    /// Number of rows of `Ω`.
    pub fn num_rows(&self) -> usize {
        self.omega.num_rows()
    }

    /// `(1/M) Ω Ωᵀ`.
    pub fn gram(&self) -> &Matrix {
        &self.gram
    }

    fn eig(&self) -> Result<&SymEig, NoiseError> {
        self.eig
            .get_or_init(|| sym_eig(&self.gram))
            .as_ref()
            .map_err(|e| NoiseError::Linalg(e.clone()))
    }

    /// Eigenvalues `Λ` of `(1/M) Ω Ωᵀ`, descending.
    pub fn gram_eigenvalues(&self) -> Result<&[f64], NoiseError> {
        Ok(&self.eig()?.values)
    }

    /// Orthonormal eigenvectors `U` of `(1/M) Ω Ωᵀ`.
    pub fn gram_eigenvectors(&self) -> Result<&Matrix, NoiseError> {
        Ok(&self.eig()?.vectors)
    }

    /// Materialized `Ω` (`rows × mn`). Only sensible at small scale.
    pub fn omega_rows(&self) -> Matrix {
        let k = self.num_rows();
        let mut out = Matrix::zeros(k, self.dim());
        for i in 0..k {
            let mut e = vec![0.0; k];
            e[i] = 1.0;
            let row = self.omega.apply_t(&e, self.m, self.n);
            for (j, v) in row.into_iter().enumerate() {
                out[(i, j)] = v;
            }
        }
        out
    }

    /// `Ω x`.
    pub fn omega_apply(&self, x: &[f64]) -> Result<Vec<f64>, NoiseError> {
        self.check_len(x)?;
        Ok(self.omega.apply(x, self.m, self.n))
    }

    /// `xᵀ Σ̂ x = (1/M)‖Ω x‖²`.
    pub fn quadratic_form(&self, x: &[f64]) -> Result<f64, NoiseError> {
        let ox = self.omega_apply(x)?;
        Ok(dot(&ox, &ox) / self.batch as f64)
    }

    /// `xᵀ Σ̂ y = (1/M)(Ω x)·(Ω y)`.
    pub fn bilinear_form(&self, x: &[f64], y: &[f64]) -> Result<f64, NoiseError> {
        let ox = self.omega_apply(x)?;
        let oy = self.omega_apply(y)?;
        Ok(dot(&ox, &oy) / self.batch as f64)
    }

    /// Diagonal of `Σ̂`: entry `j` is `(1/M) Σᵢ Ωᵢⱼ²`.
    pub fn variance_diagonal(&self) -> Vec<f64> {
        let mut diag = self.omega.column_sq_sums(self.m, self.n);
        diag.iter_mut().for_each(|d| *d /= self.batch as f64);
        diag
    }

    /// `xᵀ Σ̂_cov x = xᵀ Σ̂ x − Σⱼ diag(Σ̂)ⱼ xⱼ²`; may be negative.
    pub fn covariance_quadratic_form(&self, x: &[f64]) -> Result<f64, NoiseError> {
        let full = self.quadratic_form(x)?;
        let var: f64 = self
            .variance_diagonal()
            .iter()
            .zip(x)
            .map(|(d, xi)| d * xi * xi)
            .sum();
        Ok(full - var)
    }

    /// `Σ̂^{1/2} z`, computed as `Ωᵀ U Λ^{-1/2} Uᵀ Ω z / M` over the
    /// eigenvalues above the pseudo-inverse cutoff.
    pub fn sqrt_apply(&self, z: &[f64]) -> Result<Vec<f64>, NoiseError> {
        let oz = self.omega_apply(z)?;
        let eig = self.eig()?;
        let k = self.num_rows();
        let cutoff = PINV_RTOL * eig.values.first().copied().unwrap_or(0.0);
        let mut coeffs = vec![0.0; k];
        for (j, &lambda) in eig.values.iter().enumerate() {
            if lambda > cutoff && lambda > 0.0 {
                let uj = eig.vectors.col(j);
                let w = dot(uj, &oz) / lambda.sqrt();
                coeffs.iter_mut().zip(uj).for_each(|(c, u)| *c += w * u);
            }
        }
        let mut out = self.omega.apply_t(&coeffs, self.m, self.n);
        out.iter_mut().for_each(|v| *v /= self.batch as f64);
        Ok(out)
    }

    /// Row-wise matricized contractions of `Ω` against a left vector
    /// `u ∈ Rᵐ` and right vector `v ∈ Rⁿ`.
    ///
    /// Returns `(A, B)` with `A[:, i] = Wᵢ v` (`m × rows`) and
    /// `B[:, i] = Wᵢᵀ u` (`n × rows`), where `Wᵢ` is row `i` of `Ω`
    /// reshaped to `m × n`.
    pub fn row_contractions(&self, u: &[f64], v: &[f64]) -> Result<(Matrix, Matrix), NoiseError> {
        if u.len() != self.m {
            return Err(NoiseError::ShapeMismatch {
                expected: self.m,
                got: u.len(),
            });
        }
        if v.len() != self.n {
            return Err(NoiseError::ShapeMismatch {
                expected: self.n,
                got: v.len(),
            });
        }
        Ok(self.omega.row_contractions(u, v, self.m, self.n))
    }

    fn check_len(&self, x: &[f64]) -> Result<(), NoiseError> {
        if x.len() != self.dim() {
            return Err(NoiseError::ShapeMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        Ok(())
    }
}

impl Omega {
    fn num_rows(&self) -> usize {
        match self {
            Omega::Outer { deltas, .. } => deltas.cols(),
            Omega::Dense(c) => c.cols(),
        }
    }

    fn apply(&self, x: &[f64], m: usize, n: usize) -> Vec<f64> {
        match self {
            Omega::Outer {
                deltas,
                inputs,
                scale,
                mean,
                norm,
            } => {
                let a = Matrix::from_col_major(m, n, x.to_vec()).expect("checked length");
                let shift = dot(mean.as_slice(), x);
                let ax = a.matmul(inputs).expect("n matches");
                (0..deltas.cols())
                    .map(|i| norm * (scale * dot(deltas.col(i), ax.col(i)) - shift))
                    .collect()
            }
            Omega::Dense(cols) => cols.t_matvec(x).expect("checked length"),
        }
    }

    fn apply_t(&self, w: &[f64], m: usize, n: usize) -> Vec<f64> {
        match self {
            Omega::Outer {
                deltas,
                inputs,
                scale,
                mean,
                norm,
            } => {
                let mut dw = deltas.clone();
                for (i, &wi) in w.iter().enumerate() {
                    dw.col_mut(i).iter_mut().for_each(|d| *d *= wi);
                }
                let mut out = Matrix::zeros(m, n);
                gemm(norm * scale, &dw, false, inputs, true, 0.0, &mut out);
                let total: f64 = w.iter().sum();
                out.axpy(-norm * total, mean).expect("same shape");
                out.into_vec()
            }
            Omega::Dense(cols) => cols.matvec(w).expect("row count matches"),
        }
    }

    fn gram(&self) -> Matrix {
        match self {
            Omega::Outer {
                deltas,
                inputs,
                scale,
                norm,
                ..
            } => {
                let dd = deltas.t_matmul(deltas).expect("square");
                let xx = inputs.t_matmul(inputs).expect("square");
                let k = dd.rows();
                let raw = Matrix::from_fn(k, k, |i, j| scale * scale * dd[(i, j)] * xx[(i, j)]);
                let mut g = double_center(&raw);
                g.scale(norm * norm);
                g
            }
            Omega::Dense(cols) => cols.t_matmul(cols).expect("square"),
        }
    }

    fn column_sq_sums(&self, m: usize, n: usize) -> Vec<f64> {
        match self {
            Omega::Outer {
                deltas,
                inputs,
                scale,
                mean,
                norm,
            } => {
                let mut out = vec![0.0; m * n];
                for i in 0..deltas.cols() {
                    let (d, x) = (deltas.col(i), inputs.col(i));
                    for c in 0..n {
                        let xc = scale * x[c];
                        let mu = mean.col(c);
                        let o = &mut out[c * m..(c + 1) * m];
                        for r in 0..m {
                            let dev = d[r] * xc - mu[r];
                            o[r] += dev * dev;
                        }
                    }
                }
                out.iter_mut().for_each(|v| *v *= norm * norm);
                out
            }
            Omega::Dense(cols) => {
                let mut out = vec![0.0; cols.rows()];
                for i in 0..cols.cols() {
                    out.iter_mut()
                        .zip(cols.col(i))
                        .for_each(|(o, v)| *o += v * v);
                }
                out
            }
        }
    }

    fn row_contractions(&self, u: &[f64], v: &[f64], m: usize, n: usize) -> (Matrix, Matrix) {
        match self {
            Omega::Outer {
                deltas,
                inputs,
                scale,
                mean,
                norm,
            } => {
                let xv = inputs.t_matvec(v).expect("n");
                let du = deltas.t_matvec(u).expect("m");
                let gv = mean.matvec(v).expect("n");
                let gu = mean.t_matvec(u).expect("m");
                let k = deltas.cols();
                let mut a = Matrix::zeros(m, k);
                let mut b = Matrix::zeros(n, k);
                for i in 0..k {
                    let (d, x) = (deltas.col(i), inputs.col(i));
                    for (o, (di, g)) in a.col_mut(i).iter_mut().zip(d.iter().zip(&gv)) {
                        *o = norm * (scale * di * xv[i] - g);
                    }
                    for (o, (xi, g)) in b.col_mut(i).iter_mut().zip(x.iter().zip(&gu)) {
                        *o = norm * (scale * xi * du[i] - g);
                    }
                }
                (a, b)
            }
            Omega::Dense(cols) => {
                let k = cols.cols();
                let mut a = Matrix::zeros(m, k);
                let mut b = Matrix::zeros(n, k);
                for i in 0..k {
                    let w = cols.col(i);
                    let ai = a.col_mut(i);
                    for c in 0..n {
                        let wc = &w[c * m..(c + 1) * m];
                        for (o, x) in ai.iter_mut().zip(wc) {
                            *o += x * v[c];
                        }
                    }
                    let bi = b.col_mut(i);
                    for c in 0..n {
                        bi[c] = dot(&w[c * m..(c + 1) * m], u);
                    }
                }
                (a, b)
            }
        }
    }
}

/// `C G C` with `C = I − 11ᵀ/k`.
fn double_center(g: &Matrix) -> Matrix {
    let k = g.rows();
    let kf = k as f64;
    let row_means: Vec<f64> = (0..k)
        .map(|i| (0..k).map(|j| g[(i, j)]).sum::<f64>() / kf)
        .collect();
    let col_means: Vec<f64> = (0..k).map(|j| g.col(j).iter().sum::<f64>() / kf).collect();
    let total = row_means.iter().sum::<f64>() / kf;
    Matrix::from_fn(k, k, |i, j| g[(i, j)] - row_means[i] - col_means[j] + total)
}

fn symmetrize(g: &mut Matrix) {
    let k = g.rows();
    for i in 0..k {
        for j in 0..i {
            let avg = 0.5 * (g[(i, j)] + g[(j, i)]);
            g[(i, j)] = avg;
            g[(j, i)] = avg;
        }
    }
}
