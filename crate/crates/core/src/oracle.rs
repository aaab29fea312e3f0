//! Dense reference implementations for small problems.
//!
//! These build `Σ̂` and the Hessian of `σ₁` as explicit `mn × mn` matrices
//! from eigendecompositions of `θθᵀ` and `θᵀθ`, independent of the SVD path
//! used by the production code. Only sensible for `mn` up to a few hundred.

use serde::Serialize;

use crate::mlp::PerSampleGradBatch;
use crate::noise::{build_noise_model, NoiseModel};
use crate::spectral::{SpectralError, SpectralState};
use crate::tensor::{dot, gaussian_matrix, norm, sym_eig, LinalgError, Matrix, Rng};

/// Full orthonormal bases `U` (`m × m`), `V` (`n × n`) with `θ vᵢ = σᵢ uᵢ`.
pub struct DenseBasis {
    pub sigma: Vec<f64>,
    pub u: Matrix,
    pub v: Matrix,
    pub rank: usize,
}

/// Singular bases from `θθᵀ` and `θᵀθ`; right vectors of the nonzero part
/// are `θᵀuᵢ/σᵢ` so that pairs stay consistent.
pub fn dense_basis(theta: &Matrix) -> Result<DenseBasis, LinalgError> {
    let (m, n) = theta.shape();
    let left = sym_eig(&theta.matmul_t(theta)?)?;
    let right = sym_eig(&theta.t_matmul(theta)?)?;
    let k = m.min(n);
    let mut sigma: Vec<f64> = left.values.iter().take(k).map(|l| l.sqrt()).collect();
    sigma.resize(m.max(n), 0.0);
    let cutoff = 1e-12 * sigma[0];
    let rank = sigma.iter().take_while(|&&s| s > cutoff && s > 0.0).count();

    let mut v = Matrix::zeros(n, n);
    for i in 0..rank {
        let vi = theta.t_matvec(left.vectors.col(i))?;
        v.col_mut(i)
            .iter_mut()
            .zip(&vi)
            .for_each(|(o, x)| *o = x / sigma[i]);
    }
    // Completion: eigenvectors of θᵀθ for the zero eigenvalues are orthogonal
    // to the row space; take the trailing ones.
    for (dst, src) in (rank..n).zip(rank..n) {
        v.col_mut(dst).copy_from_slice(right.vectors.col(src));
    }
    Ok(DenseBasis {
        sigma,
        u: left.vectors,
        v,
        rank,
    })
}

/// `σ₁` as the square root of the top eigenvalue of `θθᵀ`.
pub fn sigma1_eig(theta: &Matrix) -> Result<f64, LinalgError> {
    Ok(sym_eig(&theta.matmul_t(theta)?)?.values[0].sqrt())
}

/// `vᵢ ⊗ uⱼ` in column-major vec layout.
fn kron(v: &[f64], u: &[f64]) -> Vec<f64> {
    v.iter()
        .flat_map(|&a| u.iter().map(move |&b| a * b))
        .collect()
}

fn add_outer(h: &mut Matrix, alpha: f64, x: &[f64], y: &[f64]) {
    for (c, &yc) in y.iter().enumerate() {
        for (r, &xr) in x.iter().enumerate() {
            h[(r, c)] += alpha * xr * yc;
        }
    }
}

/// Jacobian `v₁ ⊗ u₁` from the dense basis.
pub fn dense_jacobian(theta: &Matrix) -> Result<Vec<f64>, LinalgError> {
    let b = dense_basis(theta)?;
    Ok(kron(b.v.col(0), b.u.col(0)))
}

/// Explicit Hessian of `σ₁` as the sum of left, right and cross parts.
pub fn dense_hessian(theta: &Matrix) -> Result<Matrix, LinalgError> {
    let (m, n) = theta.shape();
    let b = dense_basis(theta)?;
    let s1 = b.sigma[0];
    let (u1, v1) = (b.u.col(0), b.v.col(0));
    let mut h = Matrix::zeros(m * n, m * n);
    for i in 1..m {
        let si = b.sigma.get(i).copied().unwrap_or(0.0);
        let e = kron(v1, b.u.col(i));
        add_outer(&mut h, s1 / (s1 * s1 - si * si), &e, &e);
    }
    for j in 1..n {
        let sj = b.sigma.get(j).copied().unwrap_or(0.0);
        let e = kron(b.v.col(j), u1);
        add_outer(&mut h, s1 / (s1 * s1 - sj * sj), &e, &e);
    }
    for k in 1..b.rank {
        let sk = b.sigma[k];
        let c = sk / (s1 * s1 - sk * sk);
        let left = kron(v1, b.u.col(k));
        let right = kron(b.v.col(k), u1);
        add_outer(&mut h, c, &left, &right);
        add_outer(&mut h, c, &right, &left);
    }
    Ok(h)
}

/// `Σ̂ = ΩᵀΩ / M` as an explicit matrix.
pub fn dense_sigma(nm: &NoiseModel) -> Matrix {
    let rows = nm.omega_rows();
    rows.t_matmul(&rows)
        .expect("square")
        .scaled(1.0 / nm.batch_size() as f64)
}

/// `Σ̂` formed directly from the per-sample gradients with an `M − 1`
/// denominator then divided by `M`.
pub fn dense_sigma_from_samples(grads: &PerSampleGradBatch) -> Matrix {
    let cols = grads.to_dense_columns();
    let (d, batch) = cols.shape();
    let mean: Vec<f64> = (0..d)
        .map(|r| (0..batch).map(|i| cols[(r, i)]).sum::<f64>() / batch as f64)
        .collect();
    let mut cov = Matrix::zeros(d, d);
    for i in 0..batch {
        let dev: Vec<f64> = cols
            .col(i)
            .iter()
            .zip(&mean)
            .map(|(g, mu)| g - mu)
            .collect();
        add_outer(&mut cov, 1.0, &dev, &dev);
    }
    cov.scaled(1.0 / ((batch - 1) as f64 * batch as f64))
}

/// `tr(H Σ)` for explicit matrices.
pub fn trace_product(h: &Matrix, sigma: &Matrix) -> f64 {
    h.dot(sigma).expect("same shape")
}

/// Central difference of `σ₁` along `Δ`.
pub fn fd_directional(theta: &Matrix, delta: &Matrix, h: f64) -> Result<f64, LinalgError> {
    let mut plus = theta.clone();
    plus.axpy(h, delta)?;
    let mut minus = theta.clone();
    minus.axpy(-h, delta)?;
    Ok((sigma1_eig(&plus)? - sigma1_eig(&minus)?) / (2.0 * h))
}

/// Random matrix whose top gap `σ₁² − σ₂²` is at least `min_gap_ratio · σ₁²`.
pub fn well_gapped(rng: &mut Rng, m: usize, n: usize, min_gap_ratio: f64) -> Matrix {
    loop {
        let w = gaussian_matrix(rng, m, n, 1.0);
        let ss = SpectralState::new(0, &w).expect("finite gaussian");
        if m.min(n) == 1 || ss.gap >= min_gap_ratio * ss.sigma1().powi(2) {
            return w;
        }
    }
}

/// Outcome of one dense cross-check.
#[derive(Clone, Debug, Serialize)]
pub struct OracleCheck {
    pub name: String,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl OracleCheck {
    fn new(name: &str, max_error: f64, tolerance: f64) -> Self {
        Self {
            name: name.to_string(),
            max_error,
            tolerance,
            passed: max_error.is_finite() && max_error < tolerance,
        }
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

fn random_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.normal()).collect()
}

fn random_noise(
    rng: &mut Rng,
    m: usize,
    n: usize,
    batch: usize,
) -> (PerSampleGradBatch, NoiseModel) {
    let grads = PerSampleGradBatch::dense(0, m, n, gaussian_matrix(rng, m * n, batch, 1.0))
        .expect("shape matches");
    let nm = build_noise_model(&grads).expect("batch >= 2");
    (grads, nm)
}

/// Dense-oracle cross-checks of the derivative and noise computations.
pub fn run_oracle_checks(seed: u64) -> Result<Vec<OracleCheck>, SpectralError> {
    let mut rng = Rng::new(seed);
    let mut checks = Vec::new();

    // Jacobian against central differences.
    let mut worst = 0.0f64;
    for trial in 0..100 {
        let (m, n) = (1 + trial % 64, 1 + (trial * 7) % 48);
        let theta = well_gapped(&mut rng, m, n, 1e-2);
        let ss = SpectralState::new(0, &theta)?;
        let delta = gaussian_matrix(&mut rng, m, n, 1.0);
        let analytic = ss.directional_derivative(&delta)?;
        let fd = fd_directional(&theta, &delta, 1e-5)?;
        worst = worst.max(rel_err(analytic, fd));
    }
    checks.push(OracleCheck::new(
        "jacobian_vs_central_difference",
        worst,
        1e-5,
    ));

    // Hessian contraction and quadratic forms against the dense Hessian.
    let mut worst_contraction = 0.0f64;
    let mut worst_quadratic = 0.0f64;
    for &(m, n) in &[
        (2, 2),
        (3, 2),
        (2, 3),
        (4, 3),
        (5, 4),
        (6, 5),
        (5, 6),
        (6, 1),
        (1, 5),
    ] {
        let theta = well_gapped(&mut rng, m, n, 1e-2);
        let ss = SpectralState::new(0, &theta)?;
        let h = dense_hessian(&theta)?;
        let (_, nm) = random_noise(&mut rng, m, n, 4);
        let want = trace_product(&h, &dense_sigma(&nm));
        worst_contraction =
            worst_contraction.max(rel_err(ss.hessian_sigma_contraction(&nm)?, want));
        let delta = gaussian_matrix(&mut rng, m, n, 1.0);
        let hd = h.matvec(delta.as_slice())?;
        let q = dot(delta.as_slice(), &hd);
        worst_quadratic = worst_quadratic.max(rel_err(ss.hessian_quadratic_form(&delta)?, q));
    }
    checks.push(OracleCheck::new(
        "hessian_contraction_vs_dense",
        worst_contraction,
        1e-8,
    ));
    checks.push(OracleCheck::new(
        "hessian_quadratic_vs_dense",
        worst_quadratic,
        1e-8,
    ));

    // Jᵀ Σ̂ J against the dense product.
    let theta = well_gapped(&mut rng, 5, 4, 1e-2);
    let ss = SpectralState::new(0, &theta)?;
    let (_, nm) = random_noise(&mut rng, 5, 4, 7);
    let j = dense_jacobian(&theta)?;
    let sj = dense_sigma(&nm).matvec(&j)?;
    checks.push(OracleCheck::new(
        "jacobian_sigma_jacobian_vs_dense",
        (ss.jacobian_sigma_jacobian(&nm)? - dot(&j, &sj)).abs(),
        1e-10,
    ));

    // Noise estimator against dense Σ̂ built from the raw samples.
    let mut worst_q = 0.0f64;
    let mut worst_split = 0.0f64;
    let mut worst_sqrt = 0.0f64;
    for &(m, n, batch) in &[(3, 4, 16), (2, 6, 5), (4, 5, 16), (1, 20, 12), (20, 1, 9)] {
        let (grads, nm) = random_noise(&mut rng, m, n, batch);
        let sigma = dense_sigma_from_samples(&grads);
        let d = m * n;
        for _ in 0..20 {
            let x = random_vec(&mut rng, d);
            let y = random_vec(&mut rng, d);
            let sx = sigma.matvec(&x)?;
            worst_q = worst_q.max((nm.quadratic_form(&x)? - dot(&x, &sx)).abs());
            worst_q = worst_q.max((nm.bilinear_form(&y, &x)? - dot(&y, &sx)).abs());
            let var: f64 = (0..d).map(|k| sigma[(k, k)] * x[k] * x[k]).sum();
            worst_split =
                worst_split.max((nm.covariance_quadratic_form(&x)? - (dot(&x, &sx) - var)).abs());
            let s = nm.sqrt_apply(&x)?;
            let ss_x = nm.sqrt_apply(&s)?;
            let diff: Vec<f64> = ss_x.iter().zip(&sx).map(|(a, b)| a - b).collect();
            worst_sqrt = worst_sqrt.max(norm(&diff));
        }
        let diag = nm.variance_diagonal();
        for k in 0..d {
            worst_split = worst_split.max((diag[k] - sigma[(k, k)]).abs());
        }
    }
    checks.push(OracleCheck::new(
        "noise_quadratic_forms_vs_dense",
        worst_q,
        1e-8,
    ));
    checks.push(OracleCheck::new(
        "noise_variance_covariance_split_vs_dense",
        worst_split,
        1e-8,
    ));
    checks.push(OracleCheck::new(
        "noise_square_root_composition",
        worst_sqrt,
        1e-8,
    ));
    Ok(checks)
}
