use super::{LinalgError, Matrix};

/// Singular values below `RANK_RTOL · σ₁` count as zero.
pub const RANK_RTOL: f64 = 1e-12;

/// Eigenvalues in `[-PSD_CLAMP_RTOL · scale, 0)` are rounded up to zero.
pub const PSD_CLAMP_RTOL: f64 = 1e-12;

const SYMMETRY_RTOL: f64 = 1e-10;

/// Thin SVD `A = Σᵢ σᵢ uᵢ vᵢᵀ` with `k = min(rows, cols)` triplets.
#[derive(Clone, Debug)]
pub struct SvdFactors {
    /// Nonincreasing, nonnegative.
    pub singular_values: Vec<f64>,
    /// `rows × k`, orthonormal columns.
    pub left: Matrix,
    /// `cols × k`, orthonormal columns.
    pub right: Matrix,
    /// Number of singular values above `RANK_RTOL · σ₁`.
    pub rank: usize,
}

impl SvdFactors {
    pub fn sigma1(&self) -> f64 {
        self.singular_values.first().copied().unwrap_or(0.0)
    }

    pub fn u(&self, i: usize) -> &[f64] {
        self.left.col(i)
    }

    pub fn v(&self, i: usize) -> &[f64] {
        self.right.col(i)
    }

    /// `Σᵢ σᵢ uᵢ vᵢᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.left.clone();
        for (i, &s) in self.singular_values.iter().enumerate() {
            us.col_mut(i).iter_mut().for_each(|x| *x *= s);
        }
        us.matmul_t(&self.right)
            .expect("svd factors have consistent shapes")
    }
}

/// Full thin SVD, singular values sorted descending, each left vector
/// oriented so that its largest-magnitude entry is positive.
pub fn svd(m: &Matrix) -> Result<SvdFactors, LinalgError> {
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return Err(LinalgError::Empty);
    }
    if !m.is_finite() {
        return Err(LinalgError::NonFiniteInput { op: "svd" });
    }
    let dec = m
        .to_faer()
        .thin_svd()
        .map_err(|_| LinalgError::NoConvergence {
            op: "svd",
            rows,
            cols,
        })?;
    let (u, v) = (dec.U(), dec.V());
    let raw = dec.S().column_vector();
    let k = rows.min(cols);

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| raw[b].total_cmp(&raw[a]));

    let mut singular_values = Vec::with_capacity(k);
    let mut left = Matrix::zeros(rows, k);
    let mut right = Matrix::zeros(cols, k);
    for (dst, &src) in order.iter().enumerate() {
        singular_values.push(raw[src].max(0.0));
        for i in 0..rows {
            left[(i, dst)] = u[(i, src)];
        }
        for j in 0..cols {
            right[(j, dst)] = v[(j, src)];
        }
        if leading_sign(left.col(dst)) < 0.0 {
            left.col_mut(dst).iter_mut().for_each(|x| *x = -*x);
            right.col_mut(dst).iter_mut().for_each(|x| *x = -*x);
        }
    }
    let cutoff = RANK_RTOL * singular_values[0];
    let rank = singular_values
        .iter()
        .take_while(|&&s| s > cutoff && s > 0.0)
        .count();
    Ok(SvdFactors {
        singular_values,
        left,
        right,
        rank,
    })
}

/// Eigendecomposition of a symmetric positive semidefinite matrix.
#[derive(Clone, Debug)]
pub struct SymEig {
    /// Descending, nonnegative.
    pub values: Vec<f64>,
    /// Orthonormal eigenvectors as columns, same order as `values`.
    pub vectors: Matrix,
}

/// Eigendecomposition `G = Q Λ Qᵀ` of a symmetric PSD matrix.
///
/// Slightly negative eigenvalues (down to `-PSD_CLAMP_RTOL · max(1, λ_max)`)
/// are clamped to zero; anything more negative is reported as an error.
pub fn sym_eig(g: &Matrix) -> Result<SymEig, LinalgError> {
    let (n, c) = g.shape();
    if n != c {
        return Err(LinalgError::NotSquare { rows: n, cols: c });
    }
    if n == 0 {
        return Err(LinalgError::Empty);
    }
    if !g.is_finite() {
        return Err(LinalgError::NonFiniteInput { op: "sym_eig" });
    }
    let scale = g.max_abs().max(1.0);
    let asym = (0..n)
        .flat_map(|i| (0..i).map(move |j| (i, j)))
        .map(|(i, j)| (g[(i, j)] - g[(j, i)]).abs())
        .fold(0.0, f64::max);
    if asym > SYMMETRY_RTOL * scale {
        return Err(LinalgError::NotSymmetric { deviation: asym });
    }
    let dec = g
        .to_faer()
        .self_adjoint_eigen(faer::Side::Lower)
        .map_err(|_| LinalgError::NoConvergence {
            op: "sym_eig",
            rows: n,
            cols: n,
        })?;
    let (eigenvalues, eigenvectors) = (dec.S().column_vector(), dec.U());

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eigenvalues[b].total_cmp(&eigenvalues[a]));
    let top = eigenvalues[order[0]].max(1.0);

    let mut values = Vec::with_capacity(n);
    let mut vectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let mut lambda = eigenvalues[src];
        if lambda < 0.0 {
            if lambda < -PSD_CLAMP_RTOL * top {
                return Err(LinalgError::NotPsd { eigenvalue: lambda });
            }
            lambda = 0.0;
        }
        values.push(lambda);
        for i in 0..n {
            vectors[(i, dst)] = eigenvectors[(i, src)];
        }
        if leading_sign(vectors.col(dst)) < 0.0 {
            vectors.col_mut(dst).iter_mut().for_each(|x| *x = -*x);
        }
    }
    Ok(SymEig { values, vectors })
}

/// Sign of the first entry with the largest magnitude.
fn leading_sign(v: &[f64]) -> f64 {
    let mut best = 0.0f64;
    for &x in v {
        if x.abs() > best.abs() {
            best = x;
        }
    }
    if best < 0.0 {
        -1.0
    } else {
        1.0
    }
}
