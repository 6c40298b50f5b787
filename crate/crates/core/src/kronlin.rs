//! Dense linear-algebra kernel for Kronecker-structured models.
//!
//! Matrices are `nalgebra::DMatrix<f64>`, which stores entries column-major,
//! so `vec` is a plain copy of the storage. Block indexing in the
//! rearrangement operators is written against `(row, col)` indices and does
//! not depend on that storage order.

use nalgebra::{Complex, DMatrix, DVector};

use crate::error::{Result, SigmarError};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Relative tolerance on the imaginary part of a determinant assembled from
/// complex eigenvalue products.
const IMAG_RESIDUAL_TOL: f64 = 1e-8;

/// Block layout of a `(p1*d1) x (p2*d2)` matrix viewed as a `p1 x p2` grid of
/// `d1 x d2` blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockShape {
    pub p1: usize,
    pub p2: usize,
    pub d1: usize,
    pub d2: usize,
}

impl BlockShape {
    pub fn new(p1: usize, p2: usize, d1: usize, d2: usize) -> Result<Self> {
        if p1 == 0 || p2 == 0 || d1 == 0 || d2 == 0 {
            return Err(SigmarError::Dimension(format!(
                "block shape entries must be positive, got ({p1},{p2},{d1},{d2})"
            )));
        }
        Ok(Self { p1, p2, d1, d2 })
    }

    /// Shape used to rearrange a `kn x kn` transition matrix whose blocks are
    /// `k x k` (the `B ⊗ A` layout).
    pub fn kron_square(n: usize, k: usize) -> Self {
        Self { p1: n, p2: n, d1: k, d2: k }
    }
}

/// Column-stacking vectorization.
pub fn vec(m: &Mat) -> Vector {
    DVector::from_column_slice(m.as_slice())
}

/// Inverse of [`vec`] into a `k x n` matrix.
pub fn unvec(v: &Vector, k: usize, n: usize) -> Result<Mat> {
    if v.len() != k * n {
        return Err(SigmarError::Dimension(format!(
            "cannot reshape vector of length {} into {k}x{n}",
            v.len()
        )));
    }
    Ok(DMatrix::from_column_slice(k, n, v.as_slice()))
}

/// A vector as a one-column matrix.
pub fn col(v: &Vector) -> Mat {
    DMatrix::from_column_slice(v.len(), 1, v.as_slice())
}

pub fn kron(p: &Mat, q: &Mat) -> Mat {
    p.kronecker(q)
}

/// Rearrangement operator: row `j + k*p1` of the result is `vec` of block
/// `(j, k)`, so `rearrange(W ⊗ C) = vec(W) vec(C)ᵀ`.
pub fn rearrange(m: &Mat, shape: BlockShape) -> Result<Mat> {
    let BlockShape { p1, p2, d1, d2 } = shape;
    if m.nrows() != p1 * d1 || m.ncols() != p2 * d2 {
        return Err(SigmarError::Dimension(format!(
            "rearrange expects {}x{}, got {}x{}",
            p1 * d1,
            p2 * d2,
            m.nrows(),
            m.ncols()
        )));
    }
    let mut out = Mat::zeros(p1 * p2, d1 * d2);
    for bk in 0..p2 {
        for bj in 0..p1 {
            let row = bj + bk * p1;
            for c in 0..d2 {
                for r in 0..d1 {
                    out[(row, r + c * d1)] = m[(bj * d1 + r, bk * d2 + c)];
                }
            }
        }
    }
    Ok(out)
}

/// Exact inverse of [`rearrange`].
pub fn rearrange_inv(n: &Mat, shape: BlockShape) -> Result<Mat> {
    let BlockShape { p1, p2, d1, d2 } = shape;
    if n.nrows() != p1 * p2 || n.ncols() != d1 * d2 {
        return Err(SigmarError::Dimension(format!(
            "rearrange_inv expects {}x{}, got {}x{}",
            p1 * p2,
            d1 * d2,
            n.nrows(),
            n.ncols()
        )));
    }
    let mut out = Mat::zeros(p1 * d1, p2 * d2);
    for bk in 0..p2 {
        for bj in 0..p1 {
            let row = bj + bk * p1;
            for c in 0..d2 {
                for r in 0..d1 {
                    out[(bj * d1 + r, bk * d2 + c)] = n[(row, r + c * d1)];
                }
            }
        }
    }
    Ok(out)
}

/// Companion rearrangement acting on `(d1*d2) x (p1*p2)` inputs, viewed as a
/// `d2 x p2` grid of `d1 x p1` blocks. Rows of the result are the vectorized
/// blocks in column-block-major order, which gives `rearrange2(E ⊗ E) =
/// vec(E) vec(E)ᵀ` for a `k x n` matrix `E`, and
/// `rearrange2(rearrange(M)ᵀ)ᵀ = M` for square block grids.
///
/// The output is `(d2*p2) x (d1*p1)`; for the square layouts used by the
/// model (`p1 = p2`, `d1 = d2`) this is `(p1*d1) x (p2*d2)`.
pub fn rearrange2(m: &Mat, shape: BlockShape) -> Result<Mat> {
    let BlockShape { p1, p2, d1, d2 } = shape;
    if m.nrows() != d1 * d2 || m.ncols() != p1 * p2 {
        return Err(SigmarError::Dimension(format!(
            "rearrange2 expects {}x{}, got {}x{}",
            d1 * d2,
            p1 * p2,
            m.nrows(),
            m.ncols()
        )));
    }
    rearrange(m, BlockShape { p1: d2, p2, d1, d2: p1 })
}

/// Exact inverse of [`rearrange2`].
pub fn rearrange2_inv(n: &Mat, shape: BlockShape) -> Result<Mat> {
    let BlockShape { p1, p2, d1, d2 } = shape;
    rearrange_inv(n, BlockShape { p1: d2, p2, d1, d2: p1 })
}

/// Scalar shrinkage `sgn(x) max(|x| - tau, 0)`.
#[inline]
pub fn soft_threshold(x: f64, tau: f64) -> f64 {
    debug_assert!(tau >= 0.0);
    if x > tau {
        x - tau
    } else if x < -tau {
        x + tau
    } else {
        0.0
    }
}

pub fn soft_threshold_mat(m: &Mat, tau: f64) -> Mat {
    m.map(|x| soft_threshold(x, tau))
}

/// Thin SVD with singular values sorted in descending order.
pub struct SortedSvd {
    pub u: Mat,
    pub singular_values: Vector,
    pub v_t: Mat,
}

/// One-sided Jacobi SVD. nalgebra's bidiagonal SVD returns wrong factors on
/// some exactly rank-deficient inputs, which the rearranged Kronecker
/// matrices routinely are.
pub fn svd(m: &Mat) -> Result<SortedSvd> {
    if m.iter().any(|x| !x.is_finite()) {
        return Err(SigmarError::Numerical("SVD input has non-finite entries".into()));
    }
    if m.nrows() < m.ncols() {
        let t = svd(&m.transpose())?;
        return Ok(SortedSvd {
            u: t.v_t.transpose(),
            singular_values: t.singular_values,
            v_t: t.u.transpose(),
        });
    }
    let (rows, cols) = m.shape();
    let mut u = m.clone();
    let mut v = Mat::identity(cols, cols);
    // Columns below this squared norm are numerically zero; rotating them
    // against the rest only shuffles rounding noise and can cycle.
    let negligible = (f64::EPSILON * m.norm()).powi(2);
    let mut converged = false;
    for _ in 0..100 {
        let mut rotated = false;
        for p in 0..cols {
            for q in p + 1..cols {
                let alpha = u.column(p).norm_squared();
                let beta = u.column(q).norm_squared();
                let gamma = u.column(p).dot(&u.column(q));
                if gamma == 0.0
                    || alpha.min(beta) <= negligible
                    || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt()
                {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for mat in [&mut u, &mut v] {
                    for r in 0..mat.nrows() {
                        let (x, y) = (mat[(r, p)], mat[(r, q)]);
                        mat[(r, p)] = c * x - s * y;
                        mat[(r, q)] = s * x + c * y;
                    }
                }
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(SigmarError::Numerical("SVD did not converge".into()));
    }

    let mut order: Vec<usize> = (0..cols).collect();
    let norms: Vec<f64> = (0..cols).map(|j| u.column(j).norm()).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));
    let scale = norms.iter().cloned().fold(0.0, f64::max);
    let mut uo = Mat::zeros(rows, cols);
    let mut vo = Mat::zeros(cols, cols);
    let mut sv = Vector::zeros(cols);
    for (dst, &src) in order.iter().enumerate() {
        vo.set_column(dst, &v.column(src));
        if norms[src] > scale * f64::EPSILON * (rows as f64) && norms[src] > 0.0 {
            sv[dst] = norms[src];
            uo.set_column(dst, &(u.column(src) / norms[src]));
        }
    }
    complete_orthonormal(&mut uo, &sv);
    Ok(SortedSvd {
        u: uo,
        singular_values: sv,
        v_t: vo.transpose(),
    })
}

/// Fill the columns of `u` whose singular value is zero with unit vectors
/// orthogonal to the rest.
fn complete_orthonormal(u: &mut Mat, sv: &Vector) {
    let rows = u.nrows();
    let mut basis = 0;
    for j in 0..u.ncols() {
        if sv[j] > 0.0 {
            continue;
        }
        while basis < rows {
            let mut cand = Vector::zeros(rows);
            cand[basis] = 1.0;
            basis += 1;
            for _ in 0..2 {
                for i in 0..u.ncols() {
                    if i == j || (sv[i] == 0.0 && i > j) {
                        continue;
                    }
                    let proj = u.column(i).dot(&cand);
                    cand -= u.column(i) * proj;
                }
            }
            let nrm = cand.norm();
            if nrm > 1e-8 {
                u.set_column(j, &(cand / nrm));
                break;
            }
        }
    }
}

/// Singular value thresholding: `U S_tau(Σ) Vᵀ`.
pub fn svt(m: &Mat, tau: f64) -> Result<Mat> {
    if tau < 0.0 {
        return Err(SigmarError::Validation(format!("negative threshold {tau}")));
    }
    if m.is_empty() {
        return Ok(m.clone());
    }
    let SortedSvd {
        u,
        singular_values,
        v_t,
    } = svd(m)?;
    let shrunk: Vec<f64> = singular_values
        .iter()
        .map(|&s| (s - tau).max(0.0))
        .collect();
    let rank = shrunk.iter().take_while(|&&s| s > 0.0).count();
    let mut out = Mat::zeros(m.nrows(), m.ncols());
    for i in 0..rank {
        out += (u.column(i) * shrunk[i]) * v_t.row(i);
    }
    Ok(out)
}

/// Eigenvalues of a general real square matrix via the real Schur form.
pub fn eigenvalues(m: &Mat) -> Result<Vec<Complex<f64>>> {
    if !m.is_square() {
        return Err(SigmarError::Dimension(format!(
            "eigenvalues of non-square {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.is_empty() {
        return Ok(Vec::new());
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(SigmarError::Numerical("non-finite matrix entries".into()));
    }
    // Plain shifted QR can cycle when eigenvalues share a modulus (e.g. ±1 of
    // a bipartite weight matrix); retry on `M + αI`, which breaks the tie.
    let scale = m.amax().max(1.0);
    for alpha in [0.0, 0.1234567, -0.3141593, 0.7071068] {
        let shifted = m + Mat::identity(m.nrows(), m.nrows()) * (alpha * scale);
        if let Some(schur) = nalgebra::linalg::Schur::try_new(shifted, 5.0 * f64::EPSILON, 1000 * m.nrows()) {
            return Ok(schur
                .complex_eigenvalues()
                .iter()
                .map(|z| z - Complex::new(alpha * scale, 0.0))
                .collect());
        }
    }
    Err(SigmarError::Numerical("Schur decomposition did not converge".into()))
}

/// Largest eigenvalue modulus.
pub fn spectral_radius(m: &Mat) -> Result<f64> {
    Ok(eigenvalues(m)?
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max))
}

/// `ln det(I - W ⊗ C)` from the eigenvalues of `W` and `C`, using
/// `det(I - W ⊗ C) = Π_ij (1 - λ_i(W) μ_j(C))`.
///
/// The product is accumulated as a sum of complex logarithms; its phase must
/// vanish for the determinant to be a positive real.
pub fn logdet_i_minus_kron(eig_w: &[Complex<f64>], c: &Mat) -> Result<f64> {
    let eig_c = eigenvalues(c)?;
    let one = Complex::new(1.0, 0.0);
    let mut log_modulus = 0.0;
    let mut phase = 0.0;
    for lw in eig_w {
        for mc in &eig_c {
            let z = one - lw * mc;
            let r = z.norm();
            if r == 0.0 || !r.is_finite() {
                return Err(SigmarError::Domain("I - W⊗C is singular".into()));
            }
            log_modulus += r.ln();
            phase += z.arg();
        }
    }
    let (sin, cos) = phase.sin_cos();
    if cos <= 0.0 {
        return Err(SigmarError::Domain(
            "det(I - W⊗C) is not positive".into(),
        ));
    }
    if sin.abs() > IMAG_RESIDUAL_TOL {
        return Err(SigmarError::Numerical(format!(
            "determinant has relative imaginary residual {:.3e}",
            sin.abs()
        )));
    }
    Ok(log_modulus)
}

/// Solve `a x = b` through an LU factorization.
pub fn lu_solve(a: &Mat, b: &Mat) -> Result<Mat> {
    a.clone()
        .lu()
        .solve(b)
        .ok_or_else(|| SigmarError::Numerical("singular linear system".into()))
}

/// `num * den⁻¹` for square `den`, computed as a transposed solve.
pub fn right_divide(num: &Mat, den: &Mat) -> Result<Mat> {
    let x = lu_solve(&den.transpose(), &num.transpose())?;
    Ok(x.transpose())
}

/// Inverse of a symmetric positive definite matrix, or `None`.
pub fn spd_inverse(m: &Mat) -> Option<Mat> {
    m.clone().cholesky().map(|c| c.inverse())
}
