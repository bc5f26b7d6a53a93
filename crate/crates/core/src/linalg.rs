//! Dense matrix utilities: pseudoinverse, semidefiniteness and range tests.
//!
//! Every solver in the crate funnels its "is this PSD", "is this in the
//! column space" and "apply the generalized inverse" questions through here so
//! that a single [`Tolerances`] value governs all numerical verdicts.

use nalgebra::SymmetricEigen;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{Mat, Scalar, Vector};

const EIG_MAX_ITER: usize = 0;

/// Singular triplets `(σ_i, u_i, v_i)` with `σ_i > 0`, read off the eigenpairs of
/// the symmetric embedding `[[0, M], [Mᵀ, 0]]`, whose eigenvalues are `±σ_i`.
// nalgebra's bidiagonal SVD returns wrong factors for some rank-deficient inputs;
// the symmetric eigensolver does not, and the embedding keeps the conditioning of `M`.
struct Triplets<T: Scalar> {
    sigma: Vec<T>,
    u: Vec<Vector<T>>,
    v: Vec<Vector<T>>,
    /// All `min(rows, cols)` singular values, zeros included.
    all: Vec<T>,
}

fn triplets<T: Scalar>(m: &Mat<T>) -> Result<Triplets<T>> {
    let (r, c) = m.shape();
    let mut emb = Mat::zeros(r + c, r + c);
    emb.view_mut((0, r), (r, c)).copy_from(m);
    emb.view_mut((r, 0), (c, r)).copy_from(&m.transpose());
    let eig = SymmetricEigen::try_new(emb, T::default_epsilon(), EIG_MAX_ITER)
        .ok_or(Error::Decomposition("symmetric eigen"))?;
    let mut order: Vec<usize> = (0..r + c).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .expect("finite eigenvalues")
    });
    let root2 = T::lit(2.0).sqrt();
    let mut out = Triplets {
        sigma: vec![],
        u: vec![],
        v: vec![],
        all: vec![],
    };
    for &i in order.iter().take(r.min(c)) {
        let s = eig.eigenvalues[i].max(T::zero());
        out.all.push(s);
        if s > T::zero() {
            let col = eig.eigenvectors.column(i);
            out.sigma.push(s);
            out.u.push(col.rows(0, r) * root2);
            out.v.push(col.rows(r, c) * root2);
        }
    }
    Ok(out)
}

/// Numerical slack used when turning exact conditions into floating-point tests.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    /// Singular values below `pinv_rtol * sigma_max * max(rows, cols)` are dropped.
    pub pinv_rtol: f64,
    /// Allowed negative eigenvalue, scaled by `max(1, ||M||_2)`.
    pub psd_tol: f64,
    /// Allowed projection residual, scaled by `max(1, ||v||)`.
    pub range_tol: f64,
    /// A matrix counts as invertible when `sigma_min / sigma_max` exceeds this.
    pub invert_rtol: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            pinv_rtol: 1e-12,
            psd_tol: 1e-8,
            range_tol: 1e-8,
            invert_rtol: 1e-10,
        }
    }
}

impl Tolerances {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("pinv_rtol", self.pinv_rtol),
            ("psd_tol", self.psd_tol),
            ("range_tol", self.range_tol),
            ("invert_rtol", self.invert_rtol),
        ];
        for (name, v) in all {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Schema(format!(
                    "tolerance {name} must be finite and strictly positive, got {v}"
                )));
            }
        }
        Ok(())
    }
}

fn ensure_square<T: Scalar>(m: &Mat<T>) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::NotSquare {
            rows: m.nrows(),
            cols: m.ncols(),
        });
    }
    Ok(())
}

fn ensure_finite<T: Scalar>(m: &Mat<T>, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// Returns `(M + M^T) / 2`.
pub fn symmetrize<T: Scalar>(m: &Mat<T>) -> Result<Mat<T>> {
    ensure_square(m)?;
    Ok((m + m.transpose()) * T::lit(0.5))
}

/// Largest absolute entry of `M - M^T`.
pub fn asymmetry<T: Scalar>(m: &Mat<T>) -> T {
    if m.nrows() != m.ncols() {
        return T::max_value().unwrap_or_else(T::one);
    }
    (m - m.transpose()).amax()
}

/// Singular values in descending order.
pub fn singular_values<T: Scalar>(m: &Mat<T>) -> Result<Vector<T>> {
    if m.is_empty() {
        return Ok(Vector::zeros(0));
    }
    ensure_finite(m, "singular value input")?;
    Ok(Vector::from_vec(triplets(m)?.all))
}

/// Spectral norm `||M||_2`.
pub fn spectral_norm<T: Scalar>(m: &Mat<T>) -> Result<T> {
    Ok(singular_values(m)?.iter().copied().fold(T::zero(), T::max))
}

/// Moore-Penrose pseudoinverse from the singular triplets.
pub fn pinv<T: Scalar>(m: &Mat<T>, tol: &Tolerances) -> Result<Mat<T>> {
    let (rows, cols) = m.shape();
    if m.is_empty() {
        return Ok(Mat::zeros(cols, rows));
    }
    ensure_finite(m, "pseudoinverse input")?;
    let tr = triplets(m)?;
    let sigma_max = tr.sigma.first().copied().unwrap_or_else(T::zero);
    let cutoff = T::lit(tol.pinv_rtol) * sigma_max * T::lit(rows.max(cols) as f64);
    let mut out = Mat::zeros(cols, rows);
    for ((s, u), v) in tr.sigma.iter().zip(&tr.u).zip(&tr.v) {
        if *s > cutoff {
            out += (v * u.transpose()) / *s;
        }
    }
    Ok(out)
}

/// Eigenvalues of the symmetric part, ascending.
pub fn eigenvalues_sym<T: Scalar>(m: &Mat<T>) -> Result<Vector<T>> {
    let sym = symmetrize(m)?;
    ensure_finite(&sym, "eigenvalue input")?;
    let eig = SymmetricEigen::try_new(sym, T::default_epsilon(), EIG_MAX_ITER)
        .ok_or(Error::Decomposition("symmetric eigen"))?;
    let mut vals: Vec<T> = eig.eigenvalues.iter().copied().collect();
    vals.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    Ok(Vector::from_vec(vals))
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eig_sym<T: Scalar>(m: &Mat<T>) -> Result<T> {
    ensure_square(m)?;
    if m.is_empty() {
        return Err(Error::Dimension {
            context: "min_eig_sym".into(),
            expected: "non-empty matrix".into(),
            got: "0x0".into(),
        });
    }
    ensure_finite(m, "eigenvalue input")?;
    let eig = SymmetricEigen::try_new(m.clone(), T::default_epsilon(), EIG_MAX_ITER)
        .ok_or(Error::Decomposition("symmetric eigen"))?;
    Ok(eig.eigenvalues.iter().copied().fold(T::max_value().unwrap(), T::min))
}

/// Smallest eigenvalue of the symmetric part, with the PSD verdict.
pub fn psd_margin<T: Scalar>(m: &Mat<T>, tol: &Tolerances) -> Result<(T, bool)> {
    let sym = symmetrize(m)?;
    let lam = min_eig_sym(&sym)?;
    let scale = spectral_norm(&sym)?.max(T::one());
    Ok((lam, lam >= -T::lit(tol.psd_tol) * scale))
}

pub fn is_psd<T: Scalar>(m: &Mat<T>, tol: &Tolerances) -> Result<bool> {
    psd_margin(m, tol).map(|(_, ok)| ok)
}

/// Strict positive definiteness: the smallest eigenvalue must clear the PSD slack.
pub fn is_pd<T: Scalar>(m: &Mat<T>, tol: &Tolerances) -> Result<bool> {
    let sym = symmetrize(m)?;
    let lam = min_eig_sym(&sym)?;
    let scale = spectral_norm(&sym)?.max(T::one());
    Ok(lam > T::lit(tol.psd_tol) * scale)
}

/// `||O O^+ V - V||_F` for a vector or matrix right-hand side.
pub fn range_residual<T: Scalar>(o: &Mat<T>, v: &Mat<T>, tol: &Tolerances) -> Result<T> {
    ensure_square(o)?;
    if v.nrows() != o.nrows() {
        return Err(Error::Dimension {
            context: "range test".into(),
            expected: format!("{} rows", o.nrows()),
            got: format!("{} rows", v.nrows()),
        });
    }
    let proj = o * pinv(o, tol)?;
    Ok((&proj * v - v).norm())
}

/// Whether every column of `V` lies in `Ran(O)`.
pub fn in_range_mat<T: Scalar>(o: &Mat<T>, v: &Mat<T>, tol: &Tolerances) -> Result<bool> {
    let res = range_residual(o, v, tol)?;
    Ok(res <= T::lit(tol.range_tol) * v.norm().max(T::one()))
}

pub fn in_range<T: Scalar>(o: &Mat<T>, v: &Vector<T>, tol: &Tolerances) -> Result<bool> {
    let as_mat = Mat::from_column_slice(v.len(), 1, v.as_slice());
    in_range_mat(o, &as_mat, tol)
}

/// `sigma_min / sigma_max`, zero for the zero matrix.
pub fn singular_ratio<T: Scalar>(m: &Mat<T>) -> Result<T> {
    let sv = singular_values(m)?;
    let max = sv.iter().copied().fold(T::zero(), T::max);
    if max == T::zero() {
        return Ok(T::zero());
    }
    let min = sv.iter().copied().fold(max, T::min);
    Ok(min / max)
}

pub fn is_invertible<T: Scalar>(m: &Mat<T>, tol: &Tolerances) -> Result<bool> {
    ensure_square(m)?;
    Ok(singular_ratio(m)? > T::lit(tol.invert_rtol))
}
