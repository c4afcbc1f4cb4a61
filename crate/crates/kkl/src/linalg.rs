//! Dense linear-algebra helpers for small observer matrices: eigenvalue
//! decomposition of general real matrices, condition numbers, and stability
//! checks. Everything here targets matrices of single-digit dimensions, so
//! SVD-based nullspace extraction is plenty fast and numerically safe.

use nalgebra::{Complex, DMatrix, DVector};

use crate::error::{Error, Result};

/// Condition-number ceiling above which we refuse to treat a matrix as
/// diagonalizable.
pub const COND_LIMIT: f64 = 1e12;

type CMatrix = DMatrix<Complex<f64>>;

/// Eigendecomposition `A = V diag(values) V^-1` of a real square matrix.
#[derive(Debug)]
pub struct EigenDecomposition {
    pub values: Vec<Complex<f64>>,
    pub vectors: CMatrix,
    /// 2-norm condition number of the eigenvector matrix.
    pub cond: f64,
}

impl EigenDecomposition {
    /// `min |Re(lambda)|` over the spectrum.
    pub fn lambda_min(&self) -> f64 {
        self.values
            .iter()
            .map(|l| l.re.abs())
            .fold(f64::INFINITY, f64::min)
    }
}

/// Decomposes a general real matrix into eigenvalues and a complex
/// eigenvector matrix. Fails when the matrix is (numerically)
/// non-diagonalizable: either the residual `A V - V diag(values)` is large or
/// `cond(V)` exceeds [`COND_LIMIT`].
pub fn eigen_decompose(a: &DMatrix<f64>) -> Result<EigenDecomposition> {
    let n = a.nrows();
    if n == 0 || a.ncols() != n {
        return Err(Error::Dimension(format!(
            "eigendecomposition needs a nonempty square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    let scale = a.norm().max(1.0);
    let values: Vec<Complex<f64>> = a.clone().complex_eigenvalues().iter().copied().collect();
    let ac: CMatrix = a.map(|x| Complex::new(x, 0.0));

    // Cluster numerically coincident eigenvalues so repeated (semisimple)
    // eigenvalues get a full nullspace basis instead of the same vector twice.
    let cluster_tol = 1e-9 * scale;
    let mut assigned = vec![false; n];
    let mut vectors = CMatrix::zeros(n, n);
    let mut ordered = Vec::with_capacity(n);
    let mut col = 0usize;
    for i in 0..n {
        if assigned[i] {
            continue;
        }
        let mut cluster = vec![i];
        assigned[i] = true;
        for j in (i + 1)..n {
            if !assigned[j] && (values[j] - values[i]).norm() <= cluster_tol {
                cluster.push(j);
                assigned[j] = true;
            }
        }
        let m = cluster.len();
        let mean = cluster.iter().map(|&k| values[k]).sum::<Complex<f64>>() / (m as f64);
        let mut shifted = ac.clone();
        for d in 0..n {
            shifted[(d, d)] -= mean;
        }
        // Null vectors of (A - mean I) are the right singular vectors with the
        // smallest singular values; take as many as the cluster multiplicity.
        let svd = shifted.svd(false, true);
        let v_t = svd.v_t.as_ref().expect("requested V^T");
        for (slot, &k) in cluster.iter().enumerate() {
            let row = n - 1 - slot;
            for d in 0..n {
                vectors[(d, col)] = v_t[(row, d)].conj();
            }
            ordered.push(values[k]);
            col += 1;
        }
    }
    debug_assert_eq!(col, n);

    // Residual check: a defective matrix can still yield an innocuous-looking
    // basis from the invariant subspace, but it cannot satisfy A V = V L.
    let mut lambda = CMatrix::zeros(n, n);
    for (d, l) in ordered.iter().enumerate() {
        lambda[(d, d)] = *l;
    }
    let residual = (&ac * &vectors - &vectors * &lambda).norm();
    let cond = cond_2(&vectors);
    if residual > 1e-7 * scale || !cond.is_finite() || cond > COND_LIMIT {
        return Err(Error::NonDiagonalizable {
            cond: if residual > 1e-7 * scale {
                f64::INFINITY
            } else {
                cond
            },
            limit: COND_LIMIT,
        });
    }
    Ok(EigenDecomposition {
        values: ordered,
        vectors,
        cond,
    })
}

/// 2-norm condition number of a complex matrix via its singular values.
pub fn cond_2(m: &CMatrix) -> f64 {
    let sv = m.clone().singular_values();
    let max = sv.iter().copied().fold(0.0f64, f64::max);
    let min = sv.iter().copied().fold(f64::INFINITY, f64::min);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Largest singular value (induced 2-norm) of a real matrix.
pub fn op_norm(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .singular_values()
        .iter()
        .copied()
        .fold(0.0f64, f64::max)
}

/// All eigenvalues strictly in the open left half-plane.
pub fn is_hurwitz(a: &DMatrix<f64>) -> bool {
    a.clone().complex_eigenvalues().iter().all(|l| l.re < 0.0)
}

/// Rank of the controllability matrix `[B, AB, ..., A^(n-1) B]`.
pub fn controllability_rank(a: &DMatrix<f64>, b: &DMatrix<f64>) -> usize {
    let n = a.nrows();
    let m = b.ncols();
    let mut block = b.clone();
    let mut ctrb = DMatrix::<f64>::zeros(n, n * m);
    for k in 0..n {
        ctrb.view_mut((0, k * m), (n, m)).copy_from(&block);
        block = a * &block;
    }
    let scale = ctrb.norm().max(1.0);
    ctrb.rank(1e-10 * scale)
}

/// `exp(A)` by nalgebra's scaling-and-squaring Pade approximation.
pub fn matrix_exp(a: &DMatrix<f64>) -> DMatrix<f64> {
    a.exp()
}

/// `||exp(A t) v||` evaluated directly, used to cross-check burn-in bounds.
pub fn exp_action_norm(a: &DMatrix<f64>, t: f64, v: &DVector<f64>) -> f64 {
    ((a * t).exp() * v).norm()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn diagonal_decomposition_is_trivial() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![-1.0, -2.0, -3.0]));
        let e = eigen_decompose(&a).unwrap();
        assert_relative_eq!(e.cond, 1.0, max_relative = 1e-10);
        assert_relative_eq!(e.lambda_min(), 1.0, max_relative = 1e-12);
        let mut res: Vec<f64> = e.values.iter().map(|l| l.re).collect();
        res.sort_by(f64::total_cmp);
        assert_relative_eq!(res[0], -3.0, max_relative = 1e-12);
        assert_relative_eq!(res[2], -1.0, max_relative = 1e-12);
    }

    #[test]
    fn repeated_semisimple_eigenvalue_gets_full_basis() {
        // -2 I has a two-dimensional eigenspace; cond(V) must stay ~1.
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![-2.0, -2.0]));
        let e = eigen_decompose(&a).unwrap();
        assert!(e.cond < 1.0 + 1e-8, "cond = {}", e.cond);
    }

    #[test]
    fn jordan_block_is_rejected() {
        let a = DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 0.0, -1.0]);
        let err = eigen_decompose(&a).unwrap_err();
        assert!(matches!(err, Error::NonDiagonalizable { .. }), "{err}");
    }

    #[test]
    fn complex_spectrum_is_handled() {
        // Rotation-plus-decay: eigenvalues -0.5 +- i.
        let a = DMatrix::from_row_slice(2, 2, &[-0.5, 1.0, -1.0, -0.5]);
        let e = eigen_decompose(&a).unwrap();
        assert_relative_eq!(e.lambda_min(), 0.5, max_relative = 1e-10);
        assert!(e.cond < 10.0);
        assert!(is_hurwitz(&a));
    }

    #[test]
    fn controllability_of_diag_and_ones() {
        let n = 5;
        let a = DMatrix::from_fn(n, n, |i, j| if i == j { -((i + 1) as f64) } else { 0.0 });
        let b = DMatrix::from_element(n, 1, 1.0);
        assert_eq!(controllability_rank(&a, &b), n);
        // Repeated diagonal entries with a single input are uncontrollable.
        let a2 = DMatrix::from_diagonal(&DVector::from_vec(vec![-1.0, -1.0]));
        let b2 = DMatrix::from_element(2, 1, 1.0);
        assert_eq!(controllability_rank(&a2, &b2), 1);
    }

    #[test]
    fn exp_matches_scalar_case() {
        let a = DMatrix::from_element(1, 1, -2.0);
        let e = matrix_exp(&a);
        assert_relative_eq!(e[(0, 0)], (-2.0f64).exp(), max_relative = 1e-12);
    }
}
