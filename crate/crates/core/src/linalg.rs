//! Small dense linear algebra used by the detectors.
//!
//! Everything here works on `nalgebra` dynamic matrices. The only factorization
//! is a Cholesky kernel; the whitening factor `R = FᵀF` with `F` lower
//! triangular is obtained by running that kernel on the index-reversed matrix.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Pivots at or below this fraction of the largest diagonal entry are rejected.
pub const PIVOT_TOL: f64 = 1e-12;

const SYMMETRY_TOL: f64 = 1e-12;

/// Dense real symmetric matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix(DMatrix<f64>);

impl SymMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::DimensionMismatch(format!(
                "symmetric matrix must be square, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        let scale = m.amax().max(1.0);
        for i in 0..m.nrows() {
            for j in 0..i {
                if (m[(i, j)] - m[(j, i)]).abs() > SYMMETRY_TOL * scale {
                    return Err(Error::DimensionMismatch(format!(
                        "matrix not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(SymMatrix(m))
    }

    /// Wraps `m` after averaging it with its transpose.
    pub fn symmetrize(m: DMatrix<f64>) -> Self {
        let t = m.transpose();
        SymMatrix((m + t) * 0.5)
    }

    pub fn identity(dim: usize) -> Self {
        SymMatrix(DMatrix::identity(dim, dim))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }
}

impl std::ops::Index<(usize, usize)> for SymMatrix {
    type Output = f64;

    fn index(&self, idx: (usize, usize)) -> &f64 {
        &self.0[idx]
    }
}

/// Lower-triangular matrix with positive diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct LowerTriangular(DMatrix<f64>);

impl LowerTriangular {
    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    /// Solves `Fᵀ x = b` (back substitution on the upper-triangular transpose).
    pub fn solve_transpose(&self, b: &DVector<f64>) -> DVector<f64> {
        let f = &self.0;
        let n = f.nrows();
        let mut x = b.clone();
        for i in (0..n).rev() {
            let mut acc = x[i];
            for j in i + 1..n {
                acc -= f[(j, i)] * x[j];
            }
            x[i] = acc / f[(i, i)];
        }
        x
    }
}

impl std::ops::Index<(usize, usize)> for LowerTriangular {
    type Output = f64;

    fn index(&self, idx: (usize, usize)) -> &f64 {
        &self.0[idx]
    }
}

/// Standard Cholesky factor `M = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: DMatrix<f64>,
}

impl Cholesky {
    pub fn new(m: &DMatrix<f64>) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::DimensionMismatch(format!(
                "cholesky needs a square matrix, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        let n = m.nrows();
        let scale = (0..n).map(|i| m[(i, i)].abs()).fold(0.0, f64::max).max(1.0);
        let mut l = DMatrix::zeros(n, n);
        for j in 0..n {
            let mut d = m[(j, j)];
            for k in 0..j {
                d -= l[(j, k)] * l[(j, k)];
            }
            if !(d > PIVOT_TOL * scale) {
                return Err(Error::NotPositiveDefinite { index: j, pivot: d });
            }
            let ljj = d.sqrt();
            l[(j, j)] = ljj;
            for i in j + 1..n {
                let mut s = m[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / ljj;
            }
        }
        Ok(Cholesky { l })
    }

    pub fn l(&self) -> &DMatrix<f64> {
        &self.l
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let l = &self.l;
        let n = l.nrows();
        let mut x = b.clone();
        for i in 0..n {
            let mut acc = x[i];
            for k in 0..i {
                acc -= l[(i, k)] * x[k];
            }
            x[i] = acc / l[(i, i)];
        }
        for i in (0..n).rev() {
            let mut acc = x[i];
            for k in i + 1..n {
                acc -= l[(k, i)] * x[k];
            }
            x[i] = acc / l[(i, i)];
        }
        x
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        let n = self.l.nrows();
        let mut inv = DMatrix::zeros(n, n);
        let mut e = DVector::zeros(n);
        for j in 0..n {
            e.fill(0.0);
            e[j] = 1.0;
            inv.set_column(j, &self.solve(&e));
        }
        // Exact symmetry keeps downstream SymMatrix checks happy.
        for i in 0..n {
            for j in 0..i {
                let v = 0.5 * (inv[(i, j)] + inv[(j, i)]);
                inv[(i, j)] = v;
                inv[(j, i)] = v;
            }
        }
        inv
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }
}

/// Factors `R = FᵀF` with `F` lower triangular.
///
/// Runs the standard kernel on `P R P` (index reversal) and maps back:
/// `F = P Lᵀ P`.
pub fn factor_ftf(r: &SymMatrix) -> Result<LowerTriangular> {
    let n = r.dim();
    let rev = DMatrix::from_fn(n, n, |i, j| r[(n - 1 - i, n - 1 - j)]);
    let chol = Cholesky::new(&rev)?;
    let l = chol.l();
    let f = DMatrix::from_fn(n, n, |i, j| if j <= i { l[(n - 1 - j, n - 1 - i)] } else { 0.0 });
    Ok(LowerTriangular(f))
}

pub fn spd_solve(m: &SymMatrix, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    if rhs.len() != m.dim() {
        return Err(Error::DimensionMismatch(format!(
            "rhs has length {}, matrix is {}x{}",
            rhs.len(),
            m.dim(),
            m.dim()
        )));
    }
    Ok(Cholesky::new(m.as_matrix())?.solve(rhs))
}

pub fn spd_inverse(m: &SymMatrix) -> Result<SymMatrix> {
    Ok(SymMatrix(Cholesky::new(m.as_matrix())?.inverse()))
}

/// `tr[diag(x) A diag(y) B]`, evaluated as `xᵀ (A ∘ Bᵀ) y`.
pub fn schur_trace(x: &DVector<f64>, a: &DMatrix<f64>, y: &DVector<f64>, b: &DMatrix<f64>) -> Result<f64> {
    let n = x.len();
    if y.len() != n || a.shape() != (n, n) || b.shape() != (n, n) {
        return Err(Error::DimensionMismatch(format!(
            "schur_trace wants x, y of length {n} and {n}x{n} matrices"
        )));
    }
    let mut acc = 0.0;
    for i in 0..n {
        let mut row = 0.0;
        for j in 0..n {
            row += a[(i, j)] * b[(j, i)] * y[j];
        }
        acc += x[i] * row;
    }
    Ok(acc)
}

/// General inverse by Gauss-Jordan elimination with partial pivoting.
///
/// Deliberately unrelated to the Cholesky path; the reference detectors use it.
pub fn gauss_jordan_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !m.is_square() {
        return Err(Error::DimensionMismatch("inverse of a non-square matrix".into()));
    }
    let n = m.nrows();
    let mut a = m.clone();
    let mut inv = DMatrix::identity(n, n);
    let scale = m.amax().max(f64::MIN_POSITIVE);
    for col in 0..n {
        let (piv, _) = (col..n)
            .map(|r| (r, a[(r, col)].abs()))
            .fold((col, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        if a[(piv, col)].abs() <= 1e-14 * scale {
            return Err(Error::Singular);
        }
        a.swap_rows(col, piv);
        inv.swap_rows(col, piv);
        let p = a[(col, col)];
        for j in 0..n {
            a[(col, j)] /= p;
            inv[(col, j)] /= p;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let factor = a[(r, col)];
            if factor == 0.0 {
                continue;
            }
            for j in 0..n {
                a[(r, j)] -= factor * a[(col, j)];
                inv[(r, j)] -= factor * inv[(col, j)];
            }
        }
    }
    Ok(inv)
}
