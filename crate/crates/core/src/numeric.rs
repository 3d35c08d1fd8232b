//! Dense linear algebra used by the GP computations: symmetric matrices,
//! Cholesky factorization with a jitter ladder, triangular solves and
//! log-determinants. Everything is `f64` and allocation-per-call; matrices at
//! this scale (m <= 512) do not justify anything fancier.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Jitter ladder used when factorizing kernel matrices.
pub const DEFAULT_JITTER_LADDER: [f64; 4] = [0.0, 1e-8, 1e-6, 1e-4];

/// Symmetric real matrix. Symmetry is enforced at construction by averaging
/// with the transpose, so `get(i, j) == get(j, i)` exactly as stored.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SymMatrix {
    data: Array2<f64>,
}

impl SymMatrix {
    pub fn new(a: Array2<f64>) -> Result<Self> {
        if a.nrows() != a.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "symmetric matrix must be square, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        if a.nrows() == 0 {
            return Err(Error::DimensionMismatch("empty matrix".into()));
        }
        let sym = (&a + &a.t()) * 0.5;
        Ok(SymMatrix { data: sym })
    }

    pub fn from_fn(dim: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        Self::new(Array2::from_shape_fn((dim, dim), |(i, j)| f(i, j)))
    }

    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.data.view()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[[i, j]]
    }
}

/// Lower-triangular Cholesky factor together with the jitter that was added
/// to the diagonal to obtain it.
#[derive(Debug, Clone)]
pub struct CholFactor {
    pub lower: Array2<f64>,
    pub jitter_used: f64,
}

impl CholFactor {
    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }
}

/// Side of a triangular solve against a Cholesky factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TriSide {
    Lower,
    LowerTranspose,
}

fn raw_cholesky(a: ArrayView2<'_, f64>, jitter: f64) -> Option<Array2<f64>> {
    let n = a.nrows();
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut d = a[[j, j]] + jitter;
        for k in 0..j {
            d -= l[[j, k]] * l[[j, k]];
        }
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        let dj = d.sqrt();
        l[[j, j]] = dj;
        for i in (j + 1)..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / dj;
        }
    }
    Some(l)
}

/// Factor `a + lambda I` for the smallest ladder entry `lambda` that yields a
/// positive-definite factorization. The ladder must be sorted ascending and
/// start at 0.
pub fn cholesky_psd(a: &SymMatrix, jitter_ladder: &[f64]) -> Result<CholFactor> {
    if jitter_ladder.is_empty() {
        return Err(Error::OutOfRange("empty jitter ladder".into()));
    }
    for w in jitter_ladder.windows(2) {
        if w[0] > w[1] {
            return Err(Error::OutOfRange("jitter ladder must be ascending".into()));
        }
    }
    if jitter_ladder[0] < 0.0 {
        return Err(Error::OutOfRange("jitter must be non-negative".into()));
    }
    for &jitter in jitter_ladder {
        if let Some(lower) = raw_cholesky(a.view(), jitter) {
            return Ok(CholFactor {
                lower,
                jitter_used: jitter,
            });
        }
    }
    Err(Error::FactorizationFailed(format!(
        "cholesky failed for all {} ladder entries (dim {})",
        jitter_ladder.len(),
        a.dim()
    )))
}

/// Solve `L x = b` for a lower-triangular `l` (column-by-column forward
/// substitution). `l` is read as-is; entries above the diagonal are ignored.
pub fn solve_lower(l: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let n = l.nrows();
    if l.ncols() != n || b.nrows() != n {
        return Err(Error::DimensionMismatch(format!(
            "solve_lower: L is {}x{}, b has {} rows",
            l.nrows(),
            l.ncols(),
            b.nrows()
        )));
    }
    let mut x = b.to_owned();
    for c in 0..x.ncols() {
        for i in 0..n {
            let mut s = x[[i, c]];
            for k in 0..i {
                s -= l[[i, k]] * x[[k, c]];
            }
            x[[i, c]] = s / l[[i, i]];
        }
    }
    Ok(x)
}

/// Solve `L^T x = b` for a lower-triangular `l` (back substitution).
pub fn solve_lower_t(l: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let n = l.nrows();
    if l.ncols() != n || b.nrows() != n {
        return Err(Error::DimensionMismatch(format!(
            "solve_lower_t: L is {}x{}, b has {} rows",
            l.nrows(),
            l.ncols(),
            b.nrows()
        )));
    }
    let mut x = b.to_owned();
    for c in 0..x.ncols() {
        for i in (0..n).rev() {
            let mut s = x[[i, c]];
            for k in (i + 1)..n {
                s -= l[[k, i]] * x[[k, c]];
            }
            x[[i, c]] = s / l[[i, i]];
        }
    }
    Ok(x)
}

/// Triangular solve against a Cholesky factor.
pub fn tri_solve(l: &CholFactor, b: ArrayView2<'_, f64>, side: TriSide) -> Result<Array2<f64>> {
    match side {
        TriSide::Lower => solve_lower(l.lower.view(), b),
        TriSide::LowerTranspose => solve_lower_t(l.lower.view(), b),
    }
}

/// Vector convenience wrapper over [`tri_solve`].
pub fn tri_solve_vec(l: &CholFactor, b: ArrayView1<'_, f64>, side: TriSide) -> Result<Array1<f64>> {
    let col = b
        .to_owned()
        .into_shape_with_order((b.len(), 1))
        .expect("vector reshape");
    let x = tri_solve(l, col.view(), side)?;
    Ok(x.column(0).to_owned())
}

/// Log-determinant of the factored matrix: `2 * sum(log diag(L))`.
pub fn log_det(l: &CholFactor) -> f64 {
    2.0 * l.lower.diag().iter().map(|d| d.ln()).sum::<f64>()
}

/// Solve `(L L^T) x = b` with both triangular sweeps.
pub fn chol_solve(l: &CholFactor, b: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let y = tri_solve(l, b, TriSide::Lower)?;
    tri_solve(l, y.view(), TriSide::LowerTranspose)
}

/// Reverse-mode sensitivity of a Cholesky factorization: given `L = chol(A)`
/// and the gradient `lbar` of a scalar objective with respect to `L`, returns
/// the gradient with respect to `A` under the symmetric-perturbation
/// convention (`dA` symmetric, all entries of the returned matrix populated).
pub fn chol_rev(l: ArrayView2<'_, f64>, lbar: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let n = l.nrows();
    if l.ncols() != n || lbar.nrows() != n || lbar.ncols() != n {
        return Err(Error::DimensionMismatch("chol_rev shapes".into()));
    }
    // P = Phi(L^T Lbar): lower triangle with halved diagonal.
    let lt_lbar = l.t().dot(&lbar);
    let mut p = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            p[[i, j]] = if i == j {
                0.5 * lt_lbar[[i, j]]
            } else {
                lt_lbar[[i, j]]
            };
        }
    }
    let sym = &p + &p.t();
    // Abar = 0.5 * L^{-T} (P + P^T) L^{-1}
    let half = solve_lower_t(l, sym.view())?;
    // right-multiplication by L^{-1}: solve X L = half  =>  L^T X^T = half^T
    let xt = solve_lower_t(l, half.t().to_owned().view())?;
    Ok(xt.t().to_owned() * 0.5)
}
