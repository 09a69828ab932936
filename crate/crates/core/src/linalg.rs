//! Dense linear-algebra helpers shared by the shrinkage operators and the
//! linked-matrix fitters.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Thin singular value decomposition `X = U · diag(d) · Vᵀ`.
///
/// `left` is `M×H`, `right` is `N×H` and `values` has length `H`, sorted
/// non-increasing. A full decomposition has `H = min(M, N)`; truncated
/// triples (for example a fitted module) keep only their positive values.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdTriple {
    pub left: DMatrix<f64>,
    pub values: Vec<f64>,
    pub right: DMatrix<f64>,
}

impl SvdTriple {
    /// Full thin SVD with `H = min(M, N)`.
    pub fn compute(x: &DMatrix<f64>) -> Result<Self> {
        let (m, n) = x.shape();
        check_input(x)?;
        let svd = to_faer(x)
            .thin_svd()
            .map_err(|e| Error::numerical(format!("SVD of a {m}x{n} matrix did not converge: {e:?}")))?;
        let (u, v) = (svd.U(), svd.V());
        let d = svd.S().column_vector();
        let h = m.min(n);
        let mut order: Vec<usize> = (0..h).collect();
        order.sort_by(|&a, &b| d[b].total_cmp(&d[a]));
        Ok(SvdTriple {
            left: DMatrix::from_fn(m, h, |i, j| u[(i, order[j])]),
            values: order.iter().map(|&r| d[r].max(0.0)).collect(),
            right: DMatrix::from_fn(n, h, |i, j| v[(i, order[j])]),
        })
    }

    /// A rank-zero triple for an `m×n` zero matrix.
    pub fn zero(m: usize, n: usize) -> Self {
        SvdTriple {
            left: DMatrix::zeros(m, 0),
            values: Vec::new(),
            right: DMatrix::zeros(n, 0),
        }
    }

    pub fn nrows(&self) -> usize {
        self.left.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.right.nrows()
    }

    /// Number of strictly positive singular values.
    pub fn rank(&self) -> usize {
        self.values.iter().filter(|&&d| d > 0.0).count()
    }

    /// `U · diag(values) · Vᵀ` using the supplied diagonal in place of the
    /// stored singular values. Zero entries are skipped.
    pub fn reconstruct_with(&self, values: &[f64]) -> DMatrix<f64> {
        assert_eq!(values.len(), self.values.len(), "diagonal length mismatch");
        let active: Vec<usize> = (0..values.len()).filter(|&r| values[r] != 0.0).collect();
        let (m, n) = (self.nrows(), self.ncols());
        if active.is_empty() {
            return DMatrix::zeros(m, n);
        }
        let scaled_left = DMatrix::from_fn(m, active.len(), |i, j| {
            self.left[(i, active[j])] * values[active[j]]
        });
        let right = DMatrix::from_fn(n, active.len(), |i, j| self.right[(i, active[j])]);
        scaled_left * right.transpose()
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        self.reconstruct_with(&self.values)
    }

    /// Keeps the leading `rank` components.
    pub fn truncated(&self, rank: usize) -> Self {
        let rank = rank.min(self.values.len());
        SvdTriple {
            left: self.left.columns(0, rank).into_owned(),
            values: self.values[..rank].to_vec(),
            right: self.right.columns(0, rank).into_owned(),
        }
    }

    /// Replaces the diagonal and drops components whose new value is zero.
    /// `values` must be non-increasing for the result to remain sorted.
    pub fn with_values(&self, values: &[f64]) -> Self {
        assert_eq!(values.len(), self.values.len(), "diagonal length mismatch");
        let keep = values.iter().take_while(|&&d| d > 0.0).count();
        let mut out = self.truncated(keep);
        out.values.copy_from_slice(&values[..keep]);
        out
    }
}

pub fn frobenius_sq(x: &DMatrix<f64>) -> f64 {
    x.iter().map(|v| v * v).sum()
}

pub fn frobenius_dist_sq(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "shape mismatch");
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_input(x: &DMatrix<f64>) -> Result<()> {
    let (m, n) = x.shape();
    if m == 0 || n == 0 {
        return Err(Error::validation(format!("cannot decompose an empty {m}x{n} matrix")));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("matrix contains non-finite values"));
    }
    Ok(())
}

fn to_faer(x: &DMatrix<f64>) -> faer::Mat<f64> {
    faer::Mat::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)])
}

/// Singular values only, non-increasing.
pub fn singular_values(x: &DMatrix<f64>) -> Result<DVector<f64>> {
    check_input(x)?;
    let mut values = to_faer(x)
        .singular_values()
        .map_err(|e| Error::numerical(format!("singular value iteration did not converge: {e:?}")))?;
    values.sort_by(|a, b| b.total_cmp(a));
    Ok(DVector::from_vec(values))
}
