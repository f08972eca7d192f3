//! Thin SVD with a fixed sign convention, score-based ordering of left
//! singular vectors and the rank-r projectors built from that ordering.

use nalgebra::{DMatrix, DVector, SVD};

use crate::error::{Error, Result};

/// Thin singular value decomposition `M = U diag(S) Vᵀ` of an `N × k` matrix
/// with `N ≥ k`.
///
/// Singular values are sorted in descending order and the largest-magnitude
/// entry of every left singular vector is nonnegative.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdFactorization {
    /// `N × k`, orthonormal columns.
    pub u: DMatrix<f64>,
    /// Length `k`, descending, nonnegative.
    pub s: DVector<f64>,
    /// `k × k`, orthogonal. Columns are the right singular vectors.
    pub v: DMatrix<f64>,
}

impl SvdFactorization {
    pub fn rows(&self) -> usize {
        self.u.nrows()
    }

    pub fn k(&self) -> usize {
        self.s.len()
    }

    pub fn largest(&self) -> f64 {
        self.s[0]
    }

    pub fn smallest(&self) -> f64 {
        self.s[self.k() - 1]
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.u * DMatrix::from_diagonal(&self.s) * self.v.transpose()
    }

    /// Number of singular values above `rel_tol · s[0]`.
    pub fn numerical_rank(&self, rel_tol: f64) -> usize {
        let cut = rel_tol * self.largest();
        self.s.iter().filter(|&&s| s > cut).count()
    }
}

pub fn svd(m: &DMatrix<f64>) -> Result<SvdFactorization> {
    let (rows, k) = m.shape();
    if k == 0 || rows < k {
        return Err(Error::dims("N >= k >= 1", format!("{rows}x{k}")));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("matrix has non-finite entries".into()));
    }

    let raw = SVD::new(m.clone(), true, true);
    let u_raw = raw.u.expect("left singular vectors requested");
    let vt_raw = raw.v_t.expect("right singular vectors requested");

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| raw.singular_values[b].total_cmp(&raw.singular_values[a]));

    let mut u = DMatrix::zeros(rows, k);
    let mut v = DMatrix::zeros(k, k);
    let mut s = DVector::zeros(k);
    for (dst, &src) in order.iter().enumerate() {
        let mut ucol = u_raw.column(src).into_owned();
        let mut vcol = vt_raw.row(src).transpose();
        if ucol[ucol.iamax()] < 0.0 {
            ucol.neg_mut();
            vcol.neg_mut();
        }
        u.set_column(dst, &ucol);
        v.set_column(dst, &vcol);
        s[dst] = raw.singular_values[src].max(0.0);
    }
    Ok(SvdFactorization { u, s, v })
}

/// Orthonormal columns reordered so that `‖uᵀy‖²` is nonincreasing.
#[derive(Debug, Clone, PartialEq)]
pub struct OrderedBasis {
    /// `N × k`, column `j` is original column `permutation[j]`.
    pub columns: DMatrix<f64>,
    /// `scores[j] = (columns[j]ᵀ y)²`, nonincreasing.
    pub scores: Vec<f64>,
    /// Ordered position → original (zero-based) column index.
    pub permutation: Vec<usize>,
}

/// Sorts the columns of `u` by their squared inner product with `y`,
/// largest first. Equal scores keep ascending original index.
pub fn order_by_scores(u: &DMatrix<f64>, y: &DVector<f64>) -> Result<OrderedBasis> {
    if u.nrows() != y.len() {
        return Err(Error::dims(
            format!("observation of length {}", u.nrows()),
            format!("length {}", y.len()),
        ));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("observation has non-finite entries".into()));
    }
    let raw: Vec<f64> = u.column_iter().map(|c| c.dot(y).powi(2)).collect();
    let mut permutation: Vec<usize> = (0..raw.len()).collect();
    permutation.sort_by(|&a, &b| raw[b].total_cmp(&raw[a]));

    let columns = u.select_columns(permutation.iter());
    let scores = permutation.iter().map(|&j| raw[j]).collect();
    Ok(OrderedBasis {
        columns,
        scores,
        permutation,
    })
}

impl OrderedBasis {
    pub fn k(&self) -> usize {
        self.scores.len()
    }

    pub fn rows(&self) -> usize {
        self.columns.nrows()
    }

    pub(crate) fn check_rank(&self, r: usize) -> Result<()> {
        if r == 0 || r > self.k() {
            Err(Error::RankOutOfRange {
                rank: r,
                max: self.k(),
            })
        } else {
            Ok(())
        }
    }

    /// `U_r U_rᵀ` from the first `r` ordered columns.
    pub fn projector(&self, r: usize) -> Result<DMatrix<f64>> {
        self.check_rank(r)?;
        let ur = self.columns.columns(0, r);
        Ok(ur * ur.transpose())
    }

    /// `U_r U_rᵀ v` without materializing the `N × N` projector.
    pub fn project(&self, v: &DVector<f64>, r: usize) -> Result<DVector<f64>> {
        self.check_rank(r)?;
        if v.len() != self.rows() {
            return Err(Error::dims(self.rows(), v.len()));
        }
        let ur = self.columns.columns(0, r);
        Ok(ur * (ur.transpose() * v))
    }

    /// Sum of the scores at ordered positions `r..k` (zero-based), i.e. the
    /// scores of the columns discarded by a rank-`r` projector.
    pub fn tail_sum(&self, r: usize) -> f64 {
        self.scores[r.min(self.k())..].iter().sum()
    }

    /// `(columns[j]ᵀ v)²` in this basis' order, for an arbitrary vector `v`.
    pub fn scores_of(&self, v: &DVector<f64>) -> Result<Vec<f64>> {
        if v.len() != self.rows() {
            return Err(Error::dims(self.rows(), v.len()));
        }
        Ok(self
            .columns
            .column_iter()
            .map(|c| c.dot(v).powi(2))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg_matrix(rows: usize, cols: usize, mut state: u64) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        })
    }

    #[test]
    fn identity_has_unit_singular_values() {
        let f = svd(&DMatrix::identity(3, 3)).unwrap();
        for s in f.s.iter() {
            assert!((s - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn stacked_diagonal() {
        let m = DMatrix::from_row_slice(3, 2, &[2.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let f = svd(&m).unwrap();
        assert!((f.s[0] - 2.0).abs() < 1e-14);
        assert!((f.s[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn random_reconstruction_and_orthonormality() {
        let m = lcg_matrix(8, 3, 11);
        let f = svd(&m).unwrap();
        let err = (&m - f.reconstruct()).norm();
        assert!(err <= 1e-9 * m.norm(), "reconstruction error {err}");
        let gram = f.u.transpose() * &f.u;
        assert!((gram - DMatrix::identity(3, 3)).amax() < 1e-10);
        assert!(f.s[0] >= f.s[1] && f.s[1] >= f.s[2] && f.s[2] >= 0.0);
        for c in f.u.column_iter() {
            assert!(c[c.iamax()] >= 0.0);
        }
    }

    #[test]
    fn svd_rejects_wide_and_non_finite() {
        assert!(matches!(
            svd(&DMatrix::zeros(2, 3)),
            Err(Error::DimensionMismatch { .. })
        ));
        let mut m = DMatrix::identity(3, 2);
        m[(0, 1)] = f64::NAN;
        assert!(matches!(svd(&m), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn aligned_observation() {
        let u = svd(&lcg_matrix(6, 3, 5)).unwrap().u;
        let y = u.column(0).into_owned();
        let b = order_by_scores(&u, &y).unwrap();
        assert_eq!(b.permutation[0], 0);
        assert!((b.scores[0] - 1.0).abs() < 1e-12);
        assert!(b.scores[1..].iter().all(|s| s.abs() < 1e-12));
    }

    #[test]
    fn orthogonal_observation_keeps_identity_permutation() {
        let u = DMatrix::identity(4, 2);
        let y = DVector::from_vec(vec![0.0, 0.0, 1.0, 3.0]);
        let b = order_by_scores(&u, &y).unwrap();
        assert_eq!(b.permutation, vec![0, 1]);
        assert_eq!(b.scores, vec![0.0, 0.0]);
    }

    #[test]
    fn scores_match_direct_recomputation() {
        let u = svd(&lcg_matrix(9, 4, 99)).unwrap().u;
        let y = DVector::from_iterator(9, lcg_matrix(9, 1, 3).iter().copied());
        let b = order_by_scores(&u, &y).unwrap();
        let mut direct: Vec<f64> = (0..4)
            .map(|j| {
                let mut acc = 0.0;
                for i in 0..9 {
                    acc += u[(i, j)] * y[i];
                }
                acc * acc
            })
            .collect();
        direct.sort_by(|a, b| b.partial_cmp(a).unwrap());
        for (a, b) in b.scores.iter().zip(&direct) {
            assert!((a - b).abs() < 1e-13);
        }
        for (pos, &orig) in b.permutation.iter().enumerate() {
            assert_eq!(b.columns.column(pos), u.column(orig));
        }
    }

    #[test]
    fn order_rejects_length_mismatch() {
        let u = DMatrix::identity(4, 2);
        assert!(order_by_scores(&u, &DVector::zeros(3)).is_err());
    }

    #[test]
    fn projector_full_rank_and_single_coordinate() {
        let u = DMatrix::identity(3, 3);
        let y = DVector::from_vec(vec![3.0, 2.0, 1.0]);
        let b = order_by_scores(&u, &y).unwrap();
        let full = b.projector(3).unwrap();
        assert!((full.trace() - 3.0).abs() < 1e-12);
        let p1 = b.projector(1).unwrap();
        let mut e1 = DMatrix::zeros(3, 3);
        e1[(0, 0)] = 1.0;
        assert_eq!(p1, e1);
        assert!(b.projector(0).is_err());
        assert!(b.projector(4).is_err());
    }

    #[test]
    fn projection_matches_expansion() {
        let u = svd(&lcg_matrix(10, 4, 17)).unwrap().u;
        let y = DVector::from_iterator(10, lcg_matrix(10, 1, 23).iter().copied());
        let b = order_by_scores(&u, &y).unwrap();
        for r in 1..=4 {
            let mut expansion = DVector::zeros(10);
            for j in 0..r {
                let c = b.columns.column(j);
                expansion += c * c.dot(&y);
            }
            let p = b.projector(r).unwrap();
            assert!((&p * &y - &expansion).amax() < 1e-12);
            assert!((b.project(&y, r).unwrap() - &expansion).amax() < 1e-12);
            assert!((&p * &p - &p).amax() < 1e-10);
            assert!((&p - p.transpose()).amax() < 1e-14);
            assert!((p.trace() - r as f64).abs() < 1e-10);
        }
    }
}
