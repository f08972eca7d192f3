//! Least squares: the full-rank estimator, the reduced-rank projection
//! estimator, its mean squared error, the bias statistic and the rank rule.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{MeasurementModel, DEFAULT_RANK_TOLERANCE};
use crate::svd::{svd, OrderedBasis, SvdFactorization};

#[derive(Debug, Clone, PartialEq)]
pub struct LsEstimate {
    pub theta_hat: DVector<f64>,
    pub x_hat: DVector<f64>,
    pub n_hat: DVector<f64>,
    pub rank_used: usize,
}

/// Full-rank least squares through the SVD of `H`: `θ̂ = V Γ⁻¹ Uᵀ y`.
pub fn ls_full(h: &DMatrix<f64>, y: &DVector<f64>) -> Result<LsEstimate> {
    let factors = svd(h)?;
    ls_full_factored(h, &factors, y)
}

/// [`ls_full`] with a precomputed factorization of `h`.
pub fn ls_full_factored(
    h: &DMatrix<f64>,
    factors: &SvdFactorization,
    y: &DVector<f64>,
) -> Result<LsEstimate> {
    if y.len() != h.nrows() {
        return Err(Error::dims(h.nrows(), y.len()));
    }
    if factors.rows() != h.nrows() || factors.k() != h.ncols() {
        return Err(Error::dims(
            format!("{}x{}", h.nrows(), h.ncols()),
            format!("factorization {}x{}", factors.rows(), factors.k()),
        ));
    }
    let threshold = DEFAULT_RANK_TOLERANCE * factors.largest();
    if let Some((index, &value)) = factors.s.iter().enumerate().find(|(_, &s)| s <= threshold) {
        return Err(Error::SingularModel {
            index,
            value,
            threshold,
        });
    }
    let coords = factors.u.transpose() * y;
    let scaled = coords.component_div(&factors.s);
    let theta_hat = &factors.v * scaled;
    let x_hat = h * &theta_hat;
    let n_hat = y - &x_hat;
    Ok(LsEstimate {
        theta_hat,
        x_hat,
        n_hat,
        rank_used: h.ncols(),
    })
}

/// `x̂_r = U_r U_rᵀ y` over the first `r` ordered columns.
pub fn ls_reduced(basis: &OrderedBasis, y: &DVector<f64>, r: usize) -> Result<DVector<f64>> {
    basis.project(y, r)
}

/// `Σ_{j>r} (u_(j)ᵀ x)² + r σ²` in the order of `basis`.
///
/// With the basis ordered against the true signal this is the mean squared
/// error of the rank-`r` projection estimator.
pub fn mse_theoretical_ls(model: &MeasurementModel, basis: &OrderedBasis, r: usize) -> Result<f64> {
    basis.check_rank(r)?;
    let tail: f64 = basis.scores_of(model.signal())?[r..].iter().sum();
    Ok(tail + r as f64 * model.sigma2())
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiasEstimate {
    /// `(U Uᵀ − U_r U_rᵀ) y`.
    pub b_hat: DVector<f64>,
    /// `b̂ᵀb̂ − σ²(p − r)`, unbiased for the squared bias.
    pub b_hat_norm2_corrected: f64,
    pub r: usize,
}

pub fn bias_estimate(
    basis: &OrderedBasis,
    y: &DVector<f64>,
    r: usize,
    sigma2: f64,
) -> Result<BiasEstimate> {
    basis.check_rank(r)?;
    if y.len() != basis.rows() {
        return Err(Error::dims(basis.rows(), y.len()));
    }
    let p = basis.k();
    let discarded = basis.columns.columns(r, p - r);
    let b_hat = discarded * (discarded.transpose() * y);
    let corrected = b_hat.norm_squared() - sigma2 * (p - r) as f64;
    Ok(BiasEstimate {
        b_hat,
        b_hat_norm2_corrected: corrected,
        r,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankSelection {
    /// `objective[r - 1]` is the estimated error at rank `r`.
    pub objective: Vec<f64>,
    pub r_star: usize,
    pub scores: Vec<f64>,
    pub sigma2: f64,
}

impl RankSelection {
    pub fn at(&self, r: usize) -> f64 {
        self.objective[r - 1]
    }
}

/// Index (1-based) of the smallest value; the first one wins on ties.
pub(crate) fn argmin_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v < values[best] {
            best = i;
        }
    }
    best + 1
}

/// `r* = argmin_r [Σ_{j>r} ‖u_(j)ᵀy‖² + σ²(2r − p)]` over `r ∈ 1..=p`, with
/// `p` the number of columns in `basis` and the scores taken from `basis`.
pub fn select_rank_ls(basis: &OrderedBasis, sigma2: f64) -> RankSelection {
    let p = basis.k();
    let objective: Vec<f64> = (1..=p)
        .map(|r| basis.tail_sum(r) + sigma2 * (2.0 * r as f64 - p as f64))
        .collect();
    RankSelection {
        r_star: argmin_first(&objective),
        objective,
        scores: basis.scores.clone(),
        sigma2,
    }
}
