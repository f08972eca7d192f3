//! Total least squares through the SVD of the augmented matrix `[H̃ y]`, the
//! hypothesized rank-q projection estimator and its selection objective.
//!
//! The rank-q objective depends on `θᵀθ`. [`theorem2_certificate`] evaluates
//! it over a grid of candidate values and reports when the minimizing rank
//! changes, which is what rules out a parameter-free rank rule in general.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ls::argmin_first;
use crate::model::{MeasurementModel, DEFAULT_RANK_TOLERANCE};
use crate::svd::{order_by_scores, svd, OrderedBasis, SvdFactorization};

/// Uniqueness threshold on `γ_p − γ_{p+1}`, relative to `γ_1`.
pub const SINGULAR_GAP_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct TlsEstimate {
    pub theta_hat: DVector<f64>,
    pub x_hat: DVector<f64>,
    pub n_hat: DVector<f64>,
    /// `Ĥ = U_s U_sᵀ H̃`.
    pub h_corrected: DMatrix<f64>,
    /// SVD of `A = [H̃ y]`.
    pub augmented: SvdFactorization,
    /// `γ_p − γ_{p+1}` of `A`.
    pub singular_gap: f64,
}

impl TlsEstimate {
    pub fn p(&self) -> usize {
        self.theta_hat.len()
    }

    /// Left singular vectors of `A` for the `p` largest singular values.
    pub fn retained(&self) -> DMatrix<f64> {
        self.augmented.u.columns(0, self.p()).into_owned()
    }

    /// Left singular vector of `A` for the smallest singular value.
    pub fn discarded(&self) -> DVector<f64> {
        self.augmented.u.column(self.p()).into_owned()
    }

    pub fn smallest_singular_value(&self) -> f64 {
        self.augmented.smallest()
    }
}

pub fn tls_solve(h_tilde: &DMatrix<f64>, y: &DVector<f64>) -> Result<TlsEstimate> {
    let (n, p) = h_tilde.shape();
    if p == 0 || n < p + 1 {
        return Err(Error::dims("N >= p + 1, p >= 1", format!("{n}x{p}")));
    }
    if y.len() != n {
        return Err(Error::dims(n, y.len()));
    }
    let mut a = DMatrix::zeros(n, p + 1);
    a.columns_mut(0, p).copy_from(h_tilde);
    a.set_column(p, y);
    let augmented = svd(&a)?;

    let singular_gap = augmented.s[p - 1] - augmented.s[p];
    let threshold = SINGULAR_GAP_TOLERANCE * augmented.largest();
    if !(singular_gap > threshold) {
        return Err(Error::NonuniqueTls {
            gap: singular_gap,
            threshold,
        });
    }

    let us = augmented.u.columns(0, p);
    let h_corrected = us * (us.transpose() * h_tilde);
    let x_hat = us * (us.transpose() * y);
    let n_hat = y - &x_hat;

    // (H̃ᵀ P H̃)⁻¹ H̃ᵀ P y = (ĤᵀĤ)⁻¹ Ĥᵀ x̂, solved through the SVD of Ĥ.
    let inner = svd(&h_corrected)?;
    let cut = DEFAULT_RANK_TOLERANCE * inner.largest();
    if !(inner.smallest() > cut) {
        return Err(Error::DegenerateTls {
            value: inner.smallest(),
        });
    }
    let coords = (inner.u.transpose() * &x_hat).component_div(&inner.s);
    let theta_hat = &inner.v * coords;

    Ok(TlsEstimate {
        theta_hat,
        x_hat,
        n_hat,
        h_corrected,
        augmented,
        singular_gap,
    })
}

/// `‖H̃θ − y‖² / (θᵀθ + 1)`.
pub fn tls_objective(theta: &DVector<f64>, h_tilde: &DMatrix<f64>, y: &DVector<f64>) -> Result<f64> {
    if h_tilde.ncols() != theta.len() || h_tilde.nrows() != y.len() {
        return Err(Error::dims(
            format!("{}x{} system with observation {}", y.len(), theta.len(), y.len()),
            format!("{}x{} with observation {}", h_tilde.nrows(), h_tilde.ncols(), y.len()),
        ));
    }
    Ok((h_tilde * theta - y).norm_squared() / (theta.norm_squared() + 1.0))
}

/// Ordering used by the rank-q estimator: the `p` retained columns of `U_A`
/// sorted against `y`, plus the always-discarded smallest-singular direction.
#[derive(Debug, Clone, PartialEq)]
pub struct TlsOrdering {
    pub basis: OrderedBasis,
    pub discarded: DVector<f64>,
}

impl TlsOrdering {
    pub fn new(estimate: &TlsEstimate, y: &DVector<f64>) -> Result<Self> {
        Ok(Self {
            basis: order_by_scores(&estimate.retained(), y)?,
            discarded: estimate.discarded(),
        })
    }

    pub fn p(&self) -> usize {
        self.basis.k()
    }

    /// The `p + 1` scores fed to [`q_objective`]: the ordered retained scores
    /// followed by `(u_sᵀy)²`.
    pub fn objective_scores(&self, y: &DVector<f64>) -> Vec<f64> {
        let mut s = self.basis.scores.clone();
        s.push(self.discarded.dot(y).powi(2));
        s
    }

    /// `Σ_{j>q} (u_(j)ᵀx)² + qσ²` over all `p + 1` columns of `U_A`, for the
    /// realized ordering.
    pub fn oracle_mse(&self, x: &DVector<f64>, q: usize, sigma2: f64) -> Result<f64> {
        self.basis.check_rank(q)?;
        let tail: f64 = self.basis.scores_of(x)?[q..].iter().sum();
        Ok(tail + self.discarded.dot(x).powi(2) + q as f64 * sigma2)
    }
}

/// `x̂_q = U_q U_qᵀ y` over the first `q` ordered retained columns.
pub fn tls_reduced(basis: &OrderedBasis, y: &DVector<f64>, q: usize) -> Result<DVector<f64>> {
    basis.project(y, q)
}

/// `‖Ĥθ − Hθ‖² + σ²(1 + θᵀθ) p`.
pub fn mse_theoretical_tls_full(model: &MeasurementModel, estimate: &TlsEstimate) -> Result<f64> {
    if estimate.h_corrected.shape() != model.h().shape() {
        return Err(Error::dims(
            format!("{:?}", model.h().shape()),
            format!("{:?}", estimate.h_corrected.shape()),
        ));
    }
    let bias = (&estimate.h_corrected * model.theta() - model.signal()).norm_squared();
    Ok(bias + model.sigma2() * (1.0 + model.theta_norm2()) * model.p() as f64)
}

/// Source of the `θᵀθ` value plugged into the rank-q objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum QMode {
    /// The true `θᵀθ`.
    Oracle { theta_norm2: f64 },
    /// A norm bound `θᵀθ ≤ C`, with `C` used in place of `θᵀθ`.
    Bound { c: f64 },
}

impl QMode {
    pub fn theta_norm2(&self) -> f64 {
        match *self {
            QMode::Oracle { theta_norm2 } => theta_norm2,
            QMode::Bound { c } => c,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QObjective {
    /// `values[q - 1]` for `q ∈ 1..=p`.
    pub values: Vec<f64>,
    pub q_star: usize,
    pub mode: QMode,
    pub scores: Vec<f64>,
}

impl QObjective {
    pub fn at(&self, q: usize) -> f64 {
        self.values[q - 1]
    }
}

/// `(1/[1+t]) · [Σ_{j=q+1}^{p+1} s_j + σ²(1+t)(2q + p)]` for `q ∈ 1..=p`,
/// `t` from `mode`, and its smallest minimizer.
pub fn q_objective(scores: &[f64], sigma2: f64, p: usize, mode: QMode) -> Result<QObjective> {
    if p == 0 || scores.len() != p + 1 {
        return Err(Error::dims(format!("{} scores", p + 1), scores.len()));
    }
    let t = mode.theta_norm2();
    if !(t >= 0.0 && t.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "theta norm surrogate must be finite and >= 0, got {t}"
        )));
    }
    if !(sigma2 >= 0.0 && sigma2.is_finite()) {
        return Err(Error::InvalidInput(format!("sigma2 must be finite and >= 0, got {sigma2}")));
    }
    if scores.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
        return Err(Error::InvalidInput("scores must be finite and >= 0".into()));
    }
    let scale = 1.0 + t;
    let values: Vec<f64> = (1..=p)
        .map(|q| {
            let tail: f64 = scores[q..].iter().sum();
            (tail + sigma2 * scale * (2 * q + p) as f64) / scale
        })
        .collect();
    Ok(QObjective {
        q_star: argmin_first(&values),
        values,
        mode,
        scores: scores.to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaDependence {
    /// `(t, q*(t))` in grid order.
    pub entries: Vec<(f64, usize)>,
    pub constant: bool,
    /// First grid pair `(t₁, t₂)` whose minimizers differ.
    pub witness: Option<(f64, f64)>,
}

/// Evaluates the minimizing rank at every `θᵀθ` value of `grid` and reports
/// whether it is constant.
pub fn theorem2_certificate(
    grid: &[f64],
    scores: &[f64],
    sigma2: f64,
    p: usize,
) -> Result<ThetaDependence> {
    if grid.is_empty() {
        return Err(Error::InvalidInput("empty theta grid".into()));
    }
    let entries = grid
        .iter()
        .map(|&t| q_objective(scores, sigma2, p, QMode::Oracle { theta_norm2: t }).map(|o| (t, o.q_star)))
        .collect::<Result<Vec<_>>>()?;
    let witness = entries
        .iter()
        .find(|e| e.1 != entries[0].1)
        .map(|e| (entries[0].0, e.0));
    Ok(ThetaDependence {
        constant: witness.is_none(),
        witness,
        entries,
    })
}

/// A concrete instance where the rank-q minimizer moves with `θᵀθ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem2Witness {
    pub scores: Vec<f64>,
    pub sigma2: f64,
    pub p: usize,
    pub t1: f64,
    pub t2: f64,
    pub q1: usize,
    pub q2: usize,
}

/// Exhaustive search over small synthetic score vectors (`σ² = 1`,
/// `p ∈ 1..=3`, descending scores from a fixed level set) and pairs of `θᵀθ`
/// values for an instance whose minimizer differs between the pair.
pub fn search_theorem2_witness() -> Option<Theorem2Witness> {
    const LEVELS: [f64; 7] = [16.0, 8.0, 4.0, 2.0, 1.0, 0.5, 0.0];
    const GRID: [f64; 5] = [0.0, 0.5, 1.0, 3.0, 10.0];
    let sigma2 = 1.0;
    for p in 1..=3usize {
        let mut idx = vec![0usize; p + 1];
        loop {
            if idx.windows(2).all(|w| w[0] <= w[1]) {
                let scores: Vec<f64> = idx.iter().map(|&i| LEVELS[i]).collect();
                for (a, &t1) in GRID.iter().enumerate() {
                    for &t2 in &GRID[a + 1..] {
                        let q1 = q_objective(&scores, sigma2, p, QMode::Oracle { theta_norm2: t1 })
                            .ok()?
                            .q_star;
                        let q2 = q_objective(&scores, sigma2, p, QMode::Oracle { theta_norm2: t2 })
                            .ok()?
                            .q_star;
                        if q1 != q2 {
                            return Some(Theorem2Witness {
                                scores,
                                sigma2,
                                p,
                                t1,
                                t2,
                                q1,
                                q2,
                            });
                        }
                    }
                }
            }
            // Odometer over level indices.
            let mut pos = 0;
            loop {
                if pos == idx.len() {
                    break;
                }
                idx[pos] += 1;
                if idx[pos] < LEVELS.len() {
                    break;
                }
                idx[pos] = 0;
                pos += 1;
            }
            if pos == idx.len() {
                break;
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{gaussian_design, sample_tls};

    fn noiseless_instance() -> (DMatrix<f64>, DVector<f64>, DVector<f64>) {
        let h = gaussian_design(12, 3, 21);
        let theta = DVector::from_vec(vec![1.5, -0.5, 2.0]);
        let y = &h * &theta;
        (h, theta, y)
    }

    #[test]
    fn exact_data_recovers_parameter() {
        let (h, theta, y) = noiseless_instance();
        let est = tls_solve(&h, &y).unwrap();
        assert!((&est.theta_hat - &theta).amax() < 1e-10);
        assert!(est.smallest_singular_value() <= 1e-10 * est.augmented.largest());
        assert!((&est.h_corrected - &h).amax() < 1e-10);
    }

    #[test]
    fn scalar_orthogonal_regression_matches_two_by_two_eigenvector() {
        // A = [h y] with h = (1, 0, 1)·2 and y = (1, 1, 1.5): smallest
        // eigenvector of AᵀA = [[a, b], [b, c]] gives slope −v₁/v₂.
        let h = DMatrix::<f64>::from_column_slice(3, 1, &[2.0, 0.0, 2.0]);
        let y = DVector::from_vec(vec![1.0, 1.0, 1.5]);
        let a = h.column(0).norm_squared();
        let b = h.column(0).dot(&y);
        let c = y.norm_squared();
        let lambda = 0.5 * ((a + c) - ((a - c).powi(2) + 4.0 * b * b).sqrt());
        // (a − λ) v₁ + b v₂ = 0  ⇒  v = (b, λ − a)
        let slope = -b / (lambda - a);
        let est = tls_solve(&h, &y).unwrap();
        assert!((est.theta_hat[0] - slope).abs() < 1e-12 * slope.abs().max(1.0));
    }

    #[test]
    fn rejects_bad_shapes_and_ties() {
        let h = DMatrix::identity(2, 2);
        assert!(tls_solve(&h, &DVector::zeros(2)).is_err());
        // Orthogonal columns of equal norm: A has a repeated singular value.
        let h = DMatrix::from_row_slice(3, 1, &[1.0, 0.0, 0.0]);
        let y = DVector::from_vec(vec![0.0, 1.0, 0.0]);
        assert_eq!(tls_solve(&h, &y).unwrap_err().code(), "nonunique-tls");
    }

    #[test]
    fn degenerate_when_observation_direction_dominates() {
        // y is orthogonal to h and longer: v_{p+1} has a zero last entry.
        let h = DMatrix::from_row_slice(3, 1, &[1.0, 0.0, 0.0]);
        let y = DVector::from_vec(vec![0.0, 2.0, 0.0]);
        assert_eq!(tls_solve(&h, &y).unwrap_err().code(), "degenerate-tls");
    }

    #[test]
    fn objective_edges() {
        let (h, theta, y) = noiseless_instance();
        assert!(tls_objective(&theta, &h, &y).unwrap().abs() < 1e-20);
        let zero = DVector::zeros(3);
        assert!((tls_objective(&zero, &h, &y).unwrap() - y.norm_squared()).abs() < 1e-12);
        assert!(tls_objective(&DVector::zeros(2), &h, &y).is_err());
    }

    #[test]
    fn reduced_edges() {
        let h = gaussian_design(10, 3, 5);
        let m = MeasurementModel::new(h, DVector::from_vec(vec![1.0, 2.0, -1.0]), 0.01).unwrap();
        let r = sample_tls(&m, 3, 0);
        let est = tls_solve(r.h_tilde.as_ref().unwrap(), &r.y).unwrap();
        let ord = TlsOrdering::new(&est, &r.y).unwrap();
        assert!((tls_reduced(&ord.basis, &r.y, 3).unwrap() - &est.x_hat).amax() < 1e-10);
        assert!(tls_reduced(&ord.basis, &r.y, 4).is_err());

        let u = DMatrix::identity(5, 2);
        let y = DVector::from_vec(vec![0.0, 0.0, 1.0, 1.0, 0.0]);
        let b = order_by_scores(&u, &y).unwrap();
        assert_eq!(tls_reduced(&b, &y, 2).unwrap(), DVector::zeros(5));
    }

    #[test]
    fn full_mse_theory_edges() {
        let h = gaussian_design(8, 2, 6);
        let m = MeasurementModel::new(h.clone(), DVector::zeros(2), 0.3).unwrap();
        let r = sample_tls(&m, 1, 1);
        let est = tls_solve(r.h_tilde.as_ref().unwrap(), &r.y).unwrap();
        assert!((mse_theoretical_tls_full(&m, &est).unwrap() - 0.6).abs() < 1e-12);

        let (h, theta, y) = noiseless_instance();
        let m = MeasurementModel::new(h.clone(), theta, 0.0).unwrap();
        let est = tls_solve(&h, &y).unwrap();
        assert!(mse_theoretical_tls_full(&m, &est).unwrap() < 1e-18);
    }

    #[test]
    fn q_objective_zero_parameter_reduction() {
        let scores = [9.0, 4.0, 1.0, 0.25];
        let o = q_objective(&scores, 0.5, 3, QMode::Oracle { theta_norm2: 0.0 }).unwrap();
        for q in 1..=3 {
            let tail: f64 = scores[q..].iter().sum();
            assert!((o.at(q) - (tail + 0.5 * (2 * q + 3) as f64)).abs() < 1e-12);
        }
    }

    #[test]
    fn q_objective_all_zero_scores() {
        let o = q_objective(&[0.0; 5], 1.0, 4, QMode::Bound { c: 2.0 }).unwrap();
        assert!(o.values.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(o.q_star, 1);
    }

    #[test]
    fn q_objective_rejects_bad_input() {
        assert!(q_objective(&[1.0, 0.0], 1.0, 1, QMode::Bound { c: -1.0 }).is_err());
        assert!(q_objective(&[1.0, 0.0, 0.0], 1.0, 1, QMode::Bound { c: 1.0 }).is_err());
        assert!(q_objective(&[1.0, f64::NAN], 1.0, 1, QMode::Bound { c: 1.0 }).is_err());
    }

    #[test]
    fn certificate_degenerate_cases() {
        let c = theorem2_certificate(&[0.0, 1.0, 100.0], &[0.0; 4], 1.0, 3).unwrap();
        assert!(c.constant);
        assert!(c.entries.iter().all(|e| e.1 == 1));
        let c = theorem2_certificate(&[2.0], &[5.0, 1.0, 0.0], 1.0, 2).unwrap();
        assert!(c.constant);
        assert!(c.witness.is_none());
        assert!(theorem2_certificate(&[], &[5.0, 1.0, 0.0], 1.0, 2).is_err());
    }

    /// Direct evaluation of the rank-q objective, written independently of
    /// `q_objective`.
    fn brute_q_star(scores: &[f64], sigma2: f64, p: usize, t: f64) -> usize {
        let mut best_q = 0;
        let mut best = f64::INFINITY;
        for q in 1..=p {
            let mut tail = 0.0;
            for j in (q + 1)..=(p + 1) {
                tail += scores[j - 1];
            }
            let v = (tail + sigma2 * (1.0 + t) * (2.0 * q as f64 + p as f64)) / (1.0 + t);
            if v < best {
                best = v;
                best_q = q;
            }
        }
        best_q
    }

    #[test]
    fn searched_witness_is_theta_dependent() {
        let w = search_theorem2_witness().expect("witness exists");
        assert_ne!(w.q1, w.q2);
        assert_eq!(brute_q_star(&w.scores, w.sigma2, w.p, w.t1), w.q1);
        assert_eq!(brute_q_star(&w.scores, w.sigma2, w.p, w.t2), w.q2);
        let c = theorem2_certificate(&[w.t1, w.t2], &w.scores, w.sigma2, w.p).unwrap();
        assert!(!c.constant);
        assert_eq!(c.witness, Some((w.t1, w.t2)));
    }
}
