//! Ground-truth measurement model `y = Hθ + n` (optionally with a perturbed
//! system matrix `H̃ = H + E`) and reproducible sampling of realizations.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::svd::{svd, SvdFactorization};

/// Default relative singular-value threshold for "H has full column rank".
pub const DEFAULT_RANK_TOLERANCE: f64 = 1e-10;

/// Stream id reserved for design-matrix generation so it never collides with
/// a trial stream drawn from the same seed.
const DESIGN_STREAM: u64 = u64::MAX;

/// Per-trial generator. Every `(seed, trial)` pair is its own ChaCha stream,
/// so trials can be drawn in any order or concurrently.
pub fn trial_rng(seed: u64, trial: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial);
    rng
}

fn design_rng(seed: u64) -> ChaCha8Rng {
    trial_rng(seed, DESIGN_STREAM)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementModel {
    h: DMatrix<f64>,
    theta: DVector<f64>,
    sigma2: f64,
    signal: DVector<f64>,
    design: SvdFactorization,
}

impl MeasurementModel {
    pub fn new(h: DMatrix<f64>, theta: DVector<f64>, sigma2: f64) -> Result<Self> {
        Self::with_rank_tolerance(h, theta, sigma2, DEFAULT_RANK_TOLERANCE)
    }

    pub fn with_rank_tolerance(
        h: DMatrix<f64>,
        theta: DVector<f64>,
        sigma2: f64,
        rank_tolerance: f64,
    ) -> Result<Self> {
        let (n, p) = h.shape();
        if p == 0 || p > n {
            return Err(Error::ModelInvalid(format!(
                "system matrix must satisfy 1 <= p <= N, got {n}x{p}"
            )));
        }
        if theta.len() != p {
            return Err(Error::ModelInvalid(format!(
                "parameter has length {}, expected {p}",
                theta.len()
            )));
        }
        if !(sigma2 >= 0.0 && sigma2.is_finite()) {
            return Err(Error::ModelInvalid(format!(
                "noise variance must be finite and >= 0, got {sigma2}"
            )));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::ModelInvalid("parameter has non-finite entries".into()));
        }
        let design = svd(&h).map_err(|e| Error::ModelInvalid(e.to_string()))?;
        let threshold = rank_tolerance * design.largest();
        if design.smallest() <= threshold {
            return Err(Error::ModelInvalid(format!(
                "system matrix is rank deficient: singular value {:e} at index {} is below {:e}",
                design.smallest(),
                p - 1,
                threshold
            )));
        }
        let signal = &h * &theta;
        Ok(Self {
            h,
            theta,
            sigma2,
            signal,
            design,
        })
    }

    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn theta(&self) -> &DVector<f64> {
        &self.theta
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn n(&self) -> usize {
        self.h.nrows()
    }

    pub fn p(&self) -> usize {
        self.h.ncols()
    }

    /// `x = Hθ`.
    pub fn signal(&self) -> &DVector<f64> {
        &self.signal
    }

    /// SVD of `H`, computed once at construction.
    pub fn design_svd(&self) -> &SvdFactorization {
        &self.design
    }

    pub fn theta_norm2(&self) -> f64 {
        self.theta.norm_squared()
    }

    /// Same design and parameter with a different noise variance.
    pub fn with_sigma2(&self, sigma2: f64) -> Result<Self> {
        if !(sigma2 >= 0.0 && sigma2.is_finite()) {
            return Err(Error::ModelInvalid(format!(
                "noise variance must be finite and >= 0, got {sigma2}"
            )));
        }
        Ok(Self {
            sigma2,
            ..self.clone()
        })
    }
}

/// One sampled dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Realization {
    pub y: DVector<f64>,
    /// Present only for realizations drawn under the errors-in-variables model.
    pub h_tilde: Option<DMatrix<f64>>,
    pub trial_index: u64,
    pub seed: u64,
}

impl Realization {
    pub fn is_tls(&self) -> bool {
        self.h_tilde.is_some()
    }
}

fn gaussian_vector(rng: &mut ChaCha8Rng, len: usize, scale: f64) -> DVector<f64> {
    DVector::from_iterator(
        len,
        (0..len).map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        }),
    )
}

/// `y = Hθ + n`, `n ~ N(0, σ² I)`.
pub fn sample_ls(model: &MeasurementModel, seed: u64, trial: u64) -> Realization {
    let mut rng = trial_rng(seed, trial);
    let noise = gaussian_vector(&mut rng, model.n(), model.sigma2.sqrt());
    Realization {
        y: &model.signal + noise,
        h_tilde: None,
        trial_index: trial,
        seed,
    }
}

/// `H̃ = H + E` and `y = Hθ + n` with `E`, `n` independent and every entry
/// `N(0, σ²)`. The equation error `y − H̃θ = n − Eθ` then has per-entry
/// variance `σ²(1 + θᵀθ)`.
pub fn sample_tls(model: &MeasurementModel, seed: u64, trial: u64) -> Realization {
    let mut rng = trial_rng(seed, trial);
    let sigma = model.sigma2.sqrt();
    let (n, p) = (model.n(), model.p());
    let e = gaussian_matrix(&mut rng, n, p, sigma);
    let noise = gaussian_vector(&mut rng, n, sigma);
    Realization {
        y: &model.signal + noise,
        h_tilde: Some(&model.h + e),
        trial_index: trial,
        seed,
    }
}

/// Row-major draw of an i.i.d. `N(0, scale²)` matrix.
fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    let mut m = DMatrix::<f64>::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            let z: f64 = StandardNormal.sample(rng);
            m[(i, j)] = scale * z;
        }
    }
    m
}

/// `N × p` design with i.i.d. standard normal entries.
pub fn gaussian_design(n: usize, p: usize, seed: u64) -> DMatrix<f64> {
    gaussian_matrix(&mut design_rng(seed), n, p, 1.0)
}

/// `N × p` design `Q₁ diag(s) Q₂ᵀ` with random orthonormal factors and the
/// prescribed singular values.
pub fn spectrum_design(n: usize, singular_values: &[f64], seed: u64) -> Result<DMatrix<f64>> {
    let p = singular_values.len();
    if p == 0 || p > n {
        return Err(Error::ModelInvalid(format!(
            "need 1 <= p <= N, got N={n}, p={p}"
        )));
    }
    if singular_values.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
        return Err(Error::ModelInvalid(
            "singular values must be finite and nonnegative".into(),
        ));
    }
    let mut rng = design_rng(seed);
    let left = gaussian_matrix(&mut rng, n, p, 1.0).qr().q();
    let right = gaussian_matrix(&mut rng, p, p, 1.0).qr().q();
    let s = DMatrix::from_diagonal(&DVector::from_column_slice(singular_values));
    Ok(left * s * right.transpose())
}

/// Parameter `θ = V Γ⁻¹ c`, so that `Hθ = Σ_j c_j u_j` over the left singular
/// vectors of `H` (in the sign convention of [`svd`]).
pub fn theta_for_coefficients(design: &SvdFactorization, coefficients: &[f64]) -> Result<DVector<f64>> {
    if coefficients.len() != design.k() {
        return Err(Error::dims(design.k(), coefficients.len()));
    }
    let scaled = DVector::from_iterator(
        design.k(),
        coefficients.iter().zip(design.s.iter()).map(|(c, s)| c / s),
    );
    Ok(&design.v * scaled)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(sigma2: f64) -> MeasurementModel {
        let h = gaussian_design(16, 4, 3);
        MeasurementModel::new(h, DVector::from_vec(vec![1.0, -1.0, 0.5, 0.25]), sigma2).unwrap()
    }

    #[test]
    fn noiseless_ls_is_exact() {
        let m = model(0.0);
        let r = sample_ls(&m, 9, 4);
        assert_eq!(&r.y, m.signal());
        assert!(!r.is_tls());
    }

    #[test]
    fn identity_design() {
        let m = MeasurementModel::new(
            DMatrix::identity(2, 2),
            DVector::from_vec(vec![1.0, 2.0]),
            0.0,
        )
        .unwrap();
        assert_eq!(sample_ls(&m, 0, 0).y.as_slice(), &[1.0, 2.0]);
    }

    #[test]
    fn noiseless_tls_is_exact() {
        let m = model(0.0);
        let r = sample_tls(&m, 1, 2);
        assert_eq!(r.h_tilde.as_ref().unwrap(), m.h());
        assert_eq!(&r.y, m.signal());
    }

    #[test]
    fn sampling_is_reproducible() {
        let m = model(0.3);
        assert_eq!(sample_ls(&m, 5, 17), sample_ls(&m, 5, 17));
        assert_eq!(sample_tls(&m, 5, 17), sample_tls(&m, 5, 17));
        assert_ne!(sample_ls(&m, 5, 17).y, sample_ls(&m, 5, 18).y);
        assert_ne!(sample_ls(&m, 5, 17).y, sample_ls(&m, 6, 17).y);
    }

    #[test]
    fn rejects_invalid_models() {
        let mut h = DMatrix::identity(4, 2);
        h.set_column(1, &h.column(0).clone_owned());
        let err = MeasurementModel::new(h, DVector::zeros(2), 1.0).unwrap_err();
        assert_eq!(err.code(), "model-invalid");

        let wide = DMatrix::zeros(2, 3);
        assert!(MeasurementModel::new(wide, DVector::zeros(3), 1.0).is_err());
        let h = DMatrix::identity(3, 2);
        assert!(MeasurementModel::new(h.clone(), DVector::zeros(3), 1.0).is_err());
        assert!(MeasurementModel::new(h.clone(), DVector::zeros(2), -1.0).is_err());
        assert!(MeasurementModel::new(h, DVector::zeros(2), f64::NAN).is_err());
    }

    #[test]
    fn rank_tolerance_is_configurable() {
        let h = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1e-8, 0.0, 0.0]);
        assert!(MeasurementModel::new(h.clone(), DVector::zeros(2), 1.0).is_ok());
        assert!(
            MeasurementModel::with_rank_tolerance(h, DVector::zeros(2), 1.0, 1e-6).is_err()
        );
    }

    #[test]
    fn spectrum_design_has_prescribed_singular_values() {
        let h = spectrum_design(12, &[5.0, 3.0, 1.0, 0.1], 8).unwrap();
        let f = svd(&h).unwrap();
        for (a, b) in f.s.iter().zip([5.0, 3.0, 1.0, 0.1]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn planted_coefficients_land_on_left_singular_vectors() {
        let h = gaussian_design(10, 3, 4);
        let f = svd(&h).unwrap();
        let theta = theta_for_coefficients(&f, &[2.0, 0.0, -1.0]).unwrap();
        let x = &h * theta;
        let coords = f.u.transpose() * x;
        assert!((coords[0] - 2.0).abs() < 1e-12);
        assert!(coords[1].abs() < 1e-12);
        assert!((coords[2] + 1.0).abs() < 1e-12);
    }
}
