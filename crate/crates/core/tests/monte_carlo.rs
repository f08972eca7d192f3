//! Distributional checks on the samplers and the error laws.

use nalgebra::DVector;
use rrtls::harness::{
    run, Design, Execution, ExperimentSpec, Family, ModelSpec, Ordering, Parameter, RankPolicy, Tolerances,
};
use rrtls::model::{gaussian_design, sample_ls, sample_tls, MeasurementModel};
use rrtls::stats::Moments;

fn spec(family: Family, parameter: Parameter, sigma2: f64, trials: u64) -> ExperimentSpec {
    ExperimentSpec {
        model: ModelSpec {
            design: Design::Gaussian { n: 16, p: 4, seed: 7 },
            parameter,
            sigma2,
        },
        family,
        rank_policy: RankPolicy::Auto,
        trials,
        seed: 99,
        ordering: Ordering::Observed,
        tls_mode: None,
        tolerances: Tolerances::default(),
    }
}

#[test]
fn ls_sampler_has_signal_mean_and_sigma2_variance() {
    let theta = DVector::from_vec(vec![1.0, -2.0, 0.5]);
    let model = MeasurementModel::new(gaussian_design(6, 3, 1), theta, 0.3).unwrap();
    let mut acc = [Moments::new(); 6];
    for t in 0..100_000 {
        let y = sample_ls(&model, 5, t).y;
        for (m, v) in acc.iter_mut().zip(y.iter()) {
            m.push(*v);
        }
    }
    for (i, m) in acc.iter().enumerate() {
        let x = model.signal()[i];
        assert!((m.mean - x).abs() < 3.5 * m.std_error(), "coordinate {i}: {} vs {x}", m.mean);
        assert!((m.variance() / 0.3 - 1.0).abs() < 0.03, "coordinate {i}: {}", m.variance());
    }
}

#[test]
fn tls_equation_error_variance_grows_with_theta() {
    // θᵀθ = 3 and σ² = 0.25 so y − H̃θ has variance 1 per coordinate.
    let theta = DVector::from_vec(vec![1.0, 1.0, -1.0]);
    let model = MeasurementModel::new(gaussian_design(5, 3, 2), theta.clone(), 0.25).unwrap();
    let mut eq = Moments::new();
    let mut obs = Moments::new();
    for t in 0..40_000 {
        let r = sample_tls(&model, 8, t);
        let h_tilde = r.h_tilde.unwrap();
        let e = &r.y - &h_tilde * &theta;
        let n = &r.y - model.signal();
        e.iter().for_each(|v| eq.push(*v));
        n.iter().for_each(|v| obs.push(*v));
    }
    assert!(eq.mean.abs() < 3.5 * eq.std_error());
    assert!((eq.variance() - 1.0).abs() < 0.02, "{}", eq.variance());
    assert!((obs.variance() - 0.25).abs() < 0.005, "{}", obs.variance());
}

#[test]
fn consecutive_trials_are_uncorrelated() {
    let model = MeasurementModel::new(gaussian_design(4, 2, 3), DVector::zeros(2), 1.0).unwrap();
    let trials = 50_000u64;
    let first: Vec<f64> = (0..=trials).map(|t| sample_ls(&model, 11, t).y[0]).collect();
    let cross: f64 = first.windows(2).map(|w| w[0] * w[1]).sum::<f64>() / trials as f64;
    assert!(cross.abs() < 4.0 / (trials as f64).sqrt(), "lag-1 correlation {cross}");
}

#[test]
fn fixed_rank_error_matches_theory_with_oracle_ordering() {
    let mut s = spec(Family::Rrls, Parameter::Planted(vec![3.0, 1.5, 0.7, 0.2]), 0.5, 100_000);
    s.rank_policy = RankPolicy::Fixed(2);
    s.ordering = Ordering::Oracle;
    let result = run(&s, Execution::Parallel).unwrap();
    let row = result.row(2).unwrap();
    let theory = 0.7 * 0.7 + 0.2 * 0.2 + 2.0 * 0.5;
    assert!((row.theory.mean - theory).abs() < 1e-10);
    assert!((row.mse.mean / theory - 1.0).abs() < 0.02, "{} vs {theory}", row.mse.mean);
    assert!(row.pass);
}

#[test]
fn rank_rule_frequency_matches_two_noise_direction_law() {
    // Each pure-noise score is σ²χ²₁ and is kept only above 2σ², so rank 2 is
    // chosen with probability P(χ²₁ ≤ 2)².
    let s = spec(Family::Rrls, Parameter::Planted(vec![1.0, 0.8, 0.0, 0.0]), 1e-6, 40_000);
    let result = run(&s, Execution::Parallel).unwrap();
    let freq = result.selection_counts[1] as f64 / result.successful as f64;
    let expected = rrtls::acceptance::NOISE_DIRECTIONS_DISCARDED_PROBABILITY;
    let se = (expected * (1.0 - expected) / result.successful as f64).sqrt();
    assert!((freq - expected).abs() < 3.5 * se, "{freq} vs {expected}");
    assert_eq!(result.selection_counts[0], 0);
}

#[test]
fn tls_full_error_theory_holds_at_zero_theta() {
    let s = spec(Family::Tls, Parameter::Theta(vec![0.0; 4]), 1e-4, 20_000);
    let result = run(&s, Execution::Parallel).unwrap();
    let empirical = result.row(4).unwrap().mse.mean;
    let theory = result.tls_full_theory.as_ref().unwrap().mean;
    assert!((empirical / theory - 1.0).abs() < 0.03, "{empirical} vs {theory}");
}

#[test]
fn tls_sweep_accounts_for_every_trial() {
    let s = spec(Family::Rrtls, Parameter::Planted(vec![4.0, 2.0, 0.3, 0.1]), 1e-2, 20_000);
    let result = run(&s, Execution::Parallel).unwrap();
    assert_eq!(result.successful + result.failures.total(), 20_000);
    for row in &result.rows {
        assert!(row.mse.mean > 0.0 && row.theory.mean > 0.0, "rank {}", row.rank);
    }
}
