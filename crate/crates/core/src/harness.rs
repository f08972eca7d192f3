//! Monte Carlo engine: samples realizations, runs an estimator family over
//! them and aggregates per-rank errors, theoretical values and rank-selection
//! frequencies.
//!
//! Trials are seeded per index (see [`crate::model::trial_rng`]), so every
//! family run with the same seed sees the same realizations. In
//! [`Execution::Parallel`] trials are split into fixed-size chunks that are
//! aggregated independently and merged in chunk order.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ls::{mse_theoretical_ls, select_rank_ls};
use crate::model::{
    gaussian_design, sample_ls, sample_tls, spectrum_design, theta_for_coefficients, MeasurementModel,
};
use crate::stats::Moments;
use crate::svd::{order_by_scores, OrderedBasis};
use crate::tls::{mse_theoretical_tls_full, q_objective, tls_solve, QMode, TlsOrdering};

const CHUNK: u64 = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Design {
    /// Row-major `N × p` system matrix.
    Explicit { rows: Vec<Vec<f64>> },
    Gaussian { n: usize, p: usize, seed: u64 },
    Spectrum { n: usize, singular_values: Vec<f64>, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Parameter {
    Theta(Vec<f64>),
    /// Coefficients of `x = Hθ` along the left singular vectors of `H`.
    Planted(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub design: Design,
    pub parameter: Parameter,
    pub sigma2: f64,
}

impl ModelSpec {
    pub fn build(&self) -> Result<MeasurementModel> {
        let h = match &self.design {
            Design::Explicit { rows } => {
                let n = rows.len();
                let p = rows.first().map_or(0, Vec::len);
                if n == 0 || rows.iter().any(|r| r.len() != p) {
                    return Err(Error::ModelInvalid("explicit design rows are ragged or empty".into()));
                }
                DMatrix::from_row_iterator(n, p, rows.iter().flatten().copied())
            }
            Design::Gaussian { n, p, seed } => {
                if *p == 0 || p > n {
                    return Err(Error::ModelInvalid(format!("need 1 <= p <= N, got N={n}, p={p}")));
                }
                gaussian_design(*n, *p, *seed)
            }
            Design::Spectrum {
                n,
                singular_values,
                seed,
            } => spectrum_design(*n, singular_values, *seed)?,
        };
        let theta = match &self.parameter {
            Parameter::Theta(t) => DVector::from_column_slice(t),
            Parameter::Planted(c) => {
                // Validate the design first so the coefficients are meaningful.
                let probe = MeasurementModel::new(h.clone(), DVector::zeros(h.ncols()), self.sigma2)?;
                theta_for_coefficients(probe.design_svd(), c)?
            }
        };
        MeasurementModel::new(h, theta, self.sigma2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Ls,
    Rrls,
    Tls,
    Rrtls,
}

impl Family {
    pub fn as_str(&self) -> &'static str {
        match self {
            Family::Ls => "ls",
            Family::Rrls => "rrls",
            Family::Tls => "tls",
            Family::Rrtls => "rrtls",
        }
    }

    pub fn is_tls(&self) -> bool {
        matches!(self, Family::Tls | Family::Rrtls)
    }

    fn is_reduced(&self) -> bool {
        matches!(self, Family::Rrls | Family::Rrtls)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankPolicy {
    Fixed(usize),
    /// Evaluate every rank and tally the data-driven selection.
    Auto,
}

/// Which vector the reduced-rank basis is ordered against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ordering {
    /// The observation `y` of each trial.
    #[default]
    Observed,
    /// The true signal `x`, fixed across trials. Least squares families only.
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    pub mean_rel: f64,
    pub variance_rel: f64,
    pub mse_rel: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            mean_rel: 0.01,
            variance_rel: 0.05,
            mse_rel: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub model: ModelSpec,
    pub family: Family,
    pub rank_policy: RankPolicy,
    pub trials: u64,
    pub seed: u64,
    #[serde(default)]
    pub ordering: Ordering,
    /// Defaults to the oracle `θᵀθ` of the model.
    #[serde(default)]
    pub tls_mode: Option<QMode>,
    #[serde(default)]
    pub tolerances: Tolerances,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    #[default]
    Sequential,
    Parallel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankRow {
    pub rank: usize,
    /// Squared error `‖x̂ − x‖²`.
    pub mse: Moments,
    /// Per-trial theoretical value, averaged.
    pub theory: Moments,
    /// Per-trial data-driven objective at this rank, averaged.
    pub objective: Moments,
    /// Trials in which the selection rule chose this rank.
    pub selected: u64,
    pub pass: bool,
}

impl RankRow {
    pub fn selection_frequency(&self, successful: u64) -> f64 {
        if successful == 0 {
            0.0
        } else {
            self.selected as f64 / successful as f64
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FailureCounts {
    pub nonunique: u64,
    pub degenerate: u64,
    pub other: u64,
}

impl FailureCounts {
    pub fn total(&self) -> u64 {
        self.nonunique + self.degenerate + self.other
    }

    fn record(&mut self, e: &Error) {
        match e {
            Error::NonuniqueTls { .. } => self.nonunique += 1,
            Error::DegenerateTls { .. } => self.degenerate += 1,
            _ => self.other += 1,
        }
    }

    fn merge(&mut self, o: &FailureCounts) {
        self.nonunique += o.nonunique;
        self.degenerate += o.degenerate;
        self.other += o.other;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentReport {
    pub samples: usize,
    pub dof: usize,
    pub mean: f64,
    pub mean_se: f64,
    pub variance: f64,
    pub variance_se: f64,
    pub expected_mean: f64,
    pub expected_variance: f64,
    pub mean_rel_tol: f64,
    pub variance_rel_tol: f64,
    pub mean_pass: bool,
    pub variance_pass: bool,
}

impl MomentReport {
    pub fn pass(&self) -> bool {
        self.mean_pass && self.variance_pass
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub family: Family,
    pub n: usize,
    pub p: usize,
    pub sigma2: f64,
    pub trials: u64,
    pub successful: u64,
    pub failures: FailureCounts,
    pub rows: Vec<RankRow>,
    /// `selection_counts[r - 1]`: trials whose selected rank was `r`.
    pub selection_counts: Vec<u64>,
    /// Error of the estimator at the selected rank.
    pub selected_mse: Moments,
    /// `‖u_(j)ᵀx‖²` over the columns of `U_H` ordered against `x`.
    pub oracle_scores: Vec<f64>,
    /// Averaged `‖Ĥθ − Hθ‖² + σ²(1 + θᵀθ)p` for the errors-in-variables
    /// families.
    pub tls_full_theory: Option<Moments>,
    /// `‖x̂ − x‖² / σ²` moments at full rank, least squares families only.
    pub chi_square: Option<MomentReport>,
}

impl ExperimentResult {
    pub fn row(&self, rank: usize) -> Option<&RankRow> {
        self.rows.iter().find(|r| r.rank == rank)
    }
}

/// Moments of `‖e‖²/σ²` checked against the `χ²_dof` mean and variance.
pub fn verify_chi_square(
    errors: &[DVector<f64>],
    sigma2: f64,
    dof: usize,
    tolerances: &Tolerances,
) -> Result<MomentReport> {
    if !(sigma2 > 0.0) {
        return Err(Error::InvalidInput("sigma2 must be positive".into()));
    }
    let normalized: Vec<f64> = errors.iter().map(|e| e.norm_squared() / sigma2).collect();
    chi_square_report(&normalized, dof, tolerances)
}

pub const MIN_CHI_SQUARE_SAMPLES: usize = 10_000;

fn chi_square_report(values: &[f64], dof: usize, tol: &Tolerances) -> Result<MomentReport> {
    if values.len() < MIN_CHI_SQUARE_SAMPLES {
        return Err(Error::InsufficientData {
            required: MIN_CHI_SQUARE_SAMPLES,
            actual: values.len(),
        });
    }
    let m: Moments = values.iter().copied().collect();
    let n = values.len() as f64;
    let variance = m.variance();
    let m4 = values.iter().map(|v| (v - m.mean).powi(4)).sum::<f64>() / n;
    let variance_se = ((m4 - variance * variance).max(0.0) / n).sqrt();
    let expected_mean = dof as f64;
    let expected_variance = 2.0 * dof as f64;
    Ok(MomentReport {
        samples: values.len(),
        dof,
        mean: m.mean,
        mean_se: m.std_error(),
        variance,
        variance_se,
        expected_mean,
        expected_variance,
        mean_rel_tol: tol.mean_rel,
        variance_rel_tol: tol.variance_rel,
        mean_pass: (m.mean - expected_mean).abs() <= tol.mean_rel * expected_mean,
        variance_pass: (variance - expected_variance).abs() <= tol.variance_rel * expected_variance,
    })
}

struct Context {
    model: MeasurementModel,
    family: Family,
    ranks: Vec<usize>,
    seed: u64,
    ordering: Ordering,
    mode: QMode,
    /// `U_H` ordered against `x`.
    oracle_basis: OrderedBasis,
    /// mse(r) on the oracle basis, indexed by position in `ranks`.
    ls_theory: Vec<f64>,
}

struct TrialOutcome {
    errors: Vec<f64>,
    theory: Vec<f64>,
    objective: Vec<f64>,
    selected: usize,
    selected_error: f64,
    chi: Option<f64>,
    tls_full_theory: Option<f64>,
}

#[derive(Clone)]
struct Partial {
    rows: Vec<(Moments, Moments, Moments, u64)>,
    selection: Vec<u64>,
    selected_mse: Moments,
    chi: Vec<f64>,
    tls_full: Moments,
    successful: u64,
    failures: FailureCounts,
}

impl Partial {
    fn new(ranks: usize, p: usize) -> Self {
        Self {
            rows: vec![Default::default(); ranks],
            selection: vec![0; p],
            selected_mse: Moments::new(),
            chi: Vec::new(),
            tls_full: Moments::new(),
            successful: 0,
            failures: FailureCounts::default(),
        }
    }

    fn absorb(&mut self, ranks: &[usize], outcome: Result<TrialOutcome>) {
        let o = match outcome {
            Ok(o) => o,
            Err(e) => {
                self.failures.record(&e);
                return;
            }
        };
        self.successful += 1;
        for (i, row) in self.rows.iter_mut().enumerate() {
            row.0.push(o.errors[i]);
            row.1.push(o.theory[i]);
            row.2.push(o.objective[i]);
            if ranks[i] == o.selected {
                row.3 += 1;
            }
        }
        self.selection[o.selected - 1] += 1;
        self.selected_mse.push(o.selected_error);
        if let Some(c) = o.chi {
            self.chi.push(c);
        }
        if let Some(t) = o.tls_full_theory {
            self.tls_full.push(t);
        }
    }

    fn merge(&mut self, other: Partial) {
        for (a, b) in self.rows.iter_mut().zip(&other.rows) {
            a.0.merge(&b.0);
            a.1.merge(&b.1);
            a.2.merge(&b.2);
            a.3 += b.3;
        }
        for (a, b) in self.selection.iter_mut().zip(&other.selection) {
            *a += b;
        }
        self.selected_mse.merge(&other.selected_mse);
        self.chi.extend(other.chi);
        self.tls_full.merge(&other.tls_full);
        self.successful += other.successful;
        self.failures.merge(&other.failures);
    }
}

impl Context {
    fn new(spec: &ExperimentSpec) -> Result<Self> {
        if spec.trials == 0 {
            return Err(Error::InvalidInput("trials must be >= 1".into()));
        }
        let model = spec.model.build()?;
        let p = model.p();
        if spec.family.is_tls() && model.n() < p + 1 {
            return Err(Error::InvalidInput(format!(
                "errors-in-variables families need N >= p + 1, got N={}, p={p}",
                model.n()
            )));
        }
        if spec.family.is_tls() && spec.ordering == Ordering::Oracle {
            return Err(Error::InvalidInput(
                "oracle ordering is only defined for least squares families".into(),
            ));
        }
        let ranks = match (spec.family.is_reduced(), spec.rank_policy) {
            (false, _) => vec![p],
            (true, RankPolicy::Auto) => (1..=p).collect(),
            (true, RankPolicy::Fixed(r)) => {
                if r == 0 || r > p {
                    return Err(Error::RankOutOfRange { rank: r, max: p });
                }
                vec![r]
            }
        };
        let oracle_basis = order_by_scores(&model.design_svd().u, model.signal())?;
        let ls_theory = ranks
            .iter()
            .map(|&r| mse_theoretical_ls(&model, &oracle_basis, r))
            .collect::<Result<Vec<_>>>()?;
        let mode = spec.tls_mode.unwrap_or(QMode::Oracle {
            theta_norm2: model.theta_norm2(),
        });
        Ok(Self {
            model,
            family: spec.family,
            ranks,
            seed: spec.seed,
            ordering: spec.ordering,
            mode,
            oracle_basis,
            ls_theory,
        })
    }

    fn trial(&self, t: u64) -> Result<TrialOutcome> {
        if self.family.is_tls() {
            self.tls_trial(t)
        } else {
            self.ls_trial(t)
        }
    }

    fn ls_trial(&self, t: u64) -> Result<TrialOutcome> {
        let m = &self.model;
        let x = m.signal();
        let sigma2 = m.sigma2();
        let y = sample_ls(m, self.seed, t).y;
        let observed = order_by_scores(&m.design_svd().u, &y)?;
        let estimator_basis = match self.ordering {
            Ordering::Observed => &observed,
            Ordering::Oracle => &self.oracle_basis,
        };
        let selection = select_rank_ls(&observed, sigma2);
        let estimator_selection;
        let objective_source = match self.ordering {
            Ordering::Observed => &selection,
            Ordering::Oracle => {
                estimator_selection = select_rank_ls(&self.oracle_basis_scored(&y)?, sigma2);
                &estimator_selection
            }
        };

        let mut errors = Vec::with_capacity(self.ranks.len());
        let mut objective = Vec::with_capacity(self.ranks.len());
        for &r in &self.ranks {
            let xr = estimator_basis.project(&y, r)?;
            errors.push((xr - x).norm_squared());
            objective.push(objective_source.at(r));
        }
        let selected_error = (observed.project(&y, selection.r_star)? - x).norm_squared();
        let p = m.p();
        let chi = if sigma2 > 0.0 {
            let full = estimator_basis.project(&y, p)?;
            Some((full - x).norm_squared() / sigma2)
        } else {
            None
        };
        Ok(TrialOutcome {
            errors,
            theory: self.ls_theory.clone(),
            objective,
            selected: selection.r_star,
            selected_error,
            chi,
            tls_full_theory: None,
        })
    }

    /// The oracle-ordered basis with its scores recomputed against `y`, keeping
    /// the oracle column order.
    fn oracle_basis_scored(&self, y: &DVector<f64>) -> Result<OrderedBasis> {
        Ok(OrderedBasis {
            columns: self.oracle_basis.columns.clone(),
            scores: self.oracle_basis.scores_of(y)?,
            permutation: self.oracle_basis.permutation.clone(),
        })
    }

    fn tls_trial(&self, t: u64) -> Result<TrialOutcome> {
        let m = &self.model;
        let x = m.signal();
        let sigma2 = m.sigma2();
        let real = sample_tls(m, self.seed, t);
        let h_tilde = real.h_tilde.as_ref().expect("errors-in-variables realization");
        let est = tls_solve(h_tilde, &real.y)?;
        let ordering = TlsOrdering::new(&est, &real.y)?;
        let q = q_objective(&ordering.objective_scores(&real.y), sigma2, m.p(), self.mode)?;

        let mut errors = Vec::with_capacity(self.ranks.len());
        let mut theory = Vec::with_capacity(self.ranks.len());
        let mut objective = Vec::with_capacity(self.ranks.len());
        for &r in &self.ranks {
            let xr = ordering.basis.project(&real.y, r)?;
            errors.push((xr - x).norm_squared());
            theory.push(ordering.oracle_mse(x, r, sigma2)?);
            objective.push(q.at(r));
        }
        let selected_error = (ordering.basis.project(&real.y, q.q_star)? - x).norm_squared();
        Ok(TrialOutcome {
            errors,
            theory,
            objective,
            selected: q.q_star,
            selected_error,
            chi: None,
            tls_full_theory: Some(mse_theoretical_tls_full(m, &est)?),
        })
    }

    fn chunk(&self, start: u64, end: u64) -> Partial {
        let mut part = Partial::new(self.ranks.len(), self.model.p());
        for t in start..end {
            part.absorb(&self.ranks, self.trial(t));
        }
        part
    }
}

fn mse_pass(mse: &Moments, theory: f64, rel: f64, signal_norm2: f64) -> bool {
    if mse.count == 0 {
        return false;
    }
    if theory == 0.0 {
        // Only rounding error is left.
        return mse.mean.abs() <= 1e-20 * signal_norm2.max(1.0);
    }
    (mse.mean - theory).abs() <= rel * theory.abs()
}

pub fn run(spec: &ExperimentSpec, exec: Execution) -> Result<ExperimentResult> {
    let ctx = Context::new(spec)?;
    let p = ctx.model.p();
    let total = match exec {
        Execution::Sequential => ctx.chunk(0, spec.trials),
        Execution::Parallel => {
            let chunks: Vec<u64> = (0..spec.trials.div_ceil(CHUNK)).collect();
            let parts: Vec<Partial> = chunks
                .par_iter()
                .map(|&c| ctx.chunk(c * CHUNK, ((c + 1) * CHUNK).min(spec.trials)))
                .collect();
            let mut acc = Partial::new(ctx.ranks.len(), p);
            for part in parts {
                acc.merge(part);
            }
            acc
        }
    };

    let rows = ctx
        .ranks
        .iter()
        .zip(&total.rows)
        .map(|(&rank, (mse, theory, objective, selected))| RankRow {
            rank,
            mse: *mse,
            theory: *theory,
            objective: *objective,
            selected: *selected,
            pass: mse_pass(mse, theory.mean, spec.tolerances.mse_rel, ctx.model.signal().norm_squared()),
        })
        .collect();

    let chi_square = if !ctx.family.is_tls() && total.chi.len() >= MIN_CHI_SQUARE_SAMPLES {
        Some(chi_square_report(&total.chi, p, &spec.tolerances)?)
    } else {
        None
    };

    Ok(ExperimentResult {
        family: ctx.family,
        n: ctx.model.n(),
        p,
        sigma2: ctx.model.sigma2(),
        trials: spec.trials,
        successful: total.successful,
        failures: total.failures,
        rows,
        selection_counts: total.selection,
        selected_mse: total.selected_mse,
        oracle_scores: ctx.oracle_basis.scores.clone(),
        tls_full_theory: ctx.family.is_tls().then_some(total.tls_full),
        chi_square,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub theta_norm2: f64,
    /// `q_counts[q - 1]`: trials whose minimizer was `q`.
    pub q_counts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionTable {
    pub grid: Vec<GridPoint>,
    pub successful: u64,
    pub failures: FailureCounts,
    /// Trials whose minimizer was not the same at every grid point.
    pub dependent_trials: u64,
    pub theta_dependent: bool,
    /// First `(trial, t₁, t₂)` with differing minimizers.
    pub witness: Option<(u64, f64, f64)>,
}

/// Minimizer of the rank-q objective at every grid value of `θᵀθ` (or `C`),
/// evaluated on the same realizations.
pub fn compare_selection_rules(
    spec: &ExperimentSpec,
    grid: &[f64],
    exec: Execution,
) -> Result<SelectionTable> {
    if spec.family != Family::Rrtls {
        return Err(Error::InvalidInput(
            "selection-rule comparison needs the rrtls family".into(),
        ));
    }
    if grid.is_empty() || grid.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
        return Err(Error::InvalidInput("grid values must be finite and >= 0".into()));
    }
    let ctx = Context::new(spec)?;
    let p = ctx.model.p();
    let sigma2 = ctx.model.sigma2();

    let per_trial = |t: u64| -> Result<Vec<usize>> {
        let real = sample_tls(&ctx.model, ctx.seed, t);
        let est = tls_solve(real.h_tilde.as_ref().expect("tls realization"), &real.y)?;
        let scores = TlsOrdering::new(&est, &real.y)?.objective_scores(&real.y);
        grid.iter()
            .map(|&c| q_objective(&scores, sigma2, p, QMode::Bound { c }).map(|o| o.q_star))
            .collect()
    };
    let outcomes: Vec<Result<Vec<usize>>> = match exec {
        Execution::Sequential => (0..spec.trials).map(per_trial).collect(),
        Execution::Parallel => (0..spec.trials).into_par_iter().map(per_trial).collect(),
    };

    let mut table = SelectionTable {
        grid: grid
            .iter()
            .map(|&t| GridPoint {
                theta_norm2: t,
                q_counts: vec![0; p],
            })
            .collect(),
        successful: 0,
        failures: FailureCounts::default(),
        dependent_trials: 0,
        theta_dependent: false,
        witness: None,
    };
    for (t, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Err(e) => table.failures.record(&e),
            Ok(qs) => {
                table.successful += 1;
                for (point, &q) in table.grid.iter_mut().zip(&qs) {
                    point.q_counts[q - 1] += 1;
                }
                if let Some(k) = qs.iter().position(|&q| q != qs[0]) {
                    table.dependent_trials += 1;
                    if table.witness.is_none() {
                        table.witness = Some((t as u64, grid[0], grid[k]));
                    }
                }
            }
        }
    }
    table.theta_dependent = table.dependent_trials > 0;
    Ok(table)
}
