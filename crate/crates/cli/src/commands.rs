use std::path::{Path, PathBuf};
use std::process::ExitCode;

use nalgebra::{DMatrix, DVector};
use rrtls::acceptance::{run_acceptance, DEFAULT_SEED};
use rrtls::error::Error;
use rrtls::harness::{compare_selection_rules, run, Family, RankPolicy, SelectionTable};
use rrtls::ls::{ls_full, ls_full_factored, ls_reduced, select_rank_ls};
use rrtls::report::{fmt_f64, scores_csv, sweep_csv, table_csv, to_json, SweepRow};
use rrtls::svd::{order_by_scores, svd};
use rrtls::tls::{q_objective, tls_reduced, tls_solve, QMode, TlsOrdering};
use serde::Serialize;

use crate::config::{load, resolve, EstimateConfig, SweepConfig};
use crate::matrix::{read_matrix, read_vector};
use crate::{Cli, CliError, Format};

#[derive(Debug, Serialize)]
struct EstimateOutput {
    family: Family,
    theta_hat: Vec<f64>,
    x_hat: Vec<f64>,
    rank: usize,
    /// Rank-selection objective for ranks `1..=p`, when `sigma2` is known.
    objective: Option<Vec<f64>>,
    scores: Vec<f64>,
}

impl EstimateOutput {
    fn to_csv(&self) -> Result<String, CliError> {
        let mut rows = vec![vec![
            "rank".to_string(),
            "1".to_string(),
            self.rank.to_string(),
        ]];
        let mut push = |name: &str, values: &[f64]| {
            for (i, v) in values.iter().enumerate() {
                rows.push(vec![name.to_string(), (i + 1).to_string(), fmt_f64(*v)]);
            }
        };
        push("theta_hat", &self.theta_hat);
        push("x_hat", &self.x_hat);
        push("score", &self.scores);
        if let Some(obj) = &self.objective {
            push("objective", obj);
        }
        Ok(table_csv(&["quantity", "index", "value"], &rows)?)
    }
}

fn missing_sigma2(cfg: &EstimateConfig) -> CliError {
    CliError::Parse(format!(
        "family {} with automatic rank needs sigma2",
        cfg.family.as_str()
    ))
}

fn estimate_ls(cfg: &EstimateConfig, h: &DMatrix<f64>, y: &DVector<f64>) -> Result<EstimateOutput, CliError> {
    let factors = svd(h)?;
    let basis = order_by_scores(&factors.u, y)?;
    let selection = cfg.sigma2.map(|s| select_rank_ls(&basis, s));
    let (theta_hat, x_hat, rank) = if cfg.family == Family::Ls {
        let est = ls_full_factored(h, &factors, y)?;
        (est.theta_hat, est.x_hat, est.rank_used)
    } else {
        let sel = selection.as_ref().map(|s| s.r_star);
        let r = match (cfg.rank, sel) {
            (RankPolicy::Fixed(r), _) => r,
            (RankPolicy::Auto, Some(r)) => r,
            (RankPolicy::Auto, None) => return Err(missing_sigma2(cfg)),
        };
        let x_hat = ls_reduced(&basis, y, r)?;
        let theta_hat = ls_full_factored(h, &factors, &x_hat)?.theta_hat;
        (theta_hat, x_hat, r)
    };
    Ok(EstimateOutput {
        family: cfg.family,
        theta_hat: theta_hat.iter().copied().collect(),
        x_hat: x_hat.iter().copied().collect(),
        rank,
        objective: selection.map(|s| s.objective),
        scores: basis.scores,
    })
}

fn estimate_tls(cfg: &EstimateConfig, h: &DMatrix<f64>, y: &DVector<f64>) -> Result<EstimateOutput, CliError> {
    let est = tls_solve(h, y)?;
    let p = est.p();
    let ordering = TlsOrdering::new(&est, y)?;
    let scores = ordering.objective_scores(y);
    let mode = cfg.tls_mode.unwrap_or(QMode::Bound { c: 0.0 });
    let objective = cfg
        .sigma2
        .map(|s| q_objective(&scores, s, p, mode))
        .transpose()?;
    let (theta_hat, x_hat, rank) = if cfg.family == Family::Tls {
        (est.theta_hat, est.x_hat, p)
    } else {
        let q = match (&objective, cfg.rank) {
            (_, RankPolicy::Fixed(q)) => q,
            (Some(o), RankPolicy::Auto) => o.q_star,
            (None, RankPolicy::Auto) => return Err(missing_sigma2(cfg)),
        };
        let x_hat = tls_reduced(&ordering.basis, y, q)?;
        let theta_hat = ls_full(&est.h_corrected, &x_hat)?.theta_hat;
        (theta_hat, x_hat, q)
    };
    Ok(EstimateOutput {
        family: cfg.family,
        theta_hat: theta_hat.iter().copied().collect(),
        x_hat: x_hat.iter().copied().collect(),
        rank,
        objective: objective.map(|o| o.values),
        scores,
    })
}

pub fn estimate(cli: &Cli, config: &Path) -> Result<ExitCode, CliError> {
    let cfg: EstimateConfig = load(config)?;
    let h = read_matrix(&resolve(config, &cfg.h))?;
    let y = read_vector(&resolve(config, &cfg.y))?;
    if let Some(s) = cfg.sigma2 {
        if !(s >= 0.0 && s.is_finite()) {
            return Err(CliError::Parse(format!("sigma2 must be finite and >= 0, got {s}")));
        }
    }
    let out = if cfg.family.is_tls() {
        estimate_tls(&cfg, &h, &y)?
    } else {
        estimate_ls(&cfg, &h, &y)?
    };
    let text = match cli.format {
        Format::Csv => out.to_csv()?,
        Format::Json => to_json(&out)?,
    };
    cli.emit(&text)?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Debug, Serialize)]
struct SweepOutput {
    rows: Vec<SweepRow>,
    result: rrtls::harness::ExperimentResult,
    selection: Option<SelectionTable>,
}

/// `sweep.csv` → `sweep.<suffix>.csv`.
fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}.{suffix}.csv"))
}

pub fn sweep(cli: &Cli, config: &Path) -> Result<ExitCode, CliError> {
    let mut cfg: SweepConfig = load(config)?;
    if let Some(seed) = cli.seed {
        cfg.experiment.seed = seed;
    }
    let exec = cli.execution();
    let result = run(&cfg.experiment, exec)?;
    let selection = cfg
        .theta_grid
        .as_deref()
        .map(|grid| compare_selection_rules(&cfg.experiment, grid, exec))
        .transpose()?;
    let rows = SweepRow::from_result(&result);
    match cli.format {
        Format::Csv => {
            cli.emit(&sweep_csv(&rows)?)?;
            if let Some(out) = &cli.out {
                let scores = sibling(out, "scores");
                std::fs::write(&scores, scores_csv(&result.oracle_scores, result.sigma2)?)
                    .map_err(|e| CliError::io(&scores, e))?;
                if let Some(table) = &selection {
                    let path = sibling(out, "grid");
                    std::fs::write(&path, grid_csv(table)?).map_err(|e| CliError::io(&path, e))?;
                }
            }
        }
        Format::Json => cli.emit(&to_json(&SweepOutput {
            rows,
            result,
            selection,
        })?)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn grid_csv(table: &SelectionTable) -> Result<String, Error> {
    let rows: Vec<Vec<String>> = table
        .grid
        .iter()
        .flat_map(|g| {
            g.q_counts.iter().enumerate().map(move |(i, c)| {
                vec![fmt_f64(g.theta_norm2), (i + 1).to_string(), c.to_string()]
            })
        })
        .collect();
    table_csv(&["theta_norm2", "q", "count"], &rows)
}

pub fn verify(cli: &Cli) -> Result<ExitCode, CliError> {
    if cli.config.is_some() {
        return Err(CliError::Parse("verify takes no --config".into()));
    }
    let report = run_acceptance(cli.seed.unwrap_or(DEFAULT_SEED), cli.execution());
    for c in &report.criteria {
        println!("{}", c.line());
    }
    if let Some(out) = &cli.out {
        let text = match cli.format {
            Format::Csv => report.to_csv()?,
            Format::Json => report.to_json()?,
        };
        std::fs::write(out, text).map_err(|e| CliError::io(out, e))?;
    }
    Ok(if report.all_passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}
