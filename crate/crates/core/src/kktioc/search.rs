//! Frequency grid, β line search and the constant-weight special case.

use rayon::prelude::*;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::experiments::revalidate;
use crate::focp::FocpOptions;

use super::inner::{refine_frequencies, InnerSolution};
use super::{BetaRecord, GridSpec, IocContext, IocSolution, TrainingData, TtdConfig};

/// Initial frequency tuples: strictly increasing E-tuples drawn from the grid
/// points, in lexicographic order. When the grid has fewer than E distinct
/// points its step is halved until it has enough.
pub fn omega_tuples(grid: &GridSpec, e: usize) -> Result<Vec<Vec<f64>>> {
    grid.validate("omega")?;
    if e == 0 {
        return Ok(vec![Vec::new()]);
    }
    let mut grid = *grid;
    let mut points = grid.points();
    while points.len() < e {
        if grid.step == 0.0 || grid.initial == grid.last {
            return Err(Error::Invalid(format!(
                "a single-point frequency grid cannot seed E = {e} distinct frequencies"
            )));
        }
        grid.step /= 2.0;
        points = grid.points();
        log::info!("omega grid refined to step {} for E = {e}", grid.step);
    }
    let mut out = Vec::new();
    let mut idx: Vec<usize> = (0..e).collect();
    loop {
        out.push(idx.iter().map(|&i| points[i]).collect());
        // Advance to the next combination.
        let mut k = e;
        while k > 0 && idx[k - 1] == points.len() - e + k - 1 {
            k -= 1;
        }
        if k == 0 {
            break;
        }
        idx[k - 1] += 1;
        for j in k..e {
            idx[j] = idx[j - 1] + 1;
        }
    }
    Ok(out)
}

/// Line search over β; for each β the best frequency refinement over the
/// grid (by regularized training objective) is scored on the validation
/// split, and the model with the lowest validation error is kept.
pub fn ttd_ioc(
    context: &IocContext,
    dataset: &Dataset,
    cfg: &TtdConfig,
    forward: &FocpOptions,
) -> Result<IocSolution> {
    cfg.validate()?;
    if dataset.validation.is_empty() {
        return Err(Error::EmptyDataset("validation"));
    }
    let data = TrainingData::new(context.clone(), &dataset.train)?;
    let tuples = omega_tuples(&cfg.omega_grid, cfg.basis_count)?;
    let betas = cfg.beta_grid.points();

    let jobs: Vec<(usize, usize)> = (0..betas.len())
        .flat_map(|b| (0..tuples.len()).map(move |t| (b, t)))
        .collect();
    let solved: Vec<InnerSolution> = jobs
        .par_iter()
        .map(|&(b, t)| refine_frequencies(&data, &tuples[t], betas[b], cfg).map(|r| r.solution))
        .collect::<Result<_>>()?;

    let per_beta: Vec<InnerSolution> = solved
        .chunks(tuples.len())
        .map(|group| {
            group
                .iter()
                .min_by(|a, b| {
                    a.objective.total_cmp(&b.objective).then_with(|| {
                        lexicographic(&a.model.frequencies, &b.model.frequencies)
                    })
                })
                .expect("nonempty grid")
                .clone()
        })
        .collect();

    let errors: Vec<f64> = per_beta
        .par_iter()
        .map(|s| match revalidate(&s.model, context, &dataset.validation, forward) {
            Ok((_, report)) => report.e_v,
            Err(e) => {
                log::warn!("validation re-solve failed: {e}");
                f64::INFINITY
            }
        })
        .collect();

    // Lowest validation error; ties go to the smallest β.
    let mut selected = 0;
    for (k, e) in errors.iter().enumerate() {
        log::info!("beta = {}: e_v = {e:e}", betas[k]);
        if *e < errors[selected] {
            selected = k;
        }
    }

    let trace = betas
        .iter()
        .zip(&per_beta)
        .zip(&errors)
        .map(|((beta, s), e)| BetaRecord {
            beta: *beta,
            frequencies: s.model.frequencies.clone(),
            training_residual: s.residual,
            validation_error: *e,
        })
        .collect();
    let best = &per_beta[selected];
    Ok(IocSolution {
        model: best.model.clone(),
        anchor: cfg.anchor_column(),
        multipliers: best.multipliers.clone(),
        training_residual: best.residual,
        selected_beta: betas[selected],
        validation_error: errors[selected],
        trace,
        config: cfg.clone(),
    })
}

fn lexicographic(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(std::cmp::Ordering::Equal)
}

/// Constant weights, first weight pinned to `anchor`: one convex solve. The
/// validation split is scored when present (+∞ otherwise).
pub fn sp_ioc(
    context: &IocContext,
    dataset: &Dataset,
    anchor: f64,
    nonneg: bool,
    forward: &FocpOptions,
) -> Result<IocSolution> {
    if anchor == 0.0 {
        return Err(Error::Invalid("spIOC anchor must be nonzero".into()));
    }
    let cfg = TtdConfig {
        basis_count: 0,
        omega_grid: GridSpec::single(0.0),
        beta_grid: GridSpec::single(0.0),
        anchor: vec![anchor],
        nonneg_theta: nonneg,
        ..TtdConfig::default()
    };
    let data = TrainingData::new(context.clone(), &dataset.train)?;
    let sol = refine_frequencies(&data, &[], 0.0, &cfg)?.solution;
    let e_v = if dataset.validation.is_empty() {
        f64::INFINITY
    } else {
        match revalidate(&sol.model, context, &dataset.validation, forward) {
            Ok((_, report)) => report.e_v,
            Err(e) => {
                log::warn!("validation re-solve failed: {e}");
                f64::INFINITY
            }
        }
    };
    Ok(IocSolution {
        model: sol.model,
        anchor: cfg.anchor_column(),
        multipliers: sol.multipliers,
        training_residual: sol.residual,
        selected_beta: 0.0,
        validation_error: e_v,
        trace: vec![BetaRecord {
            beta: 0.0,
            frequencies: Vec::new(),
            training_residual: sol.residual,
            validation_error: e_v,
        }],
        config: cfg,
    })
}
