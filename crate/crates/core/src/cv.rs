//! Penalty selection by forward cross-validation.
//!
//! For each subject the observation span splits into windows; the
//! unperturbed ODE restarts at the fitted optimal-trajectory state at each
//! window boundary and the squared prediction error accumulates over the
//! observations inside the window. Too small a penalty makes the optimal
//! trajectory chase the noise (bad restarts), too large a penalty ignores
//! the data; the score is minimized in between.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::grid::subject_mesh;
use crate::lq::PenaltyU;
use crate::model::{PseudoLinearModel, SubjectData};
use crate::ode::rk4_path;
use crate::population::{fit_population, FitResult, LogPrior, OuterConfig};

/// Prediction error `EP(U) = sum_i EP(i, U)` of a fitted population, using
/// `windows` forward windows per subject (the reference choice is 2, split
/// at the midpoint of the observation span; the split lands on a mesh
/// point, boundary observations belong to the right window).
pub fn forward_cv_score(
    fit: &FitResult,
    population: &[SubjectData],
    model: &PseudoLinearModel,
    mesh_refine: usize,
    windows: usize,
) -> Result<f64> {
    if windows < 2 {
        return Err(Error::validation("need at least 2 windows"));
    }
    if fit.subjects.len() != population.len() {
        return Err(Error::config("fit does not cover the population"));
    }

    let mut total = 0.0;
    for (subject, sol) in population.iter().zip(&fit.subjects) {
        total += match subject_score(fit, subject, sol, model, mesh_refine, windows) {
            Ok(ep) => ep,
            Err(e) => {
                log::warn!(
                    "forward CV integration failed for subject {}: {e}",
                    subject.subject_id
                );
                f64::INFINITY
            }
        };
    }
    Ok(total)
}

fn subject_score(
    fit: &FitResult,
    subject: &SubjectData,
    sol: &crate::inner::InnerSolution,
    model: &PseudoLinearModel,
    mesh_refine: usize,
    windows: usize,
) -> Result<f64> {
    let mesh = subject_mesh(subject, mesh_refine)?;
    if sol.lq.trajectory.len() != mesh.len() {
        return Err(Error::config(
            "trajectory length does not match the mesh (same refine required)",
        ));
    }
    let theta = &fit.theta_hat;
    let b = &sol.b_hat;
    let field = |t: f64, x: &DVector<f64>| -> DVector<f64> {
        let z = subject.covariate_at(t);
        let a = (model.dynamics_matrix)(t, x, z.as_ref(), theta, b);
        let r = (model.forcing)(t, z.as_ref(), theta, b);
        a * x + r
    };

    // interior boundaries split the observation span evenly and snap to
    // mesh points; the first window always starts at t = 0
    let t_first = subject.times[0];
    let t_end = *mesh.points.last().unwrap();
    let mut boundary_idx = vec![0usize];
    for w in 1..windows {
        let target = t_first + (t_end - t_first) * w as f64 / windows as f64;
        let idx = mesh
            .points
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| {
                (*a - target).abs().total_cmp(&(*b - target).abs())
            })
            .map(|(i, _)| i)
            .unwrap();
        boundary_idx.push(idx);
    }
    boundary_idx.push(mesh.len() - 1);
    boundary_idx.dedup();

    let c_mat = &model.observation_matrix;
    let mut ep = 0.0;
    for h in 0..boundary_idx.len() - 1 {
        let k_start = boundary_idx[h];
        let k_end = boundary_idx[h + 1];
        let grid = &mesh.points[k_start..=k_end];
        let path = rk4_path(&field, grid, &sol.lq.trajectory[k_start]);
        if path.iter().any(|x| x.iter().any(|v| !v.is_finite())) {
            return Err(Error::numeric("prediction path diverged"));
        }
        let t_split_right = mesh.points[k_end];
        let last_window = h == boundary_idx.len() - 2;
        for (offset, k) in (k_start..=k_end).enumerate() {
            if let Some(j) = mesh.obs_slot[k] {
                let t = mesh.points[k];
                // left-closed, right-open windows; final window right-closed
                if !last_window && t >= t_split_right {
                    continue;
                }
                let y = subject.observations.row(j).transpose();
                ep += (c_mat * &path[offset] - y).norm_squared();
            }
        }
    }
    Ok(ep)
}

#[derive(Debug, Clone)]
pub struct USelection {
    /// Index into the candidate grid.
    pub best_index: usize,
    pub best_u: f64,
    /// `(U, EP)` rows in grid order.
    pub table: Vec<(f64, f64)>,
}

/// Picks the best grid entry: smallest EP, ties broken toward larger `U`.
pub(crate) fn pick_best(table: &[(f64, f64)]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, (u, ep)) in table.iter().enumerate() {
        if !ep.is_finite() {
            continue;
        }
        best = match best {
            None => Some(i),
            Some(j) => {
                let (bu, bep) = table[j];
                if *ep < bep || (*ep == bep && *u > bu) {
                    Some(i)
                } else {
                    Some(j)
                }
            }
        };
    }
    best
}

/// Fits the population at every scalar candidate `U * I` and returns the
/// one minimizing the forward prediction error together with its fit.
#[allow(clippy::too_many_arguments)]
pub fn select_u(
    population: &[SubjectData],
    model: &PseudoLinearModel,
    u_grid: &[f64],
    prior: &LogPrior,
    start: (&DVector<f64>, &DVector<f64>),
    cfg: &OuterConfig,
    windows: usize,
) -> Result<(USelection, FitResult)> {
    if u_grid.is_empty() {
        return Err(Error::validation("empty penalty grid"));
    }
    let mut table = Vec::with_capacity(u_grid.len());
    let mut fits: Vec<Option<FitResult>> = Vec::with_capacity(u_grid.len());
    let mut diagnostics = Vec::new();
    for &u in u_grid {
        let attempt = PenaltyU::scalar(u, model.control_dim)
            .and_then(|penalty| fit_population(population, model, &penalty, prior, start, cfg))
            .and_then(|fit| {
                let ep = forward_cv_score(&fit, population, model, cfg.mesh_refine, windows)?;
                Ok((fit, ep))
            });
        match attempt {
            Ok((fit, ep)) => {
                table.push((u, ep));
                fits.push(Some(fit));
            }
            Err(e) => {
                diagnostics.push(format!("U = {u}: {e}"));
                table.push((u, f64::INFINITY));
                fits.push(None);
            }
        }
    }
    let best_index = pick_best(&table).ok_or_else(|| {
        Error::numeric(format!(
            "all penalty candidates failed: {}",
            diagnostics.join("; ")
        ))
    })?;
    let best_fit = fits.swap_remove(best_index).expect("finite EP has a fit");
    Ok((
        USelection {
            best_index,
            best_u: table[best_index].0,
            table,
        },
        best_fit,
    ))
}

/// Convenience wrapper for interpreting a scalar as `U * I`.
pub fn scalar_penalty(u: f64, model: &PseudoLinearModel) -> Result<PenaltyU> {
    PenaltyU::scalar(u, model.control_dim)
}

/// Matrix penalty from explicit entries.
pub fn matrix_penalty(entries: DMatrix<f64>) -> Result<PenaltyU> {
    PenaltyU::from_matrix(entries)
}
