//! Pseudo-linear fixed-point iteration for nonlinear tracking problems.
//!
//! Each iteration freezes the state matrix `A` along the previous optimal
//! trajectory, solves the resulting linear-quadratic problem exactly, and
//! repeats until both the trajectory and the cost stop moving. Exactly
//! linear models converge at the second iteration, which merely confirms
//! the fixed point.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::grid::Mesh;
use crate::lq::{profile_initial_condition, riccati_backward, synthesize, LqSolution, PenaltyU};
use crate::model::{Covariate, PseudoLinearModel};

#[derive(Debug, Clone)]
pub struct SdreConfig {
    /// Trajectory tolerance, applied to the squared trajectory change
    /// normalized by `K * d * (1 + mean |X|^2)`.
    pub eps_traj: f64,
    /// Cost tolerance, applied to `|g_l - g_{l-1}| / (1 + |g_l|)`.
    pub eps_cost: f64,
    pub max_iters: usize,
    /// Starting value for the unknown initial-state entries.
    pub x0u_init: f64,
    /// Picard relaxation factor; 1 reproduces the plain iteration.
    pub relaxation: f64,
}

impl Default for SdreConfig {
    fn default() -> Self {
        SdreConfig {
            eps_traj: 1e-6,
            eps_cost: 1e-8,
            max_iters: 100,
            x0u_init: 0.0,
            relaxation: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrackingSolution {
    pub lq: LqSolution,
    /// Inner-criterion value `g_i(b | theta, Delta, U)` including the
    /// random-effect penalty.
    pub g: f64,
    pub iterations: usize,
}

/// Solves the tracking problem for one subject at fixed `(theta, b)`,
/// iterating the frozen-coefficient linear-quadratic solve to a fixed point.
#[allow(clippy::too_many_arguments)]
pub fn solve_tracking(
    model: &PseudoLinearModel,
    mesh: &Mesh,
    theta: &DVector<f64>,
    b: &DVector<f64>,
    delta: &nalgebra::DMatrix<f64>,
    covariate: Option<&Covariate>,
    penalty: &PenaltyU,
    x0_known: &DVector<f64>,
    cfg: &SdreConfig,
) -> Result<TrackingSolution> {
    let n_pts = mesh.len();
    let unknown_idx = model.unknown_ic_indices();
    if x0_known.len() + unknown_idx.len() != model.dim {
        return Err(Error::config(format!(
            "expected {} known initial values, got {}",
            model.dim - unknown_idx.len(),
            x0_known.len()
        )));
    }

    // constant initialization at (x0u_init, x0_known)
    let mut x0_full = DVector::zeros(model.dim);
    for i in &unknown_idx {
        x0_full[*i] = cfg.x0u_init;
    }
    for (slot, i) in model.known_ic_indices().iter().enumerate() {
        x0_full[*i] = x0_known[slot];
    }
    let mut trace: Vec<DVector<f64>> = vec![x0_full; n_pts];

    let mut prev_g = f64::INFINITY;
    let mut last_traj_delta = f64::INFINITY;
    let mut last_cost_delta = f64::INFINITY;

    for iter in 1..=cfg.max_iters {
        let pass = riccati_backward(model, mesh, &trace, covariate, theta, b, penalty)?;
        let (g, x0u) = profile_initial_condition(&pass, x0_known, b, delta)?;
        let x0 = pass.assemble_x0(&x0u, x0_known);
        let mut lq = synthesize(&pass, mesh, &x0);

        if !g.is_finite() {
            return Err(Error::numeric("tracking cost is not finite"));
        }

        let mut sq_change = 0.0;
        let mut sq_scale = 0.0;
        for (new, old) in lq.trajectory.iter().zip(&trace) {
            sq_change += (new - old).norm_squared();
            sq_scale += new.norm_squared();
        }
        let norm = mesh.n_steps() as f64 * model.dim as f64
            * (1.0 + sq_scale / n_pts as f64);
        last_traj_delta = sq_change / norm;
        last_cost_delta = (g - prev_g).abs() / (1.0 + g.abs());

        let converged = last_traj_delta < cfg.eps_traj && last_cost_delta < cfg.eps_cost;

        if cfg.relaxation < 1.0 && !converged {
            for (new, old) in lq.trajectory.iter_mut().zip(&trace) {
                *new = &*new * cfg.relaxation + old * (1.0 - cfg.relaxation);
            }
        }
        trace = lq.trajectory.clone();
        prev_g = g;

        if converged {
            return Ok(TrackingSolution {
                lq,
                g,
                iterations: iter,
            });
        }
    }

    Err(Error::NonConvergence {
        iterations: cfg.max_iters,
        traj_delta: last_traj_delta,
        cost_delta: last_cost_delta,
    })
}
