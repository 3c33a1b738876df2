//! Discrete linear-quadratic tracking solver.
//!
//! Backward Riccati recursion for the quadratic value function
//! `V_k(x) = x' R_k x + 2 h_k' x + c_k` of the discretized tracking cost,
//! closed-form profiling of the unknown initial-state block, and forward
//! synthesis of the optimal control and trajectory. All coefficient
//! matrices (`A_k`, `r_k`) are frozen at pass construction along a supplied
//! state trace, which is what the pseudo-linear iteration requires.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::grid::Mesh;
use crate::model::{Covariate, PseudoLinearModel};

/// Condition-number ceiling for inverting the unknown-unknown block of
/// `R_0`; beyond it we refuse rather than return garbage.
pub const PROFILE_CONDITION_LIMIT: f64 = 1e12;

/// Control-energy weighting matrix, symmetric positive definite.
#[derive(Debug, Clone)]
pub struct PenaltyU {
    matrix: DMatrix<f64>,
}

impl PenaltyU {
    /// `u * I_{d_u}`.
    pub fn scalar(u: f64, control_dim: usize) -> Result<Self> {
        if !(u > 0.0) || !u.is_finite() {
            return Err(Error::validation("scalar penalty must be positive"));
        }
        Ok(PenaltyU {
            matrix: DMatrix::identity(control_dim, control_dim) * u,
        })
    }

    pub fn from_matrix(matrix: DMatrix<f64>) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() {
            return Err(Error::validation("penalty matrix must be square"));
        }
        let sym_err = (&matrix - matrix.transpose()).amax();
        if sym_err > 1e-10 * (1.0 + matrix.amax()) {
            return Err(Error::validation("penalty matrix must be symmetric"));
        }
        let eig = matrix.clone().symmetric_eigen();
        if eig.eigenvalues.iter().any(|l| *l <= 0.0) {
            return Err(Error::validation("penalty matrix must be positive definite"));
        }
        Ok(PenaltyU { matrix })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        PenaltyU::from_matrix(&self.matrix * c)
    }

    /// `u' U u`.
    pub fn quadratic(&self, u: &DVector<f64>) -> f64 {
        (u.transpose() * &self.matrix * u)[(0, 0)]
    }
}

/// Result of the backward pass: value-function coefficients, cached gains,
/// the accumulated scalar constant, and the frozen dynamics coefficients.
#[derive(Debug, Clone)]
pub struct RiccatiPass {
    /// `K+1` symmetric PSD matrices `R_k`.
    pub r_mats: Vec<DMatrix<f64>>,
    /// `K+1` vectors `h_k`.
    pub h_vecs: Vec<DVector<f64>>,
    /// `K` gain matrices `G(R_{k+1}) = [U + step_k B' R_{k+1} B]^{-1}`.
    pub gains: Vec<DMatrix<f64>>,
    /// Scalar constant `c_0` of the value function.
    pub constant: f64,
    pub penalty: PenaltyU,
    /// Frozen `A(t_k, trace_k)` for each step.
    pub a_mats: Vec<DMatrix<f64>>,
    /// Frozen `r(t_k)` for each step.
    pub r_vecs: Vec<DVector<f64>>,
    /// Observation matrix copied from the model.
    pub observation_matrix: DMatrix<f64>,
    pub control_matrix: DMatrix<f64>,
    unknown_idx: Vec<usize>,
    known_idx: Vec<usize>,
}

/// Optimal solution of one tracking problem for a fixed initial state.
#[derive(Debug, Clone)]
pub struct LqSolution {
    /// `min_u` of the discrete cost at the synthesized initial state
    /// (penalty term `|Delta b|^2` not included).
    pub g_value: f64,
    /// Unknown initial-state entries actually used (the profiled estimate in
    /// the standard pipeline).
    pub x0u_hat: DVector<f64>,
    /// Optimal control samples, one per mesh step.
    pub control: Vec<DVector<f64>>,
    /// Optimal trajectory, one state per mesh point.
    pub trajectory: Vec<DVector<f64>>,
    /// `(sum of observation residuals, control energy)`.
    pub cost_split: (f64, f64),
}

impl LqSolution {
    pub fn residual_sum(&self) -> f64 {
        self.cost_split.0
    }

    pub fn control_energy(&self) -> f64 {
        self.cost_split.1
    }
}

fn spd_solve(m: &DMatrix<f64>, rhs: &DMatrix<f64>, what: &str) -> DMatrix<f64> {
    if let Some(chol) = m.clone().cholesky() {
        chol.solve(rhs)
    } else {
        log::warn!("{what}: SPD factorization failed, falling back to pseudo-inverse");
        let pinv = m
            .clone()
            .svd(true, true)
            .pseudo_inverse(1e-14)
            .expect("SVD pseudo-inverse");
        &pinv * rhs
    }
}

/// Runs the backward Riccati recursion with the terminal condition
/// `(R_K, h_K) = (C'C, -C'y_K)`, freezing `A` along `state_trace`.
pub fn riccati_backward(
    model: &PseudoLinearModel,
    mesh: &Mesh,
    state_trace: &[DVector<f64>],
    covariate: Option<&Covariate>,
    theta: &DVector<f64>,
    b: &DVector<f64>,
    penalty: &PenaltyU,
) -> Result<RiccatiPass> {
    let n_pts = mesh.len();
    let n_steps = mesh.n_steps();
    if state_trace.len() != n_pts {
        return Err(Error::config(format!(
            "state trace has {} points, mesh has {n_pts}",
            state_trace.len()
        )));
    }
    if penalty.dim() != model.control_dim {
        return Err(Error::config("penalty dimension must match d_u"));
    }
    if mesh.extended_obs.len() != n_pts || mesh.extended_obs[0].len() != model.obs_dim {
        return Err(Error::config("mesh observations do not match the model"));
    }

    let c_mat = &model.observation_matrix;
    let b_mat = &model.control_matrix;
    let ctc = c_mat.transpose() * c_mat;
    let y_final = mesh.final_obs();

    // frozen dynamics coefficients per step
    let mut a_mats = Vec::with_capacity(n_steps);
    let mut r_vecs = Vec::with_capacity(n_steps);
    for k in 0..n_steps {
        let t = mesh.points[k];
        let z = covariate.map(|f| f(t));
        a_mats.push((model.dynamics_matrix)(t, &state_trace[k], z.as_ref(), theta, b));
        r_vecs.push((model.forcing)(t, z.as_ref(), theta, b));
    }

    let mut r_mats = vec![DMatrix::zeros(0, 0); n_pts];
    let mut h_vecs = vec![DVector::zeros(0); n_pts];
    let mut gains = vec![DMatrix::zeros(0, 0); n_steps];
    r_mats[n_pts - 1] = ctc.clone();
    h_vecs[n_pts - 1] = -(c_mat.transpose() * y_final);
    let mut constant = (y_final.transpose() * y_final)[(0, 0)];

    let eye = DMatrix::<f64>::identity(model.dim, model.dim);
    for k in (0..n_steps).rev() {
        let step = mesh.steps[k];
        let w = mesh.weights[k];
        let y_k = &mesh.extended_obs[k];
        let r_next = &r_mats[k + 1];
        let h_next = &h_vecs[k + 1];
        let a_k = &a_mats[k];
        let r_k = &r_vecs[k];

        let m_k = &eye + a_k * step;
        let gain_inv = penalty.matrix() + (b_mat.transpose() * r_next * b_mat) * step;
        let gain = spd_solve(&gain_inv, &DMatrix::identity(penalty.dim(), penalty.dim()), "gain");

        let rnm = r_next * &m_k;
        let bg_bt = b_mat * &gain * b_mat.transpose();
        let mut r_new = m_k.transpose() * &rnm + &ctc * (step * w)
            - (rnm.transpose() * &bg_bt * &rnm) * step;
        // keep exact symmetry against rounding drift
        r_new = (&r_new + r_new.transpose()) * 0.5;

        let v_k = h_next + r_next * r_k * step;
        let h_new = m_k.transpose() * &v_k - c_mat.transpose() * y_k * (step * w)
            - m_k.transpose() * &bg_bt * &v_k * step;

        constant += step * w * (y_k.transpose() * y_k)[(0, 0)]
            + step * ((h_next * 2.0 + r_next * r_k * step).transpose() * r_k)[(0, 0)]
            - step * (v_k.transpose() * &bg_bt * &v_k)[(0, 0)];

        if !constant.is_finite() {
            return Err(Error::numeric("Riccati constant overflowed"));
        }
        r_mats[k] = r_new;
        h_vecs[k] = h_new;
        gains[k] = gain;
    }

    Ok(RiccatiPass {
        r_mats,
        h_vecs,
        gains,
        constant,
        penalty: penalty.clone(),
        a_mats,
        r_vecs,
        observation_matrix: c_mat.clone(),
        control_matrix: b_mat.clone(),
        unknown_idx: model.unknown_ic_indices(),
        known_idx: model.known_ic_indices(),
    })
}

fn submatrix(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])])
}

fn subvector(v: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_iterator(idx.len(), idx.iter().map(|i| v[*i]))
}

impl RiccatiPass {
    /// Number of mesh steps the pass covers.
    pub fn n_steps(&self) -> usize {
        self.gains.len()
    }

    /// Assembles the full initial state from known values and an unknown
    /// block, in model state order.
    pub fn assemble_x0(&self, x0_unknown: &DVector<f64>, x0_known: &DVector<f64>) -> DVector<f64> {
        let dim = self.unknown_idx.len() + self.known_idx.len();
        let mut x0 = DVector::zeros(dim);
        for (slot, i) in self.unknown_idx.iter().enumerate() {
            x0[*i] = x0_unknown[slot];
        }
        for (slot, i) in self.known_idx.iter().enumerate() {
            x0[*i] = x0_known[slot];
        }
        x0
    }

    /// Value `x0' R_0 x0 + 2 h_0' x0 + c_0` of the cost minimized over the
    /// controls only, for a full initial state.
    pub fn value_at(&self, x0: &DVector<f64>) -> f64 {
        let r0 = &self.r_mats[0];
        let h0 = &self.h_vecs[0];
        (x0.transpose() * r0 * x0)[(0, 0)] + 2.0 * h0.dot(x0) + self.constant
    }
}

/// Profiles the unknown initial-state block in closed form and returns the
/// inner-criterion value `g_i` (including the `|Delta b|^2` term) together
/// with the minimizing unknown initial state.
pub fn profile_initial_condition(
    pass: &RiccatiPass,
    x0_known: &DVector<f64>,
    b: &DVector<f64>,
    delta: &DMatrix<f64>,
) -> Result<(f64, DVector<f64>)> {
    if x0_known.len() != pass.known_idx.len() {
        return Err(Error::config(format!(
            "expected {} known initial values, got {}",
            pass.known_idx.len(),
            x0_known.len()
        )));
    }
    let penalty_term = (delta * b).norm_squared();
    let r0 = &pass.r_mats[0];
    let h0 = &pass.h_vecs[0];

    if pass.unknown_idx.is_empty() {
        // nothing to profile: direct evaluation at the known state
        let g = pass.value_at(&pass.assemble_x0(&DVector::zeros(0), x0_known)) + penalty_term;
        return Ok((g, DVector::zeros(0)));
    }

    let r0_uu = submatrix(r0, &pass.unknown_idx, &pass.unknown_idx);
    let r0_uk = submatrix(r0, &pass.unknown_idx, &pass.known_idx);
    let r0_kk = submatrix(r0, &pass.known_idx, &pass.known_idx);
    let h0_u = subvector(h0, &pass.unknown_idx);
    let h0_k = subvector(h0, &pass.known_idx);

    let svd = r0_uu.clone().svd(false, false);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if condition > PROFILE_CONDITION_LIMIT {
        return Err(Error::IllConditioned {
            what: "unknown initial-state block of R_0".into(),
            condition,
            limit: PROFILE_CONDITION_LIMIT,
        });
    }

    let rhs = &r0_uk * x0_known + &h0_u;
    let rhs_mat = DMatrix::from_column_slice(rhs.len(), 1, rhs.as_slice());
    let solved = DVector::from_column_slice(spd_solve(&r0_uu, &rhs_mat, "R_0 unknown block").as_slice());
    let x0u = -&solved;

    let g = -rhs.dot(&solved)
        + (x0_known.transpose() * &r0_kk * x0_known)[(0, 0)]
        + 2.0 * h0_k.dot(x0_known)
        + pass.constant
        + penalty_term;
    Ok((g, x0u))
}

/// Forward synthesis of the optimal trajectory and control from a full
/// initial state, starting at mesh index 0.
pub fn synthesize(pass: &RiccatiPass, mesh: &Mesh, x0: &DVector<f64>) -> LqSolution {
    synthesize_from(pass, mesh, 0, x0)
}

/// Forward synthesis starting at an arbitrary mesh index (used for the
/// dynamic-programming consistency checks).
pub fn synthesize_from(
    pass: &RiccatiPass,
    mesh: &Mesh,
    start: usize,
    x_start: &DVector<f64>,
) -> LqSolution {
    let n_steps = mesh.n_steps();
    let b_mat = &pass.control_matrix;
    let c_mat = &pass.observation_matrix;
    let eye = DMatrix::<f64>::identity(x_start.len(), x_start.len());

    let mut trajectory = Vec::with_capacity(n_steps + 1 - start);
    let mut control = Vec::with_capacity(n_steps - start);
    trajectory.push(x_start.clone());
    for k in start..n_steps {
        let step = mesh.steps[k];
        let m_k = &eye + &pass.a_mats[k] * step;
        let s_k = &m_k * trajectory.last().unwrap() + &pass.r_vecs[k] * step;
        let u_k = -(&pass.gains[k]
            * b_mat.transpose()
            * (&pass.r_mats[k + 1] * &s_k + &pass.h_vecs[k + 1]));
        let x_next = &s_k + b_mat * &u_k * step;
        control.push(u_k);
        trajectory.push(x_next);
    }

    let mut residual = 0.0;
    for k in start..n_steps {
        let w = mesh.weights[k];
        if w > 0.0 {
            let r = c_mat * &trajectory[k - start] - &mesh.extended_obs[k];
            residual += mesh.steps[k] * w * r.norm_squared();
        }
    }
    let r_final = c_mat * trajectory.last().unwrap() - mesh.final_obs();
    residual += r_final.norm_squared();

    let energy: f64 = (start..n_steps)
        .map(|k| mesh.steps[k] * pass.penalty.quadratic(&control[k - start]))
        .sum();

    let g_value = if start == 0 {
        pass.value_at(x_start)
    } else {
        residual + energy
    };
    let x0u_hat = subvector(x_start, &pass.unknown_idx);
    LqSolution {
        g_value,
        x0u_hat,
        control,
        trajectory,
        cost_split: (residual, energy),
    }
}
