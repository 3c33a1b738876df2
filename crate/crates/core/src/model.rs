//! Pseudo-linear ODE model abstraction and the built-in benchmark models.
//!
//! A model stores its vector field in factorized form
//! `f(t, x, z) = A(t, x, z, theta, b) * x + r(t, z, theta, b)` together with
//! the control injection matrix `B`, the observation matrix `C`, the
//! known/unknown split of the initial state, and the link functions mapping
//! `(theta, b)` to the natural parameters. Models are immutable after
//! construction and safe to share across worker threads.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Covariate trace `t -> z_i(t)` for one subject.
pub type Covariate = Arc<dyn Fn(f64) -> DVector<f64> + Send + Sync>;

/// `A(t, x, z, theta, b)` evaluator.
pub type DynamicsMatrixFn = Arc<
    dyn Fn(f64, &DVector<f64>, Option<&DVector<f64>>, &DVector<f64>, &DVector<f64>) -> DMatrix<f64>
        + Send
        + Sync,
>;

/// `r(t, z, theta, b)` evaluator.
pub type ForcingFn = Arc<
    dyn Fn(f64, Option<&DVector<f64>>, &DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync,
>;

/// Link functions between `(theta, b)` and the natural subject-level
/// parameters. For each fixed `b` the map `theta -> natural` is a bijection;
/// `backward` inverts it given the same `b`.
#[derive(Clone)]
pub struct ParamTransform {
    pub forward: Arc<dyn Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync>,
    pub backward: Arc<dyn Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync>,
}

impl ParamTransform {
    /// Identity transform (natural parameters are `theta` itself).
    pub fn identity() -> Self {
        ParamTransform {
            forward: Arc::new(|theta, _b| theta.clone()),
            backward: Arc::new(|natural, _b| natural.clone()),
        }
    }
}

#[derive(Clone)]
pub struct PseudoLinearModel {
    pub name: String,
    /// State dimension `d`.
    pub dim: usize,
    /// Observed dimension `d_obs <= d`.
    pub obs_dim: usize,
    /// Control dimension `d_u`.
    pub control_dim: usize,
    /// Population parameter dimension `p`.
    pub theta_dim: usize,
    /// Random-effect dimension `q`.
    pub effect_dim: usize,
    /// State matrix of the factorization.
    pub dynamics_matrix: DynamicsMatrixFn,
    /// Forcing vector of the factorization.
    pub forcing: ForcingFn,
    /// Perturbation injection matrix `B` (`d x d_u`).
    pub control_matrix: DMatrix<f64>,
    /// Observation matrix `C` (`d_obs x d`).
    pub observation_matrix: DMatrix<f64>,
    /// `true` entries mark initial-state components treated as known.
    pub known_ic_mask: Vec<bool>,
    /// Link functions to the natural parametrization.
    pub transform: ParamTransform,
}

impl fmt::Debug for PseudoLinearModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PseudoLinearModel")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("obs_dim", &self.obs_dim)
            .field("control_dim", &self.control_dim)
            .field("theta_dim", &self.theta_dim)
            .field("effect_dim", &self.effect_dim)
            .finish()
    }
}

impl PseudoLinearModel {
    /// Checks the static wiring: matrix shapes, full row rank of `C`, and a
    /// sensible known/unknown split.
    pub fn validate(&self) -> Result<()> {
        if self.observation_matrix.nrows() != self.obs_dim
            || self.observation_matrix.ncols() != self.dim
        {
            return Err(Error::config(format!(
                "observation matrix must be {}x{}",
                self.obs_dim, self.dim
            )));
        }
        if self.control_matrix.nrows() != self.dim || self.control_matrix.ncols() == 0 {
            return Err(Error::config(format!(
                "control matrix must be {}x{} with at least one column",
                self.dim, self.control_dim
            )));
        }
        if self.control_matrix.ncols() != self.control_dim {
            return Err(Error::config("control matrix width must match d_u"));
        }
        if self.obs_dim > self.dim {
            return Err(Error::config("cannot observe more components than states"));
        }
        if self.known_ic_mask.len() != self.dim {
            return Err(Error::config("known_ic_mask length must match d"));
        }
        let rank = self.observation_matrix.clone().svd(false, false).rank(1e-10);
        if rank < self.obs_dim {
            return Err(Error::config("observation matrix must have full row rank"));
        }
        Ok(())
    }

    /// Evaluates the vector field `A(t,x,z,theta,b) x + r(t,z,theta,b)`.
    pub fn vector_field(
        &self,
        t: f64,
        x: &DVector<f64>,
        z: Option<&DVector<f64>>,
        theta: &DVector<f64>,
        b: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        if x.len() != self.dim {
            return Err(Error::config(format!(
                "state has dimension {}, model expects {}",
                x.len(),
                self.dim
            )));
        }
        if theta.len() != self.theta_dim || b.len() != self.effect_dim {
            return Err(Error::config(format!(
                "parameter dimensions ({}, {}) do not match model ({}, {})",
                theta.len(),
                b.len(),
                self.theta_dim,
                self.effect_dim
            )));
        }
        let a = (self.dynamics_matrix)(t, x, z, theta, b);
        let r = (self.forcing)(t, z, theta, b);
        if a.nrows() != self.dim || a.ncols() != self.dim || r.len() != self.dim {
            return Err(Error::config("A or r evaluated to a wrong dimension"));
        }
        Ok(a * x + r)
    }

    /// Indices of unknown initial-state entries (profiled by the tracking
    /// solver), in state order.
    pub fn unknown_ic_indices(&self) -> Vec<usize> {
        self.known_ic_mask
            .iter()
            .enumerate()
            .filter(|(_, known)| !**known)
            .map(|(i, _)| i)
            .collect()
    }

    /// Indices of known initial-state entries, in state order.
    pub fn known_ic_indices(&self) -> Vec<usize> {
        self.known_ic_mask
            .iter()
            .enumerate()
            .filter(|(_, known)| **known)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Observations and side information for one subject.
#[derive(Clone)]
pub struct SubjectData {
    pub subject_id: String,
    /// Strictly increasing observation times in `[0, T]`.
    pub times: Vec<f64>,
    /// One row per observation time, `n_i x d_obs`.
    pub observations: DMatrix<f64>,
    /// Optional covariate trace (all built-in models ignore it).
    pub covariate: Option<Covariate>,
    /// Values of the known initial-state entries, ordered as
    /// `model.known_ic_indices()`.
    pub known_ic_values: DVector<f64>,
}

impl fmt::Debug for SubjectData {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SubjectData")
            .field("subject_id", &self.subject_id)
            .field("n_obs", &self.times.len())
            .finish()
    }
}

impl SubjectData {
    pub fn new(
        subject_id: impl Into<String>,
        times: Vec<f64>,
        observations: DMatrix<f64>,
        known_ic_values: DVector<f64>,
    ) -> Result<Self> {
        let data = SubjectData {
            subject_id: subject_id.into(),
            times,
            observations,
            covariate: None,
            known_ic_values,
        };
        data.validate()?;
        Ok(data)
    }

    pub fn validate(&self) -> Result<()> {
        if self.times.len() < 2 {
            return Err(Error::validation(format!(
                "subject {} has {} observations, need at least 2",
                self.subject_id,
                self.times.len()
            )));
        }
        if self.times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::validation(format!(
                "subject {} has non-increasing observation times",
                self.subject_id
            )));
        }
        if self.times[0] < 0.0 {
            return Err(Error::validation("observation times must be nonnegative"));
        }
        if self.observations.nrows() != self.times.len() {
            return Err(Error::validation("one observation row per time required"));
        }
        if self.observations.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation(format!(
                "subject {} has non-finite observations",
                self.subject_id
            )));
        }
        Ok(())
    }

    pub fn n_obs(&self) -> usize {
        self.times.len()
    }

    /// Covariate value at `t`, if a trace is attached.
    pub fn covariate_at(&self, t: f64) -> Option<DVector<f64>> {
        self.covariate.as_ref().map(|z| z(t))
    }
}

/// Population-level parameters `(theta, delta, sigma^2)` with the diagonal
/// exponential parametrization `Delta = diag(exp(delta_k))`, so that
/// `Psi = sigma^2 (Delta^T Delta)^{-1}` is positive definite by construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PopulationParams {
    pub theta: Vec<f64>,
    pub delta: Vec<f64>,
    pub sigma2: f64,
}

impl PopulationParams {
    pub fn new(theta: Vec<f64>, delta: Vec<f64>, sigma2: f64) -> Result<Self> {
        if sigma2 < 0.0 {
            return Err(Error::validation("sigma2 must be nonnegative"));
        }
        if theta.iter().chain(delta.iter()).any(|v| !v.is_finite()) {
            return Err(Error::validation("parameters must be finite"));
        }
        Ok(PopulationParams {
            theta,
            delta,
            sigma2,
        })
    }

    /// `Delta = diag(exp(delta_k))`.
    pub fn delta_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_iterator(
            self.delta.len(),
            self.delta.iter().map(|d| d.exp()),
        ))
    }

    /// `Psi = sigma^2 (Delta^T Delta)^{-1}` (diagonal here).
    pub fn psi_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_iterator(
            self.delta.len(),
            self.delta.iter().map(|d| self.sigma2 * (-2.0 * d).exp()),
        ))
    }
}

/// Builds `Delta = diag(exp(delta_k))` from a raw delta vector.
pub fn delta_matrix(delta: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_diagonal(&delta.map(|d| d.exp()))
}

// ---------------------------------------------------------------------------
// Built-in models
// ---------------------------------------------------------------------------

/// Names accepted by [`builtin_model`].
pub const BUILTIN_MODELS: [&str; 4] = ["linear2d", "insulin", "antibody", "antibody_log10"];

/// Returns one of the built-in benchmark models.
///
/// * `linear2d` - two-compartment linear model, only the first state
///   observed; `log phi_1i = theta_1 + b_i`, `log phi_2 = theta_2`.
/// * `insulin` - glucose/insulin minimal model with glucose and insulin
///   observed and the remote action `X` latent; `log n_i = theta_n + b_i`.
/// * `antibody` - antibody decay driven by two exponentially declining
///   secreting-cell populations, three random effects.
/// * `antibody_log10` - the same dynamics on `log10` concentration, with a
///   state-dependent factorization.
pub fn builtin_model(name: &str) -> Result<PseudoLinearModel> {
    match name {
        "linear2d" => Ok(linear2d()),
        "insulin" => Ok(insulin()),
        "antibody" => Ok(antibody()),
        "antibody_log10" => Ok(antibody_log10()),
        other => Err(Error::Lookup(format!(
            "model '{other}' (expected one of {})",
            BUILTIN_MODELS.join(", ")
        ))),
    }
}

/// `phi_1 = exp(theta_1 + b)`, `phi_2 = exp(theta_2)`.
fn linear2d_natural(theta: &DVector<f64>, b: &DVector<f64>) -> (f64, f64) {
    ((theta[0] + b[0]).exp(), theta[1].exp())
}

fn linear2d() -> PseudoLinearModel {
    let dynamics: DynamicsMatrixFn = Arc::new(|_t, _x, _z, theta, b| {
        let (phi1, phi2) = linear2d_natural(theta, b);
        DMatrix::from_row_slice(2, 2, &[-phi1, phi2, 0.0, -phi2])
    });
    let forcing: ForcingFn = Arc::new(|_t, _z, _theta, _b| DVector::zeros(2));
    PseudoLinearModel {
        name: "linear2d".into(),
        dim: 2,
        obs_dim: 1,
        control_dim: 1,
        theta_dim: 2,
        effect_dim: 1,
        dynamics_matrix: dynamics,
        forcing,
        // the perturbation feeds the unobserved compartment
        control_matrix: DMatrix::from_column_slice(2, 1, &[0.0, 1.0]),
        observation_matrix: DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
        known_ic_mask: vec![true, false],
        transform: ParamTransform {
            forward: Arc::new(|theta, b| {
                let (phi1, phi2) = linear2d_natural(theta, b);
                DVector::from_vec(vec![phi1, phi2])
            }),
            backward: Arc::new(|natural, b| {
                DVector::from_vec(vec![natural[0].ln() - b[0], natural[1].ln()])
            }),
        },
    }
}

/// Fixed insulin-model constants. The first three are stored on log scale in
/// the reference parameter table.
pub struct InsulinConstants {
    pub p2: f64,
    pub gamma: f64,
    pub h: f64,
    pub g_basal: f64,
    pub i_basal: f64,
}

pub fn insulin_constants() -> InsulinConstants {
    InsulinConstants {
        p2: (-4.93f64).exp(),
        gamma: (-6.85f64).exp(),
        h: 4.14f64.exp(),
        g_basal: 100.0,
        i_basal: 100.0,
    }
}

/// `(S_G, S_I, n_i) = (exp(theta_1), exp(theta_2), exp(theta_3 + b))`.
fn insulin_natural(theta: &DVector<f64>, b: &DVector<f64>) -> (f64, f64, f64) {
    (theta[0].exp(), theta[1].exp(), (theta[2] + b[0]).exp())
}

fn insulin() -> PseudoLinearModel {
    let dynamics: DynamicsMatrixFn = Arc::new(|t, x, _z, theta, b| {
        let c = insulin_constants();
        let (sg, si, n) = insulin_natural(theta, b);
        let g = x[0];
        DMatrix::from_row_slice(
            3,
            3,
            &[
                -sg,
                0.0,
                -g,
                c.gamma * t,
                -n,
                0.0,
                0.0,
                -c.p2 * si,
                -c.p2,
            ],
        )
    });
    let forcing: ForcingFn = Arc::new(|t, _z, theta, b| {
        let c = insulin_constants();
        let (sg, si, n) = insulin_natural(theta, b);
        DVector::from_vec(vec![
            sg * c.g_basal,
            -c.gamma * t * c.h + n * c.i_basal,
            c.p2 * si * c.i_basal,
        ])
    });
    PseudoLinearModel {
        name: "insulin".into(),
        dim: 3,
        obs_dim: 2,
        control_dim: 3,
        theta_dim: 3,
        effect_dim: 1,
        dynamics_matrix: dynamics,
        forcing,
        control_matrix: DMatrix::identity(3, 3),
        observation_matrix: DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]),
        known_ic_mask: vec![true, true, false],
        transform: ParamTransform {
            forward: Arc::new(|theta, b| {
                let (sg, si, n) = insulin_natural(theta, b);
                DVector::from_vec(vec![sg, si, n])
            }),
            backward: Arc::new(|natural, b| {
                DVector::from_vec(vec![
                    natural[0].ln(),
                    natural[1].ln(),
                    natural[2].ln() - b[0],
                ])
            }),
        },
    }
}

/// Long-lived secreting cells decline rate, fixed (not estimated).
pub const ANTIBODY_DELTA_L: f64 = 0.000317305093580927; // ln(2)/(364*6)

/// Natural antibody parameters `(delta_S, phi_S, phi_L, delta_Ab)` from
/// `theta = (psi_dS, psi_phiS, psi_phiL, psi_dAb)` and `b = (b_phiS, b_phiL,
/// b_dAb)`.
fn antibody_natural(theta: &DVector<f64>, b: &DVector<f64>) -> (f64, f64, f64, f64) {
    (
        theta[0].exp(),
        (theta[1] + b[0]).exp(),
        (theta[2] + b[1]).exp(),
        (theta[3] + b[2]).exp(),
    )
}

fn antibody_transform() -> ParamTransform {
    ParamTransform {
        forward: Arc::new(|theta, b| {
            let (ds, phis, phil, dab) = antibody_natural(theta, b);
            DVector::from_vec(vec![ds, phis, phil, dab])
        }),
        backward: Arc::new(|natural, b| {
            DVector::from_vec(vec![
                natural[0].ln(),
                natural[1].ln() - b[0],
                natural[2].ln() - b[1],
                natural[3].ln() - b[2],
            ])
        }),
    }
}

fn antibody() -> PseudoLinearModel {
    let dynamics: DynamicsMatrixFn = Arc::new(|_t, _x, _z, theta, b| {
        let (_, _, _, dab) = antibody_natural(theta, b);
        DMatrix::from_element(1, 1, -dab)
    });
    let forcing: ForcingFn = Arc::new(|t, _z, theta, b| {
        let (ds, phis, phil, _) = antibody_natural(theta, b);
        DVector::from_element(
            1,
            phis * (-ds * t).exp() + phil * (-ANTIBODY_DELTA_L * t).exp(),
        )
    });
    PseudoLinearModel {
        name: "antibody".into(),
        dim: 1,
        obs_dim: 1,
        control_dim: 1,
        theta_dim: 4,
        effect_dim: 3,
        dynamics_matrix: dynamics,
        forcing,
        control_matrix: DMatrix::identity(1, 1),
        observation_matrix: DMatrix::identity(1, 1),
        known_ic_mask: vec![true],
        transform: antibody_transform(),
    }
}

fn antibody_log10() -> PseudoLinearModel {
    let ln10 = std::f64::consts::LN_10;
    let dynamics: DynamicsMatrixFn = Arc::new(move |t, x, _z, theta, b| {
        let (ds, phis, phil, _) = antibody_natural(theta, b);
        // 10^{-x}/x is singular at x = 0; realistic log10-concentrations sit
        // well away from it, so clamp the magnitude only.
        let xv = x[0];
        let clamped = xv.signum() * xv.abs().max(1e-8);
        let influx = phis * (-ds * t).exp() + phil * (-ANTIBODY_DELTA_L * t).exp();
        DMatrix::from_element(1, 1, influx / ln10 * 10f64.powf(-clamped) / clamped)
    });
    let forcing: ForcingFn = Arc::new(move |_t, _z, theta, b| {
        let (_, _, _, dab) = antibody_natural(theta, b);
        DVector::from_element(1, -dab / ln10)
    });
    PseudoLinearModel {
        name: "antibody_log10".into(),
        dim: 1,
        obs_dim: 1,
        control_dim: 1,
        theta_dim: 4,
        effect_dim: 3,
        dynamics_matrix: dynamics,
        forcing,
        control_matrix: DMatrix::identity(1, 1),
        observation_matrix: DMatrix::identity(1, 1),
        known_ic_mask: vec![true],
        transform: antibody_transform(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    /// Raw (non-factorized) vector fields, coded independently of the
    /// `A*x + r` route.
    fn raw_field(name: &str, t: f64, x: &DVector<f64>, natural: &DVector<f64>) -> DVector<f64> {
        match name {
            "linear2d" => {
                let (phi1, phi2) = (natural[0], natural[1]);
                DVector::from_vec(vec![phi2 * x[1] - phi1 * x[0], -phi2 * x[1]])
            }
            "insulin" => {
                let c = insulin_constants();
                let (sg, si, n) = (natural[0], natural[1], natural[2]);
                let (g, i, xr) = (x[0], x[1], x[2]);
                DVector::from_vec(vec![
                    sg * (c.g_basal - g) - xr * g,
                    c.gamma * t * (g - c.h) - n * (i - c.i_basal),
                    -c.p2 * (xr + si * (i - c.i_basal)),
                ])
            }
            "antibody" => {
                let (ds, phis, phil, dab) = (natural[0], natural[1], natural[2], natural[3]);
                DVector::from_element(
                    1,
                    phis * (-ds * t).exp() + phil * (-ANTIBODY_DELTA_L * t).exp() - dab * x[0],
                )
            }
            "antibody_log10" => {
                let ln10 = std::f64::consts::LN_10;
                let (ds, phis, phil, dab) = (natural[0], natural[1], natural[2], natural[3]);
                DVector::from_element(
                    1,
                    (phis * (-ds * t).exp() + phil * (-ANTIBODY_DELTA_L * t).exp())
                        * 10f64.powf(-x[0])
                        / ln10
                        - dab / ln10,
                )
            }
            _ => unreachable!(),
        }
    }

    fn state_scale(name: &str) -> Vec<(f64, f64)> {
        // (mean, spread) per state for random draws in a realistic range
        match name {
            "linear2d" => vec![(2.0, 1.5), (3.0, 2.0)],
            "insulin" => vec![(180.0, 80.0), (130.0, 40.0), (0.001, 0.002)],
            "antibody" => vec![(500.0, 400.0)],
            "antibody_log10" => vec![(2.5, 1.0)],
            _ => unreachable!(),
        }
    }

    fn theta_star(name: &str) -> Vec<f64> {
        match name {
            "linear2d" => vec![0.5f64.ln(), 2.0f64.ln()],
            "insulin" => vec![-3.89, -7.09, -1.81],
            "antibody" | "antibody_log10" => vec![-0.54, 7.92, 2.78, -3.54],
            _ => unreachable!(),
        }
    }

    #[test]
    fn factorization_matches_raw_field_on_random_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for name in BUILTIN_MODELS {
            let model = builtin_model(name).unwrap();
            model.validate().unwrap();
            let theta0 = theta_star(name);
            for _ in 0..100 {
                let t = rng.random::<f64>() * 100.0;
                let x = DVector::from_iterator(
                    model.dim,
                    state_scale(name)
                        .iter()
                        .map(|(m, s)| m + (rng.random::<f64>() - 0.5) * s),
                );
                let theta = DVector::from_iterator(
                    model.theta_dim,
                    theta0
                        .iter()
                        .map(|v| v + (rng.random::<f64>() - 0.5) * 0.2),
                );
                let b = DVector::from_iterator(
                    model.effect_dim,
                    (0..model.effect_dim).map(|_| (rng.random::<f64>() - 0.5) * 0.4),
                );
                let natural = (model.transform.forward)(&theta, &b);
                let f = model.vector_field(t, &x, None, &theta, &b).unwrap();
                let raw = raw_field(name, t, &x, &natural);
                let err = (&f - &raw).norm();
                assert!(
                    err <= 1e-10 * (1.0 + raw.norm()),
                    "{name}: |A x + r - f_raw| = {err:.3e}"
                );
            }
        }
    }

    #[test]
    fn transform_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for name in BUILTIN_MODELS {
            let model = builtin_model(name).unwrap();
            for _ in 0..50 {
                let theta = DVector::from_iterator(
                    model.theta_dim,
                    (0..model.theta_dim).map(|_| (rng.random::<f64>() - 0.5) * 6.0),
                );
                let b = DVector::from_iterator(
                    model.effect_dim,
                    (0..model.effect_dim).map(|_| (rng.random::<f64>() - 0.5) * 2.0),
                );
                let natural = (model.transform.forward)(&theta, &b);
                let back = (model.transform.backward)(&natural, &b);
                assert!((&back - &theta).amax() < 1e-12, "{name} round trip");
            }
        }
    }

    #[test]
    fn linear2d_direct_substitution() {
        // phi1 = 0.5, phi2 = 2, x = (1, 1) => f = (1.5, -2)
        let model = builtin_model("linear2d").unwrap();
        let theta = DVector::from_vec(vec![0.5f64.ln(), 2.0f64.ln()]);
        let b = DVector::zeros(1);
        let x = DVector::from_vec(vec![1.0, 1.0]);
        let f = model.vector_field(0.0, &x, None, &theta, &b).unwrap();
        assert!((f[0] - 1.5).abs() < 1e-12);
        assert!((f[1] + 2.0).abs() < 1e-12);
    }

    #[test]
    fn equilibrium_gives_zero_field() {
        // antibody at Ab = r(t)/delta_Ab satisfies A x = -r
        let model = builtin_model("antibody").unwrap();
        let theta = DVector::from_vec(theta_star("antibody"));
        let b = DVector::zeros(3);
        let t = 30.0;
        let r = (model.forcing)(t, None, &theta, &b);
        let dab = (theta[3]).exp();
        let x = DVector::from_element(1, r[0] / dab);
        let f = model.vector_field(t, &x, None, &theta, &b).unwrap();
        assert!(f[0].abs() < 1e-12);
    }

    #[test]
    fn builtin_dimensions() {
        let m = builtin_model("linear2d").unwrap();
        assert_eq!((m.dim, m.obs_dim, m.effect_dim), (2, 1, 1));
        let m = builtin_model("insulin").unwrap();
        assert_eq!((m.dim, m.obs_dim, m.effect_dim), (3, 2, 1));
        assert_eq!(m.known_ic_mask, vec![true, true, false]);
        let m = builtin_model("antibody").unwrap();
        assert_eq!(m.effect_dim, 3);
        assert!((ANTIBODY_DELTA_L - 2f64.ln() / (364.0 * 6.0)).abs() < 1e-18);
    }

    #[test]
    fn unknown_model_name_is_a_lookup_error() {
        match builtin_model("does_not_exist") {
            Err(Error::Lookup(msg)) => assert!(msg.contains("does_not_exist")),
            other => panic!("expected lookup error, got {other:?}"),
        }
    }

    #[test]
    fn dimension_mismatch_is_a_config_error() {
        let model = builtin_model("linear2d").unwrap();
        let theta = DVector::from_vec(vec![0.0, 0.0]);
        let b = DVector::zeros(1);
        let bad_x = DVector::zeros(3);
        assert!(matches!(
            model.vector_field(0.0, &bad_x, None, &theta, &b),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn subject_data_rejects_bad_times() {
        let obs = DMatrix::zeros(2, 1);
        let err = SubjectData::new(
            "s1",
            vec![1.0, 1.0],
            obs.clone(),
            DVector::zeros(1),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
        assert!(SubjectData::new("s1", vec![0.0, 1.0], obs, DVector::zeros(1)).is_ok());
    }

    #[test]
    fn psi_matrix_is_positive_definite() {
        let p = PopulationParams::new(vec![0.0], vec![-0.3, 0.8], 0.04).unwrap();
        let psi = p.psi_matrix();
        for k in 0..2 {
            assert!(psi[(k, k)] > 0.0);
            let expected = 0.04 * (-2.0 * p.delta[k]).exp();
            assert!((psi[(k, k)] - expected).abs() < 1e-15);
        }
    }
}
