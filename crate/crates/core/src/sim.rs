//! Synthetic-data generation and the Monte-Carlo study harness.
//!
//! Subjects are simulated from the benchmark models (closed forms where
//! they exist, RK4 otherwise) or from their stochastically perturbed
//! versions (Euler-Maruyama), observed at equally spaced times with
//! Gaussian measurement noise. The Monte-Carlo driver fits every simulated
//! population starting from the truth, attaches sandwich variances, and
//! aggregates normalized accuracy metrics per parameter.
//!
//! Random-number streams are laid out hierarchically (master seed, then a
//! stream per run, then a stream per subject) so results do not depend on
//! worker scheduling.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lq::PenaltyU;
use crate::model::{builtin_model, PseudoLinearModel, SubjectData};
use crate::ode::rk4_path;
use crate::population::{fit_population, LogPrior, OuterConfig};
use crate::uncertainty::{
    confidence_interval, psi_delta_method, sandwich_covariance, DEFAULT_FD_STEP,
};

/// Per-entry initial-condition law.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum IcLaw {
    /// Independent normals, one `(mean, variance)` pair per state.
    Normal { mean: Vec<f64>, variance: Vec<f64> },
    /// `ln(x0) ~ N(log_mean, log_variance)` entrywise.
    LogNormal {
        log_mean: Vec<f64>,
        log_variance: Vec<f64>,
    },
}

impl IcLaw {
    fn sample(&self, rng: &mut ChaCha8Rng) -> DVector<f64> {
        match self {
            IcLaw::Normal { mean, variance } => DVector::from_iterator(
                mean.len(),
                mean.iter().zip(variance).map(|(m, v)| {
                    m + v.max(0.0).sqrt() * Normal::new(0.0, 1.0).unwrap().sample(rng)
                }),
            ),
            IcLaw::LogNormal {
                log_mean,
                log_variance,
            } => DVector::from_iterator(
                log_mean.len(),
                log_mean.iter().zip(log_variance).map(|(m, v)| {
                    (m + v.max(0.0).sqrt() * Normal::new(0.0, 1.0).unwrap().sample(rng)).exp()
                }),
            ),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            IcLaw::Normal { mean, .. } => mean.len(),
            IcLaw::LogNormal { log_mean, .. } => log_mean.len(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Misspecification {
    None,
    /// Hypoelliptic-style diffusion with one coefficient per state.
    Sde { alpha: Vec<f64> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub model: String,
    pub n_subjects: usize,
    /// Observations per subject, equally spaced on `[0, t_end]` including
    /// both endpoints.
    pub n_obs: usize,
    pub t_end: f64,
    pub theta_star: Vec<f64>,
    /// Diagonal of the true random-effect covariance.
    pub psi_star_diag: Vec<f64>,
    /// Measurement noise standard deviation.
    pub sigma_star: f64,
    pub ic_law: IcLaw,
    pub misspec: Misspecification,
    pub seed: u64,
    /// Euler-Maruyama resolution: target number of steps over `[0, t_end]`.
    #[serde(default = "default_sde_steps")]
    pub sde_steps: usize,
}

fn default_sde_steps() -> usize {
    2000
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_subjects == 0 {
            return Err(Error::validation("need at least one subject"));
        }
        if self.n_obs < 2 {
            return Err(Error::validation("need at least two observations"));
        }
        if self.sigma_star < 0.0 || self.psi_star_diag.iter().any(|v| *v < 0.0) {
            return Err(Error::validation("variances must be nonnegative"));
        }
        if self.t_end <= 0.0 {
            return Err(Error::validation("t_end must be positive"));
        }
        Ok(())
    }

    pub fn observation_times(&self) -> Vec<f64> {
        (0..self.n_obs)
            .map(|j| self.t_end * j as f64 / (self.n_obs - 1) as f64)
            .collect()
    }

    /// True `delta` implied by `(sigma_star, psi_star)`; entries fall back
    /// to zero when the noise-free or effect-free limits make them
    /// undefined.
    pub fn delta_star(&self) -> Vec<f64> {
        self.psi_star_diag
            .iter()
            .map(|psi| {
                let d = self.sigma_star.ln() - 0.5 * psi.ln();
                if d.is_finite() {
                    d
                } else {
                    0.0
                }
            })
            .collect()
    }
}

/// Reference scenario for a built-in model, at the population sizes used
/// throughout the desk-scale experiments.
pub fn default_scenario(model: &str) -> Result<ScenarioSpec> {
    match model {
        "linear2d" => Ok(ScenarioSpec {
            model: "linear2d".into(),
            n_subjects: 20,
            n_obs: 11,
            t_end: 10.0,
            theta_star: vec![0.5f64.ln(), 2.0f64.ln()],
            psi_star_diag: vec![0.25],
            sigma_star: 0.05,
            ic_law: IcLaw::Normal {
                mean: vec![2.0, 3.0],
                variance: vec![0.5, 1.0],
            },
            misspec: Misspecification::None,
            seed: 0,
            sde_steps: 2000,
        }),
        "insulin" => Ok(ScenarioSpec {
            model: "insulin".into(),
            n_subjects: 20,
            n_obs: 5,
            t_end: 180.0,
            theta_star: vec![-3.89, -7.09, -1.81],
            psi_star_diag: vec![0.26 * 0.26],
            sigma_star: 3.0,
            ic_law: IcLaw::LogNormal {
                log_mean: vec![5.52, 4.88, -7.0],
                log_variance: vec![0.17 * 0.17, 0.1 * 0.1, 1e-4],
            },
            misspec: Misspecification::None,
            seed: 0,
            sde_steps: 2000,
        }),
        "antibody" => Ok(ScenarioSpec {
            model: "antibody".into(),
            n_subjects: 20,
            n_obs: 11,
            t_end: 364.0,
            theta_star: vec![
                (2f64.ln() / 1.2).ln(),
                2755f64.ln(),
                16f64.ln(),
                (2f64.ln() / 24.0).ln(),
            ],
            psi_star_diag: vec![0.92 * 0.92, 0.85 * 0.85, 0.3 * 0.3],
            sigma_star: 100.0,
            ic_law: IcLaw::Normal {
                mean: vec![500.0],
                variance: vec![260.0 * 260.0],
            },
            misspec: Misspecification::None,
            seed: 0,
            sde_steps: 2000,
        }),
        // synthetic stand-in for the log-scale antibody data: same truth,
        // observations on log10 scale with a noise level matching that scale
        "antibody_log10" => Ok(ScenarioSpec {
            model: "antibody_log10".into(),
            n_subjects: 20,
            n_obs: 5,
            t_end: 330.0,
            theta_star: vec![
                (2f64.ln() / 1.2).ln(),
                2755f64.ln(),
                16f64.ln(),
                (2f64.ln() / 24.0).ln(),
            ],
            psi_star_diag: vec![0.92 * 0.92, 0.85 * 0.85, 0.3 * 0.3],
            sigma_star: 0.1,
            ic_law: IcLaw::Normal {
                mean: vec![500.0],
                variance: vec![260.0 * 260.0],
            },
            misspec: Misspecification::None,
            seed: 0,
            sde_steps: 2000,
        }),
        other => Err(Error::Lookup(format!("no default scenario for '{other}'"))),
    }
}

/// Default SDE diffusion coefficients per model (one per state).
pub fn default_sde_alpha(model: &str) -> Result<Vec<f64>> {
    match model {
        "linear2d" => Ok(vec![0.0, 0.1]),
        "insulin" => Ok(vec![2.0, 2.0, 2e-4]),
        "antibody" => Ok(vec![10.0]),
        // scaled for the log10 state
        "antibody_log10" => Ok(vec![10.0]),
        other => Err(Error::Lookup(format!("no default SDE alphas for '{other}'"))),
    }
}

/// Ground truth attached to a simulated population.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthRecord {
    pub model: String,
    pub theta: Vec<f64>,
    pub delta: Vec<f64>,
    pub sigma: f64,
    pub psi_diag: Vec<f64>,
    pub subjects: Vec<SubjectTruth>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubjectTruth {
    pub id: String,
    pub b: Vec<f64>,
    pub x0: Vec<f64>,
}

fn rng_for(seed: u64, run: u64, subject: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((run + 1) << 32) | (subject + 1));
    rng
}

/// Closed-form solution of the two-compartment linear model, with the
/// analytic limit when the two rates collide.
pub fn linear2d_solution(
    phi1: f64,
    phi2: f64,
    x10: f64,
    x20: f64,
    t: f64,
) -> (f64, f64) {
    let x2 = x20 * (-phi2 * t).exp();
    let x1 = if (phi1 - phi2).abs() < 1e-10 {
        (-phi1 * t).exp() * (x10 + x20 * phi2 * t)
    } else {
        (-phi1 * t).exp() * x10 + x20 * phi2 * ((-phi2 * t).exp() - (-phi1 * t).exp()) / (phi1 - phi2)
    };
    (x1, x2)
}

/// Closed-form antibody concentration.
pub fn antibody_solution(
    delta_s: f64,
    delta_l: f64,
    phi_s: f64,
    phi_l: f64,
    delta_ab: f64,
    ab0: f64,
    t: f64,
) -> f64 {
    let ramp = |decl: f64| {
        if (delta_ab - decl).abs() < 1e-10 {
            t * (-delta_ab * t).exp()
        } else {
            ((-decl * t).exp() - (-delta_ab * t).exp()) / (delta_ab - decl)
        }
    };
    ab0 * (-delta_ab * t).exp() + phi_s * ramp(delta_s) + phi_l * ramp(delta_l)
}

/// Deterministic state path of a model at the requested times.
fn deterministic_states(
    spec: &ScenarioSpec,
    model: &PseudoLinearModel,
    theta: &DVector<f64>,
    b: &DVector<f64>,
    x0: &DVector<f64>,
    times: &[f64],
) -> Result<Vec<DVector<f64>>> {
    match spec.model.as_str() {
        "linear2d" => {
            let phi1 = (theta[0] + b[0]).exp();
            let phi2 = theta[1].exp();
            Ok(times
                .iter()
                .map(|t| {
                    let (x1, x2) = linear2d_solution(phi1, phi2, x0[0], x0[1], *t);
                    DVector::from_vec(vec![x1, x2])
                })
                .collect())
        }
        "antibody" | "antibody_log10" => {
            let ds = theta[0].exp();
            let phis = (theta[1] + b[0]).exp();
            let phil = (theta[2] + b[1]).exp();
            let dab = (theta[3] + b[2]).exp();
            // x0 is the natural concentration in both variants
            Ok(times
                .iter()
                .map(|t| {
                    let ab = antibody_solution(
                        ds,
                        crate::model::ANTIBODY_DELTA_L,
                        phis,
                        phil,
                        dab,
                        x0[0],
                        *t,
                    );
                    let v = if spec.model == "antibody_log10" {
                        ab.max(1e-300).log10()
                    } else {
                        ab
                    };
                    DVector::from_element(1, v)
                })
                .collect())
        }
        _ => {
            // RK4 on a fine grid containing the requested times
            let field = |t: f64, x: &DVector<f64>| {
                let a = (model.dynamics_matrix)(t, x, None, theta, b);
                let r = (model.forcing)(t, None, theta, b);
                a * x + r
            };
            let grid = refine_grid(times, spec.t_end, spec.sde_steps);
            let path = rk4_path(&field, &grid.times, x0);
            Ok(grid.pick.iter().map(|k| path[*k].clone()).collect())
        }
    }
}

struct RefinedGrid {
    times: Vec<f64>,
    /// Index into `times` of each requested sample time.
    pick: Vec<usize>,
}

/// Builds an integration grid that contains every sample time, with steps
/// no larger than `t_end / target_steps`.
fn refine_grid(sample_times: &[f64], t_end: f64, target_steps: usize) -> RefinedGrid {
    let dt = t_end / target_steps.max(1) as f64;
    let mut times = vec![sample_times[0]];
    let mut pick = vec![0usize];
    for w in sample_times.windows(2) {
        let gap = w[1] - w[0];
        let m = (gap / dt).ceil().max(1.0) as usize;
        for s in 1..=m {
            let t = if s == m {
                w[1]
            } else {
                w[0] + gap * s as f64 / m as f64
            };
            times.push(t);
        }
        pick.push(times.len() - 1);
    }
    RefinedGrid { times, pick }
}

/// Fills the known initial-state entries from the first observation row.
pub fn known_ic_from_first_obs(
    model: &PseudoLinearModel,
    first_obs: &DVector<f64>,
) -> Result<DVector<f64>> {
    let c = &model.observation_matrix;
    let known = model.known_ic_indices();
    let mut values = DVector::zeros(known.len());
    for (slot, state) in known.iter().enumerate() {
        let row = (0..c.nrows()).find(|r| {
            (c[(*r, *state)] - 1.0).abs() < 1e-12
                && (0..c.ncols()).all(|j| j == *state || c[(*r, j)].abs() < 1e-12)
        });
        match row {
            Some(r) => values[slot] = first_obs[r],
            None => {
                return Err(Error::config(format!(
                    "known initial state {state} is not directly observed"
                )))
            }
        }
    }
    Ok(values)
}

/// Simulates one subject from the deterministic model.
pub fn simulate_subject(
    spec: &ScenarioSpec,
    model: &PseudoLinearModel,
    b_star: &DVector<f64>,
    x0_star: &DVector<f64>,
    rng: &mut ChaCha8Rng,
    subject_id: &str,
) -> Result<SubjectData> {
    let times = spec.observation_times();
    let theta = DVector::from_vec(spec.theta_star.clone());
    let states = deterministic_states(spec, model, &theta, b_star, x0_star, &times)?;
    observe(model, spec, &times, &states, rng, subject_id)
}

/// Simulates one subject from the SDE-perturbed model (Euler-Maruyama with
/// diagonal diffusion `alpha`), then adds measurement noise.
pub fn simulate_subject_sde(
    spec: &ScenarioSpec,
    model: &PseudoLinearModel,
    alpha: &[f64],
    b_star: &DVector<f64>,
    x0_star: &DVector<f64>,
    rng: &mut ChaCha8Rng,
    subject_id: &str,
) -> Result<SubjectData> {
    if alpha.len() != model.dim {
        return Err(Error::config("one diffusion coefficient per state required"));
    }
    let times = spec.observation_times();
    let theta = DVector::from_vec(spec.theta_star.clone());
    // the log10 variant integrates the natural concentration and transforms
    let log10_obs = spec.model == "antibody_log10";
    let sde_model = if log10_obs {
        builtin_model("antibody")?
    } else {
        model.clone()
    };

    let grid = refine_grid(&times, spec.t_end, spec.sde_steps);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut x = x0_star.clone();
    let mut sampled = vec![x.clone()];
    let mut next_pick = 1usize;
    for w in grid.times.windows(2).enumerate() {
        let (k, pair) = w;
        let dt = pair[1] - pair[0];
        let drift = sde_model.vector_field(pair[0], &x, None, &theta, b_star)?;
        let mut next = &x + drift * dt;
        let sqrt_dt = dt.sqrt();
        for (i, a) in alpha.iter().enumerate() {
            if *a != 0.0 {
                next[i] += a * sqrt_dt * normal.sample(rng);
            }
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("SDE path overflowed"));
        }
        x = next;
        if next_pick < grid.pick.len() && k + 1 == grid.pick[next_pick] {
            sampled.push(x.clone());
            next_pick += 1;
        }
    }
    let states: Vec<DVector<f64>> = if log10_obs {
        sampled
            .iter()
            .map(|s| DVector::from_element(1, s[0].max(1e-300).log10()))
            .collect()
    } else {
        sampled
    };
    observe(model, spec, &times, &states, rng, subject_id)
}

fn observe(
    model: &PseudoLinearModel,
    spec: &ScenarioSpec,
    times: &[f64],
    states: &[DVector<f64>],
    rng: &mut ChaCha8Rng,
    subject_id: &str,
) -> Result<SubjectData> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let c = &model.observation_matrix;
    let mut obs = DMatrix::zeros(times.len(), model.obs_dim);
    for (j, state) in states.iter().enumerate() {
        let mut y = c * state;
        for v in y.iter_mut() {
            *v += spec.sigma_star * normal.sample(rng);
        }
        obs.row_mut(j).copy_from(&y.transpose());
    }
    let known = known_ic_from_first_obs(model, &obs.row(0).transpose())?;
    SubjectData::new(subject_id, times.to_vec(), obs, known)
}

/// Simulates a full population with per-subject random-number streams.
pub fn simulate_population(
    spec: &ScenarioSpec,
    run: u64,
) -> Result<(Vec<SubjectData>, TruthRecord)> {
    spec.validate()?;
    let model = builtin_model(&spec.model)?;
    if spec.theta_star.len() != model.theta_dim
        || spec.psi_star_diag.len() != model.effect_dim
        || spec.ic_law.dim() != model.dim
    {
        return Err(Error::config("scenario dimensions do not match the model"));
    }
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut subjects = Vec::with_capacity(spec.n_subjects);
    let mut truths = Vec::with_capacity(spec.n_subjects);
    for i in 0..spec.n_subjects {
        let mut rng = rng_for(spec.seed, run, i as u64);
        let b = DVector::from_iterator(
            model.effect_dim,
            spec.psi_star_diag
                .iter()
                .map(|psi| psi.max(0.0).sqrt() * normal.sample(&mut rng)),
        );
        let x0 = spec.ic_law.sample(&mut rng);
        let id = format!("s{:03}", i + 1);
        let subject = match &spec.misspec {
            Misspecification::None => simulate_subject(spec, &model, &b, &x0, &mut rng, &id)?,
            Misspecification::Sde { alpha } => {
                simulate_subject_sde(spec, &model, alpha, &b, &x0, &mut rng, &id)?
            }
        };
        subjects.push(subject);
        truths.push(SubjectTruth {
            id,
            b: b.iter().copied().collect(),
            x0: x0.iter().copied().collect(),
        });
    }
    Ok((
        subjects,
        TruthRecord {
            model: spec.model.clone(),
            theta: spec.theta_star.clone(),
            delta: spec.delta_star(),
            sigma: spec.sigma_star,
            psi_diag: spec.psi_star_diag.clone(),
            subjects: truths,
        },
    ))
}

// ---------------------------------------------------------------------------
// Monte-Carlo study
// ---------------------------------------------------------------------------

/// Estimation settings used by the Monte-Carlo driver.
#[derive(Debug, Clone)]
pub struct McConfig {
    /// Scalar control penalty, interpreted as `U * I`.
    pub penalty_u: f64,
    pub outer: OuterConfig,
    pub prior: LogPrior,
    pub fd_step: f64,
    pub confidence: f64,
}

impl Default for McConfig {
    fn default() -> Self {
        McConfig {
            penalty_u: 100.0,
            outer: OuterConfig::default(),
            prior: LogPrior::flat(),
            fd_step: DEFAULT_FD_STEP,
            confidence: 0.95,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamSummary {
    pub name: String,
    /// All of the following are on the normalized scale `estimate / truth`
    /// (absolute scale when the true value is zero).
    pub mse: f64,
    pub bias: f64,
    pub emp_var: f64,
    /// Mean estimated (sandwich / delta-method) variance.
    pub est_var: f64,
    /// Fraction of runs whose confidence interval covers the truth.
    pub coverage: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McSummary {
    pub params: Vec<ParamSummary>,
    /// Mean over runs of `mean_i |b_i^* - b_hat_i|^2`.
    pub mse_b: f64,
    pub runs_completed: usize,
    pub failures: usize,
}

struct RunRecord {
    /// Raw estimates `(theta_1.., psi_1..)` (psi on standard-deviation scale).
    estimates: Vec<f64>,
    est_vars: Vec<f64>,
    covered: Vec<bool>,
    mse_b: f64,
}

fn run_once(spec: &ScenarioSpec, cfg: &McConfig, run: u64) -> Result<RunRecord> {
    let model = builtin_model(&spec.model)?;
    let (population, truth) = simulate_population(spec, run)?;
    let penalty = PenaltyU::scalar(cfg.penalty_u, model.control_dim)?;
    let theta0 = DVector::from_vec(truth.theta.clone());
    let delta0 = DVector::from_vec(truth.delta.clone());
    let fit = fit_population(
        &population,
        &model,
        &penalty,
        &cfg.prior,
        (&theta0, &delta0),
        &cfg.outer,
    )?;
    let sandwich = sandwich_covariance(
        &fit,
        &population,
        &model,
        &penalty,
        &cfg.outer.inner,
        cfg.outer.mesh_refine,
        cfg.fd_step,
    )?;

    let p = model.theta_dim;
    let q = model.effect_dim;
    let mut estimates = Vec::with_capacity(p + q);
    let mut est_vars = Vec::with_capacity(p + q);
    let mut covered = Vec::with_capacity(p + q);

    let psi_sd_true: Vec<f64> = spec.psi_star_diag.iter().map(|v| v.sqrt()).collect();
    let psi_sd_hat = fit.psi_sd();
    let psi_vars = psi_delta_method(&sandwich.v_hat, &fit.delta_hat, fit.sigma2_hat);

    for k in 0..p {
        let est = fit.theta_hat[k];
        let var = sandwich.variance(k).max(0.0);
        let (lo, hi) = confidence_interval(est, var, cfg.confidence)?;
        estimates.push(est);
        est_vars.push(var);
        covered.push(lo <= spec.theta_star[k] && spec.theta_star[k] <= hi);
    }
    for k in 0..q {
        let est = psi_sd_hat[k];
        let var = psi_vars[k].max(0.0);
        let (lo, hi) = confidence_interval(est, var, cfg.confidence)?;
        estimates.push(est);
        est_vars.push(var);
        covered.push(lo <= psi_sd_true[k] && psi_sd_true[k] <= hi);
    }

    let mse_b = population
        .iter()
        .zip(&truth.subjects)
        .zip(&fit.subjects)
        .map(|((_, t), sol)| {
            let b_true = DVector::from_vec(t.b.clone());
            (&sol.b_hat - b_true).norm_squared()
        })
        .sum::<f64>()
        / population.len() as f64;

    Ok(RunRecord {
        estimates,
        est_vars,
        covered,
        mse_b,
    })
}

/// Runs the Monte-Carlo study: simulate, fit from the truth, quantify.
/// Failed runs are excluded and counted.
pub fn run_monte_carlo(spec: &ScenarioSpec, cfg: &McConfig, n_runs: usize) -> Result<McSummary> {
    if n_runs == 0 {
        return Err(Error::validation("need at least one run"));
    }
    spec.validate()?;
    let model = builtin_model(&spec.model)?;
    let results: Vec<Result<RunRecord>> = (0..n_runs)
        .into_par_iter()
        .map(|r| run_once(spec, cfg, r as u64))
        .collect();

    let mut records = Vec::new();
    let mut failures = 0usize;
    for res in results {
        match res {
            Ok(rec) => records.push(rec),
            Err(e) => {
                log::warn!("Monte-Carlo run failed: {e}");
                failures += 1;
            }
        }
    }
    if records.is_empty() {
        return Err(Error::numeric("all Monte-Carlo runs failed"));
    }

    let p = model.theta_dim;
    let q = model.effect_dim;
    let mut names: Vec<String> = (1..=p).map(|k| format!("theta_{k}")).collect();
    names.extend((1..=q).map(|k| format!("psi_{k}")));

    let truth: Vec<f64> = spec
        .theta_star
        .iter()
        .copied()
        .chain(spec.psi_star_diag.iter().map(|v| v.sqrt()))
        .collect();

    let n_runs_f = records.len() as f64;
    let mut params = Vec::with_capacity(p + q);
    for (k, name) in names.into_iter().enumerate() {
        // normalize by the truth unless it vanishes
        let scale = if truth[k].abs() > 1e-12 { truth[k] } else { 1.0 };
        let normalized: Vec<f64> = records.iter().map(|r| r.estimates[k] / scale).collect();
        let target = truth[k] / scale;
        let mean = normalized.iter().sum::<f64>() / n_runs_f;
        let bias = mean - target;
        let emp_var =
            normalized.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n_runs_f;
        let mse = normalized
            .iter()
            .map(|v| (v - target) * (v - target))
            .sum::<f64>()
            / n_runs_f;
        let est_var = records
            .iter()
            .map(|r| r.est_vars[k] / (scale * scale))
            .sum::<f64>()
            / n_runs_f;
        let coverage = records.iter().filter(|r| r.covered[k]).count() as f64 / n_runs_f;
        params.push(ParamSummary {
            name,
            mse,
            bias,
            emp_var,
            est_var,
            coverage,
        });
    }
    let mse_b = records.iter().map(|r| r.mse_b).sum::<f64>() / n_runs_f;

    Ok(McSummary {
        params,
        mse_b,
        runs_completed: records.len(),
        failures,
    })
}
