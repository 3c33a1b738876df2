//! Population parameter estimation.
//!
//! The outer criterion maximized over `(theta, delta)` is
//! `G = -0.5 (d_obs * sum_i n_i + q n) ln(sigma2(theta, Delta)) + n ln|Delta|
//! + ln P[theta, Delta]`, with the measurement variance profiled out in
//! closed form. Every evaluation re-estimates all random effects, warm
//! started from the previous outer iteration.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{subject_mesh, Mesh};
use crate::inner::{estimate_subject, InnerConfig, InnerSolution};
use crate::lq::PenaltyU;
use crate::model::{delta_matrix, PseudoLinearModel, SubjectData};
use crate::optim::NelderMead;
use crate::uncertainty::SandwichParts;

/// Log-prior over `(theta, delta)`; the default is non-informative.
#[derive(Clone)]
pub struct LogPrior {
    evaluator: Arc<dyn Fn(&DVector<f64>, &DVector<f64>) -> f64 + Send + Sync>,
}

impl fmt::Debug for LogPrior {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("LogPrior")
    }
}

impl LogPrior {
    /// `ln P = 0` everywhere.
    pub fn flat() -> Self {
        LogPrior {
            evaluator: Arc::new(|_, _| 0.0),
        }
    }

    /// Independent Gaussian prior on `theta` with the given means and
    /// variances; `delta` stays unpenalized.
    pub fn gaussian_theta(mean: Vec<f64>, variance: Vec<f64>) -> Result<Self> {
        if mean.len() != variance.len() {
            return Err(Error::config("prior mean/variance length mismatch"));
        }
        if variance.iter().any(|v| *v <= 0.0) {
            return Err(Error::config("prior variances must be positive"));
        }
        Ok(LogPrior {
            evaluator: Arc::new(move |theta, _delta| {
                mean.iter()
                    .zip(&variance)
                    .enumerate()
                    .map(|(k, (m, v))| {
                        let d = theta[k] - m;
                        -0.5 * (d * d / v + (2.0 * std::f64::consts::PI * v).ln())
                    })
                    .sum()
            }),
        })
    }

    pub fn custom(
        evaluator: Arc<dyn Fn(&DVector<f64>, &DVector<f64>) -> f64 + Send + Sync>,
    ) -> Self {
        LogPrior { evaluator }
    }

    pub fn evaluate(&self, theta: &DVector<f64>, delta: &DVector<f64>) -> f64 {
        (self.evaluator)(theta, delta)
    }
}

#[derive(Debug, Clone)]
pub struct OuterConfig {
    pub mesh_refine: usize,
    pub inner: InnerConfig,
    /// Cap on outer criterion evaluations.
    pub max_evals: usize,
    pub tol_x: f64,
    pub tol_f: f64,
    pub initial_step: f64,
    /// Floor applied inside `ln(sigma2)` so interpolating fits stay finite.
    pub sigma2_floor: f64,
}

impl Default for OuterConfig {
    fn default() -> Self {
        OuterConfig {
            mesh_refine: 10,
            inner: InnerConfig::default(),
            max_evals: 2000,
            tol_x: 1e-5,
            tol_f: 1e-8,
            initial_step: 0.1,
            sigma2_floor: 1e-12,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitDiagnostics {
    pub outer_evaluations: usize,
    pub outer_iterations: usize,
    pub converged: bool,
    /// Outer evaluations where at least one subject failed.
    pub failed_evaluations: usize,
}

#[derive(Debug)]
pub struct FitResult {
    pub theta_hat: DVector<f64>,
    pub delta_hat: DVector<f64>,
    pub sigma2_hat: f64,
    /// `Psi = sigma2 (Delta' Delta)^{-1}`, diagonal here.
    pub psi_hat: DMatrix<f64>,
    pub subjects: Vec<InnerSolution>,
    pub g_value: f64,
    /// Filled by the uncertainty module when requested.
    pub covariance: Option<SandwichParts>,
    pub diagnostics: FitDiagnostics,
}

impl FitResult {
    /// Diagonal of `Psi` (variances of the random effects).
    pub fn psi_diag(&self) -> Vec<f64> {
        (0..self.psi_hat.nrows()).map(|k| self.psi_hat[(k, k)]).collect()
    }

    /// Standard-deviation-scale entries `Psi_k = sigma exp(-delta_k)`.
    pub fn psi_sd(&self) -> Vec<f64> {
        let sigma = self.sigma2_hat.max(0.0).sqrt();
        self.delta_hat.iter().map(|d| sigma * (-d).exp()).collect()
    }
}

/// Closed-form profiled measurement variance
/// `sigma2 = sum_i h_i / (d_obs sum_i n_i + q n)`.
pub fn profiled_sigma2(
    solutions: &[InnerSolution],
    delta: &DMatrix<f64>,
    n_obs: &[usize],
    obs_dim: usize,
    effect_dim: usize,
) -> Result<f64> {
    if solutions.is_empty() {
        return Err(Error::validation("empty population"));
    }
    if solutions.len() != n_obs.len() {
        return Err(Error::validation("one observation count per subject required"));
    }
    let numerator: f64 = solutions.iter().map(|s| s.h_value(delta)).sum();
    let denom = (obs_dim * n_obs.iter().sum::<usize>() + effect_dim * solutions.len()) as f64;
    Ok(numerator / denom)
}

/// One evaluation of the outer criterion at `(theta, delta)`: estimates all
/// random effects (optionally warm started) and returns `G` together with
/// the per-subject solutions. Subject solves run concurrently.
#[allow(clippy::too_many_arguments)]
pub fn outer_criterion(
    theta: &DVector<f64>,
    delta: &DVector<f64>,
    population: &[SubjectData],
    meshes: &[Mesh],
    model: &PseudoLinearModel,
    penalty: &PenaltyU,
    prior: &LogPrior,
    cfg: &OuterConfig,
    warm_starts: Option<&[DVector<f64>]>,
) -> Result<(f64, Vec<InnerSolution>)> {
    if population.is_empty() {
        return Err(Error::validation("empty population"));
    }
    let delta_mat = delta_matrix(delta);
    let results: Vec<Result<InnerSolution>> = population
        .par_iter()
        .zip(meshes.par_iter())
        .enumerate()
        .map(|(i, (subject, mesh))| {
            estimate_subject(
                model,
                subject,
                mesh,
                theta,
                &delta_mat,
                penalty,
                &cfg.inner,
                warm_starts.map(|w| &w[i]),
            )
        })
        .collect();

    let mut solutions = Vec::with_capacity(results.len());
    for (i, res) in results.into_iter().enumerate() {
        match res {
            Ok(sol) => solutions.push(sol),
            Err(e) => {
                return Err(Error::numeric(format!(
                    "inner estimation failed for subject {}: {e}",
                    population[i].subject_id
                )))
            }
        }
    }

    let n_obs: Vec<usize> = population.iter().map(|s| s.n_obs()).collect();
    let sigma2 = profiled_sigma2(&solutions, &delta_mat, &n_obs, model.obs_dim, model.effect_dim)?;
    let g = outer_value(sigma2, delta, &n_obs, model, prior, theta, cfg.sigma2_floor);
    Ok((g, solutions))
}

/// `G` from an already-profiled `sigma2`.
pub fn outer_value(
    sigma2: f64,
    delta: &DVector<f64>,
    n_obs: &[usize],
    model: &PseudoLinearModel,
    prior: &LogPrior,
    theta: &DVector<f64>,
    sigma2_floor: f64,
) -> f64 {
    let n = n_obs.len() as f64;
    let weight =
        (model.obs_dim * n_obs.iter().sum::<usize>()) as f64 + model.effect_dim as f64 * n;
    let log_det_delta: f64 = delta.iter().sum();
    -0.5 * weight * sigma2.max(sigma2_floor).ln() + n * log_det_delta + prior.evaluate(theta, delta)
}

/// Maximizes the outer criterion over `(theta, delta)` by simplex search
/// with per-subject warm starting across evaluations.
pub fn fit_population(
    population: &[SubjectData],
    model: &PseudoLinearModel,
    penalty: &PenaltyU,
    prior: &LogPrior,
    start: (&DVector<f64>, &DVector<f64>),
    cfg: &OuterConfig,
) -> Result<FitResult> {
    let (theta0, delta0) = start;
    if theta0.len() != model.theta_dim || delta0.len() != model.effect_dim {
        return Err(Error::config("start point dimensions do not match the model"));
    }
    if !theta0.iter().chain(delta0.iter()).all(|v| v.is_finite()) {
        return Err(Error::validation("start point must be finite"));
    }
    let meshes: Vec<Mesh> = population
        .iter()
        .map(|s| subject_mesh(s, cfg.mesh_refine))
        .collect::<Result<_>>()?;

    let p = model.theta_dim;
    let q = model.effect_dim;
    let mut warm: Vec<DVector<f64>> = vec![DVector::zeros(q); population.len()];
    let mut failed_evaluations = 0usize;

    let mut stacked0 = DVector::zeros(p + q);
    stacked0.rows_mut(0, p).copy_from(theta0);
    stacked0.rows_mut(p, q).copy_from(delta0);

    let nm = NelderMead {
        initial_step: cfg.initial_step,
        max_evals: cfg.max_evals,
        tol_x: cfg.tol_x,
        tol_f: cfg.tol_f,
    };
    let objective = |x: &DVector<f64>,
                     warm: &mut Vec<DVector<f64>>,
                     failed: &mut usize|
     -> f64 {
        let theta = DVector::from(x.rows(0, p));
        let delta = DVector::from(x.rows(p, q));
        match outer_criterion(
            &theta,
            &delta,
            population,
            &meshes,
            model,
            penalty,
            prior,
            cfg,
            Some(warm),
        ) {
            Ok((g, solutions)) => {
                for (w, sol) in warm.iter_mut().zip(&solutions) {
                    w.copy_from(&sol.b_hat);
                }
                -g
            }
            Err(_) => {
                *failed += 1;
                f64::INFINITY
            }
        }
    };

    let result = nm.minimize(
        |x| objective(x, &mut warm, &mut failed_evaluations),
        &stacked0,
    );

    let theta_hat = DVector::from(result.x.rows(0, p));
    let delta_hat = DVector::from(result.x.rows(p, q));
    let (g_value, solutions) = outer_criterion(
        &theta_hat,
        &delta_hat,
        population,
        &meshes,
        model,
        penalty,
        prior,
        cfg,
        Some(&warm),
    )?;

    let delta_mat = delta_matrix(&delta_hat);
    let n_obs: Vec<usize> = population.iter().map(|s| s.n_obs()).collect();
    let sigma2_hat =
        profiled_sigma2(&solutions, &delta_mat, &n_obs, model.obs_dim, model.effect_dim)?;
    let psi_hat = DMatrix::from_diagonal(&DVector::from_iterator(
        q,
        delta_hat.iter().map(|d| sigma2_hat * (-2.0 * d).exp()),
    ));

    Ok(FitResult {
        theta_hat,
        delta_hat,
        sigma2_hat,
        psi_hat,
        subjects: solutions,
        g_value,
        covariance: None,
        diagnostics: FitDiagnostics {
            outer_evaluations: result.evals,
            outer_iterations: result.iterations,
            converged: result.converged,
            failed_evaluations,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lq::LqSolution;
    use crate::model::builtin_model;

    fn stub_solution(residual: f64, b: f64) -> InnerSolution {
        InnerSolution {
            b_hat: DVector::from_element(1, b),
            lq: LqSolution {
                g_value: residual,
                x0u_hat: DVector::zeros(0),
                control: vec![],
                trajectory: vec![],
                cost_split: (residual, 0.0),
            },
            g_min: residual,
            diag: crate::inner::OptimizerDiag {
                iterations: 0,
                evaluations: 0,
                converged: true,
                failed_evaluations: 0,
            },
            tracking_iterations: 1,
        }
    }

    #[test]
    fn sigma2_zero_when_everything_fits() {
        let sols = vec![stub_solution(0.0, 0.0), stub_solution(0.0, 0.0)];
        let delta = DMatrix::identity(1, 1);
        let s2 = profiled_sigma2(&sols, &delta, &[3, 3], 1, 1).unwrap();
        assert_eq!(s2, 0.0);
    }

    #[test]
    fn sigma2_direct_formula() {
        // d_obs = 1, q = 1, n = 1, n_1 = 2, numerator 3 => 3 / (2 + 1) = 1
        let sols = vec![stub_solution(3.0, 0.0)];
        let delta = DMatrix::identity(1, 1);
        let s2 = profiled_sigma2(&sols, &delta, &[2], 1, 1).unwrap();
        assert!((s2 - 1.0).abs() < 1e-15);
    }

    #[test]
    fn sigma2_includes_effect_penalty() {
        // numerator = residual + |Delta b|^2 = 1 + (2*0.5)^2 = 2
        let sols = vec![stub_solution(1.0, 0.5)];
        let delta = DMatrix::from_element(1, 1, 2.0);
        let s2 = profiled_sigma2(&sols, &delta, &[2], 1, 1).unwrap();
        assert!((s2 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn empty_population_rejected() {
        let delta = DMatrix::identity(1, 1);
        assert!(matches!(
            profiled_sigma2(&[], &delta, &[], 1, 1),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn outer_value_flat_prior_zero_delta() {
        // G = -0.5 (d_obs sum n_i + q n) ln sigma2 when ln|Delta| = 0, ln P = 0
        let model = builtin_model("linear2d").unwrap();
        let prior = LogPrior::flat();
        let theta = DVector::zeros(2);
        let delta = DVector::zeros(1);
        let g = outer_value(0.04, &delta, &[11, 11], &model, &prior, &theta, 1e-12);
        let weight = (1 * 22 + 1 * 2) as f64;
        assert!((g - (-0.5 * weight * 0.04f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn gaussian_prior_shapes_the_criterion() {
        let prior = LogPrior::gaussian_theta(vec![1.0], vec![4.0]).unwrap();
        let at = |t: f64| prior.evaluate(&DVector::from_element(1, t), &DVector::zeros(1));
        assert!(at(1.0) > at(3.0));
        // log-density difference matches the quadratic form
        let expected = -0.5 * ((3.0f64 - 1.0).powi(2) / 4.0);
        assert!(((at(3.0) - at(1.0)) - expected).abs() < 1e-12);
    }

    #[test]
    fn sigma2_floor_keeps_g_finite() {
        let model = builtin_model("linear2d").unwrap();
        let prior = LogPrior::flat();
        let theta = DVector::zeros(2);
        let delta = DVector::zeros(1);
        let g = outer_value(0.0, &delta, &[5], &model, &prior, &theta, 1e-12);
        assert!(g.is_finite());
    }
}
