//! Asymptotic covariance of the population estimator and model-error
//! diagnostics.
//!
//! The estimator is an M-estimator, so its covariance takes the sandwich
//! form `V = A^{-1} B A^{-T} / n` built from per-subject score vectors `J`.
//! The scores are derivatives of `h_i = |Delta b_hat_i|^2 + sum_j
//! |C Xbar(t_ij) - y_ij|^2` with the random effect re-estimated at every
//! probe point, computed by central finite differences; the `delta`
//! components carry the extra trace term of the diagonal-exponential
//! parametrization. Standard errors for the dispersion entries
//! `Psi_k = sigma exp(-delta_k)` follow by the delta method.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{subject_mesh, Mesh};
use crate::inner::{estimate_subject, InnerConfig};
use crate::lq::PenaltyU;
use crate::model::{delta_matrix, PseudoLinearModel, SubjectData};
use crate::population::FitResult;

/// Default relative step for the finite-difference scores.
pub const DEFAULT_FD_STEP: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct SandwichParts {
    /// Per-subject score vectors, one row per subject, `p + q` columns.
    pub j_scores: DMatrix<f64>,
    pub a_hat: DMatrix<f64>,
    pub b_hat: DMatrix<f64>,
    /// `A^{-1} B A^{-T} / n`.
    pub v_hat: DMatrix<f64>,
    /// Set when `A` had to be pseudo-inverted.
    pub ill_conditioned: bool,
}

impl SandwichParts {
    /// Marginal variance of `theta_k` (`k < p`) or `delta_{k-p}`.
    pub fn variance(&self, k: usize) -> f64 {
        self.v_hat[(k, k)]
    }
}

/// Central difference `df/dx` at `x` with absolute step `step`; on failure
/// of either probe the step widens once (x10) before giving up.
pub(crate) fn central_difference<F>(f: &mut F, x: f64, step: f64) -> Result<f64>
where
    F: FnMut(f64) -> Result<f64>,
{
    for attempt in 0..2 {
        let s = step * 10f64.powi(attempt);
        match (f(x + s), f(x - s)) {
            (Ok(hi), Ok(lo)) => return Ok((hi - lo) / (2.0 * s)),
            _ if attempt == 0 => continue,
            (Err(e), _) | (_, Err(e)) => return Err(e),
        }
    }
    unreachable!()
}

/// Everything needed to evaluate `h_i` at perturbed parameters.
struct ScoreContext<'a> {
    model: &'a PseudoLinearModel,
    subject: &'a SubjectData,
    mesh: &'a Mesh,
    penalty: &'a PenaltyU,
    inner: &'a InnerConfig,
    /// Warm start for the probe re-solves (the fitted random effect).
    warm: &'a DVector<f64>,
    n_subjects: usize,
    total_obs: usize,
}

impl ScoreContext<'_> {
    fn h_at(&self, theta: &DVector<f64>, delta: &DVector<f64>) -> Result<f64> {
        let delta_mat = delta_matrix(delta);
        let sol = estimate_subject(
            self.model,
            self.subject,
            self.mesh,
            theta,
            &delta_mat,
            self.penalty,
            self.inner,
            Some(self.warm),
        )?;
        Ok(sol.h_value(&delta_mat))
    }

    /// Trace factor `2n / (d_obs sum_i n_i + q n)`; the trace itself is 1
    /// per component for the diagonal-exponential parametrization.
    fn trace_factor(&self) -> f64 {
        let n = self.n_subjects as f64;
        2.0 * n
            / (self.model.obs_dim as f64 * self.total_obs as f64
                + self.model.effect_dim as f64 * n)
    }

    /// The full score vector `J_i` at `(theta, delta)`; `h_center` is the
    /// value of `h_i` at the same point.
    fn score(
        &self,
        theta: &DVector<f64>,
        delta: &DVector<f64>,
        h_center: f64,
        fd_step: f64,
    ) -> Result<DVector<f64>> {
        let p = theta.len();
        let q = delta.len();
        let mut j = DVector::zeros(p + q);
        for k in 0..p {
            let step = fd_step * (1.0 + theta[k].abs());
            let mut probe = |v: f64| -> Result<f64> {
                let mut th = theta.clone();
                th[k] = v;
                self.h_at(&th, delta)
            };
            j[k] = central_difference(&mut probe, theta[k], step)?;
        }
        let factor = self.trace_factor();
        for k in 0..q {
            let step = fd_step * (1.0 + delta[k].abs());
            let mut probe = |v: f64| -> Result<f64> {
                let mut de = delta.clone();
                de[k] = v;
                self.h_at(theta, &de)
            };
            let dh = central_difference(&mut probe, delta[k], step)?;
            j[p + k] = dh - factor * h_center;
        }
        Ok(j)
    }
}

/// Score vector of one subject at `(theta, delta)`, re-estimating the
/// random effect at every finite-difference probe.
#[allow(clippy::too_many_arguments)]
pub fn subject_score(
    theta: &DVector<f64>,
    delta: &DVector<f64>,
    subject: &SubjectData,
    model: &PseudoLinearModel,
    penalty: &PenaltyU,
    inner: &InnerConfig,
    mesh: &Mesh,
    population_counts: (usize, usize),
    warm: &DVector<f64>,
    fd_step: f64,
) -> Result<DVector<f64>> {
    let (n_subjects, total_obs) = population_counts;
    let ctx = ScoreContext {
        model,
        subject,
        mesh,
        penalty,
        inner,
        warm,
        n_subjects,
        total_obs,
    };
    let h_center = ctx.h_at(theta, delta)?;
    ctx.score(theta, delta, h_center, fd_step)
}

/// Assembles the sandwich covariance at the fitted parameters:
/// `B = (1/n) sum J_i J_i'`, `A = -(1/n) sum dJ_i/d(theta,delta)` (forward
/// differences of the scores), `V = A^{-1} B A^{-T} / n`.
#[allow(clippy::too_many_arguments)]
pub fn sandwich_covariance(
    fit: &FitResult,
    population: &[SubjectData],
    model: &PseudoLinearModel,
    penalty: &PenaltyU,
    inner: &InnerConfig,
    mesh_refine: usize,
    fd_step: f64,
) -> Result<SandwichParts> {
    let n = population.len();
    if n == 0 {
        return Err(Error::validation("empty population"));
    }
    if fit.subjects.len() != n {
        return Err(Error::config("fit does not cover the population"));
    }
    let p = model.theta_dim;
    let q = model.effect_dim;
    let dim = p + q;
    let total_obs: usize = population.iter().map(|s| s.n_obs()).sum();
    let meshes: Vec<Mesh> = population
        .iter()
        .map(|s| subject_mesh(s, mesh_refine))
        .collect::<Result<_>>()?;
    let delta_hat_mat = delta_matrix(&fit.delta_hat);

    // per-subject scores and their parameter Jacobians, in subject order
    let per_subject: Vec<Result<(DVector<f64>, DMatrix<f64>)>> = population
        .par_iter()
        .enumerate()
        .map(|(i, subject)| {
            let ctx = ScoreContext {
                model,
                subject,
                mesh: &meshes[i],
                penalty,
                inner,
                warm: &fit.subjects[i].b_hat,
                n_subjects: n,
                total_obs,
            };
            let h_center = fit.subjects[i].h_value(&delta_hat_mat);
            let j_center = ctx.score(&fit.theta_hat, &fit.delta_hat, h_center, fd_step)?;

            let mut jac = DMatrix::zeros(dim, dim);
            for col in 0..dim {
                let mut theta = fit.theta_hat.clone();
                let mut delta = fit.delta_hat.clone();
                let step = if col < p {
                    let s = fd_step * (1.0 + theta[col].abs());
                    theta[col] += s;
                    s
                } else {
                    let s = fd_step * (1.0 + delta[col - p].abs());
                    delta[col - p] += s;
                    s
                };
                let h_probe = ctx.h_at(&theta, &delta)?;
                let j_probe = ctx.score(&theta, &delta, h_probe, fd_step)?;
                jac.set_column(col, &((&j_probe - &j_center) / step));
            }
            Ok((j_center, jac))
        })
        .collect();

    let mut j_scores = DMatrix::zeros(n, dim);
    let mut a_hat = DMatrix::zeros(dim, dim);
    let mut b_hat = DMatrix::zeros(dim, dim);
    for (i, res) in per_subject.into_iter().enumerate() {
        let (j, jac) = res?;
        j_scores.row_mut(i).copy_from(&j.transpose());
        b_hat += &j * j.transpose();
        a_hat -= jac;
    }
    a_hat /= n as f64;
    b_hat /= n as f64;

    let (a_inv, ill_conditioned) = match a_hat.clone().try_inverse() {
        Some(inv) if inv.iter().all(|v| v.is_finite()) => (inv, false),
        _ => {
            log::warn!("A-hat is singular, using a pseudo-inverse");
            let pinv = a_hat
                .clone()
                .svd(true, true)
                .pseudo_inverse(1e-12)
                .map_err(|e| Error::numeric(format!("pseudo-inverse failed: {e}")))?;
            (pinv, true)
        }
    };
    let v_hat = &a_inv * &b_hat * a_inv.transpose() / n as f64;

    Ok(SandwichParts {
        j_scores,
        a_hat,
        b_hat,
        v_hat,
        ill_conditioned,
    })
}

/// Delta-method variances of the dispersion entries
/// `Psi_k(delta) = sigma exp(-delta_k)`: `sigma^2 exp(-2 delta_k) V_{dd,kk}`.
pub fn psi_delta_method(
    v_hat: &DMatrix<f64>,
    delta_hat: &DVector<f64>,
    sigma2_hat: f64,
) -> Vec<f64> {
    let q = delta_hat.len();
    let p = v_hat.nrows() - q;
    (0..q)
        .map(|k| sigma2_hat * (-2.0 * delta_hat[k]).exp() * v_hat[(p + k, p + k)])
        .collect()
}

/// Standard normal quantile (Acklam's rational approximation, |error| < 2e-9).
fn normal_quantile(prob: f64) -> f64 {
    assert!(prob > 0.0 && prob < 1.0);
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    let p_low = 0.02425;
    if prob < p_low {
        let u = (-2.0 * prob.ln()).sqrt();
        (((((C[0] * u + C[1]) * u + C[2]) * u + C[3]) * u + C[4]) * u + C[5])
            / ((((D[0] * u + D[1]) * u + D[2]) * u + D[3]) * u + 1.0)
    } else if prob <= 1.0 - p_low {
        let u = prob - 0.5;
        let r = u * u;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * u
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -normal_quantile(1.0 - prob)
    }
}

/// `estimate +- z sqrt(variance)` at the given confidence level.
pub fn confidence_interval(estimate: f64, variance: f64, level: f64) -> Result<(f64, f64)> {
    if variance < 0.0 {
        return Err(Error::validation(format!(
            "variance must be nonnegative, got {variance}"
        )));
    }
    if !(0.0 < level && level < 1.0) {
        return Err(Error::validation("confidence level must be in (0, 1)"));
    }
    let z = normal_quantile(0.5 + level / 2.0);
    let half = z * variance.sqrt();
    Ok((estimate - half, estimate + half))
}

/// Per-subject optimal-control traces plus their pointwise mean and 95%
/// dispersion band across subjects. A band that excludes zero flags local
/// model misspecification.
#[derive(Debug, Clone)]
pub struct ControlReport {
    pub per_subject: Vec<SubjectControls>,
    pub summary: Vec<ControlBand>,
}

#[derive(Debug, Clone)]
pub struct SubjectControls {
    pub subject_id: String,
    /// Times of the control samples (mesh points except the last).
    pub times: Vec<f64>,
    pub controls: Vec<DVector<f64>>,
}

#[derive(Debug, Clone)]
pub struct ControlBand {
    pub t: f64,
    pub mean: DVector<f64>,
    pub lo: DVector<f64>,
    pub hi: DVector<f64>,
}

/// Extracts the fitted residual controls and aggregates them pointwise over
/// the time points shared by all subjects.
pub fn residual_control_report(
    fit: &FitResult,
    population: &[SubjectData],
    mesh_refine: usize,
) -> Result<ControlReport> {
    if fit.subjects.len() != population.len() {
        return Err(Error::config("fit does not cover the population"));
    }
    let mut per_subject = Vec::with_capacity(population.len());
    for (subject, sol) in population.iter().zip(&fit.subjects) {
        let mesh = subject_mesh(subject, mesh_refine)?;
        let times: Vec<f64> = mesh.points[..mesh.n_steps()].to_vec();
        if times.len() != sol.lq.control.len() {
            return Err(Error::config(
                "control trace length does not match the mesh (same refine required)",
            ));
        }
        per_subject.push(SubjectControls {
            subject_id: subject.subject_id.clone(),
            times,
            controls: sol.lq.control.clone(),
        });
    }

    let mut summary = Vec::new();
    if let Some(first) = per_subject.first() {
        let d_u = first.controls.first().map_or(0, |u| u.len());
        let n = per_subject.len() as f64;
        for (slot, t) in first.times.iter().enumerate() {
            let mut samples = Vec::with_capacity(per_subject.len());
            let mut shared = true;
            for sc in &per_subject {
                match sc.times.get(slot) {
                    Some(tt) if *tt == *t => samples.push(&sc.controls[slot]),
                    _ => {
                        shared = false;
                        break;
                    }
                }
            }
            if !shared {
                continue;
            }
            let mut mean = DVector::zeros(d_u);
            for s in &samples {
                mean += *s;
            }
            mean /= n;
            let mut var = DVector::zeros(d_u);
            if samples.len() > 1 {
                for s in &samples {
                    let d = *s - &mean;
                    var += d.component_mul(&d);
                }
                var /= n - 1.0;
            }
            let sd = var.map(f64::sqrt);
            summary.push(ControlBand {
                t: *t,
                lo: &mean - &sd * 1.96,
                hi: &mean + &sd * 1.96,
                mean,
            });
        }
    }
    Ok(ControlReport {
        per_subject,
        summary,
    })
}
