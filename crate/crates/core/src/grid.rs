//! Per-subject discretization mesh for the tracking problem.
//!
//! The mesh always starts at `t = 0`, ends at the last observation time,
//! contains every observation time exactly, and subdivides each gap
//! uniformly. Observation weights follow the discrete-cost convention:
//! `w_k = 1/step_k` at observation indices with `k < K`, zero elsewhere,
//! and the final observation is carried by the terminal cost only.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::SubjectData;

#[derive(Debug, Clone)]
pub struct Mesh {
    /// `K+1` mesh times, `points[0] = 0`, `points[K] = t_{i,n_i}`.
    pub points: Vec<f64>,
    /// `K` step sizes.
    pub steps: Vec<f64>,
    /// `K` observation weights (`1/steps[k]` at interior observation
    /// indices, zero otherwise).
    pub weights: Vec<f64>,
    /// Extended observation vectors, zero wherever no observation sits.
    pub extended_obs: Vec<DVector<f64>>,
    /// Index of the final mesh point (which carries the last observation).
    pub final_obs_index: usize,
    /// For each mesh index, the observation number it corresponds to.
    pub obs_slot: Vec<Option<usize>>,
}

impl Mesh {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn n_steps(&self) -> usize {
        self.steps.len()
    }

    /// Mesh index of observation `j`.
    pub fn obs_index(&self, j: usize) -> usize {
        self.obs_slot
            .iter()
            .position(|slot| *slot == Some(j))
            .expect("observation indices cover all observations")
    }

    /// Fills `extended_obs` from a subject's observation rows. The mesh must
    /// have been built from the same observation times.
    pub fn attach_observations(&mut self, observations: &DMatrix<f64>) -> Result<()> {
        let d_obs = observations.ncols();
        let n_obs = observations.nrows();
        let slots = self.obs_slot.iter().flatten().count();
        if slots != n_obs {
            return Err(Error::validation(format!(
                "mesh expects {slots} observations, got {n_obs}"
            )));
        }
        self.extended_obs = self
            .obs_slot
            .iter()
            .map(|slot| match slot {
                Some(j) => observations.row(*j).transpose(),
                None => DVector::zeros(d_obs),
            })
            .collect();
        Ok(())
    }

    /// Observation vector at the final mesh point.
    pub fn final_obs(&self) -> &DVector<f64> {
        &self.extended_obs[self.final_obs_index]
    }
}

/// Builds the mesh geometry from observation times: `refine` uniform steps
/// per inter-observation gap (and over `[0, t_1]` when the first observation
/// is late). `extended_obs` is zero-filled until observations are attached.
pub fn build_mesh(times: &[f64], refine: usize) -> Result<Mesh> {
    if times.len() < 2 {
        return Err(Error::validation("need at least two observation times"));
    }
    if times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::validation("observation times must be increasing"));
    }
    if times[0] < 0.0 {
        return Err(Error::validation("observation times must be nonnegative"));
    }
    if refine == 0 {
        return Err(Error::validation("refine must be at least 1"));
    }

    let mut points = Vec::new();
    let mut obs_slot = Vec::new();
    let push_gap = |points: &mut Vec<f64>, obs_slot: &mut Vec<Option<usize>>, a: f64, b: f64| {
        for s in 1..=refine {
            let frac = s as f64 / refine as f64;
            let t = if s == refine { b } else { a + frac * (b - a) };
            points.push(t);
            obs_slot.push(None);
        }
    };

    points.push(0.0);
    if times[0] > 0.0 {
        obs_slot.push(None);
        push_gap(&mut points, &mut obs_slot, 0.0, times[0]);
        *obs_slot.last_mut().unwrap() = Some(0);
    } else {
        obs_slot.push(Some(0));
    }
    for j in 1..times.len() {
        push_gap(&mut points, &mut obs_slot, times[j - 1], times[j]);
        *obs_slot.last_mut().unwrap() = Some(j);
    }

    let steps: Vec<f64> = points.windows(2).map(|w| w[1] - w[0]).collect();
    if steps.iter().any(|s| *s <= 0.0) {
        return Err(Error::numeric("mesh produced a non-positive step"));
    }
    let n_steps = steps.len();
    let weights: Vec<f64> = (0..n_steps)
        .map(|k| {
            if obs_slot[k].is_some() {
                1.0 / steps[k]
            } else {
                0.0
            }
        })
        .collect();

    let final_obs_index = points.len() - 1;
    let extended_obs = vec![DVector::zeros(1); points.len()];
    Ok(Mesh {
        points,
        steps,
        weights,
        extended_obs,
        final_obs_index,
        obs_slot,
    })
}

/// Mesh for one subject with observations attached.
pub fn subject_mesh(subject: &SubjectData, refine: usize) -> Result<Mesh> {
    let mut mesh = build_mesh(&subject.times, refine)?;
    mesh.attach_observations(&subject.observations)?;
    Ok(mesh)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn observation_grid_is_identity_mesh() {
        let mesh = build_mesh(&[0.0, 1.0, 2.0], 1).unwrap();
        assert_eq!(mesh.points, vec![0.0, 1.0, 2.0]);
        assert_eq!(mesh.weights, vec![1.0, 1.0]);
        assert_eq!(mesh.steps, vec![1.0, 1.0]);
        assert_eq!(mesh.final_obs_index, 2);
    }

    #[test]
    fn refine_subdivides_uniformly() {
        let mesh = build_mesh(&[0.0, 2.0], 4).unwrap();
        assert_eq!(mesh.points, vec![0.0, 0.5, 1.0, 1.5, 2.0]);
        assert_eq!(mesh.weights[0], 2.0);
        assert!(mesh.weights[1..].iter().all(|w| *w == 0.0));
    }

    #[test]
    fn observation_times_are_preserved_exactly() {
        let times = [0.0, 0.3, 1.7, 9.25];
        let mesh = build_mesh(&times, 7).unwrap();
        for (j, t) in times.iter().enumerate() {
            let k = mesh.obs_index(j);
            assert_eq!(mesh.points[k], *t);
        }
        // sum of steps telescopes to the last observation time
        let total: f64 = mesh.steps.iter().sum();
        assert!((total - 9.25).abs() < 1e-12);
    }

    #[test]
    fn weight_step_products() {
        let mesh = build_mesh(&[0.0, 1.0, 3.0, 3.5], 3).unwrap();
        for k in 0..mesh.n_steps() {
            let p = mesh.steps[k] * mesh.weights[k];
            if mesh.obs_slot[k].is_some() {
                assert!((p - 1.0).abs() < 1e-12);
            } else {
                assert_eq!(p, 0.0);
            }
        }
    }

    #[test]
    fn late_first_observation_extends_to_zero() {
        let mesh = build_mesh(&[7.0, 100.0, 200.0, 270.0, 330.0], 40).unwrap();
        assert_eq!(mesh.points[0], 0.0);
        assert_eq!(mesh.len(), 1 + 5 * 40);
        assert!(mesh.len() >= 200, "roughly 200 discretization points");
        let longest_gap: f64 = 100.0 - 7.0;
        let max_step = mesh.steps.iter().cloned().fold(0.0, f64::max);
        assert!(max_step <= longest_gap / 40.0 + 1e-12);
        // t = 0 carries no observation
        assert_eq!(mesh.obs_slot[0], None);
        assert_eq!(mesh.obs_slot[mesh.obs_index(0)], Some(0));
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(build_mesh(&[0.0, 1.0], 0).is_err());
        assert!(build_mesh(&[1.0, 1.0], 2).is_err());
        assert!(build_mesh(&[2.0, 1.0], 2).is_err());
        assert!(build_mesh(&[0.5], 2).is_err());
    }

    #[test]
    fn attach_checks_row_count() {
        let mut mesh = build_mesh(&[0.0, 1.0], 2).unwrap();
        assert!(mesh.attach_observations(&DMatrix::zeros(3, 1)).is_err());
        assert!(mesh.attach_observations(&DMatrix::zeros(2, 1)).is_ok());
    }
}
