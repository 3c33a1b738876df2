//! Derivative-free simplex minimization (Nelder-Mead).
//!
//! Standard coefficients (reflection 1, expansion 2, contraction 0.5,
//! shrink 0.5). Termination requires both a small simplex diameter and a
//! small spread of function values, so degenerate flat directions do not
//! stall the stopping test. The search is fully deterministic.

use nalgebra::DVector;

#[derive(Debug, Clone)]
pub struct NelderMead {
    /// Scale of the initial simplex: vertex `i` is `x0 + step*max(1,|x0_i|)*e_i`.
    pub initial_step: f64,
    /// Cap on objective evaluations.
    pub max_evals: usize,
    /// Simplex diameter (infinity norm around the best vertex) tolerance.
    pub tol_x: f64,
    /// Spread `f_worst - f_best` tolerance.
    pub tol_f: f64,
}

impl Default for NelderMead {
    fn default() -> Self {
        NelderMead {
            initial_step: 0.1,
            max_evals: 1000,
            tol_x: 1e-6,
            tol_f: 1e-10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimResult {
    pub x: DVector<f64>,
    pub f: f64,
    pub evals: usize,
    pub iterations: usize,
    pub converged: bool,
}

impl NelderMead {
    pub fn minimize<F>(&self, mut objective: F, start: &DVector<f64>) -> OptimResult
    where
        F: FnMut(&DVector<f64>) -> f64,
    {
        let dim = start.len();
        assert!(dim >= 1, "cannot optimize over an empty parameter vector");

        let mut evals = 0usize;
        let mut eval = |x: &DVector<f64>, evals: &mut usize| -> f64 {
            *evals += 1;
            let f = objective(x);
            if f.is_nan() {
                f64::INFINITY
            } else {
                f
            }
        };

        // Simplex of dim+1 vertices, kept sorted by objective value.
        let mut simplex: Vec<(DVector<f64>, f64)> = Vec::with_capacity(dim + 1);
        let f0 = eval(start, &mut evals);
        simplex.push((start.clone(), f0));
        for i in 0..dim {
            let mut v = start.clone();
            v[i] += self.initial_step * start[i].abs().max(1.0);
            let f = eval(&v, &mut evals);
            simplex.push((v, f));
        }
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));

        let mut iterations = 0usize;
        let mut converged = false;
        while evals < self.max_evals {
            iterations += 1;

            let diameter = simplex[1..]
                .iter()
                .map(|(v, _)| (v - &simplex[0].0).amax())
                .fold(0.0f64, f64::max);
            let spread = simplex[dim].1 - simplex[0].1;
            if diameter < self.tol_x && spread < self.tol_f {
                converged = true;
                break;
            }

            // Centroid of all vertices but the worst.
            let mut centroid = DVector::zeros(dim);
            for (v, _) in &simplex[..dim] {
                centroid += v;
            }
            centroid /= dim as f64;

            let worst = simplex[dim].clone();
            let reflected = &centroid + (&centroid - &worst.0);
            let f_ref = eval(&reflected, &mut evals);

            if f_ref < simplex[0].1 {
                let expanded = &centroid + (&reflected - &centroid) * 2.0;
                let f_exp = eval(&expanded, &mut evals);
                simplex[dim] = if f_exp < f_ref {
                    (expanded, f_exp)
                } else {
                    (reflected, f_ref)
                };
            } else if f_ref < simplex[dim - 1].1 {
                simplex[dim] = (reflected, f_ref);
            } else {
                // Contract toward the better of the worst vertex and the
                // reflected point.
                let (outside, base_f) = if f_ref < worst.1 {
                    (true, f_ref)
                } else {
                    (false, worst.1)
                };
                let contracted = if outside {
                    &centroid + (&reflected - &centroid) * 0.5
                } else {
                    &centroid + (&worst.0 - &centroid) * 0.5
                };
                let f_con = eval(&contracted, &mut evals);
                if f_con < base_f {
                    simplex[dim] = (contracted, f_con);
                } else {
                    // Shrink everything toward the best vertex.
                    let best = simplex[0].0.clone();
                    for entry in simplex.iter_mut().skip(1) {
                        entry.0 = &best + (&entry.0 - &best) * 0.5;
                        entry.1 = eval(&entry.0, &mut evals);
                    }
                }
            }
            simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        }

        OptimResult {
            x: simplex[0].0.clone(),
            f: simplex[0].1,
            evals,
            iterations,
            converged,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_bowl() {
        let nm = NelderMead {
            max_evals: 2000,
            ..NelderMead::default()
        };
        let res = nm.minimize(
            |x| (x[0] - 1.5).powi(2) + 3.0 * (x[1] + 0.5).powi(2),
            &DVector::from_vec(vec![0.0, 0.0]),
        );
        assert!(res.converged);
        assert!((res.x[0] - 1.5).abs() < 1e-5);
        assert!((res.x[1] + 0.5).abs() < 1e-5);
    }

    #[test]
    fn rosenbrock_2d() {
        let nm = NelderMead {
            max_evals: 5000,
            ..NelderMead::default()
        };
        let res = nm.minimize(
            |x| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2),
            &DVector::from_vec(vec![-1.2, 1.0]),
        );
        assert!((res.x[0] - 1.0).abs() < 1e-4);
        assert!((res.x[1] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn one_dimensional() {
        let nm = NelderMead::default();
        let res = nm.minimize(|x| (x[0] - 2.0).powi(2), &DVector::from_vec(vec![0.0]));
        assert!(res.converged);
        assert!((res.x[0] - 2.0).abs() < 1e-5);
    }

    #[test]
    fn infinite_values_are_skirted() {
        let nm = NelderMead {
            max_evals: 2000,
            ..NelderMead::default()
        };
        let res = nm.minimize(
            |x| {
                if x[0] < -0.5 {
                    f64::INFINITY
                } else {
                    (x[0] - 1.0).powi(2)
                }
            },
            &DVector::from_vec(vec![0.0]),
        );
        assert!((res.x[0] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn deterministic() {
        let nm = NelderMead::default();
        let f = |x: &DVector<f64>| x[0].sin() + x[0] * x[0] * 0.1;
        let a = nm.minimize(f, &DVector::from_vec(vec![1.0]));
        let b = nm.minimize(f, &DVector::from_vec(vec![1.0]));
        assert_eq!(a.x[0].to_bits(), b.x[0].to_bits());
        assert_eq!(a.evals, b.evals);
    }
}
