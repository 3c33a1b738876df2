//! Fixed-step classical Runge-Kutta integration.

use nalgebra::DVector;

/// One RK4 step of size `h` for `dx/dt = f(t, x)`.
pub fn rk4_step<F>(f: &F, t: f64, x: &DVector<f64>, h: f64) -> DVector<f64>
where
    F: Fn(f64, &DVector<f64>) -> DVector<f64>,
{
    let k1 = f(t, x);
    let k2 = f(t + 0.5 * h, &(x + &k1 * (0.5 * h)));
    let k3 = f(t + 0.5 * h, &(x + &k2 * (0.5 * h)));
    let k4 = f(t + h, &(x + &k3 * h));
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

/// Integrates `dx/dt = f(t, x)` through the given time points, returning the
/// state at every point (including the initial one). Each interval is taken
/// as a single RK4 step, so callers control accuracy through the grid.
pub fn rk4_path<F>(f: &F, times: &[f64], x0: &DVector<f64>) -> Vec<DVector<f64>>
where
    F: Fn(f64, &DVector<f64>) -> DVector<f64>,
{
    let mut states = Vec::with_capacity(times.len());
    states.push(x0.clone());
    for w in times.windows(2) {
        let h = w[1] - w[0];
        let next = rk4_step(f, w[0], states.last().unwrap(), h);
        states.push(next);
    }
    states
}

/// Integrates from `t0` to `t1` with at least `min_steps` uniform steps and
/// returns only the final state.
pub fn rk4_span<F>(f: &F, t0: f64, t1: f64, x0: &DVector<f64>, min_steps: usize) -> DVector<f64>
where
    F: Fn(f64, &DVector<f64>) -> DVector<f64>,
{
    let steps = min_steps.max(1);
    let h = (t1 - t0) / steps as f64;
    let mut x = x0.clone();
    let mut t = t0;
    for _ in 0..steps {
        x = rk4_step(f, t, &x, h);
        t += h;
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_decay() {
        let f = |_t: f64, x: &DVector<f64>| -x * 0.5;
        let x0 = DVector::from_vec(vec![1.0]);
        let x1 = rk4_span(&f, 0.0, 1.0, &x0, 100);
        assert!((x1[0] - (-0.5f64).exp()).abs() < 1e-9);
    }

    #[test]
    fn fourth_order_convergence() {
        let f = |t: f64, _x: &DVector<f64>| DVector::from_vec(vec![t.cos()]);
        let x0 = DVector::from_vec(vec![0.0]);
        let coarse = (rk4_span(&f, 0.0, 2.0, &x0, 10)[0] - 2.0f64.sin()).abs();
        let fine = (rk4_span(&f, 0.0, 2.0, &x0, 20)[0] - 2.0f64.sin()).abs();
        // halving the step should shrink the error by roughly 2^4
        assert!(fine < coarse / 8.0 || fine < 1e-14);
    }

    #[test]
    fn path_hits_every_grid_point() {
        let f = |_t: f64, x: &DVector<f64>| x.clone();
        let times = [0.0, 0.1, 0.3, 0.6];
        let path = rk4_path(&f, &times, &DVector::from_vec(vec![1.0]));
        assert_eq!(path.len(), 4);
        for (t, x) in times.iter().zip(&path) {
            assert!((x[0] - t.exp()).abs() < 1e-6);
        }
    }
}
