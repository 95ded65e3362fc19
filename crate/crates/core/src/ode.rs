//! Adaptive explicit Runge-Kutta integration (Dormand-Prince 5(4)).
//!
//! Drives the geodesic and parallel-transport equations. The embedded
//! fourth-order solution provides the local error estimate; steps are
//! accepted when the mixed absolute/relative error stays below tolerance.

use crate::error::{Error, Result};

/// Butcher tableau of the Dormand-Prince 5(4) pair.
const A: [[f64; 6]; 6] = [
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
const B5: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

#[derive(Debug, Clone, Copy)]
pub struct OdeOptions {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_steps: usize,
}

impl Default for OdeOptions {
    fn default() -> Self {
        OdeOptions {
            rel_tol: 1e-10,
            abs_tol: 1e-12,
            max_steps: 100_000,
        }
    }
}

/// Integrates `dy/dt = f(t, y)` from `t0` to `t1` (requires `t1 > t0`).
///
/// `guard`, when present, is checked after every accepted step; if it
/// rejects the state, integration stops with [`Error::Escape`] carrying the
/// time of the last accepted state inside the guarded region.
pub fn integrate<F, G>(
    mut f: F,
    y0: &[f64],
    t0: f64,
    t1: f64,
    opts: OdeOptions,
    guard: Option<G>,
) -> Result<Vec<f64>>
where
    F: FnMut(f64, &[f64], &mut [f64]),
    G: Fn(&[f64]) -> bool,
{
    let dim = y0.len();
    let mut y = y0.to_vec();
    let mut t = t0;
    if t1 <= t0 {
        return Ok(y);
    }
    if let Some(g) = &guard {
        if !g(&y) {
            return Err(Error::Escape { exit_time: t0 });
        }
    }

    let mut k = vec![vec![0.0; dim]; 7];
    let mut h = ((t1 - t0) / 16.0).min(0.1).max(1e-12);
    let mut y_stage = vec![0.0; dim];
    let mut y_new = vec![0.0; dim];

    for _ in 0..opts.max_steps {
        if t >= t1 {
            return Ok(y);
        }
        h = h.min(t1 - t);

        f(t, &y, &mut k[0]);
        for stage in 0..6 {
            for i in 0..dim {
                let mut acc = 0.0;
                for (j, kj) in k.iter().enumerate().take(stage + 1) {
                    acc += A[stage][j] * kj[i];
                }
                y_stage[i] = y[i] + h * acc;
            }
            let c = [0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0][stage];
            f(t + c * h, &y_stage, &mut k[stage + 1]);
        }

        let mut err = 0.0f64;
        for i in 0..dim {
            let mut acc5 = 0.0;
            let mut acc4 = 0.0;
            for (j, kj) in k.iter().enumerate() {
                acc5 += B5[j] * kj[i];
                acc4 += B4[j] * kj[i];
            }
            y_new[i] = y[i] + h * acc5;
            let scale = opts.abs_tol + opts.rel_tol * y[i].abs().max(y_new[i].abs());
            err = err.max((h * (acc5 - acc4)).abs() / scale);
        }

        if !err.is_finite() {
            return Err(Error::NonFinite {
                what: "ode step",
                step: 0,
            });
        }

        if err <= 1.0 {
            t += h;
            y.copy_from_slice(&y_new);
            if let Some(g) = &guard {
                if !g(&y) {
                    return Err(Error::Escape { exit_time: t });
                }
            }
        }
        // Standard PI-free step controller with safety factor.
        let factor = if err == 0.0 {
            5.0
        } else {
            (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
        };
        h *= factor;
        if h < 1e-14 {
            return Err(Error::Convergence {
                what: "adaptive ode step size underflow",
                iterations: opts.max_steps,
                residual: err,
            });
        }
    }
    Err(Error::Convergence {
        what: "ode integration",
        iterations: opts.max_steps,
        residual: (t1 - t).abs(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_growth() {
        let y = integrate(
            |_t, y, dy| dy[0] = y[0],
            &[1.0],
            0.0,
            1.0,
            OdeOptions::default(),
            None::<fn(&[f64]) -> bool>,
        )
        .unwrap();
        assert!((y[0] - std::f64::consts::E).abs() < 1e-9);
    }

    #[test]
    fn harmonic_oscillator_energy() {
        let y = integrate(
            |_t, y, dy| {
                dy[0] = y[1];
                dy[1] = -y[0];
            },
            &[1.0, 0.0],
            0.0,
            20.0,
            OdeOptions::default(),
            None::<fn(&[f64]) -> bool>,
        )
        .unwrap();
        let energy = y[0] * y[0] + y[1] * y[1];
        assert!((energy - 1.0).abs() < 1e-7);
    }

    #[test]
    fn guard_reports_escape() {
        let err = integrate(
            |_t, _y, dy| dy[0] = 1.0,
            &[0.0],
            0.0,
            10.0,
            OdeOptions::default(),
            Some(|y: &[f64]| y[0] < 1.0),
        )
        .unwrap_err();
        match err {
            Error::Escape { exit_time } => assert!(exit_time <= 10.0),
            other => panic!("expected escape, got {other}"),
        }
    }
}
