//! Forward diffusion: Euler-Maruyama simulation, generator evaluation and
//! exit-time detection.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Drift coefficient b of the base diffusion.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum BaseDrift {
    Zero,
    Constant(Vec<f64>),
    /// `b(x) = scale * x`
    LinearScale(f64),
}

/// Dispersion coefficient sigma of the base diffusion.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum BaseDispersion {
    Zero,
    /// `sigma = c * I` (rectangular identity for d != d_W)
    ScalarIdentity(f64),
    /// constant matrix, row-major, d x d_W
    Matrix(Vec<Vec<f64>>),
}

/// Coefficients of the forward SDE `dB = b(B) dt + sigma(B) dW`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiffusionSpec {
    pub dim: usize,
    pub noise_dim: usize,
    pub drift: BaseDrift,
    pub dispersion: BaseDispersion,
}

impl DiffusionSpec {
    pub fn new(dim: usize, noise_dim: usize, drift: BaseDrift, dispersion: BaseDispersion) -> Self {
        DiffusionSpec {
            dim,
            noise_dim,
            drift,
            dispersion,
        }
    }

    /// Standard 1-D Brownian motion.
    pub fn brownian_1d() -> Self {
        Self::new(1, 1, BaseDrift::Zero, BaseDispersion::ScalarIdentity(1.0))
    }

    pub fn drift_at(&self, x: &[f64]) -> DVector<f64> {
        match &self.drift {
            BaseDrift::Zero => DVector::zeros(self.dim),
            BaseDrift::Constant(v) => DVector::from_column_slice(v),
            BaseDrift::LinearScale(a) => *a * DVector::from_column_slice(x),
        }
    }

    pub fn dispersion_at(&self, _x: &[f64]) -> DMatrix<f64> {
        match &self.dispersion {
            BaseDispersion::Zero => DMatrix::zeros(self.dim, self.noise_dim),
            BaseDispersion::ScalarIdentity(c) => {
                let mut m = DMatrix::zeros(self.dim, self.noise_dim);
                for i in 0..self.dim.min(self.noise_dim) {
                    m[(i, i)] = *c;
                }
                m
            }
            BaseDispersion::Matrix(rows) => {
                let mut m = DMatrix::zeros(self.dim, self.noise_dim);
                for (i, row) in rows.iter().enumerate() {
                    for (j, &v) in row.iter().enumerate() {
                        m[(i, j)] = v;
                    }
                }
                m
            }
        }
    }

    /// Supremum of the Frobenius norm of sigma (constant dispersions).
    pub fn sigma_sup(&self) -> f64 {
        self.dispersion_at(&vec![0.0; self.dim]).norm()
    }

    /// Largest entry magnitude of sigma sigma^T, used by the CFL condition.
    pub fn sigma_sq_sup(&self) -> f64 {
        let s = self.dispersion_at(&vec![0.0; self.dim]);
        let ss = &s * s.transpose();
        ss.amax()
    }

    /// Generator `L h = 1/2 (sigma sigma^T)_{ij} d2_ij h + b_i d_i h`
    /// with central differences.
    pub fn generator_apply<F: Fn(&[f64]) -> f64>(&self, h: F, x: &[f64]) -> f64 {
        let d = self.dim;
        let xnorm: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let step = 1e-4 * (1.0 + xnorm);
        let sigma = self.dispersion_at(x);
        let a = &sigma * sigma.transpose();
        let b = self.drift_at(x);
        let f0 = h(x);
        let mut xp = x.to_vec();
        let mut acc = 0.0;
        for i in 0..d {
            xp[i] = x[i] + step;
            let fp = h(&xp);
            xp[i] = x[i] - step;
            let fm = h(&xp);
            xp[i] = x[i];
            acc += 0.5 * a[(i, i)] * (fp - 2.0 * f0 + fm) / (step * step);
            acc += b[i] * (fp - fm) / (2.0 * step);
        }
        for i in 0..d {
            for j in (i + 1)..d {
                xp[i] = x[i] + step;
                xp[j] = x[j] + step;
                let fpp = h(&xp);
                xp[j] = x[j] - step;
                let fpm = h(&xp);
                xp[i] = x[i] - step;
                xp[j] = x[j] + step;
                let fmp = h(&xp);
                xp[j] = x[j] - step;
                let fmm = h(&xp);
                xp[i] = x[i];
                xp[j] = x[j];
                acc += a[(i, j)] * (fpp - fpm - fmp + fmm) / (4.0 * step * step);
            }
        }
        acc
    }
}

/// One simulated path: grid, Brownian increments, the base path, and
/// optionally the assembled solution processes.
#[derive(Debug, Clone)]
pub struct PathBundle {
    /// t_0 = 0 < ... < t_N
    pub times: Vec<f64>,
    /// N x d_W
    pub dw: DMatrix<f64>,
    /// (N+1) x d
    pub base: DMatrix<f64>,
    /// (N+1) x n when assembled
    pub x: Option<DMatrix<f64>>,
    /// per time level, n x d_W, when assembled
    pub z: Option<Vec<DMatrix<f64>>>,
    pub seed: u64,
    pub stream: u64,
}

impl PathBundle {
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn terminal_base(&self) -> Vec<f64> {
        self.base.row(self.base.nrows() - 1).transpose().as_slice().to_vec()
    }

    /// CSV export: `t, B1..Bd[, X1..Xn[, Z11..Znk row-major]]`.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let d = self.base.ncols();
        out.push('t');
        for i in 0..d {
            out.push_str(&format!(",B{}", i + 1));
        }
        if let Some(x) = &self.x {
            for i in 0..x.ncols() {
                out.push_str(&format!(",X{}", i + 1));
            }
        }
        if let Some(z) = &self.z {
            let (n, k) = (z[0].nrows(), z[0].ncols());
            for i in 0..n {
                for j in 0..k {
                    out.push_str(&format!(",Z{}{}", i + 1, j + 1));
                }
            }
        }
        out.push('\n');
        for (row, &t) in self.times.iter().enumerate() {
            out.push_str(&format!("{t}"));
            for c in 0..d {
                out.push_str(&format!(",{}", self.base[(row, c)]));
            }
            if let Some(x) = &self.x {
                for c in 0..x.ncols() {
                    out.push_str(&format!(",{}", x[(row, c)]));
                }
            }
            if let Some(z) = &self.z {
                let zt = &z[row];
                for i in 0..zt.nrows() {
                    for j in 0..zt.ncols() {
                        out.push_str(&format!(",{}", zt[(i, j)]));
                    }
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Uniform grid `0 = t_0 < ... < t_n = horizon`.
pub fn uniform_grid(horizon: f64, steps: usize) -> Vec<f64> {
    (0..=steps)
        .map(|k| horizon * k as f64 / steps.max(1) as f64)
        .collect()
}

/// RNG for path `stream` of a seeded family; independent streams per path.
pub fn path_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Euler-Maruyama simulation of the base diffusion on `grid` with
/// reproducible `(seed, stream)`-determined noise.
pub fn simulate_diffusion(
    spec: &DiffusionSpec,
    start: &[f64],
    grid: &[f64],
    seed: u64,
    stream: u64,
) -> Result<PathBundle> {
    if start.len() != spec.dim {
        return Err(Error::DimensionMismatch {
            expected: spec.dim,
            got: start.len(),
        });
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config("time grid must be strictly increasing".into()));
    }
    let n = grid.len() - 1;
    let mut rng = path_rng(seed, stream);
    let mut dw = DMatrix::zeros(n, spec.noise_dim);
    for k in 0..n {
        let sdt = (grid[k + 1] - grid[k]).sqrt();
        for j in 0..spec.noise_dim {
            let g: f64 = StandardNormal.sample(&mut rng);
            dw[(k, j)] = sdt * g;
        }
    }
    let bundle = drive_path(spec, start, grid, dw, seed, stream)?;
    Ok(bundle)
}

/// Runs the Euler recursion for given increments (shared-noise coupling
/// reuses the same `dw` with a different start).
pub fn drive_path(
    spec: &DiffusionSpec,
    start: &[f64],
    grid: &[f64],
    dw: DMatrix<f64>,
    seed: u64,
    stream: u64,
) -> Result<PathBundle> {
    let n = grid.len() - 1;
    let mut base = DMatrix::zeros(n + 1, spec.dim);
    for (i, &v) in start.iter().enumerate() {
        base[(0, i)] = v;
    }
    let mut cur = start.to_vec();
    for k in 0..n {
        let dt = grid[k + 1] - grid[k];
        let b = spec.drift_at(&cur);
        let s = spec.dispersion_at(&cur);
        let dwk = dw.row(k).transpose();
        let incr = &s * dwk;
        for i in 0..spec.dim {
            cur[i] += b[i] * dt + incr[i];
            if !cur[i].is_finite() {
                return Err(Error::NonFinite {
                    what: "diffusion step",
                    step: k,
                });
            }
            base[(k + 1, i)] = cur[i];
        }
    }
    Ok(PathBundle {
        times: grid.to_vec(),
        dw,
        base,
        x: None,
        z: None,
        seed,
        stream,
    })
}

/// Outcome of the first exit from a closed box.
#[derive(Debug, Clone, PartialEq)]
pub enum ExitOutcome {
    Exited {
        /// first grid index outside the open interior
        index: usize,
        /// crossing time, linearly interpolated between straddling grid points
        time: f64,
        /// crossing point placed on the boundary
        point: Vec<f64>,
    },
    /// no exit before the end of the grid
    Censored,
}

/// First time the path leaves the closed box `lo..hi`; the crossing point is
/// located by linear interpolation between the straddling grid points.
pub fn exit_time(path: &PathBundle, lo: &[f64], hi: &[f64]) -> ExitOutcome {
    let d = path.base.ncols();
    let interior = |row: usize| -> bool {
        (0..d).all(|i| path.base[(row, i)] > lo[i] && path.base[(row, i)] < hi[i])
    };
    if !interior(0) {
        let point: Vec<f64> = (0..d).map(|i| path.base[(0, i)]).collect();
        return ExitOutcome::Exited {
            index: 0,
            time: path.times[0],
            point,
        };
    }
    for row in 1..path.base.nrows() {
        if !interior(row) {
            // fraction of the step at which the first coordinate crosses
            let mut theta = 1.0f64;
            for i in 0..d {
                let prev = path.base[(row - 1, i)];
                let next = path.base[(row, i)];
                for bound in [lo[i], hi[i]] {
                    if (next - bound) * (prev - bound) < 0.0 {
                        theta = theta.min((bound - prev) / (next - prev));
                    } else if next == bound {
                        theta = theta.min(1.0);
                    }
                }
            }
            let point: Vec<f64> = (0..d)
                .map(|i| {
                    let prev = path.base[(row - 1, i)];
                    let next = path.base[(row, i)];
                    (prev + theta * (next - prev)).clamp(lo[i], hi[i])
                })
                .collect();
            let time = path.times[row - 1] + theta * (path.times[row] - path.times[row - 1]);
            return ExitOutcome::Exited {
                index: row,
                time,
                point,
            };
        }
    }
    ExitOutcome::Censored
}

/// Streaming Monte Carlo of the mean exit time from a box (no path storage).
/// Returns `(mean, standard error, censored count)`.
pub fn mean_exit_time(
    spec: &DiffusionSpec,
    start: &[f64],
    lo: &[f64],
    hi: &[f64],
    dt: f64,
    t_max: f64,
    n_paths: usize,
    seed: u64,
) -> Result<(f64, f64, usize)> {
    let steps = (t_max / dt).ceil() as usize;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut censored = 0usize;
    for p in 0..n_paths {
        let mut rng = path_rng(seed, p as u64);
        let mut cur = start.to_vec();
        let mut tau = t_max;
        let mut exited = false;
        'time: for k in 0..steps {
            let b = spec.drift_at(&cur);
            let s = spec.dispersion_at(&cur);
            let sdt = dt.sqrt();
            let mut prev = cur.clone();
            std::mem::swap(&mut prev, &mut cur);
            for i in 0..spec.dim {
                let mut incr = b[i] * dt;
                for j in 0..spec.noise_dim {
                    let g: f64 = StandardNormal.sample(&mut rng);
                    incr += s[(i, j)] * sdt * g;
                }
                cur[i] = prev[i] + incr;
            }
            for i in 0..spec.dim {
                if cur[i] <= lo[i] || cur[i] >= hi[i] {
                    let bound = if cur[i] <= lo[i] { lo[i] } else { hi[i] };
                    let theta = if cur[i] != prev[i] {
                        ((bound - prev[i]) / (cur[i] - prev[i])).clamp(0.0, 1.0)
                    } else {
                        1.0
                    };
                    tau = k as f64 * dt + theta * dt;
                    exited = true;
                    break 'time;
                }
            }
        }
        if !exited {
            censored += 1;
        }
        sum += tau;
        sum_sq += tau * tau;
    }
    let mean = sum / n_paths as f64;
    let var = (sum_sq / n_paths as f64 - mean * mean).max(0.0);
    let se = (var / n_paths as f64).sqrt();
    Ok((mean, se, censored))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ode_case_is_exact() {
        let spec = DiffusionSpec::new(1, 1, BaseDrift::Constant(vec![1.0]), BaseDispersion::Zero);
        let grid = uniform_grid(1.0, 100);
        let p = simulate_diffusion(&spec, &[0.0], &grid, 1, 0).unwrap();
        assert!((p.base[(100, 0)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_steps_path_is_start() {
        let spec = DiffusionSpec::brownian_1d();
        let p = simulate_diffusion(&spec, &[0.7], &[0.0], 1, 0).unwrap();
        assert_eq!(p.base.nrows(), 1);
        assert_eq!(p.base[(0, 0)], 0.7);
    }

    #[test]
    fn brownian_variance_matches_horizon() {
        let spec = DiffusionSpec::brownian_1d();
        let grid = uniform_grid(1.0, 50);
        let n = 10_000;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for p in 0..n {
            let path = simulate_diffusion(&spec, &[0.0], &grid, 42, p).unwrap();
            let v = path.base[(50, 0)];
            sum += v;
            sum_sq += v * v;
        }
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean * mean;
        // sampling error of the variance estimator: var * sqrt(2/n)
        let se = 1.0 * (2.0 / n as f64).sqrt();
        assert!((var - 1.0).abs() < 3.0 * se, "var {var}");
    }

    #[test]
    fn seed_determinism() {
        let spec = DiffusionSpec::brownian_1d();
        let grid = uniform_grid(1.0, 64);
        let a = simulate_diffusion(&spec, &[0.0], &grid, 9, 3).unwrap();
        let b = simulate_diffusion(&spec, &[0.0], &grid, 9, 3).unwrap();
        assert_eq!(a.base, b.base);
        assert_eq!(a.dw, b.dw);
    }

    #[test]
    fn generator_examples() {
        let spec = DiffusionSpec::brownian_1d();
        let v = spec.generator_apply(|x| x[0] * x[0], &[0.3]);
        assert!((v - 1.0).abs() < 1e-6);

        let spec = DiffusionSpec::new(1, 1, BaseDrift::Constant(vec![1.0]), BaseDispersion::Zero);
        let v = spec.generator_apply(|x| x[0], &[0.0]);
        assert!((v - 1.0).abs() < 1e-9);

        let spec = DiffusionSpec::new(1, 1, BaseDrift::Zero, BaseDispersion::ScalarIdentity(2.0));
        let v = spec.generator_apply(|x| x[0] * x[0], &[0.0]);
        assert!((v - 4.0).abs() < 1e-6);
    }

    #[test]
    fn exit_time_cases() {
        let spec = DiffusionSpec::new(1, 1, BaseDrift::Zero, BaseDispersion::Zero);
        let grid = uniform_grid(1.0, 10);
        // constant interior path never exits
        let p = simulate_diffusion(&spec, &[0.5], &grid, 1, 0).unwrap();
        assert_eq!(exit_time(&p, &[0.0], &[1.0]), ExitOutcome::Censored);
        // start on the boundary exits at index 0
        let p = simulate_diffusion(&spec, &[1.0], &grid, 1, 0).unwrap();
        match exit_time(&p, &[0.0], &[1.0]) {
            ExitOutcome::Exited { index, .. } => assert_eq!(index, 0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn mean_exit_time_brownian_interval() {
        // E[tau] from x in (0,1) for generator (1/2) d^2/dx^2 is x(1-x)
        let spec = DiffusionSpec::brownian_1d();
        let (mean, se, censored) =
            mean_exit_time(&spec, &[0.5], &[0.0], &[1.0], 1e-4, 8.0, 2000, 5).unwrap();
        assert_eq!(censored, 0);
        // allow the documented discrete-monitoring bias ~0.58 sqrt(dt)
        let bias = 0.6 * (1e-4f64).sqrt();
        assert!(
            (mean - 0.25).abs() < 3.0 * se + 2.0 * bias,
            "mean {mean} se {se}"
        );
    }

    #[test]
    fn weak_error_decays_linearly_for_ou() {
        // b(x) = -x, sigma = 1: E[B_T^2] = e^{-2T} x0^2 + (1 - e^{-2T})/2
        let spec = DiffusionSpec::new(
            1,
            1,
            BaseDrift::LinearScale(-1.0),
            BaseDispersion::ScalarIdentity(1.0),
        );
        let t = 1.0f64;
        let x0 = 2.0f64;
        let exact = (-2.0 * t).exp() * x0 * x0 + (1.0 - (-2.0 * t).exp()) / 2.0;
        let n_paths = 100_000;
        let mut errs = Vec::new();
        for steps in [4usize, 8, 16] {
            let grid = uniform_grid(t, steps);
            let mut sum = 0.0;
            for p in 0..n_paths {
                let path = simulate_diffusion(&spec, &[x0], &grid, 11, p as u64).unwrap();
                let v = path.base[(steps, 0)];
                sum += v * v;
            }
            errs.push((sum / n_paths as f64 - exact).abs());
        }
        // first-order weak error: halving dt roughly halves the error
        assert!(errs[0] > 2.0 * errs[2], "errors {errs:?}");
        let ratio = errs[1] / errs[0];
        assert!(ratio > 0.3 && ratio < 0.75, "ratio {ratio} errors {errs:?}");
    }

    #[test]
    fn shared_noise_flow_ratio_is_one() {
        let spec = DiffusionSpec::brownian_1d();
        let grid = uniform_grid(1.0, 100);
        let a = simulate_diffusion(&spec, &[0.0], &grid, 3, 7).unwrap();
        let b = drive_path(&spec, &[0.25], &grid, a.dw.clone(), 3, 7).unwrap();
        let diff = b.base[(100, 0)] - a.base[(100, 0)];
        assert!((diff - 0.25).abs() < 1e-14);
    }
}
