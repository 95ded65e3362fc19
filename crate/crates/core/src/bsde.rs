//! Backward-solution assembly and the regression-based cross solver.
//!
//! The assembled route reads `X_t = u(T - t, B_t)` and
//! `Z_t = grad_x u(T - t, B_t) sigma(B_t)` off a solved field. The
//! independent route is least-squares Monte Carlo: backward induction of
//! conditional expectations by polynomial regression on the forward
//! diffusion, with an inner Picard loop absorbing the z-dependence of the
//! drift. Both target the same truncated equation, so the gradient-bound
//! certificate upgrades both to the original one.

use nalgebra::{DMatrix, DVector};

use crate::drift::{DriftField, GammaDrift};
use crate::error::{Error, Result};
use crate::forward::{simulate_diffusion, uniform_grid, DiffusionSpec, PathBundle};
use crate::geometry::{adaptive_simpson, ManifoldChart, MetricExpr};
use crate::pdesolver::{SpaceTimeField, TerminalFn, ZField};
use crate::regression::{features, monomial_exponents, ols};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    PdeAssembled,
    Lsmc,
}

/// A solved ensemble: every path carries its X and Z processes.
#[derive(Debug, Clone)]
pub struct BsdeSolution {
    pub paths: Vec<PathBundle>,
    pub provenance: Provenance,
    /// value of X at time zero
    pub x0: DVector<f64>,
    /// Monte Carlo standard error of `x0` (zero for the assembled route)
    pub x0_se: f64,
}

/// Interpolates the solved field and its Z-field onto forward paths.
/// The terminal level evaluates the terminal function directly, so
/// `X_T = F(B_T)` holds by construction.
pub fn assemble_solution(
    field: &SpaceTimeField,
    zfield: &ZField,
    mut paths: Vec<PathBundle>,
) -> Result<BsdeSolution> {
    let horizon = field.times[field.times.len() - 1];
    let n = field.n;
    for path in paths.iter_mut() {
        if path.base.ncols() != field.grid.dim() {
            return Err(Error::DimensionMismatch {
                expected: field.grid.dim(),
                got: path.base.ncols(),
            });
        }
        let rows = path.base.nrows();
        let mut x = DMatrix::zeros(rows, n);
        let mut z = Vec::with_capacity(rows);
        for k in 0..rows {
            let t = path.times[k];
            let b: Vec<f64> = path.base.row(k).transpose().as_slice().to_vec();
            let xv = if k + 1 == rows {
                field.eval_terminal(&b)
            } else {
                field.eval(horizon - t, &b)?
            };
            for c in 0..n {
                x[(k, c)] = xv[c];
            }
            z.push(zfield.eval((horizon - t).max(0.0), &b)?);
        }
        path.x = Some(x);
        path.z = Some(z);
    }
    let x0 = paths
        .first()
        .and_then(|p| p.x.as_ref().map(|x| x.row(0).transpose().clone_owned()))
        .unwrap_or_else(|| DVector::zeros(n));
    Ok(BsdeSolution {
        paths,
        provenance: Provenance::PdeAssembled,
        x0,
        x0_se: 0.0,
    })
}

/// Summary of the pathwise integrated residual of the original equation.
#[derive(Debug, Clone)]
pub struct ResidualSummary {
    pub min: f64,
    pub median: f64,
    pub max: f64,
    pub per_path: Vec<f64>,
}

/// Per-path max deviation from the Euler form of the equation:
/// `X_{k+1} - X_k - Z_k dW_k - (-1/2 Gamma_{jk}(X_k)([Z_k]^k|[Z_k]^j) + f(B_k, X_k, Z_k)) dt`.
pub fn residual_check(
    sol: &BsdeSolution,
    chart: &ManifoldChart,
    drift: &DriftField,
) -> Result<ResidualSummary> {
    let n = chart.dim();
    let mut per_path = Vec::with_capacity(sol.paths.len());
    for path in &sol.paths {
        let x = path.x.as_ref().ok_or(Error::Statistics { needed: 1, got: 0 })?;
        let z = path.z.as_ref().ok_or(Error::Statistics { needed: 1, got: 0 })?;
        let mut worst = 0.0f64;
        for k in 0..path.steps() {
            let dt = path.times[k + 1] - path.times[k];
            let xk: Vec<f64> = (0..n).map(|c| x[(k, c)]).collect();
            let bk: Vec<f64> = (0..path.base.ncols()).map(|c| path.base[(k, c)]).collect();
            let zk = &z[k];
            let dwk = path.dw.row(k).transpose();
            let f = drift.eval(&bk, &xk, zk);
            let quad = if chart.is_flat() {
                DVector::zeros(n)
            } else {
                let gamma = chart.christoffel(&xk)?;
                let row_gram = zk * zk.transpose();
                DVector::from_iterator(
                    n,
                    (0..n).map(|i| {
                        let mut acc = 0.0;
                        for j in 0..n {
                            for l in 0..n {
                                acc += gamma.gamma[i][(j, l)] * row_gram[(j, l)];
                            }
                        }
                        acc
                    }),
                )
            };
            let zdw = zk * dwk;
            let mut r2 = 0.0;
            for c in 0..n {
                let drift_c = -0.5 * quad[c] + f[c];
                let res = x[(k + 1, c)] - x[(k, c)] - zdw[c] - drift_c * dt;
                r2 += res * res;
            }
            worst = worst.max(r2.sqrt());
        }
        per_path.push(worst);
    }
    let mut sorted = per_path.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(ResidualSummary {
        min: sorted[0],
        median: sorted[sorted.len() / 2],
        max: sorted[sorted.len() - 1],
        per_path,
    })
}

/// Least-squares Monte Carlo solver for the truncated equation.
///
/// Backward induction `X_k = E[X_{k+1} | B_k] + gamma(B_k, X_k, Z_k) dt`
/// with `Z_k = E[X_{k+1} dW_k^T | B_k] / dt`; conditional expectations are
/// polynomial regressions in `B_k`, and the z-dependence of the drift is
/// resolved by a fixed-point loop of at most ten iterations per step.
pub fn lsmc_solve(
    spec: &DiffusionSpec,
    gamma: &GammaDrift,
    terminal: &TerminalFn,
    start: &[f64],
    horizon: f64,
    steps: usize,
    path_count: usize,
    degree: usize,
    seed: u64,
) -> Result<BsdeSolution> {
    if path_count < 100 {
        return Err(Error::Statistics {
            needed: 100,
            got: path_count,
        });
    }
    let n = gamma.chart.dim();
    let d = spec.dim;
    let d_w = spec.noise_dim;
    let grid = uniform_grid(horizon, steps);
    let dt = horizon / steps as f64;
    let mut paths = Vec::with_capacity(path_count);
    for p in 0..path_count {
        paths.push(simulate_diffusion(spec, start, &grid, seed, p as u64)?);
    }
    let exps = monomial_exponents(d, degree);
    let m = exps.len();

    // per-path storage of the current backward level
    let mut x_cur: Vec<DVector<f64>> = paths
        .iter()
        .map(|p| {
            let b = p.terminal_base();
            terminal(&b)
        })
        .collect();
    let mut x_hist: Vec<Vec<DVector<f64>>> = vec![Vec::new(); path_count];
    let mut z_hist: Vec<Vec<DMatrix<f64>>> = vec![Vec::new(); path_count];
    for (p, xv) in x_cur.iter().enumerate() {
        x_hist[p].push(xv.clone());
        z_hist[p].push(DMatrix::zeros(n, d_w));
    }

    let mut x0 = DVector::zeros(n);
    for k in (0..steps).rev() {
        let mut x_next = vec![DVector::zeros(n); path_count];
        let mut z_k = vec![DMatrix::zeros(n, d_w); path_count];
        if k == 0 {
            // all paths share B_0: conditional expectations are plain means
            let mut mean = DVector::zeros(n);
            for xv in &x_cur {
                mean += xv;
            }
            mean /= path_count as f64;
            let mut zmean = DMatrix::zeros(n, d_w);
            for (p, xv) in x_cur.iter().enumerate() {
                let dw = paths[p].dw.row(0).clone_owned();
                zmean += (xv - &mean) * dw / dt;
            }
            zmean /= path_count as f64;
            let bk = start.to_vec();
            x0 = picard_step(gamma, &bk, &mean, &zmean, dt)?;
            for p in 0..path_count {
                x_next[p] = x0.clone();
                z_k[p] = zmean.clone();
            }
        } else {
            // design matrix on B_k
            let mut design = DMatrix::zeros(path_count, m);
            for (p, path) in paths.iter().enumerate() {
                let b: Vec<f64> = (0..d).map(|c| path.base[(k, c)]).collect();
                let phi = features(&b, &exps);
                for (j, v) in phi.iter().enumerate() {
                    design[(p, j)] = *v;
                }
            }
            // conditional mean of each X component
            let mut cond_mean = vec![DVector::zeros(n); path_count];
            for c in 0..n {
                let y = DVector::from_iterator(path_count, x_cur.iter().map(|x| x[c]));
                let fit = ols(&design, &y)?;
                let pred = &design * &fit.coeffs;
                for p in 0..path_count {
                    cond_mean[p][c] = pred[p];
                }
            }
            // conditional Z: regress the martingale increment
            // (X_{k+1} - E[X_{k+1}|B_k]) dW^T / dt; centring by the fitted
            // mean is a control variate that removes the dominant variance,
            // which would otherwise bias the quadratic drift
            for c in 0..n {
                for j in 0..d_w {
                    let y = DVector::from_iterator(
                        path_count,
                        x_cur
                            .iter()
                            .enumerate()
                            .map(|(p, x)| (x[c] - cond_mean[p][c]) * paths[p].dw[(k, j)] / dt),
                    );
                    let fit = ols(&design, &y)?;
                    let pred = &design * &fit.coeffs;
                    for p in 0..path_count {
                        z_k[p][(c, j)] = pred[p];
                    }
                }
            }
            for p in 0..path_count {
                let b: Vec<f64> = (0..d).map(|c| paths[p].base[(k, c)]).collect();
                x_next[p] = picard_step(gamma, &b, &cond_mean[p], &z_k[p], dt)?;
            }
        }
        x_cur = x_next;
        for p in 0..path_count {
            x_hist[p].push(x_cur[p].clone());
            z_hist[p].push(z_k[p].clone());
        }
    }
    // sampling error of the value estimator: the regression projections
    // preserve means, so x0 is the sample mean of the pathwise functional
    // F(B_T) + sum_k gamma dt; its dispersion gives the standard error
    let mut pathwise = Vec::with_capacity(path_count);
    for (p, path) in paths.iter().enumerate() {
        let mut v = terminal(&path.terminal_base());
        for k in 0..steps {
            let hist_idx = steps - k; // backward history: index of level k
            let b: Vec<f64> = (0..d).map(|c| path.base[(k, c)]).collect();
            let xs: Vec<f64> = x_hist[p][hist_idx].as_slice().to_vec();
            let g = gamma.eval(&b, &xs, &z_hist[p][hist_idx])?;
            v += dt * g;
        }
        pathwise.push(v);
    }
    let mut mean = DVector::zeros(n);
    for v in &pathwise {
        mean += v;
    }
    mean /= path_count as f64;
    let mut var = 0.0;
    for v in &pathwise {
        var += (v - &mean).norm_squared();
    }
    let se = (var / (path_count as f64 * (path_count as f64 - 1.0))).sqrt();
    finalize_lsmc(paths, x_hist, z_hist, x0, se, n, d_w)
}

fn picard_step(
    gamma: &GammaDrift,
    b: &[f64],
    cond_mean: &DVector<f64>,
    z: &DMatrix<f64>,
    dt: f64,
) -> Result<DVector<f64>> {
    let mut x = cond_mean.clone();
    for _ in 0..10 {
        let xs: Vec<f64> = x.as_slice().to_vec();
        let g = gamma.eval(b, &xs, z)?;
        let x_new = cond_mean + dt * g;
        let delta = (&x_new - &x).norm();
        x = x_new;
        if delta < 1e-6 {
            return Ok(x);
        }
    }
    let xs: Vec<f64> = x.as_slice().to_vec();
    let g = gamma.eval(b, &xs, z)?;
    let delta = (cond_mean + dt * g - &x).norm();
    if delta < 1e-6 {
        Ok(x)
    } else {
        Err(Error::Convergence {
            what: "lsmc picard iteration",
            iterations: 10,
            residual: delta,
        })
    }
}

fn finalize_lsmc(
    mut paths: Vec<PathBundle>,
    x_hist: Vec<Vec<DVector<f64>>>,
    z_hist: Vec<Vec<DMatrix<f64>>>,
    x0: DVector<f64>,
    se: f64,
    n: usize,
    _d_w: usize,
) -> Result<BsdeSolution> {
    for (p, path) in paths.iter_mut().enumerate() {
        let rows = path.base.nrows();
        let mut x = DMatrix::zeros(rows, n);
        let mut z = Vec::with_capacity(rows);
        // histories were pushed backward in time
        for k in 0..rows {
            let hist_idx = rows - 1 - k;
            let xv = &x_hist[p][hist_idx];
            for c in 0..n {
                x[(k, c)] = xv[c];
            }
            z.push(z_hist[p][hist_idx].clone());
        }
        path.x = Some(x);
        path.z = Some(z);
    }
    Ok(BsdeSolution {
        paths,
        provenance: Provenance::Lsmc,
        x0,
        x0_se: se,
    })
}

/// Arclength reparametrisation of a 1-D metric chart. In `s`-coordinates the
/// Christoffel term of the equation vanishes, and the drift transforms by
/// the chain rule.
#[derive(Debug, Clone)]
pub struct ArclengthReduction {
    pub metric: MetricExpr,
    pub x_lo: f64,
    pub x_hi: f64,
}

impl ArclengthReduction {
    pub fn new(chart: &ManifoldChart) -> Result<Self> {
        if chart.dim() != 1 {
            return Err(Error::Config("arclength reduction needs a 1-D chart".into()));
        }
        let metric = match &chart.kind {
            crate::geometry::ChartKind::Custom { metric, .. } => metric[0][0].clone(),
            crate::geometry::ChartKind::Flat { .. } => MetricExpr::constant(1.0, 1),
            _ => return Err(Error::Config("unsupported chart for reduction".into())),
        };
        Ok(ArclengthReduction {
            metric,
            x_lo: chart.bounds.lo[0],
            x_hi: chart.bounds.hi[0],
        })
    }

    fn sqrt_g(&self, x: f64) -> Result<f64> {
        let g = self.metric.eval(&[x]);
        if g <= 0.0 {
            return Err(Error::NonPositiveMetric { x, value: g });
        }
        Ok(g.sqrt())
    }

    /// `s(x) = int_0^x sqrt(g)`, adaptive quadrature.
    pub fn s_of(&self, x: f64) -> Result<f64> {
        let f = |u: f64| self.sqrt_g(u);
        if x >= 0.0 {
            adaptive_simpson(&f, 0.0, x, 1e-12)
        } else {
            Ok(-adaptive_simpson(&f, x, 0.0, 1e-12)?)
        }
    }

    /// Inverse map by Newton iteration with bisection safeguarding.
    pub fn x_of(&self, s: f64) -> Result<f64> {
        let mut lo = self.x_lo;
        let mut hi = self.x_hi;
        let mut x = 0.5 * (lo + hi);
        for _ in 0..200 {
            let sx = self.s_of(x)?;
            let err = sx - s;
            if err.abs() < 1e-12 {
                return Ok(x);
            }
            if err > 0.0 {
                hi = x;
            } else {
                lo = x;
            }
            let dsdx = self.sqrt_g(x)?;
            let newton = x - err / dsdx;
            x = if newton > lo && newton < hi {
                newton
            } else {
                0.5 * (lo + hi)
            };
        }
        Err(Error::Convergence {
            what: "arclength inverse",
            iterations: 200,
            residual: (self.s_of(x)? - s).abs(),
        })
    }

    /// Range of the arclength coordinate over the chart box.
    pub fn s_bounds(&self) -> Result<(f64, f64)> {
        Ok((self.s_of(self.x_lo)?, self.s_of(self.x_hi)?))
    }

    /// Transformed drift `f^(b, s, z^) = sqrt(g)(x(s)) f(b, x(s), z^/sqrt(g)(x(s)))`.
    pub fn transform_drift(&self, field: &DriftField) -> DriftField {
        let red = self.clone();
        let base = field.clone();
        let eval = std::sync::Arc::new(move |b: &[f64], s: &[f64], z: &DMatrix<f64>| {
            let x = match red.x_of(s[0]) {
                Ok(v) => v,
                Err(_) => return DVector::zeros(1),
            };
            let sg = match red.sqrt_g(x) {
                Ok(v) => v,
                Err(_) => return DVector::zeros(1),
            };
            let z_back = z / sg;
            sg * base.eval(b, &[x], &z_back)
        });
        DriftField::custom(
            eval,
            field.z_dependent,
            field.lip_l,
            field.lip_l2,
            field.x0.clone(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drift::TruncationParams;
    use crate::pdesolver::{gradient_field, solve_parabolic, GridSpec, Scheme};
    use std::sync::Arc;

    fn flat_linear_setup() -> (DiffusionSpec, GammaDrift, TerminalFn, GridSpec) {
        let spec = DiffusionSpec::brownian_1d();
        let gamma = GammaDrift::new(
            ManifoldChart::flat(1),
            None,
            DriftField::constant(vec![0.3]),
            TruncationParams::new(0.3).unwrap(),
        );
        let terminal: TerminalFn = Arc::new(|x: &[f64]| DVector::from_vec(vec![x[0]]));
        let grid = GridSpec {
            x_lo: vec![-4.0],
            x_hi: vec![5.0],
            nx: vec![226],
            dt: 4e-4,
            save_every: 5,
            horizon: 1.0,
        };
        (spec, gamma, terminal, grid)
    }

    #[test]
    fn assembled_solution_terminal_and_residual() {
        let (spec, gamma, terminal, grid) = flat_linear_setup();
        let field = solve_parabolic(&spec, &gamma, &terminal, &grid, Scheme::Explicit).unwrap();
        let zf = gradient_field(&field, &spec);
        let tgrid = uniform_grid(1.0, 500);
        let mut paths = Vec::new();
        for p in 0..64 {
            paths.push(simulate_diffusion(&spec, &[0.5], &tgrid, 11, p).unwrap());
        }
        let sol = assemble_solution(&field, &zf, paths).unwrap();
        // X_T = F(B_T) by construction
        for path in &sol.paths {
            let x = path.x.as_ref().unwrap();
            let last = x.nrows() - 1;
            let b = path.base[(last, 0)];
            assert!((x[(last, 0)] - b).abs() < 1e-12);
        }
        // X_0 = u(T, 0.5) = 0.5 - 0.3
        assert!((sol.x0[0] - 0.2).abs() < 1e-3);
        // residual of the flat affine case is tiny (the scheme is exact)
        let summary = residual_check(&sol, &ManifoldChart::flat(1), &DriftField::constant(vec![0.3])).unwrap();
        assert!(summary.median < 1e-6, "median {}", summary.median);
        // negative control: corrupt Z by a factor 2
        let mut corrupted = sol.clone();
        for p in corrupted.paths.iter_mut() {
            if let Some(z) = p.z.as_mut() {
                for m in z.iter_mut() {
                    *m *= 2.0;
                }
            }
        }
        let bad = residual_check(&corrupted, &ManifoldChart::flat(1), &DriftField::constant(vec![0.3])).unwrap();
        assert!(bad.median > 100.0 * summary.median.max(1e-12), "bad {}", bad.median);
    }

    #[test]
    fn lsmc_flat_martingale() {
        let spec = DiffusionSpec::brownian_1d();
        let gamma = GammaDrift::new(
            ManifoldChart::flat(1),
            None,
            DriftField::zero(1),
            TruncationParams::new(0.3).unwrap(),
        );
        let terminal: TerminalFn = Arc::new(|x: &[f64]| DVector::from_vec(vec![x[0]]));
        let sol = lsmc_solve(&spec, &gamma, &terminal, &[0.4], 1.0, 20, 2000, 2, 3).unwrap();
        assert!((sol.x0[0] - 0.4).abs() < 3.0 * sol.x0_se.max(5e-3), "x0 {}", sol.x0[0]);
        // Z should be near 1
        let z = sol.paths[0].z.as_ref().unwrap();
        let mid = z.len() / 2;
        assert!((z[mid][(0, 0)] - 1.0).abs() < 0.2, "z {}", z[mid][(0, 0)]);
    }

    #[test]
    fn lsmc_constant_drift_matches_closed_form() {
        let (spec, gamma, terminal, _) = flat_linear_setup();
        let sol = lsmc_solve(&spec, &gamma, &terminal, &[0.5], 1.0, 25, 4000, 2, 5).unwrap();
        assert!((sol.x0[0] - 0.2).abs() < 2e-2, "x0 {}", sol.x0[0]);
    }

    #[test]
    fn lsmc_constant_terminal_is_exact() {
        let spec = DiffusionSpec::brownian_1d();
        let gamma = GammaDrift::new(
            ManifoldChart::flat(1),
            None,
            DriftField::zero(1),
            TruncationParams::new(0.3).unwrap(),
        );
        let terminal: TerminalFn = Arc::new(|_x: &[f64]| DVector::from_vec(vec![0.7]));
        let sol = lsmc_solve(&spec, &gamma, &terminal, &[0.0], 1.0, 10, 500, 2, 7).unwrap();
        assert!((sol.x0[0] - 0.7).abs() < 1e-10);
        for path in &sol.paths {
            let x = path.x.as_ref().unwrap();
            for k in 0..x.nrows() {
                assert!((x[(k, 0)] - 0.7).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn arclength_reduction_examples() {
        // g = 1: identity
        let flat = ManifoldChart::flat_bounded(1, vec![-2.0], vec![2.0]);
        let red = ArclengthReduction::new(&flat).unwrap();
        assert!((red.s_of(0.7).unwrap() - 0.7).abs() < 1e-12);

        // g = e^{2x}: s(x) = e^x - 1
        let g = MetricExpr {
            terms: vec![crate::geometry::MetricTerm {
                coef: 1.0,
                powers: vec![0],
                exp_coef: vec![2.0],
            }],
        };
        let chart = ManifoldChart::interval(g, -2.0, 2.0);
        let red = ArclengthReduction::new(&chart).unwrap();
        let s1 = red.s_of(1.0).unwrap();
        assert!((s1 - (std::f64::consts::E - 1.0)).abs() < 1e-10, "s(1) = {s1}");
        // round trip
        for &x in &[-1.5, -0.3, 0.0, 0.9, 1.7] {
            let s = red.s_of(x).unwrap();
            let back = red.x_of(s).unwrap();
            assert!((back - x).abs() < 1e-8, "x {x} back {back}");
        }
    }

    #[test]
    fn transformed_drift_chain_rule() {
        let g = MetricExpr {
            terms: vec![crate::geometry::MetricTerm {
                coef: 1.0,
                powers: vec![0],
                exp_coef: vec![2.0],
            }],
        };
        let chart = ManifoldChart::interval(g, -2.0, 2.0);
        let red = ArclengthReduction::new(&chart).unwrap();
        let f = DriftField::constant(vec![0.2]);
        let fhat = red.transform_drift(&f);
        // at s = e - 1 (x = 1), sqrt(g) = e: fhat = 0.2 e
        let z = DMatrix::zeros(1, 1);
        let v = fhat.eval(&[0.0], &[std::f64::consts::E - 1.0], &z);
        assert!((v[0] - 0.2 * std::f64::consts::E).abs() < 1e-8);
    }
}
