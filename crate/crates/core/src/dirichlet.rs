//! Exit-time problems on a box: the random-terminal backward equation via
//! first exits, the Monte Carlo Dirichlet solver `phi(x) = X_0^x`, the
//! parabolic relaxation (harmonic map heat flow with drift) towards the
//! stationary system, the tension-field residual, and the Dirichlet energy.
//!
//! The flow uses the variational normalisation: the tension operator is the
//! flat base Laplacian plus the target-chart quadratic Christoffel term, so
//! with a gradient drift `f = D_2 G` the flow is the L^2 gradient flow of
//! `1/2 int |grad u|^2 + int G` and the energy decreases step by step.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};

use crate::convexity::ConvexDomain;
use crate::drift::{DriftField, GammaDrift, PotentialKind};
use crate::error::{Error, Result};
use crate::forward::{path_rng, DiffusionSpec};
use crate::geometry::ManifoldChart;
use crate::pdesolver::GridSpec;
use crate::regression::{features, monomial_exponents, ols};

/// Boundary data and coefficients of the Dirichlet problem on a box.
pub struct DirichletProblem {
    /// base box
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub spec: DiffusionSpec,
    /// boundary map into the target domain
    pub boundary: std::sync::Arc<dyn Fn(&[f64]) -> DVector<f64> + Send + Sync>,
    pub chart: ManifoldChart,
    pub domain: Option<ConvexDomain>,
    pub drift: DriftField,
}

impl DirichletProblem {
    /// Checks the boundary map lands in the target domain (sampled).
    pub fn validate(&self, samples: usize) -> Result<()> {
        if let Some(dom) = &self.domain {
            for i in 0..samples {
                let t = i as f64 / samples.max(1) as f64;
                for axis in 0..self.lo.len() {
                    for &end in &[self.lo[axis], self.hi[axis]] {
                        let mut x = vec![0.0; self.lo.len()];
                        for a in 0..self.lo.len() {
                            x[a] = self.lo[a] + t * (self.hi[a] - self.lo[a]);
                        }
                        x[axis] = end;
                        let v = (self.boundary)(&x);
                        if dom.chi(v.as_slice())? > dom.level + 1e-9 {
                            return Err(Error::Config(format!(
                                "boundary value at {x:?} leaves the target domain"
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Largest safe exponent `rho` with `E e^{rho tau} < infinity` for the exit
/// time of the diffusion from the box: the principal Dirichlet eigenvalue
/// of `-L` (closed form for constant coefficients, separable over axes),
/// returned with a 0.9 safety factor.
pub fn exit_rho_estimate(spec: &DiffusionSpec, lo: &[f64], hi: &[f64]) -> Result<f64> {
    let d = spec.dim;
    if d > 2 {
        return Err(Error::Config("exit-time boxes support d <= 2".into()));
    }
    let mid: Vec<f64> = lo.iter().zip(hi).map(|(a, b)| 0.5 * (a + b)).collect();
    let sigma = spec.dispersion_at(&mid);
    let a = &sigma * sigma.transpose();
    // uniform ellipticity and constant coefficients are required for the
    // closed form; probe a few points
    for frac in [0.25, 0.5, 0.75] {
        let p: Vec<f64> = lo
            .iter()
            .zip(hi)
            .map(|(a, b)| a + frac * (b - a))
            .collect();
        let s = spec.dispersion_at(&p);
        if ((&s * s.transpose()) - &a).amax() > 1e-12 {
            return Err(Error::Config(
                "exit eigenvalue needs constant dispersion on the box".into(),
            ));
        }
    }
    let b = spec.drift_at(&mid);
    for i in 0..d {
        if a[(i, i)] <= 0.0 {
            return Err(Error::Config("diffusion is not elliptic on the box".into()));
        }
    }
    let mut lambda = 0.0;
    for i in 0..d {
        let len = hi[i] - lo[i];
        let s2 = a[(i, i)];
        lambda += b[i] * b[i] / (2.0 * s2) + s2 * std::f64::consts::PI.powi(2) / (2.0 * len * len);
    }
    Ok(0.9 * lambda)
}

/// Monte Carlo Dirichlet value at an interior start point.
///
/// Paths run to their first exit; past the exit the value is frozen at the
/// boundary datum and Z at zero, mirroring the bounded-stopping-time
/// construction. The backward recursion is the regression solver of the
/// truncated drift, restricted at each level to the paths still inside.
#[allow(clippy::too_many_arguments)]
pub fn solve_dirichlet_mc(
    problem: &DirichletProblem,
    gamma: &GammaDrift,
    start: &[f64],
    dt: f64,
    t_max: f64,
    path_count: usize,
    degree: usize,
    seed: u64,
) -> Result<(DVector<f64>, f64)> {
    let d = problem.spec.dim;
    let n = problem.chart.dim();
    let d_w = problem.spec.noise_dim;
    let steps = (t_max / dt).round() as usize;
    // simulate with exit freezing; store only what the recursion needs
    let mut bases = vec![vec![0.0f64; (steps + 1) * d]; path_count];
    let mut dws = vec![vec![0.0f64; steps * d_w]; path_count];
    let mut exit_level = vec![steps; path_count];
    let mut exit_value: Vec<DVector<f64>> = vec![DVector::zeros(n); path_count];
    let mut censored = 0usize;
    for p in 0..path_count {
        let mut rng = path_rng(seed, p as u64);
        let mut cur = start.to_vec();
        bases[p][..d].copy_from_slice(&cur);
        let mut exited = false;
        for k in 0..steps {
            let b = problem.spec.drift_at(&cur);
            let s = problem.spec.dispersion_at(&cur);
            let sdt = dt.sqrt();
            let prev = cur.clone();
            let mut dwk = vec![0.0; d_w];
            for dv in dwk.iter_mut() {
                let g: f64 = StandardNormal.sample(&mut rng);
                *dv = sdt * g;
            }
            for (j, dv) in dwk.iter().enumerate() {
                dws[p][k * d_w + j] = *dv;
            }
            if !exited {
                for i in 0..d {
                    let mut incr = b[i] * dt;
                    for j in 0..d_w {
                        incr += s[(i, j)] * dwk[j];
                    }
                    cur[i] = prev[i] + incr;
                }
                // exit detection with linear interpolation onto the boundary
                let mut crossed = false;
                for i in 0..d {
                    if cur[i] <= problem.lo[i] || cur[i] >= problem.hi[i] {
                        crossed = true;
                    }
                }
                if crossed {
                    let mut theta = 1.0f64;
                    for i in 0..d {
                        for bound in [problem.lo[i], problem.hi[i]] {
                            if (cur[i] - bound) * (prev[i] - bound) < 0.0 {
                                theta = theta.min((bound - prev[i]) / (cur[i] - prev[i]));
                            }
                        }
                    }
                    let mut hit = vec![0.0; d];
                    for i in 0..d {
                        hit[i] = (prev[i] + theta * (cur[i] - prev[i]))
                            .clamp(problem.lo[i], problem.hi[i]);
                    }
                    exit_level[p] = k + 1;
                    exit_value[p] = (problem.boundary)(&hit);
                    exited = true;
                    cur = hit;
                }
            }
            bases[p][(k + 1) * d..(k + 2) * d].copy_from_slice(&cur);
        }
        if !exited {
            censored += 1;
            // censored paths take the boundary value of the projection
            let mut proj = cur.clone();
            for i in 0..d {
                let to_lo = cur[i] - problem.lo[i];
                let to_hi = problem.hi[i] - cur[i];
                if to_lo < to_hi {
                    proj[i] = problem.lo[i];
                } else {
                    proj[i] = problem.hi[i];
                }
            }
            exit_value[p] = (problem.boundary)(&proj);
        }
    }
    let censor_rate = censored as f64 / path_count as f64;
    if censor_rate > 1e-3 {
        return Err(Error::Horizon {
            censored: censor_rate,
            allowed: 1e-3,
        });
    }

    // backward recursion over still-inside paths; drift contributions are
    // accumulated pathwise so the value dispersion gives an honest
    // standard error (the regression projections preserve means)
    let exps = monomial_exponents(d, degree);
    let mut x_cur: Vec<DVector<f64>> = exit_value.clone();
    let mut drift_acc: Vec<DVector<f64>> = vec![DVector::zeros(n); path_count];
    for k in (1..steps).rev() {
        let inside: Vec<usize> = (0..path_count).filter(|&p| exit_level[p] > k).collect();
        if inside.len() > exps.len() * 4 {
            let m = exps.len();
            let mut design = DMatrix::zeros(inside.len(), m);
            for (row, &p) in inside.iter().enumerate() {
                let b = &bases[p][k * d..(k + 1) * d];
                let phi = features(b, &exps);
                for (j, v) in phi.iter().enumerate() {
                    design[(row, j)] = *v;
                }
            }
            let mut cond = vec![DVector::zeros(n); inside.len()];
            for c in 0..n {
                let y = DVector::from_iterator(inside.len(), inside.iter().map(|&p| x_cur[p][c]));
                let fit = ols(&design, &y)?;
                let pred = &design * &fit.coeffs;
                for (row, _) in inside.iter().enumerate() {
                    cond[row][c] = pred[row];
                }
            }
            // Z by centred regression (control variate against the fitted
            // mean; the raw estimator's variance would bias the quadratic
            // Christoffel term)
            let mut zreg = vec![DMatrix::zeros(n, d_w); inside.len()];
            for c in 0..n {
                for j in 0..d_w {
                    let y = DVector::from_iterator(
                        inside.len(),
                        inside.iter().enumerate().map(|(row, &p)| {
                            (x_cur[p][c] - cond[row][c]) * dws[p][k * d_w + j] / dt
                        }),
                    );
                    let fit = ols(&design, &y)?;
                    let pred = &design * &fit.coeffs;
                    for (row, _) in inside.iter().enumerate() {
                        zreg[row][(c, j)] = pred[row];
                    }
                }
            }
            for (row, &p) in inside.iter().enumerate() {
                let b = &bases[p][k * d..(k + 1) * d];
                let mut x = cond[row].clone();
                for _ in 0..10 {
                    let xs: Vec<f64> = x.as_slice().to_vec();
                    let g = gamma.eval(b, &xs, &zreg[row])?;
                    let x_new = &cond[row] + dt * g;
                    let delta = (&x_new - &x).norm();
                    x = x_new;
                    if delta < 1e-6 {
                        break;
                    }
                }
                let xs: Vec<f64> = x.as_slice().to_vec();
                drift_acc[p] += dt * gamma.eval(b, &xs, &zreg[row])?;
                x_cur[p] = x;
            }
        }
        // exited paths keep their frozen boundary value (Z = 0, drift off)
    }
    // level 0: all paths inside, shared start
    let mut mean = DVector::zeros(n);
    for xv in &x_cur {
        mean += xv;
    }
    mean /= path_count as f64;
    let mut zmean = DMatrix::zeros(n, d_w);
    for (p, xv) in x_cur.iter().enumerate() {
        for j in 0..d_w {
            zmean.column_mut(j).axpy(dws[p][j] / dt, &(xv - &mean), 1.0);
        }
    }
    zmean /= path_count as f64;
    let mut x0 = mean.clone();
    for _ in 0..10 {
        let xs: Vec<f64> = x0.as_slice().to_vec();
        let g = gamma.eval(start, &xs, &zmean)?;
        let x_new = &mean + dt * g;
        if (&x_new - &x0).norm() < 1e-6 {
            x0 = x_new;
            break;
        }
        x0 = x_new;
    }
    // pathwise value functional: frozen terminal plus accumulated drift
    let mut pmean = DVector::zeros(n);
    let pathwise: Vec<DVector<f64>> = (0..path_count)
        .map(|p| &exit_value[p] + &drift_acc[p])
        .collect();
    for v in &pathwise {
        pmean += v;
    }
    pmean /= path_count as f64;
    let mut var = 0.0;
    for v in &pathwise {
        var += (v - &pmean).norm_squared();
    }
    let se = (var / (path_count as f64 * (path_count as f64 - 1.0))).sqrt();
    Ok((x0, se))
}

/// Grid map of the flow or a candidate harmonic map.
#[derive(Debug, Clone)]
pub struct GridMap {
    pub grid: GridSpec,
    /// node-major, n components per node
    pub values: Vec<f64>,
    pub n: usize,
}

impl GridMap {
    pub fn value_at(&self, node: usize) -> DVector<f64> {
        DVector::from_column_slice(&self.values[node * self.n..(node + 1) * self.n])
    }

    pub fn to_csv(&self) -> String {
        let d = self.grid.dim();
        let mut out = String::from("x1");
        for a in 1..d {
            out.push_str(&format!(",x{}", a + 1));
        }
        for c in 0..self.n {
            out.push_str(&format!(",u{}", c + 1));
        }
        out.push('\n');
        for node in 0..self.grid.node_count() {
            let x = self.grid.node_coords(node);
            out.push_str(
                &x.iter()
                    .map(|v| format!("{v}"))
                    .collect::<Vec<_>>()
                    .join(","),
            );
            for c in 0..self.n {
                out.push_str(&format!(",{}", self.values[node * self.n + c]));
            }
            out.push('\n');
        }
        out
    }
}

/// Diagnostics of one relaxation run.
#[derive(Debug, Clone)]
pub struct FlowDiagnostics {
    pub converged: bool,
    pub steps: usize,
    pub final_update: f64,
    /// energy recorded every step (empty when no potential is tracked)
    pub energy_trace: Vec<f64>,
}

/// Tension operator at the interior nodes: flat base Laplacian of the map
/// plus the target Christoffel quadratic term, minus the drift.
fn tension_at(
    grid: &GridSpec,
    values: &[f64],
    n: usize,
    node: usize,
    chart: &ManifoldChart,
    drift: &DriftField,
    sigma: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    let d = grid.dim();
    let u = &values[node * n..(node + 1) * n];
    let mut lap = DVector::zeros(n);
    let mut du = DMatrix::zeros(n, d);
    match d {
        1 => {
            let dx = grid.dx(0);
            let i = node;
            for c in 0..n {
                let um = values[(i - 1) * n + c];
                let u0 = values[i * n + c];
                let up = values[(i + 1) * n + c];
                lap[c] = (up - 2.0 * u0 + um) / (dx * dx);
                du[(c, 0)] = (up - um) / (2.0 * dx);
            }
        }
        2 => {
            let n1 = grid.nx[1];
            let i = node / n1;
            let j = node % n1;
            let (dx0, dx1) = (grid.dx(0), grid.dx(1));
            let idx = |i: usize, j: usize| (i * n1 + j) * n;
            for c in 0..n {
                let u0 = values[idx(i, j) + c];
                let uxp = values[idx(i + 1, j) + c];
                let uxm = values[idx(i - 1, j) + c];
                let uyp = values[idx(i, j + 1) + c];
                let uym = values[idx(i, j - 1) + c];
                lap[c] = (uxp - 2.0 * u0 + uxm) / (dx0 * dx0)
                    + (uyp - 2.0 * u0 + uym) / (dx1 * dx1);
                du[(c, 0)] = (uxp - uxm) / (2.0 * dx0);
                du[(c, 1)] = (uyp - uym) / (2.0 * dx1);
            }
        }
        _ => unreachable!(),
    }
    let mut quad = DVector::zeros(n);
    if !chart.is_flat() {
        let gamma = chart.christoffel(u)?;
        for alpha in 0..d {
            let col = du.column(alpha).clone_owned();
            quad += gamma.quadratic(&col, &col);
        }
    }
    let z = &du * sigma;
    let x = grid.node_coords(node);
    let f = drift.eval(&x, u, &z);
    Ok(lap + quad - f)
}

/// Runs the parabolic relaxation with boundary values pinned until the
/// sup-norm update stays below 1e-8 for ten consecutive steps or the flow
/// horizon is exhausted. Returns the map and diagnostics (a non-converged
/// run returns the partial result).
pub fn harmonic_map_flow(
    problem: &DirichletProblem,
    grid: &GridSpec,
    flow_horizon: f64,
    potential: Option<&PotentialKind>,
) -> Result<(GridMap, FlowDiagnostics)> {
    let n = problem.chart.dim();
    let d = grid.dim();
    let nodes = grid.node_count();
    let min_dx2 = (0..d).map(|a| grid.dx(a) * grid.dx(a)).fold(f64::MAX, f64::min);
    // flat Laplacian with unit coefficient: explicit stability at 0.2 dx^2
    let dt = 0.2 * min_dx2 / d as f64;
    let steps_total = (flow_horizon / dt).ceil() as usize;
    let mut values = vec![0.0f64; nodes * n];
    for node in 0..nodes {
        // initialise with the multilinear blend of the boundary data
        let x = grid.node_coords(node);
        let v = (problem.boundary)(&x);
        values[node * n..(node + 1) * n].copy_from_slice(v.as_slice());
    }
    let mid: Vec<f64> = problem
        .lo
        .iter()
        .zip(&problem.hi)
        .map(|(a, b)| 0.5 * (a + b))
        .collect();
    let sigma = problem.spec.dispersion_at(&mid);
    let mut energy_trace = Vec::new();
    if potential.is_some() {
        energy_trace.push(energy(
            &GridMap {
                grid: grid.clone(),
                values: values.clone(),
                n,
            },
            &problem.chart,
            potential,
        )?);
    }
    let mut update = f64::INFINITY;
    let mut calm_steps = 0usize;
    let mut steps_done = 0usize;
    let mut next = values.clone();
    for _ in 0..steps_total {
        steps_done += 1;
        let mut max_update = 0.0f64;
        for node in 0..nodes {
            if grid.is_boundary_node(node) {
                continue;
            }
            let t = tension_at(grid, &values, n, node, &problem.chart, &problem.drift, &sigma)?;
            for c in 0..n {
                let delta = dt * t[c];
                if !delta.is_finite() {
                    return Err(Error::BlowUp {
                        time_index: steps_done,
                        node_index: node,
                    });
                }
                next[node * n + c] = values[node * n + c] + delta;
                max_update = max_update.max(delta.abs());
            }
        }
        std::mem::swap(&mut values, &mut next);
        next.copy_from_slice(&values);
        update = max_update;
        if potential.is_some() {
            energy_trace.push(energy(
                &GridMap {
                    grid: grid.clone(),
                    values: values.clone(),
                    n,
                },
                &problem.chart,
                potential,
            )?);
        }
        if update < 1e-8 {
            calm_steps += 1;
            if calm_steps >= 10 {
                return Ok((
                    GridMap {
                        grid: grid.clone(),
                        values,
                        n,
                    },
                    FlowDiagnostics {
                        converged: true,
                        steps: steps_done,
                        final_update: update,
                        energy_trace,
                    },
                ));
            }
        } else {
            calm_steps = 0;
        }
    }
    Ok((
        GridMap {
            grid: grid.clone(),
            values,
            n,
        },
        FlowDiagnostics {
            converged: false,
            steps: steps_done,
            final_update: update,
            energy_trace,
        },
    ))
}

/// Sup over interior nodes of the Riemannian norm of the tension residual
/// `L_M u - f`.
pub fn tension_residual(
    map: &GridMap,
    problem: &DirichletProblem,
) -> Result<f64> {
    let grid = &map.grid;
    let mid: Vec<f64> = problem
        .lo
        .iter()
        .zip(&problem.hi)
        .map(|(a, b)| 0.5 * (a + b))
        .collect();
    let sigma = problem.spec.dispersion_at(&mid);
    let mut worst = 0.0f64;
    for node in 0..grid.node_count() {
        if grid.is_boundary_node(node) {
            continue;
        }
        let t = tension_at(grid, &map.values, map.n, node, &problem.chart, &problem.drift, &sigma)?;
        let u = map.value_at(node);
        let nr = problem.chart.norm_vec(u.as_slice(), t.as_slice())?;
        worst = worst.max(nr);
    }
    Ok(worst)
}

/// Dirichlet energy `1/2 int g^{ab} (d_a u | d_b u)_target + int G(x, u)`
/// by cell-midpoint gradients and trapezoid weights (flat base).
pub fn energy(
    map: &GridMap,
    chart: &ManifoldChart,
    potential: Option<&PotentialKind>,
) -> Result<f64> {
    let grid = &map.grid;
    let d = grid.dim();
    let mut total = 0.0f64;
    match d {
        1 => {
            let dx = grid.dx(0);
            for i in 0..grid.nx[0] - 1 {
                let a = map.value_at(i);
                let b = map.value_at(i + 1);
                let mid = 0.5 * (&a + &b);
                let deriv = (&b - &a) / dx;
                let g = chart.metric_unchecked(mid.as_slice());
                let dens = 0.5 * (deriv.transpose() * &g * &deriv)[0];
                total += dens * dx;
            }
            if let Some(pot) = potential {
                for i in 0..grid.nx[0] {
                    let w = if i == 0 || i == grid.nx[0] - 1 { 0.5 } else { 1.0 };
                    let x = grid.node_coords(i);
                    let u = map.value_at(i);
                    total += w * dx * pot.eval(&x, u.as_slice());
                }
            }
        }
        2 => {
            let (dx0, dx1) = (grid.dx(0), grid.dx(1));
            let n1 = grid.nx[1];
            let idx = |i: usize, j: usize| i * n1 + j;
            for i in 0..grid.nx[0] - 1 {
                for j in 0..n1 - 1 {
                    let corners = [
                        map.value_at(idx(i, j)),
                        map.value_at(idx(i + 1, j)),
                        map.value_at(idx(i, j + 1)),
                        map.value_at(idx(i + 1, j + 1)),
                    ];
                    let mid = 0.25 * (&corners[0] + &corners[1] + &corners[2] + &corners[3]);
                    let d0 = 0.5 * ((&corners[1] - &corners[0]) + (&corners[3] - &corners[2])) / dx0;
                    let d1 = 0.5 * ((&corners[2] - &corners[0]) + (&corners[3] - &corners[1])) / dx1;
                    let g = chart.metric_unchecked(mid.as_slice());
                    let dens = 0.5
                        * ((d0.transpose() * &g * &d0)[0] + (d1.transpose() * &g * &d1)[0]);
                    total += dens * dx0 * dx1;
                }
            }
            if let Some(pot) = potential {
                for i in 0..grid.nx[0] {
                    for j in 0..n1 {
                        let wi = if i == 0 || i == grid.nx[0] - 1 { 0.5 } else { 1.0 };
                        let wj = if j == 0 || j == n1 - 1 { 0.5 } else { 1.0 };
                        let x = grid.node_coords(idx(i, j));
                        let u = map.value_at(idx(i, j));
                        total += wi * wj * dx0 * dx1 * pot.eval(&x, u.as_slice());
                    }
                }
            }
        }
        _ => unreachable!(),
    }
    Ok(total)
}

impl GridSpec {
    pub fn is_boundary_node(&self, node: usize) -> bool {
        match self.dim() {
            1 => node == 0 || node == self.nx[0] - 1,
            2 => {
                let n1 = self.nx[1];
                let i = node / n1;
                let j = node % n1;
                i == 0 || i == self.nx[0] - 1 || j == 0 || j == n1 - 1
            }
            _ => unreachable!(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drift::TruncationParams;
    use std::sync::Arc;

    fn unit_interval_problem(
        chart: ManifoldChart,
        boundary: std::sync::Arc<dyn Fn(&[f64]) -> DVector<f64> + Send + Sync>,
        drift: DriftField,
    ) -> DirichletProblem {
        DirichletProblem {
            lo: vec![0.0],
            hi: vec![1.0],
            spec: DiffusionSpec::brownian_1d(),
            boundary,
            chart,
            domain: None,
            drift,
        }
    }

    fn flow_grid(nx: usize) -> GridSpec {
        GridSpec {
            x_lo: vec![0.0],
            x_hi: vec![1.0],
            nx: vec![nx],
            dt: 1.0,
            save_every: 1,
            horizon: 1.0,
        }
    }

    #[test]
    fn exit_rho_brownian_interval() {
        let spec = DiffusionSpec::brownian_1d();
        let rho = exit_rho_estimate(&spec, &[0.0], &[1.0]).unwrap();
        let expect = 0.9 * std::f64::consts::PI.powi(2) / 2.0;
        assert!((rho - expect).abs() < 1e-12);
        // doubling the interval quarters the eigenvalue
        let rho2 = exit_rho_estimate(&spec, &[0.0], &[2.0]).unwrap();
        assert!((rho2 - expect / 4.0).abs() < 1e-12);
        // sigma = 2 scales by 4 (zero drift)
        let spec2 = DiffusionSpec::new(
            1,
            1,
            crate::forward::BaseDrift::Zero,
            crate::forward::BaseDispersion::ScalarIdentity(2.0),
        );
        let rho4 = exit_rho_estimate(&spec2, &[0.0], &[1.0]).unwrap();
        assert!((rho4 - 4.0 * expect).abs() < 1e-10);
    }

    #[test]
    fn dirichlet_mc_flat_affine() {
        let chart = ManifoldChart::flat(1);
        let boundary: Arc<dyn Fn(&[f64]) -> DVector<f64> + Send + Sync> =
            Arc::new(|x: &[f64]| DVector::from_vec(vec![if x[0] > 0.5 { 1.0 } else { 0.0 }]));
        let problem = unit_interval_problem(chart.clone(), boundary, DriftField::zero(1));
        let gamma = GammaDrift::new(chart, None, DriftField::zero(1), TruncationParams::new(0.3).unwrap());
        let (x0, se) =
            solve_dirichlet_mc(&problem, &gamma, &[0.5], 1e-3, 3.0, 3000, 2, 31).unwrap();
        assert!((x0[0] - 0.5).abs() < 3.0 * se.max(0.01), "x0 {} se {se}", x0[0]);
    }

    #[test]
    fn dirichlet_mc_boundary_start_and_constant_data() {
        let chart = ManifoldChart::flat(1);
        let boundary: Arc<dyn Fn(&[f64]) -> DVector<f64> + Send + Sync> =
            Arc::new(|_x: &[f64]| DVector::from_vec(vec![0.7]));
        let problem = unit_interval_problem(chart.clone(), boundary, DriftField::zero(1));
        let gamma = GammaDrift::new(chart, None, DriftField::zero(1), TruncationParams::new(0.3).unwrap());
        let (x0, _) = solve_dirichlet_mc(&problem, &gamma, &[0.3], 1e-3, 3.0, 500, 2, 33).unwrap();
        assert!((x0[0] - 0.7).abs() < 1e-9, "constant data {}", x0[0]);
        // a start on the boundary exits immediately with the boundary value
        let (xb, _) = solve_dirichlet_mc(&problem, &gamma, &[1.0], 1e-3, 1.0, 200, 2, 35).unwrap();
        assert!((xb[0] - 0.7).abs() < 1e-12);
    }

    #[test]
    fn flow_flat_target_gives_affine_map() {
        let chart = ManifoldChart::flat(1);
        let boundary: Arc<dyn Fn(&[f64]) -> DVector<f64> + Send + Sync> =
            Arc::new(|x: &[f64]| DVector::from_vec(vec![2.0 * x[0] - 0.5]));
        let problem = unit_interval_problem(chart, boundary, DriftField::zero(1));
        let grid = flow_grid(51);
        let (map, diag) = harmonic_map_flow(&problem, &grid, 5.0, None).unwrap();
        assert!(diag.converged, "update {}", diag.final_update);
        for node in 0..grid.node_count() {
            let x = grid.node_coords(node)[0];
            assert!((map.value_at(node)[0] - (2.0 * x - 0.5)).abs() < 1e-4);
        }
        let res = tension_residual(&map, &problem).unwrap();
        assert!(res < 1e-3, "residual {res}");
    }

    #[test]
    fn flow_into_half_plane_exponential_map() {
        let chart = ManifoldChart::half_plane(-2.0, 2.0, 0.1, 10.0);
        let boundary: Arc<dyn Fn(&[f64]) -> DVector<f64> + Send + Sync> =
            Arc::new(|x: &[f64]| DVector::from_vec(vec![0.0, x[0].exp()]));
        let problem = unit_interval_problem(chart, boundary, DriftField::zero(2));
        let grid = flow_grid(101);
        let (map, diag) = harmonic_map_flow(&problem, &grid, 3.0, None).unwrap();
        assert!(diag.converged);
        let mut worst = 0.0f64;
        for node in 0..grid.node_count() {
            let x = grid.node_coords(node)[0];
            let v = map.value_at(node);
            worst = worst.max((v[0]).abs().max((v[1] - x.exp()).abs()));
        }
        assert!(worst < 1e-3, "sup error {worst}");
        let res = tension_residual(&map, &problem).unwrap();
        assert!(res < 1e-3, "tension residual {res}");
    }

    #[test]
    fn constant_boundary_stays_constant() {
        let chart = ManifoldChart::flat(2);
        let boundary: Arc<dyn Fn(&[f64]) -> DVector<f64> + Send + Sync> =
            Arc::new(|_x: &[f64]| DVector::from_vec(vec![0.3, -0.4]));
        let problem = unit_interval_problem(chart, boundary, DriftField::zero(2));
        let grid = flow_grid(31);
        let (map, diag) = harmonic_map_flow(&problem, &grid, 0.5, None).unwrap();
        assert!(diag.converged);
        for node in 0..grid.node_count() {
            let v = map.value_at(node);
            assert!((v[0] - 0.3).abs() < 1e-14 && (v[1] + 0.4).abs() < 1e-14);
        }
    }

    #[test]
    fn energy_examples() {
        let chart = ManifoldChart::flat(1);
        let grid = flow_grid(41);
        // u(x) = x: energy 1/2
        let mut values = Vec::new();
        for node in 0..grid.node_count() {
            values.push(grid.node_coords(node)[0]);
        }
        let map = GridMap { grid: grid.clone(), values, n: 1 };
        let e = energy(&map, &chart, None).unwrap();
        assert!((e - 0.5).abs() < 1e-12, "energy {e}");
        // constant map: zero
        let map0 = GridMap { grid: grid.clone(), values: vec![0.7; grid.node_count()], n: 1 };
        assert_eq!(energy(&map0, &chart, None).unwrap(), 0.0);
    }

    #[test]
    fn gradient_flow_energy_descends() {
        let chart = ManifoldChart::flat(1);
        let boundary: Arc<dyn Fn(&[f64]) -> DVector<f64> + Send + Sync> =
            Arc::new(|x: &[f64]| DVector::from_vec(vec![x[0] * (1.0 - x[0]) * 4.0 + 0.2]));
        let pot = PotentialKind::HalfNormSquared { coef: 1.0 };
        let problem = unit_interval_problem(
            chart,
            boundary,
            DriftField {
                kind: crate::drift::DriftKind::GradPotential {
                    potential: pot.clone(),
                },
                z_dependent: false,
                lip_l: 1.0,
                lip_l2: 0.0,
                x0: vec![0.0],
            },
        );
        let grid = flow_grid(51);
        let (map, diag) = harmonic_map_flow(&problem, &grid, 4.0, Some(&pot)).unwrap();
        assert!(diag.converged);
        for w in diag.energy_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-8, "energy rose: {} -> {}", w[0], w[1]);
        }
        let res = tension_residual(&map, &problem).unwrap();
        assert!(res < 1e-3, "residual {res}");
    }

    #[test]
    fn validate_rejects_escaping_boundary_data() {
        let chart = ManifoldChart::flat_bounded(1, vec![-4.0], vec![4.0]);
        let dom = crate::convexity::ConvexDomain::new(
            chart.clone(),
            crate::convexity::ChiKind::NormSquaredFrom { center: vec![0.0] },
            1.0,
            1.5,
            None,
        )
        .unwrap();
        let boundary: Arc<dyn Fn(&[f64]) -> DVector<f64> + Send + Sync> =
            Arc::new(|x: &[f64]| DVector::from_vec(vec![3.0 * x[0]]));
        let problem = DirichletProblem {
            lo: vec![0.0],
            hi: vec![1.0],
            spec: DiffusionSpec::brownian_1d(),
            boundary,
            chart,
            domain: Some(dom),
            drift: DriftField::zero(1),
        };
        assert!(problem.validate(8).is_err());
    }
}
