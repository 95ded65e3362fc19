//! Coordinate-chart Riemannian kernels.
//!
//! A chart is a single coordinate patch: an open box of valid coordinates
//! together with a metric tensor field. Four charts are built in (flat
//! space, the hyperbolic half-plane, a sphere cap in geodesic polar
//! coordinates, and 1-D intervals with an arbitrary positive metric), plus
//! fully custom metrics given as symbolic term tables. Everything downstream
//! (geodesics, exponential/logarithm maps, distance, parallel transport,
//! manifold Hessians) is derived from the metric and the Christoffel
//! symbols of the Levi-Civita connection.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ode::{self, OdeOptions};

/// Axis-aligned open box of valid coordinates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoxBounds {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoxBounds {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Self {
        assert_eq!(lo.len(), hi.len());
        BoxBounds { lo, hi }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.lo.len()
            && x.iter()
                .zip(self.lo.iter().zip(self.hi.iter()))
                .all(|(&xi, (&lo, &hi))| xi > lo && xi < hi)
    }

    fn concat(&self, other: &BoxBounds) -> BoxBounds {
        let mut lo = self.lo.clone();
        let mut hi = self.hi.clone();
        lo.extend_from_slice(&other.lo);
        hi.extend_from_slice(&other.hi);
        BoxBounds { lo, hi }
    }
}

/// One monomial-times-exponential term: `coef * prod_i x_i^p_i * exp(sum_i a_i x_i)`.
///
/// Negative powers are allowed, which covers rational metrics such as the
/// half-plane 1/y^2 as well as exponentials like e^{2x}.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricTerm {
    pub coef: f64,
    pub powers: Vec<i32>,
    pub exp_coef: Vec<f64>,
}

/// Sum of [`MetricTerm`]s; one entry of the metric tensor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricExpr {
    pub terms: Vec<MetricTerm>,
}

impl MetricExpr {
    pub fn constant(c: f64, dim: usize) -> Self {
        MetricExpr {
            terms: vec![MetricTerm {
                coef: c,
                powers: vec![0; dim],
                exp_coef: vec![0.0; dim],
            }],
        }
    }

    pub fn zero() -> Self {
        MetricExpr { terms: Vec::new() }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|t| {
                let mut v = t.coef;
                for (i, &p) in t.powers.iter().enumerate() {
                    if p != 0 {
                        v *= x[i].powi(p);
                    }
                }
                let e: f64 = t.exp_coef.iter().zip(x).map(|(a, xi)| a * xi).sum();
                if e != 0.0 {
                    v *= e.exp();
                }
                v
            })
            .sum()
    }

    /// Exact partial derivative with respect to coordinate `k`.
    pub fn partial(&self, k: usize) -> MetricExpr {
        let mut terms = Vec::new();
        for t in &self.terms {
            if t.powers[k] != 0 {
                let mut powers = t.powers.clone();
                powers[k] -= 1;
                terms.push(MetricTerm {
                    coef: t.coef * f64::from(t.powers[k]),
                    powers,
                    exp_coef: t.exp_coef.clone(),
                });
            }
            if t.exp_coef[k] != 0.0 {
                terms.push(MetricTerm {
                    coef: t.coef * t.exp_coef[k],
                    powers: t.powers.clone(),
                    exp_coef: t.exp_coef.clone(),
                });
            }
        }
        MetricExpr { terms }
    }
}

/// Which chart this is; determines metric, Christoffels and closed forms.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum ChartKind {
    /// Euclidean space, identity metric.
    Flat { dim: usize },
    /// Poincare upper half-plane, metric (dx^2 + dy^2)/y^2. Coordinates (x, y), y > 0.
    HalfPlane,
    /// Cap of the sphere of constant curvature `curvature` > 0 in geodesic
    /// polar coordinates (r, theta) around the cap centre.
    SphereCap { curvature: f64 },
    /// Symbolic metric table; `metric[i][j]` is the (i,j) entry (symmetric).
    Custom {
        dim: usize,
        metric: Vec<Vec<MetricExpr>>,
    },
    /// Product of two charts with the product metric (block-diagonal).
    Product(Box<ManifoldChart>, Box<ManifoldChart>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChristoffelMode {
    ClosedForm,
    FiniteDifference,
}

/// A coordinate patch with its metric, curvature bound and valid box.
///
/// `curvature_upper_bound` is the constant K dominating the sectional
/// curvatures; `0.0` marks Hadamard mode (nonpositive curvature), which some
/// distance estimates require.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifoldChart {
    pub name: String,
    pub kind: ChartKind,
    pub bounds: BoxBounds,
    pub curvature_upper_bound: f64,
    pub injectivity_radius_hint: Option<f64>,
    pub christoffel_mode: ChristoffelMode,
}

/// A matrix of tangent vectors: each column is a tangent vector at `base`.
#[derive(Debug, Clone)]
pub struct TangentMatrix {
    pub base: DVector<f64>,
    pub cols: DMatrix<f64>,
}

impl TangentMatrix {
    pub fn new(base: DVector<f64>, cols: DMatrix<f64>) -> Self {
        assert_eq!(base.len(), cols.nrows());
        TangentMatrix { base, cols }
    }

    pub fn single(base: DVector<f64>, col: DVector<f64>) -> Self {
        let n = col.len();
        TangentMatrix {
            base,
            cols: DMatrix::from_column_slice(n, 1, col.as_slice()),
        }
    }

    /// Frobenius (Euclidean) norm `sqrt(Tr(z z^T))`.
    pub fn euclidean_norm(&self) -> f64 {
        self.cols.norm()
    }
}

/// Rank-3 Christoffel tensor; `gamma[i][(j, k)]` is the coefficient of the
/// connection with upper index `i`.
#[derive(Debug, Clone)]
pub struct Christoffel {
    pub gamma: Vec<DMatrix<f64>>,
}

impl Christoffel {
    pub fn zeros(n: usize) -> Self {
        Christoffel {
            gamma: vec![DMatrix::zeros(n, n); n],
        }
    }

    /// The quadratic form `Gamma^i_{jk} a^j b^k` for each upper index i.
    pub fn quadratic(&self, a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.gamma.len(), self.gamma.iter().map(|g| (a.transpose() * g * b)[0]))
    }
}

impl ManifoldChart {
    pub fn flat(dim: usize) -> Self {
        ManifoldChart {
            name: format!("flat-{dim}d"),
            kind: ChartKind::Flat { dim },
            bounds: BoxBounds::new(vec![-1e6; dim], vec![1e6; dim]),
            curvature_upper_bound: 0.0,
            injectivity_radius_hint: None,
            christoffel_mode: ChristoffelMode::ClosedForm,
        }
    }

    pub fn flat_bounded(dim: usize, lo: Vec<f64>, hi: Vec<f64>) -> Self {
        let mut c = Self::flat(dim);
        c.bounds = BoxBounds::new(lo, hi);
        c
    }

    /// Upper half-plane restricted to the box `x in (x_lo, x_hi), y in (y_lo, y_hi)`, y_lo > 0.
    pub fn half_plane(x_lo: f64, x_hi: f64, y_lo: f64, y_hi: f64) -> Self {
        assert!(y_lo > 0.0, "half-plane needs y > 0");
        ManifoldChart {
            name: "half-plane".into(),
            kind: ChartKind::HalfPlane,
            bounds: BoxBounds::new(vec![x_lo, y_lo], vec![x_hi, y_hi]),
            curvature_upper_bound: 0.0,
            injectivity_radius_hint: None,
            christoffel_mode: ChristoffelMode::ClosedForm,
        }
    }

    /// Sphere cap of curvature `k` in geodesic polar coordinates around the
    /// cap centre; `r` ranges over `(r_lo, r_hi)` with `r_hi * sqrt(k) < pi/2`
    /// so the cut locus stays outside the chart.
    pub fn sphere_cap(k: f64, r_lo: f64, r_hi: f64) -> Self {
        assert!(k > 0.0);
        assert!(r_hi * k.sqrt() < std::f64::consts::FRAC_PI_2);
        ManifoldChart {
            name: "sphere-cap".into(),
            kind: ChartKind::SphereCap { curvature: k },
            bounds: BoxBounds::new(
                vec![r_lo, -std::f64::consts::PI],
                vec![r_hi, std::f64::consts::PI],
            ),
            curvature_upper_bound: k,
            injectivity_radius_hint: Some(std::f64::consts::FRAC_PI_2 / k.sqrt()),
            christoffel_mode: ChristoffelMode::ClosedForm,
        }
    }

    /// 1-D interval with metric `g(x)` given symbolically.
    pub fn interval(g: MetricExpr, lo: f64, hi: f64) -> Self {
        ManifoldChart {
            name: "interval-1d".into(),
            kind: ChartKind::Custom {
                dim: 1,
                metric: vec![vec![g]],
            },
            bounds: BoxBounds::new(vec![lo], vec![hi]),
            curvature_upper_bound: 0.0,
            injectivity_radius_hint: None,
            christoffel_mode: ChristoffelMode::ClosedForm,
        }
    }

    pub fn custom(dim: usize, metric: Vec<Vec<MetricExpr>>, bounds: BoxBounds) -> Result<Self> {
        if dim > 3 {
            return Err(Error::Config(format!(
                "custom charts support dimension <= 3, got {dim}"
            )));
        }
        if metric.len() != dim || metric.iter().any(|row| row.len() != dim) {
            return Err(Error::Config("metric table must be dim x dim".into()));
        }
        Ok(ManifoldChart {
            name: "custom".into(),
            kind: ChartKind::Custom { dim, metric },
            bounds,
            curvature_upper_bound: 0.0,
            injectivity_radius_hint: None,
            christoffel_mode: ChristoffelMode::ClosedForm,
        })
    }

    /// Product chart with block-diagonal metric, used for functions on
    /// `chart x chart` such as the separating functions.
    pub fn product(a: &ManifoldChart, b: &ManifoldChart) -> Self {
        ManifoldChart {
            name: format!("{}x{}", a.name, b.name),
            bounds: a.bounds.concat(&b.bounds),
            curvature_upper_bound: a.curvature_upper_bound.max(b.curvature_upper_bound),
            injectivity_radius_hint: None,
            christoffel_mode: a.christoffel_mode,
            kind: ChartKind::Product(Box::new(a.clone()), Box::new(b.clone())),
        }
    }

    pub fn dim(&self) -> usize {
        match &self.kind {
            ChartKind::Flat { dim } => *dim,
            ChartKind::HalfPlane => 2,
            ChartKind::SphereCap { .. } => 2,
            ChartKind::Custom { dim, .. } => *dim,
            ChartKind::Product(a, b) => a.dim() + b.dim(),
        }
    }

    pub fn is_flat(&self) -> bool {
        matches!(self.kind, ChartKind::Flat { .. })
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.bounds.contains(x)
    }

    pub fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        if !self.contains(x) {
            return Err(Error::OutsideChart { point: x.to_vec() });
        }
        Ok(())
    }

    /// Metric tensor g(x); symmetric positive definite inside the chart.
    pub fn metric(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        self.check_point(x)?;
        Ok(self.metric_unchecked(x))
    }

    pub(crate) fn metric_unchecked(&self, x: &[f64]) -> DMatrix<f64> {
        match &self.kind {
            ChartKind::Flat { dim } => DMatrix::identity(*dim, *dim),
            ChartKind::HalfPlane => {
                let s = 1.0 / (x[1] * x[1]);
                DMatrix::from_diagonal(&DVector::from_vec(vec![s, s]))
            }
            ChartKind::SphereCap { curvature } => {
                let sk = curvature.sqrt();
                let s = (sk * x[0]).sin() / sk;
                DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, s * s]))
            }
            ChartKind::Custom { dim, metric } => {
                let mut g = DMatrix::zeros(*dim, *dim);
                for i in 0..*dim {
                    for j in 0..*dim {
                        g[(i, j)] = metric[i][j].eval(x);
                    }
                }
                // symmetrise against asymmetric user tables
                for i in 0..*dim {
                    for j in (i + 1)..*dim {
                        let v = 0.5 * (g[(i, j)] + g[(j, i)]);
                        g[(i, j)] = v;
                        g[(j, i)] = v;
                    }
                }
                g
            }
            ChartKind::Product(a, b) => {
                let na = a.dim();
                let nb = b.dim();
                let ga = a.metric_unchecked(&x[..na]);
                let gb = b.metric_unchecked(&x[na..]);
                let mut g = DMatrix::zeros(na + nb, na + nb);
                g.view_mut((0, 0), (na, na)).copy_from(&ga);
                g.view_mut((na, na), (nb, nb)).copy_from(&gb);
                g
            }
        }
    }

    /// Smallest eigenvalue of g(x); used by the SPD validation.
    pub fn metric_min_eigenvalue(&self, x: &[f64]) -> Result<f64> {
        let g = self.metric(x)?;
        let eig = g.symmetric_eigen();
        Ok(eig.eigenvalues.min())
    }

    pub fn metric_inverse(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        let g = self.metric(x)?;
        let min_eig = g.clone().symmetric_eigen().eigenvalues.min();
        if min_eig <= 1e-14 {
            return Err(Error::SingularMetric {
                point: x.to_vec(),
                min_eig,
            });
        }
        g.try_inverse().ok_or(Error::SingularMetric {
            point: x.to_vec(),
            min_eig,
        })
    }

    /// Christoffel symbols of the Levi-Civita connection at `x`.
    ///
    /// Built-in charts use their closed forms; custom charts differentiate
    /// the symbolic metric exactly. `FiniteDifference` mode always goes
    /// through central differences of the metric, which serves as the
    /// cross-check oracle for the closed forms.
    pub fn christoffel(&self, x: &[f64]) -> Result<Christoffel> {
        self.check_point(x)?;
        if self.christoffel_mode == ChristoffelMode::FiniteDifference {
            return self.christoffel_fd(x);
        }
        Ok(match &self.kind {
            ChartKind::Flat { dim } => Christoffel::zeros(*dim),
            ChartKind::HalfPlane => {
                let inv_y = 1.0 / x[1];
                let mut c = Christoffel::zeros(2);
                c.gamma[0][(0, 1)] = -inv_y;
                c.gamma[0][(1, 0)] = -inv_y;
                c.gamma[1][(0, 0)] = inv_y;
                c.gamma[1][(1, 1)] = -inv_y;
                c
            }
            ChartKind::SphereCap { curvature } => {
                let sk = curvature.sqrt();
                let s = (sk * x[0]).sin() / sk;
                let sp = (sk * x[0]).cos();
                let mut c = Christoffel::zeros(2);
                c.gamma[0][(1, 1)] = -s * sp;
                c.gamma[1][(0, 1)] = sp / s;
                c.gamma[1][(1, 0)] = sp / s;
                c
            }
            ChartKind::Custom { dim, metric } => {
                let n = *dim;
                let g_inv = self.metric_inverse(x)?;
                // dg[l][(i,j)] = d g_ij / d x_l, exact from the term table
                let mut dg = vec![DMatrix::zeros(n, n); n];
                for l in 0..n {
                    for i in 0..n {
                        for j in 0..n {
                            dg[l][(i, j)] = metric[i][j].partial(l).eval(x);
                        }
                    }
                    let sym = 0.5 * (&dg[l] + dg[l].transpose());
                    dg[l] = sym;
                }
                christoffel_from_metric_derivatives(n, &g_inv, &dg)
            }
            ChartKind::Product(a, b) => {
                let na = a.dim();
                let ca = a.christoffel(&x[..na])?;
                let cb = b.christoffel(&x[na..])?;
                let n = na + b.dim();
                let mut c = Christoffel::zeros(n);
                for i in 0..na {
                    for j in 0..na {
                        for k in 0..na {
                            c.gamma[i][(j, k)] = ca.gamma[i][(j, k)];
                        }
                    }
                }
                for i in 0..b.dim() {
                    for j in 0..b.dim() {
                        for k in 0..b.dim() {
                            c.gamma[na + i][(na + j, na + k)] = cb.gamma[i][(j, k)];
                        }
                    }
                }
                c
            }
        })
    }

    /// Central-difference Christoffels from metric samples.
    pub fn christoffel_fd(&self, x: &[f64]) -> Result<Christoffel> {
        self.check_point(x)?;
        let n = self.dim();
        let xnorm: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let h = 1e-5 * (1.0 + xnorm);
        let g_inv = self.metric_inverse(x)?;
        let mut dg = vec![DMatrix::zeros(n, n); n];
        let mut xp = x.to_vec();
        for l in 0..n {
            xp[l] = x[l] + h;
            let gp = self.metric_unchecked(&xp);
            xp[l] = x[l] - h;
            let gm = self.metric_unchecked(&xp);
            xp[l] = x[l];
            dg[l] = (gp - gm) / (2.0 * h);
        }
        Ok(christoffel_from_metric_derivatives(n, &g_inv, &dg))
    }

    /// Riemannian norm of a tangent vector at x.
    pub fn norm_vec(&self, x: &[f64], v: &[f64]) -> Result<f64> {
        if v.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: v.len(),
            });
        }
        let g = self.metric(x)?;
        let v = DVector::from_column_slice(v);
        Ok((v.transpose() * g * &v)[0].max(0.0).sqrt())
    }

    /// Riemannian inner product of two tangent vectors at x.
    pub fn inner(&self, x: &[f64], u: &[f64], v: &[f64]) -> Result<f64> {
        let g = self.metric(x)?;
        let u = DVector::from_column_slice(u);
        let v = DVector::from_column_slice(v);
        Ok((u.transpose() * g * v)[0])
    }

    /// Riemannian norm of a tangent matrix: column norms summed in quadrature.
    pub fn norm_tangent(&self, z: &TangentMatrix) -> Result<f64> {
        let x: Vec<f64> = z.base.as_slice().to_vec();
        let g = self.metric(&x)?;
        let mut acc = 0.0;
        for c in z.cols.column_iter() {
            acc += (c.transpose() * &g * c)[0];
        }
        Ok(acc.max(0.0).sqrt())
    }

    /// Integrates the geodesic equation from `(x, v)` for parameter time `t`.
    ///
    /// Fails with an escape error if the trajectory leaves the chart box.
    pub fn geodesic_shoot(&self, x: &[f64], v: &[f64], t: f64) -> Result<DVector<f64>> {
        Ok(self.geodesic_shoot_full(x, v, t)?.0)
    }

    /// As [`geodesic_shoot`](Self::geodesic_shoot) but also returns the final velocity.
    pub fn geodesic_shoot_full(
        &self,
        x: &[f64],
        v: &[f64],
        t: f64,
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        self.check_point(x)?;
        let n = self.dim();
        if v.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: v.len(),
            });
        }
        if t == 0.0 || v.iter().all(|&c| c == 0.0) {
            return Ok((
                DVector::from_column_slice(x),
                DVector::from_column_slice(v),
            ));
        }
        if self.is_flat() {
            let p = DVector::from_column_slice(x) + t * DVector::from_column_slice(v);
            let ps: Vec<f64> = p.as_slice().to_vec();
            self.check_point(&ps)?;
            return Ok((p, DVector::from_column_slice(v)));
        }
        let mut y0 = x.to_vec();
        y0.extend_from_slice(v);
        let bounds = self.bounds.clone();
        let rhs = |_t: f64, y: &[f64], dy: &mut [f64]| {
            let pos = &y[..n];
            let vel = DVector::from_column_slice(&y[n..]);
            let gamma = self
                .christoffel(pos)
                .unwrap_or_else(|_| Christoffel::zeros(n));
            let acc = gamma.quadratic(&vel, &vel);
            dy[..n].copy_from_slice(&y[n..]);
            for i in 0..n {
                dy[n + i] = -acc[i];
            }
        };
        let guard = move |y: &[f64]| bounds.contains(&y[..n]);
        let yt = ode::integrate(rhs, &y0, 0.0, t, OdeOptions::default(), Some(guard))?;
        Ok((
            DVector::from_column_slice(&yt[..n]),
            DVector::from_column_slice(&yt[n..]),
        ))
    }

    /// Inverse of the time-1 exponential map by damped-Newton shooting.
    ///
    /// Returns `v` with `geodesic_shoot(x, v, 1) = x2` to 1e-8; the initial
    /// guess is the Euclidean chord and the damping is halved whenever the
    /// residual fails to decrease.
    pub fn log_map(&self, x: &[f64], x2: &[f64]) -> Result<DVector<f64>> {
        self.check_point(x)?;
        self.check_point(x2)?;
        let n = self.dim();
        let target = DVector::from_column_slice(x2);
        let mut v: DVector<f64> = &target - DVector::from_column_slice(x);
        if self.is_flat() {
            return Ok(v);
        }
        if v.norm() == 0.0 {
            return Ok(DVector::zeros(n));
        }
        let tol = 1e-10;
        let mut damping = 1.0_f64;
        let shoot = |v: &DVector<f64>| -> Result<DVector<f64>> {
            self.geodesic_shoot(x, v.as_slice(), 1.0)
        };
        let mut residual_vec = shoot(&v)? - &target;
        let mut residual = residual_vec.norm();
        for it in 0..100 {
            if residual <= tol {
                return Ok(v);
            }
            // forward-difference Jacobian of the shooting map
            let mut jac = DMatrix::zeros(n, n);
            let h = 1e-7 * (1.0 + v.norm());
            for j in 0..n {
                let mut vj = v.clone();
                vj[j] += h;
                let fj = shoot(&vj).map_err(|_| Error::Convergence {
                    what: "log map shooting (jacobian escape)",
                    iterations: it,
                    residual,
                })? - &target;
                jac.set_column(j, &((fj - &residual_vec) / h));
            }
            let delta = jac.lu().solve(&residual_vec).ok_or(Error::Convergence {
                what: "log map shooting (singular jacobian)",
                iterations: it,
                residual,
            })?;
            loop {
                let cand = &v - damping * &delta;
                match shoot(&cand) {
                    Ok(endpoint) => {
                        let rv = endpoint - &target;
                        let r = rv.norm();
                        if r < residual || damping < 1e-6 {
                            v = cand;
                            residual_vec = rv;
                            residual = r;
                            damping = (damping * 2.0).min(1.0);
                            break;
                        }
                    }
                    Err(_) => {}
                }
                damping *= 0.5;
                if damping < 1e-12 {
                    return Err(Error::Convergence {
                        what: "log map shooting",
                        iterations: it,
                        residual,
                    });
                }
            }
        }
        if residual <= tol {
            Ok(v)
        } else {
            Err(Error::Convergence {
                what: "log map shooting",
                iterations: 100,
                residual,
            })
        }
    }

    /// Riemannian distance. Closed forms for the built-in charts; custom
    /// charts go through the logarithm map.
    pub fn distance(&self, x: &[f64], x2: &[f64]) -> Result<f64> {
        self.check_point(x)?;
        self.check_point(x2)?;
        match &self.kind {
            ChartKind::Flat { .. } => Ok(x
                .iter()
                .zip(x2)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()),
            ChartKind::HalfPlane => {
                let dx = x[0] - x2[0];
                let dy = x[1] - x2[1];
                let c = 1.0 + (dx * dx + dy * dy) / (2.0 * x[1] * x2[1]);
                Ok(c.acosh())
            }
            ChartKind::SphereCap { curvature } => {
                let sk = curvature.sqrt();
                let (r1, t1) = (x[0], x[1]);
                let (r2, t2) = (x2[0], x2[1]);
                let c = (sk * r1).cos() * (sk * r2).cos()
                    + (sk * r1).sin() * (sk * r2).sin() * (t1 - t2).cos();
                Ok(c.clamp(-1.0, 1.0).acos() / sk)
            }
            ChartKind::Custom { dim: 1, metric } => {
                // arclength: | int_x^x2 sqrt(g) |
                let g = &metric[0][0];
                let f = |u: f64| -> Result<f64> {
                    let v = g.eval(&[u]);
                    if v <= 0.0 {
                        return Err(Error::NonPositiveMetric { x: u, value: v });
                    }
                    Ok(v.sqrt())
                };
                adaptive_simpson(&f, x[0].min(x2[0]), x[0].max(x2[0]), 1e-10)
            }
            ChartKind::Custom { .. } => self.distance_by_shooting(x, x2),
            ChartKind::Product(a, b) => {
                let na = a.dim();
                let d1 = a.distance(&x[..na], &x2[..na])?;
                let d2 = b.distance(&x[na..], &x2[na..])?;
                Ok((d1 * d1 + d2 * d2).sqrt())
            }
        }
    }

    /// Distance via `|log_map|_r`; cross-check route against the closed forms.
    pub fn distance_by_shooting(&self, x: &[f64], x2: &[f64]) -> Result<f64> {
        let v = self.log_map(x, x2)?;
        self.norm_vec(x, v.as_slice())
    }

    /// Parallel transport of the columns of `z` from its base point to `x2`
    /// along the unique connecting geodesic.
    pub fn parallel_transport(&self, x2: &[f64], z: &TangentMatrix) -> Result<TangentMatrix> {
        let x: Vec<f64> = z.base.as_slice().to_vec();
        self.check_point(&x)?;
        self.check_point(x2)?;
        let n = self.dim();
        if self.is_flat() {
            return Ok(TangentMatrix::new(
                DVector::from_column_slice(x2),
                z.cols.clone(),
            ));
        }
        if x.iter().zip(x2).all(|(a, b)| a == b) {
            return Ok(z.clone());
        }
        let v = self.log_map(&x, x2)?;
        let k = z.cols.ncols();
        // joint state: geodesic position, velocity, then the transported columns
        let mut y0 = x.clone();
        y0.extend_from_slice(v.as_slice());
        for c in z.cols.column_iter() {
            y0.extend(c.iter());
        }
        let rhs = |_t: f64, y: &[f64], dy: &mut [f64]| {
            let pos = &y[..n];
            let vel = DVector::from_column_slice(&y[n..2 * n]);
            let gamma = self
                .christoffel(pos)
                .unwrap_or_else(|_| Christoffel::zeros(n));
            let acc = gamma.quadratic(&vel, &vel);
            dy[..n].copy_from_slice(&y[n..2 * n]);
            for i in 0..n {
                dy[n + i] = -acc[i];
            }
            for c in 0..k {
                let zc = DVector::from_column_slice(&y[2 * n + c * n..2 * n + (c + 1) * n]);
                let dz = gamma.quadratic(&vel, &zc);
                for i in 0..n {
                    dy[2 * n + c * n + i] = -dz[i];
                }
            }
        };
        let bounds = self.bounds.clone();
        let guard = move |y: &[f64]| bounds.contains(&y[..n]);
        let yt = ode::integrate(rhs, &y0, 0.0, 1.0, OdeOptions::default(), Some(guard))?;
        let mut cols = DMatrix::zeros(n, k);
        for c in 0..k {
            for i in 0..n {
                cols[(i, c)] = yt[2 * n + c * n + i];
            }
        }
        Ok(TangentMatrix::new(DVector::from_column_slice(x2), cols))
    }

    /// Manifold Hessian of a scalar function in coordinates:
    /// `Hess h_{jk} = d_j d_k h - Gamma^l_{jk} d_l h`, central differences.
    pub fn manifold_hessian<F: Fn(&[f64]) -> f64>(&self, f: F, x: &[f64]) -> Result<DMatrix<f64>> {
        self.check_point(x)?;
        let n = self.dim();
        let xnorm: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let h = 1e-4 * (1.0 + xnorm);
        let mut hess = DMatrix::zeros(n, n);
        let f0 = f(x);
        let mut xp = x.to_vec();
        for j in 0..n {
            xp[j] = x[j] + h;
            let fp = f(&xp);
            xp[j] = x[j] - h;
            let fm = f(&xp);
            xp[j] = x[j];
            hess[(j, j)] = (fp - 2.0 * f0 + fm) / (h * h);
        }
        for j in 0..n {
            for kk in (j + 1)..n {
                xp[j] = x[j] + h;
                xp[kk] = x[kk] + h;
                let fpp = f(&xp);
                xp[kk] = x[kk] - h;
                let fpm = f(&xp);
                xp[j] = x[j] - h;
                xp[kk] = x[kk] + h;
                let fmp = f(&xp);
                xp[kk] = x[kk] - h;
                let fmm = f(&xp);
                xp[j] = x[j];
                xp[kk] = x[kk];
                let v = (fpp - fpm - fmp + fmm) / (4.0 * h * h);
                hess[(j, kk)] = v;
                hess[(kk, j)] = v;
            }
        }
        let grad = self.euclidean_gradient(&f, x);
        let gamma = self.christoffel(x)?;
        for j in 0..n {
            for kk in 0..n {
                let mut corr = 0.0;
                for l in 0..n {
                    corr += gamma.gamma[l][(j, kk)] * grad[l];
                }
                hess[(j, kk)] -= corr;
            }
        }
        Ok(hess)
    }

    /// Coordinate gradient by central differences (connection-independent).
    pub fn euclidean_gradient<F: Fn(&[f64]) -> f64>(&self, f: &F, x: &[f64]) -> DVector<f64> {
        let n = self.dim();
        let xnorm: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let h = 1e-5 * (1.0 + xnorm);
        let mut g = DVector::zeros(n);
        let mut xp = x.to_vec();
        for j in 0..n {
            xp[j] = x[j] + h;
            let fp = f(&xp);
            xp[j] = x[j] - h;
            let fm = f(&xp);
            xp[j] = x[j];
            g[j] = (fp - fm) / (2.0 * h);
        }
        g
    }

    /// Directional quadratic form `Hess h(x)<u, u>` via a second difference
    /// of step `h` along `u`, minus the Christoffel correction. The caller
    /// chooses the step; for distance-like functions it should scale with
    /// the distance itself, whose higher derivatives blow up near the
    /// diagonal.
    pub fn directional_hessian<F: Fn(&[f64]) -> f64>(
        &self,
        f: F,
        x: &[f64],
        u: &[f64],
        h: f64,
    ) -> Result<f64> {
        self.check_point(x)?;
        let n = self.dim();
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        for i in 0..n {
            xp[i] = x[i] + h * u[i];
            xm[i] = x[i] - h * u[i];
        }
        let second = (f(&xp) - 2.0 * f(x) + f(&xm)) / (h * h);
        if self.chart_has_zero_connection() {
            return Ok(second);
        }
        let grad = self.euclidean_gradient(&f, x);
        let gamma = self.christoffel(x)?;
        let uv = DVector::from_column_slice(u);
        let corr = gamma.quadratic(&uv, &uv).dot(&grad);
        Ok(second - corr)
    }

    pub(crate) fn chart_has_zero_connection(&self) -> bool {
        match &self.kind {
            ChartKind::Flat { .. } => true,
            ChartKind::Product(a, b) => {
                a.chart_has_zero_connection() && b.chart_has_zero_connection()
            }
            _ => false,
        }
    }
}

fn christoffel_from_metric_derivatives(
    n: usize,
    g_inv: &DMatrix<f64>,
    dg: &[DMatrix<f64>],
) -> Christoffel {
    let mut c = Christoffel::zeros(n);
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                let mut acc = 0.0;
                for l in 0..n {
                    acc += g_inv[(i, l)] * (dg[j][(l, k)] + dg[k][(l, j)] - dg[l][(j, k)]);
                }
                c.gamma[i][(j, k)] = 0.5 * acc;
            }
        }
    }
    c
}

/// Adaptive Simpson quadrature with error-splitting recursion.
pub fn adaptive_simpson<F: Fn(f64) -> Result<f64>>(f: &F, a: f64, b: f64, tol: f64) -> Result<f64> {
    fn simpson<F: Fn(f64) -> Result<f64>>(f: &F, a: f64, fa: f64, b: f64, fb: f64) -> Result<(f64, f64)> {
        let m = 0.5 * (a + b);
        let fm = f(m)?;
        Ok((fm, (b - a) / 6.0 * (fa + 4.0 * fm + fb)))
    }
    fn recurse<F: Fn(f64) -> Result<f64>>(
        f: &F,
        a: f64,
        fa: f64,
        b: f64,
        fb: f64,
        m: f64,
        fm: f64,
        whole: f64,
        tol: f64,
        depth: usize,
    ) -> Result<f64> {
        let (fl, left) = simpson(f, a, fa, m, fm)?;
        let (fr, right) = simpson(f, m, fm, b, fb)?;
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return Ok(left + right + delta / 15.0);
        }
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        Ok(recurse(f, a, fa, m, fm, lm, fl, left, tol / 2.0, depth - 1)?
            + recurse(f, m, fm, b, fb, rm, fr, right, tol / 2.0, depth - 1)?)
    }
    if a == b {
        return Ok(0.0);
    }
    let fa = f(a)?;
    let fb = f(b)?;
    let (fm, whole) = simpson(f, a, fa, b, fb)?;
    recurse(f, a, fa, b, fb, 0.5 * (a + b), fm, whole, tol, 48)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn half_plane() -> ManifoldChart {
        ManifoldChart::half_plane(-10.0, 10.0, 1e-3, 50.0)
    }

    #[test]
    fn flat_christoffel_is_zero() {
        let chart = ManifoldChart::flat(2);
        let c = chart.christoffel(&[0.3, -1.2]).unwrap();
        for g in &c.gamma {
            assert_eq!(g.amax(), 0.0);
        }
    }

    #[test]
    fn half_plane_christoffel_closed_form() {
        let chart = half_plane();
        let c = chart.christoffel(&[0.0, 2.0]).unwrap();
        assert!((c.gamma[0][(0, 1)] + 0.5).abs() < 1e-12);
        assert!((c.gamma[0][(1, 0)] + 0.5).abs() < 1e-12);
        assert!((c.gamma[1][(0, 0)] - 0.5).abs() < 1e-12);
        assert!((c.gamma[1][(1, 1)] + 0.5).abs() < 1e-12);
        assert_eq!(c.gamma[0][(0, 0)], 0.0);
        assert_eq!(c.gamma[1][(0, 1)], 0.0);
    }

    #[test]
    fn half_plane_christoffel_fd_matches() {
        let chart = half_plane();
        let closed = chart.christoffel(&[0.7, 1.3]).unwrap();
        let fd = chart.christoffel_fd(&[0.7, 1.3]).unwrap();
        for i in 0..2 {
            assert!((&closed.gamma[i] - &fd.gamma[i]).amax() < 1e-5);
        }
    }

    #[test]
    fn interval_exponential_metric_christoffel() {
        // g(x) = e^{2x}: Gamma = g'/(2g) = 1
        let g = MetricExpr {
            terms: vec![MetricTerm {
                coef: 1.0,
                powers: vec![0],
                exp_coef: vec![2.0],
            }],
        };
        let chart = ManifoldChart::interval(g, -3.0, 3.0);
        let c = chart.christoffel(&[0.0]).unwrap();
        assert!((c.gamma[0][(0, 0)] - 1.0).abs() < 1e-12);
        let fd = chart.christoffel_fd(&[0.0]).unwrap();
        assert!((fd.gamma[0][(0, 0)] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn riemannian_norm_examples() {
        let flat = ManifoldChart::flat(2);
        let z = TangentMatrix::single(
            DVector::from_vec(vec![0.0, 0.0]),
            DVector::from_vec(vec![1.0, 0.0]),
        );
        assert!((flat.norm_tangent(&z).unwrap() - 1.0).abs() < 1e-14);

        let hp = half_plane();
        let z = TangentMatrix::single(
            DVector::from_vec(vec![0.0, 2.0]),
            DVector::from_vec(vec![2.0, 0.0]),
        );
        assert!((hp.norm_tangent(&z).unwrap() - 1.0).abs() < 1e-14);

        let z0 = TangentMatrix::single(
            DVector::from_vec(vec![0.0, 2.0]),
            DVector::from_vec(vec![0.0, 0.0]),
        );
        assert_eq!(hp.norm_tangent(&z0).unwrap(), 0.0);
    }

    #[test]
    fn flat_geodesic_is_straight_line() {
        let chart = ManifoldChart::flat(2);
        let p = chart.geodesic_shoot(&[1.0, 1.0], &[2.0, 0.0], 1.0).unwrap();
        assert!((p[0] - 3.0).abs() < 1e-12);
        assert!((p[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn half_plane_vertical_geodesic() {
        let chart = half_plane();
        let p = chart.geodesic_shoot(&[0.0, 1.0], &[0.0, 1.0], 1.0).unwrap();
        assert!((p[0]).abs() < 1e-9);
        assert!((p[1] - std::f64::consts::E).abs() < 1e-8);
    }

    #[test]
    fn zero_velocity_stays_put() {
        let chart = half_plane();
        let p = chart.geodesic_shoot(&[0.4, 1.5], &[0.0, 0.0], 2.0).unwrap();
        assert_eq!(p[0], 0.4);
        assert_eq!(p[1], 1.5);
    }

    #[test]
    fn geodesic_escape_reports_exit_time() {
        let chart = ManifoldChart::flat_bounded(1, vec![0.0], vec![1.0]);
        let err = chart.geodesic_shoot(&[0.5, ], &[1.0], 2.0).unwrap_err();
        match err {
            Error::OutsideChart { .. } | Error::Escape { .. } => {}
            other => panic!("unexpected: {other}"),
        }
    }

    #[test]
    fn log_map_examples() {
        let flat = ManifoldChart::flat(2);
        let v = flat.log_map(&[0.0, 0.0], &[3.0, 4.0]).unwrap();
        assert!((v[0] - 3.0).abs() < 1e-12 && (v[1] - 4.0).abs() < 1e-12);

        let hp = half_plane();
        let v = hp.log_map(&[0.0, 1.0], &[0.0, std::f64::consts::E]).unwrap();
        assert!(v[0].abs() < 1e-7);
        assert!((v[1] - 1.0).abs() < 1e-7);

        let v0 = hp.log_map(&[0.3, 1.2], &[0.3, 1.2]).unwrap();
        assert_eq!(v0.norm(), 0.0);
    }

    #[test]
    fn distance_examples() {
        let flat = ManifoldChart::flat(2);
        assert!((flat.distance(&[0.0, 0.0], &[3.0, 4.0]).unwrap() - 5.0).abs() < 1e-12);

        let hp = half_plane();
        let d = hp.distance(&[0.0, 1.0], &[0.0, std::f64::consts::E]).unwrap();
        assert!((d - 1.0).abs() < 1e-12);
        let ds = hp
            .distance_by_shooting(&[0.0, 1.0], &[0.0, std::f64::consts::E])
            .unwrap();
        assert!((ds - 1.0).abs() < 1e-6);
        assert_eq!(hp.distance(&[0.5, 2.0], &[0.5, 2.0]).unwrap(), 0.0);
    }

    #[test]
    fn transport_examples() {
        let hp = half_plane();
        let z = TangentMatrix::single(
            DVector::from_vec(vec![0.0, 1.0]),
            DVector::from_vec(vec![1.0, 0.0]),
        );
        let moved = hp
            .parallel_transport(&[0.0, std::f64::consts::E], &z)
            .unwrap();
        assert!((moved.cols[(0, 0)] - std::f64::consts::E).abs() < 1e-7);
        assert!(moved.cols[(1, 0)].abs() < 1e-7);
        // norm preserved
        assert!((hp.norm_tangent(&moved).unwrap() - 1.0).abs() < 1e-8);

        let same = hp.parallel_transport(&[0.0, 1.0], &z).unwrap();
        assert_eq!(same.cols[(0, 0)], 1.0);
    }

    #[test]
    fn hessian_examples() {
        let flat = ManifoldChart::flat(2);
        let h = flat
            .manifold_hessian(|x| x[0] * x[0] + x[1] * x[1], &[0.7, -0.2])
            .unwrap();
        assert!((h[(0, 0)] - 2.0).abs() < 1e-6);
        assert!((h[(1, 1)] - 2.0).abs() < 1e-6);
        assert!(h[(0, 1)].abs() < 1e-6);

        let hc = flat.manifold_hessian(|_| 5.0, &[0.0, 0.0]).unwrap();
        assert_eq!(hc.amax(), 0.0);

        // half-plane: Hess of half squared distance to (0,1) is positive definite at (0,2)
        let hp = half_plane();
        let o = [0.0, 1.0];
        let h = hp
            .manifold_hessian(
                |x| {
                    let d = hp.distance(&o, x).unwrap();
                    0.5 * d * d
                },
                &[0.0, 2.0],
            )
            .unwrap();
        let eig = h.symmetric_eigen().eigenvalues;
        assert!(eig.min() > 0.0);
    }

    #[test]
    fn sphere_cap_distance_to_centre_is_radial_coordinate() {
        let cap = ManifoldChart::sphere_cap(1.0, 1e-6, 1.2);
        let d = cap.distance(&[0.3, 0.4], &[0.3, 1.2]).unwrap();
        // same radius, angular separation 0.8 on the circle of radius sin(0.3)
        let expect = ((0.3f64).cos().powi(2) + (0.3f64).sin().powi(2) * (0.8f64).cos()).acos();
        assert!((d - expect).abs() < 1e-12);
    }

    #[test]
    fn sphere_cap_fd_christoffel_matches() {
        let cap = ManifoldChart::sphere_cap(1.0, 0.05, 1.2);
        let x = [0.6, 0.3];
        let closed = cap.christoffel(&x).unwrap();
        let fd = cap.christoffel_fd(&x).unwrap();
        for i in 0..2 {
            assert!((&closed.gamma[i] - &fd.gamma[i]).amax() < 1e-5);
        }
    }

    #[test]
    fn adaptive_simpson_matches_antiderivative() {
        let v = adaptive_simpson(&|x: f64| Ok(x.exp()), 0.0, 1.0, 1e-12).unwrap();
        assert!((v - (std::f64::consts::E - 1.0)).abs() < 1e-10);
    }
}
