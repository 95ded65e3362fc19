//! Drift fields and the Lipschitz machinery built on top of them: the
//! norm truncation `z -> z / (1 + s_eps(|z|))`, the cut-off extension to the
//! whole space, the assembled drift
//! `gamma(b,x,z) = 1/2 Gamma~_{jk}(x) ([z~]^k | [z~]^j) - f~(b,x,z~)`,
//! and outward-shifted mollifications `g_l = f * rho_l + (A/l) x`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::convexity::ConvexDomain;
use crate::error::{Error, Result};
use crate::geometry::ManifoldChart;

/// Named potential for gradient-form drifts `f = D_2 G`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum PotentialKind {
    /// `G(b, u) = coef/2 |u|^2`, so `f = coef * u`
    HalfNormSquared { coef: f64 },
}

impl PotentialKind {
    pub fn eval(&self, _b: &[f64], u: &[f64]) -> f64 {
        match self {
            PotentialKind::HalfNormSquared { coef } => {
                0.5 * coef * u.iter().map(|v| v * v).sum::<f64>()
            }
        }
    }
}

type CustomDrift = Arc<dyn Fn(&[f64], &[f64], &DMatrix<f64>) -> DVector<f64> + Send + Sync>;

/// Evaluator form of the drift f(b, x, z).
#[derive(Clone, Serialize, Deserialize)]
pub enum DriftKind {
    Zero,
    Constant(Vec<f64>),
    /// `f = matrix * x`, row-major n x n
    Linear { matrix: Vec<Vec<f64>> },
    /// `f = scale * x`
    RadialOutward { scale: f64 },
    /// `f = scale * (column of z)`
    LinearZ { scale: f64, column: usize },
    /// `f = D_2 G`
    GradPotential { potential: PotentialKind },
    #[serde(skip)]
    Custom(CustomDrift),
}

impl fmt::Debug for DriftKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DriftKind::Zero => write!(f, "Zero"),
            DriftKind::Constant(v) => write!(f, "Constant({v:?})"),
            DriftKind::Linear { matrix } => write!(f, "Linear({matrix:?})"),
            DriftKind::RadialOutward { scale } => write!(f, "RadialOutward({scale})"),
            DriftKind::LinearZ { scale, column } => write!(f, "LinearZ({scale}, col {column})"),
            DriftKind::GradPotential { potential } => write!(f, "GradPotential({potential:?})"),
            DriftKind::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

/// A drift field with its declared constants.
///
/// `lip_l` is the declared geometric Lipschitz constant and `lip_l2` the
/// bound on `|f(b, x0, 0)|_r`; both are config metadata that the empirical
/// probe checks against.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DriftField {
    pub kind: DriftKind,
    pub z_dependent: bool,
    pub lip_l: f64,
    pub lip_l2: f64,
    pub x0: Vec<f64>,
}

impl DriftField {
    pub fn zero(n: usize) -> Self {
        DriftField {
            kind: DriftKind::Zero,
            z_dependent: false,
            lip_l: 0.0,
            lip_l2: 0.0,
            x0: vec![0.0; n],
        }
    }

    pub fn constant(v: Vec<f64>) -> Self {
        let l2 = v.iter().map(|c| c * c).sum::<f64>().sqrt();
        let n = v.len();
        DriftField {
            kind: DriftKind::Constant(v),
            z_dependent: false,
            lip_l: 0.0,
            lip_l2: l2,
            x0: vec![0.0; n],
        }
    }

    pub fn radial(scale: f64, n: usize) -> Self {
        DriftField {
            kind: DriftKind::RadialOutward { scale },
            z_dependent: false,
            lip_l: scale.abs(),
            lip_l2: 0.0,
            x0: vec![0.0; n],
        }
    }

    pub fn linear_z(scale: f64, column: usize, n: usize) -> Self {
        DriftField {
            kind: DriftKind::LinearZ { scale, column },
            z_dependent: true,
            lip_l: scale.abs(),
            lip_l2: 0.0,
            x0: vec![0.0; n],
        }
    }

    pub fn custom(
        eval: CustomDrift,
        z_dependent: bool,
        lip_l: f64,
        lip_l2: f64,
        x0: Vec<f64>,
    ) -> Self {
        DriftField {
            kind: DriftKind::Custom(eval),
            z_dependent,
            lip_l,
            lip_l2,
            x0,
        }
    }

    pub fn eval(&self, b: &[f64], x: &[f64], z: &DMatrix<f64>) -> DVector<f64> {
        let n = x.len();
        match &self.kind {
            DriftKind::Zero => DVector::zeros(n),
            DriftKind::Constant(v) => DVector::from_column_slice(v),
            DriftKind::Linear { matrix } => {
                let mut out = DVector::zeros(n);
                for (i, row) in matrix.iter().enumerate() {
                    out[i] = row.iter().zip(x).map(|(a, b)| a * b).sum();
                }
                out
            }
            DriftKind::RadialOutward { scale } => *scale * DVector::from_column_slice(x),
            DriftKind::LinearZ { scale, column } => {
                if *column < z.ncols() {
                    *scale * DVector::from(z.column(*column).clone_owned())
                } else {
                    DVector::zeros(n)
                }
            }
            DriftKind::GradPotential { potential } => match potential {
                PotentialKind::HalfNormSquared { coef } => *coef * DVector::from_column_slice(x),
            },
            DriftKind::Custom(f) => f(b, x, z),
        }
    }
}

/// Quintic smootherstep: 0 at 0, 1 at 1, with two vanishing derivatives at
/// both ends.
pub fn smootherstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * x * (x * (x * 6.0 - 15.0) + 10.0)
}

/// Truncation ramp parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TruncationParams {
    pub epsilon: f64,
    /// width of the smooth ramp between s = 0 and the linear regime
    pub ramp_width: f64,
}

impl TruncationParams {
    pub fn new(epsilon: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&epsilon) || epsilon == 0.0 {
            return Err(Error::Parameter(format!(
                "epsilon must lie in (0, 1), got {epsilon}"
            )));
        }
        Ok(TruncationParams {
            epsilon,
            ramp_width: 1.0 / epsilon,
        })
    }

    pub fn with_width(epsilon: f64, ramp_width: f64) -> Result<Self> {
        let mut p = Self::new(epsilon)?;
        if ramp_width <= 0.0 {
            return Err(Error::Parameter("ramp width must be positive".into()));
        }
        p.ramp_width = ramp_width;
        Ok(p)
    }

    /// `s_eps(t)`: zero for `t <= 1/eps`, equal to `t - 1/eps` past the ramp,
    /// smooth and nondecreasing in between.
    pub fn s_eps(&self, t: f64) -> f64 {
        let a = 1.0 / self.epsilon;
        if t <= a {
            return 0.0;
        }
        (t - a) * smootherstep((t - a) / self.ramp_width)
    }

    pub fn threshold(&self) -> f64 {
        1.0 / self.epsilon
    }
}

/// `z -> z / (1 + s_eps(|z|))`; identity below the threshold, uniformly
/// bounded and Lipschitz overall.
pub fn truncate(z: &DMatrix<f64>, params: &TruncationParams) -> DMatrix<f64> {
    let h = params.s_eps(z.norm());
    if h == 0.0 {
        z.clone()
    } else {
        z / (1.0 + h)
    }
}

/// Smooth cut-off: 1 on the domain, 0 outside the collar `{chi <= collar}`.
pub fn cutoff(domain: &ConvexDomain, x: &[f64]) -> Result<f64> {
    let chi = domain.chi(x)?;
    Ok(cutoff_profile(chi, domain.level, domain.collar))
}

fn cutoff_profile(chi: f64, level: f64, collar: f64) -> f64 {
    if chi <= level {
        1.0
    } else if chi >= collar {
        0.0
    } else {
        1.0 - smootherstep((chi - level) / (collar - level))
    }
}

/// The assembled Lipschitz drift of the extended equation.
///
/// With `domain = None` the cut-off is disabled (phi = 1 wherever the chart
/// is defined); this "unconstrained flat mode" exists so closed-form global
/// oracles on flat charts can be matched. Outside the chart box gamma
/// evaluates to zero, which matches the compactly supported extension.
#[derive(Debug, Clone)]
pub struct GammaDrift {
    pub chart: ManifoldChart,
    pub domain: Option<ConvexDomain>,
    pub drift: DriftField,
    pub trunc: TruncationParams,
}

impl GammaDrift {
    pub fn new(
        chart: ManifoldChart,
        domain: Option<ConvexDomain>,
        drift: DriftField,
        trunc: TruncationParams,
    ) -> Self {
        GammaDrift {
            chart,
            domain,
            drift,
            trunc,
        }
    }

    /// `gamma(b, x, z)`; `z` is the n x d_W tangent-coefficient matrix.
    pub fn eval(&self, b: &[f64], x: &[f64], z: &DMatrix<f64>) -> Result<DVector<f64>> {
        let n = self.chart.dim();
        if !self.chart.contains(x) {
            return Ok(DVector::zeros(n));
        }
        let phi = match &self.domain {
            Some(dom) => cutoff(dom, x)?,
            None => 1.0,
        };
        if phi == 0.0 {
            return Ok(DVector::zeros(n));
        }
        let zbar = truncate(z, &self.trunc);
        let f = self.drift.eval(b, x, &zbar);
        let gamma = self.chart.christoffel(x)?;
        // quadratic term: 1/2 Gamma^i_{jk} (row_k(zbar) | row_j(zbar))
        let row_gram = &zbar * zbar.transpose(); // (j,k) entry = ([z]^j | [z]^k)
        let mut out = DVector::zeros(n);
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..n {
                for k in 0..n {
                    acc += gamma.gamma[i][(j, k)] * row_gram[(j, k)];
                }
            }
            out[i] = phi * (0.5 * acc - f[i]);
        }
        Ok(out)
    }

    /// Sampled boundedness certificate: max |gamma| over random (b, x, z)
    /// draws with `x` in the given box and `|z| <= z_radius`.
    pub fn bound_certificate<R: Rng>(
        &self,
        x_lo: &[f64],
        x_hi: &[f64],
        z_radius: f64,
        d: usize,
        d_w: usize,
        samples: usize,
        rng: &mut R,
    ) -> Result<f64> {
        let n = self.chart.dim();
        let mut max = 0.0f64;
        for _ in 0..samples {
            let x: Vec<f64> = (0..n)
                .map(|i| rng.gen_range(x_lo[i]..x_hi[i]))
                .collect();
            let b: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut z = DMatrix::zeros(n, d_w);
            for v in z.iter_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
            let zn = z.norm();
            if zn > 0.0 {
                let target = rng.gen_range(0.0..z_radius);
                z *= target / zn;
            }
            let g = self.eval(&b, &x, &z)?;
            max = max.max(g.norm());
        }
        Ok(max)
    }
}

/// Sampling box for the empirical Lipschitz probe.
#[derive(Debug, Clone)]
pub struct ProbeBounds {
    pub b_lo: Vec<f64>,
    pub b_hi: Vec<f64>,
    pub x_lo: Vec<f64>,
    pub x_hi: Vec<f64>,
    pub z_radius: f64,
    pub noise_dim: usize,
}

/// Empirical coordinate-Lipschitz quotient and first-argument bound:
/// max over sampled pairs of
/// `|f(b,x,z) - f(b',x',z')| / ((|b-b'| + |x-x'|)(1 + |z| + |z'|) + |z-z'|)`
/// and `max_b |f(b, x0, 0)|`.
pub fn lipschitz_probe<R: Rng>(
    field: &DriftField,
    bounds: &ProbeBounds,
    samples: usize,
    rng: &mut R,
) -> (f64, f64) {
    let n = bounds.x_lo.len();
    let d = bounds.b_lo.len();
    let draw = |rng: &mut R| -> (Vec<f64>, Vec<f64>, DMatrix<f64>) {
        let b: Vec<f64> = (0..d)
            .map(|i| rng.gen_range(bounds.b_lo[i]..bounds.b_hi[i]))
            .collect();
        let x: Vec<f64> = (0..n)
            .map(|i| rng.gen_range(bounds.x_lo[i]..bounds.x_hi[i]))
            .collect();
        let mut z = DMatrix::zeros(n, bounds.noise_dim);
        for v in z.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let zn = z.norm();
        if zn > 0.0 {
            let target = rng.gen_range(0.0..bounds.z_radius.max(1e-12));
            z *= target / zn;
        }
        (b, x, z)
    };
    let mut l_emp = 0.0f64;
    for _ in 0..samples {
        let (b1, x1, z1) = draw(rng);
        let (b2, x2, z2) = draw(rng);
        let f1 = field.eval(&b1, &x1, &z1);
        let f2 = field.eval(&b2, &x2, &z2);
        let db: f64 = b1
            .iter()
            .zip(&b2)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let dx: f64 = x1
            .iter()
            .zip(&x2)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let dz = (&z1 - &z2).norm();
        let denom = (db + dx) * (1.0 + z1.norm() + z2.norm()) + dz;
        if denom > 1e-12 {
            l_emp = l_emp.max((f1 - f2).norm() / denom);
        }
    }
    let z0 = DMatrix::zeros(n, bounds.noise_dim);
    let mut l2_emp = 0.0f64;
    for _ in 0..samples.max(16) {
        let b: Vec<f64> = (0..d)
            .map(|i| rng.gen_range(bounds.b_lo[i]..bounds.b_hi[i]))
            .collect();
        l2_emp = l2_emp.max(field.eval(&b, &field.x0, &z0).norm());
    }
    (l_emp, l2_emp)
}

/// Tensor-grid quadrature weights of the normalised bump mollifier on the
/// cube of radius `1/l` in the joint (b, x, z) space.
struct MollifierGrid {
    /// offsets in the joint space, dimension d + n + n*d_w
    offsets: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

fn bump_profile(u: f64) -> f64 {
    if u >= 1.0 {
        0.0
    } else {
        (-1.0 / (1.0 - u * u)).exp()
    }
}

fn simpson_weights(m: usize) -> Vec<f64> {
    // m odd, composite Simpson on m points
    let mut w = vec![0.0; m];
    w[0] = 1.0;
    w[m - 1] = 1.0;
    for (i, wi) in w.iter_mut().enumerate().take(m - 1).skip(1) {
        *wi = if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    let h = 2.0 / (m as f64 - 1.0);
    for wi in w.iter_mut() {
        *wi *= h / 3.0;
    }
    w
}

fn build_mollifier(dim: usize, l: f64, points_per_axis: usize) -> MollifierGrid {
    let m = points_per_axis;
    let axis: Vec<f64> = (0..m)
        .map(|i| -1.0 + 2.0 * i as f64 / (m as f64 - 1.0))
        .collect();
    let w1 = simpson_weights(m);
    let mut offsets = Vec::new();
    let mut weights = Vec::new();
    let mut idx = vec![0usize; dim];
    loop {
        let u: Vec<f64> = idx.iter().map(|&i| axis[i]).collect();
        let r: f64 = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        let w: f64 = idx.iter().map(|&i| w1[i]).product();
        let rho = bump_profile(r);
        if rho > 0.0 {
            offsets.push(u.iter().map(|v| v / l).collect());
            weights.push(w * rho);
        }
        // odometer increment
        let mut k = 0;
        loop {
            idx[k] += 1;
            if idx[k] < m {
                break;
            }
            idx[k] = 0;
            k += 1;
            if k == dim {
                let total: f64 = weights.iter().sum();
                for w in weights.iter_mut() {
                    *w /= total;
                }
                return MollifierGrid { offsets, weights };
            }
        }
    }
}

/// Diagnostics of a mollification.
#[derive(Debug, Clone)]
pub struct MollifyInfo {
    pub l: f64,
    /// sampled `l * max |f_l - f|` over the boundary and the z ball
    pub c_hat: f64,
    /// outward shift coefficient `A = c_hat + 1`
    pub a: f64,
    /// smallest sampled boundary outwardness `D chi . g_l`
    pub outward_margin: f64,
}

/// Mollifies `f` against the normalised bump on scale `1/l` in the joint
/// (b, x, z) space and adds the outward shift `(A/l) x`, choosing `A` from
/// the sampled discrepancy on the domain boundary.
///
/// `gap` is the distance between the domain collar and the chart boundary;
/// the bump support `1/l` must stay below it so the zero extension of `f`
/// outside the chart is never sampled at points that matter.
pub fn mollify<R: Rng>(
    field: &DriftField,
    l: u32,
    domain: &ConvexDomain,
    d: usize,
    d_w: usize,
    gap: f64,
    z_cap: f64,
    rng: &mut R,
) -> Result<(DriftField, MollifyInfo)> {
    let n = domain.chart.dim();
    if (1.0 / l as f64) >= gap {
        return Err(Error::Config(format!(
            "mollification scale 1/{l} is not below the chart gap {gap}"
        )));
    }
    let lf = l as f64;
    let joint_dim = d + n + n * d_w;
    let coarse = build_mollifier(joint_dim, lf, 7);
    let fine = build_mollifier(joint_dim, lf, 13);
    // quadrature consistency of the normalisation integral
    let coarse_raw: f64 = {
        let g = build_mollifier(joint_dim, lf, 7);
        g.weights.len() as f64 / g.weights.len() as f64 // normalised by construction
    };
    let _ = coarse_raw;
    // consistency of f_l itself under refinement at a few probe points
    let chart = domain.chart.clone();
    let base = field.clone();
    let eval_with = |grid: &MollifierGrid, b: &[f64], x: &[f64], z: &DMatrix<f64>| -> DVector<f64> {
        let mut acc = DVector::zeros(n);
        for (off, w) in grid.offsets.iter().zip(&grid.weights) {
            let bb: Vec<f64> = b.iter().zip(&off[..d]).map(|(v, o)| v - o).collect();
            let xx: Vec<f64> = x
                .iter()
                .zip(&off[d..d + n])
                .map(|(v, o)| v - o)
                .collect();
            if !chart.contains(&xx) {
                continue; // f extended by zero outside the chart
            }
            let mut zz = z.clone();
            for (t, v) in zz.iter_mut().enumerate() {
                *v -= off[d + n + t];
            }
            acc += *w * base.eval(&bb, &xx, &zz);
        }
        acc
    };
    {
        let probe_x = domain.sample(rng)?;
        let b0 = vec![0.0; d];
        let z0 = DMatrix::zeros(n, d_w);
        let fc = eval_with(&coarse, &b0, &probe_x, &z0);
        let ff = eval_with(&fine, &b0, &probe_x, &z0);
        let scale = ff.norm().max(1.0);
        let change = (fc - &ff).norm() / scale;
        if change > 1e-4 {
            return Err(Error::Accuracy {
                change,
                tolerance: 1e-4,
            });
        }
    }
    // sample the boundary to fit C^ = l max |f_l - f|
    let boundary = sample_boundary(domain, 64, rng)?;
    let mut c_hat = 0.0f64;
    for x in &boundary {
        for _ in 0..4 {
            let b: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut z = DMatrix::zeros(n, d_w);
            for v in z.iter_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
            let zn = z.norm();
            if zn > 0.0 {
                z *= rng.gen_range(0.0..z_cap) / zn;
            }
            let fl = eval_with(&fine, &b, x, &z);
            let f = field.eval(&b, x, &z);
            c_hat = c_hat.max(lf * (fl - f).norm());
        }
    }
    let a = c_hat + 1.0;
    // outwardness of g_l on the boundary sample
    let mut outward_margin = f64::INFINITY;
    for x in &boundary {
        let dchi = domain.chi_gradient(x)?;
        let b = vec![0.0; d];
        let z = DMatrix::zeros(n, d_w);
        let gl = eval_with(&fine, &b, x, &z) + (a / lf) * DVector::from_column_slice(x);
        outward_margin = outward_margin.min(dchi.dot(&gl));
    }
    let info = MollifyInfo {
        l: lf,
        c_hat,
        a,
        outward_margin,
    };
    let shift = a / lf;
    let grid = fine;
    let chart2 = domain.chart.clone();
    let base2 = field.clone();
    let z_independent = !field.z_dependent;
    let closure: CustomDrift = Arc::new(move |b: &[f64], x: &[f64], z: &DMatrix<f64>| {
        let mut acc = DVector::zeros(n);
        for (off, w) in grid.offsets.iter().zip(&grid.weights) {
            let xx: Vec<f64> = x
                .iter()
                .zip(&off[d..d + n])
                .map(|(v, o)| v - o)
                .collect();
            if !chart2.contains(&xx) {
                continue;
            }
            let bb: Vec<f64> = b.iter().zip(&off[..d]).map(|(v, o)| v - o).collect();
            if z_independent {
                acc += *w * base2.eval(&bb, &xx, z);
            } else {
                let mut zz = z.clone();
                for (t, v) in zz.iter_mut().enumerate() {
                    *v -= off[d + n + t];
                }
                acc += *w * base2.eval(&bb, &xx, &zz);
            }
        }
        acc + shift * DVector::from_column_slice(x)
    });
    let out = DriftField::custom(
        closure,
        field.z_dependent,
        field.lip_l + shift,
        field.lip_l2 + shift * field.x0.iter().map(|v| v * v).sum::<f64>().sqrt(),
        field.x0.clone(),
    );
    Ok((out, info))
}

/// Samples the boundary `{chi = c}` by bisection along random rays from an
/// interior point.
pub fn sample_boundary<R: Rng>(
    domain: &ConvexDomain,
    count: usize,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    let n = domain.chart.dim();
    // interior anchor: ball centre when available, else rejection sample
    let anchor: Vec<f64> = match &domain.ball {
        Some(b) => {
            let c = b.center.clone();
            if domain.chart.contains(&c) && domain.chi(&c)? < domain.level {
                c
            } else {
                domain.sample(rng)?
            }
        }
        None => domain.sample(rng)?,
    };
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0;
    while out.len() < count {
        attempts += 1;
        if attempts > 100 * count {
            return Err(Error::OutsideChart { point: anchor });
        }
        let mut dir = vec![0.0; n];
        for v in dir.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let norm: f64 = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-12 {
            continue;
        }
        for v in dir.iter_mut() {
            *v /= norm;
        }
        // expand until chi > level or chart boundary
        let mut t_hi = 1e-3;
        let mut found = false;
        while t_hi < 1e6 {
            let p: Vec<f64> = anchor
                .iter()
                .zip(&dir)
                .map(|(a, d)| a + t_hi * d)
                .collect();
            if !domain.chart.contains(&p) {
                break;
            }
            if domain.chi(&p)? > domain.level {
                found = true;
                break;
            }
            t_hi *= 2.0;
        }
        if !found {
            continue;
        }
        let mut lo = 0.0;
        let mut hi = t_hi;
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            let p: Vec<f64> = anchor
                .iter()
                .zip(&dir)
                .map(|(a, d)| a + mid * d)
                .collect();
            if domain.chi(&p)? > domain.level {
                hi = mid;
            } else {
                lo = mid;
            }
            if hi - lo < 1e-8 * (1.0 + hi) {
                break;
            }
        }
        let p: Vec<f64> = anchor
            .iter()
            .zip(&dir)
            .map(|(a, d)| a + lo * d)
            .collect();
        out.push(p);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::convexity::ChiKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn flat_interval_domain() -> ConvexDomain {
        let chart = ManifoldChart::flat_bounded(1, vec![-3.0], vec![3.0]);
        ConvexDomain::new(
            chart,
            ChiKind::NormSquaredFrom { center: vec![0.0] },
            1.0,
            1.5,
            None,
        )
        .unwrap()
    }

    #[test]
    fn truncation_identity_below_threshold() {
        let p = TruncationParams::new(0.5).unwrap();
        let z = DMatrix::from_column_slice(1, 1, &[1.0]);
        assert_eq!(truncate(&z, &p), z);
        let z0 = DMatrix::from_column_slice(1, 1, &[0.0]);
        assert_eq!(truncate(&z0, &p)[(0, 0)], 0.0);
    }

    #[test]
    fn truncation_linear_regime() {
        let p = TruncationParams::with_width(0.5, 2.0).unwrap();
        // |z| = 10: s = 8 (ramp saturated), zbar = z/9
        let z = DMatrix::from_column_slice(1, 1, &[10.0]);
        let zb = truncate(&z, &p);
        assert!((zb.norm() - 10.0 / 9.0).abs() < 1e-12);
        assert!((p.s_eps(10.0) - 8.0).abs() < 1e-12);
        // exactly at the threshold s = 0
        assert_eq!(p.s_eps(2.0), 0.0);
        assert!(p.s_eps(2.0 + 1e-9) >= 0.0);
    }

    #[test]
    fn ramp_is_nondecreasing() {
        let p = TruncationParams::new(0.25).unwrap();
        let mut prev = 0.0;
        for i in 0..400 {
            let t = i as f64 * 0.05;
            let s = p.s_eps(t);
            assert!(s + 1e-12 >= prev, "t {t}");
            prev = s;
        }
    }

    #[test]
    fn truncation_is_lipschitz_sampled() {
        let p = TruncationParams::new(0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut quotient: f64 = 0.0;
        for _ in 0..2000 {
            let mut z1 = DMatrix::zeros(2, 2);
            let mut z2 = DMatrix::zeros(2, 2);
            for v in z1.iter_mut() {
                *v = rng.gen_range(-6.0..6.0);
            }
            for v in z2.iter_mut() {
                *v = rng.gen_range(-6.0..6.0);
            }
            let d = (&z1 - &z2).norm();
            if d < 1e-9 {
                continue;
            }
            let db = (truncate(&z1, &p) - truncate(&z2, &p)).norm();
            quotient = quotient.max(db / d);
        }
        assert!(quotient.is_finite() && quotient < 5.0, "quotient {quotient}");
    }

    #[test]
    fn cutoff_examples() {
        let dom = flat_interval_domain();
        assert_eq!(cutoff(&dom, &[0.5]).unwrap(), 1.0);
        assert_eq!(cutoff(&dom, &[1.4]).unwrap(), 0.0); // chi = 1.96 > 1.5
        // chi midway between c and c1: 1.25 -> 0.5
        let x = (1.25f64).sqrt();
        assert!((cutoff(&dom, &[x]).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn gamma_flat_constant_drift() {
        let dom = flat_interval_domain();
        let chart = dom.chart.clone();
        let g = GammaDrift::new(
            chart,
            Some(dom),
            DriftField::constant(vec![0.3]),
            TruncationParams::new(0.5).unwrap(),
        );
        let z = DMatrix::from_column_slice(1, 1, &[1.0]);
        let v = g.eval(&[0.0], &[0.2], &z).unwrap();
        assert!((v[0] + 0.3).abs() < 1e-14);
        // outside the collar both factors are cut off
        let v = g.eval(&[0.0], &[2.0], &z).unwrap();
        assert_eq!(v[0], 0.0);
    }

    #[test]
    fn gamma_half_plane_christoffel_term() {
        let chart = ManifoldChart::half_plane(-10.0, 10.0, 0.05, 40.0);
        let g = GammaDrift::new(
            chart,
            None,
            DriftField::zero(2),
            TruncationParams::new(0.5).unwrap(),
        );
        let z = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        let v = g.eval(&[0.0], &[0.0, 2.0], &z).unwrap();
        assert!((v[1] - 0.25).abs() < 1e-12, "gamma^y = {}", v[1]);
        assert!(v[0].abs() < 1e-12);
    }

    #[test]
    fn gamma_saturates_in_z() {
        let chart = ManifoldChart::half_plane(-10.0, 10.0, 0.05, 40.0);
        let g = GammaDrift::new(
            chart.clone(),
            None,
            DriftField::zero(2),
            TruncationParams::new(0.5).unwrap(),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let lo = [-2.0, 0.5];
        let hi = [2.0, 3.0];
        let at_threshold = g
            .bound_certificate(&lo, &hi, 2.0, 1, 1, 5000, &mut rng)
            .unwrap();
        let beyond = g
            .bound_certificate(&lo, &hi, 20.0, 1, 1, 5000, &mut rng)
            .unwrap();
        assert!(at_threshold.is_finite() && beyond.is_finite());
        // the truncation plateau keeps gamma from growing with |z|
        assert!(beyond <= at_threshold * 1.6 + 1e-9, "{beyond} vs {at_threshold}");
    }

    #[test]
    fn lipschitz_probe_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let bounds = ProbeBounds {
            b_lo: vec![-1.0],
            b_hi: vec![1.0],
            x_lo: vec![-1.0],
            x_hi: vec![1.0],
            z_radius: 2.0,
            noise_dim: 1,
        };
        let (l, l2) = lipschitz_probe(&DriftField::constant(vec![0.7]), &bounds, 500, &mut rng);
        assert_eq!(l, 0.0);
        assert!((l2 - 0.7).abs() < 1e-12);

        let (l, _) = lipschitz_probe(&DriftField::radial(1.0, 1), &bounds, 2000, &mut rng);
        assert!(l <= 1.0 + 1e-9, "L' = {l}");
        assert!(l > 0.5);

        let (l, _) = lipschitz_probe(&DriftField::linear_z(1.0, 0, 1), &bounds, 2000, &mut rng);
        assert!(l <= 1.0 + 1e-9, "L' = {l}");
    }

    #[test]
    fn mollify_constant_is_identity_inside() {
        let dom = flat_interval_domain();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let f = DriftField::constant(vec![0.4]);
        let (fl, info) = mollify(&f, 50, &dom, 1, 1, 1.3, 2.0, &mut rng).unwrap();
        let z = DMatrix::zeros(1, 1);
        let v = fl.eval(&[0.0], &[0.1], &z);
        // g_l = f_l + (A/l) x; subtract the shift to compare with f
        let expected = 0.4 + info.a / 50.0 * 0.1;
        assert!((v[0] - expected).abs() < 1e-9, "{} vs {expected}", v[0]);
        assert!(info.c_hat < 1e-8);
    }

    #[test]
    fn mollify_linear_close_to_original() {
        let dom = flat_interval_domain();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let f = DriftField::radial(1.0, 1);
        let (fl, info) = mollify(&f, 100, &dom, 1, 1, 1.3, 2.0, &mut rng).unwrap();
        let z = DMatrix::zeros(1, 1);
        for &x in &[-0.9, -0.3, 0.0, 0.4, 0.8] {
            let v = fl.eval(&[0.0], &[x], &z)[0] - info.a / 100.0 * x;
            assert!((v - x).abs() <= 1.0 / 100.0 + 1e-9, "x {x} got {v}");
        }
        // f = x points outward on the boundary of {x^2 <= 1}, so g_l must too
        assert!(info.outward_margin > 0.0);
    }

    #[test]
    fn mollified_drifts_have_uniform_lipschitz_constants() {
        let dom = flat_interval_domain();
        let f = DriftField::radial(1.0, 1);
        let bounds = ProbeBounds {
            b_lo: vec![-1.0],
            b_hi: vec![1.0],
            x_lo: vec![-1.0],
            x_hi: vec![1.0],
            z_radius: 2.0,
            noise_dim: 1,
        };
        let mut ls = Vec::new();
        for l in [25u32, 50, 100] {
            let mut rng = ChaCha8Rng::seed_from_u64(31);
            let (fl, _) = mollify(&f, l, &dom, 1, 1, 1.3, 2.0, &mut rng).unwrap();
            let (lp, _) = lipschitz_probe(&fl, &bounds, 800, &mut rng);
            ls.push(lp);
        }
        let max = ls.iter().cloned().fold(f64::MIN, f64::max);
        let min = ls.iter().cloned().fold(f64::MAX, f64::min);
        assert!((max - min) / min < 0.10, "constants {ls:?}");
    }

    #[test]
    fn mollifier_convergence_rate() {
        // a linear drift is reproduced exactly by the symmetric bump, so the
        // rate is measured on a cubic one
        let dom = flat_interval_domain();
        let f = DriftField::custom(
            Arc::new(|_b: &[f64], x: &[f64], _z: &DMatrix<f64>| {
                DVector::from_vec(vec![x[0] * x[0] * x[0]])
            }),
            false,
            3.0,
            0.0,
            vec![0.0],
        );
        let z = DMatrix::zeros(1, 1);
        let mut errs = Vec::new();
        for l in [25u32, 50, 100] {
            let mut rng = ChaCha8Rng::seed_from_u64(37);
            let (fl, info) = mollify(&f, l, &dom, 1, 1, 1.3, 2.0, &mut rng).unwrap();
            let mut err = 0.0f64;
            for &x in &[-0.8, -0.4, 0.0, 0.4, 0.8] {
                let v = fl.eval(&[0.0], &[x], &z)[0] - info.a / l as f64 * x;
                err = err.max((v - x * x * x).abs());
            }
            errs.push(err);
        }
        // at least O(1/l): doubling l should at least halve the error
        assert!(errs[1] <= 0.6 * errs[0], "{errs:?}");
        assert!(errs[2] <= 0.6 * errs[1], "{errs:?}");
        assert!(errs[0] <= 1.0 / 25.0, "{errs:?}");
    }

    #[test]
    fn boundary_sampler_lands_on_level_set() {
        let dom = flat_interval_domain();
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let pts = sample_boundary(&dom, 32, &mut rng).unwrap();
        for p in pts {
            assert!((dom.chi(&p).unwrap() - 1.0).abs() < 1e-5, "chi {}", dom.chi(&p).unwrap());
        }
    }
}
