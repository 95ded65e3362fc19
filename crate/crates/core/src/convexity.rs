//! Convex domains and separating functions on them.
//!
//! The working domain is a sublevel set `{chi <= c}` of a convex function,
//! strictly inside the chart. Two separating functions are provided: half
//! squared distance (valid in Hadamard mode) and Kendall's function on a
//! regular geodesic ball with positive curvature bound. The cosine function
//! `phi` drives the exponential integrability estimate for the Z process.

use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ChartKind, ManifoldChart, MetricExpr};

/// The convex function whose sublevel set is the working domain.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum ChiKind {
    /// Euclidean coordinate form `|x - o|^2`.
    NormSquaredFrom { center: Vec<f64> },
    /// Riemannian form `delta(o, x)^2`.
    DistanceSquaredTo { center: Vec<f64> },
    /// Custom polynomial in the chart coordinates.
    Polynomial { expr: MetricExpr },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeodesicBall {
    /// Centre in chart coordinates. For the sphere-cap chart the polar
    /// coordinates are built around the centre, which is the r = 0 pole.
    pub center: Vec<f64>,
    pub radius: f64,
}

/// Working domain `{chi <= c}`, relatively compact in the chart.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvexDomain {
    pub chart: ManifoldChart,
    pub chi: ChiKind,
    /// sublevel `c`
    pub level: f64,
    /// collar level `c1 > c` where the cut-off reaches zero
    pub collar: f64,
    /// declared lower bound on the eigenvalues of Hess chi (0 = report mode)
    pub strictness: f64,
    pub ball: Option<GeodesicBall>,
}

impl ConvexDomain {
    pub fn new(
        chart: ManifoldChart,
        chi: ChiKind,
        level: f64,
        collar: f64,
        ball: Option<GeodesicBall>,
    ) -> Result<Self> {
        if collar <= level {
            return Err(Error::Config(format!(
                "collar level {collar} must exceed the domain level {level}"
            )));
        }
        if let Some(b) = &ball {
            let k = chart.curvature_upper_bound;
            if k > 0.0 && b.radius * k.sqrt() >= std::f64::consts::FRAC_PI_2 {
                return Err(Error::Config(format!(
                    "ball is not regular: radius {} * sqrt(K) >= pi/2",
                    b.radius
                )));
            }
        }
        Ok(ConvexDomain {
            chart,
            chi,
            level,
            collar,
            strictness: 0.0,
            ball,
        })
    }

    /// Geodesic ball domain with `chi = delta(o, .)^2` and `c = rho^2`.
    pub fn geodesic_ball(chart: ManifoldChart, center: Vec<f64>, radius: f64, collar_radius: f64) -> Result<Self> {
        let chi = ChiKind::DistanceSquaredTo {
            center: center.clone(),
        };
        Self::new(
            chart,
            chi,
            radius * radius,
            collar_radius * collar_radius,
            Some(GeodesicBall { center, radius }),
        )
    }

    pub fn chi(&self, x: &[f64]) -> Result<f64> {
        match &self.chi {
            ChiKind::NormSquaredFrom { center } => Ok(x
                .iter()
                .zip(center)
                .map(|(a, b)| (a - b) * (a - b))
                .sum()),
            ChiKind::DistanceSquaredTo { center } => {
                let d = self.distance_from(center, x)?;
                Ok(d * d)
            }
            ChiKind::Polynomial { expr } => Ok(expr.eval(x)),
        }
    }

    /// Coordinate gradient of chi by central differences.
    pub fn chi_gradient(&self, x: &[f64]) -> Result<DVector<f64>> {
        let f = |p: &[f64]| self.chi(p).unwrap_or(f64::NAN);
        Ok(self.chart.euclidean_gradient(&f, x))
    }

    pub fn contains(&self, x: &[f64]) -> Result<bool> {
        Ok(self.chi(x)? <= self.level)
    }

    /// Distance from a reference point, routed through the radial coordinate
    /// on the sphere-cap chart (whose pole is not a chart point).
    fn distance_from(&self, reference: &[f64], x: &[f64]) -> Result<f64> {
        if matches!(self.chart.kind, ChartKind::SphereCap { .. })
            && reference.iter().all(|&c| c == 0.0)
        {
            return Ok(x[0]);
        }
        self.chart.distance(reference, x)
    }

    /// Distance to the geodesic-ball centre.
    pub fn distance_to_center(&self, x: &[f64]) -> Result<f64> {
        let ball = self.ball.as_ref().ok_or_else(|| {
            Error::Config("operation requires a geodesic-ball domain".into())
        })?;
        self.distance_from(&ball.center, x)
    }

    /// Rejection-samples a point of the domain (uniform over the chart box
    /// restricted to the sublevel set).
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Result<Vec<f64>> {
        let n = self.chart.dim();
        for _ in 0..100_000 {
            let mut x = vec![0.0; n];
            for i in 0..n {
                x[i] = rng.gen_range(self.chart.bounds.lo[i]..self.chart.bounds.hi[i]);
            }
            if self.chi(&x)? <= self.level {
                return Ok(x);
            }
        }
        Err(Error::Statistics { needed: 1, got: 0 })
    }
}

/// Separating-function selection.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum PsiKind {
    HalfDistanceSquared,
    Kendall { h: f64, p: u32 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeparatingFunction {
    pub kind: PsiKind,
}

impl SeparatingFunction {
    pub fn half_distance_squared() -> Self {
        SeparatingFunction {
            kind: PsiKind::HalfDistanceSquared,
        }
    }

    pub fn kendall(h: f64, p: u32) -> Self {
        SeparatingFunction {
            kind: PsiKind::Kendall { h, p },
        }
    }

    /// Equivalence exponent nu with `Psi ~ delta^nu`.
    pub fn nu(&self) -> u32 {
        match self.kind {
            PsiKind::HalfDistanceSquared => 2,
            PsiKind::Kendall { p, .. } => p,
        }
    }

    pub fn eval(&self, domain: &ConvexDomain, x: &[f64], x2: &[f64]) -> Result<f64> {
        match self.kind {
            PsiKind::HalfDistanceSquared => half_distance_squared(domain, x, x2),
            PsiKind::Kendall { h, p } => kendall_psi(domain, x, x2, h, p),
        }
    }
}

/// `Psi(x, x') = delta(x, x')^2 / 2`; requires Hadamard mode, where it is convex.
pub fn half_distance_squared(domain: &ConvexDomain, x: &[f64], x2: &[f64]) -> Result<f64> {
    if domain.chart.curvature_upper_bound != 0.0 {
        return Err(Error::Parameter(
            "half squared distance needs the Hadamard curvature flag (K = 0)".into(),
        ));
    }
    let d = domain.chart.distance(x, x2)?;
    Ok(0.5 * d * d)
}

/// Kendall's separating function on a regular geodesic ball with K > 0.
pub fn kendall_psi(domain: &ConvexDomain, x: &[f64], x2: &[f64], h: f64, p: u32) -> Result<f64> {
    let k = domain.chart.curvature_upper_bound;
    if k <= 0.0 {
        return Err(Error::Parameter(
            "Kendall's function needs a positive curvature bound".into(),
        ));
    }
    let sk = k.sqrt();
    let dxo = domain.distance_to_center(x)?;
    let dx2o = domain.distance_to_center(x2)?;
    let dxx = domain.chart.distance(x, x2)?;
    let denom = (sk * dxo).cos() * (sk * dx2o).cos() - h * h;
    if denom <= 0.0 {
        return Err(Error::Parameter(format!(
            "Kendall denominator {denom:.3e} <= 0: h = {h} too large for this ball"
        )));
    }
    let num = 1.0 - (sk * dxx).cos();
    Ok((num / denom).powi(p as i32))
}

/// Default Kendall parameter `h`, rechecked against denominator positivity.
pub fn kendall_default_h(k: f64, radius: f64) -> f64 {
    0.1 * (k.sqrt() * radius).cos()
}

/// `phi(x) = cos(pi/(3 rho) * delta(o, x))`, valued in [1/2, 1] on the ball.
pub fn integrability_phi(domain: &ConvexDomain, x: &[f64]) -> Result<f64> {
    let ball = domain
        .ball
        .as_ref()
        .ok_or_else(|| Error::Config("integrability phi needs a geodesic-ball domain".into()))?;
    let d = domain.distance_to_center(x)?;
    Ok((std::f64::consts::PI / (3.0 * ball.radius) * d).cos())
}

/// The exponent making `Hess phi + 2 alpha phi |u|_r^2 <= 0` hold on the ball.
pub fn alpha_for_ball(radius: f64) -> f64 {
    let t = std::f64::consts::PI / (3.0 * radius);
    0.5 * t * t
}

/// Worst margin of the pointwise inequality `Hess phi<u,u> + 2 alpha phi |u|_r^2 <= 0`
/// over `samples` random pairs (x, u); the reported value should not exceed
/// the test tolerance. Also returns the witness point of the worst case.
pub fn min1_margin<R: Rng>(
    domain: &ConvexDomain,
    alpha: f64,
    samples: usize,
    rng: &mut R,
) -> Result<(f64, Vec<f64>)> {
    let ball = domain
        .ball
        .as_ref()
        .ok_or_else(|| Error::Config("min1 check needs a geodesic-ball domain".into()))?;
    let n = domain.chart.dim();
    let mut worst = f64::NEG_INFINITY;
    let mut witness = vec![0.0; n];
    let phi = |p: &[f64]| integrability_phi(domain, p).unwrap_or(f64::NAN);
    let mut accepted = 0;
    while accepted < samples {
        let x = domain.sample(rng)?;
        // keep away from the centre, where delta(o, .) has a conic point
        if domain.distance_to_center(&x)? < 0.05 * ball.radius {
            continue;
        }
        accepted += 1;
        let mut u = vec![0.0; n];
        for ui in u.iter_mut() {
            *ui = rng.gen_range(-1.0..1.0);
        }
        let nr = domain.chart.norm_vec(&x, &u)?;
        if nr < 1e-12 {
            continue;
        }
        for ui in u.iter_mut() {
            *ui /= nr;
        }
        let hess = domain.chart.manifold_hessian(phi, &x)?;
        let uv = DVector::from_column_slice(&u);
        let quad = (uv.transpose() * hess * &uv)[0];
        let margin = quad + 2.0 * alpha * phi(&x); // |u|_r = 1
        if margin > worst {
            worst = margin;
            witness = x;
        }
    }
    Ok((worst, witness))
}

/// Minimum normalised second difference of `Psi` along random product
/// geodesics; nonnegative values certify convexity on the sample.
pub fn psi_convexity_margin<R: Rng>(
    domain: &ConvexDomain,
    psi: &SeparatingFunction,
    samples: usize,
    rng: &mut R,
) -> Result<f64> {
    let step = 1e-3;
    let mut min_margin = f64::INFINITY;
    for _ in 0..samples {
        let a0 = domain.sample(rng)?;
        let a1 = domain.sample(rng)?;
        let b0 = domain.sample(rng)?;
        let b1 = domain.sample(rng)?;
        let v0 = match domain.chart.log_map(&a0, &a1) {
            Ok(v) => v,
            Err(_) => continue,
        };
        let v1 = match domain.chart.log_map(&b0, &b1) {
            Ok(v) => v,
            Err(_) => continue,
        };
        let eval_at = |t: f64| -> Result<f64> {
            let p0 = domain.chart.geodesic_shoot(&a0, v0.as_slice(), t)?;
            let p1 = domain.chart.geodesic_shoot(&b0, v1.as_slice(), t)?;
            psi.eval(domain, p0.as_slice(), p1.as_slice())
        };
        for &t in &[0.25, 0.5, 0.75] {
            let (fm, f0, fp) = match (eval_at(t - step), eval_at(t), eval_at(t + step)) {
                (Ok(a), Ok(b), Ok(c)) => (a, b, c),
                _ => continue,
            };
            let second = (fp - 2.0 * f0 + fm) / (step * step);
            min_margin = min_margin.min(second);
        }
    }
    Ok(min_margin)
}

/// Fits the equivalence constant of `Psi ~ delta^nu` over a sample:
/// the smallest `c` with `delta^nu / c <= Psi <= c delta^nu`.
pub fn psi_equivalence_constant<R: Rng>(
    domain: &ConvexDomain,
    psi: &SeparatingFunction,
    samples: usize,
    rng: &mut R,
) -> Result<f64> {
    let nu = psi.nu() as i32;
    let mut c = 1.0f64;
    for _ in 0..samples {
        let x = domain.sample(rng)?;
        let y = domain.sample(rng)?;
        let d = domain.chart.distance(&x, &y)?;
        if d < 1e-6 {
            continue;
        }
        let ratio = psi.eval(domain, &x, &y)? / d.powi(nu);
        if ratio > 0.0 {
            c = c.max(ratio).max(1.0 / ratio);
        }
    }
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn half_plane_ball(radius: f64) -> ConvexDomain {
        let chart = ManifoldChart::half_plane(-6.0, 6.0, 0.05, 40.0);
        ConvexDomain::geodesic_ball(chart, vec![0.0, 1.5], radius, radius + 0.4).unwrap()
    }

    #[test]
    fn half_distance_squared_examples() {
        let flat = ManifoldChart::flat(2);
        let dom = ConvexDomain::new(
            flat,
            ChiKind::NormSquaredFrom {
                center: vec![0.0, 0.0],
            },
            100.0,
            110.0,
            None,
        )
        .unwrap();
        assert_eq!(
            half_distance_squared(&dom, &[1.0, 2.0], &[1.0, 2.0]).unwrap(),
            0.0
        );
        assert!((half_distance_squared(&dom, &[0.0, 0.0], &[3.0, 4.0]).unwrap() - 12.5).abs() < 1e-12);

        let dom = half_plane_ball(0.9);
        let v = half_distance_squared(&dom, &[0.0, 1.0], &[0.0, std::f64::consts::E]).unwrap();
        assert!((v - 0.5).abs() < 1e-12);
    }

    #[test]
    fn kendall_scalar_cross_check() {
        // points on the unit-curvature cap with delta(x,o) = delta(x',o) = 0.3
        // and delta(x,x') = 0.2
        let chart = ManifoldChart::sphere_cap(1.0, 0.01, 1.2);
        let dom = ConvexDomain::geodesic_ball(chart, vec![0.0, 0.0], 0.9, 1.1).unwrap();
        let cos_phi = ((0.2f64).cos() - (0.3f64).cos().powi(2)) / (0.3f64).sin().powi(2);
        let phi = cos_phi.acos();
        let x = [0.3, 0.0];
        let x2 = [0.3, phi];
        let expect = {
            let num = 1.0 - (0.2f64).cos();
            let den = (0.3f64).cos().powi(2) - 0.01;
            (num / den).powi(2)
        };
        let v = kendall_psi(&dom, &x, &x2, 0.1, 2).unwrap();
        assert!((v - expect).abs() < 1e-12, "got {v}, expected {expect}");
        assert!((v - 4.8765e-4).abs() < 5e-8);
        // diagonal vanishes
        assert_eq!(kendall_psi(&dom, &x, &x, 0.1, 2).unwrap(), 0.0);
        // doubling p squares the value
        let v4 = kendall_psi(&dom, &x, &x2, 0.1, 4).unwrap();
        assert!((v4 - v * v).abs() < 1e-12);
    }

    #[test]
    fn kendall_rejects_large_h() {
        let chart = ManifoldChart::sphere_cap(1.0, 0.01, 1.4);
        let dom = ConvexDomain::geodesic_ball(chart, vec![0.0, 0.0], 1.2, 1.35).unwrap();
        let err = kendall_psi(&dom, &[1.15, 0.0], &[1.15, 1.0], 0.9, 2).unwrap_err();
        assert!(matches!(err, Error::Parameter(_)));
    }

    #[test]
    fn integrability_phi_examples() {
        let dom = half_plane_ball(1.0);
        // at the centre
        assert!((integrability_phi(&dom, &[0.0, 1.5]).unwrap() - 1.0).abs() < 1e-12);
        // at radius rho: cos(pi/3) = 1/2; vertical point at distance 1 is (0, 1.5 e)
        let x = [0.0, 1.5 * std::f64::consts::E];
        assert!((integrability_phi(&dom, &x).unwrap() - 0.5).abs() < 1e-12);
        // rho = 1, distance 1/2
        let x = [0.0, 1.5 * (0.5f64).exp()];
        let expect = (std::f64::consts::PI / 6.0).cos();
        assert!((integrability_phi(&dom, &x).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn alpha_examples() {
        assert!((alpha_for_ball(1.0) - 0.5483).abs() < 1e-4);
        assert!((alpha_for_ball(std::f64::consts::PI / 3.0) - 0.5).abs() < 1e-12);
        assert!((alpha_for_ball(2.0) / alpha_for_ball(1.0) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn min1_holds_on_half_plane_ball() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let dom = half_plane_ball(1.0);
        let (margin, _witness) = min1_margin(&dom, alpha_for_ball(1.0), 200, &mut rng).unwrap();
        assert!(margin <= 1e-6, "margin {margin}");
    }

    #[test]
    fn psi_convexity_on_half_plane_ball() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let dom = half_plane_ball(0.8);
        let psi = SeparatingFunction::half_distance_squared();
        let margin = psi_convexity_margin(&dom, &psi, 100, &mut rng).unwrap();
        assert!(margin >= -1e-6, "margin {margin}");
    }

    #[test]
    fn psi_equivalence_constant_is_stable() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let dom = half_plane_ball(0.8);
        let psi = SeparatingFunction::half_distance_squared();
        let c1 = psi_equivalence_constant(&dom, &psi, 300, &mut rng).unwrap();
        let c2 = psi_equivalence_constant(&dom, &psi, 600, &mut rng).unwrap();
        assert!(c1.is_finite() && c2.is_finite());
        assert!((c2 - c1).abs() / c1 < 0.2, "c1 {c1} c2 {c2}");
    }

    #[test]
    fn collar_below_level_rejected() {
        let flat = ManifoldChart::flat(1);
        let err = ConvexDomain::new(
            flat,
            ChiKind::NormSquaredFrom { center: vec![0.0] },
            1.0,
            0.5,
            None,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
