//! Geometry self-test: runs the kernel invariants on a chart and reports
//! one line per check.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use mbsde_core::error::{Error, Result};
use mbsde_core::geometry::{ChartKind, ManifoldChart, TangentMatrix};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeomCheck {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeomReport {
    pub chart: String,
    pub checks: Vec<GeomCheck>,
    pub pass: bool,
}

/// Safe sampling box and shoot radius per chart.
fn sampling(chart: &ManifoldChart) -> (Vec<f64>, Vec<f64>, f64) {
    match &chart.kind {
        ChartKind::Flat { dim } => (vec![-1.5; *dim], vec![1.5; *dim], 1.0),
        ChartKind::HalfPlane => (vec![-1.0, 0.8], vec![1.0, 2.5], 0.3),
        ChartKind::SphereCap { .. } => (vec![0.2, -1.0], vec![1.0, 1.0], 0.2),
        ChartKind::Custom { dim, .. } => {
            let lo: Vec<f64> = (0..*dim)
                .map(|i| 0.75 * chart.bounds.lo[i] + 0.25 * chart.bounds.hi[i])
                .collect();
            let hi: Vec<f64> = (0..*dim)
                .map(|i| 0.25 * chart.bounds.lo[i] + 0.75 * chart.bounds.hi[i])
                .collect();
            let r = chart
                .injectivity_radius_hint
                .unwrap_or(0.25 * (chart.bounds.hi[0] - chart.bounds.lo[0]));
            (lo, hi, 0.5 * r)
        }
        ChartKind::Product(_, _) => {
            let d = chart.dim();
            (vec![-1.0; d], vec![1.0; d], 0.3)
        }
    }
}

pub fn geomtest(chart: &ManifoldChart, samples: usize, seed: u64) -> Result<GeomReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = chart.dim();
    let (lo, hi, radius) = sampling(chart);
    let draw_point = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..n).map(|i| rng.gen_range(lo[i]..hi[i])).collect()
    };
    let mut checks = Vec::new();

    // metric positive definiteness
    let mut min_eig = f64::INFINITY;
    for _ in 0..samples {
        let x = draw_point(&mut rng);
        min_eig = min_eig.min(chart.metric_min_eigenvalue(&x)?);
    }
    checks.push(GeomCheck {
        name: "metric-min-eigenvalue".into(),
        value: min_eig,
        tolerance: 0.0,
        pass: min_eig > 0.0,
    });

    // Christoffel symmetry and finite-difference agreement
    let mut asym = 0.0f64;
    let mut fd_err = 0.0f64;
    for _ in 0..samples.min(100) {
        let x = draw_point(&mut rng);
        let c = chart.christoffel(&x)?;
        let fd = chart.christoffel_fd(&x)?;
        for i in 0..n {
            asym = asym.max((&c.gamma[i] - c.gamma[i].transpose()).amax());
            fd_err = fd_err.max((&c.gamma[i] - &fd.gamma[i]).amax());
        }
    }
    checks.push(GeomCheck {
        name: "christoffel-symmetry".into(),
        value: asym,
        tolerance: 1e-12,
        pass: asym <= 1e-12,
    });
    checks.push(GeomCheck {
        name: "christoffel-fd-agreement".into(),
        value: fd_err,
        tolerance: 1e-5,
        pass: fd_err <= 1e-5,
    });

    // norm equivalence constant
    let mut c_fit = 1.0f64;
    for _ in 0..samples {
        let x = draw_point(&mut rng);
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let e: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if e < 1e-12 {
            continue;
        }
        let r = chart.norm_vec(&x, &v)?;
        c_fit = c_fit.max(r / e).max(e / r);
    }
    checks.push(GeomCheck {
        name: "norm-equivalence-constant".into(),
        value: c_fit,
        tolerance: f64::INFINITY,
        pass: c_fit.is_finite(),
    });

    // geodesic speed conservation and exp/log round trip
    let mut speed_drift = 0.0f64;
    let mut roundtrip = 0.0f64;
    let mut transport_err = 0.0f64;
    let mut tried = 0usize;
    while tried < samples.min(60) {
        let x = draw_point(&mut rng);
        let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let nr = chart.norm_vec(&x, &v)?;
        if nr < 1e-9 {
            continue;
        }
        let target = rng.gen_range(0.1..radius);
        for c in v.iter_mut() {
            *c *= target / nr;
        }
        let shot = match chart.geodesic_shoot_full(&x, &v, 1.0) {
            Ok(s) => s,
            Err(_) => continue,
        };
        tried += 1;
        let end: Vec<f64> = shot.0.as_slice().to_vec();
        let speed0 = chart.norm_vec(&x, &v)?;
        let speed1 = chart.norm_vec(&end, shot.1.as_slice())?;
        speed_drift = speed_drift.max((speed1 - speed0).abs() / speed0);
        if let Ok(back) = chart.log_map(&x, &end) {
            let diff: f64 = back
                .iter()
                .zip(&v)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            roundtrip = roundtrip.max(diff);
        }
        // transport isometry along the same geodesic
        let mut z: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let zn = chart.norm_vec(&x, &z)?;
        if zn > 1e-9 {
            for c in z.iter_mut() {
                *c /= zn;
            }
            let t = chart.parallel_transport(
                &end,
                &TangentMatrix::single(
                    nalgebra::DVector::from_column_slice(&x),
                    nalgebra::DVector::from_column_slice(&z),
                ),
            )?;
            let tn = chart.norm_vec(&end, t.cols.column(0).clone_owned().as_slice())?;
            transport_err = transport_err.max((tn - 1.0).abs());
        }
    }
    if tried == 0 {
        return Err(Error::Statistics { needed: 1, got: 0 });
    }
    checks.push(GeomCheck {
        name: "geodesic-speed-conservation".into(),
        value: speed_drift,
        tolerance: 1e-6,
        pass: speed_drift <= 1e-6,
    });
    checks.push(GeomCheck {
        name: "exp-log-roundtrip".into(),
        value: roundtrip,
        tolerance: 1e-6,
        pass: roundtrip <= 1e-6,
    });
    checks.push(GeomCheck {
        name: "transport-isometry".into(),
        value: transport_err,
        tolerance: 1e-8,
        pass: transport_err <= 1e-8,
    });

    let pass = checks.iter().all(|c| c.pass);
    Ok(GeomReport {
        chart: chart.name.clone(),
        checks,
        pass,
    })
}

/// Builds the chart a name refers to, or loads one from a JSON file.
pub fn chart_by_name(name: &str) -> Result<ManifoldChart> {
    match name {
        "flat-1d" => Ok(ManifoldChart::flat(1)),
        "flat-2d" => Ok(ManifoldChart::flat(2)),
        "half-plane" => Ok(ManifoldChart::half_plane(-4.0, 4.0, 0.1, 12.0)),
        "sphere-cap" => Ok(ManifoldChart::sphere_cap(1.0, 0.05, 1.2)),
        "interval-e2x" => Ok(crate::scenario::build_scenario("interval-e2x")
            .unwrap()
            .chart),
        path => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read chart {path}: {e}")))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("bad chart json: {e}")))
        }
    }
}
