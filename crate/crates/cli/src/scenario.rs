//! Built-in scenario registry: every closed-form oracle ships as a named
//! scenario so the acceptance runs are one command each.

use mbsde_core::convexity::{ChiKind, ConvexDomain};
use mbsde_core::drift::{DriftField, DriftKind, PotentialKind};
use mbsde_core::forward::DiffusionSpec;
use mbsde_core::geometry::{ManifoldChart, MetricExpr, MetricTerm};
use mbsde_core::pdesolver::{GridSpec, Scheme};
use serde::{Deserialize, Serialize};

use crate::config::{OracleKind, ScenarioSpec, TerminalConfig, VerificationKind};

pub fn scenario_names() -> Vec<&'static str> {
    vec![
        "flat-linear-drift",
        "flat-heat",
        "flat-sine",
        "halfplane-martingale",
        "halfplane-zdrift",
        "interval-e2x",
        "ball-invariance-zero",
        "ball-invariance-outward",
        "ball-mollified-25",
        "ball-mollified-50",
        "ball-mollified-100",
    ]
}

fn exp2x_metric() -> MetricExpr {
    MetricExpr {
        terms: vec![MetricTerm {
            coef: 1.0,
            powers: vec![0],
            exp_coef: vec![2.0],
        }],
    }
}

/// The half-plane chart used by the curved scenarios.
pub fn halfplane_chart() -> ManifoldChart {
    ManifoldChart::half_plane(-4.0, 4.0, 0.1, 12.0)
}

/// Geodesic ball of radius `rho` around (0, 1.5) in the half-plane.
pub fn halfplane_ball(rho: f64) -> ConvexDomain {
    ConvexDomain::geodesic_ball(halfplane_chart(), vec![0.0, 1.5], rho, rho + 0.25).unwrap()
}

pub fn build_scenario(name: &str) -> Option<ScenarioSpec> {
    let spec = match name {
        "flat-linear-drift" => ScenarioSpec {
            name: name.into(),
            chart: ManifoldChart::flat(1),
            domain: None,
            cutoff_enabled: false,
            diffusion: DiffusionSpec::brownian_1d(),
            drift: DriftField::constant(vec![0.3]),
            terminal: TerminalConfig::Identity,
            grid: GridSpec {
                x_lo: vec![-4.0],
                x_hi: vec![5.0],
                nx: vec![901],
                dt: 2e-5,
                save_every: 2500,
                horizon: 1.0,
            },
            scheme: Scheme::Explicit,
            start: vec![0.5],
            path_count: 1000,
            path_steps: 100,
            seed: 1001,
            epsilon: None,
            verifications: vec![],
            oracle: Some(OracleKind::LinearDrift { rate: 0.3 }),
            oracle_box: Some((vec![0.0], vec![1.0])),
        },
        "flat-heat" => ScenarioSpec {
            name: name.into(),
            chart: ManifoldChart::flat(1),
            domain: None,
            cutoff_enabled: false,
            diffusion: DiffusionSpec::brownian_1d(),
            drift: DriftField::zero(1),
            terminal: TerminalConfig::Square,
            grid: GridSpec {
                x_lo: vec![-4.0],
                x_hi: vec![5.0],
                nx: vec![901],
                dt: 2e-5,
                save_every: 2500,
                horizon: 0.5,
            },
            scheme: Scheme::Explicit,
            start: vec![1.0],
            path_count: 1000,
            path_steps: 100,
            seed: 1002,
            epsilon: None,
            verifications: vec![],
            oracle: Some(OracleKind::Heat),
            oracle_box: Some((vec![0.0], vec![1.0])),
        },
        "flat-sine" => ScenarioSpec {
            name: name.into(),
            chart: ManifoldChart::flat(1),
            domain: None,
            cutoff_enabled: false,
            diffusion: DiffusionSpec::brownian_1d(),
            drift: DriftField::zero(1),
            terminal: TerminalConfig::Sine,
            grid: GridSpec {
                x_lo: vec![-7.0],
                x_hi: vec![7.0],
                nx: vec![701],
                dt: 8e-5,
                save_every: 625,
                horizon: 0.25,
            },
            scheme: Scheme::Explicit,
            start: vec![0.0],
            path_count: 500,
            path_steps: 50,
            seed: 1003,
            epsilon: None,
            verifications: vec![],
            oracle: Some(OracleKind::SineHeat),
            oracle_box: Some((vec![-1.0], vec![1.0])),
        },
        "halfplane-martingale" => ScenarioSpec {
            name: name.into(),
            chart: halfplane_chart(),
            domain: Some(halfplane_ball(0.8)),
            cutoff_enabled: true,
            diffusion: DiffusionSpec::brownian_1d(),
            drift: DriftField::zero(2),
            terminal: TerminalConfig::VerticalExp {
                x: 0.0,
                y: 1.5,
                s: 0.4,
            },
            grid: GridSpec {
                x_lo: vec![-5.0],
                x_hi: vec![5.0],
                nx: vec![401],
                dt: 1.25e-4,
                save_every: 200,
                horizon: 0.5,
            },
            scheme: Scheme::Explicit,
            start: vec![0.0],
            path_count: 300,
            path_steps: 50,
            seed: 1004,
            epsilon: None,
            verifications: vec![
                VerificationKind::TransportSuite,
                VerificationKind::HessianSuite,
                VerificationKind::PsiConvexity,
                VerificationKind::Min1,
                VerificationKind::ItoPositivityZero,
                VerificationKind::ExpIntegrability,
            ],
            oracle: None,
            oracle_box: None,
        },
        "halfplane-zdrift" => ScenarioSpec {
            name: name.into(),
            chart: halfplane_chart(),
            domain: Some(halfplane_ball(0.8)),
            cutoff_enabled: true,
            diffusion: DiffusionSpec::brownian_1d(),
            drift: DriftField::linear_z(0.2, 0, 2),
            terminal: TerminalConfig::VerticalExp {
                x: 0.0,
                y: 1.5,
                s: 0.4,
            },
            grid: GridSpec {
                x_lo: vec![-5.0],
                x_hi: vec![5.0],
                nx: vec![401],
                dt: 1.25e-4,
                save_every: 200,
                horizon: 0.5,
            },
            scheme: Scheme::Explicit,
            start: vec![0.0],
            path_count: 300,
            path_steps: 50,
            seed: 1005,
            epsilon: None,
            verifications: vec![VerificationKind::ItoPositivityFitted],
            oracle: None,
            oracle_box: None,
        },
        "interval-e2x" => ScenarioSpec {
            name: name.into(),
            chart: ManifoldChart::interval(exp2x_metric(), -2.5, 2.5),
            domain: Some(
                ConvexDomain::new(
                    ManifoldChart::interval(exp2x_metric(), -2.5, 2.5),
                    ChiKind::NormSquaredFrom { center: vec![0.0] },
                    0.81,
                    1.44,
                    None,
                )
                .unwrap(),
            ),
            cutoff_enabled: true,
            diffusion: DiffusionSpec::brownian_1d(),
            drift: DriftField::zero(1),
            terminal: TerminalConfig::ScaledTanh {
                scale: 0.6,
                offset: 0.0,
            },
            grid: GridSpec {
                x_lo: vec![-4.0],
                x_hi: vec![4.0],
                nx: vec![401],
                dt: 1.25e-4,
                save_every: 200,
                horizon: 0.5,
            },
            scheme: Scheme::Explicit,
            start: vec![0.0],
            path_count: 300,
            path_steps: 50,
            seed: 1006,
            epsilon: None,
            verifications: vec![],
            oracle: None,
            oracle_box: None,
        },
        "ball-invariance-zero" | "ball-invariance-outward" => {
            let outward = name.ends_with("outward");
            let chart = ManifoldChart::flat_bounded(1, vec![-3.0], vec![3.0]);
            ScenarioSpec {
                name: name.into(),
                chart: chart.clone(),
                domain: Some(
                    ConvexDomain::new(
                        chart,
                        ChiKind::NormSquaredFrom { center: vec![0.0] },
                        1.0,
                        1.5,
                        None,
                    )
                    .unwrap(),
                ),
                cutoff_enabled: true,
                diffusion: DiffusionSpec::brownian_1d(),
                drift: if outward {
                    DriftField::radial(1.0, 1)
                } else {
                    DriftField::zero(1)
                },
                terminal: TerminalConfig::ScaledTanh {
                    scale: 0.8,
                    offset: 0.0,
                },
                grid: GridSpec {
                    x_lo: vec![-6.0],
                    x_hi: vec![6.0],
                    nx: vec![601],
                    dt: 1.25e-4,
                    save_every: 200,
                    horizon: 0.5,
                },
                scheme: Scheme::Explicit,
                start: vec![0.0],
                path_count: 300,
                path_steps: 50,
                seed: 1007,
                epsilon: None,
                verifications: vec![VerificationKind::Outwardness],
                oracle: None,
                oracle_box: None,
            }
        }
        "ball-mollified-25" | "ball-mollified-50" | "ball-mollified-100" => {
            // base drift f = x mollified at scale 1/l with the outward shift
            let chart = ManifoldChart::flat_bounded(1, vec![-3.0], vec![3.0]);
            ScenarioSpec {
                name: name.into(),
                chart: chart.clone(),
                domain: Some(
                    ConvexDomain::new(
                        chart,
                        ChiKind::NormSquaredFrom { center: vec![0.0] },
                        1.0,
                        1.5,
                        None,
                    )
                    .unwrap(),
                ),
                cutoff_enabled: true,
                diffusion: DiffusionSpec::brownian_1d(),
                // replaced by the mollified field at run time
                drift: DriftField::radial(1.0, 1),
                terminal: TerminalConfig::ScaledTanh {
                    scale: 0.8,
                    offset: 0.0,
                },
                grid: GridSpec {
                    x_lo: vec![-6.0],
                    x_hi: vec![6.0],
                    nx: vec![301],
                    dt: 5e-4,
                    save_every: 100,
                    horizon: 0.5,
                },
                scheme: Scheme::Explicit,
                start: vec![0.0],
                path_count: 200,
                path_steps: 50,
                seed: 1008,
                epsilon: None,
                verifications: vec![],
                oracle: None,
                oracle_box: None,
            }
        }
        _ => return None,
    };
    Some(spec)
}

/// Mollification level encoded in a scenario name, when present.
pub fn mollification_level(name: &str) -> Option<u32> {
    name.strip_prefix("ball-mollified-")
        .and_then(|s| s.parse().ok())
}

/// Exit-time (Dirichlet) scenarios, run by the `dirichlet` subcommand.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DirichletScenarioSpec {
    pub name: String,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub diffusion: DiffusionSpec,
    pub boundary: TerminalConfig,
    pub chart: ManifoldChart,
    pub drift: DriftField,
    pub potential: Option<PotentialKind>,
    pub flow_nx: usize,
    pub flow_horizon: f64,
    pub mc_dt: f64,
    pub mc_t_max: f64,
    pub mc_paths: usize,
    pub mc_degree: usize,
    pub start: Vec<f64>,
    pub seed: u64,
    /// interior evaluation point for the MC / flow agreement check
    pub probe: Vec<f64>,
}

pub fn dirichlet_names() -> Vec<&'static str> {
    vec!["dirichlet-flat", "dirichlet-halfplane", "dirichlet-energy"]
}

pub fn build_dirichlet(name: &str) -> Option<DirichletScenarioSpec> {
    let spec = match name {
        "dirichlet-flat" => DirichletScenarioSpec {
            name: name.into(),
            lo: vec![0.0],
            hi: vec![1.0],
            diffusion: DiffusionSpec::brownian_1d(),
            boundary: TerminalConfig::Identity,
            chart: ManifoldChart::flat(1),
            drift: DriftField::zero(1),
            potential: None,
            flow_nx: 101,
            flow_horizon: 4.0,
            mc_dt: 1e-3,
            mc_t_max: 3.0,
            mc_paths: 10_000,
            mc_degree: 2,
            start: vec![0.5],
            seed: 2001,
            probe: vec![0.5],
        },
        "dirichlet-halfplane" => DirichletScenarioSpec {
            name: name.into(),
            lo: vec![0.0],
            hi: vec![1.0],
            diffusion: DiffusionSpec::brownian_1d(),
            boundary: TerminalConfig::ExpHeight,
            chart: ManifoldChart::half_plane(-2.0, 2.0, 0.1, 10.0),
            drift: DriftField::zero(2),
            potential: None,
            flow_nx: 101,
            flow_horizon: 3.0,
            mc_dt: 1e-3,
            mc_t_max: 3.0,
            mc_paths: 4000,
            mc_degree: 2,
            start: vec![0.5],
            seed: 2002,
            probe: vec![0.5],
        },
        "dirichlet-energy" => DirichletScenarioSpec {
            name: name.into(),
            lo: vec![0.0],
            hi: vec![1.0],
            diffusion: DiffusionSpec::brownian_1d(),
            boundary: TerminalConfig::ScaledTanh {
                scale: 1.0,
                offset: 0.0,
            },
            chart: ManifoldChart::flat(1),
            drift: DriftField {
                kind: DriftKind::GradPotential {
                    potential: PotentialKind::HalfNormSquared { coef: 1.0 },
                },
                z_dependent: false,
                lip_l: 1.0,
                lip_l2: 0.0,
                x0: vec![0.0],
            },
            potential: Some(PotentialKind::HalfNormSquared { coef: 1.0 }),
            flow_nx: 51,
            flow_horizon: 4.0,
            mc_dt: 1e-3,
            mc_t_max: 3.0,
            mc_paths: 2000,
            mc_degree: 2,
            start: vec![0.5],
            seed: 2003,
            probe: vec![0.5],
        },
        _ => return None,
    };
    Some(spec)
}

/// Applies `--refine k`: halve dx and dt k times.
pub fn refine_grid(grid: &GridSpec, k: u32) -> GridSpec {
    let mut g = grid.clone();
    for _ in 0..k {
        for nx in g.nx.iter_mut() {
            *nx = 2 * (*nx - 1) + 1;
        }
        g.dt /= 2.0;
        g.save_every *= 2;
    }
    g
}
