//! JSON configuration schema. Unknown keys are rejected.

use std::sync::Arc;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use mbsde_core::convexity::ConvexDomain;
use mbsde_core::drift::DriftField;
use mbsde_core::forward::DiffusionSpec;
use mbsde_core::geometry::ManifoldChart;
use mbsde_core::pdesolver::{GridSpec, Scheme, TerminalFn};

/// Named terminal functions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum TerminalConfig {
    /// F(x) = x (one-dimensional target)
    Identity,
    /// F(x) = x^2
    Square,
    /// F(x) = sin x
    Sine,
    Constant(Vec<f64>),
    /// F(b) = offset + scale tanh(b); bounded with constant tails
    ScaledTanh { scale: f64, offset: f64 },
    /// Half-plane curve F(b) = (x, y exp(s tanh b))
    VerticalExp { x: f64, y: f64, s: f64 },
    /// Half-plane boundary map F(b) = (0, e^b)
    ExpHeight,
}

impl TerminalConfig {
    pub fn build(&self) -> TerminalFn {
        match self.clone() {
            TerminalConfig::Identity => Arc::new(|x: &[f64]| DVector::from_vec(vec![x[0]])),
            TerminalConfig::Square => {
                Arc::new(|x: &[f64]| DVector::from_vec(vec![x[0] * x[0]]))
            }
            TerminalConfig::Sine => Arc::new(|x: &[f64]| DVector::from_vec(vec![x[0].sin()])),
            TerminalConfig::Constant(v) => Arc::new(move |_x: &[f64]| DVector::from_vec(v.clone())),
            TerminalConfig::ScaledTanh { scale, offset } => {
                Arc::new(move |x: &[f64]| DVector::from_vec(vec![offset + scale * x[0].tanh()]))
            }
            TerminalConfig::VerticalExp { x, y, s } => Arc::new(move |b: &[f64]| {
                DVector::from_vec(vec![x, y * (s * b[0].tanh()).exp()])
            }),
            TerminalConfig::ExpHeight => {
                Arc::new(|b: &[f64]| DVector::from_vec(vec![0.0, b[0].exp()]))
            }
        }
    }

    /// Translates the terminal values by `eta` (flat targets) or scales the
    /// half-plane curve by `e^eta` (a hyperbolic translation by distance eta).
    pub fn shifted(&self, eta: f64) -> TerminalConfig {
        match self.clone() {
            TerminalConfig::Identity | TerminalConfig::Square | TerminalConfig::Sine => {
                panic!("use ScaledTanh for shifted families")
            }
            TerminalConfig::Constant(v) => {
                TerminalConfig::Constant(v.iter().map(|c| c + eta).collect())
            }
            TerminalConfig::ScaledTanh { scale, offset } => TerminalConfig::ScaledTanh {
                scale,
                offset: offset + eta,
            },
            TerminalConfig::VerticalExp { x, y, s } => TerminalConfig::VerticalExp {
                x,
                y: y * eta.exp(),
                s,
            },
            TerminalConfig::ExpHeight => panic!("no shifted family for ExpHeight"),
        }
    }
}

/// Closed-form references for error reporting.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub enum OracleKind {
    /// u(t, x) = x - rate t
    LinearDrift { rate: f64 },
    /// u(t, x) = x^2 + t
    Heat,
    /// u(t, x) = e^{-t/2} sin x
    SineHeat,
}

impl OracleKind {
    pub fn eval(&self, t: f64, x: &[f64]) -> DVector<f64> {
        match self {
            OracleKind::LinearDrift { rate } => DVector::from_vec(vec![x[0] - rate * t]),
            OracleKind::Heat => DVector::from_vec(vec![x[0] * x[0] + t]),
            OracleKind::SineHeat => DVector::from_vec(vec![(-t / 2.0).exp() * x[0].sin()]),
        }
    }
}

/// Verification toggles a scenario can enable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VerificationKind {
    TransportSuite,
    HessianSuite,
    Outwardness,
    PsiConvexity,
    Min1,
    ItoPositivityZero,
    ItoPositivityFitted,
    ExpIntegrability,
}

/// A fully resolved scenario: everything a run needs, explicit.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub name: String,
    pub chart: ManifoldChart,
    pub domain: Option<ConvexDomain>,
    /// false disables the cut-off ("unconstrained flat mode" for oracles)
    pub cutoff_enabled: bool,
    pub diffusion: DiffusionSpec,
    pub drift: DriftField,
    pub terminal: TerminalConfig,
    pub grid: GridSpec,
    pub scheme: Scheme,
    /// start point of the forward paths
    pub start: Vec<f64>,
    pub path_count: usize,
    pub path_steps: usize,
    pub seed: u64,
    /// truncation threshold override; None selects it from the certificate
    pub epsilon: Option<f64>,
    pub verifications: Vec<VerificationKind>,
    pub oracle: Option<OracleKind>,
    /// space box over which oracle errors are measured
    pub oracle_box: Option<(Vec<f64>, Vec<f64>)>,
}

/// Top-level experiment file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// registry name, or "custom" with the `custom` block present
    pub scenario: String,
    #[serde(default)]
    pub custom: Option<ScenarioSpec>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub out_dir: Option<String>,
    /// halve dx and dt this many times
    #[serde(default)]
    pub refine: u32,
    #[serde(default)]
    pub epsilon_override: Option<f64>,
    /// accept an override that fails the certificate (report-only run)
    #[serde(default)]
    pub force_epsilon: bool,
}

impl ExperimentConfig {
    pub fn named(scenario: &str) -> Self {
        ExperimentConfig {
            scenario: scenario.to_string(),
            custom: None,
            seed: None,
            out_dir: None,
            refine: 0,
            epsilon_override: None,
            force_epsilon: false,
        }
    }
}
