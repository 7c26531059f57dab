//! Experiment configuration: serde types mirroring the JSON blocks, field
//! validation with dotted paths, and builders that turn blocks into live
//! objects.

use crate::bsde::{DriftSpec, SolverParams, TerminalCondition, ZInit};
use crate::dirichlet::{BoundaryMap, DirichletProblem, QueryGridSpec, SourceDomain};
use crate::error::{Error, Result};
use crate::gauges::GaugeFunction;
use crate::geometry::{ChartDomain, ChartManifold, DomainGauge};
use crate::sde::DiffusionSpec;
use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_2, PI};
use std::sync::Arc;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub manifold: ManifoldConfig,
    #[serde(default)]
    pub diffusion: DiffusionConfig,
    #[serde(default)]
    pub drift: DriftConfig,
    #[serde(default)]
    pub gauge: GaugeConfig,
    #[serde(default)]
    pub ball: BallConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub diagnostics: DiagnosticsConfig,
    #[serde(default)]
    pub estimates: EstimatesConfig,
    #[serde(default)]
    pub dirichlet: DirichletConfig,
    #[serde(default)]
    pub out_dir: Option<String>,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

fn default_seed() -> u64 {
    42
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("empty config deserializes")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifoldConfig {
    #[serde(default = "default_sphere")]
    pub kind: String,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_one")]
    pub radius: f64,
    /// Per-coordinate [lower, upper] bounds for flat/custom charts.
    #[serde(default)]
    pub chart_bounds: Option<Vec<[f64; 2]>>,
    /// Named metric for custom charts.
    #[serde(default)]
    pub metric: Option<String>,
    #[serde(default)]
    pub curvature_bound: Option<f64>,
}

fn default_sphere() -> String {
    "sphere".into()
}
fn default_dim() -> usize {
    2
}
fn default_one() -> f64 {
    1.0
}

impl Default for ManifoldConfig {
    fn default() -> Self {
        serde_json::from_str("{}").unwrap()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionConfig {
    #[serde(default = "default_zero_name")]
    pub b: String,
    #[serde(default)]
    pub b_params: Vec<f64>,
    #[serde(default = "default_identity_name")]
    pub sigma: String,
    #[serde(default = "default_one")]
    pub sigma_scale: f64,
    #[serde(default = "default_y")]
    pub y: Vec<f64>,
    #[serde(rename = "T", default = "default_one")]
    pub horizon: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_paths")]
    pub paths: usize,
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_zero_name() -> String {
    "zero".into()
}
fn default_identity_name() -> String {
    "identity".into()
}
fn default_y() -> Vec<f64> {
    vec![0.0, 0.0]
}
fn default_steps() -> usize {
    50
}
fn default_paths() -> usize {
    4000
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        serde_json::from_str("{}").unwrap()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftConfig {
    #[serde(default = "default_zero_name")]
    pub name: String,
    #[serde(default)]
    pub params: Vec<f64>,
    #[serde(default)]
    pub lipschitz: f64,
    #[serde(default)]
    pub bound: f64,
    #[serde(default)]
    pub anchor: Option<Vec<f64>>,
}

impl Default for DriftConfig {
    fn default() -> Self {
        serde_json::from_str("{}").unwrap()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaugeConfig {
    #[serde(default = "default_sin_power")]
    pub kind: String,
    /// Exponent of the sin-power gauge; the default keeps a margin inside
    /// the admissible interval tied to the integrability factor.
    #[serde(default = "default_a")]
    pub a: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_p")]
    pub p: u32,
}

fn default_sin_power() -> String {
    "sin_power".into()
}
fn default_a() -> f64 {
    // a = 1 + (e - 1)/4 with the default integrability factor e = 1.5
    1.125
}
fn default_eps() -> f64 {
    0.1
}
fn default_p() -> u32 {
    2
}

impl Default for GaugeConfig {
    fn default() -> Self {
        serde_json::from_str("{}").unwrap()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BallConfig {
    #[serde(default)]
    pub center: Option<Vec<f64>>,
    /// Radius as the fraction gamma of the critical pi / (2 sqrt(K)).
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Absolute radius override for flat charts.
    #[serde(default)]
    pub radius: Option<f64>,
}

fn default_gamma() -> f64 {
    0.5
}

impl Default for BallConfig {
    fn default() -> Self {
        serde_json::from_str("{}").unwrap()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    #[serde(default = "default_picard_max")]
    pub picard_max: usize,
    #[serde(default = "default_picard_tol")]
    pub picard_tol: f64,
    #[serde(default = "default_degree")]
    pub basis_degree: u32,
    #[serde(default)]
    pub strict_outward: bool,
    #[serde(default = "default_terminal")]
    pub terminal: String,
    #[serde(default)]
    pub terminal_params: Vec<f64>,
}

fn default_picard_max() -> usize {
    30
}
fn default_picard_tol() -> f64 {
    1e-6
}
fn default_degree() -> u32 {
    3
}
fn default_terminal() -> String {
    "ball_squash".into()
}

impl Default for SolverConfig {
    fn default() -> Self {
        serde_json::from_str("{}").unwrap()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsConfig {
    /// Integrability factor e, strictly between 1 and 1/gamma.
    #[serde(default = "default_e")]
    pub e_factor: f64,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_tol")]
    pub tolerance: f64,
    #[serde(default = "default_xi")]
    pub xi: f64,
    /// Distances below this are excluded from sin-power Hessian sampling.
    #[serde(default = "default_delta_floor")]
    pub delta_floor: f64,
    #[serde(default = "default_frame_scale")]
    pub frame_scale: f64,
    /// Moment orders reported for the compensated process.
    #[serde(default = "default_q_list")]
    pub q_list: Vec<f64>,
    /// Conjectural integrability order exposed as a dial.
    #[serde(default = "default_q0")]
    pub q0: f64,
}

fn default_e() -> f64 {
    1.5
}
fn default_samples() -> usize {
    10_000
}
fn default_tol() -> f64 {
    1e-6
}
fn default_xi() -> f64 {
    0.5
}
fn default_delta_floor() -> f64 {
    0.05
}
fn default_frame_scale() -> f64 {
    1.0
}
fn default_q_list() -> Vec<f64> {
    vec![1.1, 1.25, 1.5]
}
fn default_q0() -> f64 {
    1.5
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        serde_json::from_str("{}").unwrap()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatesConfig {
    #[serde(default = "default_estimate_names")]
    pub names: Vec<String>,
    #[serde(default = "default_estimate_samples")]
    pub samples: usize,
    #[serde(default = "default_tol")]
    pub tolerance: f64,
    #[serde(default = "default_delta_range")]
    pub delta_range: [f64; 2],
}

fn default_estimate_names() -> Vec<String> {
    vec![
        "2der1".into(),
        "minhessdelta".into(),
        "estimhess2".into(),
        "minA".into(),
    ]
}
fn default_estimate_samples() -> usize {
    500
}
fn default_delta_range() -> [f64; 2] {
    [0.1, PI - 0.1]
}

impl Default for EstimatesConfig {
    fn default() -> Self {
        serde_json::from_str("{}").unwrap()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DirichletConfig {
    #[serde(default)]
    pub domain: DomainConfig,
    #[serde(default = "default_boundary")]
    pub boundary_map: String,
    #[serde(default)]
    pub boundary_params: Vec<f64>,
    #[serde(default)]
    pub query_grid: Option<QueryGridConfig>,
    #[serde(rename = "T_max", default = "default_t_max")]
    pub horizon_cap: f64,
    #[serde(default = "default_xi")]
    pub xi: f64,
    #[serde(default = "default_dirichlet_steps")]
    pub steps: usize,
    #[serde(default = "default_dirichlet_paths")]
    pub paths: usize,
}

fn default_boundary() -> String {
    "coordinate_x".into()
}
fn default_t_max() -> f64 {
    6.0
}
fn default_dirichlet_steps() -> usize {
    400
}
fn default_dirichlet_paths() -> usize {
    4000
}

impl Default for DirichletConfig {
    fn default() -> Self {
        serde_json::from_str("{}").unwrap()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    #[serde(default = "default_disk")]
    pub kind: String,
    #[serde(default = "default_one")]
    pub radius: f64,
    #[serde(default = "default_minus_one")]
    pub a: f64,
    #[serde(default = "default_one")]
    pub b: f64,
    #[serde(default)]
    pub lower: Option<Vec<f64>>,
    #[serde(default)]
    pub upper: Option<Vec<f64>>,
}

fn default_disk() -> String {
    "disk".into()
}
fn default_minus_one() -> f64 {
    -1.0
}

impl Default for DomainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").unwrap()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryGridConfig {
    pub origin: Vec<f64>,
    pub spacing: Vec<f64>,
    pub counts: Vec<usize>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config {
            field: "<root>".into(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Field-path validation of numeric ranges and builtin names.
    pub fn validate(&self) -> Result<()> {
        match self.manifold.kind.as_str() {
            "flat" | "sphere" | "custom" => {}
            other => {
                return Err(Error::config(
                    "manifold.kind",
                    format!("unknown kind {other:?}"),
                ))
            }
        }
        if self.manifold.kind == "sphere" && self.manifold.radius <= 0.0 {
            return Err(Error::config("manifold.radius", "must be positive"));
        }
        if self.manifold.kind == "custom" {
            match self.manifold.metric.as_deref() {
                Some("polar") | Some("bump") => {}
                Some(other) => {
                    return Err(Error::config(
                        "manifold.metric",
                        format!("unknown metric {other:?}"),
                    ))
                }
                None => {
                    return Err(Error::config(
                        "manifold.metric",
                        "custom charts need a named metric",
                    ))
                }
            }
        }
        match self.diffusion.b.as_str() {
            "zero" | "constant" | "linear" => {}
            other => {
                return Err(Error::config(
                    "diffusion.b",
                    format!("unknown drift builtin {other:?}"),
                ))
            }
        }
        match self.diffusion.sigma.as_str() {
            "identity" | "zero" | "scaled" => {}
            other => {
                return Err(Error::config(
                    "diffusion.sigma",
                    format!("unknown volatility builtin {other:?}"),
                ))
            }
        }
        if self.diffusion.steps == 0 {
            return Err(Error::config("diffusion.steps", "must be at least 1"));
        }
        if self.diffusion.paths == 0 {
            return Err(Error::config("diffusion.paths", "must be at least 1"));
        }
        if self.diffusion.horizon <= 0.0 {
            return Err(Error::config("diffusion.T", "must be positive"));
        }
        match self.drift.name.as_str() {
            "zero" | "constant" | "outward_radial" | "inward_radial" => {}
            other => {
                return Err(Error::config(
                    "drift.name",
                    format!("unknown drift builtin {other:?}"),
                ))
            }
        }
        match self.gauge.kind.as_str() {
            "emery" | "sin_power" | "distance_squared" => {}
            other => {
                return Err(Error::config(
                    "gauge.kind",
                    format!("unknown gauge kind {other:?}"),
                ))
            }
        }
        if !(1.0 < self.gauge.a && self.gauge.a < 2.0) {
            return Err(Error::config(
                "gauge.a",
                format!("a = {} outside the open interval (1, 2)", self.gauge.a),
            ));
        }
        if self.gauge.eps <= 0.0 {
            return Err(Error::config("gauge.eps", "must be positive"));
        }
        if self.gauge.p == 0 || self.gauge.p % 2 != 0 {
            return Err(Error::config(
                "gauge.p",
                "the comparison order must be a positive even integer",
            ));
        }
        if !(0.0 < self.ball.gamma && self.ball.gamma < 1.0) {
            return Err(Error::config(
                "ball.gamma",
                format!(
                    "gamma = {} must lie in (0, 1) for a regular ball",
                    self.ball.gamma
                ),
            ));
        }
        if !(1.0 < self.diagnostics.e_factor
            && self.diagnostics.e_factor < 1.0 / self.ball.gamma)
        {
            return Err(Error::config(
                "diagnostics.e_factor",
                format!(
                    "e = {} must lie strictly between 1 and 1/gamma = {}",
                    self.diagnostics.e_factor,
                    1.0 / self.ball.gamma
                ),
            ));
        }
        if self.diagnostics.q0 <= 1.0 {
            return Err(Error::config("diagnostics.q0", "must exceed 1"));
        }
        for name in &self.estimates.names {
            if !crate::gauges::estimates::ESTIMATE_NAMES.contains(&name.as_str()) {
                return Err(Error::config(
                    "estimates.names",
                    format!("unknown estimate {name:?}"),
                ));
            }
        }
        match self.dirichlet.domain.kind.as_str() {
            "disk" | "interval" | "box" => {}
            other => {
                return Err(Error::config(
                    "dirichlet.domain.kind",
                    format!("unknown domain kind {other:?}"),
                ))
            }
        }
        match self.dirichlet.boundary_map.as_str() {
            "coordinate_x" | "saddle" | "constant" => {}
            other => {
                return Err(Error::config(
                    "dirichlet.boundary_map",
                    format!("unknown boundary map {other:?}"),
                ))
            }
        }
        if self.dirichlet.xi <= 0.0 {
            return Err(Error::config("dirichlet.xi", "must be positive"));
        }
        match self.solver.terminal.as_str() {
            "ball_squash" | "identity" | "constant" => {}
            other => {
                return Err(Error::config(
                    "solver.terminal",
                    format!("unknown terminal builtin {other:?}"),
                ))
            }
        }
        Ok(())
    }

    pub fn build_manifold(&self) -> Result<ChartManifold> {
        let mc = &self.manifold;
        match mc.kind.as_str() {
            "sphere" => Ok(ChartManifold::sphere(mc.radius)),
            "flat" => {
                let dim = mc.dim;
                let domain = bounds_to_domain(mc.chart_bounds.as_deref(), dim, 10.0)?;
                Ok(ChartManifold::flat(dim, domain))
            }
            "custom" => {
                let dim = mc.dim;
                let domain = bounds_to_domain(
                    mc.chart_bounds.as_deref(),
                    dim,
                    2.0,
                )?;
                let metric: crate::geometry::MetricFn = match mc.metric.as_deref() {
                    Some("polar") => Arc::new(|x: ArrayView1<f64>| {
                        let mut g = Array2::eye(x.len());
                        g[[1, 1]] = x[0] * x[0];
                        g
                    }),
                    Some("bump") => Arc::new(|x: ArrayView1<f64>| {
                        let n = x.len();
                        let mut g = Array2::eye(n);
                        let r2: f64 = x.dot(&x);
                        let bump = 1.0 + 0.2 * (-r2).exp();
                        for i in 0..n {
                            g[[i, i]] = bump;
                        }
                        g
                    }),
                    _ => unreachable!("validated"),
                };
                Ok(ChartManifold::custom(
                    dim,
                    domain,
                    metric,
                    mc.curvature_bound.unwrap_or(0.0),
                ))
            }
            _ => unreachable!("validated"),
        }
    }

    pub fn build_diffusion(&self) -> Result<DiffusionSpec> {
        let dc = &self.diffusion;
        let d = dc.y.len();
        let start = Array1::from_vec(dc.y.clone());
        let drift: crate::sde::VectorField = match dc.b.as_str() {
            "zero" => Arc::new(|x: ArrayView1<f64>| Array1::zeros(x.len())),
            "constant" => {
                let c = dc.b_params.clone();
                if c.len() != d {
                    return Err(Error::config(
                        "diffusion.b_params",
                        "constant drift needs one entry per dimension",
                    ));
                }
                Arc::new(move |_x| Array1::from_vec(c.clone()))
            }
            "linear" => {
                let rate = dc.b_params.first().copied().unwrap_or(-1.0);
                Arc::new(move |x: ArrayView1<f64>| x.mapv(|v| rate * v))
            }
            _ => unreachable!("validated"),
        };
        let scale = dc.sigma_scale;
        let vol: crate::sde::MatrixField = match dc.sigma.as_str() {
            "identity" => Arc::new(|x: ArrayView1<f64>| Array2::eye(x.len())),
            "zero" => Arc::new(|x: ArrayView1<f64>| Array2::zeros((x.len(), x.len()))),
            "scaled" => Arc::new(move |x: ArrayView1<f64>| Array2::eye(x.len()) * scale),
            _ => unreachable!("validated"),
        };
        Ok(DiffusionSpec::new(d, d, drift, vol, start))
    }

    pub fn build_ball(&self, m: &ChartManifold) -> Result<DomainGauge> {
        let center = match &self.ball.center {
            Some(c) => Array1::from_vec(c.clone()),
            None => match m.kind() {
                crate::geometry::ChartKind::Sphere { .. } => {
                    Array1::from_vec(vec![FRAC_PI_2, 0.0])
                }
                _ => Array1::zeros(m.dim()),
            },
        };
        let k = m.curvature_bound();
        let rho = if k > 0.0 {
            self.ball.gamma * FRAC_PI_2 / k.sqrt()
        } else {
            self.ball.radius.unwrap_or(1.0)
        };
        if !m.contains(center.view()) {
            return Err(Error::config("ball.center", "outside the chart domain"));
        }
        Ok(DomainGauge::geodesic_ball(center, rho))
    }

    pub fn build_gauge(&self) -> Result<GaugeFunction> {
        match self.gauge.kind.as_str() {
            "emery" => Ok(GaugeFunction::emery(self.gauge.eps)),
            "sin_power" => GaugeFunction::sin_power(self.gauge.a),
            "distance_squared" => Ok(GaugeFunction::distance_squared()),
            _ => unreachable!("validated"),
        }
    }

    pub fn build_drift(&self, m: &ChartManifold, ball: &DomainGauge) -> Result<DriftSpec> {
        let anchor = match &self.drift.anchor {
            Some(a) => Array1::from_vec(a.clone()),
            None => ball.center.clone(),
        };
        match self.drift.name.as_str() {
            "zero" => Ok(DriftSpec::zero(anchor)),
            "constant" => {
                if self.drift.params.len() != m.dim() {
                    return Err(Error::config(
                        "drift.params",
                        "constant drift needs one entry per chart dimension",
                    ));
                }
                Ok(DriftSpec::constant(
                    Array1::from_vec(self.drift.params.clone()),
                    anchor,
                ))
            }
            "outward_radial" => {
                let scale = self.drift.params.first().copied().unwrap_or(0.5);
                Ok(DriftSpec::radial(m, ball, scale))
            }
            "inward_radial" => {
                let scale = self.drift.params.first().copied().unwrap_or(0.5);
                Ok(DriftSpec::radial(m, ball, -scale))
            }
            _ => unreachable!("validated"),
        }
    }

    pub fn build_terminal(
        &self,
        m: &ChartManifold,
        ball: &DomainGauge,
    ) -> Result<TerminalCondition> {
        match self.solver.terminal.as_str() {
            "ball_squash" => {
                let fraction = self.solver.terminal_params.first().copied().unwrap_or(0.7);
                if !(0.0 < fraction && fraction < 1.0) {
                    return Err(Error::config(
                        "solver.terminal_params",
                        "squash fraction must lie in (0, 1)",
                    ));
                }
                Ok(TerminalCondition::ball_squash(m, ball, fraction))
            }
            "identity" => Ok(TerminalCondition::identity()),
            "constant" => {
                let p = if self.solver.terminal_params.is_empty() {
                    ball.center.clone()
                } else {
                    Array1::from_vec(self.solver.terminal_params.clone())
                };
                Ok(TerminalCondition::constant(p))
            }
            _ => unreachable!("validated"),
        }
    }

    pub fn solver_params(&self) -> SolverParams {
        SolverParams {
            picard_max: self.solver.picard_max,
            picard_tol: self.solver.picard_tol,
            basis_degree: self.solver.basis_degree,
            z_init: ZInit::Zero,
            ..SolverParams::default()
        }
    }

    pub fn build_dirichlet(&self) -> Result<(DirichletProblem, Vec<Array1<f64>>, Option<QueryGridSpec>)> {
        let dc = &self.dirichlet;
        let domain = match dc.domain.kind.as_str() {
            "disk" => SourceDomain::Disk {
                radius: dc.domain.radius,
            },
            "interval" => SourceDomain::Interval {
                a: dc.domain.a,
                b: dc.domain.b,
            },
            "box" => {
                let lower = dc.domain.lower.clone().ok_or_else(|| {
                    Error::config("dirichlet.domain.lower", "box domains need bounds")
                })?;
                let upper = dc.domain.upper.clone().ok_or_else(|| {
                    Error::config("dirichlet.domain.upper", "box domains need bounds")
                })?;
                SourceDomain::Box {
                    lower: Array1::from_vec(lower),
                    upper: Array1::from_vec(upper),
                }
            }
            _ => unreachable!("validated"),
        };
        let d = domain.dim();
        let boundary: BoundaryMap = match dc.boundary_map.as_str() {
            "coordinate_x" => Arc::new(|x: ArrayView1<f64>| ndarray::array![x[0]]),
            "saddle" => Arc::new(|x: ArrayView1<f64>| ndarray::array![x[0] * x[0] - x[1] * x[1]]),
            "constant" => {
                let v = dc.boundary_params.clone();
                let v = if v.is_empty() { vec![0.0] } else { v };
                Arc::new(move |_x| Array1::from_vec(v.clone()))
            }
            _ => unreachable!("validated"),
        };
        let target_dim = 1;
        let target = ChartManifold::flat(
            target_dim,
            ChartDomain::Box {
                lower: Array1::from_elem(target_dim, -1e6),
                upper: Array1::from_elem(target_dim, 1e6),
            },
        );
        let drift = match self.drift.name.as_str() {
            "zero" => DriftSpec::zero(Array1::zeros(target_dim)),
            "constant" => {
                if self.drift.params.len() != target_dim {
                    return Err(Error::config(
                        "drift.params",
                        "constant drift needs one entry per target dimension",
                    ));
                }
                DriftSpec::constant(
                    Array1::from_vec(self.drift.params.clone()),
                    Array1::zeros(target_dim),
                )
            }
            other => {
                return Err(Error::config(
                    "drift.name",
                    format!("{other:?} is not available for the Dirichlet solver"),
                ))
            }
        };
        let mut diffusion = self.build_diffusion()?;
        if diffusion.dim_d != d {
            // re-dimension the template to the source domain
            diffusion = DiffusionSpec::brownian(d, Array1::zeros(d));
        }
        let problem = DirichletProblem {
            source_domain: domain,
            diffusion,
            boundary_map: boundary,
            drift,
            target,
            gauge: None,
            horizon_cap: dc.horizon_cap,
        };
        let (queries, grid) = match &dc.query_grid {
            Some(qg) => {
                let spec = QueryGridSpec {
                    origin: Array1::from_vec(qg.origin.clone()),
                    spacing: Array1::from_vec(qg.spacing.clone()),
                    counts: qg.counts.clone(),
                };
                (spec.points(), Some(spec))
            }
            None => (vec![Array1::zeros(d)], None),
        };
        Ok((problem, queries, grid))
    }
}

fn bounds_to_domain(
    bounds: Option<&[[f64; 2]]>,
    dim: usize,
    default_half_width: f64,
) -> Result<ChartDomain> {
    match bounds {
        Some(bs) => {
            if bs.len() != dim {
                return Err(Error::config(
                    "manifold.chart_bounds",
                    "one [lower, upper] pair per dimension",
                ));
            }
            for (i, b) in bs.iter().enumerate() {
                if b[0] >= b[1] {
                    return Err(Error::config(
                        "manifold.chart_bounds",
                        format!("bounds for coordinate {i} are not increasing"),
                    ));
                }
            }
            Ok(ChartDomain::Box {
                lower: Array1::from_iter(bs.iter().map(|b| b[0])),
                upper: Array1::from_iter(bs.iter().map(|b| b[1])),
            })
        }
        None => Ok(ChartDomain::Box {
            lower: Array1::from_elem(dim, -default_half_width),
            upper: Array1::from_elem(dim, default_half_width),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_build() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let m = cfg.build_manifold().unwrap();
        assert_eq!(m.dim(), 2);
        let ball = cfg.build_ball(&m).unwrap();
        assert!((ball.radius - 0.5 * FRAC_PI_2).abs() < 1e-12);
        cfg.build_gauge().unwrap();
        cfg.build_diffusion().unwrap();
        cfg.build_drift(&m, &ball).unwrap();
        cfg.build_terminal(&m, &ball).unwrap();
        cfg.build_dirichlet().unwrap();
    }

    #[test]
    fn out_of_range_gauge_exponent_names_the_field() {
        let text = r#"{"gauge": {"a": 2.5}}"#;
        match ExperimentConfig::from_json(text) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "gauge.a"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn regular_ball_constraint_is_enforced() {
        let text = r#"{"ball": {"gamma": 1.0}}"#;
        match ExperimentConfig::from_json(text) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "ball.gamma"),
            other => panic!("expected config error, got {other:?}"),
        }
        let text2 = r#"{"diagnostics": {"e_factor": 3.0}}"#;
        match ExperimentConfig::from_json(text2) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "diagnostics.e_factor"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_builtins_are_rejected() {
        for (text, field) in [
            (r#"{"manifold": {"kind": "torus"}}"#, "manifold.kind"),
            (r#"{"drift": {"name": "vortex"}}"#, "drift.name"),
            (r#"{"estimates": {"names": ["nope"]}}"#, "estimates.names"),
        ] {
            match ExperimentConfig::from_json(text) {
                Err(Error::Config { field: f, .. }) => assert_eq!(f, field),
                other => panic!("expected config error for {text}, got {other:?}"),
            }
        }
    }
}
