//! Registry of sampled geometric estimates.
//!
//! Each entry draws random configurations (points, directions, frames) on a
//! chart, evaluates both sides of one inequality, and reports the smallest
//! margin together with any constants fitted from the sample. Names are
//! fixed strings; unknown names are rejected.

use super::{sinc_ratio, split_components, GaugeFunction, GaugeKind};
use crate::error::{Error, Result};
use crate::geometry::{ChartDomain, ChartKind, ChartManifold, DomainGauge};
use crate::numerics::{central_d1, central_d2, standard_normal};
use crate::report::EstimateReport;
use ndarray::{concatenate, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use std::sync::Arc;

/// Drift signature used by the estimates that involve the BSDE driver:
/// (b, x, z) -> tangent vector at x.
pub type DriftFn =
    Arc<dyn Fn(ArrayView1<f64>, ArrayView1<f64>, ArrayView2<f64>) -> Array1<f64> + Send + Sync>;

/// Tunables for [`verify_estimate`]. `Default` gives desk-scale settings
/// that match the built-in charts.
#[derive(Clone)]
pub struct EstimateParams {
    pub seed: u64,
    /// Range of distances dist(x, x') sampled for two-point estimates.
    pub delta_range: (f64, f64),
    /// Sample region; defaults to an equatorial box on spheres and a
    /// shrunken chart box otherwise.
    pub region: Option<ChartDomain>,
    /// Ball (center + radius) for the one-point distance estimates.
    pub ball: Option<DomainGauge>,
    /// Weight of the transported-difference term in the drift bound.
    pub epsilon: f64,
    /// Lower bound on the Jacobi-comparison constant for the near-diagonal
    /// Hessian estimate; must exceed 1.
    pub beta: f64,
    /// Drift and its declared Lipschitz constant for the drift bound.
    pub drift: Option<DriftFn>,
    pub lipschitz: f64,
    /// Dimension of the first drift argument.
    pub aux_dim: usize,
    /// Number of noise columns in sampled frames.
    pub frame_cols: usize,
    /// Scale of sampled frame entries.
    pub frame_scale: f64,
    /// Distances at or below this are considered near-diagonal.
    pub near_diagonal: f64,
    /// Margins below -tolerance fail the check.
    pub tolerance: f64,
}

impl Default for EstimateParams {
    fn default() -> Self {
        EstimateParams {
            seed: 7,
            delta_range: (0.1, 1.0),
            region: None,
            ball: None,
            epsilon: 0.5,
            beta: 1.2,
            drift: None,
            lipschitz: 1.0,
            aux_dim: 2,
            frame_cols: 2,
            frame_scale: 1.0,
            near_diagonal: 0.1,
            tolerance: 1e-6,
        }
    }
}

pub const ESTIMATE_NAMES: [&str; 9] = [
    "2der1",
    "derkpos",
    "estimhess1",
    "estimhess2",
    "minA",
    "minhesspsi",
    "minhessdelta",
    "2tp2",
    "2majdpsi",
];

/// sqrt(K) cot(sqrt(K) d), continued as 1/d when K = 0.
pub fn sqrtk_cot(k: f64, d: f64) -> f64 {
    if k > 0.0 {
        let s = k.sqrt();
        s * (s * d).cos() / (s * d).sin()
    } else {
        1.0 / d
    }
}

struct Sampler<'a> {
    m: &'a ChartManifold,
    region: ChartDomain,
    rng: ChaCha12Rng,
}

impl<'a> Sampler<'a> {
    fn new(m: &'a ChartManifold, params: &EstimateParams) -> Self {
        let region = params.region.clone().unwrap_or_else(|| default_region(m));
        Sampler {
            m,
            region,
            rng: ChaCha12Rng::seed_from_u64(params.seed),
        }
    }

    fn point(&mut self) -> Array1<f64> {
        loop {
            let x = self.region.sample(&mut self.rng);
            if self.m.contains(x.view()) {
                return x;
            }
        }
    }

    fn gaussian_vec(&mut self, n: usize, scale: f64) -> Array1<f64> {
        Array1::from_iter((0..n).map(|_| scale * standard_normal(&mut self.rng)))
    }

    fn frame(&mut self, cols: usize, scale: f64) -> Array2<f64> {
        let n = self.m.dim();
        Array2::from_shape_fn((n, cols), |_| scale * standard_normal(&mut self.rng))
    }

    /// Riemannian unit direction at x.
    fn unit_dir(&mut self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        for _ in 0..64 {
            let v = self.gaussian_vec(self.m.dim(), 1.0);
            let norm = self.m.riemannian_norm(x, v.view())?;
            if norm > 1e-8 {
                return Ok(v.mapv(|c| c / norm));
            }
        }
        Err(Error::Numerical("failed to draw a unit direction".into()))
    }

    /// Point pair at a sampled distance, with the connecting geodesic inside
    /// the chart.
    fn pair(&mut self, delta_range: (f64, f64)) -> Result<(Array1<f64>, Array1<f64>, f64)> {
        for _ in 0..400 {
            let x = self.point();
            let delta = self.rng.gen_range(delta_range.0..delta_range.1);
            let dir = self.unit_dir(x.view())?;
            match self.m.exp_map(x.view(), dir.mapv(|c| c * delta).view(), 1.0) {
                Ok(xp) => {
                    let d = self.m.distance(x.view(), xp.view())?;
                    if d >= delta_range.0 * 0.5 {
                        return Ok((x, xp, d));
                    }
                }
                Err(Error::Escape { .. }) => continue,
                Err(e) => return Err(e),
            }
        }
        Err(Error::Convergence(
            "could not sample a point pair inside the chart".into(),
        ))
    }
}

fn default_region(m: &ChartManifold) -> ChartDomain {
    match m.kind() {
        ChartKind::Sphere { .. } => ChartDomain::Box {
            lower: Array1::from_vec(vec![std::f64::consts::FRAC_PI_2 - 0.6, -0.6]),
            upper: Array1::from_vec(vec![std::f64::consts::FRAC_PI_2 + 0.6, 0.6]),
        },
        _ => match m.domain() {
            ChartDomain::Box { lower, upper } => {
                let mid = (lower + upper).mapv(|c| c * 0.5);
                let half = (upper - lower).mapv(|c| c * 0.3);
                ChartDomain::Box {
                    lower: &mid - &half,
                    upper: &mid + &half,
                }
            }
            b => b.clone(),
        },
    }
}

fn stack(u0: ArrayView1<f64>, u1: ArrayView1<f64>) -> Array1<f64> {
    concatenate![Axis(0), u0, u1]
}

fn flatten_sample(parts: &[ArrayView1<f64>]) -> Vec<f64> {
    parts.iter().flat_map(|p| p.iter().copied()).collect()
}

fn default_drift(lipschitz: f64, aux_dim: usize) -> DriftFn {
    Arc::new(move |b: ArrayView1<f64>, x: ArrayView1<f64>, _z: ArrayView2<f64>| {
        Array1::from_shape_fn(x.len(), |k| lipschitz * (x[k] + b[k % aux_dim]).sin())
    })
}

/// Directional derivative of the two-point distance along the product
/// geodesic with initial velocity (u0, u1).
fn distance_first_derivative(
    m: &ChartManifold,
    x: ArrayView1<f64>,
    xp: ArrayView1<f64>,
    u0: ArrayView1<f64>,
    u1: ArrayView1<f64>,
) -> Result<f64> {
    let v = central_d1(
        |t| {
            (|| -> Result<f64> {
                let a = m.geodesic(x, u0, t)?;
                let b = m.geodesic(xp, u1, t)?;
                m.distance(a.view(), b.view())
            })()
            .unwrap_or(f64::NAN)
        },
        1e-4,
    );
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numerical("non-finite distance derivative".into()))
    }
}

/// Second derivative of the two-point distance along the product geodesic;
/// this is the product-connection Hessian quadratic form of dist. The
/// direction is normalized before the stencil (the form is quadratic), so
/// the truncation error does not blow up with the sampled |u|.
fn distance_second_derivative(
    m: &ChartManifold,
    x: ArrayView1<f64>,
    xp: ArrayView1<f64>,
    u0: ArrayView1<f64>,
    u1: ArrayView1<f64>,
) -> Result<f64> {
    let scale = (u0.dot(&u0) + u1.dot(&u1)).sqrt();
    if scale == 0.0 {
        return Ok(0.0);
    }
    let v0 = u0.mapv(|c| c / scale);
    let v1 = u1.mapv(|c| c / scale);
    let v = central_d2(
        |t| {
            (|| -> Result<f64> {
                let a = m.geodesic(x, v0.view(), t)?;
                let b = m.geodesic(xp, v1.view(), t)?;
                m.distance(a.view(), b.view())
            })()
            .unwrap_or(f64::NAN)
        },
        1e-3,
    );
    if v.is_finite() {
        Ok(v * scale * scale)
    } else {
        Err(Error::Numerical("non-finite distance Hessian".into()))
    }
}

/// One-point connection Hessian quadratic form of a scalar function, as the
/// second derivative along the geodesic through x with velocity u. The
/// direction is normalized before the stencil and the form rescaled.
pub fn scalar_hessian_quadratic<F: Fn(ArrayView1<f64>) -> Result<f64>>(
    m: &ChartManifold,
    f: F,
    x: ArrayView1<f64>,
    u: ArrayView1<f64>,
    step: f64,
) -> Result<f64> {
    let scale = u.dot(&u).sqrt();
    if scale == 0.0 {
        return Ok(0.0);
    }
    let unit = u.mapv(|c| c / scale);
    let v = central_d2(
        |t| {
            (|| -> Result<f64> {
                let p = m.geodesic(x, unit.view(), t)?;
                f(p.view())
            })()
            .unwrap_or(f64::NAN)
        },
        step,
    );
    if v.is_finite() {
        Ok(v * scale * scale)
    } else {
        Err(Error::Numerical("non-finite scalar Hessian".into()))
    }
}

/// Evaluate the named estimate over `sample_count` random configurations.
pub fn verify_estimate(
    name: &str,
    m: &ChartManifold,
    g: &GaugeFunction,
    sample_count: usize,
    params: &EstimateParams,
) -> Result<EstimateReport> {
    match name {
        "2der1" => der1_identity(m, sample_count, params),
        "derkpos" => derkpos(m, sample_count, params),
        "estimhess1" => estimhess1(m, g, sample_count, params),
        "estimhess2" => estimhess2(m, g, sample_count, params),
        "minA" => min_a(m, g, sample_count, params),
        "minhesspsi" => minhesspsi(m, g, sample_count, params),
        "minhessdelta" => minhessdelta(m, sample_count, params),
        "2tp2" => tp2(m, sample_count, params),
        "2majdpsi" => majdpsi(m, g, sample_count, params),
        other => Err(Error::UnknownEstimate(other.to_string())),
    }
}

/// |d dist <u>| equals the Riemannian norm of (transported v0) - v1, the
/// tangential components of u.
fn der1_identity(
    m: &ChartManifold,
    count: usize,
    params: &EstimateParams,
) -> Result<EstimateReport> {
    let mut s = Sampler::new(m, params);
    let mut report = EstimateReport::new("2der1", count);
    for _ in 0..count {
        let (x, xp, _) = s.pair(params.delta_range)?;
        let u0 = s.gaussian_vec(m.dim(), 1.0);
        let u1 = s.gaussian_vec(m.dim(), 1.0);
        let lhs = distance_first_derivative(m, x.view(), xp.view(), u0.view(), u1.view())?.abs();
        let sp = split_components(m, x.view(), xp.view(), u0.view(), u1.view())?;
        let tv0 = m.parallel_transport(x.view(), xp.view(), sp.tangential.0.view())?;
        let rhs = m.riemannian_norm(xp.view(), (&tv0 - &sp.tangential.1).view())?;
        let margin = -(lhs - rhs).abs();
        report.record(
            margin,
            &flatten_sample(&[x.view(), xp.view(), u0.view(), u1.view()]),
        );
    }
    report.pass = report.min_margin >= -params.tolerance;
    Ok(report)
}

/// Lower bound on the distance Hessian through the Jacobi comparison ratio.
fn derkpos(m: &ChartManifold, count: usize, params: &EstimateParams) -> Result<EstimateReport> {
    let k = m.curvature_bound();
    let mut s = Sampler::new(m, params);
    let mut report = EstimateReport::new("derkpos", count);
    for _ in 0..count {
        let (x, xp, delta) = s.pair(params.delta_range)?;
        if k > 0.0 && delta * k.sqrt() >= std::f64::consts::PI {
            continue;
        }
        let u0 = s.gaussian_vec(m.dim(), 1.0);
        let u1 = s.gaussian_vec(m.dim(), 1.0);
        let lhs = distance_second_derivative(m, x.view(), xp.view(), u0.view(), u1.view())?;
        let sp = split_components(m, x.view(), xp.view(), u0.view(), u1.view())?;
        let tw0 = m.parallel_transport(x.view(), xp.view(), sp.orthogonal.0.view())?;
        let wdiff = m.riemannian_norm(xp.view(), (&tw0 - &sp.orthogonal.1).view())?;
        let w2 = m.riemannian_norm(x.view(), sp.orthogonal.0.view())?.powi(2)
            + m.riemannian_norm(xp.view(), sp.orthogonal.1.view())?.powi(2);
        let y = k.sqrt() * delta / 2.0;
        let ratio = if k > 0.0 {
            (1.0 + sinc_ratio(2.0 * y)) / (1.0 + (2.0 * y).cos())
        } else {
            0.0
        };
        let rhs = wdiff * wdiff / delta - 0.5 * k * delta * ratio * w2;
        report.record(
            lhs - rhs,
            &flatten_sample(&[x.view(), xp.view(), u0.view(), u1.view()]),
        );
    }
    report.pass = report.min_margin >= -params.tolerance;
    Ok(report)
}

fn sin_power_exponent(g: &GaugeFunction) -> Result<f64> {
    match g.kind {
        GaugeKind::SinPower { a } => Ok(a),
        _ => Err(Error::Domain(
            "this estimate is specific to the sin_power gauge".into(),
        )),
    }
}

/// Radius of the near-diagonal neighbourhood on which the two scalar
/// inequalities behind the near-diagonal Hessian bound hold.
fn v_beta_radius(k: f64, beta: f64) -> f64 {
    let mut y_max: f64 = 0.0;
    for i in 1..20_000 {
        let y = i as f64 * (std::f64::consts::FRAC_PI_2 - 1e-6) / 20_000.0;
        let cond1 = y.cos() * sinc_ratio(y) >= 0.5;
        let ratio = (1.0 + sinc_ratio(2.0 * y)) / (1.0 + (2.0 * y).cos());
        let cond2 = y / y.tan() * ratio <= beta;
        if cond1 && cond2 {
            y_max = y;
        } else {
            break;
        }
    }
    2.0 * y_max / k.sqrt()
}

/// Near-diagonal lower Hessian bound for the sin-power gauge: fits the
/// constant alpha for the given beta > 1.
fn estimhess1(
    m: &ChartManifold,
    g: &GaugeFunction,
    count: usize,
    params: &EstimateParams,
) -> Result<EstimateReport> {
    let a = sin_power_exponent(g)?;
    let k = m.curvature_bound();
    if k <= 0.0 {
        return Err(Error::Domain("estimhess1 needs positive curvature".into()));
    }
    if params.beta <= 1.0 {
        return Err(Error::Domain("estimhess1 needs beta > 1".into()));
    }
    let delta_hi = v_beta_radius(k, params.beta).min(params.delta_range.1);
    let delta_lo = params.delta_range.0.max(0.05);
    if delta_hi <= delta_lo {
        return Err(Error::Domain(format!(
            "empty near-diagonal band ({delta_lo}, {delta_hi}) for beta = {}",
            params.beta
        )));
    }
    let mut s = Sampler::new(m, params);
    let mut rows: Vec<(f64, f64, Vec<f64>)> = Vec::with_capacity(count);
    let mut alpha = f64::INFINITY;
    for _ in 0..count {
        let (x, xp, delta) = s.pair((delta_lo, delta_hi))?;
        let u0 = s.gaussian_vec(m.dim(), 1.0);
        let u1 = s.gaussian_vec(m.dim(), 1.0);
        let u = stack(u0.view(), u1.view());
        let lhs = g.hessian_quadratic(m, x.view(), xp.view(), u.view())?;
        let sp = split_components(m, x.view(), xp.view(), u0.view(), u1.view())?;
        let tu0 = m.parallel_transport(x.view(), xp.view(), u0.view())?;
        let udiff = m.riemannian_norm(xp.view(), (&tu0 - &u1).view())?;
        let w2 = m.riemannian_norm(x.view(), sp.orthogonal.0.view())?.powi(2)
            + m.riemannian_norm(xp.view(), sp.orthogonal.1.view())?.powi(2);
        let y = k.sqrt() * delta / 2.0;
        let psi = g.value(m, x.view(), xp.view())?;
        let curv_term = a * params.beta * 0.5 * k * psi * w2;
        let denom = y.sin().powf(a - 2.0) * udiff * udiff;
        if denom > 1e-10 {
            alpha = alpha.min((lhs + curv_term) / denom);
        }
        rows.push((
            lhs + curv_term,
            denom,
            flatten_sample(&[x.view(), xp.view(), u0.view(), u1.view()]),
        ));
    }
    let mut report = EstimateReport::new("estimhess1", count);
    if !alpha.is_finite() {
        alpha = 0.0;
    }
    for (bound, denom, sample) in rows {
        report.record(bound - alpha * denom, &sample);
    }
    report.fitted_constants.insert("alpha".into(), alpha);
    report
        .fitted_constants
        .insert("beta".into(), params.beta);
    report
        .fitted_constants
        .insert("v_beta_radius".into(), delta_hi);
    report.pass = alpha > 0.0 && report.min_margin >= -params.tolerance;
    Ok(report)
}

/// Global lower Hessian bound for the sin-power gauge:
/// Hess Psi_a <u,u> >= -a K/2 Psi_a |u|_r^2 for dist < pi/sqrt(K).
fn estimhess2(
    m: &ChartManifold,
    g: &GaugeFunction,
    count: usize,
    params: &EstimateParams,
) -> Result<EstimateReport> {
    let a = sin_power_exponent(g)?;
    let k = m.curvature_bound();
    if k <= 0.0 {
        return Err(Error::Domain("estimhess2 needs positive curvature".into()));
    }
    let hi = params
        .delta_range
        .1
        .min(std::f64::consts::PI / k.sqrt() - 0.05);
    let mut s = Sampler::new(m, params);
    let mut report = EstimateReport::new("estimhess2", count);
    for _ in 0..count {
        let (x, xp, _) = s.pair((params.delta_range.0, hi))?;
        let u0 = s.gaussian_vec(m.dim(), 1.0);
        let u1 = s.gaussian_vec(m.dim(), 1.0);
        let u = stack(u0.view(), u1.view());
        let lhs = g.hessian_quadratic(m, x.view(), xp.view(), u.view())?;
        let psi = g.value(m, x.view(), xp.view())?;
        let u2 = m.riemannian_norm(x.view(), u0.view())?.powi(2)
            + m.riemannian_norm(xp.view(), u1.view())?.powi(2);
        let rhs = -a * 0.5 * k * psi * u2;
        report.record(
            lhs - rhs,
            &flatten_sample(&[x.view(), xp.view(), u0.view(), u1.view()]),
        );
    }
    report.pass = report.min_margin >= -params.tolerance;
    Ok(report)
}

/// Near-diagonal coercivity of the leading v-coordinate block of the Emery
/// gauge: z^T A~ z >= (eps^2 / 2) |z|^2.
fn min_a(
    m: &ChartManifold,
    g: &GaugeFunction,
    count: usize,
    params: &EstimateParams,
) -> Result<EstimateReport> {
    let eps = match g.kind {
        GaugeKind::Emery { eps } => eps,
        _ => {
            return Err(Error::Domain(
                "minA is specific to the Emery gauge".into(),
            ))
        }
    };
    let p = g.order;
    let mut s = Sampler::new(m, params);
    let mut report = EstimateReport::new("minA", count);
    let mut eta = f64::INFINITY;
    for _ in 0..count {
        let (x, xp, delta) = s.pair((params.near_diagonal * 1e-2, params.near_diagonal))?;
        let z = s.gaussian_vec(m.dim(), 1.0);
        let blocks = g.hessian_blocks(m, x.view(), xp.view())?;
        let quad = z.dot(&blocks.a_tilde.dot(&z));
        let ratio = quad / (delta.powf(p - 2.0) * z.dot(&z));
        eta = eta.min(ratio);
        report.record(
            ratio - 0.5 * eps * eps,
            &flatten_sample(&[x.view(), xp.view(), z.view()]),
        );
    }
    report.fitted_constants.insert("eta".into(), eta);
    report
        .fitted_constants
        .insert("eta_required".into(), 0.5 * eps * eps);
    report.pass = report.min_margin >= -params.tolerance;
    Ok(report)
}

/// Existence of constants (alpha, beta) in the two-sided Hessian lower
/// bound for a gauge comparable to dist^p.
fn minhesspsi(
    m: &ChartManifold,
    g: &GaugeFunction,
    count: usize,
    params: &EstimateParams,
) -> Result<EstimateReport> {
    let p = g.order;
    let mut s = Sampler::new(m, params);
    struct Row {
        lhs: f64,
        transported: f64,
        psi_weight: f64,
        sample: Vec<f64>,
    }
    let mut rows = Vec::with_capacity(count);
    for _ in 0..count {
        let (x, xp, delta) = s.pair(params.delta_range)?;
        let z = s.gaussian_vec(m.dim(), 1.0);
        let zp = s.gaussian_vec(m.dim(), 1.0);
        let u = stack(z.view(), zp.view());
        let lhs = g.hessian_quadratic(m, x.view(), xp.view(), u.view())?;
        let tz = m.parallel_transport(x.view(), xp.view(), z.view())?;
        let tdiff = m.riemannian_norm(xp.view(), (&tz - &zp).view())?;
        let psi = g.value(m, x.view(), xp.view())?;
        let zn = m.riemannian_norm(x.view(), z.view())?.powi(2)
            + m.riemannian_norm(xp.view(), zp.view())?.powi(2);
        rows.push(Row {
            lhs,
            transported: delta.powf(p - 2.0) * tdiff * tdiff,
            psi_weight: psi * zn,
            sample: flatten_sample(&[x.view(), xp.view(), z.view(), zp.view()]),
        });
    }
    // for each alpha on a grid, the smallest feasible beta; keep the
    // largest alpha whose beta stays moderate
    let mut best: Option<(f64, f64)> = None;
    for i in 0..60 {
        let alpha = 1e-4 * 10f64.powf(i as f64 * 0.1);
        let mut beta: f64 = 0.0;
        let mut ok = true;
        for r in &rows {
            if r.psi_weight <= 1e-14 {
                if r.lhs < alpha * r.transported - 1e-12 {
                    ok = false;
                    break;
                }
                continue;
            }
            beta = beta.max((alpha * r.transported - r.lhs) / r.psi_weight);
        }
        if ok && beta <= 1e4 {
            best = Some((alpha, beta.max(0.0)));
        }
    }
    let mut report = EstimateReport::new("minhesspsi", count);
    match best {
        Some((alpha, beta)) => {
            for r in &rows {
                report.record(
                    r.lhs - alpha * r.transported + beta * r.psi_weight,
                    &r.sample,
                );
            }
            report.fitted_constants.insert("alpha".into(), alpha);
            report.fitted_constants.insert("beta".into(), beta);
            report.pass = report.min_margin >= -params.tolerance;
        }
        None => {
            report.min_margin = f64::NEG_INFINITY;
            report.pass = false;
            report.notes = "no feasible (alpha, beta) on the grid".into();
        }
    }
    Ok(report)
}

/// One-point distance Hessian bound on a ball:
/// Hess dist(o, .)<u,u> >= sqrt(K) cot(sqrt(K) dist) |w|_r^2.
fn minhessdelta(
    m: &ChartManifold,
    count: usize,
    params: &EstimateParams,
) -> Result<EstimateReport> {
    let k = m.curvature_bound();
    let ball = params.ball.clone().unwrap_or_else(|| default_ball(m));
    let o = ball.center.clone();
    let mut s = Sampler::new(m, params);
    let mut report = EstimateReport::new("minhessdelta", count);
    let lo = params.delta_range.0.max(0.05);
    let hi = params.delta_range.1.min(ball.radius);
    for _ in 0..count {
        let dir = s.unit_dir(o.view())?;
        let delta = s.rng.gen_range(lo..hi);
        let x = m.exp_map(o.view(), dir.view(), delta)?;
        let u = s.gaussian_vec(m.dim(), 1.0);
        let lhs = scalar_hessian_quadratic(
            m,
            |p| m.distance(o.view(), p),
            x.view(),
            u.view(),
            1e-3,
        )?;
        // orthogonal part of u with respect to the radial direction at x
        let radial = m.connecting_end_velocity(o.view(), x.view())?;
        let rn = m.riemannian_norm(x.view(), radial.view())?;
        let e = radial.mapv(|c| c / rn);
        let c = m.inner(x.view(), u.view(), e.view())?;
        let w = &u - &e.mapv(|t| t * c);
        let w2 = m.riemannian_norm(x.view(), w.view())?.powi(2);
        let d = m.distance(o.view(), x.view())?;
        let rhs = sqrtk_cot(k, d) * w2;
        report.record(lhs - rhs, &flatten_sample(&[x.view(), u.view()]));
    }
    report.pass = report.min_margin >= -params.tolerance;
    Ok(report)
}

fn default_ball(m: &ChartManifold) -> DomainGauge {
    let k = m.curvature_bound();
    let (center, rho) = match m.kind() {
        ChartKind::Sphere { .. } => (
            Array1::from_vec(vec![std::f64::consts::FRAC_PI_2, 0.0]),
            0.5 * std::f64::consts::FRAC_PI_2 / k.sqrt(),
        ),
        _ => {
            let c = match m.domain() {
                ChartDomain::Box { lower, upper } => (lower + upper).mapv(|v| v * 0.5),
                ChartDomain::Ball { center, .. } => center.clone(),
            };
            (c, 0.5)
        }
    };
    DomainGauge::geodesic_ball(center, rho)
}

/// Euclidean/transported comparison of frames: fits the smallest C with
/// |z - z'| <= C (|T z - z'|_r + dist (|z|_r + |z'|_r)).
fn tp2(m: &ChartManifold, count: usize, params: &EstimateParams) -> Result<EstimateReport> {
    let mut s = Sampler::new(m, params);
    let mut report = EstimateReport::new("2tp2", count);
    let mut c_max: f64 = 0.0;
    for _ in 0..count {
        let (x, xp, delta) = s.pair((params.near_diagonal * 1e-2, params.delta_range.1))?;
        let z = s.gaussian_vec(m.dim(), 1.0);
        let zp = s.gaussian_vec(m.dim(), 1.0);
        let tz = m.parallel_transport(x.view(), xp.view(), z.view())?;
        let lhs = (&z - &zp).mapv(|t| t * t).sum().sqrt();
        let rhs = m.riemannian_norm(xp.view(), (&tz - &zp).view())?
            + delta
                * (m.riemannian_norm(x.view(), z.view())?
                    + m.riemannian_norm(xp.view(), zp.view())?);
        if rhs > 1e-12 {
            c_max = c_max.max(lhs / rhs);
        } else if lhs > 1e-10 {
            report.record(-lhs, &flatten_sample(&[x.view(), xp.view()]));
        }
    }
    if report.min_margin == f64::INFINITY {
        report.min_margin = 0.0;
    }
    report.fitted_constants.insert("C".into(), c_max);
    report.pass = c_max.is_finite() && report.min_margin >= -params.tolerance;
    Ok(report)
}

/// Upper bound on the drift pairing against the gauge differential, with
/// the fitted constant C_eps for the supplied epsilon.
fn majdpsi(
    m: &ChartManifold,
    g: &GaugeFunction,
    count: usize,
    params: &EstimateParams,
) -> Result<EstimateReport> {
    let p = g.order;
    let drift = params
        .drift
        .clone()
        .unwrap_or_else(|| default_drift(params.lipschitz, params.aux_dim));
    let mut s = Sampler::new(m, params);
    struct Row {
        lhs: f64,
        transported: f64,
        weight: f64,
        sample: Vec<f64>,
    }
    let mut rows = Vec::with_capacity(count);
    for _ in 0..count {
        let (x, xp, delta) = s.pair((0.05f64.max(params.delta_range.0 * 0.5), params.delta_range.1))?;
        let b = s.gaussian_vec(params.aux_dim, 1.0);
        let z = s.frame(params.frame_cols, params.frame_scale);
        let zp = s.frame(params.frame_cols, params.frame_scale);
        let f0 = drift(b.view(), x.view(), z.view());
        let f1 = drift(b.view(), xp.view(), zp.view());
        let grad = g.gradient(m, x.view(), xp.view())?;
        let n = m.dim();
        let mut lhs = 0.0;
        for i in 0..n {
            lhs += grad[i] * f0[i] + grad[n + i] * f1[i];
        }
        let lhs = lhs.abs();
        let tz = m.parallel_transport_frame(x.view(), xp.view(), z.view())?;
        let tdiff = m.frame_norm(xp.view(), (&tz - &zp).view())?;
        let psi = g.value(m, x.view(), xp.view())?;
        let weight =
            psi * (1.0 + m.frame_norm(x.view(), z.view())? + m.frame_norm(xp.view(), zp.view())?);
        rows.push(Row {
            lhs,
            transported: params.epsilon * delta.powf(p - 2.0) * tdiff * tdiff,
            weight,
            sample: flatten_sample(&[x.view(), xp.view(), b.view()]),
        });
    }
    let mut c_eps: f64 = 0.0;
    for r in &rows {
        if r.weight > 1e-14 {
            c_eps = c_eps.max((r.lhs - r.transported) / r.weight);
        }
    }
    c_eps = c_eps.max(0.0);
    let mut report = EstimateReport::new("2majdpsi", count);
    for r in &rows {
        report.record(c_eps * r.weight + r.transported - r.lhs, &r.sample);
    }
    report.fitted_constants.insert("C_eps".into(), c_eps);
    report
        .fitted_constants
        .insert("epsilon".into(), params.epsilon);
    report.pass = c_eps.is_finite() && report.min_margin >= -params.tolerance;
    Ok(report)
}

/// Grid maximization oracle for the Jacobi comparison ratio: brute-force
/// maximum of H(2y, .) over a uniform grid on [0, pi - 2y].
pub fn jacobi_ratio_grid_max(y: f64, grid_points: usize) -> (f64, f64) {
    let t = 2.0 * y;
    let hi = std::f64::consts::PI - t;
    let mut best = f64::NEG_INFINITY;
    let mut best_beta = 0.0;
    for i in 0..=grid_points {
        let beta = hi * i as f64 / grid_points as f64;
        let v = super::jacobi_ratio(t, beta);
        if v > best {
            best = v;
            best_beta = beta;
        }
    }
    (best, best_beta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gauges::jacobi_ratio_max;

    #[test]
    fn unknown_name_is_rejected() {
        let m = ChartManifold::sphere(1.0);
        let g = GaugeFunction::distance_squared();
        let err = verify_estimate("nope", &m, &g, 3, &EstimateParams::default());
        assert!(matches!(err, Err(Error::UnknownEstimate(_))));
    }

    #[test]
    fn jacobi_grid_agrees_with_closed_form() {
        for &y in &[0.1, 0.5, 1.0, 1.4] {
            let (max, _) = jacobi_ratio_max(y).unwrap();
            let (grid, beta) = jacobi_ratio_grid_max(y, 100_000);
            assert!((max - grid).abs() < 1e-8, "y={y}: {max} vs {grid}");
            assert!(
                (beta - (std::f64::consts::FRAC_PI_2 - y)).abs() < 1e-4,
                "argmax off at y={y}: {beta}"
            );
        }
    }
}
