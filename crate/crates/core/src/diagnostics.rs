//! Numerical certificates for the probabilistic arguments: the
//! submartingale sum and process, Ito-formula residuals, exponential
//! integrability test functions, the uniqueness gap and the equatorial
//! counterexample to uniqueness on large balls.

use crate::bsde::{BsdeSolution, DriftSpec};
use crate::error::{Error, Result};
use crate::gauges::estimates::scalar_hessian_quadratic;
use crate::gauges::GaugeFunction;
use crate::geometry::{ChartManifold, DomainGauge};
use crate::numerics::{central_d1, mean_and_se, standard_normal};
use crate::regression::regress_with_errors;
use crate::report::EstimateReport;
use crate::sde::{path_rng, uniform_grid};
use ndarray::{concatenate, s, Array1, Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use std::f64::consts::{FRAC_PI_2, PI};

/// Constants of the compensator A_t = lambda t + mu int (|Z|^2 + |Z'|^2).
#[derive(Debug, Clone)]
pub struct SubmartingaleParams {
    pub lambda: f64,
    pub mu: f64,
    pub gauge: GaugeFunction,
    /// The factor e in mu = e K / 4 for geodesic balls (recorded for
    /// provenance; `mu` is authoritative).
    pub e_factor: f64,
}

impl SubmartingaleParams {
    /// Ball case: mu = e K / 4.
    pub fn for_ball(gauge: GaugeFunction, e_factor: f64, curvature: f64, lambda: f64) -> Self {
        assert!(lambda >= 0.0 && e_factor > 1.0);
        SubmartingaleParams {
            lambda,
            mu: e_factor * curvature / 4.0,
            gauge,
            e_factor,
        }
    }
}

/// One sampled configuration of the coupled system.
#[derive(Debug, Clone)]
pub struct PairState {
    pub b: Array1<f64>,
    pub x: Array1<f64>,
    pub x_prime: Array1<f64>,
    pub z: Array2<f64>,
    pub z_prime: Array2<f64>,
}

/// The integrand whose nonnegativity makes S_t a submartingale:
/// 1/2 sum_i Hess Psi <u_i, u_i> + D Psi . (f, f')
///   + (lambda + mu (|z|_r^2 + |z'|_r^2)) Psi.
pub fn submartingale_sum(
    p: &SubmartingaleParams,
    m: &ChartManifold,
    d: &DriftSpec,
    state: &PairState,
) -> Result<f64> {
    let n = m.dim();
    let dw = state.z.ncols();
    let hess = p
        .gauge
        .hessian_matrix(m, state.x.view(), state.x_prime.view())?;
    let mut total = 0.0;
    for i in 0..dw {
        let u = concatenate![Axis(0), state.z.column(i), state.z_prime.column(i)];
        total += 0.5 * u.dot(&hess.dot(&u));
    }
    let grad = p
        .gauge
        .gradient(m, state.x.view(), state.x_prime.view())?;
    let f0 = (d.f)(state.b.view(), state.x.view(), state.z.view());
    let f1 = (d.f)(state.b.view(), state.x_prime.view(), state.z_prime.view());
    for i in 0..n {
        total += grad[i] * f0[i] + grad[n + i] * f1[i];
    }
    let psi = p.gauge.value(m, state.x.view(), state.x_prime.view())?;
    let zn = m.frame_norm(state.x.view(), state.z.view())?.powi(2);
    let zpn = m
        .frame_norm(state.x_prime.view(), state.z_prime.view())?
        .powi(2);
    total += (p.lambda + p.mu * (zn + zpn)) * psi;
    Ok(total)
}

/// Grid of candidate lambdas for the calibration search.
pub const LAMBDA_GRID: [f64; 12] = [
    0.0, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0, 128.0, 256.0, 512.0, 1024.0,
];

/// Sample pair states inside a geodesic ball. Distances below `delta_floor`
/// are excluded: the sin-power gauge is non-smooth on the diagonal, and
/// finite differences of its Hessian degenerate just off it.
pub fn sample_pair_states(
    m: &ChartManifold,
    ball: &DomainGauge,
    count: usize,
    noise_cols: usize,
    frame_scale: f64,
    delta_floor: f64,
    seed: u64,
) -> Result<Vec<PairState>> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let n = m.dim();
    let mut out = Vec::with_capacity(count);
    let point_in_ball = |rng: &mut ChaCha12Rng| -> Result<Array1<f64>> {
        let dir = Array1::from_shape_fn(n, |_| standard_normal(rng));
        let nr = m.riemannian_norm(ball.center.view(), dir.view())?;
        let r: f64 = rng.gen_range(0.0..ball.radius);
        m.exp_map(ball.center.view(), dir.mapv(|c| c * r / nr).view(), 1.0)
    };
    while out.len() < count {
        let x = point_in_ball(&mut rng)?;
        let xp = point_in_ball(&mut rng)?;
        if m.distance(x.view(), xp.view())? < delta_floor {
            continue;
        }
        let b = Array1::from_shape_fn(n, |_| standard_normal(&mut rng));
        let z = Array2::from_shape_fn((n, noise_cols), |_| {
            frame_scale * standard_normal(&mut rng)
        });
        let z_prime = Array2::from_shape_fn((n, noise_cols), |_| {
            frame_scale * standard_normal(&mut rng)
        });
        out.push(PairState {
            b,
            x,
            x_prime: xp,
            z,
            z_prime,
        });
    }
    Ok(out)
}

/// Smallest lambda on the grid making the sampled sum nonnegative (within
/// `tolerance`), together with the margin report at that lambda.
pub fn calibrate_lambda(
    p_template: &SubmartingaleParams,
    m: &ChartManifold,
    d: &DriftSpec,
    states: &[PairState],
    tolerance: f64,
) -> Result<(f64, EstimateReport)> {
    // evaluate the lambda-independent part once per state
    let mut base = Vec::with_capacity(states.len());
    let zero_lambda = SubmartingaleParams {
        lambda: 0.0,
        mu: p_template.mu,
        gauge: p_template.gauge.clone(),
        e_factor: p_template.e_factor,
    };
    for st in states {
        let s0 = submartingale_sum(&zero_lambda, m, d, st)?;
        let psi = p_template
            .gauge
            .value(m, st.x.view(), st.x_prime.view())?;
        base.push((s0, psi));
    }
    for &lambda in LAMBDA_GRID.iter() {
        let min = base
            .iter()
            .map(|(s0, psi)| s0 + lambda * psi)
            .fold(f64::INFINITY, f64::min);
        if min >= -tolerance {
            let mut report = EstimateReport::new("submartingale_sum", states.len());
            for (st, (s0, psi)) in states.iter().zip(base.iter()) {
                let margin = s0 + lambda * psi;
                report.record(
                    margin,
                    &[
                        st.x.to_vec(),
                        st.x_prime.to_vec(),
                    ]
                    .concat(),
                );
            }
            report.fitted_constants.insert("lambda".into(), lambda);
            report.fitted_constants.insert("mu".into(), p_template.mu);
            report.pass = true;
            return Ok((lambda, report));
        }
    }
    Err(Error::Convergence(
        "no lambda on the grid makes the sampled sum nonnegative".into(),
    ))
}

/// Discrete compensated process S_i = exp(A_i) Psi(X_i, X'_i) with the
/// left-endpoint quadrature of A.
#[derive(Debug, Clone)]
pub struct SProcess {
    /// P x (N+1) compensator values.
    pub a: Array2<f64>,
    /// P x (N+1) process values.
    pub s: Array2<f64>,
}

pub fn s_process(
    m: &ChartManifold,
    sol: &BsdeSolution,
    sol_prime: &BsdeSolution,
    p: &SubmartingaleParams,
) -> Result<SProcess> {
    if sol.grid != sol_prime.grid {
        return Err(Error::Domain("solutions live on different grids".into()));
    }
    let paths = sol.path_count();
    let n_steps = sol.grid.len() - 1;
    let mut a = Array2::zeros((paths, n_steps + 1));
    let mut s_vals = Array2::zeros((paths, n_steps + 1));
    for pth in 0..paths {
        let mut acc = 0.0;
        for i in 0..=n_steps {
            let t = sol.grid[i];
            a[[pth, i]] = p.lambda * t + p.mu * acc;
            let psi = p.gauge.value(
                m,
                sol.x.slice(s![pth, i, ..]),
                sol_prime.x.slice(s![pth, i, ..]),
            )?;
            s_vals[[pth, i]] = a[[pth, i]].exp() * psi;
            if i < n_steps {
                let dt = sol.grid[i + 1] - sol.grid[i];
                let zn = m
                    .frame_norm(sol.x.slice(s![pth, i, ..]), sol.z.slice(s![pth, i, .., ..]))?
                    .powi(2);
                let zpn = m
                    .frame_norm(
                        sol_prime.x.slice(s![pth, i, ..]),
                        sol_prime.z.slice(s![pth, i, .., ..]),
                    )?
                    .powi(2);
                acc += (zn + zpn) * dt;
            }
        }
    }
    Ok(SProcess { a, s: s_vals })
}

/// Per-step mean conditional increments of S with their standard errors.
#[derive(Debug, Clone)]
pub struct IncrementReport {
    pub means: Vec<f64>,
    pub standard_errors: Vec<f64>,
    /// True when every step mean stays above -3 SE.
    pub pass: bool,
    pub worst_step: usize,
    pub worst_ratio: f64,
}

pub fn conditional_increment_check(proc: &SProcess) -> IncrementReport {
    let paths = proc.s.nrows();
    let n_steps = proc.s.ncols() - 1;
    let mut means = Vec::with_capacity(n_steps);
    let mut ses = Vec::with_capacity(n_steps);
    let mut pass = true;
    let mut worst_step = 0;
    let mut worst_ratio = f64::INFINITY;
    for i in 0..n_steps {
        let incs: Vec<f64> = (0..paths)
            .map(|p| proc.s[[p, i + 1]] - proc.s[[p, i]])
            .collect();
        let (mean, se) = mean_and_se(&incs);
        let ratio = if se > 0.0 { mean / se } else { f64::INFINITY };
        if ratio < worst_ratio {
            worst_ratio = ratio;
            worst_step = i;
        }
        if mean < -3.0 * se {
            pass = false;
        }
        means.push(mean);
        ses.push(se);
    }
    IncrementReport {
        means,
        standard_errors: ses,
        pass,
        worst_step,
        worst_ratio,
    }
}

/// Left-endpoint quadrature of the squared Riemannian Z-norm along each
/// path, the exponent in the integrability class.
pub fn z_path_integrals(m: &ChartManifold, sol: &BsdeSolution) -> Result<Vec<f64>> {
    let paths = sol.path_count();
    let n_steps = sol.grid.len() - 1;
    let mut out = Vec::with_capacity(paths);
    for p in 0..paths {
        let mut acc = 0.0;
        for i in 0..n_steps {
            let dt = sol.grid[i + 1] - sol.grid[i];
            let zn = m
                .frame_norm(sol.x.slice(s![p, i, ..]), sol.z.slice(s![p, i, .., ..]))?
                .powi(2);
            acc += zn * dt;
        }
        out.push(acc);
    }
    Ok(out)
}

/// A scalar function on the chart with derivative helpers.
#[derive(Clone)]
pub struct ScalarField {
    pub f: std::sync::Arc<dyn Fn(ArrayView1<f64>) -> f64 + Send + Sync>,
}

impl ScalarField {
    pub fn new(f: impl Fn(ArrayView1<f64>) -> f64 + Send + Sync + 'static) -> Self {
        ScalarField {
            f: std::sync::Arc::new(f),
        }
    }

    pub fn value(&self, x: ArrayView1<f64>) -> f64 {
        (self.f)(x)
    }

    /// Euclidean gradient by fourth-order central differences.
    pub fn gradient(&self, x: ArrayView1<f64>) -> Array1<f64> {
        let n = x.len();
        Array1::from_shape_fn(n, |i| {
            central_d1(
                |t| {
                    let mut xs = x.to_owned();
                    xs[i] += t;
                    (self.f)(xs.view())
                },
                1e-4,
            )
        })
    }

    /// Connection Hessian quadratic form along the geodesic through x.
    pub fn hessian_quadratic(
        &self,
        m: &ChartManifold,
        x: ArrayView1<f64>,
        u: ArrayView1<f64>,
    ) -> Result<f64> {
        scalar_hessian_quadratic(m, |p| Ok((self.f)(p)), x, u, 1e-3)
    }
}

#[derive(Debug, Clone)]
pub struct ItoReport {
    pub residuals: Vec<f64>,
    pub max_abs: f64,
    pub l2: f64,
}

/// Residual of the discrete Ito expansion of h along the path-consistent
/// (forward re-simulated) states of a solution:
/// h(X_N) - h(X_0) - sum [Dh (Z dW) + (1/2 sum_k Hess h <z_k, z_k> + Dh . f) dt].
pub fn ito_residual(
    m: &ChartManifold,
    d: &DriftSpec,
    sol: &BsdeSolution,
    h: &ScalarField,
) -> Result<ItoReport> {
    let paths = sol.path_count();
    let n_steps = sol.grid.len() - 1;
    let dw = sol.noise_dim();
    let mut residuals = Vec::with_capacity(paths);
    for p in 0..paths {
        let first = sol.x_forward.slice(s![p, 0, ..]);
        let last = sol.x_forward.slice(s![p, n_steps, ..]);
        let mut acc = h.value(last) - h.value(first);
        for i in 0..n_steps {
            let frozen = sol
                .stop_index
                .as_ref()
                .map_or(false, |si| si[p] <= i);
            if frozen {
                continue;
            }
            let dt = sol.grid[i + 1] - sol.grid[i];
            let x_i = sol.x_forward.slice(s![p, i, ..]);
            let z_i = sol.z.slice(s![p, i, .., ..]);
            let grad = h.gradient(x_i);
            let dwi = sol.w.increments.slice(s![p, i, ..]);
            acc -= grad.dot(&z_i.dot(&dwi));
            let mut hess_tr = 0.0;
            for k in 0..dw {
                hess_tr += h.hessian_quadratic(m, x_i, z_i.column(k))?;
            }
            let fval = (d.f)(sol.b.paths.slice(s![p, i, ..]), x_i, z_i);
            acc -= (0.5 * hess_tr + grad.dot(&fval)) * dt;
        }
        residuals.push(acc);
    }
    let max_abs = residuals.iter().fold(0.0f64, |a, r| a.max(r.abs()));
    let l2 = (residuals.iter().map(|r| r * r).sum::<f64>() / paths as f64).sqrt();
    Ok(ItoReport {
        residuals,
        max_abs,
        l2,
    })
}

/// Test functions for the exponential-integrability lemmas.
#[derive(Debug, Clone)]
pub enum IntegrabilityKind {
    /// phi(x) = cos(a |x|) on |x| <= r0 in the chart; the lemma construction
    /// takes a = sqrt(2 pi C_r mu) and r0 < pi / (2a).
    CosEuclidean { a: f64, r0: f64 },
    /// phi(x) = cos(beta sqrt(K) dist(o, x)) on the geodesic ball of radius
    /// gamma pi / (2 sqrt(K)); needs 1 < beta < 1/gamma.
    CosBall {
        beta: f64,
        gamma: f64,
        center: Array1<f64>,
    },
}

/// Sample the inequality Hess phi <u,u> + 2 alpha phi |u|_r^2 <= 0; the
/// reported margin is its negation, so a pass is min_margin >= -tol.
pub fn integrability_gauge_check(
    kind: &IntegrabilityKind,
    m: &ChartManifold,
    alpha: f64,
    samples: usize,
    seed: u64,
) -> Result<EstimateReport> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let n = m.dim();
    let mut report = EstimateReport::new("integrability_gauge", samples);
    let (field, center, radius): (ScalarField, Array1<f64>, f64) = match kind {
        IntegrabilityKind::CosEuclidean { a, r0 } => {
            if !(*a > 0.0 && *r0 > 0.0 && *r0 < FRAC_PI_2 / a) {
                return Err(Error::Domain(format!(
                    "cos_euclidean parameters out of range: a = {a}, r0 = {r0}"
                )));
            }
            let a = *a;
            (
                ScalarField::new(move |x: ArrayView1<f64>| {
                    (a * x.dot(&x).sqrt()).cos()
                }),
                Array1::zeros(n),
                *r0,
            )
        }
        IntegrabilityKind::CosBall {
            beta,
            gamma,
            center,
        } => {
            if !(*gamma > 0.0 && *gamma < 1.0 && *beta > 1.0 && *beta < 1.0 / gamma) {
                return Err(Error::Domain(format!(
                    "cos_ball parameters out of range: beta = {beta}, gamma = {gamma}"
                )));
            }
            let k = m.curvature_bound();
            if k <= 0.0 {
                return Err(Error::Domain(
                    "cos_ball needs a positive curvature bound".into(),
                ));
            }
            let rho = gamma * FRAC_PI_2 / k.sqrt();
            let beta = *beta;
            let o = center.clone();
            let mm = m.clone();
            (
                ScalarField::new(move |x: ArrayView1<f64>| {
                    let dist = mm.distance(o.view(), x).unwrap_or(f64::NAN);
                    (beta * k.sqrt() * dist).cos()
                }),
                center.clone(),
                rho,
            )
        }
    };
    report
        .fitted_constants
        .insert("alpha".into(), alpha);
    for _ in 0..samples {
        // uniform radius inside the working ball, small floor for stencils
        let dir = Array1::from_shape_fn(n, |_| standard_normal(&mut rng));
        let dn = m.riemannian_norm(center.view(), dir.view())?;
        if dn < 1e-9 {
            continue;
        }
        let r: f64 = rng.gen_range(1e-3..radius);
        let x = m.exp_map(center.view(), dir.mapv(|c| c * r / dn).view(), 1.0)?;
        let u = Array1::from_shape_fn(n, |_| standard_normal(&mut rng));
        let hess = field.hessian_quadratic(m, x.view(), u.view())?;
        let phi = field.value(x.view());
        let u2 = m.riemannian_norm(x.view(), u.view())?.powi(2);
        let margin = -(hess + 2.0 * alpha * phi * u2);
        report.record(margin, &[x.to_vec(), u.to_vec()].concat());
    }
    report.pass = report.min_margin >= -1e-6;
    Ok(report)
}

/// Sup-path L2 distance between two solutions sharing grid and noise.
pub fn uniqueness_gap(
    m: &ChartManifold,
    sol: &BsdeSolution,
    sol_prime: &BsdeSolution,
) -> Result<f64> {
    if sol.grid != sol_prime.grid {
        return Err(Error::Domain("solutions live on different grids".into()));
    }
    let paths = sol.path_count();
    let n_steps = sol.grid.len() - 1;
    let mut acc = 0.0;
    for p in 0..paths {
        let mut sup = 0.0f64;
        for i in 0..=n_steps {
            let d = m.distance(
                sol.x.slice(s![p, i, ..]),
                sol_prime.x.slice(s![p, i, ..]),
            )?;
            sup = sup.max(d * d);
        }
        acc += sup;
    }
    Ok((acc / paths as f64).sqrt())
}

/// Pooled drift regression of pre-stop increments on a polynomial basis of
/// the state; a martingale passes when every coefficient is within 3 SE of
/// zero.
#[derive(Debug, Clone)]
pub struct MartingaleDriftReport {
    pub coefficients: Vec<f64>,
    pub standard_errors: Vec<f64>,
    pub pass: bool,
    pub increments_used: usize,
}

/// Outcome of the equatorial two-martingale construction.
#[derive(Debug, Clone)]
pub struct NonuniquenessDemo {
    pub grid: Vec<f64>,
    /// Chart paths (theta, phi) of the two stopped processes, P x (N+1) x 2.
    pub x: ndarray::Array3<f64>,
    pub x_prime: ndarray::Array3<f64>,
    pub stop_index: Vec<usize>,
    /// Paths still unstopped at the horizon (breaks terminal equality).
    pub unstopped: usize,
    /// Pathwise equality of the two terminal values.
    pub terminal_equal: bool,
    /// Largest absolute gap between the two terminal angle values.
    pub max_terminal_gap: f64,
    pub initial_distance: f64,
    pub drift_report: MartingaleDriftReport,
    pub drift_report_prime: MartingaleDriftReport,
}

/// Two antipodally started Brownian motions on the equator of the unit
/// sphere, reflections of each other through the plane {x = 0}, each
/// stopped (and clamped) at that plane. Both are martingales on the sphere
/// with pathwise equal terminal values, yet they start a distance pi apart.
pub fn nonuniqueness_demo(steps: usize, paths: usize, seed: u64) -> Result<NonuniquenessDemo> {
    const HORIZON: f64 = 24.0;
    let grid = uniform_grid(HORIZON, steps);
    let dt = HORIZON / steps as f64;
    let sphere = ChartManifold::sphere(1.0);

    // angle of the first process along the equator, stopped at +-pi/2;
    // the raw copy keeps the overshoot of the stopping step, the clamped
    // copy snaps it onto the plane for the geometric ensembles
    let mut angles = Array2::zeros((paths, steps + 1));
    let mut angles_raw = Array2::zeros((paths, steps + 1));
    let mut stop_index = vec![steps; paths];
    let mut unstopped = 0usize;
    for p in 0..paths {
        let mut rng = path_rng(seed, p);
        let mut phi = 0.0f64;
        let mut phi_raw = 0.0f64;
        let mut stopped_at: Option<usize> = None;
        for i in 0..steps {
            if stopped_at.is_none() {
                let inc = dt.sqrt() * standard_normal(&mut rng);
                phi_raw = phi + inc;
                phi = phi_raw;
                if phi.abs() >= FRAC_PI_2 {
                    phi = FRAC_PI_2.copysign(phi);
                    stopped_at = Some(i + 1);
                }
            }
            angles[[p, i + 1]] = phi;
            angles_raw[[p, i + 1]] = phi_raw;
        }
        match stopped_at {
            Some(i) => stop_index[p] = i,
            None => unstopped += 1,
        }
    }

    let mut x = ndarray::Array3::zeros((paths, steps + 1, 2));
    let mut xp = ndarray::Array3::zeros((paths, steps + 1, 2));
    for p in 0..paths {
        for i in 0..=steps {
            x[[p, i, 0]] = FRAC_PI_2;
            x[[p, i, 1]] = angles[[p, i]];
            xp[[p, i, 0]] = FRAC_PI_2;
            xp[[p, i, 1]] = PI - angles[[p, i]];
        }
    }

    // pathwise terminal equality on the sphere: the reflection fixes the
    // stopping plane, so clamped values name the same point; the embedded
    // gap only carries trigonometric roundoff
    let mut max_gap = 0.0f64;
    for p in 0..paths {
        let a = x[[p, steps, 1]];
        let b = xp[[p, steps, 1]];
        let ga = crate::geometry::sphere::embed(1.0, ndarray::array![FRAC_PI_2, a].view());
        let gb = crate::geometry::sphere::embed(1.0, ndarray::array![FRAC_PI_2, b].view());
        max_gap = max_gap.max((&ga - &gb).mapv(f64::abs).sum());
    }
    let terminal_equal = unstopped == 0 && max_gap <= 1e-12;

    let initial_distance = sphere.distance(
        x.slice(s![0, 0, ..]),
        xp.slice(s![0, 0, ..]),
    )?;

    let drift_report = angle_drift_report(&angles_raw, &stop_index, dt)?;
    // the reflected angle process has increments of opposite sign and the
    // same filtration; test it independently
    let reflected = angles_raw.mapv(|a| PI - a);
    let drift_report_prime = angle_drift_report(&reflected, &stop_index, dt)?;

    Ok(NonuniquenessDemo {
        grid,
        x,
        x_prime: xp,
        stop_index,
        unstopped,
        terminal_equal,
        max_terminal_gap: max_gap,
        initial_distance,
        drift_report,
        drift_report_prime,
    })
}

fn angle_drift_report(
    angles: &Array2<f64>,
    stop_index: &[usize],
    _dt: f64,
) -> Result<MartingaleDriftReport> {
    let paths = angles.nrows();
    let steps = angles.ncols() - 1;
    let mut points = Vec::new();
    let mut incs = Vec::new();
    for p in 0..paths {
        // all increments from states alive at step i, including the raw
        // stopping increment: survival at i is known at i, so the selection
        // is unbiased, whereas censoring the stopping step is not
        for i in 0..steps.min(stop_index[p]) {
            points.push(angles[[p, i]]);
            incs.push(angles[[p, i + 1]] - angles[[p, i]]);
        }
    }
    if incs.len() < 100 {
        return Err(Error::Unreliable(
            "too few pre-stop increments for the drift regression".into(),
        ));
    }
    let pts = Array2::from_shape_vec((points.len(), 1), points)
        .map_err(|e| Error::Numerical(e.to_string()))?;
    let target = Array1::from_vec(incs);
    let (fit, ses) = regress_with_errors(pts.view(), target.view(), 3)?;
    let coefficients: Vec<f64> = fit.coefficients.column(0).to_vec();
    let standard_errors: Vec<f64> = ses.to_vec();
    let pass = coefficients
        .iter()
        .zip(standard_errors.iter())
        .all(|(c, s)| c.abs() <= 3.0 * s);
    Ok(MartingaleDriftReport {
        coefficients,
        standard_errors,
        pass,
        increments_used: target.len(),
    })
}

/// Regularity test for a closed geodesic ball: rho sqrt(K) < pi/2 and the
/// center's cut locus stays clear of the ball.
pub fn regular_ball_check(rho: f64, curvature: f64, cut_locus_ok: bool) -> bool {
    rho > 0.0 && curvature >= 0.0 && rho * curvature.sqrt() < FRAC_PI_2 && cut_locus_ok
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ChartDomain;
    use ndarray::array;

    fn flat2() -> ChartManifold {
        ChartManifold::flat(
            2,
            ChartDomain::Box {
                lower: array![-6.0, -6.0],
                upper: array![6.0, 6.0],
            },
        )
    }

    fn pair(x: Array1<f64>, xp: Array1<f64>, z: Array2<f64>, zp: Array2<f64>) -> PairState {
        PairState {
            b: Array1::zeros(2),
            x,
            x_prime: xp,
            z,
            z_prime: zp,
        }
    }

    #[test]
    fn sum_vanishes_on_diagonal_configurations() {
        let m = flat2();
        let d = DriftSpec::zero(array![0.0, 0.0]);
        let p = SubmartingaleParams {
            lambda: 3.0,
            mu: 2.0,
            gauge: GaugeFunction::emery(0.3),
            e_factor: 1.5,
        };
        let z = array![[0.4, -0.1], [0.2, 0.9]];
        let st = pair(array![0.3, 0.1], array![0.3, 0.1], z.clone(), z);
        let v = submartingale_sum(&p, &m, &d, &st).unwrap();
        assert!(v.abs() < 1e-12, "{v}");
    }

    #[test]
    fn zero_noise_leaves_lambda_psi() {
        let m = flat2();
        let d = DriftSpec::zero(array![0.0, 0.0]);
        let gauge = GaugeFunction::emery(0.3);
        let x = array![0.4, 0.0];
        let xp = array![-0.2, 0.5];
        for lambda in [0.0, 1.0, 2.5] {
            let p = SubmartingaleParams {
                lambda,
                mu: 7.0,
                gauge: gauge.clone(),
                e_factor: 1.5,
            };
            let st = pair(x.clone(), xp.clone(), Array2::zeros((2, 2)), Array2::zeros((2, 2)));
            let v = submartingale_sum(&p, &m, &d, &st).unwrap();
            let psi = gauge.value(&m, x.view(), xp.view()).unwrap();
            assert!((v - lambda * psi).abs() < 1e-12);
        }
    }

    #[test]
    fn lambda_monotonicity_is_linear() {
        let m = flat2();
        let d = DriftSpec::zero(array![0.0, 0.0]);
        let gauge = GaugeFunction::emery(0.3);
        let st = pair(
            array![0.4, 0.2],
            array![-0.1, 0.6],
            array![[0.3, 0.0], [0.1, -0.2]],
            array![[0.0, 0.5], [-0.4, 0.2]],
        );
        let psi = gauge.value(&m, st.x.view(), st.x_prime.view()).unwrap();
        let at = |lambda: f64| {
            submartingale_sum(
                &SubmartingaleParams {
                    lambda,
                    mu: 1.0,
                    gauge: gauge.clone(),
                    e_factor: 1.5,
                },
                &m,
                &d,
                &st,
            )
            .unwrap()
        };
        let delta = at(5.0) - at(2.0);
        assert!((delta - 3.0 * psi).abs() < 1e-10);
    }

    #[test]
    fn integrability_flat_lemma_parameters_pass() {
        // flat chart: C_r = 1, alpha = mu, a = sqrt(2 pi mu), r0 = pi/(4a)
        let m = flat2();
        let mu = 1.0;
        let a = (2.0 * PI * mu).sqrt();
        let kind = IntegrabilityKind::CosEuclidean {
            a,
            r0: PI / (4.0 * a),
        };
        let rep = integrability_gauge_check(&kind, &m, mu, 400, 5).unwrap();
        assert!(rep.pass, "min margin {}", rep.min_margin);
        // overshooting alpha far beyond the lemma value must fail
        let rep2 = integrability_gauge_check(&kind, &m, 8.0 * mu, 400, 5).unwrap();
        assert!(!rep2.pass);
        // out-of-range r0 is rejected
        let bad = IntegrabilityKind::CosEuclidean { a, r0: 2.0 };
        assert!(integrability_gauge_check(&bad, &m, mu, 10, 5).is_err());
    }

    #[test]
    fn integrability_ball_lemma_parameters_pass() {
        let m = ChartManifold::sphere(1.0);
        let kind = IntegrabilityKind::CosBall {
            beta: 1.5,
            gamma: 0.5,
            center: array![FRAC_PI_2, 0.0],
        };
        // display: Hess phi <= -K beta phi |u|^2, i.e. alpha = K beta / 2
        let rep = integrability_gauge_check(&kind, &m, 1.5 / 2.0, 400, 6).unwrap();
        assert!(rep.pass, "min margin {}", rep.min_margin);
        let bad = IntegrabilityKind::CosBall {
            beta: 2.5,
            gamma: 0.5,
            center: array![FRAC_PI_2, 0.0],
        };
        assert!(integrability_gauge_check(&bad, &m, 0.75, 10, 6).is_err());
    }

    #[test]
    fn regular_ball_cases() {
        assert!(regular_ball_check(PI / 4.0, 1.0, true));
        assert!(!regular_ball_check(FRAC_PI_2, 1.0, true));
        assert!(regular_ball_check(123.0, 0.0, true));
        assert!(!regular_ball_check(0.5, 1.0, false));
    }

    #[test]
    fn nonuniqueness_equatorial_construction() {
        let demo = nonuniqueness_demo(4800, 2000, det_seed()).unwrap();
        assert_eq!(demo.unstopped, 0);
        assert!(demo.terminal_equal);
        assert!(demo.max_terminal_gap <= 1e-12);
        assert_eq!(demo.initial_distance, PI);
        assert!(demo.drift_report.pass, "{:?}", demo.drift_report);
        assert!(demo.drift_report_prime.pass);
    }

    fn det_seed() -> u64 {
        9
    }
}
