//! Discrete-time backward solver for the coordinate BSDE
//! dX = Z dW + (-1/2 Gamma_jk(X) ([Z]^k | [Z]^j) + f(B, X, Z)) dt,  X_T = U,
//! by least-squares regression Monte Carlo with an outer Picard loop.
//!
//! Each backward step regresses the next state and its noise correlation on
//! a polynomial basis in the driving diffusion, then solves the implicit
//! state equation pathwise by fixed-point iteration. The z-argument of the
//! driver `f` is frozen at the previous Picard iterate, so the outer loop
//! re-linearizes exactly that dependence; the Christoffel quadratic always
//! uses the freshly regressed Z.

use crate::error::{Error, Result};
use crate::geometry::{ChartManifold, DomainGauge};
use crate::numerics::standard_normal;
use crate::regression::PolyBasis;
use crate::sde::{simulate_diffusion, DiffusionSpec, PathEnsemble};
use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView1, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use std::sync::Arc;

pub type DriverFn =
    Arc<dyn Fn(ArrayView1<f64>, ArrayView1<f64>, ArrayView2<f64>) -> Array1<f64> + Send + Sync>;

/// The driver f with its declared structural constants: the geometric
/// Lipschitz constant, the bound |f(b, x0, 0)|_r <= L2, and the anchor x0.
#[derive(Clone)]
pub struct DriftSpec {
    pub f: DriverFn,
    pub lipschitz: f64,
    pub bound: f64,
    pub anchor: Array1<f64>,
}

impl std::fmt::Debug for DriftSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DriftSpec")
            .field("lipschitz", &self.lipschitz)
            .field("bound", &self.bound)
            .field("anchor", &self.anchor)
            .finish()
    }
}

impl DriftSpec {
    pub fn zero(anchor: Array1<f64>) -> Self {
        DriftSpec {
            f: Arc::new(|_b, x, _z| Array1::zeros(x.len())),
            lipschitz: 0.0,
            bound: 0.0,
            anchor,
        }
    }

    pub fn constant(c: Array1<f64>, anchor: Array1<f64>) -> Self {
        let bound = c.dot(&c).sqrt();
        DriftSpec {
            f: Arc::new(move |_b, _x, _z| c.clone()),
            lipschitz: 0.0,
            bound,
            anchor,
        }
    }

    /// Radial field of Riemannian length `scale`, pointing away from the
    /// gauge center (toward it for negative `scale`).
    pub fn radial(m: &ChartManifold, gauge: &DomainGauge, scale: f64) -> Self {
        let m = m.clone();
        let center = gauge.center.clone();
        let anchor = gauge.center.clone();
        DriftSpec {
            f: Arc::new(move |_b, x, _z| {
                let radial = (|| -> Result<Array1<f64>> {
                    let vel = m.connecting_end_velocity(center.view(), x)?;
                    let n = m.riemannian_norm(x, vel.view())?;
                    if n < 1e-12 {
                        return Ok(Array1::zeros(x.len()));
                    }
                    Ok(vel.mapv(|c| c * scale / n))
                })();
                radial.unwrap_or_else(|_| Array1::zeros(x.len()))
            }),
            lipschitz: scale.abs() * 10.0,
            bound: scale.abs(),
            anchor,
        }
    }

    pub fn custom(f: DriverFn, lipschitz: f64, bound: f64, anchor: Array1<f64>) -> Self {
        DriftSpec {
            f,
            lipschitz,
            bound,
            anchor,
        }
    }
}

/// Terminal value as a map of the driving diffusion's terminal state.
#[derive(Clone)]
pub struct TerminalCondition {
    pub map: Arc<dyn Fn(ArrayView1<f64>) -> Array1<f64> + Send + Sync>,
}

impl TerminalCondition {
    pub fn constant(p: Array1<f64>) -> Self {
        TerminalCondition {
            map: Arc::new(move |_| p.clone()),
        }
    }

    /// F(b) = b, for flat targets driven by the same-dimensional diffusion.
    pub fn identity() -> Self {
        TerminalCondition {
            map: Arc::new(|b| b.to_owned()),
        }
    }

    pub fn custom(map: Arc<dyn Fn(ArrayView1<f64>) -> Array1<f64> + Send + Sync>) -> Self {
        TerminalCondition { map }
    }

    /// Smooth nonconstant map into the geodesic ball: the first n diffusion
    /// coordinates are squashed into a tangent vector of length at most
    /// `fraction * radius` at the center and pushed through the exponential.
    pub fn ball_squash(m: &ChartManifold, gauge: &DomainGauge, fraction: f64) -> Self {
        assert!(fraction > 0.0 && fraction < 1.0);
        let m = m.clone();
        let center = gauge.center.clone();
        let reach = fraction * gauge.radius;
        let n = m.dim();
        TerminalCondition {
            map: Arc::new(move |b: ArrayView1<f64>| {
                let mut u = Array1::zeros(n);
                for i in 0..n.min(b.len()) {
                    u[i] = b[i];
                }
                let norm = u.dot(&u).sqrt();
                let v = if norm < 1e-14 {
                    u
                } else {
                    u.mapv(|c| c * reach * norm.tanh() / norm)
                };
                m.exp_map(center.view(), v.view(), 1.0)
                    .expect("ball terminal map stays in the chart")
            }),
        }
    }
}

/// Initialization of the frozen Z ensemble for the first Picard sweep.
#[derive(Debug, Clone)]
pub enum ZInit {
    Zero,
    Random { seed: u64, scale: f64 },
}

#[derive(Debug, Clone)]
pub struct SolverParams {
    pub picard_max: usize,
    pub picard_tol: f64,
    pub basis_degree: u32,
    pub z_init: ZInit,
    pub implicit_max: usize,
    pub implicit_tol: f64,
    /// A projection fraction above this is recorded as a warning.
    pub projection_warn_fraction: f64,
}

impl Default for SolverParams {
    fn default() -> Self {
        SolverParams {
            picard_max: 30,
            picard_tol: 1e-6,
            basis_degree: 3,
            z_init: ZInit::Zero,
            implicit_max: 20,
            implicit_tol: 1e-10,
            projection_warn_fraction: 0.05,
        }
    }
}

/// Discrete solution ensembles plus convergence metadata.
#[derive(Debug, Clone)]
pub struct BsdeSolution {
    pub grid: Vec<f64>,
    /// P x (N+1) x n regression solution.
    pub x: Array3<f64>,
    /// P x N x n x d_w.
    pub z: Array4<f64>,
    pub b: PathEnsemble,
    pub w: PathEnsemble,
    /// Forward re-simulation of the state from X_0 with the computed Z.
    pub x_forward: Array3<f64>,
    /// Root mean square terminal gap of the forward re-simulation.
    pub forward_residual: f64,
    /// Sup-path L2 distance between consecutive Picard iterates.
    pub picard_residuals: Vec<f64>,
    /// Fraction of backward states pulled back to the gauge level set.
    pub projection_fraction: f64,
    /// Per-path stopping index for random-horizon problems.
    pub stop_index: Option<Vec<usize>>,
    pub warnings: Vec<String>,
}

impl BsdeSolution {
    pub fn path_count(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn state_dim(&self) -> usize {
        self.x.shape()[2]
    }

    pub fn noise_dim(&self) -> usize {
        self.z.shape()[3]
    }
}

/// Coordinate drift of the state equation:
/// -1/2 sum_jk Gamma_jk(x) (z z^T)_jk + f(b, x, z),
/// where (z z^T)_jk is the Euclidean inner product of rows j and k of z.
pub fn md_drift(
    m: &ChartManifold,
    d: &DriftSpec,
    b: ArrayView1<f64>,
    x: ArrayView1<f64>,
    z: ArrayView2<f64>,
) -> Result<Array1<f64>> {
    md_drift_split(m, d, b, x, z, z)
}

/// Same drift with separate z-arguments: `z_gamma` feeds the Christoffel
/// quadratic, `z_f` the driver.
fn md_drift_split(
    m: &ChartManifold,
    d: &DriftSpec,
    b: ArrayView1<f64>,
    x: ArrayView1<f64>,
    z_gamma: ArrayView2<f64>,
    z_f: ArrayView2<f64>,
) -> Result<Array1<f64>> {
    let gamma = m.christoffel_at(x)?;
    let n = m.dim();
    let gram = z_gamma.dot(&z_gamma.t());
    let mut out = (d.f)(b, x, z_f);
    for c in 0..n {
        let mut s = 0.0;
        for j in 0..n {
            for k in 0..n {
                s += gamma[[c, j, k]] * gram[[j, k]];
            }
        }
        out[c] -= 0.5 * s;
    }
    Ok(out)
}

/// Solve the BSDE with terminal value F(B_T) on the full grid.
#[allow(clippy::too_many_arguments)]
pub fn solve_bsde(
    m: &ChartManifold,
    drift: &DriftSpec,
    terminal: &TerminalCondition,
    diffusion: &DiffusionSpec,
    grid: &[f64],
    paths: usize,
    seed: u64,
    domain: Option<&DomainGauge>,
    params: &SolverParams,
) -> Result<BsdeSolution> {
    let (b_ens, w_ens) = simulate_diffusion(diffusion, grid, paths, seed)?;
    let n_steps = grid.len() - 1;
    let n = m.dim();
    let mut terminal_values = Array2::zeros((paths, n));
    for p in 0..paths {
        let u = (terminal.map)(b_ens.paths.slice(s![p, n_steps, ..]));
        if u.len() != n {
            return Err(Error::Domain(
                "terminal map dimension does not match the chart".into(),
            ));
        }
        terminal_values.row_mut(p).assign(&u);
    }
    if let Some(g) = domain {
        for p in 0..paths {
            if !g.contains(m, terminal_values.row(p), 1e-9)? {
                return Err(Error::Domain(format!(
                    "terminal value on path {p} lies outside the gauge sublevel set"
                )));
            }
        }
    }
    solve_bsde_with_ensembles(m, drift, b_ens, w_ens, terminal_values, None, domain, params)
}

/// Backward solve on externally prepared ensembles, optionally with a
/// per-path stopping index: paths are frozen from their index on and carry
/// zero Z there.
#[allow(clippy::too_many_arguments)]
pub fn solve_bsde_with_ensembles(
    m: &ChartManifold,
    drift: &DriftSpec,
    b_ens: PathEnsemble,
    w_ens: PathEnsemble,
    terminal_values: Array2<f64>,
    stop_index: Option<Vec<usize>>,
    domain: Option<&DomainGauge>,
    params: &SolverParams,
) -> Result<BsdeSolution> {
    let grid = b_ens.grid.clone();
    let n_steps = grid.len() - 1;
    let paths = b_ens.path_count();
    let n = terminal_values.ncols();
    let dw = w_ens.increments.shape()[2];
    if let Some(si) = &stop_index {
        if si.len() != paths {
            return Err(Error::Domain("stop index length mismatch".into()));
        }
    }

    let mut z_frozen = match &params.z_init {
        ZInit::Zero => Array4::zeros((paths, n_steps, n, dw)),
        ZInit::Random { seed, scale } => {
            let mut rng = ChaCha12Rng::seed_from_u64(*seed);
            Array4::from_shape_fn((paths, n_steps, n, dw), |_| {
                scale * standard_normal(&mut rng)
            })
        }
    };

    let mut warnings = Vec::new();
    let mut picard_residuals = Vec::new();
    let mut x_prev: Option<Array3<f64>> = None;
    let mut x = Array3::zeros((paths, n_steps + 1, n));
    let mut z = Array4::zeros((paths, n_steps, n, dw));
    let mut projections = 0usize;

    for iteration in 0..params.picard_max.max(1) {
        let sweep = backward_sweep(
            m,
            drift,
            &b_ens,
            &w_ens,
            &terminal_values,
            stop_index.as_deref(),
            &z_frozen,
            domain,
            params,
        )?;
        x = sweep.x;
        z = sweep.z;
        projections = sweep.projections;
        if let Some(prev) = &x_prev {
            let mut acc = 0.0;
            for p in 0..paths {
                let mut sup = 0.0f64;
                for i in 0..=n_steps {
                    let d = m.distance(x.slice(s![p, i, ..]), prev.slice(s![p, i, ..]))?;
                    sup = sup.max(d * d);
                }
                acc += sup;
            }
            let resid = (acc / paths as f64).sqrt();
            picard_residuals.push(resid);
            if resid < params.picard_tol {
                break;
            }
        }
        if iteration + 1 == params.picard_max.max(1) && params.picard_max > 1 {
            if let Some(last) = picard_residuals.last() {
                if *last >= params.picard_tol {
                    return Err(Error::Convergence(format!(
                        "Picard loop exhausted {} iterations; residual trace {:?}",
                        params.picard_max, picard_residuals
                    )));
                }
            }
        }
        x_prev = Some(x.clone());
        z_frozen = z.clone();
    }

    let projection_fraction = projections as f64 / (paths * n_steps) as f64;
    if projection_fraction > params.projection_warn_fraction {
        warnings.push(format!(
            "domain escape: {:.2}% of backward states were projected to the gauge level set",
            100.0 * projection_fraction
        ));
    }

    let (x_forward, forward_residual) = forward_resimulate(
        m,
        drift,
        &b_ens,
        &w_ens,
        &x,
        &z,
        stop_index.as_deref(),
        domain,
    );

    Ok(BsdeSolution {
        grid,
        x,
        z,
        b: b_ens,
        w: w_ens,
        x_forward,
        forward_residual,
        picard_residuals,
        projection_fraction,
        stop_index,
        warnings,
    })
}

struct SweepOut {
    x: Array3<f64>,
    z: Array4<f64>,
    projections: usize,
}

#[allow(clippy::too_many_arguments)]
fn backward_sweep(
    m: &ChartManifold,
    drift: &DriftSpec,
    b_ens: &PathEnsemble,
    w_ens: &PathEnsemble,
    terminal_values: &Array2<f64>,
    stop_index: Option<&[usize]>,
    z_frozen: &Array4<f64>,
    domain: Option<&DomainGauge>,
    params: &SolverParams,
) -> Result<SweepOut> {
    let grid = &b_ens.grid;
    let n_steps = grid.len() - 1;
    let paths = b_ens.path_count();
    let n = terminal_values.ncols();
    let dw = w_ens.increments.shape()[2];

    let mut x = Array3::zeros((paths, n_steps + 1, n));
    let mut z = Array4::zeros((paths, n_steps, n, dw));
    for p in 0..paths {
        x.slice_mut(s![p, n_steps, ..])
            .assign(&terminal_values.row(p));
    }
    let mut projections = 0usize;

    for i in (0..n_steps).rev() {
        let dt = grid[i + 1] - grid[i];
        let active: Vec<usize> = (0..paths)
            .filter(|p| stop_index.map_or(true, |si| si[*p] > i))
            .collect();
        // frozen paths copy their value backward and carry zero Z
        for p in 0..paths {
            if stop_index.map_or(false, |si| si[p] <= i) {
                let next = x.slice(s![p, i + 1, ..]).to_owned();
                x.slice_mut(s![p, i, ..]).assign(&next);
            }
        }
        if active.is_empty() {
            continue;
        }

        let d_dim = b_ens.dim();
        let mut points = Array2::zeros((active.len(), d_dim));
        let mut next_states = Array2::zeros((active.len(), n));
        for (row, &p) in active.iter().enumerate() {
            points
                .row_mut(row)
                .assign(&b_ens.paths.slice(s![p, i, ..]));
            next_states
                .row_mut(row)
                .assign(&x.slice(s![p, i + 1, ..]));
        }
        let basis = PolyBasis::fit(points.view(), params.basis_degree)?;
        let cond_fit =
            crate::regression::regress_with_basis(basis.clone(), points.view(), next_states.view())?;

        // martingale-increment regression on centered residuals:
        // E[(X_{i+1} - m(B_i)) dW_k | B_i] / dt
        let mut z_targets = Array2::zeros((active.len(), n * dw));
        for (row, &p) in active.iter().enumerate() {
            for j in 0..n {
                let resid = next_states[[row, j]] - cond_fit.fitted[[row, j]];
                for k in 0..dw {
                    z_targets[[row, j * dw + k]] =
                        resid * w_ens.increments[[p, i, k]] / dt;
                }
            }
        }
        let z_fit =
            crate::regression::regress_with_basis(basis, points.view(), z_targets.view())?;

        for (row, &p) in active.iter().enumerate() {
            let mut z_i = Array2::zeros((n, dw));
            for j in 0..n {
                for k in 0..dw {
                    z_i[[j, k]] = z_fit.fitted[[row, j * dw + k]];
                }
            }
            let cond = cond_fit.fitted.row(row).to_owned();
            let b_i = b_ens.paths.slice(s![p, i, ..]);
            let zf = z_frozen.slice(s![p, i, .., ..]);

            // implicit step in X by fixed-point iteration
            let mut state = cond.clone();
            if let Some(g) = domain {
                if !g.contains(m, state.view(), 0.0)? {
                    state = g.project(m, state.view())?;
                }
            }
            for _ in 0..params.implicit_max {
                let dr = md_drift_split(m, drift, b_i, state.view(), z_i.view(), zf)?;
                let mut cand = &cond - &dr.mapv(|c| c * dt);
                if let Some(g) = domain {
                    if !g.contains(m, cand.view(), 0.0)? {
                        cand = g.project(m, cand.view())?;
                    }
                }
                let change = (&cand - &state).mapv(f64::abs).sum();
                state = cand;
                if change < params.implicit_tol {
                    break;
                }
            }
            if let Some(g) = domain {
                if !g.contains(m, state.view(), 1e-12)? {
                    state = g.project(m, state.view())?;
                }
                // count states whose unprojected update left the set
                let dr = md_drift_split(m, drift, b_i, state.view(), z_i.view(), zf)?;
                let raw = &cond - &dr.mapv(|c| c * dt);
                if !g.contains(m, raw.view(), 1e-12)? {
                    projections += 1;
                }
            }
            x.slice_mut(s![p, i, ..]).assign(&state);
            z.slice_mut(s![p, i, .., ..]).assign(&z_i);
        }
    }
    Ok(SweepOut { x, z, projections })
}

/// Forward Euler re-simulation in the chart from X_0 using the computed Z;
/// the terminal gap measures internal consistency of the regression
/// solution. Paths whose re-simulation leaves the chart are frozen there.
#[allow(clippy::too_many_arguments)]
fn forward_resimulate(
    m: &ChartManifold,
    drift: &DriftSpec,
    b_ens: &PathEnsemble,
    w_ens: &PathEnsemble,
    x: &Array3<f64>,
    z: &Array4<f64>,
    stop_index: Option<&[usize]>,
    domain: Option<&DomainGauge>,
) -> (Array3<f64>, f64) {
    let grid = &b_ens.grid;
    let n_steps = grid.len() - 1;
    let paths = x.shape()[0];
    let n = x.shape()[2];
    let mut fwd = Array3::zeros((paths, n_steps + 1, n));
    let mut sq_gap = 0.0;
    for p in 0..paths {
        let mut state = x.slice(s![p, 0, ..]).to_owned();
        fwd.slice_mut(s![p, 0, ..]).assign(&state);
        let mut stuck = false;
        for i in 0..n_steps {
            let frozen = stop_index.map_or(false, |si| si[p] <= i);
            if !frozen && !stuck {
                let dt = grid[i + 1] - grid[i];
                let z_i = z.slice(s![p, i, .., ..]);
                match md_drift(m, drift, b_ens.paths.slice(s![p, i, ..]), state.view(), z_i) {
                    Ok(dr) => {
                        let dwi = w_ens.increments.slice(s![p, i, ..]);
                        let mut next = &state + &dr.mapv(|c| c * dt) + &z_i.dot(&dwi);
                        if let Some(g) = domain {
                            if let Ok(false) = g.contains(m, next.view(), 1e-9) {
                                if let Ok(proj) = g.project(m, next.view()) {
                                    next = proj;
                                }
                            }
                        }
                        if m.contains(next.view()) {
                            state = next;
                        } else {
                            stuck = true;
                        }
                    }
                    Err(_) => stuck = true,
                }
            }
            fwd.slice_mut(s![p, i + 1, ..]).assign(&state);
        }
        let gap = (&fwd.slice(s![p, n_steps, ..]).to_owned()
            - &x.slice(s![p, n_steps, ..]).to_owned())
            .mapv(|c| c * c)
            .sum();
        sq_gap += gap;
    }
    (fwd, (sq_gap / paths as f64).sqrt())
}

/// Report of the pointing-outward boundary check.
#[derive(Debug, Clone)]
pub struct OutwardReport {
    pub samples: usize,
    pub inf_pairing: f64,
    pub passes_weak: bool,
    /// Fitted strict margin zeta when the infimum is positive.
    pub zeta: Option<f64>,
    pub passes_strict: bool,
    pub worst_point: Option<Vec<f64>>,
}

/// Sample boundary configurations of {chi = level} and report the infimum
/// of (D chi(x) | f(b, x, z))_r over them.
pub fn check_pointing_outward(
    d: &DriftSpec,
    gauge: &DomainGauge,
    m: &ChartManifold,
    samples: usize,
    aux_dim: usize,
    noise_cols: usize,
    seed: u64,
) -> Result<OutwardReport> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let n = m.dim();
    let mut inf = f64::INFINITY;
    let mut worst = None;
    for _ in 0..samples {
        let dir = Array1::from_shape_fn(n, |_| standard_normal(&mut rng));
        if dir.dot(&dir).sqrt() < 1e-9 {
            continue;
        }
        let x = gauge.boundary_point(m, dir.view())?;
        let b = Array1::from_shape_fn(aux_dim, |_| standard_normal(&mut rng));
        let z = Array2::from_shape_fn((n, noise_cols), |_| standard_normal(&mut rng));
        let grad = gauge.grad_chi(m, x.view())?;
        let fval = (d.f)(b.view(), x.view(), z.view());
        // differential of chi applied to the tangent vector f: this is the
        // Riemannian pairing (D chi | f)_r
        let pairing = grad.dot(&fval);
        if pairing < inf {
            inf = pairing;
            worst = Some(x.to_vec());
        }
    }
    let passes_weak = inf >= -1e-9;
    let zeta = if inf > 0.0 { Some(inf) } else { None };
    Ok(OutwardReport {
        samples,
        inf_pairing: inf,
        passes_weak,
        zeta,
        passes_strict: zeta.is_some(),
        worst_point: worst,
    })
}

/// Empirical audit of the declared structural constants of a drift.
#[derive(Debug, Clone)]
pub struct DriftAudit {
    pub samples: usize,
    pub max_lipschitz_ratio: f64,
    pub declared_lipschitz: f64,
    pub lipschitz_ok: bool,
    pub max_anchor_bound: f64,
    pub declared_bound: f64,
    pub bound_ok: bool,
}

/// Sample (b, x, z, b', x', z') configurations and compare the empirical
/// geometric Lipschitz ratio and anchor bound against the declared L, L2.
pub fn drift_spec_audit(
    d: &DriftSpec,
    m: &ChartManifold,
    region: &crate::geometry::ChartDomain,
    samples: usize,
    aux_dim: usize,
    noise_cols: usize,
    seed: u64,
) -> Result<DriftAudit> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let n = m.dim();
    let mut max_ratio: f64 = 0.0;
    let mut max_anchor: f64 = 0.0;
    let mut drawn = 0usize;
    while drawn < samples {
        let x = region.sample(&mut rng);
        let xp = region.sample(&mut rng);
        if !m.contains(x.view()) || !m.contains(xp.view()) {
            continue;
        }
        drawn += 1;
        let b = Array1::from_shape_fn(aux_dim, |_| standard_normal(&mut rng));
        let bp = Array1::from_shape_fn(aux_dim, |_| standard_normal(&mut rng));
        let z = Array2::from_shape_fn((n, noise_cols), |_| standard_normal(&mut rng));
        let zp = Array2::from_shape_fn((n, noise_cols), |_| standard_normal(&mut rng));
        let f0 = (d.f)(b.view(), x.view(), z.view());
        let f1 = (d.f)(bp.view(), xp.view(), zp.view());
        let tf0 = m.parallel_transport(x.view(), xp.view(), f0.view())?;
        let num = m.riemannian_norm(xp.view(), (&tf0 - &f1).view())?;
        let delta = m.distance(x.view(), xp.view())?;
        let bdiff = (&b - &bp).mapv(|c| c * c).sum().sqrt();
        let zn = m.frame_norm(x.view(), z.view())?;
        let zpn = m.frame_norm(xp.view(), zp.view())?;
        let tz = m.parallel_transport_frame(x.view(), xp.view(), z.view())?;
        let zdiff = m.frame_norm(xp.view(), (&tz - &zp).view())?;
        let den = (bdiff + delta) * (1.0 + zn + zpn) + zdiff;
        if den > 1e-10 {
            max_ratio = max_ratio.max(num / den);
        }
        let f_anchor = (d.f)(b.view(), d.anchor.view(), Array2::zeros((n, noise_cols)).view());
        max_anchor = max_anchor.max(m.riemannian_norm(d.anchor.view(), f_anchor.view())?);
    }
    Ok(DriftAudit {
        samples,
        max_lipschitz_ratio: max_ratio,
        declared_lipschitz: d.lipschitz,
        lipschitz_ok: max_ratio <= d.lipschitz + 1e-9,
        max_anchor_bound: max_anchor,
        declared_bound: d.bound,
        bound_ok: max_anchor <= d.bound + 1e-9,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ChartDomain;
    use crate::numerics::mean_and_se;
    use crate::sde::uniform_grid;
    use ndarray::array;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};

    fn flat_chart(dim: usize, half_width: f64) -> ChartManifold {
        ChartManifold::flat(
            dim,
            ChartDomain::Box {
                lower: Array1::from_elem(dim, -half_width),
                upper: Array1::from_elem(dim, half_width),
            },
        )
    }

    #[test]
    fn md_drift_reduces_to_f_on_flat_charts() {
        let m = flat_chart(2, 5.0);
        let c = array![0.7, -0.2];
        let d = DriftSpec::constant(c.clone(), array![0.0, 0.0]);
        let z = array![[0.3, -1.0], [2.0, 0.4]];
        let out = md_drift(&m, &d, array![0.0].view(), array![0.1, 0.2].view(), z.view()).unwrap();
        assert!((&out - &c).mapv(f64::abs).sum() < 1e-15);
    }

    #[test]
    fn md_drift_sphere_values() {
        let m = ChartManifold::sphere(1.0);
        let d = DriftSpec::zero(array![FRAC_PI_2, 0.0]);
        let z = array![[0.9], [-1.3]];
        // equator: all symbols vanish
        let eq = md_drift(&m, &d, array![0.0].view(), array![FRAC_PI_2, 0.3].view(), z.view())
            .unwrap();
        assert!(eq.mapv(f64::abs).sum() < 1e-15);
        // theta = pi/4, single column (0, 1): theta-component 1/4
        let z2 = array![[0.0], [1.0]];
        let out = md_drift(&m, &d, array![0.0].view(), array![FRAC_PI_4, 0.0].view(), z2.view())
            .unwrap();
        assert!((out[0] - 0.25).abs() < 1e-15, "{out:?}");
        assert!(out[1].abs() < 1e-15);
    }

    fn solve_flat_1d(
        drift: DriftSpec,
        terminal: TerminalCondition,
        paths: usize,
        steps: usize,
        seed: u64,
    ) -> BsdeSolution {
        let m = flat_chart(1, 50.0);
        let spec = DiffusionSpec::brownian(1, array![0.0]);
        let grid = uniform_grid(1.0, steps);
        solve_bsde(
            &m,
            &drift,
            &terminal,
            &spec,
            &grid,
            paths,
            seed,
            None,
            &SolverParams::default(),
        )
        .unwrap()
    }

    #[test]
    fn constant_terminal_is_reproduced_exactly() {
        let m = ChartManifold::sphere(1.0);
        let p = array![1.3, 0.4];
        let spec = DiffusionSpec::brownian(2, array![0.0, 0.0]);
        let grid = uniform_grid(1.0, 10);
        let sol = solve_bsde(
            &m,
            &DriftSpec::zero(p.clone()),
            &TerminalCondition::constant(p.clone()),
            &spec,
            &grid,
            200,
            3,
            None,
            &SolverParams::default(),
        )
        .unwrap();
        for pth in 0..200 {
            for i in 0..=10 {
                assert!((sol.x[[pth, i, 0]] - p[0]).abs() < 1e-12);
                assert!((sol.x[[pth, i, 1]] - p[1]).abs() < 1e-12);
            }
        }
        assert!(sol.z.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn terminal_consistency_is_exact() {
        let sol = solve_flat_1d(
            DriftSpec::zero(array![0.0]),
            TerminalCondition::identity(),
            500,
            20,
            11,
        );
        let n = 20;
        for p in 0..500 {
            assert_eq!(sol.x[[p, n, 0]], sol.b.paths[[p, n, 0]]);
        }
    }

    #[test]
    fn martingale_representation_of_brownian_motion() {
        // f = 0, F(b) = b with B = W: X_t = W_t, Z = 1
        let paths = 10_000;
        let sol = solve_flat_1d(
            DriftSpec::zero(array![0.0]),
            TerminalCondition::identity(),
            paths,
            50,
            21,
        );
        // X_0 estimates E[W_1] = 0 within 3 SE
        let x0 = sol.x[[0, 0, 0]];
        let se0 = 1.0 / (paths as f64).sqrt();
        assert!(x0.abs() < 3.0 * se0, "X_0 = {x0}");
        // pathwise agreement at a few interior times; the mean error equals
        // the sample mean of the unexplored increments, whose standard
        // error is sqrt((T - t) / P)
        for &i in &[10usize, 25, 40] {
            let errs: Vec<f64> = (0..paths)
                .map(|p| sol.x[[p, i, 0]] - sol.w.paths[[p, i, 0]])
                .collect();
            let mean = errs.iter().sum::<f64>() / paths as f64;
            let se = ((1.0 - sol.grid[i]) / paths as f64).sqrt();
            assert!(mean.abs() < 3.0 * se, "step {i}: mean {mean}, se {se}");
            let rms = (errs.iter().map(|e| e * e).sum::<f64>() / paths as f64).sqrt();
            assert!(rms < 0.05, "step {i}: rms {rms}");
        }
        // Z hovers around 1
        let zs: Vec<f64> = (0..paths).map(|p| sol.z[[p, 25, 0, 0]]).collect();
        let (zmean, zse) = mean_and_se(&zs);
        assert!((zmean - 1.0).abs() < 3.0 * zse.max(1e-3), "Z mean {zmean}");
        // forward re-simulation is consistent
        assert!(sol.forward_residual < 0.05, "{}", sol.forward_residual);
    }

    #[test]
    fn constant_driver_closed_form() {
        // f = c: X_t = W_t - c (T - t)
        let c = 0.8;
        let paths = 10_000;
        let sol = solve_flat_1d(
            DriftSpec::constant(array![c], array![0.0]),
            TerminalCondition::identity(),
            paths,
            50,
            31,
        );
        for &i in &[0usize, 20, 45] {
            let t = sol.grid[i];
            let errs: Vec<f64> = (0..paths)
                .map(|p| sol.x[[p, i, 0]] - (sol.w.paths[[p, i, 0]] - c * (1.0 - t)))
                .collect();
            let mean = errs.iter().sum::<f64>() / paths as f64;
            let se = ((1.0 - t) / paths as f64).sqrt();
            assert!(mean.abs() < 3.0 * se, "step {i}: mean {mean}, se {se}");
        }
    }

    #[test]
    fn two_initializations_agree_for_z_independent_drivers() {
        let mut params = SolverParams::default();
        let m = flat_chart(1, 50.0);
        let spec = DiffusionSpec::brownian(1, array![0.0]);
        let grid = uniform_grid(1.0, 25);
        let solve = |params: &SolverParams| {
            solve_bsde(
                &m,
                &DriftSpec::zero(array![0.0]),
                &TerminalCondition::identity(),
                &spec,
                &grid,
                2_000,
                5,
                None,
                params,
            )
            .unwrap()
        };
        let a = solve(&params);
        params.z_init = ZInit::Random {
            seed: 99,
            scale: 1.0,
        };
        let b = solve(&params);
        let gap = (&a.x - &b.x).mapv(f64::abs).sum();
        assert_eq!(gap, 0.0, "z-independent driver must ignore the init");
    }

    #[test]
    fn pointing_outward_choices() {
        let m = ChartManifold::sphere(1.0);
        let ball = DomainGauge::geodesic_ball(array![FRAC_PI_2, 0.0], 0.6);
        let outward = DriftSpec::radial(&m, &ball, 0.5);
        let rep = check_pointing_outward(&outward, &ball, &m, 100, 2, 2, 7).unwrap();
        assert!(rep.passes_weak && rep.passes_strict);
        assert!(rep.zeta.unwrap() > 0.0);
        let inward = DriftSpec::radial(&m, &ball, -0.5);
        let rep2 = check_pointing_outward(&inward, &ball, &m, 100, 2, 2, 7).unwrap();
        assert!(!rep2.passes_weak && !rep2.passes_strict);
        let zero = DriftSpec::zero(array![FRAC_PI_2, 0.0]);
        let rep3 = check_pointing_outward(&zero, &ball, &m, 100, 2, 2, 7).unwrap();
        assert!(rep3.passes_weak && !rep3.passes_strict);
        assert!(rep3.inf_pairing.abs() < 1e-12);
    }

    #[test]
    fn drift_audit_flat_cases() {
        let m = flat_chart(2, 3.0);
        let region = ChartDomain::unit_box(2);
        // constant field: ratio 0
        let c = DriftSpec::constant(array![0.4, 0.1], array![0.0, 0.0]);
        let audit = drift_spec_audit(&c, &m, &region, 200, 2, 2, 17).unwrap();
        assert!(audit.max_lipschitz_ratio < 1e-12);
        assert!(audit.lipschitz_ok && audit.bound_ok);
        // f(b, x, z) = x: ratio <= 1 and approaches it
        let idf = DriftSpec::custom(
            Arc::new(|_b, x, _z| x.to_owned()),
            1.0,
            0.0,
            array![0.0, 0.0],
        );
        let audit2 = drift_spec_audit(&idf, &m, &region, 500, 2, 2, 17).unwrap();
        assert!(audit2.max_lipschitz_ratio <= 1.0 + 1e-9);
        assert!(audit2.lipschitz_ok && audit2.bound_ok);
        // declared constant too small: flagged
        let lying = DriftSpec::custom(
            Arc::new(|_b, x, _z| x.to_owned()),
            0.05,
            0.0,
            array![0.0, 0.0],
        );
        let audit3 = drift_spec_audit(&lying, &m, &region, 500, 2, 2, 17).unwrap();
        assert!(!audit3.lipschitz_ok);
    }

    #[test]
    fn ball_confinement_and_projection_fraction() {
        // constant driver pushes the backward state toward the boundary, so
        // escapes come from the O(dt) drift overshoot and thin out under
        // grid refinement
        let m = ChartManifold::sphere(1.0);
        let ball = DomainGauge::geodesic_ball(array![FRAC_PI_2, 0.0], FRAC_PI_4);
        let terminal = TerminalCondition::ball_squash(&m, &ball, 0.9);
        let spec = DiffusionSpec::brownian(2, array![0.0, 0.0]);
        let drift = DriftSpec::constant(array![-0.6, 0.0], ball.center.clone());
        let run = |steps: usize| {
            let grid = uniform_grid(1.0, steps);
            solve_bsde(
                &m,
                &drift,
                &terminal,
                &spec,
                &grid,
                4_000,
                13,
                Some(&ball),
                &SolverParams::default(),
            )
            .unwrap()
        };
        let coarse = run(25);
        let fine = run(100);
        for sol in [&coarse, &fine] {
            for p in 0..sol.path_count() {
                for i in 0..sol.grid.len() {
                    let chi = ball
                        .chi_value(&m, sol.x.slice(s![p, i, ..]))
                        .unwrap();
                    assert!(chi <= ball.level + 1e-9);
                }
            }
        }
        assert!(coarse.projection_fraction > 0.0, "coarse run never projected");
        assert!(
            fine.projection_fraction <= coarse.projection_fraction + 1e-12,
            "projection fraction grew under refinement: {} vs {}",
            coarse.projection_fraction,
            fine.projection_fraction
        );
    }
}
