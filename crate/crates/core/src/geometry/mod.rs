//! Chart-based differential geometry: metric, Christoffel symbols,
//! geodesics, parallel transport, Riemannian distance and norms.
//!
//! All computations happen in a single local chart. Built-in charts are the
//! flat chart on a box and the round sphere in spherical coordinates
//! (truncated away from the poles); arbitrary charts are supported through a
//! user-supplied metric field, from which Christoffel symbols are derived by
//! central finite differences.

pub mod sphere;

use crate::error::{Error, Result};
use crate::numerics::central_d1_2nd;
use crate::report::EstimateReport;
use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2};
use rand::Rng;
use std::f64::consts::PI;
use std::sync::Arc;

/// Metric field of a custom chart: point -> symmetric positive definite
/// matrix. Must be evaluable on a small enlargement of the chart domain so
/// finite-difference stencils at the boundary stay defined.
pub type MetricFn = Arc<dyn Fn(ArrayView1<f64>) -> Array2<f64> + Send + Sync>;

/// Region of coordinate space on which a chart is defined.
#[derive(Debug, Clone)]
pub enum ChartDomain {
    Box {
        lower: Array1<f64>,
        upper: Array1<f64>,
    },
    Ball {
        center: Array1<f64>,
        radius: f64,
    },
}

impl ChartDomain {
    pub fn unit_box(dim: usize) -> Self {
        ChartDomain::Box {
            lower: Array1::from_elem(dim, -1.0),
            upper: Array1::from_elem(dim, 1.0),
        }
    }

    pub fn contains(&self, x: ArrayView1<f64>) -> bool {
        match self {
            ChartDomain::Box { lower, upper } => x
                .iter()
                .zip(lower.iter().zip(upper.iter()))
                .all(|(xi, (lo, hi))| *xi >= *lo && *xi <= *hi),
            ChartDomain::Ball { center, radius } => {
                let d2: f64 = x
                    .iter()
                    .zip(center.iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                d2 <= radius * radius
            }
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ChartDomain::Box { lower, .. } => lower.len(),
            ChartDomain::Ball { center, .. } => center.len(),
        }
    }

    /// Uniform sample (rejection sampling inside balls).
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Array1<f64> {
        match self {
            ChartDomain::Box { lower, upper } => Array1::from_iter(
                lower
                    .iter()
                    .zip(upper.iter())
                    .map(|(lo, hi)| rng.gen_range(*lo..*hi)),
            ),
            ChartDomain::Ball { center, radius } => loop {
                let v: Array1<f64> =
                    Array1::from_iter((0..center.len()).map(|_| rng.gen_range(-1.0..1.0)));
                if v.dot(&v) <= 1.0 {
                    return center + &v.mapv(|t| t * radius);
                }
            },
        }
    }
}

/// Which closed forms a chart carries.
#[derive(Debug, Clone, PartialEq)]
pub enum ChartKind {
    Flat,
    Sphere { radius: f64 },
    Custom,
}

/// A chart with its metric field, Christoffel field and curvature data.
/// Immutable after construction; all operations are pure.
#[derive(Clone)]
pub struct ChartManifold {
    dim: usize,
    kind: ChartKind,
    domain: ChartDomain,
    metric: Option<MetricFn>,
    /// Step for central differences of the metric (custom charts).
    fd_step: f64,
    /// Smallest nonnegative bound on the sectional curvatures (0 if all
    /// nonpositive).
    curvature_bound: f64,
    /// Known for the built-in charts, unset for custom ones.
    injectivity_radius: Option<f64>,
}

impl std::fmt::Debug for ChartManifold {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ChartManifold")
            .field("dim", &self.dim)
            .field("kind", &self.kind)
            .field("curvature_bound", &self.curvature_bound)
            .finish()
    }
}

/// Polar-angle margin kept around the sphere poles.
pub const SPHERE_THETA_MIN: f64 = 0.1;

impl ChartManifold {
    pub fn flat(dim: usize, domain: ChartDomain) -> Self {
        assert_eq!(domain.dim(), dim);
        ChartManifold {
            dim,
            kind: ChartKind::Flat,
            domain,
            metric: None,
            fd_step: 1e-5,
            curvature_bound: 0.0,
            injectivity_radius: Some(f64::INFINITY),
        }
    }

    /// Round sphere of the given radius in (theta, phi) coordinates, with
    /// theta restricted to [SPHERE_THETA_MIN, pi - SPHERE_THETA_MIN].
    pub fn sphere(radius: f64) -> Self {
        assert!(radius > 0.0);
        let domain = ChartDomain::Box {
            lower: Array1::from_vec(vec![SPHERE_THETA_MIN, -2.0 * PI]),
            upper: Array1::from_vec(vec![PI - SPHERE_THETA_MIN, 2.0 * PI]),
        };
        ChartManifold {
            dim: 2,
            kind: ChartKind::Sphere { radius },
            domain,
            metric: None,
            fd_step: 1e-5,
            curvature_bound: 1.0 / (radius * radius),
            injectivity_radius: Some(PI * radius),
        }
    }

    /// Chart with a user-supplied metric field. Christoffel symbols are
    /// derived from the metric by central differences.
    pub fn custom(
        dim: usize,
        domain: ChartDomain,
        metric: MetricFn,
        curvature_bound: f64,
    ) -> Self {
        assert_eq!(domain.dim(), dim);
        assert!(curvature_bound >= 0.0);
        ChartManifold {
            dim,
            kind: ChartKind::Custom,
            domain,
            metric: Some(metric),
            fd_step: 1e-5,
            curvature_bound,
            injectivity_radius: None,
        }
    }

    pub fn with_fd_step(mut self, step: f64) -> Self {
        assert!(step > 0.0);
        self.fd_step = step;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> &ChartKind {
        &self.kind
    }

    pub fn domain(&self) -> &ChartDomain {
        &self.domain
    }

    pub fn curvature_bound(&self) -> f64 {
        self.curvature_bound
    }

    pub fn injectivity_radius(&self) -> Option<f64> {
        self.injectivity_radius
    }

    pub fn contains(&self, x: ArrayView1<f64>) -> bool {
        self.domain.contains(x)
    }

    fn check_point(&self, x: ArrayView1<f64>) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::Domain(format!(
                "point has dimension {}, chart has dimension {}",
                x.len(),
                self.dim
            )));
        }
        if !self.contains(x) {
            return Err(Error::Domain(format!("point {:?} outside chart domain", x)));
        }
        Ok(())
    }

    /// Metric matrix g(x). Built-in charts use closed forms.
    pub fn metric_at(&self, x: ArrayView1<f64>) -> Result<Array2<f64>> {
        self.check_point(x)?;
        Ok(self.metric_unchecked(x))
    }

    fn metric_unchecked(&self, x: ArrayView1<f64>) -> Array2<f64> {
        match &self.kind {
            ChartKind::Flat => Array2::eye(self.dim),
            ChartKind::Sphere { radius } => {
                let r2 = radius * radius;
                let st = x[0].sin();
                let mut g = Array2::zeros((2, 2));
                g[[0, 0]] = r2;
                g[[1, 1]] = r2 * st * st;
                g
            }
            ChartKind::Custom => (self.metric.as_ref().unwrap())(x),
        }
    }

    fn metric_inverse_unchecked(&self, x: ArrayView1<f64>) -> Result<Array2<f64>> {
        match &self.kind {
            ChartKind::Flat => Ok(Array2::eye(self.dim)),
            ChartKind::Sphere { radius } => {
                let r2 = radius * radius;
                let st = x[0].sin();
                let mut g = Array2::zeros((2, 2));
                g[[0, 0]] = 1.0 / r2;
                g[[1, 1]] = 1.0 / (r2 * st * st);
                Ok(g)
            }
            ChartKind::Custom => {
                let g = self.metric_unchecked(x);
                let n = self.dim;
                let gm = nalgebra::DMatrix::from_fn(n, n, |i, j| g[[i, j]]);
                match gm.try_inverse() {
                    Some(inv) => {
                        Ok(Array2::from_shape_fn((n, n), |(i, j)| inv[(i, j)]))
                    }
                    None => Err(Error::Numerical(format!(
                        "metric is singular at {:?}",
                        x
                    ))),
                }
            }
        }
    }

    /// Christoffel symbols Gamma^k_ij at `x`, indexed `[k][i][j]` and
    /// symmetric in (i, j).
    pub fn christoffel_at(&self, x: ArrayView1<f64>) -> Result<Array3<f64>> {
        self.check_point(x)?;
        self.christoffel_unchecked(x)
    }

    fn christoffel_unchecked(&self, x: ArrayView1<f64>) -> Result<Array3<f64>> {
        let n = self.dim;
        match &self.kind {
            ChartKind::Flat => Ok(Array3::zeros((n, n, n))),
            ChartKind::Sphere { .. } => {
                let mut g = Array3::zeros((2, 2, 2));
                let (st, ct) = (x[0].sin(), x[0].cos());
                g[[0, 1, 1]] = -st * ct;
                let cot = ct / st;
                g[[1, 0, 1]] = cot;
                g[[1, 1, 0]] = cot;
                Ok(g)
            }
            ChartKind::Custom => {
                let h = self.fd_step;
                // dg[l][i][j] = d g_ij / d x_l
                let mut dg = Array3::zeros((n, n, n));
                for l in 0..n {
                    for i in 0..n {
                        for j in i..n {
                            let d = central_d1_2nd(
                                |t| {
                                    let mut xs = x.to_owned();
                                    xs[l] += t;
                                    self.metric_unchecked(xs.view())[[i, j]]
                                },
                                h,
                            );
                            if !d.is_finite() {
                                return Err(Error::Numerical(format!(
                                    "non-finite metric derivative at {:?}",
                                    x
                                )));
                            }
                            dg[[l, i, j]] = d;
                            dg[[l, j, i]] = d;
                        }
                    }
                }
                let ginv = self.metric_inverse_unchecked(x)?;
                let mut gamma = Array3::zeros((n, n, n));
                for k in 0..n {
                    for i in 0..n {
                        for j in i..n {
                            let mut s = 0.0;
                            for l in 0..n {
                                s += ginv[[k, l]]
                                    * (dg[[i, j, l]] + dg[[j, i, l]] - dg[[l, i, j]]);
                            }
                            let v = 0.5 * s;
                            gamma[[k, i, j]] = v;
                            gamma[[k, j, i]] = v;
                        }
                    }
                }
                Ok(gamma)
            }
        }
    }

    /// Riemannian inner product of tangent vectors at `x`.
    pub fn inner(&self, x: ArrayView1<f64>, u: ArrayView1<f64>, v: ArrayView1<f64>) -> Result<f64> {
        let g = self.metric_at(x)?;
        Ok(u.dot(&g.dot(&v)))
    }

    /// Riemannian norm |v|_r = sqrt(v^T g(x) v).
    pub fn riemannian_norm(&self, x: ArrayView1<f64>, v: ArrayView1<f64>) -> Result<f64> {
        Ok(self.inner(x, v, v)?.max(0.0).sqrt())
    }

    /// Frame norm: square root of the sum of squared column norms of an
    /// n x d_w frame.
    pub fn frame_norm(&self, x: ArrayView1<f64>, z: ArrayView2<f64>) -> Result<f64> {
        let g = self.metric_at(x)?;
        let mut s = 0.0;
        for col in z.columns() {
            s += col.dot(&g.dot(&col));
        }
        Ok(s.max(0.0).sqrt())
    }

    fn geodesic_steps(&self, t: f64) -> usize {
        // fixed-step scheme: step = min(1e-3, t/1000)
        ((t.abs() / 1e-3).ceil() as usize).max(1000)
    }

    /// Point gamma(t) of the geodesic with gamma(0) = x, gamma'(0) = v.
    pub fn geodesic(&self, x: ArrayView1<f64>, v: ArrayView1<f64>, t: f64) -> Result<Array1<f64>> {
        Ok(self.geodesic_flow(x, v, t)?.0)
    }

    /// Geodesic endpoint together with its velocity, integrated by a
    /// classical fourth-order fixed-step scheme.
    pub fn geodesic_flow(
        &self,
        x: ArrayView1<f64>,
        v: ArrayView1<f64>,
        t: f64,
    ) -> Result<(Array1<f64>, Array1<f64>)> {
        self.check_point(x)?;
        if t == 0.0 || v.iter().all(|c| *c == 0.0) {
            return Ok((x.to_owned(), v.to_owned()));
        }
        if let ChartKind::Flat = self.kind {
            let end = &x + &v.mapv(|c| c * t);
            if !self.contains(end.view()) {
                return Err(self.flat_escape(x, v, t));
            }
            return Ok((end, v.to_owned()));
        }
        let steps = self.geodesic_steps(t);
        let h = t / steps as f64;
        let n = self.dim;
        let mut pos = x.to_owned();
        let mut vel = v.to_owned();
        for step in 0..steps {
            let (p, w) = self.rk4_geodesic_step(&pos, &vel, h)?;
            pos = p;
            vel = w;
            if !self.contains(pos.view()) {
                return Err(Error::Escape {
                    exit_time: h * (step + 1) as f64,
                });
            }
        }
        debug_assert_eq!(pos.len(), n);
        Ok((pos, vel))
    }

    fn flat_escape(&self, x: ArrayView1<f64>, v: ArrayView1<f64>, t: f64) -> Error {
        // bisection for the exit time of the straight line
        let mut lo = 0.0;
        let mut hi = t;
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            let p = &x + &v.mapv(|c| c * mid);
            if self.contains(p.view()) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Error::Escape { exit_time: hi }
    }

    fn geodesic_accel(&self, pos: ArrayView1<f64>, vel: ArrayView1<f64>) -> Result<Array1<f64>> {
        let gamma = self.christoffel_unchecked(pos)?;
        let n = self.dim;
        let mut acc = Array1::zeros(n);
        for k in 0..n {
            let mut s = 0.0;
            for i in 0..n {
                for j in 0..n {
                    s += gamma[[k, i, j]] * vel[i] * vel[j];
                }
            }
            acc[k] = -s;
        }
        Ok(acc)
    }

    fn rk4_geodesic_step(
        &self,
        pos: &Array1<f64>,
        vel: &Array1<f64>,
        h: f64,
    ) -> Result<(Array1<f64>, Array1<f64>)> {
        let k1p = vel.clone();
        let k1v = self.geodesic_accel(pos.view(), vel.view())?;

        let p2 = pos + &k1p.mapv(|c| c * h / 2.0);
        let v2 = vel + &k1v.mapv(|c| c * h / 2.0);
        let k2p = v2.clone();
        let k2v = self.geodesic_accel(p2.view(), v2.view())?;

        let p3 = pos + &k2p.mapv(|c| c * h / 2.0);
        let v3 = vel + &k2v.mapv(|c| c * h / 2.0);
        let k3p = v3.clone();
        let k3v = self.geodesic_accel(p3.view(), v3.view())?;

        let p4 = pos + &k3p.mapv(|c| c * h);
        let v4 = vel + &k3v.mapv(|c| c * h);
        let k4p = v4.clone();
        let k4v = self.geodesic_accel(p4.view(), v4.view())?;

        let newp = pos + &(k1p + k2p.mapv(|c| 2.0 * c) + k3p.mapv(|c| 2.0 * c) + k4p)
            .mapv(|c| c * h / 6.0);
        let newv = vel + &(k1v + k2v.mapv(|c| 2.0 * c) + k3v.mapv(|c| 2.0 * c) + k4v)
            .mapv(|c| c * h / 6.0);
        Ok((newp, newv))
    }

    /// Exponential map through closed forms where the chart has them (flat,
    /// sphere), falling back to the integrator for custom charts. Agrees
    /// with [`geodesic`](Self::geodesic) within the integrator tolerance;
    /// internal plumbing (projections, radial fields) prefers this route.
    pub fn exp_map(&self, x: ArrayView1<f64>, v: ArrayView1<f64>, t: f64) -> Result<Array1<f64>> {
        self.check_point(x)?;
        match &self.kind {
            ChartKind::Flat => {
                let end = &x + &v.mapv(|c| c * t);
                if self.contains(end.view()) {
                    Ok(end)
                } else {
                    Err(self.flat_escape(x, v, t))
                }
            }
            ChartKind::Sphere { radius } => {
                let p = sphere::embed(*radius, x);
                let v_emb = sphere::push_forward(*radius, x, v);
                let q = sphere::exp_embedded(*radius, p.view(), v_emb.mapv(|c| c * t).view());
                let out = sphere::chart_of(*radius, q.view());
                if self.contains(out.view()) {
                    Ok(out)
                } else {
                    Err(Error::Escape { exit_time: t })
                }
            }
            ChartKind::Custom => self.geodesic(x, v, t),
        }
    }

    /// Inverse of [`exp_map`](Self::exp_map) at unit time; closed form for
    /// the built-in charts, shooting otherwise.
    pub fn log_map(&self, x: ArrayView1<f64>, x_prime: ArrayView1<f64>) -> Result<Array1<f64>> {
        match &self.kind {
            ChartKind::Custom => self.geodesic_connect(x, x_prime),
            _ => {
                self.check_point(x)?;
                self.check_point(x_prime)?;
                match &self.kind {
                    ChartKind::Flat => Ok(&x_prime - &x),
                    ChartKind::Sphere { radius } => {
                        let p = sphere::embed(*radius, x);
                        let q = sphere::embed(*radius, x_prime);
                        match sphere::log_embedded(*radius, p.view(), q.view()) {
                            Some(v_emb) => Ok(sphere::pull_back(*radius, x, v_emb.view())),
                            None => Err(Error::AmbiguousGeodesic {
                                distance: sphere::distance(*radius, x, x_prime),
                            }),
                        }
                    }
                    ChartKind::Custom => unreachable!(),
                }
            }
        }
    }

    /// Velocity at the far endpoint of the connecting geodesic from `x` to
    /// `x'` (the reversed-geodesic identity keeps this closed-form on the
    /// built-in charts).
    pub fn connecting_end_velocity(
        &self,
        x: ArrayView1<f64>,
        x_prime: ArrayView1<f64>,
    ) -> Result<Array1<f64>> {
        Ok(self.log_map(x_prime, x)?.mapv(|c| -c))
    }

    /// Initial velocity v with geodesic(x, v, 1) = x'. Closed form for the
    /// built-in charts, shooting for custom ones.
    pub fn geodesic_connect(
        &self,
        x: ArrayView1<f64>,
        x_prime: ArrayView1<f64>,
    ) -> Result<Array1<f64>> {
        self.check_point(x)?;
        self.check_point(x_prime)?;
        match &self.kind {
            ChartKind::Flat => Ok(&x_prime - &x),
            ChartKind::Sphere { radius } => {
                let p = sphere::embed(*radius, x);
                let q = sphere::embed(*radius, x_prime);
                match sphere::log_embedded(*radius, p.view(), q.view()) {
                    Some(v_emb) => Ok(sphere::pull_back(*radius, x, v_emb.view())),
                    None => Err(Error::AmbiguousGeodesic {
                        distance: sphere::distance(*radius, x, x_prime),
                    }),
                }
            }
            ChartKind::Custom => self.shoot_connect(x, x_prime),
        }
    }

    /// Gauss-Newton shooting with backtracking on the endpoint mismatch.
    fn shoot_connect(&self, x: ArrayView1<f64>, x_prime: ArrayView1<f64>) -> Result<Array1<f64>> {
        const MAX_ITERS: usize = 50;
        const TOL: f64 = 1e-8;
        let n = self.dim;
        let mut v = &x_prime - &x;
        let mut res = self.geodesic(x, v.view(), 1.0)? - &x_prime;
        let mut res_norm = res.dot(&res).sqrt();
        for _ in 0..MAX_ITERS {
            if res_norm <= TOL {
                return Ok(v);
            }
            // Jacobian of the endpoint with respect to v, by forward differences
            let h = 1e-6 * (1.0 + v.dot(&v).sqrt());
            let mut jac = nalgebra::DMatrix::zeros(n, n);
            for c in 0..n {
                let mut vp = v.clone();
                vp[c] += h;
                let endp = self.geodesic(x, vp.view(), 1.0)?;
                for r in 0..n {
                    jac[(r, c)] = (endp[r] - (res[r] + x_prime[r])) / h;
                }
            }
            let rhs = nalgebra::DVector::from_fn(n, |i, _| res[i]);
            let delta = jac
                .lu()
                .solve(&rhs)
                .ok_or_else(|| Error::Convergence("singular shooting Jacobian".into()))?;
            // damped update
            let mut alpha = 1.0;
            let mut improved = false;
            for _ in 0..8 {
                let cand = Array1::from_shape_fn(n, |i| v[i] - alpha * delta[i]);
                match self.geodesic(x, cand.view(), 1.0) {
                    Ok(endp) => {
                        let r = &endp - &x_prime;
                        let rn = r.dot(&r).sqrt();
                        if rn < res_norm {
                            v = cand;
                            res = r;
                            res_norm = rn;
                            improved = true;
                            break;
                        }
                    }
                    Err(_) => {}
                }
                alpha *= 0.5;
            }
            if !improved {
                return Err(Error::Convergence(format!(
                    "shooting stalled at residual {res_norm:.3e}"
                )));
            }
        }
        if res_norm <= TOL {
            Ok(v)
        } else {
            Err(Error::Convergence(format!(
                "shooting did not reach tolerance, residual {res_norm:.3e}"
            )))
        }
    }

    /// Parallel transport of the tangent vector `z` from `x` to `x'` along
    /// the connecting geodesic.
    pub fn parallel_transport(
        &self,
        x: ArrayView1<f64>,
        x_prime: ArrayView1<f64>,
        z: ArrayView1<f64>,
    ) -> Result<Array1<f64>> {
        let frame = z.to_owned().insert_axis(ndarray::Axis(1));
        let out = self.parallel_transport_frame(x, x_prime, frame.view())?;
        Ok(out.column(0).to_owned())
    }

    /// Transport every column of an n x d_w frame along the connecting
    /// geodesic, by integrating the transport equation jointly with the
    /// geodesic flow.
    pub fn parallel_transport_frame(
        &self,
        x: ArrayView1<f64>,
        x_prime: ArrayView1<f64>,
        z: ArrayView2<f64>,
    ) -> Result<Array2<f64>> {
        self.check_point(x)?;
        self.check_point(x_prime)?;
        if let ChartKind::Flat = self.kind {
            return Ok(z.to_owned());
        }
        let v = self.geodesic_connect(x, x_prime)?;
        if v.iter().all(|c| *c == 0.0) {
            return Ok(z.to_owned());
        }
        let steps = self.geodesic_steps(1.0);
        let h = 1.0 / steps as f64;
        let n = self.dim;
        let m = z.ncols();
        let mut pos = x.to_owned();
        let mut vel = v;
        let mut frame = z.to_owned();
        for _ in 0..steps {
            let (p, w, f) = self.rk4_transport_step(&pos, &vel, &frame, h)?;
            pos = p;
            vel = w;
            frame = f;
        }
        // endpoint drift from the integrator is O(h^4); keep the frame as is
        debug_assert!(pos.len() == n && frame.ncols() == m);
        Ok(frame)
    }

    fn transport_deriv(
        &self,
        pos: ArrayView1<f64>,
        vel: ArrayView1<f64>,
        frame: &Array2<f64>,
    ) -> Result<(Array1<f64>, Array2<f64>)> {
        let gamma = self.christoffel_unchecked(pos)?;
        let n = self.dim;
        let m = frame.ncols();
        let mut acc = Array1::zeros(n);
        let mut dframe = Array2::zeros((n, m));
        for k in 0..n {
            let mut s = 0.0;
            for i in 0..n {
                for j in 0..n {
                    s += gamma[[k, i, j]] * vel[i] * vel[j];
                }
            }
            acc[k] = -s;
            for c in 0..m {
                let mut t = 0.0;
                for j in 0..n {
                    for l in 0..n {
                        t += gamma[[k, j, l]] * vel[j] * frame[[l, c]];
                    }
                }
                dframe[[k, c]] = -t;
            }
        }
        Ok((acc, dframe))
    }

    #[allow(clippy::type_complexity)]
    fn rk4_transport_step(
        &self,
        pos: &Array1<f64>,
        vel: &Array1<f64>,
        frame: &Array2<f64>,
        h: f64,
    ) -> Result<(Array1<f64>, Array1<f64>, Array2<f64>)> {
        let (a1, f1) = self.transport_deriv(pos.view(), vel.view(), frame)?;
        let p1 = vel.clone();

        let p_2 = pos + &p1.mapv(|c| c * h / 2.0);
        let v_2 = vel + &a1.mapv(|c| c * h / 2.0);
        let fr2 = frame + &f1.mapv(|c| c * h / 2.0);
        let (a2, f2) = self.transport_deriv(p_2.view(), v_2.view(), &fr2)?;
        let p2 = v_2.clone();

        let p_3 = pos + &p2.mapv(|c| c * h / 2.0);
        let v_3 = vel + &a2.mapv(|c| c * h / 2.0);
        let fr3 = frame + &f2.mapv(|c| c * h / 2.0);
        let (a3, f3) = self.transport_deriv(p_3.view(), v_3.view(), &fr3)?;
        let p3 = v_3.clone();

        let p_4 = pos + &p3.mapv(|c| c * h);
        let v_4 = vel + &a3.mapv(|c| c * h);
        let fr4 = frame + &f3.mapv(|c| c * h);
        let (a4, f4) = self.transport_deriv(p_4.view(), v_4.view(), &fr4)?;
        let p4 = v_4.clone();

        let newp = pos + &(p1 + p2.mapv(|c| 2.0 * c) + p3.mapv(|c| 2.0 * c) + p4)
            .mapv(|c| c * h / 6.0);
        let newv = vel + &(a1 + a2.mapv(|c| 2.0 * c) + a3.mapv(|c| 2.0 * c) + a4)
            .mapv(|c| c * h / 6.0);
        let newf = frame
            + &(f1 + f2.mapv(|c| 2.0 * c) + f3.mapv(|c| 2.0 * c) + f4).mapv(|c| c * h / 6.0);
        Ok((newp, newv, newf))
    }

    /// Riemannian distance between two chart points.
    pub fn distance(&self, x: ArrayView1<f64>, x_prime: ArrayView1<f64>) -> Result<f64> {
        self.check_point(x)?;
        self.check_point(x_prime)?;
        match &self.kind {
            ChartKind::Flat => {
                let d = &x_prime - &x;
                Ok(d.dot(&d).sqrt())
            }
            ChartKind::Sphere { radius } => Ok(sphere::distance(*radius, x, x_prime)),
            ChartKind::Custom => {
                // length of the connecting geodesic = |v|_r at the start point
                let v = self.geodesic_connect(x, x_prime)?;
                self.riemannian_norm(x, v.view())
            }
        }
    }

    /// Smallest constants validating the transport comparison bounds, fitted
    /// over `count` random configurations from `subset`:
    /// |T z - z| <= C0 * dist * |z| (Euclidean norms, T the transport) and
    /// |z - z'| <= C1 * (|T z - z'|_r + dist * (|z|_r + |z'|_r)).
    pub fn transport_comparison_margin(
        &self,
        subset: &ChartDomain,
        count: usize,
        seed: u64,
    ) -> Result<EstimateReport> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        let n = self.dim;
        let mut report = EstimateReport::new("transport_comparison", count);
        let mut c0_max: f64 = 0.0;
        let mut c1_max: f64 = 0.0;
        let mut max_ratio_sample: Vec<f64> = Vec::new();
        for _ in 0..count {
            let x = subset.sample(&mut rng);
            let x_prime = subset.sample(&mut rng);
            let z = Array1::from_iter((0..n).map(|_| rng.gen_range(-1.0..1.0)));
            let z_prime = Array1::from_iter((0..n).map(|_| rng.gen_range(-1.0..1.0)));
            let dist = self.distance(x.view(), x_prime.view())?;
            let tz = self.parallel_transport(x.view(), x_prime.view(), z.view())?;

            let znorm_e = z.dot(&z).sqrt();
            let dev = (&tz - &z).mapv(|t| t * t).sum().sqrt();
            if dist * znorm_e > 1e-12 {
                let ratio = dev / (dist * znorm_e);
                if ratio > c0_max {
                    c0_max = ratio;
                    let mut s = x.to_vec();
                    s.extend(x_prime.iter());
                    s.extend(z.iter());
                    max_ratio_sample = s;
                }
            }

            let diff_e = (&z - &z_prime).mapv(|t| t * t).sum().sqrt();
            let diff_r = self.riemannian_norm(x_prime.view(), (&tz - &z_prime).view())?;
            let rhs = diff_r
                + dist
                    * (self.riemannian_norm(x.view(), z.view())?
                        + self.riemannian_norm(x_prime.view(), z_prime.view())?);
            if rhs > 1e-12 {
                c1_max = c1_max.max(diff_e / rhs);
            }
        }
        report.min_margin = 0.0;
        report.worst_sample = if max_ratio_sample.is_empty() {
            None
        } else {
            Some(max_ratio_sample)
        };
        report.fitted_constants.insert("C_2tp3".into(), c0_max);
        report.fitted_constants.insert("C_2tp2".into(), c1_max);
        report.pass = c0_max.is_finite() && c1_max.is_finite();
        Ok(report)
    }
}

/// A tangent vector anchored at a chart point.
#[derive(Debug, Clone)]
pub struct TangentVector {
    pub base: Array1<f64>,
    pub components: Array1<f64>,
}

impl TangentVector {
    pub fn new(m: &ChartManifold, base: Array1<f64>, components: Array1<f64>) -> Result<Self> {
        if !m.contains(base.view()) {
            return Err(Error::Domain("tangent vector based outside chart".into()));
        }
        Ok(TangentVector { base, components })
    }
}

/// How the sublevel function of a domain gauge is evaluated.
#[derive(Clone)]
pub enum GaugeChi {
    /// chi(x) = dist(center, x)^2; the sublevel set {chi <= rho^2} is the
    /// closed geodesic ball.
    DistanceSquared,
    Custom(Arc<dyn Fn(ArrayView1<f64>) -> f64 + Send + Sync>),
}

/// Convex gauge describing the working domain: the sublevel set
/// {chi <= level} contains the process.
#[derive(Clone)]
pub struct DomainGauge {
    pub chi: GaugeChi,
    pub level: f64,
    pub center: Array1<f64>,
    pub radius: f64,
}

impl std::fmt::Debug for DomainGauge {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DomainGauge")
            .field("level", &self.level)
            .field("center", &self.center)
            .field("radius", &self.radius)
            .finish()
    }
}

impl DomainGauge {
    /// Closed geodesic ball of radius `rho` around `center`.
    pub fn geodesic_ball(center: Array1<f64>, rho: f64) -> Self {
        assert!(rho > 0.0);
        DomainGauge {
            chi: GaugeChi::DistanceSquared,
            level: rho * rho,
            center,
            radius: rho,
        }
    }

    pub fn custom(
        chi: Arc<dyn Fn(ArrayView1<f64>) -> f64 + Send + Sync>,
        level: f64,
        center: Array1<f64>,
        radius_hint: f64,
    ) -> Self {
        DomainGauge {
            chi: GaugeChi::Custom(chi),
            level,
            center,
            radius: radius_hint,
        }
    }

    pub fn chi_value(&self, m: &ChartManifold, x: ArrayView1<f64>) -> Result<f64> {
        match &self.chi {
            GaugeChi::DistanceSquared => {
                let d = m.distance(self.center.view(), x)?;
                Ok(d * d)
            }
            GaugeChi::Custom(f) => Ok(f(x)),
        }
    }

    pub fn contains(&self, m: &ChartManifold, x: ArrayView1<f64>, tol_band: f64) -> Result<bool> {
        Ok(self.chi_value(m, x)? <= self.level + tol_band)
    }

    /// Euclidean gradient of chi at `x` (finite differences).
    pub fn grad_chi(&self, m: &ChartManifold, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        let n = x.len();
        let h = 1e-5;
        let mut grad = Array1::zeros(n);
        for i in 0..n {
            let mut xp = x.to_owned();
            let mut xm = x.to_owned();
            xp[i] += h;
            xm[i] -= h;
            grad[i] = (self.chi_value(m, xp.view())? - self.chi_value(m, xm.view())?) / (2.0 * h);
        }
        Ok(grad)
    }

    /// Boundary point of {chi = level} along the geodesic ray from the
    /// center with initial direction `dir`.
    pub fn boundary_point(
        &self,
        m: &ChartManifold,
        dir: ArrayView1<f64>,
    ) -> Result<Array1<f64>> {
        let norm = m.riemannian_norm(self.center.view(), dir)?;
        if norm == 0.0 {
            return Err(Error::Domain("zero direction for boundary point".into()));
        }
        let unit = dir.mapv(|c| c / norm);
        if let GaugeChi::DistanceSquared = self.chi {
            return m.exp_map(self.center.view(), unit.view(), self.radius);
        }
        // bisection on the ray for a general convex chi
        let mut lo = 0.0;
        let mut hi = self.radius;
        let mut chi_hi = self.chi_value(m, m.exp_map(self.center.view(), unit.view(), hi)?.view())?;
        let mut grow = 0;
        while chi_hi < self.level && grow < 40 {
            hi *= 1.5;
            chi_hi = self.chi_value(m, m.exp_map(self.center.view(), unit.view(), hi)?.view())?;
            grow += 1;
        }
        if chi_hi < self.level {
            return Err(Error::Convergence(
                "ray never reaches the gauge level".into(),
            ));
        }
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            let c = self.chi_value(m, m.exp_map(self.center.view(), unit.view(), mid)?.view())?;
            if c < self.level {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        m.exp_map(self.center.view(), unit.view(), 0.5 * (lo + hi))
    }

    /// Geodesic retraction of `x` to the level set, toward the center.
    /// Points already inside are returned unchanged.
    pub fn project(&self, m: &ChartManifold, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        if self.chi_value(m, x)? <= self.level {
            return Ok(x.to_owned());
        }
        let v = m.log_map(self.center.view(), x)?;
        if let GaugeChi::DistanceSquared = self.chi {
            let len = m.riemannian_norm(self.center.view(), v.view())?;
            let unit = v.mapv(|c| c / len);
            return m.exp_map(self.center.view(), unit.view(), self.radius);
        }
        let mut lo = 0.0;
        let mut hi = 1.0;
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            let p = m.exp_map(self.center.view(), v.view(), mid)?;
            if self.chi_value(m, p.view())? < self.level {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        m.exp_map(self.center.view(), v.view(), 0.5 * (lo + hi))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use std::f64::consts::FRAC_PI_2;

    fn flat2() -> ChartManifold {
        ChartManifold::flat(
            2,
            ChartDomain::Box {
                lower: array![-3.0, -3.0],
                upper: array![3.0, 3.0],
            },
        )
    }

    /// Chart with the plane metric in polar-type coordinates
    /// g = diag(1, x1^2) on a box away from x1 = 0; closed-form symbols are
    /// G^1_22 = -x1, G^2_12 = 1/x1.
    fn polar_like() -> ChartManifold {
        ChartManifold::custom(
            2,
            ChartDomain::Box {
                lower: array![0.5, -2.0],
                upper: array![2.5, 2.0],
            },
            Arc::new(|x: ArrayView1<f64>| {
                let mut g = Array2::eye(2);
                g[[1, 1]] = x[0] * x[0];
                g
            }),
            0.0,
        )
    }

    #[test]
    fn flat_christoffel_is_zero() {
        let m = flat2();
        let g = m.christoffel_at(array![0.3, -1.2].view()).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn sphere_christoffel_closed_form() {
        let m = ChartManifold::sphere(1.0);
        let th = std::f64::consts::FRAC_PI_4;
        let g = m.christoffel_at(array![th, 0.3].view()).unwrap();
        assert!((g[[0, 1, 1]] + 0.5).abs() < 1e-15); // -sin cos at pi/4
        assert!((g[[1, 0, 1]] - 1.0).abs() < 1e-15); // cot at pi/4
        assert!((g[[1, 1, 0]] - 1.0).abs() < 1e-15);
        let zeros = [(0, 0, 0), (0, 0, 1), (0, 1, 0), (1, 0, 0), (1, 1, 1)];
        for (k, i, j) in zeros {
            assert_eq!(g[[k, i, j]], 0.0);
        }
        // equator: everything vanishes
        let ge = m.christoffel_at(array![FRAC_PI_2, -0.7].view()).unwrap();
        assert!(ge.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn finite_difference_christoffel_matches_closed_form() {
        // same metric as the sphere chart, fed through the custom path
        let m = ChartManifold::custom(
            2,
            ChartDomain::Box {
                lower: array![0.2, -3.0],
                upper: array![std::f64::consts::PI - 0.2, 3.0],
            },
            Arc::new(|x: ArrayView1<f64>| {
                let mut g = Array2::eye(2);
                g[[1, 1]] = x[0].sin().powi(2);
                g
            }),
            1.0,
        );
        let s = ChartManifold::sphere(1.0);
        for &(th, ph) in &[(0.7, 0.3), (std::f64::consts::FRAC_PI_4, -1.0), (2.0, 0.0)] {
            let x = array![th, ph];
            let fd = m.christoffel_at(x.view()).unwrap();
            let cf = s.christoffel_at(x.view()).unwrap();
            for k in 0..2 {
                for i in 0..2 {
                    for j in 0..2 {
                        assert!(
                            (fd[[k, i, j]] - cf[[k, i, j]]).abs() < 1e-8,
                            "Gamma[{k}][{i}][{j}] at theta={th}"
                        );
                    }
                }
            }
        }
        let poles = ChartManifold::custom(
            2,
            ChartDomain::unit_box(2),
            Arc::new(|_x: ArrayView1<f64>| Array2::zeros((2, 2))),
            0.0,
        );
        assert!(matches!(
            poles.christoffel_at(array![0.0, 0.0].view()),
            Err(Error::Numerical(_))
        ));
    }

    #[test]
    fn flat_geodesics_are_straight_lines() {
        let m = flat2();
        let x = array![0.5, -0.5];
        let v = array![0.3, 0.8];
        let p = m.geodesic(x.view(), v.view(), 2.0).unwrap();
        assert!((&p - &array![1.1, 1.1]).mapv(f64::abs).sum() < 1e-14);
        // rest geodesic
        let q = m.geodesic(x.view(), Array1::zeros(2).view(), 5.0).unwrap();
        assert_eq!(q, x);
    }

    #[test]
    fn sphere_equator_geodesic() {
        let m = ChartManifold::sphere(1.0);
        let x = array![FRAC_PI_2, 0.0];
        let v = array![0.0, 1.0]; // unit phi-direction on the equator
        let p = m.geodesic(x.view(), v.view(), 1.0).unwrap();
        assert!((p[0] - FRAC_PI_2).abs() < 1e-10);
        assert!((p[1] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn geodesic_escape_reports_exit_time() {
        let m = flat2();
        let err = m
            .geodesic(array![2.0, 0.0].view(), array![1.0, 0.0].view(), 5.0)
            .unwrap_err();
        match err {
            Error::Escape { exit_time } => assert!((exit_time - 1.0).abs() < 1e-6),
            other => panic!("expected escape, got {other:?}"),
        }
        let s = ChartManifold::sphere(1.0);
        assert!(matches!(
            s.geodesic(array![0.3, 0.0].view(), array![-1.0, 0.0].view(), 1.0),
            Err(Error::Escape { .. })
        ));
    }

    #[test]
    fn connect_flat_and_trivial() {
        let m = flat2();
        let x = array![0.1, 0.2];
        let xp = array![-0.4, 1.0];
        let v = m.geodesic_connect(x.view(), xp.view()).unwrap();
        assert!((&v - &(&xp - &x)).mapv(f64::abs).sum() < 1e-14);
        let z = m.geodesic_connect(x.view(), x.view()).unwrap();
        assert!(z.iter().all(|c| *c == 0.0));
    }

    #[test]
    fn connect_sphere_quarter_circle() {
        let m = ChartManifold::sphere(1.0);
        let x = array![FRAC_PI_2, 0.0];
        let xp = array![FRAC_PI_2, FRAC_PI_2];
        let v = m.geodesic_connect(x.view(), xp.view()).unwrap();
        assert!(v[0].abs() < 1e-12);
        assert!((m.riemannian_norm(x.view(), v.view()).unwrap() - FRAC_PI_2).abs() < 1e-12);
        // round trip through the integrator
        let p = m.geodesic(x.view(), v.view(), 1.0).unwrap();
        assert!((&p - &xp).mapv(f64::abs).sum() < 1e-9);
        // antipodal pair is ambiguous
        let err = m.geodesic_connect(
            array![FRAC_PI_2, 0.0].view(),
            array![FRAC_PI_2, std::f64::consts::PI].view(),
        );
        assert!(matches!(err, Err(Error::AmbiguousGeodesic { .. })));
    }

    #[test]
    fn connect_by_shooting_on_custom_chart() {
        let m = polar_like();
        let x = array![1.0, 0.1];
        let xp = array![1.8, -0.6];
        let v = m.geodesic_connect(x.view(), xp.view()).unwrap();
        let end = m.geodesic(x.view(), v.view(), 1.0).unwrap();
        assert!((&end - &xp).mapv(f64::abs).sum() < 1e-6);
    }

    #[test]
    fn transport_identity_on_flat() {
        let m = flat2();
        let z = array![0.4, -0.9];
        let out = m
            .parallel_transport(array![0.0, 0.0].view(), array![1.0, 1.0].view(), z.view())
            .unwrap();
        assert_eq!(out, z);
    }

    #[test]
    fn transport_along_equator() {
        let m = ChartManifold::sphere(1.0);
        let x = array![FRAC_PI_2, 0.0];
        let xp = array![FRAC_PI_2, FRAC_PI_2];
        // theta-direction is normal to the equator and stays put
        let z = array![1.0, 0.0];
        let out = m.parallel_transport(x.view(), xp.view(), z.view()).unwrap();
        assert!((out[0] - 1.0).abs() < 1e-9 && out[1].abs() < 1e-9);
        // the geodesic velocity transports onto itself
        let v = m.geodesic_connect(x.view(), xp.view()).unwrap();
        let tv = m.parallel_transport(x.view(), xp.view(), v.view()).unwrap();
        let (_, v_end) = m.geodesic_flow(x.view(), v.view(), 1.0).unwrap();
        assert!((&tv - &v_end).mapv(f64::abs).sum() < 1e-8);
    }

    #[test]
    fn transport_is_isometric() {
        let m = ChartManifold::sphere(1.0);
        let x = array![1.1, -0.4];
        let xp = array![1.9, 0.7];
        let z = array![0.37, 0.81];
        let out = m.parallel_transport(x.view(), xp.view(), z.view()).unwrap();
        let n0 = m.riemannian_norm(x.view(), z.view()).unwrap();
        let n1 = m.riemannian_norm(xp.view(), out.view()).unwrap();
        assert!((n0 - n1).abs() < 1e-6);
    }

    #[test]
    fn distance_basics() {
        let m = ChartManifold::sphere(1.0);
        let x = array![FRAC_PI_2, 0.0];
        assert_eq!(m.distance(x.view(), x.view()).unwrap(), 0.0);
        let xp = array![FRAC_PI_2, FRAC_PI_2];
        assert!((m.distance(x.view(), xp.view()).unwrap() - FRAC_PI_2).abs() < 1e-14);
        let f = flat2();
        let d = f
            .distance(array![0.0, 0.0].view(), array![0.3, 0.4].view())
            .unwrap();
        assert!((d - 0.5).abs() < 1e-15);
    }

    #[test]
    fn norms() {
        let m = ChartManifold::sphere(1.0);
        let x = array![FRAC_PI_2, 0.0];
        // g_phiphi = 1 on the equator of the unit sphere
        let n = m.riemannian_norm(x.view(), array![0.0, 1.0].view()).unwrap();
        assert!((n - 1.0).abs() < 1e-15);
        assert_eq!(
            m.riemannian_norm(x.view(), Array1::zeros(2).view()).unwrap(),
            0.0
        );
        let frame = array![[1.0, 0.0], [0.0, 1.0]];
        let fnorm = m.frame_norm(x.view(), frame.view()).unwrap();
        assert!((fnorm - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn geodesic_norm_is_conserved() {
        let m = ChartManifold::sphere(1.0);
        let x = array![1.0, 0.2];
        let v = array![0.5, -0.3];
        let n0 = m.riemannian_norm(x.view(), v.view()).unwrap();
        let (p, w) = m.geodesic_flow(x.view(), v.view(), 1.0).unwrap();
        let n1 = m.riemannian_norm(p.view(), w.view()).unwrap();
        assert!((n0 - n1).abs() < 1e-6);
    }

    #[test]
    fn transport_margin_on_flat_is_zero() {
        let m = flat2();
        let report = m
            .transport_comparison_margin(&ChartDomain::unit_box(2), 50, 11)
            .unwrap();
        assert!(report.pass);
        assert!(report.fitted_constants["C_2tp3"].abs() < 1e-12);
    }

    #[test]
    fn fast_maps_agree_with_the_integrator() {
        let m = ChartManifold::sphere(1.0);
        let x = array![1.2, -0.3];
        let v = array![0.4, 0.7];
        let ode = m.geodesic(x.view(), v.view(), 1.0).unwrap();
        let fast = m.exp_map(x.view(), v.view(), 1.0).unwrap();
        assert!((&ode - &fast).mapv(f64::abs).sum() < 1e-9);
        let back = m.log_map(x.view(), fast.view()).unwrap();
        assert!((&back - &v).mapv(f64::abs).sum() < 1e-9);
        let (_, vel_end) = m.geodesic_flow(x.view(), v.view(), 1.0).unwrap();
        let fast_end = m.connecting_end_velocity(x.view(), fast.view()).unwrap();
        assert!((&vel_end - &fast_end).mapv(f64::abs).sum() < 1e-8);
    }

    #[test]
    fn ball_projection_lands_on_level_set() {
        let m = ChartManifold::sphere(1.0);
        let ball = DomainGauge::geodesic_ball(array![FRAC_PI_2, 0.0], 0.6);
        let outside = array![FRAC_PI_2, 1.1];
        let proj = ball.project(&m, outside.view()).unwrap();
        let d = m.distance(ball.center.view(), proj.view()).unwrap();
        assert!((d - 0.6).abs() < 1e-9);
        let inside = array![FRAC_PI_2, 0.1];
        assert_eq!(ball.project(&m, inside.view()).unwrap(), inside);
        let b = ball.boundary_point(&m, array![0.3, 0.4].view()).unwrap();
        assert!((m.distance(ball.center.view(), b.view()).unwrap() - 0.6).abs() < 1e-9);
    }
}
