//! Two-point convex gauge functions and their derivatives.
//!
//! A gauge is a nonnegative function on chart pairs, vanishing exactly on
//! the diagonal and comparable to a power of the distance. The Hessian here
//! always means the connection Hessian on the product chart,
//! `Hess_ij = d_ij Psi - Gammabar^k_ij d_k Psi`, which along product
//! geodesics equals the plain second derivative of the composition.

pub mod estimates;

use crate::error::{Error, Result};
use crate::geometry::{ChartKind, ChartManifold};
use crate::numerics::{central_d1, central_d2};
use ndarray::{s, Array1, Array2, ArrayView1};
use std::f64::consts::FRAC_PI_2;
use std::sync::Arc;

pub type CustomGauge = Arc<dyn Fn(ArrayView1<f64>, ArrayView1<f64>) -> f64 + Send + Sync>;

#[derive(Clone)]
pub enum GaugeKind {
    /// In v-coordinates v = (x - x', x'):
    /// Psi(v) = 1/2 (eps^2 + sum_{k>n} v_k^2) (sum_{k<=n} v_k^2).
    Emery { eps: f64 },
    /// Psi_a(x, x') = sin^a(sqrt(K) dist(x, x') / 2) with 1 < a < 2; smooth
    /// off the diagonal only.
    SinPower { a: f64 },
    /// dist(x, x')^2.
    DistanceSquared,
    Custom { psi: CustomGauge, order: f64 },
}

impl std::fmt::Debug for GaugeKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GaugeKind::Emery { eps } => write!(f, "Emery {{ eps: {eps} }}"),
            GaugeKind::SinPower { a } => write!(f, "SinPower {{ a: {a} }}"),
            GaugeKind::DistanceSquared => write!(f, "DistanceSquared"),
            GaugeKind::Custom { order, .. } => write!(f, "Custom {{ order: {order} }}"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GaugeFunction {
    pub kind: GaugeKind,
    /// Exponent p in Psi ~ dist^p: 2 for the smooth built-ins (an even
    /// integer by the Taylor argument), `a` for the sin-power gauge.
    pub order: f64,
    /// Step for first derivatives.
    fd1: f64,
    /// Step for second derivatives.
    fd2: f64,
    /// Hessians of the sin-power gauge are refused closer to the diagonal
    /// than this (the gauge is not smooth there).
    pub diagonal_band: f64,
}

impl GaugeFunction {
    pub fn emery(eps: f64) -> Self {
        assert!(eps > 0.0);
        GaugeFunction {
            kind: GaugeKind::Emery { eps },
            order: 2.0,
            fd1: 1e-4,
            fd2: 1e-3,
            diagonal_band: 0.0,
        }
    }

    /// `a` must lie strictly between 1 and 2.
    pub fn sin_power(a: f64) -> Result<Self> {
        if !(1.0 < a && a < 2.0) {
            return Err(Error::Domain(format!(
                "sin_power exponent a = {a} outside (1, 2)"
            )));
        }
        Ok(GaugeFunction {
            kind: GaugeKind::SinPower { a },
            order: a,
            fd1: 1e-4,
            fd2: 1e-3,
            diagonal_band: 1e-3,
        })
    }

    pub fn distance_squared() -> Self {
        GaugeFunction {
            kind: GaugeKind::DistanceSquared,
            order: 2.0,
            fd1: 1e-4,
            fd2: 1e-3,
            diagonal_band: 0.0,
        }
    }

    pub fn custom(psi: CustomGauge, order: f64) -> Self {
        GaugeFunction {
            kind: GaugeKind::Custom { psi, order },
            order,
            fd1: 1e-4,
            fd2: 1e-3,
            diagonal_band: 0.0,
        }
    }

    /// Gauge value Psi(x, x').
    pub fn value(
        &self,
        m: &ChartManifold,
        x: ArrayView1<f64>,
        x_prime: ArrayView1<f64>,
    ) -> Result<f64> {
        match &self.kind {
            GaugeKind::Emery { eps } => {
                let diff = &x - &x_prime;
                let s2: f64 = x_prime.dot(&x_prime);
                Ok(0.5 * (eps * eps + s2) * diff.dot(&diff))
            }
            GaugeKind::SinPower { a } => {
                let k = m.curvature_bound();
                if k <= 0.0 {
                    return Err(Error::Domain(
                        "sin_power gauge needs a positive curvature bound".into(),
                    ));
                }
                let y = k.sqrt() * m.distance(x, x_prime)? / 2.0;
                Ok(y.sin().powf(*a))
            }
            GaugeKind::DistanceSquared => {
                let d = m.distance(x, x_prime)?;
                Ok(d * d)
            }
            GaugeKind::Custom { psi, .. } => Ok(psi(x, x_prime)),
        }
    }

    fn check_off_diagonal(
        &self,
        m: &ChartManifold,
        x: ArrayView1<f64>,
        x_prime: ArrayView1<f64>,
    ) -> Result<f64> {
        let d = m.distance(x, x_prime)?;
        if matches!(self.kind, GaugeKind::SinPower { .. }) && d <= self.diagonal_band {
            return Err(Error::Domain(format!(
                "sin_power gauge is not smooth on the diagonal (dist = {d:.3e})"
            )));
        }
        Ok(d)
    }

    fn steps_for(&self, dist: f64) -> (f64, f64) {
        // shrink stencils near the diagonal of the non-smooth gauge
        if matches!(self.kind, GaugeKind::SinPower { .. }) {
            (self.fd1.min(dist / 20.0), self.fd2.min(dist / 20.0))
        } else {
            (self.fd1, self.fd2)
        }
    }

    /// Euclidean gradient of Psi on the product chart (length 2n). Analytic
    /// for the Emery gauge and for the squared distance on flat charts.
    pub fn gradient(
        &self,
        m: &ChartManifold,
        x: ArrayView1<f64>,
        x_prime: ArrayView1<f64>,
    ) -> Result<Array1<f64>> {
        let n = m.dim();
        match &self.kind {
            GaugeKind::Emery { eps } => {
                let diff = &x - &x_prime;
                let s2: f64 = x_prime.dot(&x_prime);
                let q: f64 = diff.dot(&diff);
                let mut grad = Array1::zeros(2 * n);
                for i in 0..n {
                    grad[i] = (eps * eps + s2) * diff[i];
                    grad[n + i] = -(eps * eps + s2) * diff[i] + q * x_prime[i];
                }
                Ok(grad)
            }
            GaugeKind::DistanceSquared if matches!(m.kind(), ChartKind::Flat) => {
                let diff = &x - &x_prime;
                let mut grad = Array1::zeros(2 * n);
                for i in 0..n {
                    grad[i] = 2.0 * diff[i];
                    grad[n + i] = -2.0 * diff[i];
                }
                Ok(grad)
            }
            _ => {
                let dist = self.check_off_diagonal(m, x, x_prime)?;
                let (h1, _) = self.steps_for(dist.max(1e-6));
                let mut grad = Array1::zeros(2 * n);
                for i in 0..2 * n {
                    grad[i] = central_d1(
                        |t| {
                            let (xs, xps) = shift_pair(x, x_prime, i, t);
                            self.value(m, xs.view(), xps.view()).unwrap_or(f64::NAN)
                        },
                        h1,
                    );
                    if !grad[i].is_finite() {
                        return Err(Error::Numerical(
                            "non-finite gauge gradient component".into(),
                        ));
                    }
                }
                Ok(grad)
            }
        }
    }

    /// Plain second-partials matrix of Psi on the product chart (2n x 2n),
    /// before the connection correction.
    pub fn second_partials(
        &self,
        m: &ChartManifold,
        x: ArrayView1<f64>,
        x_prime: ArrayView1<f64>,
    ) -> Result<Array2<f64>> {
        let n = m.dim();
        match &self.kind {
            GaugeKind::Emery { eps } => {
                let diff = (&x - &x_prime).to_owned();
                let s = x_prime.to_owned();
                let s2: f64 = s.dot(&s);
                let q: f64 = diff.dot(&diff);
                let c = eps * eps + s2;
                let mut h = Array2::zeros((2 * n, 2 * n));
                for i in 0..n {
                    for j in 0..n {
                        let idel = if i == j { 1.0 } else { 0.0 };
                        // d2/dx dx
                        h[[i, j]] = c * idel;
                        // d2/dx dx'
                        h[[i, n + j]] = 2.0 * diff[i] * s[j] - c * idel;
                        h[[n + i, j]] = 2.0 * s[i] * diff[j] - c * idel;
                        // d2/dx' dx'
                        h[[n + i, n + j]] = -2.0 * diff[i] * s[j] - 2.0 * s[i] * diff[j]
                            + (c + q) * idel;
                    }
                }
                Ok(h)
            }
            GaugeKind::DistanceSquared if matches!(m.kind(), ChartKind::Flat) => {
                let mut h = Array2::zeros((2 * n, 2 * n));
                for i in 0..n {
                    h[[i, i]] = 2.0;
                    h[[n + i, n + i]] = 2.0;
                    h[[i, n + i]] = -2.0;
                    h[[n + i, i]] = -2.0;
                }
                Ok(h)
            }
            _ => {
                let dist = self.check_off_diagonal(m, x, x_prime)?;
                let (_, h2) = self.steps_for(dist.max(1e-6));
                let mut h = Array2::zeros((2 * n, 2 * n));
                for i in 0..2 * n {
                    for j in i..2 * n {
                        let v = if i == j {
                            central_d2(
                                |t| {
                                    let (xs, xps) = shift_pair(x, x_prime, i, t);
                                    self.value(m, xs.view(), xps.view()).unwrap_or(f64::NAN)
                                },
                                h2,
                            )
                        } else {
                            // nested fourth-order first differences
                            central_d1(
                                |ti| {
                                    central_d1(
                                        |tj| {
                                            let (xs, xps) = shift_pair(x, x_prime, i, ti);
                                            let (xs, xps) =
                                                shift_pair(xs.view(), xps.view(), j, tj);
                                            self.value(m, xs.view(), xps.view())
                                                .unwrap_or(f64::NAN)
                                        },
                                        h2,
                                    )
                                },
                                h2,
                            )
                        };
                        if !v.is_finite() {
                            return Err(Error::Numerical(
                                "non-finite gauge second partial".into(),
                            ));
                        }
                        h[[i, j]] = v;
                        h[[j, i]] = v;
                    }
                }
                Ok(h)
            }
        }
    }

    /// Connection Hessian matrix on the product chart:
    /// H_ij = d_ij Psi - Gammabar^k_ij d_k Psi, with the product-connection
    /// Christoffel symbols assembled blockwise from the chart.
    pub fn hessian_matrix(
        &self,
        m: &ChartManifold,
        x: ArrayView1<f64>,
        x_prime: ArrayView1<f64>,
    ) -> Result<Array2<f64>> {
        let n = m.dim();
        let mut h = self.second_partials(m, x, x_prime)?;
        let grad = self.gradient(m, x, x_prime)?;
        let gx = m.christoffel_at(x)?;
        let gxp = m.christoffel_at(x_prime)?;
        for i in 0..n {
            for j in 0..n {
                let mut corr_x = 0.0;
                let mut corr_xp = 0.0;
                for k in 0..n {
                    corr_x += gx[[k, i, j]] * grad[k];
                    corr_xp += gxp[[k, i, j]] * grad[n + k];
                }
                h[[i, j]] -= corr_x;
                h[[n + i, n + j]] -= corr_xp;
                // mixed blocks carry no correction: the product connection
                // has no cross Christoffel symbols
            }
        }
        Ok(h)
    }

    /// Quadratic form u^T Hess Psi u for a product tangent direction
    /// u = (u0, u1) of length 2n.
    pub fn hessian_quadratic(
        &self,
        m: &ChartManifold,
        x: ArrayView1<f64>,
        x_prime: ArrayView1<f64>,
        u: ArrayView1<f64>,
    ) -> Result<f64> {
        let h = self.hessian_matrix(m, x, x_prime)?;
        Ok(u.dot(&h.dot(&u)))
    }

    /// Independent route for the same quadratic form: second derivative of
    /// t -> Psi(exp_x(t u0), exp_x'(t u1)) at t = 0, which is the
    /// coordinate-free definition of the connection Hessian along the
    /// product geodesic. The direction is normalized before the stencil
    /// (bilinearity) so the truncation error stays independent of |u|.
    pub fn hessian_geodesic_oracle(
        &self,
        m: &ChartManifold,
        x: ArrayView1<f64>,
        x_prime: ArrayView1<f64>,
        u: ArrayView1<f64>,
    ) -> Result<f64> {
        let n = m.dim();
        let dist = self.check_off_diagonal(m, x, x_prime)?;
        let (_, h2) = self.steps_for(dist.max(1e-6));
        let scale = u.dot(&u).sqrt();
        if scale == 0.0 {
            return Ok(0.0);
        }
        let unit = u.mapv(|c| c / scale);
        let u0 = unit.slice(s![..n]);
        let u1 = unit.slice(s![n..]);
        let val = central_d2(
            |t| {
                let ok = (|| -> Result<f64> {
                    let xs = m.geodesic(x, u0, t)?;
                    let xps = m.geodesic(x_prime, u1, t)?;
                    self.value(m, xs.view(), xps.view())
                })();
                ok.unwrap_or(f64::NAN)
            },
            h2,
        );
        if !val.is_finite() {
            return Err(Error::Numerical(
                "non-finite geodesic Hessian oracle value".into(),
            ));
        }
        Ok(val * scale * scale)
    }

    /// v-coordinate blocks of the connection Hessian. With
    /// w = (z - z', z'), the identity
    /// (z, z')^T Hess Psi (z, z') = w^T [A~ E~; E~^T B~] w holds exactly.
    pub fn hessian_blocks(
        &self,
        m: &ChartManifold,
        x: ArrayView1<f64>,
        x_prime: ArrayView1<f64>,
    ) -> Result<HessianBlocks> {
        let n = m.dim();
        let h = self.hessian_matrix(m, x, x_prime)?;
        let h11 = h.slice(s![..n, ..n]).to_owned();
        let h12 = h.slice(s![..n, n..]).to_owned();
        let h21 = h.slice(s![n.., ..n]).to_owned();
        let h22 = h.slice(s![n.., n..]).to_owned();
        // change of variables v = (x - x', x'): blocks of J^T H J with
        // J = [[I, I], [0, I]]
        let a_tilde = h11.clone();
        let e_tilde = &h11 + &h12;
        let b_tilde = &h11 + &h12 + &h21 + &h22;
        Ok(HessianBlocks {
            a_tilde,
            b_tilde,
            e_tilde,
        })
    }
}

fn shift_pair(
    x: ArrayView1<f64>,
    x_prime: ArrayView1<f64>,
    index: usize,
    t: f64,
) -> (Array1<f64>, Array1<f64>) {
    let n = x.len();
    let mut xs = x.to_owned();
    let mut xps = x_prime.to_owned();
    if index < n {
        xs[index] += t;
    } else {
        xps[index - n] += t;
    }
    (xs, xps)
}

/// v-coordinate blocks of a two-point Hessian.
#[derive(Debug, Clone)]
pub struct HessianBlocks {
    pub a_tilde: Array2<f64>,
    pub b_tilde: Array2<f64>,
    pub e_tilde: Array2<f64>,
}

/// h(t) = sin t / t, continuously extended at 0.
pub fn sinc_ratio(t: f64) -> f64 {
    if t.abs() < 1e-6 {
        1.0 - t * t / 6.0
    } else {
        t.sin() / t
    }
}

/// H(t, beta) = (1 - h(t) cos(t + 2 beta)) / (sin^2 beta + sin^2(t + beta)).
pub fn jacobi_ratio(t: f64, beta: f64) -> f64 {
    let num = 1.0 - sinc_ratio(t) * (t + 2.0 * beta).cos();
    let den = beta.sin().powi(2) + (t + beta).sin().powi(2);
    num / den
}

/// Maximum of beta -> H(2y, beta) over [0, pi - 2y], with its argmax:
/// ((1 + h(2y)) / (1 + cos 2y), pi/2 - y).
pub fn jacobi_ratio_max(y: f64) -> Result<(f64, f64)> {
    if !(0.0 < y && y < FRAC_PI_2) {
        return Err(Error::Domain(format!("y = {y} outside (0, pi/2)")));
    }
    let max = (1.0 + sinc_ratio(2.0 * y)) / (1.0 + (2.0 * y).cos());
    Ok((max, FRAC_PI_2 - y))
}

/// Tangential/orthogonal split of a product direction u = (u0, u1) with
/// respect to the connecting geodesic: at each endpoint the tangential part
/// is the Riemannian projection onto the geodesic velocity.
pub struct SplitComponents {
    pub tangential: (Array1<f64>, Array1<f64>),
    pub orthogonal: (Array1<f64>, Array1<f64>),
}

pub fn split_components(
    m: &ChartManifold,
    x: ArrayView1<f64>,
    x_prime: ArrayView1<f64>,
    u0: ArrayView1<f64>,
    u1: ArrayView1<f64>,
) -> Result<SplitComponents> {
    let v = m.geodesic_connect(x, x_prime)?;
    let speed0 = m.riemannian_norm(x, v.view())?;
    if speed0 == 0.0 {
        return Err(Error::Domain(
            "tangential split undefined for coincident points".into(),
        ));
    }
    let vel1 = m.connecting_end_velocity(x, x_prime)?;
    let speed1 = m.riemannian_norm(x_prime, vel1.view())?;
    let e0 = v.mapv(|c| c / speed0);
    let e1 = vel1.mapv(|c| c / speed1);
    let c0 = m.inner(x, u0, e0.view())?;
    let c1 = m.inner(x_prime, u1, e1.view())?;
    let v0 = e0.mapv(|c| c * c0);
    let v1 = e1.mapv(|c| c * c1);
    let w0 = &u0 - &v0;
    let w1 = &u1 - &v1;
    Ok(SplitComponents {
        tangential: (v0, v1),
        orthogonal: (w0, w1),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ChartDomain;
    use ndarray::array;
    use std::f64::consts::PI;

    fn flat2() -> ChartManifold {
        ChartManifold::flat(
            2,
            ChartDomain::Box {
                lower: array![-4.0, -4.0],
                upper: array![4.0, 4.0],
            },
        )
    }

    #[test]
    fn gauges_vanish_on_diagonal() {
        let m = flat2();
        let x = array![0.3, -0.8];
        for g in [
            GaugeFunction::emery(0.5),
            GaugeFunction::distance_squared(),
        ] {
            assert_eq!(g.value(&m, x.view(), x.view()).unwrap(), 0.0);
        }
        let s = ChartManifold::sphere(1.0);
        let p = array![1.2, 0.4];
        let g = GaugeFunction::sin_power(1.5).unwrap();
        assert!(g.value(&s, p.view(), p.view()).unwrap().abs() < 1e-15);
    }

    #[test]
    fn emery_value_closed_form() {
        // n = 1, eps = 1, x = 1, x' = 0 -> 1/2 (1 + 0) * 1 = 0.5
        let m = ChartManifold::flat(
            1,
            ChartDomain::Box {
                lower: array![-2.0],
                upper: array![2.0],
            },
        );
        let g = GaugeFunction::emery(1.0);
        let v = g.value(&m, array![1.0].view(), array![0.0].view()).unwrap();
        assert!((v - 0.5).abs() < 1e-15);
    }

    #[test]
    fn sin_power_value_closed_form() {
        // K = 1, dist = pi/2 -> sin^{1.5}(pi/4) = 2^{-3/4}
        let s = ChartManifold::sphere(1.0);
        let g = GaugeFunction::sin_power(1.5).unwrap();
        let x = array![FRAC_PI_2, 0.0];
        let xp = array![FRAC_PI_2, FRAC_PI_2];
        let v = g.value(&s, x.view(), xp.view()).unwrap();
        assert!((v - 2f64.powf(-0.75)).abs() < 1e-12, "got {v}");
    }

    #[test]
    fn flat_distance_squared_hessian() {
        let m = flat2();
        let g = GaugeFunction::distance_squared();
        let x = array![0.2, 0.1];
        let xp = array![-0.4, 0.9];
        let z = array![0.7, -0.3];
        let zp = array![0.1, 0.5];
        let u = ndarray::concatenate![ndarray::Axis(0), z, zp];
        let q = g.hessian_quadratic(&m, x.view(), xp.view(), u.view()).unwrap();
        let diff = &z - &zp;
        assert!((q - 2.0 * diff.dot(&diff)).abs() < 1e-12);
    }

    #[test]
    fn diagonal_directions_annihilated_on_diagonal() {
        let m = flat2();
        let x = array![0.4, -0.2];
        let z = array![0.9, 0.3];
        let u = ndarray::concatenate![ndarray::Axis(0), z, z];
        for g in [
            GaugeFunction::emery(0.3),
            GaugeFunction::distance_squared(),
        ] {
            let q = g.hessian_quadratic(&m, x.view(), x.view(), u.view()).unwrap();
            assert!(q.abs() < 1e-12, "{:?}: {q}", g.kind);
        }
    }

    #[test]
    fn sin_power_rejects_diagonal_hessian() {
        let s = ChartManifold::sphere(1.0);
        let g = GaugeFunction::sin_power(1.2).unwrap();
        let x = array![1.3, 0.2];
        let u = Array1::ones(4);
        assert!(matches!(
            g.hessian_quadratic(&s, x.view(), x.view(), u.view()),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn emery_blocks_on_flat_chart() {
        let m = flat2();
        let eps = 0.25;
        let g = GaugeFunction::emery(eps);
        let x = array![0.31, -0.12];
        let xp = array![0.3, -0.1];
        let blocks = g.hessian_blocks(&m, x.view(), xp.view()).unwrap();
        let expect = eps * eps + xp.dot(&xp);
        for i in 0..2 {
            for j in 0..2 {
                let want = if i == j { expect } else { 0.0 };
                assert!((blocks.a_tilde[[i, j]] - want).abs() < 1e-12);
            }
        }
        // E~ = 2 (x - x') x'^T, entries bounded by C * dist
        let diff = &x - &xp;
        for i in 0..2 {
            for j in 0..2 {
                let want = 2.0 * diff[i] * xp[j];
                assert!((blocks.e_tilde[[i, j]] - want).abs() < 1e-12);
            }
        }
        // B~ vanishes on the diagonal
        let blocks_diag = g.hessian_blocks(&m, x.view(), x.view()).unwrap();
        assert!(blocks_diag.b_tilde.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn jacobi_max_closed_form() {
        // y = pi/4: max = 1 + 2/pi at beta = pi/4
        let (max, argmax) = jacobi_ratio_max(PI / 4.0).unwrap();
        assert!((max - (1.0 + 2.0 / PI)).abs() < 1e-14);
        assert!((argmax - PI / 4.0).abs() < 1e-14);
        // y -> 0+: max -> 1
        let (max0, _) = jacobi_ratio_max(1e-5).unwrap();
        assert!((max0 - 1.0).abs() < 1e-8);
        assert!(jacobi_ratio_max(0.0).is_err());
        assert!(jacobi_ratio_max(FRAC_PI_2).is_err());
    }

    #[test]
    fn jacobi_partial_sign_matches_sine() {
        // sign of dH/dbeta equals sign of sin(t + 2 beta)
        for ti in 1..15 {
            let t = 0.2 * ti as f64;
            if t >= PI {
                break;
            }
            for bi in 0..20 {
                let beta = (PI - t) * (bi as f64 + 0.5) / 20.0;
                let dh = central_d1(|e| jacobi_ratio(t, beta + e), 1e-5);
                let sgn = (t + 2.0 * beta).sin();
                if sgn.abs() > 0.05 && dh.abs() > 1e-9 {
                    assert!(
                        dh.signum() == sgn.signum(),
                        "t={t} beta={beta} dh={dh} sin={sgn}"
                    );
                }
            }
        }
    }

    #[test]
    fn split_respects_orthogonality() {
        let s = ChartManifold::sphere(1.0);
        let x = array![1.5, 0.1];
        let xp = array![1.2, 0.8];
        let u0 = array![0.3, -0.5];
        let u1 = array![-0.2, 0.4];
        let sp = split_components(&s, x.view(), xp.view(), u0.view(), u1.view()).unwrap();
        // u = v + w at each endpoint
        assert!((&sp.tangential.0 + &sp.orthogonal.0 - &u0).mapv(f64::abs).sum() < 1e-12);
        assert!((&sp.tangential.1 + &sp.orthogonal.1 - &u1).mapv(f64::abs).sum() < 1e-12);
        // |u|^2 = |v|^2 + |w|^2 in the Riemannian product
        let n2 = |p: ArrayView1<f64>, v: &Array1<f64>| {
            s.riemannian_norm(p, v.view()).unwrap().powi(2)
        };
        let lhs = n2(x.view(), &u0.to_owned()) + n2(xp.view(), &u1.to_owned());
        let rhs = n2(x.view(), &sp.tangential.0)
            + n2(xp.view(), &sp.tangential.1)
            + n2(x.view(), &sp.orthogonal.0)
            + n2(xp.view(), &sp.orthogonal.1);
        assert!((lhs - rhs).abs() < 1e-10);
        // parallel input has no orthogonal part
        let v = s.geodesic_connect(x.view(), xp.view()).unwrap();
        let sp2 = split_components(&s, x.view(), xp.view(), v.view(), u1.view()).unwrap();
        assert!(sp2.orthogonal.0.mapv(f64::abs).sum() < 1e-9);
        // orthogonal input has no tangential part
        let g = s.metric_at(x.view()).unwrap();
        let gv = g.dot(&v);
        let w = array![-gv[1], gv[0]]; // Euclidean-orthogonal to g v => g-orthogonal to v
        let sp3 = split_components(&s, x.view(), xp.view(), w.view(), u1.view()).unwrap();
        assert!(sp3.tangential.0.mapv(f64::abs).sum() < 1e-9);
    }
}
