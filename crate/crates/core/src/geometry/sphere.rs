//! Closed forms for the round sphere in spherical coordinates, plus the
//! embedded-3-vector representation used for cross checks.
//!
//! Chart coordinates are (theta, phi) with theta the polar angle; the chart
//! excludes caps around both poles where the coordinates degenerate.

use ndarray::{array, Array1, Array2, ArrayView1};

/// Embed a chart point of the radius-`r` sphere into R^3.
pub fn embed(r: f64, x: ArrayView1<f64>) -> Array1<f64> {
    let (theta, phi) = (x[0], x[1]);
    array![
        r * theta.sin() * phi.cos(),
        r * theta.sin() * phi.sin(),
        r * theta.cos()
    ]
}

/// Chart coordinates of an embedded point (phi in (-pi, pi]).
pub fn chart_of(r: f64, p: ArrayView1<f64>) -> Array1<f64> {
    let theta = (p[2] / r).clamp(-1.0, 1.0).acos();
    let phi = p[1].atan2(p[0]);
    array![theta, phi]
}

/// Jacobian of the embedding: columns are d(embed)/d(theta), d(embed)/d(phi).
pub fn embedding_jacobian(r: f64, x: ArrayView1<f64>) -> Array2<f64> {
    let (theta, phi) = (x[0], x[1]);
    let (st, ct) = (theta.sin(), theta.cos());
    let (sp, cp) = (phi.sin(), phi.cos());
    array![
        [r * ct * cp, -r * st * sp],
        [r * ct * sp, r * st * cp],
        [-r * st, 0.0]
    ]
}

/// Push a chart tangent vector forward to the embedded tangent space.
pub fn push_forward(r: f64, x: ArrayView1<f64>, v: ArrayView1<f64>) -> Array1<f64> {
    embedding_jacobian(r, x).dot(&v)
}

/// Pull an embedded tangent vector back to chart components. The embedding
/// Jacobian has orthogonal columns with Gram matrix diag(r^2, r^2 sin^2),
/// so the pullback is explicit.
pub fn pull_back(r: f64, x: ArrayView1<f64>, w: ArrayView1<f64>) -> Array1<f64> {
    let j = embedding_jacobian(r, x);
    let jt_w = j.t().dot(&w);
    let st = x[0].sin();
    array![jt_w[0] / (r * r), jt_w[1] / (r * r * st * st)]
}

/// Geodesic distance on the radius-`r` sphere. Uses the chord length, which
/// stays accurate for nearly equal and nearly antipodal points.
pub fn distance(r: f64, x: ArrayView1<f64>, y: ArrayView1<f64>) -> f64 {
    let p = embed(r, x);
    let q = embed(r, y);
    let chord = (&p - &q).mapv(|t| t * t).sum().sqrt();
    2.0 * r * ((chord / (2.0 * r)).clamp(-1.0, 1.0)).asin()
}

/// Embedded great-circle exponential: the time-1 geodesic point from
/// embedded `p` with embedded tangent `v`.
pub fn exp_embedded(r: f64, p: ArrayView1<f64>, v: ArrayView1<f64>) -> Array1<f64> {
    let speed = v.mapv(|t| t * t).sum().sqrt();
    if speed == 0.0 {
        return p.to_owned();
    }
    let ang = speed / r;
    let dir = v.mapv(|t| t / speed);
    p.mapv(|t| t * ang.cos()) + dir.mapv(|t| t * r * ang.sin())
}

/// Embedded logarithm: initial velocity of the unit-time geodesic from `p`
/// to `q`. Returns `None` when the points are antipodal.
pub fn log_embedded(r: f64, p: ArrayView1<f64>, q: ArrayView1<f64>) -> Option<Array1<f64>> {
    let cosang = (p.dot(&q) / (r * r)).clamp(-1.0, 1.0);
    let u = q.to_owned() - p.mapv(|t| t * cosang);
    let un = u.mapv(|t| t * t).sum().sqrt();
    let dist = {
        let chord = (&q - &p).mapv(|t| t * t).sum().sqrt();
        2.0 * r * ((chord / (2.0 * r)).clamp(-1.0, 1.0)).asin()
    };
    if un < 1e-14 * r {
        if dist < 1e-12 * r {
            return Some(Array1::zeros(3));
        }
        return None; // antipodal
    }
    Some(u.mapv(|t| t * dist / un))
}

/// Parallel transport of embedded tangent `w` along the minimizing geodesic
/// from `p` to `q`: the component along the geodesic direction rotates with
/// it, the binormal component is unchanged.
pub fn transport_embedded(
    r: f64,
    p: ArrayView1<f64>,
    q: ArrayView1<f64>,
    w: ArrayView1<f64>,
) -> Option<Array1<f64>> {
    let v = log_embedded(r, p, q)?;
    let speed = v.mapv(|t| t * t).sum().sqrt();
    if speed < 1e-14 * r {
        return Some(w.to_owned());
    }
    let ang = speed / r;
    let e1 = v.mapv(|t| t / speed);
    // unit tangent at q of the same geodesic
    let e1_dst = e1.mapv(|t| t * ang.cos()) - p.mapv(|t| t * ang.sin() / r);
    let a = w.dot(&e1);
    let b_vec = w.to_owned() - e1.mapv(|t| t * a);
    Some(e1_dst.mapv(|t| t * a) + b_vec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embed_round_trip() {
        let x = array![1.1, 0.7];
        let back = chart_of(2.0, embed(2.0, x.view()).view());
        assert!((back[0] - 1.1).abs() < 1e-12 && (back[1] - 0.7).abs() < 1e-12);
    }

    #[test]
    fn quarter_circle_distance() {
        let a = array![std::f64::consts::FRAC_PI_2, 0.0];
        let b = array![std::f64::consts::FRAC_PI_2, std::f64::consts::FRAC_PI_2];
        assert!((distance(1.0, a.view(), b.view()) - std::f64::consts::FRAC_PI_2).abs() < 1e-14);
    }

    #[test]
    fn log_exp_consistency() {
        let p = embed(1.0, array![1.2, 0.3].view());
        let q = embed(1.0, array![0.9, 1.1].view());
        let v = log_embedded(1.0, p.view(), q.view()).unwrap();
        let q2 = exp_embedded(1.0, p.view(), v.view());
        assert!((&q2 - &q).mapv(f64::abs).sum() < 1e-12);
    }

    #[test]
    fn antipodal_log_is_none() {
        let p = array![1.0, 0.0, 0.0];
        let q = array![-1.0, 0.0, 0.0];
        assert!(log_embedded(1.0, p.view(), q.view()).is_none());
    }
}
