//! Euler-Maruyama simulation of the driving diffusion and its Brownian
//! motion on a shared time grid.
//!
//! Noise is drawn from per-path ChaCha streams keyed by (seed, path index),
//! so ensembles are bit-reproducible, independent of worker count, and
//! adding paths never re-randomizes existing ones.

use crate::error::{Error, Result};
use crate::numerics::{mean_and_se, standard_normal};
use ndarray::{Array1, Array2, Array3, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use std::sync::Arc;

pub type VectorField = Arc<dyn Fn(ArrayView1<f64>) -> Array1<f64> + Send + Sync>;
pub type MatrixField = Arc<dyn Fn(ArrayView1<f64>) -> Array2<f64> + Send + Sync>;

/// Coefficients and start point of the driving diffusion
/// dB = b(B) dt + sigma(B) dW.
#[derive(Clone)]
pub struct DiffusionSpec {
    pub dim_d: usize,
    pub dim_w: usize,
    pub drift_b: VectorField,
    pub vol_sigma: MatrixField,
    pub start_y: Array1<f64>,
}

impl std::fmt::Debug for DiffusionSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DiffusionSpec")
            .field("dim_d", &self.dim_d)
            .field("dim_w", &self.dim_w)
            .field("start_y", &self.start_y)
            .finish()
    }
}

impl DiffusionSpec {
    /// Standard Brownian motion: b = 0, sigma = identity.
    pub fn brownian(dim: usize, start: Array1<f64>) -> Self {
        assert_eq!(start.len(), dim);
        DiffusionSpec {
            dim_d: dim,
            dim_w: dim,
            drift_b: Arc::new(move |x| Array1::zeros(x.len())),
            vol_sigma: Arc::new(move |x| Array2::eye(x.len())),
            start_y: start,
        }
    }

    pub fn new(
        dim_d: usize,
        dim_w: usize,
        drift_b: VectorField,
        vol_sigma: MatrixField,
        start_y: Array1<f64>,
    ) -> Self {
        assert_eq!(start_y.len(), dim_d);
        DiffusionSpec {
            dim_d,
            dim_w,
            drift_b,
            vol_sigma,
            start_y,
        }
    }
}

/// Discrete-time ensemble: `paths[p][i]` is the state of path `p` at grid
/// node `i`; `increments[p][i]` the noise increment used on step `i`.
#[derive(Debug, Clone)]
pub struct PathEnsemble {
    pub grid: Vec<f64>,
    /// P x (N+1) x dim
    pub paths: Array3<f64>,
    /// P x N x dim_w
    pub increments: Array3<f64>,
}

impl PathEnsemble {
    pub fn path_count(&self) -> usize {
        self.paths.shape()[0]
    }

    pub fn step_count(&self) -> usize {
        self.grid.len() - 1
    }

    pub fn dim(&self) -> usize {
        self.paths.shape()[2]
    }
}

/// Uniform grid 0 = t_0 < ... < t_N = horizon.
pub fn uniform_grid(horizon: f64, steps: usize) -> Vec<f64> {
    assert!(horizon > 0.0 && steps > 0);
    (0..=steps)
        .map(|i| horizon * i as f64 / steps as f64)
        .collect()
}

fn validate_grid(grid: &[f64]) -> Result<()> {
    if grid.len() < 2 {
        return Err(Error::Domain("grid needs at least two nodes".into()));
    }
    if grid[0] != 0.0 {
        return Err(Error::Domain("grid must start at 0".into()));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Domain("grid must be strictly increasing".into()));
    }
    Ok(())
}

/// RNG for one path, derived from the ensemble seed and the path index.
pub fn path_rng(seed: u64, path: usize) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(path as u64 + 1);
    rng
}

/// Simulate the diffusion and its driving Brownian motion on the grid.
/// Fully deterministic given (spec, grid, paths, seed).
pub fn simulate_diffusion(
    spec: &DiffusionSpec,
    grid: &[f64],
    paths: usize,
    seed: u64,
) -> Result<(PathEnsemble, PathEnsemble)> {
    if paths == 0 {
        return Err(Error::Domain("need at least one path".into()));
    }
    validate_grid(grid)?;
    let n = grid.len() - 1;
    let (d, dw) = (spec.dim_d, spec.dim_w);

    let rows: Vec<Result<(Array2<f64>, Array2<f64>, Array2<f64>)>> = (0..paths)
        .into_par_iter()
        .map(|p| simulate_single_path(spec, grid, seed, p))
        .collect();

    let mut b_paths = Array3::zeros((paths, n + 1, d));
    let mut w_paths = Array3::zeros((paths, n + 1, dw));
    let mut dw_arr = Array3::zeros((paths, n, dw));
    for (p, row) in rows.into_iter().enumerate() {
        let (bp, wp, inc) = row?;
        b_paths.index_axis_mut(ndarray::Axis(0), p).assign(&bp);
        w_paths.index_axis_mut(ndarray::Axis(0), p).assign(&wp);
        dw_arr.index_axis_mut(ndarray::Axis(0), p).assign(&inc);
    }
    let b = PathEnsemble {
        grid: grid.to_vec(),
        paths: b_paths,
        increments: dw_arr.clone(),
    };
    let w = PathEnsemble {
        grid: grid.to_vec(),
        paths: w_paths,
        increments: dw_arr,
    };
    Ok((b, w))
}

#[allow(clippy::type_complexity)]
fn simulate_single_path(
    spec: &DiffusionSpec,
    grid: &[f64],
    seed: u64,
    path: usize,
) -> Result<(Array2<f64>, Array2<f64>, Array2<f64>)> {
    let n = grid.len() - 1;
    let (d, dw) = (spec.dim_d, spec.dim_w);
    let mut rng = path_rng(seed, path);
    let mut b = Array2::zeros((n + 1, d));
    let mut w = Array2::zeros((n + 1, dw));
    let mut inc = Array2::zeros((n, dw));
    b.row_mut(0).assign(&spec.start_y);
    let mut state = spec.start_y.clone();
    for i in 0..n {
        let dt = grid[i + 1] - grid[i];
        let sq = dt.sqrt();
        let dwi = Array1::from_iter((0..dw).map(|_| sq * standard_normal(&mut rng)));
        let drift = (spec.drift_b)(state.view());
        let vol = (spec.vol_sigma)(state.view());
        if drift.len() != d || vol.shape() != [d, dw] {
            return Err(Error::Domain(
                "diffusion coefficient shapes do not match (dim_d, dim_w)".into(),
            ));
        }
        let next = &state + &drift.mapv(|c| c * dt) + &vol.dot(&dwi);
        if next.iter().any(|c| !c.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite diffusion state on path {path}, step {i}"
            )));
        }
        for j in 0..dw {
            inc[[i, j]] = dwi[j];
            w[[i + 1, j]] = w[[i, j]] + dwi[j];
        }
        state = next;
        b.row_mut(i + 1).assign(&state);
    }
    Ok((b, w, inc))
}

/// First grid index at which each path leaves the domain described by
/// `inside` (index 0 if the start is already outside, N if it never exits).
pub fn hitting_time<F: Fn(ArrayView1<f64>) -> bool + Sync>(
    ensemble: &PathEnsemble,
    inside: F,
) -> Vec<usize> {
    let n = ensemble.step_count();
    (0..ensemble.path_count())
        .map(|p| {
            for i in 0..=n {
                if !inside(ensemble.paths.slice(ndarray::s![p, i, ..])) {
                    return i;
                }
            }
            n
        })
        .collect()
}

/// Streaming variant for large path counts: simulates each path only until
/// it exits (or the grid ends) without materializing the ensemble. Uses the
/// same per-path streams as `simulate_diffusion`, so on any common
/// configuration the indices agree with `hitting_time` on the materialized
/// ensemble.
pub fn streaming_hitting_times<F: Fn(ArrayView1<f64>) -> bool + Sync>(
    spec: &DiffusionSpec,
    grid: &[f64],
    paths: usize,
    seed: u64,
    inside: F,
) -> Result<Vec<usize>> {
    validate_grid(grid)?;
    let n = grid.len() - 1;
    let dw = spec.dim_w;
    (0..paths)
        .into_par_iter()
        .map(|p| -> Result<usize> {
            let mut rng = path_rng(seed, p);
            let mut state = spec.start_y.clone();
            if !inside(state.view()) {
                return Ok(0);
            }
            for i in 0..n {
                let dt = grid[i + 1] - grid[i];
                let sq = dt.sqrt();
                let dwi = Array1::from_iter((0..dw).map(|_| sq * standard_normal(&mut rng)));
                let drift = (spec.drift_b)(state.view());
                let vol = (spec.vol_sigma)(state.view());
                state = &state + &drift.mapv(|c| c * dt) + &vol.dot(&dwi);
                if !state.iter().all(|c| c.is_finite()) {
                    return Err(Error::Numerical(format!(
                        "non-finite diffusion state on path {p}, step {i}"
                    )));
                }
                if !inside(state.view()) {
                    return Ok(i + 1);
                }
            }
            Ok(n)
        })
        .collect()
}

/// Monte-Carlo estimate of E[exp(xi * value)].
#[derive(Debug, Clone)]
pub struct ExpMomentEstimate {
    pub mean: f64,
    pub standard_error: f64,
    pub overflowed: bool,
}

pub fn exp_moment(values: &[f64], xi: f64) -> Result<ExpMomentEstimate> {
    if xi < 0.0 {
        return Err(Error::Domain("exp_moment needs xi >= 0".into()));
    }
    let exps: Vec<f64> = values.iter().map(|v| (xi * v).exp()).collect();
    if exps.iter().any(|e| !e.is_finite()) {
        return Ok(ExpMomentEstimate {
            mean: f64::INFINITY,
            standard_error: f64::INFINITY,
            overflowed: true,
        });
    }
    let (mean, se) = mean_and_se(&exps);
    Ok(ExpMomentEstimate {
        mean,
        standard_error: se,
        overflowed: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::sample_variance;
    use ndarray::array;

    fn constant_drift_spec(c: f64) -> DiffusionSpec {
        DiffusionSpec::new(
            1,
            1,
            Arc::new(move |_| array![c]),
            Arc::new(|_| Array2::zeros((1, 1))),
            array![0.0],
        )
    }

    #[test]
    fn zero_coefficients_stay_put() {
        let spec = DiffusionSpec::new(
            2,
            2,
            Arc::new(|x: ArrayView1<f64>| Array1::zeros(x.len())),
            Arc::new(|_| Array2::zeros((2, 2))),
            array![0.5, -1.0],
        );
        let (b, _) = simulate_diffusion(&spec, &uniform_grid(1.0, 10), 3, 1).unwrap();
        for p in 0..3 {
            for i in 0..=10 {
                assert_eq!(b.paths[[p, i, 0]], 0.5);
                assert_eq!(b.paths[[p, i, 1]], -1.0);
            }
        }
    }

    #[test]
    fn constant_drift_is_exact() {
        let (b, _) = simulate_diffusion(&constant_drift_spec(1.0), &uniform_grid(1.0, 7), 2, 3)
            .unwrap();
        for p in 0..2 {
            assert!((b.paths[[p, 7, 0]] - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn brownian_terminal_variance() {
        let spec = DiffusionSpec::brownian(1, array![0.0]);
        let grid = uniform_grid(1.0, 16);
        let (b, _) = simulate_diffusion(&spec, &grid, 100_000, 42).unwrap();
        let terminals: Vec<f64> = (0..100_000).map(|p| b.paths[[p, 16, 0]]).collect();
        let var = sample_variance(&terminals);
        // Var of the sample variance of N(0,1)^2-ish: se ~ sqrt(2/P)
        let se = (2.0 / 100_000.0f64).sqrt();
        assert!((var - 1.0).abs() < 3.0 * se, "var = {var}");
    }

    #[test]
    fn seed_determinism_is_bitwise() {
        let spec = DiffusionSpec::brownian(2, array![0.0, 0.0]);
        let grid = uniform_grid(1.0, 20);
        let (b1, w1) = simulate_diffusion(&spec, &grid, 50, 9).unwrap();
        let (b2, w2) = simulate_diffusion(&spec, &grid, 50, 9).unwrap();
        assert_eq!(b1.paths, b2.paths);
        assert_eq!(w1.increments, w2.increments);
        // prefix stability: more paths never change existing ones
        let (b3, _) = simulate_diffusion(&spec, &grid, 80, 9).unwrap();
        assert_eq!(
            b1.paths.index_axis(ndarray::Axis(0), 17),
            b3.paths.index_axis(ndarray::Axis(0), 17)
        );
    }

    #[test]
    fn increment_moments_look_gaussian() {
        let spec = DiffusionSpec::brownian(1, array![0.0]);
        let grid = uniform_grid(1.0, 4);
        let (_, w) = simulate_diffusion(&spec, &grid, 20_000, 5).unwrap();
        let dt = 0.25;
        let incs: Vec<f64> = w.increments.iter().copied().collect();
        let (mean, se) = mean_and_se(&incs);
        assert!(mean.abs() < 4.0 * se, "mean {mean} vs se {se}");
        let var = sample_variance(&incs);
        let var_se = dt * (2.0 / incs.len() as f64).sqrt();
        assert!((var - dt).abs() < 4.0 * var_se, "var {var}");
    }

    #[test]
    fn richardson_ratio_for_weak_error() {
        // linear drift: dX = -X dt + dW from 1; E[f(X_T)] bias is O(dt).
        // All three levels consume the same fine increments, so the level
        // differences are dominated by the bias rather than by noise.
        let spec = DiffusionSpec::brownian(1, array![1.0]);
        let paths = 40_000;
        let fine_steps = 32usize;
        let grid = uniform_grid(1.0, fine_steps);
        let (_, w) = simulate_diffusion(&spec, &grid, paths, 1234).unwrap();
        let phi = |v: f64| v * v;
        let mut means = Vec::new();
        for &steps in &[8usize, 16, 32] {
            let win = fine_steps / steps;
            let h = 1.0 / steps as f64;
            let mut acc = 0.0;
            for p in 0..paths {
                let mut x = 1.0f64;
                for k in 0..steps {
                    let dw: f64 =
                        (0..win).map(|j| w.increments[[p, k * win + j, 0]]).sum();
                    x = x - x * h + dw;
                }
                acc += phi(x);
            }
            means.push(acc / paths as f64);
        }
        let ratio = (means[0] - means[1]) / (means[1] - means[2]);
        assert!(
            (1.5..=3.0).contains(&ratio),
            "Richardson ratio {ratio} outside [1.5, 3]"
        );
    }

    #[test]
    fn hitting_basics() {
        let spec = constant_drift_spec(0.0);
        let grid = uniform_grid(1.0, 5);
        let (b, _) = simulate_diffusion(&spec, &grid, 2, 0).unwrap();
        // start inside, never exits (deterministic constant path)
        let idx = hitting_time(&b, |x| x[0].abs() < 1.0);
        assert_eq!(idx, vec![5, 5]);
        // start outside
        let idx0 = hitting_time(&b, |x| x[0] > 0.5);
        assert_eq!(idx0, vec![0, 0]);
    }

    #[test]
    fn streaming_hitting_matches_dense() {
        let spec = DiffusionSpec::brownian(1, array![0.0]);
        let grid = uniform_grid(2.0, 400);
        let (b, _) = simulate_diffusion(&spec, &grid, 200, 77).unwrap();
        let dense = hitting_time(&b, |x| x[0].abs() < 0.5);
        let streamed =
            streaming_hitting_times(&spec, &grid, 200, 77, |x| x[0].abs() < 0.5).unwrap();
        assert_eq!(dense, streamed);
    }

    #[test]
    fn unit_interval_mean_exit_time() {
        // E[tau] = 1 - x^2 = 1 for BM from 0 on (-1, 1)
        let spec = DiffusionSpec::brownian(1, array![0.0]);
        let steps = 10_000;
        let grid = uniform_grid(10.0, steps);
        let paths = 100_000;
        let idx =
            streaming_hitting_times(&spec, &grid, paths, 2024, |x| x[0].abs() < 1.0).unwrap();
        let dt = 10.0 / steps as f64;
        let mean: f64 = idx.iter().map(|i| *i as f64 * dt).sum::<f64>() / paths as f64;
        assert!((mean - 1.0).abs() < 0.05, "mean exit time {mean}");
    }

    #[test]
    fn exp_moment_cases() {
        let est = exp_moment(&[1.0, 2.0, 3.0], 0.0).unwrap();
        assert_eq!(est.mean, 1.0);
        assert!(!est.overflowed);
        let det = exp_moment(&[2.0, 2.0, 2.0], 0.5).unwrap();
        assert!((det.mean - 1.0f64.exp()).abs() < 1e-12);
        let blow = exp_moment(&[1000.0], 10.0).unwrap();
        assert!(blow.overflowed);
        assert!(exp_moment(&[1.0], -1.0).is_err());
    }

    #[test]
    fn exit_time_exp_moment_is_finite_and_stable() {
        // finiteness of E[e^{xi tau}] for xi = 0.5 < pi^2/8
        let spec = DiffusionSpec::brownian(1, array![0.0]);
        let grid = uniform_grid(20.0, 4000);
        let dt = 20.0 / 4000.0;
        let tau = |paths: usize| -> Vec<f64> {
            streaming_hitting_times(&spec, &grid, paths, 500, |x| x[0].abs() < 1.0)
                .unwrap()
                .iter()
                .map(|i| *i as f64 * dt)
                .collect()
        };
        let e1 = exp_moment(&tau(20_000), 0.5).unwrap();
        let e2 = exp_moment(&tau(40_000), 0.5).unwrap();
        assert!(!e1.overflowed && !e2.overflowed);
        assert!((e1.mean - e2.mean).abs() < 3.0 * (e1.standard_error + e2.standard_error));
    }
}
