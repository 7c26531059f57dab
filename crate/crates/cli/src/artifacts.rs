//! Artifact writers: CSV with fixed 17-significant-digit floats, content
//! hashes, and the run manifest.

use manifold_bsde::bsde::BsdeSolution;
use manifold_bsde::report::EstimateReport;
use manifold_bsde::sde::PathEnsemble;
use ndarray::s;
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::fs;
use std::path::{Path, PathBuf};

pub fn fmt(x: f64) -> String {
    EstimateReport::fmt_f64(x)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Collects artifacts in memory so the manifest can hash them before
/// anything touches the filesystem.
pub struct ArtifactSet {
    out_dir: PathBuf,
    files: Vec<(String, Vec<u8>)>,
}

#[derive(Debug, Serialize)]
pub struct ManifestEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: usize,
}

#[derive(Debug, Serialize)]
pub struct CheckEntry {
    pub name: String,
    pub pass: bool,
    pub value: f64,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub package: String,
    pub version: String,
    pub config_sha256: String,
    pub seed: u64,
    pub workers: usize,
    pub outputs: Vec<ManifestEntry>,
    pub checks: Vec<CheckEntry>,
    pub warnings: Vec<String>,
    pub pass: bool,
}

impl ArtifactSet {
    pub fn new(out_dir: &Path) -> Self {
        ArtifactSet {
            out_dir: out_dir.to_path_buf(),
            files: Vec::new(),
        }
    }

    pub fn add(&mut self, name: &str, bytes: Vec<u8>) {
        self.files.push((name.to_string(), bytes));
    }

    pub fn add_json<T: Serialize>(&mut self, name: &str, value: &T) -> anyhow::Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.add(name, text.into_bytes());
        Ok(())
    }

    /// Write everything plus the manifest; returns the manifest.
    pub fn finalize(
        self,
        subcommand: &str,
        config_sha256: &str,
        seed: u64,
        workers: usize,
        checks: Vec<CheckEntry>,
        warnings: Vec<String>,
    ) -> anyhow::Result<RunManifest> {
        fs::create_dir_all(&self.out_dir)?;
        let mut outputs = Vec::new();
        for (name, bytes) in &self.files {
            let path = self.out_dir.join(name);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent)?;
            }
            fs::write(&path, bytes)?;
            outputs.push(ManifestEntry {
                path: name.clone(),
                sha256: sha256_hex(bytes),
                bytes: bytes.len(),
            });
        }
        let pass = checks.iter().all(|c| c.pass);
        let manifest = RunManifest {
            subcommand: subcommand.to_string(),
            package: "manifold-bsde".to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_sha256: config_sha256.to_string(),
            seed,
            workers,
            outputs,
            checks,
            warnings,
            pass,
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        fs::write(self.out_dir.join("run-manifest.json"), text)?;
        Ok(manifest)
    }
}

/// CSV rows "path,step,time,c0,c1,..." for an ensemble.
pub fn ensemble_csv(ens: &PathEnsemble, stride: usize, max_paths: usize) -> Vec<u8> {
    let dim = ens.dim();
    let mut out = String::from("path,step,time");
    for c in 0..dim {
        out.push_str(&format!(",c{c}"));
    }
    out.push('\n');
    let paths = ens.path_count().min(max_paths);
    for p in 0..paths {
        for i in (0..ens.grid.len()).step_by(stride.max(1)) {
            out.push_str(&format!("{p},{i},{}", fmt(ens.grid[i])));
            for c in 0..dim {
                out.push(',');
                out.push_str(&fmt(ens.paths[[p, i, c]]));
            }
            out.push('\n');
        }
    }
    out.into_bytes()
}

/// CSV rows "path,step,time,x...,z..." for a solution.
pub fn solution_csv(sol: &BsdeSolution, stride: usize, max_paths: usize) -> Vec<u8> {
    let n = sol.state_dim();
    let dw = sol.noise_dim();
    let steps = sol.grid.len() - 1;
    let mut out = String::from("path,step,time");
    for c in 0..n {
        out.push_str(&format!(",x{c}"));
    }
    for j in 0..n {
        for k in 0..dw {
            out.push_str(&format!(",z{j}{k}"));
        }
    }
    out.push('\n');
    let paths = sol.path_count().min(max_paths);
    for p in 0..paths {
        for i in (0..=steps).step_by(stride.max(1)) {
            out.push_str(&format!("{p},{i},{}", fmt(sol.grid[i])));
            for c in 0..n {
                out.push(',');
                out.push_str(&fmt(sol.x[[p, i, c]]));
            }
            for j in 0..n {
                for k in 0..dw {
                    out.push(',');
                    if i < steps {
                        out.push_str(&fmt(sol.z[[p, i, j, k]]));
                    } else {
                        out.push_str(&fmt(0.0));
                    }
                }
            }
            out.push('\n');
        }
    }
    out.into_bytes()
}

pub fn estimates_csv(reports: &[EstimateReport]) -> Vec<u8> {
    let mut out = String::from(EstimateReport::csv_header());
    out.push('\n');
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out.into_bytes()
}

/// CSV for a field estimate: coordinates, values, errors, truncation.
pub fn field_csv(est: &manifold_bsde::dirichlet::FieldEstimate) -> Vec<u8> {
    let d = est.query_points.first().map(|q| q.len()).unwrap_or(0);
    let n = est.values.ncols();
    let mut out = String::new();
    for c in 0..d {
        out.push_str(&format!("x{c},"));
    }
    for c in 0..n {
        out.push_str(&format!("value{c},"));
    }
    for c in 0..n {
        out.push_str(&format!("std_error{c},"));
    }
    out.push_str("truncation_mass\n");
    for (q, point) in est.query_points.iter().enumerate() {
        for c in 0..d {
            out.push_str(&fmt(point[c]));
            out.push(',');
        }
        for c in 0..n {
            out.push_str(&fmt(est.values[[q, c]]));
            out.push(',');
        }
        for c in 0..n {
            out.push_str(&fmt(est.std_errors[[q, c]]));
            out.push(',');
        }
        out.push_str(&fmt(est.truncation_mass[q]));
        out.push('\n');
    }
    out.into_bytes()
}

/// Chart-path CSV for the demo ensembles.
pub fn chart_paths_csv(
    grid: &[f64],
    x: &ndarray::Array3<f64>,
    stride: usize,
    max_paths: usize,
) -> Vec<u8> {
    let dim = x.shape()[2];
    let mut out = String::from("path,step,time");
    for c in 0..dim {
        out.push_str(&format!(",c{c}"));
    }
    out.push('\n');
    for p in 0..x.shape()[0].min(max_paths) {
        for i in (0..grid.len()).step_by(stride.max(1)) {
            out.push_str(&format!("{p},{i},{}", fmt(grid[i])));
            for c in 0..dim {
                out.push(',');
                out.push_str(&fmt(x.slice(s![p, i, ..])[c]));
            }
            out.push('\n');
        }
    }
    out.into_bytes()
}
