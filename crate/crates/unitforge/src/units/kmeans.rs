//! Seeded k-means with k-means++ initialization and Lloyd iterations.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::UnitsError;
use crate::corpus::{FeatureSeq, FrameLabels};

/// Fitted centroids plus the per-iteration objective trace from training.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeansModel {
    k: usize,
    dim: usize,
    centroids: Vec<f64>,
    pub objective_trace: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct KMeansManifest {
    k: usize,
    dim: usize,
    centroids_file: String,
    objective_trace: Vec<f64>,
}

impl KMeansModel {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn centroid(&self, i: usize) -> &[f64] {
        &self.centroids[i * self.dim..(i + 1) * self.dim]
    }

    /// Nearest centroid id; ties break to the lowest id.
    pub fn nearest(&self, point: &[f64]) -> usize {
        debug_assert_eq!(point.len(), self.dim);
        let mut best = 0;
        let mut best_d = sq_dist(point, self.centroid(0));
        for i in 1..self.k {
            let d = sq_dist(point, self.centroid(i));
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }

    /// JSON manifest plus a raw little-endian f64 centroid blob.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<(), UnitsError> {
        fs::create_dir_all(dir)?;
        let blob = format!("{stem}.centroids.bin");
        let mut w = BufWriter::new(fs::File::create(dir.join(&blob))?);
        for v in &self.centroids {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        let manifest = KMeansManifest {
            k: self.k,
            dim: self.dim,
            centroids_file: blob,
            objective_trace: self.objective_trace.clone(),
        };
        let json =
            serde_json::to_string_pretty(&manifest).map_err(|e| UnitsError::Serde(e.to_string()))?;
        fs::write(dir.join(format!("{stem}.json")), json + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self, UnitsError> {
        let raw = fs::read_to_string(dir.join(format!("{stem}.json")))?;
        let manifest: KMeansManifest =
            serde_json::from_str(&raw).map_err(|e| UnitsError::Serde(e.to_string()))?;
        let mut r = BufReader::new(fs::File::open(dir.join(&manifest.centroids_file))?);
        let mut centroids = Vec::with_capacity(manifest.k * manifest.dim);
        let mut buf = [0u8; 8];
        for _ in 0..manifest.k * manifest.dim {
            r.read_exact(&mut buf)?;
            centroids.push(f64::from_le_bytes(buf));
        }
        Ok(Self {
            k: manifest.k,
            dim: manifest.dim,
            centroids,
            objective_trace: manifest.objective_trace,
        })
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum()
}

/// Number of independent k-means++ restarts per fit; the run with the best
/// final objective wins. Restart seeds derive deterministically from `seed`.
const KMEANS_RESTARTS: u64 = 4;

/// Fit k-means on `n = points.len() / dim` row-major points.
///
/// Runs a few seeded k-means++ restarts of Lloyd's algorithm and keeps the
/// one with the lowest objective. Each restart iterates until the objective
/// improves by at most `tol`, assignments stabilize, or `max_iters` is hit.
/// Empty clusters are reseeded to the point farthest from its centroid.
pub fn kmeans_fit(
    points: &[f64],
    dim: usize,
    k: usize,
    seed: u64,
    max_iters: usize,
    tol: f64,
) -> Result<KMeansModel, UnitsError> {
    let mut best: Option<KMeansModel> = None;
    for r in 0..KMEANS_RESTARTS {
        let m = kmeans_fit_once(points, dim, k, seed.wrapping_add(r), max_iters, tol)?;
        let better = match &best {
            None => true,
            Some(b) => {
                m.objective_trace.last().unwrap_or(&f64::INFINITY)
                    < b.objective_trace.last().unwrap_or(&f64::INFINITY)
            }
        };
        if better {
            best = Some(m);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn kmeans_fit_once(
    points: &[f64],
    dim: usize,
    k: usize,
    seed: u64,
    max_iters: usize,
    tol: f64,
) -> Result<KMeansModel, UnitsError> {
    if dim == 0 || k == 0 {
        return Err(UnitsError::InvalidArgument("k and dim must be positive".into()));
    }
    if points.len() % dim != 0 {
        return Err(UnitsError::InvalidArgument(format!(
            "{} values do not divide into dim {dim}",
            points.len()
        )));
    }
    let n = points.len() / dim;
    if n < k {
        return Err(UnitsError::TooFewPoints { n, k });
    }
    if !points.iter().all(|v| v.is_finite()) {
        return Err(UnitsError::InvalidArgument("non-finite points".into()));
    }
    let point = |i: usize| &points[i * dim..(i + 1) * dim];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++ seeding.
    let mut centroids = vec![0.0; k * dim];
    let first = rng.random_range(0..n);
    centroids[..dim].copy_from_slice(point(first));
    let mut min_d2: Vec<f64> = (0..n).map(|i| sq_dist(point(i), &centroids[..dim])).collect();
    for c in 1..k {
        let total: f64 = min_d2.iter().sum();
        let chosen = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in min_d2.iter().enumerate() {
                if r < d {
                    pick = i;
                    break;
                }
                r -= d;
            }
            pick
        } else {
            // All remaining mass is on already-chosen points; fall back to a
            // uniform draw.
            rng.random_range(0..n)
        };
        centroids[c * dim..(c + 1) * dim].copy_from_slice(point(chosen));
        for i in 0..n {
            let d = sq_dist(point(i), &centroids[c * dim..(c + 1) * dim]);
            if d < min_d2[i] {
                min_d2[i] = d;
            }
        }
    }

    let centroid = |cs: &[f64], i: usize| -> Vec<f64> { cs[i * dim..(i + 1) * dim].to_vec() };
    let mut assignments = vec![0usize; n];
    let mut trace = Vec::new();
    let mut prev_obj = f64::INFINITY;
    for _iter in 0..max_iters {
        // Assignment step.
        let mut obj = 0.0;
        let mut changed = false;
        for i in 0..n {
            let p = point(i);
            let mut best = 0usize;
            let mut best_d = sq_dist(p, &centroids[..dim]);
            for c in 1..k {
                let d = sq_dist(p, &centroids[c * dim..(c + 1) * dim]);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            if assignments[i] != best {
                assignments[i] = best;
                changed = true;
            }
            obj += best_d;
        }
        trace.push(obj);
        let converged = !changed || prev_obj - obj <= tol;
        prev_obj = obj;

        // Update step.
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let c = assignments[i];
            counts[c] += 1;
            for d in 0..dim {
                sums[c * dim + d] += points[i * dim + d];
            }
        }
        let mut used = vec![false; n];
        for c in 0..k {
            if counts[c] > 0 {
                for d in 0..dim {
                    centroids[c * dim + d] = sums[c * dim + d] / counts[c] as f64;
                }
            } else {
                // Reseed to the farthest unused point from its centroid.
                let mut far = None;
                let mut far_d = -1.0;
                for i in 0..n {
                    if used[i] {
                        continue;
                    }
                    let d = sq_dist(point(i), &centroid(&centroids, assignments[i]));
                    if d > far_d {
                        far_d = d;
                        far = Some(i);
                    }
                }
                let i = far.expect("n >= k guarantees an available point");
                used[i] = true;
                centroids[c * dim..(c + 1) * dim].copy_from_slice(point(i));
            }
        }
        if converged {
            break;
        }
    }

    Ok(KMeansModel {
        k,
        dim,
        centroids,
        objective_trace: trace,
    })
}

/// Nearest-centroid frame labeling.
pub fn label_pc(feats: &FeatureSeq, model: &KMeansModel) -> Result<FrameLabels, UnitsError> {
    if feats.dim() != model.dim() {
        return Err(UnitsError::DimMismatch {
            got: feats.dim(),
            want: model.dim(),
        });
    }
    let ids: Vec<usize> = (0..feats.num_frames())
        .map(|t| model.nearest(feats.frame(t)))
        .collect();
    Ok(FrameLabels::new("", ids, model.k()).expect("nearest ids in range"))
}
