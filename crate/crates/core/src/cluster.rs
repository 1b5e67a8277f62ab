//! Station clustering: min-max normalized geographic features partitioned
//! by k-means.
//!
//! Each restart seeds centroids k-means++ style, runs Lloyd iterations to a
//! fixed point, then applies single-point (Hartigan) moves until no move of
//! one station to another cluster lowers the objective. The best restart
//! wins, ties going to the lowest restart index.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::station::{FeatureSelection, Station, StationRegistry};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormRange {
    pub min: f64,
    pub max: f64,
}

impl NormRange {
    /// Maps into `[0, 1]`; a zero-width range maps everything to 0.
    pub fn apply(&self, v: f64) -> f64 {
        if self.max > self.min {
            (v - self.min) / (self.max - self.min)
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub station_ids: Vec<String>,
    pub selection: FeatureSelection,
    pub rows: Vec<Vec<f64>>,
    pub norm_stats: Vec<NormRange>,
}

impl FeatureMatrix {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.norm_stats.len()
    }
}

/// Raw (unnormalized) feature row, or `None` if the station lacks a
/// selected feature.
pub fn raw_features(station: &Station, selection: FeatureSelection) -> Option<Vec<f64>> {
    let mut row = vec![station.latitude, station.longitude];
    if selection.elevation {
        row.push(station.elevation?);
    }
    if selection.urbanization {
        row.push(f64::from(station.ruca?));
    }
    Some(row)
}

pub fn build_feature_matrix(
    registry: &StationRegistry,
    selection: FeatureSelection,
) -> Result<FeatureMatrix> {
    if registry.len() < 2 {
        return Err(Error::Data(format!(
            "clustering needs at least 2 stations, got {}",
            registry.len()
        )));
    }
    let raw = registry
        .stations()
        .iter()
        .map(|s| {
            raw_features(s, selection).ok_or_else(|| {
                Error::Argument(format!(
                    "station {} lacks a selected feature; filter the registry first",
                    s.station_id
                ))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let dim = raw[0].len();
    let norm_stats: Vec<NormRange> = (0..dim)
        .map(|j| NormRange {
            min: raw.iter().map(|r| r[j]).fold(f64::INFINITY, f64::min),
            max: raw.iter().map(|r| r[j]).fold(f64::NEG_INFINITY, f64::max),
        })
        .collect();
    let rows = raw
        .iter()
        .map(|r| r.iter().zip(&norm_stats).map(|(v, n)| n.apply(*v)).collect())
        .collect();
    Ok(FeatureMatrix {
        station_ids: registry.ids().map(str::to_string).collect(),
        selection,
        rows,
        norm_stats,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub k: usize,
    pub seed: u64,
    pub restarts: usize,
    pub max_iter: usize,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            seed,
            restarts: 10,
            max_iter: 300,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    pub k: usize,
    pub feature_selection: FeatureSelection,
    pub norm_stats: Vec<NormRange>,
    pub centroids: Vec<Vec<f64>>,
    pub assignment: BTreeMap<String, usize>,
    pub objective: f64,
}

impl Clustering {
    /// Normalized feature row for a station under this clustering's ranges.
    pub fn normalize_station(&self, station: &Station) -> Result<Vec<f64>> {
        let raw = raw_features(station, self.feature_selection).ok_or_else(|| {
            Error::Argument(format!(
                "station {} lacks a clustering feature",
                station.station_id
            ))
        })?;
        Ok(raw.iter().zip(&self.norm_stats).map(|(v, n)| n.apply(*v)).collect())
    }

    pub fn cluster_of(&self, station_id: &str) -> Option<usize> {
        self.assignment.get(station_id).copied()
    }

    pub fn members(&self, cluster: usize) -> Vec<&str> {
        self.assignment
            .iter()
            .filter(|(_, c)| **c == cluster)
            .map(|(s, _)| s.as_str())
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for c in self.assignment.values() {
            sizes[*c] += 1;
        }
        sizes
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::pipeline::write_atomic(path.as_ref(), self.to_json()?.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let c: Clustering = serde_json::from_str(&text)?;
        if c.centroids.len() != c.k || c.assignment.values().any(|v| *v >= c.k) {
            return Err(Error::Validation(format!(
                "{}: inconsistent clustering",
                path.display()
            )));
        }
        Ok(c)
    }
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid, lowest index on ties.
fn nearest(centroids: &[Vec<f64>], x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(c, x);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

pub fn assign_to_cluster(clustering: &Clustering, row: &[f64]) -> Result<usize> {
    let dim = clustering.norm_stats.len();
    if row.len() != dim {
        return Err(Error::Argument(format!(
            "feature row has {} entries, clustering uses {dim}",
            row.len()
        )));
    }
    Ok(nearest(&clustering.centroids, row).0)
}

/// Sum of squared distances from each point to its cluster's centroid.
pub fn objective(points: &[Vec<f64>], labels: &[usize], centroids: &[Vec<f64>]) -> f64 {
    points
        .iter()
        .zip(labels)
        .map(|(p, l)| sq_dist(p, &centroids[*l]))
        .sum()
}

pub(crate) fn means(points: &[Vec<f64>], labels: &[usize], k: usize) -> Vec<Vec<f64>> {
    let dim = points.first().map_or(0, Vec::len);
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, l) in points.iter().zip(labels) {
        counts[*l] += 1;
        for (s, v) in sums[*l].iter_mut().zip(p) {
            *s += v;
        }
    }
    for (s, c) in sums.iter_mut().zip(&counts) {
        if *c > 0 {
            s.iter_mut().for_each(|v| *v /= *c as f64);
        }
    }
    sums
}

/// Result of a single restart.
#[derive(Debug, Clone)]
pub(crate) struct Run {
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub objective: f64,
    /// Objective after every centroid update and every single-point move.
    #[cfg_attr(not(test), allow(dead_code))]
    pub history: Vec<f64>,
}

fn seed_centroids(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![points[first].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[first])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, w) in d2.iter().enumerate() {
                if *w <= 0.0 {
                    continue;
                }
                acc += w;
                pick = Some(i);
                if acc > target {
                    break;
                }
            }
            pick.expect("positive total weight")
        } else {
            // Every remaining point coincides with a centroid.
            let free: Vec<usize> = (0..n).filter(|i| !chosen[*i]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen[pick] = true;
        centroids.push(points[pick].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &points[pick]));
        }
    }
    centroids
}

/// Gives every empty cluster the point farthest from its current centroid.
fn repair_empty(points: &[Vec<f64>], labels: &mut [usize], centroids: &[Vec<f64>], k: usize) {
    loop {
        let mut counts = vec![0usize; k];
        for l in labels.iter() {
            counts[*l] += 1;
        }
        let Some(empty) = counts.iter().position(|c| *c == 0) else {
            return;
        };
        let mut far = None;
        let mut far_d = -1.0;
        for (i, p) in points.iter().enumerate() {
            if counts[labels[i]] < 2 {
                continue;
            }
            let d = sq_dist(p, &centroids[labels[i]]);
            if d > far_d {
                far_d = d;
                far = Some(i);
            }
        }
        let i = far.expect("k <= n leaves a donor cluster");
        labels[i] = empty;
    }
}

pub(crate) fn run_once(points: &[Vec<f64>], k: usize, max_iter: usize, rng: &mut ChaCha8Rng) -> Run {
    let mut centroids = seed_centroids(points, k, rng);
    let mut labels: Vec<usize> = points.iter().map(|p| nearest(&centroids, p).0).collect();
    let mut history = Vec::new();
    for _ in 0..max_iter {
        repair_empty(points, &mut labels, &centroids, k);
        centroids = means(points, &labels, k);
        history.push(objective(points, &labels, &centroids));
        let next: Vec<usize> = points.iter().map(|p| nearest(&centroids, p).0).collect();
        if next == labels {
            break;
        }
        labels = next;
    }
    repair_empty(points, &mut labels, &centroids, k);
    centroids = means(points, &labels, k);

    // Single-point moves.
    let n = points.len();
    let mut counts = vec![0usize; k];
    for l in &labels {
        counts[*l] += 1;
    }
    let mut current = objective(points, &labels, &centroids);
    let mut improved = true;
    let mut passes = 0;
    while improved && passes < max_iter.max(1) * 4 {
        improved = false;
        passes += 1;
        for i in 0..n {
            let a = labels[i];
            if counts[a] < 2 {
                continue;
            }
            let na = counts[a] as f64;
            let remove = na / (na - 1.0) * sq_dist(&points[i], &centroids[a]);
            let mut best = (a, 0.0);
            for (b, cb) in centroids.iter().enumerate() {
                if b == a {
                    continue;
                }
                let nb = counts[b] as f64;
                let delta = nb / (nb + 1.0) * sq_dist(&points[i], cb) - remove;
                if delta < best.1 {
                    best = (b, delta);
                }
            }
            if best.0 != a && best.1 < -1e-12 * (1.0 + current) {
                labels[i] = best.0;
                counts[a] -= 1;
                counts[best.0] += 1;
                centroids = means(points, &labels, k);
                current = objective(points, &labels, &centroids);
                history.push(current);
                improved = true;
            }
        }
    }
    let obj = objective(points, &labels, &centroids);
    Run {
        labels,
        centroids,
        objective: obj,
        history,
    }
}

/// Splitmix64 finalizer; derives independent stream seeds from a base seed.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn best_run(points: &[Vec<f64>], cfg: &KMeansConfig) -> Result<Run> {
    if cfg.k == 0 {
        return Err(Error::Argument("k must be positive".into()));
    }
    if cfg.k > points.len() {
        return Err(Error::Argument(format!(
            "k = {} exceeds the {} points available",
            cfg.k,
            points.len()
        )));
    }
    if cfg.restarts == 0 || cfg.max_iter == 0 {
        return Err(Error::Argument("restarts and max_iter must be positive".into()));
    }
    let runs: Vec<Run> = (0..cfg.restarts)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, r as u64));
            run_once(points, cfg.k, cfg.max_iter, &mut rng)
        })
        .collect();
    let mut best = 0;
    for (i, r) in runs.iter().enumerate() {
        if r.objective < runs[best].objective {
            best = i;
        }
    }
    Ok(runs.into_iter().nth(best).expect("at least one restart"))
}

pub fn kmeans(matrix: &FeatureMatrix, cfg: &KMeansConfig) -> Result<Clustering> {
    let run = best_run(&matrix.rows, cfg)?;
    Ok(Clustering {
        k: cfg.k,
        feature_selection: matrix.selection,
        norm_stats: matrix.norm_stats.clone(),
        centroids: run.centroids,
        assignment: matrix
            .station_ids
            .iter()
            .cloned()
            .zip(run.labels)
            .collect(),
        objective: run.objective,
    })
}
