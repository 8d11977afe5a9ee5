//! DBSCAN and k-means clustering, plus the adjusted Rand index and the
//! silhouette coefficient.

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradspace::DistanceMatrix;
use crate::matrix::RowMatrix;

pub const OUTLIER: i64 = -1;

/// Per-sample cluster labels; clusters are `0..k`, outliers are [`OUTLIER`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterAssignment {
    labels: Vec<i64>,
}

impl ClusterAssignment {
    /// Accepts any labels with `-1` as the outlier marker and renumbers the
    /// clusters canonically.
    pub fn from_labels(labels: Vec<i64>) -> Result<Self> {
        if let Some(bad) = labels.iter().find(|l| **l < OUTLIER) {
            return Err(Error::InvalidInput(format!("invalid cluster label {bad}")));
        }
        Ok(Self {
            labels: canonicalize(&labels),
        })
    }

    pub fn labels(&self) -> &[i64] {
        &self.labels
    }

    pub fn into_labels(self) -> Vec<i64> {
        self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_clusters(&self) -> usize {
        self.labels.iter().copied().max().map_or(0, |m| (m + 1).max(0) as usize)
    }

    pub fn n_outliers(&self) -> usize {
        self.labels.iter().filter(|l| **l == OUTLIER).count()
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_clusters()];
        for &l in &self.labels {
            if l >= 0 {
                sizes[l as usize] += 1;
            }
        }
        sizes
    }

    /// Writes `sample,label`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let csv_err = |e: csv::Error| Error::CsvFile {
            path: path.to_path_buf(),
            message: e.to_string(),
        };
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(["sample", "label"]).map_err(csv_err)?;
        for (i, l) in self.labels.iter().enumerate() {
            w.write_record([i.to_string(), l.to_string()]).map_err(csv_err)?;
        }
        w.flush()
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }
}

/// Renumbers clusters by descending size; equal sizes are ordered by their
/// smallest member index. Outliers stay `-1`.
fn canonicalize(labels: &[i64]) -> Vec<i64> {
    let mut info: BTreeMap<i64, (usize, usize)> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        if l >= 0 {
            let e = info.entry(l).or_insert((0, i));
            e.0 += 1;
        }
    }
    let mut order: Vec<(i64, usize, usize)> = info.into_iter().map(|(l, (n, first))| (l, n, first)).collect();
    order.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
    let remap: BTreeMap<i64, i64> = order
        .iter()
        .enumerate()
        .map(|(new, (old, _, _))| (*old, new as i64))
        .collect();
    labels
        .iter()
        .map(|l| if *l >= 0 { remap[l] } else { OUTLIER })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DbscanParams {
    pub eps: f64,
    pub min_samples: usize,
}

impl DbscanParams {
    pub fn new(eps: f64, min_samples: usize) -> Result<Self> {
        let p = Self { eps, min_samples };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::InvalidInput(format!("eps must be positive, got {}", self.eps)));
        }
        if self.min_samples == 0 {
            return Err(Error::InvalidInput("min_samples must be at least 1".into()));
        }
        Ok(())
    }
}

/// DBSCAN over a precomputed distance matrix.
///
/// A point is core when at least `min_samples` *other* points lie within
/// `eps` (inclusive). Clusters are the connected components of core points;
/// a non-core point within `eps` of some core point joins the cluster of the
/// lowest-numbered such component (components are numbered by their first
/// core point). Everything else is an outlier. Cluster ids are then
/// canonicalized by size.
pub fn dbscan(d: &DistanceMatrix, params: DbscanParams) -> ClusterAssignment {
    let n = d.len();
    let neighbors: Vec<Vec<usize>> = (0..n)
        .into_par_iter()
        .map(|i| {
            d.row(i)
                .iter()
                .enumerate()
                .filter(|&(j, &v)| j != i && v <= params.eps)
                .map(|(j, _)| j)
                .collect()
        })
        .collect();
    let core: Vec<bool> = neighbors.iter().map(|nb| nb.len() >= params.min_samples).collect();

    let mut component = vec![OUTLIER; n];
    let mut next = 0i64;
    let mut queue = VecDeque::new();
    for start in 0..n {
        if !core[start] || component[start] != OUTLIER {
            continue;
        }
        component[start] = next;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            for &j in &neighbors[i] {
                if core[j] && component[j] == OUTLIER {
                    component[j] = next;
                    queue.push_back(j);
                }
            }
        }
        next += 1;
    }

    let labels: Vec<i64> = (0..n)
        .map(|i| {
            if core[i] {
                component[i]
            } else {
                neighbors[i]
                    .iter()
                    .filter(|&&j| core[j])
                    .map(|&j| component[j])
                    .min()
                    .unwrap_or(OUTLIER)
            }
        })
        .collect();
    ClusterAssignment {
        labels: canonicalize(&labels),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub assignment: ClusterAssignment,
    pub centers: RowMatrix,
    pub wcss: f64,
    /// WCSS after every assignment step of the winning restart.
    pub wcss_history: Vec<f64>,
}

pub const KMEANS_RESTARTS: usize = 10;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum()
}

fn nearest(x: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.iter().enumerate() {
        let d = sq_dist(x, center);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Lloyd's algorithm from farthest-point seeding (random first center),
/// best of [`KMEANS_RESTARTS`] restarts by WCSS.
pub fn kmeans(x: &RowMatrix, k: usize, seed: u64, max_iter: usize) -> Result<KMeansResult> {
    let n = x.rows();
    if k == 0 || k > n {
        return Err(Error::InvalidInput(format!(
            "k must be in 1..={n}, got {k}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(Vec<usize>, Vec<Vec<f64>>, f64, Vec<f64>)> = None;
    for _ in 0..KMEANS_RESTARTS {
        let first = rng.random_range(0..n);
        let mut centers = vec![x.row(first).to_vec()];
        let mut min_d: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), &centers[0])).collect();
        while centers.len() < k {
            let far = (0..n).fold(0, |b, i| if min_d[i] > min_d[b] { i } else { b });
            centers.push(x.row(far).to_vec());
            for i in 0..n {
                min_d[i] = min_d[i].min(sq_dist(x.row(i), &centers[centers.len() - 1]));
            }
        }

        let mut assign = vec![usize::MAX; n];
        let mut history = Vec::new();
        for _ in 0..max_iter.max(1) {
            let mut changed = false;
            let mut wcss = 0.0;
            for i in 0..n {
                let (c, d) = nearest(x.row(i), &centers);
                if assign[i] != c {
                    assign[i] = c;
                    changed = true;
                }
                wcss += d;
            }
            history.push(wcss);
            if !changed {
                break;
            }
            let mut sums = vec![vec![0.0; x.cols()]; k];
            let mut counts = vec![0usize; k];
            for i in 0..n {
                counts[assign[i]] += 1;
                for (s, v) in sums[assign[i]].iter_mut().zip(x.row(i)) {
                    *s += v;
                }
            }
            for c in 0..k {
                if counts[c] > 0 {
                    centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
                }
            }
        }
        // Final WCSS against the final centers.
        let wcss: f64 = (0..n).map(|i| sq_dist(x.row(i), &centers[assign[i]])).sum();
        if best.as_ref().is_none_or(|b| wcss < b.2) {
            best = Some((assign, centers, wcss, history));
        }
    }
    let (assign, centers, wcss, wcss_history) = best.expect("at least one restart");
    let labels = canonicalize(&assign.iter().map(|&a| a as i64).collect::<Vec<_>>());
    let mut ordered = vec![Vec::new(); k];
    for (i, &a) in assign.iter().enumerate() {
        ordered[labels[i] as usize] = centers[a].clone();
    }
    // Clusters that ended up empty keep their seeds, after the populated ones.
    let used: Vec<usize> = {
        let mut u: Vec<usize> = assign.clone();
        u.sort_unstable();
        u.dedup();
        u
    };
    let mut slot = used.len();
    for (c, center) in centers.iter().enumerate() {
        if !used.contains(&c) {
            ordered[slot] = center.clone();
            slot += 1;
        }
    }
    Ok(KMeansResult {
        assignment: ClusterAssignment { labels },
        centers: RowMatrix::from_rows(&ordered)?,
        wcss,
        wcss_history,
    })
}

fn choose2(n: u64) -> u128 {
    let n = n as u128;
    n * n.saturating_sub(1) / 2
}

/// Adjusted Rand index from the contingency table of two labelings.
///
/// Labels are compared as opaque ids, so the outlier marker `-1` is just
/// another cluster. When both partitions are trivial in the same way (the
/// chance-corrected denominator vanishes) the result is 1.
pub fn adjusted_rand_index(p: &[i64], q: &[i64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Dimension {
            expected: p.len(),
            got: q.len(),
        });
    }
    if p.len() < 2 {
        return Err(Error::InvalidInput("ARI needs at least two samples".into()));
    }
    let mut table: BTreeMap<(i64, i64), u64> = BTreeMap::new();
    let mut rows: BTreeMap<i64, u64> = BTreeMap::new();
    let mut cols: BTreeMap<i64, u64> = BTreeMap::new();
    for (&a, &b) in p.iter().zip(q) {
        *table.entry((a, b)).or_default() += 1;
        *rows.entry(a).or_default() += 1;
        *cols.entry(b).or_default() += 1;
    }
    let index: u128 = table.values().map(|&v| choose2(v)).sum();
    let sum_rows: u128 = rows.values().map(|&v| choose2(v)).sum();
    let sum_cols: u128 = cols.values().map(|&v| choose2(v)).sum();
    let total = choose2(p.len() as u64);
    let expected = (sum_rows * sum_cols) as f64 / total as f64;
    let max_index = 0.5 * (sum_rows + sum_cols) as f64;
    let denom = max_index - expected;
    if denom == 0.0 {
        return Ok(1.0);
    }
    Ok((index as f64 - expected) / denom)
}

/// Mean silhouette over non-outlier points. Members of singleton clusters
/// score 0.
pub fn silhouette(d: &DistanceMatrix, labels: &ClusterAssignment) -> Result<f64> {
    let labels = labels.labels();
    if labels.len() != d.len() {
        return Err(Error::Dimension {
            expected: d.len(),
            got: labels.len(),
        });
    }
    let k = labels.iter().copied().max().map_or(0, |m| (m + 1).max(0) as usize);
    let mut sizes = vec![0usize; k];
    for &l in labels {
        if l >= 0 {
            sizes[l as usize] += 1;
        }
    }
    if sizes.iter().filter(|s| **s > 0).count() < 2 {
        return Err(Error::SilhouetteUndefined);
    }
    let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] >= 0).collect();
    let scores: Vec<f64> = members
        .par_iter()
        .map(|&i| {
            let own = labels[i] as usize;
            if sizes[own] == 1 {
                return 0.0;
            }
            let mut sums = vec![0.0; k];
            for &j in &members {
                sums[labels[j] as usize] += d.get(i, j);
            }
            let a = sums[own] / (sizes[own] - 1) as f64;
            let b = (0..k)
                .filter(|&c| c != own && sizes[c] > 0)
                .map(|c| sums[c] / sizes[c] as f64)
                .fold(f64::INFINITY, f64::min);
            let denom = a.max(b);
            if denom > 0.0 {
                (b - a) / denom
            } else {
                0.0
            }
        })
        .collect();
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}
