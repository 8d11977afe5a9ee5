//! Datasets: the synthetic two-class benchmark, label-flip contamination,
//! CSV ingestion and stratified train/val/test splitting.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: usize,
    pub group: Option<usize>,
    pub outlier: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidInput(format!(
                "unknown split tag `{other}` (expected train|val|test)"
            ))),
        }
    }
}

/// Immutable collection of samples sharing a feature dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    d: usize,
    n_classes: usize,
    n_groups: Option<usize>,
    split: Vec<Split>,
    feature_names: Vec<String>,
    label_names: Vec<String>,
}

impl Dataset {
    /// Builds a dataset with every sample tagged `train`.
    ///
    /// Group ids, when present, must be given for every sample.
    pub fn new(samples: Vec<Sample>, n_classes: usize) -> Result<Self> {
        let d = samples.first().map_or(0, |s| s.x.len());
        for (i, s) in samples.iter().enumerate() {
            if s.x.len() != d {
                return Err(Error::InvalidInput(format!(
                    "sample {i} has {} features, expected {d}",
                    s.x.len()
                )));
            }
            if let Some(j) = s.x.iter().position(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "sample {i} feature {j} is not finite"
                )));
            }
            if s.y >= n_classes {
                return Err(Error::InvalidInput(format!(
                    "sample {i} has label {} but only {n_classes} classes",
                    s.y
                )));
            }
        }
        let with_group = samples.iter().filter(|s| s.group.is_some()).count();
        let n_groups = if with_group == 0 {
            None
        } else if with_group == samples.len() {
            samples.iter().filter_map(|s| s.group).max().map(|g| g + 1)
        } else {
            return Err(Error::InvalidInput(
                "group ids must be present for all samples or for none".into(),
            ));
        };
        let n = samples.len();
        Ok(Self {
            samples,
            d,
            n_classes,
            n_groups,
            split: vec![Split::Train; n],
            feature_names: (0..d).map(|j| format!("x{j}")).collect(),
            label_names: (0..n_classes).map(|c| c.to_string()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn sample(&self, i: usize) -> &Sample {
        &self.samples[i]
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn n_groups(&self) -> Option<usize> {
        self.n_groups
    }

    pub fn has_groups(&self) -> bool {
        self.n_groups.is_some()
    }

    pub fn splits(&self) -> &[Split] {
        &self.split
    }

    pub fn split_of(&self, i: usize) -> Split {
        self.split[i]
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    /// Original label values, indexed by class id.
    pub fn label_names(&self) -> &[String] {
        &self.label_names
    }

    /// Indices of samples tagged with `split`, in dataset order.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split[i] == split).collect()
    }

    pub fn indices_in(&self, splits: &[Split]) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| splits.contains(&self.split[i]))
            .collect()
    }

    pub fn split_counts(&self) -> [usize; 3] {
        let mut counts = [0; 3];
        for s in &self.split {
            counts[*s as usize] += 1;
        }
        counts
    }

    pub fn with_feature_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.d {
            return Err(Error::Dimension {
                expected: self.d,
                got: names.len(),
            });
        }
        self.feature_names = names;
        Ok(self)
    }

    pub fn with_label_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.n_classes {
            return Err(Error::Dimension {
                expected: self.n_classes,
                got: names.len(),
            });
        }
        self.label_names = names;
        Ok(self)
    }

    pub fn with_splits(mut self, split: Vec<Split>) -> Result<Self> {
        if split.len() != self.len() {
            return Err(Error::Dimension {
                expected: self.len(),
                got: split.len(),
            });
        }
        self.split = split;
        Ok(self)
    }

    /// Ground-truth group ids, if every sample carries one.
    pub fn true_groups(&self) -> Option<Vec<usize>> {
        self.samples.iter().map(|s| s.group).collect()
    }

    pub fn outlier_count(&self) -> usize {
        self.samples
            .iter()
            .filter(|s| s.outlier == Some(true))
            .count()
    }
}

/// Cluster centers of the synthetic benchmark as `(center, class, group)`.
///
/// Group ids: 0 = class 0 majority, 1 = class 0 minority,
/// 2 = class 1 majority, 3 = class 1 minority.
pub const SYNTHETIC_CLUSTERS: [([f64; 2], usize, usize); 10] = [
    ([1.0, 5.0], 0, 0),
    ([1.0, 3.0], 0, 0),
    ([1.0, 2.0], 0, 0),
    ([1.0, 1.0], 0, 0),
    ([0.0, 4.0], 0, 1),
    ([0.0, 5.0], 1, 2),
    ([0.0, 3.0], 1, 2),
    ([0.0, 2.0], 1, 2),
    ([0.0, 1.0], 1, 2),
    ([1.0, 4.0], 1, 3),
];

pub const SYNTHETIC_CLUSTER_SIZE: usize = 100;
pub const SYNTHETIC_VARIANCE: f64 = 0.01;
pub const SYNTHETIC_FLIP_FRACTION: f64 = 0.05;

/// Ten isotropic Gaussian clusters, two classes with a majority and a
/// minority group each. With `contaminate`, 5% of labels are flipped.
pub fn generate_synthetic(seed: u64, contaminate: bool) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, SYNTHETIC_VARIANCE.sqrt()).expect("finite std");
    let mut samples = Vec::with_capacity(SYNTHETIC_CLUSTERS.len() * SYNTHETIC_CLUSTER_SIZE);
    for (center, class, group) in SYNTHETIC_CLUSTERS {
        for _ in 0..SYNTHETIC_CLUSTER_SIZE {
            let x = center.iter().map(|c| c + noise.sample(&mut rng)).collect();
            samples.push(Sample {
                x,
                y: class,
                group: Some(group),
                outlier: Some(false),
            });
        }
    }
    let ds = Dataset::new(samples, 2).expect("synthetic dataset is valid");
    if contaminate {
        flip_labels_with(ds, SYNTHETIC_FLIP_FRACTION, &mut rng)
    } else {
        ds
    }
}

/// Flips the class label of a uniformly random `fraction` of samples
/// (rounded to nearest) and marks them as outliers. Features and group ids
/// are left untouched.
pub fn flip_labels(ds: Dataset, fraction: f64, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    flip_labels_with(ds, fraction, &mut rng)
}

fn flip_labels_with(mut ds: Dataset, fraction: f64, rng: &mut ChaCha8Rng) -> Dataset {
    let n = ds.len();
    let n_flip = ((fraction * n as f64).round() as usize).min(n);
    if ds.n_classes < 2 {
        return ds;
    }
    let chosen = rand::seq::index::sample(rng, n, n_flip).into_vec();
    for s in ds.samples.iter_mut() {
        if s.outlier.is_none() {
            s.outlier = Some(false);
        }
    }
    for i in chosen {
        let s = &mut ds.samples[i];
        let shift = 1 + rng.random_range(0..ds.n_classes - 1);
        s.y = (s.y + shift) % ds.n_classes;
        s.outlier = Some(true);
    }
    ds
}

/// Fractions for train, validation and test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitRatios {
    pub const fn new(train: f64, val: f64, test: f64) -> Self {
        Self { train, val, test }
    }

    fn as_array(&self) -> [f64; 3] {
        [self.train, self.val, self.test]
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.as_array();
        if r.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidInput(format!(
                "split ratios must be nonnegative, got {r:?}"
            )));
        }
        let total: f64 = r.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!(
                "split ratios must sum to 1, got {total}"
            )));
        }
        Ok(())
    }
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self::new(0.6, 0.2, 0.2)
    }
}

/// Largest-remainder apportionment of `n` items; every part with a positive
/// ratio receives at least one item when `n` allows it.
fn apportion(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts = [0usize; 3];
    for k in 0..3 {
        counts[k] = exact[k].floor() as usize;
    }
    let mut assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &k in order.iter().cycle() {
        if assigned >= n {
            break;
        }
        if ratios[k] > 0.0 {
            counts[k] += 1;
            assigned += 1;
        }
    }
    for k in 0..3 {
        if ratios[k] > 0.0 && counts[k] == 0 {
            let donor = (0..3).max_by_key(|&j| (counts[j], std::cmp::Reverse(j))).unwrap();
            if counts[donor] > 1 {
                counts[donor] -= 1;
                counts[k] += 1;
            }
        }
    }
    counts
}

/// Stratified (per-class) random split.
pub fn split(ds: Dataset, ratios: SplitRatios, seed: u64) -> Result<Dataset> {
    ratios.validate()?;
    let r = ratios.as_array();
    let parts = r.iter().filter(|v| **v > 0.0).count();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.n_classes];
    for (i, s) in ds.samples.iter().enumerate() {
        by_class[s.y].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tags = vec![Split::Train; ds.len()];
    for (class, mut idx) in by_class.into_iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        if idx.len() < parts {
            return Err(Error::InvalidInput(format!(
                "class {class} has {} samples, fewer than the {parts} split parts",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        let [n_train, n_val, _] = apportion(idx.len(), r);
        for (pos, &i) in idx.iter().enumerate() {
            tags[i] = if pos < n_train {
                Split::Train
            } else if pos < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
    }
    ds.with_splits(tags)
}

/// Column mapping for [`load_csv`]. Optional columns default to `group`,
/// `outlier` and `split` when a column of that name exists. When `features`
/// is `None`, every remaining column is a feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSchema {
    #[serde(default)]
    pub features: Option<Vec<String>>,
    #[serde(default = "default_label_column")]
    pub label: String,
    #[serde(default)]
    pub group: Option<String>,
    #[serde(default)]
    pub outlier: Option<String>,
    #[serde(default)]
    pub split: Option<String>,
}

fn default_label_column() -> String {
    "label".to_string()
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            features: None,
            label: default_label_column(),
            group: None,
            outlier: None,
            split: None,
        }
    }
}

/// Sorts distinct values numerically when they all parse as integers,
/// lexicographically otherwise.
fn ordered_levels(values: &[String]) -> Vec<String> {
    let mut levels: Vec<String> = values.to_vec();
    levels.sort();
    levels.dedup();
    if levels.iter().all(|v| v.parse::<i64>().is_ok()) {
        levels.sort_by_key(|v| v.parse::<i64>().unwrap());
    }
    levels
}

fn parse_bool(s: &str) -> Option<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" => Some(true),
        "false" | "0" | "no" => Some(false),
        _ => None,
    }
}

pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Dataset> {
    let path = path.as_ref();
    let file_err = |message: String| Error::CsvFile {
        path: path.to_path_buf(),
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| file_err(e.to_string()))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| file_err(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let require = |name: &str| find(name).ok_or_else(|| file_err(format!("missing column `{name}`")));
    let optional = |given: &Option<String>, default: &str| -> Result<Option<usize>> {
        match given {
            Some(name) => require(name).map(Some),
            None => Ok(find(default)),
        }
    };

    let label_col = require(&schema.label)?;
    let group_col = optional(&schema.group, "group")?;
    let outlier_col = optional(&schema.outlier, "outlier")?;
    let split_col = optional(&schema.split, "split")?;
    let reserved: Vec<usize> = [Some(label_col), group_col, outlier_col, split_col]
        .into_iter()
        .flatten()
        .collect();
    let feature_cols: Vec<usize> = match &schema.features {
        Some(names) => names.iter().map(|n| require(n)).collect::<Result<_>>()?,
        None => (0..headers.len()).filter(|c| !reserved.contains(c)).collect(),
    };
    if feature_cols.is_empty() {
        return Err(file_err("no feature columns".into()));
    }

    let mut xs = Vec::new();
    let mut raw_labels = Vec::new();
    let mut raw_groups = Vec::new();
    let mut outliers = Vec::new();
    let mut splits = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let row = row + 1;
        let record = record.map_err(|e| file_err(format!("row {row}: {e}")))?;
        let cell = |c: usize| record.get(c).unwrap_or("");
        let mut x = Vec::with_capacity(feature_cols.len());
        for &c in &feature_cols {
            let text = cell(c);
            let v: f64 = text.parse().map_err(|_| Error::CsvCell {
                row,
                column: headers[c].clone(),
                message: format!("`{text}` is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::CsvCell {
                    row,
                    column: headers[c].clone(),
                    message: format!("`{text}` is not a finite number"),
                });
            }
            x.push(v);
        }
        xs.push(x);
        let label = cell(label_col);
        if label.is_empty() {
            return Err(Error::CsvCell {
                row,
                column: headers[label_col].clone(),
                message: "empty label".into(),
            });
        }
        raw_labels.push(label.to_string());
        if let Some(c) = group_col {
            raw_groups.push(cell(c).to_string());
        }
        if let Some(c) = outlier_col {
            let v = parse_bool(cell(c)).ok_or_else(|| Error::CsvCell {
                row,
                column: headers[c].clone(),
                message: format!("`{}` is not a boolean", cell(c)),
            })?;
            outliers.push(v);
        }
        if let Some(c) = split_col {
            let tag = cell(c).parse::<Split>().map_err(|e| Error::CsvCell {
                row,
                column: headers[c].clone(),
                message: e.to_string(),
            })?;
            splits.push(tag);
        }
    }
    if xs.is_empty() {
        return Err(file_err("file contains no data rows".into()));
    }

    let label_levels = ordered_levels(&raw_labels);
    let label_index: BTreeMap<&str, usize> = label_levels
        .iter()
        .enumerate()
        .map(|(i, l)| (l.as_str(), i))
        .collect();
    let group_levels = ordered_levels(&raw_groups);
    let group_index: BTreeMap<&str, usize> = group_levels
        .iter()
        .enumerate()
        .map(|(i, l)| (l.as_str(), i))
        .collect();

    let samples = xs
        .into_iter()
        .enumerate()
        .map(|(i, x)| Sample {
            x,
            y: label_index[raw_labels[i].as_str()],
            group: group_col.map(|_| group_index[raw_groups[i].as_str()]),
            outlier: outlier_col.map(|_| outliers[i]),
        })
        .collect();
    let mut ds = Dataset::new(samples, label_levels.len())?
        .with_feature_names(feature_cols.iter().map(|&c| headers[c].clone()).collect())?
        .with_label_names(label_levels)?;
    if split_col.is_some() {
        ds = ds.with_splits(splits)?;
    }
    Ok(ds)
}

/// Writes the dataset with a header row. Floats use the shortest
/// representation that parses back to the identical value.
pub fn write_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let csv_err = |e: csv::Error| Error::CsvFile {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let has_outlier = ds.samples.iter().any(|s| s.outlier.is_some());
    let mut header: Vec<String> = ds.feature_names.clone();
    header.push("label".into());
    if ds.has_groups() {
        header.push("group".into());
    }
    if has_outlier {
        header.push("outlier".into());
    }
    header.push("split".into());
    w.write_record(&header).map_err(csv_err)?;
    for (i, s) in ds.samples.iter().enumerate() {
        let mut rec: Vec<String> = s.x.iter().map(|v| v.to_string()).collect();
        rec.push(ds.label_names[s.y].clone());
        if let Some(g) = s.group {
            rec.push(g.to_string());
        }
        if has_outlier {
            rec.push(s.outlier.unwrap_or(false).to_string());
        }
        rec.push(ds.split[i].to_string());
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStat {
    pub group: usize,
    pub class: usize,
    pub count: usize,
    pub fraction: f64,
}

/// Per (group, class) counts over the whole dataset, sorted by group then class.
pub fn group_stats(ds: &Dataset) -> Result<Vec<GroupStat>> {
    if ds.is_empty() {
        return Ok(Vec::new());
    }
    let groups = ds
        .true_groups()
        .ok_or_else(|| Error::InvalidInput("dataset has no group labels".into()))?;
    let mut counts: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for (s, g) in ds.samples.iter().zip(groups) {
        *counts.entry((g, s.y)).or_default() += 1;
    }
    let n = ds.len() as f64;
    Ok(counts
        .into_iter()
        .map(|((group, class), count)| GroupStat {
            group,
            class,
            count,
            fraction: count as f64 / n,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nearest_cluster(x: &[f64]) -> usize {
        SYNTHETIC_CLUSTERS
            .iter()
            .enumerate()
            .min_by(|a, b| {
                let da = (a.1 .0[0] - x[0]).powi(2) + (a.1 .0[1] - x[1]).powi(2);
                let db = (b.1 .0[0] - x[0]).powi(2) + (b.1 .0[1] - x[1]).powi(2);
                da.total_cmp(&db)
            })
            .unwrap()
            .0
    }

    #[test]
    fn synthetic_has_hundred_per_cluster() {
        let ds = generate_synthetic(0, false);
        assert_eq!(ds.len(), 1000);
        assert_eq!(ds.dim(), 2);
        assert_eq!(ds.n_classes(), 2);
        assert_eq!(ds.n_groups(), Some(4));
        let mut per_cluster = [0usize; 10];
        for s in ds.samples() {
            let c = nearest_cluster(&s.x);
            per_cluster[c] += 1;
            assert_eq!(SYNTHETIC_CLUSTERS[c].1, s.y);
            assert_eq!(Some(SYNTHETIC_CLUSTERS[c].2), s.group);
        }
        assert_eq!(per_cluster, [100; 10]);
        let minority = ds
            .samples()
            .iter()
            .filter(|s| matches!(s.group, Some(1) | Some(3)))
            .count();
        assert_eq!(minority, 200);
    }

    #[test]
    fn synthetic_is_deterministic() {
        assert_eq!(generate_synthetic(0, false), generate_synthetic(0, false));
        assert_eq!(generate_synthetic(3, true), generate_synthetic(3, true));
        assert_ne!(generate_synthetic(0, false), generate_synthetic(1, false));
    }

    #[test]
    fn contamination_flips_fifty_and_keeps_features() {
        let clean = generate_synthetic(0, false);
        let dirty = generate_synthetic(0, true);
        assert_eq!(dirty.outlier_count(), 50);
        let mut flipped = 0;
        for (a, b) in clean.samples().iter().zip(dirty.samples()) {
            assert_eq!(a.x.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                       b.x.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            assert_eq!(a.group, b.group);
            if a.y != b.y {
                flipped += 1;
                assert_eq!(b.outlier, Some(true));
            } else {
                assert_eq!(b.outlier, Some(false));
            }
        }
        assert_eq!(flipped, 50);
    }

    #[test]
    fn split_sixty_twenty_twenty() {
        let ds = split(generate_synthetic(0, false), SplitRatios::default(), 0).unwrap();
        assert_eq!(ds.split_counts(), [600, 200, 200]);
        for class in 0..2 {
            let mut c = [0usize; 3];
            for (s, t) in ds.samples().iter().zip(ds.splits()) {
                if s.y == class {
                    c[*t as usize] += 1;
                }
            }
            assert_eq!(c, [300, 100, 100]);
        }
    }

    #[test]
    fn split_all_train() {
        let ds = split(generate_synthetic(0, false), SplitRatios::new(1.0, 0.0, 0.0), 5).unwrap();
        assert!(ds.splits().iter().all(|s| *s == Split::Train));
    }

    #[test]
    fn split_is_deterministic() {
        let a = split(generate_synthetic(1, true), SplitRatios::default(), 9).unwrap();
        let b = split(generate_synthetic(1, true), SplitRatios::default(), 9).unwrap();
        assert_eq!(a.splits(), b.splits());
    }

    #[test]
    fn split_rejects_bad_ratios_and_tiny_classes() {
        let ds = generate_synthetic(0, false);
        assert!(split(ds.clone(), SplitRatios::new(0.5, 0.2, 0.2), 0).is_err());
        assert!(split(ds, SplitRatios::new(1.2, -0.2, 0.0), 0).is_err());
        let tiny = Dataset::new(
            vec![
                Sample { x: vec![0.0], y: 0, group: None, outlier: None },
                Sample { x: vec![1.0], y: 1, group: None, outlier: None },
                Sample { x: vec![2.0], y: 1, group: None, outlier: None },
                Sample { x: vec![3.0], y: 1, group: None, outlier: None },
            ],
            2,
        )
        .unwrap();
        assert!(split(tiny, SplitRatios::default(), 0).is_err());
    }

    #[test]
    fn apportion_stays_within_one() {
        for n in 3..60 {
            for r in [[0.6, 0.2, 0.2], [0.5, 0.5, 0.0], [0.1, 0.45, 0.45], [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]] {
                let c = apportion(n, r);
                assert_eq!(c.iter().sum::<usize>(), n);
                for k in 0..3 {
                    assert!((c[k] as f64 - r[k] * n as f64).abs() <= 1.0, "{n} {r:?} {c:?}");
                }
            }
        }
    }

    #[test]
    fn group_stats_clean_synthetic() {
        let stats = group_stats(&generate_synthetic(0, false)).unwrap();
        assert_eq!(stats.len(), 4);
        assert_eq!(stats.iter().map(|s| s.count).sum::<usize>(), 1000);
        assert!((stats.iter().map(|s| s.fraction).sum::<f64>() - 1.0).abs() < 1e-9);
        for s in &stats {
            let expected = if s.group % 2 == 1 { 0.1 } else { 0.4 };
            assert!((s.fraction - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn group_stats_edge_cases() {
        let one = Dataset::new(
            vec![
                Sample { x: vec![0.0], y: 0, group: Some(0), outlier: None },
                Sample { x: vec![1.0], y: 0, group: Some(0), outlier: None },
            ],
            1,
        )
        .unwrap();
        let stats = group_stats(&one).unwrap();
        assert_eq!(stats.len(), 1);
        assert_eq!(stats[0].fraction, 1.0);

        let empty = Dataset::new(Vec::new(), 2).unwrap();
        assert!(group_stats(&empty).unwrap().is_empty());

        let no_groups = Dataset::new(
            vec![Sample { x: vec![0.0], y: 0, group: None, outlier: None }],
            1,
        )
        .unwrap();
        assert!(group_stats(&no_groups).is_err());
    }
}
