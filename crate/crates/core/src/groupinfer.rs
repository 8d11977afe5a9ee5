//! Group inference: per-class DBSCAN in gradient space (or, for the
//! ablation, in raw feature space) with silhouette-based selection of the
//! DBSCAN hyperparameters.

use std::collections::BTreeMap;
use std::path::Path;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::{adjusted_rand_index, dbscan, silhouette, ClusterAssignment, DbscanParams, OUTLIER};
use crate::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::gradspace::{distance_matrix, extract_gradients_for, DistanceMatrix, Metric, ParamSubset};
use crate::matrix::RowMatrix;
use crate::model::ModelParams;

/// Cartesian grid of DBSCAN hyperparameters; iterated with `eps` outermost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DbscanGrid {
    pub eps: Vec<f64>,
    pub min_samples: Vec<usize>,
}

impl Default for DbscanGrid {
    fn default() -> Self {
        Self {
            eps: vec![0.1, 0.2, 0.3, 0.5, 0.7],
            min_samples: vec![10, 20, 30, 50, 70, 100],
        }
    }
}

impl DbscanGrid {
    pub fn single(eps: f64, min_samples: usize) -> Self {
        Self {
            eps: vec![eps],
            min_samples: vec![min_samples],
        }
    }

    pub fn points(&self) -> Vec<DbscanParams> {
        self.eps
            .iter()
            .flat_map(|&eps| self.min_samples.iter().map(move |&m| DbscanParams { eps, min_samples: m }))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.eps.is_empty() || self.min_samples.is_empty() {
            return Err(Error::InvalidInput("DBSCAN grid must be nonempty".into()));
        }
        for p in self.points() {
            p.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Representation {
    Gradient,
    Feature,
}

/// How DBSCAN hyperparameters are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Best silhouette for each class independently.
    #[default]
    PerClass,
    /// One grid point for all classes, maximizing the mean silhouette
    /// (an undefined silhouette counts as -1).
    Shared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferOptions {
    pub grid: DbscanGrid,
    pub metric: Metric,
    pub selection: Selection,
    /// Splits whose samples are clustered.
    pub splits: Vec<Split>,
}

impl Default for InferOptions {
    fn default() -> Self {
        Self {
            grid: DbscanGrid::default(),
            metric: Metric::CenteredCosine,
            selection: Selection::PerClass,
            splits: vec![Split::Train, Split::Val],
        }
    }
}

impl InferOptions {
    pub fn with_grid(grid: DbscanGrid) -> Self {
        Self {
            grid,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fallback {
    /// No grid point produced two clusters; the class became one group.
    SingleGroup,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSelection {
    pub class: usize,
    pub n_samples: usize,
    pub params: Option<DbscanParams>,
    pub silhouette: Option<f64>,
    pub n_clusters: usize,
    pub n_outliers: usize,
    /// First global group id of this class's block.
    pub group_offset: usize,
    pub fallback: Option<Fallback>,
}

/// Predicted groups for the clustered samples. Group ids are global:
/// each class owns a contiguous block, outliers are `-1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupInferenceResult {
    pub representation: Representation,
    pub metric: Metric,
    pub sample_index: Vec<usize>,
    pub class: Vec<usize>,
    pub groups: Vec<i64>,
    pub per_class: Vec<ClassSelection>,
    pub warnings: Vec<String>,
}

/// Outcome of one grid point on one class.
#[derive(Debug, Clone, PartialEq)]
pub struct GridOutcome {
    pub params: DbscanParams,
    pub assignment: ClusterAssignment,
    pub silhouette: Option<f64>,
}

pub fn evaluate_grid(d: &DistanceMatrix, grid: &DbscanGrid) -> Vec<GridOutcome> {
    grid.points()
        .into_par_iter()
        .map(|params| {
            let assignment = dbscan(d, params);
            let silhouette = silhouette(d, &assignment).ok();
            GridOutcome {
                params,
                assignment,
                silhouette,
            }
        })
        .collect()
}

/// Index of the best-silhouette outcome; ties keep the earliest grid point.
fn best_by_silhouette(outcomes: &[GridOutcome]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, o) in outcomes.iter().enumerate() {
        if let Some(s) = o.silhouette {
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((i, s));
            }
        }
    }
    best.map(|(i, _)| i)
}

impl GroupInferenceResult {
    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn n_groups(&self) -> usize {
        self.per_class.iter().map(|c| c.n_clusters).sum()
    }

    pub fn n_outliers(&self) -> usize {
        self.groups.iter().filter(|g| **g == OUTLIER).count()
    }

    /// Predicted group per dataset sample; `None` for samples that were not
    /// clustered.
    pub fn groups_by_sample(&self, n: usize) -> Vec<Option<i64>> {
        let mut out = vec![None; n];
        for (&i, &g) in self.sample_index.iter().zip(&self.groups) {
            out[i] = Some(g);
        }
        out
    }

    /// ARI against the true groups over the clustered samples. Detected
    /// outliers and contaminated samples each form one extra cluster.
    pub fn ari_vs_truth(&self, ds: &Dataset) -> Result<f64> {
        let truth: Vec<i64> = self
            .sample_index
            .iter()
            .map(|&i| truth_label(ds, i).ok_or_else(|| Error::InvalidInput("dataset has no group labels".into())))
            .collect::<Result<_>>()?;
        adjusted_rand_index(&truth, &self.groups)
    }

    /// Detected outliers scored against the contamination markers.
    pub fn outlier_score(&self, ds: &Dataset) -> Option<OutlierScore> {
        let mut score = OutlierScore::default();
        for (&i, &g) in self.sample_index.iter().zip(&self.groups) {
            let truth = ds.sample(i).outlier?;
            let detected = g == OUTLIER;
            score.detected += usize::from(detected);
            score.actual += usize::from(truth);
            score.true_positive += usize::from(detected && truth);
        }
        score.precision = (score.detected > 0).then(|| score.true_positive as f64 / score.detected as f64);
        score.recall = (score.actual > 0).then(|| score.true_positive as f64 / score.actual as f64);
        Some(score)
    }

    /// Writes `sample,class,group,is_outlier`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let csv_err = |e: csv::Error| Error::CsvFile {
            path: path.to_path_buf(),
            message: e.to_string(),
        };
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(["sample", "class", "group", "is_outlier"]).map_err(csv_err)?;
        for k in 0..self.len() {
            w.write_record([
                self.sample_index[k].to_string(),
                self.class[k].to_string(),
                self.groups[k].to_string(),
                (self.groups[k] == OUTLIER).to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    /// Reads back the CSV written by [`write_csv`](Self::write_csv) and the
    /// JSON sidecar.
    pub fn read(csv_path: impl AsRef<Path>, sidecar: &InferenceSidecar) -> Result<Self> {
        let path = csv_path.as_ref();
        let mut reader = csv::Reader::from_path(path).map_err(|e| Error::CsvFile {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let mut out = Self {
            representation: sidecar.representation,
            metric: sidecar.metric,
            sample_index: Vec::new(),
            class: Vec::new(),
            groups: Vec::new(),
            per_class: sidecar.per_class.clone(),
            warnings: sidecar.warnings.clone(),
        };
        for (row, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| Error::CsvFile {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?;
            let field = |c: usize, name: &str| -> Result<i64> {
                rec.get(c)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::CsvCell {
                        row: row + 1,
                        column: name.into(),
                        message: "expected an integer".into(),
                    })
            };
            out.sample_index.push(field(0, "sample")? as usize);
            out.class.push(field(1, "class")? as usize);
            out.groups.push(field(2, "group")?);
        }
        Ok(out)
    }

    pub fn sidecar(&self) -> InferenceSidecar {
        InferenceSidecar {
            representation: self.representation,
            metric: self.metric,
            n_groups: self.n_groups(),
            n_outliers: self.n_outliers(),
            per_class: self.per_class.clone(),
            warnings: self.warnings.clone(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OutlierScore {
    pub detected: usize,
    pub actual: usize,
    pub true_positive: usize,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

/// JSON sidecar for the inference CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceSidecar {
    pub representation: Representation,
    pub metric: Metric,
    pub n_groups: usize,
    pub n_outliers: usize,
    pub per_class: Vec<ClassSelection>,
    pub warnings: Vec<String>,
}

/// Clusters the rows of `rows` class by class. `sample_index[k]` and
/// `classes[k]` describe row `k`.
pub fn infer_from_rows(
    rows: &RowMatrix,
    sample_index: &[usize],
    classes: &[usize],
    n_classes: usize,
    representation: Representation,
    opts: &InferOptions,
) -> Result<GroupInferenceResult> {
    opts.grid.validate()?;
    if rows.rows() != classes.len() || classes.len() != sample_index.len() {
        return Err(Error::Dimension {
            expected: rows.rows(),
            got: classes.len(),
        });
    }
    let positions: Vec<Vec<usize>> = (0..n_classes)
        .map(|c| (0..classes.len()).filter(|&k| classes[k] == c).collect())
        .collect();

    // Per class: distance matrix and every grid outcome.
    let mut per_class_outcomes: Vec<Option<Vec<GridOutcome>>> = Vec::with_capacity(n_classes);
    for pos in &positions {
        if pos.len() < 2 {
            per_class_outcomes.push(None);
            continue;
        }
        let d = distance_matrix(&rows.select(pos), opts.metric)?;
        per_class_outcomes.push(Some(evaluate_grid(&d, &opts.grid)));
    }

    let shared_choice = match opts.selection {
        Selection::PerClass => None,
        Selection::Shared => {
            let n_points = opts.grid.points().len();
            let mut best: Option<(usize, f64)> = None;
            for g in 0..n_points {
                let scores: Vec<f64> = per_class_outcomes
                    .iter()
                    .flatten()
                    .map(|o| o[g].silhouette.unwrap_or(-1.0))
                    .collect();
                let mean = if scores.is_empty() {
                    -1.0
                } else {
                    scores.iter().sum::<f64>() / scores.len() as f64
                };
                if best.is_none_or(|(_, b)| mean > b) {
                    best = Some((g, mean));
                }
            }
            best.map(|(g, _)| g)
        }
    };

    let mut groups = vec![OUTLIER; classes.len()];
    let mut per_class = Vec::with_capacity(n_classes);
    let mut warnings = Vec::new();
    let mut offset = 0usize;
    for (c, pos) in positions.iter().enumerate() {
        let outcomes = per_class_outcomes[c].as_ref();
        let choice = outcomes.and_then(|o| match shared_choice {
            Some(g) if o[g].assignment.n_clusters() > 0 => Some(g),
            Some(_) => None,
            None => best_by_silhouette(o),
        });
        let selection = match (outcomes, choice) {
            (Some(o), Some(g)) => {
                let chosen = &o[g];
                for (k, &l) in pos.iter().zip(chosen.assignment.labels()) {
                    groups[*k] = if l == OUTLIER { OUTLIER } else { l + offset as i64 };
                }
                ClassSelection {
                    class: c,
                    n_samples: pos.len(),
                    params: Some(chosen.params),
                    silhouette: chosen.silhouette,
                    n_clusters: chosen.assignment.n_clusters(),
                    n_outliers: chosen.assignment.n_outliers(),
                    group_offset: offset,
                    fallback: None,
                }
            }
            _ => {
                if pos.is_empty() {
                    ClassSelection {
                        class: c,
                        n_samples: 0,
                        params: None,
                        silhouette: None,
                        n_clusters: 0,
                        n_outliers: 0,
                        group_offset: offset,
                        fallback: None,
                    }
                } else {
                    let msg = format!(
                        "class {c}: no DBSCAN grid point produced two clusters; all {} samples form one group",
                        pos.len()
                    );
                    warn!("{msg}");
                    warnings.push(msg);
                    for k in pos {
                        groups[*k] = offset as i64;
                    }
                    ClassSelection {
                        class: c,
                        n_samples: pos.len(),
                        params: None,
                        silhouette: None,
                        n_clusters: 1,
                        n_outliers: 0,
                        group_offset: offset,
                        fallback: Some(Fallback::SingleGroup),
                    }
                }
            }
        };
        offset += selection.n_clusters;
        per_class.push(selection);
    }

    Ok(GroupInferenceResult {
        representation,
        metric: opts.metric,
        sample_index: sample_index.to_vec(),
        class: classes.to_vec(),
        groups,
        per_class,
        warnings,
    })
}

fn clustered_indices(ds: &Dataset, splits: &[Split]) -> Result<Vec<usize>> {
    let idx = ds.indices_in(splits);
    if idx.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no samples in splits {splits:?} to cluster"
        )));
    }
    Ok(idx)
}

/// True group of sample `i`, or [`OUTLIER`] for a contaminated sample.
fn truth_label(ds: &Dataset, i: usize) -> Option<i64> {
    let s = ds.sample(i);
    let g = s.group?;
    Some(if s.outlier == Some(true) { OUTLIER } else { g as i64 })
}

/// Gradient-space group inference with the trained ERM model.
pub fn grasp(
    ds: &Dataset,
    erm: &ModelParams,
    subset: ParamSubset,
    opts: &InferOptions,
) -> Result<GroupInferenceResult> {
    let idx = clustered_indices(ds, &opts.splits)?;
    let grads = extract_gradients_for(erm, ds, &idx, subset)?;
    infer_from_rows(
        grads.rows(),
        grads.sample_index(),
        grads.class_of(),
        ds.n_classes(),
        Representation::Gradient,
        opts,
    )
}

/// Raw features of the selected samples with their classes.
fn feature_rows(ds: &Dataset, idx: &[usize]) -> Result<(RowMatrix, Vec<usize>)> {
    let rows: Vec<&[f64]> = idx.iter().map(|&i| ds.sample(i).x.as_slice()).collect();
    let classes = idx.iter().map(|&i| ds.sample(i).y).collect();
    Ok((RowMatrix::from_rows(&rows)?, classes))
}

/// The same procedure as [`grasp`] on raw features; no model involved.
pub fn feasp(ds: &Dataset, opts: &InferOptions) -> Result<GroupInferenceResult> {
    let idx = clustered_indices(ds, &opts.splits)?;
    let (rows, classes) = feature_rows(ds, &idx)?;
    infer_from_rows(&rows, &idx, &classes, ds.n_classes(), Representation::Feature, opts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub class: usize,
    pub eps: f64,
    pub min_samples: usize,
    /// ARI against the true groups of this class's samples.
    pub ari: Option<f64>,
    pub silhouette: Option<f64>,
    pub n_clusters: usize,
    pub n_outliers: usize,
}

/// One row per (class, grid point) over the clustered splits.
pub fn sweep_report(
    ds: &Dataset,
    erm: &ModelParams,
    subset: ParamSubset,
    opts: &InferOptions,
) -> Result<Vec<SweepRow>> {
    opts.grid.validate()?;
    let idx = clustered_indices(ds, &opts.splits)?;
    let grads = extract_gradients_for(erm, ds, &idx, subset)?;
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (k, &c) in grads.class_of().iter().enumerate() {
        by_class.entry(c).or_default().push(k);
    }
    let mut rows = Vec::new();
    for (class, pos) in by_class {
        if pos.len() < 2 {
            continue;
        }
        let d = distance_matrix(&grads.rows().select(&pos), opts.metric)?;
        let truth: Option<Vec<i64>> = pos.iter().map(|&k| truth_label(ds, idx[k])).collect();
        for o in evaluate_grid(&d, &opts.grid) {
            let ari = match &truth {
                Some(t) => Some(adjusted_rand_index(t, o.assignment.labels())?),
                None => None,
            };
            rows.push(SweepRow {
                class,
                eps: o.params.eps,
                min_samples: o.params.min_samples,
                ari,
                silhouette: o.silhouette,
                n_clusters: o.assignment.n_clusters(),
                n_outliers: o.assignment.n_outliers(),
            });
        }
    }
    Ok(rows)
}

/// Writes the sweep table; the ARI column is omitted when no row has one.
pub fn write_sweep_csv(rows: &[SweepRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let csv_err = |e: csv::Error| Error::CsvFile {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let with_ari = rows.iter().any(|r| r.ari.is_some());
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["class", "eps", "min_samples"];
    if with_ari {
        header.push("ari");
    }
    header.extend(["silhouette", "n_clusters", "n_outliers"]);
    w.write_record(&header).map_err(csv_err)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        let mut rec = vec![r.class.to_string(), r.eps.to_string(), r.min_samples.to_string()];
        if with_ari {
            rec.push(opt(r.ari));
        }
        rec.extend([opt(r.silhouette), r.n_clusters.to_string(), r.n_outliers.to_string()]);
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}
