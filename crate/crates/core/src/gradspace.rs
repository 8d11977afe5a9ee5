//! Gradient representations and per-class distance matrices.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::matrix::RowMatrix;
use crate::model::{sigmoid, ModelParams};

/// Centered rows with a norm below this are treated as directionless.
pub const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamSubset {
    All,
    /// Weights and bias of the final dense layer only.
    LastLayer,
}

/// Per-sample loss gradients, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientMatrix {
    rows: RowMatrix,
    subset: ParamSubset,
    class_of: Vec<usize>,
    sample_index: Vec<usize>,
}

impl GradientMatrix {
    pub fn rows(&self) -> &RowMatrix {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.class_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_of.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.rows.row(i)
    }

    pub fn subset(&self) -> ParamSubset {
        self.subset
    }

    pub fn class_of(&self) -> &[usize] {
        &self.class_of
    }

    /// Dataset index of every row.
    pub fn sample_index(&self) -> &[usize] {
        &self.sample_index
    }

    /// Row positions belonging to `class`.
    pub fn positions_of_class(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.class_of[i] == class).collect()
    }

    /// Writes `sample,class,g0..g{p-1}`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let csv_err = |e: csv::Error| Error::CsvFile {
            path: path.to_path_buf(),
            message: e.to_string(),
        };
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        let mut header = vec!["sample".to_string(), "class".to_string()];
        header.extend((0..self.dim()).map(|j| format!("g{j}")));
        w.write_record(&header).map_err(csv_err)?;
        for i in 0..self.len() {
            let mut rec = vec![self.sample_index[i].to_string(), self.class_of[i].to_string()];
            rec.extend(self.row(i).iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush()
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }
}

/// Gradients for every sample in the dataset.
pub fn extract_gradients(
    params: &ModelParams,
    ds: &Dataset,
    subset: ParamSubset,
) -> Result<GradientMatrix> {
    let all: Vec<usize> = (0..ds.len()).collect();
    extract_gradients_for(params, ds, &all, subset)
}

/// Gradients of the per-sample loss at `params` for the selected samples,
/// restricted to `subset`.
pub fn extract_gradients_for(
    params: &ModelParams,
    ds: &Dataset,
    indices: &[usize],
    subset: ParamSubset,
) -> Result<GradientMatrix> {
    let d = params.arch().input_dim();
    if ds.dim() != d {
        return Err(Error::Dimension {
            expected: d,
            got: ds.dim(),
        });
    }
    let range = match subset {
        ParamSubset::All => 0..params.arch().n_params(),
        ParamSubset::LastLayer => params.arch().last_layer(),
    };
    let rows: Vec<Vec<f64>> = indices
        .par_iter()
        .map(|&i| {
            let s = ds.sample(i);
            params.sample_grad(&s.x, s.y).map(|g| g[range.clone()].to_vec())
        })
        .collect::<Result<_>>()?;
    let rows = if rows.is_empty() {
        RowMatrix::new(Vec::new(), range.len())?
    } else {
        RowMatrix::from_rows(&rows)?
    };
    Ok(GradientMatrix {
        rows,
        subset,
        class_of: indices.iter().map(|&i| ds.sample(i).y).collect(),
        sample_index: indices.to_vec(),
    })
}

/// `(sigmoid(w.x + b) - y) * (x, 1)`.
pub fn logistic_gradient_closed_form(w: &[f64], b: f64, x: &[f64], y: u8) -> Result<Vec<f64>> {
    if w.len() != x.len() {
        return Err(Error::Dimension {
            expected: w.len(),
            got: x.len(),
        });
    }
    let z: f64 = w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + b;
    let err = sigmoid(z) - f64::from(y);
    let mut g: Vec<f64> = x.iter().map(|v| err * v).collect();
    g.push(err);
    Ok(g)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Euclidean,
    CenteredCosine,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Euclidean => "euclidean",
            Metric::CenteredCosine => "centered_cosine",
        })
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(Metric::Euclidean),
            "centered_cosine" | "cosine" => Ok(Metric::CenteredCosine),
            _ => Err(Error::InvalidInput(format!("unknown metric `{s}`"))),
        }
    }
}

/// Dense symmetric distance matrix with a zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    entries: Vec<f64>,
    metric: Option<Metric>,
    center: Option<Vec<f64>>,
}

impl DistanceMatrix {
    /// Wraps precomputed distances (row-major `n x n`), checking symmetry,
    /// the zero diagonal and nonnegativity.
    pub fn from_entries(n: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != n * n {
            return Err(Error::Dimension {
                expected: n * n,
                got: entries.len(),
            });
        }
        for i in 0..n {
            if entries[i * n + i] != 0.0 {
                return Err(Error::InvalidInput(format!("diagonal entry {i} is not zero")));
            }
            for j in 0..i {
                let (a, b) = (entries[i * n + j], entries[j * n + i]);
                if !a.is_finite() || a < 0.0 || (a - b).abs() > 1e-9 {
                    return Err(Error::InvalidInput(format!(
                        "entries ({i},{j}) and ({j},{i}) are not a valid symmetric distance"
                    )));
                }
            }
        }
        Ok(Self {
            n,
            entries,
            metric: None,
            center: None,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.n..(i + 1) * self.n]
    }

    pub fn metric(&self) -> Option<Metric> {
        self.metric
    }

    /// Mean vector subtracted before the cosine (centered cosine only).
    pub fn center(&self) -> Option<&[f64]> {
        self.center.as_deref()
    }
}

/// Distances between the rows of one class.
///
/// Centered cosine subtracts the row mean, then `D_ij = 1 - cos(f_i - mu, f_j - mu)`.
/// A centered row with norm below [`DEGENERATE_NORM`] is at distance 1 from
/// every other row.
pub fn distance_matrix(rows: &RowMatrix, metric: Metric) -> Result<DistanceMatrix> {
    let n = rows.rows();
    if n < 2 {
        return Err(Error::InvalidInput(format!(
            "distance matrix needs at least 2 rows, got {n}"
        )));
    }
    let mut entries = vec![0.0; n * n];
    let center = match metric {
        Metric::Euclidean => {
            entries.par_chunks_mut(n).enumerate().for_each(|(i, out)| {
                let a = rows.row(i);
                for (j, o) in out.iter_mut().enumerate() {
                    if i != j {
                        let b = rows.row(j);
                        *o = a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt();
                    }
                }
            });
            None
        }
        Metric::CenteredCosine => {
            let mu = rows.column_mean();
            let unit: Vec<Option<Vec<f64>>> = rows
                .iter_rows()
                .map(|r| {
                    let c: Vec<f64> = r.iter().zip(&mu).map(|(v, m)| v - m).collect();
                    let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
                    (norm >= DEGENERATE_NORM).then(|| c.iter().map(|v| v / norm).collect())
                })
                .collect();
            entries.par_chunks_mut(n).enumerate().for_each(|(i, out)| {
                for (j, o) in out.iter_mut().enumerate() {
                    if i == j {
                        continue;
                    }
                    *o = match (&unit[i], &unit[j]) {
                        (Some(a), Some(b)) => {
                            let cos: f64 = a.iter().zip(b).map(|(u, v)| u * v).sum();
                            (1.0 - cos).clamp(0.0, 2.0)
                        }
                        _ => 1.0,
                    };
                }
            });
            Some(mu)
        }
    };
    Ok(DistanceMatrix {
        n,
        entries,
        metric: Some(metric),
        center,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, Sample};
    use crate::model::Architecture;
    use proptest::prelude::*;

    fn rows(r: &[&[f64]]) -> RowMatrix {
        RowMatrix::from_rows(r).unwrap()
    }

    #[test]
    fn closed_form_examples() {
        let g = logistic_gradient_closed_form(&[0.0, 0.0], 0.0, &[2.0, 3.0], 1).unwrap();
        assert_eq!(g, vec![-1.0, -1.5, -0.5]);
        let g = logistic_gradient_closed_form(&[0.0, 0.0], 0.0, &[2.0, 3.0], 0).unwrap();
        assert_eq!(g, vec![1.0, 1.5, 0.5]);
    }

    #[test]
    fn extract_matches_examples() {
        let ds = Dataset::new(
            vec![
                Sample { x: vec![2.0, 3.0], y: 1, group: None, outlier: None },
                Sample { x: vec![10.0, 0.0], y: 1, group: None, outlier: None },
            ],
            2,
        )
        .unwrap();
        let zero = ModelParams::zeros(Architecture::Logistic { d: 2 }).unwrap();
        let g = extract_gradients(&zero, &ds, ParamSubset::All).unwrap();
        assert_eq!(g.row(0), &[-1.0, -1.5, -0.5]);

        let sure = ModelParams::new(Architecture::Logistic { d: 2 }, vec![10.0, 0.0, 0.0]).unwrap();
        let g = extract_gradients(&sure, &ds, ParamSubset::All).unwrap();
        let scale = (100.0f64 + 1.0).sqrt();
        assert!(g.row(1).iter().all(|v| v.abs() <= 1e-9 * scale));
    }

    #[test]
    fn last_layer_subset_is_tail_of_full_gradient() {
        let ds = generate_synthetic(1, false);
        let arch = Architecture::Mlp { d: 2, hidden: vec![6, 5], classes: 2 };
        let m = ModelParams::init(arch.clone(), 3).unwrap();
        let full = extract_gradients_for(&m, &ds, &[0, 500, 999], ParamSubset::All).unwrap();
        let last = extract_gradients_for(&m, &ds, &[0, 500, 999], ParamSubset::LastLayer).unwrap();
        assert_eq!(last.dim(), 6 * 2);
        for i in 0..3 {
            assert_eq!(last.row(i), &full.row(i)[arch.last_layer()]);
        }
        assert_eq!(full.sample_index(), &[0, 500, 999]);
        assert_eq!(full.class_of(), &[0, 1, 1]);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let ds = generate_synthetic(0, false);
        let m = ModelParams::zeros(Architecture::Logistic { d: 3 }).unwrap();
        assert!(extract_gradients(&m, &ds, ParamSubset::All).is_err());
    }

    #[test]
    fn cosine_examples() {
        let mu = [1.0, 2.0];
        let u = [0.3, -0.7];
        let d = distance_matrix(
            &rows(&[&[mu[0] + u[0], mu[1] + u[1]], &[mu[0] - u[0], mu[1] - u[1]]]),
            Metric::CenteredCosine,
        )
        .unwrap();
        assert!((d.get(0, 1) - 2.0).abs() < 1e-12);
        assert_eq!(d.get(0, 0), 0.0);

        // Centered rows (1,0),(0,1),(-1,-1): the first two are orthogonal.
        let d = distance_matrix(&rows(&[&[1.0, 0.0], &[0.0, 1.0], &[-1.0, -1.0]]), Metric::CenteredCosine)
            .unwrap();
        assert!((d.get(0, 1) - 1.0).abs() < 1e-12);
        assert_eq!(d.center(), Some(&[0.0, 0.0][..]));
    }

    #[test]
    fn euclidean_example() {
        let d = distance_matrix(&rows(&[&[0.0, 0.0], &[3.0, 4.0]]), Metric::Euclidean).unwrap();
        assert_eq!(d.get(0, 1), 5.0);
        assert_eq!(d.get(1, 0), 5.0);
    }

    #[test]
    fn degenerate_rows_are_neutral() {
        // The middle row equals the mean.
        let d = distance_matrix(&rows(&[&[-1.0, 0.0], &[0.0, 0.0], &[1.0, 0.0]]), Metric::CenteredCosine)
            .unwrap();
        assert_eq!(d.get(1, 0), 1.0);
        assert_eq!(d.get(1, 2), 1.0);
        assert_eq!(d.get(1, 1), 0.0);
        assert!((d.get(0, 2) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn too_few_rows() {
        assert!(distance_matrix(&rows(&[&[1.0]]), Metric::Euclidean).is_err());
    }

    #[test]
    fn from_entries_validates() {
        assert!(DistanceMatrix::from_entries(2, vec![0.0, 1.0, 1.0, 0.0]).is_ok());
        assert!(DistanceMatrix::from_entries(2, vec![0.0, 1.0, 2.0, 0.0]).is_err());
        assert!(DistanceMatrix::from_entries(2, vec![1.0, 1.0, 1.0, 0.0]).is_err());
    }

    proptest! {
        #[test]
        fn distance_invariants(
            data in proptest::collection::vec(-5.0f64..5.0, 12..40),
            lambda in 0.01f64..100.0,
        ) {
            let n = data.len() / 3;
            let m = RowMatrix::new(data[..n * 3].to_vec(), 3).unwrap();
            for metric in [Metric::Euclidean, Metric::CenteredCosine] {
                let d = distance_matrix(&m, metric).unwrap();
                for i in 0..n {
                    prop_assert_eq!(d.get(i, i), 0.0);
                    for j in 0..n {
                        prop_assert!((d.get(i, j) - d.get(j, i)).abs() <= 1e-9);
                        prop_assert!(d.get(i, j) >= 0.0);
                        if metric == Metric::CenteredCosine {
                            prop_assert!(d.get(i, j) <= 2.0);
                        }
                    }
                }
            }
            let a = distance_matrix(&m, Metric::CenteredCosine).unwrap();
            let b = distance_matrix(&m.scaled(lambda), Metric::CenteredCosine).unwrap();
            for i in 0..n {
                for j in 0..n {
                    prop_assert!((a.get(i, j) - b.get(i, j)).abs() <= 1e-9);
                }
            }
        }
    }
}
