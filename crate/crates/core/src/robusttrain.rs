//! Group-DRO training with online exponentiated-gradient group weights,
//! worst-group evaluation, and validation-based model selection.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::model::{accuracy, fit, Architecture, BatchObjective, ModelParams, TrainConfig, train_erm};

/// A point on the probability simplex over groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupWeights(Vec<f64>);

impl GroupWeights {
    pub fn uniform(k: usize) -> Self {
        Self(vec![1.0 / k as f64; k])
    }

    pub fn new(q: Vec<f64>) -> Result<Self> {
        if q.is_empty() || q.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidInput("group weights must be nonnegative".into()));
        }
        let sum: f64 = q.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!("group weights sum to {sum}, not 1")));
        }
        Ok(Self(q))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `q_k <- q_k * exp(eta * loss_k)` for the groups with a loss, then
    /// renormalize over all groups.
    pub fn exponentiated_step(&mut self, eta: f64, losses: &[Option<f64>]) {
        for (q, l) in self.0.iter_mut().zip(losses) {
            if let Some(l) = l {
                *q *= (eta * l).exp();
            }
        }
        let sum: f64 = self.0.iter().sum();
        for q in self.0.iter_mut() {
            *q /= sum;
        }
    }
}

struct GroupDro {
    q: GroupWeights,
    eta: f64,
    trace: Vec<GroupWeights>,
}

impl BatchObjective for GroupDro {
    fn coefficients(&mut self, counts: &[usize], loss_sums: &[f64]) -> Vec<f64> {
        let means: Vec<Option<f64>> = counts
            .iter()
            .zip(loss_sums)
            .map(|(&n, &s)| (n > 0).then(|| s / n as f64))
            .collect();
        self.q.exponentiated_step(self.eta, &means);
        self.trace.push(self.q.clone());
        self.q
            .as_slice()
            .iter()
            .zip(counts)
            .map(|(&q, &n)| if n > 0 { q / n as f64 } else { 0.0 })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GdroFit {
    pub params: ModelParams,
    pub q: GroupWeights,
    /// Group weights after every minibatch update.
    pub q_trace: Vec<GroupWeights>,
}

/// Train-split samples that carry a group, with their group ids. Errors if a
/// group in `0..n_groups` has no sample.
fn grouped_train(ds: &Dataset, groups: &[Option<usize>], n_groups: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    if groups.len() != ds.len() {
        return Err(Error::Dimension {
            expected: ds.len(),
            got: groups.len(),
        });
    }
    let mut idx = Vec::new();
    let mut slots = Vec::new();
    let mut seen = vec![false; n_groups];
    for i in ds.indices(Split::Train) {
        if let Some(g) = groups[i] {
            if g >= n_groups {
                return Err(Error::InvalidInput(format!(
                    "sample {i} has group {g}, but only {n_groups} groups"
                )));
            }
            seen[g] = true;
            idx.push(i);
            slots.push(g);
        }
    }
    if idx.is_empty() {
        return Err(Error::EmptyTrainSplit);
    }
    if let Some(g) = seen.iter().position(|s| !s) {
        return Err(Error::EmptyGroup(g));
    }
    Ok((idx, slots))
}

/// Online group DRO. `groups[i]` is the group of sample `i`; train samples
/// with `None` (removed outliers) are skipped. Each minibatch updates the
/// group weights from the per-group mean losses of the groups it contains,
/// then descends `sum_k q_k * mean_loss_k`.
pub fn train_gdro(
    ds: &Dataset,
    groups: &[Option<usize>],
    n_groups: usize,
    arch: &Architecture,
    cfg: &TrainConfig,
    eta_q: f64,
) -> Result<GdroFit> {
    if !(eta_q.is_finite() && eta_q >= 0.0) {
        return Err(Error::InvalidInput(format!("eta_q must be nonnegative, got {eta_q}")));
    }
    if n_groups == 0 {
        return Err(Error::InvalidInput("need at least one group".into()));
    }
    let (idx, slots) = grouped_train(ds, groups, n_groups)?;
    let init = ModelParams::init(arch.clone(), cfg.seed)?;
    let mut objective = GroupDro {
        q: GroupWeights::uniform(n_groups),
        eta: eta_q,
        trace: Vec::new(),
    };
    let params = fit(init, ds, &idx, &slots, n_groups, cfg, &mut objective)?;
    Ok(GdroFit {
        params,
        q: objective.q,
        q_trace: objective.trace,
    })
}

/// Where evaluation takes group labels from.
#[derive(Debug, Clone, Copy)]
pub enum GroupSource<'a> {
    True,
    /// Per-sample predicted groups; `None` or `-1` excludes the sample.
    Inferred(&'a [Option<i64>]),
}

impl fmt::Display for GroupSource<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GroupSource::True => "true",
            GroupSource::Inferred(_) => "inferred",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAccuracy {
    pub group: usize,
    pub count: usize,
    pub correct: usize,
    /// `None` when the group has no sample in the split.
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub group_source: String,
    pub per_group: Vec<GroupAccuracy>,
    pub worst: f64,
    /// Group accuracies weighted by `train_group_fractions` (renormalized
    /// over the groups present in the split).
    pub average: f64,
    pub overall: f64,
    pub train_group_fractions: Vec<f64>,
    /// Groups absent from the split, excluded from `worst` and `average`.
    pub missing_groups: Vec<usize>,
}

pub fn evaluate(
    params: &ModelParams,
    ds: &Dataset,
    split: Split,
    source: GroupSource<'_>,
    train_group_fracs: &[f64],
) -> Result<EvalReport> {
    let k = train_group_fracs.len();
    if k == 0 {
        return Err(Error::InvalidInput("need at least one group fraction".into()));
    }
    let mut count = vec![0usize; k];
    let mut correct = vec![0usize; k];
    for i in ds.indices(split) {
        let s = ds.sample(i);
        let g = match source {
            GroupSource::True => Some(s.group.ok_or_else(|| {
                Error::InvalidInput("dataset has no true group labels".into())
            })? as i64),
            GroupSource::Inferred(groups) => groups.get(i).copied().flatten(),
        };
        let Some(g) = g.filter(|g| *g >= 0) else { continue };
        let g = g as usize;
        if g >= k {
            return Err(Error::InvalidInput(format!(
                "sample {i} has group {g}, but only {k} group fractions were given"
            )));
        }
        count[g] += 1;
        if params.predict(&s.x)? == s.y {
            correct[g] += 1;
        }
    }
    let per_group: Vec<GroupAccuracy> = (0..k)
        .map(|g| GroupAccuracy {
            group: g,
            count: count[g],
            correct: correct[g],
            accuracy: (count[g] > 0).then(|| correct[g] as f64 / count[g] as f64),
        })
        .collect();
    let present: Vec<&GroupAccuracy> = per_group.iter().filter(|g| g.accuracy.is_some()).collect();
    if present.is_empty() {
        return Err(Error::InvalidInput(format!("no grouped samples in the {split} split")));
    }
    let worst = present
        .iter()
        .map(|g| g.accuracy.unwrap())
        .fold(f64::INFINITY, f64::min);
    let weight: f64 = present.iter().map(|g| train_group_fracs[g.group]).sum();
    let average = if weight > 0.0 {
        present
            .iter()
            .map(|g| train_group_fracs[g.group] * g.accuracy.unwrap())
            .sum::<f64>()
            / weight
    } else {
        worst
    };
    let total: usize = count.iter().sum();
    let overall = correct.iter().sum::<usize>() as f64 / total as f64;
    Ok(EvalReport {
        split,
        group_source: source.to_string(),
        per_group,
        worst,
        average: average.max(worst),
        overall,
        train_group_fractions: train_group_fracs.to_vec(),
        missing_groups: (0..k).filter(|&g| count[g] == 0).collect(),
    })
}

/// Fraction of train-split samples per group over `0..n_groups`; samples
/// without a group are ignored.
pub fn train_group_fractions(ds: &Dataset, groups: &[Option<usize>], n_groups: usize) -> Vec<f64> {
    let mut counts = vec![0usize; n_groups];
    for i in ds.indices(Split::Train) {
        if let Some(g) = groups[i] {
            if g < n_groups {
                counts[g] += 1;
            }
        }
    }
    let total: usize = counts.iter().sum();
    counts
        .iter()
        .map(|&c| if total > 0 { c as f64 / total as f64 } else { 0.0 })
        .collect()
}

/// Hyperparameter grid for model selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainGrid {
    pub learning_rates: Vec<f64>,
    pub weight_decays: Vec<f64>,
    #[serde(default = "default_eta_q")]
    pub eta_q: Vec<f64>,
}

fn default_eta_q() -> Vec<f64> {
    vec![0.001, 0.01, 0.1]
}

impl Default for TrainGrid {
    fn default() -> Self {
        Self {
            learning_rates: vec![1e-5, 1e-4, 1e-3],
            weight_decays: vec![1e-4, 1e-3, 1e-2],
            eta_q: default_eta_q(),
        }
    }
}

impl TrainGrid {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rates.is_empty() || self.weight_decays.is_empty() || self.eta_q.is_empty() {
            return Err(Error::InvalidInput("training grids must be nonempty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub eta_q: Option<f64>,
    /// Worst-group validation accuracy (gDRO) or overall validation accuracy (ERM).
    pub val_score: f64,
    /// Secondary key: weighted-average validation accuracy (gDRO) or 0 (ERM).
    pub val_tiebreak: f64,
}

#[derive(Debug, Clone)]
pub struct Selected {
    pub params: ModelParams,
    pub chosen: Candidate,
    pub candidates: Vec<Candidate>,
}

fn pick(cands: Vec<(Candidate, ModelParams)>) -> Selected {
    let mut best = 0;
    for (i, (c, _)) in cands.iter().enumerate() {
        let b = &cands[best].0;
        if c.val_score > b.val_score || (c.val_score == b.val_score && c.val_tiebreak > b.val_tiebreak) {
            best = i;
        }
    }
    let candidates = cands.iter().map(|(c, _)| c.clone()).collect();
    let (chosen, params) = cands.into_iter().nth(best).unwrap();
    Selected {
        params,
        chosen,
        candidates,
    }
}

/// Trains gDRO for every grid point and keeps the model with the best
/// worst-group validation accuracy under `val_groups` (ties: higher weighted
/// average, then grid order).
pub fn select_gdro(
    ds: &Dataset,
    train_groups: &[Option<usize>],
    n_groups: usize,
    val_groups: GroupSource<'_>,
    arch: &Architecture,
    base: &TrainConfig,
    grid: &TrainGrid,
) -> Result<Selected> {
    grid.validate()?;
    let fracs = train_group_fractions(ds, train_groups, n_groups);
    let points: Vec<(f64, f64, f64)> = grid
        .learning_rates
        .iter()
        .flat_map(|&lr| {
            grid.weight_decays
                .iter()
                .flat_map(move |&wd| grid.eta_q.iter().map(move |&eta| (lr, wd, eta)))
        })
        .collect();
    let cands = points
        .par_iter()
        .map(|&(lr, wd, eta)| {
            let cfg = TrainConfig {
                learning_rate: lr,
                weight_decay: wd,
                ..base.clone()
            };
            let fit = train_gdro(ds, train_groups, n_groups, arch, &cfg, eta)?;
            let report = evaluate(&fit.params, ds, Split::Val, val_groups, &fracs)?;
            Ok((
                Candidate {
                    learning_rate: lr,
                    weight_decay: wd,
                    eta_q: Some(eta),
                    val_score: report.worst,
                    val_tiebreak: report.average,
                },
                fit.params,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(pick(cands))
}

/// Trains ERM for every (learning rate, weight decay) and keeps the model
/// with the best overall validation accuracy.
pub fn select_erm(ds: &Dataset, arch: &Architecture, base: &TrainConfig, grid: &TrainGrid) -> Result<Selected> {
    grid.validate()?;
    let val = ds.indices(Split::Val);
    let points: Vec<(f64, f64)> = grid
        .learning_rates
        .iter()
        .flat_map(|&lr| grid.weight_decays.iter().map(move |&wd| (lr, wd)))
        .collect();
    let cands = points
        .par_iter()
        .map(|&(lr, wd)| {
            let cfg = TrainConfig {
                learning_rate: lr,
                weight_decay: wd,
                ..base.clone()
            };
            let params = train_erm(ds, arch, &cfg)?;
            let score = if val.is_empty() { 0.0 } else { accuracy(&params, ds, &val)? };
            Ok((
                Candidate {
                    learning_rate: lr,
                    weight_decay: wd,
                    eta_q: None,
                    val_score: score,
                    val_tiebreak: 0.0,
                },
                params,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(pick(cands))
}
