//! Config-driven orchestration: every CLI subcommand is a prefix of the full
//! pipeline run against one output directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clustering::OUTLIER;
use crate::dataset::{
    self, generate_synthetic, group_stats, load_csv, CsvSchema, Dataset, GroupStat, Split, SplitRatios,
};
use crate::error::{Error, Result};
use crate::gradspace::{extract_gradients_for, Metric, ParamSubset};
use crate::groupinfer::{
    feasp, grasp, sweep_report, write_sweep_csv, ClassSelection, DbscanGrid, GroupInferenceResult, InferOptions,
    Selection, SweepRow,
};
use crate::model::{save_checkpoint, train_erm, ArchSpec, ModelParams, TrainConfig};
use crate::robusttrain::{
    evaluate, select_erm, select_gdro, train_group_fractions, EvalReport, GroupAccuracy, GroupSource, Selected,
    TrainGrid,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Synthetic {
        #[serde(default)]
        seed: u64,
        #[serde(default)]
        contaminate: bool,
    },
    Csv {
        path: PathBuf,
        #[serde(default)]
        schema: CsvSchema,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
    /// Keep the split column of a CSV source instead of re-splitting.
    pub from_data: bool,
}

impl Default for SplitConfig {
    fn default() -> Self {
        let r = SplitRatios::default();
        Self {
            train: r.train,
            val: r.val,
            test: r.test,
            seed: 0,
            from_data: false,
        }
    }
}

impl SplitConfig {
    pub fn ratios(&self) -> SplitRatios {
        SplitRatios {
            train: self.train,
            val: self.val,
            test: self.test,
        }
    }
}

/// The model whose per-sample gradients are clustered.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ErmStage {
    pub arch: ArchSpec,
    pub train: TrainConfig,
}

impl Default for ErmStage {
    fn default() -> Self {
        Self {
            arch: ArchSpec::Linear,
            train: TrainConfig {
                learning_rate: 1e-2,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceStage {
    pub subset: ParamSubset,
    pub metric: Metric,
    pub grid: DbscanGrid,
    pub selection: Selection,
}

impl Default for InferenceStage {
    fn default() -> Self {
        Self {
            subset: ParamSubset::All,
            metric: Metric::CenteredCosine,
            grid: DbscanGrid::default(),
            selection: Selection::PerClass,
        }
    }
}

impl InferenceStage {
    pub fn options(&self) -> InferOptions {
        InferOptions {
            grid: self.grid.clone(),
            metric: self.metric,
            selection: self.selection,
            ..InferOptions::default()
        }
    }
}

/// Downstream training: ERM baseline, gDRO on inferred groups and, when true
/// groups exist, oracle gDRO. Learning rate and weight decay in `train` are
/// replaced by the grid values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GdroStage {
    pub arch: ArchSpec,
    pub train: TrainConfig,
    pub grid: TrainGrid,
    pub oracle: bool,
}

impl Default for GdroStage {
    fn default() -> Self {
        Self {
            arch: ArchSpec::Mlp {
                hidden: crate::model::DEFAULT_HIDDEN.to_vec(),
            },
            train: TrainConfig::default(),
            grid: TrainGrid::default(),
            oracle: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub dataset: DatasetSource,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub erm: ErmStage,
    #[serde(default)]
    pub inference: InferenceStage,
    #[serde(default)]
    pub gdro: GdroStage,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

impl PipelineConfig {
    /// Default settings on the synthetic benchmark with every seed set to `seed`.
    pub fn synthetic(seed: u64, contaminate: bool) -> Self {
        let mut cfg = Self {
            dataset: DatasetSource::Synthetic { seed, contaminate },
            split: SplitConfig::default(),
            erm: ErmStage::default(),
            inference: InferenceStage::default(),
            gdro: GdroStage::default(),
            output_dir: default_output_dir(),
        };
        cfg.override_seed(seed);
        cfg
    }

    /// Parses TOML; relative CSV paths are resolved against `base_dir`.
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if let DatasetSource::Csv { path, .. } = &mut cfg.dataset {
            if path.is_relative() {
                *path = base_dir.join(&*path);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_toml(&text, base)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |e: Error| Error::Config(e.to_string());
        if let DatasetSource::Csv { path, .. } = &self.dataset {
            if !path.is_file() {
                return Err(Error::Config(format!("dataset file {} does not exist", path.display())));
            }
        }
        if !self.split.from_data {
            self.split.ratios().validate().map_err(bad)?;
        }
        self.erm.train.validate().map_err(bad)?;
        self.inference.grid.validate().map_err(bad)?;
        self.gdro.train.validate().map_err(bad)?;
        self.gdro.grid.validate().map_err(bad)?;
        if self.gdro.grid.learning_rates.iter().chain(&self.gdro.grid.eta_q).any(|v| !(v.is_finite() && *v >= 0.0))
            || self.gdro.grid.weight_decays.iter().any(|v| !(v.is_finite() && *v >= 0.0))
        {
            return Err(Error::Config("training grids must hold nonnegative finite values".into()));
        }
        Ok(())
    }

    /// Replaces every seed in the config.
    pub fn override_seed(&mut self, seed: u64) {
        if let DatasetSource::Synthetic { seed: s, .. } = &mut self.dataset {
            *s = seed;
        }
        self.split.seed = seed;
        self.erm.train.seed = seed;
        self.gdro.train.seed = seed;
    }

    pub fn seeds(&self) -> Seeds {
        Seeds {
            dataset: match self.dataset {
                DatasetSource::Synthetic { seed, .. } => Some(seed),
                DatasetSource::Csv { .. } => None,
            },
            split: self.split.seed,
            erm: self.erm.train.seed,
            gdro: self.gdro.train.seed,
        }
    }

    /// SHA-256 of the canonical JSON form, excluding `output_dir`.
    pub fn hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = value.as_object_mut() {
            map.remove("output_dir");
        }
        hex::encode(Sha256::digest(value.to_string().as_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub dataset: Option<u64>,
    pub split: u64,
    pub erm: u64,
    pub gdro: u64,
}

/// Attached to every artifact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stamp {
    pub config_hash: String,
    pub seeds: Seeds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub stamp: Stamp,
    pub n_samples: usize,
    pub dim: usize,
    pub n_classes: usize,
    pub n_groups: usize,
    pub split_counts: BTreeMap<String, usize>,
    pub n_outliers: usize,
    pub groups: Vec<GroupStat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceSummary {
    pub ari: Option<f64>,
    pub n_groups: usize,
    pub n_outliers: usize,
    pub outlier_precision: Option<f64>,
    pub outlier_recall: Option<f64>,
    pub per_class: Vec<ClassSelection>,
    pub warnings: Vec<String>,
}

impl InferenceSummary {
    fn new(r: &GroupInferenceResult, ds: &Dataset) -> Self {
        let score = r.outlier_score(ds);
        Self {
            ari: ds.has_groups().then(|| r.ari_vs_truth(ds).ok()).flatten(),
            n_groups: r.n_groups(),
            n_outliers: r.n_outliers(),
            outlier_precision: score.as_ref().and_then(|s| s.precision),
            outlier_recall: score.as_ref().and_then(|s| s.recall),
            per_class: r.per_class.clone(),
            warnings: r.warnings.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: String,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub eta_q: Option<f64>,
    pub val_score: f64,
    pub report: EvalReport,
}

impl MethodResult {
    fn new(method: &str, sel: &Selected, report: EvalReport) -> Self {
        Self {
            method: method.to_string(),
            learning_rate: sel.chosen.learning_rate,
            weight_decay: sel.chosen.weight_decay,
            eta_q: sel.chosen.eta_q,
            val_score: sel.chosen.val_score,
            report,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub stamp: Stamp,
    /// Split and group source every method is scored on.
    pub split: Split,
    pub group_source: String,
    /// How the weights of the average accuracy were obtained.
    pub average_weights: String,
    pub methods: Vec<MethodResult>,
}

impl Evaluation {
    pub fn method(&self, name: &str) -> Option<&MethodResult> {
        self.methods.iter().find(|m| m.method == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub stamp: Stamp,
    pub dataset: DatasetStats,
    pub grasp: InferenceSummary,
    pub feasp: InferenceSummary,
    pub evaluation: Evaluation,
}

/// Inferred groups prepared for gDRO: outliers dropped, ids compacted to the
/// groups present in the train split.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingGroups {
    pub train: Vec<Option<usize>>,
    /// Validation groups with the same compact ids; `None` for outliers,
    /// non-validation samples and groups absent from train.
    pub val: Vec<Option<i64>>,
    pub n_groups: usize,
    /// Inferred id of each compact id.
    pub inferred_ids: Vec<i64>,
}

pub fn training_groups(ds: &Dataset, inferred: &GroupInferenceResult) -> TrainingGroups {
    let by_sample = inferred.groups_by_sample(ds.len());
    let mut compact: BTreeMap<i64, usize> = BTreeMap::new();
    for i in ds.indices(Split::Train) {
        if let Some(g) = by_sample[i].filter(|&g| g != OUTLIER) {
            compact.entry(g).or_insert(0);
        }
    }
    let inferred_ids: Vec<i64> = compact.keys().copied().collect();
    for (k, v) in compact.values_mut().enumerate() {
        *v = k;
    }
    let lookup = |i: usize| by_sample[i].and_then(|g| compact.get(&g).copied());
    let train = (0..ds.len())
        .map(|i| if ds.split_of(i) == Split::Train { lookup(i) } else { None })
        .collect();
    let val = (0..ds.len())
        .map(|i| if ds.split_of(i) == Split::Val { lookup(i).map(|g| g as i64) } else { None })
        .collect();
    TrainingGroups {
        train,
        val,
        n_groups: inferred_ids.len(),
        inferred_ids,
    }
}

pub struct Inference {
    pub grasp: GroupInferenceResult,
    pub feasp: GroupInferenceResult,
}

pub struct Downstream {
    pub erm: Selected,
    pub grasp_gdro: Selected,
    pub oracle_gdro: Option<Selected>,
    pub groups: TrainingGroups,
}

/// One output directory with a fixed config.
pub struct Run {
    cfg: PipelineConfig,
    stamp: Stamp,
    dir: PathBuf,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into())
}

impl Run {
    pub fn new(cfg: PipelineConfig, dir: impl Into<PathBuf>) -> Result<Self> {
        cfg.validate()?;
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        let stamp = Stamp {
            config_hash: cfg.hash(),
            seeds: cfg.seeds(),
        };
        Ok(Self { cfg, stamp, dir })
    }

    /// A fresh directory `<parent>/<hash prefix>-<unix seconds>`.
    pub fn in_new_dir(cfg: PipelineConfig, parent: &Path) -> Result<Self> {
        cfg.validate()?;
        let secs = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let base = format!("{}-{secs}", &cfg.hash()[..12]);
        let mut dir = parent.join(&base);
        let mut n = 1;
        while dir.exists() {
            dir = parent.join(format!("{base}-{n}"));
            n += 1;
        }
        Self::new(cfg, dir)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn stamp(&self) -> &Stamp {
        &self.stamp
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn meta(&self, extra: serde_json::Value) -> serde_json::Value {
        serde_json::json!({ "stamp": self.stamp, "info": extra })
    }

    /// Runs `f` as stage `name`; failures leave a `FAILED` marker.
    fn stage<T>(&self, name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        log::info!("stage {name}");
        f().map_err(|e| {
            let _ = std::fs::write(self.path("FAILED"), format!("stage: {name}\nerror: {e}\n"));
            Error::Stage {
                stage: name.to_string(),
                source: Box::new(e),
            }
        })
    }

    fn load_dataset(&self) -> Result<Dataset> {
        let ds = match &self.cfg.dataset {
            DatasetSource::Synthetic { seed, contaminate } => generate_synthetic(*seed, *contaminate),
            DatasetSource::Csv { path, schema } => load_csv(path, schema)?,
        };
        if self.cfg.split.from_data {
            Ok(ds)
        } else {
            dataset::split(ds, self.cfg.split.ratios(), self.cfg.split.seed)
        }
    }

    /// Writes `dataset.csv` and `stats.json`.
    pub fn generate(&self) -> Result<Dataset> {
        self.stage("generate", || {
            let ds = self.load_dataset()?;
            dataset::write_csv(&ds, self.path("dataset.csv"))?;
            let counts = ds.split_counts();
            let stats = DatasetStats {
                stamp: self.stamp.clone(),
                n_samples: ds.len(),
                dim: ds.dim(),
                n_classes: ds.n_classes(),
                n_groups: ds.n_groups().unwrap_or(0),
                split_counts: [Split::Train, Split::Val, Split::Test]
                    .into_iter()
                    .map(|s| (s.to_string(), counts[s as usize]))
                    .collect(),
                n_outliers: ds.outlier_count(),
                groups: if ds.has_groups() { group_stats(&ds)? } else { Vec::new() },
            };
            write_json(&self.path("stats.json"), &stats)?;
            Ok(ds)
        })
    }

    fn dataset_stats(&self) -> Result<DatasetStats> {
        let text = std::fs::read_to_string(self.path("stats.json"))
            .map_err(|e| Error::io("reading stats.json", e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Trains the gradient model; writes `erm_model.json`.
    pub fn erm(&self, ds: &Dataset) -> Result<ModelParams> {
        self.stage("erm", || {
            let arch = self.cfg.erm.arch.resolve(ds.dim(), ds.n_classes())?;
            let params = train_erm(ds, &arch, &self.cfg.erm.train)?;
            save_checkpoint(
                &params,
                self.path("erm_model.json"),
                Some(self.meta(serde_json::to_value(&self.cfg.erm.train)?)),
            )?;
            Ok(params)
        })
    }

    /// Writes `gradients.csv` for the clustered splits.
    pub fn gradients(&self, ds: &Dataset, erm: &ModelParams) -> Result<()> {
        self.stage("gradients", || {
            let idx = ds.indices_in(&self.cfg.inference.options().splits);
            let g = extract_gradients_for(erm, ds, &idx, self.cfg.inference.subset)?;
            g.write_csv(self.path("gradients.csv"))
        })
    }

    /// GraSP and FeaSP; writes `groups.csv`/`groups.json` and the `feasp_` pair.
    pub fn infer(&self, ds: &Dataset, erm: &ModelParams) -> Result<Inference> {
        self.stage("infer", || {
            let opts = self.cfg.inference.options();
            let g = grasp(ds, erm, self.cfg.inference.subset, &opts)?;
            let f = feasp(ds, &opts)?;
            for (r, name) in [(&g, "groups"), (&f, "feasp_groups")] {
                for w in &r.warnings {
                    log::warn!("{name}: {w}");
                }
                r.write_csv(self.path(&format!("{name}.csv")))?;
                let mut side = serde_json::to_value(r.sidecar())?;
                side["stamp"] = serde_json::to_value(&self.stamp)?;
                write_json(&self.path(&format!("{name}.json")), &side)?;
            }
            Ok(Inference { grasp: g, feasp: f })
        })
    }

    fn base_train(&self) -> TrainConfig {
        self.cfg.gdro.train.clone()
    }

    /// ERM baseline, gDRO on the inferred groups and optional oracle gDRO;
    /// writes one checkpoint per method plus `selection.json`.
    pub fn gdro(&self, ds: &Dataset, inferred: &GroupInferenceResult) -> Result<Downstream> {
        self.stage("gdro", || {
            let arch = self.cfg.gdro.arch.resolve(ds.dim(), ds.n_classes())?;
            let base = self.base_train();
            let grid = &self.cfg.gdro.grid;
            let groups = training_groups(ds, inferred);
            if groups.n_groups == 0 {
                return Err(Error::InvalidInput("no inferred group has training samples".into()));
            }
            let erm = select_erm(ds, &arch, &base, grid)?;
            let grasp_gdro = select_gdro(
                ds,
                &groups.train,
                groups.n_groups,
                GroupSource::Inferred(&groups.val),
                &arch,
                &base,
                grid,
            )?;
            let oracle_gdro = match ds.true_groups() {
                Some(truth) if self.cfg.gdro.oracle => {
                    let truth: Vec<Option<usize>> = truth.into_iter().map(Some).collect();
                    Some(select_gdro(ds, &truth, ds.n_groups().unwrap_or(0), GroupSource::True, &arch, &base, grid)?)
                }
                _ => None,
            };
            let mut selection = serde_json::Map::new();
            selection.insert("stamp".into(), serde_json::to_value(&self.stamp)?);
            selection.insert("grid".into(), serde_json::to_value(grid)?);
            selection.insert("inferred_group_ids".into(), serde_json::to_value(&groups.inferred_ids)?);
            for (name, sel) in [("erm", Some(&erm)), ("grasp_gdro", Some(&grasp_gdro)), ("oracle_gdro", oracle_gdro.as_ref())] {
                if let Some(sel) = sel {
                    let file = if name == "erm" { "erm_baseline" } else { name };
                    save_checkpoint(
                        &sel.params,
                        self.path(&format!("{file}_model.json")),
                        Some(self.meta(serde_json::to_value(&sel.chosen)?)),
                    )?;
                    selection.insert(
                        name.into(),
                        serde_json::json!({ "chosen": sel.chosen, "candidates": sel.candidates }),
                    );
                }
            }
            write_json(&self.path("selection.json"), &selection)?;
            Ok(Downstream {
                erm,
                grasp_gdro,
                oracle_gdro,
                groups,
            })
        })
    }

    /// Worst-group and average accuracy of every downstream model; writes
    /// `eval.json` and `eval.txt`. With true groups the test split is scored
    /// and averages use pre-removal true train fractions; otherwise the
    /// validation split is scored with the inferred groups.
    pub fn evaluate(&self, ds: &Dataset, down: &Downstream) -> Result<Evaluation> {
        self.stage("evaluate", || {
            let (split, source, fracs, weights) = match ds.true_groups() {
                Some(truth) => {
                    let truth: Vec<Option<usize>> = truth.into_iter().map(Some).collect();
                    (
                        Split::Test,
                        GroupSource::True,
                        train_group_fractions(ds, &truth, ds.n_groups().unwrap_or(0)),
                        "true train-split group fractions before outlier removal",
                    )
                }
                None => (
                    Split::Val,
                    GroupSource::Inferred(&down.groups.val),
                    train_group_fractions(ds, &down.groups.train, down.groups.n_groups),
                    "inferred train-split group fractions after outlier removal",
                ),
            };
            let mut methods = Vec::new();
            for (name, sel) in [
                ("erm", Some(&down.erm)),
                ("grasp_gdro", Some(&down.grasp_gdro)),
                ("oracle_gdro", down.oracle_gdro.as_ref()),
            ] {
                if let Some(sel) = sel {
                    let report = evaluate(&sel.params, ds, split, source, &fracs)?;
                    methods.push(MethodResult::new(name, sel, report));
                }
            }
            let ev = Evaluation {
                stamp: self.stamp.clone(),
                split,
                group_source: source.to_string(),
                average_weights: weights.to_string(),
                methods,
            };
            write_json(&self.path("eval.json"), &ev)?;
            write_text(&self.path("eval.txt"), &eval_table(&ev))?;
            Ok(ev)
        })
    }

    /// Writes `sweep.csv`; the ARI column is dropped without true groups.
    pub fn sweep(&self, ds: &Dataset, erm: &ModelParams) -> Result<Vec<SweepRow>> {
        self.stage("sweep", || {
            if !ds.has_groups() {
                log::warn!("dataset has no true groups; sweep omits the ARI column");
            }
            let rows = sweep_report(ds, erm, self.cfg.inference.subset, &self.cfg.inference.options())?;
            write_sweep_csv(&rows, self.path("sweep.csv"))?;
            Ok(rows)
        })
    }

    /// All stages, then `summary.json`, `summary.txt` and `manifest.json`.
    pub fn pipeline(&self) -> Result<Summary> {
        let ds = self.generate()?;
        let erm = self.erm(&ds)?;
        self.gradients(&ds, &erm)?;
        let inf = self.infer(&ds, &erm)?;
        let down = self.gdro(&ds, &inf.grasp)?;
        let evaluation = self.evaluate(&ds, &down)?;
        self.stage("summary", || {
            let summary = Summary {
                stamp: self.stamp.clone(),
                dataset: self.dataset_stats()?,
                grasp: InferenceSummary::new(&inf.grasp, &ds),
                feasp: InferenceSummary::new(&inf.feasp, &ds),
                evaluation,
            };
            write_json(&self.path("summary.json"), &summary)?;
            write_text(&self.path("summary.txt"), &summary_table(&summary))?;
            self.write_manifest()?;
            Ok(summary)
        })
    }

    /// SHA-256 of every file in the run directory except the manifest.
    fn write_manifest(&self) -> Result<()> {
        let mut files = BTreeMap::new();
        let entries = std::fs::read_dir(&self.dir).map_err(|e| Error::io("listing run directory", e))?;
        for entry in entries {
            let entry = entry.map_err(|e| Error::io("listing run directory", e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if name == "manifest.json" || !entry.path().is_file() {
                continue;
            }
            let bytes = std::fs::read(entry.path()).map_err(|e| Error::io(format!("reading {name}"), e))?;
            files.insert(name, hex::encode(Sha256::digest(&bytes)));
        }
        write_json(
            &self.path("manifest.json"),
            &serde_json::json!({ "stamp": self.stamp, "config": self.cfg, "files": files }),
        )
    }
}

fn group_row(per_group: &[GroupAccuracy]) -> String {
    per_group
        .iter()
        .map(|g| format!("g{}={}", g.group, opt(g.accuracy)))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn eval_table(ev: &Evaluation) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "split: {}  groups: {}", ev.split, ev.group_source);
    let _ = writeln!(out, "average weights: {}", ev.average_weights);
    let _ = writeln!(
        out,
        "{:<12} {:>8} {:>8} {:>8} {:>8} {:>8} {:>7}  per-group",
        "method", "worst", "average", "overall", "lr", "wd", "eta_q"
    );
    for m in &ev.methods {
        let _ = writeln!(
            out,
            "{:<12} {:>8.4} {:>8.4} {:>8.4} {:>8.0e} {:>8.0e} {:>7}  {}",
            m.method,
            m.report.worst,
            m.report.average,
            m.report.overall,
            m.learning_rate,
            m.weight_decay,
            m.eta_q.map(|e| e.to_string()).unwrap_or_else(|| "-".into()),
            group_row(&m.report.per_group)
        );
    }
    out
}

pub fn summary_table(s: &Summary) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "config {}  seeds {:?}", s.stamp.config_hash, s.stamp.seeds);
    let _ = writeln!(
        out,
        "dataset: {} samples, {} classes, {} true outliers",
        s.dataset.n_samples, s.dataset.n_classes, s.dataset.n_outliers
    );
    let _ = writeln!(out, "\ngroup inference");
    let _ = writeln!(out, "{:<8} {:>8} {:>7} {:>9} {:>10} {:>7}", "method", "ARI", "groups", "outliers", "precision", "recall");
    for (name, r) in [("FeaSP", &s.feasp), ("GraSP", &s.grasp)] {
        let _ = writeln!(
            out,
            "{:<8} {:>8} {:>7} {:>9} {:>10} {:>7}",
            name,
            opt(r.ari),
            r.n_groups,
            r.n_outliers,
            opt(r.outlier_precision),
            opt(r.outlier_recall)
        );
    }
    let _ = writeln!(out, "\nworst-group accuracy (average)");
    for m in &s.evaluation.methods {
        let _ = writeln!(out, "{:<12} {:.4} ({:.4})", m.method, m.report.worst, m.report.average);
    }
    let _ = writeln!(out, "\n{}", eval_table(&s.evaluation));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(seed: u64) -> PipelineConfig {
        let mut cfg = PipelineConfig::synthetic(seed, false);
        cfg.inference.grid = DbscanGrid::single(0.3, 10);
        cfg.gdro.train.epochs = 2;
        cfg.gdro.grid = TrainGrid {
            learning_rates: vec![1e-3],
            weight_decays: vec![1e-4],
            eta_q: vec![0.01],
        };
        cfg
    }

    #[test]
    fn toml_defaults_and_unknown_keys() {
        let cfg = PipelineConfig::from_toml("[dataset]\nkind = \"synthetic\"\n", Path::new(".")).unwrap();
        assert_eq!(cfg, PipelineConfig::synthetic(0, false));
        let err = PipelineConfig::from_toml("[dataset]\nkind = \"synthetic\"\nsed = 3\n", Path::new("."));
        assert!(matches!(err, Err(Error::Config(_))));
        let err = PipelineConfig::from_toml("[dataset]\nkind = \"synthetic\"\n[gdro]\nepochs = 3\n", Path::new("."));
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn validation_rejects_empty_grid_and_bad_ratios() {
        let text = "[dataset]\nkind = \"synthetic\"\n[inference.grid]\neps = []\nmin_samples = [10]\n";
        assert!(matches!(PipelineConfig::from_toml(text, Path::new(".")), Err(Error::Config(_))));
        let text = "[dataset]\nkind = \"synthetic\"\n[split]\ntrain = 0.9\nval = 0.2\ntest = 0.2\n";
        assert!(matches!(PipelineConfig::from_toml(text, Path::new(".")), Err(Error::Config(_))));
        let text = "[dataset]\nkind = \"csv\"\npath = \"does/not/exist.csv\"\n";
        assert!(matches!(PipelineConfig::from_toml(text, Path::new(".")), Err(Error::Config(_))));
    }

    #[test]
    fn seed_override_changes_hash_not_output_dir() {
        let mut a = PipelineConfig::synthetic(0, false);
        let h = a.hash();
        a.output_dir = PathBuf::from("elsewhere");
        assert_eq!(a.hash(), h);
        a.override_seed(7);
        assert_ne!(a.hash(), h);
        assert_eq!(
            a.seeds(),
            Seeds {
                dataset: Some(7),
                split: 7,
                erm: 7,
                gdro: 7
            }
        );
    }

    #[test]
    fn training_groups_compact_and_drop_outliers() {
        let ds = dataset::split(generate_synthetic(0, false), SplitRatios::default(), 0).unwrap();
        let idx = ds.indices_in(&[Split::Train, Split::Val]);
        let groups: Vec<i64> = idx
            .iter()
            .enumerate()
            .map(|(k, &i)| match k % 5 {
                0 => OUTLIER,
                _ => 10 + (ds.sample(i).y as i64) * 5,
            })
            .collect();
        let r = GroupInferenceResult {
            representation: crate::groupinfer::Representation::Feature,
            metric: Metric::Euclidean,
            class: idx.iter().map(|&i| ds.sample(i).y).collect(),
            sample_index: idx,
            groups,
            per_class: Vec::new(),
            warnings: Vec::new(),
        };
        let tg = training_groups(&ds, &r);
        assert_eq!(tg.n_groups, 2);
        assert_eq!(tg.inferred_ids, vec![10, 15]);
        for i in 0..ds.len() {
            match ds.split_of(i) {
                Split::Train => assert!(tg.val[i].is_none()),
                Split::Val => assert!(tg.train[i].is_none()),
                Split::Test => assert!(tg.train[i].is_none() && tg.val[i].is_none()),
            }
            if let Some(g) = tg.train[i] {
                assert_eq!(g, ds.sample(i).y);
            }
        }
        let kept = r
            .sample_index
            .iter()
            .zip(&r.groups)
            .filter(|(&i, &g)| g != OUTLIER && ds.split_of(i) == Split::Train)
            .count();
        assert_eq!(tg.train.iter().flatten().count(), kept);
    }

    #[test]
    fn failed_stage_leaves_marker() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(0);
        cfg.gdro.arch = ArchSpec::Logistic;
        let run = Run::new(cfg, dir.path()).unwrap();
        let ds = run.generate().unwrap();
        let n = ds.len();
        let bad = ds.with_splits(vec![Split::Test; n]).unwrap();
        let err = run.erm(&bad).unwrap_err();
        assert!(matches!(err, Error::Stage { ref stage, .. } if stage == "erm"));
        let marker = std::fs::read_to_string(dir.path().join("FAILED")).unwrap();
        assert!(marker.starts_with("stage: erm"));
    }

    #[test]
    fn tiny_pipeline_writes_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let run = Run::new(tiny(1), dir.path()).unwrap();
        let s = run.pipeline().unwrap();
        for f in [
            "dataset.csv",
            "stats.json",
            "erm_model.json",
            "gradients.csv",
            "groups.csv",
            "groups.json",
            "feasp_groups.csv",
            "feasp_groups.json",
            "erm_baseline_model.json",
            "grasp_gdro_model.json",
            "oracle_gdro_model.json",
            "selection.json",
            "eval.json",
            "eval.txt",
            "summary.json",
            "summary.txt",
            "manifest.json",
        ] {
            assert!(dir.path().join(f).is_file(), "missing {f}");
        }
        assert_eq!(s.dataset.n_samples, 1000);
        assert_eq!(s.evaluation.split, Split::Test);
        assert_eq!(s.evaluation.methods.len(), 3);
        assert!(!dir.path().join("FAILED").exists());
    }
}
