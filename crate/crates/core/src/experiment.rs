//! Participant-level splitting, training, evaluation and the reported
//! statistics (MAE ± std over folds, paired t-tests, brain-age-gap
//! densities).
//!
//! File formats:
//!
//! - manifest CSV `participant_id,site,age,sex,cohort,fa_path,md_path,label_path`
//! - splits CSV `participant_id,role`, role one of `fold1`..`fold5`,
//!   `test_normal`, `test_impaired`
//! - metrics JSON lines, one `fold` record per fold and one `summary` record
//! - KDE CSV `cohort,x,density`

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kv::{KvError, KvMap};
use crate::models::{
    build_model, feature_batch, volume_batch, AgeModel, Batch, ModelError, ModelKind, ModelSpec,
    Normalization,
};
use crate::nifti::{self, NiftiError};
use crate::nn::{Adam, Mode, NnError, Tape, Tensor};
use crate::phantom::PhantomCohort;
use crate::roi::{self, RoiError, RoiTable};
use crate::stats::{self, DensityCurve, MeanStd, StatsError, TTest};
use crate::volume::{network_input, MultiChannelVolume, VolumeError, DEFAULT_MD_SCALE};

pub const N_FOLDS: usize = 5;
pub const DEFAULT_TEST_FRACTION: f64 = 0.2;
pub const DEFAULT_KDE_POINTS: usize = 256;
const EVAL_CHUNK: usize = 16;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("manifest line {line}: {reason}")]
    BadManifest { line: usize, reason: String },
    #[error("duplicate participant id {0}")]
    DuplicateId(String),
    #[error("unknown split role {0:?}")]
    UnknownRole(String),
    #[error("splits CSV: {0}")]
    BadSplits(String),
    #[error("{normals} cognitively normal participants cannot fill {folds} folds")]
    TooFewParticipants { normals: usize, folds: usize },
    #[error("no data for participant {0}")]
    DataMissing(String),
    #[error("empty participant set")]
    EmptySet,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("loss became non-finite in epoch {epoch}")]
    DivergedLoss {
        epoch: usize,
        last_good: Option<Box<TrainOutcome>>,
    },
    #[error("metrics: {0}")]
    BadMetrics(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Kv(#[from] KvError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nifti(#[from] NiftiError),
    #[error(transparent)]
    Roi(#[from] RoiError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

impl From<NnError> for ExperimentError {
    fn from(e: NnError) -> Self {
        ExperimentError::Model(ModelError::Nn(e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cohort {
    Normal,
    Impaired,
    Mci,
    Dementia,
}

impl Cohort {
    pub const ALL: [Cohort; 4] = [
        Cohort::Normal,
        Cohort::Impaired,
        Cohort::Mci,
        Cohort::Dementia,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Cohort::Normal => "normal",
            Cohort::Impaired => "impaired",
            Cohort::Mci => "mci",
            Cohort::Dementia => "dementia",
        }
    }
}

impl fmt::Display for Cohort {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Cohort {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Cohort::ALL
            .into_iter()
            .find(|c| c.as_str() == s.trim())
            .ok_or_else(|| format!("unknown cohort {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Participant {
    pub id: String,
    pub site: String,
    pub age: f64,
    pub sex: u8,
    pub cohort: Cohort,
    pub fa_path: String,
    pub md_path: String,
    pub label_path: String,
}

pub const MANIFEST_HEADER: [&str; 8] = [
    "participant_id",
    "site",
    "age",
    "sex",
    "cohort",
    "fa_path",
    "md_path",
    "label_path",
];

pub fn write_manifest(participants: &[Participant]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(MANIFEST_HEADER).expect("in-memory write");
    for p in participants {
        w.write_record([
            p.id.as_str(),
            &p.site,
            &p.age.to_string(),
            &p.sex.to_string(),
            p.cohort.as_str(),
            &p.fa_path,
            &p.md_path,
            &p.label_path,
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

pub fn read_manifest(text: &str) -> Result<Vec<Participant>, ExperimentError> {
    let mut r = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let bad = |line: usize, reason: String| ExperimentError::BadManifest { line, reason };
    let header = r.headers().map_err(|e| bad(1, e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
        return Err(bad(
            1,
            format!("expected header {}", MANIFEST_HEADER.join(",")),
        ));
    }
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, rec) in r.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| bad(line, e.to_string()))?;
        let age: f64 = rec[2]
            .parse()
            .map_err(|_| bad(line, format!("bad age {:?}", &rec[2])))?;
        if !(age > 0.0 && age.is_finite()) {
            return Err(bad(line, format!("age must be positive, got {age}")));
        }
        let sex = match &rec[3] {
            "0" => 0,
            "1" => 1,
            s => return Err(bad(line, format!("sex must be 0 or 1, got {s:?}"))),
        };
        let cohort = rec[4].parse().map_err(|e| bad(line, e))?;
        let id = rec[0].to_string();
        if id.is_empty() {
            return Err(bad(line, "empty participant id".into()));
        }
        if !seen.insert(id.clone()) {
            return Err(ExperimentError::DuplicateId(id));
        }
        out.push(Participant {
            id,
            site: rec[1].to_string(),
            age,
            sex,
            cohort,
            fa_path: rec[5].to_string(),
            md_path: rec[6].to_string(),
            label_path: rec[7].to_string(),
        });
    }
    Ok(out)
}

/// Participants assigned to the test share of normals.
pub fn test_normal_count(n_normals: usize, test_fraction: f64) -> usize {
    ((n_normals as f64 * test_fraction).round() as usize).min(n_normals)
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FoldSplit {
    pub folds: [Vec<String>; N_FOLDS],
    pub test_normal: Vec<String>,
    pub test_impaired: Vec<String>,
}

impl FoldSplit {
    /// Training ids for validation fold `k` (all other folds, in order).
    pub fn train_ids(&self, k: usize) -> Vec<String> {
        self.folds
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != k)
            .flat_map(|(_, f)| f.iter().cloned())
            .collect()
    }

    fn roles(&self) -> Vec<(String, &[String])> {
        let mut out: Vec<(String, &[String])> = self
            .folds
            .iter()
            .enumerate()
            .map(|(k, f)| (format!("fold{}", k + 1), f.as_slice()))
            .collect();
        out.push(("test_normal".into(), &self.test_normal));
        out.push(("test_impaired".into(), &self.test_impaired));
        out
    }
}

/// Non-normal participants go to `test_impaired`; the trailing
/// `test_fraction_normal` share of normals (manifest order) goes to
/// `test_normal`; the remaining normals form five contiguous folds, the
/// earliest folds taking one extra participant each when sizes don't
/// divide evenly.
pub fn make_splits(
    manifest: &[Participant],
    test_fraction_normal: f64,
) -> Result<FoldSplit, ExperimentError> {
    if manifest.is_empty() {
        return Err(ExperimentError::EmptySet);
    }
    if !(0.0..1.0).contains(&test_fraction_normal) {
        return Err(ExperimentError::InvalidConfig(format!(
            "test fraction must be in [0, 1), got {test_fraction_normal}"
        )));
    }
    let mut seen = HashSet::new();
    for p in manifest {
        if !seen.insert(p.id.as_str()) {
            return Err(ExperimentError::DuplicateId(p.id.clone()));
        }
    }
    let normals: Vec<&str> = manifest
        .iter()
        .filter(|p| p.cohort == Cohort::Normal)
        .map(|p| p.id.as_str())
        .collect();
    let n_test = test_normal_count(normals.len(), test_fraction_normal);
    let n_cv = normals.len() - n_test;
    if n_cv < N_FOLDS {
        return Err(ExperimentError::TooFewParticipants {
            normals: n_cv,
            folds: N_FOLDS,
        });
    }
    let mut split = FoldSplit::default();
    let (base, extra) = (n_cv / N_FOLDS, n_cv % N_FOLDS);
    let mut start = 0;
    for (k, fold) in split.folds.iter_mut().enumerate() {
        let size = base + usize::from(k < extra);
        *fold = normals[start..start + size]
            .iter()
            .map(|s| s.to_string())
            .collect();
        start += size;
    }
    split.test_normal = normals[n_cv..].iter().map(|s| s.to_string()).collect();
    split.test_impaired = manifest
        .iter()
        .filter(|p| p.cohort != Cohort::Normal)
        .map(|p| p.id.clone())
        .collect();
    Ok(split)
}

pub fn export_splits_csv(split: &FoldSplit) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["participant_id", "role"])
        .expect("in-memory write");
    for (role, ids) in split.roles() {
        for id in ids {
            w.write_record([id.as_str(), role.as_str()])
                .expect("in-memory write");
        }
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

pub fn load_splits_csv(text: &str) -> Result<FoldSplit, ExperimentError> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r
        .headers()
        .map_err(|e| ExperimentError::BadSplits(e.to_string()))?;
    if header.iter().collect::<Vec<_>>() != ["participant_id", "role"] {
        return Err(ExperimentError::BadSplits(
            "expected header participant_id,role".into(),
        ));
    }
    let mut split = FoldSplit::default();
    let mut seen = HashSet::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| ExperimentError::BadSplits(e.to_string()))?;
        let (id, role) = (rec[0].to_string(), &rec[1]);
        let list = match role {
            "test_normal" => &mut split.test_normal,
            "test_impaired" => &mut split.test_impaired,
            _ => {
                let k = role
                    .strip_prefix("fold")
                    .and_then(|k| k.parse::<usize>().ok())
                    .filter(|k| (1..=N_FOLDS).contains(k))
                    .ok_or_else(|| ExperimentError::UnknownRole(role.to_string()))?;
                &mut split.folds[k - 1]
            }
        };
        if !seen.insert(id.clone()) {
            return Err(ExperimentError::DuplicateId(id));
        }
        list.push(id);
    }
    Ok(split)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Loss {
    L1,
    Mse,
}

impl FromStr for Loss {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "l1" => Ok(Loss::L1),
            "mse" => Ok(Loss::Mse),
            _ => Err(format!("unknown loss {s:?} (l1 or mse)")),
        }
    }
}

impl fmt::Display for Loss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Loss::L1 => "l1",
            Loss::Mse => "mse",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from `lr` to 0 over all optimizer steps.
    Cosine,
}

impl FromStr for LrSchedule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "constant" => Ok(LrSchedule::Constant),
            "cosine" => Ok(LrSchedule::Cosine),
            _ => Err(format!("unknown lr schedule {s:?} (constant or cosine)")),
        }
    }
}

impl fmt::Display for LrSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LrSchedule::Constant => "constant",
            LrSchedule::Cosine => "cosine",
        })
    }
}

/// How ROI features are prepared for the MLP.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureNorm {
    /// Per-column mean and std.
    Zscore,
    /// Centre, rescale MD columns by `md_scale`, rotate onto principal axes.
    Pca,
}

/// Std of the leading principal axis under [`FeatureNorm::Pca`].
pub const PCA_GAIN: f64 = 3.0;

impl FromStr for FeatureNorm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "zscore" => Ok(FeatureNorm::Zscore),
            "pca" => Ok(FeatureNorm::Pca),
            _ => Err(format!("unknown feature_norm {s:?} (zscore or pca)")),
        }
    }
}

impl fmt::Display for FeatureNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureNorm::Zscore => "zscore",
            FeatureNorm::Pca => "pca",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelSpec,
    pub loss: Loss,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub md_scale: f64,
    pub weight_decay: f64,
    pub feature_norm: FeatureNorm,
}

pub const CONFIG_KEYS: &[&str] = &[
    "model",
    "loss",
    "lr",
    "lr_schedule",
    "batch_size",
    "max_epochs",
    "seed",
    "input_size",
    "md_scale",
    "weight_decay",
    "feature_norm",
];

impl TrainConfig {
    pub fn new(model: ModelSpec) -> Self {
        Self {
            model,
            loss: Loss::L1,
            lr: 1e-3,
            lr_schedule: LrSchedule::Constant,
            batch_size: 8,
            max_epochs: 50,
            seed: 0,
            md_scale: DEFAULT_MD_SCALE,
            weight_decay: 0.0,
            feature_norm: FeatureNorm::Pca,
        }
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: &str| Err(ExperimentError::InvalidConfig(m.into()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1");
        }
        if !(self.md_scale > 0.0 && self.md_scale.is_finite()) {
            return bad("md_scale must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.lr * self.weight_decay < 1.0) {
            return bad("weight_decay must be non-negative and below 1/lr");
        }
        Ok(())
    }

    /// Spatial input size for ResNet models.
    pub fn input_size(&self) -> Option<usize> {
        match &self.model {
            ModelSpec::Resnet { input, .. } => Some(*input),
            ModelSpec::RoiMlp(_) => None,
        }
    }

    /// `model` is required; `input_size` overrides the ResNet spec's input.
    pub fn from_kv(m: &KvMap) -> Result<Self, ExperimentError> {
        m.check_keys(CONFIG_KEYS)?;
        let mut model: ModelSpec = m.require::<String>("model")?.parse()?;
        if let Some(v) = m.get("input_size") {
            let size: usize = m.require("input_size")?;
            match &mut model {
                ModelSpec::Resnet { input, .. } => *input = size,
                ModelSpec::RoiMlp(_) => {
                    return Err(ExperimentError::InvalidConfig(format!(
                        "input_size = {v} applies to resnet models only"
                    )))
                }
            }
            model = model.to_string().parse()?;
        }
        let d = Self::new(model);
        let parsed = |key: &str, e: String| ExperimentError::InvalidConfig(format!("{key}: {e}"));
        let cfg = Self {
            loss: m
                .get("loss")
                .map_or(Ok(d.loss), str::parse)
                .map_err(|e| parsed("loss", e))?,
            lr: m.parse_or("lr", d.lr)?,
            lr_schedule: m
                .get("lr_schedule")
                .map_or(Ok(d.lr_schedule), str::parse)
                .map_err(|e| parsed("lr_schedule", e))?,
            batch_size: m.parse_or("batch_size", d.batch_size)?,
            max_epochs: m.parse_or("max_epochs", d.max_epochs)?,
            seed: m.parse_or("seed", d.seed)?,
            md_scale: m.parse_or("md_scale", d.md_scale)?,
            weight_decay: m.parse_or("weight_decay", d.weight_decay)?,
            feature_norm: m
                .get("feature_norm")
                .map_or(Ok(d.feature_norm), str::parse)
                .map_err(|e| parsed("feature_norm", e))?,
            ..d
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> KvMap {
        let mut m = KvMap::default();
        m.set("model", &self.model);
        m.set("loss", self.loss);
        m.set("lr", self.lr);
        m.set("lr_schedule", self.lr_schedule);
        m.set("batch_size", self.batch_size);
        m.set("max_epochs", self.max_epochs);
        m.set("seed", self.seed);
        m.set("md_scale", self.md_scale);
        m.set("weight_decay", self.weight_decay);
        m.set("feature_norm", self.feature_norm);
        m
    }
}

/// One participant's inputs and label.
#[derive(Debug, Clone)]
pub struct Sample {
    pub age: f64,
    pub sex: u8,
    pub cohort: Cohort,
    /// ROI feature vector including the trailing sex entry.
    pub features: Option<Vec<f64>>,
    /// Masked, resampled, MD-scaled network input.
    pub volume: Option<MultiChannelVolume>,
}

/// In-memory participant data keyed by id.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    samples: HashMap<String, Sample>,
}

/// Which inputs to prepare when loading a dataset.
#[derive(Debug, Clone)]
pub enum Inputs {
    Features(RoiTable),
    Volumes { size: usize, md_scale: f64 },
}

impl Inputs {
    pub fn for_config(cfg: &TrainConfig, table: &RoiTable) -> Self {
        match cfg.input_size() {
            Some(size) => Inputs::Volumes {
                size,
                md_scale: cfg.md_scale,
            },
            None => Inputs::Features(table.clone()),
        }
    }
}

impl Dataset {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, sample: Sample) {
        self.samples.insert(id.into(), sample);
    }

    pub fn get(&self, id: &str) -> Result<&Sample, ExperimentError> {
        self.samples
            .get(id)
            .ok_or_else(|| ExperimentError::DataMissing(id.to_string()))
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn from_phantom(cohort: &PhantomCohort, inputs: &Inputs) -> Result<Self, ExperimentError> {
        let mut ds = Self::new();
        for p in &cohort.participants {
            let (features, volume) = match inputs {
                Inputs::Features(table) => (
                    Some(
                        roi::build_feature_vector(&p.fa, &p.md, &cohort.labels, p.sex, table)?
                            .values,
                    ),
                    None,
                ),
                Inputs::Volumes { size, md_scale } => (
                    None,
                    Some(network_input(
                        &p.fa,
                        &p.md,
                        &cohort.labels,
                        *size,
                        *md_scale,
                    )?),
                ),
            };
            ds.insert(
                p.id.clone(),
                Sample {
                    age: p.age,
                    sex: p.sex,
                    cohort: p.cohort,
                    features,
                    volume,
                },
            );
        }
        Ok(ds)
    }

    /// Reads the NIfTI files named in `manifest` (paths relative to
    /// `base_dir`) and prepares `inputs`.
    pub fn from_manifest(
        manifest: &[Participant],
        base_dir: &Path,
        inputs: &Inputs,
    ) -> Result<Self, ExperimentError> {
        let mut ds = Self::new();
        let mut label_cache: HashMap<String, nifti::LabelVolume> = HashMap::new();
        let read = |rel: &str| {
            let p = base_dir.join(rel);
            std::fs::read(&p).map_err(|source| ExperimentError::Io {
                path: p.display().to_string(),
                source,
            })
        };
        for p in manifest {
            if !label_cache.contains_key(&p.label_path) {
                let labels = nifti::read_labels(&read(&p.label_path)?)?;
                label_cache.insert(p.label_path.clone(), labels);
            }
            let labels = &label_cache[&p.label_path];
            let fa = nifti::read_volume(&read(&p.fa_path)?)?;
            let md = nifti::read_volume(&read(&p.md_path)?)?;
            let (features, volume) = match inputs {
                Inputs::Features(table) => (
                    Some(roi::build_feature_vector(&fa, &md, labels, p.sex, table)?.values),
                    None,
                ),
                Inputs::Volumes { size, md_scale } => (
                    None,
                    Some(network_input(&fa, &md, labels, *size, *md_scale)?),
                ),
            };
            ds.insert(
                p.id.clone(),
                Sample {
                    age: p.age,
                    sex: p.sex,
                    cohort: p.cohort,
                    features,
                    volume,
                },
            );
        }
        Ok(ds)
    }

    /// ROI features from a feature CSV, ages and cohorts from the manifest.
    pub fn from_feature_csv(
        manifest: &[Participant],
        table: &RoiTable,
        csv_text: &str,
    ) -> Result<Self, ExperimentError> {
        let rows: HashMap<String, Vec<f64>> = roi::read_feature_csv(table, csv_text)?
            .into_iter()
            .collect();
        let mut ds = Self::new();
        for p in manifest {
            let features = rows
                .get(&p.id)
                .ok_or_else(|| ExperimentError::DataMissing(p.id.clone()))?;
            ds.insert(
                p.id.clone(),
                Sample {
                    age: p.age,
                    sex: p.sex,
                    cohort: p.cohort,
                    features: Some(features.clone()),
                    volume: None,
                },
            );
        }
        Ok(ds)
    }

    fn batch(&self, kind: ModelKind, ids: &[&str]) -> Result<Batch, ExperimentError> {
        let samples = ids
            .iter()
            .map(|id| self.get(id))
            .collect::<Result<Vec<_>, _>>()?;
        match kind {
            ModelKind::RoiMlp => {
                let rows = ids
                    .iter()
                    .zip(&samples)
                    .map(|(id, s)| {
                        s.features
                            .as_deref()
                            .ok_or_else(|| ExperimentError::DataMissing(format!("{id} (features)")))
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                Ok(feature_batch(&rows)?)
            }
            ModelKind::Resnet => {
                let vols = ids
                    .iter()
                    .zip(&samples)
                    .map(|(id, s)| {
                        s.volume
                            .as_ref()
                            .ok_or_else(|| ExperimentError::DataMissing(format!("{id} (volume)")))
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                let sexes: Vec<u8> = samples.iter().map(|s| s.sex).collect();
                Ok(volume_batch(&vols, &sexes)?)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mae: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: AgeModel,
    pub history: Vec<EpochRecord>,
    /// 1-based epoch whose weights were kept.
    pub best_epoch: usize,
}

/// Splits `order` into batches of `size`; a trailing batch of one joins
/// the previous batch so that train-mode batch norm never sees a single
/// sample.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().unwrap().len() == 1 {
        let n = out.len();
        let start = (n - 2) * size;
        out.truncate(n - 2);
        out.push(&order[start..]);
    }
    out
}

/// Column divisors for a `4R + 1` feature row: MD statistics are multiplied
/// by `md_scale`, everything else is left in its own units.
fn feature_units(width: usize, md_scale: f64) -> Vec<f64> {
    (0..width)
        .map(|j| {
            if j + 1 < width && j % 4 >= 2 {
                1.0 / md_scale
            } else {
                1.0
            }
        })
        .collect()
}

fn fit_normalization(
    cfg: &TrainConfig,
    data: &Dataset,
    ids: &[&str],
) -> Result<Normalization, ExperimentError> {
    let samples = ids
        .iter()
        .map(|id| data.get(id))
        .collect::<Result<Vec<_>, _>>()?;
    let ages: Vec<f64> = samples.iter().map(|s| s.age).collect();
    Ok(match cfg.model.kind() {
        ModelKind::RoiMlp => {
            let rows = ids
                .iter()
                .zip(&samples)
                .map(|(id, s)| {
                    s.features
                        .clone()
                        .ok_or_else(|| ExperimentError::DataMissing(format!("{id} (features)")))
                })
                .collect::<Result<Vec<_>, _>>()?;
            match cfg.feature_norm {
                FeatureNorm::Zscore => Normalization::fit(&rows, &ages),
                FeatureNorm::Pca => {
                    let width = rows.first().map_or(0, Vec::len);
                    Normalization::fit_pca(
                        &rows,
                        &feature_units(width, cfg.md_scale),
                        &ages,
                        PCA_GAIN,
                    )
                }
            }
        }
        ModelKind::Resnet => {
            let mut n = Normalization::fit(&[], &ages);
            n.feature_mean.clear();
            n.feature_scale.clear();
            n
        }
    })
}

/// Trains with Adam for `max_epochs`, evaluating validation MAE after each
/// epoch, and returns the weights with the lowest validation MAE (earliest
/// epoch on ties). Without validation ids the last epoch is kept.
pub fn train_model(
    cfg: &TrainConfig,
    train_ids: &[String],
    val_ids: &[String],
    data: &Dataset,
) -> Result<TrainOutcome, ExperimentError> {
    cfg.validate()?;
    if train_ids.is_empty() {
        return Err(ExperimentError::EmptySet);
    }
    let val_set: HashSet<&str> = val_ids.iter().map(String::as_str).collect();
    if let Some(id) = train_ids.iter().find(|id| val_set.contains(id.as_str())) {
        return Err(ExperimentError::InvalidConfig(format!(
            "participant {id} is in both training and validation sets"
        )));
    }
    let train: Vec<&str> = train_ids.iter().map(String::as_str).collect();
    let mut model = build_model(&cfg.model, cfg.seed)?;
    model.normalization = fit_normalization(cfg, data, &train)?;
    let kind = model.kind();
    let targets: Vec<f64> = train
        .iter()
        .map(|id| {
            data.get(id)
                .map(|s| model.normalization.encode_target(s.age))
        })
        .collect::<Result<_, _>>()?;

    let mut adam = Adam::new(model.store(), cfg.lr);
    adam.weight_decay = cfg.weight_decay;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_b47c4);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let steps_per_epoch = batches(&order, cfg.batch_size).len();
    let total_steps = (steps_per_epoch * cfg.max_epochs) as f64;
    let mut step = 0usize;
    let mut history = Vec::with_capacity(cfg.max_epochs);
    let mut best: Option<(f64, usize, AgeModel)> = None;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in batches(&order, cfg.batch_size) {
            let ids: Vec<&str> = chunk.iter().map(|&i| train[i]).collect();
            let batch = data.batch(kind, &ids)?;
            let y = Tensor::new(
                vec![chunk.len(), 1],
                chunk.iter().map(|&i| targets[i]).collect(),
            )?;
            let mut tape = Tape::new();
            let (out, updates) = model.forward(&mut tape, &batch, Mode::Train)?;
            let yv = tape.input(y, false);
            let loss = match cfg.loss {
                Loss::L1 => tape.l1_loss(out, yv)?,
                Loss::Mse => tape.mse_loss(out, yv)?,
            };
            let loss_value = tape.value(loss).data()[0];
            if !loss_value.is_finite() {
                return Err(ExperimentError::DivergedLoss {
                    epoch,
                    last_good: best.map(|(_, e, m)| {
                        Box::new(TrainOutcome {
                            model: m,
                            history,
                            best_epoch: e,
                        })
                    }),
                });
            }
            loss_sum += loss_value * chunk.len() as f64;
            tape.backward(loss)?;
            let store = model.store_mut();
            store.zero_grad();
            tape.accumulate_param_grads(store);
            drop(tape);
            model.apply_bn_updates(&updates);
            if cfg.lr_schedule == LrSchedule::Cosine {
                adam.lr =
                    cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total_steps).cos());
            }
            adam.step(model.store_mut())?;
            step += 1;
        }
        let train_loss = loss_sum / train.len() as f64;
        let val_mae = if val_ids.is_empty() {
            f64::NAN
        } else {
            evaluate_mae(&model, val_ids, data)?
        };
        log::info!("epoch {epoch}: train loss {train_loss:.6}, val MAE {val_mae:.4}");
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_mae,
        });
        let improved = match &best {
            None => true,
            Some((b, _, _)) => val_ids.is_empty() || val_mae < *b,
        };
        if improved {
            let mut kept = model.clone();
            kept.store_mut().zero_grad();
            best = Some((val_mae, epoch, kept));
        }
    }
    let (_, best_epoch, model) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
    })
}

/// Eval-mode predictions in years, in `ids` order.
pub fn predict_ids(
    model: &AgeModel,
    ids: &[String],
    data: &Dataset,
) -> Result<Vec<f64>, ExperimentError> {
    if ids.is_empty() {
        return Err(ExperimentError::EmptySet);
    }
    let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
    let mut out = Vec::with_capacity(ids.len());
    for chunk in refs.chunks(EVAL_CHUNK) {
        out.extend(model.predict_batch(&data.batch(model.kind(), chunk)?)?);
    }
    Ok(out)
}

pub fn evaluate_mae(
    model: &AgeModel,
    ids: &[String],
    data: &Dataset,
) -> Result<f64, ExperimentError> {
    let pred = predict_ids(model, ids, data)?;
    let ages = ids
        .iter()
        .map(|id| data.get(id).map(|s| s.age))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(stats::mean_absolute_error(&pred, &ages)?)
}

/// Predicted minus chronological age, in `ids` order.
pub fn brain_age_gap(
    model: &AgeModel,
    ids: &[String],
    data: &Dataset,
) -> Result<Vec<f64>, ExperimentError> {
    let pred = predict_ids(model, ids, data)?;
    ids.iter()
        .zip(pred)
        .map(|(id, p)| Ok(p - data.get(id)?.age))
        .collect()
}

/// MAE of always predicting the training-set mean age.
pub fn mean_baseline_mae(
    train_ids: &[String],
    test_ids: &[String],
    data: &Dataset,
) -> Result<f64, ExperimentError> {
    let age = |ids: &[String]| {
        ids.iter()
            .map(|id| data.get(id).map(|s| s.age))
            .collect::<Result<Vec<_>, _>>()
    };
    let train = age(train_ids)?;
    let test = age(test_ids)?;
    if train.is_empty() || test.is_empty() {
        return Err(ExperimentError::EmptySet);
    }
    let m = stats::mean(&train);
    Ok(stats::mean_absolute_error(&vec![m; test.len()], &test)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldRecord {
    pub fold: usize,
    pub val_mae: f64,
    pub test_normal_mae: Option<f64>,
    pub test_impaired_mae: Option<f64>,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TTestRecord {
    pub a: String,
    pub b: String,
    pub metric: String,
    pub t: f64,
    pub p: f64,
    pub df: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    pub folds: Vec<FoldRecord>,
    pub per_fold_mae: Vec<f64>,
    pub mae_mean: f64,
    pub mae_std: f64,
    pub test_normal_mae: Option<MeanStd>,
    pub test_impaired_mae: Option<MeanStd>,
    /// How "±" is computed.
    pub std_kind: String,
    pub t_tests: Vec<TTestRecord>,
    /// Brain-age gaps per cohort; each participant's prediction is the mean
    /// over the fold models.
    pub gaps: BTreeMap<Cohort, Vec<f64>>,
    pub kde_curves: BTreeMap<Cohort, DensityCurve>,
}

impl MetricsReport {
    /// Assembles the summary from per-fold records and per-cohort gaps.
    pub fn from_folds(
        model: String,
        folds: Vec<FoldRecord>,
        gaps: BTreeMap<Cohort, Vec<f64>>,
        kde_points: usize,
    ) -> Result<Self, ExperimentError> {
        let per_fold_mae: Vec<f64> = folds.iter().map(|f| f.val_mae).collect();
        if per_fold_mae.is_empty() {
            return Err(ExperimentError::EmptySet);
        }
        let collect = |get: fn(&FoldRecord) -> Option<f64>| -> Option<MeanStd> {
            let v: Option<Vec<f64>> = folds.iter().map(get).collect();
            v.filter(|v| !v.is_empty()).map(|v| MeanStd::of(&v))
        };
        let kde_curves = gaps
            .iter()
            .filter(|(_, g)| !g.is_empty())
            .map(|(c, g)| Ok((*c, stats::kde(g, kde_points)?)))
            .collect::<Result<_, StatsError>>()?;
        Ok(Self {
            model,
            mae_mean: stats::mean(&per_fold_mae),
            mae_std: stats::sample_std(&per_fold_mae),
            test_normal_mae: collect(|f| f.test_normal_mae),
            test_impaired_mae: collect(|f| f.test_impaired_mae),
            per_fold_mae,
            folds,
            std_kind: "sample".into(),
            t_tests: Vec::new(),
            gaps,
            kde_curves,
        })
    }

    /// JSON lines: one `fold` record per fold, then one `summary` record.
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for f in &self.folds {
            let mut v = serde_json::to_value(f).expect("serialisable");
            v["type"] = "fold".into();
            v["model"] = self.model.clone().into();
            let _ = writeln!(s, "{v}");
        }
        let mut v = serde_json::to_value(self).expect("serialisable");
        v["type"] = "summary".into();
        let _ = writeln!(s, "{v}");
        s
    }

    /// Reads the summary record back.
    pub fn from_jsonl(text: &str) -> Result<Self, ExperimentError> {
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let v: serde_json::Value = serde_json::from_str(line)
                .map_err(|e| ExperimentError::BadMetrics(e.to_string()))?;
            if v["type"] == "summary" {
                return serde_json::from_value(v)
                    .map_err(|e| ExperimentError::BadMetrics(e.to_string()));
            }
        }
        Err(ExperimentError::BadMetrics("no summary record".into()))
    }
}

/// Everything a cross-validation run produces.
#[derive(Debug, Clone)]
pub struct CvOutcome {
    pub report: MetricsReport,
    pub models: Vec<AgeModel>,
    pub histories: Vec<Vec<EpochRecord>>,
}

/// Trains one model per fold (fold `k` validates, the others train),
/// evaluates each on the fixed test sets and aggregates.
pub fn cross_validate(
    cfg: &TrainConfig,
    split: &FoldSplit,
    data: &Dataset,
) -> Result<CvOutcome, ExperimentError> {
    let mut folds = Vec::with_capacity(N_FOLDS);
    let mut models = Vec::with_capacity(N_FOLDS);
    let mut histories = Vec::with_capacity(N_FOLDS);
    for k in 0..N_FOLDS {
        log::info!("fold {}/{N_FOLDS}", k + 1);
        let out = train_model(cfg, &split.train_ids(k), &split.folds[k], data)?;
        let test = |ids: &[String]| -> Result<Option<f64>, ExperimentError> {
            if ids.is_empty() {
                Ok(None)
            } else {
                evaluate_mae(&out.model, ids, data).map(Some)
            }
        };
        folds.push(FoldRecord {
            fold: k + 1,
            val_mae: evaluate_mae(&out.model, &split.folds[k], data)?,
            test_normal_mae: test(&split.test_normal)?,
            test_impaired_mae: test(&split.test_impaired)?,
            best_epoch: out.best_epoch,
        });
        histories.push(out.history);
        models.push(out.model);
    }
    let gaps = ensemble_gaps(&models, split, data)?;
    let report = MetricsReport::from_folds(cfg.model.to_string(), folds, gaps, DEFAULT_KDE_POINTS)?;
    Ok(CvOutcome {
        report,
        models,
        histories,
    })
}

/// Brain-age gaps of the test participants per cohort, predicting with
/// the mean of the fold models.
pub fn ensemble_gaps(
    models: &[AgeModel],
    split: &FoldSplit,
    data: &Dataset,
) -> Result<BTreeMap<Cohort, Vec<f64>>, ExperimentError> {
    let ids: Vec<String> = split
        .test_normal
        .iter()
        .chain(&split.test_impaired)
        .cloned()
        .collect();
    let mut gaps: BTreeMap<Cohort, Vec<f64>> = BTreeMap::new();
    if ids.is_empty() || models.is_empty() {
        return Ok(gaps);
    }
    let mut sum = vec![0.0; ids.len()];
    for m in models {
        for (s, p) in sum.iter_mut().zip(predict_ids(m, &ids, data)?) {
            *s += p;
        }
    }
    for (id, s) in ids.iter().zip(sum) {
        let sample = data.get(id)?;
        gaps.entry(sample.cohort)
            .or_default()
            .push(s / models.len() as f64 - sample.age);
    }
    Ok(gaps)
}

/// Paired t-test of two reports on a per-fold metric (`val`,
/// `test_normal` or `test_impaired`).
pub fn compare_reports(
    a: &MetricsReport,
    b: &MetricsReport,
    metric: &str,
) -> Result<TTestRecord, ExperimentError> {
    let pick = |r: &MetricsReport| -> Result<Vec<f64>, ExperimentError> {
        r.folds
            .iter()
            .map(|f| match metric {
                "val" => Some(f.val_mae),
                "test_normal" => f.test_normal_mae,
                "test_impaired" => f.test_impaired_mae,
                _ => None,
            })
            .collect::<Option<Vec<f64>>>()
            .ok_or_else(|| {
                ExperimentError::BadMetrics(format!(
                    "metric {metric:?} not available for {}",
                    r.model
                ))
            })
    };
    let TTest { t, p, df } = stats::paired_t_test(&pick(a)?, &pick(b)?)?;
    Ok(TTestRecord {
        a: a.model.clone(),
        b: b.model.clone(),
        metric: metric.into(),
        t,
        p,
        df,
    })
}

/// Human-readable comparison table.
pub fn format_table(reports: &[MetricsReport]) -> String {
    let cell = |m: &Option<MeanStd>| m.map_or("-".to_string(), |m| m.to_string());
    let rows: Vec<[String; 4]> = reports
        .iter()
        .map(|r| {
            [
                r.model.clone(),
                MeanStd {
                    mean: r.mae_mean,
                    std: r.mae_std,
                }
                .to_string(),
                cell(&r.test_normal_mae),
                cell(&r.test_impaired_mae),
            ]
        })
        .collect();
    let header = ["model", "val MAE", "test normal MAE", "test impaired MAE"];
    let mut widths = header.map(|h| h.chars().count());
    for r in &rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cells: [&str; 4]| {
        let padded: Vec<String> = cells
            .iter()
            .zip(widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect();
        padded.join(" | ").trim_end().to_string()
    };
    let mut s = String::new();
    let _ = writeln!(s, "{}", line(header));
    let _ = writeln!(s, "{}", widths.map(|w| "-".repeat(w)).join("-|-"));
    for r in &rows {
        let _ = writeln!(s, "{}", line([&r[0], &r[1], &r[2], &r[3]]));
    }
    let tests: Vec<&TTestRecord> = reports.iter().flat_map(|r| &r.t_tests).collect();
    if !tests.is_empty() {
        let _ = writeln!(s, "\npaired t-tests (two-sided)");
        for t in tests {
            let _ = writeln!(
                s,
                "{} vs {} [{}]: t = {:.3}, p = {:.3}, df = {}",
                t.a, t.b, t.metric, t.t, t.p, t.df
            );
        }
    }
    s
}

pub fn kde_csv(curves: &BTreeMap<Cohort, DensityCurve>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["cohort", "x", "density"])
        .expect("in-memory write");
    for (c, curve) in curves {
        for (x, d) in curve.x.iter().zip(&curve.density) {
            w.write_record([c.as_str(), &x.to_string(), &d.to_string()])
                .expect("in-memory write");
        }
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}
