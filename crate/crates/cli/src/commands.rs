use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use wmage_core::experiment::{
    self, compare_reports, cross_validate, ensemble_gaps, evaluate_mae, export_splits_csv,
    format_table, kde_csv, load_splits_csv, make_splits, predict_ids, read_manifest, Dataset,
    FoldRecord, FoldSplit, Inputs, MetricsReport, Participant, TrainConfig, DEFAULT_KDE_POINTS,
    N_FOLDS,
};
use wmage_core::kv::KvMap;
use wmage_core::models::{AgeModel, ModelKind};
use wmage_core::phantom::{generate_phantom_cohort, PhantomSpec};
use wmage_core::roi::{write_feature_csv, FeatureVector, RoiTable};

use crate::run::{read_bytes, read_text, CliResult, Failure, OutputDir, RunRecord};
use crate::svg;
use crate::{
    DataArgs, EvaluateArgs, ExtractArgs, PhantomArgs, PlotArgs, ReportArgs, SplitArgs, TrainArgs,
};

/// Directory and file name of a single-file output.
fn split_out(path: &Path) -> CliResult<(PathBuf, String)> {
    let name = path
        .file_name()
        .ok_or_else(|| Failure::usage(format!("--out {} has no file name", path.display())))?
        .to_string_lossy()
        .into_owned();
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    Ok((dir.to_path_buf(), name))
}

fn base_dir(manifest: &Path) -> PathBuf {
    manifest
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."))
        .to_path_buf()
}

fn load_manifest(path: &Path, rec: &mut RunRecord) -> CliResult<Vec<Participant>> {
    let text = read_text(path)?;
    rec.input(path, text.as_bytes());
    read_manifest(&text).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

/// `--rois`, else `rois.txt` beside the manifest, else the default table.
fn roi_table(flag: Option<&Path>, base: &Path, rec: &mut RunRecord) -> CliResult<RoiTable> {
    let beside = base.join("rois.txt");
    let path = match flag {
        Some(p) => p.to_path_buf(),
        None if beside.is_file() => beside,
        None => return Ok(RoiTable::default()),
    };
    let text = read_text(&path)?;
    rec.input(&path, text.as_bytes());
    RoiTable::parse(&text).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

pub fn phantom(a: PhantomArgs) -> CliResult<()> {
    let mut rec = RunRecord::new("phantom");
    let mut kv = match &a.config {
        Some(p) => {
            let text = read_text(p)?;
            rec.input(p, text.as_bytes());
            KvMap::parse(&text).map_err(|e| Failure::data(format!("{}: {e}", p.display())))?
        }
        None => KvMap::default(),
    };
    let overrides: [(&str, Option<String>); 9] = [
        ("n_participants", a.n.map(|v| v.to_string())),
        ("grid", a.grid.clone()),
        ("n_rois", a.rois.map(|v| v.to_string())),
        ("noise_sigma_fa", a.noise_fa.map(|v| v.to_string())),
        ("noise_sigma_md", a.noise_md.map(|v| v.to_string())),
        ("n_impaired", a.n_impaired.map(|v| v.to_string())),
        ("impaired_gap", a.impaired_gap.map(|v| v.to_string())),
        ("age_shift_test", a.age_shift_test.map(|v| v.to_string())),
        ("seed", a.seed.map(|v| v.to_string())),
    ];
    for (k, v) in overrides {
        if let Some(v) = v {
            kv.set(k, v);
        }
    }
    let spec = PhantomSpec::from_kv(&kv)?;
    let mut out = OutputDir::claim(&a.out)?;
    let cohort = generate_phantom_cohort(&spec)?;
    let manifest = cohort.write_to(out.path())?;
    for name in ["labels.nii", "rois.txt", "phantom.txt", "manifest.csv"] {
        out.adopt(name)?;
    }
    for p in &manifest {
        out.adopt(&p.fa_path)?;
        out.adopt(&p.md_path)?;
    }
    log::info!(
        "wrote {} participants to {}",
        manifest.len(),
        a.out.display()
    );
    rec.seed = Some(spec.seed);
    let kv = spec.to_kv();
    rec.config(kv.iter());
    out.finish("run.lock", rec)
}

pub fn extract(a: ExtractArgs) -> CliResult<()> {
    let mut rec = RunRecord::new("extract");
    let manifest = load_manifest(&a.manifest, &mut rec)?;
    let base = base_dir(&a.manifest);
    let table = roi_table(a.rois.as_deref(), &base, &mut rec)?;
    let (dir, name) = split_out(&a.out)?;
    let mut out = OutputDir::claim(&dir)?;
    let data = Dataset::from_manifest(&manifest, &base, &Inputs::Features(table.clone()))?;
    let rows = manifest
        .iter()
        .map(|p| {
            let values = data.get(&p.id)?.features.clone().unwrap_or_default();
            Ok((
                p.id.clone(),
                FeatureVector {
                    values,
                    empty_rois: Vec::new(),
                },
            ))
        })
        .collect::<Result<Vec<_>, experiment::ExperimentError>>()?;
    out.put(&name, write_feature_csv(&table, &rows)?.as_bytes())?;
    log::info!(
        "{} feature rows of width {}",
        rows.len(),
        table.feature_len()
    );
    out.finish(&format!("{name}.run.lock"), rec)
}

pub fn split(a: SplitArgs) -> CliResult<()> {
    let mut rec = RunRecord::new("split");
    let manifest = load_manifest(&a.manifest, &mut rec)?;
    let split = make_splits(&manifest, a.test_fraction)?;
    let (dir, name) = split_out(&a.out)?;
    let mut out = OutputDir::claim(&dir)?;
    out.put(&name, export_splits_csv(&split).as_bytes())?;
    let (folds, frac) = (a.folds.to_string(), a.test_fraction.to_string());
    rec.config([("folds", folds.as_str()), ("test_fraction", frac.as_str())]);
    out.finish(&format!("{name}.run.lock"), rec)
}

fn load_split(path: &Path, rec: &mut RunRecord) -> CliResult<FoldSplit> {
    let text = read_text(path)?;
    rec.input(path, text.as_bytes());
    load_splits_csv(&text).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

fn load_data(
    d: &DataArgs,
    cfg: &TrainConfig,
    rec: &mut RunRecord,
) -> CliResult<(FoldSplit, Dataset)> {
    let manifest = load_manifest(&d.manifest, rec)?;
    let split = load_split(&d.splits, rec)?;
    let base = base_dir(&d.manifest);
    let table = roi_table(d.rois.as_deref(), &base, rec)?;
    let data = match (&d.features, cfg.model.kind()) {
        (Some(p), ModelKind::RoiMlp) => {
            let text = read_text(p)?;
            rec.input(p, text.as_bytes());
            Dataset::from_feature_csv(&manifest, &table, &text)
                .map_err(|e| Failure::data(format!("{}: {e}", p.display())))?
        }
        (Some(_), ModelKind::Resnet) => {
            return Err(Failure::usage("--features applies to roi_mlp models only"))
        }
        (None, _) => Dataset::from_manifest(&manifest, &base, &Inputs::for_config(cfg, &table))?,
    };
    Ok((split, data))
}

/// Ensemble predictions of the test participants as CSV.
fn predictions_csv(models: &[AgeModel], split: &FoldSplit, data: &Dataset) -> CliResult<String> {
    let ids: Vec<String> = split
        .test_normal
        .iter()
        .chain(&split.test_impaired)
        .cloned()
        .collect();
    let mut sum = vec![0.0; ids.len()];
    if !ids.is_empty() {
        for m in models {
            for (s, p) in sum.iter_mut().zip(predict_ids(m, &ids, data)?) {
                *s += p;
            }
        }
    }
    let mut s = String::from("participant_id,cohort,age,predicted,gap\n");
    for (id, total) in ids.iter().zip(sum) {
        let sample = data.get(id)?;
        let pred = total / models.len() as f64;
        let _ = writeln!(
            s,
            "{id},{},{},{pred},{}",
            sample.cohort,
            sample.age,
            pred - sample.age
        );
    }
    Ok(s)
}

fn write_results(out: &mut OutputDir, report: &MetricsReport, predictions: &str) -> CliResult<()> {
    let table = format_table(std::slice::from_ref(report));
    print!("{table}");
    out.put("metrics.jsonl", report.to_jsonl().as_bytes())?;
    out.put("table.txt", table.as_bytes())?;
    out.put("kde.csv", kde_csv(&report.kde_curves).as_bytes())?;
    out.put("predictions.csv", predictions.as_bytes())
}

pub fn train(a: TrainArgs) -> CliResult<()> {
    let mut rec = RunRecord::new("train");
    let mut kv = match &a.config {
        Some(p) => {
            let text = read_text(p)?;
            rec.input(p, text.as_bytes());
            KvMap::parse(&text).map_err(|e| Failure::data(format!("{}: {e}", p.display())))?
        }
        None => KvMap::default(),
    };
    let overrides: [(&str, Option<String>); 11] = [
        ("model", a.model.clone()),
        ("loss", a.loss.clone()),
        ("lr", a.lr.map(|v| v.to_string())),
        ("lr_schedule", a.lr_schedule.clone()),
        ("batch_size", a.batch_size.map(|v| v.to_string())),
        ("max_epochs", a.max_epochs.map(|v| v.to_string())),
        ("input_size", a.input_size.map(|v| v.to_string())),
        ("md_scale", a.md_scale.map(|v| v.to_string())),
        ("weight_decay", a.weight_decay.map(|v| v.to_string())),
        ("feature_norm", a.feature_norm.clone()),
        ("seed", a.seed.map(|v| v.to_string())),
    ];
    for (k, v) in overrides {
        if let Some(v) = v {
            kv.set(k, v);
        }
    }
    let cfg = TrainConfig::from_kv(&kv)?;
    let (split, data) = load_data(&a.data, &cfg, &mut rec)?;
    let mut out = OutputDir::claim(&a.out)?;
    let resolved = cfg.to_kv();
    out.put("config.txt", resolved.to_text().as_bytes())?;

    let cv = cross_validate(&cfg, &split, &data)?;
    let mut history = String::from("fold,epoch,train_loss,val_mae\n");
    for (k, (model, hist)) in cv.models.iter().zip(&cv.histories).enumerate() {
        let fold = &cv.report.folds[k];
        let extra = serde_json::json!({ "fold": k + 1, "best_epoch": fold.best_epoch });
        out.put(
            &format!("fold{}.ckpt", k + 1),
            &model.to_checkpoint(None, extra),
        )?;
        for h in hist {
            let _ = writeln!(
                history,
                "{},{},{},{}",
                k + 1,
                h.epoch,
                h.train_loss,
                h.val_mae
            );
        }
    }
    out.put("history.csv", history.as_bytes())?;
    write_results(
        &mut out,
        &cv.report,
        &predictions_csv(&cv.models, &split, &data)?,
    )?;
    rec.seed = Some(cfg.seed);
    rec.config(resolved.iter());
    out.finish("run.lock", rec)
}

pub fn evaluate(a: EvaluateArgs) -> CliResult<()> {
    let mut rec = RunRecord::new("evaluate");
    let cfg_path = a.run.join("config.txt");
    let cfg_text = read_text(&cfg_path)?;
    rec.input(&cfg_path, cfg_text.as_bytes());
    let cfg = TrainConfig::from_kv(&KvMap::parse(&cfg_text)?)
        .map_err(|e| Failure::data(format!("{}: {e}", cfg_path.display())))?;
    let mut models = Vec::with_capacity(N_FOLDS);
    let mut best = Vec::with_capacity(N_FOLDS);
    for k in 1..=N_FOLDS {
        let p = a.run.join(format!("fold{k}.ckpt"));
        let bytes = read_bytes(&p)?;
        rec.input(&p, &bytes);
        let (model, extra) = AgeModel::from_checkpoint(&bytes, None)
            .map_err(|e| Failure::data(format!("{}: {e}", p.display())))?;
        best.push(extra["best_epoch"].as_u64().unwrap_or(0) as usize);
        models.push(model);
    }
    let (split, data) = load_data(&a.data, &cfg, &mut rec)?;
    let mut out = OutputDir::claim(&a.out)?;
    let maybe = |m: &AgeModel, ids: &[String]| -> CliResult<Option<f64>> {
        if ids.is_empty() {
            Ok(None)
        } else {
            Ok(Some(evaluate_mae(m, ids, &data)?))
        }
    };
    let mut folds = Vec::with_capacity(N_FOLDS);
    for (k, m) in models.iter().enumerate() {
        folds.push(FoldRecord {
            fold: k + 1,
            val_mae: evaluate_mae(m, &split.folds[k], &data)?,
            test_normal_mae: maybe(m, &split.test_normal)?,
            test_impaired_mae: maybe(m, &split.test_impaired)?,
            best_epoch: best[k],
        });
    }
    let gaps = ensemble_gaps(&models, &split, &data)?;
    let report = MetricsReport::from_folds(cfg.model.to_string(), folds, gaps, DEFAULT_KDE_POINTS)?;
    write_results(&mut out, &report, &predictions_csv(&models, &split, &data)?)?;
    rec.seed = Some(cfg.seed);
    let kv = cfg.to_kv();
    rec.config(kv.iter());
    out.finish("run.lock", rec)
}

fn load_reports(paths: &[PathBuf], rec: &mut RunRecord) -> CliResult<Vec<MetricsReport>> {
    paths
        .iter()
        .map(|p| {
            let text = read_text(p)?;
            rec.input(p, text.as_bytes());
            MetricsReport::from_jsonl(&text)
                .map_err(|e| Failure::data(format!("{}: {e}", p.display())))
        })
        .collect()
}

pub fn report(a: ReportArgs) -> CliResult<()> {
    if !["val", "test_normal", "test_impaired"].contains(&a.compare.as_str()) {
        return Err(Failure::usage(format!(
            "--compare must be val, test_normal or test_impaired, got {:?}",
            a.compare
        )));
    }
    let mut rec = RunRecord::new("report");
    let mut reports = load_reports(&a.metrics, &mut rec)?;
    for i in 0..reports.len() {
        for j in i + 1..reports.len() {
            let t = compare_reports(&reports[i], &reports[j], &a.compare)?;
            reports[i].t_tests.push(t);
        }
    }
    let table = format_table(&reports);
    print!("{table}");
    let (dir, name) = split_out(&a.out)?;
    let mut out = OutputDir::claim(&dir)?;
    out.put(&name, table.as_bytes())?;
    rec.config([("compare", a.compare.as_str())]);
    out.finish(&format!("{name}.run.lock"), rec)
}

/// File-name stem for a model spec such as `resnet:18,head_hidden=true`.
fn stem(model: &str) -> String {
    model
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

pub fn plot(a: PlotArgs) -> CliResult<()> {
    let mut rec = RunRecord::new("plot");
    let reports = load_reports(&a.metrics, &mut rec)?;
    let mut out = OutputDir::claim(&a.out)?;
    let mut used: Vec<String> = Vec::new();
    for r in &reports {
        let mut name = stem(&r.model);
        let base = name.clone();
        let mut n = 1;
        while used.contains(&name) {
            n += 1;
            name = format!("{base}_{n}");
        }
        out.put(
            &format!("{name}_kde.csv"),
            kde_csv(&r.kde_curves).as_bytes(),
        )?;
        out.put(
            &format!("{name}_kde.svg"),
            svg::kde_chart(&r.model, &r.kde_curves).as_bytes(),
        )?;
        used.push(name);
    }
    out.finish("run.lock", rec)
}
