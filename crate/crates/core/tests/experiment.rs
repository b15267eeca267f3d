//! Splits, training loop contracts, evaluation and report statistics.

use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wmage_core::experiment::*;
use wmage_core::models::{build_mlp, AgeModel, MlpSpec, ModelSpec};
use wmage_core::phantom::{generate_phantom_cohort, PhantomSpec};
use wmage_core::stats::{self, kde, paired_t_test, t_two_sided_p, StatsError};

fn participant(id: &str, cohort: Cohort) -> Participant {
    Participant {
        id: id.into(),
        site: "s1".into(),
        age: 50.0,
        sex: 0,
        cohort,
        fa_path: format!("{id}_fa.nii"),
        md_path: format!("{id}_md.nii"),
        label_path: "labels.nii".into(),
    }
}

fn normals(n: usize) -> Vec<Participant> {
    (0..n)
        .map(|i| participant(&format!("p{i:02}"), Cohort::Normal))
        .collect()
}

fn sample(age: f64, features: Vec<f64>) -> Sample {
    Sample {
        age,
        sex: 0,
        cohort: Cohort::Normal,
        features: Some(features),
        volume: None,
    }
}

/// `[1, 1]` MLP computing `w·x + b`.
fn affine(w: f64, b: f64) -> AgeModel {
    let mut m = build_mlp(&MlpSpec::new(vec![1, 1]).unwrap(), 0).unwrap();
    let wi = m.store().find("mlp.fc1.weight").unwrap();
    let bi = m.store().find("mlp.fc1.bias").unwrap();
    m.store_mut().value_mut(wi).data_mut()[0] = w;
    m.store_mut().value_mut(bi).data_mut()[0] = b;
    m
}

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("q{i}")).collect()
}

#[test]
fn manifest_round_trip_and_errors() {
    let mut m = normals(3);
    m[1].cohort = Cohort::Mci;
    m[2].age = 71.25;
    m[2].sex = 1;
    m[0].site = "site, with comma".into();
    let text = write_manifest(&m);
    assert!(text.starts_with("participant_id,site,age,sex,cohort,fa_path,md_path,label_path\n"));
    assert_eq!(read_manifest(&text).unwrap(), m);

    let dup = format!("{text}p00,s,50,0,normal,a,b,c\n");
    assert!(matches!(read_manifest(&dup), Err(ExperimentError::DuplicateId(id)) if id == "p00"));
    let bad_age =
        "participant_id,site,age,sex,cohort,fa_path,md_path,label_path\nx,s,-3,0,normal,a,b,c\n";
    assert!(matches!(
        read_manifest(bad_age),
        Err(ExperimentError::BadManifest { line: 2, .. })
    ));
    let bad_header = "id,age\nx,3\n";
    assert!(matches!(
        read_manifest(bad_header),
        Err(ExperimentError::BadManifest { line: 1, .. })
    ));
}

#[test]
fn ten_normals_give_pairs() {
    let m = normals(10);
    let s = make_splits(&m, 0.0).unwrap();
    for k in 0..5 {
        assert_eq!(
            s.folds[k],
            vec![m[2 * k].id.clone(), m[2 * k + 1].id.clone()]
        );
    }
    assert!(s.test_normal.is_empty() && s.test_impaired.is_empty());
}

#[test]
fn remainder_goes_to_earliest_folds() {
    let s = make_splits(&normals(11), 0.0).unwrap();
    let sizes: Vec<usize> = s.folds.iter().map(Vec::len).collect();
    assert_eq!(sizes, [3, 2, 2, 2, 2]);
    let s = make_splits(&normals(14), 0.0).unwrap();
    let sizes: Vec<usize> = s.folds.iter().map(Vec::len).collect();
    assert_eq!(sizes, [3, 3, 3, 3, 2]);
}

#[test]
fn test_share_and_impaired() {
    let mut m = normals(20);
    m[3].cohort = Cohort::Dementia;
    m[7].cohort = Cohort::Impaired;
    let s = make_splits(&m, 0.2).unwrap();
    // 18 normals: round(3.6) = 4 trailing ones are held out.
    assert_eq!(s.test_normal, ["p16", "p17", "p18", "p19"]);
    assert_eq!(s.test_impaired, ["p03", "p07"]);
    assert_eq!(s.folds.iter().map(Vec::len).sum::<usize>(), 14);
    assert!(matches!(
        make_splits(&normals(4), 0.0),
        Err(ExperimentError::TooFewParticipants { .. })
    ));
    assert!(matches!(
        make_splits(&[], 0.0),
        Err(ExperimentError::EmptySet)
    ));
}

#[test]
fn splits_csv_errors() {
    let s = make_splits(&normals(10), 0.0).unwrap();
    let text = export_splits_csv(&s);
    assert_eq!(load_splits_csv(&text).unwrap(), s);
    let fold6 = format!("{text}zz,fold6\n");
    assert!(
        matches!(load_splits_csv(&fold6), Err(ExperimentError::UnknownRole(r)) if r == "fold6")
    );
    let dup = format!("{text}p03,test_normal\n");
    assert!(matches!(load_splits_csv(&dup), Err(ExperimentError::DuplicateId(id)) if id == "p03"));
}

#[test]
fn train_ids_exclude_validation_fold() {
    let s = make_splits(&normals(10), 0.0).unwrap();
    let t = s.train_ids(2);
    assert_eq!(t.len(), 8);
    assert!(!t.contains(&"p04".to_string()) && !t.contains(&"p05".to_string()));
}

#[test]
fn config_kv_round_trip() {
    let mut cfg = TrainConfig::new("roi_mlp:33-64-32-8-1".parse().unwrap());
    cfg.loss = Loss::Mse;
    cfg.lr = 3e-4;
    cfg.lr_schedule = LrSchedule::Cosine;
    cfg.batch_size = 16;
    cfg.max_epochs = 7;
    cfg.seed = 11;
    cfg.weight_decay = 0.01;
    cfg.feature_norm = FeatureNorm::Zscore;
    assert_eq!(TrainConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);

    let text = "model = resnet:10,head_hidden=false,input=128\ninput_size = 32\n";
    let cfg = TrainConfig::from_kv(&wmage_core::kv::KvMap::parse(text).unwrap()).unwrap();
    assert_eq!(cfg.input_size(), Some(32));
    for bad in [
        "model = roi_mlp:3-1\nlr = 0\n",
        "model = roi_mlp:3-1\nbatch_size = 0\n",
        "model = roi_mlp:3-1\nlearning_rate = 1\n",
    ] {
        assert!(
            TrainConfig::from_kv(&wmage_core::kv::KvMap::parse(bad).unwrap()).is_err(),
            "{bad}"
        );
    }
}

fn random_dataset(n: usize, width: usize, seed: u64, age: impl Fn(&[f64]) -> f64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut d = Dataset::new();
    for id in ids(n) {
        let f: Vec<f64> = (0..width).map(|_| rng.random_range(-1.0..1.0)).collect();
        d.insert(id, sample(age(&f), f));
    }
    d
}

#[test]
fn constant_target_is_learned() {
    let data = random_dataset(40, 6, 1, |_| 60.0);
    let all = ids(40);
    let mut cfg = TrainConfig::new("roi_mlp:6-16-1".parse().unwrap());
    cfg.max_epochs = 20;
    let out = train_model(&cfg, &all[..30], &all[30..], &data).unwrap();
    assert!(evaluate_mae(&out.model, &all[30..], &data).unwrap() < 0.5);
    assert_eq!(out.history.len(), 20);
}

#[test]
fn training_is_bitwise_reproducible() {
    let data = random_dataset(30, 5, 2, |f| 50.0 + 10.0 * f[0] - 5.0 * f[1]);
    let all = ids(30);
    let mut cfg = TrainConfig::new("roi_mlp:5-8-1".parse().unwrap());
    cfg.max_epochs = 15;
    cfg.batch_size = 4;
    cfg.seed = 5;
    let a = train_model(&cfg, &all[..24], &all[24..], &data).unwrap();
    let b = train_model(&cfg, &all[..24], &all[24..], &data).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.best_epoch, b.best_epoch);
    let pa = predict_ids(&a.model, &all, &data).unwrap();
    let pb = predict_ids(&b.model, &all, &data).unwrap();
    assert_eq!(pa, pb);
    cfg.seed = 6;
    let c = train_model(&cfg, &all[..24], &all[24..], &data).unwrap();
    assert_ne!(a.history, c.history);
}

#[test]
fn best_epoch_has_lowest_validation_mae() {
    let data = random_dataset(30, 5, 3, |f| 40.0 + 20.0 * f[2]);
    let all = ids(30);
    let mut cfg = TrainConfig::new("roi_mlp:5-8-1".parse().unwrap());
    cfg.max_epochs = 25;
    let out = train_model(&cfg, &all[..24], &all[24..], &data).unwrap();
    let best = out
        .history
        .iter()
        .map(|h| h.val_mae)
        .fold(f64::INFINITY, f64::min);
    let first_best = out.history.iter().position(|h| h.val_mae == best).unwrap();
    assert_eq!(out.best_epoch, first_best + 1);
    let mae = evaluate_mae(&out.model, &all[24..], &data).unwrap();
    assert!((mae - best).abs() < 1e-9, "{mae} vs {best}");
}

#[test]
fn training_rejects_overlap_and_missing_data() {
    let data = random_dataset(10, 3, 4, |_| 50.0);
    let all = ids(10);
    let cfg = TrainConfig::new("roi_mlp:3-1".parse().unwrap());
    assert!(matches!(
        train_model(&cfg, &all[..6], &all[5..], &data),
        Err(ExperimentError::InvalidConfig(_))
    ));
    let ghost = vec!["nobody".to_string()];
    assert!(matches!(
        train_model(&cfg, &ghost, &all[..2], &data),
        Err(ExperimentError::DataMissing(_))
    ));
}

#[test]
fn phantom_mlp_beats_mean_baseline() {
    let spec = PhantomSpec {
        n_participants: 60,
        grid: [16, 16, 16],
        ..Default::default()
    };
    let cohort = generate_phantom_cohort(&spec).unwrap();
    let table = spec.roi_table();
    let data = Dataset::from_phantom(&cohort, &Inputs::Features(table.clone())).unwrap();
    let manifest: Vec<Participant> = cohort
        .participants
        .iter()
        .map(|p| Participant {
            age: p.age,
            ..participant(&p.id, p.cohort)
        })
        .collect();
    let split = make_splits(&manifest, 0.2).unwrap();
    let mut cfg = TrainConfig::new(
        format!("roi_mlp:{}-128-64-1", table.feature_len())
            .parse()
            .unwrap(),
    );
    cfg.loss = Loss::Mse;
    cfg.max_epochs = 300;
    cfg.batch_size = 64;
    cfg.lr_schedule = LrSchedule::Cosine;
    let train = split.train_ids(0);
    let out = train_model(&cfg, &train, &split.folds[0], &data).unwrap();
    let mae = evaluate_mae(&out.model, &split.folds[0], &data).unwrap();
    let base = mean_baseline_mae(&train, &split.folds[0], &data).unwrap();
    assert!(mae <= 0.6 * base, "mae {mae} baseline {base}");
}

#[test]
fn evaluate_mae_examples() {
    let mut data = Dataset::new();
    data.insert("a", sample(68.0, vec![70.0]));
    data.insert("b", sample(70.0, vec![72.0]));
    let both = vec!["a".to_string(), "b".to_string()];
    let identity = affine(1.0, 0.0);
    assert_eq!(evaluate_mae(&identity, &both, &data).unwrap(), 2.0);
    assert_eq!(brain_age_gap(&identity, &both, &data).unwrap(), [2.0, 2.0]);
    let perfect = affine(1.0, -2.0);
    assert_eq!(evaluate_mae(&perfect, &both, &data).unwrap(), 0.0);
    assert_eq!(brain_age_gap(&perfect, &both, &data).unwrap(), [0.0, 0.0]);
    assert!(matches!(
        evaluate_mae(&identity, &[], &data),
        Err(ExperimentError::EmptySet)
    ));
    assert!(matches!(
        evaluate_mae(&identity, &["zz".to_string()], &data),
        Err(ExperimentError::DataMissing(_))
    ));

    let mut data = Dataset::new();
    data.insert("y", sample(60.0, vec![0.0]));
    data.insert("o", sample(80.0, vec![0.0]));
    let constant = affine(0.0, 70.0);
    assert_eq!(
        brain_age_gap(&constant, &["y".into(), "o".into()], &data).unwrap(),
        [10.0, -10.0]
    );
}

#[test]
fn mae_and_gap_match_loop_oracle() {
    let data = random_dataset(50, 1, 8, |f| 50.0 + 30.0 * f[0].sin());
    let all = ids(50);
    let m = affine(17.0, 48.5);
    let mut total = 0.0;
    for id in &all {
        let s = data.get(id).unwrap();
        total += (17.0 * s.features.as_ref().unwrap()[0] + 48.5 - s.age).abs();
    }
    let oracle = total / 50.0;
    let mae = evaluate_mae(&m, &all, &data).unwrap();
    assert!((mae - oracle).abs() < 1e-12);
    let gaps = brain_age_gap(&m, &all, &data).unwrap();
    let from_gaps = gaps.iter().map(|g| g.abs()).sum::<f64>() / 50.0;
    assert!((from_gaps - mae).abs() < 1e-12);
}

fn folds_with(maes: &[f64]) -> Vec<FoldRecord> {
    maes.iter()
        .enumerate()
        .map(|(k, &m)| FoldRecord {
            fold: k + 1,
            val_mae: m,
            test_normal_mae: Some(m + 1.0),
            test_impaired_mae: None,
            best_epoch: 1,
        })
        .collect()
}

#[test]
fn report_mean_and_sample_std() {
    let r = MetricsReport::from_folds(
        "m".into(),
        folds_with(&[5.0, 6.0, 7.0, 6.0, 6.0]),
        BTreeMap::new(),
        64,
    )
    .unwrap();
    assert!((r.mae_mean - 6.0).abs() < 1e-12);
    assert!((r.mae_std - 0.7071).abs() < 1e-4);
    assert_eq!(r.std_kind, "sample");
    let t = r.test_normal_mae.unwrap();
    assert!((t.mean - 7.0).abs() < 1e-12 && (t.std - 0.7071).abs() < 1e-4);
    assert!(r.test_impaired_mae.is_none());

    let flat =
        MetricsReport::from_folds("m".into(), folds_with(&[4.5; 5]), BTreeMap::new(), 64).unwrap();
    assert_eq!((flat.mae_mean, flat.mae_std), (4.5, 0.0));
    assert!(matches!(
        MetricsReport::from_folds("m".into(), vec![], BTreeMap::new(), 64),
        Err(ExperimentError::EmptySet)
    ));
}

#[test]
fn report_jsonl_round_trip_and_tables() {
    let mut gaps = BTreeMap::new();
    gaps.insert(Cohort::Normal, vec![-1.0, 0.5, 2.0, 0.25]);
    gaps.insert(Cohort::Impaired, vec![3.0, 4.0]);
    let mut a = MetricsReport::from_folds(
        "a".into(),
        folds_with(&[5.0, 6.0, 7.0, 6.0, 6.5]),
        gaps.clone(),
        32,
    )
    .unwrap();
    let b = MetricsReport::from_folds("b".into(), folds_with(&[4.0, 5.5, 6.0, 5.0, 5.0]), gaps, 32)
        .unwrap();
    let tt = compare_reports(&a, &b, "val").unwrap();
    let direct = paired_t_test(&a.per_fold_mae, &b.per_fold_mae).unwrap();
    assert_eq!((tt.t, tt.p), (direct.t, direct.p));
    a.t_tests.push(tt);
    let text = a.to_jsonl();
    assert_eq!(text.lines().count(), 6);
    assert_eq!(MetricsReport::from_jsonl(&text).unwrap(), a);
    assert!(matches!(
        MetricsReport::from_jsonl("{\"type\":\"fold\"}\n"),
        Err(ExperimentError::BadMetrics(_))
    ));

    let table = format_table(&[a.clone(), b]);
    assert!(table.contains("6.10 ± 0.74"), "{table}");
    let csv = kde_csv(&a.kde_curves);
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("cohort,x,density"));
    assert_eq!(lines.count(), 64);
}

#[test]
fn fold_models_share_one_split() {
    let data = random_dataset(30, 3, 9, |f| 50.0 + 10.0 * f[0]);
    let manifest: Vec<Participant> = ids(30)
        .iter()
        .map(|id| participant(id, Cohort::Normal))
        .collect();
    let split = make_splits(&manifest, 0.2).unwrap();
    let mut cfg = TrainConfig::new("roi_mlp:3-4-1".parse().unwrap());
    cfg.max_epochs = 3;
    let a = cross_validate(&cfg, &split, &data).unwrap();
    cfg.model = "roi_mlp:3-1".parse::<ModelSpec>().unwrap();
    let b = cross_validate(&cfg, &split, &data).unwrap();
    assert_eq!(a.models.len(), 5);
    assert_eq!(a.report.folds.len(), b.report.folds.len());
    assert!((a.report.mae_mean - stats::mean(&a.report.per_fold_mae)).abs() < 1e-12);
    let gaps = ensemble_gaps(&a.models, &split, &data).unwrap();
    assert_eq!(gaps[&Cohort::Normal].len(), split.test_normal.len());
    assert_eq!(a.report.gaps, gaps);
}

#[test]
fn t_test_matches_reported_pairs() {
    for (t, p) in [
        (3.83, 0.019),
        (3.629, 0.022),
        (2.905, 0.044),
        (2.347, 0.079),
    ] {
        let got = t_two_sided_p(t, 4.0);
        assert!((got - p).abs() <= 1e-3, "t {t}: p {got}");
    }
}

#[test]
fn t_test_symmetric_case_and_errors() {
    let b = [10.0, 11.0, 12.0, 13.0, 14.0];
    let a: Vec<f64> = b
        .iter()
        .zip([1.0, -1.0, 2.0, -2.0, 0.0])
        .map(|(x, d)| x + d)
        .collect();
    let r = paired_t_test(&a, &b).unwrap();
    assert_eq!(r.t, 0.0);
    assert!((r.p - 1.0).abs() < 1e-12);
    assert_eq!(r.df, 4.0);
    assert_eq!(
        paired_t_test(&[1.0, 2.0], &[1.0]),
        Err(StatsError::LengthMismatch(2, 1))
    );
    assert_eq!(
        paired_t_test(&[2.0, 3.0, 4.0], &[1.0, 2.0, 3.0]),
        Err(StatsError::ZeroVariance)
    );
}

/// Two-sided tail of Student's t with 4 degrees of freedom by Simpson's
/// rule on a substitution that maps the tail to a finite interval.
fn t4_tail_quadrature(t: f64) -> f64 {
    let density = |x: f64| 0.375 * (1.0 + x * x / 4.0).powf(-2.5);
    // x = t / u, u in (0, 1], dx = t / u² du.
    let n = 20_000;
    let h = 1.0 / n as f64;
    let f = |u: f64| {
        if u == 0.0 {
            0.0
        } else {
            density(t / u) * t / (u * u)
        }
    };
    let mut s = f(0.0) + f(1.0);
    for i in 1..n {
        s += f(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    2.0 * s * h / 3.0
}

#[test]
fn t_test_p_matches_quadrature() {
    for t in [0.3, 1.0, 2.347, 3.83, 6.0] {
        let p = t_two_sided_p(t, 4.0);
        assert!((p - t4_tail_quadrature(t)).abs() < 1e-6, "t {t}");
    }
}

#[test]
fn kde_examples() {
    let c = kde(&[0.0], 401).unwrap();
    let peak = c.density.iter().cloned().fold(f64::MIN, f64::max);
    assert!((peak - 1.0 / (2.0 * std::f64::consts::PI).sqrt()).abs() < 1e-12);
    let i = c.density.iter().position(|&d| d == peak).unwrap();
    assert!(c.x[i].abs() < 1e-12);
    assert!((c.x[0] + 3.0).abs() < 1e-12 && (c.x[400] - 3.0).abs() < 1e-12);

    let c = kde(&[-1.0, 1.0], 201).unwrap();
    for k in 0..201 {
        assert!((c.density[k] - c.density[200 - k]).abs() < 1e-9);
    }
    assert!(matches!(kde(&[], 10), Err(StatsError::EmptyInput)));
}

proptest! {
    #[test]
    fn t_test_antisymmetric_and_shift_invariant(
        a in prop::collection::vec(-50.0f64..50.0, 5),
        b in prop::collection::vec(-50.0f64..50.0, 5),
        c in -100.0f64..100.0,
    ) {
        let ab = paired_t_test(&a, &b).unwrap();
        let ba = paired_t_test(&b, &a).unwrap();
        prop_assert!((ab.t + ba.t).abs() < 1e-9 * (1.0 + ab.t.abs()));
        prop_assert!((ab.p - ba.p).abs() < 1e-12);
        let a2: Vec<f64> = a.iter().map(|x| x + c).collect();
        let b2: Vec<f64> = b.iter().map(|x| x + c).collect();
        let shifted = paired_t_test(&a2, &b2).unwrap();
        prop_assert!((shifted.t - ab.t).abs() < 1e-6 * (1.0 + ab.t.abs()));
    }

    #[test]
    fn kde_is_a_density(values in prop::collection::vec(-30.0f64..30.0, 5..40)) {
        let c = kde(&values, 512).unwrap();
        prop_assert!(c.density.iter().all(|&d| d >= 0.0));
        prop_assert!((c.trapezoid_integral() - 1.0).abs() < 1e-3);
    }

    #[test]
    fn report_mean_is_fold_mean(maes in prop::collection::vec(0.0f64..20.0, 5)) {
        let r = MetricsReport::from_folds("m".into(), folds_with(&maes), BTreeMap::new(), 16).unwrap();
        prop_assert!((r.mae_mean - stats::mean(&maes)).abs() < 1e-12);
        prop_assert!(r.per_fold_mae.iter().all(|&m| m >= 0.0));
    }
}
