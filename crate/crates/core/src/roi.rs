//! Per-ROI FA/MD statistics and the fixed-layout feature vector.
//!
//! Layout for a table of R regions: for each region in table order
//! `FA mean, FA std, MD mean, MD std`, then the sex code (female 0, male 1).
//! With the default 134-region table that is 537 values.

use std::collections::HashMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::nifti::{LabelVolume, Volume3D};

pub const DEFAULT_ROI_COUNT: usize = 134;
pub const STATS_PER_ROI: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RoiError {
    #[error("grid mismatch: {left:?} vs {right:?}")]
    GridMismatch { left: [usize; 3], right: [usize; 3] },
    #[error("ROI id must be positive")]
    ZeroRoiId,
    #[error("ROI ids must be strictly ascending (at position {0})")]
    NotAscending(usize),
    #[error("ROI table line {line}: {reason}")]
    BadTableLine { line: usize, reason: String },
    #[error("sex code must be 0 or 1, got {0}")]
    BadSex(u8),
    #[error("feature CSV: {0}")]
    Csv(String),
}

/// Ordered ROI ids with display names.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiTable {
    ids: Vec<u32>,
    names: Vec<String>,
}

impl RoiTable {
    pub fn new(ids: Vec<u32>, names: Vec<String>) -> Result<Self, RoiError> {
        assert_eq!(ids.len(), names.len(), "one name per ROI id");
        for (i, &id) in ids.iter().enumerate() {
            if id == 0 {
                return Err(RoiError::ZeroRoiId);
            }
            if i > 0 && ids[i - 1] >= id {
                return Err(RoiError::NotAscending(i));
            }
        }
        Ok(Self { ids, names })
    }

    /// Ids `1..=n` named `roi_001`, `roi_002`, ...
    pub fn numbered(n: usize) -> Self {
        let ids: Vec<u32> = (1..=n as u32).collect();
        let names = ids.iter().map(|i| format!("roi_{i:03}")).collect();
        Self { ids, names }
    }

    /// Parses `id,name` lines; blank lines, `#` comments and an `id,name`
    /// header row are skipped.
    pub fn parse(text: &str) -> Result<Self, RoiError> {
        let mut ids = Vec::new();
        let mut names = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (id, name) = line.split_once(',').ok_or_else(|| RoiError::BadTableLine {
                line: i + 1,
                reason: "expected `id,name`".into(),
            })?;
            if ids.is_empty() && id.trim().eq_ignore_ascii_case("id") {
                continue;
            }
            let id: u32 = id.trim().parse().map_err(|_| RoiError::BadTableLine {
                line: i + 1,
                reason: format!("bad id `{}`", id.trim()),
            })?;
            ids.push(id);
            names.push(name.trim().to_string());
        }
        Self::new(ids, names)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("id,name\n");
        for (id, name) in self.ids.iter().zip(&self.names) {
            let _ = writeln!(s, "{id},{name}");
        }
        s
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn feature_len(&self) -> usize {
        STATS_PER_ROI * self.len() + 1
    }

    /// Column names in feature order, without `participant_id`.
    pub fn feature_names(&self) -> Vec<String> {
        let mut cols = Vec::with_capacity(self.feature_len());
        for name in &self.names {
            for suffix in ["FA_mean", "FA_std", "MD_mean", "MD_std"] {
                cols.push(format!("{name}_{suffix}"));
            }
        }
        cols.push("sex".into());
        cols
    }
}

impl Default for RoiTable {
    fn default() -> Self {
        Self::numbered(DEFAULT_ROI_COUNT)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiStats {
    pub mean: f64,
    /// Population standard deviation (divide by N).
    pub std: f64,
    pub n_voxels: usize,
}

impl RoiStats {
    pub const EMPTY: RoiStats = RoiStats {
        mean: 0.0,
        std: 0.0,
        n_voxels: 0,
    };

    pub fn is_empty(&self) -> bool {
        self.n_voxels == 0
    }
}

fn check_grid(vol: &Volume3D, labels: &LabelVolume) -> Result<(), RoiError> {
    if vol.dims != labels.dims {
        return Err(RoiError::GridMismatch {
            left: vol.dims,
            right: labels.dims,
        });
    }
    Ok(())
}

/// Mean and population std of `vol` over voxels labelled `roi_id`. An absent
/// ROI yields [`RoiStats::EMPTY`].
pub fn roi_stats(vol: &Volume3D, labels: &LabelVolume, roi_id: u32) -> Result<RoiStats, RoiError> {
    if roi_id == 0 {
        return Err(RoiError::ZeroRoiId);
    }
    check_grid(vol, labels)?;
    let mut n = 0usize;
    let mut sum = 0.0;
    for (&v, &l) in vol.data.iter().zip(&labels.labels) {
        if l == roi_id {
            n += 1;
            sum += v;
        }
    }
    if n == 0 {
        log::warn!("ROI {roi_id} has no voxels");
        return Ok(RoiStats::EMPTY);
    }
    let mean = sum / n as f64;
    let ss: f64 = vol
        .data
        .iter()
        .zip(&labels.labels)
        .filter(|(_, &l)| l == roi_id)
        .map(|(&v, _)| (v - mean) * (v - mean))
        .sum();
    Ok(RoiStats {
        mean,
        std: (ss / n as f64).sqrt(),
        n_voxels: n,
    })
}

/// Statistics for every ROI of the table in two passes over the volume.
pub fn roi_stats_all(
    vol: &Volume3D,
    labels: &LabelVolume,
    table: &RoiTable,
) -> Result<Vec<RoiStats>, RoiError> {
    check_grid(vol, labels)?;
    let slot: HashMap<u32, usize> = table
        .ids
        .iter()
        .enumerate()
        .map(|(i, &id)| (id, i))
        .collect();
    let r = table.len();
    let mut counts = vec![0usize; r];
    let mut sums = vec![0.0; r];
    let slots: Vec<Option<usize>> = labels.labels.iter().map(|l| slot.get(l).copied()).collect();
    for (&v, s) in vol.data.iter().zip(&slots) {
        if let Some(k) = *s {
            counts[k] += 1;
            sums[k] += v;
        }
    }
    let means: Vec<f64> = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
        .collect();
    let mut ss = vec![0.0; r];
    for (&v, s) in vol.data.iter().zip(&slots) {
        if let Some(k) = *s {
            let d = v - means[k];
            ss[k] += d * d;
        }
    }
    Ok((0..r)
        .map(|k| {
            if counts[k] == 0 {
                RoiStats::EMPTY
            } else {
                RoiStats {
                    mean: means[k],
                    std: (ss[k] / counts[k] as f64).sqrt(),
                    n_voxels: counts[k],
                }
            }
        })
        .collect())
}

/// ROI statistics plus sex, in the fixed layout described at module level.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    /// ROI ids that had no voxels; their four slots hold zeros.
    pub empty_rois: Vec<u32>,
}

impl FeatureVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn sex(&self) -> f64 {
        *self
            .values
            .last()
            .expect("feature vector always ends with sex")
    }
}

pub fn build_feature_vector(
    fa: &Volume3D,
    md: &Volume3D,
    labels: &LabelVolume,
    sex: u8,
    table: &RoiTable,
) -> Result<FeatureVector, RoiError> {
    if sex > 1 {
        return Err(RoiError::BadSex(sex));
    }
    if fa.dims != md.dims {
        return Err(RoiError::GridMismatch {
            left: fa.dims,
            right: md.dims,
        });
    }
    let fa_stats = roi_stats_all(fa, labels, table)?;
    let md_stats = roi_stats_all(md, labels, table)?;
    let mut values = Vec::with_capacity(table.feature_len());
    let mut empty_rois = Vec::new();
    for ((f, m), &id) in fa_stats.iter().zip(&md_stats).zip(&table.ids) {
        if f.is_empty() {
            log::warn!("ROI {id} has no voxels");
            empty_rois.push(id);
        }
        values.extend_from_slice(&[f.mean, f.std, m.mean, m.std]);
    }
    values.push(sex as f64);
    Ok(FeatureVector { values, empty_rois })
}

/// Feature CSV text: `participant_id,<name>_FA_mean,...,sex`.
pub fn write_feature_csv(
    table: &RoiTable,
    rows: &[(String, FeatureVector)],
) -> Result<String, RoiError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["participant_id".to_string()];
    header.extend(table.feature_names());
    w.write_record(&header)
        .map_err(|e| RoiError::Csv(e.to_string()))?;
    for (id, fv) in rows {
        if fv.len() != table.feature_len() {
            return Err(RoiError::Csv(format!(
                "participant {id}: {} values, table needs {}",
                fv.len(),
                table.feature_len()
            )));
        }
        let mut rec = vec![id.clone()];
        rec.extend(fv.values.iter().map(|v| format!("{v:e}")));
        w.write_record(&rec)
            .map_err(|e| RoiError::Csv(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| RoiError::Csv(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Returns `(participant_id, values)` rows; the header must match `table`.
pub fn read_feature_csv(table: &RoiTable, text: &str) -> Result<Vec<(String, Vec<f64>)>, RoiError> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = r
        .headers()
        .map_err(|e| RoiError::Csv(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut expected = vec!["participant_id".to_string()];
    expected.extend(table.feature_names());
    if header != expected {
        return Err(RoiError::Csv("header does not match the ROI table".into()));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| RoiError::Csv(e.to_string()))?;
        let id = rec[0].to_string();
        let values = rec
            .iter()
            .skip(1)
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|_| RoiError::Csv(format!("participant {id}: bad number `{s}`")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        rows.push((id, values));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(dims: [usize; 3], data: Vec<f64>) -> Volume3D {
        Volume3D::new(dims, [1.0; 3], data).unwrap()
    }

    fn l(dims: [usize; 3], labels: Vec<u32>) -> LabelVolume {
        LabelVolume::new(dims, [1.0; 3], labels).unwrap()
    }

    #[test]
    fn hand_stats() {
        let vol = v([4, 1, 1], vec![1.0, 3.0, 9.0, 9.0]);
        let lab = l([4, 1, 1], vec![7, 7, 2, 2]);
        let s = roi_stats(&vol, &lab, 7).unwrap();
        assert_eq!((s.mean, s.std, s.n_voxels), (2.0, 1.0, 2));
        let e = roi_stats(&vol, &lab, 5).unwrap();
        assert!(e.is_empty());
        assert_eq!((e.mean, e.std), (0.0, 0.0));
    }

    #[test]
    fn grid_mismatch() {
        let vol = v([4, 1, 1], vec![0.0; 4]);
        let lab = l([2, 2, 1], vec![1; 4]);
        assert!(matches!(
            roi_stats(&vol, &lab, 1),
            Err(RoiError::GridMismatch { .. })
        ));
    }

    #[test]
    fn feature_lengths() {
        let fa = v([2, 2, 2], vec![0.5; 8]);
        let md = v([2, 2, 2], vec![1e-3; 8]);
        let lab = l([2, 2, 2], (0..8).map(|i| i % 3).collect());
        assert_eq!(
            build_feature_vector(&fa, &md, &lab, 1, &RoiTable::default())
                .unwrap()
                .len(),
            537
        );
        assert_eq!(
            build_feature_vector(&fa, &md, &lab, 0, &RoiTable::numbered(1))
                .unwrap()
                .len(),
            5
        );
    }

    #[test]
    fn all_background_gives_zeros_then_sex() {
        let fa = v([2, 2, 2], vec![0.5; 8]);
        let md = v([2, 2, 2], vec![1e-3; 8]);
        let lab = l([2, 2, 2], vec![0; 8]);
        let table = RoiTable::numbered(3);
        let f = build_feature_vector(&fa, &md, &lab, 1, &table).unwrap();
        assert_eq!(
            f.values,
            vec![0.0; 12].into_iter().chain([1.0]).collect::<Vec<_>>()
        );
        assert_eq!(f.empty_rois, vec![1, 2, 3]);
    }

    #[test]
    fn locality_of_feature_slots() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dims = [6, 6, 6];
        let n = 216;
        let labels: Vec<u32> = (0..n).map(|_| rng.random_range(0..5)).collect();
        let fa: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let md: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 1e-3).collect();
        let table = RoiTable::numbered(4);
        let lab = l(dims, labels.clone());
        let base =
            build_feature_vector(&v(dims, fa.clone()), &v(dims, md.clone()), &lab, 0, &table)
                .unwrap();
        // perturb only ROI 3 (table index 2)
        let fa2: Vec<f64> = fa
            .iter()
            .zip(&labels)
            .map(|(&x, &lb)| if lb == 3 { x * 0.5 } else { x })
            .collect();
        let moved = build_feature_vector(&v(dims, fa2), &v(dims, md), &lab, 0, &table).unwrap();
        for i in 0..base.len() {
            if (8..12).contains(&i) {
                continue;
            }
            assert_eq!(base.values[i], moved.values[i], "slot {i}");
        }
        assert_ne!(base.values[8], moved.values[8]);
    }

    #[test]
    fn table_parsing() {
        let t = RoiTable::parse("id,name\n# comment\n4,left_hippocampus\n11, right_caudate \n")
            .unwrap();
        assert_eq!(t.ids(), &[4, 11]);
        assert_eq!(t.names()[1], "right_caudate");
        assert_eq!(RoiTable::parse(&t.to_text()).unwrap(), t);
        assert_eq!(RoiTable::parse("3,a\n2,b"), Err(RoiError::NotAscending(1)));
        assert_eq!(RoiTable::parse("0,a"), Err(RoiError::ZeroRoiId));
        assert!(matches!(
            RoiTable::parse("x,a"),
            Err(RoiError::BadTableLine { line: 1, .. })
        ));
    }

    #[test]
    fn feature_csv_round_trip() {
        let table = RoiTable::numbered(2);
        let fv = FeatureVector {
            values: vec![0.5, 0.01, 7e-4, 1e-5, 0.45, 0.02, 8e-4, 2e-5, 1.0],
            empty_rois: vec![],
        };
        let text = write_feature_csv(&table, &[("sub-1".into(), fv.clone())]).unwrap();
        assert!(text.starts_with("participant_id,roi_001_FA_mean,roi_001_FA_std,roi_001_MD_mean,roi_001_MD_std,roi_002_FA_mean"));
        assert!(text.lines().next().unwrap().ends_with(",sex"));
        let rows = read_feature_csv(&table, &text).unwrap();
        assert_eq!(rows, vec![("sub-1".to_string(), fv.values)]);
    }
}
