//! Synthetic aging phantom.
//!
//! Every participant shares one label volume of concentric spherical
//! shells, so geometry carries no age information. Inside shell `r`
//! (1-based) each voxel is drawn independently:
//!
//! ```text
//! FA ~ N(fa_base + 0.02·(r mod 3 − 1) + fa_slope·(age − 20), noise_sigma_fa)   clamped to [0, 1]
//! MD ~ N(md_base + 2e-5·(r mod 3 − 1) + md_slope·(age − 20), noise_sigma_md)   clamped to ≥ 0
//! ```
//! Voxels outside the outermost shell are 0 in both maps and in the labels.

use std::fmt;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::experiment::{self, Cohort, Participant};
use crate::fsio::write_atomic;
use crate::kv::{KvError, KvMap};
use crate::nifti::{self, LabelVolume, NiftiError, Volume3D, DT_FLOAT32};
use crate::roi::RoiTable;

/// Age at which the base values apply.
pub const REFERENCE_AGE: f64 = 20.0;
/// Outer shell radius as a fraction of the smallest grid dimension.
pub const RADIUS_FRACTION: f64 = 0.45;
const FA_OFFSET_STEP: f64 = 0.02;
const MD_OFFSET_STEP: f64 = 2.0e-5;

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),
    #[error("age {age} outside [{lo}, {hi}]")]
    AgeOutOfRange { age: f64, lo: f64, hi: f64 },
    #[error("both slopes are zero, age is not identifiable")]
    NoSignal,
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Kv(#[from] KvError),
    #[error(transparent)]
    Nifti(#[from] NiftiError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub n_participants: usize,
    pub age_range: (f64, f64),
    pub grid: [usize; 3],
    pub n_rois: usize,
    pub fa_base: f64,
    pub fa_slope: f64,
    pub md_base: f64,
    pub md_slope: f64,
    pub noise_sigma_fa: f64,
    pub noise_sigma_md: f64,
    pub seed: u64,
    /// Shifts the age range of the trailing test share of normal
    /// participants (see [`experiment::test_normal_count`]); positive values
    /// raise the lower bound, negative values lower the upper bound.
    pub age_shift_test: f64,
    /// Extra participants in the `impaired` cohort, generated as if
    /// `impaired_gap` years older than their recorded age.
    pub n_impaired: usize,
    pub impaired_gap: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            n_participants: 200,
            age_range: (20.0, 90.0),
            grid: [32, 32, 32],
            n_rois: 8,
            fa_base: 0.55,
            fa_slope: -0.002,
            md_base: 0.70e-3,
            md_slope: 2.0e-6,
            noise_sigma_fa: 0.01,
            noise_sigma_md: 1.0e-5,
            seed: 0,
            age_shift_test: 0.0,
            n_impaired: 0,
            impaired_gap: 5.0,
        }
    }
}

const KEYS: &[&str] = &[
    "n_participants",
    "age_lo",
    "age_hi",
    "grid",
    "n_rois",
    "fa_base",
    "fa_slope",
    "md_base",
    "md_slope",
    "noise_sigma_fa",
    "noise_sigma_md",
    "seed",
    "age_shift_test",
    "n_impaired",
    "impaired_gap",
];

fn parse_grid(s: &str) -> Option<[usize; 3]> {
    let parts: Vec<usize> = s
        .split('x')
        .map(|p| p.trim().parse().ok())
        .collect::<Option<_>>()?;
    match parts.as_slice() {
        [n] => Some([*n; 3]),
        [x, y, z] => Some([*x, *y, *z]),
        _ => None,
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<(), PhantomError> {
        let bad = |m: String| Err(PhantomError::InvalidSpec(m));
        let (lo, hi) = self.age_range;
        if !(lo > 0.0 && lo < hi && hi.is_finite()) {
            return bad(format!("age range ({lo}, {hi}) must satisfy 0 < lo < hi"));
        }
        if self.n_rois == 0 {
            return bad("n_rois must be at least 1".into());
        }
        if self.grid.iter().any(|&d| d == 0) {
            return bad(format!("grid {:?} has an empty axis", self.grid));
        }
        if self.fa_slope >= 0.0 || self.md_slope <= 0.0 {
            return bad(
                "FA must decline (fa_slope < 0) and MD must rise (md_slope > 0) with age".into(),
            );
        }
        if self.noise_sigma_fa < 0.0 || self.noise_sigma_md < 0.0 {
            return bad("noise levels must be non-negative".into());
        }
        if self.age_shift_test.abs() >= hi - lo {
            return bad("age_shift_test must be smaller than the age range".into());
        }
        if self.impaired_gap < 0.0 {
            return bad("impaired_gap must be non-negative".into());
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut m = KvMap::default();
        m.set("n_participants", self.n_participants);
        m.set("age_lo", self.age_range.0);
        m.set("age_hi", self.age_range.1);
        m.set(
            "grid",
            format!("{}x{}x{}", self.grid[0], self.grid[1], self.grid[2]),
        );
        m.set("n_rois", self.n_rois);
        m.set("fa_base", self.fa_base);
        m.set("fa_slope", self.fa_slope);
        m.set("md_base", self.md_base);
        m.set("md_slope", self.md_slope);
        m.set("noise_sigma_fa", self.noise_sigma_fa);
        m.set("noise_sigma_md", self.noise_sigma_md);
        m.set("seed", self.seed);
        m.set("age_shift_test", self.age_shift_test);
        m.set("n_impaired", self.n_impaired);
        m.set("impaired_gap", self.impaired_gap);
        m
    }

    /// Missing keys keep their defaults. The result is validated.
    pub fn from_kv(m: &KvMap) -> Result<Self, PhantomError> {
        m.check_keys(KEYS)?;
        let d = Self::default();
        let grid = match m.get("grid") {
            None => d.grid,
            Some(g) => parse_grid(g).ok_or_else(|| KvError::BadValue {
                key: "grid".into(),
                value: g.into(),
            })?,
        };
        let spec = Self {
            n_participants: m.parse_or("n_participants", d.n_participants)?,
            age_range: (
                m.parse_or("age_lo", d.age_range.0)?,
                m.parse_or("age_hi", d.age_range.1)?,
            ),
            grid,
            n_rois: m.parse_or("n_rois", d.n_rois)?,
            fa_base: m.parse_or("fa_base", d.fa_base)?,
            fa_slope: m.parse_or("fa_slope", d.fa_slope)?,
            md_base: m.parse_or("md_base", d.md_base)?,
            md_slope: m.parse_or("md_slope", d.md_slope)?,
            noise_sigma_fa: m.parse_or("noise_sigma_fa", d.noise_sigma_fa)?,
            noise_sigma_md: m.parse_or("noise_sigma_md", d.noise_sigma_md)?,
            seed: m.parse_or("seed", d.seed)?,
            age_shift_test: m.parse_or("age_shift_test", d.age_shift_test)?,
            n_impaired: m.parse_or("n_impaired", d.n_impaired)?,
            impaired_gap: m.parse_or("impaired_gap", d.impaired_gap)?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn roi_table(&self) -> RoiTable {
        RoiTable::numbered(self.n_rois)
    }

    fn offset_unit(roi: u32) -> f64 {
        (roi % 3) as f64 - 1.0
    }

    /// Noise-free FA of ROI `roi` (1-based) at `age`, before clamping.
    pub fn fa_mean(&self, roi: u32, age: f64) -> f64 {
        self.fa_base
            + FA_OFFSET_STEP * Self::offset_unit(roi)
            + self.fa_slope * (age - REFERENCE_AGE)
    }

    /// Noise-free MD of ROI `roi` (1-based) at `age`, before clamping.
    pub fn md_mean(&self, roi: u32, age: f64) -> f64 {
        self.md_base
            + MD_OFFSET_STEP * Self::offset_unit(roi)
            + self.md_slope * (age - REFERENCE_AGE)
    }
}

impl fmt::Display for PhantomSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_kv().to_text())
    }
}

/// Concentric shells of equal thickness around the grid centre, labelled
/// 1 (innermost) to `n_rois`.
pub fn shell_labels(grid: [usize; 3], n_rois: usize) -> LabelVolume {
    let [nx, ny, nz] = grid;
    let radius = RADIUS_FRACTION * *grid.iter().min().unwrap() as f64;
    let c = grid.map(|d| (d as f64 - 1.0) / 2.0);
    let mut labels = vec![0u32; nx * ny * nz];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let r = ((x as f64 - c[0]).powi(2)
                    + (y as f64 - c[1]).powi(2)
                    + (z as f64 - c[2]).powi(2))
                .sqrt();
                if r < radius {
                    let shell = ((r / radius) * n_rois as f64) as usize;
                    labels[(z * ny + y) * nx + x] = shell.min(n_rois - 1) as u32 + 1;
                }
            }
        }
    }
    LabelVolume::new(grid, [1.0; 3], labels).expect("shell labels match the grid")
}

fn synthesize(
    spec: &PhantomSpec,
    labels: &LabelVolume,
    age: f64,
    rng: &mut ChaCha8Rng,
) -> (Volume3D, Volume3D) {
    let n = labels.labels.len();
    let mut fa = vec![0.0; n];
    let mut md = vec![0.0; n];
    let means: Vec<(f64, f64)> = (0..=spec.n_rois as u32)
        .map(|r| (spec.fa_mean(r, age), spec.md_mean(r, age)))
        .collect();
    for (i, &l) in labels.labels.iter().enumerate() {
        if l == 0 {
            continue;
        }
        let (fm, mm) = means[l as usize];
        let e1: f64 = StandardNormal.sample(rng);
        let e2: f64 = StandardNormal.sample(rng);
        fa[i] = (fm + spec.noise_sigma_fa * e1).clamp(0.0, 1.0);
        md[i] = (mm + spec.noise_sigma_md * e2).max(0.0);
    }
    let mk = |data| Volume3D::new(labels.dims, labels.spacing, data).expect("grid matches labels");
    (mk(fa), mk(md))
}

/// One participant's FA, MD and label volumes. Sex does not enter the
/// generative model.
pub fn generate_phantom_participant(
    spec: &PhantomSpec,
    age: f64,
    _sex: u8,
    rng: &mut ChaCha8Rng,
) -> Result<(Volume3D, Volume3D, LabelVolume), PhantomError> {
    let (lo, hi) = spec.age_range;
    if !(lo..=hi).contains(&age) {
        return Err(PhantomError::AgeOutOfRange { age, lo, hi });
    }
    let labels = shell_labels(spec.grid, spec.n_rois);
    let (fa, md) = synthesize(spec, &labels, age, rng);
    Ok((fa, md, labels))
}

#[derive(Debug, Clone)]
pub struct PhantomParticipant {
    pub id: String,
    pub age: f64,
    pub sex: u8,
    pub cohort: Cohort,
    pub fa: Volume3D,
    pub md: Volume3D,
}

#[derive(Debug, Clone)]
pub struct PhantomCohort {
    pub spec: PhantomSpec,
    pub labels: LabelVolume,
    pub participants: Vec<PhantomParticipant>,
}

pub fn participant_id(index: usize) -> String {
    format!("ph{:04}", index + 1)
}

/// Generates the cohort in memory. Participant `i` draws its age and then
/// its voxels from a generator seeded with `seed + i`; normals come first,
/// then the impaired cohort. Sexes alternate starting with 0.
pub fn generate_phantom_cohort(spec: &PhantomSpec) -> Result<PhantomCohort, PhantomError> {
    spec.validate()?;
    let labels = shell_labels(spec.grid, spec.n_rois);
    let (lo, hi) = spec.age_range;
    let n_test =
        experiment::test_normal_count(spec.n_participants, experiment::DEFAULT_TEST_FRACTION);
    let first_test = spec.n_participants - n_test;
    let total = spec.n_participants + spec.n_impaired;
    let participants = (0..total)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(i as u64));
            let (a, b) = if i >= first_test && i < spec.n_participants {
                if spec.age_shift_test >= 0.0 {
                    (lo + spec.age_shift_test, hi)
                } else {
                    (lo, hi + spec.age_shift_test)
                }
            } else {
                (lo, hi)
            };
            let age = rng.random_range(a..=b);
            let (cohort, effective) = if i < spec.n_participants {
                (Cohort::Normal, age)
            } else {
                (Cohort::Impaired, age + spec.impaired_gap)
            };
            let (fa, md) = synthesize(spec, &labels, effective, &mut rng);
            PhantomParticipant {
                id: participant_id(i),
                age,
                sex: (i % 2) as u8,
                cohort,
                fa,
                md,
            }
        })
        .collect();
    Ok(PhantomCohort {
        spec: spec.clone(),
        labels,
        participants,
    })
}

impl PhantomCohort {
    /// Manifest rows with the file names [`PhantomCohort::write_to`] uses.
    pub fn manifest(&self) -> Vec<Participant> {
        self.participants
            .iter()
            .map(|p| Participant {
                id: p.id.clone(),
                site: "phantom".into(),
                age: p.age,
                sex: p.sex,
                cohort: p.cohort,
                fa_path: format!("{}_fa.nii", p.id),
                md_path: format!("{}_md.nii", p.id),
                label_path: "labels.nii".into(),
            })
            .collect()
    }

    /// Writes `<id>_fa.nii`, `<id>_md.nii`, a shared `labels.nii`,
    /// `manifest.csv`, `rois.txt` and `phantom.txt` into `dir`. Manifest
    /// paths are relative to `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<Vec<Participant>, PhantomError> {
        let io = |p: &Path| {
            let path = p.display().to_string();
            move |source| PhantomError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        let put = |name: &str, bytes: &[u8]| -> Result<(), PhantomError> {
            let p = dir.join(name);
            write_atomic(&p, bytes).map_err(io(&p))
        };
        put("labels.nii", &nifti::write_labels(&self.labels)?)?;
        let manifest = self.manifest();
        for (p, m) in self.participants.iter().zip(&manifest) {
            put(&m.fa_path, &nifti::write_volume(&p.fa, DT_FLOAT32)?)?;
            put(&m.md_path, &nifti::write_volume(&p.md, DT_FLOAT32)?)?;
        }
        put("rois.txt", self.spec.roi_table().to_text().as_bytes())?;
        put("phantom.txt", self.spec.to_string().as_bytes())?;
        put(
            "manifest.csv",
            experiment::write_manifest(&manifest).as_bytes(),
        )?;
        Ok(manifest)
    }
}

/// Bayes-floor MAE when every ROI holds `n_voxels_per_roi` voxels.
pub fn bayes_floor_mae(spec: &PhantomSpec, n_voxels_per_roi: usize) -> Result<f64, PhantomError> {
    bayes_floor_mae_counts(spec, &vec![n_voxels_per_roi; spec.n_rois])
}

/// Bayes-floor MAE with per-ROI voxel counts. Each ROI contributes an FA
/// mean and an MD mean with noise `σ/√n`; the optimal combination has
/// Gaussian error with std `(Σ (slope/σ_eff)²)^(−1/2)`, whose expected
/// absolute value is `σ_age·√(2/π)`.
pub fn bayes_floor_mae_counts(
    spec: &PhantomSpec,
    voxel_counts: &[usize],
) -> Result<f64, PhantomError> {
    if spec.fa_slope == 0.0 && spec.md_slope == 0.0 {
        return Err(PhantomError::NoSignal);
    }
    let mut precision = 0.0;
    for &n in voxel_counts.iter().filter(|&&n| n > 0) {
        for (slope, sigma) in [
            (spec.fa_slope, spec.noise_sigma_fa),
            (spec.md_slope, spec.noise_sigma_md),
        ] {
            if slope == 0.0 {
                continue;
            }
            let eff = sigma / (n as f64).sqrt();
            if eff == 0.0 {
                return Ok(0.0);
            }
            precision += (slope / eff).powi(2);
        }
    }
    if precision == 0.0 {
        return Err(PhantomError::NoSignal);
    }
    Ok(precision.sqrt().recip() * (2.0 / std::f64::consts::PI).sqrt())
}

/// Voxel counts of ROIs `1..=n_rois` in the shell geometry of `spec`.
pub fn shell_voxel_counts(spec: &PhantomSpec) -> Vec<usize> {
    let labels = shell_labels(spec.grid, spec.n_rois);
    let mut counts = vec![0; spec.n_rois];
    for &l in &labels.labels {
        if l > 0 {
            counts[l as usize - 1] += 1;
        }
    }
    counts
}
