//! Masking, resampling and channel stacking of template-space volumes.

use thiserror::Error;

use crate::nifti::{LabelVolume, NiftiError, Volume3D};

/// MD is stored in mm²/s (~1e-3); multiplying by this puts it on the same
/// O(1) scale as FA before it enters a network.
pub const DEFAULT_MD_SCALE: f64 = 1000.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VolumeError {
    #[error("grid mismatch: {left:?} vs {right:?}")]
    GridMismatch { left: [usize; 3], right: [usize; 3] },
    #[error("invalid target dims {0:?}")]
    InvalidDims([usize; 3]),
    #[error("duplicate channel name {0}")]
    DuplicateChannel(String),
    #[error("a multi-channel volume needs at least one channel")]
    NoChannels,
    #[error(transparent)]
    Nifti(#[from] NiftiError),
}

/// Channels sharing one grid, in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiChannelVolume {
    channels: Vec<Volume3D>,
    names: Vec<String>,
}

impl MultiChannelVolume {
    pub fn new(channels: Vec<Volume3D>, names: Vec<String>) -> Result<Self, VolumeError> {
        let first = channels.first().ok_or(VolumeError::NoChannels)?;
        for c in &channels[1..] {
            if !first.same_grid(c) {
                return Err(VolumeError::GridMismatch {
                    left: first.dims,
                    right: c.dims,
                });
            }
        }
        assert_eq!(channels.len(), names.len(), "one name per channel");
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(VolumeError::DuplicateChannel(n.clone()));
            }
        }
        Ok(Self { channels, names })
    }

    pub fn channels(&self) -> &[Volume3D] {
        &self.channels
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn dims(&self) -> [usize; 3] {
        self.channels[0].dims
    }

    /// Channel-major flat copy, the `[C, D, H, W]` layout the networks take
    /// (z slowest, x fastest within a channel).
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.channels.len() * self.channels[0].len());
        for c in &self.channels {
            out.extend_from_slice(&c.data);
        }
        out
    }
}

/// Per-axis sampling table: for each target index the two source indices and
/// the weight of the upper one.
fn axis_table(n_src: usize, n_tgt: usize) -> Vec<(usize, usize, f64)> {
    let ratio = n_src as f64 / n_tgt as f64;
    let max = (n_src - 1) as f64;
    (0..n_tgt)
        .map(|t| {
            let s = ((t as f64 + 0.5) * ratio - 0.5).clamp(0.0, max);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(n_src - 1);
            (lo, hi, s - lo as f64)
        })
        .collect()
}

/// Center-aligned trilinear resampling with edge clamping. The field of view
/// is preserved, so spacing scales by `n_src / n_tgt` per axis.
pub fn resample_trilinear(vol: &Volume3D, target: [usize; 3]) -> Result<Volume3D, VolumeError> {
    if target.iter().any(|&t| t == 0) {
        return Err(VolumeError::InvalidDims(target));
    }
    let [sx, sy, sz] = vol.dims;
    let [tx, ty, tz] = target;
    let (ax, ay, az) = (axis_table(sx, tx), axis_table(sy, ty), axis_table(sz, tz));

    // Trilinear weights are a tensor product, so three 1-D passes are exact.
    let mut pass_x = vec![0.0; tx * sy * sz];
    for z in 0..sz {
        for y in 0..sy {
            let src = &vol.data[sx * (y + sy * z)..][..sx];
            let dst = &mut pass_x[tx * (y + sy * z)..][..tx];
            for (d, &(lo, hi, w)) in dst.iter_mut().zip(&ax) {
                *d = src[lo] * (1.0 - w) + src[hi] * w;
            }
        }
    }
    let mut pass_y = vec![0.0; tx * ty * sz];
    for z in 0..sz {
        for (y, &(lo, hi, w)) in ay.iter().enumerate() {
            let a = &pass_x[tx * (lo + sy * z)..][..tx];
            let b = &pass_x[tx * (hi + sy * z)..][..tx];
            let dst = &mut pass_y[tx * (y + ty * z)..][..tx];
            for x in 0..tx {
                dst[x] = a[x] * (1.0 - w) + b[x] * w;
            }
        }
    }
    let plane = tx * ty;
    let mut out = vec![0.0; plane * tz];
    for (z, &(lo, hi, w)) in az.iter().enumerate() {
        let a = &pass_y[plane * lo..][..plane];
        let b = &pass_y[plane * hi..][..plane];
        let dst = &mut out[plane * z..][..plane];
        for i in 0..plane {
            dst[i] = a[i] * (1.0 - w) + b[i] * w;
        }
    }

    let spacing = [0, 1, 2].map(|i| vol.spacing[i] * vol.dims[i] as f64 / target[i] as f64);
    Ok(Volume3D::new(target, spacing, out)?)
}

pub fn mask_from_labels(labels: &LabelVolume) -> Volume3D {
    Volume3D {
        dims: labels.dims,
        spacing: labels.spacing,
        data: labels
            .labels
            .iter()
            .map(|&l| if l > 0 { 1.0 } else { 0.0 })
            .collect(),
    }
}

pub fn apply_mask(vol: &Volume3D, mask: &Volume3D) -> Result<Volume3D, VolumeError> {
    if vol.dims != mask.dims {
        return Err(VolumeError::GridMismatch {
            left: vol.dims,
            right: mask.dims,
        });
    }
    Ok(Volume3D {
        dims: vol.dims,
        spacing: vol.spacing,
        data: vol
            .data
            .iter()
            .zip(&mask.data)
            .map(|(v, m)| v * m)
            .collect(),
    })
}

/// `[FA, MD]`, FA first. Values are taken as given; see [`network_input`]
/// for the scaled variant the models consume.
pub fn stack_channels(fa: &Volume3D, md: &Volume3D) -> Result<MultiChannelVolume, VolumeError> {
    MultiChannelVolume::new(vec![fa.clone(), md.clone()], vec!["FA".into(), "MD".into()])
}

/// Mask on the native grid, resample to `size³`, scale MD, then stack.
pub fn network_input(
    fa: &Volume3D,
    md: &Volume3D,
    labels: &LabelVolume,
    size: usize,
    md_scale: f64,
) -> Result<MultiChannelVolume, VolumeError> {
    if !fa.same_grid(md) || fa.dims != labels.dims {
        return Err(VolumeError::GridMismatch {
            left: fa.dims,
            right: if fa.dims != md.dims {
                md.dims
            } else {
                labels.dims
            },
        });
    }
    let mask = mask_from_labels(labels);
    let target = [size; 3];
    let prep = |v: &Volume3D| -> Result<Volume3D, VolumeError> {
        let masked = apply_mask(v, &mask)?;
        if masked.dims == target {
            Ok(masked)
        } else {
            resample_trilinear(&masked, target)
        }
    };
    let fa_r = prep(fa)?;
    let md_r = prep(md)?.scaled(md_scale);
    stack_channels(&fa_r, &md_r)
}
