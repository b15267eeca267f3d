//! ROI-feature MLPs and 3D ResNet10/18/34 backbones with a sex-aware head.
//!
//! Every model owns a [`ParamStore`]. Forward passes read parameters from a
//! store passed in explicitly so that finite-difference checks can perturb
//! a copy, and return train-mode batch-norm statistics instead of writing
//! them, which keeps eval-mode inference free of shared mutation.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{
    checkpoint, Adam, BatchStats, BufferId, Mode, NnError, ParamId, ParamStore, RunningStats, Tape,
    Tensor, Var,
};
use crate::volume::MultiChannelVolume;

pub const FEATURE_DIM: usize = 512;
pub const STAGE_WIDTHS: [usize; 4] = [64, 128, 256, 512];
pub const HEAD_HIDDEN: usize = 64;
pub const MIN_INPUT: usize = 16;
pub const DEFAULT_INPUT: usize = 128;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("model expects {expected} input, got {got}")]
    KindMismatch { expected: ModelKind, got: ModelKind },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty output: {0}")]
    EmptyOutput(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    RoiMlp,
    Resnet,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::RoiMlp => "roi_mlp",
            ModelKind::Resnet => "resnet",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpSpec {
    pub layer_sizes: Vec<usize>,
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>) -> Result<Self, ModelError> {
        if layer_sizes.len() < 2 {
            return Err(ModelError::InvalidSpec(
                "an MLP needs at least two layer sizes".into(),
            ));
        }
        if layer_sizes.contains(&0) {
            return Err(ModelError::InvalidSpec(
                "layer sizes must be positive".into(),
            ));
        }
        if *layer_sizes.last().unwrap() != 1 {
            return Err(ModelError::InvalidSpec(
                "the last layer size must be 1".into(),
            ));
        }
        Ok(Self { layer_sizes })
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }
}

impl fmt::Display for MlpSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.layer_sizes.iter().map(usize::to_string).collect();
        f.write_str(&parts.join("-"))
    }
}

impl FromStr for MlpSpec {
    type Err = ModelError;

    /// `537-128-64-1`.
    fn from_str(s: &str) -> Result<Self, ModelError> {
        let sizes = s
            .split('-')
            .map(|p| p.trim().parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| ModelError::InvalidSpec(format!("bad layer sizes {s:?}")))?;
        Self::new(sizes)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResNetSpec {
    pub variant: u32,
    pub in_channels: usize,
    pub block_counts: [usize; 4],
    pub stage_widths: [usize; 4],
    pub feature_dim: usize,
}

impl ResNetSpec {
    pub fn new(variant: u32, in_channels: usize) -> Result<Self, ModelError> {
        let block_counts = match variant {
            10 => [1, 1, 1, 1],
            18 => [2, 2, 2, 2],
            34 => [3, 4, 6, 3],
            v => {
                return Err(ModelError::InvalidSpec(format!(
                    "unknown ResNet variant {v}"
                )))
            }
        };
        if in_channels == 0 {
            return Err(ModelError::InvalidSpec(
                "in_channels must be positive".into(),
            ));
        }
        Ok(Self {
            variant,
            in_channels,
            block_counts,
            stage_widths: STAGE_WIDTHS,
            feature_dim: FEATURE_DIM,
        })
    }
}

/// Full model description as written in experiment configs:
/// `roi_mlp:537-128-64-1` or `resnet:18,head_hidden=true,input=128`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ModelSpec {
    RoiMlp(MlpSpec),
    Resnet {
        backbone: ResNetSpec,
        head_hidden: bool,
        input: usize,
    },
}

impl ModelSpec {
    pub fn kind(&self) -> ModelKind {
        match self {
            ModelSpec::RoiMlp(_) => ModelKind::RoiMlp,
            ModelSpec::Resnet { .. } => ModelKind::Resnet,
        }
    }

    /// The nine configurations compared in the original study at the given
    /// ROI input width and volume size.
    pub fn table_variants(roi_inputs: usize, input: usize) -> Vec<ModelSpec> {
        let mut out: Vec<ModelSpec> = [vec![64, 32, 8], vec![128, 64, 8], vec![128, 64]]
            .into_iter()
            .map(|hidden| {
                let mut sizes = vec![roi_inputs];
                sizes.extend(hidden);
                sizes.push(1);
                ModelSpec::RoiMlp(MlpSpec { layer_sizes: sizes })
            })
            .collect();
        for variant in [10, 18, 34] {
            for head_hidden in [false, true] {
                out.push(ModelSpec::Resnet {
                    backbone: ResNetSpec::new(variant, 2).unwrap(),
                    head_hidden,
                    input,
                });
            }
        }
        out
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelSpec::RoiMlp(m) => write!(f, "roi_mlp:{m}"),
            ModelSpec::Resnet {
                backbone,
                head_hidden,
                input,
            } => {
                write!(
                    f,
                    "resnet:{},head_hidden={head_hidden},input={input}",
                    backbone.variant
                )?;
                if backbone.in_channels != 2 {
                    write!(f, ",channels={}", backbone.in_channels)?;
                }
                Ok(())
            }
        }
    }
}

impl FromStr for ModelSpec {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, ModelError> {
        let (kind, rest) = s
            .trim()
            .split_once(':')
            .ok_or_else(|| ModelError::InvalidSpec(format!("expected kind:details, got {s:?}")))?;
        match kind.trim() {
            "roi_mlp" => Ok(ModelSpec::RoiMlp(rest.parse()?)),
            "resnet" => {
                let mut parts = rest.split(',');
                let variant = parts
                    .next()
                    .unwrap_or("")
                    .trim()
                    .parse::<u32>()
                    .map_err(|_| ModelError::InvalidSpec(format!("bad ResNet variant in {s:?}")))?;
                let (mut head_hidden, mut input, mut channels) = (true, DEFAULT_INPUT, 2);
                for p in parts {
                    let (k, v) = p.split_once('=').ok_or_else(|| {
                        ModelError::InvalidSpec(format!("expected key=value, got {p:?}"))
                    })?;
                    let bad =
                        || ModelError::InvalidSpec(format!("bad value for {}: {v:?}", k.trim()));
                    match k.trim() {
                        "head_hidden" => head_hidden = v.trim().parse().map_err(|_| bad())?,
                        "input" => input = v.trim().parse().map_err(|_| bad())?,
                        "channels" => channels = v.trim().parse().map_err(|_| bad())?,
                        other => {
                            return Err(ModelError::InvalidSpec(format!(
                                "unknown option {other:?}"
                            )))
                        }
                    }
                }
                if input < MIN_INPUT {
                    return Err(ModelError::EmptyOutput(format!(
                        "input size {input} is below the minimum {MIN_INPUT}"
                    )));
                }
                Ok(ModelSpec::Resnet {
                    backbone: ResNetSpec::new(variant, channels)?,
                    head_hidden,
                    input,
                })
            }
            other => Err(ModelError::InvalidSpec(format!(
                "unknown model kind {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

/// Dense stack with a rectifier between layers but not after the last one.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Dense>,
    sizes: Vec<usize>,
}

impl Mlp {
    pub fn layer_sizes(&self) -> &[usize] {
        &self.sizes
    }

    fn forward(&self, store: &ParamStore, tape: &mut Tape, x: Var) -> Result<Var, NnError> {
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            let (w, b) = (tape.param(store, l.w), tape.param(store, l.b));
            h = tape.dense(h, w, b)?;
            if i + 1 < self.layers.len() {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }
}

fn he_normal(shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

/// Initial bias of the first hidden layer. Zero biases put every ReLU kink
/// through the centre of the (centred) data, and a readout that must stay
/// linear to a part in 10⁴ across the data then fits noise as wiggles; a
/// positive offset starts the units linear over the bulk of the data.
pub const FIRST_HIDDEN_BIAS: f64 = 3.0;

/// Dense stack with He-normal hidden weights. The output layer starts at
/// zero so a fresh model predicts the (normalised) target mean.
fn add_mlp(
    store: &mut ParamStore,
    prefix: &str,
    sizes: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<Mlp, NnError> {
    let mut layers = Vec::new();
    for (i, pair) in sizes.windows(2).enumerate() {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let last = i + 2 == sizes.len();
        let w = if last {
            Tensor::zeros(vec![fan_in, fan_out])
        } else {
            he_normal(vec![fan_in, fan_out], fan_in, rng)
        };
        let b = if i == 0 && !last {
            Tensor::full(vec![fan_out], FIRST_HIDDEN_BIAS)
        } else {
            Tensor::zeros(vec![fan_out])
        };
        let w = store.add(format!("{prefix}.fc{}.weight", i + 1), w)?;
        let b = store.add(format!("{prefix}.fc{}.bias", i + 1), b)?;
        layers.push(Dense { w, b });
    }
    Ok(Mlp {
        layers,
        sizes: sizes.to_vec(),
    })
}

#[derive(Debug, Clone)]
struct BatchNorm {
    gamma: ParamId,
    beta: ParamId,
    stats: BufferId,
}

#[derive(Debug, Clone)]
struct ConvBn {
    weight: ParamId,
    bn: BatchNorm,
    stride: usize,
    pad: usize,
}

type BnUpdates = Vec<(BufferId, BatchStats)>;

impl ConvBn {
    fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, NnError> {
        let fan_in = in_ch * kernel * kernel * kernel;
        let weight = store.add(
            format!("{name}.conv.weight"),
            he_normal(vec![out_ch, in_ch, kernel, kernel, kernel], fan_in, rng),
        )?;
        let gamma = store.add(format!("{name}.bn.gamma"), Tensor::full(vec![out_ch], 1.0))?;
        let beta = store.add(format!("{name}.bn.beta"), Tensor::zeros(vec![out_ch]))?;
        let stats = store.add_buffer(RunningStats::new(format!("{name}.bn"), out_ch));
        Ok(Self {
            weight,
            bn: BatchNorm { gamma, beta, stats },
            stride,
            pad: kernel / 2,
        })
    }

    fn forward(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        x: Var,
        mode: Mode,
        upd: &mut BnUpdates,
    ) -> Result<Var, NnError> {
        let k = tape.param(store, self.weight);
        let y = tape.conv3d(x, k, None, self.stride, self.pad)?;
        let (g, b) = (
            tape.param(store, self.bn.gamma),
            tape.param(store, self.bn.beta),
        );
        let (y, stats) = tape.batchnorm_with(y, g, b, mode, store.buffer(self.bn.stats))?;
        if let Some(s) = stats {
            upd.push((self.bn.stats, s));
        }
        Ok(y)
    }
}

/// Two 3³ conv-BN layers plus a shortcut; the shortcut is a 1³ stride-2
/// conv-BN where the block changes width or resolution.
#[derive(Debug, Clone)]
struct BasicBlock {
    conv1: ConvBn,
    conv2: ConvBn,
    shortcut: Option<ConvBn>,
}

impl BasicBlock {
    fn forward(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        x: Var,
        mode: Mode,
        upd: &mut BnUpdates,
    ) -> Result<Var, NnError> {
        let h = self.conv1.forward(store, tape, x, mode, upd)?;
        let h = tape.relu(h)?;
        let h = self.conv2.forward(store, tape, h, mode, upd)?;
        let s = match &self.shortcut {
            Some(sc) => sc.forward(store, tape, x, mode, upd)?,
            None => x,
        };
        let y = tape.add(h, s)?;
        tape.relu(y)
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    spec: ResNetSpec,
    stem: ConvBn,
    blocks: Vec<BasicBlock>,
}

impl Backbone {
    pub fn spec(&self) -> &ResNetSpec {
        &self.spec
    }

    /// `x[B, C, D, H, W]` to features `[B, 512]`.
    pub fn forward(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        x: Var,
        mode: Mode,
        upd: &mut Vec<(BufferId, BatchStats)>,
    ) -> Result<Var, ModelError> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 5 || shape[1] != self.spec.in_channels {
            return Err(ModelError::ShapeMismatch(format!(
                "expected [B, {}, D, H, W], got {shape:?}",
                self.spec.in_channels
            )));
        }
        if shape[2..].iter().any(|&d| d < MIN_INPUT) {
            return Err(ModelError::EmptyOutput(format!(
                "spatial size {:?} is below the minimum {MIN_INPUT}³",
                &shape[2..]
            )));
        }
        let h = self.stem.forward(store, tape, x, mode, upd)?;
        let h = tape.relu(h)?;
        let mut h = tape.max_pool3d(h, 3, 2, 1)?;
        for b in &self.blocks {
            h = b.forward(store, tape, h, mode, upd)?;
        }
        Ok(tape.global_avg_pool(h)?)
    }
}

pub fn build_resnet_backbone(
    spec: &ResNetSpec,
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
) -> Result<Backbone, ModelError> {
    let expected = ResNetSpec::new(spec.variant, spec.in_channels)?;
    if *spec != expected {
        return Err(ModelError::InvalidSpec(format!(
            "ResNet{} uses blocks {:?} and widths {:?}",
            spec.variant, expected.block_counts, expected.stage_widths
        )));
    }
    let stem_w = spec.stage_widths[0];
    let stem = ConvBn {
        pad: 3,
        ..ConvBn::new(store, "stem", spec.in_channels, stem_w, 7, 2, rng)?
    };
    let mut blocks = Vec::new();
    let mut in_ch = stem_w;
    for (s, (&count, &width)) in spec.block_counts.iter().zip(&spec.stage_widths).enumerate() {
        for i in 0..count {
            let stride = if s > 0 && i == 0 { 2 } else { 1 };
            let name = format!("layer{}.{i}", s + 1);
            let conv1 = ConvBn::new(
                store,
                &format!("{name}.conv1"),
                in_ch,
                width,
                3,
                stride,
                rng,
            )?;
            let conv2 = ConvBn::new(store, &format!("{name}.conv2"), width, width, 3, 1, rng)?;
            let shortcut = if stride != 1 || in_ch != width {
                Some(ConvBn::new(
                    store,
                    &format!("{name}.shortcut"),
                    in_ch,
                    width,
                    1,
                    stride,
                    rng,
                )?)
            } else {
                None
            };
            blocks.push(BasicBlock {
                conv1,
                conv2,
                shortcut,
            });
            in_ch = width;
        }
    }
    Ok(Backbone {
        spec: spec.clone(),
        stem,
        blocks,
    })
}

/// Layer sizes of the head that maps backbone features plus sex to age.
pub fn head_sizes(with_hidden: bool) -> Vec<usize> {
    if with_hidden {
        vec![FEATURE_DIM + 1, HEAD_HIDDEN, 1]
    } else {
        vec![FEATURE_DIM + 1, 1]
    }
}

pub fn build_head(
    with_hidden: bool,
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
) -> Result<Mlp, ModelError> {
    Ok(add_mlp(store, "head", &head_sizes(with_hidden), rng)?)
}

#[derive(Debug, Clone)]
enum Network {
    Mlp(Mlp),
    Resnet { backbone: Backbone, head: Mlp },
}

/// Affine maps applied around the network: ROI features become
/// `((x − feature_mean) / feature_scale) · rotation` and the network predicts
/// `(age − target_mean) / target_std`. An empty rotation is the identity, as
/// are the defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub feature_mean: Vec<f64>,
    pub feature_scale: Vec<f64>,
    /// Row-major `F×F` matrix, or empty.
    #[serde(default)]
    pub rotation: Vec<f64>,
    pub target_mean: f64,
    pub target_std: f64,
}

impl Normalization {
    pub fn identity(n_features: usize) -> Self {
        Self {
            feature_mean: vec![0.0; n_features],
            feature_scale: vec![1.0; n_features],
            rotation: Vec::new(),
            target_mean: 0.0,
            target_std: 1.0,
        }
    }

    /// Column means and population stds of `rows`, and the mean and std of
    /// `targets`. Zero spreads become 1.
    pub fn fit(rows: &[Vec<f64>], targets: &[f64]) -> Self {
        let n_features = rows.first().map_or(0, Vec::len);
        let mut out = Self::identity(n_features);
        if !rows.is_empty() {
            let n = rows.len() as f64;
            for j in 0..n_features {
                let m = rows.iter().map(|r| r[j]).sum::<f64>() / n;
                let sd = (rows.iter().map(|r| (r[j] - m).powi(2)).sum::<f64>() / n).sqrt();
                out.feature_mean[j] = m;
                out.feature_scale[j] = if sd > 0.0 { sd } else { 1.0 };
            }
        }
        if !targets.is_empty() {
            let n = targets.len() as f64;
            let m = targets.iter().sum::<f64>() / n;
            let sd = (targets.iter().map(|t| (t - m).powi(2)).sum::<f64>() / n).sqrt();
            out.target_mean = m;
            out.target_std = if sd > 0.0 { sd } else { 1.0 };
        }
        out
    }

    /// Principal-axis variant: columns are centred and divided by `units`
    /// (fixed, not fitted), then projected onto the eigenvectors of their
    /// covariance. Variances are kept rather than whitened, with one global
    /// factor putting the leading axis at std `gain`.
    ///
    /// Keeping the variances matters: whitening would blow the many
    /// noise-only directions up to the size of the signal, while per-column
    /// z-scoring leaves near-collinear columns that first-order optimisers
    /// only untangle after very many steps.
    pub fn fit_pca(rows: &[Vec<f64>], units: &[f64], targets: &[f64], gain: f64) -> Self {
        let mut out = Self::fit(&[], targets);
        let f = units.len();
        out.feature_mean = vec![0.0; f];
        out.feature_scale = units
            .iter()
            .map(|&u| if u > 0.0 { u } else { 1.0 })
            .collect();
        if rows.is_empty() {
            return out;
        }
        assert!(
            rows.iter().all(|r| r.len() == f),
            "row width differs from units"
        );
        let n = rows.len() as f64;
        for j in 0..f {
            out.feature_mean[j] = rows.iter().map(|r| r[j]).sum::<f64>() / n;
        }
        let z: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| {
                (0..f)
                    .map(|j| (r[j] - out.feature_mean[j]) / out.feature_scale[j])
                    .collect()
            })
            .collect();
        let cov =
            nalgebra::DMatrix::from_fn(f, f, |a, b| z.iter().map(|r| r[a] * r[b]).sum::<f64>() / n);
        let eig = nalgebra::SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..f).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let top = eig.eigenvalues[order[0]];
        if !(top > 0.0) {
            return out;
        }
        let k = gain / top.sqrt();
        let mut rot = vec![0.0; f * f];
        for (col, &e) in order.iter().enumerate() {
            // Deterministic sign: largest-magnitude entry positive.
            let v = eig.eigenvectors.column(e);
            let pivot = (0..f)
                .max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs()))
                .unwrap_or(0);
            let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
            for row in 0..f {
                rot[row * f + col] = sign * k * v[row];
            }
        }
        out.rotation = rot;
        out
    }

    /// Applies the feature map to one row in place.
    pub fn transform_row(&self, row: &mut [f64]) {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - self.feature_mean[j]) / self.feature_scale[j];
        }
        if !self.rotation.is_empty() {
            let f = row.len();
            let src = row.to_vec();
            for (col, v) in row.iter_mut().enumerate() {
                *v = (0..f).map(|r| src[r] * self.rotation[r * f + col]).sum();
            }
        }
    }

    pub fn encode_target(&self, age: f64) -> f64 {
        (age - self.target_mean) / self.target_std
    }

    pub fn decode_target(&self, z: f64) -> f64 {
        z * self.target_std + self.target_mean
    }
}

/// A batch of network inputs.
#[derive(Debug, Clone)]
pub enum Batch {
    /// Raw (unstandardised) ROI features `[B, F]`.
    Features(Tensor),
    /// Volumes `[B, C, D, H, W]` and sex `[B, 1]`.
    Volumes { x: Tensor, sex: Tensor },
}

impl Batch {
    pub fn len(&self) -> usize {
        match self {
            Batch::Features(t) => t.shape()[0],
            Batch::Volumes { x, .. } => x.shape()[0],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Batch::Features(_) => ModelKind::RoiMlp,
            Batch::Volumes { .. } => ModelKind::Resnet,
        }
    }
}

/// A single participant's input to [`predict_age`].
#[derive(Debug, Clone, Copy)]
pub enum ModelInput<'a> {
    Features(&'a [f64]),
    Volume {
        volume: &'a MultiChannelVolume,
        sex: u8,
    },
}

impl ModelInput<'_> {
    pub fn kind(&self) -> ModelKind {
        match self {
            ModelInput::Features(_) => ModelKind::RoiMlp,
            ModelInput::Volume { .. } => ModelKind::Resnet,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AgeModel {
    spec: ModelSpec,
    store: ParamStore,
    net: Network,
    pub normalization: Normalization,
}

pub fn build_mlp(spec: &MlpSpec, seed: u64) -> Result<AgeModel, ModelError> {
    let spec = MlpSpec::new(spec.layer_sizes.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let mlp = add_mlp(&mut store, "mlp", &spec.layer_sizes, &mut rng)?;
    Ok(AgeModel {
        normalization: Normalization::identity(spec.input_dim()),
        spec: ModelSpec::RoiMlp(spec),
        store,
        net: Network::Mlp(mlp),
    })
}

/// Builds any model spec with a seeded He-normal initialisation; biases
/// and batch-norm shifts start at 0, batch-norm scales at 1.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<AgeModel, ModelError> {
    match spec {
        ModelSpec::RoiMlp(m) => build_mlp(m, seed),
        ModelSpec::Resnet {
            backbone,
            head_hidden,
            input,
        } => {
            if *input < MIN_INPUT {
                return Err(ModelError::EmptyOutput(format!(
                    "input size {input} is below the minimum {MIN_INPUT}"
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let bb = build_resnet_backbone(backbone, &mut store, &mut rng)?;
            let head = build_head(*head_hidden, &mut store, &mut rng)?;
            Ok(AgeModel {
                spec: spec.clone(),
                store,
                net: Network::Resnet { backbone: bb, head },
                normalization: Normalization::identity(0),
            })
        }
    }
}

impl AgeModel {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn kind(&self) -> ModelKind {
        self.spec.kind()
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Hidden width of the ResNet head, if it has one.
    pub fn head_hidden(&self) -> Option<usize> {
        match &self.net {
            Network::Resnet { head, .. } if head.sizes.len() > 2 => Some(head.sizes[1]),
            _ => None,
        }
    }

    pub fn backbone(&self) -> Option<&Backbone> {
        match &self.net {
            Network::Resnet { backbone, .. } => Some(backbone),
            Network::Mlp(_) => None,
        }
    }

    /// The dense stack: the whole model for ROI MLPs, the head for ResNets.
    pub fn mlp(&self) -> &Mlp {
        match &self.net {
            Network::Mlp(m) => m,
            Network::Resnet { head, .. } => head,
        }
    }

    /// Number of ROI features the model expects (0 for ResNets).
    pub fn feature_dim(&self) -> usize {
        match &self.spec {
            ModelSpec::RoiMlp(m) => m.input_dim(),
            ModelSpec::Resnet { .. } => 0,
        }
    }

    /// Spatial input size for ResNets (0 for ROI MLPs).
    pub fn input_size(&self) -> usize {
        match &self.spec {
            ModelSpec::RoiMlp(_) => 0,
            ModelSpec::Resnet { input, .. } => *input,
        }
    }

    /// Forward pass with parameters from `store`, which must come from the
    /// same spec. Output is `[B, 1]` in normalised target units. Train-mode
    /// batch-norm statistics are returned, not applied.
    pub fn forward_with(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        batch: &Batch,
        mode: Mode,
    ) -> Result<(Var, Vec<(BufferId, BatchStats)>), ModelError> {
        let mut upd = Vec::new();
        let out = match (&self.net, batch) {
            (Network::Mlp(mlp), Batch::Features(x)) => {
                let xs = x.shape();
                if xs.len() != 2 || xs[1] != mlp.sizes[0] {
                    return Err(ModelError::ShapeMismatch(format!(
                        "expected [B, {}] features, got {xs:?}",
                        mlp.sizes[0]
                    )));
                }
                let v = tape.input(self.standardize(x), false);
                mlp.forward(store, tape, v)?
            }
            (Network::Resnet { backbone, head }, Batch::Volumes { x, sex }) => {
                if sex.shape() != [x.shape()[0], 1] {
                    return Err(ModelError::ShapeMismatch(format!(
                        "sex must be [{}, 1], got {:?}",
                        x.shape()[0],
                        sex.shape()
                    )));
                }
                let xv = tape.input(x.clone(), false);
                let feats = backbone.forward(store, tape, xv, mode, &mut upd)?;
                let sv = tape.input(sex.clone(), false);
                let joined = tape.concat(feats, sv)?;
                head.forward(store, tape, joined)?
            }
            (_, b) => {
                return Err(ModelError::KindMismatch {
                    expected: self.kind(),
                    got: b.kind(),
                })
            }
        };
        Ok((out, upd))
    }

    /// Forward pass on the model's own parameters.
    pub fn forward(
        &self,
        tape: &mut Tape,
        batch: &Batch,
        mode: Mode,
    ) -> Result<(Var, Vec<(BufferId, BatchStats)>), ModelError> {
        self.forward_with(&self.store, tape, batch, mode)
    }

    /// Applies batch statistics collected by a train-mode forward pass.
    pub fn apply_bn_updates(&mut self, updates: &[(BufferId, BatchStats)]) {
        for (id, s) in updates {
            self.store.buffer_mut(*id).update(s);
        }
    }

    fn standardize(&self, x: &Tensor) -> Tensor {
        let f = x.shape()[1];
        let mut out = x.clone();
        for row in out.data_mut().chunks_exact_mut(f) {
            self.normalization.transform_row(row);
        }
        out
    }

    /// Eval-mode predictions in years, one per batch row.
    pub fn predict_batch(&self, batch: &Batch) -> Result<Vec<f64>, ModelError> {
        let mut tape = Tape::new();
        let (out, _) = self.forward(&mut tape, batch, Mode::Eval)?;
        Ok(tape
            .value(out)
            .data()
            .iter()
            .map(|&z| self.normalization.decode_target(z))
            .collect())
    }

    pub fn param_count(&self) -> usize {
        param_count(self)
    }

    /// Serialises parameters, batch-norm buffers, normalisation and
    /// (optionally) optimizer state.
    pub fn to_checkpoint(&self, optimizer: Option<&Adam>, extra: serde_json::Value) -> Vec<u8> {
        let meta = serde_json::json!({
            "model": self.spec.to_string(),
            "normalization": self.normalization,
            "extra": extra,
        });
        checkpoint::save(&self.store, optimizer, meta)
    }

    /// Rebuilds a model from checkpoint bytes. Returns the model and the
    /// `extra` metadata stored with it.
    pub fn from_checkpoint(
        bytes: &[u8],
        optimizer: Option<&mut Adam>,
    ) -> Result<(Self, serde_json::Value), ModelError> {
        let meta = checkpoint::read_meta(bytes)?;
        let spec: ModelSpec = meta["model"]
            .as_str()
            .ok_or_else(|| NnError::Checkpoint("missing model spec".into()))?
            .parse()?;
        let mut model = build_model(&spec, 0)?;
        checkpoint::load_into(bytes, &mut model.store, optimizer)?;
        model.normalization = serde_json::from_value(meta["normalization"].clone())
            .map_err(|e| NnError::Checkpoint(format!("normalization: {e}")))?;
        Ok((model, meta["extra"].clone()))
    }
}

/// Sum of trainable parameter element counts.
pub fn param_count(model: &AgeModel) -> usize {
    model.store.numel()
}

fn single_batch(model: &AgeModel, input: &ModelInput<'_>) -> Result<Batch, ModelError> {
    match (model.kind(), input) {
        (ModelKind::RoiMlp, ModelInput::Features(f)) => Ok(Batch::Features(
            Tensor::new(vec![1, f.len()], f.to_vec()).map_err(ModelError::Nn)?,
        )),
        (ModelKind::Resnet, ModelInput::Volume { volume, sex }) => {
            let d = volume.dims();
            let c = volume.channels().len();
            let x = Tensor::new(vec![1, c, d[2], d[1], d[0]], volume.to_flat())?;
            Ok(Batch::Volumes {
                x,
                sex: Tensor::new(vec![1, 1], vec![f64::from(*sex)])?,
            })
        }
        (expected, other) => Err(ModelError::KindMismatch {
            expected,
            got: other.kind(),
        }),
    }
}

/// Eval-mode age estimate in years for one participant.
pub fn predict_age(model: &AgeModel, input: ModelInput<'_>) -> Result<f64, ModelError> {
    let batch = single_batch(model, &input)?;
    Ok(model.predict_batch(&batch)?[0])
}

/// Tensor layout of a volume batch: `[B, C, z, y, x]`, x fastest, matching
/// [`MultiChannelVolume::to_flat`].
pub fn volume_batch(volumes: &[&MultiChannelVolume], sexes: &[u8]) -> Result<Batch, ModelError> {
    let first = volumes
        .first()
        .ok_or_else(|| ModelError::ShapeMismatch("empty volume batch".into()))?;
    let d = first.dims();
    let c = first.channels().len();
    let mut data = Vec::with_capacity(volumes.len() * c * d.iter().product::<usize>());
    for v in volumes {
        if v.dims() != d || v.channels().len() != c {
            return Err(ModelError::ShapeMismatch(
                "volumes in a batch must share channels and dims".into(),
            ));
        }
        data.extend(v.to_flat());
    }
    if sexes.len() != volumes.len() {
        return Err(ModelError::ShapeMismatch("one sex value per volume".into()));
    }
    Ok(Batch::Volumes {
        x: Tensor::new(vec![volumes.len(), c, d[2], d[1], d[0]], data)?,
        sex: Tensor::new(
            vec![sexes.len(), 1],
            sexes.iter().map(|&s| f64::from(s)).collect(),
        )?,
    })
}

pub fn feature_batch(rows: &[&[f64]]) -> Result<Batch, ModelError> {
    let f = rows
        .first()
        .ok_or_else(|| ModelError::ShapeMismatch("empty feature batch".into()))?
        .len();
    if rows.iter().any(|r| r.len() != f) {
        return Err(ModelError::ShapeMismatch(
            "feature rows differ in length".into(),
        ));
    }
    Ok(Batch::Features(Tensor::new(
        vec![rows.len(), f],
        rows.concat(),
    )?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_text_round_trips() {
        for s in [
            "roi_mlp:537-128-64-1",
            "roi_mlp:537-64-32-8-1",
            "resnet:18,head_hidden=true,input=128",
            "resnet:10,head_hidden=false,input=32",
        ] {
            let spec: ModelSpec = s.parse().unwrap();
            assert_eq!(spec.to_string(), s);
        }
        let short: ModelSpec = "resnet:34".parse().unwrap();
        assert_eq!(short.to_string(), "resnet:34,head_hidden=true,input=128");
        for bad in [
            "roi_mlp:537-128-2",
            "roi_mlp:5",
            "resnet:50",
            "cnn:3",
            "resnet:18,depth=3",
            "roi_mlp:5-0-1",
        ] {
            assert!(
                matches!(bad.parse::<ModelSpec>(), Err(ModelError::InvalidSpec(_))),
                "{bad}"
            );
        }
        assert!(matches!(
            "resnet:10,input=8".parse::<ModelSpec>(),
            Err(ModelError::EmptyOutput(_))
        ));
    }

    #[test]
    fn block_counts_per_variant() {
        assert_eq!(ResNetSpec::new(10, 2).unwrap().block_counts, [1, 1, 1, 1]);
        assert_eq!(ResNetSpec::new(18, 2).unwrap().block_counts, [2, 2, 2, 2]);
        assert_eq!(ResNetSpec::new(34, 2).unwrap().block_counts, [3, 4, 6, 3]);
        let mut odd = ResNetSpec::new(18, 2).unwrap();
        odd.block_counts = [1, 1, 1, 1];
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            build_resnet_backbone(&odd, &mut store, &mut rng),
            Err(ModelError::InvalidSpec(_))
        ));
    }

    #[test]
    fn head_layer_sizes() {
        assert_eq!(head_sizes(true), vec![513, 64, 1]);
        assert_eq!(head_sizes(false), vec![513, 1]);
    }

    #[test]
    fn zeroed_block_passes_input_through() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let block = BasicBlock {
            conv1: ConvBn::new(&mut store, "b.conv1", 4, 4, 3, 1, &mut rng).unwrap(),
            conv2: ConvBn::new(&mut store, "b.conv2", 4, 4, 3, 1, &mut rng).unwrap(),
            shortcut: None,
        };
        for c in [&block.conv1, &block.conv2] {
            store.value_mut(c.weight).data_mut().fill(0.0);
            store.value_mut(c.bn.gamma).data_mut().fill(0.0);
        }
        // block inputs inside the network are rectified, hence non-negative
        let x = Tensor::randn(vec![2, 4, 3, 3, 3], 1.0, &mut rng);
        let x = Tensor::new(
            x.shape().to_vec(),
            x.data().iter().map(|v| v.abs()).collect(),
        )
        .unwrap();
        for mode in [Mode::Train, Mode::Eval] {
            let mut tape = Tape::new();
            let xv = tape.input(x.clone(), false);
            let y = block
                .forward(&store, &mut tape, xv, mode, &mut Vec::new())
                .unwrap();
            assert_eq!(tape.value(y), &x);
        }
    }
}
