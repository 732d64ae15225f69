//! Gradient-free class saliency for ViTs by spatial token masking.
//!
//! The feature map at the split point is multiplied row-wise by `N = P²`
//! spatial masks, one centred on each patch. The masked batch is scored by the
//! network suffix, and the softmax probability of the target class under mask
//! `n` becomes the raw importance of patch `n`. Min-max normalization of those
//! `N` scores, reshaped to `P × P`, is the saliency map.
//!
//! Also hosts the class-agnostic attention-rollout baseline.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::imaging::ImageTensor;
use crate::tensor::{argmax, softmax, softmax_in_place, Matrix};
use crate::vit::{AttentionTrace, FeatureMap, SplitSpec, Vit};

/// Spread of a mask over the patch grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kernel {
    /// 3×3 neighbourhood weighted by `exp(-(dx² + dy²) / 2)`.
    Gaussian,
    /// The centre token alone.
    Dirac,
}

impl fmt::Display for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Kernel::Gaussian => "gaussian",
            Kernel::Dirac => "dirac",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClsMode {
    /// Class token passes through every mask with weight 1.
    KeepCls,
    /// Class token is zeroed in every mask.
    ZeroCls,
}

impl fmt::Display for ClsMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClsMode::KeepCls => "keep_cls",
            ClsMode::ZeroCls => "zero_cls",
        })
    }
}

/// `N × T` non-negative token weights, `N = P²`, `T = P² + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    grid: usize,
    weights: Matrix,
    kernel: Kernel,
    cls_mode: ClsMode,
}

impl MaskSet {
    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn len(&self) -> usize {
        self.weights.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.rows() == 0
    }

    pub fn tokens(&self) -> usize {
        self.weights.cols()
    }

    pub fn kernel(&self) -> Kernel {
        self.kernel
    }

    pub fn cls_mode(&self) -> ClsMode {
        self.cls_mode
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn mask(&self, n: usize) -> &[f32] {
        self.weights.row(n)
    }
}

pub fn build_mask_set(cfg: &ModelConfig, kernel: Kernel, cls_mode: ClsMode) -> MaskSet {
    let p = cfg.grid();
    let n = p * p;
    let mut weights = Matrix::zeros(n, n + 1);
    let cls = match cls_mode {
        ClsMode::KeepCls => 1.0,
        ClsMode::ZeroCls => 0.0,
    };
    for idx in 0..n {
        let (cx, cy) = ((idx % p) as isize, (idx / p) as isize);
        let row = weights.row_mut(idx);
        row[0] = cls;
        match kernel {
            Kernel::Dirac => row[1 + idx] = 1.0,
            Kernel::Gaussian => {
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        let (x, y) = (cx + dx, cy + dy);
                        if x < 0 || y < 0 || x >= p as isize || y >= p as isize {
                            continue;
                        }
                        let d2 = (dx * dx + dy * dy) as f32;
                        row[1 + y as usize * p + x as usize] = (-d2 / 2.0).exp();
                    }
                }
            }
        }
    }
    MaskSet {
        grid: p,
        weights,
        kernel,
        cls_mode,
    }
}

/// Item `n`, token `t` of the result is `masks[n, t] · f[t, :]`; zero-weight
/// tokens become exactly-zero rows.
pub fn apply_masks(f: &FeatureMap, masks: &MaskSet) -> Result<Vec<FeatureMap>> {
    if f.rows() != masks.tokens() {
        return Err(Error::shape(
            "feature map tokens vs mask length",
            masks.tokens(),
            f.rows(),
        ));
    }
    Ok((0..masks.len())
        .map(|n| {
            let mut item = Matrix::zeros(f.rows(), f.cols());
            for (t, &w) in masks.mask(n).iter().enumerate() {
                if w != 0.0 {
                    for (o, &v) in item.row_mut(t).iter_mut().zip(f.row(t)) {
                        *o = w * v;
                    }
                }
            }
            item
        })
        .collect())
}

/// Per-mask softmax probabilities of one class.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    pub values: Vec<f32>,
    pub class_id: usize,
}

impl ScoreVector {
    /// Column `class_id` of the row-wise softmax of an `N × C` logit batch.
    pub fn from_logits(logits: &Matrix, class_id: usize) -> Result<Self> {
        if class_id >= logits.cols() {
            return Err(Error::ClassOutOfRange {
                class: class_id,
                num_classes: logits.cols(),
            });
        }
        let mut row = vec![0.0f32; logits.cols()];
        let values = (0..logits.rows())
            .map(|n| {
                row.copy_from_slice(logits.row(n));
                softmax_in_place(&mut row);
                row[class_id]
            })
            .collect();
        Ok(Self { values, class_id })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaliencySource {
    ReciproCam,
    AttentionRollout,
    Constant,
    Provided,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SaliencyMeta {
    pub method: SaliencySource,
    pub kernel: Option<Kernel>,
    pub split: Option<SplitSpec>,
    pub cls_mode: Option<ClsMode>,
}

impl SaliencyMeta {
    fn provided() -> Self {
        Self {
            method: SaliencySource::Provided,
            kernel: None,
            split: None,
            cls_mode: None,
        }
    }
}

/// `P × P` saliency grid with values in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    /// Target class, or `-1` for class-agnostic maps.
    pub class_id: i64,
    #[serde(rename = "P")]
    grid: usize,
    #[serde(flatten)]
    pub meta: SaliencyMeta,
    values: Vec<f32>,
}

impl SaliencyMap {
    pub fn from_values(grid: usize, values: Vec<f32>, class_id: i64) -> Result<Self> {
        let map = Self {
            class_id,
            grid,
            meta: SaliencyMeta::provided(),
            values,
        };
        map.validate()?;
        Ok(map)
    }

    pub fn constant(grid: usize, value: f32, class_id: i64) -> Result<Self> {
        let mut map = Self::from_values(grid, vec![value; grid * grid], class_id)?;
        map.meta.method = SaliencySource::Constant;
        Ok(map)
    }

    fn validate(&self) -> Result<()> {
        if self.values.len() != self.grid * self.grid {
            return Err(Error::shape(
                "saliency grid",
                self.grid * self.grid,
                self.values.len(),
            ));
        }
        if let Some(v) = self.values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Format(format!("saliency value {v} outside [0, 1]")));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.values[y * self.grid + x]
    }

    pub fn is_degenerate(&self) -> bool {
        self.values.iter().all(|&v| v == self.values[0])
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let map: Self = serde_json::from_str(text)?;
        map.validate()?;
        Ok(map)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Below this score range a map is degenerate and returned as all zeros.
pub const DEGENERATE_RANGE: f64 = 1e-12;

fn min_max_grid(values: &[f32], grid: usize) -> Result<Vec<f32>> {
    if values.len() != grid * grid {
        return Err(Error::shape("score vector", grid * grid, values.len()));
    }
    let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v as f64), hi.max(v as f64))
    });
    let range = hi - lo;
    if range.is_nan() || range < DEGENERATE_RANGE {
        return Ok(vec![0.0; values.len()]);
    }
    Ok(values
        .iter()
        .map(|&v| ((v as f64 - lo) / range) as f32)
        .collect())
}

/// Min-max normalized scores reshaped row-major to `grid × grid`.
pub fn saliency(scores: &ScoreVector, grid: usize) -> Result<SaliencyMap> {
    let values = min_max_grid(&scores.values, grid)?;
    Ok(SaliencyMap {
        class_id: scores.class_id as i64,
        grid,
        meta: SaliencyMeta::provided(),
        values,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassSelector {
    /// Top-1 class of the unmasked forward pass.
    Auto,
    Index(usize),
}

impl FromStr for ClassSelector {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(ClassSelector::Auto);
        }
        s.parse::<usize>()
            .map(ClassSelector::Index)
            .map_err(|_| format!("expected `auto` or a class index, got `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExplainOptions {
    pub kernel: Kernel,
    pub cls_mode: ClsMode,
    pub split: SplitSpec,
}

impl Default for ExplainOptions {
    fn default() -> Self {
        Self {
            kernel: Kernel::Gaussian,
            cls_mode: ClsMode::KeepCls,
            split: SplitSpec::default(),
        }
    }
}

/// Everything `explain` computes along the way.
#[derive(Debug, Clone)]
pub struct Explanation {
    pub saliency: SaliencyMap,
    pub scores: ScoreVector,
    /// Softmax probabilities of the unmasked image, when they were needed.
    pub full_probs: Option<Vec<f32>>,
}

/// Resolves a class selector, running the unmasked forward pass for `Auto`.
pub fn resolve_class(
    vit: &Vit,
    image: &ImageTensor,
    class: ClassSelector,
) -> Result<(usize, Option<Vec<f32>>)> {
    match class {
        ClassSelector::Index(c) if c >= vit.config().num_classes => Err(Error::ClassOutOfRange {
            class: c,
            num_classes: vit.config().num_classes,
        }),
        ClassSelector::Index(c) => Ok((c, None)),
        ClassSelector::Auto => {
            let probs = softmax(&vit.forward_full(image)?);
            Ok((argmax(&probs), Some(probs)))
        }
    }
}

pub fn explain_detailed(
    vit: &Vit,
    image: &ImageTensor,
    class: ClassSelector,
    opts: &ExplainOptions,
) -> Result<Explanation> {
    let (class_id, full_probs) = resolve_class(vit, image, class)?;
    let cfg = vit.config();
    let features = vit.encode_prefix(image, opts.split)?;
    let masks = build_mask_set(cfg, opts.kernel, opts.cls_mode);
    let batch = apply_masks(&features, &masks)?;
    let logits = vit.encode_suffix(&batch, opts.split)?;
    let scores = ScoreVector::from_logits(&logits, class_id)?;
    let mut saliency = saliency(&scores, cfg.grid())?;
    saliency.meta = SaliencyMeta {
        method: SaliencySource::ReciproCam,
        kernel: Some(opts.kernel),
        split: Some(opts.split),
        cls_mode: Some(opts.cls_mode),
    };
    Ok(Explanation {
        saliency,
        scores,
        full_probs,
    })
}

pub fn explain(
    vit: &Vit,
    image: &ImageTensor,
    class: ClassSelector,
    opts: &ExplainOptions,
) -> Result<SaliencyMap> {
    Ok(explain_detailed(vit, image, class, opts)?.saliency)
}

/// Head-averaged, identity-augmented, row-normalized attention multiplied
/// across blocks (`Â_L ⋯ Â_1`). The class-token row over patch tokens is
/// min-max normalized into a class-agnostic map.
pub fn attention_rollout(trace: &AttentionTrace, grid: usize) -> Result<SaliencyMap> {
    let t = grid * grid + 1;
    if trace.blocks.is_empty() || trace.blocks.iter().any(Vec::is_empty) {
        return Err(Error::MissingTrace);
    }
    for m in trace.blocks.iter().flatten() {
        if m.rows() != t || m.cols() != t {
            return Err(Error::shape(
                "attention matrix",
                format!("{t}×{t}"),
                format!("{}×{}", m.rows(), m.cols()),
            ));
        }
    }

    let mut rollout: Option<Vec<f64>> = None;
    for heads in &trace.blocks {
        let mut a = vec![0.0f64; t * t];
        for m in heads {
            for (acc, &v) in a.iter_mut().zip(m.data()) {
                *acc += v as f64;
            }
        }
        let h = heads.len() as f64;
        for i in 0..t {
            let row = &mut a[i * t..(i + 1) * t];
            for v in row.iter_mut() {
                *v /= h;
            }
            row[i] += 1.0;
            let sum: f64 = row.iter().sum();
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        rollout = Some(match rollout {
            None => a,
            Some(prev) => {
                let mut out = vec![0.0f64; t * t];
                for i in 0..t {
                    for k in 0..t {
                        let aik = a[i * t + k];
                        for j in 0..t {
                            out[i * t + j] += aik * prev[k * t + j];
                        }
                    }
                }
                out
            }
        });
    }
    let rollout = rollout.expect("non-empty trace");
    let cls_row: Vec<f32> = rollout[1..t].iter().map(|&v| v as f32).collect();
    let values = min_max_grid(&cls_row, grid)?;
    Ok(SaliencyMap {
        class_id: -1,
        grid,
        meta: SaliencyMeta {
            method: SaliencySource::AttentionRollout,
            kernel: None,
            split: None,
            cls_mode: None,
        },
        values,
    })
}

/// Runs a traced forward pass and returns its rollout map.
pub fn explain_rollout(vit: &Vit, image: &ImageTensor) -> Result<SaliencyMap> {
    let (_, trace) = vit.forward_with_trace(image)?;
    attention_rollout(&trace, vit.config().grid())
}
