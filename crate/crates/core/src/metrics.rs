//! Saliency quality metrics: Average Drop, Average Increase, Coherency,
//! Complexity and their ADCC harmonic mean.
//!
//! Component definitions:
//! - Drop: `max(0, y − y_masked) / y`, where `y_masked` is the class
//!   confidence on the input weighted by its own (upsampled) map.
//! - Increase: `1` when `y_masked > y`.
//! - Complexity: mean of `|s|` over the `P × P` grid.
//! - Coherency: Pearson correlation between the map of the original input and
//!   the map recomputed on the weighted input, clamped to `[0, 1]`; `0` when
//!   either map is constant.

use std::path::{Path, PathBuf};

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{upsample_bilinear, ImageTensor, Preprocess};
use crate::recipro_cam::{
    explain, explain_rollout, ClassSelector, ExplainOptions, SaliencyMap,
};
use crate::tensor::{argmax, softmax};
use crate::vit::Vit;

/// Weights every channel of a (normalized) input by the bilinearly upsampled
/// saliency map.
pub fn masked_image(image: &ImageTensor, s: &SaliencyMap) -> Result<ImageTensor> {
    let plane = upsample_bilinear(s.values(), s.grid(), image.height(), image.width());
    image.weighted(&plane)
}

pub fn average_drop(y_full: f64, y_masked: f64) -> Result<f64> {
    if y_full.is_nan() || y_full <= 0.0 {
        return Err(Error::UndefinedConfidence);
    }
    Ok((y_full - y_masked).max(0.0) / y_full)
}

pub fn average_increase(y_full: f64, y_masked: f64) -> f64 {
    if y_masked > y_full {
        1.0
    } else {
        0.0
    }
}

pub fn complexity(s: &SaliencyMap) -> f64 {
    let v = s.values();
    v.iter().map(|x| x.abs() as f64).sum::<f64>() / v.len() as f64
}

/// Clamped Pearson correlation of two maps over the same grid.
pub fn coherency(original: &SaliencyMap, masked: &SaliencyMap) -> f64 {
    let (a, b) = (original.values(), masked.values());
    assert_eq!(a.len(), b.len(), "coherency needs maps on the same grid");
    let n = a.len() as f64;
    let mean_a = a.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mean_b = b.iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut cov, mut var_a, mut var_b) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x as f64 - mean_a, y as f64 - mean_b);
        cov += dx * dy;
        var_a += dx * dx;
        var_b += dy * dy;
    }
    if var_a == 0.0 || var_b == 0.0 {
        return 0.0;
    }
    (cov / (var_a * var_b).sqrt()).clamp(0.0, 1.0)
}

/// Harmonic mean of coherency, `1 − complexity` and `1 − drop`; zero at the
/// poles.
pub fn adcc(drop: f64, coherency: f64, complexity: f64) -> f64 {
    if drop >= 1.0 || complexity >= 1.0 || coherency <= 0.0 {
        return 0.0;
    }
    3.0 / (1.0 / coherency + 1.0 / (1.0 - complexity) + 1.0 / (1.0 - drop))
}

/// How saliency maps are produced during evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SaliencyMethod {
    ReciproCam(ExplainOptions),
    AttentionRollout,
    /// The same value everywhere; `1.0` is the "Fake-CAM".
    Constant(f32),
}

impl SaliencyMethod {
    pub fn compute(&self, vit: &Vit, image: &ImageTensor, class_id: usize) -> Result<SaliencyMap> {
        match self {
            SaliencyMethod::ReciproCam(opts) => {
                explain(vit, image, ClassSelector::Index(class_id), opts)
            }
            SaliencyMethod::AttentionRollout => explain_rollout(vit, image),
            SaliencyMethod::Constant(v) => {
                SaliencyMap::constant(vit.config().grid(), *v, class_id as i64)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdccRecord {
    pub image: String,
    pub class: usize,
    pub drop: f64,
    pub increase: f64,
    pub coherency: f64,
    pub complexity: f64,
    pub adcc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdccAggregate {
    pub count: usize,
    pub drop: f64,
    pub increase: f64,
    pub coherency: f64,
    pub complexity: f64,
    /// Mean of per-image ADCC values.
    pub adcc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdccReport {
    pub records: Vec<AdccRecord>,
    pub aggregate: AdccAggregate,
}

#[derive(Serialize)]
struct CsvRow<'a> {
    image: &'a str,
    class: usize,
    drop: f64,
    inc: f64,
    coherency: f64,
    complexity: f64,
    adcc: f64,
}

impl AdccReport {
    pub fn from_records(records: Vec<AdccRecord>) -> Self {
        let n = records.len() as f64;
        let mean = |f: fn(&AdccRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
        let aggregate = AdccAggregate {
            count: records.len(),
            drop: mean(|r| r.drop),
            increase: mean(|r| r.increase),
            coherency: mean(|r| r.coherency),
            complexity: mean(|r| r.complexity),
            adcc: mean(|r| r.adcc),
        };
        Self { records, aggregate }
    }

    /// `drop inc coher compl adcc` of the aggregate.
    pub fn summary_line(&self) -> String {
        let a = &self.aggregate;
        format!(
            "drop {:.4} inc {:.4} coher {:.4} compl {:.4} adcc {:.4}",
            a.drop, a.increase, a.coherency, a.complexity, a.adcc
        )
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.records {
            w.serialize(CsvRow {
                image: &r.image,
                class: r.class,
                drop: r.drop,
                inc: r.increase,
                coherency: r.coherency,
                complexity: r.complexity,
                adcc: r.adcc,
            })?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::Format(format!("csv buffer: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }
}

pub fn evaluate_image(
    vit: &Vit,
    name: &str,
    image: &ImageTensor,
    method: &SaliencyMethod,
) -> Result<AdccRecord> {
    let probs = softmax(&vit.forward_full(image)?);
    let class = argmax(&probs);
    let y_full = probs[class] as f64;

    let s = method.compute(vit, image, class)?;
    let weighted = masked_image(image, &s)?;
    let y_masked = softmax(&vit.forward_full(&weighted)?)[class] as f64;
    let s_masked = method.compute(vit, &weighted, class)?;

    let drop = average_drop(y_full, y_masked)?;
    let coherency = coherency(&s, &s_masked);
    let complexity = complexity(&s);
    Ok(AdccRecord {
        image: name.to_string(),
        class,
        drop,
        increase: average_increase(y_full, y_masked),
        coherency,
        complexity,
        adcc: adcc(drop, coherency, complexity),
    })
}

/// Evaluates already-loaded images on the current rayon pool; records keep
/// input order.
pub fn evaluate_images(
    vit: &Vit,
    images: &[(String, ImageTensor)],
    method: &SaliencyMethod,
) -> Result<AdccReport> {
    let records = images
        .par_iter()
        .map(|(name, img)| evaluate_image(vit, name, img, method))
        .collect::<Result<Vec<_>>>()?;
    Ok(AdccReport::from_records(records))
}

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Image files in `dir`, sorted by file name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Loads up to `limit` readable images from `dir` (unreadable ones are
/// skipped with a warning) and evaluates them.
pub fn evaluate_dataset(
    vit: &Vit,
    dir: &Path,
    method: &SaliencyMethod,
    limit: Option<usize>,
    preprocess: &Preprocess,
) -> Result<AdccReport> {
    let mut images = Vec::new();
    for path in list_images(dir)? {
        if limit.is_some_and(|l| images.len() >= l) {
            break;
        }
        match preprocess.load(&path) {
            Ok(img) => {
                let name = path
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_default();
                images.push((name, img));
            }
            Err(e) => warn!("skipping {}: {e}", path.display()),
        }
    }
    if images.is_empty() {
        return Err(Error::EmptyDataset(dir.to_path_buf()));
    }
    evaluate_images(vit, &images, method)
}
