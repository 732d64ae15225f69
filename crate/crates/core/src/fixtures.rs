//! Golden reference bundles for cross-checking the engine against another
//! framework: an input tensor, its logits and both split-point activations.
//!
//! Bundles are JSON documents; converters in other languages write them and
//! [`check_fixture`] compares them against this engine.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, IN_CHANNELS};
use crate::error::{Error, Result};
use crate::imaging::ImageTensor;
use crate::tensor::{argmax, Matrix};
use crate::vit::{SplitMode, SplitSpec, Vit};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorDoc {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl TensorDoc {
    fn from_matrix(m: &Matrix) -> Self {
        Self {
            shape: vec![m.rows(), m.cols()],
            data: m.data().to_vec(),
        }
    }

    fn to_matrix(&self, what: &str) -> Result<Matrix> {
        match self.shape.as_slice() {
            [r, c] => Matrix::new(*r, *c, self.data.clone()),
            other => Err(Error::shape(what, "[rows, cols]", format!("{other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureBundle {
    pub config: ModelConfig,
    /// Block whose LN1 output / input the prefix activations were taken at.
    pub split_block: isize,
    /// Preprocessed input, `[3, H, W]`.
    pub image: TensorDoc,
    pub logits: Vec<f32>,
    pub prefix_ln: TensorDoc,
    pub prefix_block: TensorDoc,
}

impl FixtureBundle {
    pub fn image_tensor(&self) -> Result<ImageTensor> {
        match self.image.shape.as_slice() {
            [c, h, w] if *c == IN_CHANNELS => ImageTensor::new(*h, *w, self.image.data.clone(), true),
            other => Err(Error::shape("fixture image", "[3, H, W]", format!("{other:?}"))),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string(self)?).map_err(|e| Error::io(path, e))
    }
}

/// Produces a bundle from this engine's own forward pass.
pub fn make_fixture(vit: &Vit, image: &ImageTensor, split_block: isize) -> Result<FixtureBundle> {
    let ln = vit.encode_prefix(image, SplitSpec::new(SplitMode::Ln, split_block))?;
    let block = vit.encode_prefix(image, SplitSpec::new(SplitMode::Block, split_block))?;
    Ok(FixtureBundle {
        config: *vit.config(),
        split_block,
        image: TensorDoc {
            shape: vec![IN_CHANNELS, image.height(), image.width()],
            data: image.data().to_vec(),
        },
        logits: vit.forward_full(image)?,
        prefix_ln: TensorDoc::from_matrix(&ln),
        prefix_block: TensorDoc::from_matrix(&block),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureCheck {
    pub top1_expected: usize,
    pub top1_actual: usize,
    pub logits_max_abs: f32,
    pub prefix_ln_max_abs: f32,
    pub prefix_block_max_abs: f32,
}

impl FixtureCheck {
    pub fn passes(&self, tolerance: f32) -> bool {
        self.top1_expected == self.top1_actual
            && self.logits_max_abs <= tolerance
            && self.prefix_ln_max_abs <= tolerance
            && self.prefix_block_max_abs <= tolerance
    }
}

fn max_abs_diff(a: &[f32], b: &[f32], what: &str) -> Result<f32> {
    if a.len() != b.len() {
        return Err(Error::shape(what, b.len(), a.len()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max))
}

pub fn check_fixture(vit: &Vit, bundle: &FixtureBundle) -> Result<FixtureCheck> {
    if &bundle.config != vit.config() {
        return Err(Error::InvalidConfig(format!(
            "fixture was produced for {:?}, model is {:?}",
            bundle.config,
            vit.config()
        )));
    }
    let image = bundle.image_tensor()?;
    let logits = vit.forward_full(&image)?;
    let ln = vit.encode_prefix(&image, SplitSpec::new(SplitMode::Ln, bundle.split_block))?;
    let block = vit.encode_prefix(&image, SplitSpec::new(SplitMode::Block, bundle.split_block))?;
    let expected_ln = bundle.prefix_ln.to_matrix("fixture prefix_ln")?;
    let expected_block = bundle.prefix_block.to_matrix("fixture prefix_block")?;
    Ok(FixtureCheck {
        top1_expected: argmax(&bundle.logits),
        top1_actual: argmax(&logits),
        logits_max_abs: max_abs_diff(&logits, &bundle.logits, "fixture logits")?,
        prefix_ln_max_abs: max_abs_diff(ln.data(), expected_ln.data(), "fixture prefix_ln")?,
        prefix_block_max_abs: max_abs_diff(
            block.data(),
            expected_block.data(),
            "fixture prefix_block",
        )?,
    })
}
