//! Forward-only ViT encoder with a configurable split point.
//!
//! The network is divided into a prefix (image → feature map at the split)
//! and a suffix (feature map → logits). With [`SplitMode::Ln`] the feature map
//! is the first LayerNorm output of the split block and the suffix resumes
//! with that block's attention; the block's first residual then adds the same
//! feature map, so masked tokens stay masked on the skip path too. With
//! [`SplitMode::Block`] the feature map is the raw input of the split block.
//!
//! Only the class-token row reaches the classifier, so the last block is
//! evaluated for that row alone. Every kernel is row-independent, which keeps
//! this bit-identical to evaluating all rows.

use std::fmt;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, IN_CHANNELS};
use crate::error::{Error, Result};
use crate::imaging::ImageTensor;
use crate::model_io::{self, Weights};
use crate::tensor::{gelu, gemm, layer_norm_row, softmax_in_place, Matrix, LAYER_NORM_EPS};

/// Per-token embeddings (`T × D`) at the split point.
pub type FeatureMap = Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    /// First LayerNorm output of the split block.
    Ln,
    /// Raw input of the split block.
    Block,
}

impl fmt::Display for SplitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitMode::Ln => "ln",
            SplitMode::Block => "block",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub mode: SplitMode,
    /// Negative values count from the end; `-1` is the last block.
    pub block_index: isize,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            mode: SplitMode::Ln,
            block_index: -1,
        }
    }
}

impl SplitSpec {
    pub fn new(mode: SplitMode, block_index: isize) -> Self {
        Self { mode, block_index }
    }

    pub fn resolve(&self, depth: usize) -> Result<usize> {
        let idx = if self.block_index < 0 {
            depth as isize + self.block_index
        } else {
            self.block_index
        };
        if idx < 0 || idx >= depth as isize {
            return Err(Error::BlockOutOfRange {
                index: self.block_index,
                depth,
            });
        }
        Ok(idx as usize)
    }
}

impl fmt::Display for SplitSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}[{}]", self.mode, self.block_index)
    }
}

/// Post-softmax attention probabilities, `[block][head]` each `T × T`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    pub blocks: Vec<Vec<Matrix>>,
}

struct Linear {
    /// `in × out`, i.e. the transpose of the stored `[out, in]` tensor.
    weight_t: Matrix,
    bias: Vec<f32>,
}

impl Linear {
    fn from_weights(weights: &Weights, prefix: &str) -> Result<Self> {
        let w = weights.get(&format!("{prefix}.weight"))?;
        let b = weights.get(&format!("{prefix}.bias"))?;
        let out_dim = w.shape[0];
        let in_dim = w.data.len() / out_dim;
        let weight = Matrix::new(out_dim, in_dim, w.data.clone())?;
        Ok(Self {
            weight_t: weight.transpose(),
            bias: b.data.clone(),
        })
    }

    fn forward(&self, x: &Matrix) -> Matrix {
        let (m, k, n) = (x.rows(), x.cols(), self.weight_t.cols());
        let mut out = Matrix::zeros(m, n);
        gemm(x.data(), self.weight_t.data(), out.data_mut(), m, k, n);
        for i in 0..m {
            for (o, b) in out.row_mut(i).iter_mut().zip(&self.bias) {
                *o += *b;
            }
        }
        out
    }
}

struct Norm {
    gamma: Vec<f32>,
    beta: Vec<f32>,
}

impl Norm {
    fn from_weights(weights: &Weights, prefix: &str) -> Result<Self> {
        Ok(Self {
            gamma: weights.get(&format!("{prefix}.weight"))?.data.clone(),
            beta: weights.get(&format!("{prefix}.bias"))?.data.clone(),
        })
    }

    fn forward(&self, x: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(x.rows(), x.cols());
        for i in 0..x.rows() {
            layer_norm_row(x.row(i), &self.gamma, &self.beta, LAYER_NORM_EPS, out.row_mut(i));
        }
        out
    }
}

struct Block {
    ln1: Norm,
    qkv: Linear,
    proj: Linear,
    ln2: Norm,
    fc1: Linear,
    fc2: Linear,
}

/// A loaded model. Immutable and shareable across threads.
pub struct Vit {
    cfg: ModelConfig,
    /// `3·ps² × D` patch projection.
    patch_weight_t: Matrix,
    patch_bias: Vec<f32>,
    cls_token: Vec<f32>,
    pos_embed: Matrix,
    blocks: Vec<Block>,
    norm: Norm,
    head: Linear,
}

impl fmt::Debug for Vit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Vit").field("cfg", &self.cfg).finish_non_exhaustive()
    }
}

impl Vit {
    pub fn new(cfg: ModelConfig, weights: &Weights) -> Result<Self> {
        weights.validate(&cfg)?;
        let d = cfg.embed_dim;
        let patch = weights.get("patch_embed.weight")?;
        let patch_weight = Matrix::new(d, patch.data.len() / d, patch.data.clone())?;
        let blocks = (0..cfg.depth)
            .map(|i| {
                let p = |s: &str| format!("blocks.{i}.{s}");
                Ok(Block {
                    ln1: Norm::from_weights(weights, &p("ln1"))?,
                    qkv: Linear::from_weights(weights, &p("attn.qkv"))?,
                    proj: Linear::from_weights(weights, &p("attn.proj"))?,
                    ln2: Norm::from_weights(weights, &p("ln2"))?,
                    fc1: Linear::from_weights(weights, &p("mlp.fc1"))?,
                    fc2: Linear::from_weights(weights, &p("mlp.fc2"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg,
            patch_weight_t: patch_weight.transpose(),
            patch_bias: weights.get("patch_embed.bias")?.data.clone(),
            cls_token: weights.get("cls_token")?.data.clone(),
            pos_embed: Matrix::new(cfg.tokens(), d, weights.get("pos_embed")?.data.clone())?,
            blocks,
            norm: Norm::from_weights(weights, "norm")?,
            head: Linear::from_weights(weights, "head")?,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (cfg, weights) = model_io::load_model(path)?;
        Self::new(cfg, &weights)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn check_image(&self, image: &ImageTensor) -> Result<()> {
        let s = self.cfg.image_size;
        if image.height() != s || image.width() != s {
            return Err(Error::shape(
                "input image",
                format!("{IN_CHANNELS}×{s}×{s}"),
                format!("{IN_CHANNELS}×{}×{}", image.height(), image.width()),
            ));
        }
        Ok(())
    }

    /// Class token plus one projected row per patch (row-major patch order),
    /// each with its positional embedding added.
    pub fn patch_embed(&self, image: &ImageTensor) -> Result<FeatureMap> {
        self.check_image(image)?;
        let ps = self.cfg.patch_size;
        let grid = self.cfg.grid();
        let d = self.cfg.embed_dim;
        let patch_len = IN_CHANNELS * ps * ps;

        let mut patches = Matrix::zeros(grid * grid, patch_len);
        for py in 0..grid {
            for px in 0..grid {
                let row = patches.row_mut(py * grid + px);
                for c in 0..IN_CHANNELS {
                    for i in 0..ps {
                        let src = image.row(c, py * ps + i);
                        let dst = &mut row[c * ps * ps + i * ps..c * ps * ps + (i + 1) * ps];
                        dst.copy_from_slice(&src[px * ps..(px + 1) * ps]);
                    }
                }
            }
        }
        let mut projected = Matrix::zeros(grid * grid, d);
        gemm(
            patches.data(),
            self.patch_weight_t.data(),
            projected.data_mut(),
            grid * grid,
            patch_len,
            d,
        );

        let mut out = Matrix::zeros(self.cfg.tokens(), d);
        for (o, (&c, &p)) in out
            .row_mut(0)
            .iter_mut()
            .zip(self.cls_token.iter().zip(self.pos_embed.row(0)))
        {
            *o = c + p;
        }
        for k in 0..grid * grid {
            let pos = self.pos_embed.row(k + 1);
            let src = projected.row(k);
            for (j, o) in out.row_mut(k + 1).iter_mut().enumerate() {
                *o = (src[j] + self.patch_bias[j]) + pos[j];
            }
        }
        Ok(out)
    }

    /// Multi-head self-attention over `input`, producing rows for the first
    /// `query_rows` tokens only.
    fn attention(
        &self,
        block: &Block,
        input: &Matrix,
        query_rows: usize,
        mut trace: Option<&mut Vec<Matrix>>,
    ) -> Matrix {
        let t = input.rows();
        let d = self.cfg.embed_dim;
        let dh = self.cfg.head_dim();
        let scale = 1.0 / (dh as f32).sqrt();
        let qkv = block.qkv.forward(input);

        let mut context = Matrix::zeros(query_rows, d);
        let mut probs = vec![0.0f32; t];
        for h in 0..self.cfg.num_heads {
            let q_off = h * dh;
            let k_off = d + h * dh;
            let v_off = 2 * d + h * dh;
            let mut head_probs = trace.as_ref().map(|_| Matrix::zeros(query_rows, t));
            for r in 0..query_rows {
                let q = &qkv.row(r)[q_off..q_off + dh];
                for (s, p) in probs.iter_mut().enumerate() {
                    let k = &qkv.row(s)[k_off..k_off + dh];
                    let mut dot = 0.0f32;
                    for (a, b) in q.iter().zip(k) {
                        dot += a * b;
                    }
                    *p = dot * scale;
                }
                softmax_in_place(&mut probs);
                let out = &mut context.row_mut(r)[q_off..q_off + dh];
                for (s, &p) in probs.iter().enumerate() {
                    let v = &qkv.row(s)[v_off..v_off + dh];
                    for (o, &x) in out.iter_mut().zip(v) {
                        *o += p * x;
                    }
                }
                if let Some(m) = head_probs.as_mut() {
                    m.row_mut(r).copy_from_slice(&probs);
                }
            }
            if let (Some(tr), Some(m)) = (trace.as_mut(), head_probs) {
                tr.push(m);
            }
        }
        block.proj.forward(&context)
    }

    fn mlp(&self, block: &Block, x: &Matrix) -> Matrix {
        let mut hidden = block.fc1.forward(&block.ln2.forward(x));
        for v in hidden.data_mut() {
            *v = gelu(*v);
        }
        block.fc2.forward(&hidden)
    }

    /// `x′ = stream + MHA(attn_input)`, `out = x′ + MLP(LN2(x′))`, restricted
    /// to the first `rows` tokens.
    fn block_tail(
        &self,
        block: &Block,
        stream: &Matrix,
        attn_input: &Matrix,
        rows: usize,
        trace: Option<&mut Vec<Matrix>>,
    ) -> Matrix {
        let attn = self.attention(block, attn_input, rows, trace);
        let mut x = if rows == stream.rows() {
            stream.clone()
        } else {
            stream.slice_rows(0, rows)
        };
        x.add_assign(&attn).expect("attention output matches stream rows");
        let mlp = self.mlp(block, &x);
        x.add_assign(&mlp).expect("mlp output matches stream rows");
        x
    }

    fn run_block(
        &self,
        index: usize,
        x: &Matrix,
        rows: usize,
        trace: Option<&mut Vec<Matrix>>,
    ) -> Matrix {
        let block = &self.blocks[index];
        let normed = block.ln1.forward(x);
        self.block_tail(block, x, &normed, rows, trace)
    }

    /// One full pre-LN encoder block over all tokens.
    pub fn encoder_block(&self, x: &FeatureMap, index: usize) -> Result<FeatureMap> {
        self.check_features(x)?;
        if index >= self.cfg.depth {
            return Err(Error::BlockOutOfRange {
                index: index as isize,
                depth: self.cfg.depth,
            });
        }
        Ok(self.run_block(index, x, x.rows(), None))
    }

    /// Blocks `from..depth` followed by the final norm and the head.
    fn finish(&self, mut x: Matrix, from: usize) -> Vec<f32> {
        let last = self.cfg.depth - 1;
        for i in from..self.cfg.depth {
            let rows = if i == last { 1 } else { x.rows() };
            x = self.run_block(i, &x, rows, None);
        }
        self.classify(x.row(0))
    }

    fn classify(&self, cls_row: &[f32]) -> Vec<f32> {
        let mut normed = Matrix::zeros(1, cls_row.len());
        layer_norm_row(
            cls_row,
            &self.norm.gamma,
            &self.norm.beta,
            LAYER_NORM_EPS,
            normed.row_mut(0),
        );
        self.head.forward(&normed).into_data()
    }

    pub fn forward_full(&self, image: &ImageTensor) -> Result<Vec<f32>> {
        let x = self.patch_embed(image)?;
        Ok(self.finish(x, 0))
    }

    /// Full forward pass that also records every block's attention.
    pub fn forward_with_trace(&self, image: &ImageTensor) -> Result<(Vec<f32>, AttentionTrace)> {
        let mut x = self.patch_embed(image)?;
        let mut blocks = Vec::with_capacity(self.cfg.depth);
        for i in 0..self.cfg.depth {
            let mut heads = Vec::with_capacity(self.cfg.num_heads);
            x = self.run_block(i, &x, x.rows(), Some(&mut heads));
            blocks.push(heads);
        }
        Ok((self.classify(x.row(0)), AttentionTrace { blocks }))
    }

    pub fn encode_prefix(&self, image: &ImageTensor, split: SplitSpec) -> Result<FeatureMap> {
        let index = split.resolve(self.cfg.depth)?;
        let mut x = self.patch_embed(image)?;
        for i in 0..index {
            x = self.run_block(i, &x, x.rows(), None);
        }
        Ok(match split.mode {
            SplitMode::Ln => self.blocks[index].ln1.forward(&x),
            SplitMode::Block => x,
        })
    }

    fn check_features(&self, f: &FeatureMap) -> Result<()> {
        let (t, d) = (self.cfg.tokens(), self.cfg.embed_dim);
        if f.rows() != t || f.cols() != d {
            return Err(Error::shape(
                "feature map",
                format!("{t}×{d}"),
                format!("{}×{}", f.rows(), f.cols()),
            ));
        }
        Ok(())
    }

    fn suffix_single(&self, f: &FeatureMap, index: usize, mode: SplitMode) -> Vec<f32> {
        match mode {
            SplitMode::Block => self.finish(f.clone(), index),
            SplitMode::Ln => {
                let block = &self.blocks[index];
                let rows = if index == self.cfg.depth - 1 { 1 } else { f.rows() };
                let x = self.block_tail(block, f, f, rows, None);
                self.finish(x, index + 1)
            }
        }
    }

    /// Logits (`N × C`) for a batch of feature maps at the split point.
    ///
    /// Items are scored independently on the current rayon pool; the output
    /// keeps input order and does not depend on the worker count.
    pub fn encode_suffix(&self, batch: &[FeatureMap], split: SplitSpec) -> Result<Matrix> {
        let index = split.resolve(self.cfg.depth)?;
        for f in batch {
            self.check_features(f)?;
        }
        let logits: Vec<Vec<f32>> = batch
            .par_iter()
            .map(|f| self.suffix_single(f, index, split.mode))
            .collect();
        let c = self.cfg.num_classes;
        Matrix::new(batch.len(), c, logits.into_iter().flatten().collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_io::{synth_toy_model, Tensor};

    fn toy() -> (ModelConfig, Weights) {
        let cfg = ModelConfig::toy(2, 4, 8, 2, 2, 10);
        let w = synth_toy_model(11, &cfg).unwrap();
        (cfg, w)
    }

    fn ramp_image(cfg: &ModelConfig) -> ImageTensor {
        let s = cfg.image_size;
        let data = (0..3 * s * s).map(|i| ((i * 37 % 101) as f32 / 50.0) - 1.0).collect();
        ImageTensor::new(s, s, data, true).unwrap()
    }

    fn bits(v: &[f32]) -> Vec<u32> {
        v.iter().map(|x| x.to_bits()).collect()
    }

    #[test]
    fn split_resolution() {
        assert_eq!(SplitSpec::default().resolve(12).unwrap(), 11);
        assert_eq!(SplitSpec::new(SplitMode::Block, -2).resolve(12).unwrap(), 10);
        assert_eq!(SplitSpec::new(SplitMode::Block, 0).resolve(12).unwrap(), 0);
        assert!(SplitSpec::new(SplitMode::Ln, 12).resolve(12).is_err());
        assert!(SplitSpec::new(SplitMode::Ln, -13).resolve(12).is_err());
    }

    #[test]
    fn patch_embed_shapes() {
        let (cfg, w) = toy();
        let vit = Vit::new(cfg, &w).unwrap();
        let f = vit.patch_embed(&ramp_image(&cfg)).unwrap();
        assert_eq!((f.rows(), f.cols()), (5, 8));

        let base = ModelConfig::deit_base();
        let vit = Vit::new(base, &Weights::zeros(&base)).unwrap();
        let img = ImageTensor::zeros(224, 224);
        let f = vit.patch_embed(&img).unwrap();
        assert_eq!((f.rows(), f.cols()), (197, 768));
    }

    #[test]
    fn patch_embed_zero_image_gives_bias() {
        let (cfg, mut w) = toy();
        w.insert("pos_embed", Tensor::zeros(vec![1, cfg.tokens(), cfg.embed_dim]));
        let bias = w.get("patch_embed.bias").unwrap().data.clone();
        let vit = Vit::new(cfg, &w).unwrap();
        let f = vit.patch_embed(&ImageTensor::zeros(8, 8)).unwrap();
        for k in 1..cfg.tokens() {
            assert_eq!(f.row(k), bias.as_slice());
        }
    }

    #[test]
    fn patch_embed_rejects_wrong_size() {
        let (cfg, w) = toy();
        let vit = Vit::new(cfg, &w).unwrap();
        assert!(vit.patch_embed(&ImageTensor::zeros(9, 8)).is_err());
    }

    #[test]
    fn zero_weights_block_is_identity() {
        let cfg = ModelConfig::toy(2, 4, 8, 2, 2, 10);
        let vit = Vit::new(cfg, &Weights::zeros(&cfg)).unwrap();
        let x = Matrix::new(5, 8, (0..40).map(|v| v as f32 * 0.1).collect()).unwrap();
        assert_eq!(vit.encoder_block(&x, 0).unwrap(), x);
    }

    #[test]
    fn zero_weight_model_logits_are_head_bias() {
        let cfg = ModelConfig::toy(2, 4, 8, 2, 2, 10);
        let mut w = Weights::zeros(&cfg);
        let bias: Vec<f32> = (0..10).map(|v| v as f32).collect();
        w.get_mut("head.bias").unwrap().data = bias.clone();
        let vit = Vit::new(cfg, &w).unwrap();
        assert_eq!(vit.forward_full(&ramp_image(&cfg)).unwrap(), bias);
        assert_eq!(vit.forward_full(&ImageTensor::zeros(8, 8)).unwrap(), bias);
    }

    #[test]
    fn cls_only_last_block_matches_full_row() {
        let (cfg, w) = toy();
        let vit = Vit::new(cfg, &w).unwrap();
        let x = vit.patch_embed(&ramp_image(&cfg)).unwrap();
        let full = vit.run_block(1, &x, x.rows(), None);
        let cls = vit.run_block(1, &x, 1, None);
        assert_eq!(bits(full.row(0)), bits(cls.row(0)));
    }

    #[test]
    fn trace_logits_match_and_rows_are_stochastic() {
        let (cfg, w) = toy();
        let vit = Vit::new(cfg, &w).unwrap();
        let img = ramp_image(&cfg);
        let (logits, trace) = vit.forward_with_trace(&img).unwrap();
        assert_eq!(bits(&logits), bits(&vit.forward_full(&img).unwrap()));
        assert_eq!(trace.blocks.len(), 2);
        for heads in &trace.blocks {
            assert_eq!(heads.len(), 2);
            for m in heads {
                for r in 0..m.rows() {
                    let s: f32 = m.row(r).iter().sum();
                    assert!((s - 1.0).abs() <= 1e-5);
                }
            }
        }
    }

    #[test]
    fn ln_prefix_with_zero_gamma_is_beta() {
        let (cfg, mut w) = toy();
        w.get_mut("blocks.1.ln1.weight").unwrap().data = vec![0.0; 8];
        let beta = w.get("blocks.1.ln1.bias").unwrap().data.clone();
        let vit = Vit::new(cfg, &w).unwrap();
        let f = vit.encode_prefix(&ramp_image(&cfg), SplitSpec::default()).unwrap();
        for t in 0..f.rows() {
            assert_eq!(f.row(t), beta.as_slice());
        }
    }

    #[test]
    fn block_prefix_at_zero_is_patch_embed() {
        let (cfg, w) = toy();
        let vit = Vit::new(cfg, &w).unwrap();
        let img = ramp_image(&cfg);
        let f = vit.encode_prefix(&img, SplitSpec::new(SplitMode::Block, 0)).unwrap();
        assert_eq!(f, vit.patch_embed(&img).unwrap());
    }

    #[test]
    fn block_split_composes_exactly() {
        let (cfg, w) = toy();
        let vit = Vit::new(cfg, &w).unwrap();
        let img = ramp_image(&cfg);
        let full = vit.forward_full(&img).unwrap();
        for idx in [0, 1, -1, -2] {
            let split = SplitSpec::new(SplitMode::Block, idx);
            let f = vit.encode_prefix(&img, split).unwrap();
            let out = vit.encode_suffix(&[f], split).unwrap();
            assert_eq!(bits(out.row(0)), bits(&full));
        }
    }

    #[test]
    fn suffix_batch_matches_single_calls() {
        let (cfg, w) = toy();
        let vit = Vit::new(cfg, &w).unwrap();
        let f = vit.encode_prefix(&ramp_image(&cfg), SplitSpec::default()).unwrap();
        let batch: Vec<Matrix> = (0..6)
            .map(|n| {
                let mut m = f.clone();
                for v in m.row_mut(n % 5) {
                    *v = 0.0;
                }
                m
            })
            .collect();
        let together = vit.encode_suffix(&batch, SplitSpec::default()).unwrap();
        for (n, item) in batch.iter().enumerate() {
            let alone = vit
                .encode_suffix(std::slice::from_ref(item), SplitSpec::default())
                .unwrap();
            assert_eq!(bits(together.row(n)), bits(alone.row(0)));
        }
    }

    #[test]
    fn suffix_rejects_bad_feature_shape() {
        let (cfg, w) = toy();
        let vit = Vit::new(cfg, &w).unwrap();
        let bad = Matrix::zeros(4, 8);
        assert!(vit.encode_suffix(&[bad], SplitSpec::default()).is_err());
    }
}
