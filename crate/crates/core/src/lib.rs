//! Gradient-free class saliency for Vision Transformers.
//!
//! A ViT is split into a prefix and a suffix. The prefix feature map is
//! multiplied by one spatial token mask per patch, the masked batch is scored
//! by the suffix, and the target-class probabilities, min-max normalized over
//! the patch grid, form the saliency map. [`metrics`] scores such maps with
//! Average Drop, Average Increase, Coherency, Complexity and ADCC.

pub mod bench;
pub mod cli;
pub mod config;
pub mod error;
pub mod fixtures;
pub mod imaging;
pub mod metrics;
pub mod model_io;
pub mod recipro_cam;
pub mod rng;
pub mod tensor;
pub mod vit;

pub use config::ModelConfig;
pub use error::{Error, Result};
pub use imaging::{preprocess, ImageTensor, Preprocess};
pub use model_io::{load_model, save_model, synth_toy_model, Weights};
pub use recipro_cam::{
    apply_masks, attention_rollout, build_mask_set, explain, saliency, ClassSelector, ClsMode,
    ExplainOptions, Kernel, MaskSet, SaliencyMap, ScoreVector,
};
pub use tensor::Matrix;
pub use vit::{AttentionTrace, FeatureMap, SplitMode, SplitSpec, Vit};
