//! Wall-clock timing of the explanation pipeline per mask kernel.

use std::time::{Duration, Instant};

use serde::Serialize;

use crate::error::Result;
use crate::imaging::ImageTensor;
use crate::recipro_cam::{
    apply_masks, build_mask_set, resolve_class, saliency, ClassSelector, ExplainOptions, Kernel,
    ScoreVector,
};
use crate::vit::Vit;

#[derive(Debug, Clone, Serialize)]
pub struct VariantTiming {
    pub kernel: Kernel,
    pub mean_ms: f64,
    pub fps: f64,
    /// Prefix forward pass up to the split point.
    pub prefix_ms: f64,
    /// Mask construction, masked batch scoring and normalization.
    pub suffix_ms: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub iters: usize,
    pub warmup: usize,
    pub dirac: VariantTiming,
    pub gaussian: VariantTiming,
}

impl BenchReport {
    /// Gaussian mean time over dirac mean time.
    pub fn ratio(&self) -> f64 {
        self.gaussian.mean_ms / self.dirac.mean_ms
    }
}

fn run_once(
    vit: &Vit,
    image: &ImageTensor,
    class_id: usize,
    opts: &ExplainOptions,
) -> Result<(Duration, Duration)> {
    let start = Instant::now();
    let features = vit.encode_prefix(image, opts.split)?;
    let prefix = start.elapsed();
    let masks = build_mask_set(vit.config(), opts.kernel, opts.cls_mode);
    let batch = apply_masks(&features, &masks)?;
    let logits = vit.encode_suffix(&batch, opts.split)?;
    let scores = ScoreVector::from_logits(&logits, class_id)?;
    std::hint::black_box(saliency(&scores, vit.config().grid())?);
    Ok((prefix, start.elapsed() - prefix))
}

/// Times `iters` explanations per kernel after `warmup` untimed rounds.
///
/// The two kernels run interleaved, alternating which goes first, so drift in
/// machine load affects both alike. The target class is resolved once up
/// front and excluded from the timings.
pub fn bench(
    vit: &Vit,
    image: &ImageTensor,
    class: ClassSelector,
    base: &ExplainOptions,
    iters: usize,
    warmup: usize,
) -> Result<BenchReport> {
    let (class_id, _) = resolve_class(vit, image, class)?;
    let dirac = ExplainOptions {
        kernel: Kernel::Dirac,
        ..*base
    };
    let gaussian = ExplainOptions {
        kernel: Kernel::Gaussian,
        ..*base
    };
    for _ in 0..warmup {
        run_once(vit, image, class_id, &dirac)?;
        run_once(vit, image, class_id, &gaussian)?;
    }
    let mut totals = [(Duration::ZERO, Duration::ZERO); 2];
    for i in 0..iters {
        let order = if i % 2 == 0 { [0, 1] } else { [1, 0] };
        for v in order {
            let opts = if v == 0 { &dirac } else { &gaussian };
            let (p, s) = run_once(vit, image, class_id, opts)?;
            totals[v].0 += p;
            totals[v].1 += s;
        }
    }
    let timing = |kernel, (p, s): (Duration, Duration)| {
        let n = iters.max(1) as f64;
        let prefix_ms = p.as_secs_f64() * 1e3 / n;
        let suffix_ms = s.as_secs_f64() * 1e3 / n;
        let mean_ms = prefix_ms + suffix_ms;
        VariantTiming {
            kernel,
            mean_ms,
            fps: 1e3 / mean_ms,
            prefix_ms,
            suffix_ms,
        }
    };
    Ok(BenchReport {
        iters,
        warmup,
        dirac: timing(Kernel::Dirac, totals[0]),
        gaussian: timing(Kernel::Gaussian, totals[1]),
    })
}
