//! Decoder-free segmentation head.
//!
//! The mask is a dot product: every post-processed image token is scored
//! against the post-processed segmentation embedding,
//! `logit[i] = <F_img'[i], F_seg'> / sqrt(d)`. What varies between pipeline
//! modes is how `F_img'` is built, and with it the mask resolution:
//!
//! * `CompressedBaseline` - LLM image tokens as-is (compressed grid, `N1`).
//! * `HrOnly` - the self-replicated uncompressed branch `F_v1hq` (`N0`).
//! * `HrRfr` - residual refilling: `F_v1hq + upsample(F_img - F_v1)`. The
//!   residual carries what the LLM added on top of its input, re-painted
//!   onto the uncompressed grid (`N0`).
//! * `PusOnly` - pixel-unshuffle expansion of `F_img` alone (`N0`).
//! * `FullRfa` - the residual features amplifier: residuals are formed
//!   *after* expanding both `F_img` and `F_v1` through MLP-with-pixel-
//!   unshuffle maps, then fused with the expanded `F_v1hq` (`alpha * N0`).
//!
//! Training optimizes `L = L_text + L_bce + L_dice`, unweighted.

use std::sync::Arc;

use thiserror::Error;

use crate::autograd::{Graph, ParamId, ParamSet, Tensor, TensorError};
use crate::model::{
    build_attention_mask, MaskVariant, ModelConfig, ModelError, TokenLayout, ToyModel,
};
use crate::shuffle::{
    pixel_shuffle_compress, pixel_unshuffle_expand, scanning_compress, self_replicate_compress,
    Activation, GridFeatures, Mlp, ShuffleError, ShuffleSpec, Upsample,
};

/// Soft-DICE smoothing constant.
pub const DICE_EPS: f64 = 1.0;

#[derive(Debug, Error)]
pub enum SegError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("mlp sharing violated: {0}")]
    SharingViolation(String),
    #[error("ground truth must be binary (0/1), found {0}")]
    NonBinaryGt(f64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Shuffle(#[from] ShuffleError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, SegError>;

/// Which fusion path produces the mask features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PipelineMode {
    CompressedBaseline,
    HrOnly,
    HrRfr,
    PusOnly,
    FullRfa,
}

impl PipelineMode {
    pub const ALL: [PipelineMode; 5] = [
        PipelineMode::CompressedBaseline,
        PipelineMode::HrOnly,
        PipelineMode::HrRfr,
        PipelineMode::PusOnly,
        PipelineMode::FullRfa,
    ];

    /// Mask side length for a given model geometry.
    pub fn mask_side(&self, cfg: &ModelConfig) -> usize {
        match self {
            PipelineMode::CompressedBaseline => cfg.n1_side(),
            PipelineMode::HrOnly | PipelineMode::HrRfr | PipelineMode::PusOnly => cfg.n0_side(),
            PipelineMode::FullRfa => cfg.n0_side() * cfg.shuffle_s,
        }
    }

    pub fn needs_hq(&self) -> bool {
        matches!(self, PipelineMode::HrOnly | PipelineMode::HrRfr | PipelineMode::FullRfa)
    }

    pub fn needs_pus(&self) -> bool {
        matches!(self, PipelineMode::PusOnly | PipelineMode::FullRfa)
    }
}

/// How many distinct MLP-with-pixel-unshuffle weight sets exist.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MlpSharing {
    /// One MLP for everything.
    Shared1,
    /// One MLP for the LLM-free features (`F_v1`, `F_v1hq`), a distinct one
    /// for the LLM-processed ones (`F_img`, `F_seg`). The default.
    Shared2,
    /// Independent MLPs for `F_v1`, `F_v1hq`, and `F_img`/`F_seg`.
    Independent3,
}

/// How the uncompressed branch `F_v1hq` is produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Retention {
    SelfReplicate,
    Scanning,
}

/// The named feature maps of one forward pass.
pub struct FeatureBundle {
    pub f_v0: GridFeatures,
    pub f_v1: GridFeatures,
    pub f_v1hq: Option<GridFeatures>,
    pub f_img: GridFeatures,
    /// `[1, d]` hidden state of the segmentation slot.
    pub f_seg: Tensor,
}

impl FeatureBundle {
    fn hq(&self) -> Result<&GridFeatures> {
        self.f_v1hq
            .as_ref()
            .ok_or_else(|| SegError::ShapeMismatch("bundle has no uncompressed branch".into()))
    }

    fn check(&self, spec: &ShuffleSpec) -> Result<()> {
        let alpha = spec.alpha();
        if self.f_img.tokens() != self.f_v1.tokens() || self.f_img.dim != self.f_v1.dim {
            return Err(SegError::ShapeMismatch(format!(
                "F_img {}x{} vs F_v1 {}x{}",
                self.f_img.tokens(),
                self.f_img.dim,
                self.f_v1.tokens(),
                self.f_v1.dim
            )));
        }
        if let Some(hq) = &self.f_v1hq {
            if hq.tokens() != alpha * self.f_v1.tokens() || hq.dim != self.f_v1.dim {
                return Err(SegError::ShapeMismatch(format!(
                    "F_v1hq {}x{} inconsistent with alpha {} x F_v1 {}x{}",
                    hq.tokens(),
                    hq.dim,
                    alpha,
                    self.f_v1.tokens(),
                    self.f_v1.dim
                )));
            }
        }
        Ok(())
    }
}

/// The pixel-unshuffle MLPs wired per sharing mode. Weight sharing is by
/// storage identity, so "shared" paths cannot drift apart during training.
pub struct RfaMlps {
    pub v1: Mlp,
    pub v1hq: Mlp,
    pub img: Mlp,
}

impl RfaMlps {
    pub fn validate(&self, sharing: MlpSharing) -> Result<()> {
        match sharing {
            MlpSharing::Shared1 => {
                if !(self.v1.shares_weights_with(&self.v1hq) && self.v1.shares_weights_with(&self.img)) {
                    return Err(SegError::SharingViolation(
                        "single-MLP mode requires one weight set for all three paths".into(),
                    ));
                }
            }
            MlpSharing::Shared2 => {
                if !self.v1.shares_weights_with(&self.v1hq) {
                    return Err(SegError::SharingViolation(
                        "two-MLP mode requires the F_v1 and F_v1hq paths to share weights".into(),
                    ));
                }
            }
            MlpSharing::Independent3 => {}
        }
        Ok(())
    }
}

/// Residual features refilling: `F_img' = F_v1hq + upsample(F_img - F_v1)`.
pub fn residual_refill(
    g: &mut Graph,
    b: &FeatureBundle,
    spec: &ShuffleSpec,
    upsample: Upsample,
) -> Result<GridFeatures> {
    b.check(spec)?;
    let hq = b.hq()?;
    let residual = g.sub(&b.f_img.data, &b.f_v1.data)?;
    let residual = GridFeatures::new(b.f_v1.h, b.f_v1.w, b.f_v1.dim, residual)?;
    let up = upsample.apply(g, &residual, spec.s)?;
    let fused = g.add(&hq.data, &up.data)?;
    Ok(GridFeatures::new(hq.h, hq.w, hq.dim, fused)?)
}

/// Residual features amplifier:
/// `F_rfa = pus'(F_img) - pus(F_v1)` (at `N0` tokens), then
/// `F_img' = pus(F_v1hq) + upsample(F_rfa)` at `alpha * N0` tokens.
pub fn residual_amplify(
    g: &mut Graph,
    b: &FeatureBundle,
    spec: &ShuffleSpec,
    sharing: MlpSharing,
    mlps: &RfaMlps,
    upsample: Upsample,
) -> Result<GridFeatures> {
    b.check(spec)?;
    mlps.validate(sharing)?;
    let hq = b.hq()?;
    let expanded_img = pixel_unshuffle_expand(g, &b.f_img, spec, &mlps.img)?;
    let expanded_v1 = pixel_unshuffle_expand(g, &b.f_v1, spec, &mlps.v1)?;
    let rfa = g.sub(&expanded_img.data, &expanded_v1.data)?;
    let rfa = GridFeatures::new(expanded_img.h, expanded_img.w, expanded_img.dim, rfa)?;
    let base = pixel_unshuffle_expand(g, hq, spec, &mlps.v1hq)?;
    let up = upsample.apply(g, &rfa, spec.s)?;
    let fused = g.add(&base.data, &up.data)?;
    Ok(GridFeatures::new(base.h, base.w, base.dim, fused)?)
}

/// Post-process the segmentation embedding: expand through the LLM-side
/// pixel-unshuffle MLP and average the `alpha` chunks back to width `d`.
pub fn seg_embed_post(
    g: &mut Graph,
    f_seg: &Tensor,
    mlp_prime: &Mlp,
    spec: &ShuffleSpec,
) -> Result<Tensor> {
    let d = spec.d;
    if f_seg.shape() != [1, d] {
        return Err(SegError::ShapeMismatch(format!(
            "segmentation embedding must be [1, {d}], got {:?}",
            f_seg.shape()
        )));
    }
    let alpha = spec.alpha();
    if mlp_prime.dout() != alpha * d {
        return Err(ShuffleError::DimMismatch {
            what: "seg post mlp output",
            expected: alpha * d,
            got: mlp_prime.dout(),
        }
        .into());
    }
    let y = mlp_prime.forward(g, f_seg)?;
    let chunks = g.reshape(&y, &[alpha, d])?;
    let mean = g.mean_axis(&chunks, 0)?;
    Ok(g.reshape(&mean, &[1, d])?)
}

/// The dot-product mask head: `logit[i] = <F_img'[i], F_seg'> / sqrt(d)`.
pub fn predict_mask(g: &mut Graph, img_post: &GridFeatures, seg_post: &Tensor) -> Result<Tensor> {
    let d = img_post.dim;
    if seg_post.shape() != [1, d] {
        return Err(SegError::ShapeMismatch(format!(
            "seg embedding [1, {d}] expected, got {:?}",
            seg_post.shape()
        )));
    }
    let seg_col = g.permute(seg_post, &[1, 0])?;
    let scores = g.matmul(&img_post.data, &seg_col)?;
    let scaled = g.scale(&scores, 1.0 / (d as f64).sqrt())?;
    Ok(g.reshape(&scaled, &[img_post.tokens()])?)
}

fn check_binary(gt: &[f64]) -> Result<()> {
    for &v in gt {
        if v != 0.0 && v != 1.0 {
            return Err(SegError::NonBinaryGt(v));
        }
    }
    Ok(())
}

/// Pixel-level binary cross-entropy over mask logits (mean, stable form).
pub fn bce_loss(g: &mut Graph, logits: &Tensor, gt: &[f64]) -> Result<Tensor> {
    check_binary(gt)?;
    if gt.len() != logits.numel() {
        return Err(SegError::ShapeMismatch(format!(
            "{} logits vs {} ground-truth pixels",
            logits.numel(),
            gt.len()
        )));
    }
    Ok(g.bce_with_logits(logits, Arc::new(gt.to_vec()))?)
}

/// Soft DICE loss over mask logits.
pub fn dice_loss(g: &mut Graph, logits: &Tensor, gt: &[f64]) -> Result<Tensor> {
    check_binary(gt)?;
    if gt.len() != logits.numel() {
        return Err(SegError::ShapeMismatch(format!(
            "{} logits vs {} ground-truth pixels",
            logits.numel(),
            gt.len()
        )));
    }
    Ok(g.dice_with_logits(logits, Arc::new(gt.to_vec()), DICE_EPS)?)
}

/// Mean next-token cross-entropy over answer positions only. A sample with
/// no answer positions contributes zero.
pub fn text_ce_loss(
    g: &mut Graph,
    logits: &Tensor,
    answer_ids: &[usize],
    layout: &TokenLayout,
) -> Result<Tensor> {
    let positions = layout.answer_positions();
    if positions.len() != answer_ids.len() {
        return Err(SegError::ShapeMismatch(format!(
            "{} answer positions vs {} answer ids",
            positions.len(),
            answer_ids.len()
        )));
    }
    if positions.is_empty() {
        return Ok(Tensor::scalar(0.0)?);
    }
    let rows: Vec<usize> = positions.iter().map(|&p| p - 1).collect();
    Ok(g.next_token_cross_entropy(logits, Arc::new(rows), Arc::new(answer_ids.to_vec()))?)
}

/// `L = L_text + L_bce + L_dice`, unweighted.
pub fn total_loss(g: &mut Graph, text: &Tensor, bce: &Tensor, dice: &Tensor) -> Result<Tensor> {
    let tb = g.add(text, bce)?;
    Ok(g.add(&tb, dice)?)
}

// ---- full pipeline ------------------------------------------------------------

struct MlpParams {
    ln_g: ParamId,
    ln_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl MlpParams {
    fn init<R: rand::Rng>(
        ps: &mut ParamSet,
        rng: &mut R,
        prefix: &str,
        din: usize,
        dout: usize,
    ) -> MlpParams {
        let hidden = dout * 2;
        MlpParams {
            ln_g: ps.register(&format!("{prefix}.ln.g"), Tensor::param(&[din], vec![1.0; din]).unwrap()),
            ln_b: ps.register(&format!("{prefix}.ln.b"), Tensor::param(&[din], vec![0.0; din]).unwrap()),
            w1: ps.register(&format!("{prefix}.w1"), crate::model::init_normal(rng, &[din, hidden], 0.02)),
            b1: ps.register(&format!("{prefix}.b1"), Tensor::param(&[hidden], vec![0.0; hidden]).unwrap()),
            w2: ps.register(&format!("{prefix}.w2"), crate::model::init_normal(rng, &[hidden, dout], 0.02)),
            b2: ps.register(&format!("{prefix}.b2"), Tensor::param(&[dout], vec![0.0; dout]).unwrap()),
        }
    }

    fn view(&self, ps: &ParamSet) -> Mlp {
        Mlp {
            norm: Some((ps.get(self.ln_g).clone(), ps.get(self.ln_b).clone())),
            w1: ps.get(self.w1).clone(),
            b1: ps.get(self.b1).clone(),
            act: Activation::Gelu,
            w2: ps.get(self.w2).clone(),
            b2: ps.get(self.b2).clone(),
        }
    }
}

/// Which fusion path, retention strategy, sharing scheme, and attention mask
/// a forward pass uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PipelineSettings {
    pub mode: PipelineMode,
    pub retention: Retention,
    pub sharing: MlpSharing,
    pub mask_variant: MaskVariant,
    pub upsample: Upsample,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        PipelineSettings {
            mode: PipelineMode::FullRfa,
            retention: Retention::SelfReplicate,
            sharing: MlpSharing::Shared2,
            mask_variant: MaskVariant::ImgBidirSeg,
            upsample: Upsample::Nearest,
        }
    }
}

/// One tokenized training/eval sample as consumed by the pipeline.
pub struct SampleInput<'a> {
    /// `[H, W, 3]` image in `[0,1]`, row-major.
    pub image: &'a [f64],
    pub prefix: &'a [usize],
    pub suffix: &'a [usize],
    pub answer: &'a [usize],
    /// Present on segmentation samples: full-resolution binary mask.
    pub gt_mask: Option<&'a [f64]>,
}

pub struct ForwardOutput {
    /// Mask logits at the mode's native resolution, when the sample carries a
    /// segmentation slot.
    pub mask_logits: Option<Tensor>,
    pub mask_side: usize,
    pub text_logits: Tensor,
    pub layout: TokenLayout,
}

/// Model plus the segmentation-side adapters: the compression MLP shared by
/// the compressed and retained branches, and the pixel-unshuffle MLPs.
pub struct SegPipeline {
    pub model: ToyModel,
    compress: MlpParams,
    pus_v1: MlpParams,
    pus_v1hq: MlpParams,
    pus_prime: MlpParams,
    pub seg_token: usize,
}

impl SegPipeline {
    /// Register all parameters. Every sharing/mode variant registers the same
    /// set in the same order, so a fixed seed yields identical shared weights
    /// across ablation cells.
    pub fn init<R: rand::Rng>(
        cfg: &ModelConfig,
        seg_token: usize,
        ps: &mut ParamSet,
        rng: &mut R,
    ) -> Result<SegPipeline> {
        let model = ToyModel::init(cfg, ps, rng)?;
        let spec = cfg.shuffle_spec();
        let alpha = spec.alpha();
        let compress = MlpParams::init(ps, rng, "compress", alpha * cfg.d0, cfg.d);
        let pus_v1 = MlpParams::init(ps, rng, "pus.base", cfg.d, alpha * cfg.d);
        let pus_v1hq = MlpParams::init(ps, rng, "pus.hq", cfg.d, alpha * cfg.d);
        let pus_prime = MlpParams::init(ps, rng, "pus.llm", cfg.d, alpha * cfg.d);
        Ok(SegPipeline {
            model,
            compress,
            pus_v1,
            pus_v1hq,
            pus_prime,
            seg_token,
        })
    }

    pub fn compress_mlp(&self, ps: &ParamSet) -> Mlp {
        self.compress.view(ps)
    }

    pub fn rfa_mlps(&self, ps: &ParamSet, sharing: MlpSharing) -> RfaMlps {
        match sharing {
            MlpSharing::Shared1 => {
                let m = self.pus_v1.view(ps);
                RfaMlps { v1: m.clone(), v1hq: m.clone(), img: m }
            }
            MlpSharing::Shared2 => {
                let base = self.pus_v1.view(ps);
                RfaMlps { v1: base.clone(), v1hq: base, img: self.pus_prime.view(ps) }
            }
            MlpSharing::Independent3 => RfaMlps {
                v1: self.pus_v1.view(ps),
                v1hq: self.pus_v1hq.view(ps),
                img: self.pus_prime.view(ps),
            },
        }
    }

    /// Full forward pass for one sample under the given settings.
    pub fn forward(
        &self,
        g: &mut Graph,
        ps: &ParamSet,
        settings: &PipelineSettings,
        input: &SampleInput,
    ) -> Result<ForwardOutput> {
        let cfg = &self.model.cfg;
        let spec = cfg.shuffle_spec();
        let with_seg = input.gt_mask.is_some();

        let f_v0 = self.model.encode_image(g, ps, input.image)?;
        let compress = self.compress_mlp(ps);
        let f_v1 = pixel_shuffle_compress(g, &f_v0, &spec, &compress)?;
        let f_v1hq = if with_seg && settings.mode.needs_hq() {
            Some(match settings.retention {
                Retention::SelfReplicate => self_replicate_compress(g, &f_v0, &spec, &compress)?,
                Retention::Scanning => scanning_compress(g, &f_v0, &spec, &compress)?,
            })
        } else {
            None
        };

        let (seq, layout) = self.model.assemble_sequence(
            g,
            ps,
            &f_v1,
            input.prefix,
            input.suffix,
            with_seg,
            input.answer,
            self.seg_token,
        )?;
        let variant = settings.mask_variant.effective_for(&layout);
        let mask = build_attention_mask(&layout, variant)?;
        let (hidden, text_logits) = self.model.llm_forward(g, ps, &seq, &mask)?;

        if !with_seg {
            return Ok(ForwardOutput {
                mask_logits: None,
                mask_side: 0,
                text_logits,
                layout,
            });
        }

        let f_img_rows = self.model.extract_img(g, &hidden, &layout)?;
        let n1 = cfg.n1_side();
        let f_img = GridFeatures::new(n1, n1, cfg.d, f_img_rows)?;
        let f_seg = self.model.extract_seg(g, &hidden, &layout)?;
        let bundle = FeatureBundle {
            f_v0,
            f_v1,
            f_v1hq,
            f_img,
            f_seg,
        };
        let mlps = self.rfa_mlps(ps, settings.sharing);

        let (img_post, seg_post) = match settings.mode {
            PipelineMode::CompressedBaseline => (bundle.f_img.clone(), bundle.f_seg.clone()),
            PipelineMode::HrOnly => (bundle.hq()?.clone(), bundle.f_seg.clone()),
            PipelineMode::HrRfr => (
                residual_refill(g, &bundle, &spec, settings.upsample)?,
                bundle.f_seg.clone(),
            ),
            PipelineMode::PusOnly => {
                let expanded = pixel_unshuffle_expand(g, &bundle.f_img, &spec, &mlps.img)?;
                let seg = seg_embed_post(g, &bundle.f_seg, &mlps.img, &spec)?;
                (expanded, seg)
            }
            PipelineMode::FullRfa => {
                let fused = residual_amplify(g, &bundle, &spec, settings.sharing, &mlps, settings.upsample)?;
                let seg = seg_embed_post(g, &bundle.f_seg, &mlps.img, &spec)?;
                (fused, seg)
            }
        };
        let mask_logits = predict_mask(g, &img_post, &seg_post)?;
        Ok(ForwardOutput {
            mask_side: img_post.h,
            mask_logits: Some(mask_logits),
            text_logits,
            layout,
        })
    }
}
