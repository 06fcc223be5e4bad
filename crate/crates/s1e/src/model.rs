//! The miniature multimodal transformer.
//!
//! A patch-embedding vision encoder produces grid features; compressed
//! features are spliced into a token sequence together with text, an optional
//! dedicated segmentation slot, and answer tokens; a pre-norm transformer
//! stack consumes the sequence under a configurable attention mask.
//!
//! The mask variants form a cumulative ladder. Starting from the causal
//! triangle, each step adds visibility without ever removing a causal edge,
//! so autoregressive text decoding stays well-defined under all of them:
//!
//! * `Causal` - lower-triangular (inclusive).
//! * `ImgBidir` - adds bidirectional attention among image tokens.
//! * `ImgBidirSeg` - additionally lets image tokens read the segmentation
//!   slot, opening the image-to-query pathway (the default).
//! * `ImgBidirSegText` - additionally lets image tokens read text tokens.
//! * `FullBidir` - everything sees everything.

use std::ops::Range;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::autograd::{Graph, ParamId, ParamSet, Tensor, TensorError, MASK_NEG};
use crate::shuffle::{GridFeatures, ShuffleError, ShuffleSpec};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("bad image shape: expected {expected} pixels ({side}x{side}x3), got {got}")]
    BadImageShape {
        expected: usize,
        side: usize,
        got: usize,
    },
    #[error("mask variant needs a segmentation slot but the layout has none")]
    NoSegToken,
    #[error("token id {id} exceeds vocabulary size {vocab}")]
    VocabOverflow { id: usize, vocab: usize },
    #[error("sequence length {len} exceeds the position table ({max})")]
    SequenceTooLong { len: usize, max: usize },
    #[error("attention mask is {mask_len}x{mask_len} but the sequence has {seq_len} positions")]
    MaskShapeMismatch { mask_len: usize, seq_len: usize },
    #[error("invalid token layout: {0}")]
    BadLayout(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Shuffle(#[from] ShuffleError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Role of each sequence position.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenRole {
    Text,
    Img,
    Seg,
    Answer,
}

/// Per-position role assignment plus the structural facts the attention-mask
/// builder needs: one contiguous image span and at most one segmentation slot
/// placed after it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenLayout {
    pub roles: Vec<TokenRole>,
    pub img_span: Range<usize>,
    pub seg_index: Option<usize>,
}

impl TokenLayout {
    pub fn new(roles: Vec<TokenRole>) -> Result<TokenLayout> {
        let img: Vec<usize> = roles
            .iter()
            .enumerate()
            .filter(|(_, r)| **r == TokenRole::Img)
            .map(|(i, _)| i)
            .collect();
        if img.is_empty() {
            return Err(ModelError::BadLayout("no image positions".into()));
        }
        let span = img[0]..img[img.len() - 1] + 1;
        if span.len() != img.len() {
            return Err(ModelError::BadLayout(
                "image positions must form one contiguous span".into(),
            ));
        }
        let segs: Vec<usize> = roles
            .iter()
            .enumerate()
            .filter(|(_, r)| **r == TokenRole::Seg)
            .map(|(i, _)| i)
            .collect();
        if segs.len() > 1 {
            return Err(ModelError::BadLayout("more than one segmentation slot".into()));
        }
        let seg_index = segs.first().copied();
        if let Some(s) = seg_index {
            if s < span.end {
                return Err(ModelError::BadLayout(
                    "segmentation slot must come after the image span".into(),
                ));
            }
        }
        Ok(TokenLayout {
            roles,
            img_span: span,
            seg_index,
        })
    }

    pub fn len(&self) -> usize {
        self.roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }

    pub fn answer_positions(&self) -> Vec<usize> {
        self.roles
            .iter()
            .enumerate()
            .filter(|(_, r)| **r == TokenRole::Answer)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Attention-mask variants, ordered by growing visibility.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MaskVariant {
    Causal,
    ImgBidir,
    ImgBidirSeg,
    ImgBidirSegText,
    FullBidir,
}

impl MaskVariant {
    pub const ALL: [MaskVariant; 5] = [
        MaskVariant::Causal,
        MaskVariant::ImgBidir,
        MaskVariant::ImgBidirSeg,
        MaskVariant::ImgBidirSegText,
        MaskVariant::FullBidir,
    ];

    /// The variant actually used for a layout: segmentation-specific edges
    /// degrade gracefully when the layout carries no segmentation slot (text
    /// answering keeps its causal behaviour on VQA samples).
    pub fn effective_for(&self, layout: &TokenLayout) -> MaskVariant {
        match self {
            MaskVariant::ImgBidirSeg | MaskVariant::ImgBidirSegText if layout.seg_index.is_none() => {
                MaskVariant::ImgBidir
            }
            v => *v,
        }
    }
}

/// Boolean visibility matrix; `true` at `(q, k)` means query `q` may attend
/// to key `k`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnMask {
    pub len: usize,
    pub visible: Vec<bool>,
}

impl AttnMask {
    pub fn at(&self, q: usize, k: usize) -> bool {
        self.visible[q * self.len + k]
    }

    /// Additive bias tensor: 0 on visible pairs, a large negative constant on
    /// forbidden ones (softmax underflows those weights to exactly zero).
    pub fn to_bias(&self) -> Tensor {
        let data = self
            .visible
            .iter()
            .map(|&v| if v { 0.0 } else { MASK_NEG })
            .collect();
        Tensor::new(&[self.len, self.len], data).expect("finite bias")
    }

    /// Transitive closure of the visibility relation: whether information at
    /// key `k` can reach query `q` through any number of attention hops.
    pub fn reachability(&self) -> AttnMask {
        let n = self.len;
        let mut reach = self.visible.clone();
        loop {
            let mut changed = false;
            for q in 0..n {
                for mid in 0..n {
                    if reach[q * n + mid] {
                        for k in 0..n {
                            if reach[mid * n + k] && !reach[q * n + k] {
                                reach[q * n + k] = true;
                                changed = true;
                            }
                        }
                    }
                }
            }
            if !changed {
                break;
            }
        }
        AttnMask { len: n, visible: reach }
    }
}

/// Build the visibility matrix for a layout under a mask variant.
///
/// Every variant keeps self-visibility and the full causal relation; the
/// segmentation variants require the layout to actually contain a
/// segmentation slot.
pub fn build_attention_mask(layout: &TokenLayout, variant: MaskVariant) -> Result<AttnMask> {
    let l = layout.len();
    if matches!(variant, MaskVariant::ImgBidirSeg | MaskVariant::ImgBidirSegText)
        && layout.seg_index.is_none()
    {
        return Err(ModelError::NoSegToken);
    }
    let mut visible = vec![false; l * l];
    for q in 0..l {
        for k in 0..l {
            let causal = k <= q;
            let img_pair = layout.roles[q] == TokenRole::Img && layout.roles[k] == TokenRole::Img;
            let img_to_seg = layout.roles[q] == TokenRole::Img && Some(k) == layout.seg_index;
            let img_to_text =
                layout.roles[q] == TokenRole::Img && layout.roles[k] == TokenRole::Text;
            visible[q * l + k] = match variant {
                MaskVariant::Causal => causal,
                MaskVariant::ImgBidir => causal || img_pair,
                MaskVariant::ImgBidirSeg => causal || img_pair || img_to_seg,
                MaskVariant::ImgBidirSegText => causal || img_pair || img_to_seg || img_to_text,
                MaskVariant::FullBidir => true,
            };
        }
    }
    Ok(AttnMask { len: l, visible })
}

/// Model hyperparameters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Square image side in pixels.
    pub image_size: usize,
    pub patch_size: usize,
    /// Encoder channel width.
    pub d0: usize,
    /// LLM channel width.
    pub d: usize,
    pub enc_depth: usize,
    pub enc_heads: usize,
    pub llm_depth: usize,
    pub llm_heads: usize,
    pub vocab: usize,
    /// Position-table size for the LLM sequence.
    pub max_seq: usize,
    /// Pixel-shuffle stride per side.
    pub shuffle_s: usize,
}

impl Default for ModelConfig {
    fn default() -> ModelConfig {
        ModelConfig {
            image_size: 64,
            patch_size: 8,
            d0: 32,
            d: 64,
            enc_depth: 2,
            enc_heads: 4,
            llm_depth: 4,
            llm_heads: 4,
            vocab: 64,
            max_seq: 48,
            shuffle_s: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.image_size % self.patch_size == 0
            && (self.image_size / self.patch_size) % self.shuffle_s == 0
            && self.d % self.llm_heads == 0
            && self.d0 % self.enc_heads == 0
            && self.vocab > 0
            && self.enc_depth > 0
            && self.llm_depth > 0;
        if !ok {
            return Err(ModelError::BadLayout(format!("inconsistent model config {self:?}")));
        }
        Ok(())
    }

    /// Patch grid side: the encoder emits `n0_side^2` tokens.
    pub fn n0_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Compressed grid side after pixel shuffle.
    pub fn n1_side(&self) -> usize {
        self.n0_side() / self.shuffle_s
    }

    pub fn shuffle_spec(&self) -> ShuffleSpec {
        ShuffleSpec::new(self.shuffle_s, self.d0, self.d)
    }
}

struct BlockParams {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Encoder plus LLM parameters (the model proper; the segmentation-side MLPs
/// live with the pipeline in [`crate::seg`]).
pub struct ToyModel {
    pub cfg: ModelConfig,
    patch_w: ParamId,
    patch_b: ParamId,
    enc_pos: ParamId,
    enc_blocks: Vec<BlockParams>,
    embed: ParamId,
    llm_pos: ParamId,
    llm_blocks: Vec<BlockParams>,
    final_g: ParamId,
    final_b: ParamId,
    lm_w: ParamId,
    lm_b: ParamId,
}

pub fn init_normal<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("valid normal");
    let numel = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| dist.sample(rng)).collect();
    Tensor::param(shape, data).expect("finite init")
}

fn ones_param(shape: &[usize]) -> Tensor {
    Tensor::param(shape, vec![1.0; shape.iter().product()]).expect("finite")
}

fn zeros_param(shape: &[usize]) -> Tensor {
    Tensor::param(shape, vec![0.0; shape.iter().product()]).expect("finite")
}

const INIT_STD: f64 = 0.02;

fn init_block<R: Rng>(ps: &mut ParamSet, rng: &mut R, prefix: &str, d: usize, mlp_hidden: usize) -> BlockParams {
    BlockParams {
        ln1_g: ps.register(&format!("{prefix}.ln1.g"), ones_param(&[d])),
        ln1_b: ps.register(&format!("{prefix}.ln1.b"), zeros_param(&[d])),
        wq: ps.register(&format!("{prefix}.attn.wq"), init_normal(rng, &[d, d], INIT_STD)),
        bq: ps.register(&format!("{prefix}.attn.bq"), zeros_param(&[d])),
        wk: ps.register(&format!("{prefix}.attn.wk"), init_normal(rng, &[d, d], INIT_STD)),
        bk: ps.register(&format!("{prefix}.attn.bk"), zeros_param(&[d])),
        wv: ps.register(&format!("{prefix}.attn.wv"), init_normal(rng, &[d, d], INIT_STD)),
        bv: ps.register(&format!("{prefix}.attn.bv"), zeros_param(&[d])),
        wo: ps.register(&format!("{prefix}.attn.wo"), init_normal(rng, &[d, d], INIT_STD)),
        bo: ps.register(&format!("{prefix}.attn.bo"), zeros_param(&[d])),
        ln2_g: ps.register(&format!("{prefix}.ln2.g"), ones_param(&[d])),
        ln2_b: ps.register(&format!("{prefix}.ln2.b"), zeros_param(&[d])),
        w1: ps.register(&format!("{prefix}.mlp.w1"), init_normal(rng, &[d, mlp_hidden], INIT_STD)),
        b1: ps.register(&format!("{prefix}.mlp.b1"), zeros_param(&[mlp_hidden])),
        w2: ps.register(&format!("{prefix}.mlp.w2"), init_normal(rng, &[mlp_hidden, d], INIT_STD)),
        b2: ps.register(&format!("{prefix}.mlp.b2"), zeros_param(&[d])),
    }
}

impl ToyModel {
    pub fn init<R: Rng>(cfg: &ModelConfig, ps: &mut ParamSet, rng: &mut R) -> Result<ToyModel> {
        cfg.validate()?;
        let patch_in = cfg.patch_size * cfg.patch_size * 3;
        let n0 = cfg.n0_side() * cfg.n0_side();
        let patch_w = ps.register("encoder.patch.w", init_normal(rng, &[patch_in, cfg.d0], INIT_STD));
        let patch_b = ps.register("encoder.patch.b", zeros_param(&[cfg.d0]));
        let enc_pos = ps.register("encoder.pos", init_normal(rng, &[n0, cfg.d0], INIT_STD));
        let enc_blocks = (0..cfg.enc_depth)
            .map(|i| init_block(ps, rng, &format!("encoder.block{i}"), cfg.d0, cfg.d0 * 4))
            .collect();
        let embed = ps.register("llm.embed", init_normal(rng, &[cfg.vocab, cfg.d], INIT_STD));
        let llm_pos = ps.register("llm.pos", init_normal(rng, &[cfg.max_seq, cfg.d], INIT_STD));
        let llm_blocks = (0..cfg.llm_depth)
            .map(|i| init_block(ps, rng, &format!("llm.block{i}"), cfg.d, cfg.d * 4))
            .collect();
        let final_g = ps.register("llm.final.g", ones_param(&[cfg.d]));
        let final_b = ps.register("llm.final.b", zeros_param(&[cfg.d]));
        let lm_w = ps.register("llm.head.w", init_normal(rng, &[cfg.d, cfg.vocab], INIT_STD));
        let lm_b = ps.register("llm.head.b", zeros_param(&[cfg.vocab]));
        Ok(ToyModel {
            cfg: cfg.clone(),
            patch_w,
            patch_b,
            enc_pos,
            enc_blocks,
            embed,
            llm_pos,
            llm_blocks,
            final_g,
            final_b,
            lm_w,
            lm_b,
        })
    }

    /// Encode an `[H, W, 3]` image (row-major, values in `[0,1]`) into the
    /// patch-token grid `F_v0`.
    pub fn encode_image(&self, g: &mut Graph, ps: &ParamSet, image: &[f64]) -> Result<GridFeatures> {
        let side = self.cfg.image_size;
        if image.len() != side * side * 3 {
            return Err(ModelError::BadImageShape {
                expected: side * side * 3,
                side,
                got: image.len(),
            });
        }
        let p = self.cfg.patch_size;
        let grid = self.cfg.n0_side();
        let mut patches = Vec::with_capacity(grid * grid * p * p * 3);
        for pr in 0..grid {
            for pc in 0..grid {
                for dy in 0..p {
                    for dx in 0..p {
                        let pix = ((pr * p + dy) * side + (pc * p + dx)) * 3;
                        patches.extend_from_slice(&image[pix..pix + 3]);
                    }
                }
            }
        }
        let patches = Tensor::new(&[grid * grid, p * p * 3], patches)?;
        let mut x = g.affine(&patches, ps.get(self.patch_w), ps.get(self.patch_b))?;
        x = g.add(&x, ps.get(self.enc_pos))?;
        let full = AttnMask {
            len: grid * grid,
            visible: vec![true; grid * grid * grid * grid],
        };
        let bias = full.to_bias();
        for block in &self.enc_blocks {
            x = block_forward(g, ps, block, &x, &bias, self.cfg.enc_heads)?;
        }
        Ok(GridFeatures::new(grid, grid, self.cfg.d0, x)?)
    }

    /// Splice compressed image features into a token sequence:
    /// `[text prefix][image span][text suffix][seg slot][answer]`, with learned
    /// absolute position embeddings added over the whole sequence.
    pub fn assemble_sequence(
        &self,
        g: &mut Graph,
        ps: &ParamSet,
        f_v1: &GridFeatures,
        prefix: &[usize],
        suffix: &[usize],
        with_seg: bool,
        answer: &[usize],
        seg_token_id: usize,
    ) -> Result<(Tensor, TokenLayout)> {
        for &id in prefix.iter().chain(suffix).chain(answer).chain(&[seg_token_id]) {
            if id >= self.cfg.vocab {
                return Err(ModelError::VocabOverflow {
                    id,
                    vocab: self.cfg.vocab,
                });
            }
        }
        let n_img = f_v1.tokens();
        let len = prefix.len() + n_img + suffix.len() + usize::from(with_seg) + answer.len();
        if len > self.cfg.max_seq {
            return Err(ModelError::SequenceTooLong {
                len,
                max: self.cfg.max_seq,
            });
        }
        let d = self.cfg.d;
        let embed = ps.get(self.embed);
        let mut parts: Vec<Tensor> = Vec::new();
        let mut roles: Vec<TokenRole> = Vec::new();
        if !prefix.is_empty() {
            parts.push(g.embedding_lookup(embed, Arc::new(prefix.to_vec()))?);
            roles.extend(std::iter::repeat(TokenRole::Text).take(prefix.len()));
        }
        parts.push(f_v1.data.clone());
        roles.extend(std::iter::repeat(TokenRole::Img).take(n_img));
        if !suffix.is_empty() {
            parts.push(g.embedding_lookup(embed, Arc::new(suffix.to_vec()))?);
            roles.extend(std::iter::repeat(TokenRole::Text).take(suffix.len()));
        }
        if with_seg {
            parts.push(g.embedding_lookup(embed, Arc::new(vec![seg_token_id]))?);
            roles.push(TokenRole::Seg);
        }
        if !answer.is_empty() {
            parts.push(g.embedding_lookup(embed, Arc::new(answer.to_vec()))?);
            roles.extend(std::iter::repeat(TokenRole::Answer).take(answer.len()));
        }
        // Row-axis concatenation via flat views.
        let mut flat_parts = Vec::with_capacity(parts.len());
        for p in &parts {
            flat_parts.push(g.reshape(p, &[1, p.numel()])?);
        }
        let refs: Vec<&Tensor> = flat_parts.iter().collect();
        let cat = g.concat_lastdim(&refs)?;
        let mut seq = g.reshape(&cat, &[len, d])?;

        let pos_rows = g.gather(ps.get(self.llm_pos), Arc::new((0..len).collect()))?;
        seq = g.add(&seq, &pos_rows)?;
        let layout = TokenLayout::new(roles)?;
        Ok((seq, layout))
    }

    /// Run the transformer stack: returns final hidden states `[L, d]` and
    /// text logits `[L, vocab]`.
    pub fn llm_forward(
        &self,
        g: &mut Graph,
        ps: &ParamSet,
        seq: &Tensor,
        mask: &AttnMask,
    ) -> Result<(Tensor, Tensor)> {
        let l = seq.shape()[0];
        if mask.len != l {
            return Err(ModelError::MaskShapeMismatch {
                mask_len: mask.len,
                seq_len: l,
            });
        }
        let bias = mask.to_bias();
        let mut x = seq.clone();
        for block in &self.llm_blocks {
            x = block_forward(g, ps, block, &x, &bias, self.cfg.llm_heads)?;
        }
        let hidden = g.layernorm(&x, ps.get(self.final_g), ps.get(self.final_b))?;
        let logits = g.affine(&hidden, ps.get(self.lm_w), ps.get(self.lm_b))?;
        Ok((hidden, logits))
    }

    /// Rows of the final hidden states at the image span (`F_img`).
    pub fn extract_img(&self, g: &mut Graph, hidden: &Tensor, layout: &TokenLayout) -> Result<Tensor> {
        let idx: Vec<usize> = layout.img_span.clone().collect();
        Ok(g.gather(hidden, Arc::new(idx))?)
    }

    /// Final hidden state at the segmentation slot (`F_seg`), as `[1, d]`.
    pub fn extract_seg(&self, g: &mut Graph, hidden: &Tensor, layout: &TokenLayout) -> Result<Tensor> {
        let seg = layout.seg_index.ok_or(ModelError::NoSegToken)?;
        Ok(g.gather(hidden, Arc::new(vec![seg]))?)
    }

    pub fn embed_param(&self) -> ParamId {
        self.embed
    }
}

fn block_forward(
    g: &mut Graph,
    ps: &ParamSet,
    p: &BlockParams,
    x: &Tensor,
    mask_bias: &Tensor,
    heads: usize,
) -> Result<Tensor> {
    let d = x.shape()[1];
    let hd = d / heads;
    let normed = g.layernorm(x, ps.get(p.ln1_g), ps.get(p.ln1_b))?;
    let q = g.affine(&normed, ps.get(p.wq), ps.get(p.bq))?;
    let k = g.affine(&normed, ps.get(p.wk), ps.get(p.bk))?;
    let v = g.affine(&normed, ps.get(p.wv), ps.get(p.bv))?;
    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.split_lastdim(&q, h * hd, hd)?;
        let kh = g.split_lastdim(&k, h * hd, hd)?;
        let vh = g.split_lastdim(&v, h * hd, hd)?;
        let kt = g.permute(&kh, &[1, 0])?;
        let scores = g.matmul(&qh, &kt)?;
        let scaled = g.scale(&scores, 1.0 / (hd as f64).sqrt())?;
        let masked = g.add(&scaled, mask_bias)?;
        let attn = g.softmax_lastdim(&masked)?;
        head_outs.push(g.matmul(&attn, &vh)?);
    }
    let refs: Vec<&Tensor> = head_outs.iter().collect();
    let concat = g.concat_lastdim(&refs)?;
    let projected = g.affine(&concat, ps.get(p.wo), ps.get(p.bo))?;
    let x = g.add(x, &projected)?;

    let normed2 = g.layernorm(&x, ps.get(p.ln2_g), ps.get(p.ln2_b))?;
    let h1 = g.affine(&normed2, ps.get(p.w1), ps.get(p.b1))?;
    let h1 = g.gelu(&h1)?;
    let h2 = g.affine(&h1, ps.get(p.w2), ps.get(p.b2))?;
    Ok(g.add(&x, &h2)?)
}
